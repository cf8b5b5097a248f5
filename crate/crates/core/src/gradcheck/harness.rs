use std::fmt;

use rand::seq::index::sample;
use rand::Rng;
use rand_chacha::rand_core::SeedableRng;
use rand_chacha::ChaCha8Rng;

use crate::autodiff::{Tape, Var};
use crate::error::Result;
use crate::tensor::Tensor;

/// Central-difference step.
pub const STEP: f64 = 1e-5;

/// Largest gradient magnitude accepted for a parameter the output is
/// invariant to.
pub const INVARIANT_TOLERANCE: f64 = 1e-10;

/// `|a - n| / max(|a|, |n|, 1e-8)`.
pub fn relative_error(analytic: f64, numeric: f64) -> f64 {
    (analytic - numeric).abs() / analytic.abs().max(numeric.abs()).max(1e-8)
}

/// Which coordinates to probe.
#[derive(Clone, Copy, Debug)]
pub enum Coverage {
    All,
    /// A uniformly random subset of this many scalars across all inputs.
    Sample(usize),
}

#[derive(Clone, Debug)]
pub struct Worst {
    pub index: Vec<usize>,
    pub analytic: f64,
    pub numeric: f64,
}

#[derive(Clone, Debug)]
pub struct GroupReport {
    pub name: String,
    pub checked: usize,
    pub max_rel_error: f64,
    pub worst: Option<Worst>,
}

#[derive(Clone, Debug)]
pub struct GradReport {
    pub target: String,
    pub tolerance: f64,
    pub groups: Vec<GroupReport>,
    /// Parameters with an identically zero true gradient, such as a shift
    /// feeding a softmax, with their largest analytic gradient magnitude.
    /// Relative error is undefined for them.
    pub invariant: Vec<(String, f64)>,
}

impl GradReport {
    pub fn max_rel_error(&self) -> f64 {
        self.groups
            .iter()
            .map(|g| g.max_rel_error)
            .fold(0.0, f64::max)
    }

    pub fn passed(&self) -> bool {
        self.max_rel_error() <= self.tolerance
            && self.invariant.iter().all(|(_, g)| *g <= INVARIANT_TOLERANCE)
    }
}

impl fmt::Display for GradReport {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        writeln!(
            f,
            "target={} max_rel_error={:.3e} tolerance={:.0e} status={}",
            self.target,
            self.max_rel_error(),
            self.tolerance,
            if self.passed() { "pass" } else { "FAIL" }
        )?;
        for g in &self.groups {
            write!(
                f,
                "  group={} checked={} max_rel_error={:.3e}",
                g.name, g.checked, g.max_rel_error
            )?;
            if let Some(w) = &g.worst {
                write!(
                    f,
                    " worst={:?} analytic={:.6e} numeric={:.6e}",
                    w.index, w.analytic, w.numeric
                )?;
            }
            writeln!(f)?;
        }
        for (name, g) in &self.invariant {
            writeln!(
                f,
                "  invariant={name} max_abs_grad={g:.3e} tolerance={INVARIANT_TOLERANCE:.0e}"
            )?;
        }
        Ok(())
    }
}

fn unravel(mut flat: usize, shape: &[usize]) -> Vec<usize> {
    let mut index = vec![0; shape.len()];
    for d in (0..shape.len()).rev() {
        index[d] = flat % shape[d];
        flat /= shape[d];
    }
    index
}

/// Uniform magnitudes in `[0.1, 1]` with random sign, keeping inputs away
/// from the kinks of `abs`/`relu`/`prelu`.
pub fn signed_uniform(shape: &[usize], rng: &mut impl Rng) -> Tensor<f64> {
    Tensor::from_fn(shape, |_| {
        let m: f64 = rng.random_range(0.1..1.0);
        if rng.random_bool(0.5) {
            m
        } else {
            -m
        }
    })
}

type Function<'a> = dyn Fn(&mut Tape<f64>, &[Var]) -> Result<Var> + 'a;

struct Scalarized<'a> {
    f: &'a Function<'a>,
    projection: Option<Tensor<f64>>,
}

impl Scalarized<'_> {
    fn eval(&self, tape: &mut Tape<f64>, vars: &[Var]) -> Result<Var> {
        let out = (self.f)(tape, vars)?;
        match &self.projection {
            None => Ok(out),
            Some(r) => {
                let r = tape.constant(r.clone());
                let weighted = tape.mul(out, r)?;
                tape.sum_all(weighted)
            }
        }
    }

    fn value(&self, inputs: &[Tensor<f64>]) -> Result<f64> {
        let mut tape = Tape::new();
        let vars: Vec<Var> = inputs.iter().map(|t| tape.constant(t.clone())).collect();
        let root = self.eval(&mut tape, &vars)?;
        Ok(tape.value(root).item())
    }
}

/// Compares tape gradients of `f` against central differences at every
/// selected input coordinate. Non-scalar outputs are reduced to
/// `sum(out * R)` with a fixed random `R`.
pub fn check_gradients(
    inputs: &[(String, Tensor<f64>)],
    f: &Function<'_>,
    coverage: Coverage,
    seed: u64,
) -> Result<Vec<GroupReport>> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed ^ 0x9e37_79b9_7f4a_7c15);
    let values: Vec<Tensor<f64>> = inputs.iter().map(|(_, t)| t.clone()).collect();

    let projection = {
        let mut tape = Tape::new();
        let vars: Vec<Var> = values.iter().map(|t| tape.constant(t.clone())).collect();
        let out = f(&mut tape, &vars)?;
        let out = tape.value(out);
        (!out.is_scalar()).then(|| Tensor::uniform(out.shape(), -1.0, 1.0, &mut rng))
    };
    let scalar = Scalarized { f, projection };

    let mut tape = Tape::new();
    let vars: Vec<Var> = values.iter().map(|t| tape.leaf(t.clone())).collect();
    let root = scalar.eval(&mut tape, &vars)?;
    let grads = tape.backward(root)?;
    let analytic: Vec<Tensor<f64>> = vars
        .iter()
        .zip(&values)
        .map(|(&v, t)| grads.get_or_zeros(v, t.shape()))
        .collect();

    let total: usize = values.iter().map(Tensor::numel).sum();
    let mut selected: Vec<(usize, usize)> = Vec::new();
    match coverage {
        Coverage::All => {
            for (g, t) in values.iter().enumerate() {
                selected.extend((0..t.numel()).map(|i| (g, i)));
            }
        }
        Coverage::Sample(n) => {
            let mut picks = sample(&mut rng, total, n.min(total)).into_vec();
            picks.sort_unstable();
            let mut offset = 0;
            let mut g = 0;
            for p in picks {
                while p >= offset + values[g].numel() {
                    offset += values[g].numel();
                    g += 1;
                }
                selected.push((g, p - offset));
            }
        }
    }

    let mut reports: Vec<GroupReport> = inputs
        .iter()
        .map(|(name, _)| GroupReport {
            name: name.clone(),
            checked: 0,
            max_rel_error: 0.0,
            worst: None,
        })
        .collect();
    let mut probe = values.clone();
    for (g, i) in selected {
        let original = probe[g].data()[i];
        probe[g].data_mut()[i] = original + STEP;
        let plus = scalar.value(&probe)?;
        probe[g].data_mut()[i] = original - STEP;
        let minus = scalar.value(&probe)?;
        probe[g].data_mut()[i] = original;

        let numeric = (plus - minus) / (2.0 * STEP);
        let a = analytic[g].data()[i];
        let err = relative_error(a, numeric);
        let report = &mut reports[g];
        report.checked += 1;
        if report.worst.is_none() || err > report.max_rel_error {
            report.max_rel_error = err;
            report.worst = Some(Worst {
                index: unravel(i, values[g].shape()),
                analytic: a,
                numeric,
            });
        }
    }
    reports.retain(|r| r.checked > 0);
    Ok(reports)
}
