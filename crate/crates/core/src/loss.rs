//! Training losses on the tape, plain-tensor metrics and error heatmaps.

use std::fmt;
use std::fs;
use std::path::{Path, PathBuf};

use crate::autodiff::{Tape, Var};
use crate::data::encode_ppm;
use crate::error::{Error, Result};
use crate::scalar::Scalar;
use crate::tensor::Tensor;

pub const DEFAULT_TAU: f64 = 10.0;
pub const DEFAULT_FLOOR: f64 = 1e-4;

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct LossConfig {
    /// Weight of the projected-RGB term.
    pub tau: f64,
    /// Lower clamp on the relative-error denominator; `None` divides by the
    /// raw ground truth and rejects non-positive values.
    pub floor: Option<f64>,
}

impl Default for LossConfig {
    fn default() -> Self {
        LossConfig {
            tau: DEFAULT_TAU,
            floor: Some(DEFAULT_FLOOR),
        }
    }
}

impl LossConfig {
    pub fn validate(&self) -> Result<()> {
        if !(self.tau >= 0.0 && self.tau.is_finite()) {
            return Err(Error::config(format!("tau must be >= 0, got {}", self.tau)));
        }
        if let Some(f) = self.floor {
            if !(f > 0.0 && f.is_finite()) {
                return Err(Error::config(format!("floor must be > 0, got {f}")));
            }
        }
        Ok(())
    }
}

/// `1 / max(gt, floor)` per element.
fn reciprocal_denominators<E: Scalar>(gt: &Tensor<E>, floor: Option<f64>) -> Result<Tensor<E>> {
    let data = gt
        .data()
        .iter()
        .map(|&g| {
            let g = g.as_f64();
            match floor {
                Some(f) => Ok(E::of(1.0 / g.max(f))),
                None if g > 0.0 => Ok(E::of(1.0 / g)),
                None => Err(Error::DivisionFloor { value: g, floor: 0.0 }),
            }
        })
        .collect::<Result<_>>()?;
    Tensor::new(gt.shape(), data)
}

/// Mean of `|gt − pred| / max(gt, floor)`. The denominator is taken from the
/// current value of `gt`, so gradients flow through the numerator only.
pub fn mrae<E: Scalar>(tape: &mut Tape<E>, gt: Var, pred: Var, floor: Option<f64>) -> Result<Var> {
    tape.check(gt)?;
    let weights = reciprocal_denominators(tape.value(gt), floor)?;
    let diff = tape.sub(pred, gt)?;
    let diff = tape.abs(diff)?;
    let weights = tape.constant(weights);
    let rel = tape.mul(diff, weights)?;
    tape.mean_all(rel)
}

/// Mean absolute difference between the RGB projections of `gt` and `pred`
/// (`[N, 31, H, W]`). `projection` is `Φ` as a `[3, 31, 1, 1]` kernel.
pub fn css_loss<E: Scalar>(tape: &mut Tape<E>, gt: Var, pred: Var, projection: &Tensor<E>) -> Result<Var> {
    let bands = projection.shape().get(1).copied().unwrap_or(0);
    if tape.shape(pred).get(1) != Some(&bands) || tape.shape(gt) != tape.shape(pred) {
        return Err(Error::ShapeMismatch {
            op: "css loss",
            lhs: tape.shape(pred).to_vec(),
            rhs: projection.shape().to_vec(),
        });
    }
    let phi = tape.constant(projection.clone());
    let gt_rgb = tape.conv2d(gt, phi, None)?;
    let pred_rgb = tape.conv2d(pred, phi, None)?;
    let diff = tape.sub(pred_rgb, gt_rgb)?;
    let diff = tape.abs(diff)?;
    tape.mean_all(diff)
}

/// The individual terms of [`combined_loss`].
#[derive(Clone, Copy, Debug)]
pub struct LossTerms {
    pub mrae: Var,
    pub css: Option<Var>,
    pub total: Var,
}

/// `mrae + τ·css_loss`. With `τ = 0` or no projection the total is the
/// relative-error term itself.
pub fn combined_loss<E: Scalar>(
    tape: &mut Tape<E>,
    gt: Var,
    pred: Var,
    projection: Option<&Tensor<E>>,
    config: &LossConfig,
) -> Result<LossTerms> {
    config.validate()?;
    let m = mrae(tape, gt, pred, config.floor)?;
    match projection {
        Some(phi) if config.tau > 0.0 => {
            let c = css_loss(tape, gt, pred, phi)?;
            let weighted = tape.scale(c, config.tau)?;
            let total = tape.add(m, weighted)?;
            Ok(LossTerms { mrae: m, css: Some(c), total })
        }
        _ => Ok(LossTerms { mrae: m, css: None, total: m }),
    }
}

fn same_shape<E: Scalar>(gt: &Tensor<E>, pred: &Tensor<E>, op: &'static str) -> Result<()> {
    if gt.shape() != pred.shape() {
        return Err(Error::ShapeMismatch {
            op,
            lhs: gt.shape().to_vec(),
            rhs: pred.shape().to_vec(),
        });
    }
    Ok(())
}

/// Relative-error metric on plain tensors, accumulated in `f64`.
pub fn mrae_value<E: Scalar>(gt: &Tensor<E>, pred: &Tensor<E>, floor: Option<f64>) -> Result<f64> {
    same_shape(gt, pred, "mrae")?;
    let w = reciprocal_denominators(gt, floor)?;
    let total: f64 = gt
        .data()
        .iter()
        .zip(pred.data())
        .zip(w.data())
        .map(|((g, p), w)| (g.as_f64() - p.as_f64()).abs() * w.as_f64())
        .sum();
    Ok(total / gt.numel() as f64)
}

/// Root mean square error, accumulated in `f64`.
pub fn rmse_value<E: Scalar>(gt: &Tensor<E>, pred: &Tensor<E>) -> Result<f64> {
    same_shape(gt, pred, "rmse")?;
    Ok((squared_error_sum(gt, pred) / gt.numel() as f64).sqrt())
}

fn squared_error_sum<E: Scalar>(gt: &Tensor<E>, pred: &Tensor<E>) -> f64 {
    gt.data()
        .iter()
        .zip(pred.data())
        .map(|(g, p)| (g.as_f64() - p.as_f64()).powi(2))
        .sum()
}

/// Per-image and pooled scores over a set of `(gt, pred)` pairs.
#[derive(Clone, Debug, PartialEq)]
pub struct SetReport {
    pub per_image: Vec<(f64, f64)>,
    /// Average of per-image scores.
    pub mean_mrae: f64,
    pub mean_rmse: f64,
    /// All pixels of the set taken together.
    pub pooled_mrae: f64,
    pub pooled_rmse: f64,
}

pub fn evaluate_set<E: Scalar>(pairs: &[(Tensor<E>, Tensor<E>)], floor: Option<f64>) -> Result<SetReport> {
    if pairs.is_empty() {
        return Err(Error::config("evaluation set is empty"));
    }
    let mut per_image = Vec::with_capacity(pairs.len());
    let (mut abs_rel, mut sq, mut count) = (0.0, 0.0, 0usize);
    for (gt, pred) in pairs {
        let m = mrae_value(gt, pred, floor)?;
        let r = rmse_value(gt, pred)?;
        abs_rel += m * gt.numel() as f64;
        sq += squared_error_sum(gt, pred);
        count += gt.numel();
        per_image.push((m, r));
    }
    let n = pairs.len() as f64;
    Ok(SetReport {
        mean_mrae: per_image.iter().map(|p| p.0).sum::<f64>() / n,
        mean_rmse: per_image.iter().map(|p| p.1).sum::<f64>() / n,
        pooled_mrae: abs_rel / count as f64,
        pooled_rmse: (sq / count as f64).sqrt(),
        per_image,
    })
}

impl fmt::Display for SetReport {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        for (i, (m, r)) in self.per_image.iter().enumerate() {
            writeln!(f, "image={i} mrae={m} rmse={r}")?;
        }
        writeln!(f, "mean_mrae={}", self.mean_mrae)?;
        writeln!(f, "mean_rmse={}", self.mean_rmse)?;
        writeln!(f, "pooled_mrae={}", self.pooled_mrae)?;
        write!(f, "pooled_rmse={}", self.pooled_rmse)
    }
}

/// Entry `i` of the 256-step blue→red ramp: `(i, 255 − |2i − 255|, 255 − i)`.
pub fn ramp(i: u8) -> [u8; 3] {
    let i = i as i32;
    [i as u8, (255 - (2 * i - 255).abs()) as u8, (255 - i) as u8]
}

/// Per-pixel relative error averaged over bands, with its display range.
#[derive(Clone, Debug, PartialEq)]
pub struct Heatmap {
    /// `[H, W]`.
    pub values: Tensor<f64>,
    pub range: (f64, f64),
    pub auto_range: bool,
}

/// Builds the heatmap of `[C, H, W]` cubes. `range` fixes the color scale;
/// by default it spans the map's own minimum and maximum.
pub fn error_heatmap<E: Scalar>(
    gt: &Tensor<E>,
    pred: &Tensor<E>,
    floor: Option<f64>,
    range: Option<(f64, f64)>,
) -> Result<Heatmap> {
    same_shape(gt, pred, "heatmap")?;
    if gt.rank() != 3 {
        return Err(Error::ShapeMismatch {
            op: "heatmap",
            lhs: gt.shape().to_vec(),
            rhs: vec![],
        });
    }
    let (c, h, w) = (gt.shape()[0], gt.shape()[1], gt.shape()[2]);
    let weights = reciprocal_denominators(gt, floor)?;
    let plane = h * w;
    let values = Tensor::from_fn([h, w], |p| {
        (0..c)
            .map(|b| {
                let i = b * plane + p;
                (gt.data()[i].as_f64() - pred.data()[i].as_f64()).abs() * weights.data()[i].as_f64()
            })
            .sum::<f64>()
            / c as f64
    });
    let auto_range = range.is_none();
    let range = match range {
        Some((lo, hi)) if lo < hi => (lo, hi),
        Some((lo, hi)) => return Err(Error::config(format!("heatmap range {lo}..{hi} is empty"))),
        None => values
            .data()
            .iter()
            .fold((f64::INFINITY, f64::NEG_INFINITY), |(lo, hi), &v| (lo.min(v), hi.max(v))),
    };
    Ok(Heatmap { values, range, auto_range })
}

impl Heatmap {
    /// Ramp index per pixel; a degenerate range maps everything to 0.
    pub fn indices(&self) -> Vec<u8> {
        let (lo, hi) = self.range;
        self.values
            .data()
            .iter()
            .map(|&v| {
                if hi > lo {
                    ((v - lo) / (hi - lo) * 255.0).round().clamp(0.0, 255.0) as u8
                } else {
                    0
                }
            })
            .collect()
    }

    pub fn to_ppm(&self) -> Vec<u8> {
        let pixels: Vec<[u8; 3]> = self.indices().into_iter().map(ramp).collect();
        encode_ppm(self.values.shape()[0], self.values.shape()[1], &pixels)
    }

    /// Sidecar text with the value range and mode.
    pub fn range_text(&self) -> String {
        format!(
            "min={}\nmax={}\nmode={}\n",
            self.range.0,
            self.range.1,
            if self.auto_range { "auto" } else { "fixed" }
        )
    }

    /// Writes `path` (PPM) and `path` + `.range`; returns the sidecar path.
    pub fn write(&self, path: impl AsRef<Path>) -> Result<PathBuf> {
        let path = path.as_ref();
        fs::write(path, self.to_ppm()).map_err(|e| Error::io(path, e))?;
        let mut sidecar = path.as_os_str().to_owned();
        sidecar.push(".range");
        let sidecar = PathBuf::from(sidecar);
        fs::write(&sidecar, self.range_text()).map_err(|e| Error::io(&sidecar, e))?;
        Ok(sidecar)
    }
}
