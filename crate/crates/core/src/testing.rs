use rand_chacha::rand_core::SeedableRng;
use rand_chacha::ChaCha8Rng;

use crate::autodiff::{Tape, Var};
use crate::error::Result;
use crate::gradcheck::{check_gradients, signed_uniform, Coverage};

pub fn rng(seed: u64) -> ChaCha8Rng {
    ChaCha8Rng::seed_from_u64(seed)
}

/// Finite-difference check of `f` on random inputs of the given shapes.
pub fn assert_gradients(
    shapes: &[&[usize]],
    seed: u64,
    f: impl Fn(&mut Tape<f64>, &[Var]) -> Result<Var>,
) {
    let mut r = rng(seed);
    let inputs: Vec<_> = shapes
        .iter()
        .enumerate()
        .map(|(i, s)| (format!("input{i}"), signed_uniform(s, &mut r)))
        .collect();
    let reports = check_gradients(&inputs, &f, Coverage::All, seed).unwrap();
    for report in reports {
        assert!(
            report.max_rel_error <= 1e-4,
            "{}: relative error {:.3e} ({:?})",
            report.name,
            report.max_rel_error,
            report.worst
        );
    }
}
