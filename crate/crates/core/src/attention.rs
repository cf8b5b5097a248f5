//! Adaptive weighted channel attention (AWCA) and patch-level second-order
//! non-local attention (PSNL).
//!
//! All functions operate on batched `[N,C,H,W]` feature maps; every sample
//! is processed independently with shared parameters.

use rand::Rng;

use crate::autodiff::{Tape, Var};
use crate::error::{Error, Result};
use crate::nn::Conv2d;
use crate::params::{Bound, ParamSet};
use crate::scalar::Scalar;
use crate::tensor::Tensor;

fn dims4<E: Scalar>(tape: &Tape<E>, x: Var, op: &'static str) -> Result<[usize; 4]> {
    let shape = tape.shape(x);
    match *shape {
        [n, c, h, w] => Ok([n, c, h, w]),
        _ => Err(Error::ShapeMismatch {
            op,
            lhs: shape.to_vec(),
            rhs: vec![],
        }),
    }
}

/// Bottleneck width `floor(channels / ratio)`, which must be at least 1.
fn reduced_width(channels: usize, ratio: usize, what: &str) -> Result<usize> {
    if ratio == 0 || ratio > channels {
        return Err(Error::config(format!(
            "{what} reduction ratio {ratio} is invalid for {channels} channels"
        )));
    }
    Ok(channels / ratio)
}

/// Adaptive weighted channel attention.
///
/// A 1×1 convolution scores every spatial location; the softmax of those
/// scores pools each channel into a descriptor, which a two-layer 1×1
/// bottleneck (ReLU then sigmoid) turns into per-channel gates.
#[derive(Clone, Debug)]
pub struct Awca {
    pub pool_conv: Conv2d,
    pub gate_down: Conv2d,
    pub gate_up: Conv2d,
    pub channels: usize,
    pub reduction: usize,
}

impl Awca {
    pub const DEFAULT_REDUCTION: usize = 16;

    pub fn new<E: Scalar>(
        params: &mut ParamSet<E>,
        name: &str,
        channels: usize,
        reduction: usize,
        rng: &mut impl Rng,
    ) -> Result<Self> {
        let hidden = reduced_width(channels, reduction, "AWCA")?;
        Ok(Awca {
            pool_conv: Conv2d::new(params, &format!("{name}.pool"), channels, 1, 1, rng)?,
            gate_down: Conv2d::new(params, &format!("{name}.down"), channels, hidden, 1, rng)?,
            gate_up: Conv2d::new(params, &format!("{name}.up"), hidden, channels, 1, rng)?,
            channels,
            reduction,
        })
    }

    /// Softmax-normalized spatial weights, `[N, H*W]`.
    pub fn pooling_weights<E: Scalar>(
        &self,
        tape: &mut Tape<E>,
        bound: &Bound,
        f: Var,
    ) -> Result<Var> {
        let [n, _, h, w] = dims4(tape, f, "awca")?;
        let scores = self.pool_conv.forward(tape, bound, f)?;
        let scores = tape.reshape(scores, &[n, h * w])?;
        tape.softmax(scores, 1)
    }

    /// Channel descriptors `z_c = Σ_p w_p F[c,p]`, shape `[N, C]`.
    pub fn adaptive_weighted_pooling<E: Scalar>(
        &self,
        tape: &mut Tape<E>,
        bound: &Bound,
        f: Var,
    ) -> Result<Var> {
        let [n, c, h, w] = dims4(tape, f, "awca")?;
        if c != self.channels {
            return Err(Error::ShapeMismatch {
                op: "awca",
                lhs: tape.shape(f).to_vec(),
                rhs: vec![self.channels],
            });
        }
        let weights = self.pooling_weights(tape, bound, f)?;
        let weights = tape.reshape(weights, &[n, h * w, 1])?;
        let flat = tape.reshape(f, &[n, c, h * w])?;
        let z = tape.batch_matmul(flat, weights)?;
        tape.reshape(z, &[n, c])
    }

    /// Per-channel gates in (0, 1), shape `[N, C, 1, 1]`.
    pub fn gates<E: Scalar>(&self, tape: &mut Tape<E>, bound: &Bound, f: Var) -> Result<Var> {
        let z = self.adaptive_weighted_pooling(tape, bound, f)?;
        let n = tape.shape(z)[0];
        let z = tape.reshape(z, &[n, self.channels, 1, 1])?;
        let hidden = self.gate_down.forward(tape, bound, z)?;
        let hidden = tape.relu(hidden)?;
        let logits = self.gate_up.forward(tape, bound, hidden)?;
        tape.sigmoid(logits)
    }

    pub fn forward<E: Scalar>(&self, tape: &mut Tape<E>, bound: &Bound, f: Var) -> Result<Var> {
        let v = self.gates(tape, bound, f)?;
        tape.scale_channels(f, v)
    }
}

/// `X = B Ī Bᵀ` with `Ī = (1/d)(I_d − (1/d)·1)`.
///
/// `b` is `[n, d]` or batched `[N, n, d]`; the result is `[n, n]` or
/// `[N, n, n]`. Requires `d >= 2`.
pub fn centered_covariance<E: Scalar>(tape: &mut Tape<E>, b: Var) -> Result<Var> {
    tape.check(b)?;
    let shape = tape.shape(b).to_vec();
    let (batch, n, d) = match shape[..] {
        [n, d] => (None, n, d),
        [bn, n, d] => (Some(bn), n, d),
        _ => {
            return Err(Error::ShapeMismatch {
                op: "centered_covariance",
                lhs: shape,
                rhs: vec![],
            })
        }
    };
    if d < 2 {
        return Err(Error::config(format!(
            "covariance needs at least 2 components per row, got {d}"
        )));
    }
    let inv_d = 1.0 / d as f64;
    let centering = Tensor::from_fn([d, d], |i| {
        let delta = if i / d == i % d { 1.0 } else { 0.0 };
        E::of(inv_d * (delta - inv_d))
    });
    let centering = tape.constant(centering);
    match batch {
        None => {
            let bc = tape.matmul(b, centering)?;
            let bt = tape.transpose(b)?;
            tape.matmul(bc, bt)
        }
        Some(bn) => {
            let flat = tape.reshape(b, &[bn * n, d])?;
            let bc = tape.matmul(flat, centering)?;
            let bc = tape.reshape(bc, &[bn, n, d])?;
            let bt = tape.transpose(b)?;
            tape.batch_matmul(bc, bt)
        }
    }
}

/// Splits `[N,C,H,W]` into quadrants `[top-left, top-right, bottom-left,
/// bottom-right]`. The top-left quadrant takes `ceil(H/2) × ceil(W/2)`.
pub fn patch_split<E: Scalar>(tape: &mut Tape<E>, f: Var) -> Result<[Var; 4]> {
    let [_, _, h, w] = dims4(tape, f, "patch_split")?;
    if h < 2 || w < 2 {
        return Err(Error::config(format!(
            "patch split needs H, W >= 2, got {h}x{w}"
        )));
    }
    let (h0, w0) = (h.div_ceil(2), w.div_ceil(2));
    let top = tape.slice(f, 2, 0, h0)?;
    let bottom = tape.slice(f, 2, h0, h)?;
    Ok([
        tape.slice(top, 3, 0, w0)?,
        tape.slice(top, 3, w0, w)?,
        tape.slice(bottom, 3, 0, w0)?,
        tape.slice(bottom, 3, w0, w)?,
    ])
}

/// Inverse of [`patch_split`].
pub fn patch_merge<E: Scalar>(tape: &mut Tape<E>, quadrants: [Var; 4]) -> Result<Var> {
    let dims: Vec<[usize; 4]> = quadrants
        .iter()
        .map(|&q| dims4(tape, q, "patch_merge"))
        .collect::<Result<_>>()?;
    let [tl, tr, bl, br] = [dims[0], dims[1], dims[2], dims[3]];
    let consistent = dims.iter().all(|d| d[..2] == tl[..2])
        && tl[2] == tr[2]
        && bl[2] == br[2]
        && tl[3] == bl[3]
        && tr[3] == br[3]
        && (bl[2]..=bl[2] + 1).contains(&tl[2])
        && (tr[3]..=tr[3] + 1).contains(&tl[3]);
    if !consistent {
        return Err(Error::ShapeMismatch {
            op: "patch_merge",
            lhs: tl.to_vec(),
            rhs: br.to_vec(),
        });
    }
    let top = tape.concat(&[quadrants[0], quadrants[1]], 3)?;
    let bottom = tape.concat(&[quadrants[2], quadrants[3]], 3)?;
    tape.concat(&[top, bottom], 2)
}

/// Patch-level second-order non-local attention.
#[derive(Clone, Debug)]
pub struct Psnl {
    pub theta: Conv2d,
    pub phi: Conv2d,
    pub out: Conv2d,
    pub channels: usize,
    pub reduction: usize,
}

impl Psnl {
    pub const DEFAULT_REDUCTION: usize = 8;

    pub fn new<E: Scalar>(
        params: &mut ParamSet<E>,
        name: &str,
        channels: usize,
        reduction: usize,
        rng: &mut impl Rng,
    ) -> Result<Self> {
        let inner = reduced_width(channels, reduction, "PSNL")?;
        Ok(Psnl {
            theta: Conv2d::new(params, &format!("{name}.theta"), channels, inner, 1, rng)?,
            phi: Conv2d::new(params, &format!("{name}.phi"), channels, inner, 1, rng)?,
            out: Conv2d::new(params, &format!("{name}.out"), inner, channels, 1, rng)?,
            channels,
            reduction,
        })
    }

    /// Location-major features `[N, h*w, C/r]` from one 1×1 projection.
    fn locations<E: Scalar>(
        &self,
        tape: &mut Tape<E>,
        bound: &Bound,
        conv: &Conv2d,
        fk: Var,
    ) -> Result<Var> {
        let [n, _, h, w] = dims4(tape, fk, "psnl")?;
        let p = conv.forward(tape, bound, fk)?;
        let p = tape.reshape(p, &[n, conv.c_out, h * w])?;
        tape.transpose(p)
    }

    /// Attention within a single patch: `S = φ(softmax(B Ī Bᵀ) D) + F`.
    pub fn attend<E: Scalar>(&self, tape: &mut Tape<E>, bound: &Bound, fk: Var) -> Result<Var> {
        let [n, c, h, w] = dims4(tape, fk, "psnl")?;
        if c != self.channels {
            return Err(Error::ShapeMismatch {
                op: "psnl",
                lhs: tape.shape(fk).to_vec(),
                rhs: vec![self.channels],
            });
        }
        let d = self.theta.c_out;
        let b = self.locations(tape, bound, &self.theta, fk)?;
        let values = self.locations(tape, bound, &self.phi, fk)?;
        let affinity = centered_covariance(tape, b)?;
        let attention = tape.softmax(affinity, 2)?;
        let u = tape.batch_matmul(attention, values)?;
        let u = tape.transpose(u)?;
        let u = tape.reshape(u, &[n, d, h, w])?;
        let refined = self.out.forward(tape, bound, u)?;
        tape.add(refined, fk)
    }

    /// Split into quadrants, attend within each, merge back.
    pub fn forward<E: Scalar>(&self, tape: &mut Tape<E>, bound: &Bound, f: Var) -> Result<Var> {
        let quadrants = patch_split(tape, f)?;
        let mut refined = quadrants;
        for q in &mut refined {
            *q = self.attend(tape, bound, *q)?;
        }
        patch_merge(tape, refined)
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::testing::{assert_gradients, rng};
    use proptest::prelude::*;

    fn softmax_oracle(v: &[f64]) -> Vec<f64> {
        let max = v.iter().cloned().fold(f64::MIN, f64::max);
        let e: Vec<f64> = v.iter().map(|x| (x - max).exp()).collect();
        let s: f64 = e.iter().sum();
        e.iter().map(|x| x / s).collect()
    }

    fn awca_fixture(channels: usize, reduction: usize, seed: u64) -> (ParamSet<f64>, Awca) {
        let mut params = ParamSet::new();
        let mut r = rng(seed);
        let awca = Awca::new(&mut params, "awca", channels, reduction, &mut r).unwrap();
        for id in params.ids().collect::<Vec<_>>() {
            let shape = params.get(id).shape().to_vec();
            params.set(id, Tensor::uniform(shape, -0.5, 0.5, &mut r)).unwrap();
        }
        (params, awca)
    }

    #[test]
    fn zero_pool_conv_gives_spatial_mean() {
        let (mut params, awca) = awca_fixture(4, 2, 1);
        awca.pool_conv.zero(&mut params);
        let f = Tensor::<f64>::uniform([2, 4, 3, 5], -1.0, 1.0, &mut rng(2));
        let mut tape = Tape::new();
        let bound = params.bind(&mut tape, false);
        let fv = tape.constant(f.clone());
        let z = awca.adaptive_weighted_pooling(&mut tape, &bound, fv).unwrap();
        for n in 0..2 {
            for c in 0..4 {
                let mean: f64 = f.slice(0, n, n + 1).unwrap().slice(1, c, c + 1).unwrap().sum() / 15.0;
                assert!((tape.value(z).at(&[n, c]) - mean).abs() < 1e-14);
            }
        }
    }

    #[test]
    fn constant_channel_pools_to_its_value() {
        let (params, awca) = awca_fixture(3, 3, 3);
        let mut f = Tensor::<f64>::uniform([1, 3, 4, 4], -1.0, 1.0, &mut rng(4));
        f.data_mut()[16..32].iter_mut().for_each(|v| *v = 0.7);
        let mut tape = Tape::new();
        let bound = params.bind(&mut tape, false);
        let fv = tape.constant(f);
        let z = awca.adaptive_weighted_pooling(&mut tape, &bound, fv).unwrap();
        assert!((tape.value(z).at(&[0, 1]) - 0.7).abs() < 1e-14);
    }

    #[test]
    fn pooling_matches_weighted_sum_oracle() {
        let (params, awca) = awca_fixture(4, 2, 5);
        let f = Tensor::<f64>::uniform([1, 4, 3, 3], -1.0, 1.0, &mut rng(6));
        let wp = params.get(awca.pool_conv.weight).data().to_vec();
        let bp = params.get(awca.pool_conv.bias).item();
        let scores: Vec<f64> = (0..9)
            .map(|p| bp + (0..4).map(|c| wp[c] * f.data()[c * 9 + p]).sum::<f64>())
            .collect();
        let weights = softmax_oracle(&scores);
        let mut tape = Tape::new();
        let bound = params.bind(&mut tape, false);
        let fv = tape.constant(f.clone());
        let z = awca.adaptive_weighted_pooling(&mut tape, &bound, fv).unwrap();
        for c in 0..4 {
            let expected: f64 = (0..9).map(|p| weights[p] * f.data()[c * 9 + p]).sum();
            assert!((tape.value(z).at(&[0, c]) - expected).abs() <= 1e-10);
        }
    }

    #[test]
    fn awca_forced_gate_and_zero_input() {
        let (mut params, awca) = awca_fixture(4, 2, 7);
        awca.gate_up.zero(&mut params);
        let f = Tensor::<f64>::uniform([2, 4, 3, 3], -1.0, 1.0, &mut rng(8));
        let mut tape = Tape::new();
        let bound = params.bind(&mut tape, false);
        let fv = tape.constant(f.clone());
        let e = awca.forward(&mut tape, &bound, fv).unwrap();
        assert_eq!(tape.value(e), &f.scale(0.5));

        let (params, awca) = awca_fixture(4, 2, 9);
        let mut tape = Tape::new();
        let bound = params.bind(&mut tape, false);
        let zero = tape.constant(Tensor::zeros([1, 4, 3, 3]));
        let e = awca.forward(&mut tape, &bound, zero).unwrap();
        assert!(tape.value(e).data().iter().all(|&v| v == 0.0));
    }

    #[test]
    fn awca_composition_oracle() {
        let (params, awca) = awca_fixture(4, 2, 10);
        let f = Tensor::<f64>::uniform([1, 4, 2, 3], -1.0, 1.0, &mut rng(11));
        let p = |id| params.get(id).data().to_vec();
        let (wp, bp) = (p(awca.pool_conv.weight), p(awca.pool_conv.bias));
        let (wd, bd) = (p(awca.gate_down.weight), p(awca.gate_down.bias));
        let (wu, bu) = (p(awca.gate_up.weight), p(awca.gate_up.bias));
        let hw = 6;
        let scores: Vec<f64> = (0..hw)
            .map(|q| bp[0] + (0..4).map(|c| wp[c] * f.data()[c * hw + q]).sum::<f64>())
            .collect();
        let w = softmax_oracle(&scores);
        let z: Vec<f64> = (0..4)
            .map(|c| (0..hw).map(|q| w[q] * f.data()[c * hw + q]).sum())
            .collect();
        let hidden: Vec<f64> = (0..2)
            .map(|j| (bd[j] + (0..4).map(|c| wd[j * 4 + c] * z[c]).sum::<f64>()).max(0.0))
            .collect();
        let gate: Vec<f64> = (0..4)
            .map(|c| {
                let s = bu[c] + (0..2).map(|j| wu[c * 2 + j] * hidden[j]).sum::<f64>();
                1.0 / (1.0 + (-s).exp())
            })
            .collect();
        let mut tape = Tape::new();
        let bound = params.bind(&mut tape, false);
        let fv = tape.constant(f.clone());
        let e = awca.forward(&mut tape, &bound, fv).unwrap();
        for c in 0..4 {
            for q in 0..hw {
                let expected = gate[c] * f.data()[c * hw + q];
                assert!((tape.value(e).data()[c * hw + q] - expected).abs() <= 1e-10);
            }
        }
    }

    #[test]
    fn awca_rejects_bad_reduction() {
        let mut params = ParamSet::<f64>::new();
        assert!(Awca::new(&mut params, "a", 10, 11, &mut rng(0)).is_err());
        assert!(Psnl::new(&mut params, "p", 10, 0, &mut rng(0)).is_err());
        let awca = Awca::new(&mut params, "b", 200, 16, &mut rng(0)).unwrap();
        assert_eq!(awca.gate_down.c_out, 12);
    }

    #[test]
    fn covariance_hand_example() {
        let mut tape = Tape::<f64>::new();
        let b = tape.constant(Tensor::from_f64([2, 2], &[1.0, -1.0, 2.0, 0.0]).unwrap());
        let x = centered_covariance(&mut tape, b).unwrap();
        for &v in tape.value(x).data() {
            assert!((v - 1.0).abs() <= 1e-12);
        }
    }

    #[test]
    fn covariance_annihilates_constant_rows() {
        let mut tape = Tape::<f64>::new();
        let b = tape.constant(Tensor::from_fn([3, 4], |i| (i / 4) as f64 * 1.5 - 2.0));
        let x = centered_covariance(&mut tape, b).unwrap();
        assert!(tape.value(x).max_abs() < 1e-15);
    }

    #[test]
    fn covariance_rejects_single_component() {
        let mut tape = Tape::<f64>::new();
        let b = tape.constant(Tensor::ones([3, 1]));
        assert!(centered_covariance(&mut tape, b).is_err());
    }

    proptest! {
        #[test]
        fn covariance_is_symmetric_psd(seed in any::<u64>(), n in 1usize..6, d in 2usize..6) {
            let mut r = rng(seed);
            let mut tape = Tape::<f64>::new();
            let b = tape.constant(Tensor::uniform([n, d], -2.0, 2.0, &mut r));
            let x = centered_covariance(&mut tape, b).unwrap();
            let x = tape.value(x);
            for i in 0..n {
                for j in 0..n {
                    prop_assert!((x.at(&[i, j]) - x.at(&[j, i])).abs() <= 1e-10);
                }
            }
            for _ in 0..8 {
                let v = Tensor::<f64>::uniform([n], -1.0, 1.0, &mut r);
                let q: f64 = (0..n)
                    .flat_map(|i| (0..n).map(move |j| (i, j)))
                    .map(|(i, j)| v.data()[i] * x.at(&[i, j]) * v.data()[j])
                    .sum();
                prop_assert!(q >= -1e-10);
            }
        }

        #[test]
        fn split_merge_round_trip(seed in any::<u64>(), h in 2usize..9, w in 2usize..9) {
            let f = Tensor::<f64>::uniform([2, 3, h, w], -1.0, 1.0, &mut rng(seed));
            let mut tape = Tape::new();
            let fv = tape.constant(f.clone());
            let q = patch_split(&mut tape, fv).unwrap();
            let m = patch_merge(&mut tape, q).unwrap();
            prop_assert_eq!(tape.value(m), &f);
        }
    }

    #[test]
    fn split_quadrant_sizes() {
        let mut tape = Tape::<f64>::new();
        let f = tape.constant(Tensor::zeros([1, 1, 5, 5]));
        let q = patch_split(&mut tape, f).unwrap();
        let sizes: Vec<_> = q.iter().map(|&v| tape.shape(v)[2..].to_vec()).collect();
        assert_eq!(sizes, vec![vec![3, 3], vec![3, 2], vec![2, 3], vec![2, 2]]);

        let f = tape.constant(Tensor::zeros([1, 1, 4, 4]));
        let q = patch_split(&mut tape, f).unwrap();
        assert!(q.iter().all(|&v| tape.shape(v)[2..] == [2, 2]));

        let thin = tape.constant(Tensor::zeros([1, 1, 1, 4]));
        assert!(patch_split(&mut tape, thin).is_err());
    }

    #[test]
    fn merge_rejects_inconsistent_quadrants() {
        let mut tape = Tape::<f64>::new();
        let a = tape.constant(Tensor::zeros([1, 1, 2, 2]));
        let b = tape.constant(Tensor::zeros([1, 1, 3, 2]));
        assert!(patch_merge(&mut tape, [a, b, a, a]).is_err());
        // bottom taller than top cannot come from the ceiling split
        assert!(patch_merge(&mut tape, [a, a, b, b]).is_err());
    }

    #[test]
    fn split_merge_gradient_is_identity() {
        assert_gradients(&[&[1, 2, 5, 3]], 30, |t, x| {
            let q = patch_split(t, x[0])?;
            patch_merge(t, q)
        });
        let mut tape = Tape::<f64>::new();
        let f = tape.leaf(Tensor::ones([1, 2, 5, 3]));
        let q = patch_split(&mut tape, f).unwrap();
        let m = patch_merge(&mut tape, q).unwrap();
        let s = tape.sum_all(m).unwrap();
        let g = tape.backward(s).unwrap();
        assert_eq!(g.get(f).unwrap(), &Tensor::ones([1, 2, 5, 3]));
    }

    fn psnl_fixture(channels: usize, reduction: usize, seed: u64) -> (ParamSet<f64>, Psnl) {
        let mut params = ParamSet::new();
        let mut r = rng(seed);
        let psnl = Psnl::new(&mut params, "psnl", channels, reduction, &mut r).unwrap();
        for id in params.ids().collect::<Vec<_>>() {
            let shape = params.get(id).shape().to_vec();
            params.set(id, Tensor::uniform(shape, -0.5, 0.5, &mut r)).unwrap();
        }
        (params, psnl)
    }

    #[test]
    fn zero_output_conv_is_identity() {
        let (mut params, psnl) = psnl_fixture(8, 4, 12);
        psnl.out.zero(&mut params);
        let f = Tensor::<f64>::uniform([2, 8, 5, 6], -1.0, 1.0, &mut rng(13));
        let mut tape = Tape::new();
        let bound = params.bind(&mut tape, false);
        let fv = tape.constant(f.clone());
        let s = psnl.attend(&mut tape, &bound, fv).unwrap();
        assert_eq!(tape.value(s), &f);
        let s = psnl.forward(&mut tape, &bound, fv).unwrap();
        assert_eq!(tape.value(s), &f);
    }

    #[test]
    fn psnl_preserves_shape() {
        let (params, psnl) = psnl_fixture(4, 2, 14);
        for (h, w) in [(2, 2), (3, 7), (5, 4)] {
            let mut tape = Tape::<f64>::new();
            let bound = params.bind(&mut tape, false);
            let f = tape.constant(Tensor::ones([1, 4, h, w]));
            let s = psnl.forward(&mut tape, &bound, f).unwrap();
            assert_eq!(tape.shape(s), &[1, 4, h, w]);
            let s = psnl.attend(&mut tape, &bound, f).unwrap();
            assert_eq!(tape.shape(s), &[1, 4, h, w]);
        }
    }

    #[test]
    fn psnl_batch_independence() {
        let (params, psnl) = psnl_fixture(4, 2, 15);
        let f = Tensor::<f64>::uniform([2, 4, 5, 4], -1.0, 1.0, &mut rng(16));
        let mut tape = Tape::new();
        let bound = params.bind(&mut tape, false);
        let both = tape.constant(f.clone());
        let both = psnl.forward(&mut tape, &bound, both).unwrap();
        let mut singles = Vec::new();
        for n in 0..2 {
            let one = tape.constant(f.slice(0, n, n + 1).unwrap());
            let out = psnl.forward(&mut tape, &bound, one).unwrap();
            singles.push(tape.value(out).clone());
        }
        let joined = Tensor::concat(&[&singles[0], &singles[1]], 0).unwrap();
        assert_eq!(tape.value(both), &joined);
    }

    #[test]
    fn psnl_rejects_single_component_projection() {
        let (params, psnl) = psnl_fixture(8, 8, 17);
        let mut tape = Tape::<f64>::new();
        let bound = params.bind(&mut tape, false);
        let f = tape.constant(Tensor::ones([1, 8, 4, 4]));
        assert!(psnl.attend(&mut tape, &bound, f).is_err());
    }

    #[test]
    fn attention_gradients() {
        let (params, awca) = awca_fixture(4, 2, 18);
        assert_gradients(&[&[2, 4, 3, 3]], 19, |t, x| {
            let bound = params.bind(t, false);
            awca.forward(t, &bound, x[0])
        });
        let (params, psnl) = psnl_fixture(4, 2, 20);
        assert_gradients(&[&[1, 4, 5, 4]], 21, |t, x| {
            let bound = params.bind(t, false);
            psnl.forward(t, &bound, x[0])
        });
        assert_gradients(&[&[2, 3, 4]], 22, centered_covariance_var);
    }

    fn centered_covariance_var(t: &mut Tape<f64>, x: &[Var]) -> Result<Var> {
        centered_covariance(t, x[0])
    }
}
