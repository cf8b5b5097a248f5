//! Network assembly: dual residual attention blocks, the full network and
//! flip self-ensemble inference.

use rand::Rng;

use crate::attention::{Awca, Psnl};
use crate::autodiff::{Tape, Var};
use crate::error::{Error, Result};
use crate::nn::{Conv2d, Prelu};
use crate::params::{Bound, ParamSet};
use crate::scalar::Scalar;
use crate::tensor::Tensor;

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct AwanConfig {
    /// Number of dual residual attention blocks.
    pub blocks: usize,
    /// Feature width.
    pub channels: usize,
    pub awca_reduction: usize,
    pub psnl_reduction: usize,
    pub in_channels: usize,
    pub out_channels: usize,
}

impl Default for AwanConfig {
    fn default() -> Self {
        AwanConfig {
            blocks: 8,
            channels: 200,
            awca_reduction: 16,
            psnl_reduction: 8,
            in_channels: 3,
            out_channels: 31,
        }
    }
}

impl AwanConfig {
    /// The small configuration used for desk-scale experiments.
    pub fn tiny() -> Self {
        AwanConfig {
            blocks: 2,
            channels: 16,
            awca_reduction: 8,
            psnl_reduction: 8,
            ..Self::default()
        }
    }

    pub fn validate(&self) -> Result<()> {
        let positive = [
            ("blocks", self.blocks),
            ("channels", self.channels),
            ("in_channels", self.in_channels),
            ("out_channels", self.out_channels),
        ];
        for (name, v) in positive {
            if v == 0 {
                return Err(Error::config(format!("{name} must be at least 1")));
            }
        }
        for (name, ratio) in [("awca_reduction", self.awca_reduction), ("psnl_reduction", self.psnl_reduction)] {
            if ratio == 0 || ratio > self.channels {
                return Err(Error::config(format!(
                    "{name}={ratio} must lie in 1..={}",
                    self.channels
                )));
            }
        }
        if self.channels / self.psnl_reduction < 2 {
            return Err(Error::config(format!(
                "channels/psnl_reduction must be at least 2, got {}/{}",
                self.channels, self.psnl_reduction
            )));
        }
        Ok(())
    }

    /// Learnable scalar count of the network this config describes, in wide
    /// arithmetic so untrusted configs cannot overflow.
    pub fn parameter_count(&self) -> u128 {
        let conv = |ci: u128, co: u128, k: u128| ci * co * k * k + co;
        let c = self.channels as u128;
        let hidden = (self.channels / self.awca_reduction.max(1)) as u128;
        let inner = (self.channels / self.psnl_reduction.max(1)) as u128;
        let block = 3 * conv(c, c, 3) + conv(c, c, 5) + 3 * c + conv(c, 1, 1) + conv(c, hidden, 1) + conv(hidden, c, 1);
        conv(self.in_channels as u128, c, 3)
            + self.blocks as u128 * block
            + conv(c, c, 3)
            + c
            + 2 * conv(c, inner, 1)
            + conv(inner, c, 1)
            + conv(c, self.out_channels as u128, 3)
    }

    /// Number of parameter tensors.
    pub fn tensor_count(&self) -> u128 {
        13 + 17 * self.blocks as u128
    }
}

/// Dual residual attention block.
#[derive(Clone, Debug)]
pub struct Drab {
    pub conv_a: Conv2d,
    pub conv_b: Conv2d,
    pub conv_large: Conv2d,
    pub conv_small: Conv2d,
    pub act_a: Prelu,
    pub act_b: Prelu,
    pub act_large: Prelu,
    pub awca: Awca,
}

impl Drab {
    pub fn new<E: Scalar>(
        params: &mut ParamSet<E>,
        name: &str,
        channels: usize,
        awca_reduction: usize,
        rng: &mut impl Rng,
    ) -> Result<Self> {
        let c = channels;
        Ok(Drab {
            conv_a: Conv2d::new(params, &format!("{name}.conv_a"), c, c, 3, rng)?,
            conv_b: Conv2d::new(params, &format!("{name}.conv_b"), c, c, 3, rng)?,
            conv_large: Conv2d::new(params, &format!("{name}.conv_large"), c, c, 5, rng)?,
            conv_small: Conv2d::new(params, &format!("{name}.conv_small"), c, c, 3, rng)?,
            act_a: Prelu::new(params, &format!("{name}.act_a"), c),
            act_b: Prelu::new(params, &format!("{name}.act_b"), c),
            act_large: Prelu::new(params, &format!("{name}.act_large"), c),
            awca: Awca::new(params, &format!("{name}.awca"), c, awca_reduction, rng)?,
        })
    }

    /// Returns `(F_next, R_next)`.
    pub fn forward<E: Scalar>(
        &self,
        tape: &mut Tape<E>,
        bound: &Bound,
        features: Var,
        residual: Var,
    ) -> Result<(Var, Var)> {
        if tape.shape(features) != tape.shape(residual) {
            return Err(Error::ShapeMismatch {
                op: "drab",
                lhs: tape.shape(features).to_vec(),
                rhs: tape.shape(residual).to_vec(),
            });
        }
        let u = self.conv_a.forward(tape, bound, features)?;
        let u = self.act_a.forward(tape, bound, u)?;
        let v = self.conv_b.forward(tape, bound, u)?;
        let v = tape.add(v, residual)?;
        let w = self.act_b.forward(tape, bound, v)?;
        let x = self.conv_large.forward(tape, bound, w)?;
        let x = self.act_large.forward(tape, bound, x)?;
        let y = self.conv_small.forward(tape, bound, x)?;
        let z = self.awca.forward(tape, bound, y)?;
        let next = tape.add(z, features)?;
        Ok((next, v))
    }
}

/// The full reconstruction network.
#[derive(Clone, Debug)]
pub struct Awan {
    pub config: AwanConfig,
    pub head: Conv2d,
    pub blocks: Vec<Drab>,
    pub tail_conv: Conv2d,
    pub tail_act: Prelu,
    pub psnl: Psnl,
    pub output_conv: Conv2d,
}

impl Awan {
    /// Registers every parameter in `params` with He-normal weights, zero
    /// biases and PReLU slopes of 0.25.
    pub fn new<E: Scalar>(config: AwanConfig, params: &mut ParamSet<E>, rng: &mut impl Rng) -> Result<Self> {
        config.validate()?;
        let c = config.channels;
        let head = Conv2d::new(params, "head", config.in_channels, c, 3, rng)?;
        let blocks = (0..config.blocks)
            .map(|i| Drab::new(params, &format!("block{i}"), c, config.awca_reduction, rng))
            .collect::<Result<_>>()?;
        Ok(Awan {
            config,
            head,
            blocks,
            tail_conv: Conv2d::new(params, "tail", c, c, 3, rng)?,
            tail_act: Prelu::new(params, "tail_act", c),
            psnl: Psnl::new(params, "psnl", c, config.psnl_reduction, rng)?,
            output_conv: Conv2d::new(params, "output", c, config.out_channels, 3, rng)?,
        })
    }

    /// Builds a fresh model and its parameter store.
    pub fn init<E: Scalar>(config: AwanConfig, rng: &mut impl Rng) -> Result<(Self, ParamSet<E>)> {
        let mut params = ParamSet::new();
        let model = Self::new(config, &mut params, rng)?;
        Ok((model, params))
    }

    pub fn forward<E: Scalar>(&self, tape: &mut Tape<E>, bound: &Bound, rgb: Var) -> Result<Var> {
        let shape = tape.shape(rgb).to_vec();
        if shape.len() != 4 || shape[1] != self.config.in_channels {
            return Err(Error::ShapeMismatch {
                op: "awan",
                lhs: shape,
                rhs: vec![self.config.in_channels],
            });
        }
        if shape[2] < 2 || shape[3] < 2 {
            return Err(Error::config(format!(
                "input must be at least 2x2, got {}x{}",
                shape[2], shape[3]
            )));
        }
        let shallow = self.head.forward(tape, bound, rgb)?;
        let (mut features, mut residual) = (shallow, shallow);
        for block in &self.blocks {
            (features, residual) = block.forward(tape, bound, features, residual)?;
        }
        let g = tape.add(features, shallow)?;
        let t = self.tail_conv.forward(tape, bound, g)?;
        let t = self.tail_act.forward(tape, bound, t)?;
        let p = self.psnl.forward(tape, bound, t)?;
        self.output_conv.forward(tape, bound, p)
    }

    /// Forward pass without gradient tracking. Accepts `[N,3,H,W]` or a
    /// single `[3,H,W]` image.
    pub fn infer<E: Scalar>(&self, params: &ParamSet<E>, rgb: &Tensor<E>) -> Result<Tensor<E>> {
        let single = rgb.rank() == 3;
        let input = if single {
            let mut shape = vec![1];
            shape.extend_from_slice(rgb.shape());
            rgb.reshape(shape)?
        } else {
            rgb.clone()
        };
        let mut tape = Tape::new();
        let bound = params.bind(&mut tape, false);
        let x = tape.constant(input);
        let y = self.forward(&mut tape, &bound, x)?;
        let out = tape.value(y).clone();
        if single {
            out.reshape(&out.shape()[1..])
        } else {
            Ok(out)
        }
    }

    pub fn infer_self_ensemble<E: Scalar>(&self, params: &ParamSet<E>, rgb: &Tensor<E>) -> Result<Tensor<E>> {
        self_ensemble(rgb, |x| self.infer(params, x))
    }
}

/// `½·(f(x) + flip(f(flip(x))))` with the flip on the height axis
/// (second to last).
pub fn self_ensemble<E: Scalar>(
    input: &Tensor<E>,
    forward: impl Fn(&Tensor<E>) -> Result<Tensor<E>>,
) -> Result<Tensor<E>> {
    if input.rank() < 2 {
        return Err(Error::InvalidAxis { axis: 0, rank: input.rank() });
    }
    let axis = input.rank() - 2;
    let plain = forward(input)?;
    let mirrored = forward(&input.flip(axis)?)?.flip(axis)?;
    let half = E::of(0.5);
    plain.zip_map(&mirrored, "self_ensemble", |a, b| half * (a + b))
}

/// Total learnable scalar count.
pub fn count_parameters<E: Scalar>(params: &ParamSet<E>) -> usize {
    params.count_scalars()
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::testing::{assert_gradients, rng};

    fn tiny(blocks: usize) -> AwanConfig {
        AwanConfig {
            blocks,
            channels: 4,
            awca_reduction: 2,
            psnl_reduction: 2,
            ..AwanConfig::default()
        }
    }

    #[test]
    fn config_validation() {
        assert!(AwanConfig::default().validate().is_ok());
        assert!(AwanConfig::tiny().validate().is_ok());
        assert!(AwanConfig { blocks: 0, ..AwanConfig::tiny() }.validate().is_err());
        assert!(AwanConfig { awca_reduction: 17, ..AwanConfig::tiny() }.validate().is_err());
        assert!(AwanConfig { psnl_reduction: 16, ..AwanConfig::tiny() }.validate().is_err());
    }

    #[test]
    fn output_shape_and_determinism() {
        let (model, params) = Awan::init::<f64>(tiny(1), &mut rng(1)).unwrap();
        let x = Tensor::uniform([2, 3, 5, 6], 0.0, 1.0, &mut rng(2));
        let a = model.infer(&params, &x).unwrap();
        let b = model.infer(&params, &x).unwrap();
        assert_eq!(a.shape(), &[2, 31, 5, 6]);
        assert_eq!(a, b);
        let single = model.infer(&params, &x.slice(0, 0, 1).unwrap().reshape([3, 5, 6]).unwrap()).unwrap();
        assert_eq!(single.shape(), &[31, 5, 6]);
        assert!(model.infer(&params, &Tensor::zeros([1, 3, 1, 4])).is_err());
        assert!(model.infer(&params, &Tensor::zeros([1, 4, 4, 4])).is_err());
    }

    #[test]
    fn same_seed_same_parameters() {
        let (_, a) = Awan::init::<f32>(AwanConfig::tiny(), &mut rng(5)).unwrap();
        let (_, b) = Awan::init::<f32>(AwanConfig::tiny(), &mut rng(5)).unwrap();
        assert_eq!(a, b);
    }

    #[test]
    fn zeroed_network_outputs_zero() {
        let (model, mut params) = Awan::init::<f64>(tiny(2), &mut rng(3)).unwrap();
        params.zero_all();
        let x = Tensor::uniform([1, 3, 4, 5], 0.0, 1.0, &mut rng(4));
        let y = model.infer(&params, &x).unwrap();
        assert!(y.data().iter().all(|&v| v == 0.0));
    }

    #[test]
    fn zeroed_block_is_identity_on_features() {
        let mut params = ParamSet::<f64>::new();
        let block = Drab::new(&mut params, "b", 4, 2, &mut rng(6)).unwrap();
        params.zero_all();
        let f = Tensor::uniform([2, 4, 3, 5], -1.0, 1.0, &mut rng(7));
        let mut tape = Tape::new();
        let bound = params.bind(&mut tape, false);
        let fv = tape.constant(f.clone());
        let r = tape.constant(Tensor::zeros([2, 4, 3, 5]));
        let (next, res) = block.forward(&mut tape, &bound, fv, r).unwrap();
        assert_eq!(tape.value(next), &f);
        assert!(tape.value(res).data().iter().all(|&v| v == 0.0));

        assert_gradients(&[&[1, 4, 3, 3]], 8, |t, x| {
            let bound = params.bind(t, false);
            let zero = t.constant(Tensor::zeros([1, 4, 3, 3]));
            Ok(block.forward(t, &bound, x[0], zero)?.0)
        });
        let mut tape = Tape::new();
        let bound = params.bind(&mut tape, false);
        let fv = tape.leaf(f.clone());
        let r = tape.constant(Tensor::zeros([2, 4, 3, 5]));
        let (next, _) = block.forward(&mut tape, &bound, fv, r).unwrap();
        let s = tape.sum_all(next).unwrap();
        assert_eq!(tape.backward(s).unwrap().get(fv).unwrap(), &Tensor::ones([2, 4, 3, 5]));
    }

    #[test]
    fn block_rejects_mismatched_residual() {
        let mut params = ParamSet::<f64>::new();
        let block = Drab::new(&mut params, "b", 4, 2, &mut rng(9)).unwrap();
        let mut tape = Tape::new();
        let bound = params.bind(&mut tape, false);
        let f = tape.constant(Tensor::zeros([1, 4, 3, 3]));
        let r = tape.constant(Tensor::zeros([1, 4, 3, 4]));
        assert!(block.forward(&mut tape, &bound, f, r).is_err());
    }

    #[test]
    fn block_gradients() {
        let mut params = ParamSet::<f64>::new();
        let block = Drab::new(&mut params, "b", 4, 2, &mut rng(10)).unwrap();
        assert_gradients(&[&[1, 4, 4, 3], &[1, 4, 4, 3]], 11, |t, x| {
            let bound = params.bind(t, false);
            let (f, r) = block.forward(t, &bound, x[0], x[1])?;
            let r = t.scale(r, 0.3)?;
            t.add(f, r)
        });
    }

    /// With the attention branches reduced to local maps (constant gates,
    /// identity non-local block) the network is a stack of convolutions, so
    /// pixels far enough from a crop border see identical inputs.
    #[test]
    fn interior_of_crop_matches_full_forward() {
        let (model, mut params) = Awan::init::<f64>(tiny(1), &mut rng(12)).unwrap();
        for block in &model.blocks {
            let w = params.get_mut(block.awca.gate_up.weight);
            w.data_mut().iter_mut().for_each(|v| *v = 0.0);
        }
        model.psnl.out.zero(&mut params);
        let x = Tensor::uniform([1, 3, 26, 26], 0.0, 1.0, &mut rng(13));
        let full = model.infer(&params, &x).unwrap();
        let (top, left, size) = (3, 5, 20);
        let crop = x.slice(2, top, top + size).unwrap().slice(3, left, left + size).unwrap();
        let cropped = model.infer(&params, &crop).unwrap();
        // head + block (3,3,5,3) + tail + output
        let radius = 1 + (1 + 1 + 2 + 1) + 1 + 1;
        for c in 0..31 {
            for i in radius..size - radius {
                for j in radius..size - radius {
                    let a = cropped.at(&[0, c, i, j]);
                    let b = full.at(&[0, c, i + top, j + left]);
                    assert!((a - b).abs() <= 1e-5, "{a} vs {b}");
                }
            }
        }
    }

    #[test]
    fn self_ensemble_is_mean_of_two_passes() {
        let (model, params) = Awan::init::<f64>(tiny(1), &mut rng(14)).unwrap();
        let x = Tensor::uniform([1, 3, 5, 4], 0.0, 1.0, &mut rng(15));
        let ensemble = model.infer_self_ensemble(&params, &x).unwrap();
        let plain = model.infer(&params, &x).unwrap();
        let flipped_input = Tensor::from_fn([1, 3, 5, 4], |i| {
            let (c, rest) = (i / 20, i % 20);
            let (h, w) = (rest / 4, rest % 4);
            x.at(&[0, c, 4 - h, w])
        });
        let flipped_out = model.infer(&params, &flipped_input).unwrap();
        for c in 0..31 {
            for h in 0..5 {
                for w in 0..4 {
                    let expected = 0.5 * (plain.at(&[0, c, h, w]) + flipped_out.at(&[0, c, 4 - h, w]));
                    assert!((ensemble.at(&[0, c, h, w]) - expected).abs() <= 1e-12);
                }
            }
        }
    }

    #[test]
    fn pointwise_network_is_flip_equivariant() {
        let mut params = ParamSet::<f32>::new();
        let mut r = rng(16);
        let a = Conv2d::new(&mut params, "a", 3, 8, 1, &mut r).unwrap();
        let act = Prelu::new(&mut params, "act", 8);
        let b = Conv2d::new(&mut params, "b", 8, 31, 1, &mut r).unwrap();
        let forward = |x: &Tensor<f32>| {
            let mut tape = Tape::new();
            let bound = params.bind(&mut tape, false);
            let v = tape.constant(x.clone());
            let h = a.forward(&mut tape, &bound, v)?;
            let h = act.forward(&mut tape, &bound, h)?;
            let y = b.forward(&mut tape, &bound, h)?;
            Ok(tape.value(y).clone())
        };
        let x = Tensor::uniform([2, 3, 7, 5], -1.0, 1.0, &mut rng(17));
        assert_eq!(self_ensemble(&x, forward).unwrap(), forward(&x).unwrap());
    }

    #[test]
    fn parameter_count_arithmetic() {
        let mut params = ParamSet::<f32>::new();
        Conv2d::new(&mut params, "c", 3, 2, 1, &mut rng(0)).unwrap();
        assert_eq!(count_parameters(&params), 8);

        let conv = |ci: usize, co: usize, k: usize| ci * co * k * k + co;
        let tally = |cfg: AwanConfig| {
            let c = cfg.channels;
            let (h, d) = (c / cfg.awca_reduction, c / cfg.psnl_reduction);
            let block = 3 * conv(c, c, 3) + conv(c, c, 5) + 3 * c + conv(c, 1, 1) + conv(c, h, 1) + conv(h, c, 1);
            conv(3, c, 3)
                + cfg.blocks * block
                + conv(c, c, 3)
                + c
                + 2 * conv(c, d, 1)
                + conv(d, c, 1)
                + conv(c, 31, 3)
        };
        for cfg in [AwanConfig::tiny(), tiny(3)] {
            let (_, params) = Awan::init::<f32>(cfg, &mut rng(1)).unwrap();
            assert_eq!(count_parameters(&params), tally(cfg));
            assert_eq!(cfg.parameter_count(), tally(cfg) as u128);
            assert_eq!(cfg.tensor_count(), params.len() as u128);
        }
        let per_block = |cfg| {
            let (_, one) = Awan::init::<f32>(cfg, &mut rng(1)).unwrap();
            count_parameters(&one)
        };
        let (m1, m2, m4) = (per_block(tiny(1)), per_block(tiny(2)), per_block(tiny(4)));
        assert_eq!(m4 - m2, 2 * (m2 - m1));
    }

    #[test]
    fn default_parameter_count() {
        let (_, params) = Awan::init::<f32>(AwanConfig::default(), &mut rng(0)).unwrap();
        // head 5,600; blocks 8 x 2,086,613; tail 360,200 + 200;
        // non-local 5,025 + 5,025 + 5,200; output 55,831
        assert_eq!(count_parameters(&params), 17_129_985);
    }
}
