//! Iteration-driven training loop.

use std::fmt;

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use crate::autodiff::Tape;
use crate::checkpoint::Checkpoint;
use crate::data::{sample_batch, CssFunction, HsiCube, RgbImage};
use crate::error::{Error, Result};
use crate::loss::{combined_loss, evaluate_set, LossConfig, SetReport};
use crate::model::{Awan, AwanConfig};
use crate::optim::{poly_decay, Adam, OptimState};
use crate::params::ParamSet;
use crate::scalar::Scalar;
use crate::tensor::Tensor;

/// Mixed into the seed of the per-iteration batch sampler so that it never
/// shares a stream with parameter initialization.
const BATCH_STREAM_SALT: u64 = 0xba7c_4e5a_3f1d_2c0b;

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct TrainConfig {
    pub lr0: f64,
    pub power: f64,
    pub iterations: u64,
    pub batch: usize,
    pub patch: usize,
    pub seed: u64,
    pub loss: LossConfig,
    /// Checkpoint every this many iterations; 0 disables periodic saves.
    pub ckpt_every: u64,
}

impl Default for TrainConfig {
    fn default() -> Self {
        TrainConfig {
            lr0: 1e-4,
            power: 1.5,
            iterations: 1000,
            batch: 32,
            patch: 64,
            seed: 0,
            loss: LossConfig::default(),
            ckpt_every: 0,
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        if !(self.lr0 > 0.0 && self.lr0.is_finite()) {
            return Err(Error::config(format!("lr must be > 0, got {}", self.lr0)));
        }
        if !(self.power > 0.0 && self.power.is_finite()) {
            return Err(Error::config(format!("power must be > 0, got {}", self.power)));
        }
        if self.iterations == 0 || self.batch == 0 || self.patch == 0 {
            return Err(Error::config("iterations, batch and patch must be at least 1"));
        }
        self.loss.validate()
    }
}

/// One line of the metric log.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct LogRecord {
    pub iter: u64,
    pub lr: f64,
    pub mrae: f64,
    pub css: f64,
    pub total: f64,
}

impl fmt::Display for LogRecord {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(
            f,
            "iter={} lr={:e} mrae={} css={} total={}",
            self.iter, self.lr, self.mrae, self.css, self.total
        )
    }
}

/// Stacks `[C, H, W]` tensors into `[N, C, H, W]`, converting precision.
pub fn stack<E: Scalar>(items: &[&Tensor<f32>]) -> Result<Tensor<E>> {
    let first = items.first().ok_or_else(|| Error::config("cannot stack an empty batch"))?;
    let mut shape = vec![items.len()];
    shape.extend_from_slice(first.shape());
    let mut data = Vec::with_capacity(items.len() * first.numel());
    for t in items {
        if t.shape() != first.shape() {
            return Err(Error::ShapeMismatch {
                op: "stack",
                lhs: first.shape().to_vec(),
                rhs: t.shape().to_vec(),
            });
        }
        data.extend(t.data().iter().map(|&v| E::of(v as f64)));
    }
    Tensor::new(shape, data)
}

pub struct Trainer<E: Scalar> {
    pub model: Awan,
    pub params: ParamSet<E>,
    pub state: OptimState<E>,
    pub config: TrainConfig,
    pub adam: Adam,
    projection: Option<Tensor<E>>,
}

impl<E: Scalar> Trainer<E> {
    /// Fresh parameters drawn from `config.seed`. Without `css` the
    /// projected-RGB term is disabled whatever `tau` says.
    pub fn new(model: AwanConfig, config: TrainConfig, css: Option<&CssFunction>) -> Result<Self> {
        config.validate()?;
        let (model, params) = Awan::init(model, &mut ChaCha8Rng::seed_from_u64(config.seed))?;
        let state = OptimState::new(&params);
        Ok(Self::assemble(model, params, state, config, css))
    }

    /// Continues from a checkpoint; the next iteration is the optimizer's
    /// step count.
    pub fn resume(ckpt: &Checkpoint, config: TrainConfig, css: Option<&CssFunction>) -> Result<Self> {
        config.validate()?;
        let (model, params) = ckpt.restore()?;
        let params = params.cast::<E>();
        let state = match &ckpt.optim {
            Some(s) => OptimState {
                m: s.m.iter().map(Tensor::cast).collect(),
                v: s.v.iter().map(Tensor::cast).collect(),
                step: s.step,
            },
            None => OptimState::new(&params),
        };
        if state.step > config.iterations {
            return Err(Error::config(format!(
                "checkpoint is at iteration {} beyond the schedule of {}",
                state.step, config.iterations
            )));
        }
        Ok(Self::assemble(model, params, state, config, css))
    }

    fn assemble(
        model: Awan,
        params: ParamSet<E>,
        state: OptimState<E>,
        mut config: TrainConfig,
        css: Option<&CssFunction>,
    ) -> Self {
        if css.is_none() {
            config.loss.tau = 0.0;
        }
        Trainer {
            model,
            params,
            state,
            config,
            adam: Adam::default(),
            projection: css.map(CssFunction::conv_weight),
        }
    }

    /// Iterations completed so far.
    pub fn completed(&self) -> u64 {
        self.state.step
    }

    pub fn is_done(&self) -> bool {
        self.completed() >= self.config.iterations
    }

    /// The batch for iteration `iter`, a pure function of seed and index.
    pub fn batch(&self, dataset: &[(HsiCube, RgbImage)], iter: u64) -> Result<(Tensor<E>, Tensor<E>)> {
        let mut rng = ChaCha8Rng::seed_from_u64(self.config.seed ^ BATCH_STREAM_SALT);
        rng.set_stream(iter);
        let crops = sample_batch(dataset, self.config.patch, self.config.batch, &mut rng)?;
        let hsi: Vec<_> = crops.iter().map(|(h, _)| h).collect();
        let rgb: Vec<_> = crops.iter().map(|(_, r)| r).collect();
        Ok((stack(&hsi)?, stack(&rgb)?))
    }

    /// Runs one iteration and returns its log record.
    pub fn step(&mut self, dataset: &[(HsiCube, RgbImage)]) -> Result<LogRecord> {
        let iter = self.completed();
        if self.is_done() {
            return Err(Error::config(format!("schedule of {iter} iterations is complete")));
        }
        let lr = poly_decay(iter, self.config.iterations, self.config.lr0, self.config.power)?;
        let (gt, rgb) = self.batch(dataset, iter)?;

        let mut tape = Tape::new();
        let bound = self.params.bind(&mut tape, true);
        let x = tape.constant(rgb);
        let g = tape.constant(gt);
        let pred = self.model.forward(&mut tape, &bound, x)?;
        let terms = combined_loss(&mut tape, g, pred, self.projection.as_ref(), &self.config.loss)?;
        let record = LogRecord {
            iter,
            lr,
            mrae: tape.value(terms.mrae).item().as_f64(),
            css: terms.css.map_or(0.0, |c| tape.value(c).item().as_f64()),
            total: tape.value(terms.total).item().as_f64(),
        };
        if !record.total.is_finite() {
            return Err(Error::Diverged { iter, detail: record.to_string() });
        }
        let grads = tape.backward(terms.total)?;
        let grads = bound.gradients(&self.params, &grads);
        self.adam
            .step(&mut self.params, &grads, &mut self.state, lr)
            .map_err(|e| match e {
                Error::NonFinite(detail) => Error::Diverged { iter, detail },
                other => other,
            })?;
        Ok(record)
    }

    /// Trains to the end of the schedule. `on_record` sees every log line;
    /// `on_checkpoint` is called after every `ckpt_every` iterations.
    pub fn run(
        &mut self,
        dataset: &[(HsiCube, RgbImage)],
        mut on_record: impl FnMut(&LogRecord) -> Result<()>,
        mut on_checkpoint: impl FnMut(&Checkpoint) -> Result<()>,
    ) -> Result<Vec<LogRecord>> {
        if dataset.is_empty() {
            return Err(Error::config("training set is empty"));
        }
        let mut log = Vec::new();
        while !self.is_done() {
            let record = self.step(dataset)?;
            on_record(&record)?;
            log.push(record);
            let every = self.config.ckpt_every;
            if every > 0 && self.completed() % every == 0 {
                on_checkpoint(&self.checkpoint())?;
            }
        }
        Ok(log)
    }

    /// Parameters and optimizer state at 32-bit precision.
    pub fn checkpoint(&self) -> Checkpoint {
        Checkpoint {
            config: self.model.config,
            params: self.params.cast(),
            optim: Some(OptimState {
                m: self.state.m.iter().map(Tensor::cast).collect(),
                v: self.state.v.iter().map(Tensor::cast).collect(),
                step: self.state.step,
            }),
        }
    }
}

/// Scores the model on whole images of a dataset.
pub fn evaluate<E: Scalar>(
    model: &Awan,
    params: &ParamSet<E>,
    dataset: &[(HsiCube, RgbImage)],
    self_ensemble: bool,
    floor: Option<f64>,
) -> Result<SetReport> {
    let pairs = dataset
        .iter()
        .map(|(hsi, rgb)| {
            let rgb: Tensor<E> = rgb.data().cast();
            let pred = if self_ensemble {
                model.infer_self_ensemble(params, &rgb)?
            } else {
                model.infer(params, &rgb)?
            };
            Ok((hsi.data().cast::<f64>(), pred.cast::<f64>()))
        })
        .collect::<Result<Vec<_>>>()?;
    evaluate_set(&pairs, floor)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::checkpoint::{decode, encode};
    use crate::data::{default_css, synth_dataset};

    fn small() -> (AwanConfig, TrainConfig, Vec<(HsiCube, RgbImage)>) {
        let model = AwanConfig {
            blocks: 1,
            channels: 4,
            awca_reduction: 2,
            psnl_reduction: 2,
            ..AwanConfig::default()
        };
        let train = TrainConfig {
            lr0: 1e-3,
            iterations: 6,
            batch: 2,
            patch: 4,
            seed: 3,
            ..TrainConfig::default()
        };
        (model, train, synth_dataset(1, 3, 6, 6, &default_css()).unwrap())
    }

    fn run_all<E: Scalar>(t: &mut Trainer<E>, data: &[(HsiCube, RgbImage)]) -> Vec<LogRecord> {
        t.run(data, |_| Ok(()), |_| Ok(())).unwrap()
    }

    #[test]
    fn same_seed_same_log() {
        let (model, train, data) = small();
        let css = default_css();
        let a = run_all(&mut Trainer::<f32>::new(model, train, Some(&css)).unwrap(), &data);
        let b = run_all(&mut Trainer::<f32>::new(model, train, Some(&css)).unwrap(), &data);
        assert_eq!(a, b);
        assert_eq!(a.len(), 6);
        assert!(a.iter().all(|r| r.total.is_finite() && r.css > 0.0));
        assert_eq!(a[0].lr, 1e-3);
        let line = a[0].to_string();
        assert!(line.starts_with("iter=0 lr=1e-3 mrae="), "{line}");
    }

    #[test]
    fn zero_tau_logs_zero_css() {
        let (model, mut train, data) = small();
        train.loss.tau = 0.0;
        let css = default_css();
        let log = run_all(&mut Trainer::<f32>::new(model, train, Some(&css)).unwrap(), &data);
        assert!(log.iter().all(|r| r.css == 0.0 && r.total == r.mrae));

        let (_, train, _) = small();
        let mut t = Trainer::<f32>::new(model, train, None).unwrap();
        assert_eq!(t.config.loss.tau, 0.0);
        assert!(run_all(&mut t, &data).iter().all(|r| r.css == 0.0));
    }

    #[test]
    fn resume_reproduces_unbroken_run() {
        let (model, mut train, data) = small();
        train.ckpt_every = 3;
        let css = default_css();
        let mut saved = Vec::new();
        let mut full = Trainer::<f32>::new(model, train, Some(&css)).unwrap();
        let unbroken = full
            .run(&data, |_| Ok(()), |c| {
                saved.push(encode(c)?);
                Ok(())
            })
            .unwrap();
        assert_eq!(saved.len(), 2);

        let ckpt = decode(&saved[0]).unwrap();
        let mut resumed = Trainer::<f32>::resume(&ckpt, train, Some(&css)).unwrap();
        assert_eq!(resumed.completed(), 3);
        let tail = run_all(&mut resumed, &data);
        assert_eq!(&unbroken[3..], &tail[..]);
        assert_eq!(resumed.params, full.params);
    }

    #[test]
    fn non_finite_loss_reports_iteration() {
        let (model, train, data) = small();
        let mut t = Trainer::<f32>::new(model, train, Some(&default_css())).unwrap();
        t.step(&data).unwrap();
        let id = t.params.find("output.bias").unwrap();
        t.params.get_mut(id).data_mut()[0] = f32::NAN;
        assert!(matches!(t.step(&data), Err(Error::Diverged { iter: 1, .. })));
    }

    #[test]
    fn loss_decreases_on_a_fixed_image() {
        let (model, mut train, _) = small();
        let data = synth_dataset(2, 1, 4, 4, &default_css()).unwrap();
        train.iterations = 60;
        train.batch = 1;
        train.lr0 = 5e-3;
        let log = run_all(&mut Trainer::<f64>::new(model, train, None).unwrap(), &data);
        assert!(log.last().unwrap().mrae < 0.5 * log[0].mrae);
        let t = Trainer::<f64>::new(model, train, None).unwrap();
        let report = evaluate(&t.model, &t.params, &data, true, Some(1e-4)).unwrap();
        assert!(report.mean_mrae.is_finite());
    }

    #[test]
    fn config_validation() {
        assert!(TrainConfig::default().validate().is_ok());
        assert!(TrainConfig { lr0: 0.0, ..TrainConfig::default() }.validate().is_err());
        assert!(TrainConfig { iterations: 0, ..TrainConfig::default() }.validate().is_err());
        assert!(TrainConfig { power: -1.0, ..TrainConfig::default() }.validate().is_err());
        let (model, train, data) = small();
        let mut t = Trainer::<f32>::new(model, TrainConfig { patch: 7, ..train }, None).unwrap();
        assert!(t.step(&data).is_err());
    }
}
