//! Binary checkpoints of model parameters and optimizer state.
//!
//! All integers are little-endian.
//!
//! ```text
//! magic        8 bytes  "AWANCKPT"
//! version      u32      1
//! config       6 × u32  blocks, channels, awca_reduction, psnl_reduction,
//!                       in_channels, out_channels
//! count        u32      number of parameter tensors
//! per tensor:  u32 name length, UTF-8 name, u32 rank, rank × u32 extents,
//!              f32 values
//! optimizer    u8       0 = absent, 1 = present
//! if present:  u64 step, then for every tensor in order its first moment
//!              followed by its second moment, as f32 values
//! ```

use std::fs;
use std::path::Path;

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use crate::error::{Error, Result};
use crate::model::{Awan, AwanConfig};
use crate::optim::OptimState;
use crate::params::ParamSet;
use crate::tensor::Tensor;

pub const MAGIC: &[u8; 8] = b"AWANCKPT";
pub const VERSION: u32 = 1;

const MAX_NAME_LEN: usize = 1024;
const MAX_RANK: usize = 8;

#[derive(Clone, Debug, PartialEq)]
pub struct Checkpoint {
    pub config: AwanConfig,
    pub params: ParamSet<f32>,
    pub optim: Option<OptimState<f32>>,
}

impl Checkpoint {
    /// Rebuilds the model described by the config and loads the stored
    /// parameters into it.
    pub fn restore(&self) -> Result<(Awan, ParamSet<f32>)> {
        self.config.validate()?;
        let stored: u128 = self.params.tensors().iter().map(|t| t.numel() as u128).sum();
        if stored != self.config.parameter_count() || self.params.len() as u128 != self.config.tensor_count() {
            return Err(Error::Checkpoint(format!(
                "{} tensors with {stored} values do not fit the stored configuration",
                self.params.len()
            )));
        }
        let (model, mut params) = Awan::init(self.config, &mut ChaCha8Rng::seed_from_u64(0))?;
        params.load_from(&self.params)?;
        if let Some(optim) = &self.optim {
            optim.validate(&params)?;
        }
        Ok((model, params))
    }
}

fn put_u32(out: &mut Vec<u8>, v: usize) -> Result<()> {
    let v = u32::try_from(v).map_err(|_| Error::ExtentOverflow(format!("{v} exceeds u32")))?;
    out.extend_from_slice(&v.to_le_bytes());
    Ok(())
}

fn put_values(out: &mut Vec<u8>, t: &Tensor<f32>) {
    for v in t.data() {
        out.extend_from_slice(&v.to_le_bytes());
    }
}

pub fn encode(ckpt: &Checkpoint) -> Result<Vec<u8>> {
    let mut out = Vec::new();
    out.extend_from_slice(MAGIC);
    out.extend_from_slice(&VERSION.to_le_bytes());
    let c = &ckpt.config;
    for v in [c.blocks, c.channels, c.awca_reduction, c.psnl_reduction, c.in_channels, c.out_channels] {
        put_u32(&mut out, v)?;
    }
    put_u32(&mut out, ckpt.params.len())?;
    for (name, t) in ckpt.params.iter() {
        put_u32(&mut out, name.len())?;
        out.extend_from_slice(name.as_bytes());
        put_u32(&mut out, t.rank())?;
        for &d in t.shape() {
            put_u32(&mut out, d)?;
        }
        put_values(&mut out, t);
    }
    match &ckpt.optim {
        None => out.push(0),
        Some(state) => {
            state.validate(&ckpt.params)?;
            out.push(1);
            out.extend_from_slice(&state.step.to_le_bytes());
            for (m, v) in state.m.iter().zip(&state.v) {
                put_values(&mut out, m);
                put_values(&mut out, v);
            }
        }
    }
    Ok(out)
}

struct Reader<'a> {
    bytes: &'a [u8],
    offset: usize,
}

impl<'a> Reader<'a> {
    fn take(&mut self, needed: usize) -> Result<&'a [u8]> {
        let available = self.bytes.len() - self.offset;
        if needed > available {
            return Err(Error::Truncated {
                offset: self.offset,
                needed,
                available,
            });
        }
        let slice = &self.bytes[self.offset..self.offset + needed];
        self.offset += needed;
        Ok(slice)
    }

    fn u8(&mut self) -> Result<u8> {
        Ok(self.take(1)?[0])
    }

    fn u32(&mut self) -> Result<usize> {
        Ok(u32::from_le_bytes(self.take(4)?.try_into().expect("4 bytes")) as usize)
    }

    fn u64(&mut self) -> Result<u64> {
        Ok(u64::from_le_bytes(self.take(8)?.try_into().expect("8 bytes")))
    }

    fn values(&mut self, shape: &[usize]) -> Result<Tensor<f32>> {
        let count = shape
            .iter()
            .try_fold(1usize, |acc, &d| acc.checked_mul(d))
            .and_then(|n| n.checked_mul(4).map(|b| (n, b)));
        let (n, bytes) = count.ok_or_else(|| Error::ExtentOverflow(format!("{shape:?}")))?;
        let raw = self.take(bytes)?;
        let data = raw
            .chunks_exact(4)
            .map(|c| f32::from_le_bytes(c.try_into().expect("4 bytes")))
            .collect::<Vec<_>>();
        debug_assert_eq!(data.len(), n);
        Tensor::new(shape.to_vec(), data)
    }
}

pub fn decode(bytes: &[u8]) -> Result<Checkpoint> {
    let mut r = Reader { bytes, offset: 0 };
    if r.take(8)? != MAGIC {
        return Err(Error::BadMagic { expected: "AWANCKPT" });
    }
    let version = r.u32()?;
    if version != VERSION as usize {
        return Err(Error::UnsupportedVersion(version as u32));
    }
    let mut fields = [0usize; 6];
    for f in &mut fields {
        *f = r.u32()?;
    }
    let config = AwanConfig {
        blocks: fields[0],
        channels: fields[1],
        awca_reduction: fields[2],
        psnl_reduction: fields[3],
        in_channels: fields[4],
        out_channels: fields[5],
    };
    let count = r.u32()?;
    let mut params = ParamSet::new();
    for i in 0..count {
        let len = r.u32()?;
        if len > MAX_NAME_LEN {
            return Err(Error::Checkpoint(format!("tensor {i}: name length {len} is too long")));
        }
        let name = std::str::from_utf8(r.take(len)?)
            .map_err(|_| Error::Checkpoint(format!("tensor {i}: name is not UTF-8")))?;
        if params.find(name).is_some() {
            return Err(Error::Checkpoint(format!("duplicate tensor `{name}`")));
        }
        let name = name.to_owned();
        let rank = r.u32()?;
        if rank > MAX_RANK {
            return Err(Error::Checkpoint(format!("tensor `{name}`: rank {rank} is too large")));
        }
        let shape = (0..rank).map(|_| r.u32()).collect::<Result<Vec<_>>>()?;
        let value = r.values(&shape)?;
        params.register(name, value);
    }
    let optim = match r.u8()? {
        0 => None,
        1 => {
            let step = r.u64()?;
            let mut state = OptimState { m: Vec::new(), v: Vec::new(), step };
            for t in params.tensors() {
                state.m.push(r.values(t.shape())?);
                state.v.push(r.values(t.shape())?);
            }
            Some(state)
        }
        flag => return Err(Error::Checkpoint(format!("invalid optimizer flag {flag}"))),
    };
    let trailing = bytes.len() - r.offset;
    if trailing != 0 {
        return Err(Error::TrailingBytes(trailing));
    }
    Ok(Checkpoint { config, params, optim })
}

pub fn save(path: impl AsRef<Path>, ckpt: &Checkpoint) -> Result<()> {
    let path = path.as_ref();
    fs::write(path, encode(ckpt)?).map_err(|e| Error::io(path, e))
}

pub fn load(path: impl AsRef<Path>) -> Result<Checkpoint> {
    let path = path.as_ref();
    let bytes = fs::read(path).map_err(|e| Error::io(path, e))?;
    decode(&bytes)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::testing::rng;
    use proptest::prelude::*;

    fn sample() -> Checkpoint {
        let config = AwanConfig {
            blocks: 1,
            channels: 4,
            awca_reduction: 2,
            psnl_reduction: 2,
            ..AwanConfig::default()
        };
        let (_, params) = Awan::init::<f32>(config, &mut rng(1)).unwrap();
        let mut optim = OptimState::new(&params);
        let mut r = rng(2);
        for t in optim.m.iter_mut().chain(optim.v.iter_mut()) {
            *t = Tensor::uniform(t.shape(), -1.0, 1.0, &mut r);
        }
        optim.step = 17;
        Checkpoint { config, params, optim: Some(optim) }
    }

    fn bits(t: &[Tensor<f32>]) -> Vec<u32> {
        t.iter().flat_map(|t| t.data().iter().map(|v| v.to_bits())).collect()
    }

    #[test]
    fn round_trip_is_bit_exact() {
        let ckpt = sample();
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("c.ckpt");
        save(&path, &ckpt).unwrap();
        let back = load(&path).unwrap();
        assert_eq!(back.config, ckpt.config);
        assert_eq!(bits(back.params.tensors()), bits(ckpt.params.tensors()));
        let (a, b) = (back.optim.as_ref().unwrap(), ckpt.optim.as_ref().unwrap());
        assert_eq!(a.step, 17);
        assert_eq!(bits(&a.m), bits(&b.m));
        assert_eq!(bits(&a.v), bits(&b.v));

        let (_, restored) = back.restore().unwrap();
        assert_eq!(restored, ckpt.params);

        let bare = Checkpoint { optim: None, ..ckpt };
        assert_eq!(decode(&encode(&bare).unwrap()).unwrap(), bare);
    }

    #[test]
    fn corrupt_inputs_are_rejected() {
        let good = encode(&sample()).unwrap();
        let mut magic = good.clone();
        magic[3] ^= 1;
        assert!(matches!(decode(&magic), Err(Error::BadMagic { .. })));
        let mut version = good.clone();
        version[8] = 9;
        assert!(matches!(decode(&version), Err(Error::UnsupportedVersion(9))));
        assert!(matches!(decode(&good[..good.len() - 3]), Err(Error::Truncated { .. })));
        let mut extra = good.clone();
        extra.push(0);
        assert!(matches!(decode(&extra), Err(Error::TrailingBytes(1))));
        let mut flag = good.clone();
        let flag_at = encode(&Checkpoint { optim: None, ..sample() }).unwrap().len() - 1;
        flag[flag_at] = 7;
        assert!(matches!(decode(&flag), Err(Error::Checkpoint(_))));
    }

    #[test]
    fn restore_checks_against_config() {
        let mut ckpt = sample();
        ckpt.config.blocks = 2;
        assert!(ckpt.restore().is_err());
        let mut ckpt = sample();
        ckpt.config.channels = 1 << 30;
        assert!(ckpt.restore().is_err());
        let mut ckpt = sample();
        let id = ckpt.params.find("head.bias").unwrap();
        ckpt.params.get_mut(id).data_mut()[0] = 3.0;
        let (_, params) = ckpt.restore().unwrap();
        assert_eq!(params.get(params.find("head.bias").unwrap()).data()[0], 3.0);
    }

    proptest! {
        #[test]
        fn decode_never_panics(bytes in proptest::collection::vec(any::<u8>(), 0..128)) {
            let mut data = MAGIC.to_vec();
            data.extend_from_slice(&bytes);
            if let Ok(ckpt) = decode(&data) {
                let _ = ckpt.restore();
            }
        }
    }
}
