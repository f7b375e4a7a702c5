//! Binary checkpoint format (all integers and floats little-endian):
//!
//! ```text
//! "IRCK" | u32 version | str stage | u64 seed | str config
//! u32 n_params  | n × array
//! u32 n_buffers | n × array
//! u8 has_optimizer [ | f64 beta1 | f64 beta2 | f64 eps | u64 step
//!                    | u32 n_groups | n × (str prefix, f64 lr)
//!                    | u32 n_moments | n × (array first, array second) ]
//! str   = u32 byte length | UTF-8 bytes
//! array = str name | u32 ndim | ndim × u32 dim | Π dims × f32
//! ```
//!
//! Readers must consume the file exactly; short or over-long files are
//! corrupt.

use std::fs;
use std::path::Path;

use indexmap::IndexMap;

use super::optim::{AdamConfig, OptimizerState};
use crate::error::{Error, Result};
use crate::nn::{ParamStore, Tensor};

pub const MAGIC: &[u8; 4] = b"IRCK";
pub const FORMAT_VERSION: u32 = 1;

#[derive(Debug, Clone, PartialEq)]
pub struct Checkpoint {
    pub stage: String,
    pub seed: u64,
    /// Resolved run configuration (TOML) that produced the parameters.
    pub config: String,
    pub params: ParamStore<f32>,
    pub optimizer: Option<OptimizerState>,
}

struct Writer(Vec<u8>);

impl Writer {
    fn u8(&mut self, v: u8) {
        self.0.push(v);
    }
    fn u32(&mut self, v: u32) {
        self.0.extend_from_slice(&v.to_le_bytes());
    }
    fn u64(&mut self, v: u64) {
        self.0.extend_from_slice(&v.to_le_bytes());
    }
    fn f64(&mut self, v: f64) {
        self.0.extend_from_slice(&v.to_le_bytes());
    }
    fn str(&mut self, s: &str) {
        self.u32(s.len() as u32);
        self.0.extend_from_slice(s.as_bytes());
    }
    fn array(&mut self, name: &str, t: &Tensor<f32>) {
        self.str(name);
        self.u32(t.shape().len() as u32);
        for &d in t.shape() {
            self.u32(d as u32);
        }
        for v in t.data() {
            self.0.extend_from_slice(&v.to_le_bytes());
        }
    }
}

struct Reader<'a> {
    buf: &'a [u8],
    pos: usize,
}

impl<'a> Reader<'a> {
    fn take(&mut self, n: usize) -> Result<&'a [u8]> {
        let end = self
            .pos
            .checked_add(n)
            .filter(|&e| e <= self.buf.len())
            .ok_or_else(|| Error::CorruptCheckpoint(format!("truncated at byte {}", self.pos)))?;
        let s = &self.buf[self.pos..end];
        self.pos = end;
        Ok(s)
    }
    fn u8(&mut self) -> Result<u8> {
        Ok(self.take(1)?[0])
    }
    fn u32(&mut self) -> Result<u32> {
        Ok(u32::from_le_bytes(self.take(4)?.try_into().expect("4 bytes")))
    }
    fn u64(&mut self) -> Result<u64> {
        Ok(u64::from_le_bytes(self.take(8)?.try_into().expect("8 bytes")))
    }
    fn f64(&mut self) -> Result<f64> {
        Ok(f64::from_le_bytes(self.take(8)?.try_into().expect("8 bytes")))
    }
    fn str(&mut self) -> Result<String> {
        let n = self.u32()? as usize;
        String::from_utf8(self.take(n)?.to_vec())
            .map_err(|_| Error::CorruptCheckpoint(format!("invalid UTF-8 before byte {}", self.pos)))
    }
    fn array(&mut self) -> Result<(String, Tensor<f32>)> {
        let name = self.str()?;
        let ndim = self.u32()? as usize;
        let shape = (0..ndim).map(|_| Ok(self.u32()? as usize)).collect::<Result<Vec<_>>>()?;
        let n = shape
            .iter()
            .try_fold(1usize, |a, &d| a.checked_mul(d))
            .and_then(|n| n.checked_mul(4))
            .ok_or_else(|| Error::CorruptCheckpoint(format!("`{name}` has an absurd shape {shape:?}")))?;
        let bytes = self.take(n)?;
        let data = bytes
            .chunks_exact(4)
            .map(|c| f32::from_le_bytes(c.try_into().expect("4 bytes")))
            .collect();
        Ok((name, Tensor::new(shape, data)?))
    }
}

impl Checkpoint {
    pub fn to_bytes(&self) -> Vec<u8> {
        let mut w = Writer(Vec::new());
        w.0.extend_from_slice(MAGIC);
        w.u32(FORMAT_VERSION);
        w.str(&self.stage);
        w.u64(self.seed);
        w.str(&self.config);
        let params: Vec<_> = self.params.params().collect();
        w.u32(params.len() as u32);
        for (k, t) in params {
            w.array(k, t);
        }
        let buffers: Vec<_> = self.params.buffers().collect();
        w.u32(buffers.len() as u32);
        for (k, t) in buffers {
            w.array(k, t);
        }
        match &self.optimizer {
            None => w.u8(0),
            Some(o) => {
                w.u8(1);
                w.f64(o.config.beta1);
                w.f64(o.config.beta2);
                w.f64(o.config.eps);
                w.u64(o.step);
                w.u32(o.groups.len() as u32);
                for (p, lr) in &o.groups {
                    w.str(p);
                    w.f64(*lr);
                }
                w.u32(o.first.len() as u32);
                for (k, m) in &o.first {
                    w.array(k, m);
                    w.array(k, &o.second[k]);
                }
            }
        }
        w.0
    }

    pub fn from_bytes(buf: &[u8]) -> Result<Self> {
        let mut r = Reader { buf, pos: 0 };
        if r.take(4).map_err(|_| Error::CorruptCheckpoint("file too short".into()))? != MAGIC {
            return Err(Error::CorruptCheckpoint("bad magic bytes".into()));
        }
        let version = r.u32()?;
        if version != FORMAT_VERSION {
            return Err(Error::UnsupportedVersion(version));
        }
        let stage = r.str()?;
        let seed = r.u64()?;
        let config = r.str()?;
        let mut params = ParamStore::new();
        for _ in 0..r.u32()? {
            let (k, t) = r.array()?;
            params.insert_param(k, t);
        }
        for _ in 0..r.u32()? {
            let (k, t) = r.array()?;
            params.insert_buffer(k, t);
        }
        let optimizer = match r.u8()? {
            0 => None,
            1 => {
                let config = AdamConfig {
                    beta1: r.f64()?,
                    beta2: r.f64()?,
                    eps: r.f64()?,
                };
                let step = r.u64()?;
                let groups = (0..r.u32()?)
                    .map(|_| Ok((r.str()?, r.f64()?)))
                    .collect::<Result<Vec<_>>>()?;
                let mut first = IndexMap::new();
                let mut second = IndexMap::new();
                for _ in 0..r.u32()? {
                    let (k, m) = r.array()?;
                    let (k2, v) = r.array()?;
                    if k != k2 || m.shape() != v.shape() {
                        return Err(Error::CorruptCheckpoint(format!("moment pair `{k}`/`{k2}` mismatched")));
                    }
                    first.insert(k.clone(), m);
                    second.insert(k, v);
                }
                Some(OptimizerState {
                    config,
                    groups,
                    step,
                    first,
                    second,
                })
            }
            f => return Err(Error::CorruptCheckpoint(format!("bad optimizer flag {f}"))),
        };
        if r.pos != buf.len() {
            return Err(Error::CorruptCheckpoint(format!(
                "{} trailing bytes",
                buf.len() - r.pos
            )));
        }
        Ok(Self {
            stage,
            seed,
            config,
            params,
            optimizer,
        })
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        Ok(fs::write(path, self.to_bytes())?)
    }

    pub fn load(path: &Path) -> Result<Self> {
        Self::from_bytes(&fs::read(path)?)
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    fn sample(with_opt: bool) -> Checkpoint {
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let mut params = ParamStore::new();
        params.insert_param("enc.conv0.weight", Tensor::randn(&[2, 3, 1, 1], 1.0, &mut rng));
        params.insert_param("dec.const", Tensor::randn(&[1, 2, 4, 4], 1.0, &mut rng));
        params.insert_param("scalar", Tensor::scalar(f32::NAN));
        params.insert_buffer("cls.bn.running_var", Tensor::ones(&[2]));
        let optimizer = with_opt.then(|| {
            let mut o = OptimizerState::new(AdamConfig::default(), vec![("enc.".into(), 2e-4), ("dec.".into(), 2e-3)]);
            o.step = 7;
            o.first.insert("dec.const".into(), Tensor::randn(&[1, 2, 4, 4], 1.0, &mut rng));
            o.second.insert("dec.const".into(), Tensor::randn(&[1, 2, 4, 4], 1.0, &mut rng));
            o
        });
        Checkpoint {
            stage: "prior_pretrain".into(),
            seed: u64::MAX - 3,
            config: "[data]\nimage_size = 32\n".into(),
            params,
            optimizer,
        }
    }

    #[test]
    fn round_trip_is_bit_exact() {
        for opt in [false, true] {
            let c = sample(opt);
            let bytes = c.to_bytes();
            let back = Checkpoint::from_bytes(&bytes).unwrap();
            assert_eq!(back.to_bytes(), bytes);
            assert_eq!(back.stage, c.stage);
            assert_eq!(back.optimizer, c.optimizer);
            assert!(back.params.same_prefix(&c.params, ""));
        }
    }

    #[test]
    fn file_round_trip() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("x.ckpt");
        let c = sample(true);
        c.save(&path).unwrap();
        assert_eq!(Checkpoint::load(&path).unwrap().to_bytes(), c.to_bytes());
    }

    #[test]
    fn every_truncation_is_corrupt() {
        let bytes = sample(true).to_bytes();
        for n in 0..bytes.len() {
            match Checkpoint::from_bytes(&bytes[..n]) {
                Err(Error::CorruptCheckpoint(_)) => {}
                other => panic!("length {n}: {other:?}"),
            }
        }
        let mut long = bytes.clone();
        long.push(0);
        assert!(matches!(Checkpoint::from_bytes(&long), Err(Error::CorruptCheckpoint(_))));
    }

    #[test]
    fn unknown_version_is_rejected() {
        let mut bytes = sample(false).to_bytes();
        bytes[4..8].copy_from_slice(&2u32.to_le_bytes());
        assert!(matches!(Checkpoint::from_bytes(&bytes), Err(Error::UnsupportedVersion(2))));
        bytes[0] = b'X';
        assert!(matches!(Checkpoint::from_bytes(&bytes), Err(Error::CorruptCheckpoint(_))));
    }
}
