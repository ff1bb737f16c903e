//! Binary checkpoint container.
//!
//! Layout (all integers little-endian):
//!
//! ```text
//! magic  b"LGFNCKPT"      8 bytes
//! version                u32
//! config                 u64 length + UTF-8 TOML
//! step                   u64
//! rng                    32-byte seed, u64 stream, u128 word position
//! tensors                u32 count, then per tensor:
//!                          u32 name length + UTF-8 name, u8 dtype (1 = f64),
//!                          u32 rank, u64 per dim, row-major f64 payload
//! optimizer              u8 present flag; when 1:
//!                          4 x f64 (lr, beta1, beta2, eps), u64 step,
//!                          u32 count, then (name, first, second) tensors
//! ```

use std::path::Path;

use rand_chacha::ChaCha8Rng;

use crate::error::{Error, Result};
use crate::tensor::{AdamConfig, Tensor};

pub const MAGIC: &[u8; 8] = b"LGFNCKPT";
pub const VERSION: u32 = 1;
const DTYPE_F64: u8 = 1;

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct RngState {
    pub seed: [u8; 32],
    pub stream: u64,
    pub word_pos: u128,
}

impl RngState {
    pub fn capture(rng: &ChaCha8Rng) -> Self {
        Self { seed: rng.get_seed(), stream: rng.get_stream(), word_pos: rng.get_word_pos() }
    }

    pub fn restore(&self) -> ChaCha8Rng {
        use rand::SeedableRng;
        let mut rng = ChaCha8Rng::from_seed(self.seed);
        rng.set_stream(self.stream);
        rng.set_word_pos(self.word_pos);
        rng
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct OptimizerSnapshot {
    pub config: AdamConfig,
    pub step: u64,
    /// `(parameter name, first moment, second moment)`.
    pub moments: Vec<(String, Tensor, Tensor)>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct Checkpoint {
    pub config_toml: String,
    pub step: u64,
    pub rng: RngState,
    pub tensors: Vec<(String, Tensor)>,
    pub optimizer: Option<OptimizerSnapshot>,
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
    fn str32(&mut self, s: &str) {
        self.u32(s.len() as u32);
        self.0.extend_from_slice(s.as_bytes());
    }
    fn tensor(&mut self, t: &Tensor) {
        self.u8(DTYPE_F64);
        self.u32(t.shape().len() as u32);
        for &d in t.shape() {
            self.u64(d as u64);
        }
        for &v in t.data() {
            self.f64(v);
        }
    }
}

struct Reader<'a> {
    buf: &'a [u8],
    pos: usize,
}

impl<'a> Reader<'a> {
    fn take(&mut self, n: usize) -> Result<&'a [u8]> {
        let end = self.pos.checked_add(n).filter(|&e| e <= self.buf.len()).ok_or_else(|| {
            Error::Corrupted(format!("need {n} bytes at offset {}, file has {}", self.pos, self.buf.len()))
        })?;
        let out = &self.buf[self.pos..end];
        self.pos = end;
        Ok(out)
    }
    fn array<const N: usize>(&mut self) -> Result<[u8; N]> {
        let mut a = [0u8; N];
        a.copy_from_slice(self.take(N)?);
        Ok(a)
    }
    fn u8(&mut self) -> Result<u8> {
        Ok(self.take(1)?[0])
    }
    fn u32(&mut self) -> Result<u32> {
        Ok(u32::from_le_bytes(self.array()?))
    }
    fn u64(&mut self) -> Result<u64> {
        Ok(u64::from_le_bytes(self.array()?))
    }
    fn u128(&mut self) -> Result<u128> {
        Ok(u128::from_le_bytes(self.array()?))
    }
    fn f64(&mut self) -> Result<f64> {
        Ok(f64::from_le_bytes(self.array()?))
    }
    fn string(&mut self, n: usize) -> Result<String> {
        String::from_utf8(self.take(n)?.to_vec()).map_err(|_| Error::Corrupted("invalid UTF-8".into()))
    }
    fn str32(&mut self) -> Result<String> {
        let n = self.u32()? as usize;
        self.string(n)
    }
    fn tensor(&mut self) -> Result<Tensor> {
        let tag = self.u8()?;
        if tag != DTYPE_F64 {
            return Err(Error::Format(format!("unknown dtype tag {tag}")));
        }
        let rank = self.u32()? as usize;
        let shape = (0..rank).map(|_| Ok(self.u64()? as usize)).collect::<Result<Vec<_>>>()?;
        let n = shape.iter().try_fold(1usize, |a, &d| a.checked_mul(d)).ok_or_else(|| Error::Corrupted("tensor size overflow".into()))?;
        if n.checked_mul(8).is_none_or(|b| b > self.buf.len() - self.pos) {
            return Err(Error::Corrupted(format!("tensor of {n} values overruns the file")));
        }
        let data = (0..n).map(|_| self.f64()).collect::<Result<Vec<_>>>()?;
        Tensor::new(shape, data).map_err(|e| Error::Corrupted(e.to_string()))
    }
}

impl Checkpoint {
    pub fn to_bytes(&self) -> Vec<u8> {
        let mut w = Writer(Vec::new());
        w.0.extend_from_slice(MAGIC);
        w.u32(VERSION);
        w.u64(self.config_toml.len() as u64);
        w.0.extend_from_slice(self.config_toml.as_bytes());
        w.u64(self.step);
        w.0.extend_from_slice(&self.rng.seed);
        w.u64(self.rng.stream);
        w.0.extend_from_slice(&self.rng.word_pos.to_le_bytes());
        w.u32(self.tensors.len() as u32);
        for (name, t) in &self.tensors {
            w.str32(name);
            w.tensor(t);
        }
        match &self.optimizer {
            None => w.u8(0),
            Some(opt) => {
                w.u8(1);
                let AdamConfig { lr, beta1, beta2, eps } = opt.config;
                for v in [lr, beta1, beta2, eps] {
                    w.f64(v);
                }
                w.u64(opt.step);
                w.u32(opt.moments.len() as u32);
                for (name, m, v) in &opt.moments {
                    w.str32(name);
                    w.tensor(m);
                    w.tensor(v);
                }
            }
        }
        w.0
    }

    pub fn from_bytes(buf: &[u8]) -> Result<Self> {
        let mut r = Reader { buf, pos: 0 };
        if buf.len() < MAGIC.len() || &buf[..MAGIC.len()] != MAGIC {
            return Err(Error::Format("bad magic".into()));
        }
        r.take(MAGIC.len())?;
        let version = r.u32()?;
        if version != VERSION {
            return Err(Error::Format(format!("version {version}, expected {VERSION}")));
        }
        let n = r.u64()? as usize;
        let config_toml = r.string(n)?;
        let step = r.u64()?;
        let rng = RngState { seed: r.array()?, stream: r.u64()?, word_pos: r.u128()? };
        let count = r.u32()?;
        let mut tensors = Vec::new();
        for _ in 0..count {
            let name = r.str32()?;
            if tensors.iter().any(|(n, _): &(String, Tensor)| *n == name) {
                return Err(Error::Corrupted(format!("tensor `{name}` stored twice")));
            }
            tensors.push((name, r.tensor()?));
        }
        let optimizer = match r.u8()? {
            0 => None,
            1 => {
                let config = AdamConfig { lr: r.f64()?, beta1: r.f64()?, beta2: r.f64()?, eps: r.f64()? };
                let step = r.u64()?;
                let count = r.u32()?;
                let moments = (0..count)
                    .map(|_| Ok((r.str32()?, r.tensor()?, r.tensor()?)))
                    .collect::<Result<Vec<_>>>()?;
                Some(OptimizerSnapshot { config, step, moments })
            }
            f => return Err(Error::Corrupted(format!("optimizer flag {f}"))),
        };
        if r.pos != buf.len() {
            return Err(Error::Corrupted(format!("{} trailing bytes", buf.len() - r.pos)));
        }
        Ok(Self { config_toml, step, rng, tensors, optimizer })
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        if let Some(dir) = path.parent().filter(|p| !p.as_os_str().is_empty()) {
            std::fs::create_dir_all(dir)?;
        }
        std::fs::write(path, self.to_bytes())?;
        Ok(())
    }

    pub fn load(path: &Path) -> Result<Self> {
        Self::from_bytes(&std::fs::read(path)?)
    }

    pub fn tensor(&self, name: &str) -> Option<&Tensor> {
        self.tensors.iter().find(|(n, _)| n == name).map(|(_, t)| t)
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::{Rng, SeedableRng};

    fn sample() -> Checkpoint {
        let mut rng = ChaCha8Rng::seed_from_u64(42);
        let _: u64 = rng.random();
        Checkpoint {
            config_toml: "[graph]\nn = 4\n".into(),
            step: 17,
            rng: RngState::capture(&rng),
            tensors: vec![
                ("a/weight".into(), Tensor::randn(3, 2, 1.0, &mut rng)),
                ("a/bias".into(), Tensor::row(vec![0.0, -0.0])),
            ],
            optimizer: Some(OptimizerSnapshot {
                config: AdamConfig::default(),
                step: 17,
                moments: vec![("a/weight".into(), Tensor::filled(3, 2, 0.5), Tensor::filled(3, 2, 0.25))],
            }),
        }
    }

    #[test]
    fn round_trip_is_byte_identical() {
        let c = sample();
        let bytes = c.to_bytes();
        let back = Checkpoint::from_bytes(&bytes).unwrap();
        assert_eq!(back, c);
        assert_eq!(back.to_bytes(), bytes);
    }

    #[test]
    fn rng_state_resumes_stream() {
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        let _: [u64; 3] = rng.random();
        let state = RngState::capture(&rng);
        let expected: u64 = rng.random();
        let mut again = state.restore();
        assert_eq!(again.random::<u64>(), expected);
    }

    #[test]
    fn version_and_truncation_errors() {
        let bytes = sample().to_bytes();
        let mut wrong = bytes.clone();
        wrong[8] = 9;
        assert!(matches!(Checkpoint::from_bytes(&wrong), Err(Error::Format(_))));
        assert!(matches!(Checkpoint::from_bytes(b"NOTACKPT...."), Err(Error::Format(_))));
        for cut in [12, 40, bytes.len() / 2, bytes.len() - 1] {
            assert!(matches!(Checkpoint::from_bytes(&bytes[..cut]), Err(Error::Corrupted(_))), "cut {cut}");
        }
        let mut longer = bytes.clone();
        longer.push(0);
        assert!(matches!(Checkpoint::from_bytes(&longer), Err(Error::Corrupted(_))));
    }
}
