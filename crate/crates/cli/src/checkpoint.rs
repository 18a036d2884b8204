//! Binary checkpoint container.
//!
//! Layout, all integers little-endian:
//!
//! ```text
//! magic        8 bytes  "TINRCKPT"
//! version      u32
//! header_len   u64
//! header       JSON (config, precision, step, RNG state, schedule, Adam step counts)
//! array_count  u64
//! per array:
//!   name_len u64, name (UTF-8)
//!   ndim u64, dims u64 * ndim
//!   count u64, values (IEEE-754, 4 or 8 bytes each per the header precision)
//! ```
//!
//! Arrays are named `param/<name>`, `adam_m/<name>` and `adam_v/<name>`.

use std::collections::BTreeMap;
use std::io::{Read, Write};
use std::path::Path;

use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use tinr_core::diff::{Adam, AdamState, ParamStore};
use tinr_core::train::LrSchedule;
use tinr_core::{MetaLearner, Precision, Real, Tensor, Trainer};

use crate::config::Config;
use crate::error::{CliError, Result};

pub const MAGIC: &[u8; 8] = b"TINRCKPT";
pub const VERSION: u32 = 1;

/// Position of a ChaCha stream.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct RngState {
    pub seed: [u8; 32],
    pub stream: u64,
    /// `u128` word position, as a decimal string.
    pub word_pos: String,
}

impl RngState {
    pub fn capture(rng: &ChaCha8Rng) -> Self {
        RngState {
            seed: rng.get_seed(),
            stream: rng.get_stream(),
            word_pos: rng.get_word_pos().to_string(),
        }
    }

    pub fn restore(&self) -> std::result::Result<ChaCha8Rng, String> {
        use rand::SeedableRng;
        let pos: u128 = self.word_pos.parse().map_err(|e| format!("bad RNG word position: {e}"))?;
        let mut rng = ChaCha8Rng::from_seed(self.seed);
        rng.set_stream(self.stream);
        rng.set_word_pos(pos);
        Ok(rng)
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Header {
    pub config: Config,
    pub precision: Precision,
    pub step: usize,
    pub rng: RngState,
    pub schedule: LrSchedule,
    pub adam_steps: BTreeMap<String, u64>,
}

#[derive(Clone, Debug, PartialEq)]
pub struct NamedArray {
    pub name: String,
    pub shape: Vec<usize>,
    /// Values widened to f64; narrowing back to the stored precision is exact.
    pub values: Vec<f64>,
}

#[derive(Clone, Debug, PartialEq)]
pub struct Checkpoint {
    pub header: Header,
    pub arrays: Vec<NamedArray>,
}

fn array<T: Real>(name: String, shape: &[usize], values: &[T]) -> NamedArray {
    NamedArray {
        name,
        shape: shape.to_vec(),
        values: values.iter().map(|v| v.f64()).collect(),
    }
}

impl Checkpoint {
    pub fn capture<T: Real>(config: &Config, trainer: &Trainer<T>) -> Checkpoint {
        let mut arrays = Vec::new();
        for (name, t) in trainer.learner.params.iter() {
            arrays.push(array(format!("param/{name}"), t.shape(), t.data()));
        }
        let mut adam_steps = BTreeMap::new();
        for (name, st) in &trainer.adam.states {
            let shape = trainer.learner.params.get(name).map_or(vec![st.m.len()], |t| t.shape().to_vec());
            arrays.push(array(format!("adam_m/{name}"), &shape, &st.m));
            arrays.push(array(format!("adam_v/{name}"), &shape, &st.v));
            adam_steps.insert(name.clone(), st.t);
        }
        Checkpoint {
            header: Header {
                config: config.clone(),
                precision: T::PRECISION,
                step: trainer.step,
                rng: RngState::capture(&trainer.rng),
                schedule: trainer.schedule.clone(),
                adam_steps,
            },
            arrays,
        }
    }

    pub fn to_bytes(&self) -> Vec<u8> {
        let mut out = Vec::new();
        out.extend_from_slice(MAGIC);
        out.extend_from_slice(&VERSION.to_le_bytes());
        let header = serde_json::to_vec(&self.header).expect("header serializes");
        put_u64(&mut out, header.len() as u64);
        out.extend_from_slice(&header);
        put_u64(&mut out, self.arrays.len() as u64);
        for a in &self.arrays {
            put_u64(&mut out, a.name.len() as u64);
            out.extend_from_slice(a.name.as_bytes());
            put_u64(&mut out, a.shape.len() as u64);
            for &d in &a.shape {
                put_u64(&mut out, d as u64);
            }
            put_u64(&mut out, a.values.len() as u64);
            match self.header.precision {
                Precision::F32 => a.values.iter().for_each(|&v| out.extend_from_slice(&(v as f32).to_le_bytes())),
                Precision::F64 => a.values.iter().for_each(|&v| out.extend_from_slice(&v.to_le_bytes())),
            }
        }
        out
    }

    pub fn from_bytes(bytes: &[u8]) -> std::result::Result<Checkpoint, String> {
        let mut r = Reader { bytes, pos: 0 };
        if r.take(8)? != MAGIC {
            return Err("not a tinr checkpoint".into());
        }
        let version = u32::from_le_bytes(r.take(4)?.try_into().unwrap());
        if version != VERSION {
            return Err(format!("format version {version}, this build reads version {VERSION}"));
        }
        let len = r.len()?;
        let header: Header = serde_json::from_slice(r.take(len)?).map_err(|e| format!("bad header: {e}"))?;
        let width = header.precision.byte_width();
        let count = r.len()?;
        let mut arrays = Vec::new();
        for _ in 0..count {
            let len = r.len()?;
            let name = String::from_utf8(r.take(len)?.to_vec()).map_err(|_| "array name is not UTF-8".to_string())?;
            let ndim = r.len()?;
            let shape = (0..ndim).map(|_| r.len()).collect::<std::result::Result<Vec<_>, _>>()?;
            let n = r.len()?;
            if shape.iter().product::<usize>() != n {
                return Err(format!("array `{name}`: shape {shape:?} does not hold {n} values"));
            }
            let raw = r.take(n.checked_mul(width).ok_or("array too large")?)?;
            let values = match header.precision {
                Precision::F32 => raw
                    .chunks_exact(4)
                    .map(|c| f32::from_le_bytes(c.try_into().unwrap()) as f64)
                    .collect(),
                Precision::F64 => raw.chunks_exact(8).map(|c| f64::from_le_bytes(c.try_into().unwrap())).collect(),
            };
            arrays.push(NamedArray { name, shape, values });
        }
        if r.pos != bytes.len() {
            return Err(format!("{} trailing bytes", bytes.len() - r.pos));
        }
        Ok(Checkpoint { header, arrays })
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        let mut f = std::fs::File::create(path).map_err(CliError::io(path))?;
        f.write_all(&self.to_bytes()).map_err(CliError::io(path))
    }

    /// Reads a checkpoint. Any failure, including a missing file, is a
    /// [`CliError::Checkpoint`].
    pub fn load(path: &Path) -> Result<Checkpoint> {
        let fail = |msg: String| CliError::Checkpoint {
            path: path.to_path_buf(),
            msg,
        };
        let mut bytes = Vec::new();
        std::fs::File::open(path)
            .and_then(|mut f| f.read_to_end(&mut bytes))
            .map_err(|e| fail(e.to_string()))?;
        Checkpoint::from_bytes(&bytes).map_err(fail)
    }

    fn arrays_with_prefix(&self, prefix: &str) -> BTreeMap<&str, &NamedArray> {
        self.arrays
            .iter()
            .filter_map(|a| a.name.strip_prefix(prefix).map(|n| (n, a)))
            .collect()
    }

    /// Rebuilds the meta-learner, checking every parameter against the shapes
    /// its config implies.
    pub fn learner<T: Real>(&self, path: &Path) -> Result<MetaLearner<T>> {
        let fail = |msg: String| CliError::Checkpoint {
            path: path.to_path_buf(),
            msg,
        };
        let cfg = self.header.config.hypernet();
        let template = MetaLearner::<T>::init(cfg.clone(), &mut <ChaCha8Rng as rand::SeedableRng>::seed_from_u64(0))?;
        let stored = self.arrays_with_prefix("param/");
        let mut params = ParamStore::new();
        for (name, t) in template.params.iter() {
            let a = stored
                .get(name.as_str())
                .ok_or_else(|| fail(format!("missing parameter `{name}`")))?;
            if a.shape != t.shape() {
                return Err(fail(format!(
                    "parameter `{name}` has shape {:?}, config expects {:?}",
                    a.shape,
                    t.shape()
                )));
            }
            params.insert(name.clone(), Tensor::from_f64(a.shape.clone(), &a.values)?);
        }
        if let Some(extra) = stored.keys().find(|k| template.params.get(k).is_none()) {
            return Err(fail(format!("unexpected parameter `{extra}`")));
        }
        Ok(MetaLearner { config: cfg, params })
    }

    /// Restores a trainer exactly where it stopped.
    pub fn trainer<T: Real>(&self, path: &Path) -> Result<Trainer<T>> {
        let fail = |msg: String| CliError::Checkpoint {
            path: path.to_path_buf(),
            msg,
        };
        if self.header.precision != T::PRECISION {
            return Err(fail(format!(
                "written in {} precision; resume with --precision {}",
                self.header.precision, self.header.precision
            )));
        }
        let learner = self.learner::<T>(path)?;
        let mut trainer = Trainer::new(learner, self.header.config.train())?;
        let m = self.arrays_with_prefix("adam_m/");
        let v = self.arrays_with_prefix("adam_v/");
        let mut adam = Adam::new(trainer.adam.cfg);
        for (name, &t) in &self.header.adam_steps {
            let (Some(m), Some(v)) = (m.get(name.as_str()), v.get(name.as_str())) else {
                return Err(fail(format!("missing optimizer moments for `{name}`")));
            };
            let expect = trainer
                .learner
                .params
                .get(name)
                .ok_or_else(|| fail(format!("optimizer state for unknown parameter `{name}`")))?
                .shape();
            if m.shape != expect || v.shape != expect {
                return Err(fail(format!("optimizer moments for `{name}` do not match its shape {expect:?}")));
            }
            adam.states.insert(
                name.clone(),
                AdamState {
                    m: m.values.iter().map(|&x| T::of(x)).collect(),
                    v: v.values.iter().map(|&x| T::of(x)).collect(),
                    t,
                },
            );
        }
        trainer.adam = adam;
        trainer.schedule = self.header.schedule.clone();
        trainer.rng = self.header.rng.restore().map_err(fail)?;
        trainer.step = self.header.step;
        Ok(trainer)
    }
}

fn put_u64(out: &mut Vec<u8>, v: u64) {
    out.extend_from_slice(&v.to_le_bytes());
}

struct Reader<'a> {
    bytes: &'a [u8],
    pos: usize,
}

impl<'a> Reader<'a> {
    fn take(&mut self, n: usize) -> std::result::Result<&'a [u8], String> {
        let end = self.pos.checked_add(n).filter(|&e| e <= self.bytes.len());
        match end {
            Some(end) => {
                let s = &self.bytes[self.pos..end];
                self.pos = end;
                Ok(s)
            }
            None => Err(format!("truncated at byte {}", self.pos)),
        }
    }

    fn len(&mut self) -> std::result::Result<usize, String> {
        let v = u64::from_le_bytes(self.take(8)?.try_into().unwrap());
        usize::try_from(v).map_err(|_| format!("length {v} too large"))
    }
}
