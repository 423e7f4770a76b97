//! Versioned binary checkpoints: embedded configuration, named parameter and
//! optimizer tensors (stored as f64), rng state, and a trailing SHA-256
//! checksum.

use crate::error::{Error, Result};
use crate::nn::param::Parameterized;
use crate::optim::Optimizer;
use crate::scalar::Scalar;
use crate::training::{ExperimentConfig, TrainState};
use rand::SeedableRng;
use ndarray::{ArrayD, IxDyn};
use sha2::{Digest, Sha256};
use std::collections::BTreeMap;
use std::path::Path;

const MAGIC: &[u8; 4] = b"UMSC";
pub const CHECKPOINT_VERSION: u32 = 1;

struct Writer {
    buf: Vec<u8>,
}

impl Writer {
    fn u32(&mut self, v: u32) {
        self.buf.extend_from_slice(&v.to_le_bytes());
    }
    fn u64(&mut self, v: u64) {
        self.buf.extend_from_slice(&v.to_le_bytes());
    }
    fn u128(&mut self, v: u128) {
        self.buf.extend_from_slice(&v.to_le_bytes());
    }
    fn bytes(&mut self, v: &[u8]) {
        self.u64(v.len() as u64);
        self.buf.extend_from_slice(v);
    }
    fn tensor_map(&mut self, map: &BTreeMap<String, ArrayD<f64>>) {
        self.u64(map.len() as u64);
        for (name, arr) in map {
            self.bytes(name.as_bytes());
            self.u32(arr.ndim() as u32);
            for &d in arr.shape() {
                self.u64(d as u64);
            }
            let std = arr.as_standard_layout();
            for &v in std.iter() {
                self.buf.extend_from_slice(&v.to_le_bytes());
            }
        }
    }
}

struct Reader<'a> {
    buf: &'a [u8],
    pos: usize,
    path: &'a Path,
}

impl<'a> Reader<'a> {
    fn take(&mut self, n: usize) -> Result<&'a [u8]> {
        if self.pos + n > self.buf.len() {
            return Err(Error::CorruptFile {
                path: self.path.to_path_buf(),
                reason: "unexpected end of checkpoint".into(),
            });
        }
        let out = &self.buf[self.pos..self.pos + n];
        self.pos += n;
        Ok(out)
    }
    fn u32(&mut self) -> Result<u32> {
        Ok(u32::from_le_bytes(self.take(4)?.try_into().unwrap()))
    }
    fn u64(&mut self) -> Result<u64> {
        Ok(u64::from_le_bytes(self.take(8)?.try_into().unwrap()))
    }
    fn u128(&mut self) -> Result<u128> {
        Ok(u128::from_le_bytes(self.take(16)?.try_into().unwrap()))
    }
    fn bytes(&mut self) -> Result<&'a [u8]> {
        let n = self.u64()? as usize;
        self.take(n)
    }
    fn string(&mut self) -> Result<String> {
        String::from_utf8(self.bytes()?.to_vec()).map_err(|_| Error::CorruptFile {
            path: self.path.to_path_buf(),
            reason: "non-UTF8 string in checkpoint".into(),
        })
    }
    fn tensor_map(&mut self) -> Result<BTreeMap<String, ArrayD<f64>>> {
        let count = self.u64()? as usize;
        let mut map = BTreeMap::new();
        for _ in 0..count {
            let name = self.string()?;
            let ndim = self.u32()? as usize;
            let mut dims = Vec::with_capacity(ndim);
            for _ in 0..ndim {
                dims.push(self.u64()? as usize);
            }
            let n: usize = dims.iter().product();
            let raw = self.take(n * 8)?;
            let values: Vec<f64> = raw
                .chunks_exact(8)
                .map(|c| f64::from_le_bytes(c.try_into().unwrap()))
                .collect();
            map.insert(name, ArrayD::from_shape_vec(IxDyn(&dims), values).unwrap());
        }
        Ok(map)
    }
}

fn param_tensors<F: Scalar, M: Parameterized<F>>(model: &mut M) -> BTreeMap<String, ArrayD<f64>> {
    let mut map = BTreeMap::new();
    model.visit_params("", &mut |name, p| {
        map.insert(name, p.value.mapv(|v| v.to_f64c()));
    });
    map
}

fn restore_params<F: Scalar, M: Parameterized<F>>(
    model: &mut M,
    tensors: &BTreeMap<String, ArrayD<f64>>,
    path: &Path,
    what: &str,
) -> Result<()> {
    let mut err = None;
    let mut seen = 0usize;
    model.visit_params("", &mut |name, p| {
        if err.is_some() {
            return;
        }
        match tensors.get(&name) {
            Some(t) if t.shape() == p.value.shape() => {
                p.value = t.mapv(F::from_f64c);
                seen += 1;
            }
            Some(_) => err = Some(format!("{what} tensor '{name}' has the wrong shape")),
            None => err = Some(format!("{what} tensor '{name}' missing")),
        }
    });
    if let Some(reason) = err {
        return Err(Error::Integrity {
            path: path.to_path_buf(),
            reason,
        });
    }
    if seen != tensors.len() {
        return Err(Error::Integrity {
            path: path.to_path_buf(),
            reason: format!(
                "{what} holds {} tensors, model expects {seen}",
                tensors.len()
            ),
        });
    }
    Ok(())
}

fn opt_tensors<F: Scalar>(opt: &Optimizer<F>) -> BTreeMap<String, ArrayD<f64>> {
    opt.state_tensors()
        .iter()
        .map(|(k, v)| (k.clone(), v.mapv(|x| x.to_f64c())))
        .collect()
}

pub fn save_checkpoint<F: Scalar>(state: &mut TrainState<F>, path: &Path) -> Result<()> {
    let mut w = Writer { buf: Vec::new() };
    w.buf.extend_from_slice(MAGIC);
    w.u32(CHECKPOINT_VERSION);
    w.bytes(state.cfg.to_toml_string().as_bytes());
    w.u64(state.epoch as u64);
    w.u64(state.iter as u64);
    w.buf.extend_from_slice(&state.rng.get_seed());
    w.u128(state.rng.get_word_pos());
    w.u64(state.gen_opt.t);
    w.u64(state.dis_opt.t);
    w.tensor_map(&param_tensors(&mut state.generator));
    w.tensor_map(&param_tensors(&mut state.discriminators));
    w.tensor_map(&opt_tensors(&state.gen_opt));
    w.tensor_map(&opt_tensors(&state.dis_opt));
    let digest = Sha256::digest(&w.buf);
    w.buf.extend_from_slice(&digest);
    std::fs::write(path, &w.buf).map_err(|e| Error::io(path, e))?;
    Ok(())
}

pub fn load_checkpoint<F: Scalar>(path: &Path) -> Result<TrainState<F>> {
    let buf = std::fs::read(path).map_err(|e| Error::io(path, e))?;
    if buf.len() < 40 {
        return Err(Error::CorruptFile {
            path: path.to_path_buf(),
            reason: "file too short to be a checkpoint".into(),
        });
    }
    let (body, digest) = buf.split_at(buf.len() - 32);
    if Sha256::digest(body).as_slice() != digest {
        return Err(Error::Integrity {
            path: path.to_path_buf(),
            reason: "checksum mismatch".into(),
        });
    }
    let mut r = Reader {
        buf: body,
        pos: 0,
        path,
    };
    if r.take(4)? != MAGIC {
        return Err(Error::UnsupportedFormat {
            path: path.to_path_buf(),
            reason: "not a checkpoint file".into(),
        });
    }
    let version = r.u32()?;
    if version != CHECKPOINT_VERSION {
        return Err(Error::UnsupportedFormat {
            path: path.to_path_buf(),
            reason: format!("checkpoint version {version} (supported: {CHECKPOINT_VERSION})"),
        });
    }
    let cfg = ExperimentConfig::from_toml_str(&r.string()?)?;
    let epoch = r.u64()? as usize;
    let iter = r.u64()? as usize;
    let seed: [u8; 32] = r.take(32)?.try_into().unwrap();
    let word_pos = r.u128()?;
    let gen_t = r.u64()?;
    let dis_t = r.u64()?;
    let gen_params = r.tensor_map()?;
    let dis_params = r.tensor_map()?;
    let gen_opt_state = r.tensor_map()?;
    let dis_opt_state = r.tensor_map()?;

    let mut state = TrainState::<F>::new(cfg)?;
    restore_params(&mut state.generator, &gen_params, path, "generator")?;
    restore_params(&mut state.discriminators, &dis_params, path, "discriminator")?;
    let to_f = |m: BTreeMap<String, ArrayD<f64>>| {
        m.into_iter()
            .map(|(k, v)| (k, v.mapv(F::from_f64c)))
            .collect()
    };
    state.gen_opt = Optimizer::restore(state.cfg.optimizer, gen_t, to_f(gen_opt_state));
    state.dis_opt = Optimizer::restore(state.cfg.optimizer, dis_t, to_f(dis_opt_state));
    state.epoch = epoch;
    state.iter = iter;
    let mut rng = rand_chacha::ChaCha8Rng::from_seed(seed);
    rng.set_word_pos(word_pos);
    state.rng = rng;
    Ok(state)
}

/// Short content digest used to tag evaluation reports.
pub fn checkpoint_digest(path: &Path) -> Result<String> {
    let buf = std::fs::read(path).map_err(|e| Error::io(path, e))?;
    let hex: String = Sha256::digest(&buf)
        .iter()
        .map(|b| format!("{b:02x}"))
        .collect();
    Ok(hex[..12].to_string())
}
