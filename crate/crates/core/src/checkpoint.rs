//! Versioned binary model checkpoints.
//!
//! Layout (little-endian throughout):
//!
//! ```text
//! magic "MSAC" | version u32
//! config_len u32 | resolved model config as TOML (UTF-8)
//! rng seed [u8; 32] | rng word position u128
//! n_params u32
//!   name_len u32 | name | ndim u32 | dims u32... | values f64...
//! n_batch_norms u32
//!   name_len u32 | name | d u32 | steps u64 | running mean f64 x d | running var f64 x d
//! ```
//!
//! Tensor payloads are raw f64 bit patterns, so save -> load -> save is
//! byte-identical and a loaded model forwards bit-identically.

use std::fs::File;
use std::io::{BufReader, BufWriter, Write};
use std::path::Path;

use crate::data::CountingReader;
use crate::error::{Error, Result};
use crate::layers::BnState;
use crate::model::{Model, ModelConfig};

pub const CHECKPOINT_MAGIC: [u8; 4] = *b"MSAC";
pub const CHECKPOINT_VERSION: u32 = 1;

pub fn save(model: &Model, path: &Path) -> Result<()> {
    let mut w = BufWriter::new(File::create(path)?);
    w.write_all(&CHECKPOINT_MAGIC)?;
    w.write_all(&CHECKPOINT_VERSION.to_le_bytes())?;

    let config_toml = toml::to_string(model.config())
        .map_err(|e| Error::Format(format!("config serialization failed: {e}")))?;
    w.write_all(&(config_toml.len() as u32).to_le_bytes())?;
    w.write_all(config_toml.as_bytes())?;

    let (seed, word_pos) = model.rng_state();
    w.write_all(&seed)?;
    w.write_all(&word_pos.to_le_bytes())?;

    let params = model.parameters();
    w.write_all(&(params.len() as u32).to_le_bytes())?;
    for p in params {
        let name = p.name().as_bytes();
        w.write_all(&(name.len() as u32).to_le_bytes())?;
        w.write_all(name)?;
        let shape = p.tensor().shape();
        w.write_all(&(shape.len() as u32).to_le_bytes())?;
        for d in &shape {
            w.write_all(&(*d as u32).to_le_bytes())?;
        }
        p.tensor().with_values(|values| -> Result<()> {
            for v in values {
                w.write_all(&v.to_le_bytes())?;
            }
            Ok(())
        })?;
    }

    let bns = model.bn_states();
    w.write_all(&(bns.len() as u32).to_le_bytes())?;
    for (name, state) in &bns {
        let name = name.as_bytes();
        w.write_all(&(name.len() as u32).to_le_bytes())?;
        w.write_all(name)?;
        w.write_all(&(state.mean.len() as u32).to_le_bytes())?;
        w.write_all(&state.steps.to_le_bytes())?;
        for v in state.mean.iter().chain(state.var.iter()) {
            w.write_all(&v.to_le_bytes())?;
        }
    }
    w.flush()?;
    Ok(())
}

fn read_u32<R: std::io::Read>(r: &mut CountingReader<R>, what: &str) -> Result<u32> {
    let mut buf = [0u8; 4];
    r.read_exact_at(&mut buf, what)?;
    Ok(u32::from_le_bytes(buf))
}

fn read_string<R: std::io::Read>(r: &mut CountingReader<R>, what: &str) -> Result<String> {
    let len = read_u32(r, what)? as usize;
    if len > 1 << 20 {
        return Err(Error::Corruption {
            offset: r.offset,
            msg: format!("implausible {what} length {len}"),
        });
    }
    let mut buf = vec![0u8; len];
    r.read_exact_at(&mut buf, what)?;
    String::from_utf8(buf).map_err(|_| Error::Corruption {
        offset: r.offset,
        msg: format!("{what} is not UTF-8"),
    })
}

fn read_f64s<R: std::io::Read>(r: &mut CountingReader<R>, n: usize, what: &str) -> Result<Vec<f64>> {
    let mut out = vec![0.0f64; n];
    let mut buf = [0u8; 8];
    for v in out.iter_mut() {
        r.read_exact_at(&mut buf, what)?;
        *v = f64::from_le_bytes(buf);
    }
    Ok(out)
}

pub fn load(path: &Path) -> Result<Model> {
    let file = File::open(path)?;
    let mut r = CountingReader { inner: BufReader::new(file), offset: 0 };

    let mut magic = [0u8; 4];
    r.read_exact_at(&mut magic, "magic")?;
    if magic != CHECKPOINT_MAGIC {
        return Err(Error::Format(format!(
            "bad checkpoint magic {magic:?}, expected {CHECKPOINT_MAGIC:?}"
        )));
    }
    let version = read_u32(&mut r, "version")?;
    if version != CHECKPOINT_VERSION {
        return Err(Error::Format(format!(
            "unsupported checkpoint version {version}, expected {CHECKPOINT_VERSION}"
        )));
    }

    let config_toml = read_string(&mut r, "config")?;
    let config: ModelConfig = toml::from_str(&config_toml)
        .map_err(|e| Error::Format(format!("checkpoint config does not parse: {e}")))?;
    let model = Model::build(config)?;

    let mut seed = [0u8; 32];
    r.read_exact_at(&mut seed, "rng seed")?;
    let mut pos = [0u8; 16];
    r.read_exact_at(&mut pos, "rng position")?;
    model.restore_rng_state(seed, u128::from_le_bytes(pos));

    let n_params = read_u32(&mut r, "parameter count")? as usize;
    if n_params != model.parameters().len() {
        return Err(Error::Format(format!(
            "checkpoint has {n_params} parameters but the config builds {}",
            model.parameters().len()
        )));
    }
    for _ in 0..n_params {
        let name = read_string(&mut r, "parameter name")?;
        let ndim = read_u32(&mut r, "parameter rank")? as usize;
        let mut shape = Vec::with_capacity(ndim);
        for _ in 0..ndim {
            shape.push(read_u32(&mut r, "parameter dim")? as usize);
        }
        let n: usize = shape.iter().product();
        let values = read_f64s(&mut r, n, "parameter values")?;
        let param = model
            .parameter(&name)
            .ok_or_else(|| Error::Format(format!("checkpoint parameter {name} not in model")))?;
        if param.tensor().shape() != shape {
            return Err(Error::Format(format!(
                "parameter {name}: checkpoint shape {shape:?} vs model {:?}",
                param.tensor().shape()
            )));
        }
        param.tensor().set_values(values)?;
    }

    let n_bns = read_u32(&mut r, "batch-norm count")? as usize;
    for _ in 0..n_bns {
        let name = read_string(&mut r, "batch-norm name")?;
        let d = read_u32(&mut r, "batch-norm width")? as usize;
        let mut steps = [0u8; 8];
        r.read_exact_at(&mut steps, "batch-norm steps")?;
        let mean = read_f64s(&mut r, d, "batch-norm mean")?;
        let var = read_f64s(&mut r, d, "batch-norm var")?;
        model.restore_bn_state(&name, BnState { mean, var, steps: u64::from_le_bytes(steps) })?;
    }
    Ok(model)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::model::{BlockConfig, StreamConfig};
    use crate::tensor::{Mode, Tensor};

    fn model_with_state() -> Model {
        let mut cfg = ModelConfig::new(4, 3);
        cfg.d_model = 8;
        cfg.d_q = 2;
        cfg.d_k = 2;
        cfg.d_v = 3;
        cfg.bottleneck = 4;
        cfg.dropout = 0.2;
        cfg.seed = 9;
        cfg.blocks = vec![BlockConfig {
            streams: vec![StreamConfig { rate: 2, conv_layers: 1, heads: Some(2), left: 2, right: 1 }],
            head_budget: None,
        }];
        let model = Model::build(cfg).unwrap();
        // Touch batch-norm stats and the dropout stream so state is non-trivial.
        let x = Tensor::new(vec![6, 4], (0..24).map(|i| (i as f64).cos()).collect()).unwrap();
        model.forward(&x, Mode::Train).unwrap();
        model
    }

    #[test]
    fn roundtrip_is_bit_identical() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("model.msac");
        let model = model_with_state();
        save(&model, &path).unwrap();
        let loaded = load(&path).unwrap();

        for (a, b) in model.parameters().iter().zip(loaded.parameters()) {
            assert_eq!(a.name(), b.name());
            assert_eq!(a.tensor().values(), b.tensor().values(), "{}", a.name());
            assert_eq!(a.is_constrained(), b.is_constrained());
        }
        let x = Tensor::new(vec![5, 4], (0..20).map(|i| (i as f64).sin()).collect()).unwrap();
        let ya = model.forward(&x, Mode::Infer).unwrap().values();
        let yb = loaded.forward(&x, Mode::Infer).unwrap().values();
        assert_eq!(ya, yb);

        // Save the loaded model again: files must match byte for byte.
        let path2 = dir.path().join("model2.msac");
        save(&loaded, &path2).unwrap();
        assert_eq!(std::fs::read(&path).unwrap(), std::fs::read(&path2).unwrap());
    }

    #[test]
    fn train_mode_forward_matches_after_roundtrip() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("model.msac");
        let model = model_with_state();
        save(&model, &path).unwrap();
        let loaded = load(&path).unwrap();
        // Dropout streams were captured mid-flight; both models draw the same
        // masks next.
        let x = Tensor::new(vec![6, 4], (0..24).map(|i| (i as f64 * 0.3).sin()).collect()).unwrap();
        let ya = model.forward(&x, Mode::Train).unwrap().values();
        let yb = loaded.forward(&x, Mode::Train).unwrap().values();
        assert_eq!(ya, yb);
    }

    #[test]
    fn bad_magic_is_format_error() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("junk.msac");
        std::fs::write(&path, b"JUNKJUNKJUNK").unwrap();
        assert!(matches!(load(&path), Err(Error::Format(_))));
    }

    #[test]
    fn truncation_is_corruption_with_offset() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("model.msac");
        let model = model_with_state();
        save(&model, &path).unwrap();
        let bytes = std::fs::read(&path).unwrap();
        std::fs::write(&path, &bytes[..bytes.len() / 2]).unwrap();
        assert!(matches!(load(&path), Err(Error::Corruption { .. })));
    }
}
