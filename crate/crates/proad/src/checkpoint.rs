//! Checkpoint container: a little-endian flat map of canonical parameter
//! names to shaped float64 buffers, plus the config snapshot and training
//! progress. Version-tagged so the layout can evolve.

use std::fs;
use std::io::{self, Read, Write};
use std::path::Path;

use crate::config::RunConfig;
use crate::error::{ProadError, Result};
use crate::model::ProAdModel;
use crate::train::StableAdamW;
use crate::Tensor;

const MAGIC: &[u8; 10] = b"PROADCKPT\0";
const VERSION: u32 = 1;

pub struct Checkpoint {
    pub config: RunConfig,
    pub trained_epochs: usize,
    pub global_step: usize,
    pub tensors: Vec<(String, Vec<usize>, Vec<f64>)>,
}

impl Checkpoint {
    /// Snapshot of model parameters and optimizer state.
    pub fn capture(
        model: &ProAdModel,
        config: &RunConfig,
        trained_epochs: usize,
        global_step: usize,
        optimizer: &StableAdamW,
    ) -> Self {
        let mut tensors: Vec<(String, Vec<usize>, Vec<f64>)> = Vec::new();
        let params = model.named_params();
        for (name, t) in &params {
            tensors.push((name.clone(), t.shape().to_vec(), t.to_vec()));
        }
        tensors.push((
            "optim.step".into(),
            vec![1],
            vec![optimizer.step_count as f64],
        ));
        for ((name, t), (m, v)) in params.iter().zip(&optimizer.moments) {
            tensors.push((format!("optim.m.{name}"), t.shape().to_vec(), m.clone()));
            tensors.push((format!("optim.v.{name}"), t.shape().to_vec(), v.clone()));
        }
        Checkpoint {
            config: config.clone(),
            trained_epochs,
            global_step,
            tensors,
        }
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        let mut buf: Vec<u8> = Vec::new();
        buf.extend_from_slice(MAGIC);
        buf.extend_from_slice(&VERSION.to_le_bytes());
        buf.extend_from_slice(&(self.trained_epochs as u64).to_le_bytes());
        buf.extend_from_slice(&(self.global_step as u64).to_le_bytes());
        let cfg = self.config.to_kv();
        buf.extend_from_slice(&(cfg.len() as u64).to_le_bytes());
        buf.extend_from_slice(cfg.as_bytes());
        buf.extend_from_slice(&(self.tensors.len() as u64).to_le_bytes());
        for (name, shape, data) in &self.tensors {
            buf.extend_from_slice(&(name.len() as u64).to_le_bytes());
            buf.extend_from_slice(name.as_bytes());
            buf.extend_from_slice(&(shape.len() as u32).to_le_bytes());
            for &d in shape {
                buf.extend_from_slice(&(d as u64).to_le_bytes());
            }
            for &v in data {
                buf.extend_from_slice(&v.to_le_bytes());
            }
        }
        fs::write(path, buf).map_err(|e| ProadError::io(path, e))
    }

    pub fn load(path: &Path) -> Result<Self> {
        let bytes = fs::read(path).map_err(|e| ProadError::io(path, e))?;
        let mut r = io::Cursor::new(bytes.as_slice());
        let mut magic = [0u8; 10];
        read_exact(&mut r, &mut magic, path)?;
        if &magic != MAGIC {
            return Err(ProadError::Data(format!(
                "{}: not a proad checkpoint",
                path.display()
            )));
        }
        let version = read_u32(&mut r, path)?;
        if version != VERSION {
            return Err(ProadError::Data(format!(
                "{}: unsupported checkpoint version {version}",
                path.display()
            )));
        }
        let trained_epochs = read_u64(&mut r, path)? as usize;
        let global_step = read_u64(&mut r, path)? as usize;
        let cfg_len = read_u64(&mut r, path)? as usize;
        let mut cfg_bytes = vec![0u8; cfg_len];
        read_exact(&mut r, &mut cfg_bytes, path)?;
        let config = RunConfig::from_kv(
            std::str::from_utf8(&cfg_bytes)
                .map_err(|_| ProadError::Data(format!("{}: config not utf-8", path.display())))?,
        )?;
        let n = read_u64(&mut r, path)? as usize;
        let mut tensors = Vec::with_capacity(n);
        for _ in 0..n {
            let name_len = read_u64(&mut r, path)? as usize;
            let mut name_bytes = vec![0u8; name_len];
            read_exact(&mut r, &mut name_bytes, path)?;
            let name = String::from_utf8(name_bytes)
                .map_err(|_| ProadError::Data(format!("{}: tensor name not utf-8", path.display())))?;
            let ndim = read_u32(&mut r, path)? as usize;
            let mut shape = Vec::with_capacity(ndim);
            for _ in 0..ndim {
                shape.push(read_u64(&mut r, path)? as usize);
            }
            let numel: usize = shape.iter().product();
            let mut data = Vec::with_capacity(numel);
            let mut chunk = [0u8; 8];
            for _ in 0..numel {
                read_exact(&mut r, &mut chunk, path)?;
                data.push(f64::from_le_bytes(chunk));
            }
            tensors.push((name, shape, data));
        }
        Ok(Checkpoint {
            config,
            trained_epochs,
            global_step,
            tensors,
        })
    }

    fn find(&self, name: &str) -> Option<&(String, Vec<usize>, Vec<f64>)> {
        self.tensors.iter().find(|(n, _, _)| n == name)
    }

    /// Copies stored parameter values into a freshly built model of the same
    /// config. Any naming or shape divergence is reported by field.
    pub fn apply_to(&self, model: &ProAdModel) -> Result<()> {
        for (name, tensor) in model.named_params() {
            let (_, shape, data) = self.find(&name).ok_or_else(|| {
                ProadError::Config(format!("checkpoint is missing tensor '{name}'"))
            })?;
            if shape != tensor.shape() {
                return Err(ProadError::Config(format!(
                    "checkpoint tensor '{name}' has shape {shape:?}, model expects {:?}",
                    tensor.shape()
                )));
            }
            tensor.data_mut().copy_from_slice(data);
        }
        Ok(())
    }

    /// Rebuilds the optimizer exactly as it was at capture time.
    pub fn restore_optimizer(
        &self,
        params: &[(String, Tensor)],
        weight_decay: f64,
        clip_threshold: f64,
    ) -> Result<StableAdamW> {
        let mut opt = StableAdamW::new(params, weight_decay, clip_threshold);
        let step = self
            .find("optim.step")
            .ok_or_else(|| ProadError::Config("checkpoint is missing optimizer state".into()))?;
        opt.step_count = step.2[0] as u64;
        for (i, (name, _)) in params.iter().enumerate() {
            let m = self
                .find(&format!("optim.m.{name}"))
                .ok_or_else(|| ProadError::Config(format!("missing optimizer moment for '{name}'")))?;
            let v = self
                .find(&format!("optim.v.{name}"))
                .ok_or_else(|| ProadError::Config(format!("missing optimizer moment for '{name}'")))?;
            opt.moments[i] = (m.2.clone(), v.2.clone());
        }
        Ok(opt)
    }
}

fn read_exact(r: &mut impl Read, buf: &mut [u8], path: &Path) -> Result<()> {
    r.read_exact(buf)
        .map_err(|e| ProadError::io(path, e))
}

fn read_u32(r: &mut impl Read, path: &Path) -> Result<u32> {
    let mut b = [0u8; 4];
    read_exact(r, &mut b, path)?;
    Ok(u32::from_le_bytes(b))
}

fn read_u64(r: &mut impl Read, path: &Path) -> Result<u64> {
    let mut b = [0u8; 8];
    read_exact(r, &mut b, path)?;
    Ok(u64::from_le_bytes(b))
}

/// Convenience used by several commands.
pub fn write_text(path: &Path, text: &str) -> Result<()> {
    let mut f = fs::File::create(path).map_err(|e| ProadError::io(path, e))?;
    f.write_all(text.as_bytes())
        .map_err(|e| ProadError::io(path, e))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::config::ModelConfig;

    fn tiny_config() -> RunConfig {
        let mut cfg = RunConfig::default();
        cfg.model = ModelConfig {
            image_size: 16,
            patch_size: 8,
            dim: 8,
            encoder_layers: 2,
            fuse_from: 1,
            fuse_to: 2,
            decoder_layers: 1,
            prototypes: 4,
            constraint: false,
            ..ModelConfig::default()
        };
        cfg.data.image_size = 16;
        cfg
    }

    #[test]
    fn checkpoint_round_trips_params_and_optimizer() {
        let cfg = tiny_config();
        let model = ProAdModel::build(&cfg.model, 1).unwrap();
        let params = model.named_params();
        let mut opt = StableAdamW::new(&params, 1e-5, 1.0);
        opt.step_count = 7;
        opt.moments[0].0[0] = 0.5;
        let ckpt = Checkpoint::capture(&model, &cfg, 3, 12, &opt);

        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("ckpt.bin");
        ckpt.save(&path).unwrap();
        let loaded = Checkpoint::load(&path).unwrap();
        assert_eq!(loaded.trained_epochs, 3);
        assert_eq!(loaded.global_step, 12);
        assert_eq!(loaded.config, cfg);

        let restored = ProAdModel::build(&cfg.model, 999).unwrap();
        assert_ne!(restored.param_hash(), model.param_hash());
        loaded.apply_to(&restored).unwrap();
        assert_eq!(restored.param_hash(), model.param_hash());

        let ropt = loaded
            .restore_optimizer(&restored.named_params(), 1e-5, 1.0)
            .unwrap();
        assert_eq!(ropt.step_count, 7);
        assert_eq!(ropt.moments[0].0[0], 0.5);
    }

    #[test]
    fn shape_mismatch_names_the_tensor() {
        let cfg = tiny_config();
        let model = ProAdModel::build(&cfg.model, 1).unwrap();
        let params = model.named_params();
        let opt = StableAdamW::new(&params, 0.0, 1.0);
        let ckpt = Checkpoint::capture(&model, &cfg, 0, 0, &opt);

        let mut bigger = cfg.clone();
        bigger.model.prototypes = 8;
        let other = ProAdModel::build(&bigger.model, 1).unwrap();
        let err = ckpt.apply_to(&other).unwrap_err();
        assert!(err.to_string().contains("prototypes"), "{err}");
    }

    #[test]
    fn corrupt_magic_is_rejected() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("bad.bin");
        fs::write(&path, b"NOTACKPT__").unwrap();
        assert!(Checkpoint::load(&path).is_err());
    }
}
