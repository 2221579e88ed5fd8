//! Checkpoints: parameters and momentum buffers as safetensors, with the
//! config, epoch counter and RNG state in the header metadata.

use std::collections::{BTreeMap, HashMap};
use std::path::Path;

use candle_core::{DType, Device, Tensor};
use rand_chacha::ChaCha8Rng;
use safetensors::tensor::{Dtype, SafeTensors, TensorView};
use serde::{Deserialize, Serialize};

use crate::config::Config;
use crate::error::{Error, Result};
use crate::model::Model;

const METADATA_KEY: &str = "instparse";
const PARAM_PREFIX: &str = "param.";
const MOMENTUM_PREFIX: &str = "momentum.";

#[derive(Serialize, Deserialize)]
struct Metadata {
    config: String,
    epoch: usize,
    iteration: usize,
    rng: ChaCha8Rng,
}

/// Everything needed to reproduce a model and resume its optimiser.
#[derive(Debug, Clone)]
pub struct Checkpoint {
    pub config: Config,
    /// Completed epochs.
    pub epoch: usize,
    pub iteration: usize,
    pub rng: ChaCha8Rng,
    pub params: BTreeMap<String, Tensor>,
    pub momentum: BTreeMap<String, Tensor>,
}

fn f32_bytes(t: &Tensor) -> Result<Vec<u8>> {
    let v = t.to_dtype(DType::F32)?.flatten_all()?.to_vec1::<f32>()?;
    Ok(v.iter().flat_map(|x| x.to_le_bytes()).collect())
}

fn corrupt(path: &Path, reason: impl ToString) -> Error {
    Error::Checkpoint { path: path.to_path_buf(), reason: reason.to_string() }
}

impl Checkpoint {
    /// Snapshot of a model's current parameters.
    pub fn from_model(model: &Model, config: &Config) -> Self {
        Self {
            config: config.clone(),
            epoch: 0,
            iteration: 0,
            rng: rand::SeedableRng::seed_from_u64(config.seed),
            params: model.params.vars().into_iter().map(|(n, v)| (n, v.as_tensor().detach())).collect(),
            momentum: BTreeMap::new(),
        }
    }

    pub fn to_bytes(&self) -> Result<Vec<u8>> {
        let mut entries = Vec::new();
        for (prefix, map) in [(PARAM_PREFIX, &self.params), (MOMENTUM_PREFIX, &self.momentum)] {
            for (name, t) in map {
                entries.push((format!("{prefix}{name}"), t.dims().to_vec(), f32_bytes(t)?));
            }
        }
        let views = entries
            .iter()
            .map(|(n, shape, bytes)| Ok((n.clone(), TensorView::new(Dtype::F32, shape.clone(), bytes)?)))
            .collect::<std::result::Result<Vec<_>, safetensors::SafeTensorError>>()
            .map_err(|e| corrupt(Path::new("<memory>"), e))?;
        let meta = Metadata { config: self.config.to_toml_string(), epoch: self.epoch, iteration: self.iteration, rng: self.rng.clone() };
        let info = HashMap::from([(METADATA_KEY.to_string(), serde_json::to_string(&meta)?)]);
        safetensors::serialize(views, Some(info)).map_err(|e| corrupt(Path::new("<memory>"), e))
    }

    pub fn from_bytes(bytes: &[u8], path: &Path) -> Result<Self> {
        let st = SafeTensors::deserialize(bytes).map_err(|e| corrupt(path, e))?;
        let (_, header) = SafeTensors::read_metadata(bytes).map_err(|e| corrupt(path, e))?;
        let raw = header
            .metadata()
            .as_ref()
            .and_then(|m| m.get(METADATA_KEY))
            .ok_or_else(|| corrupt(path, "missing metadata"))?;
        let meta: Metadata = serde_json::from_str(raw).map_err(|e| corrupt(path, e))?;
        let config = Config::from_toml_str(&meta.config)?;
        let mut params = BTreeMap::new();
        let mut momentum = BTreeMap::new();
        for (name, view) in st.tensors() {
            if view.dtype() != Dtype::F32 {
                return Err(corrupt(path, format!("{name} is not f32")));
            }
            let values: Vec<f32> = view.data().chunks_exact(4).map(|c| f32::from_le_bytes([c[0], c[1], c[2], c[3]])).collect();
            let t = Tensor::from_vec(values, view.shape(), &Device::Cpu)?;
            if let Some(n) = name.strip_prefix(PARAM_PREFIX) {
                params.insert(n.to_string(), t);
            } else if let Some(n) = name.strip_prefix(MOMENTUM_PREFIX) {
                momentum.insert(n.to_string(), t);
            } else {
                return Err(corrupt(path, format!("unexpected tensor {name}")));
            }
        }
        Ok(Self { config, epoch: meta.epoch, iteration: meta.iteration, rng: meta.rng, params, momentum })
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        let bytes = self.to_bytes()?;
        let tmp = path.with_extension("tmp");
        std::fs::write(&tmp, bytes)?;
        std::fs::rename(&tmp, path)?;
        Ok(())
    }

    pub fn load(path: &Path) -> Result<Self> {
        let bytes = std::fs::read(path).map_err(|_| Error::MissingInput(path.to_path_buf()))?;
        Self::from_bytes(&bytes, path)
    }

    /// Model with the stored weights; every model parameter must be present
    /// with a matching shape.
    pub fn model(&self) -> Result<Model> {
        let model = Model::new(&self.config)?;
        let vars = model.params.vars();
        if vars.len() != self.params.len() {
            return Err(corrupt(Path::new("<checkpoint>"), format!("{} stored tensors for {} parameters", self.params.len(), vars.len())));
        }
        for (name, var) in vars {
            let t = self.params.get(&name).ok_or_else(|| corrupt(Path::new("<checkpoint>"), format!("missing {name}")))?;
            if t.dims() != var.dims() {
                return Err(corrupt(Path::new("<checkpoint>"), format!("{name}: shape {:?} vs {:?}", t.dims(), var.dims())));
            }
            var.set(t)?;
        }
        Ok(model)
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn tiny() -> Config {
        Config { fpn_channels: 8, backbone_widths: vec![4, 4, 8, 8, 8], roi_size: 14, seed: 5, ..Config::default() }
    }

    #[test]
    fn save_load_save_is_byte_identical() {
        let cfg = tiny();
        let m = Model::new(&cfg).unwrap();
        let mut ck = Checkpoint::from_model(&m, &cfg);
        ck.epoch = 3;
        ck.iteration = 17;
        let (name, t) = ck.params.iter().next().unwrap();
        ck.momentum.insert(name.clone(), (t * 0.5).unwrap());
        let a = ck.to_bytes().unwrap();
        let back = Checkpoint::from_bytes(&a, Path::new("x")).unwrap();
        assert_eq!(back.epoch, 3);
        assert_eq!(back.iteration, 17);
        assert_eq!(back.config, cfg);
        assert_eq!(back.momentum.len(), 1);
        assert_eq!(back.to_bytes().unwrap(), a);
    }

    #[test]
    fn restored_model_matches_parameters() {
        let cfg = tiny();
        let m = Model::new(&cfg).unwrap();
        let ck = Checkpoint::from_model(&m, &cfg);
        let restored = Checkpoint::from_bytes(&ck.to_bytes().unwrap(), Path::new("x")).unwrap().model().unwrap();
        for ((n, a), (_, b)) in m.params.vars().iter().zip(restored.params.vars().iter()) {
            let d = (a.as_tensor() - b.as_tensor()).unwrap().abs().unwrap().sum_all().unwrap().to_scalar::<f32>().unwrap();
            assert_eq!(d, 0.0, "{n}");
        }
    }

    #[test]
    fn corrupt_bytes_are_rejected() {
        let err = Checkpoint::from_bytes(&[1, 2, 3], Path::new("bad.safetensors")).unwrap_err();
        assert!(err.to_string().contains("bad.safetensors"));
    }
}
