//! JSON checkpoints: the producing config, the class vocabulary and a named
//! parameter table stored as row-major `f32`.

use std::fs;
use std::path::Path;

use serde::de::DeserializeOwned;
use serde::{Deserialize, Serialize};

use crate::autograd::ParamStore;
use crate::domain::ClassVocabulary;
use crate::error::{io_err, RcdError, Result};
use crate::rcdgen::{DenoiserConfig, TinyDenoiser};
use crate::rcdnet::{RcdNet, RcdNetConfig};
use crate::scalar::Scalar;
use crate::tensor::Tensor;

pub const RCDNET_KIND: &str = "rcdnet";
pub const DENOISER_KIND: &str = "rcdgen-denoiser";

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ParamRecord {
    pub name: String,
    pub shape: Vec<usize>,
    pub values: Vec<f32>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Checkpoint {
    pub kind: String,
    pub config: serde_json::Value,
    pub vocabulary: Vec<String>,
    pub params: Vec<ParamRecord>,
}

impl Checkpoint {
    pub fn from_store<T: Scalar, C: Serialize>(
        kind: &str,
        config: &C,
        vocab: &ClassVocabulary,
        store: &ParamStore<T>,
    ) -> Self {
        Self {
            kind: kind.to_string(),
            config: serde_json::to_value(config).expect("config serializes"),
            vocabulary: vocab.names().to_vec(),
            params: store
                .iter()
                .map(|(_, name, t)| ParamRecord {
                    name: name.to_string(),
                    shape: t.shape().to_vec(),
                    values: t.data().iter().map(|v| v.to_f64_lossy() as f32).collect(),
                })
                .collect(),
        }
    }

    pub fn config<C: DeserializeOwned>(&self) -> Result<C> {
        serde_json::from_value(self.config.clone()).map_err(|e| RcdError::Checkpoint(format!("bad config: {e}")))
    }

    pub fn vocab(&self) -> Result<ClassVocabulary> {
        ClassVocabulary::new(&self.vocabulary)
    }

    fn expect_kind(&self, kind: &str) -> Result<()> {
        if self.kind != kind {
            return Err(RcdError::Checkpoint(format!("expected a `{kind}` checkpoint, found `{}`", self.kind)));
        }
        Ok(())
    }

    /// Copies every stored tensor into `store`; names and shapes must match
    /// one-to-one.
    pub fn load_into<T: Scalar>(&self, store: &mut ParamStore<T>) -> Result<()> {
        if self.params.len() != store.len() {
            return Err(RcdError::Checkpoint(format!(
                "checkpoint has {} tensors, model has {}",
                self.params.len(),
                store.len()
            )));
        }
        for rec in &self.params {
            let id = store
                .find(&rec.name)
                .ok_or_else(|| RcdError::Checkpoint(format!("unknown parameter `{}`", rec.name)))?;
            if store.get(id).shape() != rec.shape.as_slice() {
                return Err(RcdError::Checkpoint(format!(
                    "parameter `{}` has shape {:?}, model expects {:?}",
                    rec.name,
                    rec.shape,
                    store.get(id).shape()
                )));
            }
            let t = Tensor::new(&rec.shape, rec.values.iter().map(|&v| T::of(f64::from(v))).collect())
                .map_err(|e| RcdError::Checkpoint(format!("parameter `{}`: {e}", rec.name)))?;
            if !t.all_finite() {
                return Err(RcdError::Checkpoint(format!("parameter `{}` is not finite", rec.name)));
            }
            store.set(id, t)?;
        }
        Ok(())
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        let text = serde_json::to_string(self).expect("checkpoint serializes");
        fs::write(path, text).map_err(io_err(path))
    }

    pub fn load(path: &Path) -> Result<Self> {
        let text = fs::read_to_string(path).map_err(io_err(path))?;
        serde_json::from_str(&text).map_err(|e| RcdError::Checkpoint(format!("{}: {e}", path.display())))
    }
}

pub fn save_rcdnet<T: Scalar>(path: &Path, model: &RcdNet<T>, vocab: &ClassVocabulary) -> Result<()> {
    Checkpoint::from_store(RCDNET_KIND, &model.config, vocab, &model.params).save(path)
}

pub fn load_rcdnet<T: Scalar>(path: &Path) -> Result<(RcdNet<T>, ClassVocabulary)> {
    let ck = Checkpoint::load(path)?;
    ck.expect_kind(RCDNET_KIND)?;
    let config: RcdNetConfig = ck.config()?;
    let mut model = RcdNet::new(config, 0)?;
    ck.load_into(&mut model.params)?;
    Ok((model, ck.vocab()?))
}

pub fn save_denoiser<T: Scalar>(path: &Path, model: &TinyDenoiser<T>, vocab: &ClassVocabulary) -> Result<()> {
    Checkpoint::from_store(DENOISER_KIND, &model.config, vocab, &model.params).save(path)
}

pub fn load_denoiser<T: Scalar>(path: &Path) -> Result<(TinyDenoiser<T>, ClassVocabulary)> {
    let ck = Checkpoint::load(path)?;
    ck.expect_kind(DENOISER_KIND)?;
    let config: DenoiserConfig = ck.config()?;
    let mut model = TinyDenoiser::new(config, 0)?;
    ck.load_into(&mut model.params)?;
    Ok((model, ck.vocab()?))
}
