//! Checkpoint directories: `manifest.json` plus one `MAST` file per tensor.

use std::collections::BTreeMap;
use std::fs;
use std::path::Path;

use serde::de::DeserializeOwned;
use serde::{Deserialize, Serialize};

use super::decoder::DecoderConfig;
use super::encoder::EncoderConfig;
use super::params::{ParamSpec, ParamStore};
use crate::dataset::Problem;
use crate::error::{Error, Result};
use crate::scalar::Real;
use crate::tensor::Tensor;

const FORMAT: &str = "masd-checkpoint";
const VERSION: u32 = 1;
const MANIFEST: &str = "manifest.json";

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct CheckpointMetadata {
    pub seed: u64,
    pub epoch: usize,
    pub problem: Problem,
    /// Validation EER operating threshold, set once the classifier is trained.
    pub eer_threshold: Option<f64>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct ModelCheckpoint<T> {
    pub encoder_config: EncoderConfig,
    pub decoder_config: Option<DecoderConfig>,
    pub encoder: ParamStore<T>,
    pub decoder: Option<ParamStore<T>>,
    pub metadata: CheckpointMetadata,
}

impl<T: Real> ModelCheckpoint<T> {
    pub fn expected_specs(&self) -> Vec<ParamSpec> {
        let mut specs = self.encoder_config.param_specs();
        if let Some(d) = &self.decoder_config {
            specs.extend(d.param_specs(&self.encoder_config));
        }
        specs
    }

    pub fn validate(&self) -> Result<()> {
        self.encoder_config.validate()?;
        self.encoder.check_against(&self.encoder_config.param_specs())?;
        match (&self.decoder_config, &self.decoder) {
            (None, None) => Ok(()),
            (Some(cfg), Some(params)) => {
                cfg.validate(&self.encoder_config)?;
                params.check_against(&cfg.param_specs(&self.encoder_config))
            }
            _ => Err(Error::Contract("decoder config and parameters must be present together".into())),
        }
    }
}

#[derive(Serialize)]
struct ManifestOut<'a> {
    format: &'a str,
    version: u32,
    encoder: &'a EncoderConfig,
    decoder: &'a Option<DecoderConfig>,
    metadata: &'a CheckpointMetadata,
    params: BTreeMap<String, String>,
}

fn param_file(name: &str) -> String {
    format!("params/{name}.mast")
}

pub fn save_checkpoint<T: Real>(dir: &Path, ckpt: &ModelCheckpoint<T>) -> Result<()> {
    ckpt.validate()?;
    let params_dir = dir.join("params");
    fs::create_dir_all(&params_dir).map_err(|e| Error::io(&params_dir, e))?;
    let mut files = BTreeMap::new();
    let stores = std::iter::once(&ckpt.encoder).chain(ckpt.decoder.as_ref());
    for store in stores {
        for (name, t) in store.iter() {
            let rel = param_file(name);
            t.save_mast(&dir.join(&rel))?;
            files.insert(name.clone(), rel);
        }
    }
    let manifest = ManifestOut {
        format: FORMAT,
        version: VERSION,
        encoder: &ckpt.encoder_config,
        decoder: &ckpt.decoder_config,
        metadata: &ckpt.metadata,
        params: files,
    };
    let path = dir.join(MANIFEST);
    let text = serde_json::to_string_pretty(&manifest).expect("manifest serializes");
    fs::write(&path, text + "\n").map_err(|e| Error::io(&path, e))
}

fn field<D: DeserializeOwned>(obj: &serde_json::Map<String, serde_json::Value>, key: &str, path: &Path) -> Result<D> {
    let v = obj
        .get(key)
        .ok_or_else(|| Error::format(path, key, "missing"))?;
    serde_json::from_value(v.clone()).map_err(|e| Error::format(path, key, e.to_string()))
}

pub fn load_checkpoint<T: Real>(dir: &Path) -> Result<ModelCheckpoint<T>> {
    let path = dir.join(MANIFEST);
    let text = fs::read_to_string(&path).map_err(|e| Error::io(&path, e))?;
    let value: serde_json::Value =
        serde_json::from_str(&text).map_err(|e| Error::format(&path, "manifest", e.to_string()))?;
    let obj = value
        .as_object()
        .ok_or_else(|| Error::format(&path, "manifest", "not a JSON object"))?;
    let format: String = field(obj, "format", &path)?;
    if format != FORMAT {
        return Err(Error::format(&path, "format", format!("expected `{FORMAT}`, got `{format}`")));
    }
    let version: u32 = field(obj, "version", &path)?;
    if version != VERSION {
        return Err(Error::format(&path, "version", format!("unsupported version {version}")));
    }
    let encoder_config: EncoderConfig = field(obj, "encoder", &path)?;
    let decoder_config: Option<DecoderConfig> = field(obj, "decoder", &path)?;
    let metadata: CheckpointMetadata = field(obj, "metadata", &path)?;
    let files: BTreeMap<String, String> = field(obj, "params", &path)?;

    let mut encoder = ParamStore::new();
    let mut decoder = ParamStore::new();
    for (name, rel) in &files {
        let t = Tensor::load_mast(&dir.join(rel))?;
        let target = if name.starts_with("decoder.") {
            &mut decoder
        } else {
            &mut encoder
        };
        target
            .insert(name.clone(), t)
            .map_err(|e| Error::format(&path, format!("params.{name}"), e.to_string()))?;
    }
    let ckpt = ModelCheckpoint {
        decoder: decoder_config.as_ref().map(|_| decoder),
        encoder_config,
        decoder_config,
        encoder,
        metadata,
    };
    ckpt.validate()
        .map_err(|e| Error::format(&path, "params", e.to_string()))?;
    Ok(ckpt)
}
