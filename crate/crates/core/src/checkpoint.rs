//! Single-file model archive: parameters plus everything needed to rebuild the model.

use std::collections::HashMap;
use std::path::Path;

use candle_core::Device;

use crate::config::RunConfig;
use crate::corpus::RelationVocab;
use crate::encoder::TokenVocab;
use crate::error::{Error, Result};
use crate::model::Model;
use crate::nn::{read_metadata, ParamStore};

pub const FORMAT: &str = "birel-checkpoint/1";

pub struct Checkpoint {
    pub config: RunConfig,
    pub relations: RelationVocab,
    pub tokens: TokenVocab,
    pub store: ParamStore,
    pub model: Model,
}

/// Freshly initialised parameters and model for a configuration.
pub fn build_model(
    config: &RunConfig,
    relations: &RelationVocab,
    tokens: &TokenVocab,
) -> Result<(ParamStore, Model)> {
    config.validate()?;
    let mut store = ParamStore::new(config.train.seed, Device::Cpu);
    let model = Model::new(
        &mut store,
        config.encoder,
        tokens.len(),
        relations.len(),
        config.switches(),
    )?;
    Ok((store, model))
}

pub fn save(
    path: &Path,
    store: &ParamStore,
    config: &RunConfig,
    relations: &RelationVocab,
    tokens: &TokenVocab,
) -> Result<()> {
    let mut meta = HashMap::new();
    meta.insert("format".to_string(), FORMAT.to_string());
    meta.insert("run_config".to_string(), serde_json::to_string(config)?);
    meta.insert("relations".to_string(), serde_json::to_string(relations)?);
    meta.insert("tokens".to_string(), serde_json::to_string(tokens)?);
    store.save(path, meta)
}

pub fn load(path: &Path) -> Result<Checkpoint> {
    let meta = read_metadata(path)?;
    let field = |k: &str| {
        meta.get(k)
            .ok_or_else(|| Error::Checkpoint(format!("{} lacks `{k}` metadata", path.display())))
    };
    let format = field("format")?;
    if format != FORMAT {
        return Err(Error::Checkpoint(format!("unsupported format `{format}`")));
    }
    let config: RunConfig = serde_json::from_str(field("run_config")?)?;
    let relations: RelationVocab = serde_json::from_str(field("relations")?)?;
    let tokens: TokenVocab = serde_json::from_str(field("tokens")?)?;
    let (store, model) = build_model(&config, &relations, &tokens)?;
    store.load(path)?;
    Ok(Checkpoint {
        config,
        relations,
        tokens,
        store,
        model,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::encoder::EncoderConfig;

    #[test]
    fn roundtrip_restores_identical_predictions() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("m.safetensors");
        let config = RunConfig {
            encoder: EncoderConfig {
                hidden: 8,
                layers: 1,
                heads: 2,
                ffn: 16,
                max_len: 10,
            },
            ..Default::default()
        };
        let relations = RelationVocab::from_labels(["a", "b"]);
        let tokens = TokenVocab::from_tokens(["x", "y", "z"]);
        let (store, model) = build_model(&config, &relations, &tokens).unwrap();
        // Perturb so the archive differs from a fresh initialisation.
        for var in store.vars() {
            var.set(&(var.as_tensor() * 1.5).unwrap()).unwrap();
        }
        save(&path, &store, &config, &relations, &tokens).unwrap();
        let ck = load(&path).unwrap();
        assert_eq!(ck.config, config);
        assert_eq!(ck.relations, relations);
        assert_eq!(ck.tokens, tokens);
        let ids = [2, 3, 4, 2];
        let a = model.sentence(&ids).unwrap();
        let b = ck.model.sentence(&ids).unwrap();
        use crate::decode::SentenceTagger;
        assert_eq!(a.heads().unwrap(), b.heads().unwrap());
    }

    #[test]
    fn foreign_file_is_rejected() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("m.safetensors");
        let mut store = ParamStore::new(0, Device::Cpu);
        store.normal("w", &[2], 1.0).unwrap();
        store.save(&path, HashMap::new()).unwrap();
        assert!(matches!(load(&path), Err(Error::Checkpoint(_))));
    }
}
