//! Plumbing shared by the `demonstrate` binary and its tests: loading a
//! model together with a matching embedding provider, and the HTTP service.

pub mod server;

use std::path::Path;

use demonstrate::config::Config;
use demonstrate::embedding::EmbeddingProvider;
use demonstrate::model::LearnedModel;
use demonstrate::{Error, Result};

/// Load `path` and build the configured embedder. The embedder must be the
/// one the model was trained with, otherwise its embeddings live in a
/// different space.
pub fn load_model(path: &Path, cfg: &Config) -> Result<(LearnedModel, Box<dyn EmbeddingProvider>)> {
    if !path.exists() {
        return Err(Error::InvalidArgument(format!("model file {} not found", path.display())));
    }
    let model = LearnedModel::load(path)?;
    let embedder = cfg.embedding.provider()?;
    if embedder.id() != model.embedder_id {
        return Err(Error::Version {
            expected: model.embedder_id.clone(),
            found: embedder.id().to_string(),
        });
    }
    Ok((model, embedder))
}
