//! JSON fixture describing a full set of mock backends.

use std::path::Path;
use std::sync::Arc;

use serde::{Deserialize, Serialize};

use super::mock::{MockEmbedder, MockEmbedderSpec, MockImageGenerator, ScriptEntry, ScriptedLlm};
use super::{BackendError, Backends};
use crate::error::{Error, Result};

#[derive(Debug, Clone, Default, Serialize, Deserialize)]
pub struct LlmFixture {
    pub script: Vec<ScriptEntry>,
    #[serde(default)]
    pub default_response: Option<String>,
}

#[derive(Debug, Clone, Default, Serialize, Deserialize)]
#[serde(default)]
pub struct GeneratorFixture {
    pub salt: String,
    pub fail_on: Vec<String>,
}

#[derive(Debug, Clone, Default, Serialize, Deserialize)]
pub struct MockFixture {
    pub llm: LlmFixture,
    #[serde(default)]
    pub image_generator: GeneratorFixture,
    pub image_text_embedder: MockEmbedderSpec,
    pub image_embedder: MockEmbedderSpec,
}

impl MockFixture {
    pub fn load(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        serde_json::from_str(&text).map_err(|e| Error::Config(format!("{}: {e}", path.display())))
    }

    pub fn build(&self) -> std::result::Result<Backends, BackendError> {
        let mut llm = ScriptedLlm::new(self.llm.script.clone())?;
        if let Some(d) = &self.llm.default_response {
            llm = llm.with_default(d);
        }
        let generator = MockImageGenerator::new(&self.image_generator.salt)
            .failing_on(self.image_generator.fail_on.clone());
        Ok(Backends {
            chat: Arc::new(llm),
            image_gen: Arc::new(generator),
            image_text: Arc::new(MockEmbedder::new(self.image_text_embedder.clone())?),
            image: Arc::new(MockEmbedder::new(self.image_embedder.clone())?),
        })
    }
}
