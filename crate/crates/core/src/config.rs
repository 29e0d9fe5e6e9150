//! Pipeline configuration (TOML), ablation presets and backend construction.

use std::collections::BTreeMap;
use std::fmt;
use std::path::{Path, PathBuf};
use std::str::FromStr;
use std::sync::Arc;

use serde::{Deserialize, Serialize};

use crate::backends::{
    connect_sidecar, BackendError, Backends, ChatConfig, HttpChatClient, HttpImageClient,
    HttpTransport, ImageGenConfig, MockFixture, ReqwestTransport, SidecarConfig,
};
use crate::error::{Error, Result};
use crate::eval::Protocol;
use crate::fsutil::read_to_string;
use crate::gallery::{GalleryConfig, GalleryMode};
use crate::llm::{PromptTemplates, SimulationConfig};
use crate::scoring::ScoringConfig;

pub const CHAT_KEY_ENV: &str = "OSR_CHAT_API_KEY";
pub const IMAGE_KEY_ENV: &str = "OSR_IMAGE_API_KEY";

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct EvalConfig {
    pub protocol: Protocol,
    /// JSONL dataset manifest.
    pub dataset: Option<PathBuf>,
    /// Fixed class assignments used instead of seeded sampling.
    pub split_file: Option<PathBuf>,
}

impl Default for EvalConfig {
    fn default() -> Self {
        EvalConfig {
            protocol: Protocol::Cifar10,
            dataset: None,
            split_file: None,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case", deny_unknown_fields)]
pub enum BackendsConfig {
    Mock {
        fixture: PathBuf,
    },
    Http {
        chat: ChatConfig,
        image_gen: ImageGenConfig,
        sidecar: SidecarConfig,
    },
}

impl Default for BackendsConfig {
    fn default() -> Self {
        BackendsConfig::Mock {
            fixture: PathBuf::from("fixture.json"),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct PipelineConfig {
    pub seed: u64,
    /// Upper bound on concurrent classes, slots and test images.
    pub parallelism: usize,
    pub out_dir: PathBuf,
    /// Feature store reused across runs; defaults to none.
    pub cache_dir: Option<PathBuf>,
    pub templates: Option<PathBuf>,
    pub simulation: SimulationConfig,
    pub gallery: GalleryConfig,
    pub scoring: ScoringConfig,
    pub eval: EvalConfig,
    pub backends: BackendsConfig,
}

impl Default for PipelineConfig {
    fn default() -> Self {
        PipelineConfig {
            seed: 0,
            parallelism: 4,
            out_dir: PathBuf::from("out"),
            cache_dir: None,
            templates: None,
            simulation: SimulationConfig::default(),
            gallery: GalleryConfig::default(),
            scoring: ScoringConfig::default(),
            eval: EvalConfig::default(),
            backends: BackendsConfig::default(),
        }
    }
}

fn resolve(base: &Path, p: &mut PathBuf) {
    if p.is_relative() {
        *p = base.join(&*p);
    }
}

impl PipelineConfig {
    pub fn parse(text: &str) -> Result<Self> {
        toml::from_str(text).map_err(|e| Error::Config(e.to_string()))
    }

    /// Loads a config file. Input paths (fixture, templates, dataset, split file)
    /// resolve against the file's directory; output paths stay as written.
    pub fn load(path: &Path) -> Result<Self> {
        let mut cfg = Self::parse(&read_to_string(path)?)
            .map_err(|e| Error::Config(format!("{}: {e}", path.display())))?;
        let base = path.parent().unwrap_or(Path::new(""));
        if let BackendsConfig::Mock { fixture } = &mut cfg.backends {
            resolve(base, fixture);
        }
        for p in [
            &mut cfg.templates,
            &mut cfg.eval.dataset,
            &mut cfg.eval.split_file,
        ]
        .into_iter()
        .flatten()
        {
            resolve(base, p);
        }
        Ok(cfg)
    }

    /// Fills API keys from `lookup`, normally the process environment.
    pub fn apply_env_with(&mut self, lookup: impl Fn(&str) -> Option<String>) {
        if let BackendsConfig::Http {
            chat, image_gen, ..
        } = &mut self.backends
        {
            if let Some(k) = lookup(CHAT_KEY_ENV) {
                chat.api_key = Some(k);
            }
            if let Some(k) = lookup(IMAGE_KEY_ENV) {
                image_gen.api_key = Some(k);
            }
        }
    }

    pub fn apply_env(&mut self) {
        self.apply_env_with(|k| std::env::var(k).ok());
    }

    pub fn validate(&self) -> Result<()> {
        self.simulation.validate()?;
        self.gallery.validate()?;
        self.scoring.validate()?;
        if self.parallelism < 1 {
            return Err(Error::Config("parallelism must be at least 1".into()));
        }
        Ok(())
    }

    pub fn templates(&self) -> Result<PromptTemplates> {
        match &self.templates {
            Some(p) => PromptTemplates::load(p),
            None => Ok(PromptTemplates::default()),
        }
    }

    pub fn with_preset(&self, preset: Preset) -> Self {
        let mut cfg = self.clone();
        match preset {
            Preset::Full => {}
            Preset::NoReasoning => cfg.simulation.intermediate_reasoning = false,
            Preset::NoSelfcheck => cfg.simulation.self_checking = false,
            Preset::NoCrossassess => cfg.gallery.mode = GalleryMode::NoCrossAssess,
            Preset::CheckDiscard => cfg.gallery.mode = GalleryMode::CheckAndDiscard,
            Preset::NaiveRefine => cfg.gallery.mode = GalleryMode::CheckAndNaiveRefine,
            Preset::NamesOnly => cfg.scoring.alpha = 1.0,
            Preset::ImagesOnly => cfg.scoring.alpha = 0.0,
            Preset::SoftmaxBaseline => cfg.simulation.enabled = false,
        }
        cfg
    }

    /// TOML dump with secrets omitted.
    pub fn dump(&self) -> Result<String> {
        toml::to_string(self).map_err(|e| Error::Config(e.to_string()))
    }

    /// Flattened `dotted.key = value` lines.
    pub fn flatten(&self) -> Result<BTreeMap<String, String>> {
        let value = toml::Value::try_from(self).map_err(|e| Error::Config(e.to_string()))?;
        let mut out = BTreeMap::new();
        flatten_into(String::new(), &value, &mut out);
        Ok(out)
    }

    /// Keys whose values differ between two configs, with both values.
    pub fn diff(&self, other: &Self) -> Result<Vec<(String, Option<String>, Option<String>)>> {
        let (a, b) = (self.flatten()?, other.flatten()?);
        let mut keys: Vec<&String> = a.keys().chain(b.keys()).collect();
        keys.sort();
        keys.dedup();
        Ok(keys
            .into_iter()
            .filter(|k| a.get(*k) != b.get(*k))
            .map(|k| (k.clone(), a.get(k).cloned(), b.get(k).cloned()))
            .collect())
    }

    pub fn build_backends(&self) -> Result<Backends> {
        match &self.backends {
            BackendsConfig::Mock { fixture } => MockFixture::load(fixture)?
                .build()
                .map_err(|e| Error::backend("building mock backends", e)),
            BackendsConfig::Http {
                chat,
                image_gen,
                sidecar,
            } => {
                let transport: Arc<dyn HttpTransport> = Arc::new(
                    ReqwestTransport::new().map_err(|e| Error::backend("http client", e))?,
                );
                self.build_http(chat, image_gen, sidecar, transport)
                    .map_err(|e| Error::backend("connecting to providers", e))
            }
        }
    }

    fn build_http(
        &self,
        chat: &ChatConfig,
        image_gen: &ImageGenConfig,
        sidecar: &SidecarConfig,
        transport: Arc<dyn HttpTransport>,
    ) -> std::result::Result<Backends, BackendError> {
        let (image_text, image) = connect_sidecar(sidecar.clone(), transport.clone())?;
        Ok(Backends {
            chat: Arc::new(HttpChatClient::new(chat.clone(), transport.clone())),
            image_gen: Arc::new(HttpImageClient::new(image_gen.clone(), transport)),
            image_text: Arc::new(image_text),
            image: Arc::new(image),
        })
    }
}

fn flatten_into(prefix: String, value: &toml::Value, out: &mut BTreeMap<String, String>) {
    match value {
        toml::Value::Table(t) => {
            for (k, v) in t {
                let key = if prefix.is_empty() {
                    k.clone()
                } else {
                    format!("{prefix}.{k}")
                };
                flatten_into(key, v, out);
            }
        }
        other => {
            out.insert(prefix, other.to_string());
        }
    }
}

/// Named ablation variants. Each changes exactly one knob of the full pipeline.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub enum Preset {
    Full,
    NoReasoning,
    NoSelfcheck,
    NoCrossassess,
    CheckDiscard,
    NaiveRefine,
    NamesOnly,
    ImagesOnly,
    SoftmaxBaseline,
}

impl Preset {
    pub const ALL: [Preset; 9] = [
        Preset::Full,
        Preset::NoReasoning,
        Preset::NoSelfcheck,
        Preset::NoCrossassess,
        Preset::CheckDiscard,
        Preset::NaiveRefine,
        Preset::NamesOnly,
        Preset::ImagesOnly,
        Preset::SoftmaxBaseline,
    ];

    pub fn as_str(self) -> &'static str {
        match self {
            Preset::Full => "full",
            Preset::NoReasoning => "no-reasoning",
            Preset::NoSelfcheck => "no-selfcheck",
            Preset::NoCrossassess => "no-crossassess",
            Preset::CheckDiscard => "check-discard",
            Preset::NaiveRefine => "naive-refine",
            Preset::NamesOnly => "names-only",
            Preset::ImagesOnly => "images-only",
            Preset::SoftmaxBaseline => "softmax-baseline",
        }
    }

    /// The config key the preset changes.
    pub fn knob(self) -> Option<&'static str> {
        match self {
            Preset::Full => None,
            Preset::NoReasoning => Some("simulation.intermediate_reasoning"),
            Preset::NoSelfcheck => Some("simulation.self_checking"),
            Preset::NoCrossassess | Preset::CheckDiscard | Preset::NaiveRefine => {
                Some("gallery.mode")
            }
            Preset::NamesOnly | Preset::ImagesOnly => Some("scoring.alpha"),
            Preset::SoftmaxBaseline => Some("simulation.enabled"),
        }
    }
}

impl fmt::Display for Preset {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

impl FromStr for Preset {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        Preset::ALL
            .into_iter()
            .find(|p| p.as_str() == s)
            .ok_or_else(|| Error::Config(format!("unknown preset {s:?}")))
    }
}
