//! Deterministic stand-ins for every model role.
//!
//! The mock image generator writes the prompt into a PNG text chunk and the
//! mock embedders read it back, so an image "depicts" whatever its prompt
//! names. Embeddings are built from a keyword-to-vector concept table plus
//! hash-derived noise, which lets fixtures place images and class prompts
//! exactly where a test needs them.

use std::collections::BTreeMap;
use std::io::Cursor;
use std::sync::atomic::{AtomicUsize, Ordering};
use std::sync::Mutex;

use regex::Regex;
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use super::{
    BackendError, ChatTurn, ImageEmbedder, ImageTextEmbedder, LlmClient, Role, TextToImageClient,
};
use crate::model::{EmbeddingVector, ImageData};

#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Matcher {
    Contains(String),
    Regex(String),
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct ScriptEntry {
    pub matcher: Matcher,
    /// Optional substring that must appear in an earlier turn of the conversation.
    #[serde(default)]
    pub context: Option<String>,
    /// Response text. For regex matchers, `$1`-style capture references expand.
    pub response: String,
    #[serde(default)]
    pub reusable: bool,
}

impl ScriptEntry {
    pub fn once(contains: &str, response: &str) -> Self {
        ScriptEntry {
            matcher: Matcher::Contains(contains.to_string()),
            context: None,
            response: response.to_string(),
            reusable: false,
        }
    }

    pub fn always(contains: &str, response: &str) -> Self {
        ScriptEntry {
            reusable: true,
            ..Self::once(contains, response)
        }
    }

    pub fn regex(pattern: &str, response: &str) -> Self {
        ScriptEntry {
            matcher: Matcher::Regex(pattern.to_string()),
            context: None,
            response: response.to_string(),
            reusable: true,
        }
    }

    pub fn in_context(mut self, context: &str) -> Self {
        self.context = Some(context.to_string());
        self
    }
}

enum CompiledMatcher {
    Contains(String),
    Regex(Regex),
}

struct Slot {
    matcher: CompiledMatcher,
    context: Option<String>,
    response: String,
    reusable: bool,
    consumed: bool,
}

/// Scripted chat model. Each conversation's last user turn is matched against
/// the script in order; the first live match answers.
pub struct ScriptedLlm {
    slots: Mutex<Vec<Slot>>,
    default_response: Option<String>,
    strict: bool,
    calls: AtomicUsize,
}

impl ScriptedLlm {
    pub fn new(script: Vec<ScriptEntry>) -> Result<Self, BackendError> {
        if script.is_empty() {
            return Err(BackendError::Malformed(
                "mock script must not be empty".into(),
            ));
        }
        let slots = script
            .into_iter()
            .map(|e| {
                let matcher = match e.matcher {
                    Matcher::Contains(s) => CompiledMatcher::Contains(s),
                    Matcher::Regex(p) => CompiledMatcher::Regex(
                        Regex::new(&p).map_err(|err| BackendError::Malformed(err.to_string()))?,
                    ),
                };
                Ok(Slot {
                    matcher,
                    context: e.context,
                    response: e.response,
                    reusable: e.reusable,
                    consumed: false,
                })
            })
            .collect::<Result<Vec<_>, BackendError>>()?;
        Ok(ScriptedLlm {
            slots: Mutex::new(slots),
            default_response: None,
            strict: true,
            calls: AtomicUsize::new(0),
        })
    }

    /// Answers unmatched prompts with `response` instead of failing.
    pub fn with_default(mut self, response: &str) -> Self {
        self.default_response = Some(response.to_string());
        self.strict = false;
        self
    }

    pub fn calls(&self) -> usize {
        self.calls.load(Ordering::SeqCst)
    }
}

impl LlmClient for ScriptedLlm {
    fn send(&self, conversation: &[ChatTurn]) -> Result<String, BackendError> {
        self.calls.fetch_add(1, Ordering::SeqCst);
        let last = conversation
            .iter()
            .rposition(|t| t.role == Role::User)
            .ok_or_else(|| BackendError::Malformed("conversation has no user turn".into()))?;
        let prompt = &conversation[last].text;
        let history = &conversation[..last];
        let mut slots = self.slots.lock().unwrap_or_else(|e| e.into_inner());
        for slot in slots.iter_mut() {
            if slot.consumed {
                continue;
            }
            if let Some(ctx) = &slot.context {
                if !history.iter().any(|t| t.text.contains(ctx.as_str())) {
                    continue;
                }
            }
            let answer = match &slot.matcher {
                CompiledMatcher::Contains(s) => {
                    prompt.contains(s.as_str()).then(|| slot.response.clone())
                }
                CompiledMatcher::Regex(re) => re.captures(prompt).map(|caps| {
                    let mut out = String::new();
                    caps.expand(&slot.response, &mut out);
                    out
                }),
            };
            if let Some(answer) = answer {
                if !slot.reusable {
                    slot.consumed = true;
                }
                return Ok(answer);
            }
        }
        match (&self.default_response, self.strict) {
            (Some(d), false) => Ok(d.clone()),
            _ => Err(BackendError::Unmatched(prompt.clone())),
        }
    }

    fn fingerprint(&self) -> String {
        "mock-llm".to_string()
    }
}

const PROMPT_KEY: &str = "prompt";

/// Renders a tiny PNG whose pixels hash the text and whose `prompt` text
/// chunk carries the text itself.
pub fn render_prompt_png(text: &str, salt: &str) -> Result<Vec<u8>, BackendError> {
    const SIDE: u32 = 8;
    let mut pixels = Vec::with_capacity((SIDE * SIDE * 3) as usize);
    let mut counter = 0u32;
    while pixels.len() < (SIDE * SIDE * 3) as usize {
        let digest = Sha256::new()
            .chain_update(salt.as_bytes())
            .chain_update([0u8])
            .chain_update(text.as_bytes())
            .chain_update(counter.to_le_bytes())
            .finalize();
        pixels.extend_from_slice(&digest);
        counter += 1;
    }
    pixels.truncate((SIDE * SIDE * 3) as usize);

    let mut out = Vec::new();
    {
        let mut encoder = png::Encoder::new(&mut out, SIDE, SIDE);
        encoder.set_color(png::ColorType::Rgb);
        encoder.set_depth(png::BitDepth::Eight);
        encoder
            .add_itxt_chunk(PROMPT_KEY.to_string(), text.to_string())
            .map_err(|e| BackendError::Malformed(e.to_string()))?;
        let mut writer = encoder
            .write_header()
            .map_err(|e| BackendError::Malformed(e.to_string()))?;
        writer
            .write_image_data(&pixels)
            .map_err(|e| BackendError::Malformed(e.to_string()))?;
    }
    Ok(out)
}

/// Reads the `prompt` text chunk back out of a PNG, if present.
pub fn read_prompt_png(bytes: &[u8]) -> Option<String> {
    let decoder = png::Decoder::new(Cursor::new(bytes));
    let reader = decoder.read_info().ok()?;
    let info = reader.info();
    info.utf8_text
        .iter()
        .find(|c| c.keyword == PROMPT_KEY)
        .and_then(|c| c.get_text().ok())
        .or_else(|| {
            info.uncompressed_latin1_text
                .iter()
                .find(|c| c.keyword == PROMPT_KEY)
                .map(|c| c.text.clone())
        })
}

pub struct MockImageGenerator {
    salt: String,
    fail_on: Vec<String>,
    calls: AtomicUsize,
}

impl MockImageGenerator {
    pub fn new(salt: &str) -> Self {
        MockImageGenerator {
            salt: salt.to_string(),
            fail_on: Vec::new(),
            calls: AtomicUsize::new(0),
        }
    }

    /// Prompts containing any of these substrings fail permanently.
    pub fn failing_on(mut self, substrings: Vec<String>) -> Self {
        self.fail_on = substrings;
        self
    }

    pub fn calls(&self) -> usize {
        self.calls.load(Ordering::SeqCst)
    }
}

impl TextToImageClient for MockImageGenerator {
    fn generate(&self, text: &str) -> Result<ImageData, BackendError> {
        self.calls.fetch_add(1, Ordering::SeqCst);
        if self.fail_on.iter().any(|s| text.contains(s.as_str())) {
            return Err(BackendError::Status {
                status: 400,
                body: format!("generation refused for {text:?}"),
            });
        }
        Ok(ImageData::png(render_prompt_png(text, &self.salt)?))
    }

    fn fingerprint(&self) -> String {
        format!("mock-image-gen:{}", self.salt)
    }
}

#[derive(Debug, Clone, Default, Serialize, Deserialize)]
#[serde(default)]
pub struct MockEmbedderSpec {
    pub dim: usize,
    pub salt: String,
    /// Scale of the hash-derived noise added to concept vectors.
    pub noise: f32,
    /// Keyword (matched on word boundaries, case-insensitive) to direction.
    pub concepts: BTreeMap<String, Vec<f32>>,
    /// Exact text to vector.
    pub text_overrides: BTreeMap<String, Vec<f32>>,
    /// Hex SHA-256 of image bytes to vector.
    pub image_overrides: BTreeMap<String, Vec<f32>>,
}

/// Counting mock for both embedder roles.
pub struct MockEmbedder {
    spec: MockEmbedderSpec,
    concepts: Vec<(String, Vec<f32>)>,
    calls: AtomicUsize,
}

impl MockEmbedder {
    pub fn new(spec: MockEmbedderSpec) -> Result<Self, BackendError> {
        if spec.dim == 0 {
            return Err(BackendError::Malformed(
                "mock embedder dim must be positive".into(),
            ));
        }
        let check = |v: &Vec<f32>| {
            if v.len() != spec.dim {
                Err(BackendError::DimMismatch {
                    expected: spec.dim,
                    got: v.len(),
                })
            } else {
                Ok(())
            }
        };
        spec.concepts.values().try_for_each(check)?;
        spec.text_overrides.values().try_for_each(check)?;
        spec.image_overrides.values().try_for_each(check)?;
        let concepts = spec
            .concepts
            .iter()
            .map(|(k, v)| (k.to_lowercase(), v.clone()))
            .collect();
        Ok(MockEmbedder {
            spec,
            concepts,
            calls: AtomicUsize::new(0),
        })
    }

    /// Hash-only embedder of the given dimension.
    pub fn hashed(dim: usize, salt: &str) -> Self {
        Self::new(MockEmbedderSpec {
            dim,
            salt: salt.to_string(),
            noise: 1.0,
            ..Default::default()
        })
        .expect("positive dim")
    }

    pub fn calls(&self) -> usize {
        self.calls.load(Ordering::SeqCst)
    }

    fn hash_vector(&self, content: &[u8]) -> Vec<f32> {
        let mut out = Vec::with_capacity(self.spec.dim);
        let mut counter = 0u32;
        while out.len() < self.spec.dim {
            let digest = Sha256::new()
                .chain_update(self.spec.salt.as_bytes())
                .chain_update([0u8])
                .chain_update(content)
                .chain_update(counter.to_le_bytes())
                .finalize();
            for chunk in digest.chunks_exact(4) {
                if out.len() == self.spec.dim {
                    break;
                }
                let u = u32::from_le_bytes([chunk[0], chunk[1], chunk[2], chunk[3]]);
                out.push((u as f64 / u32::MAX as f64 * 2.0 - 1.0) as f32);
            }
            counter += 1;
        }
        out
    }

    fn semantic(&self, text: &str) -> Vec<f32> {
        let lower = text.to_lowercase();
        let mut acc = vec![0f32; self.spec.dim];
        let mut matched = false;
        for (keyword, direction) in &self.concepts {
            if contains_word(&lower, keyword) {
                matched = true;
                acc.iter_mut().zip(direction).for_each(|(a, d)| *a += d);
            }
        }
        let noise = self.hash_vector(text.as_bytes());
        let scale = if matched { self.spec.noise } else { 1.0 };
        acc.iter_mut().zip(noise).for_each(|(a, n)| *a += scale * n);
        acc
    }

    fn text_vector(&self, text: &str) -> EmbeddingVector {
        match self.spec.text_overrides.get(text) {
            Some(v) => EmbeddingVector::new(v.clone()),
            None => EmbeddingVector::new(self.semantic(text)),
        }
    }

    fn image_vector(&self, image: &ImageData) -> EmbeddingVector {
        let key = hex::encode(Sha256::digest(&image.bytes));
        if let Some(v) = self.spec.image_overrides.get(&key) {
            return EmbeddingVector::new(v.clone());
        }
        match read_prompt_png(&image.bytes) {
            Some(prompt) => EmbeddingVector::new(self.semantic(&prompt)),
            None => EmbeddingVector::new(self.hash_vector(&image.bytes)),
        }
    }
}

fn contains_word(haystack: &str, needle: &str) -> bool {
    if needle.is_empty() {
        return false;
    }
    haystack.match_indices(needle).any(|(start, m)| {
        let before = haystack[..start].chars().next_back();
        let after = haystack[start + m.len()..].chars().next();
        !before.is_some_and(char::is_alphanumeric) && !after.is_some_and(char::is_alphanumeric)
    })
}

impl ImageTextEmbedder for MockEmbedder {
    fn embed_texts(&self, texts: &[String]) -> Result<Vec<EmbeddingVector>, BackendError> {
        self.calls.fetch_add(1, Ordering::SeqCst);
        Ok(texts.iter().map(|t| self.text_vector(t)).collect())
    }

    fn embed_image(&self, image: &ImageData) -> Result<EmbeddingVector, BackendError> {
        self.calls.fetch_add(1, Ordering::SeqCst);
        Ok(self.image_vector(image))
    }

    fn dim(&self) -> Option<usize> {
        Some(self.spec.dim)
    }

    fn fingerprint(&self) -> String {
        format!("mock-embedder:{}:{}", self.spec.salt, self.spec.dim)
    }
}

impl ImageEmbedder for MockEmbedder {
    fn embed_image(&self, image: &ImageData) -> Result<EmbeddingVector, BackendError> {
        ImageTextEmbedder::embed_image(self, image)
    }

    fn dim(&self) -> Option<usize> {
        Some(self.spec.dim)
    }

    fn fingerprint(&self) -> String {
        ImageTextEmbedder::fingerprint(self)
    }
}
