//! Pre-stored class text features and gallery image features.
//!
//! Vectors are content-addressed: the key hashes the provider fingerprint,
//! the input kind and the input bytes. A store loaded from disk doubles as
//! the cache for the next precompute run.
//!
//! On disk: `manifest.json` (index) plus `vectors.bin` (little-endian f32).

use std::collections::{BTreeMap, BTreeSet};
use std::path::Path;

use rayon::prelude::*;
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::backends::{ImageEmbedder, ImageTextEmbedder};
use crate::error::{Error, Result};
use crate::fsutil::{read_to_string, write_atomic};
use crate::gallery::ClassGallery;
use crate::model::{ClassRegistry, EmbeddingVector, ImageData};
use crate::scoring::ScoringConfig;

pub const MANIFEST_FILE: &str = "manifest.json";
pub const VECTORS_FILE: &str = "vectors.bin";

/// Prompt used to represent a class on the text side.
pub fn class_prompt(name: &str) -> String {
    format!("a photo of {name}")
}

pub fn build_class_prompts(registry: &ClassRegistry) -> Vec<String> {
    registry
        .classes()
        .iter()
        .map(|c| class_prompt(c.name()))
        .collect()
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
enum InputKind {
    Text,
    Image,
}

fn content_key(fingerprint: &str, kind: InputKind, normalized: bool, content: &[u8]) -> String {
    let kind = match kind {
        InputKind::Text => b"text".as_slice(),
        InputKind::Image => b"image".as_slice(),
    };
    let digest = Sha256::new()
        .chain_update(fingerprint.as_bytes())
        .chain_update([0u8])
        .chain_update(kind)
        .chain_update([0u8, normalized as u8])
        .chain_update(content)
        .finalize();
    hex::encode(digest)
}

#[derive(Debug, Clone, PartialEq, Eq, Default, Serialize, Deserialize)]
pub struct ProviderFingerprint {
    pub id: String,
    pub dim: usize,
}

#[derive(Debug, Clone, PartialEq, Eq, Default, Serialize, Deserialize)]
pub struct ProviderFingerprints {
    pub image_text: Option<ProviderFingerprint>,
    pub image: Option<ProviderFingerprint>,
}

#[derive(Debug, Clone, PartialEq, Default)]
pub struct FeatureStore {
    vectors: BTreeMap<String, EmbeddingVector>,
    text_keys: BTreeMap<String, String>,
    gallery_keys: BTreeMap<String, Vec<String>>,
    fingerprints: ProviderFingerprints,
}

#[derive(Debug, Serialize, Deserialize)]
struct ManifestEntry {
    offset: u64,
    length: u64,
    dim: usize,
    normalized: bool,
    fingerprint: String,
}

#[derive(Debug, Serialize, Deserialize)]
struct Manifest {
    version: u32,
    fingerprints: ProviderFingerprints,
    entries: BTreeMap<String, ManifestEntry>,
    text: BTreeMap<String, String>,
    gallery: BTreeMap<String, Vec<String>>,
}

impl FeatureStore {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn fingerprints(&self) -> &ProviderFingerprints {
        &self.fingerprints
    }

    pub fn text_feature(&self, canonical: &str) -> Option<&EmbeddingVector> {
        self.text_keys
            .get(canonical)
            .and_then(|k| self.vectors.get(k))
    }

    pub fn gallery_features(&self, canonical: &str) -> Vec<&EmbeddingVector> {
        self.gallery_keys
            .get(canonical)
            .map(|keys| keys.iter().filter_map(|k| self.vectors.get(k)).collect())
            .unwrap_or_default()
    }

    pub fn has_gallery(&self, canonical: &str) -> bool {
        self.gallery_keys.contains_key(canonical)
    }

    pub fn text_count(&self) -> usize {
        self.text_keys.len()
    }

    /// Text features in registry order; every class must be present.
    pub fn text_features_for(&self, registry: &ClassRegistry) -> Result<Vec<&EmbeddingVector>> {
        registry
            .classes()
            .iter()
            .map(|c| {
                self.text_feature(c.canonical()).ok_or_else(|| {
                    Error::Store(format!("no text feature for class {:?}", c.name()))
                })
            })
            .collect()
    }

    /// Owned gallery vectors in registry order; classes without a gallery map to empty.
    pub fn gallery_vectors_for(&self, registry: &ClassRegistry) -> Vec<Vec<EmbeddingVector>> {
        registry
            .classes()
            .iter()
            .map(|c| {
                self.gallery_features(c.canonical())
                    .into_iter()
                    .cloned()
                    .collect()
            })
            .collect()
    }

    pub(crate) fn galleries_for(&self, registry: &ClassRegistry) -> GalleryView {
        GalleryView(self.gallery_vectors_for(registry))
    }

    /// Drops vectors no longer referenced by either map.
    fn prune(&mut self) {
        let live: BTreeSet<&String> = self
            .text_keys
            .values()
            .chain(self.gallery_keys.values().flatten())
            .collect();
        let live: BTreeSet<String> = live.into_iter().cloned().collect();
        self.vectors.retain(|k, _| live.contains(k));
    }

    /// Embeds `"a photo of {name}"` for every registry class, reusing cached vectors.
    pub fn precompute_text_features(
        &mut self,
        registry: &ClassRegistry,
        embedder: &dyn ImageTextEmbedder,
        cfg: &ScoringConfig,
        cache: Option<&FeatureStore>,
    ) -> Result<()> {
        let fingerprint = embedder.fingerprint();
        let normalized = cfg.normalize_embeddings;
        let prompts = build_class_prompts(registry);
        let keys: Vec<String> = prompts
            .iter()
            .map(|p| content_key(&fingerprint, InputKind::Text, normalized, p.as_bytes()))
            .collect();

        let mut missing: Vec<(String, String)> = Vec::new();
        for (key, prompt) in keys.iter().zip(&prompts) {
            if self.vectors.contains_key(key) || missing.iter().any(|(k, _)| k == key) {
                continue;
            }
            if let Some(v) = cache.and_then(|c| c.vectors.get(key)) {
                self.vectors.insert(key.clone(), v.clone());
            } else {
                missing.push((key.clone(), prompt.clone()));
            }
        }
        if !missing.is_empty() {
            let texts: Vec<String> = missing.iter().map(|(_, p)| p.clone()).collect();
            let raw = embedder.embed_texts(&texts).map_err(|e| {
                Error::backend(
                    format!("embedding class prompts (first: {:?})", texts[0]),
                    e,
                )
            })?;
            if raw.len() != texts.len() {
                return Err(Error::Store(format!(
                    "embedder returned {} vectors for {} prompts",
                    raw.len(),
                    texts.len()
                )));
            }
            for ((key, _), v) in missing.into_iter().zip(raw) {
                self.vectors.insert(key, cfg.prepare(&v)?);
            }
        }

        self.text_keys.clear();
        for (class, key) in registry.classes().iter().zip(keys) {
            self.text_keys.insert(class.canonical().to_string(), key);
        }
        let dim = self.uniform_dim(self.text_keys.values(), embedder.dim())?;
        self.fingerprints.image_text = Some(ProviderFingerprint {
            id: fingerprint,
            dim,
        });
        self.prune();
        Ok(())
    }

    /// Embeds every accepted gallery image. Classes with empty galleries get no entry.
    pub fn precompute_gallery_features(
        &mut self,
        galleries: &[ClassGallery],
        embedder: &dyn ImageEmbedder,
        cfg: &ScoringConfig,
        cache: Option<&FeatureStore>,
    ) -> Result<()> {
        if galleries.iter().all(|g| g.images.is_empty()) {
            return Err(Error::Store("every class gallery is empty".into()));
        }
        let fingerprint = embedder.fingerprint();
        let normalized = cfg.normalize_embeddings;

        let mut per_class: Vec<(String, Vec<String>)> = Vec::new();
        let mut missing: BTreeMap<String, (&str, &ImageData)> = BTreeMap::new();
        for gallery in galleries {
            if gallery.images.is_empty() {
                continue;
            }
            let mut keys = Vec::with_capacity(gallery.images.len());
            for img in &gallery.images {
                let key = content_key(&fingerprint, InputKind::Image, normalized, &img.image.bytes);
                if !self.vectors.contains_key(&key) {
                    if let Some(v) = cache.and_then(|c| c.vectors.get(&key)) {
                        self.vectors.insert(key.clone(), v.clone());
                    } else {
                        missing
                            .entry(key.clone())
                            .or_insert((gallery.class.name(), &img.image));
                    }
                }
                keys.push(key);
            }
            per_class.push((gallery.class.canonical().to_string(), keys));
        }

        let computed: Vec<(String, EmbeddingVector)> = missing
            .into_par_iter()
            .map(|(key, (class, image))| {
                let v = embedder.embed_image(image).map_err(|e| {
                    Error::backend(format!("embedding gallery image of class {class:?}"), e)
                })?;
                Ok((key, cfg.prepare(&v)?))
            })
            .collect::<Result<_>>()?;
        self.vectors.extend(computed);

        self.gallery_keys = per_class.into_iter().collect();
        let dim = self.uniform_dim(self.gallery_keys.values().flatten(), embedder.dim())?;
        self.fingerprints.image = Some(ProviderFingerprint {
            id: fingerprint,
            dim,
        });
        self.prune();
        Ok(())
    }

    fn uniform_dim<'a>(
        &self,
        keys: impl Iterator<Item = &'a String>,
        declared: Option<usize>,
    ) -> Result<usize> {
        let mut dim = declared;
        for key in keys {
            let v = &self.vectors[key];
            match dim {
                None => dim = Some(v.dim()),
                Some(d) if d != v.dim() => {
                    return Err(Error::DimensionMismatch {
                        expected: d,
                        got: v.dim(),
                    })
                }
                Some(_) => {}
            }
        }
        dim.ok_or_else(|| Error::Store("no vectors to take a dimension from".into()))
    }

    /// Checks the store against a registry: every class has a text feature and
    /// gallery keys are registry classes.
    pub fn validate_for(&self, registry: &ClassRegistry) -> Result<()> {
        self.text_features_for(registry)?;
        for canonical in self.gallery_keys.keys() {
            if !registry.contains_canonical(canonical) {
                return Err(Error::Store(format!(
                    "gallery for unknown class {canonical:?}"
                )));
            }
        }
        Ok(())
    }

    pub fn save(&self, dir: &Path) -> Result<()> {
        let mut blob = Vec::new();
        let mut entries = BTreeMap::new();
        for (key, v) in &self.vectors {
            let offset = blob.len() as u64;
            for x in v.values() {
                blob.extend_from_slice(&x.to_le_bytes());
            }
            let fingerprint = self.fingerprint_of(key);
            entries.insert(
                key.clone(),
                ManifestEntry {
                    offset,
                    length: blob.len() as u64 - offset,
                    dim: v.dim(),
                    normalized: v.is_normalized(),
                    fingerprint,
                },
            );
        }
        let manifest = Manifest {
            version: 1,
            fingerprints: self.fingerprints.clone(),
            entries,
            text: self.text_keys.clone(),
            gallery: self.gallery_keys.clone(),
        };
        write_atomic(&dir.join(VECTORS_FILE), &blob)?;
        write_atomic(
            &dir.join(MANIFEST_FILE),
            serde_json::to_string_pretty(&manifest)?.as_bytes(),
        )
    }

    fn fingerprint_of(&self, key: &str) -> String {
        let in_gallery = self.gallery_keys.values().flatten().any(|k| k == key);
        let fp = if in_gallery {
            &self.fingerprints.image
        } else {
            &self.fingerprints.image_text
        };
        fp.as_ref().map(|f| f.id.clone()).unwrap_or_default()
    }

    pub fn load(dir: &Path) -> Result<Self> {
        let manifest: Manifest = serde_json::from_str(&read_to_string(&dir.join(MANIFEST_FILE))?)?;
        if manifest.version != 1 {
            return Err(Error::Store(format!(
                "unsupported store version {}",
                manifest.version
            )));
        }
        let blob_path = dir.join(VECTORS_FILE);
        let blob = std::fs::read(&blob_path).map_err(|e| Error::io(&blob_path, e))?;
        let mut vectors = BTreeMap::new();
        for (key, entry) in manifest.entries {
            let start = entry.offset as usize;
            let end = start + entry.length as usize;
            if end > blob.len() || entry.length as usize != entry.dim * 4 {
                return Err(Error::Store(format!(
                    "entry {key} is out of bounds or malformed"
                )));
            }
            let values = blob[start..end]
                .chunks_exact(4)
                .map(|c| f32::from_le_bytes([c[0], c[1], c[2], c[3]]))
                .collect();
            let v = if entry.normalized {
                EmbeddingVector::from_normalized(values)?
            } else {
                EmbeddingVector::new(values)
            };
            vectors.insert(key, v);
        }
        for key in manifest
            .text
            .values()
            .chain(manifest.gallery.values().flatten())
        {
            if !vectors.contains_key(key) {
                return Err(Error::Store(format!(
                    "index references missing vector {key}"
                )));
            }
        }
        Ok(FeatureStore {
            vectors,
            text_keys: manifest.text,
            gallery_keys: manifest.gallery,
            fingerprints: manifest.fingerprints,
        })
    }

    /// Copies every vector of `other` not already present. The class index is untouched,
    /// so the result serves as a cache across registries.
    pub fn absorb_vectors(&mut self, other: &FeatureStore) {
        for (k, v) in &other.vectors {
            self.vectors.entry(k.clone()).or_insert_with(|| v.clone());
        }
    }

    pub fn vector_count(&self) -> usize {
        self.vectors.len()
    }

    /// Loads a store if one exists at `dir`, for use as a cache.
    pub fn load_if_present(dir: &Path) -> Result<Option<Self>> {
        if dir.join(MANIFEST_FILE).exists() {
            Self::load(dir).map(Some)
        } else {
            Ok(None)
        }
    }
}

/// Gallery vectors in registry order, borrowed as slices for scoring.
pub(crate) struct GalleryView(Vec<Vec<EmbeddingVector>>);

impl GalleryView {
    pub fn iter(&self) -> impl Iterator<Item = &[EmbeddingVector]> {
        self.0.iter().map(Vec::as_slice)
    }

    pub fn slices(&self) -> Vec<&[EmbeddingVector]> {
        self.iter().collect()
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::backends::{MockEmbedder, MockImageGenerator, TextToImageClient};
    use crate::model::{ClassLabel, GeneratedImage, ImageStatus, Origin, SceneDescription};

    fn registry() -> ClassRegistry {
        let mut reg = ClassRegistry::from_closed(&["ladybug", "bighorn"]).unwrap();
        reg.append([ClassLabel::new("ox", Origin::VirtualSimilar).unwrap()]);
        reg
    }

    fn gallery(class: &str, texts: &[&str]) -> ClassGallery {
        let label = ClassLabel::closed(class).unwrap();
        let gen = MockImageGenerator::new("g");
        let images = texts
            .iter()
            .enumerate()
            .map(|(i, t)| {
                let desc = SceneDescription::new(label.clone(), i + 1, *t).unwrap();
                let mut img = GeneratedImage::pending(gen.generate(t).unwrap(), &desc);
                img.status = ImageStatus::Accepted;
                img
            })
            .collect();
        ClassGallery::new(label, images)
    }

    #[test]
    fn prompts_follow_registry_order() {
        assert_eq!(
            build_class_prompts(&registry()),
            vec!["a photo of ladybug", "a photo of bighorn", "a photo of ox"]
        );
    }

    #[test]
    fn text_features_cover_registry_and_cache() {
        let emb = MockEmbedder::hashed(8, "clip");
        let cfg = ScoringConfig::default();
        let mut store = FeatureStore::new();
        store
            .precompute_text_features(&registry(), &emb, &cfg, None)
            .unwrap();
        assert_eq!(store.text_count(), 3);
        assert_eq!(emb.calls(), 1);
        assert!(store.text_feature("ox").unwrap().is_normalized());

        let mut again = FeatureStore::new();
        again
            .precompute_text_features(&registry(), &emb, &cfg, Some(&store))
            .unwrap();
        assert_eq!(emb.calls(), 1);
        assert_eq!(again, store);

        let other = MockEmbedder::hashed(8, "clip-v2");
        let mut changed = FeatureStore::new();
        changed
            .precompute_text_features(&registry(), &other, &cfg, Some(&store))
            .unwrap();
        assert_eq!(other.calls(), 1);
        assert_ne!(changed.text_feature("ox"), store.text_feature("ox"));
    }

    #[test]
    fn gallery_features_and_dedup() {
        let emb = MockEmbedder::hashed(4, "dino");
        let cfg = ScoringConfig::default();
        let galleries = vec![
            gallery("ladybug", &["a", "b", "a"]),
            ClassGallery::new(ClassLabel::closed("bighorn").unwrap(), vec![]),
        ];
        let mut store = FeatureStore::new();
        store
            .precompute_gallery_features(&galleries, &emb, &cfg, None)
            .unwrap();
        let feats = store.gallery_features("ladybug");
        assert_eq!(feats.len(), 3);
        assert_eq!(feats[0], feats[2]);
        assert_eq!(emb.calls(), 2);
        assert!(!store.has_gallery("bighorn"));

        let empty = vec![ClassGallery::new(ClassLabel::closed("x").unwrap(), vec![])];
        assert!(FeatureStore::new()
            .precompute_gallery_features(&empty, &emb, &cfg, None)
            .is_err());
    }

    #[test]
    fn persistence_is_bit_exact() {
        let dir = tempfile::tempdir().unwrap();
        let cfg = ScoringConfig::default();
        let mut store = FeatureStore::new();
        store
            .precompute_text_features(&registry(), &MockEmbedder::hashed(6, "clip"), &cfg, None)
            .unwrap();
        store
            .precompute_gallery_features(
                &[gallery("ox", &["x", "y"])],
                &MockEmbedder::hashed(5, "dino"),
                &cfg,
                None,
            )
            .unwrap();
        store.save(dir.path()).unwrap();
        let loaded = FeatureStore::load(dir.path()).unwrap();
        assert_eq!(loaded, store);
        for (a, b) in loaded.vectors.values().zip(store.vectors.values()) {
            let bits =
                |v: &EmbeddingVector| v.values().iter().map(|x| x.to_bits()).collect::<Vec<_>>();
            assert_eq!(bits(a), bits(b));
        }
        let again = tempfile::tempdir().unwrap();
        loaded.save(again.path()).unwrap();
        assert_eq!(
            std::fs::read(dir.path().join(VECTORS_FILE)).unwrap(),
            std::fs::read(again.path().join(VECTORS_FILE)).unwrap()
        );
        assert_eq!(
            std::fs::read(dir.path().join(MANIFEST_FILE)).unwrap(),
            std::fs::read(again.path().join(MANIFEST_FILE)).unwrap()
        );
    }

    #[test]
    fn missing_text_feature_is_reported() {
        let store = FeatureStore::new();
        assert!(store.text_features_for(&registry()).is_err());
    }
}
