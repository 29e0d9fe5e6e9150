//! Domain types shared by every pipeline stage.
//!
//! The [`ClassRegistry`] keeps closed-set classes as a pinned prefix, so any
//! probability vector indexed by registry position has its closed-set entries
//! at `0..closed_count`.

use std::collections::HashSet;
use std::fmt;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// Lowercases, collapses interior whitespace runs to one space and trims.
pub fn canonicalize(name: &str) -> Result<String> {
    let canonical = name
        .split_whitespace()
        .map(str::to_lowercase)
        .collect::<Vec<_>>()
        .join(" ");
    if canonical.is_empty() {
        return Err(Error::EmptyName);
    }
    Ok(canonical)
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Origin {
    Closed,
    VirtualSimilar,
    VirtualDissimilar,
}

impl Origin {
    pub fn is_virtual(self) -> bool {
        !matches!(self, Origin::Closed)
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Hash, Serialize)]
pub struct ClassLabel {
    name: String,
    canonical: String,
    origin: Origin,
}

impl ClassLabel {
    pub fn new(name: &str, origin: Origin) -> Result<Self> {
        let canonical = canonicalize(name)?;
        Ok(ClassLabel {
            name: name.trim().to_string(),
            canonical,
            origin,
        })
    }

    pub fn closed(name: &str) -> Result<Self> {
        Self::new(name, Origin::Closed)
    }

    pub fn name(&self) -> &str {
        &self.name
    }

    pub fn canonical(&self) -> &str {
        &self.canonical
    }

    pub fn origin(&self) -> Origin {
        self.origin
    }

    pub fn with_origin(&self, origin: Origin) -> Self {
        ClassLabel {
            origin,
            ..self.clone()
        }
    }
}

impl fmt::Display for ClassLabel {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(&self.name)
    }
}

#[derive(Deserialize)]
struct RawLabel {
    name: String,
    canonical: String,
    origin: Origin,
}

impl<'de> Deserialize<'de> for ClassLabel {
    fn deserialize<D: serde::Deserializer<'de>>(
        deserializer: D,
    ) -> std::result::Result<Self, D::Error> {
        use serde::de::Error as _;
        let raw = RawLabel::deserialize(deserializer)?;
        let label = ClassLabel::new(&raw.name, raw.origin).map_err(D::Error::custom)?;
        if label.canonical != raw.canonical {
            return Err(D::Error::custom(format!(
                "canonical {:?} does not match name {:?}",
                raw.canonical, raw.name
            )));
        }
        Ok(label)
    }
}

/// Ordered class list. Closed classes always precede virtual ones and
/// canonical names are unique.
#[derive(Debug, Clone, PartialEq, Eq, Default)]
pub struct ClassRegistry {
    classes: Vec<ClassLabel>,
    closed_count: usize,
}

impl ClassRegistry {
    /// Builds a registry from closed-set class names. Duplicate names are an error here,
    /// since a closed-set class list is user input rather than model output.
    pub fn from_closed<S: AsRef<str>>(names: &[S]) -> Result<Self> {
        let mut seen = HashSet::new();
        let mut classes = Vec::with_capacity(names.len());
        for name in names {
            let label = ClassLabel::closed(name.as_ref())?;
            if !seen.insert(label.canonical.clone()) {
                return Err(Error::Registry(format!(
                    "duplicate closed class {:?}",
                    label.name
                )));
            }
            classes.push(label);
        }
        Self::from_labels(classes)
    }

    /// Validates and wraps an already ordered label list.
    pub fn from_labels(classes: Vec<ClassLabel>) -> Result<Self> {
        let closed_count = classes
            .iter()
            .take_while(|c| c.origin == Origin::Closed)
            .count();
        if closed_count == 0 {
            return Err(Error::Registry(
                "at least one closed class is required".into(),
            ));
        }
        if classes[closed_count..]
            .iter()
            .any(|c| c.origin == Origin::Closed)
        {
            return Err(Error::Registry(
                "closed classes must precede virtual classes".into(),
            ));
        }
        let mut seen = HashSet::new();
        for c in &classes {
            if !seen.insert(c.canonical.as_str()) {
                return Err(Error::Registry(format!(
                    "duplicate canonical name {:?}",
                    c.canonical
                )));
            }
        }
        Ok(ClassRegistry {
            classes,
            closed_count,
        })
    }

    pub fn classes(&self) -> &[ClassLabel] {
        &self.classes
    }

    pub fn closed(&self) -> &[ClassLabel] {
        &self.classes[..self.closed_count]
    }

    pub fn virtual_classes(&self) -> &[ClassLabel] {
        &self.classes[self.closed_count..]
    }

    pub fn closed_count(&self) -> usize {
        self.closed_count
    }

    pub fn len(&self) -> usize {
        self.classes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.classes.is_empty()
    }

    pub fn names(&self) -> Vec<&str> {
        self.classes.iter().map(|c| c.name()).collect()
    }

    pub fn contains_canonical(&self, canonical: &str) -> bool {
        self.classes.iter().any(|c| c.canonical == canonical)
    }

    pub fn index_of(&self, canonical: &str) -> Option<usize> {
        self.classes.iter().position(|c| c.canonical == canonical)
    }

    pub fn get(&self, index: usize) -> Option<&ClassLabel> {
        self.classes.get(index)
    }

    /// Appends virtual candidates whose canonical name is new. Returns the names
    /// that were rejected as duplicates, in input order.
    ///
    /// Closed-origin candidates are rejected as well; the closed prefix never grows.
    pub fn append(&mut self, candidates: impl IntoIterator<Item = ClassLabel>) -> Vec<String> {
        let mut rejects = Vec::new();
        for candidate in candidates {
            if candidate.origin == Origin::Closed || self.contains_canonical(&candidate.canonical) {
                log::debug!("dropping duplicate class {:?}", candidate.name);
                rejects.push(candidate.name);
                continue;
            }
            self.classes.push(candidate);
        }
        rejects
    }

    pub fn to_json(&self) -> Result<String> {
        Ok(serde_json::to_string_pretty(&self.classes)?)
    }

    pub fn from_json(text: &str) -> Result<Self> {
        let classes: Vec<ClassLabel> = serde_json::from_str(text)?;
        Self::from_labels(classes)
    }
}

impl Serialize for ClassRegistry {
    fn serialize<S: serde::Serializer>(
        &self,
        serializer: S,
    ) -> std::result::Result<S::Ok, S::Error> {
        self.classes.serialize(serializer)
    }
}

impl<'de> Deserialize<'de> for ClassRegistry {
    fn deserialize<D: serde::Deserializer<'de>>(
        deserializer: D,
    ) -> std::result::Result<Self, D::Error> {
        use serde::de::Error as _;
        let classes = Vec::<ClassLabel>::deserialize(deserializer)?;
        ClassRegistry::from_labels(classes).map_err(D::Error::custom)
    }
}

/// The `k`-th scene description generated for a class, at a given revision.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct SceneDescription {
    pub class: ClassLabel,
    pub index_k: usize,
    pub text: String,
    pub revision: u32,
}

impl SceneDescription {
    pub fn new(class: ClassLabel, index_k: usize, text: impl Into<String>) -> Result<Self> {
        let text = text.into();
        if text.trim().is_empty() {
            return Err(Error::Registry(format!(
                "empty description for class {:?}",
                class.name()
            )));
        }
        Ok(SceneDescription {
            class,
            index_k,
            text,
            revision: 0,
        })
    }

    /// Next revision carrying replacement text.
    pub fn refined(&self, text: impl Into<String>) -> Result<Self> {
        let text = text.into();
        if text.trim().is_empty() {
            return Err(Error::Registry(format!(
                "empty refined description for class {:?}",
                self.class.name()
            )));
        }
        Ok(SceneDescription {
            class: self.class.clone(),
            index_k: self.index_k,
            text,
            revision: self.revision + 1,
        })
    }
}

/// Raw image bytes plus a format tag such as `png`.
#[derive(Clone, PartialEq, Eq)]
pub struct ImageData {
    pub bytes: Vec<u8>,
    pub format: String,
}

impl ImageData {
    pub fn new(bytes: Vec<u8>, format: impl Into<String>) -> Self {
        ImageData {
            bytes,
            format: format.into(),
        }
    }

    pub fn png(bytes: Vec<u8>) -> Self {
        Self::new(bytes, "png")
    }
}

impl fmt::Debug for ImageData {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.debug_struct("ImageData")
            .field("format", &self.format)
            .field("len", &self.bytes.len())
            .finish()
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct SlotRef {
    pub class: String,
    pub index_k: usize,
    pub revision: u32,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ImageStatus {
    Pending,
    Accepted,
    Discarded,
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct GeneratedImage {
    pub image: ImageData,
    pub source: SlotRef,
    pub status: ImageStatus,
}

impl GeneratedImage {
    pub fn pending(image: ImageData, desc: &SceneDescription) -> Self {
        GeneratedImage {
            image,
            source: SlotRef {
                class: desc.class.canonical().to_string(),
                index_k: desc.index_k,
                revision: desc.revision,
            },
            status: ImageStatus::Pending,
        }
    }
}

const NORM_TOLERANCE: f64 = 1e-5;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EmbeddingVector {
    values: Vec<f32>,
    normalized: bool,
}

impl EmbeddingVector {
    pub fn new(values: Vec<f32>) -> Self {
        EmbeddingVector {
            values,
            normalized: false,
        }
    }

    /// Wraps values that are already unit length. Fails if they are not.
    pub fn from_normalized(values: Vec<f32>) -> Result<Self> {
        let v = EmbeddingVector {
            values,
            normalized: true,
        };
        if (v.norm() - 1.0).abs() > NORM_TOLERANCE {
            return Err(Error::Scoring(format!("vector norm {} is not 1", v.norm())));
        }
        Ok(v)
    }

    pub fn values(&self) -> &[f32] {
        &self.values
    }

    pub fn dim(&self) -> usize {
        self.values.len()
    }

    pub fn is_normalized(&self) -> bool {
        self.normalized
    }

    pub fn norm(&self) -> f64 {
        self.values
            .iter()
            .map(|&x| (x as f64) * (x as f64))
            .sum::<f64>()
            .sqrt()
    }

    pub fn normalize(&self) -> Result<Self> {
        if self.normalized {
            return Ok(self.clone());
        }
        let norm = self.norm();
        if !norm.is_finite() || norm == 0.0 {
            return Err(Error::Scoring(
                "cannot normalize a zero or non-finite vector".into(),
            ));
        }
        Ok(EmbeddingVector {
            values: self
                .values
                .iter()
                .map(|&x| (x as f64 / norm) as f32)
                .collect(),
            normalized: true,
        })
    }

    pub fn dot(&self, other: &EmbeddingVector) -> Result<f64> {
        if self.dim() != other.dim() {
            return Err(Error::DimensionMismatch {
                expected: self.dim(),
                got: other.dim(),
            });
        }
        Ok(self
            .values
            .iter()
            .zip(&other.values)
            .map(|(&a, &b)| a as f64 * b as f64)
            .sum())
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    #[test]
    fn canonicalize_examples() {
        assert_eq!(
            canonicalize("  Tortoise   Beetle ").unwrap(),
            "tortoise beetle"
        );
        assert_eq!(canonicalize("ladybug").unwrap(), "ladybug");
        assert_eq!(canonicalize("Ladybird Spider").unwrap(), "ladybird spider");
        assert!(matches!(canonicalize(" \t\n "), Err(Error::EmptyName)));
    }

    #[test]
    fn append_examples() {
        let mut reg = ClassRegistry::from_closed(&["ladybug"]).unwrap();
        let rejects =
            reg.append([ClassLabel::new("tortoise beetle", Origin::VirtualSimilar).unwrap()]);
        assert!(rejects.is_empty());
        assert_eq!(reg.names(), vec!["ladybug", "tortoise beetle"]);
        assert_eq!(reg.classes()[1].origin(), Origin::VirtualSimilar);

        let mut reg = ClassRegistry::from_closed(&["ladybug"]).unwrap();
        let rejects = reg.append([ClassLabel::new("Ladybug", Origin::VirtualSimilar).unwrap()]);
        assert_eq!(rejects, vec!["Ladybug"]);
        assert_eq!(reg.len(), 1);

        let mut reg = ClassRegistry::from_labels(vec![
            ClassLabel::closed("a").unwrap(),
            ClassLabel::new("b", Origin::VirtualSimilar).unwrap(),
        ])
        .unwrap();
        let rejects =
            reg.append(["b", "c"].map(|n| ClassLabel::new(n, Origin::VirtualSimilar).unwrap()));
        assert_eq!(rejects, vec!["b"]);
        assert_eq!(reg.names(), vec!["a", "b", "c"]);
    }

    #[test]
    fn registry_rejects_bad_layouts() {
        assert!(ClassRegistry::from_labels(vec![]).is_err());
        assert!(ClassRegistry::from_labels(vec![
            ClassLabel::closed("a").unwrap(),
            ClassLabel::new("b", Origin::VirtualSimilar).unwrap(),
            ClassLabel::closed("c").unwrap(),
        ])
        .is_err());
        assert!(ClassRegistry::from_closed(&["A", "a "]).is_err());
    }

    #[test]
    fn registry_json_round_trip() {
        let mut reg = ClassRegistry::from_closed(&["Ladybug", "bighorn"]).unwrap();
        reg.append([
            ClassLabel::new("Tortoise  Beetle", Origin::VirtualSimilar).unwrap(),
            ClassLabel::new("skyscraper", Origin::VirtualDissimilar).unwrap(),
        ]);
        let json = reg.to_json().unwrap();
        let back = ClassRegistry::from_json(&json).unwrap();
        assert_eq!(back, reg);
        assert_eq!(back.to_json().unwrap(), json);
        assert!(json.contains("\"virtual_dissimilar\""));
    }

    #[test]
    fn tampered_canonical_is_rejected() {
        let json = r#"[{"name":"Ladybug","canonical":"lady bug","origin":"closed"}]"#;
        assert!(ClassRegistry::from_json(json).is_err());
    }

    #[test]
    fn description_revisions_increment() {
        let c = ClassLabel::closed("ladybug").unwrap();
        let d = SceneDescription::new(c, 1, "a ladybug on a leaf").unwrap();
        let r = d.refined("a red ladybug on a leaf").unwrap();
        assert_eq!(r.revision, 1);
        assert_eq!(r.refined("x").unwrap().revision, 2);
        assert!(d.refined("  ").is_err());
    }

    #[test]
    fn normalization() {
        let v = EmbeddingVector::new(vec![3.0, 4.0]).normalize().unwrap();
        assert!((v.norm() - 1.0).abs() < 1e-6);
        assert!(v.is_normalized());
        assert!(EmbeddingVector::new(vec![0.0, 0.0]).normalize().is_err());
        assert!(EmbeddingVector::from_normalized(vec![1.0, 1.0]).is_err());
    }

    proptest! {
        #[test]
        fn canonicalize_is_idempotent(s in "[ a-zA-Z\t]{0,24}") {
            if let Ok(c) = canonicalize(&s) {
                prop_assert_eq!(canonicalize(&c).unwrap(), c);
            }
        }

        #[test]
        fn appends_are_monotone_and_unique(names in proptest::collection::vec("[a-cA-C ]{1,4}", 0..20)) {
            let mut reg = ClassRegistry::from_closed(&["a", "b"]).unwrap();
            for n in &names {
                let before = reg.len();
                if let Ok(label) = ClassLabel::new(n, Origin::VirtualSimilar) {
                    reg.append([label]);
                }
                prop_assert!(reg.len() >= before);
                prop_assert_eq!(reg.closed_count(), 2);
            }
            let mut seen = std::collections::HashSet::new();
            for c in reg.classes() {
                prop_assert!(seen.insert(c.canonical().to_string()));
            }
        }
    }
}
