//! Closed-set scoring: text-alignment and gallery-alignment probabilities,
//! their convex fusion, and the closed-set score `S`.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::model::{ClassRegistry, EmbeddingVector};
use crate::store::FeatureStore;

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct ScoringConfig {
    /// Weight of the text-alignment path in the fused distribution.
    pub alpha: f64,
    /// Logit scale for image-text similarities.
    pub tau_text: f64,
    /// Logit scale for image-image similarities.
    pub tau_image: f64,
    pub normalize_embeddings: bool,
}

impl Default for ScoringConfig {
    fn default() -> Self {
        ScoringConfig {
            alpha: 0.6,
            tau_text: 100.0,
            tau_image: 100.0,
            normalize_embeddings: true,
        }
    }
}

impl ScoringConfig {
    pub fn validate(&self) -> Result<()> {
        if !(0.0..=1.0).contains(&self.alpha) {
            return Err(Error::Config(format!(
                "alpha must lie in [0, 1], got {}",
                self.alpha
            )));
        }
        if !(self.tau_text > 0.0 && self.tau_image > 0.0) {
            return Err(Error::Config("logit scales must be positive".into()));
        }
        Ok(())
    }

    /// Applies the configured normalization policy to a provider output.
    pub fn prepare(&self, v: &EmbeddingVector) -> Result<EmbeddingVector> {
        if self.normalize_embeddings {
            v.normalize()
        } else {
            Ok(v.clone())
        }
    }
}

/// Max-subtracted softmax. `-inf` logits receive probability exactly zero.
pub fn softmax(logits: &[f64]) -> Result<Vec<f64>> {
    if logits.is_empty() {
        return Err(Error::Scoring("softmax of an empty vector".into()));
    }
    if logits.iter().any(|x| x.is_nan() || *x == f64::INFINITY) {
        return Err(Error::Scoring(
            "softmax logits must be finite or -inf".into(),
        ));
    }
    let max = logits.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    if max == f64::NEG_INFINITY {
        return Err(Error::Scoring("every logit is -inf".into()));
    }
    let exps: Vec<f64> = logits.iter().map(|&x| (x - max).exp()).collect();
    let total: f64 = exps.iter().sum();
    Ok(exps.into_iter().map(|e| e / total).collect())
}

fn similarity(a: &EmbeddingVector, b: &EmbeddingVector, cfg: &ScoringConfig) -> Result<f64> {
    if cfg.normalize_embeddings {
        cfg.prepare(a)?.dot(&cfg.prepare(b)?)
    } else {
        a.dot(b)
    }
}

/// Scaled image-text similarities against per-class text features, in the order given.
pub fn text_logits(
    test: &EmbeddingVector,
    text_features: &[&EmbeddingVector],
    cfg: &ScoringConfig,
) -> Result<Vec<f64>> {
    let test = cfg.prepare(test)?;
    text_features
        .iter()
        .map(|f| Ok(cfg.tau_text * similarity(&test, f, cfg)?))
        .collect()
}

/// Per-class mean of scaled image-image similarities. Empty galleries yield `-inf`.
pub fn gallery_logits(
    test: &EmbeddingVector,
    galleries: &[&[EmbeddingVector]],
    cfg: &ScoringConfig,
) -> Result<Vec<f64>> {
    let test = cfg.prepare(test)?;
    galleries
        .iter()
        .map(|gallery| {
            if gallery.is_empty() {
                return Ok(f64::NEG_INFINITY);
            }
            let mut sum = 0.0;
            for f in gallery.iter() {
                sum += cfg.tau_image * similarity(&test, f, cfg)?;
            }
            Ok(sum / gallery.len() as f64)
        })
        .collect()
}

/// Text-alignment distribution over every registry class.
pub fn clip_path(
    test: &EmbeddingVector,
    store: &FeatureStore,
    registry: &ClassRegistry,
    cfg: &ScoringConfig,
) -> Result<Vec<f64>> {
    let features = store.text_features_for(registry)?;
    softmax(&text_logits(test, &features, cfg)?)
}

/// Gallery-alignment distribution. Returns the pre-softmax logits alongside.
pub fn dino_path(
    test: &EmbeddingVector,
    store: &FeatureStore,
    registry: &ClassRegistry,
    cfg: &ScoringConfig,
) -> Result<(Vec<f64>, Vec<f64>)> {
    let galleries = store.galleries_for(registry);
    let slices = galleries.slices();
    if slices.iter().all(|g| g.is_empty()) {
        return Err(Error::Scoring("every class gallery is empty".into()));
    }
    let logits = gallery_logits(test, &slices, cfg)?;
    Ok((softmax(&logits)?, logits))
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ScoreBreakdown {
    pub p_clip: Vec<f64>,
    pub p_dino: Vec<f64>,
    /// Pre-softmax gallery logits; `None` marks a class without a gallery.
    pub l_dino: Vec<Option<f64>>,
    pub p_inc: Vec<f64>,
    /// Closed-set score: the max of `p_inc` over the closed prefix.
    pub score: f64,
    pub predicted_index: usize,
    pub predicted_closed_class: String,
}

/// Fuses the two distributions and reads the closed-set score off the closed prefix.
pub fn fuse_and_score(
    p_clip: &[f64],
    p_dino: &[f64],
    registry: &ClassRegistry,
    cfg: &ScoringConfig,
) -> Result<ScoreBreakdown> {
    let n = registry.len();
    if p_clip.len() != n || p_dino.len() != n {
        return Err(Error::Scoring(format!(
            "probability vectors have lengths {} and {}, registry has {n} classes",
            p_clip.len(),
            p_dino.len()
        )));
    }
    let alpha = cfg.alpha;
    let p_inc: Vec<f64> = p_clip
        .iter()
        .zip(p_dino)
        .map(|(&c, &d)| alpha * c + (1.0 - alpha) * d)
        .collect();
    let (predicted_index, score) = p_inc[..registry.closed_count()]
        .iter()
        .copied()
        .enumerate()
        .fold((0, f64::NEG_INFINITY), |best, (i, p)| {
            if p > best.1 {
                (i, p)
            } else {
                best
            }
        });
    Ok(ScoreBreakdown {
        p_clip: p_clip.to_vec(),
        p_dino: p_dino.to_vec(),
        l_dino: vec![None; n],
        p_inc,
        score,
        predicted_index,
        predicted_closed_class: registry.classes()[predicted_index].name().to_string(),
    })
}

/// Scores one test image given its two provider embeddings.
pub fn score_image(
    clip_embedding: &EmbeddingVector,
    dino_embedding: &EmbeddingVector,
    store: &FeatureStore,
    registry: &ClassRegistry,
    cfg: &ScoringConfig,
) -> Result<ScoreBreakdown> {
    let p_clip = clip_path(clip_embedding, store, registry, cfg)?;
    let (p_dino, l_dino) = dino_path(dino_embedding, store, registry, cfg)?;
    let mut breakdown = fuse_and_score(&p_clip, &p_dino, registry, cfg)?;
    breakdown.l_dino = l_dino
        .into_iter()
        .map(|l| l.is_finite().then_some(l))
        .collect();
    Ok(breakdown)
}
