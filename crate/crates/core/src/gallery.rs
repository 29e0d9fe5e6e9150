//! Per-class image galleries built through a detect, refine, regenerate loop.
//!
//! Each of the `K` description slots yields one image. In the full mode the
//! image is checked against every class prompt with the image-text embedder;
//! when another class wins the argmax, the description is refined with that
//! class as feedback and the image regenerated. Slots still misaligned once
//! the assessment budget is spent are discarded.

use std::path::Path;

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::backends::{ImageTextEmbedder, LlmClient, TextToImageClient};
use crate::error::{Error, Result};
use crate::fsutil::{class_dir_name, read_to_string, write_atomic};
use crate::llm::parse::{parse_numbered_items, parse_refined};
use crate::llm::{ChatTranscript, PromptTemplates, TemplateId};
use crate::model::{
    ClassLabel, ClassRegistry, GeneratedImage, ImageData, ImageStatus, Origin, SceneDescription,
};
use crate::scoring::{softmax, text_logits, ScoringConfig};
use crate::store::FeatureStore;

pub const MANIFEST_FILE: &str = "manifest.json";

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum GalleryMode {
    Full,
    NoCrossAssess,
    CheckAndDiscard,
    CheckAndNaiveRefine,
}

impl std::str::FromStr for GalleryMode {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "full" => Ok(GalleryMode::Full),
            "no-cross-assess" => Ok(GalleryMode::NoCrossAssess),
            "check-and-discard" => Ok(GalleryMode::CheckAndDiscard),
            "check-and-naive-refine" => Ok(GalleryMode::CheckAndNaiveRefine),
            other => Err(Error::Config(format!("unknown gallery mode {other:?}"))),
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(default)]
pub struct GalleryConfig {
    pub k: usize,
    /// Total assessments allowed per slot, the first check included.
    pub max_crossassess_cycles: usize,
    pub mode: GalleryMode,
}

impl Default for GalleryConfig {
    fn default() -> Self {
        GalleryConfig {
            k: 10,
            max_crossassess_cycles: 3,
            mode: GalleryMode::Full,
        }
    }
}

impl GalleryConfig {
    pub fn validate(&self) -> Result<()> {
        if self.k < 1 {
            return Err(Error::Config("k must be at least 1".into()));
        }
        if self.max_crossassess_cycles < 1 {
            return Err(Error::Config(
                "max_crossassess_cycles must be at least 1".into(),
            ));
        }
        Ok(())
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Verdict {
    Accurate,
    LessAccurate,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AssessmentResult {
    pub p_assess: Vec<f64>,
    pub argmax_index: usize,
    pub argmax_class: String,
    pub verdict: Verdict,
    pub confused_class: Option<String>,
}

/// Checks which class prompt an image aligns with best. A tie with the
/// desired class counts as accurate.
pub fn assess_image(
    image: &ImageData,
    desired: &ClassLabel,
    registry: &ClassRegistry,
    store: &FeatureStore,
    embedder: &dyn ImageTextEmbedder,
    scoring: &ScoringConfig,
) -> Result<AssessmentResult> {
    let desired_index = registry
        .index_of(desired.canonical())
        .ok_or_else(|| Error::UnknownTarget(desired.name().to_string()))?;
    let features = store.text_features_for(registry)?;
    let embedding = embedder
        .embed_image(image)
        .map_err(|e| Error::backend(format!("assessing image of class {:?}", desired.name()), e))?;
    let p_assess = softmax(&text_logits(&embedding, &features, scoring)?)?;
    Ok(assessment_from_probs(p_assess, desired_index, registry))
}

fn assessment_from_probs(
    p_assess: Vec<f64>,
    desired_index: usize,
    registry: &ClassRegistry,
) -> AssessmentResult {
    let max = p_assess.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    let argmax_index = if p_assess[desired_index] >= max {
        desired_index
    } else {
        p_assess
            .iter()
            .position(|&p| p == max)
            .unwrap_or(desired_index)
    };
    let argmax_class = registry.classes()[argmax_index].name().to_string();
    let (verdict, confused_class) = if argmax_index == desired_index {
        (Verdict::Accurate, None)
    } else {
        (Verdict::LessAccurate, Some(argmax_class.clone()))
    };
    AssessmentResult {
        p_assess,
        argmax_index,
        argmax_class,
        verdict,
        confused_class,
    }
}

/// Asks for `k` scene descriptions, re-prompting once for any shortfall.
pub fn generate_descriptions(
    class: &ClassLabel,
    k: usize,
    chat: &dyn LlmClient,
    templates: &PromptTemplates,
) -> Result<(Vec<SceneDescription>, ChatTranscript)> {
    if k < 1 {
        return Err(Error::Config("k must be at least 1".into()));
    }
    let mut transcript =
        ChatTranscript::new(format!("descriptions:{}", class.canonical()), Some(class));
    let fail = |e| Error::backend(format!("descriptions for class {:?}", class.name()), e);
    let k_text = k.to_string();
    let prompt = templates.render(
        TemplateId::QDescriptions,
        &[("K", &k_text), ("class", class.name())],
    )?;
    let mut items = parse_numbered_items(&transcript.ask(chat, prompt).map_err(fail)?);

    if items.len() < k {
        let remainder = (k - items.len()).to_string();
        let prompt = templates.render(
            TemplateId::QDescriptionsMore,
            &[("K", &remainder), ("class", class.name())],
        )?;
        items.extend(parse_numbered_items(
            &transcript.ask(chat, prompt).map_err(fail)?,
        ));
    }
    if items.len() < k {
        return Err(Error::DescriptionShortfall {
            class: class.name().to_string(),
            expected: k,
            got: items.len(),
        });
    }
    items.truncate(k);
    let descriptions = items
        .into_iter()
        .enumerate()
        .map(|(i, text)| SceneDescription::new(class.clone(), i + 1, text))
        .collect::<Result<Vec<_>>>()?;
    Ok((descriptions, transcript))
}

pub fn generate_image(
    desc: &SceneDescription,
    generator: &dyn TextToImageClient,
) -> Result<GeneratedImage> {
    if desc.text.trim().is_empty() {
        return Err(Error::Registry(
            "cannot generate from an empty description".into(),
        ));
    }
    let image = generator.generate(&desc.text).map_err(|e| {
        Error::backend(
            format!(
                "generating image {} of class {:?}",
                desc.index_k,
                desc.class.name()
            ),
            e,
        )
    })?;
    Ok(GeneratedImage::pending(image, desc))
}

/// Rewrites a description toward `target`. With `confused` set, the prompt names
/// the class the image was mistaken for; without it, the refinement is feedback-free.
pub fn refine_description(
    desc: &SceneDescription,
    target: &ClassLabel,
    confused: Option<&str>,
    chat: &dyn LlmClient,
    templates: &PromptTemplates,
) -> Result<(SceneDescription, ChatTranscript)> {
    let prompt = match confused {
        Some(u) => {
            if crate::model::canonicalize(u)? == target.canonical() {
                return Err(Error::Registry(
                    "confused class must differ from the target".into(),
                ));
            }
            templates.render(
                TemplateId::QRefine,
                &[
                    ("desc", &desc.text),
                    ("confused", u),
                    ("target", target.name()),
                ],
            )?
        }
        None => templates.render(
            TemplateId::QNaiveRefine,
            &[("desc", &desc.text), ("target", target.name())],
        )?,
    };
    let mut transcript = ChatTranscript::new(
        format!(
            "refine:{}:{}:rev{}",
            target.canonical(),
            desc.index_k,
            desc.revision + 1
        ),
        Some(target),
    );
    let answer = transcript.ask(chat, prompt).map_err(|e| {
        Error::backend(
            format!(
                "refining description {} of {:?}",
                desc.index_k,
                target.name()
            ),
            e,
        )
    })?;
    Ok((desc.refined(parse_refined(&answer))?, transcript))
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum SlotStatus {
    Accepted,
    Discarded,
    Failed,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RevisionRecord {
    pub revision: u32,
    pub text: String,
    pub image_path: Option<String>,
    pub assessment: Option<AssessmentResult>,
    #[serde(skip)]
    pub image: Option<ImageData>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SlotRecord {
    pub index_k: usize,
    pub status: SlotStatus,
    pub revisions: Vec<RevisionRecord>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub error: Option<String>,
}

impl SlotRecord {
    pub fn assessments(&self) -> usize {
        self.revisions
            .iter()
            .filter(|r| r.assessment.is_some())
            .count()
    }

    pub fn refinements(&self) -> usize {
        self.revisions.len().saturating_sub(1)
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct ClassGallery {
    pub class: ClassLabel,
    /// Accepted images, in slot order.
    pub images: Vec<GeneratedImage>,
    pub discarded_count: usize,
    pub failed_count: usize,
    pub slots: Vec<SlotRecord>,
    pub transcripts: Vec<ChatTranscript>,
}

impl ClassGallery {
    pub fn new(class: ClassLabel, images: Vec<GeneratedImage>) -> Self {
        ClassGallery {
            class,
            images,
            discarded_count: 0,
            failed_count: 0,
            slots: Vec::new(),
            transcripts: Vec::new(),
        }
    }

    /// Set when no slot produced an accepted image.
    pub fn empty_warning(&self) -> bool {
        self.images.is_empty()
    }
}

pub struct GalleryContext<'a> {
    pub registry: &'a ClassRegistry,
    pub store: &'a FeatureStore,
    pub chat: &'a dyn LlmClient,
    pub generator: &'a dyn TextToImageClient,
    pub embedder: &'a dyn ImageTextEmbedder,
    pub templates: &'a PromptTemplates,
    pub scoring: &'a ScoringConfig,
}

impl GalleryContext<'_> {
    fn assess(&self, image: &ImageData, class: &ClassLabel) -> Result<AssessmentResult> {
        assess_image(
            image,
            class,
            self.registry,
            self.store,
            self.embedder,
            self.scoring,
        )
    }

    fn revision(desc: &SceneDescription, image: &GeneratedImage) -> RevisionRecord {
        RevisionRecord {
            revision: desc.revision,
            text: desc.text.clone(),
            image_path: None,
            assessment: None,
            image: Some(image.image.clone()),
        }
    }

    fn run_slot(
        &self,
        desc: SceneDescription,
        cfg: &GalleryConfig,
    ) -> (SlotRecord, Vec<ChatTranscript>) {
        let class = desc.class.clone();
        let mut transcripts = Vec::new();
        let mut slot = SlotRecord {
            index_k: desc.index_k,
            status: SlotStatus::Failed,
            revisions: Vec::new(),
            error: None,
        };
        let mut image = match generate_image(&desc, self.generator) {
            Ok(img) => img,
            Err(e) => {
                slot.revisions.push(RevisionRecord {
                    revision: desc.revision,
                    text: desc.text.clone(),
                    image_path: None,
                    assessment: None,
                    image: None,
                });
                slot.error = Some(e.to_string());
                return (slot, transcripts);
            }
        };
        slot.revisions.push(Self::revision(&desc, &image));

        if cfg.mode == GalleryMode::NoCrossAssess {
            slot.status = SlotStatus::Accepted;
            return (slot, transcripts);
        }

        let mut desc = desc;
        for cycle in 1..=cfg.max_crossassess_cycles {
            let assessment = match self.assess(&image.image, &class) {
                Ok(a) => a,
                Err(e) => {
                    slot.status = SlotStatus::Failed;
                    slot.error = Some(e.to_string());
                    return (slot, transcripts);
                }
            };
            let verdict = assessment.verdict;
            let confused = assessment.confused_class.clone();
            slot.revisions
                .last_mut()
                .expect("revision recorded")
                .assessment = Some(assessment);
            if verdict == Verdict::Accurate {
                slot.status = SlotStatus::Accepted;
                return (slot, transcripts);
            }
            slot.status = SlotStatus::Discarded;
            if cfg.mode == GalleryMode::CheckAndDiscard || cycle == cfg.max_crossassess_cycles {
                break;
            }
            let feedback = match cfg.mode {
                GalleryMode::CheckAndNaiveRefine => None,
                _ => confused.as_deref(),
            };
            let refined = refine_description(&desc, &class, feedback, self.chat, self.templates)
                .and_then(|(d, t)| {
                    transcripts.push(t);
                    let img = generate_image(&d, self.generator)?;
                    Ok((d, img))
                });
            match refined {
                Ok((d, img)) => {
                    slot.revisions.push(Self::revision(&d, &img));
                    desc = d;
                    image = img;
                }
                Err(e) => {
                    slot.error = Some(e.to_string());
                    break;
                }
            }
        }
        (slot, transcripts)
    }

    /// Builds the gallery for one class. Slots run in parallel on the current pool.
    pub fn build_gallery(&self, class: &ClassLabel, cfg: &GalleryConfig) -> Result<ClassGallery> {
        cfg.validate()?;
        let (descriptions, desc_transcript) =
            generate_descriptions(class, cfg.k, self.chat, self.templates)?;
        let results: Vec<(SlotRecord, Vec<ChatTranscript>)> = descriptions
            .into_par_iter()
            .map(|d| self.run_slot(d, cfg))
            .collect();

        let mut gallery = ClassGallery::new(class.clone(), Vec::new());
        gallery.transcripts.push(desc_transcript);
        for (slot, transcripts) in results {
            match slot.status {
                SlotStatus::Accepted => {
                    let last = slot.revisions.last().expect("accepted slot has a revision");
                    let image = last.image.clone().expect("accepted slot has an image");
                    gallery.images.push(GeneratedImage {
                        image,
                        source: crate::model::SlotRef {
                            class: class.canonical().to_string(),
                            index_k: slot.index_k,
                            revision: last.revision,
                        },
                        status: ImageStatus::Accepted,
                    });
                }
                SlotStatus::Discarded => gallery.discarded_count += 1,
                SlotStatus::Failed => gallery.failed_count += 1,
            }
            gallery.transcripts.extend(transcripts);
            gallery.slots.push(slot);
        }
        if gallery.empty_warning() {
            log::warn!(
                "every image slot of class {:?} was discarded or failed",
                class.name()
            );
        }
        Ok(gallery)
    }

    /// Builds galleries for every registry class, in registry order.
    pub fn build_all(&self, cfg: &GalleryConfig, parallelism: usize) -> Result<Vec<ClassGallery>> {
        let pool = rayon::ThreadPoolBuilder::new()
            .num_threads(parallelism.max(1))
            .build()
            .map_err(|e| Error::Config(e.to_string()))?;
        pool.install(|| self.build_all_in_pool(cfg))
    }

    /// As [`build_all`](Self::build_all), on the current rayon pool.
    pub fn build_all_in_pool(&self, cfg: &GalleryConfig) -> Result<Vec<ClassGallery>> {
        self.registry
            .classes()
            .par_iter()
            .map(|c| self.build_gallery(c, cfg))
            .collect()
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
struct ManifestClass {
    class: String,
    canonical: String,
    origin: Origin,
    accepted: usize,
    discarded_count: usize,
    failed_count: usize,
    empty_warning: bool,
    slots: Vec<SlotRecord>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
struct Manifest {
    classes: Vec<ManifestClass>,
}

/// Writes every revision's image under `dir/<class>/<k>_<rev>.<ext>` and then the manifest.
pub fn save_galleries(dir: &Path, galleries: &[ClassGallery]) -> Result<()> {
    let mut classes = Vec::with_capacity(galleries.len());
    for g in galleries {
        let class_dir = class_dir_name(g.class.canonical());
        let mut slots = g.slots.clone();
        for slot in &mut slots {
            for rev in &mut slot.revisions {
                if let Some(image) = &rev.image {
                    let rel = format!(
                        "{class_dir}/{}_{}.{}",
                        slot.index_k, rev.revision, image.format
                    );
                    write_atomic(&dir.join(&rel), &image.bytes)?;
                    rev.image_path = Some(rel);
                }
            }
        }
        classes.push(ManifestClass {
            class: g.class.name().to_string(),
            canonical: g.class.canonical().to_string(),
            origin: g.class.origin(),
            accepted: g.images.len(),
            discarded_count: g.discarded_count,
            failed_count: g.failed_count,
            empty_warning: g.empty_warning(),
            slots,
        });
    }
    let manifest = Manifest { classes };
    write_atomic(
        &dir.join(MANIFEST_FILE),
        serde_json::to_string_pretty(&manifest)?.as_bytes(),
    )
}

/// Reloads galleries, reading the accepted images back from disk.
pub fn load_galleries(dir: &Path) -> Result<Vec<ClassGallery>> {
    let manifest: Manifest = serde_json::from_str(&read_to_string(&dir.join(MANIFEST_FILE))?)?;
    manifest
        .classes
        .into_iter()
        .map(|mc| {
            let class = ClassLabel::new(&mc.class, mc.origin)?;
            let mut gallery = ClassGallery::new(class.clone(), Vec::new());
            gallery.discarded_count = mc.discarded_count;
            gallery.failed_count = mc.failed_count;
            for mut slot in mc.slots {
                for rev in &mut slot.revisions {
                    if let Some(rel) = &rev.image_path {
                        let path = dir.join(rel);
                        let bytes = std::fs::read(&path).map_err(|e| Error::io(&path, e))?;
                        let format = Path::new(rel)
                            .extension()
                            .map(|e| e.to_string_lossy().into_owned())
                            .unwrap_or_else(|| "png".into());
                        rev.image = Some(ImageData::new(bytes, format));
                    }
                }
                if slot.status == SlotStatus::Accepted {
                    let last = slot
                        .revisions
                        .last()
                        .ok_or_else(|| Error::Dataset("accepted slot without revisions".into()))?;
                    let image = last.image.clone().ok_or_else(|| {
                        Error::Dataset("accepted slot without an image file".into())
                    })?;
                    gallery.images.push(GeneratedImage {
                        image,
                        source: crate::model::SlotRef {
                            class: class.canonical().to_string(),
                            index_k: slot.index_k,
                            revision: last.revision,
                        },
                        status: ImageStatus::Accepted,
                    });
                }
                gallery.slots.push(slot);
            }
            Ok(gallery)
        })
        .collect()
}
