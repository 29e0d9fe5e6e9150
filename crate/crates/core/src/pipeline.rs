//! Stage orchestration and on-disk artifacts.
//!
//! A split directory holds:
//!
//! ```text
//! registry.json        closed + virtual classes
//! transcripts.jsonl    simulation conversations
//! gallery/             manifest.json, images, transcripts.jsonl
//! store/               pre-stored features
//! scores.jsonl         one scored test image per line
//! ```
//!
//! A protocol run writes one `split<i>/` per split plus `splits.json`,
//! `report.json` and `report.txt`.

use std::path::{Path, PathBuf};

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::backends::Backends;
use crate::config::PipelineConfig;
use crate::error::{Error, Result};
use crate::eval::{DatasetManifest, EvaluationSplit, LabeledScore, MetricsReport, SplitMetrics};
use crate::fsutil::{read_to_string, write_atomic};
use crate::gallery::{load_galleries, save_galleries, ClassGallery, GalleryContext};
use crate::llm::{
    simulate_all, write_transcripts, ChatTranscript, PromptTemplates, SimulationOutcome,
};
use crate::model::{ClassRegistry, ImageData};
use crate::scoring::score_image;
use crate::store::FeatureStore;

pub const REGISTRY_FILE: &str = "registry.json";
pub const TRANSCRIPTS_FILE: &str = "transcripts.jsonl";
pub const GALLERY_DIR: &str = "gallery";
pub const STORE_DIR: &str = "store";
pub const SCORES_FILE: &str = "scores.jsonl";
pub const SPLITS_FILE: &str = "splits.json";
pub const REPORT_FILE: &str = "report.json";
pub const PARTIAL_REPORT_FILE: &str = "report.partial.json";
pub const REPORT_TABLE_FILE: &str = "report.txt";

pub fn split_dir(out: &Path, index: usize) -> PathBuf {
    out.join(format!("split{index}"))
}

/// One line of a scores file.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ScoreRecord {
    pub image_id: String,
    #[serde(rename = "S")]
    pub score: f64,
    pub predicted_closed_class: String,
    pub p_inc: Vec<f64>,
    pub p_clip: Vec<f64>,
    pub p_dino: Vec<f64>,
}

pub fn write_scores(path: &Path, records: &[ScoreRecord]) -> Result<()> {
    let mut out = String::new();
    for r in records {
        out.push_str(&serde_json::to_string(r)?);
        out.push('\n');
    }
    write_atomic(path, out.as_bytes())
}

pub fn read_scores(path: &Path) -> Result<Vec<ScoreRecord>> {
    read_to_string(path)?
        .lines()
        .filter(|l| !l.trim().is_empty())
        .map(|l| serde_json::from_str(l).map_err(Error::from))
        .collect()
}

pub fn load_registry(dir: &Path) -> Result<ClassRegistry> {
    ClassRegistry::from_json(&read_to_string(&dir.join(REGISTRY_FILE))?)
}

/// A test image to score, with its ground truth.
#[derive(Debug, Clone)]
pub struct TestImage {
    pub image_id: String,
    pub image: ImageData,
    pub is_closed: bool,
    pub true_class: Option<String>,
}

/// Reads the split's test images from disk, in manifest order.
pub fn load_test_images(
    manifest: &DatasetManifest,
    split: &EvaluationSplit,
) -> Result<Vec<TestImage>> {
    manifest
        .test_rows(split)?
        .into_iter()
        .map(|(row, is_closed)| {
            let path = manifest.resolve(&row);
            let bytes = std::fs::read(&path).map_err(|e| Error::io(&path, e))?;
            let format = path
                .extension()
                .map(|e| e.to_string_lossy().to_ascii_lowercase())
                .unwrap_or_else(|| "png".into());
            Ok(TestImage {
                image_id: row.image_id(),
                image: ImageData::new(bytes, format),
                is_closed,
                true_class: is_closed.then(|| row.class.clone()),
            })
        })
        .collect()
}

pub fn labeled(records: &[ScoreRecord], images: &[TestImage]) -> Result<Vec<LabeledScore>> {
    if records.len() != images.len() {
        return Err(Error::Dataset(format!(
            "{} scores for {} test images",
            records.len(),
            images.len()
        )));
    }
    records
        .iter()
        .zip(images)
        .map(|(r, t)| {
            if r.image_id != t.image_id {
                return Err(Error::Dataset(format!(
                    "score for {} where {} was expected",
                    r.image_id, t.image_id
                )));
            }
            Ok(LabeledScore {
                image_id: r.image_id.clone(),
                is_closed: t.is_closed,
                true_class: t.true_class.clone(),
                score: r.score,
                predicted_closed_class: r.predicted_closed_class.clone(),
            })
        })
        .collect()
}

pub struct Pipeline<'a> {
    pub config: &'a PipelineConfig,
    pub backends: &'a Backends,
    pub templates: PromptTemplates,
    pool: rayon::ThreadPool,
}

impl<'a> Pipeline<'a> {
    pub fn new(config: &'a PipelineConfig, backends: &'a Backends) -> Result<Self> {
        config.validate()?;
        let pool = rayon::ThreadPoolBuilder::new()
            .num_threads(config.parallelism)
            .build()
            .map_err(|e| Error::Config(e.to_string()))?;
        Ok(Pipeline {
            config,
            backends,
            templates: config.templates()?,
            pool,
        })
    }

    fn cache(&self) -> Result<Option<FeatureStore>> {
        match &self.config.cache_dir {
            Some(dir) => FeatureStore::load_if_present(dir),
            None => Ok(None),
        }
    }

    fn update_cache(&self, store: &FeatureStore) -> Result<()> {
        if let Some(dir) = &self.config.cache_dir {
            let mut cache = FeatureStore::load_if_present(dir)?.unwrap_or_default();
            cache.absorb_vectors(store);
            cache.save(dir)?;
        }
        Ok(())
    }

    pub fn simulate(&self, closed: &[String]) -> Result<SimulationOutcome> {
        let registry = ClassRegistry::from_closed(closed)?;
        simulate_all(
            &registry,
            self.backends.chat.as_ref(),
            &self.templates,
            &self.config.simulation,
            self.config.parallelism,
        )
    }

    /// Text features for the registry, reusing the cache.
    pub fn text_store(&self, registry: &ClassRegistry) -> Result<FeatureStore> {
        let cache = self.cache()?;
        let mut store = FeatureStore::new();
        store.precompute_text_features(
            registry,
            self.backends.image_text.as_ref(),
            &self.config.scoring,
            cache.as_ref(),
        )?;
        Ok(store)
    }

    pub fn build_galleries(&self, registry: &ClassRegistry) -> Result<Vec<ClassGallery>> {
        let store = self.text_store(registry)?;
        let ctx = GalleryContext {
            registry,
            store: &store,
            chat: self.backends.chat.as_ref(),
            generator: self.backends.image_gen.as_ref(),
            embedder: self.backends.image_text.as_ref(),
            templates: &self.templates,
            scoring: &self.config.scoring,
        };
        self.pool
            .install(|| ctx.build_all_in_pool(&self.config.gallery))
    }

    pub fn precompute(
        &self,
        registry: &ClassRegistry,
        galleries: &[ClassGallery],
    ) -> Result<FeatureStore> {
        let cache = self.cache()?;
        let mut store = FeatureStore::new();
        store.precompute_text_features(
            registry,
            self.backends.image_text.as_ref(),
            &self.config.scoring,
            cache.as_ref(),
        )?;
        self.pool.install(|| {
            store.precompute_gallery_features(
                galleries,
                self.backends.image.as_ref(),
                &self.config.scoring,
                cache.as_ref(),
            )
        })?;
        store.validate_for(registry)?;
        self.update_cache(&store)?;
        Ok(store)
    }

    /// Scores test images concurrently; output keeps input order.
    pub fn score(
        &self,
        registry: &ClassRegistry,
        store: &FeatureStore,
        images: &[TestImage],
    ) -> Result<Vec<ScoreRecord>> {
        store.validate_for(registry)?;
        let cfg = &self.config.scoring;
        self.pool.install(|| {
            images
                .par_iter()
                .map(|t| {
                    let ctx = |e| Error::backend(format!("embedding test image {}", t.image_id), e);
                    let clip = self
                        .backends
                        .image_text
                        .embed_image(&t.image)
                        .map_err(ctx)?;
                    let dino = self.backends.image.embed_image(&t.image).map_err(ctx)?;
                    let b = score_image(&clip, &dino, store, registry, cfg)?;
                    Ok(ScoreRecord {
                        image_id: t.image_id.clone(),
                        score: b.score,
                        predicted_closed_class: b.predicted_closed_class,
                        p_inc: b.p_inc,
                        p_clip: b.p_clip,
                        p_dino: b.p_dino,
                    })
                })
                .collect()
        })
    }

    pub fn save_simulation(dir: &Path, outcome: &SimulationOutcome) -> Result<()> {
        write_transcripts(&dir.join(TRANSCRIPTS_FILE), &outcome.transcripts)?;
        write_atomic(
            &dir.join(REGISTRY_FILE),
            outcome.registry.to_json()?.as_bytes(),
        )
    }

    pub fn save_galleries(dir: &Path, galleries: &[ClassGallery]) -> Result<()> {
        let gdir = dir.join(GALLERY_DIR);
        let transcripts: Vec<ChatTranscript> = galleries
            .iter()
            .flat_map(|g| g.transcripts.clone())
            .collect();
        write_transcripts(&gdir.join(TRANSCRIPTS_FILE), &transcripts)?;
        save_galleries(&gdir, galleries)
    }

    pub fn load_galleries(dir: &Path) -> Result<Vec<ClassGallery>> {
        load_galleries(&dir.join(GALLERY_DIR))
    }

    /// Runs every stage for one split into `dir`. With `resume`, a stage whose
    /// artifact already exists is loaded instead of recomputed.
    pub fn run_split(
        &self,
        manifest: &DatasetManifest,
        split: &EvaluationSplit,
        dir: &Path,
        resume: bool,
    ) -> Result<SplitMetrics> {
        let images = load_test_images(manifest, split)?;
        let have = |p: PathBuf| resume && p.exists();

        let registry = if have(dir.join(REGISTRY_FILE)) {
            load_registry(dir)?
        } else {
            let outcome = self.simulate(&split.closed_classes)?;
            Self::save_simulation(dir, &outcome)?;
            outcome.registry
        };
        if registry
            .closed()
            .iter()
            .map(|c| c.name())
            .ne(split.closed_classes.iter().map(|s| s.trim()))
        {
            return Err(Error::Dataset(format!(
                "{} does not match the closed classes of split {}",
                dir.join(REGISTRY_FILE).display(),
                split.split_index
            )));
        }

        let galleries = if have(dir.join(GALLERY_DIR).join(crate::gallery::MANIFEST_FILE)) {
            Self::load_galleries(dir)?
        } else {
            let g = self.build_galleries(&registry)?;
            Self::save_galleries(dir, &g)?;
            g
        };

        let store_dir = dir.join(STORE_DIR);
        let store = if have(store_dir.join(crate::store::MANIFEST_FILE)) {
            FeatureStore::load(&store_dir)?
        } else {
            let s = self.precompute(&registry, &galleries)?;
            s.save(&store_dir)?;
            s
        };

        let scores = if have(dir.join(SCORES_FILE)) {
            read_scores(&dir.join(SCORES_FILE))?
        } else {
            let s = self.score(&registry, &store, &images)?;
            write_scores(&dir.join(SCORES_FILE), &s)?;
            s
        };
        SplitMetrics::compute(split.split_index, &labeled(&scores, &images)?)
    }

    /// Runs each split in turn and writes the report. A failing split stops the
    /// run with the report of the splits completed before it.
    pub fn run_protocol(
        &self,
        manifest: &DatasetManifest,
        splits: &[EvaluationSplit],
        out: &Path,
        label: &str,
        resume: bool,
    ) -> Result<MetricsReport> {
        let protocol = splits
            .first()
            .map(|s| s.protocol)
            .ok_or_else(|| Error::Dataset("no splits to run".into()))?;
        write_atomic(
            &out.join(SPLITS_FILE),
            serde_json::to_string_pretty(splits)?.as_bytes(),
        )?;
        let mut done = Vec::new();
        for split in splits {
            log::info!("split {} of {protocol}", split.split_index);
            match self.run_split(manifest, split, &split_dir(out, split.split_index), resume) {
                Ok(m) => done.push(m),
                Err(e) => {
                    let report = MetricsReport::new(protocol, label, done);
                    write_atomic(
                        &out.join(PARTIAL_REPORT_FILE),
                        serde_json::to_string_pretty(&report)?.as_bytes(),
                    )?;
                    return Err(Error::PartialProtocol {
                        split: split.split_index,
                        message: e.to_string(),
                        report: Box::new(report),
                    });
                }
            }
        }
        let report = MetricsReport::new(protocol, label, done);
        write_atomic(
            &out.join(REPORT_FILE),
            serde_json::to_string_pretty(&report)?.as_bytes(),
        )?;
        write_atomic(&out.join(REPORT_TABLE_FILE), report.to_table().as_bytes())?;
        Ok(report)
    }
}

/// Loads the configured dataset and the splits to run: the split file when
/// given, otherwise seeded sampling.
pub fn resolve_splits(config: &PipelineConfig) -> Result<(DatasetManifest, Vec<EvaluationSplit>)> {
    let path = config
        .eval
        .dataset
        .as_deref()
        .ok_or_else(|| Error::Config("eval.dataset is not set".into()))?;
    let manifest = DatasetManifest::load(path)?;
    let splits = match &config.eval.split_file {
        Some(f) => crate::eval::load_split_file(f, config.eval.protocol)?,
        None => crate::eval::make_splits(config.eval.protocol, &manifest.pools(), config.seed)?,
    };
    Ok((manifest, splits))
}
