//! Benchmark protocols, class splits, open-set metrics and reports.

use std::collections::HashSet;
use std::fmt::{self, Write as _};
use std::path::{Path, PathBuf};
use std::str::FromStr;

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::fsutil::read_to_string;
use crate::model::canonicalize;

pub const SPLITS_PER_PROTOCOL: usize = 5;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub enum Protocol {
    Cifar10,
    CifarPlus10,
    CifarPlus50,
    TinyImageNet,
    /// Closed and open classes both drawn from the primary pool.
    Custom {
        closed: usize,
        open: usize,
    },
}

impl Protocol {
    pub fn closed_count(self) -> usize {
        match self {
            Protocol::Cifar10 => 6,
            Protocol::CifarPlus10 | Protocol::CifarPlus50 => 4,
            Protocol::TinyImageNet => 20,
            Protocol::Custom { closed, .. } => closed,
        }
    }

    pub fn open_count(self) -> usize {
        match self {
            Protocol::Cifar10 => 4,
            Protocol::CifarPlus10 => 10,
            Protocol::CifarPlus50 => 50,
            Protocol::TinyImageNet => 180,
            Protocol::Custom { open, .. } => open,
        }
    }

    /// Whether open classes come from the secondary dataset.
    pub fn open_from_secondary(self) -> bool {
        matches!(self, Protocol::CifarPlus10 | Protocol::CifarPlus50)
    }
}

impl fmt::Display for Protocol {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            Protocol::Cifar10 => f.write_str("cifar10"),
            Protocol::CifarPlus10 => f.write_str("cifar+10"),
            Protocol::CifarPlus50 => f.write_str("cifar+50"),
            Protocol::TinyImageNet => f.write_str("tinyimagenet"),
            Protocol::Custom { closed, open } => write!(f, "custom:{closed}:{open}"),
        }
    }
}

impl FromStr for Protocol {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        let lower = s.trim().to_ascii_lowercase();
        match lower.as_str() {
            "cifar10" => return Ok(Protocol::Cifar10),
            "cifar+10" | "cifarplus10" => return Ok(Protocol::CifarPlus10),
            "cifar+50" | "cifarplus50" => return Ok(Protocol::CifarPlus50),
            "tinyimagenet" => return Ok(Protocol::TinyImageNet),
            _ => {}
        }
        let bad = || Error::Config(format!("unknown protocol {s:?}"));
        let rest = lower.strip_prefix("custom:").ok_or_else(bad)?;
        let (c, o) = rest.split_once(':').ok_or_else(bad)?;
        let closed: usize = c.parse().map_err(|_| bad())?;
        let open: usize = o.parse().map_err(|_| bad())?;
        if closed == 0 || open == 0 {
            return Err(Error::Config(
                "custom protocol needs at least one closed and one open class".into(),
            ));
        }
        Ok(Protocol::Custom { closed, open })
    }
}

impl Serialize for Protocol {
    fn serialize<S: serde::Serializer>(&self, s: S) -> std::result::Result<S::Ok, S::Error> {
        s.collect_str(self)
    }
}

impl<'de> Deserialize<'de> for Protocol {
    fn deserialize<D: serde::Deserializer<'de>>(d: D) -> std::result::Result<Self, D::Error> {
        let s = String::deserialize(d)?;
        s.parse().map_err(serde::de::Error::custom)
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct EvaluationSplit {
    pub protocol: Protocol,
    pub split_index: usize,
    pub closed_classes: Vec<String>,
    pub open_classes: Vec<String>,
    pub seed: u64,
}

impl EvaluationSplit {
    pub fn validate(&self) -> Result<()> {
        let (c, o) = (self.protocol.closed_count(), self.protocol.open_count());
        if self.closed_classes.len() != c || self.open_classes.len() != o {
            return Err(Error::Dataset(format!(
                "split {} has {}/{} classes, {} needs {c}/{o}",
                self.split_index,
                self.closed_classes.len(),
                self.open_classes.len(),
                self.protocol
            )));
        }
        let mut seen = HashSet::new();
        for name in self.closed_classes.iter().chain(&self.open_classes) {
            if !seen.insert(canonicalize(name)?) {
                return Err(Error::Dataset(format!(
                    "split {} lists {name:?} twice",
                    self.split_index
                )));
            }
        }
        Ok(())
    }
}

/// Class names available to split generation.
#[derive(Debug, Clone, Default, PartialEq, Eq)]
pub struct ClassPools {
    pub primary: Vec<String>,
    pub secondary: Vec<String>,
}

fn sorted_unique(names: &[String]) -> Vec<String> {
    let mut seen = HashSet::new();
    let mut out: Vec<String> = names
        .iter()
        .filter(|n| canonicalize(n).map(|c| seen.insert(c)).unwrap_or(false))
        .cloned()
        .collect();
    out.sort_by_key(|n| canonicalize(n).unwrap_or_default());
    out
}

/// Five seeded splits. Pools are sorted first so manifest row order does not matter.
pub fn make_splits(
    protocol: Protocol,
    pools: &ClassPools,
    master_seed: u64,
) -> Result<Vec<EvaluationSplit>> {
    let primary = sorted_unique(&pools.primary);
    let (c, o) = (protocol.closed_count(), protocol.open_count());
    let secondary = if protocol.open_from_secondary() {
        let taken: HashSet<String> = primary
            .iter()
            .filter_map(|n| canonicalize(n).ok())
            .collect();
        let pool: Vec<String> = sorted_unique(&pools.secondary)
            .into_iter()
            .filter(|n| {
                canonicalize(n)
                    .map(|k| !taken.contains(&k))
                    .unwrap_or(false)
            })
            .collect();
        if pool.len() < o {
            return Err(Error::Dataset(format!(
                "{protocol} needs {o} open classes from the secondary dataset, manifest has {}",
                pool.len()
            )));
        }
        pool
    } else {
        Vec::new()
    };
    let needed = if protocol.open_from_secondary() {
        c
    } else {
        c + o
    };
    if primary.len() < needed {
        return Err(Error::Dataset(format!(
            "{protocol} needs {needed} classes from the primary dataset, manifest has {}",
            primary.len()
        )));
    }

    (0..SPLITS_PER_PROTOCOL)
        .map(|split_index| {
            let seed = master_seed.wrapping_add(split_index as u64);
            let mut rng = ChaCha8Rng::seed_from_u64(seed);
            let mut a = primary.clone();
            a.shuffle(&mut rng);
            let (closed_classes, open_classes) = if protocol.open_from_secondary() {
                let mut b = secondary.clone();
                b.shuffle(&mut rng);
                (a[..c].to_vec(), b[..o].to_vec())
            } else {
                (a[..c].to_vec(), a[c..c + o].to_vec())
            };
            let split = EvaluationSplit {
                protocol,
                split_index,
                closed_classes,
                open_classes,
                seed,
            };
            split.validate()?;
            Ok(split)
        })
        .collect()
}

/// Reads externally supplied class assignments (a JSON array of splits).
pub fn load_split_file(path: &Path, protocol: Protocol) -> Result<Vec<EvaluationSplit>> {
    #[derive(Deserialize)]
    struct Row {
        split_index: usize,
        closed_classes: Vec<String>,
        open_classes: Vec<String>,
        #[serde(default)]
        seed: u64,
    }
    let rows: Vec<Row> = serde_json::from_str(&read_to_string(path)?)?;
    if rows.is_empty() {
        return Err(Error::Dataset(format!(
            "split file {} is empty",
            path.display()
        )));
    }
    rows.into_iter()
        .map(|r| {
            let split = EvaluationSplit {
                protocol,
                split_index: r.split_index,
                closed_classes: r.closed_classes,
                open_classes: r.open_classes,
                seed: r.seed,
            };
            split.validate()?;
            Ok(split)
        })
        .collect()
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct DatasetRow {
    pub path: PathBuf,
    pub class: String,
    #[serde(default, alias = "split-role")]
    pub split_role: Option<String>,
    /// `"secondary"` marks rows of the dataset that supplies open classes.
    #[serde(default)]
    pub source: Option<String>,
}

impl DatasetRow {
    pub fn is_secondary(&self) -> bool {
        self.source.as_deref() == Some("secondary")
    }

    pub fn is_test(&self) -> bool {
        matches!(self.split_role.as_deref(), None | Some("test"))
    }

    /// Stable identifier written to score files.
    pub fn image_id(&self) -> String {
        self.path.to_string_lossy().replace('\\', "/")
    }
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct DatasetManifest {
    pub root: PathBuf,
    pub rows: Vec<DatasetRow>,
}

impl DatasetManifest {
    /// Parses JSONL. Relative image paths resolve against the manifest's directory.
    pub fn load(path: &Path) -> Result<Self> {
        let text = read_to_string(path)?;
        let rows = text
            .lines()
            .enumerate()
            .filter(|(_, l)| !l.trim().is_empty())
            .map(|(i, l)| {
                serde_json::from_str::<DatasetRow>(l)
                    .map_err(|e| Error::Dataset(format!("{} line {}: {e}", path.display(), i + 1)))
            })
            .collect::<Result<Vec<_>>>()?;
        if rows.is_empty() {
            return Err(Error::Dataset(format!("{} has no rows", path.display())));
        }
        let root = path.parent().map(Path::to_path_buf).unwrap_or_default();
        Ok(DatasetManifest { root, rows })
    }

    pub fn resolve(&self, row: &DatasetRow) -> PathBuf {
        if row.path.is_absolute() {
            row.path.clone()
        } else {
            self.root.join(&row.path)
        }
    }

    pub fn pools(&self) -> ClassPools {
        let mut pools = ClassPools::default();
        for row in &self.rows {
            let pool = if row.is_secondary() {
                &mut pools.secondary
            } else {
                &mut pools.primary
            };
            if !pool.contains(&row.class) {
                pool.push(row.class.clone());
            }
        }
        pools
    }

    /// Test rows of the split's closed and open classes, in manifest order,
    /// with each row's ground truth.
    pub fn test_rows(&self, split: &EvaluationSplit) -> Result<Vec<(DatasetRow, bool)>> {
        let canon = |names: &[String]| -> Result<HashSet<String>> {
            names.iter().map(|n| canonicalize(n)).collect()
        };
        let closed = canon(&split.closed_classes)?;
        let open = canon(&split.open_classes)?;
        let mut found = HashSet::new();
        let mut out = Vec::new();
        for row in self.rows.iter().filter(|r| r.is_test()) {
            let key = canonicalize(&row.class)?;
            let is_closed = closed.contains(&key);
            if is_closed || open.contains(&key) {
                found.insert(key);
                out.push((row.clone(), is_closed));
            }
        }
        if let Some(missing) = closed.union(&open).find(|c| !found.contains(*c)) {
            return Err(Error::Dataset(format!(
                "manifest has no test images of class {missing:?}"
            )));
        }
        Ok(out)
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct LabeledScore {
    pub image_id: String,
    pub is_closed: bool,
    pub true_class: Option<String>,
    #[serde(rename = "S")]
    pub score: f64,
    pub predicted_closed_class: String,
}

fn check_rows(rows: &[LabeledScore]) -> Result<(usize, usize)> {
    let closed = rows.iter().filter(|r| r.is_closed).count();
    let open = rows.len() - closed;
    if closed == 0 || open == 0 {
        return Err(Error::Metric(format!(
            "need closed and open rows, got {closed} closed and {open} open"
        )));
    }
    if let Some(r) = rows.iter().find(|r| !r.score.is_finite()) {
        return Err(Error::Metric(format!(
            "non-finite score for {}",
            r.image_id
        )));
    }
    Ok((closed, open))
}

/// Probability that a random closed row outscores a random open row, ties
/// counting half. Computed from midranks.
pub fn auroc(rows: &[LabeledScore]) -> Result<f64> {
    let (n_closed, n_open) = check_rows(rows)?;
    let mut order: Vec<usize> = (0..rows.len()).collect();
    order.sort_by(|&a, &b| rows[a].score.total_cmp(&rows[b].score));
    let mut rank_sum = 0.0f64;
    let mut i = 0;
    while i < order.len() {
        let mut j = i;
        while j + 1 < order.len() && rows[order[j + 1]].score == rows[order[i]].score {
            j += 1;
        }
        let midrank = (i + j) as f64 / 2.0 + 1.0;
        rank_sum += midrank * order[i..=j].iter().filter(|&&k| rows[k].is_closed).count() as f64;
        i = j + 1;
    }
    let (c, o) = (n_closed as f64, n_open as f64);
    Ok((rank_sum - c * (c + 1.0) / 2.0) / (c * o))
}

fn is_correct(row: &LabeledScore) -> bool {
    row.is_closed
        && row
            .true_class
            .as_deref()
            .is_some_and(|t| canonicalize(t).ok() == canonicalize(&row.predicted_closed_class).ok())
}

/// Area under the correct-classification-rate vs false-positive-rate curve,
/// sweeping thresholds over the observed scores (strict `S > θ`).
pub fn oscr(rows: &[LabeledScore]) -> Result<f64> {
    let (n_closed, n_open) = check_rows(rows)?;
    let mut order: Vec<usize> = (0..rows.len()).collect();
    order.sort_by(|&a, &b| rows[b].score.total_cmp(&rows[a].score));

    // Walking thresholds from the top, rows strictly above θ are those in earlier groups.
    let mut points = Vec::new();
    let (mut correct, mut false_pos) = (0usize, 0usize);
    let mut i = 0;
    while i < order.len() {
        points.push((
            false_pos as f64 / n_open as f64,
            correct as f64 / n_closed as f64,
        ));
        let mut j = i;
        while j < order.len() && rows[order[j]].score == rows[order[i]].score {
            let r = &rows[order[j]];
            if !r.is_closed {
                false_pos += 1;
            } else if is_correct(r) {
                correct += 1;
            }
            j += 1;
        }
        i = j;
    }
    let first = points[0].1;
    let last = points[points.len() - 1].1;
    let curve: Vec<(f64, f64)> = std::iter::once((0.0, first))
        .chain(points)
        .chain(std::iter::once((1.0, last)))
        .collect();
    Ok(curve
        .windows(2)
        .map(|w| (w[1].0 - w[0].0) * (w[0].1 + w[1].1) / 2.0)
        .sum())
}

/// Fraction of closed rows classified correctly.
pub fn closed_accuracy(rows: &[LabeledScore]) -> f64 {
    let closed: Vec<&LabeledScore> = rows.iter().filter(|r| r.is_closed).collect();
    if closed.is_empty() {
        return 0.0;
    }
    closed.iter().filter(|r| is_correct(r)).count() as f64 / closed.len() as f64
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct MeanStd {
    pub mean: f64,
    pub std: f64,
}

/// Mean and sample standard deviation; a single value has std 0.
pub fn mean_std(values: &[f64]) -> MeanStd {
    if values.is_empty() {
        return MeanStd {
            mean: f64::NAN,
            std: f64::NAN,
        };
    }
    let n = values.len() as f64;
    let mean = values.iter().sum::<f64>() / n;
    let std = if values.len() < 2 {
        0.0
    } else {
        (values.iter().map(|v| (v - mean).powi(2)).sum::<f64>() / (n - 1.0)).sqrt()
    };
    MeanStd { mean, std }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SplitMetrics {
    pub split_index: usize,
    pub auroc: f64,
    pub oscr: f64,
    pub closed_accuracy: f64,
    pub n_closed: usize,
    pub n_open: usize,
}

impl SplitMetrics {
    pub fn compute(split_index: usize, rows: &[LabeledScore]) -> Result<Self> {
        let (n_closed, n_open) = check_rows(rows)?;
        Ok(SplitMetrics {
            split_index,
            auroc: auroc(rows)?,
            oscr: oscr(rows)?,
            closed_accuracy: closed_accuracy(rows),
            n_closed,
            n_open,
        })
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MetricsReport {
    pub protocol: Protocol,
    pub label: String,
    pub splits: Vec<SplitMetrics>,
    pub auroc: MeanStd,
    pub oscr: MeanStd,
}

impl MetricsReport {
    pub fn new(protocol: Protocol, label: impl Into<String>, splits: Vec<SplitMetrics>) -> Self {
        let auroc = mean_std(&splits.iter().map(|s| s.auroc).collect::<Vec<_>>());
        let oscr = mean_std(&splits.iter().map(|s| s.oscr).collect::<Vec<_>>());
        MetricsReport {
            protocol,
            label: label.into(),
            splits,
            auroc,
            oscr,
        }
    }

    /// Plain-text table in percent, one row per split plus the summary row.
    pub fn to_table(&self) -> String {
        let mut out = String::new();
        let _ = writeln!(out, "protocol: {}  method: {}", self.protocol, self.label);
        let _ = writeln!(out, "{:<8}{:>14}{:>14}", "split", "AUROC", "OSCR");
        for s in &self.splits {
            let _ = writeln!(
                out,
                "{:<8}{:>14.1}{:>14.1}",
                s.split_index,
                100.0 * s.auroc,
                100.0 * s.oscr
            );
        }
        let cell = |m: &MeanStd| format!("{:.1} ± {:.1}", 100.0 * m.mean, 100.0 * m.std);
        let _ = writeln!(
            out,
            "{:<8}{:>14}{:>14}",
            "mean",
            cell(&self.auroc),
            cell(&self.oscr)
        );
        out
    }
}
