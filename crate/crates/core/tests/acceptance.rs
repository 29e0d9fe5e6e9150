//! Acceptance suite: one PASS/FAIL line per criterion.

mod common;

use std::panic::{catch_unwind, AssertUnwindSafe};
use std::path::Path;
use std::process::Command;
use std::time::{Duration, Instant};

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use osr_core::backends::{Backends, MockEmbedder, ScriptEntry, ScriptedLlm};
use osr_core::config::{PipelineConfig, Preset};
use osr_core::eval::{auroc, oscr, LabeledScore};
use osr_core::gallery::{GalleryConfig, GalleryContext, SlotStatus};
use osr_core::llm::{simulate_class, PromptTemplates, SimulationConfig};
use osr_core::model::{ClassLabel, ClassRegistry, Origin};
use osr_core::pipeline::{read_scores, resolve_splits, split_dir, Pipeline, SCORES_FILE};
use osr_core::scoring::{fuse_and_score, softmax, ScoringConfig};
use osr_core::store::FeatureStore;

const AUROC_TOL: f64 = 1e-12;
const OSCR_TOL: f64 = 1e-9;
const P_INC_SUM_TOL: f64 = 1e-6;
const METRIC_INSTANCES: usize = 200;
const METRIC_MAX_ROWS: usize = 20;
const SCORING_INSTANCES: usize = 1000;
const STABILITY_LOGIT: f64 = 1e4;
const MAX_CYCLES: usize = 3;
const METRIC_BUDGET: Duration = Duration::from_secs(5);
const DETERMINISM_BUDGET: Duration = Duration::from_secs(30);

type Outcome = Result<String, String>;

fn check(cond: bool, msg: impl Into<String>) -> Result<(), String> {
    if cond {
        Ok(())
    } else {
        Err(msg.into())
    }
}

// ---------- metric oracles ----------

fn pairwise_auroc(rows: &[LabeledScore]) -> f64 {
    let (mut wins, mut pairs) = (0.0, 0.0);
    for c in rows.iter().filter(|r| r.is_closed) {
        for o in rows.iter().filter(|r| !r.is_closed) {
            pairs += 1.0;
            if c.score > o.score {
                wins += 1.0;
            } else if c.score == o.score {
                wins += 0.5;
            }
        }
    }
    wins / pairs
}

fn enumerated_oscr(rows: &[LabeledScore]) -> f64 {
    let n_closed = rows.iter().filter(|r| r.is_closed).count() as f64;
    let n_open = rows.iter().filter(|r| !r.is_closed).count() as f64;
    let mut thresholds: Vec<f64> = rows.iter().map(|r| r.score).collect();
    thresholds.sort_by(|a, b| b.partial_cmp(a).unwrap());
    thresholds.dedup();
    let at = |t: f64| {
        let ccr = rows
            .iter()
            .filter(|r| {
                r.is_closed
                    && r.score > t
                    && r.true_class.as_deref() == Some(&r.predicted_closed_class)
            })
            .count() as f64
            / n_closed;
        let fpr = rows.iter().filter(|r| !r.is_closed && r.score > t).count() as f64 / n_open;
        (fpr, ccr)
    };
    let mut curve = vec![(0.0, at(thresholds[0]).1)];
    curve.extend(thresholds.iter().map(|&t| at(t)));
    curve.push((1.0, at(*thresholds.last().unwrap()).1));
    let mut area = 0.0;
    for w in curve.windows(2) {
        area += (w[1].0 - w[0].0) * (w[0].1 + w[1].1) / 2.0;
    }
    area
}

fn labeled(closed: &[(f64, bool)], open: &[f64]) -> Vec<LabeledScore> {
    let mut rows = Vec::new();
    for (i, &(s, correct)) in closed.iter().enumerate() {
        rows.push(LabeledScore {
            image_id: format!("c{i}"),
            is_closed: true,
            true_class: Some("a".into()),
            score: s,
            predicted_closed_class: if correct { "a".into() } else { "b".into() },
        });
    }
    for (i, &s) in open.iter().enumerate() {
        rows.push(LabeledScore {
            image_id: format!("o{i}"),
            is_closed: false,
            true_class: None,
            score: s,
            predicted_closed_class: "a".into(),
        });
    }
    rows
}

fn metric_oracles() -> Outcome {
    let start = Instant::now();
    let derived_auroc =
        auroc(&labeled(&[(0.9, true), (0.4, true)], &[0.6, 0.1])).map_err(|e| e.to_string())?;
    check(
        derived_auroc == 0.75,
        format!("AUROC example gave {derived_auroc}"),
    )?;
    let four = labeled(&[(0.9, true), (0.4, false)], &[0.6, 0.1]);
    let derived_oscr = oscr(&four).map_err(|e| e.to_string())?;
    let oracle_oscr = enumerated_oscr(&four);
    check(
        derived_oscr == oracle_oscr && derived_oscr == 0.5,
        format!("OSCR example gave {derived_oscr}, oracle {oracle_oscr}"),
    )?;

    let mut rng = ChaCha8Rng::seed_from_u64(11);
    let (mut worst_auroc, mut worst_oscr) = (0.0f64, 0.0f64);
    for _ in 0..METRIC_INSTANCES {
        let n = rng.random_range(2..=METRIC_MAX_ROWS);
        let n_closed = rng.random_range(1..n);
        // coarse grid so ties are frequent
        let closed: Vec<(f64, bool)> = (0..n_closed)
            .map(|_| (rng.random_range(0..8) as f64 / 7.0, rng.random_bool(0.7)))
            .collect();
        let open: Vec<f64> = (0..n - n_closed)
            .map(|_| rng.random_range(0..8) as f64 / 7.0)
            .collect();
        let rows = labeled(&closed, &open);
        worst_auroc = worst_auroc.max((auroc(&rows).unwrap() - pairwise_auroc(&rows)).abs());
        worst_oscr = worst_oscr.max((oscr(&rows).unwrap() - enumerated_oscr(&rows)).abs());
    }
    check(
        worst_auroc <= AUROC_TOL,
        format!("AUROC deviates by {worst_auroc:e}"),
    )?;
    check(
        worst_oscr <= OSCR_TOL,
        format!("OSCR deviates by {worst_oscr:e}"),
    )?;
    let elapsed = start.elapsed();
    check(elapsed < METRIC_BUDGET, format!("took {elapsed:?}"))?;
    Ok(format!(
        "AUROC example {derived_auroc}, OSCR example {derived_oscr}; {METRIC_INSTANCES} instances, max dev {worst_auroc:e} / {worst_oscr:e}; {elapsed:?}"
    ))
}

// ---------- scoring invariants ----------

fn registry(closed: usize, extra: usize) -> ClassRegistry {
    let names: Vec<String> = (0..closed).map(|i| format!("closed {i}")).collect();
    let mut reg = ClassRegistry::from_closed(&names).unwrap();
    reg.append(
        (0..extra)
            .map(|i| ClassLabel::new(&format!("virtual {i}"), Origin::VirtualSimilar).unwrap()),
    );
    reg
}

fn random_logits(rng: &mut ChaCha8Rng, n: usize, allow_empty: bool) -> Vec<f64> {
    let mut v: Vec<f64> = (0..n).map(|_| rng.random_range(-50.0..50.0)).collect();
    if allow_empty {
        for x in v.iter_mut() {
            if rng.random_bool(0.2) {
                *x = f64::NEG_INFINITY;
            }
        }
        if v.iter().all(|x| x.is_infinite()) {
            v[0] = 0.0;
        }
    }
    v
}

fn scoring_invariants() -> Outcome {
    let mut rng = ChaCha8Rng::seed_from_u64(5);
    let mut worst_sum = 0.0f64;
    for _ in 0..SCORING_INSTANCES {
        let closed = rng.random_range(1..6);
        let extra = rng.random_range(0..6);
        let reg = registry(closed, extra);
        let n = reg.len();
        let p_clip = softmax(&random_logits(&mut rng, n, false)).unwrap();
        let p_dino = softmax(&random_logits(&mut rng, n, true)).unwrap();
        let cfg = ScoringConfig {
            alpha: rng.random_range(0.0..=1.0),
            ..Default::default()
        };
        let b = fuse_and_score(&p_clip, &p_dino, &reg, &cfg).unwrap();
        worst_sum = worst_sum.max((b.p_inc.iter().sum::<f64>() - 1.0).abs());

        for (alpha, expect) in [(1.0, &p_clip), (0.0, &p_dino)] {
            let cfg = ScoringConfig {
                alpha,
                ..Default::default()
            };
            let b = fuse_and_score(&p_clip, &p_dino, &reg, &cfg).unwrap();
            let exact = b
                .p_inc
                .iter()
                .zip(expect.iter())
                .all(|(a, e)| a.to_bits() == e.to_bits());
            check(exact, format!("alpha {alpha} is not an exact identity"))?;
        }
    }
    check(
        worst_sum <= P_INC_SUM_TOL,
        format!("p_inc sum off by {worst_sum:e}"),
    )?;

    let mut violations = 0;
    for _ in 0..SCORING_INSTANCES {
        let closed = rng.random_range(1..6);
        let extra = rng.random_range(0..4);
        let small = registry(closed, extra);
        let big = registry(closed, extra + 1);
        let clip_small = random_logits(&mut rng, small.len(), false);
        let dino_small = random_logits(&mut rng, small.len(), true);
        let mut clip_big = clip_small.clone();
        clip_big.push(rng.random_range(-50.0..50.0));
        let mut dino_big = dino_small.clone();
        dino_big.push(rng.random_range(-50.0..50.0));
        let cfg = ScoringConfig {
            alpha: rng.random_range(0.0..=1.0),
            ..Default::default()
        };
        let s_small = fuse_and_score(
            &softmax(&clip_small).unwrap(),
            &softmax(&dino_small).unwrap(),
            &small,
            &cfg,
        )
        .unwrap()
        .score;
        let s_big = fuse_and_score(
            &softmax(&clip_big).unwrap(),
            &softmax(&dino_big).unwrap(),
            &big,
            &cfg,
        )
        .unwrap()
        .score;
        if s_big > s_small {
            violations += 1;
        }
    }
    check(
        violations == 0,
        format!("{violations} expansions increased S"),
    )?;

    let extreme = softmax(&[
        STABILITY_LOGIT,
        -STABILITY_LOGIT,
        0.0,
        STABILITY_LOGIT - 1.0,
    ])
    .unwrap();
    check(
        extreme.iter().all(|p| p.is_finite()) && (extreme.iter().sum::<f64>() - 1.0).abs() < 1e-12,
        "softmax is unstable at large logits",
    )?;
    let low = softmax(&[-STABILITY_LOGIT, -STABILITY_LOGIT]).unwrap();
    check(
        low == vec![0.5, 0.5],
        "softmax is unstable at large negative logits",
    )?;
    Ok(format!(
        "{SCORING_INSTANCES} fusions, max |sum-1| {worst_sum:e}; alpha 0/1 exact; 0 monotonicity violations; stable at ±{STABILITY_LOGIT:e}"
    ))
}

// ---------- loop contracts ----------

fn toy_backends(refine_keeps_wild: bool) -> Backends {
    let mut fixture = common::fixture();
    if refine_keeps_wild {
        for entry in fixture.llm.script.iter_mut() {
            if entry.response.starts_with("a clear photo") {
                entry.response = "a $1 in the wild, refined".into();
            }
        }
    }
    fixture.build().unwrap()
}

fn loop_contracts() -> Outcome {
    let templates = PromptTemplates::default();
    let reg = ClassRegistry::from_closed(&["ladybug", "bighorn"]).unwrap();
    let target = reg.closed()[0].clone();

    // zero growth in the second round ends the loop
    let chat = ScriptedLlm::new(vec![
        ScriptEntry::always("also share", "- Tortoise beetle").in_context("class ladybug")
    ])
    .unwrap()
    .with_default("ok");
    let sim = simulate_class(
        &reg,
        &target,
        &chat,
        &templates,
        &SimulationConfig::default(),
    )
    .map_err(|e| e.to_string())?;
    check(
        sim.rounds == 2 && sim.per_round == vec![1, 0],
        format!("zero-growth run: {:?}", sim.per_round),
    )?;

    // ever-growing answers stop at the cap
    let chat = ScriptedLlm::new(vec![
        ScriptEntry::once("also share", "- a1"),
        ScriptEntry::once("also share", "- a2"),
        ScriptEntry::once("also share", "- a3"),
        ScriptEntry::once("also share", "- a4"),
    ])
    .unwrap()
    .with_default("ok");
    let sim = simulate_class(
        &reg,
        &target,
        &chat,
        &templates,
        &SimulationConfig::default(),
    )
    .map_err(|e| e.to_string())?;
    check(
        sim.rounds == MAX_CYCLES,
        format!("growing run stopped after {} rounds", sim.rounds),
    )?;
    check(
        chat.calls() == 3 * MAX_CYCLES,
        format!("{} chat calls", chat.calls()),
    )?;

    // cross-assessing on the toy world, once where refinement helps and once where it never does
    let mut summary = Vec::new();
    for keeps_wild in [false, true] {
        let backends = toy_backends(keeps_wild);
        let mut reg = ClassRegistry::from_closed(&common::CLOSED).unwrap();
        reg.append(
            common::OPEN
                .iter()
                .map(|n| ClassLabel::new(n, Origin::VirtualSimilar).unwrap()),
        );
        let scoring = ScoringConfig::default();
        let mut store = FeatureStore::new();
        store
            .precompute_text_features(&reg, backends.image_text.as_ref(), &scoring, None)
            .map_err(|e| e.to_string())?;
        let ctx = GalleryContext {
            registry: &reg,
            store: &store,
            chat: backends.chat.as_ref(),
            generator: backends.image_gen.as_ref(),
            embedder: backends.image_text.as_ref(),
            templates: &templates,
            scoring: &scoring,
        };
        let cfg = GalleryConfig {
            k: common::IMAGES_PER_CLASS,
            ..Default::default()
        };
        let galleries = ctx.build_all(&cfg, 4).map_err(|e| e.to_string())?;
        let (mut max_assess, mut discarded) = (0, 0);
        for g in &galleries {
            check(
                g.images.len() + g.discarded_count + g.failed_count == cfg.k,
                format!("class {} slot counts do not add up", g.class),
            )?;
            discarded += g.discarded_count;
            for slot in &g.slots {
                max_assess = max_assess.max(slot.assessments());
                if slot.status == SlotStatus::Accepted {
                    let a = slot.revisions.last().and_then(|r| r.assessment.as_ref());
                    let ok = a.is_some_and(|a| {
                        reg.classes()[a.argmax_index].canonical() == g.class.canonical()
                    });
                    check(
                        ok,
                        format!("accepted image of {} is not its own argmax", g.class),
                    )?;
                }
            }
        }
        check(
            max_assess <= MAX_CYCLES,
            format!("{max_assess} assessments in one slot"),
        )?;
        if keeps_wild {
            check(
                max_assess == MAX_CYCLES && discarded > 0,
                "persistent misalignment was not discarded",
            )?;
        }
        summary.push(format!(
            "max {max_assess} assessments, {discarded} discarded"
        ));
    }
    Ok(format!(
        "self-check rounds 2 on zero growth, {MAX_CYCLES} at cap; gallery runs: {}",
        summary.join("; ")
    ))
}

// ---------- determinism ----------

fn osr(args: &[&str], cwd: &Path) -> std::process::Output {
    Command::new(env!("CARGO_BIN_EXE_osr"))
        .args(args)
        .current_dir(cwd)
        .output()
        .expect("osr runs")
}

fn determinism() -> Outcome {
    let dir = tempfile::tempdir().unwrap();
    let toy = common::write_toy(dir.path(), "");
    let start = Instant::now();
    for out in ["run_a", "run_b"] {
        let o = osr(
            &["--config", "config.toml", "--out", out, "evaluate"],
            &toy.root,
        );
        check(
            o.status.success(),
            format!("evaluate failed: {}", String::from_utf8_lossy(&o.stderr)),
        )?;
    }
    let elapsed = start.elapsed();
    let strip = |m: std::collections::BTreeMap<String, Vec<u8>>| {
        m.into_iter()
            .filter(|(k, _)| k != "config.toml")
            .collect::<Vec<_>>()
    };
    let a = strip(common::snapshot(&toy.root.join("run_a")));
    let b = strip(common::snapshot(&toy.root.join("run_b")));
    let names: Vec<&str> = a.iter().map(|(k, _)| k.as_str()).collect();
    for required in [
        "report.json",
        "split0/registry.json",
        "split0/gallery/manifest.json",
        "split0/store/manifest.json",
        "split0/store/vectors.bin",
        "split0/scores.jsonl",
    ] {
        check(
            names.contains(&required),
            format!("{required} was not written"),
        )?;
    }
    if let Some(((k, _), _)) = a
        .iter()
        .zip(&b)
        .find(|((ka, va), (kb, vb))| ka != kb || va != vb)
    {
        return Err(format!("runs differ at {k}"));
    }
    check(a.len() == b.len(), "runs wrote different file sets")?;
    check(
        elapsed < DETERMINISM_BUDGET,
        format!("two runs took {elapsed:?}"),
    )?;
    Ok(format!(
        "{} files byte-identical across two runs of 5 splits; {elapsed:?}",
        a.len()
    ))
}

// ---------- ablation differentials ----------

fn run_preset(root: &Path, preset: Preset) -> Result<Vec<osr_core::pipeline::ScoreRecord>, String> {
    let mut cfg = PipelineConfig::load(&root.join("config.toml")).map_err(|e| e.to_string())?;
    cfg.eval.split_file = Some(root.join("splits.json"));
    cfg.out_dir = root.join(format!("out_{preset}"));
    let cfg = cfg.with_preset(preset);
    let backends = cfg.build_backends().map_err(|e| e.to_string())?;
    let pipeline = Pipeline::new(&cfg, &backends).map_err(|e| e.to_string())?;
    let (manifest, splits) = resolve_splits(&cfg).map_err(|e| e.to_string())?;
    pipeline
        .run_protocol(&manifest, &splits, &cfg.out_dir, preset.as_str(), false)
        .map_err(|e| e.to_string())?;
    read_scores(&split_dir(&cfg.out_dir, 0).join(SCORES_FILE)).map_err(|e| e.to_string())
}

fn ablation_differentials() -> Outcome {
    let dir = tempfile::tempdir().unwrap();
    common::write_toy(dir.path(), "");
    let full = run_preset(dir.path(), Preset::Full)?;
    let baseline = run_preset(dir.path(), Preset::SoftmaxBaseline)?;
    let spurious: Vec<(f64, f64)> = full
        .iter()
        .zip(&baseline)
        .filter(|(f, _)| f.image_id.starts_with("tortoise_beetle"))
        .map(|(f, b)| (f.score, b.score))
        .collect();
    check(!spurious.is_empty(), "no spurious test images")?;
    check(
        spurious.iter().all(|(f, b)| f < b),
        format!("full S not strictly below baseline: {spurious:?}"),
    )?;
    let bits = |a: &[f64], b: &[f64]| {
        a.len() == b.len() && a.iter().zip(b).all(|(x, y)| x.to_bits() == y.to_bits())
    };
    let names = run_preset(dir.path(), Preset::NamesOnly)?;
    check(
        names.iter().all(|r| bits(&r.p_inc, &r.p_clip)),
        "names-only p_inc differs from p_clip",
    )?;
    let images = run_preset(dir.path(), Preset::ImagesOnly)?;
    check(
        images.iter().all(|r| bits(&r.p_inc, &r.p_dino)),
        "images-only p_inc differs from p_dino",
    )?;
    let (f, b) = spurious[0];
    Ok(format!(
        "{} near-closed open images: full S {f:.3e} < baseline S {b:.3e} (first); names-only and images-only exact over {} images",
        spurious.len(),
        names.len()
    ))
}

// ---------- cache ----------

fn cache() -> Outcome {
    let dir = tempfile::tempdir().unwrap();
    let backends = toy_backends(false);
    let mut reg = ClassRegistry::from_closed(&common::CLOSED).unwrap();
    reg.append([ClassLabel::new("tortoise beetle", Origin::VirtualSimilar).unwrap()]);
    let templates = PromptTemplates::default();
    let scoring = ScoringConfig::default();
    let mut text = FeatureStore::new();
    text.precompute_text_features(&reg, backends.image_text.as_ref(), &scoring, None)
        .map_err(|e| e.to_string())?;
    let galleries = GalleryContext {
        registry: &reg,
        store: &text,
        chat: backends.chat.as_ref(),
        generator: backends.image_gen.as_ref(),
        embedder: backends.image_text.as_ref(),
        templates: &templates,
        scoring: &scoring,
    }
    .build_all(
        &GalleryConfig {
            k: 3,
            ..Default::default()
        },
        2,
    )
    .map_err(|e| e.to_string())?;
    let mut store = text.clone();
    store
        .precompute_gallery_features(&galleries, backends.image.as_ref(), &scoring, None)
        .map_err(|e| e.to_string())?;

    store
        .save(&dir.path().join("a"))
        .map_err(|e| e.to_string())?;
    let loaded = FeatureStore::load(&dir.path().join("a")).map_err(|e| e.to_string())?;
    check(loaded == store, "loaded store differs")?;
    loaded
        .save(&dir.path().join("b"))
        .map_err(|e| e.to_string())?;
    for f in ["manifest.json", "vectors.bin"] {
        let same = std::fs::read(dir.path().join("a").join(f)).unwrap()
            == std::fs::read(dir.path().join("b").join(f)).unwrap();
        check(same, format!("{f} changed on re-save"))?;
    }

    let clip = MockEmbedder::new(common::embedder("image-text")).unwrap();
    let dino = MockEmbedder::new(common::embedder("image")).unwrap();
    let mut cold = FeatureStore::new();
    cold.precompute_text_features(&reg, &clip, &scoring, None)
        .map_err(|e| e.to_string())?;
    cold.precompute_gallery_features(&galleries, &dino, &scoring, None)
        .map_err(|e| e.to_string())?;
    let cold_calls = clip.calls() + dino.calls();
    let (clip2, dino2) = (
        MockEmbedder::new(common::embedder("image-text")).unwrap(),
        MockEmbedder::new(common::embedder("image")).unwrap(),
    );
    let mut warm = FeatureStore::new();
    warm.precompute_text_features(&reg, &clip2, &scoring, Some(&loaded))
        .map_err(|e| e.to_string())?;
    warm.precompute_gallery_features(&galleries, &dino2, &scoring, Some(&loaded))
        .map_err(|e| e.to_string())?;
    check(
        clip2.calls() + dino2.calls() == 0,
        format!(
            "{} provider calls on a warm cache",
            clip2.calls() + dino2.calls()
        ),
    )?;
    check(warm == loaded, "warm store differs from the cached one")?;
    Ok(format!(
        "round trip bit-exact; cold run {cold_calls} calls, warm run 0"
    ))
}

// ---------- baseline parity ----------

fn baseline_parity() -> Outcome {
    let base = PipelineConfig::default();
    let diff = base
        .diff(&base.with_preset(Preset::SoftmaxBaseline))
        .map_err(|e| e.to_string())?;
    let keys: Vec<&str> = diff.iter().map(|(k, _, _)| k.as_str()).collect();
    check(
        keys == ["simulation.enabled"],
        format!("baseline differs in {keys:?}"),
    )?;

    let dir = tempfile::tempdir().unwrap();
    common::write_toy(dir.path(), "");
    // a chat script that never names a new class
    let mut fixture = common::fixture();
    fixture.llm.script.retain(|e| !e.response.starts_with("- "));
    std::fs::write(
        dir.path().join("fixture.json"),
        serde_json::to_string(&fixture).unwrap(),
    )
    .unwrap();

    let full = run_preset(dir.path(), Preset::Full)?;
    let baseline = run_preset(dir.path(), Preset::SoftmaxBaseline)?;
    let registry =
        osr_core::pipeline::load_registry(&split_dir(&dir.path().join("out_softmax-baseline"), 0))
            .map_err(|e| e.to_string())?;
    check(
        registry.len() == common::CLOSED.len() && registry.virtual_classes().is_empty(),
        "baseline registry is not closed-only",
    )?;
    let empty_full = osr_core::pipeline::load_registry(&split_dir(&dir.path().join("out_full"), 0))
        .map_err(|e| e.to_string())?;
    check(
        empty_full.virtual_classes().is_empty(),
        "fixture unexpectedly produced virtual classes",
    )?;
    let read =
        |p: &str| std::fs::read(split_dir(&dir.path().join(p), 0).join(SCORES_FILE)).unwrap();
    check(
        read("out_full") == read("out_softmax-baseline"),
        "scores differ with an empty virtual set",
    )?;
    check(full == baseline, "score records differ")?;
    Ok(format!(
        "config diff {keys:?}; closed-only registry; {} identical score lines",
        full.len()
    ))
}

fn main() -> std::process::ExitCode {
    let criteria: Vec<(&str, fn() -> Outcome)> = vec![
        ("metric oracles", metric_oracles),
        ("scoring invariants", scoring_invariants),
        ("loop contracts", loop_contracts),
        ("determinism", determinism),
        ("ablation differentials", ablation_differentials),
        ("cache", cache),
        ("baseline parity", baseline_parity),
    ];
    let total = criteria.len();
    let mut failed = Vec::new();
    let prev = std::panic::take_hook();
    std::panic::set_hook(Box::new(|_| {}));
    for (name, f) in criteria {
        let outcome = catch_unwind(AssertUnwindSafe(f)).unwrap_or_else(|p| {
            Err(p
                .downcast_ref::<String>()
                .cloned()
                .or_else(|| p.downcast_ref::<&str>().map(|s| s.to_string()))
                .unwrap_or_else(|| "panicked".into()))
        });
        match outcome {
            Ok(detail) => println!("PASS  {name}: {detail}"),
            Err(why) => {
                println!("FAIL  {name}: {why}");
                failed.push(name);
            }
        }
    }
    std::panic::set_hook(prev);
    println!(
        "acceptance: {} of {} criteria passed",
        total - failed.len(),
        total
    );
    if failed.is_empty() {
        std::process::ExitCode::SUCCESS
    } else {
        std::process::ExitCode::FAILURE
    }
}
