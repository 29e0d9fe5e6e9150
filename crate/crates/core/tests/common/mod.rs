//! Toy world shared by the integration tests: five classes, scripted chat,
//! concept-table embedders and a small on-disk dataset.
#![allow(dead_code)]

use std::collections::BTreeMap;
use std::path::{Path, PathBuf};

use osr_core::backends::fixture::{GeneratorFixture, LlmFixture};
use osr_core::backends::mock::render_prompt_png;
use osr_core::backends::{MockEmbedderSpec, MockFixture, ScriptEntry};

pub const CLOSED: [&str; 3] = ["ladybug", "bighorn", "goldfish"];
pub const OPEN: [&str; 2] = ["tortoise beetle", "ox"];
pub const IMAGES_PER_CLASS: usize = 5;

const AXES: [&str; 10] = [
    "ladybug",
    "bighorn",
    "goldfish",
    "tortoise beetle",
    "ox",
    "ladybird spider",
    "mountain goat",
    "koi",
    "sports car",
    "teacup",
];
const DIM: usize = 12;

fn axis(name: &str) -> Vec<f32> {
    let mut v = vec![0.0; DIM];
    v[AXES.iter().position(|a| *a == name).unwrap()] = 1.0;
    v
}

fn mix(parts: &[(&str, f32)]) -> Vec<f32> {
    let mut v = vec![0.0; DIM];
    for (name, w) in parts {
        for (a, b) in v.iter_mut().zip(axis(name)) {
            *a += w * b;
        }
    }
    v
}

fn concepts() -> BTreeMap<String, Vec<f32>> {
    let mut c: BTreeMap<String, Vec<f32>> = BTreeMap::new();
    for name in [
        "ladybug",
        "bighorn",
        "goldfish",
        "ox",
        "sports car",
        "teacup",
    ] {
        c.insert(name.into(), axis(name));
    }
    // near neighbours of the closed classes
    c.insert(
        "tortoise beetle".into(),
        mix(&[("ladybug", 0.8), ("tortoise beetle", 0.6)]),
    );
    c.insert(
        "ladybird spider".into(),
        mix(&[("ladybug", 0.7), ("ladybird spider", 0.7)]),
    );
    c.insert(
        "mountain goat".into(),
        mix(&[("bighorn", 0.7), ("mountain goat", 0.7)]),
    );
    c.insert("koi".into(), mix(&[("goldfish", 0.8), ("koi", 0.6)]));
    // scenes "in the wild" drift toward ox
    c.insert("wild".into(), mix(&[("ox", 2.0)]));
    c
}

pub fn embedder(salt: &str) -> MockEmbedderSpec {
    MockEmbedderSpec {
        dim: DIM,
        salt: salt.into(),
        noise: 0.05,
        concepts: concepts(),
        ..Default::default()
    }
}

const SCENES: &str = "1. a $2 on a sunny day\n2. a $2 at night\n3. a close-up of a $2\n4. a $2 in the wild\n5. a $2 seen from far away";

pub fn script() -> Vec<ScriptEntry> {
    let mut s = vec![
        ScriptEntry::regex(
            r"describe the visual features of each class",
            "Each class has its own colours, shapes and textures.",
        ),
        ScriptEntry::regex(
            r"visual features of class (.+?) compared",
            "The class $1 has a distinctive silhouette and colouring.",
        ),
    ];
    let shared = [
        ("ladybug", "- Tortoise beetle\n- Ladybird spider"),
        ("bighorn", "- Ox\n- Mountain goat"),
        ("goldfish", "- Koi"),
        ("tortoise beetle", "- Ladybug"),
        ("ox", "- Bighorn"),
    ];
    for (class, answer) in shared {
        s.push(
            ScriptEntry::always("also share these discriminative visual features", answer)
                .in_context(&format!("features of class {class} compared")),
        );
        s.push(ScriptEntry::always(
            &format!("share visual features with {class} while"),
            answer,
        ));
    }
    s.extend([
        ScriptEntry::always("not similar to them", "- Sports car\n- Teacup"),
        ScriptEntry::regex(
            r"(\d+) diverse descriptions, each describing a different scene about the class (.+?)\?",
            SCENES,
        ),
        ScriptEntry::regex(r"characteristics of class (.+?)\?", "a clear photo of a $1"),
        ScriptEntry::regex(r"better depict class (.+?)\?", "a detailed photo of a $1"),
    ]);
    s
}

pub fn fixture() -> MockFixture {
    MockFixture {
        llm: LlmFixture {
            script: script(),
            default_response: Some("- None".into()),
        },
        image_generator: GeneratorFixture {
            salt: "toy".into(),
            fail_on: Vec::new(),
        },
        image_text_embedder: embedder("image-text"),
        image_embedder: embedder("image"),
    }
}

pub fn test_prompt(class: &str, i: usize) -> String {
    format!("a photo of a {class}, sample {i}")
}

pub struct Toy {
    pub root: PathBuf,
    pub config: PathBuf,
}

/// Writes fixture, dataset, split file and config under `root`.
/// `extra` is appended to the config verbatim.
pub fn write_toy(root: &Path, extra: &str) -> Toy {
    std::fs::create_dir_all(root.join("dataset")).unwrap();
    std::fs::write(
        root.join("fixture.json"),
        serde_json::to_string_pretty(&fixture()).unwrap(),
    )
    .unwrap();
    let mut manifest = String::new();
    for class in CLOSED.iter().chain(OPEN.iter()) {
        for i in 0..IMAGES_PER_CLASS {
            let file = format!("{}_{i}.png", class.replace(' ', "_"));
            let png = render_prompt_png(&test_prompt(class, i), "dataset").unwrap();
            std::fs::write(root.join("dataset").join(&file), png).unwrap();
            manifest.push_str(&format!(
                "{{\"path\":\"{file}\",\"class\":\"{class}\",\"split_role\":\"test\"}}\n"
            ));
        }
    }
    std::fs::write(root.join("dataset/manifest.jsonl"), manifest).unwrap();
    let split = serde_json::json!([{
        "split_index": 0,
        "closed_classes": CLOSED,
        "open_classes": OPEN,
    }]);
    std::fs::write(root.join("splits.json"), split.to_string()).unwrap();
    let config = format!(
        "seed = 7\nparallelism = 4\n\n[gallery]\nk = {IMAGES_PER_CLASS}\n\n[eval]\nprotocol = \"custom:3:2\"\ndataset = \"dataset/manifest.jsonl\"\n\n[backends]\nkind = \"mock\"\nfixture = \"fixture.json\"\n{extra}"
    );
    let config_path = root.join("config.toml");
    std::fs::write(&config_path, config).unwrap();
    Toy {
        root: root.to_path_buf(),
        config: config_path,
    }
}

/// Every file under `dir`, relative path to bytes.
pub fn snapshot(dir: &Path) -> BTreeMap<String, Vec<u8>> {
    fn walk(base: &Path, dir: &Path, out: &mut BTreeMap<String, Vec<u8>>) {
        let mut entries: Vec<_> = std::fs::read_dir(dir)
            .unwrap()
            .map(|e| e.unwrap().path())
            .collect();
        entries.sort();
        for p in entries {
            if p.is_dir() {
                walk(base, &p, out);
            } else {
                let rel = p
                    .strip_prefix(base)
                    .unwrap()
                    .to_string_lossy()
                    .replace('\\', "/");
                out.insert(rel, std::fs::read(&p).unwrap());
            }
        }
    }
    let mut out = BTreeMap::new();
    walk(dir, dir, &mut out);
    out
}
