//! Simulation of virtual open-set class names with a conversational model.
//!
//! For each closed class, a three-question chain asks for visual features,
//! discriminative features of the target, and other classes sharing them.
//! Self-checking repeats the chain with the list expanded by everything found
//! so far until a round finds nothing new or the round cap is hit. One extra
//! question then asks for classes dissimilar to the whole list.

use std::io::Write as _;
use std::path::Path;

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::backends::{BackendError, ChatTurn, LlmClient, Role};
use crate::error::{Error, Result};
use crate::fsutil::write_atomic;
use crate::model::{ClassLabel, ClassRegistry, Origin};

pub mod parse;
pub mod prompts;

pub use parse::{parse_class_list, parse_numbered_items};
pub use prompts::{PromptTemplates, TemplateId};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(default)]
pub struct SimulationConfig {
    /// Simulate virtual classes at all. Off reproduces the plain softmax baseline.
    pub enabled: bool,
    pub max_selfcheck_cycles: usize,
    pub intermediate_reasoning: bool,
    pub self_checking: bool,
    pub include_dissimilar: bool,
}

impl Default for SimulationConfig {
    fn default() -> Self {
        SimulationConfig {
            enabled: true,
            max_selfcheck_cycles: 3,
            intermediate_reasoning: true,
            self_checking: true,
            include_dissimilar: true,
        }
    }
}

impl SimulationConfig {
    pub fn validate(&self) -> Result<()> {
        if self.max_selfcheck_cycles < 1 {
            return Err(Error::Config(
                "max_selfcheck_cycles must be at least 1".into(),
            ));
        }
        Ok(())
    }

    fn round_cap(&self) -> usize {
        if self.self_checking {
            self.max_selfcheck_cycles
        } else {
            1
        }
    }
}

/// Audit trail of one conversation.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct ChatTranscript {
    pub label: String,
    pub class_scope: Option<String>,
    pub turns: Vec<ChatTurn>,
}

impl ChatTranscript {
    pub fn new(label: impl Into<String>, class_scope: Option<&ClassLabel>) -> Self {
        ChatTranscript {
            label: label.into(),
            class_scope: class_scope.map(|c| c.name().to_string()),
            turns: Vec::new(),
        }
    }

    /// Sends `prompt` with the conversation so far and records both turns.
    pub fn ask(
        &mut self,
        chat: &dyn LlmClient,
        prompt: String,
    ) -> std::result::Result<String, BackendError> {
        self.turns.push(ChatTurn::user(prompt));
        match chat.send(&self.turns) {
            Ok(answer) => {
                self.turns.push(ChatTurn::assistant(answer.clone()));
                Ok(answer)
            }
            Err(e) => {
                self.turns.pop();
                Err(e)
            }
        }
    }

    pub fn roles_alternate(&self) -> bool {
        self.turns.iter().enumerate().all(|(i, t)| {
            t.role
                == if i % 2 == 0 {
                    Role::User
                } else {
                    Role::Assistant
                }
        })
    }
}

#[derive(Serialize)]
struct TranscriptLine<'a> {
    conversation: &'a str,
    class_scope: Option<&'a str>,
    turn: usize,
    role: Role,
    text: &'a str,
}

/// Writes transcripts as JSONL, one turn per line.
pub fn write_transcripts(path: &Path, transcripts: &[ChatTranscript]) -> Result<()> {
    let mut buf = Vec::new();
    for t in transcripts {
        for (i, turn) in t.turns.iter().enumerate() {
            let line = TranscriptLine {
                conversation: &t.label,
                class_scope: t.class_scope.as_deref(),
                turn: i,
                role: turn.role,
                text: &turn.text,
            };
            serde_json::to_writer(&mut buf, &line)?;
            buf.write_all(b"\n").map_err(|e| Error::io(path, e))?;
        }
    }
    write_atomic(path, &buf)
}

fn join_names<S: AsRef<str>>(names: &[S]) -> String {
    names
        .iter()
        .map(AsRef::as_ref)
        .collect::<Vec<_>>()
        .join(", ")
}

/// Instantiates the three chained questions for `target`.
pub fn build_question_chain<S: AsRef<str>>(
    templates: &PromptTemplates,
    names: &[S],
    target: &str,
) -> Result<[String; 3]> {
    if !names.iter().any(|n| n.as_ref() == target) {
        return Err(Error::UnknownTarget(target.to_string()));
    }
    let classes = join_names(names);
    Ok([
        templates.render(TemplateId::Q1DescribeAll, &[("classes", &classes)])?,
        templates.render(TemplateId::Q2Discriminative, &[("class", target)])?,
        templates.render(TemplateId::Q3SharedClasses, &[])?,
    ])
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct ClassSimulation {
    pub target: ClassLabel,
    /// New classes in discovery order: round, then answer position.
    pub new_classes: Vec<ClassLabel>,
    pub rounds: usize,
    /// Classes found per round; the last entry is empty unless the cap ended the loop.
    pub per_round: Vec<usize>,
    pub transcripts: Vec<ChatTranscript>,
}

/// Runs the question chain for one closed class, with self-checking rounds.
pub fn simulate_class(
    registry: &ClassRegistry,
    target: &ClassLabel,
    chat: &dyn LlmClient,
    templates: &PromptTemplates,
    cfg: &SimulationConfig,
) -> Result<ClassSimulation> {
    cfg.validate()?;
    if target.origin() != Origin::Closed {
        return Err(Error::Registry(format!(
            "simulation target {:?} is not a closed class",
            target.name()
        )));
    }
    if !registry.contains_canonical(target.canonical()) {
        return Err(Error::UnknownTarget(target.name().to_string()));
    }
    let mut working = registry.clone();
    let mut new_classes = Vec::new();
    let mut per_round = Vec::new();
    let mut transcripts = Vec::new();

    for round in 1..=cfg.round_cap() {
        let names = working.names();
        let mut transcript = ChatTranscript::new(
            format!("simulate:{}:round{round}", target.canonical()),
            Some(target),
        );
        let fail = |source| Error::Simulation {
            class: target.name().to_string(),
            round,
            source,
        };
        let answer = if cfg.intermediate_reasoning {
            let prompts = build_question_chain(templates, &names, target.name())?;
            let mut last = String::new();
            for prompt in prompts {
                last = transcript.ask(chat, prompt).map_err(fail)?;
            }
            last
        } else {
            let prompt = templates.render(
                TemplateId::QNoChain,
                &[("classes", &join_names(&names)), ("class", target.name())],
            )?;
            transcript.ask(chat, prompt).map_err(fail)?
        };
        transcripts.push(transcript);

        let found = parse_class_list(&answer, &working);
        per_round.push(found.len());
        if found.is_empty() {
            break;
        }
        let rejects = working.append(found.iter().cloned());
        debug_assert!(rejects.is_empty());
        new_classes.extend(found);
    }

    Ok(ClassSimulation {
        target: target.clone(),
        rounds: per_round.len(),
        new_classes,
        per_round,
        transcripts,
    })
}

/// Asks once for classes unlike everything in `registry`.
pub fn simulate_dissimilar(
    registry: &ClassRegistry,
    chat: &dyn LlmClient,
    templates: &PromptTemplates,
) -> Result<(Vec<ClassLabel>, ChatTranscript)> {
    let prompt = templates.render(
        TemplateId::QDissimilar,
        &[("classes", &join_names(&registry.names()))],
    )?;
    let mut transcript = ChatTranscript::new("simulate:dissimilar", None);
    let answer = transcript
        .ask(chat, prompt)
        .map_err(|source| Error::Simulation {
            class: "<dissimilar>".into(),
            round: 1,
            source,
        })?;
    let found = parse_class_list(&answer, registry)
        .into_iter()
        .map(|c| c.with_origin(Origin::VirtualDissimilar))
        .collect();
    Ok((found, transcript))
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct SimulationOutcome {
    pub registry: ClassRegistry,
    pub per_class: Vec<ClassSimulation>,
    pub transcripts: Vec<ChatTranscript>,
    pub rejected: Vec<String>,
}

/// Expands a closed-only registry with simulated virtual classes.
///
/// Per-class chains run on a pool of `parallelism` threads; results merge in
/// closed-class order so the output does not depend on scheduling.
pub fn simulate_all(
    registry: &ClassRegistry,
    chat: &dyn LlmClient,
    templates: &PromptTemplates,
    cfg: &SimulationConfig,
    parallelism: usize,
) -> Result<SimulationOutcome> {
    cfg.validate()?;
    if !registry.virtual_classes().is_empty() {
        return Err(Error::Registry(
            "simulation expects a registry of closed classes only".into(),
        ));
    }
    if !cfg.enabled {
        return Ok(SimulationOutcome {
            registry: registry.clone(),
            per_class: Vec::new(),
            transcripts: Vec::new(),
            rejected: Vec::new(),
        });
    }

    let pool = rayon::ThreadPoolBuilder::new()
        .num_threads(parallelism.max(1))
        .build()
        .map_err(|e| Error::Config(e.to_string()))?;
    let results: Vec<Result<ClassSimulation>> = pool.install(|| {
        registry
            .closed()
            .par_iter()
            .map(|target| simulate_class(registry, target, chat, templates, cfg))
            .collect()
    });

    let mut expanded = registry.clone();
    let mut per_class = Vec::new();
    let mut transcripts = Vec::new();
    let mut rejected = Vec::new();
    let mut failures = Vec::new();
    for (target, result) in registry.closed().iter().zip(results) {
        match result {
            Ok(sim) => {
                rejected.extend(expanded.append(sim.new_classes.iter().cloned()));
                transcripts.extend(sim.transcripts.iter().cloned());
                per_class.push(sim);
            }
            Err(e) => failures.push((target.name().to_string(), e.to_string())),
        }
    }
    if !failures.is_empty() {
        return Err(Error::PartialSimulation {
            failures,
            partial: expanded,
        });
    }

    if cfg.include_dissimilar {
        let (found, transcript) = simulate_dissimilar(&expanded, chat, templates)?;
        rejected.extend(expanded.append(found));
        transcripts.push(transcript);
    }
    if !rejected.is_empty() {
        log::info!(
            "dropped {} duplicate simulated class name(s)",
            rejected.len()
        );
    }

    Ok(SimulationOutcome {
        registry: expanded,
        per_class,
        transcripts,
        rejected,
    })
}
