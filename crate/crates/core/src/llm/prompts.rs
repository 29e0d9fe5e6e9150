//! Prompt templates with `{name}` placeholders.
//!
//! A template file holds one `[id]` header per template followed by its body;
//! lines starting with `#` are comments. Ids not present in the file keep
//! their built-in body.

use std::collections::BTreeMap;
use std::fmt;
use std::path::Path;
use std::str::FromStr;
use std::sync::OnceLock;

use regex::Regex;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::fsutil::read_to_string;

pub const CLASS_LIST_FORMAT: &str = "Answer with one class name per line, prefixed by '- '.";

const PLACEHOLDERS: &[&str] = &["classes", "class", "K", "desc", "confused", "target"];

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum TemplateId {
    Q1DescribeAll,
    Q2Discriminative,
    Q3SharedClasses,
    QDissimilar,
    QDescriptions,
    QDescriptionsMore,
    QRefine,
    QNaiveRefine,
    QNoChain,
}

impl TemplateId {
    pub const ALL: [TemplateId; 9] = [
        TemplateId::Q1DescribeAll,
        TemplateId::Q2Discriminative,
        TemplateId::Q3SharedClasses,
        TemplateId::QDissimilar,
        TemplateId::QDescriptions,
        TemplateId::QDescriptionsMore,
        TemplateId::QRefine,
        TemplateId::QNaiveRefine,
        TemplateId::QNoChain,
    ];

    pub fn as_str(self) -> &'static str {
        match self {
            TemplateId::Q1DescribeAll => "q1_describe_all",
            TemplateId::Q2Discriminative => "q2_discriminative",
            TemplateId::Q3SharedClasses => "q3_shared_classes",
            TemplateId::QDissimilar => "q_dissimilar",
            TemplateId::QDescriptions => "q_descriptions",
            TemplateId::QDescriptionsMore => "q_descriptions_more",
            TemplateId::QRefine => "q_refine",
            TemplateId::QNaiveRefine => "q_naive_refine",
            TemplateId::QNoChain => "q_no_chain",
        }
    }

    fn default_body(self) -> String {
        let body = match self {
            TemplateId::Q1DescribeAll => {
                "Given a list of classes {classes}, can you describe the visual features of each class in the list?"
            }
            TemplateId::Q2Discriminative => {
                "What are the discriminative visual features of class {class} compared with other classes in the list?"
            }
            TemplateId::Q3SharedClasses => {
                return format!(
                    "Can you list other classes that also share these discriminative visual features? {CLASS_LIST_FORMAT}"
                )
            }
            TemplateId::QDissimilar => {
                return format!(
                    "Given a list of classes {{classes}}, can you name classes that are not similar to them? {CLASS_LIST_FORMAT}"
                )
            }
            TemplateId::QNoChain => {
                return format!(
                    "Given a list of classes {{classes}}, can you name other classes that share visual features with {{class}} while these shared features are discriminative in the list? {CLASS_LIST_FORMAT}"
                )
            }
            TemplateId::QDescriptions => {
                "Can you write {K} diverse descriptions, each describing a different scene about the class {class}? Answer with a numbered list of exactly {K} items, one description per line."
            }
            TemplateId::QDescriptionsMore => {
                "Can you write {K} more diverse descriptions, each describing a different scene about the class {class}? Answer with a numbered list of exactly {K} items, one description per line."
            }
            TemplateId::QRefine => {
                "This description \"{desc}\" seems more like class {confused} to me. Can you refine it to enhance the characteristics of class {target}? Answer with the refined description only."
            }
            TemplateId::QNaiveRefine => {
                "Description: \"{desc}\". Can you refine this description to better depict class {target}? Answer with the refined description only."
            }
        };
        body.to_string()
    }
}

impl fmt::Display for TemplateId {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

impl FromStr for TemplateId {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        TemplateId::ALL
            .into_iter()
            .find(|id| id.as_str() == s)
            .ok_or_else(|| Error::Template(format!("unknown template id {s:?}")))
    }
}

fn placeholder_re() -> &'static Regex {
    static RE: OnceLock<Regex> = OnceLock::new();
    RE.get_or_init(|| Regex::new(r"\{([A-Za-z_]+)\}").expect("valid regex"))
}

fn placeholders(body: &str) -> impl Iterator<Item = &str> {
    placeholder_re()
        .captures_iter(body)
        .map(|c| c.get(1).map_or("", |m| m.as_str()))
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct PromptTemplates {
    bodies: BTreeMap<TemplateId, String>,
}

impl Default for PromptTemplates {
    fn default() -> Self {
        PromptTemplates {
            bodies: TemplateId::ALL
                .into_iter()
                .map(|id| (id, id.default_body()))
                .collect(),
        }
    }
}

impl PromptTemplates {
    pub fn parse(text: &str) -> Result<Self> {
        let mut templates = Self::default();
        let mut current: Option<(TemplateId, Vec<&str>)> = None;
        let finish = |cur: Option<(TemplateId, Vec<&str>)>, t: &mut Self| -> Result<()> {
            if let Some((id, lines)) = cur {
                let body = lines.join("\n").trim().to_string();
                t.set(id, body)?;
            }
            Ok(())
        };
        for line in text.lines() {
            let trimmed = line.trim();
            if trimmed.starts_with('#') {
                continue;
            }
            if let Some(name) = trimmed.strip_prefix('[').and_then(|r| r.strip_suffix(']')) {
                if let Ok(id) = name.parse::<TemplateId>() {
                    finish(current.take(), &mut templates)?;
                    current = Some((id, Vec::new()));
                    continue;
                }
            }
            match current.as_mut() {
                Some((_, lines)) => lines.push(line),
                None if trimmed.is_empty() => {}
                None => {
                    return Err(Error::Template(format!(
                        "text outside any template section: {trimmed:?}"
                    )))
                }
            }
        }
        finish(current, &mut templates)?;
        Ok(templates)
    }

    pub fn load(path: &Path) -> Result<Self> {
        Self::parse(&read_to_string(path)?)
    }

    pub fn set(&mut self, id: TemplateId, body: String) -> Result<()> {
        if body.is_empty() {
            return Err(Error::Template(format!("template {id} is empty")));
        }
        if let Some(bad) = placeholders(&body).find(|p| !PLACEHOLDERS.contains(p)) {
            return Err(Error::Template(format!(
                "template {id} uses unknown placeholder {{{bad}}}"
            )));
        }
        self.bodies.insert(id, body);
        Ok(())
    }

    pub fn body(&self, id: TemplateId) -> &str {
        &self.bodies[&id]
    }

    /// Substitutes every placeholder. A placeholder without a binding is an error.
    pub fn render(&self, id: TemplateId, bindings: &[(&str, &str)]) -> Result<String> {
        let body = self.body(id);
        let lookup = |name: &str| bindings.iter().find(|(k, _)| *k == name).map(|(_, v)| *v);
        if let Some(missing) = placeholders(body).find(|p| lookup(p).is_none()) {
            return Err(Error::Template(format!(
                "template {id} needs a value for {{{missing}}}"
            )));
        }
        Ok(placeholder_re()
            .replace_all(body, |caps: &regex::Captures| {
                lookup(&caps[1]).unwrap_or_default().to_string()
            })
            .into_owned())
    }

    /// Serializes every template in file form.
    pub fn to_file_string(&self) -> String {
        self.bodies
            .iter()
            .map(|(id, body)| format!("[{id}]\n{body}\n"))
            .collect::<Vec<_>>()
            .join("\n")
    }
}
