//! Prompt templates for critique generation, refinement, and correction.
//!
//! Templates live as plain-text assets (one file per template, filename =
//! template name) compiled into the binary, with an optional directory
//! override for experimentation. Placeholders use `{name}` syntax; literal
//! braces are written doubled (`{{`, `}}`). Judge and ranking templates carry
//! a rating-format suffix instructing the model to end with `Rating: [[k]]`.

use std::collections::BTreeMap;
use std::path::Path;

use thiserror::Error;

use crate::dataset::Domain;

/// Instruction appended to every template whose reply must end in a parseable
/// numeric rating.
pub const RATING_SUFFIX: &str = "After providing your explanation, please rate the response on a scale of 1 to 10 by strictly following this format: \"[[rating]]\", for example: \"Rating: [[5]]\".";

#[derive(Debug, Error)]
pub enum PromptError {
    #[error("unknown template {0:?}")]
    UnknownTemplate(String),
    #[error("template {template:?} references unbound placeholder {placeholder:?}")]
    UnboundPlaceholder { template: String, placeholder: String },
    #[error("template {name:?} is malformed: {message}")]
    BadTemplate { name: String, message: String },
    #[error("failed to read template directory {path}: {message}")]
    Dir { path: String, message: String },
}

#[derive(Debug, Clone, PartialEq)]
enum Segment {
    Literal(String),
    Placeholder(String),
}

/// A parsed template: literal runs interleaved with placeholder slots.
#[derive(Debug, Clone, PartialEq)]
pub struct Template {
    name: String,
    segments: Vec<Segment>,
    rating_suffix: bool,
}

fn parse_segments(name: &str, source: &str) -> Result<Vec<Segment>, PromptError> {
    let mut segments = Vec::new();
    let mut literal = String::new();
    let mut chars = source.chars().peekable();
    while let Some(c) = chars.next() {
        match c {
            '{' => {
                if chars.peek() == Some(&'{') {
                    chars.next();
                    literal.push('{');
                    continue;
                }
                let mut placeholder = String::new();
                loop {
                    match chars.next() {
                        Some('}') => break,
                        Some(p) if p.is_ascii_alphanumeric() || p == '_' => placeholder.push(p),
                        Some(p) => {
                            return Err(PromptError::BadTemplate {
                                name: name.to_string(),
                                message: format!("invalid character {p:?} in placeholder name"),
                            })
                        }
                        None => {
                            return Err(PromptError::BadTemplate {
                                name: name.to_string(),
                                message: "unterminated placeholder".to_string(),
                            })
                        }
                    }
                }
                if placeholder.is_empty() {
                    return Err(PromptError::BadTemplate {
                        name: name.to_string(),
                        message: "empty placeholder name".to_string(),
                    });
                }
                if !literal.is_empty() {
                    segments.push(Segment::Literal(std::mem::take(&mut literal)));
                }
                segments.push(Segment::Placeholder(placeholder));
            }
            '}' => {
                if chars.peek() == Some(&'}') {
                    chars.next();
                    literal.push('}');
                } else {
                    return Err(PromptError::BadTemplate {
                        name: name.to_string(),
                        message: "unmatched closing brace".to_string(),
                    });
                }
            }
            other => literal.push(other),
        }
    }
    if !literal.is_empty() {
        segments.push(Segment::Literal(literal));
    }
    Ok(segments)
}

impl Template {
    fn parse(name: &str, source: &str) -> Result<Self, PromptError> {
        Ok(Template {
            name: name.to_string(),
            segments: parse_segments(name, source.trim_end())?,
            rating_suffix: name_requires_rating_suffix(name),
        })
    }

    pub fn name(&self) -> &str {
        &self.name
    }

    /// Whether rendering appends [`RATING_SUFFIX`].
    pub fn requires_rating_suffix(&self) -> bool {
        self.rating_suffix
    }

    /// Placeholder names in first-appearance order, deduplicated.
    pub fn placeholders(&self) -> Vec<&str> {
        let mut seen = Vec::new();
        for segment in &self.segments {
            if let Segment::Placeholder(p) = segment {
                if !seen.contains(&p.as_str()) {
                    seen.push(p.as_str());
                }
            }
        }
        seen
    }
}

/// Templates whose replies must end in a rating: every judge plus the critique
/// ranker. Summarization and correction replies are free-form text.
fn name_requires_rating_suffix(name: &str) -> bool {
    name.starts_with("judge_") || name == "rank"
}

/// Built-in template names, in asset order.
pub const TEMPLATE_NAMES: [&str; 7] =
    ["judge_chat", "judge_math", "judge_code", "judge_safety", "summarize", "rank", "correct"];

const BUILTIN_SOURCES: [(&str, &str); 7] = [
    ("judge_chat", include_str!("../assets/templates/judge_chat.txt")),
    ("judge_math", include_str!("../assets/templates/judge_math.txt")),
    ("judge_code", include_str!("../assets/templates/judge_code.txt")),
    ("judge_safety", include_str!("../assets/templates/judge_safety.txt")),
    ("summarize", include_str!("../assets/templates/summarize.txt")),
    ("rank", include_str!("../assets/templates/rank.txt")),
    ("correct", include_str!("../assets/templates/correct.txt")),
];

/// Loaded templates addressable by name.
#[derive(Debug, Clone)]
pub struct TemplateStore {
    templates: BTreeMap<String, Template>,
}

impl TemplateStore {
    /// The compiled-in template set.
    pub fn builtin() -> Self {
        let mut templates = BTreeMap::new();
        for (name, source) in BUILTIN_SOURCES {
            let template =
                Template::parse(name, source).expect("built-in templates are well-formed");
            templates.insert(name.to_string(), template);
        }
        TemplateStore { templates }
    }

    /// Builtins overlaid with every `*.txt` file in `dir` (file stem becomes
    /// the template name, replacing a builtin of the same name or adding a new
    /// one).
    pub fn from_dir(dir: &Path) -> Result<Self, PromptError> {
        let mut store = Self::builtin();
        let display = dir.display().to_string();
        let entries = std::fs::read_dir(dir)
            .map_err(|e| PromptError::Dir { path: display.clone(), message: e.to_string() })?;
        for entry in entries {
            let entry = entry
                .map_err(|e| PromptError::Dir { path: display.clone(), message: e.to_string() })?;
            let path = entry.path();
            if path.extension().and_then(|e| e.to_str()) != Some("txt") {
                continue;
            }
            let Some(name) = path.file_stem().and_then(|s| s.to_str()).map(str::to_string)
            else {
                continue;
            };
            let source = std::fs::read_to_string(&path).map_err(|e| PromptError::Dir {
                path: path.display().to_string(),
                message: e.to_string(),
            })?;
            store.templates.insert(name.clone(), Template::parse(&name, &source)?);
        }
        Ok(store)
    }

    pub fn get(&self, name: &str) -> Result<&Template, PromptError> {
        self.templates.get(name).ok_or_else(|| PromptError::UnknownTemplate(name.to_string()))
    }

    pub fn names(&self) -> impl Iterator<Item = &str> {
        self.templates.keys().map(String::as_str)
    }

    /// Renders `name` with the given placeholder bindings, appending the
    /// rating suffix when the template calls for one. Every placeholder in the
    /// template must be bound; extra bindings are ignored.
    pub fn render(&self, name: &str, bindings: &[(&str, &str)]) -> Result<String, PromptError> {
        let template = self.get(name)?;
        let mut out = String::new();
        for segment in &template.segments {
            match segment {
                Segment::Literal(text) => out.push_str(text),
                Segment::Placeholder(placeholder) => {
                    let value = bindings
                        .iter()
                        .find(|(key, _)| key == placeholder)
                        .map(|(_, value)| *value)
                        .ok_or_else(|| PromptError::UnboundPlaceholder {
                            template: name.to_string(),
                            placeholder: placeholder.clone(),
                        })?;
                    out.push_str(value);
                }
            }
        }
        if template.rating_suffix {
            out.push_str("\n\n");
            out.push_str(RATING_SUFFIX);
        }
        Ok(out)
    }
}

/// The judge template for a preference pair's domain.
pub fn route(domain: Domain) -> &'static str {
    match domain {
        Domain::Chat => "judge_chat",
        Domain::Math => "judge_math",
        Domain::Code => "judge_code",
        Domain::Safety => "judge_safety",
    }
}

/// Formats candidate critiques for the summarization template: numbered
/// `Critique k:` headers, each block separated by a blank line.
pub fn join_critiques(critiques: &[&str]) -> String {
    critiques
        .iter()
        .enumerate()
        .map(|(i, text)| format!("Critique {}:\n{}", i + 1, text))
        .collect::<Vec<_>>()
        .join("\n\n")
}
