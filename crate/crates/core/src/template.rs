//! Plain-text prompt templates with `{placeholder}` substitution.
//!
//! `{name}` is replaced by a value, `{{` and `}}` produce literal braces.
//! Rendering fails on any unfilled placeholder, so a broken prompt never
//! reaches the network.

use std::collections::BTreeMap;
use std::fs;
use std::path::Path;

use thiserror::Error;

#[derive(Debug, Error, PartialEq)]
pub enum TemplateError {
    #[error("template {template}: no value for placeholder {{{name}}}")]
    Unfilled { template: String, name: String },
    #[error("template {template}: unbalanced brace at byte {offset}")]
    Syntax { template: String, offset: usize },
    #[error("cannot read template {path}: {message}")]
    Io { path: String, message: String },
}

#[derive(Debug, Clone, PartialEq)]
pub struct Template {
    name: String,
    text: String,
}

enum Piece<'a> {
    Literal(&'a str),
    Slot(&'a str),
}

impl Template {
    pub fn new(name: impl Into<String>, text: impl Into<String>) -> Result<Self, TemplateError> {
        let t = Template { name: name.into(), text: text.into() };
        t.pieces()?;
        Ok(t)
    }

    pub fn name(&self) -> &str {
        &self.name
    }

    fn pieces(&self) -> Result<Vec<Piece<'_>>, TemplateError> {
        let syntax = |offset| TemplateError::Syntax { template: self.name.clone(), offset };
        let s = self.text.as_str();
        let bytes = s.as_bytes();
        let mut out = Vec::new();
        let (mut i, mut start) = (0, 0);
        while i < bytes.len() {
            match bytes[i] {
                b'{' if bytes.get(i + 1) == Some(&b'{') => {
                    out.push(Piece::Literal(&s[start..i + 1]));
                    i += 2;
                    start = i;
                }
                b'}' if bytes.get(i + 1) == Some(&b'}') => {
                    out.push(Piece::Literal(&s[start..i + 1]));
                    i += 2;
                    start = i;
                }
                b'{' => {
                    let close = s[i + 1..].find('}').ok_or_else(|| syntax(i))? + i + 1;
                    let name = &s[i + 1..close];
                    if name.is_empty() || !name.chars().all(|c| c.is_ascii_alphanumeric() || c == '_') {
                        return Err(syntax(i));
                    }
                    out.push(Piece::Literal(&s[start..i]));
                    out.push(Piece::Slot(name));
                    i = close + 1;
                    start = i;
                }
                b'}' => return Err(syntax(i)),
                _ => i += 1,
            }
        }
        out.push(Piece::Literal(&s[start..]));
        Ok(out)
    }

    /// Placeholder names in order of first appearance.
    pub fn placeholders(&self) -> Vec<String> {
        let mut names: Vec<String> = Vec::new();
        for p in self.pieces().unwrap_or_default() {
            if let Piece::Slot(n) = p {
                if !names.iter().any(|x| x == n) {
                    names.push(n.to_string());
                }
            }
        }
        names
    }

    pub fn render(&self, values: &BTreeMap<&str, &str>) -> Result<String, TemplateError> {
        let mut out = String::with_capacity(self.text.len());
        for p in self.pieces()? {
            match p {
                Piece::Literal(l) => out.push_str(l),
                Piece::Slot(n) => match values.get(n) {
                    Some(v) => out.push_str(v),
                    None => return Err(TemplateError::Unfilled { template: self.name.clone(), name: n.to_string() }),
                },
            }
        }
        Ok(out)
    }
}

/// Stage of the profiling flow a template serves.
#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord)]
pub enum Stage {
    Summarize,
    Forward,
    Backward,
}

impl Stage {
    pub const ALL: [Stage; 3] = [Stage::Summarize, Stage::Forward, Stage::Backward];

    pub fn file_name(self) -> &'static str {
        match self {
            Stage::Summarize => "summarization.txt",
            Stage::Forward => "reflection_forward.txt",
            Stage::Backward => "reflection_backward.txt",
        }
    }

    fn default_text(self) -> &'static str {
        match self {
            Stage::Summarize => include_str!("../templates/summarization.txt"),
            Stage::Forward => include_str!("../templates/reflection_forward.txt"),
            Stage::Backward => include_str!("../templates/reflection_backward.txt"),
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct TemplateSet {
    templates: BTreeMap<Stage, Template>,
}

impl Default for TemplateSet {
    fn default() -> Self {
        let templates = Stage::ALL
            .iter()
            .map(|&s| (s, Template::new(s.file_name(), s.default_text()).expect("bundled templates parse")))
            .collect();
        TemplateSet { templates }
    }
}

impl TemplateSet {
    /// Defaults, overridden by any `<stage>.txt` file present in `dir`.
    pub fn load_dir(dir: &Path) -> Result<Self, TemplateError> {
        let mut set = TemplateSet::default();
        for stage in Stage::ALL {
            let path = dir.join(stage.file_name());
            if path.exists() {
                let text = fs::read_to_string(&path)
                    .map_err(|e| TemplateError::Io { path: path.display().to_string(), message: e.to_string() })?;
                set.templates.insert(stage, Template::new(stage.file_name(), text)?);
            }
        }
        Ok(set)
    }

    pub fn set(&mut self, stage: Stage, template: Template) {
        self.templates.insert(stage, template);
    }

    pub fn get(&self, stage: Stage) -> &Template {
        &self.templates[&stage]
    }
}
