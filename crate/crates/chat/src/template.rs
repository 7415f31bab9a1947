use std::path::Path;

use thiserror::Error;

#[derive(Debug, Error)]
pub enum TemplateError {
    #[error("cannot read prompt template {path}: {source}")]
    Io { path: String, source: std::io::Error },
    #[error("template {version} is missing placeholder {{{name}}}")]
    MissingPlaceholder { version: String, name: String },
}

/// A prompt with `{name}` placeholders. The version is the file stem, so
/// `prompts/sft/v1.txt` is version `v1`.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct PromptTemplate {
    pub version: String,
    pub text: String,
}

impl PromptTemplate {
    pub fn new(version: impl Into<String>, text: impl Into<String>) -> Self {
        PromptTemplate { version: version.into(), text: text.into() }
    }

    pub fn load(path: &Path) -> Result<Self, TemplateError> {
        let text = std::fs::read_to_string(path)
            .map_err(|source| TemplateError::Io { path: path.display().to_string(), source })?;
        let version = path.file_stem().map(|s| s.to_string_lossy().into_owned()).unwrap_or_default();
        Ok(PromptTemplate { version, text })
    }

    pub fn require(&self, names: &[&str]) -> Result<(), TemplateError> {
        for name in names {
            if !self.text.contains(&format!("{{{name}}}")) {
                return Err(TemplateError::MissingPlaceholder { version: self.version.clone(), name: name.to_string() });
            }
        }
        Ok(())
    }

    /// Substitutes each `{name}` in one pass; values are not re-scanned.
    pub fn render(&self, values: &[(&str, &str)]) -> String {
        let mut out = String::with_capacity(self.text.len());
        let mut rest = self.text.as_str();
        'outer: while let Some(open) = rest.find('{') {
            out.push_str(&rest[..open]);
            let tail = &rest[open..];
            for (name, value) in values {
                let key = format!("{{{name}}}");
                if tail.starts_with(&key) {
                    out.push_str(value);
                    rest = &tail[key.len()..];
                    continue 'outer;
                }
            }
            out.push('{');
            rest = &tail[1..];
        }
        out.push_str(rest);
        out
    }
}
