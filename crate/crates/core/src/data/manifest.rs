//! Dataset manifests.
//!
//! A manifest is a tab-separated file with one source per line:
//!
//! ```text
//! # name     kind    path             count  [weight]  [template]
//! shapes     pairs   shapes.tsv       512
//! labels     labels  labels.tsv       64     0.5       A picture of [LABEL]
//! docs       text    docs.txt         200
//! ```
//!
//! Paths are relative to the manifest. Record files hold
//! `image<TAB>caption<TAB>source` for `pairs`, `image<TAB>label[,label]<TAB>source`
//! for `labels` and one document per line for `text`. Image paths are
//! relative to their record file.

use std::fs;
use std::path::{Path, PathBuf};

use crate::error::{Error, Result};

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum SourceKind {
    Pairs,
    Labels,
    Text,
}

impl SourceKind {
    fn parse(s: &str) -> Option<Self> {
        match s {
            "pairs" => Some(SourceKind::Pairs),
            "labels" => Some(SourceKind::Labels),
            "text" => Some(SourceKind::Text),
            _ => None,
        }
    }

    pub fn name(self) -> &'static str {
        match self {
            SourceKind::Pairs => "pairs",
            SourceKind::Labels => "labels",
            SourceKind::Text => "text",
        }
    }

    pub fn has_images(self) -> bool {
        self != SourceKind::Text
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct PairRecord {
    /// Absent for text-only documents.
    pub image: Option<PathBuf>,
    pub caption: String,
    pub source: String,
}

#[derive(Clone, Debug, PartialEq)]
pub struct Source {
    pub name: String,
    pub kind: SourceKind,
    pub records: Vec<PairRecord>,
    /// Declared sampling weight; `None` defaults to the record count.
    pub weight: Option<f64>,
}

#[derive(Clone, Debug, PartialEq)]
pub struct DatasetManifest {
    pub path: PathBuf,
    pub sources: Vec<Source>,
}

/// A caption template with `[LABEL]` or `[OBJ_A]`/`[OBJ_B]` placeholders.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct PromptTemplate {
    pub text: String,
}

impl PromptTemplate {
    pub fn new(text: impl Into<String>) -> Result<Self> {
        let text = text.into();
        let single = text.contains("[LABEL]");
        let pair = text.contains("[OBJ_A]") || text.contains("[OBJ_B]");
        if single == pair {
            return Err(Error::invalid(format!(
                "template `{text}` needs either [LABEL] or both [OBJ_A] and [OBJ_B]"
            )));
        }
        if pair && !(text.contains("[OBJ_A]") && text.contains("[OBJ_B]")) {
            return Err(Error::invalid(format!("template `{text}` must contain both [OBJ_A] and [OBJ_B]")));
        }
        Ok(PromptTemplate { text })
    }

    pub fn slots(&self) -> usize {
        if self.text.contains("[LABEL]") {
            1
        } else {
            2
        }
    }

    pub fn apply(&self, labels: &[&str]) -> Result<String> {
        if labels.len() != self.slots() {
            return Err(Error::invalid(format!(
                "template `{}` takes {} label(s), got {}",
                self.text,
                self.slots(),
                labels.len()
            )));
        }
        Ok(match labels {
            [label] => self.text.replace("[LABEL]", label),
            [a, b] => self.text.replace("[OBJ_A]", a).replace("[OBJ_B]", b),
            _ => unreachable!("slot count checked above"),
        })
    }
}

/// Fills a template from one label or two comma-separated object names.
pub fn apply_prompt(labels: &str, template: &str) -> Result<String> {
    let parts: Vec<&str> = labels.split(',').map(str::trim).collect();
    PromptTemplate::new(template)?.apply(&parts)
}

pub const DEFAULT_LABEL_TEMPLATE: &str = "A picture of [LABEL]";

fn parse_err(path: &Path, line: usize, msg: impl Into<String>) -> Error {
    Error::Parse { path: path.to_path_buf(), line, msg: msg.into() }
}

fn read_text(path: &Path) -> Result<String> {
    fs::read_to_string(path).map_err(|e| match e.kind() {
        std::io::ErrorKind::NotFound => Error::MissingFile(path.to_path_buf()),
        _ => Error::Io(e),
    })
}

fn base_dir(path: &Path) -> PathBuf {
    path.parent().map(Path::to_path_buf).unwrap_or_default()
}

/// Parses a manifest and every record file it names. Declared counts must
/// match, and all referenced files must exist; missing ones are reported
/// together.
pub fn load_manifest(path: &Path) -> Result<DatasetManifest> {
    let text = read_text(path)?;
    let dir = base_dir(path);
    let mut sources = Vec::new();
    let mut missing = Vec::new();
    for (i, raw) in text.lines().enumerate() {
        let line_no = i + 1;
        let line = raw.trim_end_matches('\r');
        if line.trim().is_empty() || line.trim_start().starts_with('#') {
            continue;
        }
        let fields: Vec<&str> = line.split('\t').collect();
        if fields.len() < 4 || fields.len() > 6 {
            return Err(parse_err(path, line_no, format!("expected 4 to 6 tab-separated fields, found {}", fields.len())));
        }
        let name = fields[0].trim().to_string();
        if name.is_empty() || sources.iter().any(|s: &Source| s.name == name) {
            return Err(parse_err(path, line_no, format!("source name `{name}` is empty or repeated")));
        }
        let kind = SourceKind::parse(fields[1].trim())
            .ok_or_else(|| parse_err(path, line_no, format!("unknown kind `{}` (pairs | labels | text)", fields[1])))?;
        let count: usize = fields[3]
            .trim()
            .parse()
            .map_err(|_| parse_err(path, line_no, format!("record count `{}` is not a number", fields[3])))?;
        let weight = match fields.get(4).map(|w| w.trim()).filter(|w| !w.is_empty()) {
            None => None,
            Some(w) => match w.parse::<f64>() {
                Ok(v) if v >= 0.0 && v.is_finite() => Some(v),
                _ => return Err(parse_err(path, line_no, format!("weight `{w}` is not a non-negative number"))),
            },
        };
        let template = match (kind, fields.get(5)) {
            (SourceKind::Labels, t) => {
                Some(PromptTemplate::new(t.map(|t| t.trim()).unwrap_or(DEFAULT_LABEL_TEMPLATE)).map_err(|e| parse_err(path, line_no, e.to_string()))?)
            }
            (_, Some(_)) => return Err(parse_err(path, line_no, "only `labels` sources take a template")),
            _ => None,
        };
        let records_path = dir.join(fields[2].trim());
        if !records_path.exists() {
            missing.push(records_path);
            continue;
        }
        let records = load_records(&records_path, kind, &name, template.as_ref(), &mut missing)?;
        if records.len() != count {
            return Err(parse_err(
                path,
                line_no,
                format!("source `{name}` declares {count} records but {} holds {}", records_path.display(), records.len()),
            ));
        }
        sources.push(Source { name, kind, records, weight });
    }
    if !missing.is_empty() {
        return Err(Error::MissingFiles(missing));
    }
    if sources.is_empty() {
        return Err(Error::Data(format!("manifest {} declares no sources", path.display())));
    }
    Ok(DatasetManifest { path: path.to_path_buf(), sources })
}

fn load_records(
    path: &Path,
    kind: SourceKind,
    source: &str,
    template: Option<&PromptTemplate>,
    missing: &mut Vec<PathBuf>,
) -> Result<Vec<PairRecord>> {
    let text = read_text(path)?;
    let dir = base_dir(path);
    let mut out = Vec::new();
    for (i, raw) in text.lines().enumerate() {
        let line = raw.trim_end_matches('\r');
        if line.trim().is_empty() {
            continue;
        }
        if kind == SourceKind::Text {
            out.push(PairRecord { image: None, caption: line.to_string(), source: source.to_string() });
            continue;
        }
        let fields: Vec<&str> = line.split('\t').collect();
        if fields.len() < 2 || fields.len() > 3 {
            return Err(parse_err(path, i + 1, format!("expected image, caption and optional source tag, found {} fields", fields.len())));
        }
        let image = dir.join(fields[0].trim());
        if !image.exists() {
            missing.push(image.clone());
        }
        let caption = match template {
            Some(t) => {
                let labels: Vec<&str> = fields[1].split(',').map(str::trim).collect();
                t.apply(&labels).map_err(|e| parse_err(path, i + 1, e.to_string()))?
            }
            None => fields[1].to_string(),
        };
        if caption.trim().is_empty() {
            return Err(parse_err(path, i + 1, "image records need a non-empty caption"));
        }
        let tag = fields.get(2).map(|t| t.trim()).filter(|t| !t.is_empty()).unwrap_or(source);
        out.push(PairRecord { image: Some(image), caption, source: tag.to_string() });
    }
    Ok(out)
}

impl DatasetManifest {
    pub fn total_records(&self) -> usize {
        self.sources.iter().map(|s| s.records.len()).sum()
    }

    /// All records of image-bearing sources, in manifest order.
    pub fn pair_records(&self) -> impl Iterator<Item = &PairRecord> {
        self.sources.iter().filter(|s| s.kind.has_images()).flat_map(|s| &s.records)
    }

    pub fn text_records(&self) -> impl Iterator<Item = &PairRecord> {
        self.sources.iter().filter(|s| s.kind == SourceKind::Text).flat_map(|s| &s.records)
    }
}
