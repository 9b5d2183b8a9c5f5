use std::collections::HashSet;
use std::fmt;
use std::fs;
use std::path::{Path, PathBuf};
use std::str::FromStr;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

const TSV_HEADER: &str = "trial_id\tlabel\tattack\tcodec\tpath";

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Label {
    Bonafide,
    Spoof,
}

impl Label {
    /// Class index in the logits: bona fide 0, spoof 1.
    pub fn index(self) -> usize {
        match self {
            Label::Bonafide => 0,
            Label::Spoof => 1,
        }
    }
}

impl fmt::Display for Label {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            Label::Bonafide => "bonafide",
            Label::Spoof => "spoof",
        })
    }
}

impl FromStr for Label {
    type Err = String;

    fn from_str(s: &str) -> std::result::Result<Self, String> {
        match s {
            "bonafide" => Ok(Label::Bonafide),
            "spoof" => Ok(Label::Spoof),
            other => Err(format!("unknown key '{other}'")),
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Subset {
    Train,
    Dev,
    Eval,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ProtocolFormat {
    /// `speaker trial_id - attack key`, whitespace separated.
    AsvspoofLa,
    /// Tab-separated with a `trial_id label attack codec path` header.
    CanonicalTsv,
}

impl FromStr for ProtocolFormat {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "asvspoof_la" => Ok(ProtocolFormat::AsvspoofLa),
            "canonical_tsv" | "tsv" => Ok(ProtocolFormat::CanonicalTsv),
            other => Err(Error::Config(format!("unknown protocol format '{other}'"))),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct TrialRecord {
    pub trial_id: String,
    pub label: Label,
    pub attack_id: Option<String>,
    pub codec_id: Option<String>,
    /// Relative paths resolve against [`ProtocolSet::base_dir`].
    pub audio_path: Option<PathBuf>,
}

impl TrialRecord {
    pub fn new(trial_id: impl Into<String>, label: Label) -> Self {
        Self { trial_id: trial_id.into(), label, attack_id: None, codec_id: None, audio_path: None }
    }
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct ProtocolSet {
    pub records: Vec<TrialRecord>,
    pub subset: Option<Subset>,
    pub base_dir: PathBuf,
}

impl ProtocolSet {
    /// Builds a set, rejecting duplicate trial ids.
    pub fn new(records: Vec<TrialRecord>, subset: Option<Subset>, base_dir: impl Into<PathBuf>) -> Result<Self> {
        let mut seen = HashSet::new();
        for r in &records {
            if r.trial_id.is_empty() {
                return Err(Error::Param("empty trial id".into()));
            }
            if !seen.insert(r.trial_id.as_str()) {
                return Err(Error::Duplicate(r.trial_id.clone()));
            }
        }
        Ok(Self { records, subset, base_dir: base_dir.into() })
    }

    pub fn len(&self) -> usize {
        self.records.len()
    }

    pub fn is_empty(&self) -> bool {
        self.records.is_empty()
    }

    pub fn count(&self, label: Label) -> usize {
        self.records.iter().filter(|r| r.label == label).count()
    }

    pub fn get(&self, trial_id: &str) -> Option<&TrialRecord> {
        self.records.iter().find(|r| r.trial_id == trial_id)
    }

    pub fn audio_path(&self, record: &TrialRecord) -> Option<PathBuf> {
        record.audio_path.as_ref().map(|p| {
            if p.is_absolute() {
                p.clone()
            } else {
                self.base_dir.join(p)
            }
        })
    }

    /// Canonical TSV text, LF line endings.
    pub fn to_tsv(&self) -> String {
        let dash = |v: &Option<String>| v.clone().unwrap_or_else(|| "-".into());
        let mut out = String::from(TSV_HEADER);
        out.push('\n');
        for r in &self.records {
            let path = r
                .audio_path
                .as_ref()
                .map_or_else(|| "-".to_string(), |p| p.to_string_lossy().into_owned());
            out.push_str(&format!(
                "{}\t{}\t{}\t{}\t{}\n",
                r.trial_id,
                r.label,
                dash(&r.attack_id),
                dash(&r.codec_id),
                path
            ));
        }
        out
    }
}

fn optional(field: &str) -> Option<String> {
    (field != "-").then(|| field.to_string())
}

fn parse_label(field: &str, line: usize) -> Result<Label> {
    field.parse().map_err(|msg| Error::Parse { line, msg })
}

pub fn parse_protocol_str(text: &str, format: ProtocolFormat, base_dir: &Path) -> Result<ProtocolSet> {
    let mut records = Vec::new();
    let mut lines = text.lines().enumerate().map(|(i, l)| (i + 1, l));
    if format == ProtocolFormat::CanonicalTsv {
        match lines.find(|(_, l)| !l.trim().is_empty()) {
            Some((_, header)) if header.trim_end_matches('\r') == TSV_HEADER => {}
            Some((line, _)) => {
                return Err(Error::Parse { line, msg: format!("expected header '{TSV_HEADER}'") })
            }
            None => {}
        }
    }
    for (line, raw) in lines {
        let raw = raw.trim_end_matches('\r');
        if raw.trim().is_empty() {
            continue;
        }
        let record = match format {
            ProtocolFormat::AsvspoofLa => {
                let fields: Vec<&str> = raw.split_whitespace().collect();
                if fields.len() != 5 {
                    return Err(Error::Parse { line, msg: format!("expected 5 fields, got {}", fields.len()) });
                }
                let label = parse_label(fields[4], line)?;
                let attack = optional(fields[3]);
                if label == Label::Bonafide && attack.is_some() {
                    return Err(Error::Parse { line, msg: "bona fide trial with an attack id".into() });
                }
                TrialRecord { trial_id: fields[1].into(), label, attack_id: attack, codec_id: None, audio_path: None }
            }
            ProtocolFormat::CanonicalTsv => {
                let fields: Vec<&str> = raw.split('\t').collect();
                if fields.len() != 5 {
                    return Err(Error::Parse { line, msg: format!("expected 5 tab-separated fields, got {}", fields.len()) });
                }
                let label = parse_label(fields[1], line)?;
                TrialRecord {
                    trial_id: fields[0].into(),
                    label,
                    attack_id: optional(fields[2]),
                    codec_id: optional(fields[3]),
                    audio_path: optional(fields[4]).map(PathBuf::from),
                }
            }
        };
        if records.iter().any(|r: &TrialRecord| r.trial_id == record.trial_id) {
            return Err(Error::Duplicate(record.trial_id));
        }
        records.push(record);
    }
    ProtocolSet::new(records, None, base_dir)
}

/// Reads a protocol file; relative audio paths resolve against its directory.
pub fn parse_protocol(path: impl AsRef<Path>, format: ProtocolFormat) -> Result<ProtocolSet> {
    let path = path.as_ref();
    let text = fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
    let base = path.parent().map(Path::to_path_buf).unwrap_or_default();
    parse_protocol_str(&text, format, &base)
}

pub fn write_protocol(path: impl AsRef<Path>, set: &ProtocolSet) -> Result<()> {
    let path = path.as_ref();
    fs::write(path, set.to_tsv()).map_err(|e| Error::io(path, e))
}
