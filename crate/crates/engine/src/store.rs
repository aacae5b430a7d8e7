//! On-disk run state.
//!
//! An output directory holds:
//!
//! - `records.jsonl`: one [`UnitRecord`] per line, appended as units
//!   complete. This is the resume journal; a truncated last line (from a
//!   kill mid-write) is ignored.
//! - `results.jsonl`: the final records in inventory order without
//!   timing fields, byte-identical across repeated runs.
//! - `manifest.json`: inventory, statuses and totals.
//! - `variants.json`: the perturbed questionnaires actually used.
//! - `questionnaire.json`: the base questionnaire, for scoring.
//! - `report.json` / `report.csv`: the alignment report when a reference
//!   is configured.

use std::collections::BTreeMap;
use std::fs::{self, File, OpenOptions};
use std::io::{BufRead, BufReader, Write};
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use surveyor_core::methods::TokenLogprob;
use surveyor_core::parsers::{AnswerValue, JudgeTranscript, ParsedAnswer};
use surveyor_core::presentation::UnitId;

use crate::wire::Usage;

pub const RECORDS_FILE: &str = "records.jsonl";
pub const RESULTS_FILE: &str = "results.jsonl";
pub const MANIFEST_FILE: &str = "manifest.json";
pub const VARIANTS_FILE: &str = "variants.json";
pub const QUESTIONNAIRE_FILE: &str = "questionnaire.json";
pub const REPORT_JSON: &str = "report.json";
pub const REPORT_CSV: &str = "report.csv";

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum UnitStatus {
    Pending,
    Done,
    Failed,
}

/// One model call with its retries.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CallRecord {
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub raw_text: Option<String>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub top_logprobs: Option<Vec<TokenLogprob>>,
    pub usage: Usage,
    pub attempts: u32,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub finish_reason: Option<String>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub error: Option<String>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub latency_ms: Option<u64>,
}

impl CallRecord {
    pub fn failed(error: impl Into<String>, attempts: u32) -> Self {
        Self {
            raw_text: None,
            top_logprobs: None,
            usage: Usage::default(),
            attempts,
            finish_reason: None,
            error: Some(error.into()),
            latency_ms: None,
        }
    }

    pub fn is_ok(&self) -> bool {
        self.raw_text.is_some()
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AnswerRecord {
    #[serde(flatten)]
    pub parsed: ParsedAnswer,
    /// The answer in the base questionnaire's labels; absent when it
    /// cannot be mapped back (e.g. an option added by a scale change).
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub base_value: Option<AnswerValue>,
}

/// Usage of paraphrase or judge calls charged to a unit.
#[derive(Debug, Clone, Copy, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct AuxUsage {
    pub calls: u32,
    pub attempts: u32,
    pub usage: Usage,
}

/// Everything recorded for one inference unit. Each line of the results
/// files is one of these.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct UnitRecord {
    pub unit_id: UnitId,
    /// Configured variant name (the id in `unit_id` is its digest).
    pub variant: String,
    pub status: UnitStatus,
    pub response: CallRecord,
    /// Classification call of open-ended methods.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub followup: Option<CallRecord>,
    #[serde(default, skip_serializing_if = "Vec::is_empty")]
    pub judge: Vec<JudgeTranscript>,
    #[serde(default, skip_serializing_if = "is_zero_aux")]
    pub auxiliary: AuxUsage,
    pub answers: Vec<AnswerRecord>,
}

fn is_zero_aux(a: &AuxUsage) -> bool {
    *a == AuxUsage::default()
}

impl UnitRecord {
    pub fn key(&self) -> String {
        self.unit_id.to_string()
    }

    /// Requests issued for this unit, retries included.
    pub fn calls(&self) -> u64 {
        (self.response.attempts + self.followup.as_ref().map_or(0, |f| f.attempts) + self.auxiliary.attempts) as u64
    }

    pub fn usage(&self) -> Usage {
        let mut u = self.response.usage;
        if let Some(f) = &self.followup {
            u.add(f.usage);
        }
        u.add(self.auxiliary.usage);
        u
    }

    /// Copy without timing fields, for the deterministic results file.
    pub fn without_timing(&self) -> Self {
        let mut r = self.clone();
        r.response.latency_ms = None;
        if let Some(f) = &mut r.followup {
            f.latency_ms = None;
        }
        r
    }
}

/// Append-only JSONL writer.
pub struct Journal {
    file: File,
}

impl Journal {
    pub fn open(path: &Path) -> std::io::Result<Self> {
        let file = OpenOptions::new().create(true).append(true).open(path)?;
        Ok(Self { file })
    }

    pub fn append(&mut self, record: &UnitRecord) -> std::io::Result<()> {
        let mut line = serde_json::to_string(record).expect("record serializes");
        line.push('\n');
        self.file.write_all(line.as_bytes())?;
        self.file.flush()
    }
}

/// Complete lines of a JSONL file, skipping a torn last line.
pub fn read_jsonl<T: for<'de> Deserialize<'de>>(path: &Path) -> std::io::Result<Vec<T>> {
    let file = match File::open(path) {
        Ok(f) => f,
        Err(e) if e.kind() == std::io::ErrorKind::NotFound => return Ok(Vec::new()),
        Err(e) => return Err(e),
    };
    let mut out = Vec::new();
    let mut reader = BufReader::new(file);
    let mut line = String::new();
    loop {
        line.clear();
        if reader.read_line(&mut line)? == 0 {
            break;
        }
        if !line.ends_with('\n') {
            break;
        }
        match serde_json::from_str(line.trim_end()) {
            Ok(v) => out.push(v),
            Err(e) => return Err(std::io::Error::new(std::io::ErrorKind::InvalidData, e)),
        }
    }
    Ok(out)
}

/// Latest journal record per unit.
pub fn latest_records(path: &Path) -> std::io::Result<BTreeMap<String, UnitRecord>> {
    let mut map = BTreeMap::new();
    for r in read_jsonl::<UnitRecord>(path)? {
        map.insert(r.key(), r);
    }
    Ok(map)
}

pub fn write_results(path: &Path, records: &[UnitRecord]) -> std::io::Result<()> {
    let mut text = String::new();
    for r in records {
        text.push_str(&serde_json::to_string(&r.without_timing()).expect("record serializes"));
        text.push('\n');
    }
    write_atomic(path, text.as_bytes())
}

/// Writes via a sibling temporary file and a rename.
pub fn write_atomic(path: &Path, bytes: &[u8]) -> std::io::Result<()> {
    let tmp = path.with_extension("tmp");
    fs::write(&tmp, bytes)?;
    fs::rename(tmp, path)
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum RunState {
    Planned,
    Running,
    Completed,
    /// Finished with at least one failed unit.
    Partial,
    /// Stopped early, e.g. on an authentication failure.
    Aborted,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct UnitEntry {
    pub unit_id: UnitId,
    pub variant: String,
    pub status: UnitStatus,
}

#[derive(Debug, Clone, Copy, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct StatusCounts {
    pub pending: usize,
    pub done: usize,
    pub failed: usize,
}

impl StatusCounts {
    pub fn total(&self) -> usize {
        self.pending + self.done + self.failed
    }
}

#[derive(Debug, Clone, Copy, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct Totals {
    pub calls: u64,
    pub input_tokens: u64,
    pub output_tokens: u64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RunManifest {
    pub run_id: String,
    pub name: String,
    pub config_digest: String,
    /// Digest of the ordered unit ids.
    pub inventory_digest: String,
    pub state: RunState,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub started_at: Option<String>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub updated_at: Option<String>,
    /// Variant name to variant id.
    pub variants: BTreeMap<String, String>,
    pub counts: StatusCounts,
    pub totals: Totals,
    pub units: Vec<UnitEntry>,
}

impl RunManifest {
    pub fn new(name: String, config_digest: String, variants: BTreeMap<String, String>, units: Vec<UnitEntry>) -> Self {
        let mut h = Sha256::new();
        for u in &units {
            h.update(u.unit_id.to_string().as_bytes());
            h.update(b"\n");
        }
        let inventory_digest: String = h.finalize().iter().map(|b| format!("{b:02x}")).collect();
        let mut m = Self {
            run_id: config_digest[..16.min(config_digest.len())].to_string(),
            name,
            config_digest,
            inventory_digest,
            state: RunState::Planned,
            started_at: None,
            updated_at: None,
            variants,
            counts: StatusCounts::default(),
            totals: Totals::default(),
            units,
        };
        m.recount();
        m
    }

    pub fn recount(&mut self) {
        let mut c = StatusCounts::default();
        for u in &self.units {
            match u.status {
                UnitStatus::Pending => c.pending += 1,
                UnitStatus::Done => c.done += 1,
                UnitStatus::Failed => c.failed += 1,
            }
        }
        self.counts = c;
    }

    /// Sets statuses and totals from the latest record of each unit.
    pub fn apply_records(&mut self, records: &BTreeMap<String, UnitRecord>) {
        let mut totals = Totals::default();
        for u in &mut self.units {
            match records.get(&u.unit_id.to_string()) {
                Some(r) => {
                    u.status = r.status;
                    totals.calls += r.calls();
                    let usage = r.usage();
                    totals.input_tokens += usage.input_tokens;
                    totals.output_tokens += usage.output_tokens;
                }
                None => u.status = UnitStatus::Pending,
            }
        }
        self.totals = totals;
        self.recount();
    }

    pub fn load(path: &Path) -> std::io::Result<Self> {
        let text = fs::read_to_string(path)?;
        serde_json::from_str(&text).map_err(|e| std::io::Error::new(std::io::ErrorKind::InvalidData, e))
    }

    pub fn save(&self, path: &Path) -> std::io::Result<()> {
        let text = serde_json::to_string_pretty(self).expect("manifest serializes");
        write_atomic(path, text.as_bytes())
    }
}

/// Paths of the files in an output directory.
#[derive(Debug, Clone)]
pub struct OutputDir {
    pub root: PathBuf,
}

impl OutputDir {
    pub fn new(root: impl Into<PathBuf>) -> Self {
        Self { root: root.into() }
    }

    pub fn records(&self) -> PathBuf {
        self.root.join(RECORDS_FILE)
    }
    pub fn results(&self) -> PathBuf {
        self.root.join(RESULTS_FILE)
    }
    pub fn manifest(&self) -> PathBuf {
        self.root.join(MANIFEST_FILE)
    }
    pub fn variants(&self) -> PathBuf {
        self.root.join(VARIANTS_FILE)
    }
    pub fn questionnaire(&self) -> PathBuf {
        self.root.join(QUESTIONNAIRE_FILE)
    }
    pub fn report_json(&self) -> PathBuf {
        self.root.join(REPORT_JSON)
    }
    pub fn report_csv(&self) -> PathBuf {
        self.root.join(REPORT_CSV)
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use surveyor_core::presentation::PresentationMode;

    fn record(item: &str) -> UnitRecord {
        UnitRecord {
            unit_id: UnitId {
                persona_id: "p".into(),
                variant_id: "v".into(),
                mode: PresentationMode::SingleItem,
                method: "m".into(),
                seed: 1,
                item: item.into(),
            },
            variant: "base".into(),
            status: UnitStatus::Done,
            response: CallRecord {
                raw_text: Some("x".into()),
                top_logprobs: None,
                usage: Usage {
                    input_tokens: 3,
                    output_tokens: 1,
                },
                attempts: 2,
                finish_reason: None,
                error: None,
                latency_ms: Some(5),
            },
            followup: None,
            judge: Vec::new(),
            auxiliary: AuxUsage::default(),
            answers: Vec::new(),
        }
    }

    #[test]
    fn journal_skips_torn_tail() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("r.jsonl");
        let mut j = Journal::open(&path).unwrap();
        j.append(&record("a")).unwrap();
        j.append(&record("b")).unwrap();
        let mut f = OpenOptions::new().append(true).open(&path).unwrap();
        f.write_all(b"{\"unit_id\":").unwrap();
        let recs = latest_records(&path).unwrap();
        assert_eq!(recs.len(), 2);
    }

    #[test]
    fn manifest_totals_follow_records() {
        let a = record("a");
        let mut m = RunManifest::new(
            "n".into(),
            "0123456789abcdef0123".into(),
            BTreeMap::new(),
            vec![
                UnitEntry {
                    unit_id: a.unit_id.clone(),
                    variant: "base".into(),
                    status: UnitStatus::Pending,
                },
                UnitEntry {
                    unit_id: record("b").unit_id,
                    variant: "base".into(),
                    status: UnitStatus::Pending,
                },
            ],
        );
        assert_eq!(m.run_id, "0123456789abcdef");
        m.apply_records(&BTreeMap::from([(a.key(), a)]));
        assert_eq!(m.counts, StatusCounts { pending: 1, done: 1, failed: 0 });
        assert_eq!(m.totals, Totals { calls: 2, input_tokens: 3, output_tokens: 1 });
    }

    #[test]
    fn results_drop_latency() {
        let r = record("a").without_timing();
        assert!(!serde_json::to_string(&r).unwrap().contains("latency_ms"));
    }
}
