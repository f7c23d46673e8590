//! File formats: response CSV, question-bank and posterior JSON, simulation configs and
//! JSON-lines traces. Every writer goes through [`write_atomic`].

use std::collections::{BTreeMap, HashMap};
use std::fmt;
use std::io::Write;
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::curriculum::{CurriculumConfig, SelectionResult};
use crate::error::MirtError;
use crate::irt::{Question, QuestionBank, ResponseMatrix};
use crate::sim::{EpochRecord, SimConfig, SimTrace};
use crate::vi::{FitConfig, FitReport, GaussianFactor, PosteriorParams, PriorSpec};

#[derive(Debug, Error)]
pub enum IoError {
    #[error("{path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },
    /// Malformed or semantically invalid input; `line` is 1-based when known.
    #[error("{}", format_invalid(.path, *.line, .message))]
    Invalid {
        path: PathBuf,
        line: Option<usize>,
        message: String,
    },
}

fn format_invalid(path: &Path, line: Option<usize>, message: &str) -> String {
    match line {
        Some(l) => format!("{}:{l}: {message}", path.display()),
        None => format!("{}: {message}", path.display()),
    }
}

impl IoError {
    fn invalid(path: &Path, line: Option<usize>, message: impl fmt::Display) -> Self {
        IoError::Invalid {
            path: path.to_path_buf(),
            line,
            message: message.to_string(),
        }
    }

    pub fn line(&self) -> Option<usize> {
        match self {
            IoError::Invalid { line, .. } => *line,
            IoError::Io { .. } => None,
        }
    }
}

fn read_text(path: &Path) -> Result<String, IoError> {
    std::fs::read_to_string(path).map_err(|source| IoError::Io {
        path: path.to_path_buf(),
        source,
    })
}

fn parse_json<T: for<'de> Deserialize<'de>>(path: &Path, text: &str) -> Result<T, IoError> {
    serde_json::from_str(text).map_err(|e| IoError::invalid(path, Some(e.line()), e))
}

/// First line of `text` containing `needle`, for pointing at a record after parsing.
fn line_of(text: &str, needle: &str) -> Option<usize> {
    text.lines().position(|l| l.contains(needle)).map(|k| k + 1)
}

/// Writes `bytes` to a temporary file beside `path`, then renames it into place.
pub fn write_atomic(path: &Path, bytes: &[u8]) -> Result<(), IoError> {
    let io_err = |source| IoError::Io {
        path: path.to_path_buf(),
        source,
    };
    let dir = match path.parent() {
        Some(p) if !p.as_os_str().is_empty() => p,
        _ => Path::new("."),
    };
    let mut tmp = tempfile::NamedTempFile::new_in(dir).map_err(io_err)?;
    tmp.write_all(bytes).map_err(io_err)?;
    tmp.as_file().sync_all().map_err(io_err)?;
    tmp.persist(path).map_err(|e| io_err(e.error))?;
    Ok(())
}

// ---------------------------------------------------------------------------
// Question bank

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct QuestionTypeDecl {
    #[serde(default)]
    pub binary: bool,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub answer_vocabulary_size: Option<u32>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct BankRecord {
    pub question_id: String,
    pub concepts: BTreeMap<String, u32>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub question_type: Option<String>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub guess_prob: Option<f64>,
}

/// On-disk question bank. `concepts` is the vocabulary every question draws from.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct BankFile {
    pub concepts: Vec<String>,
    #[serde(default, skip_serializing_if = "BTreeMap::is_empty")]
    pub question_types: BTreeMap<String, QuestionTypeDecl>,
    pub questions: Vec<BankRecord>,
}

impl BankFile {
    /// Guessing probability: explicit value, else from the declared question type
    /// (binary → 1/2, otherwise 1/answer-vocabulary size), else 0.
    fn guess_for(&self, rec: &BankRecord) -> Result<f64, String> {
        if let Some(g) = rec.guess_prob {
            return Ok(g);
        }
        let Some(name) = &rec.question_type else {
            return Ok(0.0);
        };
        let decl = self
            .question_types
            .get(name)
            .ok_or_else(|| format!("question type `{name}` is not declared"))?;
        match (decl.binary, decl.answer_vocabulary_size) {
            (true, _) => Ok(0.5),
            (false, Some(0)) => Err(format!("question type `{name}` has an empty answer vocabulary")),
            (false, Some(k)) => Ok(1.0 / f64::from(k)),
            (false, None) => Ok(0.0),
        }
    }

    pub fn to_bank(&self) -> Result<QuestionBank, (usize, String)> {
        let index: HashMap<&str, usize> = self
            .concepts
            .iter()
            .enumerate()
            .map(|(k, n)| (n.as_str(), k))
            .collect();
        if index.len() != self.concepts.len() {
            return Err((usize::MAX, "duplicate concept name in vocabulary".into()));
        }
        let mut questions = Vec::with_capacity(self.questions.len());
        for (k, rec) in self.questions.iter().enumerate() {
            let fail = |msg: String| (k, format!("question `{}`: {msg}", rec.question_id));
            let mut counts = vec![0u32; self.concepts.len()];
            for (name, &n) in &rec.concepts {
                let c = *index
                    .get(name.as_str())
                    .ok_or_else(|| fail(format!("unknown concept `{name}`")))?;
                if n == 0 {
                    return Err(fail(format!("count for `{name}` must be a positive integer")));
                }
                counts[c] = n;
            }
            let guess = self.guess_for(rec).map_err(fail)?;
            let q = Question::new(rec.question_id.clone(), counts, guess)
                .map_err(|e| (k, e.to_string()))?;
            questions.push(q);
        }
        QuestionBank::new(self.concepts.clone(), questions).map_err(|e| (usize::MAX, e.to_string()))
    }

    pub fn from_bank(bank: &QuestionBank) -> Self {
        let names = bank.concept_names();
        let questions = bank
            .questions()
            .iter()
            .map(|q| BankRecord {
                question_id: q.id().to_string(),
                concepts: q
                    .concept_counts()
                    .iter()
                    .enumerate()
                    .filter(|(_, &n)| n > 0)
                    .map(|(c, &n)| (names[c].clone(), n))
                    .collect(),
                question_type: None,
                guess_prob: Some(q.guess_prob()),
            })
            .collect();
        BankFile {
            concepts: names.to_vec(),
            question_types: BTreeMap::new(),
            questions,
        }
    }
}

pub fn parse_bank(path: &Path, text: &str) -> Result<QuestionBank, IoError> {
    let file: BankFile = parse_json(path, text)?;
    file.to_bank().map_err(|(k, msg)| {
        let line = file
            .questions
            .get(k)
            .and_then(|rec| line_of(text, &format!("\"{}\"", rec.question_id)));
        IoError::invalid(path, line, msg)
    })
}

pub fn load_bank(path: &Path) -> Result<QuestionBank, IoError> {
    parse_bank(path, &read_text(path)?)
}

pub fn save_bank(path: &Path, bank: &QuestionBank) -> Result<(), IoError> {
    write_atomic(path, &to_pretty_json(&BankFile::from_bank(bank)))
}

fn to_pretty_json<T: Serialize>(value: &T) -> Vec<u8> {
    let mut out = serde_json::to_vec_pretty(value).expect("serializable value");
    out.push(b'\n');
    out
}

// ---------------------------------------------------------------------------
// Responses

/// Responses keyed by the file's snapshot ids, which map to rows in ascending order.
#[derive(Debug, Clone, PartialEq)]
pub struct LoadedResponses {
    pub matrix: ResponseMatrix,
    pub snapshot_ids: Vec<u64>,
}

pub const RESPONSE_HEADER: [&str; 3] = ["snapshot_id", "question_id", "correct"];

pub fn parse_responses(path: &Path, text: &str, bank: &QuestionBank) -> Result<LoadedResponses, IoError> {
    let mut reader = csv::ReaderBuilder::new()
        .has_headers(true)
        .trim(csv::Trim::All)
        .from_reader(text.as_bytes());
    let header = reader
        .headers()
        .map_err(|e| IoError::invalid(path, Some(1), e))?
        .clone();
    if header.iter().collect::<Vec<_>>() != RESPONSE_HEADER {
        return Err(IoError::invalid(
            path,
            Some(1),
            format!("expected header `{}`", RESPONSE_HEADER.join(",")),
        ));
    }

    let mut rows = Vec::new();
    let mut first_seen: HashMap<(u64, usize), usize> = HashMap::new();
    for record in reader.records() {
        let record = record.map_err(|e| {
            let line = e.position().map(|p| p.line() as usize);
            IoError::invalid(path, line, e)
        })?;
        let line = record.position().map_or(0, |p| p.line() as usize);
        let bad = |msg: String| IoError::invalid(path, Some(line), msg);
        let snapshot: u64 = record[0]
            .parse()
            .map_err(|_| bad(format!("snapshot_id `{}` is not a non-negative integer", &record[0])))?;
        let question = bank
            .index_of(&record[1])
            .ok_or_else(|| bad(format!("unknown question `{}`", &record[1])))?;
        let correct = match &record[2] {
            "0" => false,
            "1" => true,
            other => return Err(bad(format!("correct must be 0 or 1, got `{other}`"))),
        };
        if let Some(prev) = first_seen.insert((snapshot, question), line) {
            return Err(bad(format!(
                "duplicate response for snapshot {snapshot}, question `{}` (first on line {prev})",
                &record[1]
            )));
        }
        rows.push((snapshot, question, correct));
    }

    let mut snapshot_ids: Vec<u64> = rows.iter().map(|r| r.0).collect();
    snapshot_ids.sort_unstable();
    snapshot_ids.dedup();
    let row_of: HashMap<u64, usize> = snapshot_ids.iter().enumerate().map(|(i, &s)| (s, i)).collect();
    let mut matrix = ResponseMatrix::new(snapshot_ids.len());
    for (s, q, z) in rows {
        matrix
            .push(row_of[&s], q, z)
            .map_err(|e| IoError::invalid(path, None, e))?;
    }
    Ok(LoadedResponses { matrix, snapshot_ids })
}

pub fn load_responses(path: &Path, bank: &QuestionBank) -> Result<LoadedResponses, IoError> {
    parse_responses(path, &read_text(path)?, bank)
}

pub fn responses_to_csv(responses: &LoadedResponses, bank: &QuestionBank) -> String {
    let mut out = RESPONSE_HEADER.join(",");
    out.push('\n');
    for r in responses.matrix.entries() {
        out.push_str(&format!(
            "{},{},{}\n",
            responses.snapshot_ids[r.snapshot],
            bank.questions()[r.question].id(),
            u8::from(r.correct)
        ));
    }
    out
}

// ---------------------------------------------------------------------------
// Posterior

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ConceptRecord {
    pub name: String,
    pub difficulty_mean: f64,
    pub difficulty_stddev: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct CompetenceRecord {
    pub name: String,
    pub mean: f64,
    pub stddev: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct SnapshotRecord {
    pub snapshot_id: u64,
    pub competences: Vec<CompetenceRecord>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct FitSummary {
    pub elbo_final: f64,
    pub iterations: usize,
    pub converged: bool,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct PosteriorFile {
    pub concepts: Vec<ConceptRecord>,
    pub snapshots: Vec<SnapshotRecord>,
    pub fit: FitSummary,
}

impl PosteriorFile {
    pub fn from_fit(
        concept_names: &[String],
        snapshot_ids: &[u64],
        post: &PosteriorParams,
        report: &FitReport,
    ) -> Self {
        let concepts = concept_names
            .iter()
            .zip(post.difficulty_factors())
            .map(|(name, f)| ConceptRecord {
                name: name.clone(),
                difficulty_mean: f.mean,
                difficulty_stddev: f.stddev(),
            })
            .collect();
        let snapshots = snapshot_ids
            .iter()
            .enumerate()
            .map(|(i, &id)| SnapshotRecord {
                snapshot_id: id,
                competences: concept_names
                    .iter()
                    .zip(post.theta_row(i))
                    .map(|(name, f)| CompetenceRecord {
                        name: name.clone(),
                        mean: f.mean,
                        stddev: f.stddev(),
                    })
                    .collect(),
            })
            .collect();
        PosteriorFile {
            concepts,
            snapshots,
            fit: FitSummary {
                elbo_final: report.elbo_final().unwrap_or(f64::NAN),
                iterations: report.iterations_run,
                converged: report.converged,
            },
        }
    }

    fn factor(mean: f64, stddev: f64, what: &str) -> Result<GaussianFactor, String> {
        if !(stddev > 0.0 && stddev.is_finite()) {
            return Err(format!("{what}: stddev must be positive and finite, got {stddev}"));
        }
        GaussianFactor::new(mean, stddev.ln()).map_err(|e| format!("{what}: {e}"))
    }

    /// Checks the file against the bank vocabulary and snapshot ordering.
    fn validate(&self, concept_names: &[String]) -> Result<(), String> {
        let listed: Vec<&str> = self.concepts.iter().map(|c| c.name.as_str()).collect();
        if listed != concept_names.iter().map(String::as_str).collect::<Vec<_>>() {
            return Err(format!(
                "posterior concepts {listed:?} do not match the bank vocabulary {concept_names:?}"
            ));
        }
        for w in self.snapshots.windows(2) {
            if w[0].snapshot_id >= w[1].snapshot_id {
                return Err(format!(
                    "snapshot ids must be strictly increasing ({} then {})",
                    w[0].snapshot_id, w[1].snapshot_id
                ));
            }
        }
        for s in &self.snapshots {
            let names: Vec<&str> = s.competences.iter().map(|c| c.name.as_str()).collect();
            if names != listed {
                return Err(format!(
                    "snapshot {} lists competences {names:?}, expected {listed:?}",
                    s.snapshot_id
                ));
            }
        }
        Ok(())
    }

    /// Variational parameters for the given snapshot ids: rows present in the file are
    /// copied, the rest start at the prior.
    pub fn to_params_for(
        &self,
        concept_names: &[String],
        snapshot_ids: &[u64],
        prior: &PriorSpec,
    ) -> Result<PosteriorParams, String> {
        self.validate(concept_names)?;
        let c = concept_names.len();
        let by_id: HashMap<u64, &SnapshotRecord> =
            self.snapshots.iter().map(|s| (s.snapshot_id, s)).collect();
        let mut post = PosteriorParams::at_prior(snapshot_ids.len(), c, prior);
        for (i, id) in snapshot_ids.iter().enumerate() {
            if let Some(rec) = by_id.get(id) {
                for (k, comp) in rec.competences.iter().enumerate() {
                    *post.theta_mut(i, k) =
                        Self::factor(comp.mean, comp.stddev, &format!("snapshot {id}, {}", comp.name))?;
                }
            }
        }
        for (k, rec) in self.concepts.iter().enumerate() {
            *post.difficulty_mut(k) = Self::factor(rec.difficulty_mean, rec.difficulty_stddev, &rec.name)?;
        }
        Ok(post)
    }

    /// Variational parameters with exactly the file's snapshots.
    pub fn to_params(&self, concept_names: &[String]) -> Result<PosteriorParams, String> {
        let ids: Vec<u64> = self.snapshots.iter().map(|s| s.snapshot_id).collect();
        self.to_params_for(concept_names, &ids, &PriorSpec::default())
    }
}

pub fn parse_posterior(path: &Path, text: &str) -> Result<PosteriorFile, IoError> {
    parse_json(path, text)
}

pub fn load_posterior(path: &Path) -> Result<PosteriorFile, IoError> {
    parse_posterior(path, &read_text(path)?)
}

pub fn save_posterior(path: &Path, file: &PosteriorFile) -> Result<(), IoError> {
    write_atomic(path, &to_pretty_json(file))
}

/// Converts a posterior file to parameters, reporting problems against `path`.
pub fn posterior_params(
    path: &Path,
    file: &PosteriorFile,
    concept_names: &[String],
) -> Result<PosteriorParams, IoError> {
    file.to_params(concept_names)
        .map_err(|m| IoError::invalid(path, None, m))
}

// ---------------------------------------------------------------------------
// Selection output

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SelectionStats {
    pub count: usize,
    pub mean_concepts: f64,
    pub stage: String,
    pub below_lb: usize,
    pub above_ub: usize,
    pub lb: f64,
    pub ub: f64,
    pub epoch: usize,
    pub seed: u64,
}

impl SelectionStats {
    pub fn new(result: &SelectionResult, bank: &QuestionBank, config: &CurriculumConfig, epoch: usize, seed: u64) -> Self {
        let total: u64 = result
            .selected
            .iter()
            .filter_map(|id| bank.index_of(id))
            .map(|j| u64::from(bank.questions()[j].total_concepts()))
            .sum();
        let count = result.selected.len();
        SelectionStats {
            count,
            mean_concepts: if count == 0 { 0.0 } else { total as f64 / count as f64 },
            stage: result.stage.as_str().to_string(),
            below_lb: result.below_lb,
            above_ub: result.above_ub,
            lb: config.lb_log,
            ub: config.ub_log,
            epoch,
            seed,
        }
    }
}

/// Sidecar path for selection statistics: `<out>.stats.json`.
pub fn stats_path(out: &Path) -> PathBuf {
    let mut name = out.as_os_str().to_os_string();
    name.push(".stats.json");
    PathBuf::from(name)
}

pub fn save_selection(out: &Path, result: &SelectionResult, stats: &SelectionStats) -> Result<(), IoError> {
    let mut body = String::new();
    for id in &result.selected {
        body.push_str(id);
        body.push('\n');
    }
    write_atomic(out, body.as_bytes())?;
    write_atomic(&stats_path(out), &to_pretty_json(stats))
}

// ---------------------------------------------------------------------------
// Simulation config and traces

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct SimFile {
    pub sim: SimConfig,
    pub curriculum: CurriculumConfig,
    pub fit: FitConfig,
    /// Standard deviation of the zero-mean normal priors on competences and difficulties.
    pub prior_stddev: f64,
}

impl Default for SimFile {
    fn default() -> Self {
        SimFile {
            sim: SimConfig::default(),
            curriculum: CurriculumConfig::default(),
            fit: FitConfig::default(),
            prior_stddev: 1.0,
        }
    }
}

impl SimFile {
    pub fn prior(&self) -> Result<PriorSpec, MirtError> {
        PriorSpec::centered(self.prior_stddev)
    }
}

pub fn parse_sim_file(path: &Path, text: &str) -> Result<SimFile, IoError> {
    let file: SimFile = parse_json(path, text)?;
    file.sim
        .validate()
        .and_then(|_| file.curriculum.validate())
        .and_then(|_| file.fit.validate())
        .and_then(|_| file.prior().map(|_| ()))
        .map_err(|e| IoError::invalid(path, None, e))?;
    Ok(file)
}

pub fn load_sim_file(path: &Path) -> Result<SimFile, IoError> {
    parse_sim_file(path, &read_text(path)?)
}

#[derive(Serialize)]
struct TraceLine<'a> {
    #[serde(flatten)]
    record: &'a EpochRecord,
    true_difficulty: &'a [f64],
}

/// One JSON object per epoch; each line also carries the ground-truth difficulties.
pub fn trace_jsonl(trace: &SimTrace) -> String {
    let mut out = String::new();
    for record in &trace.records {
        let line = TraceLine {
            record,
            true_difficulty: &trace.true_difficulty,
        };
        out.push_str(&serde_json::to_string(&line).expect("serializable record"));
        out.push('\n');
    }
    out
}

pub fn save_trace(path: &Path, trace: &SimTrace) -> Result<(), IoError> {
    write_atomic(path, trace_jsonl(trace).as_bytes())
}
