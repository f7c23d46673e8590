//! Competence-aware selection of training questions.
//!
//! Each question is scored by the guess-free log-probability that the current snapshot
//! answers it correctly, and kept when the score lies inside `[lb_log, ub_log]`. Epoch 0
//! instead returns a seeding set of questions with few concepts.

use serde::{Deserialize, Serialize};

use crate::error::{MirtError, Result};
use crate::irt::{conjunctive_log_prob, log_sigmoid, AbilitySlice, DifficultyVector, Question, QuestionBank};
use crate::vi::PosteriorParams;

/// Which competence estimate drives the scores.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum CompetenceSource {
    /// Posterior means of the latest snapshot row, plugged into the model.
    LatestSnapshot,
    /// Posterior-averaged concept probabilities of the latest snapshot, marginalizing
    /// `θ − b ~ N(μθ − μb, σθ² + σb²)` with the probit approximation.
    PosteriorMeanLatest,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct CurriculumConfig {
    pub lb_log: f64,
    pub ub_log: f64,
    pub seed_max_concepts: u32,
    pub seed_count: usize,
    pub competence_source: CompetenceSource,
}

impl Default for CurriculumConfig {
    fn default() -> Self {
        Self {
            lb_log: -5.0,
            ub_log: -0.75,
            seed_max_concepts: 2,
            seed_count: 5000,
            competence_source: CompetenceSource::LatestSnapshot,
        }
    }
}

impl CurriculumConfig {
    pub fn validate(&self) -> Result<()> {
        if self.lb_log.is_nan() || self.ub_log.is_nan() {
            return Err(MirtError::InvalidParameter("bounds must not be NaN".into()));
        }
        if !(self.lb_log < self.ub_log) {
            return Err(MirtError::InvalidParameter(format!(
                "lower bound {} must be below upper bound {}",
                self.lb_log, self.ub_log
            )));
        }
        if self.ub_log > 0.0 {
            return Err(MirtError::InvalidParameter(format!(
                "upper bound {} must be a log-probability (<= 0)",
                self.ub_log
            )));
        }
        Ok(())
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Stage {
    Seeding,
    LbActive,
    BothActive,
    UbActive,
    Exhausted,
}

impl Stage {
    pub fn as_str(&self) -> &'static str {
        match self {
            Stage::Seeding => "seeding",
            Stage::LbActive => "lb_active",
            Stage::BothActive => "both_active",
            Stage::UbActive => "ub_active",
            Stage::Exhausted => "exhausted",
        }
    }
}

impl std::fmt::Display for Stage {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(self.as_str())
    }
}

/// Outcome of [`stage_classify`]: the stage label plus how many questions each bound removed.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct StageReport {
    pub stage: Stage,
    pub below_lb: usize,
    pub above_ub: usize,
    pub inside: usize,
}

#[derive(Debug, Clone, PartialEq)]
pub struct SelectionResult {
    /// Selected question ids, ascending.
    pub selected: Vec<String>,
    /// Log-probability score of each selected question, aligned with `selected`.
    pub scores: Vec<f64>,
    pub stage: Stage,
    pub below_lb: usize,
    pub above_ub: usize,
}

impl SelectionResult {
    pub fn is_early_stop(&self) -> bool {
        self.stage == Stage::Exhausted
    }
}

/// `Σ_c q_jc · ln σ(θ_c − b_c)`, the log-probability of a correct answer without guessing.
pub fn question_score(
    ability: &AbilitySlice,
    difficulties: &DifficultyVector,
    question: &Question,
) -> Result<f64> {
    let c = difficulties.len();
    if ability.len() != c {
        return Err(MirtError::DimensionMismatch {
            what: "ability vs difficulty",
            expected: c,
            found: ability.len(),
        });
    }
    if question.num_concepts() != c {
        return Err(MirtError::DimensionMismatch {
            what: "question vs difficulty",
            expected: c,
            found: question.num_concepts(),
        });
    }
    Ok(conjunctive_log_prob(ability.as_slice(), difficulties.as_slice(), question))
}

/// Labels the selection regime from the scores of every candidate question.
///
/// With no question excluded by either bound the stage is reported as `BothActive`
/// with zero exclusion counts.
pub fn stage_classify(scores: &[f64], config: &CurriculumConfig) -> StageReport {
    let below_lb = scores.iter().filter(|&&s| s < config.lb_log).count();
    let above_ub = scores.iter().filter(|&&s| s > config.ub_log).count();
    let inside = scores.len() - below_lb - above_ub;
    let stage = if inside == 0 {
        Stage::Exhausted
    } else if below_lb > 0 && above_ub == 0 {
        Stage::LbActive
    } else if below_lb == 0 && above_ub > 0 {
        Stage::UbActive
    } else {
        Stage::BothActive
    };
    StageReport {
        stage,
        below_lb,
        above_ub,
        inside,
    }
}

fn score_all(bank: &QuestionBank, post: &PosteriorParams, source: CompetenceSource) -> Vec<f64> {
    let latest = post.num_snapshots() - 1;
    match source {
        CompetenceSource::LatestSnapshot => {
            let ability = post.ability_means(latest);
            let difficulty = post.difficulty_means();
            bank.questions()
                .iter()
                .map(|q| conjunctive_log_prob(ability.as_slice(), difficulty.as_slice(), q))
                .collect()
        }
        CompetenceSource::PosteriorMeanLatest => {
            // Probit approximation: E[σ(x)] ≈ σ(μ / sqrt(1 + π s² / 8)).
            let log_p: Vec<f64> = post
                .theta_row(latest)
                .iter()
                .zip(post.difficulty_factors())
                .map(|(t, b)| {
                    let var = t.stddev().powi(2) + b.stddev().powi(2);
                    let kappa = (1.0 + std::f64::consts::PI * var / 8.0).sqrt().recip();
                    log_sigmoid(kappa * (t.mean - b.mean))
                })
                .collect();
            bank.questions()
                .iter()
                .map(|q| q.terms().iter().map(|&(c, n)| n * log_p[c]).sum())
                .collect()
        }
    }
}

fn seeding_set(bank: &QuestionBank, config: &CurriculumConfig) -> SelectionResult {
    let mut eligible: Vec<&Question> = bank
        .questions()
        .iter()
        .filter(|q| q.total_concepts() <= config.seed_max_concepts)
        .collect();
    eligible.sort_by(|a, b| a.id().cmp(b.id()));
    eligible.truncate(config.seed_count);
    let selected: Vec<String> = eligible.iter().map(|q| q.id().to_owned()).collect();
    SelectionResult {
        scores: vec![f64::NAN; selected.len()],
        stage: if selected.is_empty() {
            Stage::Exhausted
        } else {
            Stage::Seeding
        },
        selected,
        below_lb: 0,
        above_ub: 0,
    }
}

/// Selects the questions to train on at `epoch`.
///
/// Epoch 0 returns up to `seed_count` questions with at most `seed_max_concepts` total
/// concept occurrences, ties broken by ascending id; `post` is not consulted. Later epochs
/// keep every question whose score lies in `[lb_log, ub_log]`. An empty selection has
/// stage [`Stage::Exhausted`] and signals early stopping.
pub fn select(
    bank: &QuestionBank,
    post: &PosteriorParams,
    config: &CurriculumConfig,
    epoch: usize,
) -> SelectionResult {
    if epoch == 0 {
        return seeding_set(bank, config);
    }
    assert_eq!(
        post.num_concepts(),
        bank.num_concepts(),
        "posterior and bank disagree on concept count"
    );
    if post.num_snapshots() == 0 {
        return SelectionResult {
            selected: Vec::new(),
            scores: Vec::new(),
            stage: Stage::Exhausted,
            below_lb: 0,
            above_ub: 0,
        };
    }
    let scores = score_all(bank, post, config.competence_source);
    let report = stage_classify(&scores, config);
    let mut picked: Vec<(&str, f64)> = bank
        .questions()
        .iter()
        .zip(&scores)
        .filter(|(_, &s)| s >= config.lb_log && s <= config.ub_log)
        .map(|(q, &s)| (q.id(), s))
        .collect();
    picked.sort_by(|a, b| a.0.cmp(b.0));
    SelectionResult {
        selected: picked.iter().map(|(id, _)| (*id).to_owned()).collect(),
        scores: picked.iter().map(|(_, s)| *s).collect(),
        stage: report.stage,
        below_lb: report.below_lb,
        above_ub: report.above_ub,
    }
}
