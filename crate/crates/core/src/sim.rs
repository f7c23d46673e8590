//! Simulated learner driving the closed selection loop.
//!
//! The learner holds true per-concept competences that grow linearly with training
//! exposure up to a cap, and answers questions by Bernoulli draws from the conjunctive
//! model evaluated at the true parameters.

use rand::seq::index::sample as sample_indices;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand::distr::weighted::WeightedIndex;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};

use crate::curriculum::{select, CurriculumConfig, Stage};
use crate::error::{MirtError, Result};
use crate::irt::{conjunctive_log_prob, DifficultyVector, Question, QuestionBank, ResponseMatrix};
use crate::vi::{fit, FitConfig, PosteriorParams, PriorSpec};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case", deny_unknown_fields)]
pub enum DifficultySpec {
    Normal { mean: f64, stddev: f64 },
    Explicit { values: Vec<f64> },
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct QuestionTypeSpec {
    pub name: String,
    pub guess_prob: f64,
    pub weight: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct SimConfig {
    pub num_concepts: usize,
    pub num_questions: usize,
    pub num_epochs: usize,
    /// Questions trained on (and answered) per epoch, drawn from the selection when it is larger.
    pub batch_per_epoch: usize,
    pub true_difficulty: DifficultySpec,
    pub initial_competence: f64,
    /// Competence gained per concept occurrence in a training batch.
    pub learning_gain: f64,
    pub competence_cap: f64,
    pub question_types: Vec<QuestionTypeSpec>,
    /// Relative weights of the total concept count: entry `k` weighs `k + 1` concepts.
    /// Concepts are drawn uniformly with replacement, so repeats raise `q_jc` above 1.
    pub concepts_per_question: Vec<f64>,
    pub seed: u64,
}

impl Default for SimConfig {
    fn default() -> Self {
        Self {
            num_concepts: 10,
            num_questions: 5000,
            num_epochs: 60,
            batch_per_epoch: 1000,
            true_difficulty: DifficultySpec::Normal {
                mean: -1.0,
                stddev: 1.0,
            },
            initial_competence: -3.0,
            learning_gain: 0.003,
            competence_cap: 6.0,
            question_types: vec![
                QuestionTypeSpec {
                    name: "exist".into(),
                    guess_prob: 0.5,
                    weight: 0.1,
                },
                QuestionTypeSpec {
                    name: "query".into(),
                    guess_prob: 0.125,
                    weight: 0.6,
                },
                QuestionTypeSpec {
                    name: "count".into(),
                    guess_prob: 1.0 / 11.0,
                    weight: 0.3,
                },
            ],
            concepts_per_question: vec![0.2, 0.25, 0.2, 0.15, 0.1, 0.1],
            seed: 2021,
        }
    }
}

impl SimConfig {
    pub fn validate(&self) -> Result<()> {
        let bad = |m: String| Err(MirtError::InvalidParameter(m));
        if self.num_concepts == 0 || self.num_questions == 0 || self.batch_per_epoch == 0 {
            return bad("concept, question, and batch counts must be positive".into());
        }
        if !(self.learning_gain > 0.0) {
            return bad(format!("learning gain must be positive, got {}", self.learning_gain));
        }
        if !(self.initial_competence < self.competence_cap) {
            return bad("initial competence must be below the cap".into());
        }
        match &self.true_difficulty {
            DifficultySpec::Normal { mean, stddev } => {
                if !mean.is_finite() || !(*stddev >= 0.0 && stddev.is_finite()) {
                    return bad("difficulty distribution is invalid".into());
                }
            }
            DifficultySpec::Explicit { values } => {
                if values.len() != self.num_concepts || values.iter().any(|v| !v.is_finite()) {
                    return bad(format!(
                        "explicit difficulties need {} finite values",
                        self.num_concepts
                    ));
                }
            }
        }
        if self.question_types.is_empty()
            || self
                .question_types
                .iter()
                .any(|t| !(0.0..1.0).contains(&t.guess_prob) || !(t.weight >= 0.0))
            || self.question_types.iter().all(|t| t.weight == 0.0)
        {
            return bad("question types need guess in [0, 1) and a positive total weight".into());
        }
        if self.concepts_per_question.is_empty()
            || self.concepts_per_question.iter().any(|w| !(*w >= 0.0))
            || self.concepts_per_question.iter().all(|w| *w == 0.0)
        {
            return bad("concepts_per_question needs non-negative weights with a positive total".into());
        }
        Ok(())
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SimLearnerState {
    pub true_theta: Vec<f64>,
    pub exposure_counts: Vec<u64>,
    pub epoch: usize,
}

impl SimLearnerState {
    pub fn initial(config: &SimConfig) -> Self {
        Self {
            true_theta: vec![config.initial_competence; config.num_concepts],
            exposure_counts: vec![0; config.num_concepts],
            epoch: 0,
        }
    }
}

/// One epoch of the closed loop.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EpochRecord {
    pub epoch: usize,
    pub stage: Stage,
    pub selected_count: usize,
    pub batch_count: usize,
    pub below_lb: usize,
    pub above_ub: usize,
    /// Mean total concept count over the selected questions (0 when nothing was selected).
    pub mean_concepts: f64,
    /// True competences at the time of selection, before this epoch's training.
    pub true_theta: Vec<f64>,
    /// Posterior-mean competences of the latest snapshot used for selection.
    pub est_theta: Option<Vec<f64>>,
    pub est_difficulty: Option<Vec<f64>>,
    /// Accuracy of the learner on its own training batch.
    pub train_accuracy: Option<f64>,
    pub fit_iterations: Option<usize>,
    pub fit_converged: Option<bool>,
    pub elbo: Option<f64>,
}

#[derive(Debug, Clone, PartialEq, Default, Serialize, Deserialize)]
pub struct SimTrace {
    pub true_difficulty: Vec<f64>,
    pub records: Vec<EpochRecord>,
}

impl SimTrace {
    pub fn early_stopped(&self) -> bool {
        self.records.last().is_some_and(|r| r.stage == Stage::Exhausted)
    }
}

/// A loop that failed part way; `trace` holds every epoch completed before the failure.
#[derive(Debug, Clone, thiserror::Error)]
#[error("simulation failed at epoch {epoch}: {source}")]
pub struct LoopFailure {
    pub epoch: usize,
    pub trace: SimTrace,
    #[source]
    pub source: MirtError,
}

/// Draws the question bank and the ground-truth difficulties.
pub fn generate_bank(config: &SimConfig, rng: &mut impl Rng) -> Result<(QuestionBank, DifficultyVector)> {
    config.validate()?;
    let c = config.num_concepts;
    let truth = match &config.true_difficulty {
        DifficultySpec::Explicit { values } => values.clone(),
        DifficultySpec::Normal { mean, stddev } => {
            let normal = Normal::new(*mean, *stddev)
                .map_err(|e| MirtError::InvalidParameter(e.to_string()))?;
            (0..c).map(|_| normal.sample(rng)).collect()
        }
    };
    let type_dist = WeightedIndex::new(config.question_types.iter().map(|t| t.weight))
        .map_err(|e| MirtError::InvalidParameter(e.to_string()))?;
    let size_dist = WeightedIndex::new(&config.concepts_per_question)
        .map_err(|e| MirtError::InvalidParameter(e.to_string()))?;
    let width = config.num_questions.saturating_sub(1).to_string().len();
    let mut questions = Vec::with_capacity(config.num_questions);
    for j in 0..config.num_questions {
        let total = size_dist.sample(rng) + 1;
        let mut counts = vec![0u32; c];
        for _ in 0..total {
            counts[rng.random_range(0..c)] += 1;
        }
        let guess = config.question_types[type_dist.sample(rng)].guess_prob;
        questions.push(Question::new(format!("q{j:0width$}"), counts, guess)?);
    }
    let bank = QuestionBank::with_anonymous_concepts(c, questions)?;
    Ok((bank, DifficultyVector::new(truth)?))
}

fn mix64(mut z: u64) -> u64 {
    z = (z ^ (z >> 30)).wrapping_mul(0xbf58_476d_1ce4_e5b9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94d0_49bb_1331_11eb);
    z ^ (z >> 31)
}

/// Independent stream for one `(seed, snapshot, question)` triple.
fn response_stream(seed: u64, snapshot: usize, question: usize) -> ChaCha8Rng {
    let key = mix64(mix64(seed ^ 0x9e37_79b9_7f4a_7c15).wrapping_add(snapshot as u64))
        .wrapping_add(question as u64);
    ChaCha8Rng::seed_from_u64(mix64(key))
}

/// Answers `question_ids` as snapshot `snapshot`, returning `(question index, correct)`
/// pairs in input order. Each draw comes from its own stream keyed by
/// `(seed, snapshot, question)`, so the result does not depend on evaluation order.
pub fn respond(
    state: &SimLearnerState,
    bank: &QuestionBank,
    question_ids: &[String],
    ground_truth: &DifficultyVector,
    seed: u64,
    snapshot: usize,
) -> Result<Vec<(usize, bool)>> {
    question_ids
        .iter()
        .map(|id| {
            let j = bank
                .index_of(id)
                .ok_or_else(|| MirtError::UnknownQuestion(id.clone()))?;
            let q = &bank.questions()[j];
            let product = conjunctive_log_prob(&state.true_theta, ground_truth.as_slice(), q).exp();
            let p = q.guess_prob() + (1.0 - q.guess_prob()) * product;
            let u: f64 = response_stream(seed, snapshot, j).random();
            Ok((j, u < p))
        })
        .collect()
}

/// Raises each concept's competence by `gain × occurrences in the batch`, clamped at `cap`.
pub fn train_step(
    state: &SimLearnerState,
    selected_questions: &[usize],
    bank: &QuestionBank,
    gain: f64,
    cap: f64,
) -> Result<SimLearnerState> {
    if selected_questions.is_empty() {
        return Err(MirtError::EmptySelection);
    }
    let mut next = state.clone();
    let mut occurrences = vec![0u64; bank.num_concepts()];
    for &j in selected_questions {
        let q = bank.get(j).ok_or(MirtError::IndexOutOfRange {
            what: "question",
            index: j,
            len: bank.len(),
        })?;
        for (c, &n) in q.concept_counts().iter().enumerate() {
            occurrences[c] += u64::from(n);
        }
    }
    for c in 0..bank.num_concepts() {
        next.true_theta[c] = (next.true_theta[c] + gain * occurrences[c] as f64).min(cap);
        next.exposure_counts[c] += occurrences[c];
    }
    next.epoch += 1;
    Ok(next)
}

/// Runs fit → select → respond → train for up to `num_epochs` epochs, stopping early when
/// the selection comes back empty. The early-stop epoch is recorded with stage
/// `exhausted`.
pub fn run_loop(
    sim: &SimConfig,
    curriculum: &CurriculumConfig,
    fit_config: &FitConfig,
    prior: &PriorSpec,
) -> std::result::Result<SimTrace, LoopFailure> {
    let fail = |epoch, trace: &SimTrace, source| LoopFailure {
        epoch,
        trace: trace.clone(),
        source,
    };
    let mut trace = SimTrace::default();
    if let Err(e) = sim
        .validate()
        .and_then(|_| curriculum.validate())
        .and_then(|_| fit_config.validate())
    {
        return Err(fail(0, &trace, e));
    }

    let mut rng = ChaCha8Rng::seed_from_u64(sim.seed);
    let (bank, truth) = generate_bank(sim, &mut rng).map_err(|e| fail(0, &trace, e))?;
    trace.true_difficulty = truth.as_slice().to_vec();
    let response_seed = rng.random::<u64>();

    let mut state = SimLearnerState::initial(sim);
    let mut responses = ResponseMatrix::new(0);
    let mut posterior = PosteriorParams::at_prior(0, bank.num_concepts(), prior);

    for epoch in 0..sim.num_epochs {
        let mut record = EpochRecord {
            epoch,
            stage: Stage::Seeding,
            selected_count: 0,
            batch_count: 0,
            below_lb: 0,
            above_ub: 0,
            mean_concepts: 0.0,
            true_theta: state.true_theta.clone(),
            est_theta: None,
            est_difficulty: None,
            train_accuracy: None,
            fit_iterations: None,
            fit_converged: None,
            elbo: None,
        };

        if epoch > 0 {
            let cfg = FitConfig {
                seed: mix64(fit_config.seed.wrapping_add(epoch as u64)),
                ..fit_config.clone()
            };
            let warm = fit_config.warm_start.then_some(&posterior);
            let (post, report) =
                fit(&responses, &bank, prior, &cfg, warm).map_err(|e| fail(epoch, &trace, e))?;
            posterior = post;
            let latest = posterior.num_snapshots() - 1;
            record.est_theta = Some(posterior.ability_means(latest).as_slice().to_vec());
            record.est_difficulty = Some(posterior.difficulty_means().as_slice().to_vec());
            record.fit_iterations = Some(report.iterations_run);
            record.fit_converged = Some(report.converged);
            record.elbo = report.elbo_final();
        }

        let selection = select(&bank, &posterior, curriculum, epoch);
        record.stage = selection.stage;
        record.selected_count = selection.selected.len();
        record.below_lb = selection.below_lb;
        record.above_ub = selection.above_ub;
        if selection.selected.is_empty() {
            trace.records.push(record);
            break;
        }
        let total: u64 = selection
            .selected
            .iter()
            .map(|id| u64::from(bank.questions()[bank.index_of(id).expect("selected from bank")].total_concepts()))
            .sum();
        record.mean_concepts = total as f64 / selection.selected.len() as f64;

        let batch: Vec<String> = if selection.selected.len() > sim.batch_per_epoch {
            let mut picks = sample_indices(&mut rng, selection.selected.len(), sim.batch_per_epoch).into_vec();
            picks.sort_unstable();
            picks.into_iter().map(|k| selection.selected[k].clone()).collect()
        } else {
            selection.selected.clone()
        };
        record.batch_count = batch.len();

        let snapshot = responses.add_snapshot();
        let answers = respond(&state, &bank, &batch, &truth, response_seed, snapshot)
            .map_err(|e| fail(epoch, &trace, e))?;
        let mut correct = 0usize;
        for &(j, ok) in &answers {
            responses.push(snapshot, j, ok).map_err(|e| fail(epoch, &trace, e))?;
            correct += usize::from(ok);
        }
        record.train_accuracy = Some(correct as f64 / answers.len() as f64);

        let trained: Vec<usize> = answers.iter().map(|&(j, _)| j).collect();
        state = train_step(&state, &trained, &bank, sim.learning_gain, sim.competence_cap)
            .map_err(|e| fail(epoch, &trace, e))?;
        trace.records.push(record);
    }
    Ok(trace)
}

/// True when no selected-set mean concept count falls below a value reached two or more
/// epochs earlier; a dip relative to the immediately preceding epoch is tolerated.
/// Epochs with an empty selection are skipped.
pub fn mean_concepts_nondecreasing(trace: &SimTrace) -> bool {
    let means: Vec<f64> = trace
        .records
        .iter()
        .filter(|r| r.selected_count > 0)
        .map(|r| r.mean_concepts)
        .collect();
    let mut best_lagged = f64::NEG_INFINITY;
    for t in 2..means.len() {
        best_lagged = best_lagged.max(means[t - 2]);
        if means[t] < best_lagged {
            return false;
        }
    }
    true
}

/// True when the stage labels never move backwards in the order
/// seeding < lb_active < both_active < ub_active < exhausted.
pub fn stages_monotone(trace: &SimTrace) -> bool {
    trace.records.windows(2).all(|w| w[0].stage <= w[1].stage)
}
