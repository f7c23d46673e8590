//! Closed-form quantities of the 3PL and conjunctive multi-dimensional IRT models.
//!
//! A snapshot `i` recognizes concept `c` with probability `σ(θ_ic − b_c)` and answers
//! question `j` correctly with probability
//!
//! ```text
//! p(z_ij = 1) = g_j + (1 − g_j) · Π_c σ(θ_ic − b_c)^q_jc
//! ```
//!
//! where `q_jc` counts how often concept `c` occurs in question `j` and `g_j` is the
//! question-level guessing floor. Products are evaluated in log space.

use std::collections::{HashMap, HashSet};

use crate::error::{MirtError, Result};

/// Per-concept log-probabilities are clamped here, close to the smallest positive double.
pub const LOG_PROB_FLOOR: f64 = -745.0;

/// Largest conjunctive log-probability used when scoring an incorrect response, so that
/// `1 − Π p` never rounds to exactly zero.
const LOG_PROB_CEIL: f64 = -1e-300;

/// Dense index into the concept vocabulary of a [`QuestionBank`].
#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash)]
pub struct ConceptId(pub usize);

/// One question: its concept-count vector `q_j·` and its guessing probability `g_j`.
#[derive(Debug, Clone, PartialEq)]
pub struct Question {
    id: String,
    concept_counts: Vec<u32>,
    guess_prob: f64,
    terms: Vec<(usize, f64)>,
}

impl Question {
    pub fn new(id: impl Into<String>, concept_counts: Vec<u32>, guess_prob: f64) -> Result<Self> {
        let id = id.into();
        if !(0.0..1.0).contains(&guess_prob) {
            return Err(MirtError::InvalidQuestion {
                id,
                reason: format!("guess probability {guess_prob} outside [0, 1)"),
            });
        }
        let terms: Vec<(usize, f64)> = concept_counts
            .iter()
            .enumerate()
            .filter(|(_, &n)| n > 0)
            .map(|(c, &n)| (c, f64::from(n)))
            .collect();
        if terms.is_empty() {
            return Err(MirtError::InvalidQuestion {
                id,
                reason: "question references no concept".into(),
            });
        }
        Ok(Self {
            id,
            concept_counts,
            guess_prob,
            terms,
        })
    }

    pub fn id(&self) -> &str {
        &self.id
    }

    pub fn concept_counts(&self) -> &[u32] {
        &self.concept_counts
    }

    pub fn count(&self, concept: ConceptId) -> u32 {
        self.concept_counts.get(concept.0).copied().unwrap_or(0)
    }

    pub fn guess_prob(&self) -> f64 {
        self.guess_prob
    }

    /// Total concept occurrences `Σ_c q_jc`.
    pub fn total_concepts(&self) -> u32 {
        self.concept_counts.iter().sum()
    }

    /// Non-zero `(concept, count)` pairs.
    pub(crate) fn terms(&self) -> &[(usize, f64)] {
        &self.terms
    }

    pub fn num_concepts(&self) -> usize {
        self.concept_counts.len()
    }
}

/// Concept vocabulary plus the questions built from it.
#[derive(Debug, Clone, PartialEq)]
pub struct QuestionBank {
    concept_names: Vec<String>,
    questions: Vec<Question>,
    by_id: HashMap<String, usize>,
}

impl QuestionBank {
    pub fn new(concept_names: Vec<String>, questions: Vec<Question>) -> Result<Self> {
        if concept_names.is_empty() {
            return Err(MirtError::InvalidParameter(
                "question bank needs at least one concept".into(),
            ));
        }
        let num_concepts = concept_names.len();
        let mut by_id = HashMap::with_capacity(questions.len());
        for (j, q) in questions.iter().enumerate() {
            if q.num_concepts() != num_concepts {
                return Err(MirtError::DimensionMismatch {
                    what: "question concept counts",
                    expected: num_concepts,
                    found: q.num_concepts(),
                });
            }
            if by_id.insert(q.id.clone(), j).is_some() {
                return Err(MirtError::InvalidQuestion {
                    id: q.id.clone(),
                    reason: "duplicate question id".into(),
                });
            }
        }
        Ok(Self {
            concept_names,
            questions,
            by_id,
        })
    }

    /// Bank whose concepts are named `c0`, `c1`, ...
    pub fn with_anonymous_concepts(num_concepts: usize, questions: Vec<Question>) -> Result<Self> {
        let names = (0..num_concepts).map(|c| format!("c{c}")).collect();
        Self::new(names, questions)
    }

    pub fn num_concepts(&self) -> usize {
        self.concept_names.len()
    }

    pub fn concept_names(&self) -> &[String] {
        &self.concept_names
    }

    pub fn questions(&self) -> &[Question] {
        &self.questions
    }

    pub fn len(&self) -> usize {
        self.questions.len()
    }

    pub fn is_empty(&self) -> bool {
        self.questions.is_empty()
    }

    pub fn get(&self, index: usize) -> Option<&Question> {
        self.questions.get(index)
    }

    pub fn index_of(&self, id: &str) -> Option<usize> {
        self.by_id.get(id).copied()
    }

    pub fn concept_index(&self, name: &str) -> Option<ConceptId> {
        self.concept_names
            .iter()
            .position(|n| n == name)
            .map(ConceptId)
    }
}

/// A single observed response `z_ij`.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct Response {
    pub snapshot: usize,
    pub question: usize,
    pub correct: bool,
}

/// Sparse snapshot × question correctness matrix. Absent cells mean "no response".
#[derive(Debug, Clone, Default, PartialEq)]
pub struct ResponseMatrix {
    num_snapshots: usize,
    entries: Vec<Response>,
    seen: HashSet<(usize, usize)>,
}

impl ResponseMatrix {
    pub fn new(num_snapshots: usize) -> Self {
        Self {
            num_snapshots,
            ..Self::default()
        }
    }

    pub fn num_snapshots(&self) -> usize {
        self.num_snapshots
    }

    pub fn entries(&self) -> &[Response] {
        &self.entries
    }

    pub fn len(&self) -> usize {
        self.entries.len()
    }

    pub fn is_empty(&self) -> bool {
        self.entries.is_empty()
    }

    /// Appends an empty snapshot row and returns its index.
    pub fn add_snapshot(&mut self) -> usize {
        self.num_snapshots += 1;
        self.num_snapshots - 1
    }

    pub fn push(&mut self, snapshot: usize, question: usize, correct: bool) -> Result<()> {
        if snapshot >= self.num_snapshots {
            return Err(MirtError::IndexOutOfRange {
                what: "snapshot",
                index: snapshot,
                len: self.num_snapshots,
            });
        }
        if !self.seen.insert((snapshot, question)) {
            return Err(MirtError::DuplicateResponse { snapshot, question });
        }
        self.entries.push(Response {
            snapshot,
            question,
            correct,
        });
        Ok(())
    }

    pub fn contains(&self, snapshot: usize, question: usize) -> bool {
        self.seen.contains(&(snapshot, question))
    }
}

fn check_finite(values: &[f64], what: &str) -> Result<()> {
    match values.iter().position(|v| !v.is_finite()) {
        Some(i) => Err(MirtError::InvalidParameter(format!(
            "{what}[{i}] is not finite"
        ))),
        None => Ok(()),
    }
}

/// Competences `θ_i·` of one snapshot over all concepts.
#[derive(Debug, Clone, PartialEq)]
pub struct AbilitySlice(Vec<f64>);

impl AbilitySlice {
    pub fn new(competences: Vec<f64>) -> Result<Self> {
        check_finite(&competences, "competence")?;
        Ok(Self(competences))
    }

    pub fn as_slice(&self) -> &[f64] {
        &self.0
    }

    pub fn len(&self) -> usize {
        self.0.len()
    }

    pub fn is_empty(&self) -> bool {
        self.0.is_empty()
    }
}

/// Concept difficulties `b_·`.
#[derive(Debug, Clone, PartialEq)]
pub struct DifficultyVector(Vec<f64>);

impl DifficultyVector {
    pub fn new(difficulties: Vec<f64>) -> Result<Self> {
        check_finite(&difficulties, "difficulty")?;
        Ok(Self(difficulties))
    }

    pub fn as_slice(&self) -> &[f64] {
        &self.0
    }

    pub fn len(&self) -> usize {
        self.0.len()
    }

    pub fn is_empty(&self) -> bool {
        self.0.is_empty()
    }
}

/// Item of the classic three-parameter logistic model.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct ThreePLItem {
    discrimination: f64,
    difficulty: f64,
    guess: f64,
}

impl ThreePLItem {
    pub fn new(discrimination: f64, difficulty: f64, guess: f64) -> Result<Self> {
        if !discrimination.is_finite() || !difficulty.is_finite() {
            return Err(MirtError::InvalidParameter(
                "3PL discrimination and difficulty must be finite".into(),
            ));
        }
        if !(0.0..1.0).contains(&guess) {
            return Err(MirtError::InvalidParameter(format!(
                "3PL guess {guess} outside [0, 1)"
            )));
        }
        Ok(Self {
            discrimination,
            difficulty,
            guess,
        })
    }

    pub fn discrimination(&self) -> f64 {
        self.discrimination
    }

    pub fn difficulty(&self) -> f64 {
        self.difficulty
    }

    pub fn guess(&self) -> f64 {
        self.guess
    }
}

#[inline]
pub(crate) fn sigmoid(x: f64) -> f64 {
    if x >= 0.0 {
        1.0 / (1.0 + (-x).exp())
    } else {
        let e = x.exp();
        e / (1.0 + e)
    }
}

/// `ln σ(x)`, clamped at [`LOG_PROB_FLOOR`].
#[inline]
pub(crate) fn log_sigmoid(x: f64) -> f64 {
    let v = if x >= 0.0 {
        -(-x).exp().ln_1p()
    } else {
        x - x.exp().ln_1p()
    };
    v.max(LOG_PROB_FLOOR)
}

/// Derivative of the clamped [`log_sigmoid`]; zero where the clamp is active.
#[inline]
fn log_sigmoid_slope(x: f64) -> f64 {
    if log_sigmoid(x) <= LOG_PROB_FLOOR {
        0.0
    } else {
        sigmoid(-x)
    }
}

/// `ln(1 − e^x)` for `x < 0`.
#[inline]
fn log1m_exp(x: f64) -> f64 {
    if x > -std::f64::consts::LN_2 {
        (-x.exp_m1()).ln()
    } else {
        (-x.exp()).ln_1p()
    }
}

/// Three-parameter logistic response probability `c + (1 − c) / (1 + e^{−a(θ − b)})`.
pub fn logistic_3pl(item: &ThreePLItem, ability: f64) -> f64 {
    let c = item.guess;
    c + (1.0 - c) * sigmoid(item.discrimination * (ability - item.difficulty))
}

/// Probability that a snapshot with competence `theta` recognizes a concept of difficulty `b`.
pub fn concept_prob(theta: f64, b: f64) -> f64 {
    sigmoid(theta - b)
}

/// `Σ_c q_jc · ln σ(θ_c − b_c)`: the guess-free conjunctive log-probability.
#[inline]
pub(crate) fn conjunctive_log_prob(theta: &[f64], b: &[f64], question: &Question) -> f64 {
    question
        .terms()
        .iter()
        .map(|&(c, n)| n * log_sigmoid(theta[c] - b[c]))
        .sum()
}

/// Log-likelihood of one observation given its conjunctive log-probability `l`,
/// together with `∂ log p / ∂ l`.
#[inline]
pub(crate) fn observation_log_prob(l: f64, guess: f64, correct: bool) -> (f64, f64) {
    if correct {
        if guess == 0.0 {
            return (l, 1.0);
        }
        let lg = guess.ln();
        let lrest = (-guess).ln_1p() + l;
        let (hi, lo) = if lg > lrest { (lg, lrest) } else { (lrest, lg) };
        let value = hi + (lo - hi).exp().ln_1p();
        let weight = sigmoid(lrest - lg);
        (value, weight)
    } else {
        let l = l.min(LOG_PROB_CEIL);
        let value = (-guess).ln_1p() + log1m_exp(l);
        let slope = -1.0 / (-l).exp_m1();
        (value, slope)
    }
}

/// Accumulates `log p(z | θ_i, B)` for a single observation and, optionally, adds its
/// partial derivatives into `grad_theta` (the snapshot's row) and `grad_b`.
#[inline]
pub(crate) fn accumulate_observation(
    theta: &[f64],
    b: &[f64],
    question: &Question,
    correct: bool,
    grad: Option<(&mut [f64], &mut [f64])>,
) -> f64 {
    let l = conjunctive_log_prob(theta, b, question);
    let (value, dl) = observation_log_prob(l, question.guess_prob, correct);
    if let Some((grad_theta, grad_b)) = grad {
        if dl != 0.0 {
            for &(c, n) in question.terms() {
                let g = dl * n * log_sigmoid_slope(theta[c] - b[c]);
                grad_theta[c] += g;
                grad_b[c] -= g;
            }
        }
    }
    value
}

fn check_dims(ability: usize, difficulties: usize, question: usize) -> Result<()> {
    if ability != difficulties {
        return Err(MirtError::DimensionMismatch {
            what: "ability vs difficulty",
            expected: difficulties,
            found: ability,
        });
    }
    if question != difficulties {
        return Err(MirtError::DimensionMismatch {
            what: "question vs difficulty",
            expected: difficulties,
            found: question,
        });
    }
    Ok(())
}

/// Probability of a correct answer. With `include_guess` this is the full conjunctive
/// model; without it, only the product of concept probabilities (the selection score).
pub fn answer_prob(
    ability: &AbilitySlice,
    difficulties: &DifficultyVector,
    question: &Question,
    include_guess: bool,
) -> Result<f64> {
    check_dims(ability.len(), difficulties.len(), question.num_concepts())?;
    let product = conjunctive_log_prob(ability.as_slice(), difficulties.as_slice(), question).exp();
    Ok(if include_guess {
        let g = question.guess_prob;
        g + (1.0 - g) * product
    } else {
        product
    })
}

/// Gradient of [`log_likelihood`] with respect to every `θ_ic` (row-major by snapshot)
/// and every `b_c`.
#[derive(Debug, Clone, PartialEq)]
pub struct LikelihoodGrad {
    pub theta: Vec<Vec<f64>>,
    pub difficulty: Vec<f64>,
}

/// Partial sum of the log-likelihood (and optionally its gradient) over a subset of entries.
///
/// Partials over disjoint subsets combine with [`LikelihoodPartial::merge`]; the result
/// equals the full evaluation up to floating-point reassociation.
#[derive(Debug, Clone, PartialEq)]
pub struct LikelihoodPartial {
    pub value: f64,
    pub grad: Option<LikelihoodGrad>,
}

impl LikelihoodPartial {
    pub fn merge(mut self, other: LikelihoodPartial) -> LikelihoodPartial {
        self.value += other.value;
        self.grad = match (self.grad, other.grad) {
            (Some(mut a), Some(b)) => {
                for (ra, rb) in a.theta.iter_mut().zip(&b.theta) {
                    for (x, y) in ra.iter_mut().zip(rb) {
                        *x += y;
                    }
                }
                for (x, y) in a.difficulty.iter_mut().zip(&b.difficulty) {
                    *x += y;
                }
                Some(a)
            }
            (a, b) => a.or(b),
        };
        self
    }
}

fn validate_model(
    num_snapshots: usize,
    abilities: &[AbilitySlice],
    difficulties: &DifficultyVector,
    bank: &QuestionBank,
) -> Result<()> {
    if abilities.len() != num_snapshots {
        return Err(MirtError::DimensionMismatch {
            what: "snapshot abilities",
            expected: num_snapshots,
            found: abilities.len(),
        });
    }
    let c = bank.num_concepts();
    if difficulties.len() != c {
        return Err(MirtError::DimensionMismatch {
            what: "difficulties",
            expected: c,
            found: difficulties.len(),
        });
    }
    if let Some(a) = abilities.iter().find(|a| a.len() != c) {
        return Err(MirtError::DimensionMismatch {
            what: "ability",
            expected: c,
            found: a.len(),
        });
    }
    Ok(())
}

/// Evaluates the log-likelihood over `entries` only.
pub fn log_likelihood_partial(
    entries: &[Response],
    abilities: &[AbilitySlice],
    difficulties: &DifficultyVector,
    bank: &QuestionBank,
    with_grad: bool,
) -> Result<LikelihoodPartial> {
    let c = bank.num_concepts();
    let b = difficulties.as_slice();
    let mut grad = with_grad.then(|| LikelihoodGrad {
        theta: vec![vec![0.0; c]; abilities.len()],
        difficulty: vec![0.0; c],
    });
    let mut value = 0.0;
    for e in entries {
        let ability = abilities.get(e.snapshot).ok_or(MirtError::IndexOutOfRange {
            what: "snapshot",
            index: e.snapshot,
            len: abilities.len(),
        })?;
        let question = bank.get(e.question).ok_or(MirtError::IndexOutOfRange {
            what: "question",
            index: e.question,
            len: bank.len(),
        })?;
        let g = grad
            .as_mut()
            .map(|g| (g.theta[e.snapshot].as_mut_slice(), g.difficulty.as_mut_slice()));
        value += accumulate_observation(ability.as_slice(), b, question, e.correct, g);
    }
    Ok(LikelihoodPartial { value, grad })
}

/// Total data log-likelihood `Σ_(i,j) observed log p(z_ij | θ_i, B)`.
pub fn log_likelihood(
    responses: &ResponseMatrix,
    abilities: &[AbilitySlice],
    difficulties: &DifficultyVector,
    bank: &QuestionBank,
) -> Result<f64> {
    validate_model(responses.num_snapshots(), abilities, difficulties, bank)?;
    Ok(log_likelihood_partial(responses.entries(), abilities, difficulties, bank, false)?.value)
}

/// Analytic gradient of [`log_likelihood`].
pub fn log_likelihood_grad(
    responses: &ResponseMatrix,
    abilities: &[AbilitySlice],
    difficulties: &DifficultyVector,
    bank: &QuestionBank,
) -> Result<LikelihoodGrad> {
    validate_model(responses.num_snapshots(), abilities, difficulties, bank)?;
    let partial = log_likelihood_partial(responses.entries(), abilities, difficulties, bank, true)?;
    Ok(partial.grad.expect("gradient requested"))
}
