//! Randomized finite-difference checks of the analytic gradients.
//!
//! Each trial draws a small instance (at most 5 snapshots, 10 questions, 4 concepts)
//! from its own seed, compares every partial derivative against a central difference
//! and records the worst relative error `|a - f| / max(|a|, |f|, 1)`.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};

use crate::error::Result;
use crate::irt::{
    log_likelihood, log_likelihood_grad, AbilitySlice, DifficultyVector, Question, QuestionBank,
    ResponseMatrix,
};
use crate::vi::{elbo_and_grad, elbo_estimate, GaussianFactor, PosteriorParams, PriorSpec};

pub const MAX_SNAPSHOTS: usize = 5;
pub const MAX_QUESTIONS: usize = 10;
pub const MAX_CONCEPTS: usize = 4;

const STEP: f64 = 1e-5;
const MC_SAMPLES: usize = 3;

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct GradcheckConfig {
    pub trials: usize,
    /// Tolerance for the exact likelihood gradient.
    pub likelihood_tol: f64,
    /// Tolerance for the ELBO gradient under common random numbers.
    pub elbo_tol: f64,
    pub seed: u64,
}

impl Default for GradcheckConfig {
    fn default() -> Self {
        Self {
            trials: 100,
            likelihood_tol: 1e-5,
            elbo_tol: 1e-4,
            seed: 0,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct TrialOutcome {
    pub trial: usize,
    pub instance_seed: u64,
    pub likelihood_error: f64,
    pub elbo_error: f64,
}

#[derive(Debug, Clone, PartialEq)]
pub struct GradcheckReport {
    pub outcomes: Vec<TrialOutcome>,
    pub likelihood_tol: f64,
    pub elbo_tol: f64,
}

impl GradcheckReport {
    pub fn worst_likelihood_error(&self) -> f64 {
        self.outcomes.iter().map(|o| o.likelihood_error).fold(0.0, f64::max)
    }

    pub fn worst_elbo_error(&self) -> f64 {
        self.outcomes.iter().map(|o| o.elbo_error).fold(0.0, f64::max)
    }

    pub fn failures(&self) -> impl Iterator<Item = &TrialOutcome> {
        self.outcomes.iter().filter(|o| {
            !(o.likelihood_error <= self.likelihood_tol && o.elbo_error <= self.elbo_tol)
        })
    }

    pub fn passed(&self) -> bool {
        self.failures().next().is_none()
    }
}

pub fn relative_error(analytic: f64, numeric: f64) -> f64 {
    (analytic - numeric).abs() / analytic.abs().max(numeric.abs()).max(1.0)
}

/// A random model instance together with a random variational posterior over it.
#[derive(Debug, Clone)]
pub struct Instance {
    pub bank: QuestionBank,
    pub responses: ResponseMatrix,
    pub abilities: Vec<AbilitySlice>,
    pub difficulties: DifficultyVector,
    pub posterior: PosteriorParams,
    pub prior: PriorSpec,
    pub noise_seed: u64,
}

pub fn instance_seed(seed: u64, trial: usize) -> u64 {
    let mut z = seed ^ (trial as u64).wrapping_mul(0x9e37_79b9_7f4a_7c15);
    z = (z ^ (z >> 30)).wrapping_mul(0xbf58_476d_1ce4_e5b9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94d0_49bb_1331_11eb);
    z ^ (z >> 31)
}

pub fn random_instance(seed: u64) -> Result<Instance> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let m = rng.random_range(1..=MAX_SNAPSHOTS);
    let n = rng.random_range(1..=MAX_QUESTIONS);
    let c = rng.random_range(1..=MAX_CONCEPTS);
    let spread = Normal::new(0.0, 1.5).expect("valid normal");

    let mut questions = Vec::with_capacity(n);
    for j in 0..n {
        let mut counts = vec![0u32; c];
        for _ in 0..rng.random_range(1..=3) {
            counts[rng.random_range(0..c)] += 1;
        }
        let guess = if rng.random_bool(0.3) { 0.0 } else { rng.random_range(0.0..0.6) };
        questions.push(Question::new(format!("q{j}"), counts, guess)?);
    }
    let bank = QuestionBank::with_anonymous_concepts(c, questions)?;

    let mut responses = ResponseMatrix::new(m);
    for i in 0..m {
        for j in 0..n {
            if rng.random_bool(0.8) {
                responses.push(i, j, rng.random_bool(0.5))?;
            }
        }
    }

    let abilities = (0..m)
        .map(|_| AbilitySlice::new((0..c).map(|_| spread.sample(&mut rng)).collect()))
        .collect::<Result<Vec<_>>>()?;
    let difficulties = DifficultyVector::new((0..c).map(|_| spread.sample(&mut rng)).collect())?;

    let factor = |rng: &mut ChaCha8Rng| {
        GaussianFactor::new(spread.sample(rng), rng.random_range(-2.0..0.0))
    };
    let theta = (0..m * c).map(|_| factor(&mut rng)).collect::<Result<Vec<_>>>()?;
    let difficulty = (0..c).map(|_| factor(&mut rng)).collect::<Result<Vec<_>>>()?;
    let posterior = PosteriorParams::from_factors(m, c, theta, difficulty)?;
    let prior = PriorSpec::centered(rng.random_range(0.5..2.0))?;

    Ok(Instance {
        bank,
        responses,
        abilities,
        difficulties,
        posterior,
        prior,
        noise_seed: rng.random(),
    })
}

/// Worst relative error of the likelihood gradient over all `θ_ic` and `b_c`.
pub fn check_likelihood(inst: &Instance) -> Result<f64> {
    let grad = log_likelihood_grad(&inst.responses, &inst.abilities, &inst.difficulties, &inst.bank)?;
    let eval = |abilities: &[AbilitySlice], b: &DifficultyVector| {
        log_likelihood(&inst.responses, abilities, b, &inst.bank)
    };
    let mut worst = 0.0f64;
    for i in 0..inst.abilities.len() {
        for c in 0..inst.bank.num_concepts() {
            let shifted = |delta: f64| -> Result<f64> {
                let mut a = inst.abilities.clone();
                let mut row = a[i].as_slice().to_vec();
                row[c] += delta;
                a[i] = AbilitySlice::new(row)?;
                eval(&a, &inst.difficulties)
            };
            let numeric = (shifted(STEP)? - shifted(-STEP)?) / (2.0 * STEP);
            worst = worst.max(relative_error(grad.theta[i][c], numeric));
        }
    }
    for c in 0..inst.bank.num_concepts() {
        let shifted = |delta: f64| -> Result<f64> {
            let mut b = inst.difficulties.as_slice().to_vec();
            b[c] += delta;
            eval(&inst.abilities, &DifficultyVector::new(b)?)
        };
        let numeric = (shifted(STEP)? - shifted(-STEP)?) / (2.0 * STEP);
        worst = worst.max(relative_error(grad.difficulty[c], numeric));
    }
    Ok(worst)
}

/// Worst relative error of the pathwise ELBO gradient, holding the noise fixed.
pub fn check_elbo(inst: &Instance) -> Result<f64> {
    let (_, grad) = elbo_and_grad(
        &inst.posterior,
        &inst.prior,
        &inst.responses,
        &inst.bank,
        inst.noise_seed,
        MC_SAMPLES,
    )?;
    let eval = |post: &PosteriorParams| {
        elbo_estimate(post, &inst.prior, &inst.responses, &inst.bank, inst.noise_seed, MC_SAMPLES)
    };
    let central = |perturb: &dyn Fn(&mut PosteriorParams, f64)| -> Result<f64> {
        let mut up = inst.posterior.clone();
        perturb(&mut up, STEP);
        let mut down = inst.posterior.clone();
        perturb(&mut down, -STEP);
        Ok((eval(&up)? - eval(&down)?) / (2.0 * STEP))
    };

    let (m, c) = (inst.posterior.num_snapshots(), inst.posterior.num_concepts());
    let mut worst = 0.0f64;
    for i in 0..m {
        for k in 0..c {
            let g = grad.theta[i * c + k];
            let dm = central(&|p, d| p.theta_mut(i, k).mean += d)?;
            let ds = central(&|p, d| p.theta_mut(i, k).log_stddev += d)?;
            worst = worst.max(relative_error(g.mean, dm)).max(relative_error(g.log_stddev, ds));
        }
    }
    for k in 0..c {
        let g = grad.difficulty[k];
        let dm = central(&|p, d| p.difficulty_mut(k).mean += d)?;
        let ds = central(&|p, d| p.difficulty_mut(k).log_stddev += d)?;
        worst = worst.max(relative_error(g.mean, dm)).max(relative_error(g.log_stddev, ds));
    }
    Ok(worst)
}

pub fn run(config: &GradcheckConfig) -> Result<GradcheckReport> {
    let outcomes = (0..config.trials)
        .map(|trial| {
            let instance_seed = instance_seed(config.seed, trial);
            let inst = random_instance(instance_seed)?;
            Ok(TrialOutcome {
                trial,
                instance_seed,
                likelihood_error: check_likelihood(&inst)?,
                elbo_error: check_elbo(&inst)?,
            })
        })
        .collect::<Result<Vec<_>>>()?;
    Ok(GradcheckReport {
        outcomes,
        likelihood_tol: config.likelihood_tol,
        elbo_tol: config.elbo_tol,
    })
}
