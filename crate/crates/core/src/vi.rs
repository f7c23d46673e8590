//! Mean-field Gaussian variational inference for the conjunctive IRT model.
//!
//! Every competence `θ_ic` and difficulty `b_c` gets an independent Gaussian factor
//! parameterized by `(mean, log_stddev)`. The ELBO is estimated as
//!
//! ```text
//! ELBO = E_q[log p(Z | Θ, B)] − Σ_k KL(q_k ‖ prior_k)
//! ```
//!
//! with the expectation taken by Monte Carlo over reparameterized draws
//! `x = mean + exp(log_stddev) · ε`, and the KL terms in closed form. Given the same
//! noise seed, [`elbo_estimate`] and [`elbo_grad`] evaluate the same deterministic
//! function of the parameters, so the gradient can be checked by finite differences.

use rand::{RngCore, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, StandardNormal};
use serde::{Deserialize, Serialize};

use crate::error::{MirtError, Result};
use crate::irt::{accumulate_observation, AbilitySlice, DifficultyVector, QuestionBank, ResponseMatrix};
use crate::optim::Adam;

/// Univariate Gaussian variational factor.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct GaussianFactor {
    pub mean: f64,
    pub log_stddev: f64,
}

impl GaussianFactor {
    pub fn new(mean: f64, log_stddev: f64) -> Result<Self> {
        if !mean.is_finite() || !log_stddev.is_finite() {
            return Err(MirtError::InvalidParameter(
                "Gaussian factor parameters must be finite".into(),
            ));
        }
        Ok(Self { mean, log_stddev })
    }

    pub fn stddev(&self) -> f64 {
        self.log_stddev.exp()
    }
}

/// Gaussian prior `N(mean, stddev²)`.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Prior {
    pub mean: f64,
    pub stddev: f64,
}

impl Prior {
    pub fn new(mean: f64, stddev: f64) -> Result<Self> {
        if !mean.is_finite() || !(stddev > 0.0 && stddev.is_finite()) {
            return Err(MirtError::InvalidParameter(format!(
                "prior N({mean}, {stddev}²) is invalid"
            )));
        }
        Ok(Self { mean, stddev })
    }

    pub fn standard() -> Self {
        Self {
            mean: 0.0,
            stddev: 1.0,
        }
    }

    fn as_factor(&self) -> GaussianFactor {
        GaussianFactor {
            mean: self.mean,
            log_stddev: self.stddev.ln(),
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct PriorSpec {
    pub theta: Prior,
    pub difficulty: Prior,
}

impl Default for PriorSpec {
    fn default() -> Self {
        Self {
            theta: Prior::standard(),
            difficulty: Prior::standard(),
        }
    }
}

impl PriorSpec {
    /// Zero-mean priors with a shared standard deviation.
    pub fn centered(stddev: f64) -> Result<Self> {
        let p = Prior::new(0.0, stddev)?;
        Ok(Self {
            theta: p,
            difficulty: p,
        })
    }
}

/// Variational parameters for all competences (row-major, `M × C`) and difficulties.
#[derive(Debug, Clone, PartialEq)]
pub struct PosteriorParams {
    num_snapshots: usize,
    num_concepts: usize,
    theta: Vec<GaussianFactor>,
    difficulty: Vec<GaussianFactor>,
}

impl PosteriorParams {
    /// All factors equal to their priors.
    pub fn at_prior(num_snapshots: usize, num_concepts: usize, prior: &PriorSpec) -> Self {
        Self {
            num_snapshots,
            num_concepts,
            theta: vec![prior.theta.as_factor(); num_snapshots * num_concepts],
            difficulty: vec![prior.difficulty.as_factor(); num_concepts],
        }
    }

    pub fn from_factors(
        num_snapshots: usize,
        num_concepts: usize,
        theta: Vec<GaussianFactor>,
        difficulty: Vec<GaussianFactor>,
    ) -> Result<Self> {
        if theta.len() != num_snapshots * num_concepts {
            return Err(MirtError::DimensionMismatch {
                what: "theta factors",
                expected: num_snapshots * num_concepts,
                found: theta.len(),
            });
        }
        if difficulty.len() != num_concepts {
            return Err(MirtError::DimensionMismatch {
                what: "difficulty factors",
                expected: num_concepts,
                found: difficulty.len(),
            });
        }
        Ok(Self {
            num_snapshots,
            num_concepts,
            theta,
            difficulty,
        })
    }

    pub fn num_snapshots(&self) -> usize {
        self.num_snapshots
    }

    pub fn num_concepts(&self) -> usize {
        self.num_concepts
    }

    pub fn theta(&self, snapshot: usize, concept: usize) -> &GaussianFactor {
        &self.theta[snapshot * self.num_concepts + concept]
    }

    pub fn theta_mut(&mut self, snapshot: usize, concept: usize) -> &mut GaussianFactor {
        &mut self.theta[snapshot * self.num_concepts + concept]
    }

    pub fn theta_row(&self, snapshot: usize) -> &[GaussianFactor] {
        &self.theta[snapshot * self.num_concepts..(snapshot + 1) * self.num_concepts]
    }

    pub fn difficulty(&self, concept: usize) -> &GaussianFactor {
        &self.difficulty[concept]
    }

    pub fn difficulty_mut(&mut self, concept: usize) -> &mut GaussianFactor {
        &mut self.difficulty[concept]
    }

    pub fn theta_factors(&self) -> &[GaussianFactor] {
        &self.theta
    }

    pub fn difficulty_factors(&self) -> &[GaussianFactor] {
        &self.difficulty
    }

    /// Posterior-mean competences of one snapshot.
    pub fn ability_means(&self, snapshot: usize) -> AbilitySlice {
        AbilitySlice::new(self.theta_row(snapshot).iter().map(|f| f.mean).collect())
            .expect("factor means are finite")
    }

    pub fn difficulty_means(&self) -> DifficultyVector {
        DifficultyVector::new(self.difficulty.iter().map(|f| f.mean).collect())
            .expect("factor means are finite")
    }

    /// Appends snapshot rows initialized at the prior until there are `num_snapshots` rows.
    pub fn extend_snapshots(&mut self, num_snapshots: usize, prior: &PriorSpec) {
        if num_snapshots > self.num_snapshots {
            self.theta.resize(
                num_snapshots * self.num_concepts,
                prior.theta.as_factor(),
            );
            self.num_snapshots = num_snapshots;
        }
    }

    fn num_params(&self) -> usize {
        2 * (self.theta.len() + self.difficulty.len())
    }

    fn write_flat(&self, out: &mut [f64]) {
        for (k, f) in self.theta.iter().chain(&self.difficulty).enumerate() {
            out[2 * k] = f.mean;
            out[2 * k + 1] = f.log_stddev;
        }
    }

    fn read_flat(&mut self, flat: &[f64]) {
        for (k, f) in self.theta.iter_mut().chain(self.difficulty.iter_mut()).enumerate() {
            f.mean = flat[2 * k];
            f.log_stddev = flat[2 * k + 1];
        }
    }
}

/// Partial derivatives with respect to one factor's `(mean, log_stddev)`.
#[derive(Debug, Clone, Copy, Default, PartialEq)]
pub struct FactorGrad {
    pub mean: f64,
    pub log_stddev: f64,
}

/// ELBO gradient laid out like [`PosteriorParams`].
#[derive(Debug, Clone, PartialEq)]
pub struct PosteriorGrad {
    pub theta: Vec<FactorGrad>,
    pub difficulty: Vec<FactorGrad>,
}

impl PosteriorGrad {
    fn zeros(post: &PosteriorParams) -> Self {
        Self {
            theta: vec![FactorGrad::default(); post.theta.len()],
            difficulty: vec![FactorGrad::default(); post.difficulty.len()],
        }
    }

    fn write_flat(&self, out: &mut [f64]) {
        for (k, g) in self.theta.iter().chain(&self.difficulty).enumerate() {
            out[2 * k] = g.mean;
            out[2 * k + 1] = g.log_stddev;
        }
    }

    fn is_finite(&self) -> bool {
        self.theta
            .iter()
            .chain(&self.difficulty)
            .all(|g| g.mean.is_finite() && g.log_stddev.is_finite())
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct FitConfig {
    pub learning_rate: f64,
    pub max_iters: usize,
    pub mc_samples: usize,
    pub seed: u64,
    /// Window for the moving-average ELBO and the lag of the convergence test.
    pub convergence_window: usize,
    /// Relative change of the window-averaged ELBO below which the fit stops.
    pub convergence_tol: f64,
    /// Whether a closed loop should seed each refit with the previous posterior.
    pub warm_start: bool,
}

impl Default for FitConfig {
    fn default() -> Self {
        Self {
            learning_rate: 0.1,
            max_iters: 1000,
            mc_samples: 4,
            seed: 0,
            convergence_window: 50,
            convergence_tol: 1e-4,
            warm_start: true,
        }
    }
}

impl FitConfig {
    pub fn validate(&self) -> Result<()> {
        if !(self.learning_rate > 0.0 && self.learning_rate.is_finite()) {
            return Err(MirtError::InvalidParameter(format!(
                "learning rate must be positive, got {}",
                self.learning_rate
            )));
        }
        if self.max_iters == 0 {
            return Err(MirtError::InvalidParameter("max_iters must be positive".into()));
        }
        if self.mc_samples == 0 {
            return Err(MirtError::InvalidParameter("mc_samples must be at least 1".into()));
        }
        if self.convergence_window == 0 {
            return Err(MirtError::InvalidParameter(
                "convergence_window must be positive".into(),
            ));
        }
        if !(self.convergence_tol >= 0.0) {
            return Err(MirtError::InvalidParameter(
                "convergence_tol must be non-negative".into(),
            ));
        }
        Ok(())
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct FitReport {
    /// Moving average (over `convergence_window` iterations) of the per-iteration ELBO estimate.
    pub elbo_trace: Vec<f64>,
    pub iterations_run: usize,
    pub converged: bool,
}

impl FitReport {
    pub fn elbo_final(&self) -> Option<f64> {
        self.elbo_trace.last().copied()
    }
}

/// `KL(q ‖ N(prior.mean, prior.stddev²))` for a univariate Gaussian `q`.
pub fn gaussian_kl(q: &GaussianFactor, prior: &Prior) -> f64 {
    let var_ratio = (2.0 * q.log_stddev).exp() / (prior.stddev * prior.stddev);
    let diff = (q.mean - prior.mean) / prior.stddev;
    let kl = 0.5 * (var_ratio + diff * diff - 1.0) + prior.stddev.ln() - q.log_stddev;
    kl.max(0.0)
}

fn gaussian_kl_grad(q: &GaussianFactor, prior: &Prior) -> FactorGrad {
    let var = prior.stddev * prior.stddev;
    FactorGrad {
        mean: (q.mean - prior.mean) / var,
        log_stddev: (2.0 * q.log_stddev).exp() / var - 1.0,
    }
}

fn check_dims(post: &PosteriorParams, responses: &ResponseMatrix, bank: &QuestionBank) -> Result<()> {
    if post.num_concepts != bank.num_concepts() {
        return Err(MirtError::DimensionMismatch {
            what: "posterior concepts",
            expected: bank.num_concepts(),
            found: post.num_concepts,
        });
    }
    if post.num_snapshots != responses.num_snapshots() {
        return Err(MirtError::DimensionMismatch {
            what: "posterior snapshots",
            expected: responses.num_snapshots(),
            found: post.num_snapshots,
        });
    }
    if let Some(e) = responses.entries().iter().find(|e| e.question >= bank.len()) {
        return Err(MirtError::IndexOutOfRange {
            what: "question",
            index: e.question,
            len: bank.len(),
        });
    }
    Ok(())
}

/// Standard-normal noise for `mc_samples` joint draws, sample-major, each draw laid out
/// as all competences (row-major) followed by all difficulties.
fn draw_noise(seed: u64, mc_samples: usize, per_draw: usize) -> Vec<f64> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    (0..mc_samples * per_draw)
        .map(|_| StandardNormal.sample(&mut rng))
        .collect()
}

fn evaluate(
    post: &PosteriorParams,
    prior: &PriorSpec,
    responses: &ResponseMatrix,
    bank: &QuestionBank,
    noise_seed: u64,
    mc_samples: usize,
    want_grad: bool,
) -> (f64, Option<PosteriorGrad>) {
    let c = post.num_concepts;
    let n_theta = post.theta.len();
    let per_draw = n_theta + c;
    let noise = draw_noise(noise_seed, mc_samples, per_draw);

    let theta_sd: Vec<f64> = post.theta.iter().map(GaussianFactor::stddev).collect();
    let b_sd: Vec<f64> = post.difficulty.iter().map(GaussianFactor::stddev).collect();

    let mut theta = vec![0.0; n_theta];
    let mut b = vec![0.0; c];
    let mut d_theta = vec![0.0; n_theta];
    let mut d_b = vec![0.0; c];
    let mut grad = want_grad.then(|| PosteriorGrad::zeros(post));
    let mut ll_total = 0.0;

    for eps in noise.chunks_exact(per_draw) {
        let (eps_theta, eps_b) = eps.split_at(n_theta);
        for k in 0..n_theta {
            theta[k] = post.theta[k].mean + theta_sd[k] * eps_theta[k];
        }
        for k in 0..c {
            b[k] = post.difficulty[k].mean + b_sd[k] * eps_b[k];
        }
        if want_grad {
            d_theta.fill(0.0);
            d_b.fill(0.0);
        }
        let mut ll = 0.0;
        for e in responses.entries() {
            let question = &bank.questions()[e.question];
            let row = e.snapshot * c..(e.snapshot + 1) * c;
            let g = want_grad.then(|| (&mut d_theta[row.clone()], d_b.as_mut_slice()));
            ll += accumulate_observation(&theta[row.clone()], &b, question, e.correct, g);
        }
        ll_total += ll;
        if let Some(grad) = grad.as_mut() {
            for k in 0..n_theta {
                grad.theta[k].mean += d_theta[k];
                grad.theta[k].log_stddev += d_theta[k] * eps_theta[k] * theta_sd[k];
            }
            for k in 0..c {
                grad.difficulty[k].mean += d_b[k];
                grad.difficulty[k].log_stddev += d_b[k] * eps_b[k] * b_sd[k];
            }
        }
    }

    let scale = 1.0 / mc_samples as f64;
    let kl: f64 = post
        .theta
        .iter()
        .map(|f| gaussian_kl(f, &prior.theta))
        .chain(post.difficulty.iter().map(|f| gaussian_kl(f, &prior.difficulty)))
        .sum();
    let elbo = ll_total * scale - kl;

    if let Some(grad) = grad.as_mut() {
        let apply = |g: &mut FactorGrad, f: &GaussianFactor, p: &Prior| {
            let kg = gaussian_kl_grad(f, p);
            g.mean = g.mean * scale - kg.mean;
            g.log_stddev = g.log_stddev * scale - kg.log_stddev;
        };
        for (g, f) in grad.theta.iter_mut().zip(&post.theta) {
            apply(g, f, &prior.theta);
        }
        for (g, f) in grad.difficulty.iter_mut().zip(&post.difficulty) {
            apply(g, f, &prior.difficulty);
        }
    }
    (elbo, grad)
}

/// Monte Carlo ELBO estimate; deterministic given `noise_seed`.
pub fn elbo_estimate(
    post: &PosteriorParams,
    prior: &PriorSpec,
    responses: &ResponseMatrix,
    bank: &QuestionBank,
    noise_seed: u64,
    mc_samples: usize,
) -> Result<f64> {
    check_dims(post, responses, bank)?;
    if mc_samples == 0 {
        return Err(MirtError::InvalidParameter("mc_samples must be at least 1".into()));
    }
    Ok(evaluate(post, prior, responses, bank, noise_seed, mc_samples, false).0)
}

/// Pathwise gradient of [`elbo_estimate`] under the same `noise_seed`.
pub fn elbo_grad(
    post: &PosteriorParams,
    prior: &PriorSpec,
    responses: &ResponseMatrix,
    bank: &QuestionBank,
    noise_seed: u64,
    mc_samples: usize,
) -> Result<PosteriorGrad> {
    Ok(elbo_and_grad(post, prior, responses, bank, noise_seed, mc_samples)?.1)
}

pub fn elbo_and_grad(
    post: &PosteriorParams,
    prior: &PriorSpec,
    responses: &ResponseMatrix,
    bank: &QuestionBank,
    noise_seed: u64,
    mc_samples: usize,
) -> Result<(f64, PosteriorGrad)> {
    check_dims(post, responses, bank)?;
    if mc_samples == 0 {
        return Err(MirtError::InvalidParameter("mc_samples must be at least 1".into()));
    }
    let (elbo, grad) = evaluate(post, prior, responses, bank, noise_seed, mc_samples, true);
    Ok((elbo, grad.expect("gradient requested")))
}

/// Maximizes the ELBO with Adam, starting from `warm_start` (rows appended at the prior
/// when the response matrix has grown) or from the prior.
///
/// The fit stops after `max_iters` iterations, or once the windowed ELBO average has
/// changed by less than `convergence_tol` (relative, with denominator at least 1) over
/// the last `convergence_window` iterations.
pub fn fit(
    responses: &ResponseMatrix,
    bank: &QuestionBank,
    prior: &PriorSpec,
    config: &FitConfig,
    warm_start: Option<&PosteriorParams>,
) -> Result<(PosteriorParams, FitReport)> {
    config.validate()?;
    let mut post = match warm_start {
        Some(w) => {
            if w.num_concepts != bank.num_concepts() {
                return Err(MirtError::DimensionMismatch {
                    what: "warm-start concepts",
                    expected: bank.num_concepts(),
                    found: w.num_concepts,
                });
            }
            if w.num_snapshots > responses.num_snapshots() {
                return Err(MirtError::DimensionMismatch {
                    what: "warm-start snapshots",
                    expected: responses.num_snapshots(),
                    found: w.num_snapshots,
                });
            }
            let mut p = w.clone();
            p.extend_snapshots(responses.num_snapshots(), prior);
            p
        }
        None => PosteriorParams::at_prior(responses.num_snapshots(), bank.num_concepts(), prior),
    };
    check_dims(&post, responses, bank)?;

    let window = config.convergence_window;
    let mut seeds = ChaCha8Rng::seed_from_u64(config.seed);
    let mut adam = Adam::new(post.num_params(), config.learning_rate);
    let mut flat = vec![0.0; post.num_params()];
    let mut flat_grad = vec![0.0; post.num_params()];

    let (baseline, _) = evaluate(&post, prior, responses, bank, seeds.next_u64(), config.mc_samples, false);
    if !baseline.is_finite() {
        return Err(MirtError::NonFiniteObjective { iteration: 0 });
    }

    // smoothed[0] is the starting estimate; smoothed[k] averages raw[k-window+1..=k].
    let mut raw: Vec<f64> = Vec::with_capacity(config.max_iters);
    let mut smoothed: Vec<f64> = Vec::with_capacity(config.max_iters + 1);
    smoothed.push(baseline);
    let mut window_sum = 0.0;
    let mut converged = false;

    for iteration in 1..=config.max_iters {
        let (elbo, grad) = evaluate(&post, prior, responses, bank, seeds.next_u64(), config.mc_samples, true);
        let grad = grad.expect("gradient requested");
        if !elbo.is_finite() || !grad.is_finite() {
            return Err(MirtError::NonFiniteObjective { iteration });
        }
        raw.push(elbo);
        window_sum += elbo;
        if raw.len() > window {
            window_sum -= raw[raw.len() - 1 - window];
        }
        let current = window_sum / raw.len().min(window) as f64;
        smoothed.push(current);

        post.write_flat(&mut flat);
        grad.write_flat(&mut flat_grad);
        adam.ascend(&mut flat, &flat_grad);
        if flat.iter().any(|v| !v.is_finite()) {
            return Err(MirtError::NonFiniteObjective { iteration });
        }
        post.read_flat(&flat);

        if iteration >= window {
            let earlier = smoothed[iteration - window];
            let change = (current - earlier).abs() / current.abs().max(1.0);
            if change < config.convergence_tol {
                converged = true;
                break;
            }
        }
    }

    smoothed.remove(0);
    let report = FitReport {
        iterations_run: smoothed.len(),
        elbo_trace: smoothed,
        converged,
    };
    Ok((post, report))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::irt::{log_likelihood, Question};

    fn simpson(f: impl Fn(f64) -> f64, lo: f64, hi: f64, n: usize) -> f64 {
        let h = (hi - lo) / n as f64;
        let mut s = f(lo) + f(hi);
        for k in 1..n {
            let w = if k % 2 == 1 { 4.0 } else { 2.0 };
            s += w * f(lo + k as f64 * h);
        }
        s * h / 3.0
    }

    fn normal_pdf(x: f64, m: f64, s: f64) -> f64 {
        (-(x - m).powi(2) / (2.0 * s * s)).exp() / (s * (2.0 * std::f64::consts::PI).sqrt())
    }

    #[test]
    fn kl_fixtures() {
        let std = Prior::standard();
        assert_eq!(gaussian_kl(&GaussianFactor::new(0.0, 0.0).unwrap(), &std), 0.0);
        assert!((gaussian_kl(&GaussianFactor::new(1.0, 0.0).unwrap(), &std) - 0.5).abs() < 1e-15);

        let q = GaussianFactor::new(0.3, 0.7f64.ln()).unwrap();
        let oracle = simpson(
            |x| {
                let qx = normal_pdf(x, 0.3, 0.7);
                qx * (qx.ln() - normal_pdf(x, 0.0, 1.0).ln())
            },
            -12.0,
            12.0,
            20_000,
        );
        assert!((oracle - 0.146_674_943_938_732_4).abs() < 1e-10);
        assert!((gaussian_kl(&q, &std) - oracle).abs() < 1e-10);
    }

    #[test]
    fn kl_gradient_matches_finite_differences() {
        let p = Prior::new(0.4, 1.3).unwrap();
        let f = GaussianFactor::new(-0.2, 0.3).unwrap();
        let g = gaussian_kl_grad(&f, &p);
        let h = 1e-6;
        let dm = (gaussian_kl(&GaussianFactor::new(f.mean + h, f.log_stddev).unwrap(), &p)
            - gaussian_kl(&GaussianFactor::new(f.mean - h, f.log_stddev).unwrap(), &p))
            / (2.0 * h);
        let ds = (gaussian_kl(&GaussianFactor::new(f.mean, f.log_stddev + h).unwrap(), &p)
            - gaussian_kl(&GaussianFactor::new(f.mean, f.log_stddev - h).unwrap(), &p))
            / (2.0 * h);
        assert!((g.mean - dm).abs() < 1e-8);
        assert!((g.log_stddev - ds).abs() < 1e-8);
    }

    fn tiny_bank() -> QuestionBank {
        QuestionBank::with_anonymous_concepts(
            2,
            vec![
                Question::new("a", vec![1, 0], 0.0).unwrap(),
                Question::new("b", vec![1, 1], 0.25).unwrap(),
                Question::new("c", vec![0, 2], 0.5).unwrap(),
            ],
        )
        .unwrap()
    }

    #[test]
    fn empty_responses_at_prior_give_zero_elbo() {
        let bank = tiny_bank();
        let z = ResponseMatrix::new(3);
        let prior = PriorSpec::default();
        let post = PosteriorParams::at_prior(3, 2, &prior);
        assert_eq!(elbo_estimate(&post, &prior, &z, &bank, 9, 4).unwrap(), 0.0);
        let g = elbo_grad(&post, &prior, &z, &bank, 9, 4).unwrap();
        assert!(g.theta.iter().chain(&g.difficulty).all(|g| g.mean == 0.0 && g.log_stddev == 0.0));
    }

    #[test]
    fn zero_responses_gradient_is_negative_kl_gradient() {
        let bank = tiny_bank();
        let z = ResponseMatrix::new(1);
        let prior = PriorSpec::default();
        let mut post = PosteriorParams::at_prior(1, 2, &prior);
        *post.theta_mut(0, 1) = GaussianFactor::new(0.8, -0.4).unwrap();
        *post.difficulty_mut(0) = GaussianFactor::new(-1.5, 0.2).unwrap();
        let g = elbo_grad(&post, &prior, &z, &bank, 1, 3).unwrap();
        let expect_t = gaussian_kl_grad(post.theta(0, 1), &prior.theta);
        let expect_b = gaussian_kl_grad(post.difficulty(0), &prior.difficulty);
        assert_eq!(g.theta[1].mean, -expect_t.mean);
        assert_eq!(g.theta[1].log_stddev, -expect_t.log_stddev);
        assert_eq!(g.difficulty[0].mean, -expect_b.mean);
        assert_eq!(g.difficulty[0].log_stddev, -expect_b.log_stddev);
    }

    #[test]
    fn near_delta_posterior_recovers_exact_likelihood() {
        let bank = tiny_bank();
        let mut z = ResponseMatrix::new(2);
        z.push(0, 0, true).unwrap();
        z.push(0, 1, false).unwrap();
        z.push(1, 1, true).unwrap();
        z.push(1, 2, false).unwrap();
        let prior = PriorSpec::default();
        let thetas = [[0.4, -0.3], [1.2, 0.9]];
        let bs = [0.1, -0.6];
        let mut post = PosteriorParams::at_prior(2, 2, &prior);
        for i in 0..2 {
            for c in 0..2 {
                *post.theta_mut(i, c) = GaussianFactor::new(thetas[i][c], -20.0).unwrap();
            }
        }
        for c in 0..2 {
            *post.difficulty_mut(c) = GaussianFactor::new(bs[c], -20.0).unwrap();
        }
        let kl: f64 = post
            .theta_factors()
            .iter()
            .map(|f| gaussian_kl(f, &prior.theta))
            .chain(post.difficulty_factors().iter().map(|f| gaussian_kl(f, &prior.difficulty)))
            .sum();
        let abilities: Vec<AbilitySlice> = thetas
            .iter()
            .map(|r| AbilitySlice::new(r.to_vec()).unwrap())
            .collect();
        let exact = log_likelihood(&z, &abilities, &DifficultyVector::new(bs.to_vec()).unwrap(), &bank).unwrap();
        let elbo = elbo_estimate(&post, &prior, &z, &bank, 5, 8).unwrap();
        assert!(((elbo + kl) - exact).abs() < 1e-6);
    }

    #[test]
    fn elbo_gradient_matches_common_random_number_differences() {
        let bank = tiny_bank();
        let mut z = ResponseMatrix::new(2);
        for (i, j, c) in [(0, 0, true), (0, 1, false), (0, 2, true), (1, 1, true), (1, 2, false)] {
            z.push(i, j, c).unwrap();
        }
        let prior = PriorSpec::centered(1.5).unwrap();
        let mut post = PosteriorParams::at_prior(2, 2, &prior);
        let vals = [0.3, -0.7, 1.1, 0.2];
        for (k, v) in vals.iter().enumerate() {
            *post.theta_mut(k / 2, k % 2) = GaussianFactor::new(*v, -0.5 + 0.1 * k as f64).unwrap();
        }
        *post.difficulty_mut(1) = GaussianFactor::new(-0.4, 0.2).unwrap();
        let seed = 77;
        let grad = elbo_grad(&post, &prior, &z, &bank, seed, 3).unwrap();
        let mut flat = vec![0.0; post.num_params()];
        post.write_flat(&mut flat);
        let mut flat_grad = vec![0.0; post.num_params()];
        grad.write_flat(&mut flat_grad);
        let h = 1e-5;
        for k in 0..flat.len() {
            let mut plus = post.clone();
            let mut f = flat.clone();
            f[k] += h;
            plus.read_flat(&f);
            let mut minus = post.clone();
            f[k] -= 2.0 * h;
            minus.read_flat(&f);
            let fd = (elbo_estimate(&plus, &prior, &z, &bank, seed, 3).unwrap()
                - elbo_estimate(&minus, &prior, &z, &bank, seed, 3).unwrap())
                / (2.0 * h);
            let rel = (fd - flat_grad[k]).abs() / fd.abs().max(flat_grad[k].abs()).max(1.0);
            assert!(rel < 1e-4, "param {k}: fd {fd} vs analytic {}", flat_grad[k]);
        }
    }

    #[test]
    fn fit_rejects_bad_config_and_dimensions() {
        let bank = tiny_bank();
        let z = ResponseMatrix::new(1);
        let prior = PriorSpec::default();
        let bad = FitConfig {
            mc_samples: 0,
            ..FitConfig::default()
        };
        assert!(fit(&z, &bank, &prior, &bad, None).is_err());
        let wrong = PosteriorParams::at_prior(1, 3, &prior);
        assert!(matches!(
            fit(&z, &bank, &prior, &FitConfig::default(), Some(&wrong)),
            Err(MirtError::DimensionMismatch { .. })
        ));
    }

    #[test]
    fn divergent_learning_rate_is_reported() {
        let bank = tiny_bank();
        let mut z = ResponseMatrix::new(1);
        z.push(0, 0, true).unwrap();
        let prior = PriorSpec::default();
        let cfg = FitConfig {
            learning_rate: 1e300,
            ..FitConfig::default()
        };
        assert!(matches!(
            fit(&z, &bank, &prior, &cfg, None),
            Err(MirtError::NonFiniteObjective { .. })
        ));
    }

    #[test]
    fn warm_start_extends_rows_at_prior() {
        let prior = PriorSpec::default();
        let mut post = PosteriorParams::at_prior(1, 2, &prior);
        *post.theta_mut(0, 0) = GaussianFactor::new(2.0, -1.0).unwrap();
        post.extend_snapshots(3, &prior);
        assert_eq!(post.num_snapshots(), 3);
        assert_eq!(post.theta(0, 0).mean, 2.0);
        assert_eq!(*post.theta(2, 1), GaussianFactor::new(0.0, 0.0).unwrap());
    }
}
