use mirt_curriculum::irt::{Question, QuestionBank, ResponseMatrix};
use mirt_curriculum::stats::spearman;
use mirt_curriculum::vi::{elbo_estimate, elbo_grad, fit, FitConfig, GaussianFactor, PosteriorParams, PriorSpec};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, StandardNormal};

fn sigmoid(x: f64) -> f64 {
    1.0 / (1.0 + (-x).exp())
}

fn single_concept_bank(n: usize, guess: f64) -> QuestionBank {
    let qs = (0..n).map(|j| Question::new(format!("q{j}"), vec![1], guess).unwrap()).collect();
    QuestionBank::with_anonymous_concepts(1, qs).unwrap()
}

#[test]
fn half_correct_replicated_questions_center_the_gap() {
    let bank = single_concept_bank(200, 0.0);
    let mut r = ResponseMatrix::new(1);
    for j in 0..200 {
        r.push(0, j, j % 2 == 0).unwrap();
    }
    let (post, _) = fit(&r, &bank, &PriorSpec::default(), &FitConfig::default(), None).unwrap();
    let gap = post.theta(0, 0).mean - post.difficulty(0).mean;
    assert!(gap.abs() < 0.15, "θ - b = {gap}");
}

/// Competences drift linearly around a zero average per concept, which keeps the
/// prior-fixed offset between θ and b at the generating values.
fn synthetic(m: usize, n: usize, c: usize, seed: u64) -> (QuestionBank, ResponseMatrix, Vec<f64>) {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let b: Vec<f64> = (0..c).map(|_| StandardNormal.sample(&mut rng)).collect();
    let slope: Vec<f64> = (0..c).map(|_| rng.random_range(-3.0..3.0)).collect();
    let qs: Vec<Question> = (0..n)
        .map(|j| {
            let mut counts = vec![0u32; c];
            for _ in 0..rng.random_range(1..=2) {
                counts[rng.random_range(0..c)] += 1;
            }
            Question::new(format!("q{j}"), counts, 0.0).unwrap()
        })
        .collect();
    let bank = QuestionBank::with_anonymous_concepts(c, qs).unwrap();
    let mut r = ResponseMatrix::new(m);
    for i in 0..m {
        let t = i as f64 / (m - 1) as f64 - 0.5;
        for (j, q) in bank.questions().iter().enumerate() {
            let p: f64 = (0..c)
                .map(|k| sigmoid(slope[k] * t - b[k]).powi(q.concept_counts()[k] as i32))
                .product();
            r.push(i, j, rng.random::<f64>() < p).unwrap();
        }
    }
    (bank, r, b)
}

#[test]
fn recovers_difficulty_ranks_on_medium_instance() {
    let (bank, r, b) = synthetic(20, 500, 5, 4);
    let (post, report) = fit(&r, &bank, &PriorSpec::default(), &FitConfig::default(), None).unwrap();
    let rho = spearman(&b, post.difficulty_means().as_slice());
    assert!(rho >= 0.9, "spearman {rho}");

    // Smoothed trace stays within a 1% band of its running maximum after iteration 100.
    let trace = &report.elbo_trace;
    let mut best = f64::NEG_INFINITY;
    for (k, &v) in trace.iter().enumerate() {
        if k >= 100 {
            assert!(v >= best - 0.01 * best.abs(), "iteration {k}: {v} after {best}");
        }
        best = best.max(v);
    }
}

#[test]
fn warm_start_at_fixed_point_stays_there() {
    let (bank, r, _) = synthetic(5, 100, 3, 9);
    let config = FitConfig::default();
    let (post, first) = fit(&r, &bank, &PriorSpec::default(), &config, None).unwrap();
    assert!(first.converged);
    for seed in 1..=5 {
        let again = FitConfig { seed, ..config.clone() };
        let (_, second) = fit(&r, &bank, &PriorSpec::default(), &again, Some(&post)).unwrap();
        assert!(second.converged, "seed {seed}");
        let before = first.elbo_final().unwrap();
        let after = second.elbo_final().unwrap();
        assert!((after - before).abs() / before.abs() < 1e-2, "{before} -> {after}");
    }
}

#[test]
fn identical_rows_get_identical_gradients() {
    let bank = QuestionBank::with_anonymous_concepts(
        2,
        vec![
            Question::new("a", vec![1, 0], 0.2).unwrap(),
            Question::new("b", vec![1, 1], 0.0).unwrap(),
            Question::new("c", vec![0, 2], 0.5).unwrap(),
        ],
    )
    .unwrap();
    let mut r = ResponseMatrix::new(2);
    for i in 0..2 {
        for (j, z) in [true, false, true].into_iter().enumerate() {
            r.push(i, j, z).unwrap();
        }
    }
    let f = |m: f64, s: f64| GaussianFactor::new(m, s).unwrap();
    let row = [f(0.4, -0.5), f(-0.3, -1.0)];
    let post = PosteriorParams::from_factors(
        2,
        2,
        row.iter().chain(&row).copied().collect(),
        vec![f(0.1, -0.7), f(0.5, -0.2)],
    )
    .unwrap();
    let g = elbo_grad(&post, &PriorSpec::default(), &r, &bank, 17, 10_000).unwrap();
    for k in 0..2 {
        let (a, b) = (g.theta[k], g.theta[2 + k]);
        assert!((a.mean - b.mean).abs() < 1e-2, "{a:?} vs {b:?}");
        assert!((a.log_stddev - b.log_stddev).abs() < 1e-2, "{a:?} vs {b:?}");
    }
}

/// The Monte Carlo estimate averages to the quadrature value of the ELBO.
#[test]
fn elbo_estimate_matches_quadrature() {
    let bank = QuestionBank::with_anonymous_concepts(
        1,
        vec![
            Question::new("a", vec![2], 0.25).unwrap(),
            Question::new("b", vec![1], 0.0).unwrap(),
        ],
    )
    .unwrap();
    let mut r = ResponseMatrix::new(1);
    r.push(0, 0, true).unwrap();
    r.push(0, 1, false).unwrap();
    let (mt, st, mb, sb) = (0.4, 0.8f64, -0.2, 0.6f64);
    let post = PosteriorParams::from_factors(
        1,
        1,
        vec![GaussianFactor::new(mt, st.ln()).unwrap()],
        vec![GaussianFactor::new(mb, sb.ln()).unwrap()],
    )
    .unwrap();

    let (mean, sd) = (mt - mb, (st * st + sb * sb).sqrt());
    let n = 20_000;
    let h = 24.0 * sd / n as f64;
    let mut expected = 0.0;
    for k in 0..=n {
        let x = mean - 12.0 * sd + k as f64 * h;
        let pa = 0.25 + 0.75 * sigmoid(x).powi(2);
        let pb = 1.0 - sigmoid(x);
        let w = if k == 0 || k == n { 1.0 } else if k % 2 == 1 { 4.0 } else { 2.0 };
        let dens = (-0.5 * ((x - mean) / sd).powi(2)).exp() / (sd * (2.0 * std::f64::consts::PI).sqrt());
        expected += w * (pa.ln() + pb.ln()) * dens;
    }
    expected *= h / 3.0;
    let kl = |m: f64, s: f64| -s.ln() + (s * s + m * m) / 2.0 - 0.5;
    let exact = expected - kl(mt, st) - kl(mb, sb);

    let est = elbo_estimate(&post, &PriorSpec::default(), &r, &bank, 5, 400_000).unwrap();
    assert!((est - exact).abs() < 5e-3, "MC {est} vs quadrature {exact}");
}
