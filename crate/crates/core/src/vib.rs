//! Per-token Gaussian bottleneck with a softmax classifier on the sampled
//! latent.

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, StandardNormal};
use serde::Serialize;
use thiserror::Error;

use crate::autodiff::{logsumexp, AutodiffError, Tape, Tensor, Var};

pub const LOG_VAR_BOUND: f64 = 10.0;
/// Floor applied to probabilities before taking the log in the task loss.
pub const PROB_FLOOR: f64 = 1e-12;

#[derive(Debug, Error)]
pub enum VibError {
    #[error("no supervised tokens")]
    NoSupervisedTokens,
    #[error("beta must be finite and non-negative, got {0}")]
    InvalidBeta(f64),
    #[error("target class {class} out of range for {classes} classes")]
    TargetOutOfRange { class: usize, classes: usize },
    #[error("{what}: expected {expected}, got {got}")]
    Length {
        what: &'static str,
        expected: usize,
        got: usize,
    },
    #[error(transparent)]
    Autodiff(#[from] AutodiffError),
}

pub type Result<T> = std::result::Result<T, VibError>;
type TapeResult<T> = std::result::Result<T, AutodiffError>;

#[derive(Debug, Clone, PartialEq)]
pub struct VibParams {
    pub w_mu: Tensor,
    /// `1×d_z`
    pub b_mu: Tensor,
    pub w_sigma: Tensor,
    pub b_sigma: Tensor,
    pub w_c: Tensor,
    /// `1×|C|`
    pub b_c: Tensor,
    pub beta: f64,
}

#[derive(Debug, Clone, Copy)]
pub struct VibVars<'t> {
    pub w_mu: Var<'t>,
    pub b_mu: Var<'t>,
    pub w_sigma: Var<'t>,
    pub b_sigma: Var<'t>,
    pub w_c: Var<'t>,
    pub b_c: Var<'t>,
}

impl VibParams {
    pub fn on<'t>(&self, tape: &'t Tape) -> VibVars<'t> {
        VibVars {
            w_mu: tape.constant(self.w_mu.clone()),
            b_mu: tape.constant(self.b_mu.clone()),
            w_sigma: tape.constant(self.w_sigma.clone()),
            b_sigma: tape.constant(self.b_sigma.clone()),
            w_c: tape.constant(self.w_c.clone()),
            b_c: tape.constant(self.b_c.clone()),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct GaussianPosterior {
    pub mu: Tensor,
    pub log_var: Tensor,
    pub z: Option<Tensor>,
    pub epsilon: Option<Tensor>,
}

/// `(μ, log σ²)` with the log-variance clamped to `±LOG_VAR_BOUND`.
pub fn encode_gaussian_on<'t>(t_prime: Var<'t>, p: &VibVars<'t>) -> TapeResult<(Var<'t>, Var<'t>)> {
    let mu = t_prime.matmul(p.w_mu)?.add_row_vec(p.b_mu)?;
    let lv = t_prime
        .matmul(p.w_sigma)?
        .add_row_vec(p.b_sigma)?
        .clamp(-LOG_VAR_BOUND, LOG_VAR_BOUND);
    Ok((mu, lv))
}

/// `z = μ + exp(lv/2) ⊙ ε`.
pub fn reparameterize_on<'t>(mu: Var<'t>, log_var: Var<'t>, epsilon: Var<'t>) -> TapeResult<Var<'t>> {
    mu.add(log_var.scale(0.5).exp().mul(epsilon)?)
}

/// Per-token KL summed over tokens and dims.
pub fn kl_sum_on<'t>(mu: Var<'t>, log_var: Var<'t>) -> TapeResult<Var<'t>> {
    let terms = mu.mul(mu)?.add(log_var.exp())?.sub(log_var)?.add_scalar(-1.0);
    Ok(terms.sum().scale(0.5))
}

pub fn logits_on<'t>(z: Var<'t>, p: &VibVars<'t>) -> TapeResult<Var<'t>> {
    z.matmul(p.w_c)?.add_row_vec(p.b_c)
}

/// `−Σ_i Σ_c y_ic log max(ŷ_ic, floor)`, summed (not averaged) over rows.
pub fn cross_entropy_sum_on<'t>(probs: Var<'t>, one_hot: Var<'t>) -> TapeResult<Var<'t>> {
    Ok(probs.clamp(PROB_FLOOR, 1.0).log().mul(one_hot)?.sum().scale(-1.0))
}

/// Standard-normal draws from a seeded stream.
pub fn standard_normal(rows: usize, cols: usize, seed: u64) -> Tensor {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    Tensor::matrix(
        rows,
        cols,
        (0..rows * cols).map(|_| StandardNormal.sample(&mut rng)).collect(),
    )
}

pub fn encode_gaussian(t_prime: &Tensor, params: &VibParams) -> Result<GaussianPosterior> {
    let tape = Tape::new();
    let (mu, lv) = encode_gaussian_on(tape.constant(t_prime.clone()), &params.on(&tape))?;
    Ok(GaussianPosterior {
        mu: mu.value(),
        log_var: lv.value(),
        z: None,
        epsilon: None,
    })
}

/// Draws `ε` from `seed` and fills in `z` and `epsilon`.
pub fn reparameterize(posterior: &GaussianPosterior, seed: u64) -> Result<GaussianPosterior> {
    let eps = standard_normal(posterior.mu.rows(), posterior.mu.cols(), seed);
    reparameterize_with(posterior, eps)
}

/// Same as [`reparameterize`] with a caller-supplied `ε` (zeros give the
/// posterior mean).
pub fn reparameterize_with(posterior: &GaussianPosterior, epsilon: Tensor) -> Result<GaussianPosterior> {
    let tape = Tape::new();
    let z = reparameterize_on(
        tape.constant(posterior.mu.clone()),
        tape.constant(posterior.log_var.clone()),
        tape.constant(epsilon.clone()),
    )?;
    Ok(GaussianPosterior {
        z: Some(z.value()),
        epsilon: Some(epsilon),
        ..posterior.clone()
    })
}

fn kl_term(mu: f64, lv: f64) -> f64 {
    0.5 * (mu * mu + lv.exp() - lv - 1.0)
}

/// Mean over tokens of the per-token KL to `N(0, I)`.
pub fn kl_to_standard_normal(posterior: &GaussianPosterior) -> f64 {
    let n = posterior.mu.rows();
    if n == 0 {
        return 0.0;
    }
    let total: f64 = posterior
        .mu
        .data()
        .iter()
        .zip(posterior.log_var.data())
        .map(|(m, l)| kl_term(*m, *l))
        .sum();
    total / n as f64
}

/// Mean KL of each latent dimension over tokens.
pub fn per_dim_kl_profile(posterior: &GaussianPosterior) -> Vec<f64> {
    let (n, dz) = (posterior.mu.rows(), posterior.mu.cols());
    let mut out = vec![0.0; dz];
    for i in 0..n {
        for (k, o) in out.iter_mut().enumerate() {
            *o += kl_term(posterior.mu.get(i, k), posterior.log_var.get(i, k));
        }
    }
    if n > 0 {
        out.iter_mut().for_each(|x| *x /= n as f64);
    }
    out
}

/// Row softmax of `z·W_c + b_c`.
pub fn classify(z: &Tensor, params: &VibParams) -> Result<Tensor> {
    let tape = Tape::new();
    Ok(logits_on(tape.constant(z.clone()), &params.on(&tape))?
        .softmax_rows()?
        .value())
}

/// Mean cross-entropy over the tokens with `mask[i]`.
pub fn task_loss(probs: &Tensor, targets: &[usize], mask: &[bool]) -> Result<f64> {
    let (n, c) = (probs.rows(), probs.cols());
    for (what, got) in [("targets", targets.len()), ("mask", mask.len())] {
        if got != n {
            return Err(VibError::Length { what, expected: n, got });
        }
    }
    let mut total = 0.0;
    let mut count = 0usize;
    for i in (0..n).filter(|&i| mask[i]) {
        if targets[i] >= c {
            return Err(VibError::TargetOutOfRange {
                class: targets[i],
                classes: c,
            });
        }
        total -= probs.get(i, targets[i]).max(PROB_FLOOR).ln();
        count += 1;
    }
    if count == 0 {
        return Err(VibError::NoSupervisedTokens);
    }
    Ok(total / count as f64)
}

pub fn total_loss(task: f64, kl: f64, beta: f64) -> Result<f64> {
    if !(beta >= 0.0 && beta.is_finite()) {
        return Err(VibError::InvalidBeta(beta));
    }
    Ok(task + beta * kl)
}

/// Linear warm-up of `beta` from 0 over the first `warmup_steps` steps.
pub fn beta_at(beta: f64, step: usize, warmup_steps: usize) -> f64 {
    if warmup_steps == 0 || step >= warmup_steps {
        beta
    } else {
        beta * step as f64 / warmup_steps as f64
    }
}

/// Monte-Carlo estimate of `E_q[log q(z) − log p(z)]` averaged over tokens.
pub fn monte_carlo_kl(posterior: &GaussianPosterior, samples: usize, seed: u64) -> f64 {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let (n, dz) = (posterior.mu.rows(), posterior.mu.cols());
    let mut total = 0.0;
    for _ in 0..samples {
        for i in 0..n {
            for k in 0..dz {
                let (m, lv) = (posterior.mu.get(i, k), posterior.log_var.get(i, k));
                let e: f64 = StandardNormal.sample(&mut rng);
                let z = m + (0.5 * lv).exp() * e;
                // log q − log p; the 2π terms cancel
                total += -0.5 * lv - 0.5 * e * e + 0.5 * z * z;
            }
        }
    }
    total / (samples * n.max(1)) as f64
}

/// Log-softmax of one row, used by tests to cross-check [`classify`].
pub fn log_softmax_row(logits: &[f64]) -> Vec<f64> {
    let lse = logsumexp(logits);
    logits.iter().map(|x| x - lse).collect()
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::autodiff::finite_diff_check;
    use proptest::prelude::*;
    use rand::Rng;

    fn rand_matrix(rng: &mut ChaCha8Rng, r: usize, c: usize) -> Tensor {
        Tensor::matrix(r, c, (0..r * c).map(|_| rng.gen_range(-1.0..1.0)).collect())
    }

    fn zero_params(d: usize, dz: usize, classes: usize) -> VibParams {
        VibParams {
            w_mu: Tensor::zeros(&[d, dz]),
            b_mu: Tensor::zeros(&[1, dz]),
            w_sigma: Tensor::zeros(&[d, dz]),
            b_sigma: Tensor::zeros(&[1, dz]),
            w_c: Tensor::zeros(&[dz, classes]),
            b_c: Tensor::zeros(&[1, classes]),
            beta: 1e-3,
        }
    }

    fn post(mu: Vec<f64>, lv: Vec<f64>, rows: usize) -> GaussianPosterior {
        let cols = mu.len() / rows;
        GaussianPosterior {
            mu: Tensor::matrix(rows, cols, mu),
            log_var: Tensor::matrix(rows, cols, lv),
            z: None,
            epsilon: None,
        }
    }

    #[test]
    fn encoder_examples() {
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        let t = rand_matrix(&mut rng, 3, 4);
        let p = encode_gaussian(&t, &zero_params(4, 4, 7)).unwrap();
        assert!(p.mu.data().iter().chain(p.log_var.data()).all(|x| *x == 0.0));
        let mut ident = zero_params(4, 4, 7);
        ident.w_mu = Tensor::identity(4);
        assert_eq!(encode_gaussian(&t, &ident).unwrap().mu, t);

        let mut params = zero_params(4, 3, 7);
        params.w_mu = rand_matrix(&mut rng, 4, 3);
        params.b_mu = rand_matrix(&mut rng, 1, 3);
        params.w_sigma = rand_matrix(&mut rng, 4, 3).map(|x| x * 30.0);
        params.b_sigma = rand_matrix(&mut rng, 1, 3);
        let p = encode_gaussian(&t, &params).unwrap();
        for i in 0..3 {
            for k in 0..3 {
                let mut m = params.b_mu.data()[k];
                let mut s = params.b_sigma.data()[k];
                for c in 0..4 {
                    m += t.get(i, c) * params.w_mu.get(c, k);
                    s += t.get(i, c) * params.w_sigma.get(c, k);
                }
                assert!((p.mu.get(i, k) - m).abs() < 1e-14);
                assert!((p.log_var.get(i, k) - s.clamp(-10.0, 10.0)).abs() < 1e-13);
            }
        }
    }

    #[test]
    fn reparameterize_examples() {
        let p = post(vec![0.3, -1.0], vec![-10.0, -10.0], 1);
        let r = reparameterize(&p, 7).unwrap();
        let (z, eps) = (r.z.unwrap(), r.epsilon.unwrap());
        for k in 0..2 {
            assert!((z.data()[k] - p.mu.data()[k]).abs() <= 0.007 * eps.data()[k].abs());
            // exact relation given the stored draw
            assert_eq!(z.data()[k], p.mu.data()[k] + (-5.0f64).exp() * eps.data()[k]);
        }
        let r = reparameterize_with(&p, Tensor::zeros(&[1, 2])).unwrap();
        assert_eq!(r.z.unwrap(), p.mu);
    }

    #[test]
    fn reparameterize_moments() {
        let n = 100_000;
        let p = post(vec![1.0; n], vec![4f64.ln(); n], n);
        let z = reparameterize(&p, 11).unwrap().z.unwrap();
        let mean = z.data().iter().sum::<f64>() / n as f64;
        let var = z.data().iter().map(|x| (x - mean).powi(2)).sum::<f64>() / (n - 1) as f64;
        assert!((mean - 1.0).abs() < 0.02, "{mean}");
        assert!((var - 4.0).abs() < 0.1, "{var}");
    }

    #[test]
    fn kl_examples() {
        assert_eq!(kl_to_standard_normal(&post(vec![0.0; 6], vec![0.0; 6], 2)), 0.0);
        assert_eq!(kl_to_standard_normal(&post(vec![1.0], vec![0.0], 1)), 0.5);
        let kl = kl_to_standard_normal(&post(vec![0.0], vec![4f64.ln()], 1));
        assert!((kl - 0.5 * (4.0 - 4f64.ln() - 1.0)).abs() < 1e-15);
        assert!((kl - 0.8069).abs() < 1e-4);
        // strictly positive away from the prior
        assert!(kl_to_standard_normal(&post(vec![0.0, 1e-3], vec![0.0, 0.0], 1)) > 0.0);
        assert!(kl_to_standard_normal(&post(vec![0.0], vec![1e-3], 1)) > 0.0);
    }

    #[test]
    fn kl_matches_monte_carlo() {
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let p = post(
            (0..4).map(|_| rng.gen_range(-1.5..1.5)).collect(),
            (0..4).map(|_| rng.gen_range(-1.5..1.5)).collect(),
            2,
        );
        let exact = kl_to_standard_normal(&p);
        let mc = monte_carlo_kl(&p, 100_000, 4);
        assert!((mc - exact).abs() <= 0.02 * exact, "{mc} vs {exact}");
    }

    #[test]
    fn profile_examples() {
        assert!(per_dim_kl_profile(&post(vec![0.0; 6], vec![0.0; 6], 3)).iter().all(|x| *x == 0.0));
        let p = post(vec![0.0, 1.0, 0.0, 3.0], vec![0.0, 0.0, 0.0, 0.0], 2);
        let prof = per_dim_kl_profile(&p);
        assert_eq!(prof[0], 0.0);
        assert_eq!(prof[1], (0.5 + 4.5) / 2.0);
        let total: f64 = prof.iter().sum();
        assert!((total - kl_to_standard_normal(&p)).abs() < 1e-15);
    }

    #[test]
    fn classify_examples() {
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        let z = rand_matrix(&mut rng, 3, 4);
        let probs = classify(&z, &zero_params(4, 4, 7)).unwrap();
        assert!(probs.data().iter().all(|p| (p - 1.0 / 7.0).abs() < 1e-15));

        let mut params = zero_params(1, 1, 2);
        params.w_c = Tensor::matrix(1, 2, vec![10.0, -10.0]);
        let probs = classify(&Tensor::matrix(1, 1, vec![1.0]), &params).unwrap();
        assert!((probs.data()[0] - 1.0).abs() < 1e-8 && probs.data()[1] < 1e-8);

        let mut params = zero_params(4, 4, 5);
        params.w_c = rand_matrix(&mut rng, 4, 5).map(|x| 3.0 * x);
        params.b_c = rand_matrix(&mut rng, 1, 5);
        let probs = classify(&z, &params).unwrap();
        for i in 0..3 {
            let logits: Vec<f64> = (0..5)
                .map(|c| params.b_c.data()[c] + (0..4).map(|k| z.get(i, k) * params.w_c.get(k, c)).sum::<f64>())
                .collect();
            for (c, lp) in log_softmax_row(&logits).into_iter().enumerate() {
                assert!((probs.get(i, c).ln() - lp).abs() < 1e-12);
            }
        }
    }

    #[test]
    fn task_loss_examples() {
        let perfect = Tensor::from_rows(&[vec![1.0, 0.0], vec![0.0, 1.0]]);
        assert!(task_loss(&perfect, &[0, 1], &[true, true]).unwrap() <= 1e-10);
        let uniform = Tensor::filled(&[3, 7], 1.0 / 7.0);
        assert!((task_loss(&uniform, &[0, 3, 6], &[true; 3]).unwrap() - 7f64.ln()).abs() < 1e-14);
        let hand = Tensor::from_rows(&[vec![0.9, 0.1], vec![0.2, 0.8]]);
        let loss = task_loss(&hand, &[0, 1], &[true, true]).unwrap();
        assert!((loss + 0.5 * (0.9f64.ln() + 0.8f64.ln())).abs() < 1e-15);
        assert!((loss - 0.1643).abs() < 1e-4);
        // masked-out rows are ignored
        assert_eq!(task_loss(&hand, &[0, 0], &[true, false]).unwrap(), -(0.9f64.ln()));
        assert!(matches!(task_loss(&hand, &[0, 1], &[false, false]), Err(VibError::NoSupervisedTokens)));
    }

    #[test]
    fn total_loss_examples() {
        assert_eq!(total_loss(1.25, 3.0, 0.0).unwrap(), 1.25);
        assert!((total_loss(0.5, 2.0, 0.1).unwrap() - 0.7).abs() < 1e-15);
        assert!(total_loss(0.5, 2.0, -0.1).is_err());
        assert_eq!(beta_at(1e-3, 0, 10), 0.0);
        assert_eq!(beta_at(1e-3, 5, 10), 5e-4);
        assert_eq!(beta_at(1e-3, 50, 10), 1e-3);
    }

    #[test]
    fn taped_losses_recompose_plain_ones() {
        let mut rng = ChaCha8Rng::seed_from_u64(6);
        let mut params = zero_params(4, 3, 5);
        params.w_mu = rand_matrix(&mut rng, 4, 3);
        params.w_sigma = rand_matrix(&mut rng, 4, 3);
        params.w_c = rand_matrix(&mut rng, 3, 5);
        let t = rand_matrix(&mut rng, 6, 4);
        let targets: Vec<usize> = (0..6).map(|i| i % 5).collect();
        let eps = standard_normal(6, 3, 9);

        let tape = Tape::new();
        let vars = params.on(&tape);
        let (mu, lv) = encode_gaussian_on(tape.constant(t.clone()), &vars).unwrap();
        let z = reparameterize_on(mu, lv, tape.constant(eps.clone())).unwrap();
        let probs = logits_on(z, &vars).unwrap().softmax_rows().unwrap();
        let one_hot = Tensor::matrix(6, 5, (0..30).map(|k| f64::from(u8::from(targets[k / 5] == k % 5))).collect());
        let ce = cross_entropy_sum_on(probs, tape.constant(one_hot)).unwrap().item() / 6.0;
        let kl = kl_sum_on(mu, lv).unwrap().item() / 6.0;

        let posterior = reparameterize_with(&encode_gaussian(&t, &params).unwrap(), eps).unwrap();
        let plain_probs = classify(posterior.z.as_ref().unwrap(), &params).unwrap();
        let plain_ce = task_loss(&plain_probs, &targets, &[true; 6]).unwrap();
        assert!((ce - plain_ce).abs() < 1e-14);
        assert!((kl - kl_to_standard_normal(&posterior)).abs() < 1e-14);
        let total = total_loss(plain_ce, kl_to_standard_normal(&posterior), 0.3).unwrap();
        assert!((total - (ce + 0.3 * kl)).abs() < 1e-14);
    }

    #[test]
    fn reparameterized_loss_gradient_matches_finite_differences() {
        let mut rng = ChaCha8Rng::seed_from_u64(8);
        let mu = rand_matrix(&mut rng, 3, 4);
        let lv = rand_matrix(&mut rng, 3, 4);
        let w_c = rand_matrix(&mut rng, 4, 5);
        let eps = standard_normal(3, 4, 1);
        let one_hot = Tensor::matrix(3, 5, (0..15).map(|k| f64::from(u8::from(k % 5 == (k / 5) * 2 % 5))).collect());
        let report = finite_diff_check(&[mu, lv], 1e-6, |tape, x| {
            let z = reparameterize_on(x[0], x[1], tape.constant(eps.clone()))?;
            let probs = z.matmul(tape.constant(w_c.clone()))?.softmax_rows()?;
            let ce = probs.clamp(PROB_FLOOR, 1.0).log().mul(tape.constant(one_hot.clone()))?.sum().scale(-1.0 / 3.0);
            let kl = x[0].mul(x[0])?.add(x[1].exp())?.sub(x[1])?.add_scalar(-1.0).sum().scale(0.5 / 3.0);
            ce.add(kl.scale(0.1))
        })
        .unwrap();
        assert!(report.max_rel_error < 1e-4, "{report:?}");
    }

    #[test]
    fn posterior_mean_decoding_is_bit_identical() {
        let mut rng = ChaCha8Rng::seed_from_u64(10);
        let mut params = zero_params(4, 4, 7);
        params.w_mu = rand_matrix(&mut rng, 4, 4);
        params.w_c = rand_matrix(&mut rng, 4, 7);
        let t = rand_matrix(&mut rng, 5, 4);
        let run = || {
            let p = reparameterize_with(&encode_gaussian(&t, &params).unwrap(), Tensor::zeros(&[5, 4])).unwrap();
            classify(p.z.as_ref().unwrap(), &params).unwrap()
        };
        let (a, b) = (run(), run());
        assert!(a.data().iter().zip(b.data()).all(|(x, y)| x.to_bits() == y.to_bits()));
    }

    proptest! {
        #![proptest_config(ProptestConfig::with_cases(1000))]
        #[test]
        fn kl_nonnegative(
            mu in proptest::collection::vec(-5.0f64..5.0, 6),
            lv in proptest::collection::vec(-10.0f64..10.0, 6),
        ) {
            prop_assert!(kl_to_standard_normal(&post(mu, lv, 2)) >= 0.0);
        }

        #[test]
        fn classifier_rows_sum_to_one(seed in 0u64..u64::MAX, scale in 0.1f64..20.0) {
            let mut rng = ChaCha8Rng::seed_from_u64(seed);
            let mut params = zero_params(4, 4, 7);
            params.w_c = rand_matrix(&mut rng, 4, 7).map(|x| x * scale);
            params.b_c = rand_matrix(&mut rng, 1, 7).map(|x| x * scale);
            let probs = classify(&rand_matrix(&mut rng, 3, 4), &params).unwrap();
            for i in 0..3 {
                prop_assert!((probs.row(i).iter().sum::<f64>() - 1.0).abs() <= 1e-12);
            }
        }
    }
}
