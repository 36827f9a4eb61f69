//! Gaussian posteriors, KL divergences, the IMQ-kernel MMD estimator and
//! σ diagnostics.

use rand::Rng as _;
use rand_distr::StandardNormal;
use serde::{Deserialize, Serialize};

use crate::autograd::{Tape, Tensor, Var};
use crate::seqmodel::SeqModel;
use crate::{Error, Result, Rng};

/// Diagonal Gaussian `N(mu, diag(sigma^2))`.
#[derive(Clone, Debug, PartialEq)]
pub struct GaussianPosterior {
    mu: Vec<f64>,
    sigma: Vec<f64>,
}

impl GaussianPosterior {
    pub fn new(mu: Vec<f64>, sigma: Vec<f64>) -> Result<Self> {
        if mu.len() != sigma.len() {
            return Err(Error::arg(format!(
                "posterior: mu has {} dims, sigma has {}",
                mu.len(),
                sigma.len()
            )));
        }
        if let Some(s) = sigma.iter().find(|s| !(s.is_finite() && **s > 0.0)) {
            return Err(Error::arg(format!("posterior: sigma must be positive, got {s}")));
        }
        if mu.iter().any(|m| !m.is_finite()) {
            return Err(Error::arg("posterior: mu must be finite"));
        }
        Ok(Self { mu, sigma })
    }

    pub fn from_log_sigma(mu: Vec<f64>, log_sigma: &[f64]) -> Result<Self> {
        Self::new(mu, log_sigma.iter().map(|l| l.exp()).collect())
    }

    pub fn standard(dim: usize) -> Self {
        Self {
            mu: vec![0.0; dim],
            sigma: vec![1.0; dim],
        }
    }

    pub fn mu(&self) -> &[f64] {
        &self.mu
    }

    pub fn sigma(&self) -> &[f64] {
        &self.sigma
    }

    pub fn dim(&self) -> usize {
        self.mu.len()
    }
}

/// Inverse multiquadratic kernel constant.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct KernelConfig {
    pub c: f64,
}

impl KernelConfig {
    pub fn new(c: f64) -> Result<Self> {
        if !(c > 0.0 && c.is_finite()) {
            return Err(Error::arg(format!("kernel constant must be positive, got {c}")));
        }
        Ok(Self { c })
    }

    /// `C = 2Z`, the mean squared distance between two N(0, I_Z) draws.
    pub fn for_latent_dim(z: usize) -> Self {
        Self { c: 2.0 * z as f64 }
    }
}

/// Mean and σ heads applied to one encoder state.
pub fn posterior_from_hidden(model: &SeqModel, h: &[f64]) -> Result<GaussianPosterior> {
    if !model.stochastic {
        return Err(Error::arg("posterior: model has a deterministic encoder"));
    }
    if h.len() != model.dims.hidden {
        return Err(Error::arg(format!(
            "posterior: hidden state has {} dims, expected {}",
            h.len(),
            model.dims.hidden
        )));
    }
    let mut tape = Tape::new();
    let b = model.bind(&mut tape, false);
    let hv = tape.constant(Tensor::new(vec![1, h.len()], h.to_vec())?);
    let (mu, ls) = model.heads(&mut tape, &b, hv)?;
    let ls = ls.expect("stochastic model has a log-sigma head");
    GaussianPosterior::from_log_sigma(tape.value(mu).to_vec(), tape.value(ls))
}

/// Encodes each sentence to its posterior.
pub fn encode_posteriors(model: &SeqModel, sentences: &[&[usize]]) -> Result<Vec<GaussianPosterior>> {
    let mut out = Vec::with_capacity(sentences.len());
    for chunk in sentences.chunks(256) {
        let mut tape = Tape::new();
        let b = model.bind(&mut tape, false);
        let h = model.encode_batch(&mut tape, &b, chunk)?;
        let (mu, ls) = model.heads(&mut tape, &b, h)?;
        let ls = ls.ok_or_else(|| Error::arg("posterior: model has a deterministic encoder"))?;
        let z = model.dims.latent;
        let (mv, lv) = (tape.value(mu), tape.value(ls));
        for i in 0..chunk.len() {
            out.push(GaussianPosterior::from_log_sigma(
                mv[i * z..(i + 1) * z].to_vec(),
                &lv[i * z..(i + 1) * z],
            )?);
        }
    }
    Ok(out)
}

pub fn standard_normal_vec(dim: usize, rng: &mut Rng) -> Vec<f64> {
    (0..dim).map(|_| rng.sample(StandardNormal)).collect()
}

/// `z = mu + sigma ⊙ ε`, `ε ~ N(0, I)`.
pub fn reparameterize(post: &GaussianPosterior, rng: &mut Rng) -> Vec<f64> {
    post.mu
        .iter()
        .zip(&post.sigma)
        .map(|(m, s)| {
            let e: f64 = rng.sample(StandardNormal);
            m + s * e
        })
        .collect()
}

/// Differentiable reparameterization on the tape; `ε` enters as a constant.
pub fn reparameterize_tape(tape: &mut Tape, mu: Var, log_sigma: Var, rng: &mut Rng) -> Result<Var> {
    let shape = tape.shape(mu).to_vec();
    let n = tape.tensor(mu).numel();
    let eps = tape.constant(Tensor {
        shape,
        values: (0..n).map(|_| rng.sample(StandardNormal)).collect(),
        grad: None,
    });
    let sigma = tape.exp(log_sigma);
    let noise = tape.mul(sigma, eps)?;
    Ok(tape.add(mu, noise)?)
}

/// `KL(N(mu1, s1^2) || N(mu2, s2^2))` in nats.
pub fn kl_gaussians_univariate(mu1: f64, s1: f64, mu2: f64, s2: f64) -> Result<f64> {
    if !(s1 > 0.0 && s2 > 0.0) {
        return Err(Error::arg(format!(
            "KL: standard deviations must be positive, got {s1} and {s2}"
        )));
    }
    let d = mu1 - mu2;
    Ok((s2 / s1).ln() + (s1 * s1 + d * d) / (2.0 * s2 * s2) - 0.5)
}

/// `KL(q || N(0, I))`, summed over dimensions.
pub fn kl_to_standard_normal(post: &GaussianPosterior) -> f64 {
    post.mu
        .iter()
        .zip(&post.sigma)
        .map(|(&m, &s)| -s.ln() + 0.5 * (s * s + m * m) - 0.5)
        .sum()
}

/// `KL(N(mu, diag sigma^2) || N(mu, I))`; independent of `mu`.
pub fn aux_kl_identity_cov(post: &GaussianPosterior) -> f64 {
    post.sigma.iter().map(|&s| -s.ln() + 0.5 * s * s - 0.5).sum()
}

/// Batch sum of `KL(q || N(0, I))` given `mu` and `log σ` on the tape.
pub fn kl_standard_normal_tape(tape: &mut Tape, mu: Var, log_sigma: Var) -> Result<Var> {
    let two_ls = tape.scale(log_sigma, 2.0);
    let var = tape.exp(two_ls);
    let mu2 = tape.mul(mu, mu)?;
    let t = tape.add(var, mu2)?;
    let t = tape.scale(t, 0.5);
    let t = tape.sub(t, log_sigma)?;
    let t = tape.add_scalar(t, -0.5);
    Ok(tape.sum(t))
}

/// Batch sum of the identity-covariance KL given `log σ` on the tape.
pub fn aux_kl_tape(tape: &mut Tape, log_sigma: Var) -> Result<Var> {
    let two_ls = tape.scale(log_sigma, 2.0);
    let var = tape.exp(two_ls);
    let t = tape.scale(var, 0.5);
    let t = tape.sub(t, log_sigma)?;
    let t = tape.add_scalar(t, -0.5);
    Ok(tape.sum(t))
}

/// `C / (C + ||x - y||^2)`.
pub fn imq_kernel(x: &[f64], y: &[f64], cfg: KernelConfig) -> Result<f64> {
    if x.len() != y.len() {
        return Err(Error::arg(format!(
            "kernel: dimension mismatch {} vs {}",
            x.len(),
            y.len()
        )));
    }
    let d2: f64 = x.iter().zip(y).map(|(a, b)| (a - b) * (a - b)).sum();
    Ok(cfg.c / (cfg.c + d2))
}

/// Kernel matrix `C / (C + D)` from pairwise squared distances.
fn imq_tape(tape: &mut Tape, d2: Var, c: f64) -> Var {
    let denom = tape.add_scalar(d2, c);
    let inv = tape.recip(denom);
    tape.scale(inv, c)
}

/// Empirical MMD between posterior samples `z_post[N,Z]` and prior samples
/// `z_prior[N,Z]`:
///
/// `Σ_{n≠m} k(z_n, z_m) / N(N−1) + Σ_{n≠m} k(z̃_n, z̃_m) / N(N−1)
///  − cross_factor · Σ_{n,m} k(z_n, z̃_m) / N²`
///
/// `cross_factor = 2` gives the unbiased MMD² estimator.
pub fn mmd_tape(
    tape: &mut Tape,
    z_post: Var,
    z_prior: Var,
    cfg: KernelConfig,
    cross_factor: f64,
) -> Result<Var> {
    let (sp, sq) = (tape.shape(z_post).to_vec(), tape.shape(z_prior).to_vec());
    if sp.len() != 2 || sp != sq {
        return Err(Error::arg(format!(
            "mmd: sample batches must share shape [N, Z], got {sp:?} and {sq:?}"
        )));
    }
    let n = sp[0];
    if n < 2 {
        return Err(Error::arg(format!("mmd: need at least 2 samples, got {n}")));
    }
    let nf = n as f64;
    let within = |tape: &mut Tape, z: Var| -> Result<Var> {
        let d2 = tape.sq_dist(z, z)?;
        let k = imq_tape(tape, d2, cfg.c);
        let s = tape.sum(k);
        // the diagonal is exactly k(x, x) = 1
        let off = tape.add_scalar(s, -nf);
        Ok(tape.scale(off, 1.0 / (nf * (nf - 1.0))))
    };
    let pp = within(tape, z_post)?;
    let qq = within(tape, z_prior)?;
    let d2 = tape.sq_dist(z_post, z_prior)?;
    let k = imq_tape(tape, d2, cfg.c);
    let s = tape.sum(k);
    let pq = tape.scale(s, cross_factor / (nf * nf));
    let t = tape.add(pp, qq)?;
    Ok(tape.sub(t, pq)?)
}

fn stack(rows: &[Vec<f64>]) -> Result<Tensor> {
    let z = rows.first().map(Vec::len).unwrap_or(0);
    if rows.iter().any(|r| r.len() != z) {
        return Err(Error::arg("mmd: ragged sample batch"));
    }
    Ok(Tensor::new(vec![rows.len(), z], rows.iter().flatten().copied().collect())?)
}

pub fn mmd_estimate(
    z_post: &[Vec<f64>],
    z_prior: &[Vec<f64>],
    cfg: KernelConfig,
    cross_factor: f64,
) -> Result<f64> {
    let mut tape = Tape::new();
    let p = tape.constant(stack(z_post)?);
    let q = tape.constant(stack(z_prior)?);
    let m = mmd_tape(&mut tape, p, q, cfg, cross_factor)?;
    Ok(tape.scalar_value(m))
}

pub const SIGMA_BUCKETS: usize = 200;

/// Counts of σ components in 200 equal buckets over (0, 1), plus an
/// overflow bucket for σ ≥ 1.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct SigmaHistogram {
    pub counts: Vec<u64>,
    pub overflow: u64,
}

impl SigmaHistogram {
    pub fn total(&self) -> u64 {
        self.counts.iter().sum::<u64>() + self.overflow
    }

    pub fn midpoint(bucket: usize) -> f64 {
        (bucket as f64 + 0.5) / SIGMA_BUCKETS as f64
    }

    /// `midpoint<TAB>count` per bucket; the overflow row is labelled `>=1`.
    pub fn to_text(&self) -> String {
        let mut s = String::from("# sigma\tcount\n");
        for (i, c) in self.counts.iter().enumerate() {
            s.push_str(&format!("{:.4}\t{c}\n", Self::midpoint(i)));
        }
        s.push_str(&format!(">=1\t{}\n", self.overflow));
        s
    }

    pub fn from_text(text: &str) -> Result<Self> {
        let mut counts = Vec::with_capacity(SIGMA_BUCKETS);
        let mut overflow = None;
        for line in text.lines().filter(|l| !l.starts_with('#') && !l.trim().is_empty()) {
            let (label, count) = line
                .split_once('\t')
                .ok_or_else(|| Error::arg(format!("histogram: bad line {line:?}")))?;
            let count: u64 = count
                .trim()
                .parse()
                .map_err(|_| Error::arg(format!("histogram: bad count in {line:?}")))?;
            if label == ">=1" {
                overflow = Some(count);
            } else {
                counts.push(count);
            }
        }
        if counts.len() != SIGMA_BUCKETS {
            return Err(Error::arg(format!(
                "histogram: expected {SIGMA_BUCKETS} buckets, got {}",
                counts.len()
            )));
        }
        Ok(Self {
            counts,
            overflow: overflow.ok_or_else(|| Error::arg("histogram: missing overflow row"))?,
        })
    }
}

pub fn sigma_histogram(posteriors: &[GaussianPosterior]) -> Result<SigmaHistogram> {
    if posteriors.is_empty() {
        return Err(Error::arg("sigma histogram: no posteriors"));
    }
    let mut h = SigmaHistogram {
        counts: vec![0; SIGMA_BUCKETS],
        overflow: 0,
    };
    for &s in posteriors.iter().flat_map(|p| p.sigma.iter()) {
        if s >= 1.0 {
            h.overflow += 1;
        } else {
            let b = ((s * SIGMA_BUCKETS as f64) as usize).min(SIGMA_BUCKETS - 1);
            h.counts[b] += 1;
        }
    }
    Ok(h)
}

/// Fraction of σ components below `threshold` and the median σ.
pub fn sigma_summary(posteriors: &[GaussianPosterior], threshold: f64) -> (f64, f64) {
    let mut all: Vec<f64> = posteriors.iter().flat_map(|p| p.sigma.iter().copied()).collect();
    if all.is_empty() {
        return (0.0, f64::NAN);
    }
    let below = all.iter().filter(|&&s| s < threshold).count() as f64 / all.len() as f64;
    all.sort_by(f64::total_cmp);
    let n = all.len();
    let median = if n % 2 == 1 {
        all[n / 2]
    } else {
        0.5 * (all[n / 2 - 1] + all[n / 2])
    };
    (below, median)
}

/// Settings for [`collapse_harness`].
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct CollapseSetup {
    /// Curvature of `J(z) = k/2 (z − z*)^2`.
    pub curvature: f64,
    pub sigma0: f64,
    pub lr: f64,
    pub steps: usize,
    pub lambda_kl: f64,
}

/// SGD on a one-dimensional Gaussian encoder `(mu, σ)` whose only loss is
/// `J(z) = k/2 (z − z*)^2` at a reparameterized sample `z = mu + σ ε`,
/// plus `λ_KL` times the identity-covariance KL (gradient `σ − 1/σ`).
/// `mu` starts at the optimum `z* = 0`. Returns σ after every step.
///
/// With `λ_KL = 0` the expected σ-gradient is `k σ`, so
/// `E[σ_t] = σ_0 (1 − lr k)^t`.
pub fn collapse_harness(setup: CollapseSetup, rng: &mut Rng) -> Result<Vec<f64>> {
    let CollapseSetup {
        curvature: k,
        sigma0,
        lr,
        steps,
        lambda_kl,
    } = setup;
    if !(k >= 0.0 && sigma0 > 0.0 && lr > 0.0 && lambda_kl >= 0.0) {
        return Err(Error::arg(format!(
            "collapse harness: need k >= 0, sigma0 > 0, lr > 0, lambda_kl >= 0 \
             (got k={k}, sigma0={sigma0}, lr={lr}, lambda_kl={lambda_kl})"
        )));
    }
    if lr * k >= 1.0 {
        return Err(Error::arg(format!(
            "collapse harness: unstable step size, need lr*k < 1 (lr*k = {})",
            lr * k
        )));
    }
    let (mut mu, mut sigma) = (0.0f64, sigma0);
    let mut out = Vec::with_capacity(steps);
    for _ in 0..steps {
        let eps: f64 = rng.sample(StandardNormal);
        let grad_z = k * (mu + sigma * eps);
        let mut grad_sigma = grad_z * eps;
        if lambda_kl > 0.0 {
            grad_sigma += lambda_kl * (sigma - 1.0 / sigma);
        }
        mu -= lr * grad_z;
        // σ and −σ describe the same Gaussian and the update is odd in σ,
        // so reflecting keeps the dynamics while reporting a scale
        sigma = (sigma - lr * grad_sigma).abs();
        out.push(sigma);
    }
    Ok(out)
}

/// Per-step trajectory mean over `seeds` independent runs.
pub fn mean_collapse_trajectory(setup: CollapseSetup, seeds: &[u64]) -> Result<Vec<f64>> {
    let mut mean = vec![0.0; setup.steps];
    for &s in seeds {
        let traj = collapse_harness(setup, &mut crate::seeded_rng(s))?;
        mean.iter_mut().zip(&traj).for_each(|(m, t)| *m += t);
    }
    let n = seeds.len().max(1) as f64;
    mean.iter_mut().for_each(|m| *m /= n);
    Ok(mean)
}

/// Least-squares slope of `ln traj[t]` against `t` over the first `window`
/// steps, i.e. the log of the per-step decay factor. `sigma0` is the value
/// at step 0.
pub fn fit_log_decay(sigma0: f64, traj: &[f64], window: usize) -> f64 {
    let pts: Vec<(f64, f64)> = std::iter::once((0.0, sigma0.ln()))
        .chain(traj.iter().take(window).enumerate().map(|(i, s)| ((i + 1) as f64, s.ln())))
        .collect();
    let n = pts.len() as f64;
    let mx = pts.iter().map(|p| p.0).sum::<f64>() / n;
    let my = pts.iter().map(|p| p.1).sum::<f64>() / n;
    let sxy: f64 = pts.iter().map(|p| (p.0 - mx) * (p.1 - my)).sum();
    let sxx: f64 = pts.iter().map(|p| (p.0 - mx) * (p.0 - mx)).sum();
    sxy / sxx
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::autograd::finite_difference_check;
    use crate::seqmodel::ModelDims;
    use crate::seeded_rng;

    #[test]
    fn posterior_invariants() {
        assert!(GaussianPosterior::new(vec![0.0], vec![0.0]).is_err());
        assert!(GaussianPosterior::new(vec![0.0], vec![-1.0]).is_err());
        assert!(GaussianPosterior::new(vec![f64::NAN], vec![1.0]).is_err());
        assert!(GaussianPosterior::new(vec![0.0, 1.0], vec![1.0]).is_err());
        let p = GaussianPosterior::from_log_sigma(vec![0.5], &[0.0]).unwrap();
        assert_eq!(p.sigma(), &[1.0]);
    }

    #[test]
    fn zero_heads_give_standard_posterior() {
        let dims = ModelDims {
            vocab: 8,
            embed: 3,
            hidden: 4,
            latent: 2,
        };
        let mut m = SeqModel::new(dims, true, &mut seeded_rng(1));
        for name in ["head.mu.weight", "head.log_sigma.weight"] {
            let i = m.params.index(name).unwrap();
            m.params.values[i].iter_mut().for_each(|v| *v = 0.0);
        }
        let p = posterior_from_hidden(&m, &[0.3, -0.2, 0.9, 0.1]).unwrap();
        assert_eq!(p, GaussianPosterior::standard(2));
        assert!(posterior_from_hidden(&m, &[0.0; 3]).is_err());
        let det = SeqModel::new(dims, false, &mut seeded_rng(1));
        assert!(posterior_from_hidden(&det, &[0.0; 4]).is_err());
    }

    #[test]
    fn reparameterization_moments() {
        let tiny = GaussianPosterior::new(vec![1.5, -2.0], vec![1e-12, 1e-12]).unwrap();
        let z = reparameterize(&tiny, &mut seeded_rng(2));
        assert!((z[0] - 1.5).abs() < 1e-9 && (z[1] + 2.0).abs() < 1e-9);
        let unit = GaussianPosterior::new(vec![0.7], vec![1.0]).unwrap();
        let mut rng = seeded_rng(3);
        let xs: Vec<f64> = (0..10_000).map(|_| reparameterize(&unit, &mut rng)[0]).collect();
        let mean = xs.iter().sum::<f64>() / xs.len() as f64;
        let var = xs.iter().map(|x| (x - mean).powi(2)).sum::<f64>() / (xs.len() - 1) as f64;
        assert!((mean - 0.7).abs() < 0.05);
        assert!((var - 1.0).abs() < 0.06);
    }

    #[test]
    fn reparameterization_gradient_skips_noise() {
        let mut tape = Tape::new();
        let mu = tape.param(Tensor::new(vec![1, 2], vec![0.1, 0.2]).unwrap());
        let ls = tape.param(Tensor::new(vec![1, 2], vec![0.0, 0.5]).unwrap());
        let mut rng = seeded_rng(4);
        let z = reparameterize_tape(&mut tape, mu, ls, &mut rng).unwrap();
        let s = tape.sum(z);
        tape.backward(s).unwrap();
        assert_eq!(tape.grad(mu).unwrap(), &[1.0, 1.0]);
        let mut again = seeded_rng(4);
        let e: Vec<f64> = (0..2).map(|_| again.sample(StandardNormal)).collect();
        let g = tape.grad(ls).unwrap();
        assert!((g[0] - e[0]).abs() < 1e-15);
        assert!((g[1] - e[1] * 0.5f64.exp()).abs() < 1e-14);
    }

    #[test]
    fn kl_hand_cases() {
        assert_eq!(kl_gaussians_univariate(0.0, 1.0, 0.0, 1.0).unwrap(), 0.0);
        assert!((kl_gaussians_univariate(0.0, 1.0, 1.0, 1.0).unwrap() - 0.5).abs() < 1e-15);
        let want = 2f64.ln() + 0.125 - 0.5;
        assert!((kl_gaussians_univariate(0.0, 0.5, 0.0, 1.0).unwrap() - want).abs() < 1e-15);
        assert!(kl_gaussians_univariate(0.0, 0.0, 0.0, 1.0).is_err());
        assert!(kl_gaussians_univariate(0.0, 1.0, 0.0, -1.0).is_err());

        assert_eq!(kl_to_standard_normal(&GaussianPosterior::standard(3)), 0.0);
        let p = GaussianPosterior::new(vec![1.0, 0.0], vec![1.0, 1.0]).unwrap();
        assert!((kl_to_standard_normal(&p) - 0.5).abs() < 1e-15);
        let q = GaussianPosterior::new(vec![0.3, -1.1], vec![0.4, 2.2]).unwrap();
        let parts: f64 = (0..2)
            .map(|i| kl_gaussians_univariate(q.mu()[i], q.sigma()[i], 0.0, 1.0).unwrap())
            .sum();
        assert!((kl_to_standard_normal(&q) - parts).abs() < 1e-14);
    }

    #[test]
    fn aux_kl_cases() {
        let ones = GaussianPosterior::new(vec![3.0, -2.0], vec![1.0, 1.0]).unwrap();
        assert_eq!(aux_kl_identity_cov(&ones), 0.0);
        let half = GaussianPosterior::new(vec![0.0], vec![0.5]).unwrap();
        assert!((aux_kl_identity_cov(&half) - (2f64.ln() - 0.375)).abs() < 1e-15);
        let moved = GaussianPosterior::new(vec![42.0], vec![0.5]).unwrap();
        assert_eq!(
            aux_kl_identity_cov(&half).to_bits(),
            aux_kl_identity_cov(&moved).to_bits()
        );
        for d in [0.01, 0.1] {
            let up = aux_kl_identity_cov(&GaussianPosterior::new(vec![0.0], vec![f64::exp(d)]).unwrap());
            let dn = aux_kl_identity_cov(&GaussianPosterior::new(vec![0.0], vec![f64::exp(-d)]).unwrap());
            assert!(up > 0.0 && dn > 0.0);
            // f(±δ) = δ² ± (4/3)δ³ + O(δ⁴)
            assert!((up - dn).abs() < 2.0 * d * d * d);
            assert!((0.5 * (up + dn) / (d * d) - 1.0).abs() < d);
        }
    }

    #[test]
    fn tape_kls_match_closed_forms() {
        let mu = vec![0.3, -1.0, 0.2, 0.9];
        let ls = vec![-0.5, 0.1, 0.7, -1.2];
        let mut tape = Tape::new();
        let m = tape.constant(Tensor::new(vec![2, 2], mu.clone()).unwrap());
        let l = tape.constant(Tensor::new(vec![2, 2], ls.clone()).unwrap());
        let kl = kl_standard_normal_tape(&mut tape, m, l).unwrap();
        let aux = aux_kl_tape(&mut tape, l).unwrap();
        let posts: Vec<GaussianPosterior> = (0..2)
            .map(|i| GaussianPosterior::from_log_sigma(mu[2 * i..2 * i + 2].to_vec(), &ls[2 * i..2 * i + 2]).unwrap())
            .collect();
        let want_kl: f64 = posts.iter().map(kl_to_standard_normal).sum();
        let want_aux: f64 = posts.iter().map(aux_kl_identity_cov).sum();
        assert!((tape.scalar_value(kl) - want_kl).abs() < 1e-12);
        assert!((tape.scalar_value(aux) - want_aux).abs() < 1e-12);
    }

    #[test]
    fn imq_kernel_cases() {
        let cfg = KernelConfig::new(3.0).unwrap();
        assert_eq!(imq_kernel(&[1.0, 2.0], &[1.0, 2.0], cfg).unwrap(), 1.0);
        let x = [0.0, 0.0];
        let y = [3f64.sqrt(), 0.0];
        assert!((imq_kernel(&x, &y, cfg).unwrap() - 0.5).abs() < 1e-15);
        let a = [0.3, -1.7];
        let b = [2.2, 0.4];
        assert_eq!(imq_kernel(&a, &b, cfg).unwrap(), imq_kernel(&b, &a, cfg).unwrap());
        assert!(imq_kernel(&a, &[1.0], cfg).is_err());
        assert!(KernelConfig::new(0.0).is_err());
        assert_eq!(KernelConfig::for_latent_dim(16).c, 32.0);
    }

    fn direct_mmd(p: &[Vec<f64>], q: &[Vec<f64>], cfg: KernelConfig, cross: f64) -> f64 {
        let n = p.len() as f64;
        let k = |a: &[f64], b: &[f64]| imq_kernel(a, b, cfg).unwrap();
        let mut pp = 0.0;
        let mut qq = 0.0;
        let mut pq = 0.0;
        for i in 0..p.len() {
            for j in 0..p.len() {
                if i != j {
                    pp += k(&p[i], &p[j]);
                    qq += k(&q[i], &q[j]);
                }
                pq += k(&p[i], &q[j]);
            }
        }
        pp / (n * (n - 1.0)) + qq / (n * (n - 1.0)) - cross * pq / (n * n)
    }

    #[test]
    fn mmd_matches_direct_sum_and_is_symmetric() {
        let mut rng = seeded_rng(5);
        let p: Vec<Vec<f64>> = (0..6).map(|_| standard_normal_vec(3, &mut rng)).collect();
        let q: Vec<Vec<f64>> = (0..6).map(|_| standard_normal_vec(3, &mut rng)).collect();
        let cfg = KernelConfig::for_latent_dim(3);
        for cross in [1.0, 2.0] {
            let m = mmd_estimate(&p, &q, cfg, cross).unwrap();
            assert!((m - direct_mmd(&p, &q, cfg, cross)).abs() < 1e-13);
            assert!((m - mmd_estimate(&q, &p, cfg, cross).unwrap()).abs() < 1e-15);
        }
        assert!(mmd_estimate(&p[..1], &q[..1], cfg, 2.0).is_err());
        assert!(mmd_estimate(&p, &q[..5], cfg, 2.0).is_err());
    }

    #[test]
    fn mmd_gradient() {
        let mut rng = seeded_rng(6);
        let q: Vec<f64> = (0..5).flat_map(|_| standard_normal_vec(2, &mut rng)).collect();
        let p0: Vec<f64> = (0..5).flat_map(|_| standard_normal_vec(2, &mut rng)).collect();
        let cfg = KernelConfig::for_latent_dim(2);
        let f = |x: &[f64]| {
            let mut tape = Tape::new();
            let p = tape.param(Tensor::new(vec![5, 2], x.to_vec()).unwrap());
            let qv = tape.constant(Tensor::new(vec![5, 2], q.clone()).unwrap());
            let m = mmd_tape(&mut tape, p, qv, cfg, 2.0).unwrap();
            tape.backward(m).unwrap();
            (tape.scalar_value(m), tape.grad(p).unwrap().to_vec())
        };
        assert!(finite_difference_check(f, &p0, 1e-5) < 1e-4);
    }

    #[test]
    fn histogram_cases() {
        let halves = vec![GaussianPosterior::new(vec![0.0; 3], vec![0.5; 3]).unwrap(); 4];
        let h = sigma_histogram(&halves).unwrap();
        assert_eq!(h.counts[100], 12);
        assert_eq!(h.total(), 12);
        assert_eq!(h.counts.iter().filter(|&&c| c > 0).count(), 1);
        let ones = vec![GaussianPosterior::standard(2); 5];
        let h1 = sigma_histogram(&ones).unwrap();
        assert_eq!((h1.overflow, h1.total()), (10, 10));
        assert_eq!(SigmaHistogram::from_text(&h.to_text()).unwrap(), h);
        assert!(sigma_histogram(&[]).is_err());
        let text = h.to_text();
        assert_eq!(text.lines().count(), 1 + SIGMA_BUCKETS + 1);
        assert!(text.lines().nth(1).unwrap().starts_with("0.0025\t"));
    }

    #[test]
    fn summary_fraction_and_median() {
        let p = GaussianPosterior::new(vec![0.0; 4], vec![0.05, 0.2, 0.6, 1.4]).unwrap();
        let (below, median) = sigma_summary(&[p], 0.1);
        assert_eq!(below, 0.25);
        assert!((median - 0.4).abs() < 1e-15);
    }

    #[test]
    fn harness_rejects_unstable_steps() {
        let setup = CollapseSetup {
            curvature: 30.0,
            sigma0: 0.5,
            lr: 0.05,
            steps: 10,
            lambda_kl: 0.0,
        };
        let e = collapse_harness(setup, &mut seeded_rng(0)).unwrap_err().to_string();
        assert!(e.contains("lr*k < 1"), "{e}");
    }

    #[test]
    fn harness_flat_loss_goes_to_one() {
        let setup = CollapseSetup {
            curvature: 0.0,
            sigma0: 0.5,
            lr: 0.05,
            steps: 2000,
            lambda_kl: 1.0,
        };
        let traj = collapse_harness(setup, &mut seeded_rng(0)).unwrap();
        assert!((traj.last().unwrap() - 1.0).abs() < 0.05);
    }
}
