//! The fine-grained objective: reconstruction likelihood, closed-form KL
//! terms, per-representation KL weights and capacity-controlled assembly.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::model::GaussianPosterior;
use crate::numerics::{Tape, Var};

/// Guards `log` at exactly-zero probabilities; `c * log(c + TINY)` is 0 at `c = 0`.
const TINY: f64 = 1e-300;
/// Keeps Bernoulli log terms finite when a logistic output saturates.
const BERNOULLI_EPS: f64 = 1e-12;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize, Default)]
#[serde(rename_all = "snake_case")]
pub enum Likelihood {
    /// Unit-variance Gaussian, i.e. halved squared error.
    #[default]
    Gaussian,
    Bernoulli,
}

impl std::str::FromStr for Likelihood {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "gaussian" => Ok(Self::Gaussian),
            "bernoulli" => Ok(Self::Bernoulli),
            other => Err(Error::config(format!("unknown likelihood {other:?}"))),
        }
    }
}

impl std::fmt::Display for Likelihood {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(match self {
            Self::Gaussian => "gaussian",
            Self::Bernoulli => "bernoulli",
        })
    }
}

fn rows(tape: &Tape, v: Var) -> f64 {
    tape.shape(v).first().copied().unwrap_or(1).max(1) as f64
}

/// `-(1/N) sum_i 0.5 ||x_i - xhat_i||^2`.
pub fn recon_loglik(tape: &mut Tape, x: Var, xhat: Var) -> Result<Var> {
    recon_loglik_with(tape, x, xhat, Likelihood::Gaussian)
}

pub fn recon_loglik_with(tape: &mut Tape, x: Var, xhat: Var, kind: Likelihood) -> Result<Var> {
    if tape.shape(x) != tape.shape(xhat) {
        return Err(Error::dim("recon_loglik", tape.shape(x), tape.shape(xhat)));
    }
    let n = rows(tape, x);
    match kind {
        Likelihood::Gaussian => {
            let diff = tape.sub(x, xhat)?;
            let sq = tape.square(diff);
            let total = tape.sum(sq);
            Ok(tape.scale(total, -0.5 / n))
        }
        Likelihood::Bernoulli => {
            let p = tape.add_scalar(xhat, BERNOULLI_EPS);
            let log_p = tape.log(p)?;
            let neg = tape.neg(xhat);
            let q = tape.add_scalar(neg, 1.0 + BERNOULLI_EPS);
            let log_q = tape.log(q)?;
            let negx = tape.neg(x);
            let one_minus_x = tape.add_scalar(negx, 1.0);
            let a = tape.mul(x, log_p)?;
            let b = tape.mul(one_minus_x, log_q)?;
            let both = tape.add(a, b)?;
            let total = tape.sum(both);
            Ok(tape.scale(total, 1.0 / n))
        }
    }
}

/// KL of the factorized posterior from `N(0, sigma0^2 I)`, averaged over rows.
pub fn kl_gaussian(tape: &mut Tape, post: &GaussianPosterior) -> Result<Var> {
    let s0 = post.sigma0;
    let n = rows(tape, post.mu);
    // log(sigma0 / sigma) = -log(sigma / sigma0)
    let ratio = tape.scale(post.sigma, 1.0 / s0);
    let log_ratio = tape.log(ratio)?;
    let s2 = tape.square(post.sigma);
    let m2 = tape.square(post.mu);
    let moments = tape.add(s2, m2)?;
    let quad = tape.scale(moments, 0.5 / (s0 * s0));
    let per = tape.sub(quad, log_ratio)?;
    let per = tape.add_scalar(per, -0.5);
    let total = tape.sum(per);
    Ok(tape.scale(total, 1.0 / n))
}

/// Categorical KL of the aspect probabilities from uniform.
pub fn kl_aspect(tape: &mut Tape, c: Var) -> Result<Var> {
    let m = tape.value(c).len();
    if m == 0 {
        return Err(Error::Contract("kl_aspect needs a non-empty simplex".into()));
    }
    let shifted = tape.add_scalar(c, TINY);
    let log_c = tape.log(shifted)?;
    let ent = tape.mul(c, log_c)?;
    let total = tape.sum(ent);
    Ok(tape.add_scalar(total, (m as f64).ln()))
}

/// Plain-value KL weights: `beta * |r_k| / max_j |r_j|`.
pub fn beta_weights(recon: &[f64], beta: f64) -> Vec<f64> {
    let max = recon.iter().map(|r| r.abs()).fold(0.0, f64::max);
    if max == 0.0 {
        return vec![beta; recon.len()];
    }
    recon.iter().map(|r| beta * r.abs() / max).collect()
}

/// Tape version of [`beta_weights`]; differentiable through the ratio.
pub fn beta_k(tape: &mut Tape, recon: &[Var], beta: f64) -> Result<Vec<Var>> {
    if recon.is_empty() {
        return Err(Error::Contract("beta_k needs at least one representation".into()));
    }
    let mags: Vec<Var> = recon.iter().map(|&r| tape.abs(r)).collect();
    let (arg, max) =
        mags.iter()
            .enumerate()
            .map(|(i, &m)| (i, tape.item(m)))
            .fold(
                (0, f64::NEG_INFINITY),
                |best, cur| if cur.1 > best.1 { cur } else { best },
            );
    if max == 0.0 {
        return Ok(recon.iter().map(|_| tape.scalar(beta)).collect());
    }
    let denom = mags[arg];
    mags.iter()
        .map(|&m| {
            let ratio = tape.div(m, denom)?;
            Ok(tape.scale(ratio, beta))
        })
        .collect()
}

/// Linear ramp from `u_start` to `u_max` over `ramp_epochs`.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct CapacitySchedule {
    pub u_start: f64,
    pub u_max: f64,
    pub ramp_epochs: usize,
}

impl CapacitySchedule {
    pub fn new(u_start: f64, u_max: f64, ramp_epochs: usize) -> Result<Self> {
        if !(u_start >= 0.0) || !(u_max >= u_start) || !u_max.is_finite() {
            return Err(Error::config(format!(
                "capacity schedule needs 0 <= start <= max, got {u_start}..{u_max}"
            )));
        }
        Ok(Self {
            u_start,
            u_max,
            ramp_epochs,
        })
    }

    pub fn constant(u: f64) -> Self {
        Self {
            u_start: u,
            u_max: u,
            ramp_epochs: 0,
        }
    }

    pub fn current(&self, epoch: usize) -> f64 {
        let frac = if self.ramp_epochs == 0 {
            1.0
        } else {
            (epoch as f64 / self.ramp_epochs as f64).min(1.0)
        };
        self.u_start + (self.u_max - self.u_start) * frac
    }
}

/// Tape handles for one representation's ELBO pieces.
#[derive(Debug, Clone, Copy)]
pub struct BranchTerms {
    pub recon: Var,
    pub kl_z: Var,
    pub kl_c: Var,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct BranchBreakdown {
    pub recon: f64,
    pub kl_z: f64,
    pub kl_c: f64,
    pub beta_k: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct FineLossBreakdown {
    pub branches: Vec<BranchBreakdown>,
    pub total: f64,
}

/// `sum_k [ -recon_k + beta_k |kl_z,k - U_z| + beta_k |kl_c,k - U_c| ]`.
pub fn fine_loss(
    tape: &mut Tape,
    terms: &[BranchTerms],
    beta: f64,
    u_z: f64,
    u_c: f64,
) -> Result<(Var, FineLossBreakdown)> {
    let recon: Vec<Var> = terms.iter().map(|t| t.recon).collect();
    let betas = beta_k(tape, &recon, beta)?;
    let mut total = tape.scalar(0.0);
    let mut branches = Vec::with_capacity(terms.len());
    for (t, &b) in terms.iter().zip(&betas) {
        let gap_z = tape.add_scalar(t.kl_z, -u_z);
        let gap_z = tape.abs(gap_z);
        let gap_c = tape.add_scalar(t.kl_c, -u_c);
        let gap_c = tape.abs(gap_c);
        let gaps = tape.add(gap_z, gap_c)?;
        let weighted = tape.mul(b, gaps)?;
        let branch = tape.sub(weighted, t.recon)?;
        total = tape.add(total, branch)?;
        branches.push(BranchBreakdown {
            recon: tape.item(t.recon),
            kl_z: tape.item(t.kl_z),
            kl_c: tape.item(t.kl_c),
            beta_k: tape.item(b),
        });
    }
    let breakdown = FineLossBreakdown {
        branches,
        total: tape.item(total),
    };
    Ok((total, breakdown))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::numerics::{grad_check_many, Tensor};
    use proptest::prelude::*;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;
    use rand_distr::StandardNormal;

    fn val(t: &mut Tape, f: impl FnOnce(&mut Tape) -> Result<Var>) -> f64 {
        let v = f(t).unwrap();
        t.item(v)
    }

    fn post(t: &mut Tape, mu: &[f64], sigma: &[f64], cols: usize, sigma0: f64) -> GaussianPosterior {
        let rows = mu.len() / cols;
        let mu = t.constant_from(&[rows, cols], mu.to_vec()).unwrap();
        let sigma = t.constant_from(&[rows, cols], sigma.to_vec()).unwrap();
        GaussianPosterior { mu, sigma, sigma0 }
    }

    #[test]
    fn reconstruction_examples() {
        let mut t = Tape::new();
        let x = t.constant_from(&[2, 3], vec![0.1, 0.5, 0.9, 0.0, 1.0, 0.3]).unwrap();
        assert_eq!(val(&mut t, |t| recon_loglik(t, x, x)), 0.0);
        let off = t.constant_from(&[2, 3], vec![0.1, 0.5, 0.9, 1.0, 1.0, 0.3]).unwrap();
        assert!((val(&mut t, |t| recon_loglik(t, x, off)) + 0.25).abs() < 1e-15);
        let mut last = 0.0;
        for k in 1..6 {
            let y = t
                .constant_from(&[2, 3], vec![0.1 + 0.1 * k as f64, 0.5, 0.9, 0.0, 1.0, 0.3])
                .unwrap();
            let v = val(&mut t, |t| recon_loglik(t, x, y));
            assert!(v < last);
            last = v;
        }
        let bad = t.constant_from(&[3, 2], vec![0.0; 6]).unwrap();
        assert!(recon_loglik(&mut t, x, bad).is_err());
    }

    #[test]
    fn bernoulli_likelihood_prefers_matching_pixels() {
        let mut t = Tape::new();
        let x = t.constant_from(&[1, 2], vec![1.0, 0.0]).unwrap();
        let good = t.constant_from(&[1, 2], vec![0.9, 0.1]).unwrap();
        let bad = t.constant_from(&[1, 2], vec![0.1, 0.9]).unwrap();
        let g = val(&mut t, |t| recon_loglik_with(t, x, good, Likelihood::Bernoulli));
        let b = val(&mut t, |t| recon_loglik_with(t, x, bad, Likelihood::Bernoulli));
        assert!((g - 2.0 * 0.9f64.ln()).abs() < 1e-9);
        assert!(b < g);
        let saturated = t.constant_from(&[1, 2], vec![1.0, 0.0]).unwrap();
        assert!(val(&mut t, |t| recon_loglik_with(t, x, saturated, Likelihood::Bernoulli)).is_finite());
    }

    #[test]
    fn gaussian_kl_examples() {
        let mut t = Tape::new();
        let p = post(&mut t, &[0.0; 8], &[0.3; 8], 4, 0.3);
        assert!(val(&mut t, |t| kl_gaussian(t, &p)).abs() < 1e-15);
        let p = post(&mut t, &[0.3; 8], &[0.3; 8], 4, 0.3);
        assert!((val(&mut t, |t| kl_gaussian(t, &p)) - 2.0).abs() < 1e-12);
    }

    #[test]
    fn gaussian_kl_matches_monte_carlo() {
        let (sigma0, mu, sigma) = (0.5, [0.4, -0.2, 0.1], [0.3, 0.8, 0.5]);
        let mut t = Tape::new();
        let p = post(&mut t, &mu, &sigma, 3, sigma0);
        let exact = val(&mut t, |t| kl_gaussian(t, &p));

        let log_normal = |x: f64, m: f64, s: f64| -0.5 * ((x - m) / s).powi(2) - s.ln();
        let mut rng = ChaCha8Rng::seed_from_u64(2024);
        let draws = 100_000;
        let samples: Vec<f64> = (0..draws)
            .map(|_| {
                (0..3)
                    .map(|j| {
                        let e: f64 = rng.sample(StandardNormal);
                        let z = mu[j] + sigma[j] * e;
                        log_normal(z, mu[j], sigma[j]) - log_normal(z, 0.0, sigma0)
                    })
                    .sum()
            })
            .collect();
        let mean = samples.iter().sum::<f64>() / draws as f64;
        let var = samples.iter().map(|s| (s - mean).powi(2)).sum::<f64>() / (draws - 1) as f64;
        let se = (var / draws as f64).sqrt();
        assert!((mean - exact).abs() < 3.0 * se, "mc {mean} +- {se}, exact {exact}");
    }

    #[test]
    fn aspect_kl_examples() {
        let mut t = Tape::new();
        let u = t.constant_from(&[1, 4], vec![0.25; 4]).unwrap();
        assert!(val(&mut t, |t| kl_aspect(t, u)).abs() < 1e-15);
        let hot = t.constant_from(&[1, 4], vec![0.0, 1.0, 0.0, 0.0]).unwrap();
        assert!((val(&mut t, |t| kl_aspect(t, hot)) - 4f64.ln()).abs() < 1e-15);
        let c = t.constant_from(&[1, 2], vec![0.75, 0.25]).unwrap();
        let v = val(&mut t, |t| kl_aspect(t, c));
        assert!((v - (0.75 * 1.5f64.ln() + 0.25 * 0.5f64.ln())).abs() < 1e-15);
        assert!((v - 0.1308).abs() < 5e-5);
    }

    #[test]
    fn beta_examples() {
        assert_eq!(beta_weights(&[-3.0], 2.0), vec![2.0]);
        assert_eq!(beta_weights(&[-2.0, -4.0], 1.0), vec![0.5, 1.0]);
        assert_eq!(beta_weights(&[-1.5, -1.5, -1.5], 4.0), vec![4.0; 3]);
        assert_eq!(beta_weights(&[0.0, 0.0], 4.0), vec![4.0; 2]);

        let mut t = Tape::new();
        let r: Vec<Var> = [-2.0, -4.0].iter().map(|&v| t.scalar(v)).collect();
        let b: Vec<f64> = beta_k(&mut t, &r, 3.0).unwrap().iter().map(|&v| t.item(v)).collect();
        assert_eq!(b, vec![1.5, 3.0]);
        assert!(beta_k(&mut t, &[], 1.0).is_err());
    }

    #[test]
    fn schedule_ramps_linearly() {
        let s = CapacitySchedule::new(0.0, 25.0, 10).unwrap();
        assert_eq!(s.current(0), 0.0);
        assert_eq!(s.current(4), 10.0);
        assert_eq!(s.current(10), 25.0);
        assert_eq!(s.current(50), 25.0);
        assert_eq!(CapacitySchedule::constant(3.0).current(0), 3.0);
        assert!(CapacitySchedule::new(2.0, 1.0, 5).is_err());
        assert!(CapacitySchedule::new(-1.0, 1.0, 5).is_err());
    }

    fn branch(t: &mut Tape, x: &[f64], xhat: &[f64], mu: &[f64], sigma: &[f64], c: &[f64]) -> BranchTerms {
        let n = 3;
        let xv = t.constant_from(&[n, x.len() / n], x.to_vec()).unwrap();
        let xh = t.constant_from(&[n, x.len() / n], xhat.to_vec()).unwrap();
        let p = post(t, mu, sigma, mu.len() / n, 1.0);
        let cv = t.constant_from(&[1, c.len()], c.to_vec()).unwrap();
        BranchTerms {
            recon: recon_loglik(t, xv, xh).unwrap(),
            kl_z: kl_gaussian(t, &p).unwrap(),
            kl_c: kl_aspect(t, cv).unwrap(),
        }
    }

    #[test]
    fn perfect_fit_at_capacity_is_zero() {
        let mut t = Tape::new();
        let x = [0.2, 0.4, 0.6, 0.8, 0.1, 0.3];
        let b = branch(&mut t, &x, &x, &[0.5; 6], &[0.7; 6], &[0.6, 0.4]);
        let (u_z, u_c) = (t.item(b.kl_z), t.item(b.kl_c));
        let (loss, _) = fine_loss(&mut t, &[b], 1.0, u_z, u_c).unwrap();
        assert_eq!(t.item(loss), 0.0);
    }

    #[test]
    fn matches_straight_line_negative_elbo() {
        let x = [0.2, 0.9, 0.4, 0.0, 0.7, 0.5];
        let xhat = [0.25, 0.8, 0.3, 0.1, 0.6, 0.55];
        let mu = [0.3, -0.4, 0.1, 0.9, -0.2, 0.05];
        let sigma = [0.5, 1.2, 0.8, 0.3, 1.0, 0.6];
        let c = [0.7, 0.2, 0.1];

        let mut t = Tape::new();
        let b = branch(&mut t, &x, &xhat, &mu, &sigma, &c);
        let (loss, breakdown) = fine_loss(&mut t, &[b], 1.0, 0.0, 0.0).unwrap();

        // textbook form: squared error / 2 + 0.5 * sum(s^2 + m^2 - 1 - ln s^2) + KL(c || uniform)
        let mut sq = 0.0;
        for i in 0..6 {
            sq += (x[i] - xhat[i]) * (x[i] - xhat[i]);
        }
        let recon = sq / 2.0 / 3.0;
        let mut kl = 0.0;
        for i in 0..6 {
            let v = sigma[i] * sigma[i];
            kl += 0.5 * (v + mu[i] * mu[i] - 1.0 - v.ln());
        }
        kl /= 3.0;
        let mut kc = 0.0;
        for p in c {
            kc += p * (p * 3.0f64).ln();
        }
        let expected = recon + kl + kc;
        assert!((t.item(loss) - expected).abs() < 1e-10);
        assert_eq!(breakdown.branches[0].beta_k, 1.0);
        assert!((breakdown.total - expected).abs() < 1e-10);
    }

    #[test]
    fn gradient_wrt_mu_matches_finite_differences() {
        let mu = Tensor::new(&[3, 2], vec![0.3, -0.4, 0.1, 0.9, -0.2, 0.05]).unwrap();
        let x = Tensor::new(&[3, 2], vec![0.2, 0.9, 0.4, 0.0, 0.7, 0.5]).unwrap();
        let report = grad_check_many(
            |t, v| {
                let sigma = t.constant_from(&[3, 2], vec![0.5, 1.2, 0.8, 0.3, 1.0, 0.6])?;
                let p = GaussianPosterior {
                    mu: v[0],
                    sigma,
                    sigma0: 1.0,
                };
                let xv = t.constant(&x);
                let xhat = t.logistic(v[0]);
                let c = t.constant_from(&[1, 2], vec![0.6, 0.4])?;
                let terms = BranchTerms {
                    recon: recon_loglik(t, xv, xhat)?,
                    kl_z: kl_gaussian(t, &p)?,
                    kl_c: kl_aspect(t, c)?,
                };
                let other = BranchTerms {
                    recon: t.scalar(-0.9),
                    kl_z: t.scalar(0.3),
                    kl_c: t.scalar(0.01),
                };
                Ok(fine_loss(t, &[terms, other], 2.0, 0.1, 0.2)?.0)
            },
            &[mu],
            1e-6,
        )
        .unwrap();
        assert!(report.max_relative_error() < 1e-6, "{}", report.max_relative_error());
    }

    fn simplex(raw: &[f64]) -> Vec<f64> {
        let s: f64 = raw.iter().map(|r| r.exp()).sum();
        raw.iter().map(|r| r.exp() / s).collect()
    }

    proptest! {
        #[test]
        fn kl_terms_are_nonnegative(
            mu in prop::collection::vec(-3.0f64..3.0, 6),
            sigma in prop::collection::vec(0.05f64..3.0, 6),
            sigma0 in 0.1f64..2.0,
            logits in prop::collection::vec(-5.0f64..5.0, 1..6),
        ) {
            let mut t = Tape::new();
            let p = post(&mut t, &mu, &sigma, 3, sigma0);
            prop_assert!(val(&mut t, |t| kl_gaussian(t, &p)) >= -1e-12);
            let c = simplex(&logits);
            let cv = t.constant_from(&[1, c.len()], c).unwrap();
            prop_assert!(val(&mut t, |t| kl_aspect(t, cv)) >= -1e-12);
        }

        #[test]
        fn loss_is_permutation_invariant(
            recon in prop::collection::vec(-5.0f64..-0.01, 3),
            klz in prop::collection::vec(0.0f64..10.0, 3),
            klc in prop::collection::vec(0.0f64..1.0, 3),
            u in 0.0f64..5.0,
        ) {
            let eval = |order: [usize; 3]| {
                let mut t = Tape::new();
                let terms: Vec<BranchTerms> = order
                    .iter()
                    .map(|&i| BranchTerms {
                        recon: t.scalar(recon[i]),
                        kl_z: t.scalar(klz[i]),
                        kl_c: t.scalar(klc[i]),
                    })
                    .collect();
                let (l, _) = fine_loss(&mut t, &terms, 1.5, u, u / 10.0).unwrap();
                t.item(l)
            };
            let a = eval([0, 1, 2]);
            let b = eval([2, 0, 1]);
            prop_assert!((a - b).abs() <= 1e-12 * a.abs().max(1.0));
        }

        #[test]
        fn capacity_is_monotone_and_helps_large_kl(
            u_max in 0.0f64..20.0,
            ramp in 1usize..50,
            excess in 0.01f64..10.0,
            e1 in 0usize..100,
            e2 in 0usize..100,
        ) {
            let s = CapacitySchedule::new(0.0, u_max, ramp).unwrap();
            let (lo, hi) = (e1.min(e2), e1.max(e2));
            prop_assert!(s.current(lo) <= s.current(hi));
            let kl = u_max + excess;
            let eval = |epoch: usize| {
                let mut t = Tape::new();
                let term = BranchTerms {
                    recon: t.scalar(-1.0),
                    kl_z: t.scalar(kl),
                    kl_c: t.scalar(kl),
                };
                let u = s.current(epoch);
                let (l, _) = fine_loss(&mut t, &[term], 1.0, u, u).unwrap();
                t.item(l)
            };
            prop_assert!(eval(hi) <= eval(lo));
        }
    }
}
