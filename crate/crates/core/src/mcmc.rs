//! Joint posterior MCMC over parameters and hidden states, and the defense
//! mixture parameter proposal fitted from its output.

use nalgebra::{DMatrix, DVector};
use rand::{Rng, RngCore};
use rand_distr::{ChiSquared, Distribution, StandardNormal};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::iffbs::{initialize, Configuration, IffbsKernel};
use crate::math::log_sum_exp_unchecked;
use crate::model::ModelFamily;

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct McmcConfig {
    pub n_iter: usize,
    /// Fraction of iterations discarded; the proposal adapts only here.
    pub burn_in_frac: f64,
    /// Iterations between covariance updates during burn-in.
    pub adapt_every: usize,
    pub target_acceptance: f64,
}

impl Default for McmcConfig {
    fn default() -> Self {
        Self {
            n_iter: 10_000,
            burn_in_frac: 0.2,
            adapt_every: 50,
            target_acceptance: 0.234,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct McmcOutput {
    pub param_names: Vec<String>,
    /// Post-burn-in draws of the transformed parameters.
    pub samples: Vec<Vec<f64>>,
    /// Acceptance rate of the frozen proposal after burn-in.
    pub acceptance_rate: f64,
}

/// Maximum prior draws tried for a starting point.
const START_ATTEMPTS: usize = 1000;

fn log_target<F: ModelFamily>(family: &F, phi: &[f64], config: &Configuration) -> f64 {
    let prior = family.log_prior_transformed(phi);
    if !prior.is_finite() {
        return f64::NEG_INFINITY;
    }
    match family.bind(&family.untransform(phi)) {
        Ok(model) => prior + config.log_complete_density(&model),
        Err(_) => f64::NEG_INFINITY,
    }
}

fn start_point<F: ModelFamily, R: Rng>(
    family: &F,
    start: Option<&[f64]>,
    rng: &mut R,
) -> Result<(Vec<f64>, Configuration)> {
    let mut candidates: Vec<Vec<f64>> = start.into_iter().map(<[f64]>::to_vec).collect();
    for _ in 0..START_ATTEMPTS {
        let theta = match candidates.pop() {
            Some(t) => t,
            None => family.sample_prior(rng),
        };
        let Ok(phi) = family.transform(&theta) else { continue };
        let Ok(model) = family.bind(&theta) else { continue };
        if let Ok(config) = initialize(&model, rng) {
            if log_target(family, &phi, &config).is_finite() {
                return Ok((phi, config));
            }
        }
    }
    Err(Error::Initialization(START_ATTEMPTS))
}

/// Adaptive random-walk Metropolis on the transformed parameters
/// alternating with one IFFBS sweep of the hidden states per iteration.
/// `start` is a natural-scale parameter vector to begin from; otherwise
/// prior draws are tried until one supports an initial grid.
pub fn mcmc_joint<F: ModelFamily, R: Rng>(
    family: &F,
    cfg: &McmcConfig,
    start: Option<&[f64]>,
    rng: &mut R,
) -> Result<McmcOutput> {
    let d = family.n_params();
    let (mut phi, mut config) = start_point(family, start, rng)?;
    let mut current = log_target(family, &phi, &config);
    let burn_in = (cfg.n_iter as f64 * cfg.burn_in_frac).round() as usize;

    let mut log_scale = 0.0f64;
    let base = 2.38f64.powi(2) / d as f64;
    let mut chol = DMatrix::<f64>::identity(d, d) * 0.1;
    let mut history: Vec<Vec<f64>> = Vec::with_capacity(burn_in);
    let mut samples = Vec::with_capacity(cfg.n_iter - burn_in.min(cfg.n_iter));
    let mut accepted_after = 0usize;
    let mut window_accepted = 0usize;
    let mut z = DVector::<f64>::zeros(d);

    for iter in 0..cfg.n_iter {
        for v in z.iter_mut() {
            *v = rng.sample(StandardNormal);
        }
        let step = &chol * &z * log_scale.exp();
        let proposal: Vec<f64> = phi.iter().zip(step.iter()).map(|(a, b)| a + b).collect();
        let cand = log_target(family, &proposal, &config);
        let accept = cand.is_finite() && rng.random::<f64>().ln() < cand - current;
        if accept {
            phi = proposal;
        }

        let model = family.bind(&family.untransform(&phi))?;
        IffbsKernel::new(&model).sweep(&mut config, rng)?;
        current = log_target(family, &phi, &config);

        if iter < burn_in {
            history.push(phi.clone());
            window_accepted += accept as usize;
            if (iter + 1) % cfg.adapt_every == 0 {
                let rate = window_accepted as f64 / cfg.adapt_every as f64;
                window_accepted = 0;
                let gain = 1.0 / ((iter + 1) as f64 / cfg.adapt_every as f64).sqrt();
                log_scale += 3.0 * gain * (rate - cfg.target_acceptance);
                if history.len() >= 2 * d.max(10) {
                    let (_, cov) = moments(&history);
                    let scaled = (cov + DMatrix::identity(d, d) * 1e-8) * base;
                    if let Some(c) = scaled.cholesky() {
                        chol = c.l();
                    }
                }
            }
        } else {
            accepted_after += accept as usize;
            samples.push(phi.clone());
        }
    }
    let kept = samples.len().max(1);
    Ok(McmcOutput {
        param_names: family.param_names(),
        samples,
        acceptance_rate: accepted_after as f64 / kept as f64,
    })
}

fn moments(samples: &[Vec<f64>]) -> (DVector<f64>, DMatrix<f64>) {
    let d = samples[0].len();
    let n = samples.len() as f64;
    let mut mean = DVector::<f64>::zeros(d);
    for s in samples {
        mean += DVector::from_column_slice(s);
    }
    mean /= n;
    let mut cov = DMatrix::<f64>::zeros(d, d);
    for s in samples {
        let c = DVector::from_column_slice(s) - &mean;
        cov += &c * c.transpose();
    }
    cov /= (n - 1.0).max(1.0);
    (mean, cov)
}

/// `lambda * N(mu, Sigma) + (1 - lambda) * prior` on transformed parameters,
/// or a multivariate t with `df` degrees of freedom in place of the normal.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DefenseMixture {
    pub lambda: f64,
    pub mean: Vec<f64>,
    /// Row-major covariance.
    pub cov: Vec<f64>,
    #[serde(default)]
    pub df: Option<u32>,
    #[serde(skip)]
    chol: Option<DMatrix<f64>>,
}

/// Jitter levels tried on a non-positive-definite covariance.
const JITTERS: [f64; 6] = [0.0, 1e-10, 1e-8, 1e-6, 1e-4, 1e-2];

/// `ln Gamma(n / 2)` for a positive integer `n`.
fn ln_gamma_half(n: u32) -> f64 {
    let mut x = if n % 2 == 0 { 0.0 } else { 0.5 * std::f64::consts::PI.ln() };
    let mut k = if n % 2 == 0 { 2 } else { 1 };
    while k < n {
        x += (k as f64 / 2.0).ln();
        k += 2;
    }
    x
}

impl DefenseMixture {
    pub fn new(lambda: f64, mean: Vec<f64>, cov: Vec<f64>, df: Option<u32>) -> Result<Self> {
        let d = mean.len();
        if !(0.0..=1.0).contains(&lambda) {
            return Err(Error::Invalid(format!("mixture weight {lambda} outside [0, 1]")));
        }
        if cov.len() != d * d {
            return Err(Error::Dimension("covariance must be d x d".into()));
        }
        if df == Some(0) {
            return Err(Error::Invalid("t degrees of freedom must be positive".into()));
        }
        let mut m = Self { lambda, mean, cov, df, chol: None };
        m.factor()?;
        Ok(m)
    }

    fn factor(&mut self) -> Result<()> {
        let d = self.mean.len();
        let sigma = DMatrix::from_row_slice(d, d, &self.cov);
        let sigma = (&sigma + sigma.transpose()) * 0.5;
        let scale = (0..d).map(|i| sigma[(i, i)].abs()).fold(0.0, f64::max).max(1e-12);
        for j in JITTERS {
            let m = &sigma + DMatrix::identity(d, d) * (j * scale);
            if let Some(c) = m.clone().cholesky() {
                self.cov = m.transpose().as_slice().to_vec();
                self.chol = Some(c.l());
                return Ok(());
            }
        }
        Err(Error::Invalid("covariance is not positive definite even after jitter".into()))
    }

    fn chol(&self) -> &DMatrix<f64> {
        self.chol.as_ref().expect("factored at construction")
    }

    /// Restores the Cholesky factor after deserialization.
    pub fn refactor(mut self) -> Result<Self> {
        self.factor()?;
        Ok(self)
    }

    pub fn dim(&self) -> usize {
        self.mean.len()
    }

    fn log_kernel(&self, phi: &[f64]) -> f64 {
        let d = self.dim();
        let diff = DVector::from_column_slice(phi) - DVector::from_column_slice(&self.mean);
        let l = self.chol();
        let Some(y) = l.solve_lower_triangular(&diff) else {
            return f64::NEG_INFINITY;
        };
        let maha = y.norm_squared();
        let log_det: f64 = (0..d).map(|i| l[(i, i)].ln()).sum();
        let df_d = d as f64;
        match self.df {
            None => -0.5 * maha - log_det - 0.5 * df_d * (2.0 * std::f64::consts::PI).ln(),
            Some(nu) => {
                let nu_f = nu as f64;
                ln_gamma_half(nu + d as u32) - ln_gamma_half(nu)
                    - 0.5 * df_d * (nu_f * std::f64::consts::PI).ln()
                    - log_det
                    - 0.5 * (nu_f + df_d) * (1.0 + maha / nu_f).ln()
            }
        }
    }

    /// Log density on the transformed scale.
    pub fn log_density<F: ModelFamily>(&self, family: &F, phi: &[f64]) -> f64 {
        let mut terms = Vec::with_capacity(2);
        if self.lambda > 0.0 {
            terms.push(self.lambda.ln() + self.log_kernel(phi));
        }
        if self.lambda < 1.0 {
            terms.push((1.0 - self.lambda).ln() + family.log_prior_transformed(phi));
        }
        log_sum_exp_unchecked(&terms)
    }

    /// A transformed parameter draw.
    pub fn sample<F: ModelFamily, R: Rng>(&self, family: &F, rng: &mut R) -> Vec<f64> {
        if rng.random::<f64>() < self.lambda {
            let d = self.dim();
            let z = DVector::<f64>::from_fn(d, |_, _| rng.sample(StandardNormal));
            let mut step = self.chol() * z;
            if let Some(nu) = self.df {
                let w: f64 = ChiSquared::new(nu as f64).unwrap().sample(rng);
                step *= (nu as f64 / w).sqrt();
            }
            self.mean.iter().zip(step.iter()).map(|(m, s)| m + s).collect()
        } else {
            loop {
                let theta = family.sample_prior(rng as &mut dyn RngCore);
                if let Ok(phi) = family.transform(&theta) {
                    return phi;
                }
            }
        }
    }
}

/// Minimum number of draws accepted by [`fit_defense_mixture`].
pub const MIN_FIT_SAMPLES: usize = 100;

/// Moment-matched normal (or t) mixed with the prior.
pub fn fit_defense_mixture(samples: &[Vec<f64>], lambda: f64, df: Option<u32>) -> Result<DefenseMixture> {
    if samples.len() < MIN_FIT_SAMPLES {
        return Err(Error::Invalid(format!(
            "need at least {MIN_FIT_SAMPLES} samples to fit a mixture, got {}",
            samples.len()
        )));
    }
    let d = samples[0].len();
    if samples.iter().any(|s| s.len() != d) {
        return Err(Error::Dimension("ragged parameter samples".into()));
    }
    let (mean, cov) = moments(samples);
    DefenseMixture::new(lambda, mean.as_slice().to_vec(), cov.transpose().as_slice().to_vec(), df)
}
