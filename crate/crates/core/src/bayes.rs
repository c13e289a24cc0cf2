//! Bayesian inference for random eigenbasis-expansion priors.
//!
//! The model puts `f = sum_{j<=J} Z_j u_j^{(h)}` with `Z_j` i.i.d. from a
//! coefficient distribution, either at a fixed `(J, h)` or with a hyperprior
//! over the truncation level and a discrete bandwidth grid (each bandwidth
//! needs its own graph and eigendecomposition, which is exactly why the grid
//! is discrete; bases are cached per `h`).
//!
//! With Gaussian coefficients the posterior is an exact finite mixture: the
//! marginal likelihood of every `(J, h)` cell has a closed form through one
//! Cholesky factorization per bandwidth (evidence for all nested `J` falls
//! out of the same factor), the conditional coefficient law is Gaussian, and
//! draws are exact. For non-Gaussian coefficients a Metropolis-within-Gibbs
//! chain updates the coefficients by random walk and re-proposes `(J, h)`
//! (with fresh coefficients) from the prior, so the acceptance ratio for the
//! model move is a pure likelihood ratio.

use nalgebra::{Cholesky, DMatrix, DVector};
use rand::Rng;
use serde::{Deserialize, Serialize};
use std::collections::HashMap;
use std::sync::Arc;

use crate::estimators::{rms_loss, standard_normal, RegressionDataset};
use crate::rng::{derive_seed, rng_from_seed};
use crate::spectral::{decompose, SpectralBasis};
use crate::{Error, Result};

/// Coefficient distribution for the basis expansion. Both built-ins have
/// sub-exponential tails `P(|Z| > z) <= exp(-b1 z^{b2})`.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case", tag = "kind")]
pub enum Psi {
    /// Centered normal with variance `s2`.
    Gaussian { s2: f64 },
    /// Centered Laplace with scale `b` (density `exp(-|z|/b) / 2b`).
    Laplace { b: f64 },
}

impl Psi {
    pub fn validate(&self) -> Result<()> {
        let ok = match *self {
            Psi::Gaussian { s2 } => s2 > 0.0,
            Psi::Laplace { b } => b > 0.0,
        };
        if ok {
            Ok(())
        } else {
            Err(Error::InvalidParam(format!("coefficient scale must be positive: {self:?}")))
        }
    }

    pub fn sample<R: Rng>(&self, rng: &mut R) -> f64 {
        match *self {
            Psi::Gaussian { s2 } => s2.sqrt() * standard_normal(rng),
            Psi::Laplace { b } => {
                let u: f64 = rng.gen::<f64>() - 0.5;
                -b * u.signum() * (1.0 - 2.0 * u.abs()).max(1e-300).ln()
            }
        }
    }

    pub fn log_density(&self, z: f64) -> f64 {
        match *self {
            Psi::Gaussian { s2 } => {
                -0.5 * z * z / s2 - 0.5 * (2.0 * std::f64::consts::PI * s2).ln()
            }
            Psi::Laplace { b } => -z.abs() / b - (2.0 * b).ln(),
        }
    }

    pub fn cdf(&self, z: f64) -> f64 {
        match *self {
            Psi::Gaussian { s2 } => {
                0.5 * (1.0 + erf(z / (2.0 * s2).sqrt()))
            }
            Psi::Laplace { b } => {
                if z < 0.0 {
                    0.5 * (z / b).exp()
                } else {
                    1.0 - 0.5 * (-z / b).exp()
                }
            }
        }
    }

    /// `(b1, b2)` with `P(|Z| > z) <= exp(-b1 z^{b2})` for all z >= 0.
    pub fn tail_exponents(&self) -> (f64, f64) {
        match *self {
            Psi::Gaussian { s2 } => (0.5 / s2, 2.0),
            Psi::Laplace { b } => (1.0 / b, 1.0),
        }
    }

    pub fn gaussian_variance(&self) -> Option<f64> {
        match *self {
            Psi::Gaussian { s2 } => Some(s2),
            _ => None,
        }
    }
}

fn erf(x: f64) -> f64 {
    // Abramowitz-Stegun 7.1.26; absolute error below 1.5e-7.
    let sign = x.signum();
    let x = x.abs();
    let t = 1.0 / (1.0 + 0.3275911 * x);
    let poly = t
        * (0.254829592 + t * (-0.284496736 + t * (1.421413741 + t * (-1.453152027 + t * 1.061405429))));
    sign * (1.0 - poly * (-x * x).exp())
}

/// Hyperprior on the truncation level; support is the positive integers.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case", tag = "kind")]
pub enum JPrior {
    Fixed { j: usize },
    /// Poisson(lambda) conditioned on `j >= 1`.
    Poisson { lambda: f64 },
    /// `P(J = j) = p (1-p)^{j-1}`, j >= 1.
    Geometric { p: f64 },
}

impl JPrior {
    pub fn validate(&self) -> Result<()> {
        match *self {
            JPrior::Fixed { j } => {
                if j >= 1 {
                    Ok(())
                } else {
                    Err(Error::InvalidParam("fixed J must be >= 1".into()))
                }
            }
            JPrior::Poisson { lambda } => {
                if lambda > 0.0 {
                    Ok(())
                } else {
                    Err(Error::InvalidParam("Poisson intensity must be positive".into()))
                }
            }
            JPrior::Geometric { p } => {
                if p > 0.0 && p < 1.0 {
                    Ok(())
                } else {
                    Err(Error::InvalidParam("geometric parameter must lie in (0,1)".into()))
                }
            }
        }
    }

    pub fn log_pmf(&self, j: usize) -> f64 {
        if j == 0 {
            return f64::NEG_INFINITY;
        }
        match *self {
            JPrior::Fixed { j: j0 } => {
                if j == j0 {
                    0.0
                } else {
                    f64::NEG_INFINITY
                }
            }
            JPrior::Poisson { lambda } => {
                // conditioned on j >= 1
                let log_unnorm = -lambda + j as f64 * lambda.ln() - ln_factorial(j);
                log_unnorm - (-(-lambda).exp_m1()).ln()
            }
            JPrior::Geometric { p } => p.ln() + (j as f64 - 1.0) * (1.0 - p).ln(),
        }
    }

    pub fn sample<R: Rng>(&self, rng: &mut R) -> usize {
        match *self {
            JPrior::Fixed { j } => j,
            JPrior::Poisson { lambda } => loop {
                // inversion by sequential search, conditioned on >= 1
                let u: f64 = rng.gen();
                let mut j = 0usize;
                let mut p = (-lambda).exp();
                let mut cdf = p;
                while cdf < u && j < 10_000 {
                    j += 1;
                    p *= lambda / j as f64;
                    cdf += p;
                }
                if j >= 1 {
                    return j;
                }
            },
            JPrior::Geometric { p } => {
                let u: f64 = rng.gen::<f64>().max(1e-300);
                (u.ln() / (1.0 - p).ln()).floor() as usize + 1
            }
        }
    }
}

fn ln_factorial(n: usize) -> f64 {
    (2..=n).map(|k| (k as f64).ln()).sum()
}

/// Hyperprior on the bandwidth.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case", tag = "kind")]
pub enum HPrior {
    Fixed { h: f64 },
    /// Point mass at `h0 J^{-1/d} / (ln N)^{tau/d}`.
    DeterministicOfJ { tau: f64, h0: f64 },
    /// Dyadic grid `h_l = 2^l h_star`, l = 0..=levels, with masses from a
    /// discretized inverse-gamma(shape, rate) bandwidth.
    DyadicGrid {
        h_star: f64,
        levels: usize,
        ig_shape: f64,
        ig_rate: f64,
    },
}

impl HPrior {
    pub fn validate(&self) -> Result<()> {
        match *self {
            HPrior::Fixed { h } => {
                if h > 0.0 {
                    Ok(())
                } else {
                    Err(Error::InvalidParam("fixed h must be positive".into()))
                }
            }
            HPrior::DeterministicOfJ { tau, h0 } => {
                if tau > 0.0 && h0 > 0.0 {
                    Ok(())
                } else {
                    Err(Error::InvalidParam("tau and h0 must be positive".into()))
                }
            }
            HPrior::DyadicGrid {
                h_star,
                ig_shape,
                ig_rate,
                ..
            } => {
                if h_star > 0.0 && ig_shape > 0.0 && ig_rate > 0.0 {
                    Ok(())
                } else {
                    Err(Error::InvalidParam(
                        "dyadic grid needs h_star > 0 and a proper inverse-gamma mass (shape > 0, rate > 0)"
                            .into(),
                    ))
                }
            }
        }
    }

    /// Support of `h | J` as `(h, log mass)` pairs.
    pub fn support(&self, j: usize, d: usize, n_total: usize) -> Result<Vec<(f64, f64)>> {
        self.validate()?;
        Ok(match *self {
            HPrior::Fixed { h } => vec![(h, 0.0)],
            HPrior::DeterministicOfJ { tau, h0 } => {
                let ln_n = (n_total as f64).ln().max(1.0);
                let h = h0 * (j as f64).powf(-1.0 / d as f64) / ln_n.powf(tau / d as f64);
                vec![(h, 0.0)]
            }
            HPrior::DyadicGrid {
                h_star,
                levels,
                ig_shape,
                ig_rate,
            } => {
                let masses = inverse_gamma_discretized_h(ig_shape, ig_rate, h_star, levels)?;
                masses
                    .iter()
                    .enumerate()
                    .map(|(l, &m)| (h_star * (1u64 << l) as f64, m.max(1e-300).ln()))
                    .collect()
            }
        })
    }
}

/// Number of dyadic levels L with `2^L h_star <= h_max < 2^{L+1} h_star`.
pub fn dyadic_levels(h_star: f64, h_max: f64) -> usize {
    if h_star >= h_max {
        return 0;
    }
    (h_max / h_star).log2().floor() as usize
}

/// Probabilities `P(h = 2^l h_star)`, l = 0..=levels, obtained by sampling a
/// latent inverse-gamma bandwidth and snapping it to the grid cell it falls
/// in: the bottom cell absorbs `[0, 2 h_star)`, interior cells are
/// `[2^l h_star, 2^{l+1} h_star)`, and the top cell absorbs everything above.
pub fn inverse_gamma_discretized_h(
    shape: f64,
    rate: f64,
    h_star: f64,
    levels: usize,
) -> Result<Vec<f64>> {
    if !(shape > 0.0) {
        return Err(Error::InvalidParam(format!(
            "inverse-gamma shape must be positive for a proper bandwidth law, got {shape}"
        )));
    }
    if !(rate > 0.0) || !(h_star > 0.0) {
        return Err(Error::InvalidParam(
            "inverse-gamma rate and h_star must be positive".into(),
        ));
    }
    // IG(a, r) cdf: F(x) = Q(a, r/x), regularized upper incomplete gamma.
    let cdf = |x: f64| -> f64 {
        if x <= 0.0 {
            0.0
        } else {
            statrs::function::gamma::gamma_ur(shape, rate / x)
        }
    };
    if levels == 0 {
        return Ok(vec![1.0]);
    }
    let mut masses = Vec::with_capacity(levels + 1);
    masses.push(cdf(2.0 * h_star));
    for l in 1..levels {
        let lo = (1u64 << l) as f64 * h_star;
        let hi = (1u64 << (l + 1)) as f64 * h_star;
        masses.push(cdf(hi) - cdf(lo));
    }
    masses.push(1.0 - cdf((1u64 << levels) as f64 * h_star));
    Ok(masses)
}

/// Prior over `(J, h, coefficients)`.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct PriorSpec {
    pub psi: Psi,
    pub j_prior: JPrior,
    pub h_prior: HPrior,
}

impl PriorSpec {
    pub fn validate(&self) -> Result<()> {
        self.psi.validate()?;
        self.j_prior.validate()?;
        self.h_prior.validate()
    }
}

/// Caches one graph + eigendecomposition per bandwidth, shared by every model
/// cell that uses that bandwidth.
pub struct BasisProvider {
    cloud: crate::manifold::PointCloud,
    /// Largest truncation level any model may use.
    pub j_cap: usize,
    cache: HashMap<u64, Arc<SpectralBasis>>,
}

impl BasisProvider {
    pub fn new(cloud: crate::manifold::PointCloud, j_cap: usize) -> Self {
        BasisProvider {
            cloud,
            j_cap: j_cap.max(1),
            cache: HashMap::new(),
        }
    }

    pub fn n_total(&self) -> usize {
        self.cloud.len()
    }

    pub fn intrinsic_dim(&self) -> usize {
        self.cloud.spec.intrinsic_dim()
    }

    pub fn basis(&mut self, h: f64) -> Result<Arc<SpectralBasis>> {
        let key = h.to_bits();
        if let Some(b) = self.cache.get(&key) {
            return Ok(b.clone());
        }
        let graph = crate::graph::build_graph(&self.cloud, h)?;
        let op = crate::graph::laplacian(graph);
        let j_max = self.j_cap.min(self.cloud.len());
        let basis = Arc::new(decompose(&op, j_max)?);
        self.cache.insert(key, basis.clone());
        Ok(basis)
    }

    pub fn cached_bandwidths(&self) -> usize {
        self.cache.len()
    }
}

/// Default cap on the truncation grid: `min(N, ceil(4 n^{d/(2+d)}))`.
pub fn default_j_cap(n_labeled: usize, n_total: usize, d: usize) -> usize {
    let df = d as f64;
    let cap = (4.0 * (n_labeled as f64).powf(df / (2.0 + df))).ceil() as usize;
    cap.clamp(1, n_total)
}

/// One row of the model table.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct ModelWeight {
    pub j: usize,
    pub h: f64,
    /// Log marginal likelihood (None on the Metropolis path, where weights
    /// are visit frequencies).
    pub log_evidence: Option<f64>,
    pub posterior_weight: f64,
}

/// A posterior coefficient draw.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct CoeffDraw {
    pub j: usize,
    pub h: f64,
    pub z: Vec<f64>,
}

/// Acceptance bookkeeping for the Metropolis path.
#[derive(Debug, Clone, Copy, Serialize, Deserialize)]
pub struct MhAcceptance {
    pub coefficient_rate: f64,
    pub model_rate: f64,
    pub step_size: f64,
}

/// Posterior summary: per-model weights, coefficient draws, the posterior
/// mean vector, and per-draw empirical losses when ground truth is known.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct PosteriorResult {
    pub table: Vec<ModelWeight>,
    pub draws: Vec<CoeffDraw>,
    /// Exact mixture mean on the conjugate path, draw average on MH.
    pub posterior_mean: Vec<f64>,
    /// Plain average of the sampled functions.
    pub draw_mean: Vec<f64>,
    /// `(loss_n, loss_N)` per draw against ground truth.
    pub draw_losses: Option<Vec<(f64, f64)>>,
    pub acceptance: Option<MhAcceptance>,
}

impl PosteriorResult {
    /// Marginal posterior over J accumulated from the weight table.
    pub fn j_marginal(&self) -> HashMap<usize, f64> {
        let mut out = HashMap::new();
        for row in &self.table {
            *out.entry(row.j).or_insert(0.0) += row.posterior_weight;
        }
        out
    }

    /// Mode of the marginal posterior over J.
    pub fn modal_j(&self) -> usize {
        let marg = self.j_marginal();
        marg.into_iter()
            .max_by(|a, b| a.1.partial_cmp(&b.1).unwrap().then(b.0.cmp(&a.0)))
            .map(|(j, _)| j)
            .unwrap_or(0)
    }
}

/// Draw `(J, h, f)` from the prior. If the cached basis carries fewer than
/// `J` eigenvectors the expansion is truncated with a warning.
pub fn sample_prior(
    prior: &PriorSpec,
    provider: &mut BasisProvider,
    seed: u64,
) -> Result<(usize, f64, DVector<f64>)> {
    prior.validate()?;
    let mut rng = rng_from_seed(seed);
    let j = prior.j_prior.sample(&mut rng);
    let support = prior
        .h_prior
        .support(j, provider.intrinsic_dim(), provider.n_total())?;
    let h = sample_from_log_masses(&support, &mut rng);
    let basis = provider.basis(h)?;
    let j_eff = if j > basis.j_max() {
        log::warn!(
            "prior drew J={j} but only {} eigenpairs are available at h={h}; truncating",
            basis.j_max()
        );
        basis.j_max()
    } else {
        j
    };
    let z: Vec<f64> = (0..j_eff).map(|_| prior.psi.sample(&mut rng)).collect();
    let f = basis.synthesize(&z);
    Ok((j_eff, h, f))
}

fn sample_from_log_masses<R: Rng>(support: &[(f64, f64)], rng: &mut R) -> f64 {
    if support.len() == 1 {
        return support[0].0;
    }
    let max = support.iter().map(|&(_, lm)| lm).fold(f64::NEG_INFINITY, f64::max);
    let weights: Vec<f64> = support.iter().map(|&(_, lm)| (lm - max).exp()).collect();
    let total: f64 = weights.iter().sum();
    let mut u = rng.gen::<f64>() * total;
    for (k, w) in weights.iter().enumerate() {
        u -= w;
        if u <= 0.0 {
            return support[k].0;
        }
    }
    support[support.len() - 1].0
}

/// Design matrix on the labeled rows: `U[(i, j)] = u_{j+1}(x_i)`.
fn labeled_design(basis: &SpectralBasis, n_labeled: usize, j: usize) -> DMatrix<f64> {
    let mut u = DMatrix::zeros(n_labeled, j);
    for col in 0..j {
        for row in 0..n_labeled {
            u[(row, col)] = basis.eigenvectors[(row, col)];
        }
    }
    u
}

/// Shared Cholesky machinery for the Gaussian-coefficient model at one
/// bandwidth: evidence for every nested truncation level, conditional means
/// and exact conditional draws.
struct GaussianPath {
    chol_l: DMatrix<f64>,
    /// Forward-substituted right-hand side `L^{-1} U^T y`.
    w: DVector<f64>,
    yty: f64,
    n: usize,
    sigma2: f64,
    ratio_log: f64, // ln(s2 / sigma2)
}

impl GaussianPath {
    fn build(
        dataset: &RegressionDataset,
        basis: &SpectralBasis,
        j_cap: usize,
        s2: f64,
    ) -> Result<Self> {
        let n = dataset.n_labeled();
        let sigma2 = dataset.sigma * dataset.sigma;
        if !(sigma2 > 0.0) {
            return Err(Error::InvalidParam(
                "conjugate path needs sigma > 0".into(),
            ));
        }
        let j_cap = j_cap.min(basis.j_max());
        let u = labeled_design(basis, n, j_cap);
        let mut a = u.transpose() * &u;
        for k in 0..j_cap {
            a[(k, k)] += sigma2 / s2;
        }
        let chol = Cholesky::new(a).ok_or(Error::NotSpd { j: j_cap })?;
        let chol_l: DMatrix<f64> = chol.l();
        let y = DVector::from_column_slice(&dataset.y);
        let b = u.transpose() * &y;
        // forward substitution; the prefix w[..J] solves the leading system
        let mut w = DVector::zeros(j_cap);
        for i in 0..j_cap {
            let mut acc = b[i];
            for k in 0..i {
                acc -= chol_l[(i, k)] * w[k];
            }
            w[i] = acc / chol_l[(i, i)];
        }
        Ok(GaussianPath {
            chol_l,
            w,
            yty: y.dot(&y),
            n,
            sigma2,
            ratio_log: (s2 / sigma2).ln(),
        })
    }

    fn j_cap(&self) -> usize {
        self.w.len()
    }

    /// Log marginal likelihood of the leading-J model.
    fn log_evidence(&self, j: usize) -> f64 {
        let mut logdet = 0.0;
        let mut quad = 0.0;
        for k in 0..j {
            logdet += 2.0 * self.chol_l[(k, k)].ln();
            quad += self.w[k] * self.w[k];
        }
        -0.5 * self.n as f64 * (2.0 * std::f64::consts::PI * self.sigma2).ln()
            - 0.5 * (j as f64 * self.ratio_log + logdet)
            - 0.5 * (self.yty - quad) / self.sigma2
    }

    /// Conditional posterior mean of the leading-J coefficients
    /// (back-substitution of the shared factor).
    fn conditional_mean(&self, j: usize) -> DVector<f64> {
        let mut m = DVector::zeros(j);
        for i in (0..j).rev() {
            let mut acc = self.w[i];
            for k in (i + 1)..j {
                acc -= self.chol_l[(k, i)] * m[k];
            }
            m[i] = acc / self.chol_l[(i, i)];
        }
        m
    }

    /// Exact draw from `z | J, h, y = N(mean, sigma2 A_J^{-1})`.
    fn conditional_draw<R: Rng>(&self, j: usize, rng: &mut R) -> DVector<f64> {
        let mean = self.conditional_mean(j);
        let mut xi = DVector::from_fn(j, |_, _| standard_normal(rng));
        // solve L^T v = xi on the leading block
        for i in (0..j).rev() {
            let mut acc = xi[i];
            for k in (i + 1)..j {
                acc -= self.chol_l[(k, i)] * xi[k];
            }
            xi[i] = acc / self.chol_l[(i, i)];
        }
        let sigma = self.sigma2.sqrt();
        mean + xi * sigma
    }
}

/// Closed-form log marginal likelihood of the Gaussian-coefficient model
/// with the leading `J` eigenvectors at the basis' bandwidth.
pub fn log_evidence_gaussian(
    dataset: &RegressionDataset,
    basis: &SpectralBasis,
    j: usize,
    s2: f64,
) -> Result<f64> {
    if j < 1 || j > basis.j_max() {
        return Err(Error::JOutOfRange {
            j,
            j_max: basis.j_max(),
        });
    }
    if !(s2 > 0.0) {
        return Err(Error::InvalidParam(format!("prior variance must be positive, got {s2}")));
    }
    let path = GaussianPath::build(dataset, basis, j, s2)?;
    Ok(path.log_evidence(j))
}

fn logsumexp(xs: &[f64]) -> f64 {
    let m = xs.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
    if m == f64::NEG_INFINITY {
        return m;
    }
    m + xs.iter().map(|x| (x - m).exp()).sum::<f64>().ln()
}

struct ModelCell {
    j: usize,
    h: f64,
    log_prior: f64,
    log_evidence: f64,
}

/// Exact mixture posterior for Gaussian coefficients over the finite
/// `(J, h)` grid induced by the hyperpriors, plus `n_draws` exact joint
/// draws.
pub fn posterior_gaussian(
    dataset: &RegressionDataset,
    prior: &PriorSpec,
    provider: &mut BasisProvider,
    n_draws: usize,
    seed: u64,
) -> Result<PosteriorResult> {
    prior.validate()?;
    let s2 = prior.psi.gaussian_variance().ok_or_else(|| {
        Error::InvalidParam("exact mixture path requires Gaussian coefficients".into())
    })?;
    let d = provider.intrinsic_dim();
    let n_total = provider.n_total();

    // Group candidate cells by bandwidth so each basis and Cholesky is built
    // once.
    let j_values: Vec<usize> = match prior.j_prior {
        JPrior::Fixed { j } => vec![j.min(provider.j_cap)],
        _ => (1..=provider.j_cap).collect(),
    };
    let mut by_h: HashMap<u64, (f64, Vec<(usize, f64)>)> = HashMap::new();
    for &j in &j_values {
        let lp_j = prior.j_prior.log_pmf(j);
        for (h, lp_h) in prior.h_prior.support(j, d, n_total)? {
            let entry = by_h.entry(h.to_bits()).or_insert_with(|| (h, Vec::new()));
            entry.1.push((j, lp_j + lp_h));
        }
    }
    if by_h.is_empty() {
        return Err(Error::EmptyModelGrid);
    }

    let mut cells: Vec<ModelCell> = Vec::new();
    let mut paths: HashMap<u64, GaussianPath> = HashMap::new();
    let mut bases: HashMap<u64, Arc<SpectralBasis>> = HashMap::new();
    let mut h_keys: Vec<u64> = by_h.keys().copied().collect();
    h_keys.sort_by(|a, b| f64::from_bits(*a).partial_cmp(&f64::from_bits(*b)).unwrap());
    for key in h_keys {
        let (h, j_list) = &by_h[&key];
        let basis = provider.basis(*h)?;
        let path = GaussianPath::build(dataset, &basis, provider.j_cap, s2)?;
        for &(j, log_prior) in j_list {
            let j_eff = j.min(path.j_cap());
            cells.push(ModelCell {
                j: j_eff,
                h: *h,
                log_prior,
                log_evidence: path.log_evidence(j_eff),
            });
        }
        paths.insert(key, path);
        bases.insert(key, basis);
    }

    let log_weights: Vec<f64> = cells
        .iter()
        .map(|c| c.log_prior + c.log_evidence)
        .collect();
    let norm = logsumexp(&log_weights);
    if norm == f64::NEG_INFINITY {
        return Err(Error::EmptyModelGrid);
    }
    let weights: Vec<f64> = log_weights.iter().map(|lw| (lw - norm).exp()).collect();

    // Exact mixture mean over the whole cloud.
    let mut posterior_mean = DVector::<f64>::zeros(n_total);
    for (cell, &w) in cells.iter().zip(&weights) {
        if w < 1e-300 {
            continue;
        }
        let path = &paths[&cell.h.to_bits()];
        let basis = &bases[&cell.h.to_bits()];
        let mean_coeffs = path.conditional_mean(cell.j);
        let f_mean = basis.synthesize(mean_coeffs.as_slice());
        posterior_mean.axpy(w, &f_mean, 1.0);
    }

    // Exact joint draws.
    let mut rng = rng_from_seed(derive_seed(seed, &[0x706f_7374]));
    let truth = dataset.cloud.true_values.as_ref();
    let mut draws = Vec::with_capacity(n_draws);
    let mut draw_mean = DVector::<f64>::zeros(n_total);
    let mut draw_losses: Vec<(f64, f64)> = Vec::with_capacity(n_draws);
    for _ in 0..n_draws {
        let mut u = rng.gen::<f64>();
        let mut pick = cells.len() - 1;
        for (k, &w) in weights.iter().enumerate() {
            u -= w;
            if u <= 0.0 {
                pick = k;
                break;
            }
        }
        let cell = &cells[pick];
        let path = &paths[&cell.h.to_bits()];
        let basis = &bases[&cell.h.to_bits()];
        let z = path.conditional_draw(cell.j, &mut rng);
        let f = basis.synthesize(z.as_slice());
        draw_mean.axpy(1.0, &f, 1.0);
        if let Some(t) = truth {
            let fv: Vec<f64> = f.iter().copied().collect();
            let tv: Vec<f64> = t.iter().copied().collect();
            draw_losses.push((
                rms_loss(&fv, &tv, dataset.n_labeled()),
                rms_loss(&fv, &tv, n_total),
            ));
        }
        draws.push(CoeffDraw {
            j: cell.j,
            h: cell.h,
            z: z.iter().copied().collect(),
        });
    }
    if n_draws > 0 {
        draw_mean /= n_draws as f64;
    }

    let table: Vec<ModelWeight> = cells
        .iter()
        .zip(&weights)
        .map(|(c, &w)| ModelWeight {
            j: c.j,
            h: c.h,
            log_evidence: Some(c.log_evidence),
            posterior_weight: w,
        })
        .collect();

    Ok(PosteriorResult {
        table,
        draws,
        posterior_mean: posterior_mean.iter().copied().collect(),
        draw_mean: draw_mean.iter().copied().collect(),
        draw_losses: if truth.is_some() { Some(draw_losses) } else { None },
        acceptance: None,
    })
}

/// Tuning for the Metropolis-within-Gibbs sampler.
#[derive(Debug, Clone, Copy, Serialize, Deserialize)]
pub struct MhParams {
    pub burnin: usize,
    /// Kept draws (one per post-burn-in iteration).
    pub step_init: f64,
    /// Step adaptation targets this coefficient acceptance rate during
    /// burn-in and then freezes.
    pub target_accept: f64,
}

impl Default for MhParams {
    fn default() -> Self {
        MhParams {
            burnin: 2000,
            step_init: 0.25,
            target_accept: 0.3,
        }
    }
}

/// Metropolis-within-Gibbs sampler for any built-in coefficient law:
/// random-walk updates of the coefficient vector alternate with independence
/// proposals of `(J, h, z)` from the prior, whose acceptance ratio reduces to
/// the likelihood ratio. The step size adapts only during burn-in.
pub fn posterior_mh(
    dataset: &RegressionDataset,
    prior: &PriorSpec,
    provider: &mut BasisProvider,
    n_draws: usize,
    params: &MhParams,
    seed: u64,
) -> Result<PosteriorResult> {
    prior.validate()?;
    let sigma2 = dataset.sigma * dataset.sigma;
    if !(sigma2 > 0.0) {
        return Err(Error::InvalidParam("sampler needs sigma > 0".into()));
    }
    let n = dataset.n_labeled();
    let n_total = provider.n_total();
    let d = provider.intrinsic_dim();
    let mut rng = rng_from_seed(derive_seed(seed, &[0x6d68]));

    let log_lik = |basis: &SpectralBasis, z: &[f64]| -> f64 {
        let mut acc = 0.0;
        for i in 0..n {
            let mut fx = 0.0;
            for (j, &zj) in z.iter().enumerate() {
                fx += zj * basis.eigenvectors[(i, j)];
            }
            let r = dataset.y[i] - fx;
            acc -= r * r;
        }
        acc / (2.0 * sigma2)
    };
    let log_prior_z = |z: &[f64]| -> f64 { z.iter().map(|&v| prior.psi.log_density(v)).sum() };

    // Initial state from the prior.
    let mut j = prior.j_prior.sample(&mut rng).min(provider.j_cap);
    let support = prior.h_prior.support(j, d, n_total)?;
    let mut h = sample_from_log_masses(&support, &mut rng);
    let mut basis = provider.basis(h)?;
    j = j.min(basis.j_max());
    let mut z: Vec<f64> = (0..j).map(|_| prior.psi.sample(&mut rng)).collect();
    let mut ll = log_lik(&basis, &z);

    let mut step = params.step_init;
    let mut acc_coeff = 0usize;
    let mut try_coeff = 0usize;
    let mut acc_model = 0usize;
    let mut try_model = 0usize;
    let mut window_acc = 0usize;
    let mut window_try = 0usize;

    let total_iters = params.burnin + n_draws;
    let mut draws = Vec::with_capacity(n_draws);
    let mut draw_mean = DVector::<f64>::zeros(n_total);
    let truth = dataset.cloud.true_values.as_ref();
    let mut draw_losses: Vec<(f64, f64)> = Vec::new();
    let mut visit_counts: HashMap<(usize, u64), usize> = HashMap::new();

    for iter in 0..total_iters {
        // coefficient random walk
        if !z.is_empty() {
            let prop: Vec<f64> = z.iter().map(|&v| v + step * standard_normal(&mut rng)).collect();
            let ll_prop = log_lik(&basis, &prop);
            let log_alpha = ll_prop - ll + log_prior_z(&prop) - log_prior_z(&z);
            try_coeff += 1;
            window_try += 1;
            if rng.gen::<f64>().max(1e-300).ln() < log_alpha {
                z = prop;
                ll = ll_prop;
                acc_coeff += 1;
                window_acc += 1;
            }
        }

        // independence proposal of (J, h, z) from the prior
        let j_prop = prior.j_prior.sample(&mut rng).min(provider.j_cap);
        let support = prior.h_prior.support(j_prop, d, n_total)?;
        let h_prop = sample_from_log_masses(&support, &mut rng);
        let basis_prop = provider.basis(h_prop)?;
        let j_prop = j_prop.min(basis_prop.j_max());
        let z_prop: Vec<f64> = (0..j_prop).map(|_| prior.psi.sample(&mut rng)).collect();
        let ll_prop = log_lik(&basis_prop, &z_prop);
        try_model += 1;
        if rng.gen::<f64>().max(1e-300).ln() < ll_prop - ll {
            j = j_prop;
            h = h_prop;
            basis = basis_prop;
            z = z_prop;
            ll = ll_prop;
            acc_model += 1;
        }

        // step adaptation, frozen after burn-in to keep detailed balance
        if iter < params.burnin {
            if window_try >= 50 {
                let rate = window_acc as f64 / window_try as f64;
                step *= ((rate - params.target_accept) * 1.2).exp();
                step = step.clamp(1e-4, 10.0);
                window_acc = 0;
                window_try = 0;
            }
        } else {
            let f = basis.synthesize(&z);
            draw_mean.axpy(1.0, &f, 1.0);
            if let Some(t) = truth {
                let fv: Vec<f64> = f.iter().copied().collect();
                let tv: Vec<f64> = t.iter().copied().collect();
                draw_losses.push((rms_loss(&fv, &tv, n), rms_loss(&fv, &tv, n_total)));
            }
            *visit_counts.entry((j, h.to_bits())).or_insert(0) += 1;
            draws.push(CoeffDraw { j, h, z: z.clone() });
        }
    }

    if n_draws > 0 {
        draw_mean /= n_draws as f64;
    }
    let coefficient_rate = acc_coeff as f64 / try_coeff.max(1) as f64;
    let model_rate = acc_model as f64 / try_model.max(1) as f64;
    if !(0.05..=0.95).contains(&coefficient_rate) {
        log::warn!("coefficient acceptance rate {coefficient_rate:.3} outside [0.05, 0.95]");
    }

    let total_visits: usize = visit_counts.values().sum();
    let mut table: Vec<ModelWeight> = visit_counts
        .into_iter()
        .map(|((j, hbits), count)| ModelWeight {
            j,
            h: f64::from_bits(hbits),
            log_evidence: None,
            posterior_weight: count as f64 / total_visits.max(1) as f64,
        })
        .collect();
    table.sort_by(|a, b| (a.j, a.h.to_bits()).cmp(&(b.j, b.h.to_bits())));

    Ok(PosteriorResult {
        table,
        draws,
        posterior_mean: draw_mean.iter().copied().collect(),
        draw_mean: draw_mean.iter().copied().collect(),
        draw_losses: if truth.is_some() { Some(draw_losses) } else { None },
        acceptance: Some(MhAcceptance {
            coefficient_rate,
            model_rate,
            step_size: step,
        }),
    })
}

/// Empirical `alpha`-quantile (nearest rank) of the per-draw empirical
/// distance to the truth over the labeled vertices; `alpha = 1` gives the
/// maximum. Requires at least 50 draws.
pub fn credible_radius(result: &PosteriorResult, alpha: f64) -> Result<f64> {
    if !(0.0..=1.0).contains(&alpha) {
        return Err(Error::InvalidParam(format!("level must lie in [0,1], got {alpha}")));
    }
    let losses = result
        .draw_losses
        .as_ref()
        .ok_or_else(|| Error::InvalidParam("credible radius needs ground truth losses".into()))?;
    if losses.len() < 50 {
        return Err(Error::TooFewDraws {
            got: losses.len(),
            min: 50,
        });
    }
    let mut ls: Vec<f64> = losses.iter().map(|&(ln, _)| ln).collect();
    ls.sort_by(|a, b| a.partial_cmp(b).unwrap());
    let rank = ((alpha * ls.len() as f64).ceil() as usize).clamp(1, ls.len());
    Ok(ls[rank - 1])
}

/// Same at the all-vertices loss.
pub fn credible_radius_global(result: &PosteriorResult, alpha: f64) -> Result<f64> {
    let losses = result
        .draw_losses
        .as_ref()
        .ok_or_else(|| Error::InvalidParam("credible radius needs ground truth losses".into()))?;
    if losses.len() < 50 {
        return Err(Error::TooFewDraws {
            got: losses.len(),
            min: 50,
        });
    }
    let mut ls: Vec<f64> = losses.iter().map(|&(_, ln)| ln).collect();
    ls.sort_by(|a, b| a.partial_cmp(b).unwrap());
    let rank = ((alpha * ls.len() as f64).ceil() as usize).clamp(1, ls.len());
    Ok(ls[rank - 1])
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::graph::build_graph;
    use crate::manifold::{sample_cloud, Density, ManifoldKind, ManifoldSpec, TruthFamily};
    use approx::assert_abs_diff_eq;

    fn circle_setup(
        n: usize,
        sigma: f64,
        seed: u64,
        j_cap: usize,
    ) -> (RegressionDataset, BasisProvider) {
        let spec = ManifoldSpec::new(ManifoldKind::Circle, 2, Density::Uniform, seed);
        let cloud = sample_cloud(&spec, n)
            .unwrap()
            .with_truth(TruthFamily::Trig { k: 2 })
            .unwrap();
        let provider = BasisProvider::new(cloud.clone(), j_cap);
        let ds = RegressionDataset::synthetic(cloud, n, sigma, seed ^ 0x11).unwrap();
        (ds, provider)
    }

    #[test]
    fn prior_draw_is_orthogonal_to_higher_modes() {
        let (_, mut provider) = circle_setup(60, 0.1, 3, 10);
        let prior = PriorSpec {
            psi: Psi::Gaussian { s2: 1.0 },
            j_prior: JPrior::Fixed { j: 2 },
            h_prior: HPrior::Fixed { h: 0.8 },
        };
        let (j, h, f) = sample_prior(&prior, &mut provider, 5).unwrap();
        assert_eq!(j, 2);
        let basis = provider.basis(h).unwrap();
        let u3: Vec<f64> = basis.eigenvectors.column(2).iter().copied().collect();
        let g = crate::graph::build_graph(&provider.cloud, h).unwrap();
        let ip = crate::graph::inner_nu(&g, f.as_slice(), &u3).unwrap();
        assert!(ip.abs() <= 1e-8);
    }

    #[test]
    fn geometric_prior_pmf_matches_monte_carlo() {
        let p = 0.5;
        let prior = JPrior::Geometric { p };
        let mut rng = rng_from_seed(9);
        let m = 100_000usize;
        let mut counts = [0usize; 6];
        for _ in 0..m {
            let j = prior.sample(&mut rng);
            if j <= 6 {
                counts[j - 1] += 1;
            }
        }
        for j in 1..=6usize {
            let pmf = prior.log_pmf(j).exp(); // 0.5^j at p = 0.5
            assert_abs_diff_eq!(pmf, 0.5f64.powi(j as i32), epsilon = 1e-12);
            let freq = counts[j - 1] as f64 / m as f64;
            let se = (pmf * (1.0 - pmf) / m as f64).sqrt();
            assert!(
                (freq - pmf).abs() <= 3.0 * se + 1e-4,
                "j={j}: freq {freq} vs pmf {pmf}"
            );
        }
    }

    #[test]
    fn fixed_j_prior_rejects_zero() {
        assert!(JPrior::Fixed { j: 0 }.validate().is_err());
        assert!(JPrior::Fixed { j: 1 }.validate().is_ok());
    }

    #[test]
    fn evidence_matches_quadrature_on_scalar_model() {
        // J = 1, n = 1: evidence is N(y | 0, sigma^2 + s2 a^2) with
        // a = u_1(x_1); cross-check against trapezoid quadrature over z.
        let (mut ds, mut provider) = circle_setup(1, 0.7, 21, 1);
        ds.y = vec![0.42];
        let basis = provider.basis(0.5).unwrap();
        let a = basis.eigenvectors[(0, 0)];
        let s2 = 1.3;
        let got = log_evidence_gaussian(&ds, &basis, 1, s2).unwrap();

        let var = 0.49 + s2 * a * a;
        let closed = -0.5 * (2.0 * std::f64::consts::PI * var).ln() - 0.5 * 0.42 * 0.42 / var;
        assert_abs_diff_eq!(got, closed, epsilon = 1e-10);

        // quadrature oracle
        let m = 400_001usize;
        let lo = -12.0 * s2.sqrt();
        let hi = 12.0 * s2.sqrt();
        let dz = (hi - lo) / (m - 1) as f64;
        let mut acc = 0.0;
        for k in 0..m {
            let zv = lo + k as f64 * dz;
            let lik = (-0.5 * (0.42 - a * zv) * (0.42 - a * zv) / 0.49).exp()
                / (2.0 * std::f64::consts::PI * 0.49).sqrt();
            let pri = (-0.5 * zv * zv / s2).exp() / (2.0 * std::f64::consts::PI * s2).sqrt();
            let w = if k == 0 || k == m - 1 { 0.5 } else { 1.0 };
            acc += w * lik * pri * dz;
        }
        assert!((got - acc.ln()).abs() <= 1e-8, "{got} vs {}", acc.ln());
    }

    #[test]
    fn evidence_limits() {
        let (ds, mut provider) = circle_setup(30, 0.5, 4, 8);
        let basis = provider.basis(0.8).unwrap();
        // s2 -> 0 collapses the prior onto the zero function
        let ev = log_evidence_gaussian(&ds, &basis, 4, 1e-14).unwrap();
        let null: f64 = ds
            .y
            .iter()
            .map(|&y| {
                -0.5 * (2.0 * std::f64::consts::PI * 0.25).ln() - 0.5 * y * y / 0.25
            })
            .sum();
        assert!((ev - null).abs() < 1e-6, "{ev} vs {null}");
    }

    #[test]
    fn evidence_ignores_vanishing_basis_vector() {
        // appending a column that is zero on all labeled rows must not move
        // the evidence
        let (ds, mut provider) = circle_setup(25, 0.4, 6, 6);
        let basis = provider.basis(0.9).unwrap();
        let ev_j = log_evidence_gaussian(&ds, &basis, 3, 0.8).unwrap();

        let mut doctored = (*basis).clone();
        let n = doctored.n();
        let mut bigger = nalgebra::DMatrix::zeros(n, 4);
        bigger.view_mut((0, 0), (n, 3)).copy_from(&doctored.eigenvectors.columns(0, 3));
        // fourth column: zero at labeled vertices (all of them here), which
        // models an irrelevant direction
        doctored.eigenvectors = bigger;
        doctored.eigenvalues = vec![
            basis.eigenvalues[0],
            basis.eigenvalues[1],
            basis.eigenvalues[2],
            basis.eigenvalues[2] + 1.0,
        ];
        let ev_j1 = log_evidence_gaussian(&ds, &doctored, 4, 0.8).unwrap();
        assert!((ev_j - ev_j1).abs() <= 1e-10, "{ev_j} vs {ev_j1}");
    }

    #[test]
    fn single_cell_grid_has_unit_weight() {
        let (ds, mut provider) = circle_setup(40, 0.3, 7, 6);
        let prior = PriorSpec {
            psi: Psi::Gaussian { s2: 1.0 },
            j_prior: JPrior::Fixed { j: 4 },
            h_prior: HPrior::Fixed { h: 0.7 },
        };
        let res = posterior_gaussian(&ds, &prior, &mut provider, 60, 1).unwrap();
        assert_eq!(res.table.len(), 1);
        assert_abs_diff_eq!(res.table[0].posterior_weight, 1.0, epsilon = 1e-12);
    }

    #[test]
    fn flat_likelihood_recovers_prior_weights() {
        // sigma enormous: posterior weights converge to the prior weights
        let (mut ds, mut provider) = circle_setup(30, 0.3, 8, 5);
        let norm_y = ds.y.iter().map(|v| v * v).sum::<f64>().sqrt();
        ds.sigma = 1e6 * norm_y.max(1.0);
        let prior = PriorSpec {
            psi: Psi::Gaussian { s2: 1.0 },
            j_prior: JPrior::Geometric { p: 0.4 },
            h_prior: HPrior::Fixed { h: 0.8 },
        };
        let res = posterior_gaussian(&ds, &prior, &mut provider, 0, 1).unwrap();
        let mut prior_mass = 0.0;
        for row in &res.table {
            prior_mass += JPrior::Geometric { p: 0.4 }.log_pmf(row.j).exp();
        }
        for row in &res.table {
            let expect = (JPrior::Geometric { p: 0.4 }.log_pmf(row.j)).exp() / prior_mass;
            assert!(
                (row.posterior_weight - expect).abs() <= 1e-3,
                "J={} weight {} vs prior {}",
                row.j,
                row.posterior_weight,
                expect
            );
        }
    }

    #[test]
    fn informative_data_selects_sufficient_rank() {
        // f0 = u_2-ish signal: mass on J >= 2 should dominate at small noise
        let (mut ds, mut provider) = circle_setup(120, 0.01, 12, 3);
        let basis = provider.basis(0.6).unwrap();
        let u2: Vec<f64> = basis.eigenvectors.column(1).iter().copied().collect();
        let mut rng = rng_from_seed(77);
        ds.y = (0..120).map(|i| u2[i] + 0.01 * standard_normal(&mut rng)).collect();
        ds.cloud.true_values = Some(DVector::from_column_slice(&u2));
        let prior = PriorSpec {
            psi: Psi::Gaussian { s2: 1.0 },
            j_prior: JPrior::Geometric { p: 0.5 },
            h_prior: HPrior::Fixed { h: 0.6 },
        };
        let res = posterior_gaussian(&ds, &prior, &mut provider, 0, 1).unwrap();
        let mass_ge2: f64 = res
            .table
            .iter()
            .filter(|r| r.j >= 2)
            .map(|r| r.posterior_weight)
            .sum();
        assert!(mass_ge2 > 0.95, "mass on J >= 2 is {mass_ge2}");
    }

    #[test]
    fn posterior_mean_two_routes_and_draw_consistency() {
        let (ds, mut provider) = circle_setup(80, 0.2, 13, 6);
        let prior = PriorSpec {
            psi: Psi::Gaussian { s2: 1.5 },
            j_prior: JPrior::Fixed { j: 5 },
            h_prior: HPrior::Fixed { h: 0.7 },
        };
        let res = posterior_gaussian(&ds, &prior, &mut provider, 4000, 3).unwrap();

        // ridge route: m = (U^T U + sigma^2/s2 I)^{-1} U^T y via full solve
        let basis = provider.basis(0.7).unwrap();
        let u = labeled_design(&basis, 80, 5);
        let mut a = u.transpose() * &u;
        for k in 0..5 {
            a[(k, k)] += ds.sigma * ds.sigma / 1.5;
        }
        let b = u.transpose() * DVector::from_column_slice(&ds.y);
        let m = a.lu().solve(&b).unwrap();
        let ridge_mean = basis.synthesize(m.as_slice());
        for x in 0..80 {
            assert!(
                (res.posterior_mean[x] - ridge_mean[x]).abs() <= 1e-8,
                "vertex {x}"
            );
        }

        // draw average approaches the exact mean
        let diff: f64 = (0..80)
            .map(|x| (res.draw_mean[x] - res.posterior_mean[x]).powi(2))
            .sum::<f64>()
            .sqrt();
        assert!(diff < 0.15, "draw mean off by {diff}");
    }

    #[test]
    fn mixture_j_marginal_matches_draw_frequencies() {
        let (ds, mut provider) = circle_setup(90, 0.15, 14, 6);
        let prior = PriorSpec {
            psi: Psi::Gaussian { s2: 1.0 },
            j_prior: JPrior::Geometric { p: 0.35 },
            h_prior: HPrior::Fixed { h: 0.7 },
        };
        let n_draws = 6000;
        let res = posterior_gaussian(&ds, &prior, &mut provider, n_draws, 5).unwrap();
        let marg = res.j_marginal();
        let mut freq: HashMap<usize, f64> = HashMap::new();
        for d in &res.draws {
            *freq.entry(d.j).or_insert(0.0) += 1.0 / n_draws as f64;
        }
        for (j, &p) in &marg {
            let f = freq.get(j).copied().unwrap_or(0.0);
            let se = (p * (1.0 - p) / n_draws as f64).sqrt();
            assert!(
                (f - p).abs() <= 4.0 * se + 2e-3,
                "J={j}: freq {f} vs weight {p}"
            );
        }
    }

    #[test]
    fn mh_matches_conjugate_posterior_mean() {
        let (ds, mut provider) = circle_setup(60, 0.3, 15, 4);
        let prior = PriorSpec {
            psi: Psi::Gaussian { s2: 1.0 },
            j_prior: JPrior::Fixed { j: 4 },
            h_prior: HPrior::Fixed { h: 0.8 },
        };
        let exact = posterior_gaussian(&ds, &prior, &mut provider, 0, 1).unwrap();

        // several independent chains give an honest Monte Carlo s.e.
        let chains = 8;
        let per_chain = 3000;
        let mut chain_means: Vec<Vec<f64>> = Vec::new();
        for c in 0..chains {
            let res = posterior_mh(
                &ds,
                &prior,
                &mut provider,
                per_chain,
                &MhParams::default(),
                100 + c,
            )
            .unwrap();
            let mut zbar = vec![0.0; 4];
            for d in &res.draws {
                for k in 0..4 {
                    zbar[k] += d.z[k] / per_chain as f64;
                }
            }
            chain_means.push(zbar);
        }
        let basis = provider.basis(0.8).unwrap();
        let path = GaussianPath::build(&ds, &basis, 4, 1.0).unwrap();
        let exact_mean = path.conditional_mean(4);
        for k in 0..4 {
            let vals: Vec<f64> = chain_means.iter().map(|m| m[k]).collect();
            let mean = vals.iter().sum::<f64>() / chains as f64;
            let var = vals.iter().map(|v| (v - mean).powi(2)).sum::<f64>() / (chains - 1) as f64;
            let se = (var / chains as f64).sqrt();
            assert!(
                (mean - exact_mean[k]).abs() <= 3.0 * se.max(1e-4),
                "coeff {k}: {mean} vs {} (se {se})",
                exact_mean[k]
            );
        }
        let _ = exact;
    }

    #[test]
    fn mh_prior_recovery_under_flat_likelihood() {
        // sigma huge: the chain's coefficient marginal must match the prior
        // law (KS test at the 1% level on thinned draws)
        let (mut ds, mut provider) = circle_setup(30, 0.3, 16, 2);
        ds.sigma = 1e7;
        for psi in [Psi::Gaussian { s2: 1.0 }, Psi::Laplace { b: 0.8 }] {
            let prior = PriorSpec {
                psi,
                j_prior: JPrior::Fixed { j: 2 },
                h_prior: HPrior::Fixed { h: 0.9 },
            };
            let res = posterior_mh(&ds, &prior, &mut provider, 30_000, &MhParams::default(), 9)
                .unwrap();
            let mut zs: Vec<f64> = res.draws.iter().step_by(15).map(|d| d.z[0]).collect();
            zs.sort_by(|a, b| a.partial_cmp(b).unwrap());
            let m = zs.len() as f64;
            let mut ks: f64 = 0.0;
            for (i, &zv) in zs.iter().enumerate() {
                let f = psi.cdf(zv);
                ks = ks.max((f - i as f64 / m).abs()).max(((i + 1) as f64 / m - f).abs());
            }
            let crit = 1.63 / m.sqrt(); // 1% asymptotic critical value
            assert!(ks < crit, "{psi:?}: KS {ks} vs {crit}");
        }
    }

    #[test]
    fn mh_sign_flip_symmetry() {
        let (ds, mut provider) = circle_setup(50, 0.25, 18, 3);
        let prior = PriorSpec {
            psi: Psi::Laplace { b: 1.0 },
            j_prior: JPrior::Fixed { j: 3 },
            h_prior: HPrior::Fixed { h: 0.8 },
        };
        let res_pos = posterior_mh(&ds, &prior, &mut provider, 20_000, &MhParams::default(), 31)
            .unwrap();
        let mut flipped = ds.clone();
        for y in flipped.y.iter_mut() {
            *y = -*y;
        }
        flipped.cloud.true_values = ds.cloud.true_values.as_ref().map(|t| -t);
        let res_neg = posterior_mh(&flipped, &prior, &mut provider, 20_000, &MhParams::default(), 31)
            .unwrap();
        let n = ds.n_total();
        let norm: f64 = (0..n)
            .map(|x| (res_pos.posterior_mean[x] + res_neg.posterior_mean[x]).powi(2))
            .sum::<f64>()
            .sqrt()
            / (n as f64).sqrt();
        // Monte Carlo error only
        assert!(norm < 0.08, "asymmetry {norm}");
    }

    #[test]
    fn dyadic_masses_sum_to_one_and_match_sampling() {
        let masses = inverse_gamma_discretized_h(1.0, 1.0, 0.1, 3).unwrap();
        assert_eq!(masses.len(), 4);
        let total: f64 = masses.iter().sum();
        assert_abs_diff_eq!(total, 1.0, epsilon = 1e-12);

        assert_eq!(inverse_gamma_discretized_h(1.0, 1.0, 0.1, 0).unwrap(), vec![1.0]);

        // Monte Carlo oracle from inverse-gamma draws
        use rand_distr::{Distribution, Gamma};
        let gamma = Gamma::new(1.0, 1.0).unwrap(); // shape 1, scale 1 = rate 1
        let mut rng = rng_from_seed(4);
        let m = 1_000_000usize;
        let mut counts = vec![0usize; 4];
        for _ in 0..m {
            let g: f64 = gamma.sample(&mut rng);
            let ig = 1.0 / g; // IG(1, 1)
            let cell = if ig < 0.2 {
                0
            } else if ig < 0.4 {
                1
            } else if ig < 0.8 {
                2
            } else {
                3
            };
            counts[cell] += 1;
        }
        for l in 0..4 {
            let freq = counts[l] as f64 / m as f64;
            let se = (masses[l] * (1.0 - masses[l]) / m as f64).sqrt();
            assert!(
                (freq - masses[l]).abs() <= 3.0 * se + 1e-4,
                "cell {l}: {freq} vs {}",
                masses[l]
            );
        }
    }

    #[test]
    fn improper_bandwidth_mass_is_rejected() {
        assert!(inverse_gamma_discretized_h(0.0, 1.0, 0.1, 3).is_err());
    }

    #[test]
    fn sieve_tail_bound_monte_carlo() {
        // P(max_j |Z_j| > z) <= J exp(-b1 z^{b2}) + 3 s.e.
        let j = 8usize;
        let m = 100_000usize;
        for psi in [Psi::Gaussian { s2: 1.0 }, Psi::Laplace { b: 1.0 }] {
            let (b1, b2) = psi.tail_exponents();
            let mut rng = rng_from_seed(19);
            for z in [2.0f64, 3.0, 4.0] {
                let mut hits = 0usize;
                for _ in 0..m {
                    let mut worst = 0.0f64;
                    for _ in 0..j {
                        worst = worst.max(psi.sample(&mut rng).abs());
                    }
                    if worst > z {
                        hits += 1;
                    }
                }
                let p_hat = hits as f64 / m as f64;
                let se = (p_hat * (1.0 - p_hat) / m as f64).sqrt();
                let bound = (j as f64) * (-b1 * z.powf(b2)).exp();
                assert!(
                    p_hat <= bound + 3.0 * se + 1e-9,
                    "{psi:?} z={z}: {p_hat} vs bound {bound}"
                );
            }
        }
    }

    #[test]
    fn credible_radius_edge_cases() {
        let mut res = PosteriorResult {
            table: vec![],
            draws: vec![],
            posterior_mean: vec![],
            draw_mean: vec![],
            draw_losses: Some(vec![(0.0, 0.0); 100]),
            acceptance: None,
        };
        assert_eq!(credible_radius(&res, 0.9).unwrap(), 0.0);
        res.draw_losses = Some((1..=100).map(|k| (k as f64, k as f64)).collect());
        assert_eq!(credible_radius(&res, 1.0).unwrap(), 100.0);
        assert_eq!(credible_radius(&res, 0.5).unwrap(), 50.0);
        res.draw_losses = Some(vec![(1.0, 1.0); 10]);
        assert!(matches!(
            credible_radius(&res, 0.9),
            Err(Error::TooFewDraws { .. })
        ));
    }

    #[test]
    fn deterministic_h_of_j_support() {
        let hp = HPrior::DeterministicOfJ { tau: 1.0, h0: 2.0 };
        let sup = hp.support(16, 2, 1000).unwrap();
        assert_eq!(sup.len(), 1);
        let ln_n = (1000f64).ln();
        assert_abs_diff_eq!(
            sup[0].0,
            2.0 * (16f64).powf(-0.5) / ln_n.powf(0.5),
            epsilon = 1e-12
        );
    }

    #[test]
    fn dyadic_level_count() {
        assert_eq!(dyadic_levels(0.1, 1.0), 3); // 0.8 <= 1 < 1.6
        assert_eq!(dyadic_levels(0.5, 1.0), 1);
        assert_eq!(dyadic_levels(2.0, 1.0), 0);
    }
}
