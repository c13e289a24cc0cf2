//! Frequentist estimators on the eigenmap coordinates.
//!
//! `pcr_le` is principal-components regression on the Laplacian eigenmap: the
//! response vector (zero-padded at unlabeled vertices) is expanded in the
//! `nu`-inner product against the first `J` eigenvectors. `tune_jh` supplies
//! the bandwidth/rank schedule that balances the variance term
//! `sqrt(J ln N / n)` against the approximation bias, and `empirical_rate`
//! turns Monte Carlo loss tables into a fitted convergence exponent.

use nalgebra::DVector;
use serde::{Deserialize, Serialize};
use std::time::Instant;

use crate::manifold::PointCloud;
use crate::spectral::SpectralBasis;
use crate::{Error, Result};

/// Labeled regression data living on the first `n` vertices of an `N`-point
/// cloud.
#[derive(Debug, Clone)]
pub struct RegressionDataset {
    pub cloud: PointCloud,
    /// Responses for vertices `0..n`.
    pub y: Vec<f64>,
    /// Known noise standard deviation.
    pub sigma: f64,
}

impl RegressionDataset {
    /// Synthetic dataset `y_i = f0(x_i) + sigma eps_i` on the first `n`
    /// vertices; the cloud must carry ground truth.
    pub fn synthetic(cloud: PointCloud, n: usize, sigma: f64, seed: u64) -> Result<Self> {
        let total = cloud.len();
        if n < 1 || n > total {
            return Err(Error::InvalidParam(format!(
                "labeled count n={n} must lie in 1..={total}"
            )));
        }
        if sigma < 0.0 {
            return Err(Error::InvalidParam(format!("sigma must be >= 0, got {sigma}")));
        }
        let truth = cloud
            .true_values
            .as_ref()
            .ok_or_else(|| Error::InvalidParam("synthetic dataset needs ground truth".into()))?;
        let mut rng = crate::rng::rng_from_seed(seed);
        let y: Vec<f64> = (0..n)
            .map(|i| truth[i] + sigma * standard_normal(&mut rng))
            .collect();
        Ok(RegressionDataset { cloud, y, sigma })
    }

    pub fn n_labeled(&self) -> usize {
        self.y.len()
    }

    pub fn n_total(&self) -> usize {
        self.cloud.len()
    }

    /// Response vector padded with zeros at unlabeled vertices.
    pub fn padded_y(&self) -> Vec<f64> {
        let mut out = vec![0.0; self.n_total()];
        out[..self.y.len()].copy_from_slice(&self.y);
        out
    }
}

pub(crate) fn standard_normal<R: rand::Rng>(rng: &mut R) -> f64 {
    let u: f64 = rng.gen::<f64>().max(1e-300);
    let v: f64 = rng.gen();
    (-2.0 * u.ln()).sqrt() * (2.0 * std::f64::consts::PI * v).cos()
}

/// Outcome of a single fit.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct FitReport {
    /// Fitted values at every vertex.
    #[serde(skip_serializing_if = "Option::is_none")]
    pub estimate: Option<Vec<f64>>,
    pub j_used: usize,
    pub h_used: f64,
    /// Root mean square error over labeled vertices, against ground truth.
    pub loss_n: Option<f64>,
    /// Same over the whole cloud.
    pub loss_big_n: Option<f64>,
    pub runtime_secs: f64,
}

/// Empirical root-mean-square distance between two vertex functions over the
/// first `n` entries.
pub fn rms_loss(estimate: &[f64], truth: &[f64], n: usize) -> f64 {
    let acc: f64 = (0..n)
        .map(|i| {
            let d = estimate[i] - truth[i];
            d * d
        })
        .sum();
    (acc / n as f64).sqrt()
}

pub(crate) fn losses_against_truth(
    cloud: &PointCloud,
    estimate: &DVector<f64>,
    n_labeled: usize,
) -> (Option<f64>, Option<f64>) {
    match &cloud.true_values {
        None => (None, None),
        Some(truth) => {
            let est: Vec<f64> = estimate.iter().copied().collect();
            let t: Vec<f64> = truth.iter().copied().collect();
            (
                Some(rms_loss(&est, &t, n_labeled)),
                Some(rms_loss(&est, &t, est.len())),
            )
        }
    }
}

/// PCR-LE: `fhat = sum_{j<=J} <u_j | Y>_nu u_j` with the response zero-padded
/// at unlabeled vertices, so the inner products run over labeled vertices
/// with their `nu`-weights.
pub fn pcr_le(dataset: &RegressionDataset, basis: &SpectralBasis, j: usize) -> Result<FitReport> {
    let start = Instant::now();
    if basis.n() != dataset.n_total() {
        return Err(Error::LengthMismatch {
            expected: dataset.n_total(),
            got: basis.n(),
        });
    }
    if j < 1 || j > basis.j_max() {
        return Err(Error::JOutOfRange {
            j,
            j_max: basis.j_max(),
        });
    }
    let padded = dataset.padded_y();
    let coeffs = basis.coefficients(&padded)?;
    let estimate = basis.synthesize(&coeffs[..j]);
    let (loss_n, loss_big_n) = losses_against_truth(&dataset.cloud, &estimate, dataset.n_labeled());
    Ok(FitReport {
        estimate: Some(estimate.iter().copied().collect()),
        j_used: j,
        h_used: basis.h,
        loss_n,
        loss_big_n,
        runtime_secs: start.elapsed().as_secs_f64(),
    })
}

/// Knobs for the tuning rule. The displayed rule carries powers of `ln n` /
/// `ln N` that dominate at desk scale, so each exponent can be overridden
/// and both outputs carry a multiplicative prefactor.
#[derive(Debug, Clone, Copy, Serialize, Deserialize)]
pub struct TuneOverrides {
    /// Replaces the exponent on `ln n` in the bandwidth rule.
    pub h_log_exp: Option<f64>,
    /// Replaces `tau` as the exponent on `ln N` dividing the rank rule.
    pub j_log_exp: Option<f64>,
    pub h_scale: f64,
    pub j_scale: f64,
}

impl Default for TuneOverrides {
    fn default() -> Self {
        TuneOverrides {
            h_log_exp: None,
            j_log_exp: None,
            h_scale: 1.0,
            j_scale: 1.0,
        }
    }
}

/// Rate-balancing schedule
/// `h = n^{-1/(2b+d)} (ln n)^{-(1 - tau - 2 (1 + 2 tau/d) ceil(b/2)) / (2b+d)}`,
/// `J = ceil(h^{-d} / (ln N)^tau)` clamped to `[1, N]`.
pub fn tune_jh(
    n: usize,
    n_total: usize,
    d: usize,
    beta: f64,
    tau: f64,
    overrides: &TuneOverrides,
) -> Result<(usize, f64)> {
    if !(beta > 0.0) {
        return Err(Error::InvalidParam(format!("beta must be positive, got {beta}")));
    }
    if tau <= d as f64 / 2.0 {
        return Err(Error::InvalidParam(format!(
            "tau must exceed d/2 = {}, got {tau}",
            d as f64 / 2.0
        )));
    }
    let df = d as f64;
    let ceil_half_beta = (beta / 2.0).ceil();
    let denom = 2.0 * beta + df;
    let ln_n = (n as f64).ln();
    let ln_big_n = (n_total as f64).ln();

    let h_exp = overrides
        .h_log_exp
        .unwrap_or(-(1.0 - tau - 2.0 * (1.0 + 2.0 * tau / df) * ceil_half_beta) / denom);
    let h = overrides.h_scale * (n as f64).powf(-1.0 / denom) * ln_n.max(1e-12).powf(h_exp);

    let j_exp = overrides.j_log_exp.unwrap_or(tau);
    let j_raw = overrides.j_scale * h.powf(-df) / ln_big_n.max(1e-12).powf(j_exp);
    let j = (j_raw.ceil() as i64).clamp(1, n_total as i64) as usize;
    Ok((j, h))
}

/// Fitted convergence exponent from a Monte Carlo loss table.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct RateFit {
    /// OLS slope of `log(mean loss)` against `log n`.
    pub slope: f64,
    /// Standard error of the slope.
    pub stderr: f64,
    /// Per-`n` mean losses the fit was computed from.
    pub mean_losses: Vec<(usize, f64)>,
}

/// Ordinary least squares of `log(mean loss_n)` on `log n`. Each entry of
/// `losses` is a sample size paired with its replicate losses. Meaningful
/// rate estimates want at least 4 sample sizes and 10 or more replicates
/// each; two distinct sizes is the hard minimum.
pub fn empirical_rate(losses: &[(usize, Vec<f64>)]) -> Result<RateFit> {
    let mut table: Vec<(usize, f64)> = Vec::new();
    for (n, reps) in losses {
        if reps.is_empty() {
            continue;
        }
        let mean = reps.iter().sum::<f64>() / reps.len() as f64;
        if !(mean > 0.0) {
            return Err(Error::DegenerateGrid(format!(
                "mean loss at n={n} is not positive ({mean})"
            )));
        }
        table.push((*n, mean));
    }
    table.sort_by_key(|&(n, _)| n);
    table.dedup_by_key(|&mut (n, _)| n);
    if table.len() < 2 {
        return Err(Error::DegenerateGrid(format!(
            "need at least 2 distinct sample sizes, got {}",
            table.len()
        )));
    }
    let xs: Vec<f64> = table.iter().map(|&(n, _)| (n as f64).ln()).collect();
    let ys: Vec<f64> = table.iter().map(|&(_, m)| m.ln()).collect();
    let (slope, stderr) = ols_slope(&xs, &ys);
    Ok(RateFit {
        slope,
        stderr,
        mean_losses: table,
    })
}

/// Slope and its standard error for simple linear regression.
pub fn ols_slope(xs: &[f64], ys: &[f64]) -> (f64, f64) {
    let n = xs.len() as f64;
    let mx = xs.iter().sum::<f64>() / n;
    let my = ys.iter().sum::<f64>() / n;
    let sxx: f64 = xs.iter().map(|x| (x - mx) * (x - mx)).sum();
    let sxy: f64 = xs.iter().zip(ys).map(|(x, y)| (x - mx) * (y - my)).sum();
    let slope = sxy / sxx;
    if xs.len() <= 2 {
        return (slope, 0.0);
    }
    let intercept = my - slope * mx;
    let ss_res: f64 = xs
        .iter()
        .zip(ys)
        .map(|(x, y)| {
            let r = y - (intercept + slope * x);
            r * r
        })
        .sum();
    let var = ss_res / (n - 2.0) / sxx;
    (slope, var.sqrt())
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::graph::{build_graph, laplacian};
    use crate::manifold::{sample_cloud, Density, ManifoldKind, ManifoldSpec, TruthFamily};
    use crate::spectral::{decompose, project};
    use approx::assert_abs_diff_eq;
    use nalgebra::DMatrix;
    use std::f64::consts::PI;

    fn circle_dataset(n: usize, h: f64, sigma: f64, seed: u64) -> (RegressionDataset, SpectralBasis) {
        let spec = ManifoldSpec::new(ManifoldKind::Circle, 2, Density::Uniform, seed);
        let cloud = sample_cloud(&spec, n)
            .unwrap()
            .with_truth(TruthFamily::Trig { k: 2 })
            .unwrap();
        let op = laplacian(build_graph(&cloud, h).unwrap());
        let basis = decompose(&op, n).unwrap();
        let ds = RegressionDataset::synthetic(cloud, n, sigma, seed ^ 0xabc).unwrap();
        (ds, basis)
    }

    #[test]
    fn full_rank_fit_interpolates() {
        let (ds, basis) = circle_dataset(40, 1.0, 0.3, 5);
        let fit = pcr_le(&ds, &basis, 40).unwrap();
        let est = fit.estimate.unwrap();
        for i in 0..40 {
            assert!((est[i] - ds.y[i]).abs() <= 1e-8);
        }
    }

    #[test]
    fn zero_response_gives_zero_fit() {
        let (mut ds, basis) = circle_dataset(30, 1.0, 0.0, 6);
        ds.y = vec![0.0; 30];
        let fit = pcr_le(&ds, &basis, 7).unwrap();
        for v in fit.estimate.unwrap() {
            assert_eq!(v, 0.0);
        }
    }

    #[test]
    fn larger_j_beats_j_equal_one() {
        let (ds, basis) = circle_dataset(300, 0.6, 0.1, 7);
        let fit12 = pcr_le(&ds, &basis, 12).unwrap();
        let fit1 = pcr_le(&ds, &basis, 1).unwrap();
        assert!(fit12.loss_n.unwrap() < fit1.loss_n.unwrap());
    }

    #[test]
    fn fit_lies_in_span_fixed_point() {
        let (ds, basis) = circle_dataset(100, 0.8, 0.2, 8);
        let fit = pcr_le(&ds, &basis, 9).unwrap();
        let est = fit.estimate.unwrap();
        let reproj = project(&basis, 9, &est).unwrap();
        for x in 0..100 {
            assert!((reproj[x] - est[x]).abs() <= 1e-10);
        }
    }

    #[test]
    fn noise_free_eigenmode_is_recovered() {
        let (mut ds, basis) = circle_dataset(80, 0.8, 0.0, 9);
        let u3: Vec<f64> = basis.eigenvectors.column(2).iter().copied().collect();
        ds.y = u3.clone();
        ds.cloud.true_values = Some(nalgebra::DVector::from_column_slice(&u3));
        for j in [3usize, 5, 20] {
            let fit = pcr_le(&ds, &basis, j).unwrap();
            assert!(fit.loss_n.unwrap() < 1e-8, "J={j}");
        }
    }

    #[test]
    fn loss_monotone_in_j_on_regular_circle() {
        // Equally spaced circle points make mu (hence nu) exactly uniform, so
        // the nu-projection telescopes in the same norm the loss measures.
        let n = 64;
        let mut pts = Vec::with_capacity(2 * n);
        for i in 0..n {
            let t = 2.0 * PI * i as f64 / n as f64;
            pts.push(t.cos());
            pts.push(t.sin());
        }
        let spec = ManifoldSpec::new(ManifoldKind::Circle, 2, Density::Uniform, 0);
        let cloud = PointCloud {
            points: DMatrix::from_row_slice(n, 2, &pts),
            true_values: None,
            holder_beta: None,
            spec,
        }
        .with_truth(TruthFamily::Trig { k: 3 })
        .unwrap();
        let op = laplacian(build_graph(&cloud, 0.5).unwrap());
        let basis = decompose(&op, n).unwrap();
        let truth: Vec<f64> = cloud.true_values.as_ref().unwrap().iter().copied().collect();
        let ds = RegressionDataset {
            cloud,
            y: truth,
            sigma: 0.0,
        };
        let mut prev = f64::INFINITY;
        for j in 1..=n {
            let loss = pcr_le(&ds, &basis, j).unwrap().loss_n.unwrap();
            assert!(loss <= prev + 1e-12, "J={j}: {loss} > {prev}");
            prev = loss;
        }
        assert!(prev < 1e-10);
    }

    #[test]
    fn tuning_rule_closed_form_point() {
        // with the log factors forced to 1: h = n^{-1/3}, J = ceil(h^{-1})
        let ov = TuneOverrides {
            h_log_exp: Some(0.0),
            j_log_exp: Some(0.0),
            ..Default::default()
        };
        let (j, h) = tune_jh(20, 20, 1, 1.0, 1.0, &ov).unwrap();
        assert_abs_diff_eq!(h, (20f64).powf(-1.0 / 3.0), epsilon = 1e-12);
        assert_eq!(j, (1.0 / h).ceil() as usize);
    }

    #[test]
    fn tuning_log_exponent_matches_displayed_rule() {
        // beta=2, d=1, tau=1: exponent on ln n is -(1-1-2*3*1)/5 = 6/5
        let (_, h) = tune_jh(100, 100, 1, 2.0, 1.0, &TuneOverrides::default()).unwrap();
        let ln_n = (100f64).ln();
        let expect = (100f64).powf(-0.2) * ln_n.powf(1.2);
        assert_abs_diff_eq!(h, expect, epsilon = 1e-12);
    }

    #[test]
    fn tuning_monotonicity_and_clamp() {
        // the polynomial part strictly decreases in n (log factors overridden
        // away, since at small n they swamp it)
        let ov = TuneOverrides {
            h_log_exp: Some(0.0),
            ..Default::default()
        };
        let (_, h1) = tune_jh(100, 100, 1, 2.0, 1.0, &ov).unwrap();
        let (_, h2) = tune_jh(200, 200, 1, 2.0, 1.0, &ov).unwrap();
        assert!(h2 < h1);
        let ov = TuneOverrides::default();
        for n in [10usize, 100, 5000] {
            let (j, _) = tune_jh(n, n, 1, 2.0, 1.0, &ov).unwrap();
            assert!(j >= 1 && j <= n);
        }
        assert!(tune_jh(100, 100, 1, 2.0, 0.4, &ov).is_err());
        assert!(tune_jh(100, 100, 1, -1.0, 1.0, &ov).is_err());
    }

    #[test]
    fn rate_fit_exact_power_law() {
        let losses: Vec<(usize, Vec<f64>)> = [100usize, 200, 400, 800]
            .iter()
            .map(|&n| (n, vec![(n as f64).powf(-0.4)]))
            .collect();
        let fit = empirical_rate(&losses).unwrap();
        assert_abs_diff_eq!(fit.slope, -0.4, epsilon = 1e-12);
    }

    #[test]
    fn rate_fit_constant_and_degenerate() {
        let losses: Vec<(usize, Vec<f64>)> = [100usize, 200, 400, 800]
            .iter()
            .map(|&n| (n, vec![2.5, 2.5]))
            .collect();
        let fit = empirical_rate(&losses).unwrap();
        assert_abs_diff_eq!(fit.slope, 0.0, epsilon = 1e-12);
        assert!(empirical_rate(&[(100, vec![1.0])]).is_err());
    }
}
