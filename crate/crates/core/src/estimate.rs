//! Per-region maximum-likelihood estimation of the squared-exponential
//! parameters from high-resolution residuals, the closed-form variance
//! estimator for the blurred sensor, and the FWHM → blur-width conversion.
//!
//! The likelihood of a region with pixels x_1..x_n observed at T times is
//!
//! ```text
//! L(σ, ℓ) = Π_t N(y_t; 0, K + ν I),   K_ij = σ² exp(-d_ij²/(2ℓ²))
//! ```
//!
//! with times treated as independent. The negative log-likelihood is
//! minimized over (log σ, log ℓ) with a BFGS quasi-Newton iteration and
//! box bounds; one Cholesky factorization is shared across the T terms.

use nalgebra::{DMatrix, DVector};
use rayon::prelude::*;
use serde::Serialize;

use crate::grid::RasterStack;
use crate::partition::{Partition, BACKGROUND};
use crate::{Error, Result};

const LN_2PI: f64 = 1.8378770664093453;

/// FWHM → Gaussian standard deviation factor, 2·sqrt(2 ln 2).
pub const FWHM_FACTOR: f64 = 2.3548200450309493;

/// Converts a point-spread-function FWHM in meters to a Gaussian standard
/// deviation in target-grid pixels:
/// `fwhm_m / (target_px_m * 2 sqrt(2 ln 2))`.
///
/// `native_px_m` is the sensor's own pixel size; the intermediate value
/// `fwhm_m / (native_px_m * 2 sqrt(2 ln 2))` is the blur width in native
/// pixels, rescaled by `native_px_m / target_px_m` onto the target grid.
pub fn sigma_blur_from_fwhm(fwhm_m: f64, native_px_m: f64, target_px_m: f64) -> Result<f64> {
    for (name, v) in [
        ("fwhm_m", fwhm_m),
        ("native_px_m", native_px_m),
        ("target_px_m", target_px_m),
    ] {
        if !(v > 0.0) || !v.is_finite() {
            return Err(Error::InvalidArgument(format!(
                "{name} must be positive and finite, got {v}"
            )));
        }
    }
    Ok(fwhm_m / (target_px_m * FWHM_FACTOR))
}

/// Configuration of the per-region maximum-likelihood fit.
#[derive(Debug, Clone)]
pub struct MleConfig {
    /// Diagonal nugget added to every covariance matrix.
    pub nugget: f64,
    pub max_iter: usize,
    /// Convergence threshold on the projected gradient norm in
    /// (log σ, log ℓ).
    pub grad_tol: f64,
    /// Initial length scale in pixels.
    pub init_ell: f64,
    /// Initial σ; defaults to the pooled sample standard deviation of the
    /// region residuals.
    pub init_sigma: Option<f64>,
    /// Box bounds (min, max) for ℓ in pixels.
    pub ell_bounds: (f64, f64),
    /// Box bounds (min, max) for σ in field units.
    pub sigma_bounds: (f64, f64),
}

impl Default for MleConfig {
    fn default() -> Self {
        MleConfig {
            nugget: crate::bdgp::DEFAULT_NUGGET,
            max_iter: 100,
            grad_tol: 1e-3,
            init_ell: 3.0,
            init_sigma: None,
            ell_bounds: (0.3, 100.0),
            sigma_bounds: (1e-4, 1e4),
        }
    }
}

impl MleConfig {
    pub fn validate(&self) -> Result<()> {
        if !(self.nugget >= 0.0) {
            return Err(Error::InvalidArgument("nugget must be non-negative".into()));
        }
        for (name, (lo, hi)) in [("ell_bounds", self.ell_bounds), ("sigma_bounds", self.sigma_bounds)] {
            if !(lo > 0.0) || !(hi > lo) {
                return Err(Error::InvalidArgument(format!(
                    "{name} must satisfy 0 < min < max, got ({lo}, {hi})"
                )));
            }
        }
        if !(self.grad_tol > 0.0) {
            return Err(Error::InvalidArgument("grad_tol must be positive".into()));
        }
        Ok(())
    }
}

/// Residual observations of one region: the pairwise squared distances of
/// its pixels (in pixels²) and one residual vector per time.
#[derive(Debug, Clone)]
pub struct RegionData {
    region_id: u32,
    sq_dists: DMatrix<f64>,
    y: Vec<DVector<f64>>,
}

impl RegionData {
    pub fn new(region_id: u32, sq_dists: DMatrix<f64>, y: Vec<DVector<f64>>) -> Result<Self> {
        let n = sq_dists.nrows();
        if sq_dists.ncols() != n || n == 0 {
            return Err(Error::InvalidArgument(
                "squared-distance matrix must be square and non-empty".into(),
            ));
        }
        if y.is_empty() {
            return Err(Error::InvalidArgument("need at least one residual vector".into()));
        }
        for (t, v) in y.iter().enumerate() {
            if v.len() != n {
                return Err(Error::InvalidArgument(format!(
                    "residual vector {t} has {} entries for {n} pixels",
                    v.len()
                )));
            }
        }
        Ok(RegionData {
            region_id,
            sq_dists,
            y,
        })
    }

    /// Collects the residuals of `label` from a stack, keeping the pixels
    /// that are valid in every layer. Returns None when no pixel qualifies.
    pub fn from_stack(partition: &Partition, label: u32, stack: &RasterStack) -> Result<Option<Self>> {
        if !partition.geom().same_dims(stack.geom()) {
            return Err(Error::GeometryMismatch(format!(
                "partition is {}x{}, stack is {}x{}",
                partition.geom().n_rows,
                partition.geom().n_cols,
                stack.geom().n_rows,
                stack.geom().n_cols
            )));
        }
        let pixels: Vec<usize> = partition
            .pixels_of(label)?
            .into_iter()
            .filter(|&idx| stack.layers().iter().all(|l| l.is_valid_idx(idx)))
            .collect();
        if pixels.is_empty() {
            return Ok(None);
        }
        let geom = stack.geom();
        let n = pixels.len();
        let sq_dists = DMatrix::from_fn(n, n, |i, j| geom.pixel_sq_distance(pixels[i], pixels[j]));
        let y = stack
            .layers()
            .iter()
            .map(|layer| DVector::from_iterator(n, pixels.iter().map(|&idx| layer.get_idx(idx))))
            .collect();
        Ok(Some(RegionData {
            region_id: label,
            sq_dists,
            y,
        }))
    }

    pub fn region_id(&self) -> u32 {
        self.region_id
    }

    pub fn n_pixels(&self) -> usize {
        self.sq_dists.nrows()
    }

    pub fn n_times(&self) -> usize {
        self.y.len()
    }

    pub fn residuals(&self) -> &[DVector<f64>] {
        &self.y
    }

    /// Pooled sample standard deviation over all pixels and times (around
    /// zero — these are residuals).
    pub fn pooled_std(&self) -> f64 {
        let n = (self.n_pixels() * self.n_times()) as f64;
        let ss: f64 = self.y.iter().map(|v| v.dot(v)).sum();
        (ss / n).sqrt()
    }

    fn covariance(&self, sigma: f64, ell: f64, nugget: f64) -> DMatrix<f64> {
        let s2 = sigma * sigma;
        let inv_2l2 = 1.0 / (2.0 * ell * ell);
        let mut k = self.sq_dists.map(|d2| s2 * (-d2 * inv_2l2).exp());
        for i in 0..k.nrows() {
            k[(i, i)] += nugget;
        }
        k
    }
}

/// Negative log-likelihood of a region under the squared-exponential model,
/// summed over the independent time slices.
pub fn neg_log_lik_region(data: &RegionData, sigma: f64, ell: f64, nugget: f64) -> Result<f64> {
    if !(sigma > 0.0) || !(ell > 0.0) {
        return Err(Error::InvalidArgument(format!(
            "parameters must be positive: sigma={sigma}, ell={ell}"
        )));
    }
    let k = data.covariance(sigma, ell, nugget);
    let chol = nalgebra::Cholesky::new(k).ok_or_else(|| {
        Error::Numeric(format!(
            "Cholesky failed for region {} at sigma={sigma:.4e}, ell={ell:.4e}",
            data.region_id
        ))
    })?;
    let log_det: f64 = 2.0 * chol.l_dirty().diagonal().iter().map(|v| v.ln()).sum::<f64>();
    let n = data.n_pixels() as f64;
    let mut nll = data.n_times() as f64 * 0.5 * (log_det + n * LN_2PI);
    for y in data.residuals() {
        let alpha = chol.solve(y);
        nll += 0.5 * y.dot(&alpha);
    }
    Ok(nll)
}

/// Negative log-likelihood together with its gradient in (log σ, log ℓ).
///
/// With ∂K/∂logσ = 2(K - νI) and (∂K/∂logℓ)_ij = K⁰_ij d_ij²/ℓ², the
/// gradient of each time term is ½ tr(K⁻¹ ∂K) - ½ αᵀ ∂K α, α = K⁻¹ y.
pub fn neg_log_lik_grad_region(
    data: &RegionData,
    sigma: f64,
    ell: f64,
    nugget: f64,
) -> Result<(f64, [f64; 2])> {
    if !(sigma > 0.0) || !(ell > 0.0) {
        return Err(Error::InvalidArgument(format!(
            "parameters must be positive: sigma={sigma}, ell={ell}"
        )));
    }
    let k = data.covariance(sigma, ell, nugget);
    let n = data.n_pixels();
    let t_count = data.n_times() as f64;
    let chol = nalgebra::Cholesky::new(k.clone()).ok_or_else(|| {
        Error::Numeric(format!(
            "Cholesky failed for region {} at sigma={sigma:.4e}, ell={ell:.4e}",
            data.region_id
        ))
    })?;
    let log_det: f64 = 2.0 * chol.l_dirty().diagonal().iter().map(|v| v.ln()).sum::<f64>();
    let k_inv = chol.inverse();

    // trace terms
    let tr_kinv = k_inv.trace();
    let tr_dsigma = 2.0 * (n as f64 - nugget * tr_kinv);
    let inv_l2 = 1.0 / (ell * ell);
    let mut tr_dell = 0.0;
    for i in 0..n {
        for j in 0..n {
            // K⁰_ij is K_ij without the nugget on the diagonal
            let k0 = k[(i, j)] - if i == j { nugget } else { 0.0 };
            tr_dell += k_inv[(i, j)] * k0 * data.sq_dists[(i, j)] * inv_l2;
        }
    }

    let mut nll = t_count * 0.5 * (log_det + n as f64 * LN_2PI);
    let mut quad_dsigma = 0.0;
    let mut quad_dell = 0.0;
    for y in data.residuals() {
        let alpha = chol.solve(y);
        nll += 0.5 * y.dot(&alpha);
        // αᵀ (2(K-νI)) α = 2(αᵀ y - ν αᵀα), using K α = y
        quad_dsigma += 2.0 * (alpha.dot(y) - nugget * alpha.dot(&alpha));
        let mut q = 0.0;
        for i in 0..n {
            for j in 0..n {
                let k0 = k[(i, j)] - if i == j { nugget } else { 0.0 };
                q += alpha[i] * k0 * data.sq_dists[(i, j)] * inv_l2 * alpha[j];
            }
        }
        quad_dell += q;
    }
    let g_sigma = 0.5 * (t_count * tr_dsigma - quad_dsigma);
    let g_ell = 0.5 * (t_count * tr_dell - quad_dell);
    Ok((nll, [g_sigma, g_ell]))
}

/// Outcome of one region fit.
#[derive(Debug, Clone, Serialize)]
pub struct RegionFit {
    pub region_id: u32,
    /// Estimated σ in field units.
    pub sigma: f64,
    /// Estimated ℓ in pixels.
    pub ell_px: f64,
    pub neg_log_lik: f64,
    pub iterations: usize,
    pub converged: bool,
    /// False for single-pixel regions, where ℓ does not enter the
    /// likelihood and stays at its initial value.
    pub ell_identifiable: bool,
    pub n_pixels: usize,
    pub n_times: usize,
}

/// Per-region fit results in region-id order.
#[derive(Debug, Clone, Serialize)]
pub struct FitReport {
    pub regions: Vec<RegionFit>,
}

impl FitReport {
    pub fn get(&self, region_id: u32) -> Option<&RegionFit> {
        self.regions.iter().find(|r| r.region_id == region_id)
    }
}

#[derive(Clone, Copy)]
struct Bounds {
    lo: [f64; 2],
    hi: [f64; 2],
}

impl Bounds {
    fn clip(&self, p: [f64; 2]) -> [f64; 2] {
        [
            p[0].clamp(self.lo[0], self.hi[0]),
            p[1].clamp(self.lo[1], self.hi[1]),
        ]
    }

    /// Zeroes gradient components that push outside an active bound.
    fn project_gradient(&self, p: [f64; 2], g: [f64; 2]) -> [f64; 2] {
        let mut out = g;
        for i in 0..2 {
            let at_lo = p[i] <= self.lo[i] && g[i] > 0.0;
            let at_hi = p[i] >= self.hi[i] && g[i] < 0.0;
            if at_lo || at_hi {
                out[i] = 0.0;
            }
        }
        out
    }
}

/// Fits (σ, ℓ) of one region by quasi-Newton minimization of the negative
/// log-likelihood over (log σ, log ℓ), clipped to the configured bounds.
/// Non-convergence is reported in the fit record, not as an error.
pub fn fit_region_mle(data: &RegionData, cfg: &MleConfig) -> Result<RegionFit> {
    cfg.validate()?;
    let single_pixel = data.n_pixels() == 1;
    let init_sigma = cfg
        .init_sigma
        .unwrap_or_else(|| data.pooled_std())
        .clamp(cfg.sigma_bounds.0, cfg.sigma_bounds.1);
    let init_ell = cfg.init_ell.clamp(cfg.ell_bounds.0, cfg.ell_bounds.1);

    let bounds = Bounds {
        lo: [cfg.sigma_bounds.0.ln(), cfg.ell_bounds.0.ln()],
        hi: [cfg.sigma_bounds.1.ln(), cfg.ell_bounds.1.ln()],
    };
    // For single-pixel regions ℓ does not enter the likelihood; its gradient
    // is exactly zero and the parameter stays at its start value.
    let mut p = bounds.clip([init_sigma.ln(), init_ell.ln()]);

    let eval = |p: [f64; 2]| -> Result<(f64, [f64; 2])> {
        neg_log_lik_grad_region(data, p[0].exp(), p[1].exp(), cfg.nugget)
    };
    let eval_f = |p: [f64; 2]| -> f64 {
        neg_log_lik_region(data, p[0].exp(), p[1].exp(), cfg.nugget).unwrap_or(f64::INFINITY)
    };

    let (mut f, mut g) = eval(p)?;
    let mut h = [[1.0, 0.0], [0.0, 1.0]]; // inverse Hessian approximation
    let mut iterations = 0;
    let mut converged = false;

    for _ in 0..cfg.max_iter {
        let g_proj = bounds.project_gradient(p, g);
        let gnorm = (g_proj[0] * g_proj[0] + g_proj[1] * g_proj[1]).sqrt();
        if gnorm <= cfg.grad_tol {
            converged = true;
            break;
        }
        iterations += 1;

        let mut dir = [
            -(h[0][0] * g_proj[0] + h[0][1] * g_proj[1]),
            -(h[1][0] * g_proj[0] + h[1][1] * g_proj[1]),
        ];
        let descent = dir[0] * g_proj[0] + dir[1] * g_proj[1];
        if !(descent < 0.0) {
            h = [[1.0, 0.0], [0.0, 1.0]];
            dir = [-g_proj[0], -g_proj[1]];
        }
        // cap the step in log-space to keep the line search sane
        let dir_norm = (dir[0] * dir[0] + dir[1] * dir[1]).sqrt();
        if dir_norm > 2.0 {
            dir = [dir[0] * 2.0 / dir_norm, dir[1] * 2.0 / dir_norm];
        }

        // Armijo backtracking on the clipped step. The extra term tolerates
        // round-off when the expected decrease is near the f64 resolution of
        // the objective, which otherwise stalls the endgame on large NLLs.
        let slope = dir[0] * g_proj[0] + dir[1] * g_proj[1];
        let roundoff = 1e-12 * f.abs().max(1.0);
        let mut step = 1.0;
        let mut p_new = p;
        let mut accepted = false;
        for _ in 0..30 {
            p_new = bounds.clip([p[0] + step * dir[0], p[1] + step * dir[1]]);
            if p_new == p {
                break;
            }
            let f_new = eval_f(p_new);
            if f_new <= f + 1e-4 * step * slope + roundoff {
                accepted = true;
                break;
            }
            step *= 0.5;
        }
        if !accepted {
            // no acceptable step, typically pinned at a bound
            break;
        }

        let (f_new, g_new) = eval(p_new)?;
        let s = [p_new[0] - p[0], p_new[1] - p[1]];
        let yv = [g_new[0] - g[0], g_new[1] - g[1]];
        let sy = s[0] * yv[0] + s[1] * yv[1];
        if sy > 1e-12 {
            // BFGS update of the inverse Hessian
            let rho = 1.0 / sy;
            let hy = [
                h[0][0] * yv[0] + h[0][1] * yv[1],
                h[1][0] * yv[0] + h[1][1] * yv[1],
            ];
            let yhy = yv[0] * hy[0] + yv[1] * hy[1];
            let mut h_new = [[0.0; 2]; 2];
            for i in 0..2 {
                for j in 0..2 {
                    h_new[i][j] = h[i][j] - rho * (s[i] * hy[j] + hy[i] * s[j])
                        + rho * rho * yhy * s[i] * s[j]
                        + rho * s[i] * s[j];
                }
            }
            h = h_new;
        } else {
            h = [[1.0, 0.0], [0.0, 1.0]];
        }
        p = p_new;
        f = f_new;
        g = g_new;
    }
    if !converged {
        let g_proj = bounds.project_gradient(p, g);
        converged = (g_proj[0] * g_proj[0] + g_proj[1] * g_proj[1]).sqrt() <= cfg.grad_tol;
    }

    // report parameters pinned at a box bound as the exact configured bound
    let snap = |v: f64, lo_log: f64, hi_log: f64, lo: f64, hi: f64| {
        if v == lo_log {
            lo
        } else if v == hi_log {
            hi
        } else {
            v.exp()
        }
    };
    let sigma = snap(p[0], bounds.lo[0], bounds.hi[0], cfg.sigma_bounds.0, cfg.sigma_bounds.1);
    let ell = snap(p[1], bounds.lo[1], bounds.hi[1], cfg.ell_bounds.0, cfg.ell_bounds.1);

    Ok(RegionFit {
        region_id: data.region_id(),
        sigma,
        ell_px: ell,
        neg_log_lik: f,
        iterations,
        converged,
        ell_identifiable: !single_pixel,
        n_pixels: data.n_pixels(),
        n_times: data.n_times(),
    })
}

/// Fits every region of the partition (background included when
/// `include_background`) in parallel. Regions without any fully-valid pixel
/// get a non-converged placeholder at the parameter floor.
pub fn fit_all_regions(
    partition: &Partition,
    stack: &RasterStack,
    cfg: &MleConfig,
    include_background: bool,
) -> Result<FitReport> {
    cfg.validate()?;
    let mut labels: Vec<u32> = (1..=partition.n_regions() as u32).collect();
    if include_background {
        labels.insert(0, BACKGROUND);
    }
    let regions = labels
        .par_iter()
        .map(|&label| match RegionData::from_stack(partition, label, stack)? {
            Some(data) => fit_region_mle(&data, cfg),
            None => Ok(RegionFit {
                region_id: label,
                sigma: cfg.sigma_bounds.0,
                ell_px: cfg.init_ell,
                neg_log_lik: f64::NAN,
                iterations: 0,
                converged: false,
                ell_identifiable: false,
                n_pixels: 0,
                n_times: stack.len(),
            }),
        })
        .collect::<Result<Vec<_>>>()?;
    Ok(FitReport { regions })
}

/// Which variance-inflation factor converts the blurred field's variance
/// back to the latent variance.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize)]
#[serde(rename_all = "snake_case")]
pub enum VarianceVariant {
    /// (ℓ² + b²) / ℓ² — the single-convolution spectral factor (default).
    SingleBlur,
    /// (ℓ² + 2b²) / ℓ² — the zero-lag factor of the double convolution.
    DoubleBlur,
}

impl VarianceVariant {
    pub fn inflation(&self, ell: f64, b: f64) -> f64 {
        let l2 = ell * ell;
        match self {
            VarianceVariant::SingleBlur => (l2 + b * b) / l2,
            VarianceVariant::DoubleBlur => (l2 + 2.0 * b * b) / l2,
        }
    }
}

/// Result of the closed-form blurred-sensor variance estimator.
#[derive(Debug, Clone, Copy)]
pub struct SigmaEstimate {
    pub sigma: f64,
    /// True when the sample variance fell below σ_sensor² and the estimate
    /// was floored.
    pub floored: bool,
}

/// Estimates the latent σ of a region from blurred residuals:
/// `σ̂² = (Var̂(y) - σ_sensor²) · inflation(ℓ, b)` with `Var̂` the unbiased
/// sample variance over the region pixels. A non-positive bracket floors
/// the estimate at `sigma_floor`.
pub fn estimate_blurred_sigma(
    y_region: &[f64],
    ell: f64,
    sigma_blur_px: f64,
    sigma_sensor: f64,
    variant: VarianceVariant,
    sigma_floor: f64,
) -> Result<SigmaEstimate> {
    if y_region.len() < 2 {
        return Err(Error::InvalidArgument(format!(
            "variance estimation needs at least 2 pixels, got {}",
            y_region.len()
        )));
    }
    if !(ell > 0.0) {
        return Err(Error::InvalidArgument(format!("ell must be positive, got {ell}")));
    }
    let n = y_region.len() as f64;
    let mean = y_region.iter().sum::<f64>() / n;
    let var = y_region.iter().map(|v| (v - mean) * (v - mean)).sum::<f64>() / (n - 1.0);
    let bracket = var - sigma_sensor * sigma_sensor;
    if bracket <= 0.0 {
        return Ok(SigmaEstimate {
            sigma: sigma_floor,
            floored: true,
        });
    }
    Ok(SigmaEstimate {
        sigma: (bracket * variant.inflation(ell, sigma_blur_px)).sqrt(),
        floored: false,
    })
}

/// Median of per-time σ estimates; the mean of the middle two for even
/// lengths.
pub fn aggregate_sigma_estimates(estimates: &[f64]) -> Result<f64> {
    if estimates.is_empty() {
        return Err(Error::NoValidData("cannot aggregate an empty estimate list".into()));
    }
    let mut sorted = estimates.to_vec();
    sorted.sort_by(|a, b| a.partial_cmp(b).expect("estimates must not be NaN"));
    let n = sorted.len();
    Ok(if n % 2 == 1 {
        sorted[n / 2]
    } else {
        0.5 * (sorted[n / 2 - 1] + sorted[n / 2])
    })
}
