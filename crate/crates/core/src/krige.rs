//! Blur-aware Gaussian process prediction of the latent residual field on
//! the fine grid, with per-pixel posterior variance, per region over
//! dilated neighborhoods.
//!
//! For a target x* in region r and blurred observations y over the region's
//! neighborhood, the posterior is
//!
//! ```text
//! mean(x*) = k*ᵀ (K + σ_sensor² I)⁻¹ y
//! var(x*)  = σ_r² - k*ᵀ (K + σ_sensor² I)⁻¹ k*
//! ```
//!
//! with k* the single-blur cross-covariance and K the double-blur
//! covariance, both assembled blockwise: entries linking pixels of
//! different regions are zero. Because K is then block diagonal and k* is
//! supported on the region-r block alone, observations of other labels
//! inside the neighborhood provably do not influence the result; the solver
//! works on the region-r block directly. `tests` verify this equivalence
//! against the full blockwise assembly.

use nalgebra::{DMatrix, DVector};
use rayon::prelude::*;
use serde::Serialize;

use crate::bdgp::{k_blurred, k_double_blurred, BlurSpec, RegionParams};
use crate::grid::Raster;
use crate::partition::{dilate_pixel_set, Neighborhood, Partition, BACKGROUND};
use crate::{Error, Result};

/// Round-off tolerance on posterior variances: values in (-1e-10, 0) clamp
/// to zero, anything more negative is an error.
pub const VARIANCE_CLAMP: f64 = 1e-10;

#[derive(Debug, Clone)]
pub struct KrigeConfig {
    /// Neighborhood dilation radius as a multiple of σ_blur (default 4).
    pub radius_factor: f64,
    /// Regions with more core pixels are skipped with a warning.
    pub max_region_pixels: usize,
    pub blur: BlurSpec,
    /// Reconstruct the background (road) region as well.
    pub include_background: bool,
}

impl Default for KrigeConfig {
    fn default() -> Self {
        KrigeConfig {
            radius_factor: 4.0,
            max_region_pixels: 20_000,
            blur: BlurSpec {
                sigma_blur_px: 0.0,
                sigma_sensor: 0.0,
            },
            include_background: false,
        }
    }
}

impl KrigeConfig {
    pub fn validate(&self) -> Result<()> {
        if !(self.radius_factor > 0.0) {
            return Err(Error::InvalidArgument("radius_factor must be positive".into()));
        }
        if self.max_region_pixels == 0 {
            return Err(Error::InvalidArgument("max_region_pixels must be at least 1".into()));
        }
        BlurSpec::new(self.blur.sigma_blur_px, self.blur.sigma_sensor)?;
        Ok(())
    }

    /// Dilation radius in pixels.
    pub fn neighborhood_radius_px(&self) -> f64 {
        self.radius_factor * self.blur.sigma_blur_px
    }
}

#[derive(Debug, Clone, Serialize)]
pub struct SkippedRegion {
    pub region_id: u32,
    pub reason: String,
}

/// Posterior mean and variance rasters of the latent residual field.
/// Pixels of skipped or excluded regions are invalid in both.
#[derive(Debug, Clone)]
pub struct KrigeResult {
    pub mean: Raster,
    pub variance: Raster,
    pub skipped_regions: Vec<SkippedRegion>,
}

/// Kriging of one region: posterior mean and variance at each target pixel.
///
/// Observations are the valid pixels of the neighborhood; with the
/// blockwise-zero covariance structure only those sharing the region's
/// label enter the linear system. Targets must lie in the region core.
pub fn krige_region(
    partition: &Partition,
    neighborhood: &Neighborhood,
    obs: &Raster,
    theta: &RegionParams,
    cfg: &KrigeConfig,
    targets: &[usize],
) -> Result<(Vec<f64>, Vec<f64>)> {
    cfg.validate()?;
    let region_id = neighborhood.region_id;
    if theta.n_labels() <= region_id as usize {
        return Err(Error::InvalidArgument(format!(
            "missing parameters for region {region_id}"
        )));
    }
    if !partition.geom().same_dims(obs.geom()) {
        return Err(Error::GeometryMismatch(
            "krige_region: observation raster does not match the partition grid".into(),
        ));
    }
    if neighborhood.core_pixels.len() > cfg.max_region_pixels {
        return Err(Error::InvalidArgument(format!(
            "region {region_id} has {} pixels, above the {} cap",
            neighborhood.core_pixels.len(),
            cfg.max_region_pixels
        )));
    }
    for &t in targets {
        if partition.label_at(t) != region_id {
            return Err(Error::InvalidArgument(format!(
                "target pixel {t} is not in region {region_id}"
            )));
        }
    }

    let sigma = theta.sigma(region_id);
    let ell = theta.ell(region_id);
    let b = cfg.blur.sigma_blur_px;
    let noise = cfg.blur.sigma_sensor * cfg.blur.sigma_sensor;
    let geom = partition.geom();
    let prior_var = sigma * sigma;

    // Valid observations carrying the region's own label; other labels in
    // the neighborhood have zero covariance with the targets and drop out.
    let obs_pixels: Vec<usize> = neighborhood
        .dilated_pixels
        .iter()
        .copied()
        .filter(|&idx| partition.label_at(idx) == region_id && obs.is_valid_idx(idx))
        .collect();

    if obs_pixels.is_empty() {
        // no data: the prior
        return Ok((vec![0.0; targets.len()], vec![prior_var; targets.len()]));
    }

    let n = obs_pixels.len();
    let mut k_mat = DMatrix::<f64>::zeros(n, n);
    for i in 0..n {
        for j in 0..=i {
            let d = geom.pixel_distance(obs_pixels[i], obs_pixels[j]);
            let v = k_double_blurred(d, sigma, ell, b);
            k_mat[(i, j)] = v;
            k_mat[(j, i)] = v;
        }
        k_mat[(i, i)] += noise;
    }
    let chol = nalgebra::Cholesky::new(k_mat).ok_or_else(|| {
        Error::Numeric(format!(
            "Cholesky failed while kriging region {region_id} ({n} observations)"
        ))
    })?;
    let y = DVector::from_iterator(n, obs_pixels.iter().map(|&idx| obs.get_idx(idx)));
    let alpha = chol.solve(&y);
    let l = chol.l_dirty();

    // Noiseless interpolation without change of support reproduces the
    // observation exactly with zero variance; short-circuiting avoids
    // round-off from the (then ill-conditioned) linear system.
    let exact_interpolation = noise == 0.0 && b == 0.0;

    let mut means = Vec::with_capacity(targets.len());
    let mut variances = Vec::with_capacity(targets.len());
    for &target in targets {
        if exact_interpolation && obs.is_valid_idx(target) {
            means.push(obs.get_idx(target));
            variances.push(0.0);
            continue;
        }
        let k_star = DVector::from_iterator(
            n,
            obs_pixels
                .iter()
                .map(|&idx| k_blurred(geom.pixel_distance(target, idx), sigma, ell, b)),
        );
        let mean = k_star.dot(&alpha);
        // var = σ² - ||L⁻¹ k*||²
        let mut v = k_star;
        l.solve_lower_triangular_mut(&mut v);
        let mut var = prior_var - v.dot(&v);
        if var < 0.0 {
            if var > -VARIANCE_CLAMP {
                var = 0.0;
            } else {
                return Err(Error::Numeric(format!(
                    "posterior variance {var:.3e} below the round-off clamp in region {region_id}"
                )));
            }
        }
        means.push(mean);
        variances.push(var);
    }
    Ok((means, variances))
}

/// Kriging of every region into full mean/variance rasters. Regions above
/// the pixel cap are skipped and recorded; the background is skipped unless
/// `include_background`. Region tasks run in parallel and write disjoint
/// pixel sets, so the output does not depend on scheduling.
pub fn krige_all(
    partition: &Partition,
    neighborhoods: &[Neighborhood],
    obs: &Raster,
    theta: &RegionParams,
    cfg: &KrigeConfig,
) -> Result<KrigeResult> {
    cfg.validate()?;
    let n_regions = partition.n_regions();
    if theta.n_labels() != n_regions + 1 {
        return Err(Error::InvalidArgument(format!(
            "parameters cover {} labels but the partition has {} regions plus background",
            theta.n_labels(),
            n_regions
        )));
    }
    if neighborhoods.len() != n_regions {
        return Err(Error::InvalidArgument(format!(
            "expected {} neighborhoods, got {}",
            n_regions,
            neighborhoods.len()
        )));
    }
    for (i, nb) in neighborhoods.iter().enumerate() {
        if nb.region_id != (i + 1) as u32 {
            return Err(Error::InvalidArgument(format!(
                "neighborhood {i} carries region id {}",
                nb.region_id
            )));
        }
    }
    if !partition.geom().same_dims(obs.geom()) {
        return Err(Error::GeometryMismatch(
            "krige_all: observation raster does not match the partition grid".into(),
        ));
    }

    enum Task<'a> {
        Ready(&'a Neighborhood),
        Background(Neighborhood),
    }

    let mut tasks: Vec<Task> = neighborhoods.iter().map(Task::Ready).collect();
    if cfg.include_background {
        let core = partition.background_pixels();
        if !core.is_empty() {
            let dilated =
                dilate_pixel_set(partition.geom(), &core, cfg.neighborhood_radius_px());
            tasks.push(Task::Background(Neighborhood {
                region_id: BACKGROUND,
                core_pixels: core,
                dilated_pixels: dilated,
            }));
        }
    }

    let outcomes: Vec<std::result::Result<(u32, Vec<usize>, Vec<f64>, Vec<f64>), SkippedRegion>> =
        tasks
            .par_iter()
            .map(|task| {
                let nb = match task {
                    Task::Ready(nb) => *nb,
                    Task::Background(nb) => nb,
                };
                if nb.core_pixels.len() > cfg.max_region_pixels {
                    return Ok(Err(SkippedRegion {
                        region_id: nb.region_id,
                        reason: format!(
                            "{} pixels exceed the max_region_pixels cap of {}",
                            nb.core_pixels.len(),
                            cfg.max_region_pixels
                        ),
                    }));
                }
                let (means, vars) =
                    krige_region(partition, nb, obs, theta, cfg, &nb.core_pixels)?;
                Ok(Ok((nb.region_id, nb.core_pixels.clone(), means, vars)))
            })
            .collect::<Result<Vec<_>>>()?;

    let mut mean = Raster::invalid(*partition.geom(), obs.timestamp_days());
    let mut variance = Raster::invalid(*partition.geom(), obs.timestamp_days());
    let mut skipped = Vec::new();
    for outcome in outcomes {
        match outcome {
            Ok((_, pixels, means, vars)) => {
                for ((idx, m), v) in pixels.iter().zip(means).zip(vars) {
                    let (row, col) = partition.geom().row_col(*idx);
                    mean.set(row, col, m)?;
                    variance.set(row, col, v)?;
                }
            }
            Err(skip) => skipped.push(skip),
        }
    }
    skipped.sort_by_key(|s| s.region_id);
    Ok(KrigeResult {
        mean,
        variance,
        skipped_regions: skipped,
    })
}

/// Two posterior standard deviations per pixel; invalid pixels propagate.
pub fn two_sigma_map(result: &KrigeResult) -> Raster {
    let values: Vec<f64> = result
        .variance
        .values()
        .iter()
        .map(|&v| if v.is_nan() { f64::NAN } else { 2.0 * v.sqrt() })
        .collect();
    Raster::from_values(
        *result.variance.geom(),
        values,
        result.variance.timestamp_days(),
    )
    .expect("two-sigma map of non-negative variances is finite")
}
