//! Per-pixel ordinary-least-squares harmonic regression of the seasonal
//! (annual) and daily (diurnal) mean cycle, and residual computation.
//!
//! The fitted mean at pixel (i, j) is
//!
//! ```text
//! μ_ij(t) = β0 + β1 cos(2πt/365) + β2 sin(2πt/365)
//!              + β3 cos(2πt)     + β4 sin(2πt)
//! ```
//!
//! with t in days and the annual/diurnal pairs present per [`HarmonicSpec`].
//! The year length is fixed at 365 days. The fit solves the per-pixel
//! normal equations over the timestamps where the pixel is valid; pixels
//! with fewer observations than coefficients, or with a rank-deficient
//! design, are flagged rather than failing the run.

use std::fs::File;
use std::io::{BufReader, BufWriter, Read, Write};
use std::path::Path;

use nalgebra::{Cholesky, DMatrix, DVector};
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::grid::{GridGeom, Raster, RasterStack, FORMAT_VERSION, RASTER_MAGIC};
use crate::{Error, Result};

pub const DAYS_PER_YEAR: f64 = 365.0;
const TWO_PI: f64 = std::f64::consts::TAU;

/// Which frequencies the regression includes; the intercept is always fit.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct HarmonicSpec {
    pub include_annual: bool,
    pub include_diurnal: bool,
}

impl HarmonicSpec {
    pub const ANNUAL: HarmonicSpec = HarmonicSpec {
        include_annual: true,
        include_diurnal: false,
    };
    pub const ANNUAL_DIURNAL: HarmonicSpec = HarmonicSpec {
        include_annual: true,
        include_diurnal: true,
    };

    /// 1 + 2 per active frequency.
    pub fn n_coeffs(&self) -> usize {
        1 + 2 * (self.include_annual as usize + self.include_diurnal as usize)
    }

    /// Design-matrix row at time `t` (days).
    pub fn design_row(&self, t: f64) -> Vec<f64> {
        let mut row = Vec::with_capacity(self.n_coeffs());
        row.push(1.0);
        if self.include_annual {
            let w = TWO_PI * t / DAYS_PER_YEAR;
            row.push(w.cos());
            row.push(w.sin());
        }
        if self.include_diurnal {
            let w = TWO_PI * t;
            row.push(w.cos());
            row.push(w.sin());
        }
        row
    }
}

/// Per-pixel harmonic coefficients plus a fit-validity flag.
#[derive(Debug, Clone)]
pub struct HarmonicModel {
    geom: GridGeom,
    spec: HarmonicSpec,
    /// Pixel-major coefficient storage: `coeffs[pixel * n_coeffs + k]`.
    coeffs: Vec<f64>,
    fit_valid: Vec<bool>,
}

impl HarmonicModel {
    pub fn geom(&self) -> &GridGeom {
        &self.geom
    }

    pub fn spec(&self) -> HarmonicSpec {
        self.spec
    }

    pub fn is_fit_valid(&self, row: usize, col: usize) -> bool {
        self.fit_valid[self.geom.idx(row, col)]
    }

    /// Coefficient vector of one pixel, or None when the fit there is
    /// invalid.
    pub fn coeffs_at(&self, row: usize, col: usize) -> Option<&[f64]> {
        let idx = self.geom.idx(row, col);
        if !self.fit_valid[idx] {
            return None;
        }
        let k = self.spec.n_coeffs();
        Some(&self.coeffs[idx * k..(idx + 1) * k])
    }

    fn eval_pixel(&self, idx: usize, design: &[f64]) -> f64 {
        let k = self.spec.n_coeffs();
        let c = &self.coeffs[idx * k..(idx + 1) * k];
        c.iter().zip(design).map(|(a, b)| a * b).sum()
    }
}

/// Exact per-pixel OLS fit over the timestamps where each pixel is valid.
pub fn fit_harmonic(stack: &RasterStack, spec: HarmonicSpec) -> HarmonicModel {
    let geom = *stack.geom();
    let k = spec.n_coeffs();
    let rows: Vec<Vec<f64>> = stack.timestamps().iter().map(|&t| spec.design_row(t)).collect();

    let per_pixel: Vec<(Vec<f64>, bool)> = (0..geom.n_pixels())
        .into_par_iter()
        .map(|idx| {
            let mut xtx = DMatrix::<f64>::zeros(k, k);
            let mut xty = DVector::<f64>::zeros(k);
            let mut n_obs = 0usize;
            for (layer, row) in stack.layers().iter().zip(&rows) {
                let y = layer.get_idx(idx);
                if y.is_nan() {
                    continue;
                }
                n_obs += 1;
                for a in 0..k {
                    xty[a] += row[a] * y;
                    for b in 0..k {
                        xtx[(a, b)] += row[a] * row[b];
                    }
                }
            }
            if n_obs < k {
                return (vec![f64::NAN; k], false);
            }
            // Scaled pivot tolerance guards against rank-deficient designs.
            let scale = xtx.diagonal().max().max(1.0);
            match Cholesky::new(xtx) {
                Some(chol) if chol.l_dirty().diagonal().min() > 1e-7 * scale.sqrt() => {
                    let beta = chol.solve(&xty);
                    (beta.iter().copied().collect(), true)
                }
                _ => (vec![f64::NAN; k], false),
            }
        })
        .collect();

    let mut coeffs = Vec::with_capacity(geom.n_pixels() * k);
    let mut fit_valid = Vec::with_capacity(geom.n_pixels());
    for (c, ok) in per_pixel {
        coeffs.extend_from_slice(&c);
        fit_valid.push(ok);
    }
    HarmonicModel {
        geom,
        spec,
        coeffs,
        fit_valid,
    }
}

/// Evaluates the fitted mean at time `t`; pixels with an invalid fit are
/// invalid in the output.
pub fn predict_mean(model: &HarmonicModel, t: f64) -> Raster {
    let design = model.spec.design_row(t);
    let values: Vec<f64> = (0..model.geom.n_pixels())
        .map(|idx| {
            if model.fit_valid[idx] {
                model.eval_pixel(idx, &design)
            } else {
                f64::NAN
            }
        })
        .collect();
    Raster::from_values(model.geom, values, Some(t)).expect("harmonic evaluation is finite")
}

/// Layerwise observation minus fitted mean; invalid wherever the input or
/// the fit is invalid.
pub fn residuals(stack: &RasterStack, model: &HarmonicModel) -> Result<RasterStack> {
    if !stack.geom().compatible(model.geom()) {
        return Err(Error::GeometryMismatch(
            "residuals: stack and model geometry differ".into(),
        ));
    }
    let layers = stack
        .layers()
        .iter()
        .map(|layer| {
            let t = layer.timestamp_days().unwrap();
            let design = model.spec.design_row(t);
            let values: Vec<f64> = layer
                .values()
                .iter()
                .enumerate()
                .map(|(idx, &y)| {
                    if y.is_nan() || !model.fit_valid[idx] {
                        f64::NAN
                    } else {
                        y - model.eval_pixel(idx, &design)
                    }
                })
                .collect();
            Raster::from_values(*layer.geom(), values, Some(t))
        })
        .collect::<Result<Vec<_>>>()?;
    RasterStack::new(layers)
}

/// Samples the fitted cycle of one pixel at the given times, for plot
/// emission.
pub fn cycle_curve(
    model: &HarmonicModel,
    pixel: (usize, usize),
    t_grid: &[f64],
) -> Result<Vec<(f64, f64)>> {
    let (row, col) = pixel;
    if row >= model.geom.n_rows || col >= model.geom.n_cols {
        return Err(Error::InvalidArgument(format!(
            "pixel ({row}, {col}) outside the {}x{} grid",
            model.geom.n_rows, model.geom.n_cols
        )));
    }
    if !model.is_fit_valid(row, col) {
        return Err(Error::NoValidData(format!(
            "pixel ({row}, {col}) has no valid harmonic fit"
        )));
    }
    let idx = model.geom.idx(row, col);
    Ok(t_grid
        .iter()
        .map(|&t| (t, model.eval_pixel(idx, &model.spec.design_row(t))))
        .collect())
}

pub const HARMONIC_ROLE: &str = "harmonic-coeffs";

#[derive(Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
struct HarmonicHeader {
    magic: String,
    version: u32,
    n_rows: usize,
    n_cols: usize,
    pixel_size_m: f64,
    origin: [f64; 2],
    timestamp_days: Option<f64>,
    role: String,
    n_layers: usize,
    include_annual: bool,
    include_diurnal: bool,
}

/// Writes a harmonic model as a multi-layer extension of the portable
/// raster format: one payload layer per coefficient followed by a validity
/// layer (1.0 valid / 0.0 invalid).
pub fn write_harmonic_model(model: &HarmonicModel, path: impl AsRef<Path>) -> Result<()> {
    let path = path.as_ref();
    let k = model.spec.n_coeffs();
    let header = HarmonicHeader {
        magic: RASTER_MAGIC.to_string(),
        version: FORMAT_VERSION,
        n_rows: model.geom.n_rows,
        n_cols: model.geom.n_cols,
        pixel_size_m: model.geom.pixel_size_m,
        origin: [model.geom.origin.0, model.geom.origin.1],
        timestamp_days: None,
        role: HARMONIC_ROLE.to_string(),
        n_layers: k + 1,
        include_annual: model.spec.include_annual,
        include_diurnal: model.spec.include_diurnal,
    };
    let file = File::create(path).map_err(|e| Error::io(path, e))?;
    let mut writer = BufWriter::new(file);
    let header_line = serde_json::to_string(&header).expect("header serialization cannot fail");
    writer
        .write_all(header_line.as_bytes())
        .and_then(|_| writer.write_all(b"\n"))
        .map_err(|e| Error::io(path, e))?;
    for layer in 0..k {
        for idx in 0..model.geom.n_pixels() {
            let v = model.coeffs[idx * k + layer];
            writer.write_all(&v.to_le_bytes()).map_err(|e| Error::io(path, e))?;
        }
    }
    for &ok in &model.fit_valid {
        let v = if ok { 1.0f64 } else { 0.0 };
        writer.write_all(&v.to_le_bytes()).map_err(|e| Error::io(path, e))?;
    }
    writer.flush().map_err(|e| Error::io(path, e))
}

pub fn read_harmonic_model(path: impl AsRef<Path>) -> Result<HarmonicModel> {
    let path = path.as_ref();
    let file = File::open(path).map_err(|e| Error::io(path, e))?;
    let mut reader = BufReader::new(file);
    let mut header_bytes = Vec::new();
    let mut byte = [0u8; 1];
    loop {
        match reader.read(&mut byte) {
            Ok(0) => return Err(Error::MalformedHeader("missing header terminator".into())),
            Ok(_) if byte[0] == b'\n' => break,
            Ok(_) => header_bytes.push(byte[0]),
            Err(e) => return Err(Error::io(path, e)),
        }
    }
    let header_line = String::from_utf8(header_bytes)
        .map_err(|_| Error::MalformedHeader("header is not valid UTF-8".into()))?;
    let header: HarmonicHeader =
        serde_json::from_str(&header_line).map_err(|e| Error::MalformedHeader(e.to_string()))?;
    if header.magic != RASTER_MAGIC || header.role != HARMONIC_ROLE {
        return Err(Error::MalformedHeader(format!(
            "expected a {HARMONIC_ROLE} file, found magic {:?} role {:?}",
            header.magic, header.role
        )));
    }
    let spec = HarmonicSpec {
        include_annual: header.include_annual,
        include_diurnal: header.include_diurnal,
    };
    let k = spec.n_coeffs();
    if header.n_layers != k + 1 {
        return Err(Error::MalformedHeader(format!(
            "expected {} layers for this spec, header announces {}",
            k + 1,
            header.n_layers
        )));
    }
    let geom = GridGeom::new(
        header.n_rows,
        header.n_cols,
        header.pixel_size_m,
        (header.origin[0], header.origin[1]),
    )?;
    let mut payload = Vec::new();
    reader.read_to_end(&mut payload).map_err(|e| Error::io(path, e))?;
    let expected = geom.n_pixels() as u64 * (k as u64 + 1) * 8;
    if payload.len() as u64 != expected {
        return Err(Error::PayloadSize {
            expected,
            got: payload.len() as u64,
        });
    }
    let numbers: Vec<f64> = payload
        .chunks_exact(8)
        .map(|c| f64::from_le_bytes(c.try_into().unwrap()))
        .collect();
    let n_px = geom.n_pixels();
    let mut coeffs = vec![f64::NAN; n_px * k];
    for layer in 0..k {
        for idx in 0..n_px {
            coeffs[idx * k + layer] = numbers[layer * n_px + idx];
        }
    }
    let fit_valid: Vec<bool> = numbers[k * n_px..].iter().map(|&v| v == 1.0).collect();
    Ok(HarmonicModel {
        geom,
        spec,
        coeffs,
        fit_valid,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use approx::assert_relative_eq;
    use tempfile::tempdir;

    fn geom(n_rows: usize, n_cols: usize) -> GridGeom {
        GridGeom::new(n_rows, n_cols, 30.0, (0.0, 0.0)).unwrap()
    }

    fn stack_from_fn(g: GridGeom, times: &[f64], mut f: impl FnMut(usize, f64) -> f64) -> RasterStack {
        let layers = times
            .iter()
            .map(|&t| {
                let values: Vec<f64> = (0..g.n_pixels()).map(|idx| f(idx, t)).collect();
                Raster::from_values(g, values, Some(t)).unwrap()
            })
            .collect();
        RasterStack::new(layers).unwrap()
    }

    #[test]
    fn constant_series_gives_intercept_only() {
        let g = geom(2, 2);
        let stack = stack_from_fn(g, &[0.0, 100.0, 200.0, 300.0], |_, _| 4.25);
        let model = fit_harmonic(&stack, HarmonicSpec::ANNUAL);
        for row in 0..2 {
            for col in 0..2 {
                let beta = model.coeffs_at(row, col).unwrap();
                assert_relative_eq!(beta[0], 4.25, epsilon = 1e-12);
                assert!(beta[1].abs() < 1e-12 && beta[2].abs() < 1e-12);
            }
        }
    }

    #[test]
    fn quadrature_points_recover_pure_cosine() {
        // y = cos(2πt/365) sampled at quarter-year points
        let g = geom(1, 1);
        let times = [0.0, 91.25, 182.5, 273.75];
        let stack = stack_from_fn(g, &times, |_, t| (TWO_PI * t / DAYS_PER_YEAR).cos());
        let model = fit_harmonic(&stack, HarmonicSpec::ANNUAL);
        let beta = model.coeffs_at(0, 0).unwrap();
        assert!(beta[0].abs() < 1e-12);
        assert_relative_eq!(beta[1], 1.0, epsilon = 1e-12);
        assert!(beta[2].abs() < 1e-12);
    }

    #[test]
    fn underdetermined_pixels_are_flagged() {
        let g = geom(2, 3);
        let stack = stack_from_fn(g, &[10.0], |_, _| 1.0);
        let model = fit_harmonic(&stack, HarmonicSpec::ANNUAL);
        for row in 0..2 {
            for col in 0..3 {
                assert!(!model.is_fit_valid(row, col));
            }
        }
        // predictions are invalid everywhere
        let pred = predict_mean(&model, 50.0);
        assert_eq!(pred.valid_count(), 0);
    }

    #[test]
    fn exact_recovery_of_synthetic_coefficients() {
        // noiseless harmonic data with well-spread timestamps recovers beta
        let g = geom(3, 3);
        let truth = [1.5, -0.75, 0.33, 0.2, -0.6];
        let spec = HarmonicSpec::ANNUAL_DIURNAL;
        let times: Vec<f64> = (0..9).map(|i| i as f64 * 41.0 + 0.13 * i as f64).collect();
        let stack = stack_from_fn(g, &times, |_, t| {
            let row = spec.design_row(t);
            truth.iter().zip(&row).map(|(a, b)| a * b).sum()
        });
        let model = fit_harmonic(&stack, spec);
        for row in 0..3 {
            for col in 0..3 {
                let beta = model.coeffs_at(row, col).unwrap();
                for (b, t) in beta.iter().zip(&truth) {
                    assert!((b - t).abs() < 1e-10, "beta {b} vs {t}");
                }
            }
        }
        // residuals of the generating stack vanish
        let resid = residuals(&stack, &model).unwrap();
        for layer in resid.layers() {
            for v in layer.valid_values() {
                assert!(v.abs() < 1e-9);
            }
        }
    }

    #[test]
    fn residual_orthogonality_to_design() {
        use rand::{Rng, SeedableRng};
        let mut rng = rand_chacha::ChaCha12Rng::seed_from_u64(3);
        let g = geom(2, 2);
        let times: Vec<f64> = (0..8).map(|i| i as f64 * 47.0).collect();
        let stack = stack_from_fn(g, &times, |_, _| rng.random_range(-5.0..5.0));
        let model = fit_harmonic(&stack, HarmonicSpec::ANNUAL);
        let resid = residuals(&stack, &model).unwrap();
        for idx in 0..g.n_pixels() {
            let mut dot_cos = 0.0;
            let mut dot_sin = 0.0;
            let mut dot_one = 0.0;
            for layer in resid.layers() {
                let t = layer.timestamp_days().unwrap();
                let r = layer.get_idx(idx);
                dot_one += r;
                dot_cos += r * (TWO_PI * t / DAYS_PER_YEAR).cos();
                dot_sin += r * (TWO_PI * t / DAYS_PER_YEAR).sin();
            }
            assert!(dot_one.abs() < 1e-9);
            assert!(dot_cos.abs() < 1e-9);
            assert!(dot_sin.abs() < 1e-9);
        }
    }

    #[test]
    fn residuals_vanish_when_data_lies_in_the_design_span() {
        let g = geom(2, 2);
        let spec = HarmonicSpec::ANNUAL;
        let truth = [2.0, 0.8, -0.3];
        let perturb = [0.1, -0.05, 0.07];
        let times: Vec<f64> = vec![0.0, 60.0, 120.0, 190.0, 260.0, 320.0];
        let stack = stack_from_fn(g, &times, |_, t| {
            let row = spec.design_row(t);
            let mu: f64 = truth.iter().zip(&row).map(|(a, b)| a * b).sum();
            let extra: f64 = perturb.iter().zip(&row).map(|(a, b)| a * b).sum();
            mu + extra
        });
        let model = fit_harmonic(&stack, spec);
        let resid = residuals(&stack, &model).unwrap();
        for layer in resid.layers() {
            for v in layer.valid_values() {
                assert!(v.abs() < 1e-10);
            }
        }
    }

    #[test]
    fn predict_mean_constant_and_periodic() {
        let g = geom(1, 1);
        let times = [0.0, 91.25, 182.5, 273.75];
        let stack = stack_from_fn(g, &times, |_, t| (TWO_PI * t / DAYS_PER_YEAR).cos());
        let model = fit_harmonic(&stack, HarmonicSpec::ANNUAL);
        let at_half_year = predict_mean(&model, 182.5);
        assert_relative_eq!(at_half_year.get(0, 0), -1.0, epsilon = 1e-10);
        // periodicity
        let a = predict_mean(&model, 42.0).get(0, 0);
        let b = predict_mean(&model, 42.0 + DAYS_PER_YEAR).get(0, 0);
        assert_relative_eq!(a, b, epsilon = 1e-9);
    }

    #[test]
    fn diurnal_term_evaluates_at_half_day() {
        let g = geom(1, 1);
        let spec = HarmonicSpec::ANNUAL_DIURNAL;
        let times: Vec<f64> = (0..10).map(|i| i as f64 * 37.0 + 0.21 * i as f64).collect();
        let stack = stack_from_fn(g, &times, |_, t| (TWO_PI * t).cos());
        let model = fit_harmonic(&stack, spec);
        let pred = predict_mean(&model, 0.5);
        assert_relative_eq!(pred.get(0, 0), -1.0, epsilon = 1e-8);
    }

    #[test]
    fn cycle_curve_amplitude_and_periodicity() {
        let g = geom(1, 1);
        let times = [0.0, 91.25, 182.5, 273.75];
        let stack = stack_from_fn(g, &times, |_, t| (TWO_PI * t / DAYS_PER_YEAR).cos());
        let model = fit_harmonic(&stack, HarmonicSpec::ANNUAL);
        let curve = cycle_curve(&model, (0, 0), &[0.0, DAYS_PER_YEAR]).unwrap();
        assert_relative_eq!(curve[0].1, curve[1].1, epsilon = 1e-10);

        let dense: Vec<f64> = (0..=3650).map(|i| i as f64 * 0.1).collect();
        let curve = cycle_curve(&model, (0, 0), &dense).unwrap();
        let max = curve.iter().map(|p| p.1).fold(f64::NEG_INFINITY, f64::max);
        let min = curve.iter().map(|p| p.1).fold(f64::INFINITY, f64::min);
        let beta = model.coeffs_at(0, 0).unwrap();
        let amplitude = (beta[1] * beta[1] + beta[2] * beta[2]).sqrt();
        assert_relative_eq!(max - min, 2.0 * amplitude, epsilon = 1e-4);
    }

    #[test]
    fn cycle_curve_rejects_invalid_pixels() {
        let g = geom(1, 2);
        let stack = stack_from_fn(g, &[5.0], |_, _| 1.0);
        let model = fit_harmonic(&stack, HarmonicSpec::ANNUAL);
        assert!(cycle_curve(&model, (0, 0), &[0.0]).is_err());
        assert!(cycle_curve(&model, (5, 0), &[0.0]).is_err());
    }

    #[test]
    fn model_file_round_trip() {
        let dir = tempdir().unwrap();
        let path = dir.path().join("model.coeffs");
        let g = geom(2, 3);
        let times = [0.0, 80.0, 161.0, 240.0, 322.0];
        let mut layers: Vec<Raster> = times
            .iter()
            .map(|&t| {
                let values: Vec<f64> = (0..6)
                    .map(|idx| idx as f64 + (TWO_PI * t / DAYS_PER_YEAR).sin())
                    .collect();
                Raster::from_values(g, values, Some(t)).unwrap()
            })
            .collect();
        // one pixel never valid -> fit invalid there
        for layer in &mut layers {
            layer.set_invalid(1, 2);
        }
        let stack = RasterStack::new(layers).unwrap();
        let model = fit_harmonic(&stack, HarmonicSpec::ANNUAL);
        assert!(!model.is_fit_valid(1, 2));
        write_harmonic_model(&model, &path).unwrap();
        let back = read_harmonic_model(&path).unwrap();
        assert_eq!(back.spec(), model.spec());
        assert_eq!(back.fit_valid, model.fit_valid);
        for (a, b) in back.coeffs.iter().zip(&model.coeffs) {
            assert_eq!(a.to_bits(), b.to_bits());
        }
    }
}
