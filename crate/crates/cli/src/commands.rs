//! Pipeline subcommands. Every command is deterministic given its inputs,
//! config and seed, and rewrites its outputs idempotently.

use std::path::{Path, PathBuf};

use serde::Serialize;

use bdgp_core::bdgp::{BlurSpec, RegionParams};
use bdgp_core::estimate::{
    aggregate_sigma_estimates, estimate_blurred_sigma, fit_all_regions, sigma_blur_from_fwhm,
    FitReport, VarianceVariant,
};
use bdgp_core::grid::{
    read_raster, render_heatmap, write_raster, GridGeom, Palette, Raster, RasterStack,
};
use bdgp_core::krige::{krige_all, two_sigma_map, KrigeConfig, KrigeResult};
use bdgp_core::meanfit::{
    cycle_curve, fit_harmonic, residuals, write_harmonic_model, HarmonicModel, HarmonicSpec,
};
use bdgp_core::partition::{
    build_neighborhoods, partition_stats, read_masks, read_partition, refine_masks,
    write_partition, Partition,
};
use bdgp_core::synth::{
    field_partition, random_partition, random_region_params, run_verification, SynthSpec,
    VerifyFigures, VerifyMode,
};

use crate::config::{PipelineConfig, VerifyLayout};
use crate::error::CliError;
use crate::figures::{render_labels, write_line_plot};

type CmdResult = Result<(), CliError>;

fn ensure_out_dir(out_dir: &Path) -> CmdResult {
    std::fs::create_dir_all(out_dir)
        .map_err(|e| CliError::Config(format!("cannot create {}: {e}", out_dir.display())))
}

fn write_json(value: &impl Serialize, path: &Path) -> CmdResult {
    let text = serde_json::to_string_pretty(value)
        .map_err(|e| CliError::Config(format!("serialization: {e}")))?;
    std::fs::write(path, text)
        .map_err(|e| CliError::Core(bdgp_core::Error::io(path, e)))?;
    Ok(())
}

/// refine: mask set -> partition file, per-region stats, label heatmap.
pub fn cmd_refine(config: &PipelineConfig, out_dir: &Path) -> CmdResult {
    ensure_out_dir(out_dir)?;
    let masks_path = config
        .paths
        .masks
        .as_ref()
        .ok_or_else(|| CliError::Config("config is missing paths.masks".into()))?;
    let masks = read_masks(masks_path)?;
    if masks.is_empty() {
        eprintln!(
            "warning: {} contains no masks; the partition is all background",
            masks_path.display()
        );
    }
    let partition = refine_masks(&masks, config.partition.min_area_px);
    write_partition(&partition, out_dir.join("partition.json"))?;
    write_json(&partition_stats(&partition), &out_dir.join("partition_stats.json"))?;
    render_labels(&partition, &out_dir.join("partition_labels.png"))?;
    println!(
        "refine: {} masks -> {} regions ({} background pixels)",
        masks.len(),
        partition.n_regions(),
        partition.background_pixels().len()
    );
    Ok(())
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Sensor {
    /// High-resolution proxy; sun-synchronous, so annual-only.
    Hires,
    /// Low-resolution blurred sensor; annual plus diurnal.
    Lowres,
}

impl Sensor {
    pub fn prefix(&self) -> &'static str {
        match self {
            Sensor::Hires => "hires",
            Sensor::Lowres => "lowres",
        }
    }

    fn harmonic_spec(&self) -> HarmonicSpec {
        match self {
            Sensor::Hires => HarmonicSpec::ANNUAL,
            Sensor::Lowres => HarmonicSpec::ANNUAL_DIURNAL,
        }
    }
}

fn read_stack(paths: &[PathBuf]) -> Result<RasterStack, CliError> {
    if paths.is_empty() {
        return Err(CliError::Config("no raster paths configured for this sensor".into()));
    }
    let layers = paths.iter().map(read_raster).collect::<Result<Vec<_>, _>>()?;
    Ok(RasterStack::new(layers)?)
}

fn first_valid_pixel(model: &HarmonicModel) -> Option<(usize, usize)> {
    let geom = model.geom();
    (0..geom.n_rows)
        .flat_map(|r| (0..geom.n_cols).map(move |c| (r, c)))
        .find(|&(r, c)| model.is_fit_valid(r, c))
}

/// fit-mean: per-pixel harmonic OLS fit, residual stack, cycle plots.
pub fn cmd_fit_mean(config: &PipelineConfig, out_dir: &Path, sensor: Sensor) -> CmdResult {
    ensure_out_dir(out_dir)?;
    let paths = match sensor {
        Sensor::Hires => &config.paths.hires_rasters,
        Sensor::Lowres => &config.paths.lowres_rasters,
    };
    let stack = read_stack(paths)?;
    let spec = sensor.harmonic_spec();
    let model = fit_harmonic(&stack, spec);
    let n_valid = (0..model.geom().n_rows)
        .flat_map(|r| (0..model.geom().n_cols).map(move |c| (r, c)))
        .filter(|&(r, c)| model.is_fit_valid(r, c))
        .count();
    if n_valid == 0 {
        return Err(CliError::Core(bdgp_core::Error::NoValidData(
            "no pixel has enough observations for the harmonic fit".into(),
        )));
    }
    let prefix = sensor.prefix();
    write_harmonic_model(&model, out_dir.join(format!("{prefix}_model.coeffs")))?;
    let resid = residuals(&stack, &model)?;
    for (i, layer) in resid.layers().iter().enumerate() {
        write_raster(layer, out_dir.join(format!("{prefix}_resid_{i:03}.raster")))?;
    }

    let pixel = match config.mean.cycle_pixel {
        Some(p) => p,
        None => first_valid_pixel(&model).expect("checked above"),
    };
    let t0 = stack.timestamps()[0].floor();
    let annual_grid: Vec<f64> = (0..=365).map(|d| t0 + d as f64).collect();
    let annual = cycle_curve(&model, pixel, &annual_grid)?;
    write_line_plot(
        &annual,
        &format!("{prefix}: fitted annual cycle at pixel ({}, {})", pixel.0, pixel.1),
        "time [days]",
        "fitted mean [field units]",
        &out_dir.join(format!("{prefix}_cycle_annual.svg")),
    )?;
    if spec.include_diurnal {
        let diurnal_grid: Vec<f64> = (0..=96).map(|q| t0 + q as f64 / 96.0).collect();
        let diurnal = cycle_curve(&model, pixel, &diurnal_grid)?;
        write_line_plot(
            &diurnal,
            &format!("{prefix}: fitted diurnal cycle at pixel ({}, {})", pixel.0, pixel.1),
            "time [days]",
            "fitted mean [field units]",
            &out_dir.join(format!("{prefix}_cycle_diurnal.svg")),
        )?;
    }
    println!(
        "fit-mean {prefix}: {} layers, {}/{} pixels fit",
        stack.len(),
        n_valid,
        model.geom().n_pixels()
    );
    Ok(())
}

fn read_residual_stack(out_dir: &Path, prefix: &str) -> Result<RasterStack, CliError> {
    let mut layers = Vec::new();
    loop {
        let path = out_dir.join(format!("{prefix}_resid_{:03}.raster", layers.len()));
        if !path.exists() {
            break;
        }
        layers.push(read_raster(&path)?);
    }
    if layers.is_empty() {
        return Err(CliError::Config(format!(
            "no {prefix} residual rasters in {} (run fit-mean first)",
            out_dir.display()
        )));
    }
    Ok(RasterStack::new(layers)?)
}

/// Serialized per-label parameters consumed by the kriging stage.
#[derive(Debug, Serialize, serde::Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ParamsFile {
    pub magic: String,
    pub version: u32,
    /// Blur width on the common grid, pixels.
    pub sigma_blur_px: f64,
    /// Sensor noise standard deviation, field units.
    pub sigma_sensor: f64,
    pub labels: Vec<LabelParams>,
}

#[derive(Debug, Serialize, serde::Deserialize)]
#[serde(deny_unknown_fields)]
pub struct LabelParams {
    pub id: u32,
    /// Latent-field standard deviation of the blurred sensor, field units.
    pub sigma: f64,
    /// Shared length scale, pixels.
    pub ell_px: f64,
}

pub const PARAMS_MAGIC: &str = "BDGP-PARAMS";

pub fn read_params(path: &Path) -> Result<ParamsFile, CliError> {
    let text = std::fs::read_to_string(path)
        .map_err(|e| CliError::Core(bdgp_core::Error::io(path, e)))?;
    let params: ParamsFile = serde_json::from_str(&text)
        .map_err(|e| CliError::Core(bdgp_core::Error::MalformedHeader(e.to_string())))?;
    if params.magic != PARAMS_MAGIC {
        return Err(CliError::Core(bdgp_core::Error::MalformedHeader(format!(
            "expected magic {PARAMS_MAGIC:?} in {}",
            path.display()
        ))));
    }
    Ok(params)
}

#[derive(Serialize)]
struct RegionParamRecord {
    region_id: u32,
    sigma_hires: f64,
    ell_px: f64,
    neg_log_lik: f64,
    iterations: usize,
    converged: bool,
    ell_identifiable: bool,
    n_pixels: usize,
    n_times: usize,
    sigma_lowres: f64,
    lowres_scenes_used: usize,
    lowres_floored_scenes: usize,
}

/// Renders a per-label value as a raster (label lookup per pixel) plus a
/// heatmap.
fn emit_label_raster(
    partition: &Partition,
    values: &[f64],
    stem: &str,
    out_dir: &Path,
) -> CmdResult {
    let geom = partition.geom();
    let raster_values: Vec<f64> = partition
        .labels()
        .iter()
        .map(|&l| values[l as usize])
        .collect();
    let raster = Raster::from_values(*geom, raster_values, None)?;
    write_raster(&raster, out_dir.join(format!("{stem}.raster")))?;
    render_heatmap(
        &raster,
        out_dir.join(format!("{stem}.png")),
        Palette::Viridis,
        None,
    )?;
    Ok(())
}

/// fit-params: per-region MLE on the high-resolution residuals, length
/// scales copied to the blurred sensor, whose variance comes from the
/// closed-form estimator with the median across scenes.
pub fn cmd_fit_params(config: &PipelineConfig, out_dir: &Path) -> CmdResult {
    ensure_out_dir(out_dir)?;
    let partition = read_partition(out_dir.join("partition.json"))?;
    let hires = read_residual_stack(out_dir, "hires")?;
    let lowres = read_residual_stack(out_dir, "lowres")?;
    if !hires.geom().same_dims(partition.geom()) || !lowres.geom().same_dims(partition.geom()) {
        return Err(CliError::Core(bdgp_core::Error::GeometryMismatch(
            "residual stacks do not match the partition grid".into(),
        )));
    }
    let blur_cfg = config.blur().map_err(CliError::Config)?;
    let sigma_blur_px = sigma_blur_from_fwhm(
        blur_cfg.fwhm_m,
        blur_cfg.native_px_m,
        hires.geom().pixel_size_m,
    )?;
    let mle = config.mle.to_core();
    let variant: VarianceVariant = config.variance.variant.into();

    // high-resolution MLE including the background region
    let report: FitReport = fit_all_regions(&partition, &hires, &mle, true)?;

    let n_labels = partition.n_regions() + 1;
    let mut sigma_lowres = vec![config.variance.sigma_floor; n_labels];
    let mut ell = vec![mle.init_ell; n_labels];
    let mut records = Vec::new();
    for fit in &report.regions {
        let label = fit.region_id;
        ell[label as usize] = fit.ell_px;
        let pixels = partition.pixels_of(label)?;
        let mut per_scene = Vec::new();
        let mut floored = 0usize;
        for layer in lowres.layers() {
            let y: Vec<f64> = pixels
                .iter()
                .filter(|&&idx| layer.is_valid_idx(idx))
                .map(|&idx| layer.get_idx(idx))
                .collect();
            if y.len() < 2 {
                continue;
            }
            let est = estimate_blurred_sigma(
                &y,
                fit.ell_px,
                sigma_blur_px,
                blur_cfg.sigma_sensor,
                variant,
                config.variance.sigma_floor,
            )?;
            if est.floored {
                floored += 1;
                eprintln!(
                    "warning: region {label} sample variance below sigma_sensor^2; estimate floored"
                );
            }
            per_scene.push(est.sigma);
        }
        if !per_scene.is_empty() {
            sigma_lowres[label as usize] = aggregate_sigma_estimates(&per_scene)?;
        } else {
            eprintln!("warning: region {label} has no usable low-resolution pixels");
        }
        records.push(RegionParamRecord {
            region_id: label,
            sigma_hires: fit.sigma,
            ell_px: fit.ell_px,
            neg_log_lik: fit.neg_log_lik,
            iterations: fit.iterations,
            converged: fit.converged,
            ell_identifiable: fit.ell_identifiable,
            n_pixels: fit.n_pixels,
            n_times: fit.n_times,
            sigma_lowres: sigma_lowres[label as usize],
            lowres_scenes_used: per_scene.len(),
            lowres_floored_scenes: floored,
        });
    }
    write_json(&records, &out_dir.join("fit_report.json"))?;

    let params = ParamsFile {
        magic: PARAMS_MAGIC.to_string(),
        version: 1,
        sigma_blur_px,
        sigma_sensor: blur_cfg.sigma_sensor,
        labels: (0..n_labels as u32)
            .map(|id| LabelParams {
                id,
                sigma: sigma_lowres[id as usize],
                ell_px: ell[id as usize],
            })
            .collect(),
    };
    write_json(&params, &out_dir.join("params.json"))?;

    let sigma_hires_by_label: Vec<f64> = {
        let mut v = vec![f64::NAN; n_labels];
        for fit in &report.regions {
            v[fit.region_id as usize] = fit.sigma;
        }
        v
    };
    emit_label_raster(&partition, &sigma_hires_by_label, "param_sigma_hires", out_dir)?;
    emit_label_raster(&partition, &ell, "param_ell_px", out_dir)?;
    emit_label_raster(&partition, &sigma_lowres, "param_sigma_lowres", out_dir)?;
    println!(
        "fit-params: {} labels, sigma_blur {:.4} px",
        n_labels, sigma_blur_px
    );
    Ok(())
}

#[derive(Serialize)]
struct SkipsFile<'a> {
    skipped: &'a [bdgp_core::krige::SkippedRegion],
}

/// krige: blur-aware reconstruction of the target residual raster.
pub fn cmd_krige(config: &PipelineConfig, out_dir: &Path) -> CmdResult {
    ensure_out_dir(out_dir)?;
    let partition = read_partition(out_dir.join("partition.json"))?;
    let params = read_params(&out_dir.join("params.json"))?;
    let target_path = config
        .paths
        .target_raster
        .as_ref()
        .ok_or_else(|| CliError::Config("config is missing paths.target_raster".into()))?;
    let obs = read_raster(target_path)?;

    let n_labels = partition.n_regions() + 1;
    if params.labels.len() != n_labels {
        return Err(CliError::Config(format!(
            "params.json covers {} labels, partition needs {}",
            params.labels.len(),
            n_labels
        )));
    }
    let mut sigma = vec![0.0; n_labels];
    let mut ell = vec![0.0; n_labels];
    for p in &params.labels {
        if p.id as usize >= n_labels {
            return Err(CliError::Config(format!("params.json has unknown label {}", p.id)));
        }
        sigma[p.id as usize] = p.sigma;
        ell[p.id as usize] = p.ell_px;
    }
    let theta = RegionParams::new(sigma, ell)?;
    let cfg = KrigeConfig {
        radius_factor: config.krige.radius_factor,
        max_region_pixels: config.krige.max_region_pixels,
        blur: BlurSpec::new(params.sigma_blur_px, params.sigma_sensor)?,
        include_background: config.krige.include_background,
    };
    let neighborhoods = build_neighborhoods(&partition, cfg.neighborhood_radius_px())?;
    let result = krige_all(&partition, &neighborhoods, &obs, &theta, &cfg)?;
    emit_krige_outputs(&result, out_dir, "krige")?;
    for skip in &result.skipped_regions {
        eprintln!("warning: region {} skipped: {}", skip.region_id, skip.reason);
    }
    println!(
        "krige: {} pixels reconstructed, {} regions skipped",
        result.mean.valid_count(),
        result.skipped_regions.len()
    );
    Ok(())
}

fn emit_krige_outputs(result: &KrigeResult, out_dir: &Path, stem: &str) -> CmdResult {
    write_raster(&result.mean, out_dir.join(format!("{stem}_mean.raster")))?;
    write_raster(&result.variance, out_dir.join(format!("{stem}_variance.raster")))?;
    write_json(
        &SkipsFile {
            skipped: &result.skipped_regions,
        },
        &out_dir.join(format!("{stem}_skips.json")),
    )?;
    if result.mean.valid_count() > 0 {
        render_heatmap(
            &result.mean,
            out_dir.join(format!("heat_{stem}_mean.png")),
            Palette::Coolwarm,
            None,
        )?;
        render_heatmap(
            &two_sigma_map(result),
            out_dir.join(format!("heat_{stem}_2sigma.png")),
            Palette::Viridis,
            None,
        )?;
    }
    Ok(())
}

/// verify: synthetic blur-and-recover experiment with a JSON report and the
/// figure set of the first replicate.
pub fn cmd_verify(config: &PipelineConfig, out_dir: &Path, seed: u64) -> CmdResult {
    ensure_out_dir(out_dir)?;
    let v = config.verify().map_err(CliError::Config)?;
    let blur_cfg = config.blur().map_err(CliError::Config)?;
    let geom = GridGeom::new(v.n_rows, v.n_cols, v.pixel_size_m, (0.0, 0.0))?;
    let partition = match v.layout {
        VerifyLayout::Fields => {
            field_partition(geom, v.field_rows, v.field_cols, v.road_px, v.margin_px)?
        }
        VerifyLayout::Voronoi => random_partition(geom, v.n_regions, seed ^ 0x9e3779b97f4a7c15)?,
    };
    let mut theta = random_region_params(
        partition.n_regions(),
        v.sigma_range,
        v.ell_range_px,
        seed ^ 0x2545f4914f6cdd1d,
    )?;
    {
        // background parameters come from the config, not the random draw
        let mut sigmas = theta.sigmas().to_vec();
        let mut ells = theta.ells().to_vec();
        sigmas[0] = v.background_sigma;
        ells[0] = v.background_ell_px;
        theta = RegionParams::new(sigmas, ells)?;
    }
    let sigma_blur_px =
        sigma_blur_from_fwhm(blur_cfg.fwhm_m, blur_cfg.native_px_m, v.pixel_size_m)?;
    let blur = BlurSpec::new(sigma_blur_px, v.sigma_sensor)?;
    let spec = SynthSpec {
        geom,
        partition,
        theta_true: theta,
        blur,
        seed,
        n_replicates: v.n_replicates,
    };
    let cfg = KrigeConfig {
        radius_factor: config.krige.radius_factor,
        max_region_pixels: config.krige.max_region_pixels,
        blur,
        include_background: config.krige.include_background,
    };
    let mode = if v.use_true_params {
        VerifyMode::TrueParams
    } else {
        VerifyMode::Reestimate {
            n_scenes: v.n_estimation_scenes,
            mle: config.mle.to_core(),
        }
    };
    let (report, figures) = run_verification(&spec, &cfg, &mode)?;
    write_json(&report, &out_dir.join("verify_report.json"))?;
    emit_verify_figures(&figures, v.emit_heatmaps, out_dir)?;
    println!(
        "verify: {} replicates, median RMSE reduction {:.1}%, 2-sigma coverage {:.3}",
        report.summary.n_replicates,
        100.0 * report.summary.median_rmse_reduction,
        report.summary.coverage_2sigma_overall
    );
    Ok(())
}

fn emit_verify_figures(figures: &VerifyFigures, heatmaps: bool, out_dir: &Path) -> CmdResult {
    write_raster(&figures.truth, out_dir.join("verify_truth.raster"))?;
    write_raster(&figures.blurred, out_dir.join("verify_blurred.raster"))?;
    write_raster(&figures.kriged_mean, out_dir.join("verify_kriged_mean.raster"))?;
    write_raster(&figures.two_sigma, out_dir.join("verify_two_sigma.raster"))?;
    if !heatmaps {
        return Ok(());
    }
    // truth, blurred and kriged share one color range for comparability
    let (mut lo, mut hi) = figures.truth.min_max_valid().unwrap_or((0.0, 1.0));
    for r in [&figures.blurred, &figures.kriged_mean] {
        if let Some((l, h)) = r.min_max_valid() {
            lo = lo.min(l);
            hi = hi.max(h);
        }
    }
    let range = Some((lo, hi));
    render_heatmap(&figures.truth, out_dir.join("verify_truth.png"), Palette::Coolwarm, range)?;
    render_heatmap(&figures.blurred, out_dir.join("verify_blurred.png"), Palette::Coolwarm, range)?;
    render_heatmap(
        &figures.kriged_mean,
        out_dir.join("verify_kriged_mean.png"),
        Palette::Coolwarm,
        range,
    )?;
    render_heatmap(
        &figures.two_sigma,
        out_dir.join("verify_two_sigma.png"),
        Palette::Viridis,
        None,
    )?;
    Ok(())
}

/// render: one raster to a heatmap PNG.
pub fn cmd_render(
    input: &Path,
    palette: &str,
    lo: Option<f64>,
    hi: Option<f64>,
    out_dir: Option<&Path>,
) -> CmdResult {
    let raster = read_raster(input)?;
    let palette = Palette::from_name(palette)?;
    let range = match (lo, hi) {
        (Some(l), Some(h)) => Some((l, h)),
        (None, None) => None,
        _ => {
            return Err(CliError::Config(
                "--lo and --hi must be given together".into(),
            ))
        }
    };
    let stem = input
        .file_stem()
        .map(|s| s.to_string_lossy().to_string())
        .unwrap_or_else(|| "raster".to_string());
    let dir = out_dir
        .map(Path::to_path_buf)
        .or_else(|| input.parent().map(Path::to_path_buf))
        .unwrap_or_else(|| PathBuf::from("."));
    ensure_out_dir(&dir)?;
    let out_path = dir.join(format!("{stem}.png"));
    render_heatmap(&raster, &out_path, palette, range)?;
    println!("render: {} -> {}", input.display(), out_path.display());
    Ok(())
}
