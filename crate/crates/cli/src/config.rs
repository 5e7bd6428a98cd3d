//! TOML pipeline configuration. Unknown keys are rejected everywhere, and
//! every key carrying a physical quantity names its unit.

use std::path::{Path, PathBuf};

use serde::Deserialize;

use bdgp_core::estimate::VarianceVariant;

#[derive(Debug, Clone, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct PipelineConfig {
    #[serde(default)]
    pub seed: u64,
    pub paths: Paths,
    #[serde(default)]
    pub partition: PartitionSection,
    #[serde(default)]
    pub mean: MeanSection,
    #[serde(default)]
    pub mle: MleSection,
    pub blur: Option<BlurSection>,
    #[serde(default)]
    pub variance: VarianceSection,
    #[serde(default)]
    pub krige: KrigeSection,
    pub verify: Option<VerifySection>,
}

#[derive(Debug, Clone, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct Paths {
    pub out_dir: PathBuf,
    pub masks: Option<PathBuf>,
    #[serde(default)]
    pub hires_rasters: Vec<PathBuf>,
    #[serde(default)]
    pub lowres_rasters: Vec<PathBuf>,
    pub target_raster: Option<PathBuf>,
}

#[derive(Debug, Clone, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct PartitionSection {
    pub min_area_px: usize,
}

impl Default for PartitionSection {
    fn default() -> Self {
        PartitionSection { min_area_px: 100 }
    }
}

#[derive(Debug, Clone, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct MeanSection {
    /// (row, col) of the pixel whose fitted cycle is plotted.
    pub cycle_pixel: Option<(usize, usize)>,
}

impl Default for MeanSection {
    fn default() -> Self {
        MeanSection { cycle_pixel: None }
    }
}

#[derive(Debug, Clone, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct MleSection {
    pub nugget: f64,
    pub max_iter: usize,
    pub grad_tol: f64,
    pub init_ell_px: f64,
    pub ell_bounds_px: (f64, f64),
    pub sigma_bounds: (f64, f64),
}

impl Default for MleSection {
    fn default() -> Self {
        let d = bdgp_core::estimate::MleConfig::default();
        MleSection {
            nugget: d.nugget,
            max_iter: d.max_iter,
            grad_tol: d.grad_tol,
            init_ell_px: d.init_ell,
            ell_bounds_px: d.ell_bounds,
            sigma_bounds: d.sigma_bounds,
        }
    }
}

impl MleSection {
    pub fn to_core(&self) -> bdgp_core::estimate::MleConfig {
        bdgp_core::estimate::MleConfig {
            nugget: self.nugget,
            max_iter: self.max_iter,
            grad_tol: self.grad_tol,
            init_ell: self.init_ell_px,
            init_sigma: None,
            ell_bounds: self.ell_bounds_px,
            sigma_bounds: self.sigma_bounds,
        }
    }
}

#[derive(Debug, Clone, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct BlurSection {
    /// Point-spread-function full width at half maximum, meters.
    pub fwhm_m: f64,
    /// Native pixel edge of the blurred sensor, meters.
    pub native_px_m: f64,
    /// Sensor noise standard deviation, field units.
    pub sigma_sensor: f64,
}

#[derive(Debug, Clone, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct VarianceSection {
    pub variant: VarianceVariantName,
    pub sigma_floor: f64,
}

impl Default for VarianceSection {
    fn default() -> Self {
        VarianceSection {
            variant: VarianceVariantName::SingleBlur,
            sigma_floor: 1e-4,
        }
    }
}

#[derive(Debug, Clone, Copy, Deserialize, PartialEq, Eq)]
#[serde(rename_all = "snake_case")]
pub enum VarianceVariantName {
    SingleBlur,
    DoubleBlur,
}

impl From<VarianceVariantName> for VarianceVariant {
    fn from(v: VarianceVariantName) -> Self {
        match v {
            VarianceVariantName::SingleBlur => VarianceVariant::SingleBlur,
            VarianceVariantName::DoubleBlur => VarianceVariant::DoubleBlur,
        }
    }
}

#[derive(Debug, Clone, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct KrigeSection {
    /// Neighborhood dilation radius as a multiple of the blur width.
    pub radius_factor: f64,
    pub max_region_pixels: usize,
    pub include_background: bool,
}

impl Default for KrigeSection {
    fn default() -> Self {
        KrigeSection {
            radius_factor: 4.0,
            max_region_pixels: 20_000,
            include_background: false,
        }
    }
}

#[derive(Debug, Clone, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct VerifySection {
    pub n_rows: usize,
    pub n_cols: usize,
    pub pixel_size_m: f64,
    #[serde(default)]
    pub layout: VerifyLayout,
    /// Voronoi layout: number of regions.
    #[serde(default = "default_n_regions")]
    pub n_regions: usize,
    /// Field layout: field grid and road geometry.
    #[serde(default = "default_field_rows")]
    pub field_rows: usize,
    #[serde(default = "default_field_cols")]
    pub field_cols: usize,
    #[serde(default = "default_road_px")]
    pub road_px: usize,
    #[serde(default)]
    pub margin_px: usize,
    pub sigma_range: (f64, f64),
    pub ell_range_px: (f64, f64),
    #[serde(default = "default_bg_sigma")]
    pub background_sigma: f64,
    #[serde(default = "default_bg_ell")]
    pub background_ell_px: f64,
    /// Sensor noise for the synthetic observations, field units.
    pub sigma_sensor: f64,
    pub n_replicates: usize,
    #[serde(default = "default_true")]
    pub use_true_params: bool,
    #[serde(default = "default_scenes")]
    pub n_estimation_scenes: usize,
    #[serde(default = "default_true")]
    pub emit_heatmaps: bool,
}

#[derive(Debug, Clone, Copy, Default, Deserialize, PartialEq, Eq)]
#[serde(rename_all = "snake_case")]
pub enum VerifyLayout {
    #[default]
    Fields,
    Voronoi,
}

fn default_n_regions() -> usize {
    8
}
fn default_field_rows() -> usize {
    2
}
fn default_field_cols() -> usize {
    4
}
fn default_road_px() -> usize {
    4
}
fn default_bg_sigma() -> f64 {
    0.3
}
fn default_bg_ell() -> f64 {
    1.0
}
fn default_true() -> bool {
    true
}
fn default_scenes() -> usize {
    4
}

impl PipelineConfig {
    pub fn load(path: &Path) -> Result<Self, String> {
        let text = std::fs::read_to_string(path)
            .map_err(|e| format!("cannot read config {}: {e}", path.display()))?;
        let config: PipelineConfig =
            toml::from_str(&text).map_err(|e| format!("config {}: {e}", path.display()))?;
        Ok(config)
    }

    pub fn blur(&self) -> Result<&BlurSection, String> {
        self.blur
            .as_ref()
            .ok_or_else(|| "config is missing the [blur] section".to_string())
    }

    pub fn verify(&self) -> Result<&VerifySection, String> {
        self.verify
            .as_ref()
            .ok_or_else(|| "config is missing the [verify] section".to_string())
    }
}
