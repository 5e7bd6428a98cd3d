//! Raster data model, grid geometry, portable file I/O, resampling and
//! heatmap rendering.
//!
//! All kernel math elsewhere in the crate works in units of grid pixels;
//! `pixel_size_m` exists only for unit conversion at the boundary (e.g. when
//! deriving the blur width from a FWHM given in meters).
//!
//! # Portable raster format
//!
//! A UTF-8 JSON header line terminated by `\n`:
//!
//! ```text
//! {"magic":"BDGP-RASTER","version":1,"n_rows":..,"n_cols":..,
//!  "pixel_size_m":..,"origin":[..,..],"timestamp_days":..|null}
//! ```
//!
//! followed by `n_rows * n_cols` little-endian IEEE-754 float64 values in
//! row-major order. NaN in the payload marks an invalid pixel; the in-memory
//! representation uses the same convention, so round trips are bit-exact.

use std::fs::File;
use std::io::{BufReader, BufWriter, Read, Write};
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::{Error, Result};

pub const RASTER_MAGIC: &str = "BDGP-RASTER";
pub const FORMAT_VERSION: u32 = 1;

/// Grid geometry: dimensions, square pixel edge in meters and the planar
/// coordinates of the center of pixel (0, 0).
///
/// Two geometries are compatible iff all four fields match exactly.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct GridGeom {
    pub n_rows: usize,
    pub n_cols: usize,
    pub pixel_size_m: f64,
    pub origin: (f64, f64),
}

impl GridGeom {
    pub fn new(n_rows: usize, n_cols: usize, pixel_size_m: f64, origin: (f64, f64)) -> Result<Self> {
        if n_rows == 0 || n_cols == 0 {
            return Err(Error::InvalidArgument(format!(
                "grid dimensions must be positive, got {n_rows}x{n_cols}"
            )));
        }
        if !(pixel_size_m > 0.0) || !pixel_size_m.is_finite() {
            return Err(Error::InvalidArgument(format!(
                "pixel_size_m must be positive and finite, got {pixel_size_m}"
            )));
        }
        if !origin.0.is_finite() || !origin.1.is_finite() {
            return Err(Error::InvalidArgument("origin must be finite".into()));
        }
        Ok(GridGeom {
            n_rows,
            n_cols,
            pixel_size_m,
            origin,
        })
    }

    /// Pixel-space geometry (unit pixel size, origin at zero), used for
    /// artifacts such as mask sets that carry no georeferencing.
    pub fn pixel_space(n_rows: usize, n_cols: usize) -> Result<Self> {
        GridGeom::new(n_rows, n_cols, 1.0, (0.0, 0.0))
    }

    #[inline]
    pub fn n_pixels(&self) -> usize {
        self.n_rows * self.n_cols
    }

    #[inline]
    pub fn idx(&self, row: usize, col: usize) -> usize {
        debug_assert!(row < self.n_rows && col < self.n_cols);
        row * self.n_cols + col
    }

    #[inline]
    pub fn row_col(&self, idx: usize) -> (usize, usize) {
        (idx / self.n_cols, idx % self.n_cols)
    }

    /// Exact equality of all four fields.
    pub fn compatible(&self, other: &GridGeom) -> bool {
        self == other
    }

    pub fn same_dims(&self, other: &GridGeom) -> bool {
        self.n_rows == other.n_rows && self.n_cols == other.n_cols
    }

    /// Planar coordinates (meters) of the center of pixel (row, col).
    /// x grows with column, y with row.
    pub fn pixel_center_m(&self, row: usize, col: usize) -> (f64, f64) {
        (
            self.origin.0 + col as f64 * self.pixel_size_m,
            self.origin.1 + row as f64 * self.pixel_size_m,
        )
    }

    /// Euclidean center-to-center distance between two pixels, in pixels.
    #[inline]
    pub fn pixel_distance(&self, a: usize, b: usize) -> f64 {
        self.pixel_sq_distance(a, b).sqrt()
    }

    /// Squared center-to-center distance between two pixels, in pixels².
    #[inline]
    pub fn pixel_sq_distance(&self, a: usize, b: usize) -> f64 {
        let (ra, ca) = self.row_col(a);
        let (rb, cb) = self.row_col(b);
        let dr = ra as f64 - rb as f64;
        let dc = ca as f64 - cb as f64;
        dr * dr + dc * dc
    }
}

/// A rectangular grid of f64 values with an implicit validity mask: a pixel
/// is invalid iff it stores NaN. Valid pixels are always finite; the
/// constructors enforce this, so the invariant holds by construction.
#[derive(Debug, Clone)]
pub struct Raster {
    geom: GridGeom,
    values: Vec<f64>,
    timestamp_days: Option<f64>,
}

impl Raster {
    /// Builds a raster from row-major values. NaN entries become invalid
    /// pixels; non-NaN entries must be finite.
    pub fn from_values(geom: GridGeom, values: Vec<f64>, timestamp_days: Option<f64>) -> Result<Self> {
        if values.len() != geom.n_pixels() {
            return Err(Error::InvalidArgument(format!(
                "value buffer has {} entries for a {}x{} grid",
                values.len(),
                geom.n_rows,
                geom.n_cols
            )));
        }
        for (i, v) in values.iter().enumerate() {
            if v.is_infinite() {
                let (row, col) = geom.row_col(i);
                return Err(Error::NonFiniteValue { row, col });
            }
        }
        if let Some(t) = timestamp_days {
            if !t.is_finite() {
                return Err(Error::InvalidArgument("timestamp_days must be finite".into()));
            }
        }
        Ok(Raster {
            geom,
            values,
            timestamp_days,
        })
    }

    pub fn constant(geom: GridGeom, value: f64, timestamp_days: Option<f64>) -> Result<Self> {
        Raster::from_values(geom, vec![value; geom.n_pixels()], timestamp_days)
    }

    /// All-invalid raster.
    pub fn invalid(geom: GridGeom, timestamp_days: Option<f64>) -> Self {
        Raster {
            geom,
            values: vec![f64::NAN; geom.n_pixels()],
            timestamp_days,
        }
    }

    #[inline]
    pub fn geom(&self) -> &GridGeom {
        &self.geom
    }

    #[inline]
    pub fn values(&self) -> &[f64] {
        &self.values
    }

    pub fn timestamp_days(&self) -> Option<f64> {
        self.timestamp_days
    }

    pub fn with_timestamp(mut self, timestamp_days: Option<f64>) -> Self {
        self.timestamp_days = timestamp_days;
        self
    }

    #[inline]
    pub fn get(&self, row: usize, col: usize) -> f64 {
        self.values[self.geom.idx(row, col)]
    }

    #[inline]
    pub fn get_idx(&self, idx: usize) -> f64 {
        self.values[idx]
    }

    #[inline]
    pub fn is_valid(&self, row: usize, col: usize) -> bool {
        !self.get(row, col).is_nan()
    }

    #[inline]
    pub fn is_valid_idx(&self, idx: usize) -> bool {
        !self.values[idx].is_nan()
    }

    /// Sets a pixel. Finite values mark the pixel valid; NaN marks it
    /// invalid; infinities are rejected.
    pub fn set(&mut self, row: usize, col: usize, value: f64) -> Result<()> {
        if value.is_infinite() {
            return Err(Error::NonFiniteValue { row, col });
        }
        let idx = self.geom.idx(row, col);
        self.values[idx] = value;
        Ok(())
    }

    pub fn set_invalid(&mut self, row: usize, col: usize) {
        let idx = self.geom.idx(row, col);
        self.values[idx] = f64::NAN;
    }

    pub fn valid_count(&self) -> usize {
        self.values.iter().filter(|v| !v.is_nan()).count()
    }

    pub fn valid_values(&self) -> impl Iterator<Item = f64> + '_ {
        self.values.iter().copied().filter(|v| !v.is_nan())
    }

    /// (min, max) over valid pixels, or None if every pixel is invalid.
    pub fn min_max_valid(&self) -> Option<(f64, f64)> {
        let mut it = self.valid_values();
        let first = it.next()?;
        let mut lo = first;
        let mut hi = first;
        for v in it {
            if v < lo {
                lo = v;
            }
            if v > hi {
                hi = v;
            }
        }
        Some((lo, hi))
    }

    /// Bit-exact equality: geometry, timestamp and every value (NaN bits
    /// compare equal to themselves).
    pub fn bit_eq(&self, other: &Raster) -> bool {
        self.geom == other.geom
            && self.timestamp_days.map(f64::to_bits) == other.timestamp_days.map(f64::to_bits)
            && self.values.len() == other.values.len()
            && self
                .values
                .iter()
                .zip(&other.values)
                .all(|(a, b)| a.to_bits() == b.to_bits())
    }
}

/// An ordered list of rasters on one grid with strictly increasing
/// timestamps.
#[derive(Debug, Clone)]
pub struct RasterStack {
    layers: Vec<Raster>,
}

impl RasterStack {
    pub fn new(layers: Vec<Raster>) -> Result<Self> {
        let first = layers
            .first()
            .ok_or_else(|| Error::InvalidArgument("raster stack must have at least one layer".into()))?;
        let geom = *first.geom();
        let mut prev_t = f64::NEG_INFINITY;
        for (i, layer) in layers.iter().enumerate() {
            if !layer.geom().compatible(&geom) {
                return Err(Error::GeometryMismatch(format!(
                    "stack layer {i} does not share the stack geometry"
                )));
            }
            let t = layer.timestamp_days().ok_or_else(|| {
                Error::InvalidArgument(format!("stack layer {i} has no timestamp"))
            })?;
            if t <= prev_t {
                return Err(Error::InvalidArgument(format!(
                    "stack timestamps must be strictly increasing (layer {i}: {t} after {prev_t})"
                )));
            }
            prev_t = t;
        }
        Ok(RasterStack { layers })
    }

    pub fn geom(&self) -> &GridGeom {
        self.layers[0].geom()
    }

    pub fn layers(&self) -> &[Raster] {
        &self.layers
    }

    pub fn len(&self) -> usize {
        self.layers.len()
    }

    pub fn is_empty(&self) -> bool {
        self.layers.is_empty()
    }

    pub fn timestamps(&self) -> Vec<f64> {
        self.layers.iter().map(|l| l.timestamp_days().unwrap()).collect()
    }
}

#[derive(Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
struct RasterHeader {
    magic: String,
    version: u32,
    n_rows: usize,
    n_cols: usize,
    pixel_size_m: f64,
    origin: [f64; 2],
    timestamp_days: Option<f64>,
}

fn read_header_line(reader: &mut impl Read, path: &Path) -> Result<String> {
    let mut line = Vec::new();
    let mut byte = [0u8; 1];
    loop {
        match reader.read(&mut byte) {
            Ok(0) => {
                return Err(Error::MalformedHeader(
                    "file ended before the header line terminator".into(),
                ))
            }
            Ok(_) => {
                if byte[0] == b'\n' {
                    break;
                }
                line.push(byte[0]);
                if line.len() > 64 * 1024 {
                    return Err(Error::MalformedHeader("header line exceeds 64 KiB".into()));
                }
            }
            Err(e) => return Err(Error::io(path, e)),
        }
    }
    String::from_utf8(line).map_err(|_| Error::MalformedHeader("header is not valid UTF-8".into()))
}

/// Reads a raster from the portable format. The round trip through
/// [`write_raster`] is bit-exact.
pub fn read_raster(path: impl AsRef<Path>) -> Result<Raster> {
    let path = path.as_ref();
    let file = File::open(path).map_err(|e| Error::io(path, e))?;
    let mut reader = BufReader::new(file);
    let header_line = read_header_line(&mut reader, path)?;
    let header: RasterHeader = serde_json::from_str(&header_line)
        .map_err(|e| Error::MalformedHeader(e.to_string()))?;
    if header.magic != RASTER_MAGIC {
        return Err(Error::MalformedHeader(format!(
            "expected magic {RASTER_MAGIC:?}, found {:?}",
            header.magic
        )));
    }
    if header.version != FORMAT_VERSION {
        return Err(Error::MalformedHeader(format!(
            "unsupported version {}",
            header.version
        )));
    }
    let geom = GridGeom::new(
        header.n_rows,
        header.n_cols,
        header.pixel_size_m,
        (header.origin[0], header.origin[1]),
    )?;

    let mut payload = Vec::new();
    reader
        .read_to_end(&mut payload)
        .map_err(|e| Error::io(path, e))?;
    let expected = geom.n_pixels() as u64 * 8;
    if payload.len() as u64 != expected {
        return Err(Error::PayloadSize {
            expected,
            got: payload.len() as u64,
        });
    }
    let mut values = Vec::with_capacity(geom.n_pixels());
    for chunk in payload.chunks_exact(8) {
        values.push(f64::from_le_bytes(chunk.try_into().unwrap()));
    }
    // from_values reports infinities with the offending pixel index.
    Raster::from_values(geom, values, header.timestamp_days)
}

/// Writes a raster in the portable format.
pub fn write_raster(raster: &Raster, path: impl AsRef<Path>) -> Result<()> {
    let path = path.as_ref();
    let file = File::create(path).map_err(|e| Error::io(path, e))?;
    let mut writer = BufWriter::new(file);
    let header = RasterHeader {
        magic: RASTER_MAGIC.to_string(),
        version: FORMAT_VERSION,
        n_rows: raster.geom().n_rows,
        n_cols: raster.geom().n_cols,
        pixel_size_m: raster.geom().pixel_size_m,
        origin: [raster.geom().origin.0, raster.geom().origin.1],
        timestamp_days: raster.timestamp_days(),
    };
    let header_line = serde_json::to_string(&header).expect("header serialization cannot fail");
    writer
        .write_all(header_line.as_bytes())
        .and_then(|_| writer.write_all(b"\n"))
        .map_err(|e| Error::io(path, e))?;
    for v in raster.values() {
        writer
            .write_all(&v.to_le_bytes())
            .map_err(|e| Error::io(path, e))?;
    }
    writer.flush().map_err(|e| Error::io(path, e))
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum ResampleMethod {
    Nearest,
    Bilinear,
}

/// Resamples `src` onto `target`. Nearest keeps the source value of the
/// closest pixel center; bilinear interpolates the four surrounding pixels,
/// renormalizing the weights over valid pixels. A target pixel becomes
/// invalid when its entire source support is invalid or lies outside the
/// source extent.
pub fn resample_to_grid(src: &Raster, target: &GridGeom, method: ResampleMethod) -> Result<Raster> {
    let sg = src.geom();
    let ratio = target.pixel_size_m / sg.pixel_size_m;
    if !(0.1..=10.0).contains(&ratio) {
        return Err(Error::InvalidArgument(format!(
            "target/source resolution ratio {ratio:.4} outside [0.1, 10]"
        )));
    }
    // Extents as closed intervals over pixel areas.
    let src_x = (
        sg.origin.0 - 0.5 * sg.pixel_size_m,
        sg.origin.0 + (sg.n_cols as f64 - 0.5) * sg.pixel_size_m,
    );
    let src_y = (
        sg.origin.1 - 0.5 * sg.pixel_size_m,
        sg.origin.1 + (sg.n_rows as f64 - 0.5) * sg.pixel_size_m,
    );
    let tgt_x = (
        target.origin.0 - 0.5 * target.pixel_size_m,
        target.origin.0 + (target.n_cols as f64 - 0.5) * target.pixel_size_m,
    );
    let tgt_y = (
        target.origin.1 - 0.5 * target.pixel_size_m,
        target.origin.1 + (target.n_rows as f64 - 0.5) * target.pixel_size_m,
    );
    if src_x.1 < tgt_x.0 || tgt_x.1 < src_x.0 || src_y.1 < tgt_y.0 || tgt_y.1 < src_y.0 {
        return Err(Error::InvalidArgument(
            "empty overlap between source and target extents".into(),
        ));
    }

    let mut out = Raster::invalid(*target, src.timestamp_days());
    for row in 0..target.n_rows {
        for col in 0..target.n_cols {
            let (x, y) = target.pixel_center_m(row, col);
            // Fractional source pixel coordinates of this target center.
            let u = (x - sg.origin.0) / sg.pixel_size_m;
            let v = (y - sg.origin.1) / sg.pixel_size_m;
            let value = match method {
                ResampleMethod::Nearest => {
                    let c = u.round();
                    let r = v.round();
                    if r < 0.0 || c < 0.0 || r >= sg.n_rows as f64 || c >= sg.n_cols as f64 {
                        f64::NAN
                    } else {
                        src.get(r as usize, c as usize)
                    }
                }
                ResampleMethod::Bilinear => {
                    if u < -0.5 || v < -0.5 || u > sg.n_cols as f64 - 0.5 || v > sg.n_rows as f64 - 0.5
                    {
                        f64::NAN
                    } else {
                        let uc = u.clamp(0.0, (sg.n_cols - 1) as f64);
                        let vc = v.clamp(0.0, (sg.n_rows - 1) as f64);
                        let c0 = (uc.floor() as usize).min(sg.n_cols.saturating_sub(2));
                        let r0 = (vc.floor() as usize).min(sg.n_rows.saturating_sub(2));
                        let fu = uc - c0 as f64;
                        let fv = vc - r0 as f64;
                        let c1 = (c0 + 1).min(sg.n_cols - 1);
                        let r1 = (r0 + 1).min(sg.n_rows - 1);
                        let corners = [
                            (src.get(r0, c0), (1.0 - fu) * (1.0 - fv)),
                            (src.get(r0, c1), fu * (1.0 - fv)),
                            (src.get(r1, c0), (1.0 - fu) * fv),
                            (src.get(r1, c1), fu * fv),
                        ];
                        let mut acc = 0.0;
                        let mut wsum = 0.0;
                        for (val, w) in corners {
                            if !val.is_nan() && w > 0.0 {
                                acc += w * val;
                                wsum += w;
                            }
                        }
                        if wsum > 0.0 {
                            acc / wsum
                        } else {
                            f64::NAN
                        }
                    }
                }
            };
            if !value.is_nan() {
                out.set(row, col, value)?;
            }
        }
    }
    Ok(out)
}

/// Named color palettes for heatmap rendering.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Palette {
    Viridis,
    Gray,
    Coolwarm,
}

impl Palette {
    pub fn from_name(name: &str) -> Result<Self> {
        match name {
            "viridis" => Ok(Palette::Viridis),
            "gray" | "grey" => Ok(Palette::Gray),
            "coolwarm" => Ok(Palette::Coolwarm),
            other => Err(Error::InvalidArgument(format!("unknown palette {other:?}"))),
        }
    }

    fn anchors(&self) -> &'static [[u8; 3]] {
        match self {
            Palette::Viridis => &[
                [0x44, 0x01, 0x54],
                [0x48, 0x28, 0x78],
                [0x3e, 0x4a, 0x89],
                [0x31, 0x68, 0x8e],
                [0x26, 0x82, 0x8e],
                [0x1f, 0x9e, 0x89],
                [0x35, 0xb7, 0x79],
                [0x6e, 0xce, 0x58],
                [0xfd, 0xe7, 0x25],
            ],
            Palette::Gray => &[[0x00, 0x00, 0x00], [0xff, 0xff, 0xff]],
            Palette::Coolwarm => &[
                [0x3b, 0x4c, 0xc0],
                [0x8c, 0xab, 0xf0],
                [0xdd, 0xdd, 0xdd],
                [0xf0, 0x9b, 0x7d],
                [0xb4, 0x04, 0x26],
            ],
        }
    }

    /// Linear interpolation through the anchor colors, t in [0, 1].
    pub fn sample(&self, t: f64) -> [u8; 3] {
        let anchors = self.anchors();
        let t = t.clamp(0.0, 1.0);
        let pos = t * (anchors.len() - 1) as f64;
        let i = (pos.floor() as usize).min(anchors.len() - 2);
        let f = pos - i as f64;
        let a = anchors[i];
        let b = anchors[i + 1];
        let mut out = [0u8; 3];
        for k in 0..3 {
            out[k] = (a[k] as f64 + f * (b[k] as f64 - a[k] as f64)).round() as u8;
        }
        out
    }
}

/// Renders a raster to an 8-bit RGBA PNG. Invalid pixels are transparent.
/// Without an explicit range, the min/max of the valid pixels is used; a
/// degenerate range maps every value to the palette midpoint.
pub fn render_heatmap(
    raster: &Raster,
    path: impl AsRef<Path>,
    palette: Palette,
    range: Option<(f64, f64)>,
) -> Result<()> {
    let path = path.as_ref();
    let (lo, hi) = match range {
        Some(r) => r,
        None => raster.min_max_valid().ok_or_else(|| {
            Error::NoValidData("cannot auto-range a heatmap of an all-invalid raster".into())
        })?,
    };
    if !lo.is_finite() || !hi.is_finite() || hi < lo {
        return Err(Error::InvalidArgument(format!(
            "invalid heatmap range ({lo}, {hi})"
        )));
    }
    let geom = raster.geom();
    let mut rgba = vec![0u8; geom.n_pixels() * 4];
    for (i, v) in raster.values().iter().enumerate() {
        if v.is_nan() {
            continue; // transparent
        }
        let t = if hi > lo { (v - lo) / (hi - lo) } else { 0.5 };
        let [r, g, b] = palette.sample(t);
        rgba[4 * i] = r;
        rgba[4 * i + 1] = g;
        rgba[4 * i + 2] = b;
        rgba[4 * i + 3] = 0xff;
    }
    write_rgba_png(path, geom.n_cols as u32, geom.n_rows as u32, &rgba)
}

/// Low-level PNG writer shared with the categorical label rendering in the
/// CLI.
pub fn write_rgba_png(path: impl AsRef<Path>, width: u32, height: u32, rgba: &[u8]) -> Result<()> {
    let path = path.as_ref();
    let file = File::create(path).map_err(|e| Error::io(path, e))?;
    let writer = BufWriter::new(file);
    let mut encoder = png::Encoder::new(writer, width, height);
    encoder.set_color(png::ColorType::Rgba);
    encoder.set_depth(png::BitDepth::Eight);
    let mut png_writer = encoder
        .write_header()
        .map_err(|e| Error::Format(format!("png header: {e}")))?;
    png_writer
        .write_image_data(rgba)
        .map_err(|e| Error::Format(format!("png payload: {e}")))?;
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;
    use tempfile::tempdir;

    fn geom(n_rows: usize, n_cols: usize) -> GridGeom {
        GridGeom::new(n_rows, n_cols, 30.0, (0.0, 0.0)).unwrap()
    }

    #[test]
    fn round_trip_identity() {
        let dir = tempdir().unwrap();
        let path = dir.path().join("r.raster");
        let r = Raster::from_values(geom(2, 2), vec![1.0, 2.0, 3.0, 4.0], Some(12.5)).unwrap();
        write_raster(&r, &path).unwrap();
        let back = read_raster(&path).unwrap();
        assert!(r.bit_eq(&back));
    }

    #[test]
    fn round_trip_preserves_invalid_pixels() {
        let dir = tempdir().unwrap();
        let path = dir.path().join("r.raster");
        let r = Raster::from_values(geom(1, 3), vec![0.5, f64::NAN, -3.25], None).unwrap();
        write_raster(&r, &path).unwrap();
        let back = read_raster(&path).unwrap();
        assert!(r.bit_eq(&back));
        assert!(!back.is_valid(0, 1));
        assert_eq!(back.valid_count(), 2);
    }

    #[test]
    fn payload_size_mismatch_is_reported() {
        let dir = tempdir().unwrap();
        let path = dir.path().join("bad.raster");
        let r = Raster::from_values(geom(2, 2), vec![1.0, 2.0, 3.0, 4.0], None).unwrap();
        write_raster(&r, &path).unwrap();
        // truncate one byte off the payload
        let bytes = std::fs::read(&path).unwrap();
        std::fs::write(&path, &bytes[..bytes.len() - 1]).unwrap();
        match read_raster(&path) {
            Err(Error::PayloadSize { expected: 32, got: 31 }) => {}
            other => panic!("expected payload size error, got {other:?}"),
        }
    }

    #[test]
    fn infinite_value_names_the_pixel() {
        let dir = tempdir().unwrap();
        let path = dir.path().join("inf.raster");
        let r = Raster::from_values(geom(2, 2), vec![1.0, 2.0, 3.0, 4.0], None).unwrap();
        write_raster(&r, &path).unwrap();
        let mut bytes = std::fs::read(&path).unwrap();
        let payload_start = bytes.len() - 32;
        // overwrite pixel (1, 0) with +inf
        bytes[payload_start + 16..payload_start + 24].copy_from_slice(&f64::INFINITY.to_le_bytes());
        std::fs::write(&path, &bytes).unwrap();
        match read_raster(&path) {
            Err(Error::NonFiniteValue { row: 1, col: 0 }) => {}
            other => panic!("expected non-finite error, got {other:?}"),
        }
    }

    #[test]
    fn malformed_header_is_reported() {
        let dir = tempdir().unwrap();
        let path = dir.path().join("junk.raster");
        std::fs::write(&path, b"{\"magic\":\"nope\"}\n").unwrap();
        assert!(matches!(read_raster(&path), Err(Error::MalformedHeader(_))));
    }

    #[test]
    fn one_by_one_payload_is_eight_bytes_of_zero() {
        let dir = tempdir().unwrap();
        let path = dir.path().join("one.raster");
        let r = Raster::from_values(geom(1, 1), vec![0.0], None).unwrap();
        write_raster(&r, &path).unwrap();
        let bytes = std::fs::read(&path).unwrap();
        let newline = bytes.iter().position(|&b| b == b'\n').unwrap();
        assert_eq!(&bytes[newline + 1..], &[0u8; 8]);
    }

    #[test]
    fn resample_identity_nearest() {
        let g = geom(3, 4);
        let mut r = Raster::from_values(g, (0..12).map(|i| i as f64).collect(), None).unwrap();
        r.set_invalid(1, 2);
        let out = resample_to_grid(&r, &g, ResampleMethod::Nearest).unwrap();
        assert!(out.bit_eq(&r));
    }

    #[test]
    fn resample_constant_preserved_both_methods() {
        let src = Raster::constant(geom(4, 4), 7.5, None).unwrap();
        let target = GridGeom::new(6, 6, 20.0, (5.0, 5.0)).unwrap();
        for method in [ResampleMethod::Nearest, ResampleMethod::Bilinear] {
            let out = resample_to_grid(&src, &target, method).unwrap();
            for v in out.valid_values() {
                assert!((v - 7.5).abs() < 1e-12);
            }
            assert!(out.valid_count() > 0);
        }
    }

    #[test]
    fn bilinear_center_of_two_by_two() {
        // src rows [[0,0],[2,2]]; a single target pixel centered between all four.
        let src = Raster::from_values(geom(2, 2), vec![0.0, 0.0, 2.0, 2.0], None).unwrap();
        let target = GridGeom::new(1, 1, 30.0, (15.0, 15.0)).unwrap();
        let out = resample_to_grid(&src, &target, ResampleMethod::Bilinear).unwrap();
        assert!((out.get(0, 0) - 1.0).abs() < 1e-12);
    }

    #[test]
    fn resample_rejects_empty_overlap() {
        let src = Raster::constant(geom(2, 2), 1.0, None).unwrap();
        let target = GridGeom::new(2, 2, 30.0, (1e6, 1e6)).unwrap();
        assert!(matches!(
            resample_to_grid(&src, &target, ResampleMethod::Nearest),
            Err(Error::InvalidArgument(_))
        ));
    }

    #[test]
    fn resample_rejects_extreme_resolution_ratio() {
        let src = Raster::constant(geom(2, 2), 1.0, None).unwrap();
        let target = GridGeom::new(2, 2, 301.0, (0.0, 0.0)).unwrap();
        assert!(matches!(
            resample_to_grid(&src, &target, ResampleMethod::Bilinear),
            Err(Error::InvalidArgument(_))
        ));
    }

    #[test]
    fn heatmap_endpoints_and_transparency() {
        let dir = tempdir().unwrap();
        let path = dir.path().join("h.png");
        let r = Raster::from_values(geom(1, 3), vec![0.0, 1.0, f64::NAN], None).unwrap();
        render_heatmap(&r, &path, Palette::Viridis, Some((0.0, 1.0))).unwrap();
        let decoder = png::Decoder::new(BufReader::new(File::open(&path).unwrap()));
        let mut reader = decoder.read_info().unwrap();
        let mut buf = vec![0; reader.output_buffer_size().unwrap()];
        let info = reader.next_frame(&mut buf).unwrap();
        assert_eq!((info.width, info.height), (3, 1));
        let anchors = Palette::Viridis.anchors();
        assert_eq!(&buf[0..3], &anchors[0]);
        assert_eq!(&buf[4..7], anchors.last().unwrap());
        assert_eq!(buf[11], 0, "invalid pixel must be transparent");
    }

    #[test]
    fn heatmap_all_invalid_without_range_errors() {
        let dir = tempdir().unwrap();
        let r = Raster::invalid(geom(2, 2), None);
        assert!(matches!(
            render_heatmap(&r, dir.path().join("x.png"), Palette::Gray, None),
            Err(Error::NoValidData(_))
        ));
    }

    #[test]
    fn stack_requires_increasing_timestamps() {
        let a = Raster::constant(geom(1, 1), 0.0, Some(3.0)).unwrap();
        let b = Raster::constant(geom(1, 1), 0.0, Some(3.0)).unwrap();
        assert!(RasterStack::new(vec![a.clone()]).is_ok());
        assert!(RasterStack::new(vec![a, b]).is_err());
    }

    proptest! {
        #[test]
        fn prop_round_trip_bit_exact(
            n_rows in 1usize..6,
            n_cols in 1usize..6,
            seed in any::<u64>(),
        ) {
            use rand::{Rng, SeedableRng};
            let mut rng = rand_chacha::ChaCha12Rng::seed_from_u64(seed);
            let g = GridGeom::new(n_rows, n_cols, 30.0, (rng.random(), rng.random())).unwrap();
            let values: Vec<f64> = (0..g.n_pixels())
                .map(|_| if rng.random_bool(0.2) { f64::NAN } else { rng.random_range(-1e6..1e6) })
                .collect();
            let r = Raster::from_values(g, values, Some(rng.random_range(0.0..1e4))).unwrap();
            let dir = tempdir().unwrap();
            let path = dir.path().join("p.raster");
            write_raster(&r, &path).unwrap();
            prop_assert!(read_raster(&path).unwrap().bit_eq(&r));
        }

        #[test]
        fn prop_bilinear_within_valid_bounds(seed in any::<u64>()) {
            use rand::{Rng, SeedableRng};
            let mut rng = rand_chacha::ChaCha12Rng::seed_from_u64(seed);
            let g = geom(5, 5);
            let values: Vec<f64> = (0..25).map(|_| rng.random_range(-10.0..10.0)).collect();
            let src = Raster::from_values(g, values, None).unwrap();
            let (lo, hi) = src.min_max_valid().unwrap();
            let target = GridGeom::new(9, 9, 17.0, (-3.0, 2.0)).unwrap();
            let out = resample_to_grid(&src, &target, ResampleMethod::Bilinear).unwrap();
            for v in out.valid_values() {
                prop_assert!(v >= lo - 1e-12 && v <= hi + 1e-12);
            }
        }
    }
}
