//! Region partitions of the grid: ingestion of oversegmented mask sets,
//! refinement into a non-overlapping labeling, and dilated per-region
//! neighborhoods for blur-aware kriging.
//!
//! Mask sets and partitions live in pixel space (they carry no
//! georeferencing); consumers match them against rasters by dimensions.
//!
//! # Mask-set format
//!
//! A JSON document
//!
//! ```text
//! {"magic":"BDGP-MASKS","version":1,"n_rows":..,"n_cols":..,
//!  "masks":[{"rle":[..]}, ..]}
//! ```
//!
//! where `rle` is a row-major run-length encoding of one boolean mask,
//! alternating (0-run, 1-run) lengths starting with a 0-run and summing to
//! `n_rows * n_cols`. `tools/masks_from_npy.py` converts a stack of boolean
//! masks exported from any external segmenter into this format.

use std::fs::File;
use std::io::{BufReader, BufWriter, Write};
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::grid::GridGeom;
use crate::{Error, Result};

pub const MASKS_MAGIC: &str = "BDGP-MASKS";
pub const PARTITION_MAGIC: &str = "BDGP-PARTITION";

/// Label of the background (uncovered / road) region.
pub const BACKGROUND: u32 = 0;

/// A set of possibly overlapping boolean masks on one grid.
#[derive(Debug, Clone)]
pub struct MaskSet {
    geom: GridGeom,
    masks: Vec<Vec<bool>>,
}

impl MaskSet {
    pub fn new(geom: GridGeom, masks: Vec<Vec<bool>>) -> Result<Self> {
        for (i, m) in masks.iter().enumerate() {
            if m.len() != geom.n_pixels() {
                return Err(Error::Format(format!(
                    "mask {i} has {} pixels for a {}x{} grid",
                    m.len(),
                    geom.n_rows,
                    geom.n_cols
                )));
            }
        }
        Ok(MaskSet { geom, masks })
    }

    pub fn geom(&self) -> &GridGeom {
        &self.geom
    }

    pub fn masks(&self) -> &[Vec<bool>] {
        &self.masks
    }

    pub fn len(&self) -> usize {
        self.masks.len()
    }

    pub fn is_empty(&self) -> bool {
        self.masks.is_empty()
    }
}

/// A non-overlapping labeling of every grid pixel. Labels 1..=N are regions;
/// label 0 is the background and may be empty. Every region 1..=N has at
/// least one pixel.
#[derive(Debug, Clone)]
pub struct Partition {
    geom: GridGeom,
    labels: Vec<u32>,
    region_pixels: Vec<Vec<usize>>, // index r-1 holds the pixels of region r
}

impl Partition {
    /// Builds a partition from a label array. Labels must be exactly
    /// {0} ∪ {1..=N} with every region in 1..=N non-empty.
    pub fn from_labels(geom: GridGeom, labels: Vec<u32>) -> Result<Self> {
        if labels.len() != geom.n_pixels() {
            return Err(Error::Format(format!(
                "label array has {} entries for a {}x{} grid",
                labels.len(),
                geom.n_rows,
                geom.n_cols
            )));
        }
        let n_regions = labels.iter().copied().max().unwrap_or(0) as usize;
        let mut region_pixels: Vec<Vec<usize>> = vec![Vec::new(); n_regions];
        for (idx, &label) in labels.iter().enumerate() {
            if label != BACKGROUND {
                region_pixels[label as usize - 1].push(idx);
            }
        }
        for (r, pixels) in region_pixels.iter().enumerate() {
            if pixels.is_empty() {
                return Err(Error::Format(format!("region {} has no pixels", r + 1)));
            }
        }
        Ok(Partition {
            geom,
            labels,
            region_pixels,
        })
    }

    pub fn geom(&self) -> &GridGeom {
        &self.geom
    }

    pub fn labels(&self) -> &[u32] {
        &self.labels
    }

    #[inline]
    pub fn label_at(&self, idx: usize) -> u32 {
        self.labels[idx]
    }

    /// Number of non-background regions.
    pub fn n_regions(&self) -> usize {
        self.region_pixels.len()
    }

    /// Pixels of region `id` (1..=N), in row-major order.
    pub fn region_pixels(&self, id: u32) -> Result<&[usize]> {
        if id == BACKGROUND || id as usize > self.region_pixels.len() {
            return Err(Error::InvalidArgument(format!("unknown region id {id}")));
        }
        Ok(&self.region_pixels[id as usize - 1])
    }

    /// Background pixels, in row-major order.
    pub fn background_pixels(&self) -> Vec<usize> {
        self.labels
            .iter()
            .enumerate()
            .filter(|(_, &l)| l == BACKGROUND)
            .map(|(i, _)| i)
            .collect()
    }

    /// Pixels carrying `label`, background included.
    pub fn pixels_of(&self, label: u32) -> Result<Vec<usize>> {
        if label == BACKGROUND {
            Ok(self.background_pixels())
        } else {
            Ok(self.region_pixels(label)?.to_vec())
        }
    }
}

/// A region core together with its dilation, used as the kriging work unit.
#[derive(Debug, Clone)]
pub struct Neighborhood {
    pub region_id: u32,
    pub core_pixels: Vec<usize>,
    pub dilated_pixels: Vec<usize>,
}

#[derive(Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
struct MaskRle {
    rle: Vec<u64>,
}

#[derive(Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
struct MaskFile {
    magic: String,
    version: u32,
    n_rows: usize,
    n_cols: usize,
    masks: Vec<MaskRle>,
}

fn decode_rle(rle: &[u64], n_pixels: usize, mask_index: usize) -> Result<Vec<bool>> {
    let mut out = vec![false; n_pixels];
    let mut pos: usize = 0;
    for (k, &run) in rle.iter().enumerate() {
        let run = run as usize;
        if pos + run > n_pixels {
            return Err(Error::Format(format!(
                "mask {mask_index}: run {k} extends past the end of the raster ({} > {n_pixels})",
                pos + run
            )));
        }
        if k % 2 == 1 {
            out[pos..pos + run].iter_mut().for_each(|b| *b = true);
        }
        pos += run;
    }
    if pos != n_pixels {
        return Err(Error::Format(format!(
            "mask {mask_index}: runs sum to {pos}, expected {n_pixels}"
        )));
    }
    Ok(out)
}

fn encode_rle(mask: &[bool]) -> Vec<u64> {
    let mut rle = Vec::new();
    let mut current = false; // encoding starts with a 0-run
    let mut run: u64 = 0;
    for &bit in mask {
        if bit == current {
            run += 1;
        } else {
            rle.push(run);
            current = bit;
            run = 1;
        }
    }
    rle.push(run);
    rle
}

/// Reads a mask set. Masks are returned in file order.
pub fn read_masks(path: impl AsRef<Path>) -> Result<MaskSet> {
    let path = path.as_ref();
    let file = File::open(path).map_err(|e| Error::io(path, e))?;
    let parsed: MaskFile = serde_json::from_reader(BufReader::new(file))
        .map_err(|e| Error::MalformedHeader(e.to_string()))?;
    if parsed.magic != MASKS_MAGIC {
        return Err(Error::MalformedHeader(format!(
            "expected magic {MASKS_MAGIC:?}, found {:?}",
            parsed.magic
        )));
    }
    if parsed.version != 1 {
        return Err(Error::MalformedHeader(format!(
            "unsupported version {}",
            parsed.version
        )));
    }
    let geom = GridGeom::pixel_space(parsed.n_rows, parsed.n_cols)?;
    let masks = parsed
        .masks
        .iter()
        .enumerate()
        .map(|(i, m)| decode_rle(&m.rle, geom.n_pixels(), i))
        .collect::<Result<Vec<_>>>()?;
    MaskSet::new(geom, masks)
}

/// Writes a mask set in the run-length-encoded JSON format.
pub fn write_masks(masks: &MaskSet, path: impl AsRef<Path>) -> Result<()> {
    let path = path.as_ref();
    let doc = MaskFile {
        magic: MASKS_MAGIC.to_string(),
        version: 1,
        n_rows: masks.geom().n_rows,
        n_cols: masks.geom().n_cols,
        masks: masks
            .masks()
            .iter()
            .map(|m| MaskRle { rle: encode_rle(m) })
            .collect(),
    };
    let file = File::create(path).map_err(|e| Error::io(path, e))?;
    let mut writer = BufWriter::new(file);
    serde_json::to_writer(&mut writer, &doc).map_err(|e| Error::Format(e.to_string()))?;
    writer.flush().map_err(|e| Error::io(path, e))
}

/// Refines an oversegmented mask set into a partition:
///
/// 1. drop masks with fewer than `min_area` pixels;
/// 2. order the survivors by area (ties broken by input order, earlier
///    masks treated as larger);
/// 3. iterate from largest to smallest, subtracting the current mask from
///    all previously kept masks wherever they overlap, then keeping it;
/// 4. drop kept masks whose surviving area is zero.
///
/// Pixels covered by no kept mask receive the background label 0. Region
/// ids 1..=N follow the kept order. The output is always a true partition:
/// disjoint regions covering every pixel exactly once.
pub fn refine_masks(mask_set: &MaskSet, min_area: usize) -> Partition {
    let geom = *mask_set.geom();
    let n_pixels = geom.n_pixels();

    let mut order: Vec<usize> = (0..mask_set.len())
        .filter(|&i| count_true(&mask_set.masks()[i]) >= min_area)
        .collect();
    // Largest first; input order breaks ties.
    order.sort_by_key(|&i| (std::cmp::Reverse(count_true(&mask_set.masks()[i])), i));

    let mut kept: Vec<Vec<bool>> = Vec::with_capacity(order.len());
    for &i in &order {
        let current = &mask_set.masks()[i];
        for prev in kept.iter_mut() {
            for (p, c) in prev.iter_mut().zip(current) {
                if *c {
                    *p = false;
                }
            }
        }
        kept.push(current.clone());
    }

    let mut labels = vec![BACKGROUND; n_pixels];
    let mut next_id: u32 = 0;
    for mask in &kept {
        if count_true(mask) == 0 {
            continue; // emptied by later subtraction
        }
        next_id += 1;
        for (idx, &bit) in mask.iter().enumerate() {
            if bit {
                labels[idx] = next_id;
            }
        }
    }

    Partition::from_labels(geom, labels).expect("refinement always yields a valid partition")
}

fn count_true(mask: &[bool]) -> usize {
    mask.iter().filter(|&&b| b).count()
}

/// Dilates an arbitrary pixel set with a Euclidean disk of radius
/// `radius_px` (center-to-center distance), clipped to the grid. The result
/// is sorted in row-major order and always contains the input set.
pub fn dilate_pixel_set(geom: &GridGeom, core: &[usize], radius_px: f64) -> Vec<usize> {
    let r_int = radius_px.floor() as i64;
    let r_sq = radius_px * radius_px;
    let mut offsets = Vec::new();
    for dr in -r_int..=r_int {
        for dc in -r_int..=r_int {
            if (dr * dr + dc * dc) as f64 <= r_sq {
                offsets.push((dr, dc));
            }
        }
    }

    let mut member = vec![false; geom.n_pixels()];
    for &idx in core {
        let (row, col) = geom.row_col(idx);
        for &(dr, dc) in &offsets {
            let r = row as i64 + dr;
            let c = col as i64 + dc;
            if r >= 0 && c >= 0 && (r as usize) < geom.n_rows && (c as usize) < geom.n_cols {
                member[geom.idx(r as usize, c as usize)] = true;
            }
        }
    }
    member
        .iter()
        .enumerate()
        .filter(|(_, &m)| m)
        .map(|(i, _)| i)
        .collect()
}

/// Dilates a region with a Euclidean disk of radius `radius_px`, clipped to
/// the grid. Radius 0 returns the core unchanged; dilation is monotone in
/// the radius.
pub fn dilate_region(partition: &Partition, region_id: u32, radius_px: f64) -> Result<Neighborhood> {
    if !(radius_px >= 0.0) {
        return Err(Error::InvalidArgument(format!(
            "dilation radius must be non-negative, got {radius_px}"
        )));
    }
    let core = partition.region_pixels(region_id)?.to_vec();
    let dilated_pixels = dilate_pixel_set(partition.geom(), &core, radius_px);
    Ok(Neighborhood {
        region_id,
        core_pixels: core,
        dilated_pixels,
    })
}

/// Dilated neighborhoods for every region 1..=N.
pub fn build_neighborhoods(partition: &Partition, radius_px: f64) -> Result<Vec<Neighborhood>> {
    (1..=partition.n_regions() as u32)
        .map(|id| dilate_region(partition, id, radius_px))
        .collect()
}

/// Per-region summary: area and row/col bounding box (background included,
/// with `bbox: None` when empty).
#[derive(Debug, Clone, Serialize)]
pub struct RegionStat {
    pub id: u32,
    pub area: usize,
    pub bbox: Option<BoundingBox>,
}

#[derive(Debug, Clone, Copy, Serialize)]
pub struct BoundingBox {
    pub row_min: usize,
    pub row_max: usize,
    pub col_min: usize,
    pub col_max: usize,
}

pub fn partition_stats(partition: &Partition) -> Vec<RegionStat> {
    let geom = partition.geom();
    let mut stats: Vec<RegionStat> = (0..=partition.n_regions() as u32)
        .map(|id| RegionStat {
            id,
            area: 0,
            bbox: None,
        })
        .collect();
    for (idx, &label) in partition.labels().iter().enumerate() {
        let (row, col) = geom.row_col(idx);
        let stat = &mut stats[label as usize];
        stat.area += 1;
        stat.bbox = Some(match stat.bbox {
            None => BoundingBox {
                row_min: row,
                row_max: row,
                col_min: col,
                col_max: col,
            },
            Some(b) => BoundingBox {
                row_min: b.row_min.min(row),
                row_max: b.row_max.max(row),
                col_min: b.col_min.min(col),
                col_max: b.col_max.max(col),
            },
        });
    }
    stats
}

#[derive(Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
struct PartitionFile {
    magic: String,
    version: u32,
    n_rows: usize,
    n_cols: usize,
    n_regions: usize,
    /// Row-major (label, run-length) pairs covering the whole grid.
    runs: Vec<(u32, u64)>,
}

/// Writes a partition as run-length-encoded labels. The encoding is
/// canonical (maximal runs), so rewriting an unchanged partition is
/// byte-identical.
pub fn write_partition(partition: &Partition, path: impl AsRef<Path>) -> Result<()> {
    let path = path.as_ref();
    let mut runs: Vec<(u32, u64)> = Vec::new();
    for &label in partition.labels() {
        match runs.last_mut() {
            Some((l, n)) if *l == label => *n += 1,
            _ => runs.push((label, 1)),
        }
    }
    let doc = PartitionFile {
        magic: PARTITION_MAGIC.to_string(),
        version: 1,
        n_rows: partition.geom().n_rows,
        n_cols: partition.geom().n_cols,
        n_regions: partition.n_regions(),
        runs,
    };
    let file = File::create(path).map_err(|e| Error::io(path, e))?;
    let mut writer = BufWriter::new(file);
    serde_json::to_writer(&mut writer, &doc).map_err(|e| Error::Format(e.to_string()))?;
    writer.flush().map_err(|e| Error::io(path, e))
}

pub fn read_partition(path: impl AsRef<Path>) -> Result<Partition> {
    let path = path.as_ref();
    let file = File::open(path).map_err(|e| Error::io(path, e))?;
    let parsed: PartitionFile = serde_json::from_reader(BufReader::new(file))
        .map_err(|e| Error::MalformedHeader(e.to_string()))?;
    if parsed.magic != PARTITION_MAGIC {
        return Err(Error::MalformedHeader(format!(
            "expected magic {PARTITION_MAGIC:?}, found {:?}",
            parsed.magic
        )));
    }
    if parsed.version != 1 {
        return Err(Error::MalformedHeader(format!(
            "unsupported version {}",
            parsed.version
        )));
    }
    let geom = GridGeom::pixel_space(parsed.n_rows, parsed.n_cols)?;
    let mut labels = Vec::with_capacity(geom.n_pixels());
    for &(label, run) in &parsed.runs {
        if labels.len() + run as usize > geom.n_pixels() {
            return Err(Error::Format("label runs extend past the end of the raster".into()));
        }
        labels.extend(std::iter::repeat(label).take(run as usize));
    }
    if labels.len() != geom.n_pixels() {
        return Err(Error::Format(format!(
            "label runs sum to {}, expected {}",
            labels.len(),
            geom.n_pixels()
        )));
    }
    let partition = Partition::from_labels(geom, labels)?;
    if partition.n_regions() != parsed.n_regions {
        return Err(Error::Format(format!(
            "header announces {} regions, labels contain {}",
            parsed.n_regions,
            partition.n_regions()
        )));
    }
    Ok(partition)
}
