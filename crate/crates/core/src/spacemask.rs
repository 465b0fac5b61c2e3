//! Space masks, proxy labels and slit probes.
//!
//! A space mask splits an image into `N` equal bands along one direction and
//! gives each band a position class. Multiplying a binary skeleton by a
//! horizontal and a vertical mask yields the pair of per-pixel targets the
//! network learns to predict.

use std::fs::File;
use std::io::BufWriter;
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::dataio::SkeletonSample;
use crate::error::{Error, Result};
use crate::grid::Grid;

/// Axis along which the band index changes.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Direction {
    /// Bands are columns; the label varies with the column index.
    Horizontal,
    /// Bands are rows; the label varies with the row index.
    Vertical,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum MaskScheme {
    /// Labels `1..=N` ascending along the direction.
    Xy,
    /// Labels `1..=N/2`, 1 at the centre and growing towards both edges.
    XySymmetric,
}

impl MaskScheme {
    pub fn max_class(self, regions: usize) -> usize {
        match self {
            MaskScheme::Xy => regions,
            MaskScheme::XySymmetric => regions / 2,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct SpaceMask {
    pub labels: Grid<u32>,
    pub direction: Direction,
    pub scheme: MaskScheme,
    pub regions: usize,
    pub max_class: usize,
}

impl SpaceMask {
    /// Label of every position along the mask direction.
    pub fn band_labels(&self) -> Vec<u32> {
        match self.direction {
            Direction::Horizontal => self.labels.row(0).to_vec(),
            Direction::Vertical => (0..self.labels.rows()).map(|r| self.labels.at(r, 0)).collect(),
        }
    }

    /// Number of output channels a classifier needs (background included).
    pub fn num_classes(&self) -> usize {
        self.max_class + 1
    }
}

/// Region index owning position `pos` of an extent split into `regions` bands
/// with boundaries at `floor(r * extent / regions)`.
pub fn region_of(pos: usize, extent: usize, regions: usize) -> usize {
    // largest r with floor(r*extent/regions) <= pos
    let mut r = ((pos + 1) * regions).div_ceil(extent).saturating_sub(1);
    while r + 1 < regions && (r + 1) * extent / regions <= pos {
        r += 1;
    }
    while r > 0 && r * extent / regions > pos {
        r -= 1;
    }
    r
}

/// Label at position `pos` of an extent of `extent` pixels.
///
/// The symmetric scheme partitions the half extent (edge to centre) and
/// mirrors it, so `label(p) == label(extent - 1 - p)` holds exactly even when
/// the extent is not a multiple of the region count.
fn position_label(pos: usize, extent: usize, regions: usize, scheme: MaskScheme) -> u32 {
    match scheme {
        MaskScheme::Xy => region_of(pos, extent, regions) as u32 + 1,
        MaskScheme::XySymmetric => {
            let half_regions = regions / 2;
            let half_extent = extent.div_ceil(2);
            let from_edge = pos.min(extent - 1 - pos);
            (half_regions - region_of(from_edge, half_extent, half_regions)) as u32
        }
    }
}

pub fn build_space_mask(
    size: (usize, usize),
    regions: usize,
    scheme: MaskScheme,
    direction: Direction,
) -> Result<SpaceMask> {
    let (h, w) = size;
    let extent = match direction {
        Direction::Horizontal => w,
        Direction::Vertical => h,
    };
    if regions < 2 {
        return Err(Error::InvalidConfig(format!(
            "a space mask needs at least 2 regions, got {regions}"
        )));
    }
    if scheme == MaskScheme::XySymmetric && regions % 2 != 0 {
        return Err(Error::InvalidConfig(format!(
            "the symmetric scheme needs an even region count, got {regions}"
        )));
    }
    if regions > extent {
        return Err(Error::InvalidConfig(format!(
            "{regions} regions do not fit in an extent of {extent} pixels"
        )));
    }
    let per_position: Vec<u32> = (0..extent)
        .map(|p| position_label(p, extent, regions, scheme))
        .collect();
    let labels = Grid::from_fn(h, w, |r, c| match direction {
        Direction::Horizontal => per_position[c],
        Direction::Vertical => per_position[r],
    });
    Ok(SpaceMask {
        labels,
        direction,
        scheme,
        regions,
        max_class: scheme.max_class(regions),
    })
}

/// Builds the orthogonal (horizontal, vertical) mask pair.
pub fn build_mask_pair(
    size: (usize, usize),
    regions: usize,
    scheme: MaskScheme,
) -> Result<(SpaceMask, SpaceMask)> {
    Ok((
        build_space_mask(size, regions, scheme, Direction::Horizontal)?,
        build_space_mask(size, regions, scheme, Direction::Vertical)?,
    ))
}

/// Per-pixel position targets; 0 marks background.
#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct ProxyLabel {
    pub horizontal: Grid<u32>,
    pub vertical: Grid<u32>,
}

impl ProxyLabel {
    pub const BACKGROUND: u32 = 0;

    pub fn dims(&self) -> (usize, usize) {
        self.horizontal.dims()
    }

    pub fn direction(&self, direction: Direction) -> &Grid<u32> {
        match direction {
            Direction::Horizontal => &self.horizontal,
            Direction::Vertical => &self.vertical,
        }
    }
}

pub fn make_proxy_label(
    sample: &SkeletonSample,
    mask_h: &SpaceMask,
    mask_v: &SpaceMask,
) -> Result<ProxyLabel> {
    if mask_h.direction != Direction::Horizontal || mask_v.direction != Direction::Vertical {
        return Err(Error::InvalidConfig(
            "proxy labels need a horizontal and a vertical mask, in that order".into(),
        ));
    }
    let dims = sample.pixels.dims();
    mask_h.labels.ensure_dims(dims, "horizontal mask")?;
    mask_v.labels.ensure_dims(dims, "vertical mask")?;
    let product = |mask: &SpaceMask| {
        let data = sample
            .pixels
            .iter()
            .zip(mask.labels.iter())
            .map(|(&x, &m)| x as u32 * m)
            .collect();
        Grid::from_vec(dims.0, dims.1, data).expect("dims checked")
    };
    Ok(ProxyLabel {
        horizontal: product(mask_h),
        vertical: product(mask_v),
    })
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum SlitKind {
    Single,
    Double,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum SlitAxis {
    Vertical,
    Horizontal,
}

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct SlitProbe {
    pub pixels: Grid<u8>,
    pub kind: SlitKind,
    pub slit_length: usize,
    pub slit_axis: SlitAxis,
    /// Distance between the two slits; 0 for a single slit.
    pub separation: usize,
    pub center: (usize, usize),
}

/// Centred vertical slit probe.
pub fn make_slit_probe(
    size: (usize, usize),
    kind: SlitKind,
    slit_length: usize,
    separation: usize,
) -> Result<SlitProbe> {
    make_slit_probe_on_axis(size, kind, slit_length, separation, SlitAxis::Vertical)
}

/// Slit probe with an explicit slit orientation.
///
/// Slits are one pixel wide, `slit_length` long and centred on
/// `(h / 2, w / 2)`; a double slit puts its two segments at
/// `centre ± separation / 2` across the slit axis.
pub fn make_slit_probe_on_axis(
    size: (usize, usize),
    kind: SlitKind,
    slit_length: usize,
    separation: usize,
    axis: SlitAxis,
) -> Result<SlitProbe> {
    let (h, w) = size;
    let center = (h / 2, w / 2);
    let (along_extent, across_extent, along_center, across_center) = match axis {
        SlitAxis::Vertical => (h, w, center.0, center.1),
        SlitAxis::Horizontal => (w, h, center.1, center.0),
    };
    if slit_length == 0 || slit_length > along_extent {
        return Err(Error::InvalidConfig(format!(
            "slit of length {slit_length} does not fit in an extent of {along_extent}"
        )));
    }
    let offsets: Vec<i64> = match kind {
        SlitKind::Single => vec![0],
        SlitKind::Double => {
            if separation < 2 {
                return Err(Error::InvalidConfig(format!(
                    "double slit separation must be at least 2, got {separation}"
                )));
            }
            let half = (separation / 2) as i64;
            vec![-half, separation as i64 - half]
        }
    };
    let start = along_center as i64 - (slit_length / 2) as i64;
    let mut pixels = Grid::new(h, w);
    for off in offsets {
        let across = across_center as i64 + off;
        if across < 0 || across >= across_extent as i64 {
            return Err(Error::InvalidConfig(format!(
                "slit at offset {off} falls outside the {h}x{w} grid"
            )));
        }
        for k in 0..slit_length as i64 {
            let along = (start + k) as usize;
            match axis {
                SlitAxis::Vertical => pixels.set(along, across as usize, 1),
                SlitAxis::Horizontal => pixels.set(across as usize, along, 1),
            }
        }
    }
    Ok(SlitProbe {
        pixels,
        kind,
        slit_length,
        slit_axis: axis,
        separation: if kind == SlitKind::Double { separation } else { 0 },
        center,
    })
}

impl SlitProbe {
    pub fn as_sample(&self) -> SkeletonSample {
        let id = match self.kind {
            SlitKind::Single => format!("probe-single-{}", self.slit_length),
            SlitKind::Double => format!("probe-double-{}-{}", self.slit_length, self.separation),
        };
        SkeletonSample::new(self.pixels.clone(), id)
    }
}

/// Writes a class grid as an 8-bit indexed PNG whose palette index equals the
/// class value.
pub fn write_indexed_png(labels: &Grid<u32>, path: &Path) -> Result<()> {
    let max = labels.iter().copied().max().unwrap_or(0);
    if max > 255 {
        return Err(Error::InvalidConfig(format!(
            "class {max} does not fit an 8-bit palette"
        )));
    }
    let palette = class_palette(max as usize + 1);
    let file = BufWriter::new(File::create(path)?);
    let mut encoder = png::Encoder::new(file, labels.cols() as u32, labels.rows() as u32);
    encoder.set_color(png::ColorType::Indexed);
    encoder.set_depth(png::BitDepth::Eight);
    encoder.set_palette(palette);
    let mut writer = encoder
        .write_header()
        .map_err(|e| Error::Io(std::io::Error::other(e)))?;
    let data: Vec<u8> = labels.iter().map(|&v| v as u8).collect();
    writer
        .write_image_data(&data)
        .map_err(|e| Error::Io(std::io::Error::other(e)))?;
    Ok(())
}

/// Black background followed by evenly spaced hues.
fn class_palette(classes: usize) -> Vec<u8> {
    let mut palette = vec![0u8, 0, 0];
    for k in 1..classes {
        let hue = (k - 1) as f64 / (classes - 1).max(1) as f64;
        let [r, g, b] = crate::render::hue_to_rgb(hue * 0.83);
        palette.extend_from_slice(&[r, g, b]);
    }
    palette
}
