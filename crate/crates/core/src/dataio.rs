//! Skeleton dataset ingestion, synthetic corpora and rotation augmentation.

use std::f64::consts::PI;
use std::fs;
use std::path::{Path, PathBuf};

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::grid::Grid;
use crate::par;

/// Name of the optional manifest listing source ids, one per line.
pub const MANIFEST_FILE: &str = "manifest.txt";

const IMAGE_EXTENSIONS: &[&str] = &["png", "bmp"];

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum SplitKind {
    Train,
    Test,
}

impl SplitKind {
    pub fn as_str(self) -> &'static str {
        match self {
            SplitKind::Train => "train",
            SplitKind::Test => "test",
        }
    }
}

/// Counter-clockwise rotation applied to a sample.
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
pub enum Rotation {
    #[default]
    R0,
    R90,
    R180,
    R270,
}

impl Rotation {
    pub const ALL: [Rotation; 4] = [Rotation::R0, Rotation::R90, Rotation::R180, Rotation::R270];

    pub fn quarter_turns(self) -> u32 {
        match self {
            Rotation::R0 => 0,
            Rotation::R90 => 1,
            Rotation::R180 => 2,
            Rotation::R270 => 3,
        }
    }

    pub fn from_quarter_turns(turns: u32) -> Self {
        Self::ALL[(turns % 4) as usize]
    }

    pub fn degrees(self) -> u32 {
        self.quarter_turns() * 90
    }

    pub fn compose(self, other: Rotation) -> Rotation {
        Self::from_quarter_turns(self.quarter_turns() + other.quarter_turns())
    }
}

/// A binary skeleton image (values 0/1) and where it came from.
#[derive(Clone, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub struct SkeletonSample {
    pub pixels: Grid<u8>,
    pub source_id: String,
    /// `(h, w)` of the image before resizing.
    pub original_size: (usize, usize),
    pub rotation: Rotation,
    /// Set when a quarter-turn rotation swapped the height and width of a
    /// non-square sample.
    pub dims_swapped: bool,
}

impl SkeletonSample {
    pub fn new(pixels: Grid<u8>, source_id: impl Into<String>) -> Self {
        let original_size = pixels.dims();
        Self {
            pixels,
            source_id: source_id.into(),
            original_size,
            rotation: Rotation::R0,
            dims_swapped: false,
        }
    }

    pub fn foreground_count(&self) -> usize {
        self.pixels.iter().filter(|&&p| p != 0).count()
    }

    pub fn is_binary(&self) -> bool {
        self.pixels.iter().all(|&p| p <= 1)
    }

    /// Returns this sample rotated by a further `rotation`.
    pub fn rotated(&self, rotation: Rotation) -> SkeletonSample {
        let turns = rotation.quarter_turns();
        let swaps = turns % 2 == 1 && self.pixels.rows() != self.pixels.cols();
        SkeletonSample {
            pixels: self.pixels.rotate90(turns),
            source_id: self.source_id.clone(),
            original_size: self.original_size,
            rotation: self.rotation.compose(rotation),
            dims_swapped: self.dims_swapped ^ swaps,
        }
    }

    /// Key used to give accumulations a canonical order.
    pub fn order_key(&self) -> (&str, Rotation, &[u8]) {
        (&self.source_id, self.rotation, self.pixels.as_slice())
    }
}

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct DatasetSplit {
    pub samples: Vec<SkeletonSample>,
    pub split: SplitKind,
    pub seed: u64,
}

impl DatasetSplit {
    pub fn len(&self) -> usize {
        self.samples.len()
    }

    pub fn is_empty(&self) -> bool {
        self.samples.is_empty()
    }

    pub fn source_ids(&self) -> Vec<&str> {
        self.samples.iter().map(|s| s.source_id.as_str()).collect()
    }

    pub fn mean_foreground_fraction(&self) -> f64 {
        if self.samples.is_empty() {
            return 0.0;
        }
        let total: f64 = self
            .samples
            .iter()
            .map(|s| s.foreground_count() as f64 / s.pixels.as_slice().len() as f64)
            .sum();
        total / self.samples.len() as f64
    }

    /// Writes the source ids as a line-delimited manifest.
    pub fn write_manifest(&self, path: &Path) -> Result<()> {
        let mut text = String::new();
        for id in self.source_ids() {
            text.push_str(id);
            text.push('\n');
        }
        fs::write(path, text)?;
        Ok(())
    }
}

/// Reads a line-delimited manifest of source ids.
pub fn read_manifest(path: &Path) -> Result<Vec<String>> {
    let text = fs::read_to_string(path).map_err(|e| Error::Ingestion {
        path: path.to_path_buf(),
        reason: e.to_string(),
    })?;
    Ok(text
        .lines()
        .map(str::trim)
        .filter(|l| !l.is_empty())
        .map(str::to_owned)
        .collect())
}

/// Binarizes a grayscale label image: any nonzero value is foreground.
pub fn binarize(gray: &Grid<u8>) -> Grid<u8> {
    gray.map(|&v| u8::from(v > 0))
}

/// Nearest-neighbour resize; source index is `floor(dst * src / dst_extent)`.
pub fn resize_nearest<T: Copy>(src: &Grid<T>, size: (usize, usize)) -> Grid<T> {
    let (sh, sw) = src.dims();
    let (th, tw) = size;
    Grid::from_fn(th, tw, |r, c| src.at(r * sh / th, c * sw / tw))
}

fn list_split_files(dir: &Path) -> Result<Vec<PathBuf>> {
    let manifest = dir.join(MANIFEST_FILE);
    if manifest.is_file() {
        return Ok(read_manifest(&manifest)?
            .into_iter()
            .map(|id| dir.join(id))
            .collect());
    }
    let entries = fs::read_dir(dir).map_err(|e| Error::Ingestion {
        path: dir.to_path_buf(),
        reason: e.to_string(),
    })?;
    let mut files = Vec::new();
    for entry in entries {
        let path = entry?.path();
        let is_image = path
            .extension()
            .and_then(|e| e.to_str())
            .map(|e| IMAGE_EXTENSIONS.contains(&e.to_ascii_lowercase().as_str()))
            .unwrap_or(false);
        if path.is_file() && is_image {
            files.push(path);
        }
    }
    files.sort();
    Ok(files)
}

fn load_gray(path: &Path) -> Result<Grid<u8>> {
    let img = image::open(path)
        .map_err(|e| Error::Ingestion {
            path: path.to_path_buf(),
            reason: e.to_string(),
        })?
        .to_luma8();
    let (w, h) = img.dimensions();
    Grid::from_vec(h as usize, w as usize, img.into_raw())
}

/// Loads one split of a skeleton ground-truth dataset.
///
/// `root` is either the flat directory of label images or a directory
/// holding a `train/` / `test/` subdirectory. A `manifest.txt` inside the
/// image directory, when present, fixes the file list and its order;
/// otherwise files are taken in lexicographic order.
pub fn load_skeleton_dataset(
    root: &Path,
    split: SplitKind,
    target_size: (usize, usize),
) -> Result<DatasetSplit> {
    if target_size.0 == 0 || target_size.1 == 0 {
        return Err(Error::InvalidConfig(format!(
            "target size must be positive, got {target_size:?}"
        )));
    }
    let nested = root.join(split.as_str());
    let dir = if nested.is_dir() { nested } else { root.to_path_buf() };
    if !dir.is_dir() {
        return Err(Error::Ingestion {
            path: dir,
            reason: "not a readable directory".into(),
        });
    }
    let files = list_split_files(&dir)?;
    let loaded = par::map_slice(&files, |path| -> Result<Option<SkeletonSample>> {
        let gray = load_gray(path)?;
        let original_size = gray.dims();
        let pixels = resize_nearest(&binarize(&gray), target_size);
        let source_id = path
            .file_name()
            .map(|n| n.to_string_lossy().into_owned())
            .unwrap_or_default();
        if pixels.iter().all(|&p| p == 0) {
            log::warn!("skipping {}: no foreground after resize", path.display());
            return Ok(None);
        }
        let mut sample = SkeletonSample::new(pixels, source_id);
        sample.original_size = original_size;
        Ok(Some(sample))
    });
    let mut samples = Vec::with_capacity(loaded.len());
    for item in loaded {
        if let Some(sample) = item? {
            samples.push(sample);
        }
    }
    Ok(DatasetSplit {
        samples,
        split,
        seed: 0,
    })
}

/// Generates a deterministic corpus of random skeleton-like line drawings.
///
/// Each image holds 1–4 open polylines or circular arcs, one pixel wide,
/// whose lengths are 20–80% of the image diagonal.
pub fn synthesize_skeletons(count: usize, size: (usize, usize), seed: u64) -> Result<DatasetSplit> {
    synthesize_split(count, size, seed, SplitKind::Train)
}

/// Like [`synthesize_skeletons`] but tags the split; ids embed split and seed
/// so corpora generated for different splits never share a source id.
pub fn synthesize_split(
    count: usize,
    size: (usize, usize),
    seed: u64,
    split: SplitKind,
) -> Result<DatasetSplit> {
    if count == 0 {
        return Err(Error::InvalidConfig("synthetic count must be positive".into()));
    }
    if size.0 < 2 || size.1 < 2 {
        return Err(Error::InvalidConfig(format!(
            "synthetic image size must be at least 2x2, got {size:?}"
        )));
    }
    let samples = par::map_indexed(count, |i| {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        rng.set_stream(i as u64 + 1);
        let pixels = draw_random_skeleton(&mut rng, size);
        SkeletonSample::new(pixels, format!("synth-{}-{seed}-{i:05}", split.as_str()))
    });
    Ok(DatasetSplit {
        samples,
        split,
        seed,
    })
}

fn draw_random_skeleton(rng: &mut ChaCha8Rng, (h, w): (usize, usize)) -> Grid<u8> {
    let mut grid = Grid::new(h, w);
    let diagonal = ((h * h + w * w) as f64).sqrt();
    let strokes = rng.gen_range(1..=4);
    for _ in 0..strokes {
        let length = diagonal * rng.gen_range(0.2..=0.8);
        let points = if rng.gen_bool(0.5) {
            random_polyline(rng, (h, w), length)
        } else {
            random_arc(rng, (h, w), length)
        };
        rasterize_path(&mut grid, &points);
    }
    grid
}

fn random_polyline(rng: &mut ChaCha8Rng, (h, w): (usize, usize), length: f64) -> Vec<(f64, f64)> {
    let (hf, wf) = ((h - 1) as f64, (w - 1) as f64);
    let mut y = rng.gen_range(0.0..=hf);
    let mut x = rng.gen_range(0.0..=wf);
    let mut angle = rng.gen_range(0.0..2.0 * PI);
    let segments = rng.gen_range(1..=3);
    let mut points = vec![(y, x)];
    let seg_len = length / segments as f64;
    for s in 0..segments {
        if s > 0 {
            angle += rng.gen_range(-PI / 2.0..PI / 2.0);
        }
        let steps = seg_len.ceil() as usize;
        let step = seg_len / steps as f64;
        let (mut dy, mut dx) = (angle.sin(), angle.cos());
        for _ in 0..steps {
            let (mut ny, mut nx) = (y + dy * step, x + dx * step);
            // reflect off the borders so strokes stay inside the frame
            if !(0.0..=wf).contains(&nx) {
                dx = -dx;
                nx = x + dx * step;
            }
            if !(0.0..=hf).contains(&ny) {
                dy = -dy;
                ny = y + dy * step;
            }
            y = ny.clamp(0.0, hf);
            x = nx.clamp(0.0, wf);
            points.push((y, x));
        }
        angle = dy.atan2(dx);
    }
    points
}

fn random_arc(rng: &mut ChaCha8Rng, (h, w): (usize, usize), length: f64) -> Vec<(f64, f64)> {
    let (hf, wf) = ((h - 1) as f64, (w - 1) as f64);
    // sweep between a quarter and one and a half turns fixes the radius
    let sweep = rng.gen_range(0.5 * PI..=1.5 * PI);
    let radius = (length / sweep).max(1.0);
    let cy = rng.gen_range(0.0..=hf);
    let cx = rng.gen_range(0.0..=wf);
    let start = rng.gen_range(0.0..2.0 * PI);
    let direction = if rng.gen_bool(0.5) { 1.0 } else { -1.0 };
    let steps = (length.ceil() as usize).max(1);
    (0..=steps)
        .map(|k| {
            let a = start + direction * sweep * k as f64 / steps as f64;
            (cy + radius * a.sin(), cx + radius * a.cos())
        })
        .collect()
}

fn rasterize_path(grid: &mut Grid<u8>, points: &[(f64, f64)]) {
    let mut prev: Option<(i64, i64)> = None;
    for &(y, x) in points {
        let cur = (y.round() as i64, x.round() as i64);
        match prev {
            Some(p) => draw_line(grid, p, cur),
            None => plot(grid, cur),
        }
        prev = Some(cur);
    }
}

fn plot(grid: &mut Grid<u8>, (r, c): (i64, i64)) {
    if r >= 0 && c >= 0 && (r as usize) < grid.rows() && (c as usize) < grid.cols() {
        grid.set(r as usize, c as usize, 1);
    }
}

/// Bresenham line between two pixel centres, inclusive.
fn draw_line(grid: &mut Grid<u8>, (r0, c0): (i64, i64), (r1, c1): (i64, i64)) {
    let dc = (c1 - c0).abs();
    let dr = -(r1 - r0).abs();
    let sc = if c0 < c1 { 1 } else { -1 };
    let sr = if r0 < r1 { 1 } else { -1 };
    let (mut r, mut c) = (r0, c0);
    let mut err = dc + dr;
    loop {
        plot(grid, (r, c));
        if r == r1 && c == c1 {
            break;
        }
        let e2 = 2 * err;
        if e2 >= dr {
            err += dr;
            c += sc;
        }
        if e2 <= dc {
            err += dc;
            r += sr;
        }
    }
}

/// Expands every sample to its four quarter-turn rotations, sample-major.
pub fn augment_rotations(split: &DatasetSplit) -> Result<DatasetSplit> {
    if split.is_empty() {
        return Err(Error::InvalidConfig("cannot augment an empty split".into()));
    }
    let samples = split
        .samples
        .iter()
        .flat_map(|s| Rotation::ALL.iter().map(move |&r| s.rotated(r)))
        .collect();
    Ok(DatasetSplit {
        samples,
        split: split.split,
        seed: split.seed,
    })
}
