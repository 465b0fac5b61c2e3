//! Additive grating perturbations and a black-box search over their
//! wavelength, orientation and phase.

use std::f64::consts::PI;
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::dataio::SkeletonSample;
use crate::error::{Error, Result};
use crate::grid::Grid;
use crate::metrics::acc_space;
use crate::nn::model::intensities_to_tensor;
use crate::nn::Model;
use crate::par;
use crate::spacemask::ProxyLabel;

/// Upper end of the intensity scale.
pub const MAX_INTENSITY: f64 = 255.0;

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Waveform {
    #[default]
    Square,
    Sine,
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct WavePerturbation {
    /// Period in pixels.
    pub wavelength: f64,
    /// Direction of travel in degrees, `[0, 180)`.
    pub orientation: f64,
    /// Offset along the direction of travel, in pixels.
    pub phase: f64,
    /// Peak deviation in intensity units.
    pub amplitude: f64,
    pub waveform: Waveform,
}

/// `(cos θ, sin θ)`, exact at multiples of 90°.
fn direction(deg: f64) -> (f64, f64) {
    let quarter = deg / 90.0;
    if quarter.fract() == 0.0 {
        match (quarter as i64).rem_euclid(4) {
            0 => (1.0, 0.0),
            1 => (0.0, 1.0),
            2 => (-1.0, 0.0),
            _ => (0.0, -1.0),
        }
    } else {
        let r = deg.to_radians();
        (r.cos(), r.sin())
    }
}

/// Grating field sampled at pixel centres.
///
/// With `u = (x + ½)·cos θ + (y + ½)·sin θ + φ` (x = column, y = row) the
/// square wave is `+ε` on the first half of each period and `−ε` on the
/// second, i.e. the sign of `sin(2πu/λ)`; the sine wave is `ε·sin(2πu/λ)`.
pub fn make_wave(size: (usize, usize), p: &WavePerturbation) -> Result<Grid<f32>> {
    if !(p.wavelength >= 2.0) {
        return Err(Error::InvalidConfig(format!(
            "wavelength {} is below the two-pixel sampling limit",
            p.wavelength
        )));
    }
    if !(p.amplitude >= 0.0) || !p.orientation.is_finite() || !p.phase.is_finite() {
        return Err(Error::InvalidConfig(format!("invalid grating parameters {p:?}")));
    }
    let (c, s) = direction(p.orientation);
    let eps = p.amplitude;
    Ok(Grid::from_fn(size.0, size.1, |y, x| {
        let u = (x as f64 + 0.5) * c + (y as f64 + 0.5) * s + p.phase;
        let frac = (u / p.wavelength).rem_euclid(1.0);
        let v = match p.waveform {
            Waveform::Square => {
                if frac < 0.5 {
                    eps
                } else {
                    -eps
                }
            }
            Waveform::Sine => eps * (2.0 * PI * frac).sin(),
        };
        v as f32
    }))
}

/// Pixel types that can carry intensities on the `0..=255` scale.
pub trait Intensity: Copy {
    fn to_f64(self) -> f64;
    /// Converts back, clipping to the valid range.
    fn from_f64_clipped(v: f64) -> Self;
}

impl Intensity for u8 {
    fn to_f64(self) -> f64 {
        self as f64
    }

    fn from_f64_clipped(v: f64) -> Self {
        v.round().clamp(0.0, MAX_INTENSITY) as u8
    }
}

impl Intensity for f32 {
    fn to_f64(self) -> f64 {
        self as f64
    }

    fn from_f64_clipped(v: f64) -> Self {
        v.clamp(0.0, MAX_INTENSITY) as f32
    }
}

pub fn apply_perturbation<T: Intensity>(image: &Grid<T>, field: &Grid<f32>) -> Result<Grid<T>> {
    field.ensure_dims(image.dims(), "perturbation field")?;
    let data = image
        .iter()
        .zip(field.iter())
        .map(|(&p, &f)| T::from_f64_clipped(p.to_f64() + f as f64))
        .collect();
    Grid::from_vec(image.rows(), image.cols(), data)
}

/// A model under attack, seen only through its predictions and score.
pub trait ModelAdapter: Sync {
    type Output: Send;
    type Reference: Sync;

    fn metric_name(&self) -> &str;

    /// Runs the model on intensity images (`0..=255`).
    fn predict(&self, images: &[Grid<f32>]) -> Result<Self::Output>;

    /// Task score, higher is better.
    fn metric(&self, output: &Self::Output, references: &[Self::Reference]) -> Result<f64>;
}

pub struct AttackDataset<R> {
    pub images: Vec<Grid<f32>>,
    pub references: Vec<R>,
}

impl<R> AttackDataset<R> {
    fn dims(&self) -> Result<(usize, usize)> {
        let first = self
            .images
            .first()
            .ok_or_else(|| Error::InvalidConfig("the attack needs at least one image".into()))?;
        Ok(first.dims())
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct SearchGrid {
    pub wavelengths: Vec<f64>,
    pub orientations: Vec<f64>,
    /// Phases as fractions of the wavelength.
    pub phase_fractions: Vec<f64>,
}

impl Default for SearchGrid {
    fn default() -> Self {
        Self {
            wavelengths: vec![2.0, 3.0, 4.0, 6.0, 8.0, 12.0, 16.0, 24.0, 32.0, 48.0, 64.0],
            orientations: (0..12).map(|i| 15.0 * i as f64).collect(),
            phase_fractions: vec![0.0, 0.25, 0.5, 0.75],
        }
    }
}

/// One `(λ, θ, φ)` combination with φ in pixels.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct GridPoint {
    pub wavelength: f64,
    pub orientation: f64,
    pub phase: f64,
}

impl SearchGrid {
    /// All points, ordered by wavelength, then orientation, then phase.
    pub fn points(&self) -> Vec<GridPoint> {
        let mut wl = self.wavelengths.clone();
        let mut th = self.orientations.clone();
        let mut ph = self.phase_fractions.clone();
        for v in [&mut wl, &mut th, &mut ph] {
            v.sort_by(f64::total_cmp);
            v.dedup();
        }
        let mut out = Vec::with_capacity(wl.len() * th.len() * ph.len());
        for &wavelength in &wl {
            for &orientation in &th {
                for &f in &ph {
                    out.push(GridPoint {
                        wavelength,
                        orientation,
                        phase: f * wavelength,
                    });
                }
            }
        }
        out
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct GridScore {
    pub wavelength: f64,
    pub orientation: f64,
    pub phase: f64,
    pub score: f64,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct AttackResult {
    pub metric_name: String,
    pub baseline_score: f64,
    pub epsilon: f64,
    pub waveform: Waveform,
    pub grid: Vec<GridScore>,
    /// Lowest score; ties go to the earliest grid point.
    pub strongest: GridScore,
    /// Highest score; ties go to the earliest grid point.
    pub weakest: GridScore,
}

#[derive(Serialize)]
struct Summary<'a> {
    metric_name: &'a str,
    baseline_score: f64,
    epsilon: f64,
    waveform: Waveform,
    grid_points: usize,
    strongest: GridScore,
    weakest: GridScore,
}

impl AttackResult {
    pub fn write_csv(&self, path: &Path) -> Result<()> {
        let mut w = csv::Writer::from_path(path)?;
        w.write_record(["wavelength", "orientation", "phase", "score"])?;
        for g in &self.grid {
            w.serialize((g.wavelength, g.orientation, g.phase, g.score))?;
        }
        w.flush()?;
        Ok(())
    }

    pub fn summary_json(&self) -> Result<String> {
        Ok(serde_json::to_string_pretty(&Summary {
            metric_name: &self.metric_name,
            baseline_score: self.baseline_score,
            epsilon: self.epsilon,
            waveform: self.waveform,
            grid_points: self.grid.len(),
            strongest: self.strongest,
            weakest: self.weakest,
        })?)
    }

    /// Score per (wavelength row, orientation column), taking the minimum
    /// over phases.
    pub fn score_map(&self) -> (Vec<f64>, Vec<f64>, Grid<f64>) {
        let mut wl: Vec<f64> = self.grid.iter().map(|g| g.wavelength).collect();
        let mut th: Vec<f64> = self.grid.iter().map(|g| g.orientation).collect();
        for v in [&mut wl, &mut th] {
            v.sort_by(f64::total_cmp);
            v.dedup();
        }
        let mut map = Grid::filled(wl.len(), th.len(), f64::INFINITY);
        for g in &self.grid {
            let r = wl.iter().position(|&v| v == g.wavelength).expect("listed");
            let c = th.iter().position(|&v| v == g.orientation).expect("listed");
            let cur = map.at(r, c);
            map.set(r, c, cur.min(g.score));
        }
        (wl, th, map)
    }
}

/// Score of the adapter on the dataset perturbed at one grid point.
pub fn evaluate_point<A: ModelAdapter>(
    adapter: &A,
    data: &AttackDataset<A::Reference>,
    point: GridPoint,
    epsilon: f64,
    waveform: Waveform,
) -> Result<f64> {
    let fail = |reason: String| Error::AdapterFailure {
        wavelength: point.wavelength,
        orientation: point.orientation,
        phase: point.phase,
        reason,
    };
    let field = make_wave(
        data.dims()?,
        &WavePerturbation {
            wavelength: point.wavelength,
            orientation: point.orientation,
            phase: point.phase,
            amplitude: epsilon,
            waveform,
        },
    )?;
    let perturbed = data
        .images
        .iter()
        .map(|img| apply_perturbation(img, &field))
        .collect::<Result<Vec<_>>>()?;
    let out = adapter.predict(&perturbed).map_err(|e| fail(e.to_string()))?;
    let score = adapter.metric(&out, &data.references).map_err(|e| fail(e.to_string()))?;
    if score.is_finite() {
        Ok(score)
    } else {
        Err(fail(format!("non-finite score {score}")))
    }
}

/// Evaluates every grid point and reports the most and least damaging
/// gratings. Points are evaluated in parallel; the result is assembled in
/// grid order.
pub fn frequency_attack<A: ModelAdapter>(
    adapter: &A,
    data: &AttackDataset<A::Reference>,
    search: &SearchGrid,
    epsilon: f64,
    waveform: Waveform,
) -> Result<AttackResult> {
    if data.images.len() != data.references.len() {
        return Err(Error::ShapeMismatch {
            expected: format!("{} references", data.images.len()),
            actual: format!("{}", data.references.len()),
        });
    }
    let points = search.points();
    if points.is_empty() {
        return Err(Error::InvalidConfig("empty attack search grid".into()));
    }
    let baseline_out = adapter.predict(&data.images)?;
    let baseline_score = adapter.metric(&baseline_out, &data.references)?;
    let scores = par::map_slice(&points, |&p| evaluate_point(adapter, data, p, epsilon, waveform));
    let mut grid = Vec::with_capacity(points.len());
    for (p, s) in points.iter().zip(scores) {
        grid.push(GridScore {
            wavelength: p.wavelength,
            orientation: p.orientation,
            phase: p.phase,
            score: s?,
        });
    }
    let mut strongest = grid[0];
    let mut weakest = grid[0];
    for g in &grid[1..] {
        if g.score < strongest.score {
            strongest = *g;
        }
        if g.score > weakest.score {
            weakest = *g;
        }
    }
    Ok(AttackResult {
        metric_name: adapter.metric_name().into(),
        baseline_score,
        epsilon,
        waveform,
        grid,
        strongest,
        weakest,
    })
}

/// Test oracle tuned to one grating: its score is one minus the
/// phase-invariant matched-filter energy of the input's deviation from
/// mid-gray at the resonant wavelength and orientation.
pub struct ResonantAdapter {
    cos_tab: Grid<f64>,
    sin_tab: Grid<f64>,
    /// Energy that maps to a score drop of 1.
    norm: f64,
}

/// Mid-gray level the resonant oracle measures deviations from.
pub const MID_GRAY: f32 = 128.0;

impl ResonantAdapter {
    pub fn new(size: (usize, usize), wavelength: f64, orientation: f64, reference_amplitude: f64) -> Self {
        let (c, s) = direction(orientation);
        let angle = |y: usize, x: usize| 2.0 * PI * ((x as f64 + 0.5) * c + (y as f64 + 0.5) * s) / wavelength;
        Self {
            cos_tab: Grid::from_fn(size.0, size.1, |y, x| angle(y, x).cos()),
            sin_tab: Grid::from_fn(size.0, size.1, |y, x| angle(y, x).sin()),
            norm: reference_amplitude * (size.0 * size.1) as f64,
        }
    }

    /// Uniform mid-gray images for the oracle to look at.
    pub fn dataset(size: (usize, usize), count: usize) -> AttackDataset<()> {
        AttackDataset {
            images: vec![Grid::filled(size.0, size.1, MID_GRAY); count],
            references: vec![(); count],
        }
    }
}

impl ModelAdapter for ResonantAdapter {
    type Output = Vec<f64>;
    type Reference = ();

    fn metric_name(&self) -> &str {
        "resonance"
    }

    fn predict(&self, images: &[Grid<f32>]) -> Result<Vec<f64>> {
        images
            .iter()
            .map(|img| {
                img.ensure_dims(self.cos_tab.dims(), "oracle input")?;
                let (mut cs, mut sn) = (0.0, 0.0);
                for ((&p, &c), &s) in img.iter().zip(self.cos_tab.iter()).zip(self.sin_tab.iter()) {
                    let d = (p - MID_GRAY) as f64;
                    cs += d * c;
                    sn += d * s;
                }
                Ok((cs * cs + sn * sn).sqrt() / self.norm)
            })
            .collect()
    }

    fn metric(&self, output: &Vec<f64>, _: &[()]) -> Result<f64> {
        Ok(1.0 - output.iter().sum::<f64>() / output.len() as f64)
    }
}

/// Attacks a trained position network; scored by mean Acc_space.
pub struct SpaceNetAdapter<'m> {
    pub model: &'m Model,
}

impl SpaceNetAdapter<'_> {
    /// Skeletons as intensity images (foreground = 255) with their targets.
    pub fn dataset(samples: &[SkeletonSample], labels: &[ProxyLabel]) -> AttackDataset<ProxyLabel> {
        AttackDataset {
            images: samples.iter().map(|s| s.pixels.map(|&p| p as f32 * MAX_INTENSITY as f32)).collect(),
            references: labels.to_vec(),
        }
    }
}

impl ModelAdapter for SpaceNetAdapter<'_> {
    type Output = Vec<(Grid<u32>, Grid<u32>)>;
    type Reference = ProxyLabel;

    fn metric_name(&self) -> &str {
        "acc_space"
    }

    fn predict(&self, images: &[Grid<f32>]) -> Result<Self::Output> {
        let per_image = par::map_slice(images, |img| -> Result<_> {
            let mut maps = self.model.predict(intensities_to_tensor([img])?)?;
            Ok(maps.pop().expect("one image"))
        });
        per_image.into_iter().collect()
    }

    fn metric(&self, output: &Self::Output, references: &[ProxyLabel]) -> Result<f64> {
        if output.len() != references.len() || output.is_empty() {
            return Err(Error::ShapeMismatch {
                expected: format!("{} predictions", references.len()),
                actual: format!("{}", output.len()),
            });
        }
        let mut total = 0.0;
        for ((h, v), label) in output.iter().zip(references) {
            total += acc_space(h, v, label)?;
        }
        Ok(total / output.len() as f64)
    }
}

/// Placeholder for models that live outside this repository (semantic
/// segmentation, detection, salient-object networks). Wiring one up means
/// implementing [`ModelAdapter`] around its inference call; this stub only
/// reports that the weights are not available.
pub struct ExternalModelAdapter {
    pub name: String,
}

impl ModelAdapter for ExternalModelAdapter {
    type Output = ();
    type Reference = ();

    fn metric_name(&self) -> &str {
        "external"
    }

    fn predict(&self, _: &[Grid<f32>]) -> Result<()> {
        Err(Error::Missing(format!("external model `{}` is not bundled", self.name)))
    }

    fn metric(&self, _: &(), _: &[()]) -> Result<f64> {
        Err(Error::Missing(format!("external model `{}` is not bundled", self.name)))
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn square(wavelength: f64, orientation: f64, phase: f64, amplitude: f64) -> WavePerturbation {
        WavePerturbation {
            wavelength,
            orientation,
            phase,
            amplitude,
            waveform: Waveform::Square,
        }
    }

    #[test]
    fn square_columns_alternate_in_pairs() {
        let f = make_wave((2, 8), &square(4.0, 0.0, 0.0, 8.0)).unwrap();
        assert_eq!(f.row(0), &[8.0, 8.0, -8.0, -8.0, 8.0, 8.0, -8.0, -8.0]);
        assert_eq!(f.row(0), f.row(1));
    }

    #[test]
    fn quarter_turn_is_transpose() {
        for wl in [2.0, 3.0, 5.0, 8.0] {
            let a = make_wave((9, 9), &square(wl, 0.0, 1.0, 8.0)).unwrap();
            let b = make_wave((9, 9), &square(wl, 90.0, 1.0, 8.0)).unwrap();
            assert_eq!(b, a.transpose());
        }
    }

    #[test]
    fn zero_amplitude_and_bad_wavelength() {
        let f = make_wave((4, 4), &square(4.0, 30.0, 0.0, 0.0)).unwrap();
        assert!(f.iter().all(|&v| v == 0.0));
        assert!(make_wave((4, 4), &square(1.5, 0.0, 0.0, 8.0)).is_err());
    }

    #[test]
    fn sine_stays_within_amplitude() {
        let p = WavePerturbation {
            waveform: Waveform::Sine,
            ..square(7.0, 40.0, 2.0, 8.0)
        };
        let f = make_wave((16, 16), &p).unwrap();
        assert!(f.iter().all(|&v| v.abs() <= 8.0));
    }

    #[test]
    fn perturbation_clips_and_preserves_type() {
        let img = Grid::from_vec(1, 3, vec![250u8, 3, 100]).unwrap();
        let field = Grid::from_vec(1, 3, vec![8.0f32, -8.0, 0.0]).unwrap();
        let out = apply_perturbation(&img, &field).unwrap();
        assert_eq!(out.as_slice(), &[255, 0, 100]);
        let zero = Grid::filled(1, 3, 0.0f32);
        assert_eq!(apply_perturbation(&img, &zero).unwrap(), img);
        assert!(apply_perturbation(&img, &Grid::filled(2, 2, 0.0f32)).is_err());
    }

    #[test]
    fn default_grid_size_and_order() {
        let pts = SearchGrid::default().points();
        assert_eq!(pts.len(), 11 * 12 * 4);
        assert_eq!(pts[0].wavelength, 2.0);
        assert_eq!(pts[1].phase, 0.5);
        assert_eq!(pts[4].orientation, 15.0);
    }

    struct Constant;

    impl ModelAdapter for Constant {
        type Output = ();
        type Reference = ();

        fn metric_name(&self) -> &str {
            "constant"
        }

        fn predict(&self, _: &[Grid<f32>]) -> Result<()> {
            Ok(())
        }

        fn metric(&self, _: &(), _: &[()]) -> Result<f64> {
            Ok(0.5)
        }
    }

    #[test]
    fn flat_metric_picks_first_point() {
        let data = ResonantAdapter::dataset((8, 8), 1);
        let grid = SearchGrid::default();
        let r = frequency_attack(&Constant, &data, &grid, 8.0, Waveform::Square).unwrap();
        let first = grid.points()[0];
        assert_eq!((r.strongest.wavelength, r.strongest.orientation), (first.wavelength, first.orientation));
        assert_eq!(r.strongest, r.weakest);
        assert!(r.grid.iter().all(|g| g.score == 0.5));
    }

    #[test]
    fn external_adapter_failure_names_the_grid_point() {
        let data = ResonantAdapter::dataset((8, 8), 1);
        let grid = SearchGrid {
            wavelengths: vec![4.0],
            orientations: vec![0.0],
            phase_fractions: vec![0.0],
        };
        let adapter = ExternalModelAdapter { name: "seg".into() };
        assert!(frequency_attack(&adapter, &data, &grid, 8.0, Waveform::Square).is_err());
        let err = evaluate_point(&adapter, &data, grid.points()[0], 8.0, Waveform::Square).unwrap_err();
        assert!(matches!(err, Error::AdapterFailure { wavelength, .. } if wavelength == 4.0));
    }

    #[test]
    fn resonant_oracle_is_tuned() {
        let adapter = ResonantAdapter::new((32, 32), 8.0, 30.0, 8.0);
        let data = ResonantAdapter::dataset((32, 32), 1);
        let at = |wl: f64, th: f64| {
            let p = GridPoint {
                wavelength: wl,
                orientation: th,
                phase: 0.0,
            };
            evaluate_point(&adapter, &data, p, 8.0, Waveform::Sine).unwrap()
        };
        assert!(at(8.0, 30.0) < at(8.0, 90.0));
        assert!(at(8.0, 30.0) < at(16.0, 30.0));
        let base = adapter.metric(&adapter.predict(&data.images).unwrap(), &[()]).unwrap();
        assert_eq!(base, 1.0);
    }
}
