//! Waviness of 1D activity profiles and weighted spatial position accuracy.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::grid::Grid;
use crate::spacemask::ProxyLabel;

/// Default significance threshold for waviness.
pub const DEFAULT_WAVINESS_THRESHOLD: f64 = 0.1;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Profile1D {
    pub values: Vec<f64>,
    /// Free-form description of where the profile was extracted from.
    pub origin: String,
}

impl Profile1D {
    pub fn new(values: Vec<f64>, origin: impl Into<String>) -> Self {
        Self {
            values,
            origin: origin.into(),
        }
    }

    pub fn len(&self) -> usize {
        self.values.len()
    }

    pub fn is_empty(&self) -> bool {
        self.values.is_empty()
    }
}

/// One turning point of a profile.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct Extremum {
    /// Sample index; plateau midpoints can fall halfway between samples.
    pub index: f64,
    pub value: f64,
}

/// Span between two consecutive extrema that counts towards waviness.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct EffectiveInterval {
    pub start: f64,
    pub end: f64,
    pub wavelength: f64,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct WavinessReport {
    pub waviness: f64,
    pub threshold: f64,
    pub length: usize,
    pub extrema: Vec<Extremum>,
    pub effective_intervals: Vec<EffectiveInterval>,
    /// `max(profile) - min(profile)`.
    pub global_diff: f64,
}

impl WavinessReport {
    pub fn to_json(&self) -> Result<String> {
        Ok(serde_json::to_string_pretty(self)?)
    }
}

/// Turning points of a profile.
///
/// Runs of equal values are collapsed first. An interior run that is higher
/// (or lower) than both neighbouring runs is a crest (trough) placed at the
/// run's midpoint. The first and last samples always bound the sequence; a
/// run touching either end is represented by that end.
pub fn turning_points(values: &[f64]) -> Vec<Extremum> {
    let mut runs: Vec<(usize, usize, f64)> = Vec::new();
    for (i, &v) in values.iter().enumerate() {
        match runs.last_mut() {
            Some(last) if last.2 == v => last.1 = i,
            _ => runs.push((i, i, v)),
        }
    }
    if runs.len() < 2 {
        return Vec::new();
    }
    let last = runs.len() - 1;
    let mut points = Vec::with_capacity(runs.len());
    for (k, &(start, end, v)) in runs.iter().enumerate() {
        if k == 0 {
            points.push(Extremum { index: 0.0, value: v });
        } else if k == last {
            points.push(Extremum {
                index: (values.len() - 1) as f64,
                value: v,
            });
        } else {
            let (prev, next) = (runs[k - 1].2, runs[k + 1].2);
            if (v > prev && v > next) || (v < prev && v < next) {
                points.push(Extremum {
                    index: (start + end) as f64 / 2.0,
                    value: v,
                });
            }
        }
    }
    points
}

fn sign(x: f64) -> i32 {
    if x > 0.0 {
        1
    } else if x < 0.0 {
        -1
    } else {
        0
    }
}

/// Scores how strongly a profile alternates between significant crests and
/// troughs: 0 for no wave pattern, close to 1 for a clean periodic wave.
///
/// Consecutive turning points delimit intervals with local difference
/// `d(n) = value(n+1) - value(n)`. An interval is significant when
/// `|d(n) / (max - min)| > threshold`, and effective when it is significant
/// and an adjacent significant interval has the opposite sign. The score is
/// the summed length of effective intervals over the profile length.
pub fn waviness(profile: &Profile1D, threshold: f64) -> Result<WavinessReport> {
    let values = &profile.values;
    if values.len() < 3 {
        return Err(Error::InvalidConfig(format!(
            "waviness needs a profile of at least 3 samples, got {}",
            values.len()
        )));
    }
    if let Some(i) = values.iter().position(|v| !v.is_finite()) {
        return Err(Error::InvalidConfig(format!(
            "profile `{}` has a non-finite value at index {i}",
            profile.origin
        )));
    }
    let length = values.len();
    let (lo, hi) = values
        .iter()
        .fold((f64::INFINITY, f64::NEG_INFINITY), |(lo, hi), &v| (lo.min(v), hi.max(v)));
    let global_diff = hi - lo;
    if global_diff == 0.0 {
        return Ok(WavinessReport {
            waviness: 0.0,
            threshold,
            length,
            extrema: Vec::new(),
            effective_intervals: Vec::new(),
            global_diff,
        });
    }

    let extrema = turning_points(values);
    let diffs: Vec<f64> = extrema.windows(2).map(|p| p[1].value - p[0].value).collect();
    let significant: Vec<bool> = diffs
        .iter()
        .map(|d| (d / global_diff).abs() > threshold)
        .collect();
    let alternates = |a: usize, b: usize| {
        significant[a] && significant[b] && sign(diffs[a]) + sign(diffs[b]) == 0
    };

    let mut effective_intervals = Vec::new();
    let mut total = 0.0;
    for n in 0..diffs.len() {
        let with_prev = n > 0 && alternates(n - 1, n);
        let with_next = n + 1 < diffs.len() && alternates(n, n + 1);
        if significant[n] && (with_prev || with_next) {
            let wavelength = extrema[n + 1].index - extrema[n].index;
            total += wavelength;
            effective_intervals.push(EffectiveInterval {
                start: extrema[n].index,
                end: extrema[n + 1].index,
                wavelength,
            });
        }
    }
    Ok(WavinessReport {
        waviness: (total / length as f64).clamp(0.0, 1.0),
        threshold,
        length,
        extrema,
        effective_intervals,
        global_diff,
    })
}

/// Mean waviness over a set of profiles; 0 for an empty set.
pub fn mean_waviness(reports: &[WavinessReport]) -> f64 {
    if reports.is_empty() {
        return 0.0;
    }
    reports.iter().map(|r| r.waviness).sum::<f64>() / reports.len() as f64
}

/// How object/background accuracies are weighted in [`acc_space`].
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum AccWeighting {
    /// Object accuracy weighted by the background fraction `B/X` and
    /// background accuracy by the object fraction `O/X`.
    #[default]
    AsPrinted,
    /// Object accuracy weighted by `O/X`, background accuracy by `B/X`.
    Proportional,
}

/// Per-direction accuracy breakdown.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct DirectionAccuracy {
    pub object_pixels: usize,
    pub background_pixels: usize,
    /// 1 when there are no object pixels.
    pub acc_object: f64,
    /// 1 when there are no background pixels.
    pub acc_background: f64,
}

impl DirectionAccuracy {
    pub fn measure(pred: &Grid<u32>, target: &Grid<u32>) -> Result<Self> {
        pred.ensure_dims(target.dims(), "prediction")?;
        let (mut obj, mut obj_ok, mut bg, mut bg_ok) = (0usize, 0usize, 0usize, 0usize);
        for (&p, &t) in pred.iter().zip(target.iter()) {
            if t == ProxyLabel::BACKGROUND {
                bg += 1;
                bg_ok += usize::from(p == t);
            } else {
                obj += 1;
                obj_ok += usize::from(p == t);
            }
        }
        let ratio = |ok: usize, n: usize| if n == 0 { 1.0 } else { ok as f64 / n as f64 };
        Ok(Self {
            object_pixels: obj,
            background_pixels: bg,
            acc_object: ratio(obj_ok, obj),
            acc_background: ratio(bg_ok, bg),
        })
    }

    pub fn combined(&self, weighting: AccWeighting) -> f64 {
        let total = (self.object_pixels + self.background_pixels) as f64;
        if total == 0.0 {
            return 1.0;
        }
        let object_frac = self.object_pixels as f64 / total;
        let background_frac = self.background_pixels as f64 / total;
        match weighting {
            AccWeighting::AsPrinted => {
                background_frac * self.acc_object + object_frac * self.acc_background
            }
            AccWeighting::Proportional => {
                object_frac * self.acc_object + background_frac * self.acc_background
            }
        }
    }
}

/// Weighted spatial position accuracy of one image, averaged over the two
/// directions.
pub fn acc_space(pred_h: &Grid<u32>, pred_v: &Grid<u32>, label: &ProxyLabel) -> Result<f64> {
    acc_space_weighted(pred_h, pred_v, label, AccWeighting::AsPrinted)
}

pub fn acc_space_weighted(
    pred_h: &Grid<u32>,
    pred_v: &Grid<u32>,
    label: &ProxyLabel,
    weighting: AccWeighting,
) -> Result<f64> {
    let h = DirectionAccuracy::measure(pred_h, &label.horizontal)?;
    let v = DirectionAccuracy::measure(pred_v, &label.vertical)?;
    Ok(0.5 * (h.combined(weighting) + v.combined(weighting)))
}

#[cfg(test)]
mod tests {
    use super::*;
    use std::f64::consts::PI;

    fn sine(periods: f64, len: usize) -> Profile1D {
        Profile1D::new(
            (0..len)
                .map(|i| (2.0 * PI * periods * i as f64 / len as f64).sin())
                .collect(),
            "sine",
        )
    }

    fn square(periods: usize, len: usize) -> Profile1D {
        let period = len / periods;
        Profile1D::new(
            (0..len)
                .map(|i| if (i % period) < period / 2 { 1.0 } else { -1.0 })
                .collect(),
            "square",
        )
    }

    #[test]
    fn flat_and_monotone_profiles_score_zero() {
        let flat = Profile1D::new(vec![3.0; 100], "flat");
        assert_eq!(waviness(&flat, 0.1).unwrap().waviness, 0.0);
        let ramp = Profile1D::new((0..100).map(|i| i as f64 / 99.0).collect(), "ramp");
        let r = waviness(&ramp, 0.1).unwrap();
        assert_eq!(r.waviness, 0.0);
        assert_eq!(r.extrema.len(), 2);
    }

    #[test]
    fn periodic_profiles_score_near_one() {
        // brute-force expectation: all intervals between the first and last
        // sample are effective, so the score is (L - 1) / L
        let s = waviness(&sine(4.0, 200), 0.1).unwrap();
        assert!((s.waviness - 199.0 / 200.0).abs() < 1e-12, "{}", s.waviness);
        assert_eq!(s.extrema.len(), 10);
        let q = waviness(&square(4, 200), 0.1).unwrap();
        assert!((q.waviness - 199.0 / 200.0).abs() < 1e-12, "{}", q.waviness);
    }

    #[test]
    fn plateau_extrema_at_midpoints() {
        // period-10 triangle with two-sample crests and troughs
        let base = [0.0, 1.0, 2.0, 2.0, 1.0, 0.0, -1.0, -2.0, -2.0, -1.0];
        let values: Vec<f64> = base.iter().cycle().take(40).copied().collect();
        let r = waviness(&Profile1D::new(values, "triangle"), 0.1).unwrap();
        let interior: Vec<f64> = r.extrema[1..r.extrema.len() - 1].iter().map(|e| e.index).collect();
        let expected: Vec<f64> = (0..8).map(|k| 2.5 + 5.0 * k as f64).collect();
        assert_eq!(interior, expected);
    }

    #[test]
    fn small_wiggles_are_not_waves() {
        // 0, 2.5, 2, 4.5, 4, ...: alternating but tiny against the global range
        let mut values: Vec<f64> = (0..100).map(|i| i as f64).collect();
        for (i, v) in values.iter_mut().enumerate() {
            if i % 2 == 1 {
                *v += 1.5;
            }
        }
        let r = waviness(&Profile1D::new(values, "noisy ramp"), 0.1).unwrap();
        assert_eq!(r.waviness, 0.0);
    }

    #[test]
    fn short_or_non_finite_profiles_rejected() {
        assert!(waviness(&Profile1D::new(vec![1.0, 2.0], "short"), 0.1).is_err());
        assert!(waviness(&Profile1D::new(vec![1.0, f64::NAN, 2.0], "nan"), 0.1).is_err());
    }

    #[test]
    fn report_serializes() {
        let r = waviness(&sine(2.0, 50), 0.1).unwrap();
        let back: WavinessReport = serde_json::from_str(&r.to_json().unwrap()).unwrap();
        assert_eq!(back, r);
    }

    fn grid(rows: usize, cols: usize, data: Vec<u32>) -> Grid<u32> {
        Grid::from_vec(rows, cols, data).unwrap()
    }

    #[test]
    fn perfect_prediction_is_one() {
        let label = ProxyLabel {
            horizontal: grid(2, 2, vec![0, 1, 2, 0]),
            vertical: grid(2, 2, vec![0, 1, 1, 0]),
        };
        assert_eq!(acc_space(&label.horizontal, &label.vertical, &label).unwrap(), 1.0);
    }

    #[test]
    fn all_background_prediction() {
        // 10 object pixels out of 100
        let target = Grid::from_fn(10, 10, |r, _| if r == 0 { 3 } else { 0 });
        let label = ProxyLabel {
            horizontal: target.clone(),
            vertical: target,
        };
        let pred = Grid::new(10, 10);
        assert_eq!(acc_space(&pred, &pred, &label).unwrap(), 0.1);
    }

    #[test]
    fn hand_evaluated_fixture() {
        // 16 pixels, 2 object pixels, one predicted correctly, background perfect:
        // (14/16)*0.5 + (2/16)*1 = 0.5625 in both directions
        let mut target = Grid::new(4, 4);
        target.set(1, 1, 2u32);
        target.set(2, 3, 4u32);
        let mut pred = Grid::new(4, 4);
        pred.set(1, 1, 2u32);
        pred.set(2, 3, 1u32);
        let label = ProxyLabel {
            horizontal: target.clone(),
            vertical: target,
        };
        assert_eq!(acc_space(&pred, &pred, &label).unwrap(), 0.5625);
        let proportional =
            acc_space_weighted(&pred, &pred, &label, AccWeighting::Proportional).unwrap();
        assert_eq!(proportional, 2.0 / 16.0 * 0.5 + 14.0 / 16.0);
    }

    #[test]
    fn empty_object_counts_as_correct_object_accuracy() {
        let target = Grid::new(3, 3);
        let acc = DirectionAccuracy::measure(&target, &target).unwrap();
        assert_eq!(acc.acc_object, 1.0);
    }
}
