//! Per-channel mean activity maps and the 1D profiles cut from them.

use std::path::Path;

use ndarray::Array3;
use serde::{Deserialize, Serialize};

use crate::dataio::{DatasetSplit, SkeletonSample};
use crate::error::{Error, Result};
use crate::grid::Grid;
use crate::metrics::{waviness, Profile1D, WavinessReport};
use crate::nn::model::samples_to_tensor;
use crate::nn::{Model, Tensor};
use crate::par;
use crate::spacemask::{Direction, SlitProbe};

/// Anything that can produce named per-sample feature maps.
pub trait FeatureSource: Sync {
    fn layer_names(&self) -> Vec<String>;

    /// Activations of one sample at `layer`, shaped `[1, C, h, w]`.
    fn features(&self, sample: &SkeletonSample, layer: &str) -> Result<Tensor>;

    fn check_layer(&self, layer: &str) -> Result<()> {
        let available = self.layer_names();
        if available.iter().any(|n| n == layer) {
            Ok(())
        } else {
            Err(Error::UnknownLayer {
                name: layer.into(),
                available,
            })
        }
    }
}

impl FeatureSource for Model {
    fn layer_names(&self) -> Vec<String> {
        Model::layer_names(self)
    }

    fn features(&self, sample: &SkeletonSample, layer: &str) -> Result<Tensor> {
        let mut out = self.infer(samples_to_tensor([sample])?, &[layer])?;
        Ok(out.activations.pop().expect("one layer requested").1)
    }
}

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Normalization {
    #[default]
    Raw,
    MinMax,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Ratemap {
    pub values: Grid<f64>,
    pub layer: String,
    pub channel: usize,
    pub n_images: usize,
    pub normalization: Normalization,
}

impl Ratemap {
    /// Rescales to `[0, 1]`; a constant map becomes all zeros.
    pub fn min_max(&self) -> Ratemap {
        let (lo, hi) = self
            .values
            .iter()
            .fold((f64::INFINITY, f64::NEG_INFINITY), |(lo, hi), &v| (lo.min(v), hi.max(v)));
        let span = hi - lo;
        Ratemap {
            values: self.values.map(|&v| if span > 0.0 { (v - lo) / span } else { 0.0 }),
            normalization: Normalization::MinMax,
            ..self.clone()
        }
    }

    /// Nearest-neighbour enlargement for display.
    pub fn upsampled(&self, size: (usize, usize)) -> Grid<f64> {
        crate::dataio::resize_nearest(&self.values, size)
    }
}

/// How a 2D map is reduced to a profile.
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Reduction {
    /// Average across the orthogonal axis.
    #[default]
    Mean,
    /// Take the middle row (horizontal) or column (vertical).
    CenterLine,
}

fn split_channels(t: &Tensor) -> Vec<Grid<f64>> {
    let [_, c, h, w] = t.shape();
    (0..c)
        .map(|k| Grid::from_vec(h, w, t.plane(0, k).iter().map(|&v| v as f64).collect()).expect("plane"))
        .collect()
}

/// Mean activation per channel of `layer` over every sample of `split`.
///
/// Samples are visited in their canonical `order_key` order and summed in
/// `f64`, so the result is independent of split order and thread count.
pub fn extract_ratemaps<S: FeatureSource + ?Sized>(src: &S, split: &DatasetSplit, layer: &str) -> Result<Vec<Ratemap>> {
    ratemaps_over(src, &split.samples, layer)
}

pub fn ratemaps_over<S: FeatureSource + ?Sized>(src: &S, samples: &[SkeletonSample], layer: &str) -> Result<Vec<Ratemap>> {
    src.check_layer(layer)?;
    if samples.is_empty() {
        return Err(Error::InvalidConfig("ratemaps need at least one image".into()));
    }
    let mut ordered: Vec<&SkeletonSample> = samples.iter().collect();
    ordered.sort_by(|a, b| a.order_key().cmp(&b.order_key()));

    const CHUNK: usize = 32;
    let mut sums: Option<Vec<Grid<f64>>> = None;
    for chunk in ordered.chunks(CHUNK) {
        let feats = par::map_slice(chunk, |s| src.features(s, layer));
        for f in feats {
            let maps = split_channels(&f?);
            match &mut sums {
                None => sums = Some(maps),
                Some(acc) => {
                    if acc.len() != maps.len() || acc[0].dims() != maps[0].dims() {
                        return Err(Error::ShapeMismatch {
                            expected: format!("{} channels of {:?}", acc.len(), acc[0].dims()),
                            actual: format!("{} channels of {:?}", maps.len(), maps[0].dims()),
                        });
                    }
                    for (a, m) in acc.iter_mut().zip(&maps) {
                        a.as_mut_slice().iter_mut().zip(m.iter()).for_each(|(x, y)| *x += y);
                    }
                }
            }
        }
    }
    let n = samples.len();
    Ok(sums
        .expect("nonempty")
        .into_iter()
        .enumerate()
        .map(|(channel, s)| Ratemap {
            values: s.map(|&v| v / n as f64),
            layer: layer.into(),
            channel,
            n_images: n,
            normalization: Normalization::Raw,
        })
        .collect())
}

/// Single-image activations for a slit probe, one map per channel.
pub fn probe_response<S: FeatureSource + ?Sized>(src: &S, probe: &SlitProbe, layer: &str) -> Result<Vec<Ratemap>> {
    ratemaps_over(src, &[probe.as_sample()], layer)
}

/// Cuts a profile along `axis`: a horizontal profile has one value per
/// column, a vertical profile one per row.
pub fn profile_from_ratemap(map: &Ratemap, axis: Direction, reduction: Reduction) -> Profile1D {
    let (h, w) = map.values.dims();
    let values: Vec<f64> = match (axis, reduction) {
        (Direction::Horizontal, Reduction::Mean) => {
            (0..w).map(|c| (0..h).map(|r| map.values.at(r, c)).sum::<f64>() / h as f64).collect()
        }
        (Direction::Vertical, Reduction::Mean) => {
            (0..h).map(|r| map.values.row(r).iter().sum::<f64>() / w as f64).collect()
        }
        (Direction::Horizontal, Reduction::CenterLine) => map.values.row(h / 2).to_vec(),
        (Direction::Vertical, Reduction::CenterLine) => (0..h).map(|r| map.values.at(r, w / 2)).collect(),
    };
    let axis = match axis {
        Direction::Horizontal => "horizontal",
        Direction::Vertical => "vertical",
    };
    let reduction = match reduction {
        Reduction::Mean => "mean",
        Reduction::CenterLine => "center_line",
    };
    Profile1D::new(values, format!("{}/ch{}/{axis}/{reduction}", map.layer, map.channel))
}

/// Waviness of every channel along both axes.
pub fn layer_waviness(maps: &[Ratemap], reduction: Reduction, threshold: f64) -> Result<Vec<WavinessReport>> {
    let mut out = Vec::with_capacity(maps.len() * 2);
    for m in maps {
        for axis in [Direction::Horizontal, Direction::Vertical] {
            out.push(waviness(&profile_from_ratemap(m, axis, reduction), threshold)?);
        }
    }
    Ok(out)
}

/// Writes all maps of one layer as a `[C, h, w]` float64 `.npy` array.
pub fn write_npy(maps: &[Ratemap], path: &Path) -> Result<()> {
    let first = maps
        .first()
        .ok_or_else(|| Error::InvalidConfig("no ratemaps to export".into()))?;
    let (h, w) = first.values.dims();
    let mut data = Vec::with_capacity(maps.len() * h * w);
    for m in maps {
        m.values.ensure_dims((h, w), "ratemap")?;
        data.extend_from_slice(m.values.as_slice());
    }
    let arr = Array3::from_shape_vec((maps.len(), h, w), data).expect("shape checked");
    ndarray_npy::write_npy(path, &arr).map_err(|e| Error::Io(std::io::Error::other(e)))
}

pub fn read_npy(path: &Path) -> Result<Array3<f64>> {
    ndarray_npy::read_npy(path).map_err(|e| Error::Io(std::io::Error::other(e)))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::dataio::synthesize_skeletons;
    use crate::nn::{build_model, Backbone, ModelConfig, LAST_HIDDEN};

    /// Returns a constant map whose value is the sample's numeric suffix.
    struct IndexStub;

    impl FeatureSource for IndexStub {
        fn layer_names(&self) -> Vec<String> {
            vec!["x".into()]
        }

        fn features(&self, sample: &SkeletonSample, _: &str) -> Result<Tensor> {
            let i: f32 = sample.source_id.rsplit('-').next().unwrap().parse().unwrap();
            Ok(Tensor::full([1, 2, 3, 4], i))
        }
    }

    fn split_of(n: usize) -> DatasetSplit {
        let mut s = synthesize_skeletons(n, (8, 8), 0).unwrap();
        for (i, x) in s.samples.iter_mut().enumerate() {
            x.source_id = format!("s-{i}");
        }
        s
    }

    #[test]
    fn mean_of_indices() {
        let maps = extract_ratemaps(&IndexStub, &split_of(5), "x").unwrap();
        assert_eq!(maps.len(), 2);
        for m in &maps {
            assert_eq!(m.n_images, 5);
            assert!(m.values.iter().all(|&v| v == 2.0));
        }
    }

    #[test]
    fn unknown_layer_is_rejected() {
        let err = extract_ratemaps(&IndexStub, &split_of(1), "y").unwrap_err();
        assert!(matches!(err, Error::UnknownLayer { .. }));
    }

    #[test]
    fn single_image_equals_its_feature_map() {
        let model = build_model(&ModelConfig::desk_scale(Backbone::Tiny, 3)).unwrap();
        let split = synthesize_skeletons(1, (64, 64), 4).unwrap();
        let maps = extract_ratemaps(&model, &split, "conv2").unwrap();
        let f = model.features(&split.samples[0], "conv2").unwrap();
        for m in &maps {
            let plane = f.plane(0, m.channel);
            assert!(m.values.iter().zip(plane).all(|(&a, &b)| a == b as f64));
        }
    }

    #[test]
    fn profile_reductions() {
        let map = Ratemap {
            values: Grid::from_vec(2, 4, vec![1.0, 2.0, 3.0, 4.0, 3.0, 4.0, 5.0, 6.0]).unwrap(),
            layer: "l".into(),
            channel: 0,
            n_images: 1,
            normalization: Normalization::Raw,
        };
        let p = profile_from_ratemap(&map, Direction::Horizontal, Reduction::Mean);
        assert_eq!(p.values, vec![2.0, 3.0, 4.0, 5.0]);
        let v = profile_from_ratemap(&map, Direction::Vertical, Reduction::Mean);
        assert_eq!(v.values, vec![2.5, 4.5]);
        let c = profile_from_ratemap(&map, Direction::Horizontal, Reduction::CenterLine);
        assert_eq!(c.values, vec![3.0, 4.0, 5.0, 6.0]);
        let mm = map.min_max();
        assert_eq!(mm.values.at(0, 0), 0.0);
        assert_eq!(mm.values.at(1, 3), 1.0);
    }

    #[test]
    fn npy_round_trip() {
        let maps = extract_ratemaps(&IndexStub, &split_of(3), "x").unwrap();
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("x.npy");
        write_npy(&maps, &path).unwrap();
        let arr = read_npy(&path).unwrap();
        assert_eq!(arr.shape(), &[2, 3, 4]);
        assert!(arr.iter().all(|&v| v == 1.0));
    }

    #[test]
    fn probe_on_model_has_finite_maps() {
        let model = build_model(&ModelConfig::desk_scale(Backbone::Tiny, 3)).unwrap();
        let probe = crate::spacemask::make_slit_probe((64, 64), crate::spacemask::SlitKind::Single, 16, 0).unwrap();
        let maps = probe_response(&model, &probe, LAST_HIDDEN).unwrap();
        assert_eq!(maps.len(), model.config().width * 2);
        assert!(maps.iter().all(|m| m.n_images == 1 && m.values.iter().all(|v| v.is_finite())));
    }
}
