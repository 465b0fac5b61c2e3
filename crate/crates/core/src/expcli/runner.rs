//! Pipeline stages operating on one run directory.

use std::path::{Path, PathBuf};

use super::config::{DataSource, ExperimentConfig};
use super::record::{AttackSummary, ExperimentRecord, ProbeSummary, ProfileWaviness};
use crate::dataio::{augment_rotations, load_skeleton_dataset, synthesize_split, DatasetSplit, SplitKind};
use crate::error::{Error, Result};
use crate::metrics::mean_waviness;
use crate::nn::{build_model, evaluate, train, Checkpoint, LabelledSet, Model};
use crate::ratemap::{
    extract_ratemaps, layer_waviness, probe_response, profile_from_ratemap, read_npy, write_npy, Normalization, Ratemap,
    Reduction,
};
use crate::render::write_heatmap;
use crate::spacemask::{build_mask_pair, make_slit_probe_on_axis, write_indexed_png, Direction, SlitKind, SpaceMask};
use crate::waveattack::{frequency_attack, SpaceNetAdapter};
use crate::grid::Grid;

pub const CONFIG_FILE: &str = "config.toml";
pub const RECORD_FILE: &str = "record.json";
const CHECKPOINT_DIR: &str = "checkpoints";
/// Channels rendered as heatmaps per layer.
const MAX_HEATMAPS: usize = 8;

/// Train/test data and the masks that label them.
pub struct Datasets {
    pub train: DatasetSplit,
    pub test: DatasetSplit,
    pub masks: (SpaceMask, SpaceMask),
}

impl Datasets {
    pub fn split(&self, kind: SplitKind) -> &DatasetSplit {
        match kind {
            SplitKind::Train => &self.train,
            SplitKind::Test => &self.test,
        }
    }
}

pub fn reduction_name(r: Reduction) -> &'static str {
    match r {
        Reduction::Mean => "mean",
        Reduction::CenterLine => "center_line",
    }
}

/// One experiment and the directory its artifacts live in.
pub struct Experiment {
    pub config: ExperimentConfig,
    pub dir: PathBuf,
}

impl Experiment {
    /// Creates `output_dir/<run-id>`, where the id defaults to a UTC
    /// timestamp plus the config hash.
    pub fn create(config: ExperimentConfig, run_id: Option<&str>) -> Result<Self> {
        config.validate()?;
        let id = match run_id {
            Some(id) => id.to_string(),
            None => format!(
                "{}-{}",
                chrono::Utc::now().format("%Y%m%dT%H%M%SZ"),
                config.short_hash()?
            ),
        };
        let dir = config.output_dir.join(id);
        Self::at(config, &dir)
    }

    /// Uses `dir` as the run directory, creating it if needed.
    pub fn at(config: ExperimentConfig, dir: &Path) -> Result<Self> {
        config.validate()?;
        std::fs::create_dir_all(dir)?;
        config.save(&dir.join(CONFIG_FILE))?;
        let exp = Self {
            config,
            dir: dir.to_path_buf(),
        };
        let record_path = dir.join(RECORD_FILE);
        let mut rec = if record_path.exists() {
            ExperimentRecord::load(&record_path)?
        } else {
            ExperimentRecord::new(exp.run_id(), exp.config.clone())
        };
        rec.config = exp.config.clone();
        rec.save(&record_path)?;
        Ok(exp)
    }

    /// Opens an existing run, optionally overriding parts of its config.
    pub fn open(dir: &Path, overrides: &[(String, String)]) -> Result<Self> {
        let path = dir.join(CONFIG_FILE);
        if !path.exists() {
            return Err(Error::Missing(format!("no run found at {} (missing {CONFIG_FILE})", dir.display())));
        }
        let config = ExperimentConfig::load(&path)?.with_overrides(overrides)?;
        Self::at(config, dir)
    }

    pub fn run_id(&self) -> String {
        self.dir
            .file_name()
            .map(|n| n.to_string_lossy().into_owned())
            .unwrap_or_default()
    }

    pub fn record(&self) -> Result<ExperimentRecord> {
        ExperimentRecord::load(&self.dir.join(RECORD_FILE))
    }

    fn update(&self, stage: &str, f: impl FnOnce(&mut ExperimentRecord)) -> Result<ExperimentRecord> {
        let mut rec = self.record()?;
        f(&mut rec);
        rec.stages.push(stage.to_string());
        rec.save(&self.dir.join(RECORD_FILE))?;
        Ok(rec)
    }

    fn subdir(&self, name: &str) -> Result<PathBuf> {
        let d = self.dir.join(name);
        std::fs::create_dir_all(&d)?;
        Ok(d)
    }

    /// Rebuilds the data deterministically from the config.
    pub fn datasets(&self) -> Result<Datasets> {
        let d = &self.config.data;
        let (train, test) = match &d.source {
            DataSource::Synthetic => (
                synthesize_split(d.train_count, d.size, self.config.seed.wrapping_mul(2), SplitKind::Train)?,
                synthesize_split(d.test_count, d.size, self.config.seed.wrapping_mul(2).wrapping_add(1), SplitKind::Test)?,
            ),
            DataSource::Directory(root) => (
                load_skeleton_dataset(root, SplitKind::Train, d.size)?,
                load_skeleton_dataset(root, SplitKind::Test, d.size)?,
            ),
        };
        let train = if d.augment {
            let mut aug = augment_rotations(&train)?;
            // quarter turns would swap the dimensions of non-square inputs
            aug.samples.retain(|s| !s.dims_swapped);
            aug
        } else {
            train
        };
        let masks = build_mask_pair(d.size, d.regions, d.scheme)?;
        Ok(Datasets { train, test, masks })
    }

    pub fn prepare_data(&self) -> Result<ExperimentRecord> {
        let data = self.datasets()?;
        let out = self.subdir("data")?;
        data.train.write_manifest(&out.join("train_manifest.txt"))?;
        data.test.write_manifest(&out.join("test_manifest.txt"))?;
        write_indexed_png(&data.masks.0.labels, &out.join("mask_horizontal.png"))?;
        write_indexed_png(&data.masks.1.labels, &out.join("mask_vertical.png"))?;
        if let DataSource::Synthetic = self.config.data.source {
            for (kind, split) in [(SplitKind::Train, &data.train), (SplitKind::Test, &data.test)] {
                let dir = out.join(kind.as_str());
                std::fs::create_dir_all(&dir)?;
                for s in split.samples.iter().filter(|s| s.rotation.degrees() == 0) {
                    let img = image::GrayImage::from_fn(s.pixels.cols() as u32, s.pixels.rows() as u32, |x, y| {
                        image::Luma([s.pixels.at(y as usize, x as usize) * 255])
                    });
                    img.save(dir.join(format!("{}.png", s.source_id)))?;
                }
            }
        }
        let (n_train, n_test) = (data.train.len(), data.test.len());
        self.update("prepare-data", |r| {
            r.artifacts.insert("data".into(), "data".into());
            log::info!("prepared {n_train} training and {n_test} test samples");
        })
    }

    pub fn train(&self) -> Result<ExperimentRecord> {
        let data = self.datasets()?;
        let set = LabelledSet::new(&data.train, &data.masks)?;
        let mut model = build_model(&self.config.model_config()?)?;
        let ckpt_dir = self.subdir(CHECKPOINT_DIR)?;
        let ckpt = train(&mut model, &set, &self.config.train, Some(&ckpt_dir))?;
        let last_loss = ckpt.metrics_history.last().map(|m| m.loss);
        self.update("train", |r| {
            r.checkpoint = Some(PathBuf::from(CHECKPOINT_DIR).join("latest"));
            r.metrics.final_train_loss = last_loss;
            r.artifacts
                .insert("metrics_csv".into(), PathBuf::from(CHECKPOINT_DIR).join("metrics.csv"));
        })
    }

    pub fn load_model(&self) -> Result<Model> {
        let dir = self.dir.join(CHECKPOINT_DIR).join("latest");
        if !dir.join(crate::nn::checkpoint::METADATA_FILE).exists() {
            return Err(Error::Missing(format!(
                "no checkpoint in {}; run `train` first",
                self.dir.display()
            )));
        }
        Checkpoint::load(&dir)?.to_model()
    }

    pub fn eval(&self) -> Result<ExperimentRecord> {
        let model = self.load_model()?;
        let data = self.datasets()?;
        let tr = evaluate(&model, &LabelledSet::new(&data.train, &data.masks)?)?;
        let te = evaluate(&model, &LabelledSet::new(&data.test, &data.masks)?)?;
        log::info!("train Acc_space {:.4}, test Acc_space {:.4}", tr.acc_space, te.acc_space);
        self.update("eval", |r| {
            r.metrics.train_acc_space = Some(tr.acc_space);
            r.metrics.acc_space = Some(te.acc_space);
            r.metrics.test_loss = Some(te.loss);
        })
    }

    fn write_heatmaps(&self, maps: &[Ratemap], dir: &Path, stem: &str) -> Result<Vec<PathBuf>> {
        let mut out = Vec::new();
        for m in maps.iter().take(MAX_HEATMAPS) {
            let rel = dir.join(format!("{stem}_ch{:02}.png", m.channel));
            let scale = (256 / m.values.cols().max(1)).max(1) as u32;
            write_heatmap(&m.values, scale, &self.dir.join(&rel))?;
            out.push(rel);
        }
        Ok(out)
    }

    pub fn ratemap(&self) -> Result<ExperimentRecord> {
        let model = self.load_model()?;
        let data = self.datasets()?;
        let layer = &self.config.analysis.layer;
        let maps = extract_ratemaps(&model, data.split(self.config.analysis.ratemap_split), layer)?;
        self.subdir("ratemaps")?;
        let npy = PathBuf::from("ratemaps").join(format!("{layer}.npy"));
        write_npy(&maps, &self.dir.join(&npy))?;
        self.write_heatmaps(&maps, Path::new("ratemaps"), layer)?;
        self.update("ratemap", |r| {
            r.artifacts.insert("ratemaps".into(), npy);
        })
    }

    /// Reloads the exported ratemaps of the analysis layer.
    pub fn load_ratemaps(&self) -> Result<Vec<Ratemap>> {
        let rec = self.record()?;
        let rel = rec
            .artifacts
            .get("ratemaps")
            .ok_or_else(|| Error::Missing("no ratemaps recorded; run `ratemap` first".into()))?;
        let arr = read_npy(&self.dir.join(rel))?;
        let split = self.config.analysis.ratemap_split;
        let n_images = self.datasets()?.split(split).len();
        let (c, h, w) = arr.dim();
        Ok((0..c)
            .map(|k| Ratemap {
                values: Grid::from_fn(h, w, |r, col| arr[[k, r, col]]),
                layer: self.config.analysis.layer.clone(),
                channel: k,
                n_images,
                normalization: Normalization::Raw,
            })
            .collect())
    }

    pub fn waviness(&self) -> Result<ExperimentRecord> {
        let maps = self.load_ratemaps()?;
        let a = &self.config.analysis;
        self.subdir("waviness")?;
        let mut by_reduction = std::collections::BTreeMap::new();
        let mut first = None;
        let mut files = Vec::new();
        for &red in &a.reductions {
            let reports = layer_waviness(&maps, red, a.waviness_threshold)?;
            let mean = mean_waviness(&reports);
            let profiles: Vec<_> = maps
                .iter()
                .flat_map(|m| [Direction::Horizontal, Direction::Vertical].map(|d| profile_from_ratemap(m, d, red)))
                .zip(reports)
                .map(|(p, report)| ProfileWaviness {
                    origin: p.origin,
                    values: p.values,
                    report,
                })
                .collect();
            first.get_or_insert(mean);
            by_reduction.insert(reduction_name(red).to_string(), mean);
            let rel = PathBuf::from("waviness").join(format!("{}_{}.json", a.layer, reduction_name(red)));
            std::fs::write(self.dir.join(&rel), serde_json::to_string_pretty(&profiles)?)?;
            files.push((reduction_name(red), rel));
        }
        let w = first.expect("at least one reduction");
        let flag = w > a.wave_pattern_threshold;
        log::info!("aggregate waviness {w:.4} (wave pattern: {flag})");
        self.update("waviness", |r| {
            r.metrics.waviness = Some(w);
            r.metrics.waviness_by_reduction = by_reduction;
            r.metrics.wave_pattern = Some(flag);
            for (name, rel) in files {
                r.artifacts.insert(format!("waviness_{name}"), rel);
            }
        })
    }

    pub fn probe(&self) -> Result<ExperimentRecord> {
        let model = self.load_model()?;
        let a = &self.config.analysis;
        let p = &a.probe;
        self.subdir("probes")?;
        let mut summaries = Vec::new();
        let mut artifacts = Vec::new();
        for kind in [SlitKind::Single, SlitKind::Double] {
            let sep = if kind == SlitKind::Single { 0 } else { p.separation };
            let probe = make_slit_probe_on_axis(self.config.data.size, kind, p.slit_length, sep, p.axis)?;
            let maps = probe_response(&model, &probe, &a.layer)?;
            let name = if kind == SlitKind::Single { "single" } else { "double" };
            let npy = PathBuf::from("probes").join(format!("{name}_{}.npy", a.layer));
            write_npy(&maps, &self.dir.join(&npy))?;
            self.write_heatmaps(&maps, Path::new("probes"), &format!("{name}_{}", a.layer))?;
            let reports: Vec<_> = maps
                .iter()
                .map(|m| {
                    let prof = profile_from_ratemap(m, Direction::Horizontal, Reduction::CenterLine);
                    crate::metrics::waviness(&prof, a.waviness_threshold)
                })
                .collect::<Result<_>>()?;
            let count: usize = reports.iter().map(|r| r.effective_intervals.len()).sum();
            summaries.push((mean_waviness(&reports), count));
            artifacts.push((format!("probe_{name}"), npy));
        }
        self.update("probe", |r| {
            r.metrics.probe = Some(ProbeSummary {
                single_waviness: summaries[0].0,
                double_waviness: summaries[1].0,
                single_effective_intervals: summaries[0].1,
                double_effective_intervals: summaries[1].1,
            });
            r.artifacts.extend(artifacts);
        })
    }

    pub fn attack(&self) -> Result<ExperimentRecord> {
        let model = self.load_model()?;
        let data = self.datasets()?;
        let set = LabelledSet::new(&data.test, &data.masks)?;
        let n = set.len().min(self.config.attack.max_images);
        let adapter = SpaceNetAdapter { model: &model };
        let ds = SpaceNetAdapter::dataset(&set.samples[..n], &set.labels[..n]);
        let a = &self.config.attack;
        let result = frequency_attack(&adapter, &ds, &a.grid, a.epsilon, a.waveform)?;
        self.subdir("attack")?;
        result.write_csv(&self.dir.join("attack/attack.csv"))?;
        std::fs::write(self.dir.join("attack/summary.json"), result.summary_json()?)?;
        let (_, _, map) = result.score_map();
        write_heatmap(&map, 16, &self.dir.join("attack/heatmap.png"))?;
        log::info!(
            "attack baseline {:.4}, strongest {:.4} at λ={} θ={}, weakest {:.4}",
            result.baseline_score,
            result.strongest.score,
            result.strongest.wavelength,
            result.strongest.orientation,
            result.weakest.score
        );
        self.update("attack", |r| {
            r.metrics.attack = Some(AttackSummary {
                epsilon: a.epsilon,
                baseline_score: result.baseline_score,
                strongest: result.strongest,
                weakest: result.weakest,
            });
            r.artifacts.insert("attack_csv".into(), "attack/attack.csv".into());
            r.artifacts.insert("attack_heatmap".into(), "attack/heatmap.png".into());
        })
    }

    /// Train, evaluate, extract ratemaps and score their waviness; probe
    /// and attack on request.
    pub fn run_pipeline(&self, probe: bool, attack: bool) -> Result<ExperimentRecord> {
        self.train()?;
        self.eval()?;
        self.ratemap()?;
        let mut rec = self.waviness()?;
        if probe {
            rec = self.probe()?;
        }
        if attack {
            rec = self.attack()?;
        }
        Ok(rec)
    }
}
