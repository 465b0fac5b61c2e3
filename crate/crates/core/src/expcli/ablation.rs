//! One-factor-at-a-time sweeps around a baseline config.

use std::path::Path;

use super::config::ExperimentConfig;
use super::record::{ExperimentRecord, FactorTag};
use super::runner::Experiment;
use crate::error::{Error, Result};

/// A config key and the values it takes in a sweep.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct Factor {
    /// Short name shown in tables.
    pub axis: String,
    /// Dotted config key.
    pub key: String,
    /// Variant names shown in tables.
    pub variants: Vec<String>,
    /// Override literal for each variant.
    pub values: Vec<String>,
}

impl Factor {
    fn same(axis: &str, key: &str, variants: &[&str]) -> Self {
        Self {
            axis: axis.into(),
            key: key.into(),
            variants: variants.iter().map(|s| s.to_string()).collect(),
            values: variants.iter().map(|s| s.to_string()).collect(),
        }
    }

    /// Built-in axis with its default variants, sized relative to `base`.
    pub fn named(axis: &str, base: &ExperimentConfig) -> Result<Self> {
        let (h, _) = base.data.size;
        Ok(match axis {
            "backbone" => Self::same(axis, "model.backbone", &["tiny", "vgg16_like", "resnet50_like"]),
            "head_arch" => Self::same(axis, "model.head_arch", &["fcn8_like", "dilated"]),
            "scheme" => Self::same(axis, "data.scheme", &["xy", "xy_symmetric"]),
            "regions" => Self::same(axis, "data.regions", &["2", "4", "8"]),
            "augment" => Self::same(axis, "data.augment", &["true", "false"]),
            "init" => Self::same(axis, "model.init", &["random"]),
            "input_shape" => Self {
                axis: axis.into(),
                key: "data.size".into(),
                variants: vec!["square".into(), "non_square".into()],
                values: vec![format!("[{h}, {h}]"), format!("[{h}, {}]", non_square_width(h))],
            },
            other => {
                return Err(Error::InvalidConfig(format!(
                    "unknown ablation axis `{other}`; known axes: {}",
                    KNOWN_AXES.join(", ")
                )))
            }
        })
    }

    /// Parses `axis` or `axis=v1,v2`. Values for `init` other than
    /// `random` are taken as external weight files.
    pub fn parse(spec: &str, base: &ExperimentConfig) -> Result<Self> {
        let Some((axis, list)) = spec.split_once('=') else {
            return Self::named(spec, base);
        };
        let mut f = Self::named(axis, base)?;
        let variants: Vec<String> = list.split(',').map(|s| s.trim().to_string()).filter(|s| !s.is_empty()).collect();
        if variants.is_empty() {
            return Err(Error::InvalidConfig(format!("ablation axis `{axis}` has no values")));
        }
        f.values = variants
            .iter()
            .map(|v| match (axis, v.as_str()) {
                ("init", "random") => v.clone(),
                ("init", path) => format!("{{ external_weights = {:?} }}", path),
                ("input_shape", "square") | ("input_shape", "non_square") => {
                    let i = if v == "square" { 0 } else { 1 };
                    Self::named(axis, base).map(|n| n.values[i].clone()).unwrap_or_default()
                }
                _ => v.clone(),
            })
            .collect();
        f.variants = variants;
        Ok(f)
    }

    /// Index of the variant the baseline config already uses.
    fn baseline_index(&self, base: &ExperimentConfig) -> Option<usize> {
        self.values.iter().position(|v| {
            base.with_overrides(&[(self.key.clone(), v.clone())])
                .map(|c| &c == base)
                .unwrap_or(false)
        })
    }
}

/// Width paired with height `h` in the non-square variant: a 7:5 aspect
/// (224 x 160) rounded to a multiple of 32 so every head can downsample it.
pub fn non_square_width(h: usize) -> usize {
    ((h as f64 * 5.0 / 7.0 / 32.0).round() as usize).max(1) * 32
}

pub const KNOWN_AXES: [&str; 7] = ["backbone", "head_arch", "scheme", "regions", "input_shape", "augment", "init"];

/// One line of the ablation table.
#[derive(Clone, Debug, PartialEq)]
pub struct AblationRow {
    pub factor: String,
    pub variant: String,
    pub acc_space: Option<f64>,
    pub waviness: Option<f64>,
    pub wave_pattern: Option<bool>,
    pub error: Option<String>,
}

impl AblationRow {
    pub fn from_record(rec: &ExperimentRecord) -> Self {
        let (factor, variant) = match &rec.factor {
            Some(t) => (t.axis.clone(), t.value.clone()),
            None => ("baseline".into(), "-".into()),
        };
        Self {
            factor,
            variant,
            acc_space: rec.metrics.acc_space,
            waviness: rec.metrics.waviness,
            wave_pattern: rec.metrics.wave_pattern,
            error: rec.error.clone(),
        }
    }
}

fn fmt_opt(v: Option<f64>) -> String {
    v.map(|x| format!("{x:.4}")).unwrap_or_else(|| "n/a".into())
}

fn fmt_flag(v: Option<bool>) -> String {
    match v {
        Some(true) => "yes".into(),
        Some(false) => "no".into(),
        None => "n/a".into(),
    }
}

pub const TABLE_HEADER: [&str; 5] = ["Factors", "Types", "Acc_space", "waviness", "wave-pattern"];

pub fn write_table_csv(rows: &[AblationRow], path: &Path) -> Result<()> {
    let mut w = csv::Writer::from_path(path)?;
    w.write_record(TABLE_HEADER)?;
    for r in rows {
        w.write_record([
            r.factor.clone(),
            r.variant.clone(),
            fmt_opt(r.acc_space),
            fmt_opt(r.waviness),
            fmt_flag(r.wave_pattern),
        ])?;
    }
    w.flush()?;
    Ok(())
}

/// Fixed-width text rendering of the table; failed runs get a note.
pub fn table_text(rows: &[AblationRow]) -> String {
    let cells: Vec<[String; 5]> = rows
        .iter()
        .map(|r| {
            [
                r.factor.clone(),
                r.variant.clone(),
                fmt_opt(r.acc_space),
                fmt_opt(r.waviness),
                fmt_flag(r.wave_pattern),
            ]
        })
        .collect();
    let mut widths = TABLE_HEADER.map(str::len);
    for row in &cells {
        for (w, c) in widths.iter_mut().zip(row) {
            *w = (*w).max(c.len());
        }
    }
    let line = |row: &[String]| {
        row.iter()
            .zip(widths)
            .map(|(c, w)| format!("{c:<w$}"))
            .collect::<Vec<_>>()
            .join(" | ")
    };
    let header: Vec<String> = TABLE_HEADER.iter().map(|s| s.to_string()).collect();
    let mut out = line(&header);
    out.push('\n');
    out.push_str(&widths.map(|w| "-".repeat(w)).join("-+-"));
    out.push('\n');
    for (row, r) in cells.iter().zip(rows) {
        out.push_str(line(row).trim_end());
        if let Some(e) = &r.error {
            out.push_str(&format!("  (failed: {e})"));
        }
        out.push('\n');
    }
    out
}

/// Runs the baseline once plus every non-baseline variant of each factor.
/// A failing variant is recorded with its error and the sweep continues.
pub fn run_ablation(
    base: &ExperimentConfig,
    factors: &[Factor],
    dir: &Path,
    with_attack: bool,
) -> Result<Vec<ExperimentRecord>> {
    base.validate()?;
    std::fs::create_dir_all(dir)?;
    let mut records = Vec::new();
    let baseline = Experiment::at(base.clone(), &dir.join("baseline"))?;
    records.push(run_one(&baseline, None, with_attack)?);
    for f in factors {
        let skip = f.baseline_index(base);
        for (i, (variant, value)) in f.variants.iter().zip(&f.values).enumerate() {
            if Some(i) == skip {
                continue;
            }
            let tag = FactorTag {
                axis: f.axis.clone(),
                value: variant.clone(),
            };
            let run_dir = dir.join(format!("{}_{}", f.axis, sanitize(variant)));
            let rec = match base
                .with_overrides(&[(f.key.clone(), value.clone())])
                .and_then(|cfg| Experiment::at(cfg, &run_dir))
            {
                Ok(exp) => run_one(&exp, Some(tag), with_attack)?,
                Err(e) => {
                    log::warn!("{}={}: {e}", f.axis, variant);
                    std::fs::create_dir_all(&run_dir)?;
                    let mut rec = ExperimentRecord::new(run_dir.file_name().unwrap().to_string_lossy(), base.clone());
                    rec.factor = Some(tag);
                    rec.error = Some(e.to_string());
                    rec.save(&run_dir.join(super::runner::RECORD_FILE))?;
                    rec
                }
            };
            records.push(rec);
        }
    }
    let rows: Vec<AblationRow> = records.iter().map(AblationRow::from_record).collect();
    write_table_csv(&rows, &dir.join("ablation.csv"))?;
    std::fs::write(dir.join("ablation.txt"), table_text(&rows))?;
    Ok(records)
}

fn run_one(exp: &Experiment, tag: Option<FactorTag>, with_attack: bool) -> Result<ExperimentRecord> {
    let path = exp.dir.join(super::runner::RECORD_FILE);
    let mut rec = exp.record()?;
    rec.factor = tag;
    rec.save(&path)?;
    match exp.run_pipeline(false, with_attack) {
        Ok(r) => Ok(r),
        Err(e) => {
            log::warn!("run {} failed: {e}", exp.run_id());
            let mut rec = exp.record()?;
            rec.error = Some(e.to_string());
            rec.save(&path)?;
            Ok(rec)
        }
    }
}

fn sanitize(s: &str) -> String {
    s.chars()
        .map(|c| if c.is_ascii_alphanumeric() || c == '_' || c == '-' { c } else { '_' })
        .collect()
}
