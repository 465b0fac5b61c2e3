//! Collects run records under a directory and renders figures and tables.

use std::path::{Path, PathBuf};

use super::ablation::{table_text, write_table_csv, AblationRow};
use super::record::{ExperimentRecord, ProfileWaviness};
use super::runner::RECORD_FILE;
use crate::error::{Error, Result};
use crate::metrics::WavinessReport;
use crate::ratemap::read_npy;
use crate::render::{write_heatmap, ProfilePlot};
use crate::grid::Grid;

/// A record and the run directory it was read from.
#[derive(Clone, Debug)]
pub struct FoundRecord {
    pub dir: PathBuf,
    pub record: ExperimentRecord,
}

/// Finds every `record.json` below `root`, sorted by path.
pub fn collect_records(root: &Path) -> Result<Vec<FoundRecord>> {
    let mut out = Vec::new();
    for entry in walkdir::WalkDir::new(root).sort_by_file_name() {
        let entry = entry.map_err(|e| Error::Io(e.into()))?;
        if entry.file_type().is_file() && entry.file_name() == RECORD_FILE {
            let dir = entry.path().parent().unwrap_or(root).to_path_buf();
            out.push(FoundRecord {
                record: ExperimentRecord::load(entry.path())?,
                dir,
            });
        }
    }
    Ok(out)
}

/// Files written by [`render_report`].
#[derive(Clone, Debug, Default)]
pub struct ReportBundle {
    pub heatmaps: Vec<PathBuf>,
    pub profile_plots: Vec<PathBuf>,
    pub attack_heatmaps: Vec<PathBuf>,
    pub table_csv: PathBuf,
    pub table_txt: PathBuf,
    /// Artifacts a record names but that are not on disk.
    pub missing: Vec<PathBuf>,
}

/// Profile plot with turning points as markers and effective intervals
/// shaded.
pub fn write_profile_plot(values: &[f64], report: &WavinessReport, path: &Path) -> Result<()> {
    let markers: Vec<(f64, f64)> = report.extrema.iter().map(|e| (e.index, e.value)).collect();
    let intervals: Vec<(f64, f64)> = report.effective_intervals.iter().map(|i| (i.start, i.end)).collect();
    ProfilePlot {
        values,
        markers: &markers,
        intervals: &intervals,
    }
    .write(path)
}

/// Renders the first channel's ratemap, its profile plot and the attack
/// heatmap of every run, plus one combined table.
pub fn render_report(records: &[FoundRecord], out: &Path) -> Result<ReportBundle> {
    if records.is_empty() {
        return Err(Error::Missing("no records found".into()));
    }
    std::fs::create_dir_all(out)?;
    let mut bundle = ReportBundle::default();
    for (i, found) in records.iter().enumerate() {
        let rec = &found.record;
        let stem = format!("{i:02}_{}", sanitize(&rec.run_id));
        for rel in rec.artifacts.values() {
            if !found.dir.join(rel).exists() {
                bundle.missing.push(found.dir.join(rel));
            }
        }
        if let Some(rel) = rec.artifacts.get("ratemaps") {
            let path = found.dir.join(rel);
            if path.exists() {
                let arr = read_npy(&path)?;
                let (_, h, w) = arr.dim();
                let grid = Grid::from_fn(h, w, |r, c| arr[[0, r, c]]);
                let png = out.join(format!("{stem}_ratemap.png"));
                write_heatmap(&grid, (256 / w.max(1)).max(1) as u32, &png)?;
                bundle.heatmaps.push(png);
            }
        }
        let wav = rec
            .artifacts
            .iter()
            .find(|(k, _)| k.starts_with("waviness_"))
            .map(|(_, v)| found.dir.join(v));
        if let Some(path) = wav.filter(|p| p.exists()) {
            let profiles: Vec<ProfileWaviness> = serde_json::from_str(&std::fs::read_to_string(&path)?)?;
            if let Some(first) = profiles.first() {
                let png = out.join(format!("{stem}_profile.png"));
                write_profile_plot(&first.values, &first.report, &png)?;
                bundle.profile_plots.push(png);
            }
        }
        if let Some(path) = rec.artifacts.get("attack_heatmap").map(|r| found.dir.join(r)) {
            if path.exists() {
                let dst = out.join(format!("{stem}_attack.png"));
                std::fs::copy(&path, &dst)?;
                bundle.attack_heatmaps.push(dst);
            }
        }
    }
    let rows: Vec<AblationRow> = records.iter().map(|f| AblationRow::from_record(&f.record)).collect();
    bundle.table_csv = out.join("table.csv");
    bundle.table_txt = out.join("table.txt");
    write_table_csv(&rows, &bundle.table_csv)?;
    std::fs::write(&bundle.table_txt, table_text(&rows))?;
    Ok(bundle)
}

fn sanitize(s: &str) -> String {
    s.chars()
        .map(|c| if c.is_ascii_alphanumeric() || c == '-' { c } else { '_' })
        .collect()
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::expcli::config::ExperimentConfig;
    use crate::metrics::{waviness, Profile1D};

    #[test]
    fn empty_root_reports_no_records() {
        let tmp = tempfile::tempdir().unwrap();
        let recs = collect_records(tmp.path()).unwrap();
        let err = render_report(&recs, &tmp.path().join("out")).unwrap_err();
        assert!(err.to_string().contains("no records found"));
    }

    #[test]
    fn sine_plot_marks_every_turning_point() {
        let values: Vec<f64> = (0..128)
            .map(|i| (2.0 * std::f64::consts::PI * 4.0 * i as f64 / 128.0).sin())
            .collect();
        let report = waviness(&Profile1D::new(values.clone(), "sine"), 0.1).unwrap();
        assert!(report.extrema.len() >= 7);
        let tmp = tempfile::tempdir().unwrap();
        let path = tmp.path().join("p.png");
        write_profile_plot(&values, &report, &path).unwrap();
        assert!(image::open(&path).is_ok());
    }

    #[test]
    fn records_without_artifacts_still_tabulate() {
        let tmp = tempfile::tempdir().unwrap();
        let run = tmp.path().join("a");
        std::fs::create_dir_all(&run).unwrap();
        let mut rec = ExperimentRecord::new("a", ExperimentConfig::default());
        rec.metrics.acc_space = Some(0.5);
        rec.artifacts.insert("ratemaps".into(), "gone.npy".into());
        rec.save(&run.join(RECORD_FILE)).unwrap();
        let recs = collect_records(tmp.path()).unwrap();
        assert_eq!(recs.len(), 1);
        let b = render_report(&recs, &tmp.path().join("out")).unwrap();
        assert_eq!(b.missing, [run.join("gone.npy")]);
        assert!(std::fs::read_to_string(b.table_txt).unwrap().contains("0.5000"));
    }
}
