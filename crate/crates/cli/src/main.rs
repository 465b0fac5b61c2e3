use std::path::{Path, PathBuf};

use anyhow::{bail, Context, Result};
use clap::{Args, Parser, Subcommand};
use spacenet_core::expcli::ablation::{table_text, AblationRow};
use spacenet_core::expcli::{
    collect_records, parse_override_args, render_report, run_ablation, Experiment, ExperimentConfig, Factor,
};

/// Train position networks on skeleton proxy labels and analyse their
/// ratemaps.
#[derive(Parser)]
#[command(name = "spacenet", version)]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Args)]
struct RunArgs {
    /// Experiment config (TOML). Ignored when reopening an existing run.
    #[arg(long)]
    config: Option<PathBuf>,
    /// Existing run directory to operate on.
    #[arg(long)]
    run_dir: Option<PathBuf>,
    /// Name of a new run directory under `output_dir`.
    #[arg(long)]
    run_id: Option<String>,
    /// Config overrides such as `--train.lr 0.01` or `--data.regions=8`.
    #[arg(trailing_var_arg = true, allow_hyphen_values = true, value_name = "OVERRIDES")]
    overrides: Vec<String>,
}

#[derive(Subcommand)]
enum Command {
    /// Build the dataset, masks and manifests.
    PrepareData(RunArgs),
    /// Train a model and write checkpoints.
    Train(RunArgs),
    /// Compute Acc_space on both splits.
    Eval(RunArgs),
    /// Export ratemaps of the analysis layer.
    Ratemap(RunArgs),
    /// Ratemaps for single and double slit probes.
    Probe(RunArgs),
    /// Score waviness of the exported ratemaps.
    Waviness(RunArgs),
    /// Grid search over grating perturbations.
    Attack(RunArgs),
    /// Train, evaluate and analyse in one go.
    Run {
        #[command(flatten)]
        run: RunArgs,
        /// Also run the slit probes.
        #[arg(long)]
        probe: bool,
        /// Also run the grating attack.
        #[arg(long)]
        attack: bool,
    },
    /// Sweep factors one at a time around a baseline config.
    Ablate {
        #[arg(long)]
        config: Option<PathBuf>,
        /// Output directory for the sweep.
        #[arg(long)]
        out: PathBuf,
        /// Axis to vary, e.g. `backbone` or `regions=2,8`; repeatable.
        #[arg(long = "factor", required = true)]
        factors: Vec<String>,
        #[arg(long)]
        attack: bool,
        #[arg(trailing_var_arg = true, allow_hyphen_values = true, value_name = "OVERRIDES")]
        overrides: Vec<String>,
    },
    /// Render figures and a table from every run below a directory.
    Report {
        /// Directory searched for run records.
        #[arg(long)]
        runs: PathBuf,
        /// Output directory; defaults to `<runs>/report`.
        #[arg(long)]
        out: Option<PathBuf>,
    },
}

fn load_config(path: Option<&Path>, overrides: &[(String, String)]) -> Result<ExperimentConfig> {
    let base = match path {
        Some(p) => ExperimentConfig::load(p)?,
        None => ExperimentConfig::default(),
    };
    Ok(base.with_overrides(overrides)?)
}

fn experiment(args: &RunArgs) -> Result<Experiment> {
    let overrides = parse_override_args(&args.overrides)?;
    if let Some(dir) = &args.run_dir {
        if dir.join(spacenet_core::expcli::runner::CONFIG_FILE).exists() {
            if args.config.is_some() {
                log::warn!("--config ignored; {} already has a config", dir.display());
            }
            return Ok(Experiment::open(dir, &overrides)?);
        }
        let cfg = load_config(args.config.as_deref(), &overrides)?;
        return Ok(Experiment::at(cfg, dir)?);
    }
    let cfg = load_config(args.config.as_deref(), &overrides)?;
    Ok(Experiment::create(cfg, args.run_id.as_deref())?)
}

fn main() -> Result<()> {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("info")).init();
    let cli = Cli::parse();
    match cli.command {
        Command::PrepareData(a) => stage(&a, Experiment::prepare_data),
        Command::Train(a) => stage(&a, Experiment::train),
        Command::Eval(a) => stage(&a, Experiment::eval),
        Command::Ratemap(a) => stage(&a, Experiment::ratemap),
        Command::Probe(a) => stage(&a, Experiment::probe),
        Command::Waviness(a) => stage(&a, Experiment::waviness),
        Command::Attack(a) => stage(&a, Experiment::attack),
        Command::Run { run, probe, attack } => stage(&run, |e| e.run_pipeline(probe, attack)),
        Command::Ablate {
            config,
            out,
            factors,
            attack,
            overrides,
        } => {
            let base = load_config(config.as_deref(), &parse_override_args(&overrides)?)?;
            let factors = factors
                .iter()
                .map(|f| Factor::parse(f, &base))
                .collect::<Result<Vec<_>, _>>()?;
            let records = run_ablation(&base, &factors, &out, attack)?;
            let rows: Vec<AblationRow> = records.iter().map(AblationRow::from_record).collect();
            print!("{}", table_text(&rows));
            Ok(())
        }
        Command::Report { runs, out } => {
            if !runs.is_dir() {
                bail!("{} is not a directory", runs.display());
            }
            let records = collect_records(&runs)?;
            let out = out.unwrap_or_else(|| runs.join("report"));
            let bundle = render_report(&records, &out)?;
            for m in &bundle.missing {
                log::warn!("missing artifact {}", m.display());
            }
            print!("{}", std::fs::read_to_string(&bundle.table_txt)?);
            println!("report written to {}", out.display());
            Ok(())
        }
    }
}

fn stage(
    args: &RunArgs,
    f: impl FnOnce(&Experiment) -> spacenet_core::Result<spacenet_core::expcli::ExperimentRecord>,
) -> Result<()> {
    let exp = experiment(args)?;
    let rec = f(&exp).with_context(|| format!("run {}", exp.dir.display()))?;
    println!("{}", exp.dir.display());
    println!("{}", summary_lines(&rec));
    Ok(())
}

fn summary_lines(rec: &spacenet_core::expcli::ExperimentRecord) -> String {
    let m = &rec.metrics;
    let fmt = |v: Option<f64>| v.map(|x| format!("{x:.4}")).unwrap_or_else(|| "-".into());
    format!(
        "stages: {}\ntrain_loss {}  train_acc_space {}  acc_space {}  waviness {}",
        rec.stages.join(", "),
        fmt(m.final_train_loss),
        fmt(m.train_acc_space),
        fmt(m.acc_space),
        fmt(m.waviness)
    )
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn dotted_overrides_are_accepted() {
        let cli = Cli::try_parse_from(["spacenet", "train", "--run-id", "x", "--train.lr", "0.5", "--data.regions=8"])
            .unwrap();
        let Command::Train(a) = cli.command else { panic!() };
        assert_eq!(a.run_id.as_deref(), Some("x"));
        assert_eq!(a.overrides, ["--train.lr", "0.5", "--data.regions=8"]);
    }
}
