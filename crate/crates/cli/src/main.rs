//! `disgenib`: data generation, training, evaluation, probes and self-checks.

use std::fs::{self, OpenOptions};
use std::io::Write;
use std::path::{Path, PathBuf};
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand};
use serde_json::Value;

use disgenib::checkpoint::{checkpoint_read, checkpoint_write};
use disgenib::config::RunConfig;
use disgenib::data::{csv_import, dataset_read, dataset_write, synth_make, Dataset};
use disgenib::fsl::{episodes_csv, eval_episodes, probe_disentanglement, EvalConfig};
use disgenib::model::DisGenModel;
use disgenib::selfcheck::{run_selfcheck, Mutation};
use disgenib::train::{trace_line, Trainer};
use disgenib::Error;

#[derive(Parser)]
#[command(
    name = "disgenib",
    version,
    about = "Disentangled generative information bottleneck for few-shot learning"
)]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Args)]
struct ConfigArgs {
    /// JSON run configuration; defaults apply to every missing key.
    #[arg(long)]
    config: Option<PathBuf>,
    /// Override a configuration key, e.g. `--set objective.alpha=2.0`.
    #[arg(long = "set", value_name = "KEY=VALUE")]
    overrides: Vec<String>,
}

#[derive(Subcommand)]
enum Command {
    /// Write a synthetic dataset, or convert CSV files, to DGIBDS01.
    GenData {
        #[command(flatten)]
        cfg: ConfigArgs,
        /// Output file; defaults to `<output_dir>/data.dgib`.
        #[arg(long)]
        out: Option<PathBuf>,
        /// Import features from this CSV instead of sampling the fixture.
        #[arg(long)]
        features_csv: Option<PathBuf>,
        /// Label column of `--features-csv`.
        #[arg(long, default_value = "label")]
        label_column: String,
        /// Per-class attribute CSV keyed by the same label column.
        #[arg(long)]
        attributes_csv: Option<PathBuf>,
    },
    /// Train on the base classes of a dataset.
    Train {
        #[command(flatten)]
        cfg: ConfigArgs,
        #[arg(long)]
        data: PathBuf,
        /// Output directory; defaults to `output_dir` from the config.
        #[arg(long)]
        out_dir: Option<PathBuf>,
        /// Continue from this checkpoint up to `train.epochs`.
        #[arg(long)]
        resume: Option<PathBuf>,
    },
    /// Episodic few-shot evaluation on the novel classes.
    Eval {
        #[command(flatten)]
        cfg: ConfigArgs,
        #[arg(long)]
        checkpoint: PathBuf,
        #[arg(long)]
        data: PathBuf,
        #[arg(long)]
        out_dir: Option<PathBuf>,
        /// Support-only prototypes, no generated samples.
        #[arg(long)]
        baseline: bool,
        /// `WAYxSHOT` pairs to run; defaults to the configured way and shot.
        #[arg(long = "pair", value_name = "NxK")]
        pairs: Vec<String>,
    },
    /// Linear disentanglement probes on the base classes.
    Probe {
        #[command(flatten)]
        cfg: ConfigArgs,
        #[arg(long)]
        checkpoint: PathBuf,
        #[arg(long)]
        data: PathBuf,
        /// Output JSON; defaults to `<output_dir>/probe.json`.
        #[arg(long)]
        out: Option<PathBuf>,
    },
    /// Run the built-in verification suites.
    Selfcheck {
        /// Inject a known defect; the affected suite must fail.
        #[arg(long, value_parser = ["vclub-sign"])]
        mutate: Option<String>,
        /// Also write the suite reports as JSON.
        #[arg(long)]
        out: Option<PathBuf>,
    },
}

enum Failure {
    Core(Error),
    Selfcheck,
}

impl From<Error> for Failure {
    fn from(e: Error) -> Self {
        Failure::Core(e)
    }
}

impl From<std::io::Error> for Failure {
    fn from(e: std::io::Error) -> Self {
        Failure::Core(Error::Io(e))
    }
}

type CmdResult = std::result::Result<(), Failure>;

fn exit_code(e: &Error) -> u8 {
    match e {
        Error::Config(_) | Error::Contract(_) | Error::Shape { .. } => 2,
        Error::Io(_) | Error::Format { .. } | Error::Parse { .. } | Error::Json(_) => 3,
        Error::NonFinite { .. } => 4,
    }
}

fn load_config(args: &ConfigArgs, fallback: Option<&Value>) -> Result<RunConfig, Error> {
    match (&args.config, fallback) {
        (None, Some(doc)) => RunConfig::from_value(doc.clone(), &args.overrides),
        (path, _) => RunConfig::load(path.as_deref(), &args.overrides),
    }
}

fn ensure_parent(path: &Path) -> Result<(), Error> {
    if let Some(dir) = path.parent().filter(|d| !d.as_os_str().is_empty()) {
        fs::create_dir_all(dir)?;
    }
    Ok(())
}

fn write_json(path: &Path, value: &Value) -> Result<(), Error> {
    ensure_parent(path)?;
    let mut text = serde_json::to_string_pretty(value)?;
    text.push('\n');
    fs::write(path, text)?;
    Ok(())
}

fn with_run_config(value: Value, cfg: &RunConfig) -> Value {
    match value {
        Value::Object(mut map) => {
            map.insert("run_config".into(), cfg.to_value());
            Value::Object(map)
        }
        other => other,
    }
}

fn cmd_gen_data(
    cfg: &ConfigArgs,
    out: Option<PathBuf>,
    features_csv: Option<PathBuf>,
    label_column: &str,
    attributes_csv: Option<PathBuf>,
) -> CmdResult {
    let run = load_config(cfg, None)?.resolved()?;
    let out = out.unwrap_or_else(|| Path::new(&run.output_dir).join("data.dgib"));
    let ds = match features_csv {
        Some(f) => csv_import(&f, label_column, attributes_csv.as_deref())?,
        None => synth_make(&run.data.synth(), run.seed)?.0,
    };
    ensure_parent(&out)?;
    dataset_write(&ds, &out)?;
    let mut sidecar = out.clone().into_os_string();
    sidecar.push(".json");
    write_json(
        Path::new(&sidecar),
        &serde_json::json!({ "run_config": run.to_value() }),
    )?;
    println!(
        "wrote {}: C={} n={} d_X={} d_A={} d_Z={}",
        out.display(),
        ds.classes(),
        ds.len(),
        ds.d_x(),
        ds.d_a(),
        ds.d_z()
    );
    Ok(())
}

fn split_data(run: &RunConfig, path: &Path) -> Result<(Dataset, Dataset), Error> {
    let ds = dataset_read(path)?;
    run.split(&ds)
}

fn cmd_train(cfg: &ConfigArgs, data: &Path, out_dir: Option<PathBuf>, resume: Option<PathBuf>) -> CmdResult {
    let (mut trainer, run, base) = match &resume {
        Some(ck) => {
            let (mut tr, echoed) = checkpoint_read(ck)?;
            let run = load_config(cfg, Some(&echoed))?.resolved()?;
            tr.config.epochs = run.train.epochs;
            tr.config.save_every = run.train.save_every;
            let (base, _) = split_data(&run, data)?;
            (tr, run, base)
        }
        None => {
            let run = load_config(cfg, None)?.resolved()?;
            let (base, _) = split_data(&run, data)?;
            let model = DisGenModel::init(run.model_dims(&base), run.model.sigma_rec, run.seed)?;
            let priors = if run.objective.mode.needs_prior() {
                run.priors(&base)?
            } else {
                None
            };
            let tr = Trainer::new(model, &run.objective, run.train.clone(), priors, run.seed)?;
            (tr, run, base)
        }
    };
    let out_dir = out_dir.unwrap_or_else(|| PathBuf::from(&run.output_dir));
    fs::create_dir_all(&out_dir)?;
    let echoed = run.to_value();
    let mut trace = OpenOptions::new()
        .create(true)
        .write(true)
        .append(resume.is_some())
        .truncate(resume.is_none())
        .open(out_dir.join("trace.jsonl"))?;
    let mut last = None;
    while trainer.epoch < trainer.config.epochs {
        let rec = trainer.run_epoch(&base)?;
        writeln!(trace, "{}", trace_line(&rec, &echoed)?)?;
        let every = trainer.config.save_every;
        if every > 0 && rec.epoch % every == 0 {
            checkpoint_write(
                &trainer,
                &echoed,
                &out_dir.join(format!("checkpoint-e{:04}.dgib", rec.epoch)),
            )?;
        }
        last = Some(rec);
    }
    checkpoint_write(&trainer, &echoed, &out_dir.join("checkpoint.dgib"))?;
    match last {
        Some(rec) => println!(
            "epoch {} {}",
            rec.epoch,
            serde_json::to_string(&rec.loss).map_err(Error::from)?
        ),
        None => println!("epoch {} (nothing to run)", trainer.epoch),
    }
    Ok(())
}

fn parse_pair(s: &str) -> Result<(usize, usize), Error> {
    let bad = || Error::Config(format!("--pair expects WAYxSHOT, got {s:?}"));
    let (n, k) = s.split_once(['x', 'X']).ok_or_else(bad)?;
    Ok((
        n.trim().parse().map_err(|_| bad())?,
        k.trim().parse().map_err(|_| bad())?,
    ))
}

fn check_dims(model: &DisGenModel, ds: &Dataset) -> Result<(), Error> {
    if model.dims.d_x != ds.d_x() {
        return Err(Error::Config(format!(
            "checkpoint expects [n, {}] features, dataset has [{}, {}]",
            model.dims.d_x,
            ds.len(),
            ds.d_x()
        )));
    }
    Ok(())
}

fn cmd_eval(
    cfg: &ConfigArgs,
    checkpoint: &Path,
    data: &Path,
    out_dir: Option<PathBuf>,
    baseline: bool,
    pairs: &[String],
) -> CmdResult {
    let (trainer, echoed) = checkpoint_read(checkpoint)?;
    let mut run = load_config(cfg, Some(&echoed))?.resolved()?;
    if baseline {
        run.eval.baseline = true;
    }
    let ds = dataset_read(data)?;
    check_dims(&trainer.model, &ds)?;
    let (base, novel) = run.split(&ds)?;
    let priors = if run.eval.use_prior { run.priors(&novel)? } else { None };
    let pairs: Vec<(usize, usize)> = if pairs.is_empty() {
        vec![(run.eval.way, run.eval.shot)]
    } else {
        pairs.iter().map(|p| parse_pair(p)).collect::<Result<_, _>>()?
    };
    let out_dir = out_dir.unwrap_or_else(|| PathBuf::from(&run.output_dir));
    fs::create_dir_all(&out_dir)?;
    for (way, shot) in pairs {
        let ecfg = EvalConfig {
            way,
            shot,
            ..run.eval.clone()
        };
        let report = eval_episodes(&trainer.model, &novel, Some(&base), priors.as_ref(), &ecfg, run.seed)?;
        let stem = format!("eval-{}-{way}way-{shot}shot", report.mode);
        let value = with_run_config(serde_json::to_value(&report).map_err(Error::from)?, &run);
        write_json(&out_dir.join(format!("{stem}.json")), &value)?;
        fs::write(out_dir.join(format!("{stem}.csv")), episodes_csv(&report))?;
        println!(
            "{} {way}-way {shot}-shot: {:.2} +- {:.2} over {} episodes (support-only {:.2})",
            report.mode,
            100.0 * report.mean_accuracy,
            100.0 * report.ci95,
            report.episodes,
            100.0 * report.mean_support_accuracy
        );
    }
    Ok(())
}

fn cmd_probe(cfg: &ConfigArgs, checkpoint: &Path, data: &Path, out: Option<PathBuf>) -> CmdResult {
    let (trainer, echoed) = checkpoint_read(checkpoint)?;
    let run = load_config(cfg, Some(&echoed))?.resolved()?;
    let ds = dataset_read(data)?;
    check_dims(&trainer.model, &ds)?;
    let (base, _) = run.split(&ds)?;
    if base.truth_a.is_none() && base.truth_z.is_none() {
        eprintln!("warning: dataset has no ground-truth factors; proto_cosine omitted");
    }
    let report = probe_disentanglement(&trainer.model, &base, run.seed)?;
    let out = out.unwrap_or_else(|| Path::new(&run.output_dir).join("probe.json"));
    let value = with_run_config(serde_json::to_value(&report).map_err(Error::from)?, &run);
    write_json(&out, &value)?;
    println!(
        "acc_from_a {:.4} acc_from_z {:.4} chance {:.4}",
        report.acc_from_a, report.acc_from_z, report.chance
    );
    Ok(())
}

fn cmd_selfcheck(mutate: Option<String>, out: Option<PathBuf>) -> CmdResult {
    let mutation = mutate.map(|_| Mutation::VclubNegativeSign);
    let reports = run_selfcheck(mutation)?;
    let mut ok = true;
    for r in &reports {
        println!(
            "{} {:<16} cases={:<3} worst={:.3e} ({:.1}s)",
            if r.passed { "PASS" } else { "FAIL" },
            r.name,
            r.cases,
            r.worst,
            r.seconds
        );
        if let Some(case) = &r.failing_case {
            println!("     failing case: {case}");
        }
        ok &= r.passed;
    }
    if let Some(path) = out {
        write_json(&path, &serde_json::to_value(&reports).map_err(Error::from)?)?;
    }
    if ok {
        Ok(())
    } else {
        Err(Failure::Selfcheck)
    }
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    let result = match cli.command {
        Command::GenData {
            cfg,
            out,
            features_csv,
            label_column,
            attributes_csv,
        } => cmd_gen_data(&cfg, out, features_csv, &label_column, attributes_csv),
        Command::Train {
            cfg,
            data,
            out_dir,
            resume,
        } => cmd_train(&cfg, &data, out_dir, resume),
        Command::Eval {
            cfg,
            checkpoint,
            data,
            out_dir,
            baseline,
            pairs,
        } => cmd_eval(&cfg, &checkpoint, &data, out_dir, baseline, &pairs),
        Command::Probe {
            cfg,
            checkpoint,
            data,
            out,
        } => cmd_probe(&cfg, &checkpoint, &data, out),
        Command::Selfcheck { mutate, out } => cmd_selfcheck(mutate, out),
    };
    match result {
        Ok(()) => ExitCode::SUCCESS,
        Err(Failure::Selfcheck) => {
            eprintln!("error: self-check failed");
            ExitCode::from(1)
        }
        Err(Failure::Core(e)) => {
            eprintln!("error: {e}");
            ExitCode::from(exit_code(&e))
        }
    }
}
