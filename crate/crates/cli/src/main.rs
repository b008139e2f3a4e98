use std::fs;
use std::path::{Path, PathBuf};
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand};

use gcvase::checkpoint::Checkpoint;
use gcvase::config::RunConfig;
use gcvase::dataset::{read_csv_epochs, read_dataset, write_dataset, Dataset};
use gcvase::model::ModelConfig;
use gcvase::probe::{evaluate_latents, latents_to_csv, paradigm_breakdown};
use gcvase::synthdata::generate;
use gcvase::train::{
    ablation_configs, adjacency_for, compare_finetune, finetune_adapter, gradcheck_objective,
    latent_table, run_seeds, split_plans, train, AblationTable, SeedReport,
};
use gcvase::{Error, Result};

const GRADCHECK_TOL: f64 = 1e-4;

#[derive(Parser)]
#[command(name = "gcvase", version, about = "Split-latent graph VAE for EEG subject representations")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Args)]
struct ConfigArgs {
    /// Config file (`key = value` with [model] [loss] [train] [data] [graph]).
    #[arg(long, short)]
    config: Option<PathBuf>,
    /// Start from the full-size defaults instead of the desk-scale ones.
    #[arg(long)]
    full: bool,
    /// Override one key, e.g. `--set train.epochs=5`. Repeatable.
    #[arg(long = "set", value_name = "SECTION.KEY=VALUE")]
    overrides: Vec<String>,
}

impl ConfigArgs {
    fn resolve(&self) -> Result<RunConfig> {
        let mut cfg = if self.full { RunConfig::default() } else { RunConfig::desk() };
        if let Some(path) = &self.config {
            let text = fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
            cfg.apply_text(&text)?;
        }
        for o in &self.overrides {
            cfg.set_override(o)?;
        }
        cfg.validate()?;
        Ok(cfg)
    }
}

#[derive(Subcommand)]
enum Command {
    /// Generate a synthetic dataset.
    Synth {
        #[command(flatten)]
        cfg: ConfigArgs,
        #[arg(long, short)]
        out: PathBuf,
    },
    /// Pack CSV epochs listed in a manifest into a dataset file.
    Preprocess {
        /// Manifest CSV with columns file,subject,task,paradigm.
        #[arg(long)]
        manifest: PathBuf,
        #[arg(long, short)]
        out: PathBuf,
    },
    /// Train one model per seed (and per fold) and evaluate it.
    Train {
        #[command(flatten)]
        cfg: ConfigArgs,
        #[arg(long, short)]
        data: PathBuf,
        #[arg(long, short)]
        out: PathBuf,
        /// Use k-fold splits instead of the configured protocol.
        #[arg(long)]
        folds: Option<usize>,
    },
    /// Fine-tune an adapter on the test subjects of a trained checkpoint.
    Finetune {
        #[arg(long)]
        checkpoint: PathBuf,
        #[arg(long, short)]
        data: PathBuf,
        #[arg(long, short)]
        out: PathBuf,
        #[arg(long)]
        seed: Option<u64>,
        /// Override fine-tuning keys, e.g. `--set train.finetune_epochs=5`.
        #[arg(long = "set", value_name = "SECTION.KEY=VALUE")]
        overrides: Vec<String>,
    },
    /// Probe a checkpoint: four (latent, target) blocks and the paradigm table.
    Eval {
        #[arg(long)]
        checkpoint: PathBuf,
        #[arg(long, short)]
        data: PathBuf,
        #[arg(long, short)]
        out: Option<PathBuf>,
    },
    /// Run the ablation grid over the configured seeds.
    Ablate {
        #[command(flatten)]
        cfg: ConfigArgs,
        #[arg(long, short)]
        data: PathBuf,
        #[arg(long, short)]
        out: PathBuf,
    },
    /// Write posterior-mean latents of every epoch as CSV.
    ExportLatents {
        #[arg(long)]
        checkpoint: PathBuf,
        #[arg(long, short)]
        data: PathBuf,
        #[arg(long, short)]
        out: PathBuf,
    },
    /// Finite-difference check of the full objective on the toy network.
    Gradcheck {
        #[arg(long, default_value_t = 1e-6)]
        eps: f64,
        #[arg(long, default_value_t = 0)]
        seed: u64,
    },
}

fn write(path: &Path, text: &str) -> Result<()> {
    if let Some(dir) = path.parent().filter(|d| !d.as_os_str().is_empty()) {
        fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
    }
    fs::write(path, text).map_err(|e| Error::io(path, e))
}

fn mkdir(dir: &Path) -> Result<()> {
    fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))
}

/// Config stored next to a file output: `data.gcvz` -> `data.gcvz.config`.
fn sidecar(path: &Path) -> PathBuf {
    let mut s = path.as_os_str().to_owned();
    s.push(".config");
    PathBuf::from(s)
}

fn load_for(cfg: &RunConfig, data: &Path) -> Result<Dataset> {
    let ds = read_dataset(data)?;
    if ds.channels != cfg.model.n_channels || ds.samples != cfg.model.n_samples {
        return Err(Error::invalid(format!(
            "{}: epochs are {}x{}, config expects {}x{}",
            data.display(),
            ds.channels,
            ds.samples,
            cfg.model.n_channels,
            cfg.model.n_samples
        )));
    }
    Ok(ds)
}

fn run(cli: Cli) -> Result<()> {
    match cli.command {
        Command::Synth { cfg, out } => {
            let cfg = cfg.resolve()?;
            let (ds, truth) = generate(&cfg.data.synth)?;
            write_dataset(&out, &ds)?;
            write(&sidecar(&out), &cfg.to_text())?;
            println!(
                "wrote {} epochs ({} subjects, {} tasks, alpha {:.2}-{:.2} Hz) to {}",
                ds.len(),
                ds.n_subjects,
                ds.n_tasks,
                truth.alpha_hz.iter().cloned().fold(f64::INFINITY, f64::min),
                truth.alpha_hz.iter().cloned().fold(0.0, f64::max),
                out.display()
            );
        }
        Command::Preprocess { manifest, out } => {
            let ds = read_csv_epochs(&manifest)?;
            write_dataset(&out, &ds)?;
            println!(
                "wrote {} epochs of {}x{} to {}",
                ds.len(),
                ds.channels,
                ds.samples,
                out.display()
            );
        }
        Command::Train { cfg, data, out, folds } => {
            let mut cfg = cfg.resolve()?;
            if let Some(k) = folds {
                cfg.data.split = gcvase::config::SplitKind::KFold;
                cfg.data.folds = k;
                cfg.validate()?;
            }
            let ds = load_for(&cfg, &data)?;
            mkdir(&out)?;
            write(&out.join("config.txt"), &cfg.to_text())?;
            let plans = split_plans(&ds, &cfg.data)?;
            let ahat = adjacency_for(&cfg)?;
            let mut report = SeedReport::default();
            for plan in &plans {
                let dir = match plan.fold {
                    Some(f) => out.join(format!("fold{f}")),
                    None => out.clone(),
                };
                write(&dir.join("split.csv"), &plan.to_csv())?;
                for &seed in &cfg.train.seeds {
                    let run_dir = dir.join(format!("seed{seed}"));
                    mkdir(&run_dir)?;
                    let outcome = match train(&ds, plan, &cfg, seed) {
                        Ok(o) => o,
                        Err(e) => {
                            report.failures.push((seed, e.to_string()));
                            continue;
                        }
                    };
                    write(&run_dir.join("history.csv"), &outcome.history.to_csv())?;
                    write(&run_dir.join("dev.csv"), &outcome.history.dev_csv())?;
                    outcome.final_checkpoint.save(&run_dir.join("final.gcvc"))?;
                    outcome.best_checkpoint.save(&run_dir.join("checkpoint.gcvc"))?;
                    if let Some(msg) = outcome.diverged {
                        write(&run_dir.join("INCOMPLETE"), &format!("{msg}\n"))?;
                        report.failures.push((seed, msg));
                        continue;
                    }
                    let table = latent_table(&outcome.best_checkpoint.model, &ahat, &ds)?;
                    let eval = evaluate_latents(&table, &ds, plan, &cfg.train.probe)?;
                    write(&run_dir.join("metrics.csv"), &eval.to_text())?;
                    println!(
                        "{}seed {seed}: {:.1}s, best epoch {:?}",
                        plan.fold.map_or(String::new(), |f| format!("fold {f} ")),
                        outcome.wall_clock_secs,
                        outcome.best_epoch.map(|e| e + 1)
                    );
                    report.runs.push((seed, eval));
                }
            }
            let text = report.to_text();
            write(&out.join("metrics.txt"), &text)?;
            print!("{text}");
            if !report.is_complete() {
                return Err(Error::Diverged {
                    step: 0,
                    message: format!("{} run(s) failed; report marked INCOMPLETE", report.failures.len()),
                });
            }
        }
        Command::Finetune {
            checkpoint,
            data,
            out,
            seed,
            overrides,
        } => {
            let mut base = Checkpoint::load(&checkpoint)?;
            for o in &overrides {
                base.config.set_override(o)?;
            }
            base.config.validate()?;
            let cfg = base.config.clone();
            let ds = load_for(&cfg, &data)?;
            let plans = split_plans(&ds, &cfg.data)?;
            let plan = &plans[0];
            let seed = seed.unwrap_or(base.seed);
            let ft = finetune_adapter(&base, &ds, &plan.test, seed)?;
            mkdir(&out)?;
            ft.checkpoint.save(&out.join("finetuned.gcvc"))?;
            write(&out.join("history.csv"), &ft.history.to_csv())?;
            let cmp = compare_finetune(&base, &ft, &ds, plan)?;
            let text = format!(
                "metric,probe_refit_only,finetuned\n\
                 subject_balanced_accuracy,{:.4},{:.4}\n\
                 subject_closed_set_accuracy,{:.4},{:.4}\n\
                 subject_macro_f1,{:.4},{:.4}\n",
                cmp.baseline.balanced_accuracy,
                cmp.finetuned.balanced_accuracy,
                cmp.baseline.closed_set_accuracy,
                cmp.finetuned.closed_set_accuracy,
                cmp.baseline.macro_f1,
                cmp.finetuned.macro_f1,
            );
            write(&out.join("ft_metrics.csv"), &text)?;
            print!("{text}");
            if let Some(msg) = ft.diverged {
                write(&out.join("INCOMPLETE"), &format!("{msg}\n"))?;
                return Err(Error::Diverged { step: 0, message: msg });
            }
        }
        Command::Eval { checkpoint, data, out } => {
            let ck = Checkpoint::load(&checkpoint)?;
            let ds = load_for(&ck.config, &data)?;
            let plans = split_plans(&ds, &ck.config.data)?;
            let plan = &plans[0];
            let ahat = adjacency_for(&ck.config)?;
            let table = latent_table(&ck.model, &ahat, &ds)?;
            let mut text = evaluate_latents(&table, &ds, plan, &ck.config.train.probe)?.to_text();
            text.push('\n');
            text.push_str(&paradigm_breakdown(&table, &ds, plan, &ck.config.train.probe)?.to_text());
            if let Some(out) = out {
                write(&out, &text)?;
            }
            print!("{text}");
        }
        Command::Ablate { cfg, data, out } => {
            let cfg = cfg.resolve()?;
            let ds = load_for(&cfg, &data)?;
            mkdir(&out)?;
            write(&out.join("config.txt"), &cfg.to_text())?;
            let plans = split_plans(&ds, &cfg.data)?;
            let mut table = AblationTable::default();
            for (name, variant) in ablation_configs(&cfg) {
                log::info!("ablation variant {name}");
                let rep = run_seeds(&ds, &plans[0], &variant, &variant.train.seeds)?;
                write(&out.join(format!("{name}.txt")), &rep.to_text())?;
                table.rows.push((name.to_string(), rep));
            }
            let text = table.to_text();
            write(&out.join("ablation.csv"), &text)?;
            print!("{text}");
        }
        Command::ExportLatents { checkpoint, data, out } => {
            let ck = Checkpoint::load(&checkpoint)?;
            let ds = load_for(&ck.config, &data)?;
            let table = latent_table(&ck.model, &adjacency_for(&ck.config)?, &ds)?;
            write(&out, &latents_to_csv(&table, &ds))?;
            println!("wrote {} rows to {}", ds.len(), out.display());
        }
        Command::Gradcheck { eps, seed } => {
            let cfg = RunConfig {
                model: ModelConfig::toy(),
                ..RunConfig::default()
            };
            let rep = gradcheck_objective(&cfg.model, &cfg.loss, &cfg.graph, seed, eps)?;
            for (axis, err) in &rep.axes {
                println!("{axis}-paired step: max relative error {err:.3e}");
            }
            let verdict = if rep.passed(GRADCHECK_TOL) { "PASS" } else { "FAIL" };
            println!(
                "max relative error {:.3e} over {} parameters (tolerance {GRADCHECK_TOL:e}): {verdict}",
                rep.max_relative_error, rep.n_scalars
            );
            if !rep.passed(GRADCHECK_TOL) {
                return Err(Error::invalid("gradient check failed"));
            }
        }
    }
    Ok(())
}

fn main() -> ExitCode {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("warn")).init();
    match run(Cli::parse()) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            let msg = e.to_string().replace('\n', " ");
            eprintln!("error: {}: {msg}", e.code());
            ExitCode::FAILURE
        }
    }
}
