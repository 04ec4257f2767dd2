//! `lftracy` command-line harness.

use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand};
use lftracy::config::{Mode, Preset, RunConfig};
use lftracy::train::{self, HISTOGRAM_FILE, TRACE_FILE};
use lftracy::{Error, Result};

#[derive(Parser)]
#[command(name = "lftracy", version, about = "Light-field salient object detection harness")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Args, Clone)]
struct Common {
    /// JSON run configuration; omitted fields take their defaults.
    #[arg(long)]
    config: Option<PathBuf>,
    /// Ablation preset applied after the config file.
    #[arg(long)]
    preset: Option<String>,
    /// Dotted override such as `ia.fusion=ADD`; applied last, in order.
    #[arg(long = "set", value_name = "KEY=VALUE")]
    overrides: Vec<String>,
}

#[derive(Subcommand)]
enum Command {
    /// Write synthetic scenes under `dataset_root`.
    GenData(Common),
    /// Apply MixLD and geometric augmentation to every scene.
    Augment {
        #[command(flatten)]
        common: Common,
        /// Also write pixel and difference histograms.
        #[arg(long)]
        histograms: bool,
    },
    /// Train a model and write logs and checkpoints to `output_dir`.
    Train(Common),
    /// Score a checkpoint on `dataset_root`.
    Eval(Common),
    /// Finite-difference check of every parameter group.
    Gradcheck(Common),
    /// Write predicted masks for every scene.
    Predict(Common),
}

fn resolve(common: &Common) -> Result<RunConfig> {
    let mut cfg = match &common.config {
        Some(path) => RunConfig::load(path)?,
        None => RunConfig::default(),
    };
    if let Some(name) = &common.preset {
        cfg.apply_preset(name.parse::<Preset>()?);
    }
    for o in &common.overrides {
        cfg.apply_override(o)?;
    }
    Ok(cfg)
}

fn run(cli: Cli) -> Result<ExitCode> {
    match cli.command {
        Command::GenData(c) => {
            let cfg = resolve(&c)?;
            cfg.validate(Mode::GenData)?;
            let dirs = train::run_gen_data(&cfg)?;
            println!("wrote {} scenes to {}", dirs.len(), cfg.dataset_root.display());
        }
        Command::Augment { common, histograms } => {
            let cfg = resolve(&common)?;
            let out = train::run_augment(&cfg, histograms)?;
            let fired = |f: fn(&lftracy::mixld::MixTrace) -> bool| out.scenes.iter().filter(|s| f(&s.trace)).count();
            println!(
                "augmented {} scenes (fs2af fired {}, af2fs fired {}); trace in {}",
                out.scenes.len(),
                fired(|t| t.fs2af_fired),
                fired(|t| t.af2fs_fired),
                cfg.output_dir.join(TRACE_FILE).display()
            );
            if histograms {
                println!("histograms in {}", cfg.output_dir.join(HISTOGRAM_FILE).display());
            }
        }
        Command::Train(c) => {
            let cfg = resolve(&c)?;
            let out = train::run_train(&cfg)?;
            for s in &out.steps {
                println!("epoch {} step {} loss {:.6}", s.epoch, s.step, s.loss.total);
            }
            for (epoch, m) in &out.holdout_mae {
                println!("epoch {epoch} held-out MAE {m:.6}");
            }
            println!("checkpoint {}", cfg.output_dir.join(train::FINAL_CHECKPOINT).display());
        }
        Command::Eval(c) => {
            let cfg = resolve(&c)?;
            let agg = train::run_eval(&cfg)?;
            println!(
                "scenes {} mae {:.6} f_mean {:.6} e_mean {:.6} s_measure {:.6}",
                agg.n_scenes, agg.mae, agg.f_mean, agg.e_mean, agg.s_measure
            );
        }
        Command::Gradcheck(c) => {
            let cfg = resolve(&c)?;
            let summary = train::gradcheck(&cfg, None)?;
            for g in &summary.groups {
                println!(
                    "{:<10} {} max_rel_err {:.3e} ({} entries, worst {}[{}])",
                    g.group,
                    if g.passed { "PASS" } else { "FAIL" },
                    g.max_rel_err,
                    g.entries,
                    g.worst_param,
                    g.worst_index
                );
            }
            if !summary.passed() {
                let w = summary.worst().expect("groups are non-empty");
                eprintln!(
                    "gradient check failed: group {} parameter {} relative error {:.3e} > {:.1e}",
                    w.group, w.worst_param, w.max_rel_err, summary.tol
                );
                return Ok(ExitCode::from(1));
            }
        }
        Command::Predict(c) => {
            let cfg = resolve(&c)?;
            let paths = train::run_predict(&cfg)?;
            println!("wrote {} masks to {}", paths.len(), cfg.output_dir.join("masks").display());
        }
    }
    Ok(ExitCode::SUCCESS)
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    match run(cli) {
        Ok(code) => code,
        Err(e) => {
            eprintln!("error: {e}");
            exit_code(&e)
        }
    }
}

fn exit_code(e: &Error) -> ExitCode {
    ExitCode::from(e.exit_code() as u8)
}
