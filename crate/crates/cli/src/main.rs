use std::path::PathBuf;
use std::process::ExitCode;

use bnneck::eval::io::reports_csv;
use bnneck::experiment::{
    run_ablate, run_eval, run_export_scatter, run_sweep_beta, run_train, Manifest, ABLATION_HEADER,
    SWEEP_HEADER,
};
use bnneck::Error;
use clap::{Args, Parser, Subcommand};

/// Train and evaluate BNNeck-style metric-learning models.
#[derive(Parser)]
#[command(name = "bnneck", version)]
struct Cli {
    #[command(subcommand)]
    verb: Verb,
}

#[derive(Subcommand)]
enum Verb {
    /// Train a model; writes a checkpoint and the loss log.
    Train(Common),
    /// Evaluate a checkpoint on the manifest's query and gallery.
    Eval {
        #[command(flatten)]
        common: Common,
        /// Checkpoint to evaluate instead of the run's own.
        #[arg(long)]
        checkpoint: Option<PathBuf>,
    },
    /// Retrain across center-loss weights and tabulate rank-1, mAP and R.
    SweepBeta {
        #[command(flatten)]
        common: Common,
        /// Comma-separated weights, overriding `sweep.betas`.
        #[arg(long)]
        betas: Option<String>,
    },
    /// Retrain across trick presets or neck variants.
    Ablate {
        #[command(flatten)]
        common: Common,
        /// `tricks` or `necks`, overriding `ablate.kind`.
        #[arg(long)]
        kind: Option<String>,
    },
    /// Write 2-d embeddings of query and gallery as x,y,label rows.
    ExportScatter {
        #[command(flatten)]
        common: Common,
        #[arg(long)]
        checkpoint: Option<PathBuf>,
    },
}

#[derive(Args)]
struct Common {
    /// Manifest file of `key = value` lines.
    #[arg(long, short)]
    manifest: Option<PathBuf>,
    /// Named preset applied before the manifest's own keys.
    #[arg(long)]
    preset: Option<String>,
    /// Override one manifest key, e.g. `--set loss.beta=0.005`.
    #[arg(long = "set", value_name = "KEY=VALUE", value_parser = parse_override)]
    overrides: Vec<(String, String)>,
}

fn parse_override(s: &str) -> Result<(String, String), String> {
    let (k, v) = s
        .split_once('=')
        .ok_or_else(|| format!("expected KEY=VALUE, got `{s}`"))?;
    Ok((k.trim().to_string(), v.trim().to_string()))
}

impl Common {
    fn manifest(&self, extra: &[(&str, Option<&String>)]) -> bnneck::Result<Manifest> {
        let mut overrides = Vec::new();
        if let Some(p) = &self.preset {
            overrides.push(("preset".to_string(), p.clone()));
        }
        overrides.extend(self.overrides.iter().cloned());
        for (k, v) in extra {
            if let Some(v) = v {
                overrides.push((k.to_string(), (*v).clone()));
            }
        }
        match &self.manifest {
            Some(path) => Manifest::load(path, &overrides),
            None => Manifest::from_pairs(&overrides),
        }
    }
}

fn exit_code(e: &Error) -> u8 {
    match e {
        Error::Config { .. } => 2,
        Error::Data(_) | Error::Idx(_) | Error::Format { .. } => 3,
        Error::Divergence { .. } => 4,
        _ => 1,
    }
}

fn run(cli: Cli) -> bnneck::Result<()> {
    match cli.verb {
        Verb::Train(common) => {
            let m = common.manifest(&[])?;
            let out = run_train(&m)?;
            if let Some(last) = out.log.records.last() {
                println!(
                    "iterations {} final L_ID {} L_Tri {} L_C {} total {}",
                    last.iteration,
                    last.losses.id,
                    last.losses.triplet,
                    last.losses.center,
                    last.losses.total
                );
            }
            println!("run directory {}", m.run_dir().display());
        }
        Verb::Eval { common, checkpoint } => {
            let m = common.manifest(&[])?;
            let reports = run_eval(&m, checkpoint.as_deref())?;
            print!("{}", reports_csv(&reports, Some(&m.hash())));
        }
        Verb::SweepBeta { common, betas } => {
            let m = common.manifest(&[("sweep.betas", betas.as_ref())])?;
            let rows = run_sweep_beta(&m)?;
            println!("{SWEEP_HEADER}");
            for r in rows {
                println!(
                    "{},{},{},{:.4},{:.4},{:.4}",
                    r.beta, r.feature, r.seeds, r.rank1, r.map, r.r
                );
            }
        }
        Verb::Ablate { common, kind } => {
            let m = common.manifest(&[("ablate.kind", kind.as_ref())])?;
            let (rows, _) = run_ablate(&m)?;
            println!("{ABLATION_HEADER}");
            let opt = |v: Option<f64>| v.map_or(String::new(), |x| format!("{x:.4}"));
            for r in rows {
                println!(
                    "{},{},{},{},{:.4},{:.4},{},{}",
                    r.condition,
                    r.feature,
                    r.metric,
                    r.seeds,
                    r.rank1,
                    r.map,
                    opt(r.r),
                    opt(r.norm_cv)
                );
            }
        }
        Verb::ExportScatter { common, checkpoint } => {
            let m = common.manifest(&[])?;
            let path = run_export_scatter(&m, checkpoint.as_deref())?;
            println!("{}", path.display());
        }
    }
    Ok(())
}

fn main() -> ExitCode {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("info")).init();
    let cli = Cli::parse();
    match run(cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::from(exit_code(&e))
        }
    }
}
