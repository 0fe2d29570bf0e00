use std::fs;
use std::path::{Path, PathBuf};
use std::process::ExitCode;

use autoclip_core::clipping::{ClipConfig, ClipMode};
use autoclip_core::harness::{
    cell_config, gradcheck, gradcheck_model, results_csv, run_sweep, table_csv, Checkpoint, PLabel, RunConfig,
    SweepCell, Trainer, DEFAULT_P_VALUES,
};
use autoclip_core::losses::LossKind;
use clap::{Args, Parser, Subcommand};

#[derive(Parser)]
#[command(name = "autoclip", version, about = "Percentile-based adaptive gradient clipping experiments")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Train one model and write its dynamics, results and final checkpoint.
    Train {
        #[command(flatten)]
        common: Common,
        /// Clipping setting: a percentile in [0, 100], "static" or "none".
        #[arg(long, value_parser = parse_p)]
        p: Option<PLabel>,
        #[arg(long, value_parser = parse_loss)]
        loss: Option<LossKind>,
        #[arg(long)]
        iterations: Option<usize>,
        /// Continue from a checkpoint written by an earlier run.
        #[arg(long, value_name = "PATH", conflicts_with = "config")]
        resume: Option<PathBuf>,
    },
    /// Train every (p, loss) cell and write a results table.
    Sweep {
        #[command(flatten)]
        common: Common,
        /// Comma-separated clipping settings [default: 0,1,10,25,50,90,100].
        #[arg(long, value_delimiter = ',', value_parser = parse_p)]
        p: Vec<PLabel>,
        /// Comma-separated losses [default: all five].
        #[arg(long, value_delimiter = ',', value_parser = parse_loss)]
        loss: Vec<LossKind>,
        #[arg(long)]
        iterations: Option<usize>,
    },
    /// Compare analytic gradients with finite differences.
    Gradcheck {
        /// Loss to check [default: all five].
        #[arg(long, value_parser = parse_loss)]
        loss: Option<LossKind>,
        #[arg(long, default_value_t = 0)]
        seed: u64,
    },
}

#[derive(Args)]
struct Common {
    /// JSON run configuration; missing fields take their defaults.
    #[arg(long, value_name = "PATH")]
    config: Option<PathBuf>,
    #[arg(long)]
    seed: Option<u64>,
    #[arg(long, value_name = "DIR", default_value = "runs")]
    out: PathBuf,
}

fn parse_p(s: &str) -> Result<PLabel, String> {
    s.parse().map_err(|e: autoclip_core::Error| e.to_string())
}

fn parse_loss(s: &str) -> Result<LossKind, String> {
    s.parse().map_err(|e: autoclip_core::Error| e.to_string())
}

type Res<T> = Result<T, String>;

fn base_config(common: &Common, iterations: Option<usize>) -> Res<RunConfig> {
    let mut cfg = match &common.config {
        Some(path) => RunConfig::load(path).map_err(|e| format!("{}: {e}", path.display()))?,
        None => RunConfig::default(),
    };
    if let Some(seed) = common.seed {
        cfg.seed = seed;
    }
    if let Some(n) = iterations {
        cfg.iterations = n;
    }
    Ok(cfg)
}

fn with_p(mut cfg: RunConfig, p: PLabel) -> Res<RunConfig> {
    cfg.clip = match p {
        PLabel::Percentile(p) => ClipConfig { mode: ClipMode::AutoClip, p, ..cfg.clip },
        PLabel::None => ClipConfig { mode: ClipMode::None, ..cfg.clip },
        PLabel::Static if matches!(cfg.clip.mode, ClipMode::Static { .. }) => cfg.clip,
        PLabel::Static => return Err("--p static needs a static threshold in the config file".into()),
    };
    Ok(cfg)
}

fn write(dir: &Path, name: &str, contents: &str) -> Res<()> {
    let path = dir.join(name);
    fs::write(&path, contents).map_err(|e| format!("{}: {e}", path.display()))
}

fn train(common: Common, p: Option<PLabel>, loss: Option<LossKind>, iterations: Option<usize>, resume: Option<PathBuf>) -> Res<()> {
    let mut trainer = match resume {
        Some(path) => {
            let mut ck = Checkpoint::load(&path).map_err(|e| format!("{}: {e}", path.display()))?;
            if let Some(n) = iterations {
                ck.config.iterations = n;
            }
            if common.seed.is_some() || p.is_some() || loss.is_some() {
                return Err("--seed, --p and --loss cannot change a resumed run".into());
            }
            Trainer::resume(ck).map_err(|e| e.to_string())?
        }
        None => {
            let mut cfg = base_config(&common, iterations)?;
            if let Some(p) = p {
                cfg = with_p(cfg, p)?;
            }
            if let Some(loss) = loss {
                cfg.loss = loss;
            }
            Trainer::new(cfg).map_err(|e| e.to_string())?
        }
    };
    fs::create_dir_all(&common.out).map_err(|e| format!("{}: {e}", common.out.display()))?;
    write(&common.out, "config.json", &trainer.config().to_json())?;
    trainer.run().map_err(|e| e.to_string())?;
    write(&common.out, "checkpoint.json", &trainer.checkpoint().to_json())?;
    let out = trainer.finish().map_err(|e| e.to_string())?;
    write(&common.out, "dynamics.csv", &out.dynamics_csv)?;
    let cell = SweepCell { p: out.row.p, loss: out.row.loss, row: Some(out.row.clone()), error: None };
    write(&common.out, "results.csv", &results_csv(&[cell]))?;
    println!(
        "{} p={} si_sdr_db={:.3} final_train_loss={:.5} fire_fraction={:.3}",
        out.row.loss, out.row.p, out.row.si_sdr_db, out.row.final_train_loss, out.row.fire_fraction
    );
    Ok(())
}

fn sweep(common: Common, mut ps: Vec<PLabel>, mut losses: Vec<LossKind>, iterations: Option<usize>) -> Res<()> {
    let base = base_config(&common, iterations)?;
    if ps.is_empty() {
        ps = DEFAULT_P_VALUES.iter().map(|&p| PLabel::Percentile(p)).collect();
    }
    if losses.is_empty() {
        losses = LossKind::ALL.to_vec();
    }
    // Surface configuration problems before any training starts.
    for &p in &ps {
        cell_config(&base, p, losses[0]).map_err(|e| e.to_string())?;
    }
    fs::create_dir_all(&common.out).map_err(|e| format!("{}: {e}", common.out.display()))?;
    write(&common.out, "config.json", &base.to_json())?;
    let cells = run_sweep(&base, &ps, &losses).map_err(|e| e.to_string())?;
    write(&common.out, "results.csv", &results_csv(&cells))?;
    write(&common.out, "table.csv", &table_csv(&cells))?;
    let failures: Vec<String> = cells
        .iter()
        .filter_map(|c| c.error.as_ref().map(|e| format!("p={} loss={}: {e}", c.p, c.loss)))
        .collect();
    if !failures.is_empty() {
        write(&common.out, "errors.txt", &(failures.join("\n") + "\n"))?;
        for f in &failures {
            eprintln!("failed cell {f}");
        }
    }
    print!("{}", table_csv(&cells));
    Ok(())
}

fn check_gradients(loss: Option<LossKind>, seed: u64) -> Res<bool> {
    let losses = loss.map_or(LossKind::ALL.to_vec(), |l| vec![l]);
    let mut ok = true;
    for l in losses {
        for report in [gradcheck(l, seed), gradcheck_model(l, seed)] {
            let report = report.map_err(|e| e.to_string())?;
            ok &= report.passed();
            println!("{report}");
        }
    }
    Ok(ok)
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    let result = match cli.command {
        Command::Train { common, p, loss, iterations, resume } => train(common, p, loss, iterations, resume).map(|_| true),
        Command::Sweep { common, p, loss, iterations } => sweep(common, p, loss, iterations).map(|_| true),
        Command::Gradcheck { loss, seed } => check_gradients(loss, seed),
    };
    match result {
        Ok(true) => ExitCode::SUCCESS,
        Ok(false) => ExitCode::FAILURE,
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::FAILURE
        }
    }
}
