use clap::{Args, Parser, Subcommand};
use innet_core::config::{Mode, Role, RunConfig};
use innet_core::run::{self, RunError};
use innet_core::{deploy, fabric::Ratio};
use std::path::{Path, PathBuf};
use std::process::ExitCode;

#[derive(Parser)]
#[command(name = "innet", version, about = "In-network aggregation training simulator")]
struct Cli {
    #[command(subcommand)]
    cmd: Cmd,
}

#[derive(Subcommand)]
enum Cmd {
    /// Run distributed training on the simulated fabric or over UDP.
    Train(RunArgs),
    /// Run the single-process reference with the same configuration.
    Oracle(RunArgs),
    /// Merge metrics files into a plot-ready loss table and a summary.
    Report {
        /// Metrics files, optionally labelled as `label=path`.
        #[arg(required = true)]
        files: Vec<String>,
        /// Write the loss table here instead of stdout.
        #[arg(long)]
        out: Option<PathBuf>,
    },
}

#[derive(Args)]
struct RunArgs {
    /// `key = value` configuration file.
    #[arg(long)]
    config: Option<PathBuf>,
    /// Output directory.
    #[arg(long, default_value = "out")]
    out: PathBuf,
    #[arg(long)]
    mode: Option<Mode>,
    #[arg(long)]
    workers: Option<u32>,
    #[arg(long)]
    rounds: Option<u64>,
    #[arg(long)]
    seed: Option<u64>,
    #[arg(long)]
    loss_prob: Option<f64>,
    #[arg(long)]
    dup_prob: Option<f64>,
    /// Extra overrides, `key=value`, applied last.
    #[arg(long = "set", value_name = "KEY=VALUE")]
    sets: Vec<String>,
    /// Print the effective configuration and exit.
    #[arg(long)]
    print_config: bool,
}

impl RunArgs {
    fn config(&self) -> Result<RunConfig, RunError> {
        let mut cfg = match &self.config {
            Some(p) => RunConfig::from_file(p)?,
            None => RunConfig::default(),
        };
        if let Some(m) = self.mode {
            cfg.mode = m;
        }
        if let Some(v) = self.workers {
            cfg.workers = v;
        }
        if let Some(v) = self.rounds {
            cfg.rounds = v;
        }
        if let Some(v) = self.seed {
            cfg.seed = v;
        }
        if let Some(v) = self.loss_prob {
            cfg.loss_prob = v;
        }
        if let Some(v) = self.dup_prob {
            cfg.dup_prob = v;
        }
        for s in &self.sets {
            let (k, v) = s
                .split_once('=')
                .ok_or_else(|| RunError::Other(format!("--set expects KEY=VALUE, got `{s}`")))?;
            cfg.set(k.trim(), v)?;
        }
        cfg.validate()?;
        Ok(cfg)
    }
}

fn train(args: &RunArgs) -> Result<(), RunError> {
    let cfg = args.config()?;
    if args.print_config {
        print!("{}", cfg.render());
        return Ok(());
    }
    match (cfg.mode, cfg.role) {
        (Mode::Sim, _) => {
            let r = run::train_sim(&cfg, &args.out)?;
            let last = r.records.last();
            println!(
                "trained {} rounds on {} workers in {} ticks; final loss {}",
                r.records.len(),
                cfg.workers,
                r.total_ticks,
                last.map_or(f64::NAN, |x| x.loss)
            );
            let ratio = r.traffic.ratio.map_or("n/a".to_string(), |q: Ratio| format!("{q} ({:.3})", q.to_f64()));
            println!(
                "per-worker elements per collective: {} (ring baseline {}); ratio {ratio}",
                r.traffic.pushed_per_collective.first().map_or("0".into(), |x| x.to_string()),
                r.traffic.ring_elems
            );
            println!("state in {}", r.store_dir.display());
        }
        (Mode::Udp, Role::AllInOne) => {
            let exe = std::env::current_exe().map_err(|e| RunError::Other(e.to_string()))?;
            let recs = deploy::launch_udp(&cfg, &exe, &args.out)?;
            println!(
                "trained {} rounds over UDP on {} workers; final loss {}",
                recs.len(),
                cfg.workers,
                recs.last().map_or(f64::NAN, |x| x.loss)
            );
        }
        (Mode::Udp, _) => deploy::run_role(&cfg, &args.out)?,
    }
    Ok(())
}

fn oracle(args: &RunArgs) -> Result<(), RunError> {
    let cfg = args.config()?;
    if args.print_config {
        print!("{}", cfg.render());
        return Ok(());
    }
    let r = run::oracle(&cfg, &args.out)?;
    println!(
        "reference ran {} rounds; final loss {}; state in {}",
        r.losses.len(),
        r.losses.last().copied().unwrap_or(f64::NAN),
        r.store_dir.display()
    );
    Ok(())
}

fn report(files: &[String], out: Option<&Path>) -> Result<(), RunError> {
    let inputs: Vec<(String, PathBuf)> = files
        .iter()
        .map(|f| match f.split_once('=') {
            Some((label, path)) => (label.to_string(), PathBuf::from(path)),
            None => {
                let p = PathBuf::from(f);
                let label = p
                    .parent()
                    .and_then(|d| d.file_name())
                    .or_else(|| p.file_stem())
                    .map_or_else(|| f.clone(), |s| s.to_string_lossy().into_owned());
                (label, p)
            }
        })
        .collect();
    let (table, summary) = run::report(&inputs)?;
    match out {
        Some(p) => std::fs::write(p, &table).map_err(|source| RunError::Io { path: p.to_path_buf(), source })?,
        None => print!("{table}"),
    }
    eprint!("{summary}");
    Ok(())
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    let res = match &cli.cmd {
        Cmd::Train(a) => train(a),
        Cmd::Oracle(a) => oracle(a),
        Cmd::Report { files, out } => report(files, out.as_deref()),
    };
    match res {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::FAILURE
        }
    }
}
