use std::path::{Path, PathBuf};
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand};
use tempest::experiment::{self, Manifest, PhantomKind};
use tempest::Error;

/// Single-image reconstruction with tempered-posterior deep image priors.
#[derive(Parser)]
#[command(name = "tempest", version)]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Write a synthetic phantom as a 16-bit PGM.
    Gen {
        #[arg(long, default_value = "shepp-logan")]
        phantom: String,
        #[arg(long, default_value_t = 64)]
        size: usize,
        /// Also write the paired inpainting mask as mask.pgm.
        #[arg(long)]
        mask: bool,
        #[arg(long, default_value = ".")]
        out: PathBuf,
    },
    /// Train one reconstruction.
    Run(ManifestArgs),
    /// Bayesian optimisation of the method's hyperparameter pair.
    Bo(ManifestArgs),
    /// Consolidate run directories into one CSV, averaging over seeds.
    Table {
        #[arg(required = true)]
        runs: Vec<PathBuf>,
        /// Report UCE in percent.
        #[arg(long)]
        uce_percent: bool,
        /// Write to a file instead of stdout.
        #[arg(long)]
        out: Option<PathBuf>,
    },
}

#[derive(Args)]
struct ManifestArgs {
    #[arg(long)]
    manifest: PathBuf,
    /// Override a manifest key, e.g. `run.iterations=500`.
    #[arg(long = "set", value_name = "KEY=VALUE")]
    set: Vec<String>,
    #[arg(long)]
    out: PathBuf,
    #[arg(long)]
    seed: Option<u64>,
}

impl ManifestArgs {
    fn load(&self) -> tempest::Result<(Manifest, PathBuf)> {
        let m = Manifest::load(&self.manifest, &self.set, self.seed)?;
        let base = self.manifest.parent().map_or_else(|| PathBuf::from("."), Path::to_path_buf);
        Ok((m, base))
    }
}

fn execute(cli: Cli) -> tempest::Result<()> {
    match cli.command {
        Command::Gen { phantom, size, mask, out } => {
            let kind: PhantomKind = phantom.parse()?;
            std::fs::create_dir_all(&out)?;
            let path = out.join(format!("{}.pgm", kind.name()));
            kind.render(size)?.write_pgm16(&path)?;
            println!("{}", path.display());
            if mask {
                let path = out.join("mask.pgm");
                tempest::phantom::text_mask(size).write_pgm(&path)?;
                println!("{}", path.display());
            }
        }
        Command::Run(args) => {
            let (m, base) = args.load()?;
            let metrics = experiment::run_to_dir(&m, &base, &args.out)?;
            print!("{}", metrics.to_csv());
        }
        Command::Bo(args) => {
            let (m, base) = args.load()?;
            let outcome = experiment::bo_to_dir(&m, &base, &args.out, experiment::bo_threads()?)?;
            println!("best {:?} value {}", outcome.best_point, outcome.best_value);
        }
        Command::Table { runs, uce_percent, out } => {
            let rows = experiment::table(&runs)?;
            let csv = experiment::table_csv(&rows, if uce_percent { 100.0 } else { 1.0 });
            match out {
                Some(p) => std::fs::write(p, csv)?,
                None => print!("{csv}"),
            }
        }
    }
    Ok(())
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    match execute(cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e}");
            match e {
                Error::NumericalFailure(_) => ExitCode::from(3),
                _ => ExitCode::from(2),
            }
        }
    }
}
