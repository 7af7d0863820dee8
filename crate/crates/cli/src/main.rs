use std::path::{Path, PathBuf};
use std::process::ExitCode;

use clap::Parser;
use emckt_cli::{run, Mode, RunConfig};

/// Transient EM-circuit co-simulation driver.
#[derive(Debug, Parser)]
#[command(name = "emckt", version)]
struct Args {
    mode: Mode,
    #[arg(long)]
    config: PathBuf,
    /// Archive file; overrides `archive.path`.
    #[arg(long)]
    archive: Option<PathBuf>,
    /// Output directory; overrides `output.dir`.
    #[arg(long)]
    out: Option<PathBuf>,
}

fn absolute(p: &Path) -> PathBuf {
    std::env::current_dir().map(|d| d.join(p)).unwrap_or_else(|_| p.to_path_buf())
}

fn main() -> ExitCode {
    let args = Args::parse();
    let result = RunConfig::load(&args.config).and_then(|mut cfg| {
        if let Some(a) = &args.archive {
            cfg.archive.path = Some(absolute(a));
        }
        if let Some(o) = &args.out {
            cfg.output.dir = absolute(o);
        }
        run(args.mode, &cfg)
    });
    match result {
        Ok(report) => {
            for l in &report.lines {
                println!("{l}");
            }
            for f in &report.files {
                println!("wrote {}", f.display());
            }
            ExitCode::SUCCESS
        }
        Err(e) => {
            eprintln!("error[{}]: {e}", e.kind());
            ExitCode::from(e.exit_code() as u8)
        }
    }
}
