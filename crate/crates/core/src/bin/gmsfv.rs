use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand};

use gmsfv::field::{default_geometry, gen_channel_field, save_field};
use gmsfv::mesh::FineGrid;
use gmsfv::sim::{run_single_phase, run_two_phase, Mode, SimConfig};
use gmsfv::Result;

#[derive(Parser)]
#[command(name = "gmsfv", version, about = "Conservative multiscale pressure and two-phase flow solver")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Fine reference and coarse solves for each enrichment level.
    Pressure(RunArgs),
    /// Two-phase flow with operator splitting.
    Twophase(RunArgs),
    /// Two-phase runs for each level against a fine-fv reference.
    Sweep(RunArgs),
    /// Write a synthetic channelized permeability field.
    Genfield(GenArgs),
}

/// Every config key as an optional override.
#[derive(Args)]
struct RunArgs {
    #[arg(long)]
    config: Option<PathBuf>,
    #[arg(long)]
    nx: Option<String>,
    #[arg(long)]
    ny: Option<String>,
    #[arg(long)]
    ncx: Option<String>,
    #[arg(long)]
    ncy: Option<String>,
    #[arg(long)]
    field: Option<String>,
    #[arg(long)]
    background: Option<String>,
    #[arg(long)]
    contrast: Option<String>,
    #[arg(long)]
    seed: Option<String>,
    #[arg(long = "L")]
    l: Option<String>,
    #[arg(long)]
    levels: Option<String>,
    #[arg(long)]
    p_left: Option<String>,
    #[arg(long)]
    p_right: Option<String>,
    #[arg(long)]
    mu_w: Option<String>,
    #[arg(long)]
    mu_o: Option<String>,
    #[arg(long)]
    dt: Option<String>,
    #[arg(long)]
    steps_per_pressure: Option<String>,
    #[arg(long)]
    t_final: Option<String>,
    #[arg(long)]
    output_times: Option<String>,
    #[arg(long)]
    mode: Option<String>,
    #[arg(long)]
    out_dir: Option<String>,
}

impl RunArgs {
    fn config(&self) -> Result<SimConfig> {
        let mut cfg = match &self.config {
            Some(p) => SimConfig::from_file(p)?,
            None => SimConfig::default(),
        };
        let overrides = [
            ("nx", &self.nx),
            ("ny", &self.ny),
            ("ncx", &self.ncx),
            ("ncy", &self.ncy),
            ("field", &self.field),
            ("background", &self.background),
            ("contrast", &self.contrast),
            ("seed", &self.seed),
            ("L", &self.l),
            ("levels", &self.levels),
            ("p_left", &self.p_left),
            ("p_right", &self.p_right),
            ("mu_w", &self.mu_w),
            ("mu_o", &self.mu_o),
            ("dt", &self.dt),
            ("steps_per_pressure", &self.steps_per_pressure),
            ("t_final", &self.t_final),
            ("output_times", &self.output_times),
            ("mode", &self.mode),
            ("out_dir", &self.out_dir),
        ];
        for (key, value) in overrides {
            if let Some(v) = value {
                cfg.set(key, v)?;
            }
        }
        cfg.validate()?;
        Ok(cfg)
    }
}

#[derive(Args)]
struct GenArgs {
    #[arg(long)]
    nx: usize,
    #[arg(long)]
    ny: Option<usize>,
    #[arg(long, default_value_t = 1.0)]
    background: f64,
    #[arg(long, default_value_t = 1e4)]
    contrast: f64,
    #[arg(long, default_value_t = 7)]
    seed: u64,
    #[arg(long)]
    out: PathBuf,
}

fn run(cli: Cli) -> Result<()> {
    match cli.command {
        Command::Pressure(a) => {
            let rec = run_single_phase(&a.config()?)?;
            print!("{}", rec.csv());
            for n in &rec.notes {
                eprintln!("note: {n}");
            }
            if rec.failed {
                eprintln!("conservation residual above tolerance");
            }
        }
        Command::Twophase(a) => {
            let rec = run_two_phase(&a.config()?)?;
            print!("{}", rec.to_text());
        }
        Command::Sweep(a) => {
            let base = a.config()?;
            let mut reference = base.clone();
            reference.mode = Mode::FineFv;
            reference.out_dir = base.out_dir.as_ref().map(|d| d.join("fine-fv"));
            let fine = run_two_phase(&reference)?;
            println!("L,N_c,dimV0,max_saturation_pct,per_snapshot");
            for &l in &base.levels {
                let mut cfg = base.clone();
                cfg.mode = Mode::GmsfemFv;
                cfg.l_interior = l;
                cfg.out_dir = base.out_dir.as_ref().map(|d| d.join(format!("L{l}")));
                let rec = run_two_phase(&cfg)?;
                let errs = rec.saturation_errors(&fine)?;
                let max = errs.iter().map(|e| e.1).fold(0.0, f64::max);
                let each: Vec<String> = errs.iter().map(|(t, e)| format!("{t}:{e:.4}")).collect();
                println!("{l},{},{},{max:.4},{}", rec.n_c, rec.dim_v0, each.join(" "));
            }
        }
        Command::Genfield(a) => {
            let fg = FineGrid::new(a.nx, a.ny.unwrap_or(a.nx))?;
            let k = gen_channel_field(&fg, a.background, a.contrast, &default_geometry(), a.seed)?;
            save_field(&a.out, &k)?;
            eprintln!("{}", k.summary());
        }
    }
    Ok(())
}

fn main() -> ExitCode {
    match run(Cli::parse()) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::FAILURE
        }
    }
}
