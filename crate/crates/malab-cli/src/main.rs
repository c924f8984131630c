use std::path::{Path, PathBuf};
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand};
use malab::experiment::{compare, run_stages, ExperimentConfig, Problem, RunManifest, Stages};
use malab::report::{write_csv, write_json};
use malab::Error;

/// Sections, decay and integrability experiments for convex solutions of the
/// Monge-Ampere equation.
#[derive(Parser)]
#[command(name = "malab", version)]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Args, Clone)]
struct Common {
    /// TOML experiment configuration; defaults apply when omitted.
    #[arg(long)]
    config: Option<PathBuf>,
    /// Output directory (overrides the configuration).
    #[arg(long)]
    out: Option<PathBuf>,
    #[arg(long)]
    seed: Option<u64>,
    /// Comma-separated cells per axis, coarse to fine.
    #[arg(long, value_delimiter = ',')]
    grids: Option<Vec<usize>>,
}

#[derive(Subcommand)]
enum Command {
    /// Solve (or sample) the problem on every grid.
    Solve(Common),
    /// Base section, normalization, size curve and engulfing constant.
    Sections(Common),
    /// Vitali cover of the first level set inside the base section.
    Cover(Common),
    /// Level decompositions and the covering chain for every M.
    Decay(Common),
    /// Tail measures |F_K| and the K log K bound.
    Tails(Common),
    /// Stability of the W^{2,1+eps} integral under refinement.
    Epsilon(Common),
    /// Homogeneous solution: construction, levels, tails and epsilon.
    Wang {
        #[command(flatten)]
        common: Common,
        /// Exponent; overrides the configured problem.
        #[arg(long)]
        alpha: Option<f64>,
    },
    /// Doubling constants of a measure.
    MuCheck {
        #[command(flatten)]
        common: Common,
        /// Measure JSON; overrides the configured problem.
        #[arg(long)]
        measure: Option<PathBuf>,
    },
    /// Every stage.
    Run(Common),
    /// Compare two runs (manifest files or output directories).
    Compare {
        a: PathBuf,
        b: PathBuf,
        /// Directory for diff.json and diff.csv.
        #[arg(long)]
        out: Option<PathBuf>,
    },
    /// Print a commented configuration with all defaults.
    Template,
}

fn config(c: &Common, problem: Option<Problem>) -> malab::Result<ExperimentConfig> {
    let mut cfg = match &c.config {
        Some(p) => {
            let text = std::fs::read_to_string(p).map_err(|e| Error::Config(format!("{}: {e}", p.display())))?;
            toml::from_str(&text).map_err(|e| Error::Config(format!("{}: {e}", p.display())))?
        }
        None => ExperimentConfig::default(),
    };
    if let Some(o) = &c.out {
        cfg.out = o.clone();
    }
    if let Some(s) = c.seed {
        cfg.seed = s;
    }
    if let Some(g) = &c.grids {
        cfg.grids = g.clone();
    }
    if let Some(p) = problem {
        cfg.problem = p;
    }
    cfg.validate()?;
    Ok(cfg)
}

fn execute(c: &Common, problem: Option<Problem>, stages: Stages) -> malab::Result<()> {
    let cfg = config(c, problem)?;
    let m = run_stages(&cfg, stages)?;
    println!("{} -> {}", m.problem, cfg.out.display());
    for f in &m.files {
        println!("  {}", f.path);
    }
    let s = serde_json::to_string_pretty(&m.summary).map_err(|e| Error::Io(e.to_string()))?;
    println!("{s}");
    Ok(())
}

fn load_manifest(p: &Path) -> malab::Result<RunManifest> {
    RunManifest::load(p).map_err(|e| Error::Config(e.to_string()))
}

fn main() -> ExitCode {
    let cli = match Cli::try_parse() {
        Ok(c) => c,
        Err(e) => {
            let _ = e.print();
            return if e.use_stderr() { ExitCode::from(3) } else { ExitCode::SUCCESS };
        }
    };
    let none = Stages::default();
    let result = match &cli.command {
        Command::Solve(c) => execute(c, None, Stages { solve: true, ..none }),
        Command::Sections(c) => execute(c, None, Stages { sections: true, ..none }),
        Command::Cover(c) => execute(c, None, Stages { sections: true, cover: true, ..none }),
        Command::Decay(c) => execute(c, None, Stages { sections: true, decay: true, ..none }),
        Command::Tails(c) => execute(c, None, Stages { tails: true, ..none }),
        Command::Epsilon(c) => execute(c, None, Stages { epsilon: true, ..none }),
        Command::Wang { common, alpha } => {
            let problem = match (alpha, &common.config) {
                (Some(a), _) => Some(Problem::Wang { alpha: *a }),
                (None, None) => Some(Problem::Wang { alpha: 3.0 }),
                (None, Some(_)) => None,
            };
            let stages = Stages { wang: true, tails: true, epsilon: true, decay: true, sections: true, ..none };
            match config(common, problem.clone()) {
                Ok(cfg) if !matches!(cfg.problem, Problem::Wang { .. }) => {
                    Err(Error::Config(format!("wang needs a wang problem, configured {}", cfg.problem.selector())))
                }
                Ok(_) => execute(common, problem, stages),
                Err(e) => Err(e),
            }
        }
        Command::MuCheck { common, measure } => {
            let problem = measure.clone().map(|spec| Problem::Mu { spec });
            match config(common, problem.clone()) {
                Ok(cfg) if !matches!(cfg.problem, Problem::Mu { .. }) => {
                    Err(Error::Config("mu-check needs --measure or a mu problem".into()))
                }
                Ok(_) => execute(common, problem, Stages { mu: true, ..none }),
                Err(e) => Err(e),
            }
        }
        Command::Run(c) => execute(c, None, Stages::all()),
        Command::Compare { a, b, out } => (|| {
            let d = compare(&load_manifest(a)?, &load_manifest(b)?)?;
            if let Some(o) = out {
                std::fs::create_dir_all(o)?;
                write_json(&o.join("diff.json"), &d)?;
                write_csv(&o.join("diff.csv"), &d.rows)?;
            }
            println!("{:<40} {:>14} {:>14} {:>10}", "quantity", "a", "b", "rel diff");
            for r in &d.rows {
                let mark = match r.within {
                    Some(false) => "  outside tolerance",
                    _ => "",
                };
                println!("{:<40} {:>14.6e} {:>14.6e} {:>10.3e}{mark}", r.key, r.a, r.b, r.rel_diff);
            }
            for f in d.flags.iter().filter(|f| !f.agree) {
                println!("flag {} differs: {} vs {}", f.key, f.a, f.b);
            }
            for f in &d.differing_files {
                println!("file differs: {f}");
            }
            println!("all diffs zero: {}; flags agree: {}", d.all_zero(), d.flags_agree());
            Ok(())
        })(),
        Command::Template => {
            print!("{}", ExperimentConfig::template());
            Ok(())
        }
    };
    match result {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e}");
            match e {
                Error::Config(_) | Error::IncompatibleManifests(_) => ExitCode::from(3),
                _ => ExitCode::from(2),
            }
        }
    }
}
