//! `annihilate`: experiment runner for two-type annihilating systems on
//! reflective graphs.
//!
//! Exit codes: 0 success with all exact invariants held, 2 invalid spec,
//! 3 invariant violation (named, with the seed), 1 other errors.

mod runs;
mod spec;

use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand};

use annihilate_core::rng::{salt, StreamKey};
use annihilate_core::{Error, ReflectiveGraph, SiteId};

use spec::ExperimentSpec;

#[derive(Parser)]
#[command(name = "annihilate", version, about)]
struct Cli {
    /// Worker threads for replica fan-out (default: available parallelism).
    #[arg(long, global = true)]
    jobs: Option<usize>,
    #[command(subcommand)]
    cmd: Cmd,
}

#[derive(Args, Debug, Default, Clone)]
struct SpecArgs {
    /// JSON experiment spec; flags override its fields.
    #[arg(long)]
    config: Option<PathBuf>,
    #[arg(long)]
    graph: Option<String>,
    /// Initial law, e.g. `+1:0.25,-1:0.25,0:0.5`.
    #[arg(long)]
    nu: Option<String>,
    #[arg(long)]
    da: Option<f64>,
    #[arg(long)]
    db: Option<f64>,
    #[arg(long)]
    tmax: Option<f64>,
    #[arg(long)]
    mode: Option<String>,
    #[arg(long)]
    replicas: Option<u32>,
    #[arg(long)]
    seed: Option<u64>,
    #[arg(long)]
    m: Option<f64>,
    #[arg(long)]
    delta: Option<f64>,
    #[arg(long)]
    n: Option<i64>,
    #[arg(long)]
    k: Option<u32>,
    #[arg(long)]
    site: Option<u32>,
    /// Comma-separated increasing times, e.g. `100,1000`.
    #[arg(long)]
    ladder: Option<String>,
    /// Fit window `lo,hi` for plain mode.
    #[arg(long)]
    fit_window: Option<String>,
    #[arg(long)]
    bootstrap: Option<u32>,
    #[arg(long)]
    rate: Option<f64>,
    /// Comma-separated truncation radii.
    #[arg(long)]
    radii: Option<String>,
    #[arg(long)]
    max_steps: Option<usize>,
    /// Record event logs (desk-scale runs only).
    #[arg(long)]
    events: bool,
}

#[derive(Subcommand)]
enum Cmd {
    /// Run an experiment and write its artifacts.
    Run {
        #[command(flatten)]
        spec: SpecArgs,
        /// Output directory (beats the ANNIHILATE_OUT variable).
        #[arg(long)]
        out: Option<PathBuf>,
    },
    /// Check a spec and echo its normalized form without running.
    Validate {
        #[command(flatten)]
        spec: SpecArgs,
    },
    /// Oracle cross-checks on a small graph; prints a pass/fail table.
    OracleCheck {
        #[arg(long, default_value = "complete:n=4")]
        graph: String,
        #[arg(long, default_value = "1:0.25,-1:0.25,0:0.5")]
        nu: String,
        #[arg(long, default_value_t = 3)]
        max_steps: usize,
        #[arg(long, default_value_t = 1)]
        seed: u64,
        #[arg(long, default_value_t = 20_000)]
        replicas: u32,
        #[arg(long)]
        out: Option<PathBuf>,
    },
    /// Trace the discrete entangled construction for one driving path.
    EntangleDemo {
        #[arg(long, default_value = "torus:d=1,L=6")]
        graph: String,
        /// Start of the driving walk.
        #[arg(long, default_value = "0")]
        y: String,
        /// Start of the second walk.
        #[arg(long, default_value = "3")]
        z: String,
        /// Explicit driving path as `;`-separated sites (overrides --steps).
        #[arg(long)]
        z_path: Option<String>,
        /// Switch sequence as comma-separated 1/2 entries.
        #[arg(long)]
        ell: Option<String>,
        #[arg(long, default_value_t = 6)]
        steps: usize,
        #[arg(long, default_value_t = 1)]
        seed: u64,
        #[arg(long)]
        out: Option<PathBuf>,
    },
    /// Fit a power-law exponent from an existing density.csv.
    Fit {
        #[arg(long)]
        density: PathBuf,
        /// Window `lo,hi` in time.
        #[arg(long)]
        window: String,
        #[arg(long, default_value = "fit.json")]
        out: PathBuf,
    },
}

fn parse_pair(s: &str) -> Result<(f64, f64), Error> {
    let (a, b) = s
        .split_once(',')
        .ok_or_else(|| Error::InvalidSpec(format!("expected `lo,hi`, got `{s}`")))?;
    let lo = a
        .trim()
        .parse()
        .map_err(|_| Error::InvalidSpec(format!("bad number `{a}`")))?;
    let hi = b
        .trim()
        .parse()
        .map_err(|_| Error::InvalidSpec(format!("bad number `{b}`")))?;
    Ok((lo, hi))
}

fn parse_list<T: std::str::FromStr>(s: &str) -> Result<Vec<T>, Error> {
    s.split(',')
        .map(|c| {
            c.trim()
                .parse::<T>()
                .map_err(|_| Error::InvalidSpec(format!("bad list entry `{c}`")))
        })
        .collect()
}

impl SpecArgs {
    fn into_spec(self) -> Result<ExperimentSpec, Error> {
        let mut spec = match &self.config {
            Some(path) => {
                let text = std::fs::read_to_string(path)?;
                serde_json::from_str::<ExperimentSpec>(&text)
                    .map_err(|e| Error::InvalidSpec(format!("{}: {e}", path.display())))?
            }
            None => ExperimentSpec::default(),
        };
        if let Some(v) = self.graph {
            spec.graph = v;
        }
        if let Some(v) = self.nu {
            spec.nu = v;
        }
        if let Some(v) = self.da {
            spec.da = v;
        }
        if let Some(v) = self.db {
            spec.db = v;
        }
        if let Some(v) = self.tmax {
            spec.tmax = v;
        }
        if let Some(v) = self.mode {
            spec.mode = v;
        }
        if let Some(v) = self.replicas {
            spec.replicas = v;
        }
        if let Some(v) = self.seed {
            spec.seed = v;
        }
        if let Some(v) = self.m {
            spec.m = Some(v);
        }
        if let Some(v) = self.delta {
            spec.delta = Some(v);
        }
        if let Some(v) = self.n {
            spec.n = Some(v);
        }
        if let Some(v) = self.k {
            spec.k = Some(v);
        }
        if let Some(v) = self.site {
            spec.site = Some(v);
        }
        if let Some(v) = &self.ladder {
            spec.ladder = Some(parse_list(v)?);
        }
        if let Some(v) = &self.fit_window {
            spec.fit_window = Some(parse_pair(v)?);
        }
        if let Some(v) = self.bootstrap {
            spec.bootstrap = Some(v);
        }
        if let Some(v) = self.rate {
            spec.rate = Some(v);
        }
        if let Some(v) = &self.radii {
            spec.radii = Some(parse_list(v)?);
        }
        if let Some(v) = self.max_steps {
            spec.max_steps = Some(v);
        }
        if self.events {
            spec.events = Some(true);
        }
        Ok(spec)
    }
}

fn dispatch(cli: Cli) -> Result<(), Error> {
    if let Some(jobs) = cli.jobs {
        rayon::ThreadPoolBuilder::new()
            .num_threads(jobs)
            .build_global()
            .map_err(|e| Error::InvalidParams(format!("--jobs: {e}")))?;
    }
    match cli.cmd {
        Cmd::Run { spec, out } => {
            let norm = spec.into_spec()?.normalize()?;
            let dir = runs::out_dir(out.as_deref());
            let seed = norm.spec.seed;
            let spec_echo = serde_json::to_value(&norm.spec)?;
            let (result, wall) = runs::timed(|| runs::run_mode(&norm, &dir));
            match result {
                Ok(outcome) => {
                    runs::write_manifest(&dir, &spec_echo, seed, wall, &outcome)?;
                    println!(
                        "ok: wrote {} artifact(s) to {}",
                        outcome.artifacts.len() + 1,
                        dir.display()
                    );
                    Ok(())
                }
                Err(e) => {
                    let outcome = runs::RunOutcome {
                        artifacts: vec![],
                        invariants_ok: !matches!(e, Error::InvariantViolation { .. }),
                        summary: serde_json::json!({"error": e.to_string()}),
                    };
                    let _ = runs::write_manifest(&dir, &spec_echo, seed, wall, &outcome);
                    Err(e)
                }
            }
        }
        Cmd::Validate { spec } => {
            let norm = spec.into_spec()?.normalize()?;
            println!("{}", serde_json::to_string_pretty(&norm.spec)?);
            Ok(())
        }
        Cmd::OracleCheck {
            graph,
            nu,
            max_steps,
            seed,
            replicas,
            out,
        } => {
            let spec = ExperimentSpec {
                graph,
                nu,
                mode: "oracle-check".into(),
                tmax: 2.0,
                replicas,
                seed,
                max_steps: Some(max_steps),
                ..Default::default()
            };
            let norm = spec.normalize()?;
            let dir = runs::out_dir(out.as_deref());
            runs::run_mode(&norm, &dir).map(|_| ())
        }
        Cmd::EntangleDemo {
            graph,
            y,
            z,
            z_path,
            ell,
            steps,
            seed,
            out,
        } => {
            let g = ReflectiveGraph::parse(&graph)?;
            let y = runs::parse_site(&g, &y)?;
            let z = runs::parse_site(&g, &z)?;
            let zpath: Vec<SiteId> = match z_path {
                Some(s) => s
                    .split(';')
                    .map(|p| runs::parse_site(&g, p))
                    .collect::<Result<_, _>>()?,
                None => {
                    let mut s = StreamKey::new(seed, salt::ENTANGLE_WALK).stream();
                    let mut path = vec![y.clone()];
                    for _ in 0..steps {
                        path.push(g.sample_step(path.last().unwrap(), &mut s));
                    }
                    path
                }
            };
            let ell: Vec<u8> = match ell {
                Some(s) => parse_list(&s)?,
                None => {
                    let mut s = StreamKey::new(seed, salt::GENERIC).stream();
                    (1..zpath.len())
                        .map(|_| if s.next_bernoulli(0.5) { 2 } else { 1 })
                        .collect()
                }
            };
            let demo = runs::entangle_demo(&g, &y, &z, &zpath, &ell)?;
            let text = serde_json::to_string_pretty(&demo)?;
            match out {
                Some(path) => std::fs::write(path, text)?,
                None => println!("{text}"),
            }
            Ok(())
        }
        Cmd::Fit {
            density,
            window,
            out,
        } => {
            let window = parse_pair(&window)?;
            let fit = runs::fit_from_csv(&density, window, &out)?;
            println!("{}", serde_json::to_string_pretty(&fit)?);
            Ok(())
        }
    }
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    match dispatch(cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e}");
            match e {
                Error::InvalidSpec(_)
                | Error::InvalidKernel(_)
                | Error::InvalidGraph(_)
                | Error::InvalidParams(_) => ExitCode::from(2),
                Error::InvariantViolation { .. } => ExitCode::from(3),
                _ => ExitCode::FAILURE,
            }
        }
    }
}
