//! Command-line front end.

use std::ffi::OsString;
use std::path::{Path, PathBuf};
use std::sync::Arc;

use clap::{Parser, Subcommand};

use crate::config::RunConfig;
use crate::dynamics::InitMode;
use crate::error::{Error, Result};
use crate::eval::{evaluate_with, smoothness, terminal_report, Episode, Plane};
use crate::expert::{generate_demos, interaction_count, ExpertController};
use crate::io;
use crate::policy::{ActController, ActPolicy, EnsembleStats};
use crate::render::render;
use crate::stats::{battery, qq_points};
use crate::trainer::Trainer;

#[derive(Debug, Parser)]
#[command(name = "actdock", version, about = "Imitation-learned spacecraft docking: demos, training, evaluation, statistics")]
pub struct Cli {
    /// Run configuration (JSON). Omitted sections take their defaults.
    #[arg(long, global = true)]
    pub config: Option<PathBuf>,
    #[command(subcommand)]
    pub command: Command,
}

#[derive(Debug, Subcommand)]
pub enum Command {
    /// Roll out the scripted expert and write its episodes.
    Demos {
        #[arg(long, default_value_t = 100)]
        n: usize,
        #[arg(long, default_value = "same")]
        mode: InitMode,
        /// Overrides the config seed.
        #[arg(long)]
        seed: Option<u64>,
        /// Add the oscillating chatter perturbation.
        #[arg(long)]
        chatter: bool,
        #[arg(long)]
        out: PathBuf,
    },
    /// Fit an ACT policy to demonstration episodes.
    Train {
        #[arg(long)]
        demos: PathBuf,
        /// Final checkpoint path.
        #[arg(long)]
        out: PathBuf,
        #[arg(long)]
        iterations: Option<usize>,
        #[arg(long)]
        seed: Option<u64>,
        /// Loss curve CSV (iteration, l1, kl, total).
        #[arg(long)]
        curve: Option<PathBuf>,
        /// Directory for periodic checkpoints.
        #[arg(long)]
        checkpoint_dir: Option<PathBuf>,
        /// Continue from a training checkpoint instead of starting fresh.
        #[arg(long)]
        resume: Option<PathBuf>,
    },
    /// Roll out a policy and write the terminal report.
    Eval {
        /// A checkpoint path, or `expert` / `chatter` for the scripted baselines.
        #[arg(long)]
        policy: String,
        #[arg(long)]
        n: Option<usize>,
        #[arg(long)]
        mode: Option<InitMode>,
        #[arg(long)]
        seed: Option<u64>,
        /// EvalReport JSON.
        #[arg(long)]
        report: PathBuf,
        /// Episode NDJSON.
        #[arg(long)]
        episodes: Option<PathBuf>,
        /// Per-episode smoothness, one column.
        #[arg(long)]
        smoothness: Option<PathBuf>,
    },
    /// Welch, Levene and Shapiro–Wilk on two single-column samples.
    Stats {
        #[arg(long)]
        a: PathBuf,
        #[arg(long)]
        b: PathBuf,
        /// Report JSON; printed to stdout when omitted.
        #[arg(long)]
        out: Option<PathBuf>,
        /// Write `<prefix>_a.csv` and `<prefix>_b.csv` Q–Q points.
        #[arg(long)]
        qq: Option<PathBuf>,
    },
    /// Trajectory-visitation counts on a plane.
    Heatmap {
        #[arg(long)]
        episodes: PathBuf,
        #[arg(long, default_value = "xy")]
        plane: Plane,
        #[arg(long)]
        out: PathBuf,
    },
    /// Re-render the camera images of one episode as PGM files.
    Inspect {
        #[arg(long)]
        episodes: PathBuf,
        /// Episode id.
        #[arg(long, default_value_t = 0)]
        episode: u64,
        #[arg(long)]
        out_dir: PathBuf,
    },
}

/// Parse `args` and run; returns the process exit status.
pub fn run<I, T>(args: I) -> i32
where
    I: IntoIterator<Item = T>,
    T: Into<OsString> + Clone,
{
    let cli = match Cli::try_parse_from(args) {
        Ok(c) => c,
        Err(e) => {
            let _ = e.print();
            return if e.use_stderr() { 2 } else { 0 };
        }
    };
    match execute(cli) {
        Ok(()) => 0,
        Err(e) => {
            eprintln!("error: {e}");
            1
        }
    }
}

fn load_config(path: Option<&Path>) -> Result<RunConfig> {
    match path {
        Some(p) => RunConfig::load(p),
        None => Ok(RunConfig::default()),
    }
}

fn require_file(path: &Path, what: &str) -> Result<()> {
    if path.is_file() {
        Ok(())
    } else {
        Err(Error::Usage(format!("{what} file {} does not exist", path.display())))
    }
}

pub fn execute(cli: Cli) -> Result<()> {
    let mut cfg = load_config(cli.config.as_deref())?;
    match cli.command {
        Command::Demos { n, mode, seed, chatter, out } => {
            let seed = seed.unwrap_or(cfg.seed);
            let mut expert = cfg.expert;
            expert.chatter_enabled |= chatter;
            let eps = generate_demos(n, mode, seed, &expert, &cfg.scenario())?;
            io::write_episodes(&out, &eps)?;
            println!("wrote {} episodes ({} interactions) to {}", eps.len(), interaction_count(&eps), out.display());
        }
        Command::Train { demos, out, iterations, seed, curve, checkpoint_dir, resume } => {
            require_file(&demos, "demonstration")?;
            let eps = io::read_episodes(&demos)?;
            if let Some(s) = seed {
                cfg.train.seed = s;
            }
            if let Some(n) = iterations {
                cfg.train.iterations = n;
            }
            cfg.validate()?;
            let mut trainer = match resume {
                Some(path) => {
                    require_file(&path, "checkpoint")?;
                    Trainer::resume(&path, &eps, cfg.scenario(), iterations)?
                }
                None => {
                    let policy = ActPolicy::new(cfg.policy.clone(), cfg.train.seed)?;
                    Trainer::new(policy, cfg.train.clone(), &eps, cfg.scenario())?
                }
            };
            if let Some(dir) = &checkpoint_dir {
                std::fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
            }
            trainer.run(|t| {
                let Some(dir) = &checkpoint_dir else { return Ok(()) };
                let path = dir.join(format!("iter_{:06}.ckpt", t.iteration()));
                t.save_checkpoint(&path)?;
                eprintln!("checkpoint {}", path.display());
                Ok(())
            })?;
            trainer.save_checkpoint(&out)?;
            if let Some(path) = curve {
                trainer.write_curve(&path)?;
            }
            if let Some(last) = trainer.curve().last() {
                println!("trained {} iterations; last l1 {:.5} kl {:.5}", trainer.iteration(), last.l1, last.kl);
            }
        }
        Command::Eval { policy, n, mode, seed, report, episodes, smoothness: smooth_csv } => {
            let n = n.unwrap_or(cfg.eval.episodes);
            let mode = mode.unwrap_or(cfg.eval.mode);
            let seed = seed.unwrap_or(cfg.seed);
            cfg.validate()?;
            let scenario = cfg.scenario();
            let eps: Vec<Episode> = match policy.as_str() {
                "expert" | "chatter" => {
                    let mut expert = cfg.expert;
                    expert.chatter_enabled = policy == "chatter";
                    let sim = cfg.sim.clone();
                    evaluate_with(|| ExpertController { cfg: expert, sim: sim.clone() }, &scenario, n, mode, seed)
                        .into_iter()
                        .map(|(e, _)| e)
                        .collect()
                }
                path => {
                    let path = Path::new(path);
                    require_file(path, "policy checkpoint")?;
                    let (p, _) = ActPolicy::load(path)?;
                    if p.config().image_h != scenario.camera.h || p.config().image_w != scenario.camera.w {
                        return Err(Error::config("policy.image_h", "checkpoint image size differs from the camera"));
                    }
                    let p = Arc::new(p);
                    let decay = cfg.eval.ensemble_decay;
                    let make = || ActController::new(p.clone(), decay).expect("decay validated");
                    let runs = evaluate_with(make, &scenario, n, mode, seed);
                    let mut stats = EnsembleStats::default();
                    runs.iter().for_each(|(_, c)| stats.merge(&c.stats));
                    eprintln!(
                        "ensemble: {} calls, max |sum w - 1| {:.1e}, hull violations {}",
                        stats.calls, stats.max_weight_sum_error, stats.hull_violations
                    );
                    runs.into_iter().map(|(e, _)| e).collect()
                }
            };
            let failed = eps.iter().filter(|e| e.failure.is_some()).count();
            let rep = terminal_report(&eps, &cfg.eval.radii)?;
            io::write_json(&report, &rep)?;
            if let Some(path) = episodes {
                io::write_episodes(&path, &eps)?;
            }
            if let Some(path) = smooth_csv {
                let s: Vec<f64> = eps.iter().filter_map(|e| smoothness(e).ok()).collect();
                io::write_sample_csv(&path, "smoothness", &s)?;
            }
            print!("{}", rep.to_table());
            if failed > 0 {
                eprintln!("{failed} episode(s) failed; see the episode file for diagnostics");
            }
        }
        Command::Stats { a, b, out, qq } => {
            require_file(&a, "sample")?;
            require_file(&b, "sample")?;
            let (xa, xb) = (io::read_sample_csv(&a)?, io::read_sample_csv(&b)?);
            let rep = battery(&xa, &xb)?;
            match out {
                Some(path) => io::write_json(&path, &rep)?,
                None => println!("{}", serde_json::to_string_pretty(&rep).map_err(|e| Error::Format(e.to_string()))?),
            }
            let w = &rep.welch;
            eprintln!("welch t({:.2}) = {:.3}, p = {:.3e}", w.df.unwrap_or(f64::NAN), w.statistic, w.p);
            if let Some(prefix) = qq {
                for (tag, xs) in [("a", &xa), ("b", &xb)] {
                    let mut p = prefix.clone().into_os_string();
                    p.push(format!("_{tag}.csv"));
                    io::write_pairs_csv(Path::new(&p), ["theoretical", "sample"], &qq_points(xs)?)?;
                }
            }
        }
        Command::Heatmap { episodes, plane, out } => {
            require_file(&episodes, "episode")?;
            let eps = io::read_episodes(&episodes)?;
            let map = crate::eval::heatmap(&eps, plane, &cfg.eval.grid)?;
            io::write_heatmap_csv(&out, &map)?;
            println!("{} samples on a {}x{} grid", map.total(), map.rows, map.cols);
        }
        Command::Inspect { episodes, episode, out_dir } => {
            require_file(&episodes, "episode")?;
            let eps = io::read_episodes(&episodes)?;
            let mut ep = eps
                .into_iter()
                .find(|e| e.id == episode)
                .ok_or_else(|| Error::Usage(format!("no episode {episode} in {}", episodes.display())))?;
            std::fs::create_dir_all(&out_dir).map_err(|e| Error::io(&out_dir, e))?;
            for r in &mut ep.records {
                let name = format!("ep{:04}_t{:03}.pgm", ep.id, r.t);
                render(&r.state, &cfg.camera, &cfg.marker).write_pgm(&out_dir.join(&name))?;
                r.image_ref = Some(name);
            }
            io::write_episodes(&out_dir.join("episode.ndjson"), std::slice::from_ref(&ep))?;
            println!("wrote {} images to {}", ep.len(), out_dir.display());
        }
    }
    Ok(())
}
