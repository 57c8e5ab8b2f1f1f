//! `demonstrate` — generate demonstrations, train, validate, run and benchmark.

use std::path::{Path, PathBuf};
use std::process::ExitCode;

use anyhow::{bail, Context};
use clap::{Args, Parser, Subcommand};
use serde_json::json;

use demonstrate::benchmark::{run_benchmark, BenchTask};
use demonstrate::config::{Config, PlannerKind};
use demonstrate::demos::{generate_demoset, load_demoset, save_demoset, synthetic_obstacle};
use demonstrate::execute::{write_jsonl, Pipeline};
use demonstrate::language::{make_planner, LearnedDesigner};
use demonstrate::model::sha256_hex;
use demonstrate::sim::{spawn_scene, Layout};
use demonstrate::training::train_model;
use demonstrate_cli::load_model;
use demonstrate_cli::server::{serve, AppState};

#[derive(Parser)]
#[command(name = "demonstrate", version, about)]
struct Cli {
    /// TOML configuration file; defaults apply when omitted.
    #[arg(long, global = true)]
    config: Option<PathBuf>,
    /// Print machine-readable JSON on stdout.
    #[arg(long, global = true)]
    json: bool,
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Demonstration sets.
    Demos {
        #[command(subcommand)]
        action: DemosCommand,
    },
    /// Fit the embedding basis, the cost mapping and (with obstacle demos) the constraint.
    Train {
        #[arg(long)]
        demos: PathBuf,
        #[arg(long)]
        out: PathBuf,
        /// Retained principal components.
        #[arg(long)]
        z: Option<usize>,
    },
    /// Coverage, residual and verdict of one sub-task description.
    ValidateSubtask {
        #[arg(long)]
        model: PathBuf,
        #[arg(long)]
        text: String,
        #[arg(long)]
        threshold: Option<f64>,
    },
    /// Plan, validate and execute one command.
    Run {
        #[arg(long)]
        model: PathBuf,
        #[arg(long)]
        command: String,
        #[command(flatten)]
        episode: EpisodeArgs,
        /// Write the episode as one JSON line.
        #[arg(long)]
        out: Option<PathBuf>,
    },
    /// Seeded repetitions of a benchmark task with failure attribution.
    Benchmark {
        #[arg(long)]
        model: PathBuf,
        #[arg(long)]
        task: BenchTask,
        #[arg(long)]
        runs: Option<usize>,
        #[command(flatten)]
        episode: EpisodeArgs,
        /// Write every episode as JSON lines.
        #[arg(long)]
        episodes_out: Option<PathBuf>,
    },
    /// HTTP API for the console.
    Serve {
        #[arg(long)]
        model: PathBuf,
        #[arg(long)]
        host: Option<String>,
        #[arg(long)]
        port: Option<u16>,
    },
}

#[derive(Args)]
struct EpisodeArgs {
    /// `scripted` or `llm`.
    #[arg(long)]
    planner: Option<PlannerKind>,
    #[arg(long)]
    seed: Option<u64>,
}

#[derive(Subcommand)]
enum DemosCommand {
    Generate {
        #[arg(long)]
        layout: Option<Layout>,
        #[arg(long)]
        tasks: Option<usize>,
        #[arg(long)]
        per_task: Option<usize>,
        #[arg(long)]
        out: PathBuf,
        #[arg(long, default_value_t = 0)]
        seed: u64,
        /// Also record obstacle-avoiding demonstrations around the built-in obstacle.
        #[arg(long)]
        obstacle: bool,
    },
}

fn emit(as_json: bool, value: &serde_json::Value, text: impl FnOnce() -> String) {
    if as_json {
        println!("{value}");
    } else {
        println!("{}", text());
    }
}

fn learned_pipeline_parts(
    cfg: &Config,
    model_path: &Path,
    args: &EpisodeArgs,
) -> anyhow::Result<(demonstrate::model::LearnedModel, Box<dyn demonstrate::embedding::EmbeddingProvider>, Config)> {
    let (model, embedder) = load_model(model_path, cfg)?;
    let mut cfg = cfg.clone();
    if let Some(kind) = args.planner {
        cfg.planner.kind = kind;
    }
    Ok((model, embedder, cfg))
}

fn run(cli: Cli) -> anyhow::Result<()> {
    let cfg = Config::load_or_default(cli.config.as_deref()).context("loading configuration")?;
    match cli.command {
        Command::Demos {
            action:
                DemosCommand::Generate {
                    layout,
                    tasks,
                    per_task,
                    out,
                    seed,
                    obstacle,
                },
        } => {
            let mut dc = cfg.demos.clone();
            if let Some(l) = layout {
                dc.layout = l;
            }
            dc.tasks = tasks.unwrap_or(dc.tasks);
            dc.per_task = per_task.unwrap_or(dc.per_task);
            if obstacle && dc.obstacle.is_none() {
                dc.obstacle = Some(synthetic_obstacle());
            }
            let set = generate_demoset(&cfg.oracle(), &dc, seed)?;
            save_demoset(&set, &out)?;
            let n_free: usize = set.examples.iter().map(|e| e.demos_free.len()).sum();
            let n_safe: usize = set.examples.iter().map(|e| e.demos_safe.len()).sum();
            emit(
                cli.json,
                &json!({"out": out, "tasks": set.examples.len(), "demos_free": n_free, "demos_safe": n_safe}),
                || format!("wrote {} sub-tasks ({n_free} free, {n_safe} obstacle demos) to {}", set.examples.len(), out.display()),
            );
        }
        Command::Train { demos, out, z } => {
            let bytes = std::fs::read(&demos).with_context(|| format!("reading {}", demos.display()))?;
            let set = load_demoset(&demos)?;
            if set.examples.is_empty() {
                bail!("demonstration file {} holds no sub-tasks", demos.display());
            }
            let mut cfg = cfg;
            if let Some(z) = z {
                cfg.embedding.z = z;
            }
            let embedder = cfg.embedding.provider()?;
            let report = train_model(&set, embedder.as_ref(), &cfg, &sha256_hex(&bytes))?;
            report.model.save(&out)?;
            let m = &report.model;
            let constraint = report.constraint.as_ref().map(|c| {
                json!({"rho": c.rho, "post_check": c.check, "passed": c.check.passed(), "unsafe_samples": c.n_unsafe})
            });
            emit(
                cli.json,
                &json!({
                    "out": out, "tasks": m.example_texts.len(), "z": m.z(), "s": m.s(), "p": m.p(),
                    "loss_tail": m.provenance.loss_curve_tail, "constraint": constraint,
                }),
                || {
                    let mut s = format!(
                        "trained on {} sub-tasks (z = {}, s = {}, p = {}); final loss {:.6e}\nwrote {}",
                        m.example_texts.len(),
                        m.z(),
                        m.s(),
                        m.p(),
                        report.loss_curve.last().copied().unwrap_or(f64::NAN),
                        out.display()
                    );
                    if let Some(c) = &report.constraint {
                        s.push_str(&format!(
                            "\nconstraint {:?}: post-check {} ({} unsafe samples)",
                            c.rho,
                            if c.check.passed() { "passed" } else { "FAILED" },
                            c.n_unsafe
                        ));
                    }
                    s
                },
            );
        }
        Command::ValidateSubtask { model, text, threshold } => {
            let (m, embedder) = load_model(&model, &cfg)?;
            let t = threshold.unwrap_or(cfg.validation.threshold);
            let c = m.coverage_gate()?.evaluate(&embedder.embed_one(&text)?.values)?;
            let pass = c.coverage <= t && c.residual <= cfg.validation.residual;
            let verdict = if pass { "pass" } else { "fail" };
            emit(
                cli.json,
                &json!({"text": text, "coverage": c.coverage, "residual": c.residual, "threshold": t, "verdict": verdict}),
                || format!("coverage {:.4}  residual {:.4}  threshold {t}  verdict {verdict}", c.coverage, c.residual),
            );
        }
        Command::Run {
            model,
            command,
            episode,
            out,
        } => {
            let (m, embedder, cfg) = learned_pipeline_parts(&cfg, &model, &episode)?;
            let planner = make_planner(&cfg.planner);
            let designer = LearnedDesigner {
                model: &m,
                embedder: embedder.as_ref(),
            };
            let gate = m.coverage_gate()?;
            let pipe = Pipeline {
                planner: planner.as_ref(),
                designer: &designer,
                embedder: embedder.as_ref(),
                gate: &gate,
                sim: &cfg.sim,
                solver: &cfg.solver,
                validation: &cfg.validation,
                execution: &cfg.execution,
            };
            let scene = spawn_scene(cfg.demos.layout, episode.seed.unwrap_or(cfg.benchmark.seed), &cfg.sim);
            let ep = pipe.run(&command, &scene)?;
            if let Some(path) = &out {
                write_jsonl(std::slice::from_ref(&ep), path)?;
            }
            let attempts = ep.planning.as_ref().map(|p| p.attempts().len()).unwrap_or(0);
            emit(
                cli.json,
                &json!({
                    "command": ep.command, "status": ep.status, "attempts": attempts, "plan": ep.plan(),
                    "collisions": ep.collisions.len(), "frames": ep.frames.len(), "failure": ep.failure,
                    "final_scene": ep.final_scene(),
                }),
                || {
                    format!(
                        "{:?} after {attempts} planner attempt(s); {} steps simulated, {} collision event(s)",
                        ep.status,
                        ep.frames.len() - 1,
                        ep.collisions.len()
                    )
                },
            );
        }
        Command::Benchmark {
            model,
            task,
            runs,
            episode,
            episodes_out,
        } => {
            let (m, embedder, cfg) = learned_pipeline_parts(&cfg, &model, &episode)?;
            let planner = make_planner(&cfg.planner);
            let designer = LearnedDesigner {
                model: &m,
                embedder: embedder.as_ref(),
            };
            let gate = m.coverage_gate()?;
            let pipe = Pipeline {
                planner: planner.as_ref(),
                designer: &designer,
                embedder: embedder.as_ref(),
                gate: &gate,
                sim: &cfg.sim,
                solver: &cfg.solver,
                validation: &cfg.validation,
                execution: &cfg.execution,
            };
            let runs = runs.unwrap_or(cfg.benchmark.runs);
            let seed = episode.seed.unwrap_or(cfg.benchmark.seed);
            let (report, episodes) = run_benchmark(task, runs, seed, &pipe, &cfg.oracle(), &cfg)?;
            if let Some(path) = &episodes_out {
                write_jsonl(&episodes, path)?;
            }
            emit(cli.json, &serde_json::to_value(&report)?, || {
                format!(
                    "{task}: {} runs  SR {:.1}%  TP {:.1}%  OD {:.1}%  CO {:.1}%",
                    report.runs, report.sr, report.tp, report.od, report.co
                )
            });
        }
        Command::Serve { model, host, port } => {
            let (m, embedder) = load_model(&model, &cfg)?;
            let host = host.unwrap_or_else(|| cfg.server.host.clone());
            let port = port.unwrap_or(cfg.server.port);
            let state = AppState::new(cfg, m, embedder)?;
            tokio::runtime::Runtime::new()?.block_on(serve(state, &host, port))?;
        }
    }
    Ok(())
}

fn main() -> ExitCode {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("warn")).init();
    let cli = Cli::parse();
    let as_json = cli.json;
    match run(cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            if as_json {
                println!("{}", json!({ "error": format!("{e:#}") }));
            }
            eprintln!("error: {e:#}");
            ExitCode::FAILURE
        }
    }
}
