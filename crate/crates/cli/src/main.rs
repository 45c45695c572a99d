use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand, ValueEnum};
use tabsynth::error::{Error, Result};
use tabsynth::exec::{self, Mode};
use tabsynth::pipeline::{
    evaluate_file, load_synthetic, run_adversarial_stage, run_all, run_audit_stage, run_data_stage, run_generate_stage,
    run_sft_stage, RunConfig,
};

#[derive(Parser)]
#[command(name = "tabsynth", version, about = "Adversarial PPO tabular data synthesis")]
struct Cli {
    #[command(flatten)]
    opts: Opts,
    #[command(subcommand)]
    cmd: Cmd,
}

#[derive(Args)]
struct Opts {
    /// TOML run configuration; the toy preset when omitted.
    #[arg(long, global = true)]
    config: Option<PathBuf>,
    /// Master seed.
    #[arg(long, global = true)]
    seed: Option<u64>,
    #[arg(long, global = true)]
    output_dir: Option<PathBuf>,
    /// Original CSV; the toy table when omitted.
    #[arg(long, global = true)]
    data: Option<PathBuf>,
    /// Target column of `--data`.
    #[arg(long, global = true)]
    target: Option<String>,
    /// Synthetic rows to generate.
    #[arg(long, global = true)]
    k: Option<usize>,
    #[arg(long, global = true)]
    rounds: Option<usize>,
    #[arg(long, global = true)]
    beta: Option<f64>,
    #[arg(long, global = true)]
    temperature: Option<f64>,
    #[arg(long, global = true)]
    top_p: Option<f64>,
    #[arg(long, global = true)]
    sft_epochs: Option<usize>,
    /// Audit backend: "echo", an http(s) URL, or "cmd:<program args>".
    #[arg(long, global = true, env = "TABSYNTH_BACKEND_ENDPOINT")]
    backend: Option<String>,
    /// Run every data-parallel loop on one thread.
    #[arg(long, global = true)]
    sequential: bool,
    /// Print the resolved configuration and exit.
    #[arg(long, global = true)]
    print_config: bool,
}

#[derive(Clone, Copy, ValueEnum)]
enum Source {
    Sft,
    Ppo,
}

#[derive(Subcommand)]
enum Cmd {
    /// Split the data and fit the SFT policy.
    Fit,
    /// Adversarial PPO rounds from the SFT policy.
    PpoTrain,
    /// Sample the synthetic table.
    Generate {
        #[arg(long, value_enum, default_value = "ppo")]
        from: Source,
    },
    /// Score a synthetic table against the original.
    Evaluate {
        /// Synthetic CSV; the generated table when omitted.
        #[arg(long)]
        synthetic: Option<PathBuf>,
    },
    /// Explain feature values of synthetic rows.
    Audit {
        #[arg(long)]
        synthetic: Option<PathBuf>,
        /// Rows to explain.
        #[arg(long)]
        rows: Option<usize>,
        /// Feature to explain; the target by default.
        #[arg(long)]
        feature: Option<String>,
    },
    /// Every stage; the audit only with `--audit`.
    All {
        #[arg(long)]
        audit: bool,
    },
}

fn config(o: &Opts) -> Result<RunConfig> {
    let mut c = match &o.config {
        Some(p) => RunConfig::load(p)?,
        None => RunConfig::toy(),
    };
    if let Some(v) = o.seed {
        c.seed = v;
    }
    if let Some(v) = &o.output_dir {
        c.output_dir = v.clone();
    }
    if let Some(v) = &o.data {
        c.data.path = Some(v.clone());
    }
    if let Some(v) = &o.target {
        c.data.target = Some(v.clone());
    }
    if let Some(v) = o.k {
        c.generate.k = v;
    }
    if let Some(v) = o.rounds {
        c.ppo.rounds_max = v;
    }
    if let Some(v) = o.beta {
        c.ppo.beta = v;
    }
    if let Some(v) = o.temperature {
        c.sampler.temperature = v;
    }
    if let Some(v) = o.top_p {
        c.sampler.top_p = v;
    }
    if let Some(v) = o.sft_epochs {
        c.sft.epochs = v;
    }
    if let Some(v) = &o.backend {
        c.audit.backend.endpoint = v.clone();
    }
    c.validate()?;
    Ok(c)
}

fn run(cli: Cli) -> Result<()> {
    if cli.opts.sequential {
        exec::set_mode(Mode::Sequential);
    }
    let mut cfg = config(&cli.opts)?;
    if cli.opts.print_config {
        print!("{}", cfg.to_toml()?);
        return Ok(());
    }
    let say = |what: &str, dir: &std::path::Path| println!("{what}: {}", dir.display());
    match cli.cmd {
        Cmd::Fit => {
            let data = run_data_stage(&cfg)?;
            let sft = run_sft_stage(&cfg, &data)?;
            say("sft", &sft.stage.dir);
        }
        Cmd::PpoTrain => {
            let data = run_data_stage(&cfg)?;
            let sft = run_sft_stage(&cfg, &data)?;
            let adv = run_adversarial_stage(&cfg, &data, &sft)?;
            let last = adv.outcome.history.last().map(|r| r.disc_accuracy);
            println!(
                "rounds: {}  converged: {}  final discriminator accuracy: {}",
                adv.outcome.history.len(),
                adv.outcome.converged,
                last.map_or("n/a".into(), |a| format!("{a:.4}"))
            );
            say("adversarial", &adv.stage.dir);
        }
        Cmd::Generate { from } => {
            let data = run_data_stage(&cfg)?;
            let sft = run_sft_stage(&cfg, &data)?;
            let g = match from {
                Source::Sft => run_generate_stage(&cfg, &data.train.schema, &sft.policy, &sft.stage)?,
                Source::Ppo => {
                    let adv = run_adversarial_stage(&cfg, &data, &sft)?;
                    run_generate_stage(&cfg, &data.train.schema, &adv.policy, &adv.stage)?
                }
            };
            println!(
                "collected {} rows in {} attempts (parse failures {:.1}%)",
                g.report.collected,
                g.report.attempts,
                100.0 * g.report.parse_failure_rate
            );
            say("synthetic", &g.csv_path);
        }
        Cmd::Evaluate { synthetic } => {
            let data = run_data_stage(&cfg)?;
            let e = match synthetic {
                Some(p) => evaluate_file(&cfg, &data, &p)?,
                None => {
                    let out = run_all(&cfg, false)?;
                    out.evaluation
                }
            };
            print!("{}", e.report.to_text());
            say("report", &e.stage.dir);
        }
        Cmd::Audit {
            synthetic,
            rows,
            feature,
        } => {
            if let Some(n) = rows {
                cfg.audit.rows = n;
            }
            if feature.is_some() {
                cfg.audit.feature = feature;
            }
            let data = run_data_stage(&cfg)?;
            let (table, upstream) = match synthetic {
                Some(p) => {
                    let t = load_synthetic(&p, &data.train.schema)?;
                    (t, p.display().to_string())
                }
                None => {
                    let out = run_all(&cfg, false)?;
                    (out.generated.table, out.generated.stage.hash)
                }
            };
            let a = run_audit_stage(&cfg, &data, &table, &upstream)?;
            let flagged = a.explanations.iter().filter(|e| e.flagged()).count();
            println!("explained {} rows, {} flagged", a.explanations.len(), flagged);
            say("audit", &a.stage.dir);
        }
        Cmd::All { audit } => {
            let out = run_all(&cfg, audit)?;
            print!("{}", out.evaluation.report.to_text());
            say("synthetic", &out.generated.csv_path);
            say("report", &out.evaluation.stage.dir);
            if let Some(a) = &out.audit {
                say("audit", &a.stage.dir);
            }
        }
    }
    Ok(())
}

fn main() -> ExitCode {
    match run(Cli::parse()) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::from(exit_code(&e))
        }
    }
}

fn exit_code(e: &Error) -> u8 {
    if e.is_validation() {
        2
    } else {
        3
    }
}
