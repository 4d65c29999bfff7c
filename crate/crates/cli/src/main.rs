mod pipeline;

use std::path::PathBuf;
use std::process::ExitCode;
use std::sync::Arc;

use anyhow::Context;
use clap::{Args, Parser, Subcommand};
use discover::config::{RunConfig, Stage};

use pipeline::{Pipeline, RunLock};

/// Train and interpret a binary image classifier through a disentangled
/// latent space.
#[derive(Parser)]
#[command(name = "discover", version)]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Args, Clone)]
struct Common {
    /// Run configuration (JSON).
    #[arg(long, short)]
    config: PathBuf,
    /// Override the configured seed.
    #[arg(long)]
    seed: Option<u64>,
    /// Override the configured artifact directory.
    #[arg(long)]
    out: Option<PathBuf>,
    /// Rerun even when outputs are current, and accept inputs produced under
    /// a different configuration.
    #[arg(long)]
    force: bool,
}

#[derive(Subcommand)]
enum Command {
    /// Split, preprocess and archive the dataset.
    Ingest(Common),
    /// Fine-tune the classifier and evaluate it on the test split.
    TrainClf(Common),
    /// Train the interpreter against the frozen classifier.
    TrainDiscover(Common),
    /// Rank latent features and write counterfactual montages.
    Interpret(Common),
    /// Run every stage in order.
    All(Common),
    /// Run a single named stage.
    Run {
        #[arg(long, value_parser = parse_stage)]
        stage: Stage,
        #[command(flatten)]
        common: Common,
    },
    /// Serve the HTTP API over a finished run.
    Serve {
        #[command(flatten)]
        common: Common,
        #[arg(long)]
        host: Option<String>,
        #[arg(long)]
        port: Option<u16>,
    },
    /// Print a small synthetic configuration to start from.
    ExampleConfig {
        #[arg(long, default_value = "runs/synthetic")]
        out: PathBuf,
    },
}

fn parse_stage(s: &str) -> Result<Stage, String> {
    Stage::ALL
        .into_iter()
        .find(|st| st.name() == s)
        .ok_or_else(|| {
            let names: Vec<&str> = Stage::ALL.iter().map(|s| s.name()).collect();
            format!("unknown stage {s:?}; expected one of {}", names.join(", "))
        })
}

fn load(common: &Common) -> anyhow::Result<RunConfig> {
    let mut cfg = RunConfig::load(&common.config)?;
    if let Some(seed) = common.seed {
        cfg.seed = seed;
    }
    if let Some(out) = &common.out {
        cfg.artifact_dir = out.clone();
    }
    Ok(cfg)
}

fn run_stages(common: &Common, stages: &[Stage]) -> anyhow::Result<()> {
    let cfg = load(common)?;
    let pipeline = Pipeline::new(cfg, common.force);
    let _lock = RunLock::acquire(&pipeline.layout)?;
    for &stage in stages {
        pipeline
            .run(stage)
            .with_context(|| format!("stage {} failed", stage.name()))?;
    }
    Ok(())
}

fn example_config(out: PathBuf) -> String {
    let json = serde_json::json!({
        "version": discover::config::CONFIG_VERSION,
        "seed": 7,
        "artifact_dir": out,
        "ingest": {
            "name": "synthetic-ellipses",
            "source": {
                "kind": "synthetic",
                "class0_aspect": {"lo": 1.8, "hi": 2.5},
                "class1_aspect": {"lo": 0.4, "hi": 0.55},
                "radius": {"lo": 12.0, "hi": 12.0},
                "offset": {"lo": -6.0, "hi": 6.0},
                "brightness": {"lo": 0.6, "hi": 1.0},
                "n_per_class": 250
            },
            "split": {"train_per_class": 200, "test_per_class": 50}
        },
        "classifier": {"backbone": "small_cnn", "epochs": 12, "learning_rate": 0.002},
        "discover": {"latent_dim": 16, "subset_size": 1, "epochs": 40}
    });
    serde_json::to_string_pretty(&json).expect("literal serializes")
}

fn serve(common: &Common, host: Option<String>, port: Option<u16>) -> anyhow::Result<()> {
    let mut cfg = load(common)?;
    if let Some(h) = host {
        cfg.serve.host = h;
    }
    if let Some(p) = port {
        cfg.serve.port = p;
    }
    let session = discover_service::Session::load(&cfg.layout(), &cfg.interpret)
        .context("cannot load the run; complete every stage first")?;
    let runtime = tokio::runtime::Runtime::new()?;
    runtime.block_on(discover_service::serve(Some(Arc::new(session)), &cfg.serve))?;
    Ok(())
}

fn dispatch(cli: Cli) -> anyhow::Result<()> {
    match cli.command {
        Command::Ingest(c) => run_stages(&c, &[Stage::Ingest]),
        Command::TrainClf(c) => run_stages(&c, &[Stage::TrainClassifier]),
        Command::TrainDiscover(c) => run_stages(&c, &[Stage::TrainDiscover]),
        Command::Interpret(c) => run_stages(&c, &[Stage::Interpret]),
        Command::All(c) => run_stages(&c, &Stage::ALL),
        Command::Run { stage, common } => run_stages(&common, &[stage]),
        Command::Serve { common, host, port } => serve(&common, host, port),
        Command::ExampleConfig { out } => {
            println!("{}", example_config(out));
            Ok(())
        }
    }
}

/// 2 for configuration errors, 3 for data-contract errors, 4 for divergence.
fn exit_code(err: &anyhow::Error) -> u8 {
    err.chain()
        .find_map(|e| e.downcast_ref::<discover::Error>())
        .map_or(1, |e| e.exit_code() as u8)
}

fn main() -> ExitCode {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("info")).init();
    let cli = Cli::parse();
    match dispatch(cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e:#}");
            ExitCode::from(exit_code(&e))
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn example_config_is_valid() {
        let cfg = RunConfig::from_json(&example_config("x".into())).unwrap();
        assert_eq!(cfg.discover.latent_dim, 16);
    }

    #[test]
    fn stage_names_parse() {
        for s in Stage::ALL {
            assert_eq!(parse_stage(s.name()).unwrap(), s);
        }
        assert!(parse_stage("fit").is_err());
    }

    #[test]
    fn exit_codes_follow_the_error_kind() {
        let e = anyhow::Error::new(discover::Error::Config("x".into())).context("outer");
        assert_eq!(exit_code(&e), 2);
        let e = anyhow::Error::new(discover::Error::Divergence {
            term: "t".into(),
            value: f64::NAN,
        });
        assert_eq!(exit_code(&e), 4);
        assert_eq!(exit_code(&anyhow::anyhow!("plain")), 1);
    }
}
