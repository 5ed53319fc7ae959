use std::path::PathBuf;
use std::process::ExitCode;

use clap::{error::ErrorKind, Args, Parser, Subcommand};
use uapath_cli::commands::{cmd_distill, cmd_eval, cmd_export, cmd_finetune, cmd_mil, cmd_pretrain, cmd_ualoop};
use uapath_cli::config::split_override;
use uapath_cli::report::cmd_report;
use uapath_cli::{CliError, CliResult, RunConfig};

/// Uncertainty-aware patch classification and MIL pipeline.
///
/// Any config key can be overridden with `--section.key=value`, e.g.
/// `--finetune.label_fraction=0.01`; such flags win over the config file.
#[derive(Parser)]
#[command(name = "uapath", version)]
struct Cli {
    #[command(subcommand)]
    cmd: Cmd,
}

#[derive(Args, Clone)]
struct Common {
    /// TOML run configuration.
    #[arg(long)]
    config: Option<PathBuf>,
    #[arg(long)]
    seed: Option<u64>,
    /// Run directory; stage outputs go to `<out>/<stage>/`.
    #[arg(long)]
    out: Option<PathBuf>,
    /// Config override, repeatable.
    #[arg(long = "set", value_name = "KEY=VALUE")]
    set: Vec<String>,
}

#[derive(Args)]
struct Source {
    /// Finished stage to read the checkpoint from (default: newest).
    #[arg(long)]
    stage: Option<String>,
    /// Explicit checkpoint file.
    #[arg(long)]
    checkpoint: Option<PathBuf>,
    #[arg(long, default_value = "test")]
    split: String,
}

#[derive(Subcommand)]
enum Cmd {
    /// Contrastive pretraining of the encoder.
    Pretrain(Common),
    /// Fine-tune a classifier head on a labeled fraction.
    Finetune {
        #[command(flatten)]
        common: Common,
        /// Pretrained checkpoint instead of `<out>/pretrain/model.ckpt`.
        #[arg(long)]
        from: Option<PathBuf>,
    },
    /// Distill the fine-tuned teacher into a student.
    Distill {
        #[command(flatten)]
        common: Common,
        #[arg(long)]
        from: Option<PathBuf>,
    },
    /// Uncertainty-driven (or random) label acquisition rounds.
    Ualoop {
        #[command(flatten)]
        common: Common,
        #[arg(long)]
        from: Option<PathBuf>,
    },
    /// Double-tier attention MIL on bags.
    Mil {
        #[command(flatten)]
        common: Common,
        /// Encoder checkpoint for `mil.source = "encoder"`.
        #[arg(long)]
        checkpoint: Option<PathBuf>,
    },
    /// Metrics, predictions and uncertainty histogram on one split.
    Eval {
        #[command(flatten)]
        common: Common,
        #[command(flatten)]
        source: Source,
    },
    /// Embeddings as TSV, optionally with two PCA columns.
    Export {
        #[command(flatten)]
        common: Common,
        #[command(flatten)]
        source: Source,
        #[arg(long)]
        pca: bool,
    },
    /// Print the effective configuration after overrides, as TOML.
    Config(Common),
    /// Mean ± sd over every finished run below a directory.
    Report {
        #[command(flatten)]
        common: Common,
        root: PathBuf,
    },
}

/// Pulls `--a.b=value` tokens out of the arguments; clap sees the rest.
fn split_dotted(args: Vec<String>) -> (Vec<String>, Vec<String>) {
    let (dotted, rest) = args.into_iter().partition(|a| {
        a.strip_prefix("--")
            .and_then(|rest| rest.split_once('='))
            .is_some_and(|(k, _)| k.contains('.'))
    });
    (rest, dotted)
}

fn load(common: &Common, dotted: &[String]) -> CliResult<RunConfig> {
    let mut overrides = Vec::new();
    for d in dotted {
        overrides.push(split_override(&d[2..])?);
    }
    for s in &common.set {
        overrides.push(split_override(s)?);
    }
    let mut cfg = RunConfig::load(common.config.as_deref(), &overrides)?;
    if let Some(s) = common.seed {
        cfg.seed = s;
    }
    if let Some(o) = &common.out {
        cfg.out = o.clone();
    }
    Ok(cfg)
}

fn init_threads() -> CliResult<()> {
    if let Ok(v) = std::env::var("UAPATH_THREADS") {
        let n: usize = v
            .parse()
            .ok()
            .filter(|&n| n > 0)
            .ok_or_else(|| CliError::new("E_ARG", format!("UAPATH_THREADS must be a positive integer, got `{v}`")))?;
        rayon::ThreadPoolBuilder::new()
            .num_threads(n)
            .build_global()
            .map_err(|e| CliError::new("E_ARG", e.to_string()))?;
    }
    Ok(())
}

fn run(cli: Cli, dotted: &[String]) -> CliResult<Option<PathBuf>> {
    init_threads()?;
    let done = match cli.cmd {
        Cmd::Config(c) => {
            let cfg = load(&c, dotted)?;
            let text = toml::to_string(&cfg).map_err(|e| CliError::new("E_CONFIG", e.to_string()))?;
            print!("{text}");
            return Ok(None);
        }
        Cmd::Pretrain(c) => cmd_pretrain(&load(&c, dotted)?),
        Cmd::Finetune { common, from } => cmd_finetune(&load(&common, dotted)?, from.as_deref()),
        Cmd::Distill { common, from } => cmd_distill(&load(&common, dotted)?, from.as_deref()),
        Cmd::Ualoop { common, from } => cmd_ualoop(&load(&common, dotted)?, from.as_deref()),
        Cmd::Mil { common, checkpoint } => cmd_mil(&load(&common, dotted)?, checkpoint.as_deref()),
        Cmd::Eval { common, source } => cmd_eval(
            &load(&common, dotted)?,
            source.stage.as_deref(),
            source.checkpoint.as_deref(),
            &source.split,
        ),
        Cmd::Export { common, source, pca } => cmd_export(
            &load(&common, dotted)?,
            source.stage.as_deref(),
            source.checkpoint.as_deref(),
            &source.split,
            pca,
        ),
        Cmd::Report { common, root } => {
            load(&common, dotted)?;
            cmd_report(&root, common.out.as_deref())
        }
    };
    done.map(Some)
}

fn main() -> ExitCode {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("warn")).init();
    let (args, dotted) = split_dotted(std::env::args().collect());
    let cli = match Cli::try_parse_from(args) {
        Ok(c) => c,
        Err(e) if matches!(e.kind(), ErrorKind::DisplayHelp | ErrorKind::DisplayVersion) => e.exit(),
        Err(e) if e.kind() == ErrorKind::DisplayHelpOnMissingArgumentOrSubcommand => e.exit(),
        Err(e) => {
            let msg = e.to_string();
            let first = msg.lines().next().unwrap_or("").trim_start_matches("error: ");
            eprintln!("{}", CliError::new("E_ARG", first).line());
            return ExitCode::from(2);
        }
    };
    match run(cli, &dotted) {
        Ok(path) => {
            if let Some(p) = path {
                println!("{}", p.display());
            }
            ExitCode::SUCCESS
        }
        Err(e) => {
            eprintln!("{}", e.line());
            ExitCode::FAILURE
        }
    }
}
