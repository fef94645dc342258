use std::path::PathBuf;
use std::process::ExitCode;

use avsr_core::config::RunConfig;
use avsr_core::corpus::{generate_corpus, CorpusSpec, Grammar, ProfileConfig};
use avsr_core::formats::write_file;
use avsr_core::pipeline::{Split, Workspace};
use avsr_core::trainer::{AudioCondition, FusionKind, Stage};
use avsr_core::Error;
use clap::{Args, Parser, Subcommand, ValueEnum};

#[derive(Parser)]
#[command(name = "avsr", version, about = "Audio-visual CTC speech recognition on a synthetic corpus")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Args)]
struct ConfigArgs {
    /// run configuration (`key = value` lines)
    #[arg(long, short)]
    config: PathBuf,
    /// override a configuration value, e.g. `--set am_lr=0.002`
    #[arg(long = "set", value_name = "KEY=VALUE", value_parser = parse_override)]
    overrides: Vec<(String, String)>,
}

#[derive(Subcommand)]
enum Command {
    /// Render a synthetic corpus with train/cv/test manifests
    GenCorpus {
        #[arg(long)]
        n: usize,
        #[arg(long, default_value_t = 1)]
        seed: u64,
        #[arg(long)]
        out: PathBuf,
        #[arg(long, default_value_t = 8)]
        audio_dim: usize,
        #[arg(long, default_value_t = 6)]
        video_dim: usize,
    },
    /// Train one stage (am, bn, lip or fusion)
    Train {
        stage: StageArg,
        #[command(flatten)]
        config: ConfigArgs,
    },
    /// Recompute bottleneck features with the trained bottleneck network
    ExtractBn {
        #[command(flatten)]
        config: ConfigArgs,
    },
    /// Choose the decision-fusion bias on the cv split
    TuneBias {
        #[command(flatten)]
        config: ConfigArgs,
    },
    /// Decode one split under one condition
    Decode {
        #[command(flatten)]
        config: ConfigArgs,
        #[arg(long, value_enum, default_value_t = ModelArg::Feature)]
        model: ModelArg,
        #[arg(long, default_value = "test")]
        split: String,
        /// `clean`, an SNR in dB, or `off`
        #[arg(long, default_value = "clean")]
        audio: String,
        #[arg(long, value_enum, default_value_t = Switch::On)]
        visual: Switch,
        /// output file (standard output if omitted)
        #[arg(long)]
        out: Option<PathBuf>,
    },
    /// Decode the test split under every condition and write the results table
    Evaluate {
        #[command(flatten)]
        config: ConfigArgs,
    },
}

#[derive(Clone, Copy, ValueEnum)]
enum StageArg {
    Am,
    Bn,
    Lip,
    Fusion,
}

impl From<StageArg> for Stage {
    fn from(s: StageArg) -> Self {
        match s {
            StageArg::Am => Stage::Am,
            StageArg::Bn => Stage::Bn,
            StageArg::Lip => Stage::Lip,
            StageArg::Fusion => Stage::Fusion,
        }
    }
}

#[derive(Clone, Copy, ValueEnum)]
enum ModelArg {
    /// the feature-fusion model
    Feature,
    /// acoustic and lip models combined per frame
    Decision,
}

#[derive(Clone, Copy, PartialEq, Eq, ValueEnum)]
enum Switch {
    On,
    Off,
}

fn parse_override(s: &str) -> Result<(String, String), String> {
    s.split_once('=')
        .map(|(k, v)| (k.to_string(), v.to_string()))
        .ok_or_else(|| format!("expected KEY=VALUE, got `{s}`"))
}

fn workspace(args: &ConfigArgs) -> avsr_core::Result<Workspace> {
    Workspace::open(RunConfig::load(&args.config, &args.overrides)?)
}

fn run(cli: Cli) -> avsr_core::Result<()> {
    match cli.command {
        Command::GenCorpus {
            n,
            seed,
            out,
            audio_dim,
            video_dim,
        } => {
            let spec = CorpusSpec {
                utterances: n,
                seed,
                profile: ProfileConfig {
                    audio_dim,
                    video_dim,
                    ..ProfileConfig::default()
                },
            };
            let m = generate_corpus(&spec, &Grammar::default(), &out)?;
            println!("train {} / cv {} / test {} utterances in {}", m.train.len(), m.cv.len(), m.test.len(), out.display());
        }
        Command::Train { stage, config } => {
            let ws = workspace(&config)?;
            let stage = Stage::from(stage);
            let reports = ws.train(stage)?;
            if let Some(last) = reports.last() {
                println!(
                    "{stage}: {} epochs, cv accuracy {:.2}%, model {}",
                    reports.len(),
                    last.cv_accuracy,
                    ws.model_path(stage).display()
                );
            }
        }
        Command::ExtractBn { config } => {
            let n = workspace(&config)?.extract_bn()?;
            println!("bottleneck features written for {n} utterances");
        }
        Command::TuneBias { config } => {
            let (best, table) = workspace(&config)?.tune_bias()?;
            for (b, c) in table {
                println!("{b}\t{c:.2}");
            }
            println!("selected bias {best}");
        }
        Command::Decode {
            config,
            model,
            split,
            audio,
            visual,
            out,
        } => {
            let ws = workspace(&config)?;
            let split: Split = split.parse()?;
            let audio = if audio.eq_ignore_ascii_case("off") {
                AudioCondition::Off
            } else {
                audio.parse()?
            };
            let kind = match model {
                ModelArg::Feature => FusionKind::Feature,
                ModelArg::Decision => FusionKind::Decision,
            };
            let lines = ws.decode(kind, split, audio, visual == Switch::On)?;
            let text: String = lines.iter().map(|l| format!("{l}\n")).collect();
            match out {
                Some(path) => write_file(&path, text.as_bytes())?,
                None => print!("{text}"),
            }
        }
        Command::Evaluate { config } => {
            let table = workspace(&config)?.evaluate()?;
            print!("{}", table.render());
        }
    }
    Ok(())
}

fn exit_code(e: &Error) -> u8 {
    match e {
        Error::Config(_) | Error::InvalidArgument(_) => 1,
        Error::MissingStage { .. } => 2,
        _ => 3,
    }
}

fn main() -> ExitCode {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("info")).init();
    let cli = match Cli::try_parse() {
        Ok(cli) => cli,
        Err(e) if !e.use_stderr() => {
            print!("{e}");
            return ExitCode::SUCCESS;
        }
        Err(e) => {
            let msg = e.to_string();
            eprintln!("{}", msg.lines().next().unwrap_or("invalid arguments"));
            return ExitCode::from(1);
        }
    };
    match run(cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::from(exit_code(&e))
        }
    }
}
