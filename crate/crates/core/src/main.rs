use std::path::{Path, PathBuf};
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand};

use vcforge::cli::{
    cmd_bounds, cmd_convert, cmd_eval, cmd_synth_dataset, cmd_train, parse_speaker_list, read_config, split_config,
    CliError,
};
use vcforge::config::KvConfig;
use vcforge::train::TrainConfig;

#[derive(Parser)]
#[command(name = "vcforge", version, about = "Adversarial autoencoder voice conversion")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Args)]
struct Common {
    /// key=value file; a run manifest repeats that run
    #[arg(long)]
    config: Option<PathBuf>,
    #[arg(long)]
    seed: Option<u64>,
    #[arg(long)]
    out: Option<PathBuf>,
}

#[derive(Subcommand)]
enum Command {
    /// Generate a synthetic multi-speaker corpus
    SynthData {
        #[command(flatten)]
        common: Common,
        /// Comma-separated id:f0 pairs
        #[arg(long)]
        speakers: Option<String>,
        #[arg(long)]
        utterances: Option<usize>,
        #[arg(long)]
        seconds: Option<f64>,
    },
    /// Train on an indexed corpus
    Train {
        #[command(flatten)]
        common: Common,
        #[arg(long)]
        data: Option<PathBuf>,
        #[arg(long)]
        steps: Option<u64>,
        #[arg(long)]
        lambda_adv: Option<f64>,
        #[arg(long)]
        batch_size: Option<usize>,
        /// Print progress every N rounds (0 = quiet)
        #[arg(long, default_value_t = 500)]
        progress: u64,
    },
    /// Convert one WAV to a trained speaker's voice
    Convert {
        #[command(flatten)]
        common: Common,
        #[arg(long)]
        checkpoint: Option<PathBuf>,
        #[arg(long)]
        input: Option<PathBuf>,
        #[arg(long)]
        target: Option<String>,
        /// Also write the converted mel spectrogram as a VCT1 tensor
        #[arg(long)]
        dump_mel: Option<PathBuf>,
    },
    /// Evaluate a checkpoint on an indexed corpus
    Eval {
        #[command(flatten)]
        common: Common,
        #[arg(long)]
        checkpoint: Option<PathBuf>,
        #[arg(long)]
        data: Option<PathBuf>,
    },
    /// Tabulate the mutual-information bounds
    Bounds {
        #[command(flatten)]
        common: Common,
        #[arg(long)]
        classes: Option<usize>,
        #[arg(long)]
        grid_points: Option<usize>,
    },
}

/// Flag value, else config value, else `default`.
struct Resolver {
    run: KvConfig,
    rest: KvConfig,
}

impl Resolver {
    fn new(config: Option<&Path>, command: &str) -> Result<Self, CliError> {
        let kv = match config {
            Some(path) => read_config(path)?,
            None => KvConfig::new(),
        };
        let (run, rest) = split_config(&kv, command)?;
        Ok(Self { run, rest })
    }

    fn path(&self, flag: Option<PathBuf>, key: &str) -> Result<PathBuf, CliError> {
        flag.or_else(|| self.run.get(key).map(PathBuf::from))
            .ok_or_else(|| CliError::Validation(format!("missing --{}", key.replace('_', "-"))))
    }

    fn value<T: std::str::FromStr>(&self, flag: Option<T>, key: &str, default: T) -> Result<T, CliError> {
        if let Some(v) = flag {
            return Ok(v);
        }
        let mut slot = default;
        self.run.parse_into(key, &mut slot)?;
        Ok(slot)
    }

    fn seed(&self, flag: Option<u64>) -> Result<u64, CliError> {
        let mut seed = 0;
        self.rest.parse_into("seed", &mut seed)?;
        Ok(flag.unwrap_or(seed))
    }

    /// Config keys that are not run keys must be absent for commands
    /// that take none.
    fn no_extra_keys(&self) -> Result<(), CliError> {
        match self.rest.keys().find(|k| *k != "seed") {
            Some(k) => Err(CliError::Validation(format!("unexpected config key {k:?}"))),
            None => Ok(()),
        }
    }
}

fn run(cli: Cli) -> Result<(), CliError> {
    match cli.command {
        Command::SynthData {
            common,
            speakers,
            utterances,
            seconds,
        } => {
            let r = Resolver::new(common.config.as_deref(), "synth-data")?;
            let out = r.path(common.out, "out")?;
            let mut seconds_default = 3.0;
            r.rest.parse_into("utterance_seconds", &mut seconds_default)?;
            let seconds = seconds.unwrap_or(seconds_default);
            let speakers = r.value(speakers, "speakers", "m:120,f:240".to_string())?;
            let utterances = r.value(utterances, "utterances_per_speaker", 10)?;
            if let Some(k) = r.rest.keys().find(|k| !["seed", "utterance_seconds"].contains(k)) {
                return Err(CliError::Validation(format!("unexpected config key {k:?}")));
            }
            let specs = parse_speaker_list(&speakers, seconds)?;
            let entries = cmd_synth_dataset(&specs, utterances, &out, r.seed(common.seed)?)?;
            println!("wrote {} files to {}", entries.len(), out.display());
        }
        Command::Train {
            common,
            data,
            steps,
            lambda_adv,
            batch_size,
            progress,
        } => {
            let r = Resolver::new(common.config.as_deref(), "train")?;
            let data = r.path(data, "data_dir")?;
            let out = r.path(common.out, "out")?;
            let mut kv = r.rest.clone();
            if let Some(v) = common.seed {
                kv.set("seed", v);
            }
            if let Some(v) = steps {
                kv.set("steps", v);
            }
            if let Some(v) = lambda_adv {
                kv.set("lambda_adv", v);
            }
            if let Some(v) = batch_size {
                kv.set("batch_size", v);
            }
            let config = TrainConfig::from_kv(&kv)?;
            let (_, log) = cmd_train(&data, &config, &out, |rec| {
                if progress > 0 && rec.step % progress == 0 {
                    eprintln!(
                        "step {:>6}  f_r {:.5}  f_c {:.4}  adv {:.4}  acc {:.2}",
                        rec.step, rec.reconstruction, rec.classifier_loss, rec.adversarial, rec.code_accuracy
                    );
                }
            })?;
            println!("trained {} rounds, checkpoint {}", log.records.len(), out.display());
        }
        Command::Convert {
            common,
            checkpoint,
            input,
            target,
            dump_mel,
        } => {
            let r = Resolver::new(common.config.as_deref(), "convert")?;
            r.no_extra_keys()?;
            let checkpoint = r.path(checkpoint, "checkpoint")?;
            let input = r.path(input, "input")?;
            let out = r.path(common.out, "out")?;
            let target = target
                .or_else(|| r.run.get("target").map(str::to_string))
                .ok_or_else(|| CliError::Validation("missing --target".into()))?;
            let dump = dump_mel.or_else(|| r.run.get("dump_mel").map(PathBuf::from));
            let audio = cmd_convert(&checkpoint, &input, &target, &out, r.seed(common.seed)?, dump.as_deref())?;
            println!("wrote {} samples to {}", audio.len(), out.display());
        }
        Command::Eval {
            common,
            checkpoint,
            data,
        } => {
            let r = Resolver::new(common.config.as_deref(), "eval")?;
            r.no_extra_keys()?;
            let checkpoint = r.path(checkpoint, "checkpoint")?;
            let data = r.path(data, "data_dir")?;
            let out = r.path(common.out, "out")?;
            let report = cmd_eval(&checkpoint, &data, &out, r.seed(common.seed)?)?;
            print!("{}", report.to_csv());
        }
        Command::Bounds {
            common,
            classes,
            grid_points,
        } => {
            let r = Resolver::new(common.config.as_deref(), "bounds")?;
            r.no_extra_keys()?;
            let out = r.path(common.out, "out")?;
            let classes = r.value(classes, "classes", 4)?;
            let grid_points = r.value(grid_points, "grid_points", 101)?;
            cmd_bounds(classes, grid_points, &out)?;
            println!("wrote {}", out.display());
        }
    }
    Ok(())
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    match run(cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::from(e.exit_code() as u8)
        }
    }
}
