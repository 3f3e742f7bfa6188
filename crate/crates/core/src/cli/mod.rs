//! Command implementations behind the `vcforge` binary, and the synthetic
//! corpus generator.
//!
//! A corpus directory holds WAV files and an `index.csv` with a
//! `path,speaker_id` header; paths are relative to the directory. Every
//! command writes a `key=value` manifest next to its main output; passing
//! that manifest back through `--config` repeats the run.

pub mod synth;

use std::fs;
use std::path::{Path, PathBuf};

use thiserror::Error;

use crate::analysis::{
    bounds_curve, evaluate_model, spectral_centroid_shift, AnalysisError, BoundsCurve, MetricsReport, PairShift,
};
use crate::audio_io::{load_wav, resample_linear, save_wav, write_atomic, AudioBuffer, AudioError};
use crate::autodiff::{AutodiffError, Tensor};
use crate::config::{ConfigError, KvConfig};
use crate::dsp::{DspError, FeatureExtractor, FeatureSettings, MelSpectrogram};
use crate::model::{ModelBundle, ModelError};
use crate::train::{
    load_checkpoint, save_checkpoint, train_loop_with, Checkpoint, Dataset, StepRecord, TrainConfig, TrainError,
    TrainLog,
};
use synth::{synth_utterance, utterance_seed, SynthSpeakerSpec};

pub const TOOL_VERSION: &str = env!("CARGO_PKG_VERSION");
pub const INDEX_FILE: &str = "index.csv";
pub const MANIFEST_FILE: &str = "manifest.txt";
pub const TENSOR_MAGIC: &[u8; 4] = b"VCT1";

#[derive(Debug, Error)]
pub enum CliError {
    #[error("{0}")]
    Validation(String),
    #[error(transparent)]
    Config(#[from] ConfigError),
    #[error(transparent)]
    Audio(#[from] AudioError),
    #[error(transparent)]
    Dsp(#[from] DspError),
    #[error(transparent)]
    Model(#[from] ModelError),
    #[error(transparent)]
    Train(#[from] TrainError),
    #[error(transparent)]
    Analysis(#[from] AnalysisError),
    #[error("i/o failure on {path}: {source}")]
    Io {
        path: PathBuf,
        source: std::io::Error,
    },
}

impl CliError {
    /// 2 for invalid user input, 1 for failures while running.
    pub fn exit_code(&self) -> i32 {
        match self {
            CliError::Validation(_) | CliError::Config(_) => 2,
            CliError::Model(ModelError::UnknownSpeaker(_)) => 2,
            CliError::Train(TrainError::Config(_)) => 2,
            CliError::Analysis(AnalysisError::OutOfRange { .. }) => 2,
            _ => 1,
        }
    }
}

fn io_err(path: &Path) -> impl FnOnce(std::io::Error) -> CliError + '_ {
    move |source| CliError::Io {
        path: path.to_path_buf(),
        source,
    }
}

fn write_file(path: &Path, bytes: &[u8]) -> Result<(), CliError> {
    if let Some(parent) = path.parent().filter(|p| !p.as_os_str().is_empty()) {
        fs::create_dir_all(parent).map_err(io_err(parent))?;
    }
    write_atomic(path, bytes).map_err(io_err(path))
}

/// `<path>.<suffix>` without replacing an existing extension.
pub fn sibling(path: &Path, suffix: &str) -> PathBuf {
    let mut s = path.as_os_str().to_os_string();
    s.push(".");
    s.push(suffix);
    PathBuf::from(s)
}

pub fn manifest_path_for(output: &Path) -> PathBuf {
    sibling(output, "manifest.txt")
}

/// Record of one command invocation, rendered as `key=value` lines.
#[derive(Debug, Clone, PartialEq)]
pub struct RunManifest {
    pub command: String,
    pub seed: u64,
    /// Paths and command arguments.
    pub run: KvConfig,
    /// Fully resolved configuration.
    pub config: KvConfig,
}

impl RunManifest {
    pub const RUN_KEYS: &'static [&'static str] = &[
        "command",
        "tool_version",
        "data_dir",
        "out",
        "checkpoint",
        "input",
        "target",
        "classes",
        "grid_points",
        "speakers",
        "utterances_per_speaker",
        "dump_mel",
    ];

    pub fn render(&self) -> String {
        let mut kv = KvConfig::new();
        kv.set("command", &self.command);
        kv.set("tool_version", TOOL_VERSION);
        kv.merge(&self.run);
        kv.merge(&self.config);
        kv.set("seed", self.seed);
        kv.render()
    }

    pub fn write(&self, path: &Path) -> Result<(), CliError> {
        write_file(path, self.render().as_bytes())
    }
}

/// Split a config file into run keys and the rest; reject a manifest that
/// belongs to another command.
pub fn split_config(kv: &KvConfig, command: &str) -> Result<(KvConfig, KvConfig), CliError> {
    if let Some(c) = kv.get("command") {
        if c != command {
            return Err(CliError::Validation(format!(
                "config was written by `{c}`, not `{command}`"
            )));
        }
    }
    let mut run = KvConfig::new();
    let mut rest = KvConfig::new();
    for (k, v) in kv.iter() {
        if RunManifest::RUN_KEYS.contains(&k) {
            if k != "command" && k != "tool_version" {
                run.set(k, v);
            }
        } else {
            rest.set(k, v);
        }
    }
    Ok((run, rest))
}

pub fn read_config(path: &Path) -> Result<KvConfig, CliError> {
    let text = fs::read_to_string(path).map_err(io_err(path))?;
    Ok(KvConfig::parse(&text)?)
}

// ---------------------------------------------------------------------------
// Corpus index

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct IndexEntry {
    /// Relative to the corpus directory.
    pub path: String,
    pub speaker: String,
}

pub fn render_index(entries: &[IndexEntry]) -> String {
    let mut s = String::from("path,speaker_id\n");
    for e in entries {
        s.push_str(&format!("{},{}\n", e.path, e.speaker));
    }
    s
}

pub fn parse_index(text: &str) -> Result<Vec<IndexEntry>, CliError> {
    let mut lines = text.lines();
    match lines.next().map(str::trim) {
        Some("path,speaker_id") => {}
        other => {
            return Err(CliError::Validation(format!(
                "index must start with `path,speaker_id`, got {other:?}"
            )))
        }
    }
    let mut out = Vec::new();
    for (i, line) in lines.enumerate() {
        let line = line.trim();
        if line.is_empty() {
            continue;
        }
        let (path, speaker) = line
            .split_once(',')
            .filter(|(p, s)| !p.is_empty() && !s.is_empty() && !s.contains(','))
            .ok_or_else(|| CliError::Validation(format!("index line {}: expected path,speaker_id", i + 2)))?;
        out.push(IndexEntry {
            path: path.to_string(),
            speaker: speaker.to_string(),
        });
    }
    if out.is_empty() {
        return Err(CliError::Validation("index lists no files".into()));
    }
    Ok(out)
}

pub fn read_index(data_dir: &Path) -> Result<Vec<IndexEntry>, CliError> {
    let path = data_dir.join(INDEX_FILE);
    if !path.is_file() {
        return Err(CliError::Validation(format!("no {INDEX_FILE} in {}", data_dir.display())));
    }
    parse_index(&fs::read_to_string(&path).map_err(io_err(&path))?)
}

/// Load, resample and analyze every indexed file.
pub fn load_corpus(data_dir: &Path, features: &FeatureSettings) -> Result<Vec<(MelSpectrogram, String)>, CliError> {
    let fx = features.extractor()?;
    read_index(data_dir)?
        .into_iter()
        .map(|e| {
            let audio = load_input(&data_dir.join(&e.path), features.sample_rate_hz)?;
            Ok((fx.analyze(&audio)?, e.speaker))
        })
        .collect()
}

fn load_input(path: &Path, rate: u32) -> Result<AudioBuffer, CliError> {
    let audio = load_wav(path)?;
    Ok(resample_linear(&audio, rate)?)
}

// ---------------------------------------------------------------------------
// synth-data

/// `id:f0` pairs separated by commas, e.g. `m:120,f:240`.
pub fn parse_speaker_list(text: &str, utterance_seconds: f64) -> Result<Vec<SynthSpeakerSpec>, CliError> {
    let specs = text
        .split(',')
        .map(|item| {
            let (id, f0) = item
                .trim()
                .split_once(':')
                .ok_or_else(|| CliError::Validation(format!("speaker {item:?} is not id:f0")))?;
            let f0: f64 = f0
                .parse()
                .map_err(|_| CliError::Validation(format!("speaker {id:?} has invalid f0 {f0:?}")))?;
            Ok(SynthSpeakerSpec {
                utterance_seconds,
                ..SynthSpeakerSpec::with_pitch(id, f0)
            })
        })
        .collect::<Result<Vec<_>, CliError>>()?;
    Ok(specs)
}

pub fn render_speaker_list(specs: &[SynthSpeakerSpec]) -> String {
    specs
        .iter()
        .map(|s| format!("{}:{}", s.id, s.fundamental_hz))
        .collect::<Vec<_>>()
        .join(",")
}

/// Write `utterances_per_speaker` WAVs per speaker plus the index.
pub fn cmd_synth_dataset(
    specs: &[SynthSpeakerSpec],
    utterances_per_speaker: usize,
    out_dir: &Path,
    seed: u64,
) -> Result<Vec<IndexEntry>, CliError> {
    if specs.len() < 2 {
        return Err(CliError::Validation(format!("need at least 2 speakers, got {}", specs.len())));
    }
    if utterances_per_speaker == 0 {
        return Err(CliError::Validation("utterances_per_speaker must be >= 1".into()));
    }
    for (i, s) in specs.iter().enumerate() {
        s.validate().map_err(CliError::Validation)?;
        if specs[..i].iter().any(|o| o.id == s.id) {
            return Err(CliError::Validation(format!("duplicate speaker id {:?}", s.id)));
        }
    }
    fs::create_dir_all(out_dir).map_err(io_err(out_dir))?;
    let mut entries = Vec::new();
    for (si, spec) in specs.iter().enumerate() {
        for u in 0..utterances_per_speaker {
            let name = format!("{}_{:03}.wav", spec.id, u);
            let audio = synth_utterance(spec, utterance_seed(seed, si, u));
            save_wav(&out_dir.join(&name), &audio)?;
            entries.push(IndexEntry {
                path: name,
                speaker: spec.id.clone(),
            });
        }
    }
    write_file(&out_dir.join(INDEX_FILE), render_index(&entries).as_bytes())?;
    let mut run = KvConfig::new();
    run.set("out", out_dir.display());
    run.set("speakers", render_speaker_list(specs));
    run.set("utterances_per_speaker", utterances_per_speaker);
    let mut config = KvConfig::new();
    if let Some(s) = specs.first() {
        config.set("utterance_seconds", s.utterance_seconds);
    }
    RunManifest {
        command: "synth-data".into(),
        seed,
        run,
        config,
    }
    .write(&out_dir.join(MANIFEST_FILE))?;
    Ok(entries)
}

// ---------------------------------------------------------------------------
// train

pub fn log_path_for(checkpoint: &Path) -> PathBuf {
    sibling(checkpoint, "log.csv")
}

/// Train on an indexed corpus; writes the checkpoint, `<out>.log.csv` and
/// `<out>.manifest.txt`.
pub fn cmd_train(
    data_dir: &Path,
    config: &TrainConfig,
    out_checkpoint: &Path,
    on_step: impl FnMut(&StepRecord),
) -> Result<(Checkpoint, TrainLog), CliError> {
    config.validate()?;
    let corpus = load_corpus(data_dir, &config.features)?;
    let dataset = Dataset::from_labeled(&corpus)?;
    let (checkpoint, log) = train_loop_with(&dataset, config, on_step)?;
    if let Some(parent) = out_checkpoint.parent().filter(|p| !p.as_os_str().is_empty()) {
        fs::create_dir_all(parent).map_err(io_err(parent))?;
    }
    save_checkpoint(out_checkpoint, &checkpoint)?;
    write_file(&log_path_for(out_checkpoint), log.to_csv().as_bytes())?;
    let mut run = KvConfig::new();
    run.set("data_dir", data_dir.display());
    run.set("out", out_checkpoint.display());
    RunManifest {
        command: "train".into(),
        seed: config.seed,
        run,
        config: config.to_kv(),
    }
    .write(&manifest_path_for(out_checkpoint))?;
    Ok((checkpoint, log))
}

// ---------------------------------------------------------------------------
// convert

pub fn mel_to_tensor(mel: &MelSpectrogram) -> Tensor<f32> {
    Tensor::new(
        vec![mel.n_mels, mel.frames],
        mel.magnitudes.iter().map(|&v| v as f32).collect(),
    )
    .expect("mel spectrogram is non-empty")
}

pub fn tensor_to_mel(t: &Tensor<f32>, signal_len: usize) -> MelSpectrogram {
    MelSpectrogram {
        magnitudes: t.values.iter().map(|&v| f64::from(v)).collect(),
        n_mels: t.shape[0],
        frames: t.shape[1],
        signal_len,
    }
}

/// Encode `mel` and decode it as `target`; output clamped at zero.
pub fn convert_mel(bundle: &ModelBundle<f32>, mel: &MelSpectrogram, target: &str) -> Result<MelSpectrogram, CliError> {
    let code = bundle.encode(&mel_to_tensor(mel))?;
    let out = bundle.decode(target, &code)?;
    let mut mel_out = tensor_to_mel(&out, mel.signal_len);
    mel_out.magnitudes.iter_mut().for_each(|v| *v = v.max(0.0));
    Ok(mel_out)
}

/// Full conversion of one signal already at the working rate.
pub fn convert_audio(
    bundle: &ModelBundle<f32>,
    fx: &FeatureExtractor,
    audio: &AudioBuffer,
    target: &str,
    seed: u64,
) -> Result<(AudioBuffer, MelSpectrogram), CliError> {
    let mel = fx.analyze(audio)?;
    let converted = convert_mel(bundle, &mel, target)?;
    Ok((fx.synthesize(&converted, seed)?, converted))
}

/// Convert `input_wav` to `target`'s voice and write `output_wav`. The
/// converted mel spectrogram is also dumped as a tensor when `dump_mel` is set.
pub fn cmd_convert(
    checkpoint_path: &Path,
    input_wav: &Path,
    target: &str,
    output_wav: &Path,
    seed: u64,
    dump_mel: Option<&Path>,
) -> Result<AudioBuffer, CliError> {
    let ck = load_checkpoint(checkpoint_path)?;
    ck.bundle.speaker_index(target)?;
    let features = ck.config.features;
    let fx = features.extractor()?;
    let audio = load_input(input_wav, features.sample_rate_hz)?;
    let (out, mel) = convert_audio(&ck.bundle, &fx, &audio, target, seed)?;
    if let Some(parent) = output_wav.parent().filter(|p| !p.as_os_str().is_empty()) {
        fs::create_dir_all(parent).map_err(io_err(parent))?;
    }
    save_wav(output_wav, &out)?;
    let mut run = KvConfig::new();
    run.set("checkpoint", checkpoint_path.display());
    run.set("input", input_wav.display());
    run.set("target", target);
    run.set("out", output_wav.display());
    if let Some(path) = dump_mel {
        write_file(path, &encode_tensor(&mel_to_tensor(&mel)))?;
        run.set("dump_mel", path.display());
    }
    RunManifest {
        command: "convert".into(),
        seed,
        run,
        config: KvConfig::new(),
    }
    .write(&manifest_path_for(output_wav))?;
    Ok(out)
}

// ---------------------------------------------------------------------------
// eval

/// Mean centroid shift of every source speaker's utterances converted to
/// every other trained speaker. Sources may include speakers the model
/// was not trained on; targets are the model's speakers.
pub fn conversion_grid(
    bundle: &ModelBundle<f32>,
    fx: &FeatureExtractor,
    corpus: &[(AudioBuffer, MelSpectrogram, String)],
    seed: u64,
) -> Result<Vec<PairShift>, CliError> {
    let mut sources: Vec<&String> = corpus.iter().map(|(_, _, s)| s).collect();
    sources.sort();
    sources.dedup();
    let mut out = Vec::new();
    for source in sources {
        for target in &bundle.speakers {
            if target == source {
                continue;
            }
            let refs: Vec<MelSpectrogram> = corpus
                .iter()
                .filter(|(_, _, s)| s == target)
                .map(|(_, m, _)| m.clone())
                .collect();
            if refs.is_empty() {
                continue;
            }
            let mut total = 0.0;
            let mut n = 0usize;
            for (audio, mel, _) in corpus.iter().filter(|(_, _, s)| s == source) {
                let (converted, _) = convert_audio(bundle, fx, audio, target, seed)?;
                total += spectral_centroid_shift(mel, &fx.analyze(&converted)?, &refs)?;
                n += 1;
            }
            out.push(PairShift {
                source: source.clone(),
                target: target.clone(),
                shift: total / n as f64,
            });
        }
    }
    Ok(out)
}

/// Metrics on `data_dir` for a checkpoint: reconstruction, classifier
/// error with both bounds, and the source × target centroid-shift grid.
pub fn cmd_eval(checkpoint_path: &Path, data_dir: &Path, report_path: &Path, seed: u64) -> Result<MetricsReport, CliError> {
    let ck = load_checkpoint(checkpoint_path)?;
    let features = ck.config.features;
    let fx = features.extractor()?;
    let corpus = read_index(data_dir)?
        .into_iter()
        .map(|e| {
            let audio = load_input(&data_dir.join(&e.path), features.sample_rate_hz)?;
            let mel = fx.analyze(&audio)?;
            Ok((audio, mel, e.speaker))
        })
        .collect::<Result<Vec<_>, CliError>>()?;

    let trained: Vec<(MelSpectrogram, String)> = corpus
        .iter()
        .filter(|(_, _, s)| ck.bundle.speakers.contains(s))
        .map(|(_, m, s)| (m.clone(), s.clone()))
        .collect();
    let dataset = Dataset::from_labeled(&trained)?;
    let mut report = evaluate_model(&ck.bundle, &dataset, ck.config.segment_frames)?;
    report.centroid_shifts = conversion_grid(&ck.bundle, &fx, &corpus, seed)?;

    write_file(report_path, report.to_csv().as_bytes())?;
    let mut run = KvConfig::new();
    run.set("checkpoint", checkpoint_path.display());
    run.set("data_dir", data_dir.display());
    run.set("out", report_path.display());
    RunManifest {
        command: "eval".into(),
        seed,
        run,
        config: KvConfig::new(),
    }
    .write(&manifest_path_for(report_path))?;
    Ok(report)
}

// ---------------------------------------------------------------------------
// bounds

pub fn cmd_bounds(n_classes: usize, grid_points: usize, out_csv: &Path) -> Result<BoundsCurve, CliError> {
    let curve = bounds_curve(n_classes, grid_points)?;
    write_file(out_csv, curve.to_csv().as_bytes())?;
    let mut run = KvConfig::new();
    run.set("classes", n_classes);
    run.set("grid_points", grid_points);
    run.set("out", out_csv.display());
    RunManifest {
        command: "bounds".into(),
        seed: 0,
        run,
        config: KvConfig::new(),
    }
    .write(&manifest_path_for(out_csv))?;
    Ok(curve)
}

// ---------------------------------------------------------------------------
// Tensor container: "VCT1" | u8 rank | u32 extents | fp32 payload, LE.

pub fn encode_tensor(t: &Tensor<f32>) -> Vec<u8> {
    let mut b = Vec::with_capacity(5 + 4 * t.shape.len() + 4 * t.numel());
    b.extend_from_slice(TENSOR_MAGIC);
    b.push(t.shape.len() as u8);
    for &d in &t.shape {
        b.extend_from_slice(&(d as u32).to_le_bytes());
    }
    for v in &t.values {
        b.extend_from_slice(&v.to_le_bytes());
    }
    b
}

pub fn decode_tensor(bytes: &[u8]) -> Result<Tensor<f32>, CliError> {
    let bad = |m: &str| CliError::Validation(format!("tensor file: {m}"));
    if bytes.len() < 5 || &bytes[..4] != TENSOR_MAGIC {
        return Err(bad("missing VCT1 magic"));
    }
    let rank = bytes[4] as usize;
    let header = 5 + 4 * rank;
    if bytes.len() < header {
        return Err(bad("truncated header"));
    }
    let shape: Vec<usize> = bytes[5..header]
        .chunks_exact(4)
        .map(|c| u32::from_le_bytes(c.try_into().expect("4 bytes")) as usize)
        .collect();
    let numel = shape
        .iter()
        .try_fold(1usize, |a, &d| a.checked_mul(d))
        .ok_or_else(|| bad("extent overflow"))?;
    if bytes.len() != header + 4 * numel {
        return Err(bad("payload length does not match extents"));
    }
    let values = bytes[header..]
        .chunks_exact(4)
        .map(|c| f32::from_le_bytes(c.try_into().expect("4 bytes")))
        .collect();
    Tensor::new(shape, values).map_err(|e: AutodiffError| bad(&e.to_string()))
}
