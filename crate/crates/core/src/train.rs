//! Alternating adversarial training and checkpoint persistence.
//!
//! Each round runs `classifier_steps_per_ae_step` classifier updates on
//! detached codes, then one autoencoder update whose loss is the
//! batch-weighted reconstruction error minus `lambda_adv` times the frozen
//! classifier's cross-entropy. Every network keeps its own Adam state.

use std::io;
use std::path::Path;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use thiserror::Error;

use crate::audio_io::write_atomic;
use crate::autodiff::{adam_step, AdamConfig, AdamState, AutodiffError, Graph, Tensor};
use crate::config::{ConfigError, KvConfig};
use crate::dsp::{FeatureSettings, MelSpectrogram};
use crate::model::{argmax, ArchConfig, ModelBundle, ModelError, Network};

pub const CHECKPOINT_MAGIC: &[u8; 4] = b"VCAE";
pub const CHECKPOINT_VERSION: u16 = 1;

#[derive(Debug, Error)]
pub enum TrainError {
    #[error("dataset is empty")]
    EmptyDataset,
    #[error("utterance {index} has {frames} frames, segments need {needed}")]
    UtteranceTooShort {
        index: usize,
        frames: usize,
        needed: usize,
    },
    #[error("utterance {index} has speaker index {speaker} but only {n_speakers} speakers exist")]
    UnknownSpeaker {
        index: usize,
        speaker: usize,
        n_speakers: usize,
    },
    #[error("utterance {index} has {got} mel bands, expected {expected}")]
    BandMismatch {
        index: usize,
        got: usize,
        expected: usize,
    },
    #[error("invalid training config: {0}")]
    Config(#[from] ConfigError),
    #[error(transparent)]
    Model(#[from] ModelError),
    #[error(transparent)]
    Autodiff(#[from] AutodiffError),
    #[error("i/o failure: {0}")]
    IoFailure(#[from] io::Error),
    #[error("unsupported checkpoint version {found} (expected {CHECKPOINT_VERSION})")]
    VersionMismatch { found: u16 },
    #[error("checkpoint checksum mismatch (file corrupt or truncated)")]
    CorruptChecksum,
    #[error("malformed checkpoint: {0}")]
    MalformedCheckpoint(String),
}

/// One utterance's features, `n_mels × frames`.
#[derive(Debug, Clone, PartialEq)]
pub struct Utterance {
    pub mel: Tensor<f32>,
    pub speaker: usize,
}

impl Utterance {
    pub fn from_mel(mel: &MelSpectrogram, speaker: usize) -> Result<Self, TrainError> {
        let values = mel.magnitudes.iter().map(|&v| v as f32).collect();
        Ok(Self {
            mel: Tensor::new(vec![mel.n_mels, mel.frames], values)?,
            speaker,
        })
    }

    pub fn n_mels(&self) -> usize {
        self.mel.shape[0]
    }

    pub fn frames(&self) -> usize {
        self.mel.shape[1]
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct Dataset {
    pub items: Vec<Utterance>,
    pub speakers: Vec<String>,
}

impl Dataset {
    pub fn new(items: Vec<Utterance>, speakers: Vec<String>) -> Result<Self, TrainError> {
        let n_mels = items.first().map(|u| u.n_mels());
        for (index, u) in items.iter().enumerate() {
            if u.speaker >= speakers.len() {
                return Err(TrainError::UnknownSpeaker {
                    index,
                    speaker: u.speaker,
                    n_speakers: speakers.len(),
                });
            }
            if Some(u.n_mels()) != n_mels {
                return Err(TrainError::BandMismatch {
                    index,
                    got: u.n_mels(),
                    expected: n_mels.unwrap_or(0),
                });
            }
        }
        Ok(Self { items, speakers })
    }

    /// Group `(mel, speaker id)` pairs; speakers are ordered by id.
    pub fn from_labeled(pairs: &[(MelSpectrogram, String)]) -> Result<Self, TrainError> {
        let mut speakers: Vec<String> = pairs.iter().map(|(_, s)| s.clone()).collect();
        speakers.sort();
        speakers.dedup();
        let items = pairs
            .iter()
            .map(|(mel, s)| {
                let idx = speakers.binary_search(s).expect("collected above");
                Utterance::from_mel(mel, idx)
            })
            .collect::<Result<_, _>>()?;
        Self::new(items, speakers)
    }

    pub fn len(&self) -> usize {
        self.items.len()
    }

    pub fn is_empty(&self) -> bool {
        self.items.is_empty()
    }

    pub fn n_mels(&self) -> Option<usize> {
        self.items.first().map(|u| u.n_mels())
    }

    /// Fail unless every utterance can supply a `segment_frames` crop.
    pub fn check_segments(&self, segment_frames: usize) -> Result<(), TrainError> {
        if self.items.is_empty() {
            return Err(TrainError::EmptyDataset);
        }
        for (index, u) in self.items.iter().enumerate() {
            if u.frames() < segment_frames {
                return Err(TrainError::UtteranceTooShort {
                    index,
                    frames: u.frames(),
                    needed: segment_frames,
                });
            }
        }
        Ok(())
    }

    /// Per-speaker item indices.
    pub fn by_speaker(&self) -> Vec<Vec<usize>> {
        let mut out = vec![Vec::new(); self.speakers.len()];
        for (i, u) in self.items.iter().enumerate() {
            out[u.speaker].push(i);
        }
        out
    }
}

/// Stacked crops `[B, n_mels, T]` with one label per entry.
#[derive(Debug, Clone, PartialEq)]
pub struct Batch {
    pub mels: Tensor<f32>,
    pub labels: Vec<usize>,
}

impl Batch {
    pub fn len(&self) -> usize {
        self.labels.len()
    }

    pub fn is_empty(&self) -> bool {
        self.labels.is_empty()
    }
}

/// Crop `[n_mels, T]` starting at `start` from an utterance.
pub fn crop(u: &Utterance, start: usize, frames: usize) -> Vec<f32> {
    let total = u.frames();
    let mut out = Vec::with_capacity(u.n_mels() * frames);
    for row in u.mel.values.chunks_exact(total) {
        out.extend_from_slice(&row[start..start + frames]);
    }
    out
}

/// Uniformly sampled utterances, each with a uniformly placed crop.
pub fn sample_batch(
    dataset: &Dataset,
    batch_size: usize,
    segment_frames: usize,
    rng: &mut impl Rng,
) -> Result<Batch, TrainError> {
    let n_mels = dataset.n_mels().ok_or(TrainError::EmptyDataset)?;
    let mut values = Vec::with_capacity(batch_size * n_mels * segment_frames);
    let mut labels = Vec::with_capacity(batch_size);
    for _ in 0..batch_size {
        let index = rng.gen_range(0..dataset.items.len());
        let u = &dataset.items[index];
        if u.frames() < segment_frames {
            return Err(TrainError::UtteranceTooShort {
                index,
                frames: u.frames(),
                needed: segment_frames,
            });
        }
        let start = rng.gen_range(0..=u.frames() - segment_frames);
        values.extend(crop(u, start, segment_frames));
        labels.push(u.speaker);
    }
    Ok(Batch {
        mels: Tensor::new(vec![batch_size, n_mels, segment_frames], values)?,
        labels,
    })
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct TrainConfig {
    pub lambda_adv: f64,
    pub steps: u64,
    pub batch_size: usize,
    pub segment_frames: usize,
    pub classifier_steps_per_ae_step: usize,
    /// Encoder and decoder optimizer.
    pub adam: AdamConfig,
    /// Classifier learning rate; the other Adam settings are shared.
    pub classifier_lr: f64,
    pub seed: u64,
    pub hidden_channels: usize,
    pub code_channels: usize,
    pub features: FeatureSettings,
}

/// Encoder and decoder learning rate. Lower than the classifier's so the
/// classifier can track the moving codes.
pub const DEFAULT_AUTOENCODER_LR: f64 = 3e-4;

impl Default for TrainConfig {
    fn default() -> Self {
        let arch = ArchConfig::default();
        Self {
            lambda_adv: 1.0,
            steps: 10_000,
            batch_size: 8,
            segment_frames: 64,
            classifier_steps_per_ae_step: 1,
            adam: AdamConfig {
                lr: DEFAULT_AUTOENCODER_LR,
                ..AdamConfig::default()
            },
            classifier_lr: AdamConfig::default().lr,
            seed: 0,
            hidden_channels: arch.hidden_channels,
            code_channels: arch.code_channels,
            features: FeatureSettings::default(),
        }
    }
}

impl TrainConfig {
    pub const KEYS: &'static [&'static str] = &[
        "lambda_adv",
        "steps",
        "batch_size",
        "segment_frames",
        "classifier_steps_per_ae_step",
        "learning_rate",
        "adam_beta1",
        "adam_beta2",
        "adam_eps",
        "classifier_learning_rate",
        "seed",
        "hidden_channels",
        "code_channels",
        "n_fft",
        "hop",
        "n_mels",
        "f_min_hz",
        "f_max_hz",
        "sample_rate_hz",
        "magnitude_scale",
        "log_mel",
        "griffin_lim_iters",
    ];

    pub fn arch(&self) -> ArchConfig {
        ArchConfig {
            n_mels: self.features.n_mels,
            hidden_channels: self.hidden_channels,
            code_channels: self.code_channels,
        }
    }

    pub fn validate(&self) -> Result<(), ConfigError> {
        let fail = |msg: &str| Err(ConfigError::Constraint(msg.to_string()));
        if !(self.lambda_adv >= 0.0 && self.lambda_adv.is_finite()) {
            return fail("lambda_adv must be finite and >= 0");
        }
        if self.batch_size == 0
            || self.segment_frames == 0
            || self.classifier_steps_per_ae_step == 0
            || self.hidden_channels == 0
            || self.code_channels == 0
        {
            return fail("batch_size, segment_frames, classifier_steps_per_ae_step and channel counts must be >= 1");
        }
        let a = self.adam;
        if !(a.lr > 0.0 && self.classifier_lr > 0.0 && (0.0..1.0).contains(&a.beta1) && (0.0..1.0).contains(&a.beta2) && a.eps > 0.0) {
            return fail("optimizer hyperparameters out of range");
        }
        Ok(())
    }

    pub fn to_kv(&self) -> KvConfig {
        let mut kv = KvConfig::new();
        kv.set("lambda_adv", self.lambda_adv);
        kv.set("steps", self.steps);
        kv.set("batch_size", self.batch_size);
        kv.set("segment_frames", self.segment_frames);
        kv.set("classifier_steps_per_ae_step", self.classifier_steps_per_ae_step);
        kv.set("learning_rate", self.adam.lr);
        kv.set("adam_beta1", self.adam.beta1);
        kv.set("adam_beta2", self.adam.beta2);
        kv.set("adam_eps", self.adam.eps);
        kv.set("classifier_learning_rate", self.classifier_lr);
        kv.set("seed", self.seed);
        kv.set("hidden_channels", self.hidden_channels);
        kv.set("code_channels", self.code_channels);
        let f = &self.features;
        kv.set("n_fft", f.n_fft);
        kv.set("hop", f.hop);
        kv.set("n_mels", f.n_mels);
        kv.set("f_min_hz", f.f_min_hz);
        kv.set("f_max_hz", f.f_max_hz);
        kv.set("sample_rate_hz", f.sample_rate_hz);
        kv.set("magnitude_scale", f.magnitude_scale);
        kv.set("log_mel", f.log_mel);
        kv.set("griffin_lim_iters", f.griffin_lim_iters);
        kv
    }

    /// Defaults overridden by `kv`; unknown keys are rejected.
    pub fn from_kv(kv: &KvConfig) -> Result<Self, ConfigError> {
        if let Some(k) = kv.keys().find(|k| !Self::KEYS.contains(k)) {
            return Err(ConfigError::UnknownKey(k.to_string()));
        }
        let mut c = Self::default();
        kv.parse_into("lambda_adv", &mut c.lambda_adv)?;
        kv.parse_into("steps", &mut c.steps)?;
        kv.parse_into("batch_size", &mut c.batch_size)?;
        kv.parse_into("segment_frames", &mut c.segment_frames)?;
        kv.parse_into("classifier_steps_per_ae_step", &mut c.classifier_steps_per_ae_step)?;
        kv.parse_into("learning_rate", &mut c.adam.lr)?;
        kv.parse_into("adam_beta1", &mut c.adam.beta1)?;
        kv.parse_into("adam_beta2", &mut c.adam.beta2)?;
        kv.parse_into("adam_eps", &mut c.adam.eps)?;
        kv.parse_into("classifier_learning_rate", &mut c.classifier_lr)?;
        kv.parse_into("seed", &mut c.seed)?;
        kv.parse_into("hidden_channels", &mut c.hidden_channels)?;
        kv.parse_into("code_channels", &mut c.code_channels)?;
        let f = &mut c.features;
        kv.parse_into("n_fft", &mut f.n_fft)?;
        kv.parse_into("hop", &mut f.hop)?;
        kv.parse_into("n_mels", &mut f.n_mels)?;
        kv.parse_into("f_min_hz", &mut f.f_min_hz)?;
        kv.parse_into("f_max_hz", &mut f.f_max_hz)?;
        kv.parse_into("sample_rate_hz", &mut f.sample_rate_hz)?;
        kv.parse_into("magnitude_scale", &mut f.magnitude_scale)?;
        kv.parse_into("log_mel", &mut f.log_mel)?;
        kv.parse_into("griffin_lim_iters", &mut f.griffin_lim_iters)?;
        c.validate()?;
        Ok(c)
    }
}

/// Adam state for every network, aligned with the bundle.
#[derive(Debug, Clone, PartialEq)]
pub struct Optimizers {
    pub encoder: AdamState<f32>,
    pub decoders: Vec<AdamState<f32>>,
    pub classifier: AdamState<f32>,
}

impl Optimizers {
    pub fn new(bundle: &ModelBundle<f32>, config: AdamConfig, classifier_lr: f64) -> Self {
        let state = |n: &Network<f32>| AdamState::new(config, n.params());
        let classifier_config = AdamConfig {
            lr: classifier_lr,
            ..config
        };
        Self {
            encoder: state(&bundle.encoder),
            decoders: bundle.decoders.iter().map(state).collect(),
            classifier: AdamState::new(classifier_config, bundle.classifier.params()),
        }
    }

    /// Encoder, decoders, classifier: the bundle's network order.
    pub fn groups(&self) -> impl Iterator<Item = &AdamState<f32>> {
        std::iter::once(&self.encoder)
            .chain(self.decoders.iter())
            .chain(std::iter::once(&self.classifier))
    }

    fn groups_mut(&mut self) -> impl Iterator<Item = &mut AdamState<f32>> {
        std::iter::once(&mut self.encoder)
            .chain(self.decoders.iter_mut())
            .chain(std::iter::once(&mut self.classifier))
    }
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct ClassifierStepStats {
    pub loss: f32,
    /// Accuracy of the pre-update classifier on this batch.
    pub accuracy: f32,
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct AutoencoderStepStats {
    /// Batch-weighted mean absolute reconstruction error.
    pub reconstruction: f32,
    /// Cross-entropy of the frozen classifier on the batch's codes.
    pub adversarial: f32,
}

/// Update the classifier on codes from a frozen encoder.
pub fn classifier_step(
    bundle: &mut ModelBundle<f32>,
    batch: &Batch,
    state: &mut AdamState<f32>,
) -> Result<ClassifierStepStats, TrainError> {
    let mut g = Graph::new();
    let x = g.constant(&batch.mels);
    let (code, _) = bundle.encoder_forward(&mut g, x, false)?;
    let (logits, vars) = bundle.classifier_forward(&mut g, code, true)?;
    let n = bundle.n_speakers();
    let correct = g
        .value(logits)
        .chunks_exact(n)
        .zip(&batch.labels)
        .filter(|(row, &l)| argmax(row) == l)
        .count();
    let loss = g.cross_entropy(logits, &batch.labels)?;
    g.backward(loss)?;
    bundle.classifier.accumulate_grads(&g, &vars);
    adam_step(&mut bundle.classifier.params_mut(), state)?;
    Ok(ClassifierStepStats {
        loss: g.value(loss)[0],
        accuracy: correct as f32 / batch.len() as f32,
    })
}

/// Update the encoder and the decoders of speakers present in the batch.
///
/// `optimizers.classifier` is not touched.
pub fn autoencoder_step(
    bundle: &mut ModelBundle<f32>,
    batch: &Batch,
    optimizers: &mut Optimizers,
    lambda_adv: f64,
) -> Result<AutoencoderStepStats, TrainError> {
    let b = batch.len();
    let mut g = Graph::new();
    let x = g.constant(&batch.mels);
    let (code, enc_vars) = bundle.encoder_forward(&mut g, x, true)?;

    let mut groups: Vec<(usize, Vec<usize>)> = Vec::new();
    for (i, &l) in batch.labels.iter().enumerate() {
        match groups.iter_mut().find(|(s, _)| *s == l) {
            Some((_, items)) => items.push(i),
            None => groups.push((l, vec![i])),
        }
    }
    groups.sort_by_key(|(s, _)| *s);

    let mut total = None;
    let mut dec_vars = Vec::with_capacity(groups.len());
    for (speaker, items) in &groups {
        let decoder = bundle
            .decoders
            .get(*speaker)
            .ok_or_else(|| ModelError::UnknownSpeaker(format!("#{speaker}")))?;
        let code_s = g.select_items(code, items)?;
        let target = g.select_items(x, items)?;
        let (out, vars) = decoder.forward(&mut g, code_s, true)?;
        dec_vars.push(vars);
        let l1 = g.l1_loss(out, target)?;
        let weighted = g.scale(l1, items.len() as f64 / b as f64);
        total = Some(match total {
            Some(t) => g.add(t, weighted)?,
            None => weighted,
        });
    }
    let reconstruction = total.expect("batch is non-empty");
    let recon_value = g.value(reconstruction)[0];

    let (logits, _) = bundle.classifier_forward(&mut g, code, false)?;
    let ce = g.cross_entropy(logits, &batch.labels)?;
    let adversarial = g.value(ce)[0];
    let loss = if lambda_adv > 0.0 {
        let adv = g.scale(ce, -lambda_adv);
        g.add(reconstruction, adv)?
    } else {
        reconstruction
    };
    g.backward(loss)?;

    bundle.encoder.accumulate_grads(&g, &enc_vars);
    adam_step(&mut bundle.encoder.params_mut(), &mut optimizers.encoder)?;
    for ((speaker, _), vars) in groups.iter().zip(&dec_vars) {
        let decoder = &mut bundle.decoders[*speaker];
        decoder.accumulate_grads(&g, vars);
        adam_step(&mut decoder.params_mut(), &mut optimizers.decoders[*speaker])?;
    }
    Ok(AutoencoderStepStats {
        reconstruction: recon_value,
        adversarial,
    })
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct StepRecord {
    pub step: u64,
    pub reconstruction: f32,
    pub classifier_loss: f32,
    pub adversarial: f32,
    pub code_accuracy: f32,
}

#[derive(Debug, Clone, Default, PartialEq)]
pub struct TrainLog {
    pub records: Vec<StepRecord>,
}

impl TrainLog {
    pub fn to_csv(&self) -> String {
        let mut s = String::from("step,f_r,f_c_classifier,adv_term,code_acc\n");
        for r in &self.records {
            s.push_str(&format!(
                "{},{},{},{},{}\n",
                r.step, r.reconstruction, r.classifier_loss, r.adversarial, r.code_accuracy
            ));
        }
        s
    }

    pub fn save(&self, path: &Path) -> Result<(), TrainError> {
        Ok(write_atomic(path, self.to_csv().as_bytes())?)
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct Checkpoint {
    pub bundle: ModelBundle<f32>,
    pub optimizers: Optimizers,
    /// Completed training rounds.
    pub step: u64,
    pub config: TrainConfig,
}

impl Checkpoint {
    /// Freshly initialized model and optimizer state.
    pub fn initial(speakers: &[String], config: &TrainConfig) -> Result<Self, TrainError> {
        config.validate()?;
        let bundle = ModelBundle::build(speakers, config.arch(), config.seed)?;
        let optimizers = Optimizers::new(&bundle, config.adam, config.classifier_lr);
        Ok(Self {
            bundle,
            optimizers,
            step: 0,
            config: *config,
        })
    }
}

/// Stateful driver for [`train_loop`]; exposes one round at a time.
pub struct Trainer<'a> {
    dataset: &'a Dataset,
    checkpoint: Checkpoint,
    rng: ChaCha8Rng,
    log: TrainLog,
}

impl<'a> Trainer<'a> {
    pub fn new(dataset: &'a Dataset, config: &TrainConfig) -> Result<Self, TrainError> {
        if dataset.speakers.len() < 2 {
            return Err(ModelError::TooFewSpeakers(dataset.speakers.len()).into());
        }
        dataset.check_segments(config.segment_frames)?;
        if dataset.n_mels() != Some(config.features.n_mels) {
            return Err(TrainError::BandMismatch {
                index: 0,
                got: dataset.n_mels().unwrap_or(0),
                expected: config.features.n_mels,
            });
        }
        let checkpoint = Checkpoint::initial(&dataset.speakers, config)?;
        // Sampling draws from its own stream so it is independent of init.
        let mut rng = ChaCha8Rng::seed_from_u64(config.seed);
        rng.set_stream(1);
        Ok(Self {
            dataset,
            checkpoint,
            rng,
            log: TrainLog::default(),
        })
    }

    pub fn checkpoint(&self) -> &Checkpoint {
        &self.checkpoint
    }

    pub fn log(&self) -> &TrainLog {
        &self.log
    }

    /// Classifier steps followed by one autoencoder step.
    pub fn round(&mut self) -> Result<StepRecord, TrainError> {
        let c = self.checkpoint.config;
        let ck = &mut self.checkpoint;
        let mut stats = None;
        for _ in 0..c.classifier_steps_per_ae_step {
            let batch = sample_batch(self.dataset, c.batch_size, c.segment_frames, &mut self.rng)?;
            stats = Some(classifier_step(&mut ck.bundle, &batch, &mut ck.optimizers.classifier)?);
        }
        let cls = stats.expect("at least one classifier step");
        let batch = sample_batch(self.dataset, c.batch_size, c.segment_frames, &mut self.rng)?;
        let ae = autoencoder_step(&mut ck.bundle, &batch, &mut ck.optimizers, c.lambda_adv)?;
        ck.step += 1;
        let record = StepRecord {
            step: ck.step,
            reconstruction: ae.reconstruction,
            classifier_loss: cls.loss,
            adversarial: ae.adversarial,
            code_accuracy: cls.accuracy,
        };
        self.log.records.push(record);
        Ok(record)
    }

    /// Final state with gradient slots cleared, as a loaded checkpoint has.
    pub fn finish(mut self) -> (Checkpoint, TrainLog) {
        let bundle = &mut self.checkpoint.bundle;
        bundle.encoder.zero_grads();
        bundle.decoders.iter_mut().for_each(|d| d.zero_grads());
        bundle.classifier.zero_grads();
        (self.checkpoint, self.log)
    }
}

pub fn train_loop(dataset: &Dataset, config: &TrainConfig) -> Result<(Checkpoint, TrainLog), TrainError> {
    train_loop_with(dataset, config, |_| {})
}

/// [`train_loop`] with a callback after every round.
pub fn train_loop_with(
    dataset: &Dataset,
    config: &TrainConfig,
    mut on_step: impl FnMut(&StepRecord),
) -> Result<(Checkpoint, TrainLog), TrainError> {
    let mut trainer = Trainer::new(dataset, config)?;
    for _ in 0..config.steps {
        let record = trainer.round()?;
        on_step(&record);
    }
    Ok(trainer.finish())
}

// ---------------------------------------------------------------------------
// Checkpoint format
//
//   "VCAE" | u16 version | u64 step | u32 len + config text
//   | u32 n_speakers + (u32 len + utf8)* | u32 n_mels, hidden, code
//   | u32 n_groups + u64 adam step* | u32 n_tensors + (u8 rank + u32 extent*)*
//   | fp32 payload | u32 crc32 of everything before
//
// Tensor order: every network's parameters (encoder, decoders, classifier),
// then per network the first moments followed by the second moments.

fn network_tensors<'c>(ck: &'c Checkpoint) -> Vec<(Vec<usize>, &'c [f32])> {
    let mut out = Vec::new();
    for net in ck.bundle.networks() {
        for p in net.params() {
            out.push((p.shape.clone(), &p.values[..]));
        }
    }
    for (net, opt) in ck.bundle.networks().zip(ck.optimizers.groups()) {
        let shapes: Vec<_> = net.params().iter().map(|p| p.shape.clone()).collect();
        for moments in [&opt.first_moment, &opt.second_moment] {
            for (shape, m) in shapes.iter().zip(moments.iter()) {
                out.push((shape.clone(), &m[..]));
            }
        }
    }
    out
}

pub fn encode_checkpoint(ck: &Checkpoint) -> Vec<u8> {
    let mut b = Vec::new();
    b.extend_from_slice(CHECKPOINT_MAGIC);
    b.extend_from_slice(&CHECKPOINT_VERSION.to_le_bytes());
    b.extend_from_slice(&ck.step.to_le_bytes());
    let put_str = |b: &mut Vec<u8>, s: &str| {
        b.extend_from_slice(&(s.len() as u32).to_le_bytes());
        b.extend_from_slice(s.as_bytes());
    };
    put_str(&mut b, &ck.config.to_kv().render());
    b.extend_from_slice(&(ck.bundle.speakers.len() as u32).to_le_bytes());
    for s in &ck.bundle.speakers {
        put_str(&mut b, s);
    }
    let arch = ck.bundle.arch;
    for v in [arch.n_mels, arch.hidden_channels, arch.code_channels] {
        b.extend_from_slice(&(v as u32).to_le_bytes());
    }
    let groups: Vec<_> = ck.optimizers.groups().collect();
    b.extend_from_slice(&(groups.len() as u32).to_le_bytes());
    for g in groups {
        b.extend_from_slice(&g.step.to_le_bytes());
    }
    let tensors = network_tensors(ck);
    b.extend_from_slice(&(tensors.len() as u32).to_le_bytes());
    for (shape, _) in &tensors {
        b.push(shape.len() as u8);
        for &d in shape {
            b.extend_from_slice(&(d as u32).to_le_bytes());
        }
    }
    for (_, values) in &tensors {
        for v in *values {
            b.extend_from_slice(&v.to_le_bytes());
        }
    }
    let crc = crc32fast::hash(&b);
    b.extend_from_slice(&crc.to_le_bytes());
    b
}

struct Reader<'a> {
    bytes: &'a [u8],
    pos: usize,
}

impl<'a> Reader<'a> {
    fn take(&mut self, n: usize) -> Result<&'a [u8], TrainError> {
        let end = self
            .pos
            .checked_add(n)
            .filter(|&e| e <= self.bytes.len())
            .ok_or_else(|| TrainError::MalformedCheckpoint("unexpected end of data".into()))?;
        let s = &self.bytes[self.pos..end];
        self.pos = end;
        Ok(s)
    }

    fn u8(&mut self) -> Result<u8, TrainError> {
        Ok(self.take(1)?[0])
    }

    fn u32(&mut self) -> Result<u32, TrainError> {
        Ok(u32::from_le_bytes(self.take(4)?.try_into().expect("4 bytes")))
    }

    fn u64(&mut self) -> Result<u64, TrainError> {
        Ok(u64::from_le_bytes(self.take(8)?.try_into().expect("8 bytes")))
    }

    fn string(&mut self) -> Result<String, TrainError> {
        let n = self.u32()? as usize;
        String::from_utf8(self.take(n)?.to_vec())
            .map_err(|_| TrainError::MalformedCheckpoint("string is not UTF-8".into()))
    }
}

pub fn decode_checkpoint(bytes: &[u8]) -> Result<Checkpoint, TrainError> {
    if bytes.len() < 6 || &bytes[..4] != CHECKPOINT_MAGIC {
        return Err(TrainError::MalformedCheckpoint("missing VCAE magic".into()));
    }
    let version = u16::from_le_bytes([bytes[4], bytes[5]]);
    if version != CHECKPOINT_VERSION {
        return Err(TrainError::VersionMismatch { found: version });
    }
    if bytes.len() < 10 {
        return Err(TrainError::CorruptChecksum);
    }
    let (body, tail) = bytes.split_at(bytes.len() - 4);
    let stored = u32::from_le_bytes(tail.try_into().expect("4 bytes"));
    if crc32fast::hash(body) != stored {
        return Err(TrainError::CorruptChecksum);
    }

    let malformed = |m: String| TrainError::MalformedCheckpoint(m);
    let mut r = Reader { bytes: body, pos: 6 };
    let step = r.u64()?;
    let config_text = r.string()?;
    let config = TrainConfig::from_kv(&KvConfig::parse(&config_text)?)?;
    let n_speakers = r.u32()? as usize;
    let speakers = (0..n_speakers).map(|_| r.string()).collect::<Result<Vec<_>, _>>()?;
    let arch = ArchConfig {
        n_mels: r.u32()? as usize,
        hidden_channels: r.u32()? as usize,
        code_channels: r.u32()? as usize,
    };
    if arch != config.arch() {
        return Err(malformed("architecture header disagrees with config echo".into()));
    }
    let mut ck = Checkpoint::initial(&speakers, &config)?;
    ck.step = step;

    let n_groups = r.u32()? as usize;
    if n_groups != n_speakers + 2 {
        return Err(malformed(format!("{n_groups} optimizer groups for {n_speakers} speakers")));
    }
    for g in ck.optimizers.groups_mut() {
        g.step = r.u64()?;
    }

    let n_tensors = r.u32()? as usize;
    let expected: Vec<Vec<usize>> = network_tensors(&ck).into_iter().map(|(s, _)| s).collect();
    if n_tensors != expected.len() {
        return Err(malformed(format!("{n_tensors} tensors, expected {}", expected.len())));
    }
    for (i, want) in expected.iter().enumerate() {
        let rank = r.u8()? as usize;
        let shape = (0..rank).map(|_| r.u32().map(|d| d as usize)).collect::<Result<Vec<_>, _>>()?;
        if &shape != want {
            return Err(malformed(format!("tensor {i} has shape {shape:?}, expected {want:?}")));
        }
    }

    let mut read_into = |dst: &mut [f32]| -> Result<(), TrainError> {
        let raw = r.take(dst.len() * 4)?;
        for (d, c) in dst.iter_mut().zip(raw.chunks_exact(4)) {
            *d = f32::from_le_bytes(c.try_into().expect("4 bytes"));
        }
        Ok(())
    };
    let Checkpoint {
        bundle, optimizers, ..
    } = &mut ck;
    for p in bundle_params_mut(bundle) {
        read_into(&mut p.values)?;
    }
    for opt in optimizers.groups_mut() {
        for m in opt.first_moment.iter_mut().chain(opt.second_moment.iter_mut()) {
            read_into(m)?;
        }
    }
    if r.pos != body.len() {
        return Err(malformed("trailing bytes after payload".into()));
    }
    Ok(ck)
}

fn bundle_params_mut(bundle: &mut ModelBundle<f32>) -> Vec<&mut Tensor<f32>> {
    let mut out = bundle.encoder.params_mut();
    for d in &mut bundle.decoders {
        out.extend(d.params_mut());
    }
    out.extend(bundle.classifier.params_mut());
    out
}

pub fn save_checkpoint(path: &Path, ck: &Checkpoint) -> Result<(), TrainError> {
    Ok(write_atomic(path, &encode_checkpoint(ck))?)
}

pub fn load_checkpoint(path: &Path) -> Result<Checkpoint, TrainError> {
    decode_checkpoint(&std::fs::read(path)?)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::autodiff::AdamConfig;

    fn tiny_config() -> TrainConfig {
        TrainConfig {
            batch_size: 8,
            segment_frames: 8,
            hidden_channels: 12,
            code_channels: 6,
            features: FeatureSettings {
                n_mels: 10,
                ..FeatureSettings::default()
            },
            adam: AdamConfig {
                lr: 3e-3,
                ..AdamConfig::default()
            },
            ..TrainConfig::default()
        }
    }

    /// Speakers differ in which half of the bands carries the energy.
    fn toy_dataset(n_speakers: usize, per_speaker: usize, frames: usize, n_mels: usize, seed: u64) -> Dataset {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut items = Vec::new();
        for s in 0..n_speakers {
            for _ in 0..per_speaker {
                let values = (0..n_mels * frames)
                    .map(|i| {
                        let band = i / frames;
                        let base = if band % n_speakers == s { 0.8 } else { 0.1 };
                        base + rng.gen_range(0.0..0.2f32)
                    })
                    .collect();
                items.push(Utterance {
                    mel: Tensor::new(vec![n_mels, frames], values).unwrap(),
                    speaker: s,
                });
            }
        }
        let speakers = (0..n_speakers).map(|s| format!("s{s}")).collect();
        Dataset::new(items, speakers).unwrap()
    }

    #[test]
    fn forced_crop_returns_whole_utterance() {
        let ds = toy_dataset(2, 1, 8, 10, 1);
        let one = Dataset::new(vec![ds.items[0].clone()], ds.speakers.clone()).unwrap();
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let batch = sample_batch(&one, 5, 8, &mut rng).unwrap();
        for item in batch.mels.values.chunks_exact(80) {
            assert_eq!(item, &one.items[0].mel.values[..]);
        }
        assert_eq!(batch.labels, vec![0; 5]);
    }

    #[test]
    fn sampling_is_seed_deterministic() {
        let ds = toy_dataset(3, 2, 20, 10, 2);
        let draw = |seed| {
            let mut rng = ChaCha8Rng::seed_from_u64(seed);
            (0..5).map(|_| sample_batch(&ds, 3, 8, &mut rng).unwrap()).collect::<Vec<_>>()
        };
        assert_eq!(draw(7), draw(7));
        assert_ne!(draw(7), draw(8));
    }

    #[test]
    fn balanced_speaker_frequencies_within_three_sigma() {
        let ds = toy_dataset(4, 3, 10, 4, 3);
        let mut rng = ChaCha8Rng::seed_from_u64(11);
        let mut counts = [0usize; 4];
        for _ in 0..10_000 {
            let b = sample_batch(&ds, 1, 4, &mut rng).unwrap();
            counts[b.labels[0]] += 1;
        }
        let n = 10_000.0;
        let sigma = (n * 0.25 * 0.75f64).sqrt();
        for c in counts {
            assert!((c as f64 - n * 0.25).abs() <= 3.0 * sigma, "{counts:?}");
        }
    }

    #[test]
    fn sampling_errors() {
        let ds = toy_dataset(2, 1, 6, 4, 4);
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        assert!(matches!(
            sample_batch(&ds, 2, 7, &mut rng),
            Err(TrainError::UtteranceTooShort { frames: 6, needed: 7, .. })
        ));
        let empty = Dataset::new(vec![], ds.speakers.clone()).unwrap();
        assert!(matches!(sample_batch(&empty, 2, 4, &mut rng), Err(TrainError::EmptyDataset)));
    }

    #[test]
    fn dataset_validation() {
        let ds = toy_dataset(2, 1, 6, 4, 4);
        let mut items = ds.items.clone();
        items[0].speaker = 5;
        assert!(matches!(
            Dataset::new(items, ds.speakers.clone()),
            Err(TrainError::UnknownSpeaker { speaker: 5, .. })
        ));
    }

    #[test]
    fn classifier_step_leaves_encoder_and_decoders_bitwise() {
        let config = tiny_config();
        let ds = toy_dataset(2, 2, 16, 10, 5);
        let mut ck = Checkpoint::initial(&ds.speakers, &config).unwrap();
        let before = ck.bundle.clone();
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let batch = sample_batch(&ds, 4, 8, &mut rng).unwrap();
        classifier_step(&mut ck.bundle, &batch, &mut ck.optimizers.classifier).unwrap();
        assert_eq!(ck.bundle.encoder, before.encoder);
        assert_eq!(ck.bundle.decoders, before.decoders);
        assert_ne!(ck.bundle.classifier, before.classifier);
    }

    #[test]
    fn autoencoder_step_leaves_classifier_bitwise() {
        let config = tiny_config();
        let ds = toy_dataset(3, 2, 16, 10, 6);
        let mut ck = Checkpoint::initial(&ds.speakers, &config).unwrap();
        let before = ck.clone();
        // only speakers 0 and 2 appear in this batch
        let items = [0, 4, 5, 1].map(|i| crop(&ds.items[i], 0, 8)).concat();
        let batch = Batch {
            mels: Tensor::new(vec![4, 10, 8], items).unwrap(),
            labels: vec![0, 2, 2, 0],
        };
        autoencoder_step(&mut ck.bundle, &batch, &mut ck.optimizers, 1.0).unwrap();
        assert_eq!(ck.bundle.classifier, before.bundle.classifier);
        assert_eq!(ck.optimizers.classifier, before.optimizers.classifier);
        assert_ne!(ck.bundle.encoder, before.bundle.encoder);
        assert_ne!(ck.bundle.decoders[0], before.bundle.decoders[0]);
        assert_eq!(ck.bundle.decoders[1], before.bundle.decoders[1]);
        assert_ne!(ck.bundle.decoders[2], before.bundle.decoders[2]);
        assert_eq!(ck.optimizers.decoders[1].step, 0);
    }

    #[test]
    fn separable_codes_are_learned_by_classifier() {
        // Identity-like frozen encoder: code channels == input channels and
        // the encoder is replaced by a pass-through so the classifier sees
        // inputs separable by channel mean.
        let config = TrainConfig {
            code_channels: 10,
            ..tiny_config()
        };
        let ds = toy_dataset(2, 3, 16, 10, 7);
        let mut ck = Checkpoint::initial(&ds.speakers, &config).unwrap();
        let mut rng = ChaCha8Rng::seed_from_u64(2);
        let mut last = 0.0;
        for _ in 0..500 {
            let batch = sample_batch(&ds, 8, 8, &mut rng).unwrap();
            let mut g = Graph::new();
            let code = g.constant(&batch.mels);
            let (logits, vars) = ck.bundle.classifier_forward(&mut g, code, true).unwrap();
            let n = 2;
            last = g
                .value(logits)
                .chunks_exact(n)
                .zip(&batch.labels)
                .filter(|(r, &l)| argmax(r) == l)
                .count() as f32
                / 8.0;
            let loss = g.cross_entropy(logits, &batch.labels).unwrap();
            g.backward(loss).unwrap();
            ck.bundle.classifier.accumulate_grads(&g, &vars);
            adam_step(&mut ck.bundle.classifier.params_mut(), &mut ck.optimizers.classifier).unwrap();
        }
        assert!(last > 0.95, "{last}");
    }

    #[test]
    fn classifier_loss_trends_down() {
        let config = tiny_config();
        let ds = toy_dataset(2, 3, 16, 10, 8);
        let mut ck = Checkpoint::initial(&ds.speakers, &config).unwrap();
        let mut rng = ChaCha8Rng::seed_from_u64(4);
        let losses: Vec<f32> = (0..300)
            .map(|_| {
                let batch = sample_batch(&ds, 4, 8, &mut rng).unwrap();
                classifier_step(&mut ck.bundle, &batch, &mut ck.optimizers.classifier)
                    .unwrap()
                    .loss
            })
            .collect();
        let first: f32 = losses[..100].iter().sum::<f32>() / 100.0;
        let last: f32 = losses[200..].iter().sum::<f32>() / 100.0;
        assert!(last <= first, "{first} -> {last}");
    }

    #[test]
    fn adversarial_gradient_reaches_encoder() {
        let config = tiny_config();
        let ds = toy_dataset(2, 2, 16, 10, 9);
        let ck = Checkpoint::initial(&ds.speakers, &config).unwrap();
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        let batch = sample_batch(&ds, 4, 8, &mut rng).unwrap();
        let mut g = Graph::new();
        let x = g.constant(&batch.mels);
        let (code, vars) = ck.bundle.encoder_forward(&mut g, x, true).unwrap();
        let (logits, _) = ck.bundle.classifier_forward(&mut g, code, false).unwrap();
        let ce = g.cross_entropy(logits, &batch.labels).unwrap();
        let adv = g.scale(ce, -1.0);
        g.backward(adv).unwrap();
        let nonzero = vars.0.iter().any(|&v| g.grad(v).unwrap().iter().any(|&x| x != 0.0));
        assert!(nonzero);
    }

    #[test]
    fn pure_autoencoder_overfits_two_utterances() {
        let config = TrainConfig {
            lambda_adv: 0.0,
            ..tiny_config()
        };
        let full = toy_dataset(2, 1, 8, 10, 10);
        let mut ck = Checkpoint::initial(&full.speakers, &config).unwrap();
        let batch = Batch {
            mels: Tensor::new(vec![2, 10, 8], [crop(&full.items[0], 0, 8), crop(&full.items[1], 0, 8)].concat())
                .unwrap(),
            labels: vec![0, 1],
        };
        let mut history = Vec::new();
        for _ in 0..2000 {
            let s = autoencoder_step(&mut ck.bundle, &batch, &mut ck.optimizers, 0.0).unwrap();
            history.push(s.reconstruction);
        }
        let initial = history[0];
        assert!(*history.last().unwrap() < 0.05 * initial, "{initial} -> {:?}", history.last());
        // 500-step moving average never increases
        let windows: Vec<f32> = history.windows(500).step_by(100).map(|w| w.iter().sum::<f32>()).collect();
        for w in windows.windows(2) {
            assert!(w[1] <= w[0], "{windows:?}");
        }
    }

    #[test]
    fn zero_steps_returns_initialization() {
        let config = TrainConfig {
            steps: 0,
            ..tiny_config()
        };
        let ds = toy_dataset(2, 2, 16, 10, 11);
        let (ck, log) = train_loop(&ds, &config).unwrap();
        assert_eq!(ck, Checkpoint::initial(&ds.speakers, &config).unwrap());
        assert!(log.records.is_empty());
    }

    #[test]
    fn training_is_deterministic_and_logs_every_round() {
        let config = TrainConfig {
            steps: 25,
            ..tiny_config()
        };
        let ds = toy_dataset(2, 2, 16, 10, 12);
        let (a, la) = train_loop(&ds, &config).unwrap();
        let (b, lb) = train_loop(&ds, &config).unwrap();
        assert_eq!(encode_checkpoint(&a), encode_checkpoint(&b));
        assert_eq!(la.to_csv(), lb.to_csv());
        assert_eq!(la.records.len(), 25);
        assert_eq!(a.step, 25);
        assert!(la.records.iter().all(|r| r.reconstruction.is_finite() && r.adversarial.is_finite()));
        let other = TrainConfig { seed: 1, ..config };
        assert_ne!(train_loop(&ds, &other).unwrap().1, la);
    }

    #[test]
    fn ratio_runs_extra_classifier_steps() {
        let config = TrainConfig {
            steps: 3,
            classifier_steps_per_ae_step: 2,
            ..tiny_config()
        };
        let ds = toy_dataset(2, 2, 16, 10, 13);
        let (ck, _) = train_loop(&ds, &config).unwrap();
        assert_eq!(ck.optimizers.classifier.step, 6);
        assert_eq!(ck.optimizers.encoder.step, 3);
    }

    #[test]
    fn train_loop_rejects_bad_inputs() {
        let ds = toy_dataset(2, 1, 6, 10, 14);
        assert!(matches!(
            train_loop(&ds, &tiny_config()),
            Err(TrainError::UtteranceTooShort { .. })
        ));
        let one = Dataset::new(ds.items[..1].to_vec(), vec!["a".into()]).unwrap();
        assert!(matches!(
            train_loop(&one, &tiny_config()),
            Err(TrainError::Model(ModelError::TooFewSpeakers(1)))
        ));
    }

    #[test]
    fn config_kv_round_trip_and_validation() {
        let mut c = tiny_config();
        c.adam.lr = 0.000123;
        c.lambda_adv = 0.3;
        c.features.log_mel = true;
        assert_eq!(TrainConfig::from_kv(&c.to_kv()).unwrap(), c);
        let mut kv = KvConfig::new();
        kv.set("bogus", 1);
        assert_eq!(TrainConfig::from_kv(&kv), Err(ConfigError::UnknownKey("bogus".into())));
        let mut kv = KvConfig::new();
        kv.set("lambda_adv", -1);
        assert!(matches!(TrainConfig::from_kv(&kv), Err(ConfigError::Constraint(_))));
        let mut kv = KvConfig::new();
        kv.set("batch_size", 0);
        assert!(matches!(TrainConfig::from_kv(&kv), Err(ConfigError::Constraint(_))));
        let mut kv = KvConfig::new();
        kv.set("steps", "ten");
        assert!(matches!(TrainConfig::from_kv(&kv), Err(ConfigError::InvalidValue { .. })));
    }

    fn trained_checkpoint() -> Checkpoint {
        let config = TrainConfig {
            steps: 5,
            ..tiny_config()
        };
        let ds = toy_dataset(3, 1, 16, 10, 15);
        train_loop(&ds, &config).unwrap().0
    }

    #[test]
    fn checkpoint_round_trips_bitwise() {
        let ck = trained_checkpoint();
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("model.vcae");
        save_checkpoint(&path, &ck).unwrap();
        let loaded = load_checkpoint(&path).unwrap();
        assert_eq!(loaded, ck);
        assert_eq!(encode_checkpoint(&loaded), std::fs::read(&path).unwrap());
    }

    #[test]
    fn checkpoint_corruption_is_detected() {
        let bytes = encode_checkpoint(&trained_checkpoint());
        for cut in [7, bytes.len() / 2, bytes.len() - 1] {
            assert!(matches!(decode_checkpoint(&bytes[..cut]), Err(TrainError::CorruptChecksum)));
        }
        let mut flipped = bytes.clone();
        flipped[100] ^= 1;
        assert!(matches!(decode_checkpoint(&flipped), Err(TrainError::CorruptChecksum)));
        let mut bumped = bytes.clone();
        bumped[4] += 1;
        assert!(matches!(
            decode_checkpoint(&bumped),
            Err(TrainError::VersionMismatch { found: 2 })
        ));
        assert!(matches!(decode_checkpoint(b"RIFF...."), Err(TrainError::MalformedCheckpoint(_))));
    }

    #[test]
    fn missing_checkpoint_is_io_failure() {
        assert!(matches!(
            load_checkpoint(Path::new("/nonexistent/x.vcae")),
            Err(TrainError::IoFailure(_))
        ));
    }
}
