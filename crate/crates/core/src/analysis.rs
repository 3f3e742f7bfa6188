//! Mutual-information bounds from classifier error, and objective metrics
//! for trained models: reconstruction error, code-classifier error, a
//! from-scratch probe on frozen codes, and spectral-centroid shift.
//!
//! For a label `L` uniform over `n` classes and any classifier with error
//! probability `p`:
//!
//! ```text
//! log2 n − h(p) − p·log2(n − 1)  ≤  I(L; Z)  ≤  log2 n + log2(1 − p*)
//! ```
//!
//! where the upper bound needs the error `p*` of the *best* classifier.
//! Reports plug the empirical error into both and flag the upper bound.

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use thiserror::Error;

use crate::autodiff::{adam_step, AdamConfig, AdamState, Graph, Tensor};
use crate::dsp::MelSpectrogram;
use crate::model::{argmax, LatentCode, ModelBundle, ModelError, Network, NetworkSpec};
use crate::train::{crop, sample_batch, Batch, Dataset, TrainError};

#[derive(Debug, Error)]
pub enum AnalysisError {
    #[error("{what} = {value} out of range")]
    OutOfRange { what: &'static str, value: f64 },
    #[error("spectrogram has no energy, centroid undefined")]
    SilentInput,
    #[error("source and target centroids coincide, shift undefined")]
    NoContrast,
    #[error("dataset speakers {dataset:?} do not match model speakers {model:?}")]
    SpeakerMismatch {
        dataset: Vec<String>,
        model: Vec<String>,
    },
    #[error("no segment of {0} frames available for evaluation")]
    NoSegments(usize),
    #[error(transparent)]
    Model(#[from] ModelError),
    #[error(transparent)]
    Train(#[from] TrainError),
}

fn check_probability(what: &'static str, p: f64) -> Result<(), AnalysisError> {
    if (0.0..=1.0).contains(&p) {
        Ok(())
    } else {
        Err(AnalysisError::OutOfRange { what, value: p })
    }
}

fn check_classes(n: usize) -> Result<(), AnalysisError> {
    if n >= 2 {
        Ok(())
    } else {
        Err(AnalysisError::OutOfRange {
            what: "class count",
            value: n as f64,
        })
    }
}

fn xlog2x(x: f64) -> f64 {
    if x == 0.0 {
        0.0
    } else {
        x * x.log2()
    }
}

/// `h(p)` in bits.
pub fn binary_entropy(p: f64) -> Result<f64, AnalysisError> {
    check_probability("p", p)?;
    Ok(-xlog2x(p) - xlog2x(1.0 - p))
}

/// Entropy in bits of the empirical distribution given by `counts`.
pub fn label_entropy(counts: &[usize]) -> f64 {
    let total: usize = counts.iter().sum();
    if total == 0 {
        return 0.0;
    }
    -counts
        .iter()
        .map(|&c| xlog2x(c as f64 / total as f64))
        .sum::<f64>()
}

/// Lower bound with label entropy `h_l` instead of `log2 n`.
pub fn mi_lower_bound_with_entropy(p_e: f64, n: usize, h_l: f64) -> Result<f64, AnalysisError> {
    check_probability("p_e", p_e)?;
    check_classes(n)?;
    Ok(h_l - binary_entropy(p_e)? - p_e * ((n - 1) as f64).log2())
}

/// Upper bound with label entropy `h_l` instead of `log2 n`.
pub fn mi_upper_bound_with_entropy(p_e_star: f64, n: usize, h_l: f64) -> Result<f64, AnalysisError> {
    check_probability("p_e_star", p_e_star)?;
    check_classes(n)?;
    if p_e_star == 1.0 {
        return Err(AnalysisError::OutOfRange {
            what: "p_e_star",
            value: 1.0,
        });
    }
    Ok(h_l + (1.0 - p_e_star).log2())
}

pub fn mi_lower_bound(p_e: f64, n: usize) -> Result<f64, AnalysisError> {
    check_classes(n)?;
    mi_lower_bound_with_entropy(p_e, n, (n as f64).log2())
}

pub fn mi_upper_bound(p_e_star: f64, n: usize) -> Result<f64, AnalysisError> {
    check_classes(n)?;
    mi_upper_bound_with_entropy(p_e_star, n, (n as f64).log2())
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct BoundsSample {
    pub p: f64,
    pub lower_bits: f64,
    /// `None` past `p = 1 − 1/n`, where no classifier can be optimal.
    pub upper_bits: Option<f64>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct BoundsCurve {
    pub n_classes: usize,
    pub samples: Vec<BoundsSample>,
}

impl BoundsCurve {
    pub fn to_csv(&self) -> String {
        let mut s = String::from("p,lower_bits,upper_bits\n");
        for x in &self.samples {
            let upper = x.upper_bits.map(|u| u.to_string()).unwrap_or_default();
            s.push_str(&format!("{},{},{}\n", x.p, x.lower_bits, upper));
        }
        s
    }
}

/// Both bounds on `grid_points` evenly spaced error rates in `[0, 1]`.
pub fn bounds_curve(n: usize, grid_points: usize) -> Result<BoundsCurve, AnalysisError> {
    check_classes(n)?;
    if grid_points < 2 {
        return Err(AnalysisError::OutOfRange {
            what: "grid_points",
            value: grid_points as f64,
        });
    }
    let chance = 1.0 - 1.0 / n as f64;
    let last = (grid_points - 1) as f64;
    let samples = (0..grid_points)
        .map(|i| {
            let p = i as f64 / last;
            let upper = if p <= chance + 1e-12 {
                Some(mi_upper_bound(p, n)?)
            } else {
                None
            };
            Ok(BoundsSample {
                p,
                lower_bits: mi_lower_bound(p, n)?,
                upper_bits: upper,
            })
        })
        .collect::<Result<_, AnalysisError>>()?;
    Ok(BoundsCurve { n_classes: n, samples })
}

/// Mel-band index centroid of the time-averaged spectrum.
pub fn mel_centroid(mel: &MelSpectrogram) -> Result<f64, AnalysisError> {
    band_centroid(&band_energies(std::slice::from_ref(mel)))
}

fn band_energies(mels: &[MelSpectrogram]) -> Vec<f64> {
    let n_mels = mels.first().map_or(0, |m| m.n_mels);
    let mut e = vec![0.0; n_mels];
    let mut frames = 0usize;
    for mel in mels {
        for (m, row) in mel.magnitudes.chunks_exact(mel.frames.max(1)).enumerate().take(n_mels) {
            e[m] += row.iter().map(|v| v.max(0.0)).sum::<f64>();
        }
        frames += mel.frames;
    }
    e.iter_mut().for_each(|v| *v /= frames.max(1) as f64);
    e
}

fn band_centroid(e: &[f64]) -> Result<f64, AnalysisError> {
    let total: f64 = e.iter().sum();
    if !(total > 0.0) {
        return Err(AnalysisError::SilentInput);
    }
    Ok(e.iter().enumerate().map(|(m, v)| m as f64 * v).sum::<f64>() / total)
}

/// `(c(converted) − c(source)) / (c(target) − c(source))`, with `c` the
/// mel-band centroid; target references are pooled over all their frames.
pub fn spectral_centroid_shift(
    source: &MelSpectrogram,
    converted: &MelSpectrogram,
    target_refs: &[MelSpectrogram],
) -> Result<f64, AnalysisError> {
    let c_src = mel_centroid(source)?;
    let c_conv = mel_centroid(converted)?;
    let c_tgt = band_centroid(&band_energies(target_refs))?;
    let contrast = c_tgt - c_src;
    if contrast.abs() < 1e-9 {
        return Err(AnalysisError::NoContrast);
    }
    Ok((c_conv - c_src) / contrast)
}

/// Non-overlapping `segment_frames` crops of every utterance.
pub fn segments(dataset: &Dataset, segment_frames: usize) -> Vec<(Tensor<f32>, usize)> {
    let mut out = Vec::new();
    for u in &dataset.items {
        let n_mels = u.n_mels();
        let mut start = 0;
        while start + segment_frames <= u.frames() {
            let values = crop(u, start, segment_frames);
            out.push((
                Tensor::new(vec![n_mels, segment_frames], values).expect("crop shape"),
                u.speaker,
            ));
            start += segment_frames;
        }
    }
    out
}

#[derive(Debug, Clone, PartialEq)]
pub struct PairShift {
    pub source: String,
    pub target: String,
    pub shift: f64,
}

#[derive(Debug, Clone, PartialEq)]
pub struct MetricsReport {
    pub n_speakers: usize,
    /// Mean absolute reconstruction error per speaker.
    pub reconstruction_l1: Vec<(String, f64)>,
    pub code_classifier_error: f64,
    pub mi_lower_bits: f64,
    /// `None` when the error is 1 and the bound diverges.
    pub mi_upper_bits: Option<f64>,
    /// The upper bound holds only for an optimal classifier.
    pub upper_bound_requires_optimal_classifier: bool,
    pub centroid_shifts: Vec<PairShift>,
}

impl MetricsReport {
    pub fn mean_reconstruction(&self) -> f64 {
        let n = self.reconstruction_l1.len().max(1) as f64;
        self.reconstruction_l1.iter().map(|(_, v)| v).sum::<f64>() / n
    }

    pub fn to_csv(&self) -> String {
        let mut s = String::from("metric,value\n");
        for (speaker, v) in &self.reconstruction_l1 {
            s.push_str(&format!("reconstruction_l1[{speaker}],{v}\n"));
        }
        s.push_str(&format!("reconstruction_l1_mean,{}\n", self.mean_reconstruction()));
        s.push_str(&format!("code_classifier_error,{}\n", self.code_classifier_error));
        s.push_str(&format!("mi_lower_bits,{}\n", self.mi_lower_bits));
        let upper = self.mi_upper_bits.map(|u| u.to_string()).unwrap_or_default();
        s.push_str(&format!("mi_upper_bits,{upper}\n"));
        s.push_str(&format!(
            "mi_upper_requires_optimal_classifier,{}\n",
            self.upper_bound_requires_optimal_classifier
        ));
        for p in &self.centroid_shifts {
            s.push_str(&format!("centroid_shift[{}->{}],{}\n", p.source, p.target, p.shift));
        }
        s
    }
}

fn to_tensor(mel: &Tensor<f32>) -> Tensor<f32> {
    Tensor::new(mel.shape.clone(), mel.values.clone()).expect("valid tensor")
}

/// Reconstruction per speaker on whole utterances and the trained
/// classifier's error on `segment_frames` segments of the codes.
pub fn evaluate_model(
    bundle: &ModelBundle<f32>,
    heldout: &Dataset,
    segment_frames: usize,
) -> Result<MetricsReport, AnalysisError> {
    if heldout.speakers != bundle.speakers {
        return Err(AnalysisError::SpeakerMismatch {
            dataset: heldout.speakers.clone(),
            model: bundle.speakers.clone(),
        });
    }
    if heldout.is_empty() {
        return Err(TrainError::EmptyDataset.into());
    }
    let n = bundle.n_speakers();
    let mut sums = vec![(0.0f64, 0usize); n];
    for u in &heldout.items {
        let code = bundle.encode(&to_tensor(&u.mel))?;
        let out = bundle.decode_index(u.speaker, &code)?;
        let err: f64 = out
            .values
            .iter()
            .zip(&u.mel.values)
            .map(|(a, b)| f64::from((a - b).abs()))
            .sum();
        sums[u.speaker].0 += err;
        sums[u.speaker].1 += u.mel.numel();
    }
    let reconstruction_l1 = bundle
        .speakers
        .iter()
        .zip(&sums)
        .filter(|(_, (_, count))| *count > 0)
        .map(|(s, (e, count))| (s.clone(), e / *count as f64))
        .collect();

    let segs = segments(heldout, segment_frames);
    if segs.is_empty() {
        return Err(AnalysisError::NoSegments(segment_frames));
    }
    let errors = segs
        .iter()
        .map(|(x, label)| Ok(argmax(&bundle.classify(&bundle.encode(x)?)?) != *label))
        .collect::<Result<Vec<bool>, ModelError>>()?
        .into_iter()
        .filter(|&wrong| wrong)
        .count();
    let p_e = errors as f64 / segs.len() as f64;
    Ok(MetricsReport {
        n_speakers: n,
        reconstruction_l1,
        code_classifier_error: p_e,
        mi_lower_bits: mi_lower_bound(p_e, n)?,
        mi_upper_bits: mi_upper_bound(p_e, n).ok(),
        upper_bound_requires_optimal_classifier: true,
        centroid_shifts: Vec::new(),
    })
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct ProbeConfig {
    pub steps: u64,
    pub batch_size: usize,
    pub segment_frames: usize,
    pub hidden_channels: usize,
    pub adam: AdamConfig,
    pub seed: u64,
}

impl Default for ProbeConfig {
    fn default() -> Self {
        Self {
            steps: 2000,
            batch_size: 8,
            segment_frames: 64,
            hidden_channels: 256,
            adam: AdamConfig::default(),
            seed: 0,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct ProbeReport {
    /// Accuracy over the last 10% of training batches.
    pub train_accuracy: f64,
    pub heldout_accuracy: f64,
    pub heldout_segments: usize,
}

/// Probe logits averaged over time for a batched code.
fn probe_logits(g: &mut Graph<f32>, probe: &Network<f32>, code: &Tensor<f32>) -> Result<Vec<f32>, ModelError> {
    let x = g.constant(code);
    let (frames, _) = probe.forward(g, x, false)?;
    let logits = g.mean_time(frames)?;
    Ok(g.value(logits).to_vec())
}

/// Train a freshly initialized classifier, with the trained classifier's
/// architecture, on codes from the frozen encoder; report its accuracy on
/// non-overlapping segments of `heldout`.
pub fn retrain_probe(
    bundle: &ModelBundle<f32>,
    train: &Dataset,
    heldout: &Dataset,
    config: &ProbeConfig,
) -> Result<ProbeReport, AnalysisError> {
    for ds in [train, heldout] {
        if ds.speakers != bundle.speakers {
            return Err(AnalysisError::SpeakerMismatch {
                dataset: ds.speakers.clone(),
                model: bundle.speakers.clone(),
            });
        }
    }
    train.check_segments(config.segment_frames)?;
    let n = bundle.n_speakers();
    let spec = NetworkSpec::three_layer(bundle.arch.code_channels, config.hidden_channels, n);
    let mut init_rng = ChaCha8Rng::seed_from_u64(config.seed);
    let mut probe = Network::<f32>::init(spec, &mut init_rng);
    let mut state = AdamState::new(config.adam, probe.params());
    let mut rng = ChaCha8Rng::seed_from_u64(config.seed);
    rng.set_stream(1);

    let tail = (config.steps / 10).max(1);
    let (mut hits, mut seen) = (0usize, 0usize);
    for step in 0..config.steps {
        let Batch { mels, labels } = sample_batch(train, config.batch_size, config.segment_frames, &mut rng)?;
        let code = bundle.encode(&mels)?;
        let mut g = Graph::new();
        let x = g.constant(&code.0);
        let (frames, vars) = probe.forward(&mut g, x, true)?;
        let logits = g.mean_time(frames).map_err(ModelError::from)?;
        if step + tail >= config.steps {
            hits += g
                .value(logits)
                .chunks_exact(n)
                .zip(&labels)
                .filter(|(row, &l)| argmax(row) == l)
                .count();
            seen += labels.len();
        }
        let loss = g.cross_entropy(logits, &labels).map_err(ModelError::from)?;
        g.backward(loss).map_err(ModelError::from)?;
        probe.accumulate_grads(&g, &vars);
        adam_step(&mut probe.params_mut(), &mut state).map_err(ModelError::from)?;
    }

    let segs = segments(heldout, config.segment_frames);
    if segs.is_empty() {
        return Err(AnalysisError::NoSegments(config.segment_frames));
    }
    let mut correct = 0usize;
    for (x, label) in &segs {
        let LatentCode(code) = bundle.encode(x)?;
        let mut g = Graph::new();
        if argmax(&probe_logits(&mut g, &probe, &code)?) == *label {
            correct += 1;
        }
    }
    Ok(ProbeReport {
        train_accuracy: if seen > 0 { hits as f64 / seen as f64 } else { 0.0 },
        heldout_accuracy: correct as f64 / segs.len() as f64,
        heldout_segments: segs.len(),
    })
}
