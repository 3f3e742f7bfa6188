//! Encoder, per-speaker decoders and speaker classifier.
//!
//! Each network is three kernel-3 convolutions. Hidden layers are followed
//! by instance normalization and ReLU; the last layer is linear so the code
//! can take either sign and decoders can match absolute magnitudes.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use thiserror::Error;

use crate::autodiff::{AutodiffError, Graph, Real, Tensor, Var};

pub const KERNEL: usize = 3;
pub const NORM_EPS: f64 = 1e-5;

#[derive(Debug, Error, PartialEq)]
pub enum ModelError {
    #[error("need at least 2 speakers, got {0}")]
    TooFewSpeakers(usize),
    #[error("duplicate speaker id {0:?}")]
    DuplicateSpeaker(String),
    #[error("unknown speaker {0:?}")]
    UnknownSpeaker(String),
    #[error("shape mismatch: {0}")]
    ShapeMismatch(String),
    #[error(transparent)]
    Autodiff(#[from] AutodiffError),
}

/// Channel widths shared by the three networks.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct ArchConfig {
    pub n_mels: usize,
    pub hidden_channels: usize,
    pub code_channels: usize,
}

impl Default for ArchConfig {
    fn default() -> Self {
        Self {
            n_mels: 128,
            hidden_channels: 256,
            code_channels: 128,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct NetworkSpec {
    pub in_channels: usize,
    /// `(out_channels, has_norm_and_relu)` per layer.
    pub layers: Vec<(usize, bool)>,
    pub kernel: usize,
}

impl NetworkSpec {
    pub fn three_layer(in_channels: usize, hidden: usize, out: usize) -> Self {
        Self {
            in_channels,
            layers: vec![(hidden, true), (hidden, true), (out, false)],
            kernel: KERNEL,
        }
    }

    pub fn out_channels(&self) -> usize {
        self.layers.last().map_or(self.in_channels, |l| l.0)
    }

    /// `Σ (C_out·C_in·k + C_out)` over layers.
    pub fn parameter_count(&self) -> usize {
        let mut c_in = self.in_channels;
        let mut total = 0;
        for &(c_out, _) in &self.layers {
            total += c_out * c_in * self.kernel + c_out;
            c_in = c_out;
        }
        total
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct ConvLayer<F> {
    pub weight: Tensor<F>,
    pub bias: Tensor<F>,
    pub norm_relu: bool,
}

#[derive(Debug, Clone, PartialEq)]
pub struct Network<F> {
    pub spec: NetworkSpec,
    pub layers: Vec<ConvLayer<F>>,
}

/// Graph handles for one network's parameters, in [`Network::params`] order.
#[derive(Debug, Clone)]
pub struct ParamVars(pub Vec<Var>);

impl<F: Real> Network<F> {
    /// Uniform init in `±sqrt(1 / (C_in·k))` for weights and biases.
    pub fn init(spec: NetworkSpec, rng: &mut ChaCha8Rng) -> Self {
        let mut c_in = spec.in_channels;
        let mut layers = Vec::with_capacity(spec.layers.len());
        for &(c_out, norm_relu) in &spec.layers {
            let bound = (1.0 / (c_in * spec.kernel) as f64).sqrt();
            let mut draw = |n: usize| -> Vec<F> {
                (0..n).map(|_| F::lit(rng.gen_range(-bound..bound))).collect()
            };
            let weight = Tensor::new(vec![c_out, c_in, spec.kernel], draw(c_out * c_in * spec.kernel))
                .expect("shape matches")
                .param();
            let bias = Tensor::new(vec![c_out], draw(c_out)).expect("shape matches").param();
            layers.push(ConvLayer {
                weight,
                bias,
                norm_relu,
            });
            c_in = c_out;
        }
        Self { spec, layers }
    }

    pub fn params(&self) -> Vec<&Tensor<F>> {
        self.layers.iter().flat_map(|l| [&l.weight, &l.bias]).collect()
    }

    pub fn params_mut(&mut self) -> Vec<&mut Tensor<F>> {
        self.layers
            .iter_mut()
            .flat_map(|l| [&mut l.weight, &mut l.bias])
            .collect()
    }

    pub fn parameter_count(&self) -> usize {
        self.params().iter().map(|p| p.numel()).sum()
    }

    /// Record the forward pass. Parameters enter as differentiable leaves
    /// when `trainable`, otherwise as constants.
    pub fn forward(&self, g: &mut Graph<F>, input: Var, trainable: bool) -> Result<(Var, ParamVars), ModelError> {
        let channels = match *g.shape(input) {
            [c, _] | [_, c, _] => c,
            ref s => return Err(ModelError::ShapeMismatch(format!("network input {s:?}"))),
        };
        if channels != self.spec.in_channels {
            return Err(ModelError::ShapeMismatch(format!(
                "network expects {} channels, got {channels}",
                self.spec.in_channels
            )));
        }
        let mut vars = Vec::with_capacity(self.layers.len() * 2);
        let mut x = input;
        for layer in &self.layers {
            let (w, b) = if trainable {
                (g.leaf(&layer.weight), g.leaf(&layer.bias))
            } else {
                (g.constant(&layer.weight), g.constant(&layer.bias))
            };
            vars.extend([w, b]);
            x = g.conv1d(x, w, b)?;
            if layer.norm_relu {
                x = g.instance_norm(x, NORM_EPS)?;
                x = g.relu(x);
            }
        }
        Ok((x, ParamVars(vars)))
    }

    /// Copy gradients recorded for `vars` into the parameters' grad slots.
    pub fn accumulate_grads(&mut self, g: &Graph<F>, vars: &ParamVars) {
        for (p, &v) in self.params_mut().into_iter().zip(&vars.0) {
            g.accumulate_into(v, p);
        }
    }

    pub fn zero_grads(&mut self) {
        for p in self.params_mut() {
            p.grad = None;
        }
    }

    pub fn cast<G: Real>(&self) -> Network<G> {
        Network {
            spec: self.spec.clone(),
            layers: self
                .layers
                .iter()
                .map(|l| ConvLayer {
                    weight: l.weight.cast(),
                    bias: l.bias.cast(),
                    norm_relu: l.norm_relu,
                })
                .collect(),
        }
    }
}

/// Per-frame latent representation, `code_channels × T`.
#[derive(Debug, Clone, PartialEq)]
pub struct LatentCode<F>(pub Tensor<F>);

impl<F: Real> LatentCode<F> {
    pub fn channels(&self) -> usize {
        self.0.shape[0]
    }

    pub fn frames(&self) -> usize {
        self.0.shape[1]
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct ModelBundle<F> {
    pub arch: ArchConfig,
    pub speakers: Vec<String>,
    pub encoder: Network<F>,
    /// Aligned with `speakers`.
    pub decoders: Vec<Network<F>>,
    pub classifier: Network<F>,
}

impl<F: Real> ModelBundle<F> {
    pub fn build(speakers: &[String], arch: ArchConfig, seed: u64) -> Result<Self, ModelError> {
        if speakers.len() < 2 {
            return Err(ModelError::TooFewSpeakers(speakers.len()));
        }
        for (i, s) in speakers.iter().enumerate() {
            if speakers[..i].contains(s) {
                return Err(ModelError::DuplicateSpeaker(s.clone()));
            }
        }
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let encoder = Network::init(
            NetworkSpec::three_layer(arch.n_mels, arch.hidden_channels, arch.code_channels),
            &mut rng,
        );
        let decoders = speakers
            .iter()
            .map(|_| {
                Network::init(
                    NetworkSpec::three_layer(arch.code_channels, arch.hidden_channels, arch.n_mels),
                    &mut rng,
                )
            })
            .collect();
        let classifier = Network::init(
            NetworkSpec::three_layer(arch.code_channels, arch.hidden_channels, speakers.len()),
            &mut rng,
        );
        Ok(Self {
            arch,
            speakers: speakers.to_vec(),
            encoder,
            decoders,
            classifier,
        })
    }

    pub fn n_speakers(&self) -> usize {
        self.speakers.len()
    }

    pub fn speaker_index(&self, id: &str) -> Result<usize, ModelError> {
        self.speakers
            .iter()
            .position(|s| s == id)
            .ok_or_else(|| ModelError::UnknownSpeaker(id.to_string()))
    }

    pub fn networks(&self) -> impl Iterator<Item = &Network<F>> {
        std::iter::once(&self.encoder)
            .chain(self.decoders.iter())
            .chain(std::iter::once(&self.classifier))
    }

    pub fn parameter_count(&self) -> usize {
        self.networks().map(|n| n.parameter_count()).sum()
    }

    fn check_input(&self, t: &Tensor<F>, channels: usize, what: &str) -> Result<(), ModelError> {
        match *t.shape {
            [c, _] | [_, c, _] if c == channels => Ok(()),
            ref s => Err(ModelError::ShapeMismatch(format!(
                "{what} expects {channels} channels, got shape {s:?}"
            ))),
        }
    }

    fn run(&self, net: &Network<F>, input: &Tensor<F>) -> Result<Tensor<F>, ModelError> {
        let mut g = Graph::new();
        let x = g.constant(input);
        let (y, _) = net.forward(&mut g, x, false)?;
        Ok(Tensor::new(g.shape(y).to_vec(), g.value(y).to_vec())?)
    }

    /// `[n_mels, T]` (or batched) → code of the same length.
    pub fn encode(&self, mel: &Tensor<F>) -> Result<LatentCode<F>, ModelError> {
        self.check_input(mel, self.arch.n_mels, "encoder")?;
        if mel.values.iter().any(|v| !v.is_finite()) {
            return Err(ModelError::ShapeMismatch("encoder input is not finite".into()));
        }
        Ok(LatentCode(self.run(&self.encoder, mel)?))
    }

    /// Output of the target speaker's decoder; not clamped.
    pub fn decode(&self, speaker: &str, code: &LatentCode<F>) -> Result<Tensor<F>, ModelError> {
        let idx = self.speaker_index(speaker)?;
        self.decode_index(idx, code)
    }

    pub fn decode_index(&self, speaker: usize, code: &LatentCode<F>) -> Result<Tensor<F>, ModelError> {
        let net = self
            .decoders
            .get(speaker)
            .ok_or_else(|| ModelError::UnknownSpeaker(format!("#{speaker}")))?;
        self.check_input(&code.0, self.arch.code_channels, "decoder")?;
        self.run(net, &code.0)
    }

    /// Per-frame classifier logits averaged over time: `[n_speakers]`
    /// (or `[B, n_speakers]` for a batched code).
    pub fn classify(&self, code: &LatentCode<F>) -> Result<Vec<F>, ModelError> {
        self.check_input(&code.0, self.arch.code_channels, "classifier")?;
        let mut g = Graph::new();
        let x = g.constant(&code.0);
        let logits = self.classifier_forward(&mut g, x, false)?.0;
        Ok(g.value(logits).to_vec())
    }

    pub fn encoder_forward(&self, g: &mut Graph<F>, mel: Var, trainable: bool) -> Result<(Var, ParamVars), ModelError> {
        self.encoder.forward(g, mel, trainable)
    }

    pub fn classifier_forward(&self, g: &mut Graph<F>, code: Var, trainable: bool) -> Result<(Var, ParamVars), ModelError> {
        let (frames, vars) = self.classifier.forward(g, code, trainable)?;
        Ok((g.mean_time(frames)?, vars))
    }

    pub fn cast<G: Real>(&self) -> ModelBundle<G> {
        ModelBundle {
            arch: self.arch,
            speakers: self.speakers.clone(),
            encoder: self.encoder.cast(),
            decoders: self.decoders.iter().map(|d| d.cast()).collect(),
            classifier: self.classifier.cast(),
        }
    }
}

/// Index of the largest logit.
pub fn argmax<F: Real>(logits: &[F]) -> usize {
    logits
        .iter()
        .enumerate()
        .fold((0, F::neg_infinity()), |(bi, bv), (i, &v)| if v > bv { (i, v) } else { (bi, bv) })
        .0
}
