//! Harmonic-tone "voices" for desk-scale experiments.
//!
//! An utterance is a run of syllables. Each syllable picks a vowel from a
//! table shared by all speakers (the content) and renders the speaker's
//! harmonic series through that vowel's formant envelope, with a pitch
//! glide, vibrato and a raised-cosine amplitude envelope. Speakers differ
//! only in their [`SynthSpeakerSpec`].

use std::f64::consts::PI;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::audio_io::{AudioBuffer, WORKING_RATE_HZ};

/// Formant pairs `(F1, F2)` in Hz.
pub const VOWELS: [(f64, f64); 5] = [
    (730.0, 1090.0),
    (270.0, 2290.0),
    (530.0, 1840.0),
    (570.0, 840.0),
    (300.0, 870.0),
];
const FORMANT_BANDWIDTH_HZ: f64 = 160.0;
const FORMANT_FLOOR: f64 = 0.15;
const HIGHEST_PARTIAL_HZ: f64 = 7800.0;
const PEAK_LEVEL: f64 = 0.5;
const RAMP_SECS: f64 = 0.03;

#[derive(Debug, Clone, PartialEq)]
pub struct SynthSpeakerSpec {
    pub id: String,
    pub fundamental_hz: f64,
    pub n_harmonics: usize,
    /// Amplitude ratio between consecutive harmonics, in (0, 1].
    pub harmonic_decay: f64,
    /// Relative pitch deviation of the vibrato.
    pub vibrato_depth: f64,
    pub vibrato_rate_hz: f64,
    pub utterance_seconds: f64,
}

impl SynthSpeakerSpec {
    /// Speaker with the default timbre at pitch `fundamental_hz`.
    pub fn with_pitch(id: &str, fundamental_hz: f64) -> Self {
        Self {
            id: id.to_string(),
            fundamental_hz,
            n_harmonics: 24,
            harmonic_decay: 0.85,
            vibrato_depth: 0.015,
            vibrato_rate_hz: 5.0,
            utterance_seconds: 3.0,
        }
    }

    pub fn validate(&self) -> Result<(), String> {
        if !(60.0..=400.0).contains(&self.fundamental_hz) {
            return Err(format!("fundamental {} Hz outside [60, 400]", self.fundamental_hz));
        }
        if self.id.is_empty() || self.id.contains([',', '\n', '\r']) {
            return Err(format!("speaker id {:?} must be non-empty without commas or newlines", self.id));
        }
        if self.n_harmonics == 0 {
            return Err("n_harmonics must be >= 1".into());
        }
        if !(self.harmonic_decay > 0.0 && self.harmonic_decay <= 1.0) {
            return Err("harmonic_decay must lie in (0, 1]".into());
        }
        for (name, v) in [
            ("vibrato_depth", self.vibrato_depth),
            ("vibrato_rate_hz", self.vibrato_rate_hz),
            ("utterance_seconds", self.utterance_seconds),
        ] {
            if !(v > 0.0 && v.is_finite()) {
                return Err(format!("{name} must be positive"));
            }
        }
        if self.vibrato_depth >= 0.5 {
            return Err("vibrato_depth must be < 0.5".into());
        }
        Ok(())
    }
}

/// Gain of the vowel's formant envelope at `f` Hz.
pub fn formant_gain(vowel: (f64, f64), f: f64) -> f64 {
    let peak = |c: f64| (-((f - c) / FORMANT_BANDWIDTH_HZ).powi(2)).exp();
    FORMANT_FLOOR + peak(vowel.0) + 0.7 * peak(vowel.1)
}

struct Syllable {
    start: usize,
    len: usize,
    vowel: (f64, f64),
    pitch_from: f64,
    pitch_to: f64,
}

fn plan_syllables(total: usize, rng: &mut ChaCha8Rng) -> Vec<Syllable> {
    let rate = f64::from(WORKING_RATE_HZ);
    let mut out = Vec::new();
    let mut t = (rng.gen_range(0.02..0.1) * rate) as usize;
    while t < total {
        let len = ((rng.gen_range(0.18..0.45) * rate) as usize).min(total - t);
        out.push(Syllable {
            start: t,
            len,
            vowel: VOWELS[rng.gen_range(0..VOWELS.len())],
            pitch_from: rng.gen_range(0.9..1.12),
            pitch_to: rng.gen_range(0.9..1.12),
        });
        t += len + (rng.gen_range(0.03..0.12) * rate) as usize;
    }
    out
}

/// Render one utterance. Deterministic in `seed`.
pub fn synth_utterance(spec: &SynthSpeakerSpec, seed: u64) -> AudioBuffer {
    let rate = f64::from(WORKING_RATE_HZ);
    let total = (spec.utterance_seconds * rate).round() as usize;
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let vibrato_phase = rng.gen_range(0.0..2.0 * PI);
    let syllables = plan_syllables(total, &mut rng);

    let mut samples = vec![0.0f64; total];
    let mut phases = vec![0.0f64; spec.n_harmonics];
    let ramp = (RAMP_SECS * rate) as usize;
    for syl in &syllables {
        for p in phases.iter_mut() {
            *p = rng.gen_range(0.0..2.0 * PI);
        }
        for i in 0..syl.len {
            let n = syl.start + i;
            let frac = i as f64 / syl.len.max(1) as f64;
            let glide = syl.pitch_from + (syl.pitch_to - syl.pitch_from) * frac;
            let time = n as f64 / rate;
            let vibrato = 1.0 + spec.vibrato_depth * (2.0 * PI * spec.vibrato_rate_hz * time + vibrato_phase).sin();
            let f0 = spec.fundamental_hz * glide * vibrato;
            let edge = i.min(syl.len - 1 - i);
            let envelope = if edge < ramp {
                0.5 - 0.5 * (PI * edge as f64 / ramp as f64).cos()
            } else {
                1.0
            };
            let mut acc = 0.0;
            let mut amp = 1.0;
            for (h, phase) in phases.iter_mut().enumerate() {
                let f = f0 * (h + 1) as f64;
                if f < HIGHEST_PARTIAL_HZ {
                    acc += amp * formant_gain(syl.vowel, f) * phase.sin();
                }
                *phase = (*phase + 2.0 * PI * f / rate) % (2.0 * PI);
                amp *= spec.harmonic_decay;
            }
            samples[n] = acc * envelope;
        }
    }

    let peak = samples.iter().fold(0.0f64, |m, s| m.max(s.abs()));
    let gain = if peak > 0.0 { PEAK_LEVEL / peak } else { 0.0 };
    AudioBuffer {
        samples: samples.iter().map(|s| (s * gain) as f32).collect(),
        sample_rate_hz: WORKING_RATE_HZ,
    }
}

/// Seed for utterance `utt` of speaker `speaker` in a corpus seeded `seed`.
pub fn utterance_seed(seed: u64, speaker: usize, utt: usize) -> u64 {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    rng.set_stream(((speaker as u64) << 32) | utt as u64);
    rng.gen()
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn utterance_has_requested_length_and_level() {
        let spec = SynthSpeakerSpec::with_pitch("a", 120.0);
        let u = synth_utterance(&spec, 1);
        assert_eq!(u.samples.len(), 48_000);
        let peak = u.samples.iter().fold(0.0f32, |m, s| m.max(s.abs()));
        assert!((peak - 0.5).abs() < 1e-6);
    }

    #[test]
    fn rendering_is_deterministic() {
        let spec = SynthSpeakerSpec::with_pitch("a", 180.0);
        assert_eq!(synth_utterance(&spec, 9), synth_utterance(&spec, 9));
        assert_ne!(synth_utterance(&spec, 9), synth_utterance(&spec, 10));
    }

    #[test]
    fn validation() {
        let ok = SynthSpeakerSpec::with_pitch("a", 120.0);
        assert!(ok.validate().is_ok());
        for bad in [
            SynthSpeakerSpec { fundamental_hz: 50.0, ..ok.clone() },
            SynthSpeakerSpec { fundamental_hz: 401.0, ..ok.clone() },
            SynthSpeakerSpec { n_harmonics: 0, ..ok.clone() },
            SynthSpeakerSpec { vibrato_rate_hz: 0.0, ..ok.clone() },
            SynthSpeakerSpec { harmonic_decay: 1.5, ..ok.clone() },
            SynthSpeakerSpec { id: "a,b".into(), ..ok.clone() },
        ] {
            assert!(bad.validate().is_err(), "{bad:?}");
        }
    }

    #[test]
    fn utterance_seeds_differ_across_speakers_and_utterances() {
        let seeds = [(0, 0), (0, 1), (1, 0), (1, 1)].map(|(s, u)| utterance_seed(3, s, u));
        for i in 0..4 {
            for j in 0..i {
                assert_ne!(seeds[i], seeds[j]);
            }
        }
    }
}
