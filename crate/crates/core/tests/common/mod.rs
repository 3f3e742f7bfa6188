//! Helpers shared by the integration suites.

#![allow(dead_code)]

use std::path::Path;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use vcforge::autodiff::check::gradcheck_with;
use vcforge::autodiff::{Graph, Tensor, Var};
use vcforge::model::{Network, ParamVars};

pub fn random_tensor(shape: Vec<usize>, seed: u64, scale: f64) -> Tensor<f64> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let n = shape.iter().product();
    let values = (0..n).map(|_| rng.gen_range(-scale..scale)).collect();
    Tensor::new(shape, values).unwrap().param()
}

/// Gradient check through a stack of networks. Inputs are the signal `x`
/// followed by every parameter of every network; `loss` wires the
/// (parameter-substituted) networks into a scalar and returns their
/// parameter handles in network order.
pub fn stack_gradcheck(
    nets: &[&Network<f64>],
    x: &Tensor<f64>,
    per_input: Option<usize>,
    seed: u64,
    loss: &dyn Fn(&mut Graph<f64>, Var, &[Network<f64>]) -> (Var, Vec<ParamVars>),
) -> f64 {
    let mut inputs = vec![x.clone().param()];
    for net in nets {
        inputs.extend(net.params().into_iter().map(|p| p.clone().param()));
    }
    gradcheck_with(&inputs, per_input, seed, &|g, ts| {
        let mut local: Vec<Network<f64>> = nets.iter().map(|n| (*n).clone()).collect();
        let mut k = 1;
        for net in &mut local {
            for p in net.params_mut() {
                *p = ts[k].clone();
                k += 1;
            }
        }
        let xv = g.leaf(&ts[0]);
        let (l, pvs) = loss(g, xv, &local);
        let mut vars = vec![xv];
        for pv in pvs {
            vars.extend(pv.0);
        }
        Ok((l, vars))
    })
    .unwrap()
}

/// Mean-pooled mel centroid over all frames of every WAV of `speaker` in
/// an indexed corpus directory.
pub fn corpus_centroid(dir: &Path, speaker: &str) -> f64 {
    use vcforge::analysis::mel_centroid;
    use vcforge::audio_io::load_wav;
    use vcforge::cli::read_index;
    use vcforge::dsp::FeatureExtractor;
    let fx = FeatureExtractor::default();
    let values: Vec<f64> = read_index(dir)
        .unwrap()
        .into_iter()
        .filter(|e| e.speaker == speaker)
        .map(|e| mel_centroid(&fx.analyze(&load_wav(dir.join(&e.path)).unwrap()).unwrap()).unwrap())
        .collect();
    values.iter().sum::<f64>() / values.len() as f64
}
