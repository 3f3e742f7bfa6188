//! Acceptance suite. Runs every criterion at its stated tolerance and
//! prints one PASS/FAIL line each; exits non-zero if any fails.
//!
//! Criteria 4 to 6 share one default-configuration training run on the
//! synthetic two-speaker corpus; criterion 7 repeats that run.

mod common;

use std::f64::consts::PI;
use std::fs;
use std::path::Path;
use std::process::ExitCode;
use std::time::{Duration, Instant};

use common::{random_tensor, stack_gradcheck};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use tempfile::TempDir;
use vcforge::analysis::{evaluate_model, mel_centroid, mi_lower_bound, retrain_probe, spectral_centroid_shift, ProbeConfig};
use vcforge::audio_io::{load_wav, AudioBuffer};
use vcforge::autodiff::check::gradcheck;
use vcforge::autodiff::Tensor;
use vcforge::cli::synth::{synth_utterance, utterance_seed, SynthSpeakerSpec};
use vcforge::cli::{cmd_bounds, cmd_synth_dataset, cmd_train, convert_audio, load_corpus, log_path_for, read_index};
use vcforge::dsp::{griffin_lim, griffin_lim_trace, istft_f64, stft_f64, FeatureExtractor, MelSpectrogram, StftConfig};
use vcforge::model::{ArchConfig, ModelBundle};
use vcforge::train::{
    decode_checkpoint, encode_checkpoint, load_checkpoint, save_checkpoint, Checkpoint, Dataset, TrainConfig,
};

struct Outcome {
    id: &'static str,
    pass: bool,
    detail: String,
}

#[derive(Default)]
struct Ledger(Vec<Outcome>);

impl Ledger {
    fn record(&mut self, id: &'static str, pass: bool, detail: String) {
        println!("criterion {id:<3} {}  {detail}", if pass { "PASS" } else { "FAIL" });
        self.0.push(Outcome { id, pass, detail });
    }
}

fn secs(d: Duration) -> String {
    format!("{:.1}s", d.as_secs_f64())
}

// ---------------------------------------------------------------------------
// 1. bounds curve for four classes

fn criterion_1(out: &mut Ledger, dir: &Path) {
    let t = Instant::now();
    let curve = cmd_bounds(4, 101, &dir.join("bounds.csv")).unwrap();
    let elapsed = t.elapsed();
    // independent closed forms
    let h = |p: f64| if p <= 0.0 || p >= 1.0 { 0.0 } else { -p * p.log2() - (1.0 - p) * (1.0 - p).log2() };
    let lower = |p: f64| 2.0 - h(p) - p * 3f64.log2();
    let upper = |p: f64| 2.0 + (1.0 - p).log2();

    let first = &curve.samples[0];
    let at = curve.samples.iter().find(|s| s.p == 0.75).expect("grid contains 0.75");
    let mut ordered = true;
    let mut oracle_gap = 0.0f64;
    for s in &curve.samples {
        oracle_gap = oracle_gap.max((s.lower_bits - lower(s.p)).abs());
        if let Some(u) = s.upper_bits {
            ordered &= s.lower_bits <= u;
            oracle_gap = oracle_gap.max((u - upper(s.p)).abs());
        }
    }
    let origin = first.lower_bits == 2.0 && first.upper_bits == Some(2.0);
    let zero_l = at.lower_bits.abs() <= 1e-12;
    let zero_u = at.upper_bits.is_some_and(|u| u.abs() <= 1e-12);
    let pass = origin && zero_l && zero_u && ordered && oracle_gap <= 1e-12 && elapsed < Duration::from_secs(1);
    out.record(
        "1",
        pass,
        format!(
            "f(0)=({}, {:?}) f_l(.75)={:.1e} f_u(.75)={:.1e} ordered={ordered} oracle_gap={oracle_gap:.1e} in {}",
            first.lower_bits,
            first.upper_bits,
            at.lower_bits,
            at.upper_bits.unwrap_or(f64::NAN),
            secs(elapsed)
        ),
    );
}

// ---------------------------------------------------------------------------
// 2. gradient integrity

fn away_from_zero(t: &mut Tensor<f64>, margin: f64) {
    for v in &mut t.values {
        if v.abs() < margin {
            *v += if *v < 0.0 { -margin } else { margin };
        }
    }
}

fn criterion_2(out: &mut Ledger) {
    let t = Instant::now();
    let mut worst: Vec<(&str, f64)> = Vec::new();
    let mut note = |name: &'static str, err: f64| match worst.iter_mut().find(|(n, _)| *n == name) {
        Some(slot) => slot.1 = slot.1.max(err),
        None => worst.push((name, err)),
    };
    let seeds = 0..10u64;
    for seed in seeds.clone() {
        let s = 1000 * (seed + 1);
        let x = random_tensor(vec![2, 3, 7], s, 1.0);
        let w = random_tensor(vec![4, 3, 3], s + 1, 1.0);
        let b = random_tensor(vec![4], s + 2, 1.0);
        let probe = random_tensor(vec![2, 4, 7], s + 3, 1.0);
        let weights = Tensor::new(vec![2, 3, 7], random_tensor(vec![42], s + 4, 1.0).values).unwrap();

        note(
            "conv1d",
            gradcheck(&[x.clone(), w.clone(), b.clone()], &|g, v| {
                let y = g.conv1d(v[0], v[1], v[2]).unwrap();
                let p = g.constant(&probe);
                g.l1_loss(y, p).unwrap()
            })
            .unwrap(),
        );
        note(
            "instance_norm",
            gradcheck(&[x.clone()], &|g, v| {
                let y = g.instance_norm(v[0], 1e-5).unwrap();
                let c = g.constant(&weights);
                g.l1_loss(y, c).unwrap()
            })
            .unwrap(),
        );
        let mut xr = x.clone();
        away_from_zero(&mut xr, 0.05);
        note(
            "relu",
            gradcheck(&[xr], &|g, v| {
                let y = g.relu(v[0]);
                let c = g.constant(&weights);
                g.l1_loss(y, c).unwrap()
            })
            .unwrap(),
        );
        let mut pred = probe.clone();
        let target = random_tensor(vec![2, 4, 7], s + 5, 1.0);
        for (p, q) in pred.values.iter_mut().zip(&target.values) {
            if (*p - *q).abs() < 0.05 {
                *p += 0.1;
            }
        }
        note("l1_loss", gradcheck(&[pred, target], &|g, v| g.l1_loss(v[0], v[1]).unwrap()).unwrap());
        let logits = random_tensor(vec![3, 4], s + 6, 3.0);
        note(
            "cross_entropy",
            gradcheck(&[logits], &|g, v| g.cross_entropy(v[0], &[1, 3, 0]).unwrap()).unwrap(),
        );
        note(
            "mean_time+select_items+add+scale+sum",
            gradcheck(&[probe.clone(), x.clone()], &|g, v| {
                let sel = g.select_items(v[0], &[1, 1, 0]).unwrap();
                let m = g.mean_time(sel).unwrap();
                let m2 = g.add(m, m).unwrap();
                let ce = g.cross_entropy(m2, &[0, 2, 3]).unwrap();
                let xs = g.scale(v[1], 0.5);
                let s = g.sum(xs);
                let total = g.add(ce, s).unwrap();
                g.scale(total, -0.5)
            })
            .unwrap(),
        );

        // composed stacks at full width, sampled coordinates
        let bundle: ModelBundle<f64> =
            ModelBundle::<f32>::build(&["a".into(), "b".into()], ArchConfig::default(), seed).unwrap().cast();
        let mel = random_tensor(vec![1, 128, 4], s + 7, 1.0);
        note(
            "encoder+decoder+classifier",
            stack_gradcheck(
                &[&bundle.encoder, &bundle.decoders[(seed % 2) as usize], &bundle.classifier],
                &mel,
                Some(3),
                seed,
                &|g, xv, nets| {
                    let (code, pe) = nets[0].forward(g, xv, true).unwrap();
                    let (rec, pd) = nets[1].forward(g, code, true).unwrap();
                    let (logits, pc) = nets[2].forward(g, code, true).unwrap();
                    let target = g.constant(&mel);
                    let l1 = g.l1_loss(rec, target).unwrap();
                    let pooled = g.mean_time(logits).unwrap();
                    let ce = g.cross_entropy(pooled, &[(seed % 2) as usize]).unwrap();
                    let adv = g.scale(ce, -1.0);
                    (g.add(l1, adv).unwrap(), vec![pe, pd, pc])
                },
            ),
        );
    }
    let elapsed = t.elapsed();
    let max = worst.iter().map(|(_, e)| *e).fold(0.0, f64::max);
    let pass = max <= 1e-4 && elapsed < Duration::from_secs(120);
    let parts: Vec<String> = worst.iter().map(|(n, e)| format!("{n} {e:.1e}")).collect();
    out.record(
        "2",
        pass,
        format!("10 seeds, worst relative error {max:.1e} [{}] in {}", parts.join(", "), secs(elapsed)),
    );
}

// ---------------------------------------------------------------------------
// 3. DSP oracles

fn criterion_3(out: &mut Ledger) {
    let t = Instant::now();
    let cfg = StftConfig::default();
    let rate = 16_000.0;

    let mut round_trip = 0.0f64;
    for seed in 0..5u64 {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let x: Vec<f64> = (0..16_000 + 97 * seed as usize).map(|_| rng.gen_range(-1.0..1.0)).collect();
        let y = istft_f64(&stft_f64(&x, &cfg).unwrap()).unwrap();
        let (lo, hi) = (cfg.n_fft, x.len() - cfg.n_fft);
        round_trip = round_trip.max(x[lo..hi].iter().zip(&y[lo..hi]).map(|(a, b)| (a - b).abs()).fold(0.0, f64::max));
    }

    let tone: Vec<f64> = (0..16_000).map(|n| 0.5 * (2.0 * PI * 440.0 * n as f64 / rate).sin()).collect();
    let target = stft_f64(&tone, &cfg).unwrap().magnitude();
    let mut worst_rise = f64::NEG_INFINITY;
    for seed in 0..3 {
        let trace = griffin_lim_trace(&target, 60, seed).unwrap();
        for w in trace.distances.windows(2) {
            worst_rise = worst_rise.max(w[1] - w[0]);
        }
    }
    // spectral convergence of 60 iterations from each of several random
    // phase initializations; the criterion is judged on their mean
    let den: f64 = target.magnitudes.iter().map(|a| a * a).sum::<f64>().sqrt();
    let runs: Vec<f64> = (0..6)
        .map(|seed| {
            let rebuilt = griffin_lim(&target, 60, seed).unwrap();
            let rebuilt: Vec<f64> = rebuilt.samples.iter().map(|&s| f64::from(s)).collect();
            let est = stft_f64(&rebuilt, &cfg).unwrap().magnitude();
            let num: f64 = target.magnitudes.iter().zip(&est.magnitudes).map(|(a, b)| (a - b).powi(2)).sum();
            num.sqrt() / den
        })
        .collect();
    let convergence = runs.iter().sum::<f64>() / runs.len() as f64;
    let (best, worst) = runs.iter().fold((f64::MAX, 0.0f64), |(lo, hi), &r| (lo.min(r), hi.max(r)));

    let elapsed = t.elapsed();
    let pass = round_trip <= 1e-6 && worst_rise <= 1e-7 && convergence < 0.1 && elapsed < Duration::from_secs(60);
    out.record(
        "3",
        pass,
        format!(
            "round-trip interior {round_trip:.1e}, worst GL rise {worst_rise:.1e}, 440 Hz spectral convergence mean {convergence:.4} (< 0.1; seeds range {best:.3}..{worst:.3}) in {}",
            secs(elapsed)
        ),
    );
}

// ---------------------------------------------------------------------------
// 4-6. desk-scale training and conversion

struct Trained {
    train_dir: tempfile::TempDir,
    checkpoint: Checkpoint,
    checkpoint_path: std::path::PathBuf,
    elapsed: Duration,
}

fn speakers() -> Vec<SynthSpeakerSpec> {
    vec![SynthSpeakerSpec::with_pitch("m", 120.0), SynthSpeakerSpec::with_pitch("f", 240.0)]
}

fn train_default(data: &Path, out: &Path) -> (Checkpoint, Duration) {
    let t = Instant::now();
    let (ck, _) = cmd_train(data, &TrainConfig::default(), out, |rec| {
        if rec.step % 1000 == 0 {
            eprintln!(
                "  round {:>5}  f_r {:.4}  f_c {:.3}  adv {:.3}  acc {:.2}",
                rec.step, rec.reconstruction, rec.classifier_loss, rec.adversarial, rec.code_accuracy
            );
        }
    })
    .unwrap();
    (ck, t.elapsed())
}

fn dataset(dir: &Path) -> Dataset {
    Dataset::from_labeled(&load_corpus(dir, &TrainConfig::default().features).unwrap()).unwrap()
}

fn criterion_4(out: &mut Ledger, run: &Trained, heldout_dir: &Path) {
    let config = TrainConfig::default();
    let train = dataset(run.train_dir.path());
    let heldout = dataset(heldout_dir);
    let init = Checkpoint::initial(&train.speakers, &config).unwrap();
    let t = config.segment_frames;

    let r0 = evaluate_model(&init.bundle, &train, t).unwrap().mean_reconstruction();
    let r1 = evaluate_model(&run.checkpoint.bundle, &train, t).unwrap().mean_reconstruction();
    let h0 = evaluate_model(&init.bundle, &heldout, t).unwrap().mean_reconstruction();
    let h1 = evaluate_model(&run.checkpoint.bundle, &heldout, t).unwrap().mean_reconstruction();
    let ratio = r1 / r0;
    out.record(
        "4a",
        ratio < 0.10,
        format!(
            "training-corpus l1 {r1:.4} / initial {r0:.4} = {ratio:.3} (< 0.10); held-out {:.3}; {} rounds in {}",
            h1 / h0,
            config.steps,
            secs(run.elapsed)
        ),
    );

    let probe = retrain_probe(&run.checkpoint.bundle, &train, &heldout, &ProbeConfig::default()).unwrap();
    out.record(
        "4b",
        probe.heldout_accuracy <= 0.65,
        format!(
            "fresh probe on frozen codes: held-out accuracy {:.3} over {} segments (<= 0.65), train accuracy {:.3}",
            probe.heldout_accuracy, probe.heldout_segments, probe.train_accuracy
        ),
    );
    let bits = mi_lower_bound(1.0 - probe.heldout_accuracy, train.speakers.len()).unwrap();
    out.record("4c", bits <= 0.15, format!("mi lower bound {bits:.4} bits (<= 0.15)"));
}

struct Shift {
    mean_shift: f64,
    mean_centroid_delta: f64,
}

fn convert_all(
    bundle: &ModelBundle<f32>,
    fx: &FeatureExtractor,
    sources: &[AudioBuffer],
    target: &str,
    refs: &[MelSpectrogram],
) -> Shift {
    let mut shift = 0.0;
    let mut delta = 0.0;
    for (i, audio) in sources.iter().enumerate() {
        let src = fx.analyze(audio).unwrap();
        let (converted, _) = convert_audio(bundle, fx, audio, target, i as u64).unwrap();
        let conv = fx.analyze(&converted).unwrap();
        shift += spectral_centroid_shift(&src, &conv, refs).unwrap();
        delta += mel_centroid(&conv).unwrap() - mel_centroid(&src).unwrap();
    }
    let n = sources.len() as f64;
    Shift {
        mean_shift: shift / n,
        mean_centroid_delta: delta / n,
    }
}

fn load_speaker(dir: &Path, speaker: &str) -> Vec<AudioBuffer> {
    read_index(dir)
        .unwrap()
        .into_iter()
        .filter(|e| e.speaker == speaker)
        .map(|e| load_wav(dir.join(e.path)).unwrap())
        .collect()
}

fn criterion_5(out: &mut Ledger, run: &Trained, heldout_dir: &Path) {
    let t = Instant::now();
    let fx = run.checkpoint.config.features.extractor().unwrap();
    let low = load_speaker(heldout_dir, "m");
    let high = load_speaker(heldout_dir, "f");
    let mels = |a: &[AudioBuffer]| a.iter().map(|x| fx.analyze(x).unwrap()).collect::<Vec<_>>();
    let up = convert_all(&run.checkpoint.bundle, &fx, &low, "f", &mels(&high));
    let down = convert_all(&run.checkpoint.bundle, &fx, &high, "m", &mels(&low));
    let elapsed = t.elapsed();
    let pass = up.mean_shift > 0.5
        && up.mean_centroid_delta > 0.0
        && down.mean_centroid_delta < 0.0
        && elapsed < Duration::from_secs(120);
    out.record(
        "5",
        pass,
        format!(
            "120->240 shift {:.3} (> 0.5, centroid {:+.2} bands); 240->120 shift {:.3} (centroid {:+.2} bands, must be < 0) in {}",
            up.mean_shift,
            up.mean_centroid_delta,
            down.mean_shift,
            down.mean_centroid_delta,
            secs(elapsed)
        ),
    );
}

fn criterion_6(out: &mut Ledger, run: &Trained, heldout_dir: &Path) {
    let fx = run.checkpoint.config.features.extractor().unwrap();
    let unseen = SynthSpeakerSpec::with_pitch("u", 180.0);
    let sources: Vec<AudioBuffer> = (0..6).map(|u| synth_utterance(&unseen, utterance_seed(77, 0, u))).collect();
    let mut pass = true;
    let mut parts = Vec::new();
    for target in ["m", "f"] {
        let refs: Vec<MelSpectrogram> =
            load_speaker(heldout_dir, target).iter().map(|a| fx.analyze(a).unwrap()).collect();
        let s = convert_all(&run.checkpoint.bundle, &fx, &sources, target, &refs);
        pass &= s.mean_shift > 0.3;
        parts.push(format!("180->{target} shift {:.3}", s.mean_shift));
    }
    out.record("6", pass, format!("unseen 180 Hz speaker: {} (each > 0.3)", parts.join(", ")));
}

// ---------------------------------------------------------------------------
// 7. persistence and reproducibility

fn criterion_7(out: &mut Ledger, run: &Trained, scratch: &Path) {
    let bytes = encode_checkpoint(&run.checkpoint);
    let decoded = decode_checkpoint(&bytes).unwrap();
    let copy = scratch.join("copy.ckpt");
    save_checkpoint(&copy, &decoded).unwrap();
    let reloaded = load_checkpoint(&copy).unwrap();
    let on_disk = fs::read(&run.checkpoint_path).unwrap();
    let round_trip =
        decoded == run.checkpoint && reloaded == run.checkpoint && fs::read(&copy).unwrap() == bytes && on_disk == bytes;

    let second = scratch.join("second.ckpt");
    let (_, elapsed) = train_default(run.train_dir.path(), &second);
    let same_ckpt = fs::read(&second).unwrap() == on_disk;
    let same_log = fs::read(log_path_for(&second)).unwrap() == fs::read(log_path_for(&run.checkpoint_path)).unwrap();
    out.record(
        "7",
        round_trip && same_ckpt && same_log,
        format!(
            "save/load bitwise {round_trip}; second {}-round run: checkpoint identical {same_ckpt}, log identical {same_log} ({})",
            TrainConfig::default().steps,
            secs(elapsed)
        ),
    );
}

fn main() -> ExitCode {
    let mut out = Ledger::default();
    let scratch = TempDir::new().unwrap();

    criterion_1(&mut out, scratch.path());
    criterion_2(&mut out);
    criterion_3(&mut out);

    let train_dir = TempDir::new().unwrap();
    cmd_synth_dataset(&speakers(), 10, train_dir.path(), 0).unwrap();
    let heldout_dir = scratch.path().join("heldout");
    cmd_synth_dataset(&speakers(), 10, &heldout_dir, 1).unwrap();
    let checkpoint_path = scratch.path().join("model.ckpt");
    eprintln!("training {} rounds at defaults", TrainConfig::default().steps);
    let (checkpoint, elapsed) = train_default(train_dir.path(), &checkpoint_path);
    let run = Trained {
        train_dir,
        checkpoint,
        checkpoint_path,
        elapsed,
    };

    criterion_4(&mut out, &run, &heldout_dir);
    criterion_5(&mut out, &run, &heldout_dir);
    criterion_6(&mut out, &run, &heldout_dir);
    criterion_7(&mut out, &run, scratch.path());

    let failed: Vec<&str> = out.0.iter().filter(|o| !o.pass).map(|o| o.id).collect();
    println!(
        "{} of {} criteria passed{}",
        out.0.len() - failed.len(),
        out.0.len(),
        if failed.is_empty() { String::new() } else { format!("; failed: {}", failed.join(", ")) }
    );
    for o in out.0.iter().filter(|o| !o.pass) {
        eprintln!("FAILED {}: {}", o.id, o.detail);
    }
    if failed.is_empty() {
        ExitCode::SUCCESS
    } else {
        ExitCode::FAILURE
    }
}
