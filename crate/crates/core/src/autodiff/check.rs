//! Central finite-difference gradient checks at `f64`.

use rand::seq::index::sample;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use super::{AutodiffError, Graph, Tensor, Var};

/// Stencil half-width for the central differences.
pub const FD_STEP: f64 = 1e-5;

/// Graph builder for [`gradcheck_with`]: returns the scalar loss and one
/// variable per input, in input order.
pub type Builder<'a> = dyn Fn(&mut Graph<f64>, &[Tensor<f64>]) -> Result<(Var, Vec<Var>), AutodiffError> + 'a;

/// Worst `|analytic − numeric|` over the checked coordinates, relative to
/// the largest numeric component across all of them. A per-coordinate
/// denominator would divide noise by noise wherever a gradient vanishes
/// identically (a bias feeding instance norm, for instance).
pub fn relative_error(pairs: &[(f64, f64)]) -> f64 {
    let scale = pairs.iter().fold(1e-12f64, |m, (_, n)| m.max(n.abs()));
    pairs.iter().map(|(a, n)| (a - n).abs() / scale).fold(0.0, f64::max)
}

/// Check every coordinate of every input with `requires_grad`, on a graph
/// built from leaves of `inputs`.
pub fn gradcheck(
    inputs: &[Tensor<f64>],
    f: &dyn Fn(&mut Graph<f64>, &[Var]) -> Var,
) -> Result<f64, AutodiffError> {
    gradcheck_with(inputs, None, 0, &|g, ts| {
        let vars: Vec<Var> = ts.iter().map(|t| g.leaf(t)).collect();
        Ok((f(g, &vars), vars))
    })
}

/// Like [`gradcheck`], but the builder owns graph construction, and at
/// most `per_input` coordinates of each input are checked (drawn with
/// `seed`; all of them when `None`).
pub fn gradcheck_with(
    inputs: &[Tensor<f64>],
    per_input: Option<usize>,
    seed: u64,
    build: &Builder<'_>,
) -> Result<f64, AutodiffError> {
    let mut g = Graph::new();
    let (loss, vars) = build(&mut g, inputs)?;
    g.backward(loss)?;

    let eval = |ts: &[Tensor<f64>]| -> Result<f64, AutodiffError> {
        let mut g = Graph::new();
        let (loss, _) = build(&mut g, ts)?;
        Ok(g.value(loss)[0])
    };
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut pairs = Vec::new();
    for (which, t) in inputs.iter().enumerate() {
        if !t.requires_grad {
            continue;
        }
        let analytic = g.grad(vars[which]).ok_or(AutodiffError::MissingGradient(which))?;
        let coords: Vec<usize> = match per_input {
            Some(k) if k < t.numel() => sample(&mut rng, t.numel(), k).into_vec(),
            _ => (0..t.numel()).collect(),
        };
        let mut work = inputs.to_vec();
        for i in coords {
            let x = work[which].values[i];
            work[which].values[i] = x + FD_STEP;
            let plus = eval(&work)?;
            work[which].values[i] = x - FD_STEP;
            let minus = eval(&work)?;
            work[which].values[i] = x;
            pairs.push((analytic[i], (plus - minus) / (2.0 * FD_STEP)));
        }
    }
    Ok(relative_error(&pairs))
}
