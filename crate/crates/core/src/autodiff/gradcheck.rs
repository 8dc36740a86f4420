//! Central-difference verification of tape gradients.

use rand::seq::SliceRandom;
use rand::Rng;

use super::params::Parameters;
use super::tape::{Tape, Var};
use super::tensor::Tensor;
use crate::error::{Error, Result};
use crate::scalar::Scalar;

fn rel_err(analytic: f64, numeric: f64) -> f64 {
    (analytic - numeric).abs() / numeric.abs().max(1.0)
}

fn finite(v: f64, what: &str) -> Result<f64> {
    if v.is_finite() {
        Ok(v)
    } else {
        Err(Error::Numeric(format!("non-finite {what}: {v}")))
    }
}

fn check_eps(eps: f64) -> Result<()> {
    if eps > 0.0 && eps.is_finite() {
        Ok(())
    } else {
        Err(Error::Numeric(format!(
            "finite-difference step must be positive, got {eps}"
        )))
    }
}

/// Max over coordinates of `|analytic − numeric| / max(1, |numeric|)` for
/// the scalar function `f` at `x`.
pub fn grad_check<S, F>(f: F, x: &Tensor<S>, eps: f64) -> Result<f64>
where
    S: Scalar,
    F: for<'t> Fn(&'t Tape<S>, Var<'t, S>) -> Result<Var<'t, S>>,
{
    check_eps(eps)?;
    let eval = |t: &Tensor<S>| -> Result<f64> {
        let tape = Tape::new();
        let v = tape.param(t);
        finite(f(&tape, v)?.scalar().to_f64_lossy(), "function value")
    };

    let x = x.detached().with_requires_grad(true);
    let tape = Tape::new();
    let v = tape.param(&x);
    let out = f(&tape, v)?;
    finite(out.scalar().to_f64_lossy(), "function value")?;
    let grads = tape.backward(out)?;
    let analytic = grads
        .wrt(v)
        .map(<[S]>::to_vec)
        .unwrap_or_else(|| vec![S::zero(); x.len()]);

    let mut worst: f64 = 0.0;
    let mut probe = x.clone();
    for (i, a) in analytic.iter().enumerate() {
        let orig = probe.data()[i];
        probe.data_mut()[i] = orig + S::lit(eps);
        let up = eval(&probe)?;
        probe.data_mut()[i] = orig - S::lit(eps);
        let down = eval(&probe)?;
        probe.data_mut()[i] = orig;
        let numeric = (up - down) / (2.0 * eps);
        worst = worst.max(rel_err(finite(a.to_f64_lossy(), "gradient")?, numeric));
    }
    Ok(worst)
}

/// Same check over every trainable tensor of `model`. With
/// `max_coords = Some(k)`, at most `k` random coordinates of each tensor are
/// probed.
pub fn grad_check_params<S, M, F, R>(
    model: &mut M,
    f: F,
    eps: f64,
    max_coords: Option<usize>,
    rng: &mut R,
) -> Result<f64>
where
    S: Scalar,
    M: Parameters<S>,
    F: for<'t> Fn(&'t Tape<S>, &M) -> Result<Var<'t, S>>,
    R: Rng + ?Sized,
{
    check_params(model, f, eps, max_coords, false, rng)
}

/// Variant of [`grad_check_params`] for functions that are smooth only
/// piecewise, such as those routing tokens through a top-q selection.
///
/// Each coordinate is scored by the best of the central, forward and
/// backward differences. A step that crosses a selection boundary corrupts
/// at most one side, and on smooth stretches all three agree, so a wrong
/// gradient still fails.
pub fn grad_check_params_piecewise<S, M, F, R>(
    model: &mut M,
    f: F,
    eps: f64,
    max_coords: Option<usize>,
    rng: &mut R,
) -> Result<f64>
where
    S: Scalar,
    M: Parameters<S>,
    F: for<'t> Fn(&'t Tape<S>, &M) -> Result<Var<'t, S>>,
    R: Rng + ?Sized,
{
    check_params(model, f, eps, max_coords, true, rng)
}

fn check_params<S, M, F, R>(
    model: &mut M,
    f: F,
    eps: f64,
    max_coords: Option<usize>,
    piecewise: bool,
    rng: &mut R,
) -> Result<f64>
where
    S: Scalar,
    M: Parameters<S>,
    F: for<'t> Fn(&'t Tape<S>, &M) -> Result<Var<'t, S>>,
    R: Rng + ?Sized,
{
    check_eps(eps)?;
    model.zero_grad();
    let tape = Tape::new();
    let out = f(&tape, model)?;
    finite(out.scalar().to_f64_lossy(), "function value")?;
    let center = out.scalar().to_f64_lossy();
    let grads = tape.backward(out)?;
    drop(tape);
    model.accumulate_grads(&grads)?;

    let mut targets: Vec<(String, usize, f64)> = Vec::new();
    model.visit("", &mut |name, t| {
        if !t.requires_grad() {
            return;
        }
        let mut coords: Vec<usize> = (0..t.len()).collect();
        if let Some(k) = max_coords {
            coords.shuffle(rng);
            coords.truncate(k);
        }
        for c in coords {
            let g = t.grad().map_or(0.0, |g| g[c].to_f64_lossy());
            targets.push((name.clone(), c, g));
        }
    });

    let set = |model: &mut M, name: &str, c: usize, value: Option<S>| -> S {
        let mut old = S::zero();
        model.visit_mut("", &mut |n, t| {
            if n == name {
                old = t.data()[c];
                if let Some(v) = value {
                    t.data_mut()[c] = v;
                }
            }
        });
        old
    };
    let eval = |model: &M| -> Result<f64> {
        let tape = Tape::new();
        finite(f(&tape, model)?.scalar().to_f64_lossy(), "function value")
    };

    let mut worst: f64 = 0.0;
    for (name, c, analytic) in targets {
        let orig = set(model, &name, c, None);
        set(model, &name, c, Some(orig + S::lit(eps)));
        let up = eval(model);
        set(model, &name, c, Some(orig - S::lit(eps)));
        let down = eval(model);
        set(model, &name, c, Some(orig));
        let (up, down) = (up?, down?);
        let analytic = finite(analytic, "gradient")?;
        let mut err = rel_err(analytic, (up - down) / (2.0 * eps));
        if piecewise {
            err = err
                .min(rel_err(analytic, (up - center) / eps))
                .min(rel_err(analytic, (center - down) / eps));
        }
        worst = worst.max(err);
    }
    model.zero_grad();
    Ok(worst)
}
