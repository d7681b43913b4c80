use rand::seq::index::sample;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use super::{ParamSet, ParamVars, Tape, Tensor, Var};
use crate::error::{Error, Result};

/// Magnitudes below this are compared absolutely rather than relatively.
const REL_FLOOR: f64 = 1e-3;

/// `|a - b| / max(|a|, |b|, 1e-3)`.
pub fn relative_error(a: f64, b: f64) -> f64 {
    (a - b).abs() / a.abs().max(b.abs()).max(REL_FLOOR)
}

/// Compares reverse-mode gradients of `f` against central differences
/// `(f(p + eps) - f(p - eps)) / 2 eps` and returns the worst relative error.
///
/// With `max_coords = Some(n)`, at most `n` coordinates per tensor are
/// checked, chosen by `seed`.
pub fn finite_diff_check<F>(
    f: F,
    params: &ParamSet,
    eps: f64,
    max_coords: Option<usize>,
    seed: u64,
) -> Result<f64>
where
    F: Fn(&mut Tape, &ParamVars) -> Result<Var>,
{
    if eps <= 0.0 || !eps.is_finite() {
        return Err(Error::invalid(format!("finite-difference step must be positive, got {eps}")));
    }
    let mut tape = Tape::new();
    let vars = params.attach(&mut tape);
    let loss = f(&mut tape, &vars)?;
    let mut raw = tape.backward(loss)?;
    let analytic = vars.collect(&tape, &mut raw);

    let eval = |p: &ParamSet| -> Result<f64> {
        let mut t = Tape::new();
        let v = p.attach(&mut t);
        let l = f(&mut t, &v)?;
        Ok(t.value(l).item())
    };

    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut worst: f64 = 0.0;
    for (name, value) in params.iter() {
        let n = value.len();
        let coords: Vec<usize> = match max_coords {
            Some(k) if k < n => {
                let mut c = sample(&mut rng, n, k).into_vec();
                c.sort_unstable();
                c
            }
            _ => (0..n).collect(),
        };
        let g = analytic.get(name).unwrap();
        for i in coords {
            let mut plus = value.clone();
            plus.data_mut()[i] += eps;
            let mut minus = value.clone();
            minus.data_mut()[i] -= eps;
            let fp = eval(&with(params, name, plus)?)?;
            let fm = eval(&with(params, name, minus)?)?;
            let numeric = (fp - fm) / (2.0 * eps);
            worst = worst.max(relative_error(g.data()[i], numeric));
        }
    }
    Ok(worst)
}

fn with(params: &ParamSet, name: &str, value: Tensor) -> Result<ParamSet> {
    let mut p = params.clone();
    p.set(name, value)?;
    Ok(p)
}
