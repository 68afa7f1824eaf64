use rand::seq::index;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use super::{ParamStore, Tape, Var};
use crate::error::Result;

/// Compares tape gradients of `f` with central finite differences.
///
/// Returns the maximum over checked coordinates of
/// `|analytic - numeric| / max(1, |analytic|)`. When `max_coords` is set,
/// at most that many randomly chosen coordinates of each trainable parameter
/// are checked.
pub fn grad_check<F>(
    store: &ParamStore,
    eps: f64,
    max_coords: Option<usize>,
    seed: u64,
    f: F,
) -> Result<f64>
where
    F: Fn(&mut Tape, &ParamStore) -> Result<Var>,
{
    let mut tape = Tape::new();
    let out = f(&mut tape, store)?;
    let grads = tape.backward(out, store)?;

    let eval = |s: &ParamStore| -> Result<f64> {
        let mut t = Tape::inference();
        let o = f(&mut t, s)?;
        Ok(t.value(o).item())
    };

    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut work = store.clone();
    let mut worst: f64 = 0.0;
    for (id, p) in store.iter() {
        if !p.trainable {
            continue;
        }
        let n = p.tensor.len();
        let coords: Vec<usize> = match max_coords {
            Some(k) if k < n => index::sample(&mut rng, n, k).into_vec(),
            _ => (0..n).collect(),
        };
        for k in coords {
            let orig = p.tensor.data()[k];
            work.tensor_mut(id).data_mut()[k] = orig + eps;
            let plus = eval(&work)?;
            work.tensor_mut(id).data_mut()[k] = orig - eps;
            let minus = eval(&work)?;
            work.tensor_mut(id).data_mut()[k] = orig;
            let numeric = (plus - minus) / (2.0 * eps);
            let analytic = grads.get(id).data()[k];
            let err = (analytic - numeric).abs() / analytic.abs().max(1.0);
            worst = worst.max(err);
        }
    }
    Ok(worst)
}
