//! Parameters, forward-pass context and transformer building blocks.

mod forward;
mod layers;
mod params;

pub use forward::{Forward, ParamGrads};
pub use layers::{Attention, EncoderLayer, FeedForward, LayerNorm, Linear, Rotary, Stack, LN_EPS};
pub use params::{Param, ParamBuilder, ParamGroup, ParamId, ParamStore};

use rand::seq::index::sample;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use crate::error::{Error, Result};
use crate::tensor::Var;

/// Finite-difference check of every parameter gradient of a scalar loss.
///
/// `max_coords` bounds how many coordinates of each parameter tensor are
/// probed (chosen with a fixed seed); `None` probes all of them. Returns the
/// worst relative error, as in [`crate::tensor::gradient_check`].
pub fn gradient_check_params<F>(
    store: &ParamStore,
    f: F,
    step: f64,
    max_coords: Option<usize>,
) -> Result<f64>
where
    F: Fn(&mut Forward<'_>) -> Result<Var>,
{
    let analytic = {
        let mut fwd = Forward::new(store);
        let loss = f(&mut fwd)?;
        fwd.backward(loss)?
    };
    let eval = |s: &ParamStore| -> Result<f64> {
        let mut fwd = Forward::inference(s);
        let loss = f(&mut fwd)?;
        let v = fwd.tape.value(loss).item();
        if v.is_finite() {
            Ok(v)
        } else {
            Err(Error::NonFinite("gradient_check_params"))
        }
    };
    let mut rng = ChaCha8Rng::seed_from_u64(0x6772_6164);
    let mut probe = store.clone();
    let mut worst: f64 = 0.0;
    for (id, param) in store.iter() {
        let n = param.value.len();
        let coords: Vec<usize> = match max_coords {
            Some(k) if k < n => sample(&mut rng, n, k).into_vec(),
            _ => (0..n).collect(),
        };
        for c in coords {
            let orig = param.value.data()[c];
            probe.value_mut(id).data_mut()[c] = orig + step;
            let plus = eval(&probe)?;
            probe.value_mut(id).data_mut()[c] = orig - step;
            let minus = eval(&probe)?;
            probe.value_mut(id).data_mut()[c] = orig;
            let numeric = (plus - minus) / (2.0 * step);
            let a = analytic[id.index()].as_ref().map_or(0.0, |g| g[c]);
            worst = worst.max(crate::tensor::relative_error(a, numeric));
        }
    }
    Ok(worst)
}
