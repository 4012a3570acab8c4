use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::error::{Error, Result};

use super::{Tape, Tensor, Var};

/// Compares tape gradients against central finite differences.
///
/// Non-scalar outputs are reduced to `Σ r·out` with a fixed pseudo-random
/// projection `r`. Returns the maximum over every input scalar of
/// `|analytic − numeric| / max(1, |numeric|)`.
pub fn check_gradients<F>(op: F, inputs: &[Tensor], eps: f64) -> Result<f64>
where
    F: Fn(&mut Tape, &[Var]) -> Result<Var>,
{
    let eval = |inputs: &[Tensor]| -> Result<(Tape, Vec<Var>, Var)> {
        let mut tape = Tape::new();
        let vars: Vec<Var> = inputs.iter().map(|t| tape.param(t.clone())).collect();
        let out = op(&mut tape, &vars)?;
        Ok((tape, vars, out))
    };

    let (mut tape, vars, out) = eval(inputs)?;
    let numel = tape.value(out).numel();
    let projection: Vec<f64> = if numel == 1 {
        vec![1.0]
    } else {
        let mut rng = ChaCha8Rng::seed_from_u64(0x5eed);
        (0..numel).map(|_| rng.gen_range(-1.0..1.0)).collect()
    };
    let project = |t: &Tensor| -> f64 { t.data().iter().zip(&projection).map(|(a, b)| a * b).sum() };

    tape.backward_from(out, projection.clone())?;
    let analytic: Vec<Vec<f64>> = vars
        .iter()
        .zip(inputs)
        .map(|(&v, t)| {
            tape.grad(v)
                .map(<[f64]>::to_vec)
                .unwrap_or_else(|| vec![0.0; t.numel()])
        })
        .collect();

    let mut worst = 0.0f64;
    let mut probe = inputs.to_vec();
    for (i, grads) in analytic.iter().enumerate() {
        for j in 0..inputs[i].numel() {
            let base = inputs[i].data()[j];
            probe[i].data_mut()[j] = base + eps;
            let (t, _, o) = eval(&probe)?;
            let plus = project(t.value(o));
            probe[i].data_mut()[j] = base - eps;
            let (t, _, o) = eval(&probe)?;
            let minus = project(t.value(o));
            probe[i].data_mut()[j] = base;

            let numeric = (plus - minus) / (2.0 * eps);
            let err = (grads[j] - numeric).abs() / numeric.abs().max(1.0);
            if !err.is_finite() {
                return Err(Error::NonFinite { op: "check_gradients" });
            }
            worst = worst.max(err);
        }
    }
    Ok(worst)
}
