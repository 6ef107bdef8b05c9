use std::collections::BTreeMap;

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use super::{DiffError, NodeId, Tape, Tensor};

/// Result of comparing analytic gradients against central finite differences.
#[derive(Clone, Debug)]
pub struct FdReport {
    pub max_rel_err: f32,
    /// Parameter name and flat coordinate where the worst error occurred.
    pub worst_param: Option<(String, usize)>,
    pub coords_checked: usize,
    pub tolerance: f32,
    pub pass: bool,
}

/// Settings for [`finite_difference_check`].
#[derive(Clone, Copy, Debug)]
pub struct FdSettings {
    pub epsilon: f32,
    pub tolerance: f32,
    /// Coordinates sampled per parameter (all when the parameter is smaller).
    pub max_coords_per_param: usize,
    pub seed: u64,
}

impl Default for FdSettings {
    fn default() -> Self {
        FdSettings {
            epsilon: 1e-3,
            tolerance: 1e-2,
            max_coords_per_param: 16,
            seed: 0,
        }
    }
}

/// Checks the tape's backward pass against central finite differences.
///
/// `build` records the function under test on a fresh tape, registering each
/// entry of `params` via [`Tape::param`], and returns the scalar output node.
/// It is invoked once for the analytic gradient and twice per sampled
/// coordinate for the difference quotient, so it must be deterministic.
///
/// Relative error per coordinate is `|fd - analytic| / max(|fd|, |analytic|,
/// floor)` with `floor = 1e-3 + 0.05 * max|analytic|` over all coordinates.
/// The floor keeps coordinates whose true gradient is far below the overall
/// gradient scale from amplifying f32 quadrature noise; a wrong VJP produces
/// errors proportional to the gradient scale and is still caught.
pub fn finite_difference_check<F>(
    params: &BTreeMap<String, Tensor>,
    settings: FdSettings,
    build: F,
) -> Result<FdReport, DiffError>
where
    F: Fn(&mut Tape, &BTreeMap<String, Tensor>) -> Result<NodeId, DiffError>,
{
    if settings.epsilon <= 0.0 {
        return Err(DiffError::Invalid {
            op: "finite_difference_check",
            msg: "epsilon must be positive".to_string(),
        });
    }

    let mut tape = Tape::new();
    let out = build(&mut tape, params)?;
    let grads = tape.backward(out)?;
    let analytic = tape.param_grads(&grads);

    let eval = |p: &BTreeMap<String, Tensor>| -> Result<f32, DiffError> {
        let mut tape = Tape::new();
        let out = build(&mut tape, p)?;
        Ok(tape.value(out).scalar_value())
    };

    let mut rng = ChaCha8Rng::seed_from_u64(settings.seed);
    let mut max_rel_err = 0.0f32;
    let mut worst_param = None;
    let mut coords_checked = 0;

    let grad_scale = analytic
        .values()
        .flat_map(|g| g.data())
        .fold(0.0f32, |acc, &v| acc.max(v.abs()));
    let floor = 1e-3 + 0.05 * grad_scale;

    for (name, tensor) in params {
        let an = analytic.get(name).expect("param_grads covers every param");
        let mut coords: Vec<usize> = (0..tensor.len()).collect();
        if coords.len() > settings.max_coords_per_param {
            coords.shuffle(&mut rng);
            coords.truncate(settings.max_coords_per_param);
        }
        for coord in coords {
            let mut plus = params.clone();
            plus.get_mut(name).unwrap().data_mut()[coord] += settings.epsilon;
            let mut minus = params.clone();
            minus.get_mut(name).unwrap().data_mut()[coord] -= settings.epsilon;
            let fd = (eval(&plus)? - eval(&minus)?) / (2.0 * settings.epsilon);
            let a = an.data()[coord];
            let rel = (fd - a).abs() / fd.abs().max(a.abs()).max(floor);
            coords_checked += 1;
            if rel > max_rel_err {
                max_rel_err = rel;
                worst_param = Some((name.clone(), coord));
            }
        }
    }

    Ok(FdReport {
        max_rel_err,
        worst_param,
        coords_checked,
        tolerance: settings.tolerance,
        pass: max_rel_err < settings.tolerance,
    })
}
