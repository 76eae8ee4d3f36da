//! Central finite-difference gradient checking.
//!
//! All checks instantiate kernels with `f64` elements; the production `f32`
//! path shares the exact same generic code.

/// Maximum relative error between an analytic gradient and central
/// differences over `n` coordinates of some state `S`.
///
/// `loss` must recompute the objective from the current state. Coordinates
/// where both gradients fall below `floor` are skipped as numerical noise.
pub fn central_diff_max_rel_err<S>(
    state: &mut S,
    n: usize,
    get: impl Fn(&S, usize) -> f64,
    set: impl Fn(&mut S, usize, f64),
    mut loss: impl FnMut(&mut S) -> f64,
    analytic: impl Fn(usize) -> f64,
    step: f64,
    floor: f64,
) -> f64 {
    let mut worst = 0.0f64;
    for i in 0..n {
        let v = get(state, i);
        set(state, i, v + step);
        let lp = loss(state);
        set(state, i, v - step);
        let lm = loss(state);
        set(state, i, v);
        let numeric = (lp - lm) / (2.0 * step);
        let a = analytic(i);
        let denom = a.abs().max(numeric.abs());
        if denom < floor {
            continue;
        }
        let rel = (a - numeric).abs() / denom;
        if rel > worst {
            worst = rel;
        }
    }
    worst
}

pub const FD_STEP: f64 = 1e-4;
pub const FD_NOISE_FLOOR: f64 = 1e-9;
