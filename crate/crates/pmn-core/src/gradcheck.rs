//! Finite-difference gradient verification helpers.
//!
//! Backward passes here are hand-derived, so every layer and the full
//! training objective are checked against central finite differences. The
//! helpers are deliberately implementation-agnostic: they only need a way to
//! re-evaluate the scalar loss with one parameter element altered.

/// Central-difference estimate of `d loss / d x` at `x0` with step `h`.
///
/// `eval_at` must set the parameter element to the given value and return the
/// freshly computed loss; it is called a final time with `x0` to restore the
/// original state.
pub fn central_diff(mut eval_at: impl FnMut(f64) -> f64, x0: f64, h: f64) -> f64 {
    let up = eval_at(x0 + h);
    let down = eval_at(x0 - h);
    eval_at(x0);
    (up - down) / (2.0 * h)
}

/// Relative error with the denominator floored to keep near-zero pairs from
/// exploding: `|a - b| / max(|a|, |b|, floor)`.
pub fn rel_error(a: f64, b: f64, floor: f64) -> f64 {
    (a - b).abs() / a.abs().max(b.abs()).max(floor)
}
