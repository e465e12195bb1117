//! Central finite-difference checks of tape gradients.
//!
//! The scalar under test is a fixed random projection `Σ rᵢ·yᵢ` of the
//! function output, accumulated in `f64`; the numeric side only ever calls the
//! forward function, so it shares nothing with the backward code it checks.
//!
//! A central difference is meaningless where the probe straddles a kink of a
//! piecewise-linear op (LeakyReLU, clamp). Kinks are detected from the tape's
//! branch pattern. If only one probe crossed, the other one still lies on the
//! base piece and a one-sided difference against the base point is used
//! (counted in [`GradCheck::one_sided`]); if both crossed the coordinate is
//! left out of both norms and counted in [`GradCheck::skipped`].

use crate::{Result, Tape, Tensor, Var};

#[derive(Clone, Copy, Debug)]
pub struct GradCheck {
    /// `‖analytic − numeric‖ / max(‖analytic‖, ‖numeric‖)`.
    pub rel_error: f64,
    pub analytic_norm: f64,
    pub numeric_norm: f64,
    /// Coordinates left out because a probe crossed a kink.
    pub skipped: usize,
    /// Coordinates compared, including the one-sided ones.
    pub checked: usize,
    pub one_sided: usize,
}

/// Upper bound on the share of coordinates a check may drop at kinks and
/// still count as a check of the whole input.
pub const MAX_SKIPPED_FRACTION: f64 = 0.1;

impl GradCheck {
    pub fn skipped_fraction(&self) -> f64 {
        self.skipped as f64 / (self.skipped + self.checked).max(1) as f64
    }

    /// Relative error below `tol` with most coordinates actually compared.
    pub fn passes(&self, tol: f64) -> bool {
        self.rel_error < tol && self.skipped_fraction() <= MAX_SKIPPED_FRACTION
    }
}

fn projection(len: usize, seed: u64) -> Vec<f64> {
    let mut state = seed.wrapping_mul(0x9E37_79B9_7F4A_7C15) | 1;
    (0..len)
        .map(|_| {
            state ^= state << 13;
            state ^= state >> 7;
            state ^= state << 17;
            (state >> 11) as f64 / (1u64 << 53) as f64 * 2.0 - 1.0
        })
        .collect()
}

fn project(y: &Tensor, r: &[f64]) -> f64 {
    y.data().iter().zip(r).map(|(&v, &w)| v as f64 * w).sum()
}

/// Compare the tape gradient of `f` with respect to `input` against central
/// differences with the given step.
pub fn check_input_gradient<F>(input: &Tensor, step: f32, seed: u64, f: F) -> Result<GradCheck>
where
    F: for<'t> Fn(Var<'t>) -> Result<Var<'t>>,
{
    let tape = Tape::new();
    let x = tape.var(input.clone());
    let y = f(x)?;
    let r = projection(y.value().numel(), seed);
    let weights = Tensor::new(&y.shape(), r.iter().map(|&v| v as f32).collect())?;
    let loss = y.mul(tape.constant(weights))?.sum();
    let base_pattern = tape.branch_pattern();
    let base_value = project(&y.value(), &r);
    let grads = tape.backward(loss);
    let analytic: Vec<f64> = match grads.get(x) {
        Some(g) => g.data().iter().map(|&v| v as f64).collect(),
        None => vec![0.0; input.numel()],
    };

    let eval = |t: &Tensor| -> Result<(f64, bool)> {
        // tracked like the analytic pass, so the same ops are recorded
        let tape = Tape::new();
        let y = f(tape.var(t.clone()))?;
        let value = project(&y.value(), &r);
        Ok((value, tape.branch_pattern() == base_pattern))
    };
    let (mut kept_a, mut kept_n) = (Vec::new(), Vec::new());
    let (mut skipped, mut one_sided) = (0, 0);
    let h = step as f64;
    let mut probe = input.clone();
    for (i, &a) in analytic.iter().enumerate() {
        let orig = probe.data()[i];
        probe.data_mut()[i] = orig + step;
        let (plus, smooth_plus) = eval(&probe)?;
        probe.data_mut()[i] = orig - step;
        let (minus, smooth_minus) = eval(&probe)?;
        probe.data_mut()[i] = orig;
        let estimate = match (smooth_plus, smooth_minus) {
            (true, true) => Some((plus - minus) / (2.0 * h)),
            (true, false) => Some((plus - base_value) / h),
            (false, true) => Some((base_value - minus) / h),
            (false, false) => None,
        };
        match estimate {
            Some(n) => {
                one_sided += usize::from(smooth_plus != smooth_minus);
                kept_a.push(a);
                kept_n.push(n);
            }
            None => skipped += 1,
        }
    }

    let norm = |v: &[f64]| v.iter().map(|a| a * a).sum::<f64>().sqrt();
    let diff: Vec<f64> = kept_a.iter().zip(&kept_n).map(|(a, b)| a - b).collect();
    let (an, nn) = (norm(&kept_a), norm(&kept_n));
    let denom = an.max(nn).max(1e-12);
    Ok(GradCheck { rel_error: norm(&diff) / denom, analytic_norm: an, numeric_norm: nn, skipped, checked: kept_a.len(), one_sided })
}
