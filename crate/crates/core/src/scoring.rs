// SPDX-License-Identifier: Apache-2.0

//! EL2N importance and its Beta-warped selection score.
//!
//! Raw importance is `||softmax - onehot||_F`. For selection, scores are
//! min-max normalized over the training set, clamped away from 0 and 1, and
//! passed through a Beta density whose shape tracks the mean normalized score
//! and the budget fraction:
//!
//! ```text
//! alpha = 1 + C * mean^q * eta^r,   beta = C - alpha
//! warped(x) = Beta(x; alpha, beta)^gamma
//! ```

use statrs::function::gamma::ln_gamma;

use crate::error::{GraceError, Result};
use crate::store::{clamp_unit, ScoreLedger, SelectionConfig, CLAMP_EPS};

const SIMPLEX_TOL: f64 = 1e-6;

/// Frobenius norm of `probs - onehot` over all rows.
pub fn el2n_score<P, O>(probs: &[P], onehot: &[O]) -> Result<f64>
where
    P: AsRef<[f64]>,
    O: AsRef<[f64]>,
{
    if probs.len() != onehot.len() {
        return Err(GraceError::domain(format!(
            "el2n: {} probability rows vs {} label rows",
            probs.len(),
            onehot.len()
        )));
    }
    let mut acc = 0.0;
    for (r, (p, o)) in probs.iter().zip(onehot).enumerate() {
        let (p, o) = (p.as_ref(), o.as_ref());
        if p.len() != o.len() {
            return Err(GraceError::domain(format!("el2n: row {r} width mismatch")));
        }
        let total: f64 = p.iter().sum();
        if (total - 1.0).abs() > SIMPLEX_TOL || p.iter().any(|v| !(0.0..=1.0).contains(v)) {
            return Err(GraceError::domain(format!("el2n: row {r} is not on the simplex (sum {total})")));
        }
        let ones = o.iter().filter(|&&v| v == 1.0).count();
        if ones != 1 || o.iter().any(|&v| v != 0.0 && v != 1.0) {
            return Err(GraceError::domain(format!("el2n: label row {r} is not one-hot")));
        }
        acc += p.iter().zip(o).map(|(a, b)| (a - b) * (a - b)).sum::<f64>();
    }
    Ok(acc.sqrt())
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct WarpParams {
    pub alpha: f64,
    pub beta: f64,
    pub gamma_temp: f64,
}

impl WarpParams {
    pub fn new(alpha: f64, beta: f64, gamma_temp: f64) -> Result<Self> {
        if !(alpha > 0.0 && alpha.is_finite()) || !(beta > 0.0 && beta.is_finite()) {
            return Err(GraceError::config(
                "beta_const_c",
                format!("Beta shape must be positive and finite (alpha = {alpha}, beta = {beta})"),
            ));
        }
        if !(gamma_temp >= 0.0 && gamma_temp.is_finite()) {
            return Err(GraceError::config("gamma_temp", format!("must be >= 0, got {gamma_temp}")));
        }
        Ok(WarpParams {
            alpha,
            beta,
            gamma_temp,
        })
    }

    /// Interior mode `(alpha - 1) / (alpha + beta - 2)`, when both shapes exceed 1.
    pub fn mode(&self) -> Option<f64> {
        (self.alpha > 1.0 && self.beta > 1.0).then(|| (self.alpha - 1.0) / (self.alpha + self.beta - 2.0))
    }

    fn ln_norm(&self) -> f64 {
        ln_gamma(self.alpha + self.beta) - ln_gamma(self.alpha) - ln_gamma(self.beta)
    }

    /// Log Beta density at `x`; `-inf` where the density vanishes.
    pub fn ln_density(&self, x: f64) -> f64 {
        let term = |shape: f64, v: f64| if shape == 1.0 { 0.0 } else { (shape - 1.0) * v.ln() };
        self.ln_norm() + term(self.alpha, x) + term(self.beta, 1.0 - x)
    }

    /// Location of the density's maximum over the clamped interval.
    fn peak_location(&self) -> f64 {
        match self.mode() {
            Some(m) => clamp_unit(m),
            None if self.alpha > 1.0 || (self.alpha == 1.0 && self.beta < 1.0) => 1.0 - CLAMP_EPS,
            None if self.alpha == 1.0 && self.beta == 1.0 => 0.5,
            None if self.alpha < 1.0 && self.beta < 1.0 => {
                // U-shaped: larger endpoint wins
                if self.ln_density(CLAMP_EPS) >= self.ln_density(1.0 - CLAMP_EPS) {
                    CLAMP_EPS
                } else {
                    1.0 - CLAMP_EPS
                }
            }
            None => CLAMP_EPS,
        }
    }
}

/// `alpha = 1 + C * mean(normalized)^q * eta^r`, `beta = C - alpha`.
pub fn derive_warp_params(normalized_scores: &[f64], eta: f64, cfg: &SelectionConfig) -> Result<WarpParams> {
    if normalized_scores.is_empty() {
        return Err(GraceError::domain("derive_warp_params on an empty score set"));
    }
    let c = cfg.beta_const_c;
    if !(c > 2.0) {
        return Err(GraceError::config("beta_const_c", format!("must be > 2, got {c}")));
    }
    let mean = normalized_scores.iter().sum::<f64>() / normalized_scores.len() as f64;
    let alpha = 1.0 + c * mean.powf(cfg.q_exp) * eta.powf(cfg.r_exp);
    let beta = c - alpha;
    if !(alpha > 0.0) || !(beta > 0.0) {
        return Err(GraceError::config(
            "beta_const_c",
            format!("C = {c} too small for the score mass: alpha = {alpha}, beta = {beta}"),
        ));
    }
    WarpParams::new(alpha, beta, cfg.gamma_temp)
}

/// `Beta(x; alpha, beta)^gamma`.
pub fn warp_importance(x: f64, p: &WarpParams) -> Result<f64> {
    if !(0.0..=1.0).contains(&x) {
        return Err(GraceError::domain(format!("warp_importance: x = {x} outside [0, 1]")));
    }
    if p.gamma_temp == 0.0 {
        return Ok(1.0);
    }
    Ok((p.gamma_temp * p.ln_density(x)).exp())
}

/// Warps every normalized score. With `normalize`, divides by the warped
/// value at the density's peak so the output lies in `[0, 1]`.
pub fn warp_all(normalized: &[f64], p: &WarpParams, normalize: bool) -> Result<Vec<f64>> {
    let peak = if normalize && p.gamma_temp > 0.0 {
        p.gamma_temp * p.ln_density(p.peak_location())
    } else {
        0.0
    };
    normalized
        .iter()
        .map(|&x| {
            let x = clamp_unit(x);
            if p.gamma_temp == 0.0 {
                return Ok(1.0);
            }
            let v = (p.gamma_temp * p.ln_density(x) - peak).exp();
            if normalize {
                Ok(v.min(1.0))
            } else if v.is_finite() {
                Ok(v)
            } else {
                Err(GraceError::domain(format!("warped score overflowed at x = {x}")))
            }
        })
        .collect()
}

/// Warped selection scores for every sample, from the ledger's current raw scores.
pub fn selection_scores(ledger: &ScoreLedger, cfg: &SelectionConfig) -> Result<(WarpParams, Vec<f64>)> {
    let normalized = ledger.min_max_normalize();
    let params = derive_warp_params(&normalized, cfg.budget_eta, cfg)?;
    let warped = warp_all(&normalized, &params, cfg.normalize_warp)?;
    Ok((params, warped))
}
