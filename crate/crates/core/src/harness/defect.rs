//! Delay defect of coupled weight decay.
//!
//! With decay, one SGD step gives `θ − ηg − λθ`; without it, `θ − ηg`. The
//! decayed weight ends up farther from zero exactly when
//!
//! ```text
//! ηg > (1 − λ/2)·θ   if θ > 0
//! ηg < (1 − λ/2)·θ   if θ < 0
//! ```
//!
//! for `λ > 0`. The scan evaluates both squared distances directly in exact
//! integer arithmetic (every grid value is scaled by a common power of two,
//! which makes it an integer) and compares the verdict with the closed-form
//! condition, so the two cannot drift apart through rounding.

use num_bigint::BigInt;
use num_traits::{Float, Signed, Zero};
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DefectCell {
    pub eta_g: f64,
    pub lambda: f64,
    pub theta_prev: f64,
    /// `(θ − ηg − λθ)²`, rounded to `f64`.
    pub with_decay: f64,
    /// `(θ − ηg)²`, rounded to `f64`.
    pub without_decay: f64,
    /// Exact verdict of `with_decay > without_decay`.
    pub direct: bool,
    pub closed_form: bool,
    /// `with_decay − without_decay`, rounded to `f64`.
    pub margin: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DefectScan {
    pub cells: Vec<DefectCell>,
    pub disagreements: usize,
}

impl DefectScan {
    pub fn defect_count(&self) -> usize {
        self.cells.iter().filter(|c| c.direct).count()
    }

    pub fn write_csv(&self, mut out: impl std::io::Write) -> std::io::Result<()> {
        writeln!(
            out,
            "eta_g,lambda,theta_prev,with_decay,without_decay,margin,defect,closed_form"
        )?;
        for c in &self.cells {
            writeln!(
                out,
                "{},{},{},{},{},{},{},{}",
                c.eta_g,
                c.lambda,
                c.theta_prev,
                c.with_decay,
                c.without_decay,
                c.margin,
                c.direct,
                c.closed_form
            )?;
        }
        Ok(())
    }
}

/// Smallest `k` such that `x · 2^k` is an integer for every `x`.
fn common_scale(values: impl Iterator<Item = f64>) -> u32 {
    values
        .filter(|x| *x != 0.0)
        .map(|x| {
            let (_, exp, _) = x.integer_decode();
            (-i32::from(exp)).max(0) as u32
        })
        .max()
        .unwrap_or(0)
}

/// `x · 2^k` as an exact integer.
fn scaled(x: f64, k: u32) -> BigInt {
    if x == 0.0 {
        return BigInt::zero();
    }
    let (mantissa, exp, sign) = x.integer_decode();
    let v = BigInt::from(mantissa) << (i32::from(exp) + k as i32) as usize;
    if sign < 0 {
        -v
    } else {
        v
    }
}

/// Evaluates every `(ηg, λ, θ)` combination of the three grids.
pub fn delay_defect_scan(eta_g: &[f64], lambdas: &[f64], thetas: &[f64]) -> Result<DefectScan> {
    if eta_g
        .iter()
        .chain(lambdas)
        .chain(thetas)
        .any(|x| !x.is_finite())
    {
        return Err(Error::Config("delay-defect grid must be finite".into()));
    }
    let k = common_scale(eta_g.iter().chain(lambdas).chain(thetas).copied());
    let exact = |xs: &[f64]| xs.iter().map(|&x| scaled(x, k)).collect::<Vec<_>>();
    let (eg_n, lam_n, th_n) = (exact(eta_g), exact(lambdas), exact(thetas));
    let one = BigInt::from(1) << k as usize;
    let two = &one << 1usize;

    // Each value x is n_x / 2^k. Both squared distances are compared on the
    // common scale 2^(4k), the closed-form sides on 2^(2k+1).
    let blocks: Vec<(Vec<DefectCell>, usize)> = eta_g
        .par_iter()
        .zip(&eg_n)
        .map(|(&eg, eg_q)| {
            let mut cells = Vec::with_capacity(lambdas.len() * thetas.len());
            let mut disagreements = 0;
            let eg_wide = eg_q << (k as usize + 1);
            for (&lam, lam_q) in lambdas.iter().zip(&lam_n) {
                let factor = &two - lam_q;
                for (&th, th_q) in thetas.iter().zip(&th_n) {
                    let plain = (th_q - eg_q) * &one;
                    let decayed = &plain - lam_q * th_q;
                    let direct = &decayed * &decayed > &plain * &plain;

                    let threshold = &factor * th_q;
                    let closed_form = lam_q.is_positive()
                        && ((th_q.is_positive() && eg_wide > threshold)
                            || (th_q.is_negative() && eg_wide < threshold));

                    if direct != closed_form {
                        disagreements += 1;
                    }
                    let with_decay = (th - eg - lam * th).powi(2);
                    let without_decay = (th - eg).powi(2);
                    cells.push(DefectCell {
                        eta_g: eg,
                        lambda: lam,
                        theta_prev: th,
                        with_decay,
                        without_decay,
                        direct,
                        closed_form,
                        margin: with_decay - without_decay,
                    });
                }
            }
            (cells, disagreements)
        })
        .collect();

    let disagreements = blocks.iter().map(|(_, d)| d).sum();
    let cells = blocks.into_iter().flat_map(|(c, _)| c).collect();
    Ok(DefectScan {
        cells,
        disagreements,
    })
}

/// `count` evenly spaced points from `lo` to `hi` inclusive.
pub fn linspace(lo: f64, hi: f64, count: usize) -> Vec<f64> {
    match count {
        0 => Vec::new(),
        1 => vec![lo],
        _ => (0..count)
            .map(|i| lo + (hi - lo) * i as f64 / (count - 1) as f64)
            .collect(),
    }
}
