//! Squared MMD in quadratic-form representation, its gradient, and the
//! un-normalized KL divergence used by the entropic baseline.

use ndarray::{Array1, ArrayView1, ArrayView2};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// Pre-clamp values below this are logged as suspicious round-off.
const NEGATIVE_ROUNDOFF_WARN: f64 = -1e-10;

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct MmdValue {
    pub squared: f64,
    pub value: f64,
}

impl MmdValue {
    /// Clamps a raw quadratic-form value at zero.
    pub fn from_raw(raw: f64) -> Self {
        if raw < NEGATIVE_ROUNDOFF_WARN {
            log::warn!("squared MMD {raw:e} below zero beyond round-off; clamped");
        }
        let squared = raw.max(0.0);
        Self { squared, value: squared.sqrt() }
    }
}

/// `w_a' G_aa w_a + w_b' G_bb w_b - 2 w_a' G_ab w_b`, clamped at zero.
pub fn mmd_squared(
    w_a: ArrayView1<f64>,
    w_b: ArrayView1<f64>,
    g_aa: ArrayView2<f64>,
    g_bb: ArrayView2<f64>,
    g_ab: ArrayView2<f64>,
) -> Result<MmdValue> {
    check_square(g_aa, w_a.len(), "G_aa")?;
    check_square(g_bb, w_b.len(), "G_bb")?;
    check_shape(g_ab, (w_a.len(), w_b.len()), "G_ab")?;
    let raw = w_a.dot(&g_aa.dot(&w_a)) + w_b.dot(&g_bb.dot(&w_b)) - 2.0 * w_a.dot(&g_ab.dot(&w_b));
    if !raw.is_finite() {
        return Err(Error::NonFiniteInput("squared MMD is not finite".into()));
    }
    Ok(MmdValue::from_raw(raw))
}

/// Squared `G`-norm of a residual vector, `r' G r`, clamped at zero.
pub fn g_norm_squared(r: ArrayView1<f64>, g: ArrayView2<f64>) -> f64 {
    MmdValue::from_raw(r.dot(&g.dot(&r))).squared
}

/// Gradient of the squared MMD with respect to `w_a`: `2 (G_aa w_a - G_ab w_b)`.
pub fn mmd_gradient_wrt_first(
    w_a: ArrayView1<f64>,
    w_b: ArrayView1<f64>,
    g_aa: ArrayView2<f64>,
    g_ab: ArrayView2<f64>,
) -> Result<Array1<f64>> {
    check_square(g_aa, w_a.len(), "G_aa")?;
    check_shape(g_ab, (w_a.len(), w_b.len()), "G_ab")?;
    Ok(2.0 * (g_aa.dot(&w_a) - g_ab.dot(&w_b)))
}

/// Un-normalized KL divergence `sum p ln(p/q) - p + q`, with `0 ln 0 = 0`.
pub fn kl_divergence(p: ArrayView1<f64>, q: ArrayView1<f64>) -> Result<f64> {
    if p.len() != q.len() {
        return Err(Error::DimensionMismatch(format!("{} vs {} entries", p.len(), q.len())));
    }
    let mut total = 0.0;
    for (index, (&pi, &qi)) in p.iter().zip(q.iter()).enumerate() {
        if pi < 0.0 || qi < 0.0 || !pi.is_finite() || !qi.is_finite() {
            return Err(Error::NonFiniteInput(format!("entry {index}: p={pi}, q={qi}")));
        }
        if pi > 0.0 {
            if qi == 0.0 {
                return Err(Error::SupportViolation { index });
            }
            total += pi * (pi / qi).ln() - pi + qi;
        } else {
            total += qi;
        }
    }
    Ok(total)
}

fn check_square(g: ArrayView2<f64>, n: usize, name: &str) -> Result<()> {
    check_shape(g, (n, n), name)
}

fn check_shape(g: ArrayView2<f64>, shape: (usize, usize), name: &str) -> Result<()> {
    if g.dim() != shape {
        return Err(Error::DimensionMismatch(format!("{name} is {:?}, expected {:?}", g.dim(), shape)));
    }
    Ok(())
}
