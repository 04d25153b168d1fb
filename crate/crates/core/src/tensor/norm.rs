//! Normalization kernels with fused backward.
//!
//! Both kernels standardize contiguous groups of `m` values using the
//! population variance: `xhat = (x - mean) / sqrt(var + eps)`.

use super::Element;
use crate::error::{Error, Result};

pub(crate) struct NormSaved<T> {
    pub xhat: Vec<T>,
    /// One reciprocal std per group.
    pub rstd: Vec<T>,
}

/// Standardizes `x` in consecutive groups of `m` elements.
pub(crate) fn standardize<T: Element>(x: &[T], m: usize, eps: T) -> Result<NormSaved<T>> {
    let inv_m = T::lit(1.0 / m as f64);
    let mut xhat = vec![T::zero(); x.len()];
    let mut rstd = Vec::with_capacity(x.len() / m);
    for (src, dst) in x.chunks(m).zip(xhat.chunks_mut(m)) {
        let mean = src.iter().fold(T::zero(), |a, &v| a + v) * inv_m;
        let var = src.iter().fold(T::zero(), |a, &v| a + (v - mean) * (v - mean)) * inv_m;
        let denom = (var + eps).sqrt();
        // NaN passes through so non-finite training states surface as divergence
        if denom == T::zero() {
            return Err(Error::Degenerate(
                "zero variance with eps = 0; normalization is undefined".into(),
            ));
        }
        let r = T::one() / denom;
        for (d, &v) in dst.iter_mut().zip(src) {
            *d = (v - mean) * r;
        }
        rstd.push(r);
    }
    Ok(NormSaved { xhat, rstd })
}

/// Gradient of `standardize` given upstream gradient `gxhat` on `xhat`.
pub(crate) fn standardize_backward<T: Element>(saved: &NormSaved<T>, gxhat: &[T], m: usize) -> Vec<T> {
    let inv_m = T::lit(1.0 / m as f64);
    let mut gx = vec![T::zero(); gxhat.len()];
    for (((g, xh), dst), &r) in gxhat
        .chunks(m)
        .zip(saved.xhat.chunks(m))
        .zip(gx.chunks_mut(m))
        .zip(&saved.rstd)
    {
        let sum_g = g.iter().fold(T::zero(), |a, &v| a + v);
        let sum_gx = g.iter().zip(xh).fold(T::zero(), |a, (&gv, &xv)| a + gv * xv);
        for i in 0..m {
            dst[i] = r * (g[i] - inv_m * sum_g - xh[i] * inv_m * sum_gx);
        }
    }
    gx
}
