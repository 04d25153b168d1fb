//! Direct 3D convolution (cross-correlation, no kernel flip) over
//! `[N, C, H, W, D]` volumes with cubic kernels and uniform stride/padding.

use rayon::prelude::*;

use super::{parallel, Element};
use crate::error::{shape_err, Result};

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub(crate) struct ConvGeom {
    pub n: usize,
    pub cin: usize,
    pub cout: usize,
    pub input: [usize; 3],
    pub output: [usize; 3],
    pub k: usize,
    pub stride: usize,
    pub padding: usize,
}

impl ConvGeom {
    pub fn new(x_shape: &[usize], w_shape: &[usize], stride: usize, padding: usize) -> Result<Self> {
        if x_shape.len() != 5 || w_shape.len() != 5 {
            return Err(shape_err!("conv3d wants 5-d input and weight, got {x_shape:?} and {w_shape:?}"));
        }
        let k = w_shape[2];
        if w_shape[3] != k || w_shape[4] != k {
            return Err(shape_err!("conv3d kernel must be cubic, got {w_shape:?}"));
        }
        if w_shape[1] != x_shape[1] {
            return Err(shape_err!(
                "conv3d weight expects {} input channels, input has {}",
                w_shape[1],
                x_shape[1]
            ));
        }
        if stride == 0 {
            return Err(shape_err!("conv3d stride must be positive"));
        }
        let mut output = [0; 3];
        for a in 0..3 {
            let padded = x_shape[2 + a] + 2 * padding;
            if k > padded {
                return Err(shape_err!(
                    "conv3d kernel {k} larger than padded extent {padded} on spatial axis {a}"
                ));
            }
            output[a] = (padded - k) / stride + 1;
        }
        Ok(ConvGeom {
            n: x_shape[0],
            cin: x_shape[1],
            cout: w_shape[0],
            input: [x_shape[2], x_shape[3], x_shape[4]],
            output,
            k,
            stride,
            padding,
        })
    }

    pub fn out_shape(&self) -> Vec<usize> {
        vec![self.n, self.cout, self.output[0], self.output[1], self.output[2]]
    }

    fn in_vol(&self) -> usize {
        self.input.iter().product()
    }

    fn out_vol(&self) -> usize {
        self.output.iter().product()
    }

    fn k3(&self) -> usize {
        self.k * self.k * self.k
    }

    /// Output indices `o` on one axis for which `o*stride + koff - padding`
    /// lands inside the input.
    fn valid(&self, axis: usize, koff: usize) -> (usize, usize) {
        let (s, p) = (self.stride as isize, self.padding as isize);
        let koff = koff as isize;
        let len = self.input[axis] as isize;
        let out = self.output[axis] as isize;
        let lo = if p > koff { (p - koff + s - 1) / s } else { 0 };
        let hi = ((len - 1 + p - koff).div_euclid(s) + 1).clamp(0, out);
        (lo.min(out) as usize, hi as usize)
    }

    fn in_index(&self, o: usize, koff: usize) -> usize {
        o * self.stride + koff - self.padding
    }
}

/// Visits every (output offset, input offset) pair touched by kernel tap
/// `(kh, kw, kd)`; offsets are within one spatial plane.
#[inline]
fn for_each_tap(g: &ConvGeom, kh: usize, kw: usize, kd: usize, mut f: impl FnMut(usize, usize, usize)) {
    let (h0, h1) = g.valid(0, kh);
    let (w0, w1) = g.valid(1, kw);
    let (d0, d1) = g.valid(2, kd);
    if d0 >= d1 {
        return;
    }
    let [_, iw, id] = g.input;
    let [_, ow, od] = g.output;
    for oh in h0..h1 {
        let ih = g.in_index(oh, kh);
        for ow_ in w0..w1 {
            let iw_ = g.in_index(ow_, kw);
            let out_row = (oh * ow + ow_) * od;
            let in_row = (ih * iw + iw_) * id;
            f(out_row + d0, in_row + g.in_index(d0, kd), d1 - d0);
        }
    }
}

pub(crate) fn forward<T: Element>(g: &ConvGeom, x: &[T], w: &[T], bias: Option<&[T]>) -> Vec<T> {
    let ov = g.out_vol();
    let mut out = vec![T::zero(); g.n * g.cout * ov];
    let plane = |idx: usize, dst: &mut [T]| {
        let (n, co) = (idx / g.cout, idx % g.cout);
        if let Some(b) = bias {
            dst.fill(b[co]);
        }
        for ci in 0..g.cin {
            let xs = &x[(n * g.cin + ci) * g.in_vol()..][..g.in_vol()];
            let ws = &w[(co * g.cin + ci) * g.k3()..][..g.k3()];
            for kh in 0..g.k {
                for kw in 0..g.k {
                    for kd in 0..g.k {
                        let wv = ws[(kh * g.k + kw) * g.k + kd];
                        let st = g.stride;
                        for_each_tap(g, kh, kw, kd, |o, i, len| {
                            for t in 0..len {
                                dst[o + t] = dst[o + t] + wv * xs[i + t * st];
                            }
                        });
                    }
                }
            }
        }
    };
    let done = parallel::with_pool(|| {
        out.par_chunks_mut(ov).enumerate().for_each(|(i, d)| plane(i, d));
    });
    if done.is_none() {
        out.chunks_mut(ov).enumerate().for_each(|(i, d)| plane(i, d));
    }
    out
}

pub(crate) fn backward_input<T: Element>(g: &ConvGeom, gy: &[T], w: &[T]) -> Vec<T> {
    let iv = g.in_vol();
    let ov = g.out_vol();
    let mut gx = vec![T::zero(); g.n * g.cin * iv];
    let plane = |idx: usize, dst: &mut [T]| {
        let (n, ci) = (idx / g.cin, idx % g.cin);
        for co in 0..g.cout {
            let gs = &gy[(n * g.cout + co) * ov..][..ov];
            let ws = &w[(co * g.cin + ci) * g.k3()..][..g.k3()];
            for kh in 0..g.k {
                for kw in 0..g.k {
                    for kd in 0..g.k {
                        let wv = ws[(kh * g.k + kw) * g.k + kd];
                        let st = g.stride;
                        for_each_tap(g, kh, kw, kd, |o, i, len| {
                            for t in 0..len {
                                dst[i + t * st] = dst[i + t * st] + wv * gs[o + t];
                            }
                        });
                    }
                }
            }
        }
    };
    let done = parallel::with_pool(|| {
        gx.par_chunks_mut(iv).enumerate().for_each(|(i, d)| plane(i, d));
    });
    if done.is_none() {
        gx.chunks_mut(iv).enumerate().for_each(|(i, d)| plane(i, d));
    }
    gx
}

pub(crate) fn backward_weight<T: Element>(g: &ConvGeom, gy: &[T], x: &[T]) -> Vec<T> {
    let iv = g.in_vol();
    let ov = g.out_vol();
    let per_co = g.cin * g.k3();
    let mut gw = vec![T::zero(); g.cout * per_co];
    let block = |co: usize, dst: &mut [T]| {
        for ci in 0..g.cin {
            for kh in 0..g.k {
                for kw in 0..g.k {
                    for kd in 0..g.k {
                        let mut acc = T::zero();
                        for n in 0..g.n {
                            let gs = &gy[(n * g.cout + co) * ov..][..ov];
                            let xs = &x[(n * g.cin + ci) * iv..][..iv];
                            let st = g.stride;
                            for_each_tap(g, kh, kw, kd, |o, i, len| {
                                for t in 0..len {
                                    acc = acc + gs[o + t] * xs[i + t * st];
                                }
                            });
                        }
                        dst[ci * g.k3() + (kh * g.k + kw) * g.k + kd] = acc;
                    }
                }
            }
        }
    };
    let done = parallel::with_pool(|| {
        gw.par_chunks_mut(per_co).enumerate().for_each(|(i, d)| block(i, d));
    });
    if done.is_none() {
        gw.chunks_mut(per_co).enumerate().for_each(|(i, d)| block(i, d));
    }
    gw
}

pub(crate) fn backward_bias<T: Element>(g: &ConvGeom, gy: &[T]) -> Vec<T> {
    let ov = g.out_vol();
    (0..g.cout)
        .map(|co| {
            (0..g.n).fold(T::zero(), |acc, n| {
                gy[(n * g.cout + co) * ov..][..ov].iter().fold(acc, |a, &v| a + v)
            })
        })
        .collect()
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn output_extent_formula() {
        let g = ConvGeom::new(&[1, 2, 16, 16, 16], &[4, 2, 3, 3, 3], 2, 1).unwrap();
        assert_eq!(g.output, [8, 8, 8]);
        let g = ConvGeom::new(&[1, 2, 5, 6, 7], &[4, 2, 3, 3, 3], 1, 0).unwrap();
        assert_eq!(g.output, [3, 4, 5]);
        let g = ConvGeom::new(&[1, 1, 1, 1, 1], &[1, 1, 3, 3, 3], 2, 1).unwrap();
        assert_eq!(g.output, [1, 1, 1]);
    }

    #[test]
    fn kernel_larger_than_padded_input() {
        assert!(ConvGeom::new(&[1, 1, 2, 2, 2], &[1, 1, 3, 3, 3], 1, 0).is_err());
        assert!(ConvGeom::new(&[1, 2, 4, 4, 4], &[1, 3, 3, 3, 3], 1, 1).is_err());
    }

    #[test]
    fn valid_ranges_respect_padding() {
        let g = ConvGeom::new(&[1, 1, 4, 4, 4], &[1, 1, 3, 3, 3], 1, 1).unwrap();
        assert_eq!(g.valid(2, 0), (1, 4));
        assert_eq!(g.valid(2, 1), (0, 4));
        assert_eq!(g.valid(2, 2), (0, 3));
        let g = ConvGeom::new(&[1, 1, 5, 5, 5], &[1, 1, 3, 3, 3], 2, 1).unwrap();
        // outputs 0..3 read inputs -1,1,3 (k=0), 0,2,4 (k=1), 1,3,5 (k=2)
        assert_eq!(g.valid(0, 0), (1, 3));
        assert_eq!(g.valid(0, 1), (0, 3));
        assert_eq!(g.valid(0, 2), (0, 2));
    }
}
