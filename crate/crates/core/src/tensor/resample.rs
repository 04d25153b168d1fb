//! Spatial resampling of `[N, C, H, W, D]` volumes.
//!
//! Trilinear mode uses the align-corners-false convention: output voxel `o`
//! of an axis resized from `n_in` to `n_out` samples source coordinate
//! `(o + 0.5) * n_in / n_out - 0.5`, clamped below at 0, and interpolates
//! between `floor(src)` and `min(floor(src) + 1, n_in - 1)`. For a factor of
//! two this gives weights (0.75, 0.25) / (0.25, 0.75) in the interior.
//! Nearest mode picks `floor(o * n_in / n_out)`, which replicates each voxel
//! eight times for a factor of two.

use super::Element;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub enum ResampleMode {
    Nearest,
    Trilinear,
}

/// Per-output-index taps `(i0, i1, w0, w1)` for one axis.
pub(crate) fn axis_taps(mode: ResampleMode, n_in: usize, n_out: usize) -> Vec<(usize, usize, f64, f64)> {
    (0..n_out)
        .map(|o| match mode {
            ResampleMode::Nearest => {
                let i = (o * n_in / n_out).min(n_in - 1);
                (i, i, 1.0, 0.0)
            }
            ResampleMode::Trilinear => {
                let src = ((o as f64 + 0.5) * n_in as f64 / n_out as f64 - 0.5).max(0.0);
                let i0 = (src.floor() as usize).min(n_in - 1);
                let i1 = (i0 + 1).min(n_in - 1);
                let w1 = if i1 == i0 { 0.0 } else { src - i0 as f64 };
                (i0, i1, 1.0 - w1, w1)
            }
        })
        .collect()
}

pub(crate) struct Resampler<T> {
    planes: usize,
    input: [usize; 3],
    output: [usize; 3],
    taps: [Vec<(usize, usize, T, T)>; 3],
}

impl<T: Element> Resampler<T> {
    pub fn new(mode: ResampleMode, planes: usize, input: [usize; 3], output: [usize; 3]) -> Self {
        let conv = |a: usize| {
            axis_taps(mode, input[a], output[a])
                .into_iter()
                .map(|(i0, i1, w0, w1)| (i0, i1, T::lit(w0), T::lit(w1)))
                .collect()
        };
        Resampler { planes, input, output, taps: [conv(0), conv(1), conv(2)] }
    }

    #[inline]
    fn visit(&self, mut f: impl FnMut(usize, usize, T)) {
        let [_, iw, id] = self.input;
        let [oh, ow, od] = self.output;
        let iv = self.input.iter().product::<usize>();
        let ov = oh * ow * od;
        for p in 0..self.planes {
            for (h, &(h0, h1, a0, a1)) in self.taps[0].iter().enumerate() {
                for (w, &(w0, w1, b0, b1)) in self.taps[1].iter().enumerate() {
                    for (d, &(d0, d1, c0, c1)) in self.taps[2].iter().enumerate() {
                        let o = p * ov + (h * ow + w) * od + d;
                        for (hi, ha) in [(h0, a0), (h1, a1)] {
                            if ha == T::zero() {
                                continue;
                            }
                            for (wi, wb) in [(w0, b0), (w1, b1)] {
                                if wb == T::zero() {
                                    continue;
                                }
                                for (di, dc) in [(d0, c0), (d1, c1)] {
                                    if dc == T::zero() {
                                        continue;
                                    }
                                    f(o, p * iv + (hi * iw + wi) * id + di, ha * wb * dc);
                                }
                            }
                        }
                    }
                }
            }
        }
    }

    pub fn forward(&self, x: &[T]) -> Vec<T> {
        let mut out = vec![T::zero(); self.planes * self.output.iter().product::<usize>()];
        self.visit(|o, i, w| out[o] = out[o] + w * x[i]);
        out
    }

    pub fn backward(&self, gy: &[T]) -> Vec<T> {
        let mut gx = vec![T::zero(); self.planes * self.input.iter().product::<usize>()];
        self.visit(|o, i, w| gx[i] = gx[i] + w * gy[o]);
        gx
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn factor_two_trilinear_taps() {
        let t = axis_taps(ResampleMode::Trilinear, 2, 4);
        assert_eq!(t[0], (0, 1, 1.0, 0.0));
        assert_eq!(t[1], (0, 1, 0.75, 0.25));
        assert_eq!(t[2], (0, 1, 0.25, 0.75));
        assert_eq!(t[3], (1, 1, 1.0, 0.0));
    }

    #[test]
    fn size_one_axis_broadcasts() {
        let t = axis_taps(ResampleMode::Trilinear, 1, 3);
        assert!(t.iter().all(|&tap| tap == (0, 0, 1.0, 0.0)));
    }

    #[test]
    fn nearest_replicates() {
        let t = axis_taps(ResampleMode::Nearest, 2, 4);
        let idx: Vec<usize> = t.iter().map(|t| t.0).collect();
        assert_eq!(idx, vec![0, 0, 1, 1]);
    }
}
