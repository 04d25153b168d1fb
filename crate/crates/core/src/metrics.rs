//! Hard Dice and 95th-percentile Hausdorff distance on binary masks.
//!
//! Conventions: a voxel is foreground when its probability is strictly
//! above 0.5; a boundary voxel is a foreground voxel with a background
//! face neighbour or lying on the volume border; distances are Euclidean in
//! millimetres; the percentile interpolates linearly between order
//! statistics at rank `0.95 * (n - 1)`; the result is the larger of the two
//! directed values and is undefined when either mask is empty.

use crate::error::{Error, Result};
use crate::tensor::{Element, Tensor};

pub const THRESHOLD: f64 = 0.5;

#[derive(Clone, Debug, PartialEq)]
pub struct BinaryMask {
    shape: [usize; 3],
    data: Vec<bool>,
    spacing: [f64; 3],
}

impl BinaryMask {
    pub fn new(shape: [usize; 3], data: Vec<bool>, spacing: [f64; 3]) -> Result<Self> {
        if data.len() != shape.iter().product::<usize>() {
            return Err(Error::Shape(format!("{} values for mask shape {shape:?}", data.len())));
        }
        if spacing.iter().any(|&s| !(s > 0.0 && s.is_finite())) {
            return Err(Error::Domain(format!("spacing must be positive, got {spacing:?}")));
        }
        Ok(BinaryMask { shape, data, spacing })
    }

    pub fn shape(&self) -> [usize; 3] {
        self.shape
    }

    pub fn spacing(&self) -> [f64; 3] {
        self.spacing
    }

    pub fn data(&self) -> &[bool] {
        &self.data
    }

    pub fn count(&self) -> usize {
        self.data.iter().filter(|&&v| v).count()
    }

    fn at(&self, [h, w, d]: [usize; 3]) -> bool {
        self.data[(h * self.shape[1] + w) * self.shape[2] + d]
    }

    /// Foreground voxels with a background face neighbour or on the border.
    pub fn boundary(&self) -> Vec<[usize; 3]> {
        let [sh, sw, sd] = self.shape;
        let mut out = Vec::new();
        for h in 0..sh {
            for w in 0..sw {
                for d in 0..sd {
                    let p = [h, w, d];
                    if !self.at(p) {
                        continue;
                    }
                    let border = (0..3).any(|a| p[a] == 0 || p[a] + 1 == self.shape[a]);
                    let exposed = border
                        || (0..3).any(|a| {
                            let mut lo = p;
                            lo[a] -= 1;
                            let mut hi = p;
                            hi[a] += 1;
                            !self.at(lo) || !self.at(hi)
                        });
                    if exposed {
                        out.push(p);
                    }
                }
            }
        }
        out
    }
}

/// Thresholds each channel of a `[C, H, W, D]` probability volume.
pub fn binarize<T: Element>(prob: &Tensor<T>, spacing: [f64; 3]) -> Result<Vec<BinaryMask>> {
    let s = prob.shape();
    if s.len() != 4 {
        return Err(Error::Shape(format!("binarize expects [C, H, W, D], got {s:?}")));
    }
    let shape = [s[1], s[2], s[3]];
    let per: usize = shape.iter().product();
    let th = T::lit(THRESHOLD);
    prob.data()
        .chunks(per.max(1))
        .take(s[0])
        .map(|c| BinaryMask::new(shape, c.iter().map(|&v| v > th).collect(), spacing))
        .collect()
}

fn check_pair(a: &BinaryMask, b: &BinaryMask) -> Result<()> {
    if a.shape != b.shape {
        return Err(Error::Shape(format!("mask shapes differ: {:?} vs {:?}", a.shape, b.shape)));
    }
    if a.spacing != b.spacing {
        return Err(Error::Shape(format!("mask spacings differ: {:?} vs {:?}", a.spacing, b.spacing)));
    }
    Ok(())
}

/// `2|a ∩ b| / (|a| + |b|)`, 1 when both masks are empty.
pub fn dice_score(a: &BinaryMask, b: &BinaryMask) -> Result<f64> {
    check_pair(a, b)?;
    let inter = a.data.iter().zip(&b.data).filter(|(&x, &y)| x && y).count();
    let total = a.count() + b.count();
    if total == 0 {
        return Ok(1.0);
    }
    Ok(2.0 * inter as f64 / total as f64)
}

/// Linear-interpolation percentile of unsorted values, `q` in [0, 100].
pub fn percentile(values: &mut [f64], q: f64) -> Option<f64> {
    if values.is_empty() {
        return None;
    }
    values.sort_by(f64::total_cmp);
    let pos = q / 100.0 * (values.len() - 1) as f64;
    let lo = pos.floor() as usize;
    let hi = (lo + 1).min(values.len() - 1);
    let frac = pos - lo as f64;
    Some(values[lo] + frac * (values[hi] - values[lo]))
}

/// Lower envelope of parabolas `f[q] + s²(p - q)²`; infinite `f` marks
/// non-sites.
fn edt_line(f: &[f64], s2: f64, out: &mut [f64], v: &mut Vec<usize>, z: &mut Vec<f64>) {
    v.clear();
    z.clear();
    let key = |q: usize| f[q] + s2 * (q * q) as f64;
    for q in 0..f.len() {
        if !f[q].is_finite() {
            continue;
        }
        loop {
            match v.last() {
                None => {
                    v.push(q);
                    z.push(f64::NEG_INFINITY);
                    break;
                }
                Some(&r) => {
                    let x = (key(q) - key(r)) / (2.0 * s2 * (q - r) as f64);
                    if x <= *z.last().unwrap() {
                        v.pop();
                        z.pop();
                    } else {
                        v.push(q);
                        z.push(x);
                        break;
                    }
                }
            }
        }
    }
    if v.is_empty() {
        out.iter_mut().for_each(|o| *o = f64::INFINITY);
        return;
    }
    let mut k = 0;
    for (p, o) in out.iter_mut().enumerate() {
        while k + 1 < v.len() && z[k + 1] < p as f64 {
            k += 1;
        }
        let d = p as f64 - v[k] as f64;
        *o = f[v[k]] + s2 * d * d;
    }
}

/// Squared Euclidean distance (in mm²) from every voxel to the nearest site.
pub fn squared_distance_transform(shape: [usize; 3], sites: &[[usize; 3]], spacing: [f64; 3]) -> Vec<f64> {
    let [sh, sw, sd] = shape;
    let mut g = vec![f64::INFINITY; sh * sw * sd];
    for p in sites {
        g[(p[0] * sw + p[1]) * sd + p[2]] = 0.0;
    }
    let strides = [sw * sd, sd, 1];
    let (mut v, mut z) = (Vec::new(), Vec::new());
    for axis in 0..3 {
        let n = shape[axis];
        let st = strides[axis];
        let s2 = spacing[axis] * spacing[axis];
        let mut line = vec![0.0; n];
        let mut out = vec![0.0; n];
        for start in 0..g.len() {
            // visit each line once, from its first element
            if (start / st) % n != 0 {
                continue;
            }
            for i in 0..n {
                line[i] = g[start + i * st];
            }
            edt_line(&line, s2, &mut out, &mut v, &mut z);
            for i in 0..n {
                g[start + i * st] = out[i];
            }
        }
    }
    g
}

/// Distances from each boundary voxel of `from` to the nearest boundary
/// voxel of `to`.
fn directed(from: &[[usize; 3]], to: &[[usize; 3]], shape: [usize; 3], spacing: [f64; 3]) -> Vec<f64> {
    let dt = squared_distance_transform(shape, to, spacing);
    from.iter().map(|p| dt[(p[0] * shape[1] + p[1]) * shape[2] + p[2]].sqrt()).collect()
}

/// Symmetric 95th-percentile boundary distance; `None` when either mask is empty.
pub fn hd95(a: &BinaryMask, b: &BinaryMask) -> Result<Option<f64>> {
    hausdorff_percentile(a, b, 95.0)
}

/// [`hd95`] generalized to any percentile; 100 gives the Hausdorff distance.
pub fn hausdorff_percentile(a: &BinaryMask, b: &BinaryMask, q: f64) -> Result<Option<f64>> {
    check_pair(a, b)?;
    let (ba, bb) = (a.boundary(), b.boundary());
    if ba.is_empty() || bb.is_empty() {
        return Ok(None);
    }
    let mut ab = directed(&ba, &bb, a.shape, a.spacing);
    let mut ba_d = directed(&bb, &ba, a.shape, a.spacing);
    let x = percentile(&mut ab, q).expect("nonempty");
    let y = percentile(&mut ba_d, q).expect("nonempty");
    Ok(Some(x.max(y)))
}

#[derive(Clone, Debug, PartialEq)]
pub struct ClassMetrics {
    pub dice: f64,
    /// `None` is the undefined sentinel (an empty mask).
    pub hd95: Option<f64>,
}

#[derive(Clone, Debug, PartialEq)]
pub struct MetricsReport {
    pub classes: Vec<ClassMetrics>,
    pub mean_dice: f64,
    /// Mean over classes with a defined value.
    pub mean_hd95: Option<f64>,
}

impl MetricsReport {
    pub fn from_classes(classes: Vec<ClassMetrics>) -> Self {
        let mean_dice = if classes.is_empty() { 0.0 } else { classes.iter().map(|c| c.dice).sum::<f64>() / classes.len() as f64 };
        let defined: Vec<f64> = classes.iter().filter_map(|c| c.hd95).collect();
        let mean_hd95 = (!defined.is_empty()).then(|| defined.iter().sum::<f64>() / defined.len() as f64);
        MetricsReport { classes, mean_dice, mean_hd95 }
    }

    /// Averages per-class values over several reports with the same classes.
    pub fn mean_of(reports: &[MetricsReport]) -> Self {
        let n = reports.first().map_or(0, |r| r.classes.len());
        let classes = (0..n)
            .map(|c| {
                let dice = reports.iter().map(|r| r.classes[c].dice).sum::<f64>() / reports.len() as f64;
                let hd: Vec<f64> = reports.iter().filter_map(|r| r.classes[c].hd95).collect();
                let hd95 = (!hd.is_empty()).then(|| hd.iter().sum::<f64>() / hd.len() as f64);
                ClassMetrics { dice, hd95 }
            })
            .collect();
        Self::from_classes(classes)
    }

    /// CSV with header `class,dice,hd95`; undefined distances are written
    /// as `undefined`, the last row holds the means.
    pub fn to_csv(&self) -> String {
        let fmt = |h: Option<f64>| h.map_or_else(|| "undefined".to_string(), |v| format!("{v}"));
        let mut s = String::from("class,dice,hd95\n");
        for (i, c) in self.classes.iter().enumerate() {
            s.push_str(&format!("{i},{},{}\n", c.dice, fmt(c.hd95)));
        }
        s.push_str(&format!("mean,{},{}\n", self.mean_dice, fmt(self.mean_hd95)));
        s
    }
}

/// Per-class Dice and HD95 of predicted against reference masks.
pub fn compare(pred: &[BinaryMask], truth: &[BinaryMask]) -> Result<MetricsReport> {
    if pred.len() != truth.len() {
        return Err(Error::Shape(format!("{} predicted classes vs {} reference classes", pred.len(), truth.len())));
    }
    let classes = pred
        .iter()
        .zip(truth)
        .map(|(p, t)| Ok(ClassMetrics { dice: dice_score(p, t)?, hd95: hd95(p, t)? }))
        .collect::<Result<_>>()?;
    Ok(MetricsReport::from_classes(classes))
}
