//! Synthetic volumes, preprocessing, cropping and the SVV1 file format.
//!
//! SVV1 layout (little-endian):
//!
//! | offset | size | field |
//! |---|---|---|
//! | 0 | 4 | magic `SVV1` |
//! | 4 | 1 | version = 1 |
//! | 5 | 1 | dtype code (1 = f32, 2 = f64) |
//! | 6 | 1 | channel count C |
//! | 7 | 1 | reserved = 0 |
//! | 8 | 12 | extents H, W, D as u32 |
//! | 20 | 12 | spacings as f32 (mm) |
//! | 32 | 4 | label class count as u32 |
//! | 36 | | C·H·W·D image values, then H·W·D label bytes |

use std::path::Path;

use crate::error::{Error, Result};
use crate::io::{expect_dtype, ByteReader};
use crate::tensor::{Element, Init, Rng, Tensor};

pub const MAGIC: &[u8; 4] = b"SVV1";
pub const VERSION: u8 = 1;
pub const HEADER_LEN: usize = 36;
pub const NOISE_STD: f64 = 0.1;
const MAX_LAYOUT_DRAWS: usize = 64;
/// Outer ellipsoid radii as a fraction of the axis extent.
const RADIUS_FRACTION: (f64, f64) = (0.2, 0.35);
/// Radius factor from one class to the next nested one.
const NESTED_SHRINK: (f64, f64) = (0.55, 0.8);

/// One multi-channel volume with its integer label map.
#[derive(Clone, Debug, PartialEq)]
pub struct VolumeSample<T = f32> {
    /// `[C, H, W, D]`.
    pub image: Tensor<T>,
    /// `H·W·D` values in `0..=num_classes`, 0 is background.
    pub label: Vec<u8>,
    pub num_classes: usize,
    pub spacing: [f32; 3],
    pub id: String,
}

impl<T: Element> VolumeSample<T> {
    pub fn new(image: Tensor<T>, label: Vec<u8>, num_classes: usize, spacing: [f32; 3], id: impl Into<String>) -> Result<Self> {
        let s = image.shape();
        if s.len() != 4 {
            return Err(Error::Shape(format!("image must be [C, H, W, D], got {s:?}")));
        }
        if label.len() != s[1] * s[2] * s[3] {
            return Err(Error::Shape(format!("{} labels for spatial shape {:?}", label.len(), &s[1..])));
        }
        if let Some(&v) = label.iter().find(|&&v| v as usize > num_classes) {
            return Err(Error::Domain(format!("label {v} exceeds class count {num_classes}")));
        }
        Ok(VolumeSample { image, label, num_classes, spacing, id: id.into() })
    }

    pub fn channels(&self) -> usize {
        self.image.shape()[0]
    }

    pub fn size(&self) -> [usize; 3] {
        let s = self.image.shape();
        [s[1], s[2], s[3]]
    }

    /// Multi-label target `[num_classes, H, W, D]`; channel `c` marks
    /// voxels whose label is at least `c + 1` (nested regions).
    pub fn target(&self) -> Result<Tensor<T>> {
        let [h, w, d] = self.size();
        let mut out = Vec::with_capacity(self.num_classes * self.label.len());
        for c in 0..self.num_classes {
            out.extend(self.label.iter().map(|&l| if l as usize > c { T::one() } else { T::zero() }));
        }
        Tensor::from_vec([self.num_classes, h, w, d], out)
    }

    pub fn has_foreground(&self) -> bool {
        self.label.iter().any(|&l| l > 0)
    }
}

#[derive(Clone, Copy, Debug)]
struct Ellipsoid {
    center: [f64; 3],
    radii: [f64; 3],
}

impl Ellipsoid {
    fn contains(&self, p: [usize; 3]) -> bool {
        (0..3).map(|a| ((p[a] as f64 - self.center[a]) / self.radii[a]).powi(2)).sum::<f64>() <= 1.0
    }
}

/// Deterministic synthetic volume: nested random ellipsoids (class `c + 1`
/// inside class `c`), class-dependent intensities per channel, a 3³ box
/// blur and Gaussian noise of std 0.1.
pub fn gen_synthetic(seed: u64, size: [usize; 3], channels: usize, num_classes: usize) -> Result<VolumeSample<f32>> {
    if size.iter().any(|&e| e < 8) {
        return Err(Error::Shape(format!("synthetic volumes need at least 8 voxels per axis, got {size:?}")));
    }
    if channels == 0 || num_classes == 0 || num_classes > 255 {
        return Err(Error::Config(format!("need channels >= 1 and 1..=255 classes, got {channels} and {num_classes}")));
    }
    let mut rng = Rng::new(seed);
    let [h, w, d] = size;
    let n = h * w * d;

    // Deep classes can be swallowed by the next one on tiny grids; redraw
    // the layout until every class owns at least one voxel.
    let mut label = vec![0u8; n];
    let mut complete = false;
    for _ in 0..MAX_LAYOUT_DRAWS {
        draw_layout(&mut rng, size, num_classes, &mut label);
        let mut seen = vec![false; num_classes + 1];
        label.iter().for_each(|&l| seen[l as usize] = true);
        if seen[1..].iter().all(|&s| s) {
            complete = true;
            break;
        }
    }
    if !complete {
        return Err(Error::Config(format!("{num_classes} nested classes do not fit a {size:?} volume")));
    }

    let mut image = Vec::with_capacity(channels * n);
    for _ in 0..channels {
        let gains: Vec<f64> = (0..=num_classes).map(|k| k as f64 * rng.uniform(0.8, 1.2)).collect();
        let raw: Vec<f64> = label.iter().map(|&l| gains[l as usize]).collect();
        let smooth = box_blur(&raw, size);
        image.extend(smooth.into_iter().map(|v| (v + NOISE_STD * rng.next_normal()) as f32));
    }
    VolumeSample::new(Tensor::from_vec([channels, h, w, d], image)?, label, num_classes, [1.0; 3], format!("synth_{seed:06}"))
}

fn draw_layout(rng: &mut Rng, size: [usize; 3], num_classes: usize, label: &mut [u8]) {
    let [h, w, d] = size;
    let count = 1 + rng.below(3) as usize;
    let mut shapes: Vec<Ellipsoid> = (0..count)
        .map(|_| {
            let center = size.map(|e| {
                let lo = e / 4;
                (lo + rng.below((e - 2 * lo) as u64) as usize) as f64
            });
            let radii = size.map(|e| (e as f64 * rng.uniform(RADIUS_FRACTION.0, RADIUS_FRACTION.1)).max(num_classes as f64));
            Ellipsoid { center, radii }
        })
        .collect();
    label.fill(0);
    for class in 1..=num_classes {
        for e in &shapes {
            for hi in 0..h {
                for wi in 0..w {
                    for di in 0..d {
                        if e.contains([hi, wi, di]) {
                            label[(hi * w + wi) * d + di] = class as u8;
                        }
                    }
                }
            }
        }
        // the center voxel is integral, so every level keeps it
        let floor = num_classes.saturating_sub(class) as f64;
        for e in &mut shapes {
            let f = rng.uniform(NESTED_SHRINK.0, NESTED_SHRINK.1);
            e.radii = e.radii.map(|r| (r * f).max(floor));
        }
    }
}

/// Mean over the 3³ neighbourhood clipped to the volume.
fn box_blur(v: &[f64], [h, w, d]: [usize; 3]) -> Vec<f64> {
    let mut out = vec![0.0; v.len()];
    let r = |i: usize, n: usize| i.saturating_sub(1)..(i + 2).min(n);
    for hi in 0..h {
        for wi in 0..w {
            for di in 0..d {
                let (mut s, mut c) = (0.0, 0.0);
                for a in r(hi, h) {
                    for b in r(wi, w) {
                        for e in r(di, d) {
                            s += v[(a * w + b) * d + e];
                            c += 1.0;
                        }
                    }
                }
                out[(hi * w + wi) * d + di] = s / c;
            }
        }
    }
    out
}

/// Per-channel z-score with the population standard deviation.
pub fn zscore_normalize<T: Element>(image: &Tensor<T>) -> Result<Tensor<T>> {
    if image.rank() < 2 {
        return Err(Error::Shape(format!("expected [C, ...], got {:?}", image.shape())));
    }
    let per: usize = image.shape()[1..].iter().product();
    let mut out = Vec::with_capacity(image.numel());
    for (c, ch) in image.data().chunks(per.max(1)).enumerate() {
        let n = ch.len() as f64;
        let mean = ch.iter().map(|v| v.to_f64().unwrap()).sum::<f64>() / n;
        let var = ch.iter().map(|v| (v.to_f64().unwrap() - mean).powi(2)).sum::<f64>() / n;
        if !(var > 0.0) {
            return Err(Error::Degenerate(format!("channel {c} has zero variance")));
        }
        let sd = var.sqrt();
        out.extend(ch.iter().map(|v| T::lit((v.to_f64().unwrap() - mean) / sd)));
    }
    Tensor::from_vec(image.shape().to_vec(), out)
}

/// Returns `sample` with a z-scored image.
pub fn normalize_sample<T: Element>(sample: &VolumeSample<T>) -> Result<VolumeSample<T>> {
    Ok(VolumeSample { image: zscore_normalize(&sample.image)?, ..sample.clone() })
}

fn crop_at<T: Element>(s: &VolumeSample<T>, corner: [usize; 3], patch: [usize; 3]) -> Result<VolumeSample<T>> {
    let [_, w, d] = s.size();
    let c = s.channels();
    let mut img = Vec::with_capacity(c * patch.iter().product::<usize>());
    let mut lab = Vec::with_capacity(patch.iter().product());
    let src = s.image.data();
    let vol = s.label.len();
    for ch in 0..c {
        for hi in 0..patch[0] {
            for wi in 0..patch[1] {
                let row = ((corner[0] + hi) * w + corner[1] + wi) * d + corner[2];
                img.extend_from_slice(&src[ch * vol + row..ch * vol + row + patch[2]]);
                if ch == 0 {
                    lab.extend_from_slice(&s.label[row..row + patch[2]]);
                }
            }
        }
    }
    VolumeSample::new(Tensor::from_vec([c, patch[0], patch[1], patch[2]], img)?, lab, s.num_classes, s.spacing, s.id.clone())
}

/// Uniformly placed crop. A crop without foreground is redrawn once with
/// probability 0.5.
pub fn random_crop<T: Element>(sample: &VolumeSample<T>, patch: [usize; 3], rng: &mut Rng) -> Result<VolumeSample<T>> {
    let size = sample.size();
    if (0..3).any(|a| patch[a] == 0 || patch[a] > size[a]) {
        return Err(Error::Shape(format!("patch {patch:?} does not fit volume {size:?}")));
    }
    let draw = |rng: &mut Rng| {
        let corner = [0, 1, 2].map(|a| rng.below((size[a] - patch[a] + 1) as u64) as usize);
        crop_at(sample, corner, patch)
    };
    let first = draw(rng)?;
    if !first.has_foreground() && rng.next_f64() < 0.5 {
        return draw(rng);
    }
    Ok(first)
}

/// Flips each spatial axis independently with probability `p`.
pub fn random_flip<T: Element>(sample: &VolumeSample<T>, p: f64, rng: &mut Rng) -> Result<VolumeSample<T>> {
    let flip = [0, 1, 2].map(|_| rng.next_f64() < p);
    let [h, w, d] = sample.size();
    let vol = h * w * d;
    let src = |hi: usize, wi: usize, di: usize| {
        let m = |i: usize, n: usize, f: bool| if f { n - 1 - i } else { i };
        (m(hi, h, flip[0]) * w + m(wi, w, flip[1])) * d + m(di, d, flip[2])
    };
    let mut img = Vec::with_capacity(sample.image.numel());
    let mut lab = Vec::with_capacity(vol);
    for ch in 0..sample.channels() {
        for hi in 0..h {
            for wi in 0..w {
                for di in 0..d {
                    let s = src(hi, wi, di);
                    img.push(sample.image.data()[ch * vol + s]);
                    if ch == 0 {
                        lab.push(sample.label[s]);
                    }
                }
            }
        }
    }
    VolumeSample::new(Tensor::from_vec(sample.image.shape().to_vec(), img)?, lab, sample.num_classes, sample.spacing, sample.id.clone())
}

pub fn encode_volume<T: Element>(s: &VolumeSample<T>) -> Result<Vec<u8>> {
    let c = s.channels();
    if c > 255 {
        return Err(Error::Config(format!("SVV1 stores at most 255 channels, got {c}")));
    }
    let size = s.size();
    if size.iter().any(|&e| e > u32::MAX as usize) {
        return Err(Error::Config(format!("extent too large for SVV1: {size:?}")));
    }
    let mut out = Vec::with_capacity(HEADER_LEN + s.image.numel() * T::DTYPE.size_of() + s.label.len());
    out.extend_from_slice(MAGIC);
    out.extend_from_slice(&[VERSION, T::DTYPE.code(), c as u8, 0]);
    for e in size {
        out.extend_from_slice(&(e as u32).to_le_bytes());
    }
    for sp in s.spacing {
        out.extend_from_slice(&sp.to_le_bytes());
    }
    out.extend_from_slice(&(s.num_classes as u32).to_le_bytes());
    for &v in s.image.data() {
        v.write_le(&mut out);
    }
    out.extend_from_slice(&s.label);
    Ok(out)
}

pub fn decode_volume<T: Element>(bytes: &[u8], id: &str) -> Result<VolumeSample<T>> {
    let mut r = ByteReader::new(bytes);
    if r.take(4, "magic")? != MAGIC {
        return r.fail(0, "bad magic, expected SVV1");
    }
    let version = r.u8("version")?;
    if version != VERSION {
        return r.fail(4, format!("unsupported version {version}, expected {VERSION}"));
    }
    let code = r.u8("dtype")?;
    expect_dtype::<T>(&r, code, 5)?;
    let c = r.u8("channel count")? as usize;
    if c == 0 {
        return r.fail(6, "channel count is zero");
    }
    if r.u8("reserved byte")? != 0 {
        return r.fail(7, "reserved byte must be zero");
    }
    let size = [r.u32("extent H")? as usize, r.u32("extent W")? as usize, r.u32("extent D")? as usize];
    let spacing = [r.f32("spacing")?, r.f32("spacing")?, r.f32("spacing")?];
    let num_classes = r.u32("class count")? as usize;
    let vol = size.iter().try_fold(1usize, |a, &e| a.checked_mul(e));
    let vol = match vol {
        Some(v) => v,
        None => return r.fail(8, "extents overflow"),
    };
    let image = r.values::<T>(c * vol, "image payload")?;
    let label_at = r.pos();
    let label = r.take(vol, "label payload")?.to_vec();
    if let Some(i) = label.iter().position(|&l| l as usize > num_classes) {
        return r.fail(label_at + i as u64, format!("label {} exceeds class count {num_classes}", label[i]));
    }
    r.finish()?;
    VolumeSample::new(Tensor::from_vec([c, size[0], size[1], size[2]], image)?, label, num_classes, spacing, id)
}

pub fn save_volume<T: Element>(path: &Path, sample: &VolumeSample<T>) -> Result<()> {
    std::fs::write(path, encode_volume(sample)?)?;
    Ok(())
}

/// Reads an SVV1 file; the sample id is the file stem.
pub fn load_volume<T: Element>(path: &Path) -> Result<VolumeSample<T>> {
    let bytes = std::fs::read(path)?;
    let id = path.file_stem().map(|s| s.to_string_lossy().into_owned()).unwrap_or_default();
    decode_volume(&bytes, &id)
}

/// All `*.svv` files in `dir`, sorted by name.
pub fn list_volumes(dir: &Path) -> Result<Vec<std::path::PathBuf>> {
    let mut v: Vec<_> = std::fs::read_dir(dir)?
        .filter_map(|e| e.ok().map(|e| e.path()))
        .filter(|p| p.extension().is_some_and(|x| x == "svv"))
        .collect();
    v.sort();
    Ok(v)
}

/// Random image with a random label map, for format tests.
pub fn random_sample<T: Element>(rng: &mut Rng, channels: usize, size: [usize; 3], num_classes: usize) -> Result<VolumeSample<T>> {
    let [h, w, d] = size;
    let image = Tensor::build(Init::Normal { mean: 0.0, std: 1.0 }, [channels, h, w, d], Some(rng))?;
    let label = (0..h * w * d).map(|_| rng.below(num_classes as u64 + 1) as u8).collect();
    VolumeSample::new(image, label, num_classes, [1.0, 1.5, 2.0], "random")
}
