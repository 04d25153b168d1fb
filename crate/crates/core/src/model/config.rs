use std::fmt::Write as _;

use crate::error::{Error, Result};

/// Which feature volume feeds the VAE branch.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum VaeSource {
    /// Output of feature mapping (after the transformer).
    Transformer,
    /// Encoder endpoint `F`.
    Encoder,
}

impl VaeSource {
    fn as_str(self) -> &'static str {
        match self {
            VaeSource::Transformer => "transformer",
            VaeSource::Encoder => "encoder",
        }
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct ModelConfig {
    pub in_channels: usize,
    pub out_channels: usize,
    pub base_filters: usize,
    pub blocks_per_level: [usize; 4],
    /// Encoder endpoint channels, always `8 * base_filters`.
    pub k: usize,
    pub d: usize,
    pub layers: usize,
    pub heads: usize,
    pub ffn_width: usize,
    pub latent_total: usize,
    pub mean_dims: usize,
    pub patch_size: [usize; 3],
    pub leaky_slope: f64,
    pub vae_source: VaeSource,
    pub seed: u64,
}

impl Default for ModelConfig {
    fn default() -> Self {
        Self::desk()
    }
}

impl ModelConfig {
    /// Small configuration used by tests and the acceptance suite.
    pub fn desk() -> Self {
        ModelConfig {
            in_channels: 4,
            out_channels: 3,
            base_filters: 4,
            blocks_per_level: [1, 1, 1, 1],
            k: 32,
            d: 64,
            layers: 2,
            heads: 4,
            ffn_width: 128,
            latent_total: 256,
            mean_dims: 128,
            patch_size: [16, 16, 16],
            leaky_slope: 0.01,
            vae_source: VaeSource::Transformer,
            seed: 0,
        }
    }

    /// Desk configuration with twice the base filters.
    pub fn desk2x() -> Self {
        let mut c = Self::desk();
        c.base_filters = 8;
        c.k = 64;
        c
    }

    /// Full-scale configuration.
    pub fn full() -> Self {
        ModelConfig {
            base_filters: 16,
            blocks_per_level: [1, 2, 2, 4],
            k: 128,
            d: 512,
            layers: 4,
            heads: 8,
            ffn_width: 1024,
            patch_size: [128, 128, 128],
            ..Self::desk()
        }
    }

    pub fn preset(name: &str) -> Option<Self> {
        match name {
            "desk" => Some(Self::desk()),
            "desk2x" => Some(Self::desk2x()),
            "full" => Some(Self::full()),
            _ => None,
        }
    }

    pub fn validate(&self) -> Result<()> {
        let cfg = |m: String| Err(Error::Config(m));
        for (name, v) in [
            ("in_channels", self.in_channels),
            ("out_channels", self.out_channels),
            ("base_filters", self.base_filters),
            ("d", self.d),
            ("layers", self.layers),
            ("heads", self.heads),
            ("ffn_width", self.ffn_width),
            ("mean_dims", self.mean_dims),
        ] {
            if v == 0 {
                return cfg(format!("{name} must be positive"));
            }
        }
        if self.blocks_per_level.contains(&0) {
            return cfg(format!("blocks_per_level must be positive, got {:?}", self.blocks_per_level));
        }
        if self.k != 8 * self.base_filters {
            return cfg(format!("k = {} must equal 8 * base_filters = {}", self.k, 8 * self.base_filters));
        }
        if self.d % self.heads != 0 {
            return cfg(format!("d = {} is not divisible by heads = {}", self.d, self.heads));
        }
        if self.d < 2 {
            return cfg("d must be at least 2".into());
        }
        if self.latent_total != 2 * self.mean_dims {
            return cfg(format!("latent_total = {} must equal 2 * mean_dims = {}", self.latent_total, 2 * self.mean_dims));
        }
        if let Some(&e) = self.patch_size.iter().find(|&&e| e == 0 || e % 8 != 0) {
            return cfg(format!("patch extent {e} is not a positive multiple of 8 (patch {:?})", self.patch_size));
        }
        if !(self.leaky_slope.is_finite() && self.leaky_slope >= 0.0) {
            return cfg(format!("leaky_slope must be finite and >= 0, got {}", self.leaky_slope));
        }
        Ok(())
    }

    /// Spatial grid of `F` and `Z`.
    pub fn grid(&self) -> [usize; 3] {
        self.patch_size.map(|e| e / 8)
    }

    pub fn tokens(&self) -> usize {
        self.grid().iter().product()
    }

    /// Grid after the stride-2 reduction convolution of the VAE branch.
    pub fn vae_grid(&self) -> [usize; 3] {
        self.grid().map(|e| (e + 1) / 2)
    }

    /// Applies one `key = value` setting; returns `Ok(false)` for keys this
    /// type does not own.
    pub fn set(&mut self, key: &str, value: &str) -> Result<bool> {
        let bad = |e: String| Error::Config(format!("invalid value {value:?} for {key}: {e}"));
        let int = || value.trim().parse::<usize>().map_err(|e| bad(e.to_string()));
        match key {
            "in_channels" => self.in_channels = int()?,
            "out_channels" => self.out_channels = int()?,
            "base_filters" => {
                self.base_filters = int()?;
                self.k = 8 * self.base_filters;
            }
            "blocks_per_level" => {
                let v = parse_list(value, ',').map_err(bad)?;
                self.blocks_per_level = v.try_into().map_err(|v: Vec<usize>| bad(format!("expected 4 entries, got {}", v.len())))?;
            }
            "k" => self.k = int()?,
            "d" => self.d = int()?,
            "layers" => self.layers = int()?,
            "heads" => self.heads = int()?,
            "ffn_width" => self.ffn_width = int()?,
            "latent_total" => self.latent_total = int()?,
            "mean_dims" => self.mean_dims = int()?,
            "patch_size" => self.patch_size = parse_patch(value).map_err(bad)?,
            "leaky_slope" => self.leaky_slope = value.trim().parse().map_err(|e: std::num::ParseFloatError| bad(e.to_string()))?,
            "vae_source" => {
                self.vae_source = match value.trim() {
                    "transformer" => VaeSource::Transformer,
                    "encoder" => VaeSource::Encoder,
                    other => return Err(bad(format!("unknown source {other:?}"))),
                }
            }
            "model_seed" => self.seed = value.trim().parse().map_err(|e: std::num::ParseIntError| bad(e.to_string()))?,
            _ => return Ok(false),
        }
        Ok(true)
    }

    /// `key = value` lines, one per field, readable by [`from_kv`](Self::from_kv).
    pub fn to_kv(&self) -> String {
        let mut s = String::new();
        let b = self.blocks_per_level;
        let p = self.patch_size;
        let _ = writeln!(s, "in_channels = {}", self.in_channels);
        let _ = writeln!(s, "out_channels = {}", self.out_channels);
        let _ = writeln!(s, "base_filters = {}", self.base_filters);
        let _ = writeln!(s, "blocks_per_level = {},{},{},{}", b[0], b[1], b[2], b[3]);
        let _ = writeln!(s, "k = {}", self.k);
        let _ = writeln!(s, "d = {}", self.d);
        let _ = writeln!(s, "layers = {}", self.layers);
        let _ = writeln!(s, "heads = {}", self.heads);
        let _ = writeln!(s, "ffn_width = {}", self.ffn_width);
        let _ = writeln!(s, "latent_total = {}", self.latent_total);
        let _ = writeln!(s, "mean_dims = {}", self.mean_dims);
        let _ = writeln!(s, "patch_size = {}x{}x{}", p[0], p[1], p[2]);
        let _ = writeln!(s, "leaky_slope = {:?}", self.leaky_slope);
        let _ = writeln!(s, "vae_source = {}", self.vae_source.as_str());
        let _ = writeln!(s, "model_seed = {}", self.seed);
        s
    }

    pub fn from_kv(text: &str) -> Result<Self> {
        let mut c = Self::desk();
        for (key, value) in parse_kv(text)? {
            if !c.set(&key, &value)? {
                return Err(Error::Config(format!("unknown model key {key:?}")));
            }
        }
        c.validate()?;
        Ok(c)
    }
}

/// Splits `key = value` lines; `#` starts a comment, blank lines are skipped.
pub fn parse_kv(text: &str) -> Result<Vec<(String, String)>> {
    let mut out = Vec::new();
    for (i, raw) in text.lines().enumerate() {
        let line = raw.split('#').next().unwrap_or("").trim();
        if line.is_empty() {
            continue;
        }
        let (k, v) = line
            .split_once('=')
            .ok_or_else(|| Error::Config(format!("line {}: expected `key = value`, got {raw:?}", i + 1)))?;
        out.push((k.trim().to_string(), v.trim().to_string()));
    }
    Ok(out)
}

fn parse_list(s: &str, sep: char) -> std::result::Result<Vec<usize>, String> {
    s.split(sep).map(|p| p.trim().parse::<usize>().map_err(|e| e.to_string())).collect()
}

/// Accepts `16`, `16x24x32` or `16,24,32`.
pub fn parse_patch(s: &str) -> std::result::Result<[usize; 3], String> {
    let sep = if s.contains('x') { 'x' } else { ',' };
    let v = parse_list(s, sep)?;
    match v.as_slice() {
        [e] => Ok([*e; 3]),
        [h, w, d] => Ok([*h, *w, *d]),
        _ => Err(format!("expected 1 or 3 extents, got {}", v.len())),
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn presets_validate() {
        for c in [ModelConfig::desk(), ModelConfig::desk2x(), ModelConfig::full()] {
            c.validate().unwrap();
        }
    }

    #[test]
    fn rejects_bad_patch_and_heads() {
        let mut c = ModelConfig::desk();
        c.patch_size = [15, 15, 15];
        assert!(matches!(c.validate(), Err(Error::Config(_))));
        let mut c = ModelConfig::desk();
        c.heads = 5;
        assert!(c.validate().is_err());
    }

    #[test]
    fn kv_round_trip() {
        let mut c = ModelConfig::full();
        c.vae_source = VaeSource::Encoder;
        c.seed = 99;
        c.leaky_slope = 0.2;
        c.patch_size = [16, 24, 32];
        assert_eq!(ModelConfig::from_kv(&c.to_kv()).unwrap(), c);
    }

    #[test]
    fn unknown_key_named() {
        let err = ModelConfig::from_kv("widht = 3").unwrap_err();
        assert!(err.to_string().contains("widht"));
    }

    #[test]
    fn patch_forms() {
        assert_eq!(parse_patch("8").unwrap(), [8, 8, 8]);
        assert_eq!(parse_patch("16x24x32").unwrap(), [16, 24, 32]);
        assert!(parse_patch("8x8").is_err());
    }
}
