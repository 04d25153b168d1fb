use super::params::{join, Bound, ParamStore};
use crate::error::{Error, Result};
use crate::tensor::{Element, Init, Rng, Tape, Tensor, Var};

pub const NORM_EPS: f64 = 1e-5;

/// Hyperparameters of one layer, as listed in an architecture description.
#[derive(Clone, Debug, PartialEq)]
pub enum LayerSpec {
    Conv3d { cin: usize, cout: usize, kernel: usize, stride: usize, padding: usize, bias: bool },
    Norm { channels: usize },
    Linear { fin: usize, fout: usize, bias: bool },
    LayerNorm { dim: usize },
    Attention { dim: usize, heads: usize },
    FeedForward { dim: usize, hidden: usize },
    LeakyRelu { slope: f64 },
    Embedding { tokens: usize, dim: usize },
}

impl LayerSpec {
    pub fn validate(&self) -> Result<()> {
        let positive = |what: &str, v: usize| {
            if v == 0 {
                Err(Error::Config(format!("{what} must be positive in {self:?}")))
            } else {
                Ok(())
            }
        };
        match *self {
            LayerSpec::Conv3d { cin, cout, kernel, stride, .. } => {
                positive("cin", cin)?;
                positive("cout", cout)?;
                positive("kernel", kernel)?;
                positive("stride", stride)
            }
            LayerSpec::Norm { channels } => positive("channels", channels),
            LayerSpec::Linear { fin, fout, .. } => {
                positive("fin", fin)?;
                positive("fout", fout)
            }
            LayerSpec::LayerNorm { dim } => {
                if dim < 2 {
                    return Err(Error::Config(format!("layer norm width must be at least 2, got {dim}")));
                }
                Ok(())
            }
            LayerSpec::Attention { dim, heads } => {
                positive("dim", dim)?;
                positive("heads", heads)?;
                if dim % heads != 0 {
                    return Err(Error::Config(format!("width {dim} is not divisible by {heads} heads")));
                }
                Ok(())
            }
            LayerSpec::FeedForward { dim, hidden } => {
                positive("dim", dim)?;
                positive("hidden", hidden)
            }
            LayerSpec::LeakyRelu { slope } => {
                if !slope.is_finite() || slope < 0.0 {
                    return Err(Error::Config(format!("negative slope must be finite and >= 0, got {slope}")));
                }
                Ok(())
            }
            LayerSpec::Embedding { tokens, dim } => {
                positive("tokens", tokens)?;
                positive("dim", dim)
            }
        }
    }

    pub fn param_count(&self) -> usize {
        match *self {
            LayerSpec::Conv3d { cin, cout, kernel, bias, .. } => cout * cin * kernel.pow(3) + if bias { cout } else { 0 },
            LayerSpec::Norm { channels } => 2 * channels,
            LayerSpec::Linear { fin, fout, bias } => fin * fout + if bias { fout } else { 0 },
            LayerSpec::LayerNorm { dim } => 2 * dim,
            LayerSpec::Attention { dim, .. } => 4 * dim * dim + dim,
            LayerSpec::FeedForward { dim, hidden } => 2 * dim * hidden + hidden + dim,
            LayerSpec::LeakyRelu { .. } => 0,
            LayerSpec::Embedding { tokens, dim } => tokens * dim,
        }
    }
}

fn fan_in_uniform<T: Element>(shape: Vec<usize>, fan_in: usize, rng: &mut Rng) -> Result<Tensor<T>> {
    let bound = 1.0 / (fan_in as f64).sqrt();
    Tensor::build(Init::Uniform { lo: -bound, hi: bound }, shape, Some(rng))
}

/// Cubic-kernel 3D convolution on `[N, C, H, W, D]`.
#[derive(Clone, Debug)]
pub struct Conv3d {
    pub path: String,
    pub cin: usize,
    pub cout: usize,
    pub kernel: usize,
    pub stride: usize,
    pub padding: usize,
    pub bias: bool,
}

impl Conv3d {
    pub fn new(path: &str, cin: usize, cout: usize, kernel: usize, stride: usize, padding: usize, bias: bool) -> Result<Self> {
        let c = Conv3d { path: path.to_string(), cin, cout, kernel, stride, padding, bias };
        c.spec().validate()?;
        Ok(c)
    }

    /// `k`³ kernel, stride 1, "same" padding.
    pub fn same(path: &str, cin: usize, cout: usize, kernel: usize, bias: bool) -> Result<Self> {
        Self::new(path, cin, cout, kernel, 1, kernel / 2, bias)
    }

    pub fn spec(&self) -> LayerSpec {
        LayerSpec::Conv3d {
            cin: self.cin,
            cout: self.cout,
            kernel: self.kernel,
            stride: self.stride,
            padding: self.padding,
            bias: self.bias,
        }
    }

    pub fn register<T: Element>(&self, store: &mut ParamStore<T>, rng: &mut Rng) -> Result<()> {
        let fan_in = self.cin * self.kernel.pow(3);
        let k = self.kernel;
        store.insert(join(&self.path, "weight"), fan_in_uniform(vec![self.cout, self.cin, k, k, k], fan_in, rng)?)?;
        if self.bias {
            store.insert(join(&self.path, "bias"), fan_in_uniform(vec![self.cout], fan_in, rng)?)?;
        }
        Ok(())
    }

    pub fn forward<T: Element>(&self, tape: &mut Tape<T>, p: &Bound, x: Var) -> Result<Var> {
        let w = p.get(&join(&self.path, "weight"))?;
        let b = if self.bias { Some(p.get(&join(&self.path, "bias"))?) } else { None };
        tape.conv3d(x, w, b, self.stride, self.padding)
    }

    pub fn out_extent(&self, e: usize) -> usize {
        (e + 2 * self.padding - self.kernel) / self.stride + 1
    }

    pub fn param_count(&self) -> usize {
        self.spec().param_count()
    }

    pub fn flops(&self, out_voxels: usize) -> u64 {
        2 * (self.cout * self.cin * self.kernel.pow(3) * out_voxels) as u64
    }
}

/// Per-(sample, channel) normalization with affine parameters. Volumes
/// of at most [`MIN_INSTANCE_VOXELS`]` - 1` voxels are normalized over
/// channels and space together (one group): a single voxel has no spatial
/// variance, and a 2³ field upsampled from one voxel is constant per
/// channel, which makes per-channel statistics degenerate.
pub const MIN_INSTANCE_VOXELS: usize = 9;

#[derive(Clone, Debug)]
pub struct Norm {
    pub path: String,
    pub channels: usize,
    pub eps: f64,
}

impl Norm {
    pub fn new(path: &str, channels: usize) -> Result<Self> {
        let n = Norm { path: path.to_string(), channels, eps: NORM_EPS };
        n.spec().validate()?;
        Ok(n)
    }

    pub fn spec(&self) -> LayerSpec {
        LayerSpec::Norm { channels: self.channels }
    }

    pub fn register<T: Element>(&self, store: &mut ParamStore<T>) -> Result<()> {
        store.insert(join(&self.path, "gamma"), Tensor::full([self.channels], 1.0)?)?;
        store.insert(join(&self.path, "beta"), Tensor::zeros([self.channels])?)
    }

    pub fn forward<T: Element>(&self, tape: &mut Tape<T>, p: &Bound, x: Var) -> Result<Var> {
        let g = p.get(&join(&self.path, "gamma"))?;
        let b = p.get(&join(&self.path, "beta"))?;
        let spatial: usize = tape.shape(x).iter().skip(2).product();
        if spatial >= MIN_INSTANCE_VOXELS {
            tape.instance_norm3d(x, g, b, self.eps)
        } else {
            tape.group_norm(x, g, b, 1, self.eps)
        }
    }

    pub fn param_count(&self) -> usize {
        2 * self.channels
    }
}

/// `y = x Wᵀ + b` over the last axis.
#[derive(Clone, Debug)]
pub struct Linear {
    pub path: String,
    pub fin: usize,
    pub fout: usize,
    pub bias: bool,
}

impl Linear {
    pub fn new(path: &str, fin: usize, fout: usize, bias: bool) -> Result<Self> {
        let l = Linear { path: path.to_string(), fin, fout, bias };
        l.spec().validate()?;
        Ok(l)
    }

    pub fn spec(&self) -> LayerSpec {
        LayerSpec::Linear { fin: self.fin, fout: self.fout, bias: self.bias }
    }

    pub fn register<T: Element>(&self, store: &mut ParamStore<T>, rng: &mut Rng) -> Result<()> {
        store.insert(join(&self.path, "weight"), fan_in_uniform(vec![self.fout, self.fin], self.fin, rng)?)?;
        if self.bias {
            store.insert(join(&self.path, "bias"), fan_in_uniform(vec![self.fout], self.fin, rng)?)?;
        }
        Ok(())
    }

    pub fn forward<T: Element>(&self, tape: &mut Tape<T>, p: &Bound, x: Var) -> Result<Var> {
        let w = p.get(&join(&self.path, "weight"))?;
        let b = if self.bias { Some(p.get(&join(&self.path, "bias"))?) } else { None };
        tape.linear(x, w, b)
    }

    pub fn param_count(&self) -> usize {
        self.spec().param_count()
    }

    pub fn flops(&self, tokens: usize) -> u64 {
        2 * (self.fin * self.fout * tokens) as u64
    }
}

#[derive(Clone, Debug)]
pub struct LayerNorm {
    pub path: String,
    pub dim: usize,
    pub eps: f64,
}

impl LayerNorm {
    pub fn new(path: &str, dim: usize) -> Result<Self> {
        let l = LayerNorm { path: path.to_string(), dim, eps: NORM_EPS };
        l.spec().validate()?;
        Ok(l)
    }

    pub fn spec(&self) -> LayerSpec {
        LayerSpec::LayerNorm { dim: self.dim }
    }

    pub fn register<T: Element>(&self, store: &mut ParamStore<T>) -> Result<()> {
        store.insert(join(&self.path, "gamma"), Tensor::full([self.dim], 1.0)?)?;
        store.insert(join(&self.path, "beta"), Tensor::zeros([self.dim])?)
    }

    pub fn forward<T: Element>(&self, tape: &mut Tape<T>, p: &Bound, x: Var) -> Result<Var> {
        let g = p.get(&join(&self.path, "gamma"))?;
        let b = p.get(&join(&self.path, "beta"))?;
        tape.layer_norm(x, g, b, self.eps)
    }

    pub fn param_count(&self) -> usize {
        2 * self.dim
    }
}

/// Scaled dot-product self-attention over `[N, T, d]` tokens. The query,
/// key and value projections carry no bias; the output projection does.
#[derive(Clone, Debug)]
pub struct MultiHeadAttention {
    pub dim: usize,
    pub heads: usize,
    pub q: Linear,
    pub k: Linear,
    pub v: Linear,
    pub out: Linear,
}

impl MultiHeadAttention {
    pub fn new(path: &str, dim: usize, heads: usize) -> Result<Self> {
        LayerSpec::Attention { dim, heads }.validate()?;
        Ok(MultiHeadAttention {
            dim,
            heads,
            q: Linear::new(&join(path, "q"), dim, dim, false)?,
            k: Linear::new(&join(path, "k"), dim, dim, false)?,
            v: Linear::new(&join(path, "v"), dim, dim, false)?,
            out: Linear::new(&join(path, "out"), dim, dim, true)?,
        })
    }

    pub fn register<T: Element>(&self, store: &mut ParamStore<T>, rng: &mut Rng) -> Result<()> {
        for l in [&self.q, &self.k, &self.v, &self.out] {
            l.register(store, rng)?;
        }
        Ok(())
    }

    pub fn forward<T: Element>(&self, tape: &mut Tape<T>, p: &Bound, x: Var) -> Result<Var> {
        let s = tape.shape(x).to_vec();
        if s.len() != 3 || s[2] != self.dim {
            return Err(Error::Shape(format!("attention expects [N, T, {}], got {s:?}", self.dim)));
        }
        let (n, t, h) = (s[0], s[1], self.heads);
        let dh = self.dim / h;
        let mut split = |l: &Linear| -> Result<Var> {
            let y = l.forward(tape, p, x)?;
            let y = tape.reshape(y, &[n, t, h, dh])?;
            tape.permute(y, &[0, 2, 1, 3])
        };
        let q = split(&self.q)?;
        let k = split(&self.k)?;
        let v = split(&self.v)?;
        let kt = tape.permute(k, &[0, 1, 3, 2])?;
        let scores = tape.matmul(q, kt)?;
        let scores = tape.scale(scores, 1.0 / (dh as f64).sqrt());
        let att = tape.softmax(scores, 3)?;
        let ctx = tape.matmul(att, v)?;
        let ctx = tape.permute(ctx, &[0, 2, 1, 3])?;
        let ctx = tape.reshape(ctx, &[n, t, self.dim])?;
        self.out.forward(tape, p, ctx)
    }

    pub fn param_count(&self) -> usize {
        LayerSpec::Attention { dim: self.dim, heads: self.heads }.param_count()
    }

    /// Projections plus `2·T²·d` for the score/context products.
    pub fn flops(&self, tokens: usize) -> u64 {
        4 * self.q.flops(tokens) + 2 * (tokens * tokens * self.dim) as u64
    }
}

/// Token-wise `Linear → GELU → Linear`.
#[derive(Clone, Debug)]
pub struct FeedForward {
    pub fc1: Linear,
    pub fc2: Linear,
}

impl FeedForward {
    pub fn new(path: &str, dim: usize, hidden: usize) -> Result<Self> {
        LayerSpec::FeedForward { dim, hidden }.validate()?;
        Ok(FeedForward { fc1: Linear::new(&join(path, "fc1"), dim, hidden, true)?, fc2: Linear::new(&join(path, "fc2"), hidden, dim, true)? })
    }

    pub fn register<T: Element>(&self, store: &mut ParamStore<T>, rng: &mut Rng) -> Result<()> {
        self.fc1.register(store, rng)?;
        self.fc2.register(store, rng)
    }

    pub fn forward<T: Element>(&self, tape: &mut Tape<T>, p: &Bound, x: Var) -> Result<Var> {
        let h = self.fc1.forward(tape, p, x)?;
        let h = tape.gelu(h);
        self.fc2.forward(tape, p, h)
    }

    pub fn param_count(&self) -> usize {
        self.fc1.param_count() + self.fc2.param_count()
    }

    pub fn flops(&self, tokens: usize) -> u64 {
        self.fc1.flops(tokens) + self.fc2.flops(tokens)
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn spec_validation() {
        assert!(LayerSpec::Attention { dim: 6, heads: 4 }.validate().is_err());
        assert!(LayerSpec::Conv3d { cin: 0, cout: 1, kernel: 3, stride: 1, padding: 1, bias: true }.validate().is_err());
        assert!(LayerSpec::LeakyRelu { slope: -0.1 }.validate().is_err());
        assert!(MultiHeadAttention::new("a", 8, 3).is_err());
    }

    #[test]
    fn registered_counts_match_specs() {
        let mut rng = Rng::new(0);
        let mut s = ParamStore::<f32>::new();
        let conv = Conv3d::same("c", 3, 5, 3, true).unwrap();
        conv.register(&mut s, &mut rng).unwrap();
        let mha = MultiHeadAttention::new("m", 8, 2).unwrap();
        mha.register(&mut s, &mut rng).unwrap();
        let ffn = FeedForward::new("f", 8, 16).unwrap();
        ffn.register(&mut s, &mut rng).unwrap();
        Norm::new("n", 5).unwrap().register(&mut s).unwrap();
        assert_eq!(s.parameter_count(), conv.param_count() + mha.param_count() + ffn.param_count() + 10);
    }

    #[test]
    fn fan_in_bounds() {
        let mut rng = Rng::new(1);
        let mut s = ParamStore::<f64>::new();
        Linear::new("l", 16, 4, true).unwrap().register(&mut s, &mut rng).unwrap();
        assert!(s.get("l.weight").unwrap().data().iter().all(|v| v.abs() <= 0.25));
    }
}
