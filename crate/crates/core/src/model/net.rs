use super::config::{ModelConfig, VaeSource};
use crate::error::{Error, Result};
use crate::nn::{join, Bound, Conv3d, FeedForward, LayerNorm, LayerSpec, Linear, MultiHeadAttention, Norm, ParamStore};
use crate::tensor::{Element, Init, ResampleMode, Rng, Tape, Tensor, Var};

/// Pre-activation residual block: `x + Conv(LReLU(Norm(Conv(LReLU(Norm(x))))))`.
#[derive(Clone, Debug)]
pub struct ResBlock {
    pub norm1: Norm,
    pub conv1: Conv3d,
    pub norm2: Norm,
    pub conv2: Conv3d,
    pub slope: f64,
}

impl ResBlock {
    pub fn new(path: &str, channels: usize, slope: f64) -> Result<Self> {
        Ok(ResBlock {
            norm1: Norm::new(&join(path, "norm1"), channels)?,
            // followed by a norm, so a bias would be cancelled
            conv1: Conv3d::same(&join(path, "conv1"), channels, channels, 3, false)?,
            norm2: Norm::new(&join(path, "norm2"), channels)?,
            conv2: Conv3d::same(&join(path, "conv2"), channels, channels, 3, true)?,
            slope,
        })
    }

    fn register<T: Element>(&self, s: &mut ParamStore<T>, rng: &mut Rng) -> Result<()> {
        self.norm1.register(s)?;
        self.conv1.register(s, rng)?;
        self.norm2.register(s)?;
        self.conv2.register(s, rng)
    }

    pub fn forward<T: Element>(&self, t: &mut Tape<T>, p: &Bound, x: Var) -> Result<Var> {
        let c = self.norm1.channels;
        if t.shape(x).len() != 5 || t.shape(x)[1] != c {
            return Err(Error::Shape(format!("block expects {c} channels, got {:?}", t.shape(x))));
        }
        let h = self.norm1.forward(t, p, x)?;
        let h = t.leaky_relu(h, self.slope);
        let h = self.conv1.forward(t, p, h)?;
        let h = self.norm2.forward(t, p, h)?;
        let h = t.leaky_relu(h, self.slope);
        let h = self.conv2.forward(t, p, h)?;
        t.add(x, h)
    }

    fn describe(&self, out: &mut Vec<(String, LayerSpec)>) {
        out.push((self.norm1.path.clone(), self.norm1.spec()));
        out.push((self.conv1.path.clone(), self.conv1.spec()));
        out.push((self.norm2.path.clone(), self.norm2.spec()));
        out.push((self.conv2.path.clone(), self.conv2.spec()));
    }

    fn flops(&self, voxels: usize) -> u64 {
        self.conv1.flops(voxels) + self.conv2.flops(voxels)
    }
}

#[derive(Clone, Debug)]
pub struct EncoderLevel {
    /// Stem convolution on level 0, stride-2 downsampling otherwise.
    pub entry: Conv3d,
    pub blocks: Vec<ResBlock>,
}

#[derive(Clone, Debug)]
pub struct TransformerLayer {
    pub ln1: LayerNorm,
    pub attn: MultiHeadAttention,
    pub ln2: LayerNorm,
    pub ffn: FeedForward,
}

impl TransformerLayer {
    /// `z' = MHA(LN z) + z`, then `FFN(LN z') + z'`.
    pub fn forward<T: Element>(&self, t: &mut Tape<T>, p: &Bound, z: Var) -> Result<Var> {
        let h = self.ln1.forward(t, p, z)?;
        let h = self.attn.forward(t, p, h)?;
        let z1 = t.add(h, z)?;
        let h = self.ln2.forward(t, p, z1)?;
        let h = self.ffn.forward(t, p, h)?;
        t.add(h, z1)
    }
}

#[derive(Clone, Debug)]
pub struct DecoderLevel {
    /// 1×1×1 channel halving before the ×2 upsample.
    pub reduce: Conv3d,
    /// 1×1×1 fusion of the concatenated skip back to the level width.
    pub fuse: Conv3d,
    pub block: ResBlock,
}

#[derive(Clone, Debug)]
pub struct VaeStage {
    pub reduce: Conv3d,
    pub block: ResBlock,
}

#[derive(Clone, Debug)]
pub struct Vae {
    pub down: Conv3d,
    pub down_norm: Norm,
    pub to_latent: Linear,
    pub from_latent: Linear,
    pub stages: Vec<VaeStage>,
    pub head: Conv3d,
}

/// Encoder skips and endpoint.
pub struct EncoderOut {
    pub skips: [Var; 3],
    pub f: Var,
}

/// Tape handles of one forward pass.
#[derive(Clone, Copy, Debug)]
pub struct ForwardVars {
    pub segmentation: Var,
    pub reconstruction: Var,
    pub mu: Var,
    pub logvar: Var,
}

/// Materialized outputs of one forward pass.
#[derive(Clone, Debug)]
pub struct ForwardOutput<T> {
    pub segmentation: Tensor<T>,
    pub reconstruction: Tensor<T>,
    pub mu: Tensor<T>,
    pub logvar: Tensor<T>,
}

pub const LOGVAR_CLAMP: f64 = 10.0;

/// Layer structure of the network. Parameter values live in a separate
/// [`ParamStore`].
#[derive(Clone, Debug)]
pub struct SegTransVae {
    pub config: ModelConfig,
    pub encoder: Vec<EncoderLevel>,
    pub embed: Linear,
    pub transformer: Vec<TransformerLayer>,
    pub mapping: Conv3d,
    pub mapping_norm: Norm,
    pub decoder: Vec<DecoderLevel>,
    pub seg_head: Conv3d,
    pub vae: Vae,
}

pub const PE_NAME: &str = "embed.pe";

/// Validates `config`, lays out the network and initializes parameters
/// from `config.seed`.
pub fn build_model<T: Element>(config: &ModelConfig) -> Result<(ParamStore<T>, SegTransVae)> {
    let net = SegTransVae::new(config)?;
    let store = net.init(&mut Rng::new(config.seed))?;
    Ok((store, net))
}

impl SegTransVae {
    pub fn new(config: &ModelConfig) -> Result<Self> {
        config.validate()?;
        let c = config;
        let b = c.base_filters;
        let slope = c.leaky_slope;
        let widths = [b, 2 * b, 4 * b, 8 * b];

        let mut encoder = Vec::new();
        for (i, &w) in widths.iter().enumerate() {
            let path = format!("encoder.level{i}");
            let entry = if i == 0 {
                Conv3d::same(&join(&path, "stem"), c.in_channels, w, 3, true)?
            } else {
                Conv3d::new(&join(&path, "down"), widths[i - 1], w, 3, 2, 1, true)?
            };
            let blocks = (0..c.blocks_per_level[i])
                .map(|j| ResBlock::new(&format!("{path}.block{j}"), w, slope))
                .collect::<Result<_>>()?;
            encoder.push(EncoderLevel { entry, blocks });
        }

        let transformer = (0..c.layers)
            .map(|l| {
                let path = format!("transformer.layer{l}");
                Ok(TransformerLayer {
                    ln1: LayerNorm::new(&join(&path, "ln1"), c.d)?,
                    attn: MultiHeadAttention::new(&join(&path, "attn"), c.d, c.heads)?,
                    ln2: LayerNorm::new(&join(&path, "ln2"), c.d)?,
                    ffn: FeedForward::new(&join(&path, "ffn"), c.d, c.ffn_width)?,
                })
            })
            .collect::<Result<_>>()?;

        let mut decoder = Vec::new();
        for (j, &w) in [widths[2], widths[1], widths[0]].iter().enumerate() {
            let path = format!("decoder.level{j}");
            decoder.push(DecoderLevel {
                reduce: Conv3d::same(&join(&path, "reduce"), 2 * w, w, 1, true)?,
                fuse: Conv3d::same(&join(&path, "fuse"), 2 * w, w, 1, true)?,
                block: ResBlock::new(&join(&path, "block"), w, slope)?,
            });
        }

        let g: usize = c.vae_grid().iter().product();
        let half = c.k / 2;
        let stage_widths = [widths[2], widths[1], widths[0], widths[0]];
        let mut prev = c.k;
        let mut stages = Vec::new();
        for (j, &w) in stage_widths.iter().enumerate() {
            let path = format!("vae.stage{j}");
            stages.push(VaeStage {
                reduce: Conv3d::same(&join(&path, "reduce"), prev, w, 1, true)?,
                block: ResBlock::new(&join(&path, "block"), w, slope)?,
            });
            prev = w;
        }
        let vae = Vae {
            down: Conv3d::new("vae.down", c.k, half, 3, 2, 1, false)?,
            down_norm: Norm::new("vae.down_norm", half)?,
            to_latent: Linear::new("vae.to_latent", half * g, c.latent_total, true)?,
            from_latent: Linear::new("vae.from_latent", c.mean_dims, c.k * g, true)?,
            stages,
            head: Conv3d::same("vae.head", widths[0], c.in_channels, 1, true)?,
        };

        Ok(SegTransVae {
            config: c.clone(),
            encoder,
            embed: Linear::new("embed.proj", c.k, c.d, true)?,
            transformer,
            mapping: Conv3d::same("mapping.proj", c.d, c.k, 1, false)?,
            mapping_norm: Norm::new("mapping.norm", c.k)?,
            decoder,
            seg_head: Conv3d::same("decoder.head", b, c.out_channels, 1, true)?,
            vae,
        })
    }

    /// Fresh parameters; registration order fixes the random stream.
    pub fn init<T: Element>(&self, rng: &mut Rng) -> Result<ParamStore<T>> {
        let mut s = ParamStore::new();
        for level in &self.encoder {
            level.entry.register(&mut s, rng)?;
            for blk in &level.blocks {
                blk.register(&mut s, rng)?;
            }
        }
        self.embed.register(&mut s, rng)?;
        let pe = Tensor::build(Init::Normal { mean: 0.0, std: 0.02 }, [1, self.config.tokens(), self.config.d], Some(rng))?;
        s.insert(PE_NAME, pe)?;
        for layer in &self.transformer {
            layer.ln1.register(&mut s)?;
            layer.attn.register(&mut s, rng)?;
            layer.ln2.register(&mut s)?;
            layer.ffn.register(&mut s, rng)?;
        }
        self.mapping.register(&mut s, rng)?;
        self.mapping_norm.register(&mut s)?;
        for level in &self.decoder {
            level.reduce.register(&mut s, rng)?;
            level.fuse.register(&mut s, rng)?;
            level.block.register(&mut s, rng)?;
        }
        self.seg_head.register(&mut s, rng)?;
        let v = &self.vae;
        v.down.register(&mut s, rng)?;
        v.down_norm.register(&mut s)?;
        v.to_latent.register(&mut s, rng)?;
        v.from_latent.register(&mut s, rng)?;
        for st in &v.stages {
            st.reduce.register(&mut s, rng)?;
            st.block.register(&mut s, rng)?;
        }
        v.head.register(&mut s, rng)?;
        Ok(s)
    }

    /// Every layer with its hyperparameters, in forward order.
    pub fn describe(&self) -> Vec<(String, LayerSpec)> {
        let mut out = Vec::new();
        let slope = LayerSpec::LeakyRelu { slope: self.config.leaky_slope };
        for level in &self.encoder {
            out.push((level.entry.path.clone(), level.entry.spec()));
            level.blocks.iter().for_each(|b| b.describe(&mut out));
        }
        out.push((self.embed.path.clone(), self.embed.spec()));
        out.push((PE_NAME.into(), LayerSpec::Embedding { tokens: self.config.tokens(), dim: self.config.d }));
        for (l, layer) in self.transformer.iter().enumerate() {
            out.push((layer.ln1.path.clone(), layer.ln1.spec()));
            out.push((format!("transformer.layer{l}.attn"), LayerSpec::Attention { dim: layer.attn.dim, heads: layer.attn.heads }));
            out.push((layer.ln2.path.clone(), layer.ln2.spec()));
            out.push((
                format!("transformer.layer{l}.ffn"),
                LayerSpec::FeedForward { dim: layer.ffn.fc1.fin, hidden: layer.ffn.fc1.fout },
            ));
        }
        out.push((self.mapping.path.clone(), self.mapping.spec()));
        out.push((self.mapping_norm.path.clone(), self.mapping_norm.spec()));
        out.push(("mapping.act".into(), slope.clone()));
        for level in &self.decoder {
            out.push((level.reduce.path.clone(), level.reduce.spec()));
            out.push((level.fuse.path.clone(), level.fuse.spec()));
            level.block.describe(&mut out);
        }
        out.push((self.seg_head.path.clone(), self.seg_head.spec()));
        let v = &self.vae;
        out.push((v.down.path.clone(), v.down.spec()));
        out.push((v.down_norm.path.clone(), v.down_norm.spec()));
        out.push((v.to_latent.path.clone(), v.to_latent.spec()));
        out.push((v.from_latent.path.clone(), v.from_latent.spec()));
        for st in &v.stages {
            out.push((st.reduce.path.clone(), st.reduce.spec()));
            st.block.describe(&mut out);
        }
        out.push((v.head.path.clone(), v.head.spec()));
        out
    }

    fn check_input<T: Element>(&self, t: &Tape<T>, x: Var) -> Result<()> {
        let s = t.shape(x);
        let c = &self.config;
        if s.len() != 5 || s[1] != c.in_channels || s[2..] != c.patch_size {
            return Err(Error::Shape(format!(
                "input must be [N, {}, {}, {}, {}], got {s:?}",
                c.in_channels, c.patch_size[0], c.patch_size[1], c.patch_size[2]
            )));
        }
        Ok(())
    }

    pub fn encoder_forward<T: Element>(&self, t: &mut Tape<T>, p: &Bound, x: Var) -> Result<EncoderOut> {
        let mut h = x;
        let mut outs = Vec::with_capacity(4);
        for level in &self.encoder {
            h = level.entry.forward(t, p, h)?;
            for blk in &level.blocks {
                h = blk.forward(t, p, h)?;
            }
            outs.push(h);
        }
        Ok(EncoderOut { skips: [outs[0], outs[1], outs[2]], f: outs[3] })
    }

    /// `z0 = W F + PE` with one token per voxel of `F`, row-major over (h, w, d).
    pub fn feature_embedding<T: Element>(&self, t: &mut Tape<T>, p: &Bound, f: Var) -> Result<Var> {
        let tokens = grid_to_tokens(t, f)?;
        let pe = p.get(PE_NAME)?;
        if t.shape(tokens)[1] != t.shape(pe)[1] {
            return Err(Error::Config(format!(
                "feature grid has {} tokens but the position embedding was built for {}",
                t.shape(tokens)[1],
                t.shape(pe)[1]
            )));
        }
        let z = self.embed.forward(t, p, tokens)?;
        t.add(z, pe)
    }

    pub fn transformer_forward<T: Element>(&self, t: &mut Tape<T>, p: &Bound, z0: Var) -> Result<Var> {
        let mut z = z0;
        for layer in &self.transformer {
            z = layer.forward(t, p, z)?;
        }
        Ok(z)
    }

    /// Linear d→K projection of the tokens laid back on the grid, before
    /// normalization.
    pub fn feature_projection<T: Element>(&self, t: &mut Tape<T>, p: &Bound, zl: Var) -> Result<Var> {
        let v = tokens_to_grid(t, zl, self.config.grid())?;
        self.mapping.forward(t, p, v)
    }

    pub fn feature_mapping<T: Element>(&self, t: &mut Tape<T>, p: &Bound, zl: Var) -> Result<Var> {
        let h = self.feature_projection(t, p, zl)?;
        let h = self.mapping_norm.forward(t, p, h)?;
        Ok(t.leaky_relu(h, self.config.leaky_slope))
    }

    pub fn decoder_forward<T: Element>(&self, t: &mut Tape<T>, p: &Bound, z: Var, skips: &[Var; 3]) -> Result<Var> {
        let mut h = z;
        for (level, &skip) in self.decoder.iter().zip(skips.iter().rev()) {
            h = level.reduce.forward(t, p, h)?;
            h = t.upsample2(h, ResampleMode::Trilinear)?;
            if t.shape(h)[2..] != t.shape(skip)[2..] || t.shape(h)[0] != t.shape(skip)[0] {
                return Err(Error::Shape(format!("skip {:?} does not match upsampled {:?}", t.shape(skip), t.shape(h))));
            }
            h = t.concat(&[h, skip], 1)?;
            h = level.fuse.forward(t, p, h)?;
            h = level.block.forward(t, p, h)?;
        }
        let h = self.seg_head.forward(t, p, h)?;
        Ok(t.sigmoid(h))
    }

    /// Returns `(reconstruction, mu, logvar)`. With `sample`, the latent is
    /// `mu + exp(logvar / 2) * eps` with `eps` drawn from `rng`.
    pub fn vae_forward<T: Element>(
        &self,
        t: &mut Tape<T>,
        p: &Bound,
        z: Var,
        rng: Option<&mut Rng>,
        sample: bool,
    ) -> Result<(Var, Var, Var)> {
        let c = &self.config;
        let v = &self.vae;
        let n = t.shape(z)[0];
        let h = v.down.forward(t, p, z)?;
        let h = v.down_norm.forward(t, p, h)?;
        let h = t.leaky_relu(h, c.leaky_slope);
        let flat = t.shape(h)[1..].iter().product::<usize>();
        let h = t.reshape(h, &[n, flat])?;
        let lat = v.to_latent.forward(t, p, h)?;
        let mu = t.slice(lat, 1, 0, c.mean_dims)?;
        let logvar = t.slice(lat, 1, c.mean_dims, c.mean_dims)?;
        let logvar = t.clamp(logvar, -LOGVAR_CLAMP, LOGVAR_CLAMP);

        let latent = if sample {
            let rng = rng.ok_or_else(|| Error::Contract("sampling the latent requires an rng".into()))?;
            let eps = t.constant(Tensor::build(Init::Normal { mean: 0.0, std: 1.0 }, [n, c.mean_dims], Some(rng))?);
            let half = t.scale(logvar, 0.5);
            let std = t.exp(half)?;
            let noise = t.mul(std, eps)?;
            t.add(mu, noise)?
        } else {
            mu
        };

        let [gh, gw, gd] = c.vae_grid();
        let h = v.from_latent.forward(t, p, latent)?;
        let h = t.reshape(h, &[n, c.k, gh, gw, gd])?;
        let mut h = t.leaky_relu(h, c.leaky_slope);
        let mut target = c.grid();
        for st in &v.stages {
            h = st.reduce.forward(t, p, h)?;
            h = t.resample(h, ResampleMode::Trilinear, target)?;
            h = st.block.forward(t, p, h)?;
            target = target.map(|e| 2 * e);
        }
        let rec = v.head.forward(t, p, h)?;
        Ok((rec, mu, logvar))
    }

    /// Full pipeline. `training` turns on latent sampling, which needs `rng`.
    pub fn forward<T: Element>(&self, t: &mut Tape<T>, p: &Bound, x: Var, rng: Option<&mut Rng>, training: bool) -> Result<ForwardVars> {
        self.check_input(t, x)?;
        let enc = self.encoder_forward(t, p, x)?;
        let z0 = self.feature_embedding(t, p, enc.f)?;
        let zl = self.transformer_forward(t, p, z0)?;
        let z = self.feature_mapping(t, p, zl)?;
        let segmentation = self.decoder_forward(t, p, z, &enc.skips)?;
        let source = match self.config.vae_source {
            VaeSource::Transformer => z,
            VaeSource::Encoder => enc.f,
        };
        let (reconstruction, mu, logvar) = self.vae_forward(t, p, source, rng, training)?;
        Ok(ForwardVars { segmentation, reconstruction, mu, logvar })
    }

    /// Gradient-free forward on a fresh tape.
    pub fn infer<T: Element>(&self, store: &ParamStore<T>, x: &Tensor<T>, rng: Option<&mut Rng>, training: bool) -> Result<ForwardOutput<T>> {
        let mut t = Tape::new();
        let p = store.bind_frozen(&mut t);
        let xv = t.constant(x.clone());
        let o = self.forward(&mut t, &p, xv, rng, training)?;
        Ok(ForwardOutput {
            segmentation: t.value(o.segmentation).clone(),
            reconstruction: t.value(o.reconstruction).clone(),
            mu: t.value(o.mu).clone(),
            logvar: t.value(o.logvar).clone(),
        })
    }

    /// Forward FLOPs for one sample at the configured patch; counts
    /// convolutions, linear maps and attention products (2 per
    /// multiply-accumulate), not norms, activations or resampling.
    pub fn flops_forward(&self) -> u64 {
        let c = &self.config;
        let vox = |g: [usize; 3]| g.iter().product::<usize>();
        let mut g = c.patch_size;
        let mut total = 0u64;
        let mut level_grids = Vec::new();
        for level in &self.encoder {
            g = g.map(|e| level.entry.out_extent(e));
            total += level.entry.flops(vox(g));
            total += level.blocks.iter().map(|b| b.flops(vox(g))).sum::<u64>();
            level_grids.push(g);
        }
        let tokens = c.tokens();
        total += self.embed.flops(tokens);
        for layer in &self.transformer {
            total += layer.attn.flops(tokens) + layer.ffn.flops(tokens);
        }
        total += self.mapping.flops(tokens);
        for (level, lg) in self.decoder.iter().zip(level_grids[..3].iter().rev()) {
            total += level.reduce.flops(vox(*lg) / 8);
            total += level.fuse.flops(vox(*lg));
            total += level.block.flops(vox(*lg));
        }
        total += self.seg_head.flops(vox(c.patch_size));
        let v = &self.vae;
        let vg = c.vae_grid();
        total += v.down.flops(vox(vg)) + v.to_latent.flops(1) + v.from_latent.flops(1);
        let mut src = vg;
        let mut target = c.grid();
        for st in &v.stages {
            total += st.reduce.flops(vox(src)) + st.block.flops(vox(target));
            src = target;
            target = target.map(|e| 2 * e);
        }
        total + v.head.flops(vox(c.patch_size))
    }
}

/// `[N, C, h, w, d]` → `[N, h·w·d, C]`, token index row-major over (h, w, d).
pub fn grid_to_tokens<T: Element>(t: &mut Tape<T>, f: Var) -> Result<Var> {
    let s = t.shape(f).to_vec();
    if s.len() != 5 {
        return Err(Error::Shape(format!("expected a [N, C, H, W, D] volume, got {s:?}")));
    }
    let r = t.reshape(f, &[s[0], s[1], s[2] * s[3] * s[4]])?;
    t.permute(r, &[0, 2, 1])
}

/// Inverse of [`grid_to_tokens`].
pub fn tokens_to_grid<T: Element>(t: &mut Tape<T>, z: Var, grid: [usize; 3]) -> Result<Var> {
    let s = t.shape(z).to_vec();
    if s.len() != 3 || s[1] != grid.iter().product::<usize>() {
        return Err(Error::Shape(format!("{s:?} tokens do not fill a {grid:?} grid")));
    }
    let r = t.permute(z, &[0, 2, 1])?;
    t.reshape(r, &[s[0], s[2], grid[0], grid[1], grid[2]])
}
