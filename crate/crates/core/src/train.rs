//! Adam with polynomial decay, the training loop, evaluation and the SVCK
//! checkpoint format.
//!
//! SVCK layout (little-endian): magic `SVCK`, u16 version, u32 length plus
//! the model config as `key = value` text, u64 step, four u64 words of RNG
//! state, u32 record count, then one record per tensor: u16 name length,
//! name bytes, u8 dtype code, u8 rank, rank × u32 extents, values. Records
//! are named `param/<name>`, `adam_m/<name>` and `adam_v/<name>`.

use std::collections::{BTreeMap, HashMap};
use std::fmt::Write as _;
use std::io::Write;
use std::path::{Path, PathBuf};
use std::sync::atomic::{AtomicU64, Ordering};
use std::sync::mpsc;

use crate::data::{normalize_sample, random_crop, random_flip, VolumeSample};
use crate::error::{Error, Result};
use crate::io::{expect_dtype, ByteReader};
use crate::loss::{model_loss, LossBreakdown};
use crate::metrics::{binarize, compare, MetricsReport};
use crate::model::{ModelConfig, SegTransVae};
use crate::nn::ParamStore;
use crate::tensor::gradcheck::{finite_diff_check_coords, sample_coordinates, GradCheckReport};
use crate::tensor::{Element, Init, Rng, Tape, Tensor};

pub const CHECKPOINT_MAGIC: &[u8; 4] = b"SVCK";
pub const CHECKPOINT_VERSION: u16 = 1;

#[derive(Clone, Debug, PartialEq)]
pub struct TrainConfig {
    pub lr0: f64,
    pub total_steps: u64,
    pub batch_size: usize,
    pub beta1: f64,
    pub beta2: f64,
    pub adam_eps: f64,
    pub poly_power: f64,
    /// Seeds batch sampling and the latent noise stream.
    pub seed: u64,
    /// Steps between checkpoints, 0 = only at the end.
    pub checkpoint_interval: u64,
    /// Steps between evaluations, 0 = never.
    pub eval_interval: u64,
    /// Global gradient-norm cap, `None` disables clipping.
    pub clip_norm: Option<f64>,
    /// Batch prefetch threads, 0 = build batches on the optimizer thread.
    pub workers: usize,
    /// Per-axis flip probability for augmentation.
    pub flip_prob: f64,
}

impl Default for TrainConfig {
    fn default() -> Self {
        TrainConfig {
            lr0: 1e-3,
            total_steps: 500,
            batch_size: 1,
            beta1: 0.9,
            beta2: 0.999,
            adam_eps: 1e-8,
            poly_power: 0.9,
            seed: 0,
            checkpoint_interval: 100,
            eval_interval: 0,
            clip_norm: Some(5.0),
            workers: 0,
            flip_prob: 0.0,
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        let bad = |m: String| Err(Error::Config(m));
        if !(self.lr0 > 0.0) || !self.lr0.is_finite() {
            return bad(format!("lr0 must be positive, got {}", self.lr0));
        }
        if self.total_steps == 0 {
            return bad("total_steps must be at least 1".into());
        }
        if self.batch_size == 0 {
            return bad("batch_size must be at least 1".into());
        }
        if !(0.0..1.0).contains(&self.beta1) || !(0.0..1.0).contains(&self.beta2) {
            return bad(format!("Adam betas must lie in [0, 1), got {} and {}", self.beta1, self.beta2));
        }
        if !(self.adam_eps > 0.0) || !(self.poly_power >= 0.0) {
            return bad("adam_eps must be positive and poly_power non-negative".into());
        }
        if let Some(c) = self.clip_norm {
            if !(c > 0.0) {
                return bad(format!("clip_norm must be positive, got {c}"));
            }
        }
        if !(0.0..=1.0).contains(&self.flip_prob) {
            return bad(format!("flip_prob must lie in [0, 1], got {}", self.flip_prob));
        }
        Ok(())
    }

    /// Applies one `key = value` setting; returns `Ok(false)` for keys this
    /// type does not own.
    pub fn set(&mut self, key: &str, value: &str) -> Result<bool> {
        let v = value.trim();
        let bad = |e: String| Error::Config(format!("invalid value {value:?} for {key}: {e}"));
        let float = || v.parse::<f64>().map_err(|e| bad(e.to_string()));
        let int = || v.parse::<u64>().map_err(|e| bad(e.to_string()));
        match key {
            "lr0" => self.lr0 = float()?,
            "total_steps" => self.total_steps = int()?,
            "batch_size" => self.batch_size = int()? as usize,
            "beta1" => self.beta1 = float()?,
            "beta2" => self.beta2 = float()?,
            "adam_eps" => self.adam_eps = float()?,
            "poly_power" => self.poly_power = float()?,
            "train_seed" => self.seed = int()?,
            "checkpoint_interval" => self.checkpoint_interval = int()?,
            "eval_interval" => self.eval_interval = int()?,
            "clip_norm" => self.clip_norm = if matches!(v, "none" | "off" | "0") { None } else { Some(float()?) },
            "workers" => self.workers = int()? as usize,
            "flip_prob" => self.flip_prob = float()?,
            _ => return Ok(false),
        }
        Ok(true)
    }
}

/// `lr0 · (1 − step/total)^power`.
pub fn lr_poly(step: u64, total_steps: u64, lr0: f64, power: f64) -> Result<f64> {
    if total_steps == 0 || step > total_steps {
        return Err(Error::Contract(format!("step {step} outside 0..={total_steps}")));
    }
    Ok(lr0 * (1.0 - step as f64 / total_steps as f64).powf(power))
}

/// First and second Adam moments, named like the parameters.
#[derive(Clone, Debug)]
pub struct AdamMoments<T> {
    pub m: ParamStore<T>,
    pub v: ParamStore<T>,
}

impl<T: Element> AdamMoments<T> {
    pub fn zeros_like(params: &ParamStore<T>) -> Result<Self> {
        let mut m = ParamStore::new();
        for (k, v) in params.iter() {
            m.insert(k, Tensor::zeros(v.shape().to_vec())?)?;
        }
        Ok(AdamMoments { v: m.clone(), m })
    }
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct AdamHyper {
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
}

impl From<&TrainConfig> for AdamHyper {
    fn from(c: &TrainConfig) -> Self {
        AdamHyper { beta1: c.beta1, beta2: c.beta2, eps: c.adam_eps }
    }
}

/// One bias-corrected Adam update; `t` is the 1-based update count.
/// Every gradient is checked before anything is modified.
pub fn adam_step<T: Element>(
    params: &mut ParamStore<T>,
    grads: &BTreeMap<String, Tensor<T>>,
    moments: &mut AdamMoments<T>,
    t: u64,
    lr: f64,
    hyper: AdamHyper,
) -> Result<()> {
    if t == 0 {
        return Err(Error::Contract("Adam update count starts at 1".into()));
    }
    for (name, p) in params.iter() {
        let g = grads.get(name).ok_or_else(|| Error::Contract(format!("no gradient for parameter {name:?}")))?;
        if g.shape() != p.shape() {
            return Err(Error::Shape(format!("gradient for {name:?} has shape {:?}, parameter {:?}", g.shape(), p.shape())));
        }
        if !g.all_finite() {
            return Err(Error::Divergence(format!("non-finite gradient in parameter {name:?}")));
        }
    }
    let AdamHyper { beta1, beta2, eps } = hyper;
    let c1 = 1.0 - beta1.powf(t as f64);
    let c2 = 1.0 - beta2.powf(t as f64);
    let names: Vec<String> = params.names().map(str::to_string).collect();
    for name in names {
        let f = |x: &T| x.to_f64().unwrap_or(f64::NAN);
        let (p, g) = (params.get(&name).unwrap(), &grads[&name]);
        let (m, v) = (moments.m.get(&name).unwrap(), moments.v.get(&name).unwrap());
        let n = p.numel();
        let (mut np, mut nm, mut nv) = (Vec::with_capacity(n), Vec::with_capacity(n), Vec::with_capacity(n));
        for i in 0..n {
            let gi = f(&g.data()[i]);
            let mi = beta1 * f(&m.data()[i]) + (1.0 - beta1) * gi;
            let vi = beta2 * f(&v.data()[i]) + (1.0 - beta2) * gi * gi;
            let step = lr * (mi / c1) / ((vi / c2).sqrt() + eps);
            np.push(T::lit(f(&p.data()[i]) - step));
            nm.push(T::lit(mi));
            nv.push(T::lit(vi));
        }
        let shape = p.shape().to_vec();
        params.set(&name, Tensor::from_vec(shape.clone(), np)?)?;
        moments.m.set(&name, Tensor::from_vec(shape.clone(), nm)?)?;
        moments.v.set(&name, Tensor::from_vec(shape, nv)?)?;
    }
    Ok(())
}

/// Euclidean norm over every gradient entry, accumulated in name order.
pub fn global_grad_norm<T: Element>(grads: &BTreeMap<String, Tensor<T>>) -> f64 {
    grads
        .values()
        .flat_map(|g| g.data().iter())
        .map(|x| {
            let x = x.to_f64().unwrap_or(f64::NAN);
            x * x
        })
        .sum::<f64>()
        .sqrt()
}

/// Rescales `grads` so their global norm is at most `max_norm`; returns the
/// norm before clipping.
pub fn clip_gradients<T: Element>(grads: &mut BTreeMap<String, Tensor<T>>, max_norm: f64) -> f64 {
    let norm = global_grad_norm(grads);
    if norm > max_norm && norm.is_finite() {
        let s = max_norm / norm;
        for g in grads.values_mut() {
            *g = g.map(|x| T::lit(x.to_f64().unwrap_or(f64::NAN) * s));
        }
    }
    norm
}

/// Everything a run needs to continue: parameters, optimizer moments,
/// completed step count and the latent-noise RNG.
#[derive(Clone, Debug)]
pub struct TrainState<T> {
    pub config: ModelConfig,
    pub step: u64,
    pub params: ParamStore<T>,
    pub moments: AdamMoments<T>,
    pub rng: Rng,
}

impl<T: Element> TrainState<T> {
    /// Fresh state with parameters initialized from `config.seed`.
    pub fn new(net: &SegTransVae, train_seed: u64) -> Result<Self> {
        let params = net.init(&mut Rng::new(net.config.seed))?;
        let moments = AdamMoments::zeros_like(&params)?;
        Ok(TrainState { config: net.config.clone(), step: 0, params, moments, rng: Rng::derive(train_seed, u64::MAX) })
    }
}

/// Inputs `[N, C, H, W, D]` and multi-label targets `[N, K, H, W, D]`.
#[derive(Clone, Debug)]
pub struct Batch<T> {
    pub input: Tensor<T>,
    pub target: Tensor<T>,
}

impl<T: Element> Batch<T> {
    pub fn from_samples(samples: &[VolumeSample<f32>]) -> Result<Self> {
        let first = samples.first().ok_or_else(|| Error::Contract("empty batch".into()))?;
        let (mut input, mut target) = (Vec::new(), Vec::new());
        for s in samples {
            if s.image.shape() != first.image.shape() || s.num_classes != first.num_classes {
                return Err(Error::Shape(format!("batch mixes {:?} and {:?}", first.image.shape(), s.image.shape())));
            }
            input.extend(s.image.data().iter().map(|&v| T::lit(v as f64)));
            target.extend(s.target()?.data().iter().map(|&v| T::lit(v as f64)));
        }
        let n = samples.len();
        let mut ishape = vec![n];
        ishape.extend_from_slice(first.image.shape());
        let [h, w, d] = first.size();
        Ok(Batch { input: Tensor::from_vec(ishape, input)?, target: Tensor::from_vec([n, first.num_classes, h, w, d], target)? })
    }
}

/// Supplies the batch for a given step. Implementations must be pure
/// functions of the step so that prefetching and resuming do not change
/// what the model sees.
pub trait BatchSource<T>: Sync {
    fn batch(&self, step: u64) -> Result<Batch<T>>;
}

/// Random patches from a fixed set of volumes. Sample `i` of the run
/// (`step · batch_size + slot`) draws from its own generator
/// `Rng::derive(seed, i)`.
#[derive(Clone, Debug)]
pub struct CropSource {
    samples: Vec<VolumeSample<f32>>,
    patch: [usize; 3],
    batch_size: usize,
    seed: u64,
    flip_prob: f64,
}

impl CropSource {
    /// Z-scores every volume once up front.
    pub fn new(samples: &[VolumeSample<f32>], patch: [usize; 3], config: &TrainConfig) -> Result<Self> {
        if samples.is_empty() {
            return Err(Error::Contract("no training volumes".into()));
        }
        let samples = samples.iter().map(normalize_sample).collect::<Result<Vec<_>>>()?;
        Ok(CropSource { samples, patch, batch_size: config.batch_size, seed: config.seed, flip_prob: config.flip_prob })
    }
}

impl<T: Element> BatchSource<T> for CropSource {
    fn batch(&self, step: u64) -> Result<Batch<T>> {
        let mut picked = Vec::with_capacity(self.batch_size);
        for slot in 0..self.batch_size as u64 {
            let mut rng = Rng::derive(self.seed, step * self.batch_size as u64 + slot);
            let s = &self.samples[rng.below(self.samples.len() as u64) as usize];
            let mut c = random_crop(s, self.patch, &mut rng)?;
            if self.flip_prob > 0.0 {
                c = random_flip(&c, self.flip_prob, &mut rng)?;
            }
            picked.push(c);
        }
        Batch::from_samples(&picked)
    }
}

/// Loss components and learning rate of one completed step.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct StepRecord {
    /// Completed step count after this update (1-based).
    pub step: u64,
    pub loss: LossBreakdown,
    pub lr: f64,
    /// Global gradient norm before clipping.
    pub grad_norm: f64,
}

impl StepRecord {
    pub const CSV_HEADER: &'static str = "step,dice,recon,kl,total,lr";

    pub fn csv_line(&self) -> String {
        let l = &self.loss;
        format!("{},{},{},{},{},{}", self.step, l.dice, l.recon, l.kl, l.total, self.lr)
    }
}

/// Forward, loss, backward, clip and Adam on one batch. `state` is left
/// untouched when the loss or a gradient is not finite.
pub fn train_step<T: Element>(net: &SegTransVae, state: &mut TrainState<T>, batch: &Batch<T>, config: &TrainConfig) -> Result<StepRecord> {
    let lr = lr_poly(state.step, config.total_steps.max(state.step + 1), config.lr0, config.poly_power)?;
    let mut rng = state.rng.clone();
    let mut tape = Tape::new();
    let bound = state.params.bind(&mut tape);
    let x = tape.constant(batch.input.clone());
    let out = net.forward(&mut tape, &bound, x, Some(&mut rng), true)?;
    let lv = model_loss(&mut tape, &out, &batch.input, &batch.target)?;
    let loss = lv.breakdown(&tape).map_err(|e| match e {
        Error::Divergence(m) => Error::Divergence(format!("step {}: {m}", state.step + 1)),
        other => other,
    })?;
    let grads = tape.backward(lv.total)?;
    let mut named = BTreeMap::new();
    for (name, var) in bound.iter() {
        let g = grads.get(var).cloned().map_or_else(|| Tensor::zeros(tape.shape(var).to_vec()), Ok)?;
        named.insert(name.to_string(), g);
    }
    drop(tape);
    let grad_norm = match config.clip_norm {
        Some(c) => clip_gradients(&mut named, c),
        None => global_grad_norm(&named),
    };
    let mut params = state.params.clone();
    let mut moments = state.moments.clone();
    adam_step(&mut params, &named, &mut moments, state.step + 1, lr, config.into())?;
    state.params = params;
    state.moments = moments;
    state.rng = rng;
    state.step += 1;
    Ok(StepRecord { step: state.step, loss, lr, grad_norm })
}

/// Receives progress from [`train_loop`]. Every hook defaults to a no-op.
pub trait TrainObserver<T> {
    fn on_step(&mut self, _record: &StepRecord) -> Result<()> {
        Ok(())
    }

    fn on_checkpoint(&mut self, _state: &TrainState<T>) -> Result<()> {
        Ok(())
    }

    fn on_eval(&mut self, _net: &SegTransVae, _state: &TrainState<T>) -> Result<()> {
        Ok(())
    }
}

impl<T> TrainObserver<T> for () {}

/// Runs steps until `state.step == config.total_steps`. Checkpoints go to
/// the observer every `checkpoint_interval` steps and once at the end.
/// On a non-finite loss the loop stops with a divergence error, `state`
/// keeps the last good values and no checkpoint of the failed step is
/// written.
pub fn train_loop<T: Element, S: BatchSource<T>>(
    net: &SegTransVae,
    state: &mut TrainState<T>,
    source: &S,
    config: &TrainConfig,
    observer: &mut dyn TrainObserver<T>,
) -> Result<Vec<StepRecord>> {
    config.validate()?;
    if state.config != net.config {
        return Err(Error::ConfigMismatch("training state was built for a different model configuration".into()));
    }
    let start = state.step;
    let mut history = Vec::new();
    let mut run = |state: &mut TrainState<T>, batch: Batch<T>| -> Result<()> {
        let rec = train_step(net, state, &batch, config)?;
        observer.on_step(&rec)?;
        history.push(rec);
        let done = state.step == config.total_steps;
        if done || (config.checkpoint_interval > 0 && state.step % config.checkpoint_interval == 0) {
            observer.on_checkpoint(state)?;
        }
        if config.eval_interval > 0 && (state.step % config.eval_interval == 0 || done) {
            observer.on_eval(net, state)?;
        }
        Ok(())
    };

    if config.workers == 0 {
        for step in start..config.total_steps {
            run(state, source.batch(step)?)?;
        }
    } else {
        let next = AtomicU64::new(start);
        std::thread::scope(|scope| -> Result<()> {
            let (tx, rx) = mpsc::sync_channel::<(u64, Result<Batch<T>>)>(2 * config.workers);
            for _ in 0..config.workers {
                let (tx, next) = (tx.clone(), &next);
                scope.spawn(move || loop {
                    let s = next.fetch_add(1, Ordering::SeqCst);
                    if s >= config.total_steps || tx.send((s, source.batch(s))).is_err() {
                        break;
                    }
                });
            }
            drop(tx);
            let mut pending = HashMap::new();
            for step in start..config.total_steps {
                let batch = loop {
                    if let Some(b) = pending.remove(&step) {
                        break b;
                    }
                    let (s, b) = rx.recv().map_err(|_| Error::Contract("batch workers stopped early".into()))?;
                    pending.insert(s, b);
                };
                run(state, batch?)?;
            }
            Ok(())
        })?;
    }
    Ok(history)
}

/// Segmentation metrics of the model on whole volumes. Each volume is
/// z-scored and must match the configured patch size; per-class values are
/// averaged over volumes.
pub fn evaluate<T: Element>(net: &SegTransVae, params: &ParamStore<T>, samples: &[VolumeSample<f32>]) -> Result<MetricsReport> {
    if samples.is_empty() {
        return Err(Error::Contract("nothing to evaluate".into()));
    }
    let mut reports = Vec::with_capacity(samples.len());
    for s in samples {
        if s.size() != net.config.patch_size {
            return Err(Error::Shape(format!("volume {} is {:?}, model expects {:?}", s.id, s.size(), net.config.patch_size)));
        }
        if s.num_classes != net.config.out_channels {
            return Err(Error::Shape(format!("volume {} has {} classes, model predicts {}", s.id, s.num_classes, net.config.out_channels)));
        }
        let batch = Batch::<T>::from_samples(&[normalize_sample(s)?])?;
        let out = net.infer(params, &batch.input, None, false)?;
        let [h, w, d] = s.size();
        let spacing = s.spacing.map(f64::from);
        let pred = binarize(&out.segmentation.reshape([net.config.out_channels, h, w, d])?, spacing)?;
        let truth = binarize(&s.target()?, spacing)?;
        reports.push(compare(&pred, &truth)?);
    }
    Ok(MetricsReport::mean_of(&reports))
}

fn put_u16(out: &mut Vec<u8>, v: u16) {
    out.extend_from_slice(&v.to_le_bytes());
}

fn put_u32(out: &mut Vec<u8>, v: u32) {
    out.extend_from_slice(&v.to_le_bytes());
}

fn put_u64(out: &mut Vec<u8>, v: u64) {
    out.extend_from_slice(&v.to_le_bytes());
}

fn put_tensor<T: Element>(out: &mut Vec<u8>, name: &str, t: &Tensor<T>) -> Result<()> {
    if name.len() > u16::MAX as usize || t.rank() > u8::MAX as usize {
        return Err(Error::Config(format!("tensor {name:?} cannot be stored")));
    }
    put_u16(out, name.len() as u16);
    out.extend_from_slice(name.as_bytes());
    out.extend_from_slice(&[T::DTYPE.code(), t.rank() as u8]);
    for &e in t.shape() {
        put_u32(out, u32::try_from(e).map_err(|_| Error::Config(format!("extent {e} of {name:?} too large")))?);
    }
    for &v in t.data() {
        v.write_le(out);
    }
    Ok(())
}

pub fn encode_checkpoint<T: Element>(state: &TrainState<T>) -> Result<Vec<u8>> {
    let mut out = Vec::new();
    out.extend_from_slice(CHECKPOINT_MAGIC);
    put_u16(&mut out, CHECKPOINT_VERSION);
    let text = state.config.to_kv();
    put_u32(&mut out, text.len() as u32);
    out.extend_from_slice(text.as_bytes());
    put_u64(&mut out, state.step);
    for w in state.rng.state() {
        put_u64(&mut out, w);
    }
    let groups = [("param", &state.params), ("adam_m", &state.moments.m), ("adam_v", &state.moments.v)];
    put_u32(&mut out, groups.iter().map(|g| g.1.len() as u32).sum());
    for (prefix, store) in groups {
        for (name, t) in store.iter() {
            put_tensor(&mut out, &format!("{prefix}/{name}"), t)?;
        }
    }
    Ok(out)
}

/// Decodes a checkpoint. When `expected` is given, a different stored model
/// configuration is a [`Error::ConfigMismatch`]. The tensor set is checked
/// against a freshly laid out model of the stored configuration.
pub fn decode_checkpoint<T: Element>(bytes: &[u8], expected: Option<&ModelConfig>) -> Result<TrainState<T>> {
    let mut r = ByteReader::new(bytes);
    if r.take(4, "magic")? != CHECKPOINT_MAGIC {
        return r.fail(0, "bad magic, expected SVCK");
    }
    let version = r.u16("version")?;
    if version != CHECKPOINT_VERSION {
        return r.fail(4, format!("unsupported checkpoint version {version}, expected {CHECKPOINT_VERSION}"));
    }
    let len = r.u32("config length")? as usize;
    let at = r.pos();
    let text = std::str::from_utf8(r.take(len, "config text")?).map_err(|e| Error::Format { offset: at, message: e.to_string() })?;
    let config = ModelConfig::from_kv(text)?;
    if let Some(want) = expected {
        if *want != config {
            return Err(Error::ConfigMismatch(config_diff(want, &config)));
        }
    }
    let step = r.u64("step")?;
    let rng = Rng::from_state([r.u64("rng state")?, r.u64("rng state")?, r.u64("rng state")?, r.u64("rng state")?]);
    let count = r.u32("record count")?;
    let mut records = BTreeMap::new();
    for _ in 0..count {
        let at = r.pos();
        let n = r.u16("name length")? as usize;
        let name = String::from_utf8(r.take(n, "tensor name")?.to_vec()).map_err(|e| Error::Format { offset: at, message: e.to_string() })?;
        let code_at = r.pos();
        let code = r.u8("dtype")?;
        expect_dtype::<T>(&r, code, code_at)?;
        let rank = r.u8("rank")? as usize;
        let shape = (0..rank).map(|_| r.u32("extent").map(|e| e as usize)).collect::<Result<Vec<_>>>()?;
        let values = r.values::<T>(shape.iter().product(), "tensor payload")?;
        if records.insert(name.clone(), Tensor::from_vec(shape, values)?).is_some() {
            return r.fail(at, format!("duplicate record {name:?}"));
        }
    }
    r.finish()?;

    let net = SegTransVae::new(&config)?;
    let layout = net.init::<T>(&mut Rng::new(0))?;
    let mut params = ParamStore::new();
    let mut m = ParamStore::new();
    let mut v = ParamStore::new();
    for (name, want) in layout.iter() {
        for (prefix, store) in [("param", &mut params), ("adam_m", &mut m), ("adam_v", &mut v)] {
            let key = format!("{prefix}/{name}");
            let t = records.remove(&key).ok_or_else(|| Error::ConfigMismatch(format!("checkpoint lacks tensor {key:?}")))?;
            if t.shape() != want.shape() {
                return Err(Error::ConfigMismatch(format!("tensor {key:?} has shape {:?}, model expects {:?}", t.shape(), want.shape())));
            }
            store.insert(name, t)?;
        }
    }
    if let Some(extra) = records.keys().next() {
        return Err(Error::ConfigMismatch(format!("checkpoint has unexpected tensor {extra:?}")));
    }
    Ok(TrainState { config, step, params, moments: AdamMoments { m, v }, rng })
}

fn config_diff(want: &ModelConfig, got: &ModelConfig) -> String {
    let (a, b) = (want.to_kv(), got.to_kv());
    let mut s = String::from("checkpoint model configuration differs:");
    for (x, y) in a.lines().zip(b.lines()) {
        if x != y {
            let _ = write!(s, " expected `{x}`, found `{y}`;");
        }
    }
    s.pop();
    s
}

/// Writes through a temporary file and a rename, so an interrupted save
/// never replaces a good checkpoint with a partial one.
pub fn save_checkpoint<T: Element>(path: &Path, state: &TrainState<T>) -> Result<()> {
    let bytes = encode_checkpoint(state)?;
    let tmp = path.with_extension("svck.tmp");
    std::fs::write(&tmp, bytes)?;
    std::fs::rename(&tmp, path)?;
    Ok(())
}

pub fn load_checkpoint<T: Element>(path: &Path, expected: Option<&ModelConfig>) -> Result<TrainState<T>> {
    decode_checkpoint(&std::fs::read(path)?, expected)
}

/// Observer that writes a loss CSV, a rolling checkpoint and evaluation
/// reports into one directory.
pub struct DirectoryObserver {
    pub dir: PathBuf,
    log: std::io::BufWriter<std::fs::File>,
    eval_samples: Vec<VolumeSample<f32>>,
    pub last_report: Option<MetricsReport>,
}

impl DirectoryObserver {
    pub const LOSS_FILE: &'static str = "loss.csv";
    pub const CHECKPOINT_FILE: &'static str = "checkpoint.svck";
    pub const EVAL_FILE: &'static str = "eval.csv";

    /// Appends to an existing loss log when resuming.
    pub fn create(dir: &Path, eval_samples: Vec<VolumeSample<f32>>, append: bool) -> Result<Self> {
        std::fs::create_dir_all(dir)?;
        let path = dir.join(Self::LOSS_FILE);
        let fresh = !append || !path.exists();
        let file = std::fs::OpenOptions::new().create(true).append(!fresh).write(true).truncate(fresh).open(&path)?;
        let mut log = std::io::BufWriter::new(file);
        if fresh {
            writeln!(log, "{}", StepRecord::CSV_HEADER)?;
        }
        Ok(DirectoryObserver { dir: dir.to_path_buf(), log, eval_samples, last_report: None })
    }

    pub fn checkpoint_path(&self) -> PathBuf {
        self.dir.join(Self::CHECKPOINT_FILE)
    }
}

impl<T: Element> TrainObserver<T> for DirectoryObserver {
    fn on_step(&mut self, record: &StepRecord) -> Result<()> {
        writeln!(self.log, "{}", record.csv_line())?;
        Ok(())
    }

    fn on_checkpoint(&mut self, state: &TrainState<T>) -> Result<()> {
        self.log.flush()?;
        save_checkpoint(&self.checkpoint_path(), state)
    }

    fn on_eval(&mut self, net: &SegTransVae, state: &TrainState<T>) -> Result<()> {
        if self.eval_samples.is_empty() {
            return Ok(());
        }
        let report = evaluate(net, &state.params, &self.eval_samples)?;
        let path = self.dir.join(Self::EVAL_FILE);
        let fresh = !path.exists();
        let mut f = std::fs::OpenOptions::new().create(true).append(true).open(path)?;
        if fresh {
            writeln!(f, "step,mean_dice,mean_hd95")?;
        }
        let hd = report.mean_hd95.map_or_else(|| "undefined".to_string(), |v| v.to_string());
        writeln!(f, "{},{},{}", state.step, report.mean_dice, hd)?;
        self.last_report = Some(report);
        Ok(())
    }
}

impl Drop for DirectoryObserver {
    fn drop(&mut self) {
        let _ = self.log.flush();
    }
}

/// Outcome of [`model_gradcheck`].
#[derive(Clone, Debug, PartialEq)]
pub struct ModelGradCheck {
    pub report: GradCheckReport,
    /// Candidate coordinates replaced because their finite differences were
    /// not self-consistent.
    pub screened_out: usize,
}

/// Agreement required between central differences at `eps` and `eps / 2`
/// for a coordinate to be checked.
pub const SMOOTHNESS_TOLERANCE: f64 = 1e-5;

/// Central-difference check of the full training objective (Dice + VAE
/// terms, latent sampling on with a fixed noise stream) with respect to
/// `coords` randomly chosen parameters, in `f64`.
///
/// Leaky ReLU kinks make the objective piecewise smooth. A coordinate whose
/// step straddles a kink gives a wrong numeric derivative, so candidates are
/// first screened: central differences at `eps` and `eps / 2` must agree
/// within [`SMOOTHNESS_TOLERANCE`]. The screen never looks at the tape
/// gradient. Rejected candidates are counted and replaced.
pub fn model_gradcheck(config: &ModelConfig, coords: usize, seed: u64) -> Result<ModelGradCheck> {
    const EPS: f64 = 1e-5;
    let net = SegTransVae::new(config)?;
    let store = net.init::<f64>(&mut Rng::new(config.seed))?;
    let mut rng = Rng::derive(seed, 0);
    let [h, w, d] = config.patch_size;
    let input = Tensor::<f64>::build(Init::Normal { mean: 0.0, std: 1.0 }, [1, config.in_channels, h, w, d], Some(&mut rng))?;
    let target = Tensor::<f64>::from_vec(
        [1, config.out_channels, h, w, d],
        (0..config.out_channels * h * w * d).map(|_| if rng.next_f64() < 0.3 { 1.0 } else { 0.0 }).collect(),
    )?;
    let noise = Rng::derive(seed, 1);
    let objective = |t: &mut Tape<f64>, x| {
        let p = store.bind_flat(t, x)?;
        let xv = t.constant(input.clone());
        let out = net.forward(t, &p, xv, Some(&mut noise.clone()), true)?;
        Ok(model_loss(t, &out, &input, &target)?.total)
    };
    let flat = store.flatten();
    let base = flat.to_vec();
    let value_at = |c: usize, delta: f64| -> Result<f64> {
        let mut v = base.clone();
        v[c] += delta;
        let mut t = Tape::new();
        let x = t.leaf(Tensor::from_vec([v.len()], v)?, false);
        let y = objective(&mut t, x)?;
        t.value(y).item()
    };
    let slope = |c: usize, e: f64| -> Result<f64> { Ok((value_at(c, e)? - value_at(c, -e)?) / (2.0 * e)) };

    let order = sample_coordinates(flat.numel(), flat.numel(), &mut rng);
    let (mut picks, mut screened_out) = (Vec::with_capacity(coords), 0);
    for &c in &order {
        if picks.len() == coords {
            break;
        }
        let (a, b) = (slope(c, EPS)?, slope(c, EPS / 2.0)?);
        if (a - b).abs() / a.abs().max(b.abs()).max(1e-8) <= SMOOTHNESS_TOLERANCE {
            picks.push(c);
        } else {
            screened_out += 1;
        }
        if screened_out > 4 * coords.max(1) {
            return Err(Error::Degenerate(format!("{screened_out} of {} candidate coordinates failed the smoothness screen", screened_out + picks.len())));
        }
    }
    let report = finite_diff_check_coords(objective, &flat, EPS, &picks)?;
    Ok(ModelGradCheck { report, screened_out })
}
