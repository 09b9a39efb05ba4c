//! Masked-token reconstruction pretraining.
//!
//! A seeded exact-count mask zeroes a fraction of token vectors, the
//! encoder and a small GELU head predict them back, and the loss is the
//! squared error averaged over masked tokens only. Targets are taken from
//! the unmasked tokens as constants, so no gradient flows through them.

use std::collections::HashMap;
use std::io::Write as _;
use std::path::Path;

use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::config::{ModelConfig, ReconTarget, RunConfig, TrainConfig};
use crate::downstream::TaskSpec;
use crate::encoder::{self, EncoderConfig};
use crate::error::{dim_err, Error, Result};
use crate::normalize::normalize;
use crate::numerics::{
    gradcheck, precision, set_precision, Bound, DenseArray, GradCheckOptions, GradCheckReport, Mode, ParamStore, Tape, Var,
};
use crate::spike_io::SpikeRecording;
use crate::tokenizer::{self, context_vector, tokenize_on_tape, ContextEmbedder};

#[derive(Clone, Debug, PartialEq)]
pub struct MaskPlan {
    /// One flag per token, in `[N, A, t]` order; `true` means masked.
    pub flags: Vec<bool>,
    pub ratio: f64,
    pub seed: u64,
}

impl MaskPlan {
    pub fn masked_count(&self) -> usize {
        self.flags.iter().filter(|&&f| f).count()
    }

    /// Per-element flags for tokens of width `d`.
    pub fn expand(&self, d: usize) -> Vec<bool> {
        self.flags.iter().flat_map(|&f| std::iter::repeat_n(f, d)).collect()
    }
}

/// Masks exactly `floor(ratio·J)` tokens chosen by a seeded permutation.
pub fn sample_mask(j: usize, ratio: f64, seed: u64) -> Result<MaskPlan> {
    if !(0.0..=1.0).contains(&ratio) {
        return Err(Error::Validation(format!("mask ratio {ratio} outside [0, 1]")));
    }
    let k = ((ratio * j as f64).floor() as usize).min(j);
    let mut order: Vec<usize> = (0..j).collect();
    order.shuffle(&mut ChaCha8Rng::seed_from_u64(seed));
    let mut flags = vec![false; j];
    for &i in &order[..k] {
        flags[i] = true;
    }
    Ok(MaskPlan { flags, ratio, seed })
}

fn check_plan(shape: &[usize], plan: &MaskPlan) -> Result<usize> {
    let (&d, lead) = shape.split_last().expect("rank >= 1");
    let j: usize = lead.iter().product();
    if j != plan.flags.len() {
        return dim_err(format!("mask has {} flags for {j} tokens", plan.flags.len()));
    }
    Ok(d)
}

/// Zeroes masked token vectors of a `[.., d]` array.
pub fn apply_mask(tokens: &DenseArray, plan: &MaskPlan) -> Result<DenseArray> {
    let d = check_plan(tokens.shape(), plan)?;
    let mut out = tokens.clone();
    for (row, &m) in out.data_mut().chunks_mut(d).zip(&plan.flags) {
        if m {
            row.fill(0.0);
        }
    }
    Ok(out)
}

pub fn apply_mask_var<'t>(tokens: Var<'t>, plan: &MaskPlan) -> Result<Var<'t>> {
    let d = check_plan(&tokens.shape(), plan)?;
    tokens.masked_fill(&plan.expand(d), 0.0)
}

/// Mean over masked tokens of the squared L2 error.
pub fn masked_loss<'t>(pred: Var<'t>, target: Var<'t>, plan: &MaskPlan) -> Result<Var<'t>> {
    let d = check_plan(&pred.shape(), plan)?;
    if pred.shape() != target.shape() {
        return dim_err(format!("prediction {:?} vs target {:?}", pred.shape(), target.shape()));
    }
    let count = plan.masked_count();
    if count == 0 {
        return Err(Error::Contract("masked loss needs at least one masked token".into()));
    }
    let keep: Vec<bool> = plan.expand(d).into_iter().map(|m| !m).collect();
    let diff = pred.sub(target)?.masked_fill(&keep, 0.0)?;
    diff.mul(diff)?.sum()?.scale(1.0 / count as f64)
}

pub const REC_W1: &str = "rec.w1";
pub const REC_B1: &str = "rec.b1";
pub const REC_W2: &str = "rec.w2";
pub const REC_B2: &str = "rec.b2";

/// Two-layer GELU map `d → rec_hidden → d` applied per token.
pub fn init_recon_head(cfg: &ModelConfig, store: &mut ParamStore, rng: &mut ChaCha8Rng) {
    let (d, h) = (cfg.d_model, cfg.rec_hidden);
    store.init_normal(REC_W1, &[d, h], 1.0 / (d as f64).sqrt(), rng);
    store.insert(REC_B1, DenseArray::zeros(&[h]));
    store.init_normal(REC_W2, &[h, d], 1.0 / (h as f64).sqrt(), rng);
    store.insert(REC_B2, DenseArray::zeros(&[d]));
}

pub fn recon_head<'t>(x: Var<'t>, bound: &Bound<'t>) -> Result<Var<'t>> {
    x.matmul(bound.get(REC_W1)?)?
        .add(bound.get(REC_B1)?)?
        .gelu()?
        .matmul(bound.get(REC_W2)?)?
        .add(bound.get(REC_B2)?)
}

/// Fresh tokenizer, encoder and reconstruction-head parameters.
pub fn init_model(cfg: &ModelConfig, seed: u64) -> ParamStore {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut store = ParamStore::new();
    tokenizer::init_params(cfg, &mut store, &mut rng);
    encoder::init_params(cfg, &mut store, &mut rng);
    init_recon_head(cfg, &mut store, &mut rng);
    store
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct AdamW {
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    pub weight_decay: f64,
}

impl AdamW {
    pub fn from_train(t: &TrainConfig) -> Self {
        AdamW { beta1: t.beta1, beta2: t.beta2, eps: t.adam_eps, weight_decay: t.weight_decay }
    }
}

#[derive(Clone, Debug)]
pub struct OptimState {
    pub m: ParamStore,
    pub v: ParamStore,
    pub step: u64,
}

impl OptimState {
    pub fn new(params: &ParamStore) -> Self {
        OptimState { m: params.zeros_like(), v: params.zeros_like(), step: 0 }
    }
}

/// One decoupled-decay Adam update: `p ← p − lr·(m̂/(√v̂+eps) + wd·p)`.
pub fn adamw_step(params: &mut ParamStore, grads: &ParamStore, state: &mut OptimState, hp: &AdamW, lr: f64) -> Result<()> {
    state.step += 1;
    let t = state.step as i32;
    let (c1, c2) = (1.0 - hp.beta1.powi(t), 1.0 - hp.beta2.powi(t));
    for (name, p) in params.iter_mut() {
        let g = grads.get(name)?;
        let m = state.m.get_mut(name).ok_or_else(|| Error::Contract(format!("no moment for {name}")))?;
        let v = state.v.get_mut(name).ok_or_else(|| Error::Contract(format!("no moment for {name}")))?;
        if g.shape() != p.shape() || m.shape() != p.shape() {
            return dim_err(format!("gradient {:?} for parameter {name} {:?}", g.shape(), p.shape()));
        }
        for (((pi, &gi), mi), vi) in p.data_mut().iter_mut().zip(g.data()).zip(m.data_mut()).zip(v.data_mut()) {
            *mi = hp.beta1 * *mi + (1.0 - hp.beta1) * gi;
            *vi = hp.beta2 * *vi + (1.0 - hp.beta2) * gi * gi;
            let (mh, vh) = (*mi / c1, *vi / c2);
            *pi -= lr * (mh / (vh.sqrt() + hp.eps) + hp.weight_decay * *pi);
        }
        *p = std::mem::replace(p, DenseArray::scalar(0.0)).round();
    }
    Ok(())
}

pub fn cosine_lr(epoch: usize, total: usize, lr_max: f64, lr_min: f64) -> f64 {
    if total == 0 {
        return lr_max;
    }
    let frac = epoch.min(total) as f64 / total as f64;
    lr_min + 0.5 * (lr_max - lr_min) * (1.0 + (std::f64::consts::PI * frac).cos())
}

/// Scales `grads` down so their global L2 norm is at most `max_norm`.
pub fn clip_grad_norm(grads: &mut ParamStore, max_norm: f64) -> f64 {
    let norm = grads.iter().map(|(_, g)| g.data().iter().map(|x| x * x).sum::<f64>()).sum::<f64>().sqrt();
    if norm > max_norm {
        let s = max_norm / norm;
        grads.iter_mut().for_each(|(_, g)| g.data_mut().iter_mut().for_each(|x| *x *= s));
    }
    norm
}

/// A trial reduced to model inputs.
#[derive(Clone, Debug)]
pub struct PreparedTrial {
    /// `[T_norm, A, C_norm]` counts.
    pub x: DenseArray,
    /// `[d_text]` context embedding.
    pub meta: DenseArray,
}

/// Normalizes every trial and embeds each distinct metadata sentence once.
pub fn prepare(corpus: &[SpikeRecording], cfg: &ModelConfig, embedder: &dyn ContextEmbedder) -> Result<Vec<PreparedTrial>> {
    if embedder.d_text() != cfg.d_text {
        return Err(Error::Config(format!("embedder width {} but d_text = {}", embedder.d_text(), cfg.d_text)));
    }
    let norm = cfg.norm();
    let mut cache: HashMap<String, DenseArray> = HashMap::new();
    corpus
        .iter()
        .map(|rec| {
            let key = tokenizer::render_template(&rec.meta)?;
            let meta = match cache.get(&key) {
                Some(v) => v.clone(),
                None => {
                    let v = context_vector(embedder, &rec.meta)?;
                    cache.insert(key, v.clone());
                    v
                }
            };
            Ok(PreparedTrial { x: normalize(rec, &norm)?.values(), meta })
        })
        .collect()
}

/// Reconstruction loss of one trial under `plan`.
pub fn trial_loss<'t>(
    tape: &'t Tape,
    bound: &Bound<'t>,
    trial: &PreparedTrial,
    plan: &MaskPlan,
    cfg: &ModelConfig,
    target: ReconTarget,
) -> Result<Var<'t>> {
    let tt = tokenize_on_tape(bound, &trial.x, &trial.meta, cfg.interval)?;
    let target = tape.constant(match target {
        ReconTarget::Tokens => tt.tokens.value().clone(),
        ReconTarget::Spike => tt.spike.value().clone(),
    });
    let h = encoder::encode(apply_mask_var(tt.tokens, plan)?, bound, &EncoderConfig::from_model(cfg))?;
    masked_loss(recon_head(h, bound)?, target, plan)
}

/// Finite-difference check of the whole masked-reconstruction path
/// (tokenize, encode, reconstruct, masked loss) on one trial whose token
/// grid is `[n, a, t, d]`. Weights are redrawn at unit scale so that every
/// gradient sits well above finite-difference noise; layers are fixed at two.
/// [`pipeline_gradcheck_options`] gives a step and stencil suited to it.
pub fn pipeline_gradcheck_options(coords: usize, tol: f64, seed: u64) -> GradCheckOptions {
    GradCheckOptions { step: 1e-3, tol, coords, seed, fourth_order: true, ..GradCheckOptions::default() }
}

pub fn pipeline_gradcheck(shape: [usize; 4], heads: usize, opts: &GradCheckOptions) -> Result<GradCheckReport> {
    let [n, a, t, d] = shape;
    let cfg = ModelConfig {
        t_norm: n * t,
        areas: a,
        c_norm: 3,
        d_model: d,
        d_text: 5,
        interval: t,
        n_layers: 2,
        n_heads: heads,
        window: 3,
        d_ff: 2 * d,
        dropout: 0.0,
        rec_hidden: d,
        ..ModelConfig::default()
    };
    cfg.validate()?;
    let mut rng = ChaCha8Rng::seed_from_u64(opts.seed);
    let mut params = ParamStore::new();
    for (name, v) in init_model(&cfg, opts.seed).iter() {
        let (off, scale) = if name.ends_with("gamma") { (1.0, 0.3) } else { (0.0, 0.35) };
        let data = (0..v.len()).map(|_| off + scale * (2.0 * rng.random::<f64>() - 1.0)).collect();
        params.insert(name.clone(), DenseArray::new(v.shape(), data)?);
    }
    let x = DenseArray::new(
        &[cfg.t_norm, a, cfg.c_norm],
        (0..cfg.t_norm * a * cfg.c_norm).map(|_| rng.random_range(0..4) as f64).collect(),
    )?;
    let trial = PreparedTrial { x, meta: DenseArray::new(&[cfg.d_text], (0..cfg.d_text).map(|_| rng.random::<f64>() - 0.5).collect())? };
    let plan = sample_mask(cfg.tokens(), 0.5, opts.seed)?;
    // The training target is a detached copy of the tokens; hold it at its
    // base value so finite differences see the same function.
    let target = {
        let tape = Tape::new(Mode::Eval);
        let tt = tokenize_on_tape(&params.bind(&tape), &trial.x, &trial.meta, cfg.interval)?;
        let v = tt.tokens.value().clone();
        v
    };
    let ecfg = EncoderConfig::from_model(&cfg);
    gradcheck(
        &params,
        |tape, b| {
            let tt = tokenize_on_tape(b, &trial.x, &trial.meta, cfg.interval)?;
            let h = encoder::encode(apply_mask_var(tt.tokens, &plan)?, b, &ecfg)?;
            masked_loss(recon_head(h, b)?, tape.constant(target.clone()), &plan)
        },
        opts,
    )
}

/// SplitMix64 finalizer, used to derive independent per-step seeds.
pub fn mix_seed(parts: &[u64]) -> u64 {
    parts.iter().fold(0x9e37_79b9_7f4a_7c15, |acc, &p| {
        let mut z = acc ^ p.wrapping_add(0x9e37_79b9_7f4a_7c15).wrapping_add(acc << 6);
        z = (z ^ (z >> 30)).wrapping_mul(0xbf58_476d_1ce4_e5b9);
        z = (z ^ (z >> 27)).wrapping_mul(0x94d0_49bb_1331_11eb);
        z ^ (z >> 31)
    })
}

/// Sums `f(item)` gradients over `items` on `threads` workers; the
/// reduction order is fixed for a given thread count.
pub fn accumulate<T: Sync>(
    params: &ParamStore,
    items: &[T],
    threads: usize,
    f: impl Fn(&ParamStore, &T) -> Result<(f64, ParamStore)> + Sync,
) -> Result<(f64, ParamStore)> {
    let run = |chunk: &[T]| -> Result<(f64, ParamStore)> {
        let mut total = params.zeros_like();
        let mut loss = 0.0;
        for it in chunk {
            let (l, g) = f(params, it)?;
            loss += l;
            total.add_scaled(&g, 1.0);
        }
        Ok((loss, total))
    };
    if threads <= 1 || items.len() <= 1 {
        return run(items);
    }
    let p = precision();
    let size = items.len().div_ceil(threads);
    let parts: Vec<Result<(f64, ParamStore)>> = std::thread::scope(|s| {
        let handles: Vec<_> = items
            .chunks(size)
            .map(|chunk| {
                let run = &run;
                s.spawn(move || {
                    set_precision(p);
                    run(chunk)
                })
            })
            .collect();
        handles.into_iter().map(|h| h.join().expect("worker panicked")).collect()
    });
    let mut total = params.zeros_like();
    let mut loss = 0.0;
    for part in parts {
        let (l, g) = part?;
        loss += l;
        total.add_scaled(&g, 1.0);
    }
    Ok((loss, total))
}

#[derive(Clone, Debug)]
pub struct PretrainOutput {
    pub params: ParamStore,
    /// Mean masked loss of every epoch, in order.
    pub loss_curve: Vec<f64>,
}

/// Runs the masked-reconstruction loop. `on_epoch(epoch, mean_loss)` fires
/// after each epoch with a 1-based epoch number.
pub fn pretrain(
    corpus: &[SpikeRecording],
    run: &RunConfig,
    embedder: &dyn ContextEmbedder,
    mut on_epoch: impl FnMut(usize, f64),
) -> Result<PretrainOutput> {
    run.validate()?;
    if corpus.is_empty() {
        return Err(Error::Validation("pretraining corpus is empty".into()));
    }
    let (cfg, tc) = (&run.model, &run.train);
    crate::numerics::tune_allocator();
    let prev = precision();
    set_precision(run.dtype);
    let result = (|| {
        let trials = prepare(corpus, cfg, embedder)?;
        let mut params = init_model(cfg, run.seed);
        let mut state = OptimState::new(&params);
        let hp = AdamW::from_train(tc);
        let j = cfg.tokens();
        let mut curve = Vec::with_capacity(tc.epochs);
        let mut order: Vec<usize> = (0..trials.len()).collect();
        for epoch in 0..tc.epochs {
            let lr = cosine_lr(epoch, tc.epochs, tc.lr, tc.lr_min);
            let mut shuffle_rng = ChaCha8Rng::seed_from_u64(mix_seed(&[run.seed, 1, epoch as u64]));
            order.shuffle(&mut shuffle_rng);
            let mut epoch_loss = 0.0;
            for batch in order.chunks(tc.batch_size) {
                let (loss, mut grads) = accumulate(&params, batch, run.threads, |p, &i| {
                    let step_seed = mix_seed(&[run.seed, 2, epoch as u64, i as u64]);
                    let plan = sample_mask(j, tc.mask_ratio, step_seed)?;
                    let tape = Tape::new(Mode::Train { seed: step_seed ^ 0x5eed });
                    let bound = p.bind(&tape);
                    let loss = trial_loss(&tape, &bound, &trials[i], &plan, cfg, tc.target)?;
                    let l = loss.item();
                    let g = tape.backward(loss)?;
                    Ok((l, bound.collect(&g)))
                })?;
                if !loss.is_finite() {
                    return Err(Error::NumericContract(format!("non-finite loss in epoch {}", epoch + 1)));
                }
                epoch_loss += loss;
                grads.iter_mut().for_each(|(_, g)| g.data_mut().iter_mut().for_each(|x| *x /= batch.len() as f64));
                if let Some(c) = tc.grad_clip {
                    clip_grad_norm(&mut grads, c);
                }
                adamw_step(&mut params, &grads, &mut state, &hp, lr)?;
            }
            let mean = epoch_loss / trials.len() as f64;
            curve.push(mean);
            on_epoch(epoch + 1, mean);
        }
        Ok(PretrainOutput { params, loss_curve: curve })
    })();
    set_precision(prev);
    result
}

pub fn loss_csv(curve: &[f64]) -> String {
    let mut s = String::from("epoch,mean_loss\n");
    for (i, l) in curve.iter().enumerate() {
        s.push_str(&format!("{},{l:e}\n", i + 1));
    }
    s
}

pub const CKPT_MAGIC: &[u8; 4] = b"UBCK";
pub const CKPT_VERSION: u16 = 1;

/// Configuration stored alongside checkpoint weights.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct CheckpointMeta {
    pub model: ModelConfig,
    #[serde(default)]
    pub task: Option<TaskSpec>,
}

pub fn encode_checkpoint(meta: &CheckpointMeta, params: &ParamStore) -> Result<Vec<u8>> {
    let json = serde_json::to_vec(meta)?;
    let mut out = Vec::new();
    out.extend_from_slice(CKPT_MAGIC);
    out.extend_from_slice(&CKPT_VERSION.to_le_bytes());
    out.extend_from_slice(&(json.len() as u32).to_le_bytes());
    out.extend_from_slice(&json);
    out.extend_from_slice(&(params.len() as u32).to_le_bytes());
    for (name, p) in params.iter() {
        out.extend_from_slice(&(name.len() as u32).to_le_bytes());
        out.extend_from_slice(name.as_bytes());
        out.extend_from_slice(&(p.rank() as u32).to_le_bytes());
        for &e in p.shape() {
            out.extend_from_slice(&(e as u32).to_le_bytes());
        }
        for &v in p.data() {
            out.extend_from_slice(&(v as f32).to_le_bytes());
        }
    }
    Ok(out)
}

struct Reader<'a> {
    buf: &'a [u8],
    pos: usize,
}

impl<'a> Reader<'a> {
    fn take(&mut self, n: usize) -> Result<&'a [u8]> {
        let end = self.pos.checked_add(n).filter(|&e| e <= self.buf.len());
        let end = end.ok_or(Error::Length { expected: self.pos + n, found: self.buf.len() })?;
        let s = &self.buf[self.pos..end];
        self.pos = end;
        Ok(s)
    }
    fn u32(&mut self) -> Result<usize> {
        Ok(u32::from_le_bytes(self.take(4)?.try_into().expect("4 bytes")) as usize)
    }
}

pub fn decode_checkpoint(bytes: &[u8]) -> Result<(CheckpointMeta, ParamStore)> {
    let mut r = Reader { buf: bytes, pos: 0 };
    if r.take(4)? != CKPT_MAGIC {
        return Err(Error::Format("not a checkpoint (bad magic)".into()));
    }
    let version = u16::from_le_bytes(r.take(2)?.try_into().expect("2 bytes"));
    if version != CKPT_VERSION {
        return Err(Error::Version(version));
    }
    let len = r.u32()?;
    let meta: CheckpointMeta = serde_json::from_slice(r.take(len)?)?;
    let count = r.u32()?;
    let mut params = ParamStore::new();
    for _ in 0..count {
        let len = r.u32()?;
        let name = std::str::from_utf8(r.take(len)?)
            .map_err(|_| Error::Format("parameter name is not UTF-8".into()))?
            .to_string();
        let rank = r.u32()?;
        if rank == 0 || rank > crate::numerics::MAX_RANK {
            return Err(Error::Format(format!("parameter {name} has rank {rank}")));
        }
        let shape = (0..rank).map(|_| r.u32()).collect::<Result<Vec<_>>>()?;
        let n: usize = shape.iter().product();
        let data = r.take(n.checked_mul(4).ok_or_else(|| Error::Format("parameter too large".into()))?)?;
        let values = data.chunks_exact(4).map(|c| f32::from_le_bytes(c.try_into().expect("4 bytes")) as f64).collect();
        params.insert(name, DenseArray::new(&shape, values)?);
    }
    if r.pos != bytes.len() {
        return Err(Error::Format(format!("{} trailing bytes after checkpoint", bytes.len() - r.pos)));
    }
    Ok((meta, params))
}

pub fn write_checkpoint(path: impl AsRef<Path>, meta: &CheckpointMeta, params: &ParamStore) -> Result<()> {
    let mut f = std::fs::File::create(path)?;
    f.write_all(&encode_checkpoint(meta, params)?)?;
    Ok(())
}

pub fn read_checkpoint(path: impl AsRef<Path>) -> Result<(CheckpointMeta, ParamStore)> {
    decode_checkpoint(&std::fs::read(path)?)
}
