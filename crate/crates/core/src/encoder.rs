//! Interval-area attention encoder.
//!
//! Each layer runs unnormalized linear attention inside every
//! (interval, area) slice, pools each slice over time, runs causal
//! sliding-window softmax attention across the flattened `S = N·A` slice
//! sequence (interval-major, area-minor), adds both back onto the input and
//! finishes with a pre-normed GELU feed-forward block.
//!
//! The tape functions drive training; the `*_forward` kernels are tape-free
//! inference paths used by the benchmarks and as cross-checks.

use rand_chacha::ChaCha8Rng;

use crate::config::ModelConfig;
use crate::error::{dim_err, Result};
use crate::numerics::{
    matmul_general, permute, softmax_lastaxis, Bound, DenseArray, Mode, ParamStore, Tape, Var, LAYERNORM_EPS,
};

/// Initialization std of attention and feed-forward weights.
pub const WEIGHT_STD: f64 = 0.02;

pub fn layer_prefix(l: usize) -> String {
    format!("enc.{l}")
}

pub fn init_params(cfg: &ModelConfig, store: &mut ParamStore, rng: &mut ChaCha8Rng) {
    let (d, f) = (cfg.d_model, cfg.d_ff);
    for l in 0..cfg.n_layers {
        let p = layer_prefix(l);
        for att in ["ila", "aswa"] {
            for w in ["wq", "wk", "wv", "wo"] {
                store.init_normal(&format!("{p}.{att}.{w}"), &[d, d], WEIGHT_STD, rng);
            }
        }
        for ln in ["pool_ln", "ffn_ln"] {
            store.insert(format!("{p}.{ln}.gamma"), DenseArray::ones(&[d]));
            store.insert(format!("{p}.{ln}.beta"), DenseArray::zeros(&[d]));
        }
        store.init_normal(&format!("{p}.ffn.w1"), &[d, f], WEIGHT_STD, rng);
        store.insert(format!("{p}.ffn.b1"), DenseArray::zeros(&[f]));
        store.init_normal(&format!("{p}.ffn.w2"), &[f, d], WEIGHT_STD, rng);
        store.insert(format!("{p}.ffn.b2"), DenseArray::zeros(&[d]));
    }
}

/// Projection weights of one attention sublayer, each `[d, d]`.
#[derive(Clone, Copy)]
pub struct Attn<V> {
    pub wq: V,
    pub wk: V,
    pub wv: V,
    pub wo: V,
}

impl<V> Attn<V> {
    fn load(mut get: impl FnMut(&str) -> Result<V>, prefix: &str) -> Result<Self> {
        Ok(Attn {
            wq: get(&format!("{prefix}.wq"))?,
            wk: get(&format!("{prefix}.wk"))?,
            wv: get(&format!("{prefix}.wv"))?,
            wo: get(&format!("{prefix}.wo"))?,
        })
    }
}

impl<'a> Attn<&'a DenseArray> {
    pub fn from_store(store: &'a ParamStore, prefix: &str) -> Result<Self> {
        Self::load(|n| store.get(n), prefix)
    }
}

/// One layer's parameters bound to a tape.
pub struct LayerVars<'t> {
    pub ila: Attn<Var<'t>>,
    pub aswa: Attn<Var<'t>>,
    pub pool_ln: (Var<'t>, Var<'t>),
    pub ffn_ln: (Var<'t>, Var<'t>),
    pub w1: Var<'t>,
    pub b1: Var<'t>,
    pub w2: Var<'t>,
    pub b2: Var<'t>,
}

impl<'t> LayerVars<'t> {
    pub fn bind(bound: &Bound<'t>, l: usize) -> Result<Self> {
        let p = layer_prefix(l);
        let g = |s: &str| bound.get(&format!("{p}.{s}"));
        Ok(LayerVars {
            ila: Attn::load(|n| bound.get(n), &format!("{p}.ila"))?,
            aswa: Attn::load(|n| bound.get(n), &format!("{p}.aswa"))?,
            pool_ln: (g("pool_ln.gamma")?, g("pool_ln.beta")?),
            ffn_ln: (g("ffn_ln.gamma")?, g("ffn_ln.beta")?),
            w1: g("ffn.w1")?,
            b1: g("ffn.b1")?,
            w2: g("ffn.w2")?,
            b2: g("ffn.b2")?,
        })
    }
}

/// Structural settings the layer functions need.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct EncoderConfig {
    pub n_layers: usize,
    pub n_heads: usize,
    pub window: usize,
    pub dropout: f64,
    pub scale_scores: bool,
}

impl EncoderConfig {
    pub fn from_model(cfg: &ModelConfig) -> Self {
        EncoderConfig {
            n_layers: cfg.n_layers,
            n_heads: cfg.n_heads,
            window: cfg.window,
            dropout: cfg.dropout,
            scale_scores: cfg.scale_scores,
        }
    }
}

impl Default for EncoderConfig {
    fn default() -> Self {
        Self::from_model(&ModelConfig::default())
    }
}

/// Single-head interval linear attention `(H W_q)((H W_k)ᵀ(H W_v))` on a `[t, d]` slice.
pub fn ila(h: &DenseArray, wq: &DenseArray, wk: &DenseArray, wv: &DenseArray) -> Result<DenseArray> {
    let q = matmul_general(h, wq, false, false)?;
    let k = matmul_general(h, wk, false, false)?;
    let v = matmul_general(h, wv, false, false)?;
    Ok(matmul_general(&q, &matmul_general(&k, &v, true, false)?, false, false)?.round())
}

fn check_tokens(shape: &[usize], heads: usize) -> Result<[usize; 4]> {
    let &[n, a, t, d] = shape else {
        return dim_err(format!("expected [N, A, t, d] tokens, got {shape:?}"));
    };
    if heads == 0 || d % heads != 0 {
        return dim_err(format!("width {d} not divisible by {heads} heads"));
    }
    Ok([n, a, t, d])
}

/// `[.., L, d]` → `[.., heads, L, d_h]` for a rank-3 `[B, L, d]` input.
fn split_heads<'t>(x: Var<'t>, b: usize, l: usize, heads: usize, dh: usize) -> Result<Var<'t>> {
    x.reshape(&[b, l, heads, dh])?.permute(&[0, 2, 1, 3])
}

fn merge_heads<'t>(x: Var<'t>, b: usize, l: usize, d: usize) -> Result<Var<'t>> {
    x.permute(&[0, 2, 1, 3])?.reshape(&[b, l, d])
}

/// Multi-head interval linear attention over every slice, output-projected.
pub fn ila_layer<'t>(h: Var<'t>, w: &Attn<Var<'t>>, heads: usize) -> Result<Var<'t>> {
    let [n, a, t, d] = check_tokens(&h.shape(), heads)?;
    let (b, dh) = (n * a, d / heads);
    let flat = h.reshape(&[b, t, d])?;
    let q = split_heads(flat.matmul(w.wq)?, b, t, heads, dh)?;
    let k = split_heads(flat.matmul(w.wk)?, b, t, heads, dh)?;
    let v = split_heads(flat.matmul(w.wv)?, b, t, heads, dh)?;
    let out = q.matmul(k.matmul_tn(v)?)?;
    merge_heads(out, b, t, d)?.matmul(w.wo)?.reshape(&[n, a, t, d])
}

/// Mean over the interval axis and layer norm, flattened to `[S, d]`.
pub fn pool_and_norm<'t>(x: Var<'t>, ln: (Var<'t>, Var<'t>)) -> Result<Var<'t>> {
    let [n, a, _, d] = check_tokens(&x.shape(), 1)?;
    x.avgpool(2)?.reshape(&[n * a, d])?.layernorm(ln.0, ln.1, LAYERNORM_EPS)
}

/// `true` where key `j` lies outside query `i`'s window `[i-w+1, i]`.
pub fn window_mask(s: usize, w: usize) -> Vec<bool> {
    let mut mask = Vec::with_capacity(s * s);
    for i in 0..s {
        mask.extend((0..s).map(|j| j > i || j + w <= i));
    }
    mask
}

fn score_scale(dh: usize, scale: bool) -> f64 {
    if scale {
        1.0 / (dh as f64).sqrt()
    } else {
        1.0
    }
}

/// Causal sliding-window softmax attention over `[S, d]` pooled slices.
pub fn aswa<'t>(ht: Var<'t>, w: &Attn<Var<'t>>, heads: usize, window: usize, scale: bool) -> Result<Var<'t>> {
    let shape = ht.shape();
    let &[s, d] = shape.as_slice() else {
        return dim_err(format!("expected [S, d], got {shape:?}"));
    };
    check_tokens(&[1, 1, s, d], heads)?;
    if window == 0 {
        return dim_err("window must be at least 1");
    }
    let dh = d / heads;
    let x = ht.reshape(&[1, s, d])?;
    let q = split_heads(x.matmul(w.wq)?, 1, s, heads, dh)?;
    let k = split_heads(x.matmul(w.wk)?, 1, s, heads, dh)?;
    let v = split_heads(x.matmul(w.wv)?, 1, s, heads, dh)?;
    let mask: Vec<bool> = window_mask(s, window).repeat(heads);
    let p = q.matmul_nt(k)?.scale(score_scale(dh, scale))?.masked_fill(&mask, f64::NEG_INFINITY)?.softmax()?;
    merge_heads(p.matmul(v)?, 1, s, d)?.matmul(w.wo)?.reshape(&[s, d])
}

/// One encoder layer; output shape equals input shape.
pub fn iaa_block<'t>(h: Var<'t>, lv: &LayerVars<'t>, cfg: &EncoderConfig) -> Result<Var<'t>> {
    let [n, a, _, d] = check_tokens(&h.shape(), cfg.n_heads)?;
    let ila_out = ila_layer(h, &lv.ila, cfg.n_heads)?.dropout(cfg.dropout)?;
    let pooled = pool_and_norm(ila_out, lv.pool_ln)?;
    let aswa_out = aswa(pooled, &lv.aswa, cfg.n_heads, cfg.window, cfg.scale_scores)?.dropout(cfg.dropout)?;
    let z = ila_out.add(aswa_out.reshape(&[n, a, 1, d])?)?.add(h)?;
    let inner = z.layernorm(lv.ffn_ln.0, lv.ffn_ln.1, LAYERNORM_EPS)?.matmul(lv.w1)?.add(lv.b1)?.gelu()?;
    inner.dropout(cfg.dropout)?.matmul(lv.w2)?.add(lv.b2)?.add(z)
}

pub fn encode<'t>(tokens: Var<'t>, bound: &Bound<'t>, cfg: &EncoderConfig) -> Result<Var<'t>> {
    let mut h = tokens;
    for l in 0..cfg.n_layers {
        h = iaa_block(h, &LayerVars::bind(bound, l)?, cfg)?;
    }
    Ok(h)
}

/// Eval-mode encoding of a `[N, A, t, d]` array.
pub fn encode_eval(tokens: &DenseArray, params: &ParamStore, cfg: &EncoderConfig) -> Result<DenseArray> {
    let tape = Tape::new(Mode::Eval);
    let bound = params.bind(&tape);
    let out = encode(tape.constant(tokens.clone()), &bound, cfg)?;
    let v = out.value().clone();
    Ok(v)
}

fn heads_of(x: &DenseArray, b: usize, l: usize, heads: usize) -> Result<DenseArray> {
    let dh = x.last_dim() / heads;
    permute(&x.reshape(&[b, l, heads, dh])?, &[0, 2, 1, 3])
}

fn merge(x: &DenseArray, b: usize, l: usize, d: usize) -> Result<DenseArray> {
    permute(x, &[0, 2, 1, 3])?.into_reshape(&[b, l, d])
}

/// Tape-free multi-head interval linear attention over `[N, A, t, d]`.
pub fn ila_forward(h: &DenseArray, w: &Attn<&DenseArray>, heads: usize) -> Result<DenseArray> {
    let [n, a, t, d] = check_tokens(h.shape(), heads)?;
    let b = n * a;
    let flat = h.reshape(&[b, t, d])?;
    let q = heads_of(&matmul_general(&flat, w.wq, false, false)?, b, t, heads)?;
    let k = heads_of(&matmul_general(&flat, w.wk, false, false)?, b, t, heads)?;
    let v = heads_of(&matmul_general(&flat, w.wv, false, false)?, b, t, heads)?;
    let kv = matmul_general(&k, &v, true, false)?;
    let out = merge(&matmul_general(&q, &kv, false, false)?, b, t, d)?;
    Ok(matmul_general(&out, w.wo, false, false)?.into_reshape(&[n, a, t, d])?.round())
}

/// Softmax attention inside every `[t, d]` slice, the quadratic-in-`t` baseline.
pub fn full_attention_forward(h: &DenseArray, w: &Attn<&DenseArray>, heads: usize) -> Result<DenseArray> {
    let [n, a, t, d] = check_tokens(h.shape(), heads)?;
    let b = n * a;
    let flat = h.reshape(&[b, t, d])?;
    let q = heads_of(&matmul_general(&flat, w.wq, false, false)?, b, t, heads)?;
    let k = heads_of(&matmul_general(&flat, w.wk, false, false)?, b, t, heads)?;
    let v = heads_of(&matmul_general(&flat, w.wv, false, false)?, b, t, heads)?;
    let c = score_scale(d / heads, true);
    let scores = matmul_general(&q, &k, false, true)?.map(|x| x * c);
    let out = merge(&matmul_general(&softmax_lastaxis(&scores)?, &v, false, false)?, b, t, d)?;
    Ok(matmul_general(&out, w.wo, false, false)?.into_reshape(&[n, a, t, d])?.round())
}

/// Unmasked softmax attention across all `S` rows of `[S, d]`.
pub fn global_attention_forward(ht: &DenseArray, w: &Attn<&DenseArray>, heads: usize) -> Result<DenseArray> {
    let s = ht.shape()[0];
    let d = ht.last_dim();
    let out = full_attention_forward(&ht.reshape(&[1, 1, s, d])?, w, heads)?;
    out.into_reshape(&[s, d])
}

/// Banded sliding-window attention over `[S, d]`; cost grows as `S·w`.
pub fn aswa_forward(ht: &DenseArray, w: &Attn<&DenseArray>, heads: usize, window: usize, scale: bool) -> Result<DenseArray> {
    let &[s, d] = ht.shape() else {
        return dim_err(format!("expected [S, d], got {:?}", ht.shape()));
    };
    check_tokens(&[1, 1, s, d], heads)?;
    if window == 0 {
        return dim_err("window must be at least 1");
    }
    let dh = d / heads;
    let c = score_scale(dh, scale);
    let q = matmul_general(ht, w.wq, false, false)?.round();
    let k = matmul_general(ht, w.wk, false, false)?.round();
    let v = matmul_general(ht, w.wv, false, false)?.round();
    let (q, k, v) = (q.data(), k.data(), v.data());
    let mut out = vec![0.0; s * d];
    let mut scores = vec![0.0; window];
    for i in 0..s {
        let lo = (i + 1).saturating_sub(window);
        for hd in 0..heads {
            let off = hd * dh;
            let qi = &q[i * d + off..][..dh];
            let sc = &mut scores[..i + 1 - lo];
            for (sj, j) in sc.iter_mut().zip(lo..=i) {
                *sj = c * qi.iter().zip(&k[j * d + off..][..dh]).map(|(x, y)| x * y).sum::<f64>();
            }
            let m = sc.iter().copied().fold(f64::NEG_INFINITY, f64::max);
            sc.iter_mut().for_each(|x| *x = (*x - m).exp());
            let z: f64 = sc.iter().sum();
            let dst = &mut out[i * d + off..][..dh];
            for (&p, j) in sc.iter().zip(lo..=i) {
                let p = p / z;
                dst.iter_mut().zip(&v[j * d + off..][..dh]).for_each(|(o, vv)| *o += p * vv);
            }
        }
    }
    Ok(matmul_general(&DenseArray::new(&[s, d], out)?, w.wo, false, false)?.round())
}
