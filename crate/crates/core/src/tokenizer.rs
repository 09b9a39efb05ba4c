//! Context-conditioned tokens: a shared channel embedding per area, a
//! projected metadata sentence embedding and learned time/area positions,
//! summed and cut into equal time intervals.
//!
//! Canonical token layout is `[N, A, t, d]`.

use std::collections::HashMap;
use std::path::Path;

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, StandardNormal};

use crate::config::ModelConfig;
use crate::error::{dim_err, Error, Result};
use crate::normalize::NormalizedSpikes;
use crate::numerics::{Bound, DenseArray, ParamStore, Var};
use crate::spike_io::MetadataRecord;

pub const W_E: &str = "tok.w_e";
pub const B_E: &str = "tok.b_e";
pub const T_POS: &str = "tok.t_pos";
pub const A_POS: &str = "tok.a_pos";
pub const W_PROJ: &str = "tok.w_proj";

pub fn render_template(meta: &MetadataRecord) -> Result<String> {
    meta.validate()?;
    Ok(format!(
        "Invasive spike signals of {} species ({} {}) in the {} brain region during the {} task under session {}.",
        meta.species, meta.dataset, meta.subject, meta.region, meta.task, meta.session
    ))
}

/// Frozen text encoder. Implementations must be deterministic.
pub trait ContextEmbedder: Send + Sync {
    fn d_text(&self) -> usize;
    fn embed(&self, text: &str) -> Result<Vec<f64>>;
}

/// Hash-seeded random unit vectors; needs no model files.
#[derive(Clone, Copy, Debug)]
pub struct StubEmbedder {
    pub d_text: usize,
}

impl Default for StubEmbedder {
    fn default() -> Self {
        StubEmbedder { d_text: 384 }
    }
}

/// 64-bit FNV-1a.
fn fnv1a(bytes: &[u8]) -> u64 {
    bytes.iter().fold(0xcbf2_9ce4_8422_2325, |h, &b| (h ^ b as u64).wrapping_mul(0x0000_0100_0000_01b3))
}

impl ContextEmbedder for StubEmbedder {
    fn d_text(&self) -> usize {
        self.d_text
    }

    fn embed(&self, text: &str) -> Result<Vec<f64>> {
        let mut rng = ChaCha8Rng::seed_from_u64(fnv1a(text.as_bytes()));
        let mut v: Vec<f64> = (0..self.d_text).map(|_| StandardNormal.sample(&mut rng)).collect();
        let norm = v.iter().map(|x| x * x).sum::<f64>().sqrt();
        v.iter_mut().for_each(|x| *x /= norm);
        Ok(v)
    }
}

/// Lookup table read from a JSON object mapping sentence to vector.
#[derive(Clone, Debug)]
pub struct FileEmbedder {
    d_text: usize,
    table: HashMap<String, Vec<f64>>,
}

impl FileEmbedder {
    pub fn from_json(json: &str) -> Result<Self> {
        let table: HashMap<String, Vec<f64>> = serde_json::from_str(json)?;
        let d_text = table.values().next().map_or(0, Vec::len);
        if d_text == 0 {
            return Err(Error::Validation("embedding table is empty".into()));
        }
        if let Some((k, v)) = table.iter().find(|(_, v)| v.len() != d_text) {
            return Err(Error::Validation(format!("vector for `{k}` has {} entries, expected {d_text}", v.len())));
        }
        Ok(FileEmbedder { d_text, table })
    }

    pub fn load(path: impl AsRef<Path>) -> Result<Self> {
        Self::from_json(&std::fs::read_to_string(path)?)
    }
}

impl ContextEmbedder for FileEmbedder {
    fn d_text(&self) -> usize {
        self.d_text
    }

    fn embed(&self, text: &str) -> Result<Vec<f64>> {
        self.table.get(text).cloned().ok_or_else(|| Error::Validation(format!("no embedding for `{text}`")))
    }
}

/// Embedding of a recording's rendered metadata sentence, as `[d_text]`.
pub fn context_vector(embedder: &dyn ContextEmbedder, meta: &MetadataRecord) -> Result<DenseArray> {
    let v = embedder.embed(&render_template(meta)?)?;
    if v.len() != embedder.d_text() {
        return dim_err(format!("embedder returned {} values, declared {}", v.len(), embedder.d_text()));
    }
    DenseArray::from_vec(v)
}

/// Adds freshly initialized tokenizer parameters to `store`.
pub fn init_params(cfg: &ModelConfig, store: &mut ParamStore, rng: &mut ChaCha8Rng) {
    let d = cfg.d_model;
    store.init_normal(W_E, &[cfg.c_norm, d], 1.0 / (cfg.c_norm as f64).sqrt(), rng);
    store.insert(B_E, DenseArray::zeros(&[d]));
    store.init_normal(T_POS, &[cfg.t_norm, d], 0.02, rng);
    store.init_normal(A_POS, &[cfg.areas, d], 0.02, rng);
    store.init_normal(W_PROJ, &[cfg.d_text, d], 1.0 / (cfg.d_text as f64).sqrt(), rng);
}

/// Borrowed view of the tokenizer parameters.
#[derive(Clone, Copy, Debug)]
pub struct TokenizerParams<'a> {
    pub w_e: &'a DenseArray,
    pub b_e: &'a DenseArray,
    pub t_pos: &'a DenseArray,
    pub a_pos: &'a DenseArray,
    pub w_proj: &'a DenseArray,
}

impl<'a> TokenizerParams<'a> {
    pub fn from_store(store: &'a ParamStore) -> Result<Self> {
        Ok(TokenizerParams {
            w_e: store.get(W_E)?,
            b_e: store.get(B_E)?,
            t_pos: store.get(T_POS)?,
            a_pos: store.get(A_POS)?,
            w_proj: store.get(W_PROJ)?,
        })
    }
}

/// `X_a · W_e + b_e` for every area, as `[A, T_norm, d]`.
pub fn embed_channels(x: &NormalizedSpikes, p: &TokenizerParams) -> Result<DenseArray> {
    let (t_norm, areas, c) = (x.t_norm, x.areas, x.c_norm);
    if p.w_e.shape() != [c, p.b_e.len()] {
        return dim_err(format!("channel embedding {:?} does not map {c} channels", p.w_e.shape()));
    }
    let d = p.b_e.len();
    let (w, b) = (p.w_e.data(), p.b_e.data());
    let mut out = vec![0.0; areas * t_norm * d];
    for a in 0..areas {
        for t in 0..t_norm {
            let row = &mut out[(a * t_norm + t) * d..][..d];
            row.copy_from_slice(b);
            let xs = &x.counts[(t * areas + a) * c..][..c];
            for (ci, &n) in xs.iter().enumerate() {
                if n != 0 {
                    let n = n as f64;
                    row.iter_mut().zip(&w[ci * d..][..d]).for_each(|(r, wv)| *r += n * wv);
                }
            }
        }
    }
    Ok(DenseArray::new(&[areas, t_norm, d], out)?.round())
}

/// `emb[a, τ] + meta·W_proj + T_pos[τ] + A_pos[a]`, transposed to `[T_norm, A, d]`.
pub fn assemble_tokens(emb: &DenseArray, meta_vec: &DenseArray, p: &TokenizerParams) -> Result<DenseArray> {
    let &[areas, t_norm, d] = emb.shape() else {
        return dim_err(format!("expected [A, T, d] embeddings, got {:?}", emb.shape()));
    };
    if p.t_pos.shape() != [t_norm, d] || p.a_pos.shape() != [areas, d] {
        return dim_err(format!("positions {:?}/{:?} do not fit {:?}", p.t_pos.shape(), p.a_pos.shape(), emb.shape()));
    }
    if p.w_proj.shape() != [meta_vec.len(), d] {
        return dim_err(format!("projection {:?} does not map a {}-vector", p.w_proj.shape(), meta_vec.len()));
    }
    let mut m = vec![0.0; d];
    for (k, &mv) in meta_vec.data().iter().enumerate() {
        m.iter_mut().zip(&p.w_proj.data()[k * d..][..d]).for_each(|(o, w)| *o += mv * w);
    }
    let mut out = vec![0.0; t_norm * areas * d];
    for t in 0..t_norm {
        for a in 0..areas {
            let dst = &mut out[(t * areas + a) * d..][..d];
            let e = &emb.data()[(a * t_norm + t) * d..][..d];
            let tp = &p.t_pos.data()[t * d..][..d];
            let ap = &p.a_pos.data()[a * d..][..d];
            for k in 0..d {
                dst[k] = e[k] + m[k] + tp[k] + ap[k];
            }
        }
    }
    Ok(DenseArray::new(&[t_norm, areas, d], out)?.round())
}

/// Tokens cut into `N = T_norm / t` intervals.
#[derive(Clone, Debug, PartialEq)]
pub struct TokenTensor {
    /// `[N, A, t, d]`.
    pub values: DenseArray,
}

impl TokenTensor {
    pub fn n(&self) -> usize {
        self.values.shape()[0]
    }
    pub fn areas(&self) -> usize {
        self.values.shape()[1]
    }
    pub fn t(&self) -> usize {
        self.values.shape()[2]
    }
    pub fn d(&self) -> usize {
        self.values.shape()[3]
    }

    /// Back to `[T_norm, A, d]`.
    pub fn flatten(&self) -> DenseArray {
        let (n, a, t, d) = (self.n(), self.areas(), self.t(), self.d());
        crate::numerics::permute(&self.values, &[0, 2, 1, 3])
            .and_then(|x| x.into_reshape(&[n * t, a, d]))
            .expect("valid token tensor")
    }
}

pub fn partition_intervals(tokens: &DenseArray, t: usize) -> Result<TokenTensor> {
    let &[t_norm, areas, d] = tokens.shape() else {
        return dim_err(format!("expected [T, A, d] tokens, got {:?}", tokens.shape()));
    };
    if t == 0 || t_norm % t != 0 {
        return Err(Error::Partition { t_norm, interval: t });
    }
    let n = t_norm / t;
    let values = crate::numerics::permute(&tokens.reshape(&[n, t, areas, d])?, &[0, 2, 1, 3])?;
    Ok(TokenTensor { values })
}

/// Tokenizes one trial without a tape.
pub fn tokenize(x: &NormalizedSpikes, meta_vec: &DenseArray, p: &TokenizerParams, t: usize) -> Result<TokenTensor> {
    partition_intervals(&assemble_tokens(&embed_channels(x, p)?, meta_vec, p)?, t)
}

/// Tape-side tokens of one trial.
pub struct TapeTokens<'t> {
    /// Full tokens, `[N, A, t, d]`.
    pub tokens: Var<'t>,
    /// Channel embedding alone, same layout.
    pub spike: Var<'t>,
}

fn to_intervals<'t>(v: Var<'t>, n: usize, t: usize, areas: usize, d: usize) -> Result<Var<'t>> {
    v.reshape(&[n, t, areas, d])?.permute(&[0, 2, 1, 3])
}

/// Differentiable tokenization. `x` is `[T_norm, A, C_norm]`, `meta_vec` `[d_text]`.
pub fn tokenize_on_tape<'t>(
    bound: &Bound<'t>,
    x: &DenseArray,
    meta_vec: &DenseArray,
    interval: usize,
) -> Result<TapeTokens<'t>> {
    let &[t_norm, areas, _] = x.shape() else {
        return dim_err(format!("expected [T, A, C] spikes, got {:?}", x.shape()));
    };
    if interval == 0 || t_norm % interval != 0 {
        return Err(Error::Partition { t_norm, interval });
    }
    let w_e = bound.get(W_E)?;
    let tape = w_e.tape();
    let d = w_e.shape()[1];
    let spike = tape.constant(x.clone()).matmul(w_e)?.add(bound.get(B_E)?)?;
    let meta = tape.constant(meta_vec.reshape(&[1, meta_vec.len()])?).matmul(bound.get(W_PROJ)?)?;
    let t_pos = bound.get(T_POS)?.reshape(&[t_norm, 1, d])?;
    let tokens = spike.add(meta)?.add(t_pos)?.add(bound.get(A_POS)?)?;
    let n = t_norm / interval;
    Ok(TapeTokens {
        tokens: to_intervals(tokens, n, interval, areas, d)?,
        spike: to_intervals(spike, n, interval, areas, d)?,
    })
}
