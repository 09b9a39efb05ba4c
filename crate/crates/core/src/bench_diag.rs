//! Attention cost benchmarks and the embedding-expansion diagnostic.
//!
//! Flop models count one multiply-add as two flops and cover the three
//! input projections plus the attention products (single-head form;
//! splitting into heads changes only the core term by `1/heads`).

use std::fmt;
use std::time::Instant;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::config::ModelConfig;
use crate::encoder::{aswa_forward, full_attention_forward, global_attention_forward, ila_forward, Attn};
use crate::error::{Error, Result};
use crate::normalize::normalize;
use crate::numerics::{with_precision, DenseArray, ParamStore, Precision};
use crate::spike_io::SpikeRecording;
use crate::tokenizer::{assemble_tokens, context_vector, embed_channels, ContextEmbedder, TokenizerParams};

/// Multiply-adds of single-head interval linear attention: per slice,
/// `3·t·d²` for Q, K, V, `t·d²` for `KᵀV` and `t·d²` for `Q(KᵀV)`.
pub fn ila_macs(n: usize, a: usize, t: usize, d: usize) -> u64 {
    (n * a) as u64 * (3 * t * d * d + 2 * t * d * d) as u64
}

pub fn flops_ila(n: usize, a: usize, t: usize, d: usize) -> u64 {
    2 * ila_macs(n, a, t, d)
}

/// Softmax attention within each slice: projections plus `QKᵀ` and `PV`.
pub fn flops_full(n: usize, a: usize, t: usize, d: usize) -> u64 {
    2 * (n * a) as u64 * (3 * t * d * d + 2 * t * t * d) as u64
}

/// Causal window `w` over `s` rows: query `i` scores `min(w, i+1)` keys.
pub fn flops_aswa(s: usize, w: usize, d: usize) -> u64 {
    let keys: u64 = (0..s).map(|i| w.min(i + 1) as u64).sum();
    2 * (3 * (s * d * d) as u64 + 2 * d as u64 * keys)
}

pub fn flops_global(s: usize, d: usize) -> u64 {
    2 * (3 * s * d * d + 2 * s * s * d) as u64
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Component {
    Ila,
    FullAttn,
    Aswa,
    GlobalAttn,
}

impl Component {
    pub fn parse(s: &str) -> Option<Self> {
        match s {
            "ila" => Some(Component::Ila),
            "full" | "full_attn" => Some(Component::FullAttn),
            "aswa" => Some(Component::Aswa),
            "global" | "global_attn" => Some(Component::GlobalAttn),
            _ => None,
        }
    }

    pub fn as_str(self) -> &'static str {
        match self {
            Component::Ila => "ila",
            Component::FullAttn => "full_attn",
            Component::Aswa => "aswa",
            Component::GlobalAttn => "global_attn",
        }
    }

    /// Axis swept by default: `t` for per-slice kernels, `S` otherwise.
    pub fn default_axis(self) -> &'static str {
        match self {
            Component::Ila | Component::FullAttn => "t",
            Component::Aswa | Component::GlobalAttn => "S",
        }
    }
}

impl fmt::Display for Component {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct BenchShape {
    pub n: usize,
    pub a: usize,
    pub t: usize,
    pub d: usize,
    pub s: usize,
    pub w: usize,
    pub heads: usize,
}

impl BenchShape {
    fn axis(&self, axis: &str) -> Option<usize> {
        match axis {
            "N" | "n" => Some(self.n),
            "A" | "a" => Some(self.a),
            "t" => Some(self.t),
            "d" => Some(self.d),
            "S" | "s" => Some(self.s),
            "w" => Some(self.w),
            _ => None,
        }
    }
}

/// Default sweep grids.
///
/// The full-attention sweep runs at small `d` so that `t` passes well
/// beyond `d` and the quadratic score matrix dominates.
pub fn default_grid(c: Component, axis: &str) -> Result<Vec<BenchShape>> {
    let base = match c {
        Component::Ila => BenchShape { n: 4, a: 8, t: 10, d: 64, s: 32, w: 10, heads: 8 },
        Component::FullAttn => BenchShape { n: 1, a: 2, t: 10, d: 16, s: 2, w: 10, heads: 1 },
        Component::Aswa | Component::GlobalAttn => BenchShape { n: 1, a: 1, t: 1, d: 64, s: 64, w: 10, heads: 8 },
    };
    let values: &[usize] = match (c, axis) {
        (Component::Ila, "t") => &[8, 16, 32, 64, 128],
        (Component::FullAttn, "t") => &[64, 128, 256, 512, 1024],
        (Component::Aswa | Component::GlobalAttn, "S" | "s") => &[64, 128, 256, 512, 1024],
        (_, "d") => &[16, 32, 64, 128],
        (Component::Aswa, "w") => &[2, 4, 8, 16, 32],
        _ => return Err(Error::Validation(format!("no default sweep of {axis} for {c}"))),
    };
    Ok(values
        .iter()
        .map(|&v| {
            let mut s = base;
            match axis {
                "t" => s.t = v,
                "S" | "s" => s.s = v,
                "d" => s.d = v,
                "w" => s.w = v,
                _ => unreachable!("axis validated above"),
            }
            if matches!(c, Component::Ila | Component::FullAttn) {
                s.s = s.n * s.a;
            }
            s
        })
        .collect())
}

#[derive(Clone, Debug, PartialEq)]
pub struct TimingRow {
    pub component: Component,
    pub shape: BenchShape,
    /// Median over `reps` timed runs.
    pub wall_ns: u64,
    pub flops: u64,
    pub reps: usize,
    pub warmups: usize,
}

pub const CSV_HEADER: &str = "component,N,A,t,d,S,w,wall_ns,flops";

impl TimingRow {
    pub fn csv(&self) -> String {
        let s = &self.shape;
        format!("{},{},{},{},{},{},{},{},{}", self.component, s.n, s.a, s.t, s.d, s.s, s.w, self.wall_ns, self.flops)
    }
}

pub fn timing_csv(rows: &[TimingRow]) -> String {
    let mut out = format!("{CSV_HEADER}\n");
    for r in rows {
        out.push_str(&r.csv());
        out.push('\n');
    }
    out
}

fn random(shape: &[usize], rng: &mut ChaCha8Rng) -> DenseArray {
    let n = shape.iter().product();
    DenseArray::new(shape, (0..n).map(|_| rng.random::<f64>() - 0.5).collect()).expect("valid shape")
}

fn flops_for(c: Component, s: &BenchShape) -> u64 {
    match c {
        Component::Ila => flops_ila(s.n, s.a, s.t, s.d),
        Component::FullAttn => flops_full(s.n, s.a, s.t, s.d),
        Component::Aswa => flops_aswa(s.s, s.w, s.d),
        Component::GlobalAttn => flops_global(s.s, s.d),
    }
}

/// Times one kernel per grid shape in 64-bit mode: `warmups` untimed runs,
/// then the median of `reps` timed runs.
pub fn bench_attention(c: Component, grid: &[BenchShape], reps: usize, warmups: usize, seed: u64) -> Result<Vec<TimingRow>> {
    if reps == 0 {
        return Err(Error::Validation("need at least one timed repetition".into()));
    }
    crate::numerics::tune_allocator();
    with_precision(Precision::F64, || {
        let mut rows = Vec::with_capacity(grid.len());
        for shape in grid {
            let mut rng = ChaCha8Rng::seed_from_u64(seed);
            let d = shape.d;
            let w: Vec<DenseArray> = (0..4).map(|_| random(&[d, d], &mut rng).map(|x| x * 0.2)).collect();
            let attn = Attn { wq: &w[0], wk: &w[1], wv: &w[2], wo: &w[3] };
            let input = match c {
                Component::Ila | Component::FullAttn => random(&[shape.n, shape.a, shape.t, d], &mut rng),
                Component::Aswa | Component::GlobalAttn => random(&[shape.s, d], &mut rng),
            };
            let run = || -> Result<DenseArray> {
                match c {
                    Component::Ila => ila_forward(&input, &attn, shape.heads),
                    Component::FullAttn => full_attention_forward(&input, &attn, shape.heads),
                    Component::Aswa => aswa_forward(&input, &attn, shape.heads, shape.w, true),
                    Component::GlobalAttn => global_attention_forward(&input, &attn, shape.heads),
                }
            };
            for _ in 0..warmups {
                std::hint::black_box(run()?);
            }
            let mut times = Vec::with_capacity(reps);
            for _ in 0..reps {
                let t0 = Instant::now();
                std::hint::black_box(run()?);
                times.push(t0.elapsed().as_nanos().max(1) as u64);
            }
            times.sort_unstable();
            rows.push(TimingRow {
                component: c,
                shape: *shape,
                wall_ns: times[reps / 2],
                flops: flops_for(c, shape),
                reps,
                warmups,
            });
        }
        Ok(rows)
    })
}

/// Least-squares slope of `ln y` against `ln x`.
pub fn fit_loglog_slope(xs: &[f64], ys: &[f64]) -> f64 {
    let n = xs.len() as f64;
    let lx: Vec<f64> = xs.iter().map(|x| x.ln()).collect();
    let ly: Vec<f64> = ys.iter().map(|y| y.ln()).collect();
    let (mx, my) = (lx.iter().sum::<f64>() / n, ly.iter().sum::<f64>() / n);
    let cov: f64 = lx.iter().zip(&ly).map(|(x, y)| (x - mx) * (y - my)).sum();
    let var: f64 = lx.iter().map(|x| (x - mx).powi(2)).sum();
    cov / var
}

/// Non-decreasing except for at most one adjacent inversion.
pub fn nearly_monotone(ys: &[u64]) -> bool {
    ys.windows(2).filter(|w| w[1] < w[0]).count() <= 1
}

#[derive(Clone, Debug)]
pub struct Sweep {
    pub axis: String,
    pub rows: Vec<TimingRow>,
    pub slope: f64,
    pub attempts: usize,
}

/// Benchmarks a grid along `axis` and fits the time-vs-axis slope,
/// re-running up to `max_attempts` times while the medians are not
/// nearly monotone.
pub fn sweep(
    c: Component,
    axis: &str,
    grid: &[BenchShape],
    reps: usize,
    warmups: usize,
    max_attempts: usize,
) -> Result<Sweep> {
    let xs: Vec<f64> = grid
        .iter()
        .map(|s| s.axis(axis).map(|v| v as f64).ok_or_else(|| Error::Validation(format!("unknown axis {axis}"))))
        .collect::<Result<_>>()?;
    let mut attempts = 0;
    loop {
        attempts += 1;
        let rows = bench_attention(c, grid, reps, warmups, attempts as u64)?;
        let times: Vec<u64> = rows.iter().map(|r| r.wall_ns).collect();
        if nearly_monotone(&times) || attempts >= max_attempts.max(1) {
            let ys: Vec<f64> = times.iter().map(|&t| t as f64).collect();
            return Ok(Sweep { axis: axis.to_string(), slope: fit_loglog_slope(&xs, &ys), rows, attempts });
        }
    }
}

/// Sample covariance (divisor `n − 1`) of the rows of `[n, d]`, row-major `d × d`.
pub fn covariance(x: &DenseArray) -> Vec<f64> {
    let (n, d) = (x.shape()[0], x.last_dim());
    let mut mean = vec![0.0; d];
    for row in x.data().chunks(d) {
        mean.iter_mut().zip(row).for_each(|(m, v)| *m += v);
    }
    mean.iter_mut().for_each(|m| *m /= n as f64);
    let centered: Vec<f64> = x.data().chunks(d).flat_map(|r| r.iter().zip(&mean).map(|(v, m)| v - m)).collect();
    let mut cov = vec![0.0; d * d];
    crate::numerics::gemm(true, false, d, n, d, &centered, &centered, &mut cov, false);
    let denom = (n.max(2) - 1) as f64;
    cov.iter_mut().for_each(|c| *c /= denom);
    // Exact symmetry.
    for i in 0..d {
        for j in 0..i {
            let v = 0.5 * (cov[i * d + j] + cov[j * d + i]);
            cov[i * d + j] = v;
            cov[j * d + i] = v;
        }
    }
    cov
}

/// Eigenvalues of a symmetric `d × d` matrix by cyclic Jacobi rotations.
pub fn symmetric_eigenvalues(m: &[f64], d: usize) -> Vec<f64> {
    let mut a = m.to_vec();
    let scale: f64 = a.iter().map(|x| x * x).sum::<f64>().sqrt();
    for _sweep in 0..100 {
        let off: f64 = (0..d).flat_map(|i| (0..d).filter(move |&j| j != i).map(move |j| (i, j))).map(|(i, j)| a[i * d + j].powi(2)).sum();
        if off.sqrt() <= 1e-15 * scale.max(f64::MIN_POSITIVE) {
            break;
        }
        for p in 0..d {
            for q in p + 1..d {
                let apq = a[p * d + q];
                if apq == 0.0 {
                    continue;
                }
                let theta = (a[q * d + q] - a[p * d + p]) / (2.0 * apq);
                let t = theta.signum() / (theta.abs() + (theta * theta + 1.0).sqrt());
                let t = if theta == 0.0 { 1.0 } else { t };
                let c = 1.0 / (t * t + 1.0).sqrt();
                let s = t * c;
                for k in 0..d {
                    let (akp, akq) = (a[k * d + p], a[k * d + q]);
                    a[k * d + p] = c * akp - s * akq;
                    a[k * d + q] = s * akp + c * akq;
                }
                for k in 0..d {
                    let (apk, aqk) = (a[p * d + k], a[q * d + k]);
                    a[p * d + k] = c * apk - s * aqk;
                    a[q * d + k] = s * apk + c * aqk;
                }
            }
        }
    }
    let mut ev: Vec<f64> = (0..d).map(|i| a[i * d + i]).collect();
    ev.sort_by(|x, y| y.total_cmp(x));
    ev
}

/// `Σ ln(λᵢ + eps)` with negative round-off eigenvalues clamped to zero.
pub fn logdet_eps(eigenvalues: &[f64], eps: f64) -> f64 {
    eigenvalues.iter().map(|&l| (l.max(0.0) + eps).ln()).sum()
}

/// `exp` of the entropy of the normalized eigenvalue spectrum.
pub fn effective_rank(eigenvalues: &[f64]) -> f64 {
    let total: f64 = eigenvalues.iter().map(|l| l.max(0.0)).sum();
    if total <= 0.0 {
        return 0.0;
    }
    let h: f64 = eigenvalues
        .iter()
        .map(|l| l.max(0.0) / total)
        .filter(|&p| p > 0.0)
        .map(|p| -p * p.ln())
        .sum();
    h.exp()
}

/// Largest possible `|logdet(A + E + εI) − logdet(A + εI)|` for PSD `A` of
/// size `d` and symmetric `E` with entries at most `max_abs_e`: every
/// eigenvalue moves by at most `d·max_abs_e` and stays above `ε`.
pub fn logdet_perturbation_bound(d: usize, max_abs_e: f64, eps: f64) -> f64 {
    d as f64 * (1.0 + d as f64 * max_abs_e / eps).ln()
}

#[derive(Clone, Debug, PartialEq)]
pub struct ExpansionReport {
    pub logdet_spike: f64,
    pub logdet_joint: f64,
    pub effective_rank_spike: f64,
    pub effective_rank_joint: f64,
    pub eps: f64,
    pub samples: usize,
    pub dim: usize,
    /// Fewer samples than dimensions; the log-determinants lean on `eps`.
    pub ill_conditioned: bool,
}

impl ExpansionReport {
    pub fn csv(&self) -> String {
        format!(
            "key,value\nlogdet_spike,{}\nlogdet_joint,{}\neffective_rank_spike,{}\neffective_rank_joint,{}\neps,{}\nsamples,{}\ndim,{}\nill_conditioned,{}\n",
            self.logdet_spike,
            self.logdet_joint,
            self.effective_rank_spike,
            self.effective_rank_joint,
            self.eps,
            self.samples,
            self.dim,
            self.ill_conditioned
        )
    }
}

/// Compares the spread of two `[n, d]` token samples drawn at the same positions.
pub fn expansion_from_tokens(spike: &DenseArray, joint: &DenseArray, eps: f64) -> Result<ExpansionReport> {
    if spike.shape() != joint.shape() || spike.rank() != 2 {
        return Err(Error::Dimension(format!("token samples {:?} vs {:?}", spike.shape(), joint.shape())));
    }
    if !(eps > 0.0) {
        return Err(Error::Validation(format!("eps must be positive, got {eps}")));
    }
    let (n, d) = (spike.shape()[0], spike.shape()[1]);
    let es = symmetric_eigenvalues(&covariance(spike), d);
    let ej = symmetric_eigenvalues(&covariance(joint), d);
    Ok(ExpansionReport {
        logdet_spike: logdet_eps(&es, eps),
        logdet_joint: logdet_eps(&ej, eps),
        effective_rank_spike: effective_rank(&es),
        effective_rank_joint: effective_rank(&ej),
        eps,
        samples: n,
        dim: d,
        ill_conditioned: n < d,
    })
}

/// Token samples of a corpus with and without the metadata term, each `[trials·T·A, d]`.
pub fn token_samples(
    corpus: &[SpikeRecording],
    params: &ParamStore,
    cfg: &ModelConfig,
    embedder: &dyn ContextEmbedder,
) -> Result<(DenseArray, DenseArray)> {
    let p = TokenizerParams::from_store(params)?;
    let zero_meta = DenseArray::zeros(&[cfg.d_text]);
    let (mut spike, mut joint) = (Vec::new(), Vec::new());
    for rec in corpus {
        let emb = embed_channels(&normalize(rec, &cfg.norm())?, &p)?;
        spike.extend_from_slice(assemble_tokens(&emb, &zero_meta, &p)?.data());
        joint.extend_from_slice(assemble_tokens(&emb, &context_vector(embedder, &rec.meta)?, &p)?.data());
    }
    let rows = spike.len() / cfg.d_model;
    Ok((DenseArray::new(&[rows, cfg.d_model], spike)?, DenseArray::new(&[rows, cfg.d_model], joint)?))
}

pub fn expansion_diag(
    corpus: &[SpikeRecording],
    params: &ParamStore,
    cfg: &ModelConfig,
    embedder: &dyn ContextEmbedder,
    eps: f64,
) -> Result<ExpansionReport> {
    if corpus.is_empty() {
        return Err(Error::Validation("expansion diagnostic needs at least one trial".into()));
    }
    let (s, j) = with_precision(Precision::F64, || token_samples(corpus, params, cfg, embedder))?;
    expansion_from_tokens(&s, &j, eps)
}

#[cfg(test)]
mod tests {
    use super::*;

    /// Naive single-head ILA that counts every multiply-add it performs.
    fn counted_ila(t: usize, d: usize) -> u64 {
        let h = vec![1.0; t * d];
        let w = vec![0.5; d * d];
        let mut macs = 0u64;
        let mut proj = |out: &mut Vec<f64>| {
            for i in 0..t {
                for j in 0..d {
                    for k in 0..d {
                        out[i * d + j] += h[i * d + k] * w[k * d + j];
                        macs += 1;
                    }
                }
            }
        };
        let (mut q, mut k, mut v) = (vec![0.0; t * d], vec![0.0; t * d], vec![0.0; t * d]);
        proj(&mut q);
        proj(&mut k);
        proj(&mut v);
        let mut kv = vec![0.0; d * d];
        for a in 0..d {
            for b in 0..d {
                for i in 0..t {
                    kv[a * d + b] += k[i * d + a] * v[i * d + b];
                    macs += 1;
                }
            }
        }
        let mut out = vec![0.0; t * d];
        for i in 0..t {
            for b in 0..d {
                for a in 0..d {
                    out[i * d + b] += q[i * d + a] * kv[a * d + b];
                    macs += 1;
                }
            }
        }
        macs
    }

    #[test]
    fn flop_models_match_instrumented_counts() {
        for (t, d) in [(2, 2), (3, 5), (10, 8)] {
            assert_eq!(ila_macs(1, 1, t, d), counted_ila(t, d));
        }
        assert_eq!(ila_macs(1, 1, 2, 2), 40);
        assert_eq!(flops_ila(2, 3, 8, 4), 2 * flops_ila(2, 3, 4, 4));
        assert_eq!(flops_ila(1, 1, 4, 8), 4 * flops_ila(1, 1, 4, 4));
        assert_eq!(flops_aswa(3, 2, 1), 2 * (3 * 3 + 2 * (1 + 2 + 2)));
        assert_eq!(flops_aswa(100, 100, 4), flops_aswa(100, 200, 4));
    }

    #[test]
    fn slope_fit_and_monotonicity() {
        let xs = [1.0, 2.0, 4.0, 8.0];
        let ys: Vec<f64> = xs.iter().map(|x: &f64| 3.0 * x.powi(2)).collect();
        assert!((fit_loglog_slope(&xs, &ys) - 2.0).abs() < 1e-12);
        assert!(nearly_monotone(&[1, 2, 3]));
        assert!(nearly_monotone(&[1, 3, 2, 4]));
        assert!(!nearly_monotone(&[3, 2, 1]));
    }

    #[test]
    fn bench_rows_are_positive() {
        let grid = &default_grid(Component::Aswa, "S").unwrap()[..2];
        let rows = bench_attention(Component::Aswa, grid, 3, 1, 0).unwrap();
        assert!(rows.iter().all(|r| r.wall_ns > 0 && r.reps == 3 && r.warmups == 1));
        assert_eq!(timing_csv(&rows).lines().next(), Some(CSV_HEADER));
    }

    fn cholesky_logdet(m: &[f64], d: usize) -> f64 {
        let mut l = vec![0.0; d * d];
        for i in 0..d {
            for j in 0..=i {
                let s: f64 = (0..j).map(|k| l[i * d + k] * l[j * d + k]).sum();
                if i == j {
                    l[i * d + i] = (m[i * d + i] - s).sqrt();
                } else {
                    l[i * d + j] = (m[i * d + j] - s) / l[j * d + j];
                }
            }
        }
        (0..d).map(|i| 2.0 * l[i * d + i].ln()).sum()
    }

    #[test]
    fn jacobi_agrees_with_cholesky() {
        let mut rng = ChaCha8Rng::seed_from_u64(2);
        let x = random(&[40, 6], &mut rng);
        let cov = covariance(&x);
        let ev = symmetric_eigenvalues(&cov, 6);
        assert!((ev.iter().sum::<f64>() - (0..6).map(|i| cov[i * 6 + i]).sum::<f64>()).abs() < 1e-12);
        let mut reg = cov.clone();
        (0..6).for_each(|i| reg[i * 6 + i] += 1e-6);
        assert!((logdet_eps(&ev, 1e-6) - cholesky_logdet(&reg, 6)).abs() < 1e-9);
        assert!((effective_rank(&[1.0, 1.0, 1.0, 0.0]) - 3.0).abs() < 1e-12);
    }

    #[test]
    fn metadata_spread_expands_degenerate_spikes() {
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        let d = 8;
        let metas: Vec<DenseArray> = (0..8).map(|_| random(&[d], &mut rng)).collect();
        let spike = DenseArray::full(&[64, d], 0.3);
        let joint = DenseArray::new(
            &[64, d],
            (0..64).flat_map(|r| metas[r % 8].data().iter().map(|m| 0.3 + m).collect::<Vec<_>>()).collect(),
        )
        .unwrap();
        let rep = expansion_from_tokens(&spike, &joint, 1e-6).unwrap();
        assert!(rep.logdet_joint > rep.logdet_spike);
        // A constant shift leaves the covariance, and so both numbers, in place.
        let shifted = spike.map(|x| x + 2.0);
        let rep = expansion_from_tokens(&joint, &DenseArray::new(&[64, d], joint.data().iter().map(|x| x + 2.0).collect()).unwrap(), 1e-6).unwrap();
        assert!((rep.logdet_joint - rep.logdet_spike).abs() < 1e-6);
        assert!(expansion_from_tokens(&spike, &shifted, 0.0).is_err());
    }
}
