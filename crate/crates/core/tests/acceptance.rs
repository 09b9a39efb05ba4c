//! Acceptance suite: one line per criterion, non-zero exit if any fails.
//!
//! `ACCEPT_ONLY=1,4,12` restricts the run to the listed criteria.

use std::process::ExitCode;
use std::time::Instant;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use spikefm::bench_diag::{self, Component};
use spikefm::config::{HeadInput, ModelConfig, RunConfig};
use spikefm::downstream::{self, MetricReport, TaskSpec};
use spikefm::encoder::{self, aswa_forward, ila, Attn, EncoderConfig};
use spikefm::normalize::{normalize, NormConfig};
use spikefm::numerics::{DenseArray, Mode, Tape};
use spikefm::objective::{self, apply_mask_var, masked_loss, recon_head, sample_mask, CheckpointMeta};
use spikefm::spike_io::{self, CenterOutParams, Label, MetadataRecord, SpikeRecording, SplitMode, SplitSpec};
use spikefm::tokenizer::{tokenize_on_tape, StubEmbedder};
use spikefm::Error;

type Check = Result<String, String>;

fn ensure(ok: bool, msg: impl FnOnce() -> String) -> Result<(), String> {
    if ok {
        Ok(())
    } else {
        Err(msg())
    }
}

fn random(shape: &[usize], rng: &mut ChaCha8Rng, scale: f64) -> DenseArray {
    let n = shape.iter().product();
    DenseArray::new(shape, (0..n).map(|_| scale * (2.0 * rng.random::<f64>() - 1.0)).collect()).unwrap()
}

fn naive_mm(a: &[f64], b: &[f64], n: usize, k: usize, m: usize) -> Vec<f64> {
    let mut out = vec![0.0; n * m];
    for i in 0..n {
        for j in 0..m {
            out[i * m + j] = (0..k).map(|p| a[i * k + p] * b[p * m + j]).sum();
        }
    }
    out
}

fn transpose(a: &[f64], n: usize, m: usize) -> Vec<f64> {
    (0..m).flat_map(|j| (0..n).map(move |i| a[i * m + j])).collect()
}

fn max_diff(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| (x - y).abs()).fold(0.0, f64::max)
}

/// 1. Linear attention against the explicit `(QKᵀ)V` product.
fn associativity() -> Check {
    let mut rng = ChaCha8Rng::seed_from_u64(1);
    let mut worst = 0.0f64;
    let cases = 150;
    for _ in 0..cases {
        let (t, d) = (rng.random_range(1..=32), rng.random_range(1..=32));
        let h = random(&[t, d], &mut rng, 1.0);
        let w: Vec<DenseArray> = (0..3).map(|_| random(&[d, d], &mut rng, 0.5)).collect();
        let got = ila(&h, &w[0], &w[1], &w[2]).map_err(|e| e.to_string())?;
        let q = naive_mm(h.data(), w[0].data(), t, d, d);
        let k = naive_mm(h.data(), w[1].data(), t, d, d);
        let v = naive_mm(h.data(), w[2].data(), t, d, d);
        let scores = naive_mm(&q, &transpose(&k, t, d), t, d, t);
        let want = naive_mm(&scores, &v, t, t, d);
        worst = worst.max(max_diff(got.data(), &want));
    }
    ensure(worst < 1e-10, || format!("max |diff| {worst:e} ≥ 1e-10"))?;
    Ok(format!("{cases} random (t, d) ≤ 32, max |diff| {worst:.1e}"))
}

/// Multi-head causal window attention by explicit loops; `w = usize::MAX` is plain causal.
fn brute_window(x: &DenseArray, w: &[DenseArray], heads: usize, window: usize) -> Vec<f64> {
    let (s, d) = (x.shape()[0], x.shape()[1]);
    let dh = d / heads;
    let q = naive_mm(x.data(), w[0].data(), s, d, d);
    let k = naive_mm(x.data(), w[1].data(), s, d, d);
    let v = naive_mm(x.data(), w[2].data(), s, d, d);
    let mut cat = vec![0.0; s * d];
    for h in 0..heads {
        let cols = h * dh..(h + 1) * dh;
        for i in 0..s {
            let lo = if window > i { 0 } else { i + 1 - window };
            let scores: Vec<f64> = (lo..=i)
                .map(|j| cols.clone().map(|c| q[i * d + c] * k[j * d + c]).sum::<f64>() / (dh as f64).sqrt())
                .collect();
            let m = scores.iter().copied().fold(f64::NEG_INFINITY, f64::max);
            let e: Vec<f64> = scores.iter().map(|x| (x - m).exp()).collect();
            let z: f64 = e.iter().sum();
            for c in cols.clone() {
                cat[i * d + c] = (lo..=i).zip(&e).map(|(j, p)| p / z * v[j * d + c]).sum();
            }
        }
    }
    naive_mm(&cat, w[3].data(), s, d, d)
}

/// 2. Windowed attention against masked softmax, and the full-window limit.
fn window_oracle() -> Check {
    let mut rng = ChaCha8Rng::seed_from_u64(2);
    let (mut worst, mut worst_full) = (0.0f64, 0.0f64);
    let cases = 80;
    for case in 0..cases {
        let heads = [1, 2, 4][rng.random_range(0..3)];
        let d = heads * rng.random_range(1..=8);
        let s = rng.random_range(1..=128);
        let window = rng.random_range(1..=s + 4);
        let x = random(&[s, d], &mut rng, 1.0);
        let w: Vec<DenseArray> = (0..4).map(|_| random(&[d, d], &mut rng, 0.5)).collect();
        let attn = Attn { wq: &w[0], wk: &w[1], wv: &w[2], wo: &w[3] };
        let banded = aswa_forward(&x, &attn, heads, window, true).map_err(|e| e.to_string())?;
        let tape = Tape::new(Mode::Eval);
        let vars = Attn { wq: tape.constant(w[0].clone()), wk: tape.constant(w[1].clone()), wv: tape.constant(w[2].clone()), wo: tape.constant(w[3].clone()) };
        let dense = encoder::aswa(tape.constant(x.clone()), &vars, heads, window, true).map_err(|e| e.to_string())?;
        let want = brute_window(&x, &w, heads, window);
        worst = worst.max(max_diff(banded.data(), &want)).max(max_diff(dense.value().data(), &want));
        if case % 4 == 0 {
            let wide = aswa_forward(&x, &attn, heads, s + rng.random_range(0..8), true).map_err(|e| e.to_string())?;
            worst_full = worst_full.max(max_diff(wide.data(), &brute_window(&x, &w, heads, usize::MAX)));
        }
    }
    ensure(worst < 1e-10, || format!("windowed max |diff| {worst:e}"))?;
    ensure(worst_full < 1e-10, || format!("w ≥ S vs causal max |diff| {worst_full:e}"))?;
    Ok(format!("{cases} random (S ≤ 128, w, d), max |diff| {worst:.1e}; w ≥ S vs causal {worst_full:.1e}"))
}

/// 3. Finite differences through tokenizer, two blocks, head and masked loss.
fn gradient_check() -> Check {
    let opts = objective::pipeline_gradcheck_options(250, 1e-5, 0);
    let report = objective::pipeline_gradcheck([2, 2, 4, 8], 2, &opts).map_err(|e| e.to_string())?;
    ensure(report.checked.len() >= 200, || format!("only {} coordinates", report.checked.len()))?;
    ensure(report.passed() && report.max_rel_error < 1e-5, || format!("max relative error {:e}", report.max_rel_error))?;
    Ok(format!("[2,2,4,8] heads 2, {} coordinates, max rel error {:.1e}", report.checked.len(), report.max_rel_error))
}

/// 4. Exact mask counts, and zero gradient wherever nothing is masked.
fn mask_semantics() -> Check {
    let mut rng = ChaCha8Rng::seed_from_u64(4);
    for _ in 0..1000 {
        let j = rng.random_range(1..=2000);
        let ratio: f64 = rng.random();
        let plan = sample_mask(j, ratio, rng.random()).map_err(|e| e.to_string())?;
        let want = (ratio * j as f64).floor() as usize;
        let got = plan.flags.iter().filter(|&&f| f).count();
        ensure(got == want, || format!("J={j} ratio={ratio}: popcount {got} != {want}"))?;
    }
    // Through the whole model: gradient of the loss with respect to the head output.
    let cfg = ModelConfig { t_norm: 20, areas: 4, c_norm: 6, d_model: 16, d_text: 8, interval: 5, n_layers: 2, n_heads: 2, window: 3, d_ff: 32, rec_hidden: 16, ..ModelConfig::default() };
    let params = objective::init_model(&cfg, 9);
    let mut nonzero_masked = 0;
    for trial in 0..20 {
        let x = DenseArray::new(&[20, 4, 6], (0..480).map(|_| rng.random_range(0..5) as f64).collect()).unwrap();
        let meta = random(&[8], &mut rng, 1.0);
        let plan = sample_mask(cfg.tokens(), rng.random_range(0.05..0.95), trial).map_err(|e| e.to_string())?;
        if plan.masked_count() == 0 {
            continue;
        }
        let tape = Tape::new(Mode::Train { seed: trial });
        let bound = params.bind(&tape);
        let tt = tokenize_on_tape(&bound, &x, &meta, cfg.interval).map_err(|e| e.to_string())?;
        let value = tt.tokens.value().clone();
        let target = tape.constant(value);
        let h = encoder::encode(apply_mask_var(tt.tokens, &plan).unwrap(), &bound, &EncoderConfig::from_model(&cfg)).unwrap();
        let pred = recon_head(h, &bound).unwrap();
        let loss = masked_loss(pred, target, &plan).unwrap();
        let g = tape.backward(loss).map_err(|e| e.to_string())?.wrt(pred);
        for (tok, &masked) in plan.flags.iter().enumerate() {
            let row = &g.data()[tok * cfg.d_model..(tok + 1) * cfg.d_model];
            if masked {
                nonzero_masked += row.iter().any(|&v| v != 0.0) as usize;
            } else {
                ensure(row.iter().all(|&v| v == 0.0), || format!("trial {trial}: unmasked token {tok} has gradient"))?;
            }
        }
    }
    ensure(nonzero_masked > 0, || "masked positions carry no gradient".into())?;
    Ok("1000 (J, ratio) pairs exact; unmasked prediction gradients exactly 0 over 20 model runs".into())
}

/// 5. Masked-reconstruction loss at least halves in 10 epochs at the default architecture.
fn descent() -> Check {
    let corpus = spike_io::gen_center_out(&CenterOutParams { n_trials: 256, n_units: 70, t_raw: 1000, seed: 5, ..Default::default() })
        .map_err(|e| e.to_string())?;
    let mut run = RunConfig::default();
    run.train.batch_size = 16;
    run.train.epochs = 10;
    let emb = StubEmbedder { d_text: run.model.d_text };
    let out = objective::pretrain(&corpus, &run, &emb, |e, l| eprintln!("  descent epoch {e}: {l:.3}")).map_err(|e| e.to_string())?;
    let (first, last) = (out.loss_curve[0], out.loss_curve[9]);
    ensure(last <= 0.5 * first, || format!("epoch 10 loss {last:.3} > 0.5 × epoch 1 loss {first:.3}"))?;
    Ok(format!("epoch 1 {first:.2} → epoch 10 {last:.2} (ratio {:.3})", last / first))
}

fn compact(run: &mut RunConfig) {
    run.model.d_model = 32;
    run.model.n_layers = 2;
    run.model.n_heads = 4;
    run.model.d_ff = 128;
}

fn accuracy(outputs: &[Vec<f64>], corpus: &[SpikeRecording]) -> f64 {
    let hits = outputs.iter().zip(corpus).filter(|(o, r)| downstream::argmax(o) as u32 == r.class().unwrap()).count();
    hits as f64 / corpus.len() as f64
}

/// 6. Tiny-overfit and held-out fine-tuning on center-out data.
fn finetuning() -> Check {
    let mut run = RunConfig::default();
    compact(&mut run);
    let emb = StubEmbedder { d_text: run.model.d_text };

    let small = spike_io::gen_center_out(&CenterOutParams { n_trials: 32, seed: 61, ..Default::default() }).map_err(|e| e.to_string())?;
    run.finetune.epochs = 200;
    let task = TaskSpec::infer(&small, &run.model, run.finetune.head_hidden, HeadInput::Flatten).map_err(|e| e.to_string())?;
    let out = downstream::finetune(None, &small, &task, &run, &emb, |_, _| {}).map_err(|e| e.to_string())?;
    let pred = downstream::predict(&out.params, &run.model, &task, &small, &emb).map_err(|e| e.to_string())?;
    let MetricReport::Classification { balanced_accuracy: train_ba, .. } = downstream::evaluate(&pred, &small, &task).map_err(|e| e.to_string())? else {
        return Err("expected a classification report".into());
    };

    let corpus = spike_io::gen_center_out(&CenterOutParams { n_trials: 320, seed: 62, ..Default::default() }).map_err(|e| e.to_string())?;
    let (train, test) = spike_io::split(&corpus, &SplitSpec::new(SplitMode::MultiDay, 0)).map_err(|e| e.to_string())?;
    ensure(train.len() == 256 && test.len() == 64, || format!("split {}/{}", train.len(), test.len()))?;
    run.finetune.epochs = 30;
    run.finetune.head_hidden = 16;
    run.finetune.head_input = HeadInput::MeanT;
    let task = TaskSpec::infer(&train, &run.model, run.finetune.head_hidden, HeadInput::MeanT).map_err(|e| e.to_string())?;
    let out = downstream::finetune(None, &train, &task, &run, &emb, |_, _| {}).map_err(|e| e.to_string())?;
    let pred = downstream::predict(&out.params, &run.model, &task, &test, &emb).map_err(|e| e.to_string())?;
    let held_out = accuracy(&pred, &test);

    ensure(train_ba >= 0.95, || format!("tiny-overfit train balanced accuracy {train_ba:.3} < 0.95"))?;
    ensure(held_out >= 0.60, || format!("held-out accuracy {held_out:.3} < 0.60"))?;
    Ok(format!("32-trial overfit train B-Acc {train_ba:.3}; 256/64 held-out accuracy {held_out:.3}"))
}

/// 7. Log-log slopes of kernel time.
fn complexity() -> Check {
    let mut parts = Vec::new();
    for (c, axis, lo, hi) in [(Component::Ila, "t", 0.7, 1.3), (Component::FullAttn, "t", 1.6, f64::INFINITY), (Component::Aswa, "S", 0.7, 1.3)] {
        let grid = bench_diag::default_grid(c, axis).map_err(|e| e.to_string())?;
        let sweep = bench_diag::sweep(c, axis, &grid, 31, 5, 3).map_err(|e| e.to_string())?;
        ensure(sweep.slope >= lo && sweep.slope <= hi, || format!("{c} slope {:.3} outside [{lo}, {hi}]", sweep.slope))?;
        parts.push(format!("{c} {:.2}", sweep.slope));
    }
    Ok(format!("slopes: {}", parts.join(", ")))
}

/// 8. Binning and grouping keep every mapped spike.
fn conservation() -> Check {
    let mut rng = ChaCha8Rng::seed_from_u64(8);
    let cfg = NormConfig::default();
    let meta = MetadataRecord::new("s", "d", "x", "r", "t", "1");
    for case in 0..1000 {
        let c_raw = [7, 70, 256, 300][case % 4];
        let t_raw = rng.random_range(cfg.t_norm..=1500);
        let counts: Vec<u32> = (0..t_raw * c_raw).map(|_| if rng.random_bool(0.3) { rng.random_range(0..20) } else { 0 }).collect();
        let rec = SpikeRecording::new(t_raw, c_raw, counts, 100.0, meta.clone(), None).unwrap();
        // Contiguous blocks, first blocks one larger; each keeps at most c_norm channels.
        let mut want = 0u64;
        let mut start = 0;
        for a in 0..cfg.areas {
            let size = c_raw / cfg.areas + usize::from(a < c_raw % cfg.areas);
            for c in start..start + size.min(cfg.c_norm) {
                want += (0..t_raw).map(|t| rec.count(t, c) as u64).sum::<u64>();
            }
            start += size;
        }
        let norm = normalize(&rec, &cfg).map_err(|e| e.to_string())?;
        let values: f64 = norm.values().data().iter().sum();
        ensure(norm.total() == want && values == want as f64, || {
            format!("C_raw={c_raw} T_raw={t_raw}: normalized {} / {values} vs mapped {want}", norm.total())
        })?;
        if c_raw <= cfg.areas * cfg.c_norm {
            ensure(want == rec.total_count(), || format!("C_raw={c_raw}: padding lost spikes"))?;
        }
    }
    Ok("1000 recordings, C_raw ∈ {7, 70, 256, 300}: totals equal".into())
}

fn brute_ba(t: &[usize], p: &[usize]) -> f64 {
    let mut classes: Vec<usize> = t.to_vec();
    classes.sort_unstable();
    classes.dedup();
    let recall_sum: f64 = classes
        .iter()
        .map(|&c| {
            let hit = t.iter().zip(p).filter(|&(&a, &b)| a == c && b == c).count();
            hit as f64 / t.iter().filter(|&&a| a == c).count() as f64
        })
        .sum();
    recall_sum / classes.len() as f64
}

fn brute_f1(t: &[usize], p: &[usize]) -> (f64, f64) {
    let mut classes: Vec<usize> = t.to_vec();
    classes.sort_unstable();
    classes.dedup();
    let (mut exact, mut via_pr) = (0.0, 0.0);
    for &c in &classes {
        let tp = t.iter().zip(p).filter(|&(&a, &b)| a == c && b == c).count() as f64;
        let sup = t.iter().filter(|&&a| a == c).count() as f64;
        let pred = p.iter().filter(|&&b| b == c).count() as f64;
        let f1 = if tp == 0.0 { 0.0 } else { 2.0 * tp / (sup + pred) };
        exact += f1 * sup / t.len() as f64;
        let (prec, rec) = (if pred > 0.0 { tp / pred } else { 0.0 }, tp / sup);
        let f1_pr = if prec + rec == 0.0 { 0.0 } else { 2.0 * prec * rec / (prec + rec) };
        via_pr += f1_pr * sup / t.len() as f64;
    }
    (exact, via_pr)
}

fn brute_r2(t: &[f64], p: &[f64], dims: usize) -> f64 {
    let n = t.len() / dims;
    let mut total = 0.0;
    for k in 0..dims {
        let mut mean = 0.0;
        for i in 0..n {
            mean += t[i * dims + k];
        }
        mean /= n as f64;
        let (mut ss_tot, mut ss_res) = (0.0, 0.0);
        for i in 0..n {
            ss_tot += (t[i * dims + k] - mean).powi(2);
            ss_res += (t[i * dims + k] - p[i * dims + k]).powi(2);
        }
        total += 1.0 - ss_res / ss_tot;
    }
    total / dims as f64
}

/// 9. Metric implementations against brute force, plus the hand examples.
fn metric_oracles() -> Check {
    let mut rng = ChaCha8Rng::seed_from_u64(9);
    let mut pr_gap = 0.0f64;
    for case in 0..1000 {
        let n = rng.random_range(1..200);
        let k = rng.random_range(2..10);
        let t: Vec<usize> = (0..n).map(|_| rng.random_range(0..k)).collect();
        let p: Vec<usize> = (0..n).map(|_| rng.random_range(0..k)).collect();
        let ba = downstream::balanced_accuracy(&t, &p).map_err(|e| e.to_string())?;
        let f1 = downstream::weighted_f1(&t, &p).map_err(|e| e.to_string())?;
        let (f1_want, f1_pr) = brute_f1(&t, &p);
        ensure(ba == brute_ba(&t, &p), || format!("case {case}: balanced accuracy {ba} != {}", brute_ba(&t, &p)))?;
        ensure(f1 == f1_want, || format!("case {case}: weighted F1 {f1} != {f1_want}"))?;
        pr_gap = pr_gap.max((f1 - f1_pr).abs());

        let dims = rng.random_range(1..4);
        let rows = rng.random_range(2..60);
        let yt: Vec<f64> = (0..rows * dims).map(|_| rng.random::<f64>() * 10.0 - 5.0).collect();
        let yp: Vec<f64> = yt.iter().map(|y| y + rng.random::<f64>() - 0.5).collect();
        let r2 = downstream::r_squared(&yt, &yp, dims).map_err(|e| e.to_string())?;
        ensure(r2 == brute_r2(&yt, &yp, dims), || format!("case {case}: R² {r2} != {}", brute_r2(&yt, &yp, dims)))?;
    }
    ensure(pr_gap < 1e-12, || format!("F1 disagrees with the precision/recall form by {pr_gap:e}"))?;
    let ba = downstream::balanced_accuracy(&[0, 0, 1], &[0, 1, 1]).unwrap();
    let f1 = downstream::weighted_f1(&[0, 0, 1, 1], &[0, 0, 0, 1]).unwrap();
    let r2 = downstream::r_squared(&[0.0, 1.0, 2.0], &[0.0, 1.0, 1.0], 1).unwrap();
    ensure(ba.to_bits() == 0.75f64.to_bits(), || format!("hand balanced accuracy {ba}"))?;
    ensure(f1.to_bits() == (0.5 * 0.8 + 0.5 * (2.0 / 3.0f64)).to_bits(), || format!("hand weighted F1 {f1}"))?;
    ensure(r2.to_bits() == 0.5f64.to_bits(), || format!("hand R² {r2}"))?;
    Ok("1000 random cases exact; hand examples 0.75 / 0.7333… / 0.5 bit-for-bit".into())
}

/// 10. Covariance spread with and without metadata.
fn expansion() -> Check {
    let run = RunConfig::default();
    let params = objective::init_model(&run.model, 10);
    let emb = StubEmbedder { d_text: run.model.d_text };
    let eps = 1e-6;
    let multi = spike_io::gen_center_out(&CenterOutParams { n_trials: 32, n_sessions: 8, seed: 10, ..Default::default() })
        .map_err(|e| e.to_string())?;
    let sources: std::collections::HashSet<_> = multi.iter().map(|r| r.meta.clone()).collect();
    ensure(sources.len() == 8, || format!("{} distinct metadata records", sources.len()))?;
    let rep = bench_diag::expansion_diag(&multi, &params, &run.model, &emb, eps).map_err(|e| e.to_string())?;
    ensure(rep.logdet_joint >= rep.logdet_spike, || format!("logdet joint {} < spike {}", rep.logdet_joint, rep.logdet_spike))?;

    let same: Vec<SpikeRecording> = multi.iter().cloned().map(|mut r| {
        r.meta = multi[0].meta.clone();
        r
    }).collect();
    let flat = bench_diag::expansion_diag(&same, &params, &run.model, &emb, eps).map_err(|e| e.to_string())?;
    let (s, j) = bench_diag::token_samples(&same, &params, &run.model, &emb).map_err(|e| e.to_string())?;
    let delta = max_diff(&bench_diag::covariance(&s), &bench_diag::covariance(&j));
    let bound = bench_diag::logdet_perturbation_bound(run.model.d_model, delta, eps);
    let gap = (flat.logdet_joint - flat.logdet_spike).abs();
    ensure(gap <= bound, || format!("identical metadata: |Δ logdet| {gap:e} > bound {bound:e}"))?;
    Ok(format!(
        "8 sources: logdet joint {:.2} ≥ spike {:.2}; identical metadata |Δ| {gap:.1e} ≤ bound {bound:.1e}",
        rep.logdet_joint, rep.logdet_spike
    ))
}

/// 11. Two identical pretraining runs agree bit for bit.
fn determinism() -> Check {
    let corpus = spike_io::gen_center_out(&CenterOutParams { n_trials: 24, seed: 11, ..Default::default() }).map_err(|e| e.to_string())?;
    let mut run = RunConfig::default();
    run.train.epochs = 2;
    run.train.batch_size = 8;
    run.seed = 1234;
    let emb = StubEmbedder { d_text: run.model.d_text };
    let dir = tempfile::tempdir().map_err(|e| e.to_string())?;
    let mut files = Vec::new();
    let mut curves = Vec::new();
    for i in 0..2 {
        let out = objective::pretrain(&corpus, &run, &emb, |_, _| {}).map_err(|e| e.to_string())?;
        let path = dir.path().join(format!("run{i}.ckpt"));
        objective::write_checkpoint(&path, &CheckpointMeta { model: run.model.clone(), task: None }, &out.params).map_err(|e| e.to_string())?;
        files.push(std::fs::read(&path).map_err(|e| e.to_string())?);
        curves.push(out.loss_curve.iter().map(|l| l.to_bits()).collect::<Vec<_>>());
    }
    ensure(files[0] == files[1], || "checkpoints differ".into())?;
    ensure(curves[0] == curves[1], || "loss curves differ".into())?;
    Ok(format!("2 runs: {}-byte checkpoints and {}-epoch loss curves identical", files[0].len(), curves[0].len()))
}

fn random_text(rng: &mut ChaCha8Rng) -> String {
    const ALPHABET: &[char] = &['a', 'Z', '7', ' ', '-', '"', '\\', 'é', '猴', '\u{1F9E0}', '\n'];
    let n = rng.random_range(1..12);
    (0..n).map(|_| ALPHABET[rng.random_range(0..ALPHABET.len())]).collect()
}

/// 12. Container round trips and error classes.
fn format_round_trip() -> Check {
    let mut rng = ChaCha8Rng::seed_from_u64(12);
    let dir = tempfile::tempdir().map_err(|e| e.to_string())?;
    let mut samples = Vec::new();
    for i in 0..1000 {
        let (t_raw, c_raw) = (rng.random_range(1..40), rng.random_range(1..40));
        let counts: Vec<u32> = (0..t_raw * c_raw).map(|_| if rng.random_bool(0.1) { rng.random() } else { rng.random_range(0..9) }).collect();
        let meta = MetadataRecord {
            species: random_text(&mut rng),
            dataset: random_text(&mut rng),
            subject: random_text(&mut rng),
            region: random_text(&mut rng),
            task: random_text(&mut rng),
            session: random_text(&mut rng),
        };
        let label = match i % 3 {
            0 => None,
            1 => Some(Label::Class(rng.random())),
            _ => {
                let dims = rng.random_range(1..4);
                Some(Label::Sequence { dims, values: (0..t_raw * dims).map(|_| rng.random::<f64>() * 1e6 - 5e5).collect() })
            }
        };
        let rec = SpikeRecording::new(t_raw, c_raw, counts, rng.random_range(1.0..40_000.0), meta, label).map_err(|e| e.to_string())?;
        let path = dir.path().join(format!("{i}.spkt"));
        spike_io::write_container(&rec, &path).map_err(|e| e.to_string())?;
        let back = spike_io::read_container(&path).map_err(|e| e.to_string())?;
        let bytes = std::fs::read(&path).map_err(|e| e.to_string())?;
        ensure(back == rec, || format!("recording {i} changed"))?;
        ensure(spike_io::encode(&back).map_err(|e| e.to_string())? == bytes, || format!("recording {i} re-encodes differently"))?;
        if i < 20 {
            samples.push(bytes);
        }
    }
    for bytes in &samples {
        let mut bad = bytes.clone();
        bad[3] = b'X';
        ensure(matches!(spike_io::decode(&bad), Err(Error::Format(_))), || "bad magic not a format error".into())?;
        let mut v2 = bytes.clone();
        v2[4] = 2;
        ensure(matches!(spike_io::decode(&v2), Err(Error::Version(2))), || "version 2 not a version error".into())?;
        for cut in 4..bytes.len() {
            ensure(matches!(spike_io::decode(&bytes[..cut]), Err(Error::Length { .. })), || format!("truncation at {cut} not a length error"))?;
        }
    }
    Ok("1000 recordings byte-exact; bad magic → format error, every truncation → length error".into())
}

struct Criterion {
    id: usize,
    name: &'static str,
    budget_s: f64,
    run: fn() -> Check,
}

fn main() -> ExitCode {
    let criteria = [
        Criterion { id: 1, name: "associativity oracle", budget_s: 10.0, run: associativity },
        Criterion { id: 2, name: "window oracle", budget_s: 30.0, run: window_oracle },
        Criterion { id: 3, name: "gradient check", budget_s: 60.0, run: gradient_check },
        Criterion { id: 4, name: "mask semantics", budget_s: f64::INFINITY, run: mask_semantics },
        Criterion { id: 5, name: "descent", budget_s: 600.0, run: descent },
        Criterion { id: 6, name: "fine-tuning", budget_s: 900.0, run: finetuning },
        Criterion { id: 7, name: "complexity slopes", budget_s: 300.0, run: complexity },
        Criterion { id: 8, name: "normalization conservation", budget_s: f64::INFINITY, run: conservation },
        Criterion { id: 9, name: "metric oracles", budget_s: f64::INFINITY, run: metric_oracles },
        Criterion { id: 10, name: "expansion diagnostic", budget_s: f64::INFINITY, run: expansion },
        Criterion { id: 11, name: "determinism", budget_s: f64::INFINITY, run: determinism },
        Criterion { id: 12, name: "format round-trip", budget_s: f64::INFINITY, run: format_round_trip },
    ];
    let only: Option<Vec<usize>> =
        std::env::var("ACCEPT_ONLY").ok().map(|v| v.split(',').filter_map(|s| s.trim().parse().ok()).collect());
    let mut failed = 0;
    for c in &criteria {
        if only.as_ref().is_some_and(|o| !o.contains(&c.id)) {
            continue;
        }
        let t0 = Instant::now();
        let result = (c.run)();
        let secs = t0.elapsed().as_secs_f64();
        let (ok, detail) = match result {
            Ok(d) if secs <= c.budget_s => (true, d),
            Ok(d) => (false, format!("{d}; over the {:.0} s budget", c.budget_s)),
            Err(e) => (false, e),
        };
        failed += usize::from(!ok);
        let budget = if c.budget_s.is_finite() { format!(" / {:.0} s", c.budget_s) } else { String::new() };
        println!("criterion {:>2} {} {}: {detail} ({secs:.1} s{budget})", c.id, if ok { "PASS" } else { "FAIL" }, c.name);
    }
    if failed > 0 {
        println!("{failed} criteria failed");
        ExitCode::FAILURE
    } else {
        println!("all criteria passed");
        ExitCode::SUCCESS
    }
}
