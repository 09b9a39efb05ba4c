use spikefm::normalize::{bin_edges, bin_sequence, bin_temporal};
use spikefm::spike_io::{gen_center_out, gen_kinematics, CenterOutParams, KinematicsParams, Label, MetadataRecord};
use spikefm::tokenizer::{render_template, ContextEmbedder, StubEmbedder};

/// Solves `(XᵀX + λI) β = Xᵀy` for every column of `y` by Gaussian elimination.
fn ridge(x: &[Vec<f64>], y: &[Vec<f64>], lambda: f64) -> Vec<Vec<f64>> {
    let (p, k) = (x[0].len(), y[0].len());
    let mut a = vec![vec![0.0; p + k]; p];
    for (row, target) in x.iter().zip(y) {
        for i in 0..p {
            for j in 0..p {
                a[i][j] += row[i] * row[j];
            }
            for j in 0..k {
                a[i][p + j] += row[i] * target[j];
            }
        }
    }
    for (i, r) in a.iter_mut().enumerate() {
        r[i] += lambda;
    }
    for col in 0..p {
        let pivot = (col..p).max_by(|&i, &j| a[i][col].abs().total_cmp(&a[j][col].abs())).unwrap();
        a.swap(col, pivot);
        for r in 0..p {
            if r != col {
                let f = a[r][col] / a[col][col];
                let pivot_row = a[col].clone();
                a[r].iter_mut().zip(&pivot_row).for_each(|(v, q)| *v -= f * q);
            }
        }
    }
    (0..p).map(|i| (0..k).map(|j| a[i][p + j] / a[i][i]).collect()).collect()
}

fn apply(beta: &[Vec<f64>], row: &[f64]) -> Vec<f64> {
    (0..beta[0].len()).map(|j| row.iter().zip(beta).map(|(x, b)| x * b[j]).sum()).collect()
}

#[test]
fn poisson_counts_have_unit_dispersion() {
    let p = CenterOutParams { n_trials: 20, n_units: 70, t_raw: 100, base_rate: 100.0, mod_depth: 0.0, sample_rate_hz: 100.0, ..Default::default() };
    let counts: Vec<f64> = gen_center_out(&p).unwrap().iter().flat_map(|r| r.counts.iter().map(|&c| c as f64)).collect();
    assert!(counts.len() >= 100_000);
    let n = counts.len() as f64;
    let mean = counts.iter().sum::<f64>() / n;
    let var = counts.iter().map(|c| (c - mean).powi(2)).sum::<f64>() / (n - 1.0);
    assert!((mean - 1.0).abs() < 3.0 * (1.0 / n).sqrt(), "mean {mean}");
    assert!((0.9..=1.1).contains(&(var / mean)), "dispersion {}", var / mean);
}

#[test]
fn untuned_classes_share_statistics() {
    let p = CenterOutParams { n_trials: 16, n_units: 10, t_raw: 1000, mod_depth: 0.0, ..Default::default() };
    let corpus = gen_center_out(&p).unwrap();
    let rate = p.base_rate / p.sample_rate_hz;
    for class in [0, 3] {
        let counts: Vec<f64> =
            corpus.iter().filter(|r| r.class() == Some(class)).flat_map(|r| r.counts.iter().map(|&c| c as f64)).collect();
        let n = counts.len() as f64;
        let mean = counts.iter().sum::<f64>() / n;
        assert!((mean - rate).abs() < 3.0 * (rate / n).sqrt(), "class {class}: mean {mean}");
    }
}

#[test]
fn kinematics_are_ridge_decodable() {
    let corpus = gen_kinematics(&KinematicsParams { n_trials: 200, seed: 3, ..Default::default() }).unwrap();
    let t_norm = 100;
    let (mut x, mut y) = (Vec::new(), Vec::new());
    for rec in &corpus {
        let b = bin_temporal(rec, t_norm).unwrap();
        let Some(Label::Sequence { dims, values }) = &rec.label else { panic!("unlabelled trial") };
        let v = bin_sequence(values, *dims, &bin_edges(rec.t_raw, t_norm).unwrap());
        for t in 0..t_norm {
            let mut row: Vec<f64> = b.counts[t * rec.c_raw..(t + 1) * rec.c_raw].iter().map(|&c| c as f64).collect();
            row.push(1.0);
            x.push(row);
            y.push(v[t * dims..(t + 1) * dims].to_vec());
        }
    }
    let cut = 160 * t_norm;
    let beta = ridge(&x[..cut], &y[..cut], 1.0);
    let pred: Vec<f64> = x[cut..].iter().flat_map(|r| apply(&beta, r)).collect();
    let truth: Vec<f64> = y[cut..].concat();
    let r2 = spikefm::downstream::r_squared(&truth, &pred, 2).unwrap();
    assert!(r2 > 0.3, "ridge R² {r2}");
}

#[test]
fn center_out_is_decodable_by_class_means() {
    let corpus = gen_center_out(&CenterOutParams { n_trials: 320, seed: 4, ..Default::default() }).unwrap();
    let features = |r: &spikefm::spike_io::SpikeRecording| -> Vec<f64> {
        (0..r.c_raw).map(|c| (0..r.t_raw).map(|t| r.count(t, c) as f64).sum::<f64>() / 100.0).collect()
    };
    let mut means = vec![vec![0.0; 70]; 8];
    for r in &corpus[..256] {
        let k = r.class().unwrap() as usize;
        means[k].iter_mut().zip(features(r)).for_each(|(m, v)| *m += v / 32.0);
    }
    let hits = corpus[256..]
        .iter()
        .filter(|r| {
            let x = features(r);
            let score: Vec<f64> = means.iter().map(|m| -m.iter().zip(&x).map(|(a, b)| (a - b).powi(2)).sum::<f64>()).collect();
            spikefm::downstream::argmax(&score) as u32 == r.class().unwrap()
        })
        .count();
    assert!(hits as f64 / 64.0 > 0.9, "nearest-mean accuracy {}", hits as f64 / 64.0);
}

#[test]
fn stub_vectors_are_spread_out() {
    let emb = StubEmbedder::default();
    let vecs: Vec<Vec<f64>> = (0..120)
        .map(|i| {
            let m = MetadataRecord::new("macaque", &format!("set-{}", i % 7), &format!("monkey {i}"), "M1", "reach", "day-01");
            emb.embed(&render_template(&m).unwrap()).unwrap()
        })
        .collect();
    let (mut pairs, mut close) = (0, 0);
    for i in 0..vecs.len() {
        for j in i + 1..vecs.len() {
            let cos: f64 = vecs[i].iter().zip(&vecs[j]).map(|(a, b)| a * b).sum();
            pairs += 1;
            close += usize::from(cos.abs() >= 0.5);
        }
    }
    assert!(close as f64 <= 0.01 * pairs as f64, "{close} of {pairs} pairs have |cos| ≥ 0.5");
}

