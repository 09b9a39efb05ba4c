//! Task heads, fine-tuning and evaluation metrics.

use std::collections::BTreeMap;

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::config::{HeadInput, ModelConfig, RunConfig};
use crate::encoder::{self, EncoderConfig};
use crate::error::{dim_err, Error, Result};
use crate::normalize::{bin_edges, bin_sequence};
use crate::numerics::{precision, set_precision, Bound, DenseArray, Mode, ParamStore, Tape, Var};
use crate::objective::{accumulate, adamw_step, cosine_lr, init_model, mix_seed, prepare, AdamW, OptimState, PreparedTrial};
use crate::spike_io::{Label, SpikeRecording};
use crate::tokenizer::{tokenize_on_tape, ContextEmbedder};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum TaskKind {
    Classification { n_classes: usize },
    /// `dims` outputs at each of `horizon` normalized time bins.
    Regression { dims: usize, horizon: usize },
}

impl TaskKind {
    pub fn output_dim(&self) -> usize {
        match *self {
            TaskKind::Classification { n_classes } => n_classes,
            TaskKind::Regression { dims, horizon } => dims * horizon,
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct TaskSpec {
    pub kind: TaskKind,
    pub head_hidden: usize,
    pub head_input: HeadInput,
}

impl TaskSpec {
    /// Infers the task from the corpus labels.
    pub fn infer(corpus: &[SpikeRecording], model: &ModelConfig, head_hidden: usize, head_input: HeadInput) -> Result<Self> {
        let kind = match corpus.first().and_then(|r| r.label.as_ref()) {
            Some(Label::Class(_)) => {
                let mut max = 0;
                for r in corpus {
                    match r.class() {
                        Some(c) => max = max.max(c),
                        None => return Err(Error::Validation("mixed or missing class labels".into())),
                    }
                }
                TaskKind::Classification { n_classes: max as usize + 1 }
            }
            Some(Label::Sequence { dims, .. }) => TaskKind::Regression { dims: *dims, horizon: model.t_norm },
            None => return Err(Error::Validation("corpus has no labels".into())),
        };
        Ok(TaskSpec { kind, head_hidden, head_input })
    }

    pub fn input_dim(&self, m: &ModelConfig) -> usize {
        match self.head_input {
            HeadInput::Flatten => m.t_norm * m.areas * m.d_model,
            HeadInput::MeanT => m.n_intervals() * m.areas * m.d_model,
        }
    }
}

pub const HEAD_W1: &str = "head.w1";
pub const HEAD_B1: &str = "head.b1";
pub const HEAD_W2: &str = "head.w2";
pub const HEAD_B2: &str = "head.b2";

pub fn init_head(task: &TaskSpec, m: &ModelConfig, store: &mut ParamStore, rng: &mut ChaCha8Rng) {
    let (i, h, o) = (task.input_dim(m), task.head_hidden, task.kind.output_dim());
    store.init_normal(HEAD_W1, &[i, h], 1.0 / (i as f64).sqrt(), rng);
    store.insert(HEAD_B1, DenseArray::zeros(&[h]));
    store.init_normal(HEAD_W2, &[h, o], 1.0 / (h as f64).sqrt(), rng);
    store.insert(HEAD_B2, DenseArray::zeros(&[o]));
}

/// Head output `[1, output_dim]` for one encoded trial `[N, A, t, d]`.
pub fn task_head<'t>(encoded: Var<'t>, task: &TaskSpec, bound: &Bound<'t>) -> Result<Var<'t>> {
    let x = match task.head_input {
        HeadInput::Flatten => encoded,
        HeadInput::MeanT => encoded.avgpool(2)?,
    };
    let n = x.value().len();
    x.reshape(&[1, n])?
        .matmul(bound.get(HEAD_W1)?)?
        .add(bound.get(HEAD_B1)?)?
        .gelu()?
        .matmul(bound.get(HEAD_W2)?)?
        .add(bound.get(HEAD_B2)?)
}

/// Supervision for one trial.
#[derive(Clone, Debug, PartialEq)]
pub enum Target {
    Class(usize),
    /// Binned to the head's horizon, `[horizon × dims]`.
    Sequence(Vec<f64>),
}

pub fn targets(corpus: &[SpikeRecording], task: &TaskSpec) -> Result<Vec<Target>> {
    corpus
        .iter()
        .map(|r| match (&task.kind, &r.label) {
            (TaskKind::Classification { n_classes }, Some(Label::Class(c))) if (*c as usize) < *n_classes => {
                Ok(Target::Class(*c as usize))
            }
            (TaskKind::Regression { dims, horizon }, Some(Label::Sequence { dims: d, values })) if d == dims => {
                Ok(Target::Sequence(bin_sequence(values, *dims, &bin_edges(r.t_raw, *horizon)?)))
            }
            _ => Err(Error::Validation(format!("label {:?} does not fit task {:?}", r.label, task.kind))),
        })
        .collect()
}

pub fn head_output<'t>(
    bound: &Bound<'t>,
    trial: &PreparedTrial,
    model: &ModelConfig,
    task: &TaskSpec,
) -> Result<Var<'t>> {
    let tt = tokenize_on_tape(bound, &trial.x, &trial.meta, model.interval)?;
    let h = encoder::encode(tt.tokens, bound, &EncoderConfig::from_model(model))?;
    task_head(h, task, bound)
}

/// Cross-entropy for a class target, mean squared error for a sequence.
pub fn task_loss<'t>(tape: &'t Tape, out: Var<'t>, target: &Target) -> Result<Var<'t>> {
    match target {
        Target::Class(c) => out.log_softmax()?.gather(&[*c])?.sum()?.scale(-1.0),
        Target::Sequence(v) => {
            if v.len() != out.value().len() {
                return dim_err(format!("target of {} values for {} outputs", v.len(), out.value().len()));
            }
            let y = tape.constant(DenseArray::new(&[1, v.len()], v.clone())?);
            let diff = out.sub(y)?;
            diff.mul(diff)?.sum()?.scale(1.0 / v.len() as f64)
        }
    }
}

#[derive(Clone, Debug)]
pub struct FinetuneOutput {
    pub params: ParamStore,
    pub task: TaskSpec,
    pub loss_curve: Vec<f64>,
}

/// Trains a fresh head together with every encoder and tokenizer weight.
/// `pretrained = None` starts the backbone from random initialization.
pub fn finetune(
    pretrained: Option<&ParamStore>,
    corpus: &[SpikeRecording],
    task: &TaskSpec,
    run: &RunConfig,
    embedder: &dyn ContextEmbedder,
    mut on_epoch: impl FnMut(usize, f64),
) -> Result<FinetuneOutput> {
    run.validate()?;
    if corpus.is_empty() {
        return Err(Error::Validation("fine-tuning corpus is empty".into()));
    }
    let (m, ft) = (&run.model, &run.finetune);
    crate::numerics::tune_allocator();
    let prev = precision();
    set_precision(run.dtype);
    let result = (|| {
        let mut params = match pretrained {
            Some(p) => p.clone(),
            None => init_model(m, run.seed),
        };
        params.remove_prefix("rec.");
        params.remove_prefix("head.");
        let mut rng = ChaCha8Rng::seed_from_u64(mix_seed(&[run.seed, 3]));
        init_head(task, m, &mut params, &mut rng);
        let trials = prepare(corpus, m, embedder)?;
        let ys = targets(corpus, task)?;
        let mut state = OptimState::new(&params);
        let hp = AdamW { weight_decay: ft.weight_decay, ..AdamW::from_train(&run.train) };
        let mut order: Vec<usize> = (0..trials.len()).collect();
        let mut curve = Vec::with_capacity(ft.epochs);
        for epoch in 0..ft.epochs {
            let lr = cosine_lr(epoch, ft.epochs, ft.lr, ft.lr_min);
            order.shuffle(&mut ChaCha8Rng::seed_from_u64(mix_seed(&[run.seed, 4, epoch as u64])));
            let mut total = 0.0;
            for batch in order.chunks(ft.batch_size) {
                let (loss, mut grads) = accumulate(&params, batch, run.threads, |p, &i| {
                    let tape = Tape::new(Mode::Train { seed: mix_seed(&[run.seed, 5, epoch as u64, i as u64]) });
                    let bound = p.bind(&tape);
                    let out = head_output(&bound, &trials[i], m, task)?;
                    let loss = task_loss(&tape, out, &ys[i])?;
                    let l = loss.item();
                    let g = tape.backward(loss)?;
                    Ok((l, bound.collect(&g)))
                })?;
                if !loss.is_finite() {
                    return Err(Error::NumericContract(format!("non-finite loss in epoch {}", epoch + 1)));
                }
                total += loss;
                grads.iter_mut().for_each(|(_, g)| g.data_mut().iter_mut().for_each(|x| *x /= batch.len() as f64));
                adamw_step(&mut params, &grads, &mut state, &hp, lr)?;
            }
            let mean = total / trials.len() as f64;
            curve.push(mean);
            on_epoch(epoch + 1, mean);
        }
        Ok(FinetuneOutput { params, task: *task, loss_curve: curve })
    })();
    set_precision(prev);
    result
}

/// Eval-mode head outputs, one row per trial.
pub fn predict(
    params: &ParamStore,
    model: &ModelConfig,
    task: &TaskSpec,
    corpus: &[SpikeRecording],
    embedder: &dyn ContextEmbedder,
) -> Result<Vec<Vec<f64>>> {
    prepare(corpus, model, embedder)?
        .iter()
        .map(|trial| {
            let tape = Tape::new(Mode::Eval);
            let bound = params.bind(&tape);
            let out = head_output(&bound, trial, model, task)?;
            let v = out.value().data().to_vec();
            Ok(v)
        })
        .collect()
}

pub fn argmax(v: &[f64]) -> usize {
    v.iter().enumerate().fold(0, |best, (i, &x)| if x > v[best] { i } else { best })
}

/// Counts indexed by the sorted union of labels seen in either vector.
#[derive(Clone, Debug, PartialEq)]
pub struct ConfusionMatrix {
    pub labels: Vec<usize>,
    /// `counts[true][pred]`, indices into `labels`.
    pub counts: Vec<Vec<u64>>,
}

impl ConfusionMatrix {
    pub fn new(y_true: &[usize], y_pred: &[usize]) -> Result<Self> {
        if y_true.len() != y_pred.len() {
            return dim_err(format!("{} labels vs {} predictions", y_true.len(), y_pred.len()));
        }
        if y_true.is_empty() {
            return Err(Error::Contract("metrics need at least one sample".into()));
        }
        let mut labels: Vec<usize> = y_true.iter().chain(y_pred).copied().collect();
        labels.sort_unstable();
        labels.dedup();
        let pos: BTreeMap<usize, usize> = labels.iter().enumerate().map(|(i, &l)| (l, i)).collect();
        let mut counts = vec![vec![0u64; labels.len()]; labels.len()];
        for (t, p) in y_true.iter().zip(y_pred) {
            counts[pos[t]][pos[p]] += 1;
        }
        Ok(ConfusionMatrix { labels, counts })
    }

    fn support(&self, i: usize) -> u64 {
        self.counts[i].iter().sum()
    }

    fn predicted(&self, i: usize) -> u64 {
        self.counts.iter().map(|r| r[i]).sum()
    }

    /// Recall of every class present in `y_true`.
    pub fn recalls(&self) -> Vec<(usize, f64)> {
        (0..self.labels.len())
            .filter(|&i| self.support(i) > 0)
            .map(|i| (self.labels[i], self.counts[i][i] as f64 / self.support(i) as f64))
            .collect()
    }

    pub fn balanced_accuracy(&self) -> f64 {
        let r = self.recalls();
        r.iter().map(|(_, x)| x).sum::<f64>() / r.len() as f64
    }

    pub fn weighted_f1(&self) -> f64 {
        let total: u64 = (0..self.labels.len()).map(|i| self.support(i)).sum();
        (0..self.labels.len())
            .filter(|&i| self.support(i) > 0)
            .map(|i| {
                let tp = self.counts[i][i] as f64;
                let (sup, pred) = (self.support(i) as f64, self.predicted(i) as f64);
                // 2PR/(P+R) written as 2TP/(support+predicted); 0 when nothing was hit.
                let f1 = if tp == 0.0 { 0.0 } else { 2.0 * tp / (sup + pred) };
                f1 * sup / total as f64
            })
            .sum()
    }

    pub fn to_csv(&self) -> String {
        let mut s = String::from("true\\pred");
        for l in &self.labels {
            s.push_str(&format!(",{l}"));
        }
        s.push('\n');
        for (l, row) in self.labels.iter().zip(&self.counts) {
            s.push_str(&l.to_string());
            for c in row {
                s.push_str(&format!(",{c}"));
            }
            s.push('\n');
        }
        s
    }
}

pub fn balanced_accuracy(y_true: &[usize], y_pred: &[usize]) -> Result<f64> {
    Ok(ConfusionMatrix::new(y_true, y_pred)?.balanced_accuracy())
}

pub fn weighted_f1(y_true: &[usize], y_pred: &[usize]) -> Result<f64> {
    Ok(ConfusionMatrix::new(y_true, y_pred)?.weighted_f1())
}

/// Coefficient of determination over rows of `dims` outputs, averaged
/// uniformly across output dimensions.
pub fn r_squared(y_true: &[f64], y_pred: &[f64], dims: usize) -> Result<f64> {
    if y_true.len() != y_pred.len() || dims == 0 || y_true.len() % dims != 0 {
        return dim_err(format!("{} targets vs {} predictions of width {dims}", y_true.len(), y_pred.len()));
    }
    let n = y_true.len() / dims;
    if n < 2 {
        return Err(Error::Contract("R² needs at least two samples".into()));
    }
    let mut total = 0.0;
    for k in 0..dims {
        let col = |v: &[f64]| v.iter().skip(k).step_by(dims).copied().collect::<Vec<_>>();
        let (t, p) = (col(y_true), col(y_pred));
        let mean = t.iter().sum::<f64>() / n as f64;
        let ss_tot: f64 = t.iter().map(|y| (y - mean).powi(2)).sum();
        if ss_tot == 0.0 {
            return Err(Error::Undefined(format!("R² undefined: output {k} is constant")));
        }
        let ss_res: f64 = t.iter().zip(&p).map(|(y, q)| (y - q).powi(2)).sum();
        total += 1.0 - ss_res / ss_tot;
    }
    Ok(total / dims as f64)
}

#[derive(Clone, Debug, PartialEq)]
pub enum MetricReport {
    Classification { balanced_accuracy: f64, weighted_f1: f64, recalls: Vec<(usize, f64)>, confusion: ConfusionMatrix },
    Regression { r_squared: f64 },
}

impl MetricReport {
    /// `split,metric,value` rows without a header.
    pub fn csv_rows(&self, split: &str) -> String {
        match self {
            MetricReport::Classification { balanced_accuracy, weighted_f1, recalls, .. } => {
                let mut s = format!("{split},balanced_accuracy,{balanced_accuracy}\n{split},weighted_f1,{weighted_f1}\n");
                for (c, r) in recalls {
                    s.push_str(&format!("{split},recall_{c},{r}\n"));
                }
                s
            }
            MetricReport::Regression { r_squared } => format!("{split},r_squared,{r_squared}\n"),
        }
    }
}

/// Scores head outputs against corpus labels.
pub fn evaluate(outputs: &[Vec<f64>], corpus: &[SpikeRecording], task: &TaskSpec) -> Result<MetricReport> {
    let ys = targets(corpus, task)?;
    match task.kind {
        TaskKind::Classification { .. } => {
            let y_true: Vec<usize> = ys.iter().map(|y| if let Target::Class(c) = y { *c } else { 0 }).collect();
            let y_pred: Vec<usize> = outputs.iter().map(|o| argmax(o)).collect();
            let cm = ConfusionMatrix::new(&y_true, &y_pred)?;
            Ok(MetricReport::Classification {
                balanced_accuracy: cm.balanced_accuracy(),
                weighted_f1: cm.weighted_f1(),
                recalls: cm.recalls(),
                confusion: cm,
            })
        }
        TaskKind::Regression { dims, .. } => {
            let t: Vec<f64> = ys.iter().flat_map(|y| if let Target::Sequence(v) = y { v.clone() } else { vec![] }).collect();
            let p: Vec<f64> = outputs.concat();
            Ok(MetricReport::Regression { r_squared: r_squared(&t, &p, dims)? })
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::spike_io::{gen_center_out, gen_kinematics, CenterOutParams, KinematicsParams};
    use crate::tokenizer::StubEmbedder;

    #[test]
    fn hand_examples() {
        assert_eq!(balanced_accuracy(&[0, 0, 1], &[0, 1, 1]).unwrap(), 0.75);
        assert_eq!(balanced_accuracy(&[0, 1, 0, 1], &[0, 0, 0, 0]).unwrap(), 0.5);
        let f = weighted_f1(&[0, 0, 1, 1], &[0, 0, 0, 1]).unwrap();
        assert!((f - (0.5 * 0.8 + 0.5 * 2.0 / 3.0)).abs() < 1e-15);
        assert_eq!(weighted_f1(&[0, 1, 0, 1], &[1, 0, 1, 0]).unwrap(), 0.0);
        assert_eq!(r_squared(&[0.0, 1.0, 2.0], &[0.0, 1.0, 1.0], 1).unwrap(), 0.5);
        assert_eq!(r_squared(&[0.0, 1.0, 2.0], &[1.0, 1.0, 1.0], 1).unwrap(), 0.0);
        assert!(matches!(r_squared(&[1.0, 1.0], &[1.0, 1.0], 1), Err(Error::Undefined(_))));
        assert!(balanced_accuracy(&[], &[]).is_err());
    }

    fn tiny_run() -> RunConfig {
        let mut run = RunConfig::default();
        run.model = ModelConfig {
            t_norm: 20,
            areas: 2,
            c_norm: 4,
            d_model: 8,
            d_text: 16,
            interval: 5,
            n_layers: 1,
            n_heads: 2,
            window: 3,
            d_ff: 16,
            rec_hidden: 8,
            ..Default::default()
        };
        run.finetune.epochs = 1;
        run.finetune.batch_size = 8;
        run.finetune.head_hidden = 8;
        run
    }

    #[test]
    fn finetune_smoke_both_tasks() {
        let run = tiny_run();
        let emb = StubEmbedder { d_text: 16 };
        let cls = gen_center_out(&CenterOutParams { n_trials: 16, n_units: 7, t_raw: 40, ..Default::default() }).unwrap();
        let task = TaskSpec::infer(&cls, &run.model, 8, HeadInput::Flatten).unwrap();
        assert_eq!(task.kind, TaskKind::Classification { n_classes: 8 });
        let out = finetune(None, &cls, &task, &run, &emb, |_, _| {}).unwrap();
        assert_eq!(out.loss_curve.len(), 1);
        let preds = predict(&out.params, &run.model, &task, &cls, &emb).unwrap();
        assert!(matches!(evaluate(&preds, &cls, &task).unwrap(), MetricReport::Classification { .. }));

        let reg = gen_kinematics(&KinematicsParams { n_trials: 6, n_units: 7, t_raw: 40, ..Default::default() }).unwrap();
        let task = TaskSpec::infer(&reg, &run.model, 8, HeadInput::MeanT).unwrap();
        assert_eq!(task.kind, TaskKind::Regression { dims: 2, horizon: 20 });
        let out = finetune(None, &reg, &task, &run, &emb, |_, _| {}).unwrap();
        let preds = predict(&out.params, &run.model, &task, &reg, &emb).unwrap();
        assert_eq!(preds[0].len(), 40);
        assert!(matches!(evaluate(&preds, &reg, &task).unwrap(), MetricReport::Regression { .. }));
    }
}
