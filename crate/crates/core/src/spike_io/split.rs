use std::collections::BTreeMap;

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use crate::error::{Error, Result};

use super::record::SpikeRecording;

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum SplitMode {
    /// Every session contributes trials to both sides.
    MultiDay,
    /// Whole sessions are held out.
    CrossDay,
    /// Per-session trial split; evaluation reports each session separately.
    WithinSession,
    /// Pooled trial split, typically with a small training fraction.
    FewShot,
}

impl SplitMode {
    pub fn parse(s: &str) -> Option<Self> {
        match s {
            "multi-day" | "multi_day" => Some(SplitMode::MultiDay),
            "cross-day" | "cross_day" => Some(SplitMode::CrossDay),
            "within-session" | "within_session" => Some(SplitMode::WithinSession),
            "few-shot" | "few_shot" => Some(SplitMode::FewShot),
            _ => None,
        }
    }

    /// Training fraction used when none is given.
    pub fn default_fraction(self) -> f64 {
        match self {
            SplitMode::FewShot => 0.2,
            _ => 0.8,
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct SplitSpec {
    pub mode: SplitMode,
    pub train_fraction: f64,
    pub seed: u64,
}

impl SplitSpec {
    pub fn new(mode: SplitMode, seed: u64) -> Self {
        SplitSpec { mode, train_fraction: mode.default_fraction(), seed }
    }
}

/// Number of training items out of `n`; both sides stay non-empty when `n >= 2`.
fn train_count(n: usize, fraction: f64) -> usize {
    let k = (fraction * n as f64).round() as usize;
    if n >= 2 {
        k.clamp(1, n - 1)
    } else {
        n
    }
}

fn by_session(corpus: &[SpikeRecording]) -> BTreeMap<&str, Vec<usize>> {
    let mut map: BTreeMap<&str, Vec<usize>> = BTreeMap::new();
    for (i, r) in corpus.iter().enumerate() {
        map.entry(r.meta.session.as_str()).or_default().push(i);
    }
    map
}

/// Sorted, disjoint (train, test) trial indices.
pub fn split_indices(corpus: &[SpikeRecording], spec: &SplitSpec) -> Result<(Vec<usize>, Vec<usize>)> {
    if corpus.is_empty() {
        return Err(Error::InfeasibleSplit("empty corpus".into()));
    }
    if !(spec.train_fraction > 0.0 && spec.train_fraction < 1.0) {
        return Err(Error::Validation(format!("train fraction {} outside (0, 1)", spec.train_fraction)));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(spec.seed);
    let (mut train, mut test) = (Vec::new(), Vec::new());
    match spec.mode {
        SplitMode::FewShot => {
            let mut idx: Vec<usize> = (0..corpus.len()).collect();
            idx.shuffle(&mut rng);
            let k = train_count(idx.len(), spec.train_fraction);
            train.extend_from_slice(&idx[..k]);
            test.extend_from_slice(&idx[k..]);
        }
        SplitMode::MultiDay | SplitMode::WithinSession => {
            for (_, mut idx) in by_session(corpus) {
                idx.shuffle(&mut rng);
                let k = train_count(idx.len(), spec.train_fraction);
                train.extend_from_slice(&idx[..k]);
                test.extend_from_slice(&idx[k..]);
            }
        }
        SplitMode::CrossDay => {
            let sessions = by_session(corpus);
            if sessions.len() < 2 {
                return Err(Error::InfeasibleSplit(format!(
                    "cross-day split needs at least 2 sessions, corpus has {}",
                    sessions.len()
                )));
            }
            let mut groups: Vec<Vec<usize>> = sessions.into_values().collect();
            groups.shuffle(&mut rng);
            let k = train_count(groups.len(), spec.train_fraction);
            train.extend(groups[..k].iter().flatten());
            test.extend(groups[k..].iter().flatten());
        }
    }
    train.sort_unstable();
    test.sort_unstable();
    Ok((train, test))
}

pub fn split(corpus: &[SpikeRecording], spec: &SplitSpec) -> Result<(Vec<SpikeRecording>, Vec<SpikeRecording>)> {
    let (tr, te) = split_indices(corpus, spec)?;
    let pick = |idx: &[usize]| idx.iter().map(|&i| corpus[i].clone()).collect();
    Ok((pick(&tr), pick(&te)))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::spike_io::{gen_center_out, CenterOutParams};

    fn corpus(n: usize, sessions: usize) -> Vec<SpikeRecording> {
        gen_center_out(&CenterOutParams { n_trials: n, t_raw: 4, n_units: 2, n_sessions: sessions, ..Default::default() })
            .unwrap()
    }

    #[test]
    fn eighty_twenty_and_few_shot() {
        let c = corpus(10, 1);
        let (tr, te) = split_indices(&c, &SplitSpec::new(SplitMode::MultiDay, 1)).unwrap();
        assert_eq!((tr.len(), te.len()), (8, 2));
        let (tr, te) = split_indices(&c, &SplitSpec::new(SplitMode::FewShot, 1)).unwrap();
        assert_eq!((tr.len(), te.len()), (2, 8));
    }

    #[test]
    fn same_seed_same_split() {
        let c = corpus(30, 3);
        for mode in [SplitMode::MultiDay, SplitMode::CrossDay, SplitMode::WithinSession, SplitMode::FewShot] {
            let s = SplitSpec::new(mode, 7);
            assert_eq!(split_indices(&c, &s).unwrap(), split_indices(&c, &s).unwrap());
        }
    }

    #[test]
    fn cross_day_holds_out_sessions() {
        let c = corpus(40, 5);
        let (tr, te) = split_indices(&c, &SplitSpec::new(SplitMode::CrossDay, 3)).unwrap();
        let sessions = |idx: &[usize]| idx.iter().map(|&i| c[i].meta.session.clone()).collect::<Vec<_>>();
        let (a, b) = (sessions(&tr), sessions(&te));
        assert!(a.iter().all(|s| !b.contains(s)));
        assert_eq!(tr.len() + te.len(), 40);
        let one = corpus(5, 1);
        assert!(matches!(
            split_indices(&one, &SplitSpec::new(SplitMode::CrossDay, 0)),
            Err(Error::InfeasibleSplit(_))
        ));
    }
}
