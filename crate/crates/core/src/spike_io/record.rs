use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// Descriptive context of one recording.
#[derive(Clone, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub struct MetadataRecord {
    pub species: String,
    pub dataset: String,
    pub subject: String,
    pub region: String,
    pub task: String,
    pub session: String,
}

impl MetadataRecord {
    pub fn new(species: &str, dataset: &str, subject: &str, region: &str, task: &str, session: &str) -> Self {
        MetadataRecord {
            species: species.into(),
            dataset: dataset.into(),
            subject: subject.into(),
            region: region.into(),
            task: task.into(),
            session: session.into(),
        }
    }

    pub fn validate(&self) -> Result<()> {
        let fields = [
            ("species", &self.species),
            ("dataset", &self.dataset),
            ("subject", &self.subject),
            ("region", &self.region),
            ("task", &self.task),
            ("session", &self.session),
        ];
        for (name, value) in fields {
            if value.is_empty() {
                return Err(Error::Validation(format!("metadata field `{name}` is empty")));
            }
        }
        Ok(())
    }
}

#[derive(Clone, Debug, PartialEq)]
pub enum Label {
    Class(u32),
    /// Row-major `[t_raw × dims]` targets, one row per raw time step.
    Sequence { dims: usize, values: Vec<f64> },
}

/// Raw spike counts of one trial, time-major.
#[derive(Clone, Debug, PartialEq)]
pub struct SpikeRecording {
    pub t_raw: usize,
    pub c_raw: usize,
    /// `t_raw × c_raw` counts, row-major (time-major).
    pub counts: Vec<u32>,
    pub sample_rate_hz: f64,
    pub meta: MetadataRecord,
    pub label: Option<Label>,
}

impl SpikeRecording {
    pub fn new(
        t_raw: usize,
        c_raw: usize,
        counts: Vec<u32>,
        sample_rate_hz: f64,
        meta: MetadataRecord,
        label: Option<Label>,
    ) -> Result<Self> {
        let rec = SpikeRecording { t_raw, c_raw, counts, sample_rate_hz, meta, label };
        rec.validate()?;
        Ok(rec)
    }

    pub fn validate(&self) -> Result<()> {
        if self.t_raw == 0 || self.c_raw == 0 {
            return Err(Error::Validation("recording needs at least one step and one channel".into()));
        }
        if self.counts.len() != self.t_raw * self.c_raw {
            return Err(Error::Validation(format!(
                "{} counts for a {}x{} recording",
                self.counts.len(),
                self.t_raw,
                self.c_raw
            )));
        }
        if !(self.sample_rate_hz.is_finite() && self.sample_rate_hz > 0.0) {
            return Err(Error::Validation(format!("sample rate {} must be positive", self.sample_rate_hz)));
        }
        self.meta.validate()?;
        if let Some(Label::Sequence { dims, values }) = &self.label {
            if *dims == 0 || values.len() != dims * self.t_raw {
                return Err(Error::Validation(format!(
                    "label sequence of {} values does not cover {} steps x {dims} dims",
                    values.len(),
                    self.t_raw
                )));
            }
        }
        Ok(())
    }

    pub fn count(&self, t: usize, c: usize) -> u32 {
        self.counts[t * self.c_raw + c]
    }

    pub fn class(&self) -> Option<u32> {
        match self.label {
            Some(Label::Class(k)) => Some(k),
            _ => None,
        }
    }

    pub fn total_count(&self) -> u64 {
        self.counts.iter().map(|&c| c as u64).sum()
    }
}
