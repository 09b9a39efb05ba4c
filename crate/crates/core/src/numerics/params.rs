//! Named parameter storage, tape binding and the gradient entry points.

use std::collections::BTreeMap;

use rand::seq::index::sample;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};

use crate::error::{Error, Result};

use super::array::{with_precision, DenseArray, Precision};
use super::tape::{Mode, Tape, Var};

/// Ordered map from parameter name to array. Iteration order is by name,
/// which fixes the order of every reduction over parameters.
#[derive(Clone, Debug, Default, PartialEq)]
pub struct ParamStore {
    entries: BTreeMap<String, DenseArray>,
}

impl ParamStore {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn insert(&mut self, name: impl Into<String>, value: DenseArray) {
        self.entries.insert(name.into(), value);
    }

    pub fn get(&self, name: &str) -> Result<&DenseArray> {
        self.entries.get(name).ok_or_else(|| Error::Config(format!("missing parameter {name}")))
    }

    pub fn get_mut(&mut self, name: &str) -> Option<&mut DenseArray> {
        self.entries.get_mut(name)
    }

    pub fn contains(&self, name: &str) -> bool {
        self.entries.contains_key(name)
    }

    pub fn remove(&mut self, name: &str) -> Option<DenseArray> {
        self.entries.remove(name)
    }

    pub fn iter(&self) -> impl Iterator<Item = (&String, &DenseArray)> {
        self.entries.iter()
    }

    pub fn iter_mut(&mut self) -> impl Iterator<Item = (&String, &mut DenseArray)> {
        self.entries.iter_mut()
    }

    pub fn names(&self) -> impl Iterator<Item = &String> {
        self.entries.keys()
    }

    pub fn len(&self) -> usize {
        self.entries.len()
    }

    pub fn is_empty(&self) -> bool {
        self.entries.is_empty()
    }

    /// Total scalar count.
    pub fn numel(&self) -> usize {
        self.entries.values().map(DenseArray::len).sum()
    }

    /// Drops every entry whose name starts with `prefix`.
    pub fn remove_prefix(&mut self, prefix: &str) {
        self.entries.retain(|k, _| !k.starts_with(prefix));
    }

    pub fn zeros_like(&self) -> ParamStore {
        ParamStore {
            entries: self.entries.iter().map(|(k, v)| (k.clone(), DenseArray::zeros(v.shape()))).collect(),
        }
    }

    /// `self += scale * other`, entry by entry (shapes must match).
    pub fn add_scaled(&mut self, other: &ParamStore, scale: f64) {
        for (k, v) in self.entries.iter_mut() {
            if let Some(o) = other.entries.get(k) {
                for (a, b) in v.data_mut().iter_mut().zip(o.data()) {
                    *a += scale * b;
                }
            }
        }
    }

    /// Seeded normal initialisation of a new entry.
    pub fn init_normal(&mut self, name: &str, shape: &[usize], std: f64, rng: &mut ChaCha8Rng) {
        let normal = Normal::new(0.0, std).expect("finite std");
        let n = shape.iter().product();
        let data = (0..n).map(|_| normal.sample(rng)).collect();
        self.insert(name, DenseArray::new(shape, data).expect("valid shape"));
    }

    pub fn bind<'t>(&self, tape: &'t Tape) -> Bound<'t> {
        Bound { vars: self.entries.iter().map(|(k, v)| (k.clone(), tape.param(v.clone()))).collect() }
    }
}

/// Parameters registered as differentiable leaves on one tape.
pub struct Bound<'t> {
    vars: BTreeMap<String, Var<'t>>,
}

impl<'t> Bound<'t> {
    pub fn get(&self, name: &str) -> Result<Var<'t>> {
        self.vars.get(name).copied().ok_or_else(|| Error::Config(format!("missing parameter {name}")))
    }

    /// Gradients for every bound parameter, zeros where none flowed.
    pub fn collect(&self, grads: &super::tape::Gradients) -> ParamStore {
        let mut out = ParamStore::new();
        for (k, v) in &self.vars {
            out.insert(k.clone(), grads.wrt(*v));
        }
        out
    }
}

/// Loss value and exact reverse-mode gradient, evaluated with `mode`.
pub fn value_and_grad<F>(params: &ParamStore, mode: Mode, loss_fn: F) -> Result<(f64, ParamStore)>
where
    F: for<'t> Fn(&'t Tape, &Bound<'t>) -> Result<Var<'t>>,
{
    let tape = Tape::new(mode);
    let bound = params.bind(&tape);
    let loss = loss_fn(&tape, &bound)?;
    let grads = tape.backward(loss)?;
    Ok((loss.item(), bound.collect(&grads)))
}

/// Reverse-mode gradient of a scalar loss (eval mode: dropout off).
pub fn grad<F>(params: &ParamStore, loss_fn: F) -> Result<ParamStore>
where
    F: for<'t> Fn(&'t Tape, &Bound<'t>) -> Result<Var<'t>>,
{
    value_and_grad(params, Mode::Eval, loss_fn).map(|(_, g)| g)
}

fn loss_value<F>(params: &ParamStore, mode: Mode, loss_fn: &F) -> Result<f64>
where
    F: for<'t> Fn(&'t Tape, &Bound<'t>) -> Result<Var<'t>>,
{
    let tape = Tape::new(mode);
    let bound = params.bind(&tape);
    let loss = loss_fn(&tape, &bound)?;
    if loss.value().len() != 1 {
        return Err(Error::Contract("loss must be scalar".into()));
    }
    Ok(loss.item())
}

#[derive(Clone, Debug)]
pub struct GradCheckOptions {
    pub step: f64,
    pub tol: f64,
    /// Coordinates to sample; all are checked when there are fewer.
    pub coords: usize,
    pub seed: u64,
    /// Floor on the relative-error denominator, so that coordinates whose
    /// true gradient is zero are judged on absolute error.
    pub denom_floor: f64,
    pub mode: Mode,
    /// Five-point central stencil (`O(h⁴)` truncation) instead of the
    /// three-point one. It tolerates a larger step, which keeps cancellation
    /// noise small when the loss is large compared with a gradient.
    pub fourth_order: bool,
}

impl Default for GradCheckOptions {
    fn default() -> Self {
        GradCheckOptions { step: 1e-5, tol: 1e-5, coords: 200, seed: 0, denom_floor: 1e-6, mode: Mode::Eval, fourth_order: false }
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct CoordCheck {
    pub name: String,
    pub index: usize,
    pub analytic: f64,
    pub numeric: f64,
    pub rel_error: f64,
}

#[derive(Clone, Debug, Default)]
pub struct GradCheckReport {
    pub checked: Vec<CoordCheck>,
    pub max_rel_error: f64,
    pub tol: f64,
}

impl GradCheckReport {
    pub fn failures(&self) -> impl Iterator<Item = &CoordCheck> {
        self.checked.iter().filter(move |c| !(c.rel_error <= self.tol))
    }

    pub fn passed(&self) -> bool {
        self.failures().next().is_none()
    }

    pub fn is_empty(&self) -> bool {
        self.checked.is_empty()
    }
}

/// Compares reverse-mode gradients against central finite differences on a
/// seeded subsample of coordinates. Always runs in 64-bit precision.
pub fn gradcheck<F>(params: &ParamStore, loss_fn: F, opts: &GradCheckOptions) -> Result<GradCheckReport>
where
    F: for<'t> Fn(&'t Tape, &Bound<'t>) -> Result<Var<'t>>,
{
    with_precision(Precision::F64, || {
        let mut report = GradCheckReport { tol: opts.tol, ..Default::default() };
        let coords: Vec<(String, usize)> =
            params.iter().flat_map(|(k, v)| (0..v.len()).map(move |i| (k.clone(), i))).collect();
        if coords.is_empty() {
            return Ok(report);
        }
        let (_, analytic) = value_and_grad(params, opts.mode, &loss_fn)?;
        let chosen: Vec<usize> = if coords.len() <= opts.coords {
            (0..coords.len()).collect()
        } else {
            let mut rng = ChaCha8Rng::seed_from_u64(opts.seed);
            let mut idx = sample(&mut rng, coords.len(), opts.coords).into_vec();
            idx.sort_unstable();
            idx
        };
        let mut probe = params.clone();
        for c in chosen {
            let (name, i) = &coords[c];
            let orig = probe.get(name)?.data()[*i];
            let mut at = |k: f64| -> Result<f64> {
                probe.get_mut(name).expect("present").data_mut()[*i] = orig + k * opts.step;
                loss_value(&probe, opts.mode, &loss_fn)
            };
            let numeric = if opts.fourth_order {
                let (p2, p1, m1, m2) = (at(2.0)?, at(1.0)?, at(-1.0)?, at(-2.0)?);
                (8.0 * (p1 - m1) - (p2 - m2)) / (12.0 * opts.step)
            } else {
                (at(1.0)? - at(-1.0)?) / (2.0 * opts.step)
            };
            probe.get_mut(name).expect("present").data_mut()[*i] = orig;
            let a = analytic.get(name)?.data()[*i];
            let denom = a.abs().max(numeric.abs()).max(opts.denom_floor);
            let rel_error = (a - numeric).abs() / denom;
            report.max_rel_error = report.max_rel_error.max(rel_error);
            report.checked.push(CoordCheck { name: name.clone(), index: *i, analytic: a, numeric, rel_error });
        }
        Ok(report)
    })
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn quadratic_gradcheck_is_tight() {
        let mut p = ParamStore::new();
        p.insert("w", DenseArray::from_vec(vec![0.3, -1.2, 2.0]).unwrap());
        let report = gradcheck(
            &p,
            |_t: &Tape, b: &Bound| {
                let w = b.get("w")?;
                w.mul(w)?.scale(1.5)?.sum()
            },
            &GradCheckOptions::default(),
        )
        .unwrap();
        assert_eq!(report.checked.len(), 3);
        assert!(report.max_rel_error < 1e-8, "{}", report.max_rel_error);
    }

    #[test]
    fn fourth_order_stencil_is_exact_on_quartics() {
        let mut p = ParamStore::new();
        p.insert("w", DenseArray::from_vec(vec![0.7, -0.4]).unwrap());
        let report = gradcheck(
            &p,
            |_t: &Tape, b: &Bound| {
                let w = b.get("w")?;
                let w2 = w.mul(w)?;
                w2.mul(w2)?.sum()
            },
            &GradCheckOptions { step: 1e-2, fourth_order: true, ..Default::default() },
        )
        .unwrap();
        assert!(report.max_rel_error < 1e-10, "{}", report.max_rel_error);
    }

    #[test]
    fn empty_params_give_empty_report() {
        let report = gradcheck(
            &ParamStore::new(),
            |t: &Tape, _b: &Bound| t.constant(DenseArray::scalar(1.0)).sum(),
            &GradCheckOptions::default(),
        )
        .unwrap();
        assert!(report.is_empty() && report.passed());
    }

    #[test]
    fn grad_reports_missing_parameter() {
        let p = ParamStore::new();
        assert!(grad(&p, |_t: &Tape, b: &Bound| b.get("nope")).is_err());
    }
}
