//! Central finite differences against tape adjoints.
//!
//! The scalar loss is the sum of the op's outputs. Finite differences are
//! accumulated as `Σ_i (y⁺_i − y⁻_i)` rather than `Σy⁺ − Σy⁻` so outputs that
//! do not depend on the perturbed coordinate cancel exactly.

use rand::seq::index::sample;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use super::params::ParamStore;
use super::tape::{Tape, Var};
use super::FeatureGrid;
use crate::error::{Error, Result};

/// Relative error with the `max(|a|, |b|, 1e-8)` denominator.
pub fn relative_error(analytic: f64, numeric: f64) -> f64 {
    (analytic - numeric).abs() / analytic.abs().max(numeric.abs()).max(1e-8)
}

#[derive(Clone, Debug, PartialEq)]
pub struct CheckReport {
    pub max_rel_error: f64,
    pub coordinates: usize,
    /// Location of the worst coordinate, e.g. `input 1 [17]` or `cia.gate_i.weight [3]`.
    pub worst: String,
}

/// Finite-difference settings.
#[derive(Clone, Copy, Debug)]
pub struct GradCheck {
    pub eps: f64,
    /// Check at most this many randomly chosen coordinates per tensor.
    pub limit: Option<usize>,
    pub seed: u64,
}

impl GradCheck {
    pub fn new(eps: f64) -> Self {
        Self {
            eps,
            limit: None,
            seed: 0,
        }
    }

    pub fn with_limit(mut self, limit: usize, seed: u64) -> Self {
        self.limit = Some(limit);
        self.seed = seed;
        self
    }

    /// Check input gradients of `f`, which records an op on the tape.
    pub fn inputs<F>(&self, inputs: &[FeatureGrid], f: F) -> Result<CheckReport>
    where
        F: Fn(&mut Tape, &[Var]) -> Result<Var>,
    {
        let store = ParamStore::new();
        self.run(&store, inputs, false, |t, _, v| f(t, v))
    }

    /// Check gradients w.r.t. both `inputs` and every tensor in `store`.
    pub fn with_params<F>(&self, store: &ParamStore, inputs: &[FeatureGrid], f: F) -> Result<CheckReport>
    where
        F: Fn(&mut Tape, &ParamStore, &[Var]) -> Result<Var>,
    {
        self.run(store, inputs, true, f)
    }

    fn run<F>(&self, store: &ParamStore, inputs: &[FeatureGrid], params: bool, f: F) -> Result<CheckReport>
    where
        F: Fn(&mut Tape, &ParamStore, &[Var]) -> Result<Var>,
    {
        if !(self.eps > 0.0) {
            return Err(Error::Precondition(format!("eps must be positive, got {}", self.eps)));
        }
        let forward = |store: &ParamStore, inputs: &[FeatureGrid]| -> Result<(Tape, Vec<Var>, Var)> {
            let mut tape = Tape::new();
            let vars: Vec<Var> = inputs.iter().map(|g| tape.leaf(g.clone())).collect();
            let out = f(&mut tape, store, &vars)?;
            if !tape.value(out).is_finite() {
                return Err(Error::Check("non-finite forward output".into()));
            }
            Ok((tape, vars, out))
        };

        let (mut tape, vars, out) = forward(store, inputs)?;
        let loss = tape.sum(out);
        let grads = tape.backward(loss);
        let mut rng = ChaCha8Rng::seed_from_u64(self.seed);
        let mut report = CheckReport {
            max_rel_error: 0.0,
            coordinates: 0,
            worst: String::new(),
        };
        let mut pick = |n: usize| -> Vec<usize> {
            match self.limit {
                Some(k) if k < n => {
                    let mut v = sample(&mut rng, n, k).into_vec();
                    v.sort_unstable();
                    v
                }
                _ => (0..n).collect(),
            }
        };
        let record = |report: &mut CheckReport, a: f64, n: f64, label: String| {
            let e = relative_error(a, n);
            report.coordinates += 1;
            if e > report.max_rel_error || report.worst.is_empty() {
                report.max_rel_error = report.max_rel_error.max(e);
                report.worst = label;
            }
        };
        let diff = |plus: &Tape, po: Var, minus: &Tape, mo: Var| -> f64 {
            let mut s = 0.0;
            for (a, b) in plus.value(po).data().iter().zip(minus.value(mo).data()) {
                s += a - b;
            }
            s / (2.0 * self.eps)
        };

        let mut work = inputs.to_vec();
        for (k, &v) in vars.iter().enumerate() {
            let analytic = grads.wrt(v, &inputs[k]);
            for i in pick(inputs[k].len()) {
                let x0 = work[k].data()[i];
                work[k].data_mut()[i] = x0 + self.eps;
                let (tp, _, op) = forward(store, &work)?;
                work[k].data_mut()[i] = x0 - self.eps;
                let (tm, _, om) = forward(store, &work)?;
                work[k].data_mut()[i] = x0;
                record(&mut report, analytic.data()[i], diff(&tp, op, &tm, om), format!("input {k} [{i}]"));
            }
        }

        if params {
            let pg = grads.param_grads();
            let mut scratch = store.clone();
            for (id, t) in store.iter() {
                let analytic = pg
                    .iter()
                    .find(|(p, _)| *p == id)
                    .map(|(_, g)| g.clone())
                    .unwrap_or_else(|| vec![0.0; t.data.len()]);
                for i in pick(t.data.len()) {
                    let x0 = t.data[i];
                    scratch.get_mut(id).data[i] = x0 + self.eps;
                    let (tp, _, op) = forward(&scratch, inputs)?;
                    scratch.get_mut(id).data[i] = x0 - self.eps;
                    let (tm, _, om) = forward(&scratch, inputs)?;
                    scratch.get_mut(id).data[i] = x0;
                    record(&mut report, analytic[i], diff(&tp, op, &tm, om), format!("{} [{i}]", t.name));
                }
            }
        }
        Ok(report)
    }
}

/// Max relative error of input gradients for `f` at step `eps`.
pub fn grad_check<F>(inputs: &[FeatureGrid], eps: f64, f: F) -> Result<f64>
where
    F: Fn(&mut Tape, &[Var]) -> Result<Var>,
{
    GradCheck::new(eps).inputs(inputs, f).map(|r| r.max_rel_error)
}
