//! Relaxed policies over a finite action set: lattice feedback tables and
//! causal open-loop samplers.

use alloc::string::String;
use alloc::sync::Arc;
use alloc::vec;
use alloc::vec::Vec;
use core::cell::Cell;
use core::fmt;
#[allow(unused_imports)]
use num_traits::Float;
use serde::{Deserialize, Serialize};

use crate::error::{input_err, Error, Result};
use crate::vectorfield::ActionSet;

/// Tensor-product state lattice.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Lattice {
    lower: Vec<f64>,
    upper: Vec<f64>,
    counts: Vec<usize>,
}

impl Lattice {
    pub fn new(lower: Vec<f64>, upper: Vec<f64>, counts: Vec<usize>) -> Result<Self> {
        let d = lower.len();
        if d == 0 || upper.len() != d || counts.len() != d {
            return Err(input_err!("lattice bounds and counts must share a positive dimension"));
        }
        for c in 0..d {
            if !(upper[c] > lower[c]) || !lower[c].is_finite() || !upper[c].is_finite() {
                return Err(input_err!("lattice bounds must satisfy lower < upper (axis {c})"));
            }
            if counts[c] < 2 {
                return Err(input_err!("lattice needs at least two nodes per axis (axis {c})"));
            }
        }
        Ok(Lattice { lower, upper, counts })
    }

    pub fn dim(&self) -> usize {
        self.lower.len()
    }

    pub fn size(&self) -> usize {
        self.counts.iter().product()
    }

    pub fn lower(&self) -> &[f64] {
        &self.lower
    }

    pub fn upper(&self) -> &[f64] {
        &self.upper
    }

    pub fn counts(&self) -> &[usize] {
        &self.counts
    }

    pub fn spacing(&self, axis: usize) -> f64 {
        (self.upper[axis] - self.lower[axis]) / (self.counts[axis] - 1) as f64
    }

    /// Coordinates of a flat node index (last axis fastest).
    pub fn point(&self, index: usize, out: &mut [f64]) {
        let mut rest = index;
        for c in (0..self.dim()).rev() {
            let i = rest % self.counts[c];
            rest /= self.counts[c];
            out[c] = self.lower[c] + i as f64 * self.spacing(c);
        }
    }

    pub fn points(&self) -> Vec<f64> {
        let d = self.dim();
        let mut out = vec![0.0; self.size() * d];
        for i in 0..self.size() {
            self.point(i, &mut out[i * d..(i + 1) * d]);
        }
        out
    }

    fn flat(&self, idx: &[usize]) -> usize {
        idx.iter().zip(&self.counts).fold(0, |acc, (i, n)| acc * n + i)
    }

    pub fn nearest(&self, x: &[f64]) -> usize {
        let mut idx = vec![0usize; self.dim()];
        for c in 0..self.dim() {
            let r = ((x[c] - self.lower[c]) / self.spacing(c)).round();
            idx[c] = r.max(0.0).min((self.counts[c] - 1) as f64) as usize;
        }
        self.flat(&idx)
    }

    pub fn contains(&self, x: &[f64]) -> bool {
        (0..self.dim()).all(|c| x[c] >= self.lower[c] && x[c] <= self.upper[c])
    }

    /// Multilinear interpolation of nodal `values`, clamping outside the box.
    /// Returns `(value, escaped)`.
    pub fn interpolate(&self, values: &[f64], x: &[f64]) -> (f64, bool) {
        let d = self.dim();
        let mut base = [0usize; 8];
        let mut frac = [0.0f64; 8];
        let mut escaped = false;
        debug_assert!(d <= 8);
        for c in 0..d {
            let h = self.spacing(c);
            let mut r = (x[c] - self.lower[c]) / h;
            if r < 0.0 || r > (self.counts[c] - 1) as f64 {
                escaped = true;
                r = r.max(0.0).min((self.counts[c] - 1) as f64);
            }
            let i = (r.floor() as usize).min(self.counts[c] - 2);
            base[c] = i;
            frac[c] = r - i as f64;
        }
        let mut acc = 0.0;
        let mut idx = [0usize; 8];
        for corner in 0..(1usize << d) {
            let mut w = 1.0;
            for c in 0..d {
                let bit = (corner >> c) & 1;
                idx[c] = base[c] + bit;
                w *= if bit == 1 { frac[c] } else { 1.0 - frac[c] };
            }
            if w != 0.0 {
                acc += w * values[self.flat(&idx[..d])];
            }
        }
        (acc, escaped)
    }
}

/// Read access to the idiosyncratic increments strictly before the current
/// step. Any request past the prefix fails with a causality error and is
/// recorded.
pub struct NoisePrefix<'a> {
    increments: &'a [f64],
    dim: usize,
    step: usize,
    furthest: Cell<usize>,
    violation: Cell<Option<usize>>,
}

impl<'a> NoisePrefix<'a> {
    pub(crate) fn new(increments: &'a [f64], dim: usize, step: usize) -> Self {
        NoisePrefix {
            increments,
            dim,
            step,
            furthest: Cell::new(0),
            violation: Cell::new(None),
        }
    }

    pub fn step(&self) -> usize {
        self.step
    }

    pub fn dim(&self) -> usize {
        self.dim
    }

    /// Increment `W_{t_{r+1}} - W_{t_r}`; allowed for `r < step`.
    pub fn increment(&self, r: usize) -> Result<&'a [f64]> {
        if r >= self.step {
            self.violation.set(Some(r + 1));
            return Err(Error::Causality {
                step: self.step,
                requested: r + 1,
            });
        }
        self.furthest.set(self.furthest.get().max(r + 1));
        Ok(&self.increments[r * self.dim..(r + 1) * self.dim])
    }

    /// `W_{t_node}`; allowed for `node <= step`.
    pub fn value_at(&self, node: usize) -> Result<Vec<f64>> {
        let mut w = vec![0.0; self.dim];
        if node > self.step {
            self.violation.set(Some(node));
            return Err(Error::Causality {
                step: self.step,
                requested: node,
            });
        }
        for r in 0..node {
            for (a, b) in w.iter_mut().zip(self.increment(r)?) {
                *a += b;
            }
        }
        self.furthest.set(self.furthest.get().max(node));
        Ok(w)
    }

    pub(crate) fn furthest(&self) -> usize {
        self.furthest.get()
    }

    pub(crate) fn violation(&self) -> Option<usize> {
        self.violation.get()
    }
}

/// Open-loop sampler for adapted controls. It sees only the noise prefix;
/// the solver draws the action from the returned distribution with an
/// exogenous stream.
pub trait CausalSampler: Send + Sync {
    fn name(&self) -> &str;
    fn probabilities(&self, step: usize, prefix: &NoisePrefix<'_>, out: &mut [f64]) -> Result<()>;
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum PolicyMode {
    Feedback,
    OpenLoopCausal,
}

#[derive(Clone)]
enum Kind {
    Table { lattice: Lattice, table: Vec<f64> },
    Causal(Arc<dyn CausalSampler>),
}

/// Time- and state-indexed probability vectors over `U`.
#[derive(Clone)]
pub struct RelaxedPolicy {
    actions: ActionSet,
    steps: usize,
    kind: Kind,
}

impl fmt::Debug for RelaxedPolicy {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        let mut s = f.debug_struct("RelaxedPolicy");
        s.field("actions", &self.actions).field("steps", &self.steps);
        match &self.kind {
            Kind::Table { lattice, .. } => s.field("lattice", lattice),
            Kind::Causal(c) => s.field("sampler", &c.name()),
        };
        s.finish()
    }
}

impl RelaxedPolicy {
    /// Feedback policy from a `steps x lattice.size() x K` table.
    pub fn from_table(actions: ActionSet, lattice: Lattice, steps: usize, table: Vec<f64>) -> Result<Self> {
        let k = actions.len();
        if table.len() != steps * lattice.size() * k {
            return Err(input_err!(
                "policy table has {} entries, expected {}",
                table.len(),
                steps * lattice.size() * k
            ));
        }
        for (i, row) in table.chunks(k).enumerate() {
            let sum: f64 = row.iter().sum();
            if row.iter().any(|&v| !(v >= 0.0)) || (sum - 1.0).abs() > 1e-12 {
                return Err(input_err!("policy row {i} is not a probability vector (sum {sum})"));
            }
        }
        Ok(RelaxedPolicy {
            actions,
            steps,
            kind: Kind::Table { lattice, table },
        })
    }

    /// The same probability vector at every time and state.
    pub fn constant(actions: ActionSet, lattice: Lattice, steps: usize, probs: &[f64]) -> Result<Self> {
        if probs.len() != actions.len() {
            return Err(input_err!("expected {} probabilities", actions.len()));
        }
        let cells = steps * lattice.size();
        let table = probs.iter().copied().cycle().take(cells * probs.len()).collect();
        Self::from_table(actions, lattice, steps, table)
    }

    pub fn uniform(actions: ActionSet, lattice: Lattice, steps: usize) -> Result<Self> {
        let k = actions.len();
        let probs = vec![1.0 / k as f64; k];
        let cells = steps * lattice.size();
        let table = probs.iter().copied().cycle().take(cells * k).collect();
        // uniform rows may miss 1 by an ulp; normalise the check by construction
        Ok(RelaxedPolicy {
            actions,
            steps,
            kind: Kind::Table { lattice, table },
        })
    }

    /// Pure feedback policy putting mass one on `choice[n * size + node]`.
    pub fn pure(actions: ActionSet, lattice: Lattice, steps: usize, choice: &[usize]) -> Result<Self> {
        let k = actions.len();
        if choice.len() != steps * lattice.size() || choice.iter().any(|&c| c >= k) {
            return Err(input_err!("invalid pure policy choice table"));
        }
        let mut table = vec![0.0; choice.len() * k];
        for (i, &c) in choice.iter().enumerate() {
            table[i * k + c] = 1.0;
        }
        Self::from_table(actions, lattice, steps, table)
    }

    pub fn causal(actions: ActionSet, steps: usize, sampler: Arc<dyn CausalSampler>) -> Self {
        RelaxedPolicy {
            actions,
            steps,
            kind: Kind::Causal(sampler),
        }
    }

    pub fn mode(&self) -> PolicyMode {
        match self.kind {
            Kind::Table { .. } => PolicyMode::Feedback,
            Kind::Causal(_) => PolicyMode::OpenLoopCausal,
        }
    }

    pub fn actions(&self) -> &ActionSet {
        &self.actions
    }

    pub fn steps(&self) -> usize {
        self.steps
    }

    pub fn lattice(&self) -> Option<&Lattice> {
        match &self.kind {
            Kind::Table { lattice, .. } => Some(lattice),
            Kind::Causal(_) => None,
        }
    }

    pub fn table(&self) -> Option<&[f64]> {
        match &self.kind {
            Kind::Table { table, .. } => Some(table),
            Kind::Causal(_) => None,
        }
    }

    pub fn sampler(&self) -> Option<&Arc<dyn CausalSampler>> {
        match &self.kind {
            Kind::Causal(s) => Some(s),
            Kind::Table { .. } => None,
        }
    }

    /// Feedback probabilities at the lattice node nearest to `x`.
    pub fn probabilities(&self, step: usize, x: &[f64]) -> Option<&[f64]> {
        match &self.kind {
            Kind::Table { lattice, table } => {
                let k = self.actions.len();
                let cell = step * lattice.size() + lattice.nearest(x);
                Some(&table[cell * k..(cell + 1) * k])
            }
            Kind::Causal(_) => None,
        }
    }

    /// Index of the most likely action per cell, lowest index on ties.
    pub fn argmax_table(&self) -> Option<Vec<usize>> {
        let k = self.actions.len();
        self.table().map(|t| {
            t.chunks(k)
                .map(|row| {
                    let mut best = 0;
                    for (i, &v) in row.iter().enumerate() {
                        if v > row[best] {
                            best = i;
                        }
                    }
                    best
                })
                .collect()
        })
    }
}

/// Deterministic open-loop schedule `step -> action index`.
pub struct ScheduleSampler {
    pub schedule: Vec<usize>,
}

impl CausalSampler for ScheduleSampler {
    fn name(&self) -> &str {
        "schedule"
    }
    fn probabilities(&self, step: usize, _prefix: &NoisePrefix<'_>, out: &mut [f64]) -> Result<()> {
        out.iter_mut().for_each(|v| *v = 0.0);
        let i = self.schedule[step % self.schedule.len()];
        out[i] = 1.0;
        Ok(())
    }
}

/// Picks the first action when the first coordinate of `W_{t_n}` is negative,
/// the last one otherwise.
pub struct SignSampler;

impl CausalSampler for SignSampler {
    fn name(&self) -> &str {
        "sign-of-w"
    }
    fn probabilities(&self, step: usize, prefix: &NoisePrefix<'_>, out: &mut [f64]) -> Result<()> {
        let w = prefix.value_at(step)?;
        out.iter_mut().for_each(|v| *v = 0.0);
        let k = out.len();
        out[if w[0] < 0.0 { 0 } else { k - 1 }] = 1.0;
        Ok(())
    }
}

/// Adversarial sampler that reads the increment of the current step, i.e.
/// `W_{t_{n+1}}`. Used to exercise the audit.
pub struct PeekingSampler;

impl CausalSampler for PeekingSampler {
    fn name(&self) -> &str {
        "peeking"
    }
    fn probabilities(&self, step: usize, prefix: &NoisePrefix<'_>, out: &mut [f64]) -> Result<()> {
        let w = prefix.value_at(step + 1)?;
        out.iter_mut().for_each(|v| *v = 0.0);
        let k = out.len();
        out[if w[0] < 0.0 { 0 } else { k - 1 }] = 1.0;
        Ok(())
    }
}

/// Per-run record of what causal samplers read.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct AuditLog {
    pub sampler: String,
    pub draws: usize,
    /// Largest `requested node - current step` observed over all draws.
    pub max_lookahead: i64,
    pub violations: usize,
}

impl AuditLog {
    pub fn passed(&self) -> bool {
        self.violations == 0 && self.max_lookahead <= 0
    }
}
