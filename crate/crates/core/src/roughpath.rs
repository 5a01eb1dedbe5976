//! Rough-path lifts `(B, BB)` sampled on a uniform time grid.
//!
//! The second level is stored densely for every ordered node pair `i < j`,
//! row-major over pairs and row-major inside each `k x k` block. Entry
//! `(l, j)` of `BB_{s,t}` approximates the iterated integral of
//! `dB^l_r dB^j_u` over `s < r < u < t`.

use alloc::vec;
use alloc::vec::Vec;
#[allow(unused_imports)]
use num_traits::Float;
use serde::{Deserialize, Serialize};

use crate::error::{input_err, Result};
use crate::math::{all_finite, norm2};

/// Uniform grid `t_i = i T / N`, `i = 0..=N`.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct TimeGrid {
    horizon: f64,
    steps: usize,
}

impl TimeGrid {
    pub fn new(horizon: f64, steps: usize) -> Result<Self> {
        if steps == 0 {
            return Err(input_err!("time grid needs at least one step"));
        }
        if !(horizon.is_finite() && horizon > 0.0) {
            return Err(input_err!("time horizon must be positive and finite, got {horizon}"));
        }
        Ok(TimeGrid { horizon, steps })
    }

    pub fn horizon(&self) -> f64 {
        self.horizon
    }

    pub fn steps(&self) -> usize {
        self.steps
    }

    pub fn nodes(&self) -> usize {
        self.steps + 1
    }

    pub fn dt(&self) -> f64 {
        self.horizon / self.steps as f64
    }

    pub fn time(&self, i: usize) -> f64 {
        i as f64 * self.horizon / self.steps as f64
    }

    /// Keeps every `stride`-th node.
    pub fn coarsen(&self, stride: usize) -> Result<TimeGrid> {
        if stride == 0 || self.steps % stride != 0 {
            return Err(input_err!("stride {stride} does not divide {} steps", self.steps));
        }
        TimeGrid::new(self.horizon, self.steps / stride)
    }

    pub fn refine(&self, factor: usize) -> Result<TimeGrid> {
        if factor == 0 {
            return Err(input_err!("refinement factor must be positive"));
        }
        TimeGrid::new(self.horizon, self.steps * factor)
    }

    pub(crate) fn ensure_same(&self, other: &TimeGrid) -> Result<()> {
        if self.steps != other.steps || self.horizon.to_bits() != other.horizon.to_bits() {
            return Err(input_err!(
                "grid mismatch: (T={}, N={}) vs (T={}, N={})",
                self.horizon,
                self.steps,
                other.horizon,
                other.steps
            ));
        }
        Ok(())
    }
}

/// How the symmetric part of the second level relates to the first level.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum BracketMode {
    /// Left-point (Itô) iterated sums; the bracket is the realised quadratic variation.
    ItoIdentity,
    /// Canonical lift of a piecewise-linear path; the bracket vanishes.
    Geometric,
}

impl BracketMode {
    pub fn code(self) -> u8 {
        match self {
            BracketMode::ItoIdentity => 0,
            BracketMode::Geometric => 1,
        }
    }

    pub fn from_code(code: u8) -> Option<Self> {
        match code {
            0 => Some(BracketMode::ItoIdentity),
            1 => Some(BracketMode::Geometric),
            _ => None,
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct RoughPath {
    grid: TimeGrid,
    dim: usize,
    first: Vec<f64>,
    second: Vec<f64>,
    bracket_mode: BracketMode,
    row_start: Vec<usize>,
    zero_block: Vec<f64>,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct HolderReport {
    pub alpha: f64,
    pub first_seminorm: f64,
    pub second_seminorm: f64,
}

fn row_starts(nodes: usize) -> Vec<usize> {
    let mut starts = Vec::with_capacity(nodes);
    let mut acc = 0;
    for i in 0..nodes {
        starts.push(acc);
        acc += nodes - 1 - i;
    }
    starts
}

/// Number of stored pairs `i < j` for `N + 1` nodes.
pub fn pair_count(steps: usize) -> usize {
    steps * (steps + 1) / 2
}

impl RoughPath {
    /// Assembles a path from raw storage, checking shapes and finiteness only.
    pub fn from_parts(
        grid: TimeGrid,
        dim: usize,
        first: Vec<f64>,
        second: Vec<f64>,
        bracket_mode: BracketMode,
    ) -> Result<Self> {
        if dim == 0 {
            return Err(input_err!("rough path dimension must be positive"));
        }
        if first.len() != grid.nodes() * dim {
            return Err(input_err!(
                "first level has {} entries, expected {}",
                first.len(),
                grid.nodes() * dim
            ));
        }
        if second.len() != pair_count(grid.steps()) * dim * dim {
            return Err(input_err!(
                "second level has {} entries, expected {}",
                second.len(),
                pair_count(grid.steps()) * dim * dim
            ));
        }
        if !all_finite(&first) || !all_finite(&second) {
            return Err(input_err!("rough path contains non-finite values"));
        }
        Ok(RoughPath {
            grid,
            dim,
            first,
            second,
            bracket_mode,
            row_start: row_starts(grid.nodes()),
            zero_block: vec![0.0; dim * dim],
        })
    }

    /// Itô lift of Brownian-type increments: `B` by cumulative sums from zero,
    /// `BB_{t_i,t_j} = sum_{i <= r < j} (B_r - B_i) (x) dW_r`.
    ///
    /// `increments` holds `N` consecutive `k`-vectors.
    pub fn ito_lift(increments: &[f64], dim: usize, grid: TimeGrid) -> Result<Self> {
        if dim == 0 || increments.len() != grid.steps() * dim {
            return Err(input_err!(
                "expected {} increments of dimension {dim}, got {} values",
                grid.steps(),
                increments.len()
            ));
        }
        if !all_finite(increments) {
            return Err(input_err!("increments contain non-finite values"));
        }
        let nodes = grid.nodes();
        let mut first = vec![0.0; nodes * dim];
        for n in 0..grid.steps() {
            for a in 0..dim {
                first[(n + 1) * dim + a] = first[n * dim + a] + increments[n * dim + a];
            }
        }
        let kk = dim * dim;
        let mut second = vec![0.0; pair_count(grid.steps()) * kk];
        let starts = row_starts(nodes);
        for i in 0..nodes {
            for j in i + 1..nodes {
                let r = j - 1;
                let dst = (starts[i] + (j - i - 1)) * kk;
                if j > i + 1 {
                    let src = (starts[i] + (j - i - 2)) * kk;
                    second.copy_within(src..src + kk, dst);
                }
                for l in 0..dim {
                    let lag = first[r * dim + l] - first[i * dim + l];
                    for m in 0..dim {
                        second[dst + l * dim + m] += lag * increments[r * dim + m];
                    }
                }
            }
        }
        RoughPath::from_parts(grid, dim, first, second, BracketMode::ItoIdentity)
    }

    /// Canonical lift of the piecewise-linear interpolant of `values`
    /// (`N + 1` consecutive `k`-vectors).
    pub fn smooth_lift(values: &[f64], dim: usize, grid: TimeGrid) -> Result<Self> {
        if dim == 0 || values.len() != grid.nodes() * dim {
            return Err(input_err!(
                "expected {} node values of dimension {dim}, got {} values",
                grid.nodes(),
                values.len()
            ));
        }
        if !all_finite(values) {
            return Err(input_err!("path values contain non-finite entries"));
        }
        let nodes = grid.nodes();
        let first = values.to_vec();
        let kk = dim * dim;
        let mut second = vec![0.0; pair_count(grid.steps()) * kk];
        let starts = row_starts(nodes);
        let mut step = vec![0.0; dim];
        for i in 0..nodes {
            for j in i + 1..nodes {
                let r = j - 1;
                for a in 0..dim {
                    step[a] = first[j * dim + a] - first[r * dim + a];
                }
                let dst = (starts[i] + (j - i - 1)) * kk;
                if j > i + 1 {
                    let src = (starts[i] + (j - i - 2)) * kk;
                    second.copy_within(src..src + kk, dst);
                }
                // Chen: BB_{i,j} = BB_{i,r} + BB_{r,j} + dB_{i,r} (x) dB_{r,j}
                for l in 0..dim {
                    let lag = first[r * dim + l] - first[i * dim + l];
                    for m in 0..dim {
                        second[dst + l * dim + m] += lag * step[m] + 0.5 * step[l] * step[m];
                    }
                }
            }
        }
        RoughPath::from_parts(grid, dim, first, second, BracketMode::Geometric)
    }

    pub fn grid(&self) -> &TimeGrid {
        &self.grid
    }

    pub fn dim(&self) -> usize {
        self.dim
    }

    pub fn bracket_mode(&self) -> BracketMode {
        self.bracket_mode
    }

    pub fn first_level(&self) -> &[f64] {
        &self.first
    }

    pub fn second_level(&self) -> &[f64] {
        &self.second
    }

    pub fn point(&self, i: usize) -> &[f64] {
        &self.first[i * self.dim..(i + 1) * self.dim]
    }

    /// `B_{t_j} - B_{t_i}` written into `out`.
    pub fn increment_into(&self, i: usize, j: usize, out: &mut [f64]) {
        let k = self.dim;
        for a in 0..k {
            out[a] = self.first[j * k + a] - self.first[i * k + a];
        }
    }

    pub fn increment(&self, i: usize, j: usize) -> Vec<f64> {
        let mut out = vec![0.0; self.dim];
        self.increment_into(i, j, &mut out);
        out
    }

    /// `BB_{t_i,t_j}` as a row-major `k x k` block; zero when `i >= j`.
    pub fn second(&self, i: usize, j: usize) -> &[f64] {
        if i >= j {
            return &self.zero_block;
        }
        let kk = self.dim * self.dim;
        let idx = (self.row_start[i] + (j - i - 1)) * kk;
        &self.second[idx..idx + kk]
    }

    /// `[B]_{s,t} = dB (x) dB - (BB + BB^T)`.
    pub fn bracket(&self, i: usize, j: usize) -> Vec<f64> {
        let k = self.dim;
        let d = self.increment(i, j);
        let bb = self.second(i, j);
        let mut out = vec![0.0; k * k];
        for a in 0..k {
            for b in 0..k {
                out[a * k + b] = d[a] * d[b] - bb[a * k + b] - bb[b * k + a];
            }
        }
        out
    }

    /// `max |dB_{s,t}|^2` over grid pairs; the natural size scale for Chen checks.
    pub fn scale(&self) -> f64 {
        let k = self.dim;
        let mut lo = vec![f64::INFINITY; k];
        let mut hi = vec![f64::NEG_INFINITY; k];
        for i in 0..self.grid.nodes() {
            for a in 0..k {
                lo[a] = lo[a].min(self.first[i * k + a]);
                hi[a] = hi[a].max(self.first[i * k + a]);
            }
        }
        (0..k).map(|a| (hi[a] - lo[a]).powi(2)).sum()
    }

    /// Largest entrywise violation of Chen's relation over all grid triples.
    pub fn chen_defect(&self) -> f64 {
        let k = self.dim;
        let nodes = self.grid.nodes();
        let mut worst: f64 = 0.0;
        let mut dsu = vec![0.0; k];
        let mut dut = vec![0.0; k];
        for s in 0..nodes {
            for u in s + 1..nodes {
                self.increment_into(s, u, &mut dsu);
                let bsu = self.second(s, u);
                for t in u + 1..nodes {
                    self.increment_into(u, t, &mut dut);
                    let bst = self.second(s, t);
                    let but = self.second(u, t);
                    for a in 0..k {
                        for b in 0..k {
                            let r = bst[a * k + b] - bsu[a * k + b] - but[a * k + b] - dsu[a] * dut[b];
                            worst = worst.max(r.abs());
                        }
                    }
                }
            }
        }
        worst
    }

    /// Largest entrywise deviation of `Sym(BB)` from `dB (x) dB / 2` over grid pairs.
    pub fn symmetry_defect(&self) -> f64 {
        let k = self.dim;
        let nodes = self.grid.nodes();
        let mut worst: f64 = 0.0;
        let mut d = vec![0.0; k];
        for s in 0..nodes {
            for t in s + 1..nodes {
                self.increment_into(s, t, &mut d);
                let bb = self.second(s, t);
                for a in 0..k {
                    for b in 0..k {
                        let sym = 0.5 * (bb[a * k + b] + bb[b * k + a]);
                        worst = worst.max((sym - 0.5 * d[a] * d[b]).abs());
                    }
                }
            }
        }
        worst
    }

    /// Grid-restricted Hölder seminorms `|dB|_alpha` and `|BB|_{2 alpha}`.
    pub fn holder_report(&self, alpha: f64) -> Result<HolderReport> {
        check_alpha(alpha)?;
        let (first_seminorm, second_seminorm) = holder_pair(self, None, alpha);
        Ok(HolderReport {
            alpha,
            first_seminorm,
            second_seminorm,
        })
    }

    /// Restriction to every `stride`-th node. The restriction of a lift is
    /// again a lift on the coarse grid (same bracket mode).
    pub fn coarsen(&self, stride: usize) -> Result<RoughPath> {
        let grid = self.grid.coarsen(stride)?;
        let k = self.dim;
        let nodes = grid.nodes();
        let mut first = Vec::with_capacity(nodes * k);
        for i in 0..nodes {
            first.extend_from_slice(self.point(i * stride));
        }
        let mut second = Vec::with_capacity(pair_count(grid.steps()) * k * k);
        for i in 0..nodes {
            for j in i + 1..nodes {
                second.extend_from_slice(self.second(i * stride, j * stride));
            }
        }
        RoughPath::from_parts(grid, k, first, second, self.bracket_mode)
    }
}

fn check_alpha(alpha: f64) -> Result<()> {
    if !(alpha > 0.0 && alpha <= 0.5) {
        return Err(input_err!("Hölder exponent must lie in (0, 1/2], got {alpha}"));
    }
    Ok(())
}

fn holder_pair(p: &RoughPath, q: Option<&RoughPath>, alpha: f64) -> (f64, f64) {
    let k = p.dim;
    let nodes = p.grid.nodes();
    let mut d = vec![0.0; k];
    let mut dq = vec![0.0; k];
    let mut bb = vec![0.0; k * k];
    let (mut first, mut second): (f64, f64) = (0.0, 0.0);
    for s in 0..nodes {
        for t in s + 1..nodes {
            let h = p.grid.time(t) - p.grid.time(s);
            p.increment_into(s, t, &mut d);
            bb.copy_from_slice(p.second(s, t));
            if let Some(q) = q {
                q.increment_into(s, t, &mut dq);
                for a in 0..k {
                    d[a] -= dq[a];
                }
                for (x, y) in bb.iter_mut().zip(q.second(s, t)) {
                    *x -= y;
                }
            }
            first = first.max(norm2(&d) / h.powf(alpha));
            second = second.max(norm2(&bb) / h.powf(2.0 * alpha));
        }
    }
    (first, second)
}

/// Inhomogeneous distance `|dB^1 - dB^2|_alpha + |BB^1 - BB^2|_{2 alpha}` on grid pairs.
pub fn rho_alpha(p: &RoughPath, q: &RoughPath, alpha: f64) -> Result<f64> {
    check_alpha(alpha)?;
    p.grid.ensure_same(&q.grid)?;
    if p.dim != q.dim {
        return Err(input_err!("dimension mismatch: {} vs {}", p.dim, q.dim));
    }
    let (a, b) = holder_pair(p, Some(q), alpha);
    Ok(a + b)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::rng::{normal, stream, Module};
    use proptest::prelude::*;

    fn brownian(seed: u64, grid: TimeGrid, k: usize) -> Vec<f64> {
        let mut rng = stream(seed, Module::Test, 0, 0);
        let sd = grid.dt().sqrt();
        (0..grid.steps() * k).map(|_| sd * normal(&mut rng)).collect()
    }

    #[test]
    fn ito_single_step_has_zero_second_level() {
        let grid = TimeGrid::new(1.0, 1).unwrap();
        let p = RoughPath::ito_lift(&[0.7, -1.3], 2, grid).unwrap();
        assert!(p.second(0, 1).iter().all(|&x| x == 0.0));
        assert_eq!(p.point(1), &[0.7, -1.3]);
    }

    #[test]
    fn ito_zero_path() {
        let grid = TimeGrid::new(2.0, 5).unwrap();
        let p = RoughPath::ito_lift(&[0.0; 10], 2, grid).unwrap();
        assert!(p.first_level().iter().all(|&x| x == 0.0));
        assert!(p.second_level().iter().all(|&x| x == 0.0));
    }

    #[test]
    fn ito_two_steps_scalar() {
        // BB_{0,T} = (B_0 - B_0) a + (B_1 - B_0) b = a b
        let grid = TimeGrid::new(1.0, 2).unwrap();
        let (a, b) = (0.3, -1.7);
        let p = RoughPath::ito_lift(&[a, b], 1, grid).unwrap();
        assert!((p.second(0, 2)[0] - a * b).abs() < 1e-15);
        assert_eq!(p.bracket_mode(), BracketMode::ItoIdentity);
    }

    #[test]
    fn lift_rejects_bad_input() {
        let grid = TimeGrid::new(1.0, 3).unwrap();
        assert!(RoughPath::ito_lift(&[0.0; 5], 2, grid).is_err());
        assert!(RoughPath::ito_lift(&[0.0, f64::NAN, 0.0], 1, grid).is_err());
        assert!(RoughPath::smooth_lift(&[0.0; 3], 1, grid).is_err());
        assert!(TimeGrid::new(1.0, 0).is_err());
    }

    #[test]
    fn smooth_single_segment_is_half_square() {
        let grid = TimeGrid::new(1.0, 1).unwrap();
        let p = RoughPath::smooth_lift(&[0.0, 0.0, 1.0, -2.0], 2, grid).unwrap();
        let bb = p.second(0, 1);
        assert_eq!(bb, &[0.5, -1.0, -1.0, 2.0]);
    }

    #[test]
    fn smooth_identity_path_area() {
        let grid = TimeGrid::new(1.0, 4).unwrap();
        let vals: Vec<f64> = (0..=4).map(|i| grid.time(i)).collect();
        let p = RoughPath::smooth_lift(&vals, 1, grid).unwrap();
        assert!((p.second(0, 4)[0] - 0.5).abs() < 1e-15);
    }

    #[test]
    fn smooth_lift_of_parabola_matches_exact_integrals() {
        // int_0^1 (t, t^2) (x) (1, 2t) dt = [[1/2, 2/3], [1/3, 1/2]]
        let exact = [0.5, 2.0 / 3.0, 1.0 / 3.0, 0.5];
        let mut last_err = f64::INFINITY;
        for &n in &[16usize, 64, 256] {
            let grid = TimeGrid::new(1.0, n).unwrap();
            let vals: Vec<f64> = (0..=n)
                .flat_map(|i| {
                    let t = grid.time(i);
                    [t, t * t]
                })
                .collect();
            let p = RoughPath::smooth_lift(&vals, 2, grid).unwrap();
            let err = p
                .second(0, n)
                .iter()
                .zip(exact.iter())
                .map(|(a, b)| (a - b).abs())
                .fold(0.0, f64::max);
            assert!(err <= grid.dt(), "n={n} err={err}");
            assert!(err < last_err);
            last_err = err;
        }
    }

    #[test]
    fn chen_holds_for_both_constructors_and_detects_corruption() {
        let grid = TimeGrid::new(1.0, 24).unwrap();
        let p = RoughPath::ito_lift(&brownian(3, grid, 2), 2, grid).unwrap();
        assert!(p.chen_defect() <= 1e-12 * (1.0 + p.scale()));
        let vals: Vec<f64> = (0..grid.nodes() * 3).map(|i| (i as f64 * 0.37).sin()).collect();
        let q = RoughPath::smooth_lift(&vals, 3, grid).unwrap();
        assert!(q.chen_defect() <= 1e-12 * (1.0 + q.scale()));
        assert!(q.symmetry_defect() <= 1e-12 * (1.0 + q.scale()));

        let mut second = p.second_level().to_vec();
        second[17] += 1.0;
        let bad = RoughPath::from_parts(grid, 2, p.first_level().to_vec(), second, p.bracket_mode()).unwrap();
        assert!(bad.chen_defect() >= 1.0 - 1e-12);
    }

    #[test]
    fn ito_bracket_is_realised_quadratic_variation() {
        let grid = TimeGrid::new(1.0, 10).unwrap();
        let inc = brownian(11, grid, 1);
        let p = RoughPath::ito_lift(&inc, 1, grid).unwrap();
        let qv: f64 = inc.iter().map(|x| x * x).sum();
        assert!((p.bracket(0, 10)[0] - qv).abs() < 1e-12);
    }

    #[test]
    fn holder_of_linear_path_against_zero() {
        let grid = TimeGrid::new(1.0, 8).unwrap();
        let line: Vec<f64> = (0..=8).map(|i| grid.time(i)).collect();
        let p = RoughPath::smooth_lift(&line, 1, grid).unwrap();
        let zero = RoughPath::smooth_lift(&[0.0; 9], 1, grid).unwrap();
        // max (t-s)^{1/2} = 1 and max (t-s)^2 / 2 / (t-s) = 1/2, both at the full interval
        let d = rho_alpha(&p, &zero, 0.5).unwrap();
        assert!((d - 1.5).abs() < 1e-14);
        let rep = p.holder_report(0.5).unwrap();
        assert!((rep.first_seminorm - 1.0).abs() < 1e-14);
        assert!((rep.second_seminorm - 0.5).abs() < 1e-14);
        assert_eq!(rho_alpha(&p, &p, 0.5).unwrap(), 0.0);
    }

    #[test]
    fn rho_rejects_grid_mismatch() {
        let p = RoughPath::smooth_lift(&[0.0; 5], 1, TimeGrid::new(1.0, 4).unwrap()).unwrap();
        let q = RoughPath::smooth_lift(&[0.0; 9], 1, TimeGrid::new(1.0, 8).unwrap()).unwrap();
        assert!(rho_alpha(&p, &q, 0.45).is_err());
        assert!(p.holder_report(0.0).is_err());
    }

    #[test]
    fn coarsening_restricts_and_does_not_increase_seminorms() {
        let grid = TimeGrid::new(1.0, 32).unwrap();
        let p = RoughPath::ito_lift(&brownian(5, grid, 2), 2, grid).unwrap();
        let c = p.coarsen(2).unwrap();
        assert_eq!(c.second(1, 5), p.second(2, 10));
        assert!(c.chen_defect() <= 1e-12 * (1.0 + c.scale()));
        let (rf, rc) = (p.holder_report(0.45).unwrap(), c.holder_report(0.45).unwrap());
        assert!(rc.first_seminorm <= rf.first_seminorm);
        assert!(rc.second_seminorm <= rf.second_seminorm);
    }

    #[test]
    fn ito_bracket_mean_is_time() {
        let grid = TimeGrid::new(1.0, 8).unwrap();
        let m = 10_000;
        let mut acc = [0.0; 4];
        for s in 0..m {
            let mut rng = stream(42, Module::Test, 1, s as u64);
            let sd = grid.dt().sqrt();
            let inc: Vec<f64> = (0..16).map(|_| sd * normal(&mut rng)).collect();
            let p = RoughPath::ito_lift(&inc, 2, grid).unwrap();
            for (a, b) in acc.iter_mut().zip(p.bracket(0, 8)) {
                *a += b / m as f64;
            }
        }
        let tol = 4.0 / (m as f64).sqrt();
        assert!((acc[0] - 1.0).abs() < tol && (acc[3] - 1.0).abs() < tol);
        assert!(acc[1].abs() < tol && acc[2].abs() < tol);
    }

    fn arb_path() -> impl Strategy<Value = (Vec<f64>, Vec<f64>, Vec<f64>)> {
        proptest::collection::vec(-2.0f64..2.0, 3 * 9)
            .prop_map(|v| (v[0..9].to_vec(), v[9..18].to_vec(), v[18..27].to_vec()))
    }

    proptest! {
        #[test]
        fn rho_is_a_metric((a, b, c) in arb_path()) {
            let grid = TimeGrid::new(1.0, 8).unwrap();
            let p = RoughPath::smooth_lift(&a, 1, grid).unwrap();
            let q = RoughPath::ito_lift(&b[..8], 1, grid).unwrap();
            let r = RoughPath::smooth_lift(&c, 1, grid).unwrap();
            let pq = rho_alpha(&p, &q, 0.45).unwrap();
            let qp = rho_alpha(&q, &p, 0.45).unwrap();
            let pr = rho_alpha(&p, &r, 0.45).unwrap();
            let rq = rho_alpha(&r, &q, 0.45).unwrap();
            prop_assert!(pq >= 0.0);
            prop_assert!((pq - qp).abs() <= 1e-12 * (1.0 + pq));
            prop_assert!(pq <= pr + rq + 1e-12 * (1.0 + pq));
            prop_assert_eq!(rho_alpha(&p, &p, 0.45).unwrap(), 0.0);
        }

        #[test]
        fn geometric_lifts_are_symmetric(v in proptest::collection::vec(-3.0f64..3.0, 2 * 13)) {
            let grid = TimeGrid::new(0.5, 12).unwrap();
            let p = RoughPath::smooth_lift(&v, 2, grid).unwrap();
            prop_assert!(p.symmetry_defect() <= 1e-12 * (1.0 + p.scale()));
        }
    }
}
