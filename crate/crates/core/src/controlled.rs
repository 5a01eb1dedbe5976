//! Stochastic controlled rough paths held as particle ensembles.
//!
//! An ensemble stores, for every particle and grid node, a value `Z` in
//! `R^v` and a Gubinelli derivative `Z'` in `R^{v x k}` (row-major, the last
//! index runs over the rough-path coordinates). When `v = o * k` the value is
//! read as an `o x k` matrix that can be integrated against the rough path.

use alloc::vec;
use alloc::vec::Vec;
#[allow(unused_imports)]
use num_traits::Float;
use serde::{Deserialize, Serialize};

use crate::error::{input_err, Error, Result};
use crate::math::{all_finite, contract_second, mat_vec_add, norm2, par_map};
use crate::roughpath::{RoughPath, TimeGrid};

/// Where a particle's randomness came from, so that its future can be
/// regenerated from any node.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct GenerationRecord {
    pub stream: u64,
    pub branch_node: usize,
}

#[derive(Debug, Clone, PartialEq)]
pub struct ControlledEnsemble {
    grid: TimeGrid,
    particles: usize,
    value_dim: usize,
    noise_dim: usize,
    z: Vec<f64>,
    zp: Vec<f64>,
    generation: Vec<GenerationRecord>,
}

impl ControlledEnsemble {
    pub fn new(
        grid: TimeGrid,
        particles: usize,
        value_dim: usize,
        noise_dim: usize,
        z: Vec<f64>,
        zp: Vec<f64>,
    ) -> Result<Self> {
        if particles == 0 || value_dim == 0 || noise_dim == 0 {
            return Err(input_err!("ensemble dimensions must be positive"));
        }
        let cells = particles * grid.nodes();
        if z.len() != cells * value_dim {
            return Err(input_err!("Z has {} entries, expected {}", z.len(), cells * value_dim));
        }
        if zp.len() != cells * value_dim * noise_dim {
            return Err(input_err!(
                "Z' has {} entries, expected {}",
                zp.len(),
                cells * value_dim * noise_dim
            ));
        }
        if !all_finite(&z) || !all_finite(&zp) {
            return Err(Error::Numeric("ensemble contains non-finite values".into()));
        }
        Ok(ControlledEnsemble {
            grid,
            particles,
            value_dim,
            noise_dim,
            z,
            zp,
            generation: Vec::new(),
        })
    }

    /// Builds an ensemble by evaluating `fill(particle, node, z, zp)` on every cell.
    pub fn from_fn<F>(
        grid: TimeGrid,
        particles: usize,
        value_dim: usize,
        noise_dim: usize,
        mut fill: F,
    ) -> Result<Self>
    where
        F: FnMut(usize, usize, &mut [f64], &mut [f64]),
    {
        let nodes = grid.nodes();
        let mut z = vec![0.0; particles * nodes * value_dim];
        let mut zp = vec![0.0; particles * nodes * value_dim * noise_dim];
        for p in 0..particles {
            for n in 0..nodes {
                let c = p * nodes + n;
                fill(
                    p,
                    n,
                    &mut z[c * value_dim..(c + 1) * value_dim],
                    &mut zp[c * value_dim * noise_dim..(c + 1) * value_dim * noise_dim],
                );
            }
        }
        ControlledEnsemble::new(grid, particles, value_dim, noise_dim, z, zp)
    }

    pub fn with_generation(mut self, records: Vec<GenerationRecord>) -> Result<Self> {
        if records.len() != self.particles {
            return Err(input_err!("one generation record per particle required"));
        }
        self.generation = records;
        Ok(self)
    }

    pub fn generation(&self) -> &[GenerationRecord] {
        &self.generation
    }

    pub fn grid(&self) -> &TimeGrid {
        &self.grid
    }

    pub fn particles(&self) -> usize {
        self.particles
    }

    pub fn value_dim(&self) -> usize {
        self.value_dim
    }

    pub fn noise_dim(&self) -> usize {
        self.noise_dim
    }

    pub fn z(&self, particle: usize, node: usize) -> &[f64] {
        let c = particle * self.grid.nodes() + node;
        &self.z[c * self.value_dim..(c + 1) * self.value_dim]
    }

    pub fn zp(&self, particle: usize, node: usize) -> &[f64] {
        let w = self.value_dim * self.noise_dim;
        let c = particle * self.grid.nodes() + node;
        &self.zp[c * w..(c + 1) * w]
    }

    pub fn values(&self) -> &[f64] {
        &self.z
    }

    pub fn derivatives(&self) -> &[f64] {
        &self.zp
    }

    /// Values of all particles at one node, particle-major.
    pub fn cloud(&self, node: usize) -> Vec<f64> {
        let mut out = Vec::with_capacity(self.particles * self.value_dim);
        for p in 0..self.particles {
            out.extend_from_slice(self.z(p, node));
        }
        out
    }

    /// `(c Z + d, c Z')`, used by the equivariance properties.
    pub fn scaled(&self, c: f64) -> ControlledEnsemble {
        let mut out = self.clone();
        out.z.iter_mut().for_each(|x| *x *= c);
        out.zp.iter_mut().for_each(|x| *x *= c);
        out
    }

    /// Pointwise `a Z1 + b Z2` on matching ensembles.
    pub fn linear_combination(&self, a: f64, other: &ControlledEnsemble, b: f64) -> Result<ControlledEnsemble> {
        self.grid.ensure_same(&other.grid)?;
        if self.particles != other.particles
            || self.value_dim != other.value_dim
            || self.noise_dim != other.noise_dim
        {
            return Err(input_err!("ensemble shapes differ"));
        }
        let mut out = self.clone();
        for (x, y) in out.z.iter_mut().zip(&other.z) {
            *x = a * *x + b * y;
        }
        for (x, y) in out.zp.iter_mut().zip(&other.zp) {
            *x = a * *x + b * y;
        }
        Ok(out)
    }

    fn check_path(&self, path: &RoughPath) -> Result<()> {
        self.grid.ensure_same(path.grid())?;
        if path.dim() != self.noise_dim {
            return Err(input_err!(
                "rough path has dimension {}, ensemble expects {}",
                path.dim(),
                self.noise_dim
            ));
        }
        Ok(())
    }
}

/// Compensated left-point Riemann sum `sum_u Z_u dB_{u,v} + Z'_u BB_{u,v}` over
/// the grid steps in `[from, to)`. Returns `particles x (v / k)` values.
pub fn rough_integral(ce: &ControlledEnsemble, path: &RoughPath, from: usize, to: usize) -> Result<Vec<f64>> {
    ce.check_path(path)?;
    if from > to || to > ce.grid.steps() {
        return Err(input_err!("invalid integration window [{from}, {to}]"));
    }
    let k = ce.noise_dim;
    if ce.value_dim % k != 0 {
        return Err(input_err!(
            "value dimension {} is not a multiple of the noise dimension {k}",
            ce.value_dim
        ));
    }
    let rows = ce.value_dim / k;
    let mut out = vec![0.0; ce.particles * rows];
    let mut db = vec![0.0; k];
    for p in 0..ce.particles {
        let acc = &mut out[p * rows..(p + 1) * rows];
        for u in from..to {
            path.increment_into(u, u + 1, &mut db);
            mat_vec_add(ce.z(p, u), rows, k, &db, acc);
            contract_second(ce.zp(p, u), rows, k, path.second(u, u + 1), acc);
        }
    }
    Ok(out)
}

/// `R^Z_{s,t} = dZ_{s,t} - Z'_s dB_{s,t}` for every particle (`particles x v`).
pub fn remainder(ce: &ControlledEnsemble, path: &RoughPath, s: usize, t: usize) -> Result<Vec<f64>> {
    ce.check_path(path)?;
    if s > t || t > ce.grid.steps() {
        return Err(input_err!("invalid pair ({s}, {t})"));
    }
    let (v, k) = (ce.value_dim, ce.noise_dim);
    let db = path.increment(s, t);
    let mut out = vec![0.0; ce.particles * v];
    for p in 0..ce.particles {
        let r = &mut out[p * v..(p + 1) * v];
        let (zs, zt) = (ce.z(p, s), ce.z(p, t));
        for a in 0..v {
            r[a] = zt[a] - zs[a];
        }
        let mut corr = vec![0.0; v];
        mat_vec_add(ce.zp(p, s), v, k, &db, &mut corr);
        for a in 0..v {
            r[a] -= corr[a];
        }
    }
    Ok(out)
}

/// Regularity pair `(beta, beta')` from the admissible index set.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct IndexPair {
    pub beta: f64,
    pub beta_p: f64,
}

impl IndexPair {
    /// Checks `1/(1+gamma) < beta' <= beta <= alpha` and `beta' <= (gamma - 1) beta`.
    pub fn new(beta: f64, beta_p: f64, alpha: f64, gamma: f64) -> Result<Self> {
        if !(gamma > 1.0 && gamma <= 2.0) {
            return Err(input_err!("spatial regularity gamma must lie in (1, 2], got {gamma}"));
        }
        let lower = 1.0 / (1.0 + gamma);
        let ok = beta_p > lower && beta_p <= beta && beta <= alpha && beta_p <= (gamma - 1.0) * beta;
        if !ok {
            return Err(input_err!(
                "index pair (beta={beta}, beta'={beta_p}) is outside Pi: need {lower:.4} < beta' <= beta <= alpha={alpha} and beta' <= (gamma-1) beta"
            ));
        }
        Ok(IndexPair { beta, beta_p })
    }

    /// Skips the membership check; for estimator tests on exponents outside the set.
    pub fn unchecked(beta: f64, beta_p: f64) -> Self {
        IndexPair { beta, beta_p }
    }
}

/// Reduction of the per-particle conditional moments over the outer law.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum MomentReduction {
    /// `L^m` mean over particles (`n = m`).
    NEqM,
    /// Maximum over particles, a finite-sample stand-in for the essential supremum.
    NInfty,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Combine {
    Sum,
    /// `((a^m + b^m + c^m) / 3)^{1/m}`.
    PowerMean,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct NormSettings {
    pub index: IndexPair,
    pub m: f64,
    pub reduction: MomentReduction,
    pub combine: Combine,
    /// Restrict pairs to `window.0 <= s < t <= window.1` (node indices).
    pub window: Option<(usize, usize)>,
    pub inner_samples: usize,
    /// Evaluate every `stride`-th node only; `0` picks `ceil(N / 256)`.
    pub stride: usize,
    /// Use at most this many outer particles (the first ones).
    pub outer_limit: Option<usize>,
}

impl NormSettings {
    pub fn new(index: IndexPair, m: f64) -> Self {
        NormSettings {
            index,
            m,
            reduction: MomentReduction::NInfty,
            combine: Combine::Sum,
            window: None,
            inner_samples: 16,
            stride: 0,
            outer_limit: None,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct NormEstimate {
    pub beta: f64,
    pub beta_p: f64,
    pub m: f64,
    pub reduction: MomentReduction,
    pub delta_z_norm: f64,
    pub zp_norm: f64,
    pub remainder_norm: f64,
    pub combined: f64,
    pub inner_samples: usize,
    /// Set when no resampler was available and unconditional moments were used.
    pub lower_bound_mode: bool,
    pub stride: usize,
    pub pairs: usize,
}

/// Fresh futures of one particle from a branch node.
#[derive(Debug, Clone, PartialEq)]
pub struct Continuations {
    pub count: usize,
    /// Nodes `from..=N`.
    pub len: usize,
    /// `count x len x v`
    pub z: Vec<f64>,
    /// `count x len x v x k`
    pub zp: Vec<f64>,
}

/// Regenerates conditional futures of an ensemble. The path of a particle
/// up to `from` is kept; everything after uses fresh randomness that is a
/// deterministic function of `(particle, from, sample)`.
pub trait Resampler: Send + Sync {
    fn continuations(&self, particle: usize, from: usize, count: usize) -> Continuations;
}

/// Per-pair component values (already scaled by the Hölder weights) on the
/// evaluated node set.
#[derive(Debug, Clone, PartialEq)]
pub struct PairTable {
    pub nodes: Vec<usize>,
    /// Upper-triangle over `nodes`, `[delta, derivative, remainder]`.
    pub values: Vec<[f64; 3]>,
    pub lower_bound_mode: bool,
    pub stride: usize,
}

impl PairTable {
    fn index(&self, a: usize, b: usize) -> usize {
        let n = self.nodes.len();
        a * (2 * n - a - 1) / 2 + (b - a - 1)
    }

    pub fn value(&self, a: usize, b: usize) -> [f64; 3] {
        self.values[self.index(a, b)]
    }

    /// Component maxima over pairs with `lo <= s < t <= hi` (node indices).
    pub fn max_in(&self, lo: usize, hi: usize) -> ([f64; 3], usize) {
        let mut best = [0.0f64; 3];
        let mut count = 0;
        let n = self.nodes.len();
        for a in 0..n {
            if self.nodes[a] < lo {
                continue;
            }
            for b in a + 1..n {
                if self.nodes[b] > hi {
                    break;
                }
                let v = self.value(a, b);
                for c in 0..3 {
                    best[c] = best[c].max(v[c]);
                }
                count += 1;
            }
        }
        (best, count)
    }
}

pub fn combine(parts: [f64; 3], m: f64, how: Combine) -> f64 {
    match how {
        Combine::Sum => parts[0] + parts[1] + parts[2],
        Combine::PowerMean => ((parts[0].powf(m) + parts[1].powf(m) + parts[2].powf(m)) / 3.0).powf(1.0 / m),
    }
}

fn evaluated_nodes(grid: &TimeGrid, settings: &NormSettings) -> (Vec<usize>, usize) {
    let n = grid.steps();
    let stride = if settings.stride == 0 {
        n.div_ceil(256).max(1)
    } else {
        settings.stride
    };
    let (lo, hi) = settings.window.unwrap_or((0, n));
    let mut nodes: Vec<usize> = (lo..=hi.min(n)).step_by(stride).collect();
    if nodes.last() != Some(&hi.min(n)) && hi.min(n) >= lo {
        nodes.push(hi.min(n));
    }
    (nodes, stride)
}

/// Builds the pair table of conditional-moment statistics.
///
/// With a resampler every outer particle is branched at each evaluated node
/// into `inner_samples` continuations (two-level Monte Carlo). Without one,
/// unconditional moments across particles are used and the table is flagged
/// as a lower bound.
pub fn pair_table(
    ce: &ControlledEnsemble,
    path: &RoughPath,
    settings: &NormSettings,
    resampler: Option<&dyn Resampler>,
) -> Result<PairTable> {
    ce.check_path(path)?;
    if settings.m < 2.0 {
        return Err(input_err!("moment order m must be at least 2, got {}", settings.m));
    }
    if let Some((lo, hi)) = settings.window {
        if lo >= hi || hi > ce.grid.steps() {
            return Err(input_err!("invalid window ({lo}, {hi})"));
        }
    }
    let (nodes, stride) = evaluated_nodes(&ce.grid, settings);
    let npairs = nodes.len() * nodes.len().saturating_sub(1) / 2;
    let (v, k) = (ce.value_dim, ce.noise_dim);
    let m = settings.m;
    let outer = settings.outer_limit.unwrap_or(ce.particles).min(ce.particles);
    let grid = ce.grid;
    let weight = |a: usize, b: usize| {
        let h = grid.time(nodes[b]) - grid.time(nodes[a]);
        (
            h.powf(settings.index.beta),
            h.powf(settings.index.beta_p),
            h.powf(settings.index.beta + settings.index.beta_p),
        )
    };

    let mut table = vec![[0.0f64; 3]; npairs];
    let lower_bound_mode = resampler.is_none() || settings.inner_samples == 0;

    if lower_bound_mode {
        let mut idx = 0;
        let mut corr = vec![0.0; v];
        for a in 0..nodes.len() {
            let s = nodes[a];
            for b in a + 1..nodes.len() {
                let t = nodes[b];
                let db = path.increment(s, t);
                let (mut dz_m, mut dzp_m) = (0.0, 0.0);
                let mut rem_mean = vec![0.0; v];
                for p in 0..outer {
                    let (zs, zt) = (ce.z(p, s), ce.z(p, t));
                    let dz: Vec<f64> = zt.iter().zip(zs).map(|(x, y)| x - y).collect();
                    dz_m += norm2(&dz).powf(m);
                    let dzp: Vec<f64> = ce.zp(p, t).iter().zip(ce.zp(p, s)).map(|(x, y)| x - y).collect();
                    dzp_m += norm2(&dzp).powf(m);
                    corr.iter_mut().for_each(|c| *c = 0.0);
                    mat_vec_add(ce.zp(p, s), v, k, &db, &mut corr);
                    for c in 0..v {
                        rem_mean[c] += dz[c] - corr[c];
                    }
                }
                let inv = 1.0 / outer as f64;
                rem_mean.iter_mut().for_each(|x| *x *= inv);
                let (wb, wbp, wr) = weight(a, b);
                table[idx] = [
                    (dz_m * inv).powf(1.0 / m) / wb,
                    (dzp_m * inv).powf(1.0 / m) / wbp,
                    norm2(&rem_mean) / wr,
                ];
                idx += 1;
            }
        }
    } else {
        let resampler = resampler.expect("checked above");
        let inner = settings.inner_samples;
        let chunk = 8usize;
        let chunks = outer.div_ceil(chunk);
        let partials: Vec<Vec<[f64; 3]>> = par_map(chunks, |c| {
            let mut part = vec![[0.0f64; 3]; npairs];
            let mut corr = vec![0.0; v];
            for p in c * chunk..((c + 1) * chunk).min(outer) {
                for a in 0..nodes.len() {
                    let s = nodes[a];
                    if a + 1 == nodes.len() {
                        break;
                    }
                    let cont = resampler.continuations(p, s, inner);
                    let zs = ce.z(p, s);
                    let zps = ce.zp(p, s);
                    let base = a * (2 * nodes.len() - a - 1) / 2;
                    for b in a + 1..nodes.len() {
                        let t = nodes[b];
                        let off = t - s;
                        let db = path.increment(s, t);
                        let (mut dz_m, mut dzp_m) = (0.0, 0.0);
                        let mut cond_mean = vec![0.0; v];
                        for j in 0..inner {
                            let zt = &cont.z[(j * cont.len + off) * v..(j * cont.len + off + 1) * v];
                            let mut sq = 0.0;
                            for c2 in 0..v {
                                let d = zt[c2] - zs[c2];
                                sq += d * d;
                                cond_mean[c2] += d;
                            }
                            dz_m += sq.sqrt().powf(m);
                            let w = v * k;
                            let zpt = &cont.zp[(j * cont.len + off) * w..(j * cont.len + off + 1) * w];
                            let sqp: f64 = zpt.iter().zip(zps).map(|(x, y)| (x - y) * (x - y)).sum();
                            dzp_m += sqp.sqrt().powf(m);
                        }
                        let inv = 1.0 / inner as f64;
                        corr.iter_mut().for_each(|x| *x = 0.0);
                        mat_vec_add(zps, v, k, &db, &mut corr);
                        for c2 in 0..v {
                            cond_mean[c2] = cond_mean[c2] * inv - corr[c2];
                        }
                        let (wb, wbp, wr) = weight(a, b);
                        let vals = [
                            (dz_m * inv).powf(1.0 / m) / wb,
                            (dzp_m * inv).powf(1.0 / m) / wbp,
                            norm2(&cond_mean) / wr,
                        ];
                        let slot = &mut part[base + (b - a - 1)];
                        match settings.reduction {
                            MomentReduction::NInfty => {
                                slot[0] = slot[0].max(vals[0]);
                                slot[1] = slot[1].max(vals[1]);
                            }
                            MomentReduction::NEqM => {
                                slot[0] += vals[0].powf(m);
                                slot[1] += vals[1].powf(m);
                            }
                        }
                        slot[2] = slot[2].max(vals[2]);
                    }
                }
            }
            part
        });
        for part in partials {
            for (slot, val) in table.iter_mut().zip(part) {
                match settings.reduction {
                    MomentReduction::NInfty => {
                        slot[0] = slot[0].max(val[0]);
                        slot[1] = slot[1].max(val[1]);
                    }
                    MomentReduction::NEqM => {
                        slot[0] += val[0];
                        slot[1] += val[1];
                    }
                }
                slot[2] = slot[2].max(val[2]);
            }
        }
        if settings.reduction == MomentReduction::NEqM {
            for slot in table.iter_mut() {
                slot[0] = (slot[0] / outer as f64).powf(1.0 / m);
                slot[1] = (slot[1] / outer as f64).powf(1.0 / m);
            }
        }
    }
    if table.iter().any(|v| !v.iter().all(|x| x.is_finite())) {
        return Err(Error::Numeric("norm estimate is not finite".into()));
    }
    Ok(PairTable {
        nodes,
        values: table,
        lower_bound_mode,
        stride,
    })
}

/// Estimates `||(Z, Z')||_{B; beta, beta'; m, n}` on grid pairs.
pub fn estimate_norm(
    ce: &ControlledEnsemble,
    path: &RoughPath,
    settings: &NormSettings,
    resampler: Option<&dyn Resampler>,
) -> Result<NormEstimate> {
    let table = pair_table(ce, path, settings, resampler)?;
    let (parts, pairs) = table.max_in(0, usize::MAX);
    Ok(NormEstimate {
        beta: settings.index.beta,
        beta_p: settings.index.beta_p,
        m: settings.m,
        reduction: settings.reduction,
        delta_z_norm: parts[0],
        zp_norm: parts[1],
        remainder_norm: parts[2],
        combined: combine(parts, settings.m, settings.combine),
        inner_samples: if table.lower_bound_mode { 0 } else { settings.inner_samples },
        lower_bound_mode: table.lower_bound_mode,
        stride: table.stride,
        pairs,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::rng::{normal, stream, Module};

    fn linear_path(grid: TimeGrid, slope: f64) -> RoughPath {
        let vals: Vec<f64> = (0..grid.nodes()).map(|i| slope * grid.time(i)).collect();
        RoughPath::smooth_lift(&vals, 1, grid).unwrap()
    }

    fn brownian_lift(seed: u64, grid: TimeGrid) -> RoughPath {
        let mut rng = stream(seed, Module::Test, 0, 0);
        let inc: Vec<f64> = (0..grid.steps()).map(|_| grid.dt().sqrt() * normal(&mut rng)).collect();
        RoughPath::ito_lift(&inc, 1, grid).unwrap()
    }

    #[test]
    fn constant_integrand_telescopes() {
        let grid = TimeGrid::new(1.0, 10).unwrap();
        let path = brownian_lift(1, grid);
        let ce = ControlledEnsemble::from_fn(grid, 3, 1, 1, |p, _, z, zp| {
            z[0] = 1.0 + p as f64;
            zp[0] = 0.0;
        })
        .unwrap();
        let out = rough_integral(&ce, &path, 2, 9).unwrap();
        let db = path.increment(2, 9)[0];
        for p in 0..3 {
            assert!((out[p] - (1.0 + p as f64) * db).abs() < 1e-14);
        }
    }

    #[test]
    fn path_against_itself_recovers_second_level() {
        let grid = TimeGrid::new(1.0, 12).unwrap();
        for path in [brownian_lift(4, grid), linear_path(grid, 2.0)] {
            let ce = ControlledEnsemble::from_fn(grid, 1, 1, 1, |_, n, z, zp| {
                z[0] = path.point(n)[0];
                zp[0] = 1.0;
            })
            .unwrap();
            let out = rough_integral(&ce, &path, 0, 12).unwrap();
            assert!((out[0] - path.second(0, 12)[0]).abs() < 1e-13);
        }
    }

    #[test]
    fn integral_of_smooth_path_converges_to_antiderivative() {
        for &n in &[16usize, 64, 256] {
            let grid = TimeGrid::new(1.0, n).unwrap();
            let vals: Vec<f64> = (0..=n).map(|i| (3.0 * grid.time(i)).sin()).collect();
            let path = RoughPath::smooth_lift(&vals, 1, grid).unwrap();
            let ce = ControlledEnsemble::from_fn(grid, 1, 1, 1, |_, i, z, zp| {
                z[0] = vals[i];
                zp[0] = 1.0;
            })
            .unwrap();
            let out = rough_integral(&ce, &path, 0, n).unwrap()[0];
            let exact = 0.5 * (vals[n] * vals[n] - vals[0] * vals[0]);
            assert!((out - exact).abs() < grid.dt().powf(0.9), "n={n}");
        }
    }

    #[test]
    fn integral_is_additive_and_linear() {
        let grid = TimeGrid::new(1.0, 20).unwrap();
        let path = brownian_lift(9, grid);
        let mut rng = stream(3, Module::Test, 0, 0);
        let mk = |rng: &mut rand_chacha::ChaCha8Rng| {
            let z: Vec<f64> = (0..2 * 21).map(|_| normal(rng)).collect();
            let zp: Vec<f64> = (0..2 * 21).map(|_| normal(rng)).collect();
            ControlledEnsemble::new(grid, 2, 1, 1, z, zp).unwrap()
        };
        let (a, b) = (mk(&mut rng), mk(&mut rng));
        let whole = rough_integral(&a, &path, 3, 17).unwrap();
        let left = rough_integral(&a, &path, 3, 8).unwrap();
        let right = rough_integral(&a, &path, 8, 17).unwrap();
        for p in 0..2 {
            assert!((whole[p] - left[p] - right[p]).abs() < 1e-13);
        }
        let lin = a.linear_combination(2.0, &b, -0.5).unwrap();
        let ib = rough_integral(&b, &path, 3, 17).unwrap();
        let il = rough_integral(&lin, &path, 3, 17).unwrap();
        for p in 0..2 {
            assert!((il[p] - (2.0 * whole[p] - 0.5 * ib[p])).abs() < 1e-12);
        }
    }

    #[test]
    fn remainder_cases() {
        let grid = TimeGrid::new(1.0, 6).unwrap();
        let path = brownian_lift(2, grid);
        let linear = ControlledEnsemble::from_fn(grid, 1, 1, 1, |_, n, z, zp| {
            z[0] = 3.0 * path.point(n)[0];
            zp[0] = 3.0;
        })
        .unwrap();
        let time = ControlledEnsemble::from_fn(grid, 1, 1, 1, |_, n, z, zp| {
            z[0] = grid.time(n);
            zp[0] = 0.0;
        })
        .unwrap();
        for s in 0..6 {
            for t in s..=6 {
                assert!(remainder(&linear, &path, s, t).unwrap()[0].abs() < 1e-14);
                let r = remainder(&time, &path, s, t).unwrap()[0];
                assert!((r - (grid.time(t) - grid.time(s))).abs() < 1e-14);
            }
        }
        assert!(rough_integral(&time, &path, 4, 2).is_err());
    }

    #[test]
    fn deterministic_time_ensemble_norm() {
        let grid = TimeGrid::new(2.0, 16).unwrap();
        let path = linear_path(grid, 1.0);
        let ce = ControlledEnsemble::from_fn(grid, 4, 1, 1, |_, n, z, zp| {
            z[0] = grid.time(n);
            zp[0] = 0.0;
        })
        .unwrap();
        let beta = 0.4;
        let est = estimate_norm(&ce, &path, &NormSettings::new(IndexPair::unchecked(beta, 0.35), 4.0), None).unwrap();
        assert!(est.lower_bound_mode);
        assert!((est.delta_z_norm - 2.0f64.powf(1.0 - beta)).abs() < 1e-12);
        assert_eq!(est.zp_norm, 0.0);

        let flat = ControlledEnsemble::from_fn(grid, 4, 1, 1, |_, _, z, zp| {
            z[0] = 5.0;
            zp[0] = 0.0;
        })
        .unwrap();
        let est = estimate_norm(&flat, &path, &NormSettings::new(IndexPair::unchecked(beta, 0.35), 4.0), None).unwrap();
        assert_eq!((est.delta_z_norm, est.zp_norm, est.remainder_norm), (0.0, 0.0, 0.0));
    }

    #[test]
    fn norm_scales_with_ensemble() {
        let grid = TimeGrid::new(1.0, 12).unwrap();
        let path = brownian_lift(5, grid);
        let mut rng = stream(8, Module::Test, 0, 0);
        let z: Vec<f64> = (0..5 * 13).map(|_| normal(&mut rng)).collect();
        let zp: Vec<f64> = (0..5 * 13).map(|_| normal(&mut rng)).collect();
        let ce = ControlledEnsemble::new(grid, 5, 1, 1, z, zp).unwrap();
        let settings = NormSettings::new(IndexPair::unchecked(0.45, 0.4), 3.0);
        let a = estimate_norm(&ce, &path, &settings, None).unwrap();
        let b = estimate_norm(&ce.scaled(-2.5), &path, &settings, None).unwrap();
        assert!((b.delta_z_norm - 2.5 * a.delta_z_norm).abs() < 1e-12 * a.delta_z_norm.max(1.0));
        assert!((b.zp_norm - 2.5 * a.zp_norm).abs() < 1e-12 * a.zp_norm.max(1.0));
    }

    #[test]
    fn index_pair_membership() {
        assert!(IndexPair::new(0.45, 0.4, 0.45, 2.0).is_ok());
        assert!(IndexPair::new(0.4, 0.45, 0.45, 2.0).is_err());
        assert!(IndexPair::new(0.45, 0.3, 0.45, 2.0).is_err());
        assert!(IndexPair::new(0.45, 0.4, 0.45, 1.5).is_err());
        assert!(IndexPair::new(0.5, 0.4, 0.45, 2.0).is_err());
    }

    #[test]
    fn power_mean_combination() {
        let v = combine([1.0, 2.0, 3.0], 2.0, Combine::PowerMean);
        assert!((v - (14.0f64 / 3.0).sqrt()).abs() < 1e-14);
        assert_eq!(combine([1.0, 2.0, 3.0], 2.0, Combine::Sum), 6.0);
    }

    /// A toy Brownian ensemble `Z = W` with exact resampling.
    struct BrownianResampler {
        grid: TimeGrid,
        paths: Vec<f64>,
    }

    impl Resampler for BrownianResampler {
        fn continuations(&self, particle: usize, from: usize, count: usize) -> Continuations {
            let nodes = self.grid.nodes();
            let len = nodes - from;
            let mut z = vec![0.0; count * len];
            for j in 0..count {
                let mut rng = stream(77, Module::Resample, (from as u64) << 20 | j as u64, particle as u64);
                z[j * len] = self.paths[particle * nodes + from];
                for i in 1..len {
                    z[j * len + i] = z[j * len + i - 1] + self.grid.dt().sqrt() * normal(&mut rng);
                }
            }
            Continuations {
                count,
                len,
                z,
                zp: vec![0.0; count * len],
            }
        }
    }

    #[test]
    fn lower_bound_mode_does_not_exceed_two_level() {
        let grid = TimeGrid::new(1.0, 16).unwrap();
        let path = brownian_lift(12, grid);
        let particles = 64;
        let mut paths = vec![0.0; particles * grid.nodes()];
        for p in 0..particles {
            let mut rng = stream(13, Module::Test, 0, p as u64);
            for n in 1..grid.nodes() {
                paths[p * grid.nodes() + n] = paths[p * grid.nodes() + n - 1] + grid.dt().sqrt() * normal(&mut rng);
            }
        }
        let ce = ControlledEnsemble::new(grid, particles, 1, 1, paths.clone(), vec![0.0; paths.len()]).unwrap();
        let res = BrownianResampler { grid, paths };
        let mut settings = NormSettings::new(IndexPair::unchecked(0.45, 0.4), 4.0);
        settings.inner_samples = 32;
        let two = estimate_norm(&ce, &path, &settings, Some(&res)).unwrap();
        let lb = estimate_norm(&ce, &path, &settings, None).unwrap();
        assert!(!two.lower_bound_mode && lb.lower_bound_mode);
        assert!(lb.delta_z_norm <= two.delta_z_norm);
        assert!(lb.remainder_norm <= two.remainder_norm);
        // E|W_t - W_s|^4 = 3 h^2, so the conditional L^4 norm is 3^{1/4} h^{1/2}
        let target = 3f64.powf(0.25);
        assert!(two.delta_z_norm > 0.7 * target && two.delta_z_norm < 2.0 * target);
    }
}
