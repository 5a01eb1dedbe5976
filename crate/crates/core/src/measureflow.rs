//! Particle measure flows with derivative particles, Wasserstein distances
//! and the windowed-norm domain check.

use alloc::sync::Arc;
use alloc::vec;
use alloc::vec::Vec;
use core::fmt;
#[allow(unused_imports)]
use num_traits::Float;
use serde::{Deserialize, Serialize};

use crate::controlled::{
    combine, pair_table, Combine, Continuations, ControlledEnsemble, IndexPair, MomentReduction, NormSettings,
    Resampler,
};
use crate::error::{input_err, Result};
use crate::rng::{normal, stream, uniform, Module};
use crate::roughpath::{RoughPath, TimeGrid};

/// `t -> mu_t` held as a representation `(Y, Y')` with uniform weights.
#[derive(Clone)]
pub struct MeasureFlow {
    ensemble: ControlledEnsemble,
    has_derivative: bool,
    resampler: Option<Arc<dyn Resampler>>,
}

impl fmt::Debug for MeasureFlow {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.debug_struct("MeasureFlow")
            .field("grid", self.ensemble.grid())
            .field("particles", &self.ensemble.particles())
            .field("dim", &self.ensemble.value_dim())
            .field("has_derivative", &self.has_derivative)
            .field("resampler", &self.resampler.is_some())
            .finish()
    }
}

struct FrozenResampler {
    ensemble: ControlledEnsemble,
}

impl Resampler for FrozenResampler {
    fn continuations(&self, particle: usize, from: usize, count: usize) -> Continuations {
        let nodes = self.ensemble.grid().nodes();
        let len = nodes - from;
        let mut z = Vec::with_capacity(count * len * self.ensemble.value_dim());
        let mut zp = Vec::new();
        for _ in 0..count {
            for n in from..nodes {
                z.extend_from_slice(self.ensemble.z(particle, n));
                zp.extend_from_slice(self.ensemble.zp(particle, n));
            }
        }
        Continuations { count, len, z, zp }
    }
}

impl MeasureFlow {
    /// Flow with an explicit representation and optional resampler.
    pub fn new(ensemble: ControlledEnsemble, resampler: Option<Arc<dyn Resampler>>) -> Self {
        MeasureFlow {
            ensemble,
            has_derivative: true,
            resampler,
        }
    }

    /// Flow known only through positions; `Y'` is absent.
    pub fn from_positions(grid: TimeGrid, particles: usize, dim: usize, noise_dim: usize, y: Vec<f64>) -> Result<Self> {
        let zp = vec![0.0; y.len() * noise_dim];
        let ensemble = ControlledEnsemble::new(grid, particles, dim, noise_dim, y, zp)?;
        Ok(MeasureFlow {
            ensemble,
            has_derivative: false,
            resampler: None,
        })
    }

    /// `mu_t = mu_0` for all t, represented by the constant process with `Y' = 0`.
    pub fn constant(grid: TimeGrid, cloud: &[f64], dim: usize, noise_dim: usize) -> Result<Self> {
        if dim == 0 || cloud.is_empty() || cloud.len() % dim != 0 {
            return Err(input_err!("cloud must hold a positive number of {dim}-dimensional points"));
        }
        let p = cloud.len() / dim;
        let ensemble = ControlledEnsemble::from_fn(grid, p, dim, noise_dim, |i, _, z, zp| {
            z.copy_from_slice(&cloud[i * dim..(i + 1) * dim]);
            zp.iter_mut().for_each(|v| *v = 0.0);
        })?;
        let resampler: Arc<dyn Resampler> = Arc::new(FrozenResampler {
            ensemble: ensemble.clone(),
        });
        Ok(MeasureFlow {
            ensemble,
            has_derivative: true,
            resampler: Some(resampler),
        })
    }

    /// Deterministic flow: every future equals the stored path.
    pub fn deterministic(ensemble: ControlledEnsemble) -> Self {
        let resampler: Arc<dyn Resampler> = Arc::new(FrozenResampler {
            ensemble: ensemble.clone(),
        });
        MeasureFlow {
            ensemble,
            has_derivative: true,
            resampler: Some(resampler),
        }
    }

    pub fn ensemble(&self) -> &ControlledEnsemble {
        &self.ensemble
    }

    pub fn grid(&self) -> &TimeGrid {
        self.ensemble.grid()
    }

    pub fn particles(&self) -> usize {
        self.ensemble.particles()
    }

    pub fn dim(&self) -> usize {
        self.ensemble.value_dim()
    }

    pub fn has_derivative(&self) -> bool {
        self.has_derivative
    }

    pub fn resampler(&self) -> Option<&Arc<dyn Resampler>> {
        self.resampler.as_ref()
    }

    pub fn cloud(&self, node: usize) -> Vec<f64> {
        self.ensemble.cloud(node)
    }

    /// Componentwise mean of `mu_t`.
    pub fn mean(&self, node: usize) -> Vec<f64> {
        let d = self.dim();
        let mut out = vec![0.0; d];
        for p in 0..self.particles() {
            for (o, y) in out.iter_mut().zip(self.ensemble.z(p, node)) {
                *o += y;
            }
        }
        out.iter_mut().for_each(|v| *v /= self.particles() as f64);
        out
    }

    /// Same flow with particles reordered by `perm` (`new[i] = old[perm[i]]`).
    pub fn permuted(&self, perm: &[usize]) -> Result<Self> {
        if perm.len() != self.particles() {
            return Err(input_err!("permutation has wrong length"));
        }
        let e = &self.ensemble;
        let ensemble = ControlledEnsemble::from_fn(*e.grid(), e.particles(), e.value_dim(), e.noise_dim(), |p, n, z, zp| {
            z.copy_from_slice(e.z(perm[p], n));
            zp.copy_from_slice(e.zp(perm[p], n));
        })?;
        Ok(MeasureFlow {
            ensemble,
            has_derivative: self.has_derivative,
            resampler: None,
        })
    }

    /// `(c Y, c Y')`, without a resampler.
    pub fn scaled(&self, c: f64) -> Self {
        MeasureFlow {
            ensemble: self.ensemble.scaled(c),
            has_derivative: self.has_derivative,
            resampler: None,
        }
    }
}

/// Settings for the multi-dimensional W2 approximation.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct W2Settings {
    /// Number of random projections for the sliced distance.
    pub slices: usize,
    /// Use exact assignment when both clouds have this many points or fewer.
    pub exact_limit: usize,
    pub seed: u64,
}

impl Default for W2Settings {
    fn default() -> Self {
        W2Settings {
            slices: 64,
            exact_limit: 64,
            seed: 0,
        }
    }
}

/// Squared W2 between two 1-D empirical measures with uniform weights
/// (quantile coupling).
fn w2_sq_1d(a: &mut [f64], b: &mut [f64]) -> f64 {
    a.sort_by(|x, y| x.total_cmp(y));
    b.sort_by(|x, y| x.total_cmp(y));
    if a.len() == b.len() {
        return a.iter().zip(b.iter()).map(|(x, y)| (x - y) * (x - y)).sum::<f64>() / a.len() as f64;
    }
    let (na, nb) = (a.len(), b.len());
    let (mut i, mut j) = (0usize, 0usize);
    let (mut ua, mut ub) = (1.0 / na as f64, 1.0 / nb as f64);
    let mut acc = 0.0;
    while i < na && j < nb {
        let w = ua.min(ub);
        acc += w * (a[i] - b[j]) * (a[i] - b[j]);
        ua -= w;
        ub -= w;
        if ua <= 1e-15 {
            i += 1;
            ua = 1.0 / na as f64;
        }
        if ub <= 1e-15 {
            j += 1;
            ub = 1.0 / nb as f64;
        }
    }
    acc
}

/// Minimum-cost perfect matching (Hungarian algorithm, O(n^3)).
pub fn assignment(cost: &[f64], n: usize) -> Vec<usize> {
    let inf = f64::INFINITY;
    let mut u = vec![0.0; n + 1];
    let mut v = vec![0.0; n + 1];
    let mut p = vec![0usize; n + 1];
    let mut way = vec![0usize; n + 1];
    for i in 1..=n {
        p[0] = i;
        let mut j0 = 0usize;
        let mut minv = vec![inf; n + 1];
        let mut used = vec![false; n + 1];
        loop {
            used[j0] = true;
            let i0 = p[j0];
            let mut delta = inf;
            let mut j1 = 0usize;
            for j in 1..=n {
                if !used[j] {
                    let cur = cost[(i0 - 1) * n + (j - 1)] - u[i0] - v[j];
                    if cur < minv[j] {
                        minv[j] = cur;
                        way[j] = j0;
                    }
                    if minv[j] < delta {
                        delta = minv[j];
                        j1 = j;
                    }
                }
            }
            for j in 0..=n {
                if used[j] {
                    u[p[j]] += delta;
                    v[j] -= delta;
                } else {
                    minv[j] -= delta;
                }
            }
            j0 = j1;
            if p[j0] == 0 {
                break;
            }
        }
        loop {
            let j1 = way[j0];
            p[j0] = p[j1];
            j0 = j1;
            if j0 == 0 {
                break;
            }
        }
    }
    let mut row_to_col = vec![0usize; n];
    for j in 1..=n {
        if p[j] > 0 {
            row_to_col[p[j] - 1] = j - 1;
        }
    }
    row_to_col
}

/// W2 between two empirical clouds (particle-major, dimension `dim`).
///
/// Exact in one dimension and, for equal sizes up to `exact_limit`, by
/// assignment; otherwise the sliced distance over random directions, which
/// never exceeds the true value.
pub fn wasserstein2(a: &[f64], b: &[f64], dim: usize, settings: &W2Settings) -> Result<f64> {
    if dim == 0 || a.is_empty() || b.is_empty() || a.len() % dim != 0 || b.len() % dim != 0 {
        return Err(input_err!("wasserstein2 needs non-empty clouds of dimension {dim}"));
    }
    let (na, nb) = (a.len() / dim, b.len() / dim);
    if dim == 1 {
        return Ok(w2_sq_1d(&mut a.to_vec(), &mut b.to_vec()).sqrt());
    }
    if na == nb && na <= settings.exact_limit {
        let mut cost = vec![0.0; na * na];
        for i in 0..na {
            for j in 0..na {
                cost[i * na + j] = (0..dim).map(|c| (a[i * dim + c] - b[j * dim + c]).powi(2)).sum();
            }
        }
        let m = assignment(&cost, na);
        let total: f64 = (0..na).map(|i| cost[i * na + m[i]]).sum();
        return Ok((total / na as f64).sqrt());
    }
    let mut rng = stream(settings.seed, Module::Projection, dim as u64, 0);
    let mut acc = 0.0;
    let slices = settings.slices.max(1);
    let mut dir = vec![0.0; dim];
    for _ in 0..slices {
        let mut len = 0.0;
        while len < 1e-12 {
            dir.iter_mut().for_each(|x| *x = normal(&mut rng));
            len = dir.iter().map(|x| x * x).sum::<f64>().sqrt();
        }
        dir.iter_mut().for_each(|x| *x /= len);
        let mut pa: Vec<f64> = (0..na).map(|i| (0..dim).map(|c| a[i * dim + c] * dir[c]).sum()).collect();
        let mut pb: Vec<f64> = (0..nb).map(|i| (0..dim).map(|c| b[i * dim + c] * dir[c]).sum()).collect();
        acc += w2_sq_1d(&mut pa, &mut pb);
    }
    // E_theta |<theta, x>|^2 = |x|^2 / d for uniform directions
    Ok((dim as f64 * acc / slices as f64).sqrt())
}

/// `sup_t W2(a_t, b_t)` over the grid.
pub fn flow_distance(a: &MeasureFlow, b: &MeasureFlow, settings: &W2Settings) -> Result<f64> {
    a.grid().ensure_same(b.grid())?;
    if a.dim() != b.dim() {
        return Err(input_err!("flows have different state dimensions"));
    }
    let mut best: f64 = 0.0;
    for n in 0..a.grid().nodes() {
        best = best.max(wasserstein2(&a.cloud(n), &b.cloud(n), a.dim(), settings)?);
    }
    Ok(best)
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct DomainSettings {
    pub index: IndexPair,
    pub m: f64,
    pub m_bound: f64,
    pub epsilon: f64,
    pub inner_samples: usize,
    pub outer_limit: Option<usize>,
    pub stride: usize,
    pub reduction: MomentReduction,
}

impl DomainSettings {
    pub fn new(index: IndexPair, m: f64, m_bound: f64, epsilon: f64) -> Self {
        DomainSettings {
            index,
            m,
            m_bound,
            epsilon,
            inner_samples: 8,
            outer_limit: Some(64),
            stride: 0,
            reduction: MomentReduction::NInfty,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct DomainCertificate {
    pub m_bound: f64,
    pub epsilon: f64,
    pub m: f64,
    /// Largest windowed power-mean norm found.
    pub max_norm: f64,
    /// Node range of the window attaining `max_norm`.
    pub worst_window: (usize, usize),
    pub windows: usize,
    pub member: bool,
    pub lower_bound_mode: bool,
}

/// Evaluates the power-mean norm of the flow's representation on every
/// maximal window of width `< epsilon`.
///
/// Membership is certified for the stored representation only; a negative
/// answer does not exclude other representations.
pub fn check_domain(flow: &MeasureFlow, path: &RoughPath, settings: &DomainSettings) -> Result<DomainCertificate> {
    if !(settings.epsilon > 0.0) || !(settings.m_bound > 0.0) {
        return Err(input_err!("domain parameters M and epsilon must be positive"));
    }
    let mut ns = NormSettings::new(settings.index, settings.m);
    ns.reduction = settings.reduction;
    ns.combine = Combine::PowerMean;
    ns.inner_samples = settings.inner_samples;
    ns.outer_limit = settings.outer_limit;
    ns.stride = settings.stride;
    let resampler = flow.resampler().map(|r| r.as_ref());
    let table = pair_table(flow.ensemble(), path, &ns, resampler)?;
    let grid = flow.grid();
    let nodes = &table.nodes;
    let mut best = (0.0f64, (0usize, 0usize));
    let mut windows = 0;
    let mut last_hi = usize::MAX;
    for a in 0..nodes.len() {
        // largest b with t_b - t_a < epsilon
        let mut b = a;
        while b + 1 < nodes.len() && grid.time(nodes[b + 1]) - grid.time(nodes[a]) < settings.epsilon - 1e-12 {
            b += 1;
        }
        if b == a || b == last_hi {
            continue;
        }
        last_hi = b;
        windows += 1;
        let (parts, _) = table.max_in(nodes[a], nodes[b]);
        let value = combine(parts, settings.m, Combine::PowerMean);
        if value > best.0 || windows == 1 {
            best = (value, (nodes[a], nodes[b]));
        }
    }
    Ok(DomainCertificate {
        m_bound: settings.m_bound,
        epsilon: settings.epsilon,
        m: settings.m,
        max_norm: best.0,
        worst_window: best.1,
        windows,
        member: best.0 <= settings.m_bound,
        lower_bound_mode: table.lower_bound_mode,
    })
}

struct MixtureResampler {
    choose_a: Vec<bool>,
    index_b: Vec<usize>,
    a: Arc<dyn Resampler>,
    b: Arc<dyn Resampler>,
}

impl Resampler for MixtureResampler {
    fn continuations(&self, particle: usize, from: usize, count: usize) -> Continuations {
        if self.choose_a[particle] {
            self.a.continuations(particle, from, count)
        } else {
            self.b.continuations(self.index_b[particle], from, count)
        }
    }
}

/// Trajectory-coupled mixture: particle `i` follows `a` with probability
/// `lambda`, else `b`, for its whole path.
pub fn mix(a: &MeasureFlow, b: &MeasureFlow, lambda: f64, seed: u64, sub: u64) -> Result<MeasureFlow> {
    if !(0.0..=1.0).contains(&lambda) {
        return Err(input_err!("mixing weight must lie in [0, 1], got {lambda}"));
    }
    a.grid().ensure_same(b.grid())?;
    let (ea, eb) = (a.ensemble(), b.ensemble());
    if ea.value_dim() != eb.value_dim() || ea.noise_dim() != eb.noise_dim() {
        return Err(input_err!("flows have different shapes"));
    }
    let p = ea.particles();
    let pb = eb.particles();
    let choose_a: Vec<bool> = (0..p)
        .map(|i| uniform(&mut stream(seed, Module::Mixing, sub, i as u64)) < lambda)
        .collect();
    let index_b: Vec<usize> = (0..p).map(|i| if pb == p { i } else { i * pb / p }).collect();
    let ensemble = ControlledEnsemble::from_fn(*ea.grid(), p, ea.value_dim(), ea.noise_dim(), |i, n, z, zp| {
        if choose_a[i] {
            z.copy_from_slice(ea.z(i, n));
            zp.copy_from_slice(ea.zp(i, n));
        } else {
            z.copy_from_slice(eb.z(index_b[i], n));
            zp.copy_from_slice(eb.zp(index_b[i], n));
        }
    })?;
    let resampler: Option<Arc<dyn Resampler>> = match (a.resampler(), b.resampler()) {
        (Some(ra), Some(rb)) => Some(Arc::new(MixtureResampler {
            choose_a,
            index_b,
            a: ra.clone(),
            b: rb.clone(),
        })),
        _ => None,
    };
    Ok(MeasureFlow {
        ensemble,
        has_derivative: a.has_derivative && b.has_derivative,
        resampler,
    })
}

/// The flow `t -> Law(X_t)` of a solution, with `Y' = s0~(X)` and a
/// resampler that regenerates futures from the solver.
pub fn from_solution(sol: &crate::rsde::RsdeSolution) -> MeasureFlow {
    sol.to_flow()
}
