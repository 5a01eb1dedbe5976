//! Forward solver for controlled rough SDEs under relaxed policies, the a
//! priori norm monitor, and martingale-problem diagnostics.

use alloc::string::{String, ToString};
use alloc::sync::Arc;
use alloc::vec;
use alloc::vec::Vec;
#[allow(unused_imports)]
use num_traits::Float;
use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::controlled::{
    estimate_norm, rough_integral, Continuations, ControlledEnsemble, GenerationRecord, IndexPair, NormEstimate,
    NormSettings, Resampler,
};
use crate::error::{input_err, Error, Result};
use crate::math::{contract_second, mat_vec_add, mean, par_map, two_sided_critical, variance};
use crate::measureflow::MeasureFlow;
use crate::policy::{AuditLog, NoisePrefix, PolicyMode, RelaxedPolicy};
use crate::rng::{normal, stream, uniform, Module};
use crate::roughpath::{RoughPath, TimeGrid};
use crate::vectorfield::{
    build_cvf_from_flow, compose, cvf_norm, hat_derivative, CoefficientSet, ControlledVectorField, CvfNorm, FlowField,
};

/// Blow-up threshold on `|X|_inf`.
pub const BLOW_UP: f64 = 1e6;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum InitialLaw {
    Dirac { point: Vec<f64> },
    Gaussian { mean: Vec<f64>, sd: Vec<f64> },
    Uniform { lower: Vec<f64>, upper: Vec<f64> },
    /// Particle `p` starts at point `p mod len` of the cloud.
    Cloud { dim: usize, points: Vec<f64> },
}

impl InitialLaw {
    pub fn dim(&self) -> usize {
        match self {
            InitialLaw::Dirac { point } => point.len(),
            InitialLaw::Gaussian { mean, .. } => mean.len(),
            InitialLaw::Uniform { lower, .. } => lower.len(),
            InitialLaw::Cloud { dim, .. } => *dim,
        }
    }

    pub fn validate(&self) -> Result<()> {
        let ok = match self {
            InitialLaw::Dirac { point } => !point.is_empty(),
            InitialLaw::Gaussian { mean, sd } => {
                !mean.is_empty() && mean.len() == sd.len() && sd.iter().all(|s| *s >= 0.0)
            }
            InitialLaw::Uniform { lower, upper } => {
                !lower.is_empty() && lower.len() == upper.len() && lower.iter().zip(upper).all(|(a, b)| a <= b)
            }
            InitialLaw::Cloud { dim, points } => *dim > 0 && !points.is_empty() && points.len() % dim == 0,
        };
        if ok {
            Ok(())
        } else {
            Err(input_err!("malformed initial law {self:?}"))
        }
    }

    /// Draw for particle `p`; a pure function of `(seed, p)`.
    pub fn sample(&self, seed: u64, particle: usize, out: &mut [f64]) {
        let mut rng = stream(seed, Module::InitialState, 0, particle as u64);
        match self {
            InitialLaw::Dirac { point } => out.copy_from_slice(point),
            InitialLaw::Gaussian { mean, sd } => {
                for c in 0..mean.len() {
                    out[c] = mean[c] + sd[c] * normal(&mut rng);
                }
            }
            InitialLaw::Uniform { lower, upper } => {
                for c in 0..lower.len() {
                    out[c] = lower[c] + (upper[c] - lower[c]) * uniform(&mut rng);
                }
            }
            InitialLaw::Cloud { dim, points } => {
                let n = points.len() / dim;
                let i = particle % n;
                out.copy_from_slice(&points[i * dim..(i + 1) * dim]);
            }
        }
    }

    pub fn sample_cloud(&self, seed: u64, particles: usize) -> Vec<f64> {
        let d = self.dim();
        let mut out = vec![0.0; particles * d];
        for p in 0..particles {
            self.sample(seed, p, &mut out[p * d..(p + 1) * d]);
        }
        out
    }
}

/// The frozen environment `(B, mu)` seen by a representative agent.
#[derive(Clone)]
pub struct Environment {
    model: Arc<dyn CoefficientSet>,
    flow: Arc<MeasureFlow>,
    path: Arc<RoughPath>,
    field: Arc<FlowField>,
}

impl Environment {
    pub fn new(model: Arc<dyn CoefficientSet>, flow: Arc<MeasureFlow>, path: Arc<RoughPath>) -> Result<Self> {
        flow.grid().ensure_same(path.grid())?;
        let dims = model.dims();
        if path.dim() != dims.common {
            return Err(input_err!(
                "rough path has dimension {}, model expects {}",
                path.dim(),
                dims.common
            ));
        }
        let field = Arc::new(build_cvf_from_flow(model.clone(), &flow)?);
        Ok(Environment {
            model,
            flow,
            path,
            field,
        })
    }

    pub fn model(&self) -> &Arc<dyn CoefficientSet> {
        &self.model
    }
    pub fn flow(&self) -> &Arc<MeasureFlow> {
        &self.flow
    }
    pub fn path(&self) -> &Arc<RoughPath> {
        &self.path
    }
    pub fn field(&self) -> &Arc<FlowField> {
        &self.field
    }
    pub fn grid(&self) -> &TimeGrid {
        self.path.grid()
    }
}

/// Initial states and idiosyncratic increments for every particle.
#[derive(Debug, Clone, PartialEq)]
pub struct IdioNoise {
    pub particles: usize,
    pub dim: usize,
    pub steps: usize,
    /// `particles x d`
    pub x0: Vec<f64>,
    /// `particles x steps x l`
    pub dw: Vec<f64>,
}

impl IdioNoise {
    pub fn increments(&self, particle: usize) -> &[f64] {
        let w = self.steps * self.dim;
        &self.dw[particle * w..(particle + 1) * w]
    }
}

/// Draws `X_0` and `dW` from independent per-particle streams.
pub fn sample_noise(init: &InitialLaw, grid: &TimeGrid, idio_dim: usize, particles: usize, seed: u64) -> Result<IdioNoise> {
    init.validate()?;
    if particles == 0 {
        return Err(input_err!("at least one particle is required"));
    }
    let n = grid.steps();
    let sq = grid.dt().sqrt();
    let x0 = init.sample_cloud(seed, particles);
    let rows = par_map(particles, |p| {
        let mut rng = stream(seed, Module::Idiosyncratic, 0, p as u64);
        (0..n * idio_dim).map(|_| sq * normal(&mut rng)).collect::<Vec<f64>>()
    });
    Ok(IdioNoise {
        particles,
        dim: idio_dim,
        steps: n,
        x0,
        dw: rows.concat(),
    })
}

struct SolveContext {
    env: Environment,
    policy: Arc<RelaxedPolicy>,
    seed: u64,
}

/// Scratch buffers for one Euler-Davie step.
struct Workspace {
    drift: Vec<f64>,
    bbar: Vec<f64>,
    sig: Vec<f64>,
    noise: Vec<f64>,
    s0: Vec<f64>,
    hat: Vec<f64>,
    rough: Vec<f64>,
    rough2: Vec<f64>,
    db: Vec<f64>,
    probs: Vec<f64>,
}

impl Workspace {
    fn new(env: &Environment) -> Self {
        let d = env.model.dims();
        Workspace {
            drift: vec![0.0; d.state],
            bbar: vec![0.0; d.state],
            sig: vec![0.0; d.state * d.idio],
            noise: vec![0.0; d.state],
            s0: vec![0.0; d.state * d.common],
            hat: vec![0.0; d.state * d.common * d.common],
            rough: vec![0.0; d.state],
            rough2: vec![0.0; d.state],
            db: vec![0.0; d.common],
            probs: vec![0.0; env.model.actions().len()],
        }
    }
}

/// Relaxed drift `sum_u pi(u) b(t, x, m, u)` into `ws.bbar`.
fn mixed_drift(env: &Environment, t: f64, x: &[f64], m: &[f64], probs: &[f64], ws: &mut Workspace) {
    ws.bbar.iter_mut().for_each(|v| *v = 0.0);
    let actions = env.model.actions();
    for (i, &pi) in probs.iter().enumerate() {
        if pi == 0.0 {
            continue;
        }
        env.model.drift(t, x, m, actions.get(i), &mut ws.drift);
        for (b, v) in ws.bbar.iter_mut().zip(&ws.drift) {
            *b += pi * v;
        }
    }
}

/// One Euler-Davie step:
/// `x + bbar dt + sigma dW + s0 dB + (grad s0 s0 + s0') BB`.
fn euler_davie(env: &Environment, n: usize, x: &[f64], probs: &[f64], dw: &[f64], ws: &mut Workspace, out: &mut [f64]) {
    let dims = env.model.dims();
    let (d, l, k) = (dims.state, dims.idio, dims.common);
    let grid = env.grid();
    let t = grid.time(n);
    let dt = grid.dt();
    let m = env.field.features(n);
    mixed_drift(env, t, x, m, probs, ws);
    env.model.diffusion(t, x, m, &mut ws.sig);
    ws.noise.iter_mut().for_each(|v| *v = 0.0);
    mat_vec_add(&ws.sig, d, l, dw, &mut ws.noise);
    env.field.value(n, x, &mut ws.s0);
    env.path.increment_into(n, n + 1, &mut ws.db);
    ws.rough.iter_mut().for_each(|v| *v = 0.0);
    mat_vec_add(&ws.s0, d, k, &ws.db, &mut ws.rough);
    hat_derivative(env.field.as_ref(), n, x, &mut ws.hat);
    ws.rough2.iter_mut().for_each(|v| *v = 0.0);
    contract_second(&ws.hat, d, k, env.path.second(n, n + 1), &mut ws.rough2);
    for i in 0..d {
        out[i] = x[i] + ws.bbar[i] * dt + ws.noise[i] + ws.rough[i] + ws.rough2[i];
    }
}

fn sample_index(probs: &[f64], u: f64) -> usize {
    let mut acc = 0.0;
    for (i, p) in probs.iter().enumerate() {
        acc += p;
        if u < acc {
            return i;
        }
    }
    probs.iter().rposition(|&p| p > 0.0).unwrap_or(0)
}

struct ParticleRun {
    traj: Vec<f64>,
    mixtures: Vec<f64>,
    furthest_lookahead: i64,
    draws: usize,
}

/// Integrates one particle from node `from` with increments `dw_all`
/// (all `N` steps; only steps `>= from` are consumed by the dynamics, the
/// prefix is visible to causal samplers).
fn run_particle(
    ctx: &SolveContext,
    particle: usize,
    from: usize,
    x_from: &[f64],
    dw_all: &[f64],
    control: &mut impl Rng,
) -> Result<ParticleRun> {
    let env = &ctx.env;
    let dims = env.model.dims();
    let (d, l) = (dims.state, dims.idio);
    let grid = env.grid();
    let steps = grid.steps();
    let kk = env.model.actions().len();
    let mut ws = Workspace::new(env);
    let mut traj = Vec::with_capacity((steps - from + 1) * d);
    traj.extend_from_slice(x_from);
    let mut mixtures = vec![0.0; (steps - from) * kk];
    let mut x = x_from.to_vec();
    let mut next = vec![0.0; d];
    let (mut lookahead, mut draws) = (i64::MIN, 0usize);
    for n in from..steps {
        let probs: &[f64] = match ctx.policy.mode() {
            PolicyMode::Feedback => ctx.policy.probabilities(n, &x).expect("feedback policy"),
            PolicyMode::OpenLoopCausal => {
                let sampler = ctx.policy.sampler().expect("causal policy");
                let prefix = NoisePrefix::new(dw_all, l, n);
                let mut dist = vec![0.0; kk];
                sampler.probabilities(n, &prefix, &mut dist)?;
                if let Some(r) = prefix.violation() {
                    return Err(Error::Causality { step: n, requested: r });
                }
                lookahead = lookahead.max(prefix.furthest() as i64 - n as i64);
                draws += 1;
                let u = uniform(control);
                ws.probs.iter_mut().for_each(|v| *v = 0.0);
                ws.probs[sample_index(&dist, u)] = 1.0;
                &ws.probs.clone()
            }
        };
        mixtures[(n - from) * kk..(n - from + 1) * kk].copy_from_slice(probs);
        euler_davie(env, n, &x, probs, &dw_all[n * l..(n + 1) * l], &mut ws, &mut next);
        let mag = next.iter().fold(0.0f64, |a, v| a.max(v.abs()));
        if !(mag <= BLOW_UP) {
            return Err(Error::Diverged {
                step: n + 1,
                particle,
                magnitude: mag,
            });
        }
        x.copy_from_slice(&next);
        traj.extend_from_slice(&x);
    }
    Ok(ParticleRun {
        traj,
        mixtures,
        furthest_lookahead: lookahead,
        draws,
    })
}

/// Numerical solution with its Gubinelli-derivative slot `X' = s0~(X)`.
#[derive(Clone)]
pub struct RsdeSolution {
    x: Arc<ControlledEnsemble>,
    dw: Arc<Vec<f64>>,
    mixtures: Vec<f64>,
    audit: Option<AuditLog>,
    ctx: Arc<SolveContext>,
}

/// Which controlled path a solution resampler regenerates.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub enum View {
    /// `(X, s0~(X))`
    State,
    /// `(s0~(X), s0^'(X))`
    Diffusion,
}

struct SolutionResampler {
    ctx: Arc<SolveContext>,
    x: Arc<ControlledEnsemble>,
    dw: Arc<Vec<f64>>,
    view: View,
}

impl SolutionResampler {
    fn emit(&self, node: usize, x: &[f64], z: &mut Vec<f64>, zp: &mut Vec<f64>) {
        let field = self.ctx.env.field.as_ref();
        let dims = self.ctx.env.model.dims();
        let (d, k) = (dims.state, dims.common);
        match self.view {
            View::State => {
                z.extend_from_slice(x);
                let at = zp.len();
                zp.resize(at + d * k, 0.0);
                field.value(node, x, &mut zp[at..]);
            }
            View::Diffusion => {
                let at = z.len();
                z.resize(at + d * k, 0.0);
                field.value(node, x, &mut z[at..]);
                let at = zp.len();
                zp.resize(at + d * k * k, 0.0);
                hat_derivative(field, node, x, &mut zp[at..]);
            }
        }
    }
}

impl Resampler for SolutionResampler {
    /// Sample 0 is the stored future; samples `j >= 1` use the stream
    /// `(seed, Resample, (from << 20) | j, particle)`.
    fn continuations(&self, particle: usize, from: usize, count: usize) -> Continuations {
        let grid = *self.x.grid();
        let steps = grid.steps();
        let l = self.ctx.env.model.dims().idio;
        let len = steps - from + 1;
        let (mut z, mut zp) = (Vec::new(), Vec::new());
        let stored = &self.dw[particle * steps * l..(particle + 1) * steps * l];
        let sq = grid.dt().sqrt();
        for j in 0..count {
            if j == 0 {
                for n in from..=steps {
                    self.emit(n, self.x.z(particle, n), &mut z, &mut zp);
                }
                continue;
            }
            let mut rng = stream(self.ctx.seed, Module::Resample, ((from as u64) << 20) | j as u64, particle as u64);
            let mut dw = stored.to_vec();
            for v in dw[from * l..].iter_mut() {
                *v = sq * normal(&mut rng);
            }
            match run_particle(&self.ctx, particle, from, self.x.z(particle, from), &dw, &mut rng) {
                Ok(run) => {
                    let d = self.x.value_dim();
                    for (i, n) in (from..=steps).enumerate() {
                        self.emit(n, &run.traj[i * d..(i + 1) * d], &mut z, &mut zp);
                    }
                }
                Err(_) => {
                    let wz = match self.view {
                        View::State => self.x.value_dim(),
                        View::Diffusion => self.x.value_dim() * self.x.noise_dim(),
                    };
                    z.extend(core::iter::repeat_n(f64::NAN, len * wz));
                    zp.extend(core::iter::repeat_n(f64::NAN, len * wz * self.x.noise_dim()));
                }
            }
        }
        Continuations { count, len, z, zp }
    }
}

impl RsdeSolution {
    pub fn x(&self) -> &ControlledEnsemble {
        &self.x
    }

    /// Idiosyncratic increments, `particles x N x l`.
    pub fn increments(&self) -> &[f64] {
        &self.dw
    }

    /// `W_{t_node}` of one particle.
    pub fn w(&self, particle: usize, node: usize) -> Vec<f64> {
        let l = self.ctx.env.model.dims().idio;
        let steps = self.x.grid().steps();
        let base = particle * steps * l;
        let mut w = vec![0.0; l];
        for r in 0..node {
            for c in 0..l {
                w[c] += self.dw[base + r * l + c];
            }
        }
        w
    }

    /// Action mixtures used per particle and step, `particles x N x K`.
    pub fn mixtures(&self) -> &[f64] {
        &self.mixtures
    }

    pub fn audit(&self) -> Option<&AuditLog> {
        self.audit.as_ref()
    }

    pub fn environment(&self) -> &Environment {
        &self.ctx.env
    }

    pub fn policy(&self) -> &Arc<RelaxedPolicy> {
        &self.ctx.policy
    }

    pub fn seed(&self) -> u64 {
        self.ctx.seed
    }

    pub fn particles(&self) -> usize {
        self.x.particles()
    }

    pub fn resampler(&self, view: View) -> Arc<dyn Resampler> {
        Arc::new(SolutionResampler {
            ctx: self.ctx.clone(),
            x: self.x.clone(),
            dw: self.dw.clone(),
            view,
        })
    }

    /// The measure flow `t -> Law(X_t)` represented by `(X, s0~(X))`.
    pub fn to_flow(&self) -> MeasureFlow {
        MeasureFlow::new(self.x.as_ref().clone(), Some(self.resampler(View::State)))
    }

    /// `(s0~(X), s0^'(X))` along the stored paths.
    pub fn diffusion_ensemble(&self) -> Result<ControlledEnsemble> {
        let field = self.ctx.env.field.as_ref();
        let (d, k) = (self.x.value_dim(), self.x.noise_dim());
        ControlledEnsemble::from_fn(*self.x.grid(), self.x.particles(), d * k, k, |p, n, z, zp| {
            let x = self.x.z(p, n);
            field.value(n, x, z);
            hat_derivative(field, n, x, zp);
        })
    }

    /// Copy with `X` of one particle shifted at one node (derivative slot
    /// kept). Only useful to exercise monitors.
    pub fn corrupted(&self, particle: usize, node: usize, shift: f64) -> Result<RsdeSolution> {
        let e = self.x.as_ref();
        let x = ControlledEnsemble::from_fn(*e.grid(), e.particles(), e.value_dim(), e.noise_dim(), |p, n, z, zp| {
            z.copy_from_slice(e.z(p, n));
            zp.copy_from_slice(e.zp(p, n));
            if p == particle && n == node {
                z.iter_mut().for_each(|v| *v += shift);
            }
        })?;
        let mut out = self.clone();
        out.x = Arc::new(x);
        Ok(out)
    }
}

/// Solves on fresh draws from `(seed, InitialState)` and `(seed, Idiosyncratic)`.
pub fn solve(
    env: &Environment,
    policy: &Arc<RelaxedPolicy>,
    init: &InitialLaw,
    particles: usize,
    seed: u64,
) -> Result<RsdeSolution> {
    let noise = sample_noise(init, env.grid(), env.model.dims().idio, particles, seed)?;
    solve_with_noise(env, policy, &noise, seed)
}

/// Solves on externally supplied initial states and increments.
pub fn solve_with_noise(env: &Environment, policy: &Arc<RelaxedPolicy>, noise: &IdioNoise, seed: u64) -> Result<RsdeSolution> {
    let dims = env.model.dims();
    let grid = *env.grid();
    if noise.steps != grid.steps() || noise.dim != dims.idio || noise.x0.len() != noise.particles * dims.state {
        return Err(input_err!("noise shape does not match the model and grid"));
    }
    if policy.steps() != grid.steps() {
        return Err(input_err!("policy covers {} steps, grid has {}", policy.steps(), grid.steps()));
    }
    if policy.actions() != env.model.actions() {
        return Err(input_err!("policy and model use different action sets"));
    }
    if let Some(lat) = policy.lattice() {
        if lat.dim() != dims.state {
            return Err(input_err!("policy lattice has dimension {}, state has {}", lat.dim(), dims.state));
        }
    }
    let ctx = Arc::new(SolveContext {
        env: env.clone(),
        policy: policy.clone(),
        seed,
    });
    let d = dims.state;
    let runs = par_map(noise.particles, |p| {
        let mut control = stream(seed, Module::Control, 0, p as u64);
        run_particle(&ctx, p, 0, &noise.x0[p * d..(p + 1) * d], noise.increments(p), &mut control)
    });
    let mut trajs = Vec::with_capacity(noise.particles);
    let mut mixtures = Vec::with_capacity(noise.particles * grid.steps() * env.model.actions().len());
    let (mut lookahead, mut draws) = (i64::MIN, 0);
    for run in runs {
        let run = run?;
        lookahead = lookahead.max(run.furthest_lookahead);
        draws += run.draws;
        mixtures.extend_from_slice(&run.mixtures);
        trajs.push(run.traj);
    }
    let field = env.field.as_ref();
    let nodes = grid.nodes();
    let x = ControlledEnsemble::from_fn(grid, noise.particles, d, dims.common, |p, n, z, zp| {
        z.copy_from_slice(&trajs[p][n * d..(n + 1) * d]);
        field.value(n, z, zp);
    })?
    .with_generation(
        (0..noise.particles)
            .map(|p| GenerationRecord {
                stream: p as u64,
                branch_node: 0,
            })
            .collect(),
    )?;
    debug_assert_eq!(x.values().len(), noise.particles * nodes * d);
    let audit = policy.sampler().map(|s| AuditLog {
        sampler: s.name().to_string(),
        draws,
        max_lookahead: if draws == 0 { 0 } else { lookahead },
        violations: 0,
    });
    Ok(RsdeSolution {
        x: Arc::new(x),
        dw: Arc::new(noise.dw.clone()),
        mixtures,
        audit,
        ctx,
    })
}

/// Solves under an open-loop causal policy and returns the audit of what
/// the sampler read. Future-peeking samplers fail with a causality error.
pub fn realize_from_measure(
    env: &Environment,
    policy: &Arc<RelaxedPolicy>,
    init: &InitialLaw,
    particles: usize,
    seed: u64,
) -> Result<RsdeSolution> {
    if policy.mode() != PolicyMode::OpenLoopCausal {
        return Err(Error::Config("realize_from_measure needs a policy in open-loop causal mode".into()));
    }
    let sol = solve(env, policy, init, particles, seed)?;
    if !sol.audit.as_ref().is_some_and(|a| a.passed()) {
        return Err(Error::Causality {
            step: 0,
            requested: 0,
        });
    }
    Ok(sol)
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct AprioriSettings {
    pub index: IndexPair,
    pub m: f64,
    pub inner_samples: usize,
    pub outer_limit: Option<usize>,
    pub stride: usize,
    /// Envelope `C (1 v cvf)^gamma`.
    pub envelope_constant: f64,
    pub envelope_exponent: f64,
    pub probes: usize,
}

impl AprioriSettings {
    pub fn new(index: IndexPair, m: f64) -> Self {
        AprioriSettings {
            index,
            m,
            inner_samples: 8,
            outer_limit: Some(128),
            stride: 0,
            envelope_constant: 10.0,
            envelope_exponent: 2.0,
            probes: 17,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct AprioriSnapshot {
    pub state: NormEstimate,
    pub diffusion: NormEstimate,
    pub cvf: CvfNorm,
    pub envelope: f64,
    pub flagged: bool,
    pub max_abs_state: f64,
}

/// Probe points where the dynamics live: a box grid spanning the particle
/// range in one dimension, stored particle positions otherwise.
pub fn default_probes(x: &ControlledEnsemble, count: usize) -> Vec<f64> {
    let d = x.value_dim();
    let count = count.max(2);
    if d == 1 {
        let (lo, hi) = x.values().iter().fold((f64::MAX, f64::MIN), |(a, b), v| (a.min(*v), b.max(*v)));
        let (lo, hi) = (lo - 0.1, hi + 0.1);
        return (0..count).map(|i| lo + (hi - lo) * i as f64 / (count - 1) as f64).collect();
    }
    let mut out = Vec::new();
    for p in 0..count.min(x.particles()) {
        out.extend_from_slice(x.z(p, x.grid().steps()));
    }
    out
}

/// Norms of `(X, s0~(X))` and `(s0~(X), s0^'(X))` checked against the envelope.
pub fn apriori_monitor(sol: &RsdeSolution, settings: &AprioriSettings) -> Result<AprioriSnapshot> {
    let path = sol.ctx.env.path.as_ref();
    let mut ns = NormSettings::new(settings.index, settings.m);
    ns.inner_samples = settings.inner_samples;
    ns.outer_limit = settings.outer_limit;
    ns.stride = settings.stride;
    let state_res = sol.resampler(View::State);
    let state = estimate_norm(&sol.x, path, &ns, Some(state_res.as_ref()))?;
    let diff_ens = sol.diffusion_ensemble()?;
    let diff_res = sol.resampler(View::Diffusion);
    let diffusion = estimate_norm(&diff_ens, path, &ns, Some(diff_res.as_ref()))?;
    let probes = default_probes(&sol.x, settings.probes);
    let cvf = cvf_norm(sol.ctx.env.field.as_ref(), path, settings.index, &probes)?;
    let envelope = settings.envelope_constant * cvf.total.max(1.0).powf(settings.envelope_exponent);
    let max_abs_state = sol.x.values().iter().fold(0.0f64, |a, v| a.max(v.abs()));
    Ok(AprioriSnapshot {
        flagged: state.combined > envelope || diffusion.combined > envelope,
        state,
        diffusion,
        cvf,
        envelope,
        max_abs_state,
    })
}

/// `phi(z) = scale * rho(|z_S - c_S|^2 / R^2) * prod z_i^{e_i}` on `z = (x, w)`,
/// with `rho(s) = exp(1 - 1/(1 - s))` on `s < 1` and zero beyond.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TestFunction {
    pub name: String,
    pub scale: f64,
    pub center: Vec<f64>,
    pub radius: f64,
    /// Coordinates entering the bump; none means no bump factor.
    pub support: Vec<bool>,
    pub powers: Vec<u32>,
}

fn pw(z: f64, e: u32) -> f64 {
    if e == 0 {
        1.0
    } else {
        z.powi(e as i32)
    }
}
fn dpw(z: f64, e: u32) -> f64 {
    if e == 0 {
        0.0
    } else {
        e as f64 * pw(z, e - 1)
    }
}
fn d2pw(z: f64, e: u32) -> f64 {
    if e < 2 {
        0.0
    } else {
        (e * (e - 1)) as f64 * pw(z, e - 2)
    }
}

impl TestFunction {
    pub fn constant(dim: usize, value: f64) -> Self {
        TestFunction {
            name: "constant".into(),
            scale: value,
            center: vec![0.0; dim],
            radius: 1.0,
            support: vec![false; dim],
            powers: vec![0; dim],
        }
    }

    pub fn bump(name: &str, dim: usize, support: Vec<bool>, powers: Vec<u32>, radius: f64) -> Self {
        TestFunction {
            name: name.into(),
            scale: 1.0,
            center: vec![0.0; dim],
            radius,
            support,
            powers,
        }
    }

    pub fn dim(&self) -> usize {
        self.center.len()
    }

    /// Value, gradient and row-major Hessian at `z`.
    pub fn eval(&self, z: &[f64], grad: &mut [f64], hess: &mut [f64]) -> f64 {
        let n = self.dim();
        let r2 = self.radius * self.radius;
        let s: f64 = (0..n)
            .filter(|&i| self.support[i])
            .map(|i| (z[i] - self.center[i]).powi(2) / r2)
            .sum();
        let any_support = self.support.iter().any(|&b| b);
        let (b, b1, b2) = if !any_support {
            (1.0, 0.0, 0.0)
        } else if s >= 1.0 {
            (0.0, 0.0, 0.0)
        } else {
            let inv = 1.0 / (1.0 - s);
            let rho = (1.0 - inv).exp();
            (rho, -rho * inv * inv, rho * (inv.powi(4) - 2.0 * inv.powi(3)))
        };
        // bump derivatives
        let mut gb = vec![0.0; n];
        let mut hb = vec![0.0; n * n];
        for i in 0..n {
            if self.support[i] {
                gb[i] = b1 * 2.0 * (z[i] - self.center[i]) / r2;
            }
        }
        for i in 0..n {
            for j in 0..n {
                if self.support[i] && self.support[j] {
                    let mut v = b2 * 4.0 * (z[i] - self.center[i]) * (z[j] - self.center[j]) / (r2 * r2);
                    if i == j {
                        v += b1 * 2.0 / r2;
                    }
                    hb[i * n + j] = v;
                }
            }
        }
        // monomial derivatives
        let pows: Vec<f64> = (0..n).map(|i| pw(z[i], self.powers[i])).collect();
        let prod_except = |skip: &[usize]| -> f64 {
            (0..n).filter(|i| !skip.contains(i)).map(|i| pows[i]).product()
        };
        let p = prod_except(&[]);
        let mut gp = vec![0.0; n];
        let mut hp = vec![0.0; n * n];
        for i in 0..n {
            gp[i] = dpw(z[i], self.powers[i]) * prod_except(&[i]);
            for j in 0..n {
                hp[i * n + j] = if i == j {
                    d2pw(z[i], self.powers[i]) * prod_except(&[i])
                } else {
                    dpw(z[i], self.powers[i]) * dpw(z[j], self.powers[j]) * prod_except(&[i, j])
                };
            }
        }
        for i in 0..n {
            grad[i] = self.scale * (gb[i] * p + b * gp[i]);
            for j in 0..n {
                hess[i * n + j] =
                    self.scale * (hb[i * n + j] * p + gb[i] * gp[j] + gp[i] * gb[j] + b * hp[i * n + j]);
            }
        }
        self.scale * b * p
    }
}

/// Default battery on `(x, w)`: a coordinate bump, a quadratic bump, a mixed
/// bump and a `w`-only bump.
pub fn default_battery(d: usize, l: usize, radius: f64) -> Vec<TestFunction> {
    let n = d + l;
    let xs: Vec<bool> = (0..n).map(|i| i < d).collect();
    let ws: Vec<bool> = (0..n).map(|i| i >= d).collect();
    let unit = |i: usize, e: u32| -> Vec<u32> { (0..n).map(|j| if j == i { e } else { 0 }).collect() };
    let mut mixed = vec![0u32; n];
    mixed[0] = 1;
    mixed[d] = 1;
    vec![
        TestFunction::bump("x-bump", n, xs.clone(), unit(0, 1), radius),
        TestFunction::bump("x2-bump", n, xs, unit(0, 2), radius),
        TestFunction::bump("xw-bump", n, vec![true; n], mixed, radius),
        TestFunction::bump("w-bump", n, ws, vec![0; n], radius),
    ]
}

/// `g(x, w) = grad_x phi(x, w) s0~(x)` as a field on the joint state.
struct TestFunctionField<'a> {
    phi: &'a TestFunction,
    field: &'a FlowField,
    d: usize,
    l: usize,
    k: usize,
}

impl ControlledVectorField for TestFunctionField<'_> {
    fn grid(&self) -> &TimeGrid {
        self.field.grid()
    }
    fn state_dim(&self) -> usize {
        self.d + self.l
    }
    fn noise_dim(&self) -> usize {
        self.k
    }
    fn rows(&self) -> usize {
        1
    }
    fn value(&self, node: usize, z: &[f64], out: &mut [f64]) {
        let n = self.d + self.l;
        let (mut g, mut h) = (vec![0.0; n], vec![0.0; n * n]);
        self.phi.eval(z, &mut g, &mut h);
        let mut s0 = vec![0.0; self.d * self.k];
        self.field.value(node, &z[..self.d], &mut s0);
        for j in 0..self.k {
            out[j] = (0..self.d).map(|a| g[a] * s0[a * self.k + j]).sum();
        }
    }
    fn derivative(&self, node: usize, z: &[f64], out: &mut [f64]) {
        let n = self.d + self.l;
        let (mut g, mut h) = (vec![0.0; n], vec![0.0; n * n]);
        self.phi.eval(z, &mut g, &mut h);
        let mut sp = vec![0.0; self.d * self.k * self.k];
        self.field.derivative(node, &z[..self.d], &mut sp);
        let kk = self.k * self.k;
        for jl in 0..kk {
            out[jl] = (0..self.d).map(|a| g[a] * sp[a * kk + jl]).sum();
        }
    }
    fn gradient(&self, node: usize, z: &[f64], out: &mut [f64]) {
        let (d, k) = (self.d, self.k);
        let n = d + self.l;
        let (mut g, mut h) = (vec![0.0; n], vec![0.0; n * n]);
        self.phi.eval(z, &mut g, &mut h);
        let mut s0 = vec![0.0; d * k];
        let mut gs = vec![0.0; d * k * d];
        self.field.value(node, &z[..d], &mut s0);
        self.field.gradient(node, &z[..d], &mut gs);
        for j in 0..k {
            for c in 0..n {
                let mut acc: f64 = (0..d).map(|a| h[c * n + a] * s0[a * k + j]).sum();
                if c < d {
                    acc += (0..d).map(|a| g[a] * gs[(a * k + j) * d + c]).sum::<f64>();
                }
                out[j * n + c] = acc;
            }
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PhiDiagnostics {
    pub name: String,
    /// t-statistics of `E[h(Z_n) dM_n] = 0` for the features `1, x, w, bump(x)`.
    pub residual_t: Vec<f64>,
    pub residual_pass: bool,
    pub qv_gap: f64,
    pub qv_t: f64,
    pub qv_pass: bool,
    pub cross_gap: Vec<f64>,
    pub cross_t: Vec<f64>,
    pub cross_pass: bool,
    /// `max |dM_n|` over particles and steps; zero for constant test functions.
    pub max_abs_increment: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MartingaleDiagnostics {
    pub particles: usize,
    pub steps: usize,
    pub level: f64,
    pub critical: f64,
    pub residual_critical: f64,
    pub low_power: bool,
    pub per_phi: Vec<PhiDiagnostics>,
}

impl MartingaleDiagnostics {
    pub fn all_pass(&self) -> bool {
        self.per_phi.iter().all(|p| p.residual_pass && p.qv_pass && p.cross_pass)
    }
}

fn generator(ws: &Workspace, g: &[f64], h: &[f64], d: usize, l: usize) -> f64 {
    let n = d + l;
    let gen: f64 = (0..d).map(|a| ws.bbar[a] * g[a]).sum();
    let mut tr = 0.0;
    for a in 0..d {
        for b in 0..d {
            let sst: f64 = (0..l).map(|c| ws.sig[a * l + c] * ws.sig[b * l + c]).sum();
            tr += sst * h[a * n + b];
        }
        for c in 0..l {
            tr += 2.0 * ws.sig[a * l + c] * h[a * n + d + c];
        }
    }
    for c in 0..l {
        tr += h[(d + c) * n + d + c];
    }
    gen + 0.5 * tr
}

fn t_stat(samples: &[f64]) -> f64 {
    let m = mean(samples);
    let v = variance(samples);
    if v <= 0.0 {
        return if m == 0.0 { 0.0 } else { f64::INFINITY.copysign(m) };
    }
    m / (v / samples.len() as f64).sqrt()
}

/// Martingale-problem diagnostics for each test function at level `level`.
///
/// The increment of `M(phi)` over a step subtracts the generator term, the
/// compensated rough integral of `(g, g') o (X, s0~(X))`, and the bracket
/// correction `1/2 tr(s0~^T D^2 phi s0~ [B]_{n,n+1})`.
pub fn martingale_diagnostics(sol: &RsdeSolution, phis: &[TestFunction], level: f64) -> Result<MartingaleDiagnostics> {
    let env = &sol.ctx.env;
    let dims = env.model.dims();
    let (d, l, k) = (dims.state, dims.idio, dims.common);
    let n = d + l;
    let grid = *env.grid();
    let steps = grid.steps();
    let dt = grid.dt();
    let pcount = sol.particles();
    let kk = env.model.actions().len();
    let path = env.path.as_ref();
    let field = env.field.as_ref();
    let critical = two_sided_critical(level);
    let nfeat = 2 + d + l;
    let residual_critical = two_sided_critical(level / nfeat as f64);
    // joint ensemble (X, W) with derivative (s0~(X); 0)
    let joint = ControlledEnsemble::from_fn(grid, pcount, n, k, |p, node, z, zp| {
        z[..d].copy_from_slice(sol.x.z(p, node));
        let w = sol.w(p, node);
        z[d..].copy_from_slice(&w);
        zp.iter_mut().for_each(|v| *v = 0.0);
        zp[..d * k].copy_from_slice(sol.x.zp(p, node));
    })?;
    let brackets: Vec<Vec<f64>> = (0..steps).map(|s| path.bracket(s, s + 1)).collect();
    let bump_x = TestFunction::bump("feature", d, vec![true; d], vec![0; d], 3.0);
    let mut per_phi = Vec::with_capacity(phis.len());
    for phi in phis {
        if phi.dim() != n {
            return Err(input_err!("test function `{}` has dimension {}, expected {n}", phi.name, phi.dim()));
        }
        let tf = TestFunctionField {
            phi,
            field,
            d,
            l,
            k,
        };
        let tt = compose(&tf, &joint)?;
        let rough: Vec<Vec<f64>> = (0..steps)
            .map(|s| rough_integral(&tt, path, s, s + 1))
            .collect::<Result<_>>()?;
        let stats = par_map(pcount, |p| {
            let mut ws = Workspace::new(env);
            let (mut g, mut h) = (vec![0.0; n], vec![0.0; n * n]);
            let (mut g1, mut h1) = (vec![0.0; n], vec![0.0; n * n]);
            let (mut gr, mut hr) = (vec![0.0; n], vec![0.0; n * n]);
            let mut zr = vec![0.0; n];
            let (mut gx, mut hx) = (vec![0.0; d], vec![0.0; d * d]);
            let mut s0 = vec![0.0; d * k];
            let mut feat = vec![0.0; nfeat];
            let mut qv = 0.0;
            let mut cross = vec![0.0; l];
            let mut maxinc: f64 = 0.0;
            for s in 0..steps {
                let t = grid.time(s);
                let z = joint.z(p, s);
                let x = &z[..d];
                let m = field.features(s);
                let phi0 = phi.eval(z, &mut g, &mut h);
                let phi1 = phi.eval(joint.z(p, s + 1), &mut g1, &mut h1);
                let probs = &sol.mixtures[(p * steps + s) * kk..(p * steps + s + 1) * kk];
                mixed_drift(env, t, x, m, probs, &mut ws);
                env.model.diffusion(t, x, m, &mut ws.sig);
                // frozen-coefficient generator, trapezoid over the step
                let gen = 0.5 * (generator(&ws, &g, &h, d, l) + generator(&ws, &g1, &h1, d, l));
                // bracket correction
                field.value(s, x, &mut s0);
                let br = &brackets[s];
                let mut corr = 0.0;
                for j in 0..k {
                    for q in 0..k {
                        let mut hjq = 0.0;
                        for a in 0..d {
                            for b in 0..d {
                                hjq += s0[a * k + j] * h[a * n + b] * s0[b * k + q];
                            }
                        }
                        corr += 0.5 * hjq * br[q * k + j];
                    }
                }
                let dm = (phi1 - phi0) - gen * dt - rough[s][p] - corr;
                maxinc = maxinc.max(dm.abs());
                // features at the left point
                feat[0] += dm;
                for a in 0..d {
                    feat[1 + a] += x[a] * dm;
                }
                for c in 0..l {
                    feat[1 + d + c] += z[d + c] * dm;
                }
                feat[1 + d + l] += bump_x.eval(x, &mut gx, &mut hx) * dm;
                // (grad_x phi sigma + grad_w phi) at both ends of the step; the
                // rough displacement acts over the whole step, so its share is
                // added at full weight through a shifted evaluation
                let dw = &sol.dw[(p * steps + s) * l..(p * steps + s + 1) * l];
                let z1 = joint.z(p, s + 1);
                zr.copy_from_slice(z);
                for a in 0..d {
                    let diffusive: f64 = (0..l).map(|c| ws.sig[a * l + c] * dw[c]).sum();
                    zr[a] += z1[a] - z[a] - ws.bbar[a] * dt - diffusive;
                }
                phi.eval(&zr, &mut gr, &mut hr);
                for c in 0..l {
                    let v = |g: &[f64]| (0..d).map(|a| g[a] * ws.sig[a * l + c]).sum::<f64>() + g[d + c];
                    let (v1, vr) = (v(&g1), v(&gr));
                    qv -= 0.5 * (v1 * v1 + vr * vr) * dt;
                    cross[c] += dm * dw[c] - 0.5 * (v1 + vr) * dt;
                }
                qv += dm * dm;
            }
            (feat, qv, cross, maxinc)
        });
        let residual_t: Vec<f64> = (0..nfeat)
            .map(|i| t_stat(&stats.iter().map(|s| s.0[i]).collect::<Vec<_>>()))
            .collect();
        let qvs: Vec<f64> = stats.iter().map(|s| s.1).collect();
        let cross_gap: Vec<f64> = (0..l).map(|c| mean(&stats.iter().map(|s| s.2[c]).collect::<Vec<_>>())).collect();
        let cross_t: Vec<f64> = (0..l)
            .map(|c| t_stat(&stats.iter().map(|s| s.2[c]).collect::<Vec<_>>()))
            .collect();
        let qv_t = t_stat(&qvs);
        per_phi.push(PhiDiagnostics {
            name: phi.name.clone(),
            residual_pass: residual_t.iter().all(|t| t.abs() < residual_critical),
            residual_t,
            qv_gap: mean(&qvs),
            qv_t,
            qv_pass: qv_t.abs() < critical,
            cross_pass: cross_t.iter().all(|t| t.abs() < critical),
            cross_gap,
            cross_t,
            max_abs_increment: stats.iter().fold(0.0, |a, s| a.max(s.3)),
        });
    }
    Ok(MartingaleDiagnostics {
        particles: pcount,
        steps,
        level,
        critical,
        residual_critical,
        low_power: pcount < 100,
        per_phi,
    })
}
