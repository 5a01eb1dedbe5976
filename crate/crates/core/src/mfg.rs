//! Costs, dynamic-programming best responses against a frozen environment,
//! exploitability, and the damped fixed-point iteration on measure flows.

use alloc::format;
use alloc::string::String;
use alloc::sync::Arc;
use alloc::vec;
use alloc::vec::Vec;
#[allow(unused_imports)]
use num_traits::Float;
use serde::{Deserialize, Serialize};

use crate::error::{input_err, Error, Result};
use crate::math::{contract_second, mat_vec_add, mean, par_map, variance};
use crate::measureflow::{check_domain, flow_distance, mix, DomainCertificate, DomainSettings, MeasureFlow, W2Settings};
use crate::policy::{Lattice, RelaxedPolicy};
use crate::quadrature::GaussHermite;
use crate::roughpath::RoughPath;
use crate::rsde::{solve, Environment, InitialLaw, RsdeSolution};
use crate::vectorfield::{hat_derivative, CoefficientSet, ControlledVectorField};

/// Monte Carlo estimate with its standard error.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CostEstimate {
    pub mean: f64,
    pub std_error: f64,
    pub per_particle: Vec<f64>,
}

/// Per-particle pathwise cost of a stored solution, using the action
/// mixtures it was simulated with.
pub fn cost_of_solution(sol: &RsdeSolution) -> CostEstimate {
    let env = sol.environment();
    let model = env.model().as_ref();
    let field = env.field();
    let grid = *env.grid();
    let (steps, dt) = (grid.steps(), grid.dt());
    let actions = model.actions();
    let kk = actions.len();
    let mixtures = sol.mixtures();
    let per_particle = par_map(sol.particles(), |p| {
        let mut acc = 0.0;
        for n in 0..steps {
            let x = sol.x().z(p, n);
            let m = field.features(n);
            let t = grid.time(n);
            let row = &mixtures[(p * steps + n) * kk..(p * steps + n + 1) * kk];
            let mut f = 0.0;
            for (i, &pi) in row.iter().enumerate() {
                if pi != 0.0 {
                    f += pi * model.running_cost(t, x, m, actions.get(i));
                }
            }
            acc += f * dt;
        }
        acc + model.terminal_cost(sol.x().z(p, steps), field.features(steps))
    });
    let mean_v = mean(&per_particle);
    let se = (variance(&per_particle) / per_particle.len() as f64).sqrt();
    CostEstimate {
        mean: mean_v,
        std_error: se,
        per_particle,
    }
}

/// `J(policy; flow)` by simulation.
pub fn cost(env: &Environment, policy: &Arc<RelaxedPolicy>, init: &InitialLaw, particles: usize, seed: u64) -> Result<CostEstimate> {
    Ok(cost_of_solution(&solve(env, policy, init, particles, seed)?))
}

#[derive(Debug, Clone, PartialEq)]
pub struct DpSettings {
    pub lattice: Lattice,
    /// Gauss-Hermite points per idiosyncratic dimension.
    pub order: usize,
    /// Escalate excessive lattice escape to an error.
    pub strict: bool,
    pub escape_limit: f64,
}

impl DpSettings {
    pub fn new(lattice: Lattice) -> Self {
        DpSettings {
            lattice,
            order: 5,
            strict: false,
            escape_limit: 0.05,
        }
    }
}

/// Relative tolerance below which action values count as tied.
pub const TIE_TOLERANCE: f64 = 1e-12;

#[derive(Debug, Clone)]
pub struct BestResponse {
    pub policy: Arc<RelaxedPolicy>,
    /// `V(t_n, node)`, `(N + 1) x size`.
    pub values: Vec<f64>,
    /// `Q(t_n, node, u)`, `N x size x K`.
    pub action_values: Vec<f64>,
    /// Argmin per `(step, node)`.
    pub choice: Vec<usize>,
    /// Largest per-step average quadrature mass leaving the lattice.
    pub escape_mass: f64,
    pub warning: Option<String>,
}

/// Lowest index among the minimal entries, treating relative differences
/// below [`TIE_TOLERANCE`] as ties.
pub fn argmin_with_ties(values: &[f64]) -> usize {
    let mut best = 0;
    for (i, &v) in values.iter().enumerate().skip(1) {
        let b = values[best];
        if v < b - TIE_TOLERANCE * b.abs().max(1.0) {
            best = i;
        }
    }
    best
}

/// Backward induction on the lattice with Gauss-Hermite expectations and
/// multilinear interpolation. The rough increment enters as deterministic
/// forcing `s0~(x) dB_n + s0^'(x) BB_n`.
pub fn best_response(env: &Environment, settings: &DpSettings) -> Result<BestResponse> {
    let model = env.model().as_ref();
    let dims = model.dims();
    let (d, l, k) = (dims.state, dims.idio, dims.common);
    let lattice = &settings.lattice;
    if lattice.dim() != d {
        return Err(input_err!("lattice has dimension {}, state has {d}", lattice.dim()));
    }
    let grid = *env.grid();
    let (steps, dt) = (grid.steps(), grid.dt());
    let size = lattice.size();
    let actions = model.actions();
    let kk = actions.len();
    let gh = GaussHermite::new(settings.order)?;
    let (xi, wts) = gh.tensor(l);
    let nq = wts.len();
    let sq = dt.sqrt();
    let points = lattice.points();
    let field = env.field();
    let path = env.path();

    let mut values = vec![0.0; (steps + 1) * size];
    let m_end = field.features(steps);
    for i in 0..size {
        values[steps * size + i] = model.terminal_cost(&points[i * d..(i + 1) * d], m_end);
    }
    let mut action_values = vec![0.0; steps * size * kk];
    let mut choice = vec![0usize; steps * size];
    let mut escape_mass: f64 = 0.0;
    for n in (0..steps).rev() {
        let t = grid.time(n);
        let m = field.features(n);
        let db = path.increment(n, n + 1);
        let bb = path.second(n, n + 1);
        let next = &values[(n + 1) * size..(n + 2) * size];
        let rows = par_map(size, |i| {
            let x = &points[i * d..(i + 1) * d];
            let mut s0 = vec![0.0; d * k];
            let mut hat = vec![0.0; d * k * k];
            let mut forcing = vec![0.0; d];
            field.value(n, x, &mut s0);
            mat_vec_add(&s0, d, k, &db, &mut forcing);
            hat_derivative(field.as_ref(), n, x, &mut hat);
            contract_second(&hat, d, k, bb, &mut forcing);
            let mut sig = vec![0.0; d * l];
            model.diffusion(t, x, m, &mut sig);
            let mut b = vec![0.0; d];
            let mut base = vec![0.0; d];
            let mut y = vec![0.0; d];
            let mut noise = vec![0.0; l];
            let mut q = vec![0.0; kk];
            let mut escaped = vec![0.0; kk];
            for u in 0..kk {
                model.drift(t, x, m, actions.get(u), &mut b);
                for c in 0..d {
                    base[c] = x[c] + b[c] * dt + forcing[c];
                }
                let mut ev = 0.0;
                for j in 0..nq {
                    for c in 0..l {
                        noise[c] = sq * xi[j * l + c];
                    }
                    y.copy_from_slice(&base);
                    mat_vec_add(&sig, d, l, &noise, &mut y);
                    let (v, out) = lattice.interpolate(next, &y);
                    ev += wts[j] * v;
                    if out {
                        escaped[u] += wts[j];
                    }
                }
                q[u] = model.running_cost(t, x, m, actions.get(u)) * dt + ev;
            }
            let best = argmin_with_ties(&q);
            (q, best, escaped[best])
        });
        let mut esc = 0.0;
        for (i, (q, best, e)) in rows.into_iter().enumerate() {
            values[n * size + i] = q[best];
            action_values[(n * size + i) * kk..(n * size + i + 1) * kk].copy_from_slice(&q);
            choice[n * size + i] = best;
            esc += e;
        }
        escape_mass = escape_mass.max(esc / size as f64);
    }
    if !values.iter().all(|v| v.is_finite()) {
        return Err(Error::Numeric("value function is not finite".into()));
    }
    let mut warning = None;
    if escape_mass > settings.escape_limit {
        if settings.strict {
            return Err(Error::LatticeTooSmall {
                escape: escape_mass,
                limit: settings.escape_limit,
            });
        }
        warning = Some(format!(
            "lattice too small: escape mass {escape_mass:.4} exceeds {:.4}",
            settings.escape_limit
        ));
    }
    let policy = RelaxedPolicy::pure(actions.clone(), lattice.clone(), steps, &choice)?;
    Ok(BestResponse {
        policy: Arc::new(policy),
        values,
        action_values,
        choice,
        escape_mass,
        warning,
    })
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Exploitability {
    /// `J(policy) - J(best response)` before clipping.
    pub raw: f64,
    /// `max(raw, 0)`.
    pub value: f64,
    /// Standard error of the paired difference (common random numbers).
    pub error_bar: f64,
    pub policy_cost: f64,
    pub best_cost: f64,
}

fn paired_gap(a: &CostEstimate, b: &CostEstimate) -> Exploitability {
    let diff: Vec<f64> = a.per_particle.iter().zip(&b.per_particle).map(|(x, y)| x - y).collect();
    let raw = mean(&diff);
    Exploitability {
        raw,
        value: raw.max(0.0),
        error_bar: (variance(&diff) / diff.len() as f64).sqrt(),
        policy_cost: a.mean,
        best_cost: b.mean,
    }
}

/// Gap between `policy` and the DP best response against the same frozen
/// environment, both simulated on the same draws.
pub fn exploitability(
    env: &Environment,
    policy: &Arc<RelaxedPolicy>,
    init: &InitialLaw,
    particles: usize,
    seed: u64,
    dp: &DpSettings,
) -> Result<Exploitability> {
    let br = best_response(env, dp)?;
    let a = cost(env, policy, init, particles, seed)?;
    let b = cost(env, &br.policy, init, particles, seed)?;
    Ok(paired_gap(&a, &b))
}

/// How the DP lattice is chosen.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct LatticeSpec {
    pub counts: Vec<usize>,
    /// Explicit bounds; when absent they are taken from a pilot run.
    pub bounds: Option<(Vec<f64>, Vec<f64>)>,
    /// Pilot bounds are `mean +- widen * sd` over all nodes.
    pub widen: f64,
}

impl LatticeSpec {
    pub fn auto(counts: Vec<usize>) -> Self {
        LatticeSpec {
            counts,
            bounds: None,
            widen: 6.0,
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct FixedPointSettings {
    pub particles: usize,
    /// Weight of the new flow in the trajectory-coupled mixture.
    pub damping: f64,
    pub max_iters: usize,
    pub tol_w2: f64,
    pub tol_exp: f64,
    pub seed: u64,
    pub lattice: LatticeSpec,
    pub order: usize,
    pub strict: bool,
    pub escape_limit: f64,
    pub domain: Option<DomainSettings>,
    pub w2: W2Settings,
}

impl FixedPointSettings {
    pub fn new(particles: usize, seed: u64) -> Self {
        FixedPointSettings {
            particles,
            damping: 1.0,
            max_iters: 20,
            tol_w2: 1e-3,
            tol_exp: 1e-2,
            seed,
            lattice: LatticeSpec::auto(vec![101]),
            order: 5,
            strict: false,
            escape_limit: 0.05,
            domain: None,
            w2: W2Settings {
                seed,
                ..W2Settings::default()
            },
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct IterationRecord {
    pub iteration: usize,
    /// `sup_t W2(mu^k_t, mu^{k-1}_t)`.
    pub w2_update: f64,
    /// The new flow's particles equal the previous ones bit for bit.
    pub unchanged: bool,
    pub exploitability: Exploitability,
    pub escape_mass: f64,
    /// Lattice cells whose action changed relative to the previous policy.
    pub policy_changes: usize,
    pub domain: Option<DomainCertificate>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EquilibriumReport {
    pub model: String,
    pub seed: u64,
    pub particles: usize,
    pub iterations: usize,
    pub converged: bool,
    pub records: Vec<IterationRecord>,
    pub final_exploitability: f64,
    pub final_error_bar: f64,
    pub lattice_lower: Vec<f64>,
    pub lattice_upper: Vec<f64>,
    pub lattice_counts: Vec<usize>,
    pub warnings: Vec<String>,
}

impl EquilibriumReport {
    pub fn distances(&self) -> Vec<f64> {
        self.records.iter().map(|r| r.w2_update).collect()
    }
}

/// Final candidate: the flow, the policy that generated it, and its values.
pub struct Equilibrium {
    pub report: EquilibriumReport,
    pub flow: MeasureFlow,
    pub policy: Arc<RelaxedPolicy>,
    pub values: Vec<f64>,
    pub lattice: Lattice,
}

fn pilot_lattice(sol: &RsdeSolution, spec: &LatticeSpec) -> Result<Lattice> {
    let d = sol.x().value_dim();
    if spec.counts.len() != d {
        return Err(input_err!("lattice counts have {} entries, state has {d}", spec.counts.len()));
    }
    if let Some((lo, hi)) = &spec.bounds {
        return Lattice::new(lo.clone(), hi.clone(), spec.counts.clone());
    }
    let x = sol.x();
    let mut lower = vec![f64::INFINITY; d];
    let mut upper = vec![f64::NEG_INFINITY; d];
    for n in 0..x.grid().nodes() {
        for c in 0..d {
            let v: Vec<f64> = (0..x.particles()).map(|p| x.z(p, n)[c]).collect();
            let (m, sd) = (mean(&v), variance(&v).sqrt());
            lower[c] = lower[c].min(m - spec.widen * sd);
            upper[c] = upper[c].max(m + spec.widen * sd);
        }
    }
    for c in 0..d {
        if upper[c] - lower[c] < 1e-9 {
            lower[c] -= 1.0;
            upper[c] += 1.0;
        }
    }
    Lattice::new(lower, upper, spec.counts.clone())
}

/// Damped Picard iteration `mu <- mix(Phi(mu), mu, damping)` where `Phi`
/// solves the state equation under the best response to `mu`.
///
/// All simulations share `settings.seed`, so a measure-independent model
/// reproduces its flow exactly after one iteration.
pub fn fixed_point(
    model: Arc<dyn CoefficientSet>,
    path: Arc<RoughPath>,
    init: &InitialLaw,
    settings: &FixedPointSettings,
) -> Result<Equilibrium> {
    if !(0.0..=1.0).contains(&settings.damping) || settings.damping == 0.0 {
        return Err(input_err!("damping must lie in (0, 1]"));
    }
    if settings.max_iters == 0 {
        return Err(input_err!("max_iters must be positive"));
    }
    let dims = model.dims();
    let grid = *path.grid();
    let seed = settings.seed;
    let pcount = settings.particles;
    let mut warnings = Vec::new();

    // pilot: uniform policy against the frozen initial law
    let cloud = init.sample_cloud(seed, pcount);
    let frozen = Arc::new(MeasureFlow::constant(grid, &cloud, dims.state, dims.common)?);
    let env0 = Environment::new(model.clone(), frozen, path.clone())?;
    let dummy = Lattice::new(vec![-1.0; dims.state], vec![1.0; dims.state], vec![2; dims.state])?;
    let uniform = Arc::new(RelaxedPolicy::uniform(model.actions().clone(), dummy, grid.steps())?);
    let pilot = solve(&env0, &uniform, init, pcount, seed)?;
    let lattice = pilot_lattice(&pilot, &settings.lattice)?;
    let dp = DpSettings {
        lattice: lattice.clone(),
        order: settings.order,
        strict: settings.strict,
        escape_limit: settings.escape_limit,
    };
    let note = |br: &BestResponse, warnings: &mut Vec<String>| {
        if let Some(w) = &br.warning {
            if !warnings.contains(w) {
                warnings.push(w.clone());
            }
        }
    };

    // mu^0 = Phi(pilot flow)
    let env = Environment::new(model.clone(), Arc::new(pilot.to_flow()), path.clone())?;
    let br = best_response(&env, &dp)?;
    note(&br, &mut warnings);
    let mut flow = solve(&env, &br.policy, init, pcount, seed)?.to_flow();
    let mut br = best_response(&Environment::new(model.clone(), Arc::new(flow.clone()), path.clone())?, &dp)?;
    note(&br, &mut warnings);

    let mut records = Vec::new();
    let mut converged = false;
    let mut last_policy = br.policy.clone();
    let mut last_values = br.values.clone();
    for iteration in 1..=settings.max_iters {
        // nu^k = Phi(mu^{k-1}) under pi^k = BR(mu^{k-1})
        let env_prev = Environment::new(model.clone(), Arc::new(flow.clone()), path.clone())?;
        let policy = br.policy.clone();
        let nu = solve(&env_prev, &policy, init, pcount, seed)?.to_flow();
        let next = mix(&nu, &flow, settings.damping, seed, iteration as u64)?;
        let w2_update = flow_distance(&next, &flow, &settings.w2)?;
        let unchanged = next.ensemble().values() == flow.ensemble().values();

        // certificate against mu^k
        let env_next = Environment::new(model.clone(), Arc::new(next.clone()), path.clone())?;
        let new_br = best_response(&env_next, &dp)?;
        note(&new_br, &mut warnings);
        let own = cost_of_solution(&solve(&env_next, &policy, init, pcount, seed)?);
        let best = cost_of_solution(&solve(&env_next, &new_br.policy, init, pcount, seed)?);
        let exploit = paired_gap(&own, &best);
        let policy_changes = br.choice.iter().zip(&new_br.choice).filter(|(a, b)| a != b).count();
        let domain = match &settings.domain {
            Some(ds) => {
                let cert = check_domain(&next, &path, ds)?;
                if !cert.member {
                    warnings.push(format!(
                        "iteration {iteration}: domain certificate failed on window {:?} (norm {:.4} > M = {})",
                        cert.worst_window, cert.max_norm, cert.m_bound
                    ));
                }
                Some(cert)
            }
            None => None,
        };
        records.push(IterationRecord {
            iteration,
            w2_update,
            unchanged,
            exploitability: exploit,
            escape_mass: new_br.escape_mass,
            policy_changes,
            domain,
        });
        last_policy = policy;
        last_values = br.values.clone();
        flow = next;
        br = new_br;
        if w2_update < settings.tol_w2 && exploit.value < settings.tol_exp {
            converged = true;
            break;
        }
    }
    let last = records.last().expect("at least one iteration");
    let report = EquilibriumReport {
        model: String::from(model.name()),
        seed,
        particles: pcount,
        iterations: records.len(),
        converged,
        final_exploitability: last.exploitability.value,
        final_error_bar: last.exploitability.error_bar,
        records,
        lattice_lower: lattice.lower().to_vec(),
        lattice_upper: lattice.upper().to_vec(),
        lattice_counts: lattice.counts().to_vec(),
        warnings,
    };
    Ok(Equilibrium {
        report,
        flow,
        policy: last_policy,
        values: last_values,
        lattice,
    })
}
