//! Acceptance checks. Prints one PASS/FAIL line per criterion and exits
//! non-zero if any criterion fails.

use std::collections::BTreeMap;
use std::error::Error as StdError;
use std::path::{Path, PathBuf};
use std::sync::Arc;
use std::time::{Duration, Instant};

use roughmfg::io::Table;
use roughmfg::{Config, RunOptions};
use roughmfg_core::controlled::IndexPair;
use roughmfg_core::measureflow::{DomainSettings, MeasureFlow};
use roughmfg_core::mfg::{fixed_point, FixedPointSettings};
use roughmfg_core::models;
use roughmfg_core::policy::{Lattice, PeekingSampler, RelaxedPolicy, SignSampler};
use roughmfg_core::randomize::{causality_shuffle_check, compare_pathwise_vs_randomized, Coupling, RandomizeSettings};
use roughmfg_core::rng::{normal, stream, uniform, Module};
use roughmfg_core::rsde::{
    apriori_monitor, default_battery, martingale_diagnostics, realize_from_measure, solve, AprioriSettings,
    Environment, InitialLaw, TestFunction,
};
use roughmfg_core::vectorfield::{ActionSet, CoefficientSet, Dims};
use roughmfg_core::{Error, RoughPath, TimeGrid};

type Res<T> = Result<T, Box<dyn StdError>>;

struct Verdict {
    pass: bool,
    detail: String,
    tables: Vec<(String, Table)>,
}

struct Criterion {
    id: u8,
    name: &'static str,
    limit: Duration,
    check: fn() -> Res<Verdict>,
}

fn f(v: f64) -> String {
    format!("{v:e}")
}

fn gauss(seed: u64, sub: u64, n: usize, sd: f64) -> Vec<f64> {
    let mut r = stream(seed, Module::Test, sub, 0);
    (0..n).map(|_| sd * normal(&mut r)).collect()
}

fn ito_path(grid: TimeGrid, seed: u64) -> Res<RoughPath> {
    Ok(RoughPath::ito_lift(&gauss(seed, 0, grid.steps(), grid.dt().sqrt()), 1, grid)?)
}

fn uniform_policy(model: &dyn CoefficientSet, steps: usize) -> Res<Arc<RelaxedPolicy>> {
    let d = model.dims().state;
    let lat = Lattice::new(vec![-1.0; d], vec![1.0; d], vec![2; d])?;
    Ok(Arc::new(RelaxedPolicy::uniform(model.actions().clone(), lat, steps)?))
}

fn gaussian_init() -> InitialLaw {
    InitialLaw::Gaussian {
        mean: vec![0.0],
        sd: vec![0.5],
    }
}

/// Environment whose flow is the law generated by the uniform control
/// against the frozen initial law.
fn pilot_env(model: Arc<dyn CoefficientSet>, path: Arc<RoughPath>, init: &InitialLaw, particles: usize) -> Res<Environment> {
    let grid = *path.grid();
    let cloud = init.sample_cloud(1, 500);
    let frozen = Arc::new(MeasureFlow::constant(grid, &cloud, 1, 1)?);
    let env0 = Environment::new(model.clone(), frozen, path.clone())?;
    let pol = uniform_policy(model.as_ref(), grid.steps())?;
    let pilot = solve(&env0, &pol, init, particles, 1)?;
    Ok(Environment::new(model, Arc::new(pilot.to_flow()), path)?)
}

// ---------------------------------------------------------------- 1

/// Iterated sums computed directly from increments.
fn second_oracle(incs: &[f64], k: usize, s: usize, t: usize, geometric: bool) -> Vec<f64> {
    let mut out = vec![0.0; k * k];
    for i in s..t {
        for j in i..t {
            if j == i && !geometric {
                continue;
            }
            let w = if j == i { 0.5 } else { 1.0 };
            for a in 0..k {
                for b in 0..k {
                    out[a * k + b] += w * incs[i * k + a] * incs[j * k + b];
                }
            }
        }
    }
    out
}

fn c1_lifts() -> Res<Verdict> {
    let mut r = stream(11, Module::Test, 1, 0);
    let mut table = Table::new(["lift", "kind", "k", "steps", "chen_rel", "symmetry_rel", "oracle_rel"]);
    let (mut worst_chen, mut worst_sym, mut worst_oracle) = (0.0f64, 0.0f64, 0.0f64);
    for i in 0..200 {
        let geometric = i >= 100;
        let k = 1 + (uniform(&mut r) * 3.0) as usize;
        let n = 8 + (uniform(&mut r) * 249.0) as usize;
        let grid = TimeGrid::new(1.0, n)?;
        let sd = grid.dt().sqrt();
        let incs: Vec<f64> = (0..n * k).map(|_| sd * normal(&mut r)).collect();
        let path = if geometric {
            let mut values = vec![0.0; (n + 1) * k];
            for s in 0..n {
                for a in 0..k {
                    values[(s + 1) * k + a] = values[s * k + a] + incs[s * k + a];
                }
            }
            RoughPath::smooth_lift(&values, k, grid)?
        } else {
            RoughPath::ito_lift(&incs, k, grid)?
        };
        let scale = path.scale();
        let chen = path.chen_defect() / scale;
        let sym = if geometric { path.symmetry_defect() / scale } else { 0.0 };
        let mut oracle: f64 = 0.0;
        for _ in 0..5 {
            let s = (uniform(&mut r) * n as f64) as usize;
            let t = s + 1 + (uniform(&mut r) * (n - s) as f64) as usize;
            let want = second_oracle(&incs, k, s, t.min(n), geometric);
            for (a, b) in path.second(s, t.min(n)).iter().zip(&want) {
                oracle = oracle.max((a - b).abs() / scale);
            }
        }
        worst_chen = worst_chen.max(chen);
        worst_sym = worst_sym.max(sym);
        worst_oracle = worst_oracle.max(oracle);
        table.push(vec![
            i.to_string(),
            if geometric { "geometric" } else { "ito" }.into(),
            k.to_string(),
            n.to_string(),
            f(chen),
            f(sym),
            f(oracle),
        ]);
    }
    let tol = 1e-12;
    Ok(Verdict {
        pass: worst_chen <= tol && worst_sym <= tol && worst_oracle <= tol,
        detail: format!(
            "200 lifts: max Chen defect {worst_chen:.2e}, symmetry defect {worst_sym:.2e}, oracle gap {worst_oracle:.2e} (relative to scale, tol {tol:.0e})"
        ),
        tables: vec![("lifts.csv".into(), table)],
    })
}

// ---------------------------------------------------------------- 2

/// Random coefficients with no common noise.
struct RandomModel {
    d: usize,
    l: usize,
    c: Vec<f64>,
    s: Vec<f64>,
    actions: ActionSet,
}

impl RandomModel {
    fn new(seed: u64) -> Self {
        let mut r = stream(seed, Module::Test, 2, 0);
        let d = 1 + (uniform(&mut r) * 2.0) as usize;
        let l = 1 + (uniform(&mut r) * 2.0) as usize;
        let c = (0..6 * d).map(|_| normal(&mut r)).collect();
        let s = (0..2 * d * l).map(|_| 0.5 * normal(&mut r)).collect();
        RandomModel {
            d,
            l,
            c,
            s,
            actions: ActionSet::scalar(&[-1.0, 0.0, 1.0]),
        }
    }
}

impl CoefficientSet for RandomModel {
    fn name(&self) -> &str {
        "random"
    }
    fn dims(&self) -> Dims {
        Dims {
            state: self.d,
            idio: self.l,
            common: 1,
        }
    }
    fn actions(&self) -> &ActionSet {
        &self.actions
    }
    fn feature_count(&self) -> usize {
        1
    }
    fn feature_kernel(&self, y: &[f64], out: &mut [f64]) {
        out[0] = y[0];
    }
    fn feature_kernel_gradient(&self, _y: &[f64], out: &mut [f64]) {
        out[0] = 1.0;
        out[1..].iter_mut().for_each(|v| *v = 0.0);
    }
    fn drift(&self, t: f64, x: &[f64], m: &[f64], u: &[f64], out: &mut [f64]) {
        let d = self.d;
        for a in 0..d {
            let c = &self.c[6 * a..6 * a + 6];
            out[a] = c[0] + c[1] * x[a] + c[2] * x[(a + 1) % d].sin() + c[3] * u[0] + c[4] * m[0] + c[5] * t;
        }
    }
    fn diffusion(&self, _t: f64, x: &[f64], _m: &[f64], out: &mut [f64]) {
        let (d, l) = (self.d, self.l);
        for a in 0..d {
            for c in 0..l {
                let i = a * l + c;
                out[i] = self.s[2 * i] + self.s[2 * i + 1] * x[a].cos();
            }
        }
    }
    fn common(&self, _t: f64, _x: &[f64], _m: &[f64], out: &mut [f64]) {
        out.iter_mut().for_each(|v| *v = 0.0);
    }
    fn running_cost(&self, _t: f64, x: &[f64], _m: &[f64], u: &[f64]) -> f64 {
        x.iter().map(|v| v * v).sum::<f64>() + u[0] * u[0]
    }
    fn terminal_cost(&self, x: &[f64], _m: &[f64]) -> f64 {
        x.iter().map(|v| v * v).sum()
    }
}

fn c2_euler_maruyama() -> Res<Verdict> {
    let mut table = Table::new(["model", "d", "l", "steps", "particles", "mismatches", "max_abs_diff"]);
    let (mut total_mismatch, mut worst) = (0usize, 0.0f64);
    for i in 0..20u64 {
        let model = Arc::new(RandomModel::new(i));
        let (d, l) = (model.d, model.l);
        let n = 8 + (i as usize * 7) % 57;
        let particles = 50;
        let grid = TimeGrid::new(1.0, n)?;
        let path = Arc::new(ito_path(grid, 100 + i)?);
        let init = InitialLaw::Gaussian {
            mean: vec![0.2; d],
            sd: vec![0.5; d],
        };
        let cloud = init.sample_cloud(i, 300);
        let flow = Arc::new(MeasureFlow::constant(grid, &cloud, d, 1)?);
        let dynm: Arc<dyn CoefficientSet> = model.clone();
        let env = Environment::new(dynm.clone(), flow, path)?;
        let pol = uniform_policy(dynm.as_ref(), n)?;
        let sol = solve(&env, &pol, &init, particles, 7 + i)?;
        let dw = sol.increments();
        let dt = grid.dt();
        let kk = model.actions.len();
        let (mut mismatch, mut diff) = (0usize, 0.0f64);
        let (mut drift, mut bbar, mut sig) = (vec![0.0; d], vec![0.0; d], vec![0.0; d * l]);
        for p in 0..particles {
            let mut x = sol.x().z(p, 0).to_vec();
            for s in 0..n {
                let t = grid.time(s);
                let m = env.field().features(s);
                bbar.iter_mut().for_each(|v| *v = 0.0);
                for u in 0..kk {
                    model.drift(t, &x, m, model.actions.get(u), &mut drift);
                    for a in 0..d {
                        bbar[a] += (1.0 / kk as f64) * drift[a];
                    }
                }
                model.diffusion(t, &x, m, &mut sig);
                let w = &dw[(p * n + s) * l..(p * n + s + 1) * l];
                let next: Vec<f64> = (0..d)
                    .map(|a| {
                        let mut noise = 0.0;
                        for c in 0..l {
                            noise += sig[a * l + c] * w[c];
                        }
                        x[a] + bbar[a] * dt + noise
                    })
                    .collect();
                for (got, want) in sol.x().z(p, s + 1).iter().zip(&next) {
                    if got.to_bits() != want.to_bits() {
                        mismatch += 1;
                        diff = diff.max((got - want).abs());
                    }
                }
                x = next;
            }
        }
        total_mismatch += mismatch;
        worst = worst.max(diff);
        table.push(vec![
            i.to_string(),
            d.to_string(),
            l.to_string(),
            n.to_string(),
            particles.to_string(),
            mismatch.to_string(),
            f(diff),
        ]);
    }
    Ok(Verdict {
        pass: total_mismatch == 0,
        detail: format!("20 random models: {total_mismatch} entries differ from Euler-Maruyama (max |diff| {worst:.2e})"),
        tables: vec![("euler_maruyama.csv".into(), table)],
    })
}

// ---------------------------------------------------------------- 3

fn least_squares_slope(x: &[f64], y: &[f64]) -> f64 {
    let n = x.len() as f64;
    let (mx, my) = (x.iter().sum::<f64>() / n, y.iter().sum::<f64>() / n);
    let sxy: f64 = x.iter().zip(y).map(|(a, b)| (a - mx) * (b - my)).sum();
    let sxx: f64 = x.iter().map(|a| (a - mx) * (a - mx)).sum();
    sxy / sxx
}

fn c3_strong_rate() -> Res<Verdict> {
    let a = 0.5;
    let model = models::build("linear-rough", &[("a".into(), a)])?;
    let fine = 256;
    let levels = [32usize, 64, 128, 256];
    let samples = 200;
    let x0 = 1.0;
    let init = InitialLaw::Dirac { point: vec![x0] };
    let mut errors = vec![0.0; levels.len()];
    for j in 0..samples {
        let fgrid = TimeGrid::new(1.0, fine)?;
        let incs = gauss(300 + j as u64, 3, fine, fgrid.dt().sqrt());
        let mut values = vec![0.0; fine + 1];
        for s in 0..fine {
            values[s + 1] = values[s] + incs[s];
        }
        let exact = (a * values[fine]).exp() * x0;
        for (e, &n) in errors.iter_mut().zip(&levels) {
            let grid = TimeGrid::new(1.0, n)?;
            let coarse: Vec<f64> = (0..=n).map(|i| values[i * (fine / n)]).collect();
            let path = Arc::new(RoughPath::smooth_lift(&coarse, 1, grid)?);
            let flow = Arc::new(MeasureFlow::constant(grid, &[x0], 1, 1)?);
            let env = Environment::new(model.clone(), flow, path)?;
            let pol = uniform_policy(model.as_ref(), n)?;
            let sol = solve(&env, &pol, &init, 1, 1)?;
            *e += (sol.x().z(0, n)[0] - exact).abs() / samples as f64;
        }
    }
    let lx: Vec<f64> = levels.iter().map(|&n| (n as f64).ln()).collect();
    let ly: Vec<f64> = errors.iter().map(|e| e.ln()).collect();
    let slope = -least_squares_slope(&lx, &ly);
    let mut table = Table::new(["steps", "mean_abs_error"]);
    for (n, e) in levels.iter().zip(&errors) {
        table.push(vec![n.to_string(), f(*e)]);
    }
    table.push(vec!["slope".into(), f(slope)]);
    Ok(Verdict {
        pass: slope >= 0.9,
        detail: format!(
            "strong error {} over N = 32..256, log-log slope {slope:.3} (need >= 0.9)",
            errors.iter().map(|e| format!("{e:.2e}")).collect::<Vec<_>>().join(", ")
        ),
        tables: vec![("strong_rate.csv".into(), table)],
    })
}

// ---------------------------------------------------------------- 4

fn c4_martingale() -> Res<Verdict> {
    let n = 128;
    let grid = TimeGrid::new(1.0, n)?;
    let path = Arc::new(ito_path(grid, 7)?);
    let model = models::build("tanh-interaction", &[])?;
    let init = gaussian_init();
    let env = pilot_env(model.clone(), path, &init, 2000)?;
    let pol = uniform_policy(model.as_ref(), n)?;
    let sol = solve(&env, &pol, &init, 10_000, 2)?;
    let level = 0.01;
    let diag = martingale_diagnostics(&sol, &default_battery(1, 1, 3.0), level)?;
    let trivial = martingale_diagnostics(&sol, &[TestFunction::constant(2, 3.5)], level)?;
    let c = &trivial.per_phi[0];
    let zeros = c.max_abs_increment == 0.0
        && c.qv_gap == 0.0
        && c.cross_gap.iter().all(|v| *v == 0.0)
        && c.residual_t.iter().all(|v| *v == 0.0);
    let mut table = Table::new(["phi", "qv_gap", "qv_t", "qv_pass", "cross_t", "cross_pass", "residual_pass"]);
    let mut pass = zeros;
    for p in diag.per_phi.iter().chain(&trivial.per_phi) {
        pass &= p.qv_pass && p.cross_pass;
        table.push(vec![
            p.name.clone(),
            f(p.qv_gap),
            f(p.qv_t),
            p.qv_pass.to_string(),
            p.cross_t.iter().map(|v| f(*v)).collect::<Vec<_>>().join(" "),
            p.cross_pass.to_string(),
            p.residual_pass.to_string(),
        ]);
    }
    let worst_qv = diag.per_phi.iter().map(|p| p.qv_t.abs()).fold(0.0, f64::max);
    let worst_cross = diag.per_phi.iter().flat_map(|p| p.cross_t.iter()).map(|v| v.abs()).fold(0.0, f64::max);
    Ok(Verdict {
        pass,
        detail: format!(
            "P = 1e4, N = 128: max |t| quadratic variation {worst_qv:.2}, cross {worst_cross:.2} vs critical {:.2} at level {level}; constant phi exactly zero: {zeros}",
            diag.critical
        ),
        tables: vec![("martingale.csv".into(), table)],
    })
}

// ---------------------------------------------------------------- 5

fn c5_apriori() -> Res<Verdict> {
    let fine = 256;
    let fgrid = TimeGrid::new(1.0, fine)?;
    let fine_path = ito_path(fgrid, 1)?;
    let model = models::build("tanh-interaction", &[])?;
    let init = gaussian_init();
    let index = IndexPair::new(0.4, 0.35, 0.45, 2.0)?;
    let mut table = Table::new(["steps", "state_norm", "diffusion_norm", "cvf_norm", "envelope", "flagged"]);
    let (mut states, mut diffs, mut flagged) = (Vec::new(), Vec::new(), false);
    for n in [64usize, 128, 256] {
        let path = Arc::new(fine_path.coarsen(fine / n)?);
        let env = pilot_env(model.clone(), path, &init, 2000)?;
        let pol = uniform_policy(model.as_ref(), n)?;
        let sol = solve(&env, &pol, &init, 2000, 2)?;
        let mut st = AprioriSettings::new(index, 2.0);
        st.stride = n / 64;
        let snap = apriori_monitor(&sol, &st)?;
        flagged |= snap.flagged;
        states.push(snap.state.combined);
        diffs.push(snap.diffusion.combined);
        table.push(vec![
            n.to_string(),
            f(snap.state.combined),
            f(snap.diffusion.combined),
            f(snap.cvf.total),
            f(snap.envelope),
            snap.flagged.to_string(),
        ]);
    }
    let spread = |v: &[f64]| v.iter().cloned().fold(0.0, f64::max) / v.iter().cloned().fold(f64::INFINITY, f64::min);
    let (rs, rd) = (spread(&states), spread(&diffs));
    Ok(Verdict {
        pass: rs <= 2.0 && rd <= 2.0 && !flagged,
        detail: format!("N = 64/128/256: state norm spread {rs:.3}, diffusion norm spread {rd:.3} (need <= 2), flagged: {flagged}"),
        tables: vec![("apriori.csv".into(), table)],
    })
}

// ---------------------------------------------------------------- 6

fn c6_no_interaction() -> Res<Verdict> {
    let grid = TimeGrid::new(1.0, 64)?;
    let path = Arc::new(ito_path(grid, 1)?);
    let model = models::build("no-interaction", &[])?;
    let st = FixedPointSettings::new(2000, 1);
    let eq = fixed_point(model, path, &gaussian_init(), &st)?;
    let r = &eq.report;
    let first = &r.records[0];
    let ex = &first.exploitability;
    let mut table = Table::new(["iteration", "w2_update", "unchanged", "exploitability", "error_bar"]);
    for rec in &r.records {
        table.push(vec![
            rec.iteration.to_string(),
            f(rec.w2_update),
            rec.unchanged.to_string(),
            f(rec.exploitability.value),
            f(rec.exploitability.error_bar),
        ]);
    }
    Ok(Verdict {
        pass: r.converged && r.iterations == 1 && first.unchanged && ex.value <= 2.0 * ex.error_bar,
        detail: format!(
            "converged {} after {} iteration(s), flow bitwise unchanged {}, exploitability {:.2e} vs 2 x error bar {:.2e}",
            r.converged,
            r.iterations,
            first.unchanged,
            ex.value,
            2.0 * ex.error_bar
        ),
        tables: vec![("no_interaction.csv".into(), table)],
    })
}

// ---------------------------------------------------------------- 7

fn c7_contraction() -> Res<Verdict> {
    let grid = TimeGrid::new(1.0, 64)?;
    let path = Arc::new(ito_path(grid, 1)?);
    let model = models::build("lq", &[])?;
    let init = InitialLaw::Gaussian {
        mean: vec![0.5],
        sd: vec![0.3],
    };
    let mut st = FixedPointSettings::new(2000, 1);
    st.max_iters = 6;
    st.tol_w2 = 0.0;
    let index = IndexPair::new(0.4, 0.35, 0.45, 2.0)?;
    st.domain = Some(DomainSettings::new(index, 2.0, 10.0, 0.25));
    let eq = fixed_point(model, path, &init, &st)?;
    let r = &eq.report;
    let d = r.distances();
    let ratios: Vec<f64> = d.windows(2).map(|w| w[1] / w[0]).collect();
    let member = r.records.iter().all(|rec| rec.domain.map(|c| c.member).unwrap_or(false));
    let last = &r.records.last().ok_or("no iterations")?.exploitability;
    let mut table = Table::new(["iteration", "w2_update", "ratio", "exploitability", "error_bar", "member"]);
    for (i, rec) in r.records.iter().enumerate() {
        table.push(vec![
            rec.iteration.to_string(),
            f(rec.w2_update),
            if i == 0 { String::new() } else { f(ratios[i - 1]) },
            f(rec.exploitability.value),
            f(rec.exploitability.error_bar),
            rec.domain.map(|c| c.member).unwrap_or(false).to_string(),
        ]);
    }
    let worst = ratios.iter().cloned().fold(0.0, f64::max);
    let bound = 1e-2 + last.error_bar;
    Ok(Verdict {
        pass: ratios.len() >= 5 && ratios.iter().all(|q| *q < 0.5) && last.value < bound && member,
        detail: format!(
            "{} ratios, worst {worst:.3} (need < 0.5); final exploitability {:.2e} < {bound:.2e}: {}; in domain throughout: {member}",
            ratios.len(),
            last.value,
            last.value < bound
        ),
        tables: vec![("contraction.csv".into(), table)],
    })
}

// ---------------------------------------------------------------- 8

fn randomize_batch(c: f64, seed: u64, coupling: Coupling) -> Res<roughmfg_core::randomize::RandomizedReport> {
    let n = 32;
    let grid = TimeGrid::new(1.0, n)?;
    let model = models::build("gaussian", &[("c".into(), c)])?;
    let pol = uniform_policy(model.as_ref(), n)?;
    let mut st = RandomizeSettings::new(200, 2000, seed);
    st.coupling = coupling;
    Ok(compare_pathwise_vs_randomized(model, pol, &gaussian_init(), grid, &st)?)
}

fn c8_randomization() -> Res<Verdict> {
    let mut table = Table::new(["c", "coupling", "seed", "z_mean", "z_second", "within_3_sigma", "energy_p", "max_gap"]);
    let mut row = |c: f64, seed: u64, coupling: Coupling, rep: &roughmfg_core::randomize::RandomizedReport| {
        table.push(vec![
            f(c),
            format!("{coupling:?}"),
            seed.to_string(),
            f(rep.pooled.z[0]),
            f(rep.pooled.z[1]),
            rep.pooled.within_three_sigma.to_string(),
            f(rep.energy.p_value),
            rep.max_pathwise_gap.map(f).unwrap_or_default(),
        ]);
    };
    let mut energy_ok = 0;
    let mut pooled_first = false;
    for b in 0..20u64 {
        let seed = 1000 + b;
        let rep = randomize_batch(1.0, seed, Coupling::Independent)?;
        energy_ok += usize::from(rep.energy.p_value >= 0.01);
        if b == 0 {
            pooled_first = rep.pooled.within_three_sigma;
        }
        row(1.0, seed, Coupling::Independent, &rep);
    }
    let flat = randomize_batch(0.0, 1000, Coupling::Independent)?;
    row(0.0, 1000, Coupling::Independent, &flat);
    let shared = randomize_batch(0.0, 1000, Coupling::Shared)?;
    row(0.0, 1000, Coupling::Shared, &shared);
    let flat_ok = flat.pooled.within_three_sigma && flat.energy.p_value >= 0.01;
    let shared_exact = shared.max_pathwise_gap == Some(0.0);
    Ok(Verdict {
        pass: pooled_first && energy_ok >= 19 && flat_ok && shared_exact,
        detail: format!(
            "S = 200, P = 2000: pooled moments within 3 sigma {pooled_first}; energy test p >= 0.01 in {energy_ok}/20 batches (need 19); sigma0 = 0 passes {flat_ok}, shared coupling exact {shared_exact}"
        ),
        tables: vec![("randomize.csv".into(), table)],
    })
}

// ---------------------------------------------------------------- 9

fn c9_causality() -> Res<Verdict> {
    let n = 16;
    let grid = TimeGrid::new(1.0, n)?;
    let path = Arc::new(ito_path(grid, 5)?);
    let model = models::build("no-interaction", &[])?;
    let init = InitialLaw::Dirac { point: vec![0.0] };
    let flow = Arc::new(MeasureFlow::constant(grid, &[0.0], 1, 1)?);
    let env = Environment::new(model.clone(), flow, path)?;
    let acts = model.actions().clone();
    let peek = Arc::new(RelaxedPolicy::causal(acts.clone(), n, Arc::new(PeekingSampler)));
    let rejected = matches!(realize_from_measure(&env, &peek, &init, 50, 1), Err(Error::Causality { .. }));
    let sign = Arc::new(RelaxedPolicy::causal(acts, n, Arc::new(SignSampler)));
    let audit = realize_from_measure(&env, &sign, &init, 50, 1)?.audit().cloned().ok_or("no audit log")?;
    let gmodel = models::build("gaussian", &[])?;
    let pol = uniform_policy(gmodel.as_ref(), n)?;
    let st = RandomizeSettings::new(50, 500, 9);
    let shuffle = causality_shuffle_check(gmodel, pol, &gaussian_init(), grid, &st, 3)?;
    let mut table = Table::new(["check", "value"]);
    table.push(vec!["peeking_rejected".into(), rejected.to_string()]);
    table.push(vec!["sign_audit_draws".into(), audit.draws.to_string()]);
    table.push(vec!["sign_audit_lookahead".into(), audit.max_lookahead.to_string()]);
    table.push(vec!["shuffle_max_z".into(), f(shuffle.max_z)]);
    table.push(vec!["shuffle_critical".into(), f(shuffle.critical)]);
    Ok(Verdict {
        pass: rejected && audit.passed() && shuffle.passed,
        detail: format!(
            "peeking policy rejected {rejected}; causal policy audit clean {} ({} draws); W re-keying max z {:.2} < {:.2}: {}",
            audit.passed(),
            audit.draws,
            shuffle.max_z,
            shuffle.critical,
            shuffle.passed
        ),
        tables: vec![("causality.csv".into(), table)],
    })
}

// ---------------------------------------------------------------- 10

const CLI_CONFIGS: [(&str, &str); 3] = [
    (
        "rsde",
        "[run]\nkind = \"rsde\"\nmodel = \"tanh-interaction\"\nseed = 3\n[grid]\nsteps = 16\n[rsde]\nparticles = 300\n",
    ),
    (
        "mfg",
        "[run]\nkind = \"mfg\"\nmodel = \"lq\"\nseed = 3\n[grid]\nsteps = 16\n[fixedpoint]\nparticles = 300\nmax_iters = 4\n",
    ),
    (
        "randomize",
        "[run]\nkind = \"randomize\"\nmodel = \"gaussian\"\nseed = 3\n[grid]\nsteps = 8\n[randomize]\nsamples = 20\nparticles = 200\npermutations = 100\n",
    ),
];

const CRITERIA: [Criterion; 9] = [
    Criterion {
        id: 1,
        name: "lift algebra",
        limit: Duration::from_secs(10),
        check: c1_lifts,
    },
    Criterion {
        id: 2,
        name: "Euler-Maruyama reduction",
        limit: Duration::from_secs(10),
        check: c2_euler_maruyama,
    },
    Criterion {
        id: 3,
        name: "strong rate",
        limit: Duration::from_secs(30),
        check: c3_strong_rate,
    },
    Criterion {
        id: 4,
        name: "martingale diagnostics",
        limit: Duration::from_secs(120),
        check: c4_martingale,
    },
    Criterion {
        id: 5,
        name: "a priori envelope",
        limit: Duration::from_secs(120),
        check: c5_apriori,
    },
    Criterion {
        id: 6,
        name: "no-interaction fixed point",
        limit: Duration::from_secs(30),
        check: c6_no_interaction,
    },
    Criterion {
        id: 7,
        name: "contraction",
        limit: Duration::from_secs(300),
        check: c7_contraction,
    },
    Criterion {
        id: 8,
        name: "randomisation",
        limit: Duration::from_secs(600),
        check: c8_randomization,
    },
    Criterion {
        id: 9,
        name: "causality",
        limit: Duration::from_secs(60),
        check: c9_causality,
    },
];

/// Runs every criterion (and the CLI configurations) writing outputs to `dir`.
fn run_all(dir: &Path, report: bool) -> bool {
    let mut all = true;
    for c in &CRITERIA {
        let started = Instant::now();
        let result = (c.check)();
        let elapsed = started.elapsed();
        let (pass, detail) = match result {
            Ok(v) => {
                for (name, table) in &v.tables {
                    if let Err(e) = table.write(&dir.join(format!("c{}_{name}", c.id)), "acceptance") {
                        eprintln!("cannot write {name}: {e}");
                    }
                }
                (v.pass && elapsed <= c.limit, v.detail)
            }
            Err(e) => (false, format!("error: {e}")),
        };
        all &= pass;
        if report {
            println!(
                "criterion {:>2} {:<28} {} | {} | {:.1} s (limit {} s)",
                c.id,
                c.name,
                if pass { "PASS" } else { "FAIL" },
                detail,
                elapsed.as_secs_f64(),
                c.limit.as_secs()
            );
        }
    }
    for (name, text) in CLI_CONFIGS {
        let run = Config::parse(text, Path::new("acceptance.toml"))
            .and_then(|cfg| roughmfg::run(&cfg, &dir.join(name), &RunOptions::default()));
        if let Err(e) = run {
            eprintln!("cli configuration {name} failed: {e}");
            all = false;
        }
    }
    all
}

/// Every file except the manifest (which records wall time), keyed by relative path.
fn collect(dir: &Path) -> BTreeMap<PathBuf, Vec<u8>> {
    let mut out = BTreeMap::new();
    let mut stack = vec![dir.to_path_buf()];
    while let Some(d) = stack.pop() {
        for entry in std::fs::read_dir(&d).into_iter().flatten().flatten() {
            let p = entry.path();
            if p.is_dir() {
                stack.push(p);
            } else if p.file_name().is_some_and(|n| n != "manifest.json") {
                let bytes = std::fs::read(&p).unwrap_or_default();
                out.insert(p.strip_prefix(dir).unwrap().to_path_buf(), bytes);
            }
        }
    }
    out
}

fn main() {
    let root = tempfile::tempdir().expect("temporary directory");
    let (a, b) = (root.path().join("first"), root.path().join("second"));
    std::fs::create_dir_all(&a).unwrap();
    std::fs::create_dir_all(&b).unwrap();
    let mut all = run_all(&a, true);

    let started = Instant::now();
    run_all(&b, false);
    let (fa, fb) = (collect(&a), collect(&b));
    let differing: Vec<String> = fa
        .iter()
        .filter(|(k, v)| fb.get(*k) != Some(*v))
        .map(|(k, _)| k.display().to_string())
        .collect();
    let pass = !fa.is_empty() && fa.len() == fb.len() && differing.is_empty();
    all &= pass;
    println!(
        "criterion 10 {:<28} {} | {} files compared, {} differ{} | {:.1} s",
        "determinism",
        if pass { "PASS" } else { "FAIL" },
        fa.len(),
        differing.len(),
        if differing.is_empty() { String::new() } else { format!(": {}", differing.join(", ")) },
        started.elapsed().as_secs_f64()
    );
    if !all {
        std::process::exit(1);
    }
}
