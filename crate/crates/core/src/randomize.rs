//! Brownian common noise through Itô lifts: pathwise solutions aggregated
//! over sampled lifts versus a direct two-Brownian particle simulation.

use alloc::string::String;
use alloc::sync::Arc;
use alloc::vec;
use alloc::vec::Vec;
#[allow(unused_imports)]
use num_traits::Float;
use serde::{Deserialize, Serialize};

use crate::error::{input_err, Error, Result};
use crate::math::{mat_vec_add, mean, par_map, two_sided_critical, variance};
use crate::measureflow::MeasureFlow;
use crate::policy::{PolicyMode, RelaxedPolicy};
use crate::rng::{derive_seed, normal, stream, Module};
use crate::roughpath::{RoughPath, TimeGrid};
use crate::rsde::{sample_noise, solve_with_noise, Environment, IdioNoise, InitialLaw, RsdeSolution, BLOW_UP};
use crate::stats::{energy_test, EnergyTest};
use crate::vectorfield::CoefficientSet;

/// Brownian increments of common sample `index`, `N x k`.
pub fn common_increments(grid: &TimeGrid, k: usize, seed: u64, index: u64) -> Vec<f64> {
    let mut rng = stream(seed, Module::CommonNoise, 0, index);
    let sq = grid.dt().sqrt();
    (0..grid.steps() * k).map(|_| sq * normal(&mut rng)).collect()
}

/// Itô lift of a sampled Brownian path.
pub fn sample_lift(grid: TimeGrid, k: usize, seed: u64) -> Result<RoughPath> {
    sample_lift_indexed(grid, k, seed, 0)
}

pub fn sample_lift_indexed(grid: TimeGrid, k: usize, seed: u64, index: u64) -> Result<RoughPath> {
    RoughPath::ito_lift(&common_increments(&grid, k, seed, index), k, grid)
}

/// Lift built on a grid `refine` times finer and restricted to `grid`; its
/// second level carries the within-step iterated sums.
pub fn sample_lift_refined(grid: TimeGrid, k: usize, seed: u64, index: u64, refine: usize) -> Result<RoughPath> {
    if refine <= 1 {
        return sample_lift_indexed(grid, k, seed, index);
    }
    let fine = grid.refine(refine)?;
    RoughPath::ito_lift(&common_increments(&fine, k, seed, index), k, fine)?.coarsen(refine)
}

/// How the per-sample measure flow of the pathwise pipeline is obtained.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum FlowMode {
    /// The initial law frozen in time; exact for measure-independent dynamics.
    FrozenFlow,
    /// Picard iteration of the conditional flow under the given policy.
    PerSampleFixedPoint { iterations: usize },
}

/// Which draws the joint simulation shares with the pathwise pipeline.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum Coupling {
    /// Fresh common and idiosyncratic noise: an honest two-sample comparison.
    Independent,
    /// Same `B0` and `W` draws sample by sample.
    Shared,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ConditionalMoments {
    /// `E[X_T | B0]`, length `d`.
    pub mean: Vec<f64>,
    /// `E[X_T X_T^T | B0]`, row-major `d x d`.
    pub second: Vec<f64>,
    pub particles: usize,
}

impl ConditionalMoments {
    pub fn from_cloud(cloud: &[f64], d: usize) -> Self {
        let p = cloud.len() / d;
        let mut mean = vec![0.0; d];
        let mut second = vec![0.0; d * d];
        for x in cloud.chunks(d) {
            for a in 0..d {
                mean[a] += x[a];
                for b in 0..d {
                    second[a * d + b] += x[a] * x[b];
                }
            }
        }
        mean.iter_mut().for_each(|v| *v /= p as f64);
        second.iter_mut().for_each(|v| *v /= p as f64);
        ConditionalMoments { mean, second, particles: p }
    }

    /// `(mean, upper triangle of the second moment)` as one vector.
    pub fn features(&self) -> Vec<f64> {
        let d = self.mean.len();
        let mut out = self.mean.clone();
        for a in 0..d {
            for b in a..d {
                out.push(self.second[a * d + b]);
            }
        }
        out
    }

    /// Conditional variances of the coordinates.
    pub fn variances(&self) -> Vec<f64> {
        let d = self.mean.len();
        (0..d).map(|a| self.second[a * d + a] - self.mean[a] * self.mean[a]).collect()
    }
}

fn check_policy(policy: &RelaxedPolicy, model: &dyn CoefficientSet, grid: &TimeGrid) -> Result<()> {
    if policy.mode() != PolicyMode::Feedback {
        return Err(Error::Config("the joint simulation needs a feedback policy".into()));
    }
    if policy.steps() != grid.steps() || policy.actions() != model.actions() {
        return Err(input_err!("policy does not match the model and grid"));
    }
    Ok(())
}

/// Euler-Maruyama for one common sample of the two-Brownian system, with the
/// measure argument given by the sample's own particle cloud at each step.
pub fn joint_sample(
    model: &dyn CoefficientSet,
    policy: &RelaxedPolicy,
    grid: TimeGrid,
    noise: &IdioNoise,
    common: &[f64],
) -> Result<Vec<f64>> {
    check_policy(policy, model, &grid)?;
    let dims = model.dims();
    let (d, l, k) = (dims.state, dims.idio, dims.common);
    if common.len() != grid.steps() * k || noise.dim != l || noise.steps != grid.steps() {
        return Err(input_err!("noise shapes do not match the model and grid"));
    }
    let pcount = noise.particles;
    let actions = model.actions();
    let dt = grid.dt();
    let mut x = noise.x0.clone();
    let mut next = vec![0.0; x.len()];
    let (mut drift, mut bbar) = (vec![0.0; d], vec![0.0; d]);
    let (mut sig, mut s0) = (vec![0.0; d * l], vec![0.0; d * k]);
    let (mut dw_part, mut db_part) = (vec![0.0; d], vec![0.0; d]);
    for n in 0..grid.steps() {
        let t = grid.time(n);
        let m = model.features_of(&x);
        let db = &common[n * k..(n + 1) * k];
        for p in 0..pcount {
            let xp = &x[p * d..(p + 1) * d];
            let probs = policy.probabilities(n, xp).expect("feedback policy");
            bbar.iter_mut().for_each(|v| *v = 0.0);
            for (i, &pi) in probs.iter().enumerate() {
                if pi == 0.0 {
                    continue;
                }
                model.drift(t, xp, &m, actions.get(i), &mut drift);
                for (b, v) in bbar.iter_mut().zip(&drift) {
                    *b += pi * v;
                }
            }
            model.diffusion(t, xp, &m, &mut sig);
            model.common(t, xp, &m, &mut s0);
            dw_part.iter_mut().for_each(|v| *v = 0.0);
            db_part.iter_mut().for_each(|v| *v = 0.0);
            mat_vec_add(&sig, d, l, &noise.increments(p)[n * l..(n + 1) * l], &mut dw_part);
            mat_vec_add(&s0, d, k, db, &mut db_part);
            for a in 0..d {
                let v = xp[a] + bbar[a] * dt + dw_part[a] + db_part[a];
                if !(v.abs() <= BLOW_UP) {
                    return Err(Error::Diverged {
                        step: n + 1,
                        particle: p,
                        magnitude: v.abs(),
                    });
                }
                next[p * d + a] = v;
            }
        }
        core::mem::swap(&mut x, &mut next);
    }
    Ok(x)
}

/// Settings shared by both pipelines.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RandomizeSettings {
    pub samples: usize,
    pub particles: usize,
    pub seed: u64,
    pub mode: FlowMode,
    pub coupling: Coupling,
    /// Inner refinement factor of the lift (1 = same grid).
    pub refine: usize,
    pub permutations: usize,
    pub level: f64,
}

impl RandomizeSettings {
    pub fn new(samples: usize, particles: usize, seed: u64) -> Self {
        RandomizeSettings {
            samples,
            particles,
            seed,
            mode: FlowMode::FrozenFlow,
            coupling: Coupling::Independent,
            refine: 1,
            permutations: 500,
            level: 0.01,
        }
    }
}

/// Seeds of the idiosyncratic draws for pathwise sample `s`; `shuffle`
/// re-keys them while keeping the common noise.
fn idio_seed(seed: u64, sample: usize, shuffle: u64) -> u64 {
    derive_seed(derive_seed(seed, 1 + sample as u64), shuffle)
}

/// Solution of the pathwise problem on one lifted common sample.
pub fn pathwise_sample(
    model: &Arc<dyn CoefficientSet>,
    policy: &Arc<RelaxedPolicy>,
    init: &InitialLaw,
    path: Arc<RoughPath>,
    noise: &IdioNoise,
    seed: u64,
    mode: FlowMode,
) -> Result<RsdeSolution> {
    let grid = *path.grid();
    let dims = model.dims();
    let cloud = init.sample_cloud(seed, noise.particles.min(256));
    let mut flow = MeasureFlow::constant(grid, &cloud, dims.state, dims.common)?;
    let iterations = match mode {
        FlowMode::FrozenFlow => 0,
        FlowMode::PerSampleFixedPoint { iterations } => iterations,
    };
    for _ in 0..iterations {
        let env = Environment::new(model.clone(), Arc::new(flow), path.clone())?;
        flow = solve_with_noise(&env, policy, noise, seed)?.to_flow();
    }
    let env = Environment::new(model.clone(), Arc::new(flow), path)?;
    solve_with_noise(&env, policy, noise, seed)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SampleVerdict {
    pub sample: usize,
    pub pathwise: ConditionalMoments,
    pub joint: ConditionalMoments,
    /// Largest standardised difference of conditional means (shared coupling only).
    pub mean_z: Option<f64>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PooledComparison {
    /// Pooled mean and second-moment features per pipeline.
    pub pathwise: Vec<f64>,
    pub joint: Vec<f64>,
    /// Combined standard error per feature.
    pub sigma: Vec<f64>,
    /// `|difference| / sigma` per feature (zero when both agree exactly).
    pub z: Vec<f64>,
    pub within_three_sigma: bool,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RandomizedReport {
    pub model: String,
    pub mode: FlowMode,
    pub coupling: Coupling,
    pub samples: usize,
    pub particles: usize,
    pub seed: u64,
    pub per_sample: Vec<SampleVerdict>,
    pub pooled: PooledComparison,
    pub energy: EnergyTest,
    pub energy_pass: bool,
    /// `|pooled mean over all particles - average of conditional means|`.
    pub aggregation_defect: f64,
    /// Largest `|X_T|` difference between pipelines (shared coupling only).
    pub max_pathwise_gap: Option<f64>,
}

/// Conditional moments of `X_T` from both pipelines over `samples` common
/// samples, compared feature by feature and with an energy-distance test.
pub fn compare_pathwise_vs_randomized(
    model: Arc<dyn CoefficientSet>,
    policy: Arc<RelaxedPolicy>,
    init: &InitialLaw,
    grid: TimeGrid,
    settings: &RandomizeSettings,
) -> Result<RandomizedReport> {
    check_policy(&policy, model.as_ref(), &grid)?;
    if settings.samples < 2 || settings.particles == 0 {
        return Err(input_err!("need at least two common samples and one particle"));
    }
    let dims = model.dims();
    let (d, k) = (dims.state, dims.common);
    let seed = settings.seed;
    let rows = par_map(settings.samples, |s| -> Result<(ConditionalMoments, ConditionalMoments, Vec<f64>, f64)> {
        let path = Arc::new(sample_lift_refined(grid, k, seed, s as u64, settings.refine)?);
        let pw_seed = idio_seed(seed, s, 0);
        let noise = sample_noise(init, &grid, dims.idio, settings.particles, pw_seed)?;
        let sol = pathwise_sample(&model, &policy, init, path, &noise, pw_seed, settings.mode)?;
        let xt = sol.x().cloud(grid.steps());
        let (jnoise, jcommon) = match settings.coupling {
            Coupling::Shared => {
                let inc: Vec<f64> = (0..grid.steps()).flat_map(|n| sol.environment().path().increment(n, n + 1)).collect();
                (noise, inc)
            }
            Coupling::Independent => {
                let js = derive_seed(seed, u64::MAX - s as u64);
                (
                    sample_noise(init, &grid, dims.idio, settings.particles, js)?,
                    common_increments(&grid, k, js, s as u64),
                )
            }
        };
        let jt = joint_sample(model.as_ref(), &policy, grid, &jnoise, &jcommon)?;
        let gap = xt.iter().zip(&jt).fold(0.0f64, |a, (x, y)| a.max((x - y).abs()));
        Ok((ConditionalMoments::from_cloud(&xt, d), ConditionalMoments::from_cloud(&jt, d), xt, gap))
    });
    let mut per_sample = Vec::with_capacity(settings.samples);
    let mut all_x = Vec::new();
    let mut max_gap: f64 = 0.0;
    for (s, row) in rows.into_iter().enumerate() {
        let (pw, jt, xt, gap) = row?;
        max_gap = max_gap.max(gap);
        all_x.extend_from_slice(&xt);
        let mean_z = match settings.coupling {
            Coupling::Shared => {
                let (vp, vj) = (pw.variances(), jt.variances());
                let z = (0..d).fold(0.0f64, |acc, a| {
                    let diff = (pw.mean[a] - jt.mean[a]).abs();
                    let se = ((vp[a].max(0.0) + vj[a].max(0.0)) / pw.particles as f64).sqrt();
                    acc.max(if diff == 0.0 { 0.0 } else { diff / se })
                });
                Some(z)
            }
            Coupling::Independent => None,
        };
        per_sample.push(SampleVerdict {
            sample: s,
            pathwise: pw,
            joint: jt,
            mean_z,
        });
    }
    let feats_p: Vec<Vec<f64>> = per_sample.iter().map(|v| v.pathwise.features()).collect();
    let feats_j: Vec<Vec<f64>> = per_sample.iter().map(|v| v.joint.features()).collect();
    let nf = feats_p[0].len();
    let column = |f: &[Vec<f64>], i: usize| f.iter().map(|r| r[i]).collect::<Vec<f64>>();
    let s_count = settings.samples as f64;
    let (mut pp, mut pj, mut sigma, mut z) = (vec![], vec![], vec![], vec![]);
    for i in 0..nf {
        let (cp, cj) = (column(&feats_p, i), column(&feats_j, i));
        let (mp, mj) = (mean(&cp), mean(&cj));
        let sd = ((variance(&cp) + variance(&cj)) / s_count).sqrt();
        pp.push(mp);
        pj.push(mj);
        sigma.push(sd);
        z.push(if mp == mj { 0.0 } else { (mp - mj).abs() / sd });
    }
    let within_three_sigma = z.iter().all(|v| *v <= 3.0);
    let flat = |f: &[Vec<f64>]| f.iter().flatten().copied().collect::<Vec<f64>>();
    let energy = energy_test(&flat(&feats_p), &flat(&feats_j), nf, settings.permutations, seed)?;
    let direct_mean = mean(&all_x.iter().step_by(d).copied().collect::<Vec<f64>>());
    Ok(RandomizedReport {
        model: String::from(model.name()),
        mode: settings.mode,
        coupling: settings.coupling,
        samples: settings.samples,
        particles: settings.particles,
        seed,
        per_sample,
        pooled: PooledComparison {
            pathwise: pp.clone(),
            joint: pj,
            sigma,
            z,
            within_three_sigma,
        },
        energy_pass: energy.p_value >= settings.level,
        energy,
        aggregation_defect: (direct_mean - pp[0]).abs(),
        max_pathwise_gap: match settings.coupling {
            Coupling::Shared => Some(max_gap),
            Coupling::Independent => None,
        },
    })
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CausalityCheck {
    pub samples: usize,
    pub shuffles: usize,
    /// Largest standardised change of a conditional mean under a re-keyed `W`.
    pub max_z: f64,
    pub critical: f64,
    pub passed: bool,
}

/// Re-keys the idiosyncratic draws while keeping each common sample fixed,
/// and checks that conditional means move only within Monte Carlo error.
pub fn causality_shuffle_check(
    model: Arc<dyn CoefficientSet>,
    policy: Arc<RelaxedPolicy>,
    init: &InitialLaw,
    grid: TimeGrid,
    settings: &RandomizeSettings,
    shuffles: usize,
) -> Result<CausalityCheck> {
    check_policy(&policy, model.as_ref(), &grid)?;
    let dims = model.dims();
    let d = dims.state;
    let seed = settings.seed;
    let critical = two_sided_critical(settings.level / (settings.samples * shuffles * d).max(1) as f64);
    let zs = par_map(settings.samples, |s| -> Result<f64> {
        let path = Arc::new(sample_lift_refined(grid, dims.common, seed, s as u64, settings.refine)?);
        let run = |shuffle: u64| -> Result<ConditionalMoments> {
            let ss = idio_seed(seed, s, shuffle);
            let noise = sample_noise(init, &grid, dims.idio, settings.particles, ss)?;
            let sol = pathwise_sample(&model, &policy, init, path.clone(), &noise, ss, settings.mode)?;
            Ok(ConditionalMoments::from_cloud(&sol.x().cloud(grid.steps()), d))
        };
        let base = run(0)?;
        let mut worst: f64 = 0.0;
        for sh in 1..=shuffles as u64 {
            let other = run(sh)?;
            let (va, vb) = (base.variances(), other.variances());
            for a in 0..d {
                let se = ((va[a].max(0.0) + vb[a].max(0.0)) / settings.particles as f64).sqrt();
                let diff = (base.mean[a] - other.mean[a]).abs();
                worst = worst.max(if diff == 0.0 { 0.0 } else { diff / se });
            }
        }
        Ok(worst)
    });
    let mut max_z: f64 = 0.0;
    for z in zs {
        max_z = max_z.max(z?);
    }
    Ok(CausalityCheck {
        samples: settings.samples,
        shuffles,
        max_z,
        critical,
        passed: max_z < critical,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::models;
    use crate::policy::Lattice;

    fn uniform(model: &Arc<dyn CoefficientSet>, steps: usize) -> Arc<RelaxedPolicy> {
        let lat = Lattice::new(vec![-4.0], vec![4.0], vec![9]).unwrap();
        Arc::new(RelaxedPolicy::uniform(model.actions().clone(), lat, steps).unwrap())
    }

    #[test]
    fn lifts_are_reproducible_and_distinct() {
        let grid = TimeGrid::new(1.0, 32).unwrap();
        let a = sample_lift(grid, 2, 5).unwrap();
        assert_eq!(a, sample_lift(grid, 2, 5).unwrap());
        assert_ne!(a.point(32), sample_lift(grid, 2, 6).unwrap().point(32));
        assert!(a.chen_defect() <= 1e-12 * a.scale().max(1.0));
        let r = sample_lift_refined(grid, 2, 5, 0, 2).unwrap();
        assert_eq!(r.grid().steps(), 32);
        assert!(r.chen_defect() <= 1e-12 * r.scale().max(1.0));
    }

    #[test]
    fn second_level_has_mean_zero() {
        let grid = TimeGrid::new(1.0, 8).unwrap();
        let s = 10_000;
        let mut acc = [0.0; 4];
        for i in 0..s {
            let p = sample_lift_indexed(grid, 2, 7, i).unwrap();
            for (a, v) in acc.iter_mut().zip(p.second(0, 8)) {
                *a += v;
            }
        }
        for a in acc {
            assert!((a / s as f64).abs() <= 4.0 / (s as f64).sqrt());
        }
    }

    #[test]
    fn deterministic_start_gives_exact_conditional_mean() {
        let grid = TimeGrid::new(1.0, 16).unwrap();
        let model = models::build("gaussian", &[("c".into(), 1.0)]).unwrap();
        let pol = uniform(&model, 16);
        let init = InitialLaw::Dirac { point: vec![0.7] };
        let noise = sample_noise(&init, &grid, 1, 50, 3).unwrap();
        let common = common_increments(&grid, 1, 9, 0);
        let zero_w = IdioNoise {
            dw: vec![0.0; noise.dw.len()],
            ..noise
        };
        let xt = joint_sample(model.as_ref(), &pol, grid, &zero_w, &common).unwrap();
        let bt: f64 = common.iter().sum();
        for x in xt {
            assert!((x - (0.7 + bt)).abs() < 1e-12);
        }
    }

    #[test]
    fn shared_coupling_reproduces_joint_simulation_exactly() {
        let grid = TimeGrid::new(1.0, 16).unwrap();
        for c in [0.0, 1.0] {
            let model = models::build("gaussian", &[("c".into(), c)]).unwrap();
            let pol = uniform(&model, 16);
            let init = InitialLaw::Gaussian {
                mean: vec![0.0],
                sd: vec![0.5],
            };
            let mut s = RandomizeSettings::new(8, 64, 1);
            s.coupling = Coupling::Shared;
            s.permutations = 50;
            let r = compare_pathwise_vs_randomized(model, pol, &init, grid, &s).unwrap();
            assert_eq!(r.max_pathwise_gap, Some(0.0));
            assert!(r.pooled.z.iter().all(|z| *z == 0.0));
            assert!(r.per_sample.iter().all(|v| v.mean_z == Some(0.0)));
            assert!(r.aggregation_defect < 1e-12);
        }
    }

    #[test]
    fn causal_policies_are_rejected_by_joint_simulation() {
        let grid = TimeGrid::new(1.0, 4).unwrap();
        let model = models::build("gaussian", &[]).unwrap();
        let pol = Arc::new(RelaxedPolicy::causal(
            model.actions().clone(),
            4,
            Arc::new(crate::policy::SignSampler),
        ));
        let s = RandomizeSettings::new(2, 4, 0);
        let init = InitialLaw::Dirac { point: vec![0.0] };
        assert!(matches!(
            compare_pathwise_vs_randomized(model, pol, &init, grid, &s),
            Err(Error::Config(_))
        ));
    }
}
