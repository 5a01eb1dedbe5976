//! Experiment orchestration: turns a validated [`Config`] into an artifact
//! directory.

use std::path::{Path, PathBuf};
use std::sync::Arc;
use std::time::Instant;

use roughmfg_core::measureflow::{DomainSettings, MeasureFlow, W2Settings};
use roughmfg_core::mfg::{fixed_point, FixedPointSettings, LatticeSpec};
use roughmfg_core::models;
use roughmfg_core::policy::{Lattice, RelaxedPolicy};
use roughmfg_core::randomize::{compare_pathwise_vs_randomized, sample_lift, Coupling, FlowMode, RandomizeSettings};
use roughmfg_core::rsde::{
    apriori_monitor, default_battery, martingale_diagnostics, solve, AprioriSettings, AprioriSnapshot, Environment,
    MartingaleDiagnostics,
};
use roughmfg_core::vectorfield::CoefficientSet;
use roughmfg_core::{HolderReport, RoughPath, TimeGrid};
use serde::Serialize;

use crate::config::{validate, Config, CouplingName, FlowModeName, LiftKind, RoughSource, RunKind};
use crate::error::{RunError, RunResult};
use crate::io::{self, Table};
use crate::manifest::{config_hash, write_json, Manifest, Versions};

#[derive(Debug, Clone, Copy, Default, PartialEq, Eq)]
pub struct RunOptions {
    pub strict: bool,
    pub threads: usize,
}

#[derive(Debug, Clone, PartialEq)]
pub struct Outcome {
    pub dir: PathBuf,
    pub hash: String,
    pub files: Vec<String>,
    /// Fixed-point runs only.
    pub converged: Option<bool>,
}

impl RunKind {
    pub fn command(self) -> &'static str {
        match self {
            RunKind::Rsde => "rsde solve",
            RunKind::Mfg => "mfg solve",
            RunKind::Randomize => "randomize compare",
        }
    }
}

/// The common-noise rough path named by `[grid]` and `[rough]`.
pub fn build_path(cfg: &Config) -> RunResult<RoughPath> {
    let path = match cfg.rough.source {
        RoughSource::File => {
            let file = cfg.rough.path.as_ref().ok_or_else(|| {
                RunError::Validation(vec!["rough.path is required when rough.source = \"file\"".into()])
            })?;
            io::read_rough_path(file)?
        }
        RoughSource::Sample => {
            let grid = TimeGrid::new(cfg.grid.horizon, cfg.grid.steps)?;
            let k = models::build(&cfg.run.model, &cfg.overrides())?.dims().common;
            let ito = sample_lift(grid, k, cfg.rough_seed())?;
            match cfg.rough.lift {
                LiftKind::Ito => ito,
                LiftKind::Geometric => RoughPath::smooth_lift(ito.first_level(), k, grid)?,
            }
        }
    };
    Ok(path)
}

/// Uniform relaxed control, or one fixed action when `rsde.action` is set.
pub fn simple_policy(cfg: &Config, model: &dyn CoefficientSet, steps: usize) -> RunResult<Arc<RelaxedPolicy>> {
    let d = model.dims().state;
    let lattice = Lattice::new(vec![-1.0; d], vec![1.0; d], vec![2; d])?;
    let actions = model.actions().clone();
    let policy = match cfg.rsde.action {
        None => RelaxedPolicy::uniform(actions, lattice, steps)?,
        Some(a) => {
            let mut probs = vec![0.0; actions.len()];
            probs[a] = 1.0;
            RelaxedPolicy::constant(actions, lattice, steps, &probs)?
        }
    };
    Ok(Arc::new(policy))
}

#[derive(Debug, Clone, Serialize)]
pub struct RsdeReport {
    pub model: String,
    pub seed: u64,
    pub particles: usize,
    pub steps: usize,
    pub holder: HolderReport,
    pub chen_defect: f64,
    pub martingale: Option<MartingaleDiagnostics>,
    pub apriori: Option<AprioriSnapshot>,
}

struct Artifacts<'a> {
    dir: &'a Path,
    hash: String,
    files: Vec<String>,
}

impl Artifacts<'_> {
    fn table(&mut self, name: &str, t: &Table) -> RunResult<()> {
        t.write(&self.dir.join(name), &self.hash)?;
        self.files.push(name.into());
        Ok(())
    }

    fn json<T: Serialize>(&mut self, name: &str, v: &T) -> RunResult<()> {
        write_json(&self.dir.join(name), &self.hash, v)?;
        self.files.push(name.into());
        Ok(())
    }

    fn rough_path(&mut self, path: &RoughPath) -> RunResult<()> {
        io::write_rough_path(&self.dir.join("rough_path.bin"), path)?;
        self.files.push("rough_path.bin".into());
        self.table("rough_path.csv", &io::first_level_table(path))
    }
}

/// Validates `cfg`, runs the experiment it names and writes the artifact
/// directory, `manifest.json` last.
pub fn run(cfg: &Config, out: &Path, opts: &RunOptions) -> RunResult<Outcome> {
    let issues = validate(cfg);
    if !issues.is_empty() {
        return Err(RunError::Validation(issues));
    }
    let started = Instant::now();
    std::fs::create_dir_all(out).map_err(|e| RunError::io(out, e))?;
    let command = cfg.run.kind.command();
    let mut art = Artifacts {
        dir: out,
        hash: config_hash(cfg, command, opts.strict),
        files: Vec::new(),
    };
    let model = models::build(&cfg.run.model, &cfg.overrides())?;
    let path = Arc::new(build_path(cfg)?);
    art.rough_path(&path)?;
    let mut converged = None;
    let mut failure = None;
    match cfg.run.kind {
        RunKind::Rsde => run_rsde(cfg, model, path, &mut art)?,
        RunKind::Mfg => {
            let (ok, iterations, last_update) = run_mfg(cfg, model, path, opts, &mut art)?;
            converged = Some(ok);
            if opts.strict && !ok {
                failure = Some(RunError::NotConverged { iterations, last_update });
            }
        }
        RunKind::Randomize => run_randomize(cfg, model, *path.grid(), &mut art)?,
    }
    let manifest = Manifest {
        hash: art.hash.clone(),
        command: command.into(),
        seed: cfg.run.seed,
        strict: opts.strict,
        versions: Versions {
            roughmfg: crate::manifest::VERSION,
            arch: std::env::consts::ARCH,
        },
        config: cfg.clone(),
        files: art.files.clone(),
        threads: rayon::current_num_threads(),
        wall_time_seconds: started.elapsed().as_secs_f64(),
    };
    manifest.write(out)?;
    if let Some(e) = failure {
        return Err(e);
    }
    Ok(Outcome {
        dir: out.to_path_buf(),
        hash: art.hash,
        files: art.files,
        converged,
    })
}

fn run_rsde(cfg: &Config, model: Arc<dyn CoefficientSet>, path: Arc<RoughPath>, art: &mut Artifacts) -> RunResult<()> {
    let grid = *path.grid();
    let seed = cfg.run.seed;
    let p = cfg.rsde.particles;
    let dims = model.dims();
    let policy = simple_policy(cfg, model.as_ref(), grid.steps())?;
    let cloud = cfg.init.sample_cloud(seed, p.min(256));
    let mut flow = MeasureFlow::constant(grid, &cloud, dims.state, dims.common)?;
    for sweep in 0..cfg.rsde.sweeps {
        let env = Environment::new(model.clone(), Arc::new(flow), path.clone())?;
        flow = solve(&env, &policy, &cfg.init, p, seed.wrapping_add(1 + sweep as u64))?.to_flow();
    }
    let env = Environment::new(model.clone(), Arc::new(flow), path.clone())?;
    let sol = solve(&env, &policy, &cfg.init, p, seed)?;
    let martingale = if cfg.rsde.diagnostics {
        let battery = default_battery(dims.state, dims.idio, 3.0);
        Some(martingale_diagnostics(&sol, &battery, cfg.rsde.level)?)
    } else {
        None
    };
    let apriori = if cfg.rsde.monitor {
        let mut st = AprioriSettings::new(cfg.index_pair()?, cfg.domain.m);
        st.envelope_constant = cfg.rsde.envelope_constant;
        st.envelope_exponent = cfg.rsde.envelope_exponent;
        st.stride = grid.steps().div_ceil(64);
        Some(apriori_monitor(&sol, &st)?)
    } else {
        None
    };
    art.table("trajectories.csv", &io::trajectory_summary_table(&sol))?;
    art.table("flow.csv", &io::flow_snapshot_table(&sol.to_flow(), grid.steps().div_ceil(16)))?;
    if let Some(a) = &apriori {
        art.table("norms.csv", &io::norm_table(&[("state", &a.state), ("diffusion", &a.diffusion)]))?;
    }
    let report = RsdeReport {
        model: cfg.run.model.clone(),
        seed,
        particles: p,
        steps: grid.steps(),
        holder: path.holder_report(cfg.rough.alpha)?,
        chen_defect: path.chen_defect(),
        martingale,
        apriori,
    };
    art.json("diagnostics.json", &report)
}

pub fn fixed_point_settings(cfg: &Config, strict: bool) -> RunResult<FixedPointSettings> {
    let fp = &cfg.fixedpoint;
    let mut st = FixedPointSettings::new(fp.particles, cfg.run.seed);
    st.damping = fp.damping;
    st.max_iters = fp.max_iters;
    st.tol_w2 = fp.tol_w2;
    st.tol_exp = fp.tol_exp;
    st.order = cfg.policy.order;
    st.strict = strict;
    st.escape_limit = cfg.policy.escape_limit;
    st.lattice = LatticeSpec {
        counts: cfg.policy.lattice.clone(),
        bounds: cfg.policy.lower.clone().zip(cfg.policy.upper.clone()),
        widen: cfg.policy.widen,
    };
    st.w2 = W2Settings {
        seed: cfg.run.seed,
        ..W2Settings::default()
    };
    if cfg.domain.enabled {
        let dm = &cfg.domain;
        let mut ds = DomainSettings::new(cfg.index_pair()?, dm.m, dm.m_bound, dm.epsilon);
        ds.inner_samples = dm.inner_samples;
        ds.outer_limit = Some(dm.outer_limit);
        st.domain = Some(ds);
    }
    Ok(st)
}

fn run_mfg(
    cfg: &Config,
    model: Arc<dyn CoefficientSet>,
    path: Arc<RoughPath>,
    opts: &RunOptions,
    art: &mut Artifacts,
) -> RunResult<(bool, usize, f64)> {
    let grid = *path.grid();
    let st = fixed_point_settings(cfg, opts.strict)?;
    let eq = fixed_point(model, path, &cfg.init, &st)?;
    art.json("equilibrium.json", &eq.report)?;
    art.table("iterations.csv", &io::iteration_table(&eq.report))?;
    art.table("policy.csv", &io::policy_table(&eq))?;
    art.table("flow.csv", &io::flow_snapshot_table(&eq.flow, grid.steps().div_ceil(16)))?;
    let last = eq.report.records.last().map(|r| r.w2_update).unwrap_or(f64::NAN);
    Ok((eq.report.converged, eq.report.iterations, last))
}

pub fn randomize_settings(cfg: &Config) -> RandomizeSettings {
    let rz = &cfg.randomize;
    let mut st = RandomizeSettings::new(rz.samples, rz.particles, cfg.run.seed);
    st.mode = match rz.mode {
        FlowModeName::FrozenFlow => FlowMode::FrozenFlow,
        FlowModeName::PerSampleFixedpoint => FlowMode::PerSampleFixedPoint {
            iterations: rz.iterations,
        },
    };
    st.coupling = match rz.coupling {
        CouplingName::Independent => Coupling::Independent,
        CouplingName::Shared => Coupling::Shared,
    };
    st.refine = rz.refine;
    st.permutations = rz.permutations;
    st.level = rz.level;
    st
}

fn run_randomize(cfg: &Config, model: Arc<dyn CoefficientSet>, grid: TimeGrid, art: &mut Artifacts) -> RunResult<()> {
    let policy = simple_policy(cfg, model.as_ref(), grid.steps())?;
    let report = compare_pathwise_vs_randomized(model, policy, &cfg.init, grid, &randomize_settings(cfg))?;
    art.table("samples.csv", &io::randomize_table(&report))?;
    art.json("randomize.json", &report)
}

#[derive(Debug, Clone, Serialize)]
pub struct ModelListing {
    pub name: &'static str,
    pub description: &'static str,
    pub params: Vec<(&'static str, f64)>,
}

pub fn list_models() -> Vec<ModelListing> {
    models::REGISTRY
        .iter()
        .map(|m| ModelListing {
            name: m.name,
            description: m.description,
            params: m.params.to_vec(),
        })
        .collect()
}
