//! Coefficient sets, controlled vector fields and their composition with
//! controlled ensembles.
//!
//! Coefficients see the measure argument only through a finite vector of
//! linear statistics `m_q = <phi_q, mu>` (generalised moments). This keeps
//! every evaluation `O(Q)` instead of `O(P)` and gives the Lions derivative in
//! closed form: `d_mu s(mu)(y) = sum_q ds/dm_q * grad phi_q(y)`.

use alloc::sync::Arc;
use alloc::vec;
use alloc::vec::Vec;
#[allow(unused_imports)]
use num_traits::Float;
use serde::{Deserialize, Serialize};

use crate::controlled::{ControlledEnsemble, IndexPair};
use crate::error::{input_err, Error, Result};
use crate::math::norm2;
use crate::measureflow::MeasureFlow;
use crate::roughpath::{RoughPath, TimeGrid};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct Dims {
    /// State dimension `d`.
    pub state: usize,
    /// Idiosyncratic Brownian dimension `l`.
    pub idio: usize,
    /// Rough-path dimension `k`.
    pub common: usize,
}

/// Finite action set `U = {u_1, .., u_K}` in `R^{dim}`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ActionSet {
    pub dim: usize,
    pub points: Vec<f64>,
}

impl ActionSet {
    pub fn new(dim: usize, points: Vec<f64>) -> Result<Self> {
        if dim == 0 || points.is_empty() || points.len() % dim != 0 {
            return Err(input_err!("action set needs a positive number of {dim}-dimensional points"));
        }
        Ok(ActionSet { dim, points })
    }

    pub fn scalar(values: &[f64]) -> Self {
        ActionSet {
            dim: 1,
            points: values.to_vec(),
        }
    }

    pub fn len(&self) -> usize {
        self.points.len() / self.dim
    }

    pub fn is_empty(&self) -> bool {
        self.points.is_empty()
    }

    pub fn get(&self, i: usize) -> &[f64] {
        &self.points[i * self.dim..(i + 1) * self.dim]
    }
}

const FD_STEP: f64 = 1e-6;

/// Model coefficients `(b, sigma, sigma0, f, g)` with measure dependence
/// through `feature_count()` linear statistics.
///
/// Shapes: `drift` d, `diffusion` d x l, `common` d x k (row-major),
/// `common_gradient` d x k x d with `out[(a*k + b)*d + c] = d sigma0_{ab} / dx_c`,
/// `common_feature_jacobian` d x k x Q.
pub trait CoefficientSet: Send + Sync {
    fn name(&self) -> &str;
    fn dims(&self) -> Dims;
    fn actions(&self) -> &ActionSet;

    fn feature_count(&self) -> usize {
        0
    }
    /// `phi_q(y)` for a single particle position.
    fn feature_kernel(&self, _y: &[f64], _out: &mut [f64]) {}
    /// `grad phi_q(y)`, Q x d.
    fn feature_kernel_gradient(&self, _y: &[f64], _out: &mut [f64]) {}

    fn drift(&self, t: f64, x: &[f64], m: &[f64], u: &[f64], out: &mut [f64]);
    fn diffusion(&self, t: f64, x: &[f64], m: &[f64], out: &mut [f64]);
    fn common(&self, t: f64, x: &[f64], m: &[f64], out: &mut [f64]);
    fn running_cost(&self, t: f64, x: &[f64], m: &[f64], u: &[f64]) -> f64;
    fn terminal_cost(&self, x: &[f64], m: &[f64]) -> f64;

    /// Spatial gradient of `sigma0`; central differences unless overridden.
    fn common_gradient(&self, t: f64, x: &[f64], m: &[f64], out: &mut [f64]) {
        let Dims { state: d, common: k, .. } = self.dims();
        let mut xp = x.to_vec();
        let mut hi = vec![0.0; d * k];
        let mut lo = vec![0.0; d * k];
        for c in 0..d {
            xp[c] = x[c] + FD_STEP;
            self.common(t, &xp, m, &mut hi);
            xp[c] = x[c] - FD_STEP;
            self.common(t, &xp, m, &mut lo);
            xp[c] = x[c];
            for ab in 0..d * k {
                out[ab * d + c] = (hi[ab] - lo[ab]) / (2.0 * FD_STEP);
            }
        }
    }

    /// `d sigma0 / d m_q`; central differences in feature space unless overridden.
    fn common_feature_jacobian(&self, t: f64, x: &[f64], m: &[f64], out: &mut [f64]) {
        let Dims { state: d, common: k, .. } = self.dims();
        let q = self.feature_count();
        let mut mp = m.to_vec();
        let mut hi = vec![0.0; d * k];
        let mut lo = vec![0.0; d * k];
        for j in 0..q {
            mp[j] = m[j] + FD_STEP;
            self.common(t, x, &mp, &mut hi);
            mp[j] = m[j] - FD_STEP;
            self.common(t, x, &mp, &mut lo);
            mp[j] = m[j];
            for ab in 0..d * k {
                out[ab * q + j] = (hi[ab] - lo[ab]) / (2.0 * FD_STEP);
            }
        }
    }

    /// Lions derivative `d_mu sigma0(t, x, mu)(y)`, d x k x d.
    fn lions_derivative(&self, t: f64, x: &[f64], m: &[f64], y: &[f64], out: &mut [f64]) {
        let Dims { state: d, common: k, .. } = self.dims();
        let q = self.feature_count();
        out.iter_mut().for_each(|v| *v = 0.0);
        if q == 0 {
            return;
        }
        let mut jac = vec![0.0; d * k * q];
        self.common_feature_jacobian(t, x, m, &mut jac);
        let mut grad = vec![0.0; q * d];
        self.feature_kernel_gradient(y, &mut grad);
        for ab in 0..d * k {
            for c in 0..d {
                out[ab * d + c] = (0..q).map(|j| jac[ab * q + j] * grad[j * d + c]).sum();
            }
        }
    }

    /// Feature vector of an empirical measure given as a particle-major cloud.
    fn features_of(&self, cloud: &[f64]) -> Vec<f64> {
        let d = self.dims().state;
        let q = self.feature_count();
        let mut out = vec![0.0; q];
        if q == 0 || cloud.is_empty() {
            return out;
        }
        let mut buf = vec![0.0; q];
        let n = cloud.len() / d;
        for p in 0..n {
            self.feature_kernel(&cloud[p * d..(p + 1) * d], &mut buf);
            for j in 0..q {
                out[j] += buf[j];
            }
        }
        out.iter_mut().for_each(|v| *v /= n as f64);
        out
    }

    /// Spatial regularity of `sigma0`.
    fn gamma(&self) -> f64 {
        2.0
    }

    /// Lipschitz constant reported for spot checks.
    fn lipschitz(&self) -> f64 {
        1.0
    }
}

/// A time-indexed field `(f, f')` controlled by the rough path, evaluated at
/// grid nodes. Output is a `rows x k` matrix.
pub trait ControlledVectorField: Send + Sync {
    fn grid(&self) -> &TimeGrid;
    fn state_dim(&self) -> usize;
    fn noise_dim(&self) -> usize;
    fn rows(&self) -> usize;
    fn gamma(&self) -> f64 {
        2.0
    }
    /// Whether `gradient` is backed by an exact or finite-difference evaluator.
    fn has_gradient(&self) -> bool {
        true
    }
    /// `f_t(x)`, rows x k.
    fn value(&self, node: usize, x: &[f64], out: &mut [f64]);
    /// `f'_t(x)`, rows x k x k.
    fn derivative(&self, node: usize, x: &[f64], out: &mut [f64]);
    /// `grad f_t(x)`, rows x k x d.
    fn gradient(&self, node: usize, x: &[f64], out: &mut [f64]);
}

/// `sigma_hat'(x) = grad f(x) f(x) + f'(x)` for a square field (`rows = d`).
pub fn hat_derivative(field: &dyn ControlledVectorField, node: usize, x: &[f64], out: &mut [f64]) {
    let (d, k) = (field.state_dim(), field.noise_dim());
    let (nf, ng) = (d * k, d * k * d);
    let mut stack = [0.0f64; 64];
    let mut heap;
    let buf: &mut [f64] = if nf + ng <= stack.len() {
        &mut stack[..nf + ng]
    } else {
        heap = vec![0.0; nf + ng];
        &mut heap
    };
    let (f, grad) = buf.split_at_mut(nf);
    field.value(node, x, f);
    field.gradient(node, x, grad);
    field.derivative(node, x, out);
    for a in 0..d {
        for j in 0..k {
            for l in 0..k {
                let mut acc = 0.0;
                for c in 0..d {
                    acc += grad[(a * k + j) * d + c] * f[c * k + l];
                }
                out[(a * k + j) * k + l] += acc;
            }
        }
    }
}

type Eval = dyn Fn(f64, &[f64], &mut [f64]) + Send + Sync;

/// Field given by closures of `(t, x)`. A missing gradient falls back to
/// central differences when `fd_step` is set.
pub struct AnalyticField {
    grid: TimeGrid,
    state_dim: usize,
    noise_dim: usize,
    rows: usize,
    value: Arc<Eval>,
    derivative: Option<Arc<Eval>>,
    gradient: Option<Arc<Eval>>,
    fd_step: Option<f64>,
}

impl AnalyticField {
    pub fn new(
        grid: TimeGrid,
        state_dim: usize,
        noise_dim: usize,
        rows: usize,
        value: impl Fn(f64, &[f64], &mut [f64]) + Send + Sync + 'static,
    ) -> Self {
        AnalyticField {
            grid,
            state_dim,
            noise_dim,
            rows,
            value: Arc::new(value),
            derivative: None,
            gradient: None,
            fd_step: None,
        }
    }

    pub fn with_derivative(mut self, f: impl Fn(f64, &[f64], &mut [f64]) + Send + Sync + 'static) -> Self {
        self.derivative = Some(Arc::new(f));
        self
    }

    pub fn with_gradient(mut self, f: impl Fn(f64, &[f64], &mut [f64]) + Send + Sync + 'static) -> Self {
        self.gradient = Some(Arc::new(f));
        self
    }

    pub fn with_fd_step(mut self, h: f64) -> Self {
        self.fd_step = Some(h);
        self
    }

}

impl ControlledVectorField for AnalyticField {
    fn grid(&self) -> &TimeGrid {
        &self.grid
    }
    fn state_dim(&self) -> usize {
        self.state_dim
    }
    fn noise_dim(&self) -> usize {
        self.noise_dim
    }
    fn rows(&self) -> usize {
        self.rows
    }
    fn has_gradient(&self) -> bool {
        self.gradient.is_some() || self.fd_step.is_some()
    }
    fn value(&self, node: usize, x: &[f64], out: &mut [f64]) {
        (self.value)(self.grid.time(node), x, out)
    }
    fn derivative(&self, node: usize, x: &[f64], out: &mut [f64]) {
        match &self.derivative {
            Some(f) => f(self.grid.time(node), x, out),
            None => out.iter_mut().for_each(|v| *v = 0.0),
        }
    }
    fn gradient(&self, node: usize, x: &[f64], out: &mut [f64]) {
        let t = self.grid.time(node);
        if let Some(g) = &self.gradient {
            return g(t, x, out);
        }
        let Some(h) = self.fd_step else {
            return out.iter_mut().for_each(|v| *v = f64::NAN);
        };
        let (d, w) = (self.state_dim, self.rows * self.noise_dim);
        let mut xp = x.to_vec();
        let (mut hi, mut lo) = (vec![0.0; w], vec![0.0; w]);
        for c in 0..d {
            xp[c] = x[c] + h;
            (self.value)(t, &xp, &mut hi);
            xp[c] = x[c] - h;
            (self.value)(t, &xp, &mut lo);
            xp[c] = x[c];
            for r in 0..w {
                out[r * d + c] = (hi[r] - lo[r]) / (2.0 * h);
            }
        }
    }
}

/// `(sigma0~, sigma0~')` built from a measure flow: `sigma0~_t(x) = sigma0(t, x, mu_t)`
/// and `sigma0~'_t(x) = E[d_mu sigma0(t, x, mu_t)(Y_t) Y'_t]`.
///
/// Per node the feature vector `m_t` and the averages `c_q = E[grad phi_q(Y_t) Y'_t]`
/// are cached, so `sigma0~'` costs `O(Q)` per evaluation.
pub struct FlowField {
    model: Arc<dyn CoefficientSet>,
    grid: TimeGrid,
    features: Vec<f64>,
    lions_moments: Vec<f64>,
}

impl FlowField {
    pub fn model(&self) -> &Arc<dyn CoefficientSet> {
        &self.model
    }

    /// Cached features `m_t` at a node.
    pub fn features(&self, node: usize) -> &[f64] {
        let q = self.model.feature_count();
        &self.features[node * q..(node + 1) * q]
    }

    /// Particle average of `d_mu sigma0(t, x, mu_t)(Y^i) Y'^i`, evaluated
    /// directly from the flow. Used to cross-check the cached form.
    pub fn lions_average(&self, flow: &MeasureFlow, node: usize, x: &[f64], out: &mut [f64]) {
        let Dims { state: d, common: k, .. } = self.model.dims();
        let ens = flow.ensemble();
        let mut dmu = vec![0.0; d * k * d];
        out.iter_mut().for_each(|v| *v = 0.0);
        let t = self.grid.time(node);
        let m = self.features(node);
        for p in 0..ens.particles() {
            self.model.lions_derivative(t, x, m, ens.z(p, node), &mut dmu);
            let yp = ens.zp(p, node);
            for a in 0..d {
                for j in 0..k {
                    for l in 0..k {
                        let mut acc = 0.0;
                        for c in 0..d {
                            acc += dmu[(a * k + j) * d + c] * yp[c * k + l];
                        }
                        out[(a * k + j) * k + l] += acc;
                    }
                }
            }
        }
        out.iter_mut().for_each(|v| *v /= ens.particles() as f64);
    }
}

impl ControlledVectorField for FlowField {
    fn grid(&self) -> &TimeGrid {
        &self.grid
    }
    fn state_dim(&self) -> usize {
        self.model.dims().state
    }
    fn noise_dim(&self) -> usize {
        self.model.dims().common
    }
    fn rows(&self) -> usize {
        self.model.dims().state
    }
    fn gamma(&self) -> f64 {
        self.model.gamma()
    }
    fn value(&self, node: usize, x: &[f64], out: &mut [f64]) {
        self.model.common(self.grid.time(node), x, self.features(node), out)
    }
    fn derivative(&self, node: usize, x: &[f64], out: &mut [f64]) {
        let Dims { state: d, common: k, .. } = self.model.dims();
        let q = self.model.feature_count();
        out.iter_mut().for_each(|v| *v = 0.0);
        if q == 0 {
            return;
        }
        let mut stack = [0.0f64; 64];
        let mut heap;
        let jac: &mut [f64] = if d * k * q <= stack.len() {
            &mut stack[..d * k * q]
        } else {
            heap = vec![0.0; d * k * q];
            &mut heap
        };
        self.model
            .common_feature_jacobian(self.grid.time(node), x, self.features(node), jac);
        let c = &self.lions_moments[node * q * k..(node + 1) * q * k];
        for ab in 0..d * k {
            for l in 0..k {
                out[ab * k + l] = (0..q).map(|j| jac[ab * q + j] * c[j * k + l]).sum();
            }
        }
    }
    fn gradient(&self, node: usize, x: &[f64], out: &mut [f64]) {
        self.model
            .common_gradient(self.grid.time(node), x, self.features(node), out)
    }
}

/// Builds `(sigma0~, sigma0~')` from the flow's representation `(Y, Y')`.
pub fn build_cvf_from_flow(model: Arc<dyn CoefficientSet>, flow: &MeasureFlow) -> Result<FlowField> {
    let dims = model.dims();
    let ens = flow.ensemble();
    if ens.value_dim() != dims.state || ens.noise_dim() != dims.common {
        return Err(input_err!(
            "flow has shape (d={}, k={}), model expects (d={}, k={})",
            ens.value_dim(),
            ens.noise_dim(),
            dims.state,
            dims.common
        ));
    }
    let q = model.feature_count();
    if q > 0 && !flow.has_derivative() {
        return Err(Error::Config(
            "measure flow carries no derivative particles Y'; cannot build sigma0~'".into(),
        ));
    }
    let grid = *ens.grid();
    let (d, k) = (dims.state, dims.common);
    let mut features = Vec::with_capacity(grid.nodes() * q);
    let mut lions = vec![0.0; grid.nodes() * q * k];
    let mut grad = vec![0.0; q * d];
    for n in 0..grid.nodes() {
        features.extend(model.features_of(&ens.cloud(n)));
        if q == 0 {
            continue;
        }
        let slot = &mut lions[n * q * k..(n + 1) * q * k];
        for p in 0..ens.particles() {
            model.feature_kernel_gradient(ens.z(p, n), &mut grad);
            let yp = ens.zp(p, n);
            for j in 0..q {
                for l in 0..k {
                    slot[j * k + l] += (0..d).map(|c| grad[j * d + c] * yp[c * k + l]).sum::<f64>();
                }
            }
        }
        slot.iter_mut().for_each(|v| *v /= ens.particles() as f64);
    }
    if !features.iter().chain(lions.iter()).all(|v| v.is_finite()) {
        return Err(Error::Numeric("flow averages are not finite".into()));
    }
    Ok(FlowField {
        model,
        grid,
        features,
        lions_moments: lions,
    })
}

/// `(f, f') o (X, X') = (f(X), grad f(X) X' + f'(X))`, node by node.
pub fn compose(field: &dyn ControlledVectorField, ce: &ControlledEnsemble) -> Result<ControlledEnsemble> {
    let (d, k, rows) = (field.state_dim(), field.noise_dim(), field.rows());
    if ce.value_dim() != d || ce.noise_dim() != k {
        return Err(input_err!(
            "ensemble shape (v={}, k={}) does not match field (d={d}, k={k})",
            ce.value_dim(),
            ce.noise_dim()
        ));
    }
    ce.grid().ensure_same(field.grid())?;
    if !field.has_gradient() {
        return Err(Error::Config(
            "field has no gradient evaluator and no finite-difference step".into(),
        ));
    }
    let mut grad = vec![0.0; rows * k * d];
    ControlledEnsemble::from_fn(*ce.grid(), ce.particles(), rows * k, k, |p, n, z, zp| {
        let x = ce.z(p, n);
        let xp = ce.zp(p, n);
        field.value(n, x, z);
        field.derivative(n, x, zp);
        field.gradient(n, x, &mut grad);
        for r in 0..rows * k {
            for l in 0..k {
                let mut acc = 0.0;
                for c in 0..d {
                    acc += grad[r * d + c] * xp[c * k + l];
                }
                zp[r * k + l] += acc;
            }
        }
    })
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct CvfNorm {
    pub delta_f: f64,
    pub delta_fp: f64,
    pub delta_grad: f64,
    pub remainder: f64,
    pub sup_part: f64,
    pub total: f64,
    pub probes: usize,
}

fn holder_seminorm_over_probes(vals: &[Vec<f64>], probes: &[f64], d: usize, exponent: f64) -> f64 {
    let n = vals.len();
    let mut best: f64 = 0.0;
    for a in 0..n {
        for b in a + 1..n {
            let dx: f64 = norm2(
                &probes[a * d..(a + 1) * d]
                    .iter()
                    .zip(&probes[b * d..(b + 1) * d])
                    .map(|(x, y)| x - y)
                    .collect::<Vec<_>>(),
            );
            if dx <= 0.0 {
                continue;
            }
            let dv: Vec<f64> = vals[a].iter().zip(&vals[b]).map(|(x, y)| x - y).collect();
            best = best.max(norm2(&dv) / dx.powf(exponent));
        }
    }
    best
}

/// Probe-sup estimate of the controlled-vector-field norm on grid pairs.
///
/// `probes` holds particle-major state points. The spatial sups are taken
/// over the probe set only.
pub fn cvf_norm(
    field: &dyn ControlledVectorField,
    path: &RoughPath,
    index: IndexPair,
    probes: &[f64],
) -> Result<CvfNorm> {
    let (d, k, rows) = (field.state_dim(), field.noise_dim(), field.rows());
    if probes.is_empty() || probes.len() % d != 0 {
        return Err(input_err!("probe grid must hold a positive number of {d}-dimensional points"));
    }
    field.grid().ensure_same(path.grid())?;
    let grid = *field.grid();
    let np = probes.len() / d;
    let nodes = grid.nodes();
    let (w, wp, wg) = (rows * k, rows * k * k, rows * k * d);
    // cache evaluations: [node][probe]
    let mut f = vec![0.0; nodes * np * w];
    let mut fp = vec![0.0; nodes * np * wp];
    let mut g = vec![0.0; nodes * np * wg];
    for n in 0..nodes {
        for i in 0..np {
            let x = &probes[i * d..(i + 1) * d];
            let c = n * np + i;
            field.value(n, x, &mut f[c * w..(c + 1) * w]);
            field.derivative(n, x, &mut fp[c * wp..(c + 1) * wp]);
            field.gradient(n, x, &mut g[c * wg..(c + 1) * wg]);
        }
    }
    let diff_norm = |buf: &[f64], width: usize, c1: usize, c2: usize| -> f64 {
        let a = &buf[c1 * width..(c1 + 1) * width];
        let b = &buf[c2 * width..(c2 + 1) * width];
        a.iter().zip(b).map(|(x, y)| (x - y) * (x - y)).sum::<f64>().sqrt()
    };
    let (mut df, mut dfp, mut dg, mut rem): (f64, f64, f64, f64) = (0.0, 0.0, 0.0, 0.0);
    let mut db = vec![0.0; k];
    let mut r = vec![0.0; w];
    for s in 0..nodes {
        for t in s + 1..nodes {
            let h = grid.time(t) - grid.time(s);
            let (hb, hbp, hr) = (
                h.powf(index.beta),
                h.powf(index.beta_p),
                h.powf(index.beta + index.beta_p),
            );
            path.increment_into(s, t, &mut db);
            for i in 0..np {
                let (cs, ct) = (s * np + i, t * np + i);
                df = df.max(diff_norm(&f, w, ct, cs) / hb);
                dfp = dfp.max(diff_norm(&fp, wp, ct, cs) / hbp);
                dg = dg.max(diff_norm(&g, wg, ct, cs) / hbp);
                for row in 0..w {
                    let mut acc = f[ct * w + row] - f[cs * w + row];
                    for l in 0..k {
                        acc -= fp[cs * wp + row * k + l] * db[l];
                    }
                    r[row] = acc;
                }
                rem = rem.max(norm2(&r) / hr);
            }
        }
    }
    let gamma = field.gamma();
    let mut sup_part: f64 = 0.0;
    for n in 0..nodes {
        let fv: Vec<Vec<f64>> = (0..np).map(|i| f[(n * np + i) * w..(n * np + i + 1) * w].to_vec()).collect();
        let fpv: Vec<Vec<f64>> = (0..np).map(|i| fp[(n * np + i) * wp..(n * np + i + 1) * wp].to_vec()).collect();
        let gv: Vec<Vec<f64>> = (0..np).map(|i| g[(n * np + i) * wg..(n * np + i + 1) * wg].to_vec()).collect();
        let sup = |vals: &[Vec<f64>]| vals.iter().map(|v| norm2(v)).fold(0.0, f64::max);
        // |f|_gamma = |f|_inf + |grad f|_inf + [grad f]_{gamma-1};  |f'|_{gamma-1} = |f'|_inf + [f']_{gamma-1}
        let c_gamma = sup(&fv) + sup(&gv) + holder_seminorm_over_probes(&gv, probes, d, gamma - 1.0);
        let c_gamma1 = sup(&fpv) + holder_seminorm_over_probes(&fpv, probes, d, gamma - 1.0);
        sup_part = sup_part.max(c_gamma + c_gamma1);
    }
    let total = df + dfp + dg + rem + sup_part;
    if !total.is_finite() {
        return Err(Error::Numeric("vector-field norm is not finite".into()));
    }
    Ok(CvfNorm {
        delta_f: df,
        delta_fp: dfp,
        delta_grad: dg,
        remainder: rem,
        sup_part,
        total,
        probes: np,
    })
}
