//! Built-in coefficient sets, selectable by name with parameter overrides.

use alloc::string::{String, ToString};
use alloc::sync::Arc;
use alloc::vec::Vec;
use alloc::{format, vec};
#[allow(unused_imports)]
use num_traits::Float;

use crate::error::{input_err, Result};
use crate::vectorfield::{ActionSet, CoefficientSet, Dims};

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Kind {
    NoInteraction,
    Lq,
    TanhInteraction,
    Gaussian,
    LinearRough,
    Stress,
}

/// Registry entry: name, one-line description and default parameters.
#[derive(Debug, Clone, PartialEq)]
pub struct ModelInfo {
    pub name: &'static str,
    pub kind: Kind,
    pub description: &'static str,
    pub params: &'static [(&'static str, f64)],
}

const ACTION_PARAMS: [&str; 2] = ["u_max", "n_actions"];

pub const REGISTRY: &[ModelInfo] = &[
    ModelInfo {
        name: "no-interaction",
        kind: Kind::NoInteraction,
        description: "b = u - kappa tanh(x), sigma0 = c0 + c1 tanh(x); no measure dependence",
        params: &[
            ("kappa", 0.5),
            ("sigma", 0.4),
            ("c0", 0.3),
            ("c1", 0.2),
            ("r", 1.0),
            ("q", 1.0),
            ("q_terminal", 1.0),
            ("u_max", 1.0),
            ("n_actions", 5.0),
        ],
    },
    ModelInfo {
        name: "lq",
        kind: Kind::Lq,
        description: "b = u + a mean(mu) - kappa x, constant sigma and sigma0, quadratic costs",
        params: &[
            ("a", 0.1),
            ("kappa", 0.0),
            ("sigma", 0.3),
            ("c0", 0.2),
            ("r", 1.0),
            ("q", 1.0),
            ("q_terminal", 1.0),
            ("u_max", 1.0),
            ("n_actions", 5.0),
        ],
    },
    ModelInfo {
        name: "tanh-interaction",
        kind: Kind::TanhInteraction,
        description: "b = u - kappa tanh(x - mean), sigma0 = c0 + c1 tanh(x) tanh(mean); reference model",
        params: &[
            ("kappa", 1.0),
            ("sigma", 0.4),
            ("c0", 0.3),
            ("c1", 0.3),
            ("r", 1.0),
            ("q", 1.0),
            ("q_terminal", 1.0),
            ("u_max", 1.0),
            ("n_actions", 5.0),
        ],
    },
    ModelInfo {
        name: "gaussian",
        kind: Kind::Gaussian,
        description: "drift free, constant sigma and sigma0 = c; Gaussian marginals",
        params: &[("sigma", 0.5), ("c", 1.0)],
    },
    ModelInfo {
        name: "linear-rough",
        kind: Kind::LinearRough,
        description: "b = sigma = 0, sigma0 = a x; explicit flow exp(a B)",
        params: &[("a", 0.5)],
    },
    ModelInfo {
        name: "stress",
        kind: Kind::Stress,
        description: "b = u - A tanh(mean(mu)) with large A; the plain fixed-point map oscillates",
        params: &[
            ("coupling", 8.0),
            ("sigma", 0.2),
            ("c0", 0.1),
            ("r", 1.0),
            ("q", 0.1),
            ("q_terminal", 0.1),
            ("u_max", 1.0),
            ("n_actions", 3.0),
        ],
    },
];

/// Scalar-state (d = l = k = 1) model from the registry.
#[derive(Debug, Clone, PartialEq)]
pub struct RegistryModel {
    name: String,
    kind: Kind,
    values: Vec<(&'static str, f64)>,
    actions: ActionSet,
    p: [f64; 8],
}

fn sech2(x: f64) -> f64 {
    let c = x.cosh();
    1.0 / (c * c)
}

impl RegistryModel {
    pub fn parameters(&self) -> &[(&'static str, f64)] {
        &self.values
    }

    pub fn kind(&self) -> Kind {
        self.kind
    }

    fn get(values: &[(&'static str, f64)], key: &str) -> f64 {
        values.iter().find(|(k, _)| *k == key).map(|(_, v)| *v).unwrap_or(0.0)
    }
}

/// Looks up `name` and applies `overrides`. Unknown names produce an error
/// that suggests the closest registered name.
pub fn build(name: &str, overrides: &[(String, f64)]) -> Result<Arc<dyn CoefficientSet>> {
    Ok(Arc::new(build_registry_model(name, overrides)?))
}

pub fn build_registry_model(name: &str, overrides: &[(String, f64)]) -> Result<RegistryModel> {
    let info = lookup(name)?;
    let mut values: Vec<(&'static str, f64)> = info.params.to_vec();
    for (key, v) in overrides {
        match values.iter_mut().find(|(k, _)| k == key) {
            Some(slot) => slot.1 = *v,
            None => {
                let known: Vec<&str> = values.iter().map(|(k, _)| *k).collect();
                let hint = nearest(key, &known).map(|s| format!("; did you mean `{s}`?")).unwrap_or_default();
                return Err(input_err!("model `{name}` has no parameter `{key}`{hint}"));
            }
        }
        if !v.is_finite() {
            return Err(input_err!("parameter `{key}` must be finite"));
        }
    }
    let has_actions = ACTION_PARAMS.iter().all(|k| values.iter().any(|(n, _)| n == k));
    let actions = if has_actions {
        let u_max = RegistryModel::get(&values, "u_max");
        let n = RegistryModel::get(&values, "n_actions");
        if n < 1.0 || n.fract() != 0.0 {
            return Err(input_err!("n_actions must be a positive integer"));
        }
        let n = n as usize;
        if n == 1 {
            ActionSet::scalar(&[0.0])
        } else {
            let pts: Vec<f64> = (0..n).map(|i| -u_max + 2.0 * u_max * i as f64 / (n - 1) as f64).collect();
            ActionSet::scalar(&pts)
        }
    } else {
        ActionSet::scalar(&[0.0])
    };
    let g = |k: &str| RegistryModel::get(&values, k);
    let p = match info.kind {
        Kind::NoInteraction | Kind::TanhInteraction => [
            g("kappa"),
            g("sigma"),
            g("c0"),
            g("c1"),
            g("r"),
            g("q"),
            g("q_terminal"),
            0.0,
        ],
        Kind::Lq => [g("a"), g("kappa"), g("sigma"), g("c0"), g("r"), g("q"), g("q_terminal"), 0.0],
        Kind::Gaussian => [g("sigma"), g("c"), 0.0, 0.0, 0.0, 0.0, 0.0, 0.0],
        Kind::LinearRough => [g("a"), 0.0, 0.0, 0.0, 0.0, 0.0, 0.0, 0.0],
        Kind::Stress => [
            g("coupling"),
            g("sigma"),
            g("c0"),
            g("r"),
            g("q"),
            g("q_terminal"),
            0.0,
            0.0,
        ],
    };
    Ok(RegistryModel {
        name: info.name.to_string(),
        kind: info.kind,
        values,
        actions,
        p,
    })
}

pub fn lookup(name: &str) -> Result<&'static ModelInfo> {
    REGISTRY.iter().find(|m| m.name == name).ok_or_else(|| {
        let names: Vec<&str> = REGISTRY.iter().map(|m| m.name).collect();
        let hint = nearest(name, &names).map(|s| format!("; did you mean `{s}`?")).unwrap_or_default();
        input_err!("unknown model `{name}`{hint}")
    })
}

fn levenshtein(a: &str, b: &str) -> usize {
    let b: Vec<char> = b.chars().collect();
    let mut prev: Vec<usize> = (0..=b.len()).collect();
    for (i, ca) in a.chars().enumerate() {
        let mut cur = vec![i + 1; b.len() + 1];
        for (j, cb) in b.iter().enumerate() {
            let sub = prev[j] + usize::from(ca != *cb);
            cur[j + 1] = sub.min(prev[j + 1] + 1).min(cur[j] + 1);
        }
        prev = cur;
    }
    prev[b.len()]
}

/// Closest candidate by edit distance, if reasonably close.
pub fn nearest<'a>(name: &str, candidates: &[&'a str]) -> Option<&'a str> {
    candidates
        .iter()
        .map(|c| (levenshtein(name, c), *c))
        .min()
        .filter(|(d, c)| *d <= (c.len().max(name.len()) / 2).max(2))
        .map(|(_, c)| c)
}

impl CoefficientSet for RegistryModel {
    fn name(&self) -> &str {
        &self.name
    }

    fn dims(&self) -> Dims {
        Dims {
            state: 1,
            idio: 1,
            common: 1,
        }
    }

    fn actions(&self) -> &ActionSet {
        &self.actions
    }

    fn feature_count(&self) -> usize {
        match self.kind {
            Kind::Lq | Kind::TanhInteraction | Kind::Stress => 1,
            _ => 0,
        }
    }

    fn feature_kernel(&self, y: &[f64], out: &mut [f64]) {
        if let Some(o) = out.first_mut() {
            *o = y[0];
        }
    }

    fn feature_kernel_gradient(&self, _y: &[f64], out: &mut [f64]) {
        if let Some(o) = out.first_mut() {
            *o = 1.0;
        }
    }

    fn drift(&self, _t: f64, x: &[f64], m: &[f64], u: &[f64], out: &mut [f64]) {
        let p = &self.p;
        out[0] = match self.kind {
            Kind::NoInteraction => u[0] - p[0] * x[0].tanh(),
            Kind::Lq => u[0] + p[0] * m[0] - p[1] * x[0],
            Kind::TanhInteraction => u[0] - p[0] * (x[0] - m[0]).tanh(),
            Kind::Gaussian | Kind::LinearRough => 0.0,
            Kind::Stress => u[0] - p[0] * m[0].tanh(),
        };
    }

    fn diffusion(&self, _t: f64, _x: &[f64], _m: &[f64], out: &mut [f64]) {
        let p = &self.p;
        out[0] = match self.kind {
            Kind::NoInteraction | Kind::TanhInteraction | Kind::Stress => p[1],
            Kind::Lq => p[2],
            Kind::Gaussian => p[0],
            Kind::LinearRough => 0.0,
        };
    }

    fn common(&self, _t: f64, x: &[f64], m: &[f64], out: &mut [f64]) {
        let p = &self.p;
        out[0] = match self.kind {
            Kind::NoInteraction => p[2] + p[3] * x[0].tanh(),
            Kind::Lq => p[3],
            Kind::TanhInteraction => p[2] + p[3] * x[0].tanh() * m[0].tanh(),
            Kind::Gaussian => p[1],
            Kind::LinearRough => p[0] * x[0],
            Kind::Stress => p[2],
        };
    }

    fn common_gradient(&self, _t: f64, x: &[f64], m: &[f64], out: &mut [f64]) {
        let p = &self.p;
        out[0] = match self.kind {
            Kind::NoInteraction => p[3] * sech2(x[0]),
            Kind::TanhInteraction => p[3] * sech2(x[0]) * m[0].tanh(),
            Kind::LinearRough => p[0],
            _ => 0.0,
        };
    }

    fn common_feature_jacobian(&self, _t: f64, x: &[f64], m: &[f64], out: &mut [f64]) {
        if let Some(o) = out.first_mut() {
            *o = match self.kind {
                Kind::TanhInteraction => self.p[3] * x[0].tanh() * sech2(m[0]),
                _ => 0.0,
            };
        }
    }

    fn running_cost(&self, _t: f64, x: &[f64], m: &[f64], u: &[f64]) -> f64 {
        let p = &self.p;
        match self.kind {
            Kind::NoInteraction => 0.5 * p[4] * u[0] * u[0] + 0.5 * p[5] * x[0].tanh().powi(2),
            Kind::Lq => 0.5 * p[4] * u[0] * u[0] + 0.5 * p[5] * x[0] * x[0],
            Kind::TanhInteraction => 0.5 * p[4] * u[0] * u[0] + 0.5 * p[5] * (x[0] - m[0]).tanh().powi(2),
            Kind::Gaussian | Kind::LinearRough => 0.0,
            Kind::Stress => 0.5 * p[3] * u[0] * u[0] + 0.5 * p[4] * x[0] * x[0],
        }
    }

    fn terminal_cost(&self, x: &[f64], _m: &[f64]) -> f64 {
        let p = &self.p;
        match self.kind {
            Kind::NoInteraction | Kind::TanhInteraction => 0.5 * p[6] * x[0].tanh().powi(2),
            Kind::Lq => 0.5 * p[6] * x[0] * x[0],
            Kind::Gaussian | Kind::LinearRough => 0.0,
            Kind::Stress => 0.5 * p[5] * x[0] * x[0],
        }
    }

    fn lipschitz(&self) -> f64 {
        let p = &self.p;
        match self.kind {
            Kind::NoInteraction | Kind::TanhInteraction => 1.0 + p[0].abs() + p[3].abs(),
            Kind::Lq => 1.0 + p[0].abs() + p[1].abs(),
            Kind::Gaussian => 0.0,
            Kind::LinearRough => p[0].abs(),
            Kind::Stress => 1.0 + p[0].abs(),
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn unknown_names_get_suggestions() {
        let err = build("tanh-interactoin", &[]).err().unwrap();
        assert!(format!("{err}").contains("tanh-interaction"));
        let err = build("lq", &[("kapa".into(), 1.0)]).err().unwrap();
        assert!(format!("{err}").contains("did you mean `kappa`"));
        assert!(build("zzzzzzzzzzzzzzzz", &[]).is_err());
    }

    #[test]
    fn overrides_apply_and_defaults_echo() {
        let m = build_registry_model("lq", &[("a".into(), 0.3)]).unwrap();
        assert_eq!(RegistryModel::get(m.parameters(), "a"), 0.3);
        let d = build_registry_model("lq", &[]).unwrap();
        assert_eq!(d.parameters(), lookup("lq").unwrap().params);
        assert_eq!(d.actions().len(), 5);
        assert_eq!(d.actions().get(0), &[-1.0]);
    }

    #[test]
    fn analytic_derivatives_match_finite_differences() {
        struct Fd<'a>(&'a RegistryModel);
        impl CoefficientSet for Fd<'_> {
            fn name(&self) -> &str {
                "fd"
            }
            fn dims(&self) -> Dims {
                self.0.dims()
            }
            fn actions(&self) -> &ActionSet {
                self.0.actions()
            }
            fn feature_count(&self) -> usize {
                self.0.feature_count()
            }
            fn drift(&self, t: f64, x: &[f64], m: &[f64], u: &[f64], out: &mut [f64]) {
                self.0.drift(t, x, m, u, out)
            }
            fn diffusion(&self, t: f64, x: &[f64], m: &[f64], out: &mut [f64]) {
                self.0.diffusion(t, x, m, out)
            }
            fn common(&self, t: f64, x: &[f64], m: &[f64], out: &mut [f64]) {
                self.0.common(t, x, m, out)
            }
            fn running_cost(&self, t: f64, x: &[f64], m: &[f64], u: &[f64]) -> f64 {
                self.0.running_cost(t, x, m, u)
            }
            fn terminal_cost(&self, x: &[f64], m: &[f64]) -> f64 {
                self.0.terminal_cost(x, m)
            }
        }
        for info in REGISTRY {
            let m = build_registry_model(info.name, &[]).unwrap();
            let fd = Fd(&m);
            for &(x, mu) in &[(0.3, -0.2), (-1.1, 0.7), (2.0, 0.0)] {
                let (mut a, mut b) = ([0.0], [0.0]);
                m.common_gradient(0.0, &[x], &[mu], &mut a);
                fd.common_gradient(0.0, &[x], &[mu], &mut b);
                assert!((a[0] - b[0]).abs() < 1e-8, "{} gradient", info.name);
                if m.feature_count() > 0 {
                    m.common_feature_jacobian(0.0, &[x], &[mu], &mut a);
                    fd.common_feature_jacobian(0.0, &[x], &[mu], &mut b);
                    assert!((a[0] - b[0]).abs() < 1e-8, "{} jacobian", info.name);
                }
            }
        }
    }
}
