//! Gauss-Hermite rules for expectations under standard normal laws.

use alloc::vec;
use alloc::vec::Vec;
#[allow(unused_imports)]
use num_traits::Float;

use crate::error::{input_err, Result};

/// Nodes and weights with `sum_i w_i f(x_i) ~ E f(xi)`, `xi ~ N(0, 1)`.
#[derive(Debug, Clone, PartialEq)]
pub struct GaussHermite {
    pub nodes: Vec<f64>,
    pub weights: Vec<f64>,
}

impl GaussHermite {
    /// Rule of `order` points, exact for polynomials of degree `2 order - 1`.
    pub fn new(order: usize) -> Result<Self> {
        if order == 0 || order > 64 {
            return Err(input_err!("quadrature order must lie in 1..=64, got {order}"));
        }
        let n = order;
        let mut x = vec![0.0; n];
        let mut w = vec![0.0; n];
        let pim4 = core::f64::consts::PI.powf(-0.25);
        let m = n.div_ceil(2);
        let mut z = 0.0f64;
        for i in 0..m {
            // initial guesses for the roots of the physicists' polynomial
            z = match i {
                0 => (2.0 * n as f64 + 1.0).sqrt() - 1.85575 * (2.0 * n as f64 + 1.0).powf(-0.16667),
                1 => z - 1.14 * (n as f64).powf(0.426) / z,
                2 => 1.86 * z - 0.86 * x[0],
                3 => 1.91 * z - 0.91 * x[1],
                _ => 2.0 * z - x[i - 2],
            };
            let mut pp = 0.0;
            for _ in 0..100 {
                let mut p1 = pim4;
                let mut p2 = 0.0;
                for j in 0..n {
                    let p3 = p2;
                    p2 = p1;
                    p1 = z * (2.0 / (j as f64 + 1.0)).sqrt() * p2 - (j as f64 / (j as f64 + 1.0)).sqrt() * p3;
                }
                pp = (2.0 * n as f64).sqrt() * p2;
                let z1 = z;
                z = z1 - p1 / pp;
                if (z - z1).abs() <= 1e-15 * z.abs().max(1.0) {
                    break;
                }
            }
            x[i] = z;
            x[n - 1 - i] = -z;
            w[i] = 2.0 / (pp * pp);
            w[n - 1 - i] = w[i];
        }
        // physicists' rule -> probabilists': x -> sqrt(2) x, w -> w / sqrt(pi)
        let s = core::f64::consts::PI.sqrt();
        let mut nodes: Vec<f64> = x.iter().map(|v| v * core::f64::consts::SQRT_2).collect();
        let mut weights: Vec<f64> = w.iter().map(|v| v / s).collect();
        if n % 2 == 1 {
            nodes[n / 2] = 0.0;
        }
        // ascending order
        nodes.reverse();
        weights.reverse();
        Ok(GaussHermite { nodes, weights })
    }

    pub fn order(&self) -> usize {
        self.nodes.len()
    }

    /// Tensor rule in `dim` dimensions: `(points dim-major, weights)`.
    pub fn tensor(&self, dim: usize) -> (Vec<f64>, Vec<f64>) {
        let q = self.order();
        let count = q.pow(dim as u32);
        let mut pts = vec![0.0; count * dim];
        let mut wts = vec![1.0; count];
        for i in 0..count {
            let mut rest = i;
            for c in (0..dim).rev() {
                let j = rest % q;
                rest /= q;
                pts[i * dim + c] = self.nodes[j];
                wts[i] *= self.weights[j];
            }
        }
        (pts, wts)
    }
}
