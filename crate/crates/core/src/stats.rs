//! Two-sample tests used to compare simulation pipelines.

use alloc::vec;
use alloc::vec::Vec;
#[allow(unused_imports)]
use num_traits::Float;
use rand::seq::SliceRandom;
use serde::{Deserialize, Serialize};

use crate::error::{input_err, Result};
use crate::rng::{stream, Module};

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct EnergyTest {
    pub statistic: f64,
    pub p_value: f64,
    pub permutations: usize,
}

fn dist(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| (x - y) * (x - y)).sum::<f64>().sqrt()
}

fn statistic_from_matrix(dm: &[f64], total: usize, labels: &[bool]) -> f64 {
    let (mut xy, mut xx, mut yy) = (0.0, 0.0, 0.0);
    for i in 0..total {
        for j in 0..total {
            let v = dm[i * total + j];
            match (labels[i], labels[j]) {
                (true, true) => xx += v,
                (false, false) => yy += v,
                _ => xy += v,
            }
        }
    }
    let n = labels.iter().filter(|&&b| b).count() as f64;
    let m = total as f64 - n;
    // xy counts each cross pair twice
    xy / (n * m) - xx / (n * n) - yy / (m * m)
}

/// V-statistic `2 E|X - Y| - E|X - X'| - E|Y - Y'|` of two point clouds.
pub fn energy_distance(a: &[f64], b: &[f64], dim: usize) -> Result<f64> {
    check(a, b, dim)?;
    let (n, m) = (a.len() / dim, b.len() / dim);
    let pt = |s: &[f64], i: usize| s[i * dim..(i + 1) * dim].to_vec();
    let mut xy = 0.0;
    for i in 0..n {
        for j in 0..m {
            xy += dist(&pt(a, i), &pt(b, j));
        }
    }
    let within = |s: &[f64], k: usize| {
        let mut acc = 0.0;
        for i in 0..k {
            for j in 0..k {
                acc += dist(&s[i * dim..(i + 1) * dim], &s[j * dim..(j + 1) * dim]);
            }
        }
        acc / (k * k) as f64
    };
    Ok(2.0 * xy / (n * m) as f64 - within(a, n) - within(b, m))
}

fn check(a: &[f64], b: &[f64], dim: usize) -> Result<()> {
    if dim == 0 || a.is_empty() || b.is_empty() || a.len() % dim != 0 || b.len() % dim != 0 {
        return Err(input_err!("samples must hold a positive number of {dim}-dimensional points"));
    }
    Ok(())
}

/// Energy-distance test with a permutation p-value `(1 + #{T* >= T}) / (1 + B)`.
pub fn energy_test(a: &[f64], b: &[f64], dim: usize, permutations: usize, seed: u64) -> Result<EnergyTest> {
    check(a, b, dim)?;
    let (n, m) = (a.len() / dim, b.len() / dim);
    let total = n + m;
    let pooled: Vec<&[f64]> = a.chunks(dim).chain(b.chunks(dim)).collect();
    let mut dm = vec![0.0; total * total];
    for i in 0..total {
        for j in i + 1..total {
            let v = dist(pooled[i], pooled[j]);
            dm[i * total + j] = v;
            dm[j * total + i] = v;
        }
    }
    let mut labels: Vec<bool> = (0..total).map(|i| i < n).collect();
    let observed = statistic_from_matrix(&dm, total, &labels);
    let mut rng = stream(seed, Module::Permutation, 0, 0);
    let mut exceed = 0usize;
    for _ in 0..permutations {
        labels.shuffle(&mut rng);
        if statistic_from_matrix(&dm, total, &labels) >= observed - 1e-12 * observed.abs() {
            exceed += 1;
        }
    }
    Ok(EnergyTest {
        statistic: observed,
        p_value: (1 + exceed) as f64 / (1 + permutations) as f64,
        permutations,
    })
}
