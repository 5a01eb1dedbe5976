//! File formats: the binary rough-path container and CSV tables.
//!
//! Every CSV starts with a `# manifest_hash=<hex>` comment line so a table
//! can be traced back to the configuration that produced it.

use std::fs::File;
use std::io::{BufWriter, Write};
use std::path::Path;

use roughmfg_core::controlled::NormEstimate;
use roughmfg_core::measureflow::MeasureFlow;
use roughmfg_core::mfg::{Equilibrium, EquilibriumReport};
use roughmfg_core::randomize::RandomizedReport;
use roughmfg_core::roughpath::pair_count;
use roughmfg_core::rsde::RsdeSolution;
use roughmfg_core::math::{mean, variance};
use roughmfg_core::{BracketMode, RoughPath, TimeGrid};

use crate::error::{RunError, RunResult};

pub const MAGIC: &[u8; 4] = b"RPTH";
pub const FORMAT_VERSION: u32 = 1;
const HEADER_LEN: usize = 4 + 4 + 8 + 8 + 8 + 1;

/// Little-endian container: magic, version, `k`, `N`, `T`, bracket mode,
/// then the first level (`(N+1) x k`) and the second level (pairs `i < j`
/// row-major, each a `k x k` block).
pub fn encode_rough_path(path: &RoughPath) -> Vec<u8> {
    let first = path.first_level();
    let second = path.second_level();
    let mut out = Vec::with_capacity(HEADER_LEN + 8 * (first.len() + second.len()));
    out.extend_from_slice(MAGIC);
    out.extend_from_slice(&FORMAT_VERSION.to_le_bytes());
    out.extend_from_slice(&(path.dim() as u64).to_le_bytes());
    out.extend_from_slice(&(path.grid().steps() as u64).to_le_bytes());
    out.extend_from_slice(&path.grid().horizon().to_le_bytes());
    out.push(path.bracket_mode().code());
    for v in first.iter().chain(second) {
        out.extend_from_slice(&v.to_le_bytes());
    }
    out
}

pub fn decode_rough_path(bytes: &[u8]) -> Result<RoughPath, String> {
    if bytes.len() < HEADER_LEN {
        return Err(format!("{} bytes is shorter than the header", bytes.len()));
    }
    if &bytes[..4] != MAGIC {
        return Err("bad magic".into());
    }
    let u32_at = |o: usize| u32::from_le_bytes(bytes[o..o + 4].try_into().unwrap());
    let u64_at = |o: usize| u64::from_le_bytes(bytes[o..o + 8].try_into().unwrap());
    let version = u32_at(4);
    if version != FORMAT_VERSION {
        return Err(format!("unsupported version {version}"));
    }
    let k = u64_at(8) as usize;
    let n = u64_at(16) as usize;
    let horizon = f64::from_bits(u64_at(24));
    let mode = BracketMode::from_code(bytes[32]).ok_or_else(|| format!("unknown bracket mode {}", bytes[32]))?;
    let first_len = (n + 1).checked_mul(k).ok_or("size overflow")?;
    let second_len = pair_count(n).checked_mul(k * k).ok_or("size overflow")?;
    let body = &bytes[HEADER_LEN..];
    if body.len() != 8 * (first_len + second_len) {
        return Err(format!(
            "body holds {} bytes, header announces {}",
            body.len(),
            8 * (first_len + second_len)
        ));
    }
    let values: Vec<f64> = body
        .chunks_exact(8)
        .map(|c| f64::from_le_bytes(c.try_into().unwrap()))
        .collect();
    let grid = TimeGrid::new(horizon, n).map_err(|e| e.to_string())?;
    let (first, second) = values.split_at(first_len);
    RoughPath::from_parts(grid, k, first.to_vec(), second.to_vec(), mode).map_err(|e| e.to_string())
}

pub fn write_rough_path(file: &Path, path: &RoughPath) -> RunResult<()> {
    std::fs::write(file, encode_rough_path(path)).map_err(|e| RunError::io(file, e))
}

pub fn read_rough_path(file: &Path) -> RunResult<RoughPath> {
    let bytes = std::fs::read(file).map_err(|e| RunError::io(file, e))?;
    decode_rough_path(&bytes).map_err(|message| RunError::Format {
        path: file.to_path_buf(),
        message,
    })
}

/// Rows of a CSV table, already formatted.
#[derive(Debug, Clone, Default, PartialEq)]
pub struct Table {
    pub header: Vec<String>,
    pub rows: Vec<Vec<String>>,
}

impl Table {
    pub fn new<S: Into<String>>(header: impl IntoIterator<Item = S>) -> Self {
        Table {
            header: header.into_iter().map(Into::into).collect(),
            rows: Vec::new(),
        }
    }

    pub fn push(&mut self, row: Vec<String>) {
        debug_assert_eq!(row.len(), self.header.len());
        self.rows.push(row);
    }

    pub fn write(&self, file: &Path, manifest_hash: &str) -> RunResult<()> {
        let f = File::create(file).map_err(|e| RunError::io(file, e))?;
        let mut out = BufWriter::new(f);
        writeln!(out, "# manifest_hash={manifest_hash}").map_err(|e| RunError::io(file, e))?;
        let mut w = csv::Writer::from_writer(out);
        w.write_record(&self.header)?;
        for r in &self.rows {
            w.write_record(r)?;
        }
        w.flush().map_err(|e| RunError::io(file, e))?;
        Ok(())
    }
}

/// Reads a table written by [`Table::write`], returning the embedded hash.
pub fn read_table(file: &Path) -> RunResult<(String, Table)> {
    let text = std::fs::read_to_string(file).map_err(|e| RunError::io(file, e))?;
    let (first, rest) = text.split_once('\n').unwrap_or((&text, ""));
    let hash = first.strip_prefix("# manifest_hash=").unwrap_or_default().to_string();
    let mut r = csv::Reader::from_reader(rest.as_bytes());
    let header = r.headers()?.iter().map(String::from).collect();
    let rows = r
        .records()
        .map(|rec| rec.map(|x| x.iter().map(String::from).collect()))
        .collect::<Result<_, _>>()?;
    Ok((hash, Table { header, rows }))
}

fn f(v: f64) -> String {
    format!("{v}")
}

fn indexed(prefix: &str, n: usize) -> Vec<String> {
    if n == 1 {
        vec![prefix.to_string()]
    } else {
        (0..n).map(|i| format!("{prefix}{i}")).collect()
    }
}

pub fn first_level_table(path: &RoughPath) -> Table {
    let k = path.dim();
    let mut t = Table::new(["node", "time"].into_iter().map(String::from).chain(indexed("b", k)));
    for i in 0..path.grid().nodes() {
        let mut row = vec![i.to_string(), f(path.grid().time(i))];
        row.extend(path.point(i).iter().map(|v| f(*v)));
        t.push(row);
    }
    t
}

/// Per-node mean, standard deviation, minimum and maximum of each state coordinate.
pub fn trajectory_summary_table(sol: &RsdeSolution) -> Table {
    let x = sol.x();
    let d = x.value_dim();
    let mut t = Table::new(["node", "time", "coord", "mean", "sd", "min", "max"]);
    for n in 0..x.grid().nodes() {
        for c in 0..d {
            let v: Vec<f64> = (0..x.particles()).map(|p| x.z(p, n)[c]).collect();
            let (lo, hi) = v.iter().fold((f64::INFINITY, f64::NEG_INFINITY), |(a, b), &y| (a.min(y), b.max(y)));
            t.push(vec![
                n.to_string(),
                f(x.grid().time(n)),
                c.to_string(),
                f(mean(&v)),
                f(variance(&v).sqrt()),
                f(lo),
                f(hi),
            ]);
        }
    }
    t
}

/// Particles of a flow at every `stride`-th node: `(node, particle, state, derivative)`.
pub fn flow_snapshot_table(flow: &MeasureFlow, stride: usize) -> Table {
    let ens = flow.ensemble();
    let (d, k) = (ens.value_dim(), ens.noise_dim());
    let mut t = Table::new(
        ["node", "particle"]
            .into_iter()
            .map(String::from)
            .chain(indexed("y", d))
            .chain(indexed("dy", d * k)),
    );
    for n in (0..ens.grid().nodes()).step_by(stride.max(1)) {
        for p in 0..ens.particles() {
            let mut row = vec![n.to_string(), p.to_string()];
            row.extend(ens.z(p, n).iter().map(|v| f(*v)));
            row.extend(ens.zp(p, n).iter().map(|v| f(*v)));
            t.push(row);
        }
    }
    t
}

pub fn norm_table(estimates: &[(&str, &NormEstimate)]) -> Table {
    let mut t = Table::new([
        "name",
        "beta",
        "beta_p",
        "m",
        "delta_z",
        "derivative",
        "remainder",
        "combined",
        "inner_samples",
        "lower_bound_mode",
        "stride",
        "pairs",
    ]);
    for (name, e) in estimates {
        t.push(vec![
            name.to_string(),
            f(e.beta),
            f(e.beta_p),
            f(e.m),
            f(e.delta_z_norm),
            f(e.zp_norm),
            f(e.remainder_norm),
            f(e.combined),
            e.inner_samples.to_string(),
            e.lower_bound_mode.to_string(),
            e.stride.to_string(),
            e.pairs.to_string(),
        ]);
    }
    t
}

pub fn iteration_table(report: &EquilibriumReport) -> Table {
    let mut t = Table::new([
        "iteration",
        "w2_update",
        "unchanged",
        "exploitability",
        "error_bar",
        "policy_cost",
        "best_cost",
        "escape_mass",
        "policy_changes",
        "domain_max_norm",
        "domain_member",
    ]);
    for r in &report.records {
        let e = &r.exploitability;
        t.push(vec![
            r.iteration.to_string(),
            f(r.w2_update),
            r.unchanged.to_string(),
            f(e.value),
            f(e.error_bar),
            f(e.policy_cost),
            f(e.best_cost),
            f(r.escape_mass),
            r.policy_changes.to_string(),
            r.domain.map(|d| f(d.max_norm)).unwrap_or_default(),
            r.domain.map(|d| d.member.to_string()).unwrap_or_default(),
        ]);
    }
    t
}

/// Final policy per step and lattice node: probabilities and the value function.
pub fn policy_table(eq: &Equilibrium) -> Table {
    let lat = &eq.lattice;
    let d = lat.dim();
    let kk = eq.policy.actions().len();
    let steps = eq.policy.steps();
    let table = eq.policy.table().unwrap_or(&[]);
    let mut t = Table::new(
        ["step", "node"]
            .into_iter()
            .map(String::from)
            .chain(indexed("x", d))
            .chain((0..kk).map(|a| format!("p{a}")))
            .chain(["value".to_string()]),
    );
    let mut x = vec![0.0; d];
    let size = lat.size();
    for s in 0..steps {
        for i in 0..size {
            lat.point(i, &mut x);
            let mut row = vec![s.to_string(), i.to_string()];
            row.extend(x.iter().map(|v| f(*v)));
            row.extend(table[(s * size + i) * kk..(s * size + i + 1) * kk].iter().map(|v| f(*v)));
            row.push(eq.values.get(s * size + i).map(|v| f(*v)).unwrap_or_default());
            t.push(row);
        }
    }
    t
}

pub fn randomize_table(report: &RandomizedReport) -> Table {
    let nf = report.per_sample.first().map(|v| v.pathwise.features().len()).unwrap_or(0);
    let mut t = Table::new(
        ["sample"]
            .into_iter()
            .map(String::from)
            .chain(indexed("pathwise_f", nf))
            .chain(indexed("joint_f", nf))
            .chain(["mean_z".to_string()]),
    );
    for v in &report.per_sample {
        let mut row = vec![v.sample.to_string()];
        row.extend(v.pathwise.features().iter().map(|x| f(*x)));
        row.extend(v.joint.features().iter().map(|x| f(*x)));
        row.push(v.mean_z.map(f).unwrap_or_default());
        t.push(row);
    }
    t
}

#[cfg(test)]
mod tests {
    use super::*;
    use roughmfg_core::randomize::sample_lift;

    #[test]
    fn rough_path_bytes_round_trip() {
        let grid = TimeGrid::new(0.5, 9).unwrap();
        let p = sample_lift(grid, 2, 3).unwrap();
        let bytes = encode_rough_path(&p);
        assert_eq!(&bytes[..4], b"RPTH");
        assert_eq!(bytes.len(), HEADER_LEN + 8 * (10 * 2 + pair_count(9) * 4));
        let back = decode_rough_path(&bytes).unwrap();
        assert_eq!(back, p);
    }

    #[test]
    fn corrupted_containers_are_rejected() {
        let grid = TimeGrid::new(1.0, 4).unwrap();
        let bytes = encode_rough_path(&sample_lift(grid, 1, 1).unwrap());
        assert!(decode_rough_path(&bytes[..bytes.len() - 8]).is_err());
        let mut bad = bytes.clone();
        bad[0] = b'X';
        assert!(decode_rough_path(&bad).is_err());
        let mut bad = bytes.clone();
        bad[32] = 7;
        assert!(decode_rough_path(&bad).is_err());
        let mut bad = bytes;
        bad[4] = 2;
        assert!(decode_rough_path(&bad).unwrap_err().contains("version"));
    }

    #[test]
    fn tables_carry_the_hash() {
        let dir = tempfile::tempdir().unwrap();
        let grid = TimeGrid::new(1.0, 4).unwrap();
        let t = first_level_table(&sample_lift(grid, 1, 1).unwrap());
        let file = dir.path().join("b.csv");
        t.write(&file, "abc123").unwrap();
        let (hash, back) = read_table(&file).unwrap();
        assert_eq!(hash, "abc123");
        assert_eq!(back, t);
    }
}
