//! Dataset ingestion, standardization, windowing, chronological splitting,
//! and the synthetic ring-graph generator with its exact predictive oracle.

use std::ops::Range;
use std::path::Path;

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use crate::diffusion::STGWindow;
use crate::error::{Error, Result};
use crate::graph::{load_adjacency_csv, ring_adjacency, Graph};
use crate::scalar::Scalar;
use crate::tensor::Tensor;

/// Per-node (and per-feature) mean/std, computed from training rows only.
#[derive(Debug, Clone)]
pub struct NormStats {
    /// Indexed `v * F + f`.
    pub mean: Vec<f64>,
    pub std: Vec<f64>,
    pub features: usize,
}

impl NormStats {
    pub fn standardize(&self, raw: f64, v: usize, f: usize) -> f64 {
        let i = v * self.features + f;
        (raw - self.mean[i]) / self.std[i]
    }

    pub fn destandardize(&self, z: f64, v: usize, f: usize) -> f64 {
        let i = v * self.features + f;
        z * self.std[i] + self.mean[i]
    }
}

/// Time-major signals on a fixed graph.
#[derive(Debug, Clone)]
pub struct STGDataset<S> {
    /// `[T_total, V, F]`.
    pub signals: Tensor<S>,
    pub graph: Graph<S>,
    /// Time-step duration, informational only.
    pub interval: Option<String>,
}

impl<S: Scalar> STGDataset<S> {
    pub fn new(signals: Tensor<S>, graph: Graph<S>) -> Result<Self> {
        let sh = signals.shape();
        if sh.len() != 3 {
            return Err(Error::shape("dataset", format!("signals must be [T,V,F], got {:?}", sh)));
        }
        if sh[1] != graph.node_count() {
            return Err(Error::Data(format!(
                "signals have {} nodes but adjacency has {}",
                sh[1],
                graph.node_count()
            )));
        }
        if !signals.all_finite() {
            return Err(Error::NonFinite("dataset signals".to_string()));
        }
        Ok(Self { signals, graph, interval: None })
    }

    pub fn rows(&self) -> usize {
        self.signals.shape()[0]
    }

    pub fn nodes(&self) -> usize {
        self.signals.shape()[1]
    }

    pub fn features(&self) -> usize {
        self.signals.shape()[2]
    }

    fn at(&self, t: usize, v: usize, f: usize) -> f64 {
        let (nv, nf) = (self.nodes(), self.features());
        self.signals.data()[(t * nv + v) * nf + f].as_f64()
    }

    /// Mean/std per node and feature over the given rows.
    pub fn norm_stats(&self, rows: Range<usize>) -> Result<NormStats> {
        if rows.is_empty() || rows.end > self.rows() {
            return Err(Error::Invalid(format!("stats rows {:?} out of 0..{}", rows, self.rows())));
        }
        let (v_n, f_n) = (self.nodes(), self.features());
        let count = rows.len() as f64;
        let mut mean = vec![0.0; v_n * f_n];
        let mut std = vec![0.0; v_n * f_n];
        for t in rows.clone() {
            for v in 0..v_n {
                for f in 0..f_n {
                    mean[v * f_n + f] += self.at(t, v, f);
                }
            }
        }
        for m in &mut mean {
            *m /= count;
        }
        for t in rows {
            for v in 0..v_n {
                for f in 0..f_n {
                    let d = self.at(t, v, f) - mean[v * f_n + f];
                    std[v * f_n + f] += d * d;
                }
            }
        }
        for s in &mut std {
            *s = (*s / count).sqrt().max(1e-12);
        }
        Ok(NormStats { mean, std, features: f_n })
    }
}

/// Contiguous, ordered, non-overlapping row ranges covering the dataset.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Splits {
    pub train: Range<usize>,
    pub val: Range<usize>,
    pub test: Range<usize>,
}

/// Chronological 6:2:2 split; errors when any split cannot hold a single
/// window of `window_len` rows.
pub fn chronological_split(t_total: usize, window_len: usize) -> Result<Splits> {
    let train_end = t_total * 6 / 10;
    let val_end = t_total * 8 / 10;
    let splits = Splits { train: 0..train_end, val: train_end..val_end, test: val_end..t_total };
    for (name, r) in [("train", &splits.train), ("val", &splits.val), ("test", &splits.test)] {
        if r.len() < window_len {
            return Err(Error::Invalid(format!(
                "{} split has {} rows, too small for one {}-step window",
                name,
                r.len(),
                window_len
            )));
        }
    }
    Ok(splits)
}

/// Standardized forecasting windows over one split, stride over start rows.
/// Windows never cross the split boundary.
pub fn make_windows<S: Scalar>(
    dataset: &STGDataset<S>,
    split: Range<usize>,
    stats: &NormStats,
    t_h: usize,
    t_p: usize,
    stride: usize,
) -> Result<Vec<STGWindow<S>>> {
    if stride == 0 {
        return Err(Error::Invalid("stride must be positive".to_string()));
    }
    let t = t_h + t_p;
    if split.len() < t || split.end > dataset.rows() {
        return Err(Error::Invalid(format!(
            "split {:?} cannot hold a {}-step window",
            split, t
        )));
    }
    let (v_n, f_n) = (dataset.nodes(), dataset.features());
    let mut windows = Vec::new();
    let mut start = split.start;
    while start + t <= split.end {
        let x_all = Tensor::from_fn(vec![f_n, v_n, t], |idx| {
            let f = idx / (v_n * t);
            let v = (idx / t) % v_n;
            let tt = idx % t;
            S::of_f64(stats.standardize(dataset.at(start + tt, v, f), v, f))
        });
        windows.push(STGWindow::forecasting(x_all, t_h, t_p, start)?);
        start += stride;
    }
    Ok(windows)
}

/// Map a standardized `[F, V, T_p]` tensor back to raw scale.
pub fn destandardize_block<S: Scalar>(block: &Tensor<S>, stats: &NormStats) -> Result<Tensor<S>> {
    let sh = block.shape();
    if sh.len() != 3 {
        return Err(Error::shape("destandardize", format!("expected [F,V,T], got {:?}", sh)));
    }
    let (v_n, t) = (sh[1], sh[2]);
    let data = block.data();
    Ok(Tensor::from_fn(sh.to_vec(), |idx| {
        let f = idx / (v_n * t);
        let v = (idx / t) % v_n;
        S::of_f64(stats.destandardize(data[idx].as_f64(), v, f))
    }))
}

/// Load signals (rows = time steps, columns = nodes, header of node ids)
/// plus an adjacency CSV.
pub fn load_csv<S: Scalar>(signals_path: &Path, adjacency_path: &Path) -> Result<STGDataset<S>> {
    let adjacency = load_adjacency_csv::<S>(adjacency_path)?;
    let text = std::fs::read_to_string(signals_path)
        .map_err(|e| Error::Data(format!("{}: {}", signals_path.display(), e)))?;
    let signals = parse_signals_csv::<S>(&text)
        .map_err(|e| match e {
            Error::Data(msg) => Error::Data(format!("{}: {}", signals_path.display(), msg)),
            other => other,
        })?;
    let graph = Graph::new(adjacency)?;
    if signals.shape()[1] != graph.node_count() {
        return Err(Error::Data(format!(
            "{}: {} signal columns vs {} adjacency nodes",
            signals_path.display(),
            signals.shape()[1],
            graph.node_count()
        )));
    }
    STGDataset::new(signals, graph)
}

/// Parse the signals CSV into `[T, V, 1]`.
pub fn parse_signals_csv<S: Scalar>(text: &str) -> Result<Tensor<S>> {
    let mut lines = text.lines().enumerate();
    let (_, header) = lines.next().ok_or_else(|| Error::Data("empty signals file".to_string()))?;
    let v_n = header.split(',').count();
    if header.trim().is_empty() {
        return Err(Error::Data("signals header is empty".to_string()));
    }
    let mut data: Vec<S> = Vec::new();
    let mut rows = 0usize;
    for (lineno, line) in lines {
        if line.trim().is_empty() {
            continue;
        }
        let cells: Vec<&str> = line.split(',').collect();
        if cells.len() != v_n {
            return Err(Error::Data(format!(
                "row {}: {} columns, header has {}",
                lineno + 1,
                cells.len(),
                v_n
            )));
        }
        for (col, cell) in cells.iter().enumerate() {
            let trimmed = cell.trim();
            if trimmed.is_empty() {
                return Err(Error::Data(format!("row {}, column {}: blank cell", lineno + 1, col + 1)));
            }
            let x: f64 = trimmed
                .parse()
                .map_err(|_| Error::Data(format!("row {}, column {}: bad value '{}'", lineno + 1, col + 1, trimmed)))?;
            if !x.is_finite() {
                return Err(Error::Data(format!(
                    "row {}, column {}: non-finite value '{}'",
                    lineno + 1,
                    col + 1,
                    trimmed
                )));
            }
            data.push(S::of_f64(x));
        }
        rows += 1;
    }
    if rows == 0 {
        return Err(Error::Data("signals file has no data rows".to_string()));
    }
    Tensor::from_vec(vec![rows, v_n, 1], data)
}

/// Write signals in the same CSV format `load_csv` reads.
pub fn write_signals_csv<S: Scalar>(path: &Path, signals: &Tensor<S>) -> Result<()> {
    let sh = signals.shape();
    let (t_n, v_n) = (sh[0], sh[1]);
    let mut out = String::new();
    let header: Vec<String> = (0..v_n).map(|v| v.to_string()).collect();
    out.push_str(&header.join(","));
    out.push('\n');
    for t in 0..t_n {
        let row: Vec<String> = (0..v_n)
            .map(|v| format!("{}", signals.data()[(t * v_n + v) * sh[2]].as_f64()))
            .collect();
        out.push_str(&row.join(","));
        out.push('\n');
    }
    std::fs::write(path, out)?;
    Ok(())
}

pub fn write_adjacency_csv<S: Scalar>(path: &Path, adjacency: &Tensor<S>) -> Result<()> {
    let v_n = adjacency.shape()[0];
    let mut out = String::from("dense\n");
    for i in 0..v_n {
        let row: Vec<String> =
            (0..v_n).map(|j| format!("{}", adjacency.data()[i * v_n + j].as_f64())).collect();
        out.push_str(&row.join(","));
        out.push('\n');
    }
    std::fs::write(path, out)?;
    Ok(())
}

/// Parameters of the synthetic ring process
/// x_t = rho ((1-lambda) I + lambda A_rownorm) x_{t-1} + sigma eps_t.
#[derive(Debug, Clone)]
pub struct SyntheticSpec {
    pub v: usize,
    pub rho: f64,
    pub lambda: f64,
    pub sigma: f64,
    pub length: usize,
}

impl SyntheticSpec {
    fn validate(&self) -> Result<()> {
        if self.v < 2 {
            return Err(Error::Invalid(format!("ring size {} too small", self.v)));
        }
        if !(0.0 < self.rho && self.rho < 1.0) || !(0.0..1.0).contains(&self.lambda) {
            return Err(Error::Invalid(format!(
                "non-stationary spec: need rho in (0,1) and lambda in [0,1), got ({}, {})",
                self.rho, self.lambda
            )));
        }
        if self.sigma <= 0.0 {
            return Err(Error::Invalid(format!("noise std must be positive, got {}", self.sigma)));
        }
        if self.length == 0 {
            return Err(Error::Invalid("length must be positive".to_string()));
        }
        Ok(())
    }

    /// rho * ((1 - lambda) I + lambda * row-normalized ring adjacency).
    pub fn transition(&self) -> Result<Vec<f64>> {
        let v = self.v;
        let ring = ring_adjacency::<f64>(v)?;
        let mut m = vec![0.0; v * v];
        for i in 0..v {
            let row_sum: f64 = (0..v).map(|j| ring.data()[i * v + j]).sum();
            for j in 0..v {
                let mix = if i == j { 1.0 - self.lambda } else { 0.0 }
                    + self.lambda * ring.data()[i * v + j] / row_sum;
                m[i * v + j] = self.rho * mix;
            }
        }
        Ok(m)
    }
}

/// Exact conditional distribution of the next `t_p` steps given the last
/// observed state: mean B^h x_t with per-node std from the accumulated
/// process covariance (the chain is linear-Gaussian).
#[derive(Debug, Clone)]
pub struct SyntheticOracle {
    pub v: usize,
    pub t_p: usize,
    /// B^h for h = 1..=t_p, each row-major [V, V].
    pub powers: Vec<Vec<f64>>,
    /// Per-horizon per-node predictive std, `stds[h-1][v]`.
    pub stds: Vec<Vec<f64>>,
}

impl SyntheticOracle {
    pub fn build(spec: &SyntheticSpec, t_p: usize) -> Result<Self> {
        spec.validate()?;
        let v = spec.v;
        let b = spec.transition()?;
        let mut powers = Vec::with_capacity(t_p);
        let mut cur = b.clone();
        for _ in 0..t_p {
            powers.push(cur.clone());
            cur = mat_mul(&cur, &b, v);
        }
        // Sigma_h = sigma^2 * sum_{j=0}^{h-1} B^j (B^j)^T, computed by the
        // recurrence Sigma_h = B Sigma_{h-1} B^T + sigma^2 I.
        let mut stds = Vec::with_capacity(t_p);
        let mut cov = vec![0.0; v * v];
        for _ in 0..t_p {
            let bc = mat_mul(&b, &cov, v);
            let mut next = mat_mul_tr(&bc, &b, v);
            for i in 0..v {
                next[i * v + i] += spec.sigma * spec.sigma;
            }
            cov = next;
            stds.push((0..v).map(|i| cov[i * v + i].sqrt()).collect());
        }
        Ok(Self { v, t_p, powers, stds })
    }

    /// Predictive means for horizons 1..=t_p from the last observed state.
    pub fn means(&self, x_last: &[f64]) -> Vec<Vec<f64>> {
        self.powers
            .iter()
            .map(|p| {
                (0..self.v)
                    .map(|i| (0..self.v).map(|j| p[i * self.v + j] * x_last[j]).sum())
                    .collect()
            })
            .collect()
    }
}

fn mat_mul(a: &[f64], b: &[f64], n: usize) -> Vec<f64> {
    let mut c = vec![0.0; n * n];
    for i in 0..n {
        for p in 0..n {
            let aip = a[i * n + p];
            for j in 0..n {
                c[i * n + j] += aip * b[p * n + j];
            }
        }
    }
    c
}

/// a * b^T
fn mat_mul_tr(a: &[f64], b: &[f64], n: usize) -> Vec<f64> {
    let mut c = vec![0.0; n * n];
    for i in 0..n {
        for j in 0..n {
            let mut s = 0.0;
            for p in 0..n {
                s += a[i * n + p] * b[j * n + p];
            }
            c[i * n + j] = s;
        }
    }
    c
}

/// Simulate the ring process; deterministic given the seed. Starts from
/// zero with a 200-step burn-in.
pub fn generate_synthetic<S: Scalar>(spec: &SyntheticSpec, seed: u64) -> Result<STGDataset<S>> {
    spec.validate()?;
    let v = spec.v;
    let b = spec.transition()?;
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut state = vec![0.0f64; v];
    let mut next = vec![0.0f64; v];
    let burn_in = 200;
    let mut data: Vec<S> = Vec::with_capacity(spec.length * v);
    for step in 0..burn_in + spec.length {
        for i in 0..v {
            let mut s = 0.0;
            for j in 0..v {
                s += b[i * v + j] * state[j];
            }
            next[i] = s + spec.sigma * f64::standard_normal(&mut rng);
        }
        std::mem::swap(&mut state, &mut next);
        if step >= burn_in {
            data.extend(state.iter().map(|&x| S::of_f64(x)));
        }
    }
    let signals = Tensor::from_vec(vec![spec.length, v, 1], data)?;
    let graph = Graph::new(ring_adjacency::<S>(v)?)?;
    let mut ds = STGDataset::new(signals, graph)?;
    ds.interval = Some("synthetic".to_string());
    Ok(ds)
}

/// Write the oracle CSV: one row per (window start, node) with predictive
/// means then stds for horizons 1..=t_p, on the raw data scale.
pub fn write_oracle_csv<S: Scalar>(
    path: &Path,
    dataset: &STGDataset<S>,
    oracle: &SyntheticOracle,
    t_h: usize,
) -> Result<()> {
    use std::io::Write;
    let v_n = dataset.nodes();
    let t_total = dataset.rows();
    let t_p = oracle.t_p;
    let f = std::fs::File::create(path)?;
    let mut w = std::io::BufWriter::new(f);
    let mut header = String::from("window_start,node");
    for h in 1..=t_p {
        header.push_str(&format!(",mean_h{}", h));
    }
    for h in 1..=t_p {
        header.push_str(&format!(",std_h{}", h));
    }
    writeln!(w, "{}", header)?;
    let mut start = 0usize;
    while start + t_h + t_p <= t_total {
        let last_row = start + t_h - 1;
        let x_last: Vec<f64> = (0..v_n).map(|v| dataset.at(last_row, v, 0)).collect();
        let means = oracle.means(&x_last);
        for v in 0..v_n {
            let mut line = format!("{},{}", start, v);
            for h in 0..t_p {
                line.push_str(&format!(",{}", means[h][v]));
            }
            for h in 0..t_p {
                line.push_str(&format!(",{}", oracle.stds[h][v]));
            }
            writeln!(w, "{}", line)?;
        }
        start += 1;
    }
    Ok(())
}

/// Oracle CSV reader: per window start, `(means, stds)` as `[V][T_p]`.
pub struct OracleTable {
    pub t_p: usize,
    pub v: usize,
    entries: std::collections::HashMap<usize, (Vec<f64>, Vec<f64>)>,
}

impl OracleTable {
    pub fn load(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path)
            .map_err(|e| Error::Data(format!("{}: {}", path.display(), e)))?;
        let mut lines = text.lines();
        let header = lines.next().ok_or_else(|| Error::Data("empty oracle file".to_string()))?;
        let cols = header.split(',').count();
        if cols < 4 || (cols - 2) % 2 != 0 {
            return Err(Error::Data(format!("oracle header has {} columns", cols)));
        }
        let t_p = (cols - 2) / 2;
        let mut entries: std::collections::HashMap<usize, (Vec<f64>, Vec<f64>)> =
            std::collections::HashMap::new();
        let mut v_max = 0usize;
        for (lineno, line) in lines.enumerate() {
            if line.trim().is_empty() {
                continue;
            }
            let cells: Vec<&str> = line.split(',').collect();
            if cells.len() != cols {
                return Err(Error::Data(format!("oracle row {}: {} columns", lineno + 2, cells.len())));
            }
            let parse = |s: &str| -> Result<f64> {
                s.trim().parse().map_err(|_| Error::Data(format!("oracle row {}: bad value '{}'", lineno + 2, s)))
            };
            let start = parse(cells[0])? as usize;
            let node = parse(cells[1])? as usize;
            v_max = v_max.max(node);
            let vals: Vec<f64> = cells[2..].iter().map(|c| parse(c)).collect::<Result<_>>()?;
            let entry = entries.entry(start).or_insert_with(|| (Vec::new(), Vec::new()));
            entry.0.extend_from_slice(&vals[..t_p]);
            entry.1.extend_from_slice(&vals[t_p..]);
        }
        Ok(Self { t_p, v: v_max + 1, entries })
    }

    /// Means and stds for the window starting at `start`, both flattened
    /// `[V * T_p]` in node-major order.
    pub fn window(&self, start: usize) -> Option<&(Vec<f64>, Vec<f64>)> {
        self.entries.get(&start)
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn toy_spec() -> SyntheticSpec {
        SyntheticSpec { v: 4, rho: 0.8, lambda: 0.3, sigma: 0.5, length: 400 }
    }

    #[test]
    fn signals_parse_shape_echo() {
        let t = parse_signals_csv::<f64>("0,1\n1.0,2.0\n3.0,4.0\n5.0,6.0\n").unwrap();
        assert_eq!(t.shape(), &[3, 2, 1]);
    }

    #[test]
    fn signals_reject_blank_and_bad_cells() {
        let err = parse_signals_csv::<f64>("0,1\n1.0,\n").unwrap_err().to_string();
        assert!(err.contains("row 2") && err.contains("column 2"), "{err}");
        let err = parse_signals_csv::<f64>("0,1\n1.0,nan\n").unwrap_err().to_string();
        assert!(err.contains("non-finite"), "{err}");
        let err = parse_signals_csv::<f64>("0,1\n1.0,2.0,3.0\n").unwrap_err().to_string();
        assert!(err.contains("columns"), "{err}");
    }

    #[test]
    fn node_count_mismatch_rejected() {
        let signals = parse_signals_csv::<f64>("0,1,2\n1,2,3\n").unwrap();
        let graph = Graph::new(ring_adjacency::<f64>(2).unwrap()).unwrap();
        assert!(STGDataset::new(signals, graph).is_err());
    }

    #[test]
    fn air_quality_shaped_input_accepted() {
        // 8760 rows x 34 nodes
        let mut text = String::new();
        let header: Vec<String> = (0..34).map(|v| v.to_string()).collect();
        text.push_str(&header.join(","));
        text.push('\n');
        for t in 0..8760 {
            let row: Vec<String> = (0..34).map(|v| format!("{}", ((t * 34 + v) % 97) as f64)).collect();
            text.push_str(&row.join(","));
            text.push('\n');
        }
        let signals = parse_signals_csv::<f32>(&text).unwrap();
        assert_eq!(signals.shape(), &[8760, 34, 1]);
    }

    #[test]
    fn split_arithmetic() {
        let s = chronological_split(100, 20).unwrap();
        assert_eq!(s.train, 0..60);
        assert_eq!(s.val, 60..80);
        assert_eq!(s.test, 80..100);
        assert!(chronological_split(50, 24).is_err());
    }

    #[test]
    fn window_counts_and_boundaries() {
        // T_total = 100, T = 24: the train split holds 60 - 24 + 1 windows
        let ds = generate_synthetic::<f64>(&SyntheticSpec { length: 100, ..toy_spec() }, 5).unwrap();
        let stats = ds.norm_stats(0..60).unwrap();
        let windows = make_windows(&ds, 0..60, &stats, 12, 12, 1).unwrap();
        assert_eq!(windows.len(), 37);
        assert!(windows.iter().all(|w| w.start_row + 24 <= 60));
        // a window starting at row 55 would straddle the boundary
        assert!(windows.iter().all(|w| w.start_row != 55));
    }

    #[test]
    fn constant_series_standardizes_to_zero() {
        let signals = Tensor::<f64>::full(vec![40, 2, 1], 3.5);
        let graph = Graph::new(ring_adjacency::<f64>(2).unwrap()).unwrap();
        let ds = STGDataset::new(signals, graph).unwrap();
        let stats = ds.norm_stats(0..24).unwrap();
        let windows = make_windows(&ds, 0..40, &stats, 12, 12, 1).unwrap();
        assert!(windows[0].x_all.data().iter().all(|&x| x == 0.0));
    }

    #[test]
    fn mask_row_sums_equal_history_length() {
        let ds = generate_synthetic::<f64>(&SyntheticSpec { length: 60, ..toy_spec() }, 6).unwrap();
        let stats = ds.norm_stats(0..36).unwrap();
        let windows = make_windows(&ds, 0..60, &stats, 12, 12, 1).unwrap();
        for w in &windows {
            for v in 0..4 {
                let sum: f64 = (0..24).map(|t| w.mask.data()[v * 24 + t]).sum();
                assert_eq!(sum, 12.0);
            }
        }
    }

    #[test]
    fn standardization_round_trip() {
        let ds = generate_synthetic::<f64>(&SyntheticSpec { length: 80, ..toy_spec() }, 7).unwrap();
        let stats = ds.norm_stats(0..48).unwrap();
        let windows = make_windows(&ds, 0..80, &stats, 12, 12, 7).unwrap();
        for w in &windows {
            let raw = destandardize_block(&w.x_all, &stats).unwrap();
            for t in 0..24 {
                for v in 0..4 {
                    let expect = ds.at(w.start_row + t, v, 0);
                    let got = raw.data()[v * 24 + t];
                    assert!((got - expect).abs() < 1e-6, "window {} t={t} v={v}", w.start_row);
                }
            }
        }
    }

    #[test]
    fn norm_stats_ignore_val_and_test_rows() {
        let ds = generate_synthetic::<f64>(&SyntheticSpec { length: 100, ..toy_spec() }, 8).unwrap();
        let splits = chronological_split(ds.rows(), 20).unwrap();
        let stats = ds.norm_stats(splits.train.clone()).unwrap();

        // tamper with rows outside the training split
        let mut data = ds.signals.data().to_vec();
        for t in splits.val.start..ds.rows() {
            for v in 0..4 {
                data[t * 4 + v] += 1000.0;
            }
        }
        let tampered = STGDataset::new(
            Tensor::from_vec(vec![100, 4, 1], data).unwrap(),
            ds.graph.clone(),
        )
        .unwrap();
        let stats2 = tampered.norm_stats(splits.train).unwrap();
        assert_eq!(stats.mean, stats2.mean);
        assert_eq!(stats.std, stats2.std);
    }

    #[test]
    fn synthetic_seed_determinism() {
        let a = generate_synthetic::<f64>(&toy_spec(), 42).unwrap();
        let b = generate_synthetic::<f64>(&toy_spec(), 42).unwrap();
        let ab: Vec<u64> = a.signals.data().iter().map(|x| x.to_bits()).collect();
        let bb: Vec<u64> = b.signals.data().iter().map(|x| x.to_bits()).collect();
        assert_eq!(ab, bb);
        let c = generate_synthetic::<f64>(&toy_spec(), 43).unwrap();
        assert_ne!(a.signals.data(), c.signals.data());
    }

    #[test]
    fn independent_ar1_matches_stationary_variance() {
        // lambda = 0: each node is AR(1) with variance sigma^2 / (1 - rho^2)
        let spec = SyntheticSpec { v: 4, rho: 0.7, lambda: 0.0, sigma: 0.8, length: 50_000 };
        let ds = generate_synthetic::<f64>(&spec, 11).unwrap();
        let expect = spec.sigma * spec.sigma / (1.0 - spec.rho * spec.rho);
        for v in 0..4 {
            let xs: Vec<f64> = (0..ds.rows()).map(|t| ds.at(t, v, 0)).collect();
            let mean: f64 = xs.iter().sum::<f64>() / xs.len() as f64;
            let var: f64 = xs.iter().map(|x| (x - mean) * (x - mean)).sum::<f64>() / xs.len() as f64;
            assert!(
                (var - expect).abs() / expect < 0.05,
                "node {v}: var {var} vs {expect}"
            );
        }
    }

    #[test]
    fn near_zero_rho_decorrelates_consecutive_samples() {
        let spec = SyntheticSpec { v: 3, rho: 1e-9, lambda: 0.0, sigma: 1.0, length: 50_000 };
        let ds = generate_synthetic::<f64>(&spec, 12).unwrap();
        for v in 0..3 {
            let xs: Vec<f64> = (0..ds.rows()).map(|t| ds.at(t, v, 0)).collect();
            let mean: f64 = xs.iter().sum::<f64>() / xs.len() as f64;
            let var: f64 = xs.iter().map(|x| (x - mean) * (x - mean)).sum::<f64>();
            let cov: f64 = xs.windows(2).map(|w| (w[0] - mean) * (w[1] - mean)).sum::<f64>();
            let r = cov / var;
            assert!(r.abs() < 0.02, "node {v}: lag-1 autocorrelation {r}");
        }
    }

    #[test]
    fn non_stationary_spec_rejected() {
        assert!(generate_synthetic::<f64>(
            &SyntheticSpec { rho: 1.0, ..toy_spec() },
            1
        )
        .is_err());
        assert!(generate_synthetic::<f64>(
            &SyntheticSpec { lambda: 1.0, ..toy_spec() },
            1
        )
        .is_err());
    }

    #[test]
    fn oracle_matches_conditional_simulation() {
        // Monte-Carlo check of the analytic conditional mean/std at one state
        let spec = SyntheticSpec { v: 4, rho: 0.9, lambda: 0.4, sigma: 0.6, length: 10 };
        let oracle = SyntheticOracle::build(&spec, 3).unwrap();
        let b = spec.transition().unwrap();
        let x0 = [1.0, -0.5, 0.25, 2.0];
        let mut rng = ChaCha8Rng::seed_from_u64(21);
        let draws = 20_000;
        let mut sums = vec![vec![0.0; 4]; 3];
        let mut sq = vec![vec![0.0; 4]; 3];
        for _ in 0..draws {
            let mut state = x0.to_vec();
            for h in 0..3 {
                let mut next = vec![0.0; 4];
                for i in 0..4 {
                    let mut s = 0.0;
                    for j in 0..4 {
                        s += b[i * 4 + j] * state[j];
                    }
                    next[i] = s + spec.sigma * f64::standard_normal(&mut rng);
                }
                state = next;
                for i in 0..4 {
                    sums[h][i] += state[i];
                    sq[h][i] += state[i] * state[i];
                }
            }
        }
        let means = oracle.means(&x0);
        for h in 0..3 {
            for i in 0..4 {
                let m = sums[h][i] / draws as f64;
                let v = sq[h][i] / draws as f64 - m * m;
                let sd = v.sqrt();
                assert!((m - means[h][i]).abs() < 4.0 * oracle.stds[h][i] / (draws as f64).sqrt() + 1e-9,
                    "mean h={h} i={i}: {m} vs {}", means[h][i]);
                assert!((sd - oracle.stds[h][i]).abs() / oracle.stds[h][i] < 0.03,
                    "std h={h} i={i}: {sd} vs {}", oracle.stds[h][i]);
            }
        }
    }

    #[test]
    fn oracle_csv_round_trip() {
        let spec = SyntheticSpec { v: 3, rho: 0.8, lambda: 0.2, sigma: 0.5, length: 30 };
        let ds = generate_synthetic::<f64>(&spec, 31).unwrap();
        let oracle = SyntheticOracle::build(&spec, 4).unwrap();
        let dir = std::env::temp_dir().join(format!("stgcast-oracle-{}", std::process::id()));
        std::fs::create_dir_all(&dir).unwrap();
        let path = dir.join("oracle.csv");
        write_oracle_csv(&path, &ds, &oracle, 6).unwrap();
        let table = OracleTable::load(&path).unwrap();
        assert_eq!(table.t_p, 4);
        assert_eq!(table.v, 3);
        let (means, stds) = table.window(0).unwrap();
        assert_eq!(means.len(), 12);
        assert_eq!(stds.len(), 12);
        let x_last: Vec<f64> = (0..3).map(|v| ds.at(5, v, 0)).collect();
        let expect = oracle.means(&x_last);
        for v in 0..3 {
            for h in 0..4 {
                assert!((means[v * 4 + h] - expect[h][v]).abs() < 1e-9);
            }
        }
        std::fs::remove_dir_all(&dir).ok();
    }
}
