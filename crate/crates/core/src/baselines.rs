//! Reference forecasters the trained model is scored against: the
//! persistence ensemble and the exact-posterior Gaussian oracle of the
//! synthetic process.

use rand::Rng;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use crate::data::{NormStats, OracleTable, STGDataset};
use crate::diffusion::{ForecastEnsemble, STGWindow, SampleProvenance};
use crate::error::{Error, Result};
use crate::scalar::Scalar;
use crate::tensor::Tensor;

/// Standardized h-step-ahead residuals per horizon and node, collected from
/// training rows; the bootstrap spread of the persistence baseline.
#[derive(Debug, Clone)]
pub struct ResidualPool {
    /// `pools[h][v]` holds (x_{t+h+1} - x_t) / std_v over train rows t.
    pools: Vec<Vec<Vec<f64>>>,
}

impl ResidualPool {
    pub fn build<S: Scalar>(
        dataset: &STGDataset<S>,
        stats: &NormStats,
        train: std::ops::Range<usize>,
        t_p: usize,
    ) -> Result<Self> {
        if train.len() <= t_p {
            return Err(Error::Invalid(format!(
                "train split of {} rows cannot provide {}-step residuals",
                train.len(),
                t_p
            )));
        }
        let v_n = dataset.nodes();
        let f_n = dataset.features();
        let sig = dataset.signals.data();
        let at = |t: usize, v: usize| sig[(t * v_n + v) * f_n].as_f64();
        let mut pools = vec![vec![Vec::new(); v_n]; t_p];
        for t in train.start..train.end - t_p {
            for v in 0..v_n {
                let base = at(t, v);
                for (h, pool) in pools.iter_mut().enumerate() {
                    let diff = at(t + h + 1, v) - base;
                    pool[v].push(diff / stats.std[v * stats.features]);
                }
            }
        }
        Ok(Self { pools })
    }
}

/// Last observed value plus a bootstrapped h-step residual, per node and
/// horizon, in standardized units.
pub fn persistence_ensemble<S: Scalar>(
    pool: &ResidualPool,
    window: &STGWindow<S>,
    s: usize,
    seed: u64,
) -> Result<ForecastEnsemble<S>> {
    if s == 0 {
        return Err(Error::Invalid("ensemble size must be at least 1".to_string()));
    }
    let sh = window.x_all.shape();
    let (f_n, v_n) = (sh[0], sh[1]);
    let t = sh[2];
    let (t_h, t_p) = (window.t_h, window.t_p);
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut samples = Vec::with_capacity(s);
    let x = window.x_all.data();
    for _ in 0..s {
        let mut data = Vec::with_capacity(f_n * v_n * t_p);
        for f in 0..f_n {
            for v in 0..v_n {
                let last = x[(f * v_n + v) * t + t_h - 1].as_f64();
                for pool_h in pool.pools.iter().take(t_p) {
                    let bucket = &pool_h[v];
                    let r = bucket[rng.gen_range(0..bucket.len())];
                    data.push(S::of_f64(last + r));
                }
            }
        }
        samples.push(Tensor::from_vec(vec![f_n, v_n, t_p], data)?);
    }
    let provenance =
        (0..s).map(|i| SampleProvenance { trajectory: i, step_index: 0 }).collect();
    Ok(ForecastEnsemble { samples, provenance })
}

/// Draws from the exact conditional distribution recorded in the oracle
/// table, standardized with the dataset stats so the result is comparable
/// to model ensembles.
pub fn oracle_ensemble<S: Scalar>(
    table: &OracleTable,
    window_start: usize,
    stats: &NormStats,
    f_n: usize,
    s: usize,
    seed: u64,
) -> Result<ForecastEnsemble<S>> {
    if f_n != 1 {
        return Err(Error::Invalid("oracle table covers single-feature datasets".to_string()));
    }
    let (means, stds) = table
        .window(window_start)
        .ok_or_else(|| Error::Invalid(format!("no oracle entry for window start {}", window_start)))?;
    let (v_n, t_p) = (table.v, table.t_p);
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut samples = Vec::with_capacity(s);
    for _ in 0..s {
        let mut data = Vec::with_capacity(v_n * t_p);
        for v in 0..v_n {
            for h in 0..t_p {
                let raw = means[v * t_p + h] + stds[v * t_p + h] * f64::standard_normal(&mut rng);
                data.push(S::of_f64(stats.standardize(raw, v, 0)));
            }
        }
        samples.push(Tensor::from_vec(vec![1, v_n, t_p], data)?);
    }
    let provenance =
        (0..s).map(|i| SampleProvenance { trajectory: i, step_index: 0 }).collect();
    Ok(ForecastEnsemble { samples, provenance })
}
