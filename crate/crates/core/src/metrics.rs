//! Probabilistic and deterministic evaluation of forecast ensembles.

use crate::data::NormStats;
use crate::diffusion::ForecastEnsemble;
use crate::error::{Error, Result};
use crate::scalar::Scalar;
use crate::tensor::Tensor;

/// Empirical CRPS of a sample set against one observation:
/// (1/S) sum |x_i - y| - (1/(2 S^2)) sum_ij |x_i - x_j|.
pub fn crps_empirical(samples: &[f64], obs: f64) -> Result<f64> {
    if samples.is_empty() {
        return Err(Error::Invalid("crps needs at least one sample".to_string()));
    }
    let s = samples.len() as f64;
    let term1: f64 = samples.iter().map(|x| (x - obs).abs()).sum::<f64>() / s;
    let mut spread = 0.0;
    for (i, xi) in samples.iter().enumerate() {
        for xj in &samples[i + 1..] {
            spread += (xi - xj).abs();
        }
    }
    // double loop counts each unordered pair once
    Ok(term1 - spread / (s * s))
}

/// One metric block; `crps`/`mae` are plain means of the per-horizon
/// entries, `rmse` aggregates through the squared means.
#[derive(Debug, Clone)]
pub struct MetricSet {
    pub crps: f64,
    pub mae: f64,
    pub rmse: f64,
    pub per_horizon_crps: Vec<f64>,
    pub per_horizon_mae: Vec<f64>,
    pub per_horizon_rmse: Vec<f64>,
}

/// Evaluation over one or more windows, in standardized units and on the
/// raw data scale.
#[derive(Debug, Clone)]
pub struct EvalReport {
    pub standardized: MetricSet,
    pub raw: MetricSet,
    /// Number of (window, node, horizon) points evaluated.
    pub points: usize,
}

#[derive(Debug, Clone, Default)]
struct HorizonSums {
    crps: Vec<f64>,
    abs_err: Vec<f64>,
    sq_err: Vec<f64>,
    count: Vec<usize>,
}

impl HorizonSums {
    fn new(t_p: usize) -> Self {
        Self { crps: vec![0.0; t_p], abs_err: vec![0.0; t_p], sq_err: vec![0.0; t_p], count: vec![0; t_p] }
    }

    fn add(&mut self, h: usize, samples: &[f64], mean: f64, obs: f64) -> Result<()> {
        self.crps[h] += crps_empirical(samples, obs)?;
        self.abs_err[h] += (mean - obs).abs();
        self.sq_err[h] += (mean - obs) * (mean - obs);
        self.count[h] += 1;
        Ok(())
    }

    fn finish(&self) -> Result<MetricSet> {
        let t_p = self.crps.len();
        if self.count.contains(&0) {
            return Err(Error::Invalid("no points evaluated".to_string()));
        }
        let per_horizon_crps: Vec<f64> =
            (0..t_p).map(|h| self.crps[h] / self.count[h] as f64).collect();
        let per_horizon_mae: Vec<f64> =
            (0..t_p).map(|h| self.abs_err[h] / self.count[h] as f64).collect();
        let per_horizon_mse: Vec<f64> =
            (0..t_p).map(|h| self.sq_err[h] / self.count[h] as f64).collect();
        let per_horizon_rmse: Vec<f64> = per_horizon_mse.iter().map(|m| m.sqrt()).collect();
        let crps = per_horizon_crps.iter().sum::<f64>() / t_p as f64;
        let mae = per_horizon_mae.iter().sum::<f64>() / t_p as f64;
        let rmse = (per_horizon_mse.iter().sum::<f64>() / t_p as f64).sqrt();
        Ok(MetricSet { crps, mae, rmse, per_horizon_crps, per_horizon_mae, per_horizon_rmse })
    }
}

/// Accumulates windows; the deterministic point forecast is the ensemble
/// mean. Raw-scale metrics destandardize per node before scoring.
pub struct Evaluator {
    t_p: usize,
    stats: Option<NormStats>,
    standardized: HorizonSums,
    raw: HorizonSums,
    points: usize,
}

impl Evaluator {
    pub fn new(t_p: usize, stats: Option<NormStats>) -> Self {
        Self {
            t_p,
            stats,
            standardized: HorizonSums::new(t_p),
            raw: HorizonSums::new(t_p),
            points: 0,
        }
    }

    /// Score one window's ensemble against the `[F, V, T_p]` truth.
    pub fn add<S: Scalar>(&mut self, ensemble: &ForecastEnsemble<S>, truth: &Tensor<S>) -> Result<()> {
        if ensemble.samples.is_empty() {
            return Err(Error::Invalid("empty ensemble".to_string()));
        }
        let sh = truth.shape().to_vec();
        if sh.len() != 3 || sh[2] != self.t_p {
            return Err(Error::shape("evaluate", format!("truth {:?} vs horizon {}", sh, self.t_p)));
        }
        for smp in &ensemble.samples {
            if smp.shape() != truth.shape() {
                return Err(Error::shape(
                    "evaluate",
                    format!("sample {:?} vs truth {:?}", smp.shape(), truth.shape()),
                ));
            }
        }
        let (f_n, v_n) = (sh[0], sh[1]);
        let mut vals = vec![0.0f64; ensemble.samples.len()];
        let mut raw_vals = vec![0.0f64; ensemble.samples.len()];
        for f in 0..f_n {
            for v in 0..v_n {
                for h in 0..self.t_p {
                    let idx = (f * v_n + v) * self.t_p + h;
                    for (si, smp) in ensemble.samples.iter().enumerate() {
                        vals[si] = smp.data()[idx].as_f64();
                    }
                    let obs = truth.data()[idx].as_f64();
                    let mean = vals.iter().sum::<f64>() / vals.len() as f64;
                    self.standardized.add(h, &vals, mean, obs)?;

                    if let Some(stats) = &self.stats {
                        for (rv, &z) in raw_vals.iter_mut().zip(vals.iter()) {
                            *rv = stats.destandardize(z, v, f);
                        }
                        let raw_obs = stats.destandardize(obs, v, f);
                        let raw_mean = raw_vals.iter().sum::<f64>() / raw_vals.len() as f64;
                        self.raw.add(h, &raw_vals, raw_mean, raw_obs)?;
                    } else {
                        self.raw.add(h, &vals, mean, obs)?;
                    }
                    self.points += 1;
                }
            }
        }
        Ok(())
    }

    pub fn finish(&self) -> Result<EvalReport> {
        Ok(EvalReport {
            standardized: self.standardized.finish()?,
            raw: self.raw.finish()?,
            points: self.points,
        })
    }
}

/// Single-window convenience wrapper.
pub fn evaluate<S: Scalar>(
    ensemble: &ForecastEnsemble<S>,
    truth: &Tensor<S>,
    stats: Option<&NormStats>,
) -> Result<EvalReport> {
    let t_p = *truth
        .shape()
        .last()
        .ok_or_else(|| Error::shape("evaluate", "scalar truth".to_string()))?;
    let mut ev = Evaluator::new(t_p, stats.cloned());
    ev.add(ensemble, truth)?;
    ev.finish()
}

/// Reference CRPS implementations used to cross-check the estimator; kept
/// deliberately independent of `crps_empirical`.
pub mod reference {
    /// Integrate (F(z) - 1{obs <= z})^2 exactly over the breakpoints of the
    /// empirical step CDF.
    pub fn crps_exact_integral(samples: &[f64], obs: f64) -> f64 {
        let mut points: Vec<f64> = samples.to_vec();
        points.push(obs);
        points.sort_by(|a, b| a.partial_cmp(b).expect("finite values"));
        let mut sorted = samples.to_vec();
        sorted.sort_by(|a, b| a.partial_cmp(b).expect("finite values"));
        let s = sorted.len() as f64;
        let mut total = 0.0;
        for w in points.windows(2) {
            let (lo, hi) = (w[0], w[1]);
            if hi <= lo {
                continue;
            }
            // value of the integrand on the open interval (lo, hi)
            let z = 0.5 * (lo + hi);
            let cdf = sorted.iter().take_while(|&&x| x <= z).count() as f64 / s;
            let ind = if obs <= z { 1.0 } else { 0.0 };
            total += (cdf - ind) * (cdf - ind) * (hi - lo);
        }
        total
    }

    /// Trapezoid-rule integration on a fine uniform grid; converges to the
    /// exact integral as the grid refines.
    pub fn crps_trapezoid(samples: &[f64], obs: f64, grid: usize) -> f64 {
        let mut lo = obs;
        let mut hi = obs;
        for &x in samples {
            lo = lo.min(x);
            hi = hi.max(x);
        }
        let pad = (hi - lo).max(1.0) * 1e-3;
        lo -= pad;
        hi += pad;
        let mut sorted = samples.to_vec();
        sorted.sort_by(|a, b| a.partial_cmp(b).expect("finite values"));
        let s = sorted.len() as f64;
        let h = (hi - lo) / grid as f64;
        let f = |z: f64| {
            let cdf = sorted.iter().take_while(|&&x| x <= z).count() as f64 / s;
            let ind = if obs <= z { 1.0 } else { 0.0 };
            (cdf - ind) * (cdf - ind)
        };
        let mut total = 0.5 * (f(lo) + f(hi));
        for i in 1..grid {
            total += f(lo + i as f64 * h);
        }
        total * h
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::diffusion::SampleProvenance;
    use proptest::prelude::*;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    fn ensemble_from(samples: Vec<Tensor<f64>>) -> ForecastEnsemble<f64> {
        let provenance = (0..samples.len())
            .map(|i| SampleProvenance { trajectory: i, step_index: 0 })
            .collect();
        ForecastEnsemble { samples, provenance }
    }

    #[test]
    fn crps_zero_iff_degenerate_at_obs() {
        assert_eq!(crps_empirical(&[2.0, 2.0, 2.0], 2.0).unwrap(), 0.0);
        assert!(crps_empirical(&[2.0, 2.0], 2.1).unwrap() > 0.0);
    }

    #[test]
    fn crps_hand_case() {
        // samples {0, 1}, obs 0: 0.5 - 0.25 = 0.25
        assert_eq!(crps_empirical(&[0.0, 1.0], 0.0).unwrap(), 0.25);
    }

    #[test]
    fn crps_empty_rejected() {
        assert!(crps_empirical(&[], 0.0).is_err());
    }

    #[test]
    fn estimator_matches_exact_integration() {
        let mut rng = ChaCha8Rng::seed_from_u64(17);
        for i in 0..10 {
            let s = 3 + (i % 6);
            let samples: Vec<f64> = (0..s).map(|_| f64::uniform_sym(&mut rng) * 3.0).collect();
            let obs = f64::uniform_sym(&mut rng) * 3.0;
            let est = crps_empirical(&samples, obs).unwrap();
            let exact = reference::crps_exact_integral(&samples, obs);
            assert!((est - exact).abs() <= 1e-6, "case {i}: {est} vs {exact}");
        }
    }

    #[test]
    fn trapezoid_agrees_with_exact_integral() {
        let mut rng = ChaCha8Rng::seed_from_u64(18);
        let samples: Vec<f64> = (0..8).map(|_| f64::uniform_sym(&mut rng)).collect();
        let obs = 0.3;
        let exact = reference::crps_exact_integral(&samples, obs);
        let trap = reference::crps_trapezoid(&samples, obs, 2_000_000);
        assert!((trap - exact).abs() < 5e-6, "{trap} vs {exact}");
    }

    #[test]
    fn perfect_single_sample_scores_zero() {
        let truth = Tensor::<f64>::from_fn(vec![1, 2, 3], |i| i as f64);
        let e = ensemble_from(vec![truth.clone()]);
        let r = evaluate(&e, &truth, None).unwrap();
        assert_eq!(r.standardized.crps, 0.0);
        assert_eq!(r.standardized.mae, 0.0);
        assert_eq!(r.standardized.rmse, 0.0);
        assert_eq!(r.points, 6);
    }

    #[test]
    fn constant_bias_shows_up_as_mae_and_rmse() {
        let truth = Tensor::<f64>::zeros(vec![1, 2, 4]);
        let b = 0.75;
        let e = ensemble_from(vec![
            Tensor::full(vec![1, 2, 4], b),
            Tensor::full(vec![1, 2, 4], b),
        ]);
        let r = evaluate(&e, &truth, None).unwrap();
        assert!((r.standardized.mae - b).abs() < 1e-12);
        assert!((r.standardized.rmse - b).abs() < 1e-12);
    }

    #[test]
    fn per_horizon_entries_aggregate_to_scalars() {
        let mut rng = ChaCha8Rng::seed_from_u64(19);
        let truth = Tensor::<f64>::randn(vec![1, 3, 4], &mut rng);
        let e = ensemble_from((0..5).map(|_| Tensor::randn(vec![1, 3, 4], &mut rng)).collect());
        let r = evaluate(&e, &truth, None).unwrap();
        let m = &r.standardized;
        let crps_mean: f64 = m.per_horizon_crps.iter().sum::<f64>() / 4.0;
        let mae_mean: f64 = m.per_horizon_mae.iter().sum::<f64>() / 4.0;
        let rmse_agg: f64 =
            (m.per_horizon_rmse.iter().map(|r| r * r).sum::<f64>() / 4.0).sqrt();
        assert!((m.crps - crps_mean).abs() < 1e-12);
        assert!((m.mae - mae_mean).abs() < 1e-12);
        assert!((m.rmse - rmse_agg).abs() < 1e-12);
    }

    #[test]
    fn crps_never_exceeds_mean_absolute_sample_error() {
        let mut rng = ChaCha8Rng::seed_from_u64(20);
        for _ in 0..50 {
            let samples: Vec<f64> = (0..7).map(|_| f64::uniform_sym(&mut rng) * 2.0).collect();
            let obs = f64::uniform_sym(&mut rng);
            let crps = crps_empirical(&samples, obs).unwrap();
            let mae_s: f64 =
                samples.iter().map(|x| (x - obs).abs()).sum::<f64>() / samples.len() as f64;
            assert!(crps <= mae_s + 1e-12);
        }
    }

    proptest! {
        #[test]
        fn crps_scale_equivariance(
            samples in proptest::collection::vec(-10.0f64..10.0, 1..12),
            obs in -10.0f64..10.0,
            c in 0.01f64..50.0,
        ) {
            let base = crps_empirical(&samples, obs).unwrap();
            let scaled: Vec<f64> = samples.iter().map(|x| c * x).collect();
            let s = crps_empirical(&scaled, c * obs).unwrap();
            prop_assert!((s - c * base).abs() < 1e-9 * (1.0 + c * base.abs()));
        }

        #[test]
        fn crps_permutation_invariance(
            samples in proptest::collection::vec(-10.0f64..10.0, 2..12),
            obs in -10.0f64..10.0,
            seed in 0u64..1000,
        ) {
            use rand::seq::SliceRandom;
            let base = crps_empirical(&samples, obs).unwrap();
            let mut shuffled = samples.clone();
            let mut rng = ChaCha8Rng::seed_from_u64(seed);
            shuffled.shuffle(&mut rng);
            let s = crps_empirical(&shuffled, obs).unwrap();
            prop_assert!((s - base).abs() < 1e-12);
        }
    }

    #[test]
    fn raw_scale_metrics_rescale_with_stats() {
        let stats = NormStats { mean: vec![10.0, -5.0], std: vec![2.0, 4.0], features: 1 };
        let truth = Tensor::<f64>::zeros(vec![1, 2, 2]);
        let e = ensemble_from(vec![Tensor::full(vec![1, 2, 2], 1.0)]);
        let r = evaluate(&e, &truth, Some(&stats)).unwrap();
        // standardized error is 1 everywhere; raw errors are the stds
        assert!((r.standardized.mae - 1.0).abs() < 1e-12);
        assert!((r.raw.mae - 3.0).abs() < 1e-12);
        assert!((r.raw.rmse - ((4.0 + 16.0) / 2.0f64).sqrt()).abs() < 1e-12);
    }
}
