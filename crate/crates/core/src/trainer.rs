//! Training loop: batched noise-prediction loss, Adam with bias correction,
//! learning-rate halving, validation-CRPS early stopping, checkpoint
//! selection.

use std::time::Instant;

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use crate::diffusion::{
    denoising_loss, draw_step_and_noise, ensemble_sample, EtaMode, STGWindow, SampleConfig,
    SampleMode,
};
use crate::error::{Error, Result};
use crate::graph::Graph;
use crate::metrics::Evaluator;
use crate::scalar::Scalar;
use crate::schedule::NoiseSchedule;
use crate::tensor::{Tape, Tensor};
use crate::ugnet::UGnet;

/// Adam with the canonical constants (0.9, 0.999, 1e-8).
#[derive(Debug, Clone)]
pub struct Adam<S> {
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    step: usize,
    m: Vec<Tensor<S>>,
    v: Vec<Tensor<S>>,
}

impl<S: Scalar> Adam<S> {
    pub fn new() -> Self {
        Self { beta1: 0.9, beta2: 0.999, eps: 1e-8, step: 0, m: Vec::new(), v: Vec::new() }
    }

    pub fn step_count(&self) -> usize {
        self.step
    }

    /// One update over a parameter list; moments are laid out by position,
    /// so the list order must be stable across calls.
    pub fn step(&mut self, params: &mut [&mut Tensor<S>], grads: &[Tensor<S>], lr: f64) -> Result<()> {
        if params.len() != grads.len() {
            return Err(Error::Invalid(format!(
                "{} parameter tensors but {} gradients",
                params.len(),
                grads.len()
            )));
        }
        if self.m.is_empty() {
            self.m = params.iter().map(|p| Tensor::zeros(p.shape().to_vec())).collect();
            self.v = params.iter().map(|p| Tensor::zeros(p.shape().to_vec())).collect();
        }
        if self.m.len() != params.len() {
            return Err(Error::Invalid("optimizer state does not match parameter list".to_string()));
        }
        self.step += 1;
        let bc1 = 1.0 - self.beta1.powi(self.step as i32);
        let bc2 = 1.0 - self.beta2.powi(self.step as i32);
        for ((p, g), (m, v)) in params.iter_mut().zip(grads).zip(self.m.iter_mut().zip(self.v.iter_mut())) {
            if p.shape() != g.shape() {
                return Err(Error::shape(
                    "adam_step",
                    format!("parameter {:?} vs gradient {:?}", p.shape(), g.shape()),
                ));
            }
            let (b1, b2) = (S::of_f64(self.beta1), S::of_f64(self.beta2));
            let (nb1, nb2) = (S::of_f64(1.0 - self.beta1), S::of_f64(1.0 - self.beta2));
            let lr_s = S::of_f64(lr);
            let eps_s = S::of_f64(self.eps);
            let (bc1_s, bc2_s) = (S::of_f64(bc1), S::of_f64(bc2));
            let gd = g.data();
            let md = m.data_mut();
            for (mi, &gi) in md.iter_mut().zip(gd) {
                *mi = b1 * *mi + nb1 * gi;
            }
            let vd = v.data_mut();
            for (vi, &gi) in vd.iter_mut().zip(gd) {
                *vi = b2 * *vi + nb2 * gi * gi;
            }
            let pd = p.data_mut();
            for ((pi, &mi), &vi) in pd.iter_mut().zip(m.data()).zip(v.data()) {
                let m_hat = mi / bc1_s;
                let v_hat = vi / bc2_s;
                *pi -= lr_s * m_hat / (v_hat.sqrt() + eps_s);
            }
        }
        Ok(())
    }
}

impl<S: Scalar> Default for Adam<S> {
    fn default() -> Self {
        Self::new()
    }
}

/// Learning rate at a 1-based epoch under halving every `halve_every`.
pub fn lr_at_epoch(base: f64, halve_every: usize, epoch: usize) -> f64 {
    base * 0.5f64.powi(((epoch - 1) / halve_every) as i32)
}

#[derive(Debug, Clone)]
pub struct TrainConfig {
    pub batch_size: usize,
    pub lr: f64,
    pub lr_halve_every: usize,
    pub patience: usize,
    pub max_epochs: usize,
    pub seed: u64,
    /// Ensemble size for validation CRPS.
    pub val_s: usize,
    /// Subset size for validation sampling (ancestral when >= N).
    pub val_m: usize,
    /// Evaluate every `val_window_stride`-th validation window.
    pub val_window_stride: usize,
    pub future_only: bool,
    pub clip_norm: Option<f64>,
    /// 0 = use every batch.
    pub max_steps_per_epoch: usize,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            batch_size: 8,
            lr: 0.002,
            lr_halve_every: 5,
            patience: 10,
            max_epochs: 50,
            seed: 0,
            val_s: 4,
            val_m: 20,
            val_window_stride: 1,
            future_only: false,
            clip_norm: Some(1.0),
            max_steps_per_epoch: 0,
        }
    }
}

#[derive(Debug, Clone)]
pub struct EpochLog {
    pub epoch: usize,
    pub train_loss: f64,
    pub val_crps: f64,
    pub lr: f64,
    pub wall_seconds: f64,
    /// Batches whose gradient was clipped this epoch.
    pub clipped_steps: usize,
}

#[derive(Debug, Clone)]
pub struct TrainRun<S> {
    /// Parameters of the best-on-validation epoch.
    pub best: UGnet<S>,
    pub best_epoch: usize,
    pub best_val_crps: f64,
    pub log: Vec<EpochLog>,
}

pub fn write_log_csv(path: &std::path::Path, log: &[EpochLog]) -> Result<()> {
    let mut out = String::from("epoch,train_loss,val_crps,lr,wall_seconds,clipped_steps\n");
    for e in log {
        out.push_str(&format!(
            "{},{},{},{},{},{}\n",
            e.epoch, e.train_loss, e.val_crps, e.lr, e.wall_seconds, e.clipped_steps
        ));
    }
    std::fs::write(path, out)?;
    Ok(())
}

/// Validation CRPS (standardized units) with a small ensemble.
fn validation_crps<S: Scalar>(
    net: &UGnet<S>,
    graph: &Graph<S>,
    schedule: &NoiseSchedule,
    windows: &[STGWindow<S>],
    cfg: &TrainConfig,
) -> Result<f64> {
    let m = cfg.val_m.min(schedule.len()).max(1);
    let sample_cfg = SampleConfig {
        s: cfg.val_s,
        k: 1,
        mode: if m < schedule.len() { SampleMode::Ddim } else { SampleMode::Ddpm },
        m,
        eta: EtaMode::DdpmEquivalent,
        seed: cfg.seed ^ 0x5eed_5eed,
    };
    let t_p = windows.first().map(|w| w.t_p).unwrap_or(1);
    let mut ev = Evaluator::new(t_p, None);
    for w in windows.iter().step_by(cfg.val_window_stride.max(1)) {
        let ensemble = ensemble_sample(net, w, graph, schedule, &sample_cfg)?;
        ev.add(&ensemble, &w.future()?)?;
    }
    Ok(ev.finish()?.standardized.crps)
}

/// Train in place and return the best-on-validation snapshot plus the log.
pub fn train<S: Scalar>(
    net: &mut UGnet<S>,
    graph: &Graph<S>,
    schedule: &NoiseSchedule,
    train_windows: &[STGWindow<S>],
    val_windows: &[STGWindow<S>],
    cfg: &TrainConfig,
) -> Result<TrainRun<S>> {
    if train_windows.is_empty() || val_windows.is_empty() {
        return Err(Error::Invalid("empty training or validation window set".to_string()));
    }
    if cfg.batch_size == 0 {
        return Err(Error::Invalid("batch size must be positive".to_string()));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    let mut adam = Adam::new();
    let mut best: Option<(usize, f64, UGnet<S>)> = None;
    let mut log = Vec::new();
    let mut since_best = 0usize;

    for epoch in 1..=cfg.max_epochs {
        let started = Instant::now();
        let lr = lr_at_epoch(cfg.lr, cfg.lr_halve_every, epoch);
        let mut order: Vec<usize> = (0..train_windows.len()).collect();
        order.shuffle(&mut rng);
        let mut batches = order.chunks(cfg.batch_size).collect::<Vec<_>>();
        if cfg.max_steps_per_epoch > 0 && batches.len() > cfg.max_steps_per_epoch {
            batches.truncate(cfg.max_steps_per_epoch);
        }

        let mut loss_sum = 0.0;
        let mut clipped = 0usize;
        for (step, batch) in batches.iter().enumerate() {
            let mut tape = Tape::new();
            let vars = net.register(&mut tape, true);
            let mut batch_loss = None;
            for &wi in batch.iter() {
                let w = &train_windows[wi];
                let (n, eps) = draw_step_and_noise(w, schedule, &mut rng);
                let term =
                    denoising_loss(&mut tape, w, schedule, n, &eps, cfg.future_only, |tape, x, m, n| {
                        net.forward(tape, &vars, graph, x, m, n)
                    })?;
                batch_loss = Some(match batch_loss {
                    None => term,
                    Some(acc) => tape.add(acc, term)?,
                });
            }
            let total = batch_loss.expect("non-empty batch");
            let loss = tape.scale(total, S::of_f64(1.0 / batch.len() as f64))?;
            let loss_val = tape.value(loss).item()?.as_f64();
            if !loss_val.is_finite() {
                return Err(Error::NonFinite(format!("loss at epoch {}, step {}", epoch, step + 1)));
            }
            loss_sum += loss_val;
            tape.backward(loss)?;

            let var_list = vars.all();
            let mut grads: Vec<Tensor<S>> = Vec::with_capacity(var_list.len());
            for v in &var_list {
                let value_shape = tape.value(*v).shape().to_vec();
                grads.push(tape.grad(*v).unwrap_or_else(|| Tensor::zeros(value_shape)));
            }
            if let Some(max_norm) = cfg.clip_norm {
                let norm_sq: f64 = grads
                    .iter()
                    .map(|g| g.data().iter().map(|x| x.as_f64() * x.as_f64()).sum::<f64>())
                    .sum();
                let norm = norm_sq.sqrt();
                if norm > max_norm {
                    let scale = S::of_f64(max_norm / norm);
                    for g in &mut grads {
                        *g = g.scale(scale);
                    }
                    clipped += 1;
                }
            }
            let mut names = net.named_tensors_mut();
            let mut params: Vec<&mut Tensor<S>> = names.iter_mut().map(|(_, t)| &mut **t).collect();
            adam.step(&mut params, &grads, lr)?;
        }

        let train_loss = loss_sum / batches.len() as f64;
        let val_crps = validation_crps(net, graph, schedule, val_windows, cfg)?;
        if !val_crps.is_finite() {
            return Err(Error::NonFinite(format!("validation CRPS at epoch {}", epoch)));
        }
        log.push(EpochLog {
            epoch,
            train_loss,
            val_crps,
            lr,
            wall_seconds: started.elapsed().as_secs_f64(),
            clipped_steps: clipped,
        });

        let improved = best.as_ref().is_none_or(|(_, b, _)| val_crps < *b);
        if improved {
            best = Some((epoch, val_crps, net.clone()));
            since_best = 0;
        } else {
            since_best += 1;
            if since_best >= cfg.patience {
                break;
            }
        }
    }

    let (best_epoch, best_val_crps, best) = best.expect("at least one epoch ran");
    Ok(TrainRun { best, best_epoch, best_val_crps, log })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::data::{make_windows, STGDataset};
    use crate::schedule::make_quadratic_schedule;
    use crate::ugnet::UGnetConfig;

    #[test]
    fn lr_halving_schedule() {
        assert_eq!(lr_at_epoch(0.002, 5, 1), 0.002);
        assert_eq!(lr_at_epoch(0.002, 5, 5), 0.002);
        assert_eq!(lr_at_epoch(0.002, 5, 6), 0.001);
        assert_eq!(lr_at_epoch(0.002, 5, 11), 0.002 / 4.0);
    }

    #[test]
    fn adam_zero_gradient_is_a_null_update() {
        let mut adam = Adam::<f64>::new();
        let mut p = Tensor::from_vec(vec![3], vec![1.0, -2.0, 0.5]).unwrap();
        let before = p.data().to_vec();
        let g = Tensor::zeros(vec![3]);
        adam.step(&mut [&mut p], &[g], 0.1).unwrap();
        assert_eq!(p.data(), before.as_slice());
        assert_eq!(adam.step_count(), 1);
    }

    #[test]
    fn adam_first_step_magnitude_is_lr() {
        let mut adam = Adam::<f64>::new();
        let mut p = Tensor::from_vec(vec![1], vec![0.0]).unwrap();
        let g = Tensor::from_vec(vec![1], vec![1.0]).unwrap();
        adam.step(&mut [&mut p], &[g], 0.01).unwrap();
        assert!((p.data()[0] + 0.01).abs() < 1e-9, "update {}", p.data()[0]);
    }

    #[test]
    fn adam_moments_decay_under_zero_gradients() {
        let mut adam = Adam::<f64>::new();
        let mut p = Tensor::from_vec(vec![1], vec![0.0]).unwrap();
        let g1 = Tensor::from_vec(vec![1], vec![2.0]).unwrap();
        adam.step(&mut [&mut p], &[g1], 0.01).unwrap();
        let m1 = adam.m[0].data()[0];
        let v1 = adam.v[0].data()[0];
        let zero = Tensor::zeros(vec![1]);
        adam.step(&mut [&mut p], &[zero.clone()], 0.01).unwrap();
        assert!((adam.m[0].data()[0] - 0.9 * m1).abs() < 1e-15);
        assert!((adam.v[0].data()[0] - 0.999 * v1).abs() < 1e-15);
    }

    #[test]
    fn adam_shape_mismatch_rejected() {
        let mut adam = Adam::<f64>::new();
        let mut p = Tensor::zeros(vec![2]);
        let g = Tensor::zeros(vec![3]);
        assert!(adam.step(&mut [&mut p], &[g], 0.1).is_err());
    }

    fn constant_toy() -> (STGDataset<f64>, Vec<STGWindow<f64>>, Vec<STGWindow<f64>>) {
        // 1-node constant signal; the windows standardize to all zeros
        let signals = Tensor::<f64>::full(vec![40, 1, 1], 5.0);
        let graph =
            crate::graph::Graph::new(Tensor::from_vec(vec![1, 1], vec![0.0]).unwrap()).unwrap();
        let ds = STGDataset::new(signals, graph).unwrap();
        let stats = ds.norm_stats(0..24).unwrap();
        let train = make_windows(&ds, 0..24, &stats, 2, 2, 1).unwrap();
        let val = make_windows(&ds, 24..32, &stats, 2, 2, 1).unwrap();
        (ds, train, val)
    }

    fn toy_net(seed: u64) -> UGnet<f64> {
        let mut cfg = UGnetConfig::new(1, 1, 4, 4, 2, 1, 8);
        cfg.depth = 1;
        UGnet::new(cfg, seed).unwrap()
    }

    #[test]
    fn training_loss_decreases_on_constant_toy() {
        let (ds, train_w, val_w) = constant_toy();
        let schedule = make_quadratic_schedule(10, 1e-4, 0.3).unwrap();
        let mut net = toy_net(3);
        let cfg = TrainConfig {
            max_epochs: 8,
            patience: 10,
            seed: 5,
            val_s: 2,
            val_m: 10,
            ..Default::default()
        };
        let run = train(&mut net, &ds.graph, &schedule, &train_w, &val_w, &cfg).unwrap();
        let first = run.log.first().unwrap().train_loss;
        let best = run
            .log
            .iter()
            .map(|e| e.train_loss)
            .fold(f64::INFINITY, f64::min);
        assert!(best < first, "no improvement: first {first}, best {best}");
        assert!(run.best_epoch >= 1);
    }

    #[test]
    fn identical_seeds_give_bitwise_identical_loss_curves() {
        let (ds, train_w, val_w) = constant_toy();
        let schedule = make_quadratic_schedule(10, 1e-4, 0.3).unwrap();
        let cfg = TrainConfig {
            max_epochs: 3,
            seed: 9,
            val_s: 2,
            val_m: 5,
            ..Default::default()
        };
        let mut net_a = toy_net(4);
        let run_a = train(&mut net_a, &ds.graph, &schedule, &train_w, &val_w, &cfg).unwrap();
        let mut net_b = toy_net(4);
        let run_b = train(&mut net_b, &ds.graph, &schedule, &train_w, &val_w, &cfg).unwrap();
        for (a, b) in run_a.log.iter().zip(run_b.log.iter()) {
            assert_eq!(a.train_loss.to_bits(), b.train_loss.to_bits(), "epoch {}", a.epoch);
            assert_eq!(a.val_crps.to_bits(), b.val_crps.to_bits(), "epoch {}", a.epoch);
        }
    }

    #[test]
    fn sampled_futures_concentrate_after_training() {
        // before/after comparison on the constant toy: the trained model's
        // ensembles must be tighter than the untrained one's
        let (ds, train_w, val_w) = constant_toy();
        let schedule = make_quadratic_schedule(10, 1e-4, 0.3).unwrap();
        let untrained = toy_net(3);
        let mut net = untrained.clone();
        let cfg = TrainConfig {
            max_epochs: 12,
            patience: 12,
            seed: 5,
            val_s: 2,
            val_m: 10,
            ..Default::default()
        };
        let run = train(&mut net, &ds.graph, &schedule, &train_w, &val_w, &cfg).unwrap();

        let sample_cfg = SampleConfig { s: 16, k: 1, seed: 123, ..Default::default() };
        let std_of = |model: &UGnet<f64>| -> f64 {
            let e = ensemble_sample(model, &val_w[0], &ds.graph, &schedule, &sample_cfg).unwrap();
            let mean = e.mean().unwrap();
            let mut acc = 0.0;
            for s in &e.samples {
                for (x, m) in s.data().iter().zip(mean.data()) {
                    acc += (x - m) * (x - m);
                }
            }
            (acc / (e.samples.len() * mean.numel()) as f64).sqrt()
        };
        let before = std_of(&untrained);
        let after = std_of(&run.best);
        assert!(after < before, "ensemble std did not shrink: {after} vs {before}");
    }

    #[test]
    fn non_finite_loss_aborts_with_context() {
        let (ds, train_w, val_w) = constant_toy();
        let schedule = make_quadratic_schedule(10, 1e-4, 0.3).unwrap();
        let mut net = toy_net(3);
        for (_, t) in net.named_tensors_mut() {
            for x in t.data_mut() {
                *x = f64::NAN;
            }
        }
        let cfg = TrainConfig { max_epochs: 1, seed: 1, ..Default::default() };
        let err = train(&mut net, &ds.graph, &schedule, &train_w, &val_w, &cfg)
            .unwrap_err()
            .to_string();
        assert!(err.contains("epoch 1"), "{err}");
    }
}
