//! Conditional masked diffusion: forward corruption, the noise-prediction
//! loss, ancestral and subset reverse sampling, and k-reuse ensembles.

use rand::Rng;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use crate::error::{Error, Result};
use crate::graph::Graph;
use crate::scalar::Scalar;
use crate::schedule::NoiseSchedule;
use crate::tensor::{Tape, Tensor, Var};

/// One training / evaluation instance: history and future as a single
/// `[F, V, T]` tensor with the observation mask and the masked condition.
#[derive(Debug, Clone)]
pub struct STGWindow<S> {
    /// Standardized signals, history followed by future.
    pub x_all: Tensor<S>,
    /// Condition: `x_all` with unobserved (future) positions zeroed.
    pub x_msk: Tensor<S>,
    /// `[V, T]`, 1 = observed.
    pub mask: Tensor<S>,
    pub t_h: usize,
    pub t_p: usize,
    /// Absolute dataset row of the first history step.
    pub start_row: usize,
}

impl<S: Scalar> STGWindow<S> {
    /// Forecasting-mode window: the first `t_h` steps observed, the rest
    /// masked.
    pub fn forecasting(x_all: Tensor<S>, t_h: usize, t_p: usize, start_row: usize) -> Result<Self> {
        let sh = x_all.shape();
        if sh.len() != 3 || sh[2] != t_h + t_p {
            return Err(Error::shape(
                "window",
                format!("expected [F,V,{}], got {:?}", t_h + t_p, sh),
            ));
        }
        if !x_all.all_finite() {
            return Err(Error::NonFinite("window signals".to_string()));
        }
        let (v, t) = (sh[1], sh[2]);
        let mask = Tensor::from_fn(vec![v, t], |i| if i % t < t_h { S::one() } else { S::zero() });
        let x_msk = apply_mask(&x_all, &mask)?;
        Ok(Self { x_all, x_msk, mask, t_h, t_p, start_row })
    }

    /// Future slice of the ground truth, `[F, V, T_p]`.
    pub fn future(&self) -> Result<Tensor<S>> {
        self.x_all.slice_last(self.t_h, self.t_p)
    }
}

/// Zero out positions where `mask` is zero; the mask broadcasts over the
/// leading feature axis.
pub fn apply_mask<S: Scalar>(x: &Tensor<S>, mask: &Tensor<S>) -> Result<Tensor<S>> {
    let sh = x.shape();
    if mask.shape() != &sh[1..] {
        return Err(Error::shape(
            "apply_mask",
            format!("mask {:?} does not match signal {:?}", mask.shape(), sh),
        ));
    }
    let per_feature = mask.numel();
    let md = mask.data();
    let data = x.data().iter().enumerate().map(|(i, &v)| v * md[i % per_feature]).collect();
    Tensor::from_vec(sh.to_vec(), data)
}

/// Ensemble of sampled future trajectories plus where each sample came from.
#[derive(Debug, Clone)]
pub struct ForecastEnsemble<S> {
    /// Each `[F, V, T_p]`.
    pub samples: Vec<Tensor<S>>,
    pub provenance: Vec<SampleProvenance>,
}

/// Trajectory id and the reverse-chain step the sample was taken at
/// (0 is the fully denoised state).
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct SampleProvenance {
    pub trajectory: usize,
    pub step_index: usize,
}

impl<S: Scalar> ForecastEnsemble<S> {
    pub fn size(&self) -> usize {
        self.samples.len()
    }

    pub fn trajectory_count(&self) -> usize {
        self.provenance.iter().map(|p| p.trajectory).max().map_or(0, |m| m + 1)
    }

    /// Pointwise mean across samples.
    pub fn mean(&self) -> Result<Tensor<S>> {
        if self.samples.is_empty() {
            return Err(Error::Invalid("empty ensemble".to_string()));
        }
        let mut acc = self.samples[0].clone();
        for s in &self.samples[1..] {
            acc = acc.add_t(s)?;
        }
        Ok(acc.scale(S::of_f64(1.0 / self.samples.len() as f64)))
    }
}

/// Closed-form forward corruption: sqrt(abar_n) x0 + sqrt(1 - abar_n) eps.
pub fn forward_sample<S: Scalar>(
    x0: &Tensor<S>,
    n: usize,
    schedule: &NoiseSchedule,
    eps: &Tensor<S>,
) -> Result<Tensor<S>> {
    if x0.shape() != eps.shape() {
        return Err(Error::shape(
            "forward_sample",
            format!("noise {:?} does not match signal {:?}", eps.shape(), x0.shape()),
        ));
    }
    let ab = schedule.alpha_bar(n)?;
    let scaled = x0.scale(S::of_f64(ab.sqrt()));
    scaled.add_scaled(S::of_f64((1.0 - ab).sqrt()), eps)
}

/// Mean and variance of the forward-process posterior q(x_{n-1} | x_n, x_0).
pub fn posterior_params<S: Scalar>(
    x0: &Tensor<S>,
    xn: &Tensor<S>,
    n: usize,
    schedule: &NoiseSchedule,
) -> Result<(Tensor<S>, f64)> {
    if x0.shape() != xn.shape() {
        return Err(Error::shape(
            "posterior_params",
            format!("x0 {:?} and xn {:?} differ", x0.shape(), xn.shape()),
        ));
    }
    let beta = schedule.beta(n)?;
    let ab_prev = schedule.alpha_bar_ext(n - 1)?;
    let ab_cur = schedule.alpha_bar(n)?;
    let alpha_hat = schedule.alpha_hat(n)?;
    let c0 = ab_prev.sqrt() * beta / (1.0 - ab_cur);
    let cn = alpha_hat.sqrt() * (1.0 - ab_prev) / (1.0 - ab_cur);
    let mean = x0.scale(S::of_f64(c0)).add_scaled(S::of_f64(cn), xn)?;
    Ok((mean, schedule.beta_tilde(n)?))
}

/// Noise-prediction network interface used by the samplers.
pub trait Denoiser<S: Scalar> {
    fn denoise(
        &self,
        x_n: &Tensor<S>,
        x_msk: &Tensor<S>,
        n: usize,
        graph: &Graph<S>,
    ) -> Result<Tensor<S>>;
}

/// Noise-prediction loss for one window at a fixed step and noise draw.
///
/// `denoise` builds the network output on the tape so gradients reach the
/// parameters it registered there. The squared error is averaged over every
/// position of the window (history reconstruction included) unless
/// `future_only` restricts it to the horizon, which exists for ablation.
pub fn denoising_loss<S: Scalar, F>(
    tape: &mut Tape<S>,
    window: &STGWindow<S>,
    schedule: &NoiseSchedule,
    n: usize,
    eps: &Tensor<S>,
    future_only: bool,
    denoise: F,
) -> Result<Var>
where
    F: FnOnce(&mut Tape<S>, Var, Var, usize) -> Result<Var>,
{
    let x_n = forward_sample(&window.x_all, n, schedule, eps)?;
    let x_n_var = tape.constant(x_n);
    let msk_var = tape.constant(window.x_msk.clone());
    let eps_hat = denoise(tape, x_n_var, msk_var, n)?;
    if tape.value(eps_hat).shape() != eps.shape() {
        return Err(Error::shape(
            "denoising_loss",
            format!(
                "denoiser output {:?} does not match noise {:?}",
                tape.value(eps_hat).shape(),
                eps.shape()
            ),
        ));
    }
    let eps_var = tape.constant(eps.clone());
    let diff = tape.sub(eps_var, eps_hat)?;
    let sq = tape.mul(diff, diff)?;
    let support = if future_only {
        tape.slice(sq, 2, window.t_h, window.t_p)?
    } else {
        sq
    };
    tape.mean_all(support)
}

/// Draw n ~ Uniform{1..N} and eps ~ N(0, I) for one loss evaluation.
pub fn draw_step_and_noise<S: Scalar, R: Rng + ?Sized>(
    window: &STGWindow<S>,
    schedule: &NoiseSchedule,
    rng: &mut R,
) -> (usize, Tensor<S>) {
    let n = rng.gen_range(1..=schedule.len());
    let eps = Tensor::randn(window.x_all.shape().to_vec(), rng);
    (n, eps)
}

/// One ancestral reverse transition from x_n to x_{n-1}.
///
/// The mean coefficient is 1/sqrt(alpha_hat_n), consistent with the
/// forward-posterior derivation. `noise` must be `None` at n = 1 so the
/// final state carries no injected variance.
pub fn ddpm_update<S: Scalar>(
    x: &Tensor<S>,
    eps_hat: &Tensor<S>,
    n: usize,
    schedule: &NoiseSchedule,
    noise: Option<&Tensor<S>>,
) -> Result<Tensor<S>> {
    let beta = schedule.beta(n)?;
    let ab = schedule.alpha_bar(n)?;
    let ah = schedule.alpha_hat(n)?;
    let eps_coeff = -beta / (1.0 - ab).sqrt();
    let mean = x.add_scaled(S::of_f64(eps_coeff), eps_hat)?.scale(S::of_f64(1.0 / ah.sqrt()));
    match noise {
        Some(z) => {
            let sigma = schedule.beta_tilde(n)?.sqrt();
            mean.add_scaled(S::of_f64(sigma), z)
        }
        None => Ok(mean),
    }
}

/// How stochastic the subset reverse process is.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default)]
pub enum EtaMode {
    /// Sigma choice that makes the subset process an ancestral sampler.
    #[default]
    DdpmEquivalent,
    /// Sigma = 0: fully deterministic given the initial draw.
    Deterministic,
}

/// One subset reverse transition from x_cur to x_prev (`prev` may be 0).
pub fn ddim_update<S: Scalar>(
    x: &Tensor<S>,
    eps_hat: &Tensor<S>,
    cur: usize,
    prev: usize,
    schedule: &NoiseSchedule,
    eta: EtaMode,
    noise: Option<&Tensor<S>>,
) -> Result<Tensor<S>> {
    let ab_cur = schedule.alpha_bar(cur)?;
    let ab_prev = schedule.alpha_bar_ext(prev)?;
    let sigma = match eta {
        EtaMode::DdpmEquivalent => schedule.ddim_sigma(prev, cur)?,
        EtaMode::Deterministic => 0.0,
    };
    // predicted clean signal
    let x0_pred = x
        .add_scaled(S::of_f64(-(1.0 - ab_cur).sqrt()), eps_hat)?
        .scale(S::of_f64(1.0 / ab_cur.sqrt()));
    let dir_coeff = (1.0 - ab_prev - sigma * sigma).max(0.0).sqrt();
    let mut out = x0_pred.scale(S::of_f64(ab_prev.sqrt())).add_scaled(S::of_f64(dir_coeff), eps_hat)?;
    if sigma > 0.0 {
        if let Some(z) = noise {
            out = out.add_scaled(S::of_f64(sigma), z)?;
        }
    }
    Ok(out)
}

fn check_state<S: Scalar>(x: &Tensor<S>, step: usize) -> Result<()> {
    if !x.all_finite() {
        return Err(Error::NonFinite(format!("reverse step {}", step)));
    }
    Ok(())
}

fn push_keep<S>(states: &mut Vec<(usize, Tensor<S>)>, keep: usize, step: usize, x: Tensor<S>) {
    states.push((step, x));
    if states.len() > keep {
        states.remove(0);
    }
}

/// Run the ancestral chain, returning the last `keep` states as
/// `(step index, state)` with the most denoised state last.
fn ddpm_chain<S: Scalar, R: Rng + ?Sized>(
    denoiser: &dyn Denoiser<S>,
    window: &STGWindow<S>,
    graph: &Graph<S>,
    schedule: &NoiseSchedule,
    keep: usize,
    rng: &mut R,
) -> Result<Vec<(usize, Tensor<S>)>> {
    let n_steps = schedule.len();
    let mut x = Tensor::randn(window.x_all.shape().to_vec(), rng);
    let mut states: Vec<(usize, Tensor<S>)> = Vec::new();
    for n in (1..=n_steps).rev() {
        let eps_hat = denoiser.denoise(&x, &window.x_msk, n, graph)?;
        x = if n > 1 {
            let z = Tensor::randn(window.x_all.shape().to_vec(), rng);
            ddpm_update(&x, &eps_hat, n, schedule, Some(&z))?
        } else {
            ddpm_update(&x, &eps_hat, n, schedule, None)?
        };
        check_state(&x, n)?;
        push_keep(&mut states, keep, n - 1, x.clone());
    }
    Ok(states)
}

/// Run the subset chain over `tau`, returning the last `keep` states.
fn ddim_chain<S: Scalar, R: Rng + ?Sized>(
    denoiser: &dyn Denoiser<S>,
    window: &STGWindow<S>,
    graph: &Graph<S>,
    schedule: &NoiseSchedule,
    tau: &[usize],
    eta: EtaMode,
    keep: usize,
    rng: &mut R,
) -> Result<Vec<(usize, Tensor<S>)>> {
    validate_tau(tau, schedule.len())?;
    let mut x = Tensor::randn(window.x_all.shape().to_vec(), rng);
    let mut states: Vec<(usize, Tensor<S>)> = Vec::new();
    for m in (0..tau.len()).rev() {
        let cur = tau[m];
        let prev = if m > 0 { tau[m - 1] } else { 0 };
        let eps_hat = denoiser.denoise(&x, &window.x_msk, cur, graph)?;
        let z = Tensor::randn(window.x_all.shape().to_vec(), rng);
        x = ddim_update(&x, &eps_hat, cur, prev, schedule, eta, Some(&z))?;
        check_state(&x, cur)?;
        push_keep(&mut states, keep, prev, x.clone());
    }
    Ok(states)
}

pub fn validate_tau(tau: &[usize], n_steps: usize) -> Result<()> {
    if tau.is_empty() {
        return Err(Error::Invalid("empty step subset".to_string()));
    }
    if *tau.last().expect("non-empty") != n_steps {
        return Err(Error::Invalid(format!(
            "step subset must end at N={}, got {:?}",
            n_steps,
            tau.last()
        )));
    }
    for w in tau.windows(2) {
        if w[1] <= w[0] {
            return Err(Error::Invalid(format!("step subset not strictly increasing: {:?}", tau)));
        }
    }
    if tau[0] == 0 {
        return Err(Error::Invalid("step subset must lie in 1..=N".to_string()));
    }
    Ok(())
}

/// Uniform-stride subset of {1..N} of size `m`, always containing N.
pub fn uniform_stride_subset(n_steps: usize, m: usize) -> Result<Vec<usize>> {
    if m == 0 || m > n_steps {
        return Err(Error::Invalid(format!("subset size {} out of 1..={}", m, n_steps)));
    }
    let tau: Vec<usize> = (1..=m)
        .map(|i| (((i * n_steps) as f64 / m as f64).round() as usize).clamp(1, n_steps))
        .collect();
    validate_tau(&tau, n_steps)?;
    Ok(tau)
}

/// Ancestral sampling conditioned on the masked window; returns the full
/// `[F, V, T]` state, callers slice the horizon.
pub fn ddpm_sample<S: Scalar, R: Rng + ?Sized>(
    denoiser: &dyn Denoiser<S>,
    window: &STGWindow<S>,
    graph: &Graph<S>,
    schedule: &NoiseSchedule,
    rng: &mut R,
) -> Result<Tensor<S>> {
    let states = ddpm_chain(denoiser, window, graph, schedule, 1, rng)?;
    Ok(states.into_iter().last().expect("chain produced states").1)
}

/// Subset sampling over `tau`; with [`EtaMode::DdpmEquivalent`] each update
/// matches the ancestral transition in distribution.
pub fn ddim_sample<S: Scalar, R: Rng + ?Sized>(
    denoiser: &dyn Denoiser<S>,
    window: &STGWindow<S>,
    graph: &Graph<S>,
    schedule: &NoiseSchedule,
    tau: &[usize],
    eta: EtaMode,
    rng: &mut R,
) -> Result<Tensor<S>> {
    let states = ddim_chain(denoiser, window, graph, schedule, tau, eta, 1, rng)?;
    Ok(states.into_iter().last().expect("chain produced states").1)
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default)]
pub enum SampleMode {
    #[default]
    Ddpm,
    Ddim,
}

/// Ensemble sampling plan: S samples from ceil(S/k) trajectories, each
/// contributing its final state and the k-1 preceding chain states.
#[derive(Debug, Clone)]
pub struct SampleConfig {
    pub s: usize,
    pub k: usize,
    pub mode: SampleMode,
    /// Subset size for [`SampleMode::Ddim`]; ignored for ancestral sampling.
    pub m: usize,
    pub eta: EtaMode,
    pub seed: u64,
}

impl Default for SampleConfig {
    fn default() -> Self {
        Self { s: 8, k: 1, mode: SampleMode::Ddpm, m: 0, eta: EtaMode::DdpmEquivalent, seed: 0 }
    }
}

/// Draw a forecast ensemble. Trajectories use independent rng streams
/// derived from `(seed, trajectory id)`, and samples are ordered by
/// trajectory id then step index, so the output never depends on execution
/// interleaving.
pub fn ensemble_sample<S: Scalar>(
    denoiser: &dyn Denoiser<S>,
    window: &STGWindow<S>,
    graph: &Graph<S>,
    schedule: &NoiseSchedule,
    cfg: &SampleConfig,
) -> Result<ForecastEnsemble<S>> {
    if cfg.s == 0 {
        return Err(Error::Invalid("ensemble size must be at least 1".to_string()));
    }
    if cfg.k == 0 || cfg.k > cfg.s {
        return Err(Error::Invalid(format!("k = {} out of 1..=S ({})", cfg.k, cfg.s)));
    }
    let chain_len = match cfg.mode {
        SampleMode::Ddpm => schedule.len(),
        SampleMode::Ddim => cfg.m,
    };
    if cfg.k > chain_len {
        return Err(Error::Invalid(format!("k = {} exceeds chain length {}", cfg.k, chain_len)));
    }
    let tau = match cfg.mode {
        SampleMode::Ddpm => Vec::new(),
        SampleMode::Ddim => uniform_stride_subset(schedule.len(), cfg.m)?,
    };
    let trajectories = cfg.s.div_ceil(cfg.k);
    let mut samples = Vec::with_capacity(trajectories * cfg.k);
    let mut provenance = Vec::with_capacity(trajectories * cfg.k);
    for traj in 0..trajectories {
        let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
        rng.set_stream(traj as u64);
        let states = match cfg.mode {
            SampleMode::Ddpm => ddpm_chain(denoiser, window, graph, schedule, cfg.k, &mut rng)?,
            SampleMode::Ddim => {
                ddim_chain(denoiser, window, graph, schedule, &tau, cfg.eta, cfg.k, &mut rng)?
            }
        };
        // most denoised first
        for (step, state) in states.into_iter().rev() {
            samples.push(state.slice_last(window.t_h, window.t_p)?);
            provenance.push(SampleProvenance { trajectory: traj, step_index: step });
        }
    }
    samples.truncate(cfg.s);
    provenance.truncate(cfg.s);
    Ok(ForecastEnsemble { samples, provenance })
}
