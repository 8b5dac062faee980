//! The denoising network: a temporal U-structure of spatio-temporal
//! residual blocks, each combining a gated causal TCN, a graph convolution
//! over the normalized adjacency, and a sinusoidal noise-level embedding.
//!
//! History condition and noisy target are concatenated along time, so the
//! network sees a `2T` axis and the prediction is read from the half
//! aligned with the noisy input.

use std::path::Path;

use rand::Rng;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use crate::diffusion::Denoiser;
use crate::error::{Error, Result};
use crate::graph::{graph_conv, Activation, Graph};
use crate::scalar::Scalar;
use crate::tensor::{Tape, Tensor, Var};

#[derive(Debug, Clone)]
pub struct UGnetConfig {
    /// Signal features per node.
    pub f: usize,
    /// Nodes.
    pub v: usize,
    /// Window length T = T_h + T_p (the network itself runs on 2T).
    pub t: usize,
    /// Hidden channels.
    pub c: usize,
    /// TCN kernel size.
    pub k: usize,
    /// Down/up levels of the U-structure.
    pub depth: usize,
    /// Noise-embedding width, must be even.
    pub d_embed: usize,
    pub gcn_activation: Activation,
    /// Double the channel width at each down level.
    pub channel_growth: bool,
    /// Ablation: identity aggregation instead of the graph convolution.
    pub no_spatial: bool,
    /// Ablation: pointwise linear map instead of the gated TCN.
    pub no_temporal: bool,
    /// Ablation: single-level network, no temporal down/upsampling.
    pub no_ustructure: bool,
}

impl UGnetConfig {
    pub fn new(f: usize, v: usize, t: usize, c: usize, k: usize, depth: usize, d_embed: usize) -> Self {
        Self {
            f,
            v,
            t,
            c,
            k,
            depth,
            d_embed,
            gcn_activation: Activation::Identity,
            channel_growth: false,
            no_spatial: false,
            no_temporal: false,
            no_ustructure: false,
        }
    }

    pub fn validate(&self) -> Result<()> {
        if self.f == 0 || self.v == 0 || self.t == 0 || self.c == 0 || self.k == 0 {
            return Err(Error::Invalid("network dimensions must be positive".to_string()));
        }
        if self.d_embed == 0 || !self.d_embed.is_multiple_of(2) {
            return Err(Error::Invalid(format!("noise embedding width {} must be even", self.d_embed)));
        }
        Ok(())
    }

    pub fn effective_depth(&self) -> usize {
        if self.no_ustructure {
            0
        } else {
            self.depth
        }
    }

    /// Concatenated time axis padded up to a multiple of 2^depth; the pad
    /// is prepended so the output half stays aligned with the noisy input.
    pub fn padded_len(&self) -> usize {
        let t2 = 2 * self.t;
        let unit = 1usize << self.effective_depth();
        t2.div_ceil(unit) * unit
    }

    pub fn pad_front(&self) -> usize {
        self.padded_len() - 2 * self.t
    }

    /// Hidden width at U level `i` (level `depth` is the bottom).
    pub fn width(&self, level: usize) -> usize {
        if self.channel_growth {
            self.c << level
        } else {
            self.c
        }
    }

    /// Time length at U level `i`.
    pub fn t_len(&self, level: usize) -> usize {
        self.padded_len() >> level
    }
}

/// Sinusoidal embedding of the noise level: interleaved
/// `cos(n / r^{2d/D}), sin(n / r^{2d/D})` pairs for d = 1..D/2, r = 10000.
pub fn noise_embedding(n: usize, d_embed: usize) -> Result<Vec<f64>> {
    if d_embed == 0 || !d_embed.is_multiple_of(2) {
        return Err(Error::Invalid(format!("embedding width {} must be even", d_embed)));
    }
    if n == 0 {
        return Err(Error::Invalid("noise level starts at 1".to_string()));
    }
    let r = 10_000.0f64;
    let d_f = d_embed as f64;
    let mut out = Vec::with_capacity(d_embed);
    for d in 1..=d_embed / 2 {
        let angle = n as f64 / r.powf(2.0 * d as f64 / d_f);
        out.push(angle.cos());
        out.push(angle.sin());
    }
    Ok(out)
}

/// Gated causal temporal convolution: conv produces the two banks P and Q,
/// output is P * sigmoid(Q). Same-length causal with left padding K-1.
pub fn gated_tcn<S: Scalar>(
    tape: &mut Tape<S>,
    h: Var,
    kernel: Var,
    bias: Var,
) -> Result<Var> {
    let k_sz = tape.value(kernel).shape()[2];
    let c_out2 = tape.value(kernel).shape()[0];
    if !c_out2.is_multiple_of(2) {
        return Err(Error::shape(
            "gated_tcn",
            format!("kernel holds both banks, needs even output channels, got {}", c_out2),
        ));
    }
    let conv = tape.conv1d(h, kernel, k_sz - 1)?;
    let biased = tape.add_vec_axis(conv, bias, 1)?;
    let parts = tape.split(biased, 1, &[c_out2 / 2, c_out2 / 2])?;
    let gate = tape.sigmoid(parts[1])?;
    tape.mul(parts[0], gate)
}

#[derive(Debug, Clone)]
struct BlockParams<S> {
    emb_w: Tensor<S>,
    emb_b: Tensor<S>,
    /// `[2C, C, K]` for the gated TCN, `[C, C, 1]` under `no_temporal`.
    tcn_w: Tensor<S>,
    tcn_b: Tensor<S>,
    gcn_w: Tensor<S>,
}

#[derive(Debug, Clone)]
struct UpParams<S> {
    /// Maps the deeper width back to this level while smoothing the
    /// nearest-neighbor upsample, `[w_i, w_{i+1}, K]`.
    smooth_w: Tensor<S>,
    smooth_b: Tensor<S>,
    block: BlockParams<S>,
}

#[derive(Debug, Clone)]
struct GrowParams<S> {
    w: Tensor<S>,
    b: Tensor<S>,
}

/// All trainable tensors of the network.
#[derive(Debug, Clone)]
pub struct UGnetParams<S> {
    proj_in_w: Tensor<S>,
    proj_in_b: Tensor<S>,
    down: Vec<BlockParams<S>>,
    /// Pointwise channel-doubling convs after each downsample; present only
    /// with `channel_growth`.
    grow: Vec<Option<GrowParams<S>>>,
    mid: BlockParams<S>,
    up: Vec<UpParams<S>>,
    proj_out_w: Tensor<S>,
    proj_out_b: Tensor<S>,
}

struct BlockVars {
    emb_w: Var,
    emb_b: Var,
    tcn_w: Var,
    tcn_b: Var,
    gcn_w: Var,
}

struct UpVars {
    smooth_w: Var,
    smooth_b: Var,
    block: BlockVars,
}

/// Tape handles of every parameter, produced by [`UGnet::register`].
pub struct UGnetVars {
    proj_in_w: Var,
    proj_in_b: Var,
    down: Vec<BlockVars>,
    grow: Vec<Option<(Var, Var)>>,
    mid: BlockVars,
    up: Vec<UpVars>,
    proj_out_w: Var,
    proj_out_b: Var,
}

impl UGnetVars {
    pub fn all(&self) -> Vec<Var> {
        let mut vars = vec![self.proj_in_w, self.proj_in_b];
        let block = |b: &BlockVars, vars: &mut Vec<Var>| {
            vars.extend([b.emb_w, b.emb_b, b.tcn_w, b.tcn_b, b.gcn_w]);
        };
        for b in &self.down {
            block(b, &mut vars);
        }
        for g in self.grow.iter().flatten() {
            vars.extend([g.0, g.1]);
        }
        block(&self.mid, &mut vars);
        for u in &self.up {
            vars.extend([u.smooth_w, u.smooth_b]);
            block(&u.block, &mut vars);
        }
        vars.extend([self.proj_out_w, self.proj_out_b]);
        vars
    }
}

/// The denoiser: configuration plus parameters.
#[derive(Debug, Clone)]
pub struct UGnet<S> {
    pub config: UGnetConfig,
    params: UGnetParams<S>,
}

fn uniform_tensor<S: Scalar, R: Rng + ?Sized>(
    shape: Vec<usize>,
    fan_in: usize,
    rng: &mut R,
) -> Tensor<S> {
    let bound = 1.0 / (fan_in as f64).sqrt();
    Tensor::from_fn(shape, |_| S::of_f64(f64::uniform_sym(rng).as_f64() * bound))
}

impl<S: Scalar> UGnet<S> {
    pub fn new(config: UGnetConfig, seed: u64) -> Result<Self> {
        config.validate()?;
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let depth = config.effective_depth();
        let c0 = config.width(0);

        let make_block = |level: usize, rng: &mut ChaCha8Rng| -> BlockParams<S> {
            let w = config.width(level);
            let cg = w * config.t_len(level);
            let tcn_w = if config.no_temporal {
                uniform_tensor(vec![w, w, 1], w, rng)
            } else {
                uniform_tensor(vec![2 * w, w, config.k], w * config.k, rng)
            };
            let tcn_out = tcn_w.shape()[0];
            BlockParams {
                emb_w: uniform_tensor(vec![w, config.d_embed], config.d_embed, rng),
                emb_b: Tensor::zeros(vec![w]),
                tcn_w,
                tcn_b: Tensor::zeros(vec![tcn_out]),
                gcn_w: uniform_tensor(vec![cg, cg], cg, rng),
            }
        };

        let proj_in_w = uniform_tensor(vec![c0, config.f, 1], config.f, &mut rng);
        let mut down = Vec::with_capacity(depth);
        let mut grow = Vec::with_capacity(depth);
        for i in 0..depth {
            down.push(make_block(i, &mut rng));
            grow.push(if config.channel_growth {
                let (wi, wi1) = (config.width(i), config.width(i + 1));
                Some(GrowParams {
                    w: uniform_tensor(vec![wi1, wi, 1], wi, &mut rng),
                    b: Tensor::zeros(vec![wi1]),
                })
            } else {
                None
            });
        }
        let mid = make_block(depth, &mut rng);
        let mut up = Vec::with_capacity(depth);
        for i in (0..depth).rev() {
            let (wi, wi1) = (config.width(i), config.width(i + 1));
            up.push(UpParams {
                smooth_w: uniform_tensor(vec![wi, wi1, config.k], wi1 * config.k, &mut rng),
                smooth_b: Tensor::zeros(vec![wi]),
                block: make_block(i, &mut rng),
            });
        }
        let proj_out_w = uniform_tensor(vec![config.f, c0, 1], c0, &mut rng);
        let params = UGnetParams {
            proj_in_w,
            proj_in_b: Tensor::zeros(vec![c0]),
            down,
            grow,
            mid,
            up,
            proj_out_w,
            proj_out_b: Tensor::zeros(vec![config.f]),
        };
        Ok(Self { config, params })
    }

    /// Deterministic zero-parameter network, used by tests.
    pub fn zeroed(config: UGnetConfig) -> Result<Self> {
        let mut net = Self::new(config, 0)?;
        for (_, t) in net.named_tensors_mut() {
            for x in t.data_mut() {
                *x = S::zero();
            }
        }
        Ok(net)
    }

    /// Stable (name, tensor) listing; the order defines the optimizer
    /// state layout and the checkpoint manifest.
    pub fn named_tensors(&self) -> Vec<(String, &Tensor<S>)> {
        let mut out: Vec<(String, &Tensor<S>)> = vec![
            ("proj_in.weight".to_string(), &self.params.proj_in_w),
            ("proj_in.bias".to_string(), &self.params.proj_in_b),
        ];
        fn block<'a, S>(prefix: &str, b: &'a BlockParams<S>) -> Vec<(String, &'a Tensor<S>)> {
            vec![
                (format!("{prefix}.emb.weight"), &b.emb_w),
                (format!("{prefix}.emb.bias"), &b.emb_b),
                (format!("{prefix}.tcn.weight"), &b.tcn_w),
                (format!("{prefix}.tcn.bias"), &b.tcn_b),
                (format!("{prefix}.gcn.weight"), &b.gcn_w),
            ]
        }
        for (i, b) in self.params.down.iter().enumerate() {
            out.extend(block(&format!("down{i}"), b));
        }
        for (i, g) in self.params.grow.iter().enumerate() {
            if let Some(g) = g {
                out.push((format!("grow{i}.weight"), &g.w));
                out.push((format!("grow{i}.bias"), &g.b));
            }
        }
        out.extend(block("mid", &self.params.mid));
        for (i, u) in self.params.up.iter().enumerate() {
            out.push((format!("up{i}.smooth.weight"), &u.smooth_w));
            out.push((format!("up{i}.smooth.bias"), &u.smooth_b));
            out.extend(block(&format!("up{i}"), &u.block));
        }
        out.push(("proj_out.weight".to_string(), &self.params.proj_out_w));
        out.push(("proj_out.bias".to_string(), &self.params.proj_out_b));
        out
    }

    pub fn named_tensors_mut(&mut self) -> Vec<(String, &mut Tensor<S>)> {
        let mut out: Vec<(String, &mut Tensor<S>)> = vec![
            ("proj_in.weight".to_string(), &mut self.params.proj_in_w),
            ("proj_in.bias".to_string(), &mut self.params.proj_in_b),
        ];
        fn block<'a, S>(prefix: &str, b: &'a mut BlockParams<S>) -> Vec<(String, &'a mut Tensor<S>)> {
            vec![
                (format!("{prefix}.emb.weight"), &mut b.emb_w),
                (format!("{prefix}.emb.bias"), &mut b.emb_b),
                (format!("{prefix}.tcn.weight"), &mut b.tcn_w),
                (format!("{prefix}.tcn.bias"), &mut b.tcn_b),
                (format!("{prefix}.gcn.weight"), &mut b.gcn_w),
            ]
        }
        for (i, b) in self.params.down.iter_mut().enumerate() {
            out.extend(block(&format!("down{i}"), b));
        }
        for (i, g) in self.params.grow.iter_mut().enumerate() {
            if let Some(g) = g {
                out.push((format!("grow{i}.weight"), &mut g.w));
                out.push((format!("grow{i}.bias"), &mut g.b));
            }
        }
        out.extend(block("mid", &mut self.params.mid));
        for (i, u) in self.params.up.iter_mut().enumerate() {
            out.push((format!("up{i}.smooth.weight"), &mut u.smooth_w));
            out.push((format!("up{i}.smooth.bias"), &mut u.smooth_b));
            out.extend(block(&format!("up{i}"), &mut u.block));
        }
        out.push(("proj_out.weight".to_string(), &mut self.params.proj_out_w));
        out.push(("proj_out.bias".to_string(), &mut self.params.proj_out_b));
        out
    }

    pub fn parameter_count(&self) -> usize {
        self.named_tensors().iter().map(|(_, t)| t.numel()).sum()
    }

    /// Register every parameter on the tape.
    pub fn register(&self, tape: &mut Tape<S>, requires_grad: bool) -> UGnetVars {
        let reg = |tape: &mut Tape<S>, t: &Tensor<S>| tape.input(t.clone(), requires_grad);
        let block = |tape: &mut Tape<S>, b: &BlockParams<S>| BlockVars {
            emb_w: reg(tape, &b.emb_w),
            emb_b: reg(tape, &b.emb_b),
            tcn_w: reg(tape, &b.tcn_w),
            tcn_b: reg(tape, &b.tcn_b),
            gcn_w: reg(tape, &b.gcn_w),
        };
        UGnetVars {
            proj_in_w: reg(tape, &self.params.proj_in_w),
            proj_in_b: reg(tape, &self.params.proj_in_b),
            down: self.params.down.iter().map(|b| block(tape, b)).collect(),
            grow: self
                .params
                .grow
                .iter()
                .map(|g| g.as_ref().map(|g| (reg(tape, &g.w), reg(tape, &g.b))))
                .collect(),
            mid: block(tape, &self.params.mid),
            up: self
                .params
                .up
                .iter()
                .map(|u| UpVars {
                    smooth_w: reg(tape, &u.smooth_w),
                    smooth_b: reg(tape, &u.smooth_b),
                    block: block(tape, &u.block),
                })
                .collect(),
            proj_out_w: reg(tape, &self.params.proj_out_w),
            proj_out_b: reg(tape, &self.params.proj_out_b),
        }
    }

    fn st_block(
        &self,
        tape: &mut Tape<S>,
        graph: &Graph<S>,
        vars: &BlockVars,
        h: Var,
        emb: Var,
    ) -> Result<Var> {
        let sh = tape.value(h).shape().to_vec();
        let (v_n, c_b, t_b) = (sh[0], sh[1], sh[2]);
        // per-channel bias from the noise level
        let emb_proj = tape.matmul(vars.emb_w, emb)?;
        let emb_flat = tape.reshape(emb_proj, vec![c_b])?;
        let emb_vec = tape.add(emb_flat, vars.emb_b)?;
        let hb = tape.add_vec_axis(h, emb_vec, 1)?;

        let t_out = if self.config.no_temporal {
            let lin = tape.conv1d(hb, vars.tcn_w, 0)?;
            tape.add_vec_axis(lin, vars.tcn_b, 1)?
        } else {
            gated_tcn(tape, hb, vars.tcn_w, vars.tcn_b)?
        };

        let flat = tape.reshape(t_out, vec![v_n, c_b * t_b])?;
        let g_out = if self.config.no_spatial {
            let hw = tape.matmul(flat, vars.gcn_w)?;
            match self.config.gcn_activation {
                Activation::Identity => hw,
                Activation::Relu => tape.relu(hw)?,
            }
        } else {
            graph_conv(tape, graph, flat, vars.gcn_w, self.config.gcn_activation)?
        };
        let g_re = tape.reshape(g_out, vec![v_n, c_b, t_b])?;
        tape.add(h, g_re)
    }

    /// Full forward pass on the tape: predicts the injected noise for
    /// `x_n` under the masked condition at noise level `n`.
    pub fn forward(
        &self,
        tape: &mut Tape<S>,
        vars: &UGnetVars,
        graph: &Graph<S>,
        x_n: Var,
        x_msk: Var,
        n: usize,
    ) -> Result<Var> {
        let cfg = &self.config;
        let expect = vec![cfg.f, cfg.v, cfg.t];
        if tape.value(x_n).shape() != expect.as_slice() || tape.value(x_msk).shape() != expect.as_slice() {
            return Err(Error::shape(
                "ugnet",
                format!(
                    "inputs {:?} / {:?} do not match configured {:?}",
                    tape.value(x_n).shape(),
                    tape.value(x_msk).shape(),
                    expect
                ),
            ));
        }
        if graph.node_count() != cfg.v {
            return Err(Error::shape(
                "ugnet",
                format!("graph has {} nodes, configured {}", graph.node_count(), cfg.v),
            ));
        }
        let emb_values = noise_embedding(n, cfg.d_embed)?;
        let emb = tape.constant(Tensor::from_vec(
            vec![cfg.d_embed, 1],
            emb_values.into_iter().map(S::of_f64).collect(),
        )?);

        // condition first, noisy target last, so the output slice aligns
        let mut h = tape
            .concat(&[x_msk, x_n], 2)
            .map_err(|e| e.context("input concat"))?;
        if cfg.pad_front() > 0 {
            let pad = tape.constant(Tensor::zeros(vec![cfg.f, cfg.v, cfg.pad_front()]));
            h = tape.concat(&[pad, h], 2).map_err(|e| e.context("front pad"))?;
        }
        let h_nodes = tape.permute(h, &[1, 0, 2])?;
        let mut cur = tape
            .conv1d(h_nodes, vars.proj_in_w, 0)
            .and_then(|c| tape.add_vec_axis(c, vars.proj_in_b, 1))
            .map_err(|e| e.context("input projection"))?;

        let depth = cfg.effective_depth();
        let mut skips = Vec::with_capacity(depth);
        for i in 0..depth {
            cur = self
                .st_block(tape, graph, &vars.down[i], cur, emb)
                .map_err(|e| e.context(format!("down block {i}")))?;
            skips.push(cur);
            cur = tape.downsample(cur, 2)?;
            if let Some((gw, gb)) = &vars.grow[i] {
                cur = tape
                    .conv1d(cur, *gw, 0)
                    .and_then(|c| tape.add_vec_axis(c, *gb, 1))
                    .map_err(|e| e.context(format!("grow conv {i}")))?;
            }
        }
        cur = self
            .st_block(tape, graph, &vars.mid, cur, emb)
            .map_err(|e| e.context("bottom block"))?;
        for (step, u) in vars.up.iter().enumerate() {
            let level = depth - 1 - step;
            cur = tape.upsample_repeat(cur, 2)?;
            cur = tape
                .conv1d(cur, u.smooth_w, cfg.k - 1)
                .and_then(|c| tape.add_vec_axis(c, u.smooth_b, 1))
                .map_err(|e| e.context(format!("up smoothing {level}")))?;
            cur = tape
                .add(cur, skips[level])
                .map_err(|e| e.context(format!("skip connection {level}")))?;
            cur = self
                .st_block(tape, graph, &u.block, cur, emb)
                .map_err(|e| e.context(format!("up block {level}")))?;
        }
        let out = tape
            .conv1d(cur, vars.proj_out_w, 0)
            .and_then(|c| tape.add_vec_axis(c, vars.proj_out_b, 1))
            .map_err(|e| e.context("output projection"))?;
        let out_fvt = tape.permute(out, &[1, 0, 2])?;
        // keep the half aligned with x_n
        let full = cfg.padded_len();
        tape.slice(out_fvt, 2, full - cfg.t, cfg.t)
    }
}

impl<S: Scalar> Denoiser<S> for UGnet<S> {
    fn denoise(
        &self,
        x_n: &Tensor<S>,
        x_msk: &Tensor<S>,
        n: usize,
        graph: &Graph<S>,
    ) -> Result<Tensor<S>> {
        let mut tape = Tape::new();
        let vars = self.register(&mut tape, false);
        let xv = tape.constant(x_n.clone());
        let mv = tape.constant(x_msk.clone());
        let out = self.forward(&mut tape, &vars, graph, xv, mv, n)?;
        Ok(tape.value(out).clone())
    }
}

fn config_to_lines(c: &UGnetConfig) -> String {
    let act = match c.gcn_activation {
        Activation::Identity => "identity",
        Activation::Relu => "relu",
    };
    format!(
        "ugnet.f = {}\nugnet.v = {}\nugnet.t = {}\nugnet.c = {}\nugnet.k = {}\nugnet.depth = {}\n\
         ugnet.d_embed = {}\nugnet.gcn_activation = {}\nugnet.channel_growth = {}\n\
         ugnet.no_spatial = {}\nugnet.no_temporal = {}\nugnet.no_ustructure = {}\n",
        c.f,
        c.v,
        c.t,
        c.c,
        c.k,
        c.depth,
        c.d_embed,
        act,
        c.channel_growth,
        c.no_spatial,
        c.no_temporal,
        c.no_ustructure
    )
}

fn sanitize(name: &str) -> String {
    name.replace('.', "_")
}

/// Write the checkpoint: a manifest naming the configuration and every
/// tensor file, plus one `.f32`/`.shape` pair per tensor.
pub fn save_checkpoint<S: Scalar>(dir: &Path, net: &UGnet<S>) -> Result<()> {
    std::fs::create_dir_all(dir)?;
    let mut manifest = config_to_lines(&net.config);
    for (name, tensor) in net.named_tensors() {
        let base = sanitize(&name);
        tensor.save(&dir.join(&base))?;
        manifest.push_str(&format!("tensor {} {}\n", name, base));
    }
    std::fs::write(dir.join("manifest.txt"), manifest)?;
    Ok(())
}

pub fn load_checkpoint<S: Scalar>(dir: &Path) -> Result<UGnet<S>> {
    let manifest_path = dir.join("manifest.txt");
    let text = std::fs::read_to_string(&manifest_path)
        .map_err(|e| Error::Data(format!("{}: {}", manifest_path.display(), e)))?;
    let mut kv = std::collections::HashMap::new();
    let mut tensor_files = Vec::new();
    for line in text.lines() {
        let line = line.trim();
        if line.is_empty() {
            continue;
        }
        if let Some(rest) = line.strip_prefix("tensor ") {
            let mut parts = rest.split_whitespace();
            let name = parts.next().ok_or_else(|| Error::Data("manifest tensor line missing name".into()))?;
            let file = parts.next().ok_or_else(|| Error::Data("manifest tensor line missing file".into()))?;
            tensor_files.push((name.to_string(), file.to_string()));
        } else if let Some((key, value)) = line.split_once('=') {
            kv.insert(key.trim().to_string(), value.trim().to_string());
        }
    }
    let get = |key: &str| -> Result<String> {
        kv.get(key).cloned().ok_or_else(|| Error::Data(format!("manifest missing '{}'", key)))
    };
    let parse_usize = |key: &str| -> Result<usize> {
        get(key)?.parse().map_err(|_| Error::Data(format!("manifest: bad integer for '{}'", key)))
    };
    let parse_bool = |key: &str| -> Result<bool> {
        get(key)?.parse().map_err(|_| Error::Data(format!("manifest: bad bool for '{}'", key)))
    };
    let mut config = UGnetConfig::new(
        parse_usize("ugnet.f")?,
        parse_usize("ugnet.v")?,
        parse_usize("ugnet.t")?,
        parse_usize("ugnet.c")?,
        parse_usize("ugnet.k")?,
        parse_usize("ugnet.depth")?,
        parse_usize("ugnet.d_embed")?,
    );
    config.gcn_activation = match get("ugnet.gcn_activation")?.as_str() {
        "identity" => Activation::Identity,
        "relu" => Activation::Relu,
        other => return Err(Error::Data(format!("manifest: unknown activation '{}'", other))),
    };
    config.channel_growth = parse_bool("ugnet.channel_growth")?;
    config.no_spatial = parse_bool("ugnet.no_spatial")?;
    config.no_temporal = parse_bool("ugnet.no_temporal")?;
    config.no_ustructure = parse_bool("ugnet.no_ustructure")?;

    let mut net = UGnet::<S>::new(config, 0)?;
    let mut loaded = std::collections::HashMap::new();
    for (name, file) in tensor_files {
        let tensor = Tensor::<S>::load(&dir.join(file))?;
        if !tensor.all_finite() {
            return Err(Error::NonFinite(format!("checkpoint tensor '{}'", name)));
        }
        loaded.insert(name, tensor);
    }
    for (name, tensor) in net.named_tensors_mut() {
        let found = loaded
            .remove(&name)
            .ok_or_else(|| Error::Data(format!("checkpoint missing tensor '{}'", name)))?;
        if found.shape() != tensor.shape() {
            return Err(Error::Data(format!(
                "checkpoint tensor '{}' has shape {:?}, expected {:?}",
                name,
                found.shape(),
                tensor.shape()
            )));
        }
        *tensor = found;
    }
    if !loaded.is_empty() {
        let extra: Vec<String> = loaded.keys().cloned().collect();
        return Err(Error::Data(format!("checkpoint has unknown tensors: {:?}", extra)));
    }
    Ok(net)
}
