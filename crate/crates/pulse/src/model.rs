//! The encoder/decoder architecture and its training objectives.
//!
//! A window Y is summarized by two encoders: `f_sys` extracts system
//! information Θ = [θ, θ̃] (a time-invariant vector θ from a dilated
//! convolution stack with max pooling, plus a capacity-limited
//! time-varying scalar channel θ̃), while `f_init` extracts an initial
//! condition x0 at a chosen timepoint. A recurrent decoder driven by Θ
//! rolls the state forward and a linear head maps states back to
//! observations. Training reconstructs a window from system information
//! inferred elsewhere: either from a genuine partner window
//! (`loss_cross`) or from the window's own suffix crop (`loss_pulse`).

use serde::{Deserialize, Serialize};

use crate::autodiff::ops::{
    adaptive_max_pool_assign, bias_channels, broadcast_time, concat_channels, conv1d, gelu,
    gru_cell, index_time, linear, max_pool_time, mse_time_mean, scale, slice_time, stack_time,
    transpose12,
};
use crate::autodiff::{GruParams, Padding, Tensor};
use crate::error::{PulseError, Result};
use crate::rng;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PulseConfig {
    /// Observation channels M.
    pub channels: usize,
    /// Window length W.
    pub window: usize,
    pub enc_depth: usize,
    /// Encoder feature width D (= embedding dimension).
    pub enc_width: usize,
    pub enc_kernel: usize,
    /// Hidden channels of the two-layer head producing θ̃.
    pub tv_hidden: usize,
    /// Temporal segments of the θ̃ pooling.
    pub tv_segments: usize,
    /// When false, Θ = θ only (ablation).
    pub use_tv: bool,
    /// When true, x0 is derived from the f_sys feature stack instead of a
    /// separate window encoder (ablation).
    pub shared_encoders: bool,
    pub init_kernel: usize,
    pub init_dilation: usize,
    pub init_hidden: usize,
    /// Dimension of the extracted initial condition x0.
    pub init_dim: usize,
    pub dec_layers: usize,
    pub dec_hidden: usize,
    /// Pseudo-pair crop draws per window per step.
    pub t0_draws: usize,
    /// Parameter initialization seed.
    pub seed: u64,
}

impl Default for PulseConfig {
    fn default() -> Self {
        PulseConfig {
            channels: 3,
            window: 100,
            enc_depth: 6,
            enc_width: 64,
            enc_kernel: 3,
            tv_hidden: 32,
            tv_segments: 4,
            use_tv: true,
            shared_encoders: false,
            init_kernel: 5,
            init_dilation: 1,
            init_hidden: 64,
            init_dim: 32,
            dec_layers: 2,
            dec_hidden: 64,
            t0_draws: 3,
            seed: 0,
        }
    }
}

impl PulseConfig {
    pub fn validate(&self) -> Result<()> {
        for (name, v) in [
            ("channels", self.channels),
            ("window", self.window),
            ("enc_depth", self.enc_depth),
            ("enc_width", self.enc_width),
            ("enc_kernel", self.enc_kernel),
            ("tv_hidden", self.tv_hidden),
            ("tv_segments", self.tv_segments),
            ("init_kernel", self.init_kernel),
            ("init_dilation", self.init_dilation),
            ("init_hidden", self.init_hidden),
            ("init_dim", self.init_dim),
            ("dec_layers", self.dec_layers),
            ("dec_hidden", self.dec_hidden),
        ] {
            if v == 0 {
                return Err(PulseError::Config(format!("{name} must be positive")));
            }
        }
        if !(1..=4).contains(&self.t0_draws) {
            return Err(PulseError::Config(format!(
                "t0_draws must be in 1..=4, got {}",
                self.t0_draws
            )));
        }
        if self.tv_segments > self.window {
            return Err(PulseError::Config(format!(
                "tv_segments ({}) exceeds window ({})",
                self.tv_segments, self.window
            )));
        }
        if self.window < 2 {
            return Err(PulseError::Config("window must be at least 2".into()));
        }
        Ok(())
    }

    /// Per-step dimension of the decoder's system input.
    pub fn theta_dim(&self) -> usize {
        self.enc_width + usize::from(self.use_tv)
    }
}

/// System information extracted from a window.
pub struct SystemRepresentation {
    /// Time-invariant component θ, `[batch, D]`.
    pub theta: Tensor,
    /// Time-varying component θ̃, `[batch, 1, W]` (absent under the
    /// no-time-varying ablation).
    pub theta_tv: Option<Tensor>,
    /// Per-step decoder input `[batch, theta_dim, W]`.
    pub theta_seq: Tensor,
}

struct DecoderLayer {
    bridge_w: Tensor,
    bridge_b: Tensor,
    gru: GruParams,
}

pub struct PulseModel {
    pub cfg: PulseConfig,
    enc_kernels: Vec<Tensor>,
    enc_biases: Vec<Tensor>,
    tv_w1: Tensor,
    tv_b1: Tensor,
    tv_w2: Tensor,
    tv_b2: Tensor,
    init_w1: Tensor,
    init_b1: Tensor,
    init_w2: Tensor,
    init_b2: Tensor,
    dec: Vec<DecoderLayer>,
    out_w: Tensor,
    out_b: Tensor,
}

fn uniform_init(shape: &[usize], fan_in: usize, seed: u64, label: &str) -> Tensor {
    use rand::Rng;
    let bound = (1.0 / fan_in as f64).sqrt();
    let mut r = rng::stream(seed, label);
    let n: usize = shape.iter().product();
    let data: Vec<f64> = (0..n).map(|_| r.gen_range(-bound..bound)).collect();
    Tensor::param(shape, data).unwrap()
}

impl PulseModel {
    pub fn new(cfg: PulseConfig) -> Result<PulseModel> {
        cfg.validate()?;
        let seed = cfg.seed;
        let d = cfg.enc_width;
        let k = cfg.enc_kernel;
        let mut enc_kernels = Vec::new();
        let mut enc_biases = Vec::new();
        for l in 0..cfg.enc_depth {
            let in_ch = if l == 0 { cfg.channels } else { d };
            enc_kernels.push(uniform_init(
                &[d, in_ch, k],
                in_ch * k,
                seed,
                &format!("enc/{l}/w"),
            ));
            enc_biases.push(uniform_init(&[d], in_ch * k, seed, &format!("enc/{l}/b")));
        }
        let tv_w1 = uniform_init(&[cfg.tv_hidden, d, 1], d, seed, "tv/1/w");
        let tv_b1 = uniform_init(&[cfg.tv_hidden], d, seed, "tv/1/b");
        let tv_w2 = uniform_init(&[1, cfg.tv_hidden, 1], cfg.tv_hidden, seed, "tv/2/w");
        let tv_b2 = uniform_init(&[1], cfg.tv_hidden, seed, "tv/2/b");
        let init_in = if cfg.shared_encoders { d } else { cfg.channels };
        let ik = cfg.init_kernel;
        let init_w1 = uniform_init(
            &[cfg.init_hidden, init_in, ik],
            init_in * ik,
            seed,
            "init/1/w",
        );
        let init_b1 = uniform_init(&[cfg.init_hidden], init_in * ik, seed, "init/1/b");
        let init_w2 = uniform_init(
            &[cfg.init_dim, cfg.init_hidden, ik],
            cfg.init_hidden * ik,
            seed,
            "init/2/w",
        );
        let init_b2 = uniform_init(&[cfg.init_dim], cfg.init_hidden * ik, seed, "init/2/b");
        let h = cfg.dec_hidden;
        let mut dec = Vec::new();
        for l in 0..cfg.dec_layers {
            let in_dim = if l == 0 { cfg.theta_dim() } else { h };
            let gp = |shape: &[usize], fan_in: usize, name: &str| {
                uniform_init(shape, fan_in, seed, &format!("dec/{l}/{name}"))
            };
            dec.push(DecoderLayer {
                bridge_w: gp(&[h, cfg.init_dim], cfg.init_dim, "bridge/w"),
                bridge_b: gp(&[h], cfg.init_dim, "bridge/b"),
                gru: GruParams {
                    w_ir: gp(&[h, in_dim], in_dim, "w_ir"),
                    w_iz: gp(&[h, in_dim], in_dim, "w_iz"),
                    w_in: gp(&[h, in_dim], in_dim, "w_in"),
                    w_hr: gp(&[h, h], h, "w_hr"),
                    w_hz: gp(&[h, h], h, "w_hz"),
                    w_hn: gp(&[h, h], h, "w_hn"),
                    b_ir: gp(&[h], in_dim, "b_ir"),
                    b_iz: gp(&[h], in_dim, "b_iz"),
                    b_in: gp(&[h], in_dim, "b_in"),
                    b_hr: gp(&[h], h, "b_hr"),
                    b_hz: gp(&[h], h, "b_hz"),
                    b_hn: gp(&[h], h, "b_hn"),
                },
            });
        }
        let out_w = uniform_init(&[cfg.channels, h], h, seed, "out/w");
        let out_b = uniform_init(&[cfg.channels], h, seed, "out/b");
        Ok(PulseModel {
            cfg,
            enc_kernels,
            enc_biases,
            tv_w1,
            tv_b1,
            tv_w2,
            tv_b2,
            init_w1,
            init_b1,
            init_w2,
            init_b2,
            dec,
            out_w,
            out_b,
        })
    }

    /// All learnable tensors with stable path names, in a fixed order.
    pub fn params(&self) -> Vec<(String, Tensor)> {
        let mut out = Vec::new();
        for (l, (w, b)) in self.enc_kernels.iter().zip(&self.enc_biases).enumerate() {
            out.push((format!("enc/{l}/w"), w.clone()));
            out.push((format!("enc/{l}/b"), b.clone()));
        }
        if self.cfg.use_tv {
            out.push(("tv/1/w".into(), self.tv_w1.clone()));
            out.push(("tv/1/b".into(), self.tv_b1.clone()));
            out.push(("tv/2/w".into(), self.tv_w2.clone()));
            out.push(("tv/2/b".into(), self.tv_b2.clone()));
        }
        out.push(("init/1/w".into(), self.init_w1.clone()));
        out.push(("init/1/b".into(), self.init_b1.clone()));
        out.push(("init/2/w".into(), self.init_w2.clone()));
        out.push(("init/2/b".into(), self.init_b2.clone()));
        for (l, layer) in self.dec.iter().enumerate() {
            out.push((format!("dec/{l}/bridge/w"), layer.bridge_w.clone()));
            out.push((format!("dec/{l}/bridge/b"), layer.bridge_b.clone()));
            for (name, t) in layer.gru.tensors() {
                out.push((format!("dec/{l}/{name}"), t.clone()));
            }
        }
        out.push(("out/w".into(), self.out_w.clone()));
        out.push(("out/b".into(), self.out_b.clone()));
        out
    }

    fn check_window(&self, y: &Tensor) -> Result<()> {
        let s = y.shape();
        if s.len() != 3 || s[1] != self.cfg.window || s[2] != self.cfg.channels {
            return Err(PulseError::Dimension(format!(
                "expected window batch [*, {}, {}], got {:?}",
                self.cfg.window, self.cfg.channels, s
            )));
        }
        Ok(())
    }

    /// Dilated convolution trunk: `[batch, W, M] -> [batch, D, W]`.
    fn encoder_features(&self, y: &Tensor) -> Result<Tensor> {
        let mut x = transpose12(y)?;
        for (l, (w, b)) in self.enc_kernels.iter().zip(&self.enc_biases).enumerate() {
            let dilation = 1usize << (l % 10);
            x = gelu(&bias_channels(
                &conv1d(&x, w, dilation, Padding::SameCentered)?,
                b,
            )?);
        }
        Ok(x)
    }

    /// Extract system information from a window batch `[batch, W, M]`.
    pub fn f_sys(&self, y: &Tensor) -> Result<SystemRepresentation> {
        self.check_window(y)?;
        let feats = self.encoder_features(y)?;
        let theta = max_pool_time(&feats)?;
        let w = self.cfg.window;
        let theta_bc = broadcast_time(&theta, w)?;
        if !self.cfg.use_tv {
            return Ok(SystemRepresentation {
                theta,
                theta_tv: None,
                theta_seq: theta_bc,
            });
        }
        let h = gelu(&bias_channels(
            &conv1d(&feats, &self.tv_w1, 1, Padding::SameCentered)?,
            &self.tv_b1,
        )?);
        let tv_raw = bias_channels(
            &conv1d(&h, &self.tv_w2, 1, Padding::SameCentered)?,
            &self.tv_b2,
        )?;
        let theta_tv = adaptive_max_pool_assign(&tv_raw, self.cfg.tv_segments)?;
        let theta_seq = concat_channels(&theta_bc, &theta_tv)?;
        Ok(SystemRepresentation {
            theta,
            theta_tv: Some(theta_tv),
            theta_seq,
        })
    }

    /// Per-timestep initial-condition sequence `[batch, init_dim, W]`.
    fn init_sequence(&self, y: &Tensor) -> Result<Tensor> {
        let x = if self.cfg.shared_encoders {
            self.encoder_features(y)?
        } else {
            transpose12(y)?
        };
        let d = self.cfg.init_dilation;
        let h = gelu(&bias_channels(
            &conv1d(&x, &self.init_w1, d, Padding::SameCentered)?,
            &self.init_b1,
        )?);
        bias_channels(&conv1d(&h, &self.init_w2, d, Padding::SameCentered)?, &self.init_b2)
    }

    /// Extract the initial condition at 1-based timepoint `t0`:
    /// `[batch, init_dim]`.
    pub fn f_init(&self, y: &Tensor, t0: usize) -> Result<Tensor> {
        self.check_window(y)?;
        if !(1..=self.cfg.window).contains(&t0) {
            return Err(PulseError::Parameter(format!(
                "t0 = {t0} outside 1..={}",
                self.cfg.window
            )));
        }
        index_time(&self.init_sequence(y)?, t0 - 1)
    }

    /// Roll the decoder forward for `L` steps (the time length of
    /// `theta_seq`) from initial condition `x0`; returns `[batch, L, M]`.
    pub fn decode(&self, x0: &Tensor, theta_seq: &Tensor) -> Result<Tensor> {
        let s = theta_seq.shape();
        if s.len() != 3 || s[1] != self.cfg.theta_dim() {
            return Err(PulseError::Dimension(format!(
                "theta_seq must be [batch, {}, L], got {:?}",
                self.cfg.theta_dim(),
                s
            )));
        }
        let (batch, steps) = (s[0], s[2]);
        if x0.shape() != [batch, self.cfg.init_dim] {
            return Err(PulseError::Dimension(format!(
                "x0 must be [{batch}, {}], got {:?}",
                self.cfg.init_dim,
                x0.shape()
            )));
        }
        if steps == 0 {
            return Ok(Tensor::zeros(&[batch, 0, self.cfg.channels]));
        }
        let mut layer_inputs: Option<Vec<Tensor>> = None;
        let mut hidden_seq: Vec<Tensor> = Vec::with_capacity(steps);
        for layer in &self.dec {
            let mut h = linear(x0, &layer.bridge_w, &layer.bridge_b)?;
            hidden_seq.clear();
            for k in 0..steps {
                let input = match &layer_inputs {
                    None => index_time(theta_seq, k)?,
                    Some(prev) => prev[k].clone(),
                };
                h = gru_cell(&input, &h, &layer.gru)?;
                hidden_seq.push(h.clone());
            }
            layer_inputs = Some(hidden_seq.clone());
        }
        let outs: Vec<Tensor> = hidden_seq
            .iter()
            .map(|h| linear(h, &self.out_w, &self.out_b))
            .collect::<Result<_>>()?;
        let stacked = stack_time(&outs)?; // [batch, M, L]
        let pred = transpose12(&stacked)?;
        if !pred.all_finite() {
            return Err(PulseError::Overflow(
                "decoder produced non-finite output".into(),
            ));
        }
        Ok(pred)
    }

    /// Reconstruct `y_j` from system information of `y_i` and the initial
    /// condition of `y_j` at its first timepoint.
    pub fn loss_cross(&self, y_i: &Tensor, y_j: &Tensor) -> Result<Tensor> {
        if y_i.shape() != y_j.shape() {
            return Err(PulseError::Dimension(format!(
                "pair shapes differ: {:?} vs {:?}",
                y_i.shape(),
                y_j.shape()
            )));
        }
        let rep = self.f_sys(y_i)?;
        let x0 = self.f_init(y_j, 1)?;
        let pred = self.decode(&x0, &rep.theta_seq)?;
        mse_time_mean(&pred, y_j)
    }

    /// Pseudo-pair objective: crop the window at each drawn `t0` (1-based,
    /// restricted to the first half) and reconstruct the suffix from the
    /// full window's system information; averaged over draws.
    pub fn loss_pulse(&self, y: &Tensor, t0_draws: &[usize]) -> Result<Tensor> {
        self.check_window(y)?;
        if t0_draws.is_empty() {
            return Err(PulseError::Contract("no t0 draws supplied".into()));
        }
        let w = self.cfg.window;
        for &t0 in t0_draws {
            if !(1..=w / 2).contains(&t0) {
                return Err(PulseError::Parameter(format!(
                    "t0 = {t0} outside 1..={}",
                    w / 2
                )));
            }
        }
        let rep = self.f_sys(y)?;
        let y_t = transpose12(y)?;
        let mut total: Option<Tensor> = None;
        for &t0 in t0_draws {
            let x0 = self.f_init(y, t0)?;
            // System information for absolute positions t0+1..=W.
            let theta_slice = slice_time(&rep.theta_seq, t0, w - t0)?;
            let pred = self.decode(&x0, &theta_slice)?;
            let target = transpose12(&slice_time(&y_t, t0, w - t0)?)?;
            let term = mse_time_mean(&pred, &target)?;
            total = Some(match total {
                None => term,
                Some(acc) => crate::autodiff::ops::add(&acc, &term)?,
            });
        }
        Ok(scale(&total.unwrap(), 1.0 / t0_draws.len() as f64))
    }
}
