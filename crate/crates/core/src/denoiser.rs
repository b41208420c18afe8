//! The conditional denoising network: a UNet over the stacked target frames
//! with a residual CNN condition encoder injected through cross-attention.
//!
//! Target frames are stacked along channels so a 2-D UNet handles the whole
//! sequence; temporal structure enters through channel mixing and the
//! condition tokens. One model class serves both noise prediction and
//! velocity prediction; the regime is a constructor flag.

use ndarray::{Array2, Array3, Array4, ArrayD};
use rand::SeedableRng;
use rand_chacha::ChaCha12Rng;
use serde::{Deserialize, Serialize};

use crate::autodiff::{Graph, NodeId, Tensor};
use crate::error::{Error, Result};
use crate::nn::{ones, xavier_uniform, zeros, ParamStore};

/// What the network's output means.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize, Default)]
#[serde(rename_all = "snake_case")]
pub enum PredictionRegime {
    /// Predicts the forward-process noise (score-based training).
    #[default]
    Epsilon,
    /// Predicts the straight-line interpolant velocity (flow matching).
    Velocity,
}

#[derive(Debug, Clone, Serialize, Deserialize, PartialEq)]
#[serde(deny_unknown_fields)]
pub struct DenoiserConfig {
    pub base_channels: usize,
    pub channel_mults: Vec<usize>,
    pub n_res_blocks: usize,
    /// Spatial side lengths at which cross-attention is applied.
    pub attention_resolutions: Vec<usize>,
    pub cond_embed_dim: usize,
    pub time_embed_dim: usize,
    pub target_frames: usize,
    pub context_frames: usize,
    pub height: usize,
    pub width: usize,
    /// Stride-2 stages in the condition encoder (token grid = H >> this).
    pub cond_token_pools: usize,
    pub norm_groups: usize,
    pub regime: PredictionRegime,
}

impl Default for DenoiserConfig {
    fn default() -> Self {
        Self {
            base_channels: 32,
            channel_mults: vec![1, 2, 4],
            n_res_blocks: 2,
            attention_resolutions: vec![16, 8],
            cond_embed_dim: 64,
            time_embed_dim: 64,
            target_frames: 8,
            context_frames: 4,
            height: 32,
            width: 32,
            cond_token_pools: 2,
            norm_groups: 8,
            regime: PredictionRegime::Epsilon,
        }
    }
}

impl DenoiserConfig {
    /// Tiny configuration for gradient checks; well under 5e4 parameters.
    pub fn micro() -> Self {
        Self {
            base_channels: 4,
            channel_mults: vec![1],
            n_res_blocks: 1,
            attention_resolutions: vec![8],
            cond_embed_dim: 8,
            time_embed_dim: 8,
            target_frames: 2,
            context_frames: 2,
            height: 8,
            width: 8,
            cond_token_pools: 1,
            norm_groups: 2,
            regime: PredictionRegime::Epsilon,
        }
    }

    /// Small configuration sized for CPU training on the 32x32 task.
    pub fn toy() -> Self {
        Self {
            base_channels: 16,
            channel_mults: vec![1, 2],
            n_res_blocks: 1,
            attention_resolutions: vec![16],
            cond_embed_dim: 32,
            time_embed_dim: 32,
            target_frames: 8,
            context_frames: 4,
            height: 32,
            width: 32,
            cond_token_pools: 2,
            norm_groups: 4,
            regime: PredictionRegime::Epsilon,
        }
    }

    pub fn validate(&self) -> Result<()> {
        if self.base_channels == 0
            || self.channel_mults.is_empty()
            || self.n_res_blocks == 0
            || self.cond_embed_dim == 0
            || self.time_embed_dim == 0
            || self.target_frames == 0
            || self.context_frames == 0
        {
            return Err(Error::config("denoiser config fields must be positive"));
        }
        if self.base_channels % self.norm_groups != 0 {
            return Err(Error::config(format!(
                "norm_groups {} must divide base_channels {}",
                self.norm_groups, self.base_channels
            )));
        }
        let levels = self.channel_mults.len();
        let down = 1usize << (levels - 1);
        if self.height % down != 0 || self.width % down != 0 {
            return Err(Error::config(format!(
                "grid {}x{} not divisible by 2^{}",
                self.height,
                self.width,
                levels - 1
            )));
        }
        let feasible: Vec<usize> = (0..levels).map(|i| self.height >> i).collect();
        for r in &self.attention_resolutions {
            if !feasible.contains(r) {
                return Err(Error::config(format!(
                    "attention resolution {r} not among feasible sizes {feasible:?}"
                )));
            }
        }
        if self.height >> self.cond_token_pools == 0 || self.width >> self.cond_token_pools == 0 {
            return Err(Error::config("cond_token_pools collapses the token grid"));
        }
        if self.time_embed_dim % 2 != 0 {
            return Err(Error::config("time_embed_dim must be even"));
        }
        Ok(())
    }
}

/// Condition summary produced by the CNN encoder.
#[derive(Debug, Clone)]
pub struct ConditionEmbedding {
    /// `[B, L, D]` tokens used as cross-attention keys/values.
    pub tokens: Array3<f64>,
    /// `[B, D]` mean-pooled token vector.
    pub pooled: Array2<f64>,
}

/// Anything that predicts noise/velocity inside an autodiff graph.
///
/// Trainable evaluation registers parameters as named graph leaves; frozen
/// evaluation feeds them through as constants so no gradient flows.
pub trait DenoiseModel: Sync {
    fn predict_into(
        &self,
        g: &mut Graph,
        y_t: NodeId,
        t: &[f64],
        context: &Array4<f64>,
        trainable: bool,
    ) -> Result<NodeId>;

    /// (target_frames, H, W)
    fn target_shape(&self) -> (usize, usize, usize);
}

#[derive(Debug, Clone)]
pub struct Denoiser {
    pub config: DenoiserConfig,
    pub params: ParamStore,
}

/// Sinusoidal position features of a scalar time value.
pub fn sinusoidal_embedding(t: f64, dim: usize) -> Vec<f64> {
    let half = dim / 2;
    let mut out = Vec::with_capacity(dim);
    for i in 0..half {
        let freq = (10_000.0_f64).powf(-(i as f64) / half as f64);
        out.push((t * freq).sin());
        out.push((t * freq).cos());
    }
    out
}

struct Namer;

impl Namer {
    fn res(prefix: &str, i: usize) -> String {
        format!("{prefix}.res{i}")
    }
    fn attn(prefix: &str, i: usize) -> String {
        format!("{prefix}.attn{i}")
    }
}

impl Denoiser {
    /// Initializes all parameters deterministically from `seed`.
    pub fn init(config: DenoiserConfig, seed: u64) -> Result<Self> {
        config.validate()?;
        let mut rng = ChaCha12Rng::seed_from_u64(seed);
        let mut p = ParamStore::new();
        let cfg = &config;
        let d = cfg.cond_embed_dim;
        let temb_in = cfg.time_embed_dim;
        let temb = 4 * cfg.time_embed_dim;

        let conv = |p: &mut ParamStore, rng: &mut ChaCha12Rng, name: &str, co: usize, ci: usize, k: usize, gain: f64| {
            let fan_in = ci * k * k;
            let fan_out = co * k * k;
            p.insert(format!("{name}.w"), xavier_uniform(rng, &[co, ci, k, k], fan_in, fan_out, gain));
            p.insert(format!("{name}.b"), zeros(&[co]));
        };
        let lin = |p: &mut ParamStore, rng: &mut ChaCha12Rng, name: &str, dout: usize, din: usize, gain: f64, bias: bool| {
            p.insert(format!("{name}.w"), xavier_uniform(rng, &[dout, din], din, dout, gain));
            if bias {
                p.insert(format!("{name}.b"), zeros(&[dout]));
            }
        };
        let norm = |p: &mut ParamStore, name: &str, ch: usize| {
            p.insert(format!("{name}.g"), ones(&[ch]));
            p.insert(format!("{name}.b"), zeros(&[ch]));
        };
        let res_block = |p: &mut ParamStore, rng: &mut ChaCha12Rng, name: &str, cin: usize, cout: usize| {
            norm(p, &format!("{name}.norm1"), cin);
            conv(p, rng, &format!("{name}.conv1"), cout, cin, 3, 1.0);
            lin(p, rng, &format!("{name}.temb"), cout, temb, 1.0, true);
            norm(p, &format!("{name}.norm2"), cout);
            conv(p, rng, &format!("{name}.conv2"), cout, cout, 3, 0.2);
            if cin != cout {
                conv(p, rng, &format!("{name}.skip"), cout, cin, 1, 1.0);
            }
        };
        let attn_block = |p: &mut ParamStore, rng: &mut ChaCha12Rng, name: &str, ch: usize| {
            norm(p, &format!("{name}.norm"), ch);
            lin(p, rng, &format!("{name}.q"), d, ch, 1.0, false);
            lin(p, rng, &format!("{name}.k"), d, d, 1.0, false);
            lin(p, rng, &format!("{name}.v"), d, d, 1.0, false);
            lin(p, rng, &format!("{name}.proj"), ch, d, 0.2, true);
        };

        // Time embedding MLP.
        lin(&mut p, &mut rng, "time.fc1", temb, temb_in, 1.0, true);
        lin(&mut p, &mut rng, "time.fc2", temb, temb, 1.0, true);

        // Condition encoder: stem, stride-2 residual stages, token projection.
        let mut ech = cfg.base_channels;
        conv(&mut p, &mut rng, "enc.stem", ech, cfg.context_frames, 3, 1.0);
        for s in 0..cfg.cond_token_pools {
            let next = (ech * 2).min(4 * cfg.base_channels);
            norm(&mut p, &format!("enc.down{s}.norm"), ech);
            conv(&mut p, &mut rng, &format!("enc.down{s}.conv"), next, ech, 3, 1.0);
            norm(&mut p, &format!("enc.down{s}.rnorm"), next);
            conv(&mut p, &mut rng, &format!("enc.down{s}.rconv"), next, next, 3, 0.2);
            ech = next;
        }
        conv(&mut p, &mut rng, "enc.proj", d, ech, 1, 1.0);

        // UNet.
        conv(&mut p, &mut rng, "in", cfg.base_channels, cfg.target_frames, 3, 1.0);
        let mut ch = cfg.base_channels;
        let mut res_side = cfg.height;
        let mut skip_chs: Vec<usize> = vec![ch];
        for (li, mult) in cfg.channel_mults.iter().enumerate() {
            let out_ch = cfg.base_channels * mult;
            let prefix = format!("down{li}");
            for ri in 0..cfg.n_res_blocks {
                res_block(&mut p, &mut rng, &Namer::res(&prefix, ri), ch, out_ch);
                ch = out_ch;
                if cfg.attention_resolutions.contains(&res_side) {
                    attn_block(&mut p, &mut rng, &Namer::attn(&prefix, ri), ch);
                }
                skip_chs.push(ch);
            }
            if li + 1 != cfg.channel_mults.len() {
                conv(&mut p, &mut rng, &format!("{prefix}.down"), ch, ch, 3, 1.0);
                skip_chs.push(ch);
                res_side /= 2;
            }
        }
        res_block(&mut p, &mut rng, "mid.res0", ch, ch);
        attn_block(&mut p, &mut rng, "mid.attn", ch);
        res_block(&mut p, &mut rng, "mid.res1", ch, ch);
        for (li, mult) in cfg.channel_mults.iter().enumerate().rev() {
            let out_ch = cfg.base_channels * mult;
            let prefix = format!("up{li}");
            for ri in 0..=cfg.n_res_blocks {
                let skip_ch = skip_chs.pop().expect("skip stack in sync");
                res_block(&mut p, &mut rng, &Namer::res(&prefix, ri), ch + skip_ch, out_ch);
                ch = out_ch;
                if cfg.attention_resolutions.contains(&res_side) {
                    attn_block(&mut p, &mut rng, &Namer::attn(&prefix, ri), ch);
                }
            }
            if li != 0 {
                conv(&mut p, &mut rng, &format!("{prefix}.up"), ch, ch, 3, 1.0);
                res_side *= 2;
            }
        }
        norm(&mut p, "out.norm", ch);
        conv(&mut p, &mut rng, "out.conv", cfg.target_frames, ch, 3, 0.1);

        Ok(Self { config, params: p })
    }

    pub fn n_params(&self) -> usize {
        self.params.n_scalars()
    }

    fn bind(&self, g: &mut Graph, name: &str, trainable: bool) -> Result<NodeId> {
        let value = self.params.get(name)?.clone();
        Ok(if trainable { g.param(name, value) } else { g.constant(value) })
    }

    fn group_norm(&self, g: &mut Graph, x: NodeId, name: &str, trainable: bool) -> Result<NodeId> {
        let ch = g.shape(x)[1];
        let groups = if ch % self.config.norm_groups == 0 { self.config.norm_groups } else { 1 };
        let gamma = self.bind(g, &format!("{name}.g"), trainable)?;
        let beta = self.bind(g, &format!("{name}.b"), trainable)?;
        Ok(g.group_norm(x, gamma, beta, groups, 1e-5))
    }

    fn conv(&self, g: &mut Graph, x: NodeId, name: &str, stride: usize, pad: usize, trainable: bool) -> Result<NodeId> {
        let w = self.bind(g, &format!("{name}.w"), trainable)?;
        let b = self.bind(g, &format!("{name}.b"), trainable)?;
        Ok(g.conv2d(x, w, Some(b), stride, pad))
    }

    fn linear(&self, g: &mut Graph, x: NodeId, name: &str, bias: bool, trainable: bool) -> Result<NodeId> {
        let w = self.bind(g, &format!("{name}.w"), trainable)?;
        let b = if bias { Some(self.bind(g, &format!("{name}.b"), trainable)?) } else { None };
        Ok(g.linear(x, w, b))
    }

    fn res_block(
        &self,
        g: &mut Graph,
        x: NodeId,
        temb: NodeId,
        name: &str,
        out_ch: usize,
        trainable: bool,
    ) -> Result<NodeId> {
        let in_ch = g.shape(x)[1];
        let h = self.group_norm(g, x, &format!("{name}.norm1"), trainable)?;
        let h = g.silu(h);
        let h = self.conv(g, h, &format!("{name}.conv1"), 1, 1, trainable)?;
        let t = g.silu(temb);
        let t = self.linear(g, t, &format!("{name}.temb"), true, trainable)?;
        let h = g.add_broadcast_bc(h, t);
        let h = self.group_norm(g, h, &format!("{name}.norm2"), trainable)?;
        let h = g.silu(h);
        let h = self.conv(g, h, &format!("{name}.conv2"), 1, 1, trainable)?;
        let skip = if in_ch != out_ch {
            self.conv(g, x, &format!("{name}.skip"), 1, 0, trainable)?
        } else {
            x
        };
        Ok(g.add(h, skip))
    }

    fn attn_block(
        &self,
        g: &mut Graph,
        x: NodeId,
        tokens: NodeId,
        name: &str,
        trainable: bool,
    ) -> Result<NodeId> {
        let shape = g.shape(x).to_vec();
        let (b, ch, h, w) = (shape[0], shape[1], shape[2], shape[3]);
        let d = self.config.cond_embed_dim;
        let xn = self.group_norm(g, x, &format!("{name}.norm"), trainable)?;
        // [B,C,H,W] -> [B, HW, C]
        let flat = g.reshape(xn, &[b, ch, h * w]);
        let tok_x = g.permute(flat, &[0, 2, 1]);
        let q = self.linear(g, tok_x, &format!("{name}.q"), false, trainable)?;
        let k = self.linear(g, tokens, &format!("{name}.k"), false, trainable)?;
        let v = self.linear(g, tokens, &format!("{name}.v"), false, trainable)?;
        let scores = g.bmm(q, k, true);
        let scaled = g.scale(scores, 1.0 / (d as f64).sqrt());
        let attn = g.softmax_last(scaled);
        let out = g.bmm(attn, v, false);
        let proj = self.linear(g, out, &format!("{name}.proj"), true, trainable)?;
        // [B, HW, C] -> [B,C,H,W]
        let back = g.permute(proj, &[0, 2, 1]);
        let back = g.reshape(back, &[b, ch, h, w]);
        Ok(g.add(x, back))
    }

    /// Builds the condition token pathway inside the graph.
    fn encode_tokens(&self, g: &mut Graph, context: &Array4<f64>, trainable: bool) -> Result<NodeId> {
        let cfg = &self.config;
        let (b, tc, h, w) = context.dim();
        if tc != cfg.context_frames || h != cfg.height || w != cfg.width {
            return Err(Error::parameter(format!(
                "context shape [{b},{tc},{h},{w}] does not match configured [{},{},{}]",
                cfg.context_frames, cfg.height, cfg.width
            )));
        }
        let x = g.constant(context.clone().into_dyn());
        let mut hnode = self.conv(g, x, "enc.stem", 1, 1, trainable)?;
        for s in 0..cfg.cond_token_pools {
            let n = self.group_norm(g, hnode, &format!("enc.down{s}.norm"), trainable)?;
            let n = g.silu(n);
            let down = self.conv(g, n, &format!("enc.down{s}.conv"), 2, 1, trainable)?;
            let r = self.group_norm(g, down, &format!("enc.down{s}.rnorm"), trainable)?;
            let r = g.silu(r);
            let r = self.conv(g, r, &format!("enc.down{s}.rconv"), 1, 1, trainable)?;
            hnode = g.add(down, r);
        }
        let proj = self.conv(g, hnode, "enc.proj", 1, 0, trainable)?;
        let shape = g.shape(proj).to_vec();
        let (bb, d, th, tw) = (shape[0], shape[1], shape[2], shape[3]);
        let flat = g.reshape(proj, &[bb, d, th * tw]);
        Ok(g.permute(flat, &[0, 2, 1]))
    }

    /// Evaluates the condition encoder and returns concrete tokens (the
    /// non-graph surface used for inspection and tests).
    pub fn encode_condition(&self, context: &Array4<f64>) -> Result<ConditionEmbedding> {
        let mut g = Graph::new();
        let tokens = self.encode_tokens(&mut g, context, false)?;
        g.check_finite(tokens, 0, "condition embedding")?;
        let value = g.value(tokens);
        let shape = value.shape().to_vec();
        let tokens3: Array3<f64> = value
            .clone()
            .into_dimensionality::<ndarray::Ix3>()
            .map_err(|e| Error::parameter(format!("token shape: {e}")))?;
        let mut pooled = Array2::<f64>::zeros((shape[0], shape[2]));
        for bi in 0..shape[0] {
            for di in 0..shape[2] {
                let mut s = 0.0;
                for li in 0..shape[1] {
                    s += tokens3[[bi, li, di]];
                }
                pooled[[bi, di]] = s / shape[1] as f64;
            }
        }
        Ok(ConditionEmbedding { tokens: tokens3, pooled })
    }

    /// Full forward pass; `t` holds one time value per batch element
    /// (discrete step index for the epsilon regime, [0,1] for velocity).
    pub fn forward(
        &self,
        g: &mut Graph,
        y_t: NodeId,
        t: &[f64],
        context: &Array4<f64>,
        trainable: bool,
    ) -> Result<NodeId> {
        let cfg = &self.config;
        let shape = g.shape(y_t).to_vec();
        if shape.len() != 4
            || shape[1] != cfg.target_frames
            || shape[2] != cfg.height
            || shape[3] != cfg.width
        {
            return Err(Error::parameter(format!(
                "y_t shape {shape:?} does not match configured [B,{},{},{}]",
                cfg.target_frames, cfg.height, cfg.width
            )));
        }
        let b = shape[0];
        if t.len() != b {
            return Err(Error::parameter(format!("expected {b} time values, got {}", t.len())));
        }
        if context.dim().0 != b {
            return Err(Error::parameter("batch mismatch between y_t and context"));
        }

        // Sinusoidal features -> MLP.
        let scale = match cfg.regime {
            PredictionRegime::Epsilon => 1.0,
            PredictionRegime::Velocity => 1000.0,
        };
        let mut temb_raw = Array2::<f64>::zeros((b, cfg.time_embed_dim));
        for (bi, &tv) in t.iter().enumerate() {
            for (di, v) in sinusoidal_embedding(tv * scale, cfg.time_embed_dim).into_iter().enumerate() {
                temb_raw[[bi, di]] = v;
            }
        }
        let temb = g.constant(temb_raw.into_dyn());
        let temb = self.linear(g, temb, "time.fc1", true, trainable)?;
        let temb = g.silu(temb);
        let temb = self.linear(g, temb, "time.fc2", true, trainable)?;

        let tokens = self.encode_tokens(g, context, trainable)?;

        let mut h = self.conv(g, y_t, "in", 1, 1, trainable)?;
        let mut res_side = cfg.height;
        let mut skips: Vec<NodeId> = vec![h];
        for (li, mult) in cfg.channel_mults.iter().enumerate() {
            let out_ch = cfg.base_channels * mult;
            let prefix = format!("down{li}");
            for ri in 0..cfg.n_res_blocks {
                h = self.res_block(g, h, temb, &Namer::res(&prefix, ri), out_ch, trainable)?;
                if cfg.attention_resolutions.contains(&res_side) {
                    h = self.attn_block(g, h, tokens, &Namer::attn(&prefix, ri), trainable)?;
                }
                skips.push(h);
            }
            if li + 1 != cfg.channel_mults.len() {
                h = self.conv(g, h, &format!("{prefix}.down"), 2, 1, trainable)?;
                skips.push(h);
                res_side /= 2;
            }
        }
        h = self.res_block(g, h, temb, "mid.res0", g.shape(h)[1], trainable)?;
        h = self.attn_block(g, h, tokens, "mid.attn", trainable)?;
        let mid_ch = g.shape(h)[1];
        h = self.res_block(g, h, temb, "mid.res1", mid_ch, trainable)?;
        for (li, mult) in cfg.channel_mults.iter().enumerate().rev() {
            let out_ch = cfg.base_channels * mult;
            let prefix = format!("up{li}");
            for ri in 0..=cfg.n_res_blocks {
                let skip = skips.pop().expect("skip stack in sync");
                let cat = g.concat_axis1(h, skip);
                h = self.res_block(g, cat, temb, &Namer::res(&prefix, ri), out_ch, trainable)?;
                if cfg.attention_resolutions.contains(&res_side) {
                    h = self.attn_block(g, h, tokens, &Namer::attn(&prefix, ri), trainable)?;
                }
            }
            if li != 0 {
                h = g.upsample_nearest2(h);
                h = self.conv(g, h, &format!("{prefix}.up"), 1, 1, trainable)?;
                res_side *= 2;
            }
        }
        let h = self.group_norm(g, h, "out.norm", trainable)?;
        let h = g.silu(h);
        let out = self.conv(g, h, "out.conv", 1, 1, trainable)?;
        Ok(out)
    }

    /// Inference without gradient bookkeeping.
    pub fn predict(&self, y_t: &Array4<f64>, t: &[f64], context: &Array4<f64>) -> Result<Array4<f64>> {
        let mut g = Graph::new();
        let y = g.constant(y_t.clone().into_dyn());
        let out = self.forward(&mut g, y, t, context, false)?;
        let v: Tensor = g.value(out).clone();
        v.into_dimensionality::<ndarray::Ix4>()
            .map_err(|e| Error::parameter(format!("output shape: {e}")))
    }
}

impl DenoiseModel for Denoiser {
    fn predict_into(
        &self,
        g: &mut Graph,
        y_t: NodeId,
        t: &[f64],
        context: &Array4<f64>,
        trainable: bool,
    ) -> Result<NodeId> {
        self.forward(g, y_t, t, context, trainable)
    }

    fn target_shape(&self) -> (usize, usize, usize) {
        (self.config.target_frames, self.config.height, self.config.width)
    }
}

/// Check used where y_t tensors are produced outside the graph.
pub fn require_finite(arr: &ArrayD<f64>, step: usize, what: &str) -> Result<()> {
    if arr.iter().any(|v| !v.is_finite()) {
        Err(Error::Numeric { step, msg: format!("non-finite {what}") })
    } else {
        Ok(())
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::Rng;

    fn rand4(rng: &mut ChaCha12Rng, shape: (usize, usize, usize, usize)) -> Array4<f64> {
        Array4::from_shape_fn(shape, |_| rng.random_range(-1.0..1.0))
    }

    #[test]
    fn micro_param_budget() {
        let model = Denoiser::init(DenoiserConfig::micro(), 0).unwrap();
        let n = model.n_params();
        assert!(n < 50_000, "micro config has {n} params");
    }

    #[test]
    fn output_shape_matches_input() {
        let model = Denoiser::init(DenoiserConfig::micro(), 1).unwrap();
        let mut rng = ChaCha12Rng::seed_from_u64(2);
        let y = rand4(&mut rng, (2, 2, 8, 8));
        let ctx = rand4(&mut rng, (2, 2, 8, 8)).mapv(f64::abs);
        let out = model.predict(&y, &[3.0, 7.0], &ctx).unwrap();
        assert_eq!(out.dim(), y.dim());
        assert!(out.iter().all(|v| v.is_finite()));
    }

    #[test]
    fn deterministic_given_inputs() {
        let model = Denoiser::init(DenoiserConfig::micro(), 1).unwrap();
        let mut rng = ChaCha12Rng::seed_from_u64(3);
        let y = rand4(&mut rng, (1, 2, 8, 8));
        let ctx = rand4(&mut rng, (1, 2, 8, 8));
        let a = model.predict(&y, &[5.0], &ctx).unwrap();
        let b = model.predict(&y, &[5.0], &ctx).unwrap();
        assert_eq!(a, b);
    }

    #[test]
    fn condition_changes_output() {
        let model = Denoiser::init(DenoiserConfig::micro(), 4).unwrap();
        let mut rng = ChaCha12Rng::seed_from_u64(5);
        let y = rand4(&mut rng, (1, 2, 8, 8));
        let ctx_a = rand4(&mut rng, (1, 2, 8, 8));
        let ctx_b = rand4(&mut rng, (1, 2, 8, 8));
        let a = model.predict(&y, &[5.0], &ctx_a).unwrap();
        let b = model.predict(&y, &[5.0], &ctx_b).unwrap();
        let diff: f64 = (a - b).iter().map(|v| v.abs()).sum();
        assert!(diff > 1e-9, "cross-attention appears disconnected");
    }

    #[test]
    fn time_step_changes_output() {
        let model = Denoiser::init(DenoiserConfig::micro(), 6).unwrap();
        let mut rng = ChaCha12Rng::seed_from_u64(7);
        let y = rand4(&mut rng, (1, 2, 8, 8));
        let ctx = rand4(&mut rng, (1, 2, 8, 8));
        let a = model.predict(&y, &[0.0], &ctx).unwrap();
        let b = model.predict(&y, &[199.0], &ctx).unwrap();
        let diff: f64 = (a - b).iter().map(|v| v.abs()).sum();
        assert!(diff > 1e-9, "time embedding appears disconnected");
    }

    #[test]
    fn embeddings_differ_across_contexts_and_are_finite_on_zero() {
        let model = Denoiser::init(DenoiserConfig::micro(), 8).unwrap();
        let mut rng = ChaCha12Rng::seed_from_u64(9);
        let a = model.encode_condition(&rand4(&mut rng, (1, 2, 8, 8))).unwrap();
        let b = model.encode_condition(&rand4(&mut rng, (1, 2, 8, 8))).unwrap();
        let diff: f64 = (&a.tokens - &b.tokens).iter().map(|v| v.abs()).sum();
        assert!(diff > 1e-9);
        // Repeat call is deterministic.
        let a2 = model.encode_condition(&Array4::zeros((1, 2, 8, 8))).unwrap();
        assert!(a2.tokens.iter().all(|v| v.is_finite()));
        assert!(a2.pooled.iter().all(|v| v.is_finite()));
        assert!(a2.tokens.shape()[1] >= 1);
    }

    #[test]
    fn input_gradient_matches_finite_differences() {
        // Scalar readout = mean(model(y)); d/dy checked by central FD.
        let model = Denoiser::init(DenoiserConfig::micro(), 10).unwrap();
        let mut rng = ChaCha12Rng::seed_from_u64(11);
        let y = rand4(&mut rng, (1, 2, 8, 8));
        let ctx = rand4(&mut rng, (1, 2, 8, 8));

        let mut g = Graph::new();
        // y as a named parameter so the graph tracks its gradient.
        let yn = g.param("y", y.clone().into_dyn());
        let out = model.forward(&mut g, yn, &[3.0], &ctx, false).unwrap();
        let loss = g.mean_all(out);
        g.backward(loss).unwrap();
        let analytic = g.grad(yn).unwrap().clone();

        let h = 1e-5;
        let mut checked = 0;
        for flat in (0..y.len()).step_by(17) {
            let mut plus = y.clone();
            let mut minus = y.clone();
            plus.as_slice_mut().unwrap()[flat] += h;
            minus.as_slice_mut().unwrap()[flat] -= h;
            let lp = {
                let mut g = Graph::new();
                let yn = g.constant(plus.into_dyn());
                let out = model.forward(&mut g, yn, &[3.0], &ctx, false).unwrap();
                let l = g.mean_all(out);
                g.scalar(l)
            };
            let lm = {
                let mut g = Graph::new();
                let yn = g.constant(minus.into_dyn());
                let out = model.forward(&mut g, yn, &[3.0], &ctx, false).unwrap();
                let l = g.mean_all(out);
                g.scalar(l)
            };
            let fd = (lp - lm) / (2.0 * h);
            let an = analytic.as_slice().unwrap()[flat];
            let denom = fd.abs().max(an.abs()).max(1e-6);
            assert!(
                (fd - an).abs() < 1e-8 || ((fd - an) / denom).abs() < 1e-3,
                "elem {flat}: fd {fd} vs analytic {an}"
            );
            checked += 1;
        }
        assert!(checked > 5);
    }

    #[test]
    fn shape_validation_errors() {
        let model = Denoiser::init(DenoiserConfig::micro(), 12).unwrap();
        let mut rng = ChaCha12Rng::seed_from_u64(13);
        let bad_y = rand4(&mut rng, (1, 3, 8, 8));
        let ctx = rand4(&mut rng, (1, 2, 8, 8));
        assert!(model.predict(&bad_y, &[0.0], &ctx).is_err());
        let y = rand4(&mut rng, (1, 2, 8, 8));
        let bad_ctx = rand4(&mut rng, (1, 2, 4, 4));
        assert!(model.predict(&y, &[0.0], &bad_ctx).is_err());
    }
}
