//! Conditional U-Net ε-predictor and its fine-tuning loop — the only
//! trainable module once the encoders are frozen.

use std::collections::HashMap;

use rand::Rng;
use rand_distr::{Distribution, StandardNormal};
use serde::{Deserialize, Serialize};

use crate::captions::{TokenSequence, Vocabulary, TOKEN_LEN};
use crate::encoders::{LatentAutoencoder, TextEncoder, CTX_DIM};
use crate::nn::{
    conv, group_norm, init_conv, init_conv_zero, init_group_norm, init_layer_norm, init_linear,
    layer_norm, linear, timestep_embedding,
};
use crate::numerics::{rng, AdamState, BoundParams, ParamSet, Tape, Tensor, Var};
use crate::schedule::{add_noise, ddim_step, DiffusionSchedule, TimestepPlan};
use crate::synthdata::{Corpus, Split};
use crate::{Error, Result};

pub const TEMB_DIM: usize = 128;
pub const UNET_WIDTHS: [usize; 3] = [32, 64, 128];
pub const ATTN_HEADS: usize = 4;

/// Stable tags for the five cross-attention sites, outermost to innermost.
/// The editor addresses capture/override by these names.
pub const CROSS_ATTN_TAGS: [&str; 5] = ["ca.d0", "ca.d1", "ca.mid", "ca.u1", "ca.u0"];

#[derive(Debug, Clone)]
pub struct UNet {
    pub params: ParamSet,
    /// Latent channel count (4 learned codec, 1 pixel bypass).
    pub channels: usize,
    pub trained: bool,
}

fn init_resblock<R: Rng>(p: &mut ParamSet, prefix: &str, c_in: usize, c_out: usize, r: &mut R) {
    init_group_norm(p, &format!("{prefix}.gn1"), c_in);
    init_conv(p, &format!("{prefix}.conv1"), c_in, c_out, 3, r);
    init_linear(p, &format!("{prefix}.temb"), TEMB_DIM, c_out, r);
    init_group_norm(p, &format!("{prefix}.gn2"), c_out);
    init_conv(p, &format!("{prefix}.conv2"), c_out, c_out, 3, r);
    if c_in != c_out {
        init_conv(p, &format!("{prefix}.skip"), c_in, c_out, 1, r);
    }
}

fn init_cross_attn<R: Rng>(p: &mut ParamSet, prefix: &str, c: usize, r: &mut R) {
    init_layer_norm(p, &format!("{prefix}.ln"), c);
    init_linear(p, &format!("{prefix}.wq"), c, c, r);
    init_linear(p, &format!("{prefix}.wk"), CTX_DIM, c, r);
    init_linear(p, &format!("{prefix}.wv"), CTX_DIM, c, r);
    init_linear(p, &format!("{prefix}.wo"), c, c, r);
}

impl UNet {
    pub fn init(seed: u64, channels: usize) -> Self {
        let mut r = rng(seed);
        let [w0, w1, w2] = UNET_WIDTHS;
        let mut p = ParamSet::new();
        init_linear(&mut p, "unet.temb.fc1", TEMB_DIM, TEMB_DIM, &mut r);
        init_linear(&mut p, "unet.temb.fc2", TEMB_DIM, TEMB_DIM, &mut r);
        init_conv(&mut p, "unet.conv_in", channels, w0, 3, &mut r);
        init_resblock(&mut p, "unet.d0.res", w0, w0, &mut r);
        init_cross_attn(&mut p, "unet.d0.ca", w0, &mut r);
        init_conv(&mut p, "unet.down0", w0, w1, 3, &mut r);
        init_resblock(&mut p, "unet.d1.res", w1, w1, &mut r);
        init_cross_attn(&mut p, "unet.d1.ca", w1, &mut r);
        init_conv(&mut p, "unet.down1", w1, w2, 3, &mut r);
        init_resblock(&mut p, "unet.mid.res1", w2, w2, &mut r);
        init_cross_attn(&mut p, "unet.mid.ca", w2, &mut r);
        init_resblock(&mut p, "unet.mid.res2", w2, w2, &mut r);
        init_conv(&mut p, "unet.up1.conv", w2, w1, 3, &mut r);
        init_resblock(&mut p, "unet.u1.res", 2 * w1, w1, &mut r);
        init_cross_attn(&mut p, "unet.u1.ca", w1, &mut r);
        init_conv(&mut p, "unet.up0.conv", w1, w0, 3, &mut r);
        init_resblock(&mut p, "unet.u0.res", 2 * w0, w0, &mut r);
        init_cross_attn(&mut p, "unet.u0.ca", w0, &mut r);
        init_group_norm(&mut p, "unet.gn_out", w0);
        // Zero-init output conv: eps_pred starts at 0, so the initial MSE
        // against unit-variance noise is ~1.
        init_conv_zero(&mut p, "unet.conv_out", w0, channels, 3);
        UNet { params: p, channels, trained: false }
    }

    fn resblock(
        &self,
        tape: &mut Tape,
        b: &BoundParams,
        prefix: &str,
        x: Var,
        temb: Var,
        c_in: usize,
        c_out: usize,
    ) -> Result<Var> {
        let mut h = group_norm(tape, b, &format!("{prefix}.gn1"), x, 4)?;
        h = tape.silu(h)?;
        h = conv(tape, b, &format!("{prefix}.conv1"), h, 1, 1)?;
        let tproj = linear(tape, b, &format!("{prefix}.temb"), temb)?;
        let tproj = tape.reshape(tproj, vec![c_out])?;
        h = tape.add_chan_bias(h, tproj)?;
        h = group_norm(tape, b, &format!("{prefix}.gn2"), h, 4)?;
        h = tape.silu(h)?;
        h = conv(tape, b, &format!("{prefix}.conv2"), h, 1, 1)?;
        let skip = if c_in != c_out {
            conv(tape, b, &format!("{prefix}.skip"), x, 1, 0)?
        } else {
            x
        };
        tape.add(skip, h)
    }

    /// Spatial [c,H,W] queries attend to the text context [L_tok, d_ctx].
    fn cross_attn(
        &self,
        tape: &mut Tape,
        b: &BoundParams,
        prefix: &str,
        tag: &str,
        x: Var,
        ctx: Var,
        c: usize,
    ) -> Result<Var> {
        let s = tape.shape(x).to_vec();
        let (h, w) = (s[1], s[2]);
        let n = h * w;
        // [c,H,W] -> [c,n,1] -> [n,c]: merge_heads doubles as a transpose.
        let flat = tape.reshape(x, vec![c, n, 1])?;
        let rows = tape.merge_heads(flat)?;
        let normed = layer_norm(tape, b, &format!("{prefix}.ln"), rows)?;
        let q = linear(tape, b, &format!("{prefix}.wq"), normed)?;
        let k = linear(tape, b, &format!("{prefix}.wk"), ctx)?;
        let v = linear(tape, b, &format!("{prefix}.wv"), ctx)?;
        let qh = tape.split_heads(q, ATTN_HEADS)?;
        let kh = tape.split_heads(k, ATTN_HEADS)?;
        let vh = tape.split_heads(v, ATTN_HEADS)?;
        let att = tape.attention(qh, kh, vh, Some(tag))?;
        let att = tape.merge_heads(att)?;
        let att = linear(tape, b, &format!("{prefix}.wo"), att)?;
        let res = tape.add(rows, att)?;
        // [n,c] -> [c,n,1] -> [c,H,W]
        let back = tape.split_heads(res, c)?;
        tape.reshape(back, vec![c, h, w])
    }

    /// Builds the ε-prediction graph. `ctx` is a [L_tok, d_ctx] context
    /// sequence (use the null caption's context for the unconditional branch).
    pub fn forward_on(&self, tape: &mut Tape, b: &BoundParams, z: Var, t: i32, ctx: Var) -> Result<Var> {
        let s = tape.shape(z).to_vec();
        if s.len() != 3 || s[0] != self.channels {
            return Err(Error::shape(
                "unet_forward",
                format!("latent {:?} incompatible with {} channels", s, self.channels),
            ));
        }
        if s[1] % 4 != 0 || s[2] % 4 != 0 {
            return Err(Error::shape("unet_forward", format!("spatial dims {:?} not divisible by 4", &s[1..])));
        }
        if t < 0 {
            return Err(Error::InvalidArg(format!("unet_forward: timestep {t} must be >= 0")));
        }
        let cs = tape.shape(ctx).to_vec();
        if cs != [TOKEN_LEN, CTX_DIM] {
            return Err(Error::shape("unet_forward", format!("context {:?}", cs)));
        }
        let [w0, w1, w2] = UNET_WIDTHS;

        let temb0 = tape.constant(&timestep_embedding(t, TEMB_DIM).reshaped(vec![1, TEMB_DIM])?)?;
        let temb = linear(tape, b, "unet.temb.fc1", temb0)?;
        let temb = tape.silu(temb)?;
        let temb = linear(tape, b, "unet.temb.fc2", temb)?;

        let h0 = conv(tape, b, "unet.conv_in", z, 1, 1)?;
        let h0 = self.resblock(tape, b, "unet.d0.res", h0, temb, w0, w0)?;
        let h0 = self.cross_attn(tape, b, "unet.d0.ca", CROSS_ATTN_TAGS[0], h0, ctx, w0)?;

        let h1 = conv(tape, b, "unet.down0", h0, 2, 1)?;
        let h1 = self.resblock(tape, b, "unet.d1.res", h1, temb, w1, w1)?;
        let h1 = self.cross_attn(tape, b, "unet.d1.ca", CROSS_ATTN_TAGS[1], h1, ctx, w1)?;

        let m = conv(tape, b, "unet.down1", h1, 2, 1)?;
        let m = self.resblock(tape, b, "unet.mid.res1", m, temb, w2, w2)?;
        let m = self.cross_attn(tape, b, "unet.mid.ca", CROSS_ATTN_TAGS[2], m, ctx, w2)?;
        let m = self.resblock(tape, b, "unet.mid.res2", m, temb, w2, w2)?;

        let u1 = tape.upsample2(m)?;
        let u1 = conv(tape, b, "unet.up1.conv", u1, 1, 1)?;
        let u1 = tape.concat_chan(u1, h1)?;
        let u1 = self.resblock(tape, b, "unet.u1.res", u1, temb, 2 * w1, w1)?;
        let u1 = self.cross_attn(tape, b, "unet.u1.ca", CROSS_ATTN_TAGS[3], u1, ctx, w1)?;

        let u0 = tape.upsample2(u1)?;
        let u0 = conv(tape, b, "unet.up0.conv", u0, 1, 1)?;
        let u0 = tape.concat_chan(u0, h0)?;
        let u0 = self.resblock(tape, b, "unet.u0.res", u0, temb, 2 * w0, w0)?;
        let u0 = self.cross_attn(tape, b, "unet.u0.ca", CROSS_ATTN_TAGS[4], u0, ctx, w0)?;

        let out = group_norm(tape, b, "unet.gn_out", u0, 4)?;
        let out = tape.silu(out)?;
        conv(tape, b, "unet.conv_out", out, 1, 1)
    }

    /// Inference on a fresh tape. The returned tape owns any captured
    /// attention maps.
    pub fn predict_with_tape(&self, z: &Tensor, t: i32, ctx: &Tensor, capture: bool) -> Result<(Tensor, Tape)> {
        let mut tape = Tape::new();
        tape.enable_capture(capture);
        let b = BoundParams::bind(&mut tape, &self.params, false)?;
        let zv = tape.constant(z)?;
        let cv = tape.constant(ctx)?;
        let out = self.forward_on(&mut tape, &b, zv, t, cv)?;
        Ok((tape.value(out).clone(), tape))
    }

    pub fn predict(&self, z: &Tensor, t: i32, ctx: &Tensor) -> Result<Tensor> {
        Ok(self.predict_with_tape(z, t, ctx, false)?.0)
    }
}

#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct TrainConfig {
    pub steps: usize,
    pub batch: usize,
    pub lr: f32,
    pub seed: u64,
    /// Fraction of steps trained against the null caption so the
    /// unconditional branch exists for classifier-free guidance.
    pub null_prob: f64,
    /// Sample training items uniformly over caption classes instead of over
    /// images. Under a strong label confound the rare caption classes carry
    /// the information that separates attributes; without this the model
    /// underfits them and edits regress to the correlated attribute.
    #[serde(default = "default_balance")]
    pub balance_captions: bool,
}

fn default_balance() -> bool {
    true
}

impl Default for TrainConfig {
    fn default() -> Self {
        TrainConfig { steps: 400, batch: 4, lr: 1e-3, seed: 23, null_prob: 0.1, balance_captions: true }
    }
}

impl TrainConfig {
    fn validate(&self) -> Result<()> {
        if self.steps == 0 || self.batch == 0 || self.lr <= 0.0 || !(0.0..=1.0).contains(&self.null_prob) {
            return Err(Error::InvalidArg("TrainConfig fields must be positive (null_prob in [0,1])".into()));
        }
        Ok(())
    }
}

/// Precomputed frozen-encoder views of the training split: latents plus the
/// context sequence for each caption (captions repeat heavily, so contexts
/// are cached by text).
pub struct PreparedCorpus {
    pub latents: Vec<Tensor>,
    pub contexts: Vec<Tensor>,
    pub null_context: Tensor,
    /// Item indices grouped by caption text, for caption-balanced sampling.
    pub caption_groups: Vec<Vec<usize>>,
}

pub fn prepare_corpus(corpus: &Corpus, ae: &LatentAutoencoder, txt: &TextEncoder, split: Split) -> Result<PreparedCorpus> {
    let vocab = Vocabulary::closed();
    let mut ctx_cache: HashMap<String, Tensor> = HashMap::new();
    let mut latents = Vec::new();
    let mut contexts = Vec::new();
    let mut group_of: HashMap<String, usize> = HashMap::new();
    let mut caption_groups: Vec<Vec<usize>> = Vec::new();
    for s in corpus.split(split) {
        let idx = latents.len();
        let g = *group_of.entry(s.caption.text.clone()).or_insert_with(|| {
            caption_groups.push(Vec::new());
            caption_groups.len() - 1
        });
        caption_groups[g].push(idx);
        let img = Tensor::from_vec(vec![1, corpus.spec.height, corpus.spec.width], s.image.clone())?;
        latents.push(ae.encode(&img)?);
        let ctx = match ctx_cache.get(&s.caption.text) {
            Some(c) => c.clone(),
            None => {
                let tok = vocab.tokenize(&s.caption.text)?;
                let (_, c) = txt.encode(&tok)?;
                ctx_cache.insert(s.caption.text.clone(), c.clone());
                c
            }
        };
        contexts.push(ctx);
    }
    if latents.is_empty() {
        return Err(Error::InvalidArg("empty training split".into()));
    }
    let (_, null_context) = txt.encode(&TokenSequence::null())?;
    Ok(PreparedCorpus { latents, contexts, null_context, caption_groups })
}

/// Noise-prediction fine-tuning: per step sample (z0, t, ε), form z_t, and
/// minimize MSE(ε̂, ε). Encoders stay untouched — only U-Net weights move.
pub fn finetune(
    prepared: &PreparedCorpus,
    schedule: &DiffusionSchedule,
    channels: usize,
    cfg: &TrainConfig,
) -> Result<(UNet, Vec<f32>)> {
    cfg.validate()?;
    let mut unet = UNet::init(cfg.seed.wrapping_add(7), channels);
    let mut adam = AdamState::new(&unet.params, cfg.lr);
    let mut r = rng(cfg.seed);
    let n = prepared.latents.len();
    let mut losses = Vec::with_capacity(cfg.steps);
    for _ in 0..cfg.steps {
        let mut tape = Tape::new();
        let b = BoundParams::bind(&mut tape, &unet.params, true)?;
        let mut loss = None;
        for _ in 0..cfg.batch {
            let i = if cfg.balance_captions {
                let g = &prepared.caption_groups[r.gen_range(0..prepared.caption_groups.len())];
                g[r.gen_range(0..g.len())]
            } else {
                r.gen_range(0..n)
            };
            let z0 = &prepared.latents[i];
            let t = r.gen_range(0..schedule.total_timesteps) as i32;
            let eps_data: Vec<f32> = (0..z0.numel()).map(|_| StandardNormal.sample(&mut r)).collect();
            let eps = Tensor::from_vec(z0.shape().to_vec(), eps_data)?;
            let zt = add_noise(z0, &eps, t, schedule)?;
            let ctx = if r.gen::<f64>() < cfg.null_prob {
                &prepared.null_context
            } else {
                &prepared.contexts[i]
            };
            let zv = tape.constant(&zt)?;
            let cv = tape.constant(ctx)?;
            let pred = unet.forward_on(&mut tape, &b, zv, t, cv)?;
            let ev = tape.constant(&eps)?;
            let l = tape.mse(pred, ev)?;
            loss = Some(match loss {
                None => l,
                Some(acc) => tape.add(acc, l)?,
            });
        }
        let loss = tape.scale(loss.unwrap(), 1.0 / cfg.batch as f32)?;
        let lv = tape.value(loss).item();
        if !lv.is_finite() {
            return Err(Error::NonFinite { op: "finetune loss".into(), phase: "forward".into() });
        }
        losses.push(lv);
        let grads = tape.backward(loss)?;
        let g = b.grads(&grads);
        adam.step(&mut unet.params, &g)?;
    }
    unet.trained = true;
    Ok((unet, losses))
}

/// Classifier-free guidance: ε̂ = ε_u + w·(ε_c − ε_u).
pub fn cfg_eps(eps_uncond: &Tensor, eps_cond: &Tensor, w: f32) -> Result<Tensor> {
    if eps_uncond.shape() != eps_cond.shape() {
        return Err(Error::shape("cfg_eps", format!("{:?} vs {:?}", eps_uncond.shape(), eps_cond.shape())));
    }
    let data: Vec<f32> = eps_uncond
        .data()
        .iter()
        .zip(eps_cond.data())
        .map(|(u, c)| u + w * (c - u))
        .collect();
    Tensor::from_vec(eps_uncond.shape().to_vec(), data)
}

/// DDIM generation from a seeded Gaussian latent with classifier-free
/// guidance, decoded back to image space.
pub fn sample(
    unet: &UNet,
    ae: &LatentAutoencoder,
    txt: &TextEncoder,
    schedule: &DiffusionSchedule,
    plan: &TimestepPlan,
    prompt: &TokenSequence,
    w: f32,
    seed: u64,
) -> Result<Tensor> {
    if !unet.trained {
        return Err(Error::InvalidArg("sample: U-Net weights are untrained".into()));
    }
    if w < 0.0 {
        return Err(Error::InvalidArg(format!("sample: guidance weight {w} must be >= 0")));
    }
    let (_, ctx) = txt.encode(prompt)?;
    let (_, null_ctx) = txt.encode(&TokenSequence::null())?;
    let shape = ae.latent_shape();
    let mut r = rng(seed);
    let numel: usize = shape.iter().product();
    let data: Vec<f32> = (0..numel).map(|_| StandardNormal.sample(&mut r)).collect();
    let mut z = Tensor::from_vec(shape, data)?;
    for i in (0..plan.len()).rev() {
        let t = plan.steps()[i];
        let t_prev = plan.prev(i);
        let eps_u = unet.predict(&z, t, &null_ctx)?;
        let eps = if w == 0.0 {
            eps_u
        } else {
            let eps_c = unet.predict(&z, t, &ctx)?;
            cfg_eps(&eps_u, &eps_c, w)?
        };
        z = ddim_step(&z, &eps, t, t_prev, schedule)?;
    }
    ae.decode(&z)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::schedule::{make_schedule, ScheduleKind};

    fn toy_ctx() -> Tensor {
        let txt = TextEncoder::init(1);
        txt.encode(&TokenSequence::null()).unwrap().1
    }

    #[test]
    fn output_shape_matches_latent() {
        let unet = UNet::init(0, 4);
        let mut r = rng(4);
        let z = Tensor::randn(vec![4, 8, 8], 1.0, &mut r);
        let out = unet.predict(&z, 5, &toy_ctx()).unwrap();
        assert_eq!(out.shape(), &[4, 8, 8]);
    }

    #[test]
    fn zero_init_output_conv_gives_zero_eps_at_init() {
        // gn_out/silu/conv_out with zero weights must map anything to 0,
        // pinning the ~1.0 initial MSE property structurally.
        let unet = UNet::init(0, 4);
        let mut r = rng(4);
        let z = Tensor::randn(vec![4, 8, 8], 1.0, &mut r);
        let out = unet.predict(&z, 5, &toy_ctx()).unwrap();
        assert!(out.data().iter().all(|&v| v == 0.0));
    }

    #[test]
    fn capture_does_not_perturb_prediction() {
        let unet = UNet::init(3, 4);
        let mut r = rng(4);
        let z = Tensor::randn(vec![4, 8, 8], 1.0, &mut r);
        let ctx = toy_ctx();
        let (a, tape_off) = unet.predict_with_tape(&z, 9, &ctx, false).unwrap();
        let (b, tape_on) = unet.predict_with_tape(&z, 9, &ctx, true).unwrap();
        assert_eq!(a.data(), b.data());
        assert!(tape_off.captured().is_empty());
        let tags: Vec<&str> = tape_on.captured().iter().map(|c| c.tag.as_str()).collect();
        assert_eq!(tags, CROSS_ATTN_TAGS.to_vec());
    }

    #[test]
    fn attention_maps_have_documented_shape() {
        let unet = UNet::init(3, 4);
        let mut r = rng(4);
        let z = Tensor::randn(vec![4, 8, 8], 1.0, &mut r);
        let (_, tape) = unet.predict_with_tape(&z, 9, &toy_ctx(), true).unwrap();
        let outer = &tape.captured()[0];
        assert_eq!((outer.heads, outer.n_q, outer.n_k), (ATTN_HEADS, 64, TOKEN_LEN));
        let mid = &tape.captured()[2];
        assert_eq!((mid.heads, mid.n_q, mid.n_k), (ATTN_HEADS, 4, TOKEN_LEN));
    }

    #[test]
    fn invalid_timestep_and_shape_rejected() {
        let unet = UNet::init(0, 4);
        let z = Tensor::zeros(vec![4, 8, 8]);
        assert!(unet.predict(&z, -1, &toy_ctx()).is_err());
        let bad = Tensor::zeros(vec![1, 8, 8]);
        assert!(unet.predict(&bad, 3, &toy_ctx()).is_err());
    }

    #[test]
    fn untrained_sample_rejected() {
        let unet = UNet::init(0, 1);
        let ae = LatentAutoencoder::pixel_bypass(8, 8);
        let txt = TextEncoder::init(1);
        let s = make_schedule(ScheduleKind::ScaledLinear, 50, 85e-5, 12e-3).unwrap();
        let plan = TimestepPlan::uniform(50, 5).unwrap();
        let err = sample(&unet, &ae, &txt, &s, &plan, &TokenSequence::null(), 1.0, 0);
        assert!(err.is_err());
    }

    #[test]
    fn cfg_weight_zero_is_prompt_independent() {
        // Structural check on the guidance algebra.
        let mut r = rng(8);
        let u = Tensor::randn(vec![4, 8, 8], 1.0, &mut r);
        let c = Tensor::randn(vec![4, 8, 8], 1.0, &mut r);
        let e = cfg_eps(&u, &c, 0.0).unwrap();
        assert_eq!(e.data(), u.data());
        // u + (c - u) re-associates, so w=1 matches c only to round-off.
        let e1 = cfg_eps(&u, &c, 1.0).unwrap();
        assert!(e1.max_abs_diff(&c) < 1e-6);
    }

    #[test]
    fn initial_loss_near_one() {
        let spec = crate::synthdata::CorpusSpec { n_samples: 16, ..Default::default() };
        let corpus = crate::synthdata::generate_corpus(&spec).unwrap();
        let ae = LatentAutoencoder::pixel_bypass(32, 32);
        let txt = TextEncoder::init(1);
        let prepared = prepare_corpus(&corpus, &ae, &txt, Split::Train).unwrap();
        let s = make_schedule(ScheduleKind::ScaledLinear, 200, 85e-5, 12e-3).unwrap();
        let cfg = TrainConfig { steps: 1, batch: 4, ..Default::default() };
        let (_, losses) = finetune(&prepared, &s, 1, &cfg).unwrap();
        assert!((losses[0] - 1.0).abs() <= 0.2, "initial loss {}", losses[0]);
    }
}
