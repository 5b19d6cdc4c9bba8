//! Frozen conditioning components: a toy contrastive text/image embedding
//! pair sharing a 64-dim joint space, and a small deterministic convolutional
//! autoencoder providing the latent space where diffusion runs.

use rand::seq::SliceRandom;
use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::captions::{TokenSequence, Vocabulary, TOKEN_LEN};
use crate::nn::{
    conv, group_norm, init_conv, init_group_norm, init_layer_norm, init_linear, layer_norm, linear,
};
use crate::numerics::{rng, AdamState, BoundParams, ParamSet, Tape, Tensor, Var};
use crate::synthdata::{Corpus, Split};
use crate::{Error, Result};

pub const JOINT_DIM: usize = 64;
pub const CTX_DIM: usize = 64;
pub const CONTRASTIVE_TEMPERATURE: f32 = 0.07;

/// Projection heads start with tiny weights plus a shared constant bias so
/// that initial in-batch similarities are nearly uniform and the symmetric
/// cross-entropy starts near its analytic value 2·ln(batch).
const PROJ_INIT_STD: f32 = 0.01;
const PROJ_ANCHOR_BIAS: f32 = 0.25;

fn init_projection<R: Rng>(p: &mut ParamSet, prefix: &str, d_in: usize, r: &mut R) {
    p.insert(format!("{prefix}.w"), Tensor::randn(vec![d_in, JOINT_DIM], PROJ_INIT_STD, r));
    p.insert(format!("{prefix}.b"), Tensor::full(vec![JOINT_DIM], PROJ_ANCHOR_BIAS));
}

// ---- text encoder ----

/// Token-embedding + 2-block self-attention encoder. Produces a pooled
/// unit-norm joint embedding and a per-token context sequence [L_tok, d_ctx].
#[derive(Debug, Clone)]
pub struct TextEncoder {
    pub params: ParamSet,
    pub vocab_len: usize,
    pub heads: usize,
    pub layers: usize,
}

impl TextEncoder {
    pub fn init(seed: u64) -> Self {
        let mut r = rng(seed);
        let vocab_len = Vocabulary::closed().len();
        let (d, layers) = (CTX_DIM, 2);
        let mut p = ParamSet::new();
        p.insert("txt.tok_emb", Tensor::randn(vec![vocab_len, d], 0.02, &mut r));
        p.insert("txt.pos_emb", Tensor::randn(vec![TOKEN_LEN, d], 0.02, &mut r));
        for l in 0..layers {
            init_layer_norm(&mut p, &format!("txt.{l}.ln1"), d);
            for name in ["wq", "wk", "wv", "wo"] {
                init_linear(&mut p, &format!("txt.{l}.{name}"), d, d, &mut r);
            }
            init_layer_norm(&mut p, &format!("txt.{l}.ln2"), d);
            init_linear(&mut p, &format!("txt.{l}.fc1"), d, 2 * d, &mut r);
            init_linear(&mut p, &format!("txt.{l}.fc2"), 2 * d, d, &mut r);
        }
        init_layer_norm(&mut p, "txt.ln_f", d);
        init_projection(&mut p, "txt.proj", d, &mut r);
        TextEncoder { params: p, vocab_len, heads: 4, layers }
    }

    /// Builds the forward graph on an existing tape. Returns
    /// (joint embedding [64], context sequence [L_tok, 64]).
    pub fn forward_on(&self, tape: &mut Tape, b: &BoundParams, tokens: &TokenSequence) -> Result<(Var, Var)> {
        if tokens.ids.len() != TOKEN_LEN {
            return Err(Error::Caption(format!(
                "token sequence length {} != {TOKEN_LEN}",
                tokens.ids.len()
            )));
        }
        let ids: Vec<usize> = tokens.ids.iter().map(|&i| i as usize).collect();
        if ids.iter().any(|&i| i >= self.vocab_len) {
            return Err(Error::OutOfVocab(format!("token id out of range (vocab {})", self.vocab_len)));
        }
        let tok = tape.gather(b.var("txt.tok_emb"), &ids)?;
        let mut h = tape.add(tok, b.var("txt.pos_emb"))?;
        for l in 0..self.layers {
            let pre = layer_norm(tape, b, &format!("txt.{l}.ln1"), h)?;
            let q = linear(tape, b, &format!("txt.{l}.wq"), pre)?;
            let k = linear(tape, b, &format!("txt.{l}.wk"), pre)?;
            let v = linear(tape, b, &format!("txt.{l}.wv"), pre)?;
            let qh = tape.split_heads(q, self.heads)?;
            let kh = tape.split_heads(k, self.heads)?;
            let vh = tape.split_heads(v, self.heads)?;
            let att = tape.attention(qh, kh, vh, None)?;
            let att = tape.merge_heads(att)?;
            let att = linear(tape, b, &format!("txt.{l}.wo"), att)?;
            h = tape.add(h, att)?;
            let pre2 = layer_norm(tape, b, &format!("txt.{l}.ln2"), h)?;
            let m = linear(tape, b, &format!("txt.{l}.fc1"), pre2)?;
            let m = tape.gelu(m)?;
            let m = linear(tape, b, &format!("txt.{l}.fc2"), m)?;
            h = tape.add(h, m)?;
        }
        let ctx = layer_norm(tape, b, "txt.ln_f", h)?;
        let pooled = tape.mean_rows(ctx)?;
        let pooled = tape.reshape(pooled, vec![1, CTX_DIM])?;
        let proj = linear(tape, b, "txt.proj", pooled)?;
        let unit = tape.l2_normalize_rows(proj)?;
        let joint = tape.reshape(unit, vec![JOINT_DIM])?;
        Ok((joint, ctx))
    }

    /// Inference entry point: fresh tape, frozen weights.
    pub fn encode(&self, tokens: &TokenSequence) -> Result<(Tensor, Tensor)> {
        let mut tape = Tape::new();
        let b = BoundParams::bind(&mut tape, &self.params, false)?;
        let (joint, ctx) = self.forward_on(&mut tape, &b, tokens)?;
        Ok((tape.value(joint).clone(), tape.value(ctx).clone()))
    }
}

// ---- image encoder ----

/// Small CNN mapping [1,H,W] images to a pooled unit-norm joint embedding.
#[derive(Debug, Clone)]
pub struct ImageEncoder {
    pub params: ParamSet,
    pub height: usize,
    pub width: usize,
}

impl ImageEncoder {
    pub fn init(seed: u64, height: usize, width: usize) -> Self {
        let mut r = rng(seed);
        let mut p = ParamSet::new();
        let widths = [(1usize, 16usize), (16, 32), (32, 64)];
        for (i, (ci, co)) in widths.iter().enumerate() {
            init_conv(&mut p, &format!("img.c{i}"), *ci, *co, 3, &mut r);
            init_group_norm(&mut p, &format!("img.g{i}"), *co);
        }
        init_projection(&mut p, "img.proj", 64, &mut r);
        ImageEncoder { params: p, height, width }
    }

    pub fn forward_on(&self, tape: &mut Tape, b: &BoundParams, img: Var) -> Result<Var> {
        let s = tape.shape(img).to_vec();
        if s != [1, self.height, self.width] {
            return Err(Error::shape(
                "ImageEncoder::forward",
                format!("expected [1, {}, {}], got {:?}", self.height, self.width, s),
            ));
        }
        let mut h = img;
        for i in 0..3 {
            h = conv(tape, b, &format!("img.c{i}"), h, 2, 1)?;
            h = group_norm(tape, b, &format!("img.g{i}"), h, 4)?;
            h = tape.silu(h)?;
        }
        let pooled = tape.global_avg_pool(h)?;
        let pooled = tape.reshape(pooled, vec![1, 64])?;
        let proj = linear(tape, b, "img.proj", pooled)?;
        let unit = tape.l2_normalize_rows(proj)?;
        tape.reshape(unit, vec![JOINT_DIM])
    }

    pub fn encode(&self, image: &[f32]) -> Result<Tensor> {
        if image.len() != self.height * self.width {
            return Err(Error::shape(
                "ImageEncoder::encode",
                format!("expected {} pixels, got {}", self.height * self.width, image.len()),
            ));
        }
        let t = Tensor::from_vec(vec![1, self.height, self.width], image.to_vec())?;
        let mut tape = Tape::new();
        let b = BoundParams::bind(&mut tape, &self.params, false)?;
        let x = tape.constant(&t)?;
        let e = self.forward_on(&mut tape, &b, x)?;
        Ok(tape.value(e).clone())
    }
}

pub fn cosine(a: &Tensor, b: &Tensor) -> f32 {
    let (na, nb) = (
        a.data().iter().map(|v| v * v).sum::<f32>().sqrt().max(1e-12),
        b.data().iter().map(|v| v * v).sum::<f32>().sqrt().max(1e-12),
    );
    a.data().iter().zip(b.data()).map(|(x, y)| x * y).sum::<f32>() / (na * nb)
}

// ---- contrastive training ----

#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ContrastiveConfig {
    pub steps: usize,
    pub batch: usize,
    pub lr: f32,
    pub seed: u64,
}

impl Default for ContrastiveConfig {
    fn default() -> Self {
        ContrastiveConfig { steps: 200, batch: 16, lr: 2e-3, seed: 11 }
    }
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct ContrastiveStats {
    pub initial_loss: f32,
    pub final_loss: f32,
    /// Mean matched-pair cosine minus mean mismatched cosine on held-out data.
    pub margin: f32,
    pub losses: Vec<f32>,
}

fn batch_loss(
    txt: &TextEncoder,
    img: &ImageEncoder,
    tape: &mut Tape,
    bt: &BoundParams,
    bi: &BoundParams,
    tokens: &[TokenSequence],
    images: &[&[f32]],
) -> Result<Var> {
    let mut t_rows = Vec::with_capacity(tokens.len());
    let mut i_rows = Vec::with_capacity(tokens.len());
    for (tok, px) in tokens.iter().zip(images) {
        let (joint, _) = txt.forward_on(tape, bt, tok)?;
        t_rows.push(joint);
        let t = Tensor::from_vec(vec![1, img.height, img.width], px.to_vec())?;
        let x = tape.constant(&t)?;
        i_rows.push(img.forward_on(tape, bi, x)?);
    }
    let te = tape.stack_rows(&t_rows)?;
    let ie = tape.stack_rows(&i_rows)?;
    let logits_t = tape.matmul_nt(te, ie)?;
    let logits_t = tape.scale(logits_t, 1.0 / CONTRASTIVE_TEMPERATURE)?;
    let logits_i = tape.matmul_nt(ie, te)?;
    let logits_i = tape.scale(logits_i, 1.0 / CONTRASTIVE_TEMPERATURE)?;
    let targets: Vec<usize> = (0..tokens.len()).collect();
    let ce_t = tape.cross_entropy_rows(logits_t, &targets)?;
    let ce_i = tape.cross_entropy_rows(logits_i, &targets)?;
    tape.add(ce_t, ce_i)
}

/// Symmetric in-batch contrastive training (CLIP-style) of both encoders.
pub fn train_contrastive(corpus: &Corpus, cfg: &ContrastiveConfig) -> Result<(TextEncoder, ImageEncoder, ContrastiveStats)> {
    if cfg.batch < 8 {
        return Err(Error::InvalidArg("contrastive batch must be >= 8".into()));
    }
    let vocab = Vocabulary::closed();
    let train: Vec<_> = corpus.split(Split::Train).collect();
    if train.len() < cfg.batch {
        return Err(Error::InvalidArg("corpus smaller than one batch".into()));
    }
    let distinct: std::collections::BTreeSet<_> = train.iter().map(|s| s.caption.text.clone()).collect();
    if distinct.len() < 2 {
        return Err(Error::InvalidArg("degenerate corpus: a single caption class".into()));
    }
    let txt = TextEncoder::init(cfg.seed.wrapping_add(1));
    let img = ImageEncoder::init(cfg.seed.wrapping_add(2), corpus.spec.height, corpus.spec.width);
    let mut txt = txt;
    let mut img = img;
    let mut adam_t = AdamState::new(&txt.params, cfg.lr);
    let mut adam_i = AdamState::new(&img.params, cfg.lr);
    let mut r = rng(cfg.seed);
    let mut losses = Vec::with_capacity(cfg.steps);
    let mut initial_loss = 0.0;
    for step in 0..cfg.steps {
        let mut idx: Vec<usize> = (0..train.len()).collect();
        idx.shuffle(&mut r);
        let batch = &idx[..cfg.batch];
        let tokens: Vec<TokenSequence> = batch
            .iter()
            .map(|&i| vocab.tokenize(&train[i].caption.text))
            .collect::<Result<_>>()?;
        let images: Vec<&[f32]> = batch.iter().map(|&i| train[i].image.as_slice()).collect();
        let mut tape = Tape::new();
        let bt = BoundParams::bind(&mut tape, &txt.params, true)?;
        let bi = BoundParams::bind(&mut tape, &img.params, true)?;
        let loss = batch_loss(&txt, &img, &mut tape, &bt, &bi, &tokens, &images)?;
        let loss_val = tape.value(loss).item();
        if step == 0 {
            initial_loss = loss_val;
        }
        losses.push(loss_val);
        let grads = tape.backward(loss)?;
        let gt = bt.grads(&grads);
        let gi = bi.grads(&grads);
        adam_t.step(&mut txt.params, &gt)?;
        adam_i.step(&mut img.params, &gi)?;
    }
    let margin = matched_margin(&txt, &img, corpus, Split::Val)?;
    let final_loss = *losses.last().unwrap_or(&initial_loss);
    Ok((txt, img, ContrastiveStats { initial_loss, final_loss, margin, losses }))
}

/// Mean matched-pair cosine minus mean mismatched cosine over a split.
pub fn matched_margin(txt: &TextEncoder, img: &ImageEncoder, corpus: &Corpus, split: Split) -> Result<f32> {
    let vocab = Vocabulary::closed();
    let samples: Vec<_> = corpus.split(split).take(48).collect();
    if samples.len() < 2 {
        return Err(Error::InvalidArg("split too small for margin measurement".into()));
    }
    let mut t_embs = Vec::new();
    let mut i_embs = Vec::new();
    for s in &samples {
        let tok = vocab.tokenize(&s.caption.text)?;
        t_embs.push(txt.encode(&tok)?.0);
        i_embs.push(img.encode(&s.image)?);
    }
    let (mut matched, mut mismatched) = (0.0f64, 0.0f64);
    let (mut nm, mut nx) = (0usize, 0usize);
    for (i, te) in t_embs.iter().enumerate() {
        for (j, ie) in i_embs.iter().enumerate() {
            let c = cosine(te, ie) as f64;
            let same = samples[i].caption.text == samples[j].caption.text;
            if same {
                matched += c;
                nm += 1;
            } else {
                mismatched += c;
                nx += 1;
            }
        }
    }
    Ok((matched / nm.max(1) as f64 - mismatched / nx.max(1) as f64) as f32)
}

/// Caption→image top-1 retrieval over a batch, scored at caption-class level
/// (duplicate captions make exact-index retrieval ill-posed).
pub fn retrieval_accuracy(txt: &TextEncoder, img: &ImageEncoder, corpus: &Corpus, split: Split, n: usize) -> Result<f32> {
    let vocab = Vocabulary::closed();
    let samples: Vec<_> = corpus.split(split).take(n).collect();
    if samples.is_empty() {
        return Err(Error::InvalidArg("empty split for retrieval".into()));
    }
    let i_embs: Vec<Tensor> = samples.iter().map(|s| img.encode(&s.image)).collect::<Result<_>>()?;
    let mut correct = 0usize;
    for (i, s) in samples.iter().enumerate() {
        let tok = vocab.tokenize(&s.caption.text)?;
        let te = txt.encode(&tok)?.0;
        let best = i_embs
            .iter()
            .enumerate()
            .max_by(|(_, a), (_, b)| cosine(&te, a).total_cmp(&cosine(&te, b)))
            .map(|(j, _)| j)
            .unwrap();
        if samples[best].caption.text == samples[i].caption.text {
            correct += 1;
        }
    }
    Ok(correct as f32 / samples.len() as f32)
}

// ---- latent autoencoder ----

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum CodecMode {
    Learned,
    /// Identity codec: latent == image, used to isolate diffusion/editing
    /// correctness from codec error in fast tests.
    PixelBypass,
}

/// Deterministic conv autoencoder: [1,H,W] -> [4,H/4,W/4] -> [1,H,W].
#[derive(Debug, Clone)]
pub struct LatentAutoencoder {
    pub params: ParamSet,
    pub mode: CodecMode,
    pub height: usize,
    pub width: usize,
    /// Divisor applied after encoding so latents are roughly unit-scale.
    pub latent_scale: f32,
    /// Mean abs reconstruction error recorded at the end of training.
    pub train_recon_error: f32,
}

pub const LATENT_CHANNELS: usize = 4;

impl LatentAutoencoder {
    pub fn init(seed: u64, height: usize, width: usize) -> Result<Self> {
        if height % 4 != 0 || width % 4 != 0 {
            return Err(Error::InvalidArg("autoencoder needs H and W divisible by 4".into()));
        }
        let mut r = rng(seed);
        let mut p = ParamSet::new();
        init_conv(&mut p, "ae.e0", 1, 16, 3, &mut r);
        init_conv(&mut p, "ae.e1", 16, 32, 3, &mut r);
        init_conv(&mut p, "ae.e2", 32, 32, 3, &mut r);
        init_conv(&mut p, "ae.e3", 32, LATENT_CHANNELS, 3, &mut r);
        init_conv(&mut p, "ae.d0", LATENT_CHANNELS, 32, 3, &mut r);
        init_conv(&mut p, "ae.d1", 32, 16, 3, &mut r);
        init_conv(&mut p, "ae.d2", 16, 16, 3, &mut r);
        init_conv(&mut p, "ae.d3", 16, 1, 3, &mut r);
        Ok(LatentAutoencoder {
            params: p,
            mode: CodecMode::Learned,
            height,
            width,
            latent_scale: 1.0,
            train_recon_error: f32::INFINITY,
        })
    }

    pub fn pixel_bypass(height: usize, width: usize) -> Self {
        LatentAutoencoder {
            params: ParamSet::new(),
            mode: CodecMode::PixelBypass,
            height,
            width,
            latent_scale: 1.0,
            train_recon_error: 0.0,
        }
    }

    pub fn latent_shape(&self) -> Vec<usize> {
        match self.mode {
            CodecMode::Learned => vec![LATENT_CHANNELS, self.height / 4, self.width / 4],
            CodecMode::PixelBypass => vec![1, self.height, self.width],
        }
    }

    fn check_image_shape(&self, s: &[usize]) -> Result<()> {
        if s != [1, self.height, self.width] {
            return Err(Error::shape(
                "LatentAutoencoder",
                format!("expected [1, {}, {}], got {:?}", self.height, self.width, s),
            ));
        }
        Ok(())
    }

    fn encode_on(&self, tape: &mut Tape, b: &BoundParams, x: Var) -> Result<Var> {
        let mut h = conv(tape, b, "ae.e0", x, 1, 1)?;
        h = tape.silu(h)?;
        h = conv(tape, b, "ae.e1", h, 2, 1)?;
        h = tape.silu(h)?;
        h = conv(tape, b, "ae.e2", h, 1, 1)?;
        h = tape.silu(h)?;
        conv(tape, b, "ae.e3", h, 2, 1)
    }

    fn decode_on(&self, tape: &mut Tape, b: &BoundParams, z: Var) -> Result<Var> {
        let mut h = conv(tape, b, "ae.d0", z, 1, 1)?;
        h = tape.silu(h)?;
        h = tape.upsample2(h)?;
        h = conv(tape, b, "ae.d1", h, 1, 1)?;
        h = tape.silu(h)?;
        h = tape.upsample2(h)?;
        h = conv(tape, b, "ae.d2", h, 1, 1)?;
        h = tape.silu(h)?;
        let h = conv(tape, b, "ae.d3", h, 1, 1)?;
        tape.sigmoid(h)
    }

    /// image [1,H,W] -> latent (scaled by 1/latent_scale in learned mode).
    pub fn encode(&self, image: &Tensor) -> Result<Tensor> {
        self.check_image_shape(image.shape())?;
        match self.mode {
            CodecMode::PixelBypass => Ok(image.clone()),
            CodecMode::Learned => {
                let mut tape = Tape::new();
                let b = BoundParams::bind(&mut tape, &self.params, false)?;
                let x = tape.constant(image)?;
                let z = self.encode_on(&mut tape, &b, x)?;
                Ok(tape.value(z).map(|v| v / self.latent_scale))
            }
        }
    }

    /// latent -> image [1,H,W] in [0,1].
    pub fn decode(&self, latent: &Tensor) -> Result<Tensor> {
        if latent.shape() != self.latent_shape().as_slice() {
            return Err(Error::shape(
                "LatentAutoencoder::decode",
                format!("expected {:?}, got {:?}", self.latent_shape(), latent.shape()),
            ));
        }
        match self.mode {
            CodecMode::PixelBypass => Ok(latent.clone()),
            CodecMode::Learned => {
                let mut tape = Tape::new();
                let b = BoundParams::bind(&mut tape, &self.params, false)?;
                let scaled = latent.map(|v| v * self.latent_scale);
                let z = tape.constant(&scaled)?;
                let x = self.decode_on(&mut tape, &b, z)?;
                Ok(tape.value(x).clone())
            }
        }
    }
}

#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct AutoencoderConfig {
    pub steps: usize,
    pub batch: usize,
    pub lr: f32,
    pub seed: u64,
}

impl Default for AutoencoderConfig {
    fn default() -> Self {
        AutoencoderConfig { steps: 300, batch: 8, lr: 2e-3, seed: 13 }
    }
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct AutoencoderStats {
    pub final_train_error: f32,
    pub heldout_error: f32,
    pub latent_scale: f32,
}

/// MSE reconstruction training; records the final train mean-abs error and
/// calibrates `latent_scale` to the train latent standard deviation.
pub fn train_autoencoder(corpus: &Corpus, cfg: &AutoencoderConfig) -> Result<(LatentAutoencoder, AutoencoderStats)> {
    let train: Vec<_> = corpus.split(Split::Train).collect();
    if train.len() < cfg.batch.max(1) {
        return Err(Error::InvalidArg("corpus smaller than one autoencoder batch".into()));
    }
    let mut ae = LatentAutoencoder::init(cfg.seed, corpus.spec.height, corpus.spec.width)?;
    let mut adam = AdamState::new(&ae.params, cfg.lr);
    let mut r = rng(cfg.seed.wrapping_add(1));
    for _ in 0..cfg.steps {
        let mut tape = Tape::new();
        let b = BoundParams::bind(&mut tape, &ae.params, true)?;
        let mut loss = None;
        for _ in 0..cfg.batch {
            let s = train[r.gen_range(0..train.len())];
            let t = Tensor::from_vec(vec![1, ae.height, ae.width], s.image.clone())?;
            let x = tape.constant(&t)?;
            let z = ae.encode_on(&mut tape, &b, x)?;
            let y = ae.decode_on(&mut tape, &b, z)?;
            let l = tape.mse(y, x)?;
            loss = Some(match loss {
                None => l,
                Some(acc) => tape.add(acc, l)?,
            });
        }
        let loss = tape.scale(loss.unwrap(), 1.0 / cfg.batch as f32)?;
        let grads = tape.backward(loss)?;
        let g = b.grads(&grads);
        adam.step(&mut ae.params, &g)?;
    }

    let mae = |ae: &LatentAutoencoder, samples: &[&crate::synthdata::SyntheticSample]| -> Result<f32> {
        let mut acc = 0.0f64;
        for s in samples {
            let t = Tensor::from_vec(vec![1, ae.height, ae.width], s.image.clone())?;
            let z = ae.encode(&t)?;
            let y = ae.decode(&z)?;
            acc += t.mean_abs_diff(&y) as f64;
        }
        Ok((acc / samples.len() as f64) as f32)
    };
    let train_sub: Vec<_> = train.iter().copied().take(32).collect();
    ae.train_recon_error = mae(&ae, &train_sub)?;

    // Latent std over a train subset; applied as a divisor so diffusion sees
    // roughly unit-scale latents.
    let mut acc = 0.0f64;
    let mut n = 0usize;
    for s in train.iter().take(32) {
        let t = Tensor::from_vec(vec![1, ae.height, ae.width], s.image.clone())?;
        let z = ae.encode(&t)?;
        for v in z.data() {
            acc += (*v as f64) * (*v as f64);
        }
        n += z.numel();
    }
    ae.latent_scale = (acc / n as f64).sqrt().max(1e-3) as f32;
    ae.train_recon_error = mae(&ae, &train_sub)?;

    let heldout: Vec<_> = corpus.split(Split::Val).take(32).collect();
    let heldout_error = if heldout.is_empty() { ae.train_recon_error } else { mae(&ae, &heldout)? };
    let stats = AutoencoderStats {
        final_train_error: ae.train_recon_error,
        heldout_error,
        latent_scale: ae.latent_scale,
    };
    Ok((ae, stats))
}
