//! Three-step counterfactual editing: DDIM inversion with per-timestep
//! null-text optimization, attention-controlled guided re-generation, and
//! embedding-space edit scoring with an acceptance filter.


use serde::{Deserialize, Serialize};

use crate::captions::{TokenSequence, TOKEN_LEN};
use crate::denoiser::{cfg_eps, UNet, CROSS_ATTN_TAGS};
use crate::encoders::{cosine, ImageEncoder, LatentAutoencoder, TextEncoder};
use crate::numerics::{AdamState, AttentionOverride, BoundParams, CapturedAttention, Tape, Tensor};
use crate::schedule::{ddim_coeffs, ddim_invert_step, ddim_step, DiffusionSchedule, TimestepPlan};
use crate::{Error, Result};

#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct EditConfig {
    /// Classifier-free guidance weight at edit time.
    pub guidance: f32,
    /// Guidance weight used when building the inversion trajectory; 1 means
    /// pure conditional prediction (standard null-text practice).
    pub inversion_guidance: f32,
    pub n_inner: usize,
    pub inner_lr: f32,
    /// Attention injection fraction: maps are injected for the first
    /// ceil(tau * S) denoising steps.
    pub tau: f32,
    /// S_CLIP acceptance threshold; boundary inclusive.
    pub threshold: f32,
}

impl Default for EditConfig {
    fn default() -> Self {
        EditConfig {
            guidance: 7.5,
            inversion_guidance: 1.0,
            n_inner: 10,
            inner_lr: 1e-2,
            tau: 0.8,
            threshold: 0.1,
        }
    }
}

impl EditConfig {
    pub fn validate(&self) -> Result<()> {
        if !(0.0..=1.0).contains(&self.tau) {
            return Err(Error::InvalidArg(format!("tau {} outside [0, 1]", self.tau)));
        }
        if !(-1.0..=1.0).contains(&self.threshold) {
            return Err(Error::InvalidArg(format!("threshold {} outside [-1, 1]", self.threshold)));
        }
        if self.guidance < 0.0 || self.inversion_guidance < 0.0 {
            return Err(Error::InvalidArg("guidance weights must be >= 0".into()));
        }
        Ok(())
    }
}

const EARLY_STOP_LOSS: f32 = 1e-5;
const DIVERGENCE_FACTOR: f32 = 10.0;

/// Latents {z_0, z_(steps[0]), ..., z_(steps[S-1])}; index i+1 holds the
/// latent at plan timestep i, index 0 the clean latent.
#[derive(Debug, Clone)]
pub struct LatentTrajectory {
    pub latents: Vec<Tensor>,
    pub plan: TimestepPlan,
}

impl LatentTrajectory {
    pub fn z_t(&self) -> &Tensor {
        self.latents.last().expect("trajectory is never empty")
    }
}

/// Optimized per-timestep unconditional context sequences, indexed by plan
/// position, with the inner-loop loss before/after each optimization.
#[derive(Debug, Clone)]
pub struct NullEmbeddings {
    pub contexts: Vec<Tensor>,
    pub loss_before: Vec<f32>,
    pub loss_after: Vec<f32>,
}

#[derive(Debug, Clone)]
pub struct EditSession {
    pub image_orig: Tensor,
    pub reconstruction: Tensor,
    pub image_cf: Tensor,
    pub p_orig: TokenSequence,
    pub p_edit: TokenSequence,
    pub score: f32,
    pub accepted: bool,
}

/// JSON-friendly summary of a session.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct EditSessionRecord {
    pub p_orig: Vec<u32>,
    pub p_edit: Vec<u32>,
    pub score: f32,
    pub accepted: bool,
}

impl EditSession {
    pub fn record(&self) -> EditSessionRecord {
        EditSessionRecord {
            p_orig: self.p_orig.ids.clone(),
            p_edit: self.p_edit.ids.clone(),
            score: self.score,
            accepted: self.accepted,
        }
    }
}

/// Borrowed bundle of the frozen models an edit session runs against.
pub struct Editor<'a> {
    pub unet: &'a UNet,
    pub ae: &'a LatentAutoencoder,
    pub txt: &'a TextEncoder,
    pub schedule: &'a DiffusionSchedule,
    pub plan: &'a TimestepPlan,
}

impl<'a> Editor<'a> {
    fn contexts(&self, tokens: &TokenSequence) -> Result<Tensor> {
        Ok(self.txt.encode(tokens)?.1)
    }

    fn null_context(&self) -> Result<Tensor> {
        self.contexts(&TokenSequence::null())
    }

    /// Step 1a: conditional DDIM inversion of the encoded image, producing
    /// the latent trajectory {z_0 ... z_T}.
    pub fn invert_trajectory(&self, image: &Tensor, p_orig: &TokenSequence, cfg: &EditConfig) -> Result<LatentTrajectory> {
        cfg.validate()?;
        let ctx = self.contexts(p_orig)?;
        let null_ctx = self.null_context()?;
        let z0 = self.ae.encode(image)?;
        let mut latents = vec![z0];
        for i in 0..self.plan.len() {
            let t = self.plan.steps()[i];
            let t_prev = self.plan.prev(i);
            let z_prev = latents.last().unwrap();
            let eps = if cfg.inversion_guidance == 1.0 {
                self.unet.predict(z_prev, t, &ctx)?
            } else {
                let eps_u = self.unet.predict(z_prev, t, &null_ctx)?;
                let eps_c = self.unet.predict(z_prev, t, &ctx)?;
                cfg_eps(&eps_u, &eps_c, cfg.inversion_guidance)?
            };
            latents.push(ddim_invert_step(z_prev, &eps, t_prev, t, self.schedule)?);
        }
        Ok(LatentTrajectory { latents, plan: self.plan.clone() })
    }

    /// Step 1b: per-timestep null-text optimization. For each plan position
    /// (from z_T down) the unconditional context is tuned to pull the guided
    /// DDIM step back onto the recorded trajectory; the corrected latent is
    /// carried forward. The best-loss iterate is kept (monotone acceptance).
    pub fn optimize_null_text(&self, traj: &LatentTrajectory, p_orig: &TokenSequence, cfg: &EditConfig) -> Result<NullEmbeddings> {
        cfg.validate()?;
        let ctx = self.contexts(p_orig)?;
        let s = self.plan.len();
        let mut contexts = vec![Tensor::zeros(vec![TOKEN_LEN, 64]); s];
        let mut loss_before = vec![0.0f32; s];
        let mut loss_after = vec![0.0f32; s];
        let mut e_uncond = self.null_context()?;
        let mut zbar = traj.z_t().clone();
        for i in (0..s).rev() {
            let t = self.plan.steps()[i];
            let t_prev = self.plan.prev(i);
            let target = &traj.latents[i];
            let (c_x, c_e) = ddim_coeffs(t, t_prev, self.schedule)?;
            // The conditional branch does not depend on E_uncond; predict once.
            let eps_c = self.unet.predict(&zbar, t, &ctx)?;
            let mut best = e_uncond.clone();
            let mut best_loss = f32::INFINITY;
            let mut initial = f32::INFINITY;
            let mut adam = AdamState::for_tensor(&e_uncond, cfg.inner_lr);
            let iters = cfg.n_inner.max(1);
            for iter in 0..iters {
                let mut tape = Tape::new();
                let b = BoundParams::bind(&mut tape, &self.unet.params, false)?;
                let ev = tape.leaf(&e_uncond, true)?;
                let zv = tape.constant(&zbar)?;
                let eps_u = self.unet.forward_on(&mut tape, &b, zv, t, ev)?;
                // eps_hat = (1-w)·eps_u + w·eps_c ; z_hat = c_x·z + c_e·eps_hat
                let eps_scaled = tape.scale(eps_u, (1.0 - cfg.guidance) * c_e)?;
                let fixed = zbar.map(|v| v * c_x);
                let fixed = add_tensors(&fixed, &eps_c.map(|v| v * cfg.guidance * c_e))?;
                let fv = tape.constant(&fixed)?;
                let z_hat = tape.add(fv, eps_scaled)?;
                let tv = tape.constant(target)?;
                let loss = tape.mse(z_hat, tv)?;
                let lv = tape.value(loss).item();
                if iter == 0 {
                    initial = lv;
                    loss_before[i] = lv;
                }
                if lv < best_loss {
                    best_loss = lv;
                    best = e_uncond.clone();
                }
                if lv > DIVERGENCE_FACTOR * initial && iter > 0 {
                    return Err(Error::Diverged(format!(
                        "null-text optimization at t={t}: loss {lv} exceeds 10x initial {initial}"
                    )));
                }
                if cfg.n_inner == 0 || lv < EARLY_STOP_LOSS {
                    break;
                }
                if iter + 1 < iters {
                    let grads = tape.backward(loss)?;
                    let g = grads
                        .get(ev)
                        .ok_or_else(|| Error::InvalidArg("null-text context received no gradient".into()))?
                        .to_vec();
                    adam.step_tensor(&mut e_uncond, &g)?;
                }
            }
            loss_after[i] = best_loss.min(loss_before[i]);
            e_uncond = best.clone();
            contexts[i] = best;
            // Carry the corrected latent forward along the guided path.
            let eps_u = self.unet.predict(&zbar, t, &contexts[i])?;
            let eps = cfg_eps(&eps_u, &eps_c, cfg.guidance)?;
            zbar = ddim_step(&zbar, &eps, t, t_prev, self.schedule)?;
        }
        Ok(NullEmbeddings { contexts, loss_before, loss_after })
    }

    pub fn invert(&self, image: &Tensor, p_orig: &TokenSequence, cfg: &EditConfig) -> Result<(LatentTrajectory, NullEmbeddings)> {
        let traj = self.invert_trajectory(image, p_orig, cfg)?;
        let nulls = self.optimize_null_text(&traj, p_orig, cfg)?;
        Ok((traj, nulls))
    }

    /// Guided denoising from z_T with the optimized null embeddings; the
    /// identity path underlying both reconstruction and editing.
    fn denoise(
        &self,
        traj: &LatentTrajectory,
        nulls: &NullEmbeddings,
        ctx_cond: &Tensor,
        cfg: &EditConfig,
        mut injection: Option<&mut Injection>,
    ) -> Result<Tensor> {
        if nulls.contexts.len() != self.plan.len() {
            return Err(Error::InvalidArg(
                "null embeddings do not match the timestep plan".into(),
            ));
        }
        let mut z = traj.z_t().clone();
        for i in (0..self.plan.len()).rev() {
            let t = self.plan.steps()[i];
            let t_prev = self.plan.prev(i);
            let eps_u = self.unet.predict(&z, t, &nulls.contexts[i])?;
            let step_index = self.plan.len() - 1 - i;
            let eps_c = match injection.as_deref_mut() {
                Some(inj) if step_index < inj.steps => inj.conditional_eps(self, &z, t, ctx_cond)?,
                _ => self.unet.predict(&z, t, ctx_cond)?,
            };
            let eps = cfg_eps(&eps_u, &eps_c, cfg.guidance)?;
            z = ddim_step(&z, &eps, t, t_prev, self.schedule)?;
        }
        self.ae.decode(&z)
    }

    /// Null-text reconstruction of the source image (the identity edit).
    pub fn reconstruct(&self, traj: &LatentTrajectory, nulls: &NullEmbeddings, p_orig: &TokenSequence, cfg: &EditConfig) -> Result<Tensor> {
        let ctx = self.contexts(p_orig)?;
        self.denoise(traj, nulls, &ctx, cfg, None)
    }

    /// Step 2: attention-controlled editing. For the first ceil(tau*S) steps
    /// the conditional branch's cross-attention columns for tokens shared
    /// between the prompts are replaced by the maps produced under P_orig at
    /// the same state; new tokens attend freely.
    pub fn edit(
        &self,
        traj: &LatentTrajectory,
        nulls: &NullEmbeddings,
        p_orig: &TokenSequence,
        p_edit: &TokenSequence,
        cfg: &EditConfig,
    ) -> Result<Tensor> {
        cfg.validate()?;
        let ctx_orig = self.contexts(p_orig)?;
        let ctx_edit = self.contexts(p_edit)?;
        let inject_steps = ((cfg.tau as f64) * self.plan.len() as f64).ceil() as usize;
        let mut injection = Injection {
            steps: inject_steps,
            ctx_orig,
            column_map: shared_token_columns(p_orig, p_edit),
        };
        self.denoise(traj, nulls, &ctx_edit, cfg, Some(&mut injection))
    }
}

fn add_tensors(a: &Tensor, b: &Tensor) -> Result<Tensor> {
    if a.shape() != b.shape() {
        return Err(Error::shape("add_tensors", format!("{:?} vs {:?}", a.shape(), b.shape())));
    }
    Tensor::from_vec(
        a.shape().to_vec(),
        a.data().iter().zip(b.data()).map(|(x, y)| x + y).collect(),
    )
}

/// Attention-injection state for the conditional branch.
struct Injection {
    steps: usize,
    ctx_orig: Tensor,
    /// (edit key column, orig key column) pairs for shared tokens.
    column_map: Vec<(usize, usize)>,
}

impl Injection {
    /// Runs the conditional forward twice at the same state: once under
    /// P_orig with capture on, then under P_edit with the captured maps
    /// overriding the shared-token columns.
    fn conditional_eps(&self, ed: &Editor<'_>, z: &Tensor, t: i32, ctx_edit: &Tensor) -> Result<Tensor> {
        let (_, tape) = ed.unet.predict_with_tape(z, t, &self.ctx_orig, true)?;
        let captured: Vec<CapturedAttention> = tape.captured().to_vec();
        drop(tape);
        let mut edit_tape = Tape::new();
        for cap in captured {
            edit_tape.set_override(
                cap.tag.clone(),
                AttentionOverride {
                    probs: cap.probs,
                    heads: cap.heads,
                    n_q: cap.n_q,
                    n_k: cap.n_k,
                    column_map: self.column_map.clone(),
                },
            );
        }
        let b = BoundParams::bind(&mut edit_tape, &ed.unet.params, false)?;
        let zv = edit_tape.constant(z)?;
        let cv = edit_tape.constant(ctx_edit)?;
        let out = ed.unet.forward_on(&mut edit_tape, &b, zv, t, cv)?;
        Ok(edit_tape.value(out).clone())
    }
}

/// Longest-common-subsequence alignment of the two token sequences; returns
/// (edit position, orig position) pairs for every matched token.
pub fn shared_token_columns(p_orig: &TokenSequence, p_edit: &TokenSequence) -> Vec<(usize, usize)> {
    let (a, b) = (&p_orig.ids, &p_edit.ids);
    let (n, m) = (a.len(), b.len());
    let mut dp = vec![vec![0u16; m + 1]; n + 1];
    for i in (0..n).rev() {
        for j in (0..m).rev() {
            dp[i][j] = if a[i] == b[j] {
                dp[i + 1][j + 1] + 1
            } else {
                dp[i + 1][j].max(dp[i][j + 1])
            };
        }
    }
    let mut out = Vec::new();
    let (mut i, mut j) = (0, 0);
    while i < n && j < m {
        if a[i] == b[j] {
            out.push((j, i));
            i += 1;
            j += 1;
        } else if dp[i + 1][j] >= dp[i][j + 1] {
            i += 1;
        } else {
            j += 1;
        }
    }
    out
}

/// Captured cross-attention maps for one forward pass, outermost layer first.
pub fn get_attention_maps(unet: &UNet, z: &Tensor, t: i32, ctx: &Tensor) -> Result<Vec<CapturedAttention>> {
    let (_, tape) = unet.predict_with_tape(z, t, ctx, true)?;
    let maps = tape.captured().to_vec();
    if maps.len() != CROSS_ATTN_TAGS.len() {
        return Err(Error::InvalidArg(format!(
            "expected {} captured maps, got {} (capture disabled?)",
            CROSS_ATTN_TAGS.len(),
            maps.len()
        )));
    }
    Ok(maps)
}

/// Step 3 (Eq.-style scoring): cosine between the image-embedding delta and
/// the prompt-embedding delta.
pub fn clip_edit_score(
    img_enc: &ImageEncoder,
    txt_enc: &TextEncoder,
    image_orig: &Tensor,
    image_cf: &Tensor,
    p_orig: &TokenSequence,
    p_edit: &TokenSequence,
) -> Result<f32> {
    let ei_orig = img_enc.encode(image_orig.data())?;
    let ei_cf = img_enc.encode(image_cf.data())?;
    let ep_orig = txt_enc.encode(p_orig)?.0;
    let ep_edit = txt_enc.encode(p_edit)?.0;
    let delta_i = sub(&ei_cf, &ei_orig)?;
    let delta_p = sub(&ep_edit, &ep_orig)?;
    let ni = norm(&delta_i);
    let np = norm(&delta_p);
    if ni < 1e-8 {
        return Err(Error::DegenerateEdit("image delta is numerically zero".into()));
    }
    if np < 1e-8 {
        return Err(Error::DegenerateEdit("prompt delta is numerically zero".into()));
    }
    Ok(cosine(&delta_i, &delta_p))
}

fn sub(a: &Tensor, b: &Tensor) -> Result<Tensor> {
    Tensor::from_vec(
        a.shape().to_vec(),
        a.data().iter().zip(b.data()).map(|(x, y)| x - y).collect(),
    )
}

fn norm(t: &Tensor) -> f32 {
    t.data().iter().map(|v| v * v).sum::<f32>().sqrt()
}

/// Keep sessions with score >= threshold (boundary inclusive).
pub fn filter_edits(sessions: Vec<EditSession>, threshold: f32) -> Vec<EditSession> {
    sessions.into_iter().filter(|s| s.score >= threshold).collect()
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::numerics::rng;

    fn session_with_score(score: f32) -> EditSession {
        EditSession {
            image_orig: Tensor::zeros(vec![1, 4, 4]),
            reconstruction: Tensor::zeros(vec![1, 4, 4]),
            image_cf: Tensor::zeros(vec![1, 4, 4]),
            p_orig: TokenSequence::null(),
            p_edit: TokenSequence::null(),
            score,
            accepted: false,
        }
    }

    #[test]
    fn filter_boundary_is_inclusive() {
        let sessions = vec![session_with_score(0.05), session_with_score(0.10), session_with_score(0.3)];
        let kept = filter_edits(sessions, 0.1);
        let scores: Vec<f32> = kept.iter().map(|s| s.score).collect();
        assert_eq!(scores, vec![0.10, 0.3]);
    }

    #[test]
    fn filter_minus_one_keeps_all_and_empty_stays_empty() {
        let sessions = vec![session_with_score(-0.9), session_with_score(0.0)];
        assert_eq!(filter_edits(sessions, -1.0).len(), 2);
        assert!(filter_edits(Vec::new(), 0.1).is_empty());
    }

    #[test]
    fn lcs_identity_maps_every_position() {
        let p = TokenSequence { ids: vec![2, 3, 4, 1, 0, 0] };
        let m = shared_token_columns(&p, &p);
        assert_eq!(m, (0..6).map(|i| (i, i)).collect::<Vec<_>>());
    }

    #[test]
    fn lcs_skips_inserted_tokens() {
        let a = TokenSequence { ids: vec![2, 3, 5, 1] };
        let b = TokenSequence { ids: vec![2, 9, 3, 5, 1] };
        let m = shared_token_columns(&a, &b);
        assert_eq!(m, vec![(0, 0), (2, 1), (3, 2), (4, 3)]);
    }

    #[test]
    fn cfg_eps_special_cases() {
        let mut r = rng(1);
        let u = Tensor::randn(vec![2, 3], 1.0, &mut r);
        let c = Tensor::randn(vec![2, 3], 1.0, &mut r);
        assert!(cfg_eps(&u, &c, 1.0).unwrap().max_abs_diff(&c) < 1e-6);
        assert_eq!(cfg_eps(&u, &c, 0.0).unwrap().data(), u.data());
        // cond == uncond: any w returns the shared prediction.
        assert!(cfg_eps(&u, &u, 7.5).unwrap().max_abs_diff(&u) < 1e-6);
    }

    #[test]
    fn degenerate_edit_is_an_error_not_a_score() {
        let img_enc = ImageEncoder::init(4, 32, 32);
        let txt_enc = TextEncoder::init(5);
        let mut r = rng(2);
        let img = Tensor::randn(vec![1, 32, 32], 0.1, &mut r).map(|v| v.abs().min(1.0));
        let p = TokenSequence::null();
        let err = clip_edit_score(&img_enc, &txt_enc, &img, &img, &p, &p);
        assert!(matches!(err, Err(Error::DegenerateEdit(_))));
    }

    #[test]
    fn clip_score_is_symmetric_under_simultaneous_swap() {
        let img_enc = ImageEncoder::init(4, 32, 32);
        let txt_enc = TextEncoder::init(5);
        let rec_a = crate::captions::AttributeRecord::new(true, false, false);
        let rec_b = crate::captions::AttributeRecord::new(true, false, true);
        let vocab = crate::captions::Vocabulary::closed();
        let pa = vocab
            .tokenize(&crate::captions::caption_from_record(&rec_a).unwrap().text)
            .unwrap();
        let pb = vocab
            .tokenize(&crate::captions::caption_from_record(&rec_b).unwrap().text)
            .unwrap();
        let (ia, _) = crate::synthdata::render(&rec_a, 3, 32, 32).unwrap();
        let (ib, _) = crate::synthdata::render(&rec_b, 3, 32, 32).unwrap();
        let ta = Tensor::from_vec(vec![1, 32, 32], ia).unwrap();
        let tb = Tensor::from_vec(vec![1, 32, 32], ib).unwrap();
        let s1 = clip_edit_score(&img_enc, &txt_enc, &ta, &tb, &pa, &pb).unwrap();
        let s2 = clip_edit_score(&img_enc, &txt_enc, &tb, &ta, &pb, &pa).unwrap();
        assert!((s1 - s2).abs() < 1e-6);
    }

    #[test]
    fn parallel_and_antiparallel_deltas_score_plus_minus_one() {
        // Synthetic embedding check on the cosine itself.
        let a = Tensor::from_vec(vec![3], vec![1.0, 2.0, -1.0]).unwrap();
        let b = Tensor::from_vec(vec![3], vec![2.0, 4.0, -2.0]).unwrap();
        assert!((cosine(&a, &b) - 1.0).abs() < 1e-6);
        let c = Tensor::from_vec(vec![3], vec![-1.0, -2.0, 1.0]).unwrap();
        assert!((cosine(&a, &c) + 1.0).abs() < 1e-6);
    }

    #[test]
    fn invalid_config_rejected() {
        let bad = EditConfig { tau: 1.5, ..EditConfig::default() };
        assert!(bad.validate().is_err());
        let bad = EditConfig { threshold: 2.0, ..EditConfig::default() };
        assert!(bad.validate().is_err());
    }
}
