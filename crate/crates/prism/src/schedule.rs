//! Noise schedules and the deterministic diffusion arithmetic: DDPM noising
//! for training, DDIM stepping and its algebraic inverse for editing.
//!
//! Timesteps are `i32`; the sentinel `-1` denotes the clean state with
//! cumulative signal `alpha_bar == 1`, which is where a full sampling chain
//! terminates and where inversion starts.

use serde::{Deserialize, Serialize};

use crate::numerics::Tensor;
use crate::{Error, Result};

pub const CLEAN_T: i32 = -1;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ScheduleKind {
    Linear,
    ScaledLinear,
}

/// Precomputed beta / alpha-bar tables for `T` trained timesteps.
#[derive(Debug, Clone)]
pub struct DiffusionSchedule {
    pub kind: ScheduleKind,
    pub total_timesteps: usize,
    pub beta_start: f64,
    pub beta_end: f64,
    betas: Vec<f64>,
    alpha_bars: Vec<f64>,
}

pub fn make_schedule(
    kind: ScheduleKind,
    total_timesteps: usize,
    beta_start: f64,
    beta_end: f64,
) -> Result<DiffusionSchedule> {
    if total_timesteps == 0 {
        return Err(Error::InvalidArg("make_schedule: T must be >= 1".into()));
    }
    if !(beta_start > 0.0 && beta_start <= beta_end && beta_end < 1.0) {
        return Err(Error::InvalidArg(format!(
            "make_schedule: need 0 < beta_start <= beta_end < 1, got {beta_start} / {beta_end}"
        )));
    }
    let t_max = total_timesteps;
    let mut betas = Vec::with_capacity(t_max);
    for t in 0..t_max {
        // Endpoints are assigned exactly; interior points interpolate either
        // beta (linear) or sqrt(beta) (scaled_linear).
        let beta = if t == 0 {
            beta_start
        } else if t == t_max - 1 {
            beta_end
        } else {
            let frac = t as f64 / (t_max - 1) as f64;
            match kind {
                ScheduleKind::Linear => beta_start + frac * (beta_end - beta_start),
                ScheduleKind::ScaledLinear => {
                    let s = beta_start.sqrt() + frac * (beta_end.sqrt() - beta_start.sqrt());
                    s * s
                }
            }
        };
        betas.push(beta);
    }
    let mut alpha_bars = Vec::with_capacity(t_max);
    let mut prod = 1.0f64;
    for &b in &betas {
        prod *= 1.0 - b;
        alpha_bars.push(prod);
    }
    Ok(DiffusionSchedule { kind, total_timesteps, beta_start, beta_end, betas, alpha_bars })
}

impl DiffusionSchedule {
    pub fn betas(&self) -> &[f64] {
        &self.betas
    }

    pub fn alpha_bars(&self) -> &[f64] {
        &self.alpha_bars
    }

    /// Cumulative signal at timestep `t`; `CLEAN_T` maps to 1.
    pub fn alpha_bar(&self, t: i32) -> Result<f64> {
        if t == CLEAN_T {
            return Ok(1.0);
        }
        if t < 0 || t as usize >= self.total_timesteps {
            return Err(Error::InvalidArg(format!(
                "timestep {t} outside [0, {})",
                self.total_timesteps
            )));
        }
        Ok(self.alpha_bars[t as usize])
    }
}

/// Inference-time subset of timesteps, ascending, uniform stride over
/// `[0, T-1]` with the last entry at `T-1`.
#[derive(Debug, Clone)]
pub struct TimestepPlan {
    steps: Vec<i32>,
}

impl TimestepPlan {
    pub fn uniform(total_timesteps: usize, num_steps: usize) -> Result<Self> {
        if num_steps == 0 || num_steps > total_timesteps {
            return Err(Error::InvalidArg(format!(
                "plan: need 1 <= S <= T, got S={num_steps}, T={total_timesteps}"
            )));
        }
        let stride = total_timesteps / num_steps;
        let steps: Vec<i32> = (0..num_steps).map(|i| ((i + 1) * stride - 1) as i32).collect();
        debug_assert!(steps.windows(2).all(|w| w[0] < w[1]));
        Ok(TimestepPlan { steps })
    }

    /// Ascending timesteps (inversion order). The conceptual predecessor of
    /// `steps()[0]` is the clean state `CLEAN_T`.
    pub fn steps(&self) -> &[i32] {
        &self.steps
    }

    pub fn len(&self) -> usize {
        self.steps.len()
    }

    pub fn is_empty(&self) -> bool {
        self.steps.is_empty()
    }

    /// Timestep preceding plan position `i` in the sampling direction.
    pub fn prev(&self, i: usize) -> i32 {
        if i == 0 {
            CLEAN_T
        } else {
            self.steps[i - 1]
        }
    }
}

/// x_t = sqrt(abar_t) x0 + sqrt(1 - abar_t) eps
pub fn add_noise(x0: &Tensor, eps: &Tensor, t: i32, s: &DiffusionSchedule) -> Result<Tensor> {
    if x0.shape() != eps.shape() {
        return Err(Error::shape("add_noise", format!("{:?} vs {:?}", x0.shape(), eps.shape())));
    }
    if t < 0 {
        return Err(Error::InvalidArg(format!("add_noise: timestep {t} out of range")));
    }
    let abar = s.alpha_bar(t)?;
    let (ca, cb) = (abar.sqrt() as f32, (1.0 - abar).sqrt() as f32);
    let data = x0
        .data()
        .iter()
        .zip(eps.data())
        .map(|(a, b)| ca * a + cb * b)
        .collect();
    Tensor::from_vec(x0.shape().to_vec(), data)
}

/// Coefficients of one deterministic DDIM transition from `t` to `t_prev`:
/// x_prev = c_x * x_t + c_e * eps_pred.
pub fn ddim_coeffs(t: i32, t_prev: i32, s: &DiffusionSchedule) -> Result<(f32, f32)> {
    if t <= t_prev || t_prev < CLEAN_T {
        return Err(Error::InvalidArg(format!(
            "ddim_step: need t > t_prev >= {CLEAN_T}, got t={t}, t_prev={t_prev}"
        )));
    }
    let abar_t = s.alpha_bar(t)?;
    let abar_p = s.alpha_bar(t_prev)?;
    let ratio = (abar_p / abar_t).sqrt();
    let c_x = ratio;
    let c_e = (1.0 - abar_p).sqrt() - ratio * (1.0 - abar_t).sqrt();
    Ok((c_x as f32, c_e as f32))
}

fn affine(x: &Tensor, eps: &Tensor, cx: f32, ce: f32) -> Result<Tensor> {
    if x.shape() != eps.shape() {
        return Err(Error::shape("ddim", format!("{:?} vs {:?}", x.shape(), eps.shape())));
    }
    let data = x
        .data()
        .iter()
        .zip(eps.data())
        .map(|(a, b)| cx * a + ce * b)
        .collect();
    Tensor::from_vec(x.shape().to_vec(), data)
}

/// Deterministic (eta = 0) DDIM sampling step: predicts x0 from the noise
/// estimate, then re-noises to `t_prev`.
pub fn ddim_step(
    x_t: &Tensor,
    eps_pred: &Tensor,
    t: i32,
    t_prev: i32,
    s: &DiffusionSchedule,
) -> Result<Tensor> {
    if t == t_prev {
        // degenerate step
        return Ok(x_t.clone());
    }
    let (cx, ce) = ddim_coeffs(t, t_prev, s)?;
    affine(x_t, eps_pred, cx, ce)
}

/// Exact algebraic inverse of `ddim_step` for the same `eps_pred`.
pub fn ddim_invert_step(
    x_prev: &Tensor,
    eps_pred: &Tensor,
    t_prev: i32,
    t: i32,
    s: &DiffusionSchedule,
) -> Result<Tensor> {
    if t == t_prev {
        return Ok(x_prev.clone());
    }
    let (cx, ce) = ddim_coeffs(t, t_prev, s)?;
    affine(x_prev, eps_pred, 1.0 / cx, -ce / cx)
}
