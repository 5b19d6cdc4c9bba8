//! Dense tensors, the autodiff tape, the adaptive-moment optimizer, and the
//! finite-difference verification harness.

mod adam;
mod fdcheck;
mod gradsuite;
mod params;
mod tape;
mod tensor;

pub use adam::AdamState;
pub use fdcheck::finite_diff_check;
pub use gradsuite::{gradient_suite, GradCheckResult};
pub use params::{check_grads_finite, BoundParams, ParamSet};
pub use tape::{AttentionOverride, CapturedAttention, Gradients, Tape, Var};
pub use tensor::Tensor;

use rand::SeedableRng;
use rand_chacha::ChaCha12Rng;

/// The one seeded RNG used everywhere; ChaCha keeps streams identical across
/// platforms.
pub fn rng(seed: u64) -> ChaCha12Rng {
    ChaCha12Rng::seed_from_u64(seed)
}
