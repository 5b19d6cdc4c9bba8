//! Finite-difference coverage of every differentiable tape primitive.
//!
//! Each case reduces the op's output to a scalar through a fixed random
//! weighting so that every output coordinate contributes to the gradient.
//! Step sizes are chosen per op: linear and quadratic ops have no truncation
//! error, so a wide step suppresses fp32 round-off; curved ops use a small
//! step with moderate input scales.

use rand::Rng;

use crate::numerics::fdcheck::finite_diff_check;
use crate::numerics::params::ParamSet;
use crate::numerics::rng;
use crate::numerics::tape::{Tape, Var};
use crate::numerics::tensor::Tensor;
use crate::Result;

#[derive(Debug, Clone)]
pub struct GradCheckResult {
    pub op: &'static str,
    /// Max relative error across seeds and sampled coordinates.
    pub max_rel_err: f32,
}

impl GradCheckResult {
    pub fn passes(&self, tol: f32) -> bool {
        self.max_rel_err <= tol
    }
}

const MAX_COORDS: usize = 8;

/// Reduce to a scalar with a fixed random weighting so zero-sum outputs
/// (softmax rows, normalized rows) still exercise their gradients.
fn weighted_sum(tape: &mut Tape, v: Var, seed: u64) -> Result<Var> {
    let shape = tape.shape(v).to_vec();
    // Random signs with magnitudes in [0.75, 1.25]: every coordinate
    // contributes without being shrunk into the fp32 round-off floor, and
    // sums of weights (bias-style gradients) almost surely stay nonzero.
    let mut wr = rng(seed ^ 0x57ed_5eed);
    let numel: usize = shape.iter().product();
    let data: Vec<f32> = (0..numel)
        .map(|_| {
            let sign = if wr.gen::<bool>() { 1.0f32 } else { -1.0 };
            sign * (0.75 + 0.5 * wr.gen::<f32>())
        })
        .collect();
    let w = Tensor::from_vec(shape, data)?;
    let wv = tape.constant(&w)?;
    let prod = tape.mul(v, wv)?;
    tape.sum(prod)
}

fn randn_param(p: &mut ParamSet, name: &str, shape: Vec<usize>, std: f32, r: &mut impl Rng) {
    p.insert(name, Tensor::randn(shape, std, r));
}

fn shifted_param(p: &mut ParamSet, name: &str, shape: Vec<usize>, std: f32, mean: f32, r: &mut impl Rng) {
    let t = Tensor::randn(shape, std, r).map(|v| v + mean);
    p.insert(name, t);
}

struct Case {
    op: &'static str,
    run: fn(u64) -> Result<f32>,
}

macro_rules! case {
    ($op:literal, $run:expr) => {
        Case { op: $op, run: $run }
    };
}

fn check<F>(seed: u64, h: f32, build: impl FnOnce(&mut ParamSet, &mut rand_chacha::ChaCha12Rng), f: F) -> Result<f32>
where
    F: Fn(&mut Tape, &crate::numerics::params::BoundParams) -> Result<Var>,
{
    let mut r = rng(seed);
    let mut p = ParamSet::new();
    build(&mut p, &mut r);
    finite_diff_check(&p, h, MAX_COORDS, seed, f)
}

// Wide steps for ops that are linear or quadratic in their inputs (no
// truncation error); 2e-2 for curved ops at input std <= 1.

fn run_add(s: u64) -> Result<f32> {
    check(s, 0.25, |p, r| {
        randn_param(p, "a", vec![3, 4], 1.0, r);
        randn_param(p, "b", vec![3, 4], 1.0, r);
    }, |t, b| {
        let y = t.add(b.var("a"), b.var("b"))?;
        weighted_sum(t, y, s)
    })
}

fn run_sub(s: u64) -> Result<f32> {
    check(s, 0.25, |p, r| {
        randn_param(p, "a", vec![3, 4], 1.0, r);
        randn_param(p, "b", vec![3, 4], 1.0, r);
    }, |t, b| {
        let y = t.sub(b.var("a"), b.var("b"))?;
        weighted_sum(t, y, s)
    })
}

fn run_mul(s: u64) -> Result<f32> {
    check(s, 0.1, |p, r| {
        randn_param(p, "a", vec![3, 4], 1.0, r);
        randn_param(p, "b", vec![3, 4], 1.0, r);
    }, |t, b| {
        let y = t.mul(b.var("a"), b.var("b"))?;
        weighted_sum(t, y, s)
    })
}

fn run_scale(s: u64) -> Result<f32> {
    check(s, 0.25, |p, r| randn_param(p, "x", vec![2, 5], 1.0, r), |t, b| {
        let y = t.scale(b.var("x"), 1.3)?;
        weighted_sum(t, y, s)
    })
}

fn run_silu(s: u64) -> Result<f32> {
    // silu' crosses zero near x = -1.28; shifted inputs keep the relative
    // error well conditioned at every sampled coordinate.
    check(s, 2e-2, |p, r| shifted_param(p, "x", vec![3, 4], 0.5, 0.5, r), |t, b| {
        let y = t.silu(b.var("x"))?;
        weighted_sum(t, y, s)
    })
}

fn run_gelu(s: u64) -> Result<f32> {
    // gelu' crosses zero near x = -0.75; same conditioning argument as silu.
    check(s, 2e-2, |p, r| shifted_param(p, "x", vec![3, 4], 0.4, 1.0, r), |t, b| {
        let y = t.gelu(b.var("x"))?;
        weighted_sum(t, y, s)
    })
}

fn run_sigmoid(s: u64) -> Result<f32> {
    check(s, 2e-2, |p, r| randn_param(p, "x", vec![3, 4], 0.8, r), |t, b| {
        let y = t.sigmoid(b.var("x"))?;
        weighted_sum(t, y, s)
    })
}

fn run_softplus(s: u64) -> Result<f32> {
    check(s, 2e-2, |p, r| randn_param(p, "x", vec![3, 4], 0.8, r), |t, b| {
        let y = t.softplus(b.var("x"))?;
        weighted_sum(t, y, s)
    })
}

fn run_matmul(s: u64) -> Result<f32> {
    check(s, 5e-2, |p, r| {
        randn_param(p, "a", vec![3, 4], 0.5, r);
        randn_param(p, "b", vec![4, 2], 0.5, r);
    }, |t, b| {
        let y = t.matmul(b.var("a"), b.var("b"))?;
        weighted_sum(t, y, s)
    })
}

fn run_matmul_nt(s: u64) -> Result<f32> {
    check(s, 5e-2, |p, r| {
        randn_param(p, "a", vec![3, 4], 0.5, r);
        randn_param(p, "b", vec![2, 4], 0.5, r);
    }, |t, b| {
        let y = t.matmul_nt(b.var("a"), b.var("b"))?;
        weighted_sum(t, y, s)
    })
}

fn run_conv2d(s: u64) -> Result<f32> {
    check(s, 5e-2, |p, r| {
        randn_param(p, "x", vec![2, 6, 6], 0.5, r);
        randn_param(p, "w", vec![3, 2, 3, 3], 0.5, r);
    }, |t, b| {
        let y = t.conv2d(b.var("x"), b.var("w"), 1, 1)?;
        weighted_sum(t, y, s)
    })
}

fn run_conv2d_strided(s: u64) -> Result<f32> {
    check(s, 5e-2, |p, r| {
        randn_param(p, "x", vec![2, 6, 6], 0.5, r);
        randn_param(p, "w", vec![3, 2, 3, 3], 0.5, r);
    }, |t, b| {
        let y = t.conv2d(b.var("x"), b.var("w"), 2, 1)?;
        weighted_sum(t, y, s)
    })
}

fn run_add_chan_bias(s: u64) -> Result<f32> {
    check(s, 0.25, |p, r| {
        randn_param(p, "x", vec![3, 4, 4], 1.0, r);
        randn_param(p, "b", vec![3], 1.0, r);
    }, |t, b| {
        let y = t.add_chan_bias(b.var("x"), b.var("b"))?;
        weighted_sum(t, y, s)
    })
}

fn run_add_row_bias(s: u64) -> Result<f32> {
    check(s, 0.25, |p, r| {
        randn_param(p, "x", vec![4, 5], 1.0, r);
        randn_param(p, "b", vec![5], 1.0, r);
    }, |t, b| {
        let y = t.add_row_bias(b.var("x"), b.var("b"))?;
        weighted_sum(t, y, s)
    })
}

fn run_group_norm(s: u64) -> Result<f32> {
    check(s, 2e-2, |p, r| {
        randn_param(p, "x", vec![4, 3, 3], 0.8, r);
        // gains bounded away from zero keep per-channel gradients sizeable
        shifted_param(p, "g", vec![4], 0.2, 1.0, r);
        randn_param(p, "b", vec![4], 0.5, r);
    }, |t, b| {
        let y = t.group_norm(b.var("x"), b.var("g"), b.var("b"), 2)?;
        weighted_sum(t, y, s)
    })
}

fn run_layer_norm_rows(s: u64) -> Result<f32> {
    // short rows make the row sigma sensitive to the probe step; halve h
    check(s, 1e-2, |p, r| {
        randn_param(p, "x", vec![3, 6], 0.8, r);
        shifted_param(p, "g", vec![6], 0.2, 1.0, r);
        randn_param(p, "b", vec![6], 0.5, r);
    }, |t, b| {
        let y = t.layer_norm_rows(b.var("x"), b.var("g"), b.var("b"))?;
        weighted_sum(t, y, s)
    })
}

fn run_softmax_rows(s: u64) -> Result<f32> {
    check(s, 2e-2, |p, r| randn_param(p, "x", vec![3, 5], 0.8, r), |t, b| {
        let y = t.softmax_rows(b.var("x"))?;
        weighted_sum(t, y, s)
    })
}

fn run_cross_entropy_rows(s: u64) -> Result<f32> {
    check(s, 2e-2, |p, r| randn_param(p, "x", vec![4, 4], 0.8, r), |t, b| {
        t.cross_entropy_rows(b.var("x"), &[0, 1, 2, 3])
    })
}

fn run_reshape(s: u64) -> Result<f32> {
    check(s, 0.25, |p, r| randn_param(p, "x", vec![2, 6], 1.0, r), |t, b| {
        let y = t.reshape(b.var("x"), vec![3, 4])?;
        weighted_sum(t, y, s)
    })
}

fn run_sum(s: u64) -> Result<f32> {
    check(s, 0.25, |p, r| randn_param(p, "x", vec![7], 1.0, r), |t, b| t.sum(b.var("x")))
}

fn run_mean(s: u64) -> Result<f32> {
    check(s, 0.25, |p, r| randn_param(p, "x", vec![7], 1.0, r), |t, b| t.mean(b.var("x")))
}

fn run_mean_rows(s: u64) -> Result<f32> {
    check(s, 0.25, |p, r| randn_param(p, "x", vec![4, 5], 1.0, r), |t, b| {
        let y = t.mean_rows(b.var("x"))?;
        weighted_sum(t, y, s)
    })
}

fn run_global_avg_pool(s: u64) -> Result<f32> {
    check(s, 0.25, |p, r| randn_param(p, "x", vec![3, 4, 4], 1.0, r), |t, b| {
        let y = t.global_avg_pool(b.var("x"))?;
        weighted_sum(t, y, s)
    })
}

fn run_avg_pool2(s: u64) -> Result<f32> {
    check(s, 0.25, |p, r| randn_param(p, "x", vec![2, 4, 4], 1.0, r), |t, b| {
        let y = t.avg_pool2(b.var("x"))?;
        weighted_sum(t, y, s)
    })
}

fn run_upsample2(s: u64) -> Result<f32> {
    check(s, 0.25, |p, r| randn_param(p, "x", vec![2, 3, 3], 1.0, r), |t, b| {
        let y = t.upsample2(b.var("x"))?;
        weighted_sum(t, y, s)
    })
}

fn run_concat_chan(s: u64) -> Result<f32> {
    check(s, 0.25, |p, r| {
        randn_param(p, "a", vec![2, 3, 3], 1.0, r);
        randn_param(p, "b", vec![3, 3, 3], 1.0, r);
    }, |t, b| {
        let y = t.concat_chan(b.var("a"), b.var("b"))?;
        weighted_sum(t, y, s)
    })
}

fn run_stack_rows(s: u64) -> Result<f32> {
    check(s, 0.25, |p, r| {
        randn_param(p, "a", vec![6], 1.0, r);
        randn_param(p, "b", vec![6], 1.0, r);
    }, |t, b| {
        let y = t.stack_rows(&[b.var("a"), b.var("b")])?;
        weighted_sum(t, y, s)
    })
}

fn run_split_heads(s: u64) -> Result<f32> {
    check(s, 0.25, |p, r| randn_param(p, "x", vec![4, 6], 1.0, r), |t, b| {
        let y = t.split_heads(b.var("x"), 2)?;
        weighted_sum(t, y, s)
    })
}

fn run_merge_heads(s: u64) -> Result<f32> {
    check(s, 0.25, |p, r| randn_param(p, "x", vec![2, 3, 4], 1.0, r), |t, b| {
        let y = t.merge_heads(b.var("x"))?;
        weighted_sum(t, y, s)
    })
}

fn run_gather(s: u64) -> Result<f32> {
    check(s, 0.25, |p, r| randn_param(p, "t", vec![5, 4], 1.0, r), |t, b| {
        let y = t.gather(b.var("t"), &[0, 2, 2, 4])?;
        weighted_sum(t, y, s)
    })
}

fn run_l2_normalize_rows(s: u64) -> Result<f32> {
    // longer rows keep the row norm stable under the probe step
    check(s, 1e-2, |p, r| randn_param(p, "x", vec![3, 8], 1.0, r), |t, b| {
        let y = t.l2_normalize_rows(b.var("x"))?;
        weighted_sum(t, y, s)
    })
}

fn run_attention(s: u64) -> Result<f32> {
    check(s, 1e-2, |p, r| {
        randn_param(p, "q", vec![2, 3, 4], 0.5, r);
        randn_param(p, "k", vec![2, 5, 4], 0.5, r);
        randn_param(p, "v", vec![2, 5, 4], 0.5, r);
    }, |t, b| {
        let y = t.attention(b.var("q"), b.var("k"), b.var("v"), None)?;
        weighted_sum(t, y, s)
    })
}

fn run_mse(s: u64) -> Result<f32> {
    check(s, 0.1, |p, r| {
        randn_param(p, "a", vec![3, 4], 1.0, r);
        randn_param(p, "b", vec![3, 4], 1.0, r);
    }, |t, b| t.mse(b.var("a"), b.var("b")))
}

fn cases() -> Vec<Case> {
    vec![
        case!("add", run_add),
        case!("sub", run_sub),
        case!("mul", run_mul),
        case!("scale", run_scale),
        case!("silu", run_silu),
        case!("gelu", run_gelu),
        case!("sigmoid", run_sigmoid),
        case!("softplus", run_softplus),
        case!("matmul", run_matmul),
        case!("matmul_nt", run_matmul_nt),
        case!("conv2d", run_conv2d),
        case!("conv2d_s2", run_conv2d_strided),
        case!("add_chan_bias", run_add_chan_bias),
        case!("add_row_bias", run_add_row_bias),
        case!("group_norm", run_group_norm),
        case!("layer_norm_rows", run_layer_norm_rows),
        case!("softmax_rows", run_softmax_rows),
        case!("cross_entropy_rows", run_cross_entropy_rows),
        case!("reshape", run_reshape),
        case!("sum", run_sum),
        case!("mean", run_mean),
        case!("mean_rows", run_mean_rows),
        case!("global_avg_pool", run_global_avg_pool),
        case!("avg_pool2", run_avg_pool2),
        case!("upsample2", run_upsample2),
        case!("concat_chan", run_concat_chan),
        case!("stack_rows", run_stack_rows),
        case!("split_heads", run_split_heads),
        case!("merge_heads", run_merge_heads),
        case!("gather", run_gather),
        case!("l2_normalize_rows", run_l2_normalize_rows),
        case!("attention", run_attention),
        case!("mse", run_mse),
    ]
}

/// Runs every primitive's check over `seeds`, reporting the worst relative
/// error per op.
pub fn gradient_suite(seeds: &[u64]) -> Result<Vec<GradCheckResult>> {
    let mut out = Vec::new();
    for c in cases() {
        let mut worst = 0.0f32;
        for &s in seeds {
            worst = worst.max((c.run)(s)?);
        }
        out.push(GradCheckResult { op: c.op, max_rel_err: worst });
    }
    Ok(out)
}
