//! Layer initializers and forward helpers shared by every model. Parameters
//! live in a `ParamSet` under dotted names; forwards fetch them from a
//! `BoundParams` view of the current tape.

use rand::Rng;

use crate::numerics::{BoundParams, ParamSet, Tape, Tensor, Var};
use crate::Result;

fn kaiming_std(fan_in: usize) -> f32 {
    (2.0 / fan_in as f32).sqrt()
}

pub fn init_linear<R: Rng>(p: &mut ParamSet, prefix: &str, d_in: usize, d_out: usize, rng: &mut R) {
    p.insert(format!("{prefix}.w"), Tensor::randn(vec![d_in, d_out], kaiming_std(d_in), rng));
    p.insert(format!("{prefix}.b"), Tensor::zeros(vec![d_out]));
}

/// x: [n, d_in] -> [n, d_out]
pub fn linear(tape: &mut Tape, b: &BoundParams, prefix: &str, x: Var) -> Result<Var> {
    let h = tape.matmul(x, b.var(&format!("{prefix}.w")))?;
    tape.add_row_bias(h, b.var(&format!("{prefix}.b")))
}

pub fn init_conv<R: Rng>(
    p: &mut ParamSet,
    prefix: &str,
    c_in: usize,
    c_out: usize,
    k: usize,
    rng: &mut R,
) {
    let fan_in = c_in * k * k;
    p.insert(format!("{prefix}.w"), Tensor::randn(vec![c_out, c_in, k, k], kaiming_std(fan_in), rng));
    p.insert(format!("{prefix}.b"), Tensor::zeros(vec![c_out]));
}

pub fn init_conv_zero(p: &mut ParamSet, prefix: &str, c_in: usize, c_out: usize, k: usize) {
    p.insert(format!("{prefix}.w"), Tensor::zeros(vec![c_out, c_in, k, k]));
    p.insert(format!("{prefix}.b"), Tensor::zeros(vec![c_out]));
}

/// x: [C,H,W] -> conv with bias.
pub fn conv(
    tape: &mut Tape,
    b: &BoundParams,
    prefix: &str,
    x: Var,
    stride: usize,
    pad: usize,
) -> Result<Var> {
    let h = tape.conv2d(x, b.var(&format!("{prefix}.w")), stride, pad)?;
    tape.add_chan_bias(h, b.var(&format!("{prefix}.b")))
}

pub fn init_group_norm(p: &mut ParamSet, prefix: &str, channels: usize) {
    p.insert(format!("{prefix}.g"), Tensor::full(vec![channels], 1.0));
    p.insert(format!("{prefix}.b"), Tensor::zeros(vec![channels]));
}

pub fn group_norm(
    tape: &mut Tape,
    b: &BoundParams,
    prefix: &str,
    x: Var,
    groups: usize,
) -> Result<Var> {
    tape.group_norm(x, b.var(&format!("{prefix}.g")), b.var(&format!("{prefix}.b")), groups)
}

pub fn init_layer_norm(p: &mut ParamSet, prefix: &str, dim: usize) {
    p.insert(format!("{prefix}.g"), Tensor::full(vec![dim], 1.0));
    p.insert(format!("{prefix}.b"), Tensor::zeros(vec![dim]));
}

pub fn layer_norm(tape: &mut Tape, b: &BoundParams, prefix: &str, x: Var) -> Result<Var> {
    tape.layer_norm_rows(x, b.var(&format!("{prefix}.g")), b.var(&format!("{prefix}.b")))
}

/// Sinusoidal timestep embedding of even dimension `dim`.
pub fn timestep_embedding(t: i32, dim: usize) -> Tensor {
    let half = dim / 2;
    let mut data = vec![0.0f32; dim];
    for i in 0..half {
        let freq = (10_000f64.powf(-(i as f64) / half as f64)) as f32;
        let angle = t.max(0) as f32 * freq;
        data[i] = angle.sin();
        data[half + i] = angle.cos();
    }
    Tensor::from_vec(vec![dim], data).expect("finite embedding")
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::numerics::rng;

    #[test]
    fn linear_shapes() {
        let mut r = rng(0);
        let mut p = ParamSet::new();
        init_linear(&mut p, "fc", 8, 4, &mut r);
        let mut tape = Tape::new();
        let b = BoundParams::bind(&mut tape, &p, false).unwrap();
        let x = tape.leaf(&Tensor::randn(vec![3, 8], 1.0, &mut r), false).unwrap();
        let y = linear(&mut tape, &b, "fc", x).unwrap();
        assert_eq!(tape.shape(y), &[3, 4]);
    }

    #[test]
    fn timestep_embedding_distinct_per_t() {
        let a = timestep_embedding(3, 32);
        let b = timestep_embedding(4, 32);
        assert!(a.max_abs_diff(&b) > 1e-3);
    }
}
