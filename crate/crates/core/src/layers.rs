//! Parameterised building blocks shared by the networks.

use wfn_tensor::{ops, Float, Tensor, Var};

use crate::error::Result;
use crate::params::{Mode, Session};

pub const BN_EPS: f64 = 1e-5;
pub const BN_MOMENTUM: f64 = 0.1;

/// Convolution reading `path.weight` and, if present, `path.bias`.
pub fn conv<T: Float>(s: &Session<T>, path: &str, x: &Var<T>, stride: usize, pad: usize) -> Result<Var<T>> {
    let w = s.param(&format!("{path}.weight"))?;
    let b = s.param(&format!("{path}.bias")).ok();
    Ok(ops::conv2d(x, &w, b.as_ref(), stride, pad)?)
}

/// "Same" convolution with an odd square kernel.
pub fn conv_same<T: Float>(s: &Session<T>, path: &str, x: &Var<T>) -> Result<Var<T>> {
    let k = s.param(&format!("{path}.weight"))?.shape()[2];
    conv(s, path, x, 1, k / 2)
}

/// Batch normalisation; in train mode uses batch statistics and stages the
/// running-statistic update (momentum 0.1, unbiased variance).
pub fn batch_norm<T: Float>(s: &Session<T>, path: &str, x: &Var<T>) -> Result<Var<T>> {
    let gamma = s.param(&format!("{path}.weight"))?;
    let beta = s.param(&format!("{path}.bias"))?;
    let mean_path = format!("{path}.running_mean");
    let var_path = format!("{path}.running_var");
    match s.mode() {
        Mode::Eval => {
            let rm = s.buffer(&mean_path)?;
            let rv = s.buffer(&var_path)?;
            Ok(ops::batch_norm_eval(x, &gamma, &beta, &rm, &rv, BN_EPS)?)
        }
        Mode::Train => {
            let (y, stats) = ops::batch_norm_train(x, &gamma, &beta, BN_EPS)?;
            let rm = s.buffer(&mean_path)?;
            let rv = s.buffer(&var_path)?;
            let n = stats.count as f64;
            let unbias = if n > 1.0 { n / (n - 1.0) } else { 1.0 };
            let new_mean = Tensor::from_fn([rm.len()], |c| {
                T::from_f64_lossy((1.0 - BN_MOMENTUM) * rm.data()[c].as_f64() + BN_MOMENTUM * stats.mean[c])
            });
            let new_var = Tensor::from_fn([rv.len()], |c| {
                T::from_f64_lossy((1.0 - BN_MOMENTUM) * rv.data()[c].as_f64() + BN_MOMENTUM * stats.var[c] * unbias)
            });
            s.stage_buffer(&mean_path, new_mean);
            s.stage_buffer(&var_path, new_var);
            Ok(y)
        }
    }
}

/// 3x3 conv, batch norm, ReLU.
pub fn conv_bn_relu<T: Float>(s: &Session<T>, path: &str, bn_path: &str, x: &Var<T>) -> Result<Var<T>> {
    let y = conv(s, path, x, 1, 1)?;
    Ok(ops::relu(&batch_norm(s, bn_path, &y)?))
}
