//! Differentiable operations on [`Var`]s.

use crate::autograd::Var;
use crate::error::{invalid, Result, TensorError};
use crate::float::Float;
use crate::kernels;
use crate::tensor::Tensor;

fn unary<T: Float>(
    x: &Var<T>,
    f: impl Fn(T) -> T,
    // derivative expressed through (input, output)
    df: impl Fn(T, T) -> T + 'static,
) -> Var<T> {
    let value = x.value().map(f);
    Var::from_op(value, vec![x.clone()], move |g, out, p| {
        let x = p[0].value();
        let data = g
            .data()
            .iter()
            .zip(x.data())
            .zip(out.data())
            .map(|((&g, &xv), &yv)| g * df(xv, yv))
            .collect();
        vec![Some(Tensor::new(g.shape().to_vec(), data).expect("unary grad"))]
    })
}

pub fn add<T: Float>(a: &Var<T>, b: &Var<T>) -> Result<Var<T>> {
    let value = a.value().zip_map(b.value(), "add", |x, y| x + y)?;
    Ok(Var::from_op(value, vec![a.clone(), b.clone()], |g, _, _| {
        vec![Some(g.clone()), Some(g.clone())]
    }))
}

pub fn sub<T: Float>(a: &Var<T>, b: &Var<T>) -> Result<Var<T>> {
    let value = a.value().zip_map(b.value(), "sub", |x, y| x - y)?;
    Ok(Var::from_op(value, vec![a.clone(), b.clone()], |g, _, _| {
        vec![Some(g.clone()), Some(g.map(|v| -v))]
    }))
}

pub fn mul<T: Float>(a: &Var<T>, b: &Var<T>) -> Result<Var<T>> {
    let value = a.value().zip_map(b.value(), "mul", |x, y| x * y)?;
    Ok(Var::from_op(value, vec![a.clone(), b.clone()], |g, _, p| {
        let ga = p[0]
            .requires_grad()
            .then(|| g.zip_map(p[1].value(), "mul", |g, y| g * y).expect("mul grad"));
        let gb = p[1]
            .requires_grad()
            .then(|| g.zip_map(p[0].value(), "mul", |g, x| g * x).expect("mul grad"));
        vec![ga, gb]
    }))
}

pub fn scale<T: Float>(x: &Var<T>, s: T) -> Var<T> {
    Var::from_op(x.value().scale(s), vec![x.clone()], move |g, _, _| vec![Some(g.scale(s))])
}

pub fn sigmoid<T: Float>(x: &Var<T>) -> Var<T> {
    unary(x, stable_sigmoid, |_, y| y * (T::one() - y))
}

pub fn tanh<T: Float>(x: &Var<T>) -> Var<T> {
    unary(x, T::tanh, |_, y| T::one() - y * y)
}

pub fn relu<T: Float>(x: &Var<T>) -> Var<T> {
    unary(x, |v| v.max(T::zero()), |xv, _| if xv > T::zero() { T::one() } else { T::zero() })
}

pub fn leaky_relu<T: Float>(x: &Var<T>, slope: T) -> Var<T> {
    unary(
        x,
        move |v| if v > T::zero() { v } else { v * slope },
        move |xv, _| if xv > T::zero() { T::one() } else { slope },
    )
}

#[inline]
pub fn stable_sigmoid<T: Float>(z: T) -> T {
    if z >= T::zero() {
        T::one() / (T::one() + (-z).exp())
    } else {
        let e = z.exp();
        e / (T::one() + e)
    }
}

pub fn sum<T: Float>(x: &Var<T>) -> Var<T> {
    let value = Tensor::scalar(T::from_f64_lossy(x.value().sum_f64()));
    Var::from_op(value, vec![x.clone()], |g, _, p| {
        vec![Some(Tensor::full(p[0].shape().to_vec(), g.item()))]
    })
}

pub fn mean<T: Float>(x: &Var<T>) -> Var<T> {
    let n = T::from_usize(x.value().len().max(1)).expect("count");
    scale(&sum(x), T::one() / n)
}

pub fn reshape<T: Float>(x: &Var<T>, shape: &[usize]) -> Result<Var<T>> {
    let value = x.value().clone().reshape(shape.to_vec())?;
    Ok(Var::from_op(value, vec![x.clone()], |g, _, p| {
        vec![Some(g.clone().reshape(p[0].shape().to_vec()).expect("reshape grad"))]
    }))
}

pub fn concat<T: Float>(parts: &[Var<T>], axis: usize) -> Result<Var<T>> {
    let values: Vec<&Tensor<T>> = parts.iter().map(Var::value).collect();
    let value = Tensor::concat(&values, axis)?;
    Ok(Var::from_op(value, parts.to_vec(), move |g, _, p| {
        let mut start = 0;
        p.iter()
            .map(|part| {
                let len = part.shape()[axis];
                let piece = part
                    .requires_grad()
                    .then(|| g.narrow(axis, start, len).expect("concat grad"));
                start += len;
                piece
            })
            .collect()
    }))
}

pub fn narrow<T: Float>(x: &Var<T>, axis: usize, start: usize, len: usize) -> Result<Var<T>> {
    let value = x.value().narrow(axis, start, len)?;
    Ok(Var::from_op(value, vec![x.clone()], move |g, _, p| {
        let shape = p[0].shape();
        let outer: usize = shape[..axis].iter().product();
        let inner: usize = shape[axis + 1..].iter().product();
        let dim = shape[axis];
        let mut full = Tensor::zeros(shape.to_vec());
        let fd = full.data_mut();
        for o in 0..outer {
            let dst = (o * dim + start) * inner;
            fd[dst..dst + len * inner].copy_from_slice(&g.data()[o * len * inner..(o + 1) * len * inner]);
        }
        vec![Some(full)]
    }))
}

pub fn conv2d<T: Float>(x: &Var<T>, w: &Var<T>, bias: Option<&Var<T>>, stride: usize, pad: usize) -> Result<Var<T>> {
    let value = kernels::conv2d(x.value(), w.value(), bias.map(Var::value), stride, pad)?;
    let mut parents = vec![x.clone(), w.clone()];
    parents.extend(bias.cloned());
    Ok(Var::from_op(value, parents, move |g, _, p| {
        let grads = kernels::conv2d_backward(
            p[0].value(),
            p[1].value(),
            g,
            stride,
            pad,
            p[0].requires_grad(),
            p[1].requires_grad(),
        )
        .expect("conv2d backward");
        let mut out = vec![grads.input, grads.weight];
        if p.len() == 3 {
            out.push(Some(grads.bias));
        }
        out
    }))
}

pub fn max_pool2<T: Float>(x: &Var<T>) -> Result<Var<T>> {
    let (value, argmax) = kernels::max_pool2(x.value())?;
    Ok(Var::from_op(value, vec![x.clone()], move |g, _, p| {
        vec![Some(kernels::max_pool2_backward(p[0].shape(), &argmax, g))]
    }))
}

pub fn upsample_bilinear<T: Float>(x: &Var<T>, scale: usize) -> Result<Var<T>> {
    let value = kernels::upsample_bilinear(x.value(), scale)?;
    Ok(Var::from_op(value, vec![x.clone()], move |g, _, p| {
        vec![Some(
            kernels::upsample_bilinear_backward(p[0].shape(), scale, g).expect("upsample backward"),
        )]
    }))
}

pub fn pad_replicate<T: Float>(x: &Var<T>, pad: usize) -> Result<Var<T>> {
    let value = kernels::pad_replicate(x.value(), pad)?;
    Ok(Var::from_op(value, vec![x.clone()], move |g, _, p| {
        vec![Some(kernels::pad_replicate_backward(p[0].shape(), pad, g))]
    }))
}

pub fn crop2d<T: Float>(x: &Var<T>, top: usize, left: usize, h: usize, w: usize) -> Result<Var<T>> {
    let value = kernels::crop2d(x.value(), top, left, h, w)?;
    Ok(Var::from_op(value, vec![x.clone()], move |g, _, p| {
        vec![Some(kernels::crop2d_backward(p[0].shape(), top, left, g))]
    }))
}

/// Batch statistics observed by a training-mode batch norm.
#[derive(Clone, Debug)]
pub struct BatchStats {
    pub mean: Vec<f64>,
    /// Biased (population) variance.
    pub var: Vec<f64>,
    /// Number of elements reduced per channel.
    pub count: usize,
}

fn check_channel_vec<T: Float>(v: &Tensor<T>, c: usize, what: &'static str) -> Result<()> {
    if v.shape() != [c] {
        return Err(TensorError::ShapeMismatch {
            op: what,
            lhs: vec![c],
            rhs: v.shape().to_vec(),
        });
    }
    Ok(())
}

/// Batch norm normalizing with the statistics of `x` itself.
pub fn batch_norm_train<T: Float>(x: &Var<T>, gamma: &Var<T>, beta: &Var<T>, eps: f64) -> Result<(Var<T>, BatchStats)> {
    let (b, c, h, w) = x.value().dims4("batch_norm")?;
    check_channel_vec(gamma.value(), c, "batch_norm gamma")?;
    check_channel_vec(beta.value(), c, "batch_norm beta")?;
    let (mean, var) = kernels::channel_moments(x.value())?;
    let mean_t: Vec<T> = mean.iter().map(|&m| T::from_f64_lossy(m)).collect();
    let inv_t: Vec<T> = var.iter().map(|&v| T::from_f64_lossy(1.0 / (v + eps).sqrt())).collect();
    let value = kernels::channel_affine(x.value(), &mean_t, &inv_t, gamma.value().data(), beta.value().data())?;
    let out = Var::from_op(value, vec![x.clone(), gamma.clone(), beta.clone()], move |g, _, p| {
        let grads = kernels::batch_norm_backward(p[0].value(), &mean_t, &inv_t, p[1].value().data(), g, true)
            .expect("batch_norm backward");
        vec![Some(grads.input), Some(grads.gamma), Some(grads.beta)]
    });
    Ok((out, BatchStats { mean, var, count: b * h * w }))
}

/// Batch norm normalizing with fixed (running) statistics.
pub fn batch_norm_eval<T: Float>(
    x: &Var<T>,
    gamma: &Var<T>,
    beta: &Var<T>,
    running_mean: &Tensor<T>,
    running_var: &Tensor<T>,
    eps: f64,
) -> Result<Var<T>> {
    let (_, c, _, _) = x.value().dims4("batch_norm")?;
    for (t, what) in [
        (gamma.value(), "batch_norm gamma"),
        (beta.value(), "batch_norm beta"),
        (running_mean, "batch_norm running_mean"),
        (running_var, "batch_norm running_var"),
    ] {
        check_channel_vec(t, c, what)?;
    }
    let mean_t = running_mean.data().to_vec();
    let inv_t: Vec<T> = running_var
        .data()
        .iter()
        .map(|&v| T::from_f64_lossy(1.0 / (v.as_f64() + eps).sqrt()))
        .collect();
    let value = kernels::channel_affine(x.value(), &mean_t, &inv_t, gamma.value().data(), beta.value().data())?;
    Ok(Var::from_op(value, vec![x.clone(), gamma.clone(), beta.clone()], move |g, _, p| {
        let grads = kernels::batch_norm_backward(p[0].value(), &mean_t, &inv_t, p[1].value().data(), g, false)
            .expect("batch_norm backward");
        vec![Some(grads.input), Some(grads.gamma), Some(grads.beta)]
    }))
}

/// Mean positive-weighted binary cross-entropy on logits.
///
/// Per element: `(1 - y) z + (1 + (pw - 1) y) * softplus(-z)` with
/// `softplus(-z) = log1p(exp(-|z|)) + max(-z, 0)`, which never forms
/// `log(sigmoid(z))` explicitly.
pub fn bce_with_logits<T: Float>(logits: &Var<T>, targets: &Tensor<T>, pos_weight: f64) -> Result<Var<T>> {
    logits.value().expect_same_shape(targets, "bce_with_logits")?;
    let n = logits.value().len();
    if n == 0 {
        return Err(invalid("bce_with_logits", "empty input"));
    }
    let total: f64 = logits
        .value()
        .data()
        .iter()
        .zip(targets.data())
        .map(|(&z, &y)| {
            let (z, y) = (z.as_f64(), y.as_f64());
            let softplus_neg = (-z.abs()).exp().ln_1p() + (-z).max(0.0);
            (1.0 - y) * z + (1.0 + (pos_weight - 1.0) * y) * softplus_neg
        })
        .sum();
    let value = Tensor::scalar(T::from_f64_lossy(total / n as f64));
    let targets = targets.clone();
    Ok(Var::from_op(value, vec![logits.clone()], move |g, _, p| {
        let scale = g.item().as_f64() / n as f64;
        let data = p[0]
            .value()
            .data()
            .iter()
            .zip(targets.data())
            .map(|(&z, &y)| {
                let (z, y) = (z.as_f64(), y.as_f64());
                let lw = 1.0 + (pos_weight - 1.0) * y;
                T::from_f64_lossy(scale * ((1.0 - y) - lw * stable_sigmoid(-z)))
            })
            .collect();
        vec![Some(Tensor::new(p[0].shape().to_vec(), data).expect("bce grad"))]
    }))
}

/// `mean(|p - t|) + mean((p - t)^2)`.
pub fn l1_l2_loss<T: Float>(pred: &Var<T>, target: &Tensor<T>) -> Result<Var<T>> {
    pred.value().expect_same_shape(target, "l1_l2_loss")?;
    let n = pred.value().len().max(1) as f64;
    let (l1, l2) = pred
        .value()
        .data()
        .iter()
        .zip(target.data())
        .fold((0.0, 0.0), |(a, b), (&p, &t)| {
            let d = (p - t).as_f64();
            (a + d.abs(), b + d * d)
        });
    let value = Tensor::scalar(T::from_f64_lossy((l1 + l2) / n));
    let target = target.clone();
    Ok(Var::from_op(value, vec![pred.clone()], move |g, _, p| {
        let s = g.item().as_f64() / n;
        let data = p[0]
            .value()
            .data()
            .iter()
            .zip(target.data())
            .map(|(&pv, &tv)| {
                let d = (pv - tv).as_f64();
                let sign = if d > 0.0 {
                    1.0
                } else if d < 0.0 {
                    -1.0
                } else {
                    0.0
                };
                T::from_f64_lossy(s * (sign + 2.0 * d))
            })
            .collect();
        vec![Some(Tensor::new(p[0].shape().to_vec(), data).expect("l1_l2 grad"))]
    }))
}
