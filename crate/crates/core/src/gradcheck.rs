//! Central finite-difference gradient checker used as a test oracle.

use rand::seq::SliceRandom;
use rand::Rng;

use crate::autodiff::{Tape, Var};
use crate::error::{Error, Result};
use crate::model::FilmUnet;
use crate::noise::{stream_rng, NoiseRng};
use crate::ops::Padding;
use crate::scalar::Scalar;
use crate::tensor::Tensor;

/// Largest relative discrepancy between the tape gradient of `f` at `x` and
/// a central difference with step `h`:
/// `max_i |a_i − n_i| / max(1e-8, |a_i| + |n_i|)`.
///
/// `f` receives a fresh tape and the variable holding `x` and must return a
/// scalar.
pub fn grad_check<T, F>(f: F, x: &Tensor<T>, h: f64) -> Result<f64>
where
    T: Scalar,
    F: Fn(&mut Tape<T>, Var) -> Result<Var>,
{
    let indices: Vec<usize> = (0..x.numel()).collect();
    grad_check_subset(f, x, h, &indices)
}

/// Like [`grad_check`] but only perturbs the listed flat indices.
pub fn grad_check_subset<T, F>(f: F, x: &Tensor<T>, h: f64, indices: &[usize]) -> Result<f64>
where
    T: Scalar,
    F: Fn(&mut Tape<T>, Var) -> Result<Var>,
{
    let mut tape = Tape::with_strict_numerics(true);
    let xv = tape.leaf(x.clone(), true)?;
    let loss = f(&mut tape, xv)?;
    tape.backward(loss)?;
    let analytic = tape
        .take_grad(xv)
        .ok_or_else(|| Error::MissingGrad("grad_check input".into()))?;

    let eval = |probe: Tensor<T>| -> Result<f64> {
        let mut t = Tape::with_strict_numerics(true);
        let v = t.leaf(probe, false)?;
        let out = f(&mut t, v)?;
        Ok(t.value(out).item().as_f64())
    };

    let mut worst = 0.0f64;
    for &i in indices {
        let mut plus = x.clone();
        plus.data_mut()[i] = T::from_f64_lossy(x.data()[i].as_f64() + h);
        let mut minus = x.clone();
        minus.data_mut()[i] = T::from_f64_lossy(x.data()[i].as_f64() - h);
        let numeric = (eval(plus)? - eval(minus)?) / (2.0 * h);
        let a = analytic.data()[i].as_f64();
        let rel = (a - numeric).abs() / (a.abs() + numeric.abs()).max(1e-8);
        worst = worst.max(rel);
    }
    Ok(worst)
}

/// Worst relative error seen for one operation across random cases.
#[derive(Clone, Debug, PartialEq)]
pub struct OpReport {
    pub op: &'static str,
    pub cases: usize,
    pub worst: f64,
}

fn uniform(shape: &[usize], rng: &mut NoiseRng) -> Tensor<f64> {
    Tensor::from_fn(shape, |_| rng.random_range(-1.0..1.0))
}

/// Uniform values with magnitude at least `gap`, so a finite-difference step
/// never crosses the ReLU kink.
fn away_from_zero(shape: &[usize], gap: f64, rng: &mut NoiseRng) -> Tensor<f64> {
    Tensor::from_fn(shape, |_| {
        let m = rng.random_range(gap..1.0);
        if rng.random_bool(0.5) { m } else { -m }
    })
}

/// Distinct values spaced well beyond the step, in shuffled order, so max
/// pooling has no near-ties.
fn spaced(shape: &[usize], rng: &mut NoiseRng) -> Tensor<f64> {
    let n: usize = shape.iter().product();
    let mut vals: Vec<f64> = (0..n).map(|i| i as f64 * 0.01).collect();
    vals.shuffle(rng);
    Tensor::from_vec(shape, vals).expect("sized to shape")
}

/// `sum(y ⊙ w)` for a fixed random `w`: a scalar whose gradient w.r.t. `y`
/// is a generic dense tensor.
fn project(tape: &mut Tape<f64>, y: Var, w: &Tensor<f64>) -> Result<Var> {
    let wv = tape.constant(w.clone())?;
    let p = tape.mul(y, wv)?;
    tape.sum(p)
}

/// Runs `cases` random-shape gradient checks (64-bit, step `h`) for every
/// differentiable tape operation and every differentiable operand.
pub fn op_suite(seed: u64, cases: usize, h: f64) -> Result<Vec<OpReport>> {
    let mut rng = stream_rng(seed, 0);
    let mut reports = Vec::new();
    let mut record = |op: &'static str, worst: f64| match reports.iter_mut().find(|r: &&mut OpReport| r.op == op) {
        Some(r) => {
            r.cases += 1;
            r.worst = r.worst.max(worst);
        }
        None => reports.push(OpReport { op, cases: 1, worst }),
    };

    for _ in 0..cases {
        // conv2d: random batch, channels, extents, odd/even kernels, stride, padding.
        let (n, ci, co) = (rng.random_range(1..3), rng.random_range(1..4), rng.random_range(1..4));
        let (hh, ww) = (rng.random_range(3..7), rng.random_range(3..7));
        let padding = if rng.random_bool(0.5) { Padding::Same } else { Padding::Valid };
        let k = match padding {
            Padding::Same => [1, 3][rng.random_range(0..2)],
            Padding::Valid => rng.random_range(1..4),
        };
        let stride = rng.random_range(1..3);
        let x = uniform(&[n, ci, hh, ww], &mut rng);
        let w = uniform(&[co, ci, k, k], &mut rng);
        let b = uniform(&[co], &mut rng);
        let out_shape = crate::ops::conv2d(&x, &w, &b, stride, padding)?.shape().to_vec();
        let r = uniform(&out_shape, &mut rng);
        let conv = |tape: &mut Tape<f64>, x: Var, w: Var, b: Var| -> Result<Var> {
            let y = tape.conv2d(x, w, b, stride, padding)?;
            project(tape, y, &r)
        };
        let e_x = grad_check(|t, v| { let (wv, bv) = (t.constant(w.clone())?, t.constant(b.clone())?); conv(t, v, wv, bv) }, &x, h)?;
        let e_w = grad_check(|t, v| { let (xv, bv) = (t.constant(x.clone())?, t.constant(b.clone())?); conv(t, xv, v, bv) }, &w, h)?;
        let e_b = grad_check(|t, v| { let (xv, wv) = (t.constant(x.clone())?, t.constant(w.clone())?); conv(t, xv, wv, v) }, &b, h)?;
        record("conv2d", e_x.max(e_w).max(e_b));

        // dense
        let (n, din, dout) = (rng.random_range(1..5), rng.random_range(1..6), rng.random_range(1..6));
        let x = uniform(&[n, din], &mut rng);
        let w = uniform(&[dout, din], &mut rng);
        let b = uniform(&[dout], &mut rng);
        let r = uniform(&[n, dout], &mut rng);
        let dense = |tape: &mut Tape<f64>, x: Var, w: Var, b: Var| -> Result<Var> {
            let y = tape.dense(x, w, b)?;
            project(tape, y, &r)
        };
        let e_x = grad_check(|t, v| { let (wv, bv) = (t.constant(w.clone())?, t.constant(b.clone())?); dense(t, v, wv, bv) }, &x, h)?;
        let e_w = grad_check(|t, v| { let (xv, bv) = (t.constant(x.clone())?, t.constant(b.clone())?); dense(t, xv, v, bv) }, &w, h)?;
        let e_b = grad_check(|t, v| { let (xv, wv) = (t.constant(x.clone())?, t.constant(w.clone())?); dense(t, xv, wv, v) }, &b, h)?;
        record("dense", e_x.max(e_w).max(e_b));

        // relu
        let shape = [rng.random_range(1..3), rng.random_range(1..4), rng.random_range(1..5), rng.random_range(1..5)];
        let x = away_from_zero(&shape, 0.01, &mut rng);
        let r = uniform(&shape, &mut rng);
        record("relu", grad_check(|t, v| { let y = t.relu(v)?; project(t, y, &r) }, &x, h)?);

        // maxpool2d
        let k = rng.random_range(1..4);
        let shape = [rng.random_range(1..3), rng.random_range(1..3), k * rng.random_range(1..4), k * rng.random_range(1..4)];
        let x = spaced(&shape, &mut rng);
        let r = uniform(&[shape[0], shape[1], shape[2] / k, shape[3] / k], &mut rng);
        record("maxpool2d", grad_check(|t, v| { let y = t.maxpool2d(v, k)?; project(t, y, &r) }, &x, h)?);

        // upsample_nearest
        let k = rng.random_range(1..4);
        let shape = [rng.random_range(1..3), rng.random_range(1..3), rng.random_range(1..4), rng.random_range(1..4)];
        let x = uniform(&shape, &mut rng);
        let r = uniform(&[shape[0], shape[1], shape[2] * k, shape[3] * k], &mut rng);
        record("upsample_nearest", grad_check(|t, v| { let y = t.upsample_nearest(v, k)?; project(t, y, &r) }, &x, h)?);

        // concat_channels
        let (n, hh, ww) = (rng.random_range(1..3), rng.random_range(1..4), rng.random_range(1..4));
        let (ca, cb) = (rng.random_range(1..4), rng.random_range(1..4));
        let a = uniform(&[n, ca, hh, ww], &mut rng);
        let bt = uniform(&[n, cb, hh, ww], &mut rng);
        let r = uniform(&[n, ca + cb, hh, ww], &mut rng);
        let e_a = grad_check(|t, v| { let o = t.constant(bt.clone())?; let y = t.concat_channels(v, o)?; project(t, y, &r) }, &a, h)?;
        let e_b = grad_check(|t, v| { let o = t.constant(a.clone())?; let y = t.concat_channels(o, v)?; project(t, y, &r) }, &bt, h)?;
        record("concat_channels", e_a.max(e_b));

        // affine_modulate
        let shape = [rng.random_range(1..3), rng.random_range(1..4), rng.random_range(1..4), rng.random_range(1..4)];
        let x = uniform(&shape, &mut rng);
        let g = uniform(&shape[..2], &mut rng);
        let be = uniform(&shape[..2], &mut rng);
        let r = uniform(&shape, &mut rng);
        let modulate = |tape: &mut Tape<f64>, x: Var, g: Var, b: Var| -> Result<Var> {
            let y = tape.affine_modulate(x, g, b)?;
            project(tape, y, &r)
        };
        let e_x = grad_check(|t, v| { let (gv, bv) = (t.constant(g.clone())?, t.constant(be.clone())?); modulate(t, v, gv, bv) }, &x, h)?;
        let e_g = grad_check(|t, v| { let (xv, bv) = (t.constant(x.clone())?, t.constant(be.clone())?); modulate(t, xv, v, bv) }, &g, h)?;
        let e_b = grad_check(|t, v| { let (xv, gv) = (t.constant(x.clone())?, t.constant(g.clone())?); modulate(t, xv, gv, v) }, &be, h)?;
        record("affine_modulate", e_x.max(e_g).max(e_b));

        // mse_loss
        let shape = [rng.random_range(1..3), rng.random_range(1..4), rng.random_range(1..4), rng.random_range(1..4)];
        let p = uniform(&shape, &mut rng);
        let q = uniform(&shape, &mut rng);
        let e_p = grad_check(|t, v| { let o = t.constant(q.clone())?; t.mse_loss(v, o) }, &p, h)?;
        let e_q = grad_check(|t, v| { let o = t.constant(p.clone())?; t.mse_loss(o, v) }, &q, h)?;
        record("mse_loss", e_p.max(e_q));

        // sum, mul, add_scalar
        let shape = [rng.random_range(1..5), rng.random_range(1..5)];
        let x = uniform(&shape, &mut rng);
        let y = uniform(&shape, &mut rng);
        let r = uniform(&shape, &mut rng);
        record("sum", grad_check(|t, v| t.sum(v), &x, h)?);
        let e_x = grad_check(|t, v| { let o = t.constant(y.clone())?; let z = t.mul(v, o)?; project(t, z, &r) }, &x, h)?;
        let e_y = grad_check(|t, v| { let o = t.constant(x.clone())?; let z = t.mul(o, v)?; project(t, z, &r) }, &y, h)?;
        record("mul", e_x.max(e_y));
        let c: f64 = rng.random_range(-2.0..2.0);
        record("add_scalar", grad_check(|t, v| { let z = t.add_scalar(v, c)?; project(t, z, &r) }, &x, h)?);

        // slice_cols
        let (n, d) = (rng.random_range(1..4), rng.random_range(2..7));
        let start = rng.random_range(0..d);
        let len = rng.random_range(1..=d - start);
        let x = uniform(&[n, d], &mut rng);
        let r = uniform(&[n, len], &mut rng);
        record("slice_cols", grad_check(|t, v| { let z = t.slice_cols(v, start, len)?; project(t, z, &r) }, &x, h)?);
    }
    Ok(reports)
}

/// End-to-end check of `FilmUnet::loss_and_grads` against central
/// differences of the inference loss, over `per_param` random entries of
/// every parameter tensor. Returns the worst relative error.
pub fn model_grad_check(
    model: &mut FilmUnet<f64>,
    noisy: &Tensor<f64>,
    cond: &Tensor<f64>,
    clean: &Tensor<f64>,
    h: f64,
    per_param: usize,
    seed: u64,
) -> Result<f64> {
    model.zero_grads();
    model.loss_and_grads(noisy, cond, clean)?;
    let loss = |m: &FilmUnet<f64>| -> Result<f64> {
        Ok(crate::ops::mse_loss(&m.forward(noisy, cond)?, clean)?.item())
    };
    let mut rng = stream_rng(seed, 1);
    let mut worst = 0.0f64;
    for pi in 0..model.params().len() {
        let numel = model.params()[pi].value.numel();
        let grad = model.params()[pi]
            .grad
            .clone()
            .ok_or_else(|| Error::MissingGrad(model.params()[pi].name().to_string()))?;
        for _ in 0..per_param.min(numel) {
            let i = rng.random_range(0..numel);
            let orig = model.params()[pi].value.data()[i];
            model.params_mut()[pi].value.data_mut()[i] = orig + h;
            let plus = loss(model)?;
            model.params_mut()[pi].value.data_mut()[i] = orig - h;
            let minus = loss(model)?;
            model.params_mut()[pi].value.data_mut()[i] = orig;
            let numeric = (plus - minus) / (2.0 * h);
            let a = grad.data()[i];
            worst = worst.max((a - numeric).abs() / (a.abs() + numeric.abs()).max(1e-8));
        }
    }
    Ok(worst)
}
