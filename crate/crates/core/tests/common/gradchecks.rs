//! Finite-difference checks for every tape primitive and a long composite.

use feddg::tape::{Tape, Tensor, Var};
use rand::Rng;
use rand_chacha::ChaCha8Rng;

use super::{gradcheck, random_tensor, rng};

/// Reduces a tensor output to a scalar with fixed random weights, so every
/// output element carries a distinct cotangent.
fn project(tape: &mut Tape<f64>, v: Var, seed: u64) -> Var {
    let shape = tape.shape(v).to_vec();
    let weights = random_tensor(&mut rng(seed), &shape, -1.0, 1.0);
    let w = tape.constant(weights);
    let prod = tape.mul(v, w).unwrap();
    tape.sum(prod)
}

/// Values bounded away from zero, for ops with a kink there.
fn away_from_zero(r: &mut ChaCha8Rng, shape: &[usize]) -> Tensor<f64> {
    let n = shape.iter().product();
    let data = (0..n)
        .map(|_| {
            let m = r.random_range(0.1..1.0);
            if r.random_bool(0.5) { m } else { -m }
        })
        .collect();
    Tensor::new(shape.to_vec(), data).unwrap()
}

pub type Check = (&'static str, f64);

/// Runs every primitive check and returns the worst relative error of each.
/// Panics on the first element that fails.
pub fn primitive_checks() -> Vec<Check> {
    let mut r = rng(101);
    let mut out = Vec::new();
    let a = random_tensor(&mut r, &[3, 4], -1.0, 1.0);
    let b = random_tensor(&mut r, &[3, 4], -1.0, 1.0);
    let pos = random_tensor(&mut r, &[3, 4], 0.5, 2.0);

    out.push(("add", gradcheck("add", &[a.clone(), b.clone()], |t, v| {
        let y = t.add(v[0], v[1]).unwrap();
        project(t, y, 1)
    })));
    out.push(("sub", gradcheck("sub", &[a.clone(), b.clone()], |t, v| {
        let y = t.sub(v[0], v[1]).unwrap();
        project(t, y, 2)
    })));
    out.push(("mul", gradcheck("mul", &[a.clone(), b.clone()], |t, v| {
        let y = t.mul(v[0], v[1]).unwrap();
        project(t, y, 3)
    })));
    out.push(("div", gradcheck("div", &[a.clone(), pos.clone()], |t, v| {
        let y = t.div(v[0], v[1]).unwrap();
        project(t, y, 4)
    })));
    out.push(("scale", gradcheck("scale", std::slice::from_ref(&a), |t, v| {
        let y = t.scale(v[0], -2.5);
        project(t, y, 5)
    })));
    out.push(("add_scalar", gradcheck("add_scalar", std::slice::from_ref(&a), |t, v| {
        let y = t.add_scalar(v[0], 0.7);
        project(t, y, 6)
    })));
    let kinked = away_from_zero(&mut r, &[3, 4]);
    out.push(("relu", gradcheck("relu", &[kinked], |t, v| {
        let y = t.relu(v[0]);
        project(t, y, 7)
    })));
    out.push(("sigmoid", gradcheck("sigmoid", std::slice::from_ref(&a), |t, v| {
        let y = t.sigmoid(v[0]);
        project(t, y, 8)
    })));
    out.push(("exp", gradcheck("exp", std::slice::from_ref(&a), |t, v| {
        let y = t.exp(v[0]);
        project(t, y, 9)
    })));
    out.push(("log", gradcheck("log", std::slice::from_ref(&pos), |t, v| {
        let y = t.log(v[0]).unwrap();
        project(t, y, 10)
    })));
    out.push(("sum", gradcheck("sum", std::slice::from_ref(&a), |t, v| {
        let s = t.sum(v[0]);
        t.mul(s, s).unwrap()
    })));
    out.push(("mean", gradcheck("mean", std::slice::from_ref(&a), |t, v| {
        let m = t.mean(v[0]);
        t.exp(m)
    })));

    let img = random_tensor(&mut r, &[2, 3, 4, 6], -1.0, 1.0);
    out.push(("sum_spatial", gradcheck("sum_spatial", std::slice::from_ref(&img), |t, v| {
        let y = t.sum_spatial(v[0]).unwrap();
        project(t, y, 11)
    })));

    let m = random_tensor(&mut r, &[4, 5], -1.0, 1.0);
    out.push(("matmul", gradcheck("matmul", &[a.clone(), m], |t, v| {
        let y = t.matmul(v[0], v[1]).unwrap();
        project(t, y, 12)
    })));

    let w3 = random_tensor(&mut r, &[4, 3, 3, 3], -0.5, 0.5);
    let bias = random_tensor(&mut r, &[4], -0.5, 0.5);
    out.push(("conv2d", gradcheck("conv2d", &[img.clone(), w3.clone(), bias], |t, v| {
        let y = t.conv2d(v[0], v[1], Some(v[2]), 1, 1).unwrap();
        project(t, y, 13)
    })));
    out.push(("conv2d_strided", gradcheck("conv2d_strided", &[img.clone(), w3], |t, v| {
        let y = t.conv2d(v[0], v[1], None, 2, 0).unwrap();
        project(t, y, 14)
    })));
    let w1 = random_tensor(&mut r, &[2, 3, 1, 1], -1.0, 1.0);
    out.push(("conv2d_1x1", gradcheck("conv2d_1x1", &[img.clone(), w1], |t, v| {
        let y = t.conv2d(v[0], v[1], None, 1, 0).unwrap();
        project(t, y, 15)
    })));

    let small = random_tensor(&mut r, &[1, 2, 3, 5], -1.0, 1.0);
    out.push(("resize_bilinear", gradcheck("resize_bilinear", &[small.clone()], |t, v| {
        let y = t.resize_bilinear(v[0], 7, 4).unwrap();
        project(t, y, 16)
    })));
    out.push(("upsample2x", gradcheck("upsample2x", &[small], |t, v| {
        let y = t.upsample2x(v[0]).unwrap();
        project(t, y, 17)
    })));
    out.push(("max_pool2", gradcheck("max_pool2", std::slice::from_ref(&img), |t, v| {
        let y = t.max_pool2(v[0]).unwrap();
        project(t, y, 18)
    })));

    let mask: Vec<f64> = (0..24).map(|i| f64::from(u8::from(i % 3 != 1))).collect();
    out.push(("masked_mean", gradcheck("masked_mean", std::slice::from_ref(&img), |t, v| {
        let y = t.masked_mean(v[0], 1, &mask).unwrap();
        project(t, y, 19)
    })));

    let c = random_tensor(&mut r, &[2, 4], -1.0, 1.0);
    out.push(("concat_axis0", gradcheck("concat_axis0", &[a.clone(), c], |t, v| {
        let y = t.concat(&[v[0], v[1]], 0).unwrap();
        project(t, y, 20)
    })));
    let d = random_tensor(&mut r, &[3, 2], -1.0, 1.0);
    out.push(("concat_axis1", gradcheck("concat_axis1", &[a.clone(), d], |t, v| {
        let y = t.concat(&[v[0], v[1]], 1).unwrap();
        project(t, y, 21)
    })));
    out.push(("narrow", gradcheck("narrow", std::slice::from_ref(&img), |t, v| {
        let y = t.narrow(v[0], 1, 1).unwrap();
        project(t, y, 22)
    })));
    out.push(("reshape", gradcheck("reshape", std::slice::from_ref(&a), |t, v| {
        let y = t.reshape(v[0], &[2, 6]).unwrap();
        project(t, y, 23)
    })));

    let u = random_tensor(&mut r, &[5], -1.0, 1.0);
    let w = random_tensor(&mut r, &[5], -1.0, 1.0);
    out.push(("cosine_similarity", gradcheck("cosine_similarity", &[u, w], |t, v| {
        let c = t.cosine_similarity(v[0], v[1]).unwrap();
        t.scale(c, 3.0)
    })));
    out
}

/// Builds a chain of at least 50 primitives mixing every elementwise and
/// linear op. Returns the scalar output and the number of ops recorded.
pub fn long_chain(tape: &mut Tape<f64>, x: Var, w: Var) -> (Var, usize) {
    let start = tape.len();
    let mut h = x;
    for i in 0..6 {
        let lin = tape.matmul(h, w).unwrap();
        let s = tape.sigmoid(lin);
        let prod = tape.mul(s, x).unwrap();
        let shifted = tape.add_scalar(prod, 1.5);
        let logged = tape.log(shifted).unwrap();
        let scaled = tape.scale(logged, 0.8);
        let e = tape.exp(scaled);
        let diff = tape.sub(e, s).unwrap();
        let q = tape.div(diff, shifted).unwrap();
        let act = if i % 2 == 0 { tape.relu(q) } else { tape.add(q, s).unwrap() };
        h = tape.add(act, x).unwrap();
    }
    let m = tape.mean(h);
    let total = tape.sum(h);
    let out = tape.mul(m, total).unwrap();
    (out, tape.len() - start)
}

/// Returns the op count, the worst relative error and the largest gradient
/// magnitude, so a vanishing gradient cannot pass silently.
pub fn chain_check() -> (usize, f64, f64) {
    let mut r = rng(202);
    // Inputs chosen so the relu inputs stay away from their kink.
    let x = random_tensor(&mut r, &[3, 4], 0.2, 1.0);
    let w = random_tensor(&mut r, &[4, 4], -0.6, 0.6);
    let mut probe = Tape::new();
    let (px, pw) = (probe.param(x.clone()), probe.param(w.clone()));
    let (out, ops) = long_chain(&mut probe, px, pw);
    probe.backward(out).unwrap();
    let peak = [px, pw]
        .iter()
        .flat_map(|v| probe.grad(*v).unwrap().data().to_vec())
        .fold(0.0, |m: f64, g| m.max(g.abs()));
    let worst = gradcheck("chain", &[x, w], |t, v| long_chain(t, v[0], v[1]).0);
    (ops, worst, peak)
}
