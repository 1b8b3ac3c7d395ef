//! Independent reference implementations shared by the integration tests.
//! Everything here is written the slow, obvious way on purpose.

#![allow(dead_code)]

pub mod gradchecks;
pub mod toys;

use std::f64::consts::PI;

use feddg::mask::BinaryMask;
use feddg::spectral::Image;
use feddg::tape::{Tape, Tensor, Var};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

pub fn rng(seed: u64) -> ChaCha8Rng {
    ChaCha8Rng::seed_from_u64(seed)
}

pub fn random_image(rng: &mut impl Rng, h: usize, w: usize, c: usize) -> Image {
    Image::new(h, w, c, (0..h * w * c).map(|_| rng.random_range(-1.0..1.0)).collect()).unwrap()
}

pub fn random_mask(rng: &mut impl Rng, h: usize, w: usize, p: f64) -> BinaryMask {
    BinaryMask::new(h, w, (0..h * w).map(|_| rng.random_bool(p)).collect()).unwrap()
}

pub fn random_tensor(rng: &mut impl Rng, shape: &[usize], lo: f64, hi: f64) -> Tensor<f64> {
    let n = shape.iter().product();
    Tensor::new(shape.to_vec(), (0..n).map(|_| rng.random_range(lo..hi)).collect()).unwrap()
}

/// Centred DFT by the defining double sum. Returns `(re, im)` in the same
/// `H x W x C` indexing as the library, with the zero frequency at
/// `(H/2, W/2)`.
pub fn naive_centred_dft(img: &Image) -> Vec<(f64, f64)> {
    let (h, w, c) = img.dims();
    let mut out = vec![(0.0, 0.0); h * w * c];
    for sy in 0..h {
        let u = (sy + h - h / 2) % h;
        for sx in 0..w {
            let v = (sx + w - w / 2) % w;
            for ch in 0..c {
                let (mut re, mut im) = (0.0, 0.0);
                for y in 0..h {
                    for x in 0..w {
                        let angle = -2.0 * PI * ((u * y) as f64 / h as f64 + (v * x) as f64 / w as f64);
                        let value = img.at(y, x, ch);
                        re += value * angle.cos();
                        im += value * angle.sin();
                    }
                }
                out[(sy * w + sx) * c + ch] = (re, im);
            }
        }
    }
    out
}

/// Dilation by the L1 ball of radius `r`, clipped to the frame.
pub fn brute_dilate(m: &BinaryMask, r: usize) -> BinaryMask {
    let (h, w) = (m.height(), m.width());
    BinaryMask::from_fn(h, w, |y, x| {
        (0..h).any(|yy| (0..w).any(|xx| y.abs_diff(yy) + x.abs_diff(xx) <= r && m.get(yy, xx)))
    })
}

/// Erosion by the L1 ball of radius `r`; pixels outside the frame do not
/// count against membership.
pub fn brute_erode(m: &BinaryMask, r: usize) -> BinaryMask {
    let (h, w) = (m.height(), m.width());
    BinaryMask::from_fn(h, w, |y, x| {
        (0..h).all(|yy| (0..w).all(|xx| y.abs_diff(yy) + x.abs_diff(xx) > r || m.get(yy, xx)))
    })
}

/// Symmetric Hausdorff distance over every pair of foreground pixels.
pub fn brute_hausdorff(a: &BinaryMask, b: &BinaryMask) -> f64 {
    let pa: Vec<(usize, usize)> = a.points().collect();
    let pb: Vec<(usize, usize)> = b.points().collect();
    let directed = |from: &[(usize, usize)], to: &[(usize, usize)]| {
        from.iter()
            .map(|&(y, x)| {
                to.iter()
                    .map(|&(v, u)| ((y as f64 - v as f64).powi(2) + (x as f64 - u as f64).powi(2)).sqrt())
                    .fold(f64::INFINITY, f64::min)
            })
            .fold(0.0, f64::max)
    };
    directed(&pa, &pb).max(directed(&pb, &pa))
}

pub fn cosine(a: &[f64], b: &[f64]) -> f64 {
    let dot: f64 = a.iter().zip(b).map(|(x, y)| x * y).sum();
    let na: f64 = a.iter().map(|x| x * x).sum::<f64>().sqrt();
    let nb: f64 = b.iter().map(|x| x * x).sum::<f64>().sqrt();
    dot / (na * nb)
}

/// Pair loss with the denominator over negatives only, or also the positive
/// when `standard` is set.
pub fn pair_loss_oracle(e: &[Vec<f64>], tags: &[usize], m: usize, p: usize, tau: f64, standard: bool) -> f64 {
    let pos = cosine(&e[m], &e[p]) / tau;
    let denom: f64 = (0..e.len())
        .filter(|&q| q != m && (tags[q] != tags[m] || (standard && q == p)))
        .map(|q| (cosine(&e[m], &e[q]) / tau).exp())
        .sum();
    denom.ln() - pos
}

/// Average pair loss over every same-region ordered-by-index pair among
/// `K` boundary and `K` background embeddings.
pub fn boundary_loss_oracle(bd: &[Vec<f64>], bg: &[Vec<f64>], tau: f64, standard: bool) -> f64 {
    let k = bd.len();
    let e: Vec<Vec<f64>> = bd.iter().chain(bg).cloned().collect();
    let tags: Vec<usize> = (0..2 * k).map(|i| usize::from(i >= k)).collect();
    let mut total = 0.0;
    let mut pairs = 0;
    for m in 0..2 * k {
        for p in m + 1..2 * k {
            if tags[m] == tags[p] {
                total += pair_loss_oracle(&e, &tags, m, p, tau, standard);
                pairs += 1;
            }
        }
    }
    assert_eq!(pairs, k * (k - 1));
    total / pairs as f64
}

/// Passes when either the absolute or the relative deviation is small.
pub fn grad_close(analytic: f64, numeric: f64) -> bool {
    let abs = (analytic - numeric).abs();
    abs <= 1e-6 || abs / analytic.abs().max(numeric.abs()) < 1e-4
}

/// Compares the tape gradient of a scalar function of several tensor inputs
/// against central differences. Returns the worst relative error seen and
/// panics on the first failing element.
pub fn gradcheck<F>(name: &str, inputs: &[Tensor<f64>], build: F) -> f64
where
    F: Fn(&mut Tape<f64>, &[Var]) -> Var,
{
    let eval = |values: &[Tensor<f64>]| -> f64 {
        let mut tape = Tape::new();
        let vars: Vec<Var> = values.iter().map(|v| tape.param(v.clone())).collect();
        let out = build(&mut tape, &vars);
        tape.item(out)
    };
    let mut tape = Tape::new();
    let vars: Vec<Var> = inputs.iter().map(|v| tape.param(v.clone())).collect();
    let out = build(&mut tape, &vars);
    tape.backward(out).unwrap();
    let eps = 1e-6;
    let mut worst: f64 = 0.0;
    for (i, input) in inputs.iter().enumerate() {
        let analytic = tape.grad(vars[i]).map(|g| g.data().to_vec()).unwrap_or_else(|| vec![0.0; input.numel()]);
        for j in 0..input.numel() {
            let mut plus = inputs.to_vec();
            plus[i].data_mut()[j] += eps;
            let mut minus = inputs.to_vec();
            minus[i].data_mut()[j] -= eps;
            let numeric = (eval(&plus) - eval(&minus)) / (2.0 * eps);
            let a = analytic[j];
            assert!(
                grad_close(a, numeric),
                "{name}: input {i} element {j}: analytic {a:e} vs numeric {numeric:e}"
            );
            let scale = a.abs().max(numeric.abs());
            if scale > 1e-6 {
                worst = worst.max((a - numeric).abs() / scale);
            }
        }
    }
    worst
}
