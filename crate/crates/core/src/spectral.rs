//! 2D discrete Fourier transform of image channel stacks, amplitude/phase
//! decomposition, the centred low-frequency mask and continuous amplitude
//! interpolation.
//!
//! Spectra are stored in centred layout: the zero-frequency bin of an
//! `H x W` plane sits at `(H/2, W/2)` (integer division).

use std::cell::RefCell;
use std::f64::consts::PI;

use rustfft::num_complex::Complex64;
use rustfft::FftPlanner;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// Real image, `H x W x C` row-major with channels innermost.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Image {
    h: usize,
    w: usize,
    c: usize,
    data: Vec<f64>,
}

impl Image {
    pub fn new(h: usize, w: usize, c: usize, data: Vec<f64>) -> Result<Self> {
        if h == 0 || w == 0 {
            return Err(Error::InvalidImage(format!("empty extent {h}x{w}")));
        }
        if c != 1 && c != 3 {
            return Err(Error::InvalidImage(format!("{c} channels, expected 1 or 3")));
        }
        if data.len() != h * w * c {
            return Err(Error::InvalidImage(format!(
                "{} values for {h}x{w}x{c}",
                data.len()
            )));
        }
        if data.iter().any(|v| !v.is_finite()) {
            return Err(Error::NonFinite("image"));
        }
        Ok(Self { h, w, c, data })
    }

    pub fn zeros(h: usize, w: usize, c: usize) -> Result<Self> {
        Self::new(h, w, c, vec![0.0; h * w * c])
    }

    pub fn height(&self) -> usize {
        self.h
    }

    pub fn width(&self) -> usize {
        self.w
    }

    pub fn channels(&self) -> usize {
        self.c
    }

    pub fn dims(&self) -> (usize, usize, usize) {
        (self.h, self.w, self.c)
    }

    pub fn data(&self) -> &[f64] {
        &self.data
    }

    pub fn at(&self, y: usize, x: usize, ch: usize) -> f64 {
        self.data[(y * self.w + x) * self.c + ch]
    }

    /// Channel-major copy (`C x H x W`), the layout the network consumes.
    pub fn to_planar(&self) -> Vec<f64> {
        let mut out = vec![0.0; self.data.len()];
        let hw = self.h * self.w;
        for (p, px) in self.data.chunks(self.c).enumerate() {
            for (ch, &v) in px.iter().enumerate() {
                out[ch * hw + p] = v;
            }
        }
        out
    }

    pub fn max_abs_diff(&self, other: &Image) -> f64 {
        self.data
            .iter()
            .zip(&other.data)
            .map(|(a, b)| (a - b).abs())
            .fold(0.0, f64::max)
    }
}

/// Normalized mean squared error `Σ(a−b)² / Σb²`.
pub fn nmse(a: &Image, reference: &Image) -> f64 {
    let num: f64 = a.data.iter().zip(&reference.data).map(|(x, y)| (x - y).powi(2)).sum();
    let den: f64 = reference.data.iter().map(|y| y * y).sum();
    num / den.max(f64::MIN_POSITIVE)
}

/// Nonnegative amplitude array in centred layout, same `H x W x C` indexing
/// as [`Image`]. This is the only spectral quantity that crosses clients.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Amplitude {
    h: usize,
    w: usize,
    c: usize,
    data: Vec<f64>,
}

impl Amplitude {
    pub fn new(h: usize, w: usize, c: usize, data: Vec<f64>) -> Result<Self> {
        if data.len() != h * w * c {
            return Err(Error::shape("amplitude", format!("{} values for {h}x{w}x{c}", data.len())));
        }
        if data.iter().any(|v| !v.is_finite() || *v < 0.0) {
            return Err(Error::OutOfRange {
                name: "amplitude",
                value: data.iter().copied().find(|v| !v.is_finite() || *v < 0.0).unwrap_or(f64::NAN),
                range: "[0, inf)",
            });
        }
        Ok(Self { h, w, c, data })
    }

    pub fn dims(&self) -> (usize, usize, usize) {
        (self.h, self.w, self.c)
    }

    pub fn data(&self) -> &[f64] {
        &self.data
    }

    pub fn at(&self, y: usize, x: usize, ch: usize) -> f64 {
        self.data[(y * self.w + x) * self.c + ch]
    }
}

/// Centred complex field of an image, before the amplitude/phase split.
#[derive(Clone, Debug, PartialEq)]
pub struct ComplexSpectrum {
    pub h: usize,
    pub w: usize,
    pub c: usize,
    pub data: Vec<Complex64>,
}

impl ComplexSpectrum {
    pub fn to_spectrum(&self) -> Spectrum {
        let amplitude = self.data.iter().map(|z| z.norm()).collect();
        let phase = self.data.iter().map(|z| wrap_phase(z.im.atan2(z.re))).collect();
        Spectrum {
            amplitude: Amplitude {
                h: self.h,
                w: self.w,
                c: self.c,
                data: amplitude,
            },
            phase,
        }
    }
}

fn wrap_phase(p: f64) -> f64 {
    if p <= -PI {
        p + 2.0 * PI
    } else {
        p
    }
}

/// Amplitude and phase of an image's DFT, both centred.
#[derive(Clone, Debug, PartialEq)]
pub struct Spectrum {
    pub amplitude: Amplitude,
    /// Phase in `(−π, π]`, same indexing as the amplitude.
    pub phase: Vec<f64>,
}

impl Spectrum {
    pub fn new(amplitude: Amplitude, phase: Vec<f64>) -> Result<Self> {
        if phase.len() != amplitude.data.len() {
            return Err(Error::shape(
                "spectrum",
                format!("{} phase values for {} amplitudes", phase.len(), amplitude.data.len()),
            ));
        }
        Ok(Self { amplitude, phase })
    }

    pub fn dims(&self) -> (usize, usize, usize) {
        self.amplitude.dims()
    }
}

thread_local! {
    static PLANNER: RefCell<FftPlanner<f64>> = RefCell::new(FftPlanner::new());
}

#[derive(Clone, Copy)]
enum Direction {
    Forward,
    Inverse,
}

/// Unnormalized in-place 2D FFT of one `h x w` plane.
fn fft2_plane(plane: &mut [Complex64], h: usize, w: usize, dir: Direction) {
    PLANNER.with(|planner| {
        let mut planner = planner.borrow_mut();
        let (row_fft, col_fft) = match dir {
            Direction::Forward => (planner.plan_fft_forward(w), planner.plan_fft_forward(h)),
            Direction::Inverse => (planner.plan_fft_inverse(w), planner.plan_fft_inverse(h)),
        };
        row_fft.process(plane);
        let mut col = vec![Complex64::default(); h];
        for x in 0..w {
            for y in 0..h {
                col[y] = plane[y * w + x];
            }
            col_fft.process(&mut col);
            for y in 0..h {
                plane[y * w + x] = col[y];
            }
        }
    });
}

fn shift_index(k: usize, n: usize) -> usize {
    (k + n / 2) % n
}

/// Centred complex DFT of every channel.
pub fn forward_complex(img: &Image) -> Result<ComplexSpectrum> {
    if img.data.iter().any(|v| !v.is_finite()) {
        return Err(Error::NonFinite("forward_dft input"));
    }
    let (h, w, c) = img.dims();
    let mut out = vec![Complex64::default(); h * w * c];
    let mut plane = vec![Complex64::default(); h * w];
    for ch in 0..c {
        for (p, z) in plane.iter_mut().enumerate() {
            *z = Complex64::new(img.data[p * c + ch], 0.0);
        }
        fft2_plane(&mut plane, h, w, Direction::Forward);
        for y in 0..h {
            let sy = shift_index(y, h);
            for x in 0..w {
                let sx = shift_index(x, w);
                out[(sy * w + sx) * c + ch] = plane[y * w + x];
            }
        }
    }
    Ok(ComplexSpectrum { h, w, c, data: out })
}

pub fn forward_dft(img: &Image) -> Result<Spectrum> {
    Ok(forward_complex(img)?.to_spectrum())
}

/// Reconstructs the real image of a centred spectrum with `1/(HW)`
/// normalization. Fails if the result has a non-negligible imaginary part,
/// which happens only for spectra without Hermitian symmetry.
pub fn inverse_dft(spec: &Spectrum) -> Result<Image> {
    let (h, w, c) = spec.dims();
    if spec.phase.len() != h * w * c {
        return Err(Error::shape("inverse_dft", "amplitude and phase lengths differ"));
    }
    let norm = 1.0 / (h * w) as f64;
    let mut out = vec![0.0; h * w * c];
    let mut plane = vec![Complex64::default(); h * w];
    let mut max_im: f64 = 0.0;
    let mut max_re: f64 = 0.0;
    for ch in 0..c {
        for y in 0..h {
            let sy = shift_index(y, h);
            for x in 0..w {
                let sx = shift_index(x, w);
                let k = (sy * w + sx) * c + ch;
                plane[y * w + x] = Complex64::from_polar(spec.amplitude.data[k], spec.phase[k]);
            }
        }
        fft2_plane(&mut plane, h, w, Direction::Inverse);
        for (p, z) in plane.iter().enumerate() {
            let re = z.re * norm;
            max_im = max_im.max((z.im * norm).abs());
            max_re = max_re.max(re.abs());
            out[p * c + ch] = re;
        }
    }
    if max_im > 1e-5 * max_re.max(1.0) {
        return Err(Error::ImaginaryResidue(max_im));
    }
    Image::new(h, w, c, out)
}

/// Centred rectangle of low frequencies exchanged between clients.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct FreqMask {
    pub h: usize,
    pub w: usize,
    pub half_height: usize,
    pub half_width: usize,
}

impl FreqMask {
    pub fn contains(&self, y: usize, x: usize) -> bool {
        let (cy, cx) = (self.h / 2, self.w / 2);
        y.abs_diff(cy) <= self.half_height && x.abs_diff(cx) <= self.half_width
    }

    /// `H x W` indicator array.
    pub fn to_array(&self) -> Vec<bool> {
        (0..self.h)
            .flat_map(|y| (0..self.w).map(move |x| (y, x)))
            .map(|(y, x)| self.contains(y, x))
            .collect()
    }

    pub fn cell_count(&self) -> usize {
        let rows = (0..self.h).filter(|&y| y.abs_diff(self.h / 2) <= self.half_height).count();
        let cols = (0..self.w).filter(|&x| x.abs_diff(self.w / 2) <= self.half_width).count();
        rows * cols
    }
}

/// Mask with half-extents `max(1, ⌊αH⌋) x max(1, ⌊αW⌋)` around the DC bin.
pub fn build_mask(h: usize, w: usize, alpha: f64) -> Result<FreqMask> {
    if !(alpha > 0.0 && alpha <= 0.5) {
        return Err(Error::OutOfRange {
            name: "alpha",
            value: alpha,
            range: "(0, 0.5]",
        });
    }
    Ok(FreqMask {
        h,
        w,
        half_height: ((alpha * h as f64).floor() as usize).max(1),
        half_width: ((alpha * w as f64).floor() as usize).max(1),
    })
}

fn check_lambda(lambda: f64) -> Result<()> {
    if !(0.0..=1.0).contains(&lambda) {
        return Err(Error::OutOfRange {
            name: "lambda",
            value: lambda,
            range: "[0, 1]",
        });
    }
    Ok(())
}

/// Keeps the local amplitude outside the mask and blends
/// `(1−λ)·local + λ·foreign` inside it. Phase is copied unchanged.
pub fn interpolate_amplitude(
    local: &Spectrum,
    foreign: &Amplitude,
    mask: &FreqMask,
    lambda: f64,
) -> Result<Spectrum> {
    check_lambda(lambda)?;
    let (h, w, c) = local.dims();
    if foreign.dims() != (h, w, c) || (mask.h, mask.w) != (h, w) {
        return Err(Error::shape(
            "interpolate_amplitude",
            format!(
                "local {h}x{w}x{c}, foreign {:?}, mask {}x{}",
                foreign.dims(),
                mask.h,
                mask.w
            ),
        ));
    }
    let mut amp = local.amplitude.data.clone();
    for y in 0..h {
        for x in 0..w {
            if !mask.contains(y, x) {
                continue;
            }
            for ch in 0..c {
                let k = (y * w + x) * c + ch;
                amp[k] = (1.0 - lambda) * amp[k] + lambda * foreign.data[k];
            }
        }
    }
    Ok(Spectrum {
        amplitude: Amplitude { h, w, c, data: amp },
        phase: local.phase.clone(),
    })
}

/// Style transfer from a precomputed local spectrum.
pub fn transform_spectrum(local: &Spectrum, foreign: &Amplitude, mask: &FreqMask, lambda: f64) -> Result<Image> {
    inverse_dft(&interpolate_amplitude(local, foreign, mask, lambda)?)
}

pub fn transform_image(img: &Image, foreign: &Amplitude, mask: &FreqMask, lambda: f64) -> Result<Image> {
    transform_spectrum(&forward_dft(img)?, foreign, mask, lambda)
}
