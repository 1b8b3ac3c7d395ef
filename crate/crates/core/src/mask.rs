//! Binary masks and cross-shaped morphology.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

#[derive(Clone, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub struct BinaryMask {
    h: usize,
    w: usize,
    data: Vec<bool>,
}

impl BinaryMask {
    pub fn new(h: usize, w: usize, data: Vec<bool>) -> Result<Self> {
        if data.len() != h * w {
            return Err(Error::shape("mask", format!("{} cells for {h}x{w}", data.len())));
        }
        Ok(Self { h, w, data })
    }

    pub fn empty(h: usize, w: usize) -> Self {
        Self {
            h,
            w,
            data: vec![false; h * w],
        }
    }

    pub fn from_fn(h: usize, w: usize, f: impl Fn(usize, usize) -> bool) -> Self {
        let data = (0..h * w).map(|i| f(i / w, i % w)).collect();
        Self { h, w, data }
    }

    /// Foreground where `value >= threshold`.
    pub fn threshold(h: usize, w: usize, values: &[f64], threshold: f64) -> Result<Self> {
        Self::new(h, w, values.iter().map(|&v| v >= threshold).collect())
    }

    pub fn height(&self) -> usize {
        self.h
    }

    pub fn width(&self) -> usize {
        self.w
    }

    pub fn data(&self) -> &[bool] {
        &self.data
    }

    pub fn get(&self, y: usize, x: usize) -> bool {
        self.data[y * self.w + x]
    }

    pub fn count(&self) -> usize {
        self.data.iter().filter(|&&b| b).count()
    }

    pub fn is_empty(&self) -> bool {
        !self.data.iter().any(|&b| b)
    }

    pub fn same_shape(&self, other: &Self) -> bool {
        self.h == other.h && self.w == other.w
    }

    fn check(&self, other: &Self, op: &'static str) -> Result<()> {
        if !self.same_shape(other) {
            return Err(Error::shape(
                op,
                format!("{}x{} vs {}x{}", self.h, self.w, other.h, other.w),
            ));
        }
        Ok(())
    }

    fn zip_with(&self, other: &Self, op: &'static str, f: impl Fn(bool, bool) -> bool) -> Result<Self> {
        self.check(other, op)?;
        Ok(Self {
            h: self.h,
            w: self.w,
            data: self.data.iter().zip(&other.data).map(|(&a, &b)| f(a, b)).collect(),
        })
    }

    pub fn and(&self, other: &Self) -> Result<Self> {
        self.zip_with(other, "and", |a, b| a && b)
    }

    pub fn xor(&self, other: &Self) -> Result<Self> {
        self.zip_with(other, "xor", |a, b| a != b)
    }

    pub fn and_not(&self, other: &Self) -> Result<Self> {
        self.zip_with(other, "and_not", |a, b| a && !b)
    }

    pub fn intersection_count(&self, other: &Self) -> Result<usize> {
        self.check(other, "intersection")?;
        Ok(self.data.iter().zip(&other.data).filter(|(&a, &b)| a && b).count())
    }

    pub fn is_subset_of(&self, other: &Self) -> bool {
        self.same_shape(other) && self.data.iter().zip(&other.data).all(|(&a, &b)| !a || b)
    }

    /// Mask as a `0/1` array.
    pub fn to_f64(&self) -> Vec<f64> {
        self.data.iter().map(|&b| if b { 1.0 } else { 0.0 }).collect()
    }

    fn cross_step(&self, dilate: bool) -> Self {
        let (h, w) = (self.h, self.w);
        let mut out = self.data.clone();
        for y in 0..h {
            for x in 0..w {
                let mut acc = self.data[y * w + x];
                let neighbours = [
                    (y > 0).then(|| (y - 1) * w + x),
                    (y + 1 < h).then(|| (y + 1) * w + x),
                    (x > 0).then(|| y * w + x - 1),
                    (x + 1 < w).then(|| y * w + x + 1),
                ];
                for k in neighbours.into_iter().flatten() {
                    if dilate {
                        acc |= self.data[k];
                    } else {
                        acc &= self.data[k];
                    }
                }
                out[y * w + x] = acc;
            }
        }
        Self { h, w, data: out }
    }

    /// Dilation by the 3x3 cross, `iterations` times. Neighbours outside the
    /// frame are ignored.
    pub fn dilate(&self, iterations: usize) -> Self {
        (0..iterations).fold(self.clone(), |m, _| m.cross_step(true))
    }

    /// Erosion by the 3x3 cross, `iterations` times. Neighbours outside the
    /// frame are ignored, so foreground touching the border is not eaten away
    /// from that side.
    pub fn erode(&self, iterations: usize) -> Self {
        (0..iterations).fold(self.clone(), |m, _| m.cross_step(false))
    }

    /// Foreground pixels with at least one 4-neighbour that is background or
    /// outside the frame.
    pub fn boundary(&self) -> Self {
        let (h, w) = (self.h, self.w);
        Self::from_fn(h, w, |y, x| {
            self.get(y, x)
                && (y == 0
                    || x == 0
                    || y + 1 == h
                    || x + 1 == w
                    || !self.get(y - 1, x)
                    || !self.get(y + 1, x)
                    || !self.get(y, x - 1)
                    || !self.get(y, x + 1))
        })
    }

    pub fn points(&self) -> impl Iterator<Item = (usize, usize)> + '_ {
        self.data
            .iter()
            .enumerate()
            .filter(|(_, &b)| b)
            .map(move |(i, _)| (i / self.w, i % self.w))
    }
}
