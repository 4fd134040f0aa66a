use rand::Rng;

use super::SegSample;
use crate::error::{Error, Result};
use crate::tensor::Tensor;

/// Mirror index into `[0, n)` without repeating the edge sample, for any
/// integer offset.
pub fn reflect_index(i: isize, n: usize) -> usize {
    if n == 1 {
        return 0;
    }
    let period = 2 * (n as isize - 1);
    let m = i.rem_euclid(period);
    if m < n as isize {
        m as usize
    } else {
        (period - m) as usize
    }
}

fn window_start(extent: usize, size: usize, rng: &mut impl Rng) -> isize {
    let slack = extent as isize - size as isize;
    let (lo, hi) = if slack >= 0 { (0, slack) } else { (slack, 0) };
    rng.random_range(lo as i64..=hi as i64) as isize
}

/// The same random `size×size` window of image and mask. Samples smaller
/// than the window are reflect-padded.
pub fn random_crop_pair(sample: &SegSample, size: usize, rng: &mut impl Rng) -> Result<SegSample> {
    if size == 0 {
        return Err(Error::invalid("crop size must be positive"));
    }
    let (h, w) = (sample.height(), sample.width());
    let top = window_start(h, size, rng);
    let left = window_start(w, size, rng);
    if top == 0 && left == 0 && h == size && w == size {
        return Ok(sample.clone());
    }
    let rows: Vec<usize> = (0..size).map(|i| reflect_index(top + i as isize, h)).collect();
    let cols: Vec<usize> = (0..size).map(|j| reflect_index(left + j as isize, w)).collect();
    let src = sample.image.data();
    let mut img = Vec::with_capacity(3 * size * size);
    for c in 0..3 {
        for &r in &rows {
            img.extend(cols.iter().map(|&q| src[(c * h + r) * w + q]));
        }
    }
    let mut mask = Vec::with_capacity(size * size);
    for &r in &rows {
        mask.extend(cols.iter().map(|&q| sample.mask[r * w + q]));
    }
    SegSample::new(sample.id.clone(), Tensor::new(vec![3, size, size], img)?, mask)
}

/// Image bilinear ×1/2 (a 2×2 mean with half-pixel centers), mask nearest
/// neighbour ×1/2.
pub fn half_scale(sample: &SegSample) -> Result<SegSample> {
    let (h, w) = (sample.height(), sample.width());
    if h % 2 != 0 || w % 2 != 0 {
        return Err(Error::shape(format!("half-scaling needs even extents, got {h}x{w}")));
    }
    let (oh, ow) = (h / 2, w / 2);
    let src = sample.image.data();
    let mut img = Vec::with_capacity(3 * oh * ow);
    for c in 0..3 {
        for y in 0..oh {
            for x in 0..ow {
                let at = |dy: usize, dx: usize| src[(c * h + 2 * y + dy) * w + 2 * x + dx];
                img.push(0.25 * (at(0, 0) + at(0, 1) + at(1, 0) + at(1, 1)));
            }
        }
    }
    let mut mask = Vec::with_capacity(oh * ow);
    for y in 0..oh {
        mask.extend((0..ow).map(|x| sample.mask[2 * y * w + 2 * x]));
    }
    SegSample::new(sample.id.clone(), Tensor::new(vec![3, oh, ow], img)?, mask)
}
