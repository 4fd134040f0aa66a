use std::fs;
use std::path::Path;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use super::{Dataset, SegSample, DEFAULT_IGNORE_INDEX};
use crate::error::{Error, Result};
use crate::tensor::Tensor;

const TEXTURE: f32 = 0.04;
const NOISE: f32 = 0.03;

/// Maximum number of classes the generator can color.
pub const MAX_SYNTH_CLASSES: usize = 8;

/// Class colors at the corners of the cube `[0.2, 0.8]³`. The first four
/// are affinely independent, so up to four classes are exactly separable
/// by an affine map of RGB.
pub fn palette(num_classes: usize) -> Vec<[f32; 3]> {
    const CORNERS: [[f32; 3]; MAX_SYNTH_CLASSES] = [
        [0.2, 0.2, 0.2],
        [0.8, 0.8, 0.2],
        [0.8, 0.2, 0.8],
        [0.2, 0.8, 0.8],
        [0.8, 0.2, 0.2],
        [0.2, 0.8, 0.2],
        [0.2, 0.2, 0.8],
        [0.8, 0.8, 0.8],
    ];
    CORNERS[..num_classes.min(MAX_SYNTH_CLASSES)].to_vec()
}

enum Shape {
    Rect { y0: f32, x0: f32, y1: f32, x1: f32 },
    Ellipse { cy: f32, cx: f32, ry: f32, rx: f32 },
}

impl Shape {
    fn random(size: usize, rng: &mut impl Rng) -> Shape {
        let s = size as f32;
        let (lo, hi) = ((s / 10.0).max(1.0), (s / 5.0).max(1.5));
        let (cy, cx) = (rng.random_range(0.0..s), rng.random_range(0.0..s));
        let (ry, rx) = (rng.random_range(lo..hi), rng.random_range(lo..hi));
        if rng.random_bool(0.5) {
            Shape::Rect {
                y0: cy - ry,
                x0: cx - rx,
                y1: cy + ry,
                x1: cx + rx,
            }
        } else {
            Shape::Ellipse { cy, cx, ry, rx }
        }
    }

    fn contains(&self, y: f32, x: f32) -> bool {
        match *self {
            Shape::Rect { y0, x0, y1, x1 } => y >= y0 && y < y1 && x >= x0 && x < x1,
            Shape::Ellipse { cy, cx, ry, rx } => ((y - cy) / ry).powi(2) + ((x - cx) / rx).powi(2) <= 1.0,
        }
    }
}

fn sample(index: usize, size: usize, colors: &[[f32; 3]], rng: &mut impl Rng) -> Result<SegSample> {
    let num_classes = colors.len();
    let n_shapes = rng.random_range(1..=3);
    // The cycling class is drawn last so it always stays visible.
    let mut shapes = Vec::new();
    for j in 0..n_shapes {
        let class = if j + 1 == n_shapes {
            1 + index % (num_classes - 1)
        } else {
            rng.random_range(1..num_classes)
        };
        shapes.push((Shape::random(size, rng), class));
    }
    let (fy, fx) = (rng.random_range(0.1..0.6f32), rng.random_range(0.1..0.6f32));
    let phase = rng.random_range(0.0..std::f32::consts::TAU);
    let mut mask = vec![0u8; size * size];
    let mut img = vec![0f32; 3 * size * size];
    for y in 0..size {
        for x in 0..size {
            let (py, px) = (y as f32 + 0.5, x as f32 + 0.5);
            let mut class = 0;
            for (shape, c) in &shapes {
                if shape.contains(py, px) {
                    class = *c;
                }
            }
            let p = y * size + x;
            mask[p] = class as u8;
            let tex = TEXTURE * (fy * py + phase).sin() * (fx * px).sin();
            for c in 0..3 {
                let noise = rng.random_range(-NOISE..NOISE);
                img[c * size * size + p] = (colors[class][c] + tex + noise).clamp(0.0, 1.0);
            }
        }
    }
    SegSample::new(format!("synth_{index:05}"), Tensor::new(vec![3, size, size], img)?, mask)
}

/// Colored rectangles and ellipses on a textured background. Class 0 is
/// the background; shape classes cycle so every class appears within any
/// `num_classes − 1` consecutive samples.
pub fn synth_generate(num_samples: usize, size: usize, num_classes: usize, seed: u64) -> Result<Dataset> {
    if !(2..=MAX_SYNTH_CLASSES).contains(&num_classes) {
        return Err(Error::invalid(format!(
            "synthetic data needs 2..={MAX_SYNTH_CLASSES} classes, got {num_classes}"
        )));
    }
    if size == 0 {
        return Err(Error::invalid("image size must be positive"));
    }
    let colors = palette(num_classes);
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let samples = (0..num_samples)
        .map(|i| sample(i, size, &colors, &mut rng))
        .collect::<Result<Vec<_>>>()?;
    Dataset::from_samples(samples, num_classes, DEFAULT_IGNORE_INDEX)
}

/// Writes `dataset` as PNG pairs under `<root>/<split>/`.
pub fn write_dataset(dataset: &Dataset, root: &Path, split: &str) -> Result<()> {
    let images = root.join(split).join("images_png");
    let masks = root.join(split).join("masks_png");
    for d in [&images, &masks] {
        fs::create_dir_all(d).map_err(|e| Error::io(d, e))?;
    }
    for i in 0..dataset.len() {
        let s = dataset.get(i)?;
        let (h, w) = (s.height(), s.width());
        let data = s.image.data();
        let rgb = image::RgbImage::from_fn(w as u32, h as u32, |x, y| {
            let px = |c: usize| (data[(c * h + y as usize) * w + x as usize] * 255.0).round().clamp(0.0, 255.0) as u8;
            image::Rgb([px(0), px(1), px(2)])
        });
        let path = images.join(format!("{}.png", s.id));
        rgb.save(&path).map_err(|source| Error::Image { path, source })?;
        let mask = image::GrayImage::from_raw(w as u32, h as u32, s.mask.clone())
            .ok_or_else(|| Error::shape("mask size does not match the image"))?;
        let path = masks.join(format!("{}.png", s.id));
        mask.save(&path).map_err(|source| Error::Image { path, source })?;
    }
    Ok(())
}
