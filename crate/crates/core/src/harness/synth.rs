use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};

use crate::error::{Error, Result};
use crate::numerics::Tensor;

/// One RGB-D training pair. `rgb` is `[H, W, 3]`, `depth` `[H, W, 1]`, both in
/// `[0, 1]`; `gt` is `[H, W]` with values in `{0, 1}`.
#[derive(Clone, Debug, PartialEq)]
pub struct Sample {
    pub id: String,
    pub rgb: Tensor<f64>,
    pub depth: Tensor<f64>,
    pub gt: Tensor<f64>,
}

impl Sample {
    pub fn new(id: String, rgb: Tensor<f64>, depth: Tensor<f64>, gt: Tensor<f64>) -> Result<Self> {
        let (r, d, g) = (rgb.shape(), depth.shape(), gt.shape());
        let ok = r.len() == 3 && r[2] == 3 && d.len() == 3 && d[2] == 1 && g.len() == 2 && r[..2] == d[..2] && r[..2] == g[..];
        if !ok {
            return Err(Error::Dataset(format!("{id}: inconsistent extents {r:?}, {d:?}, {g:?}")));
        }
        if gt.data().iter().any(|&v| v != 0.0 && v != 1.0) {
            return Err(Error::Dataset(format!("{id}: groundtruth is not binary")));
        }
        Ok(Self { id, rgb, depth, gt })
    }

    pub fn side(&self) -> (usize, usize) {
        (self.gt.shape()[0], self.gt.shape()[1])
    }
}

enum Shape {
    Rect { y0: f64, x0: f64, y1: f64, x1: f64 },
    Ellipse { cy: f64, cx: f64, ry: f64, rx: f64 },
}

impl Shape {
    fn contains(&self, y: f64, x: f64) -> bool {
        match *self {
            Shape::Rect { y0, x0, y1, x1 } => y >= y0 && y < y1 && x >= x0 && x < x1,
            Shape::Ellipse { cy, cx, ry, rx } => {
                let (dy, dx) = ((y - cy) / ry, (x - cx) / rx);
                dy * dy + dx * dx <= 1.0
            }
        }
    }
}

fn clamp01(v: f64) -> f64 {
    v.clamp(0.0, 1.0)
}

/// Deterministic scene for `(seed, index)`: a planar, textured background
/// and one to three rectangles or ellipses standing closer to the camera.
///
/// Objects are colored either distinctly or close to the background (the
/// "similar appearance" case, where only depth separates them). Each shape
/// spans 15–35% of the side and contains its own center pixel, so the
/// groundtruth always has both classes.
pub fn synth_sample(seed: u64, index: usize, size: usize) -> Sample {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    rng.set_stream(index as u64);
    let s = size as f64;

    let bg_color: [f64; 3] = std::array::from_fn(|_| rng.random_range(0.2..0.8));
    let bg_depth = rng.random_range(0.65..0.85);
    let (tilt_y, tilt_x) = (rng.random_range(-0.1..0.1), rng.random_range(-0.1..0.1));
    let noise = Normal::new(0.0, 0.05).expect("valid std");

    let count = rng.random_range(1..=3);
    let mut shapes = Vec::with_capacity(count);
    for _ in 0..count {
        let hy = rng.random_range(0.075..0.175) * s;
        let hx = rng.random_range(0.075..0.175) * s;
        let cy = (rng.random_range(hy..s - hy)).floor() + 0.5;
        let cx = (rng.random_range(hx..s - hx)).floor() + 0.5;
        let similar = rng.random_bool(0.35);
        let color: [f64; 3] = if similar {
            bg_color.map(|c| clamp01(c + rng.random_range(-0.08..0.08)))
        } else {
            std::array::from_fn(|_| rng.random_range(0.0..1.0))
        };
        let depth = rng.random_range(0.1..0.45);
        let shape = if rng.random_bool(0.5) {
            Shape::Rect {
                y0: cy - hy,
                x0: cx - hx,
                y1: cy + hy,
                x1: cx + hx,
            }
        } else {
            Shape::Ellipse { cy, cx, ry: hy, rx: hx }
        };
        shapes.push((shape, color, depth));
    }

    let mut rgb = Vec::with_capacity(size * size * 3);
    let mut depth = Vec::with_capacity(size * size);
    let mut gt = Vec::with_capacity(size * size);
    for y in 0..size {
        for x in 0..size {
            let (py, px) = (y as f64 + 0.5, x as f64 + 0.5);
            // later shapes occlude earlier ones
            let hit = shapes.iter().rev().find(|(sh, _, _)| sh.contains(py, px));
            let (color, d) = match hit {
                Some((_, c, d)) => (*c, *d),
                None => (bg_color, bg_depth + tilt_y * (py / s - 0.5) + tilt_x * (px / s - 0.5)),
            };
            for c in color {
                rgb.push(clamp01(c + noise.sample(&mut rng)));
            }
            depth.push(clamp01(d + 0.01 * noise.sample(&mut rng)));
            gt.push(if hit.is_some() { 1.0 } else { 0.0 });
        }
    }
    Sample {
        id: format!("s{seed}_{index:05}"),
        rgb: Tensor::new(&[size, size, 3], rgb).expect("extent"),
        depth: Tensor::new(&[size, size, 1], depth).expect("extent"),
        gt: Tensor::new(&[size, size], gt).expect("extent"),
    }
}

pub fn synth_dataset(seed: u64, n: usize, size: usize) -> Result<Vec<Sample>> {
    if n == 0 || size == 0 || !size.is_multiple_of(16) {
        return Err(Error::Dataset(format!(
            "need n >= 1 and a size divisible by 16, got n={n}, size={size}"
        )));
    }
    Ok((0..n).map(|i| synth_sample(seed, i, size)).collect())
}
