//! Synthetic piecewise-smooth training images.

use rand::Rng as _;

use crate::error::{Error, Result};
use crate::image::{Image, Shape};
use crate::Rng;

enum Blob {
    Rect { r0: f64, c0: f64, r1: f64, c1: f64 },
    Disk { r: f64, c: f64, radius: f64 },
}

impl Blob {
    fn contains(&self, i: f64, j: f64) -> bool {
        match *self {
            Blob::Rect { r0, c0, r1, c1 } => i >= r0 && i < r1 && j >= c0 && j < c1,
            Blob::Disk { r, c, radius } => (i - r).powi(2) + (j - c).powi(2) <= radius * radius,
        }
    }
}

/// `n` grayscale `size x size` images: a smooth ramp background with
/// constant-intensity rectangles and disks, cropped at a random offset from
/// a larger canvas and randomly flipped. Values lie in `[0, 1]`.
pub fn synth_images(n: usize, size: usize, rng: &mut Rng) -> Result<Vec<Image>> {
    if size == 0 {
        return Err(Error::InvalidArgument("image size must be positive".into()));
    }
    let canvas = size + size / 2;
    (0..n)
        .map(|_| {
            let base = rng.random_range(0.2..0.6);
            let (gi, gj) = (rng.random_range(-0.3..0.3), rng.random_range(-0.3..0.3));
            let blobs: Vec<(Blob, f64)> = (0..rng.random_range(3..7))
                .map(|_| {
                    let cf = canvas as f64;
                    let blob = if rng.random_bool(0.5) {
                        let (r0, c0) = (rng.random_range(0.0..cf), rng.random_range(0.0..cf));
                        let (h, w) = (rng.random_range(0.15..0.5) * cf, rng.random_range(0.15..0.5) * cf);
                        Blob::Rect { r0, c0, r1: r0 + h, c1: c0 + w }
                    } else {
                        Blob::Disk {
                            r: rng.random_range(0.0..cf),
                            c: rng.random_range(0.0..cf),
                            radius: rng.random_range(0.08..0.3) * cf,
                        }
                    };
                    (blob, rng.random_range(0.0..1.0))
                })
                .collect();
            let off_i = rng.random_range(0..=canvas - size);
            let off_j = rng.random_range(0..=canvas - size);
            let flip_v = rng.random_bool(0.5);
            let flip_h = rng.random_bool(0.5);
            let mut data = vec![0.0; size * size];
            for i in 0..size {
                for j in 0..size {
                    let ci = (off_i + i) as f64;
                    let cj = (off_j + j) as f64;
                    let mut v = base + gi * ci / canvas as f64 + gj * cj / canvas as f64;
                    for (blob, level) in &blobs {
                        if blob.contains(ci, cj) {
                            v = *level;
                        }
                    }
                    let ti = if flip_v { size - 1 - i } else { i };
                    let tj = if flip_h { size - 1 - j } else { j };
                    data[ti * size + tj] = v.clamp(0.0, 1.0);
                }
            }
            Image::from_vec(Shape::gray(size, size), data)
        })
        .collect()
}
