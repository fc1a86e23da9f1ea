//! Procedural training and evaluation images, deterministic per seed.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::tensor::Tensor;

/// Multi-octave value noise in `[0, 1]`, one independent field per channel.
pub fn value_noise(w: usize, h: usize, seed: u64, base_cell: f64, octaves: usize) -> Tensor {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut out = Tensor::zeros([3, h, w]);
    for ch in 0..3 {
        let mut amp = 1.0;
        let mut total = 0.0;
        let mut cell = base_cell;
        let mut plane = vec![0.0; w * h];
        for _ in 0..octaves {
            let field = LatticeField::new(w, h, cell, &mut rng);
            for y in 0..h {
                for x in 0..w {
                    plane[y * w + x] += amp * field.at(x as f64, y as f64);
                }
            }
            total += amp;
            amp *= 0.5;
            cell = (cell / 2.0).max(2.0);
        }
        for (i, v) in plane.iter().enumerate() {
            out.data_mut()[ch * w * h + i] = v / total;
        }
    }
    out
}

struct LatticeField {
    cols: usize,
    cell: f64,
    ox: f64,
    oy: f64,
    values: Vec<f64>,
}

impl LatticeField {
    fn new<R: Rng>(w: usize, h: usize, cell: f64, rng: &mut R) -> Self {
        let cols = (w as f64 / cell).ceil() as usize + 2;
        let rows = (h as f64 / cell).ceil() as usize + 2;
        let values = (0..cols * rows).map(|_| rng.gen::<f64>()).collect();
        LatticeField {
            cols,
            cell,
            ox: rng.gen::<f64>() * cell,
            oy: rng.gen::<f64>() * cell,
            values,
        }
    }

    fn at(&self, x: f64, y: f64) -> f64 {
        let (u, v) = ((x + self.ox) / self.cell, (y + self.oy) / self.cell);
        let (i, j) = (u.floor() as usize, v.floor() as usize);
        let smooth = |t: f64| t * t * (3.0 - 2.0 * t);
        let (fx, fy) = (smooth(u - u.floor()), smooth(v - v.floor()));
        let g = |a: usize, b: usize| self.values[b * self.cols + a];
        let top = g(i, j) * (1.0 - fx) + g(i + 1, j) * fx;
        let bottom = g(i, j + 1) * (1.0 - fx) + g(i + 1, j + 1) * fx;
        top * (1.0 - fy) + bottom * fy
    }
}

/// A rotated two-colour checkerboard.
pub fn checkerboard(w: usize, h: usize, seed: u64) -> Tensor {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let cell = rng.gen_range(6.0..14.0);
    let angle: f64 = rng.gen_range(0.0..std::f64::consts::FRAC_PI_2);
    let a: [f64; 3] = rng.gen();
    let b: [f64; 3] = rng.gen();
    let (s, c) = angle.sin_cos();
    Tensor::from_fn([3, h, w], |i| {
        let (ch, rest) = (i / (w * h), i % (w * h));
        let (x, y) = ((rest % w) as f64, (rest / w) as f64);
        let (u, v) = (c * x + s * y, -s * x + c * y);
        let odd = ((u / cell).floor() as i64 + (v / cell).floor() as i64).rem_euclid(2) == 1;
        if odd { a[ch] } else { b[ch] }
    })
}

/// The texture used for corpora: value noise, with a faint checkerboard
/// blended in for every third seed.
pub fn texture(w: usize, h: usize, seed: u64) -> Tensor {
    let mut img = value_noise(w, h, seed, 16.0, 4);
    if seed % 3 == 2 {
        let board = checkerboard(w, h, seed ^ 0x9e37_79b9_7f4a_7c15);
        for (p, q) in img.data_mut().iter_mut().zip(board.data()) {
            *p = 0.6 * *p + 0.4 * q;
        }
    }
    img
}

/// `n` textures of `size x size` with seeds `seed, seed + 1, ...`.
pub fn corpus(n: usize, size: usize, seed: u64) -> Vec<Tensor> {
    (0..n as u64).map(|k| texture(size, size, seed.wrapping_add(k))).collect()
}

/// Smooth low-frequency image, for equivariance checks.
pub fn smooth(w: usize, h: usize, seed: u64) -> Tensor {
    value_noise(w, h, seed, (w.min(h) as f64 / 3.0).max(4.0), 1)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn deterministic_and_in_range() {
        let a = texture(40, 30, 5);
        assert_eq!(a, texture(40, 30, 5));
        assert_ne!(a, texture(40, 30, 6));
        assert_eq!(a.shape(), &[3, 30, 40]);
        for img in [a, checkerboard(20, 20, 1), texture(20, 20, 2), smooth(32, 32, 3)] {
            assert!(img.data().iter().all(|v| (0.0..=1.0).contains(v)));
        }
    }

    #[test]
    fn corpus_members_differ() {
        let c = corpus(4, 16, 10);
        assert_eq!(c.len(), 4);
        assert_ne!(c[0], c[1]);
    }
}
