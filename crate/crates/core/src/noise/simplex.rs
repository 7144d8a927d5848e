//! 2-D simplex gradient noise over a seeded permutation table.

use rand::seq::SliceRandom;

use crate::rng::Rng;

const GRADIENTS: [(f64, f64); 12] = [
    (1.0, 1.0),
    (-1.0, 1.0),
    (1.0, -1.0),
    (-1.0, -1.0),
    (1.0, 0.0),
    (-1.0, 0.0),
    (1.0, 0.0),
    (-1.0, 0.0),
    (0.0, 1.0),
    (0.0, -1.0),
    (0.0, 1.0),
    (0.0, -1.0),
];

/// Skew and unskew factors for the 2-D simplex lattice.
const F2: f64 = 0.366_025_403_784_438_6; // (sqrt(3) - 1) / 2
const G2: f64 = 0.211_324_865_405_187_1; // (3 - sqrt(3)) / 6

pub struct Simplex2 {
    perm: [u8; 512],
}

impl Simplex2 {
    pub fn new(rng: &mut Rng) -> Self {
        let mut base: Vec<u8> = (0..=255u8).collect();
        base.shuffle(rng);
        let mut perm = [0u8; 512];
        for i in 0..512 {
            perm[i] = base[i & 255];
        }
        Self { perm }
    }

    fn gradient_index(&self, i: i64, j: i64) -> usize {
        let ii = (i & 255) as usize;
        let jj = (j & 255) as usize;
        self.perm[ii + self.perm[jj] as usize] as usize % GRADIENTS.len()
    }

    /// Noise value at `(x, y)`, roughly in `[-1, 1]`.
    pub fn sample(&self, x: f64, y: f64) -> f64 {
        let s = (x + y) * F2;
        let i = (x + s).floor();
        let j = (y + s).floor();
        let t = (i + j) * G2;
        let x0 = x - (i - t);
        let y0 = y - (j - t);
        let (i1, j1) = if x0 > y0 { (1.0, 0.0) } else { (0.0, 1.0) };
        let x1 = x0 - i1 + G2;
        let y1 = y0 - j1 + G2;
        let x2 = x0 - 1.0 + 2.0 * G2;
        let y2 = y0 - 1.0 + 2.0 * G2;

        let (i, j) = (i as i64, j as i64);
        let corners = [
            (x0, y0, self.gradient_index(i, j)),
            (x1, y1, self.gradient_index(i + i1 as i64, j + j1 as i64)),
            (x2, y2, self.gradient_index(i + 1, j + 1)),
        ];
        let mut total = 0.0;
        for (dx, dy, g) in corners {
            let falloff = 0.5 - dx * dx - dy * dy;
            if falloff > 0.0 {
                let (gx, gy) = GRADIENTS[g];
                let f2 = falloff * falloff;
                total += f2 * f2 * (gx * dx + gy * dy);
            }
        }
        70.0 * total
    }
}
