//! Gradient noise and the ridge fractal used for terrain.

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

const DIAG: f64 = std::f64::consts::FRAC_1_SQRT_2;

// Unit gradients at 45 degree steps.
const GRADIENTS: [(f64, f64); 8] = [
    (1.0, 0.0),
    (-1.0, 0.0),
    (0.0, 1.0),
    (0.0, -1.0),
    (DIAG, DIAG),
    (-DIAG, DIAG),
    (DIAG, -DIAG),
    (-DIAG, -DIAG),
];

/// Seeded 2D Perlin gradient noise with output in [-1, 1].
#[derive(Clone, Debug)]
pub struct Perlin {
    perm: [u8; 512],
}

impl Perlin {
    pub fn new(seed: u64) -> Self {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut p: Vec<u8> = (0..=255u8).collect();
        p.shuffle(&mut rng);
        let mut perm = [0u8; 512];
        for i in 0..512 {
            perm[i] = p[i & 255];
        }
        Self { perm }
    }

    fn gradient(&self, ix: i64, iy: i64) -> (f64, f64) {
        let a = self.perm[(ix & 255) as usize] as usize;
        let h = self.perm[(a + (iy & 255) as usize) & 511];
        GRADIENTS[(h & 7) as usize]
    }

    /// Zero at every integer lattice point.
    pub fn sample(&self, x: f64, y: f64) -> f64 {
        let x0 = x.floor();
        let y0 = y.floor();
        let (ix, iy) = (x0 as i64, y0 as i64);
        let (fx, fy) = (x - x0, y - y0);
        let dot = |gx: i64, gy: i64, dx: f64, dy: f64| {
            let g = self.gradient(gx, gy);
            g.0 * dx + g.1 * dy
        };
        let n00 = dot(ix, iy, fx, fy);
        let n10 = dot(ix + 1, iy, fx - 1.0, fy);
        let n01 = dot(ix, iy + 1, fx, fy - 1.0);
        let n11 = dot(ix + 1, iy + 1, fx - 1.0, fy - 1.0);
        let (u, v) = (fade(fx), fade(fy));
        let nx0 = lerp(n00, n10, u);
        let nx1 = lerp(n01, n11, u);
        // Unit gradients peak at sqrt(2)/2.
        (lerp(nx0, nx1, v) * std::f64::consts::SQRT_2).clamp(-1.0, 1.0)
    }
}

fn fade(t: f64) -> f64 {
    t * t * t * (t * (t * 6.0 - 15.0) + 10.0)
}

fn lerp(a: f64, b: f64, t: f64) -> f64 {
    a + t * (b - a)
}

/// Multi-octave ridge fractal: each octave contributes `1 - |noise|`, octave
/// amplitudes halve and frequencies double, and the sum is divided by the total
/// amplitude so the result stays in [0, 1].
#[derive(Clone, Debug)]
pub struct RidgeFractal {
    octaves: Vec<Perlin>,
    scale: f64,
}

impl RidgeFractal {
    pub fn new(seed: u64, octaves: u32, scale: f64) -> Self {
        assert!(octaves >= 1 && scale > 0.0);
        let octaves = (0..octaves as u64)
            .map(|o| Perlin::new(seed.wrapping_mul(0x9E37_79B9_7F4A_7C15).wrapping_add(o)))
            .collect();
        Self { octaves, scale }
    }

    pub fn sample(&self, x: f64, y: f64) -> f64 {
        let (mut total, mut norm) = (0.0, 0.0);
        let (mut amp, mut freq) = (1.0, 1.0 / self.scale);
        for p in &self.octaves {
            total += amp * (1.0 - p.sample(x * freq, y * freq).abs());
            norm += amp;
            amp *= 0.5;
            freq *= 2.0;
        }
        (total / norm).clamp(0.0, 1.0)
    }
}

/// One-off ridge fractal query at tile coordinates.
pub fn ridge_noise(x: f64, y: f64, octaves: u32, scale: f64, seed: u64) -> f64 {
    RidgeFractal::new(seed, octaves, scale).sample(x, y)
}
