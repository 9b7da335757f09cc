//! Multi-resolution hashed voxel grids over the contracted domain `[-2, 2]^3`.

use nalgebra::Vector3;

const PRIMES: [u32; 3] = [1, 2_654_435_761, 805_459_861];
/// Half-width of the voxelized cube; contracted points satisfy `|p| < 2`.
pub const DOMAIN_HALF_WIDTH: f64 = 2.0;

/// `(x * 1 ^ y * 2654435761 ^ z * 805459861) mod T` in wrapping 32-bit
/// arithmetic. `table_size` must be a power of two.
#[inline]
pub fn hash_index(cell: [u32; 3], table_size: usize) -> usize {
    debug_assert!(table_size.is_power_of_two());
    let h = cell[0].wrapping_mul(PRIMES[0])
        ^ cell[1].wrapping_mul(PRIMES[1])
        ^ cell[2].wrapping_mul(PRIMES[2]);
    (h as usize) & (table_size - 1)
}

/// Per-level resolutions, geometric from `base` to `max` (both inclusive).
pub fn level_resolutions(levels: usize, base: u32, max: u32) -> Vec<u32> {
    if levels == 1 {
        return vec![base];
    }
    let growth = ((max as f64).ln() - (base as f64).ln()) / (levels - 1) as f64;
    (0..levels)
        .map(|l| (base as f64 * (growth * l as f64).exp() + 1e-9).floor() as u32)
        .collect()
}

/// The eight voxel corners around a point, with their table slots and
/// multilinear weights. Corner `k` offsets axis `a` by bit `a` of `k`.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct CellLookup {
    pub slots: [usize; 8],
    pub weights: [f64; 8],
    /// Fractional position inside the cell, per axis.
    pub frac: [f64; 3],
    pub resolution: u32,
}

impl CellLookup {
    pub fn new(p: &Vector3<f64>, resolution: u32, table_size: usize) -> Self {
        let n = resolution as f64;
        let mut cell = [0u32; 3];
        let mut frac = [0.0; 3];
        for a in 0..3 {
            let u = ((p[a] + DOMAIN_HALF_WIDTH) / (2.0 * DOMAIN_HALF_WIDTH) * n).clamp(0.0, n);
            let c = u.floor().min(n - 1.0);
            cell[a] = c as u32;
            frac[a] = u - c;
        }
        let mut slots = [0usize; 8];
        let mut weights = [0.0; 8];
        for k in 0..8 {
            let mut corner = cell;
            let mut w = 1.0;
            for a in 0..3 {
                if (k >> a) & 1 == 1 {
                    corner[a] += 1;
                    w *= frac[a];
                } else {
                    w *= 1.0 - frac[a];
                }
            }
            slots[k] = hash_index(corner, table_size);
            weights[k] = w;
        }
        Self {
            slots,
            weights,
            frac,
            resolution,
        }
    }

    /// `d weight_k / d p` (contracted coordinates) for every corner.
    pub fn weight_gradients(&self) -> [[f64; 3]; 8] {
        let scale = self.resolution as f64 / (2.0 * DOMAIN_HALF_WIDTH);
        let mut out = [[0.0; 3]; 8];
        for (k, g) in out.iter_mut().enumerate() {
            for (a, ga) in g.iter_mut().enumerate() {
                let mut w = if (k >> a) & 1 == 1 { 1.0 } else { -1.0 };
                for b in 0..3 {
                    if b != a {
                        w *= if (k >> b) & 1 == 1 {
                            self.frac[b]
                        } else {
                            1.0 - self.frac[b]
                        };
                    }
                }
                *ga = w * scale;
            }
        }
        out
    }
}
