//! The shared latent feature field: contraction, hashed multi-resolution
//! grids, SH view encoding and a small MLP head. Gaussians carry no
//! appearance parameters; their features are looked up here at render time.

pub mod contract;
pub mod hash_grid;
pub mod mlp;
pub mod sh;

use std::collections::BTreeMap;

use nalgebra::Vector3;
use rand::Rng;
use serde::{Deserialize, Serialize};

pub use contract::{contract, contract_jacobian};
pub use hash_grid::{hash_index, level_resolutions, CellLookup};
pub use mlp::{Mlp, MlpRecord};
pub use sh::{sh_backward, sh_basis, sh_encode, SH_DIM};

use crate::error::{Error, Result};

/// Output feature width.
pub const FEATURE_DIM: usize = 16;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct FieldConfig {
    pub levels: usize,
    pub log2_table_size: u32,
    pub features_per_level: usize,
    pub base_resolution: u32,
    pub max_resolution: u32,
    pub hidden: usize,
    /// Half-width of the uniform table initialization.
    pub init_scale: f64,
}

impl Default for FieldConfig {
    fn default() -> Self {
        Self {
            levels: 16,
            log2_table_size: 19,
            features_per_level: 2,
            base_resolution: 16,
            max_resolution: 2048,
            hidden: 64,
            init_scale: 1e-4,
        }
    }
}

impl FieldConfig {
    pub fn table_size(&self) -> usize {
        1usize << self.log2_table_size
    }

    pub fn grid_dim(&self) -> usize {
        self.levels * self.features_per_level
    }

    pub fn validate(&self) -> Result<()> {
        if self.levels == 0 || self.features_per_level == 0 || self.hidden == 0 {
            return Err(Error::BadConfig("field dimensions must be positive".into()));
        }
        if self.log2_table_size == 0 || self.log2_table_size > 28 {
            return Err(Error::BadConfig("log2_table_size must be in 1..=28".into()));
        }
        if self.base_resolution < 2 || self.max_resolution < self.base_resolution {
            return Err(Error::BadConfig("grid resolutions must increase from >= 2".into()));
        }
        let res = level_resolutions(self.levels, self.base_resolution, self.max_resolution);
        if res.windows(2).any(|w| w[0] >= w[1]) {
            return Err(Error::BadConfig(
                "grid resolutions are not strictly increasing; widen the range or use fewer levels"
                    .into(),
            ));
        }
        Ok(())
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct FeatureField {
    pub config: FieldConfig,
    pub resolutions: Vec<u32>,
    /// `levels x T x D`, level-major.
    pub tables: Vec<f64>,
    pub mlp: Mlp,
}

/// Everything the backward pass needs from one field query.
#[derive(Clone, Debug)]
pub struct FieldRecord {
    pub position: Vector3<f64>,
    pub contracted: Vector3<f64>,
    pub direction: Vector3<f64>,
    pub cells: Vec<CellLookup>,
    pub mlp: MlpRecord,
}

/// Gradients of one or many field queries. Table gradients are sparse and
/// keyed by flat table offset; the BTreeMap keeps iteration deterministic.
#[derive(Clone, Debug, Default, PartialEq)]
pub struct FieldGrad {
    pub tables: BTreeMap<usize, f64>,
    pub mlp: Vec<f64>,
}

impl FieldGrad {
    pub fn new(field: &FeatureField) -> Self {
        Self {
            tables: BTreeMap::new(),
            mlp: vec![0.0; field.mlp.params.len()],
        }
    }

    pub fn add(&mut self, other: &FieldGrad) {
        for (k, v) in &other.tables {
            *self.tables.entry(*k).or_insert(0.0) += v;
        }
        for (a, b) in self.mlp.iter_mut().zip(&other.mlp) {
            *a += b;
        }
    }
}

/// Per-query geometric gradients.
#[derive(Clone, Copy, Debug, Default, PartialEq)]
pub struct QueryGrad {
    /// Through the grid lookup (includes the contraction Jacobian).
    pub position: Vector3<f64>,
    /// Through the SH encoding, with respect to the direction vector.
    pub direction: Vector3<f64>,
}

impl FeatureField {
    pub fn zeros(config: FieldConfig) -> Result<Self> {
        config.validate()?;
        let resolutions =
            level_resolutions(config.levels, config.base_resolution, config.max_resolution);
        let tables = vec![0.0; config.levels * config.table_size() * config.features_per_level];
        let mlp = Mlp::zeros(config.grid_dim() + SH_DIM, config.hidden, FEATURE_DIM);
        Ok(Self {
            config,
            resolutions,
            tables,
            mlp,
        })
    }

    /// Uniform table init in `[-init_scale, init_scale]`, He-normal MLP.
    pub fn init(config: FieldConfig, rng: &mut impl Rng) -> Result<Self> {
        let mut field = Self::zeros(config)?;
        let s = field.config.init_scale;
        for v in &mut field.tables {
            *v = rng.random_range(-s..=s);
        }
        field.mlp = Mlp::he_init(
            field.config.grid_dim() + SH_DIM,
            field.config.hidden,
            FEATURE_DIM,
            rng,
        );
        Ok(field)
    }

    /// `L * T * D` table entries plus MLP parameters. Independent of how many
    /// Gaussians query the field.
    pub fn param_count(&self) -> usize {
        self.tables.len() + self.mlp.params.len()
    }

    #[inline]
    fn slot_offset(&self, level: usize, slot: usize) -> usize {
        (level * self.config.table_size() + slot) * self.config.features_per_level
    }

    pub fn lookup(&self, level: usize, contracted: &Vector3<f64>) -> CellLookup {
        CellLookup::new(
            contracted,
            self.resolutions[level],
            self.config.table_size(),
        )
    }

    /// Multilinear blend of the eight corner entries at one level.
    pub fn grid_interpolate(&self, level: usize, contracted: &Vector3<f64>) -> Vec<f64> {
        let cell = self.lookup(level, contracted);
        self.blend(level, &cell)
    }

    fn blend(&self, level: usize, cell: &CellLookup) -> Vec<f64> {
        let d = self.config.features_per_level;
        let mut out = vec![0.0; d];
        for (slot, w) in cell.slots.iter().zip(&cell.weights) {
            let off = self.slot_offset(level, *slot);
            for (o, t) in out.iter_mut().zip(&self.tables[off..off + d]) {
                *o += w * t;
            }
        }
        out
    }

    /// Concatenated per-level features, coarse level first.
    pub fn view_independent_feature(&self, p: &Vector3<f64>) -> Vec<f64> {
        let pc = contract(p);
        (0..self.config.levels)
            .flat_map(|l| self.grid_interpolate(l, &pc))
            .collect()
    }

    pub fn feature(&self, p: &Vector3<f64>, d: &Vector3<f64>) -> Result<[f64; FEATURE_DIM]> {
        Ok(self.feature_with_record(p, d)?.0)
    }

    pub fn feature_with_record(
        &self,
        p: &Vector3<f64>,
        d: &Vector3<f64>,
    ) -> Result<([f64; FEATURE_DIM], FieldRecord)> {
        let sh = sh_encode(d)?;
        let pc = contract(p);
        let mut input = Vec::with_capacity(self.mlp.input);
        let mut cells = Vec::with_capacity(self.config.levels);
        for l in 0..self.config.levels {
            let cell = self.lookup(l, &pc);
            input.extend(self.blend(l, &cell));
            cells.push(cell);
        }
        input.extend_from_slice(&sh);
        let (out, mlp) = self.mlp.forward(&input);
        let mut f = [0.0; FEATURE_DIM];
        f.copy_from_slice(&out);
        Ok((
            f,
            FieldRecord {
                position: *p,
                contracted: pc,
                direction: *d,
                cells,
                mlp,
            },
        ))
    }

    /// Reverse pass of one query: scatter-adds into `grad`, returns the
    /// geometric gradients.
    pub fn backward(
        &self,
        rec: &FieldRecord,
        upstream: &[f64; FEATURE_DIM],
        grad: &mut FieldGrad,
    ) -> QueryGrad {
        if upstream.iter().all(|u| *u == 0.0) {
            return QueryGrad::default();
        }
        let dinput = self.mlp.backward(&rec.mlp, upstream, &mut grad.mlp);
        let d = self.config.features_per_level;
        let mut dpc = Vector3::zeros();
        for (l, cell) in rec.cells.iter().enumerate() {
            let dfeat = &dinput[l * d..(l + 1) * d];
            let wgrads = cell.weight_gradients();
            for k in 0..8 {
                let off = self.slot_offset(l, cell.slots[k]);
                let mut dot = 0.0;
                for j in 0..d {
                    *grad.tables.entry(off + j).or_insert(0.0) += cell.weights[k] * dfeat[j];
                    dot += self.tables[off + j] * dfeat[j];
                }
                for a in 0..3 {
                    dpc[a] += dot * wgrads[k][a];
                }
            }
        }
        let dsh: [f64; SH_DIM] = std::array::from_fn(|k| dinput[self.config.grid_dim() + k]);
        QueryGrad {
            position: contract_jacobian(&rec.position).transpose() * dpc,
            direction: sh_backward(&rec.direction, &dsh),
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    fn small_config() -> FieldConfig {
        FieldConfig {
            levels: 4,
            log2_table_size: 8,
            base_resolution: 4,
            max_resolution: 32,
            hidden: 8,
            ..FieldConfig::default()
        }
    }

    fn random_field(seed: u64, config: FieldConfig) -> FeatureField {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut f = FeatureField::init(config, &mut rng).unwrap();
        // Larger table values than the default init so every path matters.
        for v in &mut f.tables {
            *v = rng.random_range(-1.0..1.0);
        }
        f
    }

    fn unit(v: [f64; 3]) -> Vector3<f64> {
        Vector3::from(v).normalize()
    }

    #[test]
    fn default_dimensions() {
        let f = FeatureField::zeros(FieldConfig::default()).unwrap();
        assert_eq!(f.view_independent_feature(&Vector3::new(0.1, 0.2, 0.3)).len(), 32);
        assert_eq!(f.mlp.input, 48);
        assert_eq!(
            f.param_count(),
            16 * (1 << 19) * 2 + Mlp::param_count(48, 64, 16)
        );
    }

    #[test]
    fn zero_tables_give_zero_feature_vector() {
        let f = FeatureField::zeros(small_config()).unwrap();
        let v = f.view_independent_feature(&Vector3::new(3.0, -1.0, 0.2));
        assert!(v.iter().all(|x| *x == 0.0));
        let out = f.feature(&Vector3::new(0.3, 0.1, 0.0), &unit([0.0, 0.0, 1.0])).unwrap();
        assert!(out.iter().all(|x| *x == 0.0));
    }

    #[test]
    fn interpolation_at_node_returns_entry() {
        let f = random_field(1, small_config());
        // Level 0 has resolution 4: nodes at -2, -1, 0, 1, 2.
        let p = Vector3::new(-1.0, 0.0, 1.0);
        let cell = f.lookup(0, &p);
        let slot = hash_index([1, 2, 3], f.config.table_size());
        assert!((cell.weights[0] - 1.0).abs() < 1e-15);
        let off = slot * 2;
        let v = f.grid_interpolate(0, &p);
        assert!((v[0] - f.tables[off]).abs() < 1e-15);
        assert!((v[1] - f.tables[off + 1]).abs() < 1e-15);
    }

    #[test]
    fn interpolation_at_edge_midpoint_is_mean() {
        let f = random_field(2, small_config());
        let p = Vector3::new(-0.5, 0.0, 1.0);
        let t = f.config.table_size();
        let a = hash_index([1, 2, 3], t) * 2;
        let b = hash_index([2, 2, 3], t) * 2;
        let v = f.grid_interpolate(0, &p);
        for j in 0..2 {
            let expect = 0.5 * (f.tables[a + j] + f.tables[b + j]);
            assert!((v[j] - expect).abs() < 1e-14);
        }
    }

    /// Independent oracle: explicit corner enumeration from the grid formula.
    fn brute_interpolate(f: &FeatureField, level: usize, p: &Vector3<f64>) -> Vec<f64> {
        let n = f.resolutions[level] as f64;
        let t = f.config.table_size();
        let u: Vec<f64> = (0..3).map(|a| (p[a] + 2.0) / 4.0 * n).collect();
        let base: Vec<f64> = u.iter().map(|x| x.floor()).collect();
        let mut out = vec![0.0; 2];
        for dx in 0..2u32 {
            for dy in 0..2u32 {
                for dz in 0..2u32 {
                    let off = [dx, dy, dz];
                    let mut w = 1.0;
                    let mut corner = [0u32; 3];
                    for a in 0..3 {
                        let fr = u[a] - base[a];
                        w *= if off[a] == 1 { fr } else { 1.0 - fr };
                        corner[a] = base[a] as u32 + off[a];
                    }
                    let h = (corner[0] ^ corner[1].wrapping_mul(2654435761) ^ corner[2].wrapping_mul(805459861)) as usize % t;
                    let o = (level * t + h) * 2;
                    out[0] += w * f.tables[o];
                    out[1] += w * f.tables[o + 1];
                }
            }
        }
        out
    }

    #[test]
    fn interpolation_matches_brute_force_oracle() {
        let f = random_field(3, small_config());
        let mut rng = ChaCha8Rng::seed_from_u64(4);
        for _ in 0..100 {
            let p = Vector3::new(rng.random_range(-1.9..1.9), rng.random_range(-1.9..1.9), rng.random_range(-1.9..1.9));
            for l in 0..f.config.levels {
                let a = f.grid_interpolate(l, &p);
                let b = brute_interpolate(&f, l, &p);
                assert!((a[0] - b[0]).abs() < 1e-12 && (a[1] - b[1]).abs() < 1e-12);
            }
        }
    }

    #[test]
    fn concatenation_contract() {
        let f = random_field(5, small_config());
        let p = Vector3::new(1.7, -0.4, 2.2);
        let v = f.view_independent_feature(&p);
        let pc = contract(&p);
        for l in 0..f.config.levels {
            assert_eq!(&v[l * 2..(l + 1) * 2], f.grid_interpolate(l, &pc).as_slice());
        }
    }

    #[test]
    fn feature_matches_explicit_loop_forward() {
        let f = random_field(6, small_config());
        let p = Vector3::new(0.4, -0.2, 0.9);
        let d = unit([0.2, -0.6, 0.7]);
        let got = f.feature(&p, &d).unwrap();

        let mut x = f.view_independent_feature(&p);
        x.extend(sh_basis(&d));
        let (ni, nh, no) = (f.mlp.input, f.mlp.hidden, f.mlp.output);
        let w = &f.mlp.params;
        let mut hidden = vec![0.0; nh];
        for h in 0..nh {
            let mut s = w[nh * ni + h];
            for i in 0..ni {
                s += w[h * ni + i] * x[i];
            }
            hidden[h] = if s > 0.0 { s } else { 0.0 };
        }
        let base = nh * ni + nh;
        for o in 0..no {
            let mut s = w[base + no * nh + o];
            for h in 0..nh {
                s += w[base + o * nh + h] * hidden[h];
            }
            assert!((got[o] - s).abs() < 1e-12);
        }
    }

    #[test]
    fn field_is_shared_across_queries() {
        let f = random_field(7, small_config());
        let p = Vector3::new(0.1, 0.2, 0.3);
        let d = unit([1.0, 1.0, 1.0]);
        assert_eq!(f.feature(&p, &d).unwrap(), f.feature(&p, &d).unwrap());
    }

    #[test]
    fn zero_upstream_gives_zero_gradients() {
        let f = random_field(8, small_config());
        let (_, rec) = f.feature_with_record(&Vector3::new(0.3, 0.3, 0.3), &unit([0.0, 1.0, 0.0])).unwrap();
        let mut g = FieldGrad::new(&f);
        let q = f.backward(&rec, &[0.0; FEATURE_DIM], &mut g);
        assert!(g.tables.is_empty());
        assert!(g.mlp.iter().all(|v| *v == 0.0));
        assert_eq!(q, QueryGrad::default());
    }

    fn objective(f: &FeatureField, p: &Vector3<f64>, d: &Vector3<f64>, w: &[f64; FEATURE_DIM]) -> f64 {
        f.feature(p, d).unwrap().iter().zip(w).map(|(a, b)| a * b).sum()
    }

    fn rel_err(a: f64, b: f64) -> f64 {
        (a - b).abs() / a.abs().max(b.abs()).max(1e-8)
    }

    #[test]
    fn gradients_match_finite_differences() {
        let mut f = random_field(9, small_config());
        let w: [f64; FEATURE_DIM] = std::array::from_fn(|k| (k as f64 * 0.37).sin());
        let d = unit([0.3, -0.4, 0.8]);
        let h = 1e-4;
        for p in [Vector3::new(0.31, -0.27, 0.44), Vector3::new(1.63, 0.52, -0.91)] {
            let (_, rec) = f.feature_with_record(&p, &d).unwrap();
            let mut g = FieldGrad::new(&f);
            let q = f.backward(&rec, &w, &mut g);

            // Tables.
            for (&k, &an) in g.tables.iter().take(40) {
                let orig = f.tables[k];
                f.tables[k] = orig + h;
                let a = objective(&f, &p, &d, &w);
                f.tables[k] = orig - h;
                let b = objective(&f, &p, &d, &w);
                f.tables[k] = orig;
                assert!(rel_err(an, (a - b) / (2.0 * h)) < 1e-3, "table {k}");
            }
            // MLP.
            for k in (0..f.mlp.params.len()).step_by(7) {
                let orig = f.mlp.params[k];
                f.mlp.params[k] = orig + h;
                let a = objective(&f, &p, &d, &w);
                f.mlp.params[k] = orig - h;
                let b = objective(&f, &p, &d, &w);
                f.mlp.params[k] = orig;
                assert!(rel_err(g.mlp[k], (a - b) / (2.0 * h)) < 1e-3, "mlp {k}");
            }
            // Position through grid + contraction (interior points, small h).
            let hp = 1e-6;
            for a in 0..3 {
                let mut pa = p;
                let mut pb = p;
                pa[a] += hp;
                pb[a] -= hp;
                let fd = (objective(&f, &pa, &d, &w) - objective(&f, &pb, &d, &w)) / (2.0 * hp);
                assert!(rel_err(q.position[a], fd) < 1e-3, "pos {a}: {} vs {fd}", q.position[a]);
            }
            // Direction (unconstrained polynomial derivative).
            for a in 0..3 {
                let mut da = d;
                let mut db = d;
                da[a] += 1e-7;
                db[a] -= 1e-7;
                let sa: f64 = {
                    let mut x = f.view_independent_feature(&p);
                    x.extend(sh_basis(&da));
                    f.mlp.forward(&x).0.iter().zip(&w).map(|(a, b)| a * b).sum()
                };
                let sb: f64 = {
                    let mut x = f.view_independent_feature(&p);
                    x.extend(sh_basis(&db));
                    f.mlp.forward(&x).0.iter().zip(&w).map(|(a, b)| a * b).sum()
                };
                assert!(rel_err(q.direction[a], (sa - sb) / 2e-7) < 1e-3, "dir {a}");
            }
        }
    }

    #[test]
    fn param_count_is_independent_of_queries() {
        let f = random_field(10, small_config());
        let before = f.param_count();
        for i in 0..100 {
            let _ = f.feature(&Vector3::new(i as f64 * 0.01, 0.0, 0.0), &unit([0.0, 0.0, 1.0]));
        }
        assert_eq!(before, f.param_count());
        assert_eq!(before, 4 * 256 * 2 + Mlp::param_count(24, 8, 16));
    }
}
