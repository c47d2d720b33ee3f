//! Per-vertex multi-resolution hash tables and their linear blending.
//!
//! Every anchor vertex owns `M` small hash tables ("blendshapes"). For a given
//! expression the tables are merged with expression-dependent weights and the
//! merged table is queried with trilinear hash encoding in the anchor's
//! tangent space. Because the lookup is linear in the table entries, encoding
//! a merged table equals the weighted sum of encodings of the originals.

use rand::Rng;

use crate::error::{invalid, Error, Result};
use crate::Vec3;

/// Spatial hash primes (x, y, z).
pub const HASH_PRIMES: [u32; 3] = [1, 2_654_435_761, 805_459_861];

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct HashConfig {
    pub levels: usize,
    pub table_size: usize,
    pub features: usize,
    pub coarsest: usize,
    pub finest: usize,
}

impl Default for HashConfig {
    fn default() -> Self {
        Self {
            levels: 2,
            table_size: 1 << 8,
            features: 4,
            coarsest: 32,
            finest: 64,
        }
    }
}

impl HashConfig {
    pub fn validate(&self) -> Result<()> {
        if self.levels == 0 || self.table_size == 0 || self.features == 0 {
            return invalid("hash config needs at least one level, entry and feature");
        }
        if self.coarsest == 0 || self.finest < self.coarsest {
            return invalid("hash resolutions must satisfy 0 < coarsest <= finest");
        }
        if self.levels > 1 && self.finest == self.coarsest {
            return invalid("multi-level hash grid needs strictly increasing resolutions");
        }
        Ok(())
    }

    /// Geometric progression from coarsest to finest.
    pub fn resolutions(&self) -> Vec<usize> {
        if self.levels == 1 {
            return vec![self.coarsest];
        }
        let growth = ((self.finest as f64).ln() - (self.coarsest as f64).ln()) / (self.levels - 1) as f64;
        (0..self.levels)
            .map(|l| (self.coarsest as f64 * (growth * l as f64).exp()).round() as usize)
            .collect()
    }

    /// Values in one table: levels × entries × features.
    pub fn table_len(&self) -> usize {
        self.levels * self.table_size * self.features
    }

    /// Width of an embedding: levels × features.
    pub fn embedding_dim(&self) -> usize {
        self.levels * self.features
    }
}

/// `(x·π₁ ⊕ y·π₂ ⊕ z·π₃) mod T` in wrapping 32-bit arithmetic.
#[inline]
pub fn hash_index(cell: [u32; 3], table_size: usize) -> usize {
    let h = cell[0].wrapping_mul(HASH_PRIMES[0])
        ^ cell[1].wrapping_mul(HASH_PRIMES[1])
        ^ cell[2].wrapping_mul(HASH_PRIMES[2]);
    h as usize % table_size
}

/// A single standalone table, used where one table is handled on its own.
#[derive(Clone, Debug, PartialEq)]
pub struct HashTable {
    pub config: HashConfig,
    /// Half-extent ρ of the local cube `[-ρ, ρ]³` the grid spans.
    pub extent: f64,
    /// Layout: level, entry, feature.
    pub data: Vec<f64>,
}

impl HashTable {
    pub fn zeros(config: HashConfig, extent: f64) -> Self {
        Self {
            config,
            extent,
            data: vec![0.0; config.table_len()],
        }
    }

    pub fn random(config: HashConfig, extent: f64, scale: f64, rng: &mut impl Rng) -> Self {
        let data = (0..config.table_len()).map(|_| rng.random_range(-scale..scale)).collect();
        Self { config, extent, data }
    }

    pub fn encode(&self, q: &Vec3) -> Vec<f64> {
        let mut out = vec![0.0; self.config.embedding_dim()];
        encode_into(&self.config, &self.config.resolutions(), self.extent, &self.data, q, &mut out);
        out
    }
}

/// Entrywise `Σ_m w_m H_m`.
pub fn merge_tables(tables: &[HashTable], weights: &[f64]) -> Result<HashTable> {
    let Some(first) = tables.first() else {
        return invalid("cannot merge an empty set of tables");
    };
    if tables.len() != weights.len() {
        return invalid(format!("{} tables but {} weights", tables.len(), weights.len()));
    }
    if let Some(i) = weights.iter().position(|w| !w.is_finite()) {
        return invalid(format!("merge weight {i} is not finite"));
    }
    for t in tables {
        if t.config != first.config || t.data.len() != first.data.len() || t.extent != first.extent {
            return Err(Error::InvalidInput("merging tables with mismatched shapes".into()));
        }
    }
    let mut out = HashTable::zeros(first.config, first.extent);
    let slices: Vec<&[f64]> = tables.iter().map(|t| t.data.as_slice()).collect();
    merge_into(&slices, weights, &mut out.data);
    Ok(out)
}

/// Entrywise weighted sum of equally sized slices into `out`.
pub fn merge_into(tables: &[&[f64]], weights: &[f64], out: &mut [f64]) {
    out.iter_mut().for_each(|v| *v = 0.0);
    for (t, &w) in tables.iter().zip(weights) {
        for (o, &h) in out.iter_mut().zip(t.iter()) {
            *o += w * h;
        }
    }
}

/// Grid coordinates of `q` at one level: continuous position in `[0, N]`,
/// lower cell corner, fractional offset and whether the coordinate was clamped.
#[inline]
fn grid_coords(q: &Vec3, extent: f64, res: usize) -> ([u32; 3], [f64; 3], [bool; 3]) {
    let n = res as f64;
    let mut cell = [0u32; 3];
    let mut frac = [0.0; 3];
    let mut clamped = [false; 3];
    for d in 0..3 {
        let raw = (q[d] / extent + 1.0) * 0.5 * n;
        let pos = raw.clamp(0.0, n);
        clamped[d] = raw != pos || !raw.is_finite();
        let pos = if pos.is_finite() { pos } else { 0.0 };
        let c = (pos.floor() as usize).min(res - 1);
        cell[d] = c as u32;
        frac[d] = pos - c as f64;
    }
    (cell, frac, clamped)
}

#[inline]
fn corner_weight(frac: &[f64; 3], corner: usize) -> f64 {
    let mut w = 1.0;
    for (d, f) in frac.iter().enumerate() {
        w *= if corner >> d & 1 == 1 { *f } else { 1.0 - f };
    }
    w
}

#[inline]
fn corner_cell(cell: &[u32; 3], corner: usize) -> [u32; 3] {
    [
        cell[0] + (corner & 1) as u32,
        cell[1] + (corner >> 1 & 1) as u32,
        cell[2] + (corner >> 2 & 1) as u32,
    ]
}

/// Trilinear hash encoding of a tangent-space point. `out` receives
/// `levels × features` values, level-major.
pub fn encode_into(config: &HashConfig, resolutions: &[usize], extent: f64, table: &[f64], q: &Vec3, out: &mut [f64]) {
    let (t, f) = (config.table_size, config.features);
    for (l, &res) in resolutions.iter().enumerate() {
        let (cell, frac, _) = grid_coords(q, extent, res);
        let level = &table[l * t * f..(l + 1) * t * f];
        let dst = &mut out[l * f..(l + 1) * f];
        dst.iter_mut().for_each(|v| *v = 0.0);
        for corner in 0..8 {
            let w = corner_weight(&frac, corner);
            let idx = hash_index(corner_cell(&cell, corner), t);
            for (o, &e) in dst.iter_mut().zip(&level[idx * f..(idx + 1) * f]) {
                *o += w * e;
            }
        }
    }
}

/// Reverse pass of [`encode_into`]. Accumulates `∂L/∂entry` into `table_grad`
/// (scaled by `scale`) and returns `∂L/∂q`. Colliding corners accumulate.
pub fn encode_backward(
    config: &HashConfig,
    resolutions: &[usize],
    extent: f64,
    table: &[f64],
    q: &Vec3,
    upstream: &[f64],
    scale: f64,
    table_grad: Option<&mut [f64]>,
) -> Vec3 {
    let (t, f) = (config.table_size, config.features);
    let mut dq = Vec3::zeros();
    let mut table_grad = table_grad;
    for (l, &res) in resolutions.iter().enumerate() {
        let (cell, frac, clamped) = grid_coords(q, extent, res);
        let g = &upstream[l * f..(l + 1) * f];
        let level = &table[l * t * f..(l + 1) * t * f];
        let dpos = 0.5 * res as f64 / extent;
        for corner in 0..8 {
            let idx = hash_index(corner_cell(&cell, corner), t);
            let entry = &level[idx * f..(idx + 1) * f];
            let w = corner_weight(&frac, corner);
            if let Some(tg) = table_grad.as_deref_mut() {
                let dst = &mut tg[l * t * f + idx * f..l * t * f + (idx + 1) * f];
                for (d, gv) in dst.iter_mut().zip(g) {
                    *d += scale * w * gv;
                }
            }
            let ge: f64 = entry.iter().zip(g).map(|(e, gv)| e * gv).sum();
            if ge == 0.0 {
                continue;
            }
            for d in 0..3 {
                if clamped[d] {
                    continue;
                }
                let mut dw = if corner >> d & 1 == 1 { 1.0 } else { -1.0 };
                for (o, fo) in frac.iter().enumerate() {
                    if o != d {
                        dw *= if corner >> o & 1 == 1 { *fo } else { 1.0 - fo };
                    }
                }
                dq[d] += scale * ge * dw * dpos;
            }
        }
    }
    dq
}

/// All hash tables of all anchors.
///
/// Storage layout: anchor, blendshape, level, entry, feature; the same order
/// used by the checkpoint format.
#[derive(Clone, Debug, PartialEq)]
pub struct VertexHashBlendshapes {
    pub config: HashConfig,
    pub blendshapes: usize,
    /// Per-anchor half-extent ρ.
    pub extents: Vec<f64>,
    pub data: Vec<f64>,
}

impl VertexHashBlendshapes {
    pub fn zeros(config: HashConfig, blendshapes: usize, extents: Vec<f64>) -> Self {
        let len = extents.len() * blendshapes * config.table_len();
        Self {
            config,
            blendshapes,
            extents,
            data: vec![0.0; len],
        }
    }

    pub fn random(config: HashConfig, blendshapes: usize, extents: Vec<f64>, scale: f64, rng: &mut impl Rng) -> Self {
        let mut out = Self::zeros(config, blendshapes, extents);
        out.data.iter_mut().for_each(|v| *v = rng.random_range(-scale..scale));
        out
    }

    pub fn anchors(&self) -> usize {
        self.extents.len()
    }

    pub fn table(&self, anchor: usize, m: usize) -> &[f64] {
        let n = self.config.table_len();
        let start = (anchor * self.blendshapes + m) * n;
        &self.data[start..start + n]
    }

    pub fn table_mut(&mut self, anchor: usize, m: usize) -> &mut [f64] {
        let n = self.config.table_len();
        let start = (anchor * self.blendshapes + m) * n;
        &mut self.data[start..start + n]
    }

    pub fn to_table(&self, anchor: usize, m: usize) -> HashTable {
        HashTable {
            config: self.config,
            extent: self.extents[anchor],
            data: self.table(anchor, m).to_vec(),
        }
    }

    /// Merge every anchor's tables with its row of `weights` (`anchors × M`).
    pub fn merge_all(&self, weights: &[f64]) -> Result<MergedTables> {
        let (a, m, n) = (self.anchors(), self.blendshapes, self.config.table_len());
        if weights.len() != a * m {
            return invalid(format!("expected {} merge weights, got {}", a * m, weights.len()));
        }
        if weights.iter().any(|w| !w.is_finite()) {
            return invalid("non-finite merge weight");
        }
        let mut data = vec![0.0; a * n];
        for (anchor, out) in data.chunks_mut(n).enumerate() {
            let block = &self.data[anchor * m * n..(anchor + 1) * m * n];
            let tables: Vec<&[f64]> = block.chunks(n).collect();
            merge_into(&tables, &weights[anchor * m..(anchor + 1) * m], out);
        }
        Ok(MergedTables {
            config: self.config,
            resolutions: self.config.resolutions(),
            extents: self.extents.clone(),
            data,
        })
    }

    /// Chain rule through the merge. `merged_grad` is `anchors × table_len`.
    /// Accumulates table gradients into `table_grad` (same layout as `data`)
    /// and returns weight gradients (`anchors × M`).
    pub fn merge_backward(&self, weights: &[f64], merged_grad: &[f64], table_grad: &mut [f64]) -> Vec<f64> {
        let (a, m, n) = (self.anchors(), self.blendshapes, self.config.table_len());
        let mut wgrad = vec![0.0; a * m];
        for anchor in 0..a {
            let g = &merged_grad[anchor * n..(anchor + 1) * n];
            if g.iter().all(|&v| v == 0.0) {
                continue;
            }
            for b in 0..m {
                let off = (anchor * m + b) * n;
                let w = weights[anchor * m + b];
                let table = &self.data[off..off + n];
                let mut dot = 0.0;
                for ((tg, &gv), &h) in table_grad[off..off + n].iter_mut().zip(g).zip(table) {
                    *tg += w * gv;
                    dot += gv * h;
                }
                wgrad[anchor * m + b] = dot;
            }
        }
        wgrad
    }
}

/// Merged table per anchor for one expression.
#[derive(Clone, Debug)]
pub struct MergedTables {
    pub config: HashConfig,
    pub resolutions: Vec<usize>,
    pub extents: Vec<f64>,
    pub data: Vec<f64>,
}

impl MergedTables {
    pub fn table(&self, anchor: usize) -> &[f64] {
        let n = self.config.table_len();
        &self.data[anchor * n..(anchor + 1) * n]
    }

    pub fn encode(&self, anchor: usize, q: &Vec3, out: &mut [f64]) {
        encode_into(&self.config, &self.resolutions, self.extents[anchor], self.table(anchor), q, out);
    }

    pub fn encode_backward(&self, anchor: usize, q: &Vec3, upstream: &[f64], scale: f64, grad: Option<&mut [f64]>) -> Vec3 {
        let n = self.config.table_len();
        let grad = grad.map(|g| &mut g[anchor * n..(anchor + 1) * n]);
        encode_backward(&self.config, &self.resolutions, self.extents[anchor], self.table(anchor), q, upstream, scale, grad)
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::Rng;
    use proptest::prelude::*;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    fn cfg() -> HashConfig {
        HashConfig::default()
    }

    #[test]
    fn default_resolutions_are_32_and_64() {
        assert_eq!(cfg().resolutions(), vec![32, 64]);
        assert_eq!(cfg().embedding_dim(), 8);
        assert_eq!(cfg().table_len(), 2 * 256 * 4);
    }

    #[test]
    fn hash_index_examples() {
        assert_eq!(hash_index([0, 0, 0], 256), 0);
        assert_eq!(hash_index([1, 0, 0], 256), 1);
        let oracle = ((1u64 ^ 2_654_435_761u64 ^ 805_459_861u64) & 0xffff_ffff) % 256;
        assert_eq!(hash_index([1, 1, 1], 256) as u64, oracle);
        // wrapping product matches 64-bit arithmetic truncated to 32 bits
        let c = [70_000u32, 123_456, 9];
        let wide = (70_000u64 ^ ((123_456u64 * 2_654_435_761) & 0xffff_ffff) ^ (9u64 * 805_459_861)) & 0xffff_ffff;
        assert_eq!(hash_index(c, 1 << 19) as u64, wide % (1 << 19));
    }

    #[test]
    fn merge_examples() {
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        let tables: Vec<HashTable> = (0..5).map(|_| HashTable::random(cfg(), 1.0, 1.0, &mut rng)).collect();
        let one_hot = merge_tables(&tables, &[0.0, 0.0, 1.0, 0.0, 0.0]).unwrap();
        assert_eq!(one_hot.data, tables[2].data);
        let zero = merge_tables(&tables, &[0.0; 5]).unwrap();
        assert!(zero.data.iter().all(|&v| v == 0.0));
        let w = [0.2, 0.3, 0.1, 0.25, 0.15];
        let merged = merge_tables(&tables, &w).unwrap();
        for i in 0..merged.data.len() {
            let mut s = 0.0;
            for m in 0..5 {
                s += w[m] * tables[m].data[i];
            }
            assert_eq!(merged.data[i].to_bits(), s.to_bits());
        }
        let other = HashTable::zeros(HashConfig { features: 2, ..cfg() }, 1.0);
        assert!(merge_tables(&[tables[0].clone(), other], &[1.0, 1.0]).is_err());
        assert!(merge_tables(&tables, &[f64::NAN, 0.0, 0.0, 0.0, 0.0]).is_err());
    }

    #[test]
    fn constant_table_encodes_constant() {
        let mut t = HashTable::zeros(cfg(), 0.3);
        t.data.iter_mut().for_each(|v| *v = 0.7);
        for q in [Vec3::new(0.01, -0.2, 0.1), Vec3::new(5.0, 5.0, -5.0)] {
            assert!(t.encode(&q).iter().all(|&v| (v - 0.7).abs() < 1e-12));
        }
    }

    #[test]
    fn grid_corner_returns_entry() {
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let t = HashTable::random(cfg(), 1.0, 1.0, &mut rng);
        // cell (40, 20, 33) at the finest level 64, coarse level 32 sees (20, 10, 16.5)
        let q = Vec3::new(40.0 / 32.0 - 1.0, 20.0 / 32.0 - 1.0, 33.0 / 32.0 - 1.0);
        let e = t.encode(&q);
        let idx = hash_index([40, 20, 33], 256);
        let fine = &t.data[256 * 4 + idx * 4..256 * 4 + idx * 4 + 4];
        for f in 0..4 {
            assert!((e[4 + f] - fine[f]).abs() < 1e-14);
        }
    }

    fn oracle_encode(t: &HashTable, q: &Vec3) -> Vec<f64> {
        let mut out = Vec::new();
        for (l, res) in [32usize, 64].into_iter().enumerate() {
            let p: Vec<f64> = (0..3)
                .map(|d| ((q[d] / t.extent + 1.0) / 2.0 * res as f64).clamp(0.0, res as f64))
                .collect();
            let base: Vec<u32> = p.iter().map(|&v| (v.floor() as u32).min(res as u32 - 1)).collect();
            let fr: Vec<f64> = (0..3).map(|d| p[d] - base[d] as f64).collect();
            let mut acc = [0.0; 4];
            for dx in 0..2u32 {
                for dy in 0..2u32 {
                    for dz in 0..2u32 {
                        let w = (if dx == 1 { fr[0] } else { 1.0 - fr[0] })
                            * (if dy == 1 { fr[1] } else { 1.0 - fr[1] })
                            * (if dz == 1 { fr[2] } else { 1.0 - fr[2] });
                        let (x, y, z) = ((base[0] + dx) as u64, (base[1] + dy) as u64, (base[2] + dz) as u64);
                        let h = (x ^ ((y * 2_654_435_761) & 0xffff_ffff) ^ ((z * 805_459_861) & 0xffff_ffff)) % 256;
                        for f in 0..4 {
                            acc[f] += w * t.data[l * 1024 + h as usize * 4 + f];
                        }
                    }
                }
            }
            out.extend(acc);
        }
        out
    }

    #[test]
    fn encode_matches_trilinear_oracle() {
        let mut rng = ChaCha8Rng::seed_from_u64(9);
        let rho = 0.37;
        let t = HashTable::random(cfg(), rho, 1.0, &mut rng);
        for q in [Vec3::new(0.1, -0.2, 0.05) * rho, Vec3::new(-0.93, 0.41, 0.77) * rho, Vec3::new(2.0, 0.0, -3.0)] {
            let a = t.encode(&q);
            let b = oracle_encode(&t, &q);
            for (x, y) in a.iter().zip(&b) {
                assert!((x - y).abs() < 1e-12);
            }
        }
    }

    fn weighted_loss(t: &HashTable, q: &Vec3, g: &[f64]) -> f64 {
        t.encode(q).iter().zip(g).map(|(a, b)| a * b).sum()
    }

    #[test]
    fn encode_gradients_match_finite_differences() {
        let mut rng = ChaCha8Rng::seed_from_u64(12);
        let t = HashTable::random(cfg(), 0.5, 1.0, &mut rng);
        let g: Vec<f64> = (0..8).map(|_| rng.random_range(-1.0..1.0)).collect();
        let res = t.config.resolutions();
        let zero = vec![0.0; 8];
        let mut tg = vec![0.0; t.data.len()];
        let dq0 = encode_backward(&t.config, &res, t.extent, &t.data, &Vec3::new(0.1, 0.2, 0.3), &zero, 1.0, Some(&mut tg));
        assert_eq!(dq0, Vec3::zeros());
        assert!(tg.iter().all(|&v| v == 0.0));
        for trial in 0..20 {
            let q = Vec3::new(rng.random_range(-0.45..0.45), rng.random_range(-0.45..0.45), rng.random_range(-0.45..0.45));
            let mut tg = vec![0.0; t.data.len()];
            let dq = encode_backward(&t.config, &res, t.extent, &t.data, &q, &g, 1.0, Some(&mut tg));
            let h = 1e-7;
            for d in 0..3 {
                let mut qp = q;
                qp[d] += h;
                let mut qm = q;
                qm[d] -= h;
                let fd = (weighted_loss(&t, &qp, &g) - weighted_loss(&t, &qm, &g)) / (2.0 * h);
                assert!((fd - dq[d]).abs() <= 1e-5 * fd.abs().max(1.0), "trial {trial} dim {d}: {fd} vs {}", dq[d]);
            }
            // the loss is linear in entries, so a unit perturbation is exact
            for &i in tg.iter().enumerate().filter(|(_, v)| **v != 0.0).map(|(i, _)| i).collect::<Vec<_>>().iter().take(4) {
                let mut tp = t.clone();
                tp.data[i] += 1.0;
                let fd = weighted_loss(&tp, &q, &g) - weighted_loss(&t, &q, &g);
                assert!((fd - tg[i]).abs() <= 1e-5 * fd.abs().max(1e-3));
            }
        }
    }

    #[test]
    fn corner_query_puts_unit_gradient_on_hashed_entry() {
        let t = HashTable::zeros(cfg(), 1.0);
        let q = Vec3::new(40.0 / 32.0 - 1.0, 20.0 / 32.0 - 1.0, 33.0 / 32.0 - 1.0);
        let mut up = vec![0.0; 8];
        up[4] = 1.0;
        let mut tg = vec![0.0; t.data.len()];
        encode_backward(&t.config, &t.config.resolutions(), 1.0, &t.data, &q, &up, 1.0, Some(&mut tg));
        let idx = hash_index([40, 20, 33], 256);
        let fine = &tg[1024..];
        for e in 0..256 {
            let expected = if e == idx { 1.0 } else { 0.0 };
            assert!((fine[e * 4] - expected).abs() < 1e-14);
        }
    }

    #[test]
    fn colliding_cells_accumulate_gradients() {
        // T = 1 forces every corner onto the same entry
        let config = HashConfig { levels: 1, table_size: 1, features: 1, coarsest: 4, finest: 4 };
        let t = HashTable::zeros(config, 1.0);
        let mut tg = vec![0.0; 1];
        encode_backward(&config, &[4], 1.0, &t.data, &Vec3::new(0.13, -0.4, 0.2), &[1.0], 1.0, Some(&mut tg));
        assert!((tg[0] - 1.0).abs() < 1e-14);
        encode_backward(&config, &[4], 1.0, &t.data, &Vec3::new(-0.7, 0.3, 0.9), &[2.0], 1.0, Some(&mut tg));
        assert!((tg[0] - 3.0).abs() < 1e-14);
    }

    #[test]
    fn out_of_domain_queries_clamp_with_zero_gradient() {
        let mut rng = ChaCha8Rng::seed_from_u64(2);
        let t = HashTable::random(cfg(), 0.5, 1.0, &mut rng);
        let a = t.encode(&Vec3::new(3.0, 0.1, 0.1));
        let b = t.encode(&Vec3::new(0.5, 0.1, 0.1));
        assert_eq!(a, b);
        let g = vec![1.0; 8];
        let dq = encode_backward(&t.config, &t.config.resolutions(), 0.5, &t.data, &Vec3::new(3.0, 0.1, 0.1), &g, 1.0, None);
        assert_eq!(dq[0], 0.0);
    }

    #[test]
    fn merge_all_and_backward() {
        let mut rng = ChaCha8Rng::seed_from_u64(4);
        let blend = VertexHashBlendshapes::random(cfg(), 3, vec![0.2, 0.3], 1.0, &mut rng);
        let weights: Vec<f64> = (0..6).map(|_| rng.random_range(-1.0..1.0)).collect();
        let merged = blend.merge_all(&weights).unwrap();
        let direct = merge_tables(&[blend.to_table(1, 0), blend.to_table(1, 1), blend.to_table(1, 2)], &weights[3..]).unwrap();
        assert_eq!(merged.table(1), direct.data.as_slice());
        let mg: Vec<f64> = (0..merged.data.len()).map(|_| rng.random_range(-1.0..1.0)).collect();
        let mut tg = vec![0.0; blend.data.len()];
        let wg = blend.merge_backward(&weights, &mg, &mut tg);
        // loss = <mg, merged> is bilinear: dL/dw = <mg_anchor, H>, dL/dH = w mg
        let n = cfg().table_len();
        let dot: f64 = blend.table(0, 2).iter().zip(&mg[..n]).map(|(a, b)| a * b).sum();
        assert!((wg[2] - dot).abs() < 1e-10);
        assert!((tg[(3 + 1) * n + 7] - weights[4] * mg[n + 7]).abs() < 1e-14);
        assert!(blend.merge_all(&weights[..5]).is_err());
    }

    proptest! {
        #![proptest_config(ProptestConfig::with_cases(64))]

        #[test]
        fn encode_is_linear_in_merge_weights(
            seed in 0u64..10_000,
            w in proptest::collection::vec(-2.0f64..2.0, 5),
            q in proptest::array::uniform3(-0.6f64..0.6),
        ) {
            let mut rng = ChaCha8Rng::seed_from_u64(seed);
            let tables: Vec<HashTable> = (0..5).map(|_| HashTable::random(cfg(), 0.5, 1.0, &mut rng)).collect();
            let q = Vec3::from(q);
            let merged = merge_tables(&tables, &w).unwrap().encode(&q);
            let mut sum = vec![0.0; 8];
            for (t, wm) in tables.iter().zip(&w) {
                for (s, e) in sum.iter_mut().zip(t.encode(&q)) {
                    *s += wm * e;
                }
            }
            for (a, b) in merged.iter().zip(&sum) {
                prop_assert!((a - b).abs() < 1e-10);
            }
        }

        #[test]
        fn encode_is_deterministic_and_lipschitz(seed in 0u64..1000, q in proptest::array::uniform3(-0.4f64..0.4), dir in proptest::array::uniform3(-1.0f64..1.0)) {
            let mut rng = ChaCha8Rng::seed_from_u64(seed);
            let t = HashTable::random(cfg(), 0.5, 1.0, &mut rng);
            let q = Vec3::from(q);
            let a = t.encode(&q);
            prop_assert_eq!(&a, &t.encode(&q));
            let delta = Vec3::from(dir) * 1e-3;
            let b = t.encode(&(q + delta));
            // per level, slope ≤ 2·max|entry|·N/(2ρ) per unit displacement along each axis
            let max_entry = t.data.iter().fold(0.0f64, |m, v| m.max(v.abs()));
            let bound = 2.0 * max_entry * 64.0 / 1.0 * (delta.abs().sum());
            for (x, y) in a.iter().zip(&b) {
                prop_assert!((x - y).abs() <= bound + 1e-12);
            }
        }
    }
}
