//! Exact and hierarchical k-nearest-neighbour search against a deforming
//! anchor set.
//!
//! The anchors move every frame, so no acceleration structure is prebuilt.
//! The hierarchical search buckets the query points into a uniform voxel grid
//! over their bounding box, finds `K'` candidate anchors per occupied voxel
//! centre, and then resolves each query's `K` neighbours among its voxel's
//! candidates only.

use std::time::Instant;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;

use crate::error::{invalid, Error, Result};
use crate::param_mesh::{make_synthetic_model, with_anchor_count, DeformedMesh, ExpressionInput};
use crate::Vec3;

pub const DEFAULT_GRID_RES: usize = 64;
pub const DEFAULT_CANDIDATES: usize = 12;
pub const DEFAULT_K: usize = 3;

/// Neighbours per query, sorted by ascending distance (ties: lower index).
#[derive(Clone, Debug, PartialEq)]
pub struct KnnResult {
    pub k: usize,
    pub indices: Vec<u32>,
    pub distances: Vec<f64>,
}

impl KnnResult {
    pub fn len(&self) -> usize {
        if self.k == 0 {
            0
        } else {
            self.indices.len() / self.k
        }
    }

    pub fn is_empty(&self) -> bool {
        self.indices.is_empty()
    }

    pub fn neighbors(&self, query: usize) -> &[u32] {
        &self.indices[query * self.k..(query + 1) * self.k]
    }

    pub fn neighbor_distances(&self, query: usize) -> &[f64] {
        &self.distances[query * self.k..(query + 1) * self.k]
    }

    pub fn nearest(&self, query: usize) -> u32 {
        self.indices[query * self.k]
    }

    /// Fraction of reference neighbour pairs also present in `self`.
    pub fn recall_against(&self, reference: &KnnResult) -> f64 {
        let n = reference.len();
        if n == 0 {
            return 1.0;
        }
        let mut hits = 0usize;
        for q in 0..n {
            let mine = self.neighbors(q);
            hits += reference.neighbors(q).iter().filter(|i| mine.contains(i)).count();
        }
        hits as f64 / (n * reference.k) as f64
    }
}

/// Small sorted top-k buffer keyed by `(squared distance, index)`.
struct TopK {
    k: usize,
    items: Vec<(f64, u32)>,
}

impl TopK {
    fn new(k: usize) -> Self {
        Self {
            k,
            items: Vec::with_capacity(k + 1),
        }
    }

    #[inline]
    fn push(&mut self, d2: f64, idx: u32) {
        if self.items.len() == self.k {
            let worst = self.items[self.k - 1];
            if d2 > worst.0 || (d2 == worst.0 && idx > worst.1) {
                return;
            }
        }
        let pos = self
            .items
            .iter()
            .position(|&(d, i)| d2 < d || (d2 == d && idx < i))
            .unwrap_or(self.items.len());
        self.items.insert(pos, (d2, idx));
        self.items.truncate(self.k);
    }
}

/// Indices of the `k` anchors nearest `p`, ordered like `TopK`. Large `k`
/// uses selection plus a sort, since insertion is quadratic in `k`.
fn nearest_sorted(p: &Vec3, anchors: &[Vec3], k: usize) -> Vec<u32> {
    if k <= 32 {
        let mut top = TopK::new(k);
        for (a, x) in anchors.iter().enumerate() {
            top.push((p - x).norm_squared(), a as u32);
        }
        return top.items.iter().map(|&(_, i)| i).collect();
    }
    let mut all: Vec<(f64, u32)> = anchors.iter().enumerate().map(|(a, x)| ((p - x).norm_squared(), a as u32)).collect();
    let order = |a: &(f64, u32), b: &(f64, u32)| a.0.total_cmp(&b.0).then(a.1.cmp(&b.1));
    if k < all.len() {
        all.select_nth_unstable_by(k - 1, order);
        all.truncate(k);
    }
    all.sort_unstable_by(order);
    all.into_iter().map(|(_, i)| i).collect()
}

fn check_inputs(anchors: &[Vec3], k: usize) -> Result<()> {
    if anchors.is_empty() {
        return invalid("k-NN needs at least one anchor");
    }
    if k == 0 || k > anchors.len() {
        return invalid(format!("K = {k} must be in 1..={}", anchors.len()));
    }
    Ok(())
}

fn write_result(top: &TopK, idx: &mut [u32], dist: &mut [f64]) {
    for ((i, d), &(d2, a)) in idx.iter_mut().zip(dist.iter_mut()).zip(&top.items) {
        *i = a;
        *d = d2.sqrt();
    }
}

/// Exact euclidean k-NN by exhaustive scan.
pub fn brute_force_knn(queries: &[Vec3], anchors: &[Vec3], k: usize) -> Result<KnnResult> {
    check_inputs(anchors, k)?;
    let mut indices = vec![0u32; queries.len() * k];
    let mut distances = vec![0.0; queries.len() * k];
    indices
        .par_chunks_mut(k)
        .zip(distances.par_chunks_mut(k))
        .zip(queries.par_iter())
        .for_each(|((idx, dist), q)| {
            let mut top = TopK::new(k);
            for (a, p) in anchors.iter().enumerate() {
                top.push((q - p).norm_squared(), a as u32);
            }
            write_result(&top, idx, dist);
        });
    Ok(KnnResult { k, indices, distances })
}

#[derive(Clone, Debug, PartialEq)]
pub struct Cluster {
    pub voxel: [u32; 3],
    pub queries: Vec<u32>,
    /// `K'` nearest anchors of the voxel centre, sorted by distance.
    pub candidates: Vec<u32>,
}

/// Query points bucketed into a uniform grid over their bounding box.
#[derive(Clone, Debug, PartialEq)]
pub struct VoxelClusters {
    pub resolution: usize,
    pub bbox_min: Vec3,
    pub voxel_size: Vec3,
    pub clusters: Vec<Cluster>,
    /// Cluster index of every query.
    pub cluster_of: Vec<u32>,
}

impl VoxelClusters {
    pub fn voxel_center(&self, voxel: [u32; 3]) -> Vec3 {
        Vec3::new(
            self.bbox_min.x + (voxel[0] as f64 + 0.5) * self.voxel_size.x,
            self.bbox_min.y + (voxel[1] as f64 + 0.5) * self.voxel_size.y,
            self.bbox_min.z + (voxel[2] as f64 + 0.5) * self.voxel_size.z,
        )
    }

    /// Voxel containing `q` under half-open `[lo, hi)` cells; the top face of
    /// the box belongs to the last cell.
    pub fn voxel_of(&self, q: &Vec3) -> [u32; 3] {
        voxel_index(q, &self.bbox_min, &self.voxel_size, self.resolution)
    }
}

fn voxel_index(q: &Vec3, min: &Vec3, size: &Vec3, res: usize) -> [u32; 3] {
    let mut v = [0u32; 3];
    for d in 0..3 {
        let f = ((q[d] - min[d]) / size[d]).floor();
        v[d] = (f.max(0.0) as usize).min(res - 1) as u32;
    }
    v
}

/// Group queries by voxel and compute per-voxel candidate lists.
pub fn build_clusters(queries: &[Vec3], anchors: &[Vec3], resolution: usize, candidates: usize) -> Result<VoxelClusters> {
    check_inputs(anchors, candidates)?;
    if resolution == 0 {
        return invalid("grid resolution must be positive");
    }
    let mut lo = Vec3::repeat(f64::INFINITY);
    let mut hi = Vec3::repeat(f64::NEG_INFINITY);
    for q in queries {
        if !q.iter().all(|v| v.is_finite()) {
            return invalid("non-finite query point");
        }
        lo = lo.inf(q);
        hi = hi.sup(q);
    }
    if queries.is_empty() {
        lo = Vec3::zeros();
        hi = Vec3::zeros();
    }
    let mut size = (hi - lo) / resolution as f64;
    for d in 0..3 {
        if size[d] <= 0.0 {
            size[d] = 1e-9_f64.max(lo[d].abs() * 1e-12);
        }
    }
    let res = resolution;
    let mut keyed: Vec<(u64, u32)> = queries
        .iter()
        .enumerate()
        .map(|(i, q)| {
            let v = voxel_index(q, &lo, &size, res);
            let key = (v[2] as u64 * res as u64 + v[1] as u64) * res as u64 + v[0] as u64;
            (key, i as u32)
        })
        .collect();
    keyed.sort_unstable();

    let mut clusters: Vec<Cluster> = Vec::new();
    let mut cluster_of = vec![0u32; queries.len()];
    let mut last_key = None;
    for (key, qi) in keyed {
        if last_key != Some(key) {
            let x = (key % res as u64) as u32;
            let y = (key / res as u64 % res as u64) as u32;
            let z = (key / (res as u64 * res as u64)) as u32;
            clusters.push(Cluster {
                voxel: [x, y, z],
                queries: Vec::new(),
                candidates: Vec::new(),
            });
            last_key = Some(key);
        }
        cluster_of[qi as usize] = (clusters.len() - 1) as u32;
        clusters.last_mut().unwrap().queries.push(qi);
    }
    let mut out = VoxelClusters {
        resolution,
        bbox_min: lo,
        voxel_size: size,
        clusters,
        cluster_of,
    };
    let centers: Vec<Vec3> = out.clusters.iter().map(|c| out.voxel_center(c.voxel)).collect();
    out.clusters.par_iter_mut().zip(centers.par_iter()).for_each(|(cluster, center)| {
        cluster.candidates = nearest_sorted(center, anchors, candidates);
    });
    Ok(out)
}

/// Two-level k-NN: voxel-centre candidates first, then per-query refinement.
pub fn hierarchical_knn(queries: &[Vec3], anchors: &[Vec3], resolution: usize, candidates: usize, k: usize) -> Result<KnnResult> {
    if k > candidates {
        return invalid(format!("K = {k} exceeds K' = {candidates}"));
    }
    let clusters = build_clusters(queries, anchors, resolution, candidates)?;
    Ok(knn_from_clusters(queries, anchors, &clusters, k))
}

/// Per-query K-NN restricted to each query's cluster candidates.
pub fn knn_from_clusters(queries: &[Vec3], anchors: &[Vec3], clusters: &VoxelClusters, k: usize) -> KnnResult {
    let mut indices = vec![0u32; queries.len() * k];
    let mut distances = vec![0.0; queries.len() * k];
    indices
        .par_chunks_mut(k)
        .zip(distances.par_chunks_mut(k))
        .enumerate()
        .for_each(|(qi, (idx, dist))| {
            let q = &queries[qi];
            let cluster = &clusters.clusters[clusters.cluster_of[qi] as usize];
            let mut top = TopK::new(k);
            for &a in &cluster.candidates {
                top.push((q - anchors[a as usize]).norm_squared(), a);
            }
            write_result(&top, idx, dist);
        });
    KnnResult { k, indices, distances }
}

/// How neighbours are found during rendering and training.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum KnnMode {
    Exact,
    Hierarchical { resolution: usize, candidates: usize },
}

impl Default for KnnMode {
    fn default() -> Self {
        KnnMode::Hierarchical {
            resolution: DEFAULT_GRID_RES,
            candidates: DEFAULT_CANDIDATES,
        }
    }
}

impl std::fmt::Display for KnnMode {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        match self {
            KnnMode::Exact => write!(f, "exact"),
            KnnMode::Hierarchical { resolution, candidates } => write!(f, "hierarchical:{resolution}:{candidates}"),
        }
    }
}

impl std::str::FromStr for KnnMode {
    type Err = Error;

    /// `exact`, `hierarchical` or `hierarchical:R:K'`.
    fn from_str(s: &str) -> Result<Self> {
        let parts: Vec<&str> = s.trim().split(':').collect();
        let num = |v: &str| v.parse::<usize>().map_err(|_| Error::InvalidInput(format!("bad k-NN mode `{s}`")));
        match parts.as_slice() {
            ["exact"] => Ok(KnnMode::Exact),
            ["hierarchical"] => Ok(KnnMode::default()),
            ["hierarchical", r, c] => {
                let (resolution, candidates) = (num(r)?, num(c)?);
                if resolution == 0 || candidates == 0 {
                    return invalid(format!("bad k-NN mode `{s}`"));
                }
                Ok(KnnMode::Hierarchical { resolution, candidates })
            }
            _ => invalid(format!("bad k-NN mode `{s}`: expected exact, hierarchical or hierarchical:R:K'")),
        }
    }
}

impl KnnMode {
    pub fn search(&self, queries: &[Vec3], anchors: &[Vec3], k: usize) -> Result<KnnResult> {
        match *self {
            KnnMode::Exact => brute_force_knn(queries, anchors, k),
            KnnMode::Hierarchical { resolution, candidates } => {
                hierarchical_knn(queries, anchors, resolution, candidates.min(anchors.len()), k)
            }
        }
    }
}

/// Random points scattered within `band` of the mesh surface along vertex
/// normals, a stand-in for ray samples near the head.
pub fn surface_proximal_queries(mesh: &DeformedMesh, triangles: &[[u32; 3]], n: usize, band: f64, seed: u64) -> Vec<Vec3> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    (0..n)
        .map(|_| {
            let t = triangles[rng.random_range(0..triangles.len())];
            let (mut a, mut b) = (rng.random::<f64>(), rng.random::<f64>());
            if a + b > 1.0 {
                a = 1.0 - a;
                b = 1.0 - b;
            }
            let w = [1.0 - a - b, a, b];
            let mut p = Vec3::zeros();
            let mut nrm = Vec3::zeros();
            for (k, &vi) in t.iter().enumerate() {
                p += mesh.positions[vi as usize] * w[k];
                nrm += mesh.frames[vi as usize].axes.column(2) * w[k];
            }
            let nrm = nrm.try_normalize(1e-12).unwrap_or_else(Vec3::z);
            p + nrm * rng.random_range(-band..band)
        })
        .collect()
}

/// Surface-proximal queries and the anchors of a neutral synthetic head
/// with `vertices` vertices and `anchors` anchors.
pub fn bench_scene(vertices: usize, anchors: usize, queries: usize, seed: u64) -> Result<(Vec<Vec3>, Vec<Vec3>)> {
    let model = with_anchor_count(make_synthetic_model(seed, vertices, 8)?, anchors)?;
    let mesh = model.deform(&ExpressionInput::neutral(&model))?;
    let anchor_pos = model.anchor_indices.iter().map(|&i| mesh.positions[i]).collect();
    let q = surface_proximal_queries(&mesh, &model.triangles, queries, 0.05 * model.radius, seed ^ 0x9e37);
    Ok((q, anchor_pos))
}

#[derive(Clone, Debug, PartialEq)]
pub struct KnnBenchRow {
    pub method: &'static str,
    pub n: usize,
    pub j: usize,
    pub k: usize,
    pub k_prime: usize,
    pub resolution: usize,
    pub median_ms: f64,
    pub speedup: Option<f64>,
}

#[derive(Clone, Debug, PartialEq)]
pub struct KnnBenchReport {
    pub rows: Vec<KnnBenchRow>,
    pub recall: f64,
}

pub const KNN_BENCH_HEADER: &str = "method,N,J,K,Kprime,R,median_ms,speedup";

impl KnnBenchReport {
    pub fn speedup(&self) -> Option<f64> {
        self.rows.iter().find_map(|r| r.speedup)
    }

    pub fn to_csv(&self) -> String {
        let mut s = String::from(KNN_BENCH_HEADER);
        s.push('\n');
        for r in &self.rows {
            let speedup = r.speedup.map_or_else(|| "n/a".to_string(), |v| format!("{v:.4}"));
            s.push_str(&format!(
                "{},{},{},{},{},{},{:.4},{}\n",
                r.method, r.n, r.j, r.k, r.k_prime, r.resolution, r.median_ms, speedup
            ));
        }
        s
    }
}

pub fn median(values: &mut [f64]) -> f64 {
    if values.is_empty() {
        return 0.0;
    }
    values.sort_by(|a, b| a.partial_cmp(b).unwrap());
    let n = values.len();
    if n % 2 == 1 {
        values[n / 2]
    } else {
        0.5 * (values[n / 2 - 1] + values[n / 2])
    }
}

/// Time brute force against hierarchical search on the same queries.
pub fn bench_knn(queries: &[Vec3], anchors: &[Vec3], k: usize, candidates: usize, resolution: usize, repeats: usize) -> Result<KnnBenchReport> {
    check_inputs(anchors, candidates.max(k))?;
    let repeats = repeats.max(1);
    if queries.is_empty() {
        let row = |method| KnnBenchRow {
            method,
            n: 0,
            j: anchors.len(),
            k,
            k_prime: candidates,
            resolution,
            median_ms: 0.0,
            speedup: None,
        };
        return Ok(KnnBenchReport {
            rows: vec![row("brute_force"), row("hierarchical")],
            recall: 1.0,
        });
    }
    let mut brute_ms = Vec::with_capacity(repeats);
    let mut hier_ms = Vec::with_capacity(repeats);
    let mut brute = None;
    let mut hier = None;
    for _ in 0..repeats {
        let t = Instant::now();
        brute = Some(brute_force_knn(queries, anchors, k)?);
        brute_ms.push(t.elapsed().as_secs_f64() * 1e3);
        let t = Instant::now();
        hier = Some(hierarchical_knn(queries, anchors, resolution, candidates, k)?);
        hier_ms.push(t.elapsed().as_secs_f64() * 1e3);
    }
    let b = median(&mut brute_ms);
    let h = median(&mut hier_ms);
    let recall = hier.unwrap().recall_against(&brute.unwrap());
    let base = KnnBenchRow {
        method: "brute_force",
        n: queries.len(),
        j: anchors.len(),
        k,
        k_prime: candidates,
        resolution,
        median_ms: b,
        speedup: None,
    };
    let speedup = if h > 0.0 { Some(b / h) } else { None };
    let hier_row = KnnBenchRow {
        method: "hierarchical",
        median_ms: h,
        speedup,
        ..base.clone()
    };
    Ok(KnnBenchReport {
        rows: vec![base, hier_row],
        recall,
    })
}
