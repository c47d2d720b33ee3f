//! Decoding merged per-vertex hash tables into colour and density, plus the
//! per-frame rigid warp used during training.
//!
//! A query point is expressed in the tangent frames of its `K` nearest
//! anchors. Their hash embeddings are blended with normalised inverse
//! distance weights and fed, together with the nearest anchor's feature and
//! positional encodings of the local point and view direction, to a small MLP.

use ndarray::{s, Array2, ArrayView2};
use rand::Rng;

use crate::autodiff::{rigid_warp, Dual3, Tape};
use crate::error::{invalid, Result};
use crate::hash_blendshapes::{HashConfig, MergedTables};
use crate::knn_search::KnnResult;
use crate::mlp::{Mlp, MlpCache};
use crate::param_mesh::TangentFrame;
use crate::{Mat3, Vec3};

/// Clamp on `‖q_ik‖` before inversion.
pub const DIST_EPS: f64 = 1e-6;

/// Width of `[x, sin(2^b πx), cos(2^b πx)]_b` for `n` inputs.
pub fn pe_dim(n: usize, bands: usize) -> usize {
    n * (1 + 2 * bands)
}

/// Coarse-to-fine window of band `b` at schedule position `alpha`.
pub fn band_window(alpha: f64, band: usize) -> f64 {
    let x = (alpha - band as f64).clamp(0.0, 1.0);
    (1.0 - (std::f64::consts::PI * x).cos()) / 2.0
}

/// Positional encoding. Layout: the raw inputs, then per band the sines of
/// all inputs followed by their cosines.
pub fn positional_encoding(x: &[f64], bands: usize, alpha: Option<f64>, out: &mut [f64]) {
    let n = x.len();
    out[..n].copy_from_slice(x);
    for b in 0..bands {
        let w = alpha.map_or(1.0, |a| band_window(a, b));
        let freq = (1u64 << b) as f64 * std::f64::consts::PI;
        for (i, &v) in x.iter().enumerate() {
            let (sn, cs) = (freq * v).sin_cos();
            out[n + 2 * b * n + i] = w * sn;
            out[n + (2 * b + 1) * n + i] = w * cs;
        }
    }
}

/// `∂PE/∂x_i` contracted with an upstream gradient: returns `Σ_j g_j ∂PE_j/∂x_i`.
pub fn positional_encoding_backward(x: &[f64], bands: usize, alpha: Option<f64>, g: &[f64]) -> Vec<f64> {
    let n = x.len();
    let mut dx = g[..n].to_vec();
    for b in 0..bands {
        let w = alpha.map_or(1.0, |a| band_window(a, b));
        let freq = (1u64 << b) as f64 * std::f64::consts::PI;
        for (i, &v) in x.iter().enumerate() {
            let (sn, cs) = (freq * v).sin_cos();
            dx[i] += w * freq * (g[n + 2 * b * n + i] * cs - g[n + (2 * b + 1) * n + i] * sn);
        }
    }
    dx
}

pub fn softplus(x: f64) -> f64 {
    if x > 30.0 {
        x
    } else {
        x.exp().ln_1p()
    }
}

pub fn sigmoid(x: f64) -> f64 {
    1.0 / (1.0 + (-x).exp())
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct FieldConfig {
    pub hash: HashConfig,
    pub features: usize,
    pub pos_bands: usize,
    pub dir_bands: usize,
    pub hidden: usize,
    pub hidden_layers: usize,
    pub k: usize,
}

impl Default for FieldConfig {
    fn default() -> Self {
        Self {
            hash: HashConfig::default(),
            features: 24,
            pos_bands: 8,
            dir_bands: 4,
            hidden: 64,
            hidden_layers: 2,
            k: 3,
        }
    }
}

impl FieldConfig {
    pub fn input_dim(&self) -> usize {
        self.hash.embedding_dim() + self.features + pe_dim(3, self.pos_bands) + pe_dim(3, self.dir_bands)
    }

    pub fn layer_sizes(&self) -> Vec<usize> {
        let mut sizes = vec![self.input_dim()];
        sizes.extend(std::iter::repeat_n(self.hidden, self.hidden_layers));
        sizes.push(4);
        sizes
    }
}

/// The decoder MLP: `[D_in, 64, 64, 4]`, σ = softplus(o₀), c = sigmoid(o₁..₃).
#[derive(Clone, Debug, PartialEq)]
pub struct TinyMlp {
    pub config: FieldConfig,
    pub mlp: Mlp,
}

impl TinyMlp {
    pub fn zeros(config: FieldConfig) -> Self {
        Self {
            config,
            mlp: Mlp::zeros(&config.layer_sizes(), false),
        }
    }

    pub fn random(config: FieldConfig, rng: &mut impl Rng) -> Self {
        Self {
            config,
            mlp: Mlp::random(&config.layer_sizes(), false, 1.0, rng),
        }
    }

    /// Set the output biases `(σ, r, g, b)` before activation.
    pub fn set_output_bias(&mut self, bias: [f64; 4]) {
        let (off, n_in, n_out) = self.mlp.layer_offset(self.mlp.layers() - 1);
        self.mlp.params[off + n_in * n_out..off + n_in * n_out + n_out].copy_from_slice(&bias);
    }
}

/// Per-frame state the field decodes: anchor frames, merged tables, features.
#[derive(Clone, Copy, Debug)]
pub struct FieldInputs<'a> {
    /// Anchor frames; `origin` is the deformed anchor position.
    pub frames: &'a [TangentFrame],
    pub merged: &'a MergedTables,
    /// `anchors × features`, row-major.
    pub features: &'a [f64],
}

#[derive(Clone, Debug)]
pub struct FieldOutput {
    pub sigma: Vec<f64>,
    pub color: Vec<[f64; 3]>,
}

/// Intermediate values of a batched field evaluation.
#[derive(Clone, Debug)]
pub struct FieldCache {
    k: usize,
    neighbors: Vec<u32>,
    local: Vec<Vec3>,
    dist: Vec<f64>,
    weights: Vec<f64>,
    embeddings: Vec<f64>,
    /// ρ-normalised, clamped local coordinate of the nearest anchor.
    pe_in: Vec<[f64; 3]>,
    pe_clamped: Vec<[bool; 3]>,
    raw: Array2<f64>,
    mlp: MlpCache,
}

impl FieldCache {
    /// Normalised blend weights, `k` per sample.
    pub fn weights(&self) -> &[f64] {
        &self.weights
    }
}

/// Gradient buffers filled by [`field_backward`].
#[derive(Clone, Debug)]
pub struct FieldGrads {
    pub mlp: Vec<f64>,
    /// `anchors × table_len`, matching [`MergedTables::data`].
    pub merged: Vec<f64>,
    pub features: Vec<f64>,
}

impl FieldGrads {
    pub fn zeros(tiny: &TinyMlp, inputs: &FieldInputs) -> Self {
        Self {
            mlp: vec![0.0; tiny.mlp.params.len()],
            merged: vec![0.0; inputs.merged.data.len()],
            features: vec![0.0; inputs.features.len()],
        }
    }
}

/// Evaluate the field at `points` seen along unit `dirs`.
pub fn field_forward(
    tiny: &TinyMlp,
    inputs: &FieldInputs,
    points: &[Vec3],
    dirs: &[Vec3],
    knn: &KnnResult,
    keep_cache: bool,
) -> Result<(FieldOutput, Option<FieldCache>)> {
    let cfg = &tiny.config;
    let k = knn.k;
    if k == 0 {
        return invalid("field evaluation needs at least one neighbour");
    }
    if knn.len() != points.len() || dirs.len() != points.len() {
        return invalid("points, directions and neighbours must have equal counts");
    }
    let n = points.len();
    let e = cfg.hash.embedding_dim();
    let f = cfg.features;
    let pe_q = pe_dim(3, cfg.pos_bands);
    let mut x = Array2::<f64>::zeros((n, cfg.input_dim()));
    let mut local = vec![Vec3::zeros(); n * k];
    let mut dist = vec![0.0; n * k];
    let mut weights = vec![0.0; n * k];
    let mut embeddings = vec![0.0; n * k * e];
    let mut pe_in = vec![[0.0; 3]; n];
    let mut pe_clamped = vec![[false; 3]; n];
    let mut emb = vec![0.0; e];
    for i in 0..n {
        let nb = knn.neighbors(i);
        let mut zsum = 0.0;
        for (j, &a) in nb.iter().enumerate() {
            let frame = &inputs.frames[a as usize];
            let ql = frame.to_local(&points[i]);
            let d = ql.norm();
            let z = 1.0 / d.max(DIST_EPS);
            local[i * k + j] = ql;
            dist[i * k + j] = d;
            weights[i * k + j] = z;
            zsum += z;
        }
        let mut row = x.row_mut(i);
        let row = row.as_slice_mut().unwrap();
        for (j, &a) in nb.iter().enumerate() {
            let w = weights[i * k + j] / zsum;
            weights[i * k + j] = w;
            inputs.merged.encode(a as usize, &local[i * k + j], &mut emb);
            embeddings[(i * k + j) * e..(i * k + j + 1) * e].copy_from_slice(&emb);
            for (o, v) in row[..e].iter_mut().zip(&emb) {
                *o += w * v;
            }
        }
        let nearest = nb[0] as usize;
        row[e..e + f].copy_from_slice(&inputs.features[nearest * f..(nearest + 1) * f]);
        let rho = inputs.merged.extents[nearest];
        let ql = local[i * k];
        for d in 0..3 {
            let raw = ql[d] / rho;
            pe_in[i][d] = raw.clamp(-1.0, 1.0);
            pe_clamped[i][d] = raw != pe_in[i][d];
        }
        positional_encoding(&pe_in[i], cfg.pos_bands, None, &mut row[e + f..e + f + pe_q]);
        let dir = [dirs[i].x, dirs[i].y, dirs[i].z];
        positional_encoding(&dir, cfg.dir_bands, None, &mut row[e + f + pe_q..]);
    }
    let (raw, mlp_cache) = if keep_cache {
        let (r, c) = tiny.mlp.forward_cached(x.view());
        (r, Some(c))
    } else {
        (tiny.mlp.forward(x.view()), None)
    };
    let sigma = raw.column(0).iter().map(|&v| softplus(v)).collect();
    let color = raw
        .rows()
        .into_iter()
        .map(|r| [sigmoid(r[1]), sigmoid(r[2]), sigmoid(r[3])])
        .collect();
    let cache = mlp_cache.map(|mlp| FieldCache {
        k,
        neighbors: knn.indices.clone(),
        local,
        dist,
        weights,
        embeddings,
        pe_in,
        pe_clamped,
        raw,
        mlp,
    });
    Ok((FieldOutput { sigma, color }, cache))
}

/// Reverse pass of [`field_forward`]. Accumulates into `grads`; returns the
/// gradient with respect to each world-space query point when `want_dq`.
pub fn field_backward(
    tiny: &TinyMlp,
    inputs: &FieldInputs,
    cache: &FieldCache,
    d_sigma: &[f64],
    d_color: &[[f64; 3]],
    grads: &mut FieldGrads,
    want_dq: bool,
) -> Option<Vec<Vec3>> {
    let cfg = &tiny.config;
    let n = d_sigma.len();
    let k = cache.k;
    let e = cfg.hash.embedding_dim();
    let f = cfg.features;
    let pe_q = pe_dim(3, cfg.pos_bands);
    let mut dy = Array2::<f64>::zeros((n, 4));
    for i in 0..n {
        let o0 = cache.raw[[i, 0]];
        dy[[i, 0]] = d_sigma[i] * sigmoid(o0);
        for c in 0..3 {
            let s = sigmoid(cache.raw[[i, c + 1]]);
            dy[[i, c + 1]] = d_color[i][c] * s * (1.0 - s);
        }
    }
    let dx = tiny.mlp.backward(&cache.mlp, dy, &mut grads.mlp);
    let mut dq_out = want_dq.then(|| vec![Vec3::zeros(); n]);
    for i in 0..n {
        let row = dx.row(i);
        let row = row.as_slice().unwrap();
        let nb = &cache.neighbors[i * k..(i + 1) * k];
        let nearest = nb[0] as usize;
        for (g, d) in grads.features[nearest * f..(nearest + 1) * f].iter_mut().zip(&row[e..e + f]) {
            *g += d;
        }
        let dh = &row[..e];
        let mut dq_local = vec![Vec3::zeros(); k];
        let mut dw = vec![0.0; k];
        for (j, &a) in nb.iter().enumerate() {
            let w = cache.weights[i * k + j];
            let emb = &cache.embeddings[(i * k + j) * e..(i * k + j + 1) * e];
            dw[j] = emb.iter().zip(dh).map(|(a, b)| a * b).sum();
            let dq = inputs.merged.encode_backward(a as usize, &cache.local[i * k + j], dh, w, Some(&mut grads.merged));
            dq_local[j] += dq;
        }
        let Some(dq_out) = dq_out.as_mut() else {
            continue;
        };
        // positional encoding of the nearest anchor's normalised coordinate
        let dpe = positional_encoding_backward(&cache.pe_in[i], cfg.pos_bands, None, &row[e + f..e + f + pe_q]);
        let rho = inputs.merged.extents[nearest];
        for d in 0..3 {
            if !cache.pe_clamped[i][d] {
                dq_local[0][d] += dpe[d] / rho;
            }
        }
        // normalised inverse-distance weights: w_j = z_j / Σz
        let zs: Vec<f64> = (0..k).map(|j| 1.0 / cache.dist[i * k + j].max(DIST_EPS)).collect();
        let zsum: f64 = zs.iter().sum();
        let wdot: f64 = (0..k).map(|j| dw[j] * cache.weights[i * k + j]).sum();
        for j in 0..k {
            let dz = (dw[j] - wdot) / zsum;
            let d = cache.dist[i * k + j];
            if d > DIST_EPS {
                let dd = -dz / (d * d);
                dq_local[j] += cache.local[i * k + j] * (dd / d);
            }
        }
        let mut dq = Vec3::zeros();
        for (j, &a) in nb.iter().enumerate() {
            dq += inputs.frames[a as usize].axes * dq_local[j];
        }
        dq_out[i] = dq;
    }
    dq_out
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct WarpConfig {
    pub width: usize,
    pub depth: usize,
    pub head_width: usize,
    pub bands: usize,
    pub latent_dim: usize,
}

impl WarpConfig {
    /// Backbone of five 128-wide layers and 128-wide heads.
    pub fn full() -> Self {
        Self {
            width: 128,
            depth: 5,
            head_width: 128,
            bands: 6,
            latent_dim: 16,
        }
    }

    /// Narrower, shallower network for CPU training.
    pub fn desk() -> Self {
        Self {
            width: 32,
            depth: 2,
            head_width: 32,
            bands: 6,
            latent_dim: 16,
        }
    }

    pub fn input_dim(&self) -> usize {
        pe_dim(3, self.bands) + self.latent_dim
    }
}

/// Error-correction warp: backbone MLP plus rotation, centre and translation heads.
#[derive(Clone, Debug, PartialEq)]
pub struct WarpField {
    pub config: WarpConfig,
    pub backbone: Mlp,
    /// Log-quaternion, rotation centre, translation.
    pub heads: [Mlp; 3],
}

/// Cache of a batched warp evaluation.
#[derive(Clone, Debug)]
pub struct WarpCache {
    head_out: [Array2<f64>; 3],
    head_tangents: Option<[[Array2<f64>; 3]; 3]>,
    backbone: MlpCache,
    heads: [MlpCache; 3],
    points: Vec<Vec3>,
}

#[derive(Clone, Debug)]
pub struct WarpGrads {
    pub backbone: Vec<f64>,
    pub heads: [Vec<f64>; 3],
}

impl WarpGrads {
    pub fn zeros(warp: &WarpField) -> Self {
        Self {
            backbone: vec![0.0; warp.backbone.params.len()],
            heads: [0, 1, 2].map(|h| vec![0.0; warp.heads[h].params.len()]),
        }
    }
}

impl WarpField {
    /// All output layers zero so the initial warp is the identity.
    pub fn new(config: WarpConfig, rng: &mut impl Rng) -> Self {
        let mut sizes = vec![config.input_dim()];
        sizes.extend(std::iter::repeat_n(config.width, config.depth));
        let backbone = Mlp::random(&sizes, true, 1.0, rng);
        let heads = [0, 1, 2].map(|_| Mlp::random(&[config.width, config.head_width, 3], false, 0.0, rng));
        Self { config, backbone, heads }
    }

    fn encode_inputs(&self, points: &[Vec3], latents: ArrayView2<f64>, alpha: f64) -> Array2<f64> {
        let pe = pe_dim(3, self.config.bands);
        let mut x = Array2::<f64>::zeros((points.len(), self.config.input_dim()));
        for (i, p) in points.iter().enumerate() {
            let mut row = x.row_mut(i);
            let row = row.as_slice_mut().unwrap();
            positional_encoding(&[p.x, p.y, p.z], self.config.bands, Some(alpha), &mut row[..pe]);
            for (o, v) in row[pe..].iter_mut().zip(latents.row(i)) {
                *o = *v;
            }
        }
        x
    }

    /// `∂input/∂q_k` for the three coordinate directions.
    fn input_tangents(&self, points: &[Vec3], alpha: f64) -> [Array2<f64>; 3] {
        let bands = self.config.bands;
        [0, 1, 2].map(|k| {
            let mut t = Array2::<f64>::zeros((points.len(), self.config.input_dim()));
            for (i, p) in points.iter().enumerate() {
                t[[i, k]] = 1.0;
                for b in 0..bands {
                    let w = band_window(alpha, b);
                    let freq = (1u64 << b) as f64 * std::f64::consts::PI;
                    let (sn, cs) = (freq * p[k]).sin_cos();
                    t[[i, 3 + 6 * b + k]] = w * freq * cs;
                    t[[i, 3 + 6 * b + 3 + k]] = -w * freq * sn;
                }
            }
            t
        })
    }

    /// Warp `points`, one latent row per point. With `jacobian`, also
    /// returns `∂q'/∂q` per point.
    pub fn forward(&self, points: &[Vec3], latents: ArrayView2<f64>, alpha: f64, jacobian: bool) -> (Vec<Vec3>, Option<Vec<Mat3>>, WarpCache) {
        let x = self.encode_inputs(points, latents, alpha);
        let n = points.len();
        let (warped, jac, cache) = if jacobian {
            let tin = self.input_tangents(points, alpha);
            let (feat, ft, bcache) = self.backbone.forward_tangent(x.view(), [tin[0].view(), tin[1].view(), tin[2].view()]);
            let mut outs = Vec::new();
            let mut tans = Vec::new();
            let mut caches = Vec::new();
            for h in &self.heads {
                let (o, t, c) = h.forward_tangent(feat.view(), [ft[0].view(), ft[1].view(), ft[2].view()]);
                outs.push(o);
                tans.push(t);
                caches.push(c);
            }
            let mut warped = Vec::with_capacity(n);
            let mut jac = Vec::with_capacity(n);
            for i in 0..n {
                let dual = |h: usize| -> [Dual3<f64>; 3] {
                    [0, 1, 2].map(|c| Dual3::new(outs[h][[i, c]], [tans[h][0][[i, c]], tans[h][1][[i, c]], tans[h][2][[i, c]]]))
                };
                let q = [0, 1, 2].map(|c| {
                    let mut t = [0.0; 3];
                    t[c] = 1.0;
                    Dual3::new(points[i][c], t)
                });
                let out = rigid_warp(dual(0), dual(1), dual(2), q);
                warped.push(Vec3::new(out[0].v, out[1].v, out[2].v));
                jac.push(Mat3::from_fn(|r, c| out[r].t[c]));
            }
            let caches: [MlpCache; 3] = caches.try_into().unwrap();
            let outs: [Array2<f64>; 3] = outs.try_into().unwrap();
            let tans: [[Array2<f64>; 3]; 3] = tans.try_into().unwrap();
            (
                warped,
                Some(jac),
                WarpCache {
                    head_out: outs,
                    head_tangents: Some(tans),
                    backbone: bcache,
                    heads: caches,
                    points: points.to_vec(),
                },
            )
        } else {
            let (feat, bcache) = self.backbone.forward_cached(x.view());
            let mut outs = Vec::new();
            let mut caches = Vec::new();
            for h in &self.heads {
                let (o, c) = h.forward_cached(feat.view());
                outs.push(o);
                caches.push(c);
            }
            let warped = (0..n)
                .map(|i| {
                    let v = |h: usize| [outs[h][[i, 0]], outs[h][[i, 1]], outs[h][[i, 2]]];
                    let out = rigid_warp(v(0), v(1), v(2), [points[i].x, points[i].y, points[i].z]);
                    Vec3::new(out[0], out[1], out[2])
                })
                .collect();
            (
                warped,
                None,
                WarpCache {
                    head_out: outs.try_into().unwrap(),
                    head_tangents: None,
                    backbone: bcache,
                    heads: caches.try_into().unwrap(),
                    points: points.to_vec(),
                },
            )
        };
        (warped, jac, cache)
    }

    /// Reverse pass given `∂L/∂q'` and, for a Jacobian cache, `∂L/∂J`.
    /// Accumulates parameter gradients and returns `∂L/∂latent` per point.
    pub fn backward(&self, cache: &WarpCache, d_warped: &[Vec3], d_jac: Option<&[Mat3]>, grads: &mut WarpGrads) -> Array2<f64> {
        let n = cache.points.len();
        let mut dy = [0, 1, 2].map(|_| Array2::<f64>::zeros((n, 3)));
        let mut dt = cache.head_tangents.as_ref().map(|_| [0, 1, 2].map(|_| [0, 1, 2].map(|_| Array2::<f64>::zeros((n, 3)))));
        let tape = Tape::new();
        for i in 0..n {
            tape.clear();
            let q = cache.points[i];
            match (&cache.head_tangents, dt.as_mut(), d_jac) {
                (Some(tans), Some(dt), Some(dj)) => {
                    let leaf = |h: usize| -> [Dual3<_>; 3] {
                        [0, 1, 2].map(|c| {
                            let v = tape.var(cache.head_out[h][[i, c]]);
                            Dual3::new(v, [0, 1, 2].map(|k| tape.var(tans[h][k][[i, c]])))
                        })
                    };
                    let (r, c, t) = (leaf(0), leaf(1), leaf(2));
                    let qd = [0, 1, 2].map(|c| {
                        let z = tape.var(0.0);
                        let mut tv = [z; 3];
                        tv[c] = tape.var(1.0);
                        Dual3::new(tape.var(q[c]), tv)
                    });
                    let out = rigid_warp(r, c, t, qd);
                    let mut seeds = Vec::with_capacity(12);
                    for row in 0..3 {
                        seeds.push((out[row].v, d_warped[i][row]));
                        for col in 0..3 {
                            seeds.push((out[row].t[col], dj[i][(row, col)]));
                        }
                    }
                    let adj = tape.gradient(&seeds);
                    for (h, leaves) in [r, c, t].iter().enumerate() {
                        for comp in 0..3 {
                            dy[h][[i, comp]] = adj[leaves[comp].v.index()];
                            for k in 0..3 {
                                dt[h][k][[i, comp]] = adj[leaves[comp].t[k].index()];
                            }
                        }
                    }
                }
                _ => {
                    let leaf = |h: usize| [0, 1, 2].map(|c| tape.var(cache.head_out[h][[i, c]]));
                    let (r, c, t) = (leaf(0), leaf(1), leaf(2));
                    let qv = [0, 1, 2].map(|c| tape.var(q[c]));
                    let out = rigid_warp(r, c, t, qv);
                    let seeds: Vec<_> = (0..3).map(|row| (out[row], d_warped[i][row])).collect();
                    let adj = tape.gradient(&seeds);
                    for (h, leaves) in [r, c, t].iter().enumerate() {
                        for comp in 0..3 {
                            dy[h][[i, comp]] = adj[leaves[comp].index()];
                        }
                    }
                }
            }
        }
        let mut dfeat = Array2::<f64>::zeros((n, self.config.width));
        let mut dfeat_t = cache.head_tangents.as_ref().map(|_| [0, 1, 2].map(|_| Array2::<f64>::zeros((n, self.config.width))));
        for h in 0..3 {
            let dth = dt.as_ref().map(|dt| dt[h].clone());
            let (df, dft) = self.heads[h].backward_tangent(&cache.heads[h], dy[h].clone(), dth, &mut grads.heads[h]);
            dfeat += &df;
            if let (Some(acc), Some(dft)) = (dfeat_t.as_mut(), dft) {
                for k in 0..3 {
                    acc[k] += &dft[k];
                }
            }
        }
        let (dx, _) = self.backbone.backward_tangent(&cache.backbone, dfeat, dfeat_t, &mut grads.backbone);
        let pe = pe_dim(3, self.config.bands);
        dx.slice(s![.., pe..]).to_owned()
    }
}

/// Central-difference Jacobian of the warp, for tests and diagnostics.
pub fn warp_jacobian_fd(warp: &WarpField, q: &Vec3, latent: &[f64], alpha: f64, h: f64) -> Mat3 {
    let lat = Array2::from_shape_vec((1, latent.len()), latent.to_vec()).unwrap();
    let mut m = Mat3::zeros();
    for c in 0..3 {
        let mut qp = *q;
        qp[c] += h;
        let mut qm = *q;
        qm[c] -= h;
        let (p, _, _) = warp.forward(&[qp], lat.view(), alpha, false);
        let (mm, _, _) = warp.forward(&[qm], lat.view(), alpha, false);
        let col = (p[0] - mm[0]) / (2.0 * h);
        m.set_column(c, &col);
    }
    m
}
