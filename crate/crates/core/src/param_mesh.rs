//! Linear parametric head mesh.
//!
//! A neutral mesh is deformed by a linear expression basis and then posed by a
//! four-joint rig (neck, jaw, two eyes) with linear blend skinning. The mesh
//! carries a cylindrical UV atlas used to move per-vertex quantities into image
//! space and back, plus per-vertex tangent frames in which local radiance
//! fields are expressed.

use nalgebra::{Rotation3, Unit};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::error::{invalid, Result};
use crate::{Mat3, Vec3};

/// Anchor count used when subsampling the mesh for hash tables.
pub const DEFAULT_ANCHOR_COUNT: usize = 1772;
/// Default symmetric pose limit in radians.
pub const DEFAULT_POSE_LIMIT: f64 = 0.6;
/// Joint order of the rig; pose vectors follow this order.
pub const JOINT_NAMES: [&str; 4] = ["neck", "jaw", "left_eye", "right_eye"];

#[derive(Clone, Debug, PartialEq)]
pub struct Joint {
    pub name: String,
    pub pivot: Vec3,
    /// Unit rotation axis; the joint has a single rotational degree of freedom.
    pub axis: Vec3,
    pub limit: f64,
    /// Per-vertex skin weight in [0, 1].
    pub weights: Vec<f64>,
}

impl Joint {
    pub fn rotation(&self, angle: f64) -> Mat3 {
        Rotation3::from_axis_angle(&Unit::new_normalize(self.axis), angle).into_inner()
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct ParametricHeadModel {
    pub neutral_positions: Vec<Vec3>,
    /// `expression_basis[b][v]` is the displacement of vertex `v` per unit of coefficient `b`.
    pub expression_basis: Vec<Vec<Vec3>>,
    pub joints: Vec<Joint>,
    pub uv_coords: Vec<[f64; 2]>,
    pub triangles: Vec<[u32; 3]>,
    pub anchor_indices: Vec<usize>,
    /// Nominal head radius in scene units.
    pub radius: f64,
}

#[derive(Clone, Debug, PartialEq)]
pub struct ExpressionInput {
    pub psi: Vec<f64>,
    pub theta: Vec<f64>,
    pub frame_id: Option<usize>,
}

impl ExpressionInput {
    pub fn neutral(model: &ParametricHeadModel) -> Self {
        Self {
            psi: vec![0.0; model.expression_dim()],
            theta: vec![0.0; model.joints.len()],
            frame_id: None,
        }
    }

    pub fn validate(&self, model: &ParametricHeadModel) -> Result<()> {
        if self.psi.len() != model.expression_dim() {
            return invalid(format!(
                "psi has {} coefficients, model expects {}",
                self.psi.len(),
                model.expression_dim()
            ));
        }
        if self.theta.len() != model.joints.len() {
            return invalid(format!(
                "theta has {} angles, model has {} joints",
                self.theta.len(),
                model.joints.len()
            ));
        }
        if let Some(i) = self.psi.iter().position(|v| !v.is_finite()) {
            return invalid(format!("psi[{i}] is not finite"));
        }
        for (angle, joint) in self.theta.iter().zip(&model.joints) {
            if !angle.is_finite() || angle.abs() > joint.limit {
                return invalid(format!(
                    "theta for joint `{}` = {angle} outside ±{}",
                    joint.name, joint.limit
                ));
            }
        }
        Ok(())
    }
}

/// Orthonormal per-vertex frame. Columns of `axes` are the tangent (x),
/// bitangent (y) and normal (z) directions.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct TangentFrame {
    pub origin: Vec3,
    pub axes: Mat3,
    /// Set when the vertex star was degenerate and global axes were used.
    pub fallback: bool,
}

impl TangentFrame {
    /// Coordinates of a world point in this frame.
    #[inline]
    pub fn to_local(&self, p: &Vec3) -> Vec3 {
        self.axes.tr_mul(&(p - self.origin))
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct DeformedMesh {
    pub positions: Vec<Vec3>,
    pub displacements: Vec<Vec3>,
    pub frames: Vec<TangentFrame>,
}

impl DeformedMesh {
    /// Rigidly undo the neck rotation so the head sits in a canonical pose.
    /// Displacements are left untouched; they describe the deformation itself.
    pub fn neck_normalized(&self, model: &ParametricHeadModel, theta: &[f64]) -> DeformedMesh {
        let Some(neck) = model.joints.first() else {
            return self.clone();
        };
        let angle = theta.first().copied().unwrap_or(0.0);
        if angle == 0.0 {
            return self.clone();
        }
        let inv = neck.rotation(angle).transpose();
        let c = neck.pivot;
        let positions = self.positions.iter().map(|p| inv * (p - c) + c).collect();
        let frames = self
            .frames
            .iter()
            .map(|f| TangentFrame {
                origin: inv * (f.origin - c) + c,
                axes: inv * f.axes,
                fallback: f.fallback,
            })
            .collect();
        DeformedMesh {
            positions,
            displacements: self.displacements.clone(),
            frames,
        }
    }
}

impl ParametricHeadModel {
    pub fn vertex_count(&self) -> usize {
        self.neutral_positions.len()
    }

    pub fn expression_dim(&self) -> usize {
        self.expression_basis.len()
    }

    pub fn anchor_count(&self) -> usize {
        self.anchor_indices.len()
    }

    pub fn validate(&self) -> Result<()> {
        let j = self.vertex_count();
        if self.uv_coords.len() != j {
            return invalid("uv_coords length differs from vertex count");
        }
        if self.uv_coords.iter().flatten().any(|c| !(0.0..=1.0).contains(c)) {
            return invalid("uv coordinate outside the unit square");
        }
        if self.triangles.iter().flatten().any(|&i| i as usize >= j) {
            return invalid("triangle references a missing vertex");
        }
        for (b, basis) in self.expression_basis.iter().enumerate() {
            if basis.len() != j {
                return invalid(format!("expression basis {b} has wrong length"));
            }
        }
        for joint in &self.joints {
            if joint.weights.len() != j {
                return invalid(format!("joint `{}` has wrong weight count", joint.name));
            }
            if joint.weights.iter().any(|w| !(0.0..=1.0).contains(w)) {
                return invalid(format!("joint `{}` has a weight outside [0,1]", joint.name));
            }
        }
        if self.anchor_indices.iter().any(|&a| a >= j) {
            return invalid("anchor index out of range");
        }
        Ok(())
    }

    /// Expression blend followed by linear blend skinning.
    ///
    /// Child joints (jaw, eyes) rotate about their rest pivots in rig order,
    /// then the neck carries the result. Zero angles are skipped so the
    /// neutral input reproduces `neutral_positions` exactly.
    pub fn deform(&self, input: &ExpressionInput) -> Result<DeformedMesh> {
        input.validate(self)?;
        let mut positions = self.neutral_positions.clone();
        for (basis, &coef) in self.expression_basis.iter().zip(&input.psi) {
            if coef != 0.0 {
                for (p, d) in positions.iter_mut().zip(basis) {
                    *p += d * coef;
                }
            }
        }
        for (joint, &angle) in self.joints.iter().zip(&input.theta).skip(1) {
            skin_joint(&mut positions, joint, angle);
        }
        if let (Some(neck), Some(&angle)) = (self.joints.first(), input.theta.first()) {
            skin_joint(&mut positions, neck, angle);
        }
        let displacements = positions
            .iter()
            .zip(&self.neutral_positions)
            .map(|(p, n)| p - n)
            .collect();
        let frames = tangent_frames(&positions, &self.triangles, &self.uv_coords);
        Ok(DeformedMesh {
            positions,
            displacements,
            frames,
        })
    }

    /// Half-extent of each anchor's local hash-grid domain: three times the
    /// mean length of the edges incident to the anchor in the neutral mesh.
    pub fn anchor_extents(&self) -> Vec<f64> {
        let j = self.vertex_count();
        let mut sum = vec![0.0; j];
        let mut count = vec![0usize; j];
        for t in &self.triangles {
            for e in 0..3 {
                let a = t[e] as usize;
                let b = t[(e + 1) % 3] as usize;
                let len = (self.neutral_positions[a] - self.neutral_positions[b]).norm();
                // every interior edge is seen twice, once per side; the mean is unaffected
                sum[a] += len;
                sum[b] += len;
                count[a] += 1;
                count[b] += 1;
            }
        }
        let global = sum.iter().sum::<f64>() / count.iter().sum::<usize>().max(1) as f64;
        self.anchor_indices
            .iter()
            .map(|&a| {
                let mean = if count[a] > 0 { sum[a] / count[a] as f64 } else { global };
                3.0 * mean
            })
            .collect()
    }
}

fn skin_joint(positions: &mut [Vec3], joint: &Joint, angle: f64) {
    if angle == 0.0 {
        return;
    }
    let rot = joint.rotation(angle);
    let c = joint.pivot;
    for (p, &w) in positions.iter_mut().zip(&joint.weights) {
        if w > 0.0 {
            let rigid = rot * (*p - c) + c;
            *p += (rigid - *p) * w;
        }
    }
}

/// Unwrap a triangle's u coordinates across the cylindrical seam so that no
/// edge spans more than half the atlas. Returns whether unwrapping happened.
pub(crate) fn unwrap_seam(uv: &mut [[f64; 2]; 3]) -> bool {
    let mut crossed = false;
    for k in 1..3 {
        let du = uv[k][0] - uv[0][0];
        if du > 0.5 {
            uv[k][0] -= 1.0;
            crossed = true;
        } else if du < -0.5 {
            uv[k][0] += 1.0;
            crossed = true;
        }
    }
    crossed
}

/// Per-vertex tangent frames.
///
/// The normal is the area-weighted vertex normal; the tangent is the
/// area-weighted UV u-derivative of the surface projected onto the tangent
/// plane; the bitangent completes a right-handed frame.
pub fn tangent_frames(positions: &[Vec3], triangles: &[[u32; 3]], uv: &[[f64; 2]]) -> Vec<TangentFrame> {
    let n = positions.len();
    let mut normals = vec![Vec3::zeros(); n];
    let mut tangents = vec![Vec3::zeros(); n];
    for t in triangles {
        let [a, b, c] = t.map(|i| i as usize);
        let e1 = positions[b] - positions[a];
        let e2 = positions[c] - positions[a];
        let cross = e1.cross(&e2);
        let area2 = cross.norm();
        let mut tuv = [uv[a], uv[b], uv[c]];
        unwrap_seam(&mut tuv);
        let (du1, dv1) = (tuv[1][0] - tuv[0][0], tuv[1][1] - tuv[0][1]);
        let (du2, dv2) = (tuv[2][0] - tuv[0][0], tuv[2][1] - tuv[0][1]);
        let det = du1 * dv2 - du2 * dv1;
        let dpdu = if det.abs() > 1e-14 {
            (e1 * dv2 - e2 * dv1) / det
        } else {
            Vec3::zeros()
        };
        for &v in &[a, b, c] {
            normals[v] += cross;
            tangents[v] += dpdu * (0.5 * area2);
        }
    }
    positions
        .iter()
        .zip(normals.iter().zip(&tangents))
        .map(|(&origin, (nrm, tan))| {
            let len = nrm.norm();
            if len < 1e-12 || !len.is_finite() {
                return TangentFrame {
                    origin,
                    axes: Mat3::identity(),
                    fallback: true,
                };
            }
            let z = nrm / len;
            let mut fallback = false;
            let mut x = tan - z * tan.dot(&z);
            if x.norm() < 1e-12 * (1.0 + tan.norm()) {
                fallback = true;
                let helper = if z.x.abs() < 0.9 { Vec3::x() } else { Vec3::y() };
                x = helper - z * helper.dot(&z);
            }
            let x = x.normalize();
            let y = z.cross(&x);
            TangentFrame {
                origin,
                axes: Mat3::from_columns(&[x, y, z]),
                fallback,
            }
        })
        .collect()
}

/// Row-major multi-channel image over the UV atlas. Texel `(x, y)` has its
/// centre at `((x + 0.5) / width, (y + 0.5) / height)`.
#[derive(Clone, Debug, PartialEq)]
pub struct UVImage {
    pub width: usize,
    pub height: usize,
    pub channels: usize,
    pub data: Vec<f64>,
}

impl UVImage {
    pub fn zeros(width: usize, height: usize, channels: usize) -> Self {
        Self {
            width,
            height,
            channels,
            data: vec![0.0; width * height * channels],
        }
    }

    #[inline]
    pub fn at(&self, x: usize, y: usize, c: usize) -> f64 {
        self.data[(y * self.width + x) * self.channels + c]
    }

    #[inline]
    pub fn at_mut(&mut self, x: usize, y: usize, c: usize) -> &mut f64 {
        &mut self.data[(y * self.width + x) * self.channels + c]
    }

    pub fn is_finite(&self) -> bool {
        self.data.iter().all(|v| v.is_finite())
    }
}

/// Texel coverage of a UV atlas, computed once per topology.
#[derive(Clone, Debug)]
pub struct UvRaster {
    pub width: usize,
    pub height: usize,
    /// Per texel: covering triangle and barycentric weights of its corners.
    coverage: Vec<Option<(usize, [f64; 3])>>,
    triangles: Vec<[u32; 3]>,
    /// Texels claimed by the interiors of more than one triangle.
    pub overlap_texels: usize,
}

impl UvRaster {
    /// Point-sample every texel centre against every triangle. Triangles that
    /// straddle the cylindrical seam are rasterised at both of their
    /// periodic images so coverage is continuous across it.
    pub fn new(uv: &[[f64; 2]], triangles: &[[u32; 3]], width: usize, height: usize) -> Self {
        let mut coverage: Vec<Option<(usize, [f64; 3])>> = vec![None; width * height];
        let mut strict = vec![false; width * height];
        let mut overlap_texels = 0;
        for (ti, t) in triangles.iter().enumerate() {
            let mut tuv = [uv[t[0] as usize], uv[t[1] as usize], uv[t[2] as usize]];
            let shifts: &[f64] = if unwrap_seam(&mut tuv) { &[0.0, 1.0, -1.0] } else { &[0.0] };
            for &shift in shifts {
                let corners = tuv.map(|c| [c[0] + shift, c[1]]);
                let umin = corners.iter().map(|c| c[0]).fold(f64::INFINITY, f64::min);
                let umax = corners.iter().map(|c| c[0]).fold(f64::NEG_INFINITY, f64::max);
                let vmin = corners.iter().map(|c| c[1]).fold(f64::INFINITY, f64::min);
                let vmax = corners.iter().map(|c| c[1]).fold(f64::NEG_INFINITY, f64::max);
                if umax < 0.0 || umin > 1.0 {
                    continue;
                }
                let x0 = ((umin * width as f64 - 0.5).floor().max(0.0)) as usize;
                let x1 = ((umax * width as f64 - 0.5).ceil().max(0.0) as usize).min(width - 1);
                let y0 = ((vmin * height as f64 - 0.5).floor().max(0.0)) as usize;
                let y1 = ((vmax * height as f64 - 0.5).ceil().max(0.0) as usize).min(height - 1);
                for y in y0..=y1 {
                    for x in x0..=x1 {
                        let p = [(x as f64 + 0.5) / width as f64, (y as f64 + 0.5) / height as f64];
                        let Some(bary) = barycentric(&corners, p) else { continue };
                        let tol = -1e-12;
                        if bary.iter().all(|&b| b >= tol) {
                            let idx = y * width + x;
                            let inside = bary.iter().all(|&b| b > 1e-9);
                            if inside && strict[idx] {
                                overlap_texels += 1;
                            }
                            strict[idx] = strict[idx] || inside;
                            coverage[idx] = Some((ti, bary));
                        }
                    }
                }
            }
        }
        Self {
            width,
            height,
            coverage,
            triangles: triangles.to_vec(),
            overlap_texels,
        }
    }

    pub fn covered_texels(&self) -> usize {
        self.coverage.iter().filter(|c| c.is_some()).count()
    }

    /// Barycentric interpolation of per-vertex values (`channels` per vertex).
    pub fn rasterize(&self, values: &[f64], channels: usize) -> UVImage {
        let mut img = UVImage::zeros(self.width, self.height, channels);
        for (idx, cov) in self.coverage.iter().enumerate() {
            if let Some((ti, bary)) = cov {
                let t = self.triangles[*ti];
                for c in 0..channels {
                    img.data[idx * channels + c] = (0..3)
                        .map(|k| bary[k] * values[t[k] as usize * channels + c])
                        .sum();
                }
            }
        }
        img
    }

    pub fn rasterize_vectors(&self, values: &[Vec3]) -> UVImage {
        let flat: Vec<f64> = values.iter().flat_map(|v| [v.x, v.y, v.z]).collect();
        self.rasterize(&flat, 3)
    }
}

fn barycentric(c: &[[f64; 2]; 3], p: [f64; 2]) -> Option<[f64; 3]> {
    let d = (c[1][1] - c[2][1]) * (c[0][0] - c[2][0]) + (c[2][0] - c[1][0]) * (c[0][1] - c[2][1]);
    if d.abs() < 1e-300 {
        return None;
    }
    let l0 = ((c[1][1] - c[2][1]) * (p[0] - c[2][0]) + (c[2][0] - c[1][0]) * (p[1] - c[2][1])) / d;
    let l1 = ((c[2][1] - c[0][1]) * (p[0] - c[2][0]) + (c[0][0] - c[2][0]) * (p[1] - c[2][1])) / d;
    Some([l0, l1, 1.0 - l0 - l1])
}

/// Rasterise per-vertex displacements into a `width`×`height` UV image.
/// Returns the image and the number of texels where triangle interiors overlapped.
pub fn rasterize_displacements(
    model: &ParametricHeadModel,
    displacements: &[Vec3],
    width: usize,
    height: usize,
) -> Result<(UVImage, usize)> {
    if displacements.len() != model.vertex_count() {
        return invalid(format!(
            "{} displacements for {} vertices",
            displacements.len(),
            model.vertex_count()
        ));
    }
    let raster = UvRaster::new(&model.uv_coords, &model.triangles, width, height);
    Ok((raster.rasterize_vectors(displacements), raster.overlap_texels))
}

/// Precomputed bilinear taps for sampling an image at a fixed set of UVs.
#[derive(Clone, Debug)]
pub struct UvSampler {
    pub width: usize,
    pub height: usize,
    taps: Vec<[(usize, f64); 4]>,
}

impl UvSampler {
    pub fn new(uv: &[[f64; 2]], width: usize, height: usize) -> Self {
        let taps = uv
            .iter()
            .map(|&[u, v]| {
                let fx = (u * width as f64 - 0.5).clamp(0.0, (width - 1) as f64);
                let fy = (v * height as f64 - 0.5).clamp(0.0, (height - 1) as f64);
                let x0 = fx.floor() as usize;
                let y0 = fy.floor() as usize;
                let x1 = (x0 + 1).min(width - 1);
                let y1 = (y0 + 1).min(height - 1);
                let ax = fx - x0 as f64;
                let ay = fy - y0 as f64;
                [
                    (y0 * width + x0, (1.0 - ax) * (1.0 - ay)),
                    (y0 * width + x1, ax * (1.0 - ay)),
                    (y1 * width + x0, (1.0 - ax) * ay),
                    (y1 * width + x1, ax * ay),
                ]
            })
            .collect();
        Self { width, height, taps }
    }

    pub fn len(&self) -> usize {
        self.taps.len()
    }

    pub fn is_empty(&self) -> bool {
        self.taps.is_empty()
    }

    /// Sample all channels; result is row-major `len × channels`.
    pub fn sample(&self, img: &UVImage) -> Vec<f64> {
        let c = img.channels;
        let mut out = vec![0.0; self.taps.len() * c];
        for (row, taps) in out.chunks_mut(c).zip(&self.taps) {
            for &(texel, w) in taps {
                if w != 0.0 {
                    let src = &img.data[texel * c..texel * c + c];
                    for (o, s) in row.iter_mut().zip(src) {
                        *o += w * s;
                    }
                }
            }
        }
        out
    }

    /// Transpose of [`sample`](Self::sample): scatter per-vertex gradients back to texels.
    pub fn backward(&self, grad: &[f64], channels: usize) -> UVImage {
        let mut img = UVImage::zeros(self.width, self.height, channels);
        for (row, taps) in grad.chunks(channels).zip(&self.taps) {
            for &(texel, w) in taps {
                if w != 0.0 {
                    let dst = &mut img.data[texel * channels..texel * channels + channels];
                    for (d, g) in dst.iter_mut().zip(row) {
                        *d += w * g;
                    }
                }
            }
        }
        img
    }
}

/// Bilinear, edge-clamped sample of `img` at every UV. Row-major `J × C`.
pub fn sample_uv_at_vertices(img: &UVImage, uv: &[[f64; 2]]) -> Vec<f64> {
    UvSampler::new(uv, img.width, img.height).sample(img)
}

/// Greedy farthest-point subsampling.
///
/// Starts from the vertex farthest from the centroid and repeatedly adds the
/// vertex farthest from the current selection; ties go to the lower index.
/// Returns indices in ascending order.
pub fn poisson_subsample(positions: &[Vec3], triangles: &[[u32; 3]], target_count: usize) -> Result<Vec<usize>> {
    let n = positions.len();
    if target_count > n {
        return invalid(format!("target_count {target_count} exceeds {n} vertices"));
    }
    if triangles.iter().flatten().any(|&i| i as usize >= n) {
        return invalid("triangle references a missing vertex");
    }
    if target_count == n {
        return Ok((0..n).collect());
    }
    if target_count == 0 {
        return Ok(Vec::new());
    }
    let centroid = positions.iter().fold(Vec3::zeros(), |a, p| a + p) / n as f64;
    let start = argmax(positions.iter().map(|p| (p - centroid).norm_squared()));
    let mut chosen = vec![start];
    let mut min_d: Vec<f64> = positions.iter().map(|p| (p - positions[start]).norm_squared()).collect();
    min_d[start] = f64::NEG_INFINITY;
    while chosen.len() < target_count {
        let next = argmax(min_d.iter().copied());
        chosen.push(next);
        min_d[next] = f64::NEG_INFINITY;
        let pn = positions[next];
        for (d, p) in min_d.iter_mut().zip(positions) {
            if *d > f64::NEG_INFINITY {
                *d = d.min((p - pn).norm_squared());
            }
        }
    }
    chosen.sort_unstable();
    Ok(chosen)
}

fn argmax(values: impl Iterator<Item = f64>) -> usize {
    let mut best = (0, f64::NEG_INFINITY);
    for (i, v) in values.enumerate() {
        if v > best.1 {
            best = (i, v);
        }
    }
    best.0
}

/// Ring layout of the procedural head: `(vertices per ring, top pole, bottom pole)`.
fn ring_layout(j: usize) -> (Vec<usize>, bool) {
    if j < 5 {
        return (vec![j - 1], false);
    }
    let body = j - 2;
    let mut rings = ((std::f64::consts::PI * body as f64 / 4.0).sqrt().round() as usize).max(1);
    rings = rings.min(body / 3).max(1);
    let phis: Vec<f64> = (0..rings)
        .map(|i| std::f64::consts::PI * (i + 1) as f64 / (rings + 1) as f64)
        .collect();
    let total_sin: f64 = phis.iter().map(|p| p.sin()).sum();
    let spare = body - 3 * rings;
    let shares: Vec<f64> = phis.iter().map(|p| spare as f64 * p.sin() / total_sin).collect();
    let mut counts: Vec<usize> = shares.iter().map(|s| 3 + s.floor() as usize).collect();
    let mut remaining = body - counts.iter().sum::<usize>();
    let mut order: Vec<usize> = (0..rings).collect();
    order.sort_by(|&a, &b| {
        let fa = shares[a] - shares[a].floor();
        let fb = shares[b] - shares[b].floor();
        fb.partial_cmp(&fa).unwrap().then(a.cmp(&b))
    });
    for &i in order.iter().cycle() {
        if remaining == 0 {
            break;
        }
        counts[i] += 1;
        remaining -= 1;
    }
    (counts, true)
}

/// Deterministic procedural head standing in for a scanned morphable model.
///
/// An ellipsoid with a nose bump is tessellated into latitude rings capped by
/// two poles (the poles are the last two vertices). UVs are a cylindrical
/// projection with the seam at the back of the head. The expression basis is
/// a sum of smooth Gaussian bumps on the face, each basis scaled so that no
/// vertex moves by more than 5% of the head radius per unit coefficient.
pub fn make_synthetic_model(seed: u64, vertex_count: usize, expression_dim: usize) -> Result<ParametricHeadModel> {
    use std::f64::consts::PI;
    if vertex_count < 4 {
        return invalid("synthetic model needs at least 4 vertices");
    }
    if expression_dim < 1 {
        return invalid("synthetic model needs at least one expression coefficient");
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let radius = 1.0;
    let semi = Vec3::new(
        0.78 * radius * rng.random_range(0.97..1.03),
        1.0 * radius * rng.random_range(0.97..1.03),
        0.88 * radius * rng.random_range(0.97..1.03),
    );
    let surface = |phi: f64, lambda: f64| -> Vec3 {
        Vec3::new(
            semi.x * phi.sin() * lambda.sin(),
            semi.y * phi.cos(),
            semi.z * phi.sin() * lambda.cos(),
        )
    };
    let uv_of = |phi: f64, lambda: f64| -> [f64; 2] {
        let u = (lambda / (2.0 * PI) + 0.5).clamp(0.0, 1.0);
        let v = ((phi.cos() + 1.0) / 2.0).clamp(0.0, 1.0);
        [u, v]
    };

    let (counts, poles) = ring_layout(vertex_count);
    let rings = counts.len();
    let mut params = Vec::with_capacity(vertex_count);
    let mut ring_start = Vec::with_capacity(rings);
    for (i, &c) in counts.iter().enumerate() {
        ring_start.push(params.len());
        let phi = if poles {
            PI * (i + 1) as f64 / (rings + 1) as f64
        } else {
            2.0 * PI / 3.0
        };
        for k in 0..c {
            params.push((phi, -PI + 2.0 * PI * k as f64 / c as f64));
        }
    }
    let top = params.len();
    params.push((0.0, 0.0));
    if poles {
        params.push((PI, 0.0));
    }
    let bottom = if poles { Some(top + 1) } else { None };

    let nose_center = surface(PI * 0.52, 0.0);
    let nose_dir = Vec3::new(0.0, -0.15, 1.0).normalize();
    let mut neutral_positions = Vec::with_capacity(vertex_count);
    let mut uv_coords = Vec::with_capacity(vertex_count);
    for &(phi, lambda) in &params {
        let p = surface(phi, lambda);
        let bump = 0.12 * radius * (-(p - nose_center).norm_squared() / (2.0 * 0.12f64.powi(2))).exp();
        neutral_positions.push(p + nose_dir * bump);
        uv_coords.push(uv_of(phi, lambda));
    }

    let mut triangles: Vec<[u32; 3]> = Vec::new();
    let ring_index = |r: usize, k: usize| (ring_start[r] + k % counts[r]) as u32;
    for k in 0..counts[0] {
        triangles.push([top as u32, ring_index(0, k), ring_index(0, k + 1)]);
    }
    for r in 0..rings.saturating_sub(1) {
        let (ca, cb) = (counts[r], counts[r + 1]);
        let (mut i, mut j) = (0usize, 0usize);
        while i < ca || j < cb {
            let next_a = (i + 1) as f64 / ca as f64;
            let next_b = (j + 1) as f64 / cb as f64;
            if j >= cb || (i < ca && next_a < next_b) {
                triangles.push([ring_index(r, i), ring_index(r + 1, j), ring_index(r, i + 1)]);
                i += 1;
            } else {
                triangles.push([ring_index(r, i), ring_index(r + 1, j), ring_index(r + 1, j + 1)]);
                j += 1;
            }
        }
    }
    let last = rings - 1;
    match bottom {
        Some(b) => {
            for k in 0..counts[last] {
                triangles.push([b as u32, ring_index(last, k + 1), ring_index(last, k)]);
            }
        }
        None => triangles.push([ring_index(0, 0), ring_index(0, 2), ring_index(0, 1)]),
    }

    let mut expression_basis = Vec::with_capacity(expression_dim);
    for _ in 0..expression_dim {
        let bumps: Vec<(Vec3, Vec3, f64)> = (0..3)
            .map(|_| {
                let phi = rng.random_range(PI / 3.0..5.0 * PI / 6.0);
                let lambda = rng.random_range(-PI / 2.0..PI / 2.0);
                let center = surface(phi, lambda);
                let normal = center.component_div(&semi.component_mul(&semi)).normalize();
                let tangent = Vec3::new(rng.random_range(-1.0..1.0), rng.random_range(-1.0..1.0), rng.random_range(-1.0..1.0));
                let dir = normal * rng.random_range(-1.0..1.0) + tangent * 0.5;
                let width = rng.random_range(0.2..0.45) * radius;
                (center, dir, width)
            })
            .collect();
        let mut field: Vec<Vec3> = neutral_positions
            .iter()
            .map(|p| {
                bumps.iter().fold(Vec3::zeros(), |acc, (c, d, w)| {
                    acc + d * (-(p - c).norm_squared() / (2.0 * w * w)).exp()
                })
            })
            .collect();
        let peak = field.iter().map(|d| d.norm()).fold(0.0, f64::max);
        let target = 0.05 * radius * rng.random_range(0.6..1.0);
        let scale = if peak > 0.0 { target / peak } else { 0.0 };
        field.iter_mut().for_each(|d| *d *= scale);
        expression_basis.push(field);
    }

    let smoothstep = |e0: f64, e1: f64, x: f64| {
        let t = ((x - e0) / (e1 - e0)).clamp(0.0, 1.0);
        t * t * (3.0 - 2.0 * t)
    };
    let neck_pivot = Vec3::new(0.0, -0.85 * semi.y, -0.1 * semi.z);
    let jaw_pivot = Vec3::new(0.0, -0.05 * semi.y, 0.05 * semi.z);
    let eye_l = Vec3::new(0.33 * semi.x, 0.18 * semi.y, 0.85 * semi.z);
    let eye_r = Vec3::new(-eye_l.x, eye_l.y, eye_l.z);
    let neck_w = neutral_positions
        .iter()
        .map(|p| smoothstep(-semi.y, -0.6 * semi.y, p.y))
        .collect();
    let jaw_w = neutral_positions
        .iter()
        .map(|p| smoothstep(-0.1 * semi.y, -0.35 * semi.y, p.y) * smoothstep(-0.1 * semi.z, 0.3 * semi.z, p.z))
        .collect();
    let eye_weights = |c: Vec3| -> Vec<f64> {
        neutral_positions
            .iter()
            .map(|p| smoothstep(0.3 * radius, 0.2 * radius, (p - c).norm()))
            .collect()
    };
    let joints = vec![
        Joint { name: JOINT_NAMES[0].into(), pivot: neck_pivot, axis: Vec3::x(), limit: DEFAULT_POSE_LIMIT, weights: neck_w },
        Joint { name: JOINT_NAMES[1].into(), pivot: jaw_pivot, axis: Vec3::x(), limit: DEFAULT_POSE_LIMIT, weights: jaw_w },
        Joint { name: JOINT_NAMES[2].into(), pivot: eye_l, axis: Vec3::y(), limit: DEFAULT_POSE_LIMIT, weights: eye_weights(eye_l) },
        Joint { name: JOINT_NAMES[3].into(), pivot: eye_r, axis: Vec3::y(), limit: DEFAULT_POSE_LIMIT, weights: eye_weights(eye_r) },
    ];

    let anchor_indices = poisson_subsample(
        &neutral_positions,
        &triangles,
        DEFAULT_ANCHOR_COUNT.min(vertex_count),
    )?;
    let model = ParametricHeadModel {
        neutral_positions,
        expression_basis,
        joints,
        uv_coords,
        triangles,
        anchor_indices,
        radius,
    };
    model.validate()?;
    Ok(model)
}

/// Replace the anchor set with an explicit subsample of `count` vertices.
pub fn with_anchor_count(mut model: ParametricHeadModel, count: usize) -> Result<ParametricHeadModel> {
    model.anchor_indices = poisson_subsample(&model.neutral_positions, &model.triangles, count)?;
    Ok(model)
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::Rng;
    use proptest::prelude::*;

    fn model7() -> ParametricHeadModel {
        make_synthetic_model(7, 1000, 8).unwrap()
    }

    fn icosphere() -> (Vec<Vec3>, Vec<[u32; 3]>) {
        let t = (1.0 + 5f64.sqrt()) / 2.0;
        let v: Vec<Vec3> = [
            [-1.0, t, 0.0], [1.0, t, 0.0], [-1.0, -t, 0.0], [1.0, -t, 0.0],
            [0.0, -1.0, t], [0.0, 1.0, t], [0.0, -1.0, -t], [0.0, 1.0, -t],
            [t, 0.0, -1.0], [t, 0.0, 1.0], [-t, 0.0, -1.0], [-t, 0.0, 1.0],
        ]
        .iter()
        .map(|p| Vec3::new(p[0], p[1], p[2]).normalize())
        .collect();
        let f = vec![
            [0, 11, 5], [0, 5, 1], [0, 1, 7], [0, 7, 10], [0, 10, 11],
            [1, 5, 9], [5, 11, 4], [11, 10, 2], [10, 7, 6], [7, 1, 8],
            [3, 9, 4], [3, 4, 2], [3, 2, 6], [3, 6, 8], [3, 8, 9],
            [4, 9, 5], [2, 4, 11], [6, 2, 10], [8, 6, 7], [9, 8, 1],
        ];
        (v, f)
    }

    #[test]
    fn neutral_input_is_identity() {
        let m = model7();
        let d = m.deform(&ExpressionInput::neutral(&m)).unwrap();
        assert_eq!(d.positions, m.neutral_positions);
        assert!(d.displacements.iter().all(|v| *v == Vec3::zeros()));
    }

    #[test]
    fn one_hot_expression_adds_basis() {
        let m = model7();
        let mut input = ExpressionInput::neutral(&m);
        input.psi[1] = 1.0;
        let d = m.deform(&input).unwrap();
        for (i, p) in d.positions.iter().enumerate() {
            assert_eq!(*p, m.neutral_positions[i] + m.expression_basis[1][i]);
        }
    }

    #[test]
    fn jaw_rotation_matches_per_vertex_oracle() {
        let m = model7();
        let mut input = ExpressionInput::neutral(&m);
        input.theta[1] = 0.3;
        let d = m.deform(&input).unwrap();
        let jaw = &m.joints[1];
        let (s, c) = 0.3f64.sin_cos();
        let mut moved = 0;
        for (i, p) in d.positions.iter().enumerate() {
            let w = jaw.weights[i];
            let r = m.neutral_positions[i] - jaw.pivot;
            // rotation about +x by 0.3 rad, written out by hand
            let rot = Vec3::new(r.x, c * r.y - s * r.z, s * r.y + c * r.z) + jaw.pivot;
            let expected = m.neutral_positions[i] * (1.0 - w) + rot * w;
            assert!((p - expected).norm() < 1e-12);
            if w == 1.0 {
                moved += 1;
            }
        }
        assert!(moved > 0, "jaw must fully own some vertices");
    }

    #[test]
    fn dimension_and_limit_errors() {
        let m = model7();
        let mut bad = ExpressionInput::neutral(&m);
        bad.psi.pop();
        assert!(m.deform(&bad).is_err());
        let mut bad = ExpressionInput::neutral(&m);
        bad.theta[0] = 0.7;
        assert!(m.deform(&bad).is_err());
        let mut bad = ExpressionInput::neutral(&m);
        bad.psi[0] = f64::NAN;
        assert!(m.deform(&bad).is_err());
    }

    #[test]
    fn sphere_normals_are_radial() {
        let (v, f) = icosphere();
        let uv: Vec<[f64; 2]> = v.iter().map(|p| [(p.x + 1.0) / 2.0, (p.y + 1.0) / 2.0]).collect();
        for (frame, p) in tangent_frames(&v, &f, &uv).iter().zip(&v) {
            assert!((frame.axes.column(2) - p).norm() < 1e-6);
        }
    }

    #[test]
    fn planar_grid_frames_are_identical() {
        let n = 6;
        let mut pos = Vec::new();
        let mut uv = Vec::new();
        for y in 0..n {
            for x in 0..n {
                pos.push(Vec3::new(x as f64, y as f64, 0.0));
                uv.push([x as f64 / (n - 1) as f64, y as f64 / (n - 1) as f64]);
            }
        }
        let mut tris = Vec::new();
        for y in 0..n - 1 {
            for x in 0..n - 1 {
                let i = (y * n + x) as u32;
                tris.push([i, i + 1, i + n as u32]);
                tris.push([i + 1, i + n as u32 + 1, i + n as u32]);
            }
        }
        let frames = tangent_frames(&pos, &tris, &uv);
        for f in &frames {
            assert!((f.axes - frames[0].axes).norm() < 1e-6);
            assert!(!f.fallback);
        }
        assert!((frames[0].axes.column(0) - Vec3::x()).norm() < 1e-9);
    }

    #[test]
    fn degenerate_star_falls_back() {
        let pos = vec![Vec3::zeros(), Vec3::x(), Vec3::x() * 2.0, Vec3::y()];
        let frames = tangent_frames(&pos, &[[0, 1, 2]], &[[0.0, 0.0], [0.5, 0.0], [1.0, 0.0], [0.0, 1.0]]);
        assert!(frames[0].fallback && frames[3].fallback);
        assert_eq!(frames[0].axes, Mat3::identity());
    }

    #[test]
    fn tangent_frame_matches_finite_difference_oracle() {
        let m = make_synthetic_model(7, 4000, 8).unwrap();
        let v0 = 0usize;
        let frames = tangent_frames(&m.neutral_positions, &m.triangles, &m.uv_coords);
        let mut nrm = Vec3::zeros();
        let mut tan = Vec3::zeros();
        for t in m.triangles.iter().filter(|t| t.contains(&(v0 as u32))) {
            let p = t.map(|i| m.neutral_positions[i as usize]);
            let mut uv = t.map(|i| m.uv_coords[i as usize]);
            // bring the triangle onto one side of the u seam
            for k in 1..3 {
                while uv[k][0] - uv[0][0] > 0.5 {
                    uv[k][0] -= 1.0;
                }
                while uv[k][0] - uv[0][0] < -0.5 {
                    uv[k][0] += 1.0;
                }
            }
            let area_vec = (p[1] - p[0]).cross(&(p[2] - p[0]));
            // the linear interpolant P(u, v) over the triangle, differenced numerically
            let interp = |u: f64, v: f64| {
                let d = (uv[1][1] - uv[2][1]) * (uv[0][0] - uv[2][0]) + (uv[2][0] - uv[1][0]) * (uv[0][1] - uv[2][1]);
                let a = ((uv[1][1] - uv[2][1]) * (u - uv[2][0]) + (uv[2][0] - uv[1][0]) * (v - uv[2][1])) / d;
                let b = ((uv[2][1] - uv[0][1]) * (u - uv[2][0]) + (uv[0][0] - uv[2][0]) * (v - uv[2][1])) / d;
                p[0] * a + p[1] * b + p[2] * (1.0 - a - b)
            };
            let cu = (uv[0][0] + uv[1][0] + uv[2][0]) / 3.0;
            let cv = (uv[0][1] + uv[1][1] + uv[2][1]) / 3.0;
            let h = 1e-6;
            let dpdu = (interp(cu + h, cv) - interp(cu - h, cv)) / (2.0 * h);
            nrm += area_vec;
            tan += dpdu * (0.5 * area_vec.norm());
        }
        let z = nrm.normalize();
        let x = (tan - z * tan.dot(&z)).normalize();
        let f = frames[v0];
        assert!((f.axes.column(2) - z).norm() < 1e-3);
        assert!((f.axes.column(0) - x).norm() < 1e-3);
        assert!((f.axes.column(1) - z.cross(&x)).norm() < 1e-3);
    }

    #[test]
    fn zero_displacements_rasterize_to_zero() {
        let m = model7();
        let (img, _) = rasterize_displacements(&m, &vec![Vec3::zeros(); 1000], 64, 64).unwrap();
        assert!(img.data.iter().all(|&v| v == 0.0));
        assert!(rasterize_displacements(&m, &[Vec3::zeros()], 64, 64).is_err());
    }

    #[test]
    fn single_triangle_centroid_is_barycentric_center() {
        // centroid (0.5, 0.5) is the centre of texel (2, 2) on a 5×5 grid
        let uv = [[0.3, 0.3], [0.7, 0.5], [0.5, 0.7]];
        let raster = UvRaster::new(&uv, &[[0, 1, 2]], 5, 5);
        let img = raster.rasterize_vectors(&[Vec3::x(), Vec3::y(), Vec3::z()]);
        for c in 0..3 {
            assert!((img.at(2, 2, c) - 1.0 / 3.0).abs() < 1e-6);
        }
        assert_eq!(img.at(0, 4, 0), 0.0);
    }

    // Independent point-in-triangle rasteriser: texel centre against every
    // triangle (and its ±1 periodic copies in u), signed-area barycentrics.
    fn oracle_raster(m: &ParametricHeadModel, values: &[Vec3], res: usize) -> Vec<Option<Vec3>> {
        let mut out = vec![None; res * res];
        for y in 0..res {
            for x in 0..res {
                let p = ((x as f64 + 0.5) / res as f64, (y as f64 + 0.5) / res as f64);
                'tris: for t in &m.triangles {
                    let uv = t.map(|i| m.uv_coords[i as usize]);
                    for shift in [0.0, 1.0, -1.0] {
                        let mut c = uv;
                        for k in 1..3 {
                            if c[k][0] - c[0][0] > 0.5 {
                                c[k][0] -= 1.0;
                            } else if c[k][0] - c[0][0] < -0.5 {
                                c[k][0] += 1.0;
                            }
                        }
                        let c = c.map(|q| (q[0] + shift, q[1]));
                        let area = |a: (f64, f64), b: (f64, f64), q: (f64, f64)| (b.0 - a.0) * (q.1 - a.1) - (b.1 - a.1) * (q.0 - a.0);
                        let total = area(c[0], c[1], c[2]);
                        if total.abs() < 1e-15 {
                            continue;
                        }
                        let l0 = area(c[1], c[2], p) / total;
                        let l1 = area(c[2], c[0], p) / total;
                        let l2 = area(c[0], c[1], p) / total;
                        if l0 > 1e-9 && l1 > 1e-9 && l2 > 1e-9 {
                            let v = values[t[0] as usize] * l0 + values[t[1] as usize] * l1 + values[t[2] as usize] * l2;
                            out[y * res + x] = Some(v);
                            break 'tris;
                        }
                    }
                }
            }
        }
        out
    }

    #[test]
    fn rasterizer_matches_point_sampling_oracle() {
        let m = model7();
        let mut input = ExpressionInput::neutral(&m);
        input.psi[0] = 1.0;
        let d = m.deform(&input).unwrap();
        let (img, _) = rasterize_displacements(&m, &d.displacements, 128, 128).unwrap();
        let oracle = oracle_raster(&m, &d.displacements, 128);
        let mut compared = 0;
        for (i, o) in oracle.iter().enumerate() {
            if let Some(v) = o {
                for c in 0..3 {
                    assert!((img.data[i * 3 + c] - v[c]).abs() < 1e-9, "texel {i}");
                }
                compared += 1;
            }
        }
        assert!(compared > 128 * 128 * 9 / 10, "{compared}");
    }

    #[test]
    fn sampling_examples() {
        let mut img = UVImage::zeros(8, 4, 2);
        for y in 0..4 {
            for x in 0..8 {
                *img.at_mut(x, y, 0) = 0.75;
                *img.at_mut(x, y, 1) = 2.0 * x as f64 + 3.0 * y as f64;
            }
        }
        let s = sample_uv_at_vertices(&img, &[[0.0, 0.0], [0.25, 0.5], [1.0, 1.0], [0.6, 0.1]]);
        for v in 0..4 {
            assert_eq!(s[v * 2], 0.75);
        }
        assert_eq!(s[1], img.at(0, 0, 1));
        // continuous texel coordinates: u·W − 0.5 = 1.5, v·H − 0.5 = 1.5
        assert!((s[3] - (2.0 * 1.5 + 3.0 * 1.5)).abs() < 1e-6);
        assert_eq!(s[5], img.at(7, 3, 1));
    }

    #[test]
    fn sampler_backward_is_adjoint() {
        let uv = [[0.13, 0.77], [0.5, 0.5], [0.99, 0.02]];
        let sampler = UvSampler::new(&uv, 16, 16);
        let mut img = UVImage::zeros(16, 16, 2);
        for (i, v) in img.data.iter_mut().enumerate() {
            *v = (i as f64 * 0.37).sin();
        }
        let g = [0.3, -1.0, 2.0, 0.5, -0.7, 1.1];
        let lhs: f64 = sampler.sample(&img).iter().zip(&g).map(|(a, b)| a * b).sum();
        let back = sampler.backward(&g, 2);
        let rhs: f64 = back.data.iter().zip(&img.data).map(|(a, b)| a * b).sum();
        assert!((lhs - rhs).abs() < 1e-12);
    }

    #[test]
    fn constant_field_round_trips() {
        for (j, res) in [(4000, 128), (1000, 64)] {
            let m = make_synthetic_model(7, j, 4).unwrap();
            let c = Vec3::new(0.3, -0.2, 0.7);
            let (img, _) = rasterize_displacements(&m, &vec![c; j], res, res).unwrap();
            let back = sample_uv_at_vertices(&img, &m.uv_coords);
            for v in 0..j {
                for k in 0..3 {
                    assert!((back[v * 3 + k] - c[k]).abs() < 1e-5, "J={j} vertex {v}");
                }
            }
        }
    }

    #[test]
    fn synthetic_model_properties() {
        let a = make_synthetic_model(7, 4000, 8).unwrap();
        let b = make_synthetic_model(7, 4000, 8).unwrap();
        assert_eq!(a, b);
        assert_eq!(a.anchor_count(), 1772);
        for basis in &a.expression_basis {
            assert!(basis.iter().all(|d| d.norm() <= 0.05 * a.radius + 1e-15));
        }
        assert!(a.joints.iter().all(|j| j.weights.iter().any(|&w| w > 0.5)));
        assert_ne!(make_synthetic_model(8, 4000, 8).unwrap().neutral_positions, a.neutral_positions);
        assert!(make_synthetic_model(7, 3, 1).is_err());
        let tiny = make_synthetic_model(1, 4, 1).unwrap();
        assert_eq!(tiny.vertex_count(), 4);
    }

    #[test]
    fn poisson_examples() {
        let line: Vec<Vec3> = (0..100).map(|i| Vec3::new(i as f64, 0.0, 0.0)).collect();
        assert_eq!(poisson_subsample(&line, &[], 2).unwrap(), vec![0, 99]);
        assert_eq!(poisson_subsample(&line, &[], 100).unwrap(), (0..100).collect::<Vec<_>>());
        assert!(poisson_subsample(&line, &[], 101).is_err());
    }

    fn min_pairwise(points: &[Vec3], idx: &[usize]) -> f64 {
        let mut best = f64::INFINITY;
        for (a, &i) in idx.iter().enumerate() {
            for &j in &idx[a + 1..] {
                best = best.min((points[i] - points[j]).norm());
            }
        }
        best
    }

    #[test]
    fn poisson_spacing_close_to_farthest_point_oracle() {
        let m = make_synthetic_model(3, 1000, 1).unwrap();
        // project the head onto the unit sphere
        let sphere: Vec<Vec3> = m.neutral_positions.iter().map(|p| p.normalize()).collect();
        let ours = poisson_subsample(&sphere, &m.triangles, 100).unwrap();
        // oracle: textbook farthest-point sampling seeded at vertex 0
        let mut chosen = vec![0usize];
        while chosen.len() < 100 {
            let next = (0..sphere.len())
                .filter(|i| !chosen.contains(i))
                .max_by(|&a, &b| {
                    let da = chosen.iter().map(|&c| (sphere[a] - sphere[c]).norm()).fold(f64::INFINITY, f64::min);
                    let db = chosen.iter().map(|&c| (sphere[b] - sphere[c]).norm()).fold(f64::INFINITY, f64::min);
                    da.partial_cmp(&db).unwrap()
                })
                .unwrap();
            chosen.push(next);
        }
        assert!(min_pairwise(&sphere, &ours) >= 0.5 * min_pairwise(&sphere, &chosen));
    }

    #[test]
    fn anchor_extents_are_three_mean_edges() {
        let m = model7();
        let ext = m.anchor_extents();
        assert_eq!(ext.len(), m.anchor_count());
        assert!(ext.iter().all(|&e| e > 0.0 && e < m.radius));
    }

    proptest! {
        #![proptest_config(ProptestConfig::with_cases(24))]

        #[test]
        fn deform_is_affine_in_psi(a in -2.0f64..2.0, b in -2.0f64..2.0, seed in 0u64..50) {
            let m = make_synthetic_model(seed, 300, 4).unwrap();
            let mut rng = ChaCha8Rng::seed_from_u64(seed);
            let p1: Vec<f64> = (0..4).map(|_| rng.random_range(-1.0..1.0)).collect();
            let p2: Vec<f64> = (0..4).map(|_| rng.random_range(-1.0..1.0)).collect();
            let mk = |psi: Vec<f64>| m.deform(&ExpressionInput { psi, theta: vec![0.0; 4], frame_id: None }).unwrap();
            let d1 = mk(p1.clone());
            let d2 = mk(p2.clone());
            let dc = mk(p1.iter().zip(&p2).map(|(x, y)| a * x + b * y).collect());
            for i in 0..300 {
                let expected = d1.positions[i] * a + d2.positions[i] * b - m.neutral_positions[i] * (a + b - 1.0);
                prop_assert!((dc.positions[i] - expected).norm() < 1e-9);
            }
        }

        #[test]
        fn frames_are_rotations(seed in 0u64..50, jaw in -0.6f64..0.6, neck in -0.6f64..0.6) {
            let m = make_synthetic_model(seed, 400, 2).unwrap();
            let d = m.deform(&ExpressionInput { psi: vec![0.5, -0.5], theta: vec![neck, jaw, 0.1, -0.1], frame_id: None }).unwrap();
            for f in &d.frames {
                prop_assert!((f.axes.transpose() * f.axes - Mat3::identity()).norm() < 1e-6);
                prop_assert!((f.axes.determinant() - 1.0).abs() < 1e-6);
            }
            let disp_ok = d.positions.iter().zip(&m.neutral_positions).zip(&d.displacements).all(|((p, n), dd)| p - n == *dd);
            prop_assert!(disp_ok);
        }
    }
}
