//! Pinhole rays, quadrature compositing, hierarchical sampling, occupancy
//! skipping, image assembly and cost accounting.

use std::time::Instant;

use rand::Rng;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use crate::avatar::{Avatar, Frame};
use crate::error::{invalid, Result};
use crate::knn_search::KnnMode;
use crate::param_mesh::ExpressionInput;
use crate::radiance_field::{pe_dim, FieldConfig, FieldOutput};
use crate::uv_net::UVNetConfig;
use crate::{Mat3, Vec3};

pub const WHITE: [f64; 3] = [1.0, 1.0, 1.0];
pub const FPS_HEADER: &str = "frame,ms,rays,samples,gflops";

/// Pinhole camera with an OpenCV-style world-to-camera pose
/// (x right, y down, z forward).
#[derive(Clone, Debug, PartialEq)]
pub struct Camera {
    pub fx: f64,
    pub fy: f64,
    pub cx: f64,
    pub cy: f64,
    pub rotation: Mat3,
    pub translation: Vec3,
    pub width: usize,
    pub height: usize,
    pub near: f64,
    pub far: f64,
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct Ray {
    pub origin: Vec3,
    pub dir: Vec3,
}

impl Ray {
    pub fn at(&self, t: f64) -> Vec3 {
        self.origin + self.dir * t
    }
}

impl Camera {
    pub fn validate(&self) -> Result<()> {
        if !(self.fx > 0.0 && self.fy > 0.0) {
            return invalid("focal length must be positive");
        }
        if !(self.near >= 0.0 && self.near < self.far) {
            return invalid("need 0 <= near < far");
        }
        if !self.rotation.iter().chain(self.translation.iter()).all(|v| v.is_finite()) {
            return invalid("camera pose is not finite");
        }
        Ok(())
    }

    /// Camera at `eye` looking at `target`, world `up` pointing up in the image.
    #[allow(clippy::too_many_arguments)]
    pub fn look_at(eye: Vec3, target: Vec3, up: Vec3, fov_y: f64, width: usize, height: usize, near: f64, far: f64) -> Result<Self> {
        let fwd = target - eye;
        if fwd.norm() < 1e-12 {
            return invalid("eye and target coincide");
        }
        let fwd = fwd.normalize();
        let right = fwd.cross(&up);
        if right.norm() < 1e-9 {
            return invalid("up is parallel to the view direction");
        }
        let right = right.normalize();
        let down = fwd.cross(&right);
        let rotation = Mat3::from_rows(&[right.transpose(), down.transpose(), fwd.transpose()]);
        let f = height as f64 / 2.0 / (fov_y / 2.0).tan();
        let cam = Self {
            fx: f,
            fy: f,
            cx: width as f64 / 2.0,
            cy: height as f64 / 2.0,
            rotation,
            translation: -(rotation * eye),
            width,
            height,
            near,
            far,
        };
        cam.validate()?;
        Ok(cam)
    }

    /// Orbit camera around `center`. Azimuth 0 looks at the face (+z side),
    /// positive elevation looks from above. Angles in degrees.
    pub fn orbit(center: Vec3, azimuth_deg: f64, elevation_deg: f64, distance: f64, fov_y: f64, width: usize, height: usize) -> Result<Self> {
        if !(distance > 0.0) {
            return invalid("orbit distance must be positive");
        }
        let (az, el) = (azimuth_deg.to_radians(), elevation_deg.to_radians());
        let offset = Vec3::new(el.cos() * az.sin(), el.sin(), el.cos() * az.cos()) * distance;
        let near = (distance - 2.0).max(0.05);
        Self::look_at(center + offset, center, Vec3::y(), fov_y, width, height, near, distance + 2.0)
    }

    pub fn center(&self) -> Vec3 {
        -(self.rotation.transpose() * self.translation)
    }

    /// Ray through the centre of pixel `(x, y)`.
    pub fn ray(&self, x: usize, y: usize) -> Ray {
        let d_cam = Vec3::new(
            (x as f64 + 0.5 - self.cx) / self.fx,
            (y as f64 + 0.5 - self.cy) / self.fy,
            1.0,
        );
        Ray {
            origin: self.center(),
            dir: (self.rotation.transpose() * d_cam).normalize(),
        }
    }

    /// Row-major rays for every pixel.
    pub fn generate_rays(&self) -> Vec<Ray> {
        (0..self.height)
            .flat_map(|y| (0..self.width).map(move |x| (x, y)))
            .map(|(x, y)| self.ray(x, y))
            .collect()
    }

    /// Express the camera in a frame where the scene was rotated by `n`
    /// about `c` (`p' = N(p − c) + c`): returns the camera that sees the
    /// original scene identically.
    pub fn with_scene_rotation(&self, n: &Mat3, c: &Vec3) -> Camera {
        let mut out = self.clone();
        out.rotation = self.rotation * n;
        out.translation = self.translation + self.rotation * (c - n * c);
        out
    }
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct Aabb {
    pub min: Vec3,
    pub max: Vec3,
}

impl Aabb {
    pub fn from_points<'a>(points: impl IntoIterator<Item = &'a Vec3>) -> Self {
        let mut b = Aabb {
            min: Vec3::repeat(f64::INFINITY),
            max: Vec3::repeat(f64::NEG_INFINITY),
        };
        for p in points {
            b.min = b.min.inf(p);
            b.max = b.max.sup(p);
        }
        b
    }

    pub fn padded(&self, pad: f64) -> Self {
        Aabb {
            min: self.min - Vec3::repeat(pad),
            max: self.max + Vec3::repeat(pad),
        }
    }

    pub fn union(&self, other: &Aabb) -> Aabb {
        Aabb {
            min: self.min.inf(&other.min),
            max: self.max.sup(&other.max),
        }
    }

    pub fn contains(&self, p: &Vec3) -> bool {
        (0..3).all(|d| p[d] >= self.min[d] && p[d] <= self.max[d])
    }

    /// Slab test; returns the parametric entry and exit, clipped to `[near, far]`.
    pub fn intersect(&self, ray: &Ray, near: f64, far: f64) -> Option<(f64, f64)> {
        let (mut t0, mut t1) = (near, far);
        for d in 0..3 {
            let inv = 1.0 / ray.dir[d];
            let mut a = (self.min[d] - ray.origin[d]) * inv;
            let mut b = (self.max[d] - ray.origin[d]) * inv;
            if a > b {
                std::mem::swap(&mut a, &mut b);
            }
            if a.is_nan() || b.is_nan() {
                // ray parallel to this slab and on its boundary plane
                if ray.origin[d] < self.min[d] || ray.origin[d] > self.max[d] {
                    return None;
                }
                continue;
            }
            t0 = t0.max(a);
            t1 = t1.min(b);
        }
        (t0 < t1).then_some((t0, t1))
    }
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct SamplingPlan {
    pub n_coarse: usize,
    pub n_fine: usize,
    /// Random offsets per sample instead of the fixed left edge.
    pub jitter: bool,
}

impl Default for SamplingPlan {
    fn default() -> Self {
        Self {
            n_coarse: 32,
            n_fine: 32,
            jitter: false,
        }
    }
}

/// Stratified samples `t_j = t0 + (j + u_j)Δ` on `[t0, t1)`; `u_j = 0`
/// without an RNG.
pub fn coarse_samples(t0: f64, t1: f64, n: usize, rng: Option<&mut ChaCha8Rng>) -> Vec<f64> {
    let step = (t1 - t0) / n as f64;
    match rng {
        Some(rng) => (0..n).map(|j| t0 + (j as f64 + rng.random::<f64>()) * step).collect(),
        None => (0..n).map(|j| t0 + j as f64 * step).collect(),
    }
}

/// Interval lengths: `δ_j = t_{j+1} − t_j`, last `δ = t_far − t_last`.
pub fn deltas(t: &[f64], t_far: f64) -> Vec<f64> {
    let n = t.len();
    (0..n)
        .map(|j| if j + 1 < n { t[j + 1] - t[j] } else { (t_far - t[j]).max(0.0) })
        .collect()
}

#[derive(Clone, Debug, PartialEq)]
pub struct Composite {
    pub color: [f64; 3],
    /// `T_j α_j` per sample.
    pub weights: Vec<f64>,
    /// `T_j` per sample (before the sample).
    pub transmittance: Vec<f64>,
    pub t_final: f64,
}

/// Quadrature of the volume rendering integral against a background.
pub fn composite(sigma: &[f64], color: &[[f64; 3]], delta: &[f64], background: [f64; 3]) -> Composite {
    let n = sigma.len();
    let mut weights = Vec::with_capacity(n);
    let mut transmittance = Vec::with_capacity(n);
    let mut c = [0.0; 3];
    let mut t = 1.0;
    for j in 0..n {
        let keep = (-sigma[j] * delta[j]).exp();
        let w = t * (1.0 - keep);
        transmittance.push(t);
        weights.push(w);
        for ch in 0..3 {
            c[ch] += w * color[j][ch];
        }
        t *= keep;
    }
    for ch in 0..3 {
        c[ch] += t * background[ch];
    }
    Composite {
        color: c,
        weights,
        transmittance,
        t_final: t,
    }
}

/// Gradients of [`composite`] with respect to densities and colours, given
/// `∂L/∂C`: `∂C/∂σ_j = δ_j (T_{j+1} c_j − S_j)` with `S_j` the colour
/// accumulated behind sample `j`, background included.
pub fn composite_backward(
    sigma: &[f64],
    color: &[[f64; 3]],
    delta: &[f64],
    comp: &Composite,
    background: [f64; 3],
    d_c: [f64; 3],
) -> (Vec<f64>, Vec<[f64; 3]>) {
    let n = sigma.len();
    let mut d_sigma = vec![0.0; n];
    let mut d_color = vec![[0.0; 3]; n];
    let mut behind = [0.0; 3];
    for ch in 0..3 {
        behind[ch] = comp.t_final * background[ch];
    }
    for j in (0..n).rev() {
        let w = comp.weights[j];
        let t_next = comp.transmittance[j] - w;
        let mut g = 0.0;
        for ch in 0..3 {
            d_color[j][ch] = w * d_c[ch];
            g += d_c[ch] * (t_next * color[j][ch] - behind[ch]);
            behind[ch] += w * color[j][ch];
        }
        d_sigma[j] = delta[j] * g;
    }
    let _ = sigma;
    (d_sigma, d_color)
}

/// Inverse-CDF sampling of the piecewise-constant density defined by
/// `weights` over bins `[t_j, t_j + δ_j]`. Deterministic midpoints of `n`
/// strata without an RNG, sorted uniforms with one. Falls back to sampling
/// uniformly in `t` when every weight is zero.
pub fn importance_resample(t: &[f64], delta: &[f64], weights: &[f64], n: usize, rng: Option<&mut ChaCha8Rng>) -> Vec<f64> {
    if t.is_empty() || n == 0 {
        return Vec::new();
    }
    let total: f64 = weights.iter().map(|w| w.max(0.0)).sum();
    let pdf: Vec<f64> = if total > 0.0 {
        weights.iter().map(|w| w.max(0.0) / total).collect()
    } else {
        let len: f64 = delta.iter().sum();
        if len <= 0.0 {
            return Vec::new();
        }
        delta.iter().map(|d| d / len).collect()
    };
    let mut u: Vec<f64> = match rng {
        Some(rng) => (0..n).map(|_| rng.random::<f64>()).collect(),
        None => (0..n).map(|i| (i as f64 + 0.5) / n as f64).collect(),
    };
    u.sort_by(f64::total_cmp);
    let mut out = Vec::with_capacity(n);
    let mut bin = 0;
    let mut cdf = 0.0;
    for &x in &u {
        while bin + 1 < pdf.len() && cdf + pdf[bin] <= x {
            cdf += pdf[bin];
            bin += 1;
        }
        while pdf[bin] == 0.0 && bin + 1 < pdf.len() {
            bin += 1;
        }
        let frac = if pdf[bin] > 0.0 { ((x - cdf) / pdf[bin]).clamp(0.0, 1.0) } else { 0.0 };
        out.push(t[bin] + frac * delta[bin]);
    }
    out
}

/// Union of two sorted sample sets, strictly increasing. Returns the merged
/// values and, per merged sample, `Ok(i)` for coarse sample `i` or `Err(i)`
/// for fine sample `i`.
pub fn merge_samples(coarse: &[f64], fine: &[f64]) -> (Vec<f64>, Vec<std::result::Result<usize, usize>>) {
    let mut t = Vec::with_capacity(coarse.len() + fine.len());
    let mut src = Vec::with_capacity(coarse.len() + fine.len());
    let (mut i, mut j) = (0, 0);
    while i < coarse.len() || j < fine.len() {
        let take_coarse = j >= fine.len() || (i < coarse.len() && coarse[i] <= fine[j]);
        let (v, s) = if take_coarse {
            i += 1;
            (coarse[i - 1], Ok(i - 1))
        } else {
            j += 1;
            (fine[j - 1], Err(j - 1))
        };
        if t.last().is_some_and(|&last| v <= last) {
            continue;
        }
        t.push(v);
        src.push(s);
    }
    (t, src)
}

/// Anything that can be rendered: a bounded density and colour field.
pub trait RadianceSource: Sync {
    fn bounds(&self) -> Aabb;
    fn eval(&self, points: &[Vec3], dirs: &[Vec3]) -> Result<FieldOutput>;
}

/// A trained avatar posed by one prepared frame.
pub struct AvatarView<'a> {
    pub avatar: &'a Avatar,
    pub frame: &'a Frame,
    pub knn: KnnMode,
}

impl AvatarView<'_> {
    pub fn frame_bounds(avatar: &Avatar, frame: &Frame) -> Aabb {
        let pad = avatar.tables.extents.iter().cloned().fold(0.0, f64::max);
        Aabb::from_points(&frame.mesh.positions).padded(pad)
    }
}

impl RadianceSource for AvatarView<'_> {
    fn bounds(&self) -> Aabb {
        Self::frame_bounds(self.avatar, self.frame)
    }

    fn eval(&self, points: &[Vec3], dirs: &[Vec3]) -> Result<FieldOutput> {
        if points.is_empty() {
            return Ok(FieldOutput {
                sigma: Vec::new(),
                color: Vec::new(),
            });
        }
        self.avatar.query(self.frame, points, dirs, self.knn)
    }
}

/// Boolean voxelisation of non-empty space.
#[derive(Clone, Debug, PartialEq)]
pub struct OccupancyGrid {
    pub bounds: Aabb,
    pub resolution: usize,
    pub threshold: f64,
    pub cells: Vec<bool>,
}

/// Directions used to probe view-dependent density when building a grid.
pub const PROBE_DIRS: [[f64; 3]; 4] = [
    [0.577_350_269_189_625_8, 0.577_350_269_189_625_8, 0.577_350_269_189_625_8],
    [0.577_350_269_189_625_8, -0.577_350_269_189_625_8, -0.577_350_269_189_625_8],
    [-0.577_350_269_189_625_8, 0.577_350_269_189_625_8, -0.577_350_269_189_625_8],
    [-0.577_350_269_189_625_8, -0.577_350_269_189_625_8, 0.577_350_269_189_625_8],
];

impl OccupancyGrid {
    fn cell_size(&self) -> Vec3 {
        (self.bounds.max - self.bounds.min) / self.resolution as f64
    }

    pub fn voxel_center(&self, v: [usize; 3]) -> Vec3 {
        let s = self.cell_size();
        Vec3::from_fn(|d, _| self.bounds.min[d] + (v[d] as f64 + 0.5) * s[d])
    }

    fn index(&self, v: [usize; 3]) -> usize {
        (v[2] * self.resolution + v[1]) * self.resolution + v[0]
    }

    /// Points outside the grid bounds are reported empty.
    pub fn occupied(&self, p: &Vec3) -> bool {
        if !self.bounds.contains(p) {
            return false;
        }
        let s = self.cell_size();
        let v = [0, 1, 2].map(|d| (((p[d] - self.bounds.min[d]) / s[d]) as usize).min(self.resolution - 1));
        self.cells[self.index(v)]
    }

    pub fn occupied_fraction(&self) -> f64 {
        self.cells.iter().filter(|&&c| c).count() as f64 / self.cells.len() as f64
    }

    /// Occupied where the maximum density over `sources` (and the probe
    /// directions) at the voxel centre reaches `threshold`, then dilated by
    /// one voxel.
    pub fn build(sources: &[&dyn RadianceSource], bounds: Aabb, resolution: usize, threshold: f64) -> Result<Self> {
        if resolution == 0 {
            return invalid("occupancy resolution must be positive");
        }
        let mut grid = OccupancyGrid {
            bounds,
            resolution,
            threshold,
            cells: vec![false; resolution.pow(3)],
        };
        let centers: Vec<Vec3> = (0..resolution.pow(3))
            .map(|i| grid.voxel_center([i % resolution, i / resolution % resolution, i / (resolution * resolution)]))
            .collect();
        let mut dense = vec![false; centers.len()];
        let chunk = 8192;
        for src in sources {
            for dir in PROBE_DIRS {
                let dir = Vec3::new(dir[0], dir[1], dir[2]);
                for start in (0..centers.len()).step_by(chunk) {
                    let end = (start + chunk).min(centers.len());
                    let todo: Vec<usize> = (start..end).filter(|&i| !dense[i]).collect();
                    if todo.is_empty() {
                        continue;
                    }
                    let pts: Vec<Vec3> = todo.iter().map(|&i| centers[i]).collect();
                    let out = src.eval(&pts, &vec![dir; pts.len()])?;
                    for (&i, &s) in todo.iter().zip(&out.sigma) {
                        if s >= threshold {
                            dense[i] = true;
                        }
                    }
                }
            }
        }
        let r = resolution as isize;
        for z in 0..r {
            for y in 0..r {
                for x in 0..r {
                    if !dense[((z * r + y) * r + x) as usize] {
                        continue;
                    }
                    for dz in -1..=1 {
                        for dy in -1..=1 {
                            for dx in -1..=1 {
                                let (a, b, c) = (x + dx, y + dy, z + dz);
                                if a >= 0 && b >= 0 && c >= 0 && a < r && b < r && c < r {
                                    grid.cells[((c * r + b) * r + a) as usize] = true;
                                }
                            }
                        }
                    }
                }
            }
        }
        Ok(grid)
    }
}

/// Occupancy over the union of a set of expressions, on the union of their
/// bounds.
pub fn build_occupancy(avatar: &Avatar, expressions: &[ExpressionInput], resolution: usize, threshold: f64, knn: KnnMode) -> Result<OccupancyGrid> {
    let frames = expressions.iter().map(|e| avatar.prepare(e, false)).collect::<Result<Vec<_>>>()?;
    let views: Vec<AvatarView> = frames.iter().map(|frame| AvatarView { avatar, frame, knn }).collect();
    let Some(first) = views.first() else {
        return invalid("occupancy needs at least one expression");
    };
    let bounds = views.iter().fold(first.bounds(), |b, v| b.union(&v.bounds()));
    let sources: Vec<&dyn RadianceSource> = views.iter().map(|v| v as &dyn RadianceSource).collect();
    OccupancyGrid::build(&sources, bounds, resolution, threshold)
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct RenderOptions {
    pub plan: SamplingPlan,
    pub background: [f64; 3],
    pub seed: u64,
    /// Rays evaluated per field batch.
    pub chunk: usize,
}

impl Default for RenderOptions {
    fn default() -> Self {
        Self {
            plan: SamplingPlan::default(),
            background: WHITE,
            seed: 0,
            chunk: 1024,
        }
    }
}

/// Row-major RGB image with values in `[0, 1]`.
#[derive(Clone, Debug, PartialEq)]
pub struct RgbImage {
    pub width: usize,
    pub height: usize,
    pub data: Vec<[f64; 3]>,
}

impl RgbImage {
    pub fn filled(width: usize, height: usize, color: [f64; 3]) -> Self {
        Self {
            width,
            height,
            data: vec![color; width * height],
        }
    }

    pub fn at(&self, x: usize, y: usize) -> [f64; 3] {
        self.data[y * self.width + x]
    }
}

#[derive(Clone, Copy, Debug, Default, PartialEq)]
pub struct RenderStats {
    pub ms: f64,
    pub rays: u64,
    pub samples: u64,
    pub gflops: f64,
}

#[derive(Clone, Debug)]
pub struct RenderOutput {
    pub image: RgbImage,
    /// Final transmittance per pixel.
    pub transmittance: Vec<f64>,
    pub stats: RenderStats,
}

/// Per-ray output of [`render_rays`].
#[derive(Clone, Debug)]
pub struct RayResult {
    pub color: [f64; 3],
    pub t_final: f64,
}

/// Two-pass hierarchical rendering of a batch of rays. The coarse
/// evaluations are reused in the fine pass. Returns per-ray results and the
/// number of field evaluations.
pub fn render_rays(
    source: &dyn RadianceSource,
    rays: &[Ray],
    near: f64,
    far: f64,
    options: &RenderOptions,
    grid: Option<&OccupancyGrid>,
    rng: &mut ChaCha8Rng,
) -> Result<(Vec<RayResult>, u64)> {
    let bounds = source.bounds();
    let plan = options.plan;
    let mut coarse_t: Vec<Option<(Vec<f64>, f64)>> = Vec::with_capacity(rays.len());
    let mut pts = Vec::new();
    let mut dirs = Vec::new();
    let mut owner = Vec::new();
    for (r, ray) in rays.iter().enumerate() {
        let hit = bounds.intersect(ray, near, far);
        let Some((t0, t1)) = hit else {
            coarse_t.push(None);
            continue;
        };
        let t = coarse_samples(t0, t1, plan.n_coarse, plan.jitter.then_some(&mut *rng));
        for (j, &tj) in t.iter().enumerate() {
            let p = ray.at(tj);
            if grid.is_none_or(|g| g.occupied(&p)) {
                pts.push(p);
                dirs.push(ray.dir);
                owner.push((r, j));
            }
        }
        coarse_t.push(Some((t, t1)));
    }
    let out = source.eval(&pts, &dirs)?;
    let mut evaluated = pts.len() as u64;
    let mut coarse_vals: Vec<(Vec<f64>, Vec<[f64; 3]>)> = coarse_t
        .iter()
        .map(|c| match c {
            Some((t, _)) => (vec![0.0; t.len()], vec![[0.0; 3]; t.len()]),
            None => (Vec::new(), Vec::new()),
        })
        .collect();
    for (k, &(r, j)) in owner.iter().enumerate() {
        coarse_vals[r].0[j] = out.sigma[k];
        coarse_vals[r].1[j] = out.color[k];
    }
    // fine pass
    let mut merged: Vec<Option<(Vec<f64>, Vec<std::result::Result<usize, usize>>, f64)>> = Vec::with_capacity(rays.len());
    pts.clear();
    dirs.clear();
    owner.clear();
    for (r, c) in coarse_t.iter().enumerate() {
        let Some((t, t1)) = c else {
            merged.push(None);
            continue;
        };
        if plan.n_fine == 0 {
            let src = (0..t.len()).map(Ok).collect();
            merged.push(Some((t.clone(), src, *t1)));
            continue;
        }
        let d = deltas(t, *t1);
        let comp = composite(&coarse_vals[r].0, &coarse_vals[r].1, &d, options.background);
        let fine = importance_resample(t, &d, &comp.weights, plan.n_fine, plan.jitter.then_some(&mut *rng));
        let (mt, src) = merge_samples(t, &fine);
        for (k, s) in src.iter().enumerate() {
            if let Err(i) = s {
                let p = rays[r].at(mt[k]);
                if grid.is_none_or(|g| g.occupied(&p)) {
                    pts.push(p);
                    dirs.push(rays[r].dir);
                    owner.push((r, *i));
                }
            }
        }
        merged.push(Some((mt, src, *t1)));
    }
    let fine_out = source.eval(&pts, &dirs)?;
    evaluated += pts.len() as u64;
    let mut fine_vals: Vec<Vec<(f64, [f64; 3])>> = merged
        .iter()
        .map(|m| vec![(0.0, [0.0; 3]); if m.is_some() { plan.n_fine } else { 0 }])
        .collect();
    for (k, &(r, i)) in owner.iter().enumerate() {
        fine_vals[r][i] = (fine_out.sigma[k], fine_out.color[k]);
    }
    let results = merged
        .iter()
        .enumerate()
        .map(|(r, m)| match m {
            None => RayResult {
                color: options.background,
                t_final: 1.0,
            },
            Some((t, src, t1)) => {
                let mut sigma = Vec::with_capacity(t.len());
                let mut color = Vec::with_capacity(t.len());
                for s in src {
                    let (sg, c) = match *s {
                        Ok(i) => (coarse_vals[r].0[i], coarse_vals[r].1[i]),
                        Err(i) => fine_vals[r][i],
                    };
                    sigma.push(sg);
                    color.push(c);
                }
                let comp = composite(&sigma, &color, &deltas(t, *t1), options.background);
                RayResult {
                    color: comp.color,
                    t_final: comp.t_final,
                }
            }
        })
        .collect();
    Ok((results, evaluated))
}

/// Render every pixel of `camera`. Deterministic given `options.seed`.
pub fn render_image(
    source: &dyn RadianceSource,
    camera: &Camera,
    options: &RenderOptions,
    grid: Option<&OccupancyGrid>,
    flops_per_sample: f64,
) -> Result<RenderOutput> {
    camera.validate()?;
    let start = Instant::now();
    let rays = camera.generate_rays();
    let mut rng = ChaCha8Rng::seed_from_u64(options.seed);
    let mut image = RgbImage::filled(camera.width, camera.height, options.background);
    let mut transmittance = vec![1.0; rays.len()];
    let mut samples = 0;
    let chunk = options.chunk.max(1);
    for (c, batch) in rays.chunks(chunk).enumerate() {
        let (res, n) = render_rays(source, batch, camera.near, camera.far, options, grid, &mut rng)?;
        samples += n;
        for (k, r) in res.into_iter().enumerate() {
            image.data[c * chunk + k] = r.color;
            transmittance[c * chunk + k] = r.t_final;
        }
    }
    Ok(RenderOutput {
        image,
        transmittance,
        stats: RenderStats {
            ms: start.elapsed().as_secs_f64() * 1e3,
            rays: rays.len() as u64,
            samples,
            gflops: samples as f64 * flops_per_sample / 1e9,
        },
    })
}

/// Full pipeline for one expression: prepare the frame, then render.
pub fn render_avatar(
    avatar: &Avatar,
    expression: &ExpressionInput,
    camera: &Camera,
    options: &RenderOptions,
    knn: KnnMode,
    grid: Option<&OccupancyGrid>,
) -> Result<RenderOutput> {
    let start = Instant::now();
    let frame = avatar.prepare(expression, false)?;
    let view = AvatarView {
        avatar,
        frame: &frame,
        knn,
    };
    let cost = FlopsModel::for_avatar(avatar, camera.width, camera.height, 0);
    let mut out = render_image(&view, camera, options, grid, cost.per_sample())?;
    out.stats.gflops += cost.per_frame() / 1e9;
    out.stats.ms = start.elapsed().as_secs_f64() * 1e3;
    Ok(out)
}

/// Analytic cost model of one rendered frame.
#[derive(Clone, Debug, PartialEq)]
pub struct FlopsModel {
    pub width: usize,
    pub height: usize,
    pub samples_per_ray: usize,
    pub field: FieldConfig,
    pub anchors: usize,
    pub blendshapes: usize,
    pub uvnet_macs: u64,
}

/// Component counts in floating-point operations.
#[derive(Clone, Debug, PartialEq)]
pub struct FlopsBreakdown {
    pub mlp: f64,
    pub hash: f64,
    pub blend: f64,
    pub encoding: f64,
    pub uvnet: f64,
    pub merge: f64,
}

impl FlopsBreakdown {
    pub fn total(&self) -> f64 {
        self.mlp + self.hash + self.blend + self.encoding + self.uvnet + self.merge
    }
}

impl FlopsModel {
    /// Cost model at full network scale for a `width × height` frame.
    pub fn full(width: usize, height: usize, samples_per_ray: usize) -> Result<Self> {
        let uv = crate::uv_net::UVNetParams::zeros(UVNetConfig::full(5))?;
        Ok(Self {
            width,
            height,
            samples_per_ray,
            field: FieldConfig::default(),
            anchors: crate::param_mesh::DEFAULT_ANCHOR_COUNT,
            blendshapes: 5,
            uvnet_macs: uv.forward_macs(),
        })
    }

    pub fn for_avatar(avatar: &Avatar, width: usize, height: usize, samples_per_ray: usize) -> Self {
        Self {
            width,
            height,
            samples_per_ray,
            field: avatar.config.field,
            anchors: avatar.anchors(),
            blendshapes: avatar.config.blendshapes(),
            uvnet_macs: avatar.uvnet.forward_macs(),
        }
    }

    fn mlp_macs(&self) -> f64 {
        self.field.layer_sizes().windows(2).map(|w| (w[0] * w[1]) as f64).sum()
    }

    /// Operations per field sample, excluding the per-frame terms.
    pub fn per_sample(&self) -> f64 {
        let (k, l, f) = (self.field.k as f64, self.field.hash.levels as f64, self.field.hash.features as f64);
        let e = self.field.hash.embedding_dim() as f64;
        // MLP multiply-adds
        let mlp = 2.0 * self.mlp_macs();
        // per anchor and level: 8 corner weights (3 mults each), 8 × F multiply-adds
        let hash = k * l * (8.0 * 3.0 + 8.0 * 2.0 * f);
        // per anchor: local transform (9 madds), norm (6), inverse (1); normalise and blend
        let blend = k * (18.0 + 6.0 + 1.0) + k + k * 2.0 * e;
        // one operation per scaled coordinate and per sine or cosine
        let pe = |n: usize, b: usize| (pe_dim(n, b) - n) as f64 * 2.0;
        let encoding = pe(3, self.field.pos_bands) + pe(3, self.field.dir_bands);
        mlp + hash + blend + encoding
    }

    /// UV network forward plus merging every anchor's tables.
    pub fn per_frame(&self) -> f64 {
        let b = self.breakdown();
        b.uvnet + b.merge
    }

    pub fn breakdown(&self) -> FlopsBreakdown {
        let samples = (self.width * self.height * self.samples_per_ray) as f64;
        let (k, l, f) = (self.field.k as f64, self.field.hash.levels as f64, self.field.hash.features as f64);
        let e = self.field.hash.embedding_dim() as f64;
        let pe = |n: usize, b: usize| (pe_dim(n, b) - n) as f64 * 2.0;
        FlopsBreakdown {
            mlp: samples * 2.0 * self.mlp_macs(),
            hash: samples * k * l * (8.0 * 3.0 + 8.0 * 2.0 * f),
            blend: samples * (k * (18.0 + 6.0 + 1.0) + k + k * 2.0 * e),
            encoding: samples * (pe(3, self.field.pos_bands) + pe(3, self.field.dir_bands)),
            uvnet: 2.0 * self.uvnet_macs as f64,
            merge: (self.anchors * self.blendshapes * self.field.hash.table_len()) as f64 * 2.0,
        }
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct FrameTiming {
    pub frame: usize,
    pub stats: RenderStats,
}

#[derive(Clone, Debug, PartialEq)]
pub struct FpsReport {
    pub frames: Vec<FrameTiming>,
}

impl FpsReport {
    pub fn mean_ms(&self) -> f64 {
        self.frames.iter().map(|f| f.stats.ms).sum::<f64>() / self.frames.len().max(1) as f64
    }

    pub fn mean_fps(&self) -> f64 {
        1e3 / self.mean_ms()
    }

    pub fn to_csv(&self) -> String {
        let mut s = format!("{FPS_HEADER}\n");
        for f in &self.frames {
            s += &format!("{},{:.3},{},{},{:.6}\n", f.frame, f.stats.ms, f.stats.rays, f.stats.samples, f.stats.gflops);
        }
        s
    }
}

/// End-to-end timing over an expression sequence, `repeats` passes.
pub fn bench_fps(
    avatar: &Avatar,
    camera: &Camera,
    expressions: &[ExpressionInput],
    repeats: usize,
    options: &RenderOptions,
    knn: KnnMode,
    grid: Option<&OccupancyGrid>,
) -> Result<FpsReport> {
    if expressions.is_empty() || repeats == 0 {
        return invalid("benchmark needs at least one expression and one repeat");
    }
    let mut frames = Vec::new();
    for _ in 0..repeats {
        for e in expressions {
            let out = render_avatar(avatar, e, camera, options, knn, grid)?;
            frames.push(FrameTiming {
                frame: frames.len(),
                stats: out.stats,
            });
        }
    }
    Ok(FpsReport { frames })
}
