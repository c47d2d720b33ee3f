//! Losses, optimiser, schedules, the synthetic teacher scene and the
//! training step.

use std::collections::HashMap;
use std::time::Instant;

use nalgebra::SVD;
use ndarray::Array2;
use rand::Rng;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use crate::avatar::{field_pass, field_pass_backward, Avatar, AvatarConfig, Frame, Group, ParamGrads};
use crate::error::{invalid, Error, Result};
use crate::knn_search::KnnMode;
use crate::metrics_io::KeyValues;
use crate::param_mesh::{make_synthetic_model, poisson_subsample, with_anchor_count, DeformedMesh, ExpressionInput, ParametricHeadModel};
use crate::radiance_field::{FieldOutput, WarpGrads};
use crate::volume_renderer::{
    composite, composite_backward, coarse_samples, deltas, importance_resample, merge_samples, render_avatar, render_image, Aabb,
    AvatarView, Camera, Ray, RadianceSource, RenderOptions, RgbImage, SamplingPlan, WHITE,
};
use crate::{Mat3, Vec3};

pub const TRAIN_LOG_HEADER: &str = "step,loss,rgb,elastic,mag,lr";
/// Inside the square root of the per-pixel photometric norm.
pub const PHOTOMETRIC_EPS: f64 = 1e-8;
/// Singular values are clamped here before the logarithm.
pub const MIN_SINGULAR: f64 = 1e-6;

/// Photometric loss summed over pixels: squared norm during warm-up, the
/// norm itself afterwards. Returns the loss and `∂L/∂pred`.
pub fn photometric_loss(pred: &[[f64; 3]], target: &[[f64; 3]], warmup: bool) -> Result<(f64, Vec<[f64; 3]>)> {
    if pred.len() != target.len() {
        return invalid("prediction and target batches differ in length");
    }
    let mut loss = 0.0;
    let grads = pred
        .iter()
        .zip(target)
        .map(|(p, t)| {
            let d = [p[0] - t[0], p[1] - t[1], p[2] - t[2]];
            let sq = d[0] * d[0] + d[1] * d[1] + d[2] * d[2];
            if warmup {
                loss += sq;
                d.map(|v| 2.0 * v)
            } else {
                let n = (sq + PHOTOMETRIC_EPS).sqrt();
                loss += n;
                d.map(|v| v / n)
            }
        })
        .collect();
    Ok((loss, grads))
}

/// Mean over points of `Σ_i (log s_i)²` with `s_i` the singular values of
/// each Jacobian. Returns the loss and `∂L/∂J`.
pub fn elastic_loss(jacobians: &[Mat3]) -> Result<(f64, Vec<Mat3>)> {
    if jacobians.iter().any(|j| !j.iter().all(|v| v.is_finite())) {
        return invalid("non-finite Jacobian");
    }
    if jacobians.is_empty() {
        return Ok((0.0, Vec::new()));
    }
    let n = jacobians.len() as f64;
    let mut loss = 0.0;
    let grads = jacobians
        .iter()
        .map(|j| {
            let svd = SVD::new(*j, true, true);
            let (u, vt) = (svd.u.unwrap(), svd.v_t.unwrap());
            let mut d = Mat3::zeros();
            for i in 0..3 {
                let s = svd.singular_values[i].max(MIN_SINGULAR);
                let l = s.ln();
                loss += l * l;
                d[(i, i)] = 2.0 * l / s / n;
            }
            u * d * vt
        })
        .collect();
    Ok((loss / n, grads))
}

/// Mean squared displacement of warped points. Returns the loss and `∂L/∂q'`.
pub fn magnitude_loss(q: &[Vec3], warped: &[Vec3]) -> Result<(f64, Vec<Vec3>)> {
    if q.len() != warped.len() {
        return invalid("point batches differ in length");
    }
    if q.is_empty() {
        return Ok((0.0, Vec::new()));
    }
    let n = q.len() as f64;
    let loss = q.iter().zip(warped).map(|(a, b)| (b - a).norm_squared()).sum::<f64>() / n;
    let grads = q.iter().zip(warped).map(|(a, b)| (b - a) * (2.0 / n)).collect();
    Ok((loss, grads))
}

/// Exponential interpolation from `start` to `end` over `steps`.
pub fn exp_decay(start: f64, end: f64, step: u64, steps: u64) -> f64 {
    let f = if steps == 0 { 1.0 } else { (step as f64 / steps as f64).min(1.0) };
    if start <= 0.0 || end <= 0.0 {
        return start + (end - start) * f;
    }
    start * (end / start).powf(f)
}

#[derive(Clone, Debug, PartialEq)]
pub struct TrainConfig {
    pub lambda_elastic: f64,
    pub lambda_elastic_late: f64,
    pub elastic_decay_step: u64,
    pub lambda_mag: f64,
    pub warmup_steps: u64,
    pub warp_start: u64,
    pub total_steps: u64,
    pub lr_decay_steps: u64,
    pub alpha_steps: u64,
    pub rays_per_image: usize,
    pub images_per_batch: usize,
    pub lr: (f64, f64),
    pub lr_warp: (f64, f64),
    pub beta1: f64,
    pub beta2: f64,
    pub adam_eps: f64,
    pub plan: SamplingPlan,
    /// Warped samples per image that enter the elastic loss.
    pub elastic_samples: usize,
    pub use_warp: bool,
    pub knn: KnnMode,
}

impl TrainConfig {
    /// Full-scale step counts and batch shape.
    pub fn full() -> Self {
        Self {
            lambda_elastic: 1e-4,
            lambda_elastic_late: 1e-5,
            elastic_decay_step: 150_000,
            lambda_mag: 1e-2,
            warmup_steps: 10_000,
            warp_start: 5_000,
            total_steps: 400_000,
            lr_decay_steps: 400_000,
            alpha_steps: 80_000,
            rays_per_image: 256,
            images_per_batch: 8,
            lr: (5e-4, 5e-5),
            lr_warp: (1e-4, 1e-5),
            beta1: 0.9,
            beta2: 0.999,
            adam_eps: 1e-8,
            plan: SamplingPlan {
                n_coarse: 32,
                n_fine: 32,
                jitter: true,
            },
            elastic_samples: 256,
            use_warp: true,
            knn: KnnMode::default(),
        }
    }

    /// Every step count multiplied by `factor` (at least one step).
    pub fn scaled(&self, factor: f64) -> Self {
        let s = |v: u64| ((v as f64 * factor).round() as u64).max(1);
        Self {
            elastic_decay_step: s(self.elastic_decay_step),
            warmup_steps: s(self.warmup_steps),
            warp_start: s(self.warp_start),
            total_steps: s(self.total_steps),
            lr_decay_steps: s(self.lr_decay_steps),
            alpha_steps: s(self.alpha_steps),
            ..self.clone()
        }
    }

    /// One hundredth of the full schedule with a CPU-sized batch.
    pub fn desk() -> Self {
        Self {
            rays_per_image: 256,
            images_per_batch: 2,
            plan: SamplingPlan {
                n_coarse: 16,
                n_fine: 16,
                jitter: true,
            },
            elastic_samples: 32,
            knn: KnnMode::Exact,
            ..Self::full().scaled(0.01)
        }
    }

    pub fn validate(&self) -> Result<()> {
        let steps = [
            self.elastic_decay_step,
            self.warmup_steps,
            self.warp_start,
            self.total_steps,
            self.lr_decay_steps,
            self.alpha_steps,
        ];
        if steps.contains(&0) {
            return invalid("schedule step counts must be positive");
        }
        if [self.lambda_elastic, self.lambda_elastic_late, self.lambda_mag].iter().any(|l| !(*l >= 0.0)) {
            return invalid("loss weights must be nonnegative");
        }
        if self.rays_per_image == 0 || self.images_per_batch == 0 || self.plan.n_coarse == 0 {
            return invalid("batch and sample counts must be positive");
        }
        if [self.lr.0, self.lr.1, self.lr_warp.0, self.lr_warp.1].iter().any(|l| !(*l >= 0.0)) {
            return invalid("learning rates must be nonnegative");
        }
        Ok(())
    }

    /// Overwrite fields named in a key=value config; unknown keys are
    /// left in `kv` for the caller to reject.
    pub fn apply(&mut self, kv: &mut KeyValues) -> Result<()> {
        kv.take_into("lambda_elastic", &mut self.lambda_elastic)?;
        kv.take_into("lambda_elastic_late", &mut self.lambda_elastic_late)?;
        kv.take_into("elastic_decay_step", &mut self.elastic_decay_step)?;
        kv.take_into("lambda_mag", &mut self.lambda_mag)?;
        kv.take_into("warmup_steps", &mut self.warmup_steps)?;
        kv.take_into("warp_start", &mut self.warp_start)?;
        kv.take_into("total_steps", &mut self.total_steps)?;
        kv.take_into("lr_decay_steps", &mut self.lr_decay_steps)?;
        kv.take_into("alpha_steps", &mut self.alpha_steps)?;
        kv.take_into("rays_per_image", &mut self.rays_per_image)?;
        kv.take_into("images_per_batch", &mut self.images_per_batch)?;
        kv.take_into("lr_start", &mut self.lr.0)?;
        kv.take_into("lr_end", &mut self.lr.1)?;
        kv.take_into("lr_warp_start", &mut self.lr_warp.0)?;
        kv.take_into("lr_warp_end", &mut self.lr_warp.1)?;
        kv.take_into("beta1", &mut self.beta1)?;
        kv.take_into("beta2", &mut self.beta2)?;
        kv.take_into("adam_eps", &mut self.adam_eps)?;
        kv.take_into("n_coarse", &mut self.plan.n_coarse)?;
        kv.take_into("n_fine", &mut self.plan.n_fine)?;
        kv.take_into("jitter", &mut self.plan.jitter)?;
        kv.take_into("elastic_samples", &mut self.elastic_samples)?;
        kv.take_into("use_warp", &mut self.use_warp)?;
        kv.take_into("knn", &mut self.knn)?;
        self.validate()
    }

    pub fn lambda_elastic_at(&self, step: u64) -> f64 {
        if step < self.elastic_decay_step {
            self.lambda_elastic
        } else {
            self.lambda_elastic_late
        }
    }

    pub fn lr_at(&self, step: u64, warp: bool) -> f64 {
        let (a, b) = if warp { self.lr_warp } else { self.lr };
        exp_decay(a, b, step, self.lr_decay_steps)
    }

    /// Coarse-to-fine encoding position of the warp field.
    pub fn alpha_at(&self, step: u64, bands: usize) -> f64 {
        bands as f64 * (step as f64 / self.alpha_steps as f64).min(1.0)
    }

    pub fn warp_active(&self, step: u64) -> bool {
        self.use_warp && step >= self.warp_start
    }
}

/// Adam moments per parameter group with per-group step counts, so groups
/// switched on late get their own bias correction.
#[derive(Clone, Debug, PartialEq)]
pub struct Adam {
    pub m: Vec<Vec<f64>>,
    pub v: Vec<Vec<f64>>,
    pub t: Vec<u64>,
}

impl Adam {
    pub fn new(avatar: &Avatar) -> Self {
        let zeros: Vec<Vec<f64>> = Group::ALL.iter().map(|&g| vec![0.0; avatar.param(g).len()]).collect();
        Self {
            m: zeros.clone(),
            v: zeros,
            t: vec![0; Group::ALL.len()],
        }
    }

    pub fn update(&mut self, group: usize, params: &mut [f64], grads: &[f64], lr: f64, beta1: f64, beta2: f64, eps: f64) {
        self.t[group] += 1;
        let t = self.t[group] as i32;
        let c1 = 1.0 - beta1.powi(t);
        let c2 = 1.0 - beta2.powi(t);
        let (m, v) = (&mut self.m[group], &mut self.v[group]);
        for i in 0..params.len() {
            let g = grads[i];
            m[i] = beta1 * m[i] + (1.0 - beta1) * g;
            v[i] = beta2 * v[i] + (1.0 - beta2) * g * g;
            params[i] -= lr * (m[i] / c1) / ((v[i] / c2).sqrt() + eps);
        }
    }
}

/// Soft ellipsoid attached to a mesh vertex, axes along its tangent frame.
#[derive(Clone, Debug, PartialEq)]
pub struct Blob {
    pub vertex: usize,
    /// Support radii along tangent, bitangent and normal.
    pub radii: Vec3,
    pub color: [f64; 3],
    /// Colour change per unit of each expression coefficient.
    pub modulation: Vec<[f64; 3]>,
}

/// Ground-truth radiance field used to render the synthetic targets.
#[derive(Clone, Debug, PartialEq)]
pub struct Teacher {
    pub blobs: Vec<Blob>,
    /// Density at a blob centre.
    pub amplitude: f64,
}

/// Compact smooth kernel `(1 − m²)³` of the normalised radius `m`.
fn kernel(m2: f64) -> f64 {
    if m2 >= 1.0 {
        0.0
    } else {
        let a = 1.0 - m2;
        a * a * a
    }
}

impl Teacher {
    pub fn new(model: &ParametricHeadModel, blobs: usize, seed: u64) -> Result<Self> {
        let mut rng = ChaCha8Rng::seed_from_u64(seed ^ 0x7eac_4e11);
        let verts = poisson_subsample(&model.neutral_positions, &model.triangles, blobs.min(model.vertex_count()))?;
        let area: f64 = model
            .triangles
            .iter()
            .map(|t| {
                let p = t.map(|i| model.neutral_positions[i as usize]);
                (p[1] - p[0]).cross(&(p[2] - p[0])).norm() / 2.0
            })
            .sum();
        let spacing = (area / verts.len() as f64).sqrt();
        let phase: [f64; 3] = [0, 1, 2].map(|_| rng.random_range(0.0..std::f64::consts::TAU));
        let freq: [Vec3; 3] = [0, 1, 2].map(|_| Vec3::from_fn(|_, _| rng.random_range(-2.5..2.5)));
        let n_psi = model.expression_dim();
        let psi_dirs: Vec<[Vec3; 3]> = (0..n_psi)
            .map(|_| [0, 1, 2].map(|_| Vec3::from_fn(|_, _| rng.random_range(-1.5..1.5))))
            .collect();
        let blobs = verts
            .iter()
            .map(|&v| {
                let p = model.neutral_positions[v];
                let color = [0, 1, 2].map(|c| 0.5 + 0.3 * (freq[c].dot(&p) + phase[c]).sin());
                let modulation = psi_dirs
                    .iter()
                    .map(|d| [0, 1, 2].map(|c| 0.08 * (d[c].dot(&p)).sin()))
                    .collect();
                Blob {
                    vertex: v,
                    radii: Vec3::new(1.6 * spacing, 1.6 * spacing, 0.9 * spacing),
                    color,
                    modulation,
                }
            })
            .collect();
        Ok(Self { blobs, amplitude: 30.0 })
    }

    pub fn blob_color(&self, blob: &Blob, psi: &[f64]) -> [f64; 3] {
        let mut c = blob.color;
        for (m, &p) in blob.modulation.iter().zip(psi) {
            for ch in 0..3 {
                c[ch] += p * m[ch];
            }
        }
        c.map(|v| v.clamp(0.0, 1.0))
    }

    /// The teacher posed by a deformed mesh.
    pub fn view(&self, mesh: &DeformedMesh, psi: &[f64]) -> TeacherView<'_> {
        let centers: Vec<Vec3> = self.blobs.iter().map(|b| mesh.positions[b.vertex]).collect();
        let axes: Vec<Mat3> = self.blobs.iter().map(|b| mesh.frames[b.vertex].axes).collect();
        let colors = self.blobs.iter().map(|b| self.blob_color(b, psi)).collect();
        let reach = self.blobs.iter().map(|b| b.radii.max()).fold(0.0, f64::max);
        let bounds = Aabb::from_points(&centers).padded(reach);
        let cell = reach.max(1e-6);
        let mut grid: HashMap<[i64; 3], Vec<u32>> = HashMap::new();
        for (i, c) in centers.iter().enumerate() {
            let r = self.blobs[i].radii.max();
            let lo = ((c - Vec3::repeat(r)) / cell).map(|v| v.floor() as i64);
            let hi = ((c + Vec3::repeat(r)) / cell).map(|v| v.floor() as i64);
            for z in lo.z..=hi.z {
                for y in lo.y..=hi.y {
                    for x in lo.x..=hi.x {
                        grid.entry([x, y, z]).or_default().push(i as u32);
                    }
                }
            }
        }
        TeacherView {
            teacher: self,
            centers,
            axes,
            colors,
            bounds,
            cell,
            grid,
        }
    }
}

pub struct TeacherView<'a> {
    teacher: &'a Teacher,
    centers: Vec<Vec3>,
    axes: Vec<Mat3>,
    colors: Vec<[f64; 3]>,
    bounds: Aabb,
    cell: f64,
    grid: HashMap<[i64; 3], Vec<u32>>,
}

impl TeacherView<'_> {
    pub fn sample(&self, p: &Vec3) -> (f64, [f64; 3]) {
        let key = (p / self.cell).map(|v| v.floor() as i64);
        let Some(list) = self.grid.get(&[key.x, key.y, key.z]) else {
            return (0.0, [0.0; 3]);
        };
        let mut density = 0.0;
        let mut color = [0.0; 3];
        for &i in list {
            let i = i as usize;
            let l = self.axes[i].tr_mul(&(p - self.centers[i]));
            let m2 = l.component_div(&self.teacher.blobs[i].radii).norm_squared();
            let k = kernel(m2);
            if k > 0.0 {
                density += k;
                for c in 0..3 {
                    color[c] += k * self.colors[i][c];
                }
            }
        }
        if density > 0.0 {
            color = color.map(|c| c / density);
        }
        (self.teacher.amplitude * density, color)
    }
}

impl RadianceSource for TeacherView<'_> {
    fn bounds(&self) -> Aabb {
        self.bounds
    }

    fn eval(&self, points: &[Vec3], _dirs: &[Vec3]) -> Result<FieldOutput> {
        let (sigma, color) = points.iter().map(|p| self.sample(p)).unzip();
        Ok(FieldOutput { sigma, color })
    }
}

/// Rendered teacher views for every (camera, expression) pair.
#[derive(Clone, Debug)]
pub struct SyntheticDataset {
    pub model: ParametricHeadModel,
    pub teacher: Teacher,
    pub cameras: Vec<Camera>,
    pub heldout_cameras: Vec<Camera>,
    pub expressions: Vec<ExpressionInput>,
    /// Index `camera * expressions + expression`.
    pub targets: Vec<RgbImage>,
    pub masks: Vec<Vec<bool>>,
    pub render: RenderOptions,
}

#[derive(Clone, Debug, PartialEq)]
pub struct DatasetConfig {
    pub seed: u64,
    pub cameras: usize,
    pub expressions: usize,
    pub resolution: usize,
    pub vertices: usize,
    pub anchors: usize,
    pub expression_dim: usize,
    pub blobs: usize,
}

impl DatasetConfig {
    pub fn toy(seed: u64) -> Self {
        Self {
            seed,
            cameras: 4,
            expressions: 8,
            resolution: 64,
            vertices: 1000,
            anchors: 300,
            expression_dim: 8,
            blobs: 500,
        }
    }
}

impl DatasetConfig {
    /// Minimal scene for unit tests.
    pub fn tiny(seed: u64) -> Self {
        Self {
            seed,
            cameras: 2,
            expressions: 2,
            resolution: 16,
            vertices: 200,
            anchors: 60,
            expression_dim: 4,
            blobs: 80,
        }
    }
}

/// Camera ring used for the synthetic captures: `n` views spread over
/// ±45° azimuth with alternating elevation.
pub fn capture_cameras(n: usize, resolution: usize) -> Result<Vec<Camera>> {
    (0..n)
        .map(|i| {
            let az = if n == 1 { 0.0 } else { -45.0 + 90.0 * i as f64 / (n - 1) as f64 };
            let el = if i % 2 == 0 { 8.0 } else { -6.0 };
            Camera::orbit(Vec3::zeros(), az, el, 4.0, 0.66, resolution, resolution)
        })
        .collect()
}

/// Render a teacher at one expression.
pub fn render_teacher(
    model: &ParametricHeadModel,
    teacher: &Teacher,
    expression: &ExpressionInput,
    camera: &Camera,
    options: &RenderOptions,
) -> Result<(RgbImage, Vec<f64>)> {
    let mesh = model.deform(expression)?.neck_normalized(model, &expression.theta);
    let view = teacher.view(&mesh, &expression.psi);
    let out = render_image(&view, camera, options, None, 0.0)?;
    Ok((out.image, out.transmittance))
}

pub fn generate_synthetic_dataset(config: &DatasetConfig) -> Result<SyntheticDataset> {
    if config.cameras == 0 || config.expressions == 0 || config.resolution == 0 {
        return invalid("dataset needs cameras, expressions and a resolution");
    }
    let model = make_synthetic_model(config.seed, config.vertices, config.expression_dim)?;
    let model = with_anchor_count(model, config.anchors.min(config.vertices))?;
    let teacher = Teacher::new(&model, config.blobs, config.seed)?;
    let mut rng = ChaCha8Rng::seed_from_u64(config.seed ^ 0x5eed);
    let expressions: Vec<ExpressionInput> = (0..config.expressions)
        .map(|i| {
            let mut e = ExpressionInput::neutral(&model);
            if i > 0 {
                e.psi.iter_mut().for_each(|p| *p = rng.random_range(-1.5..1.5));
                e.theta[1] = rng.random_range(0.0..0.25);
                e.theta[2] = rng.random_range(-0.2..0.2);
                e.theta[3] = e.theta[2];
            }
            e.frame_id = Some(i);
            e
        })
        .collect();
    let cameras = capture_cameras(config.cameras, config.resolution)?;
    let heldout_cameras = vec![Camera::orbit(Vec3::zeros(), 12.0, 2.0, 4.0, 0.66, config.resolution, config.resolution)?];
    let render = RenderOptions::default();
    let mut targets = Vec::new();
    let mut masks = Vec::new();
    for cam in &cameras {
        for e in &expressions {
            let (img, tr) = render_teacher(&model, &teacher, e, cam, &render)?;
            targets.push(img);
            masks.push(tr.iter().map(|&t| t < 0.5).collect());
        }
    }
    Ok(SyntheticDataset {
        model,
        teacher,
        cameras,
        heldout_cameras,
        expressions,
        targets,
        masks,
        render,
    })
}

impl SyntheticDataset {
    pub fn image_count(&self) -> usize {
        self.targets.len()
    }

    /// `(camera, expression)` of a flat image index.
    pub fn image_source(&self, index: usize) -> (usize, usize) {
        (index / self.expressions.len(), index % self.expressions.len())
    }
}

/// One ray of a training batch with its frozen sample positions.
#[derive(Clone, Debug)]
pub struct BatchRay {
    pub ray: Ray,
    pub t: Vec<f64>,
    pub t_far: f64,
    pub target: [f64; 3],
}

/// Rays of one image in a batch.
#[derive(Clone, Debug)]
pub struct BatchImage {
    pub expression: usize,
    pub rays: Vec<BatchRay>,
    /// Samples whose warp Jacobians enter the elastic loss.
    pub elastic_points: Vec<Vec3>,
}

#[derive(Clone, Copy, Debug, Default, PartialEq)]
pub struct LossBreakdown {
    pub total: f64,
    pub rgb: f64,
    pub elastic: f64,
    pub mag: f64,
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct StepLog {
    pub step: u64,
    pub loss: LossBreakdown,
    pub lr: f64,
}

impl StepLog {
    pub fn csv_row(&self) -> String {
        format!(
            "{},{:.9e},{:.9e},{:.9e},{:.9e},{:.6e}",
            self.step, self.loss.total, self.loss.rgb, self.loss.elastic, self.loss.mag, self.lr
        )
    }
}

/// Everything that evolves during training.
#[derive(Clone, Debug)]
pub struct TrainState {
    pub avatar: Avatar,
    pub adam: Adam,
    pub step: u64,
    pub rng: ChaCha8Rng,
}

impl TrainState {
    pub fn new(avatar: Avatar, seed: u64) -> Self {
        let adam = Adam::new(&avatar);
        Self {
            avatar,
            adam,
            step: 0,
            rng: ChaCha8Rng::seed_from_u64(seed),
        }
    }
}

/// Fresh avatar sized for a dataset's model.
pub fn avatar_for(dataset: &SyntheticDataset, blendshapes: usize, seed: u64) -> Result<Avatar> {
    Avatar::new(dataset.model.clone(), AvatarConfig::desk(blendshapes, dataset.expressions.len()), seed)
}

fn gather_latents(avatar: &Avatar, expression: usize, n: usize) -> Array2<f64> {
    let row = avatar.latents.row(expression);
    Array2::from_shape_fn((n, row.len()), |(_, c)| row[c])
}

/// Warp points of one image when the warp is active.
fn warp_points(avatar: &Avatar, config: &TrainConfig, step: u64, expression: usize, points: &[Vec3]) -> Vec<Vec3> {
    if !config.warp_active(step) || points.is_empty() {
        return points.to_vec();
    }
    let lat = gather_latents(avatar, expression, points.len());
    let alpha = config.alpha_at(step, avatar.config.warp.bands);
    avatar.warp.forward(points, lat.view(), alpha, false).0
}

/// Draw a batch: random images and pixels, jittered coarse samples, and a
/// no-gradient coarse pass that places the fine samples.
pub fn sample_batch(
    avatar: &Avatar,
    frames: &HashMap<usize, Frame>,
    dataset: &SyntheticDataset,
    images: &[usize],
    config: &TrainConfig,
    step: u64,
    rng: &mut ChaCha8Rng,
) -> Result<Vec<BatchImage>> {
    let mut out = Vec::with_capacity(images.len());
    for &img in images {
        let (cam_i, expr) = dataset.image_source(img);
        let cam = &dataset.cameras[cam_i];
        let frame = &frames[&expr];
        let view = AvatarView {
            avatar,
            frame,
            knn: config.knn,
        };
        let bounds = view.bounds();
        let mut rays = Vec::with_capacity(config.rays_per_image);
        let mut coarse_pts = Vec::new();
        let mut coarse_dirs = Vec::new();
        while rays.len() < config.rays_per_image {
            let px = rng.random_range(0..cam.width * cam.height);
            let ray = cam.ray(px % cam.width, px / cam.width);
            let target = dataset.targets[img].data[px];
            let Some((t0, t1)) = bounds.intersect(&ray, cam.near, cam.far) else {
                rays.push(BatchRay {
                    ray,
                    t: Vec::new(),
                    t_far: cam.far,
                    target,
                });
                continue;
            };
            let t = coarse_samples(t0, t1, config.plan.n_coarse, Some(rng));
            for &tj in &t {
                coarse_pts.push(ray.at(tj));
                coarse_dirs.push(ray.dir);
            }
            rays.push(BatchRay { ray, t, t_far: t1, target });
        }
        if config.plan.n_fine > 0 && !coarse_pts.is_empty() {
            let warped = warp_points(avatar, config, step, expr, &coarse_pts);
            let coarse = view.eval(&warped, &coarse_dirs)?;
            let mut k = 0;
            for r in rays.iter_mut().filter(|r| !r.t.is_empty()) {
                let n = r.t.len();
                let d = deltas(&r.t, r.t_far);
                let comp = composite(&coarse.sigma[k..k + n], &coarse.color[k..k + n], &d, WHITE);
                k += n;
                let fine = importance_resample(&r.t, &d, &comp.weights, config.plan.n_fine, Some(rng));
                r.t = merge_samples(&r.t, &fine).0;
            }
        }
        let all: Vec<Vec3> = rays.iter().flat_map(|r| r.t.iter().map(|&t| r.ray.at(t))).collect();
        let elastic_points = if config.warp_active(step) && !all.is_empty() {
            (0..config.elastic_samples).map(|_| all[rng.random_range(0..all.len())]).collect()
        } else {
            Vec::new()
        };
        out.push(BatchImage {
            expression: expr,
            rays,
            elastic_points,
        });
    }
    Ok(out)
}

/// Loss of a batch with frozen sample positions and, when `grads` is given,
/// its gradient with respect to every parameter group. Losses are means
/// over rays (photometric) and points (elastic, magnitude).
pub fn batch_loss(
    avatar: &Avatar,
    frames: &HashMap<usize, Frame>,
    batch: &[BatchImage],
    config: &TrainConfig,
    step: u64,
    mut grads: Option<&mut ParamGrads>,
) -> Result<LossBreakdown> {
    let warmup = step < config.warmup_steps;
    let warp_on = config.warp_active(step);
    let alpha = config.alpha_at(step, avatar.config.warp.bands);
    let total_rays: usize = batch.iter().map(|b| b.rays.len()).sum();
    let total_points: usize = batch.iter().map(|b| b.rays.iter().map(|r| r.t.len()).sum::<usize>()).sum();
    let total_elastic: usize = batch.iter().map(|b| b.elastic_points.len()).sum();
    let mut loss = LossBreakdown::default();
    for image in batch {
        let frame = &frames[&image.expression];
        let points: Vec<Vec3> = image.rays.iter().flat_map(|r| r.t.iter().map(|&t| r.ray.at(t))).collect();
        let dirs: Vec<Vec3> = image.rays.iter().flat_map(|r| r.t.iter().map(|_| r.ray.dir)).collect();
        let lat = warp_on.then(|| gather_latents(avatar, image.expression, points.len()));
        let (warped, warp_cache) = match &lat {
            Some(lat) if !points.is_empty() => {
                let (w, _, c) = avatar.warp.forward(&points, lat.view(), alpha, false);
                (w, Some(c))
            }
            _ => (points.clone(), None),
        };
        let mut pred = Vec::with_capacity(image.rays.len());
        let mut comps = Vec::with_capacity(image.rays.len());
        let (field, cache) = if warped.is_empty() {
            (
                FieldOutput {
                    sigma: Vec::new(),
                    color: Vec::new(),
                },
                None,
            )
        } else {
            let knn = avatar.knn(frame, &warped, config.knn)?;
            let (o, c) = field_pass(avatar, frame, &warped, &dirs, &knn)?;
            (o, Some(c))
        };
        let mut k = 0;
        for r in &image.rays {
            let n = r.t.len();
            let d = deltas(&r.t, r.t_far);
            let comp = composite(&field.sigma[k..k + n], &field.color[k..k + n], &d, WHITE);
            pred.push(comp.color);
            comps.push((comp, d, k));
            k += n;
        }
        let targets: Vec<[f64; 3]> = image.rays.iter().map(|r| r.target).collect();
        let (rgb, d_pred) = photometric_loss(&pred, &targets, warmup)?;
        loss.rgb += rgb / total_rays as f64;
        let mag = if warp_on && !points.is_empty() {
            let (m, g) = magnitude_loss(&points, &warped)?;
            let share = points.len() as f64 / total_points as f64;
            loss.mag += m * share;
            Some(g.into_iter().map(|v| v * share * config.lambda_mag).collect::<Vec<_>>())
        } else {
            None
        };
        let mut elastic_grad = None;
        if warp_on && !image.elastic_points.is_empty() {
            let lat_e = gather_latents(avatar, image.expression, image.elastic_points.len());
            let (_, jac, cache_e) = avatar.warp.forward(&image.elastic_points, lat_e.view(), alpha, true);
            let (e, g) = elastic_loss(&jac.unwrap())?;
            let share = image.elastic_points.len() as f64 / total_elastic as f64;
            loss.elastic += e * share;
            elastic_grad = Some((cache_e, g.into_iter().map(|m| m * share * config.lambda_elastic_at(step)).collect::<Vec<_>>()));
        }
        let Some(grads) = grads.as_deref_mut() else {
            continue;
        };
        let mut d_sigma = vec![0.0; warped.len()];
        let mut d_color = vec![[0.0; 3]; warped.len()];
        for (i, (r, (comp, d, k))) in image.rays.iter().zip(&comps).enumerate() {
            let n = r.t.len();
            let g = d_pred[i].map(|v| v / total_rays as f64);
            let (ds, dc) = composite_backward(&field.sigma[*k..*k + n], &field.color[*k..*k + n], d, comp, WHITE, g);
            d_sigma[*k..*k + n].copy_from_slice(&ds);
            d_color[*k..*k + n].copy_from_slice(&dc);
        }
        if let Some(cache) = cache {
            let (fg, dq) = field_pass_backward(avatar, frame, &cache, &d_sigma, &d_color, warp_cache.is_some());
            avatar.frame_backward(frame, &fg, grads)?;
            if let (Some(wc), Some(mut dq)) = (warp_cache, dq) {
                if let Some(m) = &mag {
                    for (a, b) in dq.iter_mut().zip(m) {
                        *a += b;
                    }
                }
                let mut wg = WarpGrads::zeros(&avatar.warp);
                let dlat = avatar.warp.backward(&wc, &dq, None, &mut wg);
                add_warp_grads(grads, &wg, &dlat, image.expression);
            }
        }
        if let Some((cache_e, gj)) = elastic_grad {
            let zero = vec![Vec3::zeros(); gj.len()];
            let mut wg = WarpGrads::zeros(&avatar.warp);
            let dlat = avatar.warp.backward(&cache_e, &zero, Some(&gj), &mut wg);
            add_warp_grads(grads, &wg, &dlat, image.expression);
        }
    }
    loss.total = loss.rgb + config.lambda_elastic_at(step) * loss.elastic + config.lambda_mag * loss.mag;
    Ok(loss)
}

fn add_warp_grads(grads: &mut ParamGrads, wg: &WarpGrads, dlat: &Array2<f64>, expression: usize) {
    for (g, d) in grads.get_mut(Group::WarpBackbone).iter_mut().zip(&wg.backbone) {
        *g += d;
    }
    for (h, group) in [Group::WarpRotation, Group::WarpCenter, Group::WarpTranslation].into_iter().enumerate() {
        for (g, d) in grads.get_mut(group).iter_mut().zip(&wg.heads[h]) {
            *g += d;
        }
    }
    let dim = dlat.ncols();
    let lat = grads.get_mut(Group::Latents);
    for row in dlat.rows() {
        for (c, v) in row.iter().enumerate() {
            lat[expression * dim + c] += v;
        }
    }
}

/// Prepare (with caches) the frames of the given expressions.
pub fn prepare_frames(avatar: &Avatar, dataset: &SyntheticDataset, expressions: impl IntoIterator<Item = usize>) -> Result<HashMap<usize, Frame>> {
    let mut frames = HashMap::new();
    for e in expressions {
        if let std::collections::hash_map::Entry::Vacant(v) = frames.entry(e) {
            v.insert(avatar.prepare(&dataset.expressions[e], true)?);
        }
    }
    Ok(frames)
}

/// Distinct views of one random expression, so a step prepares one frame.
pub fn draw_images(dataset: &SyntheticDataset, count: usize, rng: &mut ChaCha8Rng) -> Vec<usize> {
    let n_expr = dataset.expressions.len();
    let expr = rng.random_range(0..n_expr);
    let cams = rand::seq::index::sample(rng, dataset.cameras.len(), count.min(dataset.cameras.len()));
    cams.into_iter().map(|c| c * n_expr + expr).collect()
}

/// One optimisation step. Returns the loss breakdown before the update.
pub fn train_step(state: &mut TrainState, config: &TrainConfig, dataset: &SyntheticDataset) -> Result<StepLog> {
    let step = state.step;
    let images = draw_images(dataset, config.images_per_batch, &mut state.rng);
    let frames = prepare_frames(&state.avatar, dataset, images.iter().map(|&i| dataset.image_source(i).1))?;
    let batch = sample_batch(&state.avatar, &frames, dataset, &images, config, step, &mut state.rng)?;
    let mut grads = ParamGrads::zeros(&state.avatar);
    let loss = batch_loss(&state.avatar, &frames, &batch, config, step, Some(&mut grads))?;
    if !loss.total.is_finite() {
        return Err(Error::NonFinite {
            group: "loss".into(),
            step,
        });
    }
    for g in Group::ALL {
        if grads.get(g).iter().any(|v| !v.is_finite()) {
            return Err(Error::NonFinite {
                group: g.name().into(),
                step,
            });
        }
    }
    let warp_on = config.warp_active(step);
    for g in Group::ALL {
        if g.is_warp() && !warp_on {
            continue;
        }
        let lr = config.lr_at(step, g.is_warp());
        let i = g.index();
        state
            .adam
            .update(i, state.avatar.param_mut(g), grads.get(g), lr, config.beta1, config.beta2, config.adam_eps);
    }
    state.step += 1;
    Ok(StepLog {
        step,
        loss,
        lr: config.lr_at(step, false),
    })
}

/// Train for `steps` steps, calling `log` after each.
pub fn train(state: &mut TrainState, config: &TrainConfig, dataset: &SyntheticDataset, steps: u64, mut log: impl FnMut(&StepLog)) -> Result<Vec<StepLog>> {
    config.validate()?;
    let mut out = Vec::with_capacity(steps as usize);
    for _ in 0..steps {
        let entry = train_step(state, config, dataset)?;
        log(&entry);
        out.push(entry);
    }
    Ok(out)
}

/// Masked held-out quality of an avatar: renders every held-out camera at
/// every training expression and compares to the teacher.
pub struct HeldoutReport {
    pub psnr: f64,
    pub ssim: f64,
    pub ms: f64,
}

pub fn evaluate_heldout(avatar: &Avatar, dataset: &SyntheticDataset, knn: KnnMode) -> Result<HeldoutReport> {
    let start = Instant::now();
    let mut psnr = 0.0;
    let mut ssim = 0.0;
    let mut n = 0.0;
    for cam in &dataset.heldout_cameras {
        for e in &dataset.expressions {
            let (target, tr) = render_teacher(&dataset.model, &dataset.teacher, e, cam, &dataset.render)?;
            let out = render_avatar(avatar, e, cam, &dataset.render, knn, None)?;
            let mask = crate::metrics_io::evaluation_mask(&tr.iter().map(|&t| t < 0.5).collect::<Vec<_>>(), cam.width, cam.height);
            psnr += crate::metrics_io::masked_psnr(&out.image, &target, &mask)?;
            ssim += crate::metrics_io::masked_ssim(&out.image, &target, &mask)?;
            n += 1.0;
        }
    }
    Ok(HeldoutReport {
        psnr: psnr / n,
        ssim: ssim / n,
        ms: start.elapsed().as_secs_f64() * 1e3,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;
    use rand::Rng;

    fn fd<F: FnMut(f64) -> f64>(mut f: F, h: f64) -> f64 {
        (f(h) - f(-h)) / (2.0 * h)
    }

    fn rel(a: f64, b: f64, floor: f64) -> f64 {
        (a - b).abs() / a.abs().max(b.abs()).max(floor)
    }

    #[test]
    fn photometric_examples() {
        let (l, g) = photometric_loss(&[[0.5, 0.5, 0.5]], &[[0.0; 3]], true).unwrap();
        assert!((l - 0.75).abs() < 1e-15);
        assert_eq!(g[0], [1.0; 3]);
        let (l, _) = photometric_loss(&[[0.5, 0.5, 0.5]], &[[0.0; 3]], false).unwrap();
        assert!((l - (0.75f64 + 1e-8).sqrt()).abs() < 1e-15);
        let (l, g) = photometric_loss(&[[0.2; 3]], &[[0.2; 3]], false).unwrap();
        assert!((l - 1e-4).abs() < 1e-12);
        assert_eq!(g[0], [0.0; 3]);
        assert!(photometric_loss(&[[0.0; 3]], &[], true).is_err());
    }

    #[test]
    fn photometric_gradients_match_finite_differences() {
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let pred: Vec<[f64; 3]> = (0..5).map(|_| [0, 1, 2].map(|_| rng.random())).collect();
        let target: Vec<[f64; 3]> = (0..5).map(|_| [0, 1, 2].map(|_| rng.random())).collect();
        for warmup in [true, false] {
            let (_, g) = photometric_loss(&pred, &target, warmup).unwrap();
            for i in 0..5 {
                for c in 0..3 {
                    let n = fd(
                        |h| {
                            let mut p = pred.clone();
                            p[i][c] += h;
                            photometric_loss(&p, &target, warmup).unwrap().0
                        },
                        1e-6,
                    );
                    assert!(rel(g[i][c], n, 1e-8) < 1e-4, "{warmup} {i} {c}: {} vs {n}", g[i][c]);
                }
            }
        }
    }

    #[test]
    fn elastic_examples() {
        let (l, g) = elastic_loss(&[Mat3::identity()]).unwrap();
        assert_eq!(l, 0.0);
        assert!(g[0].norm() < 1e-15);
        let r = nalgebra::Rotation3::from_euler_angles(0.3, -0.2, 0.5).into_inner();
        assert!(elastic_loss(&[r]).unwrap().0 < 1e-20);
        let j = Mat3::from_diagonal(&Vec3::new(2.0, 1.0, 1.0));
        let (l, _) = elastic_loss(&[j, Mat3::identity()]).unwrap();
        assert!((l - 2f64.ln().powi(2) / 2.0).abs() < 1e-14);
        let mut bad = Mat3::identity();
        bad[(1, 2)] = f64::NAN;
        assert!(matches!(elastic_loss(&[bad]), Err(Error::InvalidInput(_))));
        assert!(elastic_loss(&[Mat3::zeros()]).unwrap().0.is_finite());
    }

    #[test]
    fn elastic_gradient_matches_finite_differences() {
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        let js: Vec<Mat3> = (0..4)
            .map(|_| Mat3::identity() + Mat3::from_fn(|_, _| rng.random_range(-0.4..0.4)))
            .collect();
        let (_, g) = elastic_loss(&js).unwrap();
        for p in 0..4 {
            for r in 0..3 {
                for c in 0..3 {
                    let n = fd(
                        |h| {
                            let mut m = js.clone();
                            m[p][(r, c)] += h;
                            elastic_loss(&m).unwrap().0
                        },
                        1e-6,
                    );
                    assert!(rel(g[p][(r, c)], n, 1e-8) < 1e-4, "{p} {r} {c}: {} vs {n}", g[p][(r, c)]);
                }
            }
        }
    }

    #[test]
    fn magnitude_loss_and_gradient() {
        let q = vec![Vec3::zeros(), Vec3::new(1.0, 0.0, 0.0)];
        let w = vec![Vec3::new(0.0, 0.3, 0.4), Vec3::new(1.0, 0.0, 0.0)];
        let (l, g) = magnitude_loss(&q, &w).unwrap();
        assert!((l - 0.125).abs() < 1e-15);
        assert!((g[0] - Vec3::new(0.0, 0.3, 0.4)).norm() < 1e-15);
        for c in 0..3 {
            let n = fd(
                |h| {
                    let mut m = w.clone();
                    m[0][c] += h;
                    magnitude_loss(&q, &m).unwrap().0
                },
                1e-6,
            );
            assert!(rel(g[0][c], n, 1e-8) < 1e-4);
        }
        assert!(magnitude_loss(&q, &w[..1]).is_err());
    }

    #[test]
    fn schedules() {
        let p = TrainConfig::full();
        let d = TrainConfig::desk();
        assert_eq!((p.elastic_decay_step, p.warmup_steps, p.warp_start, p.total_steps), (150_000, 10_000, 5_000, 400_000));
        assert_eq!(p.alpha_steps, 80_000);
        assert_eq!((p.rays_per_image, p.images_per_batch), (256, 8));
        assert_eq!((d.elastic_decay_step, d.warmup_steps, d.warp_start, d.total_steps, d.alpha_steps), (1500, 100, 50, 4000, 800));
        assert_eq!(p.lr_at(0, false), 5e-4);
        assert!((p.lr_at(400_000, false) - 5e-5).abs() < 1e-18);
        assert!((p.lr_at(800_000, true) - 1e-5).abs() < 1e-18);
        assert!((p.lr_at(200_000, false) - (5e-4f64 * 5e-5).sqrt()).abs() < 1e-15);
        assert_eq!(p.lambda_elastic_at(149_999), 1e-4);
        assert_eq!(p.lambda_elastic_at(150_000), 1e-5);
        assert_eq!(p.alpha_at(0, 6), 0.0);
        assert_eq!(p.alpha_at(40_000, 6), 3.0);
        assert_eq!(p.alpha_at(1_000_000, 6), 6.0);
        assert!(!p.warp_active(4_999) && p.warp_active(5_000));
        assert!(p.validate().is_ok() && d.validate().is_ok());
        assert!(TrainConfig { total_steps: 0, ..d.clone() }.validate().is_err());
        assert!(TrainConfig { lambda_mag: -1.0, ..d }.validate().is_err());
    }

    #[test]
    fn adam_first_step_moves_by_lr() {
        let ds = generate_synthetic_dataset(&DatasetConfig::tiny(1)).unwrap();
        let avatar = Avatar::new(ds.model.clone(), AvatarConfig::tiny(2, 2), 1).unwrap();
        let mut adam = Adam::new(&avatar);
        let mut p = vec![1.0, 2.0, 3.0];
        adam.m[0] = vec![0.0; 3];
        adam.v[0] = vec![0.0; 3];
        adam.update(0, &mut p, &[0.5, -2.0, 0.0], 0.1, 0.9, 0.999, 1e-8);
        assert!((p[0] - 0.9).abs() < 1e-6 && (p[1] - 2.1).abs() < 1e-6 && p[2] == 3.0);
        assert_eq!(adam.t[0], 1);
        assert_eq!(adam.t[1], 0);
    }

    proptest! {
        #[test]
        fn exp_decay_stays_between_endpoints(a in 1e-6f64..1.0, b in 1e-6f64..1.0, s in 0u64..2000) {
            let v = exp_decay(a, b, s, 1000);
            prop_assert!(v >= a.min(b) * (1.0 - 1e-12) && v <= a.max(b) * (1.0 + 1e-12));
        }

        #[test]
        fn elastic_is_zero_on_rotations(x in -3.0f64..3.0, y in -3.0f64..3.0, z in -3.0f64..3.0) {
            let r = nalgebra::Rotation3::from_euler_angles(x, y, z).into_inner();
            prop_assert!(elastic_loss(&[r]).unwrap().0 < 1e-18);
        }
    }

    fn tiny_setup(seed: u64) -> (SyntheticDataset, Avatar, TrainConfig) {
        let ds = generate_synthetic_dataset(&DatasetConfig::tiny(seed)).unwrap();
        let avatar = Avatar::new(ds.model.clone(), AvatarConfig::tiny(3, 2), seed).unwrap();
        let config = TrainConfig {
            rays_per_image: 4,
            images_per_batch: 1,
            plan: SamplingPlan {
                n_coarse: 6,
                n_fine: 6,
                jitter: true,
            },
            elastic_samples: 3,
            knn: KnnMode::Exact,
            ..TrainConfig::desk()
        };
        (ds, avatar, config)
    }

    /// Total loss with frames rebuilt from the (perturbed) avatar.
    fn loss_of(avatar: &Avatar, ds: &SyntheticDataset, batch: &[BatchImage], config: &TrainConfig, step: u64) -> LossBreakdown {
        let frames = prepare_frames(avatar, ds, batch.iter().map(|b| b.expression)).unwrap();
        batch_loss(avatar, &frames, batch, config, step, None).unwrap()
    }

    fn batch_for(avatar: &Avatar, ds: &SyntheticDataset, config: &TrainConfig, step: u64, image: usize, rays: usize) -> Vec<BatchImage> {
        let mut rng = ChaCha8Rng::seed_from_u64(9);
        let frames = prepare_frames(avatar, ds, [ds.image_source(image).1]).unwrap();
        let mut batch = sample_batch(avatar, &frames, ds, &[image], config, step, &mut rng).unwrap();
        for b in &mut batch {
            b.rays.retain(|r| !r.t.is_empty());
            b.rays.truncate(rays);
        }
        batch
    }

    fn randomize_warp(avatar: &mut Avatar, seed: u64) {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        for g in Group::ALL.into_iter().filter(|g| g.is_warp() || *g == Group::Latents) {
            avatar.param_mut(g).iter_mut().for_each(|v| *v += rng.random_range(-0.1..0.1));
        }
    }

    #[test]
    fn end_to_end_one_ray_gradients_match_finite_differences() {
        let (ds, mut avatar, config) = tiny_setup(2);
        randomize_warp(&mut avatar, 4);
        for step in [20, 150] {
            let batch = batch_for(&avatar, &ds, &config, step, 1, 1);
            assert_eq!(batch[0].rays.len(), 1);
            let frames = prepare_frames(&avatar, &ds, [batch[0].expression]).unwrap();
            let mut grads = ParamGrads::zeros(&avatar);
            batch_loss(&avatar, &frames, &batch, &config, step, Some(&mut grads)).unwrap();
            let mut skipped = 0;
            let mut checked = 0;
            for g in Group::ALL {
                let an = grads.get(g);
                let mut order: Vec<usize> = (0..an.len()).collect();
                order.sort_by(|&a, &b| an[b].abs().total_cmp(&an[a].abs()));
                let scale = an.iter().fold(0.0f64, |m, v| m.max(v.abs()));
                if g.is_warp() && step < config.warp_start {
                    assert_eq!(scale, 0.0, "{} before warp start", g.name());
                    continue;
                }
                assert!(scale > 0.0, "group {} has no gradient at step {step}", g.name());
                for &i in order.iter().take(4) {
                    let eval = |h: f64| {
                        let mut a = avatar.clone();
                        a.param_mut(g)[i] += h;
                        loss_of(&a, &ds, &batch, &config, step).total
                    };
                    let h = 1e-6;
                    let (lp, l0, lm) = (eval(h), eval(0.0), eval(-h));
                    let num = (lp - lm) / (2.0 * h);
                    let e = rel(an[i], num, 1e-6 * scale.max(1e-9));
                    if e > 1e-3 {
                        let (fwd, bwd) = ((lp - l0) / h, (l0 - lm) / h);
                        assert!(rel(fwd, bwd, 1e-6 * scale) > 1e-2, "{} [{i}] step {step}: {} vs {num}", g.name(), an[i]);
                        skipped += 1;
                    }
                    checked += 1;
                }
            }
            assert!(skipped * 10 <= checked, "{skipped} of {checked} probes sat on kinks");
        }
    }

    #[test]
    fn total_gradient_is_linear_in_loss_weights() {
        let (ds, mut avatar, config) = tiny_setup(3);
        randomize_warp(&mut avatar, 8);
        let step = 120;
        let batch = batch_for(&avatar, &ds, &config, step, 2, 3);
        let frames = prepare_frames(&avatar, &ds, [batch[0].expression]).unwrap();
        let grad = |le: f64, lm: f64| {
            let c = TrainConfig {
                lambda_elastic: le,
                lambda_elastic_late: le,
                lambda_mag: lm,
                ..config.clone()
            };
            let mut g = ParamGrads::zeros(&avatar);
            let l = batch_loss(&avatar, &frames, &batch, &c, step, Some(&mut g)).unwrap();
            (l, g)
        };
        let (l0, g0) = grad(0.0, 0.0);
        let (le, ge) = grad(0.3, 0.0);
        let (lm, gm) = grad(0.0, 0.7);
        let (lt, gt) = grad(0.3, 0.7);
        assert!((lt.total - (l0.rgb + 0.3 * le.elastic + 0.7 * lm.mag)).abs() < 1e-12);
        assert!(le.elastic > 0.0 && lm.mag > 0.0);
        for k in 0..gt.groups.len() {
            for i in 0..gt.groups[k].len() {
                let want = ge.groups[k][i] + gm.groups[k][i] - g0.groups[k][i];
                assert!((gt.groups[k][i] - want).abs() <= 1e-12 * (1.0 + want.abs()));
            }
        }
    }

    #[test]
    fn zero_learning_rate_leaves_parameters_unchanged() {
        let (ds, avatar, config) = tiny_setup(4);
        let config = TrainConfig {
            lr: (0.0, 0.0),
            lr_warp: (0.0, 0.0),
            ..config
        };
        let mut state = TrainState::new(avatar.clone(), 1);
        state.step = 200;
        let log = train_step(&mut state, &config, &ds).unwrap();
        assert!(log.loss.total.is_finite() && log.loss.total > 0.0);
        assert_eq!(log.lr, 0.0);
        assert_eq!(state.step, 201);
        for g in Group::ALL {
            assert_eq!(state.avatar.param(g), avatar.param(g), "{}", g.name());
        }
    }

    #[test]
    fn warp_is_frozen_before_its_start_step() {
        let (ds, avatar, config) = tiny_setup(5);
        let mut state = TrainState::new(avatar.clone(), 2);
        for _ in 0..3 {
            train_step(&mut state, &config, &ds).unwrap();
        }
        for g in Group::ALL {
            let same = state.avatar.param(g) == avatar.param(g);
            assert_eq!(same, g.is_warp(), "{}", g.name());
        }
        let csv = StepLog {
            step: 3,
            loss: LossBreakdown::default(),
            lr: 1e-4,
        }
        .csv_row();
        assert_eq!(csv.split(',').count(), TRAIN_LOG_HEADER.split(',').count());
    }

    #[test]
    fn constant_color_target_is_fitted() {
        let (mut ds, avatar, _) = tiny_setup(6);
        let color = [0.3, 0.55, 0.45];
        ds.cameras = vec![Camera::orbit(Vec3::zeros(), 0.0, 0.0, 4.0, 0.2, 8, 8).unwrap()];
        ds.targets = (0..ds.expressions.len()).map(|_| RgbImage::filled(8, 8, color)).collect();
        let config = TrainConfig {
            use_warp: false,
            lambda_elastic: 0.0,
            lambda_elastic_late: 0.0,
            lambda_mag: 0.0,
            warmup_steps: 10_000,
            lr: (5e-4, 5e-4),
            rays_per_image: 16,
            plan: SamplingPlan {
                n_coarse: 8,
                n_fine: 0,
                jitter: true,
            },
            ..TrainConfig::desk()
        };
        let mut state = TrainState::new(avatar, 3);
        let logs = train(&mut state, &config, &ds, 2000, |_| {}).unwrap();
        let tail: f64 = logs[1990..].iter().map(|l| l.loss.rgb).sum::<f64>() / 10.0;
        assert!(tail < 1e-4, "final rgb loss {tail}");
    }

    #[test]
    fn dataset_is_deterministic_and_self_consistent() {
        let a = generate_synthetic_dataset(&DatasetConfig::tiny(11)).unwrap();
        let b = generate_synthetic_dataset(&DatasetConfig::tiny(11)).unwrap();
        assert_eq!(a.targets, b.targets);
        assert_eq!(a.masks, b.masks);
        let c = generate_synthetic_dataset(&DatasetConfig::tiny(12)).unwrap();
        assert_ne!(a.targets, c.targets);
        for img in 0..a.image_count() {
            let (cam, e) = a.image_source(img);
            let (again, tr) = render_teacher(&a.model, &a.teacher, &a.expressions[e], &a.cameras[cam], &a.render).unwrap();
            assert_eq!(again, a.targets[img]);
            let mask: Vec<bool> = tr.iter().map(|&t| t < 0.5).collect();
            assert_eq!(mask, a.masks[img]);
        }
        let fg = a.masks.iter().flatten().filter(|&&m| m).count();
        assert!(fg > 0 && fg < a.masks.iter().flatten().count());
        assert!(generate_synthetic_dataset(&DatasetConfig { cameras: 0, ..DatasetConfig::tiny(1) }).is_err());
    }

    #[test]
    fn teacher_colours_follow_expressions() {
        let ds = generate_synthetic_dataset(&DatasetConfig::tiny(13)).unwrap();
        let b = &ds.teacher.blobs[0];
        let neutral = ds.teacher.blob_color(b, &vec![0.0; ds.model.expression_dim()]);
        assert_eq!(neutral, b.color.map(|c| c.clamp(0.0, 1.0)));
        let moved = ds.teacher.blob_color(b, &vec![1.0; ds.model.expression_dim()]);
        assert_ne!(neutral, moved);
        let view = ds.teacher.view(&ds.model.deform(&ds.expressions[0]).unwrap(), &ds.expressions[0].psi);
        let (s, _) = view.sample(&Vec3::new(10.0, 10.0, 10.0));
        assert_eq!(s, 0.0);
        let (s, c) = view.sample(&ds.model.neutral_positions[b.vertex]);
        assert!(s > 0.0 && c.iter().all(|v| (0.0..=1.0).contains(v)));
    }
}
