//! The learnable avatar: UV network, per-anchor hash blendshapes, per-anchor
//! features, decoder MLP, warp field and per-frame latents, plus the
//! per-expression preprocessing shared by every ray of a frame.

use ndarray::Array2;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use crate::error::{invalid, Result};
use crate::hash_blendshapes::{HashConfig, MergedTables, VertexHashBlendshapes};
use crate::knn_search::{KnnMode, KnnResult};
use crate::param_mesh::{DeformedMesh, ExpressionInput, ParametricHeadModel, TangentFrame, UVImage, UvRaster, UvSampler};
use crate::radiance_field::{field_backward, field_forward, FieldConfig, FieldGrads, FieldInputs, FieldOutput, TinyMlp, WarpConfig, WarpField};
use crate::uv_net::{UVNetCache, UVNetConfig, UVNetParams};
use crate::Vec3;

/// Displacements fed to the UV network are divided by this fraction of the head radius.
pub const DISPLACEMENT_SCALE: f64 = 0.05;

#[derive(Clone, Debug, PartialEq)]
pub struct AvatarConfig {
    pub uvnet: UVNetConfig,
    pub field: FieldConfig,
    pub warp: WarpConfig,
    /// Number of training frames, one warp latent each.
    pub frames: usize,
    pub table_init: f64,
    pub feature_init: f64,
}

impl AvatarConfig {
    pub fn desk(blendshapes: usize, frames: usize) -> Self {
        Self {
            uvnet: UVNetConfig::desk(blendshapes),
            field: FieldConfig::default(),
            warp: WarpConfig::desk(),
            frames,
            table_init: 1e-2,
            feature_init: 0.1,
        }
    }

    pub fn full(blendshapes: usize, frames: usize) -> Self {
        Self {
            uvnet: UVNetConfig::full(blendshapes),
            warp: WarpConfig::full(),
            ..Self::desk(blendshapes, frames)
        }
    }

    /// Very small networks for tests and quick experiments.
    pub fn tiny(blendshapes: usize, frames: usize) -> Self {
        let features = 8;
        Self {
            uvnet: UVNetConfig {
                input_res: 16,
                encoder: vec![4, 8],
                decoder: vec![8, 8],
                blendshapes,
                features,
            },
            field: FieldConfig {
                features,
                pos_bands: 4,
                dir_bands: 2,
                hidden: 16,
                hidden_layers: 1,
                ..FieldConfig::default()
            },
            warp: WarpConfig {
                width: 16,
                depth: 1,
                head_width: 8,
                bands: 3,
                latent_dim: 4,
            },
            frames,
            table_init: 1e-2,
            feature_init: 0.1,
        }
    }

    pub fn blendshapes(&self) -> usize {
        self.uvnet.blendshapes
    }

    pub fn hash(&self) -> HashConfig {
        self.field.hash
    }

    pub fn validate(&self) -> Result<()> {
        self.uvnet.validate()?;
        self.field.hash.validate()?;
        if self.uvnet.features != self.field.features {
            return invalid("uv network and field disagree on the feature width");
        }
        if self.field.k == 0 {
            return invalid("field needs at least one neighbour");
        }
        Ok(())
    }
}

/// Learnable parameter groups, in checkpoint order.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub enum Group {
    UvNet,
    Tables,
    Features,
    Mlp,
    WarpBackbone,
    WarpRotation,
    WarpCenter,
    WarpTranslation,
    Latents,
}

impl Group {
    pub const ALL: [Group; 9] = [
        Group::UvNet,
        Group::Tables,
        Group::Features,
        Group::Mlp,
        Group::WarpBackbone,
        Group::WarpRotation,
        Group::WarpCenter,
        Group::WarpTranslation,
        Group::Latents,
    ];

    pub fn name(self) -> &'static str {
        match self {
            Group::UvNet => "uvnet",
            Group::Tables => "hash_tables",
            Group::Features => "vertex_features",
            Group::Mlp => "tiny_mlp",
            Group::WarpBackbone => "warp_backbone",
            Group::WarpRotation => "warp_rotation",
            Group::WarpCenter => "warp_center",
            Group::WarpTranslation => "warp_translation",
            Group::Latents => "frame_latents",
        }
    }

    pub fn is_warp(self) -> bool {
        matches!(
            self,
            Group::WarpBackbone | Group::WarpRotation | Group::WarpCenter | Group::WarpTranslation | Group::Latents
        )
    }

    pub fn index(self) -> usize {
        Group::ALL.iter().position(|g| *g == self).unwrap()
    }
}

#[derive(Clone, Debug)]
pub struct Avatar {
    pub model: ParametricHeadModel,
    pub config: AvatarConfig,
    pub uvnet: UVNetParams,
    pub tables: VertexHashBlendshapes,
    /// Static per-anchor features, added to the UV-network features.
    pub features: Vec<f64>,
    pub tiny: TinyMlp,
    pub warp: WarpField,
    /// `frames × latent_dim`.
    pub latents: Array2<f64>,
    raster: UvRaster,
    sampler: UvSampler,
}

/// Everything one expression contributes before rays are cast.
#[derive(Clone, Debug)]
pub struct Frame {
    pub mesh: DeformedMesh,
    pub anchor_frames: Vec<TangentFrame>,
    pub anchor_positions: Vec<Vec3>,
    /// `anchors × M` blend weights, first column 1.
    pub weights: Vec<f64>,
    pub merged: MergedTables,
    /// `anchors × features`.
    pub features: Vec<f64>,
    cache: Option<UVNetCache>,
}

impl Frame {
    pub fn inputs(&self) -> FieldInputs<'_> {
        FieldInputs {
            frames: &self.anchor_frames,
            merged: &self.merged,
            features: &self.features,
        }
    }
}

/// One gradient buffer per [`Group`].
#[derive(Clone, Debug, PartialEq)]
pub struct ParamGrads {
    pub groups: Vec<Vec<f64>>,
}

impl ParamGrads {
    pub fn zeros(avatar: &Avatar) -> Self {
        Self {
            groups: Group::ALL.iter().map(|&g| vec![0.0; avatar.param(g).len()]).collect(),
        }
    }

    pub fn get(&self, g: Group) -> &[f64] {
        &self.groups[g.index()]
    }

    pub fn get_mut(&mut self, g: Group) -> &mut [f64] {
        &mut self.groups[g.index()]
    }

    pub fn add_assign(&mut self, other: &ParamGrads) {
        for (a, b) in self.groups.iter_mut().zip(&other.groups) {
            for (x, y) in a.iter_mut().zip(b) {
                *x += y;
            }
        }
    }

    pub fn scale(&mut self, k: f64) {
        self.groups.iter_mut().flatten().for_each(|v| *v *= k);
    }
}

impl Avatar {
    pub fn new(model: ParametricHeadModel, config: AvatarConfig, seed: u64) -> Result<Self> {
        config.validate()?;
        model.validate()?;
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let anchors = model.anchor_count();
        let extents = model.anchor_extents();
        let uvnet = UVNetParams::random(config.uvnet.clone(), &mut rng)?;
        let tables = VertexHashBlendshapes::random(config.hash(), config.blendshapes(), extents, config.table_init, &mut rng);
        let features = (0..anchors * config.field.features)
            .map(|_| rand::Rng::random_range(&mut rng, -config.feature_init..config.feature_init))
            .collect();
        let tiny = TinyMlp::random(config.field, &mut rng);
        let warp = WarpField::new(config.warp, &mut rng);
        let latents = Array2::zeros((config.frames, config.warp.latent_dim));
        Ok(Self::assemble(model, config, uvnet, tables, features, tiny, warp, latents))
    }

    #[allow(clippy::too_many_arguments)]
    pub(crate) fn assemble(
        model: ParametricHeadModel,
        config: AvatarConfig,
        uvnet: UVNetParams,
        tables: VertexHashBlendshapes,
        features: Vec<f64>,
        tiny: TinyMlp,
        warp: WarpField,
        latents: Array2<f64>,
    ) -> Self {
        let r = config.uvnet.input_res;
        let raster = UvRaster::new(&model.uv_coords, &model.triangles, r, r);
        let anchor_uv: Vec<[f64; 2]> = model.anchor_indices.iter().map(|&i| model.uv_coords[i]).collect();
        let sampler = UvSampler::new(&anchor_uv, r, r);
        Self {
            model,
            config,
            uvnet,
            tables,
            features,
            tiny,
            warp,
            latents,
            raster,
            sampler,
        }
    }

    pub fn anchors(&self) -> usize {
        self.model.anchor_count()
    }

    pub fn param(&self, g: Group) -> &[f64] {
        match g {
            Group::UvNet => &self.uvnet.params,
            Group::Tables => &self.tables.data,
            Group::Features => &self.features,
            Group::Mlp => &self.tiny.mlp.params,
            Group::WarpBackbone => &self.warp.backbone.params,
            Group::WarpRotation => &self.warp.heads[0].params,
            Group::WarpCenter => &self.warp.heads[1].params,
            Group::WarpTranslation => &self.warp.heads[2].params,
            Group::Latents => self.latents.as_slice().unwrap(),
        }
    }

    pub fn param_mut(&mut self, g: Group) -> &mut [f64] {
        match g {
            Group::UvNet => &mut self.uvnet.params,
            Group::Tables => &mut self.tables.data,
            Group::Features => &mut self.features,
            Group::Mlp => &mut self.tiny.mlp.params,
            Group::WarpBackbone => &mut self.warp.backbone.params,
            Group::WarpRotation => &mut self.warp.heads[0].params,
            Group::WarpCenter => &mut self.warp.heads[1].params,
            Group::WarpTranslation => &mut self.warp.heads[2].params,
            Group::Latents => self.latents.as_slice_mut().unwrap(),
        }
    }

    pub fn param_count(&self) -> usize {
        Group::ALL.iter().map(|&g| self.param(g).len()).sum()
    }

    /// Rasterised, scaled displacement image fed to the UV network.
    pub fn displacement_image(&self, mesh: &DeformedMesh) -> UVImage {
        let mut img = self.raster.rasterize_vectors(&mesh.displacements);
        let s = 1.0 / (DISPLACEMENT_SCALE * self.model.radius);
        img.data.iter_mut().for_each(|v| *v *= s);
        img
    }

    /// Deform the mesh, run the UV network and merge every anchor's tables.
    pub fn prepare(&self, input: &ExpressionInput, keep_cache: bool) -> Result<Frame> {
        let mesh = self.model.deform(input)?.neck_normalized(&self.model, &input.theta);
        let (out, cache) = self.uvnet.forward(&self.displacement_image(&mesh))?;
        let weights = self.sampler.sample(&out.weights_map);
        let mut features = self.sampler.sample(&out.feature_map);
        for (f, s) in features.iter_mut().zip(&self.features) {
            *f += s;
        }
        let merged = self.tables.merge_all(&weights)?;
        let anchor_frames: Vec<TangentFrame> = self.model.anchor_indices.iter().map(|&i| mesh.frames[i]).collect();
        let anchor_positions = anchor_frames.iter().map(|f| f.origin).collect();
        Ok(Frame {
            mesh,
            anchor_frames,
            anchor_positions,
            weights,
            merged,
            features,
            cache: keep_cache.then_some(cache),
        })
    }

    pub fn knn(&self, frame: &Frame, points: &[Vec3], mode: KnnMode) -> Result<KnnResult> {
        mode.search(points, &frame.anchor_positions, self.config.field.k)
    }

    /// Inference-time field query (no warp).
    pub fn query(&self, frame: &Frame, points: &[Vec3], dirs: &[Vec3], mode: KnnMode) -> Result<FieldOutput> {
        let knn = self.knn(frame, points, mode)?;
        Ok(field_forward(&self.tiny, &frame.inputs(), points, dirs, &knn, false)?.0)
    }

    /// Chain field gradients through the merge, the sampling of the UV maps
    /// and the UV network.
    pub fn frame_backward(&self, frame: &Frame, field: &FieldGrads, grads: &mut ParamGrads) -> Result<()> {
        let Some(cache) = frame.cache.as_ref() else {
            return invalid("frame was prepared without a cache");
        };
        let m = self.config.blendshapes();
        let wgrad = self.tables.merge_backward(&frame.weights, &field.merged, grads.get_mut(Group::Tables));
        for (g, d) in grads.get_mut(Group::Mlp).iter_mut().zip(&field.mlp) {
            *g += d;
        }
        for (g, d) in grads.get_mut(Group::Features).iter_mut().zip(&field.features) {
            *g += d;
        }
        let d_weights = self.sampler.backward(&wgrad, m);
        let d_features = self.sampler.backward(&field.features, self.config.field.features);
        let (ug, _) = self.uvnet.backward(cache, &d_weights, &d_features);
        for (g, d) in grads.get_mut(Group::UvNet).iter_mut().zip(&ug) {
            *g += d;
        }
        Ok(())
    }
}

/// Run the field with gradient bookkeeping on a prepared frame; convenience
/// used by tests and the trainer.
pub fn field_pass(
    avatar: &Avatar,
    frame: &Frame,
    points: &[Vec3],
    dirs: &[Vec3],
    knn: &KnnResult,
) -> Result<(FieldOutput, crate::radiance_field::FieldCache)> {
    let (out, cache) = field_forward(&avatar.tiny, &frame.inputs(), points, dirs, knn, true)?;
    Ok((out, cache.expect("cache requested")))
}

/// Reverse of [`field_pass`]; returns world-space point gradients when asked.
pub fn field_pass_backward(
    avatar: &Avatar,
    frame: &Frame,
    cache: &crate::radiance_field::FieldCache,
    d_sigma: &[f64],
    d_color: &[[f64; 3]],
    want_dq: bool,
) -> (FieldGrads, Option<Vec<Vec3>>) {
    let inputs = frame.inputs();
    let mut g = FieldGrads::zeros(&avatar.tiny, &inputs);
    let dq = field_backward(&avatar.tiny, &inputs, cache, d_sigma, d_color, &mut g, want_dq);
    (g, dq)
}
