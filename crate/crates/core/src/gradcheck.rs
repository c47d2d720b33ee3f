//! Central finite-difference checks of every analytic gradient.
//!
//! Each check perturbs a sample of inputs and parameters and compares the
//! central difference with the backward pass. Probes whose one-sided
//! differences disagree sit on a rectifier, hash-cell or neighbour-set kink
//! and are counted as skipped instead of compared.

use ndarray::Array2;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::avatar::{Avatar, AvatarConfig, Group, ParamGrads};
use crate::error::Result;
use crate::hash_blendshapes::{encode_backward, HashConfig, HashTable};
use crate::knn_search::KnnMode;
use crate::mlp::Mlp;
use crate::param_mesh::UVImage;
use crate::radiance_field::{WarpConfig, WarpField, WarpGrads};
use crate::trainer::{
    batch_loss, elastic_loss, generate_synthetic_dataset, magnitude_loss, photometric_loss, prepare_frames, sample_batch, BatchImage,
    DatasetConfig, SyntheticDataset, TrainConfig,
};
use crate::uv_net::{UVNetConfig, UVNetParams};
use crate::volume_renderer::SamplingPlan;
use crate::{Mat3, Vec3};

/// Outcome of one gradient check.
#[derive(Clone, Debug, PartialEq)]
pub struct GradCheck {
    pub name: &'static str,
    /// Probes compared against the analytic gradient.
    pub probes: usize,
    /// Probes dropped because they straddle a kink.
    pub skipped: usize,
    /// Largest `|fd − an| / max(|fd|, |an|, floor)` over compared probes.
    pub max_rel_err: f64,
}

impl GradCheck {
    fn new(name: &'static str) -> Self {
        Self {
            name,
            probes: 0,
            skipped: 0,
            max_rel_err: 0.0,
        }
    }

    /// Compare `an` with the central difference of `f` at step `h`. `floor`
    /// bounds the denominator from below so near-zero gradients are judged
    /// on absolute error.
    fn probe(&mut self, an: f64, h: f64, floor: f64, mut f: impl FnMut(f64) -> f64) {
        let (lp, l0, lm) = (f(h), f(0.0), f(-h));
        let (fwd, bwd) = ((lp - l0) / h, (l0 - lm) / h);
        if (fwd - bwd).abs() > 1e-2 * fwd.abs().max(bwd.abs()).max(floor) {
            self.skipped += 1;
            return;
        }
        let fd = (lp - lm) / (2.0 * h);
        let err = (fd - an).abs() / fd.abs().max(an.abs()).max(floor);
        self.max_rel_err = self.max_rel_err.max(err);
        self.probes += 1;
    }

    /// True when the error is within `tol` and at most a tenth of the probes
    /// were skipped.
    pub fn passes(&self, tol: f64) -> bool {
        self.probes > 0 && self.max_rel_err <= tol && self.skipped * 10 <= self.probes + self.skipped
    }
}

fn uniform(rng: &mut ChaCha8Rng, n: usize, r: f64) -> Vec<f64> {
    (0..n).map(|_| rng.random_range(-r..r)).collect()
}

fn max_abs(v: &[f64]) -> f64 {
    v.iter().fold(0.0f64, |m, x| m.max(x.abs()))
}

/// U-Net parameters and input image under a random linear read-out.
pub fn check_uvnet(seed: u64) -> Result<GradCheck> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let config = UVNetConfig {
        input_res: 16,
        encoder: vec![3, 4],
        decoder: vec![4, 5],
        blendshapes: 3,
        features: 2,
    };
    let mut net = UVNetParams::random(config, &mut rng)?;
    let mut input = UVImage::zeros(16, 16, 3);
    input.data = uniform(&mut rng, input.data.len(), 0.1);
    let (out, cache) = net.forward(&input)?;
    let gw = uniform(&mut rng, out.weights_map.data.len(), 1.0);
    let gf = uniform(&mut rng, out.feature_map.data.len(), 1.0);
    let mut dw = out.weights_map.clone();
    dw.data.clone_from(&gw);
    let mut df = out.feature_map.clone();
    df.data.clone_from(&gf);
    let (gp, gi) = net.backward(&cache, &dw, &df);
    let objective = |net: &UVNetParams, input: &UVImage| {
        let (o, _) = net.forward(input).unwrap();
        o.weights_map.data.iter().zip(&gw).map(|(a, b)| a * b).sum::<f64>() + o.feature_map.data.iter().zip(&gf).map(|(a, b)| a * b).sum::<f64>()
    };
    let mut check = GradCheck::new("uvnet");
    let (sp, si) = (max_abs(&gp), max_abs(&gi.data));
    let mut idx: Vec<usize> = net.layers().iter().map(|l| l.weight_offset + l.weight_len() / 2).collect();
    idx.extend((0..40).map(|_| rng.random_range(0..net.param_count())));
    for i in idx {
        check.probe(gp[i], 1e-5, 1e-3 * sp, |d| {
            net.params[i] += d;
            let l = objective(&net, &input);
            net.params[i] -= d;
            l
        });
    }
    for i in (0..input.data.len()).step_by(53) {
        check.probe(gi.data[i], 1e-5, 1e-3 * si, |d| {
            input.data[i] += d;
            let l = objective(&net, &input);
            input.data[i] -= d;
            l
        });
    }
    Ok(check)
}

/// Multiresolution hash encoding with respect to the query and the table.
pub fn check_hash(seed: u64) -> Result<GradCheck> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let config = HashConfig {
        levels: 3,
        table_size: 1 << 6,
        features: 2,
        coarsest: 2,
        finest: 9,
    };
    config.validate()?;
    let mut table = HashTable::random(config, 0.5, 1.0, &mut rng);
    let res = config.resolutions();
    let dim = config.embedding_dim();
    let mut check = GradCheck::new("hash encoding");
    for _ in 0..20 {
        let q = Vec3::from_fn(|_, _| rng.random_range(-0.45..0.45));
        let g = uniform(&mut rng, dim, 1.0);
        let objective = |t: &HashTable, q: &Vec3| t.encode(q).iter().zip(&g).map(|(a, b)| a * b).sum::<f64>();
        let mut tg = vec![0.0; table.data.len()];
        let dq = encode_backward(&config, &res, table.extent, &table.data, &q, &g, 1.0, Some(&mut tg));
        let scale = max_abs(dq.as_slice()).max(max_abs(&tg));
        for d in 0..3 {
            check.probe(dq[d], 1e-7, 1e-3 * scale, |h| {
                let mut p = q;
                p[d] += h;
                objective(&table, &p)
            });
        }
        let touched: Vec<usize> = (0..tg.len()).filter(|&i| tg[i] != 0.0).collect();
        for &i in touched.iter().take(6) {
            check.probe(tg[i], 1e-5, 1e-3 * scale, |h| {
                table.data[i] += h;
                let l = objective(&table, &q);
                table.data[i] -= h;
                l
            });
        }
    }
    Ok(check)
}

/// Rectified MLP of the radiance field's size class, parameters and inputs.
pub fn check_mlp(seed: u64) -> Result<GradCheck> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut mlp = Mlp::random(&[10, 16, 16, 4], false, 1.0, &mut rng);
    let mut x = Array2::from_shape_fn((6, 10), |_| rng.random_range(-1.0..1.0));
    let g = Array2::from_shape_fn((6, 4), |_| rng.random_range(-1.0..1.0));
    let (_, cache) = mlp.forward_cached(x.view());
    let mut gp = vec![0.0; mlp.params.len()];
    let gx = mlp.backward(&cache, g.clone(), &mut gp);
    let objective = |m: &Mlp, x: &Array2<f64>| (m.forward(x.view()) * &g).sum();
    let scale = max_abs(&gp).max(gx.iter().fold(0.0f64, |m, v| m.max(v.abs())));
    let mut check = GradCheck::new("tiny mlp");
    for i in (0..mlp.params.len()).step_by(3) {
        check.probe(gp[i], 1e-6, 1e-3 * scale, |h| {
            mlp.params[i] += h;
            let l = objective(&mlp, &x);
            mlp.params[i] -= h;
            l
        });
    }
    for r in 0..x.nrows() {
        for c in 0..x.ncols() {
            check.probe(gx[[r, c]], 1e-6, 1e-3 * scale, |h| {
                x[[r, c]] += h;
                let l = objective(&mlp, &x);
                x[[r, c]] -= h;
                l
            });
        }
    }
    Ok(check)
}

/// Warp MLP through the warped point and its spatial Jacobian, with
/// respect to backbone and head parameters and the latent codes.
pub fn check_warp(seed: u64) -> Result<GradCheck> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let config = WarpConfig {
        width: 16,
        depth: 2,
        head_width: 12,
        bands: 3,
        latent_dim: 4,
    };
    let mut warp = WarpField::new(config, &mut rng);
    for h in &mut warp.heads {
        *h = Mlp::random(&h.sizes.clone(), false, 0.3, &mut rng);
    }
    let n = 6;
    let alpha = 2.4;
    let pts: Vec<Vec3> = (0..n).map(|_| Vec3::from_fn(|_, _| rng.random_range(-0.5..0.5))).collect();
    let mut lat = Array2::from_shape_fn((n, 4), |_| rng.random_range(-1.0..1.0));
    let gq: Vec<Vec3> = (0..n).map(|_| Vec3::from_fn(|_, _| rng.random_range(-1.0..1.0))).collect();
    let gj: Vec<Mat3> = (0..n).map(|_| Mat3::from_fn(|_, _| rng.random_range(-1.0..1.0))).collect();
    let objective = |warp: &WarpField, lat: &Array2<f64>| {
        let (w, j, _) = warp.forward(&pts, lat.view(), alpha, true);
        let j = j.unwrap();
        w.iter().zip(&gq).map(|(a, b)| a.dot(b)).sum::<f64>() + j.iter().zip(&gj).map(|(a, b)| a.component_mul(b).sum()).sum::<f64>()
    };
    let (_, _, cache) = warp.forward(&pts, lat.view(), alpha, true);
    let mut grads = WarpGrads::zeros(&warp);
    let dlat = warp.backward(&cache, &gq, Some(&gj), &mut grads);
    let scale = [&grads.backbone, &grads.heads[0], &grads.heads[1], &grads.heads[2]]
        .iter()
        .fold(0.0f64, |m, v| m.max(max_abs(v)));
    let mut check = GradCheck::new("warp mlp + jacobian");
    for part in 0..4 {
        let len = if part == 0 { warp.backbone.params.len() } else { warp.heads[part - 1].params.len() };
        for _ in 0..12 {
            let i = rng.random_range(0..len);
            let an = if part == 0 { grads.backbone[i] } else { grads.heads[part - 1][i] };
            check.probe(an, 1e-6, 1e-3 * scale, |h| {
                let p = if part == 0 { &mut warp.backbone.params } else { &mut warp.heads[part - 1].params };
                p[i] += h;
                let l = objective(&warp, &lat);
                let p = if part == 0 { &mut warp.backbone.params } else { &mut warp.heads[part - 1].params };
                p[i] -= h;
                l
            });
        }
    }
    for i in 0..n {
        for c in 0..4 {
            check.probe(dlat[[i, c]], 1e-6, 1e-3 * scale, |h| {
                lat[[i, c]] += h;
                let l = objective(&warp, &lat);
                lat[[i, c]] -= h;
                l
            });
        }
    }
    Ok(check)
}

/// Photometric (both forms), elastic and magnitude losses.
pub fn check_losses(seed: u64) -> Result<Vec<GradCheck>> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut out = Vec::new();
    for (name, warmup) in [("photometric (squared)", true), ("photometric (norm)", false)] {
        let mut pred: Vec<[f64; 3]> = (0..16).map(|_| [0, 1, 2].map(|_| rng.random_range(0.0..1.0))).collect();
        let target: Vec<[f64; 3]> = (0..16).map(|_| [0, 1, 2].map(|_| rng.random_range(0.0..1.0))).collect();
        let (_, g) = photometric_loss(&pred, &target, warmup)?;
        let mut check = GradCheck::new(name);
        for i in 0..16 {
            for c in 0..3 {
                check.probe(g[i][c], 1e-6, 1e-6, |h| {
                    pred[i][c] += h;
                    let l = photometric_loss(&pred, &target, warmup).unwrap().0;
                    pred[i][c] -= h;
                    l
                });
            }
        }
        out.push(check);
    }
    let mut jac: Vec<Mat3> = (0..8)
        .map(|_| Mat3::identity() + Mat3::from_fn(|_, _| rng.random_range(-0.4..0.4)))
        .collect();
    let (_, g) = elastic_loss(&jac)?;
    let mut check = GradCheck::new("elastic");
    for i in 0..jac.len() {
        for e in 0..9 {
            let (r, c) = (e / 3, e % 3);
            check.probe(g[i][(r, c)], 1e-6, 1e-6, |h| {
                jac[i][(r, c)] += h;
                let l = elastic_loss(&jac).unwrap().0;
                jac[i][(r, c)] -= h;
                l
            });
        }
    }
    out.push(check);
    let q: Vec<Vec3> = (0..8).map(|_| Vec3::from_fn(|_, _| rng.random_range(-1.0..1.0))).collect();
    let mut warped: Vec<Vec3> = q.iter().map(|p| p + Vec3::from_fn(|_, _| rng.random_range(-0.1..0.1))).collect();
    let (_, g) = magnitude_loss(&q, &warped)?;
    let mut check = GradCheck::new("magnitude");
    for i in 0..q.len() {
        for d in 0..3 {
            check.probe(g[i][d], 1e-6, 1e-6, |h| {
                warped[i][d] += h;
                let l = magnitude_loss(&q, &warped).unwrap().0;
                warped[i][d] -= h;
                l
            });
        }
    }
    out.push(check);
    Ok(out)
}

fn microbatch(avatar: &Avatar, ds: &SyntheticDataset, config: &TrainConfig, step: u64, seed: u64) -> Result<Vec<BatchImage>> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let image = rng.random_range(0..ds.image_count());
    let frames = prepare_frames(avatar, ds, [ds.image_source(image).1])?;
    let mut batch = sample_batch(avatar, &frames, ds, &[image], config, step, &mut rng)?;
    for b in &mut batch {
        b.rays.retain(|r| !r.t.is_empty());
        b.rays.truncate(1);
    }
    Ok(batch)
}

/// Total training loss of a one-ray microbatch with respect to every
/// parameter group, through rendering, the field, k-NN blending, blendshape
/// merging, the U-Net and the warp. `step` selects the schedule phase.
pub fn check_end_to_end(seed: u64, step: u64) -> Result<GradCheck> {
    let ds = generate_synthetic_dataset(&DatasetConfig::tiny(seed))?;
    let mut avatar = Avatar::new(ds.model.clone(), AvatarConfig::tiny(3, 2), seed)?;
    let mut rng = ChaCha8Rng::seed_from_u64(seed ^ 0x5eed);
    for g in Group::ALL.into_iter().filter(|g| g.is_warp() || *g == Group::Latents) {
        avatar.param_mut(g).iter_mut().for_each(|v| *v += rng.random_range(-0.1..0.1));
    }
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
    let batch = microbatch(&avatar, &ds, &config, step, seed)?;
    let loss = |a: &Avatar| -> f64 {
        let frames = prepare_frames(a, &ds, batch.iter().map(|b| b.expression)).unwrap();
        batch_loss(a, &frames, &batch, &config, step, None).unwrap().total
    };
    let frames = prepare_frames(&avatar, &ds, batch.iter().map(|b| b.expression))?;
    let mut grads = ParamGrads::zeros(&avatar);
    batch_loss(&avatar, &frames, &batch, &config, step, Some(&mut grads))?;
    let mut check = GradCheck::new("end-to-end one ray");
    for g in Group::ALL {
        let an = grads.get(g).to_vec();
        let scale = max_abs(&an);
        if scale == 0.0 {
            continue;
        }
        let mut order: Vec<usize> = (0..an.len()).collect();
        order.sort_by(|&a, &b| an[b].abs().total_cmp(&an[a].abs()));
        for &i in order.iter().take(4) {
            check.probe(an[i], 1e-6, 1e-6 * scale, |h| {
                avatar.param_mut(g)[i] += h;
                let l = loss(&avatar);
                avatar.param_mut(g)[i] -= h;
                l
            });
        }
    }
    Ok(check)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn component_checks_pass() {
        for c in [check_uvnet(1), check_hash(2), check_mlp(3), check_warp(4)] {
            let c = c.unwrap();
            assert!(c.passes(1e-4), "{c:?}");
        }
        for c in check_losses(5).unwrap() {
            assert!(c.passes(1e-4), "{c:?}");
        }
    }

    #[test]
    fn end_to_end_check_passes() {
        for step in [20, 150] {
            let c = check_end_to_end(2, step).unwrap();
            assert!(c.passes(1e-3), "{c:?}");
        }
    }

    #[test]
    fn wrong_gradient_is_caught() {
        let mut c = GradCheck::new("probe");
        c.probe(2.0, 1e-6, 1e-6, |h| 3.0 * h);
        assert!(c.max_rel_err > 0.3);
        assert!(!c.passes(1e-4));
    }

    #[test]
    fn kinks_are_skipped() {
        let mut c = GradCheck::new("probe");
        c.probe(1.0, 1e-6, 1e-6, |h| h.max(0.0));
        assert_eq!((c.probes, c.skipped), (0, 1));
    }
}
