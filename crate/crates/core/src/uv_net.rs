//! UV-space encoder–decoder predicting per-texel blend weights and features
//! from the rasterised vertex displacement image.

use rand::Rng;

use crate::conv::{leaky_relu, leaky_relu_backward, ConvKind, ConvLayer, PatchGeometry, Tensor};
use crate::error::{invalid, Error, Result};
use crate::param_mesh::UVImage;

pub const LEAKY_SLOPE: f64 = 0.2;

#[derive(Clone, Debug, PartialEq)]
pub struct UVNetConfig {
    pub input_res: usize,
    pub encoder: Vec<usize>,
    pub decoder: Vec<usize>,
    /// Total blendshapes M; the network predicts M − 1 channels.
    pub blendshapes: usize,
    pub features: usize,
}

impl UVNetConfig {
    /// CPU-friendly default: 64² input, four levels.
    pub fn desk(blendshapes: usize) -> Self {
        Self {
            input_res: 64,
            encoder: vec![8, 16, 32, 64],
            decoder: vec![32, 16, 16, 16],
            blendshapes,
            features: 24,
        }
    }

    /// Full-size network: 128² input, six levels.
    pub fn full(blendshapes: usize) -> Self {
        Self {
            input_res: 128,
            encoder: vec![8, 16, 32, 64, 128, 256],
            decoder: vec![128, 64, 64, 64, 64, 64],
            blendshapes,
            features: 24,
        }
    }

    pub fn predicted_channels(&self) -> usize {
        self.blendshapes - 1 + self.features
    }

    pub fn validate(&self) -> Result<()> {
        if self.blendshapes == 0 {
            return invalid("need at least one blendshape");
        }
        if self.encoder.is_empty() || self.encoder.len() != self.decoder.len() {
            return invalid("encoder and decoder must have the same, non-zero depth");
        }
        if self.input_res % (1 << self.encoder.len()) != 0 {
            return invalid("input resolution must be divisible by 2^levels");
        }
        Ok(())
    }
}

#[derive(Clone, Copy, Debug, PartialEq)]
struct DownBlock {
    conv_a: ConvLayer,
    conv_b: ConvLayer,
    proj: ConvLayer,
}

#[derive(Clone, Copy, Debug, PartialEq)]
struct UpBlock {
    up: ConvLayer,
    conv_a: ConvLayer,
    conv_b: ConvLayer,
    proj: ConvLayer,
}

/// Network parameters in one flat buffer with layer views into it.
#[derive(Clone, Debug, PartialEq)]
pub struct UVNetParams {
    pub config: UVNetConfig,
    pub params: Vec<f64>,
    down: Vec<DownBlock>,
    up: Vec<UpBlock>,
    head: ConvLayer,
}

#[derive(Clone, Debug, PartialEq)]
pub struct UVNetOutput {
    /// M channels; channel 0 is the constant-one base weight.
    pub weights_map: UVImage,
    pub feature_map: UVImage,
}

/// Activations kept for the reverse pass.
#[derive(Clone, Debug)]
pub struct UVNetCache {
    input: Tensor,
    down: Vec<DownCache>,
    up: Vec<UpCache>,
    head_in: Tensor,
}

#[derive(Clone, Debug)]
struct DownCache {
    x: Tensor,
    a: Tensor,
    a_act: Tensor,
    sum: Tensor,
}

#[derive(Clone, Debug)]
struct UpCache {
    x: Tensor,
    u: Tensor,
    cat: Tensor,
    a: Tensor,
    a_act: Tensor,
    sum: Tensor,
}

const CONV3: PatchGeometry = PatchGeometry { k: 3, stride: 1, pad: 1 };
const CONV3_DOWN: PatchGeometry = PatchGeometry { k: 3, stride: 2, pad: 1 };
const PROJ: PatchGeometry = PatchGeometry { k: 1, stride: 1, pad: 0 };
const PROJ_DOWN: PatchGeometry = PatchGeometry { k: 1, stride: 2, pad: 0 };
const UPSAMPLE: PatchGeometry = PatchGeometry { k: 4, stride: 2, pad: 1 };

struct Allocator {
    next: usize,
    layers: Vec<ConvLayer>,
}

impl Allocator {
    fn layer(&mut self, kind: ConvKind, in_c: usize, out_c: usize, geom: PatchGeometry) -> ConvLayer {
        let weight_offset = self.next;
        let bias_offset = weight_offset + in_c * out_c * geom.k * geom.k;
        self.next = bias_offset + out_c;
        let layer = ConvLayer {
            kind,
            in_c,
            out_c,
            geom,
            weight_offset,
            bias_offset,
        };
        self.layers.push(layer);
        layer
    }
}

impl UVNetParams {
    /// Zero-initialised parameters.
    pub fn zeros(config: UVNetConfig) -> Result<Self> {
        config.validate()?;
        let mut alloc = Allocator { next: 0, layers: Vec::new() };
        let mut down = Vec::new();
        let mut in_c = 3;
        for &c in &config.encoder {
            down.push(DownBlock {
                conv_a: alloc.layer(ConvKind::Conv, in_c, c, CONV3_DOWN),
                conv_b: alloc.layer(ConvKind::Conv, c, c, CONV3),
                proj: alloc.layer(ConvKind::Conv, in_c, c, PROJ_DOWN),
            });
            in_c = c;
        }
        let mut skips: Vec<usize> = vec![3];
        skips.extend(&config.encoder[..config.encoder.len() - 1]);
        let mut up = Vec::new();
        for (i, &c) in config.decoder.iter().enumerate() {
            let skip_c = skips[skips.len() - 1 - i];
            up.push(UpBlock {
                up: alloc.layer(ConvKind::Transposed, in_c, c, UPSAMPLE),
                conv_a: alloc.layer(ConvKind::Conv, c + skip_c, c, CONV3),
                conv_b: alloc.layer(ConvKind::Conv, c, c, CONV3),
                proj: alloc.layer(ConvKind::Conv, c + skip_c, c, PROJ),
            });
            in_c = c;
        }
        let head = alloc.layer(ConvKind::Conv, in_c, config.predicted_channels(), PROJ);
        Ok(Self {
            config,
            params: vec![0.0; alloc.next],
            down,
            up,
            head,
        })
    }

    /// He-style uniform initialisation with zero biases. The head is scaled
    /// down so initial blend weights and features start near zero.
    pub fn random(config: UVNetConfig, rng: &mut impl Rng) -> Result<Self> {
        let mut net = Self::zeros(config)?;
        for layer in net.layers() {
            let scale = (6.0 / layer.fan_in() as f64).sqrt() * if layer == net.head { 0.1 } else { 1.0 };
            for v in &mut net.params[layer.weight_offset..layer.weight_offset + layer.weight_len()] {
                *v = rng.random_range(-scale..scale);
            }
        }
        Ok(net)
    }

    pub fn param_count(&self) -> usize {
        self.params.len()
    }

    pub fn layers(&self) -> Vec<ConvLayer> {
        let mut out = Vec::new();
        for b in &self.down {
            out.extend([b.conv_a, b.conv_b, b.proj]);
        }
        for b in &self.up {
            out.extend([b.up, b.conv_a, b.conv_b, b.proj]);
        }
        out.push(self.head);
        out
    }

    pub fn head_layer(&self) -> ConvLayer {
        self.head
    }

    /// Multiply-adds of one forward pass at the configured resolution.
    pub fn forward_macs(&self) -> u64 {
        let mut res = self.config.input_res;
        let mut total = 0u64;
        let conv = |l: &ConvLayer, out_res: usize| -> u64 {
            (l.in_c * l.out_c * l.geom.k * l.geom.k) as u64 * (out_res * out_res) as u64
        };
        for b in &self.down {
            res /= 2;
            total += conv(&b.conv_a, res) + conv(&b.conv_b, res) + conv(&b.proj, res);
        }
        for b in &self.up {
            // transposed conv: every input texel scatters a full kernel
            total += conv(&b.up, res);
            res *= 2;
            total += conv(&b.conv_a, res) + conv(&b.conv_b, res) + conv(&b.proj, res);
        }
        total + conv(&self.head, res)
    }

    pub fn forward(&self, input: &UVImage) -> Result<(UVNetOutput, UVNetCache)> {
        let r = self.config.input_res;
        if input.width != r || input.height != r || input.channels != 3 {
            return Err(Error::InvalidInput(format!(
                "uv net expects a {r}x{r}x3 image, got {}x{}x{}",
                input.width, input.height, input.channels
            )));
        }
        let p = &self.params;
        let x0 = hwc_to_chw(input);
        let mut skips = vec![x0.clone()];
        let mut down_cache = Vec::new();
        let mut x = x0.clone();
        for b in &self.down {
            let a = b.conv_a.forward(p, &x);
            let a_act = leaky_relu(&a, LEAKY_SLOPE);
            let mut sum = b.conv_b.forward(p, &a_act);
            sum.add_assign(&b.proj.forward(p, &x));
            let out = leaky_relu(&sum, LEAKY_SLOPE);
            down_cache.push(DownCache { x, a, a_act, sum });
            skips.push(out.clone());
            x = out;
        }
        skips.pop();
        let mut up_cache = Vec::new();
        for b in &self.up {
            let skip = skips.pop().unwrap();
            let u = b.up.forward(p, &x);
            let cat = Tensor::concat(&leaky_relu(&u, LEAKY_SLOPE), &skip);
            let a = b.conv_a.forward(p, &cat);
            let a_act = leaky_relu(&a, LEAKY_SLOPE);
            let mut sum = b.conv_b.forward(p, &a_act);
            sum.add_assign(&b.proj.forward(p, &cat));
            let out = leaky_relu(&sum, LEAKY_SLOPE);
            up_cache.push(UpCache { x, u, cat, a, a_act, sum });
            x = out;
        }
        let head = self.head.forward(p, &x);
        let output = self.split_head(&head);
        Ok((
            output,
            UVNetCache {
                input: x0,
                down: down_cache,
                up: up_cache,
                head_in: x,
            },
        ))
    }

    fn split_head(&self, head: &Tensor) -> UVNetOutput {
        let m = self.config.blendshapes;
        let (w, h) = (head.w, head.h);
        let mut weights_map = UVImage::zeros(w, h, m);
        let mut feature_map = UVImage::zeros(w, h, self.config.features);
        for y in 0..h {
            for x in 0..w {
                *weights_map.at_mut(x, y, 0) = 1.0;
                for c in 1..m {
                    *weights_map.at_mut(x, y, c) = head.at(c - 1, y, x);
                }
                for c in 0..self.config.features {
                    *feature_map.at_mut(x, y, c) = head.at(m - 1 + c, y, x);
                }
            }
        }
        UVNetOutput { weights_map, feature_map }
    }

    /// Reverse pass from output-map gradients. The gradient of the constant
    /// channel is ignored. Returns `(parameter gradients, input gradient)`.
    pub fn backward(&self, cache: &UVNetCache, d_weights: &UVImage, d_features: &UVImage) -> (Vec<f64>, UVImage) {
        let p = &self.params;
        let mut grads = vec![0.0; p.len()];
        let m = self.config.blendshapes;
        let res = cache.head_in.h;
        let mut dhead = Tensor::zeros(self.config.predicted_channels(), res, res);
        for y in 0..res {
            for x in 0..res {
                for c in 1..m {
                    dhead.data[((c - 1) * res + y) * res + x] = d_weights.at(x, y, c);
                }
                for c in 0..self.config.features {
                    dhead.data[((m - 1 + c) * res + y) * res + x] = d_features.at(x, y, c);
                }
            }
        }
        let mut dx = self.head.backward(p, &cache.head_in, &dhead, &mut grads);
        let mut dskips: Vec<Tensor> = Vec::new();
        for (b, c) in self.up.iter().zip(&cache.up).rev() {
            let dsum = leaky_relu_backward(&c.sum, &dx, LEAKY_SLOPE);
            let da_act = b.conv_b.backward(p, &c.a_act, &dsum, &mut grads);
            let mut dcat = b.proj.backward(p, &c.cat, &dsum, &mut grads);
            let da = leaky_relu_backward(&c.a, &da_act, LEAKY_SLOPE);
            dcat.add_assign(&b.conv_a.backward(p, &c.cat, &da, &mut grads));
            let (du_act, dskip) = dcat.split(b.up.out_c);
            let du = leaky_relu_backward(&c.u, &du_act, LEAKY_SLOPE);
            dx = b.up.backward(p, &c.x, &du, &mut grads);
            dskips.push(dskip);
        }
        // dskips[j] is the gradient of skip j: the raw input for j = 0,
        // otherwise the output of encoder block j − 1
        for (i, (b, c)) in self.down.iter().zip(&cache.down).enumerate().rev() {
            if i + 1 < self.down.len() {
                dx.add_assign(&dskips[i + 1]);
            }
            let dsum = leaky_relu_backward(&c.sum, &dx, LEAKY_SLOPE);
            let da_act = b.conv_b.backward(p, &c.a_act, &dsum, &mut grads);
            let mut dinput = b.proj.backward(p, &c.x, &dsum, &mut grads);
            let da = leaky_relu_backward(&c.a, &da_act, LEAKY_SLOPE);
            dinput.add_assign(&b.conv_a.backward(p, &c.x, &da, &mut grads));
            dx = dinput;
        }
        dx.add_assign(&dskips[0]);
        debug_assert_eq!(dx.c, cache.input.c);
        (grads, chw_to_hwc(&dx))
    }
}

pub fn hwc_to_chw(img: &UVImage) -> Tensor {
    let mut t = Tensor::zeros(img.channels, img.height, img.width);
    for y in 0..img.height {
        for x in 0..img.width {
            for c in 0..img.channels {
                t.data[(c * img.height + y) * img.width + x] = img.at(x, y, c);
            }
        }
    }
    t
}

pub fn chw_to_hwc(t: &Tensor) -> UVImage {
    let mut img = UVImage::zeros(t.w, t.h, t.c);
    for c in 0..t.c {
        for y in 0..t.h {
            for x in 0..t.w {
                *img.at_mut(x, y, c) = t.at(c, y, x);
            }
        }
    }
    img
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    fn random_image(res: usize, seed: u64) -> UVImage {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut img = UVImage::zeros(res, res, 3);
        for v in &mut img.data {
            *v = rng.random_range(-0.1..0.1);
        }
        img
    }

    fn small_config(levels: usize) -> UVNetConfig {
        UVNetConfig {
            input_res: 8 << (levels - 1),
            encoder: (0..levels).map(|i| 3 + i).collect(),
            decoder: (0..levels).map(|i| 4 + i).collect(),
            blendshapes: 3,
            features: 2,
        }
    }

    // Direct loops, no patch matrices.
    fn direct_conv(p: &[f64], l: &ConvLayer, x: &Tensor) -> Tensor {
        let g = l.geom;
        let k = g.k;
        match l.kind {
            ConvKind::Conv => {
                let oh = (x.h + 2 * g.pad - k) / g.stride + 1;
                let ow = (x.w + 2 * g.pad - k) / g.stride + 1;
                let mut out = Tensor::zeros(l.out_c, oh, ow);
                for o in 0..l.out_c {
                    for oy in 0..oh {
                        for ox in 0..ow {
                            let mut s = p[l.bias_offset + o];
                            for i in 0..l.in_c {
                                for ky in 0..k {
                                    for kx in 0..k {
                                        let iy = (oy * g.stride + ky) as isize - g.pad as isize;
                                        let ix = (ox * g.stride + kx) as isize - g.pad as isize;
                                        if iy < 0 || ix < 0 || iy >= x.h as isize || ix >= x.w as isize {
                                            continue;
                                        }
                                        let w = p[l.weight_offset + ((o * l.in_c + i) * k + ky) * k + kx];
                                        s += w * x.at(i, iy as usize, ix as usize);
                                    }
                                }
                            }
                            out.data[(o * oh + oy) * ow + ox] = s;
                        }
                    }
                }
                out
            }
            ConvKind::Transposed => {
                let oh = (x.h - 1) * g.stride + k - 2 * g.pad;
                let ow = (x.w - 1) * g.stride + k - 2 * g.pad;
                let mut out = Tensor::zeros(l.out_c, oh, ow);
                for o in 0..l.out_c {
                    for y in 0..oh {
                        for xx in 0..ow {
                            out.data[(o * oh + y) * ow + xx] = p[l.bias_offset + o];
                        }
                    }
                }
                for i in 0..l.in_c {
                    for iy in 0..x.h {
                        for ix in 0..x.w {
                            for o in 0..l.out_c {
                                for ky in 0..k {
                                    for kx in 0..k {
                                        let y = (iy * g.stride + ky) as isize - g.pad as isize;
                                        let xx = (ix * g.stride + kx) as isize - g.pad as isize;
                                        if y < 0 || xx < 0 || y >= oh as isize || xx >= ow as isize {
                                            continue;
                                        }
                                        let w = p[l.weight_offset + ((i * l.out_c + o) * k + ky) * k + kx];
                                        out.data[(o * oh + y as usize) * ow + xx as usize] += w * x.at(i, iy, ix);
                                    }
                                }
                            }
                        }
                    }
                }
                out
            }
        }
    }

    fn leaky(t: &Tensor) -> Tensor {
        Tensor {
            data: t.data.iter().map(|&v| if v > 0.0 { v } else { 0.2 * v }).collect(),
            ..*t
        }
    }

    fn add(a: &Tensor, b: &Tensor) -> Tensor {
        Tensor {
            data: a.data.iter().zip(&b.data).map(|(x, y)| x + y).collect(),
            ..*a
        }
    }

    fn oracle_forward(net: &UVNetParams, input: &UVImage) -> Tensor {
        let p = &net.params;
        let mut x = hwc_to_chw(input);
        let mut skips = vec![x.clone()];
        for b in &net.down {
            let a = leaky(&direct_conv(p, &b.conv_a, &x));
            x = leaky(&add(&direct_conv(p, &b.conv_b, &a), &direct_conv(p, &b.proj, &x)));
            skips.push(x.clone());
        }
        skips.pop();
        for b in &net.up {
            let u = leaky(&direct_conv(p, &b.up, &x));
            let cat = Tensor::concat(&u, &skips.pop().unwrap());
            let a = leaky(&direct_conv(p, &b.conv_a, &cat));
            x = leaky(&add(&direct_conv(p, &b.conv_b, &a), &direct_conv(p, &b.proj, &cat)));
        }
        direct_conv(p, &net.head, &x)
    }

    #[test]
    fn zero_params_give_zero_predictions_and_constant_channel() {
        let net = UVNetParams::zeros(small_config(2)).unwrap();
        let (out, _) = net.forward(&random_image(16, 1)).unwrap();
        for y in 0..16 {
            for x in 0..16 {
                assert_eq!(out.weights_map.at(x, y, 0), 1.0);
                assert_eq!(out.weights_map.at(x, y, 1), 0.0);
                assert_eq!(out.feature_map.at(x, y, 1), 0.0);
            }
        }
    }

    #[test]
    fn zero_backbone_outputs_head_bias() {
        let mut net = UVNetParams::zeros(small_config(2)).unwrap();
        let head = net.head_layer();
        for c in 0..head.out_c {
            net.params[head.bias_offset + c] = 0.1 * (c + 1) as f64;
        }
        let (out, _) = net.forward(&random_image(16, 2)).unwrap();
        assert!((out.weights_map.at(3, 5, 2) - 0.2).abs() < 1e-15);
        assert!((out.feature_map.at(7, 1, 0) - 0.3).abs() < 1e-15);
    }

    #[test]
    fn desk_and_full_shapes() {
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        let net = UVNetParams::random(UVNetConfig::desk(5), &mut rng).unwrap();
        let (out, _) = net.forward(&random_image(64, 1)).unwrap();
        assert_eq!((out.weights_map.width, out.weights_map.channels), (64, 5));
        assert_eq!((out.feature_map.height, out.feature_map.channels), (64, 24));
        let full = UVNetParams::zeros(UVNetConfig::full(5)).unwrap();
        assert!(full.param_count() > net.param_count());
        assert!(net.forward(&random_image(32, 1)).is_err());
    }

    #[test]
    fn forward_matches_direct_convolution_oracle() {
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let mut cfg = UVNetConfig::desk(5);
        cfg.input_res = 32;
        let net = UVNetParams::random(cfg, &mut rng).unwrap();
        let input = random_image(32, 4);
        let (out, _) = net.forward(&input).unwrap();
        let head = oracle_forward(&net, &input);
        for y in 0..32 {
            for x in 0..32 {
                for c in 1..5 {
                    assert!((out.weights_map.at(x, y, c) - head.at(c - 1, y, x)).abs() < 1e-5);
                }
                for c in 0..24 {
                    assert!((out.feature_map.at(x, y, c) - head.at(4 + c, y, x)).abs() < 1e-5);
                }
            }
        }
    }

    fn loss_and_grads(net: &UVNetParams, input: &UVImage, seed: u64) -> (f64, Vec<f64>, UVImage) {
        let (out, cache) = net.forward(input).unwrap();
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut dw = out.weights_map.clone();
        let mut df = out.feature_map.clone();
        let mut loss = 0.0;
        for (g, v) in dw.data.iter_mut().zip(&out.weights_map.data) {
            *g = rng.random_range(-1.0..1.0);
            loss += *g * v;
        }
        for (g, v) in df.data.iter_mut().zip(&out.feature_map.data) {
            *g = rng.random_range(-1.0..1.0);
            loss += *g * v;
        }
        let (gp, gi) = net.backward(&cache, &dw, &df);
        (loss, gp, gi)
    }

    fn rel_err(a: f64, b: f64) -> f64 {
        (a - b).abs() / a.abs().max(b.abs()).max(1e-6)
    }

    #[test]
    fn zero_upstream_gives_zero_gradients() {
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let net = UVNetParams::random(small_config(2), &mut rng).unwrap();
        let (out, cache) = net.forward(&random_image(16, 1)).unwrap();
        let dw = UVImage::zeros(16, 16, 3);
        let df = UVImage::zeros(16, 16, out.feature_map.channels);
        let (gp, gi) = net.backward(&cache, &dw, &df);
        assert!(gp.iter().all(|&g| g == 0.0));
        assert!(gi.data.iter().all(|&g| g == 0.0));
    }

    #[test]
    fn single_conv_weight_gradient_is_input_correlation() {
        let layer = ConvLayer {
            kind: ConvKind::Conv,
            in_c: 1,
            out_c: 1,
            geom: PatchGeometry { k: 3, stride: 1, pad: 1 },
            weight_offset: 0,
            bias_offset: 9,
        };
        let mut rng = ChaCha8Rng::seed_from_u64(8);
        let params: Vec<f64> = (0..10).map(|_| rng.random_range(-1.0..1.0)).collect();
        let mut x = Tensor::zeros(1, 5, 5);
        let mut dy = Tensor::zeros(1, 5, 5);
        for v in x.data.iter_mut().chain(dy.data.iter_mut()) {
            *v = rng.random_range(-1.0..1.0);
        }
        let mut grads = vec![0.0; 10];
        layer.backward(&params, &x, &dy, &mut grads);
        for ky in 0..3 {
            for kx in 0..3 {
                let mut s = 0.0;
                for y in 0..5 {
                    for xx in 0..5 {
                        let iy = y as isize + ky as isize - 1;
                        let ix = xx as isize + kx as isize - 1;
                        if (0..5).contains(&iy) && (0..5).contains(&ix) {
                            s += x.at(0, iy as usize, ix as usize) * dy.at(0, y, xx);
                        }
                    }
                }
                assert!((grads[ky * 3 + kx] - s).abs() < 1e-12);
            }
        }
        assert!((grads[9] - dy.data.iter().sum::<f64>()).abs() < 1e-12);
    }

    fn activation_signs(net: &UVNetParams, input: &UVImage) -> Vec<bool> {
        let (_, cache) = net.forward(input).unwrap();
        let mut signs = Vec::new();
        for c in &cache.down {
            signs.extend(c.a.data.iter().chain(&c.sum.data).map(|&v| v > 0.0));
        }
        for c in &cache.up {
            signs.extend(c.u.data.iter().chain(&c.a.data).chain(&c.sum.data).map(|&v| v > 0.0));
        }
        signs
    }

    /// Central difference, or `None` when the probe straddles an activation kink.
    fn central_difference(plus: (&UVNetParams, &UVImage), minus: (&UVNetParams, &UVImage), h: f64) -> Option<f64> {
        if activation_signs(plus.0, plus.1) != activation_signs(minus.0, minus.1) {
            return None;
        }
        Some((loss_and_grads(plus.0, plus.1, 7).0 - loss_and_grads(minus.0, minus.1, 7).0) / (2.0 * h))
    }

    #[test]
    fn parameter_and_input_gradients_match_finite_differences() {
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        let net = UVNetParams::random(small_config(3), &mut rng).unwrap();
        let input = random_image(32, 6);
        let (_, gp, gi) = loss_and_grads(&net, &input, 7);
        let h = 1e-4;
        // one probe per layer so each block type is covered, then random ones
        let mut candidates: Vec<usize> = net.layers().iter().map(|l| l.weight_offset + l.weight_len() / 2).collect();
        candidates.extend((0..200).map(|_| rng.random_range(0..net.param_count())));
        let mut checked = 0;
        for &i in &candidates {
            let mut plus = net.clone();
            plus.params[i] += h;
            let mut minus = net.clone();
            minus.params[i] -= h;
            let Some(fd) = central_difference((&plus, &input), (&minus, &input), h) else {
                continue;
            };
            assert!(rel_err(fd, gp[i]) < 1e-4, "param {i}: fd {fd} analytic {}", gp[i]);
            checked += 1;
            if checked == 20 + net.layers().len() {
                break;
            }
        }
        assert!(checked >= 20);
        let mut checked = 0;
        for i in (0..input.data.len()).step_by(97) {
            let mut plus = input.clone();
            plus.data[i] += h;
            let mut minus = input.clone();
            minus.data[i] -= h;
            let Some(fd) = central_difference((&net, &plus), (&net, &minus), h) else {
                continue;
            };
            assert!(rel_err(fd, gi.data[i]) < 1e-4, "input {i}: fd {fd} analytic {}", gi.data[i]);
            checked += 1;
        }
        assert!(checked >= 5);
    }

    fn shifted(img: &UVImage, s: usize) -> UVImage {
        let mut out = UVImage::zeros(img.width, img.height, img.channels);
        for y in s..img.height {
            for x in s..img.width {
                for c in 0..img.channels {
                    *out.at_mut(x, y, c) = img.at(x - s, y - s, c);
                }
            }
        }
        out
    }

    fn check_covariance(levels: usize, shift: usize) {
        let mut rng = ChaCha8Rng::seed_from_u64(9);
        let cfg = small_config(levels);
        let res = cfg.input_res;
        let net = UVNetParams::random(cfg, &mut rng).unwrap();
        // interior-supported input so the shift does not clip content
        let mut input = UVImage::zeros(res, res, 3);
        for y in res / 4..res / 2 {
            for x in res / 4..res / 2 {
                for c in 0..3 {
                    *input.at_mut(x, y, c) = rng.random_range(-1.0..1.0);
                }
            }
        }
        let (a, _) = net.forward(&input).unwrap();
        let (b, _) = net.forward(&shifted(&input, shift)).unwrap();
        let margin = 2 << levels;
        for y in margin..res - margin - shift {
            for x in margin..res - margin - shift {
                for c in 0..a.feature_map.channels {
                    let d = (a.feature_map.at(x, y, c) - b.feature_map.at(x + shift, y + shift, c)).abs();
                    assert!(d < 1e-9, "({x},{y},{c}) differs by {d}");
                }
            }
        }
    }

    #[test]
    fn translation_covariance_one_level_shift_two() {
        check_covariance(1, 2);
    }

    #[test]
    fn translation_covariance_full_stride_shift() {
        check_covariance(3, 8);
    }

    #[test]
    fn full_forward_macs_scale() {
        let net = UVNetParams::zeros(UVNetConfig::full(5)).unwrap();
        let gmacs = net.forward_macs() as f64 / 1e9;
        assert!(gmacs > 0.1 && gmacs < 10.0, "{gmacs}");
    }
}
