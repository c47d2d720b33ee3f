//! Batched fully connected networks with rectifier hidden layers.
//!
//! Rows of the input matrix are samples. Parameters live in one flat buffer:
//! per layer the `out × in` weight matrix, row-major, then the bias. Besides
//! the plain forward/backward pair, the network can push three tangent
//! directions through alongside the values (forward-mode input Jacobian) and
//! backpropagate through that augmented computation.

use ndarray::{s, Array2, ArrayView1, ArrayView2, ArrayViewMut2, Axis};
use rand::Rng;

#[derive(Clone, Debug, PartialEq)]
pub struct Mlp {
    pub sizes: Vec<usize>,
    /// Apply the rectifier after the last layer too.
    pub activate_last: bool,
    pub params: Vec<f64>,
}

/// Activations kept for the reverse pass.
#[derive(Clone, Debug)]
pub struct MlpCache {
    /// Input of every layer (post-activation of the previous one), plus the
    /// output when the last layer is rectified.
    inputs: Vec<Array2<f64>>,
    /// Tangent inputs of every layer, when tangents were propagated.
    tangents: Option<Vec<[Array2<f64>; 3]>>,
}

impl Mlp {
    pub fn zeros(sizes: &[usize], activate_last: bool) -> Self {
        let len = sizes.windows(2).map(|w| w[0] * w[1] + w[1]).sum();
        Self {
            sizes: sizes.to_vec(),
            activate_last,
            params: vec![0.0; len],
        }
    }

    /// He-uniform weights, zero biases. `last_scale` multiplies the final
    /// layer's range (0 gives a zero-initialised output layer).
    pub fn random(sizes: &[usize], activate_last: bool, last_scale: f64, rng: &mut impl Rng) -> Self {
        let mut mlp = Self::zeros(sizes, activate_last);
        let layers = mlp.layers();
        for l in 0..layers {
            let (off, n_in, n_out) = mlp.layer_offset(l);
            let mut bound = (6.0 / n_in as f64).sqrt();
            if l + 1 == layers {
                bound *= last_scale;
            }
            for v in &mut mlp.params[off..off + n_in * n_out] {
                *v = if bound > 0.0 { rng.random_range(-bound..bound) } else { 0.0 };
            }
        }
        mlp
    }

    pub fn layers(&self) -> usize {
        self.sizes.len() - 1
    }

    pub fn input_dim(&self) -> usize {
        self.sizes[0]
    }

    pub fn output_dim(&self) -> usize {
        *self.sizes.last().unwrap()
    }

    /// `(weight offset, fan in, fan out)`; the bias follows the weights.
    pub fn layer_offset(&self, layer: usize) -> (usize, usize, usize) {
        let mut off = 0;
        for w in self.sizes.windows(2).take(layer) {
            off += w[0] * w[1] + w[1];
        }
        (off, self.sizes[layer], self.sizes[layer + 1])
    }

    /// Multiply-adds per sample.
    pub fn macs(&self) -> usize {
        self.sizes.windows(2).map(|w| w[0] * w[1]).sum()
    }

    fn weight(&self, layer: usize) -> (ArrayView2<'_, f64>, &[f64]) {
        let (off, n_in, n_out) = self.layer_offset(layer);
        let w = ArrayView2::from_shape((n_out, n_in), &self.params[off..off + n_in * n_out]).unwrap();
        (w, &self.params[off + n_in * n_out..off + n_in * n_out + n_out])
    }

    fn activated(&self, layer: usize) -> bool {
        layer + 1 < self.layers() || self.activate_last
    }

    pub fn forward(&self, x: ArrayView2<f64>) -> Array2<f64> {
        self.run(x, None, false).0
    }

    pub fn forward_cached(&self, x: ArrayView2<f64>) -> (Array2<f64>, MlpCache) {
        let (y, _, cache) = self.run(x, None, true);
        (y, cache.unwrap())
    }

    /// Forward pass carrying tangents `∂x/∂q_k` (one matrix per direction).
    /// Returns outputs, output tangents and the cache.
    pub fn forward_tangent(&self, x: ArrayView2<f64>, t: [ArrayView2<f64>; 3]) -> (Array2<f64>, [Array2<f64>; 3], MlpCache) {
        let (y, ty, cache) = self.run(x, Some(t), true);
        (y, ty.unwrap(), cache.unwrap())
    }

    #[allow(clippy::type_complexity)]
    fn run(
        &self,
        x: ArrayView2<f64>,
        t: Option<[ArrayView2<f64>; 3]>,
        keep: bool,
    ) -> (Array2<f64>, Option<[Array2<f64>; 3]>, Option<MlpCache>) {
        assert_eq!(x.ncols(), self.input_dim(), "mlp input width");
        let mut tan = t.map(|t| t.map(|v| v.to_owned()));
        let mut inputs: Vec<Array2<f64>> = Vec::new();
        let mut tangents = Vec::new();
        let mut h: Option<Array2<f64>> = None;
        for l in 0..self.layers() {
            let (w, b) = self.weight(l);
            let mut z = match &h {
                Some(h) => h.dot(&w.t()),
                None => x.dot(&w.t()),
            };
            z += &ArrayView1::from(b);
            let mut tz = tan.as_ref().map(|ts| [0, 1, 2].map(|k| ts[k].dot(&w.t())));
            if self.activated(l) {
                z.mapv_inplace(|v| v.max(0.0));
                if let Some(tz) = tz.as_mut() {
                    for t in tz.iter_mut() {
                        t.zip_mut_with(&z, |v, &o| {
                            if o <= 0.0 {
                                *v = 0.0
                            }
                        });
                    }
                }
            }
            if keep {
                inputs.push(h.take().unwrap_or_else(|| x.to_owned()));
                if let Some(ts) = tan.take() {
                    tangents.push(ts);
                }
            }
            h = Some(z);
            tan = tz;
        }
        let h = h.unwrap();
        let cache = keep.then(|| {
            if self.activate_last {
                inputs.push(h.clone());
            }
            MlpCache {
                inputs,
                tangents: if tangents.is_empty() { None } else { Some(tangents) },
            }
        });
        (h, tan, cache)
    }

    /// Reverse pass. Accumulates into `grads` (same layout as `params`) and
    /// returns the input gradient.
    pub fn backward(&self, cache: &MlpCache, dy: Array2<f64>, grads: &mut [f64]) -> Array2<f64> {
        self.backward_tangent(cache, dy, None, grads).0
    }

    /// Reverse pass through the tangent-augmented forward. `dt` are the
    /// gradients of the output tangents. Returns the gradients of the input
    /// and of the input tangents.
    #[allow(clippy::type_complexity)]
    pub fn backward_tangent(
        &self,
        cache: &MlpCache,
        dy: Array2<f64>,
        dt: Option<[Array2<f64>; 3]>,
        grads: &mut [f64],
    ) -> (Array2<f64>, Option<[Array2<f64>; 3]>) {
        let mut g = dy;
        let mut gt = dt;
        for l in (0..self.layers()).rev() {
            if self.activated(l) {
                // rectifier outputs are the next layer's inputs
                let out = &cache.inputs[l + 1];
                g.zip_mut_with(out, |v, &o| {
                    if o <= 0.0 {
                        *v = 0.0
                    }
                });
                if let Some(gt) = gt.as_mut() {
                    for t in gt.iter_mut() {
                        t.zip_mut_with(out, |v, &o| {
                            if o <= 0.0 {
                                *v = 0.0
                            }
                        });
                    }
                }
            }
            let (off, n_in, n_out) = self.layer_offset(l);
            let x = &cache.inputs[l];
            {
                let (wg, bg) = grads[off..off + n_in * n_out + n_out].split_at_mut(n_in * n_out);
                let mut wg = ArrayViewMut2::from_shape((n_out, n_in), wg).unwrap();
                wg += &g.t().dot(x);
                if let (Some(gt), Some(ts)) = (gt.as_ref(), cache.tangents.as_ref()) {
                    for k in 0..3 {
                        wg += &gt[k].t().dot(&ts[l][k]);
                    }
                }
                for (b, s) in bg.iter_mut().zip(g.sum_axis(Axis(0)).iter()) {
                    *b += s;
                }
            }
            let (w, _) = self.weight(l);
            g = g.dot(&w);
            gt = gt.map(|gt| gt.map(|t| t.dot(&w)));
        }
        (g, gt)
    }
}

/// Copy `src` into columns `[col, col + src.ncols())` of `dst`.
pub fn put_columns(dst: &mut Array2<f64>, col: usize, src: ArrayView2<f64>) {
    dst.slice_mut(s![.., col..col + src.ncols()]).assign(&src);
}
