//! Fully convolutional heatmap network with analytic backpropagation.

use ndarray::{s, Array1, Array2, Array3, ArrayView3, Axis};
use rand::Rng;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// One `k × k` convolution with zero padding `k/2`.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct LayerSpec {
    pub out_channels: usize,
    pub kernel: usize,
    pub stride: usize,
    pub relu: bool,
}

/// Layer list; the last layer must produce one channel (logits), which
/// are bilinearly upsampled to the input size.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct Architecture {
    pub input_channels: usize,
    pub layers: Vec<LayerSpec>,
}

impl Architecture {
    /// 6→16→32→32→1 with stride-2 downsampling in layers 2 and 3.
    pub fn toy() -> Self {
        Self::with_channels(6, &[16, 32, 32])
    }

    /// Three-layer net for gradient checks.
    pub fn micro(input_channels: usize) -> Self {
        Self {
            input_channels,
            layers: vec![
                LayerSpec { out_channels: 3, kernel: 3, stride: 1, relu: true },
                LayerSpec { out_channels: 4, kernel: 3, stride: 2, relu: true },
                LayerSpec { out_channels: 1, kernel: 3, stride: 1, relu: false },
            ],
        }
    }

    /// `hidden[0]` at stride 1, the rest at stride 2, then a 1-channel head.
    pub fn with_channels(input_channels: usize, hidden: &[usize]) -> Self {
        let mut layers: Vec<LayerSpec> = hidden
            .iter()
            .enumerate()
            .map(|(i, &c)| LayerSpec { out_channels: c, kernel: 3, stride: if i == 0 { 1 } else { 2 }, relu: true })
            .collect();
        layers.push(LayerSpec { out_channels: 1, kernel: 3, stride: 1, relu: false });
        Self { input_channels, layers }
    }

    pub fn validate(&self) -> Result<()> {
        if self.input_channels == 0 || self.layers.is_empty() {
            return Err(Error::Config("architecture needs input channels and at least one layer".into()));
        }
        for (i, l) in self.layers.iter().enumerate() {
            if l.kernel % 2 == 0 || l.stride == 0 || l.out_channels == 0 {
                return Err(Error::Config(format!("layer {i}: odd kernel, positive stride and channels required")));
            }
        }
        if self.layers.last().is_some_and(|l| l.out_channels != 1) {
            return Err(Error::Config("the last layer must output a single channel".into()));
        }
        Ok(())
    }

    fn in_channels(&self, layer: usize) -> usize {
        if layer == 0 {
            self.input_channels
        } else {
            self.layers[layer - 1].out_channels
        }
    }

    pub fn parameter_count(&self) -> usize {
        (0..self.layers.len())
            .map(|i| {
                let l = &self.layers[i];
                l.out_channels * (self.in_channels(i) * l.kernel * l.kernel + 1)
            })
            .sum()
    }
}

/// Weights `(C_out, C_in·k·k)` and biases of one layer.
#[derive(Debug, Clone, PartialEq)]
pub struct ConvParams {
    pub weight: Array2<f64>,
    pub bias: Array1<f64>,
}

/// Trainable parameters together with their architecture.
#[derive(Debug, Clone, PartialEq)]
pub struct NetworkParams {
    pub arch: Architecture,
    pub layers: Vec<ConvParams>,
}

impl NetworkParams {
    /// He-normal weights, zero biases.
    pub fn init<R: Rng + ?Sized>(arch: &Architecture, rng: &mut R) -> Result<Self> {
        arch.validate()?;
        let layers = arch
            .layers
            .iter()
            .enumerate()
            .map(|(i, l)| {
                let fan_in = arch.in_channels(i) * l.kernel * l.kernel;
                let normal = Normal::new(0.0, (2.0 / fan_in as f64).sqrt()).expect("positive std");
                ConvParams {
                    weight: Array2::from_shape_simple_fn((l.out_channels, fan_in), || normal.sample(rng)),
                    bias: Array1::zeros(l.out_channels),
                }
            })
            .collect();
        Ok(Self { arch: arch.clone(), layers })
    }

    /// All-zero tensors with this network's shapes.
    pub fn zeros_like(&self) -> Self {
        Self {
            arch: self.arch.clone(),
            layers: self
                .layers
                .iter()
                .map(|p| ConvParams { weight: Array2::zeros(p.weight.dim()), bias: Array1::zeros(p.bias.len()) })
                .collect(),
        }
    }

    pub fn parameter_count(&self) -> usize {
        self.layers.iter().map(|p| p.weight.len() + p.bias.len()).sum()
    }

    /// Named tensors in a fixed order: `conv{i}.weight`, `conv{i}.bias`.
    pub fn named_tensors(&self) -> Vec<(String, Vec<usize>, Vec<f64>)> {
        let mut out = Vec::new();
        for (i, p) in self.layers.iter().enumerate() {
            out.push((format!("conv{i}.weight"), p.weight.shape().to_vec(), p.weight.iter().copied().collect()));
            out.push((format!("conv{i}.bias"), p.bias.shape().to_vec(), p.bias.to_vec()));
        }
        out
    }

    pub fn is_finite(&self) -> bool {
        self.layers.iter().all(|p| p.weight.iter().chain(p.bias.iter()).all(|v| v.is_finite()))
    }

    /// `self += scale · other`.
    pub fn add_scaled(&mut self, other: &Self, scale: f64) {
        for (a, b) in self.layers.iter_mut().zip(&other.layers) {
            a.weight.scaled_add(scale, &b.weight);
            a.bias.scaled_add(scale, &b.bias);
        }
    }

    /// Flat mutable views over every scalar, weights before biases per layer.
    pub fn values_mut(&mut self) -> impl Iterator<Item = &mut f64> {
        self.layers.iter_mut().flat_map(|p| p.weight.iter_mut().chain(p.bias.iter_mut()))
    }

    pub fn values(&self) -> impl Iterator<Item = &f64> {
        self.layers.iter().flat_map(|p| p.weight.iter().chain(p.bias.iter()))
    }

    /// Logits at input resolution.
    pub fn logits(&self, x: ArrayView3<f64>) -> Result<Array2<f64>> {
        Ok(self.forward_cached(x)?.logits)
    }

    /// Heatmap in `[0, 1]`.
    pub fn forward(&self, x: ArrayView3<f64>) -> Result<Array2<f64>> {
        Ok(self.logits(x)?.mapv(sigmoid))
    }

    fn forward_cached(&self, x: ArrayView3<f64>) -> Result<ForwardCache> {
        let (c, h, w) = x.dim();
        if c != self.arch.input_channels {
            return Err(Error::Config(format!(
                "input has {c} channels, the network expects {}",
                self.arch.input_channels
            )));
        }
        if h == 0 || w == 0 {
            return Err(Error::Config("empty input".into()));
        }
        let mut cols = Vec::with_capacity(self.layers.len());
        let mut activations = Vec::with_capacity(self.layers.len());
        let mut shapes = Vec::with_capacity(self.layers.len());
        let mut current = x.as_standard_layout().into_owned();
        for (spec, p) in self.arch.layers.iter().zip(&self.layers) {
            let (ci, hi, wi) = current.dim();
            let (col, ho, wo) = im2col(&current, spec.kernel, spec.stride);
            let mut out = p.weight.dot(&col);
            for (mut row, b) in out.outer_iter_mut().zip(p.bias.iter()) {
                row += *b;
            }
            if spec.relu {
                out.mapv_inplace(|v| v.max(0.0));
            }
            shapes.push((ci, hi, wi));
            cols.push(col);
            let next = out.into_shape_with_order((spec.out_channels, ho, wo)).expect("contiguous conv output");
            activations.push(next.clone());
            current = next;
        }
        let coarse = current.index_axis(Axis(0), 0).to_owned();
        let up_h = bilinear_matrix(h, coarse.nrows());
        let up_w = bilinear_matrix(w, coarse.ncols());
        let logits = up_h.dot(&coarse).dot(&up_w.t());
        Ok(ForwardCache { cols, activations, shapes, up_h, up_w, logits })
    }

    /// Mean pixelwise binary cross-entropy against `target`, and its gradient.
    pub fn loss_and_gradient(&self, x: ArrayView3<f64>, target: &Array2<f64>) -> Result<(f64, NetworkParams)> {
        let cache = self.forward_cached(x)?;
        if cache.logits.dim() != target.dim() {
            return Err(Error::Config(format!(
                "target {:?} does not match output {:?}",
                target.dim(),
                cache.logits.dim()
            )));
        }
        let n = target.len() as f64;
        let loss = cache.logits.iter().zip(target.iter()).map(|(&z, &t)| bce_with_logits(z, t)).sum::<f64>() / n;
        let d_logits = ndarray::Zip::from(&cache.logits).and(target).map_collect(|&z, &t| (sigmoid(z) - t) / n);
        Ok((loss, self.backward(&cache, &d_logits)))
    }

    fn backward(&self, cache: &ForwardCache, d_logits: &Array2<f64>) -> NetworkParams {
        let mut grads = self.zeros_like();
        let d_coarse = cache.up_h.t().dot(d_logits).dot(&cache.up_w);
        let (hc, wc) = d_coarse.dim();
        let mut delta = d_coarse.into_shape_with_order((1, hc * wc)).expect("contiguous");
        for li in (0..self.layers.len()).rev() {
            let spec = &self.arch.layers[li];
            if spec.relu {
                let act = &cache.activations[li];
                let flat = act.view().into_shape_with_order(delta.dim()).expect("activation layout");
                ndarray::Zip::from(&mut delta).and(&flat).for_each(|d, &a| {
                    if a <= 0.0 {
                        *d = 0.0;
                    }
                });
            }
            grads.layers[li].weight = delta.dot(&cache.cols[li].t());
            grads.layers[li].bias = delta.sum_axis(Axis(1));
            if li > 0 {
                let d_cols = self.layers[li].weight.t().dot(&delta);
                let (ci, hi, wi) = cache.shapes[li];
                let dx = col2im(&d_cols, (ci, hi, wi), spec.kernel, spec.stride);
                delta = dx.into_shape_with_order((ci, hi * wi)).expect("contiguous");
            }
        }
        grads
    }
}

struct ForwardCache {
    cols: Vec<Array2<f64>>,
    /// Post-activation outputs of every layer.
    activations: Vec<Array3<f64>>,
    /// Input shape of every layer.
    shapes: Vec<(usize, usize, usize)>,
    up_h: Array2<f64>,
    up_w: Array2<f64>,
    logits: Array2<f64>,
}

pub fn sigmoid(z: f64) -> f64 {
    if z >= 0.0 {
        1.0 / (1.0 + (-z).exp())
    } else {
        let e = z.exp();
        e / (1.0 + e)
    }
}

/// Numerically stable `−t·ln σ(z) − (1−t)·ln(1−σ(z))`.
pub fn bce_with_logits(z: f64, t: f64) -> f64 {
    z.max(0.0) - z * t + (-z.abs()).exp().ln_1p()
}

fn out_size(n: usize, kernel: usize, stride: usize) -> usize {
    let pad = kernel / 2;
    (n + 2 * pad - kernel) / stride + 1
}

/// Patch matrix `(C·k·k, H_out·W_out)` for a zero-padded convolution.
fn im2col(x: &Array3<f64>, kernel: usize, stride: usize) -> (Array2<f64>, usize, usize) {
    let (c, h, w) = x.dim();
    let pad = kernel / 2;
    let ho = out_size(h, kernel, stride);
    let wo = out_size(w, kernel, stride);
    let mut cols = Array2::zeros((c * kernel * kernel, ho * wo));
    let src = x.as_slice().expect("standard layout");
    let dst = cols.as_slice_mut().expect("standard layout");
    for ch in 0..c {
        for ki in 0..kernel {
            for kj in 0..kernel {
                let row = (ch * kernel + ki) * kernel + kj;
                let out_row = &mut dst[row * ho * wo..(row + 1) * ho * wo];
                for oi in 0..ho {
                    let ii = (oi * stride + ki) as isize - pad as isize;
                    if ii < 0 || ii >= h as isize {
                        continue;
                    }
                    let base = (ch * h + ii as usize) * w;
                    for oj in 0..wo {
                        let jj = (oj * stride + kj) as isize - pad as isize;
                        if jj >= 0 && jj < w as isize {
                            out_row[oi * wo + oj] = src[base + jj as usize];
                        }
                    }
                }
            }
        }
    }
    (cols, ho, wo)
}

/// Adjoint of [`im2col`].
fn col2im(cols: &Array2<f64>, shape: (usize, usize, usize), kernel: usize, stride: usize) -> Array3<f64> {
    let (c, h, w) = shape;
    let pad = kernel / 2;
    let ho = out_size(h, kernel, stride);
    let wo = out_size(w, kernel, stride);
    let mut x = Array3::zeros((c, h, w));
    let src = cols.as_standard_layout();
    let src = src.as_slice().expect("standard layout");
    let dst = x.as_slice_mut().expect("standard layout");
    for ch in 0..c {
        for ki in 0..kernel {
            for kj in 0..kernel {
                let row = (ch * kernel + ki) * kernel + kj;
                let in_row = &src[row * ho * wo..(row + 1) * ho * wo];
                for oi in 0..ho {
                    let ii = (oi * stride + ki) as isize - pad as isize;
                    if ii < 0 || ii >= h as isize {
                        continue;
                    }
                    let base = (ch * h + ii as usize) * w;
                    for oj in 0..wo {
                        let jj = (oj * stride + kj) as isize - pad as isize;
                        if jj >= 0 && jj < w as isize {
                            dst[base + jj as usize] += in_row[oi * wo + oj];
                        }
                    }
                }
            }
        }
    }
    x
}

/// Linear-interpolation matrix `(n_out, n_in)` with half-pixel centres
/// (corners not aligned, edges clamped).
pub fn bilinear_matrix(n_out: usize, n_in: usize) -> Array2<f64> {
    let mut m = Array2::zeros((n_out, n_in));
    let scale = n_in as f64 / n_out as f64;
    for i in 0..n_out {
        let src = ((i as f64 + 0.5) * scale - 0.5).max(0.0);
        let lo = (src.floor() as usize).min(n_in - 1);
        let hi = (lo + 1).min(n_in - 1);
        let frac = src - lo as f64;
        m[[i, lo]] += 1.0 - frac;
        m[[i, hi]] += frac;
    }
    m
}

/// Shifts a `(C, H, W)` tensor by whole bins, filling with `fill`.
pub fn shift_tensor(x: &Array3<f64>, di: isize, dj: isize, fill: f64) -> Array3<f64> {
    let (c, h, w) = x.dim();
    let mut out = Array3::from_elem((c, h, w), fill);
    for i in 0..h as isize {
        for j in 0..w as isize {
            let (si, sj) = (i - di, j - dj);
            if si >= 0 && sj >= 0 && si < h as isize && sj < w as isize {
                out.slice_mut(s![.., i, j]).assign(&x.slice(s![.., si, sj]));
            }
        }
    }
    out
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    fn random_input(rng: &mut ChaCha8Rng, c: usize, h: usize, w: usize) -> Array3<f64> {
        Array3::from_shape_simple_fn((c, h, w), || rng.random_range(-1.0..1.0))
    }

    #[test]
    fn toy_parameter_count() {
        let arch = Architecture::toy();
        let expected = 16 * (6 * 9 + 1) + 32 * (16 * 9 + 1) + 32 * (32 * 9 + 1) + (32 * 9 + 1);
        assert_eq!(arch.parameter_count(), expected);
        let p = NetworkParams::init(&arch, &mut ChaCha8Rng::seed_from_u64(0)).unwrap();
        assert_eq!(p.parameter_count(), expected);
    }

    #[test]
    fn conv_matches_direct_loops() {
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let x = random_input(&mut rng, 2, 7, 6);
        let wt = Array2::from_shape_simple_fn((3, 18), || rng.random_range(-1.0..1.0));
        for stride in [1, 2] {
            let (col, ho, wo) = im2col(&x, 3, stride);
            let out = wt.dot(&col);
            for o in 0..3 {
                for oi in 0..ho {
                    for oj in 0..wo {
                        let mut acc = 0.0;
                        for c in 0..2 {
                            for ki in 0..3 {
                                for kj in 0..3 {
                                    let ii = (oi * stride + ki) as isize - 1;
                                    let jj = (oj * stride + kj) as isize - 1;
                                    if ii >= 0 && jj >= 0 && ii < 7 && jj < 6 {
                                        acc += wt[[o, c * 9 + ki * 3 + kj]] * x[[c, ii as usize, jj as usize]];
                                    }
                                }
                            }
                        }
                        assert!((out[[o, oi * wo + oj]] - acc).abs() < 1e-12);
                    }
                }
            }
        }
    }

    #[test]
    fn col2im_is_the_adjoint() {
        let mut rng = ChaCha8Rng::seed_from_u64(2);
        let x = random_input(&mut rng, 3, 9, 8);
        let (col, _, _) = im2col(&x, 3, 2);
        let g = Array2::from_shape_simple_fn(col.dim(), || rng.random_range(-1.0..1.0));
        let lhs: f64 = (&col * &g).sum();
        let rhs: f64 = (&x * &col2im(&g, x.dim(), 3, 2)).sum();
        assert!((lhs - rhs).abs() < 1e-10);
    }

    #[test]
    fn bilinear_rows_sum_to_one_and_identity_at_equal_size() {
        let m = bilinear_matrix(64, 16);
        for row in m.outer_iter() {
            assert!((row.sum() - 1.0).abs() < 1e-12);
        }
        assert_eq!(bilinear_matrix(5, 5), Array2::<f64>::eye(5));
        // Half-pixel convention: output pixel 2 of a 2× upsample sits a quarter bin past input 1.
        let m = bilinear_matrix(8, 4);
        assert!((m[[2, 0]] - 0.25).abs() < 1e-12 && (m[[2, 1]] - 0.75).abs() < 1e-12);
    }

    #[test]
    fn zero_final_layer_gives_constant_sigmoid_of_bias() {
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let mut p = NetworkParams::init(&Architecture::toy(), &mut rng).unwrap();
        let last = p.layers.last_mut().unwrap();
        last.weight.fill(0.0);
        last.bias.fill(-1.3);
        let out = p.forward(random_input(&mut rng, 6, 32, 32).view()).unwrap();
        assert_eq!(out.dim(), (32, 32));
        assert!(out.iter().all(|&v| (v - sigmoid(-1.3)).abs() < 1e-15));
    }

    #[test]
    fn gradient_matches_central_differences() {
        let mut rng = ChaCha8Rng::seed_from_u64(4);
        let mut p = NetworkParams::init(&Architecture::micro(2), &mut rng).unwrap();
        // Non-zero biases exercise every term.
        for v in p.layers.iter_mut().flat_map(|l| l.bias.iter_mut()) {
            *v = rng.random_range(-0.2..0.2);
        }
        let x = random_input(&mut rng, 2, 8, 8);
        let target = Array2::from_shape_simple_fn((8, 8), || rng.random_range(0.0..1.0));
        let (_, grad) = p.loss_and_gradient(x.view(), &target).unwrap();
        let analytic: Vec<f64> = grad.values().copied().collect();
        let h = 1e-6;
        let mut worst: f64 = 0.0;
        for idx in 0..analytic.len() {
            let mut plus = p.clone();
            *plus.values_mut().nth(idx).unwrap() += h;
            let mut minus = p.clone();
            *minus.values_mut().nth(idx).unwrap() -= h;
            let lp = plus.loss_and_gradient(x.view(), &target).unwrap().0;
            let lm = minus.loss_and_gradient(x.view(), &target).unwrap().0;
            let numeric = (lp - lm) / (2.0 * h);
            let rel = (numeric - analytic[idx]).abs() / numeric.abs().max(analytic[idx].abs()).max(1e-6);
            worst = worst.max(rel);
        }
        assert!(worst < 1e-4, "worst relative gradient error {worst}");
    }

    #[test]
    fn shifting_the_input_shifts_the_output() {
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        let p = NetworkParams::init(&Architecture::toy(), &mut rng).unwrap();
        let x = Array3::from_shape_fn((6, 64, 64), |(_, i, j)| {
            let d2 = (i as f64 - 24.0).powi(2) + (j as f64 - 20.0).powi(2);
            (-d2 / 8.0).exp()
        });
        let shifted = shift_tensor(&x, 8, 8, 0.0);
        let base = sigmoid(p.layers.last().unwrap().bias[0]);
        let a = p.forward(x.view()).unwrap().mapv(|v| (v - base).abs());
        let b = p.forward(shifted.view()).unwrap().mapv(|v| (v - base).abs());
        let argmax = |m: &Array2<f64>| {
            m.indexed_iter().fold(((0, 0), f64::NEG_INFINITY), |best, (ij, &v)| if v > best.1 { (ij, v) } else { best }).0
        };
        let (ai, aj) = argmax(&a);
        let (bi, bj) = argmax(&b);
        assert!((bi as isize - ai as isize - 8).abs() <= 1 && (bj as isize - aj as isize - 8).abs() <= 1);
        // Away from the borders the maps agree exactly up to the shift.
        for i in 12..52 {
            for j in 12..52 {
                assert!((b[[i + 8, j + 8]] - a[[i, j]]).abs() < 1e-12, "({i},{j})");
            }
        }
    }

    #[test]
    fn wrong_input_shape_is_a_config_error() {
        let p = NetworkParams::init(&Architecture::toy(), &mut ChaCha8Rng::seed_from_u64(6)).unwrap();
        assert!(matches!(p.forward(Array3::zeros((5, 16, 16)).view()), Err(Error::Config(_))));
    }
}
