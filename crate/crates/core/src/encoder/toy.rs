//! The toy convolutional backbone with hand-written backpropagation.
//!
//! Layout: four 3×3 convolutions with stride 2 and padding 1
//! (3→16→32→64→128 channels, ReLU after each), global average pooling,
//! a linear projection to the embedding dimension, then L2 normalization.
//! Activations are kept channel-major, `[C, B·H·W]`, so each convolution is
//! one matrix product against an im2col buffer.

use ndarray::linalg::general_mat_mul;
use ndarray::{Array2, ArrayView2, ArrayViewMut2, Axis};
use num_traits::{Float, FromPrimitive};
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};

use crate::raster::Raster;

pub const CONV_CHANNELS: [usize; 4] = [16, 32, 64, 128];
const IN_CHANNELS: usize = 3;
const KERNEL: usize = 3;

/// Scalar types the network can run in: `f32` for training, `f64` for
/// gradient checks.
pub trait Real:
    ndarray::LinalgScalar + Float + FromPrimitive + std::fmt::Debug + Send + Sync + 'static
{
}
impl Real for f32 {}
impl Real for f64 {}

/// A named, flat parameter array.
#[derive(Debug, Clone, PartialEq)]
pub struct Param<T> {
    pub name: String,
    pub shape: Vec<usize>,
    pub value: Vec<T>,
}

impl<T: Real> Param<T> {
    fn zeros(name: &str, shape: Vec<usize>) -> Self {
        let n = shape.iter().product();
        Self {
            name: name.to_string(),
            shape,
            value: vec![T::zero(); n],
        }
    }

    fn matrix(&self) -> ArrayView2<'_, T> {
        let rows = self.shape[0];
        let cols = self.value.len() / rows;
        ArrayView2::from_shape((rows, cols), &self.value).expect("param shape")
    }
}

/// Input batch in channel-major layout.
#[derive(Debug, Clone)]
pub struct ImageBatch<T> {
    pub data: Array2<T>,
    pub batch: usize,
    pub height: usize,
    pub width: usize,
}

impl<T: Real> ImageBatch<T> {
    pub fn from_rasters(images: &[&Raster]) -> Self {
        let (h, w) = images
            .first()
            .map(|r| (r.height(), r.width()))
            .unwrap_or((0, 0));
        let b = images.len();
        let plane = h * w;
        let mut data = Array2::zeros((IN_CHANNELS, b * plane));
        for (bi, img) in images.iter().enumerate() {
            for c in 0..IN_CHANNELS {
                let src = img.plane(c);
                let mut row = data.row_mut(c);
                let dst = row.as_slice_mut().expect("contiguous");
                for (d, s) in dst[bi * plane..(bi + 1) * plane].iter_mut().zip(src) {
                    *d = T::from_f32(*s).expect("finite");
                }
            }
        }
        Self {
            data,
            batch: b,
            height: h,
            width: w,
        }
    }
}

struct ConvCache<T> {
    cols: Array2<T>,
    /// Post-ReLU output, used as the activation mask.
    out: Array2<T>,
    in_hw: (usize, usize),
}

/// Intermediate values retained for the backward pass.
pub struct Tape<T> {
    convs: Vec<ConvCache<T>>,
    batch: usize,
    last_hw: (usize, usize),
    pooled: Array2<T>,
    norms: Vec<T>,
    embeddings: Array2<T>,
}

#[derive(Debug, Clone)]
pub struct ToyNet<T> {
    params: Vec<Param<T>>,
    embedding_dim: usize,
}

fn out_dim(n: usize) -> usize {
    (n + 2 - KERNEL) / 2 + 1
}

fn im2col<T: Real>(input: &Array2<T>, channels: usize, b: usize, h: usize, w: usize) -> Array2<T> {
    let (ho, wo) = (out_dim(h), out_dim(w));
    let n = b * ho * wo;
    let mut cols = Array2::zeros((channels * KERNEL * KERNEL, n));
    let src = input.as_slice().expect("contiguous");
    let dst = cols.as_slice_mut().expect("contiguous");
    for c in 0..channels {
        for ky in 0..KERNEL {
            for kx in 0..KERNEL {
                let row = (c * KERNEL + ky) * KERNEL + kx;
                let drow = &mut dst[row * n..(row + 1) * n];
                for bi in 0..b {
                    let base = (c * b + bi) * h * w;
                    for oy in 0..ho {
                        let iy = (2 * oy + ky) as isize - 1;
                        if iy < 0 || iy >= h as isize {
                            continue;
                        }
                        let srow = base + iy as usize * w;
                        let out_base = (bi * ho + oy) * wo;
                        for ox in 0..wo {
                            let ix = (2 * ox + kx) as isize - 1;
                            if ix >= 0 && ix < w as isize {
                                drow[out_base + ox] = src[srow + ix as usize];
                            }
                        }
                    }
                }
            }
        }
    }
    cols
}

fn col2im<T: Real>(cols: &Array2<T>, channels: usize, b: usize, h: usize, w: usize) -> Array2<T> {
    let (ho, wo) = (out_dim(h), out_dim(w));
    let n = b * ho * wo;
    let mut out = Array2::zeros((channels, b * h * w));
    let src = cols.as_slice().expect("contiguous");
    let dst = out.as_slice_mut().expect("contiguous");
    for c in 0..channels {
        for ky in 0..KERNEL {
            for kx in 0..KERNEL {
                let row = (c * KERNEL + ky) * KERNEL + kx;
                let srow = &src[row * n..(row + 1) * n];
                for bi in 0..b {
                    let base = (c * b + bi) * h * w;
                    for oy in 0..ho {
                        let iy = (2 * oy + ky) as isize - 1;
                        if iy < 0 || iy >= h as isize {
                            continue;
                        }
                        let drow = base + iy as usize * w;
                        let in_base = (bi * ho + oy) * wo;
                        for ox in 0..wo {
                            let ix = (2 * ox + kx) as isize - 1;
                            if ix >= 0 && ix < w as isize {
                                dst[drow + ix as usize] = dst[drow + ix as usize] + srow[in_base + ox];
                            }
                        }
                    }
                }
            }
        }
    }
    out
}

impl<T: Real> ToyNet<T> {
    /// He-normal convolution weights, scaled-normal projection, zero biases.
    pub fn new(embedding_dim: usize, seed: u64) -> Self {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut params = Vec::new();
        let mut cin = IN_CHANNELS;
        for (i, &cout) in CONV_CHANNELS.iter().enumerate() {
            let fan_in = cin * KERNEL * KERNEL;
            let mut weight = Param::zeros(&format!("conv{}.weight", i + 1), vec![cout, cin, KERNEL, KERNEL]);
            let normal = Normal::new(0.0, (2.0 / fan_in as f64).sqrt()).expect("valid std");
            for v in &mut weight.value {
                *v = T::from_f64(normal.sample(&mut rng)).expect("finite");
            }
            params.push(weight);
            params.push(Param::zeros(&format!("conv{}.bias", i + 1), vec![cout]));
            cin = cout;
        }
        let mut fc = Param::zeros("proj.weight", vec![cin, embedding_dim]);
        let normal = Normal::new(0.0, (1.0 / cin as f64).sqrt()).expect("valid std");
        for v in &mut fc.value {
            *v = T::from_f64(normal.sample(&mut rng)).expect("finite");
        }
        params.push(fc);
        params.push(Param::zeros("proj.bias", vec![embedding_dim]));
        Self {
            params,
            embedding_dim,
        }
    }

    pub fn embedding_dim(&self) -> usize {
        self.embedding_dim
    }

    pub fn params(&self) -> &[Param<T>] {
        &self.params
    }

    pub fn params_mut(&mut self) -> &mut [Param<T>] {
        &mut self.params
    }

    pub fn parameter_count(&self) -> usize {
        self.params.iter().map(|p| p.value.len()).sum()
    }

    /// Replaces all parameters; names and shapes must match.
    pub fn load_params(&mut self, params: Vec<Param<T>>) -> Result<(), String> {
        if params.len() != self.params.len() {
            return Err(format!(
                "expected {} parameter arrays, found {}",
                self.params.len(),
                params.len()
            ));
        }
        for (have, new) in self.params.iter().zip(&params) {
            if have.name != new.name || have.shape != new.shape || new.value.len() != have.value.len() {
                return Err(format!(
                    "parameter mismatch: expected {} {:?}, found {} {:?}",
                    have.name, have.shape, new.name, new.shape
                ));
            }
        }
        self.params = params;
        Ok(())
    }

    /// Forward pass returning unit-norm embeddings `[B, D]` and the tape.
    pub fn forward(&self, input: &ImageBatch<T>) -> (Array2<T>, Tape<T>) {
        let b = input.batch;
        let (mut h, mut w) = (input.height, input.width);
        let mut act = input.data.clone();
        let mut cin = IN_CHANNELS;
        let mut convs = Vec::with_capacity(CONV_CHANNELS.len());
        for (i, &cout) in CONV_CHANNELS.iter().enumerate() {
            let weight = self.params[2 * i].matrix();
            let bias = &self.params[2 * i + 1].value;
            let cols = im2col(&act, cin, b, h, w);
            let mut out = Array2::zeros((cout, cols.ncols()));
            general_mat_mul(T::one(), &weight, &cols, T::zero(), &mut out);
            for (mut row, &bv) in out.axis_iter_mut(Axis(0)).zip(bias) {
                row.mapv_inplace(|v| (v + bv).max(T::zero()));
            }
            convs.push(ConvCache {
                cols,
                out: out.clone(),
                in_hw: (h, w),
            });
            act = out;
            h = out_dim(h);
            w = out_dim(w);
            cin = cout;
        }

        let plane = h * w;
        let scale = T::one() / T::from_usize(plane).expect("plane size");
        let mut pooled = Array2::zeros((b, cin));
        for c in 0..cin {
            let row = act.row(c);
            let row = row.as_slice().expect("contiguous");
            for bi in 0..b {
                let s = row[bi * plane..(bi + 1) * plane]
                    .iter()
                    .fold(T::zero(), |a, &v| a + v);
                pooled[[bi, c]] = s * scale;
            }
        }

        let fc_w = self.params[8].matrix();
        let fc_b = &self.params[9].value;
        let mut projected = Array2::zeros((b, self.embedding_dim));
        general_mat_mul(T::one(), &pooled, &fc_w, T::zero(), &mut projected);
        for mut row in projected.axis_iter_mut(Axis(0)) {
            for (v, &bv) in row.iter_mut().zip(fc_b) {
                *v = *v + bv;
            }
        }

        let mut embeddings = projected;
        let mut norms = Vec::with_capacity(b);
        for mut row in embeddings.axis_iter_mut(Axis(0)) {
            let n = row.iter().fold(T::zero(), |a, &v| a + v * v).sqrt();
            let n = n.max(T::from_f64(1e-12).expect("const"));
            row.mapv_inplace(|v| v / n);
            norms.push(n);
        }

        let tape = Tape {
            convs,
            batch: b,
            last_hw: (h, w),
            pooled,
            norms,
            embeddings: embeddings.clone(),
        };
        (embeddings, tape)
    }

    /// Gradients of a scalar objective with respect to every parameter,
    /// given its gradient with respect to the embeddings.
    pub fn backward(&self, tape: &Tape<T>, grad_embeddings: &Array2<T>) -> Vec<Vec<T>> {
        let b = tape.batch;
        let mut grads: Vec<Vec<T>> = self.params.iter().map(|p| vec![T::zero(); p.value.len()]).collect();

        // through the normalization: dy = (de - e (e . de)) / |y|
        let mut d_proj = grad_embeddings.clone();
        for (i, mut row) in d_proj.axis_iter_mut(Axis(0)).enumerate() {
            let e = tape.embeddings.row(i);
            let dot = e.iter().zip(row.iter()).fold(T::zero(), |a, (&x, &y)| a + x * y);
            let n = tape.norms[i];
            for (g, &ev) in row.iter_mut().zip(e.iter()) {
                *g = (*g - ev * dot) / n;
            }
        }

        // projection
        {
            let cin = tape.pooled.ncols();
            let mut dw = ArrayViewMut2::from_shape((cin, self.embedding_dim), &mut grads[8]).expect("shape");
            general_mat_mul(T::one(), &tape.pooled.t(), &d_proj, T::zero(), &mut dw);
        }
        for row in d_proj.axis_iter(Axis(0)) {
            for (g, &v) in grads[9].iter_mut().zip(row.iter()) {
                *g = *g + v;
            }
        }
        let mut d_pooled = Array2::zeros(tape.pooled.raw_dim());
        general_mat_mul(T::one(), &d_proj, &self.params[8].matrix().t(), T::zero(), &mut d_pooled);

        // global average pool
        let (h, w) = tape.last_hw;
        let plane = h * w;
        let scale = T::one() / T::from_usize(plane).expect("plane size");
        let channels = *CONV_CHANNELS.last().expect("layers");
        let mut d_act = Array2::zeros((channels, b * plane));
        for c in 0..channels {
            let mut row = d_act.row_mut(c);
            let row = row.as_slice_mut().expect("contiguous");
            for bi in 0..b {
                let g = d_pooled[[bi, c]] * scale;
                for v in &mut row[bi * plane..(bi + 1) * plane] {
                    *v = g;
                }
            }
        }

        for i in (0..CONV_CHANNELS.len()).rev() {
            let cache = &tape.convs[i];
            let cin = if i == 0 { IN_CHANNELS } else { CONV_CHANNELS[i - 1] };
            // relu mask
            ndarray::Zip::from(&mut d_act).and(&cache.out).for_each(|g, &o| {
                if o <= T::zero() {
                    *g = T::zero();
                }
            });
            {
                let cout = CONV_CHANNELS[i];
                let mut dw = ArrayViewMut2::from_shape((cout, cin * KERNEL * KERNEL), &mut grads[2 * i])
                    .expect("shape");
                general_mat_mul(T::one(), &d_act, &cache.cols.t(), T::zero(), &mut dw);
            }
            for (g, row) in grads[2 * i + 1].iter_mut().zip(d_act.axis_iter(Axis(0))) {
                *g = row.iter().fold(T::zero(), |a, &v| a + v);
            }
            if i > 0 {
                let weight = self.params[2 * i].matrix();
                let mut d_cols = Array2::zeros(cache.cols.raw_dim());
                general_mat_mul(T::one(), &weight.t(), &d_act, T::zero(), &mut d_cols);
                let (ih, iw) = cache.in_hw;
                d_act = col2im(&d_cols, cin, b, ih, iw);
            }
        }
        grads
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::Rng;

    fn random_batch<T: Real>(b: usize, h: usize, w: usize, seed: u64) -> ImageBatch<T> {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let rasters: Vec<Raster> = (0..b)
            .map(|_| {
                let data = (0..3 * h * w).map(|_| rng.random::<f32>()).collect();
                Raster::from_planar(h, w, data).unwrap()
            })
            .collect();
        let refs: Vec<&Raster> = rasters.iter().collect();
        ImageBatch::from_rasters(&refs)
    }

    /// Direct (loop) convolution used as an oracle for im2col + gemm.
    fn naive_conv(input: &Array2<f64>, weight: &[f64], bias: &[f64], cin: usize, cout: usize, b: usize, h: usize, w: usize) -> Array2<f64> {
        let (ho, wo) = (out_dim(h), out_dim(w));
        let mut out = Array2::zeros((cout, b * ho * wo));
        for co in 0..cout {
            for bi in 0..b {
                for oy in 0..ho {
                    for ox in 0..wo {
                        let mut s = bias[co];
                        for ci in 0..cin {
                            for ky in 0..3 {
                                for kx in 0..3 {
                                    let iy = (2 * oy + ky) as isize - 1;
                                    let ix = (2 * ox + kx) as isize - 1;
                                    if iy < 0 || ix < 0 || iy >= h as isize || ix >= w as isize {
                                        continue;
                                    }
                                    let v = input[[ci, (bi * h + iy as usize) * w + ix as usize]];
                                    s += v * weight[((co * cin + ci) * 3 + ky) * 3 + kx];
                                }
                            }
                        }
                        out[[co, (bi * ho + oy) * wo + ox]] = s.max(0.0);
                    }
                }
            }
        }
        out
    }

    #[test]
    fn first_layer_matches_direct_convolution() {
        let mut net = ToyNet::<f64>::new(8, 3);
        for (i, v) in net.params_mut()[1].value.iter_mut().enumerate() {
            *v = (i as f64 - 8.0) * 0.01;
        }
        let batch = random_batch::<f64>(2, 7, 6, 1);
        let (_, tape) = net.forward(&batch);
        let expected = naive_conv(&batch.data, &net.params()[0].value, &net.params()[1].value, 3, 16, 2, 7, 6);
        let got = &tape.convs[0].out;
        assert_eq!(got.dim(), expected.dim());
        for (a, b) in got.iter().zip(expected.iter()) {
            assert!((a - b).abs() < 1e-12);
        }
    }

    #[test]
    fn col2im_is_adjoint_of_im2col() {
        // <im2col(x), y> == <x, col2im(y)>
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        let (c, b, h, w) = (2, 2, 5, 6);
        let x = Array2::from_shape_fn((c, b * h * w), |_| rng.random::<f64>());
        let cols = im2col(&x, c, b, h, w);
        let y = Array2::from_shape_fn(cols.raw_dim(), |_| rng.random::<f64>());
        let lhs: f64 = cols.iter().zip(y.iter()).map(|(a, b)| a * b).sum();
        let back = col2im(&y, c, b, h, w);
        let rhs: f64 = x.iter().zip(back.iter()).map(|(a, b)| a * b).sum();
        assert!((lhs - rhs).abs() < 1e-10);
    }

    #[test]
    fn parameter_count_matches_architecture() {
        let net = ToyNet::<f32>::new(64, 0);
        let convs: usize = [(3, 16), (16, 32), (32, 64), (64, 128)]
            .iter()
            .map(|&(i, o)| i * o * 9 + o)
            .sum();
        assert_eq!(net.parameter_count(), convs + 128 * 64 + 64);
        assert!(net.parameter_count() < 1_000_000);
    }

    #[test]
    fn gradients_match_finite_differences() {
        let net = ToyNet::<f64>::new(6, 11);
        let batch = random_batch::<f64>(3, 9, 9, 2);
        let mut rng = ChaCha8Rng::seed_from_u64(4);
        let coeffs = Array2::from_shape_fn((3, 6), |_| rng.random::<f64>() - 0.5);
        let objective = |n: &ToyNet<f64>| -> f64 {
            let (e, _) = n.forward(&batch);
            // a nonlinear scalar function of the embeddings
            e.iter().zip(coeffs.iter()).map(|(a, c)| c * a + 0.5 * a * a * c).sum()
        };
        let (e, tape) = net.forward(&batch);
        let grad_e = Array2::from_shape_fn(e.raw_dim(), |(i, j)| coeffs[[i, j]] * (1.0 + e[[i, j]]));
        let grads = net.backward(&tape, &grad_e);

        let step = 1e-6;
        let mut checked = 0;
        for (pi, param) in net.params().iter().enumerate() {
            for _ in 0..4 {
                let k = rng.random_range(0..param.value.len());
                let mut plus = net.clone();
                plus.params_mut()[pi].value[k] += step;
                let mut minus = net.clone();
                minus.params_mut()[pi].value[k] -= step;
                let fd = (objective(&plus) - objective(&minus)) / (2.0 * step);
                let an = grads[pi][k];
                let denom = fd.abs().max(an.abs()).max(1e-7);
                assert!(
                    (fd - an).abs() / denom < 1e-3 || (fd - an).abs() < 1e-9,
                    "{} [{k}]: analytic {an} vs fd {fd}",
                    param.name
                );
                checked += 1;
            }
        }
        assert_eq!(checked, 40);
    }
}
