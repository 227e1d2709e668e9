//! Dense tensor math sized for the landmark localization network.
//!
//! Everything operates on [`FeatureMap`], a row-major `(h, w, c)` grid of
//! local features. Values are held as `f64` in memory; files store `f32`.
//! Convolutions are stride 1 with zero SAME padding so that every output
//! grid lines up cell for cell with its input.

use rand::Rng;

use crate::error::{Error, Result};

/// Floor applied to the norm inside [`l2_normalize`].
pub const L2_EPS: f64 = 1e-12;

/// Dense `h × w × C` grid of local features, row-major `(h, w, c)`.
#[derive(Clone, Debug, PartialEq)]
pub struct FeatureMap {
    height: usize,
    width: usize,
    channels: usize,
    data: Vec<f64>,
}

impl FeatureMap {
    pub fn new(height: usize, width: usize, channels: usize, data: Vec<f64>) -> Result<Self> {
        if height == 0 || width == 0 || channels == 0 {
            return Err(Error::config(format!(
                "feature map dims must be positive, got {height}x{width}x{channels}"
            )));
        }
        if data.len() != height * width * channels {
            return Err(Error::config(format!(
                "feature map data length {} != {height}*{width}*{channels}",
                data.len()
            )));
        }
        if let Some(pos) = data.iter().position(|v| !v.is_finite()) {
            return Err(Error::config(format!(
                "feature map value at flat index {pos} is not finite"
            )));
        }
        Ok(Self {
            height,
            width,
            channels,
            data,
        })
    }

    pub fn zeros(height: usize, width: usize, channels: usize) -> Self {
        assert!(height > 0 && width > 0 && channels > 0, "empty feature map");
        Self {
            height,
            width,
            channels,
            data: vec![0.0; height * width * channels],
        }
    }

    /// Builds a map by evaluating `f(y, x, c)` at every entry.
    pub fn from_fn(
        height: usize,
        width: usize,
        channels: usize,
        mut f: impl FnMut(usize, usize, usize) -> f64,
    ) -> Self {
        let mut map = Self::zeros(height, width, channels);
        for y in 0..height {
            for x in 0..width {
                for c in 0..channels {
                    let i = map.offset(y, x, c);
                    map.data[i] = f(y, x, c);
                }
            }
        }
        map
    }

    pub fn height(&self) -> usize {
        self.height
    }

    pub fn width(&self) -> usize {
        self.width
    }

    pub fn channels(&self) -> usize {
        self.channels
    }

    pub fn cells(&self) -> usize {
        self.height * self.width
    }

    pub fn data(&self) -> &[f64] {
        &self.data
    }

    pub fn data_mut(&mut self) -> &mut [f64] {
        &mut self.data
    }

    pub fn into_data(self) -> Vec<f64> {
        self.data
    }

    #[inline]
    pub fn offset(&self, y: usize, x: usize, c: usize) -> usize {
        (y * self.width + x) * self.channels + c
    }

    #[inline]
    pub fn get(&self, y: usize, x: usize, c: usize) -> f64 {
        self.data[self.offset(y, x, c)]
    }

    /// The `C`-dimensional local feature at row `y`, column `x`.
    #[inline]
    pub fn cell(&self, y: usize, x: usize) -> &[f64] {
        let start = (y * self.width + x) * self.channels;
        &self.data[start..start + self.channels]
    }

    #[inline]
    pub fn cell_mut(&mut self, y: usize, x: usize) -> &mut [f64] {
        let start = (y * self.width + x) * self.channels;
        &mut self.data[start..start + self.channels]
    }

    fn same_shape(&self, other: &FeatureMap) -> bool {
        self.height == other.height && self.width == other.width && self.channels == other.channels
    }
}

/// One convolution layer. Weights are laid out `[ky][kx][in][out]`.
#[derive(Clone, Debug, PartialEq)]
pub struct ConvLayer {
    pub kernel_size: usize,
    pub in_channels: usize,
    pub out_channels: usize,
    pub weights: Vec<f64>,
    pub bias: Vec<f64>,
}

impl ConvLayer {
    pub fn zeros(kernel_size: usize, in_channels: usize, out_channels: usize) -> Result<Self> {
        let layer = Self {
            kernel_size,
            in_channels,
            out_channels,
            weights: vec![0.0; kernel_size * kernel_size * in_channels * out_channels],
            bias: vec![0.0; out_channels],
        };
        layer.validate()?;
        Ok(layer)
    }

    /// Glorot/Xavier uniform weights with zero bias.
    pub fn xavier_uniform<R: Rng + ?Sized>(
        kernel_size: usize,
        in_channels: usize,
        out_channels: usize,
        rng: &mut R,
    ) -> Result<Self> {
        let mut layer = Self::zeros(kernel_size, in_channels, out_channels)?;
        let receptive = (kernel_size * kernel_size) as f64;
        let fan_in = receptive * in_channels as f64;
        let fan_out = receptive * out_channels as f64;
        let limit = (6.0 / (fan_in + fan_out)).sqrt();
        for w in &mut layer.weights {
            *w = rng.random_range(-limit..limit);
        }
        Ok(layer)
    }

    pub fn validate(&self) -> Result<()> {
        if self.kernel_size == 0 || self.kernel_size.is_multiple_of(2) {
            return Err(Error::config(format!(
                "kernel size must be odd, got {}",
                self.kernel_size
            )));
        }
        if self.in_channels == 0 || self.out_channels == 0 {
            return Err(Error::config("conv layer needs at least one channel"));
        }
        let expected = self.kernel_size * self.kernel_size * self.in_channels * self.out_channels;
        if self.weights.len() != expected {
            return Err(Error::config(format!(
                "conv weights length {} != {expected}",
                self.weights.len()
            )));
        }
        if self.bias.len() != self.out_channels {
            return Err(Error::config(format!(
                "conv bias length {} != {}",
                self.bias.len(),
                self.out_channels
            )));
        }
        if self
            .weights
            .iter()
            .chain(&self.bias)
            .any(|v| !v.is_finite())
        {
            return Err(Error::config("conv layer has non-finite parameters"));
        }
        Ok(())
    }

    #[inline]
    pub fn weight_index(&self, ky: usize, kx: usize, i: usize, o: usize) -> usize {
        ((ky * self.kernel_size + kx) * self.in_channels + i) * self.out_channels + o
    }

    pub fn num_params(&self) -> usize {
        self.weights.len() + self.bias.len()
    }
}

/// Gradients of `sum(grad_out ⊙ conv(input))`.
#[derive(Clone, Debug, PartialEq)]
pub struct ConvGradients {
    pub weights: Vec<f64>,
    pub bias: Vec<f64>,
}

impl ConvGradients {
    pub fn zeros_like(layer: &ConvLayer) -> Self {
        Self {
            weights: vec![0.0; layer.weights.len()],
            bias: vec![0.0; layer.bias.len()],
        }
    }

    pub fn add_assign(&mut self, other: &ConvGradients) {
        for (a, b) in self.weights.iter_mut().zip(&other.weights) {
            *a += b;
        }
        for (a, b) in self.bias.iter_mut().zip(&other.bias) {
            *a += b;
        }
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct ConvBackward {
    pub params: ConvGradients,
    pub grad_input: FeatureMap,
}

fn check_conv_input(input: &FeatureMap, layer: &ConvLayer) -> Result<()> {
    layer.validate()?;
    if input.channels() != layer.in_channels {
        return Err(Error::config(format!(
            "conv expects {} input channels, feature map has {}",
            layer.in_channels,
            input.channels()
        )));
    }
    Ok(())
}

/// Stride-1 SAME convolution (cross-correlation, zero padding).
///
/// For every output cell and output channel the products are accumulated in
/// `ky, kx, i` order starting from the bias.
pub fn conv2d_forward(input: &FeatureMap, layer: &ConvLayer) -> Result<FeatureMap> {
    check_conv_input(input, layer)?;
    let (h, w) = (input.height(), input.width());
    let k = layer.kernel_size;
    let pad = (k / 2) as isize;
    let out_c = layer.out_channels;
    let mut out = FeatureMap::zeros(h, w, out_c);
    let mut acc = vec![0.0f64; out_c];
    for y in 0..h {
        for x in 0..w {
            acc.copy_from_slice(&layer.bias);
            for ky in 0..k {
                let sy = y as isize + ky as isize - pad;
                if sy < 0 || sy >= h as isize {
                    continue;
                }
                for kx in 0..k {
                    let sx = x as isize + kx as isize - pad;
                    if sx < 0 || sx >= w as isize {
                        continue;
                    }
                    let src = input.cell(sy as usize, sx as usize);
                    for (i, &v) in src.iter().enumerate() {
                        let base = layer.weight_index(ky, kx, i, 0);
                        let row = &layer.weights[base..base + out_c];
                        for (a, &wt) in acc.iter_mut().zip(row) {
                            *a += v * wt;
                        }
                    }
                }
            }
            out.cell_mut(y, x).copy_from_slice(&acc);
        }
    }
    Ok(out)
}

fn check_grad_out(input: &FeatureMap, layer: &ConvLayer, grad_out: &FeatureMap) -> Result<()> {
    check_conv_input(input, layer)?;
    if grad_out.height() != input.height()
        || grad_out.width() != input.width()
        || grad_out.channels() != layer.out_channels
    {
        return Err(Error::config(format!(
            "conv grad_out shape {}x{}x{} does not match output {}x{}x{}",
            grad_out.height(),
            grad_out.width(),
            grad_out.channels(),
            input.height(),
            input.width(),
            layer.out_channels
        )));
    }
    Ok(())
}

/// Gradients of the convolution parameters only. Used where the input is
/// frozen and its gradient would be discarded.
pub fn conv2d_param_grads(
    input: &FeatureMap,
    layer: &ConvLayer,
    grad_out: &FeatureMap,
) -> Result<ConvGradients> {
    check_grad_out(input, layer, grad_out)?;
    let (h, w) = (input.height(), input.width());
    let k = layer.kernel_size;
    let pad = (k / 2) as isize;
    let out_c = layer.out_channels;
    let mut grads = ConvGradients::zeros_like(layer);
    for y in 0..h {
        for x in 0..w {
            let g = grad_out.cell(y, x);
            if g.iter().all(|&v| v == 0.0) {
                continue;
            }
            for (b, &gv) in grads.bias.iter_mut().zip(g) {
                *b += gv;
            }
            for ky in 0..k {
                let sy = y as isize + ky as isize - pad;
                if sy < 0 || sy >= h as isize {
                    continue;
                }
                for kx in 0..k {
                    let sx = x as isize + kx as isize - pad;
                    if sx < 0 || sx >= w as isize {
                        continue;
                    }
                    let src = input.cell(sy as usize, sx as usize);
                    for (i, &v) in src.iter().enumerate() {
                        if v == 0.0 {
                            continue;
                        }
                        let base = layer.weight_index(ky, kx, i, 0);
                        let row = &mut grads.weights[base..base + out_c];
                        for (gw, &gv) in row.iter_mut().zip(g) {
                            *gw += v * gv;
                        }
                    }
                }
            }
        }
    }
    Ok(grads)
}

/// Full backward pass: parameter gradients plus the gradient w.r.t. the input.
pub fn conv2d_backward(
    input: &FeatureMap,
    layer: &ConvLayer,
    grad_out: &FeatureMap,
) -> Result<ConvBackward> {
    let params = conv2d_param_grads(input, layer, grad_out)?;
    let (h, w) = (input.height(), input.width());
    let k = layer.kernel_size;
    let pad = (k / 2) as isize;
    let out_c = layer.out_channels;
    let mut grad_input = FeatureMap::zeros(h, w, layer.in_channels);
    for y in 0..h {
        for x in 0..w {
            let g = grad_out.cell(y, x);
            for ky in 0..k {
                let sy = y as isize + ky as isize - pad;
                if sy < 0 || sy >= h as isize {
                    continue;
                }
                for kx in 0..k {
                    let sx = x as isize + kx as isize - pad;
                    if sx < 0 || sx >= w as isize {
                        continue;
                    }
                    let dst = grad_input.cell_mut(sy as usize, sx as usize);
                    for (i, d) in dst.iter_mut().enumerate() {
                        let base = layer.weight_index(ky, kx, i, 0);
                        let row = &layer.weights[base..base + out_c];
                        *d += row.iter().zip(g).map(|(wt, gv)| wt * gv).sum::<f64>();
                    }
                }
            }
        }
    }
    Ok(ConvBackward { params, grad_input })
}

pub fn relu(input: &FeatureMap) -> FeatureMap {
    let mut out = input.clone();
    for v in out.data_mut() {
        *v = v.max(0.0);
    }
    out
}

/// Passes `grad_out` through where `input > 0`; the subgradient at 0 is 0.
pub fn relu_backward(input: &FeatureMap, grad_out: &FeatureMap) -> Result<FeatureMap> {
    if !input.same_shape(grad_out) {
        return Err(Error::config("relu grad_out shape mismatch"));
    }
    let mut out = grad_out.clone();
    for (g, &x) in out.data_mut().iter_mut().zip(input.data()) {
        if x <= 0.0 {
            *g = 0.0;
        }
    }
    Ok(out)
}

/// Per-channel maximum over all cells.
pub fn global_max_pool(input: &FeatureMap) -> Vec<f64> {
    let mut out = vec![f64::NEG_INFINITY; input.channels()];
    for cell in input.data().chunks_exact(input.channels()) {
        for (m, &v) in out.iter_mut().zip(cell) {
            if v > *m {
                *m = v;
            }
        }
    }
    out
}

pub fn l2_norm(v: &[f64]) -> f64 {
    v.iter().map(|x| x * x).sum::<f64>().sqrt()
}

/// `v / max(‖v‖, L2_EPS)`.
pub fn l2_normalize(v: &[f64]) -> Vec<f64> {
    let denom = l2_norm(v).max(L2_EPS);
    v.iter().map(|x| x / denom).collect()
}

/// Vector-Jacobian product of [`l2_normalize`] at `v`.
pub fn l2_normalize_backward(v: &[f64], grad_out: &[f64]) -> Vec<f64> {
    assert_eq!(v.len(), grad_out.len(), "l2_normalize_backward length mismatch");
    let norm = l2_norm(v);
    if norm <= L2_EPS {
        // flat region of max(‖v‖, ε): plain scaling
        return grad_out.iter().map(|g| g / L2_EPS).collect();
    }
    let u: Vec<f64> = v.iter().map(|x| x / norm).collect();
    let proj: f64 = u.iter().zip(grad_out).map(|(a, b)| a * b).sum();
    grad_out
        .iter()
        .zip(&u)
        .map(|(g, ui)| (g - proj * ui) / norm)
        .collect()
}

/// Adam optimizer state.
#[derive(Clone, Debug, PartialEq)]
pub struct AdamState {
    pub step: u64,
    pub first_moment: Vec<f64>,
    pub second_moment: Vec<f64>,
    pub beta1: f64,
    pub beta2: f64,
    pub epsilon: f64,
}

impl AdamState {
    pub fn new(num_params: usize) -> Self {
        Self {
            step: 0,
            first_moment: vec![0.0; num_params],
            second_moment: vec![0.0; num_params],
            beta1: 0.9,
            beta2: 0.999,
            epsilon: 1e-8,
        }
    }
}

pub fn adam_step(params: &mut [f64], grads: &[f64], state: &mut AdamState, lr: f64) -> Result<()> {
    if params.len() != grads.len()
        || params.len() != state.first_moment.len()
        || params.len() != state.second_moment.len()
    {
        return Err(Error::config(format!(
            "adam length mismatch: params {}, grads {}, state {}/{}",
            params.len(),
            grads.len(),
            state.first_moment.len(),
            state.second_moment.len()
        )));
    }
    state.step += 1;
    let t = state.step as i32;
    let (b1, b2) = (state.beta1, state.beta2);
    let c1 = 1.0 - b1.powi(t);
    let c2 = 1.0 - b2.powi(t);
    for (((p, &g), m), v) in params
        .iter_mut()
        .zip(grads)
        .zip(state.first_moment.iter_mut())
        .zip(state.second_moment.iter_mut())
    {
        *m = b1 * *m + (1.0 - b1) * g;
        *v = b2 * *v + (1.0 - b2) * g * g;
        let m_hat = *m / c1;
        let v_hat = *v / c2;
        *p -= lr * m_hat / (v_hat.sqrt() + state.epsilon);
    }
    Ok(())
}
