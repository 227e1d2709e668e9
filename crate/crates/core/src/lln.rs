//! Landmark localization network.
//!
//! Several convolution branches with different kernel sizes run over the
//! base feature map; their outputs are concatenated into `D` channels and a
//! `1×1×D` combiner followed by ReLU yields a non-negative activation map.
//! The activation map weights the local features into a single L2-normalized
//! image embedding for metric learning.

use rand::{Rng, SeedableRng};

use crate::error::{Error, Result};
use crate::tensor::{
    conv2d_backward, conv2d_forward, conv2d_param_grads, l2_norm, l2_normalize,
    l2_normalize_backward, relu, relu_backward, ConvGradients, ConvLayer, FeatureMap, L2_EPS,
};

/// Shape of a freshly initialized network.
#[derive(Clone, Debug, PartialEq, serde::Serialize, serde::Deserialize)]
#[serde(default)]
pub struct LlnConfig {
    pub kernel_sizes: Vec<usize>,
    pub branch_channels: usize,
    /// Apply ReLU to each branch before concatenation.
    pub branch_relu: bool,
}

impl Default for LlnConfig {
    fn default() -> Self {
        Self {
            kernel_sizes: vec![3, 5, 7],
            branch_channels: 32,
            branch_relu: true,
        }
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct LlnParams {
    pub branches: Vec<ConvLayer>,
    pub combiner: ConvLayer,
    pub branch_relu: bool,
}

impl LlnParams {
    /// Xavier-uniform branches and combiner, zero biases.
    pub fn xavier<R: Rng + ?Sized>(
        in_channels: usize,
        config: &LlnConfig,
        rng: &mut R,
    ) -> Result<Self> {
        if config.kernel_sizes.is_empty() {
            return Err(Error::config("LLN needs at least one branch"));
        }
        let branches = config
            .kernel_sizes
            .iter()
            .map(|&k| ConvLayer::xavier_uniform(k, in_channels, config.branch_channels, rng))
            .collect::<Result<Vec<_>>>()?;
        let concat = config.branch_channels * config.kernel_sizes.len();
        let combiner = ConvLayer::xavier_uniform(1, concat, 1, rng)?;
        let params = Self {
            branches,
            combiner,
            branch_relu: config.branch_relu,
        };
        params.validate()?;
        Ok(params)
    }

    /// [`LlnParams::xavier`] driven by a ChaCha8 stream seeded with `seed`.
    pub fn seeded(in_channels: usize, config: &LlnConfig, seed: u64) -> Result<Self> {
        let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(seed);
        Self::xavier(in_channels, config, &mut rng)
    }

    pub fn validate(&self) -> Result<()> {
        let first = self
            .branches
            .first()
            .ok_or_else(|| Error::config("LLN needs at least one branch"))?;
        for b in &self.branches {
            b.validate()?;
            if b.in_channels != first.in_channels {
                return Err(Error::config("all LLN branches must share in_channels"));
            }
        }
        self.combiner.validate()?;
        if self.combiner.kernel_size != 1 || self.combiner.out_channels != 1 {
            return Err(Error::config("LLN combiner must be 1x1 with one output"));
        }
        if self.combiner.in_channels != self.concat_channels() {
            return Err(Error::config(format!(
                "combiner expects {} channels, branches produce {}",
                self.combiner.in_channels,
                self.concat_channels()
            )));
        }
        Ok(())
    }

    pub fn in_channels(&self) -> usize {
        self.branches[0].in_channels
    }

    /// `D`, the sum of all branch output channels.
    pub fn concat_channels(&self) -> usize {
        self.branches.iter().map(|b| b.out_channels).sum()
    }

    pub fn num_params(&self) -> usize {
        self.branches.iter().map(ConvLayer::num_params).sum::<usize>() + self.combiner.num_params()
    }

    fn layers(&self) -> impl Iterator<Item = &ConvLayer> {
        self.branches.iter().chain(std::iter::once(&self.combiner))
    }

    /// Flattens as branch weights, branch bias (per branch), then combiner.
    pub fn flatten(&self) -> Vec<f64> {
        let mut out = Vec::with_capacity(self.num_params());
        for l in self.layers() {
            out.extend_from_slice(&l.weights);
            out.extend_from_slice(&l.bias);
        }
        out
    }

    pub fn assign_flat(&mut self, flat: &[f64]) -> Result<()> {
        if flat.len() != self.num_params() {
            return Err(Error::config(format!(
                "flat parameter length {} != {}",
                flat.len(),
                self.num_params()
            )));
        }
        let mut pos = 0;
        for l in self.branches.iter_mut().chain(std::iter::once(&mut self.combiner)) {
            let nw = l.weights.len();
            l.weights.copy_from_slice(&flat[pos..pos + nw]);
            pos += nw;
            let nb = l.bias.len();
            l.bias.copy_from_slice(&flat[pos..pos + nb]);
            pos += nb;
        }
        Ok(())
    }
}

/// Non-negative `h × w` saliency map.
#[derive(Clone, Debug, PartialEq)]
pub struct ActivationMap {
    height: usize,
    width: usize,
    values: Vec<f64>,
}

impl ActivationMap {
    pub fn new(height: usize, width: usize, values: Vec<f64>) -> Result<Self> {
        if values.len() != height * width || height == 0 || width == 0 {
            return Err(Error::config(format!(
                "activation map {height}x{width} with {} values",
                values.len()
            )));
        }
        if values.iter().any(|v| !v.is_finite() || *v < 0.0) {
            return Err(Error::config("activation values must be finite and >= 0"));
        }
        Ok(Self {
            height,
            width,
            values,
        })
    }

    pub fn height(&self) -> usize {
        self.height
    }

    pub fn width(&self) -> usize {
        self.width
    }

    /// Row-major values.
    pub fn values(&self) -> &[f64] {
        &self.values
    }

    pub fn get(&self, y: usize, x: usize) -> f64 {
        self.values[y * self.width + x]
    }
}

/// Aggregated image embedding.
#[derive(Clone, Debug, PartialEq)]
pub struct Embedding {
    pub values: Vec<f64>,
    pub normalized: bool,
    /// The aggregate was (numerically) zero; `values` came out of the ε floor.
    pub degenerate: bool,
}

impl Embedding {
    pub fn dim(&self) -> usize {
        self.values.len()
    }
}

/// Intermediate values of one forward pass, kept for the backward pass.
#[derive(Clone, Debug)]
pub struct LlnTrace {
    branch_pre: Vec<FeatureMap>,
    concat: FeatureMap,
    combiner_pre: FeatureMap,
    pub activation: ActivationMap,
}

fn check_features(features: &FeatureMap, params: &LlnParams) -> Result<()> {
    params.validate()?;
    if features.channels() != params.in_channels() {
        return Err(Error::config(format!(
            "LLN expects {} channels, feature map has {}",
            params.in_channels(),
            features.channels()
        )));
    }
    Ok(())
}

pub fn lln_trace(features: &FeatureMap, params: &LlnParams) -> Result<LlnTrace> {
    check_features(features, params)?;
    let (h, w) = (features.height(), features.width());
    let branch_pre = params
        .branches
        .iter()
        .map(|b| conv2d_forward(features, b))
        .collect::<Result<Vec<_>>>()?;
    let d = params.concat_channels();
    let mut concat = FeatureMap::zeros(h, w, d);
    let mut start = 0;
    for pre in &branch_pre {
        let act = if params.branch_relu { relu(pre) } else { pre.clone() };
        let c = act.channels();
        for y in 0..h {
            for x in 0..w {
                concat.cell_mut(y, x)[start..start + c].copy_from_slice(act.cell(y, x));
            }
        }
        start += c;
    }
    let combiner_pre = conv2d_forward(&concat, &params.combiner)?;
    let activation = ActivationMap {
        height: h,
        width: w,
        values: combiner_pre.data().iter().map(|v| v.max(0.0)).collect(),
    };
    Ok(LlnTrace {
        branch_pre,
        concat,
        combiner_pre,
        activation,
    })
}

/// `relu(conv1x1(concat(branch_k(features))))`.
pub fn lln_forward(features: &FeatureMap, params: &LlnParams) -> Result<ActivationMap> {
    Ok(lln_trace(features, params)?.activation)
}

fn weighted_sum(features: &FeatureMap, weights: &ActivationMap) -> Result<Vec<f64>> {
    if features.height() != weights.height() || features.width() != weights.width() {
        return Err(Error::config(format!(
            "activation map {}x{} does not match feature grid {}x{}",
            weights.height(),
            weights.width(),
            features.height(),
            features.width()
        )));
    }
    let mut sum = vec![0.0; features.channels()];
    for (cell, &w) in features
        .data()
        .chunks_exact(features.channels())
        .zip(weights.values())
    {
        if w == 0.0 {
            continue;
        }
        for (s, &f) in sum.iter_mut().zip(cell) {
            *s += w * f;
        }
    }
    Ok(sum)
}

/// Activation-weighted sum of all local features, L2 normalized.
pub fn aggregate(features: &FeatureMap, weights: &ActivationMap) -> Result<Embedding> {
    let sum = weighted_sum(features, weights)?;
    let degenerate = l2_norm(&sum) <= L2_EPS;
    Ok(Embedding {
        values: l2_normalize(&sum),
        normalized: !degenerate,
        degenerate,
    })
}

/// Forward pass plus aggregation.
pub fn embed(features: &FeatureMap, params: &LlnParams) -> Result<Embedding> {
    aggregate(features, &lln_forward(features, params)?)
}

/// Parameter gradients, shaped like [`LlnParams`].
#[derive(Clone, Debug, PartialEq)]
pub struct LlnGradients {
    pub branches: Vec<ConvGradients>,
    pub combiner: ConvGradients,
}

impl LlnGradients {
    pub fn zeros_like(params: &LlnParams) -> Self {
        Self {
            branches: params.branches.iter().map(ConvGradients::zeros_like).collect(),
            combiner: ConvGradients::zeros_like(&params.combiner),
        }
    }

    pub fn add_assign(&mut self, other: &LlnGradients) {
        for (a, b) in self.branches.iter_mut().zip(&other.branches) {
            a.add_assign(b);
        }
        self.combiner.add_assign(&other.combiner);
    }

    /// Same ordering as [`LlnParams::flatten`].
    pub fn flatten(&self) -> Vec<f64> {
        let mut out = Vec::new();
        for g in self.branches.iter().chain(std::iter::once(&self.combiner)) {
            out.extend_from_slice(&g.weights);
            out.extend_from_slice(&g.bias);
        }
        out
    }
}

/// Back-propagates `grad_embedding` (w.r.t. the normalized embedding) into
/// the network parameters, reusing a forward trace. Features are frozen and
/// receive no gradient.
pub fn lln_backward_with_trace(
    features: &FeatureMap,
    params: &LlnParams,
    trace: &LlnTrace,
    grad_embedding: &[f64],
) -> Result<LlnGradients> {
    check_features(features, params)?;
    if grad_embedding.len() != features.channels() {
        return Err(Error::config(format!(
            "embedding gradient has {} entries, expected {}",
            grad_embedding.len(),
            features.channels()
        )));
    }
    let mut grads = LlnGradients::zeros_like(params);
    if grad_embedding.iter().all(|&g| g == 0.0) {
        return Ok(grads);
    }
    let (h, w) = (features.height(), features.width());
    let raw = weighted_sum(features, &trace.activation)?;
    let grad_raw = l2_normalize_backward(&raw, grad_embedding);

    // d/dw_ij = grad_raw · f_ij, masked by the output ReLU.
    let mut grad_pre = FeatureMap::zeros(h, w, 1);
    for y in 0..h {
        for x in 0..w {
            let pre = trace.combiner_pre.get(y, x, 0);
            if pre > 0.0 {
                let f = features.cell(y, x);
                grad_pre.cell_mut(y, x)[0] = f.iter().zip(&grad_raw).map(|(a, b)| a * b).sum();
            }
        }
    }
    if grad_pre.data().iter().all(|&g| g == 0.0) {
        return Ok(grads);
    }

    let comb = conv2d_backward(&trace.concat, &params.combiner, &grad_pre)?;
    grads.combiner = comb.params;

    let mut start = 0;
    for (bi, (branch, pre)) in params.branches.iter().zip(&trace.branch_pre).enumerate() {
        let c = branch.out_channels;
        let mut g = FeatureMap::zeros(h, w, c);
        for y in 0..h {
            for x in 0..w {
                g.cell_mut(y, x)
                    .copy_from_slice(&comb.grad_input.cell(y, x)[start..start + c]);
            }
        }
        if params.branch_relu {
            g = relu_backward(pre, &g)?;
        }
        grads.branches[bi] = conv2d_param_grads(features, branch, &g)?;
        start += c;
    }
    Ok(grads)
}

pub fn lln_backward(
    features: &FeatureMap,
    params: &LlnParams,
    grad_embedding: &[f64],
) -> Result<LlnGradients> {
    let trace = lln_trace(features, params)?;
    lln_backward_with_trace(features, params, &trace, grad_embedding)
}
