//! Fully connected bias-free networks and the two forward passes.
//!
//! Activations are carried as batches: a matrix with one sample per row.
//! Weight `W_ℓ` has shape `(n_ℓ, n_{ℓ-1})`, so a layer computes
//! `Z_ℓ = H_{ℓ-1} · W_ℓᵀ`. The feedback matrix `F` has shape `(n_0, n_L)` and
//! the modulated pass feeds `X − E · Fᵀ`.

use std::f64::consts::{FRAC_1_SQRT_2, PI};
use std::fmt;
use std::str::FromStr;

use crate::error::{FlabError, Result};
use crate::numerics::{gaussian, matmul, matmul_nt, uniform, Matrix, Rng};

const NORM_EPS: f64 = 1e-12;

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum ActivationKind {
    Relu,
    Tanh,
    /// `erf(x/√2)`
    Erf,
    Linear,
    /// Row-wise softmax; output layer only.
    Softmax,
}

impl ActivationKind {
    pub fn name(self) -> &'static str {
        match self {
            ActivationKind::Relu => "relu",
            ActivationKind::Tanh => "tanh",
            ActivationKind::Erf => "erf",
            ActivationKind::Linear => "linear",
            ActivationKind::Softmax => "softmax",
        }
    }

    /// Scalar activation. Softmax has no scalar form and is handled row-wise.
    #[inline]
    pub fn scalar(self, x: f64) -> f64 {
        match self {
            ActivationKind::Relu => x.max(0.0),
            ActivationKind::Tanh => x.tanh(),
            ActivationKind::Erf => libm::erf(x * FRAC_1_SQRT_2),
            ActivationKind::Linear | ActivationKind::Softmax => x,
        }
    }

    /// Scalar derivative at preactivation `x`. ReLU uses 0 at the kink.
    #[inline]
    pub fn scalar_derivative(self, x: f64) -> f64 {
        match self {
            ActivationKind::Relu => {
                if x > 0.0 {
                    1.0
                } else {
                    0.0
                }
            }
            ActivationKind::Tanh => {
                let t = x.tanh();
                1.0 - t * t
            }
            ActivationKind::Erf => (2.0 / PI).sqrt() * (-0.5 * x * x).exp(),
            ActivationKind::Linear | ActivationKind::Softmax => 1.0,
        }
    }

    /// Evaluates one row: fills `out` and the diagonal of the Jacobian `deriv`.
    pub fn apply_row(self, pre: &[f64], out: &mut [f64], deriv: &mut [f64]) {
        match self {
            ActivationKind::Softmax => {
                let max = pre.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
                let mut total = 0.0;
                for (o, &z) in out.iter_mut().zip(pre) {
                    *o = (z - max).exp();
                    total += *o;
                }
                for (o, d) in out.iter_mut().zip(deriv.iter_mut()) {
                    *o /= total;
                    *d = *o * (1.0 - *o);
                }
            }
            _ => {
                for ((o, d), &z) in out.iter_mut().zip(deriv.iter_mut()).zip(pre) {
                    *o = self.scalar(z);
                    *d = self.scalar_derivative(z);
                }
            }
        }
    }

    /// Jacobian–vector product for one row. The Jacobian is symmetric for
    /// every supported activation, so this is also the vector–Jacobian product.
    pub fn jvp_row(self, out: &[f64], deriv: &[f64], v: &[f64], res: &mut [f64]) {
        match self {
            ActivationKind::Softmax => {
                let sv: f64 = out.iter().zip(v).map(|(s, x)| s * x).sum();
                for ((r, &s), &x) in res.iter_mut().zip(out).zip(v) {
                    *r = s * (x - sv);
                }
            }
            _ => {
                for ((r, &d), &x) in res.iter_mut().zip(deriv).zip(v) {
                    *r = d * x;
                }
            }
        }
    }
}

impl fmt::Display for ActivationKind {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

impl FromStr for ActivationKind {
    type Err = FlabError;

    fn from_str(s: &str) -> Result<Self> {
        match s.trim().to_ascii_lowercase().as_str() {
            "relu" => Ok(ActivationKind::Relu),
            "tanh" => Ok(ActivationKind::Tanh),
            "erf" => Ok(ActivationKind::Erf),
            "linear" | "identity" => Ok(ActivationKind::Linear),
            "softmax" => Ok(ActivationKind::Softmax),
            other => Err(FlabError::InvalidConfig(format!(
                "unknown activation '{other}'"
            ))),
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum InitKind {
    HeUniform,
    HeNormal,
}

impl InitKind {
    pub fn name(self) -> &'static str {
        match self {
            InitKind::HeUniform => "he_uniform",
            InitKind::HeNormal => "he_normal",
        }
    }
}

impl fmt::Display for InitKind {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

impl FromStr for InitKind {
    type Err = FlabError;

    fn from_str(s: &str) -> Result<Self> {
        match s.trim().to_ascii_lowercase().as_str() {
            "he_uniform" | "uniform" => Ok(InitKind::HeUniform),
            "he_normal" | "normal" => Ok(InitKind::HeNormal),
            other => Err(FlabError::InvalidConfig(format!("unknown init '{other}'"))),
        }
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct NetworkConfig {
    /// `[n_0, …, n_L]`
    pub layer_sizes: Vec<usize>,
    /// One per weight layer.
    pub activations: Vec<ActivationKind>,
    pub init: InitKind,
    /// Dimensionless multiplier on the feedback spread.
    pub feedback_scale: f64,
    pub dropout_rate: f64,
    pub normalize_activations: bool,
    pub seed: u64,
}

impl NetworkConfig {
    /// ReLU hidden layers and a softmax output.
    pub fn classifier(layer_sizes: Vec<usize>) -> Self {
        let depth = layer_sizes.len().saturating_sub(1);
        let mut activations = vec![ActivationKind::Relu; depth];
        if let Some(last) = activations.last_mut() {
            *last = ActivationKind::Softmax;
        }
        Self {
            layer_sizes,
            activations,
            init: InitKind::HeNormal,
            feedback_scale: 0.05,
            dropout_rate: 0.0,
            normalize_activations: false,
            seed: 0,
        }
    }

    pub fn depth(&self) -> usize {
        self.layer_sizes.len().saturating_sub(1)
    }

    pub fn validate(&self) -> Result<()> {
        if self.layer_sizes.len() < 2 {
            return Err(FlabError::InvalidConfig(
                "need at least an input and an output layer".into(),
            ));
        }
        if self.layer_sizes.contains(&0) {
            return Err(FlabError::InvalidConfig(
                "layer sizes must be positive".into(),
            ));
        }
        if self.activations.len() != self.depth() {
            return Err(FlabError::InvalidConfig(format!(
                "{} activations given for {} layers",
                self.activations.len(),
                self.depth()
            )));
        }
        if let Some(pos) = self.activations[..self.depth() - 1]
            .iter()
            .position(|&a| a == ActivationKind::Softmax)
        {
            return Err(FlabError::InvalidConfig(format!(
                "softmax is only allowed on the output layer (found on layer {})",
                pos + 1
            )));
        }
        if !(0.0..1.0).contains(&self.dropout_rate) {
            return Err(FlabError::InvalidConfig(format!(
                "dropout rate must be in [0, 1), got {}",
                self.dropout_rate
            )));
        }
        if !(self.feedback_scale >= 0.0) {
            return Err(FlabError::InvalidConfig(
                "feedback scale must be nonnegative".into(),
            ));
        }
        Ok(())
    }

    /// Target spread of the feedback entries: the standard deviation for
    /// He-normal, the half-range for He-uniform.
    pub fn feedback_spread(&self) -> f64 {
        let fan_in = self.layer_sizes[0] as f64;
        match self.init {
            InitKind::HeNormal => self.feedback_scale * (2.0 / fan_in).sqrt(),
            InitKind::HeUniform => self.feedback_scale * 2.0 * (6.0 / fan_in).sqrt(),
        }
    }

    /// Entry standard deviation of a freshly drawn `F`.
    pub fn feedback_std(&self) -> f64 {
        match self.init {
            InitKind::HeNormal => self.feedback_spread(),
            InitKind::HeUniform => self.feedback_spread() / 3f64.sqrt(),
        }
    }
}

#[derive(Clone, Debug)]
pub struct Network {
    pub weights: Vec<Matrix>,
    pub feedback: Matrix,
    pub feedback_factors: Option<Vec<Matrix>>,
    pub config: NetworkConfig,
}

impl Network {
    /// Builds a network from explicit matrices, checking the shape chain.
    pub fn from_parts(
        config: NetworkConfig,
        weights: Vec<Matrix>,
        feedback: Matrix,
    ) -> Result<Self> {
        config.validate()?;
        let net = Self {
            weights,
            feedback,
            feedback_factors: None,
            config,
        };
        net.check_shapes()?;
        Ok(net)
    }

    pub fn depth(&self) -> usize {
        self.weights.len()
    }

    pub fn layer_sizes(&self) -> &[usize] {
        &self.config.layer_sizes
    }

    pub fn input_dim(&self) -> usize {
        self.config.layer_sizes[0]
    }

    pub fn output_dim(&self) -> usize {
        *self.config.layer_sizes.last().unwrap()
    }

    pub fn activation(&self, layer: usize) -> ActivationKind {
        self.config.activations[layer]
    }

    pub fn check_shapes(&self) -> Result<()> {
        let sizes = &self.config.layer_sizes;
        if self.weights.len() + 1 != sizes.len() {
            return Err(FlabError::InvalidConfig(format!(
                "{} weight matrices for {} layer sizes",
                self.weights.len(),
                sizes.len()
            )));
        }
        for (l, w) in self.weights.iter().enumerate() {
            if w.shape() != (sizes[l + 1], sizes[l]) {
                return Err(FlabError::dims(
                    "weights",
                    w.shape(),
                    (sizes[l + 1], sizes[l]),
                ));
            }
        }
        let fb = (sizes[0], *sizes.last().unwrap());
        if self.feedback.shape() != fb {
            return Err(FlabError::dims("feedback", self.feedback.shape(), fb));
        }
        if let Some(factors) = &self.feedback_factors {
            if factors.len() != self.weights.len() {
                return Err(FlabError::InvalidConfig(format!(
                    "{} feedback factors for {} layers",
                    factors.len(),
                    self.weights.len()
                )));
            }
            for (l, f) in factors.iter().enumerate() {
                if f.shape() != (sizes[l], sizes[l + 1]) {
                    return Err(FlabError::dims(
                        "feedback factor",
                        f.shape(),
                        (sizes[l], sizes[l + 1]),
                    ));
                }
            }
        }
        Ok(())
    }

    /// `F_1 · F_2 · … · F_L`, if factorized.
    pub fn factor_product(&self) -> Option<Result<Matrix>> {
        self.feedback_factors.as_ref().map(|fs| {
            let mut acc = fs[0].clone();
            for f in &fs[1..] {
                acc = matmul(&acc, f)?;
            }
            Ok(acc)
        })
    }

    pub fn is_finite(&self) -> bool {
        self.weights.iter().all(Matrix::is_finite) && self.feedback.is_finite()
    }
}

/// Draws weights (He init) and the feedback matrix.
pub fn init_network(cfg: &NetworkConfig, rng: &mut Rng) -> Result<Network> {
    cfg.validate()?;
    let sizes = &cfg.layer_sizes;
    let mut weights = Vec::with_capacity(cfg.depth());
    for l in 1..sizes.len() {
        let fan_in = sizes[l - 1] as f64;
        let w = match cfg.init {
            InitKind::HeUniform => {
                let bound = (6.0 / fan_in).sqrt();
                uniform(rng, sizes[l], sizes[l - 1], -bound, bound)?
            }
            InitKind::HeNormal => {
                gaussian(rng, sizes[l], sizes[l - 1], 0.0, (2.0 / fan_in).sqrt())?
            }
        };
        weights.push(w);
    }
    let (n0, nl) = (sizes[0], *sizes.last().unwrap());
    let spread = cfg.feedback_spread();
    let feedback = match cfg.init {
        InitKind::HeUniform => uniform(rng, n0, nl, -spread, spread)?,
        InitKind::HeNormal => gaussian(rng, n0, nl, 0.0, spread)?,
    };
    Network::from_parts(cfg.clone(), weights, feedback)
}

#[derive(Clone, Debug)]
pub struct ForwardTrace {
    /// `h_0 … h_L`; `h_0` is the input actually fed.
    pub activations: Vec<Matrix>,
    /// `W_ℓ h_{ℓ-1}` for `ℓ = 1 … L`.
    pub preactivations: Vec<Matrix>,
    /// Elementwise `σ'_ℓ(W_ℓ h_{ℓ-1})` for `ℓ = 1 … L` (the Jacobian diagonal for softmax).
    pub derivatives: Vec<Matrix>,
    /// 0/1 keep masks for hidden layers; empty when dropout is off.
    pub dropout_masks: Vec<Matrix>,
    /// Per-sample norms of each hidden layer before normalization; empty when off.
    pub hidden_norms: Vec<Vec<f64>>,
}

impl ForwardTrace {
    pub fn output(&self) -> &Matrix {
        self.activations.last().unwrap()
    }

    pub fn batch_size(&self) -> usize {
        self.activations[0].rows()
    }
}

enum Masks<'a> {
    Off,
    Draw(&'a mut Rng),
    Reuse(&'a [Matrix]),
}

fn forward(net: &Network, input: Matrix, mut masks: Masks<'_>) -> Result<ForwardTrace> {
    if input.cols() != net.input_dim() {
        return Err(FlabError::dims(
            "forward input",
            input.shape(),
            (input.rows(), net.input_dim()),
        ));
    }
    let depth = net.depth();
    let rate = net.config.dropout_rate;
    let dropout = rate > 0.0 && !matches!(masks, Masks::Off);
    if let Masks::Reuse(m) = &masks {
        if dropout && m.len() != depth - 1 {
            return Err(FlabError::InvalidArgument(format!(
                "expected {} dropout masks, got {}",
                depth - 1,
                m.len()
            )));
        }
    }
    let keep_scale = 1.0 / (1.0 - rate);
    let batch = input.rows();

    let mut activations = Vec::with_capacity(depth + 1);
    let mut preactivations = Vec::with_capacity(depth);
    let mut derivatives = Vec::with_capacity(depth);
    let mut dropout_masks = Vec::new();
    let mut hidden_norms = Vec::new();
    activations.push(input);

    for l in 0..depth {
        let z = matmul_nt(&activations[l], &net.weights[l])?;
        let act = net.activation(l);
        let width = z.cols();
        let mut h = Matrix::zeros(batch, width);
        let mut d = Matrix::zeros(batch, width);
        for ((hr, dr), zr) in h
            .data_mut()
            .chunks_mut(width)
            .zip(d.data_mut().chunks_mut(width))
            .zip(z.data().chunks(width))
        {
            act.apply_row(zr, hr, dr);
        }
        let hidden = l + 1 < depth;
        if hidden && dropout {
            let mask = match &mut masks {
                Masks::Draw(rng) => {
                    let mut m = Matrix::zeros(batch, width);
                    for v in m.data_mut() {
                        *v = if rng.uniform() < rate { 0.0 } else { 1.0 };
                    }
                    m
                }
                Masks::Reuse(ms) => {
                    let m = ms[l].clone();
                    if m.shape() != h.shape() {
                        return Err(FlabError::dims("dropout mask", m.shape(), h.shape()));
                    }
                    m
                }
                Masks::Off => unreachable!(),
            };
            for (v, &k) in h.data_mut().iter_mut().zip(mask.data()) {
                *v *= k * keep_scale;
            }
            dropout_masks.push(mask);
        }
        if hidden && net.config.normalize_activations {
            let mut norms = Vec::with_capacity(batch);
            for r in 0..batch {
                let row = h.row_mut(r);
                let n = row.iter().map(|v| v * v).sum::<f64>().sqrt();
                let inv = 1.0 / (n + NORM_EPS);
                row.iter_mut().for_each(|v| *v *= inv);
                norms.push(n);
            }
            hidden_norms.push(norms);
        }
        preactivations.push(z);
        derivatives.push(d);
        activations.push(h);
    }
    Ok(ForwardTrace {
        activations,
        preactivations,
        derivatives,
        dropout_masks,
        hidden_norms,
    })
}

/// First forward pass. Dropout masks are drawn from `dropout` when given and
/// dropout is enabled; `None` disables dropout (evaluation mode).
pub fn clean_pass(net: &Network, x: &Matrix, dropout: Option<&mut Rng>) -> Result<ForwardTrace> {
    let masks = match dropout {
        Some(rng) => Masks::Draw(rng),
        None => Masks::Off,
    };
    forward(net, x.clone(), masks)
}

/// `X − E·Fᵀ`, the input of the modulated pass.
pub fn modulated_input(net: &Network, x: &Matrix, e: &Matrix) -> Result<Matrix> {
    if e.cols() != net.output_dim() || e.rows() != x.rows() {
        return Err(FlabError::dims(
            "error",
            e.shape(),
            (x.rows(), net.output_dim()),
        ));
    }
    let fe = matmul_nt(e, &net.feedback)?;
    x.sub(&fe)
}

/// Second forward pass on `x − F e`, reusing the clean pass's dropout masks.
pub fn modulated_pass(
    net: &Network,
    x: &Matrix,
    e: &Matrix,
    masks: &[Matrix],
) -> Result<ForwardTrace> {
    let input = modulated_input(net, x, e)?;
    let masks = if net.config.dropout_rate > 0.0 && !masks.is_empty() {
        Masks::Reuse(masks)
    } else {
        Masks::Off
    };
    forward(net, input, masks)
}

/// Forward pass with the given weights and input, used by rules that need
/// partially updated weights.
pub(crate) fn forward_with_masks(
    net: &Network,
    input: Matrix,
    masks: &[Matrix],
) -> Result<ForwardTrace> {
    let masks = if net.config.dropout_rate > 0.0 && !masks.is_empty() {
        Masks::Reuse(masks)
    } else {
        Masks::Off
    };
    forward(net, input, masks)
}

fn apply_dropout_scale(net: &Network, trace: &ForwardTrace, l: usize, v: &mut Matrix) {
    if !trace.dropout_masks.is_empty() {
        let scale = 1.0 / (1.0 - net.config.dropout_rate);
        for (x, &k) in v.data_mut().iter_mut().zip(trace.dropout_masks[l].data()) {
            *x *= k * scale;
        }
    }
}

/// The normalization Jacobian is symmetric, so this serves both directions.
fn apply_norm_jacobian(trace: &ForwardTrace, l: usize, v: &mut Matrix) {
    if trace.hidden_norms.is_empty() {
        return;
    }
    // y = u / (‖u‖ + ε):  dy = du/(n+ε) − u (uᵀdu) / (n (n+ε)²), with u = y (n+ε).
    let h = &trace.activations[l + 1];
    for r in 0..v.rows() {
        let n = trace.hidden_norms[l][r];
        let y = h.row(r);
        let dv = v.row_mut(r);
        let denom = n + NORM_EPS;
        if n == 0.0 {
            dv.iter_mut().for_each(|x| *x /= denom);
            continue;
        }
        // uᵀdu = (n+ε) yᵀdu;  u (uᵀdu) = (n+ε)² y (yᵀdu)
        let ydu: f64 = y.iter().zip(dv.iter()).map(|(a, b)| a * b).sum();
        for (x, &yy) in dv.iter_mut().zip(y) {
            *x = *x / denom - yy * ydu / n;
        }
    }
}

/// Applies the linearization of hidden-layer dropout and normalization to a
/// tangent `v` of the activation at layer `l` (0-based weight index).
pub(crate) fn hidden_post_jvp(net: &Network, trace: &ForwardTrace, l: usize, v: &mut Matrix) {
    if l + 1 >= net.depth() {
        return;
    }
    apply_dropout_scale(net, trace, l, v);
    apply_norm_jacobian(trace, l, v);
}

/// Transpose of [`hidden_post_jvp`]: the same two maps in reverse order.
pub(crate) fn hidden_post_vjp(net: &Network, trace: &ForwardTrace, l: usize, g: &mut Matrix) {
    if l + 1 >= net.depth() {
        return;
    }
    apply_norm_jacobian(trace, l, g);
    apply_dropout_scale(net, trace, l, g);
}

/// First-order prediction of `h_ℓ − h_ℓ^{err}` for every layer:
/// `δh_0 = F e`, `δh_ℓ = σ'_ℓ ⊙ (W_ℓ δh_{ℓ-1})`.
pub fn taylor_delta(net: &Network, trace: &ForwardTrace, e: &Matrix) -> Result<Vec<Matrix>> {
    let batch = trace.batch_size();
    if e.shape() != (batch, net.output_dim()) {
        return Err(FlabError::dims(
            "taylor_delta error",
            e.shape(),
            (batch, net.output_dim()),
        ));
    }
    let mut delta = matmul_nt(e, &net.feedback)?;
    let mut out = Vec::with_capacity(net.depth());
    for l in 0..net.depth() {
        let dz = matmul_nt(&delta, &net.weights[l])?;
        let act = net.activation(l);
        let mut dh = Matrix::zeros(dz.rows(), dz.cols());
        let h = &trace.activations[l + 1];
        let d = &trace.derivatives[l];
        for r in 0..dz.rows() {
            let w = dz.cols();
            let res = &mut dh.data_mut()[r * w..(r + 1) * w];
            act.jvp_row(h.row(r), d.row(r), dz.row(r), res);
        }
        hidden_post_jvp(net, trace, l, &mut dh);
        out.push(dh.clone());
        delta = dh;
    }
    Ok(out)
}
