//! Branch/trunk sub-network families: residual MLPs and Kolmogorov-Arnold
//! networks with Jacobi-polynomial edges.

use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::autodiff::{Graph, Var};
use crate::error::{Error, Result};
use crate::rng::StreamRng;
use crate::tensor::Tensor;

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Activation {
    #[default]
    Tanh,
    Sin,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ResNetConfig {
    pub input_dim: usize,
    pub hidden_width: usize,
    /// Must be even: hidden layers are grouped into residual blocks of two.
    pub num_hidden_layers: usize,
    pub output_dim: usize,
    #[serde(default)]
    pub activation: Activation,
}

impl ResNetConfig {
    pub fn has_projection(&self) -> bool {
        self.input_dim != self.hidden_width
    }

    pub fn validate(&self) -> Result<()> {
        if self.input_dim == 0 || self.hidden_width == 0 || self.output_dim == 0 {
            return Err(Error::Config("ResNet dimensions must be positive".into()));
        }
        if self.num_hidden_layers == 0 || self.num_hidden_layers % 2 != 0 {
            return Err(Error::Config(format!(
                "ResNet needs a positive even number of hidden layers, got {}",
                self.num_hidden_layers
            )));
        }
        Ok(())
    }

    pub fn param_count(&self) -> usize {
        let (i, h, o, l) = (
            self.input_dim,
            self.hidden_width,
            self.output_dim,
            self.num_hidden_layers,
        );
        let proj = if self.has_projection() { i * h + h } else { 0 };
        i * h + h + (l - 1) * (h * h + h) + h * o + o + proj
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct KanConfig {
    /// Node counts from input to output, e.g. `[1, 75, 75, 75, 75, 1140]`.
    pub layer_dims: Vec<usize>,
    #[serde(default = "default_order")]
    pub order: usize,
    #[serde(default = "default_jacobi")]
    pub alpha: f64,
    #[serde(default = "default_jacobi")]
    pub beta: f64,
}

fn default_order() -> usize {
    3
}

fn default_jacobi() -> f64 {
    1.0
}

impl KanConfig {
    /// Order-3 Jacobi basis with `α = β = 1`.
    pub fn new(layer_dims: Vec<usize>) -> Self {
        Self {
            layer_dims,
            order: default_order(),
            alpha: default_jacobi(),
            beta: default_jacobi(),
        }
    }

    pub fn input_dim(&self) -> usize {
        self.layer_dims[0]
    }

    pub fn output_dim(&self) -> usize {
        *self.layer_dims.last().expect("validated")
    }

    pub fn validate(&self) -> Result<()> {
        if self.layer_dims.len() < 2 || self.layer_dims.contains(&0) {
            return Err(Error::Config(format!(
                "KAN needs at least two positive layer sizes, got {:?}",
                self.layer_dims
            )));
        }
        if self.alpha <= -1.0 || self.beta <= -1.0 {
            return Err(Error::Config("Jacobi parameters must exceed -1".into()));
        }
        Ok(())
    }

    pub fn param_count(&self) -> usize {
        self.layer_dims
            .windows(2)
            .map(|w| w[0] * w[1] * (self.order + 1))
            .sum()
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(tag = "family", rename_all = "snake_case")]
pub enum NetworkConfig {
    Resnet(ResNetConfig),
    Kan(KanConfig),
}

impl NetworkConfig {
    pub fn input_dim(&self) -> usize {
        match self {
            NetworkConfig::Resnet(c) => c.input_dim,
            NetworkConfig::Kan(c) => c.input_dim(),
        }
    }

    pub fn output_dim(&self) -> usize {
        match self {
            NetworkConfig::Resnet(c) => c.output_dim,
            NetworkConfig::Kan(c) => c.output_dim(),
        }
    }

    pub fn validate(&self) -> Result<()> {
        match self {
            NetworkConfig::Resnet(c) => c.validate(),
            NetworkConfig::Kan(c) => c.validate(),
        }
    }

    pub fn param_count(&self) -> usize {
        match self {
            NetworkConfig::Resnet(c) => c.param_count(),
            NetworkConfig::Kan(c) => c.param_count(),
        }
    }

    /// Names and shapes of the parameter tensors, in storage order.
    pub fn param_layout(&self) -> Vec<(String, Vec<usize>)> {
        match self {
            NetworkConfig::Resnet(c) => {
                let mut out = Vec::new();
                for l in 0..c.num_hidden_layers {
                    let fan_in = if l == 0 { c.input_dim } else { c.hidden_width };
                    out.push((format!("hidden{l}.weight"), vec![fan_in, c.hidden_width]));
                    out.push((format!("hidden{l}.bias"), vec![c.hidden_width]));
                }
                if c.has_projection() {
                    out.push(("projection.weight".into(), vec![c.input_dim, c.hidden_width]));
                    out.push(("projection.bias".into(), vec![c.hidden_width]));
                }
                out.push(("output.weight".into(), vec![c.hidden_width, c.output_dim]));
                out.push(("output.bias".into(), vec![c.output_dim]));
                out
            }
            NetworkConfig::Kan(c) => c
                .layer_dims
                .windows(2)
                .enumerate()
                .map(|(l, w)| (format!("layer{l}.coeff"), vec![w[0], w[1], c.order + 1]))
                .collect(),
        }
    }
}

/// A network configuration together with its parameter tensors.
#[derive(Clone, Debug, PartialEq)]
pub struct Network {
    pub config: NetworkConfig,
    pub params: Vec<Tensor>,
}

impl Network {
    /// Random initialisation: fan-in scaled uniform weights and zero biases for
    /// ResNets, uniform `±1/(in·(order+1))` coefficients for KANs.
    pub fn init(config: NetworkConfig, rng: &mut StreamRng) -> Result<Self> {
        config.validate()?;
        let params = config
            .param_layout()
            .into_iter()
            .map(|(name, shape)| {
                let bound = match &config {
                    NetworkConfig::Resnet(_) if name.ends_with(".bias") => 0.0,
                    NetworkConfig::Resnet(_) => 1.0 / (shape[0] as f64).sqrt(),
                    NetworkConfig::Kan(c) => 1.0 / (shape[0] as f64 * (c.order + 1) as f64),
                };
                let n: usize = shape.iter().product();
                let data = (0..n)
                    .map(|_| if bound == 0.0 { 0.0 } else { rng.random_range(-bound..bound) })
                    .collect();
                Tensor::new(shape, data)
            })
            .collect::<Result<Vec<_>>>()?;
        Ok(Self { config, params })
    }

    /// Wraps explicit parameters after checking them against the layout.
    pub fn from_params(config: NetworkConfig, params: Vec<Tensor>) -> Result<Self> {
        config.validate()?;
        let layout = config.param_layout();
        if layout.len() != params.len() {
            return Err(Error::dim(
                "Network::from_params",
                format!("expected {} tensors, got {}", layout.len(), params.len()),
            ));
        }
        for ((name, shape), p) in layout.iter().zip(&params) {
            if p.shape() != shape.as_slice() {
                return Err(Error::dim(
                    "Network::from_params",
                    format!("{name}: expected shape {shape:?}, got {:?}", p.shape()),
                ));
            }
        }
        Ok(Self { config, params })
    }

    pub fn param_count(&self) -> usize {
        self.params.iter().map(Tensor::len).sum()
    }

    /// Places the parameters on the tape, as trainable leaves or constants.
    pub fn bind(&self, g: &mut Graph, trainable: bool) -> Vec<Var> {
        self.params
            .iter()
            .map(|p| {
                if trainable {
                    g.param(p.clone())
                } else {
                    g.constant(p.clone())
                }
            })
            .collect()
    }

    /// Forward pass recorded on `g` with parameter handles from [`Network::bind`].
    pub fn forward(&self, g: &mut Graph, params: &[Var], x: Var) -> Result<Var> {
        let width = *g.shape(x).last().unwrap_or(&0);
        if g.shape(x).len() != 2 || width != self.config.input_dim() {
            return Err(Error::dim(
                "network forward",
                format!(
                    "input shape {:?} does not match input width {}",
                    g.shape(x),
                    self.config.input_dim()
                ),
            ));
        }
        match &self.config {
            NetworkConfig::Resnet(c) => resnet_forward(c, g, params, x),
            NetworkConfig::Kan(c) => kan_forward(c, g, params, x),
        }
    }

    /// Inference-only forward pass.
    pub fn predict(&self, x: &Tensor) -> Result<Tensor> {
        let mut g = Graph::new();
        let p = self.bind(&mut g, false);
        let xv = g.constant(x.clone());
        let y = self.forward(&mut g, &p, xv)?;
        Ok(g.value(y).clone())
    }
}

fn activate(g: &mut Graph, x: Var, act: Activation) -> Var {
    match act {
        Activation::Tanh => g.tanh(x),
        Activation::Sin => g.sin(x),
    }
}

fn affine(g: &mut Graph, x: Var, w: Var, b: Var) -> Result<Var> {
    let h = g.matmul(x, w)?;
    g.add_row(h, b)
}

/// Residual MLP: blocks of two hidden layers, `z = σ(W₂σ(W₁x + b₁) + b₂ + skip(x))`,
/// with an affine projection as the first block's skip when widths differ.
fn resnet_forward(c: &ResNetConfig, g: &mut Graph, p: &[Var], x: Var) -> Result<Var> {
    let nl = c.num_hidden_layers;
    let proj = c.has_projection().then(|| (p[2 * nl], p[2 * nl + 1]));
    let out_at = 2 * nl + if proj.is_some() { 2 } else { 0 };
    let mut z = x;
    for block in 0..nl / 2 {
        let (l1, l2) = (2 * block, 2 * block + 1);
        let h = affine(g, z, p[2 * l1], p[2 * l1 + 1])?;
        let h = activate(g, h, c.activation);
        let h = affine(g, h, p[2 * l2], p[2 * l2 + 1])?;
        let skip = match (block, proj) {
            (0, Some((w, b))) => affine(g, z, w, b)?,
            _ => z,
        };
        let s = g.add(h, skip)?;
        z = activate(g, s, c.activation);
    }
    affine(g, z, p[out_at], p[out_at + 1])
}

fn kan_forward(c: &KanConfig, g: &mut Graph, p: &[Var], x: Var) -> Result<Var> {
    let n = g.shape(x)[0];
    let k = c.order + 1;
    let mut a = x;
    for (l, dims) in c.layer_dims.windows(2).enumerate() {
        let (din, dout) = (dims[0], dims[1]);
        a = g.sin(a);
        debug_assert!(g.value(a).data().iter().all(|v| v.abs() <= 1.0));
        let poly = jacobi_basis_on_tape(g, a, c.order, c.alpha, c.beta)?;
        let poly = g.reshape(poly, &[n, din * k])?;
        let coeff = g.permute(p[l], &[0, 2, 1])?;
        let coeff = g.reshape(coeff, &[din * k, dout])?;
        a = g.matmul(poly, coeff)?;
    }
    Ok(a)
}

/// Coefficients `(a1, a2, a3, a4)` of the three-term recurrence
/// `a1·P_{n+1} = (a2 + a3·x)·P_n − a4·P_{n−1}`.
fn jacobi_recurrence(n: usize, alpha: f64, beta: f64) -> (f64, f64, f64, f64) {
    let n = n as f64;
    let s = 2.0 * n + alpha + beta;
    let a1 = 2.0 * (n + 1.0) * (n + alpha + beta + 1.0) * s;
    let a2 = (s + 1.0) * (alpha * alpha - beta * beta);
    let a3 = s * (s + 1.0) * (s + 2.0);
    let a4 = 2.0 * (n + alpha) * (n + beta) * (s + 2.0);
    (a1, a2, a3, a4)
}

/// Jacobi polynomials `P_0..P_order` evaluated at every entry of `x`,
/// stacked on a new trailing axis.
pub fn jacobi_basis(x: &Tensor, order: usize, alpha: f64, beta: f64) -> Tensor {
    debug_assert!(
        x.data().iter().all(|v| v.abs() <= 1.0),
        "Jacobi basis evaluated outside [-1, 1]"
    );
    let k = order + 1;
    let mut out = vec![0.0; x.len() * k];
    for (i, &xv) in x.data().iter().enumerate() {
        let row = &mut out[i * k..(i + 1) * k];
        row[0] = 1.0;
        if order >= 1 {
            row[1] = 0.5 * (alpha - beta + (alpha + beta + 2.0) * xv);
        }
        for n in 1..order {
            let (a1, a2, a3, a4) = jacobi_recurrence(n, alpha, beta);
            row[n + 1] = ((a2 + a3 * xv) * row[n] - a4 * row[n - 1]) / a1;
        }
    }
    let mut shape = x.shape().to_vec();
    shape.push(k);
    Tensor::new(shape, out).expect("jacobi shape")
}

/// The same recurrence recorded on the tape, so gradients flow through it.
pub fn jacobi_basis_on_tape(g: &mut Graph, x: Var, order: usize, alpha: f64, beta: f64) -> Result<Var> {
    let ones = g.constant(Tensor::full(g.shape(x), 1.0));
    let mut polys = vec![ones];
    if order >= 1 {
        let p1 = g.scale(x, 0.5 * (alpha + beta + 2.0));
        polys.push(g.add_scalar(p1, 0.5 * (alpha - beta)));
    }
    for n in 1..order {
        let (a1, a2, a3, a4) = jacobi_recurrence(n, alpha, beta);
        let xp = g.mul(x, polys[n])?;
        let t1 = g.scale(xp, a3 / a1);
        let t2 = g.scale(polys[n], a2 / a1);
        let t3 = g.scale(polys[n - 1], -a4 / a1);
        let s = g.add(t1, t2)?;
        polys.push(g.add(s, t3)?);
    }
    g.stack_last(&polys)
}
