//! Multi-output DeepONet assembly: state schema, log/min-max normalisation,
//! one-step and two-step forward passes, and autoregressive rollout.

use serde::{Deserialize, Serialize};

use crate::autodiff::{Graph, Var};
use crate::error::{Error, Result};
use crate::networks::Network;
use crate::tensor::{self, Tensor};

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct StateSchema {
    pub names: Vec<String>,
    #[serde(default)]
    pub temperature_index: Option<usize>,
    /// States whose physical values must sum to one.
    #[serde(default)]
    pub mass_group: Vec<usize>,
    pub log_transform: Vec<bool>,
}

impl StateSchema {
    pub fn new(names: &[&str], temperature_index: Option<usize>, mass_group: Vec<usize>) -> Result<Self> {
        let s = Self {
            names: names.iter().map(|n| n.to_string()).collect(),
            temperature_index,
            mass_group,
            log_transform: vec![true; names.len()],
        };
        s.validate()?;
        Ok(s)
    }

    pub fn j(&self) -> usize {
        self.names.len()
    }

    pub fn validate(&self) -> Result<()> {
        let j = self.j();
        if j == 0 {
            return Err(Error::Config("schema has no states".into()));
        }
        if self.log_transform.len() != j {
            return Err(Error::Config(format!(
                "{} log flags for {j} states",
                self.log_transform.len()
            )));
        }
        if let Some(t) = self.temperature_index {
            if t >= j {
                return Err(Error::Config(format!("temperature index {t} out of range")));
            }
            if self.mass_group.contains(&t) {
                return Err(Error::Config("temperature cannot belong to the mass group".into()));
            }
        }
        let mut seen = vec![false; j];
        for &m in &self.mass_group {
            if m >= j || std::mem::replace(&mut seen[m], true) {
                return Err(Error::Config(format!("invalid or repeated mass-group index {m}")));
            }
        }
        Ok(())
    }
}

/// Per-state bounds in transformed (log) space.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct NormalizationParams {
    pub min: Vec<f64>,
    pub max: Vec<f64>,
}

fn transform(y: f64, log: bool) -> f64 {
    if log {
        y.ln()
    } else {
        y
    }
}

impl NormalizationParams {
    /// Bounds over every sample and time of `raw` (trailing axis = states).
    pub fn fit(raw: &Tensor, schema: &StateSchema) -> Result<Self> {
        let j = schema.j();
        check_trailing(raw, j, "NormalizationParams::fit")?;
        let mut min = vec![f64::INFINITY; j];
        let mut max = vec![f64::NEG_INFINITY; j];
        for (r, row) in raw.data().chunks(j).enumerate() {
            for (a, &y) in row.iter().enumerate() {
                if schema.log_transform[a] && !(y > 0.0) {
                    return Err(Error::Domain(format!(
                        "row {r}, state {}: value {y:e} cannot be log-transformed",
                        schema.names[a]
                    )));
                }
                let v = transform(y, schema.log_transform[a]);
                min[a] = min[a].min(v);
                max[a] = max[a].max(v);
            }
        }
        for a in 0..j {
            if !(max[a] > min[a]) {
                return Err(Error::Config(format!(
                    "state {} is constant over the data; cannot min-max normalise",
                    schema.names[a]
                )));
            }
        }
        Ok(Self { min, max })
    }

    /// Coefficients of the affine map from normalised to transformed space.
    pub fn denorm_affine(&self) -> (Vec<f64>, Vec<f64>) {
        let scale = self.min.iter().zip(&self.max).map(|(lo, hi)| 0.5 * (hi - lo)).collect();
        let shift = self.min.iter().zip(&self.max).map(|(lo, hi)| 0.5 * (hi + lo)).collect();
        (scale, shift)
    }
}

fn check_trailing(t: &Tensor, j: usize, op: &'static str) -> Result<()> {
    if t.shape().last() != Some(&j) {
        return Err(Error::dim(
            op,
            format!("trailing axis of {:?} must equal state count {j}", t.shape()),
        ));
    }
    Ok(())
}

/// `2·(log y − min)/(max − min) − 1`, state by state along the trailing axis.
pub fn normalize(raw: &Tensor, schema: &StateSchema, params: &NormalizationParams) -> Result<Tensor> {
    let j = schema.j();
    check_trailing(raw, j, "normalize")?;
    let per_sample = if raw.ndim() >= 2 { raw.len() / raw.shape()[0] } else { raw.len() };
    let mut out = raw.clone();
    for (r, row) in out.data_mut().chunks_mut(j).enumerate() {
        for (a, y) in row.iter_mut().enumerate() {
            if schema.log_transform[a] && !(*y > 0.0) {
                return Err(Error::Domain(format!(
                    "sample {}, state {}: value {:e} is not positive",
                    r * j / per_sample.max(1),
                    schema.names[a],
                    *y
                )));
            }
            let v = transform(*y, schema.log_transform[a]);
            *y = 2.0 * (v - params.min[a]) / (params.max[a] - params.min[a]) - 1.0;
        }
    }
    Ok(out)
}

pub fn denormalize(norm: &Tensor, schema: &StateSchema, params: &NormalizationParams) -> Result<Tensor> {
    let j = schema.j();
    check_trailing(norm, j, "denormalize")?;
    let (scale, shift) = params.denorm_affine();
    let mut out = norm.clone();
    for row in out.data_mut().chunks_mut(j) {
        for (a, y) in row.iter_mut().enumerate() {
            let v = *y * scale[a] + shift[a];
            *y = if schema.log_transform[a] { v.exp() } else { v };
        }
    }
    Ok(out)
}

/// Denormalisation recorded on the tape, for losses evaluated in physical space.
pub fn denormalize_on_tape(
    g: &mut Graph,
    norm: Var,
    schema: &StateSchema,
    params: &NormalizationParams,
) -> Result<Var> {
    let (scale, shift) = params.denorm_affine();
    let t = g.affine_last(norm, &scale, &shift)?;
    if schema.log_transform.iter().all(|&l| l) {
        return Ok(g.exp(t));
    }
    if schema.log_transform.iter().all(|&l| !l) {
        return Ok(t);
    }
    let shape = g.shape(t).to_vec();
    let j = schema.j();
    let n = g.value(t).len() / j;
    let mask: Vec<f64> = (0..n)
        .flat_map(|_| schema.log_transform.iter().map(|&l| if l { 1.0 } else { 0.0 }))
        .collect();
    let mask = Tensor::new(shape, mask)?;
    let inv = mask.map(|m| 1.0 - m);
    let e = g.exp(t);
    let e = g.mul_const(e, &mask)?;
    let lin = g.mul_const(t, &inv)?;
    g.add(e, lin)
}

/// `linspace(−1, 1, n)` as an `[n, 1]` trunk input.
pub fn time_grid(n: usize) -> Tensor {
    let data = (0..n)
        .map(|i| if n == 1 { -1.0 } else { -1.0 + 2.0 * i as f64 / (n - 1) as f64 })
        .collect();
    Tensor::new(vec![n, 1], data).expect("grid shape")
}

/// Orthonormal bases and triangular factors of a factorised trunk.
#[derive(Clone, Debug, PartialEq)]
pub struct TwoStepFactors {
    /// `[j, n_t1, p]`
    pub q: Tensor,
    /// `[j, p, p]`, upper triangular per state.
    pub r: Tensor,
}

#[derive(Clone, Debug, PartialEq)]
pub enum ModelMode {
    OneStep { pou: bool, bound_factor: f64 },
    TwoStep { factors: Option<TwoStepFactors> },
}

impl ModelMode {
    pub fn name(&self) -> &'static str {
        match self {
            ModelMode::OneStep { .. } => "one-step",
            ModelMode::TwoStep { .. } => "two-step",
        }
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct DeepONetModel {
    pub branch: Network,
    pub trunk: Network,
    /// Bases per state.
    pub p: usize,
    /// State count.
    pub j: usize,
    pub mode: ModelMode,
    /// Normalised trunk input shared by every sample, `[n_t1, 1]`.
    pub time_grid: Tensor,
}

impl DeepONetModel {
    pub fn new(branch: Network, trunk: Network, j: usize, p: usize, mode: ModelMode, n_t1: usize) -> Result<Self> {
        let width = j * p;
        if branch.config.output_dim() != width || trunk.config.output_dim() != width {
            return Err(Error::Config(format!(
                "branch and trunk must both emit j·p = {width} outputs (got {} and {})",
                branch.config.output_dim(),
                trunk.config.output_dim()
            )));
        }
        if branch.config.input_dim() != j {
            return Err(Error::Config(format!(
                "branch input width {} must equal the state count {j}",
                branch.config.input_dim()
            )));
        }
        if trunk.config.input_dim() != 1 {
            return Err(Error::Config("trunk input width must be 1 (time)".into()));
        }
        Ok(Self {
            branch,
            trunk,
            p,
            j,
            mode,
            time_grid: time_grid(n_t1),
        })
    }

    pub fn n_t1(&self) -> usize {
        self.time_grid.shape()[0]
    }

    /// Trunk bases reshaped to `[n_t1, j, p]`, with PoU applied when requested.
    pub fn trunk_bases_on_tape(&self, g: &mut Graph, trunk: &[Var], t: Var, pou: bool) -> Result<Var> {
        let n = g.shape(t)[0];
        let c = self.trunk.forward(g, trunk, t)?;
        let c = g.reshape(c, &[n, self.j, self.p])?;
        Ok(if pou { g.softmax_last(c) } else { c })
    }

    pub fn branch_coeffs_on_tape(&self, g: &mut Graph, branch: &[Var], y0: Var) -> Result<Var> {
        let bs = g.shape(y0)[0];
        let b = self.branch.forward(g, branch, y0)?;
        g.reshape(b, &[bs, self.j, self.p])
    }

    /// One-step prediction `[bs, n_t1, j]` in normalised space.
    pub fn one_step_on_tape(
        &self,
        g: &mut Graph,
        branch: &[Var],
        trunk: &[Var],
        y0: Var,
        t: Var,
    ) -> Result<Var> {
        let ModelMode::OneStep { pou, bound_factor } = self.mode else {
            return Err(Error::InvalidMode(format!(
                "one-step forward on a {} model",
                self.mode.name()
            )));
        };
        let b = self.branch_coeffs_on_tape(g, branch, y0)?;
        let c = self.trunk_bases_on_tape(g, trunk, t, pou)?;
        let out = g.contract_branch_trunk(b, c)?;
        Ok(if bound_factor > 0.0 {
            let th = g.tanh(out);
            g.scale(th, bound_factor)
        } else {
            out
        })
    }

    /// Two-step prediction through the stored orthonormal bases.
    pub fn two_step_on_tape(&self, g: &mut Graph, branch: &[Var], y0: Var) -> Result<Var> {
        let q = self.factors()?.q.clone();
        let b = self.branch_coeffs_on_tape(g, branch, y0)?;
        let qv = g.constant(q);
        g.contract_predict_2step(b, qv)
    }

    pub fn factors(&self) -> Result<&TwoStepFactors> {
        match &self.mode {
            ModelMode::TwoStep { factors: Some(f) } => Ok(f),
            ModelMode::TwoStep { factors: None } => Err(Error::InvalidMode(
                "two-step model has no factorised trunk yet".into(),
            )),
            ModelMode::OneStep { .. } => Err(Error::InvalidMode(
                "stored bases requested from a one-step model".into(),
            )),
        }
    }

    pub fn forward_one_step(&self, y0_norm: &Tensor, t_norm: &Tensor) -> Result<Tensor> {
        let mut g = Graph::new();
        let bp = self.branch.bind(&mut g, false);
        let tp = self.trunk.bind(&mut g, false);
        let y0 = g.constant(y0_norm.clone());
        let t = g.constant(t_norm.clone());
        let out = self.one_step_on_tape(&mut g, &bp, &tp, y0, t)?;
        Ok(g.value(out).clone())
    }

    pub fn forward_two_step(&self, y0_norm: &Tensor) -> Result<Tensor> {
        let mut g = Graph::new();
        let bp = self.branch.bind(&mut g, false);
        let y0 = g.constant(y0_norm.clone());
        let out = self.two_step_on_tape(&mut g, &bp, y0)?;
        Ok(g.value(out).clone())
    }

    /// Two-step prediction through the trunk and `R*⁻¹` instead of `Q*`:
    /// per state, `tr_m · R*_m⁻¹ · br_mᵀ`.
    pub fn forward_two_step_via_trunk(&self, y0_norm: &Tensor) -> Result<Tensor> {
        let f = self.factors()?;
        let (j, p, nt) = (self.j, self.p, self.n_t1());
        let br = self.branch.predict(y0_norm)?;
        let bs = br.shape()[0];
        let tr = self.trunk.predict(&self.time_grid)?;
        let mut out = Tensor::zeros(&[bs, nt, j]);
        for m in 0..j {
            let cols: Vec<usize> = (m * p..(m + 1) * p).collect();
            let tr_m = tr.index_select(1, &cols)?;
            let br_m = br.index_select(1, &cols)?;
            let r_m = f.r.index_select(0, &[m])?.reshape(&[p, p])?;
            let x = tensor::solve_upper(&r_m, &br_m.transpose()?)?;
            let y = tr_m.matmul(&x)?;
            for l in 0..nt {
                for i in 0..bs {
                    out.set(&[i, l, m], y.at(&[l, i]));
                }
            }
        }
        Ok(out)
    }

    /// Normalised prediction on the stored time grid, dispatching on mode.
    pub fn predict_normalized(&self, y0_norm: &Tensor) -> Result<Tensor> {
        match self.mode {
            ModelMode::OneStep { .. } => self.forward_one_step(y0_norm, &self.time_grid),
            ModelMode::TwoStep { .. } => self.forward_two_step(y0_norm),
        }
    }

    /// Physical-space prediction `[bs, n_t1, j]` from physical initial states `[bs, j]`.
    pub fn predict_physical(
        &self,
        y0_raw: &Tensor,
        schema: &StateSchema,
        params: &NormalizationParams,
    ) -> Result<Tensor> {
        let y0 = normalize(y0_raw, schema, params)?;
        denormalize(&self.predict_normalized(&y0)?, schema, params)
    }
}

/// Autoregressive rollout over `num_segments` segments from physical initial
/// states `[bs, j]`. Each segment starts from the previous segment's final
/// prediction; shared endpoints appear once, giving `[bs, num_segments·n_t + 1, j]`.
pub fn recursive_predict(
    model: &DeepONetModel,
    schema: &StateSchema,
    params: &NormalizationParams,
    y0_raw: &Tensor,
    num_segments: usize,
) -> Result<Tensor> {
    if num_segments == 0 {
        return Err(Error::Config("rollout needs at least one segment".into()));
    }
    let j = schema.j();
    let bs = y0_raw.shape()[0];
    let nt = model.n_t1() - 1;
    let total = num_segments * nt + 1;
    let mut out = Tensor::zeros(&[bs, total, j]);
    let mut current = y0_raw.clone();
    for s in 0..num_segments {
        let y0 = normalize(&current, schema, params).map_err(|e| Error::RolloutDivergence {
            segment: s + 1,
            detail: e.to_string(),
        })?;
        let pred = denormalize(&model.predict_normalized(&y0)?, schema, params)?;
        let bad = pred.data().chunks(j).enumerate().find_map(|(r, row)| {
            row.iter().enumerate().find_map(|(a, &v)| {
                (!v.is_finite() || (schema.log_transform[a] && v <= 0.0)).then(|| {
                    format!(
                        "sample {}, state {}: value {v:e}",
                        r / model.n_t1(),
                        schema.names[a]
                    )
                })
            })
        });
        if let Some(detail) = bad {
            return Err(Error::RolloutDivergence { segment: s + 1, detail });
        }
        let first = if s == 0 { 0 } else { 1 };
        for i in 0..bs {
            for l in first..=nt {
                for a in 0..j {
                    out.set(&[i, s * nt + l, a], pred.at(&[i, l, a]));
                }
            }
        }
        current = pred.index_select(1, &[nt])?.reshape(&[bs, j])?;
    }
    Ok(out)
}
