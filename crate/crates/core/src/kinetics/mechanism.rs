//! Built-in reaction mechanisms with analytic Jacobians.

use std::fmt;
use std::sync::Arc;

use serde::Deserialize;
use sha2::{Digest, Sha256};

use crate::error::{Error, Result};
use crate::operator::StateSchema;

/// Constants file for the toy combustion mechanism, versioned with the crate.
pub const TOY_COMBUSTION_TOML: &str = include_str!("../../config/toy_combustion.toml");

#[derive(Clone, Debug, PartialEq, Deserialize)]
pub struct Thermo {
    pub cp: f64,
    pub enthalpy: Vec<f64>,
}

#[derive(Clone, Debug, PartialEq, Deserialize)]
pub struct FirstOrderReaction {
    pub reactant: usize,
    pub product: usize,
    pub pre_exponential: f64,
    pub activation_temperature: f64,
}

#[derive(Clone, Debug, PartialEq, Deserialize)]
pub struct ToyGrid {
    pub temperature: [f64; 2],
    pub fraction_a: [f64; 2],
}

#[derive(Clone, Debug, PartialEq, Deserialize)]
pub struct ToyCombustion {
    pub version: u32,
    pub thermo: Thermo,
    pub reaction: Vec<FirstOrderReaction>,
    pub default_grid: ToyGrid,
}

impl ToyCombustion {
    pub fn builtin() -> Self {
        Self::from_toml(TOY_COMBUSTION_TOML).expect("bundled constants parse")
    }

    pub fn from_toml(text: &str) -> Result<Self> {
        let t: Self = toml::from_str(text).map_err(|e| Error::Config(e.to_string()))?;
        let ns = t.thermo.enthalpy.len();
        if ns == 0 || t.thermo.cp <= 0.0 {
            return Err(Error::Config("toy mechanism needs species and a positive cp".into()));
        }
        if t.reaction.iter().any(|r| r.reactant >= ns || r.product >= ns) {
            return Err(Error::Config("reaction refers to an unknown species".into()));
        }
        Ok(t)
    }

    pub fn species(&self) -> usize {
        self.thermo.enthalpy.len()
    }
}

pub type RhsFn = dyn Fn(&[f64], &mut [f64]) + Send + Sync;

/// User-supplied right-hand side with its Jacobian (row-major `n × n`).
#[derive(Clone)]
pub struct CustomRhs {
    pub dim: usize,
    pub rhs: Arc<RhsFn>,
    pub jacobian: Arc<RhsFn>,
}

impl fmt::Debug for CustomRhs {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.debug_struct("CustomRhs").field("dim", &self.dim).finish_non_exhaustive()
    }
}

#[derive(Clone, Debug)]
pub enum Mechanism {
    /// Robertson's three-species stiff benchmark.
    Rober,
    /// States `[T, Y_0, …, Y_{n−1}]`.
    ToyCombustion(ToyCombustion),
    Custom(CustomRhs),
}

pub const ROBER_K1: f64 = 0.04;
pub const ROBER_K2: f64 = 1e4;
pub const ROBER_K3: f64 = 3e7;

impl Mechanism {
    /// `dy/dt = −y` in one dimension.
    pub fn linear_decay() -> Self {
        Mechanism::Custom(CustomRhs {
            dim: 1,
            rhs: Arc::new(|y, out| out[0] = -y[0]),
            jacobian: Arc::new(|_, j| j[0] = -1.0),
        })
    }

    pub fn name(&self) -> &'static str {
        match self {
            Mechanism::Rober => "rober",
            Mechanism::ToyCombustion(_) => "toy-combustion",
            Mechanism::Custom(_) => "custom",
        }
    }

    pub fn dim(&self) -> usize {
        match self {
            Mechanism::Rober => 3,
            Mechanism::ToyCombustion(t) => 1 + t.species(),
            Mechanism::Custom(c) => c.dim,
        }
    }

    pub fn schema(&self) -> StateSchema {
        match self {
            Mechanism::Rober => StateSchema::new(&["y1", "y2", "y3"], None, vec![0, 1, 2]).expect("valid"),
            Mechanism::ToyCombustion(t) => {
                let names: Vec<String> = std::iter::once("T".to_string())
                    .chain((0..t.species()).map(|k| format!("Y{}", (b'A' + k as u8) as char)))
                    .collect();
                let refs: Vec<&str> = names.iter().map(String::as_str).collect();
                StateSchema::new(&refs, Some(0), (1..=t.species()).collect()).expect("valid")
            }
            Mechanism::Custom(c) => {
                let names: Vec<String> = (0..c.dim).map(|i| format!("x{i}")).collect();
                let refs: Vec<&str> = names.iter().map(String::as_str).collect();
                StateSchema::new(&refs, None, vec![]).expect("valid")
            }
        }
    }

    /// Hex SHA-256 of the constants that define the mechanism.
    pub fn config_hash(&self) -> String {
        let text = match self {
            Mechanism::Rober => format!("rober k1={ROBER_K1:e} k2={ROBER_K2:e} k3={ROBER_K3:e}"),
            Mechanism::ToyCombustion(t) => format!("{t:?}"),
            Mechanism::Custom(c) => format!("custom dim={}", c.dim),
        };
        hex::encode(Sha256::digest(text.as_bytes()))
    }

    /// Mass-group entries of `y` below zero are read as zero. Returns how many were clamped.
    fn clamped(&self, y: &[f64], buf: &mut [f64]) -> usize {
        buf.copy_from_slice(y);
        let range = match self {
            Mechanism::Rober => 0..3,
            Mechanism::ToyCombustion(t) => 1..1 + t.species(),
            Mechanism::Custom(_) => 0..0,
        };
        let mut n = 0;
        for v in &mut buf[range] {
            if *v < 0.0 {
                *v = 0.0;
                n += 1;
            }
        }
        n
    }

    /// Writes `dy/dt` into `out`; returns the number of clamped negative fractions.
    pub fn rhs(&self, y: &[f64], out: &mut [f64]) -> usize {
        let mut buf = [0.0; 16];
        let mut heap;
        let yc: &mut [f64] = if y.len() <= 16 {
            &mut buf[..y.len()]
        } else {
            heap = vec![0.0; y.len()];
            &mut heap
        };
        let clamped = self.clamped(y, yc);
        let y = &*yc;
        match self {
            Mechanism::Rober => {
                let r1 = ROBER_K1 * y[0];
                let r2 = ROBER_K2 * y[1] * y[2];
                let r3 = ROBER_K3 * y[1] * y[1];
                out[0] = -r1 + r2;
                out[1] = r1 - r2 - r3;
                out[2] = r3;
            }
            Mechanism::ToyCombustion(t) => {
                let temp = y[0];
                out.iter_mut().for_each(|v| *v = 0.0);
                for r in &t.reaction {
                    let k = r.pre_exponential * (-r.activation_temperature / temp).exp();
                    let rate = k * y[1 + r.reactant];
                    out[1 + r.reactant] -= rate;
                    out[1 + r.product] += rate;
                }
                let q: f64 = t.thermo.enthalpy.iter().zip(&out[1..]).map(|(h, d)| h * d).sum();
                out[0] = -q / t.thermo.cp;
            }
            Mechanism::Custom(c) => (c.rhs)(y, out),
        }
        clamped
    }

    /// Row-major analytic Jacobian `∂f/∂y`.
    pub fn jacobian(&self, y: &[f64], jac: &mut [f64]) {
        let n = self.dim();
        let mut yc = y.to_vec();
        self.clamped(y, &mut yc);
        let y = &yc;
        match self {
            Mechanism::Rober => {
                let (k1, k2, k3) = (ROBER_K1, ROBER_K2, ROBER_K3);
                jac.copy_from_slice(&[
                    -k1,
                    k2 * y[2],
                    k2 * y[1],
                    k1,
                    -k2 * y[2] - 2.0 * k3 * y[1],
                    -k2 * y[1],
                    0.0,
                    2.0 * k3 * y[1],
                    0.0,
                ]);
            }
            Mechanism::ToyCombustion(t) => {
                jac.iter_mut().for_each(|v| *v = 0.0);
                let temp = y[0];
                for r in &t.reaction {
                    let k = r.pre_exponential * (-r.activation_temperature / temp).exp();
                    let (ri, pi) = (1 + r.reactant, 1 + r.product);
                    let dk_dt = k * r.activation_temperature / (temp * temp);
                    // rate = k(T)·y_reactant
                    let d_rate_dt = dk_dt * y[ri];
                    jac[ri * n] -= d_rate_dt;
                    jac[pi * n] += d_rate_dt;
                    jac[ri * n + ri] -= k;
                    jac[pi * n + ri] += k;
                }
                for c in 0..n {
                    let q: f64 = t
                        .thermo
                        .enthalpy
                        .iter()
                        .enumerate()
                        .map(|(s, h)| h * jac[(1 + s) * n + c])
                        .sum();
                    jac[c] = -q / t.thermo.cp;
                }
            }
            Mechanism::Custom(c) => (c.jacobian)(y, jac),
        }
    }
}
