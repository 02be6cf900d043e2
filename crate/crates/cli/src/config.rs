//! Experiment configuration files and their validation.

use std::path::Path;

use serde::{Deserialize, Serialize};

use kinop::kinetics::{GenerationConfig, GridAxis, IcGridSpec, Mechanism, ToyCombustion};
use kinop::losses::{DataLossKind, LossConfig};
use kinop::networks::{Activation, KanConfig, NetworkConfig, ResNetConfig};
use kinop::optim::{AdamConfig, LrSchedule};
use kinop::training::{MinibatchSchedule, TrainConfig};
use kinop::{Error, Result};

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct GenSection {
    pub mechanism: String,
    /// Grid counts along the two initial-condition axes.
    pub grid: [usize; 2],
    /// Explicit ranges; the mechanism's defaults when absent.
    pub first_range: Option<[f64; 2]>,
    pub second_range: Option<[f64; 2]>,
    pub steps: usize,
    pub dt: f64,
    pub tol: f64,
    pub test_fraction: f64,
    pub seed: u64,
}

impl Default for GenSection {
    fn default() -> Self {
        Self {
            mechanism: "rober".into(),
            grid: [11, 11],
            first_range: None,
            second_range: None,
            steps: 990,
            dt: 1e-3,
            tol: 1e-8,
            test_fraction: 0.2,
            seed: 7,
        }
    }
}

impl GenSection {
    pub fn mechanism(&self) -> Result<Mechanism> {
        match self.mechanism.as_str() {
            "rober" => Ok(Mechanism::Rober),
            "toy-combustion" => Ok(Mechanism::ToyCombustion(ToyCombustion::builtin())),
            other => Err(Error::Config(format!(
                "unknown mechanism {other:?} (expected rober or toy-combustion)"
            ))),
        }
    }

    pub fn grid_spec(&self, mech: &Mechanism) -> Result<IcGridSpec> {
        let [n1, n2] = self.grid;
        if n1 == 0 || n2 == 0 {
            return Err(Error::Config("grid counts must be positive".into()));
        }
        let mut spec = IcGridSpec::default_for(mech, n1, n2)?;
        if let Some([lo, hi]) = self.first_range {
            spec.first = GridAxis { lo, hi, count: n1 };
        }
        if let Some([lo, hi]) = self.second_range {
            spec.second = GridAxis { lo, hi, count: n2 };
        }
        Ok(spec)
    }

    pub fn generation(&self) -> Result<GenerationConfig> {
        if self.steps == 0 || !(self.dt > 0.0) || !(self.tol > 0.0) {
            return Err(Error::Config("steps, dt and tol must be positive".into()));
        }
        if !(0.0..1.0).contains(&self.test_fraction) {
            return Err(Error::Config("test_fraction must lie in [0, 1)".into()));
        }
        Ok(GenerationConfig {
            dt: self.dt,
            n_steps: self.steps,
            tol: self.tol,
            test_fraction: self.test_fraction,
            seed: self.seed,
        })
    }
}

/// Hidden architecture of a sub-network; input and output widths follow from
/// the state count and `p`.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(tag = "family", rename_all = "lowercase")]
pub enum NetSpec {
    Resnet {
        hidden_width: usize,
        num_hidden_layers: usize,
        #[serde(default = "tanh")]
        activation: Activation,
    },
    Kan {
        hidden: Vec<usize>,
        #[serde(default = "order")]
        order: usize,
    },
}

fn tanh() -> Activation {
    Activation::Tanh
}

fn order() -> usize {
    3
}

impl NetSpec {
    pub fn build(&self, input_dim: usize, output_dim: usize) -> NetworkConfig {
        match self {
            NetSpec::Resnet {
                hidden_width,
                num_hidden_layers,
                activation,
            } => NetworkConfig::Resnet(ResNetConfig {
                input_dim,
                hidden_width: *hidden_width,
                num_hidden_layers: *num_hidden_layers,
                output_dim,
                activation: *activation,
            }),
            NetSpec::Kan { hidden, order } => {
                let mut dims = vec![input_dim];
                dims.extend(hidden);
                dims.push(output_dim);
                NetworkConfig::Kan(KanConfig {
                    order: *order,
                    ..KanConfig::new(dims)
                })
            }
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize, clap::ValueEnum)]
#[serde(rename_all = "kebab-case")]
pub enum Paradigm {
    OneStep,
    TwoStep,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct ModelSection {
    pub p: usize,
    /// Segment length in steps; segments have `n_t + 1` points.
    pub n_t: usize,
    pub paradigm: Paradigm,
    pub pou: bool,
    /// `0` disables the bounded output.
    pub bound: f64,
    pub massmap: bool,
    pub branch: NetSpec,
    pub trunk: NetSpec,
}

impl Default for ModelSection {
    fn default() -> Self {
        Self {
            p: 16,
            n_t: 99,
            paradigm: Paradigm::OneStep,
            pou: false,
            bound: 1.05,
            massmap: false,
            branch: NetSpec::Resnet {
                hidden_width: 32,
                num_hidden_layers: 4,
                activation: Activation::Tanh,
            },
            trunk: NetSpec::Kan {
                hidden: vec![16, 16],
                order: 3,
            },
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct TrainSection {
    pub epochs: usize,
    pub minibatches: MinibatchSchedule,
    pub seed: u64,
    pub loss: LossConfig,
    pub optimizer: AdamConfig,
    pub eval_every: usize,
    pub optimized_a: bool,
    /// Independent runs; run `r` uses seed `seed + r`.
    pub runs: usize,
}

impl Default for TrainSection {
    fn default() -> Self {
        Self {
            epochs: 3000,
            minibatches: MinibatchSchedule {
                before: 4,
                after: 8,
                switch_epoch: 1500,
            },
            seed: 0,
            loss: LossConfig {
                kind: DataLossKind::TypeB,
                ..LossConfig::default()
            },
            optimizer: AdamConfig {
                schedule: LrSchedule::Exponential {
                    initial: 1e-3,
                    half_life: 2000.0,
                },
                ..AdamConfig::default()
            },
            eval_every: 50,
            optimized_a: false,
            runs: 1,
        }
    }
}

impl TrainSection {
    pub fn run_config(&self, run: usize) -> TrainConfig {
        TrainConfig {
            epochs: self.epochs,
            minibatches: self.minibatches.clone(),
            seed: self.seed + run as u64,
            loss: self.loss.clone(),
            optimizer: self.optimizer.clone(),
            eval_every: self.eval_every,
            optimized_a: self.optimized_a,
        }
    }
}

#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct ExperimentConfig {
    pub gen: GenSection,
    pub model: ModelSection,
    pub train: TrainSection,
}

impl ExperimentConfig {
    pub fn load(path: Option<&Path>) -> Result<Self> {
        match path {
            None => Ok(Self::default()),
            Some(p) => {
                let text = std::fs::read_to_string(p)
                    .map_err(|e| Error::Config(format!("cannot read {}: {e}", p.display())))?;
                toml::from_str(&text).map_err(|e| Error::Config(format!("{}: {e}", p.display())))
            }
        }
    }

    pub fn to_toml(&self) -> Result<String> {
        toml::to_string(self).map_err(|e| Error::Format(e.to_string()))
    }

    /// Rejects combinations the training procedures do not support, before any compute.
    pub fn validate_training(&self, mass_group_len: usize) -> Result<()> {
        let m = &self.model;
        if m.paradigm == Paradigm::TwoStep && m.pou {
            return Err(Error::Config("two-step training does not support the partition of unity".into()));
        }
        if m.paradigm == Paradigm::TwoStep && self.train.loss.com_enabled {
            return Err(Error::Config(
                "two-step training does not support the mass-conservation penalty".into(),
            ));
        }
        if m.massmap && mass_group_len < 2 {
            return Err(Error::Config("the simplex map needs a mass group of at least two states".into()));
        }
        if m.massmap && self.train.loss.com_enabled {
            return Err(Error::Config(
                "the simplex map conserves mass exactly; disable the mass-conservation penalty".into(),
            ));
        }
        if self.train.loss.com_enabled && mass_group_len == 0 {
            return Err(Error::Config("the mass-conservation penalty needs a nonempty mass group".into()));
        }
        if m.p == 0 || m.n_t == 0 {
            return Err(Error::Config("p and n_t must be positive".into()));
        }
        if self.train.runs == 0 {
            return Err(Error::Config("runs must be at least 1".into()));
        }
        self.run_config_check()
    }

    fn run_config_check(&self) -> Result<()> {
        self.train.run_config(0).validate()
    }
}

/// Parses `AxB` into two positive counts.
pub fn parse_grid(s: &str) -> std::result::Result<[usize; 2], String> {
    let (a, b) = s
        .split_once('x')
        .ok_or_else(|| format!("grid {s:?} is not of the form AxB"))?;
    let parse = |v: &str| -> std::result::Result<usize, String> {
        match v.trim().parse::<usize>() {
            Ok(n) if n > 0 => Ok(n),
            _ => Err(format!("grid count {v:?} is not a positive integer")),
        }
    };
    Ok([parse(a)?, parse(b)?])
}
