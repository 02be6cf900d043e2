//! Trajectory datasets: initial-condition grids, generation, train/test
//! split and time decomposition into overlapping segments.

use rand::seq::SliceRandom;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::kinetics::integrator::integrate;
use crate::kinetics::mechanism::Mechanism;
use crate::operator::{NormalizationParams, StateSchema};
use crate::rng;
use crate::tensor::Tensor;

/// `count` evenly spaced values over `[lo, hi]`; a single value sits at `lo`.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct GridAxis {
    pub lo: f64,
    pub hi: f64,
    pub count: usize,
}

impl GridAxis {
    pub fn values(&self) -> Vec<f64> {
        match self.count {
            0 => vec![],
            1 => vec![self.lo],
            n => (0..n)
                .map(|i| self.lo + (self.hi - self.lo) * i as f64 / (n - 1) as f64)
                .collect(),
        }
    }
}

/// Two-axis Cartesian grid of initial conditions. For ROBER the axes are
/// `y1(0)` and `y2(0)` with `y3 = 1 − y1 − y2`; for the toy mechanism they
/// are `T(0)` and `Y_A(0)` with the remaining species sharing `1 − Y_A`.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct IcGridSpec {
    pub first: GridAxis,
    pub second: GridAxis,
}

impl IcGridSpec {
    /// Default ranges with the given counts.
    pub fn default_for(mech: &Mechanism, n1: usize, n2: usize) -> Result<Self> {
        match mech {
            Mechanism::Rober => Ok(Self {
                first: GridAxis { lo: 0.90, hi: 0.98, count: n1 },
                second: GridAxis { lo: 2.0e-5, hi: 3.2e-5, count: n2 },
            }),
            Mechanism::ToyCombustion(t) => Ok(Self {
                first: GridAxis {
                    lo: t.default_grid.temperature[0],
                    hi: t.default_grid.temperature[1],
                    count: n1,
                },
                second: GridAxis {
                    lo: t.default_grid.fraction_a[0],
                    hi: t.default_grid.fraction_a[1],
                    count: n2,
                },
            }),
            Mechanism::Custom(_) => Err(Error::Config("custom mechanisms have no default grid".into())),
        }
    }

    /// Initial states in grid order (first axis outermost).
    pub fn initial_states(&self, mech: &Mechanism) -> Result<Vec<Vec<f64>>> {
        let (a, b) = (self.first.values(), self.second.values());
        if a.is_empty() || b.is_empty() {
            return Err(Error::Config("initial-condition grid is empty".into()));
        }
        let mut out = Vec::with_capacity(a.len() * b.len());
        for &u in &a {
            for &v in &b {
                out.push(match mech {
                    Mechanism::Rober => vec![u, v, 1.0 - u - v],
                    Mechanism::ToyCombustion(t) => {
                        let rest = (t.species() - 1).max(1) as f64;
                        let mut s = vec![u, v];
                        s.extend(std::iter::repeat_n((1.0 - v) / rest, t.species() - 1));
                        s
                    }
                    Mechanism::Custom(c) => {
                        let mut s = vec![u; c.dim];
                        if c.dim > 1 {
                            s[1] = v;
                        }
                        s
                    }
                });
            }
        }
        Ok(out)
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct TrajectoryDataset {
    /// `[bs, n_total + 1, j]` physical trajectories.
    pub raw: Tensor,
    pub dt: f64,
    pub schema: StateSchema,
    /// Fitted on the training split; absent when some value cannot be log-transformed.
    pub normalization: Option<NormalizationParams>,
    pub train: Vec<usize>,
    pub test: Vec<usize>,
    pub mechanism: String,
    pub mechanism_hash: String,
    pub grid: Option<IcGridSpec>,
    pub seed: u64,
}

impl TrajectoryDataset {
    pub fn num_trajectories(&self) -> usize {
        self.raw.shape()[0]
    }

    pub fn n_total(&self) -> usize {
        self.raw.shape()[1] - 1
    }

    pub fn split(&self, which: Split) -> Result<Tensor> {
        let idx = match which {
            Split::Train => &self.train,
            Split::Test => &self.test,
        };
        self.raw.index_select(0, idx)
    }

    /// Maximum `|Σ_{mass group} y − 1|` over all samples and times.
    pub fn mass_drift(&self) -> f64 {
        let j = self.schema.j();
        if self.schema.mass_group.is_empty() {
            return 0.0;
        }
        self.raw
            .data()
            .chunks(j)
            .map(|row| (self.schema.mass_group.iter().map(|&a| row[a]).sum::<f64>() - 1.0).abs())
            .fold(0.0, f64::max)
    }

    /// Same trajectories and split in a different representation, with the
    /// normalisation refitted on the training split.
    pub fn with_representation(&self, raw: Tensor, schema: StateSchema) -> Result<Self> {
        let (bs, len) = (self.raw.shape()[0], self.raw.shape()[1]);
        if raw.shape() != [bs, len, schema.j()] {
            return Err(Error::dim(
                "with_representation",
                format!("data {:?} vs [{bs}, {len}, {}]", raw.shape(), schema.j()),
            ));
        }
        let normalization = fit_normalization(&raw, &self.train, &schema);
        Ok(Self {
            raw,
            schema,
            normalization,
            ..self.clone()
        })
    }

    /// Restricts the dataset to the given trajectories and re-splits them.
    pub fn subset(&self, indices: &[usize], train: Vec<usize>, test: Vec<usize>) -> Result<Self> {
        let raw = self.raw.index_select(0, indices)?;
        let mut out = Self {
            raw,
            train,
            test,
            grid: None,
            ..self.clone()
        };
        out.normalization = fit_normalization(&out.raw, &out.train, &out.schema);
        Ok(out)
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Split {
    Train,
    Test,
}

fn fit_normalization(raw: &Tensor, train: &[usize], schema: &StateSchema) -> Option<NormalizationParams> {
    let idx = if train.is_empty() { (0..raw.shape()[0]).collect() } else { train.to_vec() };
    raw.index_select(0, &idx)
        .ok()
        .and_then(|t| NormalizationParams::fit(&t, schema).ok())
}

/// Seeded permutation split; returns sorted `(train, test)` index lists.
pub fn split_indices(n: usize, test_fraction: f64, seed: u64) -> (Vec<usize>, Vec<usize>) {
    let mut idx: Vec<usize> = (0..n).collect();
    idx.shuffle(&mut rng::stream(seed, "split"));
    let n_test = ((n as f64) * test_fraction).round() as usize;
    let n_test = n_test.min(n);
    let mut test = idx[..n_test].to_vec();
    let mut train = idx[n_test..].to_vec();
    test.sort_unstable();
    train.sort_unstable();
    (train, test)
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct GenerationConfig {
    pub dt: f64,
    pub n_steps: usize,
    #[serde(default = "default_tol")]
    pub tol: f64,
    #[serde(default = "default_test_fraction")]
    pub test_fraction: f64,
    pub seed: u64,
}

fn default_tol() -> f64 {
    1e-8
}

fn default_test_fraction() -> f64 {
    0.2
}

/// Integrates every grid point (in parallel, results kept in grid order) and splits the result.
pub fn generate_dataset(mech: &Mechanism, grid: &IcGridSpec, cfg: &GenerationConfig) -> Result<TrajectoryDataset> {
    let ics = grid.initial_states(mech)?;
    let trajs: Vec<Tensor> = ics
        .par_iter()
        .enumerate()
        .map(|(i, y0)| {
            integrate(mech, y0, cfg.dt, cfg.n_steps, cfg.tol).map_err(|e| match e {
                Error::IntegrationFailure { time_index, detail } => Error::IntegrationFailure {
                    time_index,
                    detail: format!("initial condition {i} {y0:?}: {detail}"),
                },
                other => other,
            })
        })
        .collect::<Result<_>>()?;
    let j = mech.dim();
    let mut data = Vec::with_capacity(trajs.len() * (cfg.n_steps + 1) * j);
    for t in &trajs {
        data.extend_from_slice(t.data());
    }
    let raw = Tensor::new(vec![trajs.len(), cfg.n_steps + 1, j], data)?;
    let (train, test) = split_indices(trajs.len(), cfg.test_fraction, cfg.seed);
    let schema = mech.schema();
    let normalization = fit_normalization(&raw, &train, &schema);
    Ok(TrajectoryDataset {
        raw,
        dt: cfg.dt,
        schema,
        normalization,
        train,
        test,
        mechanism: mech.name().into(),
        mechanism_hash: mech.config_hash(),
        grid: Some(grid.clone()),
        seed: cfg.seed,
    })
}

#[derive(Clone, Debug, PartialEq)]
pub struct SegmentedDataset {
    /// `[bs·n_seg, n_t + 1, j]`, trajectory-major.
    pub segments: Tensor,
    /// `[bs·n_seg, j]`: first row of every segment.
    pub branch_inputs: Tensor,
    pub num_segments: usize,
    pub n_t: usize,
}

/// Splits `[bs, n_total + 1, j]` trajectories into segments of `n_t + 1`
/// points that share endpoints.
pub fn time_decompose(raw: &Tensor, n_t: usize) -> Result<SegmentedDataset> {
    if raw.ndim() != 3 {
        return Err(Error::dim("time_decompose", format!("expected [bs, n, j], got {:?}", raw.shape())));
    }
    let (bs, len, j) = (raw.shape()[0], raw.shape()[1], raw.shape()[2]);
    let n_total = len.saturating_sub(1);
    if n_t == 0 || n_total == 0 || n_total % n_t != 0 {
        let suggestion = if n_t == 0 {
            String::new()
        } else {
            let lower = (n_total / n_t).max(1) * n_t;
            let upper = (n_total / n_t + 1) * n_t;
            let nearest = if n_total - lower.min(n_total) <= upper - n_total { lower } else { upper };
            format!("; nearest valid horizon is {nearest} steps")
        };
        return Err(Error::Config(format!(
            "a horizon of {n_total} steps does not split into segments of {n_t} steps{suggestion}"
        )));
    }
    let n_seg = n_total / n_t;
    let mut seg = Vec::with_capacity(bs * n_seg * (n_t + 1) * j);
    for b in 0..bs {
        for s in 0..n_seg {
            let start = (b * len + s * n_t) * j;
            seg.extend_from_slice(&raw.data()[start..start + (n_t + 1) * j]);
        }
    }
    let segments = Tensor::new(vec![bs * n_seg, n_t + 1, j], seg)?;
    let branch_inputs = segments.index_select(1, &[0])?.reshape(&[bs * n_seg, j])?;
    Ok(SegmentedDataset {
        segments,
        branch_inputs,
        num_segments: n_seg,
        n_t,
    })
}

/// Inverse of [`time_decompose`]: concatenates segments, keeping shared endpoints once.
pub fn reconstruct(seg: &Tensor, num_segments: usize) -> Result<Tensor> {
    let (rows, n1, j) = (seg.shape()[0], seg.shape()[1], seg.shape()[2]);
    if num_segments == 0 || rows % num_segments != 0 {
        return Err(Error::dim("reconstruct", format!("{rows} rows, {num_segments} segments")));
    }
    let bs = rows / num_segments;
    let n_t = n1 - 1;
    let len = num_segments * n_t + 1;
    let mut out = Vec::with_capacity(bs * len * j);
    for b in 0..bs {
        for s in 0..num_segments {
            let first = if s == 0 { 0 } else { 1 };
            let base = (b * num_segments + s) * n1;
            for l in first..n1 {
                out.extend_from_slice(&seg.data()[(base + l) * j..(base + l + 1) * j]);
            }
        }
    }
    Tensor::new(vec![bs, len, j], out)
}
