//! Relative-L2 error metrics and their per-state summaries.

use crate::error::{Error, Result};
use crate::operator::{recursive_predict, DeepONetModel, NormalizationParams, StateSchema};
use crate::tensor::Tensor;

/// `‖y − ŷ‖₂ / ‖y‖₂`.
pub fn relative_l2(y: &[f64], yhat: &[f64]) -> Result<f64> {
    if y.len() != yhat.len() {
        return Err(Error::dim(
            "relative_l2",
            format!("series lengths {} and {} differ", y.len(), yhat.len()),
        ));
    }
    let num: f64 = y.iter().zip(yhat).map(|(a, b)| (a - b) * (a - b)).sum();
    let den: f64 = y.iter().map(|a| a * a).sum();
    if den == 0.0 {
        return Err(Error::UndefinedMetric("reference series has zero norm".into()));
    }
    Ok((num / den).sqrt())
}

/// Relative L2 over the time axis for every (sample, state) of `[bs, n, j]` tensors.
pub fn relative_l2_matrix(y: &Tensor, yhat: &Tensor) -> Result<Tensor> {
    if y.shape() != yhat.shape() || y.ndim() != 3 {
        return Err(Error::dim(
            "relative_l2_matrix",
            format!("expected equal [bs, n, j] shapes, got {:?} and {:?}", y.shape(), yhat.shape()),
        ));
    }
    let (bs, n, j) = (y.shape()[0], y.shape()[1], y.shape()[2]);
    let mut num = vec![0.0; bs * j];
    let mut den = vec![0.0; bs * j];
    for (idx, (a, b)) in y.data().iter().zip(yhat.data()).enumerate() {
        let i = idx / (n * j);
        let s = idx % j;
        num[i * j + s] += (a - b) * (a - b);
        den[i * j + s] += a * a;
    }
    let mut out = Vec::with_capacity(bs * j);
    for (k, (nu, de)) in num.iter().zip(&den).enumerate() {
        if *de == 0.0 {
            return Err(Error::UndefinedMetric(format!(
                "sample {}, state {}: reference series has zero norm",
                k / j,
                k % j
            )));
        }
        out.push((nu / de).sqrt());
    }
    Tensor::new(vec![bs, j], out)
}

/// Quantile of ascending-sorted data with linear interpolation between order statistics.
pub fn quantile_sorted(sorted: &[f64], q: f64) -> f64 {
    assert!(!sorted.is_empty(), "quantile of empty data");
    let pos = q * (sorted.len() - 1) as f64;
    let lo = pos.floor() as usize;
    let hi = pos.ceil() as usize;
    sorted[lo] + (pos - lo as f64) * (sorted[hi] - sorted[lo])
}

#[derive(Clone, Debug, PartialEq)]
pub struct StateStats {
    pub mean: f64,
    /// Population standard deviation.
    pub std: f64,
    pub median: f64,
    pub q75: f64,
    pub q90: f64,
    pub max: f64,
}

impl StateStats {
    pub fn of(values: &[f64]) -> Self {
        let n = values.len() as f64;
        let mean = values.iter().sum::<f64>() / n;
        let var = values.iter().map(|v| (v - mean).powi(2)).sum::<f64>() / n;
        let mut sorted = values.to_vec();
        sorted.sort_by(f64::total_cmp);
        Self {
            mean,
            std: var.sqrt(),
            median: quantile_sorted(&sorted, 0.5),
            q75: quantile_sorted(&sorted, 0.75),
            q90: quantile_sorted(&sorted, 0.9),
            max: *sorted.last().expect("nonempty"),
        }
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct ErrorReport {
    /// `[samples, j]` relative L2 errors.
    pub errors: Tensor,
    pub per_state: Vec<StateStats>,
    /// Mean of the per-state means.
    pub global_mean: f64,
}

impl ErrorReport {
    pub fn from_matrix(errors: Tensor) -> Self {
        let (bs, j) = (errors.shape()[0], errors.shape()[1]);
        let per_state: Vec<StateStats> = (0..j)
            .map(|a| {
                let col: Vec<f64> = (0..bs).map(|i| errors.at(&[i, a])).collect();
                StateStats::of(&col)
            })
            .collect();
        let global_mean = per_state.iter().map(|s| s.mean).sum::<f64>() / j as f64;
        Self {
            errors,
            per_state,
            global_mean,
        }
    }

    /// Largest per-state mean error.
    pub fn worst_state_mean(&self) -> f64 {
        self.per_state.iter().map(|s| s.mean).fold(0.0, f64::max)
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum ReportMode {
    /// Every segment is its own sample.
    Segmented,
    /// Segments of one trajectory are concatenated, keeping duplicated endpoints.
    Reconstructed { num_segments: usize },
}

/// Error report between physical-space segment tensors `[bs·n_seg, n_t1, j]`.
pub fn report(truth: &Tensor, pred: &Tensor, mode: ReportMode) -> Result<ErrorReport> {
    if truth.shape() != pred.shape() || truth.ndim() != 3 {
        return Err(Error::dim(
            "report",
            format!("shapes {:?} and {:?} differ", truth.shape(), pred.shape()),
        ));
    }
    let m = match mode {
        ReportMode::Segmented => relative_l2_matrix(truth, pred)?,
        ReportMode::Reconstructed { num_segments } => {
            let (rows, n, j) = (truth.shape()[0], truth.shape()[1], truth.shape()[2]);
            if num_segments == 0 || rows % num_segments != 0 {
                return Err(Error::dim(
                    "report",
                    format!("{rows} segment rows are not a multiple of {num_segments} segments"),
                ));
            }
            let shape = [rows / num_segments, num_segments * n, j];
            relative_l2_matrix(&truth.reshaped(&shape)?, &pred.reshaped(&shape)?)?
        }
    };
    Ok(ErrorReport::from_matrix(m))
}

/// One row of an error-accumulation curve.
#[derive(Clone, Debug, PartialEq)]
pub struct AccumulationPoint {
    pub segment: usize,
    pub state: usize,
    pub mean: f64,
    pub median: f64,
    pub q75: f64,
    pub q90: f64,
}

/// For every prefix of `s` segments, statistics across samples of the
/// relative L2 of the rollout against truth up to that point. Both tensors
/// are deduplicated series `[bs, n_seg·n_t + 1, j]`.
pub fn accumulation_curves(truth: &Tensor, rollout: &Tensor, n_t: usize) -> Result<Vec<AccumulationPoint>> {
    if truth.shape() != rollout.shape() || truth.ndim() != 3 {
        return Err(Error::dim(
            "accumulation_curves",
            format!("shapes {:?} and {:?} differ", truth.shape(), rollout.shape()),
        ));
    }
    let len = truth.shape()[1];
    if n_t == 0 || (len - 1) % n_t != 0 {
        return Err(Error::dim(
            "accumulation_curves",
            format!("series length {len} is not n_seg·{n_t} + 1"),
        ));
    }
    let n_seg = (len - 1) / n_t;
    let mut out = Vec::with_capacity(n_seg * truth.shape()[2]);
    for s in 1..=n_seg {
        let idx: Vec<usize> = (0..=s * n_t).collect();
        let m = relative_l2_matrix(&truth.index_select(1, &idx)?, &rollout.index_select(1, &idx)?)?;
        let r = ErrorReport::from_matrix(m);
        for (a, st) in r.per_state.iter().enumerate() {
            out.push(AccumulationPoint {
                segment: s,
                state: a,
                mean: st.mean,
                median: st.median,
                q75: st.q75,
                q90: st.q90,
            });
        }
    }
    Ok(out)
}

/// Rolls the model out from each trajectory's first state and measures
/// error accumulation. Returns the rollout, its full-horizon report and the curves.
pub fn error_accumulation(
    model: &DeepONetModel,
    schema: &StateSchema,
    params: &NormalizationParams,
    truth: &Tensor,
) -> Result<(Tensor, ErrorReport, Vec<AccumulationPoint>)> {
    let n_t = model.n_t1() - 1;
    let (bs, len, j) = (truth.shape()[0], truth.shape()[1], truth.shape()[2]);
    if n_t == 0 || (len - 1) % n_t != 0 {
        return Err(Error::Config(format!(
            "trajectory length {len} does not split into segments of {} points",
            n_t + 1
        )));
    }
    let y0 = truth.index_select(1, &[0])?.reshape(&[bs, j])?;
    let rollout = recursive_predict(model, schema, params, &y0, (len - 1) / n_t)?;
    let full = ErrorReport::from_matrix(relative_l2_matrix(truth, &rollout)?);
    let curves = accumulation_curves(truth, &rollout, n_t)?;
    Ok((rollout, full, curves))
}
