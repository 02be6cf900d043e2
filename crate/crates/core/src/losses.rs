//! Training objectives: MSE, the mass-conservation penalty, and the two
//! gradient-free adaptive weightings with their budget-preserving updates.

use serde::{Deserialize, Serialize};

use crate::autodiff::{Graph, Var};
use crate::error::{Error, Result};
use crate::evaluation::relative_l2_matrix;
use crate::operator::StateSchema;
use crate::tensor::Tensor;

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
pub enum DataLossKind {
    #[default]
    #[serde(rename = "na")]
    NonAdaptive,
    #[serde(rename = "ad-a")]
    TypeA,
    #[serde(rename = "ad-b")]
    TypeB,
}

impl DataLossKind {
    pub fn label(self) -> &'static str {
        match self {
            DataLossKind::NonAdaptive => "na",
            DataLossKind::TypeA => "ad-a",
            DataLossKind::TypeB => "ad-b",
        }
    }
}

impl std::str::FromStr for DataLossKind {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "na" => Ok(DataLossKind::NonAdaptive),
            "ad-a" => Ok(DataLossKind::TypeA),
            "ad-b" => Ok(DataLossKind::TypeB),
            other => Err(Error::Config(format!(
                "unknown loss kind {other:?} (expected na, ad-a or ad-b)"
            ))),
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct LossConfig {
    pub kind: DataLossKind,
    #[serde(default)]
    pub com_enabled: bool,
    #[serde(default = "default_com_multiplier")]
    pub com_multiplier: f64,
}

fn default_com_multiplier() -> f64 {
    0.1
}

impl Default for LossConfig {
    fn default() -> Self {
        Self {
            kind: DataLossKind::NonAdaptive,
            com_enabled: false,
            com_multiplier: default_com_multiplier(),
        }
    }
}

impl LossConfig {
    pub fn validate(&self, schema: &StateSchema) -> Result<()> {
        if self.com_enabled && schema.mass_group.is_empty() {
            return Err(Error::Config(
                "the mass-conservation penalty needs a nonempty mass group".into(),
            ));
        }
        Ok(())
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum WeightKind {
    TypeA,
    TypeB,
}

/// Adaptive weights with a fixed budget `R` that every update preserves.
#[derive(Clone, Debug, PartialEq)]
pub struct AdaptiveWeights {
    pub kind: WeightKind,
    /// `[j]` for Type-A, `[bs_total, j]` for Type-B.
    pub values: Tensor,
    pub budget: f64,
    pub first_update_epoch: usize,
    pub update_every: usize,
}

impl AdaptiveWeights {
    pub fn type_a(j: usize) -> Self {
        Self {
            kind: WeightKind::TypeA,
            values: Tensor::full(&[j], 1.0),
            budget: j as f64,
            first_update_epoch: 100,
            update_every: 50,
        }
    }

    pub fn type_b(bs_total: usize, j: usize) -> Self {
        Self {
            kind: WeightKind::TypeB,
            values: Tensor::full(&[bs_total, j], 1.0),
            budget: (bs_total * j) as f64,
            first_update_epoch: 100,
            update_every: 50,
        }
    }

    /// Weights for the given loss kind, or `None` when the loss is not adaptive.
    pub fn for_kind(kind: DataLossKind, bs_total: usize, j: usize) -> Option<Self> {
        match kind {
            DataLossKind::NonAdaptive => None,
            DataLossKind::TypeA => Some(Self::type_a(j)),
            DataLossKind::TypeB => Some(Self::type_b(bs_total, j)),
        }
    }

    /// Whether an update is due before running the epoch that follows
    /// `completed` finished epochs.
    pub fn is_update_epoch(&self, completed: usize) -> bool {
        completed >= self.first_update_epoch
            && (completed - self.first_update_epoch) % self.update_every.max(1) == 0
    }

    /// Re-weights from physical-space truth and predictions `[bs, n, j]`.
    pub fn update(&mut self, y_raw: &Tensor, yhat_raw: &Tensor) -> Result<()> {
        let x = relative_l2_matrix(y_raw, yhat_raw)?;
        self.update_from_errors(&x)
    }

    /// Re-weights from a per-(sample, state) error matrix `[bs, j]`.
    pub fn update_from_errors(&mut self, x: &Tensor) -> Result<()> {
        let measure = match self.kind {
            WeightKind::TypeA => {
                let (bs, j) = (x.shape()[0], x.shape()[1]);
                if self.values.shape() != [j] {
                    return Err(Error::dim(
                        "update_weights",
                        format!("Type-A weights {:?} vs {j} states", self.values.shape()),
                    ));
                }
                let mut m = vec![0.0; j];
                for row in x.data().chunks(j) {
                    for (acc, v) in m.iter_mut().zip(row) {
                        *acc += v;
                    }
                }
                m.iter_mut().for_each(|v| *v /= bs as f64);
                Tensor::from_vec(m)
            }
            WeightKind::TypeB => {
                if self.values.shape() != x.shape() {
                    return Err(Error::dim(
                        "update_weights",
                        format!("Type-B weights {:?} vs errors {:?}", self.values.shape(), x.shape()),
                    ));
                }
                x.clone()
            }
        };
        self.values = normalized_weights(&measure, self.budget)?;
        Ok(())
    }

    pub fn sum(&self) -> f64 {
        self.values.sum()
    }
}

/// `X / ΣX · R`.
pub fn normalized_weights(x: &Tensor, budget: f64) -> Result<Tensor> {
    if x.data().iter().any(|v| !(*v >= 0.0) || !v.is_finite()) {
        return Err(Error::Domain("error measures must be finite and nonnegative".into()));
    }
    let total = x.sum();
    if total == 0.0 {
        return Err(Error::DegenerateUpdate);
    }
    Ok(x.map(|v| v / total * budget))
}

fn check_same(y: &Tensor, yhat: &Tensor, op: &'static str) -> Result<(usize, usize, usize)> {
    if y.shape() != yhat.shape() || y.ndim() != 3 {
        return Err(Error::dim(
            op,
            format!("expected equal [bs, n, j] shapes, got {:?} and {:?}", y.shape(), yhat.shape()),
        ));
    }
    Ok((y.shape()[0], y.shape()[1], y.shape()[2]))
}

/// `(1/(j·bs·n)) ΣΣΣ (Y − Ŷ)²`.
pub fn mse_data_loss(y: &Tensor, yhat: &Tensor) -> Result<f64> {
    check_same(y, yhat, "mse_data_loss")?;
    let s: f64 = y.data().iter().zip(yhat.data()).map(|(a, b)| (a - b).powi(2)).sum();
    Ok(s / y.len() as f64)
}

/// `(1/(bs·n)) ΣΣ (Σ_{a∈mass group} Ŷ − 1)²` on physical-space predictions.
pub fn com_loss(yhat_raw: &Tensor, schema: &StateSchema) -> Result<f64> {
    if schema.mass_group.is_empty() {
        return Err(Error::Config("mass-conservation loss needs a nonempty mass group".into()));
    }
    let j = schema.j();
    if yhat_raw.shape().last() != Some(&j) {
        return Err(Error::dim("com_loss", format!("trailing axis must be {j}")));
    }
    let rows = yhat_raw.len() / j;
    let s: f64 = yhat_raw
        .data()
        .chunks(j)
        .map(|row| (schema.mass_group.iter().map(|&a| row[a]).sum::<f64>() - 1.0).powi(2))
        .sum();
    Ok(s / rows as f64)
}

/// `Σ_a W_a · MSE_a` where `MSE_a` averages over samples and times.
pub fn weighted_loss_type_a(y: &Tensor, yhat: &Tensor, w: &Tensor) -> Result<f64> {
    let (bs, n, j) = check_same(y, yhat, "weighted_loss_type_a")?;
    if w.shape() != [j] {
        return Err(Error::dim("weighted_loss_type_a", format!("weights {:?} vs {j} states", w.shape())));
    }
    let mut per = vec![0.0; j];
    for (idx, (a, b)) in y.data().iter().zip(yhat.data()).enumerate() {
        per[idx % j] += (a - b).powi(2);
    }
    Ok(per.iter().zip(w.data()).map(|(s, w)| w * s / (bs * n) as f64).sum())
}

/// `Σ_a Σ_b W_ba · (1/n) Σ_c (Y − Ŷ)²`.
pub fn weighted_loss_type_b(y: &Tensor, yhat: &Tensor, w: &Tensor) -> Result<f64> {
    let (bs, n, j) = check_same(y, yhat, "weighted_loss_type_b")?;
    if w.shape() != [bs, j] {
        return Err(Error::dim("weighted_loss_type_b", format!("weights {:?} vs [{bs}, {j}]", w.shape())));
    }
    let mut total = 0.0;
    for (idx, (a, b)) in y.data().iter().zip(yhat.data()).enumerate() {
        let (i, s) = (idx / (n * j), idx % j);
        total += w.at(&[i, s]) * (a - b).powi(2) / n as f64;
    }
    Ok(total)
}

/// Relative weight of the mass-conservation term: the multiplier alone for a
/// plain loss, or the multiplier times the sum of the active weights.
pub fn com_weight(cfg: &LossConfig, active_weights: Option<&Tensor>) -> f64 {
    match active_weights {
        Some(w) if cfg.kind != DataLossKind::NonAdaptive => cfg.com_multiplier * w.sum(),
        _ => cfg.com_multiplier,
    }
}

/// `L_data + W_CoM · L_CoM`, or `L_data` when the penalty is disabled.
pub fn combined_loss(data_loss: f64, com: f64, active_weights: Option<&Tensor>, cfg: &LossConfig) -> f64 {
    if cfg.com_enabled {
        data_loss + com_weight(cfg, active_weights) * com
    } else {
        data_loss
    }
}

/// Where the state axis sits in a `[bs, ·, ·]` loss tensor.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum StateAxis {
    /// `[bs, n_t1, j]` predictions.
    Last,
    /// `[bs, j, p]` branch coefficients.
    Middle,
}

/// Per-element weights `w` so that `Σ w·(Y − Ŷ)²` is the configured data loss.
/// `weights` holds the active rows: `[j]` (Type-A) or `[bs, j]` (Type-B).
pub fn loss_mask(
    kind: DataLossKind,
    weights: Option<&Tensor>,
    shape: &[usize],
    axis: StateAxis,
) -> Result<Tensor> {
    let (bs, d1, d2) = (shape[0], shape[1], shape[2]);
    let (j, n) = match axis {
        StateAxis::Last => (d2, d1),
        StateAxis::Middle => (d1, d2),
    };
    let w = |i: usize, a: usize| -> Result<f64> {
        Ok(match kind {
            DataLossKind::NonAdaptive => 1.0 / (bs * n * j) as f64,
            DataLossKind::TypeA => {
                let w = weights.ok_or_else(|| Error::Contract("Type-A loss without weights".into()))?;
                w.data()[a] / (bs * n) as f64
            }
            DataLossKind::TypeB => {
                let w = weights.ok_or_else(|| Error::Contract("Type-B loss without weights".into()))?;
                w.data()[i * j + a] / n as f64
            }
        })
    };
    match (kind, weights) {
        (DataLossKind::TypeA, Some(w)) if w.shape() != [j] => {
            return Err(Error::dim("loss_mask", format!("Type-A weights {:?} vs {j} states", w.shape())));
        }
        (DataLossKind::TypeB, Some(w)) if w.shape() != [bs, j] => {
            return Err(Error::dim("loss_mask", format!("Type-B weights {:?} vs [{bs}, {j}]", w.shape())));
        }
        _ => {}
    }
    let mut out = Vec::with_capacity(bs * d1 * d2);
    for i in 0..bs {
        for x in 0..d1 {
            for y in 0..d2 {
                let a = match axis {
                    StateAxis::Last => y,
                    StateAxis::Middle => x,
                };
                out.push(w(i, a)?);
            }
        }
    }
    Tensor::new(shape.to_vec(), out)
}

/// Data loss recorded on the tape.
pub fn data_loss_on_tape(
    g: &mut Graph,
    pred: Var,
    target: &Tensor,
    kind: DataLossKind,
    weights: Option<&Tensor>,
    axis: StateAxis,
) -> Result<Var> {
    if g.shape(pred) != target.shape() {
        return Err(Error::dim(
            "data loss",
            format!("prediction {:?} vs target {:?}", g.shape(pred), target.shape()),
        ));
    }
    let mask = loss_mask(kind, weights, target.shape(), axis)?;
    let t = g.constant(target.clone());
    let d = g.sub(pred, t)?;
    g.weighted_sum_sq(d, &mask)
}

/// Mass-conservation penalty recorded on the tape, from physical predictions.
pub fn com_loss_on_tape(g: &mut Graph, yhat_raw: Var, schema: &StateSchema) -> Result<Var> {
    if schema.mass_group.is_empty() {
        return Err(Error::Config("mass-conservation loss needs a nonempty mass group".into()));
    }
    let nd = g.shape(yhat_raw).len();
    let sel = g.index_select(yhat_raw, nd - 1, &schema.mass_group)?;
    let total = g.sum_last(sel);
    let resid = g.add_scalar(total, -1.0);
    let n = g.value(resid).len();
    let mask = Tensor::full(g.shape(resid), 1.0 / n as f64);
    g.weighted_sum_sq(resid, &mask)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::autodiff::{finite_difference, relative_discrepancy};
    use crate::rng::stream;
    use proptest::prelude::*;
    use rand::Rng;

    fn random(shape: &[usize], seed: u64) -> Tensor {
        let mut rng = stream(seed, "losses");
        let n = shape.iter().product();
        Tensor::new(shape.to_vec(), (0..n).map(|_| rng.random_range(0.0..1.0)).collect()).unwrap()
    }

    #[test]
    fn mse_examples_and_oracle() {
        let y = random(&[2, 3, 4], 1);
        assert_eq!(mse_data_loss(&y, &y).unwrap(), 0.0);
        assert!((mse_data_loss(&y, &y.map(|v| v + 1.0)).unwrap() - 1.0).abs() < 1e-14);
        let yh = random(&[2, 3, 4], 2);
        let mut s = 0.0;
        for i in 0..2 {
            for c in 0..3 {
                for a in 0..4 {
                    s += (y.at(&[i, c, a]) - yh.at(&[i, c, a])).powi(2);
                }
            }
        }
        assert!((mse_data_loss(&y, &yh).unwrap() - s / 24.0).abs() < 1e-12);
    }

    #[test]
    fn com_examples() {
        let schema = StateSchema::new(&["T", "A", "B"], Some(0), vec![1, 2]).unwrap();
        let exact = Tensor::new(vec![1, 2, 3], vec![1500.0, 0.3, 0.7, 900.0, 0.5, 0.5]).unwrap();
        assert!(com_loss(&exact, &schema).unwrap().abs() < 1e-30);
        let off = Tensor::new(vec![1, 2, 3], vec![1500.0, 0.4, 0.7, 900.0, 0.6, 0.5]).unwrap();
        assert!((com_loss(&off, &schema).unwrap() - 0.01).abs() < 1e-14);
        let empty = StateSchema::new(&["T", "A"], Some(0), vec![]).unwrap();
        assert!(matches!(com_loss(&exact.index_select(2, &[0, 1]).unwrap(), &empty), Err(Error::Config(_))));
    }

    #[test]
    fn weighted_losses_reduce_to_mse() {
        let (bs, n, j) = (3, 5, 2);
        let y = random(&[bs, n, j], 3);
        let yh = random(&[bs, n, j], 4);
        let mse = mse_data_loss(&y, &yh).unwrap();
        let a = weighted_loss_type_a(&y, &yh, &Tensor::full(&[j], 1.0)).unwrap();
        assert!((a - j as f64 * mse).abs() < 1e-12);
        let b = weighted_loss_type_b(&y, &yh, &Tensor::full(&[bs, j], 1.0)).unwrap();
        assert!((b - (bs * j) as f64 * mse).abs() < 1e-12);

        let mut onehot = Tensor::zeros(&[j]);
        onehot.set(&[1], 1.0);
        let a1 = weighted_loss_type_a(&y, &yh, &onehot).unwrap();
        let state1 = mse_data_loss(&y.index_select(2, &[1]).unwrap(), &yh.index_select(2, &[1]).unwrap()).unwrap();
        assert!((a1 - state1).abs() < 1e-12);

        let mut wb = Tensor::zeros(&[bs, j]);
        wb.set(&[2, 0], 3.0);
        let b1 = weighted_loss_type_b(&y, &yh, &wb).unwrap();
        let traj: f64 = (0..n).map(|c| (y.at(&[2, c, 0]) - yh.at(&[2, c, 0])).powi(2)).sum::<f64>() / n as f64;
        assert!((b1 - 3.0 * traj).abs() < 1e-12);
    }

    #[test]
    fn tape_losses_match_plain_versions() {
        let (bs, n, j) = (3, 4, 2);
        let y = random(&[bs, n, j], 5);
        let yh = random(&[bs, n, j], 6);
        let wa = random(&[j], 7);
        let wb = random(&[bs, j], 8);
        for (kind, w, expected) in [
            (DataLossKind::NonAdaptive, None, mse_data_loss(&y, &yh).unwrap()),
            (DataLossKind::TypeA, Some(&wa), weighted_loss_type_a(&y, &yh, &wa).unwrap()),
            (DataLossKind::TypeB, Some(&wb), weighted_loss_type_b(&y, &yh, &wb).unwrap()),
        ] {
            let mut g = Graph::new();
            let p = g.param(yh.clone());
            let l = data_loss_on_tape(&mut g, p, &y, kind, w, StateAxis::Last).unwrap();
            assert!((g.value(l).item() - expected).abs() < 1e-14);
            let grad = g.grad(l, &[p]).unwrap().remove(0);
            let mut f = |t: &Tensor| match kind {
                DataLossKind::NonAdaptive => mse_data_loss(&y, t).unwrap(),
                DataLossKind::TypeA => weighted_loss_type_a(&y, t, &wa).unwrap(),
                DataLossKind::TypeB => weighted_loss_type_b(&y, t, &wb).unwrap(),
            };
            let fd = finite_difference(&mut f, &yh, 1e-6);
            assert!(relative_discrepancy(grad.data(), fd.data()) < 1e-6);
        }
        let schema = StateSchema::new(&["a", "b"], None, vec![0, 1]).unwrap();
        let mut g = Graph::new();
        let p = g.param(yh.clone());
        let l = com_loss_on_tape(&mut g, p, &schema).unwrap();
        assert!((g.value(l).item() - com_loss(&yh, &schema).unwrap()).abs() < 1e-14);
    }

    #[test]
    fn branch_layout_mask_constants() {
        let m = loss_mask(DataLossKind::NonAdaptive, None, &[2, 3, 4], StateAxis::Middle).unwrap();
        assert!(m.data().iter().all(|&v| (v - 1.0 / 24.0).abs() < 1e-18));
        let wa = Tensor::from_vec(vec![1.0, 2.0, 3.0]);
        let m = loss_mask(DataLossKind::TypeA, Some(&wa), &[2, 3, 4], StateAxis::Middle).unwrap();
        assert!((m.at(&[1, 2, 3]) - 3.0 / 8.0).abs() < 1e-18);
        let wb = Tensor::new(vec![2, 3], vec![1.0, 2.0, 3.0, 4.0, 5.0, 6.0]).unwrap();
        let m = loss_mask(DataLossKind::TypeB, Some(&wb), &[2, 3, 4], StateAxis::Middle).unwrap();
        assert!((m.at(&[1, 1, 0]) - 5.0 / 4.0).abs() < 1e-18);
    }

    #[test]
    fn weight_update_examples() {
        let mut w = AdaptiveWeights::type_a(2);
        w.update_from_errors(&Tensor::new(vec![1, 2], vec![1.0, 3.0]).unwrap()).unwrap();
        assert_eq!(w.values.data(), &[0.5, 1.5]);
        w.update_from_errors(&Tensor::new(vec![1, 2], vec![0.0, 1.0]).unwrap()).unwrap();
        assert_eq!(w.values.data(), &[0.0, 2.0]);
        w.update_from_errors(&Tensor::new(vec![2, 2], vec![0.2, 0.2, 0.2, 0.2]).unwrap()).unwrap();
        assert!(w.values.data().iter().all(|&v| (v - 1.0).abs() < 1e-15));
        assert!(matches!(
            w.update_from_errors(&Tensor::zeros(&[2, 2])),
            Err(Error::DegenerateUpdate)
        ));
    }

    #[test]
    fn type_b_outlier_gets_largest_weight() {
        let mut w = AdaptiveWeights::type_b(5, 2);
        let mut x = Tensor::full(&[5, 2], 0.01);
        x.set(&[3, 1], 0.1);
        w.update_from_errors(&x).unwrap();
        let top = w.values.at(&[3, 1]);
        assert!(w.values.data().iter().filter(|&&v| v >= top).count() == 1);
        assert!((w.sum() - 10.0).abs() < 1e-12);
    }

    #[test]
    fn update_schedule() {
        let w = AdaptiveWeights::type_a(3);
        let due: Vec<usize> = (0..260).filter(|&e| w.is_update_epoch(e)).collect();
        assert_eq!(due, vec![100, 150, 200, 250]);
    }

    #[test]
    fn combined_loss_examples() {
        let mut cfg = LossConfig::default();
        assert_eq!(combined_loss(1.0, 2.0, None, &cfg), 1.0);
        cfg.com_enabled = true;
        assert!((combined_loss(1.0, 2.0, None, &cfg) - 1.2).abs() < 1e-15);
        cfg.kind = DataLossKind::TypeA;
        let w = Tensor::full(&[12], 1.0);
        assert!((com_weight(&cfg, Some(&w)) - 1.2).abs() < 1e-15);
    }

    proptest! {
        #[test]
        fn updates_preserve_budget(vals in proptest::collection::vec(0.0f64..5.0, 12), scale in 0.01f64..100.0) {
            prop_assume!(vals.iter().sum::<f64>() > 0.0);
            let x = Tensor::new(vec![4, 3], vals).unwrap();
            for mut w in [AdaptiveWeights::type_a(3), AdaptiveWeights::type_b(4, 3)] {
                w.update_from_errors(&x).unwrap();
                prop_assert!((w.sum() - w.budget).abs() <= 1e-9);
                prop_assert!(w.values.data().iter().all(|&v| v >= 0.0));
                let before = w.values.clone();
                w.update_from_errors(&x.map(|v| v * scale)).unwrap();
                prop_assert!(w.values.max_abs_diff(&before) < 1e-12);
            }
        }
    }
}
