//! Training loops: joint one-step training, and the sequential two-step
//! procedure (trunk with free coefficients, QR of the trunk, branch against
//! the reconstructed coefficients).

use rand::seq::SliceRandom;
use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::autodiff::Graph;
use crate::error::{Error, Result};
use crate::evaluation::{report, ErrorReport, ReportMode};
use crate::kinetics::{time_decompose, Split, TrajectoryDataset};
use crate::losses::{com_loss_on_tape, com_weight, data_loss_on_tape, AdaptiveWeights, LossConfig, StateAxis};
use crate::operator::{
    denormalize, denormalize_on_tape, normalize, DeepONetModel, ModelMode, NormalizationParams, StateSchema,
    TwoStepFactors,
};
use crate::optim::{Adam, AdamConfig};
use crate::rng;
use crate::tensor::{self, Tensor};

/// Number of minibatches before and after `switch_epoch`.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct MinibatchSchedule {
    pub before: usize,
    pub after: usize,
    pub switch_epoch: usize,
}

impl MinibatchSchedule {
    pub fn constant(count: usize) -> Self {
        Self {
            before: count,
            after: count,
            switch_epoch: usize::MAX,
        }
    }

    pub fn count_at(&self, epoch: usize) -> usize {
        if epoch < self.switch_epoch {
            self.before
        } else {
            self.after
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct TrainConfig {
    pub epochs: usize,
    pub minibatches: MinibatchSchedule,
    pub seed: u64,
    #[serde(default)]
    pub loss: LossConfig,
    #[serde(default)]
    pub optimizer: AdamConfig,
    #[serde(default = "default_eval_every")]
    pub eval_every: usize,
    /// Two-step only: keep the optimised coefficients instead of refitting
    /// them by least squares after the trunk is trained.
    #[serde(default)]
    pub optimized_a: bool,
}

fn default_eval_every() -> usize {
    50
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        if self.epochs == 0 {
            return Err(Error::Config("training needs at least one epoch".into()));
        }
        if self.minibatches.before == 0 || self.minibatches.after == 0 {
            return Err(Error::Config("minibatch counts must be positive".into()));
        }
        if self.eval_every == 0 {
            return Err(Error::Config("eval_every must be positive".into()));
        }
        Ok(())
    }
}

/// Splits a seeded permutation of `0..n` into `count` contiguous chunks whose
/// sizes differ by at most one. `count` is capped at `n`.
pub fn minibatches(n: usize, count: usize, rng: &mut rng::StreamRng) -> Vec<Vec<usize>> {
    let mut perm: Vec<usize> = (0..n).collect();
    perm.shuffle(rng);
    let k = count.clamp(1, n.max(1));
    let (base, extra) = (n / k, n % k);
    let mut out = Vec::with_capacity(k);
    let mut start = 0;
    for c in 0..k {
        let len = base + usize::from(c < extra);
        out.push(perm[start..start + len].to_vec());
        start += len;
    }
    out
}

/// One split of segmented data, physical and normalised.
#[derive(Clone, Debug, PartialEq)]
pub struct SplitData {
    /// `[samples, n_t1, j]`
    pub raw: Tensor,
    pub norm: Tensor,
    /// `[samples, j]`
    pub y0_raw: Tensor,
    pub y0_norm: Tensor,
}

impl SplitData {
    fn new(raw: Tensor, schema: &StateSchema, params: &NormalizationParams) -> Result<Self> {
        let (n, j) = (raw.shape()[0], raw.shape()[2]);
        let norm = normalize(&raw, schema, params)?;
        let y0_raw = raw.index_select(1, &[0])?.reshape(&[n, j])?;
        let y0_norm = norm.index_select(1, &[0])?.reshape(&[n, j])?;
        Ok(Self {
            raw,
            norm,
            y0_raw,
            y0_norm,
        })
    }

    pub fn samples(&self) -> usize {
        self.raw.shape()[0]
    }
}

/// Segmented training and test data with the normalisation they share.
#[derive(Clone, Debug, PartialEq)]
pub struct TrainingData {
    pub train: SplitData,
    pub test: SplitData,
    pub schema: StateSchema,
    pub normalization: NormalizationParams,
    pub num_segments: usize,
    pub n_t: usize,
}

impl TrainingData {
    pub fn from_dataset(ds: &TrajectoryDataset, n_t: usize) -> Result<Self> {
        let normalization = ds.normalization.clone().ok_or_else(|| {
            Error::Domain("dataset has no normalisation (some value is not positive)".into())
        })?;
        Self::with_normalization(ds, n_t, normalization)
    }

    pub fn with_normalization(ds: &TrajectoryDataset, n_t: usize, normalization: NormalizationParams) -> Result<Self> {
        let train = time_decompose(&ds.split(Split::Train)?, n_t)?;
        let test = time_decompose(&ds.split(Split::Test)?, n_t)?;
        Ok(Self {
            train: SplitData::new(train.segments, &ds.schema, &normalization)?,
            test: SplitData::new(test.segments, &ds.schema, &normalization)?,
            schema: ds.schema.clone(),
            normalization,
            num_segments: train.num_segments,
            n_t,
        })
    }

    pub fn n_t1(&self) -> usize {
        self.n_t + 1
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct HistoryRow {
    pub epoch: usize,
    pub train_rel_l2: f64,
    /// NaN when the test split is empty.
    pub test_rel_l2: f64,
    pub lr: f64,
}

#[derive(Clone, Debug, PartialEq)]
pub struct WeightSnapshot {
    /// Completed epochs at the time of the update.
    pub epoch: usize,
    pub values: Tensor,
}

/// Everything a training phase records; kept up to date as training runs so
/// a diverged run still leaves its partial history behind.
#[derive(Clone, Debug, Default, PartialEq)]
pub struct TrainingLog {
    pub history: Vec<HistoryRow>,
    pub weights: Vec<WeightSnapshot>,
}

impl TrainingLog {
    pub fn final_row(&self) -> Option<&HistoryRow> {
        self.history.last()
    }
}

fn is_log_epoch(done: usize, cfg: &TrainConfig) -> bool {
    done % cfg.eval_every == 0 || done == cfg.epochs
}

/// Physical-space predictions `[samples, n_t1, j]` for a split.
pub fn predict_split(model: &DeepONetModel, data: &TrainingData, split: &SplitData) -> Result<Tensor> {
    let norm = model.predict_normalized(&split.y0_norm)?;
    denormalize(&norm, &data.schema, &data.normalization)
}

/// Segmented physical-space report for a split, the metric logged during training.
pub fn split_report(model: &DeepONetModel, data: &TrainingData, split: &SplitData) -> Result<Option<ErrorReport>> {
    if split.samples() == 0 {
        return Ok(None);
    }
    let pred = predict_split(model, data, split)?;
    report(&split.raw, &pred, ReportMode::Segmented).map(Some)
}

fn global_mean(r: Option<ErrorReport>) -> f64 {
    r.map_or(f64::NAN, |r| r.global_mean)
}

fn check_finite(loss: f64, epoch: usize) -> Result<()> {
    if loss.is_finite() {
        Ok(())
    } else {
        Err(Error::TrainingDiverged { epoch })
    }
}

fn snapshot(log: &mut TrainingLog, epoch: usize, w: &AdaptiveWeights) {
    log.weights.push(WeightSnapshot {
        epoch,
        values: w.values.clone(),
    });
}

/// Rows of the active weights for a minibatch.
fn active_rows(w: Option<&AdaptiveWeights>, idx: &[usize]) -> Result<Option<Tensor>> {
    match w {
        None => Ok(None),
        Some(w) if w.values.ndim() == 1 => Ok(Some(w.values.clone())),
        Some(w) => w.values.index_select(0, idx).map(Some),
    }
}

/// Joint training of branch and trunk.
pub fn train_one_step(model: &mut DeepONetModel, data: &TrainingData, cfg: &TrainConfig, log: &mut TrainingLog) -> Result<()> {
    cfg.validate()?;
    cfg.loss.validate(&data.schema)?;
    if !matches!(model.mode, ModelMode::OneStep { .. }) {
        return Err(Error::InvalidMode(format!("one-step training on a {} model", model.mode.name())));
    }
    check_grid(model, data)?;
    let n = data.train.samples();
    let j = data.schema.j();
    let mut weights = AdaptiveWeights::for_kind(cfg.loss.kind, n, j);
    let mut opt_b = Adam::new(cfg.optimizer.clone(), &model.branch.params);
    let mut opt_t = Adam::new(cfg.optimizer.clone(), &model.trunk.params);
    let mut shuffle = rng::stream(cfg.seed, "shuffle");
    let nb = model.branch.params.len();

    for epoch in 0..cfg.epochs {
        if let Some(w) = weights.as_mut().filter(|w| w.is_update_epoch(epoch)) {
            let pred = predict_split(model, data, &data.train)?;
            w.update(&data.train.raw, &pred)?;
            snapshot(log, epoch, w);
        }
        let lr = cfg.optimizer.schedule.at(epoch);
        for idx in minibatches(n, cfg.minibatches.count_at(epoch), &mut shuffle) {
            let mut g = Graph::new();
            let bp = model.branch.bind(&mut g, true);
            let tp = model.trunk.bind(&mut g, true);
            let y0 = g.constant(data.train.y0_norm.index_select(0, &idx)?);
            let t = g.constant(model.time_grid.clone());
            let pred = model.one_step_on_tape(&mut g, &bp, &tp, y0, t)?;
            let target = data.train.norm.index_select(0, &idx)?;
            let rows = active_rows(weights.as_ref(), &idx)?;
            let mut loss = data_loss_on_tape(&mut g, pred, &target, cfg.loss.kind, rows.as_ref(), StateAxis::Last)?;
            if cfg.loss.com_enabled {
                let phys = denormalize_on_tape(&mut g, pred, &data.schema, &data.normalization)?;
                let com = com_loss_on_tape(&mut g, phys, &data.schema)?;
                let com = g.scale(com, com_weight(&cfg.loss, rows.as_ref()));
                loss = g.add(loss, com)?;
            }
            check_finite(g.value(loss).item(), epoch + 1)?;
            let all: Vec<_> = bp.iter().chain(&tp).copied().collect();
            let grads = g.grad(loss, &all)?;
            opt_b.step(&mut model.branch.params, &grads[..nb], lr)?;
            opt_t.step(&mut model.trunk.params, &grads[nb..], lr)?;
        }
        let done = epoch + 1;
        if is_log_epoch(done, cfg) {
            let train = global_mean(split_report(model, data, &data.train)?);
            check_finite(train, done)?;
            log.history.push(HistoryRow {
                epoch: done,
                train_rel_l2: train,
                test_rel_l2: global_mean(split_report(model, data, &data.test)?),
                lr,
            });
        }
    }
    Ok(())
}

fn check_grid(model: &DeepONetModel, data: &TrainingData) -> Result<()> {
    if model.n_t1() != data.n_t1() || model.j != data.schema.j() {
        return Err(Error::dim(
            "training",
            format!(
                "model expects {} time points and {} states, data has {} and {}",
                model.n_t1(),
                model.j,
                data.n_t1(),
                data.schema.j()
            ),
        ));
    }
    Ok(())
}

fn check_two_step(model: &DeepONetModel, data: &TrainingData, cfg: &TrainConfig) -> Result<()> {
    cfg.validate()?;
    if !matches!(model.mode, ModelMode::TwoStep { .. }) {
        return Err(Error::InvalidMode(format!("two-step training on a {} model", model.mode.name())));
    }
    if cfg.loss.com_enabled {
        return Err(Error::Config(
            "the mass-conservation penalty is not available in two-step training".into(),
        ));
    }
    check_grid(model, data)
}

/// Intermediate results of two-step training.
#[derive(Clone, Debug, PartialEq)]
pub struct TwoStepArtifacts {
    /// Coefficients optimised with the trunk, `[j, p, samples]`.
    pub a_opt: Tensor,
    /// Orthonormal trunk bases `[j, n_t1, p]` and triangular factors `[j, p, p]`.
    pub factors: TwoStepFactors,
    /// Coefficients in the trunk basis used to build the targets, `[j, p, samples]`.
    pub a_star: Tensor,
    /// Branch targets `R*·A*`, `[samples, j, p]`.
    pub u: Tensor,
}

/// Trunk bases `[n_t1, j, p]` on the model's time grid.
pub fn trunk_bases(model: &DeepONetModel) -> Result<Tensor> {
    model.trunk.predict(&model.time_grid)?.reshape(&[model.n_t1(), model.j, model.p])
}

/// Per-state least-squares fit of normalised targets onto the trunk span,
/// returned in physical space.
fn projection_error(model: &DeepONetModel, data: &TrainingData, split: &SplitData) -> Result<f64> {
    if split.samples() == 0 {
        return Ok(f64::NAN);
    }
    let c = trunk_bases(model)?;
    let a = fit_coefficients(&c, &split.norm)?;
    let pred = tensor::contract_trunk_a(&c, &a)?;
    let pred = denormalize(&pred, &data.schema, &data.normalization)?;
    Ok(report(&split.raw, &pred, ReportMode::Segmented)?.global_mean)
}

fn state_block(c: &Tensor, m: usize) -> Result<Tensor> {
    let (n1, p) = (c.shape()[0], c.shape()[2]);
    c.index_select(1, &[m])?.reshape(&[n1, p])
}

/// Targets of state `m` as `[n_t1, samples]`.
fn state_targets(y: &Tensor, m: usize) -> Result<Tensor> {
    let (bs, n1) = (y.shape()[0], y.shape()[1]);
    y.index_select(2, &[m])?.reshape(&[bs, n1])?.transpose()
}

/// Least-squares coefficients `[j, p, samples]` of `y` `[samples, n_t1, j]` in the trunk bases.
fn fit_coefficients(c: &Tensor, y: &Tensor) -> Result<Tensor> {
    let (j, p) = (c.shape()[1], c.shape()[2]);
    let bs = y.shape()[0];
    let mut out = Vec::with_capacity(j * p * bs);
    for m in 0..j {
        let a = tensor::least_squares(&state_block(c, m)?, &state_targets(y, m)?).map_err(|e| name_state(e, m))?;
        out.extend_from_slice(a.data());
    }
    Tensor::new(vec![j, p, bs], out)
}

fn name_state(e: Error, m: usize) -> Error {
    match e {
        Error::SingularBasis(d) => Error::SingularBasis(format!("state {m}: {d}")),
        other => other,
    }
}

/// Trains the trunk together with a free coefficient tensor `A` `[j, p, samples]`,
/// minibatching over the sample axis of `A`. Returns the optimised `A`.
pub fn train_trunk(model: &mut DeepONetModel, data: &TrainingData, cfg: &TrainConfig, log: &mut TrainingLog) -> Result<Tensor> {
    fit_trunk(model, data, cfg, log, true)
}

fn fit_trunk(
    model: &mut DeepONetModel,
    data: &TrainingData,
    cfg: &TrainConfig,
    log: &mut TrainingLog,
    update_trunk: bool,
) -> Result<Tensor> {
    check_two_step(model, data, cfg)?;
    let (j, p) = (model.j, model.p);
    if p >= data.n_t1() {
        return Err(Error::Config(format!(
            "two-step training needs fewer bases ({p}) than time points ({})",
            data.n_t1()
        )));
    }
    let n = data.train.samples();
    let mut init = rng::stream(cfg.seed, "init.a");
    let bound = 1.0 / (p as f64).sqrt();
    let a_data = (0..j * p * n).map(|_| init.random_range(-bound..bound)).collect();
    let mut a = vec![Tensor::new(vec![j, p, n], a_data)?];
    let mut weights = AdaptiveWeights::for_kind(cfg.loss.kind, n, j);
    let mut opt_t = Adam::new(cfg.optimizer.clone(), &model.trunk.params);
    let mut opt_a = Adam::new(cfg.optimizer.clone(), &a);
    let mut shuffle = rng::stream(cfg.seed, "shuffle.trunk");
    let nt = model.trunk.params.len();
    let physical = |model: &DeepONetModel, a: &Tensor| -> Result<Tensor> {
        let pred = tensor::contract_trunk_a(&trunk_bases(model)?, a)?;
        denormalize(&pred, &data.schema, &data.normalization)
    };

    for epoch in 0..cfg.epochs {
        if let Some(w) = weights.as_mut().filter(|w| w.is_update_epoch(epoch)) {
            w.update(&data.train.raw, &physical(model, &a[0])?)?;
            snapshot(log, epoch, w);
        }
        let lr = cfg.optimizer.schedule.at(epoch);
        for idx in minibatches(n, cfg.minibatches.count_at(epoch), &mut shuffle) {
            let mut g = Graph::new();
            let tp = model.trunk.bind(&mut g, true);
            let av = g.param(a[0].clone());
            let t = g.constant(model.time_grid.clone());
            let c = model.trunk_bases_on_tape(&mut g, &tp, t, false)?;
            let a_mb = g.index_select(av, 2, &idx)?;
            let pred = g.contract_trunk_a(c, a_mb)?;
            let target = data.train.norm.index_select(0, &idx)?;
            let rows = active_rows(weights.as_ref(), &idx)?;
            let loss = data_loss_on_tape(&mut g, pred, &target, cfg.loss.kind, rows.as_ref(), StateAxis::Last)?;
            check_finite(g.value(loss).item(), epoch + 1)?;
            let mut all = tp.clone();
            all.push(av);
            let mut grads = g.grad(loss, &all)?;
            let ga = grads.split_off(nt);
            if update_trunk {
                opt_t.step(&mut model.trunk.params, &grads, lr)?;
            }
            opt_a.step(&mut a, &ga, lr)?;
        }
        let done = epoch + 1;
        if is_log_epoch(done, cfg) {
            let pred = physical(model, &a[0])?;
            let train = report(&data.train.raw, &pred, ReportMode::Segmented)?.global_mean;
            check_finite(train, done)?;
            log.history.push(HistoryRow {
                epoch: done,
                train_rel_l2: train,
                test_rel_l2: projection_error(model, data, &data.test)?,
                lr,
            });
        }
    }
    Ok(a.pop().expect("one coefficient tensor"))
}

/// Per-state thin QR of the trained trunk, coefficients `A*` (least squares
/// by default, or `a_opt` when `use_optimized`), and branch targets `U = R*·A*`.
pub fn factorize_trunk(
    model: &DeepONetModel,
    targets_norm: &Tensor,
    a_opt: Tensor,
    use_optimized: bool,
) -> Result<TwoStepArtifacts> {
    let c = trunk_bases(model)?;
    let (n1, j, p) = (c.shape()[0], c.shape()[1], c.shape()[2]);
    let bs = targets_norm.shape()[0];
    let a_star = if use_optimized {
        a_opt.clone()
    } else {
        fit_coefficients(&c, targets_norm)?
    };
    if a_star.shape() != [j, p, bs] {
        return Err(Error::dim(
            "factorize_trunk",
            format!("coefficients {:?} vs [{j}, {p}, {bs}]", a_star.shape()),
        ));
    }
    let mut q = Vec::with_capacity(j * n1 * p);
    let mut r = Vec::with_capacity(j * p * p);
    let mut u = Tensor::zeros(&[bs, j, p]);
    for m in 0..j {
        let (qm, rm) = tensor::qr_thin(&state_block(&c, m)?).map_err(|e| name_state(e, m))?;
        let am = a_star.index_select(0, &[m])?.reshape(&[p, bs])?;
        let um = rm.matmul(&am)?;
        for b in 0..bs {
            for k in 0..p {
                u.set(&[b, m, k], um.at(&[k, b]));
            }
        }
        q.extend_from_slice(qm.data());
        r.extend_from_slice(rm.data());
    }
    Ok(TwoStepArtifacts {
        a_opt,
        factors: TwoStepFactors {
            q: Tensor::new(vec![j, n1, p], q)?,
            r: Tensor::new(vec![j, p, p], r)?,
        },
        a_star,
        u,
    })
}

/// Trains the branch against the targets `U`; the model must already hold the
/// factorised trunk.
pub fn train_branch(
    model: &mut DeepONetModel,
    data: &TrainingData,
    u: &Tensor,
    cfg: &TrainConfig,
    log: &mut TrainingLog,
) -> Result<()> {
    check_two_step(model, data, cfg)?;
    model.factors()?;
    let n = data.train.samples();
    let j = model.j;
    if u.shape() != [n, j, model.p] {
        return Err(Error::dim(
            "train_branch",
            format!("targets {:?} vs [{n}, {j}, {}]", u.shape(), model.p),
        ));
    }
    let mut weights = AdaptiveWeights::for_kind(cfg.loss.kind, n, j);
    let mut opt = Adam::new(cfg.optimizer.clone(), &model.branch.params);
    let mut shuffle = rng::stream(cfg.seed, "shuffle.branch");

    for epoch in 0..cfg.epochs {
        if let Some(w) = weights.as_mut().filter(|w| w.is_update_epoch(epoch)) {
            w.update(&data.train.raw, &predict_split(model, data, &data.train)?)?;
            snapshot(log, epoch, w);
        }
        let lr = cfg.optimizer.schedule.at(epoch);
        for idx in minibatches(n, cfg.minibatches.count_at(epoch), &mut shuffle) {
            let mut g = Graph::new();
            let bp = model.branch.bind(&mut g, true);
            let y0 = g.constant(data.train.y0_norm.index_select(0, &idx)?);
            let b = model.branch_coeffs_on_tape(&mut g, &bp, y0)?;
            let target = u.index_select(0, &idx)?;
            let rows = active_rows(weights.as_ref(), &idx)?;
            let loss = data_loss_on_tape(&mut g, b, &target, cfg.loss.kind, rows.as_ref(), StateAxis::Middle)?;
            check_finite(g.value(loss).item(), epoch + 1)?;
            let grads = g.grad(loss, &bp)?;
            opt.step(&mut model.branch.params, &grads, lr)?;
        }
        let done = epoch + 1;
        if is_log_epoch(done, cfg) {
            let train = global_mean(split_report(model, data, &data.train)?);
            check_finite(train, done)?;
            log.history.push(HistoryRow {
                epoch: done,
                train_rel_l2: train,
                test_rel_l2: global_mean(split_report(model, data, &data.test)?),
                lr,
            });
        }
    }
    Ok(())
}

/// Full two-step procedure on a two-step model: trunk, factorisation, branch.
pub fn train_two_step(
    model: &mut DeepONetModel,
    data: &TrainingData,
    cfg: &TrainConfig,
    trunk_log: &mut TrainingLog,
    branch_log: &mut TrainingLog,
) -> Result<TwoStepArtifacts> {
    let a_opt = train_trunk(model, data, cfg, trunk_log)?;
    let artifacts = factorize_trunk(model, &data.train.norm, a_opt, cfg.optimized_a)?;
    model.mode = ModelMode::TwoStep {
        factors: Some(artifacts.factors.clone()),
    };
    train_branch(model, data, &artifacts.u, cfg, branch_log)?;
    Ok(artifacts)
}

/// `max_m ‖Q*_m R*_m − C_m‖_max` and `max_m ‖Q*_mᵀ Q*_m − I‖_max` for a factorised model.
pub fn factorization_residuals(model: &DeepONetModel) -> Result<(f64, f64)> {
    let f = model.factors()?;
    let c = trunk_bases(model)?;
    let (j, n1, p) = (model.j, model.n_t1(), model.p);
    let (mut recon, mut ortho) = (0.0f64, 0.0f64);
    for m in 0..j {
        let q = f.q.index_select(0, &[m])?.reshape(&[n1, p])?;
        let r = f.r.index_select(0, &[m])?.reshape(&[p, p])?;
        recon = recon.max(q.matmul(&r)?.max_abs_diff(&state_block(&c, m)?));
        ortho = ortho.max(q.matmul_tn(&q)?.max_abs_diff(&Tensor::eye(p)));
    }
    Ok((recon, ortho))
}
