mod config;

use std::fs;
use std::path::{Path, PathBuf};
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand};
use rand::Rng;
use rand_distr::Exp1;

use kinop::evaluation::{accumulation_curves, relative_l2_matrix, report, ErrorReport, ReportMode};
use kinop::io::{self, Checkpoint};
use kinop::kinetics::{generate_dataset, time_decompose, Split, TrajectoryDataset};
use kinop::losses::DataLossKind;
use kinop::massmap::{self, Direction};
use kinop::networks::Network;
use kinop::operator::{recursive_predict, DeepONetModel, ModelMode, StateSchema};
use kinop::optim::LrSchedule;
use kinop::rng;
use kinop::training::{self, TrainingData, TrainingLog};
use kinop::{Error, Result, Tensor};

use config::{parse_grid, ExperimentConfig, Paradigm};

#[derive(Parser)]
#[command(name = "kinop", version, about = "Operator surrogates for stiff chemical kinetics")]
struct Cli {
    #[command(subcommand)]
    cmd: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Integrate a grid of initial conditions and write a dataset.
    Gen(GenArgs),
    /// Train one or more models on a dataset.
    Train(TrainArgs),
    /// Evaluate a checkpoint on a dataset split.
    Eval(EvalArgs),
    /// Autoregressive rollout report (same as `eval --recursive N`).
    Recurse(RecurseArgs),
    /// Round-trip self-test of the simplex map.
    MassmapCheck(MassmapArgs),
}

#[derive(Args)]
struct GenArgs {
    #[arg(long)]
    config: Option<PathBuf>,
    #[arg(long)]
    out: PathBuf,
    #[arg(long)]
    mechanism: Option<String>,
    /// Initial-condition grid as `AxB`.
    #[arg(long, value_parser = parse_grid)]
    grid: Option<[usize; 2]>,
    #[arg(long)]
    steps: Option<usize>,
    #[arg(long)]
    dt: Option<f64>,
    #[arg(long)]
    tol: Option<f64>,
    #[arg(long)]
    test_fraction: Option<f64>,
    #[arg(long)]
    seed: Option<u64>,
}

#[derive(Args)]
struct TrainArgs {
    #[arg(long)]
    config: Option<PathBuf>,
    #[arg(long)]
    data: PathBuf,
    #[arg(long)]
    out: PathBuf,
    #[arg(long, value_enum)]
    paradigm: Option<Paradigm>,
    /// `na`, `ad-a` or `ad-b`.
    #[arg(long)]
    loss: Option<DataLossKind>,
    #[arg(long)]
    com: bool,
    #[arg(long)]
    pou: bool,
    #[arg(long)]
    bound: Option<f64>,
    #[arg(long)]
    massmap: bool,
    #[arg(long)]
    p: Option<usize>,
    #[arg(long)]
    n_t: Option<usize>,
    #[arg(long)]
    epochs: Option<usize>,
    /// Constant learning rate instead of the configured schedule.
    #[arg(long)]
    lr: Option<f64>,
    #[arg(long)]
    eval_every: Option<usize>,
    #[arg(long)]
    optimized_a: bool,
    #[arg(long)]
    seed: Option<u64>,
    #[arg(long)]
    runs: Option<usize>,
}

#[derive(Args)]
struct EvalArgs {
    #[arg(long)]
    checkpoint: PathBuf,
    #[arg(long)]
    data: PathBuf,
    #[arg(long)]
    out: PathBuf,
    #[arg(long, value_enum, default_value = "test")]
    split: SplitArg,
    /// Also roll the model out over this many segments.
    #[arg(long)]
    recursive: Option<usize>,
}

#[derive(Args)]
struct RecurseArgs {
    #[arg(long)]
    checkpoint: PathBuf,
    #[arg(long)]
    data: PathBuf,
    #[arg(long)]
    out: PathBuf,
    #[arg(long, value_enum, default_value = "test")]
    split: SplitArg,
    #[arg(long)]
    segments: usize,
}

#[derive(Args)]
struct MassmapArgs {
    /// Simplex dimensions to test.
    #[arg(long, value_delimiter = ',', default_value = "2,3,5,11")]
    n: Vec<usize>,
    #[arg(long, default_value_t = 100_000)]
    samples: usize,
    #[arg(long, default_value_t = 0)]
    seed: u64,
}

#[derive(Clone, Copy, clap::ValueEnum)]
enum SplitArg {
    Train,
    Test,
}

impl From<SplitArg> for Split {
    fn from(s: SplitArg) -> Self {
        match s {
            SplitArg::Train => Split::Train,
            SplitArg::Test => Split::Test,
        }
    }
}

/// 2 for usage, configuration and input problems, 1 for runtime failures.
fn exit_code(e: &Error) -> u8 {
    match e {
        Error::Config(_) | Error::InvalidMode(_) | Error::Format(_) => 2,
        Error::Io(io) if io.kind() == std::io::ErrorKind::NotFound => 2,
        _ => 1,
    }
}

fn set_threads() -> Result<()> {
    if let Ok(v) = std::env::var("KINOP_THREADS") {
        let n: usize = v
            .parse()
            .ok()
            .filter(|&n| n > 0)
            .ok_or_else(|| Error::Config(format!("KINOP_THREADS={v:?} is not a positive integer")))?;
        rayon::ThreadPoolBuilder::new()
            .num_threads(n)
            .build_global()
            .map_err(|e| Error::Config(e.to_string()))?;
    }
    Ok(())
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    let result = set_threads().and_then(|()| match cli.cmd {
        Command::Gen(a) => cmd_gen(a),
        Command::Train(a) => cmd_train(a),
        Command::Eval(a) => cmd_eval(&a.checkpoint, &a.data, &a.out, a.split.into(), a.recursive),
        Command::Recurse(a) => cmd_eval(&a.checkpoint, &a.data, &a.out, a.split.into(), Some(a.segments)),
        Command::MassmapCheck(a) => cmd_massmap_check(a),
    });
    match result {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::from(exit_code(&e))
        }
    }
}

fn write_config(cfg: &ExperimentConfig, out: &Path) -> Result<()> {
    fs::create_dir_all(out)?;
    fs::write(out.join("config.toml"), cfg.to_toml()?)?;
    Ok(())
}

fn cmd_gen(a: GenArgs) -> Result<()> {
    let mut cfg = ExperimentConfig::load(a.config.as_deref())?;
    let g = &mut cfg.gen;
    if let Some(v) = a.mechanism {
        g.mechanism = v;
    }
    if let Some(v) = a.grid {
        g.grid = v;
    }
    if let Some(v) = a.steps {
        g.steps = v;
    }
    if let Some(v) = a.dt {
        g.dt = v;
    }
    if let Some(v) = a.tol {
        g.tol = v;
    }
    if let Some(v) = a.test_fraction {
        g.test_fraction = v;
    }
    if let Some(v) = a.seed {
        g.seed = v;
    }
    let mech = g.mechanism()?;
    let grid = g.grid_spec(&mech)?;
    let gen_cfg = g.generation()?;
    let ds = generate_dataset(&mech, &grid, &gen_cfg)?;
    io::save_dataset(&ds, &a.out)?;
    write_config(&cfg, &a.out)?;
    println!(
        "wrote {} trajectories of {} steps ({} train, {} test) to {}; max mass drift {:.3e}",
        ds.num_trajectories(),
        ds.n_total(),
        ds.train.len(),
        ds.test.len(),
        a.out.display(),
        ds.mass_drift()
    );
    Ok(())
}

fn apply_train_overrides(cfg: &mut ExperimentConfig, a: &TrainArgs) {
    let (m, t) = (&mut cfg.model, &mut cfg.train);
    if let Some(v) = a.paradigm {
        m.paradigm = v;
    }
    if let Some(v) = a.loss {
        t.loss.kind = v;
    }
    t.loss.com_enabled |= a.com;
    m.pou |= a.pou;
    m.massmap |= a.massmap;
    if let Some(v) = a.bound {
        m.bound = v;
    }
    if let Some(v) = a.p {
        m.p = v;
    }
    if let Some(v) = a.n_t {
        m.n_t = v;
    }
    if let Some(v) = a.epochs {
        t.epochs = v;
    }
    if let Some(lr) = a.lr {
        t.optimizer.schedule = LrSchedule::Constant { lr };
    }
    if let Some(v) = a.eval_every {
        t.eval_every = v;
    }
    t.optimized_a |= a.optimized_a;
    if let Some(v) = a.seed {
        t.seed = v;
    }
    if let Some(v) = a.runs {
        t.runs = v;
    }
}

fn build_model(cfg: &ExperimentConfig, j: usize, seed: u64) -> Result<DeepONetModel> {
    let m = &cfg.model;
    let branch = Network::init(m.branch.build(j, j * m.p), &mut rng::stream(seed, "init.branch"))?;
    let trunk = Network::init(m.trunk.build(1, j * m.p), &mut rng::stream(seed, "init.trunk"))?;
    let mode = match m.paradigm {
        Paradigm::OneStep => ModelMode::OneStep {
            pou: m.pou,
            bound_factor: m.bound,
        },
        Paradigm::TwoStep => ModelMode::TwoStep { factors: None },
    };
    DeepONetModel::new(branch, trunk, j, m.p, mode, m.n_t + 1)
}

fn write_log(dir: &Path, suffix: &str, log: &TrainingLog) -> Result<()> {
    io::write_history_csv(&dir.join(format!("history{suffix}.csv")), &log.history)?;
    if !log.weights.is_empty() {
        io::write_weights_csv(&dir.join(format!("weights{suffix}.csv")), &log.weights)?;
    }
    Ok(())
}

fn cmd_train(a: TrainArgs) -> Result<()> {
    let mut cfg = ExperimentConfig::load(a.config.as_deref())?;
    apply_train_overrides(&mut cfg, &a);
    let ds = io::load_dataset(&a.data)?;
    cfg.validate_training(ds.schema.mass_group.len())?;
    let (ds, massmap) = if cfg.model.massmap {
        (massmap::collapse_dataset(&ds)?, Some(ds.schema.clone()))
    } else {
        (ds, None)
    };
    let data = TrainingData::from_dataset(&ds, cfg.model.n_t)?;
    write_config(&cfg, &a.out)?;
    let j = data.schema.j();
    let mut finals = Vec::with_capacity(cfg.train.runs);
    for run in 0..cfg.train.runs {
        let tc = cfg.train.run_config(run);
        let dir = a.out.join(format!("run-{run}"));
        fs::create_dir_all(&dir)?;
        let mut model = build_model(&cfg, j, tc.seed)?;
        let (mut log, mut branch_log) = (TrainingLog::default(), TrainingLog::default());
        let outcome = match cfg.model.paradigm {
            Paradigm::OneStep => training::train_one_step(&mut model, &data, &tc, &mut log),
            Paradigm::TwoStep => training::train_two_step(&mut model, &data, &tc, &mut log, &mut branch_log).map(|_| ()),
        };
        match cfg.model.paradigm {
            Paradigm::OneStep => write_log(&dir, "", &log)?,
            Paradigm::TwoStep => {
                write_log(&dir, "_trunk", &log)?;
                write_log(&dir, "_branch", &branch_log)?;
            }
        }
        outcome?;
        io::save_checkpoint(
            &Checkpoint {
                model,
                schema: data.schema.clone(),
                normalization: data.normalization.clone(),
                massmap: massmap.clone(),
            },
            &dir.join("checkpoint"),
        )?;
        let last = match cfg.model.paradigm {
            Paradigm::OneStep => log.final_row(),
            Paradigm::TwoStep => branch_log.final_row(),
        }
        .cloned()
        .expect("at least one logged epoch");
        if cfg.model.paradigm == Paradigm::TwoStep {
            let trunk = log.final_row().expect("logged");
            println!("run {run} (seed {}): trunk train rel-L2 {:.6e}", tc.seed, trunk.train_rel_l2);
        }
        println!(
            "run {run} (seed {}): final train rel-L2 {:.6e}, test rel-L2 {:.6e}",
            tc.seed, last.train_rel_l2, last.test_rel_l2
        );
        finals.push(last.test_rel_l2);
    }
    if finals.len() > 1 {
        let n = finals.len() as f64;
        let mean = finals.iter().sum::<f64>() / n;
        let std = (finals.iter().map(|v| (v - mean).powi(2)).sum::<f64>() / n).sqrt();
        println!("test rel-L2 over {} runs: mean {mean:.6e}, std {std:.6e}", finals.len());
    }
    Ok(())
}

fn schema_diff(expected: &StateSchema, found: &StateSchema) -> String {
    format!(
        "checkpoint expects states {:?} (temperature {:?}, mass group {:?}); dataset has {:?} (temperature {:?}, mass group {:?})",
        expected.names,
        expected.temperature_index,
        expected.mass_group,
        found.names,
        found.temperature_index,
        found.mass_group
    )
}

fn expand(pred: Tensor, ck: &Checkpoint) -> Result<Tensor> {
    match &ck.massmap {
        Some(full) => Ok(massmap::batch_transform(&pred, full, Direction::Expand)?.0),
        None => Ok(pred),
    }
}

fn write_report(out: &Path, prefix: &str, r: &ErrorReport, schema: &StateSchema) -> Result<()> {
    io::write_errors_csv(&out.join(format!("{prefix}_errors.csv")), r, schema)?;
    io::write_summary_csv(&out.join(format!("{prefix}_summary.csv")), r, schema)?;
    println!("{prefix}: global mean rel-L2 {:.6e}", r.global_mean);
    for (a, s) in r.per_state.iter().enumerate() {
        println!(
            "  {:>8}  mean {:.4e}  median {:.4e}  q90 {:.4e}  max {:.4e}",
            schema.names[a], s.mean, s.median, s.q90, s.max
        );
    }
    Ok(())
}

fn cmd_eval(ck_dir: &Path, data_dir: &Path, out: &Path, split: Split, recursive: Option<usize>) -> Result<()> {
    let ck = io::load_checkpoint(ck_dir)?;
    let ds = io::load_dataset(data_dir)?;
    let physical_schema = ck.massmap.clone().unwrap_or_else(|| ck.schema.clone());
    if ds.schema != physical_schema {
        return Err(Error::Config(schema_diff(&physical_schema, &ds.schema)));
    }
    let model_ds: TrajectoryDataset = if ck.massmap.is_some() {
        massmap::collapse_dataset(&ds)?
    } else {
        ds.clone()
    };
    let n_t = ck.model.n_t1() - 1;
    let data = TrainingData::with_normalization(&model_ds, n_t, ck.normalization.clone())?;
    let split_data = match split {
        Split::Train => &data.train,
        Split::Test => &data.test,
    };
    if split_data.samples() == 0 {
        return Err(Error::Config("the selected split is empty".into()));
    }
    fs::create_dir_all(out)?;
    let truth = time_decompose(&ds.split(split)?, n_t)?.segments;
    let pred = expand(training::predict_split(&ck.model, &data, split_data)?, &ck)?;
    write_report(out, "segmented", &report(&truth, &pred, ReportMode::Segmented)?, &ds.schema)?;
    let rec = ReportMode::Reconstructed {
        num_segments: data.num_segments,
    };
    write_report(out, "reconstructed", &report(&truth, &pred, rec)?, &ds.schema)?;

    if let Some(n_seg) = recursive {
        if n_seg == 0 {
            return Err(Error::Config("--recursive needs at least one segment".into()));
        }
        let full = ds.split(split)?;
        let len = n_seg * n_t + 1;
        if full.shape()[1] < len {
            return Err(Error::Config(format!(
                "{n_seg} segments need {len} points per trajectory, the dataset has {}",
                full.shape()[1]
            )));
        }
        let truth = full.index_select(1, &(0..len).collect::<Vec<_>>())?;
        let bs = truth.shape()[0];
        let y0 = truth.index_select(1, &[0])?.reshape(&[bs, ds.schema.j()])?;
        let y0 = match &ck.massmap {
            Some(s) => massmap::batch_transform(&y0, s, Direction::Collapse)?.0,
            None => y0,
        };
        let rollout = expand(recursive_predict(&ck.model, &ck.schema, &ck.normalization, &y0, n_seg)?, &ck)?;
        let r = ErrorReport::from_matrix(relative_l2_matrix(&truth, &rollout)?);
        write_report(out, "rollout", &r, &ds.schema)?;
        let curves = accumulation_curves(&truth, &rollout, n_t)?;
        io::write_accumulation_csv(&out.join("accumulation.csv"), &curves, &ds.schema)?;
    }
    Ok(())
}

fn cmd_massmap_check(a: MassmapArgs) -> Result<()> {
    let y = [0.2, 0.3, 0.5];
    let z = massmap::forward_map(&y, massmap::DEFAULT_EPS)?;
    let back = massmap::inverse_map(&[2.0 / 7.0, 0.3])?;
    println!("worked example: (0.2, 0.3, 0.5) -> ({:.15}, {}) -> {back:?}", z[0], z[1]);
    let mut failed = false;
    for &n in &a.n {
        if n < 2 {
            return Err(Error::Config(format!("simplex dimension {n} is below 2")));
        }
        let mut rng = rng::stream(a.seed, &format!("massmap.{n}"));
        let (mut round, mut sum_err, mut z_err) = (0.0f64, 0.0f64, 0.0f64);
        for _ in 0..a.samples {
            let e: Vec<f64> = (0..n).map(|_| rng.sample::<f64, _>(Exp1)).collect();
            let s: f64 = e.iter().sum();
            let y: Vec<f64> = e.iter().map(|v| v / s).collect();
            let z = massmap::forward_map(&y, massmap::DEFAULT_EPS)?;
            let back = massmap::inverse_map(&z)?;
            round = y.iter().zip(&back).map(|(p, q)| (p - q).abs()).fold(round, f64::max);
            sum_err = sum_err.max((back.iter().sum::<f64>() - 1.0).abs());
            let z2 = massmap::forward_map(&back, massmap::DEFAULT_EPS)?;
            z_err = z.iter().zip(&z2).map(|(p, q)| (p - q).abs()).fold(z_err, f64::max);
        }
        let ok = round < 1e-10 && z_err < 1e-10 && sum_err <= 1e-12;
        failed |= !ok;
        println!(
            "n = {n:>3}: {} points, max |y - inv(fwd(y))| {round:.3e}, max |z - fwd(inv(z))| {z_err:.3e}, max |sum - 1| {sum_err:.3e} [{}]",
            a.samples,
            if ok { "ok" } else { "FAIL" }
        );
    }
    if failed {
        return Err(Error::Contract("simplex map round trip exceeded tolerance".into()));
    }
    Ok(())
}
