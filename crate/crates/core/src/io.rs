//! On-disk formats: dataset directories, checkpoints and CSV reports.
//!
//! Datasets and checkpoints are a TOML manifest plus raw little-endian `f64`
//! blobs, row-major, each listed in the manifest with its shape and SHA-256.

use std::fs;
use std::path::Path;

use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::error::{Error, Result};
use crate::evaluation::{AccumulationPoint, ErrorReport};
use crate::kinetics::{IcGridSpec, TrajectoryDataset};
use crate::networks::{Network, NetworkConfig};
use crate::operator::{DeepONetModel, ModelMode, NormalizationParams, StateSchema, TwoStepFactors};
use crate::tensor::Tensor;
use crate::training::{HistoryRow, WeightSnapshot};

pub const FORMAT_VERSION: u32 = 1;
pub const DATASET_MANIFEST: &str = "manifest.toml";
pub const CHECKPOINT_MANIFEST: &str = "checkpoint.toml";

fn to_bytes(data: &[f64]) -> Vec<u8> {
    data.iter().flat_map(|v| v.to_le_bytes()).collect()
}

fn digest(bytes: &[u8]) -> String {
    hex::encode(Sha256::digest(bytes))
}

/// A blob listed in a manifest.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct BlobEntry {
    pub name: String,
    pub file: String,
    pub shape: Vec<usize>,
    pub sha256: String,
}

fn write_blob(dir: &Path, name: &str, t: &Tensor) -> Result<BlobEntry> {
    let file = format!("{name}.f64");
    let bytes = to_bytes(t.data());
    fs::write(dir.join(&file), &bytes)?;
    Ok(BlobEntry {
        name: name.into(),
        file,
        shape: t.shape().to_vec(),
        sha256: digest(&bytes),
    })
}

fn read_blob(dir: &Path, entry: &BlobEntry) -> Result<Tensor> {
    let bytes = fs::read(dir.join(&entry.file))?;
    let n: usize = entry.shape.iter().product();
    if bytes.len() != n * 8 {
        return Err(Error::Format(format!(
            "{}: {} bytes, expected {} for shape {:?}",
            entry.file,
            bytes.len(),
            n * 8,
            entry.shape
        )));
    }
    if digest(&bytes) != entry.sha256 {
        return Err(Error::Format(format!("{}: checksum mismatch", entry.file)));
    }
    let data = bytes
        .chunks_exact(8)
        .map(|c| f64::from_le_bytes(c.try_into().expect("8-byte chunk")))
        .collect();
    Tensor::new(entry.shape.clone(), data)
}

fn find<'a>(blobs: &'a [BlobEntry], name: &str) -> Result<&'a BlobEntry> {
    blobs
        .iter()
        .find(|b| b.name == name)
        .ok_or_else(|| Error::Format(format!("manifest lists no blob named {name:?}")))
}

fn read_manifest<T: for<'de> Deserialize<'de>>(path: &Path) -> Result<T> {
    let text = fs::read_to_string(path)?;
    toml::from_str(&text).map_err(|e| Error::Format(format!("{}: {e}", path.display())))
}

fn write_manifest<T: Serialize>(path: &Path, value: &T) -> Result<()> {
    let text = toml::to_string(value).map_err(|e| Error::Format(e.to_string()))?;
    fs::write(path, text)?;
    Ok(())
}

fn check_version(v: u32, what: &str) -> Result<()> {
    if v != FORMAT_VERSION {
        return Err(Error::Format(format!("{what} format version {v}, expected {FORMAT_VERSION}")));
    }
    Ok(())
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
struct DatasetManifest {
    version: u32,
    mechanism: String,
    mechanism_hash: String,
    seed: u64,
    dt: f64,
    /// `[trajectories, n_total + 1, j]`
    shape: Vec<usize>,
    schema: StateSchema,
    train: Vec<usize>,
    test: Vec<usize>,
    #[serde(default)]
    normalization: Option<NormalizationParams>,
    #[serde(default)]
    grid: Option<IcGridSpec>,
    blobs: Vec<BlobEntry>,
}

/// Writes `manifest.toml` plus `train.f64` and `test.f64` into `dir`.
pub fn save_dataset(ds: &TrajectoryDataset, dir: &Path) -> Result<()> {
    fs::create_dir_all(dir)?;
    let blobs = vec![
        write_blob(dir, "train", &ds.raw.index_select(0, &ds.train)?)?,
        write_blob(dir, "test", &ds.raw.index_select(0, &ds.test)?)?,
    ];
    let manifest = DatasetManifest {
        version: FORMAT_VERSION,
        mechanism: ds.mechanism.clone(),
        mechanism_hash: ds.mechanism_hash.clone(),
        seed: ds.seed,
        dt: ds.dt,
        shape: ds.raw.shape().to_vec(),
        schema: ds.schema.clone(),
        train: ds.train.clone(),
        test: ds.test.clone(),
        normalization: ds.normalization.clone(),
        grid: ds.grid.clone(),
        blobs,
    };
    write_manifest(&dir.join(DATASET_MANIFEST), &manifest)
}

pub fn load_dataset(dir: &Path) -> Result<TrajectoryDataset> {
    let m: DatasetManifest = read_manifest(&dir.join(DATASET_MANIFEST))?;
    check_version(m.version, "dataset")?;
    m.schema.validate()?;
    if m.shape.len() != 3 || m.shape[2] != m.schema.j() {
        return Err(Error::Format(format!("dataset shape {:?} does not match the schema", m.shape)));
    }
    let (bs, len, j) = (m.shape[0], m.shape[1], m.shape[2]);
    let mut all: Vec<usize> = m.train.iter().chain(&m.test).copied().collect();
    all.sort_unstable();
    if all != (0..bs).collect::<Vec<_>>() {
        return Err(Error::Format("train and test indices do not partition the trajectories".into()));
    }
    let mut raw = vec![0.0; bs * len * j];
    for (name, idx) in [("train", &m.train), ("test", &m.test)] {
        let t = read_blob(dir, find(&m.blobs, name)?)?;
        if t.shape() != [idx.len(), len, j] {
            return Err(Error::Format(format!("{name} blob has shape {:?}", t.shape())));
        }
        for (k, &i) in idx.iter().enumerate() {
            raw[i * len * j..(i + 1) * len * j].copy_from_slice(&t.data()[k * len * j..(k + 1) * len * j]);
        }
    }
    Ok(TrajectoryDataset {
        raw: Tensor::new(m.shape, raw)?,
        dt: m.dt,
        schema: m.schema,
        normalization: m.normalization,
        train: m.train,
        test: m.test,
        mechanism: m.mechanism,
        mechanism_hash: m.mechanism_hash,
        grid: m.grid,
        seed: m.seed,
    })
}

/// A trained model with everything needed to evaluate it on physical data.
#[derive(Clone, Debug, PartialEq)]
pub struct Checkpoint {
    pub model: DeepONetModel,
    /// Schema the model was trained on (collapsed when `massmap` is set).
    pub schema: StateSchema,
    pub normalization: NormalizationParams,
    /// Schema of the physical data when the model works in collapsed coordinates.
    pub massmap: Option<StateSchema>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "kebab-case")]
enum ModeRecord {
    OneStep { pou: bool, bound_factor: f64 },
    TwoStep { factorized: bool },
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
struct CheckpointManifest {
    version: u32,
    p: usize,
    j: usize,
    n_t1: usize,
    mode: ModeRecord,
    schema: StateSchema,
    normalization: NormalizationParams,
    #[serde(default)]
    massmap: Option<StateSchema>,
    branch: NetworkConfig,
    trunk: NetworkConfig,
    blobs: Vec<BlobEntry>,
}

fn network_blobs(dir: &Path, prefix: &str, net: &Network) -> Result<Vec<BlobEntry>> {
    net.config
        .param_layout()
        .iter()
        .zip(&net.params)
        .map(|((name, _), t)| write_blob(dir, &format!("{prefix}.{name}"), t))
        .collect()
}

fn load_network(dir: &Path, prefix: &str, config: NetworkConfig, blobs: &[BlobEntry]) -> Result<Network> {
    let params = config
        .param_layout()
        .iter()
        .map(|(name, _)| read_blob(dir, find(blobs, &format!("{prefix}.{name}"))?))
        .collect::<Result<Vec<_>>>()?;
    Network::from_params(config, params)
}

pub fn save_checkpoint(ck: &Checkpoint, dir: &Path) -> Result<()> {
    fs::create_dir_all(dir)?;
    let m = &ck.model;
    let mut blobs = network_blobs(dir, "branch", &m.branch)?;
    blobs.extend(network_blobs(dir, "trunk", &m.trunk)?);
    let mode = match &m.mode {
        ModelMode::OneStep { pou, bound_factor } => ModeRecord::OneStep {
            pou: *pou,
            bound_factor: *bound_factor,
        },
        ModelMode::TwoStep { factors } => {
            if let Some(f) = factors {
                blobs.push(write_blob(dir, "two_step.q", &f.q)?);
                blobs.push(write_blob(dir, "two_step.r", &f.r)?);
            }
            ModeRecord::TwoStep {
                factorized: factors.is_some(),
            }
        }
    };
    let manifest = CheckpointManifest {
        version: FORMAT_VERSION,
        p: m.p,
        j: m.j,
        n_t1: m.n_t1(),
        mode,
        schema: ck.schema.clone(),
        normalization: ck.normalization.clone(),
        massmap: ck.massmap.clone(),
        branch: m.branch.config.clone(),
        trunk: m.trunk.config.clone(),
        blobs,
    };
    write_manifest(&dir.join(CHECKPOINT_MANIFEST), &manifest)
}

pub fn load_checkpoint(dir: &Path) -> Result<Checkpoint> {
    let m: CheckpointManifest = read_manifest(&dir.join(CHECKPOINT_MANIFEST))?;
    check_version(m.version, "checkpoint")?;
    let branch = load_network(dir, "branch", m.branch, &m.blobs)?;
    let trunk = load_network(dir, "trunk", m.trunk, &m.blobs)?;
    let mode = match m.mode {
        ModeRecord::OneStep { pou, bound_factor } => ModelMode::OneStep { pou, bound_factor },
        ModeRecord::TwoStep { factorized: false } => ModelMode::TwoStep { factors: None },
        ModeRecord::TwoStep { factorized: true } => ModelMode::TwoStep {
            factors: Some(TwoStepFactors {
                q: read_blob(dir, find(&m.blobs, "two_step.q")?)?,
                r: read_blob(dir, find(&m.blobs, "two_step.r")?)?,
            }),
        },
    };
    let model = DeepONetModel::new(branch, trunk, m.j, m.p, mode, m.n_t1)?;
    if let Ok(f) = model.factors() {
        if f.q.shape() != [m.j, m.n_t1, m.p] || f.r.shape() != [m.j, m.p, m.p] {
            return Err(Error::Format("two-step factors have the wrong shape".into()));
        }
    }
    Ok(Checkpoint {
        model,
        schema: m.schema,
        normalization: m.normalization,
        massmap: m.massmap,
    })
}

fn csv_writer(path: &Path) -> Result<csv::Writer<fs::File>> {
    csv::Writer::from_path(path).map_err(csv_error)
}

fn csv_error(e: csv::Error) -> Error {
    match e.into_kind() {
        csv::ErrorKind::Io(io) => Error::Io(io),
        other => Error::Format(format!("{other:?}")),
    }
}

fn write_rows(path: &Path, header: &[&str], rows: impl IntoIterator<Item = Vec<String>>) -> Result<()> {
    let mut w = csv_writer(path)?;
    w.write_record(header).map_err(csv_error)?;
    for r in rows {
        w.write_record(&r).map_err(csv_error)?;
    }
    w.flush()?;
    Ok(())
}

/// `sample,state,rel_l2`
pub fn write_errors_csv(path: &Path, report: &ErrorReport, schema: &StateSchema) -> Result<()> {
    let j = schema.j();
    let rows = report.errors.data().chunks(j).enumerate().flat_map(|(i, row)| {
        row.iter()
            .enumerate()
            .map(move |(a, v)| vec![i.to_string(), schema.names[a].clone(), v.to_string()])
    });
    write_rows(path, &["sample", "state", "rel_l2"], rows)
}

/// `state,mean,std,median,q75,q90,max`
pub fn write_summary_csv(path: &Path, report: &ErrorReport, schema: &StateSchema) -> Result<()> {
    let rows = report.per_state.iter().enumerate().map(|(a, s)| {
        vec![
            schema.names[a].clone(),
            s.mean.to_string(),
            s.std.to_string(),
            s.median.to_string(),
            s.q75.to_string(),
            s.q90.to_string(),
            s.max.to_string(),
        ]
    });
    write_rows(path, &["state", "mean", "std", "median", "q75", "q90", "max"], rows)
}

/// `segment,state,mean,median,q75,q90`
pub fn write_accumulation_csv(path: &Path, curves: &[AccumulationPoint], schema: &StateSchema) -> Result<()> {
    let rows = curves.iter().map(|c| {
        vec![
            c.segment.to_string(),
            schema.names[c.state].clone(),
            c.mean.to_string(),
            c.median.to_string(),
            c.q75.to_string(),
            c.q90.to_string(),
        ]
    });
    write_rows(path, &["segment", "state", "mean", "median", "q75", "q90"], rows)
}

/// `epoch,train_rel_l2,test_rel_l2,lr`
pub fn write_history_csv(path: &Path, history: &[HistoryRow]) -> Result<()> {
    let rows = history.iter().map(|h| {
        vec![
            h.epoch.to_string(),
            h.train_rel_l2.to_string(),
            h.test_rel_l2.to_string(),
            h.lr.to_string(),
        ]
    });
    write_rows(path, &["epoch", "train_rel_l2", "test_rel_l2", "lr"], rows)
}

/// `epoch,index,value` with the flat row-major index into the weight tensor.
pub fn write_weights_csv(path: &Path, snapshots: &[WeightSnapshot]) -> Result<()> {
    let rows = snapshots.iter().flat_map(|s| {
        s.values
            .data()
            .iter()
            .enumerate()
            .map(move |(i, v)| vec![s.epoch.to_string(), i.to_string(), v.to_string()])
    });
    write_rows(path, &["epoch", "index", "value"], rows)
}

/// Parses a history CSV written by [`write_history_csv`].
pub fn read_history_csv(path: &Path) -> Result<Vec<HistoryRow>> {
    let mut r = csv::Reader::from_path(path).map_err(csv_error)?;
    let parse = |s: &str| -> Result<f64> {
        s.parse()
            .map_err(|_| Error::Format(format!("{}: bad number {s:?}", path.display())))
    };
    r.records()
        .map(|rec| {
            let rec = rec.map_err(csv_error)?;
            if rec.len() != 4 {
                return Err(Error::Format(format!("{}: expected 4 columns", path.display())));
            }
            Ok(HistoryRow {
                epoch: rec[0]
                    .parse()
                    .map_err(|_| Error::Format(format!("{}: bad epoch {:?}", path.display(), &rec[0])))?,
                train_rel_l2: parse(&rec[1])?,
                test_rel_l2: parse(&rec[2])?,
                lr: parse(&rec[3])?,
            })
        })
        .collect()
}
