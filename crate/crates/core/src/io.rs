//! On-disk datasets and checkpoints, plus CSV ingestion.
//!
//! Both artifacts are directories holding a JSON `manifest.json` and raw
//! little-endian `f64` payloads whose SHA-256 digests are recorded in the
//! manifest. Writers hold a sibling `<dir>.lock` file for the duration of the
//! save and fail immediately if it already exists.

use std::cmp::Ordering;
use std::collections::{BTreeMap, HashMap};
use std::fs::{self, File, OpenOptions};
use std::io::{Read, Write};
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::autodiff::{Matrix, ParameterStore};
use crate::dataset::{NormStats, SequenceDataset, Split, SplitCounts};
use crate::error::{ensure, Error, Result};
use crate::interpolation::SiteSet;
use crate::kernels::RadialKernel;
use crate::model::{DrcConfig, DrcModel, Forecaster, ModelConfig, UmtnModel};

pub const FORMAT_VERSION: u32 = 1;

const MANIFEST: &str = "manifest.json";
const SITES: &str = "sites.bin";
const SEQUENCES: &str = "sequences.bin";
const PARAMS: &str = "params.bin";

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct PayloadInfo {
    pub bytes: usize,
    pub sha256: String,
}

/// Provenance carried alongside a dataset.
#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
pub struct DatasetMeta {
    #[serde(default)]
    pub tau: Option<usize>,
    #[serde(default)]
    pub horizon: Option<usize>,
    #[serde(default)]
    pub kernel: Option<RadialKernel>,
    #[serde(default)]
    pub seeds: BTreeMap<String, u64>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DatasetManifest {
    pub version: u32,
    pub dim: usize,
    pub n_sites: usize,
    pub n_sequences: usize,
    pub sequence_length: usize,
    pub split: SplitCounts,
    /// Per-sequence split codes (0 train, 1 validation, 2 test).
    pub assignment: Vec<u8>,
    pub stats: NormStats,
    pub normalized: bool,
    #[serde(flatten)]
    pub meta: DatasetMeta,
    pub payloads: BTreeMap<String, PayloadInfo>,
}

#[derive(Debug, Clone)]
pub struct LoadedDataset {
    pub dataset: SequenceDataset,
    pub manifest: DatasetManifest,
}

/// Exclusive writer lock on a directory path.
#[derive(Debug)]
pub struct PathLock {
    path: PathBuf,
}

impl PathLock {
    pub fn acquire(dir: &Path) -> Result<Self> {
        let path = lock_path(dir);
        if let Some(parent) = path.parent() {
            if !parent.as_os_str().is_empty() {
                fs::create_dir_all(parent)?;
            }
        }
        match OpenOptions::new().write(true).create_new(true).open(&path) {
            Ok(mut f) => {
                let _ = writeln!(f, "{}", std::process::id());
                Ok(Self { path })
            }
            Err(e) if e.kind() == std::io::ErrorKind::AlreadyExists => {
                Err(Error::Locked(path.display().to_string()))
            }
            Err(e) => Err(e.into()),
        }
    }
}

impl Drop for PathLock {
    fn drop(&mut self) {
        let _ = fs::remove_file(&self.path);
    }
}

fn lock_path(dir: &Path) -> PathBuf {
    let mut name = dir.file_name().map(|s| s.to_os_string()).unwrap_or_else(|| "out".into());
    name.push(".lock");
    dir.with_file_name(name)
}

fn encode_f64(values: impl IntoIterator<Item = f64>) -> Vec<u8> {
    values.into_iter().flat_map(f64::to_le_bytes).collect()
}

fn sha256_hex(bytes: &[u8]) -> String {
    hex::encode(Sha256::digest(bytes))
}

fn write_payload(dir: &Path, name: &str, bytes: &[u8], table: &mut BTreeMap<String, PayloadInfo>) -> Result<()> {
    fs::write(dir.join(name), bytes)?;
    table.insert(
        name.to_string(),
        PayloadInfo {
            bytes: bytes.len(),
            sha256: sha256_hex(bytes),
        },
    );
    Ok(())
}

/// Reads a payload, checking its length against `count` doubles and its
/// digest against the manifest, and rejects non-finite entries.
fn read_payload(dir: &Path, name: &str, count: usize, table: &BTreeMap<String, PayloadInfo>) -> Result<Vec<f64>> {
    let info = table
        .get(name)
        .ok_or_else(|| Error::Data(format!("manifest has no entry for payload `{name}`")))?;
    let mut bytes = Vec::new();
    File::open(dir.join(name))?.read_to_end(&mut bytes)?;
    let expected = count * 8;
    ensure!(
        info.bytes == expected,
        Data,
        "manifest records {} bytes for `{name}` but its shape needs {expected}",
        info.bytes
    );
    if bytes.len() < expected {
        return Err(Error::Truncated {
            payload: name.to_string(),
            expected,
            found: bytes.len(),
        });
    }
    ensure!(
        bytes.len() == expected,
        Data,
        "payload `{name}` has {} trailing bytes",
        bytes.len() - expected
    );
    if sha256_hex(&bytes) != info.sha256 {
        return Err(Error::Checksum {
            payload: name.to_string(),
        });
    }
    let values: Vec<f64> = bytes
        .chunks_exact(8)
        .map(|c| f64::from_le_bytes(c.try_into().expect("chunk of 8")))
        .collect();
    if let Some(i) = values.iter().position(|v| !v.is_finite()) {
        return Err(Error::Data(format!("payload `{name}` holds a non-finite value at entry {i}")));
    }
    Ok(values)
}

fn read_manifest<T: for<'de> Deserialize<'de>>(dir: &Path) -> Result<T> {
    let text = fs::read_to_string(dir.join(MANIFEST))?;
    let raw: serde_json::Value = serde_json::from_str(&text)?;
    let version = raw
        .get("version")
        .and_then(|v| v.as_u64())
        .ok_or_else(|| Error::Data("manifest lacks a version field".into()))?;
    if version != FORMAT_VERSION as u64 {
        return Err(Error::Version {
            found: version.min(u32::MAX as u64) as u32,
            supported: FORMAT_VERSION,
        });
    }
    Ok(serde_json::from_value(raw)?)
}

fn write_manifest<T: Serialize>(dir: &Path, manifest: &T) -> Result<()> {
    let text = serde_json::to_string_pretty(manifest)?;
    fs::write(dir.join(MANIFEST), text)?;
    Ok(())
}

pub fn save_dataset(dir: &Path, dataset: &SequenceDataset, meta: &DatasetMeta) -> Result<DatasetManifest> {
    let _lock = PathLock::acquire(dir)?;
    fs::create_dir_all(dir)?;
    let mut payloads = BTreeMap::new();
    write_payload(dir, SITES, &encode_f64(dataset.sites().coords().iter().copied()), &mut payloads)?;
    write_payload(dir, SEQUENCES, &encode_f64(dataset.values().iter().copied()), &mut payloads)?;
    let manifest = DatasetManifest {
        version: FORMAT_VERSION,
        dim: dataset.sites().dim(),
        n_sites: dataset.n_sites(),
        n_sequences: dataset.n_sequences(),
        sequence_length: dataset.seq_len(),
        split: dataset.split_counts(),
        assignment: dataset.splits().iter().map(|s| s.code()).collect(),
        stats: dataset.stats(),
        normalized: dataset.is_normalized(),
        meta: meta.clone(),
        payloads,
    };
    write_manifest(dir, &manifest)?;
    Ok(manifest)
}

pub fn load_dataset(dir: &Path) -> Result<LoadedDataset> {
    let manifest: DatasetManifest = read_manifest(dir)?;
    ensure!(
        manifest.assignment.len() == manifest.n_sequences,
        Data,
        "manifest lists {} split codes for {} sequences",
        manifest.assignment.len(),
        manifest.n_sequences
    );
    let splits = manifest
        .assignment
        .iter()
        .map(|&c| Split::from_code(c).ok_or_else(|| Error::Data(format!("unknown split code {c}"))))
        .collect::<Result<Vec<_>>>()?;
    let coords = read_payload(dir, SITES, manifest.n_sites * manifest.dim, &manifest.payloads)?;
    let values = read_payload(
        dir,
        SEQUENCES,
        manifest.n_sequences * manifest.sequence_length * manifest.n_sites,
        &manifest.payloads,
    )?;
    let sites = SiteSet::from_flat(manifest.dim, coords)?;
    let dataset = SequenceDataset::from_parts(
        sites,
        manifest.sequence_length,
        values,
        splits,
        manifest.stats,
        manifest.normalized,
    )?;
    ensure!(
        dataset.split_counts() == manifest.split,
        Data,
        "split counts disagree with the per-sequence assignment"
    );
    Ok(LoadedDataset { dataset, manifest })
}

/// Architecture stored in a checkpoint.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", content = "config", rename_all = "lowercase")]
pub enum ModelSpec {
    Umtn(ModelConfig),
    Drc(DrcConfig),
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct ParamEntry {
    pub name: String,
    pub rows: usize,
    pub cols: usize,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CheckpointManifest {
    pub version: u32,
    pub model: ModelSpec,
    pub kernel: RadialKernel,
    pub dim: usize,
    pub n_sites: usize,
    pub site_hash: String,
    /// Normalization of the data the model was trained on.
    pub stats: NormStats,
    pub params: Vec<ParamEntry>,
    pub fingerprint: String,
    pub payloads: BTreeMap<String, PayloadInfo>,
}

/// A model restored from disk.
#[derive(Debug, Clone)]
pub enum LoadedModel {
    Umtn(UmtnModel),
    Drc(DrcModel),
}

impl LoadedModel {
    pub fn forecaster(&self) -> &dyn Forecaster {
        match self {
            LoadedModel::Umtn(m) => m,
            LoadedModel::Drc(m) => m,
        }
    }

    pub fn spec(&self) -> ModelSpec {
        match self {
            LoadedModel::Umtn(m) => ModelSpec::Umtn(m.config().clone()),
            LoadedModel::Drc(m) => ModelSpec::Drc(m.config().clone()),
        }
    }
}

#[derive(Debug, Clone)]
pub struct LoadedCheckpoint {
    pub model: LoadedModel,
    pub manifest: CheckpointManifest,
}

pub fn save_checkpoint<M: Forecaster + ?Sized>(
    dir: &Path,
    model: &M,
    spec: &ModelSpec,
    stats: NormStats,
) -> Result<CheckpointManifest> {
    let _lock = PathLock::acquire(dir)?;
    fs::create_dir_all(dir)?;
    let geometry = model.geometry();
    let params = model.params();
    let mut payloads = BTreeMap::new();
    write_payload(dir, SITES, &encode_f64(geometry.sites().coords().iter().copied()), &mut payloads)?;
    let values = params.iter().flat_map(|p| p.value.iter().copied()).collect::<Vec<_>>();
    write_payload(dir, PARAMS, &encode_f64(values), &mut payloads)?;
    let manifest = CheckpointManifest {
        version: FORMAT_VERSION,
        model: spec.clone(),
        kernel: *geometry.kernel(),
        dim: geometry.dim(),
        n_sites: geometry.n_sites(),
        site_hash: geometry.site_hash().to_string(),
        stats,
        params: params
            .iter()
            .map(|p| ParamEntry {
                name: p.name.clone(),
                rows: p.value.nrows(),
                cols: p.value.ncols(),
            })
            .collect(),
        fingerprint: params.fingerprint(),
        payloads,
    };
    write_manifest(dir, &manifest)?;
    Ok(manifest)
}

pub fn load_checkpoint(dir: &Path) -> Result<LoadedCheckpoint> {
    let manifest: CheckpointManifest = read_manifest(dir)?;
    let coords = read_payload(dir, SITES, manifest.n_sites * manifest.dim, &manifest.payloads)?;
    let sites = SiteSet::from_flat(manifest.dim, coords)?;
    ensure!(
        sites.hash() == manifest.site_hash,
        Data,
        "stored sites do not match the recorded site hash"
    );
    let total: usize = manifest.params.iter().map(|p| p.rows * p.cols).sum();
    let flat = read_payload(dir, PARAMS, total, &manifest.payloads)?;
    let mut store = ParameterStore::new();
    let mut offset = 0;
    for entry in &manifest.params {
        let len = entry.rows * entry.cols;
        let value = Matrix::from_column_slice(entry.rows, entry.cols, &flat[offset..offset + len]);
        store.insert(&entry.name, value).map_err(|e| Error::Data(e.to_string()))?;
        offset += len;
    }
    let model = match &manifest.model {
        ModelSpec::Umtn(config) => {
            let mut m = UmtnModel::new(config.clone(), manifest.kernel, &sites, 0)?;
            m.params_mut().load_values(&store)?;
            LoadedModel::Umtn(m)
        }
        ModelSpec::Drc(config) => {
            let mut m = DrcModel::new(config.clone(), manifest.kernel, &sites, 0)?;
            m.params_mut().load_values(&store)?;
            LoadedModel::Drc(m)
        }
    };
    ensure!(
        model.forecaster().params().len() == store.len(),
        Data,
        "checkpoint holds {} parameters, architecture expects {}",
        store.len(),
        model.forecaster().params().len()
    );
    ensure!(
        model.forecaster().params().fingerprint() == manifest.fingerprint,
        Data,
        "parameter fingerprint mismatch after load"
    );
    Ok(LoadedCheckpoint { model, manifest })
}

/// Shape and split options for [`ingest_csv`].
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct IngestOptions {
    pub tau: usize,
    pub horizon: usize,
    pub split: SplitCounts,
}

/// Integer-aware ordering so that `"2" < "10"`.
fn compare_ids(a: &str, b: &str) -> Ordering {
    match (a.parse::<i64>(), b.parse::<i64>()) {
        (Ok(x), Ok(y)) => x.cmp(&y),
        (Ok(_), Err(_)) => Ordering::Less,
        (Err(_), Ok(_)) => Ordering::Greater,
        (Err(_), Err(_)) => a.cmp(b),
    }
}

fn parse_f64(field: &str, what: &str) -> Result<f64> {
    let v: f64 = field
        .trim()
        .parse()
        .map_err(|_| Error::Data(format!("cannot parse {what} `{field}` as a number")))?;
    ensure!(v.is_finite(), Data, "{what} `{field}` is not finite");
    Ok(v)
}

/// Builds a dataset from a sites table and a long-format observation table.
///
/// Sites and sequences are ordered by id, so the result does not depend on
/// row order. Sequences are assigned to splits in id order.
pub fn ingest_csv<S: Read, Q: Read>(sites_csv: S, sequences_csv: Q, options: &IngestOptions) -> Result<SequenceDataset> {
    let mut reader = csv::ReaderBuilder::new().trim(csv::Trim::All).from_reader(sites_csv);
    let header = reader.headers()?.clone();
    ensure!(
        header.len() >= 2 && &header[0] == "site_id",
        Data,
        "sites table must start with `site_id` followed by coordinate columns"
    );
    let dim = header.len() - 1;
    let mut site_rows: Vec<(String, Vec<f64>)> = Vec::new();
    for record in reader.records() {
        let record = record?;
        let coords = (1..=dim)
            .map(|k| parse_f64(&record[k], "coordinate"))
            .collect::<Result<Vec<_>>>()?;
        site_rows.push((record[0].to_string(), coords));
    }
    ensure!(!site_rows.is_empty(), Data, "sites table is empty");
    site_rows.sort_by(|a, b| compare_ids(&a.0, &b.0));
    for w in site_rows.windows(2) {
        ensure!(w[0].0 != w[1].0, Validation, "site id `{}` appears twice", w[0].0);
    }
    for i in 0..site_rows.len() {
        for j in (i + 1)..site_rows.len() {
            ensure!(
                site_rows[i].1 != site_rows[j].1,
                Validation,
                "sites `{}` and `{}` share coordinates",
                site_rows[i].0,
                site_rows[j].0
            );
        }
    }
    let site_index: HashMap<&str, usize> = site_rows.iter().enumerate().map(|(i, r)| (r.0.as_str(), i)).collect();
    let n = site_rows.len();

    let mut reader = csv::ReaderBuilder::new().trim(csv::Trim::All).from_reader(sequences_csv);
    let header = reader.headers()?.clone();
    ensure!(
        header.iter().collect::<Vec<_>>() == ["sequence_id", "time_index", "site_id", "value"],
        Data,
        "sequences table must have columns sequence_id,time_index,site_id,value"
    );
    let mut cells: HashMap<(String, usize, usize), f64> = HashMap::new();
    let mut sequence_ids: Vec<String> = Vec::new();
    let mut max_time = 0usize;
    for record in reader.records() {
        let record = record?;
        let seq = record[0].to_string();
        let time: usize = record[1]
            .parse()
            .map_err(|_| Error::Data(format!("time index `{}` is not a non-negative integer", &record[1])))?;
        let site = *site_index
            .get(&record[2])
            .ok_or_else(|| Error::Data(format!("observation refers to unknown site `{}`", &record[2])))?;
        let value = parse_f64(&record[3], "value")?;
        max_time = max_time.max(time);
        if cells.insert((seq.clone(), time, site), value).is_some() {
            return Err(Error::Data(format!(
                "duplicate observation for sequence `{seq}`, time {time}, site `{}`",
                &record[2]
            )));
        }
        sequence_ids.push(seq);
    }
    ensure!(!cells.is_empty(), Data, "sequences table is empty");
    sequence_ids.sort_by(|a, b| compare_ids(a, b));
    sequence_ids.dedup();
    let seq_len = max_time + 1;

    let mut values = Vec::with_capacity(sequence_ids.len() * seq_len * n);
    for seq in &sequence_ids {
        for t in 0..seq_len {
            for (s, (site_id, _)) in site_rows.iter().enumerate() {
                let v = cells.remove(&(seq.clone(), t, s)).ok_or_else(|| Error::Incomplete {
                    sequence: seq.clone(),
                    time: t,
                    site: site_id.clone(),
                })?;
                values.push(v);
            }
        }
    }

    ensure!(options.tau >= 1 && options.horizon >= 1, Config, "tau and horizon must be positive");
    ensure!(
        options.tau + options.horizon <= seq_len,
        Config,
        "tau + horizon = {} exceeds the sequence length {seq_len}",
        options.tau + options.horizon
    );
    ensure!(
        options.split.total() == sequence_ids.len(),
        Config,
        "split counts sum to {}, but the table holds {} sequences",
        options.split.total(),
        sequence_ids.len()
    );
    let sites = SiteSet::new(site_rows.into_iter().map(|r| r.1).collect())?;
    SequenceDataset::new(sites, seq_len, values, options.split.assignment())
}

/// File-path convenience around [`ingest_csv`].
pub fn ingest_csv_files(sites: &Path, sequences: &Path, options: &IngestOptions) -> Result<SequenceDataset> {
    ingest_csv(File::open(sites)?, File::open(sequences)?, options)
}
