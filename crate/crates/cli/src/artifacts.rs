//! On-disk artifacts in the cache directory.
//!
//! Every artifact records the stage hash of the configuration sections it
//! depends on. Loading checks that hash against the current configuration,
//! so artifacts built under another configuration are never mixed in.

use std::fs::{self, File};
use std::io::{BufReader, BufWriter, Write};
use std::path::{Path, PathBuf};

use anyhow::{anyhow, bail, Context as _, Result};
use serde::{Deserialize, Serialize};

use trackstar::config::{RunConfig, Stage};
use trackstar::facttrace::{read_corpus, read_facts, write_corpus, write_facts, Benchmark, EvalReport, Vocab};
use trackstar::gradfeat::{Featurized, Stage as VectorStage};
use trackstar::hessian::{read_hessian, write_hessian, LambdaChoice};
use trackstar::index::{read_index, write_index, IndexHeader, RowMeta};
use trackstar::methods::FeatureKind;
use trackstar::pipeline::{kinds, HessianSet};
use trackstar::tinylm::{read_checkpoint, write_checkpoint, Checkpoint};
use trackstar::{FeatureIndex, FeatureVector, Preset};

/// Environment variable naming the cache directory.
pub const CACHE_ENV: &str = "TRACKSTAR_CACHE";
pub const DEFAULT_CACHE: &str = ".trackstar";

#[derive(Clone, Debug)]
pub struct Store {
    pub dir: PathBuf,
}

#[derive(Clone, Debug, Serialize, Deserialize)]
struct DataManifest {
    stage_hash: String,
    vocab: Vocab,
    /// Byte offset and length of each corpus line.
    offsets: Vec<(u64, u64)>,
}

#[derive(Clone, Debug, Serialize, Deserialize)]
struct HessianManifest {
    stage_hash: String,
    train_kinds: Vec<String>,
    mixed: bool,
    lambda: Option<LambdaChoice>,
}

/// Loaded benchmark plus corpus line offsets.
pub struct Data {
    pub bench: Benchmark,
    pub offsets: Vec<(u64, u64)>,
}

fn stale(name: &Path, producer: &str) -> anyhow::Error {
    anyhow!(
        "artifact `{}` was produced under a different configuration; rerun `trackstar {producer} --force` with the current one",
        name.display()
    )
}

fn missing(name: &Path, producer: &str) -> anyhow::Error {
    trackstar::Error::MissingArtifact { name: name.display().to_string(), producer: producer.into() }.into()
}

fn open(path: &Path, producer: &str) -> Result<BufReader<File>> {
    match File::open(path) {
        Ok(f) => Ok(BufReader::new(f)),
        Err(e) if e.kind() == std::io::ErrorKind::NotFound => Err(missing(path, producer)),
        Err(e) => Err(e).with_context(|| format!("opening {}", path.display())),
    }
}

/// Writes through a temporary file so readers never see partial output.
fn write_atomic(path: &Path, f: impl FnOnce(&mut BufWriter<File>) -> Result<()>) -> Result<()> {
    if let Some(parent) = path.parent() {
        fs::create_dir_all(parent)?;
    }
    let tmp = path.with_extension("tmp");
    {
        let mut w = BufWriter::new(File::create(&tmp).with_context(|| format!("creating {}", tmp.display()))?);
        f(&mut w)?;
        w.flush()?;
    }
    fs::rename(&tmp, path)?;
    Ok(())
}

fn tag_hex(cfg: &RunConfig, stage: Stage) -> String {
    hex::encode(cfg.stage_tag(stage))
}

impl Store {
    pub fn new(dir: impl Into<PathBuf>) -> Self {
        Store { dir: dir.into() }
    }

    /// The directory named by `TRACKSTAR_CACHE`, else `.trackstar`.
    pub fn from_env() -> Self {
        Store::new(std::env::var_os(CACHE_ENV).map(PathBuf::from).unwrap_or_else(|| DEFAULT_CACHE.into()))
    }

    pub fn data_manifest(&self) -> PathBuf {
        self.dir.join("data.json")
    }
    pub fn corpus(&self) -> PathBuf {
        self.dir.join("corpus.jsonl")
    }
    pub fn facts(&self) -> PathBuf {
        self.dir.join("facts.jsonl")
    }
    pub fn model(&self) -> PathBuf {
        self.dir.join("model.ckpt")
    }
    pub fn projected(&self, kind: FeatureKind) -> PathBuf {
        self.dir.join("features").join(format!("{kind}.idx"))
    }
    pub fn hessian_manifest(&self) -> PathBuf {
        self.dir.join("hessian").join("hessian.json")
    }
    pub fn hessian_train(&self, kind: FeatureKind) -> PathBuf {
        self.dir.join("hessian").join(format!("train-{kind}.hess"))
    }
    pub fn hessian_mixed(&self) -> PathBuf {
        self.dir.join("hessian").join("mixed.hess")
    }
    pub fn index(&self, preset: Preset) -> PathBuf {
        self.dir.join("index").join(format!("{}.idx", preset.as_str()))
    }
    pub fn report_jsonl(&self) -> PathBuf {
        self.dir.join("report.jsonl")
    }
    pub fn report_table(&self) -> PathBuf {
        self.dir.join("report.txt")
    }

    // Freshness probes: Ok(true) when present and current, Ok(false) when
    // absent, Err when present but built under another configuration.

    pub fn data_current(&self, cfg: &RunConfig) -> Result<bool> {
        let path = self.data_manifest();
        if !path.exists() {
            return Ok(false);
        }
        let m: DataManifest = serde_json::from_reader(open(&path, "gen-data")?)?;
        if m.stage_hash != tag_hex(cfg, Stage::Data) {
            return Err(stale(&path, "gen-data"));
        }
        Ok(self.corpus().exists() && self.facts().exists())
    }

    pub fn model_current(&self, cfg: &RunConfig) -> Result<bool> {
        let path = self.model();
        if !path.exists() {
            return Ok(false);
        }
        self.load_model(cfg).map(|_| true)
    }

    pub fn hessians_current(&self, cfg: &RunConfig) -> Result<bool> {
        let path = self.hessian_manifest();
        if !path.exists() {
            return Ok(false);
        }
        let m: HessianManifest = serde_json::from_reader(open(&path, "estimate-hessian")?)?;
        if m.stage_hash != tag_hex(cfg, Stage::Features) {
            return Err(stale(&path, "estimate-hessian"));
        }
        Ok(kinds(&cfg.method.presets).into_iter().all(|k| self.projected(k).exists()))
    }

    pub fn index_current(&self, cfg: &RunConfig, preset: Preset) -> Result<bool> {
        let path = self.index(preset);
        if !path.exists() {
            return Ok(false);
        }
        let idx = read_index(&path)?;
        if idx.header().tag != cfg.stage_tag(Stage::Index) {
            return Err(stale(&path, "build-index"));
        }
        Ok(true)
    }

    pub fn save_data(&self, cfg: &RunConfig, bench: &Benchmark) -> Result<Vec<(u64, u64)>> {
        let mut offsets = Vec::new();
        write_atomic(&self.corpus(), |w| {
            offsets = write_corpus(w, &bench.passages)?;
            Ok(())
        })?;
        write_atomic(&self.facts(), |w| {
            write_facts(w, &bench.facts)?;
            Ok(())
        })?;
        let m = DataManifest { stage_hash: tag_hex(cfg, Stage::Data), vocab: bench.vocab.clone(), offsets: offsets.clone() };
        write_atomic(&self.data_manifest(), |w| Ok(serde_json::to_writer_pretty(w, &m)?))?;
        Ok(offsets)
    }

    pub fn load_data(&self, cfg: &RunConfig) -> Result<Data> {
        let path = self.data_manifest();
        let m: DataManifest = serde_json::from_reader(open(&path, "gen-data")?)?;
        if m.stage_hash != tag_hex(cfg, Stage::Data) {
            return Err(stale(&path, "gen-data"));
        }
        let passages = read_corpus(open(&self.corpus(), "gen-data")?, &m.vocab)?;
        let facts = read_facts(open(&self.facts(), "gen-data")?)?;
        if passages.len() != m.offsets.len() {
            bail!("corpus has {} passages but the manifest lists {}", passages.len(), m.offsets.len());
        }
        Ok(Data { bench: Benchmark { facts, passages, vocab: m.vocab }, offsets: m.offsets })
    }

    pub fn save_model(&self, ckpt: &Checkpoint) -> Result<()> {
        write_atomic(&self.model(), |w| Ok(write_checkpoint(w, ckpt)?))
    }

    pub fn load_model(&self, cfg: &RunConfig) -> Result<Checkpoint> {
        let path = self.model();
        let ckpt = read_checkpoint(open(&path, "train")?)?;
        if ckpt.tag != cfg.stage_tag(Stage::Model) {
            return Err(stale(&path, "train"));
        }
        Ok(ckpt)
    }

    /// Projected (pre-whitening) corpus features of one kind.
    pub fn save_projected(&self, cfg: &RunConfig, kind: FeatureKind, feats: &[Featurized]) -> Result<()> {
        let d = feats.first().map_or(0, |f| f.vector.values.len());
        let header = IndexHeader {
            fingerprint: format!("projected;{kind}"),
            block_dims: vec![cfg.projection.block_dim; d / cfg.projection.block_dim.max(1)],
            tag: cfg.stage_tag(Stage::Features),
        };
        let mut data = Vec::with_capacity(feats.len() * d);
        let rows = feats
            .iter()
            .map(|f| {
                data.extend_from_slice(&f.vector.values);
                RowMeta { id: f.vector.example_id, offset: None, len: None, mean_p: f.mean_probability }
            })
            .collect();
        let idx = FeatureIndex::from_rows(header, rows, data)?;
        let path = self.projected(kind);
        fs::create_dir_all(path.parent().expect("has parent"))?;
        write_index(&path, &idx)?;
        Ok(())
    }

    pub fn load_projected(&self, cfg: &RunConfig, kind: FeatureKind) -> Result<Vec<Featurized>> {
        let path = self.projected(kind);
        let idx = read_index(&path).map_err(|e| match e {
            trackstar::Error::MissingArtifact { .. } => missing(&path, "estimate-hessian"),
            e => e.into(),
        })?;
        if idx.header().tag != cfg.stage_tag(Stage::Features) {
            return Err(stale(&path, "estimate-hessian"));
        }
        Ok((0..idx.len())
            .map(|i| {
                let meta = &idx.rows()[i];
                Featurized {
                    vector: FeatureVector { example_id: meta.id, stage: VectorStage::Projected, values: idx.row(i).to_vec() },
                    mean_probability: meta.mean_p,
                }
            })
            .collect())
    }

    pub fn save_hessians(&self, cfg: &RunConfig, set: &HessianSet) -> Result<()> {
        for (kind, h) in &set.train {
            write_atomic(&self.hessian_train(*kind), |w| Ok(write_hessian(w, h)?))?;
        }
        if let Some(h) = &set.mixed {
            write_atomic(&self.hessian_mixed(), |w| Ok(write_hessian(w, h)?))?;
        }
        let m = HessianManifest {
            stage_hash: tag_hex(cfg, Stage::Features),
            train_kinds: set.train.keys().map(|k| k.to_string()).collect(),
            mixed: set.mixed.is_some(),
            lambda: set.lambda,
        };
        write_atomic(&self.hessian_manifest(), |w| Ok(serde_json::to_writer_pretty(w, &m)?))
    }

    pub fn load_hessians(&self, cfg: &RunConfig) -> Result<HessianSet> {
        let path = self.hessian_manifest();
        let m: HessianManifest = serde_json::from_reader(open(&path, "estimate-hessian")?)?;
        let tag = cfg.stage_tag(Stage::Features);
        if m.stage_hash != hex::encode(tag) {
            return Err(stale(&path, "estimate-hessian"));
        }
        let read = |p: PathBuf| -> Result<_> {
            let h = read_hessian(open(&p, "estimate-hessian")?)?;
            if h.provenance.tag != tag {
                return Err(stale(&p, "estimate-hessian"));
            }
            Ok(h)
        };
        let mut train = std::collections::BTreeMap::new();
        for kind in kinds(&cfg.method.presets) {
            if m.train_kinds.contains(&kind.to_string()) {
                train.insert(kind, read(self.hessian_train(kind))?);
            }
        }
        let mixed = if m.mixed { Some(read(self.hessian_mixed())?) } else { None };
        Ok(HessianSet { train, mixed, lambda: m.lambda })
    }

    pub fn save_index(&self, preset: Preset, idx: &FeatureIndex) -> Result<()> {
        let path = self.index(preset);
        fs::create_dir_all(path.parent().expect("has parent"))?;
        write_index(&path, idx)?;
        Ok(())
    }

    pub fn load_index(&self, cfg: &RunConfig, preset: Preset) -> Result<FeatureIndex> {
        let path = self.index(preset);
        let idx = read_index(&path)?;
        if idx.header().tag != cfg.stage_tag(Stage::Index) {
            return Err(stale(&path, "build-index"));
        }
        Ok(idx)
    }

    pub fn save_report(&self, report: &EvalReport) -> Result<()> {
        let jsonl = report.to_jsonl()?;
        write_atomic(&self.report_jsonl(), |w| Ok(w.write_all(jsonl.as_bytes())?))?;
        let table = report.to_table();
        write_atomic(&self.report_table(), |w| Ok(w.write_all(table.as_bytes())?))
    }

    /// The stored report, if it was produced under `cfg`.
    pub fn load_report(&self, cfg: &RunConfig) -> Result<Option<EvalReport>> {
        let path = self.report_jsonl();
        if !path.exists() {
            return Ok(None);
        }
        let report = EvalReport::from_jsonl(&fs::read_to_string(&path)?)?;
        Ok((report.config_hash == cfg.stage_hash(Stage::Eval)).then_some(report))
    }
}
