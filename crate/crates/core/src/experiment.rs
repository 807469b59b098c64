//! The cut-ratio sweep: configuration, per-cut training cells, metrics
//! persistence, trend summaries, sampling and the local/central baselines.
//!
//! Run directory layout:
//!
//! ```text
//! <output_dir>/config.json        canonical copy of the configuration
//! <output_dir>/manifest.json      schema version, seed, content hashes
//! <output_dir>/metrics.csv        all cells, in grid order
//! <output_dir>/shards/client_<k>.cft, holdout.cft
//! <output_dir>/c_<c>/             metrics.csv, shared.cfw, client_<k>.cfw, DONE
//! ```

use std::collections::BTreeMap;
use std::fmt::Write as _;
use std::fs;
use std::io;
use std::path::{Path, PathBuf};
use std::sync::atomic::{AtomicUsize, Ordering};
use std::sync::Mutex;
use std::time::Instant;

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};
use thiserror::Error;

use crate::data::{
    contact_sheet, make_shards, pgm_bytes, write_pgm, write_tensor_file, Dataset, PhantomConfig, TensorFileError,
};
use crate::derive_seed;
use crate::diffusion::{make_schedule, DiffusionError, ScheduleKind, VarianceSchedule};
use crate::metrics::{disclosure, kid, training_flops, FeatureExtractor, Features, MetricsError};
use crate::net::{CheckpointError, Model, ModelParams, NetConfig, NetError};
use crate::protocol::cut::{CutConfig, CutError};
use crate::protocol::sampling::{split_inference, split_inference_traced};
use crate::protocol::session::{EntityEpoch, Session, SessionConfig, SessionFailure, SessionSeeds};
use crate::tensor::ImageTensor;
use crate::training::{train_central_plain, train_local_plain, StepRecord};

pub const SCHEMA_VERSION: u32 = 1;
pub const METRICS_HEADER: &str = "c,epoch,entity,kid_train,kid_holdout,disclosure_mse,disclosure_kid,\
client_flops,server_flops,bytes_tx,wall_seconds,train_loss";
const FEATURE_DIM: usize = 64;

/// Network size knobs; channel count and image size come from the data.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct NetShape {
    pub base_channels: usize,
    pub depth: usize,
    pub timestep_embed_dim: usize,
}

impl Default for NetShape {
    fn default() -> Self {
        let d = NetConfig::default();
        Self {
            base_channels: d.base_channels,
            depth: d.depth,
            timestep_embed_dim: d.timestep_embed_dim,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct ExperimentConfig {
    pub n_clients: usize,
    pub per_client: usize,
    pub holdout: usize,
    pub image_size: usize,
    pub timesteps: usize,
    pub schedule: ScheduleKind,
    pub schedule_offset: f64,
    pub c_grid: Vec<f64>,
    pub epochs: usize,
    pub batch_size: usize,
    pub lr: f32,
    pub seed: u64,
    pub net: NetShape,
    pub output_dir: PathBuf,
    /// Images generated per client for each evaluation.
    pub eval_samples: usize,
    /// Evaluate every this many epochs; 0 evaluates the final epoch only.
    pub eval_every: usize,
    /// Fill `wall_seconds`; off by default so metrics files are reproducible.
    pub record_wall_time: bool,
}

impl Default for ExperimentConfig {
    fn default() -> Self {
        Self {
            n_clients: 3,
            per_client: 256,
            holdout: 512,
            image_size: 32,
            timesteps: 50,
            schedule: ScheduleKind::Cosine,
            schedule_offset: 0.008,
            c_grid: vec![0.0, 0.2, 0.4, 0.6, 0.8, 1.0],
            epochs: 30,
            batch_size: 32,
            lr: 0.001,
            seed: 0,
            net: NetShape::default(),
            output_dir: PathBuf::from("runs/default"),
            eval_samples: 64,
            eval_every: 0,
            record_wall_time: false,
        }
    }
}

#[derive(Debug, Error)]
pub enum ConfigError {
    #[error("cannot read config {path}: {source}")]
    Io { path: PathBuf, source: io::Error },
    #[error("config key `{key}`: {message}")]
    Parse { key: String, message: String },
    #[error("config key `{key}`: {message}")]
    Invalid { key: &'static str, message: String },
}

fn invalid(key: &'static str, message: impl Into<String>) -> ConfigError {
    ConfigError::Invalid {
        key,
        message: message.into(),
    }
}

impl ExperimentConfig {
    pub fn from_json(text: &str) -> Result<Self, ConfigError> {
        let de = &mut serde_json::Deserializer::from_str(text);
        let cfg: Self = serde_path_to_error::deserialize(de).map_err(|e| ConfigError::Parse {
            key: e.path().to_string(),
            message: e.inner().to_string(),
        })?;
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn load(path: impl AsRef<Path>) -> Result<Self, ConfigError> {
        let path = path.as_ref();
        let text = fs::read_to_string(path).map_err(|source| ConfigError::Io {
            path: path.to_path_buf(),
            source,
        })?;
        Self::from_json(&text)
    }

    pub fn to_json(&self) -> String {
        serde_json::to_string_pretty(self).expect("config serializes") + "\n"
    }

    pub fn validate(&self) -> Result<(), ConfigError> {
        for (key, v) in [
            ("n_clients", self.n_clients),
            ("per_client", self.per_client),
            ("image_size", self.image_size),
            ("batch_size", self.batch_size),
        ] {
            if v == 0 {
                return Err(invalid(key, "must be positive"));
            }
        }
        if self.holdout < 2 {
            return Err(invalid("holdout", "needs at least 2 images"));
        }
        if self.eval_samples < 2 {
            return Err(invalid("eval_samples", "needs at least 2 images"));
        }
        if self.timesteps < 2 {
            return Err(invalid("timesteps", "must be at least 2"));
        }
        if !(self.schedule_offset >= 0.0 && self.schedule_offset.is_finite()) {
            return Err(invalid("schedule_offset", "must be finite and >= 0"));
        }
        if !(self.lr > 0.0 && self.lr.is_finite()) {
            return Err(invalid("lr", "must be finite and > 0"));
        }
        if self.c_grid.is_empty() {
            return Err(invalid("c_grid", "must not be empty"));
        }
        let mut dirs = std::collections::BTreeSet::new();
        for &c in &self.c_grid {
            if !(0.0..=1.0).contains(&c) {
                return Err(invalid("c_grid", format!("{c} is outside [0, 1]")));
            }
            if !dirs.insert(cell_dir_name(c)) {
                return Err(invalid("c_grid", format!("{c} duplicates another grid value")));
            }
        }
        self.net_config()
            .validate()
            .map_err(|e| invalid("net", e.to_string()))?;
        Ok(())
    }

    pub fn net_config(&self) -> NetConfig {
        NetConfig {
            base_channels: self.net.base_channels,
            depth: self.net.depth,
            timestep_embed_dim: self.net.timestep_embed_dim,
            image_channels: 1,
            image_size: self.image_size,
        }
    }

    pub fn schedule(&self) -> Result<VarianceSchedule, DiffusionError> {
        make_schedule(self.schedule, self.timesteps, self.schedule_offset)
    }

    pub fn phantoms(&self) -> PhantomConfig {
        PhantomConfig {
            image_size: self.image_size,
            ..PhantomConfig::default()
        }
    }

    pub fn dataset(&self) -> Dataset {
        make_shards(&self.phantoms(), self.n_clients, self.per_client, self.holdout, self.seed)
    }

    fn hash(&self) -> String {
        hex_digest(self.to_json().as_bytes())
    }
}

#[derive(Debug, Error)]
pub enum RunError {
    #[error(transparent)]
    Config(#[from] ConfigError),
    #[error("{path}: {source}")]
    Io { path: PathBuf, source: io::Error },
    #[error(transparent)]
    Session(#[from] SessionFailure),
    #[error(transparent)]
    Net(#[from] NetError),
    #[error(transparent)]
    Metrics(#[from] MetricsError),
    #[error(transparent)]
    Diffusion(#[from] DiffusionError),
    #[error(transparent)]
    Cut(#[from] CutError),
    #[error("{path}: {source}")]
    TensorFile { path: PathBuf, source: TensorFileError },
    #[error("{path}: {source}")]
    Checkpoint { path: PathBuf, source: CheckpointError },
    #[error("{path}:{line}: {message}")]
    Csv { path: PathBuf, line: usize, message: String },
    #[error("incomplete run: {0}")]
    Incomplete(String),
    #[error("cut ratio {0} is not part of this run")]
    UnknownCut(f64),
}

impl RunError {
    /// Process exit code: 2 for configuration problems, 3 otherwise.
    pub fn exit_code(&self) -> i32 {
        match self {
            RunError::Config(_) => 2,
            _ => 3,
        }
    }
}

fn io_err(path: &Path) -> impl FnOnce(io::Error) -> RunError + '_ {
    move |source| RunError::Io {
        path: path.to_path_buf(),
        source,
    }
}

fn write_file(path: &Path, bytes: impl AsRef<[u8]>) -> Result<(), RunError> {
    fs::write(path, bytes).map_err(io_err(path))
}

fn hex_digest(bytes: &[u8]) -> String {
    Sha256::digest(bytes).iter().fold(String::new(), |mut s, b| {
        let _ = write!(s, "{b:02x}");
        s
    })
}

pub fn cell_dir_name(c: f64) -> String {
    format!("c_{c:.2}")
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord)]
pub enum Entity {
    Client(u32),
    Server,
    Sum,
}

impl std::fmt::Display for Entity {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        match self {
            Entity::Client(k) => write!(f, "{k}"),
            Entity::Server => f.write_str("server"),
            Entity::Sum => f.write_str("sum"),
        }
    }
}

impl std::str::FromStr for Entity {
    type Err = String;

    fn from_str(s: &str) -> Result<Self, String> {
        match s {
            "server" => Ok(Entity::Server),
            "sum" => Ok(Entity::Sum),
            _ => s
                .parse()
                .map(Entity::Client)
                .map_err(|_| format!("unknown entity {s:?}")),
        }
    }
}

/// One line of `metrics.csv`. FLOP and byte columns are per epoch; the
/// `sum` row adds the client KIDs ("stacked") and averages disclosure MSE
/// over clients.
#[derive(Debug, Clone, PartialEq)]
pub struct MetricsRow {
    pub c: f64,
    pub epoch: usize,
    pub entity: Entity,
    pub kid_train: Option<f64>,
    pub kid_holdout: Option<f64>,
    pub disclosure_mse: Option<f64>,
    pub disclosure_kid: Option<f64>,
    pub client_flops: Option<u64>,
    pub server_flops: Option<u64>,
    pub bytes_tx: Option<u64>,
    pub wall_seconds: f64,
    pub train_loss: Option<f64>,
}

fn opt<T: ToString>(v: Option<T>) -> String {
    v.map(|v| v.to_string()).unwrap_or_default()
}

impl MetricsRow {
    pub fn blank(c: f64, epoch: usize, entity: Entity) -> Self {
        Self {
            c,
            epoch,
            entity,
            kid_train: None,
            kid_holdout: None,
            disclosure_mse: None,
            disclosure_kid: None,
            client_flops: None,
            server_flops: None,
            bytes_tx: None,
            wall_seconds: 0.0,
            train_loss: None,
        }
    }

    pub fn to_csv(&self) -> String {
        [
            self.c.to_string(),
            self.epoch.to_string(),
            self.entity.to_string(),
            opt(self.kid_train),
            opt(self.kid_holdout),
            opt(self.disclosure_mse),
            opt(self.disclosure_kid),
            opt(self.client_flops),
            opt(self.server_flops),
            opt(self.bytes_tx),
            self.wall_seconds.to_string(),
            opt(self.train_loss),
        ]
        .join(",")
    }

    pub fn parse(line: &str) -> Result<Self, String> {
        let f: Vec<&str> = line.split(',').collect();
        if f.len() != 12 {
            return Err(format!("expected 12 fields, found {}", f.len()));
        }
        fn num<T: std::str::FromStr>(name: &str, s: &str) -> Result<T, String> {
            s.parse().map_err(|_| format!("{name}: cannot parse {s:?}"))
        }
        fn maybe<T: std::str::FromStr>(name: &str, s: &str) -> Result<Option<T>, String> {
            if s.is_empty() {
                Ok(None)
            } else {
                num(name, s).map(Some)
            }
        }
        Ok(Self {
            c: num("c", f[0])?,
            epoch: num("epoch", f[1])?,
            entity: f[2].parse()?,
            kid_train: maybe("kid_train", f[3])?,
            kid_holdout: maybe("kid_holdout", f[4])?,
            disclosure_mse: maybe("disclosure_mse", f[5])?,
            disclosure_kid: maybe("disclosure_kid", f[6])?,
            client_flops: maybe("client_flops", f[7])?,
            server_flops: maybe("server_flops", f[8])?,
            bytes_tx: maybe("bytes_tx", f[9])?,
            wall_seconds: num("wall_seconds", f[10])?,
            train_loss: maybe("train_loss", f[11])?,
        })
    }
}

pub fn metrics_csv(rows: &[MetricsRow]) -> String {
    let mut out = String::from(METRICS_HEADER);
    out.push('\n');
    for r in rows {
        out.push_str(&r.to_csv());
        out.push('\n');
    }
    out
}

pub fn read_metrics(path: impl AsRef<Path>) -> Result<Vec<MetricsRow>, RunError> {
    let path = path.as_ref();
    let text = fs::read_to_string(path).map_err(io_err(path))?;
    let csv_err = |line: usize, message: String| RunError::Csv {
        path: path.to_path_buf(),
        line,
        message,
    };
    let mut lines = text.lines();
    if lines.next() != Some(METRICS_HEADER) {
        return Err(csv_err(1, "missing or unexpected header".into()));
    }
    lines
        .enumerate()
        .filter(|(_, l)| !l.is_empty())
        .map(|(i, l)| MetricsRow::parse(l).map_err(|m| csv_err(i + 2, m)))
        .collect()
}

/// Fidelity and disclosure of one client's generator at one evaluation.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct ClientEval {
    pub kid_train: f64,
    pub kid_holdout: f64,
    pub disclosure_mse: f64,
    pub disclosure_kid: Option<f64>,
}

/// Fixed evaluation apparatus for one run.
pub struct Evaluator<'a> {
    config: &'a ExperimentConfig,
    schedule: VarianceSchedule,
    extractor: FeatureExtractor,
    shards: Vec<&'a ImageTensor>,
    shard_features: Vec<Features>,
    holdout_features: Features,
}

impl<'a> Evaluator<'a> {
    pub fn new(config: &'a ExperimentConfig, data: &'a Dataset) -> Result<Self, RunError> {
        let extractor = FeatureExtractor::new(derive_seed(config.seed, "features", 0), 1, config.image_size, FEATURE_DIM);
        let shards: Vec<&ImageTensor> = data.shards.iter().map(|s| &s.images).collect();
        let shard_features = shards
            .iter()
            .map(|s| extractor.extract(s))
            .collect::<Result<_, _>>()?;
        Ok(Self {
            config,
            schedule: config.schedule()?,
            holdout_features: extractor.extract(&data.holdout)?,
            extractor,
            shards,
            shard_features,
        })
    }

    pub fn extractor(&self) -> &FeatureExtractor {
        &self.extractor
    }

    /// Generate from each client's split chain and score it. The sampling
    /// streams depend on the epoch and client only, so every cut sees the
    /// same initial noise.
    pub fn evaluate(&self, shared: &Model, locals: &[&Model], cut: &CutConfig, epoch: usize) -> Result<Vec<ClientEval>, RunError> {
        locals
            .iter()
            .enumerate()
            .map(|(k, local)| {
                let mut rng = ChaCha8Rng::seed_from_u64(derive_seed(self.config.seed, "eval", (epoch as u64) << 16 | k as u64));
                let (images, boundary) =
                    split_inference(shared, local, cut, &self.schedule, self.config.eval_samples, &mut rng)?;
                let gen = self.extractor.extract(&images)?;
                let report = disclosure(&boundary, self.shards[k], &self.extractor)?;
                Ok(ClientEval {
                    kid_train: kid(&self.shard_features[k], &gen)?.value,
                    kid_holdout: kid(&self.holdout_features, &gen)?.value,
                    disclosure_mse: report.mean_mse,
                    disclosure_kid: report.kid.map(|k| k.value),
                })
            })
            .collect()
    }
}

/// Per-epoch accounting of every entity, independent of how it was produced.
#[derive(Debug, Clone, PartialEq)]
struct EpochAccount {
    clients: Vec<EntityEpoch>,
    server: EntityEpoch,
    server_per_client: Vec<u64>,
}

fn epoch_rows(c: f64, epoch: usize, acc: &EpochAccount, evals: Option<&[ClientEval]>, wall: f64) -> Vec<MetricsRow> {
    let mut rows = Vec::new();
    for (k, client) in acc.clients.iter().enumerate() {
        let mut r = MetricsRow::blank(c, epoch, Entity::Client(k as u32));
        if let Some(e) = evals.map(|e| e[k]) {
            r.kid_train = Some(e.kid_train);
            r.kid_holdout = Some(e.kid_holdout);
            r.disclosure_mse = Some(e.disclosure_mse);
            r.disclosure_kid = e.disclosure_kid;
        }
        r.client_flops = Some(client.energy.total_flops());
        r.server_flops = Some(acc.server_per_client[k]);
        r.bytes_tx = Some(client.energy.bytes());
        r.wall_seconds = wall;
        r.train_loss = client.mean_loss;
        rows.push(r);
    }
    let mut server = MetricsRow::blank(c, epoch, Entity::Server);
    server.server_flops = Some(acc.server.energy.total_flops());
    server.bytes_tx = Some(acc.server.energy.bytes());
    server.wall_seconds = wall;
    server.train_loss = acc.server.mean_loss;
    rows.push(server);

    let mut sum = MetricsRow::blank(c, epoch, Entity::Sum);
    if let Some(evals) = evals {
        let n = evals.len() as f64;
        sum.kid_train = Some(evals.iter().map(|e| e.kid_train).sum());
        sum.kid_holdout = Some(evals.iter().map(|e| e.kid_holdout).sum());
        sum.disclosure_mse = Some(evals.iter().map(|e| e.disclosure_mse).sum::<f64>() / n);
        sum.disclosure_kid = evals.iter().map(|e| e.disclosure_kid).sum();
    }
    sum.client_flops = Some(acc.clients.iter().map(|c| c.energy.total_flops()).sum());
    sum.server_flops = Some(acc.server.energy.total_flops());
    sum.bytes_tx = Some(acc.clients.iter().map(|c| c.energy.bytes()).sum());
    sum.wall_seconds = wall;
    rows.push(sum);
    rows
}

fn should_evaluate(cfg: &ExperimentConfig, epoch: usize) -> bool {
    epoch == cfg.epochs || (cfg.eval_every > 0 && epoch % cfg.eval_every == 0)
}

fn write_checkpoint(path: &Path, model: &Model) -> Result<(), RunError> {
    write_file(path, model.params().to_bytes())
}

pub fn load_checkpoint(path: &Path, net: NetConfig) -> Result<Model, RunError> {
    let bytes = fs::read(path).map_err(io_err(path))?;
    let params = ModelParams::from_bytes(&bytes).map_err(|source| RunError::Checkpoint {
        path: path.to_path_buf(),
        source,
    })?;
    Ok(Model::from_params(net, params)?)
}

/// Train and evaluate one cut. Checkpoints land in `dir`.
fn run_cell(cfg: &ExperimentConfig, data: &Dataset, eval: &Evaluator, c: f64, dir: &Path) -> Result<Vec<MetricsRow>, RunError> {
    let cut = CutConfig::new(cfg.timesteps, c)?;
    let session_cfg = SessionConfig {
        session_id: derive_seed(cfg.seed, "session", cut.t_split() as u64),
        cut,
        schedule: cfg.schedule()?,
        net: cfg.net_config(),
        epochs: cfg.epochs,
        batch_size: cfg.batch_size,
        lr: cfg.lr,
    };
    let shards = data.shards.iter().map(|s| s.images.clone()).collect();
    let mut session = Session::new(session_cfg, shards, &SessionSeeds::derive(cfg.seed, cfg.n_clients))?;
    let evaluate = |session: &Session, epoch| {
        let shared = session.shared_model();
        let locals: Vec<&Model> = session.clients().iter().map(|c| c.model()).collect();
        eval.evaluate(&shared, &locals, &cut, epoch)
    };

    let mut rows = Vec::new();
    if cfg.epochs == 0 {
        let acc = EpochAccount {
            clients: session
                .clients()
                .iter()
                .map(|c| EntityEpoch {
                    energy: c.energy(),
                    ..Default::default()
                })
                .collect(),
            server: EntityEpoch::default(),
            server_per_client: vec![0; cfg.n_clients],
        };
        rows.extend(epoch_rows(c, 0, &acc, Some(&evaluate(&session, 0)?), 0.0));
    }
    for epoch in 1..=cfg.epochs {
        let start = Instant::now();
        let stats = session.run_epoch()?;
        let evals = should_evaluate(cfg, epoch).then(|| evaluate(&session, epoch)).transpose()?;
        let wall = if cfg.record_wall_time { start.elapsed().as_secs_f64() } else { 0.0 };
        let acc = EpochAccount {
            clients: stats.clients.clone(),
            server: stats.server,
            server_per_client: stats.server_per_client.iter().map(|e| e.total_flops()).collect(),
        };
        rows.extend(epoch_rows(c, epoch, &acc, evals.as_deref(), wall));
    }
    let system = session.finish();
    write_checkpoint(&dir.join("shared.cfw"), &system.shared)?;
    for (k, local) in system.locals.iter().enumerate() {
        write_checkpoint(&dir.join(format!("client_{k}.cfw")), local)?;
    }
    Ok(rows)
}

/// Number of grid cells trained at once: `CF_THREADS`, else the number of
/// available cores.
pub fn worker_count() -> usize {
    std::env::var("CF_THREADS")
        .ok()
        .and_then(|v| v.parse::<usize>().ok())
        .filter(|&n| n > 0)
        .unwrap_or_else(|| std::thread::available_parallelism().map_or(1, |n| n.get()))
}

fn write_dataset(dir: &Path, data: &Dataset) -> Result<BTreeMap<String, String>, RunError> {
    let shard_dir = dir.join("shards");
    fs::create_dir_all(&shard_dir).map_err(io_err(&shard_dir))?;
    let mut hashes = BTreeMap::new();
    let mut put = |name: String, t: &ImageTensor| -> Result<(), RunError> {
        let path = dir.join(&name);
        write_tensor_file(&path, t).map_err(|source| RunError::TensorFile { path, source })?;
        hashes.insert(name, hex_digest(&crate::data::tensor_to_bytes(t)));
        Ok(())
    };
    for shard in &data.shards {
        put(format!("shards/client_{}.cft", shard.client_id), &shard.images)?;
    }
    put("holdout.cft".into(), &data.holdout)?;
    Ok(hashes)
}

fn hash_files(dir: &Path) -> Result<BTreeMap<String, String>, RunError> {
    let mut out = BTreeMap::new();
    let mut entries: Vec<_> = fs::read_dir(dir)
        .map_err(io_err(dir))?
        .filter_map(Result::ok)
        .map(|e| e.path())
        .filter(|p| p.extension().is_some_and(|e| e == "cfw" || e == "csv"))
        .collect();
    entries.sort();
    for path in entries {
        let bytes = fs::read(&path).map_err(io_err(&path))?;
        let name = path.file_name().expect("file entry").to_string_lossy().into_owned();
        out.insert(name, hex_digest(&bytes));
    }
    Ok(out)
}

#[derive(Serialize)]
struct Manifest<'a> {
    schema_version: u32,
    seed: u64,
    config_sha256: String,
    data: BTreeMap<String, String>,
    cells: Vec<ManifestCell<'a>>,
}

#[derive(Serialize)]
struct ManifestCell<'a> {
    c: f64,
    dir: &'a str,
    files: BTreeMap<String, String>,
}

/// Run the full sweep described by `cfg`. Finished cells (those with a
/// `DONE` marker for the same configuration) are reused, so an interrupted
/// run resumes where it stopped.
pub fn train(cfg: &ExperimentConfig) -> Result<PathBuf, RunError> {
    cfg.validate()?;
    let out = cfg.output_dir.clone();
    fs::create_dir_all(&out).map_err(io_err(&out))?;
    let marker = out.join("INCOMPLETE");
    write_file(&marker, "run in progress\n")?;
    write_file(&out.join("config.json"), cfg.to_json())?;
    let data = cfg.dataset();
    let data_hashes = write_dataset(&out, &data)?;
    let eval = Evaluator::new(cfg, &data)?;
    let config_hash = cfg.hash();

    let names: Vec<String> = cfg.c_grid.iter().map(|&c| cell_dir_name(c)).collect();
    let results: Mutex<Vec<Option<Result<Vec<MetricsRow>, RunError>>>> =
        Mutex::new((0..cfg.c_grid.len()).map(|_| None).collect());
    let next = AtomicUsize::new(0);
    let work = || loop {
        let i = next.fetch_add(1, Ordering::SeqCst);
        if i >= cfg.c_grid.len() {
            break;
        }
        let dir = out.join(&names[i]);
        let result = run_or_resume(cfg, &data, &eval, cfg.c_grid[i], &dir, &config_hash);
        results.lock().expect("no worker panicked")[i] = Some(result);
    };
    let workers = worker_count().min(cfg.c_grid.len());
    if workers <= 1 {
        work();
    } else {
        std::thread::scope(|s| {
            for _ in 0..workers {
                s.spawn(work);
            }
        });
    }

    let mut rows = Vec::new();
    for result in results.into_inner().expect("no worker panicked") {
        rows.extend(result.expect("every cell ran")?);
    }
    write_file(&out.join("metrics.csv"), metrics_csv(&rows))?;
    let cells = cfg
        .c_grid
        .iter()
        .zip(&names)
        .map(|(&c, dir)| {
            Ok(ManifestCell {
                c,
                dir,
                files: hash_files(&out.join(dir))?,
            })
        })
        .collect::<Result<Vec<_>, RunError>>()?;
    let manifest = Manifest {
        schema_version: SCHEMA_VERSION,
        seed: cfg.seed,
        config_sha256: config_hash,
        data: data_hashes,
        cells,
    };
    write_file(
        &out.join("manifest.json"),
        serde_json::to_string_pretty(&manifest).expect("manifest serializes") + "\n",
    )?;
    fs::remove_file(&marker).map_err(io_err(&marker))?;
    Ok(out)
}

fn run_or_resume(
    cfg: &ExperimentConfig,
    data: &Dataset,
    eval: &Evaluator,
    c: f64,
    dir: &Path,
    config_hash: &str,
) -> Result<Vec<MetricsRow>, RunError> {
    let done = dir.join("DONE");
    let metrics = dir.join("metrics.csv");
    if fs::read_to_string(&done).is_ok_and(|h| h.trim() == config_hash) && metrics.exists() {
        return read_metrics(&metrics);
    }
    fs::create_dir_all(dir).map_err(io_err(dir))?;
    let _ = fs::remove_file(&done);
    let incomplete = dir.join("INCOMPLETE");
    write_file(&incomplete, "cell in progress\n")?;
    match run_cell(cfg, data, eval, c, dir) {
        Ok(rows) => {
            write_file(&metrics, metrics_csv(&rows))?;
            write_file(&done, format!("{config_hash}\n"))?;
            fs::remove_file(&incomplete).map_err(io_err(&incomplete))?;
            Ok(rows)
        }
        Err(e) => {
            let _ = fs::write(&incomplete, format!("cell failed: {e}\n"));
            Err(e)
        }
    }
}

pub fn cmd_train(config_path: impl AsRef<Path>, output_dir: Option<PathBuf>) -> Result<PathBuf, RunError> {
    let mut cfg = ExperimentConfig::load(config_path)?;
    if let Some(dir) = output_dir {
        cfg.output_dir = dir;
    }
    train(&cfg)
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum BaselineMode {
    Local,
    Central,
}

/// Plain training without the protocol: every client alone (`Local`, the
/// reference for c = 1) or one model on all shards (`Central`, the
/// reference for c = 0). Uses the same seeds and evaluation as [`train`].
pub fn baseline(cfg: &ExperimentConfig, mode: BaselineMode) -> Result<PathBuf, RunError> {
    cfg.validate()?;
    let (c, name) = match mode {
        BaselineMode::Local => (1.0, "baseline_local"),
        BaselineMode::Central => (0.0, "baseline_central"),
    };
    let dir = cfg.output_dir.join(name);
    fs::create_dir_all(&dir).map_err(io_err(&dir))?;
    write_file(&dir.join("config.json"), cfg.to_json())?;
    let data = cfg.dataset();
    let eval = Evaluator::new(cfg, &data)?;
    let sched = cfg.schedule()?;
    let net = cfg.net_config();
    let cut = CutConfig::new(cfg.timesteps, c)?;
    let seeds = SessionSeeds::derive(cfg.seed, cfg.n_clients);
    let mut rngs: Vec<ChaCha8Rng> = seeds.client_streams.iter().map(|&s| ChaCha8Rng::seed_from_u64(s)).collect();
    let shards: Vec<ImageTensor> = data.shards.iter().map(|s| s.images.clone()).collect();
    let n = cfg.n_clients;

    let account = |records: &[StepRecord], central: bool| -> EpochAccount {
        let mut clients = vec![EntityEpoch::default(); n];
        let mut server = EntityEpoch::default();
        let mut server_per_client = vec![0u64; n];
        let mut loss_sums = vec![0.0f64; n];
        let mut server_loss = 0.0f64;
        for r in records {
            if central {
                server.pairs += r.pairs;
                server.energy.record_training(&net, r.pairs);
                server_per_client[r.source] += training_flops(&net, r.pairs);
                server_loss += r.pairs as f64 * r.loss as f64;
            } else {
                let e = &mut clients[r.source];
                e.pairs += r.pairs;
                e.energy.record_training(&net, r.pairs);
                loss_sums[r.source] += r.pairs as f64 * r.loss as f64;
            }
        }
        for (e, s) in clients.iter_mut().zip(&loss_sums) {
            e.mean_loss = (e.pairs > 0).then(|| s / e.pairs as f64);
        }
        server.mean_loss = (server.pairs > 0).then(|| server_loss / server.pairs as f64);
        EpochAccount {
            clients,
            server,
            server_per_client,
        }
    };

    let mut shared = Model::new(net, seeds.shared_model)?;
    let mut locals: Vec<Model> = seeds
        .local_models
        .iter()
        .map(|&s| Model::new(net, s))
        .collect::<Result<_, _>>()?;
    let evaluate = |shared: &Model, locals: &[Model], epoch| match mode {
        BaselineMode::Local => {
            let refs: Vec<&Model> = locals.iter().collect();
            eval.evaluate(&locals[0], &refs, &cut, epoch)
        }
        BaselineMode::Central => eval.evaluate(shared, &vec![shared; n], &cut, epoch),
    };

    let mut rows = Vec::new();
    if cfg.epochs == 0 {
        let acc = account(&[], mode == BaselineMode::Central);
        rows.extend(epoch_rows(c, 0, &acc, Some(&evaluate(&shared, &locals, 0)?), 0.0));
    }
    // one epoch per call: a fresh plan starts each epoch with a shuffle,
    // exactly as a single multi-epoch call would
    for epoch in 1..=cfg.epochs {
        let start = Instant::now();
        let records = match mode {
            BaselineMode::Local => {
                let mut all = Vec::new();
                for k in 0..n {
                    let mut recs = train_local_plain(&mut locals[k], &shards[k], &sched, 1, cfg.batch_size, cfg.lr, &mut rngs[k])?;
                    for r in &mut recs {
                        r.source = k;
                    }
                    all.extend(recs);
                }
                all
            }
            BaselineMode::Central => {
                train_central_plain(&mut shared, &shards, &sched, 1, cfg.batch_size, cfg.lr, &mut rngs)?
            }
        };
        let acc = account(&records, mode == BaselineMode::Central);
        let evals = should_evaluate(cfg, epoch)
            .then(|| evaluate(&shared, &locals, epoch))
            .transpose()?;
        let wall = if cfg.record_wall_time { start.elapsed().as_secs_f64() } else { 0.0 };
        rows.extend(epoch_rows(c, epoch, &acc, evals.as_deref(), wall));
    }
    match mode {
        BaselineMode::Local => {
            for (k, local) in locals.iter().enumerate() {
                write_checkpoint(&dir.join(format!("client_{k}.cfw")), local)?;
            }
        }
        BaselineMode::Central => write_checkpoint(&dir.join("shared.cfw"), &shared)?,
    }
    write_file(&dir.join("metrics.csv"), metrics_csv(&rows))?;
    Ok(dir)
}

pub fn cmd_baseline(mode: BaselineMode, config_path: impl AsRef<Path>, output_dir: Option<PathBuf>) -> Result<PathBuf, RunError> {
    let mut cfg = ExperimentConfig::load(config_path)?;
    if let Some(dir) = output_dir {
        cfg.output_dir = dir;
    }
    baseline(&cfg, mode)
}

/// Final-epoch figures of one cut.
#[derive(Debug, Clone, PartialEq)]
pub struct SummaryRow {
    pub c: f64,
    pub final_epoch: usize,
    pub kid_train_sum: f64,
    pub kid_holdout_sum: f64,
    pub kid_train_clients: Vec<f64>,
    pub disclosure_mse: f64,
    pub disclosure_kid_sum: Option<f64>,
    /// Totals over all epochs.
    pub client_flops: u64,
    pub server_flops: u64,
    pub bytes: u64,
}

#[derive(Debug, Clone, PartialEq)]
pub struct Verdict {
    pub hypothesis: &'static str,
    pub statement: &'static str,
    pub supported: bool,
    pub detail: String,
}

impl std::fmt::Display for Verdict {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        write!(
            f,
            "{}: {} -- {} ({})",
            self.hypothesis,
            self.statement,
            if self.supported { "supported" } else { "not supported" },
            self.detail
        )
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct Summary {
    pub rows: Vec<SummaryRow>,
    pub verdicts: Vec<Verdict>,
}

pub fn summarize(metrics: &[MetricsRow]) -> Result<Vec<SummaryRow>, RunError> {
    let mut cuts: Vec<f64> = Vec::new();
    for r in metrics {
        if !cuts.iter().any(|&c| c == r.c) {
            cuts.push(r.c);
        }
    }
    if cuts.is_empty() {
        return Err(RunError::Incomplete("metrics.csv has no rows".into()));
    }
    cuts.sort_by(f64::total_cmp);
    cuts.into_iter()
        .map(|c| {
            let rows: Vec<&MetricsRow> = metrics.iter().filter(|r| r.c == c).collect();
            let final_epoch = rows.iter().map(|r| r.epoch).max().expect("non-empty");
            let at_final = |e: Entity| rows.iter().find(|r| r.epoch == final_epoch && r.entity == e);
            let missing = |what: &str| RunError::Incomplete(format!("c = {c}: {what} missing at epoch {final_epoch}"));
            let sum = at_final(Entity::Sum).ok_or_else(|| missing("sum row"))?;
            let mut kid_train_clients = Vec::new();
            for k in 0.. {
                let Some(r) = at_final(Entity::Client(k)) else { break };
                kid_train_clients.push(r.kid_train.ok_or_else(|| missing("client KID"))?);
            }
            let total = |f: fn(&MetricsRow) -> Option<u64>| {
                rows.iter().filter(|r| r.entity == Entity::Sum).filter_map(|r| f(r)).sum()
            };
            Ok(SummaryRow {
                c,
                final_epoch,
                kid_train_sum: sum.kid_train.ok_or_else(|| missing("summed KID"))?,
                kid_holdout_sum: sum.kid_holdout.ok_or_else(|| missing("summed hold-out KID"))?,
                kid_train_clients,
                disclosure_mse: sum.disclosure_mse.ok_or_else(|| missing("disclosure MSE"))?,
                disclosure_kid_sum: sum.disclosure_kid,
                client_flops: total(|r| r.client_flops),
                server_flops: total(|r| r.server_flops),
                bytes: total(|r| r.bytes_tx),
            })
        })
        .collect()
}

/// Trend verdicts over rows sorted by ascending `c`.
pub fn verdicts(rows: &[SummaryRow]) -> Vec<Verdict> {
    let mut out = Vec::new();
    let at_one = rows.iter().find(|r| r.c == 1.0);
    let interior = rows
        .iter()
        .filter(|r| r.c > 0.0 && r.c < 1.0)
        .min_by(|a, b| a.kid_train_sum.total_cmp(&b.kid_train_sum));
    let (supported, detail) = match (interior, at_one) {
        (Some(best), Some(local)) => (
            best.kid_train_sum < local.kid_train_sum,
            format!(
                "best interior c = {} with summed KID {:.6}; c = 1 summed KID {:.6}",
                best.c, best.kid_train_sum, local.kid_train_sum
            ),
        ),
        _ => (false, "needs c = 1 and at least one interior cut".into()),
    };
    out.push(Verdict {
        hypothesis: "H1",
        statement: "some collaborative cut beats purely local training on summed KID",
        supported,
        detail,
    });

    let monotone = |f: fn(&SummaryRow) -> f64| rows.windows(2).all(|w| f(&w[0]) <= f(&w[1]));
    let series = |f: fn(&SummaryRow) -> f64| {
        rows.iter()
            .map(|r| format!("c={}: {}", r.c, f(r)))
            .collect::<Vec<_>>()
            .join(", ")
    };
    let mse = |r: &SummaryRow| r.disclosure_mse;
    out.push(Verdict {
        hypothesis: "H2b",
        statement: "disclosure MSE does not increase as c decreases",
        supported: rows.len() >= 2 && monotone(mse),
        detail: series(mse),
    });
    let flops = |r: &SummaryRow| r.client_flops as f64;
    out.push(Verdict {
        hypothesis: "H2c",
        statement: "client training FLOPs do not increase as c decreases",
        supported: rows.len() >= 2 && monotone(flops),
        detail: series(flops),
    });
    out
}

fn summary_csv(rows: &[SummaryRow]) -> String {
    let n = rows.iter().map(|r| r.kid_train_clients.len()).max().unwrap_or(0);
    let mut out = String::from(
        "c,final_epoch,kid_train_sum,kid_holdout_sum,disclosure_mse,disclosure_kid_sum,client_flops,server_flops,bytes",
    );
    for k in 0..n {
        let _ = write!(out, ",kid_train_client_{k}");
    }
    out.push('\n');
    for r in rows {
        let _ = write!(
            out,
            "{},{},{},{},{},{},{},{},{}",
            r.c,
            r.final_epoch,
            r.kid_train_sum,
            r.kid_holdout_sum,
            r.disclosure_mse,
            opt(r.disclosure_kid_sum),
            r.client_flops,
            r.server_flops,
            r.bytes
        );
        for k in 0..n {
            let _ = write!(out, ",{}", opt(r.kid_train_clients.get(k)));
        }
        out.push('\n');
    }
    out
}

/// Summarize `run_dir/metrics.csv` into `summary.csv` and `verdicts.txt`.
pub fn cmd_eval(run_dir: impl AsRef<Path>) -> Result<Summary, RunError> {
    let dir = run_dir.as_ref();
    let metrics_path = dir.join("metrics.csv");
    if !metrics_path.exists() {
        return Err(RunError::Incomplete(format!("{} not found", metrics_path.display())));
    }
    let rows = summarize(&read_metrics(&metrics_path)?)?;
    let verdicts = verdicts(&rows);
    write_file(&dir.join("summary.csv"), summary_csv(&rows))?;
    let text: String = verdicts.iter().map(|v| format!("{v}\n")).collect();
    write_file(&dir.join("verdicts.txt"), text)?;
    Ok(Summary { rows, verdicts })
}

/// Files written by [`cmd_sample`].
#[derive(Debug, Clone, PartialEq)]
pub struct SampleOutput {
    pub dir: PathBuf,
    pub finals: Vec<PathBuf>,
    pub boundaries: Vec<PathBuf>,
    pub contact_sheet: PathBuf,
}

/// Generate `n` images for cut `c` with client `client`'s local model,
/// writing PGM and `CFT1` copies of the final and boundary images and a
/// contact sheet of the chain at five evenly spaced timesteps.
pub fn cmd_sample(run_dir: impl AsRef<Path>, c: f64, n: usize, client: usize) -> Result<SampleOutput, RunError> {
    let run = run_dir.as_ref();
    let cfg = ExperimentConfig::load(run.join("config.json"))?;
    let Some(&c) = cfg.c_grid.iter().find(|&&g| (g - c).abs() < 1e-9) else {
        return Err(RunError::UnknownCut(c));
    };
    if n == 0 {
        return Err(RunError::Config(invalid("n", "must be positive")));
    }
    if client >= cfg.n_clients {
        return Err(RunError::Config(invalid("client", format!("run has {} clients", cfg.n_clients))));
    }
    let cell = run.join(cell_dir_name(c));
    let net = cfg.net_config();
    let shared = load_checkpoint(&cell.join("shared.cfw"), net)?;
    let local = load_checkpoint(&cell.join(format!("client_{client}.cfw")), net)?;
    let sched = cfg.schedule()?;
    let cut = CutConfig::new(cfg.timesteps, c)?;
    let t = cfg.timesteps;
    let snapshots: Vec<usize> = (0..5).map(|i| (t * (4 - i) + 2) / 4).collect();
    let mut rng = ChaCha8Rng::seed_from_u64(derive_seed(cfg.seed, "sample", client as u64));
    let s = split_inference_traced(&shared, &local, &cut, &sched, n, &snapshots, &mut rng)?;

    let dir = cell.join(format!("samples_client_{client}"));
    fs::create_dir_all(&dir).map_err(io_err(&dir))?;
    let mut finals = Vec::new();
    let mut boundaries = Vec::new();
    for i in 0..n {
        let f = dir.join(format!("final_{i}.pgm"));
        write_pgm(&f, &s.images, i).map_err(io_err(&f))?;
        finals.push(f);
        let b = dir.join(format!("boundary_{i}.pgm"));
        write_pgm(&b, &s.boundary, i).map_err(io_err(&b))?;
        boundaries.push(b);
    }
    for (name, t) in [("final.cft", &s.images), ("boundary.cft", &s.boundary)] {
        let path = dir.join(name);
        write_tensor_file(&path, t).map_err(|source| RunError::TensorFile { path, source })?;
    }
    let stacks: Vec<&ImageTensor> = s.trace.iter().map(|(_, x)| x).collect();
    let (pixels, w, h) = contact_sheet(&stacks);
    let sheet = dir.join("trajectory.pgm");
    write_file(&sheet, pgm_bytes(&pixels, w, h))?;
    Ok(SampleOutput {
        dir,
        finals,
        boundaries,
        contact_sheet: sheet,
    })
}
