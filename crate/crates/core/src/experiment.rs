//! Configuration-driven rate-distortion sweeps and online-phase timing.
//!
//! Configs are TOML. Dotted keys (`signal.n = 20`) and tables are
//! interchangeable:
//!
//! ```toml
//! signal = { n = 20, m = 10, s = 2, noise_variance = 1e-4 }
//! data = { train = 100000, val = 2000, test = 10000, seeds = [1] }
//! output.csv = "results.csv"
//!
//! [[methods]]
//! kind = "deepvqcs"
//! rates = [1.0, 2.5]
//! k = [10]
//! anneal_fraction = 0.8
//! train = { max_iters = 200000 }
//!
//! [[methods]]
//! kind = "ce_usq_l1"
//! rates = [1.0, 2.5]
//! ```

use std::path::{Path, PathBuf};
use std::time::Instant;

use nalgebra::DVector;
use serde::{Deserialize, Serialize};

use crate::baselines::{
    train_ce_decnet, CeCodec, CePipelineSpec, DecoderKind, EcVqCodec, QuantizerKind,
};
use crate::error::{config, Error, Result};
use crate::rng::derive_seed;
use crate::signal::{
    bits_per_index, rate_bits, sample_dataset, Dataset, MeasurementModel, NmseAccumulator,
    SparseSourceSpec,
};
use crate::trainer::{compress, reconstruct, train, Checkpoint, DeepVqcsModel, TrainConfig};

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct SignalConfig {
    pub n: usize,
    pub m: usize,
    pub s: usize,
    pub noise_variance: f64,
}

impl SignalConfig {
    pub fn model(&self) -> Result<MeasurementModel> {
        MeasurementModel::dct(self.n, self.m, self.noise_variance)
    }

    pub fn source(&self) -> SparseSourceSpec {
        SparseSourceSpec::new(self.n, self.s)
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct DataConfig {
    pub train: usize,
    pub val: usize,
    pub test: usize,
    pub seeds: Vec<u64>,
}

impl Default for DataConfig {
    fn default() -> Self {
        Self {
            train: 100_000,
            val: 2_000,
            test: 10_000,
            seeds: vec![1],
        }
    }
}

#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct OutputConfig {
    pub csv: Option<PathBuf>,
    pub timing_csv: Option<PathBuf>,
    pub checkpoint_dir: Option<PathBuf>,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct BenchConfig {
    pub repetitions: usize,
    pub warmup: usize,
}

impl Default for BenchConfig {
    fn default() -> Self {
        Self {
            repetitions: 100,
            warmup: 10,
        }
    }
}

pub const MIN_BENCH_REPETITIONS: usize = 100;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum MethodKind {
    Deepvqcs,
    CeUsqOmp,
    CeUsqL1,
    CeSqL1,
    CeVqL1,
    CeDecnet,
    EcVq,
}

impl MethodKind {
    pub fn label(self) -> &'static str {
        match self {
            Self::Deepvqcs => "DeepVQCS",
            Self::CeUsqOmp => "CE-USQ-OMP",
            Self::CeUsqL1 => "CE-USQ-L1",
            Self::CeSqL1 => "CE-SQ-L1",
            Self::CeVqL1 => "CE-VQ-L1",
            Self::CeDecnet => "CE-DecNet",
            Self::EcVq => "EC-VQ",
        }
    }

    pub fn is_vector(self) -> bool {
        matches!(self, Self::CeVqL1 | Self::EcVq)
    }

    pub fn is_trained(self) -> bool {
        matches!(self, Self::Deepvqcs | Self::CeDecnet)
    }
}

/// One method of a sweep. Operating points come from `rates` (converted to
/// levels or codebook bits) plus any explicit `levels` or `codebook_bits`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct MethodConfig {
    pub kind: MethodKind,
    #[serde(default)]
    pub name: Option<String>,
    #[serde(default)]
    pub rates: Vec<f64>,
    #[serde(default)]
    pub levels: Vec<usize>,
    #[serde(default)]
    pub codebook_bits: Vec<u32>,
    /// Encoder output widths; DeepVQCS only, defaults to `[M]`.
    #[serde(default)]
    pub k: Vec<usize>,
    /// Overrides the default BPDN constraint radius.
    #[serde(default)]
    pub mu_qc: Option<f64>,
    /// Refit the annealing ramp to finish at this fraction of the budget.
    #[serde(default)]
    pub anneal_fraction: Option<f64>,
    /// Partial [`TrainConfig`] merged over the standard one.
    #[serde(default)]
    pub train: toml::Table,
}

impl MethodConfig {
    pub fn new(kind: MethodKind) -> Self {
        Self {
            kind,
            name: None,
            rates: Vec::new(),
            levels: Vec::new(),
            codebook_bits: Vec::new(),
            k: Vec::new(),
            mu_qc: None,
            anneal_fraction: None,
            train: toml::Table::new(),
        }
    }

    pub fn display_name(&self) -> String {
        self.name
            .clone()
            .unwrap_or_else(|| self.kind.label().to_string())
    }

    fn widths(&self, signal: &SignalConfig) -> Result<Vec<usize>> {
        match self.kind {
            MethodKind::Deepvqcs if !self.k.is_empty() => Ok(self.k.clone()),
            _ if !self.k.is_empty() => {
                config(format!("{} has no width to choose", self.kind.label()))
            }
            MethodKind::EcVq => Ok(vec![signal.n]),
            _ => Ok(vec![signal.m]),
        }
    }

    /// Every operating point in config order.
    pub fn points(&self, signal: &SignalConfig) -> Result<Vec<OperatingPoint>> {
        let label = self.kind.label();
        let mut points = Vec::new();
        for width in self.widths(signal)? {
            if self.kind.is_vector() {
                if !self.levels.is_empty() {
                    return config(format!("{label} takes codebook_bits, not levels"));
                }
                let from_rates = self
                    .rates
                    .iter()
                    .map(|&r| integral(r * signal.n as f64, label, r))
                    .collect::<Result<Vec<_>>>()?;
                for bits in from_rates
                    .into_iter()
                    .chain(self.codebook_bits.iter().map(|&b| b as u64))
                {
                    if !(1..=24).contains(&bits) {
                        return config(format!(
                            "{label}: codebook bits must lie in 1..=24, got {bits}"
                        ));
                    }
                    points.push(OperatingPoint::vector(width, bits as u32));
                }
            } else {
                if !self.codebook_bits.is_empty() {
                    return config(format!("{label} takes levels, not codebook_bits"));
                }
                for &r in &self.rates {
                    let bits = integral(r * signal.n as f64 / width as f64, label, r)?;
                    if !(1..=30).contains(&bits) {
                        return config(format!("{label}: rate {r} needs {bits} bits per index"));
                    }
                    points.push(OperatingPoint::scalar(width, 1usize << bits));
                }
                for &levels in &self.levels {
                    if levels < 2 {
                        return config(format!("{label}: need at least 2 levels, got {levels}"));
                    }
                    points.push(OperatingPoint::scalar(width, levels));
                }
            }
        }
        if points.is_empty() {
            return config(format!("{label} has no operating points"));
        }
        Ok(points)
    }

    /// Standard config for the point, overlaid with `train` and refitted by
    /// `anneal_fraction`.
    pub fn train_config(
        &self,
        signal: &SignalConfig,
        point: &OperatingPoint,
        seed: u64,
    ) -> Result<TrainConfig> {
        let base = TrainConfig::standard(signal.n, signal.m, point.k_width, point.levels);
        let mut table = match toml::Value::try_from(&base) {
            Ok(toml::Value::Table(t)) => t,
            _ => {
                return Err(Error::Format(
                    "cannot serialize the base train config".into(),
                ))
            }
        };
        if !self.train.contains_key("seed") {
            table.insert("seed".into(), toml::Value::Integer(seed_as_i64(seed)?));
        }
        merge_tables(&mut table, &self.train);
        let mut cfg: TrainConfig = toml::Value::Table(table).try_into().map_err(|e| {
            Error::Config(format!("{}: bad train settings: {e}", self.display_name()))
        })?;
        cfg.n_dim = signal.n;
        cfg.m_dim = signal.m;
        cfg.k_width = point.k_width;
        cfg.num_levels = point.levels;
        cfg.use_encoder = self.kind == MethodKind::Deepvqcs;
        if let Some(frac) = self.anneal_fraction {
            if !(frac > 0.0 && frac <= 1.0) {
                return config(format!("anneal_fraction must lie in (0, 1], got {frac}"));
            }
            cfg.anneal = cfg.anneal.fitted_to(cfg.max_iters, frac);
        }
        cfg.validate()?;
        Ok(cfg)
    }

    fn ce_spec(&self, point: &OperatingPoint, seed: u64) -> Result<CePipelineSpec> {
        let mut spec = match self.kind {
            MethodKind::CeUsqOmp => {
                CePipelineSpec::scalar(QuantizerKind::UniformSq, DecoderKind::Omp, point.levels)
            }
            MethodKind::CeUsqL1 => {
                CePipelineSpec::scalar(QuantizerKind::UniformSq, DecoderKind::Bpdn, point.levels)
            }
            MethodKind::CeSqL1 => {
                CePipelineSpec::scalar(QuantizerKind::LloydSq, DecoderKind::Bpdn, point.levels)
            }
            MethodKind::CeVqL1 => {
                let bits = point.codebook_bits.unwrap_or(bits_per_index(point.levels));
                CePipelineSpec::vector(DecoderKind::Bpdn, bits)
            }
            k => return config(format!("{} is not a designed CE pipeline", k.label())),
        };
        spec.mu_qc = self.mu_qc;
        spec.seed = seed;
        Ok(spec)
    }
}

fn integral(value: f64, label: &str, rate: f64) -> Result<u64> {
    let rounded = value.round();
    if (value - rounded).abs() > 1e-9 || rounded < 0.0 {
        return config(format!(
            "{label}: rate {rate} does not give a whole number of bits"
        ));
    }
    Ok(rounded as u64)
}

fn seed_as_i64(seed: u64) -> Result<i64> {
    i64::try_from(seed)
        .map_err(|_| Error::Config(format!("seed {seed} exceeds the signed 64-bit range")))
}

fn merge_tables(base: &mut toml::Table, over: &toml::Table) {
    for (key, value) in over {
        match (base.get_mut(key), value) {
            (Some(toml::Value::Table(b)), toml::Value::Table(o)) => merge_tables(b, o),
            _ => {
                base.insert(key.clone(), value.clone());
            }
        }
    }
}

/// Width, levels and (for vector quantizers) codebook bits of one run.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct OperatingPoint {
    pub k_width: usize,
    pub levels: usize,
    pub codebook_bits: Option<u32>,
}

impl OperatingPoint {
    pub fn scalar(k_width: usize, levels: usize) -> Self {
        Self {
            k_width,
            levels,
            codebook_bits: None,
        }
    }

    pub fn vector(dim: usize, codebook_bits: u32) -> Self {
        Self {
            k_width: dim,
            levels: 1usize << codebook_bits,
            codebook_bits: Some(codebook_bits),
        }
    }

    /// `K ceil(log2 I) / N`, or codebook bits over `N`.
    pub fn rate(&self, n_dim: usize) -> f64 {
        match self.codebook_bits {
            Some(b) => b as f64 / n_dim as f64,
            None => rate_bits(self.k_width, self.levels, n_dim),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ExperimentConfig {
    pub signal: SignalConfig,
    #[serde(default)]
    pub data: DataConfig,
    #[serde(default)]
    pub output: OutputConfig,
    #[serde(default)]
    pub bench: BenchConfig,
    #[serde(default)]
    pub methods: Vec<MethodConfig>,
}

impl ExperimentConfig {
    pub fn from_toml(text: &str) -> Result<Self> {
        let cfg: Self = toml::from_str(text).map_err(|e| Error::Config(e.to_string()))?;
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn load(path: impl AsRef<Path>) -> Result<Self> {
        let path = path.as_ref();
        let text = std::fs::read_to_string(path)?;
        Self::from_toml(&text).map_err(|e| Error::Config(format!("{}: {e}", path.display())))
    }

    pub fn validate(&self) -> Result<()> {
        let sig = &self.signal;
        if sig.n == 0 || sig.m == 0 || sig.m > sig.n || sig.s > sig.n {
            return config(format!(
                "need 0 < M <= N and S <= N, got N={} M={} S={}",
                sig.n, sig.m, sig.s
            ));
        }
        if !(sig.noise_variance >= 0.0 && sig.noise_variance.is_finite()) {
            return config("noise variance must be finite and non-negative");
        }
        if self.data.train == 0 || self.data.val == 0 || self.data.test == 0 {
            return config("dataset sizes must be positive");
        }
        if self.data.seeds.is_empty() {
            return config("at least one seed is required");
        }
        for &s in &self.data.seeds {
            seed_as_i64(s)?;
        }
        if self.bench.repetitions < MIN_BENCH_REPETITIONS {
            return config(format!(
                "bench repetitions must be at least {MIN_BENCH_REPETITIONS}"
            ));
        }
        for method in &self.methods {
            for point in method.points(sig)? {
                if method.kind.is_trained() {
                    method.train_config(sig, &point, self.data.seeds[0])?;
                } else if method.kind != MethodKind::EcVq {
                    method.ce_spec(&point, 0)?;
                }
            }
        }
        Ok(())
    }
}

/// Train, validation and test splits drawn for one seed.
#[derive(Debug, Clone)]
pub struct Splits {
    pub train: Dataset,
    pub val: Dataset,
    pub test: Dataset,
}

pub fn generate_splits(cfg: &ExperimentConfig, seed: u64) -> Result<Splits> {
    let model = cfg.signal.model()?;
    let spec = cfg.signal.source();
    Ok(Splits {
        train: sample_dataset(&model, &spec, cfg.data.train, derive_seed(seed, 1))?,
        val: sample_dataset(&model, &spec, cfg.data.val, derive_seed(seed, 2))?,
        test: sample_dataset(&model, &spec, cfg.data.test, derive_seed(seed, 3))?,
    })
}

/// Any online encoder/decoder pair.
#[derive(Debug, Clone)]
pub enum Codec {
    Deep(DeepVqcsModel),
    Ce(CeCodec),
    EcVq(EcVqCodec),
}

impl Codec {
    pub fn encode(&self, y: &DVector<f64>) -> Result<Vec<usize>> {
        match self {
            Self::Deep(m) => compress(m, y),
            Self::Ce(c) => c.encode(y),
            Self::EcVq(c) => c.encode(y),
        }
    }

    pub fn decode(&self, indices: &[usize]) -> Result<DVector<f64>> {
        match self {
            Self::Deep(m) => reconstruct(m, indices),
            Self::Ce(c) => c.decode(indices),
            Self::EcVq(c) => c.decode(indices),
        }
    }
}

/// NMSE and mean per-vector encode/decode seconds over a dataset.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Evaluation {
    pub nmse_db: f64,
    pub encode_secs: f64,
    pub decode_secs: f64,
}

pub fn evaluate_codec(codec: &Codec, data: &Dataset) -> Result<Evaluation> {
    if data.is_empty() {
        return config("cannot evaluate on an empty dataset");
    }
    let mut acc = NmseAccumulator::default();
    let (mut enc, mut dec) = (0.0, 0.0);
    for k in 0..data.len() {
        let y = data.measurement(k).into_owned();
        let t0 = Instant::now();
        let idx = codec.encode(&y)?;
        let t1 = Instant::now();
        let est = codec.decode(&idx)?;
        dec += t1.elapsed().as_secs_f64();
        enc += (t1 - t0).as_secs_f64();
        acc.add(est.as_view(), data.source(k));
    }
    let n = data.len() as f64;
    Ok(Evaluation {
        nmse_db: acc.nmse_db()?,
        encode_secs: enc / n,
        decode_secs: dec / n,
    })
}

/// A designed or trained codec, plus the checkpoint written for it.
pub struct BuiltCodec {
    pub codec: Codec,
    pub checkpoint: Option<PathBuf>,
}

pub fn checkpoint_name(method: &MethodConfig, point: &OperatingPoint, seed: u64) -> String {
    let slug: String = method
        .display_name()
        .chars()
        .map(|c| {
            if c.is_ascii_alphanumeric() {
                c.to_ascii_lowercase()
            } else {
                '_'
            }
        })
        .collect();
    format!(
        "{slug}_k{}_i{}_seed{seed}.ckpt",
        point.k_width, point.levels
    )
}

/// Trains or designs one method at one point. Trained models are saved
/// under `checkpoint_dir` when given.
pub fn build_codec(
    cfg: &ExperimentConfig,
    method: &MethodConfig,
    point: &OperatingPoint,
    splits: &Splits,
    seed: u64,
    checkpoint_dir: Option<&Path>,
) -> Result<BuiltCodec> {
    let model = cfg.signal.model()?;
    let sig = &cfg.signal;
    match method.kind {
        MethodKind::Deepvqcs | MethodKind::CeDecnet => {
            let tcfg = method.train_config(sig, point, seed)?;
            let (trained, report) = if method.kind == MethodKind::Deepvqcs {
                train(&tcfg, &splits.train, &splits.val)?
            } else {
                let mut spec = CePipelineSpec::scalar(
                    QuantizerKind::UniformSq,
                    DecoderKind::Decnet,
                    point.levels,
                );
                spec.decnet = Some(tcfg.clone());
                train_ce_decnet(&spec, &model, &splits.train, &splits.val)?
            };
            log::info!(
                "{} K={} I={}: best validation {:.3} dB at iteration {}",
                method.display_name(),
                point.k_width,
                point.levels,
                report.best_val_nmse_db,
                report.best_iteration
            );
            let checkpoint = match checkpoint_dir {
                Some(dir) => {
                    std::fs::create_dir_all(dir)?;
                    let path = dir.join(checkpoint_name(method, point, seed));
                    let ckpt = Checkpoint {
                        model: trained.clone(),
                        config: tcfg,
                        iterations: report.iterations_run,
                    };
                    ckpt.save(&path)?;
                    Some(path)
                }
                None => None,
            };
            Ok(BuiltCodec {
                codec: Codec::Deep(trained),
                checkpoint,
            })
        }
        MethodKind::EcVq => {
            let bits = point.codebook_bits.unwrap_or(bits_per_index(point.levels));
            let codec = EcVqCodec::design(&model, &splits.train, bits, seed)?;
            Ok(BuiltCodec {
                codec: Codec::EcVq(codec),
                checkpoint: None,
            })
        }
        _ => {
            let spec = method.ce_spec(point, seed)?;
            let codec = CeCodec::design(&spec, &model, &splits.train, sig.s)?;
            Ok(BuiltCodec {
                codec: Codec::Ce(codec),
                checkpoint: None,
            })
        }
    }
}

/// One CSV row of a sweep. Failed runs keep their configuration columns,
/// carry `NaN` NMSE and zero times, and describe the failure in `status`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ResultRow {
    pub method: String,
    pub n: usize,
    pub m: usize,
    pub s: usize,
    pub k: usize,
    pub levels: usize,
    pub codebook_bits: Option<u32>,
    pub rate: f64,
    pub nmse_db: f64,
    pub encode_time_s: f64,
    pub decode_time_s: f64,
    pub total_time_s: f64,
    pub seed: u64,
    pub checkpoint: String,
    pub status: String,
}

pub const STATUS_OK: &str = "ok";

impl ResultRow {
    fn new(sig: &SignalConfig, method: &MethodConfig, point: &OperatingPoint, seed: u64) -> Self {
        Self {
            method: method.display_name(),
            n: sig.n,
            m: sig.m,
            s: sig.s,
            k: point.k_width,
            levels: point.levels,
            codebook_bits: point.codebook_bits,
            rate: point.rate(sig.n),
            nmse_db: f64::NAN,
            encode_time_s: 0.0,
            decode_time_s: 0.0,
            total_time_s: 0.0,
            seed,
            checkpoint: String::new(),
            status: STATUS_OK.into(),
        }
    }

    pub fn is_ok(&self) -> bool {
        self.status == STATUS_OK
    }

    /// Rate recomputed from the width, levels and codebook columns.
    pub fn expected_rate(&self) -> f64 {
        match self.codebook_bits {
            Some(b) => b as f64 / self.n as f64,
            None => rate_bits(self.k, self.levels, self.n),
        }
    }
}

pub fn run_method_point(
    cfg: &ExperimentConfig,
    method: &MethodConfig,
    point: &OperatingPoint,
    splits: &Splits,
    seed: u64,
) -> ResultRow {
    let mut row = ResultRow::new(&cfg.signal, method, point, seed);
    let outcome = build_codec(
        cfg,
        method,
        point,
        splits,
        seed,
        cfg.output.checkpoint_dir.as_deref(),
    )
    .and_then(|built| {
        Ok((
            evaluate_codec(&built.codec, &splits.test)?,
            built.checkpoint,
        ))
    });
    match outcome {
        Ok((eval, ckpt)) => {
            row.nmse_db = eval.nmse_db;
            row.encode_time_s = eval.encode_secs;
            row.decode_time_s = eval.decode_secs;
            row.total_time_s = eval.encode_secs + eval.decode_secs;
            row.checkpoint = ckpt.map(|p| p.display().to_string()).unwrap_or_default();
        }
        Err(e) => {
            log::error!("{} at R={:.4} failed: {e}", row.method, row.rate);
            row.status = format!("failed: {e}");
        }
    }
    row
}

/// Runs every method at every point for every seed. Datasets are drawn once
/// per seed and shared by all methods; a failing run yields a failed row and
/// the sweep continues. Rows are written to `output.csv` when set.
pub fn run_experiment(cfg: &ExperimentConfig) -> Result<Vec<ResultRow>> {
    cfg.validate()?;
    let mut rows = Vec::new();
    for &seed in &cfg.data.seeds {
        let splits = generate_splits(cfg, seed)?;
        for method in &cfg.methods {
            for point in method.points(&cfg.signal)? {
                let row = run_method_point(cfg, method, &point, &splits, seed);
                log::info!("{} R={:.4}: {:.3} dB", row.method, row.rate, row.nmse_db);
                rows.push(row);
            }
        }
    }
    if let Some(path) = &cfg.output.csv {
        write_rows(path, &rows)?;
    }
    Ok(rows)
}

pub fn write_rows<T: Serialize>(path: impl AsRef<Path>, rows: &[T]) -> Result<()> {
    let path = path.as_ref();
    if let Some(dir) = path.parent().filter(|d| !d.as_os_str().is_empty()) {
        std::fs::create_dir_all(dir)?;
    }
    let mut w = csv::Writer::from_path(path)?;
    for row in rows {
        w.serialize(row)?;
    }
    w.flush()?;
    Ok(())
}

pub fn read_rows<T: for<'de> Deserialize<'de>>(path: impl AsRef<Path>) -> Result<Vec<T>> {
    let mut r = csv::Reader::from_path(path)?;
    Ok(r.deserialize()
        .collect::<std::result::Result<Vec<T>, _>>()?)
}

/// Median per-vector online times of one method, and the same times
/// divided by the DeepVQCS reference.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TimingRow {
    pub method: String,
    pub n: usize,
    pub m: usize,
    pub s: usize,
    pub k: usize,
    pub levels: usize,
    pub codebook_bits: Option<u32>,
    pub rate: f64,
    pub encode_s: f64,
    pub decode_s: f64,
    pub total_s: f64,
    pub encode_ratio: Option<f64>,
    pub decode_ratio: Option<f64>,
    pub total_ratio: Option<f64>,
}

fn median(values: &mut [f64]) -> f64 {
    values.sort_by(f64::total_cmp);
    let n = values.len();
    if n % 2 == 1 {
        values[n / 2]
    } else {
        0.5 * (values[n / 2 - 1] + values[n / 2])
    }
}

/// Median encode, decode and total seconds over single-vector passes, after
/// `warmup` untimed passes. Pass `r` uses test vector `r mod len`.
pub fn time_codec(codec: &Codec, data: &Dataset, bench: &BenchConfig) -> Result<(f64, f64, f64)> {
    if data.is_empty() {
        return config("cannot time on an empty dataset");
    }
    let reps = bench.repetitions.max(1);
    for r in 0..bench.warmup {
        let y = data.measurement(r % data.len()).into_owned();
        std::hint::black_box(codec.decode(&codec.encode(&y)?)?);
    }
    let (mut enc, mut dec, mut tot) = (
        Vec::with_capacity(reps),
        Vec::with_capacity(reps),
        Vec::with_capacity(reps),
    );
    for r in 0..reps {
        let y = data.measurement(r % data.len()).into_owned();
        let t0 = Instant::now();
        let idx = std::hint::black_box(codec.encode(&y)?);
        let t1 = Instant::now();
        std::hint::black_box(codec.decode(&idx)?);
        let t2 = Instant::now();
        enc.push((t1 - t0).as_secs_f64());
        dec.push((t2 - t1).as_secs_f64());
        tot.push((t2 - t0).as_secs_f64());
    }
    Ok((median(&mut enc), median(&mut dec), median(&mut tot)))
}

/// Fills the ratio columns relative to the first DeepVQCS row.
pub fn normalize_timings(rows: &mut [TimingRow], reference: Option<usize>) {
    let Some(base) = reference.map(|i| (rows[i].encode_s, rows[i].decode_s, rows[i].total_s))
    else {
        log::warn!("no DeepVQCS timing to normalize against");
        return;
    };
    let ratio = |a: f64, b: f64| if b > 0.0 { Some(a / b) } else { None };
    for row in rows.iter_mut() {
        row.encode_ratio = ratio(row.encode_s, base.0);
        row.decode_ratio = ratio(row.decode_s, base.1);
        row.total_ratio = ratio(row.total_s, base.2);
    }
}

/// Online-phase timing. Trained methods are loaded from `checkpoints`
/// (matched by encoder flag, width and levels) and skipped with a warning
/// when missing; the other methods are designed on the first seed's
/// training split. Rows are written to `output.timing_csv` when set.
pub fn bench_runtime(cfg: &ExperimentConfig, checkpoints: &[PathBuf]) -> Result<Vec<TimingRow>> {
    cfg.validate()?;
    let seed = cfg.data.seeds[0];
    let splits = generate_splits(cfg, seed)?;
    let mut loaded = Vec::new();
    for path in checkpoints {
        match Checkpoint::load(path) {
            Ok(c) => loaded.push(c),
            Err(e) => log::warn!("skipping checkpoint {}: {e}", path.display()),
        }
    }
    let sig = &cfg.signal;
    let mut rows = Vec::new();
    let mut reference = None;
    for method in &cfg.methods {
        for point in method.points(sig)? {
            let codec = if method.kind.is_trained() {
                let encoder = method.kind == MethodKind::Deepvqcs;
                let found = loaded.iter().find(|c| {
                    c.config.use_encoder == encoder
                        && c.model.k_width() == point.k_width
                        && c.model.num_levels() == point.levels
                        && c.model.n_dim() == sig.n
                        && c.model.m_dim() == sig.m
                });
                match found {
                    Some(c) => Codec::Deep(c.model.clone()),
                    None => {
                        log::warn!(
                            "no checkpoint for {} K={} I={}; skipped",
                            method.display_name(),
                            point.k_width,
                            point.levels
                        );
                        continue;
                    }
                }
            } else {
                build_codec(cfg, method, &point, &splits, seed, None)?.codec
            };
            let (encode_s, decode_s, total_s) = time_codec(&codec, &splits.test, &cfg.bench)?;
            if reference.is_none() && method.kind == MethodKind::Deepvqcs {
                reference = Some(rows.len());
            }
            rows.push(TimingRow {
                method: method.display_name(),
                n: sig.n,
                m: sig.m,
                s: sig.s,
                k: point.k_width,
                levels: point.levels,
                codebook_bits: point.codebook_bits,
                rate: point.rate(sig.n),
                encode_s,
                decode_s,
                total_s,
                encode_ratio: None,
                decode_ratio: None,
                total_ratio: None,
            });
        }
    }
    normalize_timings(&mut rows, reference);
    if let Some(path) = &cfg.output.timing_csv {
        write_rows(path, &rows)?;
    }
    Ok(rows)
}

#[cfg(test)]
mod tests {
    use super::*;

    fn desk(methods: &str) -> ExperimentConfig {
        ExperimentConfig::from_toml(&format!(
            "signal.n = 20\nsignal.m = 10\nsignal.s = 2\nsignal.noise_variance = 1e-4\n\
             data.train = 2000\ndata.val = 200\ndata.test = 500\ndata.seeds = [4]\n{methods}"
        ))
        .unwrap()
    }

    #[test]
    fn dotted_and_table_forms_agree() {
        let a = desk("");
        let b = ExperimentConfig::from_toml(
            "[signal]\nn = 20\nm = 10\ns = 2\nnoise_variance = 1e-4\n[data]\ntrain = 2000\nval = 200\ntest = 500\nseeds = [4]\n",
        )
        .unwrap();
        assert_eq!(a, b);
    }

    #[test]
    fn rates_map_to_levels() {
        let cfg = desk("[[methods]]\nkind = \"deepvqcs\"\nrates = [3.0]\nk = [10, 15, 20]\n");
        let pts = cfg.methods[0].points(&cfg.signal).unwrap();
        let levels: Vec<usize> = pts.iter().map(|p| p.levels).collect();
        assert_eq!(levels, vec![64, 16, 8]);
        assert!(pts.iter().all(|p| p.rate(20) == 3.0));
    }

    #[test]
    fn fractional_bits_rejected() {
        let text = "signal = { n = 7, m = 4, s = 1, noise_variance = 0.01 }\n[[methods]]\nkind = \"ce_usq_l1\"\nrates = [1.0]\n";
        assert!(matches!(
            ExperimentConfig::from_toml(text),
            Err(Error::Config(_))
        ));
    }

    #[test]
    fn vector_points_use_codebook_bits() {
        let text = "signal = { n = 7, m = 4, s = 1, noise_variance = 0.01 }\n[[methods]]\nkind = \"ec_vq\"\nrates = [1.0]\ncodebook_bits = [3]\n";
        let cfg = ExperimentConfig::from_toml(text).unwrap();
        let pts = cfg.methods[0].points(&cfg.signal).unwrap();
        assert_eq!(
            pts,
            vec![OperatingPoint::vector(7, 7), OperatingPoint::vector(7, 3)]
        );
        assert_eq!(pts[0].rate(7), 1.0);
    }

    #[test]
    fn train_overrides_merge_deeply() {
        let cfg = desk(
            "[[methods]]\nkind = \"deepvqcs\"\nlevels = [4]\nanneal_fraction = 0.5\n\
             train = { max_iters = 1000, net_steps = { eta = 0.02 } }\n",
        );
        let m = &cfg.methods[0];
        let tc = m
            .train_config(&cfg.signal, &m.points(&cfg.signal).unwrap()[0], 4)
            .unwrap();
        assert_eq!(tc.max_iters, 1000);
        assert_eq!(tc.net_steps.eta, 0.02);
        assert_eq!(tc.net_steps.eta_min, 1e-4);
        assert_eq!(tc.seed, 4);
        assert_eq!(
            tc.anneal,
            crate::shq::AnnealSchedule::standard().fitted_to(1000, 0.5)
        );
    }

    #[test]
    fn unknown_train_key_is_a_config_error() {
        let text = "signal = { n = 20, m = 10, s = 2, noise_variance = 1e-4 }\n[[methods]]\nkind = \"deepvqcs\"\nlevels = [2]\ntrain = { bogus = 1 }\n";
        assert!(matches!(
            ExperimentConfig::from_toml(text),
            Err(Error::Config(_))
        ));
    }

    #[test]
    fn short_bench_rejected() {
        let text =
            "signal = { n = 20, m = 10, s = 2, noise_variance = 1e-4 }\nbench.repetitions = 5\n";
        assert!(ExperimentConfig::from_toml(text).is_err());
    }

    #[test]
    fn omp_sweep_is_rate_monotone() {
        let cfg = desk("[[methods]]\nkind = \"ce_usq_omp\"\nrates = [1.0, 2.5, 4.0]\n");
        let rows = run_experiment(&cfg).unwrap();
        assert_eq!(rows.len(), 3);
        assert!(rows
            .iter()
            .all(|r| r.is_ok() && r.rate == r.expected_rate()));
        assert!(
            rows.windows(2).all(|w| w[1].nmse_db <= w[0].nmse_db),
            "{rows:?}"
        );
    }

    #[test]
    fn failed_method_does_not_stop_the_sweep() {
        let mut cfg = desk("[[methods]]\nkind = \"ec_vq\"\ncodebook_bits = [2]\n[[methods]]\nkind = \"ce_usq_omp\"\nlevels = [4]\n");
        // C(20, 2) supports is fine; push past the enumeration guard instead.
        cfg.signal = SignalConfig {
            n: 40,
            m: 20,
            s: 6,
            noise_variance: 1e-4,
        };
        let rows = run_experiment(&cfg).unwrap();
        assert_eq!(rows.len(), 2);
        assert!(rows[0].status.starts_with("failed"));
        assert!(rows[0].nmse_db.is_nan());
        assert!(rows[1].is_ok());
    }

    #[test]
    fn rows_round_trip_through_csv() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("rows.csv");
        let mut cfg = desk("[[methods]]\nkind = \"ce_usq_omp\"\nlevels = [8]\n[[methods]]\nkind = \"ce_vq_l1\"\ncodebook_bits = [4]\n");
        cfg.output.csv = Some(path.clone());
        let rows = run_experiment(&cfg).unwrap();
        let back: Vec<ResultRow> = read_rows(&path).unwrap();
        assert_eq!(rows, back);
        assert_eq!(back[1].codebook_bits, Some(4));
        assert_eq!(back[1].rate, 0.2);
    }

    #[test]
    fn timings_normalize_to_reference() {
        let mk = |name: &str, e: f64, d: f64| TimingRow {
            method: name.into(),
            n: 1,
            m: 1,
            s: 1,
            k: 1,
            levels: 2,
            codebook_bits: None,
            rate: 1.0,
            encode_s: e,
            decode_s: d,
            total_s: e + d,
            encode_ratio: None,
            decode_ratio: None,
            total_ratio: None,
        };
        let mut rows = vec![mk("DeepVQCS", 2e-6, 4e-6), mk("CE-USQ-L1", 1e-6, 4e-4)];
        normalize_timings(&mut rows, Some(0));
        assert_eq!(rows[0].encode_ratio, Some(1.0));
        assert_eq!(rows[0].decode_ratio, Some(1.0));
        assert_eq!(rows[0].total_ratio, Some(1.0));
        assert!((rows[1].decode_ratio.unwrap() - 100.0).abs() < 1e-9);
        assert!((rows[1].total_ratio.unwrap() - 4.01e-4 / 6e-6).abs() < 1e-9);
    }

    #[test]
    fn median_of_even_and_odd() {
        assert_eq!(median(&mut [3.0, 1.0, 2.0]), 2.0);
        assert_eq!(median(&mut [4.0, 1.0, 2.0, 3.0]), 2.5);
    }
}
