//! End-to-end training of the encoder net, soft-to-hard quantizer and decoder
//! net; validation through the hard quantizer; and the online compress /
//! reconstruct path.

use std::fs::File;
use std::io::{BufReader, BufWriter, Read, Write};
use std::path::Path;
use std::time::Instant;

use nalgebra::{DMatrix, DVector};
use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::binfmt;
use crate::error::{config, shape, Error, Result};
use crate::nnet::{
    adam_step, backprop_batch, forward_batch, init_net, AdamConfig, AdamState, BatchGradients,
    FeedforwardNet,
};
use crate::quantizer::{sq_decode, sq_encode, ScalarQuantizer};
use crate::rng::substream;
use crate::shq::{
    blend_at, build_quantizer, shifts_at, shq_backward_batch, shq_forward_batch, steepness_at,
    AnnealSchedule, ShqGradients, ShqLayer,
};
use crate::signal::{Dataset, NmseAccumulator};

const CHECKPOINT_MAGIC: &[u8; 8] = b"QCSCKPT\0";
const CHECKPOINT_VERSION: u64 = 1;
const MAX_CONFIG_ECHO: usize = 1 << 20;

const STREAM_ENC_INIT: u64 = 0;
const STREAM_DEC_INIT: u64 = 1;
const STREAM_BATCHES: u64 = 2;

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct StepSizes {
    pub eta: f64,
    pub eta_min: f64,
}

impl StepSizes {
    fn adam(self) -> AdamConfig {
        AdamConfig::with_steps(self.eta, self.eta_min)
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct TrainConfig {
    pub n_dim: usize,
    pub m_dim: usize,
    pub k_width: usize,
    pub num_levels: usize,
    /// Without an encoder net the quantizer acts on the measurements
    /// directly, so `k_width` must equal `m_dim`.
    pub use_encoder: bool,
    pub enc_hidden: Vec<usize>,
    pub dec_hidden: Vec<usize>,
    pub batch_size: usize,
    pub max_iters: u64,
    pub anneal: AnnealSchedule,
    pub net_steps: StepSizes,
    pub level_steps: StepSizes,
    pub learn_shifts: bool,
    pub shift_steps: StepSizes,
    pub val_period: u64,
    pub patience: u64,
    pub min_improvement_db: f64,
    /// Window length for the smoothed training-cost trace.
    pub cost_window: u64,
    pub seed: u64,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self::standard(20, 10, 10, 2)
    }
}

impl TrainConfig {
    /// Encoder `[M, 5K, K]`, decoder `[K, 4N, 4N, 4N, N]`, batches of 100.
    pub fn standard(n_dim: usize, m_dim: usize, k_width: usize, num_levels: usize) -> Self {
        Self {
            n_dim,
            m_dim,
            k_width,
            num_levels,
            use_encoder: true,
            enc_hidden: vec![5 * k_width],
            dec_hidden: vec![4 * n_dim; 3],
            batch_size: 100,
            max_iters: 200_000,
            anneal: AnnealSchedule::standard(),
            net_steps: StepSizes {
                eta: 1e-2,
                eta_min: 1e-4,
            },
            level_steps: StepSizes {
                eta: 5e-5,
                eta_min: 5e-7,
            },
            learn_shifts: false,
            shift_steps: StepSizes {
                eta: 5e-5,
                eta_min: 5e-7,
            },
            val_period: 1000,
            patience: 20,
            min_improvement_db: 0.05,
            cost_window: 1000,
            seed: 0,
        }
    }

    pub fn enc_widths(&self) -> Vec<usize> {
        let mut w = vec![self.m_dim];
        w.extend(&self.enc_hidden);
        w.push(self.k_width);
        w
    }

    pub fn dec_widths(&self) -> Vec<usize> {
        let mut w = vec![self.k_width];
        w.extend(&self.dec_hidden);
        w.push(self.n_dim);
        w
    }

    pub fn validate(&self) -> Result<()> {
        if self.n_dim == 0 || self.m_dim == 0 || self.k_width == 0 {
            return config("N, M and K must be positive");
        }
        if self.num_levels < 2 {
            return config(format!(
                "need at least 2 quantization levels, got {}",
                self.num_levels
            ));
        }
        if !self.use_encoder && self.k_width != self.m_dim {
            return config(format!(
                "without an encoder K must equal M, got K={} M={}",
                self.k_width, self.m_dim
            ));
        }
        if self.enc_hidden.contains(&0) || self.dec_hidden.contains(&0) {
            return config("hidden widths must be positive");
        }
        if self.batch_size == 0
            || self.max_iters == 0
            || self.val_period == 0
            || self.cost_window == 0
        {
            return config("batch size, iteration budget and periods must be positive");
        }
        for s in [self.net_steps, self.level_steps, self.shift_steps] {
            if !(s.eta > 0.0 && s.eta_min >= 0.0 && s.eta.is_finite() && s.eta_min.is_finite()) {
                return config("step sizes must be positive and finite");
            }
        }
        // Checkpoints echo the config as TOML, whose integers are signed.
        if self.seed > i64::MAX as u64 || self.max_iters > i64::MAX as u64 {
            return config("seed and iteration budget must fit in a signed 64-bit integer");
        }
        self.anneal.validate()
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct DeepVqcsModel {
    pub enc_net: Option<FeedforwardNet>,
    pub shq: ShqLayer,
    pub dec_net: FeedforwardNet,
    pub hard_q: Option<ScalarQuantizer>,
}

impl DeepVqcsModel {
    pub fn init(cfg: &TrainConfig) -> Result<Self> {
        cfg.validate()?;
        let enc_net = if cfg.use_encoder {
            let widths = cfg.enc_widths();
            let acts = FeedforwardNet::tanh_hidden(&widths);
            Some(init_net(
                &widths,
                &acts,
                &mut substream(cfg.seed, STREAM_ENC_INIT),
            )?)
        } else {
            None
        };
        let widths = cfg.dec_widths();
        let acts = FeedforwardNet::tanh_hidden(&widths);
        let dec_net = init_net(&widths, &acts, &mut substream(cfg.seed, STREAM_DEC_INIT))?;
        let shq = ShqLayer::initial(cfg.num_levels, steepness_at(&cfg.anneal, 0))?;
        Ok(Self {
            enc_net,
            shq,
            dec_net,
            hard_q: None,
        })
    }

    pub fn m_dim(&self) -> usize {
        match &self.enc_net {
            Some(net) => net.input_width(),
            None => self.dec_net.input_width(),
        }
    }

    pub fn k_width(&self) -> usize {
        self.dec_net.input_width()
    }

    pub fn n_dim(&self) -> usize {
        self.dec_net.output_width()
    }

    pub fn num_levels(&self) -> usize {
        self.shq.num_levels
    }

    pub fn validate(&self) -> Result<()> {
        if let Some(enc) = &self.enc_net {
            enc.validate()?;
            if enc.output_width() != self.k_width() {
                return shape(format!(
                    "encoder width {} != decoder input {}",
                    enc.output_width(),
                    self.k_width()
                ));
            }
        }
        self.dec_net.validate()?;
        self.shq.validate()?;
        if let Some(q) = &self.hard_q {
            if q.num_levels() != self.shq.num_levels {
                return shape("hard quantizer level count differs from the SHQ layer");
            }
        }
        Ok(())
    }

    /// Rebuilds the hard quantizer from the current SHQ parameters.
    pub fn refresh_quantizer(&mut self) -> Result<()> {
        self.hard_q = Some(build_quantizer(&self.shq)?);
        Ok(())
    }

    fn quantizer(&self) -> Result<&ScalarQuantizer> {
        self.hard_q
            .as_ref()
            .ok_or_else(|| Error::State("model has no hard quantizer yet".into()))
    }

    /// Hard-quantized estimate of `x` from one measurement vector.
    pub fn estimate(&self, y: &DVector<f64>) -> Result<DVector<f64>> {
        reconstruct(self, &compress(self, y)?)
    }
}

/// Per-checkpoint training record.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TrainRecord {
    pub iteration: u64,
    pub steepness: f64,
    pub blend: f64,
    /// Mean minibatch cost since the previous record.
    pub train_cost: f64,
    pub val_nmse_db: f64,
    pub elapsed_secs: f64,
}

#[derive(Debug, Clone, PartialEq, Default)]
pub struct TrainReport {
    pub records: Vec<TrainRecord>,
    /// Mean minibatch cost over consecutive `cost_window` iterations.
    pub cost_windows: Vec<f64>,
    pub iterations_run: u64,
    pub best_iteration: u64,
    pub best_val_nmse_db: f64,
    pub stopped_early: bool,
    pub diverged_at: Option<u64>,
}

/// Mean squared-error cost of a batch and its gradients with respect to every
/// trainable quantity.
#[derive(Debug, Clone, PartialEq)]
pub struct ModelGradients {
    pub cost: f64,
    pub enc: Option<BatchGradients>,
    pub dec: BatchGradients,
    pub shq: ShqGradients<DMatrix<f64>>,
}

/// Soft forward and backward pass over a batch (`y` is `M x B`, `x` is
/// `N x B`). The cost is `(1/B) sum_b ||p_b - x_b||^2`.
pub fn loss_gradients(
    model: &DeepVqcsModel,
    y: &DMatrix<f64>,
    x: &DMatrix<f64>,
    beta_t: f64,
) -> Result<ModelGradients> {
    if y.nrows() != model.m_dim() || x.nrows() != model.n_dim() || y.ncols() != x.ncols() {
        return shape(format!(
            "batch shapes {:?} / {:?} do not fit the model",
            y.shape(),
            x.shape()
        ));
    }
    let batch = y.ncols() as f64;
    let enc_trace = match &model.enc_net {
        Some(net) => Some(forward_batch(net, y)?),
        None => None,
    };
    let a = match &enc_trace {
        Some(trace) => trace.output(),
        None => y,
    };
    let shq_cache = shq_forward_batch(&model.shq, a);
    let dec_trace = forward_batch(&model.dec_net, &shq_cache.output)?;
    let err = dec_trace.output() - x;
    let cost = err.norm_squared() / batch;
    let out_grad = err * (2.0 / batch);
    let dec = backprop_batch(&model.dec_net, &dec_trace, &out_grad)?;
    let shq = shq_backward_batch(&model.shq, a, &shq_cache, &dec.input_grads, beta_t)?;
    let enc = match (&model.enc_net, &enc_trace) {
        (Some(net), Some(trace)) => Some(backprop_batch(net, trace, &shq.xi)?),
        _ => None,
    };
    Ok(ModelGradients {
        cost,
        enc,
        dec,
        shq,
    })
}

struct Optimizers {
    enc: Option<AdamState>,
    dec: AdamState,
    levels: AdamState,
    shifts: AdamState,
}

fn gather(src: &DMatrix<f64>, idx: &[usize]) -> DMatrix<f64> {
    let mut out = DMatrix::zeros(src.nrows(), idx.len());
    for (j, &k) in idx.iter().enumerate() {
        out.set_column(j, &src.column(k));
    }
    out
}

fn check_dataset(cfg: &TrainConfig, data: &Dataset, what: &str) -> Result<()> {
    if data.n_dim() != cfg.n_dim || data.m_dim() != cfg.m_dim {
        return shape(format!(
            "{what} set is N={} M={}, config says N={} M={}",
            data.n_dim(),
            data.m_dim(),
            cfg.n_dim,
            cfg.m_dim
        ));
    }
    if data.is_empty() {
        return config(format!("{what} set is empty"));
    }
    Ok(())
}

/// Trains from a fresh initialization and returns the validation-best model
/// with its hard quantizer.
pub fn train(
    cfg: &TrainConfig,
    train_set: &Dataset,
    val_set: &Dataset,
) -> Result<(DeepVqcsModel, TrainReport)> {
    cfg.validate()?;
    check_dataset(cfg, train_set, "training")?;
    check_dataset(cfg, val_set, "validation")?;
    if cfg.batch_size > train_set.len() {
        return config(format!(
            "batch size {} exceeds {} training samples",
            cfg.batch_size,
            train_set.len()
        ));
    }
    let mut model = DeepVqcsModel::init(cfg)?;
    let mut opt = Optimizers {
        enc: model
            .enc_net
            .as_ref()
            .map(|net| AdamState::for_net(cfg.net_steps.adam(), net)),
        dec: AdamState::for_net(cfg.net_steps.adam(), &model.dec_net),
        levels: AdamState::new(cfg.level_steps.adam(), &[cfg.num_levels - 1]),
        shifts: AdamState::new(cfg.shift_steps.adam(), &[cfg.num_levels - 1]),
    };
    let mut rng = substream(cfg.seed, STREAM_BATCHES);
    let start = Instant::now();
    let mut report = TrainReport {
        best_val_nmse_db: f64::INFINITY,
        ..Default::default()
    };
    let mut best: Option<DeepVqcsModel> = None;
    let mut reference_db = f64::INFINITY;
    let mut stale_checks = 0u64;
    let (mut window_sum, mut window_len) = (0.0, 0u64);
    let (mut record_sum, mut record_len) = (0.0, 0u64);
    let mut idx = vec![0usize; cfg.batch_size];

    for t in 1..=cfg.max_iters {
        let h_t = steepness_at(&cfg.anneal, t);
        let beta_t = blend_at(&cfg.anneal, t);
        if cfg.learn_shifts {
            let ratio = h_t / model.shq.steepness_h;
            model.shq.shifts_s.iter_mut().for_each(|s| *s *= ratio);
        } else {
            model.shq.shifts_s = shifts_at(cfg.num_levels, h_t)?;
        }
        model.shq.steepness_h = h_t;

        for k in idx.iter_mut() {
            *k = rng.random_range(0..train_set.len());
        }
        let y = gather(&train_set.measurements, &idx);
        let x = gather(&train_set.sources, &idx);
        let step = loss_gradients(&model, &y, &x, beta_t).and_then(|g| {
            if !g.cost.is_finite() {
                return Err(Error::Divergence {
                    iteration: t,
                    reason: "non-finite cost".into(),
                });
            }
            apply_updates(cfg, &mut model, &mut opt, &g, t)?;
            Ok(g.cost)
        });
        let cost = match step {
            Ok(c) => c,
            Err(Error::Divergence { iteration, reason }) => {
                log::warn!("training diverged at iteration {iteration}: {reason}");
                report.iterations_run = t;
                report.diverged_at = Some(iteration);
                return match best {
                    Some(m) => Ok((m, report)),
                    None => Err(Error::Divergence { iteration, reason }),
                };
            }
            Err(e) => return Err(e),
        };
        window_sum += cost;
        window_len += 1;
        record_sum += cost;
        record_len += 1;
        if window_len == cfg.cost_window {
            report.cost_windows.push(window_sum / window_len as f64);
            window_sum = 0.0;
            window_len = 0;
        }
        report.iterations_run = t;

        if t % cfg.val_period == 0 || t == cfg.max_iters {
            model.refresh_quantizer()?;
            let val_db = validate_hard(&model, val_set)?;
            report.records.push(TrainRecord {
                iteration: t,
                steepness: h_t,
                blend: beta_t,
                train_cost: record_sum / record_len.max(1) as f64,
                val_nmse_db: val_db,
                elapsed_secs: start.elapsed().as_secs_f64(),
            });
            record_sum = 0.0;
            record_len = 0;
            log::debug!("iter {t}: h={h_t:.2} beta={beta_t:.3} cost={cost:.4e} val={val_db:.3} dB");
            if val_db < report.best_val_nmse_db {
                report.best_val_nmse_db = val_db;
                report.best_iteration = t;
                best = Some(model.clone());
            }
            if val_db < reference_db - cfg.min_improvement_db {
                reference_db = val_db;
                stale_checks = 0;
            } else {
                stale_checks += 1;
                if stale_checks >= cfg.patience {
                    report.stopped_early = t < cfg.max_iters;
                    break;
                }
            }
        }
    }
    let best = best.ok_or_else(|| Error::State("training produced no validated model".into()))?;
    log::info!(
        "trained {} iterations, best validation {:.3} dB at {}",
        report.iterations_run,
        report.best_val_nmse_db,
        report.best_iteration
    );
    Ok((best, report))
}

fn apply_updates(
    cfg: &TrainConfig,
    model: &mut DeepVqcsModel,
    opt: &mut Optimizers,
    g: &ModelGradients,
    t: u64,
) -> Result<()> {
    adam_step(&mut opt.dec, &mut model.dec_net, &g.dec, t)?;
    if let (Some(net), Some(state), Some(grads)) = (&mut model.enc_net, &mut opt.enc, &g.enc) {
        adam_step(state, net, grads, t)?;
    }
    opt.levels.update(
        &mut [model.shq.levels_v.as_mut_slice()],
        &[&g.shq.grad_v],
        t,
    )?;
    model.shq.clamp_levels();
    if cfg.learn_shifts {
        opt.shifts.update(
            &mut [model.shq.shifts_s.as_mut_slice()],
            &[&g.shq.grad_s],
            t,
        )?;
    }
    Ok(())
}

/// NMSE in dB of the hard-quantized pipeline over `data`, evaluated one
/// sample at a time exactly as [`compress`] and [`reconstruct`] do.
pub fn validate_hard(model: &DeepVqcsModel, data: &Dataset) -> Result<f64> {
    model.quantizer()?;
    if data.m_dim() != model.m_dim() || data.n_dim() != model.n_dim() {
        return shape("dataset dimensions do not match the model");
    }
    let mut acc = NmseAccumulator::default();
    for k in 0..data.len() {
        let est = model.estimate(&data.measurement(k).into_owned())?;
        acc.add(est.as_view(), data.source(k));
    }
    acc.nmse_db()
}

/// One encoder pass and `K` scalar encodes. Indices are 1-based.
pub fn compress(model: &DeepVqcsModel, y: &DVector<f64>) -> Result<Vec<usize>> {
    let q = model.quantizer()?;
    if y.len() != model.m_dim() {
        return shape(format!(
            "measurement length {} != M = {}",
            y.len(),
            model.m_dim()
        ));
    }
    let a = match &model.enc_net {
        Some(net) => net.predict(y)?,
        None => y.clone(),
    };
    a.iter().map(|&v| sq_encode(q, v)).collect()
}

/// `K` scalar decodes and one decoder pass.
pub fn reconstruct(model: &DeepVqcsModel, indices: &[usize]) -> Result<DVector<f64>> {
    let q = model.quantizer()?;
    if indices.len() != model.k_width() {
        return shape(format!(
            "{} indices for K = {}",
            indices.len(),
            model.k_width()
        ));
    }
    let levels = indices
        .iter()
        .map(|&i| sq_decode(q, i))
        .collect::<Result<Vec<_>>>()?;
    model.dec_net.predict(&DVector::from_vec(levels))
}

/// A trained model with the configuration that produced it.
#[derive(Debug, Clone, PartialEq)]
pub struct Checkpoint {
    pub model: DeepVqcsModel,
    pub config: TrainConfig,
    pub iterations: u64,
}

impl Checkpoint {
    pub fn save(&self, path: impl AsRef<Path>) -> Result<()> {
        let mut w = BufWriter::new(File::create(path)?);
        self.write_to(&mut w)?;
        w.flush()?;
        Ok(())
    }

    pub fn load(path: impl AsRef<Path>) -> Result<Self> {
        Self::read_from(&mut BufReader::new(File::open(path)?))
    }

    /// Magic, version, the config as TOML text (length-prefixed), iteration
    /// count, encoder flag and segment, decoder segment, SHQ segment,
    /// quantizer flag and quantizer.
    pub fn write_to<W: Write>(&self, w: &mut W) -> Result<()> {
        binfmt::write_magic(w, CHECKPOINT_MAGIC)?;
        binfmt::write_u64(w, CHECKPOINT_VERSION)?;
        let echo = toml::to_string(&self.config)
            .map_err(|e| Error::Format(format!("cannot serialize config: {e}")))?;
        binfmt::write_u64(w, echo.len() as u64)?;
        w.write_all(echo.as_bytes())?;
        binfmt::write_u64(w, self.iterations)?;
        let m = &self.model;
        binfmt::write_u64(w, m.enc_net.is_some() as u64)?;
        if let Some(enc) = &m.enc_net {
            enc.write_segment(w)?;
        }
        m.dec_net.write_segment(w)?;
        m.shq.write_segment(w)?;
        binfmt::write_u64(w, m.hard_q.is_some() as u64)?;
        if let Some(q) = &m.hard_q {
            q.write_to(w)?;
        }
        Ok(())
    }

    pub fn read_from<R: Read>(r: &mut R) -> Result<Self> {
        binfmt::read_magic(r, CHECKPOINT_MAGIC)?;
        let version = binfmt::read_u64(r)?;
        if version != CHECKPOINT_VERSION {
            return Err(Error::Format(format!(
                "unsupported checkpoint version {version}"
            )));
        }
        let len = binfmt::read_usize(r, "config length")?;
        if len > MAX_CONFIG_ECHO {
            return Err(Error::Format(format!("config echo of {len} bytes")));
        }
        let mut buf = vec![0u8; len];
        r.read_exact(&mut buf)?;
        let text = String::from_utf8(buf).map_err(|e| Error::Format(e.to_string()))?;
        let config: TrainConfig =
            toml::from_str(&text).map_err(|e| Error::Format(format!("config echo: {e}")))?;
        let iterations = binfmt::read_u64(r)?;
        let enc_net = match binfmt::read_u64(r)? {
            0 => None,
            1 => Some(FeedforwardNet::read_segment(r)?),
            f => return Err(Error::Format(format!("bad encoder flag {f}"))),
        };
        let dec_net = FeedforwardNet::read_segment(r)?;
        let shq = ShqLayer::read_segment(r)?;
        let hard_q = match binfmt::read_u64(r)? {
            0 => None,
            1 => Some(ScalarQuantizer::read_from(r)?),
            f => return Err(Error::Format(format!("bad quantizer flag {f}"))),
        };
        let model = DeepVqcsModel {
            enc_net,
            shq,
            dec_net,
            hard_q,
        };
        model.validate().map_err(|e| Error::Format(e.to_string()))?;
        Ok(Self {
            model,
            config,
            iterations,
        })
    }
}
