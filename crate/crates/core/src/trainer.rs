//! Episodic sampling, optimization and checkpoints.

use std::collections::BTreeMap;
use std::fmt;
use std::str::FromStr;

use rand::seq::index::sample;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::data::{Dataset, EncodingConfig};
use crate::error::{Error, Result};
use crate::gafenc::{ChannelSet, GafVariant};
use crate::metric::{loss_on_tape, mine_from_similarity, EpisodeLayout, LossConfig, LossValues, MiningReport};
use crate::nn::checkpoint::{Checkpoint, VERSION_F32, VERSION_F64};
use crate::nn::model::is_learnable;
use crate::nn::{Encoder, EncoderConfig, Mode, ModelInput, ParamGrads, Params, Tape};

/// Forgery labels start here so they never collide with writer indices.
pub const FORGERY_LABEL_BASE: u64 = 1 << 32;

const SAMPLING_STREAM: u64 = 1 << 20;

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Optimizer {
    Sgd,
    SgdMomentum,
    Adam,
}

impl FromStr for Optimizer {
    type Err = Error;
    fn from_str(s: &str) -> Result<Self> {
        match s {
            "sgd" => Ok(Optimizer::Sgd),
            "sgd_momentum" => Ok(Optimizer::SgdMomentum),
            "adam" => Ok(Optimizer::Adam),
            _ => Err(Error::Config(format!("unknown optimizer `{s}` (expected sgd|sgd_momentum|adam)"))),
        }
    }
}

impl fmt::Display for Optimizer {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            Optimizer::Sgd => "sgd",
            Optimizer::SgdMomentum => "sgd_momentum",
            Optimizer::Adam => "adam",
        })
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct TrainConfig {
    pub writers_per_step: usize,
    pub extra_genuine: usize,
    pub forgeries_per_step: usize,
    pub steps: usize,
    pub learning_rate: f64,
    pub optimizer: Optimizer,
    pub momentum: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub adam_eps: f64,
    pub seed: u64,
    pub loss: LossConfig,
    pub encoder: EncoderConfig,
    pub m: usize,
    pub gaf_variant: GafVariant,
    pub channels: ChannelSet,
    /// Checkpoint value precision: 32 or 64 bits.
    pub checkpoint_bits: u32,
}

impl Default for TrainConfig {
    fn default() -> Self {
        TrainConfig {
            writers_per_step: 8,
            extra_genuine: 3,
            forgeries_per_step: 8,
            steps: 2000,
            learning_rate: 1e-3,
            optimizer: Optimizer::Adam,
            momentum: 0.9,
            beta1: 0.9,
            beta2: 0.999,
            adam_eps: 1e-8,
            seed: 0,
            loss: LossConfig::default(),
            encoder: EncoderConfig::default(),
            m: 64,
            gaf_variant: GafVariant::Asymmetric,
            channels: ChannelSet::default(),
            checkpoint_bits: 32,
        }
    }
}

/// Every key accepted in config files and as a CLI flag.
pub const CONFIG_KEYS: &[&str] = &[
    "writers_per_step",
    "extra_genuine",
    "forgeries_per_step",
    "steps",
    "learning_rate",
    "optimizer",
    "momentum",
    "beta1",
    "beta2",
    "adam_eps",
    "seed",
    "margin",
    "lambda_f",
    "lambda_u",
    "use_sample",
    "use_forgery",
    "use_uniformity",
    "M",
    "gaf_variant",
    "channels",
    "fusion",
    "branch_channels",
    "d",
    "heads",
    "self_attn_layers",
    "d_z",
    "checkpoint_bits",
];

fn parse<T: FromStr>(key: &str, value: &str) -> Result<T> {
    value.parse().map_err(|_| Error::Config(format!("invalid value `{value}` for {key}")))
}

impl TrainConfig {
    pub fn set(&mut self, key: &str, value: &str) -> Result<()> {
        let v = value.trim();
        match key {
            "writers_per_step" => self.writers_per_step = parse(key, v)?,
            "extra_genuine" => self.extra_genuine = parse(key, v)?,
            "forgeries_per_step" => self.forgeries_per_step = parse(key, v)?,
            "steps" => self.steps = parse(key, v)?,
            "learning_rate" => self.learning_rate = parse(key, v)?,
            "optimizer" => self.optimizer = v.parse()?,
            "momentum" => self.momentum = parse(key, v)?,
            "beta1" => self.beta1 = parse(key, v)?,
            "beta2" => self.beta2 = parse(key, v)?,
            "adam_eps" => self.adam_eps = parse(key, v)?,
            "seed" => {
                self.seed = parse(key, v)?;
                self.encoder.seed = self.seed;
            }
            "margin" => self.loss.m = parse(key, v)?,
            "lambda_f" => self.loss.lambda_f = parse(key, v)?,
            "lambda_u" => self.loss.lambda_u = parse(key, v)?,
            "use_sample" => self.loss.use_sample = parse(key, v)?,
            "use_forgery" => self.loss.use_forgery = parse(key, v)?,
            "use_uniformity" => self.loss.use_uniformity = parse(key, v)?,
            "M" => {
                self.m = parse(key, v)?;
                self.encoder.input_side = self.m / 2;
            }
            "gaf_variant" => self.gaf_variant = v.parse()?,
            "channels" => self.channels = v.parse()?,
            "fusion" => self.encoder.fusion = v.parse()?,
            "branch_channels" => {
                self.encoder.branch_channels = v.split(',').map(|c| parse(key, c.trim())).collect::<Result<_>>()?
            }
            "d" => self.encoder.d = parse(key, v)?,
            "heads" => self.encoder.heads = parse(key, v)?,
            "self_attn_layers" => self.encoder.self_attn_layers = parse(key, v)?,
            "d_z" => self.encoder.d_z = parse(key, v)?,
            "checkpoint_bits" => self.checkpoint_bits = parse(key, v)?,
            _ => return Err(Error::Config(format!("unknown config key `{key}`"))),
        }
        Ok(())
    }

    pub fn get(&self, key: &str) -> Option<String> {
        Some(match key {
            "writers_per_step" => self.writers_per_step.to_string(),
            "extra_genuine" => self.extra_genuine.to_string(),
            "forgeries_per_step" => self.forgeries_per_step.to_string(),
            "steps" => self.steps.to_string(),
            "learning_rate" => self.learning_rate.to_string(),
            "optimizer" => self.optimizer.to_string(),
            "momentum" => self.momentum.to_string(),
            "beta1" => self.beta1.to_string(),
            "beta2" => self.beta2.to_string(),
            "adam_eps" => self.adam_eps.to_string(),
            "seed" => self.seed.to_string(),
            "margin" => self.loss.m.to_string(),
            "lambda_f" => self.loss.lambda_f.to_string(),
            "lambda_u" => self.loss.lambda_u.to_string(),
            "use_sample" => self.loss.use_sample.to_string(),
            "use_forgery" => self.loss.use_forgery.to_string(),
            "use_uniformity" => self.loss.use_uniformity.to_string(),
            "M" => self.m.to_string(),
            "gaf_variant" => self.gaf_variant.to_string(),
            "channels" => self.channels.to_string(),
            "fusion" => self.encoder.fusion.to_string(),
            "branch_channels" => self.encoder.branch_channels.iter().map(|c| c.to_string()).collect::<Vec<_>>().join(","),
            "d" => self.encoder.d.to_string(),
            "heads" => self.encoder.heads.to_string(),
            "self_attn_layers" => self.encoder.self_attn_layers.to_string(),
            "d_z" => self.encoder.d_z.to_string(),
            "checkpoint_bits" => self.checkpoint_bits.to_string(),
            _ => return None,
        })
    }

    /// Reads `key = value` lines; `#` starts a comment.
    pub fn apply_text(&mut self, text: &str) -> Result<()> {
        for (n, raw) in text.lines().enumerate() {
            let line = raw.split('#').next().unwrap_or("").trim();
            if line.is_empty() {
                continue;
            }
            let (k, v) = line
                .split_once('=')
                .ok_or_else(|| Error::Config(format!("config line {}: expected `key = value`", n + 1)))?;
            self.set(k.trim(), v)?;
        }
        Ok(())
    }

    pub fn from_text(text: &str) -> Result<Self> {
        let mut c = TrainConfig::default();
        c.apply_text(text)?;
        c.validate()?;
        Ok(c)
    }

    pub fn to_text(&self) -> String {
        CONFIG_KEYS.iter().map(|k| format!("{k} = {}\n", self.get(k).expect("known key"))).collect()
    }

    pub fn to_map(&self) -> BTreeMap<String, String> {
        CONFIG_KEYS.iter().map(|k| (k.to_string(), self.get(k).expect("known key"))).collect()
    }

    pub fn validate(&self) -> Result<()> {
        if self.writers_per_step < 2 {
            return Err(Error::Config("writers_per_step must be at least 2".into()));
        }
        if self.extra_genuine < 1 {
            return Err(Error::Config("extra_genuine must be at least 1".into()));
        }
        if !(self.learning_rate >= 0.0 && self.learning_rate.is_finite()) {
            return Err(Error::Config("learning_rate must be a non-negative number".into()));
        }
        if self.m < 16 || self.m % 2 != 0 {
            return Err(Error::Config(format!("M must be even and at least 16, got {}", self.m)));
        }
        if self.encoder.input_side != self.m / 2 {
            return Err(Error::Config(format!("encoder input side {} does not match M/2 = {}", self.encoder.input_side, self.m / 2)));
        }
        if self.checkpoint_bits != 32 && self.checkpoint_bits != 64 {
            return Err(Error::Config("checkpoint_bits must be 32 or 64".into()));
        }
        self.loss.validate()?;
        self.encoder.validate()
    }

    pub fn encoding(&self) -> EncodingConfig {
        EncodingConfig { m: self.m, variant: self.gaf_variant, channels: self.channels, fusion: self.encoder.fusion }
    }
}

/// Dataset positions making up one training batch.
#[derive(Debug, Clone, PartialEq)]
pub struct Episode {
    /// `(writer, genuine index)` grouped by writer.
    pub genuine: Vec<(String, usize)>,
    /// `(target writer, forgery index, unique label)`.
    pub forgeries: Vec<(String, usize, u64)>,
}

/// Draws `W_b` distinct train writers, `R + 1` genuines each and `B_f`
/// forgeries from those writers' pooled skilled forgeries.
pub fn sample_episode<R: Rng>(data: &Dataset, cfg: &TrainConfig, rng: &mut R) -> Result<Episode> {
    let need = cfg.extra_genuine + 1;
    for w in &data.train {
        let n = data.writer(w)?.genuine.len();
        if n < need {
            return Err(Error::InsufficientData(format!("writer {w} has {n} genuines, episodes need {need}")));
        }
    }
    if data.train.len() < cfg.writers_per_step {
        return Err(Error::InsufficientData(format!(
            "{} train writers, episodes need {}",
            data.train.len(),
            cfg.writers_per_step
        )));
    }
    let writers: Vec<&String> = sample(rng, data.train.len(), cfg.writers_per_step).into_iter().map(|i| &data.train[i]).collect();
    let mut genuine = Vec::with_capacity(writers.len() * need);
    for &w in &writers {
        let n = data.writers[w].genuine.len();
        let mut idx = sample(rng, n, need).into_vec();
        idx.sort_unstable();
        genuine.extend(idx.into_iter().map(|i| (w.clone(), i)));
    }
    let pool: Vec<(&String, usize)> =
        writers.iter().flat_map(|&w| (0..data.writers[w].forgeries.len()).map(move |i| (w, i))).collect();
    let mut forgeries = Vec::with_capacity(cfg.forgeries_per_step);
    if cfg.forgeries_per_step > 0 {
        if pool.is_empty() {
            return Err(Error::InsufficientData("sampled writers have no skilled forgeries".into()));
        }
        let picks: Vec<usize> = if pool.len() >= cfg.forgeries_per_step {
            sample(rng, pool.len(), cfg.forgeries_per_step).into_vec()
        } else {
            (0..cfg.forgeries_per_step).map(|_| rng.random_range(0..pool.len())).collect()
        };
        for (k, p) in picks.into_iter().enumerate() {
            let (w, i) = pool[p];
            forgeries.push((w.clone(), i, FORGERY_LABEL_BASE + k as u64));
        }
    }
    Ok(Episode { genuine, forgeries })
}

fn writer_label(data: &Dataset, w: &str) -> u64 {
    data.writers.keys().position(|k| k == w).expect("episode writer exists") as u64
}

impl Episode {
    pub fn layout(&self, data: &Dataset) -> Result<EpisodeLayout> {
        EpisodeLayout::new(
            self.genuine.iter().map(|(w, _)| writer_label(data, w)).collect(),
            self.forgeries.iter().map(|(w, _, _)| writer_label(data, w)).collect(),
            self.forgeries.iter().map(|f| f.2).collect(),
        )
    }

    pub fn inputs<'a>(&self, data: &'a Dataset) -> Vec<&'a ModelInput> {
        self.genuine
            .iter()
            .map(|(w, i)| &data.writers[w].genuine[*i])
            .chain(self.forgeries.iter().map(|(w, i, _)| &data.writers[w].forgeries[*i]))
            .collect()
    }
}

/// RNG for the episode of a given step; independent of earlier steps so a
/// resumed run sees the same batches.
pub fn episode_rng(seed: u64, step: usize) -> ChaCha8Rng {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    rng.set_stream(SAMPLING_STREAM + step as u64);
    rng
}

/// Loss and gradients of one batch. Mining uses the forward embeddings and
/// is held fixed while differentiating.
pub struct StepGradients {
    pub values: LossValues,
    pub report: MiningReport,
    pub grads: ParamGrads,
    pub bn: Option<crate::nn::model::BnBatchStats>,
}

pub fn batch_gradients(
    encoder: &Encoder,
    inputs: &[&ModelInput],
    layout: &EpisodeLayout,
    loss: &LossConfig,
    fixed_report: Option<&MiningReport>,
) -> Result<StepGradients> {
    let mut tape = Tape::new();
    let p = encoder.params.bind(&mut tape);
    let (z, bn) = encoder.forward_batch(&mut tape, &p, inputs, Mode::Train)?;
    let report = match fixed_report {
        Some(r) => r.clone(),
        None => {
            let zv = tape.value(z);
            let (n, d) = zv.dims2();
            let mut s = vec![0.0; n * n];
            for i in 0..n {
                for j in 0..n {
                    let dot: f64 = (0..d).map(|k| zv.data[i * d + k] * zv.data[j * d + k]).sum();
                    s[i * n + j] = dot.clamp(-1.0, 1.0);
                }
            }
            mine_from_similarity(&s, layout, loss.m)
        }
    };
    let vars = loss_on_tape(&mut tape, z, layout, &report, loss);
    let g = tape.backward(vars.total)?;
    let values = LossValues::read(&tape, &vars, &report);
    Ok(StepGradients { values, grads: p.grads(&g, &encoder.params), report, bn })
}

#[derive(Debug, Clone, PartialEq, Default)]
pub struct OptimizerState {
    pub t: u64,
    pub first: BTreeMap<String, Vec<f64>>,
    pub second: BTreeMap<String, Vec<f64>>,
}

fn apply_update(params: &mut Params, grads: &ParamGrads, cfg: &TrainConfig, st: &mut OptimizerState) {
    st.t += 1;
    let lr = cfg.learning_rate;
    for (name, g) in grads {
        let w = &mut params.get_mut(name).data;
        match cfg.optimizer {
            Optimizer::Sgd => {
                for (x, gi) in w.iter_mut().zip(g) {
                    *x -= lr * gi;
                }
            }
            Optimizer::SgdMomentum => {
                let v = st.first.entry(name.clone()).or_insert_with(|| vec![0.0; g.len()]);
                for ((x, gi), vi) in w.iter_mut().zip(g).zip(v.iter_mut()) {
                    *vi = cfg.momentum * *vi + gi;
                    *x -= lr * *vi;
                }
            }
            Optimizer::Adam => {
                let m = st.first.entry(name.clone()).or_insert_with(|| vec![0.0; g.len()]);
                let v = st.second.entry(name.clone()).or_insert_with(|| vec![0.0; g.len()]);
                let bc1 = 1.0 - cfg.beta1.powi(st.t as i32);
                let bc2 = 1.0 - cfg.beta2.powi(st.t as i32);
                for i in 0..w.len() {
                    m[i] = cfg.beta1 * m[i] + (1.0 - cfg.beta1) * g[i];
                    v[i] = cfg.beta2 * v[i] + (1.0 - cfg.beta2) * g[i] * g[i];
                    w[i] -= lr * (m[i] / bc1) / ((v[i] / bc2).sqrt() + cfg.adam_eps);
                }
            }
        }
    }
}

/// Encoder, optimizer moments and the number of completed steps.
#[derive(Debug, Clone, PartialEq)]
pub struct TrainState {
    pub encoder: Encoder,
    pub optimizer: OptimizerState,
    pub step: usize,
}

impl TrainState {
    pub fn new(cfg: &TrainConfig) -> Result<Self> {
        cfg.validate()?;
        Ok(TrainState { encoder: Encoder::new(cfg.encoder.clone())?, optimizer: OptimizerState::default(), step: 0 })
    }
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct MetricsRow {
    pub step: usize,
    pub values: LossValues,
}

pub const METRICS_HEADER: &str = "step,loss_total,loss_tri_sample,loss_tri_cluster,loss_unif";

pub fn metrics_csv(rows: &[MetricsRow]) -> String {
    let mut out = format!("{METRICS_HEADER}\n");
    for r in rows {
        let v = &r.values;
        out.push_str(&format!("{},{},{},{},{}\n", r.step, v.total, v.sample, v.cluster, v.unif));
    }
    out
}

/// One optimization step on an already sampled episode.
pub fn train_step(state: &mut TrainState, data: &Dataset, episode: &Episode, cfg: &TrainConfig) -> Result<(LossValues, MiningReport)> {
    let layout = episode.layout(data)?;
    let inputs = episode.inputs(data);
    let sg = batch_gradients(&state.encoder, &inputs, &layout, &cfg.loss, None)?;
    if !sg.values.total.is_finite() {
        return Err(Error::NonFinite { path: "loss".into() });
    }
    apply_update(&mut state.encoder.params, &sg.grads, cfg, &mut state.optimizer);
    if let Some(bn) = &sg.bn {
        state.encoder.update_running_stats(bn);
    }
    state.step += 1;
    Ok((sg.values, sg.report))
}

/// Runs `n` more steps, calling `on_step` after each.
pub fn run_steps<F>(state: &mut TrainState, data: &Dataset, cfg: &TrainConfig, n: usize, mut on_step: F) -> Result<Vec<MetricsRow>>
where
    F: FnMut(&MetricsRow, &MiningReport),
{
    let mut rows = Vec::with_capacity(n);
    for _ in 0..n {
        let mut rng = episode_rng(cfg.seed, state.step);
        let episode = sample_episode(data, cfg, &mut rng)?;
        let (values, report) = train_step(state, data, &episode, cfg)?;
        let row = MetricsRow { step: state.step, values };
        on_step(&row, &report);
        rows.push(row);
    }
    Ok(rows)
}

pub fn train_loop(data: &Dataset, cfg: &TrainConfig) -> Result<(TrainState, Vec<MetricsRow>)> {
    let mut state = TrainState::new(cfg)?;
    let rows = run_steps(&mut state, data, cfg, cfg.steps, |_, _| {})?;
    Ok((state, rows))
}

/// Serializes the encoder with the resolved config and step count.
pub fn save_checkpoint(state: &TrainState, cfg: &TrainConfig) -> Result<Vec<u8>> {
    let mut config = cfg.to_map();
    config.insert("completed_steps".into(), state.step.to_string());
    let version = if cfg.checkpoint_bits == 64 { VERSION_F64 } else { VERSION_F32 };
    Checkpoint { config, params: state.encoder.params.clone() }.to_bytes(version)
}

/// Restores config and state; optimizer moments start from zero.
pub fn load_checkpoint(bytes: &[u8]) -> Result<(TrainConfig, TrainState)> {
    let ck = Checkpoint::from_bytes(bytes)?;
    let mut cfg = TrainConfig::default();
    let mut step = 0;
    for (k, v) in &ck.config {
        if k == "completed_steps" {
            step = parse(k, v)?;
        } else {
            cfg.set(k, v)?;
        }
    }
    cfg.validate()?;
    let encoder = Encoder::from_parts(cfg.encoder.clone(), ck.params)?;
    Ok((cfg, TrainState { encoder, optimizer: OptimizerState::default(), step }))
}

#[derive(Debug, Clone, PartialEq)]
pub struct GradCheckReport {
    pub checked: usize,
    pub max_rel_error: f64,
    pub worst: (String, usize, f64, f64),
}

/// Denominator floor of the relative error, so coordinates whose true
/// gradient is zero are judged on absolute error.
pub const GRADCHECK_FLOOR: f64 = 1e-6;

pub fn relative_error(analytic: f64, numeric: f64) -> f64 {
    (analytic - numeric).abs() / analytic.abs().max(numeric.abs()).max(GRADCHECK_FLOOR)
}

/// Central-difference check of `coords` random learnable coordinates on one
/// episode, with mining fixed to the unperturbed batch.
pub fn gradient_check(encoder: &Encoder, data: &Dataset, cfg: &TrainConfig, coords: usize, h: f64, seed: u64) -> Result<GradCheckReport> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let episode = sample_episode(data, cfg, &mut rng)?;
    let layout = episode.layout(data)?;
    let inputs = episode.inputs(data);
    let base = batch_gradients(encoder, &inputs, &layout, &cfg.loss, None)?;
    let names: Vec<&String> = encoder.params.arrays.keys().filter(|k| is_learnable(k)).collect();
    let sizes: Vec<usize> = names.iter().map(|k| encoder.params.arrays[*k].len()).collect();
    let total: usize = sizes.iter().sum();
    let mut probe = encoder.clone();
    let mut report = GradCheckReport { checked: 0, max_rel_error: 0.0, worst: (String::new(), 0, 0.0, 0.0) };
    for _ in 0..coords {
        let mut flat = rng.random_range(0..total);
        let mut a = 0;
        while flat >= sizes[a] {
            flat -= sizes[a];
            a += 1;
        }
        let name = names[a].clone();
        let orig = encoder.params.arrays[&name].data[flat];
        let mut eval = |x: f64| -> Result<f64> {
            probe.params.get_mut(&name).data[flat] = x;
            Ok(batch_gradients(&probe, &inputs, &layout, &cfg.loss, Some(&base.report))?.values.total)
        };
        let numeric = (eval(orig + h)? - eval(orig - h)?) / (2.0 * h);
        probe.params.get_mut(&name).data[flat] = orig;
        let analytic = base.grads[&name][flat];
        let rel = relative_error(analytic, numeric);
        if !rel.is_finite() {
            return Err(Error::NonFinite { path: format!("gradient check at {name}[{flat}]") });
        }
        if rel >= report.max_rel_error {
            report.max_rel_error = rel;
            report.worst = (name, flat, analytic, numeric);
        }
        report.checked += 1;
    }
    Ok(report)
}
