//! Dual-branch embedding network.
//!
//! Per branch: a stack of stride-2 3x3 convolutions, flattening into
//! `S * S` tokens, a linear token projection plus the shared positional
//! embedding, and pre-norm self-attention layers. The two branches are fused
//! by one bidirectional cross-attention block whose two directions both read
//! the pre-update tokens. Each branch is layer-normalized and average-pooled,
//! the pooled vectors are concatenated, and a BN projection head maps them to
//! a unit-norm embedding.

use std::collections::{BTreeMap, HashMap};
use std::fmt;
use std::str::FromStr;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};

use super::tape::{Gradients, Tape, Var};
use super::tensor::Tensor;
use crate::error::{Error, Result};
use crate::gafenc::{GafStack, STACK_CHANNELS};

pub const FFN_EXPANSION: usize = 4;
pub const BN_MOMENTUM: f64 = 0.1;
pub const BN_EPS: f64 = 1e-5;
pub const POS_INIT_STD: f64 = 0.02;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Default)]
pub enum Fusion {
    #[default]
    CrossAttention,
    ConcatOnly,
    SingleGasf,
    SingleGadf,
    SingleTrajectory,
}

impl Fusion {
    pub const ALL: [Fusion; 5] =
        [Fusion::CrossAttention, Fusion::ConcatOnly, Fusion::SingleGasf, Fusion::SingleGadf, Fusion::SingleTrajectory];

    pub fn is_dual(&self) -> bool {
        matches!(self, Fusion::CrossAttention | Fusion::ConcatOnly)
    }

    /// Branch names with their input channel count and the source channels
    /// they read from the model input.
    pub fn branches(&self) -> Vec<(&'static str, Vec<usize>)> {
        match self {
            Fusion::CrossAttention | Fusion::ConcatOnly => vec![("gasf", vec![0, 2, 4]), ("gadf", vec![1, 3, 5])],
            Fusion::SingleGasf => vec![("gasf", vec![0, 2, 4])],
            Fusion::SingleGadf => vec![("gadf", vec![1, 3, 5])],
            Fusion::SingleTrajectory => vec![("traj", vec![0])],
        }
    }

    /// Channel count of the model input this variant consumes.
    pub fn input_channels(&self) -> usize {
        if *self == Fusion::SingleTrajectory {
            1
        } else {
            STACK_CHANNELS
        }
    }
}

impl FromStr for Fusion {
    type Err = Error;
    fn from_str(s: &str) -> Result<Self> {
        Ok(match s {
            "cross_attention" => Fusion::CrossAttention,
            "concat_only" => Fusion::ConcatOnly,
            "single_gasf" => Fusion::SingleGasf,
            "single_gadf" => Fusion::SingleGadf,
            "single_trajectory" => Fusion::SingleTrajectory,
            _ => return Err(Error::Config(format!("unknown fusion `{s}`"))),
        })
    }
}

impl fmt::Display for Fusion {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            Fusion::CrossAttention => "cross_attention",
            Fusion::ConcatOnly => "concat_only",
            Fusion::SingleGasf => "single_gasf",
            Fusion::SingleGadf => "single_gadf",
            Fusion::SingleTrajectory => "single_trajectory",
        })
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct EncoderConfig {
    /// Side `H` of the input image (`M / 2`).
    pub input_side: usize,
    /// Output channels per convolution stage; the last one is the token source width.
    pub branch_channels: Vec<usize>,
    pub d: usize,
    pub heads: usize,
    pub self_attn_layers: usize,
    pub d_z: usize,
    pub fusion: Fusion,
    pub seed: u64,
}

impl Default for EncoderConfig {
    fn default() -> Self {
        EncoderConfig {
            input_side: 32,
            branch_channels: vec![8, 16, 32],
            d: 32,
            heads: 4,
            self_attn_layers: 2,
            d_z: 32,
            fusion: Fusion::CrossAttention,
            seed: 0,
        }
    }
}

impl EncoderConfig {
    pub fn validate(&self) -> Result<()> {
        let bad = |m: String| Err(Error::Config(m));
        if self.branch_channels.is_empty() {
            return bad("branch_channels must list at least one stage".into());
        }
        if self.heads == 0 || self.d % self.heads != 0 {
            return bad(format!("d={} is not divisible by heads={}", self.d, self.heads));
        }
        let div = 1usize << self.branch_channels.len();
        if self.input_side == 0 || self.input_side % div != 0 {
            return bad(format!(
                "input_side {} is not divisible by 2^{} (stage count)",
                self.input_side,
                self.branch_channels.len()
            ));
        }
        if self.d_z < 2 {
            return bad("d_z must be at least 2".into());
        }
        Ok(())
    }

    /// Spatial side `S` after the stem.
    pub fn token_grid(&self) -> usize {
        self.input_side >> self.branch_channels.len()
    }

    pub fn n_tokens(&self) -> usize {
        self.token_grid().pow(2)
    }

    pub fn backbone_width(&self) -> usize {
        *self.branch_channels.last().unwrap()
    }

    /// Width of the pooled vector entering the head.
    pub fn pooled_width(&self) -> usize {
        self.d * self.fusion.branches().len()
    }
}

#[derive(Debug, Clone, Copy, PartialEq)]
enum Init {
    /// Uniform in `+-sqrt(6 / fan_in)`.
    Kaiming(usize),
    Zeros,
    Ones,
    Normal(f64),
}

#[derive(Debug, Clone)]
struct ParamSpec {
    name: String,
    shape: Vec<usize>,
    init: Init,
}

/// Arrays that are state rather than learnable weights.
pub fn is_learnable(name: &str) -> bool {
    !(name.ends_with(".running_mean") || name.ends_with(".running_var"))
}

fn param_specs(cfg: &EncoderConfig) -> Vec<ParamSpec> {
    let mut specs = Vec::new();
    let mut add = |name: String, shape: Vec<usize>, init: Init| specs.push(ParamSpec { name, shape, init });
    let d = cfg.d;
    let dff = FFN_EXPANSION * d;
    let linear = |add: &mut dyn FnMut(String, Vec<usize>, Init), p: &str, i: usize, o: usize| {
        add(format!("{p}.w"), vec![i, o], Init::Kaiming(i));
        add(format!("{p}.b"), vec![o], Init::Zeros);
    };
    let ln = |add: &mut dyn FnMut(String, Vec<usize>, Init), p: &str| {
        add(format!("{p}.g"), vec![d], Init::Ones);
        add(format!("{p}.b"), vec![d], Init::Zeros);
    };
    let attn = |add: &mut dyn FnMut(String, Vec<usize>, Init), p: &str| {
        for proj in ["q", "k", "v", "o"] {
            linear(add, &format!("{p}.{proj}"), d, d);
        }
    };
    let ffn = |add: &mut dyn FnMut(String, Vec<usize>, Init), p: &str| {
        linear(add, &format!("{p}.fc1"), d, dff);
        linear(add, &format!("{p}.fc2"), dff, d);
    };

    add("pos".into(), vec![cfg.n_tokens(), d], Init::Normal(POS_INIT_STD));
    for (branch, src) in cfg.fusion.branches() {
        let mut c_in = src.len();
        for (i, &c_out) in cfg.branch_channels.iter().enumerate() {
            add(format!("{branch}.stem.{i}.w"), vec![c_out, c_in, 3, 3], Init::Kaiming(c_in * 9));
            add(format!("{branch}.stem.{i}.b"), vec![c_out], Init::Zeros);
            c_in = c_out;
        }
        linear(&mut add, &format!("{branch}.proj"), cfg.backbone_width(), d);
        for l in 0..cfg.self_attn_layers {
            let p = format!("{branch}.sa.{l}");
            ln(&mut add, &format!("{p}.ln1"));
            attn(&mut add, &format!("{p}.attn"));
            ln(&mut add, &format!("{p}.ln2"));
            ffn(&mut add, &format!("{p}.ffn"));
        }
        ln(&mut add, &format!("{branch}.ln_out"));
    }
    if cfg.fusion == Fusion::CrossAttention {
        for dir in ["cross.s", "cross.d"] {
            ln(&mut add, &format!("{dir}.ln_q"));
            ln(&mut add, &format!("{dir}.ln_kv"));
            attn(&mut add, &format!("{dir}.attn"));
            ln(&mut add, &format!("{dir}.ln2"));
            ffn(&mut add, &format!("{dir}.ffn"));
        }
    }
    let dv = cfg.pooled_width();
    add("head.f1.w".into(), vec![dv, dv], Init::Kaiming(dv));
    add("head.bn.g".into(), vec![dv], Init::Ones);
    add("head.bn.b".into(), vec![dv], Init::Zeros);
    add("head.bn.running_mean".into(), vec![dv], Init::Zeros);
    add("head.bn.running_var".into(), vec![dv], Init::Ones);
    linear(&mut add, "head.f2", dv, cfg.d_z);
    specs
}

/// Closed-form learnable parameter count (running statistics excluded).
///
/// With `d` the token width, `C_0` the branch input channels and `C_i` the stem
/// stage widths, `n` the token count, `L` the self-attention layers, `D_v` the
/// pooled width and `B` the branch count:
///
/// ```text
/// stem   = sum_i (9 * C_{i-1} + 1) * C_i
/// attn   = 4 * (d^2 + d)
/// ffn    = 8 * d^2 + 5 * d
/// layer  = attn + ffn + 4 * d                       (two affine layer norms)
/// branch = stem + (C_last * d + d) + L * layer + 2 * d
/// cross  = 2 * (attn + ffn + 6 * d)                  (cross-attention only)
/// head   = D_v^2 + 2 * D_v + D_v * d_z + d_z
/// total  = n * d + sum over branches + cross + head
/// ```
pub fn analytic_parameter_count(cfg: &EncoderConfig) -> usize {
    let d = cfg.d;
    let attn = 4 * (d * d + d);
    let ffn = 8 * d * d + 5 * d;
    let layer = attn + ffn + 4 * d;
    let mut total = cfg.n_tokens() * d;
    for (_, src) in cfg.fusion.branches() {
        let mut c_in = src.len();
        let mut stem = 0;
        for &c in &cfg.branch_channels {
            stem += (9 * c_in + 1) * c;
            c_in = c;
        }
        total += stem + cfg.backbone_width() * d + d + cfg.self_attn_layers * layer + 2 * d;
    }
    if cfg.fusion == Fusion::CrossAttention {
        total += 2 * (attn + ffn + 6 * d);
    }
    let dv = cfg.pooled_width();
    total + dv * dv + 2 * dv + dv * cfg.d_z + cfg.d_z
}

/// All arrays of an encoder keyed by layer path.
#[derive(Debug, Clone, PartialEq)]
pub struct Params {
    pub arrays: BTreeMap<String, Tensor>,
}

pub type ParamGrads = BTreeMap<String, Vec<f64>>;

impl Params {
    pub fn init(cfg: &EncoderConfig) -> Result<Self> {
        cfg.validate()?;
        let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
        let normal = Normal::new(0.0, 1.0).expect("unit normal");
        let mut arrays = BTreeMap::new();
        for spec in param_specs(cfg) {
            let n: usize = spec.shape.iter().product();
            let data: Vec<f64> = match spec.init {
                Init::Kaiming(fan_in) => {
                    let bound = (6.0 / fan_in as f64).sqrt();
                    (0..n).map(|_| rng.random_range(-bound..bound)).collect()
                }
                Init::Zeros => vec![0.0; n],
                Init::Ones => vec![1.0; n],
                Init::Normal(std) => (0..n).map(|_| std * normal.sample(&mut rng)).collect(),
            };
            arrays.insert(spec.name, Tensor { shape: spec.shape, data });
        }
        Ok(Params { arrays })
    }

    pub fn get(&self, name: &str) -> &Tensor {
        self.arrays.get(name).unwrap_or_else(|| panic!("missing parameter {name}"))
    }

    pub fn get_mut(&mut self, name: &str) -> &mut Tensor {
        self.arrays.get_mut(name).unwrap_or_else(|| panic!("missing parameter {name}"))
    }

    pub fn learnable_count(&self) -> usize {
        self.arrays.iter().filter(|(k, _)| is_learnable(k)).map(|(_, t)| t.len()).sum()
    }

    /// Checks that every array matches the shapes implied by `cfg`.
    pub fn check_against(&self, cfg: &EncoderConfig) -> Result<()> {
        let specs = param_specs(cfg);
        if specs.len() != self.arrays.len() {
            return Err(Error::Shape(format!("expected {} arrays, found {}", specs.len(), self.arrays.len())));
        }
        for s in specs {
            match self.arrays.get(&s.name) {
                Some(t) if t.shape == s.shape && t.len() == s.shape.iter().product::<usize>() => {}
                Some(t) => return Err(Error::Shape(format!("{}: expected {:?}, found {:?}", s.name, s.shape, t.shape))),
                None => return Err(Error::Shape(format!("missing array {}", s.name))),
            }
        }
        Ok(())
    }

    /// Binds parameters as tape leaves.
    pub fn bind(&self, tape: &mut Tape) -> Bound {
        let vars = self.arrays.iter().map(|(k, t)| (k.clone(), tape.leaf(t.clone()))).collect();
        Bound { vars }
    }
}

/// Parameter name to tape variable.
pub struct Bound {
    vars: HashMap<String, Var>,
}

impl Bound {
    pub fn get(&self, name: &str) -> Var {
        *self.vars.get(name).unwrap_or_else(|| panic!("parameter {name} is not bound"))
    }

    pub fn has(&self, name: &str) -> bool {
        self.vars.contains_key(name)
    }

    /// Gradients of every learnable array (zeros where unused).
    pub fn grads(&self, g: &Gradients, params: &Params) -> ParamGrads {
        params
            .arrays
            .iter()
            .filter(|(k, _)| is_learnable(k))
            .map(|(k, t)| (k.clone(), g.wrt(self.vars[k], t.len())))
            .collect()
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Mode {
    Train,
    Infer,
}

/// Unit-norm embedding vector.
#[derive(Debug, Clone, PartialEq)]
pub struct Embedding(pub Vec<f64>);

impl Embedding {
    pub fn norm(&self) -> f64 {
        self.0.iter().map(|x| x * x).sum::<f64>().sqrt()
    }

    pub fn dot(&self, other: &[f64]) -> f64 {
        self.0.iter().zip(other).map(|(a, b)| a * b).sum()
    }
}

/// A `C x H x H` image fed to the network.
#[derive(Debug, Clone, PartialEq)]
pub struct ModelInput {
    pub channels: usize,
    pub side: usize,
    pub data: Vec<f64>,
}

impl ModelInput {
    pub fn from_stack(stack: &GafStack) -> Self {
        ModelInput { channels: STACK_CHANNELS, side: stack.side, data: stack.data.clone() }
    }

    pub fn from_raster(raster: Vec<f64>, side: usize) -> Self {
        ModelInput { channels: 1, side, data: raster }
    }

    fn select(&self, idx: &[usize]) -> Tensor {
        let n = self.side * self.side;
        let data = idx.iter().flat_map(|&c| self.data[c * n..(c + 1) * n].iter().copied()).collect();
        Tensor { shape: vec![idx.len(), self.side, self.side], data }
    }
}

/// Batch statistics of the head's batch norm in train mode.
#[derive(Debug, Clone, PartialEq)]
pub struct BnBatchStats {
    pub mean: Vec<f64>,
    /// Biased batch variance.
    pub var: Vec<f64>,
    pub batch: usize,
}

// ---- layers ----------------------------------------------------------------

pub fn linear(tape: &mut Tape, p: &Bound, prefix: &str, x: Var) -> Var {
    let y = tape.matmul(x, p.get(&format!("{prefix}.w")));
    tape.add_row(y, p.get(&format!("{prefix}.b")))
}

pub fn layer_norm(tape: &mut Tape, p: &Bound, prefix: &str, x: Var) -> Var {
    let n = tape.layer_norm(x);
    let s = tape.mul_row(n, p.get(&format!("{prefix}.g")));
    tape.add_row(s, p.get(&format!("{prefix}.b")))
}

pub fn feed_forward(tape: &mut Tape, p: &Bound, prefix: &str, x: Var) -> Var {
    let h = linear(tape, p, &format!("{prefix}.fc1"), x);
    let h = tape.gelu(h);
    linear(tape, p, &format!("{prefix}.fc2"), h)
}

/// Multi-head scaled dot-product attention. Returns the output tokens and the
/// per-head attention weight matrices (`[n_q, n_kv]`, rows sum to one).
pub fn mha(tape: &mut Tape, p: &Bound, prefix: &str, q_in: Var, kv_in: Var, heads: usize) -> (Var, Vec<Var>) {
    let q = linear(tape, p, &format!("{prefix}.q"), q_in);
    let k = linear(tape, p, &format!("{prefix}.k"), kv_in);
    let v = linear(tape, p, &format!("{prefix}.v"), kv_in);
    let d = tape.value(q).dims2().1;
    let dh = d / heads;
    let scale = 1.0 / (dh as f64).sqrt();
    let mut outs = Vec::with_capacity(heads);
    let mut weights = Vec::with_capacity(heads);
    for h in 0..heads {
        let qh = tape.slice_cols(q, h * dh, dh);
        let kh = tape.slice_cols(k, h * dh, dh);
        let vh = tape.slice_cols(v, h * dh, dh);
        let kt = tape.transpose(kh);
        let scores = tape.matmul(qh, kt);
        let scores = tape.scale(scores, scale);
        let a = tape.softmax_rows(scores);
        weights.push(a);
        outs.push(tape.matmul(a, vh));
    }
    let cat = if heads == 1 { outs[0] } else { tape.concat_cols(&outs) };
    (linear(tape, p, &format!("{prefix}.o"), cat), weights)
}

fn self_attention_layer(tape: &mut Tape, p: &Bound, prefix: &str, x: Var, heads: usize) -> Var {
    tape.set_scope(prefix);
    let n = layer_norm(tape, p, &format!("{prefix}.ln1"), x);
    let (a, _) = mha(tape, p, &format!("{prefix}.attn"), n, n, heads);
    let x = tape.add(x, a);
    let n = layer_norm(tape, p, &format!("{prefix}.ln2"), x);
    let f = feed_forward(tape, p, &format!("{prefix}.ffn"), n);
    tape.add(x, f)
}

/// One direction: `queries` attend to `context`, then a residual FFN.
fn cross_direction(tape: &mut Tape, p: &Bound, prefix: &str, queries: Var, context: Var, heads: usize) -> Var {
    tape.set_scope(prefix);
    let q = layer_norm(tape, p, &format!("{prefix}.ln_q"), queries);
    let kv = layer_norm(tape, p, &format!("{prefix}.ln_kv"), context);
    let (a, _) = mha(tape, p, &format!("{prefix}.attn"), q, kv, heads);
    let x = tape.add(queries, a);
    let n = layer_norm(tape, p, &format!("{prefix}.ln2"), x);
    let f = feed_forward(tape, p, &format!("{prefix}.ffn"), n);
    tape.add(x, f)
}

/// Bidirectional cross-attention. Both directions read the pre-update tokens.
pub fn cross_attention_block(tape: &mut Tape, p: &Bound, hs: Var, hd: Var, heads: usize) -> (Var, Var) {
    let s = cross_direction(tape, p, "cross.s", hs, hd, heads);
    let d = cross_direction(tape, p, "cross.d", hd, hs, heads);
    (s, d)
}

/// Same as [`cross_attention_block`] but evaluating the GADF direction first.
pub fn cross_attention_block_reversed(tape: &mut Tape, p: &Bound, hs: Var, hd: Var, heads: usize) -> (Var, Var) {
    let d = cross_direction(tape, p, "cross.d", hd, hs, heads);
    let s = cross_direction(tape, p, "cross.s", hs, hd, heads);
    (s, d)
}

/// Convolution stack of one branch: `[C, H, H]` to `[D_bb, S, S]`.
pub fn conv_stem(tape: &mut Tape, p: &Bound, branch: &str, stages: usize, input: Var) -> Result<Var> {
    let shape = tape.value(input).shape.clone();
    let side = match shape.as_slice() {
        [_, h, w] if h == w => *h,
        s => return Err(Error::Shape(format!("stem input must be [C, H, H], got {s:?}"))),
    };
    if side % (1 << stages) != 0 && side != 1 {
        return Err(Error::Shape(format!("side {side} not divisible by 2^{stages}")));
    }
    let mut x = input;
    for i in 0..stages {
        tape.set_scope(&format!("{branch}.stem.{i}"));
        let w = p.get(&format!("{branch}.stem.{i}.w"));
        let c = tape.value(w).shape[1];
        if tape.value(x).shape[0] != c {
            return Err(Error::Shape(format!("{branch}.stem.{i}: expected {c} input channels")));
        }
        let y = tape.conv3x3_s2(x, w, p.get(&format!("{branch}.stem.{i}.b")));
        x = tape.gelu(y);
    }
    Ok(x)
}

/// BN projection head on a `[B, D_v]` batch: `L2(f2(ReLU(BN(f1 v))))`.
pub fn projection_head(tape: &mut Tape, p: &Bound, v: Var, mode: Mode) -> Result<(Var, Option<BnBatchStats>)> {
    tape.set_scope("head");
    let h = tape.matmul(v, p.get("head.f1.w"));
    let (b, dv) = tape.value(h).dims2();
    let (normed, stats) = match mode {
        Mode::Train => {
            let hv = &tape.value(h).data;
            let mut mean = vec![0.0; dv];
            let mut var = vec![0.0; dv];
            for r in hv.chunks(dv) {
                for j in 0..dv {
                    mean[j] += r[j] / b as f64;
                }
            }
            for r in hv.chunks(dv) {
                for j in 0..dv {
                    var[j] += (r[j] - mean[j]).powi(2) / b as f64;
                }
            }
            // column standardization is layer norm on the transpose
            let t = tape.transpose(h);
            let n = tape.layer_norm(t);
            (tape.transpose(n), Some(BnBatchStats { mean, var, batch: b }))
        }
        Mode::Infer => {
            let rm = tape.value(p.get("head.bn.running_mean")).data.clone();
            let rv = &tape.value(p.get("head.bn.running_var")).data;
            let inv: Vec<f64> = rv.iter().map(|v| 1.0 / (v + BN_EPS).sqrt()).collect();
            let shift = tape.constant(Tensor { shape: vec![dv], data: rm.iter().map(|m| -m).collect() });
            let inv = tape.constant(Tensor { shape: vec![dv], data: inv });
            let c = tape.add_row(h, shift);
            (tape.mul_row(c, inv), None)
        }
    };
    let s = tape.mul_row(normed, p.get("head.bn.g"));
    let s = tape.add_row(s, p.get("head.bn.b"));
    let r = tape.relu(s);
    let out = linear(tape, p, "head.f2", r);
    let (_, dz) = tape.value(out).dims2();
    if tape.value(out).data.chunks(dz).any(|row| row.iter().all(|&x| x == 0.0)) {
        return Err(Error::DegenerateEmbedding);
    }
    Ok((tape.l2_normalize_rows(out), stats))
}

/// Encoder configuration plus parameters.
#[derive(Debug, Clone, PartialEq)]
pub struct Encoder {
    pub config: EncoderConfig,
    pub params: Params,
}

impl Encoder {
    pub fn new(config: EncoderConfig) -> Result<Self> {
        let params = Params::init(&config)?;
        Ok(Encoder { config, params })
    }

    pub fn from_parts(config: EncoderConfig, params: Params) -> Result<Self> {
        config.validate()?;
        params.check_against(&config)?;
        Ok(Encoder { config, params })
    }

    fn check_input(&self, x: &ModelInput) -> Result<()> {
        let want = self.config.fusion.input_channels();
        if x.channels != want || x.side != self.config.input_side || x.data.len() != want * x.side * x.side {
            return Err(Error::Shape(format!(
                "input is {}x{}x{}, encoder ({}) expects {}x{}x{}",
                x.channels, x.side, x.side, self.config.fusion, want, self.config.input_side, self.config.input_side
            )));
        }
        Ok(())
    }

    /// Token sequence of one branch after projection and self-attention.
    fn branch_tokens(&self, tape: &mut Tape, p: &Bound, branch: &str, input: Var) -> Result<Var> {
        let cfg = &self.config;
        let f = conv_stem(tape, p, branch, cfg.branch_channels.len(), input)?;
        tape.set_scope(&format!("{branch}.proj"));
        let flat = tape.reshape(f, &[cfg.backbone_width(), cfg.n_tokens()]);
        let tokens = tape.transpose(flat);
        let h = linear(tape, p, &format!("{branch}.proj"), tokens);
        let mut h = tape.add(h, p.get("pos"));
        for l in 0..cfg.self_attn_layers {
            h = self_attention_layer(tape, p, &format!("{branch}.sa.{l}"), h, cfg.heads);
        }
        Ok(h)
    }

    fn pool(&self, tape: &mut Tape, p: &Bound, branch: &str, h: Var) -> Var {
        tape.set_scope(&format!("{branch}.ln_out"));
        let n = layer_norm(tape, p, &format!("{branch}.ln_out"), h);
        tape.mean_rows(n)
    }

    /// Everything up to the head: one input to its pooled `[1, D_v]` vector.
    pub fn trunk(&self, tape: &mut Tape, p: &Bound, x: &ModelInput) -> Result<Var> {
        self.check_input(x)?;
        let branches = self.config.fusion.branches();
        let mut tokens = Vec::with_capacity(branches.len());
        for (name, src) in &branches {
            let input = tape.constant(x.select(src));
            tokens.push(self.branch_tokens(tape, p, name, input)?);
        }
        if self.config.fusion == Fusion::CrossAttention {
            let (s, d) = cross_attention_block(tape, p, tokens[0], tokens[1], self.config.heads);
            tokens = vec![s, d];
        }
        let pooled: Vec<Var> =
            branches.iter().zip(&tokens).map(|((name, _), &h)| self.pool(tape, p, name, h)).collect();
        Ok(if pooled.len() == 1 { pooled[0] } else { tape.concat_cols(&pooled) })
    }

    /// Embeds a batch on `tape`, returning the `[B, d_z]` embedding matrix.
    pub fn forward_batch(
        &self,
        tape: &mut Tape,
        p: &Bound,
        inputs: &[&ModelInput],
        mode: Mode,
    ) -> Result<(Var, Option<BnBatchStats>)> {
        if inputs.is_empty() {
            return Err(Error::Empty("forward batch"));
        }
        let rows = inputs.iter().map(|x| self.trunk(tape, p, x)).collect::<Result<Vec<_>>>()?;
        let v = if rows.len() == 1 { rows[0] } else { tape.concat_rows(&rows) };
        projection_head(tape, p, v, mode)
    }

    pub fn embed_batch(&self, inputs: &[&ModelInput], mode: Mode) -> Result<Vec<Embedding>> {
        let mut tape = Tape::new();
        let p = self.params.bind(&mut tape);
        let (z, _) = self.forward_batch(&mut tape, &p, inputs, mode)?;
        let dz = self.config.d_z;
        Ok(tape.value(z).data.chunks(dz).map(|r| Embedding(r.to_vec())).collect())
    }

    /// Inference-mode embedding of one input.
    pub fn embed(&self, x: &ModelInput) -> Result<Embedding> {
        Ok(self.embed_batch(&[x], Mode::Infer)?.remove(0))
    }

    /// Exponential moving update of the head's running statistics.
    pub fn update_running_stats(&mut self, stats: &BnBatchStats) {
        let unbias = if stats.batch > 1 { stats.batch as f64 / (stats.batch - 1) as f64 } else { 1.0 };
        let rm = self.params.get_mut("head.bn.running_mean");
        for (r, m) in rm.data.iter_mut().zip(&stats.mean) {
            *r = (1.0 - BN_MOMENTUM) * *r + BN_MOMENTUM * m;
        }
        let rv = self.params.get_mut("head.bn.running_var");
        for (r, v) in rv.data.iter_mut().zip(&stats.var) {
            *r = (1.0 - BN_MOMENTUM) * *r + BN_MOMENTUM * v * unbias;
        }
    }
}

/// Reverse-mode gradient of a scalar built by `loss` from the bound parameters.
pub fn grad<F>(params: &Params, loss: F) -> Result<(f64, ParamGrads)>
where
    F: FnOnce(&mut Tape, &Bound) -> Result<Var>,
{
    let mut tape = Tape::new();
    let bound = params.bind(&mut tape);
    let root = loss(&mut tape, &bound)?;
    let g = tape.backward(root)?;
    Ok((tape.value(root).item(), bound.grads(&g, params)))
}
