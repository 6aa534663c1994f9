//! Deterministic synthetic signatures.
//!
//! A writer is a pair of sinusoid banks over normalized time `u in [0, 1]`
//! plus a horizontal drift, a pressure profile made of Gaussian bumps on a
//! baseline, a duration and a sample rate. Genuine samples jitter amplitudes,
//! phases and pressure slightly. Skilled forgeries trace the same curve
//! family through a smooth monotone time warp and with a pressure profile of
//! their own.

use std::f64::consts::PI;

use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::data::{Dataset, EncodingConfig, RawDataset};
use crate::error::{Error, Result};
use crate::ingest::{Label, PenSample, RawSignature};

pub const COMPONENTS: usize = 3;
pub const AMPLITUDE_RANGE: (f64, f64) = (0.3, 1.5);
pub const FREQUENCY_RANGE: (f64, f64) = (0.5, 6.0);
pub const DRIFT_RANGE: (f64, f64) = (2.0, 5.0);
pub const DURATION_RANGE: (f64, f64) = (1.5, 3.5);
pub const SAMPLE_RATES: [f64; 3] = [100.0, 120.0, 200.0];
pub const BASELINE_RANGE: (f64, f64) = (0.25, 0.55);
pub const BUMPS_RANGE: (usize, usize) = (2, 4);
pub const BUMP_WIDTH_RANGE: (f64, f64) = (0.03, 0.12);
pub const BUMP_HEIGHT_RANGE: (f64, f64) = (0.1, 0.4);

pub const AMPLITUDE_JITTER: f64 = 0.03;
pub const PHASE_JITTER: f64 = 0.05;
pub const PRESSURE_JITTER: f64 = 0.03;
pub const BUMP_SHIFT_JITTER: f64 = 0.01;
pub const DEFAULT_WARP: f64 = 0.1;

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Sinusoid {
    pub amplitude: f64,
    /// Cycles over the whole signature.
    pub frequency: f64,
    pub phase: f64,
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Bump {
    pub center: f64,
    pub width: f64,
    pub height: f64,
}

#[derive(Debug, Clone, PartialEq)]
pub struct PressureProfile {
    pub baseline: f64,
    pub bumps: Vec<Bump>,
}

impl PressureProfile {
    fn draw<R: Rng>(rng: &mut R) -> Self {
        let n = rng.random_range(BUMPS_RANGE.0..=BUMPS_RANGE.1);
        PressureProfile {
            baseline: rng.random_range(BASELINE_RANGE.0..BASELINE_RANGE.1),
            bumps: (0..n)
                .map(|_| Bump {
                    center: rng.random_range(0.05..0.95),
                    width: rng.random_range(BUMP_WIDTH_RANGE.0..BUMP_WIDTH_RANGE.1),
                    height: rng.random_range(BUMP_HEIGHT_RANGE.0..BUMP_HEIGHT_RANGE.1),
                })
                .collect(),
        }
    }

    pub fn at(&self, u: f64) -> f64 {
        self.baseline + self.bumps.iter().map(|b| b.height * (-0.5 * ((u - b.center) / b.width).powi(2)).exp()).sum::<f64>()
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct WriterParams {
    pub id: String,
    pub x: Vec<Sinusoid>,
    pub y: Vec<Sinusoid>,
    /// Horizontal advance over the signature.
    pub drift: f64,
    pub pressure: PressureProfile,
    pub duration: f64,
    pub sample_rate: f64,
}

fn bank<R: Rng>(rng: &mut R) -> Vec<Sinusoid> {
    (0..COMPONENTS)
        .map(|_| Sinusoid {
            amplitude: rng.random_range(AMPLITUDE_RANGE.0..AMPLITUDE_RANGE.1),
            frequency: rng.random_range(FREQUENCY_RANGE.0..FREQUENCY_RANGE.1),
            phase: rng.random_range(0.0..2.0 * PI),
        })
        .collect()
}

pub fn make_writer(seed: u64) -> WriterParams {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    WriterParams {
        id: format!("s{seed}"),
        x: bank(&mut rng),
        y: bank(&mut rng),
        drift: rng.random_range(DRIFT_RANGE.0..DRIFT_RANGE.1),
        pressure: PressureProfile::draw(&mut rng),
        duration: rng.random_range(DURATION_RANGE.0..DURATION_RANGE.1),
        sample_rate: SAMPLE_RATES[rng.random_range(0..SAMPLE_RATES.len())],
    }
}

/// Per-sample perturbations of a writer's curves.
#[derive(Debug, Clone, PartialEq)]
pub struct Jitter {
    /// Multiplicative factors for the x then y components.
    pub amplitude: Vec<f64>,
    /// Additive phase offsets for the x then y components.
    pub phase: Vec<f64>,
    pub pressure_scale: f64,
    pub bump_shift: Vec<f64>,
}

impl Jitter {
    pub fn zero(w: &WriterParams) -> Self {
        Jitter {
            amplitude: vec![1.0; 2 * COMPONENTS],
            phase: vec![0.0; 2 * COMPONENTS],
            pressure_scale: 1.0,
            bump_shift: vec![0.0; w.pressure.bumps.len()],
        }
    }

    pub fn draw<R: Rng>(w: &WriterParams, rng: &mut R) -> Self {
        Jitter {
            amplitude: (0..2 * COMPONENTS).map(|_| 1.0 + rng.random_range(-AMPLITUDE_JITTER..=AMPLITUDE_JITTER)).collect(),
            phase: (0..2 * COMPONENTS).map(|_| rng.random_range(-PHASE_JITTER..=PHASE_JITTER)).collect(),
            pressure_scale: 1.0 + rng.random_range(-PRESSURE_JITTER..=PRESSURE_JITTER),
            bump_shift: w.pressure.bumps.iter().map(|_| rng.random_range(-BUMP_SHIFT_JITTER..=BUMP_SHIFT_JITTER)).collect(),
        }
    }
}

/// Monotone map of `[0, 1]` onto itself: `u + sum a_k sin(pi c_k u) / (pi c_k)`
/// with `sum |a_k| < 1`.
#[derive(Debug, Clone, PartialEq)]
pub struct TimeWarp {
    pub terms: Vec<(f64, f64)>,
}

impl TimeWarp {
    pub fn identity() -> Self {
        TimeWarp { terms: vec![] }
    }

    pub fn draw<R: Rng>(amplitude: f64, rng: &mut R) -> Self {
        let amplitude = amplitude.clamp(0.0, 0.95);
        let split = rng.random_range(0.3..0.7);
        let c1 = rng.random_range(1..=2) as f64;
        let c2 = rng.random_range(3..=4) as f64;
        let sign = |rng: &mut R| if rng.random_bool(0.5) { 1.0 } else { -1.0 };
        TimeWarp { terms: vec![(sign(rng) * amplitude * split, c1), (sign(rng) * amplitude * (1.0 - split), c2)] }
    }

    pub fn at(&self, u: f64) -> f64 {
        u + self.terms.iter().map(|&(a, c)| a * (PI * c * u).sin() / (PI * c)).sum::<f64>()
    }
}

fn render(w: &WriterParams, j: &Jitter, warp: &TimeWarp, pressure: &PressureProfile, label: Label) -> Result<RawSignature> {
    let n = (w.duration * w.sample_rate).round() as usize;
    let eval = |bank: &[Sinusoid], off: usize, u: f64| -> f64 {
        bank.iter()
            .enumerate()
            .map(|(k, s)| j.amplitude[off + k] * s.amplitude * (2.0 * PI * s.frequency * u + s.phase + j.phase[off + k]).sin())
            .sum()
    };
    let shifted = PressureProfile {
        baseline: pressure.baseline,
        bumps: pressure
            .bumps
            .iter()
            .zip(j.bump_shift.iter().chain(std::iter::repeat(&0.0)))
            .map(|(b, s)| Bump { center: b.center + s, ..*b })
            .collect(),
    };
    let samples = (0..n)
        .map(|i| {
            let u = warp.at(i as f64 / (n - 1) as f64);
            PenSample {
                t: i as f64 / w.sample_rate,
                x: w.drift * u + eval(&w.x, 0, u),
                y: eval(&w.y, COMPONENTS, u),
                p: (j.pressure_scale * shifted.at(u)).max(0.0),
            }
        })
        .collect();
    RawSignature::new(w.id.clone(), label, samples)
}

/// Evaluates the writer's curves under the given jitter.
pub fn genuine_with(w: &WriterParams, j: &Jitter) -> Result<RawSignature> {
    render(w, j, &TimeWarp::identity(), &w.pressure, Label::Genuine)
}

pub fn genuine_sample<R: Rng>(w: &WriterParams, rng: &mut R) -> Result<RawSignature> {
    genuine_with(w, &Jitter::draw(w, rng))
}

/// Forgery with explicit warp and pressure profile.
pub fn forgery_with(w: &WriterParams, j: &Jitter, warp: &TimeWarp, pressure: &PressureProfile) -> Result<RawSignature> {
    render(w, j, warp, pressure, Label::SkilledForgery)
}

pub fn skilled_forgery<R: Rng>(w: &WriterParams, warp_amplitude: f64, rng: &mut R) -> Result<RawSignature> {
    let j = Jitter::draw(w, rng);
    let warp = TimeWarp::draw(warp_amplitude, rng);
    let pressure = PressureProfile::draw(rng);
    forgery_with(w, &j, &warp, &pressure)
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct SynthConfig {
    pub writers: usize,
    pub genuine: usize,
    pub forgeries: usize,
    pub seed: u64,
    pub warp: f64,
}

impl Default for SynthConfig {
    fn default() -> Self {
        SynthConfig { writers: 50, genuine: 10, forgeries: 6, seed: 7, warp: DEFAULT_WARP }
    }
}

/// Raw signatures with an 80/20 writer split drawn from `cfg.seed`.
pub fn make_raw_dataset(cfg: &SynthConfig) -> Result<RawDataset> {
    if cfg.writers == 0 || cfg.genuine == 0 {
        return Err(Error::InvalidArgument("need at least one writer and one genuine sample".into()));
    }
    let mut master = ChaCha8Rng::seed_from_u64(cfg.seed);
    let writer_seeds: Vec<u64> = (0..cfg.writers).map(|_| master.random()).collect();
    let mut signatures = Vec::new();
    let mut paths = Vec::new();
    let mut ids = Vec::new();
    for (i, &ws) in writer_seeds.iter().enumerate() {
        let mut w = make_writer(ws);
        w.id = format!("w{i:03}");
        let mut rng = ChaCha8Rng::seed_from_u64(ws);
        rng.set_stream(1);
        for g in 0..cfg.genuine {
            signatures.push(genuine_sample(&w, &mut rng)?);
            paths.push(format!("{}_g{g:02}.sig", w.id));
        }
        for f in 0..cfg.forgeries {
            signatures.push(skilled_forgery(&w, cfg.warp, &mut rng)?);
            paths.push(format!("{}_f{f:02}.sig", w.id));
        }
        ids.push(w.id);
    }
    ids.shuffle(&mut master);
    let n_eval = (cfg.writers * 2 + 5) / 10;
    let eval = ids.split_off(cfg.writers - n_eval);
    Ok(RawDataset { signatures, paths, train: ids, eval })
}

pub fn make_dataset(cfg: &SynthConfig, m: usize) -> Result<Dataset> {
    make_raw_dataset(cfg)?.encode(&EncodingConfig { m, ..EncodingConfig::default() })
}
