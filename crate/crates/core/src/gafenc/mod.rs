//! Gramian angular field encoders.
//!
//! Each normalized series is phase-encoded with `phi = arccos(x)`. The
//! summation field is `cos(phi_i + phi_j)` and the difference field is
//! `sin(phi_i - phi_j)`. Both are evaluated through their algebraic forms,
//! which avoid the arccos round trip.
//!
//! The asymmetric construction splits a length-`M` series (normalized over its
//! full length) at the midpoint: the upper triangle, diagonal included, comes
//! from the first half and the strict lower triangle from the second half.

pub mod io;
mod raster;

pub use raster::rasterize_trajectory;

use std::fmt;
use std::str::FromStr;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::ingest::{minmax_normalize, resample_uniform, KinematicChannels};

pub const STACK_CHANNELS: usize = 6;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub enum GafKind {
    Gasf,
    Gadf,
}

/// An `H x H` field, row-major.
#[derive(Debug, Clone, PartialEq)]
pub struct GafMatrix {
    pub kind: GafKind,
    pub size: usize,
    pub values: Vec<f64>,
}

impl GafMatrix {
    #[inline]
    pub fn get(&self, i: usize, j: usize) -> f64 {
        self.values[i * self.size + j]
    }
}

/// Counts matrix-entry evaluations.
#[derive(Debug, Default, Clone, Copy, PartialEq, Eq)]
pub struct EntryCounter(pub u64);

pub fn phase_encode(x: f64) -> f64 {
    x.clamp(-1.0, 1.0).acos()
}

#[inline]
fn entry(kind: GafKind, xi: f64, si: f64, xj: f64, sj: f64) -> f64 {
    match kind {
        GafKind::Gasf => xi * xj - si * sj,
        GafKind::Gadf => si * xj - xi * sj,
    }
}

fn clamp_with_sine(x: &[f64]) -> (Vec<f64>, Vec<f64>) {
    let xs: Vec<f64> = x.iter().map(|v| v.clamp(-1.0, 1.0)).collect();
    let ss = xs.iter().map(|v| (1.0 - v * v).max(0.0).sqrt()).collect();
    (xs, ss)
}

fn full_gaf(x: &[f64], kind: GafKind, counter: &mut EntryCounter) -> GafMatrix {
    let h = x.len();
    let (xs, ss) = clamp_with_sine(x);
    let mut values = vec![0.0; h * h];
    for i in 0..h {
        for j in 0..h {
            values[i * h + j] = if kind == GafKind::Gadf && i == j {
                0.0
            } else {
                entry(kind, xs[i], ss[i], xs[j], ss[j])
            };
        }
    }
    counter.0 += (h * h) as u64;
    GafMatrix { kind, size: h, values }
}

/// Gramian angular summation field of a normalized series.
pub fn gasf(x: &[f64]) -> GafMatrix {
    full_gaf(x, GafKind::Gasf, &mut EntryCounter::default())
}

/// Gramian angular difference field of a normalized series. The diagonal is
/// exactly zero.
pub fn gadf(x: &[f64]) -> GafMatrix {
    full_gaf(x, GafKind::Gadf, &mut EntryCounter::default())
}

pub fn gaf(x: &[f64], kind: GafKind) -> GafMatrix {
    full_gaf(x, kind, &mut EntryCounter::default())
}

pub fn asymmetric_gaf(series: &[f64], kind: GafKind) -> Result<GafMatrix> {
    asymmetric_gaf_counted(series, kind, &mut EntryCounter::default())
}

/// Asymmetric field of side `M/2`. Only the entries that end up in the output
/// are evaluated, so the cost is `(M/2)^2` entries.
pub fn asymmetric_gaf_counted(series: &[f64], kind: GafKind, counter: &mut EntryCounter) -> Result<GafMatrix> {
    let m = series.len();
    if m == 0 || m % 2 != 0 {
        return Err(Error::OddLength(m));
    }
    let h = m / 2;
    let (xs, ss) = clamp_with_sine(series);
    let (x1, x2) = xs.split_at(h);
    let (s1, s2) = ss.split_at(h);
    let mut values = vec![0.0; h * h];
    for i in 0..h {
        for j in 0..h {
            values[i * h + j] = if i <= j {
                if kind == GafKind::Gadf && i == j {
                    0.0
                } else {
                    entry(kind, x1[i], s1[i], x1[j], s1[j])
                }
            } else {
                entry(kind, x2[i], s2[i], x2[j], s2[j])
            };
        }
    }
    counter.0 += (h * h) as u64;
    Ok(GafMatrix { kind, size: h, values })
}

/// Ablation variant: resample the whole series to `target` points, normalize,
/// and build the ordinary (symmetric or anti-symmetric) field.
pub fn symmetric_gaf(series: &[f64], target: usize, kind: GafKind) -> Result<GafMatrix> {
    if target > series.len() {
        return Err(Error::InvalidArgument(format!(
            "symmetric_gaf target {target} exceeds series length {}",
            series.len()
        )));
    }
    let down = if target == series.len() { series.to_vec() } else { resample_uniform(series, target)? };
    Ok(gaf(&minmax_normalize(&down), kind))
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Default, Serialize, Deserialize)]
pub enum GafVariant {
    #[default]
    Asymmetric,
    Symmetric,
}

impl FromStr for GafVariant {
    type Err = Error;
    fn from_str(s: &str) -> Result<Self> {
        match s {
            "asym" => Ok(GafVariant::Asymmetric),
            "sym" => Ok(GafVariant::Symmetric),
            _ => Err(Error::Config(format!("unknown gaf variant `{s}` (expected asym|sym)"))),
        }
    }
}

impl fmt::Display for GafVariant {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            GafVariant::Asymmetric => "asym",
            GafVariant::Symmetric => "sym",
        })
    }
}

/// Which kinematic channels feed the stack. Excluded channels are zeroed.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub struct ChannelSet {
    pub v: bool,
    pub p_dot: bool,
    pub theta: bool,
}

impl Default for ChannelSet {
    fn default() -> Self {
        ChannelSet { v: true, p_dot: true, theta: true }
    }
}

impl ChannelSet {
    fn flags(&self) -> [bool; 3] {
        [self.v, self.p_dot, self.theta]
    }
}

impl FromStr for ChannelSet {
    type Err = Error;
    fn from_str(s: &str) -> Result<Self> {
        let mut set = ChannelSet { v: false, p_dot: false, theta: false };
        for part in s.split(',').map(str::trim) {
            match part {
                "v" => set.v = true,
                "dp" => set.p_dot = true,
                "theta" => set.theta = true,
                _ => return Err(Error::Config(format!("unknown channel `{part}` (expected v, dp, theta)"))),
            }
        }
        if set.flags().iter().all(|f| !f) {
            return Err(Error::Config("channel set is empty".into()));
        }
        Ok(set)
    }
}

impl fmt::Display for ChannelSet {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        let names: Vec<&str> = ["v", "dp", "theta"]
            .into_iter()
            .zip(self.flags())
            .filter_map(|(n, on)| on.then_some(n))
            .collect();
        f.write_str(&names.join(","))
    }
}

/// Six `side x side` channels in the order
/// `[v-GASF, v-GADF, p_dot-GASF, p_dot-GADF, theta-GASF, theta-GADF]`.
#[derive(Debug, Clone, PartialEq)]
pub struct GafStack {
    pub side: usize,
    pub m: usize,
    pub data: Vec<f64>,
}

impl GafStack {
    pub fn from_matrices(mats: &[GafMatrix], m: usize) -> Result<Self> {
        if mats.len() != STACK_CHANNELS {
            return Err(Error::Shape(format!("stack needs {STACK_CHANNELS} channels, got {}", mats.len())));
        }
        let side = mats[0].size;
        let mut data = Vec::with_capacity(STACK_CHANNELS * side * side);
        for g in mats {
            if g.size != side {
                return Err(Error::Shape("stack channels differ in size".into()));
            }
            data.extend_from_slice(&g.values);
        }
        Ok(GafStack { side, m, data })
    }

    pub fn channel(&self, c: usize) -> &[f64] {
        let n = self.side * self.side;
        &self.data[c * n..(c + 1) * n]
    }

    /// Channels `idx` concatenated channel-major.
    pub fn select(&self, idx: &[usize]) -> Vec<f64> {
        idx.iter().flat_map(|&c| self.channel(c).iter().copied()).collect()
    }

    /// Summation view (channels 0, 2, 4).
    pub fn gasf_view(&self) -> Vec<f64> {
        self.select(&[0, 2, 4])
    }

    /// Difference view (channels 1, 3, 5).
    pub fn gadf_view(&self) -> Vec<f64> {
        self.select(&[1, 3, 5])
    }

    pub fn mask_channels(&mut self, set: ChannelSet) {
        let n = self.side * self.side;
        for (k, keep) in set.flags().into_iter().enumerate() {
            if !keep {
                self.data[2 * k * n..(2 * k + 2) * n].fill(0.0);
            }
        }
    }

    /// Checks the structural invariants: six square channels with all entries
    /// in [-1, 1].
    pub fn check(&self) -> Result<()> {
        if self.data.len() != STACK_CHANNELS * self.side * self.side {
            return Err(Error::Shape("stack data length".into()));
        }
        if let Some(v) = self.data.iter().find(|v| !(-1.0..=1.0).contains(*v)) {
            return Err(Error::InvalidArgument(format!("stack entry {v} outside [-1, 1]")));
        }
        Ok(())
    }
}

pub fn encode_six_channel(k: &KinematicChannels) -> Result<GafStack> {
    encode_six_channel_counted(k, &mut EntryCounter::default())
}

pub fn encode_six_channel_counted(k: &KinematicChannels, counter: &mut EntryCounter) -> Result<GafStack> {
    let mut mats = Vec::with_capacity(STACK_CHANNELS);
    for series in k.channels() {
        mats.push(asymmetric_gaf_counted(series, GafKind::Gasf, counter)?);
        mats.push(asymmetric_gaf_counted(series, GafKind::Gadf, counter)?);
    }
    GafStack::from_matrices(&mats, k.m)
}

/// Symmetric ablation stack: every channel is downsampled to `M/2` points
/// before building an ordinary field.
pub fn encode_six_channel_symmetric(k: &KinematicChannels) -> Result<GafStack> {
    if k.m % 2 != 0 {
        return Err(Error::OddLength(k.m));
    }
    let h = k.m / 2;
    let mut mats = Vec::with_capacity(STACK_CHANNELS);
    for series in k.channels() {
        mats.push(symmetric_gaf(series, h, GafKind::Gasf)?);
        mats.push(symmetric_gaf(series, h, GafKind::Gadf)?);
    }
    GafStack::from_matrices(&mats, k.m)
}

pub fn encode_stack(k: &KinematicChannels, variant: GafVariant, channels: ChannelSet) -> Result<GafStack> {
    let mut stack = match variant {
        GafVariant::Asymmetric => encode_six_channel(k)?,
        GafVariant::Symmetric => encode_six_channel_symmetric(k)?,
    };
    stack.mask_channels(channels);
    Ok(stack)
}
