//! Stylus trace parsing and kinematic feature extraction.
//!
//! A signature file is plain UTF-8 text:
//!
//! ```text
//! GAFSV-SIG 1 <writer_id> <label>
//! t x y p
//! ...
//! ```
//!
//! where `label` is one of `genuine`, `skilled`, `random`. The three kinematic
//! series (pen speed, pressure derivative, direction angle) are derived with
//! central differences, resampled uniformly in time and min-max normalized.

use std::f64::consts::PI;
use std::fmt;
use std::str::FromStr;

use serde::{Deserialize, Serialize};

use crate::error::{Error, ParseErrorKind, Result};

pub const HEADER_MAGIC: &str = "GAFSV-SIG";
pub const FORMAT_VERSION: &str = "1";
pub const MIN_SAMPLES: usize = 4;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub enum Label {
    Genuine,
    SkilledForgery,
    RandomImpostor,
}

impl Label {
    pub fn as_str(&self) -> &'static str {
        match self {
            Label::Genuine => "genuine",
            Label::SkilledForgery => "skilled",
            Label::RandomImpostor => "random",
        }
    }
}

impl fmt::Display for Label {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

impl FromStr for Label {
    type Err = ();

    fn from_str(s: &str) -> std::result::Result<Self, ()> {
        match s {
            "genuine" => Ok(Label::Genuine),
            "skilled" => Ok(Label::SkilledForgery),
            "random" => Ok(Label::RandomImpostor),
            _ => Err(()),
        }
    }
}

/// One pen sample: time in seconds, position in device units, pressure.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct PenSample {
    pub t: f64,
    pub x: f64,
    pub y: f64,
    pub p: f64,
}

/// A single signing act.
#[derive(Debug, Clone, PartialEq)]
pub struct RawSignature {
    pub writer_id: String,
    pub label: Label,
    pub samples: Vec<PenSample>,
}

impl RawSignature {
    /// Build a signature, checking the sample invariants.
    pub fn new(writer_id: impl Into<String>, label: Label, samples: Vec<PenSample>) -> Result<Self> {
        if samples.len() < MIN_SAMPLES {
            return Err(Error::InsufficientData(format!(
                "signature needs at least {MIN_SAMPLES} samples, got {}",
                samples.len()
            )));
        }
        for (i, w) in samples.windows(2).enumerate() {
            if !(w[1].t > w[0].t) {
                return Err(Error::DegenerateStep { index: i });
            }
        }
        if samples.iter().any(|s| !(s.p >= 0.0)) {
            return Err(Error::InvalidArgument("pressure must be non-negative".into()));
        }
        Ok(RawSignature { writer_id: writer_id.into(), label, samples })
    }

    pub fn times(&self) -> Vec<f64> {
        self.samples.iter().map(|s| s.t).collect()
    }

    pub fn xs(&self) -> Vec<f64> {
        self.samples.iter().map(|s| s.x).collect()
    }

    pub fn ys(&self) -> Vec<f64> {
        self.samples.iter().map(|s| s.y).collect()
    }

    pub fn pressures(&self) -> Vec<f64> {
        self.samples.iter().map(|s| s.p).collect()
    }

    /// Serialize to the text format. Numbers use the shortest representation
    /// that parses back to the same `f64`.
    pub fn to_text(&self) -> String {
        let mut out = format!("{HEADER_MAGIC} {FORMAT_VERSION} {} {}\n", self.writer_id, self.label);
        for s in &self.samples {
            out.push_str(&format!("{} {} {} {}\n", s.t, s.x, s.y, s.p));
        }
        out
    }
}

/// Parse a signature document. Line numbers in errors are 1-based.
pub fn parse_signature(text: &str) -> Result<RawSignature> {
    let mut lines = text.split('\n').enumerate().map(|(i, l)| (i + 1, l));

    let (_, header) = lines.next().ok_or(Error::Parse { line: 1, kind: ParseErrorKind::Header })?;
    let fields: Vec<&str> = header.split(' ').collect();
    let header_err = Error::Parse { line: 1, kind: ParseErrorKind::Header };
    if fields.len() != 4 || fields[0] != HEADER_MAGIC || fields[1] != FORMAT_VERSION || fields[2].is_empty() {
        return Err(header_err);
    }
    let writer_id = fields[2].to_string();
    let label: Label = fields[3].parse().map_err(|_| header_err)?;

    let mut samples: Vec<PenSample> = Vec::new();
    let mut last_line = 1;
    for (line_no, line) in lines {
        if line.is_empty() {
            // only the terminating LF may produce an empty line
            continue;
        }
        last_line = line_no;
        let malformed = Error::Parse { line: line_no, kind: ParseErrorKind::MalformedLine };
        let parts: Vec<&str> = line.split(' ').collect();
        if parts.len() != 4 {
            return Err(malformed);
        }
        let mut vals = [0.0f64; 4];
        for (v, s) in vals.iter_mut().zip(&parts) {
            *v = match s.parse::<f64>() {
                Ok(x) if x.is_finite() => x,
                _ => return Err(Error::Parse { line: line_no, kind: ParseErrorKind::MalformedLine }),
            };
        }
        let sample = PenSample { t: vals[0], x: vals[1], y: vals[2], p: vals[3] };
        if let Some(prev) = samples.last() {
            if !(sample.t > prev.t) {
                return Err(Error::Parse { line: line_no, kind: ParseErrorKind::Timestamps });
            }
        }
        if sample.p < 0.0 {
            return Err(Error::Parse { line: line_no, kind: ParseErrorKind::NegativePressure });
        }
        samples.push(sample);
    }
    if samples.len() < MIN_SAMPLES {
        return Err(Error::Parse { line: last_line, kind: ParseErrorKind::TooFewSamples });
    }
    Ok(RawSignature { writer_id, label, samples })
}

/// Central-difference derivative with one-sided differences at the ends.
pub fn central_diff(series: &[f64], timestamps: &[f64]) -> Result<Vec<f64>> {
    let n = series.len();
    if n != timestamps.len() {
        return Err(Error::Shape(format!("series length {n} vs {} timestamps", timestamps.len())));
    }
    if n < 2 {
        return Err(Error::InsufficientData("central_diff needs at least 2 samples".into()));
    }
    for (i, w) in timestamps.windows(2).enumerate() {
        if !(w[1] > w[0]) {
            return Err(Error::DegenerateStep { index: i });
        }
    }
    let mut out = Vec::with_capacity(n);
    out.push((series[1] - series[0]) / (timestamps[1] - timestamps[0]));
    for i in 1..n - 1 {
        out.push((series[i + 1] - series[i - 1]) / (timestamps[i + 1] - timestamps[i - 1]));
    }
    out.push((series[n - 1] - series[n - 2]) / (timestamps[n - 1] - timestamps[n - 2]));
    Ok(out)
}

/// Raw (un-resampled) kinematic series of one signature.
#[derive(Debug, Clone, PartialEq)]
pub struct RawKinematics {
    pub v: Vec<f64>,
    pub p_dot: Vec<f64>,
    pub theta: Vec<f64>,
}

/// Speed, pressure derivative and direction angle, one value per pen sample.
///
/// The angle is the full-quadrant arctangent in (-pi, pi]; samples with zero
/// velocity carry the previous angle (0 at the first sample).
pub fn kinematics(sig: &RawSignature) -> Result<RawKinematics> {
    let t = sig.times();
    let vx = central_diff(&sig.xs(), &t)?;
    let vy = central_diff(&sig.ys(), &t)?;
    let p_dot = central_diff(&sig.pressures(), &t)?;

    let v = vx.iter().zip(&vy).map(|(a, b)| a.hypot(*b)).collect();
    let mut theta = Vec::with_capacity(vx.len());
    let mut prev = 0.0;
    for (&a, &b) in vx.iter().zip(&vy) {
        let th = if a == 0.0 && b == 0.0 {
            prev
        } else {
            let th = b.atan2(a);
            // atan2(-0.0, negative) yields -pi; keep the half-open range (-pi, pi]
            if th == -PI { PI } else { th }
        };
        theta.push(th);
        prev = th;
    }
    Ok(RawKinematics { v, p_dot, theta })
}

/// Linear interpolation onto `m` points uniformly spaced in time over the
/// span of `timestamps`. The first and last values are preserved exactly.
pub fn resample(series: &[f64], timestamps: &[f64], m: usize) -> Result<Vec<f64>> {
    let n = series.len();
    if n != timestamps.len() {
        return Err(Error::Shape(format!("series length {n} vs {} timestamps", timestamps.len())));
    }
    if n < 2 || m < 2 {
        return Err(Error::InvalidArgument(format!("resample needs n >= 2 and M >= 2 (n={n}, M={m})")));
    }
    let t0 = timestamps[0];
    let span = timestamps[n - 1] - t0;
    let mut out = Vec::with_capacity(m);
    let mut j = 0;
    for k in 0..m {
        if k == m - 1 {
            out.push(series[n - 1]);
            break;
        }
        let tk = t0 + span * k as f64 / (m - 1) as f64;
        while j + 2 < n && timestamps[j + 1] <= tk {
            j += 1;
        }
        let w = (tk - timestamps[j]) / (timestamps[j + 1] - timestamps[j]);
        out.push(if w == 0.0 { series[j] } else { series[j] + w * (series[j + 1] - series[j]) });
    }
    Ok(out)
}

/// Resample onto `m` points assuming unit spacing between input samples.
pub fn resample_uniform(series: &[f64], m: usize) -> Result<Vec<f64>> {
    let t: Vec<f64> = (0..series.len()).map(|i| i as f64).collect();
    resample(series, &t, m)
}

/// Min-max scaling into [-1, 1]; a constant series maps to zeros.
pub fn minmax_normalize(series: &[f64]) -> Vec<f64> {
    let (lo, hi) = series
        .iter()
        .fold((f64::INFINITY, f64::NEG_INFINITY), |(lo, hi), &x| (lo.min(x), hi.max(x)));
    let range = hi - lo;
    if !(range > 0.0) {
        return vec![0.0; series.len()];
    }
    series
        .iter()
        .map(|&x| (2.0 * (x - lo) / range - 1.0).clamp(-1.0, 1.0))
        .collect()
}

/// The three normalized kinematic series at a common even length `m`.
#[derive(Debug, Clone, PartialEq)]
pub struct KinematicChannels {
    pub v: Vec<f64>,
    pub p_dot: Vec<f64>,
    pub theta: Vec<f64>,
    pub m: usize,
}

impl KinematicChannels {
    pub fn new(v: Vec<f64>, p_dot: Vec<f64>, theta: Vec<f64>) -> Result<Self> {
        let m = v.len();
        if p_dot.len() != m || theta.len() != m {
            return Err(Error::Shape("kinematic channels differ in length".into()));
        }
        if m == 0 || m % 2 != 0 {
            return Err(Error::OddLength(m));
        }
        Ok(KinematicChannels { v, p_dot, theta, m })
    }

    /// Extract, resample to `m` points and normalize every channel.
    pub fn extract(sig: &RawSignature, m: usize) -> Result<Self> {
        let raw = kinematics(sig)?;
        let t = sig.times();
        let prep = |s: &[f64]| -> Result<Vec<f64>> { Ok(minmax_normalize(&resample(s, &t, m)?)) };
        Self::new(prep(&raw.v)?, prep(&raw.p_dot)?, prep(&raw.theta)?)
    }

    /// Channels resampled to `m` points but not yet normalized.
    pub fn extract_unnormalized(sig: &RawSignature, m: usize) -> Result<[Vec<f64>; 3]> {
        let raw = kinematics(sig)?;
        let t = sig.times();
        Ok([resample(&raw.v, &t, m)?, resample(&raw.p_dot, &t, m)?, resample(&raw.theta, &t, m)?])
    }

    pub fn channels(&self) -> [&[f64]; 3] {
        [&self.v, &self.p_dot, &self.theta]
    }
}
