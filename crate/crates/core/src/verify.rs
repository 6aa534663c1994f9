//! Prototype scoring, threshold decisions, EER and embedding margins.

use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::data::Dataset;
use crate::error::{Error, Result};
use crate::nn::{Embedding, Encoder, ModelInput};

/// Mean of the enrollment embeddings, not renormalized.
#[derive(Debug, Clone, PartialEq)]
pub struct Prototype {
    pub z_bar: Vec<f64>,
    pub r_enroll: usize,
}

pub fn enroll(refs: &[Embedding]) -> Result<Prototype> {
    let first = refs.first().ok_or(Error::Empty("enrollment set"))?;
    let d = first.0.len();
    if refs.iter().any(|e| e.0.len() != d) {
        return Err(Error::Shape("enrollment embeddings differ in dimension".into()));
    }
    let mut z_bar = vec![0.0; d];
    for e in refs {
        for (s, v) in z_bar.iter_mut().zip(&e.0) {
            *s += v;
        }
    }
    let n = refs.len() as f64;
    z_bar.iter_mut().for_each(|s| *s /= n);
    Ok(Prototype { z_bar, r_enroll: refs.len() })
}

/// `z_q . z_bar`.
pub fn score(query: &Embedding, proto: &Prototype) -> f64 {
    debug_assert_eq!(query.0.len(), proto.z_bar.len());
    query.dot(&proto.z_bar)
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Decision {
    Accept,
    Reject,
}

pub fn decide(s: f64, tau: f64) -> Decision {
    if s > tau {
        Decision::Accept
    } else {
        Decision::Reject
    }
}

/// Fraction of impostor scores accepted at `tau`.
pub fn far(impostor: &[f64], tau: f64) -> f64 {
    impostor.iter().filter(|&&s| s > tau).count() as f64 / impostor.len() as f64
}

/// Fraction of genuine scores rejected at `tau`.
pub fn frr(genuine: &[f64], tau: f64) -> f64 {
    genuine.iter().filter(|&&s| s <= tau).count() as f64 / genuine.len() as f64
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Eer {
    pub eer: f64,
    pub tau: f64,
}

/// Equal error rate over the thresholds in the sorted union of scores.
///
/// Walks the thresholds upward until FAR no longer exceeds FRR. An exact tie
/// is returned as is; otherwise both rates and the threshold are linearly
/// interpolated between that threshold and the previous one. Below the
/// lowest score FAR is 1 and FRR is 0.
pub fn compute_eer(genuine: &[f64], impostor: &[f64]) -> Result<Eer> {
    if genuine.is_empty() || impostor.is_empty() {
        return Err(Error::Empty("score list"));
    }
    if genuine.iter().chain(impostor).any(|s| !s.is_finite()) {
        return Err(Error::NonFinite { path: "scores".into() });
    }
    let mut g = genuine.to_vec();
    let mut im = impostor.to_vec();
    g.sort_by(f64::total_cmp);
    im.sort_by(f64::total_cmp);
    let mut taus: Vec<f64> = g.iter().chain(&im).copied().collect();
    taus.sort_by(f64::total_cmp);
    taus.dedup();

    let (ng, ni) = (g.len() as f64, im.len() as f64);
    let rates = |t: f64| {
        let rejected = g.partition_point(|&s| s <= t) as f64;
        let accepted = im.len() as f64 - im.partition_point(|&s| s <= t) as f64;
        (accepted / ni, rejected / ng)
    };
    let (mut prev_far, mut prev_frr, mut prev_tau) = (1.0, 0.0, taus[0]);
    for &t in &taus {
        let (fa, fr) = rates(t);
        if fa == fr {
            return Ok(Eer { eer: fa, tau: t });
        }
        if fa < fr {
            let d0 = prev_far - prev_frr;
            let d1 = fa - fr;
            let alpha = d0 / (d0 - d1);
            return Ok(Eer { eer: prev_far + alpha * (fa - prev_far), tau: prev_tau + alpha * (t - prev_tau) });
        }
        (prev_far, prev_frr, prev_tau) = (fa, fr, t);
    }
    unreachable!("FRR reaches 1 at the highest score")
}

/// Genuine and forgery embeddings of one writer.
#[derive(Debug, Clone, PartialEq)]
pub struct WriterEmbeddings {
    pub writer: String,
    pub genuine: Vec<Embedding>,
    pub forgeries: Vec<Embedding>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct WriterMargin {
    pub writer: String,
    pub mu_g: Option<f64>,
    pub mu_f: Option<f64>,
    pub delta: Option<f64>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MarginStats {
    pub mu_g: f64,
    pub mu_f: f64,
    pub delta: f64,
    pub per_writer: Vec<WriterMargin>,
    pub warnings: Vec<String>,
}

/// Mean genuine-genuine and genuine-forgery cosines, pooled over pairs.
pub fn margin_stats(groups: &[WriterEmbeddings]) -> Result<MarginStats> {
    let (mut gg_sum, mut gg_n, mut gf_sum, mut gf_n) = (0.0, 0usize, 0.0, 0usize);
    let mut per_writer = Vec::with_capacity(groups.len());
    let mut warnings = Vec::new();
    for w in groups {
        let (mut s, mut n) = (0.0, 0usize);
        for (i, a) in w.genuine.iter().enumerate() {
            for b in &w.genuine[i + 1..] {
                s += a.dot(&b.0);
                n += 1;
            }
        }
        let mu_g = (n > 0).then(|| s / n as f64);
        gg_sum += s;
        gg_n += n;
        let (mut s, mut n) = (0.0, 0usize);
        for a in &w.genuine {
            for f in &w.forgeries {
                s += a.dot(&f.0);
                n += 1;
            }
        }
        let mu_f = (n > 0).then(|| s / n as f64);
        gf_sum += s;
        gf_n += n;
        if mu_g.is_none() {
            warnings.push(format!("writer {}: fewer than 2 genuines, no genuine pairs", w.writer));
        }
        if mu_f.is_none() {
            warnings.push(format!("writer {}: no forgery pairs", w.writer));
        }
        let delta = mu_g.zip(mu_f).map(|(g, f)| g - f);
        per_writer.push(WriterMargin { writer: w.writer.clone(), mu_g, mu_f, delta });
    }
    if gg_n == 0 || gf_n == 0 {
        return Err(Error::InsufficientData("no genuine or forgery pairs for margin statistics".into()));
    }
    let mu_g = gg_sum / gg_n as f64;
    let mu_f = gf_sum / gf_n as f64;
    Ok(MarginStats { mu_g, mu_f, delta: mu_g - mu_f, per_writer, warnings })
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct WriterReport {
    pub writer: String,
    pub sf_eer: f64,
    pub rf_eer: f64,
    pub mu_g: Option<f64>,
    pub mu_f: Option<f64>,
    pub delta: Option<f64>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EvalReport {
    pub sf_eer: f64,
    pub rf_eer: f64,
    pub tau_sf: f64,
    pub tau_rf: f64,
    pub mu_g: f64,
    pub mu_f: f64,
    pub delta: f64,
    pub per_writer: Vec<WriterReport>,
}

impl EvalReport {
    pub fn to_json(&self) -> String {
        serde_json::to_string_pretty(self).expect("report serializes")
    }

    pub fn from_json(s: &str) -> Result<Self> {
        Ok(serde_json::from_str(s)?)
    }
}

/// Pooled score lists behind a report.
#[derive(Debug, Clone, PartialEq, Default)]
pub struct EvalScores {
    pub genuine: Vec<f64>,
    pub skilled: Vec<f64>,
    pub random: Vec<f64>,
}

const EMBED_CHUNK: usize = 16;

/// Inference embeddings, a few inputs per tape.
pub fn embed_all(encoder: &Encoder, inputs: &[ModelInput]) -> Result<Vec<Embedding>> {
    let mut out = Vec::with_capacity(inputs.len());
    for chunk in inputs.chunks(EMBED_CHUNK) {
        let refs: Vec<&ModelInput> = chunk.iter().collect();
        out.extend(encoder.embed_batch(&refs, crate::nn::Mode::Infer)?);
    }
    Ok(out)
}

/// Scores every eval writer. The first `r_enroll` genuines enroll, the rest
/// are genuine queries; skilled impostors are the writer's forgeries and
/// random impostors are one genuine drawn from every other eval writer.
pub fn evaluate<R: Rng>(encoder: &Encoder, data: &Dataset, r_enroll: usize, rng: &mut R) -> Result<(EvalReport, EvalScores)> {
    if r_enroll == 0 {
        return Err(Error::InvalidArgument("r_enroll must be at least 1".into()));
    }
    if data.eval.len() < 2 {
        return Err(Error::InsufficientData("evaluation needs at least two writers".into()));
    }
    let mut groups = Vec::with_capacity(data.eval.len());
    for w in &data.eval {
        let s = data.writer(w)?;
        if s.genuine.len() < r_enroll + 1 {
            return Err(Error::InsufficientData(format!(
                "writer {w} has {} genuines, needs {} for enrollment plus a query",
                s.genuine.len(),
                r_enroll + 1
            )));
        }
        if s.forgeries.is_empty() {
            return Err(Error::InsufficientData(format!("writer {w} has no skilled forgeries")));
        }
        groups.push(WriterEmbeddings {
            writer: w.clone(),
            genuine: embed_all(encoder, &s.genuine)?,
            forgeries: embed_all(encoder, &s.forgeries)?,
        });
    }

    let mut scores = EvalScores::default();
    let mut per_writer_scores = Vec::with_capacity(groups.len());
    for (i, g) in groups.iter().enumerate() {
        let proto = enroll(&g.genuine[..r_enroll])?;
        let gen: Vec<f64> = g.genuine[r_enroll..].iter().map(|q| score(q, &proto)).collect();
        let sf: Vec<f64> = g.forgeries.iter().map(|q| score(q, &proto)).collect();
        let rf: Vec<f64> = groups
            .iter()
            .enumerate()
            .filter(|&(j, _)| j != i)
            .map(|(_, other)| score(&other.genuine[rng.random_range(0..other.genuine.len())], &proto))
            .collect();
        scores.genuine.extend(&gen);
        scores.skilled.extend(&sf);
        scores.random.extend(&rf);
        per_writer_scores.push((gen, sf, rf));
    }
    let sf = compute_eer(&scores.genuine, &scores.skilled)?;
    let rf = compute_eer(&scores.genuine, &scores.random)?;
    let margins = margin_stats(&groups)?;
    let per_writer = per_writer_scores
        .iter()
        .zip(&margins.per_writer)
        .map(|((gen, sf, rf), m)| {
            Ok(WriterReport {
                writer: m.writer.clone(),
                sf_eer: compute_eer(gen, sf)?.eer,
                rf_eer: compute_eer(gen, rf)?.eer,
                mu_g: m.mu_g,
                mu_f: m.mu_f,
                delta: m.delta,
            })
        })
        .collect::<Result<Vec<_>>>()?;
    let report = EvalReport {
        sf_eer: sf.eer,
        rf_eer: rf.eer,
        tau_sf: sf.tau,
        tau_rf: rf.tau,
        mu_g: margins.mu_g,
        mu_f: margins.mu_f,
        delta: margins.delta,
        per_writer,
    };
    Ok((report, scores))
}
