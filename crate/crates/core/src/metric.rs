//! Triplet mining and the training objective in cosine space.
//!
//! All embeddings are unit vectors, so cosine similarity is the plain dot
//! product. Losses are built on a [`Tape`] from the Gram matrix `Z Z^T` of the
//! stacked batch (genuines first, then forgeries), which lets the trainer
//! differentiate through them and the plain functions below share one
//! implementation.

use std::collections::BTreeSet;
use std::fmt;

use crate::error::{Error, Result};
use crate::nn::{Embedding, Tape, Tensor, Var};

/// Tolerance on `|‖z‖ − 1|` accepted as unit norm.
pub const UNIT_TOL: f64 = 1e-9;

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct LossConfig {
    pub m: f64,
    pub lambda_f: f64,
    pub lambda_u: f64,
    pub use_sample: bool,
    pub use_forgery: bool,
    pub use_uniformity: bool,
}

impl Default for LossConfig {
    fn default() -> Self {
        LossConfig { m: 0.2, lambda_f: 1.0, lambda_u: 0.1, use_sample: true, use_forgery: true, use_uniformity: true }
    }
}

impl LossConfig {
    pub fn validate(&self) -> Result<()> {
        if !(self.m > 0.0 && self.m < 2.0) {
            return Err(Error::Config(format!("margin m must lie in (0, 2), got {}", self.m)));
        }
        if !(self.lambda_f >= 0.0 && self.lambda_u >= 0.0) {
            return Err(Error::Config("loss weights must be non-negative".into()));
        }
        Ok(())
    }
}

/// Labels of a batch without the embeddings. Row order of the stacked batch is
/// all genuines, then all forgeries.
#[derive(Debug, Clone, PartialEq)]
pub struct EpisodeLayout {
    pub genuine_writers: Vec<u64>,
    pub forgery_targets: Vec<u64>,
    pub forgery_labels: Vec<u64>,
}

impl EpisodeLayout {
    pub fn new(genuine_writers: Vec<u64>, forgery_targets: Vec<u64>, forgery_labels: Vec<u64>) -> Result<Self> {
        if forgery_targets.len() != forgery_labels.len() {
            return Err(Error::Shape("one target and one unique label per forgery".into()));
        }
        let writers: BTreeSet<u64> = genuine_writers.iter().copied().collect();
        let mut seen = BTreeSet::new();
        for &l in &forgery_labels {
            if writers.contains(&l) || !seen.insert(l) {
                return Err(Error::InvalidArgument(format!("forgery label {l} is not unique in the batch")));
            }
        }
        Ok(EpisodeLayout { genuine_writers, forgery_targets, forgery_labels })
    }

    pub fn n_genuine(&self) -> usize {
        self.genuine_writers.len()
    }

    pub fn len(&self) -> usize {
        self.genuine_writers.len() + self.forgery_labels.len()
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    /// Label of row `i` of the stacked batch.
    pub fn label(&self, i: usize) -> u64 {
        let ng = self.n_genuine();
        if i < ng {
            self.genuine_writers[i]
        } else {
            self.forgery_labels[i - ng]
        }
    }

    fn genuines_of(&self, writer: u64) -> Vec<usize> {
        (0..self.n_genuine()).filter(|&i| self.genuine_writers[i] == writer).collect()
    }
}

/// Embeddings plus labels for one training step.
#[derive(Debug, Clone, PartialEq)]
pub struct EpisodeBatch {
    pub layout: EpisodeLayout,
    /// Stacked rows in layout order.
    pub embeddings: Vec<Embedding>,
}

impl EpisodeBatch {
    pub fn new(genuine: Vec<(Embedding, u64)>, forgeries: Vec<(Embedding, u64, u64)>) -> Result<Self> {
        let layout = EpisodeLayout::new(
            genuine.iter().map(|g| g.1).collect(),
            forgeries.iter().map(|f| f.1).collect(),
            forgeries.iter().map(|f| f.2).collect(),
        )?;
        let embeddings = genuine.into_iter().map(|g| g.0).chain(forgeries.into_iter().map(|f| f.0)).collect();
        Ok(EpisodeBatch { layout, embeddings })
    }

    fn matrix(&self) -> Result<Tensor> {
        check_unit(&self.embeddings)?;
        stack(&self.embeddings)
    }
}

fn stack(z: &[Embedding]) -> Result<Tensor> {
    let d = z.first().map(|e| e.0.len()).ok_or(Error::Empty("embedding batch"))?;
    if z.iter().any(|e| e.0.len() != d) {
        return Err(Error::Shape("embeddings differ in dimension".into()));
    }
    Tensor::new(vec![z.len(), d], z.iter().flat_map(|e| e.0.iter().copied()).collect())
}

fn check_unit(z: &[Embedding]) -> Result<()> {
    for (index, e) in z.iter().enumerate() {
        let norm = e.norm();
        if (norm - 1.0).abs() > UNIT_TOL {
            return Err(Error::NonUnit { index, norm });
        }
    }
    Ok(())
}

/// `N x N` cosine similarities, row-major.
pub fn cosine_matrix(z: &[Embedding]) -> Result<Vec<f64>> {
    check_unit(z)?;
    let n = z.len();
    let mut s = vec![0.0; n * n];
    for i in 0..n {
        s[i * n + i] = 1.0;
        for j in i + 1..n {
            let c = z[i].dot(&z[j].0).clamp(-1.0, 1.0);
            s[i * n + j] = c;
            s[j * n + i] = c;
        }
    }
    Ok(s)
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct TripletRecord {
    pub anchor: usize,
    pub positive: usize,
    pub negative: usize,
    pub s_ip: f64,
    pub s_in: f64,
    pub semi_hard: bool,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum SkipReason {
    NoPositive,
    NoNegative,
}

impl fmt::Display for SkipReason {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            SkipReason::NoPositive => "no positive",
            SkipReason::NoNegative => "no negative",
        })
    }
}

#[derive(Debug, Clone, PartialEq, Default)]
pub struct MiningReport {
    pub records: Vec<TripletRecord>,
    pub skipped: Vec<(usize, SkipReason)>,
}

impl MiningReport {
    /// One `anchor p n s_ip s_in semihard` line per record, then
    /// `# skipped <anchor> <reason>` lines.
    pub fn to_text(&self) -> String {
        let mut out = String::from("anchor p n s_ip s_in semihard\n");
        for r in &self.records {
            out.push_str(&format!(
                "{} {} {} {} {} {}\n",
                r.anchor, r.positive, r.negative, r.s_ip, r.s_in, r.semi_hard as u8
            ));
        }
        for (a, why) in &self.skipped {
            out.push_str(&format!("# skipped {a} {why}\n"));
        }
        out
    }

    pub fn semi_hard_fraction(&self) -> f64 {
        if self.records.is_empty() {
            return 0.0;
        }
        self.records.iter().filter(|r| r.semi_hard).count() as f64 / self.records.len() as f64
    }
}

/// Semi-hard mining over a precomputed similarity matrix of the stacked batch.
pub fn mine_from_similarity(s: &[f64], layout: &EpisodeLayout, m: f64) -> MiningReport {
    let n = layout.len();
    assert_eq!(s.len(), n * n, "similarity matrix does not match the layout");
    let mut report = MiningReport::default();
    for a in 0..layout.n_genuine() {
        let label = layout.label(a);
        let mut positive: Option<usize> = None;
        for p in layout.genuines_of(label) {
            if p != a && positive.is_none_or(|q| s[a * n + p] < s[a * n + q]) {
                positive = Some(p);
            }
        }
        let Some(p) = positive else {
            report.skipped.push((a, SkipReason::NoPositive));
            continue;
        };
        let s_ip = s[a * n + p];
        let mut zone: Option<usize> = None;
        let mut hardest: Option<usize> = None;
        for c in (0..n).filter(|&c| layout.label(c) != label) {
            let v = s[a * n + c];
            if hardest.is_none_or(|h| v > s[a * n + h]) {
                hardest = Some(c);
            }
            if s_ip - m < v && v < s_ip && zone.is_none_or(|z| v > s[a * n + z]) {
                zone = Some(c);
            }
        }
        let (negative, semi_hard) = match (zone, hardest) {
            (Some(z), _) => (z, true),
            (None, Some(h)) => (h, false),
            (None, None) => {
                report.skipped.push((a, SkipReason::NoNegative));
                continue;
            }
        };
        report.records.push(TripletRecord { anchor: a, positive: p, negative, s_ip, s_in: s[a * n + negative], semi_hard });
    }
    report
}

pub fn mine_triplets(batch: &EpisodeBatch, m: f64) -> Result<MiningReport> {
    if batch.embeddings.len() != batch.layout.len() {
        return Err(Error::Shape("embedding count does not match labels".into()));
    }
    Ok(mine_from_similarity(&cosine_matrix(&batch.embeddings)?, &batch.layout, m))
}

/// Loss components as tape variables. `cluster` is the unweighted mean over
/// eligible forgeries; `total` applies `lambda_f`, `lambda_u` and the toggles.
#[derive(Debug, Clone, Copy)]
pub struct LossVars {
    pub total: Var,
    pub sample: Var,
    pub cluster: Var,
    pub unif: Var,
}

/// Builds every loss term from the `[N, d]` embedding matrix `z`.
pub fn loss_on_tape(tape: &mut Tape, z: Var, layout: &EpisodeLayout, report: &MiningReport, cfg: &LossConfig) -> LossVars {
    let n = layout.len();
    tape.set_scope("loss");
    let zt = tape.transpose(z);
    let g = tape.matmul(z, zt);
    let at = |i: usize, j: usize| i * n + j;

    let sample = if report.records.is_empty() {
        tape.constant(Tensor::scalar(0.0))
    } else {
        let terms = report.records.iter().map(|r| vec![(at(r.anchor, r.negative), 1.0), (at(r.anchor, r.positive), -1.0)]).collect();
        let v = tape.linear_comb(g, terms, vec![cfg.m; report.records.len()]);
        let v = tape.relu(v);
        tape.mean_all(v)
    };

    let mut cluster_terms = Vec::new();
    for (k, &w) in layout.forgery_targets.iter().enumerate() {
        let gen = layout.genuines_of(w);
        if gen.len() < 2 {
            continue;
        }
        let f = layout.n_genuine() + k;
        let pairs = gen.len() * (gen.len() - 1) / 2;
        let mut t: Vec<(usize, f64)> = gen.iter().map(|&i| (at(i, f), 1.0 / gen.len() as f64)).collect();
        for (x, &i) in gen.iter().enumerate() {
            for &j in &gen[x + 1..] {
                t.push((at(i, j), -1.0 / pairs as f64));
            }
        }
        cluster_terms.push(t);
    }
    let cluster = if cluster_terms.is_empty() {
        tape.constant(Tensor::scalar(0.0))
    } else {
        let k = cluster_terms.len();
        let v = tape.linear_comb(g, cluster_terms, vec![cfg.m; k]);
        let v = tape.relu(v);
        tape.mean_all(v)
    };

    // squared distances G_ii + G_jj - 2 G_ij over all ordered pairs
    let terms = (0..n * n)
        .map(|ij| {
            let (i, j) = (ij / n, ij % n);
            if i == j {
                vec![]
            } else {
                vec![(at(i, i), 1.0), (at(j, j), 1.0), (at(i, j), -2.0)]
            }
        })
        .collect();
    let d2 = tape.linear_comb(g, terms, vec![0.0; n * n]);
    let k = tape.scale(d2, -0.5);
    let k = tape.exp(k);
    let k = tape.mean_all(k);
    let unif = tape.ln(k);

    let mut parts = Vec::new();
    if cfg.use_sample {
        parts.push(sample);
    }
    if cfg.use_forgery && cfg.lambda_f != 0.0 {
        parts.push(tape.scale(cluster, cfg.lambda_f));
    }
    if cfg.use_uniformity && cfg.lambda_u != 0.0 {
        parts.push(tape.scale(unif, cfg.lambda_u));
    }
    let total = match parts.split_first() {
        None => tape.constant(Tensor::scalar(0.0)),
        Some((&first, rest)) => rest.iter().fold(first, |acc, &p| tape.add(acc, p)),
    };
    LossVars { total, sample, cluster, unif }
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct LossValues {
    pub total: f64,
    pub sample: f64,
    pub cluster: f64,
    pub unif: f64,
    /// No anchor had both a positive and a negative; the sample term is 0.
    pub empty_anchors: bool,
}

impl LossValues {
    pub fn read(tape: &Tape, v: &LossVars, report: &MiningReport) -> Self {
        LossValues {
            total: tape.value(v.total).item(),
            sample: tape.value(v.sample).item(),
            cluster: tape.value(v.cluster).item(),
            unif: tape.value(v.unif).item(),
            empty_anchors: report.records.is_empty(),
        }
    }

    /// Triplet objective with the forgery term weighted by `lambda_f`.
    pub fn triplet(&self, cfg: &LossConfig) -> f64 {
        self.sample + cfg.lambda_f * self.cluster
    }
}

fn evaluate(batch: &EpisodeBatch, report: &MiningReport, cfg: &LossConfig) -> Result<LossValues> {
    let mut tape = Tape::new();
    let z = tape.constant(batch.matrix()?);
    let v = loss_on_tape(&mut tape, z, &batch.layout, report, cfg);
    Ok(LossValues::read(&tape, &v, report))
}

/// Sample-level plus `lambda_f`-weighted cluster-level triplet loss.
pub fn triplet_loss(batch: &EpisodeBatch, report: &MiningReport, cfg: &LossConfig) -> Result<(f64, LossValues)> {
    let v = evaluate(batch, report, cfg)?;
    Ok((v.triplet(cfg), v))
}

/// `log((1/N^2) sum_{i,j} exp(-‖z_i - z_j‖^2 / 2))`.
pub fn uniformity_loss(z: &[Embedding]) -> Result<f64> {
    check_unit(z)?;
    let layout = EpisodeLayout::new(vec![0; z.len()], vec![], vec![])?;
    let mut tape = Tape::new();
    let zv = tape.constant(stack(z)?);
    let v = loss_on_tape(&mut tape, zv, &layout, &MiningReport::default(), &LossConfig::default());
    Ok(tape.value(v.unif).item())
}

/// Mines the batch and evaluates the full objective.
pub fn total_loss(batch: &EpisodeBatch, cfg: &LossConfig) -> Result<(LossValues, MiningReport)> {
    let report = mine_triplets(batch, cfg.m)?;
    Ok((evaluate(batch, &report, cfg)?, report))
}

/// Total loss and its gradient with respect to the stacked embedding matrix,
/// mining indices held fixed by `report`.
pub fn loss_gradient(batch: &EpisodeBatch, report: &MiningReport, cfg: &LossConfig) -> Result<(f64, Vec<f64>)> {
    let mut tape = Tape::new();
    let m = stack(&batch.embeddings)?;
    let len = m.len();
    let z = tape.leaf(m);
    let v = loss_on_tape(&mut tape, z, &batch.layout, report, cfg);
    let g = tape.backward(v.total)?;
    Ok((tape.value(v.total).item(), g.wrt(z, len)))
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn e(v: &[f64]) -> Embedding {
        Embedding(v.to_vec())
    }

    fn random_unit(rng: &mut ChaCha8Rng, d: usize) -> Embedding {
        let v: Vec<f64> = (0..d).map(|_| rng.random_range(-1.0..1.0)).collect();
        let n = v.iter().map(|x| x * x).sum::<f64>().sqrt();
        Embedding(v.iter().map(|x| x / n).collect())
    }

    fn random_batch(rng: &mut ChaCha8Rng, writers: u64, per: usize, forgeries: usize, d: usize) -> EpisodeBatch {
        let genuine = (0..writers).flat_map(|w| (0..per).map(move |_| w)).map(|w| (random_unit(rng, d), w)).collect::<Vec<_>>();
        let forg = (0..forgeries).map(|k| (random_unit(rng, d), k as u64 % writers, 1000 + k as u64)).collect();
        EpisodeBatch::new(genuine, forg).unwrap()
    }

    fn cfg(m: f64, lambda_f: f64, lambda_u: f64) -> LossConfig {
        LossConfig { m, lambda_f, lambda_u, ..LossConfig::default() }
    }

    #[test]
    fn cosine_matrix_cases() {
        assert_eq!(cosine_matrix(&[e(&[1.0, 0.0]), e(&[0.0, 1.0])]).unwrap(), vec![1.0, 0.0, 0.0, 1.0]);
        let z = e(&[0.6, 0.8]);
        let neg = e(&[-0.6, -0.8]);
        let s = cosine_matrix(&[z, neg]).unwrap();
        assert!((s[1] + 1.0).abs() < 1e-15);
        assert!(matches!(cosine_matrix(&[e(&[1.0, 1.0])]), Err(Error::NonUnit { index: 0, .. })));

        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let z: Vec<Embedding> = (0..12).map(|_| random_unit(&mut rng, 5)).collect();
        let s = cosine_matrix(&z).unwrap();
        for i in 0..12 {
            for j in 0..12 {
                if i != j {
                    let mut naive = 0.0;
                    for k in 0..5 {
                        naive += z[i].0[k] * z[j].0[k];
                    }
                    assert_eq!(s[i * 12 + j], naive);
                }
            }
        }
    }

    #[test]
    fn hand_mining_example() {
        let batch = EpisodeBatch::new(
            vec![(e(&[1.0, 0.0]), 0), (e(&[0.8, 0.6]), 0), (e(&[0.6, 0.8]), 1)],
            vec![(e(&[0.0, 1.0]), 0, 99)],
        )
        .unwrap();
        let r = mine_triplets(&batch, 0.3).unwrap();
        let first = r.records[0];
        assert_eq!((first.anchor, first.positive, first.negative), (0, 1, 2));
        assert_eq!(first.s_ip, 0.8);
        assert!((first.s_in - 0.6).abs() < 1e-15);
        assert!(first.semi_hard);
        // writer 1 has a single genuine
        assert_eq!(r.skipped, vec![(2, SkipReason::NoPositive)]);
    }

    #[test]
    fn single_writer_has_no_negative() {
        let batch = EpisodeBatch::new(vec![(e(&[1.0, 0.0]), 3), (e(&[0.0, 1.0]), 3)], vec![]).unwrap();
        let r = mine_triplets(&batch, 0.2).unwrap();
        assert!(r.records.is_empty());
        assert_eq!(r.skipped, vec![(0, SkipReason::NoNegative), (1, SkipReason::NoNegative)]);
        let (v, _) = total_loss(&batch, &cfg(0.2, 1.0, 0.0)).unwrap();
        assert!(v.empty_anchors);
        assert_eq!(v.sample, 0.0);
    }

    #[test]
    fn identical_embeddings_fall_back_to_hardest() {
        let z = e(&[0.0, 1.0]);
        let batch = EpisodeBatch::new(vec![(z.clone(), 0), (z.clone(), 0), (z.clone(), 1), (z.clone(), 1)], vec![]).unwrap();
        let r = mine_triplets(&batch, 0.2).unwrap();
        assert_eq!(r.records.len(), 4);
        for rec in &r.records {
            assert!(!rec.semi_hard);
            assert_eq!(rec.s_in, 1.0);
        }
        assert_eq!(r.records[0].negative, 2);
        assert_eq!(r.records[2].negative, 0);
    }

    #[test]
    fn report_text_format() {
        let batch = EpisodeBatch::new(vec![(e(&[1.0, 0.0]), 0), (e(&[0.0, 1.0]), 0), (e(&[1.0, 0.0]), 1)], vec![]).unwrap();
        let text = mine_triplets(&batch, 0.2).unwrap().to_text();
        let lines: Vec<&str> = text.lines().collect();
        assert_eq!(lines[0], "anchor p n s_ip s_in semihard");
        assert_eq!(lines[1], "0 1 2 0 1 0");
        assert_eq!(lines.last().unwrap(), &"# skipped 2 no positive");
    }

    #[test]
    fn collapsed_batch_triplet_equals_margin() {
        let z = e(&[0.6, 0.8]);
        let batch = EpisodeBatch::new((0..6).map(|i| (z.clone(), i / 2)).collect(), vec![]).unwrap();
        let c = cfg(0.2, 1.0, 0.1);
        let (v, _) = total_loss(&batch, &c).unwrap();
        assert_eq!(v.sample, 0.2);
        assert_eq!(v.unif, 0.0);
        assert_eq!(v.total, 0.2);
    }

    #[test]
    fn orthogonal_clusters_have_zero_sample_term() {
        let a = e(&[1.0, 0.0]);
        let b = e(&[0.0, 1.0]);
        let batch = EpisodeBatch::new(vec![(a.clone(), 0), (a, 0), (b.clone(), 1), (b, 1)], vec![]).unwrap();
        let (v, _) = total_loss(&batch, &cfg(0.3, 0.0, 0.0)).unwrap();
        assert_eq!(v.sample, 0.0);
        assert_eq!(v.total, 0.0);
    }

    #[test]
    fn cluster_term_hand_example() {
        let batch =
            EpisodeBatch::new(vec![(e(&[1.0, 0.0]), 0), (e(&[0.8, 0.6]), 0)], vec![(e(&[0.6, 0.8]), 0, 7)]).unwrap();
        let c = cfg(0.3, 1.0, 0.0);
        let report = mine_triplets(&batch, 0.3).unwrap();
        let (_, v) = triplet_loss(&batch, &report, &c).unwrap();
        assert!((v.cluster - 0.28).abs() < 1e-12);
    }

    #[test]
    fn cluster_term_needs_two_genuines() {
        let batch = EpisodeBatch::new(vec![(e(&[1.0, 0.0]), 0), (e(&[0.0, 1.0]), 1)], vec![(e(&[0.6, 0.8]), 0, 7)]).unwrap();
        let (v, _) = total_loss(&batch, &cfg(0.3, 1.0, 0.0)).unwrap();
        assert_eq!(v.cluster, 0.0);
    }

    #[test]
    fn uniformity_closed_forms() {
        let z = e(&[0.0, 1.0]);
        assert_eq!(uniformity_loss(&[z.clone(), z.clone(), z]).unwrap(), 0.0);
        let u = uniformity_loss(&[e(&[1.0, 0.0]), e(&[-1.0, 0.0])]).unwrap();
        assert!((u - ((1.0 + (-2f64).exp()) / 2.0).ln()).abs() < 1e-15);
    }

    #[test]
    fn label_collision_rejected() {
        assert!(EpisodeBatch::new(vec![(e(&[1.0, 0.0]), 5)], vec![(e(&[0.0, 1.0]), 5, 5)]).is_err());
        assert!(EpisodeBatch::new(vec![], vec![(e(&[1.0, 0.0]), 5, 6), (e(&[0.0, 1.0]), 5, 6)]).is_err());
    }

    /// Loss recomputed from the similarity matrix with plain loops.
    fn naive_total(batch: &EpisodeBatch, report: &MiningReport, c: &LossConfig) -> (f64, f64, f64) {
        let z = &batch.embeddings;
        let n = z.len();
        let dot = |i: usize, j: usize| -> f64 { (0..z[i].0.len()).map(|k| z[i].0[k] * z[j].0[k]).sum() };
        let mut sample = 0.0;
        for r in &report.records {
            sample += (dot(r.anchor, r.negative) - dot(r.anchor, r.positive) + c.m).max(0.0);
        }
        if !report.records.is_empty() {
            sample /= report.records.len() as f64;
        }
        let ng = batch.layout.n_genuine();
        let mut cluster = 0.0;
        let mut k_count = 0;
        for (k, &w) in batch.layout.forgery_targets.iter().enumerate() {
            let gen: Vec<usize> = (0..ng).filter(|&i| batch.layout.genuine_writers[i] == w).collect();
            if gen.len() < 2 {
                continue;
            }
            let mut pos = 0.0;
            let mut pairs = 0.0;
            for a in 0..gen.len() {
                for b in a + 1..gen.len() {
                    pos += dot(gen[a], gen[b]);
                    pairs += 1.0;
                }
            }
            let neg: f64 = gen.iter().map(|&g| dot(g, ng + k)).sum::<f64>() / gen.len() as f64;
            cluster += (neg - pos / pairs + c.m).max(0.0);
            k_count += 1;
        }
        if k_count > 0 {
            cluster /= k_count as f64;
        }
        let mut acc = 0.0;
        for i in 0..n {
            for j in 0..n {
                let d2: f64 = (0..z[i].0.len()).map(|k| (z[i].0[k] - z[j].0[k]).powi(2)).sum();
                acc += (-d2 / 2.0).exp();
            }
        }
        let unif = (acc / (n * n) as f64).ln();
        (sample, cluster, unif)
    }

    #[test]
    fn total_matches_naive_recomputation() {
        let mut rng = ChaCha8Rng::seed_from_u64(2);
        for trial in 0..50 {
            let batch = random_batch(&mut rng, 4, 3, trial % 5, 6);
            let c = cfg(0.25, 0.7, 0.3);
            let (v, report) = total_loss(&batch, &c).unwrap();
            let (s, k, u) = naive_total(&batch, &report, &c);
            assert!((v.sample - s).abs() < 1e-12);
            assert!((v.cluster - k).abs() < 1e-12);
            assert!((v.unif - u).abs() < 1e-12);
            assert!((v.total - (s + 0.7 * k + 0.3 * u)).abs() < 1e-12);
            let c0 = LossConfig { lambda_u: 0.0, ..c };
            let (v0, _) = total_loss(&batch, &c0).unwrap();
            assert_eq!(v0.total, v0.triplet(&c0));
        }
    }

    #[test]
    fn toggles_zero_components() {
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let batch = random_batch(&mut rng, 3, 3, 3, 4);
        let full = cfg(0.2, 1.0, 0.1);
        let (v, _) = total_loss(&batch, &full).unwrap();
        let none = LossConfig { use_sample: false, use_forgery: false, use_uniformity: false, ..full };
        assert_eq!(total_loss(&batch, &none).unwrap().0.total, 0.0);
        let only_unif = LossConfig { use_sample: false, use_forgery: false, ..full };
        assert!((total_loss(&batch, &only_unif).unwrap().0.total - 0.1 * v.unif).abs() < 1e-15);
    }

    #[test]
    fn gradient_matches_finite_differences() {
        let mut rng = ChaCha8Rng::seed_from_u64(4);
        let c = cfg(0.3, 1.0, 0.5);
        for _ in 0..5 {
            let batch = random_batch(&mut rng, 3, 3, 2, 4);
            let report = mine_triplets(&batch, c.m).unwrap();
            let (_, g) = loss_gradient(&batch, &report, &c).unwrap();
            let h = 1e-6;
            let d = 4;
            for idx in 0..batch.embeddings.len() * d {
                let eval = |delta: f64| {
                    let mut b = batch.clone();
                    b.embeddings[idx / d].0[idx % d] += delta;
                    loss_gradient(&b, &report, &c).unwrap().0
                };
                let fd = (eval(h) - eval(-h)) / (2.0 * h);
                let rel = (fd - g[idx]).abs() / fd.abs().max(g[idx].abs()).max(1e-6);
                assert!(rel < 1e-6, "coord {idx}: fd {fd} analytic {}", g[idx]);
            }
        }
    }

    fn rotate(z: &[Embedding], angle: f64, a: usize, b: usize) -> Vec<Embedding> {
        let (s, c) = angle.sin_cos();
        z.iter()
            .map(|e| {
                let mut v = e.0.clone();
                v[a] = c * e.0[a] - s * e.0[b];
                v[b] = s * e.0[a] + c * e.0[b];
                Embedding(v)
            })
            .collect()
    }

    proptest! {
        #![proptest_config(ProptestConfig::with_cases(64))]

        #[test]
        fn uniformity_bounded(seed in 0u64..10_000, n in 1usize..12, d in 2usize..6) {
            let mut rng = ChaCha8Rng::seed_from_u64(seed);
            let z: Vec<Embedding> = (0..n).map(|_| random_unit(&mut rng, d)).collect();
            let u = uniformity_loss(&z).unwrap();
            prop_assert!((-2.0..=0.0).contains(&u));
        }

        #[test]
        fn loss_terms_non_negative_and_rotation_invariant(seed in 0u64..10_000, f in 0usize..4, angle in -3.0f64..3.0) {
            let mut rng = ChaCha8Rng::seed_from_u64(seed);
            let batch = random_batch(&mut rng, 3, 3, f, 4);
            let c = LossConfig::default();
            let (v, report) = total_loss(&batch, &c).unwrap();
            prop_assert!(v.sample >= 0.0 && v.cluster >= 0.0);
            let rotated = EpisodeBatch { layout: batch.layout.clone(), embeddings: rotate(&batch.embeddings, angle, 0, 2) };
            let (w, report2) = total_loss(&rotated, &c).unwrap();
            prop_assert!((v.total - w.total).abs() < 1e-12);
            prop_assert_eq!(
                report.records.iter().map(|r| (r.positive, r.negative)).collect::<Vec<_>>(),
                report2.records.iter().map(|r| (r.positive, r.negative)).collect::<Vec<_>>()
            );
        }

        #[test]
        fn mining_permutation_invariant(seed in 0u64..10_000) {
            let mut rng = ChaCha8Rng::seed_from_u64(seed);
            let batch = random_batch(&mut rng, 3, 3, 2, 5);
            let ng = batch.layout.n_genuine();
            let n = batch.layout.len();
            // reverse the genuine rows, keep forgeries last
            let perm: Vec<usize> = (0..ng).rev().chain(ng..n).collect();
            let pb = EpisodeBatch {
                layout: EpisodeLayout {
                    genuine_writers: perm[..ng].iter().map(|&i| batch.layout.genuine_writers[i]).collect(),
                    ..batch.layout.clone()
                },
                embeddings: perm.iter().map(|&i| batch.embeddings[i].clone()).collect(),
            };
            let r = mine_triplets(&batch, 0.2).unwrap();
            let rp = mine_triplets(&pb, 0.2).unwrap();
            for rec in &rp.records {
                let orig = r.records.iter().find(|o| o.anchor == perm[rec.anchor]).unwrap();
                prop_assert_eq!(orig.positive, perm[rec.positive]);
                prop_assert_eq!(orig.negative, perm[rec.negative]);
            }
            for rec in &r.records {
                if rec.semi_hard {
                    prop_assert!(rec.s_ip - 0.2 < rec.s_in && rec.s_in < rec.s_ip);
                }
            }
        }
    }
}
