//! Signature collections on disk and their encoded form.
//!
//! A dataset directory holds one signature text file per sample plus
//! `dataset.tsv` (`writer_id<TAB>label<TAB>path`, paths relative to the
//! directory) and `split.tsv` (`writer_id<TAB>train|eval`).

use std::collections::{BTreeMap, BTreeSet};
use std::fs;
use std::path::Path;

use crate::error::{Error, Result};
use crate::gafenc::{encode_stack, rasterize_trajectory, ChannelSet, GafVariant};
use crate::ingest::{parse_signature, KinematicChannels, Label, RawSignature};
use crate::nn::{Fusion, ModelInput};

pub const INDEX_FILE: &str = "dataset.tsv";
pub const SPLIT_FILE: &str = "split.tsv";

/// How raw signatures become network inputs.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct EncodingConfig {
    pub m: usize,
    pub variant: GafVariant,
    pub channels: ChannelSet,
    pub fusion: Fusion,
}

impl Default for EncodingConfig {
    fn default() -> Self {
        EncodingConfig { m: 64, variant: GafVariant::Asymmetric, channels: ChannelSet::default(), fusion: Fusion::CrossAttention }
    }
}

impl EncodingConfig {
    pub fn side(&self) -> usize {
        self.m / 2
    }

    pub fn encode(&self, sig: &RawSignature) -> Result<ModelInput> {
        if self.fusion == Fusion::SingleTrajectory {
            let side = self.side();
            return Ok(ModelInput::from_raster(rasterize_trajectory(sig, side)?, side));
        }
        let k = KinematicChannels::extract(sig, self.m)?;
        Ok(ModelInput::from_stack(&encode_stack(&k, self.variant, self.channels)?))
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Split {
    Train,
    Eval,
}

/// Signatures in index order with the writer split.
#[derive(Debug, Clone, PartialEq)]
pub struct RawDataset {
    pub signatures: Vec<RawSignature>,
    /// File name of each signature relative to the dataset directory.
    pub paths: Vec<String>,
    pub train: Vec<String>,
    pub eval: Vec<String>,
}

impl RawDataset {
    pub fn validate(&self) -> Result<()> {
        if self.signatures.len() != self.paths.len() {
            return Err(Error::Shape("one path per signature".into()));
        }
        let train: BTreeSet<&String> = self.train.iter().collect();
        if let Some(w) = self.eval.iter().find(|w| train.contains(w)) {
            return Err(Error::InvalidArgument(format!("writer {w} is in both train and eval splits")));
        }
        let writers: BTreeSet<&str> =
            self.signatures.iter().filter(|s| s.label == Label::Genuine).map(|s| s.writer_id.as_str()).collect();
        for s in &self.signatures {
            if !writers.contains(s.writer_id.as_str()) {
                return Err(Error::InsufficientData(format!("{} sample targets writer {} with no genuines", s.label, s.writer_id)));
            }
        }
        for w in self.train.iter().chain(&self.eval) {
            if !writers.contains(w.as_str()) {
                return Err(Error::InsufficientData(format!("split lists writer {w} with no genuines")));
            }
        }
        Ok(())
    }

    pub fn load(dir: &Path) -> Result<Self> {
        let index = fs::read_to_string(dir.join(INDEX_FILE))?;
        let mut signatures = Vec::new();
        let mut paths = Vec::new();
        for (n, line) in index.lines().enumerate().filter(|(_, l)| !l.trim().is_empty()) {
            let cols: Vec<&str> = line.split('\t').collect();
            let [writer, label, path] = cols[..] else {
                return Err(Error::Format(format!("{INDEX_FILE} line {}: expected 3 tab-separated fields", n + 1)));
            };
            let label: Label =
                label.parse().map_err(|_| Error::Format(format!("{INDEX_FILE} line {}: unknown label {label}", n + 1)))?;
            let text = fs::read_to_string(dir.join(path))?;
            let sig = parse_signature(&text).map_err(|e| Error::Format(format!("{path}: {e}")))?;
            if sig.writer_id != writer || sig.label != label {
                return Err(Error::Format(format!("{path}: header disagrees with {INDEX_FILE}")));
            }
            signatures.push(sig);
            paths.push(path.to_string());
        }
        let (train, eval) = match fs::read_to_string(dir.join(SPLIT_FILE)) {
            Ok(text) => parse_split(&text)?,
            Err(e) if e.kind() == std::io::ErrorKind::NotFound => default_split(&signatures),
            Err(e) => return Err(e.into()),
        };
        let ds = RawDataset { signatures, paths, train, eval };
        ds.validate()?;
        Ok(ds)
    }

    pub fn save(&self, dir: &Path) -> Result<()> {
        self.validate()?;
        fs::create_dir_all(dir)?;
        let mut index = String::new();
        for (sig, path) in self.signatures.iter().zip(&self.paths) {
            fs::write(dir.join(path), sig.to_text())?;
            index.push_str(&format!("{}\t{}\t{}\n", sig.writer_id, sig.label, path));
        }
        fs::write(dir.join(INDEX_FILE), index)?;
        let mut split = String::new();
        for w in &self.train {
            split.push_str(&format!("{w}\ttrain\n"));
        }
        for w in &self.eval {
            split.push_str(&format!("{w}\teval\n"));
        }
        fs::write(dir.join(SPLIT_FILE), split)?;
        Ok(())
    }

    pub fn encode(&self, cfg: &EncodingConfig) -> Result<Dataset> {
        let mut writers: BTreeMap<String, WriterSamples> = BTreeMap::new();
        for sig in &self.signatures {
            let x = cfg.encode(sig)?;
            let w = writers.entry(sig.writer_id.clone()).or_default();
            match sig.label {
                Label::Genuine => w.genuine.push(x),
                Label::SkilledForgery => w.forgeries.push(x),
                Label::RandomImpostor => w.random.push(x),
            }
        }
        Ok(Dataset { writers, train: self.train.clone(), eval: self.eval.clone() })
    }
}

fn parse_split(text: &str) -> Result<(Vec<String>, Vec<String>)> {
    let mut train = Vec::new();
    let mut eval = Vec::new();
    for (n, line) in text.lines().enumerate().filter(|(_, l)| !l.trim().is_empty()) {
        match line.split_once('\t') {
            Some((w, "train")) => train.push(w.to_string()),
            Some((w, "eval")) => eval.push(w.to_string()),
            _ => return Err(Error::Format(format!("{SPLIT_FILE} line {}: expected writer<TAB>train|eval", n + 1))),
        }
    }
    Ok((train, eval))
}

/// Without a split file the last fifth of writers (sorted by id) is held out.
fn default_split(sigs: &[RawSignature]) -> (Vec<String>, Vec<String>) {
    let writers: Vec<String> = sigs
        .iter()
        .filter(|s| s.label == Label::Genuine)
        .map(|s| s.writer_id.clone())
        .collect::<BTreeSet<_>>()
        .into_iter()
        .collect();
    let n_eval = writers.len() / 5;
    let cut = writers.len() - n_eval;
    (writers[..cut].to_vec(), writers[cut..].to_vec())
}

/// Encoded samples of one writer, each list in file order. `forgeries` are
/// skilled forgeries targeting this writer.
#[derive(Debug, Clone, PartialEq, Default)]
pub struct WriterSamples {
    pub genuine: Vec<ModelInput>,
    pub forgeries: Vec<ModelInput>,
    pub random: Vec<ModelInput>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct Dataset {
    pub writers: BTreeMap<String, WriterSamples>,
    pub train: Vec<String>,
    pub eval: Vec<String>,
}

impl Dataset {
    pub fn writer(&self, id: &str) -> Result<&WriterSamples> {
        self.writers.get(id).ok_or_else(|| Error::InsufficientData(format!("unknown writer {id}")))
    }

    pub fn split(&self, s: Split) -> &[String] {
        match s {
            Split::Train => &self.train,
            Split::Eval => &self.eval,
        }
    }
}
