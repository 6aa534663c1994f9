//! Bindings behind the static page in `www/`: GAF stacks and pen rasters of
//! synthetic signatures, and FAR/FRR curves with the EER for pasted scores.

use gafsv::gafenc::io::grey_level;
use gafsv::gafenc::{encode_stack, rasterize_trajectory, ChannelSet, GafVariant};
use gafsv::ingest::{parse_signature, KinematicChannels, RawSignature};
use gafsv::synthgen::{genuine_sample, make_writer, skilled_forgery};
use gafsv::verify::{compute_eer, far, frr};
use rand_chacha::rand_core::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::Serialize;
use wasm_bindgen::prelude::*;

fn err(e: impl std::fmt::Display) -> JsError {
    JsError::new(&e.to_string())
}

/// Sample `index` of writer `seed`, genuine or a skilled forgery.
pub fn synthetic(seed: u32, index: u32, forgery: bool, warp: f64) -> gafsv::Result<RawSignature> {
    let w = make_writer(seed as u64);
    let mut rng = ChaCha8Rng::seed_from_u64(((seed as u64) << 32) | index as u64);
    rng.set_stream(forgery as u64);
    if forgery {
        skilled_forgery(&w, warp, &mut rng)
    } else {
        genuine_sample(&w, &mut rng)
    }
}

pub fn stack_pixels(sig: &RawSignature, m: usize, variant: &str, channels: &str) -> gafsv::Result<Vec<u8>> {
    let variant: GafVariant = variant.parse()?;
    let channels: ChannelSet = channels.parse()?;
    let k = KinematicChannels::extract(sig, m)?;
    Ok(encode_stack(&k, variant, channels)?.data.iter().map(|&g| grey_level(g)).collect())
}

/// Six `M/2 x M/2` grey images, channel-major, for a synthetic sample.
#[wasm_bindgen]
pub fn gaf_images(seed: u32, index: u32, forgery: bool, warp: f64, m: usize, variant: &str, channels: &str) -> Result<Vec<u8>, JsError> {
    let sig = synthetic(seed, index, forgery, warp).map_err(err)?;
    stack_pixels(&sig, m, variant, channels).map_err(err)
}

/// Same as `gaf_images` for a signature in the text format.
#[wasm_bindgen]
pub fn gaf_images_from_text(text: &str, m: usize, variant: &str, channels: &str) -> Result<Vec<u8>, JsError> {
    let sig = parse_signature(text).map_err(err)?;
    stack_pixels(&sig, m, variant, channels).map_err(err)
}

/// Pen-path raster, 255 where ink is.
#[wasm_bindgen]
pub fn trajectory_image(seed: u32, index: u32, forgery: bool, warp: f64, side: usize) -> Result<Vec<u8>, JsError> {
    let sig = synthetic(seed, index, forgery, warp).map_err(err)?;
    let r = rasterize_trajectory(&sig, side).map_err(err)?;
    Ok(r.iter().map(|&v| if v > 0.0 { 255 } else { 0 }).collect())
}

#[wasm_bindgen]
pub fn signature_text(seed: u32, index: u32, forgery: bool, warp: f64) -> Result<String, JsError> {
    Ok(synthetic(seed, index, forgery, warp).map_err(err)?.to_text())
}

#[derive(Debug, Serialize)]
pub struct CurvePoint {
    pub tau: f64,
    pub far: f64,
    pub frr: f64,
}

#[derive(Debug, Serialize)]
pub struct EerCurve {
    pub eer: f64,
    pub tau: f64,
    pub curve: Vec<CurvePoint>,
}

pub fn parse_scores(text: &str) -> gafsv::Result<Vec<f64>> {
    text.split(|c: char| c == ',' || c.is_whitespace())
        .filter(|t| !t.is_empty())
        .map(|t| t.parse().map_err(|_| gafsv::Error::InvalidArgument(format!("not a number: {t}"))))
        .collect()
}

pub fn curve(genuine: &[f64], impostor: &[f64]) -> gafsv::Result<EerCurve> {
    let e = compute_eer(genuine, impostor)?;
    let mut taus: Vec<f64> = genuine.iter().chain(impostor).copied().collect();
    taus.sort_by(f64::total_cmp);
    taus.dedup();
    let mut pts = vec![CurvePoint { tau: taus[0], far: 1.0, frr: 0.0 }];
    pts.extend(taus.iter().map(|&t| CurvePoint { tau: t, far: far(impostor, t), frr: frr(genuine, t) }));
    Ok(EerCurve { eer: e.eer, tau: e.tau, curve: pts })
}

/// FAR/FRR at every distinct score plus the EER, as JSON.
#[wasm_bindgen]
pub fn eer_curve(genuine: &str, impostor: &str) -> Result<String, JsError> {
    let c = curve(&parse_scores(genuine).map_err(err)?, &parse_scores(impostor).map_err(err)?).map_err(err)?;
    serde_json::to_string(&c).map_err(err)
}
