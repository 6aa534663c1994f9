//! On-disk forms of encoded stacks.
//!
//! `GAF6`: magic, u32 side, u32 channel count, then half-precision values,
//! channel-major then row-major, all little-endian.
//! PGM: binary `P5` greyscale with maxval 255 and `round((g + 1) / 2 * 255)`.

use half::f16;

use super::{GafStack, STACK_CHANNELS};
use crate::error::{Error, Result};

pub const GAF6_MAGIC: &[u8; 4] = b"GAF6";

pub fn write_gaf6(stack: &GafStack) -> Vec<u8> {
    let mut out = Vec::with_capacity(12 + 2 * stack.data.len());
    out.extend_from_slice(GAF6_MAGIC);
    out.extend_from_slice(&(stack.side as u32).to_le_bytes());
    out.extend_from_slice(&(STACK_CHANNELS as u32).to_le_bytes());
    for &v in &stack.data {
        out.extend_from_slice(&f16::from_f64(v).to_le_bytes());
    }
    out
}

pub fn read_gaf6(bytes: &[u8]) -> Result<GafStack> {
    if bytes.len() < 12 || &bytes[..4] != GAF6_MAGIC {
        return Err(Error::Format("missing GAF6 magic".into()));
    }
    let side = u32::from_le_bytes(bytes[4..8].try_into().unwrap()) as usize;
    let channels = u32::from_le_bytes(bytes[8..12].try_into().unwrap()) as usize;
    if channels != STACK_CHANNELS {
        return Err(Error::Format(format!("expected {STACK_CHANNELS} channels, found {channels}")));
    }
    let count = channels * side * side;
    let body = &bytes[12..];
    if body.len() != 2 * count {
        return Err(Error::Format(format!("expected {} value bytes, found {}", 2 * count, body.len())));
    }
    let data = body
        .chunks_exact(2)
        .map(|c| f16::from_le_bytes([c[0], c[1]]).to_f64())
        .collect();
    Ok(GafStack { side, m: 2 * side, data })
}

/// Map a field value in [-1, 1] to a grey level.
pub fn grey_level(g: f64) -> u8 {
    ((g.clamp(-1.0, 1.0) + 1.0) / 2.0 * 255.0).round() as u8
}

/// Binary PGM of one `side x side` channel.
pub fn write_pgm(values: &[f64], side: usize) -> Result<Vec<u8>> {
    if values.len() != side * side {
        return Err(Error::Shape(format!("{} values for a {side}x{side} image", values.len())));
    }
    let mut out = format!("P5\n{side} {side}\n255\n").into_bytes();
    out.extend(values.iter().map(|&g| grey_level(g)));
    Ok(out)
}

/// Parse a binary PGM with maxval 255 into (width, height, pixels).
pub fn read_pgm(bytes: &[u8]) -> Result<(usize, usize, Vec<u8>)> {
    let mut fields = Vec::new();
    let mut pos = 0;
    while fields.len() < 4 {
        while pos < bytes.len() && bytes[pos].is_ascii_whitespace() {
            pos += 1;
        }
        let start = pos;
        while pos < bytes.len() && !bytes[pos].is_ascii_whitespace() {
            pos += 1;
        }
        if start == pos {
            return Err(Error::Format("truncated PGM header".into()));
        }
        fields.push(std::str::from_utf8(&bytes[start..pos]).map_err(|_| Error::Format("PGM header".into()))?);
    }
    pos += 1;
    if fields[0] != "P5" || fields[3] != "255" {
        return Err(Error::Format("not a P5/255 PGM".into()));
    }
    let parse = |s: &str| s.parse::<usize>().map_err(|_| Error::Format("PGM dimensions".into()));
    let (w, h) = (parse(fields[1])?, parse(fields[2])?);
    let pixels = bytes.get(pos..).unwrap_or_default().to_vec();
    if pixels.len() != w * h {
        return Err(Error::Format(format!("expected {} pixels, found {}", w * h, pixels.len())));
    }
    Ok((w, h, pixels))
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::{Rng, SeedableRng};

    #[test]
    fn gaf6_quantization_error_bounded() {
        let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(1);
        let side = 16;
        let data: Vec<f64> = (0..6 * side * side).map(|_| rng.random_range(-1.0..=1.0)).collect();
        let stack = GafStack { side, m: 32, data };
        let bytes = write_gaf6(&stack);
        assert_eq!(bytes.len(), 12 + 2 * 6 * 256);
        let back = read_gaf6(&bytes).unwrap();
        assert_eq!(back.side, side);
        let max_err = stack.data.iter().zip(&back.data).map(|(a, b)| (a - b).abs()).fold(0.0, f64::max);
        assert!(max_err <= 1e-3, "{max_err}");
        // a second pass is lossless
        assert_eq!(write_gaf6(&back), bytes);
    }

    #[test]
    fn gaf6_rejects_garbage() {
        assert!(read_gaf6(b"GAF5\0\0\0\0\0\0\0\0").is_err());
        let mut b = write_gaf6(&GafStack { side: 2, m: 4, data: vec![0.0; 24] });
        b.pop();
        assert!(read_gaf6(&b).is_err());
    }

    #[test]
    fn pgm_mapping_and_parse() {
        assert_eq!(grey_level(-1.0), 0);
        assert_eq!(grey_level(1.0), 255);
        assert_eq!(grey_level(0.0), 128);
        let img = write_pgm(&[-1.0, 0.0, 0.5, 1.0], 2).unwrap();
        assert!(img.starts_with(b"P5\n2 2\n255\n"));
        let (w, h, px) = read_pgm(&img).unwrap();
        assert_eq!((w, h), (2, 2));
        assert_eq!(px, vec![0, 128, 191, 255]);
    }
}
