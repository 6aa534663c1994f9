use crate::error::{Error, Result};
use crate::ingest::RawSignature;

/// Binary pen-path raster, row-major `side x side`, values in {0, 1}.
///
/// Coordinates are min-max scaled per axis into `[1, side - 2]` (one pixel of
/// margin) with y pointing up. Consecutive samples are joined with
/// integer line stepping. An axis with zero extent is centered.
pub fn rasterize_trajectory(sig: &RawSignature, side: usize) -> Result<Vec<f64>> {
    if side < 8 {
        return Err(Error::InvalidArgument(format!("raster side {side} < 8")));
    }
    let lo = 1.0;
    let hi = (side - 2) as f64;
    let center = ((side - 1) / 2) as i64;
    let scale = |vals: Vec<f64>| -> Vec<i64> {
        let (mn, mx) = vals
            .iter()
            .fold((f64::INFINITY, f64::NEG_INFINITY), |(a, b), &v| (a.min(v), b.max(v)));
        if !(mx > mn) {
            return vec![center; vals.len()];
        }
        vals.iter()
            .map(|&v| (lo + (v - mn) / (mx - mn) * (hi - lo)).round() as i64)
            .collect()
    };
    let cols = scale(sig.xs());
    let rows: Vec<i64> = scale(sig.ys()).into_iter().map(|r| side as i64 - 1 - r).collect();

    let mut img = vec![0.0; side * side];
    let mut set = |r: i64, c: i64| img[r as usize * side + c as usize] = 1.0;
    set(rows[0], cols[0]);
    for k in 1..cols.len() {
        for (r, c) in line_pixels(rows[k - 1], cols[k - 1], rows[k], cols[k]) {
            set(r, c);
        }
    }
    Ok(img)
}

/// Bresenham line including both endpoints.
pub(crate) fn line_pixels(r0: i64, c0: i64, r1: i64, c1: i64) -> Vec<(i64, i64)> {
    let dc = (c1 - c0).abs();
    let dr = -(r1 - r0).abs();
    let sc = if c0 < c1 { 1 } else { -1 };
    let sr = if r0 < r1 { 1 } else { -1 };
    let (mut r, mut c, mut err) = (r0, c0, dc + dr);
    let mut out = Vec::with_capacity((dc.max(-dr) + 1) as usize);
    loop {
        out.push((r, c));
        if r == r1 && c == c1 {
            break;
        }
        let e2 = 2 * err;
        if e2 >= dr {
            err += dr;
            c += sc;
        }
        if e2 <= dc {
            err += dc;
            r += sr;
        }
    }
    out
}
