use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, StandardNormal};

use super::BBox;
use crate::error::{Error, Result};

pub const SPATIAL_DIM: usize = 12;

/// Pairwise box layout: `[cx_a, cy_a, w_a, h_a, cx_b, cy_b, w_b, h_b, Δcx, Δcy, area_a, area_b]`,
/// every component normalised by the image width/height. `Δ = a − b`.
pub fn encode_spatial_feature(a: &BBox, b: &BBox, image_w: usize, image_h: usize) -> Result<[f64; SPATIAL_DIM]> {
    if image_w == 0 || image_h == 0 {
        return Err(Error::invalid("image size must be positive"));
    }
    for bx in [a, b] {
        if !(bx.x2 > bx.x1 && bx.y2 > bx.y1) {
            return Err(Error::invalid(format!("zero-area box {bx:?}")));
        }
    }
    let (iw, ih) = (image_w as f64, image_h as f64);
    let geo = |bx: &BBox| {
        let w = (bx.x2 - bx.x1) / iw;
        let h = (bx.y2 - bx.y1) / ih;
        let cx = (bx.x1 + bx.x2) / 2.0 / iw;
        let cy = (bx.y1 + bx.y2) / 2.0 / ih;
        (cx, cy, w, h)
    };
    let (cxa, cya, wa, ha) = geo(a);
    let (cxb, cyb, wb, hb) = geo(b);
    Ok([cxa, cya, wa, ha, cxb, cyb, wb, hb, cxa - cxb, cya - cyb, wa * ha, wb * hb])
}

/// Deterministic unit-norm pseudo word vector for a class.
pub fn semantic_embedding(class_id: usize, dim: usize) -> Vec<f64> {
    let mut rng = ChaCha8Rng::seed_from_u64(0x5e3a_17c0_0000_0000 ^ class_id as u64);
    loop {
        let v: Vec<f64> = (0..dim).map(|_| StandardNormal.sample(&mut rng)).collect();
        let norm = v.iter().map(|x| x * x).sum::<f64>().sqrt();
        if norm > 1e-6 {
            return v.into_iter().map(|x| x / norm).collect();
        }
    }
}
