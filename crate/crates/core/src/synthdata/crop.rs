use rand::Rng;

use super::BBox;
use crate::error::{Error, Result};
use crate::tensor::Tensor;

/// Bilinear resample of `bbox` from an `[H, W, C]` image into a `[C, out, out]` patch.
/// Samples outside the image are clamped to the border.
pub fn crop_resize(image: &Tensor, bbox: &BBox, out: usize) -> Result<Tensor> {
    if image.ndim() != 3 {
        return Err(Error::shape(format!("expected [H, W, C] image, got {:?}", image.shape())));
    }
    if out == 0 || !(bbox.width() > 0.0 && bbox.height() > 0.0) {
        return Err(Error::invalid(format!("bad crop {bbox:?} -> {out}")));
    }
    let (h, w, c) = (image.shape()[0], image.shape()[1], image.shape()[2]);
    let src = image.data();
    let mut dst = vec![0.0; c * out * out];
    let sy = bbox.height() / out as f64;
    let sx = bbox.width() / out as f64;
    for i in 0..out {
        let y = (bbox.y1 + (i as f64 + 0.5) * sy - 0.5).clamp(0.0, (h - 1) as f64);
        let y0 = y.floor() as usize;
        let y1 = (y0 + 1).min(h - 1);
        let fy = y - y0 as f64;
        for j in 0..out {
            let x = (bbox.x1 + (j as f64 + 0.5) * sx - 0.5).clamp(0.0, (w - 1) as f64);
            let x0 = x.floor() as usize;
            let x1 = (x0 + 1).min(w - 1);
            let fx = x - x0 as f64;
            for ch in 0..c {
                let p = |yy: usize, xx: usize| src[(yy * w + xx) * c + ch];
                let top = p(y0, x0) * (1.0 - fx) + p(y0, x1) * fx;
                let bot = p(y1, x0) * (1.0 - fx) + p(y1, x1) * fx;
                dst[(ch * out + i) * out + j] = top * (1.0 - fy) + bot * fy;
            }
        }
    }
    Tensor::new(vec![c, out, out], dst)
}

/// Randomly jittered, possibly mirrored and rescaled-intensity crop; one contrastive view.
pub fn augment_view<R: Rng + ?Sized>(image: &Tensor, bbox: &BBox, out: usize, rng: &mut R) -> Result<Tensor> {
    let (bw, bh) = (bbox.width(), bbox.height());
    let dx = rng.random_range(-0.1..=0.1) * bw;
    let dy = rng.random_range(-0.1..=0.1) * bh;
    let s = rng.random_range(0.9..=1.1);
    let (cx, cy) = ((bbox.x1 + bbox.x2) / 2.0 + dx, (bbox.y1 + bbox.y2) / 2.0 + dy);
    let jittered = BBox::new(cx - s * bw / 2.0, cy - s * bh / 2.0, cx + s * bw / 2.0, cy + s * bh / 2.0);
    let mut patch = crop_resize(image, &jittered, out)?;
    if rng.random_bool(0.5) {
        let c = patch.shape()[0];
        let d = patch.data_mut();
        for ch in 0..c {
            for i in 0..out {
                d[(ch * out + i) * out..(ch * out + i + 1) * out].reverse();
            }
        }
    }
    let gain = rng.random_range(0.9..=1.1);
    for v in patch.data_mut() {
        *v = (*v * gain).clamp(0.0, 1.0);
    }
    Ok(patch)
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::SeedableRng;

    #[test]
    fn integer_crop_at_native_size_is_exact() {
        let data: Vec<f64> = (0..8 * 8 * 3).map(|i| i as f64).collect();
        let img = Tensor::new(vec![8, 8, 3], data).unwrap();
        let p = crop_resize(&img, &BBox::new(2.0, 1.0, 6.0, 5.0), 4).unwrap();
        for ch in 0..3 {
            for i in 0..4 {
                for j in 0..4 {
                    let expect = img.data()[((1 + i) * 8 + 2 + j) * 3 + ch];
                    assert_eq!(p.data()[(ch * 4 + i) * 4 + j], expect);
                }
            }
        }
    }

    #[test]
    fn constant_image_gives_constant_views() {
        let img = Tensor::full(&[16, 16, 3], 0.5);
        let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(0);
        let v = augment_view(&img, &BBox::new(3.0, 3.0, 9.0, 11.0), 6, &mut rng).unwrap();
        let first = v.data()[0];
        assert!(v.data().iter().all(|&x| (x - first).abs() < 1e-12));
    }
}
