use std::collections::BTreeSet;

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use super::{generate_dataset, DatasetConfig, Domain, SceneDataset};
use crate::error::{Error, Result};
use crate::tensor::Tensor;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct DomainShiftSpec {
    pub brightness_delta: f64,
    pub contrast_scale: f64,
    /// Degrees of rotation about the grey axis of RGB space.
    pub hue_rotation: f64,
    pub novel_class_ids: BTreeSet<usize>,
    /// Share of target frames placed in its few-shot training split.
    pub td_train_fraction: f64,
    /// Share of frames without novel classes routed to the target domain.
    pub td_share: f64,
    /// Share of source frames held out for validation.
    pub sd_val_fraction: f64,
}

impl Default for DomainShiftSpec {
    fn default() -> Self {
        Self {
            brightness_delta: 0.08,
            contrast_scale: 1.25,
            hue_rotation: 25.0,
            novel_class_ids: [8, 9].into_iter().collect(),
            td_train_fraction: 0.25,
            td_share: 0.0,
            sd_val_fraction: 0.25,
        }
    }
}

impl DomainShiftSpec {
    pub fn identity() -> Self {
        Self { brightness_delta: 0.0, contrast_scale: 1.0, hue_rotation: 0.0, novel_class_ids: BTreeSet::new(), ..Self::default() }
    }

    pub fn validate(&self, cfg: &DatasetConfig) -> Result<()> {
        let err = |k: &str, m: &str| Err(Error::config(format!("shift.{k}"), m.to_string()));
        if !self.brightness_delta.is_finite() {
            return err("brightness_delta", "must be finite");
        }
        if !(self.contrast_scale.is_finite() && self.contrast_scale > 0.0) {
            return err("contrast_scale", "must be > 0");
        }
        if !self.hue_rotation.is_finite() {
            return err("hue_rotation", "must be finite");
        }
        if !(self.td_train_fraction > 0.0 && self.td_train_fraction <= 1.0) {
            return err("td_train_fraction", "must be in (0, 1]");
        }
        if !(0.0..=1.0).contains(&self.td_share) {
            return err("td_share", "must be in [0, 1]");
        }
        if !(0.0..1.0).contains(&self.sd_val_fraction) {
            return err("sd_val_fraction", "must be in [0, 1)");
        }
        if let Some(&c) = self.novel_class_ids.iter().find(|&&c| cfg.is_tissue(c) || c >= cfg.k_cls()) {
            return err("novel_class_ids", &format!("class {c} is not an instrument class"));
        }
        Ok(())
    }

    fn is_identity(&self) -> bool {
        self.brightness_delta == 0.0 && self.contrast_scale == 1.0 && self.hue_rotation == 0.0
    }
}

/// Hue rotation about the grey axis, then `clamp(0.5 + c·(v − 0.5) + b)` per value.
/// The identity shift returns a bitwise copy.
pub fn apply_intensity_shift(image: &Tensor, shift: &DomainShiftSpec) -> Result<Tensor> {
    if shift.is_identity() {
        return Ok(image.clone());
    }
    let mut out = image.clone();
    if shift.hue_rotation != 0.0 {
        if image.last_dim() != 3 {
            return Err(Error::shape(format!("hue rotation needs 3 channels, got {:?}", image.shape())));
        }
        let m = grey_axis_rotation(shift.hue_rotation.to_radians());
        for px in out.data_mut().chunks_exact_mut(3) {
            let v = [px[0], px[1], px[2]];
            for r in 0..3 {
                px[r] = m[r][0] * v[0] + m[r][1] * v[1] + m[r][2] * v[2];
            }
        }
    }
    let (c, b) = (shift.contrast_scale, shift.brightness_delta);
    for v in out.data_mut() {
        *v = (0.5 + c * (*v - 0.5) + b).clamp(0.0, 1.0);
    }
    Ok(out)
}

fn grey_axis_rotation(theta: f64) -> [[f64; 3]; 3] {
    let (s, c) = theta.sin_cos();
    let k = 1.0 / 3.0f64.sqrt();
    let t = (1.0 - c) / 3.0;
    [
        [c + t, t - s * k, t + s * k],
        [t + s * k, c + t, t - s * k],
        [t - s * k, t + s * k, c + t],
    ]
}

pub fn split_domains(ds: &SceneDataset, shift: &DomainShiftSpec, seed: u64) -> Result<(SceneDataset, SceneDataset)> {
    split_domains_sized(ds, shift, seed, None, None)
}

/// Partition into source and target domains. Frames holding a novel class and a seeded
/// `td_share` of the rest go to the target, which is intensity-shifted. Optional caps keep
/// the first frames of each domain in generation order.
pub fn split_domains_sized(
    ds: &SceneDataset,
    shift: &DomainShiftSpec,
    seed: u64,
    sd_max: Option<usize>,
    td_max: Option<usize>,
) -> Result<(SceneDataset, SceneDataset)> {
    shift.validate(&ds.config)?;
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let (novel, plain): (Vec<usize>, Vec<usize>) =
        (0..ds.len()).partition(|&i| ds.frames[i].class_ids().iter().any(|c| shift.novel_class_ids.contains(c)));
    let mut order = plain.clone();
    order.shuffle(&mut rng);
    let n_moved = (shift.td_share * plain.len() as f64).round() as usize;
    let moved: BTreeSet<usize> = order[..n_moved].iter().copied().collect();

    let mut td_idx: Vec<usize> = novel.into_iter().chain(moved.iter().copied()).collect();
    td_idx.sort_unstable();
    let mut sd_idx: Vec<usize> = plain.into_iter().filter(|i| !moved.contains(i)).collect();
    if let Some(m) = sd_max {
        sd_idx.truncate(m);
    }
    if let Some(m) = td_max {
        td_idx.truncate(m);
    }
    if td_idx.is_empty() {
        return Err(Error::invalid("empty td split"));
    }

    let sd_frames: Vec<_> = sd_idx.iter().map(|&i| ds.frames[i].clone()).collect();
    let td_frames = td_idx
        .iter()
        .map(|&i| {
            let mut f = ds.frames[i].clone();
            f.image = apply_intensity_shift(&f.image, shift)?;
            Ok(f)
        })
        .collect::<Result<Vec<_>>>()?;

    let n_sd_val = ((shift.sd_val_fraction * sd_frames.len() as f64).round() as usize).min(sd_frames.len().saturating_sub(1));
    let (sd_train, sd_val) = seeded_split(sd_frames.len(), sd_frames.len() - n_sd_val, &mut rng);
    let n_td_train = (shift.td_train_fraction * td_frames.len() as f64 - 1e-9).ceil() as usize;
    let (td_train, td_val) = seeded_split(td_frames.len(), n_td_train.min(td_frames.len()), &mut rng);

    let sd = SceneDataset {
        config: ds.config.clone(),
        seed: ds.seed,
        domain: Domain::Source,
        frames: sd_frames,
        train: sd_train,
        val: sd_val,
        shift: Some(shift.clone()),
    };
    let td = SceneDataset {
        config: ds.config.clone(),
        seed: ds.seed,
        domain: Domain::Target,
        frames: td_frames,
        train: td_train,
        val: td_val,
        shift: Some(shift.clone()),
    };
    Ok((sd, td))
}

fn seeded_split(n: usize, n_first: usize, rng: &mut ChaCha8Rng) -> (Vec<usize>, Vec<usize>) {
    let mut order: Vec<usize> = (0..n).collect();
    order.shuffle(rng);
    let mut a = order[..n_first].to_vec();
    let mut b = order[n_first..].to_vec();
    a.sort_unstable();
    b.sort_unstable();
    (a, b)
}

/// Generate frames until both domains reach the requested sizes, then split.
pub fn generate_domains(
    config: &DatasetConfig,
    shift: &DomainShiftSpec,
    seed: u64,
    sd_frames: usize,
    td_frames: usize,
) -> Result<(SceneDataset, SceneDataset)> {
    shift.validate(config)?;
    let mut n = (sd_frames + td_frames).max(config.n_interactions);
    loop {
        let cfg = DatasetConfig { n_frames: n, ..config.clone() };
        let ds = generate_dataset(&cfg, seed)?;
        let (sd, td) = split_domains_sized(&ds, shift, seed, Some(sd_frames), Some(td_frames))?;
        if sd.len() == sd_frames && td.len() == td_frames {
            return Ok((sd, td));
        }
        if n > 64 * (sd_frames + td_frames + 1) {
            return Err(Error::invalid(format!("cannot reach {sd_frames} source / {td_frames} target frames")));
        }
        n *= 2;
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn ds(n: usize, seed: u64) -> SceneDataset {
        generate_dataset(&DatasetConfig { n_frames: n, ..Default::default() }, seed).unwrap()
    }

    #[test]
    fn identity_shift_keeps_images() {
        let d = ds(24, 2);
        let shift = DomainShiftSpec { td_share: 0.5, ..DomainShiftSpec::identity() };
        let (_, td) = split_domains(&d, &shift, 9).unwrap();
        assert!(!td.is_empty());
        for f in &td.frames {
            assert!(f.image.bitwise_eq(&d.frames[f.id].image));
        }
    }

    #[test]
    fn novel_classes_only_in_target() {
        let d = ds(48, 4);
        let shift = DomainShiftSpec::default();
        let (sd, td) = split_domains(&d, &shift, 1).unwrap();
        for f in &sd.frames {
            assert!(!f.class_ids().contains(&8) && !f.class_ids().contains(&9));
        }
        assert!(td.frames.iter().any(|f| f.class_ids().contains(&8) || f.class_ids().contains(&9)));
        assert_eq!(sd.len() + td.len(), d.len());
    }

    #[test]
    fn contrast_matches_per_pixel_oracle() {
        let d = ds(2, 3);
        let shift = DomainShiftSpec { contrast_scale: 1.5, ..DomainShiftSpec::identity() };
        let img = &d.frames[0].image;
        let out = apply_intensity_shift(img, &shift).unwrap();
        for (v, o) in img.data().iter().zip(out.data()) {
            let expect = (0.5 + 1.5 * (v - 0.5)).clamp(0.0, 1.0);
            assert_eq!(*o, expect);
        }
    }

    #[test]
    fn hue_rotation_preserves_grey_and_full_turn() {
        let grey = Tensor::new(vec![1, 1, 3], vec![0.3, 0.3, 0.3]).unwrap();
        let s = DomainShiftSpec { hue_rotation: 77.0, ..DomainShiftSpec::identity() };
        let out = apply_intensity_shift(&grey, &s).unwrap();
        assert!(out.max_abs_diff(&grey) < 1e-12);
        let rgb = Tensor::new(vec![1, 1, 3], vec![0.6, 0.3, 0.2]).unwrap();
        let full = DomainShiftSpec { hue_rotation: 360.0, ..DomainShiftSpec::identity() };
        assert!(apply_intensity_shift(&rgb, &full).unwrap().max_abs_diff(&rgb) < 1e-12);
        let third = DomainShiftSpec { hue_rotation: 120.0, ..DomainShiftSpec::identity() };
        let r = apply_intensity_shift(&rgb, &third).unwrap();
        // a third of a turn about the grey axis cycles the channels
        assert!((r.data()[1] - 0.6).abs() < 1e-12 && (r.data()[2] - 0.3).abs() < 1e-12);
    }

    #[test]
    fn few_shot_split_size() {
        let d = ds(60, 8);
        for frac in [0.1, 0.23, 0.5, 1.0] {
            let shift = DomainShiftSpec { td_train_fraction: frac, ..Default::default() };
            let (_, td) = split_domains(&d, &shift, 0).unwrap();
            let expect = (frac * td.len() as f64 - 1e-9).ceil() as usize;
            assert_eq!(td.train.len(), expect);
            assert_eq!(td.train.len() + td.val.len(), td.len());
        }
        assert_eq!((0.23f64 * 335.0 - 1e-9).ceil() as usize, 78);
    }

    #[test]
    fn empty_target_rejected() {
        let d = ds(6, 1);
        let shift = DomainShiftSpec { td_share: 0.0, ..DomainShiftSpec::identity() };
        assert!(split_domains(&d, &shift, 0).is_err());
        let bad = DomainShiftSpec { contrast_scale: 0.0, ..Default::default() };
        assert!(split_domains(&d, &bad, 0).is_err());
    }

    #[test]
    fn sized_generation() {
        let (sd, td) = generate_domains(&DatasetConfig::default(), &DomainShiftSpec::default(), 5, 20, 10).unwrap();
        assert_eq!((sd.len(), td.len()), (20, 10));
        assert!(!sd.val.is_empty());
    }
}
