//! Synthetic surgical-scene-like frames: one tissue blob, a few textured
//! instrument blobs, multi-hot interaction edges and templated captions.

pub mod crop;
pub mod domain;
pub mod features;
pub mod io;
pub mod vocab;

use std::collections::BTreeSet;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

pub use crop::{augment_view, crop_resize};
pub use domain::{apply_intensity_shift, generate_domains, split_domains, split_domains_sized, DomainShiftSpec};
pub use features::{encode_spatial_feature, semantic_embedding, SPATIAL_DIM};
pub use io::{load_dataset, save_dataset};
pub use vocab::{Vocabulary, BOS, EOS, PAD, UNK};

use crate::error::{Error, Result};
use crate::tensor::Tensor;

const TISSUE_NAMES: [&str; 4] = ["kidney", "liver", "bowel", "fascia"];
const INSTRUMENT_NAMES: [&str; 9] = [
    "bipolar-forceps",
    "prograsp-forceps",
    "monopolar-curved-scissors",
    "clip-applier",
    "suction",
    "ultrasound-probe",
    "large-needle-driver",
    "spatulated-monopolar-cautery",
    "maryland-dissector",
];
const INTERACTION_NAMES: [&str; 11] = [
    "manipulated",
    "grasped",
    "retracted",
    "cut",
    "cauterized",
    "looped",
    "suctioned",
    "clipped",
    "sensed",
    "stapled",
    "sutured",
];
const GRAMMAR_WORDS: [&str; 4] = ["is", "being", "by", "and"];

/// Interaction bit set whenever an instrument box overlaps the tissue box.
pub const CONTACT_INTERACTION: usize = 0;

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct BBox {
    pub x1: f64,
    pub y1: f64,
    pub x2: f64,
    pub y2: f64,
}

impl BBox {
    pub fn new(x1: f64, y1: f64, x2: f64, y2: f64) -> Self {
        Self { x1, y1, x2, y2 }
    }

    pub fn width(&self) -> f64 {
        self.x2 - self.x1
    }

    pub fn height(&self) -> f64 {
        self.y2 - self.y1
    }

    pub fn area(&self) -> f64 {
        self.width().max(0.0) * self.height().max(0.0)
    }

    pub fn intersection_area(&self, o: &BBox) -> f64 {
        let w = self.x2.min(o.x2) - self.x1.max(o.x1);
        let h = self.y2.min(o.y2) - self.y1.max(o.y1);
        w.max(0.0) * h.max(0.0)
    }

    pub fn intersects(&self, o: &BBox) -> bool {
        self.intersection_area(o) > 0.0
    }

    fn expanded(&self, m: f64) -> BBox {
        BBox::new(self.x1 - m, self.y1 - m, self.x2 + m, self.y2 + m)
    }

    pub fn is_valid(&self, w: usize, h: usize) -> bool {
        0.0 <= self.x1 && self.x1 < self.x2 && self.x2 <= w as f64 && 0.0 <= self.y1 && self.y1 < self.y2 && self.y2 <= h as f64
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Role {
    Tissue,
    Instrument,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Node {
    pub class_id: usize,
    pub role: Role,
    pub bbox: BBox,
}

/// Tissue–instrument relation; `tissue` and `instrument` index into `SceneInstance::nodes`.
#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct Edge {
    pub tissue: usize,
    pub instrument: usize,
    pub interactions: Vec<u8>,
}

impl Edge {
    pub fn labels(&self) -> Vec<f64> {
        self.interactions.iter().map(|&b| b as f64).collect()
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SceneInstance {
    /// Index of the frame in the dataset it was generated in; kept across domain splits.
    pub id: usize,
    /// `[H, W, 3]`, values in `[0, 1]`.
    pub image: Tensor,
    pub nodes: Vec<Node>,
    pub edges: Vec<Edge>,
    pub caption: Vec<usize>,
}

impl SceneInstance {
    pub fn tissue_index(&self) -> usize {
        self.nodes.iter().position(|n| n.role == Role::Tissue).expect("frame without tissue node")
    }

    pub fn class_ids(&self) -> BTreeSet<usize> {
        self.nodes.iter().map(|n| n.class_id).collect()
    }

    pub fn image_hw(&self) -> (usize, usize) {
        (self.image.shape()[0], self.image.shape()[1])
    }

    pub fn validate(&self, cfg: &DatasetConfig) -> Result<()> {
        let bad = |m: String| Err(Error::invalid(format!("frame {}: {m}", self.id)));
        if self.image.shape() != [cfg.image_height, cfg.image_width, 3] {
            return bad(format!("image shape {:?}", self.image.shape()));
        }
        if self.nodes.iter().filter(|n| n.role == Role::Tissue).count() != 1 {
            return bad("expected exactly one tissue node".into());
        }
        if !self.nodes.iter().any(|n| n.role == Role::Instrument) {
            return bad("no instrument node".into());
        }
        for n in &self.nodes {
            if n.class_id >= cfg.k_cls() || !n.bbox.is_valid(cfg.image_width, cfg.image_height) {
                return bad(format!("invalid node {n:?}"));
            }
        }
        for e in &self.edges {
            let ok = e.tissue < self.nodes.len()
                && e.instrument < self.nodes.len()
                && self.nodes[e.tissue].role == Role::Tissue
                && self.nodes[e.instrument].role == Role::Instrument
                && e.interactions.len() == cfg.n_interactions
                && e.interactions.iter().all(|&b| b <= 1);
            if !ok {
                return bad(format!("invalid edge {e:?}"));
            }
        }
        let c = &self.caption;
        if c.len() < 2 || c[0] != BOS || c[c.len() - 1] != EOS || c.len() > cfg.max_caption_len {
            return bad("malformed caption".into());
        }
        Ok(())
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct DatasetConfig {
    pub n_frames: usize,
    pub image_height: usize,
    pub image_width: usize,
    pub n_tissue_classes: usize,
    pub n_instrument_classes: usize,
    /// `K_int`.
    pub n_interactions: usize,
    pub max_instruments: usize,
    pub max_caption_len: usize,
}

impl Default for DatasetConfig {
    fn default() -> Self {
        Self {
            n_frames: 96,
            image_height: 64,
            image_width: 64,
            n_tissue_classes: 1,
            n_instrument_classes: 9,
            n_interactions: 5,
            max_instruments: 3,
            max_caption_len: 20,
        }
    }
}

impl DatasetConfig {
    /// `K_cls`: tissue classes first, then instrument classes.
    pub fn k_cls(&self) -> usize {
        self.n_tissue_classes + self.n_instrument_classes
    }

    pub fn validate(&self) -> Result<()> {
        let err = |k: &str, m: String| Err(Error::config(format!("dataset.{k}"), m));
        if self.k_cls() < 2 || self.n_tissue_classes < 1 || self.n_instrument_classes < 1 {
            return err("n_instrument_classes", "need at least one tissue and one instrument class".into());
        }
        if self.n_frames < 1 {
            return err("n_frames", "must be at least 1".into());
        }
        if self.image_height < 32 || self.image_width < 32 {
            return err("image_height", format!("image {}x{} is smaller than 32x32", self.image_height, self.image_width));
        }
        if self.n_interactions < 2 {
            return err("n_interactions", "must be at least 2".into());
        }
        if self.n_instrument_classes < self.n_interactions - 1 {
            return err(
                "n_interactions",
                format!("{} instrument classes cannot cover {} interaction classes", self.n_instrument_classes, self.n_interactions),
            );
        }
        if self.max_instruments < 1 || self.max_instruments > self.n_instrument_classes {
            return err("max_instruments", "must be in [1, n_instrument_classes]".into());
        }
        if self.max_caption_len < 4 * self.max_instruments + 4 {
            return err("max_caption_len", format!("must be at least {}", 4 * self.max_instruments + 4));
        }
        Ok(())
    }

    pub fn is_tissue(&self, class_id: usize) -> bool {
        class_id < self.n_tissue_classes
    }

    pub fn class_name(&self, class_id: usize) -> String {
        if self.is_tissue(class_id) {
            TISSUE_NAMES.get(class_id).map_or_else(|| format!("tissue-{class_id}"), |s| s.to_string())
        } else {
            let i = class_id - self.n_tissue_classes;
            INSTRUMENT_NAMES.get(i).map_or_else(|| format!("instrument-{i}"), |s| s.to_string())
        }
    }

    pub fn interaction_name(&self, k: usize) -> String {
        INTERACTION_NAMES.get(k).map_or_else(|| format!("interaction-{k}"), |s| s.to_string())
    }

    /// The interaction an instrument class always performs; never the contact bit.
    pub fn primary_interaction(&self, class_id: usize) -> usize {
        1 + (class_id - self.n_tissue_classes) % (self.n_interactions - 1)
    }

    pub fn vocabulary(&self) -> Vocabulary {
        let mut words: Vec<String> = GRAMMAR_WORDS.iter().map(|s| s.to_string()).collect();
        words.extend((0..self.n_tissue_classes).map(|c| self.class_name(c)));
        words.extend((0..self.n_interactions).map(|k| self.interaction_name(k)));
        words.extend((self.n_tissue_classes..self.k_cls()).map(|c| self.class_name(c)));
        Vocabulary::new(words).expect("generated vocabulary is unique")
    }

    pub fn config_hash(&self) -> String {
        let json = serde_json::to_vec(self).expect("config serializes");
        hex::encode(&Sha256::digest(&json)[..8])
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Domain {
    Full,
    Source,
    Target,
}

impl Domain {
    pub fn as_str(self) -> &'static str {
        match self {
            Domain::Full => "full",
            Domain::Source => "source",
            Domain::Target => "target",
        }
    }

    pub fn parse(s: &str) -> Option<Self> {
        match s {
            "full" => Some(Domain::Full),
            "source" => Some(Domain::Source),
            "target" => Some(Domain::Target),
            _ => None,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SceneDataset {
    pub config: DatasetConfig,
    pub seed: u64,
    pub domain: Domain,
    pub frames: Vec<SceneInstance>,
    /// Positions into `frames`.
    pub train: Vec<usize>,
    pub val: Vec<usize>,
    pub shift: Option<DomainShiftSpec>,
}

impl SceneDataset {
    pub fn len(&self) -> usize {
        self.frames.len()
    }

    pub fn is_empty(&self) -> bool {
        self.frames.is_empty()
    }

    pub fn vocabulary(&self) -> Vocabulary {
        self.config.vocabulary()
    }

    pub fn class_set(&self) -> BTreeSet<usize> {
        self.frames.iter().flat_map(|f| f.class_ids()).collect()
    }

    pub fn train_frames(&self) -> Vec<&SceneInstance> {
        self.train.iter().map(|&i| &self.frames[i]).collect()
    }

    pub fn val_frames(&self) -> Vec<&SceneInstance> {
        self.val.iter().map(|&i| &self.frames[i]).collect()
    }

    pub fn all_frames(&self) -> Vec<&SceneInstance> {
        self.frames.iter().collect()
    }

    /// Bitwise equality including image bits.
    pub fn bitwise_eq(&self, o: &SceneDataset) -> bool {
        self.config == o.config
            && self.seed == o.seed
            && self.domain == o.domain
            && self.train == o.train
            && self.val == o.val
            && self.shift == o.shift
            && self.frames.len() == o.frames.len()
            && self.frames.iter().zip(&o.frames).all(|(a, b)| {
                a.id == b.id && a.nodes == b.nodes && a.edges == b.edges && a.caption == b.caption && a.image.bitwise_eq(&b.image)
            })
    }
}

pub fn generate_dataset(config: &DatasetConfig, seed: u64) -> Result<SceneDataset> {
    config.validate()?;
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let vocab = config.vocabulary();
    let frames = (0..config.n_frames)
        .map(|f| generate_frame(config, &vocab, f, &mut rng))
        .collect::<Vec<_>>();
    Ok(SceneDataset {
        config: config.clone(),
        seed,
        domain: Domain::Full,
        train: (0..frames.len()).collect(),
        val: Vec::new(),
        frames,
        shift: None,
    })
}

fn generate_frame(cfg: &DatasetConfig, vocab: &Vocabulary, f: usize, rng: &mut ChaCha8Rng) -> SceneInstance {
    let (w, h) = (cfg.image_width as f64, cfg.image_height as f64);
    let tissue_class = rng.random_range(0..cfg.n_tissue_classes);
    let tw = (w * rng.random_range(0.40..0.60)).round();
    let th = (h * rng.random_range(0.40..0.60)).round();
    let tx = (rng.random_range(0.2 * w..=(0.8 * w - tw).max(0.2 * w))).round();
    let ty = (rng.random_range(0.2 * h..=(0.8 * h - th).max(0.2 * h))).round();
    let tissue_box = BBox::new(tx, ty, tx + tw, ty + th);

    // Stratified coverage: frame k < K_int is guaranteed to show interaction k.
    let n_inst = rng.random_range(1..=cfg.max_instruments);
    let mut pool: Vec<usize> = (0..cfg.n_instrument_classes).collect();
    let mut chosen = Vec::with_capacity(n_inst);
    let forced = (f > 0 && f < cfg.n_interactions).then(|| f - 1);
    if let Some(i) = forced {
        chosen.push(i);
        pool.retain(|&x| x != i);
    }
    while chosen.len() < n_inst {
        let j = rng.random_range(0..pool.len());
        chosen.push(pool.swap_remove(j));
    }
    let force_contact = f == 0;

    let mut nodes = vec![Node { class_id: tissue_class, role: Role::Tissue, bbox: tissue_box }];
    let mut placed: Vec<BBox> = Vec::new();
    for (slot, &inst) in chosen.iter().enumerate() {
        let contact = (force_contact && slot == 0) || rng.random_bool(0.5);
        let bbox = place_instrument(cfg, &tissue_box, &placed, contact, rng);
        placed.push(bbox);
        nodes.push(Node { class_id: cfg.n_tissue_classes + inst, role: Role::Instrument, bbox });
    }

    let mut edges = Vec::with_capacity(chosen.len());
    for (ni, node) in nodes.iter().enumerate().skip(1) {
        let mut bits = vec![0u8; cfg.n_interactions];
        bits[cfg.primary_interaction(node.class_id)] = 1;
        if node.bbox.intersects(&tissue_box) {
            bits[CONTACT_INTERACTION] = 1;
        }
        edges.push(Edge { tissue: 0, instrument: ni, interactions: bits });
    }

    let image = render(cfg, &nodes, rng);
    let caption = build_caption(cfg, vocab, &nodes);
    SceneInstance { id: f, image, nodes, edges, caption }
}

fn place_instrument(cfg: &DatasetConfig, tissue: &BBox, others: &[BBox], contact: bool, rng: &mut ChaCha8Rng) -> BBox {
    let (w, h) = (cfg.image_width as f64, cfg.image_height as f64);
    let iw = (w * rng.random_range(0.16..0.25)).round().max(4.0);
    let ih = (h * rng.random_range(0.16..0.25)).round().max(4.0);
    let clamp_box = |cx: f64, cy: f64| {
        let x1 = (cx - iw / 2.0).round().clamp(0.0, w - iw);
        let y1 = (cy - ih / 2.0).round().clamp(0.0, h - ih);
        BBox::new(x1, y1, x1 + iw, y1 + ih)
    };
    let inside = |rng: &mut ChaCha8Rng| {
        let mx = tissue.width() * 0.25;
        let my = tissue.height() * 0.25;
        let cx = rng.random_range(tissue.x1 + mx..=tissue.x2 - mx);
        let cy = rng.random_range(tissue.y1 + my..=tissue.y2 - my);
        clamp_box(cx, cy)
    };
    let clear_of_others = |b: &BBox| others.iter().all(|o| !b.intersects(o));
    let mut fallback = None;
    for _ in 0..200 {
        let b = if contact {
            inside(rng)
        } else {
            let x1 = rng.random_range(0.0..=w - iw).round();
            let y1 = rng.random_range(0.0..=h - ih).round();
            BBox::new(x1, y1, x1 + iw, y1 + ih)
        };
        let role_ok = if contact { b.intersects(tissue) } else { !b.intersects(&tissue.expanded(2.0)) };
        if role_ok && clear_of_others(&b) {
            return b;
        }
        if role_ok && fallback.is_none() {
            fallback = Some(b);
        }
    }
    fallback.unwrap_or_else(|| inside(rng))
}

fn hsv(hue_deg: f64, s: f64, v: f64) -> [f64; 3] {
    let c = v * s;
    let hp = (hue_deg.rem_euclid(360.0)) / 60.0;
    let x = c * (1.0 - (hp % 2.0 - 1.0).abs());
    let (r, g, b) = match hp as usize {
        0 => (c, x, 0.0),
        1 => (x, c, 0.0),
        2 => (0.0, c, x),
        3 => (0.0, x, c),
        4 => (x, 0.0, c),
        _ => (c, 0.0, x),
    };
    let m = v - c;
    [r + m, g + m, b + m]
}

/// Base colour of an instrument class; distinct hues spread over the wheel.
pub fn instrument_color(cfg: &DatasetConfig, class_id: usize) -> [f64; 3] {
    let i = class_id - cfg.n_tissue_classes;
    hsv(360.0 * (i as f64 + 0.5) / cfg.n_instrument_classes as f64, 0.75, 0.9)
}

fn instrument_texture(i: usize, x: usize, y: usize) -> f64 {
    let period = 2 + (i / 4) % 2;
    match i % 4 {
        0 => 1.0,
        1 => if (y / period) % 2 == 0 { 1.0 } else { 0.55 },
        2 => if (x / period) % 2 == 0 { 1.0 } else { 0.55 },
        _ => if (x / period + y / period) % 2 == 0 { 1.0 } else { 0.55 },
    }
}

fn render(cfg: &DatasetConfig, nodes: &[Node], rng: &mut ChaCha8Rng) -> Tensor {
    let (w, h) = (cfg.image_width, cfg.image_height);
    let mut img = vec![0.0; h * w * 3];
    let bg = [0.22, 0.10, 0.09];
    for px in img.chunks_exact_mut(3) {
        for c in 0..3 {
            px[c] = bg[c] + rng.random_range(-0.04..0.04);
        }
    }
    for node in nodes {
        let b = &node.bbox;
        let (x1, y1, x2, y2) = (b.x1 as usize, b.y1 as usize, b.x2 as usize, b.y2 as usize);
        match node.role {
            Role::Tissue => {
                let base = hsv(5.0 + 25.0 * node.class_id as f64, 0.45, 0.8);
                let (cx, cy) = ((b.x1 + b.x2) / 2.0, (b.y1 + b.y2) / 2.0);
                let (rx, ry) = (b.width() / 2.0, b.height() / 2.0);
                for y in y1..y2 {
                    for x in x1..x2 {
                        let dx = (x as f64 + 0.5 - cx) / rx;
                        let dy = (y as f64 + 0.5 - cy) / ry;
                        if dx * dx + dy * dy > 1.0 {
                            continue;
                        }
                        let t = 0.88 + 0.12 * (0.6 * x as f64 + 0.4 * y as f64).sin();
                        let px = &mut img[(y * w + x) * 3..(y * w + x) * 3 + 3];
                        for c in 0..3 {
                            px[c] = base[c] * t + rng.random_range(-0.03..0.03);
                        }
                    }
                }
            }
            Role::Instrument => {
                let base = instrument_color(cfg, node.class_id);
                let i = node.class_id - cfg.n_tissue_classes;
                for y in y1..y2 {
                    for x in x1..x2 {
                        let t = instrument_texture(i, x - x1, y - y1);
                        let px = &mut img[(y * w + x) * 3..(y * w + x) * 3 + 3];
                        for c in 0..3 {
                            px[c] = base[c] * t + rng.random_range(-0.03..0.03);
                        }
                    }
                }
            }
        }
    }
    for v in &mut img {
        *v = v.clamp(0.0, 1.0);
    }
    Tensor::new(vec![h, w, 3], img).expect("image buffer matches shape")
}

/// `BOS <tissue> is being <interaction> by <instrument> (and <interaction> by <instrument>)* EOS`,
/// clauses ordered by instrument class id.
fn build_caption(cfg: &DatasetConfig, vocab: &Vocabulary, nodes: &[Node]) -> Vec<usize> {
    let tissue = nodes.iter().find(|n| n.role == Role::Tissue).expect("tissue node");
    let mut inst: Vec<usize> = nodes.iter().filter(|n| n.role == Role::Instrument).map(|n| n.class_id).collect();
    inst.sort_unstable();
    let mut words = vec![cfg.class_name(tissue.class_id), "is".into(), "being".into()];
    for (k, &c) in inst.iter().enumerate() {
        if k > 0 {
            words.push("and".into());
        }
        words.push(cfg.interaction_name(cfg.primary_interaction(c)));
        words.push("by".into());
        words.push(cfg.class_name(c));
    }
    let mut ids = vec![BOS];
    ids.extend(words.iter().map(|w| vocab.id(w)));
    ids.push(EOS);
    ids
}

#[cfg(test)]
mod tests {
    use super::*;

    fn small(n: usize) -> DatasetConfig {
        DatasetConfig { n_frames: n, ..Default::default() }
    }

    #[test]
    fn deterministic() {
        let a = generate_dataset(&small(4), 7).unwrap();
        let b = generate_dataset(&small(4), 7).unwrap();
        assert!(a.bitwise_eq(&b));
        let c = generate_dataset(&small(4), 8).unwrap();
        assert!(!a.bitwise_eq(&c));
    }

    #[test]
    fn one_tissue_node_per_frame() {
        let cfg = DatasetConfig { n_frames: 32, n_tissue_classes: 1, n_instrument_classes: 3, n_interactions: 4, ..Default::default() };
        let ds = generate_dataset(&cfg, 3).unwrap();
        for f in &ds.frames {
            f.validate(&cfg).unwrap();
            assert_eq!(f.nodes.iter().filter(|n| n.role == Role::Tissue).count(), 1);
        }
    }

    #[test]
    fn every_interaction_covered() {
        let cfg = DatasetConfig { n_frames: 64, n_interactions: 5, ..Default::default() };
        let ds = generate_dataset(&cfg, 7).unwrap();
        let mut counts = vec![0usize; 5];
        for f in &ds.frames {
            for e in &f.edges {
                for (k, &b) in e.interactions.iter().enumerate() {
                    counts[k] += b as usize;
                }
            }
        }
        assert!(counts.iter().all(|&c| c >= 1), "{counts:?}");
    }

    #[test]
    fn caption_interactions_are_edge_bits() {
        let ds = generate_dataset(&small(40), 11).unwrap();
        let vocab = ds.vocabulary();
        for f in &ds.frames {
            let words = vocab.decode(&f.caption);
            for k in 0..ds.config.n_interactions {
                let name = ds.config.interaction_name(k);
                if words.split(' ').any(|w| w == name) {
                    assert!(f.edges.iter().any(|e| e.interactions[k] == 1), "{words}");
                }
            }
        }
    }

    #[test]
    fn contact_bit_matches_geometry() {
        let ds = generate_dataset(&small(40), 5).unwrap();
        for f in &ds.frames {
            let t = f.nodes[f.tissue_index()].bbox;
            for e in &f.edges {
                let overlaps = f.nodes[e.instrument].bbox.intersects(&t);
                assert_eq!(e.interactions[CONTACT_INTERACTION] == 1, overlaps);
            }
        }
    }

    #[test]
    fn rejects_bad_configs() {
        let base = DatasetConfig::default();
        for cfg in [
            DatasetConfig { n_tissue_classes: 1, n_instrument_classes: 0, ..base.clone() },
            DatasetConfig { n_frames: 0, ..base.clone() },
            DatasetConfig { image_height: 31, ..base.clone() },
            DatasetConfig { image_width: 16, ..base.clone() },
        ] {
            assert!(generate_dataset(&cfg, 1).is_err());
        }
    }

    #[test]
    fn instrument_colours_are_distinct() {
        let cfg = DatasetConfig::default();
        for a in 1..cfg.k_cls() {
            for b in (a + 1)..cfg.k_cls() {
                let (ca, cb) = (instrument_color(&cfg, a), instrument_color(&cfg, b));
                let d: f64 = ca.iter().zip(&cb).map(|(x, y)| (x - y).abs()).sum();
                assert!(d > 0.1);
            }
        }
    }

    mod props {
        use super::*;
        use proptest::prelude::*;

        proptest! {
            #![proptest_config(ProptestConfig::with_cases(16))]
            #[test]
            fn frames_are_valid_and_reproducible(seed in any::<u64>(), n_int in 2usize..6, extra in 0usize..3) {
                let cfg = DatasetConfig { n_frames: 6, n_interactions: n_int, n_instrument_classes: n_int + extra, max_instruments: 2, ..Default::default() };
                let ds = generate_dataset(&cfg, seed).unwrap();
                for f in &ds.frames {
                    f.validate(&cfg).unwrap();
                    for e in &f.edges {
                        prop_assert_eq!(e.interactions.len(), n_int);
                        prop_assert_eq!(f.nodes[e.tissue].role, Role::Tissue);
                    }
                }
                prop_assert!(ds.bitwise_eq(&generate_dataset(&cfg, seed).unwrap()));
            }

            #[test]
            fn source_domain_never_sees_novel_classes(seed in any::<u64>()) {
                let shift = DomainShiftSpec::default();
                let (sd, td) = generate_domains(&DatasetConfig::default(), &shift, seed, 12, 8).unwrap();
                for f in &sd.frames {
                    prop_assert!(f.nodes.iter().all(|n| !shift.novel_class_ids.contains(&n.class_id)));
                }
                let k = sd.config.k_cls();
                prop_assert!(td.frames.iter().flat_map(|f| &f.nodes).all(|n| n.class_id < k));
            }
        }
    }
}
