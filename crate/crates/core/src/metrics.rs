//! Caption metrics (corpus BLEU, CIDEr) and multi-label interaction metrics.

use std::collections::HashMap;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::synthdata::{BOS, EOS, PAD};
use crate::tensor::Tensor;

/// Smoothing count used in place of a zero clipped n-gram count for n ≥ 2.
pub const BLEU_EPSILON: f64 = 1e-12;

fn strip(tokens: &[usize]) -> Vec<usize> {
    tokens.iter().copied().filter(|&t| t != PAD && t != BOS && t != EOS).collect()
}

fn ngram_counts(tokens: &[usize], n: usize) -> HashMap<&[usize], usize> {
    let mut m = HashMap::new();
    if tokens.len() >= n {
        for g in tokens.windows(n) {
            *m.entry(g).or_insert(0) += 1;
        }
    }
    m
}

#[derive(Clone, Debug, PartialEq)]
pub struct BleuStats {
    pub precisions: Vec<f64>,
    pub brevity_penalty: f64,
    pub score: f64,
}

/// Corpus BLEU with clipped counts and brevity penalty. A corpus without any matching
/// unigram scores exactly 0; zero counts at higher orders are smoothed by [`BLEU_EPSILON`].
pub fn bleu_stats(candidates: &[Vec<usize>], references: &[Vec<usize>], max_n: usize) -> Result<BleuStats> {
    if candidates.is_empty() || candidates.len() != references.len() {
        return Err(Error::invalid(format!("{} candidates vs {} references", candidates.len(), references.len())));
    }
    if max_n == 0 {
        return Err(Error::invalid("max_n must be ≥ 1"));
    }
    let mut clipped = vec![0usize; max_n];
    let mut total = vec![0usize; max_n];
    let (mut c_len, mut r_len) = (0usize, 0usize);
    for (k, (cand, refr)) in candidates.iter().zip(references).enumerate() {
        let (c, r) = (strip(cand), strip(refr));
        if c.is_empty() {
            return Err(Error::invalid(format!("candidate {k} is empty after stripping")));
        }
        c_len += c.len();
        r_len += r.len();
        for n in 1..=max_n {
            let rc = ngram_counts(&r, n);
            for (g, cnt) in ngram_counts(&c, n) {
                clipped[n - 1] += cnt.min(rc.get(g).copied().unwrap_or(0));
                total[n - 1] += cnt;
            }
        }
    }
    let precisions: Vec<f64> = clipped
        .iter()
        .zip(&total)
        .map(|(&m, &t)| if t == 0 { 0.0 } else { m as f64 / t as f64 })
        .collect();
    let bp = if c_len > r_len { 1.0 } else { (1.0 - r_len as f64 / c_len as f64).exp() };
    let score = if clipped[0] == 0 {
        0.0
    } else {
        let log_mean = clipped
            .iter()
            .zip(&total)
            .map(|(&m, &t)| {
                let num = if m == 0 { BLEU_EPSILON } else { m as f64 };
                (num / t.max(1) as f64).ln()
            })
            .sum::<f64>()
            / max_n as f64;
        bp * log_mean.exp()
    };
    Ok(BleuStats { precisions, brevity_penalty: bp, score })
}

pub fn bleu(candidates: &[Vec<usize>], references: &[Vec<usize>], max_n: usize) -> Result<f64> {
    Ok(bleu_stats(candidates, references, max_n)?.score)
}

/// CIDEr over n = 1..4: TF-IDF n-gram vectors (document frequency taken over the
/// references), cosine similarity per order, averaged over orders and frames, times 10.
pub fn cider(candidates: &[Vec<usize>], references: &[Vec<usize>]) -> Result<f64> {
    const MAX_N: usize = 4;
    if candidates.is_empty() || candidates.len() != references.len() {
        return Err(Error::invalid(format!("{} candidates vs {} references", candidates.len(), references.len())));
    }
    let cands: Vec<Vec<usize>> = candidates.iter().map(|c| strip(c)).collect();
    let refs: Vec<Vec<usize>> = references.iter().map(|r| strip(r)).collect();
    let n_docs = refs.len() as f64;
    let mut score = 0.0;
    for n in 1..=MAX_N {
        let ref_counts: Vec<_> = refs.iter().map(|r| ngram_counts(r, n)).collect();
        let mut df: HashMap<&[usize], usize> = HashMap::new();
        for rc in &ref_counts {
            for g in rc.keys() {
                *df.entry(*g).or_insert(0) += 1;
            }
        }
        let idf = |g: &[usize]| n_docs.ln() - (df.get(g).copied().unwrap_or(0).max(1) as f64).ln();
        for (c, rc) in cands.iter().zip(&ref_counts) {
            let cc = ngram_counts(c, n);
            let vec = |m: &HashMap<&[usize], usize>| -> HashMap<Vec<usize>, f64> {
                m.iter().map(|(g, &k)| (g.to_vec(), k as f64 * idf(g))).collect()
            };
            let (vc, vr) = (vec(&cc), vec(rc));
            let dot: f64 = vc.iter().map(|(g, x)| x * vr.get(g).copied().unwrap_or(0.0)).sum();
            let nc = vc.values().map(|x| x * x).sum::<f64>().sqrt();
            let nr = vr.values().map(|x| x * x).sum::<f64>().sqrt();
            if nc > 0.0 && nr > 0.0 {
                score += dot / (nc * nr);
            }
        }
    }
    Ok(10.0 * score / (MAX_N as f64 * cands.len() as f64))
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct InteractionMetrics {
    pub acc: f64,
    pub map: f64,
    pub recall: f64,
}

/// Average precision of one ranked column; ties keep edge order.
pub fn average_precision(scores: &[f64], labels: &[f64]) -> Option<f64> {
    let mut order: Vec<usize> = (0..scores.len()).collect();
    order.sort_by(|&a, &b| scores[b].total_cmp(&scores[a]));
    let positives = labels.iter().filter(|&&l| l > 0.5).count();
    if positives == 0 {
        return None;
    }
    let mut hits = 0usize;
    let mut sum = 0.0;
    for (rank, &i) in order.iter().enumerate() {
        if labels[i] > 0.5 {
            hits += 1;
            sum += hits as f64 / (rank + 1) as f64;
        }
    }
    Some(sum / positives as f64)
}

/// `acc`: exact multi-hot match per edge at `score ≥ threshold`; `map`: mean AP over
/// classes with a positive, ranking across all edges; `recall`: micro TP / (TP + FN).
pub fn interaction_metrics(scores: &Tensor, labels: &Tensor, threshold: f64) -> Result<InteractionMetrics> {
    if scores.shape() != labels.shape() || scores.ndim() != 2 {
        return Err(Error::shape(format!("scores {:?} vs labels {:?}", scores.shape(), labels.shape())));
    }
    let (e, k) = (scores.shape()[0], scores.shape()[1]);
    if e == 0 {
        return Err(Error::invalid("no edges to evaluate"));
    }
    let (s, l) = (scores.data(), labels.data());
    let mut exact = 0usize;
    let (mut tp, mut fn_) = (0usize, 0usize);
    for i in 0..e {
        let mut all = true;
        for j in 0..k {
            let pred = s[i * k + j] >= threshold;
            let pos = l[i * k + j] > 0.5;
            all &= pred == pos;
            match (pred, pos) {
                (true, true) => tp += 1,
                (false, true) => fn_ += 1,
                _ => {}
            }
        }
        exact += all as usize;
    }
    let mut aps = Vec::new();
    for j in 0..k {
        let col_s: Vec<f64> = (0..e).map(|i| s[i * k + j]).collect();
        let col_l: Vec<f64> = (0..e).map(|i| l[i * k + j]).collect();
        if let Some(ap) = average_precision(&col_s, &col_l) {
            aps.push(ap);
        }
    }
    if aps.is_empty() {
        return Err(Error::invalid("mAP undefined: no interaction class has a positive edge"));
    }
    Ok(InteractionMetrics {
        acc: exact as f64 / e as f64,
        map: aps.iter().sum::<f64>() / aps.len() as f64,
        recall: if tp + fn_ == 0 { 0.0 } else { tp as f64 / (tp + fn_) as f64 },
    })
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
pub enum Split {
    #[serde(rename = "SD")]
    Sd,
    #[serde(rename = "TD")]
    Td,
}

impl Split {
    pub fn as_str(self) -> &'static str {
        match self {
            Split::Sd => "SD",
            Split::Td => "TD",
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct MetricsReport {
    pub split: Split,
    pub n_samples: usize,
    pub bleu4: f64,
    pub cider: f64,
    pub acc: f64,
    pub map: f64,
    pub recall: f64,
}

impl MetricsReport {
    /// `(name, value)` pairs using the stable metric identifiers.
    pub fn named(&self) -> [(&'static str, f64); 5] {
        [("bleu4", self.bleu4), ("cider", self.cider), ("acc", self.acc), ("map", self.map), ("recall", self.recall)]
    }

    pub fn max_abs_diff(&self, o: &MetricsReport) -> f64 {
        self.named().iter().zip(o.named()).map(|(a, b)| (a.1 - b.1).abs()).fold(0.0, f64::max)
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    fn s(words: &str) -> Vec<usize> {
        // deterministic word → id map above the reserved range
        words.split_whitespace().map(|w| 4 + w.bytes().fold(0usize, |h, b| h * 31 + b as usize) % 997).collect()
    }

    #[test]
    fn bleu_hand_cases() {
        let r = s("kidney is being grasped by bipolar forceps");
        assert_eq!(bleu(&[r.clone()], &[r.clone()], 4).unwrap(), 1.0);
        assert_eq!(bleu(&[s("a b c")], &[s("x y z")], 4).unwrap(), 0.0);
        let st = bleu_stats(&[s("the the the")], &[s("the cat sat")], 4).unwrap();
        assert_eq!(st.precisions[0], 1.0 / 3.0);
        assert_eq!(st.brevity_penalty, 1.0);
        let mut wrapped = vec![BOS];
        wrapped.extend(&r);
        wrapped.extend([EOS, PAD, PAD]);
        assert_eq!(bleu(&[wrapped], &[r], 4).unwrap(), 1.0);
        assert!(bleu(&[vec![BOS, EOS]], &[s("a")], 4).is_err());
    }

    #[test]
    fn bleu_brevity_penalty() {
        let st = bleu_stats(&[s("a b")], &[s("a b c d")], 1).unwrap();
        assert!((st.brevity_penalty - (-1.0f64).exp()).abs() < 1e-15);
        assert!((st.score - (-1.0f64).exp()).abs() < 1e-15);
    }

    #[test]
    fn cider_limits() {
        let refs = vec![s("a b c d e"), s("f g h i j"), s("a g c k l")];
        let self_score = cider(&refs, &refs).unwrap();
        let other = cider(&[refs[1].clone(), refs[2].clone(), refs[0].clone()], &refs).unwrap();
        assert!(self_score > other);
        assert_eq!(cider(&[s("q"), s("r"), s("t")], &refs).unwrap(), 0.0);
    }

    #[test]
    fn interaction_limits() {
        let labels = Tensor::from_rows(&[vec![1.0, 0.0], vec![0.0, 1.0], vec![1.0, 1.0]]).unwrap();
        let m = interaction_metrics(&labels, &labels, 0.5).unwrap();
        assert_eq!((m.acc, m.map, m.recall), (1.0, 1.0, 1.0));
        let inv = labels.map(|x| 1.0 - x);
        let m = interaction_metrics(&inv, &labels, 0.5).unwrap();
        assert_eq!((m.acc, m.recall), (0.0, 0.0));
        let none = Tensor::zeros(&[2, 2]);
        assert!(interaction_metrics(&none, &none, 0.5).is_err());
    }

    proptest! {
        #[test]
        fn bleu_pair_order_invariant(seed in 0u64..1000) {
            use rand::{Rng, SeedableRng};
            let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(seed);
            let mk = |rng: &mut rand_chacha::ChaCha8Rng| (0..rng.random_range(1..8)).map(|_| rng.random_range(4..10)).collect::<Vec<usize>>();
            let c: Vec<_> = (0..5).map(|_| mk(&mut rng)).collect();
            let r: Vec<_> = (0..5).map(|_| mk(&mut rng)).collect();
            let a = bleu(&c, &r, 4).unwrap();
            let (mut c2, mut r2) = (c.clone(), r.clone());
            c2.reverse();
            r2.reverse();
            prop_assert_eq!(a, bleu(&c2, &r2, 4).unwrap());
            prop_assert!((0.0..=1.0).contains(&a));
        }

        #[test]
        fn map_rank_invariant_and_recall_monotone(scores in proptest::collection::vec(0.0f64..1.0, 12), bits in proptest::collection::vec(any::<bool>(), 12)) {
            let labels: Vec<f64> = bits.iter().map(|&b| b as u8 as f64).collect();
            prop_assume!(labels.iter().any(|&l| l > 0.5));
            let st = Tensor::new(vec![6, 2], scores.clone()).unwrap();
            let lt = Tensor::new(vec![6, 2], labels).unwrap();
            let base = interaction_metrics(&st, &lt, 0.5).unwrap();
            let warped = st.map(|x| (3.0 * x).exp() - 7.0);
            let m2 = interaction_metrics(&warped, &lt, (1.5f64).exp() - 7.0).unwrap();
            prop_assert!((base.map - m2.map).abs() < 1e-15);
            let mut last = f64::INFINITY;
            for th in [0.0, 0.2, 0.4, 0.6, 0.8, 1.0] {
                let r = interaction_metrics(&st, &lt, th).unwrap().recall;
                prop_assert!(r <= last);
                last = r;
            }
        }
    }
}
