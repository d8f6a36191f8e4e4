//! Loss functions and their analytic gradients.
//!
//! Every differentiable loss comes in two flavours: a value-only function and a
//! `*_grad` function returning `(value, dL/d input)`. The training graph wraps the
//! latter as fused scalar nodes.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::tensor::Tensor;

pub fn sigmoid(x: f64) -> f64 {
    if x >= 0.0 {
        1.0 / (1.0 + (-x).exp())
    } else {
        let e = x.exp();
        e / (1.0 + e)
    }
}

/// `ln(1 + e^x)` without overflow.
fn softplus(x: f64) -> f64 {
    x.max(0.0) + (-x.abs()).exp().ln_1p()
}

fn log_softmax(row: &[f64], temperature: f64) -> Vec<f64> {
    let scaled: Vec<f64> = row.iter().map(|x| x / temperature).collect();
    let m = scaled.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    let lse = m + scaled.iter().map(|x| (x - m).exp()).sum::<f64>().ln();
    scaled.iter().map(|x| x - lse).collect()
}

fn check_temperature(t: f64, what: &str) -> Result<()> {
    if !(t > 0.0) || !t.is_finite() {
        return Err(Error::invalid(format!("{what} must be positive, got {t}")));
    }
    Ok(())
}

fn as_matrix(t: &Tensor, what: &str) -> Result<(usize, usize)> {
    if t.ndim() < 2 {
        return Err(Error::shape(format!("{what} must be at least 2-d, got {:?}", t.shape())));
    }
    Ok((t.rows(), t.last_dim()))
}

/// Fixed composition weights for the combined objectives.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct LossWeights {
    pub finetune_w: f64,
    pub kd_task_w: f64,
    pub kd_distill_w: f64,
}

impl Default for LossWeights {
    fn default() -> Self {
        Self {
            finetune_w: 0.5,
            kd_task_w: 0.35,
            kd_distill_w: 0.15,
        }
    }
}

impl LossWeights {
    pub fn finetune(&self, l_caption: f64, l_scene_graph: f64) -> f64 {
        self.finetune_w * (l_caption + l_scene_graph)
    }

    pub fn vanilla(&self, l_caption: f64, l_scene_graph: f64) -> f64 {
        self.finetune_w * (l_caption + l_scene_graph)
    }

    pub fn kd(&self, l_ce_c: f64, l_mls_sg: f64, l_kl_c: f64, l_kl_sg: f64) -> f64 {
        self.kd_task_w * (l_ce_c + l_mls_sg) + self.kd_distill_w * (l_kl_c + l_kl_sg)
    }
}

/// Weights and temperatures used by the training objectives.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct LossConfig {
    #[serde(flatten)]
    pub weights: LossWeights,
    pub supcon_tau: f64,
    pub incre_temperature: f64,
    pub kd_temperature: f64,
}

impl Default for LossConfig {
    fn default() -> Self {
        Self {
            weights: LossWeights::default(),
            supcon_tau: 0.07,
            incre_temperature: 2.0,
            kd_temperature: 2.0,
        }
    }
}

impl LossConfig {
    pub fn validate(&self) -> Result<()> {
        let w = &self.weights;
        for (k, v) in [("loss.finetune_w", w.finetune_w), ("loss.kd_task_w", w.kd_task_w), ("loss.kd_distill_w", w.kd_distill_w)] {
            if !(v >= 0.0) || !v.is_finite() {
                return Err(Error::config(k, "must be a finite non-negative weight"));
            }
        }
        for (k, v) in [
            ("loss.supcon_tau", self.supcon_tau),
            ("loss.incre_temperature", self.incre_temperature),
            ("loss.kd_temperature", self.kd_temperature),
        ] {
            if !(v > 0.0) || !v.is_finite() {
                return Err(Error::config(k, "must be positive"));
            }
        }
        Ok(())
    }
}

/// Fine-tuning objective with the default 0.5 weight.
pub fn finetune_loss(l_caption: f64, l_scene_graph: f64) -> f64 {
    LossWeights::default().finetune(l_caption, l_scene_graph)
}

/// Joint objective for vanilla multi-task training; same form as [`finetune_loss`].
pub fn vanilla_loss(l_caption: f64, l_scene_graph: f64) -> f64 {
    LossWeights::default().vanilla(l_caption, l_scene_graph)
}

/// Distillation objective: `0.35·(task losses) + 0.15·(KL terms)`.
pub fn kd_loss(l_ce_c: f64, l_mls_sg: f64, l_kl_c: f64, l_kl_sg: f64) -> f64 {
    LossWeights::default().kd(l_ce_c, l_mls_sg, l_kl_c, l_kl_sg)
}

/// Total pretraining objective: contrastive term plus incremental distillation term.
pub fn cicl_total_loss(contra: f64, incre: f64) -> f64 {
    contra + incre
}

/// Two views per sample, L2-normalised rows and class labels.
#[derive(Clone, Debug)]
pub struct ContrastiveBatch {
    embeddings: Tensor,
    labels: Vec<usize>,
    tau: f64,
}

impl ContrastiveBatch {
    pub fn new(embeddings: Tensor, labels: Vec<usize>, tau: f64) -> Result<Self> {
        check_temperature(tau, "contrastive temperature")?;
        let (n, _) = as_matrix(&embeddings, "contrastive embeddings")?;
        if n != labels.len() {
            return Err(Error::shape(format!("{} embeddings for {} labels", n, labels.len())));
        }
        if n < 4 {
            return Err(Error::invalid("contrastive batch needs at least 4 rows"));
        }
        for i in 0..n {
            let norm = embeddings.row(i).iter().map(|x| x * x).sum::<f64>().sqrt();
            if (norm - 1.0).abs() > 1e-6 {
                return Err(Error::invalid(format!("row {i} has norm {norm}, expected 1")));
            }
        }
        check_positives(&labels)?;
        Ok(Self { embeddings, labels, tau })
    }

    pub fn embeddings(&self) -> &Tensor {
        &self.embeddings
    }

    pub fn labels(&self) -> &[usize] {
        &self.labels
    }

    pub fn tau(&self) -> f64 {
        self.tau
    }
}

fn check_positives(labels: &[usize]) -> Result<()> {
    for (i, &l) in labels.iter().enumerate() {
        if !labels.iter().enumerate().any(|(j, &m)| j != i && m == l) {
            return Err(Error::invalid(format!("anchor {i} (label {l}) has no positive")));
        }
    }
    Ok(())
}

pub fn supcon_loss(batch: &ContrastiveBatch) -> f64 {
    supcon_raw(&batch.embeddings, &batch.labels, batch.tau).0
}

pub fn supcon_loss_grad(batch: &ContrastiveBatch) -> (f64, Tensor) {
    supcon_raw(&batch.embeddings, &batch.labels, batch.tau)
}

/// Supervised contrastive loss over rows of `z` without the unit-norm check.
///
/// For anchor `i` with positives `P(i)` the term is
/// `log Σ_{k≠i} exp(z_i·z_k/τ) − mean_{p∈P(i)} z_i·z_p/τ`; the loss is the mean over anchors.
/// Callers must guarantee every anchor has a positive.
pub fn supcon_raw(z: &Tensor, labels: &[usize], tau: f64) -> (f64, Tensor) {
    let n = z.rows();
    let d = z.last_dim();
    let mut sim = vec![0.0; n * n];
    for i in 0..n {
        for k in 0..n {
            sim[i * n + k] = z.row(i).iter().zip(z.row(k)).map(|(a, b)| a * b).sum::<f64>() / tau;
        }
    }
    // coeff[i][k] = dL/ds_ik
    let mut coeff = vec![0.0; n * n];
    let mut total = 0.0;
    let inv_n = 1.0 / n as f64;
    for i in 0..n {
        let row = &sim[i * n..(i + 1) * n];
        let m = (0..n).filter(|&k| k != i).map(|k| row[k]).fold(f64::NEG_INFINITY, f64::max);
        let denom: f64 = (0..n).filter(|&k| k != i).map(|k| (row[k] - m).exp()).sum();
        let lse = m + denom.ln();
        let positives: Vec<usize> = (0..n).filter(|&k| k != i && labels[k] == labels[i]).collect();
        let np = positives.len() as f64;
        let mean_pos = positives.iter().map(|&p| row[p]).sum::<f64>() / np;
        total += lse - mean_pos;
        for k in (0..n).filter(|&k| k != i) {
            coeff[i * n + k] += inv_n * (row[k] - lse).exp();
        }
        for &p in &positives {
            coeff[i * n + p] -= inv_n / np;
        }
    }
    let mut grad = vec![0.0; n * d];
    for i in 0..n {
        for k in 0..n {
            let c = (coeff[i * n + k] + coeff[k * n + i]) / tau;
            if c == 0.0 {
                continue;
            }
            for (g, zk) in grad[i * d..(i + 1) * d].iter_mut().zip(z.row(k)) {
                *g += c * zk;
            }
        }
    }
    (total * inv_n, Tensor::new(z.shape().to_vec(), grad).expect("sized from z"))
}

/// Distillation on old-class logits: `T²·mean_n KL(softmax(old/T) ‖ softmax(new[:, :K_old]/T))`.
pub fn incremental_kd_loss(old_logits: &Tensor, new_logits: &Tensor, temperature: f64) -> Result<f64> {
    incremental_kd_loss_grad(old_logits, new_logits, temperature).map(|(v, _)| v)
}

/// Value and gradient with respect to `new_logits` (novel-class columns get zero).
pub fn incremental_kd_loss_grad(old_logits: &Tensor, new_logits: &Tensor, temperature: f64) -> Result<(f64, Tensor)> {
    check_temperature(temperature, "distillation temperature")?;
    let (n, k_old) = as_matrix(old_logits, "old logits")?;
    let (n2, k_new) = as_matrix(new_logits, "new logits")?;
    if n != n2 {
        return Err(Error::shape(format!("{n} old rows vs {n2} new rows")));
    }
    if n < 1 {
        return Err(Error::invalid("distillation needs at least one row"));
    }
    if k_new < k_old {
        return Err(Error::invalid(format!("new head has {k_new} classes, fewer than old {k_old}")));
    }
    let t = temperature;
    let mut total = 0.0;
    let mut grad = vec![0.0; n * k_new];
    for r in 0..n {
        let lp = log_softmax(old_logits.row(r), t);
        let lq = log_softmax(&new_logits.row(r)[..k_old], t);
        for j in 0..k_old {
            let p = lp[j].exp();
            if p > 0.0 {
                total += p * (lp[j] - lq[j]);
            }
            grad[r * k_new + j] = t * (lq[j].exp() - p) / n as f64;
        }
    }
    Ok((t * t * total / n as f64, Tensor::new(new_logits.shape().to_vec(), grad)?))
}

/// Mean token-level cross-entropy over positions where `valid` is true.
pub fn caption_ce_loss(logits: &Tensor, targets: &[usize], valid: &[bool]) -> Result<f64> {
    caption_ce_loss_grad(logits, targets, valid).map(|(v, _)| v)
}

pub fn caption_ce_loss_grad(logits: &Tensor, targets: &[usize], valid: &[bool]) -> Result<(f64, Tensor)> {
    let (m, v) = as_matrix(logits, "caption logits")?;
    if targets.len() != m || valid.len() != m {
        return Err(Error::shape(format!(
            "{m} logit rows vs {} targets / {} mask entries",
            targets.len(),
            valid.len()
        )));
    }
    let count = valid.iter().filter(|&&b| b).count();
    if count == 0 {
        return Err(Error::invalid("every caption position is masked"));
    }
    let mut total = 0.0;
    let mut grad = vec![0.0; m * v];
    for r in 0..m {
        if !valid[r] {
            continue;
        }
        let tgt = targets[r];
        if tgt >= v {
            return Err(Error::invalid(format!("target token {tgt} outside vocabulary of {v}")));
        }
        let ls = log_softmax(logits.row(r), 1.0);
        total -= ls[tgt];
        for j in 0..v {
            grad[r * v + j] = (ls[j].exp() - if j == tgt { 1.0 } else { 0.0 }) / count as f64;
        }
    }
    Ok((total / count as f64, Tensor::new(logits.shape().to_vec(), grad)?))
}

/// Mask that scores every target except `pad`.
pub fn pad_mask(targets: &[usize], pad: usize) -> Vec<bool> {
    targets.iter().map(|&t| t != pad).collect()
}

fn check_same(a: &Tensor, b: &Tensor, what: &str) -> Result<(usize, usize)> {
    if a.shape() != b.shape() {
        return Err(Error::shape(format!("{what}: {:?} vs {:?}", a.shape(), b.shape())));
    }
    as_matrix(a, what)
}

/// Mean per-class binary log-loss on `sigmoid(logit)` against multi-hot labels.
pub fn interaction_ml_loss(edge_logits: &Tensor, edge_labels: &Tensor) -> Result<f64> {
    interaction_ml_loss_grad(edge_logits, edge_labels).map(|(v, _)| v)
}

pub fn interaction_ml_loss_grad(edge_logits: &Tensor, edge_labels: &Tensor) -> Result<(f64, Tensor)> {
    let (e, k) = check_same(edge_logits, edge_labels, "interaction logits/labels")?;
    if e < 1 {
        return Err(Error::invalid("interaction loss needs at least one edge"));
    }
    let count = (e * k) as f64;
    let mut total = 0.0;
    let mut grad = Vec::with_capacity(e * k);
    for (&x, &y) in edge_logits.data().iter().zip(edge_labels.data()) {
        let l = if x.is_infinite() {
            let predicted = if x > 0.0 { 1.0 } else { 0.0 };
            if predicted == y {
                0.0
            } else {
                f64::INFINITY
            }
        } else {
            softplus(x) - x * y
        };
        total += l;
        grad.push((sigmoid(x) - y) / count);
    }
    Ok((total / count, Tensor::new(edge_logits.shape().to_vec(), grad)?))
}

/// Which distribution the distillation KL compares.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub enum KlKind {
    /// Softmax over the last axis (caption tokens).
    Softmax,
    /// Independent per-class Bernoulli on sigmoids (multi-label interactions).
    Bernoulli,
}

/// `T²·KL(teacher ‖ student)`, averaged over rows (softmax) or over elements (Bernoulli).
pub fn kl_logits(student: &Tensor, teacher: &Tensor, temperature: f64, kind: KlKind) -> Result<f64> {
    kl_logits_grad(student, teacher, temperature, kind).map(|(v, _)| v)
}

/// Value and gradient with respect to the student logits.
pub fn kl_logits_grad(student: &Tensor, teacher: &Tensor, temperature: f64, kind: KlKind) -> Result<(f64, Tensor)> {
    check_temperature(temperature, "distillation temperature")?;
    let (m, v) = check_same(student, teacher, "student/teacher logits")?;
    if m < 1 {
        return Err(Error::invalid("KL needs at least one row"));
    }
    let t = temperature;
    let mut total = 0.0;
    let mut grad = vec![0.0; m * v];
    match kind {
        KlKind::Softmax => {
            for r in 0..m {
                let lp = log_softmax(teacher.row(r), t);
                let lq = log_softmax(student.row(r), t);
                for j in 0..v {
                    let p = lp[j].exp();
                    if p > 0.0 {
                        total += p * (lp[j] - lq[j]);
                    }
                    grad[r * v + j] = t * (lq[j].exp() - p) / m as f64;
                }
            }
            total /= m as f64;
        }
        KlKind::Bernoulli => {
            let count = (m * v) as f64;
            for (i, (&s, &te)) in student.data().iter().zip(teacher.data()).enumerate() {
                let (a, b) = (te / t, s / t);
                let p = sigmoid(a);
                // ln p = -softplus(-a), ln(1-p) = -softplus(a)
                let (lp, lnp) = (-softplus(-a), -softplus(a));
                let (lq, lnq) = (-softplus(-b), -softplus(b));
                let mut kl = 0.0;
                if p > 0.0 {
                    kl += p * (lp - lq);
                }
                if p < 1.0 {
                    kl += (1.0 - p) * (lnp - lnq);
                }
                total += kl.max(0.0);
                grad[i] = t * (sigmoid(b) - p) / count;
            }
            total /= count;
        }
    }
    Ok((t * t * total, Tensor::new(student.shape().to_vec(), grad)?))
}

#[cfg(test)]
mod tests {
    use super::*;

    fn t2(rows: &[&[f64]]) -> Tensor {
        Tensor::from_rows(&rows.iter().map(|r| r.to_vec()).collect::<Vec<_>>()).unwrap()
    }

    #[test]
    fn composite_arithmetic() {
        assert_eq!(cicl_total_loss(0.7, 0.3), 1.0);
        assert_eq!(cicl_total_loss(0.42, 0.0), 0.42);
        assert_eq!(finetune_loss(2.0, 1.0), 1.5);
        assert_eq!(finetune_loss(0.0, 0.0), 0.0);
        assert_eq!(finetune_loss(0.3, 1.7), finetune_loss(1.7, 0.3));
        assert_eq!(vanilla_loss(2.0, 1.0), 1.5);
        assert!((kd_loss(1.0, 1.0, 1.0, 1.0) - 1.0).abs() < 1e-12);
        assert!((kd_loss(1.0, 1.0, 0.0, 0.0) - 0.7).abs() < 1e-12);
        assert!((kd_loss(0.0, 0.0, 1.0, 1.0) - 0.3).abs() < 1e-12);
    }

    #[test]
    fn contrastive_batch_validation() {
        let z = t2(&[&[1.0, 0.0], &[1.0, 0.0], &[0.0, 1.0], &[0.0, 1.0]]);
        assert!(ContrastiveBatch::new(z.clone(), vec![0, 0, 1, 1], 0.5).is_ok());
        assert!(ContrastiveBatch::new(z.clone(), vec![0, 0, 1, 2], 0.5).is_err());
        assert!(ContrastiveBatch::new(z.clone(), vec![0, 0, 1, 1], 0.0).is_err());
        assert!(ContrastiveBatch::new(z.map(|x| 2.0 * x), vec![0, 0, 1, 1], 0.5).is_err());
        let small = t2(&[&[1.0, 0.0], &[1.0, 0.0]]);
        assert!(ContrastiveBatch::new(small, vec![0, 0], 0.5).is_err());
    }

    #[test]
    fn supcon_identical_embeddings_closed_form() {
        let z = Tensor::new(vec![6, 2], [0.6, 0.8].repeat(6)).unwrap();
        let labels = vec![0, 0, 0, 1, 1, 2];
        let labels_ok = vec![0, 0, 0, 1, 1, 1];
        assert!(ContrastiveBatch::new(z.clone(), labels, 0.1).is_err());
        // every log-term is ln(2N-1) when all similarities coincide
        let b = ContrastiveBatch::new(z, labels_ok, 0.1).unwrap();
        let expect = 5.0f64.ln();
        assert!((supcon_loss(&b) - expect).abs() < 1e-10);
    }

    #[test]
    fn incremental_kd_cases() {
        let old = t2(&[&[0.3, -0.2], &[1.0, 0.5]]);
        let new = t2(&[&[0.3, -0.2, 5.0], &[1.0, 0.5, -3.0]]);
        assert!(incremental_kd_loss(&old, &new, 2.0).unwrap().abs() < 1e-15);
        let narrow = t2(&[&[0.3], &[1.0]]);
        assert!(incremental_kd_loss(&old, &narrow, 2.0).is_err());
        assert!(incremental_kd_loss(&old, &new, 0.0).is_err());
    }

    #[test]
    fn caption_ce_uniform_and_masking() {
        let logits = Tensor::zeros(&[3, 16]);
        let v = caption_ce_loss(&logits, &[1, 5, 0], &[true, true, false]).unwrap();
        assert!((v - 16f64.ln()).abs() < 1e-12);
        assert!(caption_ce_loss(&logits, &[1, 5, 0], &[false; 3]).is_err());
        assert!(caption_ce_loss(&logits, &[1, 16, 0], &[true; 3]).is_err());
        let mut sharp = Tensor::zeros(&[1, 4]);
        sharp.data_mut()[2] = 60.0;
        assert!(caption_ce_loss(&sharp, &[2], &[true]).unwrap() < 1e-20);
        assert_eq!(pad_mask(&[3, 0, 2], 0), vec![true, false, true]);
    }

    #[test]
    fn interaction_loss_limits() {
        let labels = t2(&[&[1.0, 0.0, 1.0], &[0.0, 0.0, 1.0]]);
        let zero = Tensor::zeros(&[2, 3]);
        assert!((interaction_ml_loss(&zero, &labels).unwrap() - 2f64.ln()).abs() < 1e-12);
        let inf = labels.map(|y| if y > 0.5 { f64::INFINITY } else { f64::NEG_INFINITY });
        assert_eq!(interaction_ml_loss(&inf, &labels).unwrap(), 0.0);
        assert!(interaction_ml_loss(&Tensor::zeros(&[2, 2]), &labels).is_err());
    }

    #[test]
    fn kl_identity_and_bernoulli_oracle() {
        let a = t2(&[&[0.2, -1.0, 3.0]]);
        for kind in [KlKind::Softmax, KlKind::Bernoulli] {
            assert_eq!(kl_logits(&a, &a, 1.0, kind).unwrap(), 0.0);
        }
        // teacher p = 0.5, student q = sigmoid(1)
        let q = sigmoid(1.0);
        let expect = 0.5 * (0.5f64 / q).ln() + 0.5 * (0.5f64 / (1.0 - q)).ln();
        let v = kl_logits(&t2(&[&[1.0]]), &t2(&[&[0.0]]), 1.0, KlKind::Bernoulli).unwrap();
        assert!((v - expect).abs() < 1e-10);
    }

    mod props {
        use super::*;
        use proptest::prelude::*;

        fn matrix(rows: usize, cols: usize, scale: f64) -> impl Strategy<Value = Tensor> {
            proptest::collection::vec(-scale..scale, rows * cols).prop_map(move |d| Tensor::new(vec![rows, cols], d).unwrap())
        }

        fn unit_rows(mut t: Tensor) -> Tensor {
            let d = t.last_dim();
            for row in t.data_mut().chunks_mut(d) {
                let n = row.iter().map(|x| x * x).sum::<f64>().sqrt().max(1e-9);
                row.iter_mut().for_each(|x| *x /= n);
            }
            t
        }

        proptest! {
            #![proptest_config(ProptestConfig::with_cases(64))]
            #[test]
            fn losses_are_finite_and_non_negative(
                z in matrix(6, 3, 1.0),
                student in matrix(4, 5, 6.0),
                teacher in matrix(4, 5, 6.0),
                bits in proptest::collection::vec(any::<bool>(), 20),
                t in 0.5f64..4.0,
            ) {
                let labels = vec![0, 1, 2, 0, 1, 2];
                let s = supcon_raw(&unit_rows(z), &labels, 0.2).0;
                let y = Tensor::new(vec![4, 5], bits.iter().map(|&b| b as u8 as f64).collect()).unwrap();
                let values = [
                    s,
                    incremental_kd_loss(&teacher, &student, t).unwrap(),
                    caption_ce_loss(&student, &[0, 4, 2, 1], &[true, true, false, true]).unwrap(),
                    interaction_ml_loss(&student, &y).unwrap(),
                    kl_logits(&student, &teacher, t, KlKind::Softmax).unwrap(),
                    kl_logits(&student, &teacher, t, KlKind::Bernoulli).unwrap(),
                ];
                for v in values {
                    prop_assert!(v.is_finite() && v >= 0.0, "{values:?}");
                }
            }

            #[test]
            fn composites_are_linear(x in proptest::array::uniform4(-10.0f64..10.0), y in proptest::array::uniform4(-10.0f64..10.0), a in -3.0f64..3.0) {
                let mix: Vec<f64> = x.iter().zip(&y).map(|(p, q)| a * p + q).collect();
                let kd = |v: &[f64]| kd_loss(v[0], v[1], v[2], v[3]);
                prop_assert!((kd(&mix) - (a * kd(&x) + kd(&y))).abs() < 1e-9);
                prop_assert!((finetune_loss(mix[0], mix[1]) - (a * finetune_loss(x[0], x[1]) + finetune_loss(y[0], y[1]))).abs() < 1e-9);
                prop_assert!((vanilla_loss(mix[0], mix[1]) - (a * vanilla_loss(x[0], x[1]) + vanilla_loss(y[0], y[1]))).abs() < 1e-9);
                prop_assert!((cicl_total_loss(mix[0], mix[1]) - (a * cicl_total_loss(x[0], x[1]) + cicl_total_loss(y[0], y[1]))).abs() < 1e-9);
            }

            #[test]
            fn incremental_kd_ignores_novel_columns(old in matrix(3, 3, 4.0), new in matrix(3, 5, 4.0), noise in matrix(3, 2, 100.0)) {
                let base = incremental_kd_loss(&old, &new, 2.0).unwrap();
                let mut p = new.clone();
                for r in 0..3 {
                    for j in 0..2 {
                        p.data_mut()[r * 5 + 3 + j] += noise.data()[r * 2 + j];
                    }
                }
                prop_assert_eq!(incremental_kd_loss(&old, &p, 2.0).unwrap().to_bits(), base.to_bits());
            }
        }
    }

    #[test]
    fn supcon_falls_as_a_positive_pair_aligns() {
        // anchor 0 and its positive 1 move together along an arc, the rest stay put
        let labels = vec![0, 0, 1, 1];
        let at = |theta: f64| {
            t2(&[&[1.0, 0.0], &[theta.cos(), theta.sin()], &[0.0, 1.0], &[-0.6, 0.8]])
        };
        let values: Vec<f64> = [1.2, 0.8, 0.4, 0.0].iter().map(|&th| supcon_raw(&at(th), &labels, 0.5).0).collect();
        assert!(values.windows(2).all(|w| w[1] < w[0]), "{values:?}");
    }
}
