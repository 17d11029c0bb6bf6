//! Training objectives: softmax and triplet losses, their weighted sum, and
//! the two-class channel loss that reaches the generator through the
//! gradient reversal layer.
//!
//! Similarities are cosine similarities in `[-1, 1]`: the triplet hinge is
//! `max(0, s(a, n) + δ - s(a, p))`, which only rewards same-speaker
//! proximity when `s` grows with proximity.

use log::warn;
use serde::{Deserialize, Serialize};

use crate::autodiff::{Tape, Tensor, Var};
use crate::error::{Error, Result};

/// Default triplet margin δ.
pub const DEFAULT_MARGIN: f64 = 0.1;

/// How per-sample losses are reduced over a batch.
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Reduction {
    Sum,
    #[default]
    Mean,
}

impl Reduction {
    /// Applies the reduction to a summed loss over `count` terms.
    pub fn apply(self, tape: &mut Tape, summed: Var, count: usize) -> Result<Var> {
        match self {
            Reduction::Sum => Ok(summed),
            Reduction::Mean => tape.scale(summed, 1.0 / count.max(1) as f64),
        }
    }
}

/// Sum over the batch of `-log softmax(logits)[label]`.
pub fn softmax_loss(tape: &mut Tape, logits: Var, labels: &[usize]) -> Result<Var> {
    tape.softmax_cross_entropy(logits, labels)
}

pub fn cosine_similarity(a: &[f64], b: &[f64]) -> Result<f64> {
    if a.len() != b.len() {
        return Err(Error::ShapeMismatch {
            op: "cosine_similarity",
            left: vec![a.len()],
            right: vec![b.len()],
        });
    }
    let na = a.iter().map(|v| v * v).sum::<f64>().sqrt();
    let nb = b.iter().map(|v| v * v).sum::<f64>().sqrt();
    if !(na > 0.0 && nb > 0.0) {
        return Err(Error::invalid("cosine_similarity", "zero-norm input"));
    }
    let dot: f64 = a.iter().zip(b).map(|(x, y)| x * y).sum();
    Ok((dot / (na * nb)).clamp(-1.0, 1.0))
}

/// Anchor/positive/negative index triples into a batch of embeddings.
#[derive(Clone, Debug, Default, PartialEq)]
pub struct TripletBatch {
    pub anchors: Vec<usize>,
    pub positives: Vec<usize>,
    pub negatives: Vec<usize>,
    pub margin: f64,
}

impl TripletBatch {
    /// Validates every triple against the speaker labels.
    pub fn new(
        anchors: Vec<usize>,
        positives: Vec<usize>,
        negatives: Vec<usize>,
        margin: f64,
        speakers: &[usize],
    ) -> Result<Self> {
        if anchors.len() != positives.len() || anchors.len() != negatives.len() {
            return Err(Error::invalid("triplets", "index lists differ in length"));
        }
        for ((&a, &p), &n) in anchors.iter().zip(&positives).zip(&negatives) {
            let get = |i: usize| {
                speakers.get(i).copied().ok_or_else(|| {
                    Error::invalid(
                        "triplets",
                        format!("index {i} outside batch of {}", speakers.len()),
                    )
                })
            };
            let (sa, sp, sn) = (get(a)?, get(p)?, get(n)?);
            if sa != sp || sa == sn {
                return Err(Error::invalid(
                    "triplets",
                    format!("({a}, {p}, {n}) has speakers ({sa}, {sp}, {sn})"),
                ));
            }
        }
        Ok(TripletBatch {
            anchors,
            positives,
            negatives,
            margin,
        })
    }

    pub fn len(&self) -> usize {
        self.anchors.len()
    }

    pub fn is_empty(&self) -> bool {
        self.anchors.is_empty()
    }
}

/// Triplet loss value plus whether the triplet set was empty.
#[derive(Clone, Copy, Debug)]
pub struct TripletLoss {
    pub value: Var,
    pub empty: bool,
}

/// Sum over triplets of `max(0, s(a,n) + δ - s(a,p))` for L2-normalized rows.
pub fn triplet_loss(
    tape: &mut Tape,
    embeddings: Var,
    triplets: &TripletBatch,
) -> Result<TripletLoss> {
    if triplets.is_empty() {
        warn!("triplet loss over an empty triplet set");
        return Ok(TripletLoss {
            value: tape.leaf(Tensor::scalar(0.0)),
            empty: true,
        });
    }
    let shape = tape.shape(embeddings).to_vec();
    if shape.len() != 2 {
        return Err(Error::invalid(
            "triplet_loss",
            format!("expected [M, d], got {shape:?}"),
        ));
    }
    let m = shape[0];
    let et = tape.transpose(embeddings)?;
    let sims = tape.matmul(embeddings, et)?;
    let an: Vec<usize> = triplets
        .anchors
        .iter()
        .zip(&triplets.negatives)
        .map(|(a, n)| a * m + n)
        .collect();
    let ap: Vec<usize> = triplets
        .anchors
        .iter()
        .zip(&triplets.positives)
        .map(|(a, p)| a * m + p)
        .collect();
    let s_an = tape.gather(sims, &an)?;
    let s_ap = tape.gather(sims, &ap)?;
    let gap = tape.sub(s_an, s_ap)?;
    let shifted = tape.add_const(gap, triplets.margin)?;
    let hinge = tape.relu(shifted)?;
    Ok(TripletLoss {
        value: tape.sum(hinge)?,
        empty: false,
    })
}

/// Hardest in-batch negative mining.
///
/// For every ordered same-speaker pair `(a, p)` the negative is the
/// different-speaker row most similar to `a`; ties go to the lower index.
/// An empty result is logged as a warning.
pub fn select_triplets(
    embeddings: &Tensor,
    speakers: &[usize],
    margin: f64,
) -> Result<TripletBatch> {
    if embeddings.rank() != 2 || embeddings.shape()[0] != speakers.len() {
        return Err(Error::invalid(
            "select_triplets",
            format!(
                "{} labels for embeddings {:?}",
                speakers.len(),
                embeddings.shape()
            ),
        ));
    }
    let m = speakers.len();
    let mut hardest = vec![None; m];
    for (a, slot) in hardest.iter_mut().enumerate() {
        let mut best: Option<(usize, f64)> = None;
        for n in 0..m {
            if speakers[n] == speakers[a] {
                continue;
            }
            let s = cosine_similarity(embeddings.row(a), embeddings.row(n))?;
            if best.is_none_or(|(_, b)| s > b) {
                best = Some((n, s));
            }
        }
        *slot = best.map(|(n, _)| n);
    }
    let mut batch = TripletBatch {
        margin,
        ..TripletBatch::default()
    };
    for a in 0..m {
        let Some(n) = hardest[a] else { continue };
        for p in 0..m {
            if p != a && speakers[p] == speakers[a] {
                batch.anchors.push(a);
                batch.positives.push(p);
                batch.negatives.push(n);
            }
        }
    }
    if batch.is_empty() {
        warn!("no same-speaker pair in a batch of {m}; triplet set is empty");
    }
    Ok(batch)
}

/// `L_s + α·L_T`.
pub fn combined_loss(tape: &mut Tape, softmax: Var, triplet: Var, alpha: f64) -> Result<Var> {
    if !(alpha >= 0.0) {
        return Err(Error::invalid(
            "combined_loss",
            format!("alpha must be >= 0, got {alpha}"),
        ));
    }
    if alpha == 0.0 {
        return Ok(softmax);
    }
    let weighted = tape.scale(triplet, alpha)?;
    tape.add(softmax, weighted)
}

/// Plain-number form of [`combined_loss`].
pub fn combined_value(softmax: f64, triplet: f64, alpha: f64) -> f64 {
    if alpha == 0.0 {
        softmax
    } else {
        softmax + alpha * triplet
    }
}

/// One-hot channel label: `[1, 0]` for channel A, `[0, 1]` for channel B.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct ChannelLabel([f64; 2]);

impl ChannelLabel {
    pub const A: ChannelLabel = ChannelLabel([1.0, 0.0]);
    pub const B: ChannelLabel = ChannelLabel([0.0, 1.0]);

    pub fn new(one_hot: [f64; 2]) -> Result<Self> {
        match one_hot {
            [1.0, 0.0] | [0.0, 1.0] => Ok(ChannelLabel(one_hot)),
            other => Err(Error::invalid(
                "channel label",
                format!("{other:?} is not one-hot"),
            )),
        }
    }

    pub fn from_channel(channel: u8) -> Result<Self> {
        match channel {
            0 => Ok(Self::A),
            1 => Ok(Self::B),
            c => Err(Error::invalid(
                "channel label",
                format!("channel id {c} is not 0 or 1"),
            )),
        }
    }

    pub fn one_hot(self) -> [f64; 2] {
        self.0
    }

    pub fn class(self) -> usize {
        if self.0[0] == 1.0 {
            0
        } else {
            1
        }
    }
}

/// Two-class cross-entropy of the channel discriminator, summed over the batch.
///
/// The logits are expected to sit downstream of the reversal layer, so the
/// discriminator descends on this loss while the generator ascends on it.
pub fn channel_adversarial_loss(
    tape: &mut Tape,
    channel_logits: Var,
    labels: &[ChannelLabel],
) -> Result<Var> {
    let shape = tape.shape(channel_logits);
    if shape.len() != 2 || shape[1] != 2 {
        return Err(Error::invalid(
            "channel_loss",
            format!("expected [M, 2] logits, got {shape:?}"),
        ));
    }
    for l in labels {
        ChannelLabel::new(l.0)?;
    }
    let classes: Vec<usize> = labels.iter().map(|l| l.class()).collect();
    tape.softmax_cross_entropy(channel_logits, &classes)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::autodiff::gradcheck;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn logits(rows: usize, cols: usize, data: &[f64]) -> (Tape, Var) {
        let mut tape = Tape::new();
        let v = tape.leaf(Tensor::new(vec![rows, cols], data.to_vec()).unwrap());
        (tape, v)
    }

    fn unit_rows(m: usize, d: usize, seed: u64) -> Tensor {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut data = Vec::with_capacity(m * d);
        for _ in 0..m {
            let row: Vec<f64> = (0..d).map(|_| rng.random_range(-1.0..1.0)).collect();
            let n = row.iter().map(|v| v * v).sum::<f64>().sqrt();
            data.extend(row.iter().map(|v| v / n));
        }
        Tensor::new(vec![m, d], data).unwrap()
    }

    #[test]
    fn softmax_loss_values() {
        let (mut tape, v) = logits(1, 4, &[0.0; 4]);
        let l = softmax_loss(&mut tape, v, &[2]).unwrap();
        assert!((tape.value(l).item() - 4f64.ln()).abs() < 1e-12);

        let (mut tape, v) = logits(1, 3, &[10.0, 0.0, 0.0]);
        let l = softmax_loss(&mut tape, v, &[0]).unwrap();
        let expect = (1.0 + 2.0 * (-10f64).exp()).ln();
        assert!((tape.value(l).item() - expect).abs() < 1e-15);
        assert!((tape.value(l).item() - 9.0796e-5).abs() < 1e-8);

        let (mut tape, v) = logits(1, 2, &[1.0, 0.0]);
        let l = softmax_loss(&mut tape, v, &[1]).unwrap();
        assert!((tape.value(l).item() - 1.313262).abs() < 1e-6);

        let (mut tape, v) = logits(1, 2, &[1.0, 0.0]);
        assert!(softmax_loss(&mut tape, v, &[2]).is_err());
    }

    #[test]
    fn softmax_loss_sums_rows_and_ignores_row_shifts() {
        let base = [0.3, -1.2, 2.0, 0.7, 0.1, -0.4];
        let shifted: Vec<f64> = base
            .iter()
            .enumerate()
            .map(|(i, v)| v + if i < 3 { 5.0 } else { -3.0 })
            .collect();
        let (mut tape, v) = logits(2, 3, &base);
        let a = softmax_loss(&mut tape, v, &[1, 2]).unwrap();
        let (mut tape2, v2) = logits(2, 3, &shifted);
        let b = softmax_loss(&mut tape2, v2, &[1, 2]).unwrap();
        assert!((tape.value(a).item() - tape2.value(b).item()).abs() < 1e-9);
    }

    #[test]
    fn cosine_examples() {
        assert!((cosine_similarity(&[0.3, 0.4], &[0.3, 0.4]).unwrap() - 1.0).abs() < 1e-15);
        assert_eq!(cosine_similarity(&[1.0, 0.0], &[0.0, 2.0]).unwrap(), 0.0);
        assert!(
            (cosine_similarity(&[1.0, 1.0], &[1.0, 0.0]).unwrap()
                - std::f64::consts::FRAC_1_SQRT_2)
                .abs()
                < 1e-6
        );
        assert!(cosine_similarity(&[0.0, 0.0], &[1.0, 0.0]).is_err());
    }

    fn triplet_value(rows: &[[f64; 2]], batch: &TripletBatch) -> f64 {
        let mut tape = Tape::new();
        let data: Vec<f64> = rows.iter().flatten().copied().collect();
        let e = tape.leaf(Tensor::new(vec![rows.len(), 2], data).unwrap());
        let l = triplet_loss(&mut tape, e, batch).unwrap();
        tape.value(l.value).item()
    }

    #[test]
    fn triplet_examples() {
        let speakers = [0, 0, 1];
        let batch = TripletBatch::new(vec![0], vec![1], vec![2], 0.1, &speakers).unwrap();
        // p == a, n orthogonal: satisfied margin
        assert_eq!(
            triplet_value(&[[1.0, 0.0], [1.0, 0.0], [0.0, 1.0]], &batch),
            0.0
        );
        // n == a, p orthogonal: 1 + 0.1 - 0
        assert_eq!(
            triplet_value(&[[1.0, 0.0], [0.0, 1.0], [1.0, 0.0]], &batch),
            1.1
        );
    }

    #[test]
    fn triplet_batch_rejects_invalid_triples() {
        let speakers = [0, 0, 1];
        assert!(TripletBatch::new(vec![0], vec![2], vec![1], 0.1, &speakers).is_err());
        assert!(TripletBatch::new(vec![0], vec![1], vec![1], 0.1, &speakers).is_err());
        assert!(TripletBatch::new(vec![0], vec![1], vec![5], 0.1, &speakers).is_err());
    }

    #[test]
    fn empty_triplet_set_is_exact_zero_with_flag() {
        let mut tape = Tape::new();
        let e = tape.leaf(unit_rows(3, 4, 0));
        let l = triplet_loss(&mut tape, e, &TripletBatch::default()).unwrap();
        assert!(l.empty);
        assert_eq!(tape.value(l.value).item(), 0.0);
    }

    #[test]
    fn triplet_loss_matches_per_triplet_oracle() {
        let e = unit_rows(8, 5, 17);
        let speakers = [0, 0, 1, 1, 2, 2, 3, 3];
        let batch = select_triplets(&e, &speakers, 0.3).unwrap();
        let mut tape = Tape::new();
        let v = tape.leaf(e.clone());
        let l = triplet_loss(&mut tape, v, &batch).unwrap();
        let dot =
            |i: usize, j: usize| -> f64 { e.row(i).iter().zip(e.row(j)).map(|(a, b)| a * b).sum() };
        let oracle: f64 = (0..batch.len())
            .map(|t| {
                let (a, p, n) = (batch.anchors[t], batch.positives[t], batch.negatives[t]);
                (dot(a, n) + 0.3 - dot(a, p)).max(0.0)
            })
            .sum();
        assert!((tape.value(l.value).item() - oracle).abs() < 1e-12);
    }

    #[test]
    fn select_triplets_counts_and_empty_case() {
        let e = unit_rows(4, 3, 1);
        let b = select_triplets(&e, &[0, 0, 1, 1], 0.1).unwrap();
        assert_eq!(b.len(), 4);
        let b = select_triplets(&e, &[0, 1, 2, 3], 0.1).unwrap();
        assert!(b.is_empty());
    }

    #[test]
    fn select_triplets_matches_exhaustive_scan() {
        let mut rng = ChaCha8Rng::seed_from_u64(99);
        for seed in 0..20 {
            let m = rng.random_range(4..12);
            let e = unit_rows(m, 4, seed);
            let speakers: Vec<usize> = (0..m).map(|_| rng.random_range(0..3)).collect();
            let b = select_triplets(&e, &speakers, 0.1).unwrap();
            let mut expected = 0;
            for t in 0..b.len() {
                let a = b.anchors[t];
                let sims: Vec<(usize, f64)> = (0..m)
                    .filter(|&j| speakers[j] != speakers[a])
                    .map(|j| {
                        (
                            j,
                            e.row(a)
                                .iter()
                                .zip(e.row(j))
                                .map(|(x, y)| x * y)
                                .sum::<f64>(),
                        )
                    })
                    .collect();
                let best = sims.iter().map(|s| s.1).fold(f64::NEG_INFINITY, f64::max);
                let first = sims.iter().find(|s| s.1 >= best - 1e-12).unwrap().0;
                assert_eq!(b.negatives[t], first);
                assert_eq!(speakers[b.positives[t]], speakers[a]);
            }
            for a in 0..m {
                if speakers.iter().any(|&s| s != speakers[a]) {
                    expected += (0..m)
                        .filter(|&p| p != a && speakers[p] == speakers[a])
                        .count();
                }
            }
            assert_eq!(b.len(), expected);
        }
    }

    #[test]
    fn combined_loss_examples() {
        assert_eq!(combined_value(2.0, 0.5, 1.0), 2.5);
        assert_eq!(combined_value(2.0, 0.5, 0.0), 2.0);
        assert_eq!(combined_value(2.0, 0.0, 3.0), 2.0);

        let mut tape = Tape::new();
        let ls = tape.leaf(Tensor::scalar(2.0));
        let lt = tape.leaf(Tensor::scalar(0.5));
        let c = combined_loss(&mut tape, ls, lt, 1.0).unwrap();
        assert_eq!(tape.value(c).item(), 2.5);
        let c0 = combined_loss(&mut tape, ls, lt, 0.0).unwrap();
        assert_eq!(tape.value(c0).item().to_bits(), 2f64.to_bits());
        assert!(combined_loss(&mut tape, ls, lt, -1.0).is_err());
    }

    #[test]
    fn channel_loss_values() {
        let labels = [ChannelLabel::A, ChannelLabel::B, ChannelLabel::B];
        let (mut tape, v) = logits(3, 2, &[0.0; 6]);
        let l = channel_adversarial_loss(&mut tape, v, &labels).unwrap();
        assert!((tape.value(l).item() - 3.0 * 2f64.ln()).abs() < 1e-9);

        // confident and correct, logit gap of 20
        let (mut tape, v) = logits(2, 2, &[10.0, -10.0, -10.0, 10.0]);
        let l = channel_adversarial_loss(&mut tape, v, &labels[..2]).unwrap();
        let per_sample = (-20f64).exp().ln_1p();
        assert!((per_sample - 2.061e-9).abs() < 1e-12);
        assert!((tape.value(l).item() / 2.0 - per_sample).abs() / per_sample < 1e-5);
    }

    #[test]
    fn channel_labels_must_be_one_hot() {
        assert!(ChannelLabel::new([1.0, 1.0]).is_err());
        assert!(ChannelLabel::new([0.5, 0.5]).is_err());
        assert_eq!(ChannelLabel::new([0.0, 1.0]).unwrap().class(), 1);
        assert!(ChannelLabel::from_channel(2).is_err());
    }

    #[test]
    fn reversal_negates_channel_gradient_on_generator() {
        // generator: x·Wg; discriminator: relu(·)·Wd
        let x = unit_rows(4, 3, 5);
        let wg = unit_rows(3, 3, 6);
        let wd = unit_rows(3, 2, 7);
        let labels = [
            ChannelLabel::A,
            ChannelLabel::B,
            ChannelLabel::A,
            ChannelLabel::B,
        ];
        let grad = |reverse: bool| -> (Tensor, Tensor) {
            let mut tape = Tape::new();
            let xv = tape.leaf(x.clone());
            let g = tape.leaf(wg.clone());
            let d = tape.leaf(wd.clone());
            let h = tape.matmul(xv, g).unwrap();
            let h = if reverse {
                tape.grad_reverse(h, 1.0).unwrap()
            } else {
                h
            };
            let h = tape.tanh(h).unwrap();
            let z = tape.matmul(h, d).unwrap();
            let l = channel_adversarial_loss(&mut tape, z, &labels).unwrap();
            let grads = tape.backward(l).unwrap();
            (grads.get(g), grads.get(d))
        };
        let (g_rev, d_rev) = grad(true);
        let (g_id, d_id) = grad(false);
        for (a, b) in g_rev.data().iter().zip(g_id.data()) {
            assert_eq!(*a, -*b);
        }
        assert!(d_rev.bit_eq(&d_id));
    }

    #[test]
    fn losses_pass_gradcheck() {
        let mut rng = ChaCha8Rng::seed_from_u64(12);
        for point in 0..5 {
            let z = Tensor::new(
                vec![4, 5],
                (0..20).map(|_| rng.random_range(-3.0..3.0)).collect(),
            )
            .unwrap();
            let err = gradcheck(|tape, v| softmax_loss(tape, v, &[0, 4, 2, 2]), &z, 1e-5).unwrap();
            assert!(err <= 1e-4, "softmax point {point}: {err}");

            let raw = Tensor::new(
                vec![6, 4],
                (0..24).map(|_| rng.random_range(-1.0..1.0)).collect(),
            )
            .unwrap();
            let speakers = [0, 0, 1, 1, 2, 2];
            let err = gradcheck(
                |tape, v| {
                    let e = tape.l2_normalize_rows(v)?;
                    let batch = select_triplets(tape.value(e), &speakers, 0.5)?;
                    Ok(triplet_loss(tape, e, &batch)?.value)
                },
                &raw,
                1e-5,
            )
            .unwrap();
            assert!(err <= 1e-4, "triplet point {point}: {err}");
        }
    }
}
