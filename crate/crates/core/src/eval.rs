//! Trial scoring, EER, TopN recall, the channel probe and the β sweep.

use std::path::Path;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::autodiff::{Tape, Tensor};
use crate::data::{Corpus, UtteranceFeatures};
use crate::error::{Error, FormatError, Result};
use crate::model::{embed_utterances, Arch, Model};
use crate::train::{csv_err, train_loop, RunSpec};

/// Default TopN list (Top1, Top5, Top10).
pub const DEFAULT_TOPN: [usize; 3] = [1, 5, 10];
/// Default β grid.
pub const DEFAULT_BETAS: [f64; 6] = [0.0, 0.25, 0.5, 1.0, 2.0, 4.0];

const UNIT_TOLERANCE: f64 = 1e-3;

fn check_unit(v: &[f64], what: &str) -> Result<()> {
    let n = v.iter().map(|x| x * x).sum::<f64>().sqrt();
    if (n - 1.0).abs() > UNIT_TOLERANCE {
        return Err(Error::invalid(
            "score_trials",
            format!("{what} has norm {n}, expected 1"),
        ));
    }
    Ok(())
}

/// Cosine scores `[tests, enrolled]` between unit-norm embeddings.
///
/// Rows are computed in parallel on the current rayon pool; the output does
/// not depend on the thread count.
pub fn score_trials(enrolled: &[Vec<f64>], tests: &[Vec<f64>]) -> Result<Tensor> {
    if enrolled.is_empty() || tests.is_empty() {
        return Err(Error::invalid(
            "score_trials",
            "no enrolled speakers or no test utterances",
        ));
    }
    let d = enrolled[0].len();
    for (i, e) in enrolled.iter().enumerate() {
        if e.len() != d {
            return Err(Error::invalid(
                "score_trials",
                format!("enrolled {i} has dim {}, expected {d}", e.len()),
            ));
        }
        check_unit(e, &format!("enrolled embedding {i}"))?;
    }
    for (i, t) in tests.iter().enumerate() {
        if t.len() != d {
            return Err(Error::invalid(
                "score_trials",
                format!("test {i} has dim {}, expected {d}", t.len()),
            ));
        }
        check_unit(t, &format!("test embedding {i}"))?;
    }
    let rows: Vec<Vec<f64>> = tests
        .par_iter()
        .map(|t| {
            enrolled
                .iter()
                .map(|e| {
                    t.iter()
                        .zip(e)
                        .map(|(a, b)| a * b)
                        .sum::<f64>()
                        .clamp(-1.0, 1.0)
                })
                .collect()
        })
        .collect();
    Tensor::new(vec![tests.len(), enrolled.len()], rows.concat())
}

/// Equal error rate by nearest crossing.
///
/// Thresholds run over the sorted distinct scores; at each one FRR is the
/// fraction of targets strictly below and FAR the fraction of impostors at
/// or above. The result is `(FAR + FRR) / 2` where `|FAR - FRR|` is smallest,
/// the lowest such threshold winning ties.
pub fn compute_eer(targets: &[f64], impostors: &[f64]) -> Result<f64> {
    if targets.is_empty() || impostors.is_empty() {
        return Err(Error::invalid(
            "compute_eer",
            "target and impostor lists must be non-empty",
        ));
    }
    if targets.iter().chain(impostors).any(|s| s.is_nan()) {
        return Err(Error::NonFinite("compute_eer scores".into()));
    }
    let mut t = targets.to_vec();
    let mut i = impostors.to_vec();
    t.sort_by(f64::total_cmp);
    i.sort_by(f64::total_cmp);
    let mut thresholds: Vec<f64> = t.iter().chain(&i).copied().collect();
    thresholds.sort_by(f64::total_cmp);
    thresholds.dedup();

    let (nt, ni) = (t.len() as f64, i.len() as f64);
    let (mut below_t, mut below_i) = (0usize, 0usize);
    let mut best: Option<(f64, f64)> = None;
    for th in thresholds {
        while below_t < t.len() && t[below_t] < th {
            below_t += 1;
        }
        while below_i < i.len() && i[below_i] < th {
            below_i += 1;
        }
        let frr = below_t as f64 / nt;
        let far = (i.len() - below_i) as f64 / ni;
        let gap = (far - frr).abs();
        if best.is_none_or(|(g, _)| gap < g) {
            best = Some((gap, (far + frr) / 2.0));
        }
    }
    Ok(best.expect("at least one threshold").1)
}

/// Fraction of tests whose true speaker ranks within the top `n` scores.
/// Equal scores rank the lower speaker index higher.
pub fn topn_recall(scores: &Tensor, truth: &[usize], n: usize) -> Result<f64> {
    let (tests, speakers) = match *scores.shape() {
        [t, s] => (t, s),
        ref other => {
            return Err(Error::invalid(
                "topn_recall",
                format!("expected [tests, speakers], got {other:?}"),
            ))
        }
    };
    if truth.len() != tests {
        return Err(Error::invalid(
            "topn_recall",
            format!("{} labels for {tests} tests", truth.len()),
        ));
    }
    if n == 0 || n > speakers {
        return Err(Error::invalid(
            "topn_recall",
            format!("N must lie in 1..={speakers}, got {n}"),
        ));
    }
    let mut hits = 0;
    for (row, &j) in truth.iter().enumerate() {
        if j >= speakers {
            return Err(Error::invalid(
                "topn_recall",
                format!("true speaker {j} is not enrolled"),
            ));
        }
        let s = scores.row(row);
        let rank = (0..speakers)
            .filter(|&k| s[k] > s[j] || (s[k] == s[j] && k < j))
            .count();
        if rank < n {
            hits += 1;
        }
    }
    Ok(hits as f64 / tests as f64)
}

/// Enrolled speakers × test utterances.
#[derive(Clone, Debug, PartialEq)]
pub struct TrialList {
    /// Speaker id of each enrolled column.
    pub speakers: Vec<usize>,
    pub enrolled: Vec<Vec<f64>>,
    pub test_ids: Vec<String>,
    pub tests: Vec<Vec<f64>>,
    /// `[tests, speakers]`.
    pub scores: Tensor,
    /// Column of each test's true speaker.
    pub truth: Vec<usize>,
}

impl TrialList {
    /// Builds the list from precomputed embeddings.
    pub fn from_embeddings(
        speakers: Vec<usize>,
        enrolled: Vec<Vec<f64>>,
        test_ids: Vec<String>,
        tests: Vec<Vec<f64>>,
        truth: Vec<usize>,
    ) -> Result<Self> {
        let scores = score_trials(&enrolled, &tests)?;
        if truth.len() != tests.len()
            || test_ids.len() != tests.len()
            || speakers.len() != enrolled.len()
        {
            return Err(Error::invalid(
                "trials",
                "label and embedding counts differ",
            ));
        }
        Ok(TrialList {
            speakers,
            enrolled,
            test_ids,
            tests,
            scores,
            truth,
        })
    }

    pub fn target_scores(&self) -> Vec<f64> {
        self.truth
            .iter()
            .enumerate()
            .map(|(i, &j)| self.scores.row(i)[j])
            .collect()
    }

    pub fn impostor_scores(&self) -> Vec<f64> {
        let mut out = Vec::with_capacity(self.tests.len() * self.speakers.len().saturating_sub(1));
        for (i, &j) in self.truth.iter().enumerate() {
            out.extend(
                self.scores
                    .row(i)
                    .iter()
                    .enumerate()
                    .filter(|(k, _)| *k != j)
                    .map(|(_, s)| *s),
            );
        }
        out
    }

    pub fn eer(&self) -> Result<f64> {
        compute_eer(&self.target_scores(), &self.impostor_scores())
    }

    pub fn topn(&self, n: usize) -> Result<f64> {
        topn_recall(&self.scores, &self.truth, n)
    }

    /// One row per trial: `test_utterance_id, speaker_id, score, is_target`.
    pub fn write_scores_csv(&self, path: &Path) -> Result<()> {
        let mut w = csv::Writer::from_path(path).map_err(|e| csv_err(path, e))?;
        for (i, id) in self.test_ids.iter().enumerate() {
            for (k, &spk) in self.speakers.iter().enumerate() {
                w.serialize(ScoreRow {
                    test_utterance_id: id.clone(),
                    speaker_id: spk,
                    score: self.scores.row(i)[k],
                    is_target: k == self.truth[i],
                })
                .map_err(|e| csv_err(path, e))?;
            }
        }
        w.flush().map_err(|e| Error::io(path, e))
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ScoreRow {
    pub test_utterance_id: String,
    pub speaker_id: usize,
    pub score: f64,
    pub is_target: bool,
}

fn mean_normalized(rows: &[&Vec<f64>]) -> Result<Vec<f64>> {
    let d = rows[0].len();
    let mut m = vec![0.0; d];
    for r in rows {
        for (a, b) in m.iter_mut().zip(r.iter()) {
            *a += b;
        }
    }
    let n = m.iter().map(|x| x * x).sum::<f64>().sqrt();
    if !(n > 0.0) {
        return Err(Error::NonFinite("enrolment mean has zero norm".into()));
    }
    Ok(m.into_iter().map(|x| x / n).collect())
}

/// Enrols each speaker from its channel-A utterances and scores every
/// channel-B utterance against every enrolled speaker.
pub fn build_trials(
    partition: &[UtteranceFeatures],
    model: &Model,
    window: usize,
) -> Result<TrialList> {
    let feats: Vec<&Tensor> = partition.iter().map(|u| &u.features).collect();
    let emb = embed_utterances(model, &feats, window)?;
    trials_from_embeddings(partition, &emb)
}

/// [`build_trials`] over embeddings that are already computed.
pub fn trials_from_embeddings(
    partition: &[UtteranceFeatures],
    emb: &[Vec<f64>],
) -> Result<TrialList> {
    let mut speakers: Vec<usize> = partition.iter().map(|u| u.speaker_id).collect();
    speakers.sort_unstable();
    speakers.dedup();
    let mut enrolled = Vec::with_capacity(speakers.len());
    for &s in &speakers {
        let rows: Vec<&Vec<f64>> = partition
            .iter()
            .zip(emb)
            .filter(|(u, _)| u.speaker_id == s && u.channel_id == 0)
            .map(|(_, e)| e)
            .collect();
        if rows.is_empty() {
            return Err(Error::Corpus(format!(
                "speaker {s} has no channel-A enrolment utterance"
            )));
        }
        enrolled.push(mean_normalized(&rows)?);
    }
    let mut test_ids = Vec::new();
    let mut tests = Vec::new();
    let mut truth = Vec::new();
    for (u, e) in partition.iter().zip(emb) {
        if u.channel_id == 1 {
            test_ids.push(u.utterance_id.clone());
            tests.push(e.clone());
            truth.push(
                speakers
                    .binary_search(&u.speaker_id)
                    .expect("speaker listed above"),
            );
        }
    }
    if tests.is_empty() {
        return Err(Error::Corpus("no channel-B test utterances".into()));
    }
    TrialList::from_embeddings(speakers, enrolled, test_ids, tests, truth)
}

/// Dev EER and test TopN of one model.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Metrics {
    pub dev_eer: f64,
    pub test_eer: f64,
    /// `(N, recall)` pairs.
    pub test_topn: Vec<(usize, f64)>,
}

impl Metrics {
    pub fn top(&self, n: usize) -> Option<f64> {
        self.test_topn
            .iter()
            .find(|(k, _)| *k == n)
            .map(|(_, r)| *r)
    }
}

pub fn evaluate(model: &Model, corpus: &Corpus, n_list: &[usize]) -> Result<Metrics> {
    let window = model.config.frames;
    let dev = build_trials(&corpus.dev, model, window)?;
    let test = build_trials(&corpus.test, model, window)?;
    let test_topn = n_list
        .iter()
        .map(|&n| Ok((n, test.topn(n.min(test.speakers.len()))?)))
        .collect::<Result<_>>()?;
    Ok(Metrics {
        dev_eer: dev.eer()?,
        test_eer: test.eer()?,
        test_topn,
    })
}

// ---- channel probe --------------------------------------------------------------

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ProbeConfig {
    pub hidden: usize,
    pub steps: usize,
    pub lr: f64,
    pub seed: u64,
}

impl Default for ProbeConfig {
    fn default() -> Self {
        ProbeConfig {
            hidden: 32,
            steps: 300,
            lr: 0.5,
            seed: 0,
        }
    }
}

/// Trains a two-layer classifier (`linear → relu → linear`) on frozen
/// vectors with full-batch gradient descent on mean cross-entropy and
/// returns its accuracy on the held-out vectors.
pub fn channel_probe(
    train: &[Vec<f64>],
    train_labels: &[usize],
    test: &[Vec<f64>],
    test_labels: &[usize],
    config: &ProbeConfig,
) -> Result<f64> {
    if train.is_empty()
        || test.is_empty()
        || train.len() != train_labels.len()
        || test.len() != test_labels.len()
    {
        return Err(Error::invalid(
            "channel_probe",
            "empty or mislabelled probe data",
        ));
    }
    let d = train[0].len();
    let classes = train_labels
        .iter()
        .chain(test_labels)
        .max()
        .map_or(2, |m| (m + 1).max(2));
    let mut rng = ChaCha8Rng::seed_from_u64(config.seed);
    let mut init = |rows: usize, cols: usize| {
        let bound = (6.0 / (rows + cols) as f64).sqrt();
        Tensor::new(
            vec![rows, cols],
            (0..rows * cols)
                .map(|_| rng.random_range(-bound..bound))
                .collect(),
        )
    };
    let mut w0 = init(d, config.hidden)?;
    let mut b0 = Tensor::zeros(&[config.hidden]);
    let mut w1 = init(config.hidden, classes)?;
    let mut b1 = Tensor::zeros(&[classes]);
    let x = Tensor::new(vec![train.len(), d], train.concat())?;
    let forward = |tape: &mut Tape, x: &Tensor, params: [&Tensor; 4]| -> Result<_> {
        let xv = tape.leaf(x.clone());
        let vars = params.map(|p| tape.leaf(p.clone()));
        let h = tape.matmul(xv, vars[0])?;
        let h = tape.add_row_bias(h, vars[1])?;
        let h = tape.relu(h)?;
        let z = tape.matmul(h, vars[2])?;
        let z = tape.add_row_bias(z, vars[3])?;
        Ok((vars, z))
    };
    for _ in 0..config.steps {
        let mut tape = Tape::new();
        let (vars, z) = forward(&mut tape, &x, [&w0, &b0, &w1, &b1])?;
        let loss = tape.softmax_cross_entropy(z, train_labels)?;
        let grads = tape.backward(loss)?;
        let scale = config.lr / train.len() as f64;
        for (p, v) in [&mut w0, &mut b0, &mut w1, &mut b1].into_iter().zip(vars) {
            let g = grads.get(v);
            for (t, d) in p.data_mut().iter_mut().zip(g.data()) {
                *t -= scale * d;
            }
        }
    }
    let xt = Tensor::new(vec![test.len(), d], test.concat())?;
    let mut tape = Tape::new();
    let (_, z) = forward(&mut tape, &xt, [&w0, &b0, &w1, &b1])?;
    let z = tape.value(z);
    let correct = test_labels
        .iter()
        .enumerate()
        .filter(|(i, &y)| {
            let row = z.row(*i);
            let arg = (0..classes).fold(0, |best, k| if row[k] > row[best] { k } else { best });
            arg == y
        })
        .count();
    Ok(correct as f64 / test.len() as f64)
}

/// Channel-probe accuracy on a model's utterance embeddings: trained on the
/// dev speakers, tested on the test speakers (both channels each).
pub fn embedding_channel_probe(
    model: &Model,
    corpus: &Corpus,
    config: &ProbeConfig,
) -> Result<f64> {
    let window = model.config.frames;
    let embed = |part: &[UtteranceFeatures]| {
        let feats: Vec<&Tensor> = part.iter().map(|u| &u.features).collect();
        embed_utterances(model, &feats, window)
    };
    let labels = |part: &[UtteranceFeatures]| {
        part.iter()
            .map(|u| usize::from(u.channel_id))
            .collect::<Vec<_>>()
    };
    channel_probe(
        &embed(&corpus.dev)?,
        &labels(&corpus.dev),
        &embed(&corpus.test)?,
        &labels(&corpus.test),
        config,
    )
}

// ---- β sweep ------------------------------------------------------------------------

/// One trained cell of the sweep.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SweepCell {
    pub beta: f64,
    pub seed: u64,
    pub dev_eer: Option<f64>,
    pub test_top1: Option<f64>,
    pub error: Option<String>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SweepMedian {
    pub beta: f64,
    pub dev_eer: Option<f64>,
    pub test_top1: Option<f64>,
    pub cells: usize,
}

pub fn median(values: &[f64]) -> Option<f64> {
    if values.is_empty() {
        return None;
    }
    let mut v = values.to_vec();
    v.sort_by(f64::total_cmp);
    let n = v.len();
    Some(if n % 2 == 1 {
        v[n / 2]
    } else {
        (v[n / 2 - 1] + v[n / 2]) / 2.0
    })
}

/// Trains and evaluates one CAT run.
pub fn run_cell(base: &RunSpec, corpus: &Corpus, beta: f64, seed: u64) -> Result<(f64, f64)> {
    let mut spec = base.clone();
    spec.model.arch = Arch::Cat;
    spec.train.beta = beta;
    spec.train.seed = seed;
    let out = train_loop(&spec, corpus)?;
    let m = evaluate(&out.best, corpus, &[1])?;
    Ok((m.dev_eer, m.top(1).expect("top1 requested")))
}

/// Trains one CAT model per `(beta, seed)`; failed cells are recorded and
/// the sweep carries on.
pub fn beta_sweep(
    base: &RunSpec,
    corpus: &Corpus,
    betas: &[f64],
    seeds: &[u64],
    mut on_cell: impl FnMut(&SweepCell),
) -> Result<Vec<SweepCell>> {
    if betas.is_empty() || seeds.is_empty() {
        return Err(Error::invalid(
            "beta_sweep",
            "need at least one beta and one seed",
        ));
    }
    let mut cells = Vec::with_capacity(betas.len() * seeds.len());
    for &beta in betas {
        for &seed in seeds {
            let cell = match run_cell(base, corpus, beta, seed) {
                Ok((eer, top1)) => SweepCell {
                    beta,
                    seed,
                    dev_eer: Some(eer),
                    test_top1: Some(top1),
                    error: None,
                },
                Err(e) => SweepCell {
                    beta,
                    seed,
                    dev_eer: None,
                    test_top1: None,
                    error: Some(e.to_string()),
                },
            };
            on_cell(&cell);
            cells.push(cell);
        }
    }
    Ok(cells)
}

/// Per-β medians over the successful cells, in first-appearance order of β.
pub fn sweep_medians(cells: &[SweepCell]) -> Vec<SweepMedian> {
    let mut betas: Vec<f64> = Vec::new();
    for c in cells {
        if !betas.iter().any(|b| b.to_bits() == c.beta.to_bits()) {
            betas.push(c.beta);
        }
    }
    betas
        .into_iter()
        .map(|beta| {
            let row: Vec<&SweepCell> = cells
                .iter()
                .filter(|c| c.beta.to_bits() == beta.to_bits())
                .collect();
            let eers: Vec<f64> = row.iter().filter_map(|c| c.dev_eer).collect();
            let tops: Vec<f64> = row.iter().filter_map(|c| c.test_top1).collect();
            SweepMedian {
                beta,
                dev_eer: median(&eers),
                test_top1: median(&tops),
                cells: eers.len(),
            }
        })
        .collect()
}

#[derive(Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
struct CellRow {
    beta: f64,
    seed: u64,
    dev_eer: String,
    test_top1: String,
    error: String,
}

#[derive(Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
struct MedianRow {
    beta: f64,
    dev_eer: String,
    test_top1: String,
    cells: usize,
}

fn opt(v: Option<f64>) -> String {
    v.map(|v| v.to_string()).unwrap_or_default()
}

fn parse_opt(s: &str, path: &Path) -> Result<Option<f64>> {
    if s.is_empty() {
        return Ok(None);
    }
    s.parse().map(Some).map_err(|_| Error::Format {
        kind: "csv",
        reason: FormatError::Malformed(format!("{}: bad number {s:?}", path.display())),
    })
}

pub fn write_sweep_csv(path: &Path, cells: &[SweepCell]) -> Result<()> {
    let mut w = csv::Writer::from_path(path).map_err(|e| csv_err(path, e))?;
    for c in cells {
        w.serialize(CellRow {
            beta: c.beta,
            seed: c.seed,
            dev_eer: opt(c.dev_eer),
            test_top1: opt(c.test_top1),
            error: c.error.clone().unwrap_or_default(),
        })
        .map_err(|e| csv_err(path, e))?;
    }
    w.flush().map_err(|e| Error::io(path, e))
}

pub fn read_sweep_csv(path: &Path) -> Result<Vec<SweepCell>> {
    let mut r = csv::Reader::from_path(path).map_err(|e| csv_err(path, e))?;
    let mut out = Vec::new();
    for row in r.deserialize::<CellRow>() {
        let row = row.map_err(|e| csv_err(path, e))?;
        out.push(SweepCell {
            beta: row.beta,
            seed: row.seed,
            dev_eer: parse_opt(&row.dev_eer, path)?,
            test_top1: parse_opt(&row.test_top1, path)?,
            error: (!row.error.is_empty()).then_some(row.error),
        });
    }
    Ok(out)
}

pub fn write_median_csv(path: &Path, medians: &[SweepMedian]) -> Result<()> {
    let mut w = csv::Writer::from_path(path).map_err(|e| csv_err(path, e))?;
    for m in medians {
        w.serialize(MedianRow {
            beta: m.beta,
            dev_eer: opt(m.dev_eer),
            test_top1: opt(m.test_top1),
            cells: m.cells,
        })
        .map_err(|e| csv_err(path, e))?;
    }
    w.flush().map_err(|e| Error::io(path, e))
}

pub fn read_median_csv(path: &Path) -> Result<Vec<SweepMedian>> {
    let mut r = csv::Reader::from_path(path).map_err(|e| csv_err(path, e))?;
    let mut out = Vec::new();
    for row in r.deserialize::<MedianRow>() {
        let row = row.map_err(|e| csv_err(path, e))?;
        out.push(SweepMedian {
            beta: row.beta,
            dev_eer: parse_opt(&row.dev_eer, path)?,
            test_top1: parse_opt(&row.test_top1, path)?,
            cells: row.cells,
        });
    }
    Ok(out)
}
