//! SGD training for all three architectures, with dev-driven learning-rate
//! decay, best-dev model retention and checkpoints.

use std::fs;
use std::io::Write;
use std::path::Path;

use log::{info, warn};
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::autodiff::{Tape, Tensor, Var};
use crate::data::{make_batches, Batch, Corpus};
use crate::error::{Error, FormatError, Result};
use crate::eval::build_trials;
use crate::layers::{apply_stat_updates, Ctx, Mode, ParamId, ParamStore};
use crate::losses::{
    channel_adversarial_loss, combined_loss, select_triplets, softmax_loss, triplet_loss,
    ChannelLabel, Reduction, DEFAULT_MARGIN,
};
use crate::model::{decode_checkpoint, encode_checkpoint, DropoutRngs, Model, ModelConfig};

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct TrainConfig {
    pub lr: f64,
    pub lr_decay: f64,
    /// Non-improving dev evaluations before each decay.
    pub patience: usize,
    pub lr_floor: f64,
    pub epochs: usize,
    /// Speakers per batch.
    pub p: usize,
    /// Utterances per speaker in a batch.
    pub k: usize,
    pub alpha: f64,
    pub beta: f64,
    pub delta: f64,
    pub reduction: Reduction,
    pub seed: u64,
    /// Epochs between dev evaluations; the last epoch is always evaluated.
    pub eval_interval: usize,
}

impl Default for TrainConfig {
    fn default() -> Self {
        TrainConfig {
            lr: 0.2,
            lr_decay: 0.5,
            patience: 2,
            lr_floor: 1e-4,
            epochs: 12,
            p: 16,
            k: 4,
            alpha: 1.0,
            beta: 1.0,
            delta: DEFAULT_MARGIN,
            reduction: Reduction::Mean,
            seed: 0,
            eval_interval: 1,
        }
    }
}

impl TrainConfig {
    /// Settings used on the synthetic corpus.
    pub fn desk() -> Self {
        TrainConfig {
            lr: 0.1,
            eval_interval: 3,
            ..TrainConfig::default()
        }
    }

    pub fn validate(&self) -> Result<()> {
        let fail = |m: String| Err(Error::Config(m));
        if !(self.lr > 0.0 && self.lr.is_finite())
            || !(self.lr_floor > 0.0)
            || self.lr_floor > self.lr
        {
            return fail(format!(
                "need 0 < lr_floor <= lr, got lr={} floor={}",
                self.lr, self.lr_floor
            ));
        }
        if !(self.lr_decay > 0.0 && self.lr_decay < 1.0) {
            return fail(format!(
                "lr_decay must lie in (0, 1), got {}",
                self.lr_decay
            ));
        }
        if self.patience == 0 || self.eval_interval == 0 {
            return fail("patience and eval_interval must be >= 1".into());
        }
        if self.p == 0 || self.k < 2 {
            return fail(format!(
                "need p >= 1 and k >= 2, got p={} k={}",
                self.p, self.k
            ));
        }
        if !(self.alpha >= 0.0)
            || !(self.beta >= 0.0)
            || !self.beta.is_finite()
            || !(self.delta >= 0.0)
        {
            return fail("alpha, beta and delta must be finite and >= 0".into());
        }
        Ok(())
    }
}

/// Architecture, network and optimization settings of one run; this is the
/// config block stored in checkpoints.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct RunSpec {
    pub model: ModelConfig,
    pub train: TrainConfig,
}

/// θ ← θ − lr·g for every parameter that has a gradient.
///
/// Gradients are checked before anything is written, so a non-finite
/// gradient leaves the store untouched.
pub fn sgd_step(store: &mut ParamStore, grads: &[(ParamId, Tensor)], lr: f64) -> Result<()> {
    for (id, g) in grads {
        if g.shape() != store.get(*id).shape() {
            return Err(Error::ShapeMismatch {
                op: "sgd_step",
                left: store.get(*id).shape().to_vec(),
                right: g.shape().to_vec(),
            });
        }
        if !g.all_finite() {
            return Err(Error::NonFinite(format!("gradient of {}", store.name(*id))));
        }
    }
    for (id, g) in grads {
        let theta = store.get_mut(*id);
        for (t, d) in theta.data_mut().iter_mut().zip(g.data()) {
            *t -= lr * d;
        }
    }
    Ok(())
}

/// Learning rate after the latest dev evaluation in `history`.
///
/// Every `patience` consecutive evaluations without a strict improvement on
/// the best EER so far halve the rate (by `lr_decay`), never below the floor.
pub fn lr_schedule_update(history: &[f64], lr: f64, config: &TrainConfig) -> f64 {
    let Some((&first, rest)) = history.split_first() else {
        return lr;
    };
    let mut best = first;
    let mut stale = 0;
    for &e in rest {
        if e < best {
            best = e;
            stale = 0;
        } else {
            stale += 1;
        }
    }
    if stale > 0 && stale % config.patience == 0 {
        (lr * config.lr_decay).max(config.lr_floor)
    } else {
        lr
    }
}

/// One optimizer step's loss components.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct StepRecord {
    pub step: usize,
    #[serde(rename = "L_s")]
    pub l_s: f64,
    #[serde(rename = "L_T")]
    pub l_t: f64,
    #[serde(rename = "L_ch")]
    pub l_ch: f64,
    pub total: f64,
    pub lr: f64,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct EvalRecord {
    pub epoch: usize,
    pub step: usize,
    pub dev_eer: f64,
    pub lr_before: f64,
    pub lr_after: f64,
    pub improved: bool,
}

#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct TrainLog {
    pub steps: Vec<StepRecord>,
    pub evals: Vec<EvalRecord>,
    /// Batches whose triplet set came out empty.
    pub empty_triplet_batches: usize,
}

impl TrainLog {
    pub fn write_csv(&self, path: &Path) -> Result<()> {
        let mut w = csv::Writer::from_path(path).map_err(|e| csv_err(path, e))?;
        for r in &self.steps {
            w.serialize(r).map_err(|e| csv_err(path, e))?;
        }
        w.flush().map_err(|e| Error::io(path, e))
    }

    pub fn read_csv(path: &Path) -> Result<Vec<StepRecord>> {
        let mut r = csv::Reader::from_path(path).map_err(|e| csv_err(path, e))?;
        let expected = ["step", "L_s", "L_T", "L_ch", "total", "lr"];
        let headers = r.headers().map_err(|e| csv_err(path, e))?;
        if headers.iter().ne(expected) {
            return Err(Error::Format {
                kind: "train log",
                reason: FormatError::Malformed(format!(
                    "columns {headers:?}, expected {expected:?}"
                )),
            });
        }
        r.deserialize()
            .map(|row| row.map_err(|e| csv_err(path, e)))
            .collect()
    }
}

pub(crate) fn csv_err(path: &Path, e: csv::Error) -> Error {
    Error::Format {
        kind: "csv",
        reason: FormatError::Malformed(format!("{}: {e}", path.display())),
    }
}

/// Machine-readable run summary.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct TrainSummary {
    pub arch: String,
    pub seed: u64,
    pub epochs: usize,
    pub steps: usize,
    pub best_epoch: Option<usize>,
    pub best_dev_eer: Option<f64>,
    pub final_lr: f64,
    pub final_total_loss: Option<f64>,
    pub empty_triplet_batches: usize,
}

pub struct TrainOutcome {
    /// Parameters with the best dev EER (the initialization if no evaluation ran).
    pub best: Model,
    /// Parameters after the last step.
    pub last: Model,
    pub log: TrainLog,
    pub summary: TrainSummary,
}

/// Per-epoch observer: `(epoch, model after that epoch, dev EER if evaluated)`.
pub type EpochHook<'a> = dyn FnMut(usize, &Model, Option<f64>) -> Result<()> + 'a;

/// Trains with the default (no-op) epoch hook.
pub fn train_loop(spec: &RunSpec, corpus: &Corpus) -> Result<TrainOutcome> {
    train_loop_with(spec, corpus, &mut |_, _, _| Ok(()))
}

/// Loss nodes of one batch.
pub struct BatchLosses {
    pub softmax: Var,
    pub triplet: Var,
    pub channel: Option<Var>,
    pub total: Var,
    pub empty_triplets: bool,
}

/// Forward pass plus `L_s + α·L_T (+ L_ch)` for one batch.
pub fn batch_losses(
    ctx: &mut Ctx,
    model: &Model,
    features: Var,
    batch: &Batch,
    cfg: &TrainConfig,
    drops: &mut DropoutRngs,
) -> Result<BatchLosses> {
    let out = model.forward(ctx, features, cfg.beta, drops)?;
    let m = batch.len();
    let ls = softmax_loss(ctx.tape, out.logits, &batch.speakers)?;
    let softmax = cfg.reduction.apply(ctx.tape, ls, m)?;
    let triplets = select_triplets(ctx.tape.value(out.embeddings), &batch.speakers, cfg.delta)?;
    let lt = triplet_loss(ctx.tape, out.embeddings, &triplets)?;
    let triplet = cfg.reduction.apply(ctx.tape, lt.value, triplets.len())?;
    let mut total = combined_loss(ctx.tape, softmax, triplet, cfg.alpha)?;
    let mut channel = None;
    if let Some(z) = out.channel_logits {
        let labels = batch
            .channels
            .iter()
            .map(|&c| ChannelLabel::from_channel(c))
            .collect::<Result<Vec<_>>>()?;
        let lch = channel_adversarial_loss(ctx.tape, z, &labels)?;
        let lch = cfg.reduction.apply(ctx.tape, lch, m)?;
        total = ctx.tape.add(total, lch)?;
        channel = Some(lch);
    }
    Ok(BatchLosses {
        softmax,
        triplet,
        channel,
        total,
        empty_triplets: lt.empty,
    })
}

/// Total training loss of `batch` in training mode, without updating anything.
pub fn probe_loss(
    model: &Model,
    batch: &Batch,
    cfg: &TrainConfig,
    dropout_seed: u64,
) -> Result<f64> {
    let mut tape = Tape::new();
    let mut ctx = Ctx::new(&mut tape, &model.store, Mode::Train);
    let x = ctx.tape.leaf(batch.features.clone());
    let losses = batch_losses(
        &mut ctx,
        model,
        x,
        batch,
        cfg,
        &mut DropoutRngs::new(dropout_seed),
    )?;
    Ok(tape.value(losses.total).item())
}

/// Seeds the batching stream; the init and dropout streams are separate.
fn batch_rng(seed: u64) -> ChaCha8Rng {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    rng.set_stream(10);
    rng
}

/// Runs the configured number of epochs, evaluating dev EER every
/// `eval_interval` epochs and keeping the best model.
pub fn train_loop_with(
    spec: &RunSpec,
    corpus: &Corpus,
    hook: &mut EpochHook,
) -> Result<TrainOutcome> {
    let cfg = &spec.train;
    cfg.validate()?;
    let mut model_cfg = spec.model.clone();
    if model_cfg.speakers == 0 {
        model_cfg.speakers = corpus.train_speaker_count();
    }
    if corpus
        .train
        .iter()
        .any(|u| u.speaker_id >= model_cfg.speakers)
    {
        return Err(Error::Corpus(format!(
            "training speaker ids exceed the {} softmax classes",
            model_cfg.speakers
        )));
    }
    if let Some(dim) = corpus.dim() {
        if dim != model_cfg.dim {
            return Err(Error::Corpus(format!(
                "corpus has F={dim}, model expects F={}",
                model_cfg.dim
            )));
        }
    }
    let mut model = Model::new(model_cfg, cfg.seed)?;
    let mut best = model.clone();
    let mut best_eer: Option<f64> = None;
    let mut best_epoch = None;
    let mut log = TrainLog::default();
    let mut history = Vec::new();
    let mut lr = cfg.lr;
    let mut batcher = batch_rng(cfg.seed);
    let mut drops = DropoutRngs::new(cfg.seed);
    let window = model.config.frames;

    for epoch in 1..=cfg.epochs {
        let batches = make_batches(&corpus.train, cfg.p, cfg.k, &mut batcher)?;
        for batch in &batches {
            let step = log.steps.len();
            let mut tape = Tape::new();
            let mut ctx = Ctx::new(&mut tape, &model.store, Mode::Train);
            let x = ctx.tape.leaf(batch.features.clone());
            let losses =
                batch_losses(&mut ctx, &model, x, batch, cfg, &mut drops).map_err(|e| match e {
                    Error::NonFinite(detail) => Error::Diverged { step, detail },
                    other => other,
                })?;
            if losses.empty_triplets {
                log.empty_triplet_batches += 1;
            }
            let total = losses.total;
            let value = |v: Option<Var>| v.map_or(0.0, |v| ctx.tape.value(v).item());
            let record = StepRecord {
                step,
                l_s: value(Some(losses.softmax)),
                l_t: value(Some(losses.triplet)),
                l_ch: value(losses.channel),
                total: value(Some(total)),
                lr,
            };
            if ![record.l_s, record.l_t, record.l_ch, record.total]
                .iter()
                .all(|v| v.is_finite())
            {
                return Err(Error::Diverged {
                    step,
                    detail: format!("non-finite loss {record:?}"),
                });
            }
            let bound = ctx.bound();
            let stats = ctx.take_stat_updates();
            let grads = tape.backward(total)?;
            let grads: Vec<(ParamId, Tensor)> = bound
                .into_iter()
                .map(|(id, v)| (id, grads.get(v)))
                .collect();
            sgd_step(&mut model.store, &grads, lr).map_err(|e| Error::Diverged {
                step,
                detail: e.to_string(),
            })?;
            apply_stat_updates(&mut model.store, stats);
            log.steps.push(record);
        }

        let mut dev_eer = None;
        if (epoch % cfg.eval_interval == 0 || epoch == cfg.epochs) && !corpus.dev.is_empty() {
            let eer = build_trials(&corpus.dev, &model, window)
                .and_then(|t| t.eer())
                .map_err(|e| match e {
                    Error::NonFinite(detail) => Error::Diverged {
                        step: log.steps.len(),
                        detail,
                    },
                    other => other,
                })?;
            history.push(eer);
            let improved = best_eer.is_none_or(|b| eer < b);
            if improved {
                best_eer = Some(eer);
                best_epoch = Some(epoch);
                best = model.clone();
            }
            let lr_before = lr;
            lr = lr_schedule_update(&history, lr, cfg);
            if lr != lr_before {
                info!("epoch {epoch}: dev EER {eer:.4} stalled, lr {lr_before} -> {lr}");
            }
            log.evals.push(EvalRecord {
                epoch,
                step: log.steps.len(),
                dev_eer: eer,
                lr_before,
                lr_after: lr,
                improved,
            });
            dev_eer = Some(eer);
        }
        hook(epoch, &model, dev_eer)?;
    }
    if log.empty_triplet_batches > 0 {
        warn!("{} batches had no triplets", log.empty_triplet_batches);
    }
    let summary = TrainSummary {
        arch: model.config.arch.name().to_string(),
        seed: cfg.seed,
        epochs: cfg.epochs,
        steps: log.steps.len(),
        best_epoch,
        best_dev_eer: best_eer,
        final_lr: lr,
        final_total_loss: log.steps.last().map(|s| s.total),
        empty_triplet_batches: log.empty_triplet_batches,
    };
    if best_epoch.is_none() {
        best = model.clone();
    }
    Ok(TrainOutcome {
        best,
        last: model,
        log,
        summary,
    })
}

/// Stores the model's parameters with the run configuration.
pub fn save_checkpoint(model: &Model, train: &TrainConfig, path: &Path) -> Result<()> {
    let spec = RunSpec {
        model: model.config.clone(),
        train: train.clone(),
    };
    let text = toml::to_string(&spec).map_err(|e| Error::Config(e.to_string()))?;
    let mut f = fs::File::create(path).map_err(|e| Error::io(path, e))?;
    f.write_all(&encode_checkpoint(&text, &model.store))
        .map_err(|e| Error::io(path, e))
}

/// Rebuilds the model described by a checkpoint and loads its tensors.
pub fn load_checkpoint(path: &Path) -> Result<(Model, RunSpec)> {
    let bytes = fs::read(path).map_err(|e| Error::io(path, e))?;
    let (text, tensors) = decode_checkpoint(&bytes)?;
    let spec: RunSpec = toml::from_str(&text).map_err(|e| Error::Format {
        kind: "checkpoint",
        reason: FormatError::Malformed(format!("config block: {e}")),
    })?;
    let mut model = Model::new(spec.model.clone(), spec.train.seed)?;
    model.load_params(tensors)?;
    Ok((model, spec))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::data::{synth_corpus, SynthCorpusConfig};
    use crate::model::{Arch, D2Tap};

    fn tiny_corpus(sigma: f64) -> Corpus {
        synth_corpus(&SynthCorpusConfig {
            train_speakers: 8,
            eval_speakers: 4,
            utterances_per_channel: 2,
            frames: 8,
            dim: 4,
            noise_sigma: sigma,
            ..SynthCorpusConfig::default()
        })
        .unwrap()
    }

    fn tiny_spec(arch: Arch, beta: f64, seed: u64) -> RunSpec {
        RunSpec {
            model: ModelConfig {
                arch,
                frames: 8,
                dim: 4,
                widths: vec![3, 4],
                pool_stages: 2,
                embedding_dim: 4,
                d2_hidden: 5,
                d2_tap: D2Tap::Embedding,
                ..ModelConfig::default()
            },
            train: TrainConfig {
                lr: 0.05,
                epochs: 3,
                p: 4,
                k: 2,
                beta,
                seed,
                ..TrainConfig::default()
            },
        }
    }

    #[test]
    fn sgd_examples() {
        let mut store = ParamStore::new();
        let id = store.insert("w", Tensor::vector(vec![1.0, 1.0]), true);
        sgd_step(&mut store, &[(id, Tensor::vector(vec![0.5, 0.0]))], 0.2).unwrap();
        assert_eq!(store.get(id).data(), &[0.9, 1.0]);
        sgd_step(&mut store, &[(id, Tensor::vector(vec![3.0, 3.0]))], 0.0).unwrap();
        assert_eq!(store.get(id).data(), &[0.9, 1.0]);
        let err = sgd_step(
            &mut store,
            &[(id, Tensor::vector(vec![f64::NAN, 0.0]))],
            0.1,
        )
        .unwrap_err();
        assert!(err.to_string().contains('w'), "{err}");
        assert_eq!(store.get(id).data(), &[0.9, 1.0]);
    }

    #[test]
    fn schedule_examples() {
        let cfg = TrainConfig::default();
        assert_eq!(lr_schedule_update(&[10.0, 9.0], 0.2, &cfg), 0.2);
        assert_eq!(lr_schedule_update(&[10.0, 10.0], 0.2, &cfg), 0.2);
        assert_eq!(lr_schedule_update(&[10.0, 10.0, 10.0], 0.2, &cfg), 0.1);
        assert_eq!(
            lr_schedule_update(&[10.0, 10.0, 10.0, 10.0], 0.1, &cfg),
            0.1
        );
        assert_eq!(lr_schedule_update(&[10.0, 10.0, 10.0], 1e-4, &cfg), 1e-4);
        assert_eq!(lr_schedule_update(&[10.0, 11.0, 9.0, 9.5], 0.2, &cfg), 0.2);
    }

    #[test]
    fn zero_epochs_returns_initialization() {
        let corpus = tiny_corpus(0.3);
        let spec = tiny_spec(Arch::Cat, 1.0, 4);
        let out = train_loop(
            &RunSpec {
                train: TrainConfig {
                    epochs: 0,
                    ..spec.train.clone()
                },
                ..spec.clone()
            },
            &corpus,
        )
        .unwrap();
        let mut cfg = spec.model.clone();
        cfg.speakers = 8;
        let fresh = Model::new(cfg, 4).unwrap();
        for ((_, a), (_, b)) in out.best.store.iter().zip(fresh.store.iter()) {
            assert!(a.value.bit_eq(&b.value));
        }
        assert!(out.log.steps.is_empty());
    }

    #[test]
    fn training_is_deterministic() {
        let corpus = tiny_corpus(0.3);
        let a = train_loop(&tiny_spec(Arch::Cat, 1.0, 9), &corpus).unwrap();
        let b = train_loop(&tiny_spec(Arch::Cat, 1.0, 9), &corpus).unwrap();
        assert_eq!(a.log, b.log);
        assert!(!a.log.steps.is_empty());
        assert_eq!(a.log.evals.len(), 3);
        assert!(a.log.steps.iter().all(|s| s.lr <= 0.05 && s.lr >= 1e-4));
    }

    #[test]
    fn beta_zero_tracks_model_without_discriminator() {
        let corpus = tiny_corpus(0.3);
        let snapshots = |arch| {
            let mut snaps = Vec::new();
            train_loop_with(&tiny_spec(arch, 0.0, 5), &corpus, &mut |_, m, _| {
                snaps.push(
                    m.store
                        .iter()
                        .filter(|(n, _)| !n.starts_with("d2."))
                        .map(|(n, p)| (n.to_string(), p.value.clone()))
                        .collect::<Vec<_>>(),
                );
                Ok(())
            })
            .unwrap();
            snaps
        };
        let with = snapshots(Arch::Cat);
        let without = snapshots(Arch::CatNoD2);
        assert_eq!(with.len(), 3);
        for (a, b) in with.iter().zip(&without) {
            assert_eq!(a.len(), b.len());
            for ((n1, t1), (n2, t2)) in a.iter().zip(b) {
                assert_eq!(n1, n2);
                assert!(t1.bit_eq(t2), "{n1}");
            }
        }
    }

    #[test]
    fn separable_corpus_loss_drops_after_one_epoch() {
        let corpus = tiny_corpus(0.0);
        let mut wins = 0;
        for seed in 0..3 {
            let mut spec = tiny_spec(Arch::Cnn, 1.0, seed);
            spec.train.epochs = 1;
            let out = train_loop(&spec, &corpus).unwrap();
            let fixed =
                make_batches(&corpus.train, 4, 2, &mut ChaCha8Rng::seed_from_u64(99)).unwrap();
            let mut init_cfg = spec.model.clone();
            init_cfg.speakers = 8;
            let init = Model::new(init_cfg, seed).unwrap();
            let before: f64 = fixed
                .iter()
                .map(|b| probe_loss(&init, b, &spec.train, 0).unwrap())
                .sum();
            let after: f64 = fixed
                .iter()
                .map(|b| probe_loss(&out.last, b, &spec.train, 0).unwrap())
                .sum();
            if after < before {
                wins += 1;
            }
        }
        assert!(wins >= 2, "{wins}");
    }

    #[test]
    fn divergence_is_reported() {
        let corpus = tiny_corpus(0.3);
        let mut spec = tiny_spec(Arch::Cnn, 1.0, 1);
        spec.train.lr = 1e12;
        spec.train.lr_floor = 1e-4;
        match train_loop(&spec, &corpus) {
            Err(Error::Diverged { .. }) => {}
            Err(other) => panic!("unexpected error {other}"),
            Ok(out) => assert!(out.log.steps.iter().all(|s| s.total.is_finite())),
        }
    }

    #[test]
    fn checkpoint_round_trip() {
        let dir = tempfile::tempdir().unwrap();
        let corpus = tiny_corpus(0.3);
        let spec = tiny_spec(Arch::Cat, 0.5, 2);
        let out = train_loop(&spec, &corpus).unwrap();
        let path = dir.path().join("m.catc");
        save_checkpoint(&out.best, &spec.train, &path).unwrap();
        let (loaded, loaded_spec) = load_checkpoint(&path).unwrap();
        assert_eq!(loaded_spec.train, spec.train);
        assert_eq!(loaded_spec.model, out.best.config);
        for ((n1, a), (n2, b)) in out.best.store.iter().zip(loaded.store.iter()) {
            assert_eq!(n1, n2);
            assert!(a.value.bit_eq(&b.value));
        }
    }

    #[test]
    fn train_log_csv_round_trip() {
        let dir = tempfile::tempdir().unwrap();
        let corpus = tiny_corpus(0.3);
        let out = train_loop(&tiny_spec(Arch::Cat, 1.0, 3), &corpus).unwrap();
        let path = dir.path().join("log.csv");
        out.log.write_csv(&path).unwrap();
        let text = fs::read_to_string(&path).unwrap();
        assert!(text.starts_with("step,L_s,L_T,L_ch,total,lr\n"));
        assert_eq!(TrainLog::read_csv(&path).unwrap(), out.log.steps);
    }
}
