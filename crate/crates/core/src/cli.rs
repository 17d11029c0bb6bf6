//! The `cat-speaker` command line: `synth`, `fbank`, `train`, `eval` and
//! `sweep-beta`.
//!
//! Every subcommand takes `--config FILE` and trailing `--section.key value`
//! overrides. The exit code is 0 only if every item succeeded.

use std::ffi::OsString;
use std::fs;
use std::io::Write;
use std::path::{Path, PathBuf};

use clap::{Args, Parser, Subcommand};
use rayon::prelude::*;
use serde::Serialize;

use crate::config::{RunConfig, SEED_ENV};
use crate::data::{
    encode_features, fbank, load_corpus, parse_wav, save_corpus, synth_corpus, Corpus,
};
use crate::error::{Error, Result};
use crate::eval::{beta_sweep, build_trials, sweep_medians, write_median_csv, write_sweep_csv};
use crate::train::{csv_err, load_checkpoint, save_checkpoint, train_loop};

#[derive(Parser, Debug)]
#[command(
    name = "cat-speaker",
    version,
    about = "Channel-adversarial speaker embeddings"
)]
pub struct Cli {
    /// Worker threads for scoring and feature extraction (training stays serial).
    #[arg(long, global = true, default_value_t = 1)]
    pub threads: usize,
    #[command(subcommand)]
    pub command: Command,
}

#[derive(Args, Debug, Clone, Default)]
pub struct Common {
    /// TOML config file; missing keys take the desk defaults.
    #[arg(long)]
    pub config: Option<PathBuf>,
    /// `--section.key value` pairs applied last.
    #[arg(
        trailing_var_arg = true,
        allow_hyphen_values = true,
        value_name = "OVERRIDES"
    )]
    pub overrides: Vec<String>,
}

#[derive(Subcommand, Debug)]
pub enum Command {
    /// Generate the synthetic two-channel corpus.
    Synth {
        #[arg(long)]
        out: PathBuf,
        #[command(flatten)]
        common: Common,
    },
    /// Compute log mel filter banks for a WAV file or a directory of them.
    Fbank {
        input: PathBuf,
        #[arg(long)]
        out: PathBuf,
        #[command(flatten)]
        common: Common,
    },
    /// Train cnn, cat or cat_no_d2 on a saved corpus.
    Train {
        #[arg(long)]
        corpus: PathBuf,
        #[arg(long)]
        out: PathBuf,
        #[arg(long)]
        arch: Option<String>,
        #[arg(long)]
        beta: Option<f64>,
        #[arg(long)]
        epochs: Option<usize>,
        #[arg(long)]
        seed: Option<u64>,
        #[command(flatten)]
        common: Common,
    },
    /// Score a checkpoint on the dev and test partitions.
    Eval {
        #[arg(long)]
        checkpoint: PathBuf,
        #[arg(long)]
        corpus: PathBuf,
        /// Directory for metrics.csv and scores.csv.
        #[arg(long)]
        out: Option<PathBuf>,
        /// Comma-separated subset of `eer,topn`.
        #[arg(long, default_value = "eer,topn", value_delimiter = ',')]
        metrics: Vec<String>,
        /// Comma-separated N list (default from the config: 1,5,10).
        #[arg(long, value_delimiter = ',')]
        topn: Option<Vec<usize>>,
        #[command(flatten)]
        common: Common,
    },
    /// Train CAT over a β grid and several seeds.
    SweepBeta {
        #[arg(long)]
        corpus: PathBuf,
        #[arg(long)]
        out: PathBuf,
        #[arg(long, value_delimiter = ',')]
        betas: Option<Vec<f64>>,
        #[arg(long, value_delimiter = ',')]
        seeds: Option<Vec<u64>>,
        #[command(flatten)]
        common: Common,
    },
}

/// Splits `--section.key value` (or `--section.key=value`) pairs.
pub fn parse_overrides(raw: &[String]) -> Result<Vec<(String, String)>> {
    let mut out = Vec::new();
    let mut it = raw.iter();
    while let Some(arg) = it.next() {
        let key = arg.strip_prefix("--").ok_or_else(|| {
            Error::Config(format!(
                "unexpected argument `{arg}`; overrides look like --section.key value"
            ))
        })?;
        match key.split_once('=') {
            Some((k, v)) => out.push((k.to_string(), v.to_string())),
            None => {
                let v = it
                    .next()
                    .ok_or_else(|| Error::Config(format!("override `{arg}` is missing a value")))?;
                out.push((key.to_string(), v.clone()));
            }
        }
    }
    Ok(out)
}

fn resolve(common: &Common, extra: &[(String, String)]) -> Result<RunConfig> {
    let env_seed = std::env::var(SEED_ENV).ok();
    let mut pairs = parse_overrides(&common.overrides)?;
    pairs.extend(extra.iter().cloned());
    RunConfig::resolve(
        common.config.as_deref(),
        env_seed.as_deref(),
        pairs.iter().map(|(k, v)| (k.as_str(), v.as_str())),
    )
}

fn create_dir(dir: &Path) -> Result<()> {
    fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))
}

fn write_text(path: &Path, text: &str) -> Result<()> {
    fs::write(path, text).map_err(|e| Error::io(path, e))
}

/// Outcome of a command: printed lines and the number of failed items.
#[derive(Debug, Default)]
pub struct Report {
    pub lines: Vec<String>,
    pub failures: usize,
}

impl Report {
    fn say(&mut self, line: impl Into<String>) {
        self.lines.push(line.into());
    }

    fn fail(&mut self, line: impl Into<String>) {
        self.failures += 1;
        self.lines.push(line.into());
    }
}

pub fn cmd_synth(out: &Path, cfg: &RunConfig) -> Result<Report> {
    let corpus = synth_corpus(&cfg.corpus)?;
    create_dir(out)?;
    save_corpus(out, &corpus)?;
    write_text(&out.join("config.toml"), &cfg.to_toml())?;
    let mut r = Report::default();
    r.say(format!(
        "wrote {} train / {} dev / {} test utterances to {}",
        corpus.train.len(),
        corpus.dev.len(),
        corpus.test.len(),
        out.display()
    ));
    Ok(r)
}

fn fbank_inputs(input: &Path) -> Result<Vec<PathBuf>> {
    if input.is_dir() {
        let mut files = Vec::new();
        for entry in fs::read_dir(input).map_err(|e| Error::io(input, e))? {
            let path = entry.map_err(|e| Error::io(input, e))?.path();
            if path.is_file() {
                files.push(path);
            }
        }
        files.sort();
        Ok(files)
    } else {
        Ok(vec![input.to_path_buf()])
    }
}

pub fn cmd_fbank(input: &Path, out: &Path, cfg: &RunConfig) -> Result<Report> {
    let files = fbank_inputs(input)?;
    let mut r = Report::default();
    create_dir(out)?;
    if files.is_empty() {
        r.say(format!("warning: no input files in {}", input.display()));
        return Ok(r);
    }
    let results: Vec<(PathBuf, Result<(PathBuf, usize)>)> = files
        .par_iter()
        .map(|path| {
            let run = || -> Result<(PathBuf, usize)> {
                let bytes = fs::read(path).map_err(|e| Error::io(path, e))?;
                let wav = parse_wav(&bytes)?;
                let feats = fbank(&wav.samples, wav.sample_rate, &cfg.fbank)?;
                let stem = path.file_stem().unwrap_or_default().to_string_lossy();
                let dst = out.join(format!("{stem}.catf"));
                fs::write(&dst, encode_features(&feats)?).map_err(|e| Error::io(&dst, e))?;
                Ok((dst, feats.shape()[0]))
            };
            (path.clone(), run())
        })
        .collect();
    for (src, res) in results {
        match res {
            Ok((dst, frames)) => r.say(format!(
                "{} -> {} ({frames} frames)",
                src.display(),
                dst.display()
            )),
            Err(e) => r.fail(format!("error: {}: {e}", src.display())),
        }
    }
    if r.failures > 0 {
        r.say(format!("{} of {} files failed", r.failures, files.len()));
    }
    Ok(r)
}

pub fn cmd_train(corpus_dir: &Path, out: &Path, cfg: &RunConfig) -> Result<Report> {
    let corpus = load_corpus(corpus_dir)?;
    check_dim(&corpus, cfg.model.dim)?;
    let spec = cfg.run_spec();
    let outcome = train_loop(&spec, &corpus)?;
    create_dir(out)?;
    save_checkpoint(&outcome.best, &spec.train, &out.join("checkpoint.catc"))?;
    save_checkpoint(&outcome.last, &spec.train, &out.join("last.catc"))?;
    outcome.log.write_csv(&out.join("train_log.csv"))?;
    let evals = out.join("evals.csv");
    let mut w = csv::Writer::from_path(&evals).map_err(|e| csv_err(&evals, e))?;
    for e in &outcome.log.evals {
        w.serialize(e).map_err(|err| csv_err(&evals, err))?;
    }
    w.flush().map_err(|e| Error::io(&evals, e))?;
    let summary = serde_json::to_string_pretty(&outcome.summary).expect("summary serializes");
    write_text(&out.join("summary.json"), &(summary + "\n"))?;
    write_text(&out.join("config.toml"), &cfg.to_toml())?;
    let mut r = Report::default();
    r.say(format!(
        "{} seed {}: {} steps, best dev EER {}, checkpoint {}",
        outcome.summary.arch,
        outcome.summary.seed,
        outcome.summary.steps,
        outcome
            .summary
            .best_dev_eer
            .map_or("n/a".into(), |e| format!("{e:.4}")),
        out.join("checkpoint.catc").display()
    ));
    Ok(r)
}

fn check_dim(corpus: &Corpus, dim: usize) -> Result<()> {
    match corpus.dim() {
        Some(d) if d != dim => Err(Error::Corpus(format!(
            "corpus feature dimension {d} does not match the model's {dim}"
        ))),
        _ => Ok(()),
    }
}

#[derive(Serialize)]
struct MetricRow<'a> {
    metric: String,
    partition: &'a str,
    value: f64,
}

pub fn cmd_eval(
    checkpoint: &Path,
    corpus_dir: &Path,
    out: Option<&Path>,
    metrics: &[String],
    topn: &[usize],
    cfg: &RunConfig,
) -> Result<Report> {
    let (want_eer, want_topn) = (
        metrics.iter().any(|m| m == "eer"),
        metrics.iter().any(|m| m == "topn"),
    );
    if let Some(bad) = metrics.iter().find(|m| *m != "eer" && *m != "topn") {
        return Err(Error::Config(format!(
            "unknown metric `{bad}` (expected eer or topn)"
        )));
    }
    let (model, _) = load_checkpoint(checkpoint)?;
    let corpus = Corpus {
        train: Vec::new(),
        dev: crate::data::load_partition(corpus_dir, "dev")?,
        test: crate::data::load_partition(corpus_dir, "test")?,
    };
    check_dim(&corpus, model.config.dim)?;
    let window = cfg.window(model.config.frames);
    let mut rows = Vec::new();
    let mut test_trials = None;
    for (name, part) in [("dev", &corpus.dev), ("test", &corpus.test)] {
        let trials = build_trials(part, &model, window)?;
        if want_eer {
            rows.push(MetricRow {
                metric: "eer".into(),
                partition: name,
                value: trials.eer()?,
            });
        }
        if want_topn {
            for &n in topn {
                rows.push(MetricRow {
                    metric: format!("top{n}"),
                    partition: name,
                    value: trials.topn(n.min(trials.speakers.len()))?,
                });
            }
        }
        if name == "test" {
            test_trials = Some(trials);
        }
    }
    let mut r = Report::default();
    for row in &rows {
        r.say(format!("{} {} {:.6}", row.partition, row.metric, row.value));
    }
    if let Some(dir) = out {
        create_dir(dir)?;
        let path = dir.join("metrics.csv");
        let mut w = csv::Writer::from_path(&path).map_err(|e| csv_err(&path, e))?;
        for row in &rows {
            w.serialize(row).map_err(|e| csv_err(&path, e))?;
        }
        w.flush().map_err(|e| Error::io(&path, e))?;
        test_trials
            .expect("test partition scored")
            .write_scores_csv(&dir.join("scores.csv"))?;
    }
    Ok(r)
}

pub fn cmd_sweep(corpus_dir: &Path, out: &Path, cfg: &RunConfig) -> Result<Report> {
    let corpus = load_corpus(corpus_dir)?;
    check_dim(&corpus, cfg.model.dim)?;
    let mut r = Report::default();
    let cells = beta_sweep(
        &cfg.run_spec(),
        &corpus,
        &cfg.eval.betas,
        &cfg.eval.seeds,
        |c| match &c.error {
            None => eprintln!(
                "beta {} seed {}: dev EER {:.4} top1 {:.4}",
                c.beta,
                c.seed,
                c.dev_eer.unwrap_or(f64::NAN),
                c.test_top1.unwrap_or(f64::NAN)
            ),
            Some(e) => eprintln!("beta {} seed {} failed: {e}", c.beta, c.seed),
        },
    )?;
    create_dir(out)?;
    write_sweep_csv(&out.join("sweep_cells.csv"), &cells)?;
    let medians = sweep_medians(&cells);
    write_median_csv(&out.join("sweep_median.csv"), &medians)?;
    for c in cells.iter().filter(|c| c.error.is_some()) {
        r.fail(format!(
            "error: beta {} seed {}: {}",
            c.beta,
            c.seed,
            c.error.as_deref().unwrap_or("")
        ));
    }
    for m in &medians {
        r.say(format!(
            "beta {}: median dev EER {} top1 {} over {} cells",
            m.beta,
            m.dev_eer.map_or("n/a".into(), |v| format!("{v:.4}")),
            m.test_top1.map_or("n/a".into(), |v| format!("{v:.4}")),
            m.cells
        ));
    }
    Ok(r)
}

fn dispatch(command: Command) -> Result<Report> {
    match command {
        Command::Synth { out, common } => cmd_synth(&out, &resolve(&common, &[])?),
        Command::Fbank { input, out, common } => cmd_fbank(&input, &out, &resolve(&common, &[])?),
        Command::Train {
            corpus,
            out,
            arch,
            beta,
            epochs,
            seed,
            common,
        } => {
            let mut extra = Vec::new();
            if let Some(a) = arch {
                extra.push(("model.arch".to_string(), a));
            }
            if let Some(b) = beta {
                extra.push(("train.beta".to_string(), b.to_string()));
            }
            if let Some(e) = epochs {
                extra.push(("train.epochs".to_string(), e.to_string()));
            }
            if let Some(s) = seed {
                extra.push(("train.seed".to_string(), s.to_string()));
            }
            cmd_train(&corpus, &out, &resolve(&common, &extra)?)
        }
        Command::Eval {
            checkpoint,
            corpus,
            out,
            metrics,
            topn,
            common,
        } => {
            let cfg = resolve(&common, &[])?;
            let topn = topn.unwrap_or_else(|| cfg.eval.topn.clone());
            cmd_eval(&checkpoint, &corpus, out.as_deref(), &metrics, &topn, &cfg)
        }
        Command::SweepBeta {
            corpus,
            out,
            betas,
            seeds,
            common,
        } => {
            let list = |v: Vec<String>| format!("[{}]", v.join(", "));
            let mut extra = Vec::new();
            if let Some(b) = betas {
                extra.push((
                    "eval.betas".to_string(),
                    list(b.iter().map(|x| format!("{x:?}")).collect()),
                ));
            }
            if let Some(s) = seeds {
                extra.push((
                    "eval.seeds".to_string(),
                    list(s.iter().map(u64::to_string).collect()),
                ));
            }
            cmd_sweep(&corpus, &out, &resolve(&common, &extra)?)
        }
    }
}

/// Parses `args`, runs the command and returns the process exit code.
pub fn run<I, T>(args: I, stdout: &mut dyn Write, stderr: &mut dyn Write) -> i32
where
    I: IntoIterator<Item = T>,
    T: Into<OsString> + Clone,
{
    let cli = match Cli::try_parse_from(args) {
        Ok(c) => c,
        Err(e) => {
            let _ = write!(stderr, "{e}");
            return if e.use_stderr() { 2 } else { 0 };
        }
    };
    let pool = match rayon::ThreadPoolBuilder::new()
        .num_threads(cli.threads.max(1))
        .build()
    {
        Ok(p) => p,
        Err(e) => {
            let _ = writeln!(stderr, "error: thread pool: {e}");
            return 1;
        }
    };
    match pool.install(|| dispatch(cli.command)) {
        Ok(report) => {
            for line in &report.lines {
                let _ = writeln!(stdout, "{line}");
            }
            i32::from(report.failures > 0)
        }
        Err(e) => {
            let _ = writeln!(stderr, "error: {e}");
            1
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn strings(v: &[&str]) -> Vec<String> {
        v.iter().map(|s| s.to_string()).collect()
    }

    #[test]
    fn overrides_pair_up() {
        let got = parse_overrides(&strings(&["--train.lr", "0.1", "--model.arch=cnn"])).unwrap();
        assert_eq!(
            got,
            vec![
                ("train.lr".into(), "0.1".into()),
                ("model.arch".into(), "cnn".into())
            ]
        );
        assert!(parse_overrides(&strings(&["--train.lr"])).is_err());
        assert!(parse_overrides(&strings(&["train.lr", "1"])).is_err());
    }

    #[test]
    fn clap_collects_trailing_overrides() {
        let cli = Cli::try_parse_from([
            "cat-speaker",
            "train",
            "--corpus",
            "c",
            "--out",
            "o",
            "--arch",
            "cnn",
            "--train.lr",
            "0.05",
        ])
        .unwrap();
        match cli.command {
            Command::Train { arch, common, .. } => {
                assert_eq!(arch.as_deref(), Some("cnn"));
                assert_eq!(common.overrides, strings(&["--train.lr", "0.05"]));
            }
            other => panic!("{other:?}"),
        }
    }

    #[test]
    fn unknown_subcommand_is_a_usage_error() {
        let (mut out, mut err) = (Vec::new(), Vec::new());
        assert_eq!(run(["cat-speaker", "nope"], &mut out, &mut err), 2);
    }

    #[test]
    fn empty_fbank_directory_warns_and_succeeds() {
        let dir = tempfile::tempdir().unwrap();
        let input = dir.path().join("in");
        fs::create_dir(&input).unwrap();
        let r = cmd_fbank(&input, &dir.path().join("out"), &RunConfig::default()).unwrap();
        assert_eq!(r.failures, 0);
        assert!(r.lines[0].contains("warning"));
    }
}
