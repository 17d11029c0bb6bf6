//! Sweeps the adversarial weight β over a grid and prints per-β medians.
//!
//!     cargo run --release --example beta_sweep -- [epochs] [seeds]

use cat_speaker::data::{synth_corpus, SynthCorpusConfig};
use cat_speaker::eval::{beta_sweep, sweep_medians, DEFAULT_BETAS};
use cat_speaker::model::ModelConfig;
use cat_speaker::train::{RunSpec, TrainConfig};

fn main() -> cat_speaker::Result<()> {
    let mut args = std::env::args().skip(1);
    let epochs = args
        .next()
        .map_or(6, |e| e.parse().expect("epochs is an integer"));
    let seeds: Vec<u64> = (0..args
        .next()
        .map_or(1, |s| s.parse().expect("seed count is an integer")))
        .collect();
    let corpus = synth_corpus(&SynthCorpusConfig::default())?;
    let mut train = TrainConfig::desk();
    train.epochs = epochs;
    let spec = RunSpec {
        model: ModelConfig::desk(),
        train,
    };
    let cells = beta_sweep(&spec, &corpus, &DEFAULT_BETAS, &seeds, |c| {
        match (&c.error, c.dev_eer, c.test_top1) {
            (Some(e), _, _) => eprintln!("beta {} seed {}: failed: {e}", c.beta, c.seed),
            (None, Some(eer), Some(top1)) => eprintln!(
                "beta {} seed {}: dev EER {eer:.3}, Top1 {top1:.3}",
                c.beta, c.seed
            ),
            _ => {}
        }
    })?;
    println!("{:>5} {:>8} {:>6}", "beta", "dev EER", "Top1");
    for m in sweep_medians(&cells) {
        let f = |v: Option<f64>| v.map_or("-".to_string(), |x| format!("{x:.3}"));
        println!("{:>5} {:>8} {:>6}", m.beta, f(m.dev_eer), f(m.test_top1));
    }
    Ok(())
}
