//! Trains the baseline and CAT briefly, then reports cross-channel EER and
//! TopN recall for both.
//!
//!     cargo run --release --example evaluate -- [epochs]

use cat_speaker::data::{synth_corpus, SynthCorpusConfig};
use cat_speaker::eval::{evaluate, DEFAULT_TOPN};
use cat_speaker::model::{Arch, ModelConfig};
use cat_speaker::train::{train_loop, RunSpec, TrainConfig};

fn main() -> cat_speaker::Result<()> {
    let epochs = std::env::args()
        .nth(1)
        .map_or(6, |e| e.parse().expect("epochs is an integer"));
    let corpus = synth_corpus(&SynthCorpusConfig::default())?;
    println!(
        "{:<10} {:>8} {:>8} {:>7} {:>7} {:>7}",
        "system", "dev EER", "test EER", "Top1", "Top5", "Top10"
    );
    for arch in [Arch::Cnn, Arch::Cat] {
        let mut model = ModelConfig::desk();
        model.arch = arch;
        let mut train = TrainConfig::desk();
        train.epochs = epochs;
        let out = train_loop(&RunSpec { model, train }, &corpus)?;
        let m = evaluate(&out.best, &corpus, &DEFAULT_TOPN)?;
        let top = |n| m.top(n).unwrap_or(f64::NAN);
        println!(
            "{:<10} {:>8.3} {:>8.3} {:>7.3} {:>7.3} {:>7.3}",
            out.summary.arch,
            m.dev_eer,
            m.test_eer,
            top(1),
            top(5),
            top(10)
        );
    }
    Ok(())
}
