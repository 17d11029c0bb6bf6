//! Trains a small channel classifier on frozen embeddings of the baseline and
//! of CAT. Accuracy near 0.5 means the embeddings carry little channel
//! information.
//!
//!     cargo run --release --example channel_probe -- [epochs]

use cat_speaker::data::{synth_corpus, SynthCorpusConfig};
use cat_speaker::eval::{embedding_channel_probe, ProbeConfig};
use cat_speaker::model::{Arch, ModelConfig};
use cat_speaker::train::{train_loop, RunSpec, TrainConfig};

fn main() -> cat_speaker::Result<()> {
    let epochs = std::env::args()
        .nth(1)
        .map_or(12, |e| e.parse().expect("epochs is an integer"));
    let corpus = synth_corpus(&SynthCorpusConfig::default())?;
    for arch in [Arch::Cnn, Arch::Cat] {
        let mut model = ModelConfig::desk();
        model.arch = arch;
        let mut train = TrainConfig::desk();
        train.epochs = epochs;
        let out = train_loop(&RunSpec { model, train }, &corpus)?;
        let acc = embedding_channel_probe(&out.best, &corpus, &ProbeConfig::default())?;
        println!("{:<4} channel probe accuracy {acc:.3}", out.summary.arch);
    }
    Ok(())
}
