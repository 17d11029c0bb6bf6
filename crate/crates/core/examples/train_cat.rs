//! Trains the CAT model on the desk corpus and prints the dev EER after each
//! evaluation.
//!
//!     cargo run --release --example train_cat -- [epochs] [beta]

use cat_speaker::data::{synth_corpus, SynthCorpusConfig};
use cat_speaker::model::{Arch, ModelConfig};
use cat_speaker::train::{train_loop, RunSpec, TrainConfig};

fn main() -> cat_speaker::Result<()> {
    let mut args = std::env::args().skip(1);
    let mut train = TrainConfig::desk();
    if let Some(e) = args.next() {
        train.epochs = e.parse().expect("epochs is an integer");
    }
    if let Some(b) = args.next() {
        train.beta = b.parse().expect("beta is a number");
    }
    let mut model = ModelConfig::desk();
    model.arch = Arch::Cat;
    let corpus = synth_corpus(&SynthCorpusConfig::default())?;
    let out = train_loop(&RunSpec { model, train }, &corpus)?;
    for e in &out.log.evals {
        println!(
            "epoch {:2} step {:4}: dev EER {:.3}, lr {:.3} -> {:.3}{}",
            e.epoch,
            e.step,
            e.dev_eer,
            e.lr_before,
            e.lr_after,
            if e.improved { " *" } else { "" }
        );
    }
    if let Some(last) = out.log.steps.last() {
        println!(
            "last step: L_s {:.3} L_T {:.3} L_ch {:.3}",
            last.l_s, last.l_t, last.l_ch
        );
    }
    println!(
        "{}",
        serde_json::to_string_pretty(&out.summary).expect("summary serializes")
    );
    Ok(())
}
