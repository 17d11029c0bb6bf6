//! Generates the desk-scale two-channel corpus, saves it and prints what the
//! channel transforms do to one speaker.
//!
//!     cargo run --release --example synth_corpus -- [out_dir]

use cat_speaker::data::{channel_transforms, save_corpus, synth_corpus, SynthCorpusConfig};

fn mean_row(t: &cat_speaker::Tensor) -> Vec<f64> {
    let (frames, dim) = (t.shape()[0], t.shape()[1]);
    (0..dim)
        .map(|j| (0..frames).map(|i| t.row(i)[j]).sum::<f64>() / frames as f64)
        .collect()
}

fn main() -> cat_speaker::Result<()> {
    let cfg = SynthCorpusConfig::default();
    let corpus = synth_corpus(&cfg)?;
    println!(
        "train {} utterances ({} speakers), dev {}, test {}",
        corpus.train.len(),
        corpus.train_speaker_count(),
        corpus.dev.len(),
        corpus.test.len()
    );
    let [a, b] = channel_transforms(&cfg);
    let fmt = |v: &[f64]| {
        v.iter()
            .take(6)
            .map(|x| format!("{x:5.2}"))
            .collect::<Vec<_>>()
            .join(" ")
    };
    println!("channel A gain   {}", fmt(&a.gain));
    println!("channel B gain   {}", fmt(&b.gain));
    println!("channel A offset {}", fmt(&a.offset));
    println!("channel B offset {}", fmt(&b.offset));

    let spk = corpus.dev[0].speaker_id;
    for ch in [0u8, 1] {
        let u = corpus
            .dev
            .iter()
            .find(|u| u.speaker_id == spk && u.channel_id == ch)
            .unwrap();
        println!(
            "speaker {spk} channel {ch} mean features {}",
            fmt(&mean_row(&u.features))
        );
    }
    if let Some(dir) = std::env::args().nth(1) {
        save_corpus(std::path::Path::new(&dir), &corpus)?;
        println!("saved to {dir}");
    }
    Ok(())
}
