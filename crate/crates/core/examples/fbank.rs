//! Writes a one-second chirp as WAV, parses it back and prints its log mel
//! filter-bank shape and the band with the most energy over time.
//!
//!     cargo run --release --example fbank

use cat_speaker::data::{encode_wav, fbank, parse_wav, FbankConfig};

fn main() -> Result<(), Box<dyn std::error::Error>> {
    let rate = 16_000u32;
    let samples: Vec<f64> = (0..rate as usize)
        .map(|n| {
            let t = n as f64 / rate as f64;
            // 200 Hz sweeping up to 4 kHz
            0.5 * (2.0 * std::f64::consts::PI * (200.0 * t + 1900.0 * t * t)).sin()
        })
        .collect();
    let bytes = encode_wav(&samples, rate);
    let wav = parse_wav(&bytes)?;
    let feats = fbank(&wav.samples, wav.sample_rate, &FbankConfig::default())?;
    let (frames, bins) = (feats.shape()[0], feats.shape()[1]);
    println!(
        "{} samples at {} Hz -> {frames} frames x {bins} mel bins",
        wav.samples.len(),
        wav.sample_rate
    );
    for t in (0..frames).step_by(16) {
        let row = feats.row(t);
        let peak = (0..bins)
            .max_by(|&a, &b| row[a].total_cmp(&row[b]))
            .unwrap();
        println!("frame {t:3}: loudest band {peak:2} ({:.2})", row[peak]);
    }
    Ok(())
}
