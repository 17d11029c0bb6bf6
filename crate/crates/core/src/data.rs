//! Corpus handling: WAV parsing, log mel filter banks, the synthetic
//! two-channel corpus, batch assembly and the on-disk formats
//! (`CATF` feature files and JSON-lines manifests).

use std::f64::consts::PI;
use std::fs;
use std::io::{BufRead, BufReader, BufWriter, Write};
use std::path::{Path, PathBuf};

use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;
use rustfft::num_complex::Complex;
use rustfft::FftPlanner;
use serde::{Deserialize, Serialize};

use crate::autodiff::Tensor;
use crate::error::{Error, FormatError, Result, WavError};

/// One utterance: a `[T, F]` matrix of log filter-bank energies plus labels.
#[derive(Clone, Debug, PartialEq)]
pub struct UtteranceFeatures {
    pub utterance_id: String,
    pub speaker_id: usize,
    /// 0 for channel A, 1 for channel B.
    pub channel_id: u8,
    pub features: Tensor,
}

impl UtteranceFeatures {
    pub fn new(
        utterance_id: impl Into<String>,
        speaker_id: usize,
        channel_id: u8,
        features: Tensor,
    ) -> Result<Self> {
        if features.rank() != 2 {
            return Err(Error::Corpus(format!(
                "features must be [T, F], got {:?}",
                features.shape()
            )));
        }
        if channel_id > 1 {
            return Err(Error::Corpus(format!(
                "channel id {channel_id} is not 0 or 1"
            )));
        }
        if !features.all_finite() {
            return Err(Error::NonFinite("utterance features".into()));
        }
        Ok(UtteranceFeatures {
            utterance_id: utterance_id.into(),
            speaker_id,
            channel_id,
            features,
        })
    }

    pub fn frames(&self) -> usize {
        self.features.shape()[0]
    }

    pub fn dim(&self) -> usize {
        self.features.shape()[1]
    }
}

// ---------------------------------------------------------------- WAV

/// Decoded mono PCM audio.
#[derive(Clone, Debug, PartialEq)]
pub struct Wav {
    pub samples: Vec<f64>,
    pub sample_rate: u32,
}

fn le_u16(b: &[u8], at: usize) -> u16 {
    u16::from_le_bytes([b[at], b[at + 1]])
}

fn le_u32(b: &[u8], at: usize) -> u32 {
    u32::from_le_bytes([b[at], b[at + 1], b[at + 2], b[at + 3]])
}

/// Parses a RIFF/WAVE file holding 16-bit mono PCM.
pub fn parse_wav(bytes: &[u8]) -> Result<Wav, WavError> {
    if bytes.len() < 12 {
        return Err(if bytes.len() >= 4 && &bytes[..4] != b"RIFF" {
            WavError::BadMagic
        } else {
            WavError::Truncated("RIFF header")
        });
    }
    if &bytes[..4] != b"RIFF" || &bytes[8..12] != b"WAVE" {
        return Err(WavError::BadMagic);
    }
    let mut at = 12;
    let mut rate = None;
    while at + 8 <= bytes.len() {
        let id = &bytes[at..at + 4];
        let size = le_u32(bytes, at + 4) as usize;
        let body = at + 8;
        if id == b"fmt " {
            if size < 16 || body + 16 > bytes.len() {
                return Err(WavError::Truncated("fmt chunk"));
            }
            let tag = le_u16(bytes, body);
            let channels = le_u16(bytes, body + 2);
            let bits = le_u16(bytes, body + 14);
            if tag != 1 {
                return Err(WavError::NotPcm(tag));
            }
            if channels != 1 {
                return Err(WavError::MultiChannel(channels));
            }
            if bits != 16 {
                return Err(WavError::BitDepth(bits));
            }
            rate = Some(le_u32(bytes, body + 4));
        } else if id == b"data" {
            let sample_rate = rate.ok_or(WavError::MissingFormat)?;
            if body + size > bytes.len() || !size.is_multiple_of(2) {
                return Err(WavError::Truncated("data chunk"));
            }
            let samples = bytes[body..body + size]
                .chunks_exact(2)
                .map(|c| f64::from(i16::from_le_bytes([c[0], c[1]])) / 32768.0)
                .collect();
            return Ok(Wav {
                samples,
                sample_rate,
            });
        }
        at = body + size + (size & 1);
    }
    Err(if rate.is_some() {
        WavError::MissingData
    } else {
        WavError::MissingFormat
    })
}

/// Encodes samples in `[-1, 1]` as a 16-bit mono PCM WAV file.
pub fn encode_wav(samples: &[f64], sample_rate: u32) -> Vec<u8> {
    let data_len = (samples.len() * 2) as u32;
    let mut out = Vec::with_capacity(44 + samples.len() * 2);
    out.extend_from_slice(b"RIFF");
    out.extend_from_slice(&(36 + data_len).to_le_bytes());
    out.extend_from_slice(b"WAVEfmt ");
    out.extend_from_slice(&16u32.to_le_bytes());
    out.extend_from_slice(&1u16.to_le_bytes());
    out.extend_from_slice(&1u16.to_le_bytes());
    out.extend_from_slice(&sample_rate.to_le_bytes());
    out.extend_from_slice(&(sample_rate * 2).to_le_bytes());
    out.extend_from_slice(&2u16.to_le_bytes());
    out.extend_from_slice(&16u16.to_le_bytes());
    out.extend_from_slice(b"data");
    out.extend_from_slice(&data_len.to_le_bytes());
    for &s in samples {
        let q = (s * 32768.0).round().clamp(-32768.0, 32767.0) as i16;
        out.extend_from_slice(&q.to_le_bytes());
    }
    out
}

// ---------------------------------------------------------------- fbank

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct FbankConfig {
    pub frame_len_ms: f64,
    pub frame_shift_ms: f64,
    pub mel_bins: usize,
    pub preemphasis: f64,
    pub floor: f64,
}

impl Default for FbankConfig {
    fn default() -> Self {
        FbankConfig {
            frame_len_ms: 25.0,
            frame_shift_ms: 10.0,
            mel_bins: 64,
            preemphasis: 0.97,
            floor: 1e-10,
        }
    }
}

pub fn hz_to_mel(hz: f64) -> f64 {
    2595.0 * (1.0 + hz / 700.0).log10()
}

pub fn mel_to_hz(mel: f64) -> f64 {
    700.0 * (10f64.powf(mel / 2595.0) - 1.0)
}

/// Triangular mel filters over the `fft_size / 2 + 1` power-spectrum bins,
/// spanning 0 Hz to Nyquist. Returns the weights (row per filter) and the
/// filter centre frequencies.
pub fn mel_filterbank(
    mel_bins: usize,
    fft_size: usize,
    sample_rate: u32,
) -> (Vec<Vec<f64>>, Vec<f64>) {
    let nyquist = f64::from(sample_rate) / 2.0;
    let top = hz_to_mel(nyquist);
    let edges: Vec<f64> = (0..mel_bins + 2)
        .map(|i| top * i as f64 / (mel_bins + 1) as f64)
        .collect();
    let bins = fft_size / 2 + 1;
    let weights = (0..mel_bins)
        .map(|m| {
            let (lo, mid, hi) = (edges[m], edges[m + 1], edges[m + 2]);
            (0..bins)
                .map(|k| {
                    let mel = hz_to_mel(k as f64 * f64::from(sample_rate) / fft_size as f64);
                    if mel <= lo || mel >= hi {
                        0.0
                    } else if mel <= mid {
                        (mel - lo) / (mid - lo)
                    } else {
                        (hi - mel) / (hi - mid)
                    }
                })
                .collect()
        })
        .collect();
    let centres = (0..mel_bins).map(|m| mel_to_hz(edges[m + 1])).collect();
    (weights, centres)
}

/// Frame geometry `(frame_len, frame_shift, fft_size)` in samples.
pub fn frame_geometry(sample_rate: u32, config: &FbankConfig) -> Result<(usize, usize, usize)> {
    let len = (f64::from(sample_rate) * config.frame_len_ms / 1000.0).round() as usize;
    let shift = (f64::from(sample_rate) * config.frame_shift_ms / 1000.0).round() as usize;
    if len < 2 || shift == 0 || config.mel_bins == 0 || !(config.floor > 0.0) {
        return Err(Error::invalid(
            "fbank",
            format!("unusable configuration {config:?} at {sample_rate} Hz"),
        ));
    }
    Ok((len, shift, len.next_power_of_two()))
}

/// Log mel filter-bank energies, `[T, mel_bins]`.
pub fn fbank(samples: &[f64], sample_rate: u32, config: &FbankConfig) -> Result<Tensor> {
    let (len, shift, nfft) = frame_geometry(sample_rate, config)?;
    if samples.len() < len {
        return Err(Error::invalid(
            "fbank",
            format!(
                "{} samples is shorter than one {len}-sample frame",
                samples.len()
            ),
        ));
    }
    let frames = 1 + (samples.len() - len) / shift;
    let (filters, _) = mel_filterbank(config.mel_bins, nfft, sample_rate);
    let window: Vec<f64> = (0..len)
        .map(|n| 0.54 - 0.46 * (2.0 * PI * n as f64 / (len - 1) as f64).cos())
        .collect();
    let fft = FftPlanner::new().plan_fft_forward(nfft);
    let mut buf = vec![Complex::new(0.0, 0.0); nfft];
    let mut power = vec![0.0; nfft / 2 + 1];
    let mut out = Vec::with_capacity(frames * config.mel_bins);
    for t in 0..frames {
        let frame = &samples[t * shift..t * shift + len];
        for (n, slot) in buf.iter_mut().enumerate() {
            let v = if n >= len {
                0.0
            } else {
                let prev = if n == 0 { frame[0] } else { frame[n - 1] };
                (frame[n] - config.preemphasis * prev) * window[n]
            };
            *slot = Complex::new(v, 0.0);
        }
        fft.process(&mut buf);
        for (p, c) in power.iter_mut().zip(&buf) {
            *p = c.norm_sqr();
        }
        for f in &filters {
            let e: f64 = f.iter().zip(&power).map(|(w, p)| w * p).sum();
            out.push(e.max(config.floor).ln());
        }
    }
    Tensor::new(vec![frames, config.mel_bins], out)
}

// ---------------------------------------------------------------- synthetic corpus

/// Parameters of the synthetic two-channel corpus.
///
/// Frames are `g_c ⊙ (t_s + w) + o_c + σ·ε` where `t_s` is a Gaussian speaker
/// template, `w` a per-utterance AR(1) wander, and `(g_c, o_c)` a diagonal
/// affine transform fixed per channel.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct SynthCorpusConfig {
    pub train_speakers: usize,
    pub eval_speakers: usize,
    pub utterances_per_channel: usize,
    pub frames: usize,
    pub dim: usize,
    pub template_scale: f64,
    pub wander: f64,
    pub wander_rho: f64,
    pub noise_sigma: f64,
    /// Max/min ratio of the per-bin channel gains.
    pub gain_spread: f64,
    pub offset_scale: f64,
    /// Training speakers are recorded on one channel only (alternating A/B),
    /// with twice the utterances there.
    pub split_train_channels: bool,
    pub identity_channels: bool,
    pub channel_seed: u64,
    pub seed: u64,
}

impl Default for SynthCorpusConfig {
    fn default() -> Self {
        SynthCorpusConfig {
            train_speakers: 250,
            eval_speakers: 100,
            utterances_per_channel: 6,
            frames: 50,
            dim: 16,
            template_scale: 1.0,
            wander: 0.6,
            wander_rho: 0.7,
            noise_sigma: 0.3,
            gain_spread: 2.0,
            offset_scale: 1.0,
            split_train_channels: true,
            identity_channels: false,
            channel_seed: 1,
            seed: 0,
        }
    }
}

impl SynthCorpusConfig {
    pub fn validate(&self) -> Result<()> {
        let fail = |m: String| Err(Error::Config(m));
        if self.train_speakers + self.eval_speakers < 2 || self.train_speakers < 2 {
            return fail(format!(
                "need at least 2 training speakers, got {}",
                self.train_speakers
            ));
        }
        if self.utterances_per_channel == 0 || self.frames == 0 || self.dim == 0 {
            return fail("utterances_per_channel, frames and dim must be positive".into());
        }
        if !(self.noise_sigma >= 0.0) || !(self.wander >= 0.0) || !(self.template_scale >= 0.0) {
            return fail("noise_sigma, wander and template_scale must be >= 0".into());
        }
        if !(self.wander_rho >= 0.0 && self.wander_rho < 1.0) {
            return fail(format!(
                "wander_rho must lie in [0, 1), got {}",
                self.wander_rho
            ));
        }
        if !(self.gain_spread >= 1.0) || !(self.offset_scale >= 0.0) {
            return fail("gain_spread must be >= 1 and offset_scale >= 0".into());
        }
        Ok(())
    }
}

/// Per-channel diagonal affine transform.
#[derive(Clone, Debug, PartialEq)]
pub struct ChannelTransform {
    pub gain: Vec<f64>,
    pub offset: Vec<f64>,
}

impl ChannelTransform {
    pub fn identity(dim: usize) -> Self {
        ChannelTransform {
            gain: vec![1.0; dim],
            offset: vec![0.0; dim],
        }
    }
}

/// Speaker-disjoint partitions. Dev and test speakers have utterances on
/// both channels: channel A for enrolment, channel B for trials.
#[derive(Clone, Debug, Default, PartialEq)]
pub struct Corpus {
    pub train: Vec<UtteranceFeatures>,
    pub dev: Vec<UtteranceFeatures>,
    pub test: Vec<UtteranceFeatures>,
}

impl Corpus {
    /// Number of softmax classes: training speaker ids are `0..N`.
    pub fn train_speaker_count(&self) -> usize {
        self.train
            .iter()
            .map(|u| u.speaker_id + 1)
            .max()
            .unwrap_or(0)
    }

    pub fn dim(&self) -> Option<usize> {
        self.train
            .first()
            .or(self.dev.first())
            .map(UtteranceFeatures::dim)
    }
}

fn gaussian(rng: &mut ChaCha8Rng) -> f64 {
    rng.sample(StandardNormal)
}

pub fn channel_transforms(config: &SynthCorpusConfig) -> [ChannelTransform; 2] {
    if config.identity_channels {
        return [
            ChannelTransform::identity(config.dim),
            ChannelTransform::identity(config.dim),
        ];
    }
    let mut rng = ChaCha8Rng::seed_from_u64(config.channel_seed);
    let mut make = || {
        let gain = (0..config.dim)
            .map(|_| config.gain_spread.powf(rng.random_range(-0.5..0.5)))
            .collect();
        let offset = (0..config.dim)
            .map(|_| config.offset_scale * gaussian(&mut rng))
            .collect();
        ChannelTransform { gain, offset }
    };
    let a = make();
    let b = make();
    [a, b]
}

fn synth_utterance(
    rng: &mut ChaCha8Rng,
    config: &SynthCorpusConfig,
    template: &[f64],
    transform: &ChannelTransform,
) -> Tensor {
    let (frames, dim) = (config.frames, config.dim);
    let rho = config.wander_rho;
    let innovation = (1.0 - rho * rho).sqrt();
    let mut wander: Vec<f64> = (0..dim).map(|_| config.wander * gaussian(rng)).collect();
    let mut data = Vec::with_capacity(frames * dim);
    for t in 0..frames {
        if t > 0 {
            for w in wander.iter_mut() {
                *w = rho * *w + innovation * config.wander * gaussian(rng);
            }
        }
        for f in 0..dim {
            let clean = transform.gain[f] * (template[f] + wander[f]) + transform.offset[f];
            data.push(clean + config.noise_sigma * gaussian(rng));
        }
    }
    Tensor::from_parts(vec![frames, dim], data)
}

/// Generates the corpus. Training speakers get ids `0..train_speakers`; the
/// evaluation speakers follow, the first half forming dev and the rest test.
pub fn synth_corpus(config: &SynthCorpusConfig) -> Result<Corpus> {
    config.validate()?;
    let transforms = channel_transforms(config);
    let mut rng = ChaCha8Rng::seed_from_u64(config.seed);
    let template = |rng: &mut ChaCha8Rng| -> Vec<f64> {
        (0..config.dim)
            .map(|_| config.template_scale * gaussian(rng))
            .collect()
    };
    let mut corpus = Corpus::default();
    let emit = |rng: &mut ChaCha8Rng,
                out: &mut Vec<UtteranceFeatures>,
                s: usize,
                t: &[f64],
                c: u8,
                n: usize| {
        for u in 0..n {
            let features = synth_utterance(rng, config, t, &transforms[usize::from(c)]);
            out.push(UtteranceFeatures {
                utterance_id: format!("s{s:04}_c{c}_u{u:02}"),
                speaker_id: s,
                channel_id: c,
                features,
            });
        }
    };
    for s in 0..config.train_speakers {
        let t = template(&mut rng);
        if config.split_train_channels {
            emit(
                &mut rng,
                &mut corpus.train,
                s,
                &t,
                (s % 2) as u8,
                2 * config.utterances_per_channel,
            );
        } else {
            for c in 0..2 {
                emit(
                    &mut rng,
                    &mut corpus.train,
                    s,
                    &t,
                    c,
                    config.utterances_per_channel,
                );
            }
        }
    }
    let dev_count = config.eval_speakers / 2;
    for e in 0..config.eval_speakers {
        let s = config.train_speakers + e;
        let t = template(&mut rng);
        let out = if e < dev_count {
            &mut corpus.dev
        } else {
            &mut corpus.test
        };
        for c in 0..2 {
            emit(&mut rng, out, s, &t, c, config.utterances_per_channel);
        }
    }
    Ok(corpus)
}

// ---------------------------------------------------------------- batches

/// `P·K` utterances stacked as `[M, 1, T, F]`.
#[derive(Clone, Debug, PartialEq)]
pub struct Batch {
    pub features: Tensor,
    pub speakers: Vec<usize>,
    pub channels: Vec<u8>,
    /// Positions of the utterances in the source slice.
    pub indices: Vec<usize>,
}

impl Batch {
    pub fn len(&self) -> usize {
        self.speakers.len()
    }

    pub fn is_empty(&self) -> bool {
        self.speakers.is_empty()
    }

    /// Stacks the given utterances. All must share one `[T, F]` shape.
    pub fn gather(utterances: &[UtteranceFeatures], indices: &[usize]) -> Result<Self> {
        let first = indices
            .first()
            .map(|&i| &utterances[i])
            .ok_or_else(|| Error::invalid("batch", "no utterances"))?;
        let shape = first.features.shape().to_vec();
        let mut data = Vec::with_capacity(indices.len() * first.features.len());
        for &i in indices {
            let u = &utterances[i];
            if u.features.shape() != shape.as_slice() {
                return Err(Error::ShapeMismatch {
                    op: "batch",
                    left: shape,
                    right: u.features.shape().to_vec(),
                });
            }
            data.extend_from_slice(u.features.data());
        }
        Ok(Batch {
            features: Tensor::from_parts(vec![indices.len(), 1, shape[0], shape[1]], data),
            speakers: indices.iter().map(|&i| utterances[i].speaker_id).collect(),
            channels: indices.iter().map(|&i| utterances[i].channel_id).collect(),
            indices: indices.to_vec(),
        })
    }
}

/// One epoch of `P × K` batches.
///
/// Each speaker's utterances are shuffled and cut into groups of `K`; the
/// groups are shuffled and packed `P` at a time. Utterances that do not fill
/// a group, and groups that do not fill a batch, sit out this epoch.
pub fn make_batches<R: Rng>(
    utterances: &[UtteranceFeatures],
    p: usize,
    k: usize,
    rng: &mut R,
) -> Result<Vec<Batch>> {
    if p == 0 || k < 2 {
        return Err(Error::invalid(
            "make_batches",
            format!("need P >= 1 and K >= 2, got P={p}, K={k}"),
        ));
    }
    let mut by_speaker: indexmap::IndexMap<usize, Vec<usize>> = indexmap::IndexMap::new();
    for (i, u) in utterances.iter().enumerate() {
        by_speaker.entry(u.speaker_id).or_default().push(i);
    }
    let eligible = by_speaker.values().filter(|v| v.len() >= k).count();
    if eligible < p {
        return Err(Error::Corpus(format!(
            "batches need {p} speakers with at least {k} utterances each; only {eligible} qualify ({} short)",
            p - eligible
        )));
    }
    let mut groups = Vec::new();
    for list in by_speaker.values() {
        let mut list = list.clone();
        list.shuffle(rng);
        groups.extend(list.chunks_exact(k).map(<[usize]>::to_vec));
    }
    groups.shuffle(rng);
    groups
        .chunks_exact(p)
        .map(|chunk| Batch::gather(utterances, &chunk.concat()))
        .collect()
}

// ---------------------------------------------------------------- file formats

pub const FEATURE_MAGIC: [u8; 4] = *b"CATF";
pub const FEATURE_VERSION: u32 = 1;

fn format_err(reason: FormatError) -> Error {
    Error::Format {
        kind: "feature",
        reason,
    }
}

pub fn encode_features(features: &Tensor) -> Result<Vec<u8>> {
    if features.rank() != 2 {
        return Err(Error::invalid(
            "encode_features",
            format!("expected [T, F], got {:?}", features.shape()),
        ));
    }
    let mut out = Vec::with_capacity(16 + features.len() * 8);
    out.extend_from_slice(&FEATURE_MAGIC);
    out.extend_from_slice(&FEATURE_VERSION.to_le_bytes());
    for &d in features.shape() {
        out.extend_from_slice(&(d as u32).to_le_bytes());
    }
    for v in features.data() {
        out.extend_from_slice(&v.to_le_bytes());
    }
    Ok(out)
}

pub fn decode_features(bytes: &[u8]) -> Result<Tensor> {
    if bytes.len() < 4 {
        return Err(format_err(FormatError::Truncated("magic")));
    }
    let magic = [bytes[0], bytes[1], bytes[2], bytes[3]];
    if magic != FEATURE_MAGIC {
        return Err(format_err(FormatError::BadMagic(magic)));
    }
    if bytes.len() < 16 {
        return Err(format_err(FormatError::Truncated("header")));
    }
    let version = le_u32(bytes, 4);
    if version != FEATURE_VERSION {
        return Err(format_err(FormatError::Version {
            found: version,
            expected: FEATURE_VERSION,
        }));
    }
    let (t, f) = (le_u32(bytes, 8) as usize, le_u32(bytes, 12) as usize);
    if t == 0 || f == 0 {
        return Err(format_err(FormatError::Malformed(format!(
            "empty shape {t}x{f}"
        ))));
    }
    let body = &bytes[16..];
    if body.len() != t * f * 8 {
        return Err(format_err(if body.len() < t * f * 8 {
            FormatError::Truncated("values")
        } else {
            FormatError::Malformed(format!("{} trailing bytes", body.len() - t * f * 8))
        }));
    }
    let data = body
        .chunks_exact(8)
        .map(|c| f64::from_le_bytes(c.try_into().expect("8-byte chunk")))
        .collect();
    Tensor::new(vec![t, f], data)
}

pub fn write_features(path: &Path, features: &Tensor) -> Result<()> {
    fs::write(path, encode_features(features)?).map_err(|e| Error::io(path, e))
}

pub fn read_features(path: &Path) -> Result<Tensor> {
    decode_features(&fs::read(path).map_err(|e| Error::io(path, e))?)
}

/// One manifest line.
#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ManifestRecord {
    pub utterance_id: String,
    pub speaker_id: usize,
    pub channel_id: u8,
    /// Feature file, relative to the manifest's directory.
    pub path: String,
}

pub fn write_manifest(path: &Path, records: &[ManifestRecord]) -> Result<()> {
    let file = fs::File::create(path).map_err(|e| Error::io(path, e))?;
    let mut w = BufWriter::new(file);
    for r in records {
        let line = serde_json::to_string(r).map_err(|e| Error::Corpus(e.to_string()))?;
        writeln!(w, "{line}").map_err(|e| Error::io(path, e))?;
    }
    w.flush().map_err(|e| Error::io(path, e))
}

pub fn read_manifest(path: &Path) -> Result<Vec<ManifestRecord>> {
    let file = fs::File::open(path).map_err(|e| Error::io(path, e))?;
    let mut out = Vec::new();
    for (n, line) in BufReader::new(file).lines().enumerate() {
        let line = line.map_err(|e| Error::io(path, e))?;
        if line.trim().is_empty() {
            continue;
        }
        let rec: ManifestRecord = serde_json::from_str(&line).map_err(|e| Error::Format {
            kind: "manifest",
            reason: FormatError::Malformed(format!("{}:{}: {e}", path.display(), n + 1)),
        })?;
        out.push(rec);
    }
    Ok(out)
}

pub const PARTITIONS: [&str; 3] = ["train", "dev", "test"];

/// Writes `features/*.catf` plus `train.jsonl`, `dev.jsonl` and `test.jsonl`.
pub fn save_corpus(dir: &Path, corpus: &Corpus) -> Result<()> {
    let feat_dir = dir.join("features");
    fs::create_dir_all(&feat_dir).map_err(|e| Error::io(&feat_dir, e))?;
    for (name, part) in PARTITIONS
        .iter()
        .zip([&corpus.train, &corpus.dev, &corpus.test])
    {
        let mut records = Vec::with_capacity(part.len());
        for u in part {
            let rel = format!("features/{}.catf", u.utterance_id);
            write_features(&dir.join(&rel), &u.features)?;
            records.push(ManifestRecord {
                utterance_id: u.utterance_id.clone(),
                speaker_id: u.speaker_id,
                channel_id: u.channel_id,
                path: rel,
            });
        }
        write_manifest(&manifest_path(dir, name), &records)?;
    }
    Ok(())
}

pub fn manifest_path(dir: &Path, partition: &str) -> PathBuf {
    dir.join(format!("{partition}.jsonl"))
}

pub fn load_partition(dir: &Path, partition: &str) -> Result<Vec<UtteranceFeatures>> {
    read_manifest(&manifest_path(dir, partition))?
        .into_iter()
        .map(|r| {
            let features = read_features(&dir.join(&r.path))?;
            UtteranceFeatures::new(r.utterance_id, r.speaker_id, r.channel_id, features)
        })
        .collect()
}

pub fn load_corpus(dir: &Path) -> Result<Corpus> {
    let corpus = Corpus {
        train: load_partition(dir, "train")?,
        dev: load_partition(dir, "dev")?,
        test: load_partition(dir, "test")?,
    };
    check_disjoint(&corpus)?;
    Ok(corpus)
}

/// Train speakers must not reappear in dev or test.
pub fn check_disjoint(corpus: &Corpus) -> Result<()> {
    let train: std::collections::HashSet<usize> =
        corpus.train.iter().map(|u| u.speaker_id).collect();
    if let Some(u) = corpus
        .dev
        .iter()
        .chain(&corpus.test)
        .find(|u| train.contains(&u.speaker_id))
    {
        return Err(Error::Corpus(format!(
            "speaker {} appears in training and evaluation partitions",
            u.speaker_id
        )));
    }
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;

    fn small() -> SynthCorpusConfig {
        SynthCorpusConfig {
            train_speakers: 6,
            eval_speakers: 4,
            utterances_per_channel: 2,
            frames: 5,
            dim: 3,
            ..SynthCorpusConfig::default()
        }
    }

    #[test]
    fn wav_examples() {
        let wav = parse_wav(&encode_wav(&[0.0, 0.5], 16000)).unwrap();
        assert_eq!(wav.samples, vec![0.0, 0.5]);
        assert_eq!(wav.sample_rate, 16000);

        let mut bytes = encode_wav(&[0.0], 8000);
        bytes[44..46].copy_from_slice(&32767i16.to_le_bytes());
        let s = parse_wav(&bytes).unwrap().samples[0];
        assert_eq!(s, 32767.0 / 32768.0);
        assert!((s - 0.999969482).abs() < 1e-9);
    }

    #[test]
    fn wav_errors_are_distinct() {
        let good = encode_wav(&[0.1, -0.2, 0.3], 16000);
        let mut bad = good.clone();
        bad[..4].copy_from_slice(b"RIFX");
        assert_eq!(parse_wav(&bad), Err(WavError::BadMagic));

        let mut float = good.clone();
        float[20..22].copy_from_slice(&3u16.to_le_bytes());
        assert_eq!(parse_wav(&float), Err(WavError::NotPcm(3)));

        let mut stereo = good.clone();
        stereo[22..24].copy_from_slice(&2u16.to_le_bytes());
        assert_eq!(parse_wav(&stereo), Err(WavError::MultiChannel(2)));

        let mut bits = good.clone();
        bits[34..36].copy_from_slice(&8u16.to_le_bytes());
        assert_eq!(parse_wav(&bits), Err(WavError::BitDepth(8)));

        assert_eq!(
            parse_wav(&good[..good.len() - 1]),
            Err(WavError::Truncated("data chunk"))
        );
        assert_eq!(parse_wav(&good[..36]), Err(WavError::MissingData));
    }

    #[test]
    fn wav_skips_unknown_chunks() {
        let good = encode_wav(&[0.25], 16000);
        let mut with_list = good[..36].to_vec();
        with_list.extend_from_slice(b"LIST");
        with_list.extend_from_slice(&3u32.to_le_bytes());
        with_list.extend_from_slice(&[1, 2, 3, 0]);
        with_list.extend_from_slice(&good[36..]);
        assert_eq!(parse_wav(&with_list).unwrap().samples, vec![0.25]);
    }

    #[test]
    fn fbank_silence_and_frame_count() {
        let cfg = FbankConfig::default();
        let feats = fbank(&vec![0.0; 16000], 16000, &cfg).unwrap();
        assert_eq!(feats.shape(), &[98, 64]);
        assert!(feats.data().iter().all(|&v| v == 1e-10f64.ln()));
        assert!(fbank(&[0.0; 399], 16000, &cfg).is_err());
        assert_eq!(fbank(&[0.0; 400], 16000, &cfg).unwrap().shape()[0], 1);
    }

    #[test]
    fn fbank_tone_peaks_at_nearest_mel_centre() {
        let cfg = FbankConfig::default();
        let tone: Vec<f64> = (0..16000)
            .map(|n| 0.5 * (2.0 * PI * 1000.0 * n as f64 / 16000.0).sin())
            .collect();
        let feats = fbank(&tone, 16000, &cfg).unwrap();
        let (_, centres) = mel_filterbank(64, 512, 16000);
        let nearest = (0..64)
            .min_by(|&a, &b| {
                (centres[a] - 1000.0)
                    .abs()
                    .total_cmp(&(centres[b] - 1000.0).abs())
            })
            .unwrap();
        for t in 0..feats.shape()[0] {
            let row = feats.row(t);
            let arg = (0..64).max_by(|&a, &b| row[a].total_cmp(&row[b])).unwrap();
            assert_eq!(arg, nearest, "frame {t}");
        }
    }

    #[test]
    fn fbank_matches_direct_dft() {
        // one frame, O(N²) DFT
        let cfg = FbankConfig {
            mel_bins: 8,
            ..FbankConfig::default()
        };
        let samples: Vec<f64> = (0..400)
            .map(|n| ((n * 37 % 101) as f64 / 50.0 - 1.0) * 0.3)
            .collect();
        let feats = fbank(&samples, 16000, &cfg).unwrap();
        let mut x = vec![0.0; 512];
        for n in 0..400 {
            let prev = if n == 0 { samples[0] } else { samples[n - 1] };
            let w = 0.54 - 0.46 * (2.0 * PI * n as f64 / 399.0).cos();
            x[n] = (samples[n] - 0.97 * prev) * w;
        }
        let power: Vec<f64> = (0..257)
            .map(|k| {
                let (mut re, mut im) = (0.0, 0.0);
                for (n, v) in x.iter().enumerate() {
                    let a = -2.0 * PI * (k * n) as f64 / 512.0;
                    re += v * a.cos();
                    im += v * a.sin();
                }
                re * re + im * im
            })
            .collect();
        let (filters, _) = mel_filterbank(8, 512, 16000);
        for (m, f) in filters.iter().enumerate() {
            let e: f64 = f.iter().zip(&power).map(|(w, p)| w * p).sum();
            assert!((feats.data()[m] - e.max(1e-10).ln()).abs() < 1e-9);
        }
    }

    #[test]
    fn synth_deterministic_pipeline_without_noise() {
        let cfg = SynthCorpusConfig {
            noise_sigma: 0.0,
            wander: 0.0,
            ..small()
        };
        let corpus = synth_corpus(&cfg).unwrap();
        let [a, b] = channel_transforms(&cfg);
        for u in corpus.train.iter().chain(&corpus.dev) {
            let first = u.features.row(0).to_vec();
            for t in 1..u.frames() {
                assert_eq!(u.features.row(t), first.as_slice());
            }
        }
        // recover templates from channel A and check channel B
        for s in corpus.dev.iter().map(|u| u.speaker_id) {
            let ua = corpus
                .dev
                .iter()
                .find(|u| u.speaker_id == s && u.channel_id == 0)
                .unwrap();
            let ub = corpus
                .dev
                .iter()
                .find(|u| u.speaker_id == s && u.channel_id == 1)
                .unwrap();
            for f in 0..cfg.dim {
                let t = (ua.features.row(0)[f] - a.offset[f]) / a.gain[f];
                assert!((b.gain[f] * t + b.offset[f] - ub.features.row(0)[f]).abs() < 1e-12);
            }
        }
    }

    #[test]
    fn synth_is_reproducible_and_partitions_are_disjoint() {
        let a = synth_corpus(&small()).unwrap();
        let b = synth_corpus(&small()).unwrap();
        assert_eq!(a, b);
        check_disjoint(&a).unwrap();
        assert_eq!(a.train.len(), 6 * 4);
        assert_eq!(a.dev.len(), 2 * 4);
        assert_eq!(a.test.len(), 2 * 4);
        assert!(a
            .train
            .iter()
            .all(|u| u.channel_id as usize == u.speaker_id % 2));
        let other = synth_corpus(&SynthCorpusConfig { seed: 1, ..small() }).unwrap();
        assert_ne!(a, other);
    }

    #[test]
    fn synth_channel_gains_respect_spread() {
        let cfg = SynthCorpusConfig::default();
        for tr in channel_transforms(&cfg) {
            let lo = tr.gain.iter().copied().fold(f64::INFINITY, f64::min);
            let hi = tr.gain.iter().copied().fold(0.0, f64::max);
            assert!(lo >= 2f64.powf(-0.5) && hi <= 2f64.sqrt());
        }
    }

    #[test]
    fn synth_rejects_invalid_configs() {
        assert!(synth_corpus(&SynthCorpusConfig {
            train_speakers: 1,
            ..small()
        })
        .is_err());
        assert!(synth_corpus(&SynthCorpusConfig {
            noise_sigma: -1.0,
            ..small()
        })
        .is_err());
    }

    #[test]
    fn batches_have_pk_geometry_and_are_seeded() {
        let corpus = synth_corpus(&SynthCorpusConfig {
            train_speakers: 20,
            ..small()
        })
        .unwrap();
        let batches = make_batches(&corpus.train, 4, 2, &mut ChaCha8Rng::seed_from_u64(3)).unwrap();
        assert_eq!(batches.len(), 20 * 2 / 4);
        for b in &batches {
            assert_eq!(b.features.shape(), &[8, 1, 5, 3]);
            for pair in b.speakers.chunks(2) {
                assert_eq!(pair[0], pair[1]);
            }
        }
        let again = make_batches(&corpus.train, 4, 2, &mut ChaCha8Rng::seed_from_u64(3)).unwrap();
        assert_eq!(batches, again);

        let err = make_batches(
            &corpus.train[..8 * 4],
            16,
            4,
            &mut ChaCha8Rng::seed_from_u64(0),
        )
        .unwrap_err();
        assert!(err.to_string().contains("only 8 qualify"), "{err}");
    }

    #[test]
    fn default_batch_size() {
        let corpus = synth_corpus(&SynthCorpusConfig {
            train_speakers: 16,
            frames: 2,
            dim: 2,
            ..SynthCorpusConfig::default()
        })
        .unwrap();
        let b = make_batches(&corpus.train, 16, 4, &mut ChaCha8Rng::seed_from_u64(0)).unwrap();
        assert!(b.iter().all(|b| b.len() == 64));
    }

    #[test]
    fn feature_file_round_trip_and_errors() {
        let t = Tensor::new(
            vec![2, 3],
            vec![1.0, -2.5, 3.0, f64::MIN_POSITIVE, 0.0, 7.0],
        )
        .unwrap();
        let bytes = encode_features(&t).unwrap();
        assert!(decode_features(&bytes).unwrap().bit_eq(&t));
        assert_eq!(le_u32(&bytes, 8), 2);

        let mut bad = bytes.clone();
        bad[0] = b'X';
        assert!(matches!(
            decode_features(&bad),
            Err(Error::Format {
                reason: FormatError::BadMagic(_),
                ..
            })
        ));
        let mut ver = bytes.clone();
        ver[4] = 2;
        assert!(matches!(
            decode_features(&ver),
            Err(Error::Format {
                reason: FormatError::Version { found: 2, .. },
                ..
            })
        ));
        assert!(matches!(
            decode_features(&bytes[..bytes.len() - 3]),
            Err(Error::Format {
                reason: FormatError::Truncated(_),
                ..
            })
        ));
    }

    #[test]
    fn corpus_round_trips_through_disk() {
        let dir = tempfile::tempdir().unwrap();
        let corpus = synth_corpus(&small()).unwrap();
        save_corpus(dir.path(), &corpus).unwrap();
        assert_eq!(load_corpus(dir.path()).unwrap(), corpus);
        let recs = read_manifest(&manifest_path(dir.path(), "dev")).unwrap();
        assert_eq!(recs.len(), corpus.dev.len());
        assert_eq!(
            recs[0].path,
            format!("features/{}.catf", recs[0].utterance_id)
        );
    }
}
