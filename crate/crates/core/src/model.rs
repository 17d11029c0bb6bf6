//! The two architectures and utterance-level embedding extraction.
//!
//! [`BaselineCnn`] is a plain stack of conv/batch-norm/relu blocks, the
//! first `pool_stages` of which end in 2×2 max pooling, followed by global
//! average pooling, a linear projection to the embedding and a softmax
//! head. [`CatModel`] puts a two-layer LSTM generator `G` in front of the
//! same network (`D1`) and adds a channel discriminator `D2` behind a
//! gradient reversal layer.
//!
//! Parameter names start with `g.`, `d1.` or `d2.`.

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::autodiff::{Tape, Tensor, Var};
use crate::error::{Error, FormatError, Result};
use crate::layers::{
    batchnorm, conv2d, dropout, global_average_pool, gradient_reversal, linear, lstm_batch, pool2d,
    BatchNormLayer, Conv2dLayer, Ctx, Init, Linear, LstmLayer, Mode, ParamStore, PoolMode,
};

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Arch {
    Cnn,
    #[default]
    Cat,
    /// `G` and `D1` without the channel discriminator.
    CatNoD2,
}

impl Arch {
    pub fn name(self) -> &'static str {
        match self {
            Arch::Cnn => "cnn",
            Arch::Cat => "cat",
            Arch::CatNoD2 => "cat_no_d2",
        }
    }
}

impl std::str::FromStr for Arch {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "cnn" => Ok(Arch::Cnn),
            "cat" => Ok(Arch::Cat),
            "cat_no_d2" => Ok(Arch::CatNoD2),
            other => Err(Error::Config(format!(
                "unknown architecture {other:?} (cnn, cat, cat_no_d2)"
            ))),
        }
    }
}

/// What the channel discriminator sees.
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum D2Tap {
    /// The raw (pre-normalization) speaker embedding produced by `D1`.
    #[default]
    Embedding,
    /// The temporal mean of the generator output.
    Generator,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ModelConfig {
    pub arch: Arch,
    /// Segment length `T`; also the sliding window used at recognition time.
    pub frames: usize,
    /// Feature dimension `F`.
    pub dim: usize,
    pub widths: Vec<usize>,
    /// Leading conv blocks followed by 2×2 max pooling.
    pub pool_stages: usize,
    pub embedding_dim: usize,
    /// Softmax classes (training speakers). Filled in from the corpus when 0.
    pub speakers: usize,
    pub dropout: f64,
    pub d2_hidden: usize,
    pub d2_dropout: f64,
    pub d2_tap: D2Tap,
}

impl Default for ModelConfig {
    fn default() -> Self {
        ModelConfig {
            arch: Arch::Cat,
            frames: 500,
            dim: 64,
            widths: vec![16, 16, 32, 32, 64],
            pool_stages: 5,
            embedding_dim: 128,
            speakers: 0,
            dropout: 0.2,
            d2_hidden: 64,
            d2_dropout: 0.2,
            d2_tap: D2Tap::Embedding,
        }
    }
}

impl ModelConfig {
    /// Geometry for the synthetic 50×16 corpus.
    pub fn desk() -> Self {
        ModelConfig {
            frames: 50,
            dim: 16,
            widths: vec![8, 8, 16, 16, 32],
            pool_stages: 3,
            embedding_dim: 32,
            ..ModelConfig::default()
        }
    }

    /// Spatial extent after each conv block, starting from `(T, F)`.
    pub fn spatial_trace(&self) -> Vec<(usize, usize)> {
        let (mut h, mut w) = (self.frames, self.dim);
        let mut trace = vec![(h, w)];
        for i in 0..self.widths.len() {
            if i < self.pool_stages {
                h /= 2;
                w /= 2;
            }
            trace.push((h, w));
        }
        trace
    }

    pub fn validate(&self) -> Result<()> {
        let fail = |m: String| Err(Error::Config(m));
        if self.widths.is_empty() || self.widths.contains(&0) {
            return fail(format!(
                "widths must be non-empty and positive, got {:?}",
                self.widths
            ));
        }
        if self.pool_stages > self.widths.len() {
            return fail(format!(
                "pool_stages {} exceeds the {} conv blocks",
                self.pool_stages,
                self.widths.len()
            ));
        }
        if self.frames == 0 || self.dim == 0 || self.embedding_dim == 0 || self.d2_hidden == 0 {
            return fail("frames, dim, embedding_dim and d2_hidden must be positive".into());
        }
        if self.speakers == 1 {
            return fail("need at least 2 training speakers, got 1".into());
        }
        for (name, rate) in [("dropout", self.dropout), ("d2_dropout", self.d2_dropout)] {
            if !(0.0..1.0).contains(&rate) {
                return fail(format!("{name} must lie in [0, 1), got {rate}"));
            }
        }
        let (h, w) = *self
            .spatial_trace()
            .last()
            .expect("trace has the input entry");
        if h == 0 || w == 0 {
            let need = 1usize << self.pool_stages;
            return Err(Error::invalid(
                "model geometry",
                format!(
                    "input ({}, {}) does not survive {} 2x2 poolings (final map ({h}, {w}); need at least {need} in each axis)",
                    self.frames, self.dim, self.pool_stages
                ),
            ));
        }
        Ok(())
    }
}

/// Forward-pass outputs.
#[derive(Clone, Copy, Debug)]
pub struct Outputs {
    /// L2-normalized embeddings `[M, d]`.
    pub embeddings: Var,
    /// The projection before normalization.
    pub raw: Var,
    /// Speaker logits `[M, N]`.
    pub logits: Var,
    /// Channel logits `[M, 2]` when a discriminator is present.
    pub channel_logits: Option<Var>,
    /// Generator output `[M, 1, T, F]`.
    pub generated: Option<Var>,
}

/// Dropout streams; the discriminator draws from its own so that removing
/// it leaves the speaker path's masks unchanged.
pub struct DropoutRngs {
    pub speaker: ChaCha8Rng,
    pub channel: ChaCha8Rng,
}

impl DropoutRngs {
    pub fn new(seed: u64) -> Self {
        let mut speaker = ChaCha8Rng::seed_from_u64(seed);
        speaker.set_stream(1);
        let mut channel = ChaCha8Rng::seed_from_u64(seed);
        channel.set_stream(2);
        DropoutRngs { speaker, channel }
    }
}

#[derive(Clone, Debug)]
struct ConvBlock {
    conv: Conv2dLayer,
    bn: BatchNormLayer,
    pool: bool,
}

/// Conv stack, projection and softmax head.
#[derive(Clone, Debug)]
pub struct BaselineCnn {
    blocks: Vec<ConvBlock>,
    proj: Linear,
    head: Linear,
    dropout: f64,
}

impl BaselineCnn {
    pub fn new(
        store: &mut ParamStore,
        init: &Init,
        prefix: &str,
        config: &ModelConfig,
    ) -> Result<Self> {
        config.validate()?;
        let mut blocks = Vec::with_capacity(config.widths.len());
        let mut cin = 1;
        for (i, &w) in config.widths.iter().enumerate() {
            blocks.push(ConvBlock {
                conv: Conv2dLayer::new(store, init, &format!("{prefix}.conv{i}"), cin, w),
                bn: BatchNormLayer::new(store, &format!("{prefix}.bn{i}"), w),
                pool: i < config.pool_stages,
            });
            cin = w;
        }
        let proj = Linear::new(
            store,
            init,
            &format!("{prefix}.proj"),
            cin,
            config.embedding_dim,
        );
        let head = Linear::new(
            store,
            init,
            &format!("{prefix}.head"),
            config.embedding_dim,
            config.speakers,
        );
        Ok(BaselineCnn {
            blocks,
            proj,
            head,
            dropout: config.dropout,
        })
    }

    pub fn embedding_dim(&self) -> usize {
        self.proj.d_out
    }
}

/// Two stacked LSTM layers with hidden size `F`.
#[derive(Clone, Debug)]
pub struct Generator {
    layers: [LstmLayer; 2],
}

/// `dropout → linear → relu → linear` to two channel classes.
#[derive(Clone, Debug)]
pub struct ChannelDiscriminator {
    fc0: Linear,
    fc1: Linear,
    dropout: f64,
}

#[derive(Clone, Debug)]
pub struct CatModel {
    pub g: Generator,
    pub d1: BaselineCnn,
    pub d2: Option<ChannelDiscriminator>,
    pub tap: D2Tap,
}

#[derive(Clone, Debug)]
pub enum Network {
    Cnn(BaselineCnn),
    Cat(CatModel),
}

/// A network together with its parameters.
#[derive(Clone, Debug)]
pub struct Model {
    pub config: ModelConfig,
    pub store: ParamStore,
    pub net: Network,
}

impl Model {
    /// Builds and initializes the network described by `config`.
    pub fn new(config: ModelConfig, seed: u64) -> Result<Self> {
        config.validate()?;
        if config.speakers < 2 {
            return Err(Error::Config(format!(
                "need at least 2 training speakers, got {}",
                config.speakers
            )));
        }
        let init = Init::new(seed);
        let mut store = ParamStore::new();
        let net = match config.arch {
            Arch::Cnn => Network::Cnn(BaselineCnn::new(&mut store, &init, "d1", &config)?),
            Arch::Cat | Arch::CatNoD2 => {
                let f = config.dim;
                let g = Generator {
                    layers: [
                        LstmLayer::new(&mut store, &init, "g.lstm0", f, f),
                        LstmLayer::new(&mut store, &init, "g.lstm1", f, f),
                    ],
                };
                let d1 = BaselineCnn::new(&mut store, &init, "d1", &config)?;
                let d2 = (config.arch == Arch::Cat).then(|| {
                    let d_in = match config.d2_tap {
                        D2Tap::Embedding => config.embedding_dim,
                        D2Tap::Generator => f,
                    };
                    ChannelDiscriminator {
                        fc0: Linear::new(&mut store, &init, "d2.fc0", d_in, config.d2_hidden),
                        fc1: Linear::new(&mut store, &init, "d2.fc1", config.d2_hidden, 2),
                        dropout: config.d2_dropout,
                    }
                });
                Network::Cat(CatModel {
                    g,
                    d1,
                    d2,
                    tap: config.d2_tap,
                })
            }
        };
        Ok(Model { config, store, net })
    }

    /// Runs whichever architecture this is on `[M, 1, T, F]` features.
    pub fn forward(
        &self,
        ctx: &mut Ctx,
        features: Var,
        beta: f64,
        rngs: &mut DropoutRngs,
    ) -> Result<Outputs> {
        match &self.net {
            Network::Cnn(cnn) => baseline_forward(ctx, features, cnn, &mut rngs.speaker),
            Network::Cat(cat) => cat_forward(ctx, features, cat, beta, rngs),
        }
    }

    /// Normalized embeddings of `[M, 1, T, F]` segments in inference mode.
    pub fn embed_segments(&self, segments: &Tensor) -> Result<Tensor> {
        let mut tape = Tape::new();
        let mut ctx = Ctx::new(&mut tape, &self.store, Mode::Infer);
        let x = ctx.tape.leaf(segments.clone());
        let out = self.forward(&mut ctx, x, 0.0, &mut DropoutRngs::new(0))?;
        Ok(tape.value(out.embeddings).clone())
    }

    /// Overwrites parameters by name; every name in the store must be present
    /// with a matching shape, and no extra names are accepted.
    pub fn load_params(&mut self, tensors: Vec<(String, Tensor)>) -> Result<()> {
        if tensors.len() != self.store.len() {
            return Err(Error::invalid(
                "load_params",
                format!(
                    "checkpoint has {} tensors, model has {}",
                    tensors.len(),
                    self.store.len()
                ),
            ));
        }
        for (name, value) in tensors {
            let id = self
                .store
                .id(&name)
                .ok_or_else(|| Error::invalid("load_params", format!("unknown tensor {name:?}")))?;
            if self.store.get(id).shape() != value.shape() {
                return Err(Error::ShapeMismatch {
                    op: "load_params",
                    left: self.store.get(id).shape().to_vec(),
                    right: value.shape().to_vec(),
                });
            }
            *self.store.get_mut(id) = value;
        }
        Ok(())
    }
}

fn check_input(tape: &Tape, features: Var) -> Result<[usize; 4]> {
    match *tape.shape(features) {
        [m, 1, t, f] => Ok([m, 1, t, f]),
        ref other => Err(Error::invalid(
            "forward",
            format!("expected [M, 1, T, F], got {other:?}"),
        )),
    }
}

fn d1_forward(
    ctx: &mut Ctx,
    features: Var,
    cnn: &BaselineCnn,
    rng: &mut ChaCha8Rng,
) -> Result<Outputs> {
    let mut h = features;
    for block in &cnn.blocks {
        h = conv2d(ctx, h, &block.conv)?;
        h = batchnorm(ctx, h, &block.bn)?;
        h = ctx.tape.relu(h)?;
        if block.pool {
            h = pool2d(ctx.tape, h, PoolMode::Max)?;
        }
    }
    let pooled = global_average_pool(ctx.tape, h)?;
    let raw = linear(ctx, pooled, &cnn.proj)?;
    let embeddings = ctx.tape.l2_normalize_rows(raw)?;
    let dropped = dropout(ctx.tape, raw, cnn.dropout, ctx.mode, rng)?;
    let logits = linear(ctx, dropped, &cnn.head)?;
    Ok(Outputs {
        embeddings,
        raw,
        logits,
        channel_logits: None,
        generated: None,
    })
}

/// Baseline path: embeddings and speaker logits.
pub fn baseline_forward(
    ctx: &mut Ctx,
    features: Var,
    cnn: &BaselineCnn,
    rng: &mut ChaCha8Rng,
) -> Result<Outputs> {
    let [_, _, t, f] = check_input(ctx.tape, features)?;
    let trace_ok = cnn.blocks.iter().filter(|b| b.pool).count();
    if (t >> trace_ok) == 0 || (f >> trace_ok) == 0 {
        return Err(Error::invalid(
            "forward",
            format!("input ({t}, {f}) does not survive {trace_ok} 2x2 poolings"),
        ));
    }
    d1_forward(ctx, features, cnn, rng)
}

/// CAT path: `G` reshapes each utterance map, `D1` embeds it, and `D2`
/// classifies the channel from behind the reversal layer.
pub fn cat_forward(
    ctx: &mut Ctx,
    features: Var,
    model: &CatModel,
    beta: f64,
    rngs: &mut DropoutRngs,
) -> Result<Outputs> {
    let [m, _, t, f] = check_input(ctx.tape, features)?;
    let seq = ctx.tape.reshape(features, &[m, t, f])?;
    let h0 = lstm_batch(ctx, seq, &model.g.layers[0], None, None)?;
    let h1 = lstm_batch(ctx, h0, &model.g.layers[1], None, None)?;
    let generated = ctx.tape.reshape(h1, &[m, 1, t, f])?;
    let mut out = baseline_forward(ctx, generated, &model.d1, &mut rngs.speaker)?;
    out.generated = Some(generated);
    if let Some(d2) = &model.d2 {
        let tapped = match model.tap {
            D2Tap::Embedding => out.raw,
            D2Tap::Generator => ctx.tape.mean_time(h1)?,
        };
        let reversed = gradient_reversal(ctx.tape, tapped, beta)?;
        let dropped = dropout(ctx.tape, reversed, d2.dropout, ctx.mode, &mut rngs.channel)?;
        let hidden = linear(ctx, dropped, &d2.fc0)?;
        let hidden = ctx.tape.relu(hidden)?;
        out.channel_logits = Some(linear(ctx, hidden, &d2.fc1)?);
    }
    Ok(out)
}

// ---- utterance embeddings -----------------------------------------------------

/// Number of non-overlapping windows covering `frames`.
pub fn segment_count(frames: usize, window: usize) -> usize {
    frames.div_ceil(window).max(1)
}

/// Cuts `[T, F]` into `[S, 1, window, F]`; frame `j` of segment `k` is
/// frame `(k·window + j) mod T`, which wrap-pads short tails from the start.
pub fn segments(features: &Tensor, window: usize) -> Result<Tensor> {
    let (t, f) = match *features.shape() {
        [t, f] if t > 0 => (t, f),
        ref other => {
            return Err(Error::invalid(
                "segments",
                format!("expected [T, F], got {other:?}"),
            ))
        }
    };
    if window == 0 {
        return Err(Error::invalid("segments", "window must be positive"));
    }
    let count = segment_count(t, window);
    let mut data = Vec::with_capacity(count * window * f);
    for k in 0..count {
        for j in 0..window {
            data.extend_from_slice(features.row((k * window + j) % t));
        }
    }
    Tensor::new(vec![count, 1, window, f], data)
}

fn normalize(v: &mut [f64]) -> Result<()> {
    let n = v.iter().map(|x| x * x).sum::<f64>().sqrt();
    if !(n > 0.0) || !n.is_finite() {
        return Err(Error::NonFinite("embedding norm".into()));
    }
    v.iter_mut().for_each(|x| *x /= n);
    Ok(())
}

/// Embeds one utterance: window it, embed each segment, average, normalize.
pub fn utterance_embedding(features: &Tensor, model: &Model, window: usize) -> Result<Vec<f64>> {
    Ok(embed_utterances(model, &[features], window)?.remove(0))
}

/// Batched form of [`utterance_embedding`].
pub fn embed_utterances(
    model: &Model,
    utterances: &[&Tensor],
    window: usize,
) -> Result<Vec<Vec<f64>>> {
    const CHUNK: usize = 128;
    let mut cut = Vec::with_capacity(utterances.len());
    for feats in utterances {
        if feats.shape().get(1) != Some(&model.config.dim) {
            return Err(Error::invalid(
                "embed",
                format!(
                    "features {:?} do not match model dim {}",
                    feats.shape(),
                    model.config.dim
                ),
            ));
        }
        cut.push(segments(feats, window)?);
    }
    let per = window * model.config.dim;
    let mut owner = Vec::new();
    let mut segs = Vec::new();
    for (u, s) in cut.iter().enumerate() {
        for chunk in s.data().chunks(per) {
            owner.push(u);
            segs.push(chunk);
        }
    }
    let d = model.config.embedding_dim;
    let mut sums = vec![vec![0.0; d]; utterances.len()];
    for (batch_owner, batch) in owner.chunks(CHUNK).zip(segs.chunks(CHUNK)) {
        let data: Vec<f64> = batch.concat();
        let x = Tensor::new(vec![batch.len(), 1, window, model.config.dim], data)?;
        let e = model.embed_segments(&x)?;
        for (i, &u) in batch_owner.iter().enumerate() {
            for (acc, v) in sums[u].iter_mut().zip(e.row(i)) {
                *acc += v;
            }
        }
    }
    for s in sums.iter_mut() {
        normalize(s)?;
    }
    Ok(sums)
}

// ---- checkpoints ------------------------------------------------------------------

pub const CHECKPOINT_MAGIC: [u8; 4] = *b"CATC";
pub const CHECKPOINT_VERSION: u32 = 1;

fn ckpt_err(reason: FormatError) -> Error {
    Error::Format {
        kind: "checkpoint",
        reason,
    }
}

/// `CATC`, version, length-prefixed config text, then named tensors.
pub fn encode_checkpoint(config_text: &str, store: &ParamStore) -> Vec<u8> {
    let mut out = Vec::new();
    out.extend_from_slice(&CHECKPOINT_MAGIC);
    out.extend_from_slice(&CHECKPOINT_VERSION.to_le_bytes());
    out.extend_from_slice(&(config_text.len() as u32).to_le_bytes());
    out.extend_from_slice(config_text.as_bytes());
    out.extend_from_slice(&(store.len() as u32).to_le_bytes());
    for (name, param) in store.iter() {
        out.extend_from_slice(&(name.len() as u32).to_le_bytes());
        out.extend_from_slice(name.as_bytes());
        out.extend_from_slice(&(param.value.rank() as u32).to_le_bytes());
        for &d in param.value.shape() {
            out.extend_from_slice(&(d as u32).to_le_bytes());
        }
        for v in param.value.data() {
            out.extend_from_slice(&v.to_le_bytes());
        }
    }
    out
}

struct Reader<'a> {
    bytes: &'a [u8],
    at: usize,
}

impl<'a> Reader<'a> {
    fn take(&mut self, n: usize, what: &'static str) -> Result<&'a [u8]> {
        if self.bytes.len() - self.at < n {
            return Err(ckpt_err(FormatError::Truncated(what)));
        }
        let s = &self.bytes[self.at..self.at + n];
        self.at += n;
        Ok(s)
    }

    fn u32(&mut self, what: &'static str) -> Result<u32> {
        Ok(u32::from_le_bytes(
            self.take(4, what)?.try_into().expect("4 bytes"),
        ))
    }
}

/// Inverse of [`encode_checkpoint`].
pub fn decode_checkpoint(bytes: &[u8]) -> Result<(String, Vec<(String, Tensor)>)> {
    let mut r = Reader { bytes, at: 0 };
    let magic: [u8; 4] = r.take(4, "magic")?.try_into().expect("4 bytes");
    if magic != CHECKPOINT_MAGIC {
        return Err(ckpt_err(FormatError::BadMagic(magic)));
    }
    let version = r.u32("version")?;
    if version != CHECKPOINT_VERSION {
        return Err(ckpt_err(FormatError::Version {
            found: version,
            expected: CHECKPOINT_VERSION,
        }));
    }
    let len = r.u32("config length")? as usize;
    let config = String::from_utf8(r.take(len, "config")?.to_vec())
        .map_err(|_| ckpt_err(FormatError::Malformed("config is not UTF-8".into())))?;
    let count = r.u32("tensor count")? as usize;
    let mut tensors = Vec::with_capacity(count.min(4096));
    for _ in 0..count {
        let n = r.u32("tensor name length")? as usize;
        let name = String::from_utf8(r.take(n, "tensor name")?.to_vec())
            .map_err(|_| ckpt_err(FormatError::Malformed("tensor name is not UTF-8".into())))?;
        let rank = r.u32("tensor rank")? as usize;
        let mut shape = Vec::with_capacity(rank.min(8));
        for _ in 0..rank {
            shape.push(r.u32("tensor extents")? as usize);
        }
        let numel: usize = shape.iter().product();
        let raw = r.take(
            numel
                .checked_mul(8)
                .ok_or_else(|| ckpt_err(FormatError::Truncated("tensor data")))?,
            "tensor data",
        )?;
        let data = raw
            .chunks_exact(8)
            .map(|c| f64::from_le_bytes(c.try_into().expect("8 bytes")))
            .collect();
        let t = Tensor::new(shape, data)
            .map_err(|e| ckpt_err(FormatError::Malformed(format!("{name}: {e}"))))?;
        tensors.push((name, t));
    }
    if r.at != bytes.len() {
        return Err(ckpt_err(FormatError::Malformed(format!(
            "{} trailing bytes",
            bytes.len() - r.at
        ))));
    }
    Ok((config, tensors))
}
