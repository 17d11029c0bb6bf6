//! Neural network layers on top of the tape.
//!
//! Parameters live in a [`ParamStore`]; layers only hold [`ParamId`]
//! handles into it. A forward pass binds every trainable parameter to a
//! tape leaf through a [`Ctx`], which also carries the train/infer mode and
//! collects batch-norm running-statistic updates to apply afterwards.

use indexmap::IndexMap;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::autodiff::{Tape, Tensor, Var};
use crate::error::{Error, Result};

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Mode {
    Train,
    Infer,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub struct ParamId(usize);

#[derive(Clone, Debug, PartialEq)]
pub struct Param {
    pub value: Tensor,
    /// Buffers (batch-norm running statistics) are stored but never bound.
    pub trainable: bool,
}

/// Named, ordered collection of model tensors.
#[derive(Clone, Debug, Default, PartialEq)]
pub struct ParamStore {
    entries: IndexMap<String, Param>,
}

impl ParamStore {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn insert(&mut self, name: impl Into<String>, value: Tensor, trainable: bool) -> ParamId {
        let (idx, _) = self
            .entries
            .insert_full(name.into(), Param { value, trainable });
        ParamId(idx)
    }

    pub fn id(&self, name: &str) -> Option<ParamId> {
        self.entries.get_index_of(name).map(ParamId)
    }

    pub fn name(&self, id: ParamId) -> &str {
        self.entries
            .get_index(id.0)
            .map(|(k, _)| k.as_str())
            .expect("param id")
    }

    pub fn get(&self, id: ParamId) -> &Tensor {
        &self.entries[id.0].value
    }

    pub fn get_mut(&mut self, id: ParamId) -> &mut Tensor {
        &mut self.entries[id.0].value
    }

    pub fn by_name(&self, name: &str) -> Option<&Tensor> {
        self.entries.get(name).map(|p| &p.value)
    }

    pub fn len(&self) -> usize {
        self.entries.len()
    }

    pub fn is_empty(&self) -> bool {
        self.entries.is_empty()
    }

    pub fn ids(&self) -> impl Iterator<Item = ParamId> {
        (0..self.entries.len()).map(ParamId)
    }

    pub fn iter(&self) -> impl Iterator<Item = (&str, &Param)> {
        self.entries.iter().map(|(k, v)| (k.as_str(), v))
    }

    pub fn is_trainable(&self, id: ParamId) -> bool {
        self.entries[id.0].trainable
    }

    /// Total number of trainable scalars.
    pub fn trainable_count(&self) -> usize {
        self.entries
            .values()
            .filter(|p| p.trainable)
            .map(|p| p.value.len())
            .sum()
    }

    /// Tensors whose name starts with `prefix`, in insertion order.
    pub fn with_prefix<'a>(
        &'a self,
        prefix: &'a str,
    ) -> impl Iterator<Item = (&'a str, &'a Tensor)> + 'a {
        self.entries
            .iter()
            .filter(move |(k, _)| k.starts_with(prefix))
            .map(|(k, v)| (k.as_str(), &v.value))
    }
}

/// Deterministic per-name initializer.
///
/// Each parameter draws from its own ChaCha stream keyed by its name, so
/// adding or removing a sub-network never shifts another one's weights.
pub struct Init {
    seed: u64,
}

impl Init {
    pub fn new(seed: u64) -> Self {
        Init { seed }
    }

    pub fn rng_for(&self, name: &str) -> ChaCha8Rng {
        let mut rng = ChaCha8Rng::seed_from_u64(self.seed);
        rng.set_stream(fnv1a(name));
        rng
    }

    /// Uniform in `±1/sqrt(fan_in)`, used for weights and biases alike.
    pub fn fan_in(&self, name: &str, shape: &[usize], fan_in: usize) -> Tensor {
        let bound = 1.0 / (fan_in.max(1) as f64).sqrt();
        let mut rng = self.rng_for(name);
        let n = shape.iter().product();
        Tensor::from_parts(
            shape.to_vec(),
            (0..n).map(|_| rng.random_range(-bound..bound)).collect(),
        )
    }
}

pub(crate) fn fnv1a(s: &str) -> u64 {
    let mut h: u64 = 0xcbf29ce484222325;
    for b in s.bytes() {
        h ^= u64::from(b);
        h = h.wrapping_mul(0x100000001b3);
    }
    h
}

/// Forward-pass context: tape, bound parameters, mode and pending
/// running-statistic updates.
pub struct Ctx<'a> {
    pub tape: &'a mut Tape,
    store: &'a ParamStore,
    vars: Vec<Option<Var>>,
    pub mode: Mode,
    stat_updates: Vec<(ParamId, Tensor)>,
}

impl<'a> Ctx<'a> {
    /// Binds every trainable parameter of `store` as a tape leaf.
    pub fn new(tape: &'a mut Tape, store: &'a ParamStore, mode: Mode) -> Self {
        let vars = store
            .entries
            .values()
            .map(|p| p.trainable.then(|| tape.leaf(p.value.clone())))
            .collect();
        Ctx {
            tape,
            store,
            vars,
            mode,
            stat_updates: Vec::new(),
        }
    }

    pub fn var(&self, id: ParamId) -> Var {
        self.vars[id.0].expect("parameter is not trainable")
    }

    /// Substitutes the leaf used for one parameter (finite-difference checks).
    pub fn rebind(&mut self, id: ParamId, v: Var) {
        self.vars[id.0] = Some(v);
    }

    pub fn store(&self) -> &ParamStore {
        self.store
    }

    /// Parameter handles in store order, paired with their tape leaves.
    pub fn bound(&self) -> Vec<(ParamId, Var)> {
        self.vars
            .iter()
            .enumerate()
            .filter_map(|(i, v)| v.map(|v| (ParamId(i), v)))
            .collect()
    }

    /// Running-statistic updates recorded in training mode.
    pub fn take_stat_updates(&mut self) -> Vec<(ParamId, Tensor)> {
        std::mem::take(&mut self.stat_updates)
    }
}

/// Writes queued running-statistic updates back into the store.
pub fn apply_stat_updates(store: &mut ParamStore, updates: Vec<(ParamId, Tensor)>) {
    for (id, value) in updates {
        *store.get_mut(id) = value;
    }
}

// ---- convolution -----------------------------------------------------------

/// 3×3 convolution, stride 1, zero padding 1.
#[derive(Clone, Debug)]
pub struct Conv2dLayer {
    pub weight: ParamId,
    pub bias: ParamId,
    pub in_channels: usize,
    pub out_channels: usize,
}

impl Conv2dLayer {
    pub fn new(
        store: &mut ParamStore,
        init: &Init,
        name: &str,
        in_channels: usize,
        out_channels: usize,
    ) -> Self {
        let wname = format!("{name}.weight");
        let w = init.fan_in(&wname, &[out_channels, in_channels, 3, 3], in_channels * 9);
        let weight = store.insert(wname, w, true);
        let bname = format!("{name}.bias");
        let b = init.fan_in(&bname, &[out_channels], in_channels * 9);
        let bias = store.insert(bname, b, true);
        Conv2dLayer {
            weight,
            bias,
            in_channels,
            out_channels,
        }
    }
}

pub fn conv2d(ctx: &mut Ctx, input: Var, layer: &Conv2dLayer) -> Result<Var> {
    let (w, b) = (ctx.var(layer.weight), ctx.var(layer.bias));
    ctx.tape.conv2d(input, w, b)
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum PoolMode {
    Max,
    Average,
}

/// 2×2 window, stride 2, floor semantics for odd extents.
pub fn pool2d(tape: &mut Tape, input: Var, mode: PoolMode) -> Result<Var> {
    match mode {
        PoolMode::Max => tape.max_pool2d(input),
        PoolMode::Average => tape.avg_pool2d(input),
    }
}

pub fn global_average_pool(tape: &mut Tape, input: Var) -> Result<Var> {
    tape.global_avg_pool(input)
}

// ---- dense -----------------------------------------------------------------

/// `input · W + b` with `W` stored as `[d_in, d_out]`.
#[derive(Clone, Debug)]
pub struct Linear {
    pub weight: ParamId,
    pub bias: ParamId,
    pub d_in: usize,
    pub d_out: usize,
}

impl Linear {
    pub fn new(store: &mut ParamStore, init: &Init, name: &str, d_in: usize, d_out: usize) -> Self {
        let wname = format!("{name}.weight");
        let w = init.fan_in(&wname, &[d_in, d_out], d_in);
        let weight = store.insert(wname, w, true);
        let bname = format!("{name}.bias");
        let b = init.fan_in(&bname, &[d_out], d_in);
        let bias = store.insert(bname, b, true);
        Linear {
            weight,
            bias,
            d_in,
            d_out,
        }
    }
}

pub fn linear(ctx: &mut Ctx, input: Var, layer: &Linear) -> Result<Var> {
    let (w, b) = (ctx.var(layer.weight), ctx.var(layer.bias));
    let xw = ctx.tape.matmul(input, w)?;
    ctx.tape.add_row_bias(xw, b)
}

// ---- batch norm -------------------------------------------------------------

#[derive(Clone, Debug)]
pub struct BatchNormLayer {
    pub gamma: ParamId,
    pub beta: ParamId,
    pub running_mean: ParamId,
    pub running_var: ParamId,
    /// Weight kept by the running statistics at each update.
    pub momentum: f64,
    pub eps: f64,
}

impl BatchNormLayer {
    pub const MOMENTUM: f64 = 0.9;
    pub const EPS: f64 = 1e-5;

    pub fn new(store: &mut ParamStore, name: &str, channels: usize) -> Self {
        BatchNormLayer {
            gamma: store.insert(format!("{name}.gamma"), Tensor::ones(&[channels]), true),
            beta: store.insert(format!("{name}.beta"), Tensor::zeros(&[channels]), true),
            running_mean: store.insert(
                format!("{name}.running_mean"),
                Tensor::zeros(&[channels]),
                false,
            ),
            running_var: store.insert(
                format!("{name}.running_var"),
                Tensor::ones(&[channels]),
                false,
            ),
            momentum: Self::MOMENTUM,
            eps: Self::EPS,
        }
    }
}

/// Training mode normalizes with batch statistics and queues a running
/// update; inference mode uses the running statistics.
pub fn batchnorm(ctx: &mut Ctx, input: Var, layer: &BatchNormLayer) -> Result<Var> {
    let (g, b) = (ctx.var(layer.gamma), ctx.var(layer.beta));
    match ctx.mode {
        Mode::Train => {
            let (out, stats) = ctx.tape.batch_norm(input, g, b, layer.eps, None)?;
            let stats = stats.expect("training batch norm returns statistics");
            let m = layer.momentum;
            let blend = |old: &Tensor, new: &[f64]| {
                Tensor::vector(
                    old.data()
                        .iter()
                        .zip(new)
                        .map(|(o, n)| m * o + (1.0 - m) * n)
                        .collect(),
                )
            };
            let mean = blend(ctx.store.get(layer.running_mean), &stats.mean);
            let var = blend(ctx.store.get(layer.running_var), &stats.var);
            ctx.stat_updates.push((layer.running_mean, mean));
            ctx.stat_updates.push((layer.running_var, var));
            Ok(out)
        }
        Mode::Infer => {
            let store = ctx.store;
            let (mean, var) = (store.get(layer.running_mean), store.get(layer.running_var));
            let (out, _) =
                ctx.tape
                    .batch_norm(input, g, b, layer.eps, Some((mean.data(), var.data())))?;
            Ok(out)
        }
    }
}

// ---- dropout -----------------------------------------------------------------

/// Inverted dropout: survivors are scaled by `1 / (1 - rate)`.
pub fn dropout<R: Rng>(
    tape: &mut Tape,
    input: Var,
    rate: f64,
    mode: Mode,
    rng: &mut R,
) -> Result<Var> {
    if !(0.0..1.0).contains(&rate) {
        return Err(Error::invalid(
            "dropout",
            format!("rate must lie in [0, 1), got {rate}"),
        ));
    }
    if mode == Mode::Infer || rate == 0.0 {
        return Ok(input);
    }
    let keep = 1.0 / (1.0 - rate);
    let n = tape.value(input).len();
    let mask = (0..n)
        .map(|_| {
            if rng.random::<f64>() < rate {
                0.0
            } else {
                keep
            }
        })
        .collect();
    tape.mul_mask(input, mask)
}

// ---- LSTM ------------------------------------------------------------------

/// One LSTM layer with the four gates fused column-wise in the order
/// input, forget, cell, output: `W` is `[d_in + H, 4H]`.
#[derive(Clone, Debug)]
pub struct LstmLayer {
    pub weight: ParamId,
    pub bias: ParamId,
    pub input_dim: usize,
    pub hidden: usize,
}

impl LstmLayer {
    pub fn new(
        store: &mut ParamStore,
        init: &Init,
        name: &str,
        input_dim: usize,
        hidden: usize,
    ) -> Self {
        let wname = format!("{name}.weight");
        let w = init.fan_in(&wname, &[input_dim + hidden, 4 * hidden], hidden);
        let weight = store.insert(wname, w, true);
        let bname = format!("{name}.bias");
        let b = init.fan_in(&bname, &[4 * hidden], hidden);
        let bias = store.insert(bname, b, true);
        LstmLayer {
            weight,
            bias,
            input_dim,
            hidden,
        }
    }
}

/// Runs the recurrence over `[N, T, d_in]`, returning `[N, T, H]`.
///
/// `h0`/`c0` default to zeros when absent.
pub fn lstm_batch(
    ctx: &mut Ctx,
    input: Var,
    layer: &LstmLayer,
    h0: Option<Var>,
    c0: Option<Var>,
) -> Result<Var> {
    let shape = ctx.tape.shape(input).to_vec();
    if shape.len() != 3 || shape[2] != layer.input_dim {
        return Err(Error::invalid(
            "lstm",
            format!("expected [N, T, {}], got {shape:?}", layer.input_dim),
        ));
    }
    let (n, steps, hid) = (shape[0], shape[1], layer.hidden);
    let zero = |tape: &mut Tape| tape.leaf(Tensor::zeros(&[n, hid]));
    let mut h = match h0 {
        Some(v) => v,
        None => zero(ctx.tape),
    };
    let mut c = match c0 {
        Some(v) => v,
        None => zero(ctx.tape),
    };
    for v in [h, c] {
        if ctx.tape.shape(v) != [n, hid] {
            return Err(Error::ShapeMismatch {
                op: "lstm initial state",
                left: vec![n, hid],
                right: ctx.tape.shape(v).to_vec(),
            });
        }
    }
    let (w, b) = (ctx.var(layer.weight), ctx.var(layer.bias));
    let mut outputs = Vec::with_capacity(steps);
    for t in 0..steps {
        let tape = &mut *ctx.tape;
        let x_t = tape.select_time(input, t)?;
        let xh = tape.concat_cols(&[x_t, h])?;
        let z = tape.matmul(xh, w)?;
        let z = tape.add_row_bias(z, b)?;
        let zi = tape.slice_cols(z, 0, hid)?;
        let zf = tape.slice_cols(z, hid, hid)?;
        let zg = tape.slice_cols(z, 2 * hid, hid)?;
        let zo = tape.slice_cols(z, 3 * hid, hid)?;
        let i = tape.sigmoid(zi)?;
        let f = tape.sigmoid(zf)?;
        let g = tape.tanh(zg)?;
        let o = tape.sigmoid(zo)?;
        let keep = tape.mul(f, c)?;
        let write = tape.mul(i, g)?;
        c = tape.add(keep, write)?;
        let squashed = tape.tanh(c)?;
        h = tape.mul(o, squashed)?;
        outputs.push(h);
    }
    ctx.tape.stack_time(&outputs)
}

/// Single-sequence form: `[T, d_in]` in, `[T, H]` out.
pub fn lstm_sequence(
    ctx: &mut Ctx,
    input: Var,
    layer: &LstmLayer,
    h0: Option<Var>,
    c0: Option<Var>,
) -> Result<Var> {
    let shape = ctx.tape.shape(input).to_vec();
    if shape.len() != 2 || shape[0] == 0 {
        return Err(Error::invalid(
            "lstm",
            format!("expected [T, d_in], got {shape:?}"),
        ));
    }
    let seq = ctx.tape.reshape(input, &[1, shape[0], shape[1]])?;
    let h0 = match h0 {
        Some(v) => Some(ctx.tape.reshape(v, &[1, layer.hidden])?),
        None => None,
    };
    let c0 = match c0 {
        Some(v) => Some(ctx.tape.reshape(v, &[1, layer.hidden])?),
        None => None,
    };
    let out = lstm_batch(ctx, seq, layer, h0, c0)?;
    ctx.tape.reshape(out, &[shape[0], layer.hidden])
}

// ---- gradient reversal ---------------------------------------------------------

/// Identity forward; the backward pass multiplies the upstream gradient by `-beta`.
pub fn gradient_reversal(tape: &mut Tape, input: Var, beta: f64) -> Result<Var> {
    tape.grad_reverse(input, beta)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::autodiff::gradcheck;

    fn t(shape: &[usize], data: &[f64]) -> Tensor {
        Tensor::new(shape.to_vec(), data.to_vec()).unwrap()
    }

    fn random(shape: &[usize], seed: u64) -> Tensor {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let n = shape.iter().product();
        Tensor::new(
            shape.to_vec(),
            (0..n).map(|_| rng.random_range(-1.0..1.0)).collect(),
        )
        .unwrap()
    }

    fn conv_with(kernel: &[f64], input: Tensor) -> Tensor {
        let mut store = ParamStore::new();
        let layer = Conv2dLayer::new(&mut store, &Init::new(0), "c", 1, 1);
        *store.get_mut(layer.weight) = t(&[1, 1, 3, 3], kernel);
        *store.get_mut(layer.bias) = Tensor::zeros(&[1]);
        let mut tape = Tape::new();
        let mut ctx = Ctx::new(&mut tape, &store, Mode::Infer);
        let x = ctx.tape.leaf(input);
        let y = conv2d(&mut ctx, x, &layer).unwrap();
        tape.value(y).clone()
    }

    #[test]
    fn conv_of_ones_counts_overlap() {
        let y = conv_with(&[1.0; 9], Tensor::ones(&[1, 1, 3, 3]));
        assert_eq!(y.data(), &[4.0, 6.0, 4.0, 6.0, 9.0, 6.0, 4.0, 6.0, 4.0]);
    }

    #[test]
    fn centered_delta_kernel_is_identity() {
        let x = random(&[1, 1, 4, 5], 9);
        let mut k = [0.0; 9];
        k[4] = 1.0;
        assert_eq!(conv_with(&k, x.clone()), x);
    }

    #[test]
    fn conv_preserves_spatial_shape_and_checks_channels() {
        for (h, w) in [(1, 1), (1, 7), (5, 2), (6, 6)] {
            let y = conv_with(&[0.5; 9], Tensor::ones(&[2, 1, h, w]));
            assert_eq!(y.shape(), &[2, 1, h, w]);
        }
        let mut store = ParamStore::new();
        let layer = Conv2dLayer::new(&mut store, &Init::new(0), "c", 2, 3);
        let mut tape = Tape::new();
        let mut ctx = Ctx::new(&mut tape, &store, Mode::Infer);
        let x = ctx.tape.leaf(Tensor::ones(&[1, 1, 4, 4]));
        assert!(conv2d(&mut ctx, x, &layer).is_err());
    }

    #[test]
    fn pooling_examples() {
        let mut tape = Tape::new();
        let x = tape.leaf(t(&[1, 1, 2, 2], &[1.0, 2.0, 3.0, 4.0]));
        let m = pool2d(&mut tape, x, PoolMode::Max).unwrap();
        let a = pool2d(&mut tape, x, PoolMode::Average).unwrap();
        assert_eq!(tape.value(m).data(), &[4.0]);
        assert_eq!(tape.value(a).data(), &[2.5]);

        let odd = tape.leaf(Tensor::ones(&[1, 2, 5, 5]));
        let p = pool2d(&mut tape, odd, PoolMode::Max).unwrap();
        assert_eq!(tape.shape(p), &[1, 2, 2, 2]);

        let thin = tape.leaf(Tensor::ones(&[1, 1, 1, 4]));
        assert!(pool2d(&mut tape, thin, PoolMode::Max).is_err());
    }

    #[test]
    fn five_poolings_of_full_geometry() {
        let mut tape = Tape::new();
        let mut x = tape.leaf(Tensor::zeros(&[1, 1, 500, 64]));
        let mut trace = Vec::new();
        for _ in 0..5 {
            x = pool2d(&mut tape, x, PoolMode::Max).unwrap();
            trace.push((tape.shape(x)[2], tape.shape(x)[3]));
        }
        assert_eq!(trace, vec![(250, 32), (125, 16), (62, 8), (31, 4), (15, 2)]);
    }

    #[test]
    fn max_pool_routes_gradient_to_first_maximum() {
        let mut tape = Tape::new();
        let x = tape.leaf(t(&[1, 1, 2, 2], &[3.0, 3.0, 1.0, 3.0]));
        let p = pool2d(&mut tape, x, PoolMode::Max).unwrap();
        let s = tape.sum(p).unwrap();
        let g = tape.backward(s).unwrap().get(x);
        assert_eq!(g.data(), &[1.0, 0.0, 0.0, 0.0]);
    }

    #[test]
    fn global_average_pool_examples() {
        let mut tape = Tape::new();
        let c = tape.leaf(Tensor::full(&[2, 3, 4, 5], 1.75));
        let y = global_average_pool(&mut tape, c).unwrap();
        assert_eq!(tape.value(y).data(), &[1.75; 6]);

        let x = tape.leaf(t(&[1, 1, 2, 2], &[1.0, 3.0, 5.0, 7.0]));
        let y = global_average_pool(&mut tape, x).unwrap();
        assert_eq!(tape.value(y).data(), &[4.0]);
        let s = tape.sum(y).unwrap();
        assert_eq!(tape.backward(s).unwrap().get(x).data(), &[0.25; 4]);
    }

    #[test]
    fn linear_examples() {
        let mut store = ParamStore::new();
        let layer = Linear::new(&mut store, &Init::new(1), "fc", 2, 2);
        *store.get_mut(layer.weight) = t(&[2, 2], &[1.0, 0.0, 0.0, 1.0]);
        *store.get_mut(layer.bias) = Tensor::zeros(&[2]);
        let x = t(&[3, 2], &[1.0, -2.0, 0.5, 4.0, 3.0, 3.0]);
        let mut tape = Tape::new();
        let mut ctx = Ctx::new(&mut tape, &store, Mode::Infer);
        let xv = ctx.tape.leaf(x.clone());
        let y = linear(&mut ctx, xv, &layer).unwrap();
        assert_eq!(tape.value(y), &x);

        *store.get_mut(layer.weight) = Tensor::zeros(&[2, 2]);
        *store.get_mut(layer.bias) = t(&[2], &[1.0, 2.0]);
        let mut tape = Tape::new();
        let mut ctx = Ctx::new(&mut tape, &store, Mode::Infer);
        let xv = ctx.tape.leaf(x);
        let y = linear(&mut ctx, xv, &layer).unwrap();
        assert_eq!(tape.value(y).data(), &[1.0, 2.0, 1.0, 2.0, 1.0, 2.0]);
    }

    #[test]
    fn linear_matches_explicit_dot_products() {
        let mut store = ParamStore::new();
        let layer = Linear::new(&mut store, &Init::new(4), "fc", 3, 2);
        *store.get_mut(layer.bias) = t(&[2], &[0.25, -0.5]);
        let x = random(&[4, 3], 11);
        let mut tape = Tape::new();
        let mut ctx = Ctx::new(&mut tape, &store, Mode::Infer);
        let xv = ctx.tape.leaf(x.clone());
        let y = linear(&mut ctx, xv, &layer).unwrap();
        let w = store.get(layer.weight);
        for i in 0..4 {
            for j in 0..2 {
                let expect: f64 = (0..3)
                    .map(|k| x.data()[i * 3 + k] * w.data()[k * 2 + j])
                    .sum::<f64>()
                    + store.get(layer.bias).data()[j];
                assert!((tape.value(y).data()[i * 2 + j] - expect).abs() < 1e-12);
            }
        }
    }

    fn bn_store(channels: usize) -> (ParamStore, BatchNormLayer) {
        let mut store = ParamStore::new();
        let layer = BatchNormLayer::new(&mut store, "bn", channels);
        (store, layer)
    }

    #[test]
    fn batchnorm_train_standardizes() {
        let (store, mut layer) = bn_store(1);
        layer.eps = 0.0;
        let mut tape = Tape::new();
        let mut ctx = Ctx::new(&mut tape, &store, Mode::Train);
        let x = ctx.tape.leaf(t(&[2, 1], &[1.0, 3.0]));
        let y = batchnorm(&mut ctx, x, &layer).unwrap();
        let updates = ctx.take_stat_updates();
        assert_eq!(tape.value(y).data(), &[-1.0, 1.0]);
        // running mean: 0.9·0 + 0.1·2; running var: 0.9·1 + 0.1·2 (unbiased)
        assert!((updates[0].1.data()[0] - 0.2).abs() < 1e-12);
        assert!((updates[1].1.data()[0] - 1.1).abs() < 1e-12);
    }

    #[test]
    fn batchnorm_zero_scale_and_infer_identity() {
        let (mut store, layer) = bn_store(2);
        *store.get_mut(layer.gamma) = Tensor::zeros(&[2]);
        *store.get_mut(layer.beta) = t(&[2], &[0.5, -1.0]);
        let x = random(&[3, 2, 2, 2], 5);
        let mut tape = Tape::new();
        let mut ctx = Ctx::new(&mut tape, &store, Mode::Train);
        let xv = ctx.tape.leaf(x.clone());
        let y = batchnorm(&mut ctx, xv, &layer).unwrap();
        for (i, v) in tape.value(y).data().iter().enumerate() {
            let ch = (i / 4) % 2;
            assert_eq!(*v, [0.5, -1.0][ch]);
        }

        let (store, layer) = bn_store(2);
        let mut tape = Tape::new();
        let mut ctx = Ctx::new(&mut tape, &store, Mode::Infer);
        let xv = ctx.tape.leaf(x.clone());
        let y = batchnorm(&mut ctx, xv, &layer).unwrap();
        assert!(ctx.take_stat_updates().is_empty());
        let scale = 1.0 / (1.0f64 + BatchNormLayer::EPS).sqrt();
        for (a, b) in tape.value(y).data().iter().zip(x.data()) {
            assert!((a - b * scale).abs() < 1e-15);
        }
    }

    #[test]
    fn batchnorm_train_needs_two_samples() {
        let (store, layer) = bn_store(1);
        let mut tape = Tape::new();
        let mut ctx = Ctx::new(&mut tape, &store, Mode::Train);
        let x = ctx.tape.leaf(t(&[1, 1], &[1.0]));
        assert!(batchnorm(&mut ctx, x, &layer).is_err());
    }

    #[test]
    fn dropout_modes() {
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        let mut tape = Tape::new();
        let x = tape.leaf(Tensor::ones(&[100]));
        assert_eq!(
            dropout(&mut tape, x, 0.0, Mode::Train, &mut rng).unwrap(),
            x
        );
        assert_eq!(
            dropout(&mut tape, x, 0.9, Mode::Infer, &mut rng).unwrap(),
            x
        );
        assert!(dropout(&mut tape, x, 1.0, Mode::Train, &mut rng).is_err());
        assert!(dropout(&mut tape, x, -0.1, Mode::Train, &mut rng).is_err());
    }

    #[test]
    fn dropout_survivor_fraction_within_three_sigma() {
        let n = 20_000;
        let mut rng = ChaCha8Rng::seed_from_u64(42);
        let mut tape = Tape::new();
        let x = tape.leaf(Tensor::ones(&[n]));
        let y = dropout(&mut tape, x, 0.5, Mode::Train, &mut rng).unwrap();
        let kept = tape.value(y).data().iter().filter(|&&v| v != 0.0).count() as f64;
        let sigma = (n as f64 * 0.25).sqrt();
        assert!((kept - 0.5 * n as f64).abs() <= 3.0 * sigma, "{kept}");
        assert!(tape.value(y).data().iter().all(|&v| v == 0.0 || v == 2.0));
    }

    fn lstm_store(d_in: usize, hidden: usize, seed: u64) -> (ParamStore, LstmLayer) {
        let mut store = ParamStore::new();
        let layer = LstmLayer::new(&mut store, &Init::new(seed), "lstm", d_in, hidden);
        (store, layer)
    }

    fn run_lstm(store: &ParamStore, layer: &LstmLayer, x: &Tensor) -> Tensor {
        let mut tape = Tape::new();
        let mut ctx = Ctx::new(&mut tape, store, Mode::Train);
        let xv = ctx.tape.leaf(x.clone());
        let y = lstm_sequence(&mut ctx, xv, layer, None, None).unwrap();
        tape.value(y).clone()
    }

    /// Scalar per-gate recurrence used as an oracle.
    fn lstm_oracle(w: &Tensor, b: &Tensor, x: &Tensor, hidden: usize) -> Vec<f64> {
        let (steps, d) = (x.shape()[0], x.shape()[1]);
        let cols = 4 * hidden;
        let (mut h, mut c) = (vec![0.0; hidden], vec![0.0; hidden]);
        let mut out = Vec::new();
        for t in 0..steps {
            let input: Vec<f64> = x.row(t).iter().chain(h.iter()).copied().collect();
            let gate = |g: usize, j: usize| -> f64 {
                let col = g * hidden + j;
                b.data()[col]
                    + (0..d + hidden)
                        .map(|k| input[k] * w.data()[k * cols + col])
                        .sum::<f64>()
            };
            let mut new_h = vec![0.0; hidden];
            for j in 0..hidden {
                let i = crate::autodiff::sigmoid(gate(0, j));
                let f = crate::autodiff::sigmoid(gate(1, j));
                let g = gate(2, j).tanh();
                let o = crate::autodiff::sigmoid(gate(3, j));
                c[j] = f * c[j] + i * g;
                new_h[j] = o * c[j].tanh();
            }
            h = new_h;
            out.extend_from_slice(&h);
        }
        out
    }

    #[test]
    fn lstm_with_zero_weights_outputs_zero() {
        let (mut store, layer) = lstm_store(3, 4, 0);
        *store.get_mut(layer.weight) = Tensor::zeros(&[7, 16]);
        *store.get_mut(layer.bias) = Tensor::zeros(&[16]);
        let y = run_lstm(&store, &layer, &random(&[5, 3], 1));
        assert_eq!(y.shape(), &[5, 4]);
        assert!(y.data().iter().all(|&v| v == 0.0));
    }

    #[test]
    fn lstm_single_step_and_unrolled_match_oracle() {
        let (store, layer) = lstm_store(3, 2, 7);
        let x1 = random(&[1, 3], 2);
        let y1 = run_lstm(&store, &layer, &x1);
        let w = store.get(layer.weight);
        let b = store.get(layer.bias);
        for (a, e) in y1.data().iter().zip(lstm_oracle(w, b, &x1, 2)) {
            assert!((a - e).abs() < 1e-14);
        }
        let x3 = random(&[3, 3], 3);
        let y3 = run_lstm(&store, &layer, &x3);
        for (a, e) in y3.data().iter().zip(lstm_oracle(w, b, &x3, 2)) {
            assert!((a - e).abs() < 1e-14);
        }
    }

    #[test]
    fn lstm_rejects_wrong_input_width() {
        let (store, layer) = lstm_store(3, 2, 7);
        let mut tape = Tape::new();
        let mut ctx = Ctx::new(&mut tape, &store, Mode::Train);
        let xv = ctx.tape.leaf(Tensor::zeros(&[4, 5]));
        assert!(lstm_sequence(&mut ctx, xv, &layer, None, None).is_err());
    }

    #[test]
    fn gradient_reversal_semantics() {
        for beta in [0.0, 0.5, 1.0, 2.0] {
            let x = random(&[3, 4], 8);
            let upstream = random(&[3, 4], 9);
            let mut tape = Tape::new();
            let xv = tape.leaf(x.clone());
            let r = gradient_reversal(&mut tape, xv, beta).unwrap();
            assert!(tape.value(r).bit_eq(&x));
            let u = tape.leaf(upstream.clone());
            let prod = tape.mul(r, u).unwrap();
            let s = tape.sum(prod).unwrap();
            let g = tape.backward(s).unwrap().get(xv);
            for (gv, uv) in g.data().iter().zip(upstream.data()) {
                assert_eq!(*gv, -beta * uv);
            }
        }
        let mut tape = Tape::new();
        let xv = tape.leaf(Tensor::ones(&[2]));
        assert!(gradient_reversal(&mut tape, xv, -1.0).is_err());
    }

    #[test]
    fn per_name_init_is_stable() {
        let init = Init::new(5);
        let a = init.fan_in("g.l0.weight", &[4, 4], 4);
        let _ = init.fan_in("d2.fc0.weight", &[4, 4], 4);
        assert_eq!(a, init.fan_in("g.l0.weight", &[4, 4], 4));
        assert_ne!(a, init.fan_in("g.l1.weight", &[4, 4], 4));
        let bound = (6.0f64 / 8.0).sqrt();
        assert!(a.data().iter().all(|v| v.abs() <= bound));
    }

    #[test]
    fn layers_pass_gradcheck() {
        // conv + batch norm + relu + max pool on a small map
        let mut store = ParamStore::new();
        let init = Init::new(3);
        let conv = Conv2dLayer::new(&mut store, &init, "c", 2, 3);
        let bn = BatchNormLayer::new(&mut store, "bn", 3);
        let x = random(&[2, 2, 5, 4], 21);
        let err = gradcheck(
            |tape, xv| {
                let mut ctx = Ctx::new(tape, &store, Mode::Train);
                let y = conv2d(&mut ctx, xv, &conv)?;
                let y = batchnorm(&mut ctx, y, &bn)?;
                let y = ctx.tape.relu(y)?;
                let y = pool2d(ctx.tape, y, PoolMode::Max)?;
                let y = global_average_pool(ctx.tape, y)?;
                let y = ctx.tape.mul(y, y)?;
                ctx.tape.sum(y)
            },
            &x,
            1e-5,
        )
        .unwrap();
        assert!(err <= 1e-4, "{err}");
    }
}
