//! Checks tape gradients of a convolution and an LSTM against central
//! differences.
//!
//!     cargo run --release --example gradcheck

use cat_speaker::autodiff::gradcheck;
use cat_speaker::layers::{lstm_batch, Ctx, Init, LstmLayer, Mode, ParamStore};
use cat_speaker::{Result, Tensor};

fn ramp(shape: &[usize]) -> Tensor {
    let n: usize = shape.iter().product();
    Tensor::new(
        shape.to_vec(),
        (0..n).map(|i| ((i * 37 % 11) as f64 - 5.0) / 5.0).collect(),
    )
    .unwrap()
}

fn main() -> Result<()> {
    let x = ramp(&[2, 1, 6, 4]);
    let w = ramp(&[3, 1, 3, 3]);
    let conv = gradcheck(
        |t, x| {
            let (w, b) = (t.leaf(w.clone()), t.leaf(Tensor::zeros(&[3])));
            let y = t.conv2d(x, w, b)?;
            let y = t.tanh(y)?;
            t.sum(y)
        },
        &x,
        1e-6,
    )?;
    println!("conv2d + tanh: max rel err {conv:.2e}");

    let seq = ramp(&[2, 5, 3]);
    let lstm = gradcheck(
        |t, x| {
            let mut store = ParamStore::new();
            let layer = LstmLayer::new(&mut store, &Init::new(0), "lstm", 3, 4);
            let mut ctx = Ctx::new(t, &store, Mode::Train);
            let h = lstm_batch(&mut ctx, x, &layer, None, None)?;
            let h = ctx.tape.mul(h, h)?;
            ctx.tape.sum(h)
        },
        &seq,
        1e-6,
    )?;
    println!("lstm: max rel err {lstm:.2e}");
    Ok(())
}
