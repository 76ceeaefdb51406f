//! Reverse-mode gradients of a small convolutional expression, compared
//! against central finite differences.
//!
//! `cargo run -p msl-tensor --example autodiff`

use msl_tensor::gradcheck::grad_check;
use msl_tensor::{Graph, Tensor};

fn main() -> msl_tensor::Result<()> {
    // y = sum(relu(conv(x, w) + b)^2)
    let x = Tensor::from_fn(vec![1, 6, 6], |i| ((i as f64) * 0.37).sin());
    let w = Tensor::from_fn(vec![2, 1, 3, 3], |i| ((i as f64) * 0.71).cos() * 0.5);

    let g = Graph::<f64>::new();
    let xv = g.param(x.clone());
    let wv = g.param(w.clone());
    let y = g.conv2d(xv, wv, None, 1, 1)?;
    let y = g.relu(y)?;
    let loss = g.sum(g.square(y)?)?;
    println!("loss = {:.6}", g.value(loss).item());

    let mut grads = g.backward(loss)?;
    let dw = grads.take(wv).expect("w is a parameter");
    println!("dL/dw shape {:?}, first entries {:?}", dw.shape(), &dw.data()[..4]);

    let err = grad_check(
        |g, w| {
            let x = g.constant(x.clone());
            let y = g.relu(g.conv2d(x, w, None, 1, 1)?)?;
            g.sum(g.square(y)?)
        },
        &w,
        1e-6,
    )?;
    println!("max relative error vs finite differences: {err:.2e}");
    Ok(())
}
