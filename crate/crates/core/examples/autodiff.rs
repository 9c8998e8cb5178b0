//! Reverse-mode differentiation on the tape, checked against finite differences.
//!
//! `cargo run --example autodiff`

use harvim::autodiff::gradcheck::{finite_diff_grad, relative_error};
use harvim::{backward, grad, SeededRng, Tape, Tensor, Var};

/// `f(w) = sum(tanh(x·w)²)` for a fixed batch `x`.
fn loss(x: &Tensor<f64>, w: &Var<f64>) -> harvim::Result<Var<f64>> {
    Var::constant(x.clone()).matmul(w)?.tanh()?.square()?.sum()
}

fn main() -> harvim::Result<()> {
    let mut rng = SeededRng::new(0);
    let x: Tensor<f64> = rng.normal_tensor([4, 3], 1.0);
    let w0: Tensor<f64> = rng.normal_tensor([3, 2], 0.5);

    let tape = Tape::new();
    let w = tape.leaf(w0.clone());
    let f = loss(&x, &w)?;
    let g = backward(&f)?.get(&w).cloned().expect("w reaches the loss");
    println!("f(w) = {:.6}", f.item()?);
    println!("df/dw = {:?}", g.data());

    let fd = finite_diff_grad(
        |w| loss(&x, &Var::constant(w.clone()))?.item(),
        &w0,
        1e-6,
    )?;
    println!("relative error vs central differences: {:.2e}", relative_error(g.data(), fd.data()));

    // second order: differentiate the gradient norm again
    let tape = Tape::new();
    let w = tape.leaf(w0);
    let gw = grad(&loss(&x, &w)?, &[&w], true)?.remove(0);
    let hvp = grad(&gw.square()?.sum()?, &[&w], false)?.remove(0);
    println!("d|df/dw|²/dw = {:?}", hvp.value().data());
    Ok(())
}
