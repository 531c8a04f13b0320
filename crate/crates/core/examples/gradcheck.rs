//! Compares reverse-mode gradients of a small conv net against central
//! differences, in f64.

use ticketlab::autodiff::Graph;
use ticketlab::tensor::Tensor;

fn main() -> ticketlab::Result<()> {
    // Off-lattice values keep pre-activations away from the ReLU kink.
    let x = Tensor::<f64>::from_fn(&[2, 1, 6, 6], |i| (1.7 * i as f64).sin() * 0.6);
    let w = Tensor::<f64>::from_fn(&[3, 1, 3, 3], |i| (0.9 * i as f64 + 0.3).cos() * 0.5);
    let labels = [1usize, 2];

    let loss_of = |w: &Tensor<f64>| -> ticketlab::Result<(f64, Option<Tensor<f64>>)> {
        let mut g = Graph::new();
        let xv = g.constant(x.clone());
        let wv = g.input(w.clone(), true);
        let h = g.conv2d(xv, wv, None, 1, 1)?;
        let h = g.relu(h)?;
        let h = g.global_avg_pool(h)?;
        let loss = g.softmax_cross_entropy(h, &labels)?;
        let value = g.value(loss).item()?;
        let grads = g.backward(loss)?;
        Ok((value, grads.wrt(wv).cloned()))
    };

    let (loss, grad) = loss_of(&w)?;
    let grad = grad.expect("weight gradient");
    let h = 1e-5;
    let mut worst: f64 = 0.0;
    for i in 0..w.numel() {
        let mut plus = w.clone();
        plus.data_mut()[i] += h;
        let mut minus = w.clone();
        minus.data_mut()[i] -= h;
        let fd = (loss_of(&plus)?.0 - loss_of(&minus)?.0) / (2.0 * h);
        worst = worst.max((fd - grad.data()[i]).abs());
    }
    println!("loss {loss:.6}, {} weights, max |analytic - numeric| = {worst:.2e}", w.numel());
    Ok(())
}
