//! Differentiate a small conv net with the tape and compare every gradient
//! entry with a central difference.

use fairdetect::graph::Graph;
use fairdetect::{Result, Tensor};

fn loss(x: &Tensor, k: &Tensor, w: &Tensor, b: &Tensor, labels: &[usize]) -> Result<(f64, Vec<Tensor>)> {
    let mut g = Graph::new();
    let xv = g.constant(x.clone());
    let kv = g.param(k.clone());
    let wv = g.param(w.clone());
    let bv = g.param(b.clone());
    let h = g.conv2d(xv, kv, 1)?;
    let h = g.relu(h)?;
    let pooled = g.global_avg_pool(h)?;
    let logits = g.dense(pooled, wv, bv)?;
    let ce = g.cross_entropy(logits, labels)?;
    let value = g.value(ce).item()?;
    let grads = g.backward(ce)?;
    Ok((value, vec![grads.get(kv), grads.get(wv), grads.get(bv)]))
}

fn main() -> Result<()> {
    let ramp = |n: usize, a: f64| (0..n).map(|i| (i as f64 * a).sin()).collect::<Vec<f64>>();
    let x = Tensor::new(vec![2, 1, 5, 5], ramp(50, 0.37))?;
    let mut params = [
        Tensor::new(vec![3, 1, 3, 3], ramp(27, 0.71))?,
        Tensor::new(vec![2, 3], ramp(6, 1.3))?,
        Tensor::new(vec![2], vec![0.1, -0.2])?,
    ];
    let labels = [0, 1];
    let (value, analytic) = loss(&x, &params[0], &params[1], &params[2], &labels)?;
    println!("loss {value:.6}");

    let h = 1e-5;
    let mut worst: f64 = 0.0;
    for t in 0..params.len() {
        for i in 0..params[t].len() {
            let orig = params[t].data()[i];
            params[t].data_mut()[i] = orig + h;
            let up = loss(&x, &params[0], &params[1], &params[2], &labels)?.0;
            params[t].data_mut()[i] = orig - h;
            let down = loss(&x, &params[0], &params[1], &params[2], &labels)?.0;
            params[t].data_mut()[i] = orig;
            let fd = (up - down) / (2.0 * h);
            let a = analytic[t].data()[i];
            worst = worst.max((a - fd).abs() / a.abs().max(fd.abs()).max(1e-6));
        }
    }
    println!("max relative error against finite differences: {worst:.2e}");
    Ok(())
}
