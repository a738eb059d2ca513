//! The tape-based autodiff engine without the few-shot machinery: fit a
//! two-layer network to a toy regression target with Adam.
//!
//! ```text
//! cargo run --release --example autodiff_tape
//! ```

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use ulda::tensor::{Adam, ParamStore, Tape, Tensor};

fn main() -> ulda::Result<()> {
    let mut rng = ChaCha8Rng::seed_from_u64(0);
    let n = 64;
    let xs: Vec<f64> = (0..n).map(|_| rng.random_range(-2.0..2.0)).collect();
    let ys: Vec<f64> = xs.iter().map(|x| (1.5 * x).sin()).collect();

    let mut rand_tensor = |shape: &[usize], scale: f64| {
        let len = shape.iter().product();
        Tensor::new(
            shape.to_vec(),
            (0..len).map(|_| rng.random_range(-scale..scale)).collect(),
        )
    };
    let mut store = ParamStore::new();
    let w1 = store.add("w1", rand_tensor(&[16, 1], 1.0)?)?;
    let b1 = store.add("b1", rand_tensor(&[16], 0.5)?)?;
    let w2 = store.add("w2", rand_tensor(&[1, 16], 0.3)?)?;
    let b2 = store.add("b2", Tensor::new(vec![1], vec![0.0])?)?;

    let x = Tensor::new(vec![n, 1], xs)?;
    let target = Tensor::new(vec![n, 1], ys)?;
    let adam = Adam::new(0.02);
    for step in 0..=600 {
        let mut tape = Tape::new();
        let xv = tape.constant(x.clone())?;
        let tv = tape.constant(target.clone())?;
        let (w1v, b1v) = (tape.param(&store, w1)?, tape.param(&store, b1)?);
        let (w2v, b2v) = (tape.param(&store, w2)?, tape.param(&store, b2)?);
        let h = tape.linear(xv, w1v, b1v)?;
        let h = tape.relu(h)?;
        let pred = tape.linear(h, w2v, b2v)?;
        // mean squared error as the squared distance of the residual row from zero
        let residual = tape.sub(pred, tv)?;
        let row = tape.reshape(residual, &[1, n])?;
        let zero = tape.constant(Tensor::new(vec![1, n], vec![0.0; n])?)?;
        let sse = tape.sq_dist(row, zero)?;
        let mse = tape.scale(sse, 1.0 / n as f64)?;

        store.zero_grad();
        tape.backward(mse, &mut store)?;
        adam.step(&mut store)?;
        if step % 100 == 0 {
            println!("step {step:>3}  mse {:.5}", tape.value(mse).item());
        }
    }
    Ok(())
}
