use std::time::Instant;

use segagg_core::model::{Head, Model, ModelConfig};
use segagg_core::numerics::{self as nx, Mode, Tensor};

fn main() {
    let cfg = ModelConfig::desk(20);
    let m = Model::build(&cfg, 1).unwrap();
    for (batch, len) in [(16usize, 6561usize), (64, 2187)] {
        let x = Tensor::new((0..batch * len).map(|i| (i as f64 * 0.013).sin()).collect(), &[batch, 1, len]).unwrap();
        let labels: Vec<usize> = (0..batch).map(|i| i % 20).collect();
        let t = Instant::now();
        let e = m.forward_embedding(&x, Mode::Train).unwrap();
        let fwd = t.elapsed();
        let loss = nx::softmax_cce(&m.forward_logits(&e, Head::Aggregate).unwrap(), &labels).unwrap();
        loss.backward().unwrap();
        println!("batch {batch} x {len}: forward {:?}, total {:?}", fwd, t.elapsed());
    }
}
