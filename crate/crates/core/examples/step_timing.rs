//! Times one forward/backward pass of the desk-scale training step.

use std::time::Instant;

use tnet::autograd::Tape;
use tnet::losses::{total_loss, LossConfig, PerceptualExtractor};
use tnet::stack::{StackConfig, StackTNet};
use tnet::tensor::Tensor;
use tnet::tnet::TNetConfig;

fn main() -> tnet::Result<()> {
    let batch: usize = std::env::args().nth(1).and_then(|s| s.parse().ok()).unwrap_or(4);
    let size: usize = std::env::args().nth(2).and_then(|s| s.parse().ok()).unwrap_or(64);
    let stages = 2;
    let model = StackTNet::<f32>::build(TNetConfig::default(), StackConfig { stages, share_parameters: true }, 0)?;
    let loss_cfg = LossConfig { stages, ..LossConfig::default() };
    let extractor = PerceptualExtractor::<f32>::new(&loss_cfg.extractor)?;
    println!("parameters: {}", model.param_count());
    let hazy = Tensor::from_fn(&[batch, 3, size, size], |i| ((i * 31) % 97) as f32 / 48.5 - 1.0);
    let clean = Tensor::from_fn(&[batch, 3, size, size], |i| ((i * 17) % 89) as f32 / 44.5 - 1.0);
    for _ in 0..3 {
        let t0 = Instant::now();
        let mut tape = Tape::new();
        let p = tape.bind(&model.params, true);
        let ep = extractor.bind(&mut tape);
        let x = tape.constant(hazy.clone());
        let gt = tape.constant(clean.clone());
        let out = model.forward(&mut tape, &p, x, stages)?;
        let t1 = Instant::now();
        let terms = total_loss(&mut tape, &extractor, &ep, &out, gt, &loss_cfg)?;
        let t2 = Instant::now();
        let grads = tape.backward(terms.total)?;
        let t3 = Instant::now();
        drop(grads);
        println!(
            "forward {:.3}s  loss {:.3}s  backward {:.3}s  total {:.3}s  ({:.3}s/sample)",
            (t1 - t0).as_secs_f64(),
            (t2 - t1).as_secs_f64(),
            (t3 - t2).as_secs_f64(),
            (t3 - t0).as_secs_f64(),
            (t3 - t0).as_secs_f64() / batch as f64
        );
    }
    Ok(())
}
