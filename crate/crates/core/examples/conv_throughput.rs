//! Forward/backward conv3d throughput at the default model's largest layer sizes.

use std::time::Instant;

use egcnn::{Tape, Tensor};

fn main() -> egcnn::Result<()> {
    for &(c, k, extent) in &[(8usize, 8usize, 32usize), (16, 8, 32), (16, 16, 16), (32, 32, 8)] {
        let input = Tensor::from_fn(&[2, c, extent, extent, extent], |i| ((i * 7919) % 97) as f64 / 97.0 - 0.5);
        let weight = Tensor::from_fn(&[k, c, 3, 3, 3], |i| ((i * 104729) % 89) as f64 / 890.0 - 0.05);
        let macs = 2.0 * (extent as f64).powi(3) * 27.0 * (c * k) as f64;
        let start = Instant::now();
        let mut tape = Tape::new();
        let x = tape.param(input)?;
        let w = tape.param(weight)?;
        let y = tape.conv3d(x, w, None, 1, 1)?;
        let fwd = start.elapsed().as_secs_f64();
        let s = tape.sum(y)?;
        let t = Instant::now();
        tape.backward(s)?;
        let bwd = t.elapsed().as_secs_f64();
        println!(
            "C={c:2} K={k:2} {extent}^3 x2: forward {:.1} ms ({:.2} GMAC/s), backward {:.1} ms",
            fwd * 1e3,
            macs / fwd / 1e9,
            bwd * 1e3
        );
    }
    Ok(())
}
