//! Times forward and backward passes of the default encoder on a
//! training-sized slice.

use std::time::Instant;

use ndarray::{Array1, Array2};
use stylekit::encoder::{backward_into, forward_array, init_params, EncoderConfig};

fn main() {
    let cfg = EncoderConfig::default();
    let p = init_params(&cfg, 0).unwrap();
    let x = Array2::from_shape_fn((137, 80), |(t, m)| ((t * 7 + m * 3) % 11) as f64 * 0.3 - 3.0);
    let g = Array1::from_elem(cfg.embedding_dim, 0.01);
    let mut acc = p.zeros_like();
    let n = 20;
    let (mut fwd, mut bwd) = (f64::MAX, f64::MAX);
    for _ in 0..5 {
        let t = Instant::now();
        let caches: Vec<_> = (0..n).map(|_| forward_array(&p, x.view()).unwrap().1).collect();
        fwd = fwd.min(t.elapsed().as_secs_f64());
        let t = Instant::now();
        for c in &caches {
            backward_into(&p, c, &g, &mut acc).unwrap();
        }
        bwd = bwd.min(t.elapsed().as_secs_f64());
    }
    let ms = |s: f64| s * 1e3 / n as f64;
    println!(
        "{} params: forward {:.2} ms, backward {:.2} ms per item",
        p.num_parameters(),
        ms(fwd),
        ms(bwd)
    );
}
