use std::time::Instant;

use lfmark_core::adapters::{TinyAe, TinyAeTraining};
use lfmark_core::corpus;

fn main() {
    let steps: usize = std::env::args().nth(1).map(|s| s.parse().unwrap()).unwrap_or(100);
    let lr: f64 = std::env::args().nth(2).map(|s| s.parse().unwrap()).unwrap_or(5e-3);
    let train = TinyAe::default_corpus().unwrap();
    let t = Instant::now();
    let ae = TinyAe::train(&train, &TinyAeTraining { steps, learning_rate: lr, ..TinyAeTraining::default() }).unwrap();
    println!("steps {steps} lr {lr}: {:.1}s, params {}", t.elapsed().as_secs_f64(), ae.parameter_count());
    println!("train psnr {:.2}", ae.reconstruction_psnr(&train).unwrap());
    let fresh = corpus::synthetic_textures(16, 64, 12345).unwrap();
    println!("fresh psnr {:.2}", ae.reconstruction_psnr(&fresh).unwrap());
}
