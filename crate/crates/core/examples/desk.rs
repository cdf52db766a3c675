//! Trains the default CNN on synthetic digits and prints per-epoch metrics.
//!
//! `cargo run --release --example desk -- <kind> <epochs> <n_train>`

use std::time::Instant;

use euclidnet::data::synth;
use euclidnet::nn::ModelSpec;
use euclidnet::train::{fit, TrainConfig};
use euclidnet::SimilarityKind;

fn main() -> euclidnet::Result<()> {
    let args: Vec<String> = std::env::args().collect();
    let kind: SimilarityKind = args.get(1).map_or("conv", String::as_str).parse()?;
    let epochs: u32 = args.get(2).and_then(|s| s.parse().ok()).unwrap_or(3);
    let n: usize = args.get(3).and_then(|s| s.parse().ok()).unwrap_or(10_000);
    let train = synth::dataset(n, 28, 1)?;
    let test = synth::dataset(2_000, 28, 2)?;
    let mut model = ModelSpec { kind, ..Default::default() }.build(0)?;
    model.norm = Some(train.normalization());
    let cfg = TrainConfig { epochs, eta: TrainConfig::default_eta(kind), ..Default::default() };
    let t = Instant::now();
    fit(&mut model, &train, &test, &cfg, |r| {
        println!("{:?} {:.1}s", r, t.elapsed().as_secs_f32());
    })?;
    Ok(())
}
