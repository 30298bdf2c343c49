use std::time::Instant;
use hdnn::data::{generate_synthetic, splice, split_at, SpliceConfig};
use hdnn::linalg::Activation;
use hdnn::model::{ArchSpec, GateMode, LayerKind};
use hdnn::training::{run_training, LabeledFrames, LrHalving, TrainConfig};

fn main() {
    let ds = generate_synthetic(50, 20, 24_000, 8.0, 0.3, 9001).unwrap();
    let (train_ds, valid_ds) = split_at(&ds, 20_000).unwrap();
    let cfg = SpliceConfig { context: 3 };
    let train = LabeledFrames::new(splice(&train_ds, &cfg), train_ds.labels.clone()).unwrap();
    let valid = LabeledFrames::new(splice(&valid_ds, &cfg), valid_ds.labels.clone()).unwrap();

    let arch = |kind, t, c| ArchSpec {
        input_dim: 140, hidden_dim: 32, num_hidden_layers: 8, output_dim: 50,
        layer_kind: kind, transform_mode: t, carry_mode: c,
        activation: Activation::Sigmoid, dropout_rate: 0.0, residual_span: 1,
    };
    let variants = [
        ("plain", arch(LayerKind::Plain, GateMode::Learned, GateMode::Learned)),
        ("highway", arch(LayerKind::Highway, GateMode::Learned, GateMode::Learned)),
        ("transform-only", arch(LayerKind::Highway, GateMode::Learned, GateMode::FixedZero)),
        ("carry-only", arch(LayerKind::Highway, GateMode::FixedOne, GateMode::Learned)),
    ];
    let t0 = Instant::now();
    std::thread::scope(|s| {
        let mut handles = vec![];
        for (name, a) in &variants {
            for seed in 1..=5u64 {
                let (train, valid) = (&train, &valid);
                handles.push((name, seed, s.spawn(move || {
                    let config = TrainConfig {
                        learning_rate: 0.1, momentum_after_first_epoch: 0.9, batch_size: 128,
                        num_epochs: 20, seed, lr_halving: LrHalving::Off, dropout_rate: 0.0,
                    };
                    let (reports, _) = run_training(a, train, valid, &config).unwrap();
                    (reports[4].train_ce, reports[19].valid_fer)
                })));
            }
        }
        for (name, seed, h) in handles {
            let (ce5, fer20) = h.join().unwrap();
            println!("{name} seed {seed}: epoch5 train_ce={ce5:.4} epoch20 valid_fer={fer20:.4}");
        }
    });
    println!("total {:.1}s", t0.elapsed().as_secs_f64());
}
