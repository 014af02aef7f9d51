//! Phantom run end to end: generate, preprocess, train on four cases,
//! predict and score the other two.
//!
//! `cargo run --release --example phantom_pipeline -- [iterations] [width_scale]`

use std::time::Instant;

use voxresnet::infer::{argmax_labels, plan_tiles, predict, VoxResNetModel};
use voxresnet::metrics::evaluate_case;
use voxresnet::netspec::build_voxresnet;
use voxresnet::phantom::{generate_phantom, PhantomSpec};
use voxresnet::preprocess::{build_input_stack, PreprocessConfig};
use voxresnet::train::{TrainConfig, Trainer};

fn main() -> voxresnet::Result<()> {
    let mut args = std::env::args().skip(1);
    let iterations = args.next().map_or(400, |a| a.parse().expect("iterations"));
    let width_scale = args.next().map_or(0.25, |a| a.parse().expect("width_scale"));
    let start = Instant::now();

    let cases = (0..6u64)
        .map(|i| {
            let (mods, labels) = generate_phantom(&PhantomSpec::random(100 + i, [64; 3]))?;
            Ok((build_input_stack(&mods, &PreprocessConfig::default())?, labels))
        })
        .collect::<voxresnet::Result<Vec<_>>>()?;

    let config = TrainConfig {
        crop_size: 32,
        width_scale,
        ..TrainConfig::for_iterations(iterations)
    };
    let net = build_voxresnet(cases[0].0.channels(), 4, width_scale)?;
    let mut trainer = Trainer::new(&net, &cases[..4], config)?;
    trainer.run(|log, _| {
        if log.iteration % 50 == 0 {
            println!("{log}");
        }
        Ok(())
    })?;

    let model = VoxResNetModel::from_checkpoint(&trainer.checkpoint())?;
    for (input, truth) in &cases[4..] {
        let probs = predict(&model, input, &plan_tiles(input.extents(), 32, 16)?)?;
        let report = evaluate_case(&argmax_labels(&probs)?, truth, truth.spacing())?;
        println!("{}", report.to_table());
    }
    println!("done in {:.0?}", start.elapsed());
    Ok(())
}
