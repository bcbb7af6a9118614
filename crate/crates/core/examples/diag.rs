use leafsar::dataset::{synth_dataset, GeneratorConfig};
use leafsar::train::*;
use std::time::Instant;

fn main() {
    let data = synth_dataset(200, &GeneratorConfig::default(), 42).unwrap();
    let train_set: Vec<_> = data[..160].to_vec();
    let eval_set: Vec<_> = data[160..].to_vec();
    let mut evals = Vec::new();
    let t0 = Instant::now();
    for seed in 0..5 {
        let hyper = TrainHyper { epochs_phase2: 40, seed, ..TrainHyper::default() };
        let out = train(&train_set, &hyper).unwrap();
        evals.push(evaluate(&out.params, &eval_set).unwrap().accuracy);
    }
    println!("e2=40 optimized conv: {:.0}s/run eval={:?}", t0.elapsed().as_secs_f64() / 5.0, evals);
}
