//! End-to-end finite-difference check of the training gradients.
//!
//! Every scalar parameter of a small network is perturbed by ±1e-5, and the
//! resulting central difference of the loss is compared against the gradient
//! the tape reports. The weight map is frozen from the unperturbed pass,
//! because that is exactly what the backward pass treats it as: a constant.
//!
//! Run with: `cargo run --release --example gradient_check`

use funet::gradcheck;
use funet::loss::{true_class_prob, weighted_cross_entropy, LabelMap, WeightMode};
use funet::network::{Network, NetworkSpec, Variant};
use funet::tensor::Tensor;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

fn main() -> funet::Result<()> {
    let (height, width, classes) = (8, 8, 3);

    for variant in [Variant::Plain, Variant::Bru] {
        for mode in [WeightMode::Uniform, WeightMode::Feedback] {
            let spec = NetworkSpec {
                variant,
                depth: 2,
                base_channels: 2,
                num_classes: classes,
                // Dropout off: finite differences need a deterministic loss.
                dropout_rate: 0.0,
                input_channels: 1,
            };
            let mut rng = ChaCha8Rng::seed_from_u64(42);
            let base = Network::build(spec, &mut rng)?;

            let image = Tensor::new(
                vec![1, 1, height, width],
                (0..height * width).map(|_| rng.random::<f64>()).collect(),
            )?;
            let labels = LabelMap::new(
                vec![1, height, width],
                (0..height * width)
                    .map(|_| rng.random_range(0..classes))
                    .collect(),
            )?;

            // One unperturbed pass fixes the per-pixel weights for the whole
            // check, mirroring their stop-gradient role in training.
            let beta = 3.0;
            let frozen = {
                let mut net = base.clone();
                let fwd = net.forward_train(&image, &mut rng.clone())?;
                let mut tape = fwd.tape;
                let p_true = true_class_prob(&mut tape, fwd.probs, &labels)?;
                match mode {
                    WeightMode::Uniform => {
                        funet::loss::WeightMap::uniform(tape.shape(p_true).to_vec())
                    }
                    WeightMode::Feedback => {
                        funet::loss::feedback_weight(&tape, p_true, beta)?
                    }
                }
            };

            let inputs: Vec<Vec<f64>> =
                base.params().iter().map(|p| p.data().to_vec()).collect();
            let report = gradcheck::check(&inputs, |xs| {
                let mut net = base.clone();
                for (i, x) in xs.iter().enumerate() {
                    net.param_data_mut(i).copy_from_slice(x);
                }
                let fwd = net
                    .forward_train(&image, &mut ChaCha8Rng::seed_from_u64(0))
                    .unwrap();
                let mut tape = fwd.tape;
                let p_true = true_class_prob(&mut tape, fwd.probs, &labels).unwrap();
                let loss = weighted_cross_entropy(&mut tape, p_true, &frozen).unwrap();
                tape.backward(loss).unwrap();
                let grads = fwd
                    .param_ids
                    .iter()
                    .map(|&id| tape.grad(id).unwrap().to_vec())
                    .collect();
                (tape.data(loss)[0], grads)
            });

            let worst = base.params()[report.worst_input].name().to_string();
            let verdict = if report.max_rel_err < 1e-4 { "ok" } else { "FAILED" };
            println!(
                "{:5} {:8}  params={:4}  max rel err {:9.3e}  (worst: {worst})  {verdict}",
                variant.as_str(),
                mode.as_str(),
                base.param_count(),
                report.max_rel_err,
            );
        }
    }
    println!("\nThe unit-test suite repeats this per operation over many seeds.");
    Ok(())
}
