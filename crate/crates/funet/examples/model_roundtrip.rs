//! Save/load round-trip for trained networks.
//!
//! The model file carries the architecture spec, every parameter buffer in
//! canonical order, the batch-norm running statistics, and a checksum.
//! Loading rebuilds a network that is equal to the saved one — same
//! parameters, same statistics, bit-identical predictions — and a corrupted
//! file is rejected instead of silently mispredicting.
//!
//! Run with: `cargo run --example model_roundtrip`

use funet::data::{generate, split, SynthConfig};
use funet::network::{Network, NetworkSpec, Variant};
use funet::training::{train, Hyperparams};
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use std::path::Path;

fn main() -> funet::Result<()> {
    let data_config = SynthConfig {
        height: 16,
        width: 16,
        count: 2,
        seed: 2,
        ..SynthConfig::default()
    };
    let dataset = generate(&data_config)?;
    let (train_set, val_set, _) = split(&dataset, 2, 0, 0)?;

    // A couple of epochs give the batch-norm statistics something real.
    let spec = NetworkSpec {
        variant: Variant::Bru,
        depth: 2,
        base_channels: 4,
        ..NetworkSpec::default()
    };
    let net = Network::build(spec, &mut ChaCha8Rng::seed_from_u64(8))?;
    let hp = Hyperparams { batch_size: 2, epochs: 2, seed: 8, ..Hyperparams::default() };
    let trained = train(net, &train_set, &val_set, &hp)?.network;

    let out = Path::new("target/example_out/model_roundtrip");
    std::fs::create_dir_all(out).map_err(|e| funet::Error::io(out, e))?;
    let path = out.join("model.funet");
    trained.save(&path)?;
    let size = std::fs::metadata(&path).map_err(|e| funet::Error::io(&path, e))?.len();
    println!(
        "saved {} parameters ({} buffers) to {} ({size} bytes)",
        trained.param_count(),
        trained.params().len(),
        path.display()
    );

    let loaded = Network::load(&path)?;
    println!("loaded network equals saved network: {}", loaded == trained);

    let image = funet::tensor::Tensor::new(
        vec![1, 1, 16, 16],
        train_set.samples[0].image.clone(),
    )?;
    let a = trained.forward_eval(&image)?;
    let b = loaded.forward_eval(&image)?;
    let max_diff = a
        .tape
        .data(a.probs)
        .iter()
        .zip(b.tape.data(b.probs))
        .map(|(x, y)| (x - y).abs())
        .fold(0.0f64, f64::max);
    println!("max |prob difference| between saved and loaded: {max_diff}");

    // Flip one byte in the middle of a copy and watch it bounce.
    let corrupt = out.join("corrupt.funet");
    let mut bytes = std::fs::read(&path).map_err(|e| funet::Error::io(&path, e))?;
    let mid = bytes.len() / 2;
    bytes[mid] ^= 0x01;
    std::fs::write(&corrupt, bytes).map_err(|e| funet::Error::io(&corrupt, e))?;
    match Network::load(&corrupt) {
        Ok(_) => println!("corrupted file loaded -- this should never happen"),
        Err(e) => println!("corrupted file rejected: {e}"),
    }
    Ok(())
}
