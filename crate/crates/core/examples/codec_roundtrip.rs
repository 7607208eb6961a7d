//! Compresses synthetic FP16 activations with and without the byte split and
//! reports entropy per lane.
//!
//! cargo run --release --example codec_roundtrip

use beeplan::codec::{analyze, compress, decompress, CodecContainer, Fp16Stream, Registry};
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};

fn main() -> Result<(), Box<dyn std::error::Error>> {
    let mut rng = ChaCha8Rng::seed_from_u64(7);
    let normal = Normal::new(0.0f32, 1.0)?;
    let values: Vec<f32> = (0..1_000_000).map(|_| normal.sample(&mut rng)).collect();
    let stream = Fp16Stream::from_f32(&values);
    let raw = stream.as_bytes().len();

    let registry = Registry::default();
    for name in registry.names() {
        let id = registry.by_name(name)?.id();
        for split in [false, true] {
            let container = compress(&stream, id, split)?;
            let bytes = container.to_bytes();
            let back = decompress(&CodecContainer::from_bytes(&bytes)?)?;
            assert_eq!(back, stream);
            println!(
                "{name:>8} split={split:<5} {:>9} bytes ({:.1}% of raw)",
                bytes.len(),
                100.0 * bytes.len() as f64 / raw as f64
            );
        }
    }

    let report = analyze(&stream, registry.by_name("zstd")?.id())?;
    println!("\n{}", serde_json::to_string_pretty(&report)?);
    Ok(())
}
