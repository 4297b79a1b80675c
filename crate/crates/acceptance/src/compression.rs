//! Randomized batches through compression and both wire forms.

use modelserve_core::models::{
    compress_batch, decode_batch_json, decompress_batch, encode_batch_json, naive_batch_json,
    Example, FeatureValue,
};
use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::Outcome;

fn value(rng: &mut ChaCha8Rng) -> FeatureValue {
    let len = rng.gen_range(0..4);
    match rng.gen_range(0..3) {
        // An empty list reads back as Float, so only Float may be empty.
        _ if len == 0 => FeatureValue::Float(Vec::new()),
        0 => FeatureValue::Float(
            (0..len)
                .map(|_| match rng.gen_range(0..4) {
                    0 => -0.0,
                    1 => rng.gen_range(-3i32..3) as f64,
                    _ => rng.gen_range(-1e6..1e6),
                })
                .collect(),
        ),
        1 => FeatureValue::Int64((0..len).map(|_| rng.gen_range(i64::MIN..=i64::MAX) >> rng.gen_range(0..63)).collect()),
        _ => {
            let words = ["", "a", "ünï", "quote\"d", "tab\t", "long-feature-value"];
            FeatureValue::Bytes((0..len).map(|_| words.choose(rng).unwrap().as_bytes().to_vec()).collect())
        }
    }
}

/// Examples over a small feature pool. Each feature is shared by the
/// whole batch, shared by some examples, or drawn per example.
pub fn random_batch(rng: &mut ChaCha8Rng) -> Vec<Example> {
    let n = rng.gen_range(1..10);
    let mut batch = vec![Example::new(); n];
    for f in 0..rng.gen_range(0..7) {
        let name = format!("feature_{f}");
        let shared = value(rng);
        let mode = rng.gen_range(0..3);
        for ex in batch.iter_mut() {
            let v = match mode {
                0 => Some(shared.clone()),
                1 if rng.gen_bool(0.7) => Some(shared.clone()),
                1 => None,
                _ => Some(value(rng)),
            };
            if let Some(v) = v {
                ex.features.insert(name.clone(), v);
            }
        }
    }
    batch
}

#[derive(Debug, Default)]
pub struct CompressionStats {
    pub batches: usize,
    pub roundtrip_failures: usize,
    pub wire_failures: usize,
    pub size_violations: usize,
    pub naive_bytes: usize,
    pub encoded_bytes: usize,
}

pub fn run(batches: usize, seed: u64) -> CompressionStats {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut s = CompressionStats::default();
    for _ in 0..batches {
        let batch = random_batch(&mut rng);
        s.batches += 1;
        let compressed = compress_batch(&batch).expect("non-empty batch");
        if decompress_batch(&compressed).ok().as_ref() != Some(&batch) {
            s.roundtrip_failures += 1;
        }
        let naive = naive_batch_json(&batch).expect("serializable");
        let encoded = encode_batch_json(&compressed).expect("serializable");
        s.naive_bytes += naive.len();
        s.encoded_bytes += encoded.len();
        if encoded.len() > naive.len() {
            s.size_violations += 1;
        }
        let decoded = serde_json::from_str(&encoded)
            .ok()
            .and_then(|v| decode_batch_json(v).ok());
        if decoded.as_ref() != Some(&batch) {
            s.wire_failures += 1;
        }
    }
    s
}

pub fn check() -> Outcome {
    let s = run(10_000, 99);
    let passed = s.batches == 10_000
        && s.roundtrip_failures == 0
        && s.wire_failures == 0
        && s.size_violations == 0;
    Outcome::new(
        passed,
        format!(
            "{} batches: {} roundtrip failures, {} wire roundtrip failures, {} larger than naive; {} bytes encoded vs {} naive",
            s.batches, s.roundtrip_failures, s.wire_failures, s.size_violations, s.encoded_bytes, s.naive_bytes
        ),
    )
}
