#![no_main]

use libfuzzer_sys::fuzz_target;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use repalloc::BidStrategy;

fuzz_target!(|data: &[u8]| {
    let Ok(strategy) = serde_json::from_slice::<BidStrategy>(data) else {
        return;
    };
    let text = serde_json::to_string(&strategy).expect("serialize");
    serde_json::from_str::<BidStrategy>(&text).expect("reparse own output");

    let _ = strategy.bid_probability();
    for p in [0.0, 0.5, 1.0, 10.0, f64::INFINITY] {
        let _ = strategy.win_fraction(p);
    }
    let mut rng = ChaCha8Rng::seed_from_u64(0);
    for _ in 0..8 {
        let _ = strategy.sample_bid(&mut rng);
    }
});
