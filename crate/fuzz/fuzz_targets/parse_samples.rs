#![no_main]

use libfuzzer_sys::fuzz_target;

fuzz_target!(|data: &str| {
    if let Ok(samples) = repalloc::parse_samples(data) {
        assert!(samples.iter().all(|p| p.is_finite() && *p >= 0.0));
        // Fitting may reject the sample, but must not panic.
        let _ = repalloc::Landscape::fit_empirical(&samples);
    }
});
