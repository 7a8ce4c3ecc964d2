#![no_main]

use libfuzzer_sys::fuzz_target;
use repalloc_cli::RunConfig;

fuzz_target!(|data: &str| {
    let Ok(cfg) = RunConfig::parse(data) else {
        return;
    };
    if cfg.samples.is_none() {
        let _ = cfg.build_landscape();
    }
    let _ = cfg.supply();
    let _ = cfg.contract_lists();
});
