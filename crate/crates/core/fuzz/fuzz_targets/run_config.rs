#![no_main]
use libfuzzer_sys::fuzz_target;
use sparse_fpca::cli::RunConfig;

fuzz_target!(|text: &str| {
    if let Ok(config) = RunConfig::from_json(text) {
        let _ = config.validate();
        let _ = config.fit_plan();
    }
});
