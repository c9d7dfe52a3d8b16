#![no_main]
use libfuzzer_sys::fuzz_target;
use sparse_fpca::simulate::TruthBundle;

fuzz_target!(|text: &str| {
    if let Ok(bundle) = TruthBundle::from_json(text) {
        let _ = bundle.covariance_matrix();
    }
});
