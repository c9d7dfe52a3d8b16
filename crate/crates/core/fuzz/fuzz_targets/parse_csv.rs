#![no_main]
use libfuzzer_sys::fuzz_target;
use sparse_fpca::dataset::{parse_csv, SparseDataset};

fuzz_target!(|data: &[u8]| {
    // Whatever parses must either build a dataset or be rejected cleanly.
    if let Ok(obs) = parse_csv(data) {
        let _ = SparseDataset::from_observations(&obs);
    }
});
