#![no_main]
use libfuzzer_sys::fuzz_target;
use sparse_fpca::cli::ModelFile;

fuzz_target!(|text: &str| {
    if let Ok(file) = ModelFile::from_json(text) {
        if let Ok(model) = file.to_model() {
            let _ = model.eval_eigenfunctions(0.5);
        }
    }
});
