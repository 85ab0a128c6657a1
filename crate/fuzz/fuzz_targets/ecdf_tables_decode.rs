//! ECDF table decoding of arbitrary bytes: errors are fine, panics are not.

#![no_main]

use libfuzzer_sys::fuzz_target;

fuzz_target!(|data: &[u8]| {
    if let Ok(tables) = bbfit::datastore::decode_ecdf_tables(data) {
        for t in &tables {
            // Decoded tables must be safe to evaluate.
            let _ = t.transform(0.0);
            let _ = t.transform(f64::MAX);
            let _ = t.transform(f64::MIN);
        }
    }
});
