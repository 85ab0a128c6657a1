//! Column store decoding of arbitrary bytes: errors are fine, panics are not.

#![no_main]

use libfuzzer_sys::fuzz_target;

fuzz_target!(|data: &[u8]| {
    if let Ok(store) = bbfit::datastore::decode_store(data) {
        // A store that decodes must also serve reads.
        for c in 0..store.column_names().len() {
            let _ = store.read_column(c);
        }
    }
});
