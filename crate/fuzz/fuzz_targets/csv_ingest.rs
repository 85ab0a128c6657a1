//! CSV ingestion must reject bad input with an error, never panic or hang.

#![no_main]

use libfuzzer_sys::fuzz_target;

fuzz_target!(|data: &[u8]| {
    let _ = bbfit::datastore::ingest_csv_reader(data, None);
});
