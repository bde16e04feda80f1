#![no_main]

use libfuzzer_sys::fuzz_target;
use scs_lab::cli::format::{parse_sweep_csv, sweep_csv};

fuzz_target!(|data: &[u8]| {
    let Ok(s) = std::str::from_utf8(data) else { return };
    if let Ok(rows) = parse_sweep_csv(s) {
        let text = sweep_csv(&rows).expect("rows serialize");
        let again = parse_sweep_csv(&text).expect("re-parse");
        assert_eq!(again.len(), rows.len());
    }
});
