#![no_main]

use libfuzzer_sys::fuzz_target;
use scs_lab::cli::format::{frame_line, parse_frame_record};

fuzz_target!(|data: &[u8]| {
    let Ok(s) = std::str::from_utf8(data) else { return };
    if let Ok(frame) = parse_frame_record(s, 2) {
        // accepted frames re-serialize to a line that parses to the same frame
        let again = parse_frame_record(&frame_line(&frame), 2).expect("re-parse");
        assert_eq!(again, frame);
    }
});
