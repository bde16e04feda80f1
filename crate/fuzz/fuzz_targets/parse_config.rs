#![no_main]

use libfuzzer_sys::fuzz_target;
use scs_lab::cli::parse_config;

fuzz_target!(|data: &[u8]| {
    if let Ok(s) = std::str::from_utf8(data) {
        if let Ok(cfg) = parse_config(s) {
            // anything accepted must survive validation again
            cfg.validate().expect("accepted config validates");
        }
    }
});
