#![no_main]

use libfuzzer_sys::fuzz_target;
use scs_lab::cli::format::parse_model;
use scs_lab::geometry::{ClassSet, Point3};
use scs_lab::labels::Frame;

fuzz_target!(|data: &[u8]| {
    let Ok(s) = std::str::from_utf8(data) else { return };
    if let Ok(model) = parse_model(s) {
        // a model that passes the layout checks must run inference without panicking
        let frame = Frame {
            id: 0,
            points: vec![Point3::new(8.0, 1.0, -1.0, 0.4), Point3::new(8.2, 1.1, -0.5, 0.5)],
            gt_boxes: vec![],
            labeled_classes: ClassSet::all(2),
        };
        let _ = model.detector.infer(&frame, 0.05, 0.1);
    }
});
