#![no_main]

use fedcarbon::report::{parse_metrics_csv, write_metrics_csv};
use libfuzzer_sys::fuzz_target;

fuzz_target!(|data: &[u8]| {
    if let Ok(rows) = parse_metrics_csv(data) {
        let mut buf = Vec::new();
        write_metrics_csv(&rows, &mut buf).unwrap();
        assert_eq!(parse_metrics_csv(buf.as_slice()).unwrap(), rows);
    }
});
