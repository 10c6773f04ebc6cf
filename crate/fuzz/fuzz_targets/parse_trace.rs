#![no_main]

use libfuzzer_sys::fuzz_target;

fuzz_target!(|data: &[u8]| {
    if let Ok(trace) = fedcarbon::carbon::parse_trace(data) {
        // Anything accepted must serialise and parse back to the same trace.
        let mut buf = Vec::new();
        trace.write_csv(&mut buf).unwrap();
        assert_eq!(fedcarbon::carbon::parse_trace(buf.as_slice()).unwrap(), trace);
        for r in 0..trace.num_regions() {
            for t in 0..trace.hours() {
                let e = trace.effective_intensity(r, t).unwrap();
                assert!(e >= 0.0 && e <= trace.recorded_intensity(r, t).unwrap());
            }
        }
    }
});
