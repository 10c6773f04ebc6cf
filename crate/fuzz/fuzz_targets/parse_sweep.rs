#![no_main]

use libfuzzer_sys::fuzz_target;

fuzz_target!(|data: &[u8]| {
    let Ok(text) = std::str::from_utf8(data) else {
        return;
    };
    if let Ok(points) = fedcarbon::config::parse_sweep(text) {
        assert!(!points.is_empty());
        assert!(points.windows(2).all(|w| w[0] <= w[1]));
        assert!(points.iter().all(|p| *p >= 0.0));
    }
});
