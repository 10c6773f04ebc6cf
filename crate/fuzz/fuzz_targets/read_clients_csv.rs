#![no_main]

use fedcarbon::data::{read_clients_csv, write_clients_csv};
use libfuzzer_sys::fuzz_target;

fuzz_target!(|data: &[u8]| {
    if let Ok(clients) = read_clients_csv(data) {
        for c in &clients {
            assert!(c.samples.iter().all(|s| s.features.iter().all(|x| (0.0..=1.0).contains(x))));
        }
        let mut buf = Vec::new();
        write_clients_csv(&clients, &mut buf).unwrap();
        let again = read_clients_csv(buf.as_slice()).unwrap();
        assert_eq!(again.len(), clients.len());
    }
});
