#![no_main]

use fedcarbon::config::ExperimentPlan;
use libfuzzer_sys::fuzz_target;

fuzz_target!(|data: &[u8]| {
    let Ok(text) = std::str::from_utf8(data) else {
        return;
    };
    if let Ok(plan) = ExperimentPlan::parse(text) {
        let again = ExperimentPlan::parse(&plan.to_toml()).expect("serialised plan parses");
        assert_eq!(again, plan);
    }
});
