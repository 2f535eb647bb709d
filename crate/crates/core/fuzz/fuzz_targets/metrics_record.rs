#![no_main]
use libfuzzer_sys::fuzz_target;
use ssmq_core::MetricsRecord;

fuzz_target!(|data: &[u8]| {
    let Ok(text) = std::str::from_utf8(data) else {
        return;
    };
    if let Ok(rec) = MetricsRecord::parse(text) {
        assert_eq!(MetricsRecord::parse(&rec.to_string()).unwrap(), rec);
    }
});
