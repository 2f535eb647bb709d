#![no_main]
use libfuzzer_sys::fuzz_target;
use ssmq_core::io::TensorFile;

fuzz_target!(|data: &[u8]| {
    if let Ok(file) = TensorFile::decode(data) {
        assert_eq!(file.encode(), data);
    }
});
