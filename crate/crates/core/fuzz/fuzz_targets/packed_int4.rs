#![no_main]
use libfuzzer_sys::fuzz_target;
use ssmq_core::gemm::PackedInt4Matrix;
use ssmq_core::io::TensorFile;

// The first two bytes pick the shape for the raw path; the whole input is
// also tried as a tensor file.
fuzz_target!(|data: &[u8]| {
    if let [rows, cols, rest @ ..] = data {
        if let Ok(m) = PackedInt4Matrix::from_bytes(*rows as usize, *cols as usize, rest.to_vec()) {
            let file = TensorFile::decode(&m.to_file().encode()).unwrap();
            assert_eq!(PackedInt4Matrix::from_file(file).unwrap(), m);
        }
    }
    if let Ok(file) = TensorFile::decode(data) {
        let _ = PackedInt4Matrix::from_file(file);
    }
});
