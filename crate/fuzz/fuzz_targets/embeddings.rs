#![no_main]

use libfuzzer_sys::fuzz_target;
use vicl_core::mining::EmbeddingTable;

fuzz_target!(|data: &[u8]| {
    if let Ok(table) = EmbeddingTable::from_bytes(data) {
        let bytes = table.to_bytes();
        assert_eq!(EmbeddingTable::from_bytes(&bytes).unwrap().to_bytes(), bytes);
    }
});
