#![no_main]

use libfuzzer_sys::fuzz_target;

fuzz_target!(|data: &[u8]| {
    if let Ok(text) = std::str::from_utf8(data) {
        if let Ok(ckpt) = lacl::checkpoint::checkpoint_from_json_str(text) {
            let _ = ckpt.materialize();
        }
    }
});
