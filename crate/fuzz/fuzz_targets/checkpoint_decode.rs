#![no_main]

use libfuzzer_sys::fuzz_target;
use mtnet::model::decode_checkpoint;

fuzz_target!(|data: &[u8]| {
    if let Ok(ckpt) = decode_checkpoint(data) {
        let _ = ckpt.into_net();
    }
});
