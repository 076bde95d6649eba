#![no_main]
use libfuzzer_sys::fuzz_target;

fuzz_target!(|data: &[u8]| {
    if let Ok(model) = kfs::formats::decode_condensed::<f32>(data) {
        assert_eq!(kfs::formats::encode_condensed(&model), data);
    }
    let _ = kfs::formats::decode_condensed::<f64>(data);
});
