#![no_main]
use libfuzzer_sys::fuzz_target;

fuzz_target!(|data: &[u8]| {
    if let Ok(s) = std::str::from_utf8(data) {
        if let Ok(cfg) = kfs::formats::parse_config::<kfs::pipeline::CondenseConfig>(s) {
            let _ = cfg.validate();
        }
        let _ = kfs::formats::parse_config::<kfs::diagnostics::ToyConfig>(s);
    }
});
