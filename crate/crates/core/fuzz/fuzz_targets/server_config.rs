#![no_main]

use libfuzzer_sys::fuzz_target;
use mosaic::server::ServerConfig;

fuzz_target!(|data: &[u8]| {
    let Ok(text) = std::str::from_utf8(data) else { return };
    if let Ok(cfg) = ServerConfig::from_json(text) {
        let _ = cfg.body_map();
        let _ = cfg.model_config();
    }
});
