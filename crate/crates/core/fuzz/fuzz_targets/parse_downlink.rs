#![no_main]
use libfuzzer_sys::fuzz_target;

use lmbfuse::interface::DownlinkMessage;

fuzz_target!(|data: &[u8]| {
    let Ok(line) = std::str::from_utf8(data) else { return };
    if let Ok(msg) = DownlinkMessage::from_line(line) {
        let reparsed = DownlinkMessage::from_line(&msg.to_line()).expect("round trip");
        assert_eq!(reparsed, msg);
    }
});
