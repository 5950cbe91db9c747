#![no_main]
use libfuzzer_sys::fuzz_target;

use lmbfuse::interface::UplinkMessage;

fuzz_target!(|data: &[u8]| {
    let Ok(line) = std::str::from_utf8(data) else { return };
    if let Ok(msg) = UplinkMessage::from_line(line) {
        // Anything that parses must survive a lossless round trip.
        let reparsed = UplinkMessage::from_line(&msg.to_line()).expect("round trip");
        assert_eq!(reparsed, msg);
    }
});
