#![no_main]
use libfuzzer_sys::fuzz_target;

use lmbfuse::interface::SensorProfile;

fuzz_target!(|data: &[u8]| {
    let Ok(line) = std::str::from_utf8(data) else { return };
    if let Ok(profile) = SensorProfile::from_line(line) {
        let reparsed = SensorProfile::from_line(&profile.to_line()).expect("round trip");
        assert_eq!(reparsed, profile);
    }
});
