//! Line-delimited JSON log events on stderr.

use std::io::Write;

use log::{Level, LevelFilter, Log, Metadata, Record};
use serde_json::json;

struct JsonLogger {
    level: LevelFilter,
}

impl Log for JsonLogger {
    fn enabled(&self, metadata: &Metadata) -> bool {
        metadata.level() <= self.level
    }

    fn log(&self, record: &Record) {
        if !self.enabled(record.metadata()) {
            return;
        }
        let event = json!({
            "level": level_name(record.level()),
            "target": record.target(),
            "message": record.args().to_string(),
        });
        let mut err = std::io::stderr().lock();
        let _ = writeln!(err, "{event}");
    }

    fn flush(&self) {
        let _ = std::io::stderr().flush();
    }
}

fn level_name(level: Level) -> &'static str {
    match level {
        Level::Error => "error",
        Level::Warn => "warn",
        Level::Info => "info",
        Level::Debug => "debug",
        Level::Trace => "trace",
    }
}

pub fn init(level: LevelFilter) {
    if log::set_logger(Box::leak(Box::new(JsonLogger { level }))).is_ok() {
        log::set_max_level(level);
    }
}

/// Emits an info-level event whose fields sit next to `level` and `event`.
pub fn event(name: &str, fields: serde_json::Value) {
    if !log::log_enabled!(target: "flap::event", Level::Info) {
        return;
    }
    let mut obj = json!({ "level": "info", "target": "flap::event", "event": name });
    if let (Some(map), serde_json::Value::Object(extra)) = (obj.as_object_mut(), fields) {
        map.extend(extra);
    }
    let mut err = std::io::stderr().lock();
    let _ = writeln!(err, "{obj}");
}
