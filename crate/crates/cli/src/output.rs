use serde::Serialize;
use serde_json::Value;

use crate::OutputMode;

/// Keeps human text and JSON apart. One-shot commands emit once; loops
/// emit once per cycle, which makes a JSON-lines stream.
pub struct Out {
    mode: OutputMode,
}

impl Out {
    pub fn new(mode: OutputMode) -> Self {
        Out { mode }
    }

    pub fn emit(&self, value: &impl Serialize, human: impl FnOnce() -> String) {
        match self.mode {
            OutputMode::Json => {
                let v: Value = serde_json::to_value(value).expect("output serializes");
                println!("{v}");
            }
            OutputMode::Human => {
                let text = human();
                if !text.is_empty() {
                    println!("{}", text.trim_end());
                }
            }
        }
    }
}
