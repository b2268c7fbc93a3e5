use serde::Serialize;
use serde_json::Value;

pub const SCHEMA_VERSION: u32 = 1;

/// Top-level JSON document printed by every single-result command.
#[derive(Debug, Serialize)]
pub struct ResultRecord {
    pub schema_version: u32,
    pub version: &'static str,
    pub command: String,
    pub inputs: Value,
    pub outputs: Value,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub seed: Option<u64>,
}

impl ResultRecord {
    pub fn new(command: &str, inputs: Value, outputs: Value, seed: Option<u64>) -> Self {
        ResultRecord {
            schema_version: SCHEMA_VERSION,
            version: env!("CARGO_PKG_VERSION"),
            command: command.to_string(),
            inputs,
            outputs,
            seed,
        }
    }

    pub fn to_json(&self) -> String {
        serde_json::to_string_pretty(self).expect("records serialize")
    }
}

/// Twelve significant digits, printed in the shortest form that round-trips.
pub fn sig12(x: f64) -> String {
    if !x.is_finite() {
        return x.to_string();
    }
    let rounded: f64 = format!("{x:.11e}").parse().expect("valid float");
    rounded.to_string()
}

pub fn opt_sig12(x: Option<f64>) -> String {
    x.map(sig12).unwrap_or_default()
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn twelve_digits() {
        assert_eq!(sig12(0.4877443751081734), "0.487744375108");
        assert_eq!(sig12(0.25), "0.25");
        assert_eq!(sig12(0.0), "0");
        assert_eq!(sig12(1234567.891234567), "1234567.89123");
        assert_eq!(sig12(-3.0e-20), "-0.00000000000000000003");
        assert_eq!(opt_sig12(None), "");
    }
}
