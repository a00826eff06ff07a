//! Machine-readable JSON reports: struct-ordered keys and floats printed at
//! 17 significant digits so byte-level diffs are meaningful.

use serde::Serialize;
use serde_json::ser::Formatter;

pub const TOOL_NAME: &str = "spectragap";
pub const TOOL_VERSION: &str = env!("CARGO_PKG_VERSION");
pub const REPORT_SCHEMA_VERSION: &str = "1";

#[derive(Debug, Clone, Serialize)]
pub struct ToolInfo {
    pub name: &'static str,
    pub version: &'static str,
    pub report_schema: &'static str,
}

impl Default for ToolInfo {
    fn default() -> Self {
        ToolInfo { name: TOOL_NAME, version: TOOL_VERSION, report_schema: REPORT_SCHEMA_VERSION }
    }
}

#[derive(Debug, Clone, Serialize)]
pub struct Report<C: Serialize, R: Serialize, T: Serialize> {
    pub tool: ToolInfo,
    pub command: String,
    pub config: C,
    pub result: R,
    pub tolerances: T,
    pub wall_clock_seconds: f64,
}

struct SciFormatter;

impl Formatter for SciFormatter {
    fn write_f64<W>(&mut self, writer: &mut W, value: f64) -> std::io::Result<()>
    where
        W: ?Sized + std::io::Write,
    {
        // 17 significant digits round-trips every f64 exactly
        write!(writer, "{:.16e}", value)
    }

    fn write_f32<W>(&mut self, writer: &mut W, value: f32) -> std::io::Result<()>
    where
        W: ?Sized + std::io::Write,
    {
        write!(writer, "{:.8e}", value)
    }
}

/// Serialize any report-shaped value with the 17-digit float convention.
pub fn to_json_string<S: Serialize>(value: &S) -> Result<String, serde_json::Error> {
    let mut out = Vec::new();
    let mut ser = serde_json::Serializer::with_formatter(&mut out, SciFormatter);
    value.serialize(&mut ser)?;
    Ok(String::from_utf8(out).expect("json is utf8"))
}

pub fn write_json_file<S: Serialize>(value: &S, path: &str) -> std::io::Result<()> {
    let body = to_json_string(value).map_err(std::io::Error::other)?;
    std::fs::write(path, body + "\n")
}

#[cfg(test)]
mod tests {
    use super::*;

    #[derive(Serialize)]
    struct Tiny {
        a: f64,
        b: Vec<f64>,
    }

    #[test]
    fn floats_print_17_significant_digits() {
        let t = Tiny { a: std::f64::consts::PI, b: vec![1.0, 0.1] };
        let s = to_json_string(&t).unwrap();
        assert!(s.contains("3.1415926535897931e0"), "{s}");
        assert!(s.contains("1.0000000000000001e-1"), "{s}");
        // round-trips exactly
        let back: serde_json::Value = serde_json::from_str(&s).unwrap();
        assert_eq!(back["a"].as_f64().unwrap(), std::f64::consts::PI);
        assert_eq!(back["b"][1].as_f64().unwrap(), 0.1);
    }

    #[test]
    fn key_order_is_struct_order() {
        let r = Report {
            tool: ToolInfo::default(),
            command: "eigen".into(),
            config: 1u32,
            result: 2u32,
            tolerances: 3u32,
            wall_clock_seconds: 0.5,
        };
        let s = to_json_string(&r).unwrap();
        let tool_pos = s.find("\"tool\"").unwrap();
        let cmd_pos = s.find("\"command\"").unwrap();
        let cfg_pos = s.find("\"config\"").unwrap();
        let res_pos = s.find("\"result\"").unwrap();
        assert!(tool_pos < cmd_pos && cmd_pos < cfg_pos && cfg_pos < res_pos);
    }
}
