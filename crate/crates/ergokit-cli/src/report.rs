//! Artifact rendering: every experiment produces a [`Report`] holding the
//! effective config and a body, rendered as JSON or CSV. Rendering is
//! deterministic — reruns with the same effective config are byte-identical.

use serde_json::{Map, Number, Value};

use crate::config::ExperimentConfig;
use crate::CliError;

/// Output format of an artifact.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Format {
    Csv,
    Json,
}

impl Format {
    pub fn parse(s: &str) -> Result<Format, CliError> {
        match s {
            "csv" => Ok(Format::Csv),
            "json" => Ok(Format::Json),
            other => Err(CliError::msg(format!(
                "unknown output format {other:?}; expected csv or json"
            ))),
        }
    }

    pub fn as_str(&self) -> &'static str {
        match self {
            Format::Csv => "csv",
            Format::Json => "json",
        }
    }
}

/// A JSON value for a float, with non-finite values spelled as strings so
/// they survive JSON encoding.
pub fn num(v: f64) -> Value {
    match Number::from_f64(v) {
        Some(n) => Value::Number(n),
        None => Value::String(
            if v.is_nan() {
                "nan"
            } else if v > 0.0 {
                "inf"
            } else {
                "-inf"
            }
            .to_string(),
        ),
    }
}

/// A grid node rendered as one CSV-safe value: a number in one dimension,
/// a semicolon-joined string otherwise.
pub fn point(coords: &[f64]) -> Value {
    if coords.len() == 1 {
        num(coords[0])
    } else {
        Value::String(
            coords
                .iter()
                .map(|c| format_value(&num(*c)))
                .collect::<Vec<_>>()
                .join(";"),
        )
    }
}

/// Experiment result body.
pub enum Body {
    /// Key-value result; renders naturally as JSON.
    Object(Vec<(&'static str, Value)>),
    /// Rows with named columns plus footer key-values; renders naturally
    /// as CSV.
    Table {
        columns: Vec<&'static str>,
        rows: Vec<Vec<Value>>,
        footer: Vec<(&'static str, Value)>,
    },
}

/// A finished experiment: effective config, result body, and verdict.
pub struct Report {
    pub config: ExperimentConfig,
    pub body: Body,
    /// `false` means a numerical check failed; the process exits 2.
    pub pass: bool,
    /// Format used when the config requests none.
    pub natural: Format,
}

impl Report {
    /// The format this report renders in: the configured one, or this
    /// report's natural format. The choice is recorded back into the config
    /// so the embedded config replays identically.
    pub fn resolve_format(&mut self) -> Result<Format, CliError> {
        let natural = self.natural;
        let out = self.config.output.get_or_insert_with(Default::default);
        let fmt = match &out.format {
            Some(s) => Format::parse(s)?,
            None => natural,
        };
        out.format = Some(fmt.as_str().to_string());
        Ok(fmt)
    }

    /// Renders the artifact text.
    pub fn render(&self, format: Format) -> String {
        match format {
            Format::Json => self.render_json(),
            Format::Csv => self.render_csv(),
        }
    }

    fn result_value(&self) -> Value {
        match &self.body {
            Body::Object(pairs) => {
                let mut map = Map::new();
                for (k, v) in pairs {
                    map.insert((*k).to_string(), v.clone());
                }
                Value::Object(map)
            }
            Body::Table { columns, rows, footer } => {
                let mut map = Map::new();
                map.insert(
                    "columns".to_string(),
                    Value::Array(columns.iter().map(|c| Value::String((*c).to_string())).collect()),
                );
                map.insert(
                    "rows".to_string(),
                    Value::Array(rows.iter().map(|r| Value::Array(r.clone())).collect()),
                );
                for (k, v) in footer {
                    map.insert((*k).to_string(), v.clone());
                }
                Value::Object(map)
            }
        }
    }

    fn render_json(&self) -> String {
        let mut root = Map::new();
        root.insert("config".to_string(), serde_json::to_value(&self.config).unwrap());
        root.insert("result".to_string(), self.result_value());
        root.insert("pass".to_string(), Value::Bool(self.pass));
        let mut text = serde_json::to_string_pretty(&Value::Object(root)).unwrap();
        text.push('\n');
        text
    }

    fn render_csv(&self) -> String {
        let cfg = serde_json::to_string(&self.config).unwrap();
        let mut text = format!("# config: {cfg}\n");
        match &self.body {
            Body::Object(pairs) => {
                text.push_str("key,value\n");
                for (k, v) in pairs {
                    text.push_str(&format!("{k},{}\n", format_value(v)));
                }
            }
            Body::Table { columns, rows, footer } => {
                text.push_str(&columns.join(","));
                text.push('\n');
                for row in rows {
                    let cells: Vec<String> = row.iter().map(format_value).collect();
                    text.push_str(&cells.join(","));
                    text.push('\n');
                }
                for (k, v) in footer {
                    text.push_str(&format!("# {k} = {}\n", format_value(v)));
                }
            }
        }
        text
    }
}

/// One CSV cell. Strings are emitted raw (they never contain commas here);
/// numbers use the shortest round-trip form.
pub fn format_value(v: &Value) -> String {
    match v {
        Value::String(s) => s.clone(),
        Value::Number(n) => n.to_string(),
        Value::Bool(b) => b.to_string(),
        Value::Null => String::new(),
        other => other.to_string(),
    }
}
