use std::fs;
use std::io::{BufRead, BufReader, Read};
use std::path::Path;

use serde::de::DeserializeOwned;
use serde::Serialize;

use super::types::DialogSession;
use crate::error::{Error, Result};

/// Corpus schema version written in every record's `v` field.
pub const SCHEMA_VERSION: u64 = 1;

/// Reads a JSON Lines corpus, validating every session.
pub fn load_corpus(path: impl AsRef<Path>) -> Result<Vec<DialogSession>> {
    let path = path.as_ref();
    let f = fs::File::open(path).map_err(|e| Error::io(path, e))?;
    parse_corpus(f)
}

pub fn parse_corpus(reader: impl Read) -> Result<Vec<DialogSession>> {
    let mut out = Vec::new();
    for (i, line) in BufReader::new(reader).lines().enumerate() {
        let lineno = i + 1;
        let line = line.map_err(|e| Error::Schema {
            line: lineno,
            field: "record".into(),
            message: e.to_string(),
        })?;
        if line.trim().is_empty() {
            continue;
        }
        out.push(parse_record(&line, lineno)?);
    }
    Ok(out)
}

fn parse_record(line: &str, lineno: usize) -> Result<DialogSession> {
    let schema = |field: &str, message: String| Error::Schema {
        line: lineno,
        field: field.to_string(),
        message,
    };
    let mut value: serde_json::Value = serde_json::from_str(line).map_err(|e| schema("record", e.to_string()))?;
    let obj = value
        .as_object_mut()
        .ok_or_else(|| schema("record", "expected a JSON object".into()))?;
    match obj.remove("v").and_then(|v| v.as_u64()) {
        Some(SCHEMA_VERSION) => {}
        Some(other) => return Err(schema("v", format!("unsupported schema version {other}"))),
        None => return Err(schema("v", "missing schema version".into())),
    }
    let session: DialogSession = serde_json::from_value(value).map_err(|e| {
        let msg = e.to_string();
        schema(&field_from_message(&msg), msg)
    })?;
    session.validate().map_err(|(field, message)| schema(&field, message))?;
    Ok(session)
}

/// Pulls the backticked field name out of a serde error message.
fn field_from_message(msg: &str) -> String {
    for key in ["missing field `", "unknown field `", "duplicate field `"] {
        if let Some(rest) = msg.split(key).nth(1) {
            if let Some(name) = rest.split('`').next() {
                return name.to_string();
            }
        }
    }
    "record".into()
}

pub fn corpus_to_string(sessions: &[DialogSession]) -> Result<String> {
    let mut out = String::new();
    for s in sessions {
        let mut v = serde_json::to_value(s)?;
        v.as_object_mut()
            .expect("session serializes to an object")
            .insert("v".into(), SCHEMA_VERSION.into());
        out.push_str(&serde_json::to_string(&v)?);
        out.push('\n');
    }
    Ok(out)
}

pub fn save_corpus(path: impl AsRef<Path>, sessions: &[DialogSession]) -> Result<()> {
    let path = path.as_ref();
    fs::write(path, corpus_to_string(sessions)?).map_err(|e| Error::io(path, e))
}

pub fn save_json<T: Serialize>(path: impl AsRef<Path>, value: &T) -> Result<()> {
    let path = path.as_ref();
    let mut text = serde_json::to_string_pretty(value)?;
    text.push('\n');
    fs::write(path, text).map_err(|e| Error::io(path, e))
}

pub fn load_json<T: DeserializeOwned>(path: impl AsRef<Path>) -> Result<T> {
    let path = path.as_ref();
    let text = fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
    Ok(serde_json::from_str(&text)?)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn empty_input_is_empty_corpus() {
        assert!(parse_corpus("".as_bytes()).unwrap().is_empty());
    }

    #[test]
    fn reports_line_and_field() {
        let good = r#"{"v":1,"session_id":"s","goal":{"constraints":[],"requests":[]},"turns":[{"user":"hi","belief":[],"acts":[{"domain":"general","act":"bye"}],"response_delex":"bye","response_lex":"bye"}]}"#;
        let bad = good.replace(r#""acts":[{"domain":"general","act":"bye"}],"#, "");
        let text = format!("{good}\n{bad}\n");
        match parse_corpus(text.as_bytes()) {
            Err(Error::Schema { line, field, .. }) => {
                assert_eq!(line, 2);
                assert_eq!(field, "acts");
            }
            other => panic!("{other:?}"),
        }
        let empty_acts = good.replace(r#"[{"domain":"general","act":"bye"}]"#, "[]");
        match parse_corpus(empty_acts.as_bytes()) {
            Err(Error::Schema { field, .. }) => assert!(field.contains("acts"), "{field}"),
            other => panic!("{other:?}"),
        }
        let wrong_version = good.replace(r#""v":1"#, r#""v":9"#);
        assert!(matches!(parse_corpus(wrong_version.as_bytes()), Err(Error::Schema { field, .. }) if field == "v"));
    }
}
