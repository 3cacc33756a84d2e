//! Newline-delimited JSON requests `{id, op, args}` answered with
//! `{id, ok, result}` or `{id, ok, error: {code, message}}`.

use enclave_core::scenario::{Engine, Outcome, Step, StepError};
use serde_json::{json, Map, Value};

pub fn ok(id: &Value, result: &Outcome) -> Value {
    json!({ "id": id, "ok": true, "result": result })
}

pub fn error(id: &Value, code: &str, message: &str) -> Value {
    json!({ "id": id, "ok": false, "error": { "code": code, "message": message } })
}

/// Parses one request line into its id and step. A malformed request still
/// yields the id when one could be read, so the reply can echo it.
pub fn parse(line: &str) -> Result<(Value, Step), (Value, String)> {
    let value: Value =
        serde_json::from_str(line).map_err(|e| (Value::Null, format!("not JSON: {e}")))?;
    let Value::Object(mut obj) = value else {
        return Err((Value::Null, "a request must be an object".into()));
    };
    let id = obj.remove("id").unwrap_or(Value::Null);
    let op = match obj.remove("op") {
        Some(Value::String(op)) => op,
        _ => return Err((id, "missing string field `op`".into())),
    };
    let mut args = match obj.remove("args") {
        None | Some(Value::Null) => Map::new(),
        Some(Value::Object(m)) => m,
        Some(_) => return Err((id, "`args` must be an object".into())),
    };
    if let Some(extra) = obj.keys().next() {
        return Err((id, format!("unknown field `{extra}`")));
    }
    if args.contains_key("op") {
        return Err((id, "`args` may not contain `op`".into()));
    }
    args.insert("op".into(), Value::String(op));
    match Step::from_value(Value::Object(args)) {
        Ok(step) => Ok((id, step)),
        Err(e) => Err((id, e)),
    }
}

/// What one request did: the reply, and the step to journal if it may have
/// changed state.
pub struct Handled {
    pub response: Value,
    pub journal: Option<Step>,
}

pub fn handle(engine: &mut Engine, line: &str) -> Handled {
    let (id, step) = match parse(line) {
        Ok(parsed) => parsed,
        Err((id, message)) => {
            return Handled {
                response: error(&id, "bad-request", &message),
                journal: None,
            }
        }
    };
    let result = engine.execute(&step);
    let journal = match &result {
        Err(StepError::Invalid(_)) => None,
        _ if step.op.is_read_only() => None,
        _ => Some(step),
    };
    let response = match &result {
        Ok(outcome) => ok(&id, outcome),
        Err(e) => error(&id, e.code(), &e.to_string()),
    };
    Handled { response, journal }
}
