//! Test scripts: an ordered list of steps (requests, transaction markers,
//! rendezvous points and think time) plus the parameter tables that feed
//! data-driven requests.
//!
//! Scripts live on disk as JSON documents. Parameter tables are either
//! referenced as CSV files (first row = column names) or carried inline as
//! `columns` + `rows`, which is also the form [`Script::to_document`] emits
//! so a serialized script is self-contained.

mod params;
pub mod recorder;

use std::collections::{BTreeMap, BTreeSet, HashMap, HashSet};
use std::fmt;
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};
use thiserror::Error;

pub use params::{bind_parameters, ResolvedRequest, ResolvedStep};
pub use recorder::{record_session, RecordError, Recorder};

#[derive(Debug, Error)]
pub enum ScriptError {
    #[error("syntax error: {0}")]
    Syntax(String),
    #[error("unbalanced transaction {name:?} at step {step}")]
    UnbalancedTransaction { name: String, step: usize },
    #[error("unbound parameter {{{{{0}}}}}")]
    UnboundParameter(String),
    #[error("parameter table {0:?} has no rows")]
    EmptyTable(String),
    #[error("invalid step {step}: {reason}")]
    InvalidStep { step: usize, reason: String },
    #[error("cannot read {path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "UPPERCASE")]
pub enum Method {
    Get,
    Post,
    Put,
    Delete,
    Head,
}

impl Method {
    pub fn as_str(self) -> &'static str {
        match self {
            Method::Get => "GET",
            Method::Post => "POST",
            Method::Put => "PUT",
            Method::Delete => "DELETE",
            Method::Head => "HEAD",
        }
    }

    pub fn parse(s: &str) -> Option<Self> {
        match s {
            "GET" => Some(Method::Get),
            "POST" => Some(Method::Post),
            "PUT" => Some(Method::Put),
            "DELETE" => Some(Method::Delete),
            "HEAD" => Some(Method::Head),
            _ => None,
        }
    }
}

impl fmt::Display for Method {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct RequestStep {
    pub method: Method,
    /// Path (and query) relative to the scenario target, or an absolute URL.
    /// May contain `{{column}}` placeholders.
    pub url: String,
    #[serde(default, skip_serializing_if = "BTreeMap::is_empty")]
    pub headers: BTreeMap<String, String>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub body: Option<String>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub assert_status: Option<BTreeSet<u16>>,
}

impl RequestStep {
    pub fn get(url: impl Into<String>) -> Self {
        RequestStep {
            method: Method::Get,
            url: url.into(),
            headers: BTreeMap::new(),
            body: None,
            assert_status: None,
        }
    }

    pub fn expect(mut self, status: u16) -> Self {
        self.assert_status.get_or_insert_with(BTreeSet::new).insert(status);
        self
    }
}

/// Think time in milliseconds: exact, or drawn uniformly from `[lo, hi]`.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(untagged)]
pub enum ThinkTime {
    Fixed(u64),
    Range(u64, u64),
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub enum Step {
    #[serde(rename = "request")]
    Request(RequestStep),
    #[serde(rename = "start_tx")]
    StartTransaction(String),
    #[serde(rename = "end_tx")]
    EndTransaction(String),
    #[serde(rename = "rendezvous")]
    Rendezvous(String),
    #[serde(rename = "think_ms")]
    Think(ThinkTime),
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Policy {
    /// Row `iteration mod N`.
    Sequential,
    /// Row `vuser_id mod N`.
    Unique,
    /// Uniform draw from the vuser's seeded generator.
    Random,
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct ParameterTable {
    pub policy: Policy,
    pub columns: Vec<String>,
    pub rows: Vec<Vec<String>>,
}

impl ParameterTable {
    pub fn new(policy: Policy, columns: &[&str], rows: &[&[&str]]) -> Self {
        ParameterTable {
            policy,
            columns: columns.iter().map(|c| c.to_string()).collect(),
            rows: rows
                .iter()
                .map(|r| r.iter().map(|v| v.to_string()).collect())
                .collect(),
        }
    }

    fn load_csv(path: &Path, policy: Policy) -> Result<Self, ScriptError> {
        let mut reader = csv::ReaderBuilder::new()
            .has_headers(true)
            .from_path(path)
            .map_err(|e| csv_error(path, e))?;
        let columns = reader
            .headers()
            .map_err(|e| csv_error(path, e))?
            .iter()
            .map(|h| h.trim().to_string())
            .collect::<Vec<_>>();
        let mut rows = Vec::new();
        for record in reader.records() {
            let record = record.map_err(|e| csv_error(path, e))?;
            rows.push(record.iter().map(str::to_string).collect());
        }
        Ok(ParameterTable { policy, columns, rows })
    }
}

fn csv_error(path: &Path, err: csv::Error) -> ScriptError {
    if err.is_io_error() {
        match err.into_kind() {
            csv::ErrorKind::Io(source) => ScriptError::Io {
                path: path.to_path_buf(),
                source,
            },
            _ => unreachable!(),
        }
    } else {
        ScriptError::Syntax(format!("{}: {err}", path.display()))
    }
}

/// A validated test script. Immutable once built; share it behind an `Arc`.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Script {
    pub name: String,
    pub parameters: BTreeMap<String, ParameterTable>,
    pub steps: Vec<Step>,
}

#[derive(Debug, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
struct ScriptDoc {
    name: String,
    #[serde(default)]
    parameters: BTreeMap<String, TableDoc>,
    #[serde(default)]
    steps: Vec<Step>,
}

#[derive(Debug, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
struct TableDoc {
    policy: Policy,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    file: Option<String>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    columns: Option<Vec<String>>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    rows: Option<Vec<Vec<String>>>,
}

/// Parses and validates a script document. Relative CSV paths resolve against
/// `base_dir` (or the working directory when `None`).
pub fn parse_script(document: &str, base_dir: Option<&Path>) -> Result<Script, ScriptError> {
    let doc: ScriptDoc =
        serde_json::from_str(document).map_err(|e| ScriptError::Syntax(e.to_string()))?;
    let mut parameters = BTreeMap::new();
    for (name, table) in doc.parameters {
        let loaded = match (table.file, table.columns) {
            (Some(file), None) => {
                let path = match base_dir {
                    Some(dir) => dir.join(&file),
                    None => PathBuf::from(&file),
                };
                ParameterTable::load_csv(&path, table.policy)?
            }
            (None, Some(columns)) => ParameterTable {
                policy: table.policy,
                columns,
                rows: table.rows.unwrap_or_default(),
            },
            _ => {
                return Err(ScriptError::Syntax(format!(
                    "parameter table {name:?} needs exactly one of \"file\" or \"columns\""
                )))
            }
        };
        parameters.insert(name, loaded);
    }
    let script = Script {
        name: doc.name,
        parameters,
        steps: doc.steps,
    };
    script.validate()?;
    Ok(script)
}

/// Reads and parses a script file; CSV tables resolve relative to its directory.
pub fn load_script(path: &Path) -> Result<Script, ScriptError> {
    let text = std::fs::read_to_string(path).map_err(|source| ScriptError::Io {
        path: path.to_path_buf(),
        source,
    })?;
    parse_script(&text, path.parent())
}

impl Script {
    /// Serializes to a self-contained document (tables inlined).
    pub fn to_document(&self) -> String {
        let doc = ScriptDoc {
            name: self.name.clone(),
            parameters: self
                .parameters
                .iter()
                .map(|(name, t)| {
                    (
                        name.clone(),
                        TableDoc {
                            policy: t.policy,
                            file: None,
                            columns: Some(t.columns.clone()),
                            rows: Some(t.rows.clone()),
                        },
                    )
                })
                .collect(),
            steps: self.steps.clone(),
        };
        serde_json::to_string_pretty(&doc).expect("script serializes")
    }

    pub fn validate(&self) -> Result<(), ScriptError> {
        if self.name.is_empty()
            || !self
                .name
                .chars()
                .all(|c| c.is_ascii_alphanumeric() || matches!(c, '_' | '-' | '.'))
        {
            return Err(ScriptError::Syntax(format!(
                "script name {:?} is not an identifier",
                self.name
            )));
        }

        let mut columns: HashMap<&str, &str> = HashMap::new();
        for (table_name, table) in &self.parameters {
            for column in &table.columns {
                if let Some(other) = columns.insert(column, table_name) {
                    return Err(ScriptError::Syntax(format!(
                        "column {column:?} declared by both {other:?} and {table_name:?}"
                    )));
                }
            }
            if let Some(bad) = table.rows.iter().position(|r| r.len() != table.columns.len()) {
                return Err(ScriptError::Syntax(format!(
                    "parameter table {table_name:?} row {bad} has the wrong number of fields"
                )));
            }
        }

        let mut open: Vec<(&str, usize)> = Vec::new();
        for (index, step) in self.steps.iter().enumerate() {
            match step {
                Step::Request(req) => {
                    if req.url.trim().is_empty() {
                        return Err(ScriptError::InvalidStep {
                            step: index,
                            reason: "empty url".into(),
                        });
                    }
                    for template in req.templates() {
                        for placeholder in placeholders(template) {
                            if !columns.contains_key(placeholder) {
                                return Err(ScriptError::UnboundParameter(placeholder.to_string()));
                            }
                        }
                    }
                }
                Step::StartTransaction(name) => {
                    if name.is_empty() {
                        return Err(ScriptError::InvalidStep {
                            step: index,
                            reason: "empty transaction name".into(),
                        });
                    }
                    if open.iter().any(|(n, _)| n == name) {
                        return Err(ScriptError::UnbalancedTransaction {
                            name: name.clone(),
                            step: index,
                        });
                    }
                    open.push((name, index));
                }
                Step::EndTransaction(name) => match open.last() {
                    Some((top, _)) if top == name => {
                        open.pop();
                    }
                    _ => {
                        return Err(ScriptError::UnbalancedTransaction {
                            name: name.clone(),
                            step: index,
                        })
                    }
                },
                Step::Rendezvous(name) => {
                    if name.is_empty() {
                        return Err(ScriptError::InvalidStep {
                            step: index,
                            reason: "empty rendezvous name".into(),
                        });
                    }
                }
                Step::Think(ThinkTime::Range(lo, hi)) if lo > hi => {
                    return Err(ScriptError::InvalidStep {
                        step: index,
                        reason: format!("think range [{lo}, {hi}] has lo > hi"),
                    });
                }
                Step::Think(_) => {}
            }
        }
        if let Some((name, step)) = open.first() {
            return Err(ScriptError::UnbalancedTransaction {
                name: name.to_string(),
                step: *step,
            });
        }
        Ok(())
    }

    /// Distinct rendezvous names referenced by this script.
    pub fn rendezvous_names(&self) -> BTreeSet<&str> {
        self.steps
            .iter()
            .filter_map(|s| match s {
                Step::Rendezvous(n) => Some(n.as_str()),
                _ => None,
            })
            .collect()
    }

    /// Number of records one iteration produces: explicit transaction pairs
    /// plus one implicit transaction per request outside any transaction.
    pub fn records_per_iteration(&self) -> usize {
        let mut depth = 0usize;
        let mut count = 0;
        for step in &self.steps {
            match step {
                Step::StartTransaction(_) => {
                    depth += 1;
                    count += 1;
                }
                Step::EndTransaction(_) => depth = depth.saturating_sub(1),
                Step::Request(_) if depth == 0 => count += 1,
                _ => {}
            }
        }
        count
    }

    pub fn request_paths(&self) -> Vec<&str> {
        self.steps
            .iter()
            .filter_map(|s| match s {
                Step::Request(r) => Some(r.url.as_str()),
                _ => None,
            })
            .collect()
    }

    pub fn referenced_columns(&self) -> HashSet<&str> {
        self.steps
            .iter()
            .filter_map(|s| match s {
                Step::Request(r) => Some(r),
                _ => None,
            })
            .flat_map(|r| r.templates().flat_map(placeholders).collect::<Vec<_>>())
            .collect()
    }
}

impl RequestStep {
    fn templates(&self) -> impl Iterator<Item = &str> {
        std::iter::once(self.url.as_str())
            .chain(self.headers.values().map(String::as_str))
            .chain(self.body.as_deref())
    }
}

/// Yields the trimmed names of every `{{name}}` placeholder in `template`.
pub(crate) fn placeholders(template: &str) -> impl Iterator<Item = &str> {
    let mut rest = template;
    std::iter::from_fn(move || {
        let open = rest.find("{{")?;
        let after = &rest[open + 2..];
        let close = after.find("}}")?;
        rest = &after[close + 2..];
        Some(after[..close].trim())
    })
}

#[cfg(test)]
mod tests {
    use super::*;

    fn doc(steps: &str) -> String {
        format!(r#"{{"name": "t", "steps": {steps}}}"#)
    }

    #[test]
    fn smallest_script_keeps_step_order() {
        let script = parse_script(
            &doc(r#"[{"start_tx": "browse"}, {"request": {"method": "GET", "url": "/browse"}}, {"end_tx": "browse"}]"#),
            None,
        )
        .unwrap();
        assert_eq!(script.steps.len(), 3);
        assert_eq!(script.steps[0], Step::StartTransaction("browse".into()));
        assert!(matches!(&script.steps[1], Step::Request(r) if r.url == "/browse"));
        assert_eq!(script.steps[2], Step::EndTransaction("browse".into()));
    }

    #[test]
    fn end_without_start_is_unbalanced() {
        let err = parse_script(&doc(r#"[{"end_tx": "buy"}]"#), None).unwrap_err();
        assert!(
            matches!(err, ScriptError::UnbalancedTransaction { ref name, step: 0 } if name == "buy"),
            "{err}"
        );
    }

    #[test]
    fn open_at_end_names_the_start() {
        let err = parse_script(
            &doc(r#"[{"think_ms": 1}, {"start_tx": "a"}, {"think_ms": 1}]"#),
            None,
        )
        .unwrap_err();
        assert!(matches!(err, ScriptError::UnbalancedTransaction { ref name, step: 1 } if name == "a"));
    }

    #[test]
    fn duplicate_open_transaction_rejected() {
        let err = parse_script(
            &doc(r#"[{"start_tx": "a"}, {"start_tx": "a"}, {"end_tx": "a"}, {"end_tx": "a"}]"#),
            None,
        )
        .unwrap_err();
        assert!(matches!(err, ScriptError::UnbalancedTransaction { step: 1, .. }));
    }

    #[test]
    fn interleaved_transactions_rejected() {
        let err = parse_script(
            &doc(r#"[{"start_tx": "a"}, {"start_tx": "b"}, {"end_tx": "a"}, {"end_tx": "b"}]"#),
            None,
        )
        .unwrap_err();
        assert!(matches!(err, ScriptError::UnbalancedTransaction { ref name, step: 2 } if name == "a"));
    }

    #[test]
    fn unknown_placeholder_is_unbound() {
        let err = parse_script(
            &doc(r#"[{"request": {"method": "GET", "url": "/search?q={{missing}}"}}]"#),
            None,
        )
        .unwrap_err();
        assert!(matches!(err, ScriptError::UnboundParameter(ref p) if p == "missing"));
    }

    #[test]
    fn bad_method_and_empty_url() {
        assert!(matches!(
            parse_script(&doc(r#"[{"request": {"method": "PATCH", "url": "/x"}}]"#), None),
            Err(ScriptError::Syntax(_))
        ));
        assert!(matches!(
            parse_script(&doc(r#"[{"request": {"method": "GET", "url": " "}}]"#), None),
            Err(ScriptError::InvalidStep { step: 0, .. })
        ));
    }

    #[test]
    fn think_forms() {
        let script = parse_script(&doc(r#"[{"think_ms": 100}, {"think_ms": [0, 500]}]"#), None).unwrap();
        assert_eq!(script.steps[0], Step::Think(ThinkTime::Fixed(100)));
        assert_eq!(script.steps[1], Step::Think(ThinkTime::Range(0, 500)));
        assert!(parse_script(&doc(r#"[{"think_ms": [5, 1]}]"#), None).is_err());
        assert!(parse_script(&doc(r#"[{"think_ms": -1}]"#), None).is_err());
    }

    #[test]
    fn malformed_json_is_syntax_error() {
        assert!(matches!(parse_script("{", None), Err(ScriptError::Syntax(_))));
    }

    #[test]
    fn csv_table_loads_relative_to_base_dir() {
        let dir = tempfile::tempdir().unwrap();
        std::fs::write(dir.path().join("terms.csv"), "term\nradio\nantenna\n").unwrap();
        let script = parse_script(
            r#"{"name": "search", "parameters": {"terms": {"policy": "unique", "file": "terms.csv"}},
                "steps": [{"request": {"method": "GET", "url": "/search?q={{term}}"}}]}"#,
            Some(dir.path()),
        )
        .unwrap();
        let table = &script.parameters["terms"];
        assert_eq!(table.columns, vec!["term"]);
        assert_eq!(table.rows, vec![vec!["radio"], vec!["antenna"]]);
    }

    #[test]
    fn missing_csv_is_io_error() {
        let err = parse_script(
            r#"{"name": "s", "parameters": {"t": {"policy": "random", "file": "nope.csv"}}, "steps": []}"#,
            Some(Path::new("/nonexistent")),
        )
        .unwrap_err();
        assert!(matches!(err, ScriptError::Io { .. }), "{err}");
    }

    #[test]
    fn records_per_iteration_counts_implicit_requests() {
        let script = parse_script(
            &doc(r#"[{"request": {"method": "GET", "url": "/a"}},
                     {"start_tx": "t"}, {"request": {"method": "GET", "url": "/b"}},
                     {"start_tx": "u"}, {"end_tx": "u"}, {"end_tx": "t"},
                     {"request": {"method": "GET", "url": "/c"}}]"#),
            None,
        )
        .unwrap();
        assert_eq!(script.records_per_iteration(), 4);
    }

    #[test]
    fn placeholder_scan() {
        let found: Vec<_> = placeholders("/a/{{x}}?b={{ y }}&c={{z").collect();
        assert_eq!(found, vec!["x", "y"]);
    }
}
