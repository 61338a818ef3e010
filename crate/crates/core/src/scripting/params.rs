use std::collections::{BTreeSet, HashMap};
use std::time::Duration;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use super::{Method, Policy, Script, ScriptError, Step, ThinkTime};

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct ResolvedRequest {
    pub method: Method,
    pub url: String,
    pub headers: Vec<(String, String)>,
    pub body: Option<String>,
    pub assert_status: Option<BTreeSet<u16>>,
}

impl ResolvedRequest {
    pub fn accepts(&self, status: u16) -> bool {
        match &self.assert_status {
            Some(allowed) => allowed.contains(&status),
            None => status < 400,
        }
    }
}

/// A step with every placeholder substituted and think ranges drawn.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub enum ResolvedStep {
    Request(ResolvedRequest),
    StartTransaction(String),
    EndTransaction(String),
    Rendezvous(String),
    Think(Duration),
}

/// Resolves a script for one vuser iteration.
///
/// Row selection per table: sequential uses `iteration mod N`, unique uses
/// `vuser_id mod N`, random draws from a generator seeded with
/// `seed ^ vuser_id` on stream `iteration`. Only tables that some template
/// references are consulted, so an unused empty table is not an error.
pub fn bind_parameters(
    script: &Script,
    vuser_id: u64,
    iteration: u64,
    seed: u64,
) -> Result<Vec<ResolvedStep>, ScriptError> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed ^ vuser_id);
    rng.set_stream(iteration);

    let referenced = script.referenced_columns();
    let mut values: HashMap<&str, &str> = HashMap::new();
    for (name, table) in &script.parameters {
        let n = table.rows.len();
        let row = match table.policy {
            Policy::Sequential => (n > 0).then(|| (iteration % n as u64) as usize),
            Policy::Unique => (n > 0).then(|| (vuser_id % n as u64) as usize),
            // Draw even when unreferenced so the stream position does not
            // depend on which templates exist.
            Policy::Random => (n > 0).then(|| rng.gen_range(0..n)),
        };
        let used = table.columns.iter().any(|c| referenced.contains(c.as_str()));
        match row {
            Some(row) => {
                for (column, value) in table.columns.iter().zip(&table.rows[row]) {
                    values.insert(column, value);
                }
            }
            None if used => return Err(ScriptError::EmptyTable(name.clone())),
            None => {}
        }
    }

    script
        .steps
        .iter()
        .map(|step| {
            Ok(match step {
                Step::Request(req) => ResolvedRequest {
                    method: req.method,
                    url: substitute(&req.url, &values)?,
                    headers: req
                        .headers
                        .iter()
                        .map(|(k, v)| Ok((k.clone(), substitute(v, &values)?)))
                        .collect::<Result<_, ScriptError>>()?,
                    body: req.body.as_deref().map(|b| substitute(b, &values)).transpose()?,
                    assert_status: req.assert_status.clone(),
                }
                .into(),
                Step::StartTransaction(n) => ResolvedStep::StartTransaction(n.clone()),
                Step::EndTransaction(n) => ResolvedStep::EndTransaction(n.clone()),
                Step::Rendezvous(n) => ResolvedStep::Rendezvous(n.clone()),
                Step::Think(ThinkTime::Fixed(ms)) => ResolvedStep::Think(Duration::from_millis(*ms)),
                Step::Think(ThinkTime::Range(lo, hi)) => {
                    ResolvedStep::Think(Duration::from_millis(rng.gen_range(*lo..=*hi)))
                }
            })
        })
        .collect()
}

impl From<ResolvedRequest> for ResolvedStep {
    fn from(req: ResolvedRequest) -> Self {
        ResolvedStep::Request(req)
    }
}

fn substitute(template: &str, values: &HashMap<&str, &str>) -> Result<String, ScriptError> {
    if !template.contains("{{") {
        return Ok(template.to_string());
    }
    let mut out = String::with_capacity(template.len());
    let mut rest = template;
    while let Some(open) = rest.find("{{") {
        let after = &rest[open + 2..];
        let Some(close) = after.find("}}") else { break };
        let key = after[..close].trim();
        let value = values
            .get(key)
            .ok_or_else(|| ScriptError::UnboundParameter(key.to_string()))?;
        out.push_str(&rest[..open]);
        out.push_str(value);
        rest = &after[close + 2..];
    }
    out.push_str(rest);
    Ok(out)
}
