use std::fmt::Write as _;
use std::fs;
use std::path::{Path, PathBuf};

use thiserror::Error;

use super::{RunReport, StatsMap, TransactionStats};
use crate::monitor::CounterSample;
use crate::runtime::TransactionRecord;

pub const TRANSACTIONS_HEADER: &str =
    "transaction,level,count,pass,fail,min_ms,avg_ms,p50_ms,p90_ms,p95_ms,max_ms,throughput_per_s,error_rate";
pub const COUNTERS_HEADER: &str = "host,counter,timestamp_ms,value";
pub const RECORDS_HEADER: &str =
    "run_id,group,vuser_id,iteration,transaction,start_ns,end_ns,wall_start_ms,status,connect_ns";

#[derive(Debug, Error)]
pub enum ReportError {
    #[error("{path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },
    #[error("{path}: {source}")]
    Csv {
        path: PathBuf,
        #[source]
        source: csv::Error,
    },
    #[error("{path}: unexpected header {found:?}")]
    Header { path: PathBuf, found: String },
}

fn io_err(path: &Path) -> impl FnOnce(std::io::Error) -> ReportError + '_ {
    move |source| ReportError::Io {
        path: path.to_path_buf(),
        source,
    }
}

fn csv_err(path: &Path) -> impl FnOnce(csv::Error) -> ReportError + '_ {
    move |source| ReportError::Csv {
        path: path.to_path_buf(),
        source,
    }
}

/// Writes `report.html`, `transactions.csv`, `counters.csv` and
/// `records.csv` into `out`. Output is a pure function of the report.
pub fn emit_report(report: &RunReport, out: &Path) -> Result<Vec<PathBuf>, ReportError> {
    fs::create_dir_all(out).map_err(io_err(out))?;
    let transactions = out.join("transactions.csv");
    fs::write(&transactions, transactions_csv(report)).map_err(io_err(&transactions))?;
    let counters = out.join("counters.csv");
    write_counters_csv(&counters, &report.counters)?;
    let records = out.join("records.csv");
    write_records_csv(&records, &report.records)?;
    let html = out.join("report.html");
    fs::write(&html, render_html(report)).map_err(io_err(&html))?;
    Ok(vec![html, transactions, counters, records])
}

fn stats_row(out: &mut String, name: &str, level: &str, stats: Option<&TransactionStats>) {
    match stats {
        Some(s) => {
            let _ = writeln!(
                out,
                "{},{},{},{},{},{:.3},{:.3},{:.3},{:.3},{:.3},{:.3},{:.3},{:.4}",
                csv_field(name),
                level,
                s.count,
                s.pass,
                s.fail,
                s.min_ms,
                s.avg_ms,
                s.p50_ms,
                s.p90_ms,
                s.p95_ms,
                s.max_ms,
                s.throughput_per_s,
                s.error_rate
            );
        }
        None => {
            let _ = writeln!(out, "{},{},0,0,0,,,,,,,0.000,", csv_field(name), level);
        }
    }
}

fn csv_field(s: &str) -> String {
    if s.contains([',', '"', '\n', '\r']) {
        format!("\"{}\"", s.replace('"', "\"\""))
    } else {
        s.to_string()
    }
}

/// One row per (transaction, level): level `all` covers the whole run, then
/// one row per step-load level in ascending order.
fn transactions_csv(report: &RunReport) -> String {
    let mut out = String::new();
    out.push_str(TRANSACTIONS_HEADER);
    out.push('\n');
    let mut names: Vec<&String> = report.overall.keys().collect();
    for (_, stats) in &report.per_level {
        names.extend(stats.keys());
    }
    names.sort();
    names.dedup();
    for name in names {
        stats_row(&mut out, name, "all", report.overall.get(name));
        for (level, stats) in &report.per_level {
            stats_row(&mut out, name, &level.to_string(), stats.get(name));
        }
    }
    out
}

pub fn write_records_csv(path: &Path, records: &[TransactionRecord]) -> Result<(), ReportError> {
    let mut writer = csv::Writer::from_path(path).map_err(csv_err(path))?;
    if records.is_empty() {
        writer
            .write_record(RECORDS_HEADER.split(','))
            .map_err(csv_err(path))?;
    }
    for r in records {
        writer.serialize(r).map_err(csv_err(path))?;
    }
    writer.flush().map_err(io_err(path))
}

/// Append-only `records.csv` writer used while a run is in progress.
pub struct RecordsWriter {
    path: PathBuf,
    writer: csv::Writer<fs::File>,
}

impl RecordsWriter {
    pub fn create(path: &Path) -> Result<Self, ReportError> {
        let file = fs::File::create(path).map_err(io_err(path))?;
        let mut writer = csv::WriterBuilder::new().has_headers(false).from_writer(file);
        writer
            .write_record(RECORDS_HEADER.split(','))
            .map_err(csv_err(path))?;
        writer.flush().map_err(io_err(path))?;
        Ok(RecordsWriter { path: path.to_path_buf(), writer })
    }

    pub fn append(&mut self, records: &[TransactionRecord]) -> Result<(), ReportError> {
        for r in records {
            self.writer.serialize(r).map_err(csv_err(&self.path))?;
        }
        self.writer.flush().map_err(io_err(&self.path))
    }
}

pub fn write_counters_csv(path: &Path, samples: &[CounterSample]) -> Result<(), ReportError> {
    let mut writer = csv::Writer::from_path(path).map_err(csv_err(path))?;
    if samples.is_empty() {
        writer
            .write_record(COUNTERS_HEADER.split(','))
            .map_err(csv_err(path))?;
    }
    for s in samples {
        writer.serialize(s).map_err(csv_err(path))?;
    }
    writer.flush().map_err(io_err(path))
}

fn read_csv<T: serde::de::DeserializeOwned>(path: &Path, header: &str) -> Result<Vec<T>, ReportError> {
    let mut reader = csv::Reader::from_path(path).map_err(csv_err(path))?;
    let found = reader
        .headers()
        .map_err(csv_err(path))?
        .iter()
        .collect::<Vec<_>>()
        .join(",");
    if found != header {
        return Err(ReportError::Header {
            path: path.to_path_buf(),
            found,
        });
    }
    reader
        .deserialize()
        .collect::<Result<Vec<T>, _>>()
        .map_err(csv_err(path))
}

pub fn read_records_csv(path: &Path) -> Result<Vec<TransactionRecord>, ReportError> {
    read_csv(path, RECORDS_HEADER)
}

pub fn read_counters_csv(path: &Path) -> Result<Vec<CounterSample>, ReportError> {
    read_csv(path, COUNTERS_HEADER)
}

fn html_escape(s: &str) -> String {
    s.replace('&', "&amp;")
        .replace('<', "&lt;")
        .replace('>', "&gt;")
        .replace('"', "&quot;")
}

fn fmt_opt(v: Option<f64>) -> String {
    v.map(|v| format!("{v:.2}")).unwrap_or_else(|| "-".into())
}

fn stats_table(out: &mut String, caption: &str, stats: &StatsMap) {
    let _ = writeln!(out, "<h2>{}</h2>", html_escape(caption));
    out.push_str(
        "<table><tr><th>transaction</th><th>count</th><th>pass</th><th>fail</th><th>min ms</th>\
         <th>avg ms</th><th>p50 ms</th><th>p90 ms</th><th>p95 ms</th><th>max ms</th>\
         <th>tx/s</th><th>error rate</th></tr>\n",
    );
    for s in stats.values() {
        let _ = writeln!(
            out,
            "<tr><td>{}</td><td>{}</td><td>{}</td><td>{}</td><td>{:.2}</td><td>{:.2}</td><td>{:.2}</td>\
             <td>{:.2}</td><td>{:.2}</td><td>{:.2}</td><td>{:.2}</td><td>{:.2}%</td></tr>",
            html_escape(&s.transaction),
            s.count,
            s.pass,
            s.fail,
            s.min_ms,
            s.avg_ms,
            s.p50_ms,
            s.p90_ms,
            s.p95_ms,
            s.max_ms,
            s.throughput_per_s,
            s.error_rate * 100.0
        );
    }
    out.push_str("</table>\n");
}

/// Inline SVG polyline chart; gaps in the series break the line.
fn svg_chart(out: &mut String, title: &str, unit: &str, series: &[Option<f64>]) {
    const W: f64 = 640.0;
    const H: f64 = 160.0;
    const PAD: f64 = 30.0;
    let max = series.iter().flatten().copied().fold(0.0f64, f64::max);
    let top = if max > 0.0 { max * 1.1 } else { 1.0 };
    let n = series.len().max(2) as f64 - 1.0;
    let _ = writeln!(out, "<h3>{} <small>({})</small></h3>", html_escape(title), html_escape(unit));
    let _ = writeln!(
        out,
        "<svg xmlns=\"http://www.w3.org/2000/svg\" width=\"{W}\" height=\"{H}\" viewBox=\"0 0 {W} {H}\">\
         <rect x=\"0\" y=\"0\" width=\"{W}\" height=\"{H}\" fill=\"#fafafa\" stroke=\"#ccc\"/>\
         <text x=\"4\" y=\"12\" font-size=\"10\">{top:.1}</text><text x=\"4\" y=\"{}\" font-size=\"10\">0</text>",
        H - 4.0
    );
    let mut segment: Vec<String> = Vec::new();
    let flush = |segment: &mut Vec<String>, out: &mut String| {
        if !segment.is_empty() {
            let _ = write!(
                out,
                "<polyline fill=\"none\" stroke=\"#2a6fdb\" stroke-width=\"1.5\" points=\"{}\"/>",
                segment.join(" ")
            );
            segment.clear();
        }
    };
    for (i, v) in series.iter().enumerate() {
        match v {
            Some(v) => {
                let x = PAD + (W - 2.0 * PAD) * i as f64 / n;
                let y = H - PAD / 2.0 - (H - PAD) * v / top;
                segment.push(format!("{x:.1},{y:.1}"));
            }
            None => flush(&mut segment, out),
        }
    }
    flush(&mut segment, out);
    out.push_str("</svg>\n");
}

fn render_html(report: &RunReport) -> String {
    let mut out = String::new();
    let meta = &report.meta;
    let _ = write!(
        out,
        "<!DOCTYPE html>\n<html><head><meta charset=\"utf-8\"><title>{} load test report</title>\n\
         <style>body{{font-family:sans-serif;margin:2em;color:#222}}table{{border-collapse:collapse;margin-bottom:1em}}\
         td,th{{border:1px solid #ccc;padding:3px 8px;text-align:right}}td:first-child,th:first-child{{text-align:left}}\
         .partial{{color:#b00;font-weight:bold}}</style></head><body>\n",
        html_escape(&meta.scenario)
    );
    let _ = writeln!(out, "<h1>{}</h1>", html_escape(&meta.scenario));
    let _ = writeln!(
        out,
        "<p>run <code>{}</code>, seed {}, {} records, {} counter samples</p>",
        html_escape(&meta.run_id),
        meta.seed,
        report.records.len(),
        report.counters.len()
    );
    if meta.partial {
        out.push_str("<p class=\"partial\">Partial run: an agent was lost or the run was aborted.</p>\n");
    }
    stats_table(&mut out, "Transactions (whole run)", &report.overall);
    for (level, stats) in &report.per_level {
        stats_table(&mut out, &format!("Step level {level} vusers"), stats);
    }
    if !report.per_level.is_empty() {
        let avg: Vec<Option<f64>> = report
            .per_level
            .iter()
            .map(|(_, s)| {
                let (n, sum) = s.values().fold((0u64, 0.0), |(n, sum), t| (n + t.count, sum + t.avg_ms * t.count as f64));
                (n > 0).then(|| sum / n as f64)
            })
            .collect();
        svg_chart(&mut out, "Average response time by step level", "ms", &avg);
    }
    let latency: Vec<Option<f64>> = report.latency.iter().map(|p| p.avg_ms).collect();
    let completed: Vec<Option<f64>> = report.latency.iter().map(|p| Some(p.completed as f64)).collect();
    svg_chart(&mut out, "Average response time per second", "ms", &latency);
    svg_chart(&mut out, "Completed transactions per second", "tx/s", &completed);
    for ((host, counter), series) in &report.overlay {
        svg_chart(&mut out, &format!("{host} {counter}"), counter.as_str(), series);
        let last = series.iter().rev().flatten().next().copied();
        let _ = writeln!(out, "<p>last value: {}</p>", fmt_opt(last));
    }
    out.push_str("</body></html>\n");
    out
}
