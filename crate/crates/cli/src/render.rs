//! Human-readable tables.

use std::fmt::Write;

use netsmo_core::recipe::DeploymentReport;
use netsmo_core::OverlayNetwork;
use serde_json::Value;

use crate::BenchSummary;

fn table(header: &[&str], rows: &[Vec<String>]) -> String {
    let mut width: Vec<usize> = header.iter().map(|h| h.len()).collect();
    for r in rows {
        for (w, c) in width.iter_mut().zip(r) {
            *w = (*w).max(c.len());
        }
    }
    let mut out = String::new();
    let mut line = |cells: Vec<&str>| {
        let s: Vec<String> = cells
            .iter()
            .zip(&width)
            .map(|(c, w)| format!("{c:<w$}"))
            .collect();
        let _ = writeln!(out, "{}", s.join("  ").trim_end());
    };
    line(header.to_vec());
    for r in rows {
        line(r.iter().map(String::as_str).collect());
    }
    out
}

/// The serialized form of a unit enum, e.g. `DONE`.
fn word<T: serde::Serialize>(v: &T) -> String {
    match serde_json::to_value(v) {
        Ok(Value::String(s)) => s,
        _ => "?".into(),
    }
}

fn tick(t: Option<u64>) -> String {
    t.map_or_else(|| "-".into(), |t| t.to_string())
}

pub fn report(r: &DeploymentReport) -> String {
    let rows: Vec<Vec<String>> = r
        .steps
        .iter()
        .map(|s| {
            vec![
                s.step_id.clone(),
                word(&s.outcome),
                tick(s.start_tick),
                tick(s.end_tick),
                s.detail.clone().unwrap_or_default(),
            ]
        })
        .collect();
    format!(
        "deployment {}: {} ({} ticks)\n\n{}\ncritical path: {}\n",
        r.deployment_id,
        r.status,
        r.total_duration,
        table(&["STEP", "OUTCOME", "START", "END", "DETAIL"], &rows),
        r.critical_path.join(" > ")
    )
}

pub fn vpn(o: &OverlayNetwork) -> String {
    let rows: Vec<Vec<String>> = o
        .members
        .iter()
        .map(|m| {
            vec![
                m.node_id.clone(),
                word(&m.role),
                m.overlay_address.to_string(),
            ]
        })
        .collect();
    format!(
        "overlay {} on {} (server endpoint {}:{})\n\n{}",
        o.network_id,
        o.subnet,
        o.server_endpoint.address,
        o.server_endpoint.port,
        table(&["NODE", "ROLE", "OVERLAY"], &rows)
    )
}

pub fn services(list: &Value) -> String {
    let rows: Vec<Vec<String>> = list
        .as_array()
        .into_iter()
        .flatten()
        .map(|s| {
            let f = |k: &str| s[k].as_str().unwrap_or("").to_string();
            vec![f("service_id"), f("service_type"), f("version"), s["launch_spec"]["image_ref"].as_str().unwrap_or("").to_string()]
        })
        .collect();
    if rows.is_empty() {
        return "no services registered\n".into();
    }
    table(&["SERVICE", "TYPE", "VERSION", "IMAGE"], &rows)
}

pub fn bench(b: &BenchSummary) -> String {
    let rows: Vec<Vec<String>> = b
        .runs
        .iter()
        .map(|r| {
            vec![
                r.seed.to_string(),
                r.baseline_duration.to_string(),
                r.with_services_duration.to_string(),
                r.overhead.to_string(),
            ]
        })
        .collect();
    format!(
        "{}\nmean overhead {:.2} ticks, max {} ticks over {} seeds\n",
        table(&["SEED", "BASELINE", "WITH SERVICES", "OVERHEAD"], &rows),
        b.mean_overhead,
        b.max_overhead,
        b.runs.len()
    )
}
