//! Multi-seed aggregation of finished stage directories.

use std::collections::{BTreeMap, BTreeSet};
use std::fmt::Write as _;
use std::path::{Path, PathBuf};

use serde::Serialize;
use serde_json::Value;
use uapath::report::MeanSd;

use crate::error::{CliError, CliResult};
use crate::rundir::{StageManifest, MANIFEST};

#[derive(Clone, Debug, Serialize)]
pub struct StageSummary {
    pub runs: usize,
    pub seeds: Vec<u64>,
    pub stage_config_hash: String,
    pub metrics: BTreeMap<String, MeanSd>,
}

#[derive(Clone, Debug, Serialize)]
pub struct BudgetRow {
    pub round: usize,
    pub labeled_fraction: Option<f64>,
    pub uncertainty_accuracy: Option<MeanSd>,
    pub random_accuracy: Option<MeanSd>,
    pub uncertainty_macro_f1: Option<MeanSd>,
    pub random_macro_f1: Option<MeanSd>,
}

#[derive(Clone, Debug, Serialize)]
pub struct Summary {
    pub stages: BTreeMap<String, StageSummary>,
    pub ua_vs_random: Vec<BudgetRow>,
}

/// Stage directories under `root`: `root/<stage>` or `root/<run>/<stage>`.
fn find_stage_dirs(root: &Path) -> CliResult<Vec<PathBuf>> {
    let mut found = Vec::new();
    let mut stack = vec![(root.to_path_buf(), 0)];
    while let Some((dir, depth)) = stack.pop() {
        if dir.join(MANIFEST).is_file() {
            found.push(dir);
            continue;
        }
        if depth == 2 {
            continue;
        }
        let entries = std::fs::read_dir(&dir).map_err(|e| CliError::io(&dir, e))?;
        for entry in entries.flatten() {
            let p = entry.path();
            let name = entry.file_name().to_string_lossy().to_string();
            if p.is_dir() && !name.starts_with('.') && name != "report" {
                stack.push((p, depth + 1));
            }
        }
    }
    found.sort();
    Ok(found)
}

/// Numeric leaves of a JSON object as dotted keys. Arrays are skipped.
pub fn flatten_numbers(v: &Value, prefix: &str, out: &mut BTreeMap<String, f64>) {
    if let Value::Object(map) = v {
        for (k, v) in map {
            let key = if prefix.is_empty() { k.clone() } else { format!("{prefix}.{k}") };
            match v {
                Value::Number(n) if key != "seed" => {
                    if let Some(x) = n.as_f64() {
                        out.insert(key, x);
                    }
                }
                Value::Object(_) => flatten_numbers(v, &key, out),
                _ => {}
            }
        }
    }
}

pub fn summarize(root: &Path) -> CliResult<Summary> {
    let dirs = find_stage_dirs(root)?;
    if dirs.is_empty() {
        return Err(CliError::new("E_EMPTY", format!("no finished stages under {}", root.display())));
    }
    let mut groups: BTreeMap<String, Vec<(StageManifest, BTreeMap<String, f64>)>> = BTreeMap::new();
    for d in dirs {
        let m = StageManifest::load(&d)?;
        let mut flat = BTreeMap::new();
        let path = d.join("metrics.json");
        if path.is_file() {
            let bytes = std::fs::read(&path).map_err(|e| CliError::io(&path, e))?;
            let v: Value = serde_json::from_slice(&bytes)?;
            flatten_numbers(&v, "", &mut flat);
        }
        groups.entry(m.stage.clone()).or_default().push((m, flat));
    }

    let mut stages = BTreeMap::new();
    for (stage, runs) in &groups {
        let hashes: BTreeSet<&str> = runs.iter().map(|(m, _)| m.stage_config_hash.as_str()).collect();
        if hashes.len() > 1 {
            return Err(CliError::new(
                "E_MIXED_CONFIG",
                format!("`{stage}` runs under {} use {} different configurations", root.display(), hashes.len()),
            ));
        }
        let keys: BTreeSet<&String> = runs.iter().flat_map(|(_, f)| f.keys()).collect();
        let mut metrics = BTreeMap::new();
        for k in keys {
            let vals: Vec<f64> = runs.iter().filter_map(|(_, f)| f.get(k).copied()).collect();
            if let Some(ms) = MeanSd::of(&vals) {
                metrics.insert(k.clone(), ms);
            }
        }
        let mut seeds: Vec<u64> = runs.iter().map(|(m, _)| m.seed).collect();
        seeds.sort_unstable();
        stages.insert(
            stage.clone(),
            StageSummary {
                runs: runs.len(),
                seeds,
                stage_config_hash: runs[0].0.stage_config_hash.clone(),
                metrics,
            },
        );
    }

    let ua = stages.get("ualoop");
    let rnd = stages.get("ualoop-random");
    let mut rounds = BTreeSet::new();
    for s in [ua, rnd].into_iter().flatten() {
        for k in s.metrics.keys() {
            if let Some(r) = k.strip_prefix("by_round.round_").and_then(|r| r.split('.').next()) {
                if let Ok(r) = r.parse::<usize>() {
                    rounds.insert(r);
                }
            }
        }
    }
    let get = |s: Option<&StageSummary>, r: usize, field: &str| {
        s.and_then(|s| s.metrics.get(&format!("by_round.round_{r:02}.{field}")).copied())
    };
    let ua_vs_random = rounds
        .into_iter()
        .map(|r| BudgetRow {
            round: r,
            labeled_fraction: get(ua, r, "labeled_fraction").or(get(rnd, r, "labeled_fraction")).map(|m| m.mean),
            uncertainty_accuracy: get(ua, r, "accuracy"),
            random_accuracy: get(rnd, r, "accuracy"),
            uncertainty_macro_f1: get(ua, r, "macro_f1"),
            random_macro_f1: get(rnd, r, "macro_f1"),
        })
        .collect();
    Ok(Summary { stages, ua_vs_random })
}

fn cells(m: Option<MeanSd>) -> String {
    m.map(|m| format!("{},{}", m.mean, m.sd)).unwrap_or_else(|| ",".into())
}

pub fn summary_csv(s: &Summary) -> String {
    let mut out = String::from("stage,metric,n,mean,sd\n");
    for (stage, st) in &s.stages {
        for (k, m) in &st.metrics {
            let _ = writeln!(out, "{stage},{k},{},{},{}", m.n, m.mean, m.sd);
        }
    }
    out
}

pub fn budget_csv(s: &Summary) -> String {
    let mut out = String::from(
        "round,labeled_fraction,ua_accuracy_mean,ua_accuracy_sd,random_accuracy_mean,random_accuracy_sd,\
         ua_macro_f1_mean,ua_macro_f1_sd,random_macro_f1_mean,random_macro_f1_sd\n",
    );
    for r in &s.ua_vs_random {
        let _ = writeln!(
            out,
            "{},{},{},{},{},{}",
            r.round,
            r.labeled_fraction.map(|f| f.to_string()).unwrap_or_default(),
            cells(r.uncertainty_accuracy),
            cells(r.random_accuracy),
            cells(r.uncertainty_macro_f1),
            cells(r.random_macro_f1)
        );
    }
    out
}

/// Writes `summary.json`, `summary.csv` and `ua_vs_random.csv` into
/// `out` (default `<root>/report`), which must not exist yet.
pub fn cmd_report(root: &Path, out: Option<&Path>) -> CliResult<PathBuf> {
    if !root.is_dir() {
        return Err(CliError::new("E_EMPTY", format!("{} is not a directory", root.display())));
    }
    let summary = summarize(root)?;
    let dest = out.map(Path::to_path_buf).unwrap_or_else(|| root.join("report"));
    if dest.exists() {
        return Err(CliError::new("E_EXISTS", format!("{} already exists", dest.display())));
    }
    std::fs::create_dir_all(&dest).map_err(|e| CliError::io(&dest, e))?;
    let write = |name: &str, text: String| {
        let p = dest.join(name);
        std::fs::write(&p, text).map_err(|e| CliError::io(&p, e))
    };
    write("summary.json", serde_json::to_string_pretty(&summary)? + "\n")?;
    write("summary.csv", summary_csv(&summary))?;
    write("ua_vs_random.csv", budget_csv(&summary))?;
    Ok(dest)
}

#[cfg(test)]
mod tests {
    use super::*;
    use serde_json::json;

    #[test]
    fn flattens_nested_numbers_only() {
        let v = json!({"seed": 3, "a": 1.5, "b": {"c": 2, "d": [1, 2]}, "e": null, "f": "x"});
        let mut out = BTreeMap::new();
        flatten_numbers(&v, "", &mut out);
        assert_eq!(out.len(), 2);
        assert_eq!(out["a"], 1.5);
        assert_eq!(out["b.c"], 2.0);
    }

    #[test]
    fn empty_root_is_an_error() {
        let d = tempfile::tempdir().unwrap();
        assert_eq!(cmd_report(d.path(), None).unwrap_err().code, "E_EMPTY");
        assert_eq!(cmd_report(&d.path().join("missing"), None).unwrap_err().code, "E_EMPTY");
    }
}
