//! Aggregation of finished runs into summary tables and plot data.

use std::collections::BTreeMap;
use std::fmt::Write as _;
use std::path::{Path, PathBuf};

use serde_json::Value;

use crate::config::value_diff;
use crate::error::{Error, Result};

#[derive(Debug)]
pub struct ReportSummary {
    pub runs: usize,
    pub groups: usize,
    pub summary_path: PathBuf,
}

struct Run {
    dir: PathBuf,
    subcommand: String,
    hash: String,
    config: Value,
}

fn read_manifest(dir: &Path) -> Result<Option<Run>> {
    let p = dir.join("manifest.json");
    if !p.is_file() {
        return Ok(None);
    }
    let text = std::fs::read_to_string(&p).map_err(|e| Error::io(&p, e))?;
    let v: Value = serde_json::from_str(&text).map_err(|e| Error::json(p.display().to_string(), e))?;
    let field = |k: &str| {
        v.get(k)
            .and_then(Value::as_str)
            .map(str::to_string)
            .ok_or_else(|| Error::Config(format!("{}: manifest lacks `{k}`", p.display())))
    };
    Ok(Some(Run {
        dir: dir.to_path_buf(),
        subcommand: field("subcommand")?,
        hash: field("config_hash")?,
        config: v.get("config").cloned().unwrap_or(Value::Null),
    }))
}

/// `key,metric,value` rows, skipping the hash comment and header.
fn read_summary(dir: &Path) -> Result<Vec<(String, String, f64)>> {
    let p = dir.join("summary.csv");
    if !p.is_file() {
        return Ok(Vec::new());
    }
    let text = std::fs::read_to_string(&p).map_err(|e| Error::io(&p, e))?;
    let mut out = Vec::new();
    for (i, line) in text.lines().enumerate() {
        if line.starts_with('#') || line.starts_with("key,") || line.is_empty() {
            continue;
        }
        let mut it = line.rsplitn(3, ',');
        let (v, m, k) = (it.next(), it.next(), it.next());
        let (Some(v), Some(m), Some(k)) = (v, m, k) else {
            return Err(Error::Config(format!("{}:{}: expected key,metric,value", p.display(), i + 1)));
        };
        let v: f64 = v
            .parse()
            .map_err(|_| Error::Config(format!("{}:{}: `{v}` is not a number", p.display(), i + 1)))?;
        out.push((k.to_string(), m.to_string(), v));
    }
    Ok(out)
}

/// Mean and sample standard deviation (`None` below two values).
pub(crate) fn mean_stdev(v: &[f64]) -> (f64, Option<f64>) {
    let n = v.len() as f64;
    let m = v.iter().sum::<f64>() / n;
    if v.len() < 2 {
        return (m, None);
    }
    let ss: f64 = v.iter().map(|x| (x - m).powi(2)).sum();
    (m, Some((ss / (n - 1.0)).sqrt()))
}

fn fmt_sd(s: Option<f64>) -> String {
    s.map_or(String::new(), |s| s.to_string())
}

fn parse_key(key: &str) -> BTreeMap<&str, &str> {
    key.split(';').filter_map(|kv| kv.split_once('=')).collect()
}

type Agg = BTreeMap<(String, String, String), Vec<f64>>;

const PALETTE: [&str; 6] = ["#1f77b4", "#d62728", "#2ca02c", "#9467bd", "#ff7f0e", "#17becf"];

/// Minimal line chart; one polyline per series.
pub(crate) fn line_chart(title: &str, xlabel: &str, ylabel: &str, series: &[(String, Vec<(f64, f64)>)]) -> String {
    let (w, h, m) = (520.0, 340.0, 50.0);
    let pts = series.iter().flat_map(|s| s.1.iter());
    let (mut x0, mut x1, mut y0, mut y1) = (f64::INFINITY, f64::NEG_INFINITY, f64::INFINITY, f64::NEG_INFINITY);
    for &(x, y) in pts.filter(|p| p.0.is_finite() && p.1.is_finite()) {
        x0 = x0.min(x);
        x1 = x1.max(x);
        y0 = y0.min(y);
        y1 = y1.max(y);
    }
    if !x0.is_finite() {
        (x0, x1, y0, y1) = (0.0, 1.0, 0.0, 1.0);
    }
    if x1 - x0 < 1e-12 {
        x1 = x0 + 1.0;
    }
    if y1 - y0 < 1e-12 {
        y1 = y0 + 1.0;
    }
    let sx = |x: f64| m + (x - x0) / (x1 - x0) * (w - 2.0 * m);
    let sy = |y: f64| h - m - (y - y0) / (y1 - y0) * (h - 2.0 * m);
    let mut s = String::new();
    let _ = writeln!(s, r#"<svg xmlns="http://www.w3.org/2000/svg" width="{w}" height="{h}" font-family="sans-serif" font-size="11">"#);
    let _ = writeln!(s, r#"<text x="{}" y="18" text-anchor="middle" font-size="13">{title}</text>"#, w / 2.0);
    let _ = writeln!(s, r#"<line x1="{m}" y1="{}" x2="{}" y2="{}" stroke="black"/>"#, h - m, w - m, h - m);
    let _ = writeln!(s, r#"<line x1="{m}" y1="{m}" x2="{m}" y2="{}" stroke="black"/>"#, h - m);
    let _ = writeln!(s, r#"<text x="{}" y="{}" text-anchor="middle">{xlabel}</text>"#, w / 2.0, h - 12.0);
    let _ = writeln!(s, r#"<text x="14" y="{}" text-anchor="middle" transform="rotate(-90 14 {})">{ylabel}</text>"#, h / 2.0, h / 2.0);
    for val in [x0, x1] {
        let _ = writeln!(s, r#"<text x="{}" y="{}" text-anchor="middle">{val:.3}</text>"#, sx(val), h - m + 14.0);
    }
    for val in [y0, y1] {
        let _ = writeln!(s, r#"<text x="{}" y="{}" text-anchor="end">{val:.3}</text>"#, m - 4.0, sy(val) + 4.0);
    }
    for (i, (name, p)) in series.iter().enumerate() {
        let c = PALETTE[i % PALETTE.len()];
        let path: Vec<String> = p
            .iter()
            .filter(|q| q.0.is_finite() && q.1.is_finite())
            .map(|&(x, y)| format!("{:.2},{:.2}", sx(x), sy(y)))
            .collect();
        let _ = writeln!(s, r#"<polyline fill="none" stroke="{c}" stroke-width="1.5" points="{}"/>"#, path.join(" "));
        let ly = m + 14.0 * i as f64;
        let _ = writeln!(s, r#"<text x="{}" y="{ly}" fill="{c}">{name}</text>"#, w - m - 120.0);
    }
    s.push_str("</svg>\n");
    s
}

fn write(path: &Path, body: &str) -> Result<()> {
    std::fs::write(path, body).map_err(|e| Error::io(path, e))
}

/// Merges every finished run below `root` into `<root>/report/`.
///
/// Runs are grouped by subcommand; a group whose manifests disagree on
/// the config hash is refused with the differing config paths.
pub fn report(root: &Path) -> Result<ReportSummary> {
    let mut runs = Vec::new();
    if root.is_dir() {
        let mut dirs: Vec<PathBuf> = std::fs::read_dir(root)
            .map_err(|e| Error::io(root, e))?
            .filter_map(|e| e.ok().map(|e| e.path()))
            .filter(|p| p.is_dir())
            .collect();
        dirs.sort();
        for d in dirs {
            if let Some(r) = read_manifest(&d)? {
                if r.subcommand != "report" {
                    runs.push(r);
                }
            }
        }
    }
    let mut groups: BTreeMap<String, Vec<&Run>> = BTreeMap::new();
    for r in &runs {
        groups.entry(r.subcommand.clone()).or_default().push(r);
    }
    for (sub, g) in &groups {
        let first = g[0];
        if let Some(bad) = g.iter().find(|r| r.hash != first.hash) {
            let diff = value_diff(&first.config, &bad.config);
            let mut msg = format!(
                "runs of `{sub}` disagree on config hash: {} ({}) vs {} ({})",
                first.dir.display(),
                &first.hash[..12.min(first.hash.len())],
                bad.dir.display(),
                &bad.hash[..12.min(bad.hash.len())],
            );
            for line in diff {
                let _ = write!(msg, "\n  {line}");
            }
            return Err(Error::Config(msg));
        }
    }

    let mut agg: Agg = BTreeMap::new();
    for r in &runs {
        for (k, m, v) in read_summary(&r.dir)? {
            agg.entry((r.subcommand.clone(), k, m)).or_default().push(v);
        }
    }

    let out = root.join("report");
    std::fs::create_dir_all(&out).map_err(|e| Error::io(&out, e))?;
    let mut summary = String::from("subcommand,key,metric,n,mean,stdev\n");
    let hashes: BTreeMap<&str, &str> = groups.iter().map(|(s, g)| (s.as_str(), g[0].hash.as_str())).collect();
    for ((sub, k, m), v) in &agg {
        let (mean, sd) = mean_stdev(v);
        let _ = writeln!(summary, "{sub},{k},{m},{},{mean},{}", v.len(), fmt_sd(sd));
    }
    let summary_path = out.join("summary.csv");
    write(&summary_path, &summary)?;
    let mut hash_csv = String::from("subcommand,config_hash,runs\n");
    for (s, h) in &hashes {
        let _ = writeln!(hash_csv, "{s},{h},{}", groups[*s].len());
    }
    write(&out.join("groups.csv"), &hash_csv)?;

    write_accuracy_grid(&agg, &out)?;
    write_entropy_series(&agg, &out)?;
    write_radius_series(&agg, &out)?;

    Ok(ReportSummary { runs: runs.len(), groups: groups.len(), summary_path })
}

/// Rows `variant,mode` x `clean, shifted` from `eval-shift` and `eval-de`.
fn write_accuracy_grid(agg: &Agg, out: &Path) -> Result<()> {
    let mut cells: BTreeMap<(String, String), [Option<&Vec<f64>>; 2]> = BTreeMap::new();
    for ((sub, k, m), v) in agg {
        if sub != "eval-shift" && sub != "eval-de" {
            continue;
        }
        let col = match m.as_str() {
            "clean_accuracy" => 0,
            "mean_shift_accuracy" => 1,
            _ => continue,
        };
        let kv = parse_key(k);
        let (Some(var), Some(mode)) = (kv.get("variant"), kv.get("mode")) else { continue };
        cells.entry((var.to_string(), mode.to_string())).or_default()[col] = Some(v);
    }
    let mut s = String::from("variant,mode,n,clean_mean,clean_stdev,shift_mean,shift_stdev\n");
    for ((var, mode), [c, sh]) in &cells {
        let n = c.or(*sh).map_or(0, |v| v.len());
        let cell = |v: &Option<&Vec<f64>>| {
            v.map_or((String::new(), String::new()), |v| {
                let (m, sd) = mean_stdev(v);
                (m.to_string(), fmt_sd(sd))
            })
        };
        let ((cm, cs), (sm, ss)) = (cell(c), cell(sh));
        let _ = writeln!(s, "{var},{mode},{n},{cm},{cs},{sm},{ss}");
    }
    write(&out.join("accuracy_grid.csv"), &s)
}

fn write_entropy_series(agg: &Agg, out: &Path) -> Result<()> {
    let mut series: BTreeMap<String, Vec<(f64, f64, Option<f64>, usize)>> = BTreeMap::new();
    for ((sub, k, m), v) in agg {
        if sub != "entropy-curve" || m != "mean_entropy" {
            continue;
        }
        let kv = parse_key(k);
        let (Some(var), Some(t)) = (kv.get("variant"), kv.get("t").and_then(|t| t.parse::<f64>().ok())) else {
            continue;
        };
        let (mean, sd) = mean_stdev(v);
        series.entry(var.to_string()).or_default().push((t, mean, sd, v.len()));
    }
    let mut s = String::from("variant,t,n,mean_entropy,stdev\n");
    let mut plot = Vec::new();
    for (var, pts) in &mut series {
        pts.sort_by(|a, b| a.0.total_cmp(&b.0));
        for (t, m, sd, n) in pts.iter() {
            let _ = writeln!(s, "{var},{t},{n},{m},{}", fmt_sd(*sd));
        }
        plot.push((var.clone(), pts.iter().map(|p| (p.0, p.1)).collect()));
    }
    write(&out.join("entropy_series.csv"), &s)?;
    if !plot.is_empty() {
        write(&out.join("entropy.svg"), &line_chart("Mean prediction entropy", "t", "entropy", &plot))?;
    }
    Ok(())
}

fn write_radius_series(agg: &Agg, out: &Path) -> Result<()> {
    let mut series: BTreeMap<(String, String), Vec<(f64, f64, Option<f64>, usize)>> = BTreeMap::new();
    for ((sub, k, m), v) in agg {
        if sub != "certify" || m != "certified_accuracy" {
            continue;
        }
        let kv = parse_key(k);
        let (Some(var), Some(sig), Some(r)) =
            (kv.get("variant"), kv.get("sigma"), kv.get("radius").and_then(|r| r.parse::<f64>().ok()))
        else {
            continue;
        };
        let (mean, sd) = mean_stdev(v);
        series.entry((var.to_string(), sig.to_string())).or_default().push((r, mean, sd, v.len()));
    }
    let mut s = String::from("variant,sigma,radius,n,certified_accuracy,stdev\n");
    let mut plot = Vec::new();
    for ((var, sig), pts) in &mut series {
        pts.sort_by(|a, b| a.0.total_cmp(&b.0));
        for (r, m, sd, n) in pts.iter() {
            let _ = writeln!(s, "{var},{sig},{r},{n},{m},{}", fmt_sd(*sd));
        }
        plot.push((format!("{var} sigma={sig}"), pts.iter().map(|p| (p.0, p.1)).collect()));
    }
    write(&out.join("radius_accuracy.csv"), &s)?;
    if !plot.is_empty() {
        write(&out.join("radius_accuracy.svg"), &line_chart("Certified accuracy", "radius", "accuracy", &plot))?;
    }
    Ok(())
}
