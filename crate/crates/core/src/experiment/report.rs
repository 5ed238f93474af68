//! CSV/JSON artifacts of an experiment and their readers.

use std::fs;
use std::path::Path;

use serde_json::json;

use crate::error::{Error, Result};
use crate::fmt::sig9;
use crate::losses::matrix_csv;
use crate::trainer::CurvePoint;

use super::{Cell, ExperimentReport};

pub const RESULTS_HEADER: [&str; 10] =
    ["variant", "beta", "fraction", "seed", "auc", "sens", "spec", "acc", "f1", "error"];
pub const CURVES_HEADER: [&str; 8] = ["epoch", "L_s", "L_c", "L_src", "lambda", "lr", "val_auc", "val_acc"];
const METRIC_NAMES: [&str; 5] = ["auc", "sens", "spec", "acc", "f1"];

/// One line of `results.csv`. Metrics are `None` for failed cells.
#[derive(Debug, Clone, PartialEq)]
pub struct ResultRow {
    pub variant: String,
    pub beta: f64,
    pub fraction: f64,
    pub seed: u64,
    /// auc, sens, spec, acc, f1
    pub metrics: Option<[f64; 5]>,
    pub error: String,
}

#[derive(Debug, Clone, PartialEq)]
pub struct SummaryRow {
    pub variant: String,
    pub beta: f64,
    pub fraction: f64,
    pub runs: usize,
    pub mean: [f64; 5],
    /// Sample standard deviation; 0 for a single run.
    pub sd: [f64; 5],
}

#[derive(Debug, Clone, PartialEq)]
pub struct DeltaRow {
    pub variant: String,
    pub beta: f64,
    pub fraction: f64,
    /// Mean metric minus the baseline's mean at the same labeled fraction.
    pub delta: [f64; 5],
}

fn opt(v: Option<f64>) -> String {
    v.map(sig9).unwrap_or_default()
}

fn csv_err(e: csv::Error) -> Error {
    Error::Parse(format!("csv: {e}"))
}

fn writer() -> csv::Writer<Vec<u8>> {
    csv::WriterBuilder::new().terminator(csv::Terminator::Any(b'\n')).from_writer(Vec::new())
}

fn finish(w: csv::Writer<Vec<u8>>) -> String {
    String::from_utf8(w.into_inner().expect("in-memory csv")).expect("utf-8 csv")
}

pub fn run_dir_name(cell: &Cell) -> String {
    format!(
        "{}_beta{}_frac{}_seed{}",
        cell.variant,
        sig9(cell.beta),
        sig9(cell.fraction),
        cell.seed
    )
}

pub fn result_rows(report: &ExperimentReport) -> Vec<ResultRow> {
    report
        .cells
        .iter()
        .map(|c| {
            let (metrics, error) = match &c.outcome {
                Ok(run) => {
                    let m = &run.metrics;
                    (Some([m.auc, m.sensitivity, m.specificity, m.accuracy, m.f1]), String::new())
                }
                Err(e) => (None, e.clone()),
            };
            ResultRow {
                variant: c.cell.variant.clone(),
                beta: c.cell.beta,
                fraction: c.cell.fraction,
                seed: c.cell.seed,
                metrics,
                error,
            }
        })
        .collect()
}

pub fn results_csv(rows: &[ResultRow]) -> String {
    let mut w = writer();
    w.write_record(RESULTS_HEADER).expect("in-memory csv");
    for r in rows {
        let mut rec = vec![r.variant.clone(), sig9(r.beta), sig9(r.fraction), r.seed.to_string()];
        match r.metrics {
            Some(m) => rec.extend(m.iter().map(|&v| sig9(v))),
            None => rec.extend(std::iter::repeat_n(String::new(), 5)),
        }
        rec.push(r.error.clone());
        w.write_record(&rec).expect("in-memory csv");
    }
    finish(w)
}

fn field<T: std::str::FromStr>(rec: &csv::StringRecord, i: usize, line: usize) -> Result<T>
where
    T::Err: std::fmt::Display,
{
    rec.get(i)
        .unwrap_or("")
        .parse()
        .map_err(|e| Error::Parse(format!("line {line}, column {}: {e}", i + 1)))
}

fn check_header(rdr: &mut csv::Reader<&[u8]>, want: &[&str]) -> Result<()> {
    let got = rdr.headers().map_err(csv_err)?;
    if got.iter().ne(want.iter().copied()) {
        return Err(Error::Parse(format!("unexpected header {got:?}")));
    }
    Ok(())
}

pub fn parse_results_csv(text: &str) -> Result<Vec<ResultRow>> {
    let mut rdr = csv::Reader::from_reader(text.as_bytes());
    check_header(&mut rdr, &RESULTS_HEADER)?;
    let mut rows = Vec::new();
    for (i, rec) in rdr.records().enumerate() {
        let rec = rec.map_err(csv_err)?;
        let line = i + 2;
        let metrics = if rec.get(4).unwrap_or("").is_empty() {
            None
        } else {
            let mut m = [0.0; 5];
            for (k, v) in m.iter_mut().enumerate() {
                *v = field(&rec, 4 + k, line)?;
            }
            Some(m)
        };
        rows.push(ResultRow {
            variant: rec.get(0).unwrap_or("").to_string(),
            beta: field(&rec, 1, line)?,
            fraction: field(&rec, 2, line)?,
            seed: field(&rec, 3, line)?,
            metrics,
            error: rec.get(9).unwrap_or("").to_string(),
        });
    }
    Ok(rows)
}

fn group_key(r: &ResultRow) -> (String, u64, u64) {
    (r.variant.clone(), r.beta.to_bits(), r.fraction.to_bits())
}

/// Mean and sample sd per (variant, beta, fraction), over successful runs, in
/// order of first appearance.
pub fn summarize(rows: &[ResultRow]) -> Vec<SummaryRow> {
    let mut order: Vec<(String, u64, u64)> = Vec::new();
    for r in rows {
        let k = group_key(r);
        if !order.contains(&k) {
            order.push(k);
        }
    }
    let mut out = Vec::new();
    for key in order {
        let members: Vec<[f64; 5]> = rows
            .iter()
            .filter(|r| group_key(r) == key)
            .filter_map(|r| r.metrics)
            .collect();
        if members.is_empty() {
            continue;
        }
        let n = members.len() as f64;
        let mut mean = [0.0; 5];
        let mut sd = [0.0; 5];
        for k in 0..5 {
            mean[k] = members.iter().map(|m| m[k]).sum::<f64>() / n;
            if members.len() > 1 {
                let ss: f64 = members.iter().map(|m| (m[k] - mean[k]).powi(2)).sum();
                sd[k] = (ss / (n - 1.0)).sqrt();
            }
        }
        out.push(SummaryRow {
            variant: key.0,
            beta: f64::from_bits(key.1),
            fraction: f64::from_bits(key.2),
            runs: members.len(),
            mean,
            sd,
        });
    }
    out
}

pub fn summary_csv(rows: &[SummaryRow]) -> String {
    let mut w = writer();
    let mut header = vec!["variant".to_string(), "beta".into(), "fraction".into(), "runs".into()];
    for m in METRIC_NAMES {
        header.push(format!("{m}_mean"));
        header.push(format!("{m}_sd"));
    }
    w.write_record(&header).expect("in-memory csv");
    for r in rows {
        let mut rec = vec![r.variant.clone(), sig9(r.beta), sig9(r.fraction), r.runs.to_string()];
        for k in 0..5 {
            rec.push(sig9(r.mean[k]));
            rec.push(sig9(r.sd[k]));
        }
        w.write_record(&rec).expect("in-memory csv");
    }
    finish(w)
}

/// Per-group metric deltas against `baseline` at the same labeled fraction,
/// sorted by AUC delta (largest first). The baseline's own rows are left out
/// unless it is the only variant present.
pub fn compare_table(rows: &[ResultRow], baseline: &str) -> Result<Vec<DeltaRow>> {
    let groups = summarize(rows);
    let only_baseline = groups.iter().all(|g| g.variant == baseline);
    let mut out = Vec::new();
    for g in &groups {
        if g.variant == baseline && !only_baseline {
            continue;
        }
        let base: Vec<&SummaryRow> = groups
            .iter()
            .filter(|b| b.variant == baseline && b.fraction == g.fraction)
            .collect();
        if base.is_empty() {
            return Err(Error::Contract(format!(
                "baseline variant {baseline:?} has no successful runs at fraction {}",
                sig9(g.fraction)
            )));
        }
        let runs: usize = base.iter().map(|b| b.runs).sum();
        let mut delta = [0.0; 5];
        for (k, d) in delta.iter_mut().enumerate() {
            let base_mean = base.iter().map(|b| b.mean[k] * b.runs as f64).sum::<f64>() / runs as f64;
            *d = g.mean[k] - base_mean;
        }
        out.push(DeltaRow {
            variant: g.variant.clone(),
            beta: g.beta,
            fraction: g.fraction,
            delta,
        });
    }
    if out.is_empty() {
        return Err(Error::Contract(format!("baseline variant {baseline:?} is not in the results")));
    }
    out.sort_by(|a, b| b.delta[0].total_cmp(&a.delta[0]));
    Ok(out)
}

pub fn delta_csv(rows: &[DeltaRow]) -> String {
    let mut w = writer();
    let mut header = vec!["variant".to_string(), "beta".into(), "fraction".into()];
    header.extend(METRIC_NAMES.iter().map(|m| format!("d_{m}")));
    w.write_record(&header).expect("in-memory csv");
    for r in rows {
        let mut rec = vec![r.variant.clone(), sig9(r.beta), sig9(r.fraction)];
        rec.extend(r.delta.iter().map(|&v| sig9(v)));
        w.write_record(&rec).expect("in-memory csv");
    }
    finish(w)
}

pub fn curves_csv(points: &[CurvePoint]) -> String {
    let mut w = writer();
    w.write_record(CURVES_HEADER).expect("in-memory csv");
    for p in points {
        w.write_record([
            p.epoch.to_string(),
            sig9(p.l_s),
            sig9(p.l_c),
            sig9(p.l_src),
            sig9(p.lambda),
            sig9(p.lr),
            opt(p.val_auc),
            opt(p.val_acc),
        ])
        .expect("in-memory csv");
    }
    finish(w)
}

pub fn parse_curves_csv(text: &str) -> Result<Vec<CurvePoint>> {
    let mut rdr = csv::Reader::from_reader(text.as_bytes());
    check_header(&mut rdr, &CURVES_HEADER)?;
    let mut out = Vec::new();
    for (i, rec) in rdr.records().enumerate() {
        let rec = rec.map_err(csv_err)?;
        let line = i + 2;
        let optional = |k: usize| -> Result<Option<f64>> {
            match rec.get(k).unwrap_or("") {
                "" => Ok(None),
                _ => field(&rec, k, line).map(Some),
            }
        };
        out.push(CurvePoint {
            epoch: field(&rec, 0, line)?,
            l_s: field(&rec, 1, line)?,
            l_c: field(&rec, 2, line)?,
            l_src: field(&rec, 3, line)?,
            lambda: field(&rec, 4, line)?,
            lr: field(&rec, 5, line)?,
            val_auc: optional(6)?,
            val_acc: optional(7)?,
        });
    }
    Ok(out)
}

fn write(path: &Path, text: &str) -> Result<()> {
    fs::write(path, text).map_err(|e| Error::io(path, e))
}

/// Writes every artifact of `report` under `outdir`:
///
/// ```text
/// results.csv  summary.csv  report.json
/// runs/<variant>_beta<b>_frac<f>_seed<s>/{curves.csv, metrics.json}
/// runs/<...>/relations/epoch<e>_{student,teacher,distance}.csv
/// ```
pub fn emit_reports(report: &ExperimentReport, outdir: &Path) -> Result<()> {
    fs::create_dir_all(outdir).map_err(|e| Error::io(outdir, e))?;
    let rows = result_rows(report);
    write(&outdir.join("results.csv"), &results_csv(&rows))?;
    write(&outdir.join("summary.csv"), &summary_csv(&summarize(&rows)))?;

    let mut runs = Vec::new();
    for c in &report.cells {
        let name = run_dir_name(&c.cell);
        let dir = outdir.join("runs").join(&name);
        fs::create_dir_all(&dir).map_err(|e| Error::io(&dir, e))?;
        match &c.outcome {
            Ok(run) => {
                write(&dir.join("curves.csv"), &curves_csv(&run.curves))?;
                write(&dir.join("metrics.json"), &run.metrics.to_json())?;
                if !run.dumps.is_empty() {
                    let rel = dir.join("relations");
                    fs::create_dir_all(&rel).map_err(|e| Error::io(&rel, e))?;
                    for d in &run.dumps {
                        let stem = format!("epoch{}", d.epoch);
                        write(&rel.join(format!("{stem}_student.csv")), &matrix_csv(d.student.values()))?;
                        write(&rel.join(format!("{stem}_teacher.csv")), &matrix_csv(d.teacher.values()))?;
                        write(&rel.join(format!("{stem}_distance.csv")), &matrix_csv(&d.distance))?;
                    }
                }
                runs.push(json!({
                    "dir": format!("runs/{name}"),
                    "cell": c.cell,
                    "test_top1": run.test_top1,
                    "unlabeled_reads": run.unlabeled_reads,
                    "flagged_classes": run.metrics.flagged,
                }));
            }
            Err(e) => runs.push(json!({
                "dir": format!("runs/{name}"),
                "cell": c.cell,
                "error": e,
            })),
        }
    }
    let doc = json!({
        "config_hash": report.config_hash,
        "wall_time_s": report.wall_time_s,
        "failures": report.failures(),
        "metric_definitions": {
            "auc": "one-vs-rest Mann-Whitney AUC per class, ties count half, macro mean over classes with both outcomes",
            "sens_spec_f1": "one-vs-rest from argmax predictions (0.5 threshold for multi-label), macro mean",
            "acc": "micro mean of one-vs-rest correctness over all (sample, class) pairs",
        },
        "lr_schedule": "polynomial: lr0 * (1 - epoch / total_epochs) ^ lr_decay_power",
        "config": report.config_echo,
        "runs": runs,
    });
    let text = serde_json::to_string_pretty(&doc).map_err(|e| Error::Parse(e.to_string()))?;
    write(&outdir.join("report.json"), &text)
}

#[cfg(test)]
mod tests {
    use super::*;

    fn row(variant: &str, fraction: f64, seed: u64, m: [f64; 5]) -> ResultRow {
        ResultRow {
            variant: variant.into(),
            beta: 1.0,
            fraction,
            seed,
            metrics: Some(m),
            error: String::new(),
        }
    }

    #[test]
    fn results_round_trip_including_failures() {
        let mut rows = vec![
            row("mt", 0.1, 0, [0.9, 0.8, 0.7, 0.6, 0.5]),
            row("src_mt", 0.1, 1, [0.123456789, 1.0, 0.0, 0.5, 0.25]),
        ];
        rows.push(ResultRow {
            metrics: None,
            error: "split error: class 2, has no labels".into(),
            ..row("pi", 0.05, 2, [0.0; 5])
        });
        let text = results_csv(&rows);
        assert!(text.starts_with("variant,beta,fraction,seed,auc,sens,spec,acc,f1,error\n"));
        assert_eq!(parse_results_csv(&text).unwrap(), rows);
    }

    #[test]
    fn curves_round_trip() {
        let pts = vec![
            CurvePoint {
                epoch: 0,
                l_s: 1.25,
                l_c: 0.0,
                l_src: 0.5,
                lambda: 0.006737947,
                lr: 0.001,
                val_auc: Some(0.75),
                val_acc: None,
            },
            CurvePoint {
                epoch: 1,
                l_s: 0.5,
                l_c: 0.125,
                l_src: 0.25,
                lambda: 1.0,
                lr: 0.0005,
                val_auc: None,
                val_acc: Some(0.5),
            },
        ];
        assert_eq!(parse_curves_csv(&curves_csv(&pts)).unwrap(), pts);
    }

    #[test]
    fn summary_uses_sample_sd_and_single_runs_echo() {
        let rows = vec![
            row("mt", 0.1, 0, [0.5, 0.5, 0.5, 0.5, 0.5]),
            row("mt", 0.1, 1, [0.7, 0.5, 0.5, 0.5, 0.5]),
            row("pi", 0.1, 0, [0.6, 0.4, 0.3, 0.2, 0.1]),
        ];
        let s = summarize(&rows);
        assert_eq!(s.len(), 2);
        assert!((s[0].mean[0] - 0.6).abs() < 1e-15);
        assert!((s[0].sd[0] - 0.02f64.sqrt()).abs() < 1e-15);
        assert_eq!(s[1].mean, [0.6, 0.4, 0.3, 0.2, 0.1]);
        assert_eq!(s[1].sd, [0.0; 5]);
        assert!(summary_csv(&s).lines().count() == 3);
    }

    #[test]
    fn compare_against_baseline() {
        let rows = vec![
            row("baseline", 0.1, 0, [0.5, 0.5, 0.5, 0.5, 0.5]),
            row("mt", 0.1, 0, [0.7, 0.6, 0.5, 0.4, 0.5]),
        ];
        let d = compare_table(&rows, "baseline").unwrap();
        assert_eq!(d.len(), 1);
        assert_eq!(d[0].variant, "mt");
        assert!((d[0].delta[0] - 0.2).abs() < 1e-15);
        assert!((d[0].delta[3] + 0.1).abs() < 1e-15);

        let own = compare_table(&rows[..1], "baseline").unwrap();
        assert_eq!(own[0].delta, [0.0; 5]);
        assert!(matches!(compare_table(&rows, "pi"), Err(Error::Contract(_))));
    }

    #[test]
    fn compare_sorts_by_auc_delta() {
        let rows = vec![
            row("baseline", 0.1, 0, [0.5; 5]),
            row("pi", 0.1, 0, [0.55; 5]),
            row("src_mt", 0.1, 0, [0.8; 5]),
            row("mt", 0.1, 0, [0.7; 5]),
        ];
        let names: Vec<String> = compare_table(&rows, "baseline").unwrap().into_iter().map(|d| d.variant).collect();
        assert_eq!(names, ["src_mt", "mt", "pi"]);
    }

    #[test]
    fn wrong_header_is_rejected() {
        assert!(parse_results_csv("a,b\n1,2\n").is_err());
        assert!(parse_curves_csv("epoch,L_s\n0,1\n").is_err());
    }
}
