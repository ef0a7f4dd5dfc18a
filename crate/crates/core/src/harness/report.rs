use std::fmt::Write as _;
use std::fs;
use std::io::{Read, Write};
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::attack::LipschitzRecord;
use crate::error::{Error, Result};
use crate::metrics::{lipschitz_lower_bound, read_rows, MetricsRow};

/// Per-sample result files `report` looks for.
pub const EXPECTED_RESULTS: [&str; 4] = ["untargeted.csv", "localized.csv", "universal.csv", "universal_holdout.csv"];

/// Means (and standard deviations of the image scores) over the samples of
/// one method at one radius.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SummaryRow {
    pub method: String,
    pub eps: f64,
    pub n: usize,
    pub psnr: f64,
    pub psnr_std: f64,
    pub ssim: f64,
    pub ssim_std: f64,
    pub d_breg: f64,
    pub dc_clean: f64,
    pub dc_adv: f64,
    pub psnr_f_fdelta: f64,
    pub psnr_int: Option<f64>,
    pub psnr_ext: Option<f64>,
    pub success_rate: Option<f64>,
    /// Largest output-to-input ratio over the records; empty when every perturbation is zero.
    pub l_b: Option<f64>,
}

fn mean_std(values: impl Iterator<Item = f64> + Clone) -> (f64, f64) {
    let n = values.clone().count() as f64;
    let mean = values.clone().sum::<f64>() / n;
    if mean.is_infinite() {
        return (mean, 0.0);
    }
    let var = values.map(|v| (v - mean) * (v - mean)).sum::<f64>() / n;
    (mean, var.sqrt())
}

fn mean_opt(values: impl Iterator<Item = Option<f64>>) -> Option<f64> {
    let v: Option<Vec<f64>> = values.collect();
    v.filter(|v| !v.is_empty()).map(|v| v.iter().sum::<f64>() / v.len() as f64)
}

impl SummaryRow {
    /// Aggregates `rows`; `records` are the per-restart Lipschitz records of
    /// the campaign, and when empty the rows' own `l_b_record` values are used.
    pub fn aggregate(method: &str, eps: f64, rows: &[MetricsRow], records: &[LipschitzRecord]) -> Result<Self> {
        if rows.is_empty() {
            return Err(Error::invalid(format!("no rows for {method} at eps {eps}")));
        }
        let it = || rows.iter();
        let (psnr, psnr_std) = mean_std(it().map(|r| r.psnr));
        let (ssim, ssim_std) = mean_std(it().map(|r| r.ssim));
        let positive: Vec<LipschitzRecord> = records.iter().copied().filter(|r| r.1 > 0.0).collect();
        let l_b = if positive.is_empty() {
            it().filter_map(|r| r.l_b_record).reduce(f64::max)
        } else {
            Some(lipschitz_lower_bound(&positive)?)
        };
        Ok(SummaryRow {
            method: method.to_string(),
            eps,
            n: rows.len(),
            psnr,
            psnr_std,
            ssim,
            ssim_std,
            d_breg: mean_std(it().map(|r| r.d_breg)).0,
            dc_clean: mean_std(it().map(|r| r.dc_clean)).0,
            dc_adv: mean_std(it().map(|r| r.dc_adv)).0,
            psnr_f_fdelta: mean_std(it().map(|r| r.psnr_f_fdelta)).0,
            psnr_int: mean_opt(it().map(|r| r.psnr_int)),
            psnr_ext: mean_opt(it().map(|r| r.psnr_ext)),
            success_rate: mean_opt(it().map(|r| r.success.map(|s| if s { 1.0 } else { 0.0 }))),
            l_b,
        })
    }
}

pub fn write_summary<W: Write>(out: W, rows: &[SummaryRow]) -> Result<()> {
    let mut w = csv::Writer::from_writer(out);
    for r in rows {
        w.serialize(r)?;
    }
    w.flush()?;
    Ok(())
}

pub fn read_summary<R: Read>(input: R) -> Result<Vec<SummaryRow>> {
    csv::Reader::from_reader(input).deserialize().map(|r| r.map_err(Error::from)).collect()
}

/// One cell of the transfer matrix: mean scores of `target` under the
/// perturbations optimized against `source`.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct TransferCell {
    pub source: String,
    pub target: String,
    pub eps: f64,
    pub samples: usize,
    pub psnr: f64,
    pub ssim: f64,
    #[serde(rename = "self")]
    pub is_self: bool,
}

pub(crate) fn write_transfer<W: Write>(out: W, cells: &[TransferCell]) -> Result<()> {
    let mut w = csv::Writer::from_writer(out);
    for c in cells {
        w.serialize(c)?;
    }
    w.flush()?;
    Ok(())
}

pub fn read_transfer<R: Read>(input: R) -> Result<Vec<TransferCell>> {
    csv::Reader::from_reader(input).deserialize().map(|r| r.map_err(Error::from)).collect()
}

fn push_unique<'a>(list: &mut Vec<&'a str>, item: &'a str) {
    if !list.contains(&item) {
        list.push(item);
    }
}

fn opt(v: Option<f64>, digits: usize) -> String {
    v.map_or_else(|| "-".to_string(), |x| format!("{x:.digits$}"))
}

fn summarize(name: &str, rows: &[MetricsRow], out: &mut String) -> Result<()> {
    let _ = writeln!(out, "== {name} ({} rows) ==", rows.len());
    let mut eps_list: Vec<f64> = Vec::new();
    for r in rows {
        if !eps_list.contains(&r.eps) {
            eps_list.push(r.eps);
        }
    }
    for eps in eps_list {
        let _ = writeln!(out, "-- eps = {eps} --");
        let _ = writeln!(
            out,
            "{:<14} {:>4} {:>16} {:>16} {:>10} {:>9} {:>9} {:>10} {:>8} {:>8} {:>8} {:>8}",
            "method", "n", "psnr", "ssim", "d_breg", "dc_clean", "dc_adv", "psnr_f_fd", "l_b", "int", "ext", "success"
        );
        let at: Vec<&MetricsRow> = rows.iter().filter(|r| r.eps == eps).collect();
        let mut methods = Vec::new();
        for r in &at {
            push_unique(&mut methods, &r.method);
        }
        for m in methods {
            let group: Vec<MetricsRow> = at.iter().filter(|r| r.method == m).map(|r| (*r).clone()).collect();
            let s = SummaryRow::aggregate(m, eps, &group, &[])?;
            let success = s.success_rate.map_or_else(
                || "-".to_string(),
                |rate| format!("{}/{}", (rate * s.n as f64).round() as usize, s.n),
            );
            let _ = writeln!(
                out,
                "{:<14} {:>4} {:>7.2} ± {:<6.2} {:>7.4} ± {:<6.4} {:>10.4} {:>9.2} {:>9.2} {:>10.2} {:>8} {:>8} {:>8} {:>8}",
                s.method,
                s.n,
                s.psnr,
                s.psnr_std,
                s.ssim,
                s.ssim_std,
                s.d_breg,
                s.dc_clean,
                s.dc_adv,
                s.psnr_f_fdelta,
                opt(s.l_b, 3),
                opt(s.psnr_int, 2),
                opt(s.psnr_ext, 2),
                success
            );
        }
    }
    out.push('\n');
    Ok(())
}

fn transfer_matrix(cells: &[TransferCell], out: &mut String) {
    let (mut sources, mut targets) = (Vec::new(), Vec::new());
    for c in cells {
        push_unique(&mut sources, &c.source);
        push_unique(&mut targets, &c.target);
    }
    let eps = cells.first().map_or(0.0, |c| c.eps);
    let _ = writeln!(out, "== transfer.csv: mean PSNR of target (columns) under source perturbation (rows), eps = {eps}; * marks self-attacks ==");
    let _ = write!(out, "{:<14}", "source");
    for t in &targets {
        let _ = write!(out, " {t:>14}");
    }
    out.push('\n');
    for s in &sources {
        let _ = write!(out, "{s:<14}");
        for t in &targets {
            match cells.iter().find(|c| c.source == *s && c.target == *t) {
                Some(c) => {
                    let cell = format!("{:.2}{}", c.psnr, if c.is_self { "*" } else { "" });
                    let _ = write!(out, " {cell:>14}");
                }
                None => {
                    let _ = write!(out, " {:>14}", "-");
                }
            }
        }
        out.push('\n');
    }
    out.push('\n');
}

/// Summarizes every result file found in `dir` (mean ± std per method,
/// one block per radius), writes `report.txt` and returns its text.
pub fn cmd_report(dir: &Path) -> Result<String> {
    let present: Vec<&str> = EXPECTED_RESULTS.iter().copied().filter(|f| dir.join(f).is_file()).collect();
    let transfer = dir.join(super::TRANSFER_FILE);
    if present.is_empty() && !transfer.is_file() {
        return Err(Error::Missing(format!(
            "no results in {}; expected at least one of {}, {}",
            dir.display(),
            EXPECTED_RESULTS.join(", "),
            super::TRANSFER_FILE
        )));
    }
    let mut out = String::new();
    for name in present {
        let path = dir.join(name);
        let rows = read_rows(fs::File::open(&path)?).map_err(|e| Error::Format(format!("{}: {e}", path.display())))?;
        if rows.is_empty() {
            return Err(Error::Format(format!("{} has a header but no rows", path.display())));
        }
        summarize(name, &rows, &mut out)?;
    }
    if transfer.is_file() {
        let cells = read_transfer(fs::File::open(&transfer)?)
            .map_err(|e| Error::Format(format!("{}: {e}", transfer.display())))?;
        transfer_matrix(&cells, &mut out);
    }
    fs::write(dir.join(super::REPORT_FILE), &out)?;
    Ok(out)
}
