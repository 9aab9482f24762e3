use std::fmt::Write;
use std::path::Path;

use super::DEFAULT_OUT;
use crate::config::Resolver;
use crate::error::CliError;
use crate::output::{ensure_dir, read_csv};
use crate::svg::{Plot, Series};
use crate::ReportArgs;

/// Points kept on the loss plot; longer curves are averaged in bins.
const LOSS_PLOT_POINTS: usize = 400;

/// Non-integer numbers shortened to four significant digits.
fn cell(text: &str) -> String {
    match text.parse::<f64>() {
        Ok(x) if x.is_finite() && x.fract() != 0.0 => {
            if x.abs() >= 1e-3 && x.abs() < 1e5 {
                let digits = (3 - x.abs().log10().floor() as i32).max(0) as usize;
                format!("{x:.digits$}")
            } else {
                format!("{x:.3e}")
            }
        }
        _ => text.to_string(),
    }
}

fn markdown_table(header: &[String], rows: &[Vec<String>]) -> String {
    let mut s = format!("| {} |\n", header.join(" | "));
    s.push_str(&format!("|{}\n", "---|".repeat(header.len())));
    for r in rows {
        let cells: Vec<String> = r.iter().map(|c| cell(c)).collect();
        s.push_str(&format!("| {} |\n", cells.join(" | ")));
    }
    s
}

fn column(header: &[String], name: &str, path: &Path) -> Result<usize, CliError> {
    header
        .iter()
        .position(|h| h == name)
        .ok_or_else(|| CliError::Usage(format!("{}: missing column '{name}'", path.display())))
}

fn loss_section(path: &Path, out: &Path, md: &mut String) -> Result<(), CliError> {
    let (header, rows) = read_csv(path)?;
    let (si, li) = (
        column(&header, "step", path)?,
        column(&header, "loss", path)?,
    );
    let pts: Vec<(f64, f64)> = rows
        .iter()
        .map(|r| {
            let p = |i: usize| {
                r[i].parse::<f64>().map_err(|_| {
                    CliError::Usage(format!("{}: bad number '{}'", path.display(), r[i]))
                })
            };
            Ok((p(si)?, p(li)?))
        })
        .collect::<Result<_, CliError>>()?;
    let _ = writeln!(md, "## Training loss\n");
    if pts.is_empty() {
        let _ = writeln!(md, "No training steps.\n");
        return Ok(());
    }
    let bin = pts.len().div_ceil(LOSS_PLOT_POINTS);
    let binned: Vec<(f64, f64)> = pts
        .chunks(bin)
        .map(|c| {
            let n = c.len() as f64;
            (
                c.iter().map(|p| p.0).sum::<f64>() / n,
                c.iter().map(|p| p.1).sum::<f64>() / n,
            )
        })
        .collect();
    let plot = Plot {
        title: "Training loss".into(),
        x_label: "step".into(),
        y_label: "loss".into(),
        log_x: false,
        log_y: true,
        series: vec![Series {
            name: "loss".into(),
            points: binned,
        }],
    };
    std::fs::write(out.join("loss.svg"), plot.render(&[]))?;
    let tail = pts.len().div_ceil(10);
    let first = pts[..tail.min(pts.len())].iter().map(|p| p.1).sum::<f64>() / tail as f64;
    let last = pts[pts.len() - tail..].iter().map(|p| p.1).sum::<f64>() / tail as f64;
    let _ = writeln!(
        md,
        "{} steps. Mean loss over the first 10%: {first:.5}; over the last 10%: {last:.5}.\n\n![loss](loss.svg)\n",
        pts.len()
    );
    Ok(())
}

fn table_section(path: &Path, title: &str, md: &mut String) -> Result<(), CliError> {
    let (header, rows) = read_csv(path)?;
    let _ = writeln!(md, "## {title}\n\n{}", markdown_table(&header, &rows));
    Ok(())
}

pub fn report(a: ReportArgs, mut r: Resolver) -> Result<(), CliError> {
    let input = r.path("input", a.input, DEFAULT_OUT)?;
    let out_default = input.display().to_string();
    let out = r.path("out", a.out, &out_default)?;
    let cfg = r.finish("report")?;
    ensure_dir(&out)?;

    let mut md = String::from("# flowinv report\n\n");
    for line in cfg.lines() {
        let _ = writeln!(md, "    {line}");
    }
    md.push('\n');
    let mut found = 0;
    let loss = input.join("loss.csv");
    if loss.exists() {
        loss_section(&loss, &out, &mut md)?;
        found += 1;
    }
    for (file, title) in [
        ("slopes.csv", "Convergence slopes"),
        ("recon_summary.csv", "Reconstruction"),
        ("ablation.csv", "Editing ablation"),
    ] {
        let p = input.join(file);
        if p.exists() {
            table_section(&p, title, &mut md)?;
            found += 1;
        }
    }
    if found == 0 {
        return Err(CliError::Usage(format!(
            "no known outputs (loss.csv, slopes.csv, recon_summary.csv, ablation.csv) in {}",
            input.display()
        )));
    }
    std::fs::write(out.join("report.md"), md)?;
    println!(
        "summarized {found} outputs into {}",
        out.join("report.md").display()
    );
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn cells_are_shortened() {
        assert_eq!(cell("34.031862728495796"), "34.03");
        assert_eq!(cell("0.9734508357928685"), "0.9735");
        assert_eq!(cell("0.000002617961058472766"), "2.618e-6");
        assert_eq!(cell("-13.100202664521564"), "-13.10");
        assert_eq!(cell("50"), "50");
        assert_eq!(cell("uni_inv"), "uni_inv");
        assert_eq!(cell(""), "");
    }
}
