//! CSV rows and SVG budget-versus-Dice charts.

use std::fmt::Write as _;
use std::path::{Path, PathBuf};

use super::{RoundReport, Scenario};
use crate::data::Strategy;
use crate::error::{Error, Result};
use crate::sampling::Method;

pub const CSV_HEADER: &str = "scenario,method,strategy,budget,seed,dice,annotated_slices,context_slices,fallbacks,wall_ms";

/// Mean and sample standard deviation over seeds of one (scenario,
/// strategy, method, budget) cell.
#[derive(Clone, Debug, PartialEq)]
pub struct Aggregate {
    pub scenario: Scenario,
    pub strategy: Strategy,
    pub method: Method,
    pub budget: usize,
    pub dices: Vec<f64>,
    pub mean: f64,
    pub std: f64,
}

/// Groups rows in order of first appearance.
pub fn aggregate(reports: &[RoundReport]) -> Vec<Aggregate> {
    let mut out: Vec<Aggregate> = Vec::new();
    for r in reports {
        let key = (r.scenario, r.strategy, r.method, r.budget);
        match out
            .iter_mut()
            .find(|a| (a.scenario, a.strategy, a.method, a.budget) == key)
        {
            Some(a) => a.dices.push(r.dice),
            None => out.push(Aggregate {
                scenario: r.scenario,
                strategy: r.strategy,
                method: r.method,
                budget: r.budget,
                dices: vec![r.dice],
                mean: 0.0,
                std: 0.0,
            }),
        }
    }
    for a in &mut out {
        let n = a.dices.len() as f64;
        a.mean = a.dices.iter().sum::<f64>() / n;
        a.std = if a.dices.len() > 1 {
            (a.dices.iter().map(|d| (d - a.mean).powi(2)).sum::<f64>() / (n - 1.0)).sqrt()
        } else {
            0.0
        };
    }
    out
}

/// Dice values are written in shortest round-trip form so that parsing the
/// file gives back the same numbers.
pub fn write_report_csv(reports: &[RoundReport]) -> String {
    let mut out = String::from(CSV_HEADER);
    out.push('\n');
    for r in reports {
        writeln!(
            out,
            "{},{},{},{},{},{:?},{},{},{},{}",
            r.scenario,
            r.method,
            r.strategy,
            r.budget,
            r.seed,
            r.dice,
            r.annotated_slices,
            r.context_slices,
            r.fallbacks,
            r.wall_ms
        )
        .unwrap();
    }
    out
}

pub fn read_report_csv(path: &Path) -> Result<Vec<RoundReport>> {
    let text = std::fs::read_to_string(path).map_err(|e| Error::io(format!("reading {}", path.display()), e))?;
    let bad = |line: usize, msg: String| Error::Format {
        path: path.to_path_buf(),
        offset: line,
        msg,
    };
    let mut lines = text.lines().enumerate();
    match lines.next() {
        Some((_, h)) if h.trim() == CSV_HEADER => {}
        _ => return Err(bad(0, "unexpected CSV header".into())),
    }
    let mut out = Vec::new();
    for (i, line) in lines.filter(|(_, l)| !l.trim().is_empty()) {
        let f: Vec<&str> = line.split(',').map(str::trim).collect();
        if f.len() != 10 {
            return Err(bad(i, format!("expected 10 fields, found {}", f.len())));
        }
        let num = |k: usize| -> Result<u64> {
            f[k]
                .parse()
                .map_err(|_| bad(i, format!("bad integer `{}`", f[k])))
        };
        out.push(RoundReport {
            scenario: f[0].parse()?,
            method: f[1].parse()?,
            strategy: f[2].parse()?,
            budget: num(3)? as usize,
            seed: num(4)?,
            dice: f[5].parse().map_err(|_| bad(i, format!("bad Dice value `{}`", f[5])))?,
            annotated_slices: num(6)? as usize,
            context_slices: num(7)? as usize,
            fallbacks: num(8)? as usize,
            wall_ms: num(9)?,
        });
    }
    Ok(out)
}

fn colour(m: Method) -> &'static str {
    match m {
        Method::Random => "#7f7f7f",
        Method::Gradient => "#d62728",
        Method::Oracle => "#1f77b4",
    }
}

/// Static line chart of mean Dice against budget, one series per method
/// with a shaded band of one standard deviation.
pub fn render_svg(title: &str, cells: &[&Aggregate]) -> String {
    let (w, h) = (640.0, 420.0);
    let (left, right, top, bottom) = (70.0, 150.0, 40.0, 60.0);
    let mut budgets: Vec<usize> = cells.iter().map(|a| a.budget).collect();
    budgets.sort();
    budgets.dedup();
    let (bmin, bmax) = (budgets[0] as f64, *budgets.last().unwrap() as f64);
    let lo = cells.iter().map(|a| a.mean - a.std).fold(f64::INFINITY, f64::min).max(0.0);
    let hi = cells.iter().map(|a| a.mean + a.std).fold(f64::NEG_INFINITY, f64::max).min(1.0);
    let (lo, hi) = ((lo * 20.0).floor() / 20.0, ((hi * 20.0).ceil() / 20.0).max(lo + 0.05));
    let px = |b: f64| {
        if bmax > bmin {
            left + (b - bmin) / (bmax - bmin) * (w - left - right)
        } else {
            left + (w - left - right) / 2.0
        }
    };
    let py = |d: f64| top + (hi - d.clamp(lo, hi)) / (hi - lo) * (h - top - bottom);

    let mut s = String::new();
    writeln!(s, "<svg xmlns=\"http://www.w3.org/2000/svg\" width=\"{w}\" height=\"{h}\" viewBox=\"0 0 {w} {h}\">").unwrap();
    writeln!(s, "<rect width=\"100%\" height=\"100%\" fill=\"white\"/>").unwrap();
    writeln!(s, "<text x=\"{}\" y=\"24\" font-family=\"sans-serif\" font-size=\"15\" text-anchor=\"middle\">{title}</text>", (left + w - right) / 2.0).unwrap();
    let (x0, x1, y0, y1) = (left, w - right, top, h - bottom);
    writeln!(s, "<g stroke=\"black\" stroke-width=\"1\"><line x1=\"{x0}\" y1=\"{y1}\" x2=\"{x1}\" y2=\"{y1}\"/><line x1=\"{x0}\" y1=\"{y0}\" x2=\"{x0}\" y2=\"{y1}\"/></g>").unwrap();
    writeln!(s, "<g font-family=\"sans-serif\" font-size=\"11\">").unwrap();
    for &b in &budgets {
        let x = px(b as f64);
        writeln!(s, "<line x1=\"{x:.1}\" y1=\"{y1}\" x2=\"{x:.1}\" y2=\"{:.1}\" stroke=\"black\"/><text x=\"{x:.1}\" y=\"{:.1}\" text-anchor=\"middle\">{b}</text>", y1 + 5.0, y1 + 18.0).unwrap();
    }
    let steps = ((hi - lo) / 0.05).round() as usize;
    for k in 0..=steps {
        let d = lo + k as f64 * 0.05;
        let y = py(d);
        writeln!(s, "<line x1=\"{:.1}\" y1=\"{y:.1}\" x2=\"{x0}\" y2=\"{y:.1}\" stroke=\"black\"/><text x=\"{:.1}\" y=\"{:.1}\" text-anchor=\"end\">{d:.2}</text>", x0 - 5.0, x0 - 8.0, y + 4.0).unwrap();
    }
    writeln!(s, "<text x=\"{:.1}\" y=\"{:.1}\" text-anchor=\"middle\">budget</text>", (x0 + x1) / 2.0, h - 18.0).unwrap();
    writeln!(s, "<text x=\"18\" y=\"{:.1}\" text-anchor=\"middle\" transform=\"rotate(-90 18 {:.1})\">mean Dice</text>", (y0 + y1) / 2.0, (y0 + y1) / 2.0).unwrap();
    writeln!(s, "</g>").unwrap();

    let mut methods: Vec<Method> = Vec::new();
    for a in cells {
        if !methods.contains(&a.method) {
            methods.push(a.method);
        }
    }
    for (k, &m) in methods.iter().enumerate() {
        let mut series: Vec<&&Aggregate> = cells.iter().filter(|a| a.method == m).collect();
        series.sort_by_key(|a| a.budget);
        let upper: Vec<String> = series.iter().map(|a| format!("{:.2},{:.2}", px(a.budget as f64), py(a.mean + a.std))).collect();
        let lower: Vec<String> = series.iter().rev().map(|a| format!("{:.2},{:.2}", px(a.budget as f64), py(a.mean - a.std))).collect();
        let line: Vec<String> = series.iter().map(|a| format!("{:.2},{:.2}", px(a.budget as f64), py(a.mean))).collect();
        let c = colour(m);
        writeln!(s, "<polygon points=\"{} {}\" fill=\"{c}\" fill-opacity=\"0.15\" stroke=\"none\"/>", upper.join(" "), lower.join(" ")).unwrap();
        writeln!(s, "<polyline points=\"{}\" fill=\"none\" stroke=\"{c}\" stroke-width=\"2\"/>", line.join(" ")).unwrap();
        let ly = top + 20.0 + 20.0 * k as f64;
        writeln!(s, "<line x1=\"{:.1}\" y1=\"{ly:.1}\" x2=\"{:.1}\" y2=\"{ly:.1}\" stroke=\"{c}\" stroke-width=\"2\"/><text x=\"{:.1}\" y=\"{:.1}\" font-family=\"sans-serif\" font-size=\"12\">{m}</text>", x1 + 15.0, x1 + 40.0, x1 + 46.0, ly + 4.0).unwrap();
    }
    s.push_str("</svg>\n");
    s
}

/// Writes `report.csv` and one `chart_<scenario>_<strategy>.svg` per
/// scenario and strategy. Returns the paths written.
pub fn emit_report(reports: &[RoundReport], out_dir: &Path) -> Result<Vec<PathBuf>> {
    if reports.is_empty() {
        return Err(Error::EmptyInput("no rounds to report".into()));
    }
    std::fs::create_dir_all(out_dir).map_err(|e| Error::io(format!("creating {}", out_dir.display()), e))?;
    let write = |name: String, text: String| -> Result<PathBuf> {
        let p = out_dir.join(name);
        std::fs::write(&p, text).map_err(|e| Error::io(format!("writing {}", p.display()), e))?;
        Ok(p)
    };
    let mut written = vec![write("report.csv".into(), write_report_csv(reports))?];
    let cells = aggregate(reports);
    let mut charts: Vec<(Scenario, Strategy)> = Vec::new();
    for a in &cells {
        if !charts.contains(&(a.scenario, a.strategy)) {
            charts.push((a.scenario, a.strategy));
        }
    }
    for (scenario, strategy) in charts {
        let mine: Vec<&Aggregate> = cells
            .iter()
            .filter(|a| a.scenario == scenario && a.strategy == strategy)
            .collect();
        let title = format!("{scenario} scenario, {strategy}-wise suggestion");
        written.push(write(format!("chart_{scenario}_{strategy}.svg"), render_svg(&title, &mine))?);
    }
    Ok(written)
}
