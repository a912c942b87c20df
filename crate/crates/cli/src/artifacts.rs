//! Run-directory files: front CSV, evaluation log and SVG plots.

use std::fmt::Write as _;
use std::path::Path;

use evoprune_core::evolve::{EvalRecord, Individual, ParetoFront};
use evoprune_core::prunespace::Genome;
use evoprune_core::{Error, Result};
use serde::{Deserialize, Serialize};

pub const PARETO_CSV: &str = "pareto.csv";
pub const RUNLOG: &str = "runlog.jsonl";
pub const PARETO_SVG: &str = "pareto.svg";
pub const RUN_CONFIG: &str = "run_config.json";
pub const MODEL_SPEC: &str = "model.json";
pub const BASE_WEIGHTS: &str = "base.eapw";
pub const SPACE: &str = "space.json";

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct FrontRow {
    pub genome: String,
    pub flops: u64,
    pub proxy_accuracy: f64,
}

impl FrontRow {
    pub fn genome(&self) -> Result<Genome> {
        self.genome.parse()
    }
}

pub(crate) fn csv_err(e: csv::Error) -> Error {
    let offset = e.position().map_or(0, |p| p.byte());
    match e.into_kind() {
        csv::ErrorKind::Io(io) => Error::Io(io),
        other => Error::Format {
            offset,
            message: format!("{other:?}"),
        },
    }
}

pub fn pareto_csv(front: &ParetoFront) -> Result<String> {
    let mut w = csv::Writer::from_writer(Vec::new());
    for m in &front.members {
        w.serialize(FrontRow {
            genome: m.genome.to_csv_cell(),
            flops: m.flops,
            proxy_accuracy: m.accuracy,
        })
        .map_err(csv_err)?;
    }
    let bytes = w.into_inner().map_err(|e| Error::Io(e.into_error()))?;
    String::from_utf8(bytes).map_err(|e| Error::Format {
        offset: e.utf8_error().valid_up_to() as u64,
        message: "front CSV is not UTF-8".into(),
    })
}

pub fn read_pareto_csv(path: impl AsRef<Path>) -> Result<Vec<FrontRow>> {
    let mut r = csv::Reader::from_path(path).map_err(csv_err)?;
    let header = r.headers().map_err(csv_err)?.clone();
    if header.iter().collect::<Vec<_>>() != ["genome", "flops", "proxy_accuracy"] {
        return Err(Error::Format {
            offset: 0,
            message: format!("unexpected front header {header:?}"),
        });
    }
    r.deserialize().map(|row| row.map_err(csv_err)).collect()
}

pub fn runlog_jsonl(log: &[EvalRecord]) -> Result<String> {
    let mut s = String::new();
    for rec in log {
        s.push_str(&serde_json::to_string(rec)?);
        s.push('\n');
    }
    Ok(s)
}

pub fn read_runlog(path: impl AsRef<Path>) -> Result<Vec<EvalRecord>> {
    let text = std::fs::read_to_string(path)?;
    let mut offset = 0u64;
    let mut out = Vec::new();
    for line in text.split_inclusive('\n') {
        if !line.trim().is_empty() {
            out.push(serde_json::from_str(line).map_err(|e| Error::Format {
                offset,
                message: format!("bad run-log line: {e}"),
            })?);
        }
        offset += line.len() as u64;
    }
    Ok(out)
}

/// Plot frame in pixels: width, height, margin.
const W: f64 = 640.0;
const H: f64 = 440.0;
const M: f64 = 60.0;

struct Frame {
    x: (f64, f64),
    y: (f64, f64),
}

impl Frame {
    fn fit(xs: impl Iterator<Item = f64> + Clone, ys: impl Iterator<Item = f64> + Clone) -> Self {
        let span = |it: &mut dyn Iterator<Item = f64>| {
            let (lo, hi) = it.fold((f64::INFINITY, f64::NEG_INFINITY), |(a, b), v| (a.min(v), b.max(v)));
            if !lo.is_finite() {
                (0.0, 1.0)
            } else if hi - lo < 1e-12 {
                (lo - 0.5, hi + 0.5)
            } else {
                let pad = 0.04 * (hi - lo);
                (lo - pad, hi + pad)
            }
        };
        Self {
            x: span(&mut xs.clone()),
            y: span(&mut ys.clone()),
        }
    }

    fn px(&self, x: f64) -> f64 {
        M + (x - self.x.0) / (self.x.1 - self.x.0) * (W - 2.0 * M)
    }

    fn py(&self, y: f64) -> f64 {
        H - M - (y - self.y.0) / (self.y.1 - self.y.0) * (H - 2.0 * M)
    }

    fn axes(&self, out: &mut String, xlabel: &str, ylabel: &str) {
        let _ = writeln!(
            out,
            r#"<svg xmlns="http://www.w3.org/2000/svg" width="{W}" height="{H}" font-family="sans-serif" font-size="11">"#
        );
        let _ = writeln!(out, r#"<rect width="{W}" height="{H}" fill="white"/>"#);
        let _ = writeln!(
            out,
            r#"<path d="M{M} {t} V{b} H{r}" fill="none" stroke="black"/>"#,
            t = M,
            b = H - M,
            r = W - M
        );
        for i in 0..=4 {
            let f = i as f64 / 4.0;
            let xv = self.x.0 + f * (self.x.1 - self.x.0);
            let yv = self.y.0 + f * (self.y.1 - self.y.0);
            let (x, y) = (self.px(xv), self.py(yv));
            let _ = writeln!(
                out,
                r#"<line x1="{x:.1}" y1="{b}" x2="{x:.1}" y2="{b2}" stroke="black"/><text x="{x:.1}" y="{ty}" text-anchor="middle">{}</text>"#,
                tick(xv),
                b = H - M,
                b2 = H - M + 4.0,
                ty = H - M + 16.0
            );
            let _ = writeln!(
                out,
                r#"<line x1="{M}" y1="{y:.1}" x2="{l}" y2="{y:.1}" stroke="black"/><text x="{tx}" y="{y:.1}" text-anchor="end" dy="4">{}</text>"#,
                tick(yv),
                l = M - 4.0,
                tx = M - 6.0
            );
        }
        let _ = writeln!(
            out,
            r#"<text x="{cx}" y="{y}" text-anchor="middle">{xlabel}</text>"#,
            cx = W / 2.0,
            y = H - 18.0
        );
        let _ = writeln!(
            out,
            r#"<text x="16" y="{cy}" text-anchor="middle" transform="rotate(-90 16 {cy})">{ylabel}</text>"#,
            cy = H / 2.0
        );
    }

    fn polyline(&self, out: &mut String, pts: &[(f64, f64)], colour: &str) {
        let path: Vec<String> = pts
            .iter()
            .map(|&(x, y)| format!("{:.1},{:.1}", self.px(x), self.py(y)))
            .collect();
        let _ = writeln!(
            out,
            r#"<polyline points="{}" fill="none" stroke="{colour}" stroke-width="1.5"/>"#,
            path.join(" ")
        );
    }

    fn dots(&self, out: &mut String, pts: &[(f64, f64)], colour: &str, r: f64) {
        for &(x, y) in pts {
            let _ = writeln!(
                out,
                r#"<circle cx="{:.1}" cy="{:.1}" r="{r}" fill="{colour}"/>"#,
                self.px(x),
                self.py(y)
            );
        }
    }
}

fn tick(v: f64) -> String {
    let a = v.abs();
    if a >= 1e9 {
        format!("{:.2}G", v / 1e9)
    } else if a >= 1e6 {
        format!("{:.2}M", v / 1e6)
    } else if a >= 1e3 {
        format!("{:.1}k", v / 1e3)
    } else {
        format!("{v:.3}")
    }
}

const PALETTE: &[&str] = &["#d62728", "#1f77b4", "#2ca02c", "#9467bd", "#ff7f0e", "#8c564b"];

/// Scatter of every evaluated model, FLOPs against proxy accuracy, with one
/// polyline per labelled front.
pub fn pareto_svg(archive: &[Individual], fronts: &[(&str, &ParetoFront)]) -> String {
    let all = archive
        .iter()
        .map(|i| (i.flops as f64, i.accuracy))
        .chain(fronts.iter().flat_map(|(_, f)| f.members.iter().map(|m| (m.flops as f64, m.accuracy))));
    let frame = Frame::fit(all.clone().map(|p| p.0), all.map(|p| p.1));
    let mut out = String::new();
    frame.axes(&mut out, "FLOPs (MACs)", "proxy accuracy");
    let cloud: Vec<(f64, f64)> = archive.iter().map(|i| (i.flops as f64, i.accuracy)).collect();
    frame.dots(&mut out, &cloud, "#bbbbbb", 2.0);
    for (k, (label, front)) in fronts.iter().enumerate() {
        let c = PALETTE[k % PALETTE.len()];
        let pts: Vec<(f64, f64)> = front.members.iter().map(|m| (m.flops as f64, m.accuracy)).collect();
        frame.polyline(&mut out, &pts, c);
        frame.dots(&mut out, &pts, c, 3.0);
        let _ = writeln!(
            out,
            r#"<text x="{x}" y="{y}" fill="{c}">{label}</text>"#,
            x = W - M - 120.0,
            y = M + 14.0 * k as f64
        );
    }
    out.push_str("</svg>\n");
    out
}

/// One polyline per series over integer x positions.
pub fn lines_svg(series: &[(String, Vec<f64>)], xlabel: &str, ylabel: &str) -> String {
    let xs = series.iter().flat_map(|(_, v)| (0..v.len()).map(|i| i as f64));
    let ys = series.iter().flat_map(|(_, v)| v.iter().copied());
    let frame = Frame::fit(xs, ys);
    let mut out = String::new();
    frame.axes(&mut out, xlabel, ylabel);
    for (k, (label, v)) in series.iter().enumerate() {
        let c = PALETTE[k % PALETTE.len()];
        let pts: Vec<(f64, f64)> = v.iter().enumerate().map(|(i, &y)| (i as f64, y)).collect();
        frame.polyline(&mut out, &pts, c);
        frame.dots(&mut out, &pts, c, 2.5);
        let _ = writeln!(
            out,
            r#"<text x="{x}" y="{y}" fill="{c}">{label}</text>"#,
            x = W - M - 160.0,
            y = M + 14.0 * k as f64
        );
    }
    out.push_str("</svg>\n");
    out
}

#[cfg(test)]
mod tests {
    use super::*;

    fn ind(g: &[usize], flops: u64, acc: f64) -> Individual {
        Individual {
            genome: Genome(g.to_vec()),
            flops,
            accuracy: acc,
            generation: 0,
        }
    }

    #[test]
    fn csv_round_trip() {
        let front = ParetoFront {
            members: vec![ind(&[1, 2, 3], 10, 0.5), ind(&[4, 5, 6], 20, 0.75)],
        };
        let text = pareto_csv(&front).unwrap();
        assert!(text.starts_with("genome,flops,proxy_accuracy\n1;2;3,10,0.5\n"));
        let dir = tempfile::tempdir().unwrap();
        let p = dir.path().join("f.csv");
        std::fs::write(&p, &text).unwrap();
        let rows = read_pareto_csv(&p).unwrap();
        assert_eq!(rows[1].genome().unwrap(), Genome(vec![4, 5, 6]));
        assert_eq!(rows[1].proxy_accuracy, 0.75);
    }

    #[test]
    fn svg_is_well_formed() {
        let arch = vec![ind(&[1], 10, 0.5), ind(&[2], 20, 0.7)];
        let front = ParetoFront::from_individuals(&arch);
        let s = pareto_svg(&arch, &[("nsga", &front)]);
        assert!(s.starts_with("<svg") && s.trim_end().ends_with("</svg>"));
        assert_eq!(s.matches("<polyline").count(), 1);
        assert_eq!(s.matches("<circle").count(), 4);
    }
}
