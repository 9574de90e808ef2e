//! Report emission: a markdown summary of the metrics table plus simple SVG
//! charts (fd vs evaluation budget per cell, fd vs lambda, loss-kind bars).

use std::collections::BTreeMap;
use std::path::Path;

use flowdistill_core::{Error, Result};

#[derive(Debug, Clone)]
pub struct Table {
    pub columns: Vec<String>,
    pub rows: Vec<Vec<String>>,
}

pub fn read_table(path: &Path) -> Result<Table> {
    let mut rdr = csv::Reader::from_path(path)
        .map_err(|e| Error::data(format!("cannot read table {}: {e}", path.display())))?;
    let columns: Vec<String> = rdr
        .headers()
        .map_err(|e| Error::data(format!("csv header: {e}")))?
        .iter()
        .map(str::to_string)
        .collect();
    let mut rows = Vec::new();
    for rec in rdr.records() {
        let rec = rec.map_err(|e| Error::data(format!("csv row: {e}")))?;
        rows.push(rec.iter().map(str::to_string).collect());
    }
    if rows.is_empty() {
        return Err(Error::data("metrics table has no rows"));
    }
    Ok(Table { columns, rows })
}

impl Table {
    fn col(&self, name: &str) -> Option<usize> {
        self.columns.iter().position(|c| c == name)
    }

    fn f64s(&self, name: &str) -> Vec<Option<f64>> {
        match self.col(name) {
            Some(i) => self.rows.iter().map(|r| r.get(i).and_then(|v| v.parse().ok())).collect(),
            None => vec![None; self.rows.len()],
        }
    }

    fn strings(&self, name: &str) -> Vec<String> {
        match self.col(name) {
            Some(i) => self.rows.iter().map(|r| r.get(i).cloned().unwrap_or_default()).collect(),
            None => vec![String::new(); self.rows.len()],
        }
    }
}

fn median(mut v: Vec<f64>) -> f64 {
    v.sort_by(|a, b| a.partial_cmp(b).unwrap());
    v[v.len() / 2]
}

struct Svg {
    body: String,
    w: f64,
    h: f64,
}

const MARGIN: f64 = 50.0;

impl Svg {
    fn new(w: f64, h: f64, title: &str) -> Self {
        let mut body = String::new();
        body.push_str(&format!(
            "<svg xmlns=\"http://www.w3.org/2000/svg\" width=\"{w}\" height=\"{h}\" viewBox=\"0 0 {w} {h}\">\n"
        ));
        body.push_str(&format!(
            "<rect width=\"{w}\" height=\"{h}\" fill=\"white\"/>\n<text x=\"{}\" y=\"20\" font-size=\"14\" text-anchor=\"middle\">{title}</text>\n",
            w / 2.0
        ));
        Svg { body, w, h }
    }

    fn axes(&mut self, xlabel: &str, ylabel: &str) {
        let (w, h) = (self.w, self.h);
        self.body.push_str(&format!(
            "<line x1=\"{MARGIN}\" y1=\"{0}\" x2=\"{1}\" y2=\"{0}\" stroke=\"black\"/>\n",
            h - MARGIN,
            w - 10.0
        ));
        self.body.push_str(&format!(
            "<line x1=\"{MARGIN}\" y1=\"{0}\" x2=\"{MARGIN}\" y2=\"25\" stroke=\"black\"/>\n",
            h - MARGIN
        ));
        self.body.push_str(&format!(
            "<text x=\"{}\" y=\"{}\" font-size=\"11\" text-anchor=\"middle\">{xlabel}</text>\n",
            (w + MARGIN) / 2.0,
            h - 8.0
        ));
        self.body.push_str(&format!(
            "<text x=\"14\" y=\"{}\" font-size=\"11\" text-anchor=\"middle\" transform=\"rotate(-90 14 {})\">{ylabel}</text>\n",
            (self.h - MARGIN) / 2.0,
            (self.h - MARGIN) / 2.0
        ));
    }

    fn finish(mut self) -> String {
        self.body.push_str("</svg>\n");
        self.body
    }
}

const PALETTE: [&str; 8] = [
    "#1f77b4", "#ff7f0e", "#2ca02c", "#d62728", "#9467bd", "#8c564b", "#e377c2", "#17becf",
];

fn scale(v: f64, lo: f64, hi: f64, out_lo: f64, out_hi: f64) -> f64 {
    if (hi - lo).abs() < 1e-30 {
        return (out_lo + out_hi) / 2.0;
    }
    out_lo + (v - lo) / (hi - lo) * (out_hi - out_lo)
}

/// fd vs evaluation budget, one series per cell id.
fn plot_fd_vs_nfe(table: &Table) -> String {
    let ids = table.strings("cell_id");
    let nfes = table.f64s("nfe");
    let fds = table.f64s("fd");
    let mut series: BTreeMap<String, Vec<(f64, f64)>> = BTreeMap::new();
    for ((id, n), f) in ids.iter().zip(&nfes).zip(&fds) {
        if let (Some(n), Some(f)) = (n, f) {
            series.entry(id.clone()).or_default().push((*n, *f));
        }
    }
    let (w, h) = (640.0, 420.0);
    let mut svg = Svg::new(w, h, "Frechet distance vs evaluations per sample");
    svg.axes("nfe per sample", "fd");
    let all: Vec<(f64, f64)> = series.values().flatten().copied().collect();
    if !all.is_empty() {
        let (xlo, xhi) = all.iter().fold((f64::MAX, f64::MIN), |a, p| (a.0.min(p.0), a.1.max(p.0)));
        let (ylo, yhi) = all.iter().fold((f64::MAX, f64::MIN), |a, p| (a.0.min(p.1), a.1.max(p.1)));
        for (si, (id, mut pts)) in series.into_iter().enumerate() {
            pts.sort_by(|a, b| a.0.partial_cmp(&b.0).unwrap());
            let color = PALETTE[si % PALETTE.len()];
            let path: Vec<String> = pts
                .iter()
                .map(|(x, y)| {
                    format!(
                        "{:.1},{:.1}",
                        scale(*x, xlo, xhi, MARGIN + 10.0, w - 20.0),
                        scale(*y, ylo, yhi, h - MARGIN - 10.0, 35.0)
                    )
                })
                .collect();
            if path.len() > 1 {
                svg.body.push_str(&format!(
                    "<polyline points=\"{}\" fill=\"none\" stroke=\"{color}\"/>\n",
                    path.join(" ")
                ));
            }
            for p in &path {
                let (x, y) = p.split_once(',').unwrap();
                svg.body.push_str(&format!("<circle cx=\"{x}\" cy=\"{y}\" r=\"3\" fill=\"{color}\"/>\n"));
            }
            svg.body.push_str(&format!(
                "<text x=\"{}\" y=\"{}\" font-size=\"10\" fill=\"{color}\">{id}</text>\n",
                w - 190.0,
                40.0 + 12.0 * si as f64
            ));
        }
    }
    svg.finish()
}

/// Median fd per lambda (self-compare rows only when the column is present).
fn plot_fd_vs_lambda(table: &Table) -> String {
    let lambdas = table.f64s("lambda");
    let fds = table.f64s("fd");
    let mut groups: BTreeMap<String, Vec<f64>> = BTreeMap::new();
    for (l, f) in lambdas.iter().zip(&fds) {
        if let (Some(l), Some(f)) = (l, f) {
            groups.entry(format!("{l:.4}")).or_default().push(*f);
        }
    }
    let pts: Vec<(f64, f64)> =
        groups.into_iter().map(|(k, v)| (k.parse().unwrap(), median(v))).collect();
    let (w, h) = (640.0, 420.0);
    let mut svg = Svg::new(w, h, "Frechet distance vs self-compare weight");
    svg.axes("lambda", "median fd");
    if !pts.is_empty() {
        let (xlo, xhi) = pts.iter().fold((f64::MAX, f64::MIN), |a, p| (a.0.min(p.0), a.1.max(p.0)));
        let (ylo, yhi) = pts.iter().fold((f64::MAX, f64::MIN), |a, p| (a.0.min(p.1), a.1.max(p.1)));
        let path: Vec<String> = pts
            .iter()
            .map(|(x, y)| {
                format!(
                    "{:.1},{:.1}",
                    scale(*x, xlo, xhi, MARGIN + 10.0, w - 20.0),
                    scale(*y, ylo, yhi, h - MARGIN - 10.0, 35.0)
                )
            })
            .collect();
        if path.len() > 1 {
            svg.body.push_str(&format!(
                "<polyline points=\"{}\" fill=\"none\" stroke=\"#1f77b4\"/>\n",
                path.join(" ")
            ));
        }
        for p in &path {
            let (x, y) = p.split_once(',').unwrap();
            svg.body.push_str(&format!("<circle cx=\"{x}\" cy=\"{y}\" r=\"3\" fill=\"#1f77b4\"/>\n"));
        }
    }
    svg.finish()
}

/// Median fd per loss kind, as bars.
fn plot_loss_kinds(table: &Table) -> String {
    let kinds = table.strings("loss_kind");
    let fds = table.f64s("fd");
    let mut groups: BTreeMap<String, Vec<f64>> = BTreeMap::new();
    for (k, f) in kinds.iter().zip(&fds) {
        if let Some(f) = f {
            if !k.is_empty() {
                groups.entry(k.clone()).or_default().push(*f);
            }
        }
    }
    let (w, h) = (640.0, 420.0);
    let mut svg = Svg::new(w, h, "Frechet distance by adversarial loss");
    svg.axes("loss kind", "median fd");
    if !groups.is_empty() {
        let bars: Vec<(String, f64)> = groups.into_iter().map(|(k, v)| (k, median(v))).collect();
        let ymax = bars.iter().map(|b| b.1).fold(f64::MIN, f64::max).max(1e-12);
        let bw = (w - MARGIN - 30.0) / bars.len() as f64;
        for (i, (k, v)) in bars.iter().enumerate() {
            let x = MARGIN + 10.0 + i as f64 * bw;
            let y = scale(*v, 0.0, ymax, h - MARGIN, 35.0);
            let color = PALETTE[i % PALETTE.len()];
            svg.body.push_str(&format!(
                "<rect x=\"{x:.1}\" y=\"{y:.1}\" width=\"{:.1}\" height=\"{:.1}\" fill=\"{color}\"/>\n",
                bw * 0.7,
                (h - MARGIN) - y
            ));
            svg.body.push_str(&format!(
                "<text x=\"{:.1}\" y=\"{:.1}\" font-size=\"11\" text-anchor=\"middle\">{k}</text>\n",
                x + bw * 0.35,
                h - MARGIN + 14.0
            ));
            svg.body.push_str(&format!(
                "<text x=\"{:.1}\" y=\"{:.1}\" font-size=\"10\" text-anchor=\"middle\">{v:.3}</text>\n",
                x + bw * 0.35,
                y - 4.0
            ));
        }
    }
    svg.finish()
}

fn markdown_summary(table: &Table) -> String {
    let mut md = String::from("# Metrics summary\n\n");
    md.push_str(&format!("{} rows.\n\n", table.rows.len()));
    md.push_str("| ");
    md.push_str(&table.columns.join(" | "));
    md.push_str(" |\n|");
    for _ in &table.columns {
        md.push_str(" --- |");
    }
    md.push('\n');
    for row in &table.rows {
        md.push_str("| ");
        md.push_str(&row.join(" | "));
        md.push_str(" |\n");
    }
    md
}

/// Read the table and write `summary.md` plus the three SVG charts.
pub fn emit(table_csv: &Path, plots_dir: &Path) -> Result<Vec<std::path::PathBuf>> {
    let table = read_table(table_csv)?;
    std::fs::create_dir_all(plots_dir)?;
    let outputs = [
        ("summary.md", markdown_summary(&table)),
        ("fd_vs_nfe.svg", plot_fd_vs_nfe(&table)),
        ("fd_vs_lambda.svg", plot_fd_vs_lambda(&table)),
        ("loss_kinds.svg", plot_loss_kinds(&table)),
    ];
    let mut paths = Vec::new();
    for (name, content) in outputs {
        let p = plots_dir.join(name);
        std::fs::write(&p, content)?;
        paths.push(p);
    }
    Ok(paths)
}
