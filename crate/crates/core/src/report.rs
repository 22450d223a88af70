//! Result tables and plots.
//!
//! Each report lives in `<root>/<suite>/<timestamp>/` and holds `data.csv`
//! (one row per evaluated point), one or more SVG plots and
//! `config.snapshot`. Plots are drawn from the table alone, so
//! [`regenerate`] can rebuild them from `data.csv`.
//!
//! Columns shared by every table:
//!
//! | column | meaning |
//! |---|---|
//! | `samples` | evaluation images |
//! | `ssim`, `ssim_se` | mean per-image SSIM at Bob and its standard error |
//! | `mse`, `mse_se` | mean per-image MSE at Bob and its standard error |
//! | `mean_accuracy`, `accuracy_se` | mean solo eavesdropper accuracy, binomial SE |
//! | `colluded_accuracy`, `colluded_se` | colluded accuracy (empty when not colluding) |
//! | `accuracy_per_eve` | solo accuracies joined by `;` |
//! | `fingerprint` | configuration hash of the evaluated model |

use std::fs;
use std::path::{Path, PathBuf};

use plotters::coord::Shift;
use plotters::prelude::*;
use serde::{Deserialize, Serialize};

use crate::config::ChannelFamily;
use crate::error::{Error, Result};
use crate::evaluator::{AblationReport, EvalMetrics, SurfaceReport, SweepResult};

/// Table row of an SNR sweep.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SweepRow {
    pub family: ChannelFamily,
    pub nakagami_m: f64,
    pub gamma_b_db: f64,
    pub gamma_e_db: f64,
    pub samples: usize,
    pub ssim: f64,
    pub ssim_se: f64,
    pub mse: f64,
    pub mse_se: f64,
    pub mean_accuracy: f64,
    pub accuracy_se: f64,
    pub colluded_accuracy: Option<f64>,
    pub colluded_se: Option<f64>,
    pub accuracy_per_eve: String,
    pub fingerprint: String,
}

/// Table row of an ablation.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct AblationCsvRow {
    pub eavesdroppers: usize,
    pub colluding: bool,
    pub w: f64,
    pub samples: usize,
    pub ssim: f64,
    pub ssim_se: f64,
    pub mse: f64,
    pub mse_se: f64,
    pub mean_accuracy: f64,
    pub accuracy_se: f64,
    pub colluded_accuracy: Option<f64>,
    pub colluded_se: Option<f64>,
    pub accuracy_per_eve: String,
    pub fingerprint: String,
}

/// Table row of the `(alpha, w)` surface.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SurfaceCsvRow {
    pub alpha: f64,
    pub w: f64,
    pub samples: usize,
    pub ssim: f64,
    pub ssim_se: f64,
    pub mse: f64,
    pub mse_se: f64,
    pub mean_accuracy: f64,
    pub accuracy_se: f64,
    pub colluded_accuracy: Option<f64>,
    pub colluded_se: Option<f64>,
    pub accuracy_per_eve: String,
    pub fingerprint: String,
}

/// Table row of a single evaluation.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct EvalCsvRow {
    pub bob_family: ChannelFamily,
    pub bob_snr_db: f64,
    pub eve_family: ChannelFamily,
    pub eve_snr_db: f64,
    pub nakagami_m: f64,
    pub samples: usize,
    pub ssim: f64,
    pub ssim_se: f64,
    pub mse: f64,
    pub mse_se: f64,
    pub mean_accuracy: f64,
    pub accuracy_se: f64,
    pub colluded_accuracy: Option<f64>,
    pub colluded_se: Option<f64>,
    pub accuracy_per_eve: String,
    pub fingerprint: String,
}

fn join(acc: &[f64]) -> String {
    acc.iter().map(f64::to_string).collect::<Vec<_>>().join(";")
}

/// A report's table.
#[derive(Clone, Debug, PartialEq)]
pub enum Table {
    Sweep(Vec<SweepRow>),
    Ablation(Vec<AblationCsvRow>),
    Surface(Vec<SurfaceCsvRow>),
    Eval(Vec<EvalCsvRow>),
}

impl Table {
    pub fn from_sweeps(sweeps: &[SweepResult]) -> Self {
        Table::Sweep(
            sweeps
                .iter()
                .flat_map(|s| {
                    s.points.iter().map(|p| {
                        let m = &p.metrics;
                        SweepRow {
                            family: s.family,
                            nakagami_m: m.bob.nakagami_m,
                            gamma_b_db: p.gamma_b_db,
                            gamma_e_db: p.gamma_e_db,
                            samples: m.samples,
                            ssim: m.ssim,
                            ssim_se: m.ssim_se,
                            mse: m.mse,
                            mse_se: m.mse_se,
                            mean_accuracy: m.mean_accuracy,
                            accuracy_se: m.accuracy_se,
                            colluded_accuracy: m.colluded_accuracy,
                            colluded_se: m.colluded_se,
                            accuracy_per_eve: join(&m.accuracy),
                            fingerprint: m.fingerprint.clone(),
                        }
                    })
                })
                .collect(),
        )
    }

    pub fn from_ablation(r: &AblationReport) -> Self {
        Table::Ablation(
            r.rows
                .iter()
                .map(|row| {
                    let m = &row.metrics;
                    AblationCsvRow {
                        eavesdroppers: row.eavesdroppers,
                        colluding: row.colluding,
                        w: row.w,
                        samples: m.samples,
                        ssim: m.ssim,
                        ssim_se: m.ssim_se,
                        mse: m.mse,
                        mse_se: m.mse_se,
                        mean_accuracy: m.mean_accuracy,
                        accuracy_se: m.accuracy_se,
                        colluded_accuracy: m.colluded_accuracy,
                        colluded_se: m.colluded_se,
                        accuracy_per_eve: join(&m.accuracy),
                        fingerprint: m.fingerprint.clone(),
                    }
                })
                .collect(),
        )
    }

    pub fn from_surface(r: &SurfaceReport) -> Self {
        Table::Surface(
            r.cells
                .iter()
                .map(|c| {
                    let m = &c.metrics;
                    SurfaceCsvRow {
                        alpha: c.alpha,
                        w: c.w,
                        samples: m.samples,
                        ssim: m.ssim,
                        ssim_se: m.ssim_se,
                        mse: m.mse,
                        mse_se: m.mse_se,
                        mean_accuracy: m.mean_accuracy,
                        accuracy_se: m.accuracy_se,
                        colluded_accuracy: m.colluded_accuracy,
                        colluded_se: m.colluded_se,
                        accuracy_per_eve: join(&m.accuracy),
                        fingerprint: m.fingerprint.clone(),
                    }
                })
                .collect(),
        )
    }

    pub fn from_eval(points: &[EvalMetrics]) -> Self {
        Table::Eval(
            points
                .iter()
                .map(|m| EvalCsvRow {
                    bob_family: m.bob.family,
                    bob_snr_db: m.bob.snr_db,
                    eve_family: m.eve.family,
                    eve_snr_db: m.eve.snr_db,
                    nakagami_m: m.bob.nakagami_m,
                    samples: m.samples,
                    ssim: m.ssim,
                    ssim_se: m.ssim_se,
                    mse: m.mse,
                    mse_se: m.mse_se,
                    mean_accuracy: m.mean_accuracy,
                    accuracy_se: m.accuracy_se,
                    colluded_accuracy: m.colluded_accuracy,
                    colluded_se: m.colluded_se,
                    accuracy_per_eve: join(&m.accuracy),
                    fingerprint: m.fingerprint.clone(),
                })
                .collect(),
        )
    }

    pub fn len(&self) -> usize {
        match self {
            Table::Sweep(r) => r.len(),
            Table::Ablation(r) => r.len(),
            Table::Surface(r) => r.len(),
            Table::Eval(r) => r.len(),
        }
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    pub fn to_csv(&self) -> Result<Vec<u8>> {
        let mut w = csv::Writer::from_writer(Vec::new());
        match self {
            Table::Sweep(rows) => rows.iter().try_for_each(|r| w.serialize(r))?,
            Table::Ablation(rows) => rows.iter().try_for_each(|r| w.serialize(r))?,
            Table::Surface(rows) => rows.iter().try_for_each(|r| w.serialize(r))?,
            Table::Eval(rows) => rows.iter().try_for_each(|r| w.serialize(r))?,
        }
        w.into_inner().map_err(|e| Error::Report(e.to_string()))
    }

    /// Parses a table, recognising its kind from the header.
    pub fn from_csv(bytes: &[u8]) -> Result<Self> {
        let mut r = csv::Reader::from_reader(bytes);
        let header: Vec<String> = r.headers()?.iter().map(str::to_string).collect();
        let has = |c: &str| header.iter().any(|h| h == c);
        Ok(if has("gamma_e_db") {
            Table::Sweep(r.deserialize().collect::<std::result::Result<_, _>>()?)
        } else if has("eavesdroppers") {
            Table::Ablation(r.deserialize().collect::<std::result::Result<_, _>>()?)
        } else if has("alpha") {
            Table::Surface(r.deserialize().collect::<std::result::Result<_, _>>()?)
        } else if has("bob_family") {
            Table::Eval(r.deserialize().collect::<std::result::Result<_, _>>()?)
        } else {
            return Err(Error::Report(format!("unrecognised table header {header:?}")));
        })
    }
}

fn draw_err<E: std::fmt::Display>(e: E) -> Error {
    Error::Report(e.to_string())
}

const PALETTE: [RGBColor; 4] = [BLUE, RED, GREEN, MAGENTA];

type Area<'a> = DrawingArea<SVGBackend<'a>, Shift>;

fn padded_range(values: impl Iterator<Item = f64>) -> std::ops::Range<f64> {
    let (lo, hi) = values.fold((f64::INFINITY, f64::NEG_INFINITY), |(lo, hi), v| (lo.min(v), hi.max(v)));
    if !lo.is_finite() {
        return 0.0..1.0;
    }
    let pad = ((hi - lo) * 0.05).max(1e-3);
    (lo - pad)..(hi + pad)
}

/// Line chart of several `(label, points)` series.
fn line_panel(area: &Area, title: &str, x_desc: &str, y_desc: &str, series: &[(String, Vec<(f64, f64)>)]) -> Result<()> {
    let xs = padded_range(series.iter().flat_map(|(_, p)| p.iter().map(|q| q.0)));
    let ys = padded_range(series.iter().flat_map(|(_, p)| p.iter().map(|q| q.1)));
    let mut chart = ChartBuilder::on(area)
        .caption(title, ("sans-serif", 18))
        .margin(12)
        .x_label_area_size(36)
        .y_label_area_size(52)
        .build_cartesian_2d(xs, ys)
        .map_err(draw_err)?;
    chart
        .configure_mesh()
        .x_desc(x_desc)
        .y_desc(y_desc)
        .draw()
        .map_err(draw_err)?;
    for (i, (label, points)) in series.iter().enumerate() {
        let color = PALETTE[i % PALETTE.len()];
        chart
            .draw_series(LineSeries::new(points.iter().copied(), color.stroke_width(2)))
            .map_err(draw_err)?
            .label(label.as_str())
            .legend(move |(x, y)| PathElement::new(vec![(x, y), (x + 18, y)], color.stroke_width(2)));
        chart
            .draw_series(points.iter().map(|&p| Circle::new(p, 3, color.filled())))
            .map_err(draw_err)?;
    }
    chart
        .configure_series_labels()
        .background_style(WHITE.mix(0.85))
        .border_style(BLACK)
        .draw()
        .map_err(draw_err)?;
    Ok(())
}

fn two_panels(path: &Path, draw: impl FnOnce(&Area, &Area) -> Result<()>) -> Result<()> {
    let root = SVGBackend::new(path, (1100, 440)).into_drawing_area();
    root.fill(&WHITE).map_err(draw_err)?;
    let panels = root.split_evenly((1, 2));
    draw(&panels[0], &panels[1])?;
    root.present().map_err(draw_err)
}

fn sweep_plot(path: &Path, rows: &[&SweepRow], title: &str) -> Result<()> {
    let mut families: Vec<ChannelFamily> = rows.iter().map(|r| r.family).collect();
    families.dedup();
    let mut acc = Vec::new();
    let mut ssim = Vec::new();
    for f in &families {
        let of: Vec<&&SweepRow> = rows.iter().filter(|r| r.family == *f).collect();
        acc.push((format!("{f} mean"), of.iter().map(|r| (r.gamma_e_db, r.mean_accuracy)).collect()));
        if of.iter().all(|r| r.colluded_accuracy.is_some()) {
            acc.push((
                format!("{f} colluded"),
                of.iter().map(|r| (r.gamma_e_db, r.colluded_accuracy.unwrap_or(0.0))).collect(),
            ));
        }
        ssim.push((f.to_string(), of.iter().map(|r| (r.gamma_e_db, r.ssim)).collect()));
    }
    two_panels(path, |a, b| {
        line_panel(a, &format!("{title}: eavesdropper accuracy"), "Eve SNR (dB)", "accuracy", &acc)?;
        line_panel(b, &format!("{title}: SSIM at Bob"), "Eve SNR (dB)", "SSIM", &ssim)
    })
}

fn ablation_plot(path: &Path, rows: &[AblationCsvRow]) -> Result<()> {
    let idx = |i: usize| i as f64;
    let acc = vec![
        ("mean solo".to_string(), rows.iter().enumerate().map(|(i, r)| (idx(i), r.mean_accuracy)).collect()),
        (
            "colluded".to_string(),
            rows.iter()
                .enumerate()
                .filter_map(|(i, r)| r.colluded_accuracy.map(|a| (idx(i), a)))
                .collect(),
        ),
    ];
    let ssim = vec![("SSIM".to_string(), rows.iter().enumerate().map(|(i, r)| (idx(i), r.ssim)).collect())];
    let legend: Vec<String> = rows
        .iter()
        .enumerate()
        .map(|(i, r)| format!("{i}: M={} {} w={}", r.eavesdroppers, if r.colluding { "colluding" } else { "solo" }, r.w))
        .collect();
    let x_desc = legend.join(", ");
    two_panels(path, |a, b| {
        line_panel(a, "ablation: eavesdropper accuracy", &x_desc, "accuracy", &acc)?;
        line_panel(b, "ablation: SSIM at Bob", "variant", "SSIM", &ssim)
    })
}

fn heat_color(v: f64, lo: f64, hi: f64) -> RGBColor {
    let t = if hi > lo { ((v - lo) / (hi - lo)).clamp(0.0, 1.0) } else { 0.5 };
    RGBColor((255.0 * t) as u8, (80.0 + 100.0 * (1.0 - (2.0 * t - 1.0).abs())) as u8, (255.0 * (1.0 - t)) as u8)
}

fn heatmap(area: &Area, title: &str, alphas: &[f64], ws: &[f64], value: impl Fn(f64, f64) -> Option<f64>) -> Result<()> {
    let vals: Vec<f64> = alphas
        .iter()
        .flat_map(|a| ws.iter().filter_map(|w| value(*a, *w)).collect::<Vec<_>>())
        .collect();
    let lo = vals.iter().cloned().fold(f64::INFINITY, f64::min);
    let hi = vals.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
    let (na, nw) = (alphas.len(), ws.len());
    let mut chart = ChartBuilder::on(area)
        .caption(title, ("sans-serif", 18))
        .margin(12)
        .x_label_area_size(36)
        .y_label_area_size(52)
        .build_cartesian_2d(0f64..nw as f64, 0f64..na as f64)
        .map_err(draw_err)?;
    let wl: Vec<String> = ws.iter().map(|w| w.to_string()).collect();
    let al: Vec<String> = alphas.iter().map(|a| a.to_string()).collect();
    chart
        .configure_mesh()
        .disable_mesh()
        .x_desc("w")
        .y_desc("alpha")
        .x_labels(nw.max(2) * 2)
        .y_labels(na.max(2) * 2)
        .x_label_formatter(&|x| label_at(&wl, *x))
        .y_label_formatter(&|y| label_at(&al, *y))
        .draw()
        .map_err(draw_err)?;
    for (i, a) in alphas.iter().enumerate() {
        for (j, w) in ws.iter().enumerate() {
            if let Some(v) = value(*a, *w) {
                let (x, y) = (j as f64, i as f64);
                chart
                    .draw_series(std::iter::once(Rectangle::new(
                        [(x, y), (x + 1.0, y + 1.0)],
                        heat_color(v, lo, hi).filled(),
                    )))
                    .map_err(draw_err)?;
                chart
                    .draw_series(std::iter::once(Text::new(
                        format!("{v:.3}"),
                        (x + 0.35, y + 0.5),
                        ("sans-serif", 14).into_font().color(&BLACK),
                    )))
                    .map_err(draw_err)?;
            }
        }
    }
    Ok(())
}

/// Tick label for cell centres only.
fn label_at(labels: &[String], pos: f64) -> String {
    let i = pos - 0.5;
    if i >= 0.0 && (i - i.round()).abs() < 1e-6 {
        labels.get(i.round() as usize).cloned().unwrap_or_default()
    } else {
        String::new()
    }
}

fn surface_plot(path: &Path, rows: &[SurfaceCsvRow]) -> Result<()> {
    let mut alphas: Vec<f64> = rows.iter().map(|r| r.alpha).collect();
    let mut ws: Vec<f64> = rows.iter().map(|r| r.w).collect();
    alphas.sort_by(f64::total_cmp);
    alphas.dedup();
    ws.sort_by(f64::total_cmp);
    ws.dedup();
    let find = |a: f64, w: f64| rows.iter().find(|r| r.alpha == a && r.w == w);
    two_panels(path, |l, r| {
        heatmap(l, "SSIM at Bob", &alphas, &ws, |a, w| find(a, w).map(|r| r.ssim))?;
        heatmap(r, "eavesdropper accuracy", &alphas, &ws, |a, w| find(a, w).map(|r| r.mean_accuracy))
    })
}

fn eval_plot(path: &Path, rows: &[EvalCsvRow]) -> Result<()> {
    let acc: Vec<(String, Vec<(f64, f64)>)> = rows
        .iter()
        .enumerate()
        .map(|(i, r)| {
            let pts = r
                .accuracy_per_eve
                .split(';')
                .filter_map(|s| s.parse::<f64>().ok())
                .enumerate()
                .map(|(m, a)| (m as f64, a))
                .collect();
            (format!("point {i}: Eve at {} dB", r.eve_snr_db), pts)
        })
        .collect();
    let ssim = vec![(
        "SSIM".to_string(),
        rows.iter().map(|r| (r.bob_snr_db, r.ssim)).collect(),
    )];
    two_panels(path, |a, b| {
        line_panel(a, "accuracy per eavesdropper", "eavesdropper", "accuracy", &acc)?;
        line_panel(b, "SSIM at Bob", "Bob SNR (dB)", "SSIM", &ssim)
    })
}

/// Draws every plot of `table` into `dir`; returns the files written.
pub fn render_plots(table: &Table, dir: &Path) -> Result<Vec<PathBuf>> {
    let mut out = Vec::new();
    match table {
        Table::Sweep(rows) => {
            let all: Vec<&SweepRow> = rows.iter().collect();
            let p = dir.join("plot.svg");
            sweep_plot(&p, &all, "all channels")?;
            out.push(p);
            let mut families: Vec<ChannelFamily> = rows.iter().map(|r| r.family).collect();
            families.dedup();
            for f in families {
                let of: Vec<&SweepRow> = rows.iter().filter(|r| r.family == f).collect();
                let p = dir.join(format!("plot-{f}.svg"));
                sweep_plot(&p, &of, f.name())?;
                out.push(p);
            }
        }
        Table::Ablation(rows) => {
            let p = dir.join("plot.svg");
            ablation_plot(&p, rows)?;
            out.push(p);
        }
        Table::Surface(rows) => {
            let p = dir.join("plot.svg");
            surface_plot(&p, rows)?;
            out.push(p);
        }
        Table::Eval(rows) => {
            let p = dir.join("plot.svg");
            eval_plot(&p, rows)?;
            out.push(p);
        }
    }
    Ok(out)
}

/// Writes `table`, its plots and `config_snapshot` into a fresh
/// `<root>/<suite>/<timestamp>` directory, which is returned.
pub fn emit_report(table: &Table, suite: &str, root: &Path, config_snapshot: &str) -> Result<PathBuf> {
    if table.is_empty() {
        return Err(Error::Report("nothing to report".into()));
    }
    let stamp = chrono::Local::now().format("%Y%m%dT%H%M%S").to_string();
    let base = root.join(suite);
    let mut dir = base.join(&stamp);
    let mut n = 1;
    while dir.exists() {
        dir = base.join(format!("{stamp}-{n}"));
        n += 1;
    }
    write_report(table, &dir, config_snapshot)?;
    Ok(dir)
}

/// Writes a report into an explicit directory.
pub fn write_report(table: &Table, dir: &Path, config_snapshot: &str) -> Result<()> {
    fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
    let data = dir.join("data.csv");
    fs::write(&data, table.to_csv()?).map_err(|e| Error::io(&data, e))?;
    let snap = dir.join("config.snapshot");
    fs::write(&snap, config_snapshot).map_err(|e| Error::io(&snap, e))?;
    render_plots(table, dir)?;
    Ok(())
}

/// Rebuilds the plots of an existing report from its `data.csv`.
pub fn regenerate(dir: &Path) -> Result<Table> {
    let data = dir.join("data.csv");
    let bytes = fs::read(&data).map_err(|e| Error::io(&data, e))?;
    let table = Table::from_csv(&bytes)?;
    render_plots(&table, dir)?;
    Ok(table)
}
