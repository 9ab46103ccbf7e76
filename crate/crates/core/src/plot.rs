//! SVG curves of test AP50 and episode cost per epoch, one series per log.

use std::path::{Path, PathBuf};

use plotters::prelude::*;

use crate::report::{read_log_series, write_file, LogSeries, ReportError};

#[derive(Debug, thiserror::Error)]
pub enum PlotError {
    #[error("no logs given")]
    NoLogs,
    #[error("{0}: log has no epochs")]
    EmptyLog(String),
    #[error("{path}: {source}")]
    Io { path: String, source: std::io::Error },
    #[error(transparent)]
    Report(#[from] ReportError),
    #[error("drawing failed: {0}")]
    Draw(String),
}

#[derive(Debug, Clone, PartialEq)]
pub struct Series {
    pub label: String,
    pub data: LogSeries,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Metric {
    Ap50,
    Cost,
}

impl Metric {
    fn values(self, s: &LogSeries) -> &[f64] {
        match self {
            Metric::Ap50 => &s.ap50,
            Metric::Cost => &s.cost,
        }
    }

    fn axis(self) -> &'static str {
        match self {
            Metric::Ap50 => "test AP50 (%)",
            Metric::Cost => "average cost per test episode",
        }
    }
}

fn padded(lo: f64, hi: f64) -> (f64, f64) {
    if hi - lo < 1e-9 {
        (lo - 1.0, hi + 1.0)
    } else {
        let pad = 0.05 * (hi - lo);
        (lo - pad, hi + pad)
    }
}

fn draw_err<E: std::fmt::Debug>(e: E) -> PlotError {
    PlotError::Draw(format!("{e:?}"))
}

/// Renders one metric for every series as an SVG document.
pub fn render_svg(series: &[Series], metric: Metric) -> Result<String, PlotError> {
    if series.is_empty() {
        return Err(PlotError::NoLogs);
    }
    if let Some(s) = series.iter().find(|s| s.data.epochs.is_empty()) {
        return Err(PlotError::EmptyLog(s.label.clone()));
    }
    let xs = series.iter().flat_map(|s| s.data.epochs.iter().copied());
    let (x0, x1) = padded(xs.clone().fold(f64::INFINITY, f64::min), xs.fold(f64::NEG_INFINITY, f64::max));
    let ys = series.iter().flat_map(|s| metric.values(&s.data).iter().copied());
    let (y0, y1) = padded(ys.clone().fold(f64::INFINITY, f64::min), ys.fold(f64::NEG_INFINITY, f64::max));

    let mut svg = String::new();
    {
        let root = SVGBackend::with_string(&mut svg, (800, 500)).into_drawing_area();
        root.fill(&WHITE).map_err(draw_err)?;
        let mut chart = ChartBuilder::on(&root)
            .margin(20)
            .x_label_area_size(40)
            .y_label_area_size(60)
            .build_cartesian_2d(x0..x1, y0..y1)
            .map_err(draw_err)?;
        chart.configure_mesh().x_desc("epoch").y_desc(metric.axis()).draw().map_err(draw_err)?;
        for (k, s) in series.iter().enumerate() {
            let color = Palette99::pick(k).to_rgba();
            let pts: Vec<(f64, f64)> = s.data.epochs.iter().copied().zip(metric.values(&s.data).iter().copied()).collect();
            chart
                .draw_series(LineSeries::new(pts.clone(), color.stroke_width(2)))
                .map_err(draw_err)?
                .label(s.label.clone())
                .legend(move |(x, y)| PathElement::new(vec![(x, y), (x + 20, y)], color.stroke_width(2)));
            chart.draw_series(pts.into_iter().map(|p| Circle::new(p, 3, color.filled()))).map_err(draw_err)?;
        }
        chart
            .configure_series_labels()
            .background_style(WHITE.mix(0.8))
            .border_style(BLACK)
            .draw()
            .map_err(draw_err)?;
        root.present().map_err(draw_err)?;
    }
    Ok(svg)
}

/// Reads each `(label, csv path)` log and writes `ap50.svg`, `cost.svg` and
/// `summary.csv` into `out_dir`.
pub fn plot_logs(logs: &[(String, PathBuf)], out_dir: &Path) -> Result<Vec<PathBuf>, PlotError> {
    if logs.is_empty() {
        return Err(PlotError::NoLogs);
    }
    let mut series = Vec::with_capacity(logs.len());
    for (label, path) in logs {
        let io = |e| PlotError::Io { path: path.display().to_string(), source: e };
        let file = std::fs::File::open(path).map_err(io)?;
        let data = read_log_series(std::io::BufReader::new(file), &path.display().to_string())?;
        if data.epochs.is_empty() {
            return Err(PlotError::EmptyLog(path.display().to_string()));
        }
        series.push(Series { label: label.clone(), data });
    }
    std::fs::create_dir_all(out_dir).map_err(|e| PlotError::Io { path: out_dir.display().to_string(), source: e })?;
    let mut written = Vec::new();
    for (metric, name) in [(Metric::Ap50, "ap50.svg"), (Metric::Cost, "cost.svg")] {
        let svg = render_svg(&series, metric)?;
        let path = out_dir.join(name);
        std::fs::write(&path, svg).map_err(|e| PlotError::Io { path: path.display().to_string(), source: e })?;
        written.push(path);
    }
    let path = out_dir.join("summary.csv");
    write_file(&path, |w| {
        let mut out = csv::Writer::from_writer(w);
        out.write_record(["label", "epochs", "final_ap50", "best_ap50", "final_cost", "min_cost"])?;
        for s in &series {
            let d = &s.data;
            let best = d.ap50.iter().copied().fold(f64::NEG_INFINITY, f64::max);
            let min_cost = d.cost.iter().copied().fold(f64::INFINITY, f64::min);
            out.write_record([
                s.label.clone(),
                d.epochs.len().to_string(),
                format!("{:.4}", d.ap50[d.ap50.len() - 1]),
                format!("{best:.4}"),
                format!("{:.6}", d.cost[d.cost.len() - 1]),
                format!("{min_cost:.6}"),
            ])?;
        }
        out.flush().map_err(|e| ReportError::Io { path: "summary.csv".into(), source: e })?;
        Ok(())
    })?;
    written.push(path);
    Ok(written)
}
