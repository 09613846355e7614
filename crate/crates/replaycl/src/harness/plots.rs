//! Static PNG plots: per-task accuracy series (legend labeled `(E, S)`)
//! and per-epoch loss traces.

use plotters::prelude::*;
use plotters::style::{register_font, FontStyle};
use std::path::Path;
use std::sync::OnceLock;

use super::LossRow;
use crate::error::{Error, Result};

/// Overrides the font file used for plot text.
pub const FONT_ENV: &str = "REPLAYCL_FONT";

/// The text backend has no built-in font; register a system TTF once.
fn ensure_font() -> Result<()> {
    static FOUND: OnceLock<bool> = OnceLock::new();
    let ok = *FOUND.get_or_init(|| {
        let mut candidates: Vec<String> = Vec::new();
        if let Ok(p) = std::env::var(FONT_ENV) {
            candidates.push(p);
        }
        candidates.extend(
            [
                "/usr/share/fonts/truetype/dejavu/DejaVuSans.ttf",
                "/usr/share/fonts/truetype/liberation/LiberationSans-Regular.ttf",
                "/usr/share/fonts/TTF/DejaVuSans.ttf",
                "/Library/Fonts/Arial Unicode.ttf",
                "/System/Library/Fonts/Supplemental/Arial.ttf",
            ]
            .iter()
            .map(|s| s.to_string()),
        );
        for path in candidates {
            if let Ok(bytes) = std::fs::read(&path) {
                let leaked: &'static [u8] = Box::leak(bytes.into_boxed_slice());
                if register_font("sans-serif", FontStyle::Normal, leaked).is_ok() {
                    return true;
                }
            }
        }
        false
    });
    if ok {
        Ok(())
    } else {
        Err(Error::Plot(format!(
            "no usable TTF font found; set {FONT_ENV} to a font file"
        )))
    }
}

const PALETTE: &[RGBColor] = &[
    RGBColor(31, 119, 180),
    RGBColor(255, 127, 14),
    RGBColor(44, 160, 44),
    RGBColor(214, 39, 40),
    RGBColor(148, 103, 189),
    RGBColor(140, 86, 75),
    RGBColor(227, 119, 194),
    RGBColor(127, 127, 127),
];

/// Accuracy per task index, one labeled series per run; the y axis is
/// always the full `[0, 100]` percent range.
pub fn plot_accuracy(path: &Path, title: &str, series: &[(String, Vec<(usize, f64)>)]) -> Result<()> {
    if series.is_empty() || series.iter().any(|(_, pts)| pts.is_empty()) {
        return Err(Error::Plot("no accuracy series to draw".into()));
    }
    ensure_font()?;
    let max_task = series
        .iter()
        .flat_map(|(_, pts)| pts.iter().map(|(t, _)| *t))
        .max()
        .unwrap();
    let root = BitMapBackend::new(path, (900, 600)).into_drawing_area();
    root.fill(&WHITE).map_err(|e| Error::Plot(e.to_string()))?;
    let mut chart = ChartBuilder::on(&root)
        .caption(title, ("sans-serif", 24))
        .margin(12)
        .x_label_area_size(40)
        .y_label_area_size(50)
        .build_cartesian_2d(0.5f64..(max_task as f64 + 0.5), 0.0f64..100.0f64)
        .map_err(|e| Error::Plot(e.to_string()))?;
    chart
        .configure_mesh()
        .x_desc("task")
        .y_desc("accuracy (%)")
        .x_labels(max_task)
        .draw()
        .map_err(|e| Error::Plot(e.to_string()))?;
    for (i, (label, pts)) in series.iter().enumerate() {
        let color = PALETTE[i % PALETTE.len()];
        chart
            .draw_series(LineSeries::new(
                pts.iter().map(|(t, v)| (*t as f64, *v)),
                color.stroke_width(2),
            ))
            .map_err(|e| Error::Plot(e.to_string()))?
            .label(label.clone())
            .legend(move |(x, y)| {
                PathElement::new(vec![(x, y), (x + 18, y)], color.stroke_width(2))
            });
        chart
            .draw_series(
                pts.iter()
                    .map(|(t, v)| Circle::new((*t as f64, *v), 4, color.filled())),
            )
            .map_err(|e| Error::Plot(e.to_string()))?;
    }
    chart
        .configure_series_labels()
        .background_style(WHITE.mix(0.85))
        .border_style(BLACK)
        .position(SeriesLabelPosition::LowerLeft)
        .draw()
        .map_err(|e| Error::Plot(e.to_string()))?;
    root.present().map_err(|e| Error::Plot(e.to_string()))?;
    Ok(())
}

/// Total and per-component losses against a global epoch counter.
pub fn plot_losses(path: &Path, losses: &[LossRow]) -> Result<()> {
    if losses.is_empty() {
        return Err(Error::Plot("no loss rows to draw".into()));
    }
    ensure_font()?;
    let n = losses.len();
    let max_y = losses
        .iter()
        .flat_map(|r| [r.total, r.l_task, r.l_shared, r.l_private])
        .fold(f64::MIN, f64::max)
        .max(1e-9);
    let root = BitMapBackend::new(path, (900, 600)).into_drawing_area();
    root.fill(&WHITE).map_err(|e| Error::Plot(e.to_string()))?;
    let mut chart = ChartBuilder::on(&root)
        .caption("training loss", ("sans-serif", 24))
        .margin(12)
        .x_label_area_size(40)
        .y_label_area_size(60)
        .build_cartesian_2d(1.0f64..(n as f64).max(2.0), 0.0f64..max_y * 1.05)
        .map_err(|e| Error::Plot(e.to_string()))?;
    chart
        .configure_mesh()
        .x_desc("epoch (cumulative across tasks)")
        .y_desc("loss")
        .draw()
        .map_err(|e| Error::Plot(e.to_string()))?;
    type Getter = fn(&LossRow) -> f64;
    let comps: [(&str, Getter); 4] = [
        ("total", |r| r.total),
        ("task", |r| r.l_task),
        ("shared VAE", |r| r.l_shared),
        ("private VAE", |r| r.l_private),
    ];
    for (i, (label, get)) in comps.iter().enumerate() {
        let color = PALETTE[i % PALETTE.len()];
        chart
            .draw_series(LineSeries::new(
                losses
                    .iter()
                    .enumerate()
                    .map(|(k, r)| ((k + 1) as f64, get(r))),
                color.stroke_width(2),
            ))
            .map_err(|e| Error::Plot(e.to_string()))?
            .label(*label)
            .legend(move |(x, y)| {
                PathElement::new(vec![(x, y), (x + 18, y)], color.stroke_width(2))
            });
    }
    chart
        .configure_series_labels()
        .background_style(WHITE.mix(0.85))
        .border_style(BLACK)
        .draw()
        .map_err(|e| Error::Plot(e.to_string()))?;
    root.present().map_err(|e| Error::Plot(e.to_string()))?;
    Ok(())
}
