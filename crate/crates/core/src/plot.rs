//! Static recall-versus-angle charts.
//!
//! Axis labels need a TrueType font: `CONGEO_PLOT_FONT` if set, otherwise the
//! first common system sans-serif found. Without one the chart is drawn
//! unlabeled.

use std::fs;
use std::path::Path;
use std::sync::OnceLock;

use plotters::prelude::*;
use plotters::style::{register_font, FontStyle};

use crate::error::{Error, Result};
use crate::evaluation::SweepResult;

pub const FONT_ENV: &str = "CONGEO_PLOT_FONT";
const FONT_CANDIDATES: [&str; 4] = [
    "/usr/share/fonts/truetype/dejavu/DejaVuSans.ttf",
    "/usr/share/fonts/TTF/DejaVuSans.ttf",
    "/usr/share/fonts/truetype/liberation/LiberationSans-Regular.ttf",
    "/Library/Fonts/Arial.ttf",
];
const FONT_NAME: &str = "sans-serif";
const SIZE: (u32, u32) = (800, 500);
const COLORS: [RGBColor; 6] = [
    RGBColor(31, 119, 180),
    RGBColor(214, 39, 40),
    RGBColor(44, 160, 44),
    RGBColor(255, 127, 14),
    RGBColor(148, 103, 189),
    RGBColor(140, 86, 75),
];

fn font_available() -> bool {
    static LOADED: OnceLock<bool> = OnceLock::new();
    *LOADED.get_or_init(|| {
        let env = std::env::var_os(FONT_ENV).map(std::path::PathBuf::from);
        let candidates = env.into_iter().chain(FONT_CANDIDATES.iter().map(Into::into));
        for path in candidates {
            if let Ok(bytes) = fs::read(&path) {
                let leaked: &'static [u8] = Box::leak(bytes.into_boxed_slice());
                if register_font(FONT_NAME, FontStyle::Normal, leaked).is_ok() {
                    return true;
                }
            }
        }
        false
    })
}

fn plot_err(e: impl std::fmt::Display) -> Error {
    Error::Png(format!("plot rendering failed: {e}"))
}

/// Draws one R@1 curve per named sweep and writes an RGB PNG.
pub fn plot_sweeps(curves: &[(&str, &SweepResult)], path: impl AsRef<Path>) -> Result<()> {
    if curves.is_empty() {
        return Err(Error::invalid("nothing to plot"));
    }
    let labels = font_available();
    let (w, h) = SIZE;
    let mut buf = vec![0u8; (w * h * 3) as usize];
    {
        let root = BitMapBackend::with_buffer(&mut buf, SIZE).into_drawing_area();
        root.fill(&WHITE).map_err(plot_err)?;
        let x_max = curves
            .iter()
            .flat_map(|(_, s)| s.angles.iter().copied())
            .fold(360.0f64, f64::max);
        let mut builder = ChartBuilder::on(&root);
        builder.margin(20);
        if labels {
            builder
                .caption("R@1 under query shift", (FONT_NAME, 24))
                .x_label_area_size(40)
                .y_label_area_size(50);
        }
        let mut chart = builder.build_cartesian_2d(0.0..x_max, 0.0..1.0f64).map_err(plot_err)?;
        let mut mesh = chart.configure_mesh();
        if labels {
            mesh.x_desc("shift angle (deg)").y_desc("R@1").label_style((FONT_NAME, 14));
        } else {
            mesh.disable_x_axis().disable_y_axis();
        }
        mesh.draw().map_err(plot_err)?;
        for (i, (name, sweep)) in curves.iter().enumerate() {
            let color = COLORS[i % COLORS.len()];
            let points: Vec<(f64, f64)> = sweep.angles.iter().copied().zip(sweep.recall_curve.iter().copied()).collect();
            let series = chart.draw_series(LineSeries::new(points, color.stroke_width(2))).map_err(plot_err)?;
            if labels {
                let label = format!("{name} (gap {:.3})", sweep.invariance_gap);
                series.label(label).legend(move |(x, y)| PathElement::new(vec![(x, y), (x + 20, y)], color.stroke_width(2)));
            }
        }
        if labels {
            chart
                .configure_series_labels()
                .background_style(WHITE.mix(0.8))
                .border_style(BLACK)
                .label_font((FONT_NAME, 14))
                .draw()
                .map_err(plot_err)?;
        }
        root.present().map_err(plot_err)?;
    }
    let path = path.as_ref();
    let file = fs::File::create(path).map_err(|e| Error::io(path, e))?;
    let mut enc = png::Encoder::new(std::io::BufWriter::new(file), w, h);
    enc.set_color(png::ColorType::Rgb);
    enc.set_depth(png::BitDepth::Eight);
    let mut writer = enc.write_header().map_err(plot_err)?;
    writer.write_image_data(&buf).map_err(plot_err)?;
    writer.finish().map_err(plot_err)
}
