//! Plot files for an evaluation: one sample panel per step count
//! (`{run_id}_{k}step.svg` scatter for points, `.png` grid for images), a
//! metric-vs-k chart and the report as JSON.

use std::fmt::Write as _;
use std::fs;
use std::path::{Path, PathBuf};

use image::{ImageBuffer, ImageEncoder, Luma};

use crate::error::{Error, Result};
use crate::eval::EvalReport;
use crate::models::checkpoint::write_atomic;
use crate::tensor::Tensor;

const SVG_SIZE: f64 = 400.0;
const GRID_COLS: usize = 8;
const GRID_MAX: usize = 64;

enum Panel {
    Scatter,
    Grid { channels: usize, h: usize, w: usize },
}

fn panel_kind(x: &Tensor) -> Result<Panel> {
    match *x.shape() {
        [n, 2] if n > 0 => Ok(Panel::Scatter),
        [n, c, h, w] if n > 0 && (c == 1 || c == 3) && h > 0 && w > 0 => Ok(Panel::Grid { channels: c, h, w }),
        _ => Err(Error::InvalidArgument(format!("cannot plot samples of shape {:?}", x.shape()))),
    }
}

/// Writes all plot files; every input is validated before anything is written.
pub fn emit_plots(
    report: &EvalReport,
    samples: &[(usize, Tensor)],
    reference: Option<&Tensor>,
    out_dir: &Path,
) -> Result<Vec<PathBuf>> {
    if samples.is_empty() {
        return Err(Error::InvalidArgument("no samples to plot".into()));
    }
    let kinds = samples.iter().map(|(_, x)| panel_kind(x)).collect::<Result<Vec<_>>>()?;
    if samples.iter().map(|(k, _)| *k).ne(report.step_counts.iter().copied()) {
        return Err(Error::InvalidArgument("sample step counts do not match the report".into()));
    }
    if report.run_id.is_empty() || report.run_id.contains(['/', '\\']) {
        return Err(Error::InvalidArgument(format!("run id `{}` is not a file name stem", report.run_id)));
    }
    fs::create_dir_all(out_dir).map_err(|e| Error::io(out_dir, e))?;

    let mut rendered: Vec<(PathBuf, Vec<u8>)> = Vec::new();
    for ((k, x), kind) in samples.iter().zip(kinds) {
        let stem = format!("{}_{k}step", report.run_id);
        match kind {
            Panel::Scatter => rendered.push((out_dir.join(format!("{stem}.svg")), scatter_svg(x, reference, *k).into_bytes())),
            Panel::Grid { channels, h, w } => rendered.push((out_dir.join(format!("{stem}.png")), image_grid(x, channels, h, w)?)),
        }
    }
    rendered.push((out_dir.join(format!("{}_metrics.svg", report.run_id)), metric_chart_svg(report).into_bytes()));
    rendered.push((out_dir.join(format!("{}_report.json", report.run_id)), report.to_json().into_bytes()));

    for (path, bytes) in &rendered {
        write_atomic(path, bytes)?;
    }
    Ok(rendered.into_iter().map(|(p, _)| p).collect())
}

fn bounds(sets: &[&Tensor]) -> (f64, f64) {
    let mut lo = f64::INFINITY;
    let mut hi = f64::NEG_INFINITY;
    for v in sets.iter().flat_map(|t| t.data()) {
        if v.is_finite() {
            lo = lo.min(*v);
            hi = hi.max(*v);
        }
    }
    if lo >= hi {
        (lo - 1.0, lo + 1.0)
    } else {
        let pad = 0.05 * (hi - lo);
        (lo - pad, hi + pad)
    }
}

fn scatter_svg(x: &Tensor, reference: Option<&Tensor>, k: usize) -> String {
    let sets: Vec<&Tensor> = reference.into_iter().chain([x]).collect();
    let (lo, hi) = bounds(&sets);
    let px = |v: f64| (v - lo) / (hi - lo) * SVG_SIZE;
    let mut s = format!(
        "<svg xmlns=\"http://www.w3.org/2000/svg\" width=\"{SVG_SIZE}\" height=\"{}\">\n\
         <rect width=\"100%\" height=\"100%\" fill=\"white\"/>\n\
         <text x=\"8\" y=\"{}\" font-family=\"sans-serif\" font-size=\"14\">{k}-step samples (blue) vs data (grey)</text>\n",
        SVG_SIZE + 24.0,
        SVG_SIZE + 18.0
    );
    for (t, colour) in [(reference, "#999999"), (Some(x), "#1f5fbf")] {
        let Some(t) = t else { continue };
        for i in 0..t.rows() {
            let p = t.row(i);
            if p.iter().all(|v| v.is_finite()) {
                let _ = writeln!(s, "<circle cx=\"{:.2}\" cy=\"{:.2}\" r=\"1.5\" fill=\"{colour}\" fill-opacity=\"0.5\"/>", px(p[0]), SVG_SIZE - px(p[1]));
            }
        }
    }
    s.push_str("</svg>\n");
    s
}

/// First [`GRID_MAX`] images tiled row-major with a one-pixel gutter, `[-1, 1]` mapped to `[0, 255]`.
fn image_grid(x: &Tensor, channels: usize, h: usize, w: usize) -> Result<Vec<u8>> {
    let n = x.rows().min(GRID_MAX);
    let cols = n.min(GRID_COLS);
    let rows = n.div_ceil(cols);
    let (gw, gh) = (cols * (w + 1) + 1, rows * (h + 1) + 1);
    let mut img: ImageBuffer<Luma<u8>, Vec<u8>> = ImageBuffer::from_pixel(gw as u32, gh as u32, Luma([64]));
    for i in 0..n {
        let sample = x.row(i);
        let (oy, ox) = (1 + (i / cols) * (h + 1), 1 + (i % cols) * (w + 1));
        for y in 0..h {
            for xx in 0..w {
                // Colour images are shown by their channel mean.
                let v = (0..channels).map(|c| sample[(c * h + y) * w + xx]).sum::<f64>() / channels as f64;
                let byte = ((v.clamp(-1.0, 1.0) + 1.0) * 127.5).round() as u8;
                img.put_pixel((ox + xx) as u32, (oy + y) as u32, Luma([byte]));
            }
        }
    }
    let mut buf = Vec::new();
    image::codecs::png::PngEncoder::new(&mut buf)
        .write_image(img.as_raw(), gw as u32, gh as u32, image::ExtendedColorType::L8)
        .map_err(|e| Error::InvalidArgument(format!("png encoding: {e}")))?;
    Ok(buf)
}

fn metric_chart_svg(report: &EvalReport) -> String {
    let (w, h, m) = (SVG_SIZE, SVG_SIZE * 0.75, 40.0);
    let ks: Vec<f64> = report.metrics.iter().map(|r| r.k as f64).collect();
    let (kmin, kmax) = (ks.iter().cloned().fold(f64::INFINITY, f64::min), ks.iter().cloned().fold(f64::NEG_INFINITY, f64::max));
    let series: [(&str, &str, Vec<f64>); 3] = [
        ("swd", "#1f5fbf", report.metrics.iter().map(|r| r.swd).collect()),
        ("mmd", "#bf5f1f", report.metrics.iter().map(|r| r.mmd).collect()),
        ("patch_div", "#2f9f4f", report.metrics.iter().filter_map(|r| r.patch_div).collect()),
    ];
    let vmax = series.iter().flat_map(|s| s.2.iter().cloned()).filter(|v| v.is_finite()).fold(0.0, f64::max).max(1e-12);
    let sx = |k: f64| if kmax > kmin { m + (k - kmin) / (kmax - kmin) * (w - 2.0 * m) } else { w / 2.0 };
    let sy = |v: f64| h - m - v / vmax * (h - 2.0 * m);
    let mut s = format!(
        "<svg xmlns=\"http://www.w3.org/2000/svg\" width=\"{w}\" height=\"{h}\">\n\
         <rect width=\"100%\" height=\"100%\" fill=\"white\"/>\n\
         <line x1=\"{m}\" y1=\"{y0}\" x2=\"{x1}\" y2=\"{y0}\" stroke=\"black\"/>\n\
         <line x1=\"{m}\" y1=\"{m}\" x2=\"{m}\" y2=\"{y0}\" stroke=\"black\"/>\n\
         <text x=\"{m}\" y=\"{ty}\" font-family=\"sans-serif\" font-size=\"12\">metric vs steps (max {vmax:.4})</text>\n",
        y0 = h - m,
        x1 = w - m,
        ty = m - 10.0
    );
    for k in &ks {
        let _ = writeln!(s, "<text x=\"{:.1}\" y=\"{:.1}\" font-family=\"sans-serif\" font-size=\"12\">{k}</text>", sx(*k) - 4.0, h - m + 16.0);
    }
    for (i, (name, colour, vals)) in series.iter().enumerate() {
        if vals.len() != ks.len() {
            continue;
        }
        let pts: Vec<String> = ks.iter().zip(vals).map(|(k, v)| format!("{:.2},{:.2}", sx(*k), sy(*v))).collect();
        let _ = writeln!(s, "<polyline points=\"{}\" fill=\"none\" stroke=\"{colour}\" stroke-width=\"2\"/>", pts.join(" "));
        let _ = writeln!(
            s,
            "<text x=\"{:.1}\" y=\"{:.1}\" fill=\"{colour}\" font-family=\"sans-serif\" font-size=\"12\">{name}</text>",
            w - m - 60.0,
            m + 14.0 * i as f64
        );
    }
    s.push_str("</svg>\n");
    s
}
