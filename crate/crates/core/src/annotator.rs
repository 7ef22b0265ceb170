//! Branch outputs to confidence maps, masks and rendered panels.

use std::io::Write;
use std::path::Path;

use crate::data::ImagePatch;
use crate::error::{Error, Result};
use crate::model::Model;
use crate::nn::BnMode;
use crate::raster;
use crate::real::Real;

/// Per-pixel trust in `[0, 1]` that a pixel belongs to a structure.
#[derive(Clone, Debug, PartialEq)]
pub struct ConfidenceMap {
    pub height: usize,
    pub width: usize,
    pub values: Vec<f64>,
    pub source_id: String,
}

fn same_shape(a: usize, b: usize, what: &str) -> Result<()> {
    if a != b {
        return Err(Error::Shape(format!("{what}: {a} vs {b} values")));
    }
    Ok(())
}

/// Elementwise `|Y1 - Y2|`.
pub fn sparse_difference_map(y1: &[f64], y2: &[f64]) -> Result<Vec<f64>> {
    same_shape(y1.len(), y2.len(), "sparse_difference_map")?;
    Ok(y1.iter().zip(y2).map(|(a, b)| (a - b).abs()).collect())
}

/// Box blur of radius `radius` followed by per-image min-max scaling. A
/// constant map carries no evidence and becomes all zeros.
pub fn confidence_map(diff: &[f64], height: usize, width: usize, radius: usize, source_id: &str) -> Result<ConfidenceMap> {
    same_shape(diff.len(), height * width, "confidence_map")?;
    if let Some(v) = diff.iter().find(|v| !(**v >= 0.0) || !v.is_finite()) {
        return Err(Error::Param(format!("{source_id}: difference map holds {v}")));
    }
    let blurred = raster::box_blur(diff, height, width, radius);
    let (lo, hi) = blurred
        .iter()
        .fold((f64::INFINITY, f64::NEG_INFINITY), |(l, h), &v| (l.min(v), h.max(v)));
    let span = hi - lo;
    let values = if span > 0.0 {
        blurred.iter().map(|&v| ((v - lo) / span).clamp(0.0, 1.0)).collect()
    } else {
        vec![0.0; blurred.len()]
    };
    Ok(ConfidenceMap {
        height,
        width,
        values,
        source_id: source_id.to_string(),
    })
}

pub fn threshold_mask(conf: &ConfidenceMap, tau: f64) -> Result<Vec<bool>> {
    if !(0.0..=1.0).contains(&tau) {
        return Err(Error::Param(format!("threshold {tau} outside [0, 1]")));
    }
    Ok(conf.values.iter().map(|&v| v >= tau).collect())
}

/// Intersection over union; two empty masks agree perfectly.
pub fn iou(a: &[bool], b: &[bool]) -> Result<f64> {
    same_shape(a.len(), b.len(), "iou")?;
    let (mut inter, mut union) = (0usize, 0usize);
    for (&x, &y) in a.iter().zip(b) {
        inter += usize::from(x && y);
        union += usize::from(x || y);
    }
    Ok(if union == 0 { 1.0 } else { inter as f64 / union as f64 })
}

/// Monotone yellow to red ramp through three stops: pale yellow at 0,
/// orange at 0.5, dark red at 1.
pub fn colormap(v: f64) -> [u8; 3] {
    const STOPS: [[f64; 3]; 3] = [[255.0, 255.0, 204.0], [253.0, 141.0, 60.0], [189.0, 0.0, 38.0]];
    let v = if v.is_finite() { v.clamp(0.0, 1.0) } else { 0.0 };
    let (a, b, t) = if v <= 0.5 {
        (STOPS[0], STOPS[1], v * 2.0)
    } else {
        (STOPS[1], STOPS[2], v * 2.0 - 1.0)
    };
    std::array::from_fn(|i| (a[i] + (b[i] - a[i]) * t).round() as u8)
}

/// Blank space around and between panels, in pixels.
pub const PANEL_MARGIN: usize = 4;

/// Canvas size `(height, width)` for a `rows x cols` grid of `h x w` panels.
pub fn panel_layout(h: usize, w: usize, rows: usize, cols: usize) -> (usize, usize) {
    (rows * h + (rows + 1) * PANEL_MARGIN, cols * w + (cols + 1) * PANEL_MARGIN)
}

pub type Panel = Vec<[u8; 3]>;

/// Linear gray ramp with `lo` black and `hi` white; a degenerate range is
/// drawn mid-gray.
pub fn gray_panel(values: &[f64], lo: f64, hi: f64) -> Panel {
    values
        .iter()
        .map(|&v| {
            let t = if hi > lo && v.is_finite() { ((v - lo) / (hi - lo)).clamp(0.0, 1.0) } else { 0.5 };
            let g = (t * 255.0).round() as u8;
            [g, g, g]
        })
        .collect()
}

pub fn color_panel(values: &[f64]) -> Panel {
    values.iter().map(|&v| colormap(v)).collect()
}

/// Lay `panels` out row-major on a white canvas and write it as PNG.
pub fn write_grid(path: &Path, h: usize, w: usize, rows: usize, cols: usize, panels: &[Panel]) -> Result<()> {
    if panels.len() != rows * cols {
        return Err(Error::Shape(format!("{} panels for a {rows}x{cols} grid", panels.len())));
    }
    let (ch, cw) = panel_layout(h, w, rows, cols);
    let mut canvas = vec![255u8; ch * cw * 3];
    for (k, p) in panels.iter().enumerate() {
        same_shape(p.len(), h * w, "panel")?;
        let oy = PANEL_MARGIN + (k / cols) * (h + PANEL_MARGIN);
        let ox = PANEL_MARGIN + (k % cols) * (w + PANEL_MARGIN);
        for y in 0..h {
            for x in 0..w {
                let at = ((oy + y) * cw + ox + x) * 3;
                canvas[at..at + 3].copy_from_slice(&p[y * w + x]);
            }
        }
    }
    raster::write_rgb(path, ch, cw, canvas)
}

/// Images in one shared symmetric gray range so their levels compare.
fn signed_panels(images: &[&[f64]]) -> Vec<Panel> {
    let m = images
        .iter()
        .flat_map(|i| i.iter())
        .filter(|v| v.is_finite())
        .fold(0.0f64, |m, v| m.max(v.abs()));
    images.iter().map(|i| gray_panel(i, -m, m)).collect()
}

fn min_max(v: &[f64]) -> (f64, f64) {
    v.iter()
        .filter(|v| v.is_finite())
        .fold((f64::INFINITY, f64::NEG_INFINITY), |(l, h), &v| (l.min(v), h.max(v)))
}

/// 2x3 figure: `X, Y1, Y2` on top, `R, |Y1 - Y2|, confidence` below.
pub fn render_panels(
    x: &[f64],
    y1: &[f64],
    y2: &[f64],
    r: &[f64],
    diff: &[f64],
    conf: &ConfidenceMap,
    path: &Path,
) -> Result<()> {
    let (h, w) = (conf.height, conf.width);
    for (name, v) in [("X", x), ("Y1", y1), ("Y2", y2), ("R", r), ("diff", diff)] {
        same_shape(v.len(), h * w, name)?;
    }
    let mut g = signed_panels(&[x, y1, y2, r]).into_iter();
    let (lo, hi) = min_max(diff);
    let panels = vec![
        g.next().unwrap(),
        g.next().unwrap(),
        g.next().unwrap(),
        g.next().unwrap(),
        gray_panel(diff, lo.min(0.0), hi),
        color_panel(&conf.values),
    ];
    write_grid(path, h, w, 2, 3, &panels)
}

/// Header tag of raw float exports.
pub const RAW_MAGIC: &[u8; 8] = b"LFARAW32";

/// 16-byte header (magic, `H` and `W` as little-endian u32) then `H*W`
/// little-endian f32 values.
pub fn write_raw_f32(path: &Path, h: usize, w: usize, values: &[f64]) -> Result<()> {
    same_shape(values.len(), h * w, "raw export")?;
    let mut buf = Vec::with_capacity(16 + 4 * values.len());
    buf.extend_from_slice(RAW_MAGIC);
    buf.extend_from_slice(&(h as u32).to_le_bytes());
    buf.extend_from_slice(&(w as u32).to_le_bytes());
    for &v in values {
        buf.extend_from_slice(&(v as f32).to_le_bytes());
    }
    let mut f = std::fs::File::create(path).map_err(|e| Error::io(path, e))?;
    f.write_all(&buf).map_err(|e| Error::io(path, e))
}

pub fn read_raw_f32(path: &Path) -> Result<(usize, usize, Vec<f32>)> {
    let bytes = std::fs::read(path).map_err(|e| Error::io(path, e))?;
    let bad = |reason: &str| Error::Decode {
        path: path.into(),
        reason: reason.into(),
    };
    if bytes.len() < 16 || &bytes[..8] != RAW_MAGIC {
        return Err(bad("missing raw float header"));
    }
    let h = u32::from_le_bytes(bytes[8..12].try_into().unwrap()) as usize;
    let w = u32::from_le_bytes(bytes[12..16].try_into().unwrap()) as usize;
    if bytes.len() != 16 + 4 * h * w {
        return Err(bad("payload length disagrees with header"));
    }
    let v = bytes[16..]
        .chunks_exact(4)
        .map(|c| f32::from_le_bytes(c.try_into().unwrap()))
        .collect();
    Ok((h, w, v))
}

/// Confidence as 8-bit gray, `round(255 * c)`.
pub fn write_confidence_png(path: &Path, conf: &ConfidenceMap) -> Result<()> {
    let data = conf.values.iter().map(|&v| (v.clamp(0.0, 1.0) * 255.0).round() as u8).collect();
    raster::write_gray(path, conf.height, conf.width, data)
}

/// Everything the annotation step derives from one image.
#[derive(Clone, Debug)]
pub struct Annotation {
    pub source_id: String,
    pub x: Vec<f64>,
    pub y1: Vec<f64>,
    pub y2: Vec<f64>,
    pub recon: Vec<f64>,
    pub diff: Vec<f64>,
    pub conf: ConfidenceMap,
    pub mse_y1: f64,
    pub mse_y2: f64,
    pub mse_recon: f64,
}

fn mse(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| (x - y) * (x - y)).sum::<f64>() / a.len().max(1) as f64
}

/// Run the model in inference mode over `patches`, `batch` at a time.
pub fn annotate<T: Real>(model: &Model<T>, patches: &[ImagePatch], radius: usize, batch: usize) -> Result<Vec<Annotation>> {
    let side = model.arch.patch_size;
    let mut out = Vec::with_capacity(patches.len());
    for chunk in patches.chunks(batch.max(1)) {
        for p in chunk {
            if (p.height, p.width) != (side, side) {
                return Err(Error::Shape(format!(
                    "{}: {}x{} patch for a {side}x{side} model",
                    p.source_id, p.height, p.width
                )));
            }
        }
        let refs: Vec<&ImagePatch> = chunk.iter().collect();
        let x: Vec<T> = crate::data::stack(&refs);
        let f = model.factorize(&x, chunk.len(), BnMode::Eval)?;
        let px = side * side;
        for (i, p) in chunk.iter().enumerate() {
            let take = |v: &[T]| -> Vec<f64> { v[i * px..(i + 1) * px].iter().map(|t| t.as_f64()).collect() };
            let (y1, y2) = (take(&f.y1), take(&f.y2));
            let recon: Vec<f64> = y1.iter().zip(&y2).map(|(a, b)| a + b).collect();
            let diff = sparse_difference_map(&y1, &y2)?;
            let conf = confidence_map(&diff, side, side, radius, &p.source_id)?;
            out.push(Annotation {
                source_id: p.source_id.clone(),
                mse_y1: mse(&p.pixels, &y1),
                mse_y2: mse(&p.pixels, &y2),
                mse_recon: mse(&p.pixels, &recon),
                x: p.pixels.clone(),
                y1,
                y2,
                recon,
                diff,
                conf,
            });
        }
    }
    Ok(out)
}
