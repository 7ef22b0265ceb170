//! Instantaneous amplitude and phase from the analytic signal, used as the
//! classical comparison for the learned confidence maps.

use std::path::Path;
use std::str::FromStr;

use rustfft::num_complex::Complex;
use rustfft::FftPlanner;

use crate::annotator::{color_panel, write_grid, ConfidenceMap};
use crate::error::{Error, Result};

/// Written next to exported attributes.
pub const HILBERT_CONVENTION: &str = "quadrature = real(IFFT(m * FFT(x))) with m = -i on positive \
frequencies, +i on negative frequencies, 0 at DC and (for even lengths) at Nyquist; \
phase = atan2(quadrature, x) with atan2(0, 0) = 0; no taper";

#[derive(Clone, Copy, Debug, PartialEq, Eq, Default)]
pub enum TraceAxis {
    /// Each row is one trace.
    Rows,
    /// Each column is one trace (vertical time axis).
    #[default]
    Columns,
}

impl FromStr for TraceAxis {
    type Err = Error;
    fn from_str(s: &str) -> Result<Self> {
        match s {
            "rows" => Ok(Self::Rows),
            "columns" | "cols" => Ok(Self::Columns),
            _ => Err(Error::Param(format!("trace axis must be rows or columns, got {s:?}"))),
        }
    }
}

/// Returns `(x, H(x))`.
pub fn analytic_signal(trace: &[f64]) -> Result<(Vec<f64>, Vec<f64>)> {
    let mut planner = FftPlanner::new();
    Ok((trace.to_vec(), quadrature(trace, &mut planner)?))
}

fn quadrature(trace: &[f64], planner: &mut FftPlanner<f64>) -> Result<Vec<f64>> {
    let n = trace.len();
    if n < 4 {
        return Err(Error::Param(format!("trace length {n} is below 4")));
    }
    let mut buf: Vec<Complex<f64>> = trace.iter().map(|&v| Complex::new(v, 0.0)).collect();
    planner.plan_fft_forward(n).process(&mut buf);
    buf[0] = Complex::new(0.0, 0.0);
    for (k, c) in buf.iter_mut().enumerate().skip(1) {
        *c = if 2 * k < n {
            Complex::new(c.im, -c.re)
        } else if 2 * k > n {
            Complex::new(-c.im, c.re)
        } else {
            Complex::new(0.0, 0.0)
        };
    }
    planner.plan_fft_inverse(n).process(&mut buf);
    let scale = 1.0 / n as f64;
    Ok(buf.iter().map(|c| c.re * scale).collect())
}

#[derive(Clone, Debug, PartialEq)]
pub struct AttributeSection {
    pub height: usize,
    pub width: usize,
    pub amplitude: Vec<f64>,
    pub phase: Vec<f64>,
    pub source_id: String,
}

/// Apply `f(x, H(x))` sample-wise along every trace of an `h x w` section.
fn per_sample(
    section: &[f64],
    h: usize,
    w: usize,
    axis: TraceAxis,
    f: impl Fn(f64, f64) -> f64,
) -> Result<Vec<f64>> {
    if section.len() != h * w {
        return Err(Error::Shape(format!("{} values for a {h}x{w} section", section.len())));
    }
    let (traces, len) = match axis {
        TraceAxis::Rows => (h, w),
        TraceAxis::Columns => (w, h),
    };
    let at = |t: usize, s: usize| match axis {
        TraceAxis::Rows => t * w + s,
        TraceAxis::Columns => s * w + t,
    };
    let mut planner = FftPlanner::new();
    let mut out = vec![0.0; h * w];
    for t in 0..traces {
        let trace: Vec<f64> = (0..len).map(|s| section[at(t, s)]).collect();
        let q = quadrature(&trace, &mut planner)?;
        for s in 0..len {
            out[at(t, s)] = f(trace[s], q[s]);
        }
    }
    Ok(out)
}

pub fn instantaneous_amplitude(section: &[f64], h: usize, w: usize, axis: TraceAxis) -> Result<Vec<f64>> {
    per_sample(section, h, w, axis, f64::hypot)
}

/// In `(-pi, pi]`; a zero sample has phase 0.
pub fn instantaneous_phase(section: &[f64], h: usize, w: usize, axis: TraceAxis) -> Result<Vec<f64>> {
    per_sample(section, h, w, axis, |x, q| {
        let p = q.atan2(x);
        // atan2 gives -pi for (-0.0, negative); fold onto the closed end.
        if p == -std::f64::consts::PI {
            std::f64::consts::PI
        } else {
            p
        }
    })
}

pub fn attributes(section: &[f64], h: usize, w: usize, axis: TraceAxis, source_id: &str) -> Result<AttributeSection> {
    Ok(AttributeSection {
        height: h,
        width: w,
        amplitude: instantaneous_amplitude(section, h, w, axis)?,
        phase: instantaneous_phase(section, h, w, axis)?,
        source_id: source_id.into(),
    })
}

/// Min-max to `[0, 1]`; constant input maps to 0.
fn unit(v: &[f64]) -> Vec<f64> {
    let (lo, hi) = v.iter().fold((f64::INFINITY, f64::NEG_INFINITY), |(l, h), &x| (l.min(x), h.max(x)));
    if hi > lo {
        v.iter().map(|&x| (x - lo) / (hi - lo)).collect()
    } else {
        vec![0.0; v.len()]
    }
}

/// One row of four colormapped panels: input, confidence, amplitude, phase.
/// Each panel except confidence is min-max scaled on its own.
pub fn compare_panels(x: &[f64], conf: &ConfidenceMap, attrs: &AttributeSection, path: &Path) -> Result<()> {
    let (h, w) = (conf.height, conf.width);
    if (attrs.height, attrs.width) != (h, w) || x.len() != h * w {
        return Err(Error::Shape(format!(
            "comparison needs equal shapes: input {} values, confidence {h}x{w}, attributes {}x{}",
            x.len(),
            attrs.height,
            attrs.width
        )));
    }
    let panels = [
        color_panel(&unit(x)),
        color_panel(&conf.values),
        color_panel(&unit(&attrs.amplitude)),
        color_panel(&unit(&attrs.phase)),
    ];
    write_grid(path, h, w, 1, 4, &panels)
}
