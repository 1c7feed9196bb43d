//! Dense flow from cost volumes, cyclic-consistency confidence masks, flow
//! upsampling and Middlebury `.flo` export.

use std::io::{Read, Write};
use std::path::Path;

use ndarray::{Array2, Array3};

use crate::correlation::{matching_distribution, CostVolume};
use crate::error::{Error, Result};
use crate::imaging::{ConfidenceMask, FlowField, FlowResolution};

/// How a correspondence is read off each cost row.
#[derive(Debug, Clone, Copy, PartialEq)]
pub enum FlowMode {
    /// Highest-scoring target cell; ties break toward the smallest
    /// row-major index.
    Argmax,
    /// Probability-weighted expectation of the target cell under the
    /// matching distribution at this temperature.
    SoftArgmax { temperature: f64 },
}

/// Per-cell displacement to the best-matching cell of the other view, in
/// cell units at feature resolution: `flow[i] = j*(i) - i`.
pub fn flow_from_cost(c: &CostVolume, mode: FlowMode) -> Result<FlowField> {
    let (h1, w1, h2, w2) = c.dims();
    let mut flow = Array3::zeros((h1, w1, 2));
    match mode {
        FlowMode::Argmax => {
            for y in 0..h1 {
                for x in 0..w1 {
                    let mut best = (0usize, 0usize);
                    let mut best_v = f64::NEG_INFINITY;
                    for y2 in 0..h2 {
                        for x2 in 0..w2 {
                            let v = c.at(y, x, y2, x2);
                            if v > best_v {
                                best_v = v;
                                best = (y2, x2);
                            }
                        }
                    }
                    flow[(y, x, 0)] = best.1 as f64 - x as f64;
                    flow[(y, x, 1)] = best.0 as f64 - y as f64;
                }
            }
        }
        FlowMode::SoftArgmax { temperature } => {
            let probs = matching_distribution(c, temperature)?;
            for y in 0..h1 {
                for x in 0..w1 {
                    let row = probs.row(y * w1 + x);
                    let mut ex = 0.0;
                    let mut ey = 0.0;
                    for (j, &p) in row.iter().enumerate() {
                        ex += p * (j % w2) as f64;
                        ey += p * (j / w2) as f64;
                    }
                    flow[(y, x, 0)] = ex - x as f64;
                    flow[(y, x, 1)] = ey - y as f64;
                }
            }
        }
    }
    FlowField::new(flow, FlowResolution::Feature)
}

/// Cyclic-consistency mask: pixel `i` is kept when the round trip
/// `f_fwd(i)` then `f_bwd` (sampled bilinearly at the landing point) returns
/// within `tau`. Landing points outside the backward grid are rejected.
pub fn cyclic_mask(f_fwd: &FlowField, f_bwd: &FlowField, tau: f64) -> Result<ConfidenceMask> {
    if f_fwd.resolution() != f_bwd.resolution() {
        return Err(Error::ResolutionMismatch(
            "forward and backward flows use different resolution tags".into(),
        ));
    }
    let (h, w) = (f_fwd.h(), f_fwd.w());
    let (bh, bw) = (f_bwd.h(), f_bwd.w());
    let mut mask = Array2::from_elem((h, w), false);
    let bx_field = f_bwd.data().index_axis(ndarray::Axis(2), 0).to_owned();
    let by_field = f_bwd.data().index_axis(ndarray::Axis(2), 1).to_owned();
    for y in 0..h {
        for x in 0..w {
            let (dx, dy) = f_fwd.at(y, x);
            let tx = x as f64 + dx;
            let ty = y as f64 + dy;
            if tx < 0.0 || tx > (bw - 1) as f64 || ty < 0.0 || ty > (bh - 1) as f64 {
                continue;
            }
            let (bx, _) = crate::imaging::bilinear_sample_scalar(&bx_field, tx, ty);
            let (by, _) = crate::imaging::bilinear_sample_scalar(&by_field, tx, ty);
            let residual = ((dx + bx).powi(2) + (dy + by).powi(2)).sqrt();
            mask[(y, x)] = residual < tau;
        }
    }
    Ok(ConfidenceMask { data: mask })
}

/// Resamples a flow field onto a larger grid, scaling displacements by the
/// per-axis resolution ratio; `out_res` declares the output's units.
pub fn upsample_flow(
    f: &FlowField,
    target_h: usize,
    target_w: usize,
    out_res: FlowResolution,
) -> Result<FlowField> {
    let (h, w) = (f.h(), f.w());
    if target_h < h || target_w < w {
        return Err(Error::BadDimensions(format!(
            "upsample target {target_h}x{target_w} smaller than source {h}x{w}"
        )));
    }
    let sx = target_w as f64 / w as f64;
    let sy = target_h as f64 / h as f64;
    let dx_field = f.data().index_axis(ndarray::Axis(2), 0).to_owned();
    let dy_field = f.data().index_axis(ndarray::Axis(2), 1).to_owned();
    let mut out = Array3::zeros((target_h, target_w, 2));
    for y in 0..target_h {
        for x in 0..target_w {
            let src_x = ((x as f64 + 0.5) / sx - 0.5).clamp(0.0, (w - 1) as f64);
            let src_y = ((y as f64 + 0.5) / sy - 0.5).clamp(0.0, (h - 1) as f64);
            let (dx, _) = crate::imaging::bilinear_sample_scalar(&dx_field, src_x, src_y);
            let (dy, _) = crate::imaging::bilinear_sample_scalar(&dy_field, src_x, src_y);
            out[(y, x, 0)] = dx * sx;
            out[(y, x, 1)] = dy * sy;
        }
    }
    FlowField::new(out, out_res)
}

const FLO_MAGIC: f32 = 202021.25;

/// Writes the field in the Middlebury `.flo` layout: magic, width, height,
/// then row-major interleaved `(u, v)` 32-bit floats.
pub fn write_flo(f: &FlowField, path: &Path) -> Result<()> {
    let mut file = std::fs::File::create(path)?;
    file.write_all(&FLO_MAGIC.to_le_bytes())?;
    file.write_all(&(f.w() as i32).to_le_bytes())?;
    file.write_all(&(f.h() as i32).to_le_bytes())?;
    let mut payload = Vec::with_capacity(f.h() * f.w() * 8);
    for y in 0..f.h() {
        for x in 0..f.w() {
            let (u, v) = f.at(y, x);
            payload.extend_from_slice(&(u as f32).to_le_bytes());
            payload.extend_from_slice(&(v as f32).to_le_bytes());
        }
    }
    file.write_all(&payload)?;
    Ok(())
}

/// Reads a `.flo` file; the resolution tag must be supplied by the caller
/// since the format does not store it.
pub fn read_flo(path: &Path, res: FlowResolution) -> Result<FlowField> {
    let bad = |reason: String| Error::MalformedFile {
        path: path.display().to_string(),
        reason,
    };
    let mut file = std::fs::File::open(path)?;
    let mut head = [0u8; 12];
    file.read_exact(&mut head).map_err(|e| bad(format!("header short: {e}")))?;
    let magic = f32::from_le_bytes(head[0..4].try_into().unwrap());
    if magic != FLO_MAGIC {
        return Err(bad(format!("bad magic {magic}")));
    }
    let w = i32::from_le_bytes(head[4..8].try_into().unwrap());
    let h = i32::from_le_bytes(head[8..12].try_into().unwrap());
    if w <= 0 || h <= 0 || w > 1 << 16 || h > 1 << 16 {
        return Err(bad(format!("implausible dimensions {w}x{h}")));
    }
    let (w, h) = (w as usize, h as usize);
    let mut payload = vec![0u8; w * h * 8];
    file.read_exact(&mut payload)
        .map_err(|e| bad(format!("payload short: {e}")))?;
    let mut data = Array3::zeros((h, w, 2));
    let mut off = 0;
    for y in 0..h {
        for x in 0..w {
            data[(y, x, 0)] = f32::from_le_bytes(payload[off..off + 4].try_into().unwrap()) as f64;
            data[(y, x, 1)] =
                f32::from_le_bytes(payload[off + 4..off + 8].try_into().unwrap()) as f64;
            off += 8;
        }
    }
    FlowField::new(data, res)
}
