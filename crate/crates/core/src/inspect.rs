//! Gate visualization and occlusion statistics.
//!
//! Maps are reduced to their channel mean and written as CSV (one row per
//! feature row) and as 8-bit binary PGM images.

use std::fmt::Write as _;
use std::fs;
use std::path::{Path, PathBuf};

use crate::error::{Error, Result};
use crate::model::GateTrace;
use crate::tensor::Tensor;

/// Channel mean of a `[C, H, W]` map, as `H × W` row-major values.
pub fn channel_mean(map: &Tensor) -> Result<Vec<f64>> {
    let [c, h, w] = *map.shape() else {
        return Err(Error::shape("channel_mean", format!("expected [C, H, W], got {:?}", map.shape())));
    };
    let mut out = vec![0.0; h * w];
    for plane in map.data().chunks(h * w) {
        for (o, v) in out.iter_mut().zip(plane) {
            *o += v;
        }
    }
    out.iter_mut().for_each(|o| *o /= c as f64);
    Ok(out)
}

pub fn to_csv(values: &[f64], w: usize) -> String {
    let mut out = String::new();
    for row in values.chunks(w) {
        let line: Vec<String> = row.iter().map(|v| format!("{v:.16e}")).collect();
        let _ = writeln!(out, "{}", line.join(","));
    }
    out
}

/// Binary PGM of values in `[0, 1]`, scaled to `0..=255` and rounded.
/// Values outside the range are clamped.
pub fn to_pgm(values: &[f64], h: usize, w: usize) -> Vec<u8> {
    let mut out = format!("P5\n{w} {h}\n255\n").into_bytes();
    out.extend(values.iter().map(|v| (v.clamp(0.0, 1.0) * 255.0).round() as u8));
    out
}

/// Linear rescale of `values` to `[0, 1]`; a constant map becomes 0.
pub fn normalize(values: &[f64]) -> Vec<f64> {
    let lo = values.iter().copied().fold(f64::INFINITY, f64::min);
    let hi = values.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    let span = hi - lo;
    values.iter().map(|v| if span > 0.0 { (v - lo) / span } else { 0.0 }).collect()
}

/// Fraction of each cell of an `fh × fw` grid covered by a pixel mask of
/// size `h × w`. Pixel `(y, x)` falls in cell `(y·fh/h, x·fw/w)`.
pub fn mask_coverage(mask: &[bool], h: usize, w: usize, fh: usize, fw: usize) -> Vec<f64> {
    let mut hit = vec![0usize; fh * fw];
    let mut total = vec![0usize; fh * fw];
    for y in 0..h {
        for x in 0..w {
            let cell = (y * fh / h) * fw + x * fw / w;
            total[cell] += 1;
            hit[cell] += usize::from(mask[y * w + x]);
        }
    }
    hit.iter().zip(&total).map(|(&a, &b)| if b == 0 { 0.0 } else { a as f64 / b as f64 }).collect()
}

/// Mean gate inside and outside the occluded area of a sequence.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct OcclusionGates {
    pub inside: f64,
    pub outside: f64,
    pub inside_cells: usize,
    pub outside_cells: usize,
}

/// Gate means over steps `t ≥ 1` (the first step has no predecessor).
/// A feature cell counts as inside when at least half of it is occluded
/// and as outside when none of it is; partly covered cells are skipped.
/// Returns `None` when either side is empty.
pub fn occlusion_gates(trace: &GateTrace, masks: &[Vec<bool>], h: usize, w: usize) -> Result<Option<OcclusionGates>> {
    if masks.len() != trace.gates.len() {
        return Err(Error::shape("occlusion_gates", format!("{} masks for {} gates", masks.len(), trace.gates.len())));
    }
    let (mut si, mut so, mut ni, mut no) = (0.0, 0.0, 0, 0);
    for (gate, mask) in trace.gates.iter().zip(masks).skip(1) {
        let s = gate.0.shape();
        let (fh, fw) = (s[1], s[2]);
        let mean = channel_mean(&gate.0)?;
        for (v, cov) in mean.iter().zip(mask_coverage(mask, h, w, fh, fw)) {
            if cov >= 0.5 {
                si += v;
                ni += 1;
            } else if cov == 0.0 {
                so += v;
                no += 1;
            }
        }
    }
    if ni == 0 || no == 0 {
        return Ok(None);
    }
    Ok(Some(OcclusionGates {
        inside: si / ni as f64,
        outside: so / no as f64,
        inside_cells: ni,
        outside_cells: no,
    }))
}

/// Writes `gate_t`, `raw_t` and `refined_t` as CSV and PGM for every
/// frame `t` into `dir`. Gates are written on their natural `[0, 1]`
/// scale, feature maps min-max normalized per frame. Returns the written
/// paths.
pub fn write_trace(dir: &Path, trace: &GateTrace) -> Result<Vec<PathBuf>> {
    fs::create_dir_all(dir).map_err(|e| Error::file(dir, e))?;
    let mut written = Vec::new();
    let mut emit = |stem: String, values: &[f64], image: &[f64], h: usize, w: usize| -> Result<()> {
        let csv = dir.join(format!("{stem}.csv"));
        fs::write(&csv, to_csv(values, w)).map_err(|e| Error::file(&csv, e))?;
        let pgm = dir.join(format!("{stem}.pgm"));
        fs::write(&pgm, to_pgm(image, h, w)).map_err(|e| Error::file(&pgm, e))?;
        written.push(csv);
        written.push(pgm);
        Ok(())
    };
    for (t, ((gate, raw), refined)) in trace.gates.iter().zip(&trace.raw).zip(&trace.refined).enumerate() {
        let (h, w) = (gate.0.shape()[1], gate.0.shape()[2]);
        let g = channel_mean(&gate.0)?;
        emit(format!("gate_{t:03}"), &g, &g, h, w)?;
        let r = channel_mean(raw)?;
        emit(format!("raw_{t:03}"), &r, &normalize(&r), h, w)?;
        let s = channel_mean(refined)?;
        emit(format!("refined_{t:03}"), &s, &normalize(&s), h, w)?;
    }
    Ok(written)
}
