//! Desk-scale quantitative checks: reconstruction PSNR, cross-view seam
//! consistency via the ground-plane homography, temporal flicker, box
//! centroid adherence, and attribute-edit luminance ratios. These stand in
//! for FID/FVD (psnr, flicker), mAP (centroid), and qualitative edit
//! figures (luminance ratio); no learned feature extractors involved.

use crate::error::{Error, Result};
use crate::geometry::UnifiedRig;
use crate::scenesim::{box_corners, BoxAnnotation, GROUND_Y};
use crate::tensor::Tensor;
use serde::{Deserialize, Serialize};

pub const PSNR_CAP: f64 = 99.0;
/// Color distance below which a pixel counts as belonging to an actor.
pub const CENTROID_TAU: f64 = 0.15;
/// Boundary columns sampled per image edge for the seam metric.
const SEAM_COLS: usize = 2;

#[derive(Clone, Debug, PartialEq)]
pub struct EvalReport {
    pub psnr_mean: f64,
    pub seam_err: f64,
    pub flicker: f64,
    pub box_centroid_err: f64,
    pub box_miss_rate: f64,
    pub attribute_luminance_delta: f64,
}

impl EvalReport {
    pub fn validate(&self) -> Result<()> {
        let vals = [
            self.psnr_mean,
            self.seam_err,
            self.flicker,
            self.box_centroid_err,
            self.box_miss_rate,
            self.attribute_luminance_delta,
        ];
        if vals.iter().any(|v| !v.is_finite() || *v < 0.0) {
            return Err(Error::Numeric(format!("report values must be finite and >= 0: {:?}", self)));
        }
        Ok(())
    }

    /// key: value lines, stable order, for CI diffing.
    pub fn serialize(&self) -> String {
        format!(
            "psnr_mean: {:.6}\nseam_err: {:.6}\nflicker: {:.6}\nbox_centroid_err: {:.6}\nbox_miss_rate: {:.6}\nattribute_luminance_delta: {:.6}\n",
            self.psnr_mean,
            self.seam_err,
            self.flicker,
            self.box_centroid_err,
            self.box_miss_rate,
            self.attribute_luminance_delta
        )
    }
}

fn check_video(v: &Tensor, what: &str) -> Result<(usize, usize, usize, usize)> {
    let sh = v.shape();
    if sh.len() != 5 || sh[4] != 3 {
        return Err(Error::Validation(format!("{} must be [T,V,H,W,3], got {:?}", what, sh)));
    }
    if v.data().iter().any(|&x| !(0.0..=1.0).contains(&x)) {
        return Err(Error::Validation(format!("{} has values outside [0,1]", what)));
    }
    Ok((sh[0], sh[1], sh[2], sh[3]))
}

/// 10 log10(1 / MSE) in dB over all elements, capped at 99.
pub fn psnr(a: &Tensor, b: &Tensor) -> Result<f64> {
    check_video(a, "psnr input a")?;
    check_video(b, "psnr input b")?;
    if a.shape() != b.shape() {
        return Err(Error::Dim(format!("psnr shapes {:?} vs {:?}", a.shape(), b.shape())));
    }
    let mse = a
        .data()
        .iter()
        .zip(b.data())
        .map(|(x, y)| (x - y) * (x - y))
        .sum::<f64>()
        / a.numel() as f64;
    if mse == 0.0 {
        return Ok(PSNR_CAP);
    }
    Ok((10.0 * (1.0 / mse).log10()).min(PSNR_CAP))
}

/// Ground-plane hit of the pixel-center ray of view v at frame t, in the
/// unified frame. None for sky pixels.
fn ground_hit(rig: &UnifiedRig, t: usize, v: usize, px: usize, py: usize) -> Option<[f64; 3]> {
    let e = rig.extrinsics(t, v);
    let d = e.rotation.mulv(rig.intrinsics(v).unproject(px as f64 + 0.5, py as f64 + 0.5));
    if d[1] <= 1e-9 {
        return None;
    }
    let lambda = (GROUND_Y - e.translation[1]) / d[1];
    if lambda <= 0.0 {
        return None;
    }
    Some([
        e.translation[0] + lambda * d[0],
        GROUND_Y,
        e.translation[2] + lambda * d[2],
    ])
}

fn pixel(video: &Tensor, t: usize, v: usize, py: usize, px: usize) -> [f64; 3] {
    let sh = video.shape();
    let base = (((t * sh[1] + v) * sh[2] + py) * sh[3] + px) * 3;
    let d = video.data();
    [d[base], d[base + 1], d[base + 2]]
}

/// Mean abs pixel difference across ground-plane correspondences between
/// adjacent views. Boundary columns of each view are unprojected onto the
/// ground and re-projected into the ring neighbor.
pub fn seam_consistency(video: &Tensor, rig: &UnifiedRig) -> Result<f64> {
    let (t_n, v_n, h, w) = check_video(video, "seam input")?;
    if v_n != rig.views() || t_n > rig.frames() {
        return Err(Error::Validation(format!(
            "video {}x{} vs rig {}x{}",
            t_n,
            v_n,
            rig.frames(),
            rig.views()
        )));
    }
    if v_n < 2 {
        return Err(Error::Validation("seam metric needs at least two views".into()));
    }
    let cols: Vec<usize> =
        (0..SEAM_COLS.min(w)).chain(w.saturating_sub(SEAM_COLS)..w).collect();
    let (mut acc, mut count) = (0.0, 0usize);
    for t in 0..t_n {
        for a in 0..v_n {
            let b = (a + 1) % v_n;
            for &px in &cols {
                for py in 0..h {
                    let Some(p) = ground_hit(rig, t, a, px, py) else { continue };
                    let Some((xb, yb)) = rig.project_point(t, b, p) else { continue };
                    let (xb, yb) = (xb.floor(), yb.floor());
                    if xb < 0.0 || yb < 0.0 || xb >= w as f64 || yb >= h as f64 {
                        continue;
                    }
                    let ca = pixel(video, t, a, py, px);
                    let cb = pixel(video, t, b, yb as usize, xb as usize);
                    acc += (0..3).map(|i| (ca[i] - cb[i]).abs()).sum::<f64>() / 3.0;
                    count += 1;
                }
            }
        }
    }
    if count == 0 {
        return Err(Error::Validation("no frustum overlap between adjacent views".into()));
    }
    Ok(acc / count as f64)
}

/// Mean abs difference between consecutive frames.
pub fn flicker(video: &Tensor) -> Result<f64> {
    let (t_n, v_n, h, w) = check_video(video, "flicker input")?;
    if t_n < 2 {
        return Err(Error::Validation("flicker needs at least two frames".into()));
    }
    let per = v_n * h * w * 3;
    let d = video.data();
    let mut acc = 0.0;
    for t in 0..t_n - 1 {
        for i in 0..per {
            acc += (d[(t + 1) * per + i] - d[t * per + i]).abs();
        }
    }
    Ok(acc / ((t_n - 1) * per) as f64)
}

/// Mean abs difference between each window's first frame and the frame
/// before it; companion to `flicker` for rollout boundaries.
pub fn boundary_flicker(video: &Tensor, window_starts: &[usize]) -> Result<f64> {
    let (t_n, v_n, h, w) = check_video(video, "boundary flicker input")?;
    let per = v_n * h * w * 3;
    let d = video.data();
    let (mut acc, mut count) = (0.0, 0usize);
    for &s in window_starts {
        if s == 0 || s >= t_n {
            continue;
        }
        for i in 0..per {
            acc += (d[s * per + i] - d[(s - 1) * per + i]).abs();
        }
        count += per;
    }
    if count == 0 {
        return Err(Error::Validation("no interior window boundaries".into()));
    }
    Ok(acc / count as f64)
}

/// Projected 2D bounding box of an annotated cuboid, or None when any
/// corner is behind the rasterizer's near plane (which culls the box).
fn screen_bounds(
    bx: &BoxAnnotation,
    rig: &UnifiedRig,
    t: usize,
    v: usize,
) -> Option<(f64, f64, f64, f64)> {
    let rot = crate::geometry::Mat3::yaw(bx.yaw);
    let cam_inv = rig.extrinsics(t, v).inverse();
    let (mut x0, mut y0) = (f64::INFINITY, f64::INFINITY);
    let (mut x1, mut y1) = (f64::NEG_INFINITY, f64::NEG_INFINITY);
    for c in box_corners(bx.extent) {
        let r = rot.mulv(c);
        let p = cam_inv.apply([
            bx.center[0] + r[0],
            bx.center[1] + r[1],
            bx.center[2] + r[2],
        ]);
        if p[2] <= 0.05 {
            return None;
        }
        let (x, y) = rig.intrinsics(v).project(p)?;
        x0 = x0.min(x);
        x1 = x1.max(x);
        y0 = y0.min(y);
        y1 = y1.max(y);
    }
    Some((x0, y0, x1, y1))
}

#[derive(Clone, Debug, PartialEq)]
pub struct CentroidReport {
    pub mean_px_err: f64,
    pub miss_rate: f64,
    pub detections: usize,
    pub misses: usize,
}

/// Color-blob centroids vs projected 3D box centers. A box counts in view
/// v when it survives the rasterizer's near-plane cull and its center
/// projects inside the image; it is a miss when no pixel lies within
/// CENTROID_TAU of the actor color.
pub fn box_centroid_adherence(
    video: &Tensor,
    boxes: &[BoxAnnotation],
    rig: &UnifiedRig,
) -> Result<CentroidReport> {
    let (t_n, v_n, h, w) = check_video(video, "centroid input")?;
    let (mut err, mut detections, mut misses) = (0.0, 0usize, 0usize);
    for bx in boxes {
        if bx.frame >= t_n {
            continue;
        }
        let t = bx.frame;
        for v in 0..v_n {
            // only fully visible silhouettes: a clipped blob's centroid
            // would not agree with the projected center
            let Some((x0, y0, x1, y1)) = screen_bounds(bx, rig, t, v) else { continue };
            if x0 < 0.0 || y0 < 0.0 || x1 > w as f64 || y1 > h as f64 {
                continue;
            }
            let Some((cx, cy)) = rig.project_point(t, v, bx.center) else { continue };
            let (mut sx, mut sy, mut n) = (0.0, 0.0, 0usize);
            for py in 0..h {
                for px in 0..w {
                    let c = pixel(video, t, v, py, px);
                    let d2 = (0..3).map(|i| (c[i] - bx.color[i]).powi(2)).sum::<f64>();
                    if d2.sqrt() < CENTROID_TAU {
                        sx += px as f64 + 0.5;
                        sy += py as f64 + 0.5;
                        n += 1;
                    }
                }
            }
            if n == 0 {
                misses += 1;
            } else {
                let (mx, my) = (sx / n as f64, sy / n as f64);
                err += ((mx - cx).powi(2) + (my - cy).powi(2)).sqrt();
                detections += 1;
            }
        }
    }
    let total = detections + misses;
    Ok(CentroidReport {
        mean_px_err: if detections > 0 { err / detections as f64 } else { 0.0 },
        miss_rate: if total > 0 { misses as f64 / total as f64 } else { 0.0 },
        detections,
        misses,
    })
}

/// Mean luminance over ground-hitting pixels of `edited` divided by the
/// same quantity of `original`. Pixels under any projected actor box are
/// excluded: attribute edits recolor the environment, not the actors.
pub fn attribute_edit_check(
    edited: &Tensor,
    original: &Tensor,
    boxes: &[BoxAnnotation],
    rig: &UnifiedRig,
) -> Result<f64> {
    let (t_n, v_n, h, w) = check_video(edited, "edit input")?;
    check_video(original, "edit original")?;
    if edited.shape() != original.shape() {
        return Err(Error::Dim(format!(
            "edit shapes {:?} vs {:?}",
            edited.shape(),
            original.shape()
        )));
    }
    let (mut le, mut lo, mut count) = (0.0, 0.0, 0usize);
    for t in 0..t_n {
        for v in 0..v_n {
            let masks: Vec<(f64, f64, f64, f64)> = boxes
                .iter()
                .filter(|b| b.frame == t)
                .filter_map(|b| screen_bounds(b, rig, t, v))
                .collect();
            for py in 0..h {
                for px in 0..w {
                    if ground_hit(rig, t, v, px, py).is_none() {
                        continue;
                    }
                    let (xc, yc) = (px as f64 + 0.5, py as f64 + 0.5);
                    if masks
                        .iter()
                        .any(|&(x0, y0, x1, y1)| {
                            xc >= x0 - 1.0 && xc <= x1 + 1.0 && yc >= y0 - 1.0 && yc <= y1 + 1.0
                        })
                    {
                        continue;
                    }
                    let a = pixel(edited, t, v, py, px);
                    let b = pixel(original, t, v, py, px);
                    le += (a[0] + a[1] + a[2]) / 3.0;
                    lo += (b[0] + b[1] + b[2]) / 3.0;
                    count += 1;
                }
            }
        }
    }
    if count == 0 {
        return Err(Error::Validation("no ground pixels for luminance ratio".into()));
    }
    if lo == 0.0 {
        return Err(Error::Numeric("original ground region is pure black".into()));
    }
    Ok(le / lo)
}

/// Acceptance bands a generated clip must stay inside, relative to the
/// ground-truth clip's own seam and flicker baselines.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct EvalBands {
    pub psnr_min: f64,
    pub seam_ratio_max: f64,
    pub flicker_ratio_max: f64,
    pub centroid_px_max: f64,
    pub miss_rate_max: f64,
}

impl Default for EvalBands {
    fn default() -> Self {
        EvalBands {
            psnr_min: 20.0,
            seam_ratio_max: 3.0,
            flicker_ratio_max: 2.0,
            centroid_px_max: 4.0,
            miss_rate_max: 0.2,
        }
    }
}

impl EvalBands {
    /// Error (acceptance) naming every band the report violates.
    pub fn check(&self, report: &EvalReport, gt_seam: f64, gt_flicker: f64) -> Result<()> {
        let mut bad = Vec::new();
        if report.psnr_mean < self.psnr_min {
            bad.push(format!("psnr {:.2} < {:.2}", report.psnr_mean, self.psnr_min));
        }
        if report.seam_err > self.seam_ratio_max * gt_seam {
            bad.push(format!(
                "seam {:.4} > {:.1}x baseline {:.4}",
                report.seam_err, self.seam_ratio_max, gt_seam
            ));
        }
        if report.flicker > self.flicker_ratio_max * gt_flicker {
            bad.push(format!(
                "flicker {:.4} > {:.1}x baseline {:.4}",
                report.flicker, self.flicker_ratio_max, gt_flicker
            ));
        }
        if report.box_centroid_err > self.centroid_px_max {
            bad.push(format!(
                "centroid {:.2} px > {:.2}",
                report.box_centroid_err, self.centroid_px_max
            ));
        }
        if report.box_miss_rate > self.miss_rate_max {
            bad.push(format!(
                "miss rate {:.2} > {:.2}",
                report.box_miss_rate, self.miss_rate_max
            ));
        }
        if bad.is_empty() {
            Ok(())
        } else {
            Err(Error::Acceptance(bad.join("; ")))
        }
    }
}

/// Full report of a generated clip against ground truth.
pub fn evaluate(
    gen: &Tensor,
    gt: &Tensor,
    boxes: &[BoxAnnotation],
    rig: &UnifiedRig,
) -> Result<EvalReport> {
    let centroid = box_centroid_adherence(gen, boxes, rig)?;
    let report = EvalReport {
        psnr_mean: psnr(gen, gt)?,
        seam_err: seam_consistency(gen, rig)?,
        flicker: flicker(gen)?,
        box_centroid_err: centroid.mean_px_err,
        box_miss_rate: centroid.miss_rate,
        attribute_luminance_delta: attribute_edit_check(gen, gt, boxes, rig)?,
    };
    report.validate()?;
    Ok(report)
}
