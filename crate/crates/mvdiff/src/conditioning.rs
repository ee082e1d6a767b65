//! Local and global conditioning: sparse box/lane images projected through
//! the shared rig geometry, a small strided-conv adapter producing per-block
//! injection features, a closed token vocabulary with embeddings, and the
//! independent per-family condition dropout used for classifier-free
//! guidance.

use crate::error::{Error, Result};
use crate::geometry::{Mat3, Pose, UnifiedRig};
use crate::rng::rng_stream;
use crate::scenesim::{box_corners, BoxAnnotation, BOX_FACES};
use crate::tape::{Tape, Var};
use crate::tensor::Tensor;
use rand::Rng;

pub use crate::scenesim::LANE_COLOR;

/// Near-plane camera depth below which geometry is culled, matching the
/// rasterizer so condition pixels stay inside rendered actor silhouettes.
pub const NEAR_Z: f64 = 0.05;

/// Tokens per (t, v) slot, padded with the null token.
pub const SEQ_LEN: usize = 8;

/// Null token id, reserved: embeds to the all-zero row.
pub const NULL_ID: usize = 0;

fn draw_line(img: &mut Tensor, w: usize, h: usize, a: (f64, f64), b: (f64, f64), color: [f64; 3]) {
    let steps = ((b.0 - a.0).abs().max((b.1 - a.1).abs()).ceil() as usize).max(1) * 2;
    for s in 0..=steps {
        let t = s as f64 / steps as f64;
        let x = a.0 + t * (b.0 - a.0);
        let y = a.1 + t * (b.1 - a.1);
        if x < 0.0 || y < 0.0 {
            continue;
        }
        let (px, py) = (x as usize, y as usize);
        if px >= w || py >= h {
            continue;
        }
        let base = (py * w + px) * 3;
        for c in 0..3 {
            img.data_mut()[base + c] = color[c];
        }
    }
}

/// Sparse box condition image for one (t, v): visible boxes drawn as filled
/// faces plus wireframe in their identity colors, nearer boxes painted last.
/// Uses the rasterizer's cull rule so condition pixels track rendered pixels.
pub fn project_boxes(
    boxes: &[BoxAnnotation],
    rig: &UnifiedRig,
    t: usize,
    v: usize,
    out_h: usize,
    out_w: usize,
) -> Tensor {
    let mut img = Tensor::zeros(&[out_h, out_w, 3]);
    let cam_inv = rig.extrinsics(t, v).inverse();
    let intr = rig.intrinsics(v);
    let sx = out_w as f64 / (2.0 * intr.cx);
    let sy = out_h as f64 / (2.0 * intr.cy);
    let mut visible: Vec<(&BoxAnnotation, Vec<[f64; 3]>, f64)> = Vec::new();
    for b in boxes.iter().filter(|b| b.frame == t) {
        let pose = Pose { rotation: Mat3::yaw(b.yaw), translation: b.center };
        let corners: Vec<[f64; 3]> = box_corners(b.extent)
            .iter()
            .map(|&c| cam_inv.apply(pose.apply(c)))
            .collect();
        if corners.iter().any(|c| c[2] <= NEAR_Z) {
            continue;
        }
        let depth = corners.iter().map(|c| c[2]).sum::<f64>() / 8.0;
        visible.push((b, corners, depth));
    }
    visible.sort_by(|a, b| b.2.partial_cmp(&a.2).unwrap());
    for (b, corners, _) in visible {
        let pts: Vec<(f64, f64)> = corners
            .iter()
            .map(|&c| {
                let (x, y) = intr.project(c).expect("culled above");
                (x * sx, y * sy)
            })
            .collect();
        let mut faces: Vec<(usize, f64)> = BOX_FACES
            .iter()
            .enumerate()
            .map(|(fi, f)| (fi, f.iter().map(|&i| corners[i][2]).sum::<f64>() / 4.0))
            .collect();
        faces.sort_by(|a, b| b.1.partial_cmp(&a.1).unwrap());
        for (fi, _) in faces {
            let quad: Vec<(f64, f64)> = BOX_FACES[fi].iter().map(|&i| pts[i]).collect();
            crate::scenesim::fill_convex_polygon(&mut img, out_w, out_h, &quad, b.color);
            for i in 0..4 {
                draw_line(&mut img, out_w, out_h, quad[i], quad[(i + 1) % 4], b.color);
            }
        }
    }
    img
}

/// Clip a camera-frame segment against the near plane; None if fully behind.
fn clip_near(a: [f64; 3], b: [f64; 3]) -> Option<([f64; 3], [f64; 3])> {
    let (za, zb) = (a[2], b[2]);
    if za <= NEAR_Z && zb <= NEAR_Z {
        return None;
    }
    let lerp = |p: [f64; 3], q: [f64; 3], t: f64| {
        [p[0] + t * (q[0] - p[0]), p[1] + t * (q[1] - p[1]), p[2] + t * (q[2] - p[2])]
    };
    let mut a2 = a;
    let mut b2 = b;
    if za <= NEAR_Z {
        a2 = lerp(a, b, (NEAR_Z - za) / (zb - za));
    } else if zb <= NEAR_Z {
        b2 = lerp(a, b, (NEAR_Z - zb) / (za - zb));
    }
    Some((a2, b2))
}

/// Lane polylines (unified frame) drawn one pixel wide in the fixed lane
/// color, segments clipped to the frustum near plane.
pub fn rasterize_hdmap(
    lanes: &[Vec<[f64; 3]>],
    rig: &UnifiedRig,
    t: usize,
    v: usize,
    out_h: usize,
    out_w: usize,
) -> Tensor {
    let mut img = Tensor::zeros(&[out_h, out_w, 3]);
    let cam_inv = rig.extrinsics(t, v).inverse();
    let intr = rig.intrinsics(v);
    let sx = out_w as f64 / (2.0 * intr.cx);
    let sy = out_h as f64 / (2.0 * intr.cy);
    for lane in lanes {
        for seg in lane.windows(2) {
            let a = cam_inv.apply(seg[0]);
            let b = cam_inv.apply(seg[1]);
            let Some((a, b)) = clip_near(a, b) else { continue };
            let (pa, pb) = match (intr.project(a), intr.project(b)) {
                (Some(x), Some(y)) => (x, y),
                _ => continue,
            };
            draw_line(
                &mut img,
                out_w,
                out_h,
                (pa.0 * sx, pa.1 * sy),
                (pb.0 * sx, pb.1 * sy),
                LANE_COLOR,
            );
        }
    }
    img
}

// ---- adapter ---------------------------------------------------------

/// Adapter hidden width.
pub const ADAPTER_WIDTH: usize = 16;
/// Injection levels, one per model block.
pub const ADAPTER_LEVELS: usize = 4;

/// Strided-conv condition adapter. The first layer is linear so level 0 is
/// homogeneous in the input; deeper levels interleave GELU and stride-2
/// convs. Each level is projected to the model width and resized onto the
/// patch grid.
#[derive(Clone, Debug)]
pub struct AdapterParams {
    /// 3x3 convs: first 6->A stride 1, then A->A stride 2.
    pub convs: Vec<(Tensor, Tensor)>,
    /// 1x1 projections A->C per level.
    pub projs: Vec<(Tensor, Tensor)>,
}

impl AdapterParams {
    pub fn init(model_width: usize, seed: u64) -> Self {
        let mut rng = rng_stream(seed, "adapter");
        let a = ADAPTER_WIDTH;
        let mut convs = Vec::new();
        for l in 0..ADAPTER_LEVELS {
            let cin = if l == 0 { 6 } else { a };
            let scale = (2.0 / (cin * 9) as f64).sqrt();
            let w = Tensor::from_fn(&[a, cin, 3, 3], |_| (rng.gen::<f64>() * 2.0 - 1.0) * scale);
            convs.push((w, Tensor::zeros(&[a])));
        }
        let mut projs = Vec::new();
        for _ in 0..ADAPTER_LEVELS {
            let scale = (1.0 / a as f64).sqrt();
            let w =
                Tensor::from_fn(&[model_width, a, 1, 1], |_| (rng.gen::<f64>() * 2.0 - 1.0) * scale);
            projs.push((w, Tensor::zeros(&[model_width])));
        }
        AdapterParams { convs, projs }
    }
}

#[derive(Clone)]
pub struct AdapterVars {
    pub convs: Vec<(Var, Var)>,
    pub projs: Vec<(Var, Var)>,
}

impl AdapterVars {
    pub fn new(tape: &mut Tape, params: &AdapterParams, trainable: bool) -> Self {
        AdapterVars {
            convs: params
                .convs
                .iter()
                .map(|(w, b)| (tape.leaf_if(w.clone(), trainable), tape.leaf_if(b.clone(), trainable)))
                .collect(),
            projs: params
                .projs
                .iter()
                .map(|(w, b)| (tape.leaf_if(w.clone(), trainable), tape.leaf_if(b.clone(), trainable)))
                .collect(),
        }
    }
}

/// cond: [B, 6, H', W'] (boxes and hdmap stacked on channels). Returns one
/// feature map per level, each [B, grid_h, grid_w, C].
pub fn adapter_forward(
    tape: &mut Tape,
    cond: Var,
    vars: &AdapterVars,
    grid_h: usize,
    grid_w: usize,
) -> Result<Vec<Var>> {
    let shape = tape.value(cond).shape().to_vec();
    if shape.len() != 4 || shape[1] != 6 {
        return Err(Error::Dim(format!("adapter input must be [B,6,H,W], got {:?}", shape)));
    }
    let mut levels = Vec::with_capacity(ADAPTER_LEVELS);
    let mut x = cond;
    for l in 0..ADAPTER_LEVELS {
        let (w, b) = vars.convs[l];
        if l > 0 {
            x = tape.gelu(x);
            x = tape.conv2d(x, w, Some(b), 2, 1)?;
        } else {
            x = tape.conv2d(x, w, Some(b), 1, 1)?;
        }
        let (pw, pb) = vars.projs[l];
        let proj = tape.conv2d(x, pw, Some(pb), 1, 0)?;
        let sized = tape.bilinear_resize(proj, grid_h, grid_w)?;
        // NCHW -> NHWC
        levels.push(tape.permute(sized, &[0, 2, 3, 1])?);
    }
    Ok(levels)
}

// ---- global tokens ---------------------------------------------------

/// Closed token vocabulary; id 0 is the reserved null token.
#[derive(Clone, Debug)]
pub struct Vocab {
    words: Vec<String>,
}

impl Vocab {
    pub fn standard() -> Self {
        let mut words = vec!["<null>".to_string(), "front".to_string()];
        for v in 1..8 {
            words.push(format!("view{}", v));
        }
        for w in ["day", "night", "sunny", "rainy", "snowy", "vehicles"] {
            words.push(w.to_string());
        }
        for n in 0..=16 {
            words.push(n.to_string());
        }
        Vocab { words }
    }

    pub fn len(&self) -> usize {
        self.words.len()
    }

    pub fn is_empty(&self) -> bool {
        false
    }

    pub fn encode(&self, word: &str) -> Result<usize> {
        self.words
            .iter()
            .position(|w| w == word)
            .ok_or_else(|| Error::Vocabulary(format!("unknown token '{}'", word)))
    }

    pub fn decode(&self, id: usize) -> Result<&str> {
        self.words
            .get(id)
            .map(String::as_str)
            .ok_or_else(|| Error::Vocabulary(format!("token id {} out of range", id)))
    }

    /// Encode a phrase into a fixed-length null-padded id sequence.
    pub fn encode_seq(&self, phrase: &[String]) -> Result<Vec<usize>> {
        if phrase.len() > SEQ_LEN {
            return Err(Error::Vocabulary(format!(
                "phrase length {} exceeds {}",
                phrase.len(),
                SEQ_LEN
            )));
        }
        let mut ids = vec![NULL_ID; SEQ_LEN];
        for (i, w) in phrase.iter().enumerate() {
            ids[i] = self.encode(w)?;
        }
        Ok(ids)
    }
}

#[derive(Clone, Debug)]
pub struct TokenParams {
    /// Embedding table, row 0 reserved as zeros.
    pub table: Tensor,
    /// Learned positional offsets, one per sequence slot.
    pub pos: Tensor,
}

impl TokenParams {
    pub fn init(vocab: &Vocab, width: usize, seed: u64) -> Self {
        let mut rng = rng_stream(seed, "tokens");
        let scale = (1.0 / width as f64).sqrt();
        let mut table = Tensor::from_fn(&[vocab.len(), width], |_| {
            (rng.gen::<f64>() * 2.0 - 1.0) * scale
        });
        for c in 0..width {
            table.data_mut()[c] = 0.0;
        }
        let pos =
            Tensor::from_fn(&[SEQ_LEN, width], |_| (rng.gen::<f64>() * 2.0 - 1.0) * scale * 0.1);
        TokenParams { table, pos }
    }
}

#[derive(Clone, Copy)]
pub struct TokenVars {
    pub table: Var,
    pub pos: Var,
}

impl TokenVars {
    pub fn new(tape: &mut Tape, params: &TokenParams, trainable: bool) -> Self {
        TokenVars {
            table: tape.leaf_if(params.table.clone(), trainable),
            pos: tape.leaf_if(params.pos.clone(), trainable),
        }
    }
}

/// ids (length SEQ_LEN) -> [SEQ_LEN, C]. Null positions embed to exact
/// zeros; others get table row plus the slot's positional offset.
pub fn embed_global(tape: &mut Tape, ids: &[usize], vars: TokenVars) -> Result<Var> {
    if ids.len() != SEQ_LEN {
        return Err(Error::Vocabulary(format!("expected {} ids, got {}", SEQ_LEN, ids.len())));
    }
    let rows = tape.gather_rows(vars.table, ids)?;
    let with_pos = tape.add(rows, vars.pos)?;
    let mask = Tensor::from_fn(&[SEQ_LEN, 1], |i| if ids[i] == NULL_ID { 0.0 } else { 1.0 });
    let mask = tape.constant(mask);
    tape.mul(with_pos, mask)
}

/// Batched embedding: `ids` holds `slots` null-padded sequences back to
/// back; returns [slots, SEQ_LEN, C] with null positions exactly zero.
pub fn embed_global_batch(
    tape: &mut Tape,
    ids: &[usize],
    slots: usize,
    vars: TokenVars,
) -> Result<Var> {
    if ids.len() != slots * SEQ_LEN {
        return Err(Error::Vocabulary(format!(
            "expected {} ids, got {}",
            slots * SEQ_LEN,
            ids.len()
        )));
    }
    let c = tape.value(vars.table).shape()[1];
    let rows = tape.gather_rows(vars.table, ids)?;
    let rows = tape.reshape(rows, &[slots, SEQ_LEN, c])?;
    let with_pos = tape.add(rows, vars.pos)?;
    let mask = Tensor::from_fn(&[slots, SEQ_LEN, 1], |i| {
        if ids[i] == NULL_ID {
            0.0
        } else {
            1.0
        }
    });
    let mask = tape.constant(mask);
    tape.mul(with_pos, mask)
}

// ---- condition dropout -----------------------------------------------

/// Which condition families survive for one sample. A cleared flag means
/// the family is replaced by its null condition (zero images, null tokens,
/// zero ray features).
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct CondKeep {
    pub boxes: bool,
    pub hdmap: bool,
    pub global: bool,
    pub rays: bool,
}

impl CondKeep {
    pub fn all() -> Self {
        CondKeep { boxes: true, hdmap: true, global: true, rays: true }
    }

    /// The unconditional CFG branch.
    pub fn none() -> Self {
        CondKeep { boxes: false, hdmap: false, global: false, rays: false }
    }
}

/// Independent Bernoulli dropout per family.
pub fn drop_conditions<R: Rng>(rng: &mut R, rate: f64) -> Result<CondKeep> {
    if !(0.0..1.0).contains(&rate) {
        return Err(Error::Validation(format!("drop rate {} outside [0,1)", rate)));
    }
    let mut keep = |_: ()| rng.gen::<f64>() >= rate;
    Ok(CondKeep { boxes: keep(()), hdmap: keep(()), global: keep(()), rays: keep(()) })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::scenesim::{export_annotations, generate_scene, render_frame, SceneSpec};

    fn world() -> crate::scenesim::SceneWorld {
        let spec =
            SceneSpec { actors: 3, horizon: 4, views: 6, width: 40, height: 24, ..Default::default() };
        generate_scene(31, &spec).unwrap()
    }

    #[test]
    fn no_boxes_gives_zero_image() {
        let w = world();
        let rig = w.rig();
        let img = project_boxes(&[], &rig, 0, 0, 24, 40);
        assert_eq!(img.max_abs(), 0.0);
    }

    #[test]
    fn box_on_axis_lands_at_principal_point() {
        let w = world();
        let rig = w.rig();
        let ann = BoxAnnotation {
            frame: 0,
            actor: 0,
            center: [0.0, 0.0, 10.0],
            extent: [1.0, 1.0, 1.0],
            yaw: 0.0,
            color: [1.0, 0.0, 1.0],
        };
        let img = project_boxes(&[ann], &rig, 0, 0, 24, 40);
        let (mut sx, mut sy, mut n) = (0.0, 0.0, 0.0);
        for py in 0..24 {
            for px in 0..40 {
                if img.data()[(py * 40 + px) * 3] > 0.5 {
                    sx += px as f64 + 0.5;
                    sy += py as f64 + 0.5;
                    n += 1.0;
                }
            }
        }
        assert!(n > 0.0);
        assert!((sx / n - 20.0).abs() < 2.0, "cx {}", sx / n);
        assert!((sy / n - 12.0).abs() < 2.0, "cy {}", sy / n);
    }

    #[test]
    fn nearer_box_wins_overlap() {
        let w = world();
        let rig = w.rig();
        let mk = |z: f64, color: [f64; 3]| BoxAnnotation {
            frame: 0,
            actor: 0,
            center: [0.0, 0.0, z],
            extent: [1.0, 1.0, 1.0],
            yaw: 0.0,
            color,
        };
        let img = project_boxes(&[mk(20.0, [1.0, 0.0, 0.0]), mk(8.0, [0.0, 1.0, 0.0])], &rig, 0, 0, 24, 40);
        // center pixel covered by both; near (green) must win
        let base = (12 * 40 + 20) * 3;
        assert_eq!(img.data()[base], 0.0);
        assert_eq!(img.data()[base + 1], 1.0);
    }

    #[test]
    fn condition_pixels_inside_dilated_render() {
        let w = world();
        let rig = w.rig();
        let ann = export_annotations(&w, &rig);
        for t in 0..w.horizon {
            for v in 0..w.views() {
                let cond = project_boxes(&ann.boxes, &rig, t, v, w.height, w.width);
                let rendered = render_frame(&w, &rig, t, v).unwrap();
                // actor pixels: match any actor identity color exactly
                let mut actor_mask = vec![false; w.height * w.width];
                for (i, m) in actor_mask.iter_mut().enumerate() {
                    let c = &rendered.data()[i * 3..i * 3 + 3];
                    *m = w
                        .actors
                        .iter()
                        .any(|a| a.color.iter().zip(c).all(|(x, y)| (x - y).abs() < 1e-9));
                }
                for py in 0..w.height {
                    for px in 0..w.width {
                        if cond.data()[(py * w.width + px) * 3..][..3].iter().all(|&x| x == 0.0) {
                            continue;
                        }
                        let mut ok = false;
                        for dy in -3i64..=3 {
                            for dx in -3i64..=3 {
                                let (qy, qx) = (py as i64 + dy, px as i64 + dx);
                                if qy >= 0
                                    && qx >= 0
                                    && (qy as usize) < w.height
                                    && (qx as usize) < w.width
                                    && actor_mask[qy as usize * w.width + qx as usize]
                                {
                                    ok = true;
                                }
                            }
                        }
                        assert!(ok, "stray condition pixel at t={} v={} ({},{})", t, v, px, py);
                    }
                }
            }
        }
    }

    #[test]
    fn empty_or_behind_lanes_zero() {
        let w = world();
        let rig = w.rig();
        assert_eq!(rasterize_hdmap(&[], &rig, 0, 0, 24, 40).max_abs(), 0.0);
        let behind = vec![vec![[0.0, 1.5, -30.0], [0.0, 1.5, -10.0]]];
        assert_eq!(rasterize_hdmap(&behind, &rig, 0, 0, 24, 40).max_abs(), 0.0);
    }

    #[test]
    fn central_lane_draws_central_stripe() {
        let w = world();
        let rig = w.rig();
        // a lane through the camera's vertical plane x=0
        let lane = vec![vec![[0.0, 1.5, 2.0], [0.0, 1.5, 40.0]]];
        let img = rasterize_hdmap(&lane, &rig, 0, 0, 24, 40);
        assert!(img.max_abs() > 0.0);
        for py in 0..24 {
            for px in 0..40 {
                if img.data()[(py * 40 + px) * 3] > 0.0 {
                    assert!((px as f64 - 19.5).abs() <= 1.5, "stripe at column {}", px);
                }
            }
        }
    }

    #[test]
    fn adapter_zero_input_zero_output() {
        let params = AdapterParams::init(8, 5);
        let mut tape = Tape::new();
        let vars = AdapterVars::new(&mut tape, &params, true);
        let x = tape.constant(Tensor::zeros(&[2, 6, 16, 16]));
        let levels = adapter_forward(&mut tape, x, &vars, 2, 2).unwrap();
        assert_eq!(levels.len(), ADAPTER_LEVELS);
        for l in levels {
            assert_eq!(tape.value(l).shape(), &[2, 2, 2, 8]);
            assert_eq!(tape.value(l).max_abs(), 0.0);
        }
    }

    #[test]
    fn adapter_level0_homogeneous() {
        let params = AdapterParams::init(8, 6);
        let mut tape = Tape::new();
        let vars = AdapterVars::new(&mut tape, &params, true);
        let base = Tensor::from_fn(&[1, 6, 8, 8], |i| (i % 13) as f64 * 0.07);
        let x1 = tape.constant(base.clone());
        let x2 = tape.constant(base.map(|v| v * 2.0));
        let l1 = adapter_forward(&mut tape, x1, &vars, 2, 2).unwrap();
        let l2 = adapter_forward(&mut tape, x2, &vars, 2, 2).unwrap();
        let a = tape.value(l1[0]).clone();
        let b = tape.value(l2[0]).clone();
        let doubled = a.map(|v| v * 2.0);
        assert!(b.max_abs_diff(&doubled) < 1e-12);
    }

    #[test]
    fn vocab_roundtrip_and_errors() {
        let v = Vocab::standard();
        for id in 0..v.len() {
            assert_eq!(v.encode(v.decode(id).unwrap()).unwrap(), id);
        }
        assert!(v.encode("pelican").is_err());
        assert!(v.decode(10_000).is_err());
        assert_eq!(v.encode("<null>").unwrap(), NULL_ID);
    }

    #[test]
    fn null_sequence_embeds_to_zero() {
        let v = Vocab::standard();
        let params = TokenParams::init(&v, 8, 3);
        let mut tape = Tape::new();
        let vars = TokenVars::new(&mut tape, &params, true);
        let e = embed_global(&mut tape, &[NULL_ID; SEQ_LEN], vars).unwrap();
        assert_eq!(tape.value(e).max_abs(), 0.0);
        // same ids in any slot context give the same matrix
        let ids = v.encode_seq(&["front".into(), "day".into()]).unwrap();
        let a = embed_global(&mut tape, &ids, vars).unwrap();
        let b = embed_global(&mut tape, &ids, vars).unwrap();
        assert_eq!(tape.value(a), tape.value(b));
    }

    #[test]
    fn dropout_counting() {
        let mut rng = rng_stream(7, "droptest");
        assert_eq!(drop_conditions(&mut rng, 0.0).unwrap(), CondKeep::all());
        let n = 100_000;
        let mut dropped = [0usize; 4];
        let mut all_null = 0usize;
        for _ in 0..n {
            let k = drop_conditions(&mut rng, 0.2).unwrap();
            for (i, f) in [k.boxes, k.hdmap, k.global, k.rays].iter().enumerate() {
                if !f {
                    dropped[i] += 1;
                }
            }
            if k == CondKeep::none() {
                all_null += 1;
            }
        }
        for d in dropped {
            let f = d as f64 / n as f64;
            assert!((f - 0.2).abs() < 0.01, "family drop rate {}", f);
        }
        let joint = all_null as f64 / n as f64;
        assert!((joint - 0.2f64.powi(4)).abs() < 0.002, "joint {}", joint);
        assert!(drop_conditions(&mut rng, 1.0).is_err());
    }
}
