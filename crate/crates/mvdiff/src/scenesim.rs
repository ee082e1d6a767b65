//! Deterministic synthetic driving world: straight lanes on a ground
//! plane, moving box actors, a surround camera rig on the ego, and a small
//! closed attribute vocabulary (time of day x weather) driving the palette.
//! Everything is a pure function of the scene seed.

use crate::error::{Error, Result};
use crate::geometry::{
    v_add, v_norm, v_scale, v_sub, CameraIntrinsics, Mat3, Pose, UnifiedRig, Vec3,
};
use crate::rng::rng_stream;
use crate::tensor::Tensor;
use rand::Rng;

/// Camera height above the ground plane, meters (+y is down).
pub const GROUND_Y: f64 = 1.5;

pub const DAY_TOKENS: [&str; 2] = ["day", "night"];
pub const WEATHER_TOKENS: [&str; 3] = ["sunny", "rainy", "snowy"];

/// Luminance factor applied to environment pixels at night.
pub const NIGHT_LUMINANCE: f64 = 0.35;

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum TimeOfDay {
    Day,
    Night,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Weather {
    Sunny,
    Rainy,
    Snowy,
}

impl TimeOfDay {
    pub fn token(&self) -> &'static str {
        match self {
            TimeOfDay::Day => "day",
            TimeOfDay::Night => "night",
        }
    }

    pub fn parse(s: &str) -> Result<Self> {
        match s {
            "day" => Ok(TimeOfDay::Day),
            "night" => Ok(TimeOfDay::Night),
            _ => Err(Error::Vocabulary(format!("unknown time of day '{}'", s))),
        }
    }
}

impl Weather {
    pub fn token(&self) -> &'static str {
        match self {
            Weather::Sunny => "sunny",
            Weather::Rainy => "rainy",
            Weather::Snowy => "snowy",
        }
    }

    pub fn parse(s: &str) -> Result<Self> {
        match s {
            "sunny" => Ok(Weather::Sunny),
            "rainy" => Ok(Weather::Rainy),
            "snowy" => Ok(Weather::Snowy),
            _ => Err(Error::Vocabulary(format!("unknown weather '{}'", s))),
        }
    }
}

#[derive(Clone, Debug)]
pub struct ActorTrack {
    /// Box extent (width, height, length), meters.
    pub extent: Vec3,
    /// Box-center pose per frame, world coordinates.
    pub poses: Vec<Pose>,
    /// Identity color, shared by the rasterizer and the condition images.
    pub color: [f64; 3],
}

#[derive(Clone, Debug)]
pub struct SceneWorld {
    pub lanes: Vec<Vec<Vec3>>,
    pub actors: Vec<ActorTrack>,
    pub ego: Vec<Pose>,
    pub mounts: Vec<Pose>,
    pub intrinsics: Vec<CameraIntrinsics>,
    pub front_view: usize,
    /// Per-frame (time of day, weather).
    pub attributes: Vec<(TimeOfDay, Weather)>,
    pub horizon: usize,
    pub width: usize,
    pub height: usize,
    pub seed: u64,
}

#[derive(Clone, Copy, Debug)]
pub struct SceneSpec {
    pub actors: usize,
    pub horizon: usize,
    pub views: usize,
    pub width: usize,
    pub height: usize,
    /// Flip day/night halfway through the clip.
    pub attr_switch: bool,
}

impl Default for SceneSpec {
    fn default() -> Self {
        SceneSpec { actors: 4, horizon: 8, views: 6, width: 80, height: 48, attr_switch: false }
    }
}

const LANE_OFFSETS: [f64; 4] = [-6.0, -2.0, 2.0, 6.0];
const LANE_Z_MIN: f64 = -40.0;
const LANE_Z_MAX: f64 = 80.0;
/// At most this many actors per lane before generation refuses.
const LANE_CAPACITY: usize = 4;

pub const SKY_COLOR: [f64; 3] = [0.60, 0.72, 0.90];
pub const GROUND_COLOR: [f64; 3] = [0.45, 0.42, 0.38];
pub const LANE_COLOR: [f64; 3] = [0.85, 0.75, 0.25];
const LANE_HALF_WIDTH: f64 = 0.15;

/// Distinct saturated identity colors: hash-to-hue with collision rehash,
/// also kept away from the environment palette.
pub fn identity_colors(n: usize, seed: u64) -> Vec<[f64; 3]> {
    let mut out: Vec<[f64; 3]> = Vec::with_capacity(n);
    let far = |c: [f64; 3], o: [f64; 3]| {
        let d: f64 = c.iter().zip(&o).map(|(a, b)| (a - b) * (a - b)).sum::<f64>().sqrt();
        d > 0.3
    };
    for id in 0..n {
        let mut attempt = 0u64;
        loop {
            let h = seed
                .wrapping_mul(0x9e3779b97f4a7c15)
                .wrapping_add(id as u64)
                .wrapping_add(attempt.wrapping_mul(0x85ebca6b));
            let hue = (h % 3600) as f64 / 10.0;
            let s = 0.6 + ((h >> 16) % 256) as f64 / 255.0 * 0.4;
            let v = 0.45 + ((h >> 32) % 256) as f64 / 255.0 * 0.55;
            let c = hsv(hue, s, v);
            let clear = out.iter().all(|&o| far(c, o))
                && far(c, SKY_COLOR)
                && far(c, GROUND_COLOR)
                && far(c, LANE_COLOR)
                && far(c, [0.95, 0.95, 0.97]);
            if clear {
                out.push(c);
                break;
            }
            attempt += 1;
            assert!(attempt < 10_000, "identity color space exhausted");
        }
    }
    out
}

fn hsv(h: f64, s: f64, v: f64) -> [f64; 3] {
    let c = v * s;
    let hp = h / 60.0;
    let x = c * (1.0 - (hp % 2.0 - 1.0).abs());
    let (r, g, b) = match hp as usize {
        0 => (c, x, 0.0),
        1 => (x, c, 0.0),
        2 => (0.0, c, x),
        3 => (0.0, x, c),
        4 => (x, 0.0, c),
        _ => (c, 0.0, x),
    };
    let m = v - c;
    [r + m, g + m, b + m]
}

pub fn generate_scene(seed: u64, spec: &SceneSpec) -> Result<SceneWorld> {
    if spec.horizon < 1 {
        return Err(Error::Generation("horizon must be at least 1 frame".into()));
    }
    if spec.actors > LANE_OFFSETS.len() * LANE_CAPACITY {
        return Err(Error::Generation(format!(
            "{} actors exceed lane capacity {}",
            spec.actors,
            LANE_OFFSETS.len() * LANE_CAPACITY
        )));
    }
    let mut rng = rng_stream(seed, "scene");
    let lanes: Vec<Vec<Vec3>> = LANE_OFFSETS
        .iter()
        .map(|&x| {
            let mut pts = Vec::new();
            let mut z = LANE_Z_MIN;
            while z <= LANE_Z_MAX {
                pts.push([x, GROUND_Y, z]);
                z += 4.0;
            }
            pts
        })
        .collect();

    // ego follows a lane, constant speed, sometimes a gentle turn
    let ego_lane = LANE_OFFSETS[rng.gen_range(0..LANE_OFFSETS.len())];
    let speed = 0.8 + rng.gen::<f64>() * 1.0;
    let turn_rate = if rng.gen::<f64>() < 0.3 {
        (rng.gen::<f64>() - 0.5) * 0.07
    } else {
        0.0
    };
    let mut ego = Vec::with_capacity(spec.horizon);
    let mut pos = [ego_lane, 0.0, 0.0];
    let mut heading = 0.0f64;
    for t in 0..spec.horizon {
        if t > 0 {
            heading += turn_rate;
            pos = v_add(pos, Mat3::yaw(heading).mulv([0.0, 0.0, speed]));
        }
        ego.push(Pose { rotation: Mat3::yaw(heading), translation: pos });
    }

    let colors = identity_colors(spec.actors, seed);
    let mut lane_load = vec![0usize; LANE_OFFSETS.len()];
    let mut actors = Vec::with_capacity(spec.actors);
    for id in 0..spec.actors {
        let mut lane_idx = rng.gen_range(0..LANE_OFFSETS.len());
        while lane_load[lane_idx] >= LANE_CAPACITY {
            lane_idx = (lane_idx + 1) % LANE_OFFSETS.len();
        }
        lane_load[lane_idx] += 1;
        let x = LANE_OFFSETS[lane_idx];
        let z0 = 4.0 + rng.gen::<f64>() * 28.0;
        let v = -1.2 + rng.gen::<f64>() * 3.2;
        let extent = [
            1.6 + rng.gen::<f64>() * 0.4,
            1.3 + rng.gen::<f64>() * 0.4,
            3.8 + rng.gen::<f64>() * 0.8,
        ];
        let yaw = if v >= 0.0 { 0.0 } else { std::f64::consts::PI };
        let poses = (0..spec.horizon)
            .map(|t| Pose {
                rotation: Mat3::yaw(yaw),
                translation: [x, GROUND_Y - extent[1] / 2.0, z0 + v * t as f64],
            })
            .collect();
        actors.push(ActorTrack { extent, poses, color: colors[id] });
    }

    let tod = if rng.gen::<f64>() < 0.5 { TimeOfDay::Day } else { TimeOfDay::Night };
    let weather = match rng.gen_range(0..3) {
        0 => Weather::Sunny,
        1 => Weather::Rainy,
        _ => Weather::Snowy,
    };
    let attributes = (0..spec.horizon)
        .map(|t| {
            let flip = spec.attr_switch && t >= spec.horizon / 2;
            let tt = match (tod, flip) {
                (TimeOfDay::Day, true) => TimeOfDay::Night,
                (TimeOfDay::Night, true) => TimeOfDay::Day,
                (x, false) => x,
            };
            (tt, weather)
        })
        .collect();

    let fx = spec.width as f64 * 0.6;
    let intrinsics = vec![
        CameraIntrinsics {
            fx,
            fy: fx,
            cx: spec.width as f64 / 2.0,
            cy: spec.height as f64 / 2.0,
        };
        spec.views
    ];
    let mounts: Vec<Pose> = (0..spec.views)
        .map(|v| Pose {
            rotation: Mat3::yaw(v as f64 * std::f64::consts::TAU / spec.views as f64),
            translation: [0.0; 3],
        })
        .collect();

    Ok(SceneWorld {
        lanes,
        actors,
        ego,
        mounts,
        intrinsics,
        front_view: 0,
        attributes,
        horizon: spec.horizon,
        width: spec.width,
        height: spec.height,
        seed,
    })
}

impl SceneWorld {
    pub fn rig(&self) -> UnifiedRig {
        UnifiedRig::build(&self.intrinsics, &self.ego, &self.mounts, self.front_view)
            .expect("scene rigs are valid by construction")
    }

    /// Transform from world coordinates into the unified frame.
    pub fn world_to_unified(&self) -> Pose {
        self.ego[0].compose(&self.mounts[self.front_view]).inverse()
    }

    pub fn views(&self) -> usize {
        self.mounts.len()
    }

    /// The sub-scene covering frames [start, start + len); the unified
    /// frame re-anchors at the slice's first front camera.
    pub fn slice(&self, start: usize, len: usize) -> Result<SceneWorld> {
        if len == 0 || start + len > self.horizon {
            return Err(Error::Validation(format!(
                "slice [{}, {}) outside horizon {}",
                start,
                start + len,
                self.horizon
            )));
        }
        let mut w = self.clone();
        w.ego = self.ego[start..start + len].to_vec();
        w.attributes = self.attributes[start..start + len].to_vec();
        for (a, src) in w.actors.iter_mut().zip(&self.actors) {
            a.poses = src.poses[start..start + len].to_vec();
        }
        w.horizon = len;
        Ok(w)
    }
}

/// Environment palette for one frame's attributes: (sky, ground, lane).
pub fn environment_palette(tod: TimeOfDay, weather: Weather) -> ([f64; 3], [f64; 3], [f64; 3]) {
    let mut ground = GROUND_COLOR;
    let mut lane = LANE_COLOR;
    match weather {
        Weather::Sunny => {}
        Weather::Rainy => {
            for (g, f) in ground.iter_mut().zip([0.70, 0.70, 0.85]) {
                *g *= f;
            }
        }
        Weather::Snowy => {
            for (g, w) in ground.iter_mut().zip([0.95, 0.95, 0.97]) {
                *g = *g + 0.7 * (w - *g);
            }
        }
    }
    let mut sky = SKY_COLOR;
    if tod == TimeOfDay::Night {
        for c in sky.iter_mut().chain(ground.iter_mut()).chain(lane.iter_mut()) {
            *c *= NIGHT_LUMINANCE;
        }
    }
    (sky, ground, lane)
}

/// Distance in the ground (x, z) plane from point p to a polyline.
fn polyline_distance_xz(p: Vec3, line: &[Vec3]) -> f64 {
    let mut best = f64::INFINITY;
    for seg in line.windows(2) {
        let (a, b) = (seg[0], seg[1]);
        let ab = [b[0] - a[0], b[2] - a[2]];
        let ap = [p[0] - a[0], p[2] - a[2]];
        let len2 = ab[0] * ab[0] + ab[1] * ab[1];
        let t = if len2 > 0.0 {
            ((ap[0] * ab[0] + ap[1] * ab[1]) / len2).clamp(0.0, 1.0)
        } else {
            0.0
        };
        let dx = ap[0] - t * ab[0];
        let dz = ap[1] - t * ab[1];
        best = best.min((dx * dx + dz * dz).sqrt());
    }
    best
}

/// Local corners of a unit-pose box with the given extent.
pub fn box_corners(extent: Vec3) -> [Vec3; 8] {
    let (hx, hy, hz) = (extent[0] / 2.0, extent[1] / 2.0, extent[2] / 2.0);
    [
        [-hx, -hy, -hz],
        [hx, -hy, -hz],
        [hx, hy, -hz],
        [-hx, hy, -hz],
        [-hx, -hy, hz],
        [hx, -hy, hz],
        [hx, hy, hz],
        [-hx, hy, hz],
    ]
}

/// Quad faces of `box_corners`, outward order irrelevant for flat fill.
pub const BOX_FACES: [[usize; 4]; 6] = [
    [0, 1, 2, 3],
    [4, 5, 6, 7],
    [0, 1, 5, 4],
    [2, 3, 7, 6],
    [0, 3, 7, 4],
    [1, 2, 6, 5],
];

/// Scanline-fill a convex polygon given in pixel coordinates.
pub fn fill_convex_polygon(
    img: &mut Tensor,
    width: usize,
    height: usize,
    pts: &[(f64, f64)],
    color: [f64; 3],
) {
    let ymin = pts.iter().map(|p| p.1).fold(f64::INFINITY, f64::min).floor().max(0.0) as usize;
    let ymax = pts
        .iter()
        .map(|p| p.1)
        .fold(f64::NEG_INFINITY, f64::max)
        .ceil()
        .min(height as f64) as usize;
    for py in ymin..ymax {
        let yc = py as f64 + 0.5;
        let mut xs: Vec<f64> = Vec::new();
        for i in 0..pts.len() {
            let (x0, y0) = pts[i];
            let (x1, y1) = pts[(i + 1) % pts.len()];
            if (y0 <= yc && y1 > yc) || (y1 <= yc && y0 > yc) {
                xs.push(x0 + (yc - y0) / (y1 - y0) * (x1 - x0));
            }
        }
        if xs.len() < 2 {
            continue;
        }
        xs.sort_by(|a, b| a.partial_cmp(b).unwrap());
        let x0 = xs[0].round().max(0.0) as usize;
        let x1 = (xs[xs.len() - 1].round()).min(width as f64) as usize;
        for px in x0..x1 {
            let base = (py * width + px) * 3;
            for a in 0..3 {
                img.data_mut()[base + a] = color[a];
            }
        }
    }
}

/// Painter's-order rasterization of ground, lane stripes, and actor boxes
/// for one (frame, view). Environment pixels carry the attribute palette;
/// actors keep their identity colors.
pub fn render_frame(world: &SceneWorld, rig: &UnifiedRig, t: usize, v: usize) -> Result<Tensor> {
    if t >= world.horizon {
        return Err(Error::Validation(format!("frame {} beyond horizon {}", t, world.horizon)));
    }
    let (h, w) = (world.height, world.width);
    let intr = rig.intrinsics(v);
    let cam = rig.extrinsics(t, v);
    let to_unified = world.world_to_unified();
    let (sky, ground, lane) = environment_palette(world.attributes[t].0, world.attributes[t].1);

    let mut img = Tensor::zeros(&[h, w, 3]);
    // unified-frame ground plane: the anchor camera sits GROUND_Y above it
    // and the rig has no roll/pitch, so the plane is y = GROUND_Y exactly
    let unified_to_world = to_unified.inverse();
    for py in 0..h {
        for px in 0..w {
            let d = cam.rotation.mulv(intr.unproject(px as f64 + 0.5, py as f64 + 0.5));
            let o = cam.translation;
            let mut c = sky;
            if d[1] > 1e-9 {
                let lambda = (GROUND_Y - o[1]) / d[1];
                if lambda > 0.0 {
                    let p_unified = v_add(o, v_scale(d, lambda));
                    let p_world = unified_to_world.apply(p_unified);
                    c = ground;
                    for l in &world.lanes {
                        if polyline_distance_xz(p_world, l) < LANE_HALF_WIDTH {
                            c = lane;
                            break;
                        }
                    }
                }
            }
            let base = (py * w + px) * 3;
            for a in 0..3 {
                img.data_mut()[base + a] = c[a];
            }
        }
    }

    // actors, far to near
    let cam_inv = cam.inverse();
    let mut order: Vec<(usize, f64)> = world
        .actors
        .iter()
        .enumerate()
        .map(|(i, a)| {
            let center = to_unified.apply(a.poses[t].translation);
            (i, v_norm(v_sub(center, cam.translation)))
        })
        .collect();
    order.sort_by(|a, b| b.1.partial_cmp(&a.1).unwrap());
    for (ai, _) in order {
        let actor = &world.actors[ai];
        let pose = &actor.poses[t];
        let corners_cam: Vec<Vec3> = box_corners(actor.extent)
            .iter()
            .map(|&c| cam_inv.apply(to_unified.apply(pose.apply(c))))
            .collect();
        // frustum cull: skip boxes not fully in front of the camera
        if corners_cam.iter().any(|c| c[2] <= 0.05) {
            continue;
        }
        let projected: Vec<(f64, f64)> = corners_cam
            .iter()
            .map(|&c| intr.project(c).expect("z > 0 checked"))
            .collect();
        if projected
            .iter()
            .all(|&(x, y)| x < 0.0 || x >= w as f64 || y < 0.0 || y >= h as f64)
        {
            // still possible that edges cross the image; cheap reject only
            // when the bounding box misses entirely
            let (mut x0, mut x1, mut y0, mut y1) =
                (f64::INFINITY, f64::NEG_INFINITY, f64::INFINITY, f64::NEG_INFINITY);
            for &(x, y) in &projected {
                x0 = x0.min(x);
                x1 = x1.max(x);
                y0 = y0.min(y);
                y1 = y1.max(y);
            }
            if x1 < 0.0 || x0 >= w as f64 || y1 < 0.0 || y0 >= h as f64 {
                continue;
            }
        }
        // faces far to near
        let mut faces: Vec<(usize, f64)> = BOX_FACES
            .iter()
            .enumerate()
            .map(|(fi, f)| (fi, f.iter().map(|&i| corners_cam[i][2]).sum::<f64>() / 4.0))
            .collect();
        faces.sort_by(|a, b| b.1.partial_cmp(&a.1).unwrap());
        for (fi, _) in faces {
            let pts: Vec<(f64, f64)> =
                BOX_FACES[fi].iter().map(|&i| projected[i]).collect();
            fill_convex_polygon(&mut img, w, h, &pts, actor.color);
        }
    }
    Ok(img)
}

/// Render the whole clip, [T, V, H, W, 3].
pub fn render_clip(world: &SceneWorld, rig: &UnifiedRig) -> Result<Tensor> {
    let (t_n, v_n) = (world.horizon, world.views());
    let (h, w) = (world.height, world.width);
    let mut data = Vec::with_capacity(t_n * v_n * h * w * 3);
    for t in 0..t_n {
        for v in 0..v_n {
            data.extend_from_slice(render_frame(world, rig, t, v)?.data());
        }
    }
    Tensor::new(vec![t_n, v_n, h, w, 3], data)
}

#[derive(Clone, Debug)]
pub struct BoxAnnotation {
    pub frame: usize,
    pub actor: usize,
    /// Center in the unified frame.
    pub center: Vec3,
    pub extent: Vec3,
    /// Yaw about the unified vertical axis.
    pub yaw: f64,
    pub color: [f64; 3],
}

#[derive(Clone, Debug)]
pub struct Annotations {
    pub boxes: Vec<BoxAnnotation>,
    /// Lane polylines in the unified frame.
    pub lanes: Vec<Vec<Vec3>>,
    /// Token phrase per (t, v), flattened t * V + v.
    pub tokens: Vec<Vec<String>>,
}

pub fn view_name(v: usize) -> String {
    match v {
        0 => "front".to_string(),
        _ => format!("view{}", v),
    }
}

pub fn export_annotations(world: &SceneWorld, rig: &UnifiedRig) -> Annotations {
    let to_unified = world.world_to_unified();
    let mut boxes = Vec::new();
    for t in 0..world.horizon {
        for (ai, actor) in world.actors.iter().enumerate() {
            let pose_u = to_unified.compose(&actor.poses[t]);
            // yaw of the box's forward axis in the unified x-z plane
            let fwd = pose_u.rotation.mulv([0.0, 0.0, 1.0]);
            boxes.push(BoxAnnotation {
                frame: t,
                actor: ai,
                center: pose_u.translation,
                extent: actor.extent,
                yaw: fwd[0].atan2(fwd[2]),
                color: actor.color,
            });
        }
    }
    let lanes = world
        .lanes
        .iter()
        .map(|l| l.iter().map(|&p| to_unified.apply(p)).collect())
        .collect();
    let mut tokens = Vec::with_capacity(world.horizon * world.views());
    for t in 0..world.horizon {
        let (tod, weather) = world.attributes[t];
        for v in 0..world.views() {
            let visible = world
                .actors
                .iter()
                .filter(|a| {
                    let c = to_unified.apply(a.poses[t].translation);
                    match rig.project_point(t, v, c) {
                        Some((x, y)) => {
                            x >= 0.0
                                && x < world.width as f64
                                && y >= 0.0
                                && y < world.height as f64
                        }
                        None => false,
                    }
                })
                .count();
            tokens.push(vec![
                view_name(v),
                tod.token().to_string(),
                weather.token().to_string(),
                visible.to_string(),
                "vehicles".to_string(),
            ]);
        }
    }
    Annotations { boxes, lanes, tokens }
}
