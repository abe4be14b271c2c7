//! Synthetic moving-shapes sequences with exact masks and analytic flow.
//!
//! A smooth value-noise background is overlaid with textured shapes that
//! move rigidly (translation plus rotation about their center). An optional
//! camera translation moves the whole scene each frame. Pixels are point
//! sampled at their centers, so masks coincide exactly with the rendered
//! shape supports. Frame values are quantized to 8-bit levels.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::data::image_io::quantize;
use crate::error::{Error, Result};
use crate::tensor::Tensor;
use crate::types::{FramePair, Mask};

/// Smooth 2-D value noise: random lattice values blended with smoothstep.
#[derive(Clone, Debug)]
struct ValueNoise {
    cell: f64,
    size: usize,
    lattice: Vec<f64>,
}

impl ValueNoise {
    const SIZE: usize = 64;

    fn new(seed: u64, cell: f64) -> Self {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let lattice = (0..Self::SIZE * Self::SIZE).map(|_| rng.random::<f64>()).collect();
        Self {
            cell,
            size: Self::SIZE,
            lattice,
        }
    }

    fn at(&self, x: f64, y: f64) -> f64 {
        let (gx, gy) = (x / self.cell, y / self.cell);
        let (fx, fy) = (gx.floor(), gy.floor());
        let (tx, ty) = (gx - fx, gy - fy);
        let s = |t: f64| t * t * (3.0 - 2.0 * t);
        let n = self.size as i64;
        let idx = |i: i64, j: i64| self.lattice[(j.rem_euclid(n) * n + i.rem_euclid(n)) as usize];
        let (i, j) = (fx as i64, fy as i64);
        let a = idx(i, j) + s(tx) * (idx(i + 1, j) - idx(i, j));
        let b = idx(i, j + 1) + s(tx) * (idx(i + 1, j + 1) - idx(i, j + 1));
        a + s(ty) * (b - a)
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "lowercase")]
pub enum ShapeKind {
    Ellipse { radius_x: f64, radius_y: f64 },
    Rectangle { half_width: f64, half_height: f64 },
    /// Vertices in object-local coordinates, centered on the origin.
    Polygon { vertices: Vec<(f64, f64)> },
}

impl ShapeKind {
    fn contains(&self, x: f64, y: f64) -> bool {
        match self {
            ShapeKind::Ellipse { radius_x, radius_y } => (x / radius_x).powi(2) + (y / radius_y).powi(2) <= 1.0,
            ShapeKind::Rectangle { half_width, half_height } => x.abs() <= *half_width && y.abs() <= *half_height,
            ShapeKind::Polygon { vertices } => {
                let mut inside = false;
                let n = vertices.len();
                for i in 0..n {
                    let (xi, yi) = vertices[i];
                    let (xj, yj) = vertices[(i + n - 1) % n];
                    if (yi > y) != (yj > y) && x < (xj - xi) * (y - yi) / (yj - yi) + xi {
                        inside = !inside;
                    }
                }
                inside
            }
        }
    }

    /// Half extent of an axis-aligned box around the shape in local coordinates.
    fn extent(&self) -> f64 {
        match self {
            ShapeKind::Ellipse { radius_x, radius_y } => radius_x.max(*radius_y),
            ShapeKind::Rectangle { half_width, half_height } => half_width.hypot(*half_height),
            ShapeKind::Polygon { vertices } => vertices.iter().map(|(x, y)| x.hypot(*y)).fold(0.0, f64::max),
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SceneObject {
    pub shape: ShapeKind,
    /// Center at frame 0, pixels.
    pub center: (f64, f64),
    pub angle: f64,
    /// Per-frame translation, pixels.
    pub velocity: (f64, f64),
    /// Per-frame rotation, radians.
    pub angular_velocity: f64,
    pub color: [f64; 3],
    pub texture_seed: u64,
    /// Whether the object belongs to the foreground mask.
    pub foreground: bool,
}

impl SceneObject {
    fn pose(&self, t: usize, camera: (f64, f64)) -> (f64, f64, f64) {
        let t = t as f64;
        (
            self.center.0 + t * self.velocity.0 + camera.0,
            self.center.1 + t * self.velocity.1 + camera.1,
            self.angle + t * self.angular_velocity,
        )
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ShapeSceneSpec {
    pub height: usize,
    pub width: usize,
    pub background_seed: u64,
    /// Drawn back to front.
    pub objects: Vec<SceneObject>,
    pub frames: usize,
    /// Per-frame translation of the whole scene, pixels.
    pub camera_shake: Option<(f64, f64)>,
    /// Restrict masks to this object instead of all foreground objects.
    pub target: Option<usize>,
}

/// Minimum fraction of every object's area that must stay on the canvas.
pub const MIN_INSIDE_FRACTION: f64 = 0.6;

impl ShapeSceneSpec {
    fn camera(&self, t: usize) -> (f64, f64) {
        let (sx, sy) = self.camera_shake.unwrap_or((0.0, 0.0));
        (sx * t as f64, sy * t as f64)
    }

    pub fn validate(&self) -> Result<()> {
        if self.frames < 2 {
            return Err(Error::Config(format!("scene needs at least 2 frames, got {}", self.frames)));
        }
        if self.height == 0 || self.width == 0 {
            return Err(Error::Config("empty canvas".into()));
        }
        if let Some(t) = self.target {
            if t >= self.objects.len() {
                return Err(Error::Config(format!("target object {t} does not exist")));
            }
        }
        for (k, obj) in self.objects.iter().enumerate() {
            for t in 0..self.frames {
                let f = self.inside_fraction(obj, t);
                if f < MIN_INSIDE_FRACTION {
                    return Err(Error::Config(format!(
                        "object {k} is only {:.0}% inside the canvas at frame {t}",
                        f * 100.0
                    )));
                }
            }
        }
        Ok(())
    }

    fn inside_fraction(&self, obj: &SceneObject, t: usize) -> f64 {
        let (cx, cy, a) = obj.pose(t, self.camera(t));
        let (s, c) = a.sin_cos();
        let e = obj.shape.extent();
        let steps = 40;
        let (mut total, mut inside) = (0usize, 0usize);
        for j in 0..=steps {
            for i in 0..=steps {
                let lx = -e + 2.0 * e * i as f64 / steps as f64;
                let ly = -e + 2.0 * e * j as f64 / steps as f64;
                if !obj.shape.contains(lx, ly) {
                    continue;
                }
                total += 1;
                let x = cx + c * lx - s * ly;
                let y = cy + s * lx + c * ly;
                if x >= -0.5 && y >= -0.5 && x < self.width as f64 - 0.5 && y < self.height as f64 - 0.5 {
                    inside += 1;
                }
            }
        }
        if total == 0 {
            0.0
        } else {
            inside as f64 / total as f64
        }
    }
}

/// A rendered sequence. `flows[t]` and `flow_valid[t]` describe frame t to
/// t+1; there is one fewer of them than frames.
#[derive(Clone, Debug, PartialEq)]
pub struct Scene {
    pub frames: Vec<Tensor>,
    pub masks: Vec<Mask>,
    pub flows: Vec<Tensor>,
    pub flow_valid: Vec<Mask>,
}

impl Scene {
    /// Consecutive frame pairs carrying every ground truth.
    pub fn pairs(&self) -> Vec<FramePair> {
        (0..self.flows.len())
            .map(|t| FramePair {
                frame_t: self.frames[t].clone(),
                frame_t1: self.frames[t + 1].clone(),
                mask_gt: Some(self.masks[t].clone()),
                flow_gt: Some(self.flows[t].clone()),
                flow_valid: Some(self.flow_valid[t].clone()),
            })
            .collect()
    }
}

const BACKGROUND: usize = usize::MAX;

struct Renderer<'a> {
    spec: &'a ShapeSceneSpec,
    background: [ValueNoise; 3],
    textures: Vec<ValueNoise>,
}

impl<'a> Renderer<'a> {
    fn new(spec: &'a ShapeSceneSpec) -> Self {
        let bg = |c: u64| ValueNoise::new(spec.background_seed.wrapping_mul(3).wrapping_add(c), 12.0);
        Self {
            spec,
            background: [bg(0), bg(1), bg(2)],
            textures: spec.objects.iter().map(|o| ValueNoise::new(o.texture_seed, 10.0)).collect(),
        }
    }

    /// Object-local coordinates of pixel `(x, y)` for object `k` at frame `t`.
    fn local(&self, k: usize, t: usize, x: f64, y: f64) -> (f64, f64) {
        let (cx, cy, a) = self.spec.objects[k].pose(t, self.spec.camera(t));
        let (s, c) = a.sin_cos();
        let (dx, dy) = (x - cx, y - cy);
        (c * dx + s * dy, -s * dx + c * dy)
    }

    fn world(&self, k: usize, t: usize, lx: f64, ly: f64) -> (f64, f64) {
        let (cx, cy, a) = self.spec.objects[k].pose(t, self.spec.camera(t));
        let (s, c) = a.sin_cos();
        (cx + c * lx - s * ly, cy + s * lx + c * ly)
    }

    /// Topmost object index covering each pixel, or `BACKGROUND`.
    fn labels(&self, t: usize) -> Vec<usize> {
        let (h, w) = (self.spec.height, self.spec.width);
        let mut labels = vec![BACKGROUND; h * w];
        for y in 0..h {
            for x in 0..w {
                for k in (0..self.spec.objects.len()).rev() {
                    let (lx, ly) = self.local(k, t, x as f64, y as f64);
                    if self.spec.objects[k].shape.contains(lx, ly) {
                        labels[y * w + x] = k;
                        break;
                    }
                }
            }
        }
        labels
    }

    fn render(&self, t: usize, labels: &[usize]) -> Tensor {
        let (h, w) = (self.spec.height, self.spec.width);
        let cam = self.spec.camera(t);
        let mut frame = Tensor::zeros(&[3, h, w]);
        for y in 0..h {
            for x in 0..w {
                let k = labels[y * w + x];
                for ch in 0..3 {
                    let v = if k == BACKGROUND {
                        // Near-gray: shared luminance plus a faint per-channel tint.
                        // The offset keeps sample points positive for the lattice.
                        let (bx, by) = (x as f64 - cam.0 + 256.0, y as f64 - cam.1 + 256.0);
                        0.2 + 0.6 * self.background[0].at(bx, by) + 0.15 * (self.background[ch].at(by, bx) - 0.5)
                    } else {
                        let (lx, ly) = self.local(k, t, x as f64, y as f64);
                        let n = self.textures[k].at(lx + 128.0 + 17.0 * ch as f64, ly + 128.0);
                        // A convex blend stays in range, so no clamp kinks the surface.
                        0.75 * self.spec.objects[k].color[ch] + 0.25 * n
                    };
                    frame.set(ch, y, x, v);
                }
            }
        }
        quantize(&mut frame);
        frame
    }

    fn mask(&self, labels: &[usize]) -> Mask {
        let (h, w) = (self.spec.height, self.spec.width);
        let objs = &self.spec.objects;
        Mask::from_fn(h, w, |y, x| {
            let k = labels[y * w + x];
            k != BACKGROUND
                && match self.spec.target {
                    Some(target) => k == target,
                    None => objs[k].foreground,
                }
        })
    }

    /// Forward flow t → t+1 and validity (target footprint visible on the same surface).
    fn flow(&self, t: usize, labels: &[usize], next_labels: &[usize]) -> (Tensor, Mask) {
        let (h, w) = (self.spec.height, self.spec.width);
        let (c0, c1) = (self.spec.camera(t), self.spec.camera(t + 1));
        let mut flow = Tensor::zeros(&[2, h, w]);
        let mut valid = Mask::new(h, w);
        for y in 0..h {
            for x in 0..w {
                let k = labels[y * w + x];
                let (tx, ty) = if k == BACKGROUND {
                    (x as f64 + c1.0 - c0.0, y as f64 + c1.1 - c0.1)
                } else {
                    let (lx, ly) = self.local(k, t, x as f64, y as f64);
                    self.world(k, t + 1, lx, ly)
                };
                flow.set(0, y, x, tx - x as f64);
                flow.set(1, y, x, ty - y as f64);
                // Every pixel a bilinear lookup at the target touches must show the same surface.
                let (fx, fy) = (tx.floor(), ty.floor());
                let visible = fx >= 0.0 && fy >= 0.0 && tx <= (w - 1) as f64 && ty <= (h - 1) as f64 && {
                    let (x0, y0) = (fx as usize, fy as usize);
                    let (x1, y1) = ((x0 + 1).min(w - 1), (y0 + 1).min(h - 1));
                    [(y0, x0), (y0, x1), (y1, x0), (y1, x1)].iter().all(|&(yy, xx)| next_labels[yy * w + xx] == k)
                };
                valid.set(y, x, visible);
            }
        }
        (flow, valid)
    }
}

/// Render every frame, mask and flow of `spec`.
pub fn generate_scene(spec: &ShapeSceneSpec) -> Result<Scene> {
    spec.validate()?;
    let r = Renderer::new(spec);
    let labels: Vec<Vec<usize>> = (0..spec.frames).map(|t| r.labels(t)).collect();
    let frames = (0..spec.frames).map(|t| r.render(t, &labels[t])).collect();
    let masks = labels.iter().map(|l| r.mask(l)).collect();
    let (flows, flow_valid) = (0..spec.frames - 1).map(|t| r.flow(t, &labels[t], &labels[t + 1])).unzip();
    Ok(Scene {
        frames,
        masks,
        flows,
        flow_valid,
    })
}

/// Knobs for drawing random scene specs.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct SceneSampler {
    pub height: usize,
    pub width: usize,
    pub frames: usize,
    /// Inclusive range of moving (foreground) objects.
    pub moving_objects: (usize, usize),
    /// Inclusive range of static distractor objects drawn from the same
    /// appearance distribution but excluded from the mask.
    pub static_objects: (usize, usize),
    /// Object size range as a fraction of the shorter side.
    pub size_fraction: (f64, f64),
    /// Maximum speed per axis, pixels per frame.
    pub max_speed: f64,
    /// Minimum speed of a moving object, pixels per frame.
    pub min_speed: f64,
    pub max_angular_speed: f64,
    pub camera_shake: Option<(f64, f64)>,
    /// Give each static object the shape, color and texture of a moving
    /// one, so only motion tells them apart.
    pub lookalike_distractors: bool,
}

impl Default for SceneSampler {
    fn default() -> Self {
        Self {
            height: 64,
            width: 64,
            frames: 8,
            moving_objects: (1, 2),
            static_objects: (1, 2),
            size_fraction: (0.12, 0.22),
            max_speed: 4.0,
            min_speed: 2.0,
            max_angular_speed: 0.05,
            camera_shake: None,
            lookalike_distractors: true,
        }
    }
}

/// A random strongly saturated color, so objects stand out from the
/// near-gray background by chroma.
fn saturated_color(rng: &mut impl Rng) -> [f64; 3] {
    let hue = rng.random_range(0.0..6.0);
    let sat = rng.random_range(0.65..0.95);
    let val = rng.random_range(0.55..0.95);
    let f = hue - f64::floor(hue);
    let (p, q, t) = (val * (1.0 - sat), val * (1.0 - sat * f), val * (1.0 - sat * (1.0 - f)));
    match hue as usize {
        0 => [val, t, p],
        1 => [q, val, p],
        2 => [p, val, t],
        3 => [p, q, val],
        4 => [t, p, val],
        _ => [val, p, q],
    }
}

impl SceneSampler {
    fn random_shape(&self, rng: &mut impl Rng) -> ShapeKind {
        let side = self.height.min(self.width) as f64;
        let mut r = || side * rng.random_range(self.size_fraction.0..=self.size_fraction.1);
        let (a, b) = (r(), r());
        match rng.random_range(0..3) {
            0 => ShapeKind::Ellipse { radius_x: a, radius_y: b },
            1 => ShapeKind::Rectangle {
                half_width: a * 0.85,
                half_height: b * 0.85,
            },
            _ => {
                let n = rng.random_range(3..=6);
                let base = rng.random_range(0.0..std::f64::consts::TAU);
                let vertices = (0..n)
                    .map(|i| {
                        let ang = base + std::f64::consts::TAU * i as f64 / n as f64;
                        let rad = a * rng.random_range(0.8..1.15);
                        (rad * ang.cos(), rad * ang.sin())
                    })
                    .collect();
                ShapeKind::Polygon { vertices }
            }
        }
    }

    fn random_object(&self, rng: &mut impl Rng, moving: bool) -> SceneObject {
        let shape = self.random_shape(rng);
        let e = shape.extent() * 0.5;
        let (h, w) = (self.height as f64, self.width as f64);
        let mut velocity: (f64, f64) = (0.0, 0.0);
        let mut angular_velocity = 0.0;
        if moving {
            // Keep every moving object visibly in motion.
            while velocity.0.hypot(velocity.1) < self.min_speed {
                velocity = (
                    rng.random_range(-self.max_speed..=self.max_speed),
                    rng.random_range(-self.max_speed..=self.max_speed),
                );
            }
            angular_velocity = rng.random_range(-self.max_angular_speed..=self.max_angular_speed);
        }
        let span = (self.frames - 1) as f64;
        // Choose a start so the center path stays within the canvas margin.
        let pick = |rng: &mut dyn rand::RngCore, len: f64, v: f64| {
            let lo = e.max(e - v * span);
            let hi = (len - 1.0 - e).min(len - 1.0 - e - v * span);
            if hi > lo {
                rng.random_range(lo..=hi)
            } else {
                len / 2.0 - v * span / 2.0
            }
        };
        let cx = pick(rng, w, velocity.0);
        let cy = pick(rng, h, velocity.1);
        SceneObject {
            shape,
            center: (cx, cy),
            angle: rng.random_range(0.0..std::f64::consts::TAU),
            velocity,
            angular_velocity,
            color: saturated_color(rng),
            texture_seed: rng.random(),
            foreground: moving,
        }
    }

    /// Draw a valid spec; retries placement until the stay-inside rule holds.
    pub fn sample(&self, rng: &mut impl Rng) -> ShapeSceneSpec {
        loop {
            let n_static = rng.random_range(self.static_objects.0..=self.static_objects.1);
            let n_moving = rng.random_range(self.moving_objects.0..=self.moving_objects.1);
            let moving: Vec<SceneObject> = (0..n_moving).map(|_| self.random_object(rng, true)).collect();
            // Static objects go first so movers pass over them.
            let mut objects: Vec<SceneObject> = (0..n_static)
                .map(|_| {
                    let mut o = self.random_object(rng, false);
                    if self.lookalike_distractors && !moving.is_empty() {
                        let twin = &moving[rng.random_range(0..moving.len())];
                        o.shape = twin.shape.clone();
                        o.color = twin.color;
                        o.texture_seed = twin.texture_seed;
                    }
                    o
                })
                .collect();
            objects.extend(moving);
            let spec = ShapeSceneSpec {
                height: self.height,
                width: self.width,
                background_seed: rng.random(),
                objects,
                frames: self.frames,
                camera_shake: self.camera_shake,
                target: None,
            };
            if spec.validate().is_ok() {
                let scene_ok = generate_scene(&spec).map(|s| s.masks.iter().all(|m| !m.is_empty()));
                if matches!(scene_ok, Ok(true)) {
                    return spec;
                }
            }
        }
    }
}

pub fn sequence_id(index: usize) -> String {
    format!("seq-{index:04}")
}

/// Render `count` scenes with ids `first_id..first_id + count`. Each scene
/// draws from its own stream keyed by `(seed, id)`, so splits with disjoint
/// ids never share a scene.
pub fn generate_corpus(sampler: &SceneSampler, count: usize, first_id: usize, seed: u64) -> Result<Vec<(String, Scene)>> {
    (first_id..first_id + count)
        .map(|id| {
            let mut rng = ChaCha8Rng::seed_from_u64(seed ^ (id as u64 + 1).wrapping_mul(0x9e37_79b9_7f4a_7c15));
            Ok((sequence_id(id), generate_scene(&sampler.sample(&mut rng))?))
        })
        .collect()
}
