//! Simulated perception: a ground-truth box scene seen through a noisy
//! detector, and the relation rules that ground predicates on what was seen.
//!
//! World frame: metres, z up. The camera looks along its yaw/pitch forward
//! axis; depth is the coordinate along that axis.

use std::collections::{BTreeMap, BTreeSet};
use std::path::Path;

use rand::seq::{IndexedRandom, SliceRandom};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::symbolic::{Atom, State, Vocabulary};

#[derive(Debug, Error, Clone, PartialEq)]
pub enum PerceptionError {
    #[error("fewer than 5% of the box pixels of `{0}` pass the foreground threshold")]
    NoForeground(String),
    #[error("unknown relation `{0}`")]
    UnknownPredicate(String),
    #[error("relation `{pred}` expects {expected} arguments, got {got}")]
    Arity { pred: String, expected: usize, got: usize },
    #[error("invalid scene: {0}")]
    InvalidScene(String),
}

pub type Result<T> = std::result::Result<T, PerceptionError>;

pub type Vec3 = [f64; 3];

fn sub(a: Vec3, b: Vec3) -> Vec3 {
    [a[0] - b[0], a[1] - b[1], a[2] - b[2]]
}

fn dot(a: Vec3, b: Vec3) -> f64 {
    a[0] * b[0] + a[1] * b[1] + a[2] * b[2]
}

fn add_scaled(a: Vec3, b: Vec3, s: f64) -> Vec3 {
    [a[0] + b[0] * s, a[1] + b[1] * s, a[2] + b[2] * s]
}

fn norm(a: Vec3) -> f64 {
    dot(a, a).sqrt()
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Aabb {
    pub min: Vec3,
    pub max: Vec3,
}

impl Aabb {
    pub fn new(min: Vec3, max: Vec3) -> Aabb {
        Aabb { min, max }
    }

    pub fn from_center(c: Vec3, size: Vec3) -> Aabb {
        Aabb {
            min: [c[0] - size[0] / 2.0, c[1] - size[1] / 2.0, c[2] - size[2] / 2.0],
            max: [c[0] + size[0] / 2.0, c[1] + size[1] / 2.0, c[2] + size[2] / 2.0],
        }
    }

    pub fn center(&self) -> Vec3 {
        [(self.min[0] + self.max[0]) / 2.0, (self.min[1] + self.max[1]) / 2.0, (self.min[2] + self.max[2]) / 2.0]
    }

    pub fn size(&self) -> Vec3 {
        [self.max[0] - self.min[0], self.max[1] - self.min[1], self.max[2] - self.min[2]]
    }

    pub fn volume(&self) -> f64 {
        let s = self.size();
        s[0] * s[1] * s[2]
    }

    pub fn is_valid(&self) -> bool {
        (0..3).all(|i| self.max[i] > self.min[i] && self.min[i].is_finite() && self.max[i].is_finite())
    }

    pub fn translated(&self, d: Vec3) -> Aabb {
        Aabb { min: add_scaled(self.min, d, 1.0), max: add_scaled(self.max, d, 1.0) }
    }

    pub fn dilated(&self, m: f64) -> Aabb {
        Aabb { min: self.min.map(|v| v - m), max: self.max.map(|v| v + m) }
    }

    pub fn contains_point(&self, p: Vec3) -> bool {
        (0..3).all(|i| p[i] >= self.min[i] && p[i] <= self.max[i])
    }

    fn overlap_1d(a0: f64, a1: f64, b0: f64, b1: f64) -> f64 {
        (a1.min(b1) - a0.max(b0)).max(0.0)
    }

    pub fn intersection_volume(&self, o: &Aabb) -> f64 {
        (0..3).map(|i| Self::overlap_1d(self.min[i], self.max[i], o.min[i], o.max[i])).product()
    }

    /// Area of the xy-footprint intersection.
    pub fn footprint_overlap(&self, o: &Aabb) -> f64 {
        (0..2).map(|i| Self::overlap_1d(self.min[i], self.max[i], o.min[i], o.max[i])).product()
    }

    pub fn footprint_area(&self) -> f64 {
        let s = self.size();
        s[0] * s[1]
    }

    /// Entry distance of the ray `o + t d` (t > 0), slab method.
    pub fn ray_hit(&self, o: Vec3, d: Vec3) -> Option<f64> {
        let mut t0 = f64::NEG_INFINITY;
        let mut t1 = f64::INFINITY;
        for i in 0..3 {
            if d[i].abs() < 1e-12 {
                if o[i] < self.min[i] || o[i] > self.max[i] {
                    return None;
                }
            } else {
                let a = (self.min[i] - o[i]) / d[i];
                let b = (self.max[i] - o[i]) / d[i];
                t0 = t0.max(a.min(b));
                t1 = t1.min(a.max(b));
            }
        }
        if t1 < t0.max(0.0) {
            None
        } else {
            Some(t0.max(0.0))
        }
    }

    fn corners(&self) -> [Vec3; 8] {
        let mut out = [[0.0; 3]; 8];
        for (i, c) in out.iter_mut().enumerate() {
            *c = [
                if i & 1 == 0 { self.min[0] } else { self.max[0] },
                if i & 2 == 0 { self.min[1] } else { self.max[1] },
                if i & 4 == 0 { self.min[2] } else { self.max[2] },
            ];
        }
        out
    }
}

// ---------------------------------------------------------------------------
// Scene and camera

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct SceneObject {
    pub id: String,
    /// Term name of the object's class.
    pub class: String,
    #[serde(rename = "box")]
    pub aabb: Aabb,
    #[serde(default)]
    pub supported_by: Option<String>,
    /// Part of the robot: known by proprioception, never detected.
    #[serde(default, rename = "self")]
    pub is_self: bool,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct Camera {
    pub position: Vec3,
    /// Rotation about z, radians; 0 looks along +x.
    pub yaw: f64,
    /// Elevation, radians; negative looks down.
    #[serde(default)]
    pub pitch: f64,
    #[serde(default = "default_hfov")]
    pub hfov: f64,
    #[serde(default = "default_vfov")]
    pub vfov: f64,
    #[serde(default = "default_max_depth")]
    pub max_depth: f64,
    #[serde(default = "default_width")]
    pub width: f64,
    #[serde(default = "default_height")]
    pub height: f64,
}

fn default_hfov() -> f64 {
    1.0
}
fn default_vfov() -> f64 {
    0.8
}
fn default_max_depth() -> f64 {
    2.5
}
fn default_width() -> f64 {
    640.0
}
fn default_height() -> f64 {
    480.0
}

impl Default for Camera {
    fn default() -> Self {
        Camera {
            position: [0.0, 0.0, 1.4],
            yaw: 0.0,
            pitch: -0.35,
            hfov: default_hfov(),
            vfov: default_vfov(),
            max_depth: default_max_depth(),
            width: default_width(),
            height: default_height(),
        }
    }
}

impl Camera {
    pub fn is_valid(&self) -> bool {
        let fov = |f: f64| f > 0.0 && f < std::f64::consts::PI;
        fov(self.hfov) && fov(self.vfov) && self.max_depth > 0.0 && self.width > 0.0 && self.height > 0.0
    }

    pub fn forward(&self) -> Vec3 {
        [self.yaw.cos() * self.pitch.cos(), self.yaw.sin() * self.pitch.cos(), self.pitch.sin()]
    }

    pub fn right(&self) -> Vec3 {
        [self.yaw.sin(), -self.yaw.cos(), 0.0]
    }

    pub fn up(&self) -> Vec3 {
        [-self.yaw.cos() * self.pitch.sin(), -self.yaw.sin() * self.pitch.sin(), self.pitch.cos()]
    }

    fn fx(&self) -> f64 {
        self.width / 2.0 / (self.hfov / 2.0).tan()
    }

    fn fy(&self) -> f64 {
        self.height / 2.0 / (self.vfov / 2.0).tan()
    }

    /// Camera coordinates (right, up, forward).
    pub fn to_camera(&self, p: Vec3) -> Vec3 {
        let d = sub(p, self.position);
        [dot(d, self.right()), dot(d, self.up()), dot(d, self.forward())]
    }

    pub fn from_camera(&self, c: Vec3) -> Vec3 {
        let p = add_scaled(self.position, self.right(), c[0]);
        let p = add_scaled(p, self.up(), c[1]);
        add_scaled(p, self.forward(), c[2])
    }

    /// Inside the visual cone: in front, within both half-angles and within
    /// the reliable depth.
    pub fn sees(&self, p: Vec3) -> bool {
        let c = self.to_camera(p);
        c[2] > 1e-6
            && (c[0] / c[2]).abs() <= (self.hfov / 2.0).tan()
            && (c[1] / c[2]).abs() <= (self.vfov / 2.0).tan()
            && norm(sub(p, self.position)) <= self.max_depth
    }

    pub fn project(&self, p: Vec3) -> Option<[f64; 2]> {
        let c = self.to_camera(p);
        if c[2] <= 1e-6 {
            return None;
        }
        Some([self.width / 2.0 + self.fx() * c[0] / c[2], self.height / 2.0 - self.fy() * c[1] / c[2]])
    }

    /// Ray through pixel `(u, v)` with unit forward component, so the ray
    /// parameter equals depth.
    pub fn pixel_ray(&self, u: f64, v: f64) -> Vec3 {
        let x = (u - self.width / 2.0) / self.fx();
        let y = -(v - self.height / 2.0) / self.fy();
        let d = add_scaled(self.forward(), self.right(), x);
        add_scaled(d, self.up(), y)
    }

    /// Pixel bounding box of a 3D box, clipped to the image.
    pub fn project_box(&self, b: &Aabb) -> Option<[f64; 4]> {
        let mut lo = [f64::INFINITY; 2];
        let mut hi = [f64::NEG_INFINITY; 2];
        for c in b.corners() {
            let cc = self.to_camera(c);
            let z = cc[2].max(0.05);
            let uv = [self.width / 2.0 + self.fx() * cc[0] / z, self.height / 2.0 - self.fy() * cc[1] / z];
            for i in 0..2 {
                lo[i] = lo[i].min(uv[i]);
                hi[i] = hi[i].max(uv[i]);
            }
        }
        let bb = [lo[0].max(0.0), lo[1].max(0.0), hi[0].min(self.width), hi[1].min(self.height)];
        if bb[2] - bb[0] < 1.0 || bb[3] - bb[1] < 1.0 {
            return None;
        }
        Some(bb)
    }

    /// Camera re-aimed at a point (yaw only; pitch kept).
    pub fn aimed_at(&self, p: Vec3) -> Camera {
        let d = sub(p, self.position);
        Camera { yaw: d[1].atan2(d[0]), ..*self }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct Attachment {
    pub hand: String,
    pub object: String,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct Scene {
    #[serde(default)]
    pub frame: u64,
    pub camera: Camera,
    pub objects: Vec<SceneObject>,
    #[serde(default)]
    pub attachments: Vec<Attachment>,
    /// Robot-internal atoms such as `VisionOn(robot)`.
    #[serde(default)]
    pub internal: Vec<String>,
}

impl Scene {
    pub fn parse_toml(text: &str) -> Result<Scene> {
        let s: Scene = toml::from_str(text).map_err(|e| PerceptionError::InvalidScene(e.to_string()))?;
        s.validate()?;
        Ok(s)
    }

    pub fn load(path: impl AsRef<Path>) -> Result<Scene> {
        let text = std::fs::read_to_string(path.as_ref())
            .map_err(|e| PerceptionError::InvalidScene(format!("{}: {e}", path.as_ref().display())))?;
        Self::parse_toml(&text)
    }

    pub fn to_toml(&self) -> String {
        toml::to_string(self).expect("scene serialises")
    }

    pub fn validate(&self) -> Result<()> {
        let bad = |m: String| Err(PerceptionError::InvalidScene(m));
        let mut ids = BTreeSet::new();
        for o in &self.objects {
            if !o.aabb.is_valid() {
                return bad(format!("object `{}` has a degenerate box", o.id));
            }
            if !ids.insert(o.id.as_str()) {
                return bad(format!("duplicate object `{}`", o.id));
            }
        }
        if !self.camera.is_valid() {
            return bad("camera field of view or depth out of range".into());
        }
        for o in &self.objects {
            let mut seen = BTreeSet::new();
            let mut cur = o.supported_by.as_deref();
            seen.insert(o.id.as_str());
            while let Some(s) = cur {
                if !seen.insert(s) {
                    return bad(format!("support cycle through `{}`", o.id));
                }
                let Some(next) = self.object(s) else { return bad(format!("`{}` rests on unknown `{s}`", o.id)) };
                cur = next.supported_by.as_deref();
            }
        }
        for a in &self.attachments {
            if self.object(&a.hand).is_none() || self.object(&a.object).is_none() {
                return bad(format!("attachment {} → {} does not resolve", a.hand, a.object));
            }
        }
        Ok(())
    }

    pub fn object(&self, id: &str) -> Option<&SceneObject> {
        self.objects.iter().find(|o| o.id == id)
    }

    pub fn object_mut(&mut self, id: &str) -> Option<&mut SceneObject> {
        self.objects.iter_mut().find(|o| o.id == id)
    }

    pub fn index_of(&self, id: &str) -> Option<usize> {
        self.objects.iter().position(|o| o.id == id)
    }

    pub fn is_attached(&self, hand: &str, object: &str) -> bool {
        self.attachments.iter().any(|a| a.hand == hand && a.object == object)
    }

    pub fn internal_state(&self) -> State {
        self.internal.iter().filter_map(|s| s.parse::<Atom>().ok()).collect()
    }
}

// ---------------------------------------------------------------------------
// Detector

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct NoiseProfile {
    #[serde(default = "one")]
    pub tp_rate: f64,
    #[serde(default)]
    pub tp_overrides: BTreeMap<String, f64>,
    #[serde(default)]
    pub confusion: f64,
    /// Pixels.
    #[serde(default)]
    pub bbox_jitter: f64,
    /// Metres.
    #[serde(default)]
    pub depth_sigma: f64,
    /// Noise on per-pixel foreground probability.
    #[serde(default)]
    pub fg_noise: f64,
}

fn one() -> f64 {
    1.0
}

impl Default for NoiseProfile {
    fn default() -> Self {
        NoiseProfile {
            tp_rate: 1.0,
            tp_overrides: BTreeMap::new(),
            confusion: 0.0,
            bbox_jitter: 0.0,
            depth_sigma: 0.0,
            fg_noise: 0.0,
        }
    }
}

/// Noise profile plus its own seeded generator. Clone per query when
/// sharing across threads.
#[derive(Debug, Clone)]
pub struct DetectorModel {
    pub noise: NoiseProfile,
    rng: ChaCha8Rng,
}

impl DetectorModel {
    pub fn new(noise: NoiseProfile, seed: u64) -> DetectorModel {
        assert!((0.0..=1.0).contains(&noise.tp_rate) && (0.0..=1.0).contains(&noise.confusion), "rates in [0,1]");
        DetectorModel { noise, rng: ChaCha8Rng::seed_from_u64(seed) }
    }

    pub fn perfect(seed: u64) -> DetectorModel {
        Self::new(NoiseProfile::default(), seed)
    }

    fn tp(&self, class: &str) -> f64 {
        *self.noise.tp_overrides.get(class).unwrap_or(&self.noise.tp_rate)
    }

    fn gauss(&mut self, sigma: f64) -> f64 {
        if sigma <= 0.0 {
            return 0.0;
        }
        Normal::new(0.0, sigma).expect("finite sigma").sample(&mut self.rng)
    }

    pub fn rng(&mut self) -> &mut ChaCha8Rng {
        &mut self.rng
    }
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct Detection {
    /// Index of the scene object the detection came from.
    pub object: usize,
    pub label: String,
    /// Pixels: u0, v0, u1, v1.
    pub bbox: [f64; 4],
    /// Metres along the camera axis.
    pub depth: f64,
    pub confidence: f64,
}

/// Scene objects whose centroid is inside the visual cone.
pub fn visible_objects(scene: &Scene, cam: &Camera) -> Vec<usize> {
    (0..scene.objects.len())
        .filter(|&i| !scene.objects[i].is_self && cam.sees(scene.objects[i].aabb.center()))
        .collect()
}

/// Batch detection with per-object majority voting over `n` frames.
/// Objects whose vote is "miss" are omitted; confidence is the mode frequency.
pub fn detect_batch(scene: &Scene, cam: &Camera, model: &mut DetectorModel, n: usize) -> Vec<Detection> {
    assert!(n >= 1, "batch size must be positive");
    let labels: Vec<&str> = {
        let set: BTreeSet<&str> = scene.objects.iter().filter(|o| !o.is_self).map(|o| o.class.as_str()).collect();
        set.into_iter().collect()
    };
    let mut out = Vec::new();
    for i in visible_objects(scene, cam) {
        let obj = &scene.objects[i];
        let Some(bbox) = cam.project_box(&obj.aabb) else { continue };
        let mut votes: BTreeMap<Option<&str>, usize> = BTreeMap::new();
        let mut jitter = [0.0; 4];
        let mut hits = 0usize;
        for _ in 0..n {
            let detected = model.rng.random::<f64>() < model.tp(&obj.class);
            let label = if !detected {
                None
            } else if model.noise.confusion > 0.0 && model.rng.random::<f64>() < model.noise.confusion {
                let others: Vec<&str> = labels.iter().copied().filter(|l| *l != obj.class).collect();
                Some(*others.choose(&mut model.rng).unwrap_or(&"unknown"))
            } else {
                Some(obj.class.as_str())
            };
            if label.is_some() {
                hits += 1;
                for j in jitter.iter_mut() {
                    let g = model.gauss(model.noise.bbox_jitter);
                    *j += g;
                }
            }
            *votes.entry(label).or_default() += 1;
        }
        // Highest count wins; ties prefer a label over a miss, then the
        // lexicographically first label.
        let (best, count) = votes
            .iter()
            .map(|(k, v)| (*k, *v))
            .max_by(|a, b| a.1.cmp(&b.1).then(a.0.is_some().cmp(&b.0.is_some())).then(b.0.cmp(&a.0)))
            .expect("n >= 1");
        let Some(label) = best else { continue };
        let mut bb = bbox;
        if hits > 0 {
            for (b, j) in bb.iter_mut().zip(jitter) {
                *b += j / hits as f64;
            }
        }
        if bb[2] <= bb[0] {
            bb[2] = bb[0] + 1.0;
        }
        if bb[3] <= bb[1] {
            bb[3] = bb[1] + 1.0;
        }
        let depth = cam.to_camera(obj.aabb.center())[2].max(0.0);
        out.push(Detection { object: i, label: label.to_string(), bbox: bb, depth, confidence: count as f64 / n as f64 });
    }
    out
}

/// Foreground-mask settings.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct MaskConfig {
    pub threshold: f64,
    pub grid: usize,
    pub min_fraction: f64,
    pub p_object: f64,
    pub p_background: f64,
}

impl Default for MaskConfig {
    fn default() -> Self {
        MaskConfig { threshold: 0.7, grid: 12, min_fraction: 0.05, p_object: 0.9, p_background: 0.1 }
    }
}

/// Depth samples over the detection box: for each grid pixel, the depth of
/// the first surface hit and whether that surface belongs to the detected
/// object.
fn box_rays(det: &Detection, scene: &Scene, cam: &Camera, grid: usize) -> Vec<(Option<f64>, bool)> {
    let mut out = Vec::with_capacity(grid * grid);
    for gy in 0..grid {
        for gx in 0..grid {
            let u = det.bbox[0] + (gx as f64 + 0.5) / grid as f64 * (det.bbox[2] - det.bbox[0]);
            let v = det.bbox[1] + (gy as f64 + 0.5) / grid as f64 * (det.bbox[3] - det.bbox[1]);
            let ray = cam.pixel_ray(u, v);
            let mut best: Option<(f64, usize)> = None;
            // robot parts are known by proprioception and never occlude
            for (i, o) in scene.objects.iter().enumerate().filter(|(_, o)| !o.is_self) {
                if let Some(t) = o.aabb.ray_hit(cam.position, ray) {
                    if t > 1e-6 && best.is_none_or(|(bt, _)| t < bt) {
                        best = Some((t, i));
                    }
                }
            }
            match best {
                Some((t, i)) => out.push((Some(t), i == det.object)),
                None => out.push((None, false)),
            }
        }
    }
    out
}

/// Nearest-face depth of the detected object inside its foreground mask,
/// plus Gaussian noise. Pixels are foreground with probability 0.9 when the
/// first surface hit belongs to the object and 0.1 otherwise, perturbed by
/// the profile's foreground noise, and kept when above the threshold.
pub fn estimate_depth_with(
    det: &Detection,
    scene: &Scene,
    cam: &Camera,
    model: &mut DetectorModel,
    mask: &MaskConfig,
) -> Result<f64> {
    let rays = box_rays(det, scene, cam, mask.grid);
    let mut kept = Vec::new();
    for (t, own) in &rays {
        let base = if *own { mask.p_object } else { mask.p_background };
        let p = (base + model.gauss(model.noise.fg_noise)).clamp(0.0, 1.0);
        if p > mask.threshold {
            if let Some(t) = t {
                kept.push(*t);
            }
        }
    }
    if (kept.len() as f64) < mask.min_fraction * rays.len() as f64 || kept.is_empty() {
        return Err(PerceptionError::NoForeground(scene.objects[det.object].id.clone()));
    }
    let nearest = kept.iter().cloned().fold(f64::INFINITY, f64::min);
    Ok((nearest + model.gauss(model.noise.depth_sigma)).max(0.0))
}

pub fn estimate_depth(det: &Detection, scene: &Scene, cam: &Camera, model: &mut DetectorModel) -> Result<f64> {
    estimate_depth_with(det, scene, cam, model, &MaskConfig::default())
}

/// Noise-free reference of [`estimate_depth`]: nearest own-surface hit.
fn reference_depth(det: &Detection, scene: &Scene, cam: &Camera, grid: usize) -> Option<f64> {
    box_rays(det, scene, cam, grid)
        .into_iter()
        .filter(|(_, own)| *own)
        .filter_map(|(t, _)| t)
        .fold(None, |acc: Option<f64>, t| Some(acc.map_or(t, |a| a.min(t))))
}

// ---------------------------------------------------------------------------
// Reconstruction

/// Which cues the reconstruction may use (Table 1 style ablations).
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct Features {
    pub depth: bool,
    pub shape: bool,
}

impl Features {
    pub const FULL: Features = Features { depth: true, shape: true };
    pub const NO_SHAPE: Features = Features { depth: true, shape: false };
    pub const NO_DEPTH: Features = Features { depth: false, shape: true };
}

/// An object as the robot believes it to be.
#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct PerceivedObject {
    pub id: String,
    pub aabb: Aabb,
    pub depth: f64,
    pub confidence: f64,
}

/// Depth assumed when the depth cue is disabled.
pub const NOMINAL_DEPTH: f64 = 1.6;

/// Rebuilds a 3D box from a detection. The centroid follows the pixel ray
/// of the (jittered) box centre, displaced along the optical axis by the
/// depth error; extents come from the class shape prior or, without it,
/// from the metric size of the 2D box.
pub fn reconstruct(
    det: &Detection,
    scene: &Scene,
    cam: &Camera,
    model: &mut DetectorModel,
    features: Features,
    mask: &MaskConfig,
) -> Result<PerceivedObject> {
    let obj = &scene.objects[det.object];
    let truth = cam.to_camera(obj.aabb.center());
    let clean_box = cam.project_box(&obj.aabb).unwrap_or(det.bbox);
    let fx = cam.fx();
    let fy = cam.fy();
    let est = estimate_depth_with(det, scene, cam, model, mask)?;
    let reference = reference_depth(det, scene, cam, mask.grid).unwrap_or(est);
    let z = if features.depth { truth[2] + (est - reference) } else { NOMINAL_DEPTH };
    let z = z.max(0.05);
    // pixel offset of the detection centre relative to the clean projection
    let du = (det.bbox[0] + det.bbox[2] - clean_box[0] - clean_box[2]) / 2.0;
    let dv = (det.bbox[1] + det.bbox[3] - clean_box[1] - clean_box[3]) / 2.0;
    let x = (truth[0] / truth[2] + du / fx) * z;
    let y = (truth[1] / truth[2] - dv / fy) * z;
    let center = cam.from_camera([x, y, z]);
    let size = if features.shape {
        obj.aabb.size()
    } else {
        let w = (det.bbox[2] - det.bbox[0]) * z / fx;
        let h = (det.bbox[3] - det.bbox[1]) * z / fy;
        let r = cam.right();
        let horiz = w / (r[0].abs() + r[1].abs()).max(1e-6);
        [horiz, horiz, h * cam.pitch.cos()]
    };
    Ok(PerceivedObject { id: obj.id.clone(), aabb: Aabb::from_center(center, size), depth: est, confidence: det.confidence })
}

// ---------------------------------------------------------------------------
// Relations

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct RelationConfig {
    /// Vertical face gap for On/Under, metres.
    pub on_gap: f64,
    /// Fraction of the upper box's footprint that must overlap.
    pub on_overlap: f64,
    pub inside_ratio: f64,
    pub close_to: f64,
    pub dead_band: f64,
    pub hold_dilation: f64,
    /// Minimum detection confidence for Found.
    pub mu: f64,
}

impl Default for RelationConfig {
    fn default() -> Self {
        RelationConfig {
            on_gap: 0.02,
            on_overlap: 0.5,
            inside_ratio: 0.9,
            close_to: 0.8,
            dead_band: 0.05,
            hold_dilation: 0.05,
            mu: 0.7,
        }
    }
}

pub const RELATIONS: [&str; 13] =
    ["CloseTo", "Found", "Free", "Hold", "Inside", "On", "InFront", "Left", "Right", "Under", "Behind", "Clear", "Empty"];

pub fn relation_arity(rule: &str) -> Option<usize> {
    match rule {
        "Found" | "Free" | "Clear" | "Empty" => Some(1),
        "CloseTo" | "Hold" | "Inside" | "On" | "InFront" | "Left" | "Right" | "Under" | "Behind" => Some(2),
        _ => None,
    }
}

/// Objects a relation is evaluated over: boxes keyed by id plus the
/// camera frame for view-relative relations.
#[derive(Debug, Clone)]
pub struct View<'a> {
    pub boxes: BTreeMap<String, Aabb>,
    /// Detection confidences (Found); absent ids are unseen.
    pub confidence: BTreeMap<String, f64>,
    pub attachments: &'a [Attachment],
    pub camera: Camera,
    /// Ids eligible as the hidden witness of Free/Clear/Empty.
    pub items: BTreeSet<String>,
}

impl<'a> View<'a> {
    /// Ground-truth view of a scene: every object, full confidence.
    pub fn truth(scene: &'a Scene) -> View<'a> {
        View {
            boxes: scene.objects.iter().map(|o| (o.id.clone(), o.aabb)).collect(),
            confidence: scene
                .objects
                .iter()
                .filter(|o| o.is_self || scene.camera.sees(o.aabb.center()))
                .map(|o| (o.id.clone(), 1.0))
                .collect(),
            attachments: &scene.attachments,
            camera: scene.camera,
            items: scene.objects.iter().map(|o| o.id.clone()).collect(),
        }
    }
}

fn on_rule(a: &Aabb, b: &Aabb, cfg: &RelationConfig) -> bool {
    (a.min[2] - b.max[2]).abs() <= cfg.on_gap
        && a.footprint_area() > 0.0
        && a.footprint_overlap(b) / a.footprint_area() >= cfg.on_overlap
}

fn inside_rule(a: &Aabb, c: &Aabb, cfg: &RelationConfig) -> bool {
    a.volume() > 0.0 && a.intersection_volume(c) / a.volume() >= cfg.inside_ratio
}

fn hold_rule(view: &View, h: &str, o: &str, cfg: &RelationConfig) -> bool {
    if view.attachments.iter().any(|x| x.hand == h && x.object == o) {
        return true;
    }
    match (view.boxes.get(h), view.boxes.get(o)) {
        (Some(hb), Some(ob)) => hb.dilated(cfg.hold_dilation).contains_point(ob.center()),
        _ => false,
    }
}

/// Decides one relation over a view. Arguments missing from the view make
/// every positive relation false.
pub fn ground_relation(rule: &str, args: &[&str], view: &View, cfg: &RelationConfig) -> Result<bool> {
    let arity = relation_arity(rule).ok_or_else(|| PerceptionError::UnknownPredicate(rule.to_string()))?;
    if args.len() != arity {
        return Err(PerceptionError::Arity { pred: rule.to_string(), expected: arity, got: args.len() });
    }
    let b = |i: usize| view.boxes.get(args[i]);
    let cam = &view.camera;
    let pair = || match (b(0), b(1)) {
        (Some(x), Some(y)) => Some((*x, *y)),
        _ => None,
    };
    // distance gate for view-relative relations: both ends within reliable depth
    let gated = || {
        pair().filter(|(x, y)| {
            norm(sub(x.center(), cam.position)) <= cam.max_depth && norm(sub(y.center(), cam.position)) <= cam.max_depth
        })
    };
    Ok(match rule {
        "Found" => view.confidence.get(args[0]).is_some_and(|c| *c > cfg.mu),
        "CloseTo" => pair().is_some_and(|(x, y)| norm(sub(x.center(), y.center())) <= cfg.close_to),
        "On" => pair().is_some_and(|(x, y)| on_rule(&x, &y, cfg)),
        "Under" => pair().is_some_and(|(x, y)| on_rule(&y, &x, cfg)),
        "Inside" => pair().is_some_and(|(x, y)| inside_rule(&x, &y, cfg)),
        "Left" | "Right" | "InFront" | "Behind" => gated().is_some_and(|(x, y)| {
            let d = sub(y.center(), x.center());
            match rule {
                "Left" => dot(d, cam.right()) > cfg.dead_band,
                "Right" => -dot(d, cam.right()) > cfg.dead_band,
                "InFront" => dot(d, cam.forward()) > cfg.dead_band,
                _ => -dot(d, cam.forward()) > cfg.dead_band,
            }
        }),
        "Hold" => hold_rule(view, args[0], args[1], cfg),
        "Free" => {
            b(0).is_some()
                && !view.items.iter().any(|o| o != args[0] && hold_rule(view, args[0], o, cfg))
        }
        "Clear" => {
            b(0).is_some()
                && !view
                    .items
                    .iter()
                    .filter(|o| *o != args[0])
                    .any(|o| view.boxes.get(o).is_some_and(|ob| on_rule(ob, b(0).unwrap(), cfg)))
        }
        "Empty" => {
            b(0).is_some()
                && !view
                    .items
                    .iter()
                    .filter(|o| *o != args[0])
                    .any(|o| view.boxes.get(o).is_some_and(|ob| inside_rule(ob, b(0).unwrap(), cfg)))
        }
        _ => unreachable!("arity table covers every rule"),
    })
}

/// Builds the robot's view: self objects from proprioception, others from
/// batch detection and reconstruction.
pub fn perceive<'a>(
    scene: &'a Scene,
    cam: &Camera,
    model: &mut DetectorModel,
    features: Features,
    batch: usize,
) -> View<'a> {
    let mut boxes = BTreeMap::new();
    let mut confidence = BTreeMap::new();
    for o in scene.objects.iter().filter(|o| o.is_self) {
        boxes.insert(o.id.clone(), o.aabb);
        confidence.insert(o.id.clone(), 1.0);
    }
    let mask = MaskConfig::default();
    for det in detect_batch(scene, cam, model, batch) {
        let id = scene.objects[det.object].id.clone();
        // A confused label names another object; the robot then believes it
        // saw that object here.
        let believed = if det.label == scene.objects[det.object].class {
            id.clone()
        } else {
            match scene.objects.iter().find(|o| o.class == det.label) {
                Some(o) => o.id.clone(),
                None => continue,
            }
        };
        if let Ok(p) = reconstruct(&det, scene, cam, model, features, &mask) {
            boxes.insert(believed.clone(), p.aabb);
            let c = confidence.entry(believed).or_insert(0.0);
            *c = f64::max(*c, det.confidence);
        }
    }
    View { boxes, confidence, attachments: &scene.attachments, camera: *cam, items: scene.objects.iter().map(|o| o.id.clone()).collect() }
}

// ---------------------------------------------------------------------------
// Vision queries over symbolic states

#[derive(Debug, Clone)]
pub struct VisionConfig {
    pub relations: RelationConfig,
    pub features: Features,
    pub batch: usize,
    /// Search budget: number of re-aim steps.
    pub tau: usize,
    /// Number of yaw sectors the search sweeps.
    pub sectors: usize,
}

impl Default for VisionConfig {
    fn default() -> Self {
        VisionConfig { relations: RelationConfig::default(), features: Features::FULL, batch: 10, tau: 8, sectors: 8 }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct VisionResult {
    pub holds: bool,
    pub boxes: BTreeMap<String, Aabb>,
    pub depths: BTreeMap<String, f64>,
    /// −1 on failure, otherwise the nearest depth among the queried terms
    /// (0 when none were needed).
    pub depth: f64,
    /// Camera after any search steps.
    pub camera: Camera,
    pub search_steps: usize,
}

impl VisionResult {
    fn failed(camera: Camera, steps: usize) -> VisionResult {
        VisionResult { holds: false, boxes: BTreeMap::new(), depths: BTreeMap::new(), depth: -1.0, camera, search_steps: steps }
    }
}

/// Maps a vocabulary predicate to its grounding rule name.
pub fn rule_for<'v>(vocab: &'v Vocabulary, predicate: &'v str) -> &'v str {
    vocab.predicate(predicate).map(|p| &*p.grounding).unwrap_or(predicate)
}

/// Verifies a conjunction against the scene: detect every term, searching
/// (re-aiming over shuffled yaw sectors) while some term is missing, then
/// ground every atom. The empty conjunction holds vacuously.
pub fn query_vision(
    s: &State,
    scene: &Scene,
    cam: &Camera,
    model: &mut DetectorModel,
    vocab: &Vocabulary,
    cfg: &VisionConfig,
) -> VisionResult {
    if s.is_empty() {
        return VisionResult { holds: true, boxes: BTreeMap::new(), depths: BTreeMap::new(), depth: 0.0, camera: *cam, search_steps: 0 };
    }
    let internal = scene.internal_state();
    let terms: BTreeSet<String> = s
        .iter()
        .filter(|a| rule_for(vocab, &a.predicate) != "internal")
        .flat_map(|a| a.args.iter().map(|x| x.to_string()))
        .filter(|t| !scene.object(t).is_some_and(|o| o.is_self))
        .collect();
    // first search step looks again where the camera points, then the
    // other sectors in seeded random order
    let mut order: Vec<usize> = (1..cfg.sectors.max(1)).collect();
    order.shuffle(model.rng());
    order.insert(0, 0);
    let base_yaw = cam.yaw;
    let mut camera = *cam;
    for step in 0..=cfg.tau {
        let view = perceive(scene, &camera, model, cfg.features, cfg.batch);
        let missing = terms.iter().any(|t| view.confidence.get(t).is_none_or(|c| *c <= cfg.relations.mu));
        if !missing {
            let mut holds = true;
            for atom in s {
                let rule = rule_for(vocab, &atom.predicate);
                let ok = if rule == "internal" {
                    internal.contains(&atom.timeless())
                } else {
                    let args: Vec<&str> = atom.args.iter().map(|a| &**a).collect();
                    ground_relation(rule, &args, &view, &cfg.relations).unwrap_or(false)
                };
                holds &= ok;
            }
            let boxes: BTreeMap<String, Aabb> =
                terms.iter().filter_map(|t| view.boxes.get(t).map(|b| (t.clone(), *b))).collect();
            let depths: BTreeMap<String, f64> =
                boxes.iter().map(|(t, b)| (t.clone(), camera.to_camera(b.center())[2].max(0.0))).collect();
            let depth = depths.values().cloned().fold(f64::INFINITY, f64::min);
            return VisionResult {
                holds,
                boxes,
                depths,
                depth: if depth.is_finite() { depth } else { 0.0 },
                camera,
                search_steps: step,
            };
        }
        if step == cfg.tau {
            break;
        }
        let sector = order[step % order.len()];
        let yaw = base_yaw + sector as f64 * std::f64::consts::TAU / order.len() as f64;
        camera = Camera { yaw, ..camera };
    }
    VisionResult::failed(camera, cfg.tau)
}

/// Ground truth of an atom in a scene, without camera gating except for
/// `Found`, which asks whether the object is in view.
pub fn ground_truth_atom(atom: &Atom, scene: &Scene, vocab: &Vocabulary, cfg: &RelationConfig) -> bool {
    let rule = rule_for(vocab, &atom.predicate);
    if rule == "internal" {
        return scene.internal_state().contains(&atom.timeless());
    }
    let view = View::truth(scene);
    let args: Vec<&str> = atom.args.iter().map(|a| &**a).collect();
    if rule == "Found" {
        return scene.object(args[0]).is_some();
    }
    ground_relation(rule, &args, &view, cfg).unwrap_or(false)
}

pub fn ground_truth_state(s: &State, scene: &Scene, vocab: &Vocabulary, cfg: &RelationConfig) -> bool {
    s.iter().all(|a| ground_truth_atom(a, scene, vocab, cfg))
}

// ---------------------------------------------------------------------------
// Overlap-heavy scene corpus for the grounding ablation

/// Random cluttered scene in front of a fixed camera: furniture with items
/// stacked on top, items nested in containers, a hand holding an item and
/// near-miss placements, many boxes overlapping in the image.
pub fn random_scene(rng: &mut ChaCha8Rng) -> Scene {
    let camera = Camera { pitch: -0.5, ..Camera::default() };
    let mut objects = Vec::new();
    let mut attachments = Vec::new();
    let mut id = 0usize;
    let mut next = |prefix: &str| {
        id += 1;
        format!("{prefix}{id}")
    };
    let n_furniture = rng.random_range(2..=3);
    let mut surfaces = Vec::new();
    for k in 0..n_furniture {
        let x = rng.random_range(1.3..2.0);
        let y = -0.6 + k as f64 * 0.6 + rng.random_range(-0.1..0.1);
        let size = [rng.random_range(0.4..0.8), rng.random_range(0.4..0.7), rng.random_range(0.5..0.9)];
        let b = Aabb::new([x - size[0] / 2.0, y - size[1] / 2.0, 0.0], [x + size[0] / 2.0, y + size[1] / 2.0, size[2]]);
        let name = next("surface");
        objects.push(SceneObject { id: name.clone(), class: name.clone(), aabb: b, supported_by: None, is_self: false });
        surfaces.push(b);
    }
    // items on (or just above) surfaces, some in front of others
    for (si, s) in surfaces.clone().iter().enumerate() {
        let n_items = rng.random_range(1..=3);
        for _ in 0..n_items {
            let size = [rng.random_range(0.08..0.25), rng.random_range(0.08..0.25), rng.random_range(0.06..0.3)];
            let cx = rng.random_range(s.min[0] - 0.05..s.max[0] + 0.05);
            let cy = rng.random_range(s.min[1] - 0.05..s.max[1] + 0.05);
            let gap = match rng.random_range(0..4) {
                0 => rng.random_range(0.03..0.12),
                _ => 0.0,
            };
            let z0 = s.max[2] + gap;
            let b = Aabb::new(
                [cx - size[0] / 2.0, cy - size[1] / 2.0, z0],
                [cx + size[0] / 2.0, cy + size[1] / 2.0, z0 + size[2]],
            );
            let name = next("item");
            let support = if gap == 0.0 { Some(objects[si].id.clone()) } else { None };
            objects.push(SceneObject { id: name.clone(), class: name, aabb: b, supported_by: support, is_self: false });
        }
    }
    // a container with an item inside, or partly outside
    {
        let cx = rng.random_range(1.0..1.4);
        let cy = rng.random_range(-0.5..0.5);
        let cb = Aabb::new([cx - 0.2, cy - 0.2, 0.0], [cx + 0.2, cy + 0.2, 0.3]);
        let cname = next("container");
        objects.push(SceneObject { id: cname.clone(), class: cname, aabb: cb, supported_by: None, is_self: false });
        let off = if rng.random_bool(0.6) { 0.0 } else { rng.random_range(0.1..0.25) };
        // pokes out of the top so the camera can see it
        let ib = Aabb::new([cx - 0.08 + off, cy - 0.08, 0.05], [cx + 0.08 + off, cy + 0.08, 0.32]);
        let iname = next("item");
        objects.push(SceneObject { id: iname.clone(), class: iname, aabb: ib, supported_by: None, is_self: false });
    }
    // a hand, sometimes holding an item
    {
        let hx = rng.random_range(0.9..1.3);
        let hy = rng.random_range(-0.4..0.4);
        let hb = Aabb::from_center([hx, hy, 1.0], [0.12, 0.1, 0.1]);
        let hname = next("hand");
        objects.push(SceneObject { id: hname.clone(), class: hname.clone(), aabb: hb, supported_by: None, is_self: false });
        let held = rng.random_bool(0.5);
        let off = if held { 0.0 } else { rng.random_range(0.12..0.3) };
        let ob = Aabb::from_center([hx, hy + off, 1.0 - 0.02], [0.06, 0.06, 0.18]);
        let oname = next("item");
        objects.push(SceneObject { id: oname.clone(), class: oname.clone(), aabb: ob, supported_by: None, is_self: false });
        if held && rng.random_bool(0.5) {
            attachments.push(Attachment { hand: hname, object: oname });
        }
    }
    Scene { frame: 0, camera, objects, attachments, internal: Vec::new() }
}

/// Argument tuples of a relation over a scene's visible objects, by the
/// corpus naming scheme (surface*, item*, container*, hand*).
pub fn relation_candidates(scene: &Scene, rule: &str) -> Vec<Vec<String>> {
    let vis: Vec<&SceneObject> = visible_objects(scene, &scene.camera).into_iter().map(|i| &scene.objects[i]).collect();
    let of = |p: &str| -> Vec<String> { vis.iter().filter(|o| o.id.starts_with(p)).map(|o| o.id.clone()).collect() };
    let all: Vec<String> = vis.iter().map(|o| o.id.clone()).collect();
    let items = of("item");
    let mut supports = of("surface");
    supports.extend(of("container"));
    let pairs = |a: &[String], b: &[String]| -> Vec<Vec<String>> {
        a.iter().flat_map(|x| b.iter().filter(move |y| *y != x).map(move |y| vec![x.clone(), y.clone()])).collect()
    };
    match rule {
        "Found" => all.iter().map(|x| vec![x.clone()]).collect(),
        "Free" => of("hand").into_iter().map(|x| vec![x]).collect(),
        "Clear" => of("surface").into_iter().map(|x| vec![x]).collect(),
        "Empty" => of("container").into_iter().map(|x| vec![x]).collect(),
        "Hold" => pairs(&of("hand"), &items),
        "Inside" => pairs(&items, &of("container")),
        "On" => pairs(&items, &supports),
        "Under" => pairs(&supports, &items),
        _ => pairs(&all, &all),
    }
}

/// Per-relation confusion counts of perceived against true grounding.
#[derive(Debug, Clone, Default, PartialEq, Serialize)]
pub struct GroundingScore {
    pub per_relation: BTreeMap<String, [usize; 4]>,
}

impl GroundingScore {
    /// Counts are `[tp, fn, tn, fp]`.
    fn record(&mut self, rule: &str, truth: bool, guess: bool) {
        let c = self.per_relation.entry(rule.to_string()).or_default();
        let slot = match (truth, guess) {
            (true, true) => 0,
            (true, false) => 1,
            (false, false) => 2,
            (false, true) => 3,
        };
        c[slot] += 1;
    }

    /// Balanced accuracy of one relation (mean of the rates on the classes
    /// that occur).
    pub fn balanced(&self, rule: &str) -> Option<f64> {
        let c = self.per_relation.get(rule)?;
        let mut rates = Vec::new();
        if c[0] + c[1] > 0 {
            rates.push(c[0] as f64 / (c[0] + c[1]) as f64);
        }
        if c[2] + c[3] > 0 {
            rates.push(c[2] as f64 / (c[2] + c[3]) as f64);
        }
        (!rates.is_empty()).then(|| rates.iter().sum::<f64>() / rates.len() as f64)
    }

    /// Macro average of the per-relation balanced accuracies.
    pub fn mean(&self) -> f64 {
        let v: Vec<f64> = self.per_relation.keys().filter_map(|r| self.balanced(r)).collect();
        if v.is_empty() {
            0.0
        } else {
            v.iter().sum::<f64>() / v.len() as f64
        }
    }

    pub fn merge(&mut self, other: &GroundingScore) {
        for (k, v) in &other.per_relation {
            let c = self.per_relation.entry(k.clone()).or_default();
            for i in 0..4 {
                c[i] += v[i];
            }
        }
    }
}

/// Noise used for the grounding ablation corpus.
pub fn corpus_noise() -> NoiseProfile {
    NoiseProfile { tp_rate: 0.95, confusion: 0.05, bbox_jitter: 3.0, depth_sigma: 0.02, fg_noise: 0.1, ..Default::default() }
}

/// Grounds every relation over every candidate tuple of one scene, from
/// perception with the given cues, and scores it against ground truth.
pub fn score_scene(scene: &Scene, model: &mut DetectorModel, features: Features, cfg: &RelationConfig, batch: usize) -> GroundingScore {
    let truth = View::truth(scene);
    let seen = perceive(scene, &scene.camera, model, features, batch);
    let mut score = GroundingScore::default();
    for rule in RELATIONS {
        for args in relation_candidates(scene, rule) {
            let a: Vec<&str> = args.iter().map(String::as_str).collect();
            let t = ground_relation(rule, &a, &truth, cfg).expect("known relation");
            let g = ground_relation(rule, &a, &seen, cfg).expect("known relation");
            score.record(rule, t, g);
        }
    }
    score
}

/// Mean grounding accuracy over `n` seeded corpus scenes.
pub fn ablation_accuracy(n: usize, seed: u64, features: Features, noise: &NoiseProfile, batch: usize) -> GroundingScore {
    let cfg = RelationConfig::default();
    let mut total = GroundingScore::default();
    for i in 0..n as u64 {
        let mut rng = ChaCha8Rng::seed_from_u64(seed.wrapping_mul(0x9E37_79B9).wrapping_add(i));
        let scene = random_scene(&mut rng);
        let mut model = DetectorModel::new(noise.clone(), seed ^ (i << 20));
        total.merge(&score_scene(&scene, &mut model, features, &cfg, batch));
    }
    total
}
