//! Procedural two-domain toy benchmark.
//!
//! A scene is a table with a few flat objects on it, seen through an affine
//! camera parameterized by azimuth, elevation and distance. The same scene can
//! be rendered flat-shaded (domain A, with an exact segmentation map) or
//! textured with lighting and sensor noise (domain B). Content is identical
//! across the two styles; only appearance differs.

use std::f64::consts::PI;
use std::fs;
use std::fmt;
use std::path::{Path, PathBuf};
use std::str::FromStr;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::image::{Image, ImageError, SegmentationMap};

#[derive(Debug, Error)]
pub enum SynthError {
    #[error("n_images must be positive")]
    NoImages,
    #[error("image size must be at least 16, got {0}")]
    TooSmall(usize),
    #[error("num_classes must be in 1..=256, got {0}")]
    Classes(usize),
    #[error("malformed view range `{0}`: expected AZ,EL,DIST with each entry `v` or `lo:hi`")]
    ViewRange(String),
    #[error("cannot write {path}: {source}")]
    Io {
        path: String,
        #[source]
        source: std::io::Error,
    },
    #[error(transparent)]
    Image(#[from] ImageError),
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub enum Style {
    #[serde(rename = "sim")]
    SimFlat,
    #[serde(rename = "real")]
    RealTextured,
}

impl FromStr for Style {
    type Err = String;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        match s {
            "sim" => Ok(Style::SimFlat),
            "real" => Ok(Style::RealTextured),
            _ => Err(format!("unknown style `{s}` (expected sim or real)")),
        }
    }
}

impl fmt::Display for Style {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            Style::SimFlat => "sim",
            Style::RealTextured => "real",
        })
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub enum ShapeKind {
    Rectangle,
    Ellipse,
    Triangle,
}

/// A flat shape lying on the ground plane, optionally raised by `height`.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SceneObject {
    pub kind: ShapeKind,
    /// Ground-plane center.
    pub center: [f64; 2],
    /// Half extents along the object's local axes.
    pub half_size: [f64; 2],
    /// In-plane rotation, radians.
    pub rotation: f64,
    pub height: f64,
    pub class_id: u8,
}

impl SceneObject {
    fn contains(&self, gx: f64, gy: f64) -> bool {
        let (dx, dy) = (gx - self.center[0], gy - self.center[1]);
        let (s, c) = self.rotation.sin_cos();
        let lx = (c * dx + s * dy) / self.half_size[0];
        let ly = (-s * dx + c * dy) / self.half_size[1];
        match self.kind {
            ShapeKind::Rectangle => lx.abs() <= 1.0 && ly.abs() <= 1.0,
            ShapeKind::Ellipse => lx * lx + ly * ly <= 1.0,
            // apex at ly = -1, base at ly = 1
            ShapeKind::Triangle => (-1.0..=1.0).contains(&ly) && lx.abs() <= (ly + 1.0) / 2.0,
        }
    }

    fn local(&self, gx: f64, gy: f64) -> (f64, f64) {
        let (dx, dy) = (gx - self.center[0], gy - self.center[1]);
        let (s, c) = self.rotation.sin_cos();
        (c * dx + s * dy, -s * dx + c * dy)
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct Viewpoint {
    /// Degrees.
    pub azimuth: f64,
    /// Degrees above the ground plane; must lie in (0, 90].
    pub elevation: f64,
    pub distance: f64,
}

impl Viewpoint {
    pub const CANONICAL: Viewpoint = Viewpoint { azimuth: 0.0, elevation: 60.0, distance: 1.2 };

    /// Ground-plane point seen at normalized image coordinates `(u, v)` for a
    /// surface raised by `height`.
    fn unproject(&self, u: f64, v: f64, height: f64) -> (f64, f64) {
        let (sa, ca) = (self.azimuth * PI / 180.0).sin_cos();
        let (se, ce) = (self.elevation * PI / 180.0).sin_cos();
        let xr = u * self.distance;
        let yr = (v * self.distance + height * ce) / se;
        (ca * xr + sa * yr, -sa * xr + ca * yr)
    }
}

/// Inclusive sampling box over viewpoints.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct ViewRange {
    pub azimuth: (f64, f64),
    pub elevation: (f64, f64),
    pub distance: (f64, f64),
}

impl ViewRange {
    pub fn point(v: Viewpoint) -> Self {
        ViewRange {
            azimuth: (v.azimuth, v.azimuth),
            elevation: (v.elevation, v.elevation),
            distance: (v.distance, v.distance),
        }
    }

    pub fn sample(&self, rng: &mut impl Rng) -> Viewpoint {
        let draw = |rng: &mut dyn rand::RngCore, (lo, hi): (f64, f64)| {
            if lo == hi {
                lo
            } else {
                rng.random_range(lo..=hi)
            }
        };
        Viewpoint {
            azimuth: draw(rng, self.azimuth),
            elevation: draw(rng, self.elevation),
            distance: draw(rng, self.distance),
        }
    }
}

impl Default for ViewRange {
    fn default() -> Self {
        ViewRange { azimuth: (-45.0, 45.0), elevation: (40.0, 80.0), distance: (1.0, 1.5) }
    }
}

impl FromStr for ViewRange {
    type Err = SynthError;

    /// `AZ,EL,DIST`, each either a value or `lo:hi`.
    fn from_str(s: &str) -> Result<Self, Self::Err> {
        let bad = || SynthError::ViewRange(s.to_string());
        let parts: Vec<&str> = s.split(',').map(str::trim).collect();
        if parts.len() != 3 {
            return Err(bad());
        }
        let mut ranges = [(0.0, 0.0); 3];
        for (slot, p) in ranges.iter_mut().zip(&parts) {
            let (lo, hi) = match p.split_once(':') {
                Some((a, b)) => (a.parse::<f64>(), b.parse::<f64>()),
                None => (p.parse::<f64>(), p.parse::<f64>()),
            };
            let (lo, hi) = (lo.map_err(|_| bad())?, hi.map_err(|_| bad())?);
            if !(lo.is_finite() && hi.is_finite() && lo <= hi) {
                return Err(bad());
            }
            *slot = (lo, hi);
        }
        let range = ViewRange { azimuth: ranges[0], elevation: ranges[1], distance: ranges[2] };
        if range.elevation.0 <= 0.0 || range.elevation.1 > 90.0 || range.distance.0 <= 0.0 {
            return Err(bad());
        }
        Ok(range)
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SceneSpec {
    /// Painted in order: later objects cover earlier ones. Background is class 0.
    pub objects: Vec<SceneObject>,
    pub viewpoint: Viewpoint,
    pub style: Style,
    /// Seeds the per-class textures and lighting direction (textured style).
    pub texture_seed: u64,
    /// Seeds the pixel noise (textured style).
    pub noise_seed: u64,
}

const NOISE_SIGMA: f64 = 0.02;

struct Appearance {
    base: [f64; 3],
    freq: [f64; 2],
    phase: f64,
    amplitude: f64,
}

fn hsv(h: f64, s: f64, v: f64) -> [f64; 3] {
    let h6 = (h.rem_euclid(1.0)) * 6.0;
    let c = v * s;
    let x = c * (1.0 - (h6 % 2.0 - 1.0).abs());
    let (r, g, b) = match h6 as usize {
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

/// Flat-style color of a class, RGB in `[0, 1]`.
pub fn sim_color(class: u8) -> [f64; 3] {
    match class {
        0 => [0.20, 0.22, 0.28],
        1 => [0.78, 0.78, 0.76],
        2 => [0.85, 0.15, 0.15],
        3 => [0.15, 0.35, 0.85],
        k => hsv(k as f64 * 0.618_034, 0.7, 0.85),
    }
}

fn real_color(class: u8) -> [f64; 3] {
    match class {
        0 => [0.58, 0.53, 0.45],
        1 => [0.46, 0.31, 0.19],
        2 => [0.68, 0.08, 0.12],
        3 => [0.18, 0.48, 0.42],
        k => hsv(k as f64 * 0.618_034 + 0.08, 0.55, 0.65),
    }
}

fn appearance(texture_seed: u64, class: u8) -> Appearance {
    let mut rng = ChaCha8Rng::seed_from_u64(texture_seed);
    rng.set_stream(1 + class as u64);
    Appearance {
        base: real_color(class),
        freq: [rng.random_range(3.0..10.0), rng.random_range(3.0..10.0)],
        phase: rng.random_range(0.0..2.0 * PI),
        amplitude: rng.random_range(0.08..0.18),
    }
}

fn lighting(texture_seed: u64) -> (f64, f64) {
    let mut rng = ChaCha8Rng::seed_from_u64(texture_seed);
    rng.set_stream(0);
    let angle: f64 = rng.random_range(0.0..2.0 * PI);
    (angle.cos(), angle.sin())
}

/// Rasterize `spec` at `size x size`. Labels follow painter's order.
pub fn render_scene(spec: &SceneSpec, size: usize) -> Result<(Image, SegmentationMap), SynthError> {
    if size < 16 {
        return Err(SynthError::TooSmall(size));
    }
    let mut seg = SegmentationMap::filled(size, size, 0);
    // Per pixel: index of the covering object, if any.
    let mut owner: Vec<Option<usize>> = vec![None; size * size];
    for r in 0..size {
        let v = (r as f64 + 0.5) / size as f64 * 2.0 - 1.0;
        for c in 0..size {
            let u = (c as f64 + 0.5) / size as f64 * 2.0 - 1.0;
            for (k, obj) in spec.objects.iter().enumerate().rev() {
                let (gx, gy) = spec.viewpoint.unproject(u, v, obj.height);
                if obj.contains(gx, gy) {
                    owner[r * size + c] = Some(k);
                    seg.set(r, c, obj.class_id);
                    break;
                }
            }
        }
    }

    let mut img = Image::filled(size, size, [0.0; 3]);
    match spec.style {
        Style::SimFlat => {
            for r in 0..size {
                for c in 0..size {
                    let rgb = sim_color(seg.get(r, c));
                    img.set_pixel(r, c, rgb.map(|x| (x * 2.0 - 1.0) as f32));
                }
            }
        }
        Style::RealTextured => {
            let max_class = spec.objects.iter().map(|o| o.class_id).max().unwrap_or(0);
            let looks: Vec<Appearance> =
                (0..=max_class).map(|k| appearance(spec.texture_seed, k)).collect();
            let light = lighting(spec.texture_seed);
            let mut noise_rng = ChaCha8Rng::seed_from_u64(spec.noise_seed);
            let noise = Normal::new(0.0, NOISE_SIGMA).expect("valid sigma");
            for r in 0..size {
                let v = (r as f64 + 0.5) / size as f64 * 2.0 - 1.0;
                for c in 0..size {
                    let u = (c as f64 + 0.5) / size as f64 * 2.0 - 1.0;
                    let (look, (tx, ty)) = match owner[r * size + c] {
                        Some(k) => {
                            let obj = &spec.objects[k];
                            let (gx, gy) = spec.viewpoint.unproject(u, v, obj.height);
                            (&looks[obj.class_id as usize], obj.local(gx, gy))
                        }
                        None => (&looks[0], (u, v)),
                    };
                    let texture = 1.0
                        + look.amplitude
                            * (look.freq[0] * tx * PI + look.phase).sin()
                            * (look.freq[1] * ty * PI).cos();
                    let shade = 1.0 + 0.25 * (light.0 * u + light.1 * v);
                    let mut rgb = [0.0f32; 3];
                    for (ch, out) in rgb.iter_mut().enumerate() {
                        let lin = look.base[ch] * texture * shade;
                        let val = lin * 2.0 - 1.0 + noise.sample(&mut noise_rng);
                        *out = val.clamp(-1.0, 1.0) as f32;
                    }
                    img.set_pixel(r, c, rgb);
                }
            }
        }
    }
    Ok((img, seg))
}

/// Random table-top scene. The table is class 1; objects use classes
/// `2..num_classes` (or 1 when fewer classes exist).
pub fn random_scene(rng: &mut impl Rng, num_classes: usize, viewpoint: Viewpoint, style: Style) -> SceneSpec {
    let mut objects = Vec::new();
    if num_classes >= 2 {
        objects.push(SceneObject {
            kind: ShapeKind::Rectangle,
            center: [0.0, 0.0],
            half_size: [0.9, 0.7],
            rotation: 0.0,
            height: 0.0,
            class_id: 1,
        });
        let n_objects = rng.random_range(1..=3);
        for _ in 0..n_objects {
            let class_id = if num_classes > 2 { rng.random_range(2..num_classes) as u8 } else { 1 };
            let kind = match rng.random_range(0..3) {
                0 => ShapeKind::Rectangle,
                1 => ShapeKind::Ellipse,
                _ => ShapeKind::Triangle,
            };
            objects.push(SceneObject {
                kind,
                center: [rng.random_range(-0.6..0.6), rng.random_range(-0.45..0.45)],
                half_size: [rng.random_range(0.1..0.25), rng.random_range(0.1..0.25)],
                rotation: rng.random_range(0.0..PI),
                height: rng.random_range(0.0..0.15),
                class_id,
            });
        }
    }
    SceneSpec { objects, viewpoint, style, texture_seed: 0, noise_seed: 0 }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ManifestEntry {
    /// Relative to the dataset root.
    pub image: String,
    pub segmentation: Option<String>,
    pub viewpoint: Viewpoint,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Manifest {
    pub style: Style,
    pub image_size: usize,
    pub num_classes: usize,
    pub seed: u64,
    pub view_range: ViewRange,
    pub entries: Vec<ManifestEntry>,
}

impl Manifest {
    pub const FILE: &'static str = "manifest.json";

    pub fn load(root: &Path) -> std::io::Result<Manifest> {
        let text = fs::read_to_string(root.join(Self::FILE))?;
        serde_json::from_str(&text).map_err(std::io::Error::other)
    }
}

#[derive(Clone, Debug)]
pub struct DomainSpec {
    pub n_images: usize,
    pub style: Style,
    pub view_range: ViewRange,
    pub seed: u64,
    pub image_size: usize,
    pub num_classes: usize,
}

fn io_err(path: &Path) -> impl FnOnce(std::io::Error) -> SynthError + '_ {
    move |source| SynthError::Io { path: path.display().to_string(), source }
}

/// Scene `index` of a dataset with `seed`; independent of the style, so two
/// calls differing only in style yield pixel-aligned pairs.
pub fn dataset_scene(spec: &DomainSpec, index: usize) -> SceneSpec {
    let mut rng = ChaCha8Rng::seed_from_u64(spec.seed);
    rng.set_stream(index as u64);
    let view = spec.view_range.sample(&mut rng);
    let mut scene = random_scene(&mut rng, spec.num_classes, view, spec.style);
    scene.texture_seed = spec.seed;
    scene.noise_seed = spec.seed ^ (index as u64).wrapping_mul(0x9E37_79B9_7F4A_7C15).wrapping_add(1);
    scene
}

/// Render a whole domain into `out_dir` using the dataset layout
/// (`images/`, `segs/` for the flat style, `manifest.json`).
pub fn generate_domain(out_dir: &Path, spec: &DomainSpec) -> Result<Manifest, SynthError> {
    if spec.n_images == 0 {
        return Err(SynthError::NoImages);
    }
    if spec.image_size < 16 {
        return Err(SynthError::TooSmall(spec.image_size));
    }
    if !(1..=256).contains(&spec.num_classes) {
        return Err(SynthError::Classes(spec.num_classes));
    }
    let images_dir = out_dir.join("images");
    fs::create_dir_all(&images_dir).map_err(io_err(&images_dir))?;
    let segs_dir = out_dir.join("segs");
    let with_segs = spec.style == Style::SimFlat;
    if with_segs {
        fs::create_dir_all(&segs_dir).map_err(io_err(&segs_dir))?;
    }
    let mut entries = Vec::with_capacity(spec.n_images);
    for i in 0..spec.n_images {
        let scene = dataset_scene(spec, i);
        let (img, seg) = render_scene(&scene, spec.image_size)?;
        let name = format!("{i:05}.png");
        img.save_png(&images_dir.join(&name))?;
        let segmentation = if with_segs {
            seg.save_png(&segs_dir.join(&name))?;
            Some(format!("segs/{name}"))
        } else {
            None
        };
        entries.push(ManifestEntry { image: format!("images/{name}"), segmentation, viewpoint: scene.viewpoint });
    }
    let manifest = Manifest {
        style: spec.style,
        image_size: spec.image_size,
        num_classes: spec.num_classes,
        seed: spec.seed,
        view_range: spec.view_range,
        entries,
    };
    let path: PathBuf = out_dir.join(Manifest::FILE);
    let text = serde_json::to_string_pretty(&manifest).expect("manifest serializes");
    fs::write(&path, text + "\n").map_err(io_err(&path))?;
    Ok(manifest)
}
