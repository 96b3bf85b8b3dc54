//! Procedural synthetic scenes with an analytic ground-truth renderer, plus
//! dataset serialization in the transforms-JSON layout.
//!
//! The oracle renderer is the dataset authority: ray-primitive intersection
//! with Lambertian shading, supersampled 4x4 per pixel and box-filtered, so
//! alias-free ground truth exists at any resolution. Textures carry energy
//! up to roughly the LR Nyquist rate and beyond, which is what gives x4
//! super-resolution real detail to recover.

use std::fs;
use std::path::{Path, PathBuf};

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::camera::{look_at, Camera, Ray};
use crate::img::Image;
use crate::vec3::{self, Vec3};
use crate::{Error, Result};

/// Seeded RNG used across the crate for reproducible runs.
pub fn rng_from_seed(seed: u64) -> ChaCha8Rng {
    ChaCha8Rng::seed_from_u64(seed)
}

/// Horizontal field of view shared by every generated camera.
pub const CAMERA_ANGLE_X: f64 = 0.9;
/// Scene bounding box half extent; primitives stay within +-1.
pub const BBOX_HALF: f64 = 1.25;
/// Supersampling factor per axis in the oracle renderer.
const OVERSAMPLE: usize = 4;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TextureParams {
    pub palette: [[f64; 3]; 3],
    /// Two scalar fields, each a sum of (direction, frequency, phase, amp).
    pub waves: Vec<([f64; 3], f64, f64, f64)>,
}

impl TextureParams {
    fn sample_fields(&self, p: Vec3) -> (f64, f64) {
        let half = self.waves.len() / 2;
        let mut t = [0.0; 2];
        for (i, (dir, freq, phase, amp)) in self.waves.iter().enumerate() {
            let x = vec3::dot(*dir, p) * freq + phase;
            t[(i >= half) as usize] += amp * x.sin();
        }
        (t[0], t[1])
    }

    /// Albedo at a 3D point, deterministic in (params, position).
    pub fn albedo(&self, p: Vec3) -> [f64; 3] {
        let (t1, t2) = self.sample_fields(p);
        let s1 = 0.5 * (1.0 + t1.tanh());
        let s2 = 0.5 * (1.0 + t2.tanh());
        let [c0, c1, c2] = self.palette;
        let base = vec3::lerp(c0, c1, s1);
        let mixed = vec3::lerp(base, c2, 0.5 * s2);
        [mixed[0].clamp(0.0, 1.0), mixed[1].clamp(0.0, 1.0), mixed[2].clamp(0.0, 1.0)]
    }
}

fn random_texture(rng: &mut ChaCha8Rng) -> TextureParams {
    let mut palette = [[0.0; 3]; 3];
    for color in palette.iter_mut() {
        for ch in color.iter_mut() {
            *ch = rng.random_range(0.05..0.95);
        }
    }
    // Frequencies span coarse structure through sub-LR-pixel detail
    // (~17 px per world unit at LR 64, so 110 rad/unit is ~1 cycle per LR
    // pixel at the default camera distance).
    let mut waves = Vec::new();
    for field in 0..2 {
        for _ in 0..5 {
            let dir = random_unit(rng);
            let freq = if field == 0 {
                (rng.random_range(1.8_f64..5.4)).exp() // ~6..220 rad/unit
            } else {
                (rng.random_range(1.0_f64..4.8)).exp()
            };
            let phase = rng.random_range(0.0..std::f64::consts::TAU);
            let amp = rng.random_range(0.5..1.2);
            waves.push((dir, freq, phase, amp));
        }
    }
    TextureParams { palette, waves }
}

fn random_unit(rng: &mut ChaCha8Rng) -> Vec3 {
    loop {
        let v = [
            rng.random_range(-1.0..1.0),
            rng.random_range(-1.0..1.0),
            rng.random_range(-1.0..1.0),
        ];
        let n = vec3::norm(v);
        if n > 1e-3 && n <= 1.0 {
            return vec3::scale(v, 1.0 / n);
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub enum Primitive {
    Sphere { center: Vec3, radius: f64, tex: TextureParams },
    Cuboid { center: Vec3, half: Vec3, tex: TextureParams },
}

impl Primitive {
    pub fn max_extent_point(&self) -> f64 {
        match self {
            Primitive::Sphere { center, radius, .. } => {
                center.iter().map(|c| c.abs()).fold(0.0, f64::max) + radius
            }
            Primitive::Cuboid { center, half, .. } => {
                center.iter().zip(half).map(|(c, h)| c.abs() + h).fold(0.0, f64::max)
            }
        }
    }

    fn tex(&self) -> &TextureParams {
        match self {
            Primitive::Sphere { tex, .. } => tex,
            Primitive::Cuboid { tex, .. } => tex,
        }
    }
}

/// Ambient plus one directional light, Lambertian shading, white background.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SceneSpec {
    pub seed: u64,
    pub primitives: Vec<Primitive>,
    pub bbox_min: Vec3,
    pub bbox_max: Vec3,
    pub light_dir: Vec3,
    pub ambient: f64,
    pub diffuse: f64,
}

/// 2-5 textured primitives, deterministic per seed.
pub fn generate_scene(seed: u64) -> SceneSpec {
    let mut rng = rng_from_seed(seed.wrapping_mul(0x9e37_79b9_7f4a_7c15).wrapping_add(seed));
    let n = rng.random_range(2..=5usize);
    let mut primitives = Vec::with_capacity(n);
    for _ in 0..n {
        let tex = random_texture(&mut rng);
        let size = rng.random_range(0.28..0.55);
        let center = [
            rng.random_range(-(0.95 - size)..(0.95 - size)),
            rng.random_range(-(0.95 - size)..(0.95 - size)),
            rng.random_range(-(0.95 - size)..(0.95 - size)),
        ];
        if rng.random_bool(0.5) {
            primitives.push(Primitive::Sphere { center, radius: size, tex });
        } else {
            let half = [
                size * rng.random_range(0.6..1.0),
                size * rng.random_range(0.6..1.0),
                size * rng.random_range(0.6..1.0),
            ];
            primitives.push(Primitive::Cuboid { center, half, tex });
        }
    }
    let mut l = random_unit(&mut rng);
    l[2] = l[2].abs().max(0.3); // light from above
    let light_dir = vec3::normalize(l);
    SceneSpec {
        seed,
        primitives,
        bbox_min: [-BBOX_HALF; 3],
        bbox_max: [BBOX_HALF; 3],
        light_dir,
        ambient: 0.35,
        diffuse: 0.65,
    }
}

pub struct Hit {
    pub t: f64,
    pub point: Vec3,
    pub normal: Vec3,
    pub prim: usize,
}

fn hit_sphere(ray: &Ray, center: Vec3, radius: f64) -> Option<f64> {
    let oc = vec3::sub(ray.origin, center);
    let b = vec3::dot(oc, ray.dir);
    let c = vec3::dot(oc, oc) - radius * radius;
    let disc = b * b - c;
    if disc < 0.0 {
        return None;
    }
    let sq = disc.sqrt();
    let t0 = -b - sq;
    if t0 > 1e-6 {
        return Some(t0);
    }
    let t1 = -b + sq;
    if t1 > 1e-6 {
        return Some(t1);
    }
    None
}

fn hit_cuboid(ray: &Ray, center: Vec3, half: Vec3) -> Option<(f64, Vec3)> {
    let mut t0 = f64::NEG_INFINITY;
    let mut t1 = f64::INFINITY;
    let mut axis = 0;
    for a in 0..3 {
        let lo = center[a] - half[a];
        let hi = center[a] + half[a];
        if ray.dir[a].abs() < 1e-12 {
            if ray.origin[a] < lo || ray.origin[a] > hi {
                return None;
            }
            continue;
        }
        let inv = 1.0 / ray.dir[a];
        let mut ta = (lo - ray.origin[a]) * inv;
        let mut tb = (hi - ray.origin[a]) * inv;
        if ta > tb {
            std::mem::swap(&mut ta, &mut tb);
        }
        if ta > t0 {
            t0 = ta;
            axis = a;
        }
        t1 = t1.min(tb);
    }
    if t0 > t1 || t1 <= 1e-6 {
        return None;
    }
    if t0 > 1e-6 {
        let mut n = [0.0; 3];
        n[axis] = -ray.dir[axis].signum();
        Some((t0, n))
    } else {
        // origin inside the box; exit face
        let mut n = [0.0; 3];
        n[axis] = ray.dir[axis].signum();
        Some((t1, n))
    }
}

/// Closest intersection along the ray, if any.
pub fn intersect(spec: &SceneSpec, ray: &Ray) -> Option<Hit> {
    let mut best: Option<Hit> = None;
    for (i, prim) in spec.primitives.iter().enumerate() {
        let cand = match prim {
            Primitive::Sphere { center, radius, .. } => hit_sphere(ray, *center, *radius).map(|t| {
                let p = ray.point_at(t);
                let n = vec3::normalize(vec3::sub(p, *center));
                Hit { t, point: p, normal: n, prim: i }
            }),
            Primitive::Cuboid { center, half, .. } => {
                hit_cuboid(ray, *center, *half).map(|(t, n)| Hit {
                    t,
                    point: ray.point_at(t),
                    normal: n,
                    prim: i,
                })
            }
        };
        if let Some(h) = cand {
            if best.as_ref().map_or(true, |b| h.t < b.t) {
                best = Some(h);
            }
        }
    }
    best
}

/// Lambertian shade of a hit point.
pub fn shade(spec: &SceneSpec, hit: &Hit) -> [f64; 3] {
    let albedo = spec.primitives[hit.prim].tex().albedo(hit.point);
    let ndl = vec3::dot(hit.normal, spec.light_dir).max(0.0);
    let k = spec.ambient + spec.diffuse * ndl;
    [
        (albedo[0] * k).clamp(0.0, 1.0),
        (albedo[1] * k).clamp(0.0, 1.0),
        (albedo[2] * k).clamp(0.0, 1.0),
    ]
}

fn shade_ray(spec: &SceneSpec, ray: &Ray) -> [f64; 3] {
    match intersect(spec, ray) {
        Some(h) => shade(spec, &h),
        None => [1.0, 1.0, 1.0],
    }
}

/// Analytic render: 4x4 subrays per pixel, box-filtered. Bit-identical for
/// identical (spec, camera).
pub fn oracle_render(spec: &SceneSpec, camera: &Camera) -> Image {
    let w = camera.width;
    let h = camera.height;
    let inv = 1.0 / (OVERSAMPLE * OVERSAMPLE) as f64;
    let rows: Vec<Vec<f64>> = (0..h)
        .into_par_iter()
        .map(|v| {
            let mut row = Vec::with_capacity(w * 3);
            for u in 0..w {
                let mut acc = [0.0; 3];
                for sv in 0..OVERSAMPLE {
                    for su in 0..OVERSAMPLE {
                        let fu = u as f64 + (su as f64 + 0.5) / OVERSAMPLE as f64;
                        let fv = v as f64 + (sv as f64 + 0.5) / OVERSAMPLE as f64;
                        let ray = camera.ray_at(fu, fv);
                        let c = shade_ray(spec, &ray);
                        for k in 0..3 {
                            acc[k] += c[k];
                        }
                    }
                }
                row.extend_from_slice(&[acc[0] * inv, acc[1] * inv, acc[2] * inv]);
            }
            row
        })
        .collect();
    let mut data = Vec::with_capacity(w * h * 3);
    for row in rows {
        data.extend(row);
    }
    Image { width: w, height: h, data }
}

/// Cameras on the upper hemisphere at 3x the bbox half extent, looking at
/// the origin, z-up.
pub fn hemisphere_cameras(
    seed: u64,
    count: usize,
    width: usize,
    height: usize,
    bbox_half: f64,
) -> Vec<Camera> {
    let mut rng = rng_from_seed(seed ^ 0xc0ff_ee00_dead_beef);
    let radius = 3.0 * bbox_half;
    let focal = focal_from_angle(width, CAMERA_ANGLE_X);
    let half_diag = bbox_half * 3f64.sqrt();
    let near = (radius - 1.2 * half_diag).max(0.05);
    let far = radius + 1.2 * half_diag;
    (0..count)
        .map(|_| {
            let az = rng.random_range(0.0..std::f64::consts::TAU);
            let el: f64 = rng.random_range(0.25..1.0);
            let eye = [
                radius * az.cos() * el.cos(),
                radius * az.sin() * el.cos(),
                radius * el.sin(),
            ];
            let c2w = look_at(eye, [0.0; 3], [0.0, 0.0, 1.0]);
            Camera::new(width, height, focal, c2w, near, far).expect("generated camera is valid")
        })
        .collect()
}

/// focal = 0.5 W / tan(0.5 angle_x)
pub fn focal_from_angle(width: usize, angle_x: f64) -> f64 {
    0.5 * width as f64 / (0.5 * angle_x).tan()
}

// ---------------------------------------------------------------------------
// Dataset on disk
// ---------------------------------------------------------------------------

#[derive(Debug, Serialize, Deserialize)]
struct TransformsJson {
    camera_angle_x: f64,
    frames: Vec<FrameJson>,
}

#[derive(Debug, Serialize, Deserialize)]
struct FrameJson {
    file_path: String,
    transform_matrix: [[f64; 4]; 4],
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct DatasetMeta {
    pub seed: u64,
    pub bbox_min: Vec3,
    pub bbox_max: Vec3,
    pub hr_size: usize,
    pub factor: usize,
    pub n_train: usize,
    pub n_test: usize,
}

/// One posed view: the supervision unit.
#[derive(Debug, Clone)]
pub struct CameraView {
    pub camera: Camera,
    pub image: Image,
}

#[derive(Debug)]
pub struct Dataset {
    pub meta: DatasetMeta,
    pub hr_train: Vec<CameraView>,
    pub lr_train: Vec<CameraView>,
    pub hr_test: Vec<CameraView>,
}

fn c2w_to_4x4(c2w: &[[f64; 4]; 3]) -> [[f64; 4]; 4] {
    [c2w[0], c2w[1], c2w[2], [0.0, 0.0, 0.0, 1.0]]
}

fn c2w_from_4x4(m: &[[f64; 4]; 4]) -> [[f64; 4]; 3] {
    [m[0], m[1], m[2]]
}

/// Render and write a dataset: HR train/test PNGs, LR train PNGs produced by
/// exact box-filter area downsampling of the HR float renders, transforms
/// files, and `meta.json`.
pub fn emit_dataset(
    spec: &SceneSpec,
    out_dir: impl AsRef<Path>,
    n_train: usize,
    n_test: usize,
    hr_size: usize,
    factor: usize,
) -> Result<PathBuf> {
    if factor == 0 || hr_size % factor != 0 {
        return Err(Error::InvalidArgument(format!(
            "factor {factor} must divide HR size {hr_size}"
        )));
    }
    let out = out_dir.as_ref().to_path_buf();
    for sub in ["train", "train_lr", "test"] {
        let p = out.join(sub);
        fs::create_dir_all(&p).map_err(|e| Error::io(p.display().to_string(), e))?;
    }
    let half = spec.bbox_max[0];
    let train_cams = hemisphere_cameras(spec.seed, n_train, hr_size, hr_size, half);
    let test_cams = hemisphere_cameras(spec.seed ^ 0x7e57, n_test, hr_size, hr_size, half);

    let mut train_frames = Vec::with_capacity(n_train);
    for (i, cam) in train_cams.iter().enumerate() {
        let hr = oracle_render(spec, cam);
        let lr = hr.downsample_box(factor)?;
        hr.save_png(out.join(format!("train/r_{i}.png")))?;
        lr.save_png(out.join(format!("train_lr/r_{i}.png")))?;
        train_frames.push(FrameJson {
            file_path: format!("./train/r_{i}"),
            transform_matrix: c2w_to_4x4(&cam.c2w),
        });
    }
    let mut test_frames = Vec::with_capacity(n_test);
    for (i, cam) in test_cams.iter().enumerate() {
        let hr = oracle_render(spec, cam);
        hr.save_png(out.join(format!("test/r_{i}.png")))?;
        test_frames.push(FrameJson {
            file_path: format!("./test/r_{i}"),
            transform_matrix: c2w_to_4x4(&cam.c2w),
        });
    }

    let train_json = TransformsJson { camera_angle_x: CAMERA_ANGLE_X, frames: train_frames };
    let test_json = TransformsJson { camera_angle_x: CAMERA_ANGLE_X, frames: test_frames };
    write_json(&out.join("transforms_train.json"), &train_json)?;
    write_json(&out.join("transforms_test.json"), &test_json)?;
    let meta = DatasetMeta {
        seed: spec.seed,
        bbox_min: spec.bbox_min,
        bbox_max: spec.bbox_max,
        hr_size,
        factor,
        n_train,
        n_test,
    };
    write_json(&out.join("meta.json"), &meta)?;
    Ok(out)
}

fn write_json<T: Serialize>(path: &Path, value: &T) -> Result<()> {
    let bytes = serde_json::to_vec_pretty(value)?;
    fs::write(path, bytes).map_err(|e| Error::io(path.display().to_string(), e))?;
    Ok(())
}

fn read_json<T: for<'de> Deserialize<'de>>(path: &Path) -> Result<T> {
    let bytes = fs::read(path).map_err(|e| Error::io(path.display().to_string(), e))?;
    serde_json::from_slice(&bytes).map_err(Error::from)
}

fn load_views(
    dir: &Path,
    transforms: &TransformsJson,
    meta: &DatasetMeta,
    image_subdir_override: Option<&str>,
) -> Result<Vec<CameraView>> {
    let mut views = Vec::with_capacity(transforms.frames.len());
    let half_diag = vec3::norm(vec3::sub(meta.bbox_max, meta.bbox_min)) / 2.0;
    for frame in &transforms.frames {
        let c2w = c2w_from_4x4(&frame.transform_matrix);
        let rel = frame.file_path.trim_start_matches("./");
        let rel = match image_subdir_override {
            Some(sub) => {
                let file = rel.rsplit('/').next().unwrap_or(rel);
                format!("{sub}/{file}")
            }
            None => rel.to_string(),
        };
        let img_path = dir.join(format!("{rel}.png"));
        let image = Image::load_png(&img_path).map_err(|e| Error::Dataset {
            path: img_path.display().to_string(),
            detail: e.to_string(),
        })?;
        let focal = focal_from_angle(image.width, transforms.camera_angle_x);
        let eye = [c2w[0][3], c2w[1][3], c2w[2][3]];
        let dist = vec3::norm(eye);
        let near = (dist - 1.2 * half_diag).max(0.05);
        let far = dist + 1.2 * half_diag;
        let camera = Camera::new(image.width, image.height, focal, c2w, near, far).map_err(|e| {
            Error::Dataset {
                path: img_path.display().to_string(),
                detail: format!("bad camera: {e}"),
            }
        })?;
        views.push(CameraView { camera, image });
    }
    Ok(views)
}

/// Load a dataset directory: HR train, LR train (same poses, images from
/// `train_lr/`), HR test. Intrinsics derive from `camera_angle_x`; rejects
/// non-orthonormal rotations and missing files.
pub fn load_dataset(dir: impl AsRef<Path>) -> Result<Dataset> {
    let dir = dir.as_ref();
    let meta: DatasetMeta = read_json(&dir.join("meta.json"))?;
    let train: TransformsJson = read_json(&dir.join("transforms_train.json"))?;
    let test: TransformsJson = read_json(&dir.join("transforms_test.json"))?;
    let hr_train = load_views(dir, &train, &meta, None)?;
    let lr_train = load_views(dir, &train, &meta, Some("train_lr"))?;
    let hr_test = load_views(dir, &test, &meta, None)?;
    Ok(Dataset { meta, hr_train, lr_train, hr_test })
}

// ---------------------------------------------------------------------------
// Texture corpus for the 2D teacher
// ---------------------------------------------------------------------------

/// Flat 2D images from the same texture generator the scenes use: white
/// canvas with textured rectangles and discs, matching the background and
/// surface statistics the teacher will see in rendered views.
pub fn texture_corpus(seed: u64, count: usize, size: usize) -> Vec<Image> {
    (0..count)
        .into_par_iter()
        .map(|i| {
            let mut rng =
                rng_from_seed(seed.wrapping_add(1_000_003).wrapping_mul(31).wrapping_add(i as u64));
            texture_image(&mut rng, size)
        })
        .collect()
}

fn texture_image(rng: &mut ChaCha8Rng, size: usize) -> Image {
    let mut img = Image::filled(size, size, [1.0, 1.0, 1.0]);
    let full_texture = rng.random_bool(0.25);
    let n_shapes = if full_texture { 1 } else { rng.random_range(1..=3usize) };
    for _ in 0..n_shapes {
        let tex = random_texture(rng);
        // world units per pixel comparable to HR screen sampling of scenes
        let scale = rng.random_range(0.010..0.020);
        let origin = [
            rng.random_range(-1.0..1.0),
            rng.random_range(-1.0..1.0),
            rng.random_range(-1.0..1.0),
        ];
        let e1 = random_unit(rng);
        let mut e2 = vec3::cross(e1, random_unit(rng));
        if vec3::norm(e2) < 1e-6 {
            e2 = vec3::cross(e1, [0.0, 0.0, 1.0]);
        }
        let e2 = vec3::normalize(e2);
        let brightness = rng.random_range(0.4..1.0);

        let disc = rng.random_bool(0.5);
        let (cx, cy) = (
            rng.random_range(0.2..0.8) * size as f64,
            rng.random_range(0.2..0.8) * size as f64,
        );
        let r = rng.random_range(0.15..0.45) * size as f64;
        let (hw, hh) = (
            rng.random_range(0.15..0.45) * size as f64,
            rng.random_range(0.15..0.45) * size as f64,
        );
        for v in 0..size {
            for u in 0..size {
                let inside = if full_texture {
                    true
                } else if disc {
                    let du = u as f64 - cx;
                    let dv = v as f64 - cy;
                    du * du + dv * dv <= r * r
                } else {
                    (u as f64 - cx).abs() <= hw && (v as f64 - cy).abs() <= hh
                };
                if inside {
                    let p = vec3::add(
                        origin,
                        vec3::add(
                            vec3::scale(e1, u as f64 * scale),
                            vec3::scale(e2, v as f64 * scale),
                        ),
                    );
                    let a = tex.albedo(p);
                    img.set(u, v, [a[0] * brightness, a[1] * brightness, a[2] * brightness]);
                }
            }
        }
    }
    img
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn same_seed_same_spec() {
        let a = generate_scene(7);
        let b = generate_scene(7);
        assert_eq!(a, b);
    }

    #[test]
    fn seeds_differ() {
        let specs: Vec<SceneSpec> = (0..20).map(generate_scene).collect();
        let first = &specs[0];
        assert!(specs
            .iter()
            .any(|s| s.primitives.len() != first.primitives.len() || s.primitives != first.primitives));
    }

    #[test]
    fn primitives_inside_bbox() {
        for seed in 0..20 {
            let spec = generate_scene(seed);
            for p in &spec.primitives {
                assert!(p.max_extent_point() <= BBOX_HALF, "seed {seed}");
            }
        }
    }

    #[test]
    fn empty_region_renders_white() {
        let spec = SceneSpec {
            seed: 0,
            primitives: vec![],
            bbox_min: [-BBOX_HALF; 3],
            bbox_max: [BBOX_HALF; 3],
            light_dir: [0.0, 0.0, 1.0],
            ambient: 0.35,
            diffuse: 0.65,
        };
        let cam = hemisphere_cameras(1, 1, 16, 16, BBOX_HALF).pop().unwrap();
        let img = oracle_render(&spec, &cam);
        for v in &img.data {
            assert_eq!(*v, 1.0);
        }
    }

    #[test]
    fn oracle_deterministic() {
        let spec = generate_scene(3);
        let cam = hemisphere_cameras(3, 1, 24, 24, BBOX_HALF).pop().unwrap();
        let a = oracle_render(&spec, &cam);
        let b = oracle_render(&spec, &cam);
        assert_eq!(a.data, b.data);
    }

    /// Rendering at 4x then box-downsampling matches the direct LR oracle.
    #[test]
    fn supersampling_consistency() {
        let spec = generate_scene(11);
        let hr_cam = hemisphere_cameras(11, 1, 128, 128, BBOX_HALF).pop().unwrap();
        let lr_cam = hr_cam.scaled(0.25).unwrap();
        let hr = oracle_render(&spec, &hr_cam);
        let direct_lr = oracle_render(&spec, &lr_cam);
        let down = hr.downsample_box(4).unwrap();
        let mad = down.mean_abs_diff(&direct_lr);
        assert!(mad < 1.0 / 255.0, "mean abs diff {mad}");
    }

    /// Center pixel of a head-on sphere view matches closed-form shading.
    #[test]
    fn sphere_center_pixel_closed_form() {
        let tex = TextureParams { palette: [[0.8, 0.2, 0.1]; 3], waves: vec![] };
        let spec = SceneSpec {
            seed: 0,
            primitives: vec![Primitive::Sphere { center: [0.0; 3], radius: 0.5, tex }],
            bbox_min: [-BBOX_HALF; 3],
            bbox_max: [BBOX_HALF; 3],
            light_dir: [0.0, 0.0, 1.0],
            ambient: 0.35,
            diffuse: 0.65,
        };
        // camera straight above looking down -z: the center-hit normal is +z,
        // aligned with the light, so the shade factor is ambient + diffuse.
        let eye = [0.0, 0.0, 3.75];
        let c2w = [
            [1.0, 0.0, 0.0, eye[0]],
            [0.0, -1.0, 0.0, eye[1]],
            [0.0, 0.0, 1.0, eye[2]],
        ];
        let w = 65;
        let cam = Camera::new(w, w, focal_from_angle(w, CAMERA_ANGLE_X), c2w, 1.0, 6.0).unwrap();
        let img = oracle_render(&spec, &cam);
        let got = img.get(w / 2, w / 2);
        let k: f64 = 0.35 + 0.65;
        let expect: [f64; 3] = [0.8 * k, 0.2 * k, 0.1 * k];
        for c in 0..3 {
            assert!(
                (got[c] - expect[c].clamp(0.0, 1.0)).abs() <= 1.0 / 255.0,
                "channel {c}: {} vs {}",
                got[c],
                expect[c]
            );
        }
    }

    #[test]
    fn emit_and_load_round_trip() {
        let dir = tempfile::tempdir().unwrap();
        let spec = generate_scene(5);
        emit_dataset(&spec, dir.path(), 3, 2, 32, 4).unwrap();

        let ds = load_dataset(dir.path()).unwrap();
        assert_eq!(ds.hr_train.len(), 3);
        assert_eq!(ds.lr_train.len(), 3);
        assert_eq!(ds.hr_test.len(), 2);
        assert_eq!(ds.hr_train[0].image.width, 32);
        assert_eq!(ds.lr_train[0].image.width, 8);

        // poses round trip within 1e-6 and focal follows the angle formula
        let cams = hemisphere_cameras(spec.seed, 3, 32, 32, BBOX_HALF);
        for (loaded, orig) in ds.hr_train.iter().zip(&cams) {
            for r in 0..3 {
                for c in 0..4 {
                    assert!((loaded.camera.c2w[r][c] - orig.c2w[r][c]).abs() < 1e-6);
                }
            }
            assert!((loaded.camera.focal - orig.focal).abs() < 1e-6);
        }
        assert!((ds.lr_train[0].camera.focal - ds.hr_train[0].camera.focal / 4.0).abs() < 1e-9);

        // LR pixels equal the 4x4 block mean of HR within quantization
        let hr = &ds.hr_train[0].image;
        let lr = &ds.lr_train[0].image;
        let down = hr.downsample_box(4).unwrap();
        let mad = down.mean_abs_diff(lr);
        assert!(mad <= 2.0 / 255.0, "mad {mad}");
    }

    #[test]
    fn lr_is_exact_float_box_filter_before_quantization() {
        let spec = generate_scene(13);
        let cam = hemisphere_cameras(13, 1, 32, 32, BBOX_HALF).pop().unwrap();
        let hr = oracle_render(&spec, &cam);
        let lr = hr.downsample_box(4).unwrap();
        // definition check: every LR pixel is the area mean of its block
        for v in 0..8 {
            for u in 0..8 {
                let mut acc = [0.0; 3];
                for dv in 0..4 {
                    for du in 0..4 {
                        let p = hr.get(u * 4 + du, v * 4 + dv);
                        for c in 0..3 {
                            acc[c] += p[c] / 16.0;
                        }
                    }
                }
                let got = lr.get(u, v);
                for c in 0..3 {
                    assert!((got[c] - acc[c]).abs() < 1e-12);
                }
            }
        }
    }

    #[test]
    fn loader_rejects_non_orthonormal_rotation() {
        let dir = tempfile::tempdir().unwrap();
        let spec = generate_scene(6);
        emit_dataset(&spec, dir.path(), 2, 1, 16, 4).unwrap();
        let path = dir.path().join("transforms_train.json");
        let mut t: TransformsJson = read_json(&path).unwrap();
        t.frames[0].transform_matrix[0][0] *= 3.0;
        write_json(&path, &t).unwrap();
        assert!(load_dataset(dir.path()).is_err());
    }

    #[test]
    fn loads_handwritten_minimal_fixture() {
        let dir = tempfile::tempdir().unwrap();
        for sub in ["train", "train_lr", "test"] {
            fs::create_dir_all(dir.path().join(sub)).unwrap();
        }
        let img = Image::filled(8, 8, [0.5, 0.5, 0.5]);
        for p in ["train/r_0", "train/r_1", "train_lr/r_0", "train_lr/r_1", "test/r_0"] {
            img.save_png(dir.path().join(format!("{p}.png"))).unwrap();
        }
        let ident = [
            [1.0, 0.0, 0.0, 0.0],
            [0.0, 1.0, 0.0, 0.0],
            [0.0, 0.0, 1.0, 4.0],
            [0.0, 0.0, 0.0, 1.0],
        ];
        let frames = |paths: &[&str]| TransformsJson {
            camera_angle_x: 0.8,
            frames: paths
                .iter()
                .map(|p| FrameJson { file_path: p.to_string(), transform_matrix: ident })
                .collect(),
        };
        write_json(
            &dir.path().join("transforms_train.json"),
            &frames(&["./train/r_0", "./train/r_1"]),
        )
        .unwrap();
        write_json(&dir.path().join("transforms_test.json"), &frames(&["./test/r_0"])).unwrap();
        let meta = DatasetMeta {
            seed: 0,
            bbox_min: [-1.0; 3],
            bbox_max: [1.0; 3],
            hr_size: 8,
            factor: 1,
            n_train: 2,
            n_test: 1,
        };
        write_json(&dir.path().join("meta.json"), &meta).unwrap();
        let ds = load_dataset(dir.path()).unwrap();
        assert_eq!(ds.hr_train.len(), 2);
        let focal = ds.hr_train[0].camera.focal;
        assert!((focal - focal_from_angle(8, 0.8)).abs() < 1e-9);
    }

    #[test]
    fn corpus_images_are_deterministic_and_varied() {
        let a = texture_corpus(1, 4, 32);
        let b = texture_corpus(1, 4, 32);
        for (x, y) in a.iter().zip(&b) {
            assert_eq!(x.data, y.data);
        }
        assert!(a[0].data != a[1].data);
        let any_white = a.iter().any(|img| img.data.chunks(3).any(|p| p == [1.0, 1.0, 1.0]));
        let any_tex = a.iter().any(|img| img.data.chunks(3).any(|p| p != [1.0, 1.0, 1.0]));
        assert!(any_white && any_tex);
    }
}
