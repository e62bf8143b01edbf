//! Deterministic synthetic scenes: a textured ground plane with boxes seen by
//! a nadir reference camera and a tilted ring of sources, rendered by
//! analytic ray casting with exact depth.
//!
//! Only `+ - * /`, `sqrt` and `floor` are used on the rendering path so the
//! output bytes do not depend on the platform's libm.

use std::collections::BTreeMap;
use std::fmt;
use std::fs;
use std::path::Path;
use std::str::FromStr;

use nalgebra::{Matrix3, Vector3};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::camera::{intrinsic_inverse, look_at, CameraModel};
use crate::error::{MvsError, Result};
use crate::formats::{
    decode_manifest, encode_manifest, read_camera, read_pfm, read_ppm, write_camera, write_pfm, write_ppm, RgbImage,
    DEFAULT_NUM_PLANES,
};
use crate::model::ViewSet;
use crate::tensor::Tensor;

pub const WIDTH: usize = 80;
pub const HEIGHT: usize = 64;
pub const FOCAL: f64 = 80.0;
pub const CAMERA_HEIGHT: f64 = 20.0;
pub const BASELINE: f64 = 16.0;
/// Brightness gain amplitude of the `bright` and `both` presets.
pub const DEFAULT_GAIN: f64 = 0.3;

/// Which nuisances a generated scene carries.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub enum Preset {
    Clean,
    Occluded,
    Bright,
    Both,
}

impl Preset {
    pub fn occluded(self) -> bool {
        matches!(self, Preset::Occluded | Preset::Both)
    }

    pub fn bright(self) -> bool {
        matches!(self, Preset::Bright | Preset::Both)
    }
}

impl fmt::Display for Preset {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            Preset::Clean => "clean",
            Preset::Occluded => "occluded",
            Preset::Bright => "bright",
            Preset::Both => "both",
        })
    }
}

impl FromStr for Preset {
    type Err = MvsError;
    fn from_str(s: &str) -> Result<Self> {
        match s {
            "clean" => Ok(Preset::Clean),
            "occluded" => Ok(Preset::Occluded),
            "bright" => Ok(Preset::Bright),
            "both" => Ok(Preset::Both),
            other => Err(MvsError::invalid(format!("unknown preset '{other}' (clean|occluded|bright|both)"))),
        }
    }
}

/// Axis-aligned box standing on the ground (z = 0, world up is +z).
#[derive(Clone, Debug, PartialEq)]
pub struct BoxPrim {
    pub min: [f64; 3],
    pub max: [f64; 3],
    pub texture: u64,
}

/// Fronto-parallel quad in one view's camera frame covering the pixel
/// rectangle `[u0, u1) x [v0, v1)` at camera depth `depth`.
#[derive(Clone, Debug, PartialEq)]
pub struct Occluder {
    pub view: usize,
    pub rect: [f64; 4],
    pub depth: f64,
    pub texture: u64,
    /// Excluded from that view's ground-truth depth.
    pub nuisance: bool,
}

#[derive(Clone, Debug, PartialEq)]
pub struct SceneSpec {
    pub seed: u64,
    pub preset: Preset,
    pub width: usize,
    pub height: usize,
    pub ground_texture: u64,
    pub boxes: Vec<BoxPrim>,
    pub cams: Vec<CameraModel>,
    pub occluders: Vec<Occluder>,
    /// Per-view polynomial gain coefficients (x, y, xy), L1 norm ≤ 1.
    pub brightness: Vec<[f64; 3]>,
    pub gain: f64,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Surface {
    Ground,
    Box(usize),
    Occluder(usize),
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct Hit {
    /// Camera-frame z of the intersection.
    pub depth: f64,
    pub surface: Surface,
    pub world: Vector3<f64>,
    pub normal: Vector3<f64>,
}

fn splitmix(mut z: u64) -> u64 {
    z = z.wrapping_add(0x9E37_79B9_7F4A_7C15);
    z = (z ^ (z >> 30)).wrapping_mul(0xBF58_476D_1CE4_E5B9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94D0_49BB_1331_11EB);
    z ^ (z >> 31)
}

fn lattice(seed: u64, x: i64, y: i64) -> f64 {
    let h = splitmix(seed ^ splitmix((x as u64).wrapping_mul(0x1656_67B1) ^ splitmix(y as u64)));
    (h >> 11) as f64 / (1u64 << 53) as f64
}

/// Smoothly interpolated lattice noise in [0, 1).
pub fn value_noise(seed: u64, x: f64, y: f64) -> f64 {
    let (fx, fy) = (x.floor(), y.floor());
    let (ix, iy) = (fx as i64, fy as i64);
    let s = |t: f64| t * t * (3.0 - 2.0 * t);
    let (tx, ty) = (s(x - fx), s(y - fy));
    let a = lattice(seed, ix, iy);
    let b = lattice(seed, ix + 1, iy);
    let c = lattice(seed, ix, iy + 1);
    let d = lattice(seed, ix + 1, iy + 1);
    let top = a + (b - a) * tx;
    let bot = c + (d - c) * tx;
    top + (bot - top) * ty
}

fn albedo(texture: u64, a: f64, b: f64) -> [f64; 3] {
    let mut out = [0.0; 3];
    for (c, o) in out.iter_mut().enumerate() {
        let seed = splitmix(texture.wrapping_mul(3).wrapping_add(c as u64));
        let coarse = value_noise(seed, a / 3.0, b / 3.0);
        let fine = value_noise(seed ^ 0xF1E, a / 1.5, b / 1.5);
        *o = 0.08 + 0.84 * (0.55 * coarse + 0.45 * fine);
    }
    out
}

fn occluder_albedo(texture: u64, a: f64, b: f64) -> [f64; 3] {
    let n = value_noise(texture, a / 0.3, b / 0.3);
    let v = 0.05 + 0.25 * n;
    [v, v * 1.1, v * 0.8]
}

fn light_dir() -> Vector3<f64> {
    Vector3::new(0.4, 0.3, 1.0).normalize()
}

fn ray_box(origin: &Vector3<f64>, dir: &Vector3<f64>, b: &BoxPrim) -> Option<(f64, Vector3<f64>)> {
    let mut t_near = f64::NEG_INFINITY;
    let mut t_far = f64::INFINITY;
    let mut normal = Vector3::zeros();
    for a in 0..3 {
        if dir[a] == 0.0 {
            if origin[a] < b.min[a] || origin[a] > b.max[a] {
                return None;
            }
            continue;
        }
        let t0 = (b.min[a] - origin[a]) / dir[a];
        let t1 = (b.max[a] - origin[a]) / dir[a];
        let (lo, hi, sign) = if t0 < t1 { (t0, t1, -1.0) } else { (t1, t0, 1.0) };
        if lo > t_near {
            t_near = lo;
            normal = Vector3::zeros();
            normal[a] = sign;
        }
        t_far = t_far.min(hi);
    }
    if t_near <= t_far && t_near > 0.0 {
        Some((t_near, normal))
    } else {
        None
    }
}

impl SceneSpec {
    /// Random ground-and-boxes layout with the nuisances of `preset`.
    pub fn generate(seed: u64, preset: Preset, n_views: usize) -> Result<SceneSpec> {
        if n_views != 3 && n_views != 5 {
            return Err(MvsError::invalid(format!("view count must be 3 or 5, got {n_views}")));
        }
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let n_boxes = rng.gen_range(2..=4);
        let boxes = (0..n_boxes)
            .map(|i| {
                let cx = rng.gen_range(-7.0..7.0);
                let cy = rng.gen_range(-5.0..5.0);
                let hx = rng.gen_range(1.5..3.5);
                let hy = rng.gen_range(1.5..3.5);
                let h = rng.gen_range(2.0..8.0);
                BoxPrim {
                    min: [cx - hx, cy - hy, 0.0],
                    max: [cx + hx, cy + hy, h],
                    texture: splitmix(seed ^ (0xB0 + i as u64)),
                }
            })
            .collect();
        let mut spec = SceneSpec {
            seed,
            preset,
            width: WIDTH,
            height: HEIGHT,
            ground_texture: splitmix(seed ^ 0x6E0),
            boxes,
            cams: Vec::new(),
            occluders: Vec::new(),
            brightness: vec![[0.0; 3]; n_views],
            gain: 0.0,
        };
        spec.cams = rig(n_views, 1.0, 1.0)?;
        if preset.occluded() {
            for view in 0..n_views {
                let count = rng.gen_range(1..=2);
                for _ in 0..count {
                    let w = rng.gen_range(12.0..24.0);
                    let h = rng.gen_range(15.0..30.0);
                    let u0 = rng.gen_range(0.0..(WIDTH as f64 - w)).floor();
                    let v0 = rng.gen_range(0.0..(HEIGHT as f64 - h)).floor();
                    spec.occluders.push(Occluder {
                        view,
                        rect: [u0, v0, u0 + w.floor(), v0 + h.floor()],
                        depth: rng.gen_range(3.0..8.0),
                        texture: rng.gen(),
                        nuisance: view == 0,
                    });
                }
            }
        }
        if preset.bright() {
            spec.gain = DEFAULT_GAIN;
            for c in spec.brightness.iter_mut() {
                let raw = [rng.gen_range(-1.0..1.0), rng.gen_range(-1.0..1.0), rng.gen_range(-1.0..1.0)];
                let l1: f64 = raw.iter().map(|v: &f64| v.abs()).sum();
                let s = l1.max(1.0);
                *c = [raw[0] / s, raw[1] / s, raw[2] / s];
            }
        }
        // sweep range from the reference view's exact depth, 1 m margin
        let (mut lo, mut hi) = (f64::INFINITY, f64::NEG_INFINITY);
        for y in 0..HEIGHT {
            for x in 0..WIDTH {
                let hit = spec.cast(0, x as f64, y as f64, false)?;
                lo = lo.min(hit.depth);
                hi = hi.max(hit.depth);
            }
        }
        let dmin = (lo - 1.0).floor().max(0.5);
        let dmax = (hi + 1.0).ceil();
        let interval = (dmax - dmin) / (DEFAULT_NUM_PLANES - 1) as f64;
        spec.cams = rig(n_views, dmin, interval)?;
        spec.validate()?;
        Ok(spec)
    }

    pub fn n_views(&self) -> usize {
        self.cams.len()
    }

    pub fn validate(&self) -> Result<()> {
        if self.boxes.iter().any(|b| b.min[2] < 0.0 || b.max[2] <= b.min[2]) {
            return Err(MvsError::invalid("boxes must stand on or above the ground"));
        }
        if !(0.0..=0.5).contains(&self.gain) {
            return Err(MvsError::invalid(format!("brightness gain must lie in [0, 0.5], got {}", self.gain)));
        }
        if self.brightness.len() != self.cams.len() {
            return Err(MvsError::invalid("one brightness field per view required"));
        }
        for cam in &self.cams {
            cam.validate()?;
            let (_, _, z) = cam.project(&Vector3::zeros());
            if !(z > 0.0) {
                return Err(MvsError::InvalidCamera("scene centre is behind a camera".into()));
            }
        }
        Ok(())
    }

    /// Casts the ray through pixel `(u, v)` of `view`. Occluders of that view
    /// are included unless `skip_nuisance` drops the nuisance ones.
    pub fn cast(&self, view: usize, u: f64, v: f64, skip_nuisance: bool) -> Result<Hit> {
        let cam = &self.cams[view];
        let ray_cam = intrinsic_inverse(&cam.k) * Vector3::new(u, v, 1.0);
        let r: Matrix3<f64> = cam.rotation();
        let dir = r.transpose() * ray_cam;
        let origin = cam.center();
        let mut best: Option<Hit> = None;
        let mut consider = |t: f64, surface: Surface, normal: Vector3<f64>| {
            if t > 0.0 && best.map_or(true, |b| t < b.depth) {
                best = Some(Hit {
                    depth: t,
                    surface,
                    world: origin + dir * t,
                    normal,
                });
            }
        };
        if dir.z < 0.0 {
            consider(-origin.z / dir.z, Surface::Ground, Vector3::z());
        }
        for (i, b) in self.boxes.iter().enumerate() {
            if let Some((t, n)) = ray_box(&origin, &dir, b) {
                consider(t, Surface::Box(i), n);
            }
        }
        for (i, o) in self.occluders.iter().enumerate() {
            if o.view != view || (skip_nuisance && o.nuisance) {
                continue;
            }
            if u >= o.rect[0] && u < o.rect[2] && v >= o.rect[1] && v < o.rect[3] {
                consider(o.depth, Surface::Occluder(i), -Vector3::z());
            }
        }
        best.ok_or_else(|| MvsError::InvalidCamera(format!("pixel ({u}, {v}) of view {view} sees nothing")))
    }

    fn shade(&self, view: usize, u: f64, v: f64, hit: &Hit) -> [f64; 3] {
        let base = match hit.surface {
            Surface::Occluder(i) => {
                let o = &self.occluders[i];
                return self.apply_gain(view, u, v, occluder_albedo(o.texture, u * o.depth / FOCAL, v * o.depth / FOCAL));
            }
            Surface::Ground => albedo(self.ground_texture, hit.world.x, hit.world.y),
            Surface::Box(i) => {
                let t = self.boxes[i].texture;
                let p = hit.world;
                if hit.normal.z != 0.0 {
                    albedo(t, p.x, p.y)
                } else if hit.normal.x != 0.0 {
                    albedo(t ^ 1, p.y, p.z)
                } else {
                    albedo(t ^ 2, p.x, p.z)
                }
            }
        };
        let lambert = hit.normal.dot(&light_dir()).max(0.0);
        let s = 0.35 + 0.65 * lambert;
        self.apply_gain(view, u, v, [base[0] * s, base[1] * s, base[2] * s])
    }

    fn apply_gain(&self, view: usize, u: f64, v: f64, rgb: [f64; 3]) -> [f64; 3] {
        let c = self.brightness[view];
        let x = ((2.0 * u + 1.0) / self.width as f64 - 1.0).clamp(-1.0, 1.0);
        let y = ((2.0 * v + 1.0) / self.height as f64 - 1.0).clamp(-1.0, 1.0);
        let g = 1.0 + self.gain * (c[0] * x + c[1] * y + c[2] * x * y);
        [rgb[0] * g, rgb[1] * g, rgb[2] * g]
    }

    /// Renders every view.
    pub fn render(&self) -> Result<SceneBundle> {
        self.validate()?;
        let (w, h) = (self.width, self.height);
        let mut images = Vec::with_capacity(self.n_views());
        let mut depths = Vec::with_capacity(self.n_views());
        for view in 0..self.n_views() {
            let mut data = Vec::with_capacity(w * h * 3);
            let mut depth = Vec::with_capacity(w * h);
            for y in 0..h {
                for x in 0..w {
                    let (u, v) = (x as f64, y as f64);
                    let hit = self.cast(view, u, v, false)?;
                    for c in self.shade(view, u, v, &hit) {
                        data.push((c * 255.0).round().clamp(0.0, 255.0) as u8);
                    }
                    let gt = match hit.surface {
                        Surface::Occluder(i) if self.occluders[i].nuisance => self.cast(view, u, v, true)?.depth,
                        _ => hit.depth,
                    };
                    depth.push(gt as f32 as f64);
                }
            }
            images.push(RgbImage::new(w, h, data)?);
            depths.push(Tensor::new(vec![h, w], depth)?);
        }
        let manifest = BTreeMap::from([
            ("seed".to_string(), self.seed.to_string()),
            ("preset".to_string(), self.preset.to_string()),
            ("n_views".to_string(), self.n_views().to_string()),
            ("width".to_string(), w.to_string()),
            ("height".to_string(), h.to_string()),
            ("brightness_gain".to_string(), self.gain.to_string()),
            ("occluders".to_string(), self.occluders.len().to_string()),
        ]);
        Ok(SceneBundle {
            images,
            cams: self.cams.clone(),
            depths,
            manifest,
        })
    }

    /// Reference pixels whose surface point is seen by every source view,
    /// with all four bilinear neighbours of its projection on the same face,
    /// and not hidden by a reference occluder. 1 = visible.
    pub fn mutual_visibility(&self) -> Result<Tensor> {
        let (w, h) = (self.width, self.height);
        let mut out = vec![0.0; w * h];
        for y in 0..h {
            for x in 0..w {
                let (u, v) = (x as f64, y as f64);
                if matches!(self.cast(0, u, v, false)?.surface, Surface::Occluder(_)) {
                    continue;
                }
                let hit = self.cast(0, u, v, true)?;
                let mut ok = true;
                for s in 1..self.n_views() {
                    let (su, sv, sz) = self.cams[s].project(&hit.world);
                    if !(sz > 0.0 && su >= 0.0 && su <= (w - 1) as f64 && sv >= 0.0 && sv <= (h - 1) as f64) {
                        ok = false;
                        break;
                    }
                    let seen = self.cast(s, su, sv, false)?;
                    if (seen.depth - sz).abs() > 1e-3 * sz {
                        ok = false;
                        break;
                    }
                    // the bilinear footprint must lie on the same face
                    for (nu, nv) in [(su.floor(), sv.floor()), (su.ceil(), sv.floor()), (su.floor(), sv.ceil()), (su.ceil(), sv.ceil())] {
                        let n = self.cast(s, nu, nv, false)?;
                        if n.surface != hit.surface || n.normal != hit.normal {
                            ok = false;
                        }
                    }
                    if !ok {
                        break;
                    }
                }
                if ok {
                    out[y * w + x] = 1.0;
                }
            }
        }
        Tensor::new(vec![h, w], out)
    }
}

/// Nadir reference above the origin plus sources displaced along ±x (and ±y
/// for five views), all aimed at the scene centre.
pub fn rig(n_views: usize, depth_min: f64, depth_interval: f64) -> Result<Vec<CameraModel>> {
    let k = Matrix3::new(
        FOCAL,
        0.0,
        (WIDTH as f64 - 1.0) / 2.0,
        0.0,
        FOCAL,
        (HEIGHT as f64 - 1.0) / 2.0,
        0.0,
        0.0,
        1.0,
    );
    let down = Vector3::new(0.0, -1.0, 0.0);
    let offsets = [(0.0, 0.0), (BASELINE, 0.0), (-BASELINE, 0.0), (0.0, BASELINE), (0.0, -BASELINE)];
    offsets[..n_views]
        .iter()
        .map(|&(dx, dy)| {
            let t = look_at(Vector3::new(dx, dy, CAMERA_HEIGHT), Vector3::zeros(), down)?;
            CameraModel::new(k, t, depth_min, depth_interval, DEFAULT_NUM_PLANES)
        })
        .collect()
}

/// `n` scene specs derived from `seed`.
pub fn make_suite(n: usize, preset: Preset, seed: u64, n_views: usize) -> Result<Vec<SceneSpec>> {
    if n == 0 {
        return Err(MvsError::invalid("suite needs at least one scene"));
    }
    (0..n)
        .map(|i| SceneSpec::generate(splitmix(seed ^ splitmix(i as u64)), preset, n_views))
        .collect()
}

/// One multi-view scene in memory: images, cameras, ground-truth depth per
/// view and the manifest.
#[derive(Clone, Debug, PartialEq)]
pub struct SceneBundle {
    pub images: Vec<RgbImage>,
    pub cams: Vec<CameraModel>,
    pub depths: Vec<Tensor>,
    pub manifest: BTreeMap<String, String>,
}

impl SceneBundle {
    pub fn n_views(&self) -> usize {
        self.images.len()
    }

    /// Views with `reference` first and the others in ascending order.
    pub fn view_set(&self, reference: usize) -> ViewSet {
        let order: Vec<usize> = std::iter::once(reference)
            .chain((0..self.n_views()).filter(|&i| i != reference))
            .collect();
        ViewSet {
            images: order.iter().map(|&i| self.images[i].to_tensor()).collect(),
            cams: order.iter().map(|&i| self.cams[i].clone()).collect(),
        }
    }

    pub fn write(&self, dir: &Path) -> Result<()> {
        fs::create_dir_all(dir).map_err(|e| MvsError::io(dir, e))?;
        for i in 0..self.n_views() {
            write_ppm(&dir.join(format!("view_{i}.ppm")), &self.images[i])?;
            write_camera(&dir.join(format!("cam_{i}.txt")), &self.cams[i])?;
            write_pfm(&dir.join(format!("gt_depth_{i}.pfm")), &self.depths[i])?;
        }
        let path = dir.join("manifest.txt");
        fs::write(&path, encode_manifest(&self.manifest)).map_err(|e| MvsError::io(&path, e))
    }

    pub fn read(dir: &Path) -> Result<SceneBundle> {
        let mpath = dir.join("manifest.txt");
        let text = fs::read_to_string(&mpath).map_err(|e| MvsError::io(&mpath, e))?;
        let manifest = decode_manifest(&text, &mpath)?;
        let n: usize = manifest
            .get("n_views")
            .and_then(|v| v.parse().ok())
            .ok_or_else(|| MvsError::Parse {
                path: mpath.clone(),
                line: 0,
                msg: "missing or invalid n_views".into(),
            })?;
        let mut bundle = SceneBundle {
            images: Vec::with_capacity(n),
            cams: Vec::with_capacity(n),
            depths: Vec::with_capacity(n),
            manifest,
        };
        for i in 0..n {
            let img = read_ppm(&dir.join(format!("view_{i}.ppm")))?;
            let depth_path = dir.join(format!("gt_depth_{i}.pfm"));
            let depth = read_pfm(&depth_path)?;
            if depth.shape() != [img.height, img.width] {
                return Err(MvsError::Format {
                    path: depth_path,
                    offset: 0,
                    msg: format!("depth is {:?} but image is {}x{}", depth.shape(), img.height, img.width),
                });
            }
            if let Some(first) = bundle.images.first() {
                if (first.width, first.height) != (img.width, img.height) {
                    return Err(MvsError::invalid(format!("view {i} resolution differs from view 0")));
                }
            }
            bundle.cams.push(read_camera(&dir.join(format!("cam_{i}.txt")))?);
            bundle.images.push(img);
            bundle.depths.push(depth);
        }
        Ok(bundle)
    }
}

/// Scene directories directly under `root` (those holding a manifest), sorted.
pub fn list_bundles(root: &Path) -> Result<Vec<std::path::PathBuf>> {
    let mut dirs: Vec<_> = fs::read_dir(root)
        .map_err(|e| MvsError::io(root, e))?
        .filter_map(|e| e.ok().map(|e| e.path()))
        .filter(|p| p.join("manifest.txt").is_file())
        .collect();
    dirs.sort();
    Ok(dirs)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn ground_only_nadir_depth() {
        let mut spec = SceneSpec::generate(1, Preset::Clean, 3).unwrap();
        spec.boxes.clear();
        let b = spec.render().unwrap();
        assert!(b.depths[0].data().iter().all(|&d| d == CAMERA_HEIGHT));
    }

    #[test]
    fn box_roof_depth() {
        let mut spec = SceneSpec::generate(1, Preset::Clean, 3).unwrap();
        spec.boxes = vec![BoxPrim {
            min: [-3.0, -3.0, 0.0],
            max: [3.0, 3.0, 5.0],
            texture: 9,
        }];
        let b = spec.render().unwrap();
        // the principal point looks straight down at the origin
        let centre = b.depths[0].at(&[HEIGHT / 2, WIDTH / 2]);
        assert_eq!(centre, CAMERA_HEIGHT - 5.0);
    }

    #[test]
    fn presets_and_determinism() {
        let clean = make_suite(3, Preset::Clean, 5, 3).unwrap();
        assert!(clean.iter().all(|s| s.occluders.is_empty() && s.gain == 0.0));
        assert_eq!(clean, make_suite(3, Preset::Clean, 5, 3).unwrap());
        let both = make_suite(3, Preset::Both, 5, 5).unwrap();
        for s in &both {
            assert!(s.gain > 0.0);
            for v in 0..5 {
                assert!(s.occluders.iter().any(|o| o.view == v));
            }
        }
        assert!(SceneSpec::generate(0, Preset::Clean, 4).is_err());
    }

    #[test]
    fn brightness_within_bounds() {
        let s = SceneSpec::generate(3, Preset::Bright, 3).unwrap();
        for c in &s.brightness {
            assert!(c.iter().map(|v| v.abs()).sum::<f64>() <= 1.0 + 1e-12);
        }
    }

    #[test]
    fn nuisance_excluded_from_reference_depth() {
        let spec = SceneSpec::generate(11, Preset::Occluded, 3).unwrap();
        let b = spec.render().unwrap();
        let o = spec.occluders.iter().find(|o| o.view == 0).unwrap();
        let (x, y) = (o.rect[0] as usize, o.rect[1] as usize);
        assert!(b.depths[0].at(&[y, x]) > o.depth + 1.0);
        let src = spec.occluders.iter().find(|o| o.view == 1).unwrap();
        let (x, y) = (src.rect[0] as usize, src.rect[1] as usize);
        assert_eq!(b.depths[1].at(&[y, x]), src.depth as f32 as f64);
    }

    #[test]
    fn sweep_range_covers_reference_depth() {
        let spec = SceneSpec::generate(4, Preset::Clean, 3).unwrap();
        let b = spec.render().unwrap();
        let cam = &b.cams[0];
        for &d in b.depths[0].data() {
            assert!(d > cam.depth_min && d < cam.depth_max());
        }
    }
}
