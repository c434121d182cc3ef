//! Deterministic synthetic street scenes: a flat (slightly pitched) ground
//! plane, a handful of boxes resting on it and a simple flat-shaded render.
//! Used for fixtures, demos and end-to-end tests.

use std::path::Path;

use image::{Rgb, RgbImage};
use rand::Rng;
use rand_chacha::ChaCha8Rng;
use rand::SeedableRng;

use crate::dataset::{save_manifest, Annotation, Category, DatasetError, DatasetManifest, Sample};
use crate::geometry::{box_rotation_on_ground, project_box_to_2d, Box3D, CameraIntrinsics, Dims, GroundPlane, Point3, Rotation3};
use crate::imaging;
use crate::plane::center_from_bottom;

#[derive(Debug, Clone, PartialEq)]
pub struct SceneSpec {
    pub width: u32,
    pub height: u32,
    pub focal: f64,
    /// Camera height above the ground in meters.
    pub camera_height: f64,
    /// Largest absolute ground pitch in radians.
    pub max_pitch: f64,
    pub min_objects: usize,
    pub max_objects: usize,
    pub depth_range: (f64, f64),
}

impl Default for SceneSpec {
    fn default() -> Self {
        Self {
            width: 400,
            height: 120,
            focal: 240.0,
            camera_height: 1.65,
            max_pitch: 0.02,
            min_objects: 3,
            max_objects: 7,
            depth_range: (8.0, 45.0),
        }
    }
}

/// Category table of the synthetic scenes.
pub fn categories() -> Vec<Category> {
    vec![
        Category { id: 0, name: "car".into() },
        Category { id: 1, name: "pedestrian".into() },
        Category { id: 2, name: "cyclist".into() },
    ]
}

const MEAN_DIMS: [(f64, f64, f64); 3] = [(1.6, 1.5, 4.0), (0.6, 1.75, 0.8), (0.6, 1.7, 1.8)];
const COLORS: [[u8; 3]; 3] = [[40, 70, 200], [200, 50, 40], [220, 200, 30]];

/// Ground plane with the given pitch about the camera x axis.
pub fn pitched_ground(camera_height: f64, pitch: f64) -> GroundPlane {
    GroundPlane::new(Rotation3::about_x(pitch).apply(&Point3::y()), camera_height).expect("unit normal")
}

/// Point on `plane` with the given camera x and z.
pub fn ground_point(plane: &GroundPlane, x: f64, z: f64) -> Point3 {
    let n = plane.normal;
    Point3::new(x, (plane.offset - n.x * x - n.z * z) / n.y, z)
}

/// Builds one scene. Objects are rejection-sampled so that their 2D boxes
/// barely overlap and their centers project inside the image.
pub fn synth_sample<R: Rng + ?Sized>(image_id: &str, frame_index: u64, spec: &SceneSpec, rng: &mut R) -> Sample {
    let k = CameraIntrinsics::new(spec.focal, spec.focal, spec.width as f64 / 2.0, spec.height as f64 / 2.0)
        .expect("positive focal");
    let size = (spec.width, spec.height);
    let plane = pitched_ground(spec.camera_height, rng.random_range(-spec.max_pitch..=spec.max_pitch));
    let wanted = rng.random_range(spec.min_objects..=spec.max_objects);
    let mut annotations: Vec<Annotation> = Vec::new();
    for _ in 0..wanted * 40 {
        if annotations.len() == wanted {
            break;
        }
        let category = rng.random_range(0..3u32);
        let (w, h, l) = MEAN_DIMS[category as usize];
        let jitter = rng.random_range(0.9..1.1);
        let dims = Dims::new(w * jitter, h * jitter, l * jitter).expect("positive dims");
        let z = rng.random_range(spec.depth_range.0..spec.depth_range.1);
        let half_fov = (spec.width as f64 / 2.0) / spec.focal * 0.85;
        let x = rng.random_range(-half_fov..half_fov) * z;
        let yaw = rng.random_range(-std::f64::consts::PI..std::f64::consts::PI);
        let rotation = box_rotation_on_ground(yaw, &plane.normal);
        let bottom = ground_point(&plane, x, z);
        let b = Box3D::new(center_from_bottom(&bottom, &rotation, dims.h), dims, rotation, category);
        let Some(bbox) = project_box_to_2d(&b, &k, size) else { continue };
        let Ok(c) = k.project(&b.center) else { continue };
        if !(c.x > 0.0 && c.x < spec.width as f64 && c.y > 0.0 && c.y < spec.height as f64) {
            continue;
        }
        let crowded = annotations.iter().filter_map(|a| a.bbox2d).any(|o| {
            let inter = o.intersection_area(&bbox);
            inter / bbox.area() > 0.2 || inter / o.area() > 0.2
        });
        if crowded {
            continue;
        }
        let id = annotations.len() as u64;
        let mut b = b;
        b.track_id = Some(id);
        annotations.push(Annotation { id, box3d: b, bbox2d: Some(bbox), depth_target: None });
    }
    let image = render(spec, &k, &annotations, rng);
    Sample {
        image_id: image_id.to_owned(),
        frame_index,
        image,
        intrinsics: k,
        ground_plane: Some(plane),
        annotations,
    }
}

fn render<R: Rng + ?Sized>(spec: &SceneSpec, k: &CameraIntrinsics, objects: &[Annotation], rng: &mut R) -> RgbImage {
    let horizon = k.cy;
    let mut img = RgbImage::from_fn(spec.width, spec.height, |_, y| {
        if (y as f64 + 0.5) < horizon {
            let t = y as f64 / horizon;
            Rgb([(120.0 + 60.0 * t) as u8, (160.0 + 50.0 * t) as u8, 230])
        } else {
            Rgb([96, 96, 100])
        }
    });
    for px in img.pixels_mut().filter(|p| p.0 == [96, 96, 100]) {
        let n = rng.random_range(0..24u8);
        *px = Rgb([84 + n, 84 + n, 88 + n]);
    }
    let mut order: Vec<&Annotation> = objects.iter().collect();
    order.sort_by(|a, b| b.box3d.center.z.total_cmp(&a.box3d.center.z));
    for a in order {
        let Some(bb) = a.bbox2d else { continue };
        let base = COLORS[a.box3d.category as usize];
        let shade = (1.2 - a.box3d.center.z / 60.0).clamp(0.4, 1.0);
        let (x0, y0) = (bb.x1.round() as u32, bb.y1.round() as u32);
        let (x1, y1) = ((bb.x2.round() as u32).min(spec.width), (bb.y2.round() as u32).min(spec.height));
        for y in y0..y1 {
            for x in x0..x1 {
                let stripe = if (y - y0) % 4 == 0 || (x - x0) % 6 == 0 { 0.7 } else { 1.0 };
                let c = base.map(|v| (v as f64 * shade * stripe) as u8);
                img.put_pixel(x, y, Rgb(c));
            }
        }
    }
    img
}

/// `n` scenes named `synth_000`, `synth_001`, … generated from `seed`.
pub fn synth_dataset(n: usize, seed: u64, spec: &SceneSpec) -> (DatasetManifest, Vec<Sample>) {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut samples: Vec<Sample> =
        (0..n).map(|i| synth_sample(&format!("synth_{i:03}"), i as u64, spec, &mut rng)).collect();
    // Annotation ids are unique across the whole manifest.
    for (id, a) in samples.iter_mut().flat_map(|s| s.annotations.iter_mut()).enumerate() {
        a.id = id as u64;
    }
    let mut manifest = DatasetManifest::new("synthetic", categories());
    manifest.images = samples.iter().map(|s| s.to_record(format!("images/{}.png", s.image_id))).collect();
    (manifest, samples)
}

/// Writes `images/<id>.png` and `manifest.json` under `dir`; returns the manifest path.
pub fn write_dataset(dir: &Path, manifest: &DatasetManifest, samples: &[Sample]) -> Result<std::path::PathBuf, DatasetError> {
    let images = dir.join("images");
    std::fs::create_dir_all(&images).map_err(|e| DatasetError::io(&images, e))?;
    for s in samples {
        let record = manifest.image(&s.image_id).expect("sample listed in manifest");
        let path = record.image_path(dir);
        imaging::save_png(&s.image, &path).map_err(|e| DatasetError::image(&path, e))?;
    }
    let path = dir.join("manifest.json");
    save_manifest(manifest, &path)?;
    Ok(path)
}

/// Stand-in for a per-object training loss: grows with depth and with how
/// far the heading is from facing the camera.
pub fn difficulty_oracle(b: &Box3D) -> f64 {
    let heading = b.rotation.column(2);
    0.05 * b.center.z + (1.0 - heading.z.abs())
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::plane::{bottom_center, fit_boxes};

    #[test]
    fn scenes_are_valid_and_reproducible() {
        let spec = SceneSpec::default();
        let (m, samples) = synth_dataset(4, 11, &spec);
        m.validate().unwrap();
        assert_eq!(synth_dataset(4, 11, &spec).1, samples);
        for s in &samples {
            assert!(s.annotations.len() >= spec.min_objects, "{} has {}", s.image_id, s.annotations.len());
            let plane = s.ground_plane.unwrap();
            for b in s.boxes() {
                assert!(plane.signed_distance(&bottom_center(b)).abs() < 1e-9);
            }
            let fitted = fit_boxes(s.boxes()).unwrap();
            assert!((fitted.normal - plane.normal).norm() < 1e-6);
        }
    }

    #[test]
    fn dataset_round_trips_through_disk() {
        let (m, samples) = synth_dataset(2, 3, &SceneSpec::default());
        let dir = tempfile::tempdir().unwrap();
        let path = write_dataset(dir.path(), &m, &samples).unwrap();
        let back = crate::dataset::load_manifest(&path).unwrap();
        assert_eq!(back, m);
        assert_eq!(back.images[1].load_sample(dir.path()).unwrap(), samples[1]);
    }
}
