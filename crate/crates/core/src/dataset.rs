//! OMNI3D-shaped annotation manifests, samples and dataset statistics.
//!
//! A manifest is one JSON file per split:
//!
//! ```json
//! {
//!   "schema_version": 1,
//!   "split": "train",
//!   "categories": [{"id": 0, "name": "car"}],
//!   "images": [{"id": "000000", "file_name": "images/000000.png",
//!               "width": 1920, "height": 1080, "frame_index": 0,
//!               "K": [[fx, 0, cx], [0, fy, cy], [0, 0, 1]],
//!               "ground_plane": {"normal": [nx, ny, nz], "offset": d}}],
//!   "annotations": [{"id": 0, "image_id": "000000", "category_id": 0,
//!                    "track_id": 17, "center_cam": [x, y, z],
//!                    "dimensions": [w, h, l], "R_cam": [r00, r01, ..., r22],
//!                    "bbox2d": [x1, y1, x2, y2], "score": 0.9,
//!                    "depth_target": 12.5}]
//! }
//! ```
//!
//! `ground_plane`, `track_id`, `bbox2d`, `score` and `depth_target` are
//! optional. Missing 2D boxes are recomputed from the 3D box on load.
//! Unknown fields are ignored.

use std::collections::{BTreeMap, HashMap, HashSet};
use std::fmt::Write as _;
use std::path::{Path, PathBuf};

use image::{Rgb, RgbImage};
use imageproc::drawing::draw_line_segment_mut;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::geometry::{
    project_box_edges, project_box_to_2d, Box2D, Box3D, CameraIntrinsics, Dims, GroundPlane, Pixel, Point3,
    Rotation3,
};
use crate::imaging;
use crate::plane;

pub const SCHEMA_VERSION: u32 = 1;

#[derive(Debug, Error)]
pub enum DatasetError {
    #[error("{path}: parse error at line {line}, column {column}: {message}")]
    Parse { path: PathBuf, line: usize, column: usize, message: String },
    #[error("invalid manifest ({} problem(s)):\n  {}", .0.len(), .0.join("\n  "))]
    Validation(Vec<String>),
    #[error("image {0} has no ground plane")]
    MissingPlane(String),
    #[error("{path}: {source}")]
    Io { path: PathBuf, source: std::io::Error },
    #[error("{path}: {source}")]
    Image { path: PathBuf, source: image::ImageError },
}

impl DatasetError {
    pub(crate) fn io(path: &Path, source: std::io::Error) -> Self {
        Self::Io { path: path.to_path_buf(), source }
    }

    pub(crate) fn image(path: &Path, source: image::ImageError) -> Self {
        match source {
            image::ImageError::IoError(e) => Self::io(path, e),
            other => Self::Image { path: path.to_path_buf(), source: other },
        }
    }

    /// True for malformed or inconsistent inputs, false for I/O failures.
    pub fn is_validation(&self) -> bool {
        matches!(self, Self::Parse { .. } | Self::Validation(_) | Self::MissingPlane(_))
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Category {
    pub id: u32,
    pub name: String,
}

/// One labelled object.
#[derive(Debug, Clone, PartialEq)]
pub struct Annotation {
    pub id: u64,
    pub box3d: Box3D,
    /// Truncated 2D box; `None` when the object does not project into the image.
    pub bbox2d: Option<Box2D>,
    /// Virtual-depth training target, set by scale augmentation.
    pub depth_target: Option<f64>,
}

impl Annotation {
    pub fn new(id: u64, box3d: Box3D) -> Self {
        Self { id, box3d, bbox2d: None, depth_target: None }
    }

    /// Annotation with its 2D box computed from the 3D box.
    pub fn projected(id: u64, box3d: Box3D, k: &CameraIntrinsics, size: (u32, u32)) -> Self {
        let bbox2d = project_box_to_2d(&box3d, k, size);
        Self { id, box3d, bbox2d, depth_target: None }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct ImageRecord {
    pub id: String,
    /// Image path relative to the manifest's directory.
    pub file_name: String,
    pub width: u32,
    pub height: u32,
    pub frame_index: u64,
    pub intrinsics: CameraIntrinsics,
    pub ground_plane: Option<GroundPlane>,
    pub annotations: Vec<Annotation>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct DatasetManifest {
    pub split: String,
    pub categories: Vec<Category>,
    pub images: Vec<ImageRecord>,
}

/// An image with its camera and labels.
#[derive(Debug, Clone, PartialEq)]
pub struct Sample {
    pub image_id: String,
    pub frame_index: u64,
    pub image: RgbImage,
    pub intrinsics: CameraIntrinsics,
    pub ground_plane: Option<GroundPlane>,
    pub annotations: Vec<Annotation>,
}

impl Sample {
    pub fn size(&self) -> (u32, u32) {
        self.image.dimensions()
    }

    pub fn boxes(&self) -> impl Iterator<Item = &Box3D> {
        self.annotations.iter().map(|a| &a.box3d)
    }

    pub fn next_annotation_id(&self) -> u64 {
        self.annotations.iter().map(|a| a.id + 1).max().unwrap_or(0)
    }

    pub fn to_record(&self, file_name: impl Into<String>) -> ImageRecord {
        ImageRecord {
            id: self.image_id.clone(),
            file_name: file_name.into(),
            width: self.image.width(),
            height: self.image.height(),
            frame_index: self.frame_index,
            intrinsics: self.intrinsics,
            ground_plane: self.ground_plane,
            annotations: self.annotations.clone(),
        }
    }
}

impl ImageRecord {
    pub fn size(&self) -> (u32, u32) {
        (self.width, self.height)
    }

    pub fn image_path(&self, root: &Path) -> PathBuf {
        root.join(&self.file_name)
    }

    pub fn into_sample(self, image: RgbImage) -> Sample {
        Sample {
            image_id: self.id,
            frame_index: self.frame_index,
            image,
            intrinsics: self.intrinsics,
            ground_plane: self.ground_plane,
            annotations: self.annotations,
        }
    }

    /// Reads the image from disk and checks its size against the record.
    pub fn load_sample(&self, root: &Path) -> Result<Sample, DatasetError> {
        let path = self.image_path(root);
        let image = imaging::load_rgb(&path).map_err(|e| DatasetError::image(&path, e))?;
        if image.dimensions() != self.size() {
            return Err(DatasetError::Validation(vec![format!(
                "image {}: file is {}x{}, manifest says {}x{}",
                self.id,
                image.width(),
                image.height(),
                self.width,
                self.height
            )]));
        }
        Ok(self.clone().into_sample(image))
    }
}

impl DatasetManifest {
    pub fn new(split: impl Into<String>, categories: Vec<Category>) -> Self {
        Self { split: split.into(), categories, images: Vec::new() }
    }

    pub fn box_count(&self) -> usize {
        self.images.iter().map(|i| i.annotations.len()).sum()
    }

    pub fn image(&self, id: &str) -> Option<&ImageRecord> {
        self.images.iter().find(|i| i.id == id)
    }

    pub fn category_by_name(&self, name: &str) -> Option<&Category> {
        self.categories.iter().find(|c| c.name == name)
    }

    pub fn category_name(&self, id: u32) -> Option<&str> {
        self.categories.iter().find(|c| c.id == id).map(|c| c.name.as_str())
    }

    /// Parses and validates manifest JSON.
    pub fn from_json(text: &str, origin: &Path) -> Result<Self, DatasetError> {
        let file: ManifestFile = serde_json::from_str(text).map_err(|e| DatasetError::Parse {
            path: origin.to_path_buf(),
            line: e.line(),
            column: e.column(),
            message: e.to_string(),
        })?;
        file.into_manifest()
    }

    pub fn to_json(&self) -> String {
        let mut text = serde_json::to_string_pretty(&ManifestFile::from_manifest(self))
            .expect("manifest serialization cannot fail");
        text.push('\n');
        text
    }

    /// Checks the invariants that [`load_manifest`] enforces.
    pub fn validate(&self) -> Result<(), DatasetError> {
        ManifestFile::from_manifest(self).into_manifest().map(|_| ())
    }
}

pub fn load_manifest(path: &Path) -> Result<DatasetManifest, DatasetError> {
    let text = std::fs::read_to_string(path).map_err(|e| DatasetError::io(path, e))?;
    DatasetManifest::from_json(&text, path)
}

pub fn save_manifest(m: &DatasetManifest, path: &Path) -> Result<(), DatasetError> {
    std::fs::write(path, m.to_json()).map_err(|e| DatasetError::io(path, e))
}

// ---------------------------------------------------------------------------
// JSON schema

#[derive(Serialize, Deserialize)]
struct ManifestFile {
    schema_version: u32,
    #[serde(default)]
    split: String,
    categories: Vec<Category>,
    images: Vec<ImageJson>,
    annotations: Vec<AnnotationJson>,
}

#[derive(Serialize, Deserialize)]
struct ImageJson {
    id: String,
    file_name: String,
    width: u32,
    height: u32,
    #[serde(default)]
    frame_index: u64,
    #[serde(rename = "K")]
    k: [[f64; 3]; 3],
    #[serde(default, skip_serializing_if = "Option::is_none")]
    ground_plane: Option<PlaneJson>,
}

#[derive(Serialize, Deserialize)]
struct PlaneJson {
    normal: [f64; 3],
    offset: f64,
}

#[derive(Serialize, Deserialize)]
struct AnnotationJson {
    id: u64,
    image_id: String,
    category_id: u32,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    track_id: Option<u64>,
    center_cam: [f64; 3],
    dimensions: [f64; 3],
    #[serde(rename = "R_cam")]
    r_cam: [f64; 9],
    #[serde(default, skip_serializing_if = "Option::is_none")]
    bbox2d: Option<[f64; 4]>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    score: Option<f64>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    depth_target: Option<f64>,
}

impl ManifestFile {
    fn from_manifest(m: &DatasetManifest) -> Self {
        let images = m
            .images
            .iter()
            .map(|img| ImageJson {
                id: img.id.clone(),
                file_name: img.file_name.clone(),
                width: img.width,
                height: img.height,
                frame_index: img.frame_index,
                k: img.intrinsics.to_matrix(),
                ground_plane: img.ground_plane.map(|p| PlaneJson { normal: p.normal.into(), offset: p.offset }),
            })
            .collect();
        let annotations = m
            .images
            .iter()
            .flat_map(|img| {
                img.annotations.iter().map(move |a| {
                    let b = &a.box3d;
                    AnnotationJson {
                        id: a.id,
                        image_id: img.id.clone(),
                        category_id: b.category,
                        track_id: b.track_id,
                        center_cam: b.center.into(),
                        dimensions: [b.dims.w, b.dims.h, b.dims.l],
                        r_cam: b.rotation.to_row_major(),
                        bbox2d: a.bbox2d.map(|r| r.to_array()),
                        score: b.score,
                        depth_target: a.depth_target,
                    }
                })
            })
            .collect();
        Self {
            schema_version: SCHEMA_VERSION,
            split: m.split.clone(),
            categories: m.categories.clone(),
            images,
            annotations,
        }
    }

    fn into_manifest(self) -> Result<DatasetManifest, DatasetError> {
        let mut problems = Vec::new();
        if self.schema_version != SCHEMA_VERSION {
            problems.push(format!(
                "unsupported schema_version {} (expected {SCHEMA_VERSION})",
                self.schema_version
            ));
        }

        let mut category_ids = HashSet::new();
        for c in &self.categories {
            if !category_ids.insert(c.id) {
                problems.push(format!("duplicate category id {}", c.id));
            }
        }

        let mut images = Vec::with_capacity(self.images.len());
        let mut index_of = HashMap::new();
        for img in self.images {
            let ctx = format!("image {}", img.id);
            if index_of.contains_key(&img.id) {
                problems.push(format!("{ctx}: duplicate image id"));
                continue;
            }
            if img.width == 0 || img.height == 0 {
                problems.push(format!("{ctx}: image size must be positive"));
            }
            let intrinsics = match CameraIntrinsics::from_matrix(&img.k) {
                Ok(k) => k,
                Err(e) => {
                    problems.push(format!("{ctx}: {e}"));
                    continue;
                }
            };
            let ground_plane = match img.ground_plane {
                None => None,
                Some(p) => match GroundPlane::new(Point3::from(p.normal), p.offset) {
                    Ok(p) if p.offset.is_finite() => Some(p),
                    Ok(_) => {
                        problems.push(format!("{ctx}: ground plane offset is not finite"));
                        None
                    }
                    Err(e) => {
                        problems.push(format!("{ctx}: ground plane: {e}"));
                        None
                    }
                },
            };
            index_of.insert(img.id.clone(), images.len());
            images.push(ImageRecord {
                id: img.id,
                file_name: img.file_name,
                width: img.width,
                height: img.height,
                frame_index: img.frame_index,
                intrinsics,
                ground_plane,
                annotations: Vec::new(),
            });
        }

        let mut annotation_ids = HashSet::new();
        let mut track_ids: HashSet<(usize, u64)> = HashSet::new();
        for a in self.annotations {
            let ctx = format!("annotation {} (image {})", a.id, a.image_id);
            if !annotation_ids.insert(a.id) {
                problems.push(format!("{ctx}: duplicate annotation id"));
            }
            let Some(&img_idx) = index_of.get(&a.image_id) else {
                problems.push(format!("{ctx}: unknown image id"));
                continue;
            };
            if !category_ids.contains(&a.category_id) {
                problems.push(format!("{ctx}: unknown category id {}", a.category_id));
            }
            if let Some(t) = a.track_id {
                if !track_ids.insert((img_idx, t)) {
                    problems.push(format!("{ctx}: track id {t} repeated within the frame"));
                }
            }
            let [w, h, l] = a.dimensions;
            let dims = match Dims::new(w, h, l) {
                Ok(d) => d,
                Err(_) => {
                    problems.push(format!("{ctx}: dimensions must be positive, got [{w}, {h}, {l}]"));
                    continue;
                }
            };
            let center = Point3::from(a.center_cam);
            if !center.iter().all(|v| v.is_finite()) || !(center.z > 0.0) {
                problems.push(format!("{ctx}: center must be finite with z > 0, got {:?}", a.center_cam));
                continue;
            }
            let rotation = match Rotation3::try_from_row_major(&a.r_cam) {
                Ok(r) => r,
                Err(e) => {
                    problems.push(format!("{ctx}: R_cam: {e}"));
                    continue;
                }
            };
            if let Some(s) = a.score {
                if !(0.0..=1.0).contains(&s) {
                    problems.push(format!("{ctx}: score {s} outside [0, 1]"));
                }
            }
            if let Some(d) = a.depth_target {
                if !(d > 0.0 && d.is_finite()) {
                    problems.push(format!("{ctx}: depth_target must be positive"));
                }
            }
            let bbox2d = match a.bbox2d {
                Some([x1, y1, x2, y2]) => {
                    if !(x2 >= x1 && y2 >= y1) || ![x1, y1, x2, y2].iter().all(|v| v.is_finite()) {
                        problems.push(format!("{ctx}: malformed bbox2d {:?}", [x1, y1, x2, y2]));
                    }
                    Some(Box2D::new(x1, y1, x2, y2))
                }
                None => None,
            };
            let record = &mut images[img_idx];
            let box3d = Box3D {
                center,
                dims,
                rotation,
                category: a.category_id,
                track_id: a.track_id,
                score: a.score,
            };
            let bbox2d = bbox2d.or_else(|| project_box_to_2d(&box3d, &record.intrinsics, record.size()));
            record.annotations.push(Annotation { id: a.id, box3d, bbox2d, depth_target: a.depth_target });
        }

        if !problems.is_empty() {
            return Err(DatasetError::Validation(problems));
        }
        Ok(DatasetManifest { split: self.split, categories: self.categories, images })
    }
}

// ---------------------------------------------------------------------------
// Statistics

/// Fixed-width histogram. With `overflow`, an extra last bin (lower edge =
/// range end) collects values at or above the range end. Values below the
/// range go to the first bin and values past it (without overflow) to the
/// last, so the total count always equals the number of values added.
#[derive(Debug, Clone, PartialEq)]
pub struct Histogram {
    pub start: f64,
    pub bin_width: f64,
    pub counts: Vec<u64>,
    pub overflow: bool,
}

impl Histogram {
    pub fn new(start: f64, end: f64, bins: usize, overflow: bool) -> Self {
        assert!(end > start && bins > 0);
        Self { start, bin_width: (end - start) / bins as f64, counts: vec![0; bins + overflow as usize], overflow }
    }

    fn regular_bins(&self) -> usize {
        self.counts.len() - self.overflow as usize
    }

    pub fn end(&self) -> f64 {
        self.start + self.bin_width * self.regular_bins() as f64
    }

    pub fn bin_of(&self, v: f64) -> usize {
        let n = self.regular_bins();
        if self.overflow && v >= self.end() {
            return n;
        }
        let idx = ((v - self.start) / self.bin_width).floor();
        if idx < 0.0 {
            0
        } else {
            (idx as usize).min(n - 1)
        }
    }

    pub fn add(&mut self, v: f64) {
        let b = self.bin_of(v);
        self.counts[b] += 1;
    }

    pub fn lower_edge(&self, bin: usize) -> f64 {
        self.start + self.bin_width * bin as f64
    }

    pub fn total(&self) -> u64 {
        self.counts.iter().sum()
    }

    /// `lower_edge,count` rows with a header line.
    pub fn to_csv(&self) -> String {
        let mut out = String::from("lower_edge,count\n");
        for (i, c) in self.counts.iter().enumerate() {
            writeln!(out, "{},{}", self.lower_edge(i), c).unwrap();
        }
        out
    }
}

pub const DEPTH_BIN_WIDTH: f64 = 5.0;
pub const DEPTH_RANGE: (f64, f64) = (0.0, 200.0);
pub const ROTATION_BINS: usize = 36;
pub const DIMENSION_BIN_WIDTH: f64 = 0.25;
pub const DIMENSION_RANGE: (f64, f64) = (0.0, 20.0);

/// Where the rotation statistic takes its ground plane from.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum PlaneSource {
    /// Skip the rotation histogram.
    Skip,
    /// Use the plane stored in the manifest; images without one are an error.
    Stored,
    /// Fit on the image's boxes; images where fitting fails are skipped.
    Fitted,
    /// Stored plane when present, otherwise fitted.
    StoredOrFitted,
}

#[derive(Debug, Clone, PartialEq)]
pub struct DatasetStats {
    pub box_count: u64,
    pub depth: Histogram,
    /// Heading angle about the ground normal, in `[−π, π]`.
    pub rotation: Option<Histogram>,
    /// Boxes left out of the rotation histogram (no usable plane or heading along the normal).
    pub rotation_skipped: u64,
    pub width: Histogram,
    pub height: Histogram,
    pub length: Histogram,
    pub category_counts: BTreeMap<u32, u64>,
}

/// Heading of a box about the plane normal: the box length axis projected
/// onto the plane, as an angle in the plane's tangent basis.
pub fn heading_on_plane(b: &Box3D, plane: &GroundPlane) -> Option<f64> {
    let heading = b.rotation.column(2);
    let n = plane.normal;
    let tangent = heading - n * n.dot(&heading);
    if tangent.norm() < 1e-9 {
        return None;
    }
    let (t1, t2) = plane.tangent_basis();
    Some(tangent.dot(&t2).atan2(tangent.dot(&t1)))
}

fn dims_histogram() -> Histogram {
    let bins = ((DIMENSION_RANGE.1 - DIMENSION_RANGE.0) / DIMENSION_BIN_WIDTH).round() as usize;
    Histogram::new(DIMENSION_RANGE.0, DIMENSION_RANGE.1, bins, true)
}

pub fn compute_stats(m: &DatasetManifest, plane_source: PlaneSource) -> Result<DatasetStats, DatasetError> {
    let depth_bins = ((DEPTH_RANGE.1 - DEPTH_RANGE.0) / DEPTH_BIN_WIDTH).round() as usize;
    let mut stats = DatasetStats {
        box_count: 0,
        depth: Histogram::new(DEPTH_RANGE.0, DEPTH_RANGE.1, depth_bins, true),
        rotation: (plane_source != PlaneSource::Skip).then(|| {
            Histogram::new(-std::f64::consts::PI, std::f64::consts::PI, ROTATION_BINS, false)
        }),
        rotation_skipped: 0,
        width: dims_histogram(),
        height: dims_histogram(),
        length: dims_histogram(),
        category_counts: BTreeMap::new(),
    };
    for img in &m.images {
        let plane = match plane_source {
            PlaneSource::Skip => None,
            PlaneSource::Stored => {
                Some(img.ground_plane.ok_or_else(|| DatasetError::MissingPlane(img.id.clone()))?)
            }
            PlaneSource::Fitted => plane::fit_boxes(img.annotations.iter().map(|a| &a.box3d)).ok(),
            PlaneSource::StoredOrFitted => img
                .ground_plane
                .or_else(|| plane::fit_boxes(img.annotations.iter().map(|a| &a.box3d)).ok()),
        };
        for a in &img.annotations {
            let b = &a.box3d;
            stats.box_count += 1;
            stats.depth.add(b.center.z);
            stats.width.add(b.dims.w);
            stats.height.add(b.dims.h);
            stats.length.add(b.dims.l);
            *stats.category_counts.entry(b.category).or_default() += 1;
            if let Some(hist) = stats.rotation.as_mut() {
                match plane.as_ref().and_then(|p| heading_on_plane(b, p)) {
                    Some(angle) => hist.add(angle),
                    None => stats.rotation_skipped += 1,
                }
            }
        }
    }
    Ok(stats)
}

impl DatasetStats {
    pub fn categories_csv(&self, m: &DatasetManifest) -> String {
        let mut out = String::from("category,count\n");
        for (id, count) in &self.category_counts {
            let name = m.category_name(*id).map(str::to_owned).unwrap_or_else(|| id.to_string());
            writeln!(out, "{name},{count}").unwrap();
        }
        out
    }
}

// ---------------------------------------------------------------------------
// Overlays

pub const WIREFRAME_COLOR: Rgb<u8> = Rgb([0, 255, 0]);
pub const BOX2D_COLOR: Rgb<u8> = Rgb([255, 0, 0]);

/// Liang-Barsky clip of segment `a → b` to the rectangle `[lo, hi]`.
fn clip_segment(a: Pixel, b: Pixel, lo: Pixel, hi: Pixel) -> Option<(Pixel, Pixel)> {
    let d = b - a;
    let (mut t0, mut t1) = (0.0f64, 1.0f64);
    for (p, q) in [
        (-d.x, a.x - lo.x),
        (d.x, hi.x - a.x),
        (-d.y, a.y - lo.y),
        (d.y, hi.y - a.y),
    ] {
        if p == 0.0 {
            if q < 0.0 {
                return None;
            }
        } else {
            let t = q / p;
            if p < 0.0 {
                t0 = t0.max(t);
            } else {
                t1 = t1.min(t);
            }
            if t0 > t1 {
                return None;
            }
        }
    }
    Some((a + d * t0, a + d * t1))
}

fn draw_segment(img: &mut RgbImage, a: Pixel, b: Pixel, color: Rgb<u8>) {
    // Pixel centers sit at +0.5; imageproc addresses pixels by their index.
    let half = Pixel::new(0.5, 0.5);
    let hi = Pixel::new(img.width() as f64 - 1.0, img.height() as f64 - 1.0);
    if let Some((p, q)) = clip_segment(a - half, b - half, Pixel::zeros(), hi) {
        draw_line_segment_mut(img, (p.x as f32, p.y as f32), (q.x as f32, q.y as f32), color);
    }
}

/// Draws projected 3D wireframes and 2D boxes onto a copy of the image.
pub fn overlay(s: &Sample) -> RgbImage {
    let mut img = s.image.clone();
    for a in &s.annotations {
        for (p, q) in project_box_edges(&a.box3d, &s.intrinsics) {
            draw_segment(&mut img, p, q, WIREFRAME_COLOR);
        }
        if let Some(r) = a.bbox2d {
            let c = r.corners();
            for i in 0..4 {
                draw_segment(&mut img, c[i], c[(i + 1) % 4], BOX2D_COLOR);
            }
        }
    }
    img
}

pub fn render_overlay(s: &Sample, out_path: &Path) -> Result<(), DatasetError> {
    imaging::save_png(&overlay(s), out_path).map_err(|e| DatasetError::image(out_path, e))
}
