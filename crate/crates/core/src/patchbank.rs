//! Patch buffer and hard-example mining.
//!
//! Every accepted object crop is stored with the focal length and depth of
//! its source camera plus a difficulty score. Scores start at `f64::MAX` so
//! that unseen patches rank first, and are later replaced by an external
//! per-object loss signal.
//!
//! Sampling splits the depth range into equal bins, picks a non-empty bin
//! uniformly and then draws uniformly among the hardest `m` fraction of that
//! bin. Binning keeps distant objects (which carry larger depth losses) from
//! dominating the draw.

use std::collections::{HashMap, HashSet, VecDeque};
use std::path::Path;
use std::sync::Arc;

use image::RgbImage;
use rand::Rng;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::dataset::{Annotation, DatasetError, Sample};
use crate::geometry::{project_box_to_2d, Box2D, Box3D, Dims, Pixel, Point3, Rotation3};
use crate::imaging;
use crate::plane::bottom_center;

pub const DEFAULT_DEPTH_BINS: usize = 6;
pub const DEFAULT_HARD_FRACTION: f64 = 0.20;
pub const DEFAULT_CAPACITY: usize = 10_000;
/// Largest allowed share of a crop covered by another object's 2D box.
pub const INTRUSION_THRESHOLD: f64 = 0.35;
/// Difficulty of a patch that has not been scored yet.
pub const INITIAL_DIFFICULTY: f64 = f64::MAX;

#[derive(Debug, Error)]
pub enum PatchError {
    #[error("object {uid} is intruded by annotation {other} ({:.0}% of the crop)", fraction * 100.0)]
    RejectedIntrusion { uid: String, other: u64, fraction: f64 },
    #[error("object {0} has no visible 2D extent")]
    RejectedDegenerate(String),
    #[error("unknown patch {0}")]
    UnknownUid(String),
    #[error("difficulty must be a non-negative number, got {0}")]
    InvalidScore(f64),
    #[error("patch bank is empty")]
    EmptyBank,
    #[error("invalid bank configuration: {0}")]
    InvalidConfig(String),
    #[error(transparent)]
    Dataset(#[from] DatasetError),
}

/// A cropped object with everything needed to paste it elsewhere.
#[derive(Debug, Clone, PartialEq)]
pub struct Patch {
    pub object_uid: String,
    pub source_image_id: String,
    pub pixels: RgbImage,
    /// Focal length of the source camera, `f_p`.
    pub source_focal: f64,
    /// Depth of the object center in the source camera, `z_p`.
    pub source_depth: f64,
    /// Source label; its center is relative to the source camera.
    pub label: Box3D,
    /// Integer crop rectangle in the source image.
    pub crop: Box2D,
    /// Projected bottom center relative to the crop's top-left corner.
    pub anchor: Pixel,
}

/// Stable identifier of an annotation across runs.
pub fn object_uid(image_id: &str, annotation_id: u64) -> String {
    format!("{image_id}/{annotation_id}")
}

/// Cuts the patch for `annotation` out of `sample`, applying the intrusion filter.
pub fn extract_patch(sample: &Sample, annotation: &Annotation) -> Result<Patch, PatchError> {
    let uid = object_uid(&sample.image_id, annotation.id);
    let (w, h) = sample.size();
    let visible = annotation
        .bbox2d
        .map(|b| b.clip_to_image(w as f64, h as f64))
        .or_else(|| project_box_to_2d(&annotation.box3d, &sample.intrinsics, (w, h)))
        .filter(|b| !b.is_empty())
        .ok_or_else(|| PatchError::RejectedDegenerate(uid.clone()))?;
    let crop = Box2D::new(
        visible.x1.floor().max(0.0),
        visible.y1.floor().max(0.0),
        visible.x2.ceil().min(w as f64),
        visible.y2.ceil().min(h as f64),
    );
    if crop.is_empty() {
        return Err(PatchError::RejectedDegenerate(uid));
    }
    for other in &sample.annotations {
        if other.id == annotation.id {
            continue;
        }
        if let Some(ob) = other.bbox2d {
            let fraction = ob.intersection_area(&crop) / crop.area();
            if fraction > INTRUSION_THRESHOLD {
                return Err(PatchError::RejectedIntrusion { uid, other: other.id, fraction });
            }
        }
    }
    let bottom = sample
        .intrinsics
        .project(&bottom_center(&annotation.box3d))
        .map_err(|_| PatchError::RejectedDegenerate(uid.clone()))?;
    let pixels = image::imageops::crop_imm(
        &sample.image,
        crop.x1 as u32,
        crop.y1 as u32,
        crop.width() as u32,
        crop.height() as u32,
    )
    .to_image();
    Ok(Patch {
        object_uid: uid,
        source_image_id: sample.image_id.clone(),
        pixels,
        source_focal: sample.intrinsics.focal(),
        source_depth: annotation.box3d.center.z,
        label: annotation.box3d.clone(),
        crop,
        anchor: bottom - Pixel::new(crop.x1, crop.y1),
    })
}

#[derive(Debug, Clone, PartialEq)]
pub struct BankConfig {
    /// Number of equal-width depth bins, `b`.
    pub depth_bins: usize,
    /// Share of the hardest patches per bin that may be drawn, `m`.
    pub hard_fraction: f64,
    /// Maximum number of stored patches; the oldest are evicted first.
    pub capacity: usize,
    /// Fixed depth range for binning; observed min/max of stored patches when `None`.
    pub depth_range: Option<(f64, f64)>,
}

impl Default for BankConfig {
    fn default() -> Self {
        Self {
            depth_bins: DEFAULT_DEPTH_BINS,
            hard_fraction: DEFAULT_HARD_FRACTION,
            capacity: DEFAULT_CAPACITY,
            depth_range: None,
        }
    }
}

impl BankConfig {
    pub fn validate(&self) -> Result<(), PatchError> {
        if self.depth_bins == 0 {
            return Err(PatchError::InvalidConfig("depth_bins must be at least 1".into()));
        }
        if !(self.hard_fraction > 0.0 && self.hard_fraction <= 1.0) {
            return Err(PatchError::InvalidConfig(format!(
                "hard_fraction must be in (0, 1], got {}",
                self.hard_fraction
            )));
        }
        if self.capacity == 0 {
            return Err(PatchError::InvalidConfig("capacity must be at least 1".into()));
        }
        if let Some((lo, hi)) = self.depth_range {
            if !(hi >= lo && lo.is_finite() && hi.is_finite()) {
                return Err(PatchError::InvalidConfig(format!("bad depth range [{lo}, {hi}]")));
            }
        }
        Ok(())
    }

    /// Number of candidates among `n` bin members: `⌈m·n⌉`, at least one.
    pub fn hard_count(&self, n: usize) -> usize {
        // The small slack keeps products like 0.2 · 15 from rounding up to 4.
        ((self.hard_fraction * n as f64 - 1e-9).ceil() as usize).clamp(1, n.max(1))
    }
}

/// Mutable patch store. Writers take `&mut`; samplers work on a
/// [`BankSnapshot`], which is unaffected by later writes.
#[derive(Debug, Clone)]
pub struct PatchBank {
    config: BankConfig,
    order: VecDeque<String>,
    patches: HashMap<String, Arc<Patch>>,
    scores: HashMap<String, f64>,
}

impl PatchBank {
    pub fn new(config: BankConfig) -> Result<Self, PatchError> {
        config.validate()?;
        Ok(Self { config, order: VecDeque::new(), patches: HashMap::new(), scores: HashMap::new() })
    }

    pub fn config(&self) -> &BankConfig {
        &self.config
    }

    pub fn len(&self) -> usize {
        self.order.len()
    }

    pub fn is_empty(&self) -> bool {
        self.order.is_empty()
    }

    pub fn get(&self, uid: &str) -> Option<&Arc<Patch>> {
        self.patches.get(uid)
    }

    pub fn difficulty(&self, uid: &str) -> Option<f64> {
        self.scores.get(uid).copied()
    }

    /// Uids in insertion order.
    pub fn uids(&self) -> impl Iterator<Item = &str> {
        self.order.iter().map(String::as_str)
    }

    /// Extracts and stores the patch for `annotation`; the score starts at
    /// [`INITIAL_DIFFICULTY`]. Re-inserting a uid replaces the old patch.
    pub fn insert_patch(&mut self, sample: &Sample, annotation: &Annotation) -> Result<String, PatchError> {
        let patch = extract_patch(sample, annotation)?;
        Ok(self.insert(patch, INITIAL_DIFFICULTY))
    }

    /// Stores a ready-made patch with the given score.
    pub fn insert(&mut self, patch: Patch, difficulty: f64) -> String {
        let uid = patch.object_uid.clone();
        if self.patches.contains_key(&uid) {
            self.order.retain(|u| *u != uid);
        }
        while self.order.len() >= self.config.capacity {
            if let Some(old) = self.order.pop_front() {
                self.patches.remove(&old);
                self.scores.remove(&old);
            }
        }
        self.order.push_back(uid.clone());
        self.patches.insert(uid.clone(), Arc::new(patch));
        self.scores.insert(uid.clone(), difficulty);
        uid
    }

    /// Inserts every acceptable object of `sample`; returns accepted uids and rejections.
    pub fn insert_sample(&mut self, sample: &Sample) -> (Vec<String>, Vec<PatchError>) {
        let mut accepted = Vec::new();
        let mut rejected = Vec::new();
        for a in &sample.annotations {
            match self.insert_patch(sample, a) {
                Ok(uid) => accepted.push(uid),
                Err(e) => rejected.push(e),
            }
        }
        (accepted, rejected)
    }

    pub fn update_difficulty(&mut self, uid: &str, score: f64) -> Result<(), PatchError> {
        if !(score >= 0.0) {
            return Err(PatchError::InvalidScore(score));
        }
        match self.scores.get_mut(uid) {
            Some(s) => {
                *s = score;
                Ok(())
            }
            None => Err(PatchError::UnknownUid(uid.to_owned())),
        }
    }

    pub fn snapshot(&self) -> BankSnapshot {
        let entries = self
            .order
            .iter()
            .map(|uid| (Arc::clone(&self.patches[uid]), self.scores[uid]))
            .collect();
        BankSnapshot { config: self.config.clone(), entries }
    }

    pub fn sample_hard_patches<R: Rng + ?Sized>(&self, rng: &mut R, count: usize) -> Result<Vec<Arc<Patch>>, PatchError> {
        self.snapshot().sample_hard_patches(rng, count)
    }
}

/// Immutable view of a bank: patches in insertion order with their scores.
#[derive(Debug, Clone)]
pub struct BankSnapshot {
    config: BankConfig,
    entries: Vec<(Arc<Patch>, f64)>,
}

impl BankSnapshot {
    pub fn len(&self) -> usize {
        self.entries.len()
    }

    pub fn is_empty(&self) -> bool {
        self.entries.is_empty()
    }

    pub fn config(&self) -> &BankConfig {
        &self.config
    }

    pub fn depth_range(&self) -> Option<(f64, f64)> {
        self.config.depth_range.or_else(|| {
            let depths = self.entries.iter().map(|(p, _)| p.source_depth);
            let lo = depths.clone().fold(f64::INFINITY, f64::min);
            let hi = depths.fold(f64::NEG_INFINITY, f64::max);
            (lo <= hi).then_some((lo, hi))
        })
    }

    /// Bin of depth `z`: the number of interior bin edges at or below `z`,
    /// so a depth exactly on an edge belongs to the upper bin.
    pub fn bin_of(&self, z: f64) -> usize {
        let Some((lo, hi)) = self.depth_range() else { return 0 };
        let b = self.config.depth_bins;
        (1..b).filter(|&k| lo + (hi - lo) * k as f64 / b as f64 <= z).count()
    }

    /// For every bin, the entry indices eligible for sampling (hardest first).
    pub fn candidates(&self) -> Vec<Vec<usize>> {
        let mut bins = vec![Vec::new(); self.config.depth_bins];
        for (i, (p, _)) in self.entries.iter().enumerate() {
            bins[self.bin_of(p.source_depth)].push(i);
        }
        for members in &mut bins {
            // Stable: equal scores keep insertion order.
            members.sort_by(|&a, &b| self.entries[b].1.total_cmp(&self.entries[a].1));
            let keep = self.config.hard_count(members.len());
            members.truncate(keep);
        }
        bins
    }

    /// Draws `count` patches: a uniformly chosen non-empty depth bin, then a
    /// uniform pick among that bin's hardest `m` fraction. Within one call a
    /// patch is not repeated until every candidate has been drawn.
    pub fn sample_hard_patches<R: Rng + ?Sized>(&self, rng: &mut R, count: usize) -> Result<Vec<Arc<Patch>>, PatchError> {
        if self.entries.is_empty() {
            return Err(PatchError::EmptyBank);
        }
        let candidates = self.candidates();
        let mut drawn: HashSet<usize> = HashSet::new();
        let mut out = Vec::with_capacity(count);
        for _ in 0..count {
            let mut open: Vec<Vec<usize>> = candidates
                .iter()
                .map(|c| c.iter().copied().filter(|i| !drawn.contains(i)).collect::<Vec<_>>())
                .filter(|c| !c.is_empty())
                .collect();
            if open.is_empty() {
                drawn.clear();
                open = candidates.iter().filter(|c| !c.is_empty()).cloned().collect();
            }
            let bin = &open[rng.random_range(0..open.len())];
            let pick = bin[rng.random_range(0..bin.len())];
            drawn.insert(pick);
            out.push(Arc::clone(&self.entries[pick].0));
        }
        Ok(out)
    }
}

// ---------------------------------------------------------------------------
// On-disk cache: `patch_NNNNN.png` + `patch_NNNNN.json` per patch, in
// insertion order.

#[derive(Serialize, Deserialize)]
struct PatchSidecar {
    object_uid: String,
    source_image_id: String,
    source_focal: f64,
    source_depth: f64,
    /// `null` encodes an infinite score.
    difficulty: Option<f64>,
    crop: [f64; 4],
    anchor: [f64; 2],
    category_id: u32,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    track_id: Option<u64>,
    center_cam: [f64; 3],
    dimensions: [f64; 3],
    #[serde(rename = "R_cam")]
    r_cam: [f64; 9],
}

impl PatchBank {
    pub fn save_to_dir(&self, dir: &Path) -> Result<(), PatchError> {
        std::fs::create_dir_all(dir).map_err(|e| DatasetError::io(dir, e))?;
        for (i, uid) in self.order.iter().enumerate() {
            let p = &self.patches[uid];
            let score = self.scores[uid];
            let png = dir.join(format!("patch_{i:05}.png"));
            imaging::save_png(&p.pixels, &png).map_err(|e| DatasetError::image(&png, e))?;
            let sidecar = PatchSidecar {
                object_uid: uid.clone(),
                source_image_id: p.source_image_id.clone(),
                source_focal: p.source_focal,
                source_depth: p.source_depth,
                difficulty: score.is_finite().then_some(score),
                crop: p.crop.to_array(),
                anchor: [p.anchor.x, p.anchor.y],
                category_id: p.label.category,
                track_id: p.label.track_id,
                center_cam: p.label.center.into(),
                dimensions: [p.label.dims.w, p.label.dims.h, p.label.dims.l],
                r_cam: p.label.rotation.to_row_major(),
            };
            let json = dir.join(format!("patch_{i:05}.json"));
            let text = serde_json::to_string_pretty(&sidecar).expect("sidecar serialization cannot fail");
            std::fs::write(&json, text).map_err(|e| DatasetError::io(&json, e))?;
        }
        Ok(())
    }

    pub fn load_from_dir(dir: &Path, config: BankConfig) -> Result<Self, PatchError> {
        let mut bank = Self::new(config)?;
        let mut sidecars: Vec<_> = std::fs::read_dir(dir)
            .map_err(|e| DatasetError::io(dir, e))?
            .filter_map(|e| e.ok().map(|e| e.path()))
            .filter(|p| {
                p.extension().is_some_and(|x| x == "json")
                    && p.file_name().is_some_and(|n| n.to_string_lossy().starts_with("patch_"))
            })
            .collect();
        sidecars.sort();
        for json in sidecars {
            let text = std::fs::read_to_string(&json).map_err(|e| DatasetError::io(&json, e))?;
            let s: PatchSidecar = serde_json::from_str(&text).map_err(|e| DatasetError::Parse {
                path: json.clone(),
                line: e.line(),
                column: e.column(),
                message: e.to_string(),
            })?;
            let invalid = |msg: String| PatchError::Dataset(DatasetError::Validation(vec![format!("{}: {msg}", json.display())]));
            let [w, h, l] = s.dimensions;
            let dims = Dims::new(w, h, l).map_err(|e| invalid(e.to_string()))?;
            let rotation = Rotation3::try_from_row_major(&s.r_cam).map_err(|e| invalid(e.to_string()))?;
            if !(s.source_depth > 0.0 && s.source_focal > 0.0) {
                return Err(invalid("source depth and focal must be positive".into()));
            }
            let png = json.with_extension("png");
            let pixels = imaging::load_rgb(&png).map_err(|e| DatasetError::image(&png, e))?;
            let label = Box3D {
                center: Point3::from(s.center_cam),
                dims,
                rotation,
                category: s.category_id,
                track_id: s.track_id,
                score: None,
            };
            let [x1, y1, x2, y2] = s.crop;
            let patch = Patch {
                object_uid: s.object_uid,
                source_image_id: s.source_image_id,
                pixels,
                source_focal: s.source_focal,
                source_depth: s.source_depth,
                label,
                crop: Box2D::new(x1, y1, x2, y2),
                anchor: Pixel::new(s.anchor[0], s.anchor[1]),
            };
            let score = s.difficulty.unwrap_or(f64::INFINITY);
            if !(score >= 0.0) {
                return Err(invalid(format!("negative difficulty {score}")));
            }
            bank.insert(patch, score);
        }
        Ok(bank)
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::geometry::CameraIntrinsics;
    use image::Rgb;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    fn sample_with(boxes: &[(u64, Box2D)]) -> Sample {
        let k = CameraIntrinsics::new(100.0, 100.0, 50.0, 50.0).unwrap();
        let annotations = boxes
            .iter()
            .map(|&(id, b)| {
                let label = Box3D::new(Point3::new(0.0, 0.5, 10.0), Dims::new(1.0, 1.0, 1.0).unwrap(), Rotation3::identity(), 0);
                Annotation { id, box3d: label, bbox2d: Some(b), depth_target: None }
            })
            .collect();
        Sample {
            image_id: "img".into(),
            frame_index: 0,
            image: RgbImage::from_fn(100, 100, |x, y| Rgb([x as u8, y as u8, 0])),
            intrinsics: k,
            ground_plane: None,
            annotations,
        }
    }

    pub(crate) fn fake_patch(uid: &str, depth: f64) -> Patch {
        let label = Box3D::new(Point3::new(0.0, 1.0, depth), Dims::new(1.6, 1.5, 4.0).unwrap(), Rotation3::identity(), 0);
        Patch {
            object_uid: uid.into(),
            source_image_id: "src".into(),
            pixels: RgbImage::from_pixel(4, 3, Rgb([1, 2, 3])),
            source_focal: 700.0,
            source_depth: depth,
            label,
            crop: Box2D::new(0.0, 0.0, 4.0, 3.0),
            anchor: Pixel::new(2.0, 3.0),
        }
    }

    fn bank_of(depths_scores: &[(f64, f64)]) -> PatchBank {
        let mut bank = PatchBank::new(BankConfig::default()).unwrap();
        for (i, &(z, s)) in depths_scores.iter().enumerate() {
            bank.insert(fake_patch(&format!("p{i}"), z), s);
        }
        bank
    }

    #[test]
    fn isolated_object_accepted() {
        let s = sample_with(&[(0, Box2D::new(10.2, 20.0, 30.7, 40.0)), (1, Box2D::new(70.0, 70.0, 90.0, 90.0))]);
        let mut bank = PatchBank::new(BankConfig::default()).unwrap();
        let uid = bank.insert_patch(&s, &s.annotations[0]).unwrap();
        assert_eq!(uid, "img/0");
        let p = bank.get(&uid).unwrap();
        assert_eq!(p.crop, Box2D::new(10.0, 20.0, 31.0, 40.0));
        assert_eq!(p.pixels.dimensions(), (21, 20));
        assert_eq!(p.pixels.get_pixel(0, 0).0, [10, 20, 0]);
        assert_eq!(bank.difficulty(&uid), Some(INITIAL_DIFFICULTY));
        // Bottom center (0, 1, 10) projects to (50, 60).
        assert_eq!(p.anchor, Pixel::new(40.0, 40.0));
    }

    #[test]
    fn half_covered_object_rejected() {
        let s = sample_with(&[(0, Box2D::new(0.0, 0.0, 20.0, 20.0)), (1, Box2D::new(10.0, 0.0, 40.0, 20.0))]);
        let mut bank = PatchBank::new(BankConfig::default()).unwrap();
        match bank.insert_patch(&s, &s.annotations[0]) {
            Err(PatchError::RejectedIntrusion { other, fraction, .. }) => {
                assert_eq!(other, 1);
                assert_eq!(fraction, 0.5);
            }
            other => panic!("unexpected {other:?}"),
        }
        // 30% coverage is below the cut-off.
        let s = sample_with(&[(0, Box2D::new(0.0, 0.0, 20.0, 20.0)), (1, Box2D::new(14.0, 0.0, 40.0, 20.0))]);
        assert!(bank.insert_patch(&s, &s.annotations[0]).is_ok());
    }

    #[test]
    fn outside_object_rejected() {
        let mut s = sample_with(&[(0, Box2D::new(0.0, 0.0, 1.0, 1.0))]);
        s.annotations[0].bbox2d = None;
        s.annotations[0].box3d.center = Point3::new(100.0, 0.0, 10.0);
        let mut bank = PatchBank::new(BankConfig::default()).unwrap();
        assert!(matches!(bank.insert_patch(&s, &s.annotations[0]), Err(PatchError::RejectedDegenerate(_))));
    }

    #[test]
    fn difficulty_updates() {
        let mut bank = bank_of(&[(10.0, INITIAL_DIFFICULTY), (20.0, INITIAL_DIFFICULTY)]);
        bank.update_difficulty("p0", 3.0).unwrap();
        bank.update_difficulty("p0", 1.5).unwrap();
        assert_eq!(bank.difficulty("p0"), Some(1.5));
        assert_eq!(bank.difficulty("p1"), Some(f64::MAX));
        assert!(matches!(bank.update_difficulty("p0", -1.0), Err(PatchError::InvalidScore(_))));
        assert!(matches!(bank.update_difficulty("p0", f64::NAN), Err(PatchError::InvalidScore(_))));
        assert!(matches!(bank.update_difficulty("nope", 1.0), Err(PatchError::UnknownUid(_))));
        bank.update_difficulty("p1", f64::INFINITY).unwrap();
    }

    #[test]
    fn empty_bank() {
        let bank = PatchBank::new(BankConfig::default()).unwrap();
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        assert!(matches!(bank.sample_hard_patches(&mut rng, 1), Err(PatchError::EmptyBank)));
    }

    #[test]
    fn single_patch_always_returned() {
        let bank = bank_of(&[(12.0, 0.0)]);
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        for _ in 0..20 {
            let got = bank.sample_hard_patches(&mut rng, 3).unwrap();
            assert!(got.iter().all(|p| p.object_uid == "p0"));
        }
    }

    #[test]
    fn hard_count_rounding() {
        let cfg = BankConfig::default();
        assert_eq!(cfg.hard_count(1), 1);
        assert_eq!(cfg.hard_count(5), 1);
        assert_eq!(cfg.hard_count(6), 2);
        assert_eq!(cfg.hard_count(10), 2);
        assert_eq!(cfg.hard_count(15), 3);
        assert_eq!(cfg.hard_count(16), 4);
    }

    #[test]
    fn bin_edges_go_up() {
        // Range [0, 60], six 10 m bins.
        let bank = bank_of(&[(0.0, 0.0), (60.0, 0.0)]);
        let snap = bank.snapshot();
        assert_eq!(snap.bin_of(0.0), 0);
        assert_eq!(snap.bin_of(9.999), 0);
        assert_eq!(snap.bin_of(10.0), 1);
        assert_eq!(snap.bin_of(50.0), 5);
        assert_eq!(snap.bin_of(60.0), 5);
    }

    #[test]
    fn within_call_draws_are_distinct() {
        let bank = bank_of(&[(10.0, 1.0), (10.0, 1.0), (10.0, 1.0), (10.0, 1.0), (10.0, 1.0), (50.0, 1.0)]);
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        // Candidates: top ⌈0.2·5⌉ = 1 of the near bin, plus the far patch.
        let got = bank.sample_hard_patches(&mut rng, 2).unwrap();
        let mut uids: Vec<_> = got.iter().map(|p| p.object_uid.as_str()).collect();
        uids.sort();
        assert_eq!(uids, ["p0", "p5"]);
        // Asking for more than the candidate pool starts over.
        assert_eq!(bank.sample_hard_patches(&mut rng, 5).unwrap().len(), 5);
    }

    #[test]
    fn capacity_evicts_oldest() {
        let mut bank = PatchBank::new(BankConfig { capacity: 2, ..BankConfig::default() }).unwrap();
        bank.insert(fake_patch("a", 10.0), 1.0);
        bank.insert(fake_patch("b", 10.0), 1.0);
        bank.insert(fake_patch("c", 10.0), 1.0);
        assert_eq!(bank.uids().collect::<Vec<_>>(), ["b", "c"]);
        assert!(bank.difficulty("a").is_none());
        bank.insert(fake_patch("b", 11.0), 5.0);
        assert_eq!(bank.uids().collect::<Vec<_>>(), ["c", "b"]);
    }

    #[test]
    fn snapshot_is_isolated_from_writes() {
        let mut bank = bank_of(&[(10.0, 1.0)]);
        let snap = bank.snapshot();
        bank.insert(fake_patch("late", 10.0), f64::INFINITY);
        bank.update_difficulty("p0", 0.0).unwrap();
        assert_eq!(snap.len(), 1);
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        assert_eq!(snap.sample_hard_patches(&mut rng, 1).unwrap()[0].object_uid, "p0");
    }

    #[test]
    fn invalid_config() {
        assert!(PatchBank::new(BankConfig { depth_bins: 0, ..BankConfig::default() }).is_err());
        assert!(PatchBank::new(BankConfig { hard_fraction: 0.0, ..BankConfig::default() }).is_err());
        assert!(PatchBank::new(BankConfig { depth_range: Some((5.0, 1.0)), ..BankConfig::default() }).is_err());
    }

    #[test]
    fn disk_round_trip() {
        let mut bank = bank_of(&[(10.0, 2.5), (30.0, INITIAL_DIFFICULTY)]);
        bank.update_difficulty("p1", f64::INFINITY).unwrap();
        let dir = tempfile::tempdir().unwrap();
        bank.save_to_dir(dir.path()).unwrap();
        let back = PatchBank::load_from_dir(dir.path(), BankConfig::default()).unwrap();
        assert_eq!(back.uids().collect::<Vec<_>>(), ["p0", "p1"]);
        assert_eq!(back.difficulty("p0"), Some(2.5));
        assert_eq!(back.difficulty("p1"), Some(f64::INFINITY));
        assert_eq!(**back.get("p0").unwrap(), **bank.get("p0").unwrap());
    }
}
