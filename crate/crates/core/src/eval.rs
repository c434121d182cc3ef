//! Detection metrics: exact 3D IoU for arbitrarily rotated cuboids and AP
//! with 40-point recall interpolation for 3D, 2D, depth and
//! depth-corrected 3D matching.

use std::collections::HashMap;
use std::fmt::Write as _;
use std::path::Path;

use serde::Deserialize;
use thiserror::Error;

use crate::dataset::{DatasetError, DatasetManifest};
use crate::geometry::{project_box_to_2d, Box2D, Box3D, Dims, Point3, Rotation3};

/// Number of recall sample points.
pub const RECALL_POINTS: usize = 40;
/// 3D IoU threshold for AP3D.
pub const IOU3D_THRESHOLD: f64 = 0.5;
/// 2D overlap required by the depth-based metrics (strictly greater than).
pub const DEPTH_MATCH_IOU2D: f64 = 0.7;
/// Depth tolerances in meters averaged by [`ap_depth`].
pub const DEPTH_TOLERANCES: std::ops::RangeInclusive<u32> = 1..=20;

// ---------------------------------------------------------------------------
// IoU

pub fn iou2d(a: &Box2D, b: &Box2D) -> f64 {
    let inter = a.intersection_area(b);
    let union = a.area() + b.area() - inter;
    if union > 0.0 && inter > 0.0 {
        inter / union
    } else {
        0.0
    }
}

type Polygon = Vec<Point3>;

/// Faces of a box as outward-wound corner loops.
fn box_faces(b: &Box3D) -> Vec<Polygon> {
    let c = b.corners();
    // Corner index bits: x slowest, z fastest (see CORNER_SIGNS).
    const FACES: [[usize; 4]; 6] = [[0, 1, 3, 2], [4, 6, 7, 5], [0, 4, 5, 1], [2, 3, 7, 6], [0, 2, 6, 4], [1, 5, 7, 3]];
    FACES.iter().map(|f| f.iter().map(|&i| c[i]).collect()).collect()
}

/// Outward face planes `(n, d)` of a box; the inside is `n·p ≤ d`.
fn box_halfspaces(b: &Box3D) -> [(Point3, f64); 6] {
    let half = b.dims.half_extents();
    let mut out = [(Point3::zeros(), 0.0); 6];
    for axis in 0..3 {
        let n = b.rotation.column(axis);
        out[2 * axis] = (n, n.dot(&b.center) + half[axis]);
        out[2 * axis + 1] = (-n, -n.dot(&b.center) + half[axis]);
    }
    out
}

/// Clips a closed convex polytope (given by its faces) to `n·p ≤ d`.
/// Returns `false` when the polytope already satisfies the constraint.
fn clip_polytope(faces: &mut Vec<Polygon>, n: &Point3, d: f64) -> bool {
    const EPS: f64 = 1e-10;
    let dist = |p: &Point3| n.dot(p) - d;
    if faces.iter().flatten().all(|p| dist(p) <= EPS) {
        return false;
    }
    if faces.iter().flatten().all(|p| dist(p) >= -EPS) {
        faces.clear();
        return true;
    }
    let mut out = Vec::with_capacity(faces.len() + 1);
    let mut cap: Vec<Point3> = Vec::new();
    for face in faces.drain(..) {
        let mut clipped = Vec::with_capacity(face.len() + 1);
        for i in 0..face.len() {
            let (p, q) = (face[i], face[(i + 1) % face.len()]);
            let (dp, dq) = (n.dot(&p) - d, n.dot(&q) - d);
            if dp <= EPS {
                clipped.push(p);
                if dp.abs() <= EPS {
                    cap.push(p);
                }
            }
            if (dp < -EPS && dq > EPS) || (dp > EPS && dq < -EPS) {
                let x = p + (q - p) * (dp / (dp - dq));
                clipped.push(x);
                cap.push(x);
            }
        }
        if clipped.len() >= 3 {
            out.push(clipped);
        }
    }
    if let Some(cap) = order_cap(cap, n) {
        out.push(cap);
    }
    *faces = out;
    true
}

/// Orders coplanar points by angle around their centroid; `None` if fewer than three distinct points.
fn order_cap(mut pts: Vec<Point3>, n: &Point3) -> Option<Polygon> {
    pts.sort_by(|a, b| a.iter().zip(b.iter()).map(|(x, y)| x.total_cmp(y)).find(|o| o.is_ne()).unwrap_or(std::cmp::Ordering::Equal));
    pts.dedup_by(|a, b| (*a - *b).norm() <= 1e-12);
    if pts.len() < 3 {
        return None;
    }
    let centroid = pts.iter().sum::<Point3>() / pts.len() as f64;
    let helper = if n.x.abs() < 0.9 { Point3::x() } else { Point3::y() };
    let u = n.cross(&helper).normalize();
    let v = n.cross(&u);
    pts.sort_by(|a, b| {
        let (da, db) = (a - centroid, b - centroid);
        da.dot(&v).atan2(da.dot(&u)).total_cmp(&db.dot(&v).atan2(db.dot(&u)))
    });
    Some(pts)
}

/// Volume of a closed convex polytope, summed as tetrahedra from an interior point.
fn polytope_volume(faces: &[Polygon]) -> f64 {
    let (sum, count) = faces.iter().flatten().fold((Point3::zeros(), 0usize), |(s, c), p| (s + p, c + 1));
    if count == 0 {
        return 0.0;
    }
    let r = sum / count as f64;
    faces
        .iter()
        .map(|f| {
            (1..f.len() - 1)
                .map(|i| (f[0] - r).dot(&(f[i] - r).cross(&(f[i + 1] - r))).abs() / 6.0)
                .sum::<f64>()
        })
        .sum()
}

/// Volume of the intersection of two boxes.
pub fn intersection_volume(a: &Box3D, b: &Box3D) -> f64 {
    let reach = |x: &Box3D| x.dims.half_extents().norm();
    if (a.center - b.center).norm() > reach(a) + reach(b) {
        return 0.0;
    }
    let mut faces = box_faces(a);
    let mut clipped = false;
    for (n, d) in box_halfspaces(b) {
        clipped |= clip_polytope(&mut faces, &n, d);
        if faces.len() < 4 {
            return 0.0;
        }
    }
    if clipped {
        polytope_volume(&faces)
    } else {
        // `a` lies inside `b`.
        a.volume()
    }
}

/// Intersection over union of two arbitrarily oriented cuboids.
pub fn iou3d(a: &Box3D, b: &Box3D) -> f64 {
    let inter = intersection_volume(a, b);
    let union = a.volume() + b.volume() - inter;
    if inter > 0.0 && union > 0.0 {
        (inter / union).clamp(0.0, 1.0)
    } else {
        0.0
    }
}

// ---------------------------------------------------------------------------
// Inputs

/// A scored prediction. The score lives in `box3d.score`.
#[derive(Debug, Clone, PartialEq)]
pub struct Detection {
    pub image_id: String,
    pub box3d: Box3D,
    pub bbox2d: Option<Box2D>,
}

impl Detection {
    pub fn score(&self) -> f64 {
        self.box3d.score.unwrap_or(0.0)
    }

    pub fn category(&self) -> u32 {
        self.box3d.category
    }
}

/// A labelled object as seen by the metrics.
#[derive(Debug, Clone, PartialEq)]
pub struct GroundTruth {
    pub image_id: String,
    pub id: u64,
    pub box3d: Box3D,
    pub bbox2d: Option<Box2D>,
}

/// Flattens the manifest's annotations, filling in missing 2D boxes by projection.
pub fn ground_truths(m: &DatasetManifest) -> Vec<GroundTruth> {
    m.images
        .iter()
        .flat_map(|img| {
            img.annotations.iter().map(move |a| GroundTruth {
                image_id: img.id.clone(),
                id: a.id,
                box3d: a.box3d.clone(),
                bbox2d: a.bbox2d.or_else(|| project_box_to_2d(&a.box3d, &img.intrinsics, img.size())),
            })
        })
        .collect()
}

#[derive(Debug, Error)]
pub enum EvalError {
    #[error("{path}:{line}: {message}")]
    Detection { path: String, line: usize, message: String },
    #[error(transparent)]
    Dataset(#[from] DatasetError),
}

#[derive(Deserialize)]
#[serde(untagged)]
enum CategoryRef {
    Id(u32),
    Name(String),
}

#[derive(Deserialize)]
#[serde(deny_unknown_fields)]
struct DetectionJson {
    image_id: String,
    category: CategoryRef,
    score: f64,
    center: [f64; 3],
    dims: [f64; 3],
    rotation: [f64; 9],
    #[serde(default)]
    bbox2d: Option<[f64; 4]>,
}

/// Parses detections, one JSON object per line. Categories may be given by
/// id or name. Missing 2D boxes are projected with the image's camera.
pub fn parse_detections(text: &str, origin: &str, m: &DatasetManifest) -> Result<Vec<Detection>, EvalError> {
    let mut out = Vec::new();
    for (i, line) in text.lines().enumerate() {
        if line.trim().is_empty() {
            continue;
        }
        let fail = |message: String| EvalError::Detection { path: origin.to_owned(), line: i + 1, message };
        let j: DetectionJson = serde_json::from_str(line).map_err(|e| fail(e.to_string()))?;
        let img = m.image(&j.image_id).ok_or_else(|| fail(format!("unknown image {:?}", j.image_id)))?;
        let category = match &j.category {
            CategoryRef::Id(id) => m.categories.iter().find(|c| c.id == *id).map(|c| c.id),
            CategoryRef::Name(name) => m.category_by_name(name).map(|c| c.id),
        }
        .ok_or_else(|| fail("unknown category".into()))?;
        if !(0.0..=1.0).contains(&j.score) {
            return Err(fail(format!("score {} outside [0, 1]", j.score)));
        }
        let dims = Dims::new(j.dims[0], j.dims[1], j.dims[2]).map_err(|e| fail(e.to_string()))?;
        let rotation = Rotation3::try_from_row_major(&j.rotation).map_err(|e| fail(e.to_string()))?;
        let center = Point3::from(j.center);
        if !center.iter().all(|v| v.is_finite()) {
            return Err(fail("non-finite center".into()));
        }
        let mut box3d = Box3D::new(center, dims, rotation, category);
        box3d.score = Some(j.score);
        let bbox2d = match j.bbox2d {
            Some([x1, y1, x2, y2]) => {
                if !(x1 <= x2 && y1 <= y2) {
                    return Err(fail("malformed bbox2d".into()));
                }
                Some(Box2D::new(x1, y1, x2, y2))
            }
            None => project_box_to_2d(&box3d, &img.intrinsics, img.size()),
        };
        out.push(Detection { image_id: j.image_id, box3d, bbox2d });
    }
    Ok(out)
}

pub fn load_detections(path: &Path, m: &DatasetManifest) -> Result<Vec<Detection>, EvalError> {
    let text = std::fs::read_to_string(path).map_err(|e| DatasetError::io(path, e))?;
    parse_detections(&text, &path.display().to_string(), m)
}

// ---------------------------------------------------------------------------
// Matching and AP

/// Outcome of greedy matching, in descending score order.
#[derive(Debug, Clone, PartialEq)]
pub struct MatchResult {
    /// Index into the input detection slice.
    pub detection: Vec<usize>,
    pub true_positive: Vec<bool>,
    /// Index into the ground-truth slice of the matched object.
    pub matched_gt: Vec<Option<usize>>,
    /// Affinity of the match (0 when unmatched).
    pub affinity: Vec<f64>,
    pub num_gt: usize,
}

/// Greedy matching per image and class. Detections are visited by
/// descending score (ties keep input order); each takes the unmatched
/// ground truth with the highest affinity among those for which `affinity`
/// returns `Some`.
pub fn greedy_match<F>(dets: &[Detection], gts: &[GroundTruth], class: u32, affinity: F) -> MatchResult
where
    F: Fn(&Detection, &GroundTruth) -> Option<f64>,
{
    let mut by_image: HashMap<&str, Vec<usize>> = HashMap::new();
    for (i, g) in gts.iter().enumerate().filter(|(_, g)| g.box3d.category == class) {
        by_image.entry(g.image_id.as_str()).or_default().push(i);
    }
    let num_gt = by_image.values().map(Vec::len).sum();
    let mut order: Vec<usize> = (0..dets.len()).filter(|&i| dets[i].category() == class).collect();
    order.sort_by(|&a, &b| dets[b].score().total_cmp(&dets[a].score()));

    let mut used = vec![false; gts.len()];
    let mut result = MatchResult {
        detection: Vec::with_capacity(order.len()),
        true_positive: Vec::with_capacity(order.len()),
        matched_gt: Vec::with_capacity(order.len()),
        affinity: Vec::with_capacity(order.len()),
        num_gt,
    };
    for di in order {
        let d = &dets[di];
        let mut best: Option<(usize, f64)> = None;
        for &gi in by_image.get(d.image_id.as_str()).map(Vec::as_slice).unwrap_or(&[]) {
            if used[gi] {
                continue;
            }
            if let Some(a) = affinity(d, &gts[gi]) {
                if best.is_none_or(|(_, b)| a > b) {
                    best = Some((gi, a));
                }
            }
        }
        if let Some((gi, _)) = best {
            used[gi] = true;
        }
        result.detection.push(di);
        result.true_positive.push(best.is_some());
        result.matched_gt.push(best.map(|(g, _)| g));
        result.affinity.push(best.map_or(0.0, |(_, a)| a));
    }
    result
}

/// Interpolated precision at recall `k/40` for `k = 1..=40`.
#[derive(Debug, Clone, PartialEq)]
pub struct PRCurve {
    pub precision: [f64; RECALL_POINTS],
}

impl PRCurve {
    pub fn from_matches(m: &MatchResult) -> Self {
        let mut precision = [0.0; RECALL_POINTS];
        if m.num_gt == 0 {
            return Self { precision };
        }
        // Running (tp, rank) after each detection; recall compared in integers.
        let mut tp = 0usize;
        let mut points = Vec::with_capacity(m.true_positive.len());
        for (rank, &hit) in m.true_positive.iter().enumerate() {
            tp += hit as usize;
            points.push((tp, tp as f64 / (rank + 1) as f64));
        }
        for (k, p) in precision.iter_mut().enumerate() {
            let need = (k + 1) * m.num_gt;
            *p = points
                .iter()
                .filter(|(tp, _)| tp * RECALL_POINTS >= need)
                .map(|&(_, prec)| prec)
                .fold(0.0, f64::max);
        }
        Self { precision }
    }

    pub fn ap(&self) -> f64 {
        self.precision.iter().sum::<f64>() / RECALL_POINTS as f64
    }
}

/// AP of the matches produced by `affinity`.
pub fn match_and_curve<F>(dets: &[Detection], gts: &[GroundTruth], class: u32, affinity: F) -> PRCurve
where
    F: Fn(&Detection, &GroundTruth) -> Option<f64>,
{
    PRCurve::from_matches(&greedy_match(dets, gts, class, affinity))
}

/// Affinity that accepts pairs whose IoU reaches `threshold`.
pub fn iou_at_least<F>(iou: F, threshold: f64) -> impl Fn(&Detection, &GroundTruth) -> Option<f64>
where
    F: Fn(&Detection, &GroundTruth) -> f64,
{
    move |d, g| {
        let v = iou(d, g);
        (v >= threshold && v > 0.0).then_some(v)
    }
}

fn pair_iou3d(d: &Detection, g: &GroundTruth) -> f64 {
    iou3d(&d.box3d, &g.box3d)
}

fn pair_iou2d(d: &Detection, g: &GroundTruth) -> f64 {
    match (d.bbox2d, g.bbox2d) {
        (Some(a), Some(b)) => iou2d(&a, &b),
        _ => 0.0,
    }
}

pub fn ap3d(dets: &[Detection], gts: &[GroundTruth], class: u32, threshold: f64) -> f64 {
    match_and_curve(dets, gts, class, iou_at_least(pair_iou3d, threshold)).ap()
}

/// 2D IoU thresholds 0.05, 0.10, …, 0.95.
pub fn ap2d_thresholds() -> impl Iterator<Item = f64> {
    (1..=19).map(|i| i as f64 / 20.0)
}

pub fn ap2d(dets: &[Detection], gts: &[GroundTruth], class: u32) -> f64 {
    let aps: Vec<f64> =
        ap2d_thresholds().map(|t| match_and_curve(dets, gts, class, iou_at_least(pair_iou2d, t)).ap()).collect();
    aps.iter().sum::<f64>() / aps.len() as f64
}

/// AP where a match needs 2D IoU above 0.7 and a depth error of at most `x` meters.
pub fn ap_depth_at(dets: &[Detection], gts: &[GroundTruth], class: u32, x: f64) -> f64 {
    match_and_curve(dets, gts, class, |d, g| {
        let v = pair_iou2d(d, g);
        (v > DEPTH_MATCH_IOU2D && (d.box3d.center.z - g.box3d.center.z).abs() <= x).then_some(v)
    })
    .ap()
}

/// Mean of [`ap_depth_at`] over 1, 2, …, 20 meters.
pub fn ap_depth(dets: &[Detection], gts: &[GroundTruth], class: u32) -> f64 {
    let n = DEPTH_TOLERANCES.count() as f64;
    DEPTH_TOLERANCES.map(|x| ap_depth_at(dets, gts, class, x as f64)).sum::<f64>() / n
}

/// Detections whose 2D box matches a ground truth (IoU above 0.7) get that
/// object's depth: the center slides along its viewing ray until `z = z_gt`.
pub fn substitute_depths(dets: &[Detection], gts: &[GroundTruth], class: u32) -> Vec<Detection> {
    let m = greedy_match(dets, gts, class, |d, g| {
        let v = pair_iou2d(d, g);
        (v > DEPTH_MATCH_IOU2D).then_some(v)
    });
    let mut out = dets.to_vec();
    for (&di, gi) in m.detection.iter().zip(&m.matched_gt) {
        if let Some(gi) = gi {
            let c = out[di].box3d.center;
            out[di].box3d.center = c * (gts[*gi].box3d.center.z / c.z);
        }
    }
    out
}

pub fn ap_3dp(dets: &[Detection], gts: &[GroundTruth], class: u32) -> f64 {
    ap3d(&substitute_depths(dets, gts, class), gts, class, IOU3D_THRESHOLD)
}

// ---------------------------------------------------------------------------
// Report

#[derive(Debug, Clone, PartialEq)]
pub struct ClassMetrics {
    pub category: u32,
    pub name: String,
    pub num_gt: usize,
    pub num_det: usize,
    pub ap3d: f64,
    pub ap2d: f64,
    pub ap_depth: f64,
    pub ap_3dp: f64,
}

#[derive(Debug, Clone, PartialEq)]
pub struct EvalReport {
    pub classes: Vec<ClassMetrics>,
}

impl EvalReport {
    /// Means over classes that have at least one ground truth: AP3D, AP2D, AP_Depth, AP3DP.
    pub fn means(&self) -> [f64; 4] {
        let rows: Vec<_> = self.classes.iter().filter(|c| c.num_gt > 0).collect();
        if rows.is_empty() {
            return [0.0; 4];
        }
        let n = rows.len() as f64;
        [
            rows.iter().map(|c| c.ap3d).sum::<f64>() / n,
            rows.iter().map(|c| c.ap2d).sum::<f64>() / n,
            rows.iter().map(|c| c.ap_depth).sum::<f64>() / n,
            rows.iter().map(|c| c.ap_3dp).sum::<f64>() / n,
        ]
    }

    pub fn to_csv(&self) -> String {
        let mut s = String::from("category,name,num_gt,num_det,ap3d,ap2d,ap_depth,ap_3dp\n");
        for c in &self.classes {
            let _ = writeln!(
                s,
                "{},{},{},{},{:.6},{:.6},{:.6},{:.6}",
                c.category, c.name, c.num_gt, c.num_det, c.ap3d, c.ap2d, c.ap_depth, c.ap_3dp
            );
        }
        let [a, b, c, d] = self.means();
        let _ = writeln!(s, "mean,,,,{a:.6},{b:.6},{c:.6},{d:.6}");
        s
    }

    pub fn summary(&self) -> String {
        let mut s = String::new();
        let _ = writeln!(s, "{:<16} {:>6} {:>6} {:>9} {:>9} {:>9} {:>9}", "class", "gt", "det", "AP3D@0.5", "AP2D", "AP_Depth", "AP3DP");
        for c in &self.classes {
            let _ = writeln!(
                s,
                "{:<16} {:>6} {:>6} {:>9.4} {:>9.4} {:>9.4} {:>9.4}",
                c.name, c.num_gt, c.num_det, c.ap3d, c.ap2d, c.ap_depth, c.ap_3dp
            );
        }
        let [a, b, c, d] = self.means();
        let _ = writeln!(s, "{:<16} {:>6} {:>6} {a:>9.4} {b:>9.4} {c:>9.4} {d:>9.4}", "mean", "", "");
        s
    }
}

/// All metrics for every category of the manifest.
pub fn evaluate(m: &DatasetManifest, dets: &[Detection]) -> EvalReport {
    let gts = ground_truths(m);
    let classes = m
        .categories
        .iter()
        .map(|c| ClassMetrics {
            category: c.id,
            name: c.name.clone(),
            num_gt: gts.iter().filter(|g| g.box3d.category == c.id).count(),
            num_det: dets.iter().filter(|d| d.category() == c.id).count(),
            ap3d: ap3d(dets, &gts, c.id, IOU3D_THRESHOLD),
            ap2d: ap2d(dets, &gts, c.id),
            ap_depth: ap_depth(dets, &gts, c.id),
            ap_3dp: ap_3dp(dets, &gts, c.id),
        })
        .collect();
    EvalReport { classes }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn cube(center: Point3, dims: (f64, f64, f64), r: Rotation3) -> Box3D {
        Box3D::new(center, Dims::new(dims.0, dims.1, dims.2).unwrap(), r, 0)
    }

    fn gt(image: &str, id: u64, b: Box3D, bb: Box2D) -> GroundTruth {
        GroundTruth { image_id: image.into(), id, box3d: b, bbox2d: Some(bb) }
    }

    fn det(image: &str, mut b: Box3D, bb: Box2D, score: f64) -> Detection {
        b.score = Some(score);
        Detection { image_id: image.into(), box3d: b, bbox2d: Some(bb) }
    }

    #[test]
    fn iou3d_examples() {
        let a = cube(Point3::new(0.0, 0.0, 10.0), (1.0, 1.0, 1.0), Rotation3::identity());
        assert_eq!(iou3d(&a, &a), 1.0);
        let b = cube(Point3::new(0.5, 0.0, 10.0), (1.0, 1.0, 1.0), Rotation3::identity());
        assert!((iou3d(&a, &b) - 1.0 / 3.0).abs() < 1e-12);
        let far = cube(Point3::new(5.0, 0.0, 10.0), (1.0, 1.0, 1.0), Rotation3::identity());
        assert_eq!(iou3d(&a, &far), 0.0);
        // Touching faces have zero overlap.
        let touch = cube(Point3::new(1.0, 0.0, 10.0), (1.0, 1.0, 1.0), Rotation3::identity());
        assert!(iou3d(&a, &touch).abs() < 1e-12);
    }

    #[test]
    fn iou3d_quarter_turn_and_nesting() {
        let a = cube(Point3::zeros(), (2.0, 1.0, 4.0), Rotation3::identity());
        let b = cube(Point3::zeros(), (2.0, 1.0, 4.0), Rotation3::about_y(std::f64::consts::FRAC_PI_2));
        // Overlap is a 2x1x2 slab: 4 / (8 + 8 − 4).
        assert!((iou3d(&a, &b) - 4.0 / 12.0).abs() < 1e-12);
        let inner = cube(Point3::zeros(), (1.0, 0.5, 2.0), Rotation3::about_y(0.3));
        assert!((iou3d(&a, &inner) - 1.0 / 8.0).abs() < 1e-12);
    }

    #[test]
    fn iou2d_examples() {
        let a = Box2D::new(0.0, 0.0, 1.0, 1.0);
        assert_eq!(iou2d(&a, &a), 1.0);
        assert_eq!(iou2d(&a, &Box2D::new(2.0, 2.0, 3.0, 3.0)), 0.0);
        assert!((iou2d(&a, &Box2D::new(0.5, 0.0, 1.5, 1.0)) - 1.0 / 3.0).abs() < 1e-12);
        assert_eq!(iou2d(&Box2D::new(0.0, 0.0, 0.0, 0.0), &a), 0.0);
    }

    fn fixture(n: usize) -> Vec<GroundTruth> {
        (0..n)
            .map(|i| {
                let b = cube(Point3::new(i as f64 * 3.0, 1.0, 20.0), (1.6, 1.5, 4.0), Rotation3::identity());
                gt("img", i as u64, b, Box2D::new(i as f64 * 50.0, 0.0, i as f64 * 50.0 + 40.0, 40.0))
            })
            .collect()
    }

    fn perfect(gts: &[GroundTruth]) -> Vec<Detection> {
        gts.iter().map(|g| det(&g.image_id, g.box3d.clone(), g.bbox2d.unwrap(), 1.0)).collect()
    }

    #[test]
    fn perfect_and_empty() {
        let gts = fixture(4);
        let dets = perfect(&gts);
        assert_eq!(ap3d(&dets, &gts, 0, 0.5), 1.0);
        assert_eq!(ap2d(&dets, &gts, 0), 1.0);
        assert_eq!(ap_depth(&dets, &gts, 0), 1.0);
        assert_eq!(ap_3dp(&dets, &gts, 0), 1.0);
        assert_eq!(ap3d(&[], &gts, 0, 0.5), 0.0);
        assert_eq!(ap3d(&dets, &[], 0, 0.5), 0.0);
        // Other classes see nothing.
        assert_eq!(ap3d(&dets, &gts, 1, 0.5), 0.0);
    }

    #[test]
    fn half_recall_staircase() {
        let gts = fixture(10);
        let mut dets: Vec<Detection> = perfect(&gts[..5]).into_iter().enumerate().map(|(i, mut d)| {
            d.box3d.score = Some(0.9 - i as f64 * 0.01);
            d
        }).collect();
        for i in 0..5 {
            let b = cube(Point3::new(-100.0, 1.0, 20.0 + i as f64), (1.0, 1.0, 1.0), Rotation3::identity());
            dets.push(det("img", b, Box2D::new(-90.0, 0.0, -80.0, 10.0), 0.5 - i as f64 * 0.01));
        }
        assert_eq!(ap3d(&dets, &gts, 0, 0.5), 0.5);
    }

    #[test]
    fn matching_is_one_to_one() {
        let gts = fixture(1);
        let dets = [perfect(&gts), perfect(&gts)].concat();
        let m = greedy_match(&dets, &gts, 0, iou_at_least(pair_iou3d, 0.5));
        assert_eq!(m.true_positive, [true, false]);
        assert_eq!(m.detection, [0, 1]);
    }

    #[test]
    fn depth_error_examples() {
        let gts = fixture(3);
        let shifted = |dz: f64| -> Vec<Detection> {
            perfect(&gts)
                .into_iter()
                .map(|mut d| {
                    // Slide along the viewing ray so only the depth is wrong.
                    let c = d.box3d.center;
                    d.box3d.center = c * ((c.z + dz) / c.z);
                    d
                })
                .collect()
        };
        assert_eq!(ap_depth(&shifted(10.5), &gts, 0), 0.5);
        assert_eq!(ap_depth(&shifted(25.0), &gts, 0), 0.0);
        // Depth substitution repairs a pure depth error.
        assert_eq!(ap_3dp(&shifted(4.0), &gts, 0), 1.0);
        assert_eq!(ap3d(&shifted(4.0), &gts, 0, 0.5), 0.0);
    }

    #[test]
    fn wrong_dims_fail_after_substitution() {
        let gts = fixture(2);
        let dets: Vec<Detection> = perfect(&gts)
            .into_iter()
            .map(|mut d| {
                d.box3d.dims = Dims::new(0.4, 0.4, 1.0).unwrap();
                d
            })
            .collect();
        assert_eq!(ap_3dp(&dets, &gts, 0), 0.0);
    }

    #[test]
    fn detection_parsing() {
        use crate::dataset::{Category, ImageRecord};
        use crate::geometry::CameraIntrinsics;
        let mut m = DatasetManifest::new("val", vec![Category { id: 3, name: "car".into() }]);
        m.images.push(ImageRecord {
            id: "a".into(),
            file_name: "a.png".into(),
            width: 100,
            height: 80,
            frame_index: 0,
            intrinsics: CameraIntrinsics::new(100.0, 100.0, 50.0, 40.0).unwrap(),
            ground_plane: None,
            annotations: vec![],
        });
        let text = r#"{"image_id":"a","category":"car","score":0.8,"center":[0,0,10],"dims":[1,1,1],"rotation":[1,0,0,0,1,0,0,0,1]}
{"image_id":"a","category":3,"score":0.1,"center":[0,0,10],"dims":[1,1,1],"rotation":[1,0,0,0,1,0,0,0,1],"bbox2d":[1,2,3,4]}
"#;
        let d = parse_detections(text, "dets.jsonl", &m).unwrap();
        assert_eq!(d.len(), 2);
        assert_eq!(d[0].category(), 3);
        // Near face at depth 9.5 bounds the projection: half-extent 0.5 · 100 / 9.5.
        let h = 50.0 / 9.5;
        let b = d[0].bbox2d.unwrap();
        assert!((b.x1 - (50.0 - h)).abs() < 1e-12 && (b.y2 - (40.0 + h)).abs() < 1e-12);
        assert_eq!(d[1].bbox2d, Some(Box2D::new(1.0, 2.0, 3.0, 4.0)));
        let bad = r#"{"image_id":"a","category":"bus","score":0.8,"center":[0,0,10],"dims":[1,1,1],"rotation":[1,0,0,0,1,0,0,0,1]}"#;
        match parse_detections(bad, "dets.jsonl", &m) {
            Err(EvalError::Detection { line: 1, .. }) => {}
            other => panic!("unexpected {other:?}"),
        }
        let bad_score = text.lines().next().unwrap().replace("0.8", "1.5");
        assert!(parse_detections(&bad_score, "x", &m).is_err());
    }
}
