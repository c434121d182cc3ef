//! Pinhole camera model, box geometry and rotation representations.
//!
//! Camera frame convention: x right, y down, z forward. Every plane, box and
//! rotation in this crate is expressed in that frame.

use nalgebra::{Matrix3, Unit, Vector2, Vector3};
use thiserror::Error;

/// A point or direction in the camera frame (meters).
pub type Point3 = Vector3<f64>;
/// A pixel position (u right, v down). Pixel `(i, j)` covers `[i, i+1) x [j, j+1)`.
pub type Pixel = Vector2<f64>;

/// Orthonormality tolerance for [`Rotation3`] (per entry of `RᵀR − I`, and on `det R − 1`).
pub const ROTATION_TOLERANCE: f64 = 1e-9;
/// Rays whose direction has |n·dir| at or below this are treated as parallel to a plane.
pub const PARALLEL_TOLERANCE: f64 = 1e-9;
/// Residual norm below which Gram-Schmidt input is considered degenerate.
pub const GRAM_SCHMIDT_TOLERANCE: f64 = 1e-9;
/// Near clipping depth used when projecting boxes that straddle the camera plane.
pub const NEAR_DEPTH: f64 = 1e-3;

#[derive(Debug, Error, Clone, PartialEq)]
pub enum GeometryError {
    #[error("point depth {0} is not positive")]
    NonPositiveDepth(f64),
    #[error("invalid intrinsics: {0}")]
    InvalidIntrinsics(String),
    #[error("pixel ray is parallel to the plane")]
    RayParallelToPlane,
    #[error("ray/plane intersection lies behind the camera (t = {0})")]
    IntersectionBehindCamera(f64),
    #[error("degenerate Gram-Schmidt input")]
    DegenerateInput,
    #[error("matrix is not a rotation (max |RᵀR − I| = {orthogonality:e}, det = {det})")]
    NotARotation { orthogonality: f64, det: f64 },
    #[error("object center is at the camera origin")]
    ZeroCenter,
    #[error("plane normal has length {0}, expected 1")]
    NonUnitNormal(f64),
    #[error("box dimensions must be positive, got {0:?}")]
    NonPositiveDims([f64; 3]),
}

/// Pinhole intrinsics without skew.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct CameraIntrinsics {
    pub fx: f64,
    pub fy: f64,
    pub cx: f64,
    pub cy: f64,
}

impl CameraIntrinsics {
    pub fn new(fx: f64, fy: f64, cx: f64, cy: f64) -> Result<Self, GeometryError> {
        if !(fx > 0.0 && fy > 0.0 && fx.is_finite() && fy.is_finite()) {
            return Err(GeometryError::InvalidIntrinsics(format!(
                "focal lengths must be positive, got fx={fx}, fy={fy}"
            )));
        }
        if !(cx.is_finite() && cy.is_finite()) {
            return Err(GeometryError::InvalidIntrinsics(
                "principal point must be finite".into(),
            ));
        }
        Ok(Self { fx, fy, cx, cy })
    }

    /// Same focal length on both axes.
    pub fn square(f: f64, cx: f64, cy: f64) -> Result<Self, GeometryError> {
        Self::new(f, f, cx, cy)
    }

    /// Builds intrinsics from a 3x3 matrix, which must be upper triangular,
    /// skew free and have `K[2][2] = 1`.
    pub fn from_matrix(k: &[[f64; 3]; 3]) -> Result<Self, GeometryError> {
        let lower_ok = k[1][0] == 0.0 && k[2][0] == 0.0 && k[2][1] == 0.0;
        if !lower_ok || k[2][2] != 1.0 {
            return Err(GeometryError::InvalidIntrinsics(
                "K must be upper triangular with K[2][2] = 1".into(),
            ));
        }
        if k[0][1] != 0.0 {
            return Err(GeometryError::InvalidIntrinsics("skewed K is not supported".into()));
        }
        Self::new(k[0][0], k[1][1], k[0][2], k[1][2])
    }

    pub fn to_matrix(&self) -> [[f64; 3]; 3] {
        [[self.fx, 0.0, self.cx], [0.0, self.fy, self.cy], [0.0, 0.0, 1.0]]
    }

    pub fn matrix(&self) -> Matrix3<f64> {
        Matrix3::new(self.fx, 0.0, self.cx, 0.0, self.fy, self.cy, 0.0, 0.0, 1.0)
    }

    /// Focal length used for depth/scale reasoning (the vertical one, since
    /// image rescaling is parameterized by height).
    pub fn focal(&self) -> f64 {
        self.fy
    }

    pub fn project(&self, p: &Point3) -> Result<Pixel, GeometryError> {
        if !(p.z > 0.0) {
            return Err(GeometryError::NonPositiveDepth(p.z));
        }
        Ok(Pixel::new(self.fx * p.x / p.z + self.cx, self.fy * p.y / p.z + self.cy))
    }

    /// Ray direction through `px`, scaled so that its z component is 1.
    pub fn ray(&self, px: &Pixel) -> Point3 {
        Point3::new((px.x - self.cx) / self.fx, (px.y - self.cy) / self.fy, 1.0)
    }

    /// Point at depth `z` along the ray through `px`.
    pub fn unproject_at_depth(&self, px: &Pixel, z: f64) -> Point3 {
        self.ray(px) * z
    }

    /// Intrinsics after resampling the image by `sx` horizontally and `sy` vertically.
    pub fn scaled(&self, sx: f64, sy: f64) -> Self {
        Self { fx: self.fx * sx, fy: self.fy * sy, cx: self.cx * sx, cy: self.cy * sy }
    }
}

/// Intersects the ray through `px` with `plane`.
pub fn unproject_to_plane(
    k: &CameraIntrinsics,
    px: &Pixel,
    plane: &GroundPlane,
) -> Result<Point3, GeometryError> {
    let dir = k.ray(px);
    let denom = plane.normal.dot(&dir);
    if denom.abs() <= PARALLEL_TOLERANCE {
        return Err(GeometryError::RayParallelToPlane);
    }
    let t = plane.offset / denom;
    if !(t > 0.0) {
        return Err(GeometryError::IntersectionBehindCamera(t));
    }
    Ok(dir * t)
}

/// A proper rotation matrix (`RᵀR = I`, `det R = 1`).
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Rotation3(Matrix3<f64>);

impl Rotation3 {
    pub fn identity() -> Self {
        Self(Matrix3::identity())
    }

    pub fn try_from_matrix(m: Matrix3<f64>) -> Result<Self, GeometryError> {
        let orthogonality = (m.transpose() * m - Matrix3::identity()).abs().max();
        let det = m.determinant();
        if !(orthogonality <= ROTATION_TOLERANCE && (det - 1.0).abs() <= ROTATION_TOLERANCE) {
            return Err(GeometryError::NotARotation { orthogonality, det });
        }
        Ok(Self(m))
    }

    pub fn try_from_row_major(v: &[f64; 9]) -> Result<Self, GeometryError> {
        Self::try_from_matrix(Matrix3::from_row_slice(v))
    }

    pub fn to_row_major(&self) -> [f64; 9] {
        let m = &self.0;
        [m[(0, 0)], m[(0, 1)], m[(0, 2)], m[(1, 0)], m[(1, 1)], m[(1, 2)], m[(2, 0)], m[(2, 1)], m[(2, 2)]]
    }

    /// Right-handed rotation by `angle` about `axis` (need not be normalized).
    pub fn from_axis_angle(axis: &Point3, angle: f64) -> Self {
        let r = nalgebra::Rotation3::from_axis_angle(&Unit::new_normalize(*axis), angle);
        Self(*r.matrix())
    }

    pub fn about_x(angle: f64) -> Self {
        let (s, c) = angle.sin_cos();
        Self(Matrix3::new(1.0, 0.0, 0.0, 0.0, c, -s, 0.0, s, c))
    }

    pub fn about_y(angle: f64) -> Self {
        let (s, c) = angle.sin_cos();
        Self(Matrix3::new(c, 0.0, s, 0.0, 1.0, 0.0, -s, 0.0, c))
    }

    pub fn about_z(angle: f64) -> Self {
        let (s, c) = angle.sin_cos();
        Self(Matrix3::new(c, -s, 0.0, s, c, 0.0, 0.0, 0.0, 1.0))
    }

    pub fn matrix(&self) -> &Matrix3<f64> {
        &self.0
    }

    pub fn column(&self, i: usize) -> Point3 {
        self.0.column(i).into_owned()
    }

    pub fn transpose(&self) -> Self {
        Self(self.0.transpose())
    }

    pub fn compose(&self, other: &Rotation3) -> Self {
        Self(self.0 * other.0)
    }

    pub fn apply(&self, v: &Point3) -> Point3 {
        self.0 * v
    }

    /// First two columns, flattened: the 6D representation.
    pub fn to_6d(&self) -> [f64; 6] {
        let m = &self.0;
        [m[(0, 0)], m[(1, 0)], m[(2, 0)], m[(0, 1)], m[(1, 1)], m[(2, 1)]]
    }
}

impl std::ops::Mul for Rotation3 {
    type Output = Rotation3;
    fn mul(self, rhs: Rotation3) -> Rotation3 {
        self.compose(&rhs)
    }
}

/// Maps a 6D representation (two stacked 3-vectors) to a rotation whose
/// first two columns are the Gram-Schmidt orthonormalization of the inputs
/// and whose third column is their cross product.
pub fn gram_schmidt_rotation(v: &[f64; 6]) -> Result<Rotation3, GeometryError> {
    let a1 = Point3::new(v[0], v[1], v[2]);
    let a2 = Point3::new(v[3], v[4], v[5]);
    let n1 = a1.norm();
    if !(n1 > GRAM_SCHMIDT_TOLERANCE) || !a2.iter().all(|x| x.is_finite()) {
        return Err(GeometryError::DegenerateInput);
    }
    let b1 = a1 / n1;
    let residual = a2 - b1 * b1.dot(&a2);
    let n2 = residual.norm();
    if !(n2 > GRAM_SCHMIDT_TOLERANCE) {
        return Err(GeometryError::DegenerateInput);
    }
    let b2 = residual / n2;
    let b3 = b1.cross(&b2);
    Ok(Rotation3(Matrix3::from_columns(&[b1, b2, b3])))
}

/// Rotation taking the viewing ray through `center` onto the optical axis.
///
/// Axis `ray × ẑ`, angle `acos(ray·ẑ)`. A center straight behind the camera
/// gets a half turn about the x axis.
fn ray_alignment(center: &Point3) -> Result<Rotation3, GeometryError> {
    let norm = center.norm();
    if !(norm > 0.0) {
        return Err(GeometryError::ZeroCenter);
    }
    let ray = center / norm;
    let z = Point3::z();
    let axis = ray.cross(&z);
    let sin = axis.norm();
    let cos = ray.dot(&z);
    if sin <= 1e-15 {
        return Ok(if cos > 0.0 {
            Rotation3::identity()
        } else {
            Rotation3::about_x(std::f64::consts::PI)
        });
    }
    Ok(Rotation3::from_axis_angle(&axis, sin.atan2(cos)))
}

/// Expresses an egocentric (camera frame) rotation relative to the viewing ray.
pub fn egocentric_to_allocentric(r: &Rotation3, center: &Point3) -> Result<Rotation3, GeometryError> {
    Ok(ray_alignment(center)? * *r)
}

/// Inverse of [`egocentric_to_allocentric`].
pub fn allocentric_to_egocentric(r: &Rotation3, center: &Point3) -> Result<Rotation3, GeometryError> {
    Ok(ray_alignment(center)?.transpose() * *r)
}

/// Recovers a full rotation from a single heading angle and the local ground
/// normal, for objects lying flat on the ground.
///
/// The result is `Rx(roll) · Ry(pitch) · Rz(yaw)` where roll and pitch are
/// chosen so that the object's Z axis (third column) equals `normal`; yaw
/// then turns the object about that normal.
pub fn single_angle_to_so3(yaw: f64, normal: &Point3) -> Rotation3 {
    let n = normal.normalize();
    let pitch = n.x.clamp(-1.0, 1.0).asin();
    let roll = (-n.y).atan2(n.z);
    Rotation3::about_x(roll) * Rotation3::about_y(pitch) * Rotation3::about_z(yaw)
}

/// Converts a Z-up object rotation (as returned by [`single_angle_to_so3`])
/// into the [`Box3D`] axis convention, where local x is width, local y is
/// height (pointing towards the bottom face) and local z is length.
///
/// Box y maps to object Z, box z (heading) to object X.
pub fn z_up_to_box_frame(r: &Rotation3) -> Rotation3 {
    let permutation = Matrix3::from_columns(&[Point3::y(), Point3::z(), Point3::x()]);
    Rotation3(r.matrix() * permutation)
}

/// Box rotation for an object resting on a plane with (downward) `normal`, heading `yaw`.
pub fn box_rotation_on_ground(yaw: f64, normal: &Point3) -> Rotation3 {
    z_up_to_box_frame(&single_angle_to_so3(yaw, normal))
}

/// Metric box extents: width along local x, height along local y, length along local z.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Dims {
    pub w: f64,
    pub h: f64,
    pub l: f64,
}

impl Dims {
    pub fn new(w: f64, h: f64, l: f64) -> Result<Self, GeometryError> {
        if !(w > 0.0 && h > 0.0 && l > 0.0) || !(w.is_finite() && h.is_finite() && l.is_finite()) {
            return Err(GeometryError::NonPositiveDims([w, h, l]));
        }
        Ok(Self { w, h, l })
    }

    pub fn half_extents(&self) -> Point3 {
        Point3::new(self.w / 2.0, self.h / 2.0, self.l / 2.0)
    }

    pub fn volume(&self) -> f64 {
        self.w * self.h * self.l
    }
}

/// An oriented 3D box in the camera frame.
#[derive(Debug, Clone, PartialEq)]
pub struct Box3D {
    pub center: Point3,
    pub dims: Dims,
    /// Egocentric rotation, box frame to camera frame.
    pub rotation: Rotation3,
    pub category: u32,
    pub track_id: Option<u64>,
    pub score: Option<f64>,
}

/// Sign patterns of the eight corners, lexicographic with x slowest:
/// index `i` uses `(bit2, bit1, bit0)` of `i` for `(x, y, z)`, bit set meaning `+`.
pub const CORNER_SIGNS: [[f64; 3]; 8] = [
    [-1.0, -1.0, -1.0],
    [-1.0, -1.0, 1.0],
    [-1.0, 1.0, -1.0],
    [-1.0, 1.0, 1.0],
    [1.0, -1.0, -1.0],
    [1.0, -1.0, 1.0],
    [1.0, 1.0, -1.0],
    [1.0, 1.0, 1.0],
];

/// The 12 box edges as pairs of corner indices differing in exactly one sign.
pub const BOX_EDGES: [(usize, usize); 12] = [
    (0, 1), (2, 3), (4, 5), (6, 7),
    (0, 2), (1, 3), (4, 6), (5, 7),
    (0, 4), (1, 5), (2, 6), (3, 7),
];

impl Box3D {
    pub fn new(center: Point3, dims: Dims, rotation: Rotation3, category: u32) -> Self {
        Self { center, dims, rotation, category, track_id: None, score: None }
    }

    /// Corners `center + R · (±w/2, ±h/2, ±l/2)` in [`CORNER_SIGNS`] order.
    pub fn corners(&self) -> [Point3; 8] {
        let half = self.dims.half_extents();
        CORNER_SIGNS.map(|s| {
            self.center + self.rotation.apply(&Point3::new(s[0] * half.x, s[1] * half.y, s[2] * half.z))
        })
    }

    /// Whether `p` lies inside the box (boundary included).
    pub fn contains(&self, p: &Point3) -> bool {
        let local = self.rotation.matrix().transpose() * (p - self.center);
        let half = self.dims.half_extents();
        local.x.abs() <= half.x && local.y.abs() <= half.y && local.z.abs() <= half.z
    }

    pub fn volume(&self) -> f64 {
        self.dims.volume()
    }
}

pub fn box_corners(b: &Box3D) -> [Point3; 8] {
    b.corners()
}

/// Axis-aligned image rectangle `[x1, x2] x [y1, y2]`.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Box2D {
    pub x1: f64,
    pub y1: f64,
    pub x2: f64,
    pub y2: f64,
}

impl Box2D {
    pub fn new(x1: f64, y1: f64, x2: f64, y2: f64) -> Self {
        Self { x1, y1, x2, y2 }
    }

    pub fn from_points<'a>(pts: impl IntoIterator<Item = &'a Pixel>) -> Option<Self> {
        let mut it = pts.into_iter();
        let first = it.next()?;
        let mut b = Self::new(first.x, first.y, first.x, first.y);
        for p in it {
            b.x1 = b.x1.min(p.x);
            b.y1 = b.y1.min(p.y);
            b.x2 = b.x2.max(p.x);
            b.y2 = b.y2.max(p.y);
        }
        Some(b)
    }

    pub fn width(&self) -> f64 {
        (self.x2 - self.x1).max(0.0)
    }

    pub fn height(&self) -> f64 {
        (self.y2 - self.y1).max(0.0)
    }

    pub fn area(&self) -> f64 {
        self.width() * self.height()
    }

    pub fn is_empty(&self) -> bool {
        !(self.x2 > self.x1 && self.y2 > self.y1)
    }

    /// Overlap rectangle; may be empty (check [`Box2D::is_empty`]).
    pub fn intersection(&self, other: &Box2D) -> Box2D {
        Box2D::new(
            self.x1.max(other.x1),
            self.y1.max(other.y1),
            self.x2.min(other.x2),
            self.y2.min(other.y2),
        )
    }

    pub fn intersection_area(&self, other: &Box2D) -> f64 {
        self.intersection(other).area()
    }

    pub fn clip_to_image(&self, width: f64, height: f64) -> Box2D {
        self.intersection(&Box2D::new(0.0, 0.0, width, height))
    }

    pub fn contains_box(&self, other: &Box2D, tol: f64) -> bool {
        other.x1 >= self.x1 - tol
            && other.y1 >= self.y1 - tol
            && other.x2 <= self.x2 + tol
            && other.y2 <= self.y2 + tol
    }

    pub fn contains_point(&self, p: &Pixel) -> bool {
        p.x >= self.x1 && p.x <= self.x2 && p.y >= self.y1 && p.y <= self.y2
    }

    pub fn corners(&self) -> [Pixel; 4] {
        [
            Pixel::new(self.x1, self.y1),
            Pixel::new(self.x2, self.y1),
            Pixel::new(self.x2, self.y2),
            Pixel::new(self.x1, self.y2),
        ]
    }

    pub fn to_array(&self) -> [f64; 4] {
        [self.x1, self.y1, self.x2, self.y2]
    }
}

/// Points of the box surface that can be projected: corners in front of the
/// near plane plus edge crossings of it.
fn visible_support(b: &Box3D) -> Vec<Point3> {
    let corners = b.corners();
    let mut pts: Vec<Point3> = corners.iter().filter(|c| c.z >= NEAR_DEPTH).copied().collect();
    for &(i, j) in &BOX_EDGES {
        let (p, q) = (corners[i], corners[j]);
        if (p.z < NEAR_DEPTH) != (q.z < NEAR_DEPTH) {
            let t = (NEAR_DEPTH - p.z) / (q.z - p.z);
            pts.push(p + (q - p) * t);
        }
    }
    pts
}

/// Projects the eight corners and returns their bounding rectangle truncated
/// to the image `[0, W] x [0, H]`.
///
/// Boxes straddling the camera plane are first clipped at [`NEAR_DEPTH`].
/// Returns `None` when no part of the box is in front of the camera or the
/// truncated rectangle has zero area.
pub fn project_box_to_2d(b: &Box3D, k: &CameraIntrinsics, image_size: (u32, u32)) -> Option<Box2D> {
    let support = visible_support(b);
    let pixels: Vec<Pixel> = support.iter().filter_map(|p| k.project(p).ok()).collect();
    let raw = Box2D::from_points(&pixels)?;
    let clipped = raw.clip_to_image(image_size.0 as f64, image_size.1 as f64);
    (!clipped.is_empty()).then_some(clipped)
}

/// Projected wireframe edges, clipped at the near plane.
pub fn project_box_edges(b: &Box3D, k: &CameraIntrinsics) -> Vec<(Pixel, Pixel)> {
    let corners = b.corners();
    BOX_EDGES
        .iter()
        .filter_map(|&(i, j)| {
            let (mut p, mut q) = (corners[i], corners[j]);
            if p.z < NEAR_DEPTH && q.z < NEAR_DEPTH {
                return None;
            }
            if p.z < NEAR_DEPTH {
                p = p + (q - p) * ((NEAR_DEPTH - p.z) / (q.z - p.z));
            } else if q.z < NEAR_DEPTH {
                q = q + (p - q) * ((NEAR_DEPTH - q.z) / (p.z - q.z));
            }
            Some((k.project(&p).ok()?, k.project(&q).ok()?))
        })
        .collect()
}

/// Plane `normal · p = offset` in camera coordinates.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct GroundPlane {
    pub normal: Point3,
    pub offset: f64,
}

impl GroundPlane {
    pub fn new(normal: Point3, offset: f64) -> Result<Self, GeometryError> {
        let len = normal.norm();
        if !((len - 1.0).abs() <= 1e-9) {
            return Err(GeometryError::NonUnitNormal(len));
        }
        Ok(Self { normal, offset })
    }

    /// Normalizes `normal` (scaling `offset` with it).
    pub fn from_unnormalized(normal: Point3, offset: f64) -> Result<Self, GeometryError> {
        let len = normal.norm();
        if !(len > 0.0) {
            return Err(GeometryError::NonUnitNormal(len));
        }
        Ok(Self { normal: normal / len, offset: offset / len })
    }

    pub fn signed_distance(&self, p: &Point3) -> f64 {
        self.normal.dot(p) - self.offset
    }

    /// Orthonormal in-plane basis `(t1, t2)` with `t1 × t2 = normal`.
    ///
    /// `t1` is the camera x axis projected onto the plane, falling back to the
    /// camera z axis when the normal is along x.
    pub fn tangent_basis(&self) -> (Point3, Point3) {
        let n = self.normal;
        let mut t1 = Point3::x() - n * n.x;
        if t1.norm() < 1e-6 {
            t1 = Point3::z() - n * n.z;
        }
        let t1 = t1.normalize();
        let t2 = n.cross(&t1);
        (t1, t2)
    }
}
