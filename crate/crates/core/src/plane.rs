//! Least-squares ground plane from the bottom centers of annotated boxes.
//!
//! The normal is the left-singular vector of the centered 3xN point matrix
//! belonging to its smallest singular value; the offset follows from
//! requiring the centroid to lie on the plane. The normal sign is fixed so
//! that `n_y >= 0` (ties broken on `n_z`, then `n_x`), i.e. it points
//! downwards in the y-down camera frame.

use nalgebra::{DMatrix, Vector3};
use thiserror::Error;

use crate::dataset::Sample;
use crate::geometry::{Box3D, GroundPlane, Point3};

/// Minimum number of objects needed to fit a plane.
pub const MIN_POINTS: usize = 3;
/// Refuse to fit when the second singular value falls to or below this.
pub const DEGENERACY_TOLERANCE: f64 = 1e-9;

#[derive(Debug, Error, Clone, PartialEq)]
pub enum PlaneError {
    #[error("need at least {MIN_POINTS} points to fit a plane, got {0}")]
    TooFewPoints(usize),
    #[error("points are collinear (second singular value {0:e})")]
    DegenerateGeometry(f64),
    #[error("non-finite input point")]
    NonFinite,
}

/// Center of the bottom face: `center + R · (0, h/2, 0)` (box-local +y points down).
pub fn bottom_center(b: &Box3D) -> Point3 {
    b.center + b.rotation.apply(&Point3::new(0.0, b.dims.h / 2.0, 0.0))
}

/// Box center whose bottom center is `bottom` for the given rotation and height.
pub fn center_from_bottom(bottom: &Point3, rotation: &crate::geometry::Rotation3, height: f64) -> Point3 {
    bottom - rotation.apply(&Point3::new(0.0, height / 2.0, 0.0))
}

/// Components this close to zero count as ties for the sign rule.
const SIGN_TIE_TOLERANCE: f64 = 1e-12;

fn canonical_sign(n: Vector3<f64>) -> Vector3<f64> {
    let flip = if n.y.abs() > SIGN_TIE_TOLERANCE {
        n.y < 0.0
    } else if n.z.abs() > SIGN_TIE_TOLERANCE {
        n.z < 0.0
    } else {
        n.x < 0.0
    };
    if flip {
        -n
    } else {
        n
    }
}

pub fn fit_ground_plane(points: &[Point3]) -> Result<GroundPlane, PlaneError> {
    let n = points.len();
    if n < MIN_POINTS {
        return Err(PlaneError::TooFewPoints(n));
    }
    if points.iter().any(|p| !p.iter().all(|v| v.is_finite())) {
        return Err(PlaneError::NonFinite);
    }
    let centroid = points.iter().sum::<Point3>() / n as f64;
    let centered = DMatrix::from_fn(3, n, |r, c| points[c][r] - centroid[r]);
    let svd = centered.svd(true, false);
    let u = svd.u.expect("left singular vectors requested");

    let mut order = [0usize, 1, 2];
    order.sort_by(|&a, &b| svd.singular_values[a].total_cmp(&svd.singular_values[b]));
    let second = svd.singular_values[order[1]];
    if !(second > DEGENERACY_TOLERANCE) {
        return Err(PlaneError::DegenerateGeometry(second));
    }
    let min_dir = u.column(order[0]);
    let normal = canonical_sign(Vector3::new(min_dir[0], min_dir[1], min_dir[2]).normalize());
    let offset = normal.dot(&centroid);
    Ok(GroundPlane { normal, offset })
}

/// Fits the plane on the bottom centers of all boxes.
pub fn fit_boxes<'a>(boxes: impl IntoIterator<Item = &'a Box3D>) -> Result<GroundPlane, PlaneError> {
    let pts: Vec<Point3> = boxes.into_iter().map(bottom_center).collect();
    fit_ground_plane(&pts)
}

pub fn should_apply_groundmix(sample: &Sample) -> bool {
    sample.annotations.len() >= MIN_POINTS
        && fit_boxes(sample.annotations.iter().map(|a| &a.box3d)).is_ok()
}

/// Largest `|n·p − d|` over the points.
pub fn max_residual(plane: &GroundPlane, points: &[Point3]) -> f64 {
    points.iter().map(|p| plane.signed_distance(p).abs()).fold(0.0, f64::max)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::geometry::{Dims, Rotation3};
    use std::f64::consts::PI;

    fn cube(center: Point3, dims: (f64, f64, f64), rotation: Rotation3) -> Box3D {
        Box3D::new(center, Dims::new(dims.0, dims.1, dims.2).unwrap(), rotation, 0)
    }

    #[test]
    fn bottom_center_examples() {
        let unit = cube(Point3::zeros(), (1.0, 1.0, 1.0), Rotation3::identity());
        assert_eq!(bottom_center(&unit), Point3::new(0.0, 0.5, 0.0));
        // A half turn about z puts the box-local bottom face at camera −y.
        let flipped = cube(Point3::zeros(), (1.0, 1.0, 1.0), Rotation3::about_z(PI));
        let b = bottom_center(&flipped);
        assert!((b - Point3::new(0.0, -0.5, 0.0)).norm() < 1e-12);
        let b = cube(Point3::new(0.0, 0.0, 10.0), (2.0, 4.0, 6.0), Rotation3::identity());
        assert_eq!(bottom_center(&b), Point3::new(0.0, 2.0, 10.0));
    }

    #[test]
    fn bottom_center_invariant_under_yaw() {
        let b = cube(Point3::new(1.0, 2.0, 10.0), (2.0, 1.5, 4.0), Rotation3::about_y(1.2));
        assert!((bottom_center(&b) - Point3::new(1.0, 2.75, 10.0)).norm() < 1e-12);
    }

    #[test]
    fn center_from_bottom_inverts_bottom_center() {
        let r = Rotation3::about_x(0.2) * Rotation3::about_y(-0.7);
        let b = cube(Point3::new(-1.0, 2.0, 15.0), (1.8, 1.5, 4.2), r);
        let c = center_from_bottom(&bottom_center(&b), &r, 1.5);
        assert!((c - b.center).norm() < 1e-12);
    }

    #[test]
    fn fit_exact_plane() {
        let pts = [Point3::new(0.0, 1.0, 0.0), Point3::new(1.0, 1.0, 1.0), Point3::new(2.0, 1.0, 0.0)];
        let p = fit_ground_plane(&pts).unwrap();
        assert!((p.normal - Point3::y()).norm() < 1e-12);
        assert!((p.offset - 1.0).abs() < 1e-12);
        assert!(max_residual(&p, &pts) < 1e-9);
    }

    #[test]
    fn fit_errors() {
        assert_eq!(fit_ground_plane(&[Point3::zeros(), Point3::x()]), Err(PlaneError::TooFewPoints(2)));
        let collinear = [Point3::new(0.0, 1.0, 0.0), Point3::new(1.0, 1.0, 1.0), Point3::new(2.0, 1.0, 2.0)];
        assert!(matches!(fit_ground_plane(&collinear), Err(PlaneError::DegenerateGeometry(_))));
        let repeated = [Point3::new(1.0, 2.0, 3.0); 4];
        assert!(matches!(fit_ground_plane(&repeated), Err(PlaneError::DegenerateGeometry(_))));
        let nan = [Point3::zeros(), Point3::x(), Point3::new(f64::NAN, 0.0, 0.0)];
        assert_eq!(fit_ground_plane(&nan), Err(PlaneError::NonFinite));
    }

    #[test]
    fn sign_convention() {
        // Vertical wall x = 3: n_y = 0 and n_z = 0, so n_x must be positive.
        let wall = [Point3::new(3.0, 0.0, 1.0), Point3::new(3.0, 1.0, 2.0), Point3::new(3.0, -2.0, 5.0)];
        let p = fit_ground_plane(&wall).unwrap();
        assert!((p.normal - Point3::x()).norm() < 1e-12);
        assert!((p.offset - 3.0).abs() < 1e-12);
        // Plane y = -2 (above the camera): normal still (0,1,0), offset −2.
        let ceiling = [Point3::new(0.0, -2.0, 4.0), Point3::new(1.0, -2.0, 9.0), Point3::new(-3.0, -2.0, 6.0)];
        let p = fit_ground_plane(&ceiling).unwrap();
        assert!((p.normal - Point3::y()).norm() < 1e-12);
        assert!((p.offset + 2.0).abs() < 1e-12);
    }
}
