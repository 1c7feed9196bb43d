//! Rigid-body geometry: rotations, poses, pinhole cameras and epipolar lines.
//!
//! Conventions used throughout the crate:
//! - Poses are world-to-camera (or source-to-destination) with column vectors,
//!   right-handed axes: `x_dst = R x_src + t`. The relative pose between two
//!   cameras composes as a plain 4x4 matrix product.
//! - Pixel coordinates are `(u, v)` = (column, row) with pixel centers on the
//!   integer grid, so the optical axis projects exactly to `(cx, cy)`.

use nalgebra::{Matrix3, Matrix4, Vector2, Vector3};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

const ORTHO_TOL: f64 = 1e-9;

/// Element of SO(3), stored as a validated 3x3 matrix.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Rotation(Matrix3<f64>);

impl Rotation {
    pub fn identity() -> Self {
        Rotation(Matrix3::identity())
    }

    /// Accepts a matrix that is orthonormal with determinant +1 within `1e-9`.
    /// Matrices off by up to `1e-6` (e.g. after text round-trips) are snapped
    /// back onto SO(3) by Gram-Schmidt; anything worse is rejected.
    pub fn try_from_matrix(m: Matrix3<f64>) -> Result<Self> {
        let dev = orthogonality_deviation(&m);
        let det_dev = (m.determinant() - 1.0).abs();
        if dev <= ORTHO_TOL && det_dev <= ORTHO_TOL {
            return Ok(Rotation(m));
        }
        if dev <= 1e-6 && det_dev <= 1e-6 {
            let r6 = Rot6D::new(m.column(0).into(), m.column(1).into());
            return rot6d_to_rotation(&r6);
        }
        Err(Error::DegenerateInput(format!(
            "matrix is not a rotation (orthogonality deviation {dev:.3e}, det deviation {det_dev:.3e})"
        )))
    }

    /// Caller guarantees orthonormality; used where construction is exact.
    pub(crate) fn from_matrix_unchecked(m: Matrix3<f64>) -> Self {
        debug_assert!(orthogonality_deviation(&m) <= 1e-8);
        Rotation(m)
    }

    pub fn matrix(&self) -> &Matrix3<f64> {
        &self.0
    }

    pub fn transpose(&self) -> Rotation {
        Rotation(self.0.transpose())
    }

    pub fn apply(&self, v: &Vector3<f64>) -> Vector3<f64> {
        self.0 * v
    }

    /// Rotation about the x axis by `angle` radians.
    pub fn rx(angle: f64) -> Self {
        let (s, c) = angle.sin_cos();
        Rotation(Matrix3::new(1.0, 0.0, 0.0, 0.0, c, -s, 0.0, s, c))
    }

    pub fn ry(angle: f64) -> Self {
        let (s, c) = angle.sin_cos();
        Rotation(Matrix3::new(c, 0.0, s, 0.0, 1.0, 0.0, -s, 0.0, c))
    }

    pub fn rz(angle: f64) -> Self {
        let (s, c) = angle.sin_cos();
        Rotation(Matrix3::new(c, -s, 0.0, s, c, 0.0, 0.0, 0.0, 1.0))
    }

    /// Rotation by `angle` radians about an arbitrary axis (Rodrigues).
    pub fn from_axis_angle(axis: &Vector3<f64>, angle: f64) -> Result<Self> {
        let n = axis.norm();
        if n <= 1e-12 {
            return Err(Error::DegenerateInput("zero rotation axis".into()));
        }
        let u = axis / n;
        let (s, c) = angle.sin_cos();
        let k = skew(&u);
        Rotation(Matrix3::identity() + k * s + k * k * (1.0 - c))
            .renormalized()
    }

    /// Re-orthonormalizes via the 6D embedding; a no-op for exact rotations.
    fn renormalized(self) -> Result<Self> {
        rot6d_to_rotation(&rotation_to_rot6d(&self))
    }

    pub fn row_major(&self) -> [f64; 9] {
        let m = &self.0;
        [
            m[(0, 0)],
            m[(0, 1)],
            m[(0, 2)],
            m[(1, 0)],
            m[(1, 1)],
            m[(1, 2)],
            m[(2, 0)],
            m[(2, 1)],
            m[(2, 2)],
        ]
    }
}

/// Translation vector in meters.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Translation(pub Vector3<f64>);

impl Translation {
    pub fn new(x: f64, y: f64, z: f64) -> Self {
        Translation(Vector3::new(x, y, z))
    }

    pub fn zero() -> Self {
        Translation(Vector3::zeros())
    }

    pub fn vector(&self) -> &Vector3<f64> {
        &self.0
    }
}

/// Rigid transform mapping points from a source frame to a destination frame.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Pose {
    pub r: Rotation,
    pub t: Translation,
}

impl Pose {
    pub fn new(r: Rotation, t: Translation) -> Self {
        Pose { r, t }
    }

    pub fn identity() -> Self {
        Pose {
            r: Rotation::identity(),
            t: Translation::zero(),
        }
    }

    pub fn transform(&self, p: &Vector3<f64>) -> Vector3<f64> {
        self.r.apply(p) + self.t.0
    }

    pub fn matrix(&self) -> Matrix4<f64> {
        let mut m = Matrix4::identity();
        m.fixed_view_mut::<3, 3>(0, 0).copy_from(self.r.matrix());
        m.fixed_view_mut::<3, 1>(0, 3).copy_from(self.t.vector());
        m
    }

    pub fn to_json(&self) -> PoseJson {
        PoseJson {
            r: self.r.row_major().to_vec(),
            t: [self.t.0.x, self.t.0.y, self.t.0.z].to_vec(),
        }
    }

    pub fn from_json(j: &PoseJson) -> Result<Self> {
        if j.r.len() != 9 || j.t.len() != 3 {
            return Err(Error::ShapeMismatch("pose JSON needs 9 R + 3 t floats".into()));
        }
        let m = Matrix3::from_row_slice(&j.r);
        Ok(Pose::new(
            Rotation::try_from_matrix(m)?,
            Translation::new(j.t[0], j.t[1], j.t[2]),
        ))
    }
}

/// Serialized pose: rotation row-major, then translation.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct PoseJson {
    pub r: Vec<f64>,
    pub t: Vec<f64>,
}

/// Two unconstrained 3-vectors; first two columns of a rotation estimate.
#[derive(Debug, Clone, Copy)]
pub struct Rot6D {
    pub a: Vector3<f64>,
    pub b: Vector3<f64>,
}

impl Rot6D {
    pub fn new(a: Vector3<f64>, b: Vector3<f64>) -> Self {
        Rot6D { a, b }
    }

    pub fn from_slice(v: &[f64]) -> Result<Self> {
        if v.len() != 6 {
            return Err(Error::ShapeMismatch("6D rotation needs 6 values".into()));
        }
        Ok(Rot6D::new(
            Vector3::new(v[0], v[1], v[2]),
            Vector3::new(v[3], v[4], v[5]),
        ))
    }
}

/// Pinhole intrinsics in pixels.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Intrinsics {
    pub fx: f64,
    pub fy: f64,
    pub cx: f64,
    pub cy: f64,
}

impl Intrinsics {
    pub fn new(fx: f64, fy: f64, cx: f64, cy: f64) -> Result<Self> {
        if fx <= 0.0 || fy <= 0.0 {
            return Err(Error::DegenerateInput("focal lengths must be positive".into()));
        }
        Ok(Intrinsics { fx, fy, cx, cy })
    }

    pub fn matrix(&self) -> Matrix3<f64> {
        Matrix3::new(self.fx, 0.0, self.cx, 0.0, self.fy, self.cy, 0.0, 0.0, 1.0)
    }

    pub fn inv_matrix(&self) -> Matrix3<f64> {
        Matrix3::new(
            1.0 / self.fx,
            0.0,
            -self.cx / self.fx,
            0.0,
            1.0 / self.fy,
            -self.cy / self.fy,
            0.0,
            0.0,
            1.0,
        )
    }
}

/// Gram-Schmidt map from the 6D representation onto SO(3).
///
/// Scale-invariant in both inputs; the output is orthonormal by construction.
pub fn rot6d_to_rotation(r6: &Rot6D) -> Result<Rotation> {
    let na = r6.a.norm();
    if na <= 1e-12 {
        return Err(Error::DegenerateInput("6D rotation: first column near zero".into()));
    }
    let c1 = r6.a / na;
    let u = r6.b - c1 * r6.b.dot(&c1);
    let nu = u.norm();
    // Parallel columns leave no residual to normalize.
    if nu <= 1e-12 * r6.b.norm().max(1.0) {
        return Err(Error::DegenerateInput("6D rotation: columns are parallel".into()));
    }
    let c2 = u / nu;
    let c3 = c1.cross(&c2);
    Ok(Rotation(Matrix3::from_columns(&[c1, c2, c3])))
}

/// Inverse embedding: reads off the first two columns.
pub fn rotation_to_rot6d(r: &Rotation) -> Rot6D {
    Rot6D::new(r.matrix().column(0).into(), r.matrix().column(1).into())
}

/// Angle in radians of the relative rotation, in `[0, pi]`.
pub fn geodesic_distance(r1: &Rotation, r2: &Rotation) -> f64 {
    let trace = (r1.matrix().transpose() * r2.matrix()).trace();
    // Clamp guards against arccos(1 + eps) NaN from float drift.
    (((trace - 1.0) / 2.0).clamp(-1.0, 1.0)).acos()
}

/// Angle in degrees between two translation directions, scale-invariant.
pub fn translation_angular_error(t1: &Translation, t2: &Translation) -> Result<f64> {
    let n1 = t1.0.norm();
    let n2 = t2.0.norm();
    if n1 <= 1e-12 || n2 <= 1e-12 {
        return Err(Error::DegenerateInput(
            "translation angular error undefined for near-zero translation".into(),
        ));
    }
    let cos = (t1.0.dot(&t2.0) / (n1 * n2)).clamp(-1.0, 1.0);
    Ok(cos.acos().to_degrees())
}

/// `compose(p_ab, p_bc)` maps frame c to frame a: the 4x4 product `P_ab P_bc`.
pub fn compose(p_ab: &Pose, p_bc: &Pose) -> Pose {
    Pose {
        r: Rotation::from_matrix_unchecked(p_ab.r.matrix() * p_bc.r.matrix()),
        t: Translation(p_ab.r.apply(p_bc.t.vector()) + p_ab.t.0),
    }
}

pub fn invert(p: &Pose) -> Pose {
    let rt = p.r.transpose();
    let t = -(rt.apply(p.t.vector()));
    Pose {
        r: rt,
        t: Translation(t),
    }
}

/// Projects a point through `pose` into the pixel grid; returns pixel and depth.
pub fn project(k: &Intrinsics, pose: &Pose, x: &Vector3<f64>) -> Result<(Vector2<f64>, f64)> {
    let xc = pose.transform(x);
    if xc.z <= 1e-12 {
        return Err(Error::BehindCamera(xc.z));
    }
    Ok((
        Vector2::new(k.fx * xc.x / xc.z + k.cx, k.fy * xc.y / xc.z + k.cy),
        xc.z,
    ))
}

/// Camera-frame point for a pixel at the given depth.
pub fn unproject(k: &Intrinsics, pixel: &Vector2<f64>, depth: f64) -> Result<Vector3<f64>> {
    if depth <= 0.0 {
        return Err(Error::BadRange(format!("unproject needs depth > 0, got {depth}")));
    }
    Ok(Vector3::new(
        (pixel.x - k.cx) / k.fx * depth,
        (pixel.y - k.cy) / k.fy * depth,
        depth,
    ))
}

pub fn skew(v: &Vector3<f64>) -> Matrix3<f64> {
    Matrix3::new(0.0, -v.z, v.y, v.z, 0.0, -v.x, -v.y, v.x, 0.0)
}

/// Essential matrix `E = [t]x R` of the relative pose; `x2' E x1 = 0` for
/// calibrated correspondences.
pub fn essential_from_pose(p: &Pose) -> Result<Matrix3<f64>> {
    if p.t.0.norm() <= 1e-12 {
        return Err(Error::DegenerateInput(
            "essential matrix undefined for zero translation".into(),
        ));
    }
    Ok(skew(p.t.vector()) * p.r.matrix())
}

/// Fundamental matrix from the essential matrix and both intrinsics.
pub fn fundamental_from_essential(
    e: &Matrix3<f64>,
    k1: &Intrinsics,
    k2: &Intrinsics,
) -> Matrix3<f64> {
    k2.inv_matrix().transpose() * e * k1.inv_matrix()
}

/// Line `(a, b, c)` with `a^2 + b^2 = 1`; signed distance is `a u + b v + c`.
#[derive(Debug, Clone, Copy)]
pub struct Line2 {
    pub a: f64,
    pub b: f64,
    pub c: f64,
}

/// Epipolar line in image 2 of a pixel in image 1, given the fundamental matrix.
pub fn epipolar_line(f: &Matrix3<f64>, pixel1: &Vector2<f64>) -> Result<Line2> {
    let l = f * Vector3::new(pixel1.x, pixel1.y, 1.0);
    let n = (l.x * l.x + l.y * l.y).sqrt();
    if n <= 1e-15 {
        return Err(Error::DegenerateInput("pixel maps to a degenerate epipolar line".into()));
    }
    Ok(Line2 {
        a: l.x / n,
        b: l.y / n,
        c: l.z / n,
    })
}

/// Distance in pixels from a point to a normalized line.
pub fn epipolar_distance(pixel: &Vector2<f64>, line: &Line2) -> f64 {
    (line.a * pixel.x + line.b * pixel.y + line.c).abs()
}

fn orthogonality_deviation(m: &Matrix3<f64>) -> f64 {
    let g = m.transpose() * m - Matrix3::identity();
    g.iter().fold(0.0f64, |acc, v| acc.max(v.abs()))
}

/// Max-norm deviation of `R^T R` from identity; test and validation helper.
pub fn orthonormality_residual(r: &Rotation) -> f64 {
    orthogonality_deviation(r.matrix())
}

/// Deterministic random rotation for tests and seeded parameter init.
pub fn random_rotation(rng: &mut impl rand::Rng) -> Rotation {
    loop {
        let a = Vector3::new(
            rng.random::<f64>() * 2.0 - 1.0,
            rng.random::<f64>() * 2.0 - 1.0,
            rng.random::<f64>() * 2.0 - 1.0,
        );
        let b = Vector3::new(
            rng.random::<f64>() * 2.0 - 1.0,
            rng.random::<f64>() * 2.0 - 1.0,
            rng.random::<f64>() * 2.0 - 1.0,
        );
        if let Ok(r) = rot6d_to_rotation(&Rot6D::new(a, b)) {
            return r;
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use approx::assert_abs_diff_eq;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn random_pose(rng: &mut ChaCha8Rng) -> Pose {
        Pose::new(
            random_rotation(rng),
            Translation::new(
                rng.random::<f64>() * 4.0 - 2.0,
                rng.random::<f64>() * 4.0 - 2.0,
                rng.random::<f64>() * 4.0 - 2.0,
            ),
        )
    }

    /// Independent angle oracle: rotation matrix -> quaternion -> angle.
    fn quaternion_angle(r: &Matrix3<f64>) -> f64 {
        let trace = r.trace();
        let (w, x, y, z);
        if trace > 0.0 {
            let s = (trace + 1.0).sqrt() * 2.0;
            w = 0.25 * s;
            x = (r[(2, 1)] - r[(1, 2)]) / s;
            y = (r[(0, 2)] - r[(2, 0)]) / s;
            z = (r[(1, 0)] - r[(0, 1)]) / s;
        } else if r[(0, 0)] > r[(1, 1)] && r[(0, 0)] > r[(2, 2)] {
            let s = (1.0 + r[(0, 0)] - r[(1, 1)] - r[(2, 2)]).sqrt() * 2.0;
            w = (r[(2, 1)] - r[(1, 2)]) / s;
            x = 0.25 * s;
            y = (r[(0, 1)] + r[(1, 0)]) / s;
            z = (r[(0, 2)] + r[(2, 0)]) / s;
        } else if r[(1, 1)] > r[(2, 2)] {
            let s = (1.0 + r[(1, 1)] - r[(0, 0)] - r[(2, 2)]).sqrt() * 2.0;
            w = (r[(0, 2)] - r[(2, 0)]) / s;
            x = (r[(0, 1)] + r[(1, 0)]) / s;
            y = 0.25 * s;
            z = (r[(1, 2)] + r[(2, 1)]) / s;
        } else {
            let s = (1.0 + r[(2, 2)] - r[(0, 0)] - r[(1, 1)]).sqrt() * 2.0;
            w = (r[(1, 0)] - r[(0, 1)]) / s;
            x = (r[(0, 2)] + r[(2, 0)]) / s;
            y = (r[(1, 2)] + r[(2, 1)]) / s;
            z = 0.25 * s;
        }
        2.0 * (x * x + y * y + z * z).sqrt().atan2(w.abs())
    }

    #[test]
    fn rot6d_orthonormal_columns_pass_through() {
        let r6 = Rot6D::new(Vector3::new(1.0, 0.0, 0.0), Vector3::new(0.0, 1.0, 0.0));
        let r = rot6d_to_rotation(&r6).unwrap();
        assert_abs_diff_eq!(r.matrix(), &Matrix3::identity(), epsilon = 1e-15);
    }

    #[test]
    fn rot6d_scale_invariance() {
        let r6 = Rot6D::new(Vector3::new(2.0, 0.0, 0.0), Vector3::new(0.0, 3.0, 0.0));
        let r = rot6d_to_rotation(&r6).unwrap();
        assert_abs_diff_eq!(r.matrix(), &Matrix3::identity(), epsilon = 1e-15);

        let mut rng = ChaCha8Rng::seed_from_u64(7);
        for _ in 0..100 {
            let a = Vector3::new(rng.random(), rng.random(), rng.random());
            let b = Vector3::new(rng.random(), rng.random(), rng.random());
            let r1 = rot6d_to_rotation(&Rot6D::new(a, b)).unwrap();
            let r2 = rot6d_to_rotation(&Rot6D::new(a * 3.7, b * 0.21)).unwrap();
            assert!((r1.matrix() - r2.matrix()).abs().max() < 1e-12);
        }
    }

    #[test]
    fn rot6d_output_is_rotation() {
        let mut rng = ChaCha8Rng::seed_from_u64(11);
        for _ in 0..1000 {
            let a = Vector3::new(
                rng.random::<f64>() - 0.5,
                rng.random::<f64>() - 0.5,
                rng.random::<f64>() - 0.5,
            );
            let b = Vector3::new(
                rng.random::<f64>() - 0.5,
                rng.random::<f64>() - 0.5,
                rng.random::<f64>() - 0.5,
            );
            let r = rot6d_to_rotation(&Rot6D::new(a, b)).unwrap();
            assert!(orthonormality_residual(&r) < 1e-9);
            assert!((r.matrix().determinant() - 1.0).abs() < 1e-9);
        }
    }

    #[test]
    fn rot6d_degenerate_inputs_rejected() {
        let zero = Rot6D::new(Vector3::zeros(), Vector3::new(0.0, 1.0, 0.0));
        assert!(matches!(rot6d_to_rotation(&zero), Err(Error::DegenerateInput(_))));
        let parallel = Rot6D::new(Vector3::new(1.0, 2.0, 3.0), Vector3::new(2.0, 4.0, 6.0));
        assert!(matches!(rot6d_to_rotation(&parallel), Err(Error::DegenerateInput(_))));
    }

    #[test]
    fn rot6d_round_trip() {
        let id6 = rotation_to_rot6d(&Rotation::identity());
        assert_abs_diff_eq!(id6.a, Vector3::new(1.0, 0.0, 0.0), epsilon = 1e-15);
        assert_abs_diff_eq!(id6.b, Vector3::new(0.0, 1.0, 0.0), epsilon = 1e-15);

        let rz = rotation_to_rot6d(&Rotation::rz(std::f64::consts::FRAC_PI_2));
        assert_abs_diff_eq!(rz.a, Vector3::new(0.0, 1.0, 0.0), epsilon = 1e-15);
        assert_abs_diff_eq!(rz.b, Vector3::new(-1.0, 0.0, 0.0), epsilon = 1e-15);

        let mut rng = ChaCha8Rng::seed_from_u64(3);
        for _ in 0..1000 {
            let r = random_rotation(&mut rng);
            let back = rot6d_to_rotation(&rotation_to_rot6d(&r)).unwrap();
            assert!((r.matrix() - back.matrix()).abs().max() < 1e-9);
        }
    }

    #[test]
    fn geodesic_known_angles() {
        let i = Rotation::identity();
        assert_eq!(geodesic_distance(&i, &i), 0.0);
        assert_abs_diff_eq!(
            geodesic_distance(&i, &Rotation::rz(std::f64::consts::FRAC_PI_2)),
            std::f64::consts::FRAC_PI_2,
            epsilon = 1e-12
        );
        // Planar rotations differ by exactly their angle difference.
        let a = Rotation::rx(30f64.to_radians());
        let b = Rotation::rx(75f64.to_radians());
        assert_abs_diff_eq!(geodesic_distance(&a, &b), 45f64.to_radians(), epsilon = 1e-9);
    }

    #[test]
    fn geodesic_matches_quaternion_oracle() {
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        for _ in 0..500 {
            let r1 = random_rotation(&mut rng);
            let r2 = random_rotation(&mut rng);
            let rel = r1.matrix().transpose() * r2.matrix();
            let expect = quaternion_angle(&rel);
            assert_abs_diff_eq!(geodesic_distance(&r1, &r2), expect, epsilon = 1e-7);
        }
    }

    #[test]
    fn translation_angle_cases() {
        let t1 = Translation::new(1.0, 0.0, 0.0);
        let t2 = Translation::new(2.0, 0.0, 0.0);
        assert_abs_diff_eq!(translation_angular_error(&t1, &t2).unwrap(), 0.0, epsilon = 1e-12);
        let t3 = Translation::new(0.0, 1.0, 0.0);
        assert_abs_diff_eq!(translation_angular_error(&t1, &t3).unwrap(), 90.0, epsilon = 1e-12);
        assert!(translation_angular_error(&t1, &Translation::zero()).is_err());

        let mut rng = ChaCha8Rng::seed_from_u64(9);
        for _ in 0..200 {
            let a = Vector3::new(rng.random::<f64>() - 0.5, rng.random::<f64>() - 0.5, rng.random::<f64>() - 0.5);
            let b = Vector3::new(rng.random::<f64>() - 0.5, rng.random::<f64>() - 0.5, rng.random::<f64>() - 0.5);
            if a.norm() < 1e-6 || b.norm() < 1e-6 {
                continue;
            }
            let got = translation_angular_error(&Translation(a), &Translation(b)).unwrap();
            let expect = (a.normalize().dot(&b.normalize())).clamp(-1.0, 1.0).acos().to_degrees();
            assert_abs_diff_eq!(got, expect, epsilon = 1e-9);
            assert!((0.0..=180.0).contains(&got));
        }
    }

    #[test]
    fn compose_matches_matrix_product() {
        let mut rng = ChaCha8Rng::seed_from_u64(13);
        for _ in 0..300 {
            let p1 = random_pose(&mut rng);
            let p2 = random_pose(&mut rng);
            let m = p1.matrix() * p2.matrix();
            let c = compose(&p1, &p2).matrix();
            assert!((m - c).abs().max() < 1e-12);
        }
        let p = random_pose(&mut rng);
        let id = compose(&p, &Pose::identity());
        assert!((id.matrix() - p.matrix()).abs().max() < 1e-15);
        let rt = compose(&invert(&p), &p);
        assert!((rt.matrix() - Matrix4::identity()).abs().max() < 1e-12);
    }

    #[test]
    fn compose_associative() {
        let mut rng = ChaCha8Rng::seed_from_u64(17);
        for _ in 0..100 {
            let a = random_pose(&mut rng);
            let b = random_pose(&mut rng);
            let c = random_pose(&mut rng);
            let left = compose(&compose(&a, &b), &c).matrix();
            let right = compose(&a, &compose(&b, &c)).matrix();
            assert!((left - right).abs().max() < 1e-12);
        }
    }

    #[test]
    fn project_unproject_round_trip() {
        let k = Intrinsics::new(128.0, 128.0, 63.5, 63.5).unwrap();
        let (px, d) = project(&k, &Pose::identity(), &Vector3::new(0.0, 0.0, 1.0)).unwrap();
        assert_abs_diff_eq!(px, Vector2::new(63.5, 63.5), epsilon = 1e-12);
        assert_abs_diff_eq!(d, 1.0, epsilon = 1e-15);

        let p = unproject(&k, &Vector2::new(63.5, 63.5), 2.0).unwrap();
        assert_abs_diff_eq!(p, Vector3::new(0.0, 0.0, 2.0), epsilon = 1e-15);

        let mut rng = ChaCha8Rng::seed_from_u64(23);
        let mut checked = 0;
        while checked < 300 {
            let pose = random_pose(&mut rng);
            let x = Vector3::new(
                rng.random::<f64>() * 2.0 - 1.0,
                rng.random::<f64>() * 2.0 - 1.0,
                rng.random::<f64>() * 4.0 + 0.5,
            );
            let Ok((px, d)) = project(&k, &pose, &x) else {
                continue;
            };
            let cam = unproject(&k, &px, d).unwrap();
            let back = invert(&pose).transform(&cam);
            assert!((back - x).norm() < 1e-9);
            checked += 1;
        }
    }

    #[test]
    fn behind_camera_rejected() {
        let k = Intrinsics::new(100.0, 100.0, 50.0, 50.0).unwrap();
        let r = project(&k, &Pose::identity(), &Vector3::new(0.0, 0.0, -1.0));
        assert!(matches!(r, Err(Error::BehindCamera(_))));
    }

    #[test]
    fn essential_pure_translation_is_skew() {
        let p = Pose::new(Rotation::identity(), Translation::new(1.0, 0.0, 0.0));
        let e = essential_from_pose(&p).unwrap();
        let expect = skew(&Vector3::new(1.0, 0.0, 0.0));
        assert_abs_diff_eq!(e, expect, epsilon = 1e-15);

        let zero_t = Pose::identity();
        assert!(essential_from_pose(&zero_t).is_err());
    }

    #[test]
    fn epipolar_point_line_distance() {
        let line = Line2 { a: 1.0, b: 0.0, c: -5.0 };
        assert_abs_diff_eq!(epipolar_distance(&Vector2::new(0.0, 0.0), &line), 5.0, epsilon = 1e-15);
    }

    #[test]
    fn epipolar_constraint_on_projected_points() {
        // Two cameras observing random points: every correspondence must lie on
        // the other view's epipolar line.
        let k1 = Intrinsics::new(150.0, 140.0, 64.0, 60.0).unwrap();
        let k2 = Intrinsics::new(130.0, 135.0, 66.0, 62.0).unwrap();
        let mut rng = ChaCha8Rng::seed_from_u64(31);
        let p1 = Pose::identity();
        let p2 = Pose::new(
            Rotation::ry(0.2),
            Translation::new(0.4, 0.05, 0.1),
        );
        // Relative pose 2<-1 given both world-to-camera poses.
        let rel = compose(&p2, &invert(&p1));
        let e = essential_from_pose(&rel).unwrap();
        let f = fundamental_from_essential(&e, &k1, &k2);
        let mut checked = 0;
        while checked < 500 {
            let x = Vector3::new(
                rng.random::<f64>() * 2.0 - 1.0,
                rng.random::<f64>() * 2.0 - 1.0,
                rng.random::<f64>() * 3.0 + 1.5,
            );
            let (Ok((px1, _)), Ok((px2, _))) = (project(&k1, &p1, &x), project(&k2, &p2, &x)) else {
                continue;
            };
            let line = epipolar_line(&f, &px1).unwrap();
            assert!(epipolar_distance(&px2, &line) < 1e-6);
            checked += 1;
        }
    }

    #[test]
    fn pose_json_round_trip() {
        let mut rng = ChaCha8Rng::seed_from_u64(41);
        let p = random_pose(&mut rng);
        let j = p.to_json();
        let back = Pose::from_json(&j).unwrap();
        assert!((p.matrix() - back.matrix()).abs().max() < 1e-15);
    }
}
