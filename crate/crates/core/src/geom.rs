//! Pinhole camera geometry.
//!
//! All transforms run through 4x4 homogeneous matrices: the intrinsic maps
//! camera coordinates to scaled pixel coordinates, the extrinsic is the rigid
//! transform taking world (lidar-frame) points into the camera frame. Both
//! directions of every transform are exposed so the depth encoders can lift
//! pixels to 3D and re-project 3D samples into arbitrary views.

use thiserror::Error;

/// Condition number above which a matrix is treated as singular.
const COND_LIMIT: f64 = 1e12;
/// Tolerance for the orthonormality check on extrinsic rotation blocks.
const ORTHO_TOL: f64 = 1e-9;
/// Depth (camera-frame z) at or below which a point counts as behind the camera.
const MIN_DEPTH: f64 = 1e-9;

#[derive(Debug, Error, PartialEq)]
pub enum GeomError {
    #[error("intrinsic matrix is singular or ill-conditioned (condition > {COND_LIMIT:.0e})")]
    SingularIntrinsic,
    #[error("extrinsic is not a rigid transform (rotation block fails R^T R = I or det = +1)")]
    NonRigidExtrinsic,
    #[error("depth must be positive, got {0}")]
    NonPositiveDepth(f64),
    #[error("point projects behind the camera (depth {0})")]
    BehindCamera(f64),
    #[error("perception range is degenerate on axis {axis} (min {min}, max {max})")]
    DegenerateRange { axis: usize, min: f64, max: f64 },
    #[error("pixel point has no depth")]
    MissingDepth,
}

/// Row-major 4x4 matrix of f64.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Mat4(pub [f64; 16]);

impl Mat4 {
    pub fn identity() -> Self {
        let mut m = [0.0; 16];
        m[0] = 1.0;
        m[5] = 1.0;
        m[10] = 1.0;
        m[15] = 1.0;
        Mat4(m)
    }

    pub fn from_rows(rows: [[f64; 4]; 4]) -> Self {
        let mut m = [0.0; 16];
        for (r, row) in rows.iter().enumerate() {
            m[4 * r..4 * r + 4].copy_from_slice(row);
        }
        Mat4(m)
    }

    #[inline]
    pub fn at(&self, r: usize, c: usize) -> f64 {
        self.0[4 * r + c]
    }

    #[inline]
    pub fn set(&mut self, r: usize, c: usize, v: f64) {
        self.0[4 * r + c] = v;
    }

    pub fn mul(&self, other: &Mat4) -> Mat4 {
        let mut out = [0.0; 16];
        for r in 0..4 {
            for c in 0..4 {
                let mut acc = 0.0;
                for k in 0..4 {
                    acc += self.at(r, k) * other.at(k, c);
                }
                out[4 * r + c] = acc;
            }
        }
        Mat4(out)
    }

    pub fn mul_vec(&self, v: [f64; 4]) -> [f64; 4] {
        let mut out = [0.0; 4];
        for r in 0..4 {
            out[r] = (0..4).map(|k| self.at(r, k) * v[k]).sum();
        }
        out
    }

    pub fn transpose(&self) -> Mat4 {
        let mut out = [0.0; 16];
        for r in 0..4 {
            for c in 0..4 {
                out[4 * c + r] = self.at(r, c);
            }
        }
        Mat4(out)
    }

    fn inf_norm(&self) -> f64 {
        (0..4)
            .map(|r| (0..4).map(|c| self.at(r, c).abs()).sum::<f64>())
            .fold(0.0, f64::max)
    }

    /// Gauss-Jordan inverse with partial pivoting. Returns `None` when the
    /// matrix is singular or its infinity-norm condition number exceeds
    /// `COND_LIMIT`.
    pub fn inverse(&self) -> Option<Mat4> {
        let mut a = self.0;
        let mut inv = Mat4::identity().0;
        for col in 0..4 {
            let mut pivot = col;
            for r in col + 1..4 {
                if a[4 * r + col].abs() > a[4 * pivot + col].abs() {
                    pivot = r;
                }
            }
            if a[4 * pivot + col].abs() == 0.0 {
                return None;
            }
            if pivot != col {
                for k in 0..4 {
                    a.swap(4 * col + k, 4 * pivot + k);
                    inv.swap(4 * col + k, 4 * pivot + k);
                }
            }
            let p = a[4 * col + col];
            for k in 0..4 {
                a[4 * col + k] /= p;
                inv[4 * col + k] /= p;
            }
            for r in 0..4 {
                if r == col {
                    continue;
                }
                let f = a[4 * r + col];
                if f != 0.0 {
                    for k in 0..4 {
                        a[4 * r + k] -= f * a[4 * col + k];
                        inv[4 * r + k] -= f * inv[4 * col + k];
                    }
                }
            }
        }
        let inv = Mat4(inv);
        if self.inf_norm() * inv.inf_norm() > COND_LIMIT {
            return None;
        }
        Some(inv)
    }

    /// Rotation by `yaw` radians about the +z axis, as a homogeneous matrix.
    pub fn rotation_z(yaw: f64) -> Mat4 {
        let (s, c) = yaw.sin_cos();
        Mat4::from_rows([
            [c, -s, 0.0, 0.0],
            [s, c, 0.0, 0.0],
            [0.0, 0.0, 1.0, 0.0],
            [0.0, 0.0, 0.0, 1.0],
        ])
    }

    pub fn row_major(&self) -> [f64; 16] {
        self.0
    }
}

/// A point in pixel coordinates, optionally carrying its camera-frame depth.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct PixelPoint {
    pub u: f64,
    pub v: f64,
    pub depth: Option<f64>,
}

impl PixelPoint {
    pub fn new(u: f64, v: f64) -> Self {
        PixelPoint { u, v, depth: None }
    }

    pub fn with_depth(u: f64, v: f64, depth: f64) -> Self {
        PixelPoint {
            u,
            v,
            depth: Some(depth),
        }
    }
}

/// A point in the camera frame (x right, y down, z along the optical axis).
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct CamPoint {
    pub x: f64,
    pub y: f64,
    pub z: f64,
}

impl CamPoint {
    pub fn new(x: f64, y: f64, z: f64) -> Self {
        CamPoint { x, y, z }
    }
}

/// A point in the world (lidar) frame shared by all views and timesteps.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct LidarPoint {
    pub x: f64,
    pub y: f64,
    pub z: f64,
}

impl LidarPoint {
    pub fn new(x: f64, y: f64, z: f64) -> Self {
        LidarPoint { x, y, z }
    }

    pub fn to_array(self) -> [f64; 3] {
        [self.x, self.y, self.z]
    }
}

/// Intrinsic and extrinsic parameters of one pinhole camera.
///
/// The extrinsic maps lidar-frame homogeneous points into the camera frame;
/// its inverse (camera pose) is cached at construction, as is the intrinsic
/// inverse, so per-pixel transforms stay allocation- and pivot-free.
#[derive(Debug, Clone)]
pub struct CameraParams {
    intrinsic: Mat4,
    extrinsic: Mat4,
    intrinsic_inv: Mat4,
    extrinsic_inv: Mat4,
}

impl CameraParams {
    pub fn new(intrinsic: Mat4, extrinsic: Mat4) -> Result<Self, GeomError> {
        let intrinsic_inv = intrinsic.inverse().ok_or(GeomError::SingularIntrinsic)?;
        if !is_rigid(&extrinsic) {
            return Err(GeomError::NonRigidExtrinsic);
        }
        let extrinsic_inv = extrinsic.inverse().ok_or(GeomError::NonRigidExtrinsic)?;
        Ok(CameraParams {
            intrinsic,
            extrinsic,
            intrinsic_inv,
            extrinsic_inv,
        })
    }

    /// Standard pinhole intrinsic embedded in a 4x4 homogeneous matrix.
    pub fn intrinsic_matrix(fx: f64, fy: f64, cx: f64, cy: f64) -> Mat4 {
        Mat4::from_rows([
            [fx, 0.0, cx, 0.0],
            [0.0, fy, cy, 0.0],
            [0.0, 0.0, 1.0, 0.0],
            [0.0, 0.0, 0.0, 1.0],
        ])
    }

    pub fn intrinsic(&self) -> &Mat4 {
        &self.intrinsic
    }

    pub fn extrinsic(&self) -> &Mat4 {
        &self.extrinsic
    }

    pub fn intrinsic_inv(&self) -> &Mat4 {
        &self.intrinsic_inv
    }

    pub fn extrinsic_inv(&self) -> &Mat4 {
        &self.extrinsic_inv
    }

    /// (fx, fy, cx, cy) entries of the intrinsic.
    pub fn focal_center(&self) -> [f64; 4] {
        [
            self.intrinsic.at(0, 0),
            self.intrinsic.at(1, 1),
            self.intrinsic.at(0, 2),
            self.intrinsic.at(1, 2),
        ]
    }

    /// Camera center in the lidar frame.
    pub fn position(&self) -> LidarPoint {
        let p = self.extrinsic_inv.mul_vec([0.0, 0.0, 0.0, 1.0]);
        LidarPoint::new(p[0] / p[3], p[1] / p[3], p[2] / p[3])
    }
}

fn is_rigid(m: &Mat4) -> bool {
    // Upper-left 3x3 must satisfy R^T R = I and det = +1; bottom row must be
    // (0,0,0,1) so the transform is affine.
    for c in 0..3 {
        if m.at(3, c).abs() > ORTHO_TOL {
            return false;
        }
    }
    if (m.at(3, 3) - 1.0).abs() > ORTHO_TOL {
        return false;
    }
    for i in 0..3 {
        for j in 0..3 {
            let dot: f64 = (0..3).map(|k| m.at(k, i) * m.at(k, j)).sum();
            let expect = if i == j { 1.0 } else { 0.0 };
            if (dot - expect).abs() > ORTHO_TOL {
                return false;
            }
        }
    }
    let det = m.at(0, 0) * (m.at(1, 1) * m.at(2, 2) - m.at(1, 2) * m.at(2, 1))
        - m.at(0, 1) * (m.at(1, 0) * m.at(2, 2) - m.at(1, 2) * m.at(2, 0))
        + m.at(0, 2) * (m.at(1, 0) * m.at(2, 1) - m.at(1, 1) * m.at(2, 0));
    (det - 1.0).abs() <= 1e-6
}

/// Axis-aligned 3D volume used to normalize object centers into [0,1]^3.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct PerceptionRange {
    min: [f64; 3],
    max: [f64; 3],
}

impl PerceptionRange {
    pub fn new(min: [f64; 3], max: [f64; 3]) -> Result<Self, GeomError> {
        for axis in 0..3 {
            if !(max[axis] > min[axis]) {
                return Err(GeomError::DegenerateRange {
                    axis,
                    min: min[axis],
                    max: max[axis],
                });
            }
        }
        Ok(PerceptionRange { min, max })
    }

    pub fn min(&self) -> [f64; 3] {
        self.min
    }

    pub fn max(&self) -> [f64; 3] {
        self.max
    }

    pub fn extent(&self) -> [f64; 3] {
        [
            self.max[0] - self.min[0],
            self.max[1] - self.min[1],
            self.max[2] - self.min[2],
        ]
    }

    pub fn contains(&self, p: LidarPoint) -> bool {
        let a = p.to_array();
        (0..3).all(|i| a[i] >= self.min[i] && a[i] <= self.max[i])
    }
}

impl Default for PerceptionRange {
    /// Desk-scale default volume; configurable, not a constant of the method.
    fn default() -> Self {
        PerceptionRange {
            min: [-50.0, -50.0, -5.0],
            max: [50.0, 50.0, 3.0],
        }
    }
}

/// Lift a pixel with known depth into the camera frame: K^-1 (uD, vD, D, 1)^T
/// with the homogeneous coordinate restored to 1.
pub fn pixel_to_camera(pt: PixelPoint, cam: &CameraParams) -> Result<CamPoint, GeomError> {
    let depth = pt.depth.ok_or(GeomError::MissingDepth)?;
    if !(depth > 0.0) {
        return Err(GeomError::NonPositiveDepth(depth));
    }
    let h = cam
        .intrinsic_inv
        .mul_vec([pt.u * depth, pt.v * depth, depth, 1.0]);
    if h[3].abs() < 1e-300 {
        return Err(GeomError::SingularIntrinsic);
    }
    Ok(CamPoint::new(h[0] / h[3], h[1] / h[3], h[2] / h[3]))
}

/// Move a camera-frame point into the lidar frame: R^-1 p (homogeneous).
pub fn camera_to_lidar(p: CamPoint, cam: &CameraParams) -> LidarPoint {
    let h = cam.extrinsic_inv.mul_vec([p.x, p.y, p.z, 1.0]);
    LidarPoint::new(h[0] / h[3], h[1] / h[3], h[2] / h[3])
}

/// Project a lidar-frame point into a view. Fails with `BehindCamera` when
/// the camera-frame depth is not positive so callers can skip the sample.
pub fn lidar_to_pixel(p: LidarPoint, cam: &CameraParams) -> Result<PixelPoint, GeomError> {
    let q = cam.extrinsic.mul_vec([p.x, p.y, p.z, 1.0]);
    let (x, y, z) = (q[0] / q[3], q[1] / q[3], q[2] / q[3]);
    if z <= MIN_DEPTH {
        return Err(GeomError::BehindCamera(z));
    }
    let s = cam.intrinsic.mul_vec([x, y, z, 1.0]);
    let w = s[2];
    Ok(PixelPoint::with_depth(s[0] / w, s[1] / w, z))
}

/// Normalize a lidar-frame point by the perception range, clamping each
/// component to [0,1].
pub fn normalize_center(p: LidarPoint, range: &PerceptionRange) -> [f64; 3] {
    let a = p.to_array();
    let mut out = [0.0; 3];
    for i in 0..3 {
        let t = (a[i] - range.min[i]) / (range.max[i] - range.min[i]);
        out[i] = t.clamp(0.0, 1.0);
    }
    out
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    /// Independent 4x4 inverse via cofactor expansion (adjugate / det). The
    /// production path uses Gauss-Jordan, so the two routes are distinct.
    fn cofactor_inverse(m: &Mat4) -> Mat4 {
        fn minor3(m: &Mat4, skip_r: usize, skip_c: usize) -> f64 {
            let mut e = [0.0; 9];
            let mut idx = 0;
            for r in 0..4 {
                if r == skip_r {
                    continue;
                }
                for c in 0..4 {
                    if c == skip_c {
                        continue;
                    }
                    e[idx] = m.at(r, c);
                    idx += 1;
                }
            }
            e[0] * (e[4] * e[8] - e[5] * e[7]) - e[1] * (e[3] * e[8] - e[5] * e[6])
                + e[2] * (e[3] * e[7] - e[4] * e[6])
        }
        let mut cof = Mat4([0.0; 16]);
        for r in 0..4 {
            for c in 0..4 {
                let sign = if (r + c) % 2 == 0 { 1.0 } else { -1.0 };
                cof.set(r, c, sign * minor3(m, r, c));
            }
        }
        let det: f64 = (0..4).map(|c| m.at(0, c) * cof.at(0, c)).sum();
        let adj = cof.transpose();
        Mat4(std::array::from_fn(|i| adj.0[i] / det))
    }

    fn cam(intr: Mat4, extr: Mat4) -> CameraParams {
        CameraParams::new(intr, extr).unwrap()
    }

    fn rigid(yaw: f64, pitch: f64, roll: f64, t: [f64; 3]) -> Mat4 {
        let (sy, cy) = yaw.sin_cos();
        let (sp, cp) = pitch.sin_cos();
        let (sr, cr) = roll.sin_cos();
        let rz = Mat4::from_rows([
            [cy, -sy, 0.0, 0.0],
            [sy, cy, 0.0, 0.0],
            [0.0, 0.0, 1.0, 0.0],
            [0.0, 0.0, 0.0, 1.0],
        ]);
        let ry = Mat4::from_rows([
            [cp, 0.0, sp, 0.0],
            [0.0, 1.0, 0.0, 0.0],
            [-sp, 0.0, cp, 0.0],
            [0.0, 0.0, 0.0, 1.0],
        ]);
        let rx = Mat4::from_rows([
            [1.0, 0.0, 0.0, 0.0],
            [0.0, cr, -sr, 0.0],
            [0.0, sr, cr, 0.0],
            [0.0, 0.0, 0.0, 1.0],
        ]);
        let mut m = rz.mul(&ry).mul(&rx);
        m.set(0, 3, t[0]);
        m.set(1, 3, t[1]);
        m.set(2, 3, t[2]);
        m
    }

    #[test]
    fn pixel_to_camera_identity_intrinsic() {
        let c = cam(Mat4::identity(), Mat4::identity());
        let p = pixel_to_camera(PixelPoint::with_depth(2.0, 3.0, 4.0), &c).unwrap();
        assert_eq!((p.x, p.y, p.z), (8.0, 12.0, 4.0));
        let o = pixel_to_camera(PixelPoint::with_depth(0.0, 0.0, 1.0), &c).unwrap();
        assert_eq!((o.x, o.y, o.z), (0.0, 0.0, 1.0));
    }

    #[test]
    fn pixel_to_camera_matches_cofactor_oracle() {
        let k = CameraParams::intrinsic_matrix(2.0, 2.0, 1.0, 1.0);
        let c = cam(k, Mat4::identity());
        let got = pixel_to_camera(PixelPoint::with_depth(3.0, 1.0, 2.0), &c).unwrap();
        let k_inv = cofactor_inverse(&k);
        let expect = k_inv.mul_vec([3.0 * 2.0, 1.0 * 2.0, 2.0, 1.0]);
        assert!((got.x - expect[0] / expect[3]).abs() < 1e-12);
        assert!((got.y - expect[1] / expect[3]).abs() < 1e-12);
        assert!((got.z - expect[2] / expect[3]).abs() < 1e-12);
        // Hand value: x = (u - cx) * D / fx = (3-1)*2/2 = 2, y = 0, z = 2.
        assert!((got.x - 2.0).abs() < 1e-12);
        assert!((got.y - 0.0).abs() < 1e-12);
        assert!((got.z - 2.0).abs() < 1e-12);
    }

    #[test]
    fn pixel_to_camera_rejects_bad_inputs() {
        let c = cam(Mat4::identity(), Mat4::identity());
        assert_eq!(
            pixel_to_camera(PixelPoint::with_depth(1.0, 1.0, 0.0), &c),
            Err(GeomError::NonPositiveDepth(0.0))
        );
        assert_eq!(
            pixel_to_camera(PixelPoint::new(1.0, 1.0), &c),
            Err(GeomError::MissingDepth)
        );
        let singular = Mat4::from_rows([
            [1.0, 0.0, 0.0, 0.0],
            [0.0, 0.0, 0.0, 0.0],
            [0.0, 0.0, 1.0, 0.0],
            [0.0, 0.0, 0.0, 1.0],
        ]);
        assert!(matches!(
            CameraParams::new(singular, Mat4::identity()),
            Err(GeomError::SingularIntrinsic)
        ));
    }

    #[test]
    fn camera_to_lidar_identity_and_yaw() {
        let c = cam(Mat4::identity(), Mat4::identity());
        let p = camera_to_lidar(CamPoint::new(1.0, 2.0, 3.0), &c);
        assert_eq!((p.x, p.y, p.z), (1.0, 2.0, 3.0));

        // 90 degree yaw: inverse of a pure rotation is its transpose.
        let r = Mat4::rotation_z(std::f64::consts::FRAC_PI_2);
        let c = cam(Mat4::identity(), r);
        let p = camera_to_lidar(CamPoint::new(1.0, 0.0, 0.0), &c);
        let rt = r.transpose().mul_vec([1.0, 0.0, 0.0, 1.0]);
        assert!((p.x - rt[0]).abs() < 1e-12);
        assert!((p.y - rt[1]).abs() < 1e-12);
        assert!((p.z - rt[2]).abs() < 1e-12);
        assert!((p.x - 0.0).abs() < 1e-12);
        assert!((p.y - -1.0).abs() < 1e-12);
    }

    #[test]
    fn non_rigid_extrinsic_rejected() {
        let mut m = Mat4::identity();
        m.set(0, 0, 2.0);
        assert!(matches!(
            CameraParams::new(Mat4::identity(), m),
            Err(GeomError::NonRigidExtrinsic)
        ));
        // Reflection: orthonormal but det = -1.
        let mut refl = Mat4::identity();
        refl.set(0, 0, -1.0);
        assert!(matches!(
            CameraParams::new(Mat4::identity(), refl),
            Err(GeomError::NonRigidExtrinsic)
        ));
    }

    #[test]
    fn lidar_to_pixel_inverts_lift() {
        let c = cam(Mat4::identity(), Mat4::identity());
        let px = lidar_to_pixel(LidarPoint::new(8.0, 12.0, 4.0), &c).unwrap();
        assert!((px.u - 2.0).abs() < 1e-12);
        assert!((px.v - 3.0).abs() < 1e-12);
        assert!((px.depth.unwrap() - 4.0).abs() < 1e-12);
    }

    #[test]
    fn behind_camera_is_an_error() {
        let c = cam(Mat4::identity(), Mat4::identity());
        let err = lidar_to_pixel(LidarPoint::new(0.0, 0.0, -1.0), &c).unwrap_err();
        assert!(matches!(err, GeomError::BehindCamera(_)));
    }

    #[test]
    fn normalize_center_examples() {
        let r = PerceptionRange::new([-50.0, -50.0, -50.0], [50.0, 50.0, 50.0]).unwrap();
        assert_eq!(
            normalize_center(LidarPoint::new(0.0, 0.0, 0.0), &r),
            [0.5, 0.5, 0.5]
        );
        assert_eq!(
            normalize_center(LidarPoint::new(-50.0, -50.0, -50.0), &r),
            [0.0, 0.0, 0.0]
        );
        // +2R beyond the max corner clamps to 1.
        assert_eq!(
            normalize_center(LidarPoint::new(150.0, 0.0, 0.0), &r)[0],
            1.0
        );
    }

    #[test]
    fn degenerate_range_rejected() {
        let err = PerceptionRange::new([0.0, 0.0, 1.0], [1.0, 1.0, 1.0]).unwrap_err();
        assert_eq!(
            err,
            GeomError::DegenerateRange {
                axis: 2,
                min: 1.0,
                max: 1.0
            }
        );
    }

    proptest! {
        #[test]
        fn round_trip_identity(
            yaw in -3.1f64..3.1,
            pitch in -1.5f64..1.5,
            roll in -3.1f64..3.1,
            tx in -10.0f64..10.0,
            ty in -10.0f64..10.0,
            tz in -10.0f64..10.0,
            u in -20.0f64..20.0,
            v in -20.0f64..20.0,
            d in 0.1f64..60.0,
            fx in 4.0f64..64.0,
            cx in -8.0f64..8.0,
        ) {
            let intr = CameraParams::intrinsic_matrix(fx, fx * 0.9, cx, cx * 0.5);
            let extr = rigid(yaw, pitch, roll, [tx, ty, tz]);
            let c = cam(intr, extr);
            let p_cam = pixel_to_camera(PixelPoint::with_depth(u, v, d), &c).unwrap();
            let p_lidar = camera_to_lidar(p_cam, &c);
            let px = lidar_to_pixel(p_lidar, &c).unwrap();
            prop_assert!((px.u - u).abs() < 1e-9);
            prop_assert!((px.v - v).abs() < 1e-9);
            prop_assert!((px.depth.unwrap() - d).abs() < 1e-9);
        }

        #[test]
        fn extrinsic_composition_stays_rigid(
            y1 in -3.1f64..3.1, p1 in -1.5f64..1.5,
            y2 in -3.1f64..3.1, r2 in -3.1f64..3.1,
            tx in -5.0f64..5.0,
        ) {
            let a = rigid(y1, p1, 0.0, [tx, 0.0, 1.0]);
            let b = rigid(y2, 0.0, r2, [0.0, -tx, 0.5]);
            prop_assert!(super::is_rigid(&a.mul(&b)));
        }

        #[test]
        fn normalized_center_in_unit_cube(
            x in -200.0f64..200.0,
            y in -200.0f64..200.0,
            z in -200.0f64..200.0,
        ) {
            let r = PerceptionRange::default();
            let n = normalize_center(LidarPoint::new(x, y, z), &r);
            for c in n {
                prop_assert!((0.0..=1.0).contains(&c));
            }
        }
    }
}
