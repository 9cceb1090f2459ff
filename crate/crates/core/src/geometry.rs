//! Rigid transforms, pinhole cameras and dense pixel grids.
//!
//! Poses map camera coordinates to world coordinates. Tangent vectors are
//! ordered `[rho, phi]` (translation part first, rotation part second) and
//! optimizer updates are applied on the right: `pose * exp(delta)`.

use std::ops::{Add, Mul};

use nalgebra::{Matrix2x3, Matrix3, Quaternion, UnitQuaternion, Vector2, Vector3, Vector6};

use crate::error::{Error, Result};

pub type Vec2 = Vector2<f64>;
pub type Vec3 = Vector3<f64>;
pub type Mat3 = Matrix3<f64>;
pub type Twist = Vector6<f64>;

/// Skew-symmetric cross-product matrix.
pub fn hat(v: &Vec3) -> Mat3 {
    Mat3::new(0.0, -v.z, v.y, v.z, 0.0, -v.x, -v.y, v.x, 0.0)
}

/// Element of SE(3): `x_world = rotation * x_cam + translation`.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Pose {
    pub rotation: Mat3,
    pub translation: Vec3,
}

impl Default for Pose {
    fn default() -> Self {
        Self::identity()
    }
}

impl Pose {
    pub fn new(rotation: Mat3, translation: Vec3) -> Self {
        Self { rotation, translation }
    }

    pub fn identity() -> Self {
        Self::new(Mat3::identity(), Vec3::zeros())
    }

    pub fn from_translation(t: Vec3) -> Self {
        Self::new(Mat3::identity(), t)
    }

    /// Pose from a unit quaternion given as `(qx, qy, qz, qw)` plus translation.
    pub fn from_quaternion(q: [f64; 4], translation: Vec3) -> Self {
        let uq = UnitQuaternion::from_quaternion(Quaternion::new(q[3], q[0], q[1], q[2]));
        Self::new(uq.to_rotation_matrix().into_inner(), translation)
    }

    /// Rotation as `(qx, qy, qz, qw)` with `qw >= 0`.
    pub fn quaternion(&self) -> [f64; 4] {
        let rot = nalgebra::Rotation3::from_matrix_unchecked(self.rotation);
        let q = UnitQuaternion::from_rotation_matrix(&rot);
        let s = if q.w < 0.0 { -1.0 } else { 1.0 };
        [s * q.i, s * q.j, s * q.k, s * q.w]
    }

    pub fn compose(&self, other: &Pose) -> Pose {
        Pose::new(
            self.rotation * other.rotation,
            self.rotation * other.translation + self.translation,
        )
    }

    pub fn inverse(&self) -> Pose {
        let rt = self.rotation.transpose();
        Pose::new(rt, -(rt * self.translation))
    }

    pub fn transform(&self, p: &Vec3) -> Vec3 {
        self.rotation * p + self.translation
    }

    /// Applies the inverse transform without forming the inverse pose.
    pub fn inverse_transform(&self, p: &Vec3) -> Vec3 {
        self.rotation.transpose() * (p - self.translation)
    }

    /// Right-multiplicative update `self * exp(delta)`.
    pub fn retract(&self, delta: &Twist) -> Pose {
        self.compose(&se3_exp(delta))
    }

    /// `max |R^T R - I|`.
    pub fn orthonormality_error(&self) -> f64 {
        (self.rotation.transpose() * self.rotation - Mat3::identity()).amax()
    }

    /// Re-projects the rotation onto SO(3).
    pub fn orthonormalized(&self) -> Pose {
        Pose::new(orthonormalize(&self.rotation), self.translation)
    }

    pub fn rotation_angle_to(&self, other: &Pose) -> f64 {
        so3_log(&(self.rotation.transpose() * other.rotation)).norm()
    }

    pub fn translation_distance_to(&self, other: &Pose) -> f64 {
        (self.translation - other.translation).norm()
    }
}

impl Mul for Pose {
    type Output = Pose;
    fn mul(self, rhs: Pose) -> Pose {
        self.compose(&rhs)
    }
}

impl<'a> Mul<&'a Pose> for &'a Pose {
    type Output = Pose;
    fn mul(self, rhs: &Pose) -> Pose {
        self.compose(rhs)
    }
}

/// Closest rotation matrix in the Frobenius sense.
pub fn orthonormalize(m: &Mat3) -> Mat3 {
    let svd = m.svd(true, true);
    let u = svd.u.expect("svd u");
    let vt = svd.v_t.expect("svd v_t");
    let mut r = u * vt;
    if r.determinant() < 0.0 {
        let mut u2 = u;
        // flip the column paired with the smallest singular value
        let (imin, _) = svd
            .singular_values
            .iter()
            .enumerate()
            .fold((0, f64::INFINITY), |acc, (i, &s)| if s < acc.1 { (i, s) } else { acc });
        u2.column_mut(imin).neg_mut();
        r = u2 * vt;
    }
    r
}

pub fn so3_exp(phi: &Vec3) -> Mat3 {
    let theta2 = phi.norm_squared();
    let k = hat(phi);
    let (a, b) = if theta2 < 1e-16 {
        (1.0 - theta2 / 6.0, 0.5 - theta2 / 24.0)
    } else {
        let theta = theta2.sqrt();
        (theta.sin() / theta, (1.0 - theta.cos()) / theta2)
    };
    Mat3::identity() + k * a + k * k * b
}

/// Rotation vector of `r`. Not unique at angle pi; see [`se3_log`] for the
/// checked variant.
pub fn so3_log(r: &Mat3) -> Vec3 {
    let w = Vec3::new(r[(2, 1)] - r[(1, 2)], r[(0, 2)] - r[(2, 0)], r[(1, 0)] - r[(0, 1)]) * 0.5;
    let s = w.norm();
    let c = ((r.trace() - 1.0) * 0.5).clamp(-1.0, 1.0);
    let theta = s.atan2(c);
    if s < 1e-12 {
        if c > 0.0 {
            return w;
        }
        // angle pi: recover the axis from the symmetric part
        let b = (r + Mat3::identity()) * 0.5;
        let mut best = 0;
        for i in 1..3 {
            if b[(i, i)] > b[(best, best)] {
                best = i;
            }
        }
        let axis = b.column(best).into_owned() / b[(best, best)].max(1e-300).sqrt();
        return axis.normalize() * std::f64::consts::PI;
    }
    w * (theta / s)
}

fn left_jacobian(phi: &Vec3) -> Mat3 {
    let theta2 = phi.norm_squared();
    let k = hat(phi);
    let (b, c) = if theta2 < 1e-12 {
        (0.5 - theta2 / 24.0, 1.0 / 6.0 - theta2 / 120.0)
    } else {
        let theta = theta2.sqrt();
        ((1.0 - theta.cos()) / theta2, (theta - theta.sin()) / (theta2 * theta))
    };
    Mat3::identity() + k * b + k * k * c
}

fn left_jacobian_inverse(phi: &Vec3) -> Mat3 {
    let theta2 = phi.norm_squared();
    let k = hat(phi);
    let c = if theta2 < 1e-12 {
        1.0 / 12.0 + theta2 / 720.0
    } else {
        let theta = theta2.sqrt();
        (1.0 - theta * theta.sin() / (2.0 * (1.0 - theta.cos()))) / theta2
    };
    Mat3::identity() - k * 0.5 + k * k * c
}

/// Exponential map; `twist = [rho, phi]`.
pub fn se3_exp(twist: &Twist) -> Pose {
    let rho = Vec3::new(twist[0], twist[1], twist[2]);
    let phi = Vec3::new(twist[3], twist[4], twist[5]);
    Pose::new(so3_exp(&phi), left_jacobian(&phi) * rho)
}

/// Logarithm map. Fails when the rotation angle is within 1e-6 of pi.
pub fn se3_log(pose: &Pose) -> Result<Twist> {
    let phi = so3_log(&pose.rotation);
    let angle = phi.norm();
    if angle >= std::f64::consts::PI - 1e-6 {
        return Err(Error::NearCutLocus(angle));
    }
    let rho = left_jacobian_inverse(&phi) * pose.translation;
    Ok(Twist::new(rho.x, rho.y, rho.z, phi.x, phi.y, phi.z))
}

/// Pinhole intrinsics plus image size.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Camera {
    pub fx: f64,
    pub fy: f64,
    pub cx: f64,
    pub cy: f64,
    pub width: usize,
    pub height: usize,
}

impl Camera {
    pub fn new(fx: f64, fy: f64, cx: f64, cy: f64, width: usize, height: usize) -> Result<Self> {
        if !(fx > 0.0 && fy > 0.0) {
            return Err(Error::InvalidCamera(format!(
                "focal lengths must be positive, got ({fx}, {fy})"
            )));
        }
        if width == 0 || height == 0 {
            return Err(Error::InvalidCamera(format!("image size {width}x{height}")));
        }
        Ok(Self {
            fx,
            fy,
            cx,
            cy,
            width,
            height,
        })
    }

    pub fn pixel_count(&self) -> usize {
        self.width * self.height
    }

    /// Pixel coordinates of a camera-frame point.
    pub fn project(&self, p: &Vec3) -> Result<Vec2> {
        if p.z <= 0.0 {
            return Err(Error::BehindCamera(p.z));
        }
        Ok(self.project_unchecked(p))
    }

    #[inline]
    pub fn project_unchecked(&self, p: &Vec3) -> Vec2 {
        Vec2::new(self.fx * p.x / p.z + self.cx, self.fy * p.y / p.z + self.cy)
    }

    /// Projection and its 2x3 Jacobian with respect to the point.
    pub fn project_with_jacobian(&self, p: &Vec3) -> Result<(Vec2, Matrix2x3<f64>)> {
        let uv = self.project(p)?;
        Ok((uv, self.projection_jacobian(p)))
    }

    #[inline]
    pub fn projection_jacobian(&self, p: &Vec3) -> Matrix2x3<f64> {
        let iz = 1.0 / p.z;
        let iz2 = iz * iz;
        Matrix2x3::new(
            self.fx * iz,
            0.0,
            -self.fx * p.x * iz2,
            0.0,
            self.fy * iz,
            -self.fy * p.y * iz2,
        )
    }

    /// `K^-1 [u; v; 1]`.
    #[inline]
    pub fn ray(&self, pixel: &Vec2) -> Vec3 {
        Vec3::new((pixel.x - self.cx) / self.fx, (pixel.y - self.cy) / self.fy, 1.0)
    }

    /// Camera-frame point at the given inverse depth along a pixel ray.
    pub fn unproject(&self, pixel: &Vec2, inverse_depth: f64) -> Result<Vec3> {
        if !(inverse_depth > 0.0) {
            return Err(Error::InvalidInverseDepth(inverse_depth));
        }
        Ok(self.ray(pixel) / inverse_depth)
    }

    /// True when `uv` lies inside the bilinear-sampling domain `[0, w-1] x [0, h-1]`.
    #[inline]
    pub fn contains(&self, uv: &Vec2) -> bool {
        uv.x >= 0.0 && uv.y >= 0.0 && uv.x <= (self.width - 1) as f64 && uv.y <= (self.height - 1) as f64
    }
}

/// Dense row-major field over integer pixel coordinates.
#[derive(Debug, Clone, PartialEq)]
pub struct PixelGrid<T> {
    width: usize,
    height: usize,
    data: Vec<T>,
}

impl<T: Clone> PixelGrid<T> {
    pub fn filled(width: usize, height: usize, value: T) -> Self {
        Self {
            width,
            height,
            data: vec![value; width * height],
        }
    }
}

impl<T> PixelGrid<T> {
    pub fn from_vec(width: usize, height: usize, data: Vec<T>) -> Result<Self> {
        if data.len() != width * height {
            return Err(Error::DimensionMismatch(format!(
                "{} values for a {width}x{height} grid",
                data.len()
            )));
        }
        Ok(Self { width, height, data })
    }

    pub fn from_fn(width: usize, height: usize, mut f: impl FnMut(usize, usize) -> T) -> Self {
        let mut data = Vec::with_capacity(width * height);
        for y in 0..height {
            for x in 0..width {
                data.push(f(x, y));
            }
        }
        Self { width, height, data }
    }

    pub fn width(&self) -> usize {
        self.width
    }

    pub fn height(&self) -> usize {
        self.height
    }

    pub fn len(&self) -> usize {
        self.data.len()
    }

    pub fn is_empty(&self) -> bool {
        self.data.is_empty()
    }

    pub fn same_shape<U>(&self, other: &PixelGrid<U>) -> bool {
        self.width == other.width && self.height == other.height
    }

    #[inline]
    pub fn get(&self, x: usize, y: usize) -> &T {
        &self.data[y * self.width + x]
    }

    #[inline]
    pub fn get_mut(&mut self, x: usize, y: usize) -> &mut T {
        &mut self.data[y * self.width + x]
    }

    #[inline]
    pub fn set(&mut self, x: usize, y: usize, value: T) {
        self.data[y * self.width + x] = value;
    }

    pub fn as_slice(&self) -> &[T] {
        &self.data
    }

    pub fn as_mut_slice(&mut self) -> &mut [T] {
        &mut self.data
    }

    pub fn into_vec(self) -> Vec<T> {
        self.data
    }

    pub fn iter(&self) -> impl Iterator<Item = &T> {
        self.data.iter()
    }

    /// Iterates `(x, y, value)` in row-major order.
    pub fn indexed(&self) -> impl Iterator<Item = (usize, usize, &T)> {
        let w = self.width;
        self.data.iter().enumerate().map(move |(i, v)| (i % w, i / w, v))
    }

    pub fn map<U>(&self, f: impl FnMut(&T) -> U) -> PixelGrid<U> {
        PixelGrid {
            width: self.width,
            height: self.height,
            data: self.data.iter().map(f).collect(),
        }
    }
}

impl<T> PixelGrid<T>
where
    T: Copy + Add<Output = T> + Mul<f64, Output = T>,
{
    /// Bilinear sample with pixel centers at integer coordinates. `None`
    /// outside `[0, w-1] x [0, h-1]`; coordinates within
    /// [`BORDER_SNAP`] of the border are snapped onto it.
    pub fn sample_bilinear(&self, u: f64, v: f64) -> Option<T> {
        let (max_u, max_v) = ((self.width - 1) as f64, (self.height - 1) as f64);
        if !(u >= -BORDER_SNAP && v >= -BORDER_SNAP && u <= max_u + BORDER_SNAP && v <= max_v + BORDER_SNAP) {
            return None;
        }
        let (u, v) = (u.clamp(0.0, max_u), v.clamp(0.0, max_v));
        let x0 = (u.floor() as usize).min(self.width.saturating_sub(2));
        let y0 = (v.floor() as usize).min(self.height.saturating_sub(2));
        let x1 = (x0 + 1).min(self.width - 1);
        let y1 = (y0 + 1).min(self.height - 1);
        let ax = u - x0 as f64;
        let ay = v - y0 as f64;
        let top = *self.get(x0, y0) * (1.0 - ax) + *self.get(x1, y0) * ax;
        let bottom = *self.get(x0, y1) * (1.0 - ax) + *self.get(x1, y1) * ax;
        Some(top * (1.0 - ay) + bottom * ay)
    }

    /// Nearest-pixel sample; `None` outside the grid.
    pub fn sample_nearest(&self, u: f64, v: f64) -> Option<T> {
        let x = u.round();
        let y = v.round();
        if x < 0.0 || y < 0.0 || x > (self.width - 1) as f64 || y > (self.height - 1) as f64 {
            return None;
        }
        Some(*self.get(x as usize, y as usize))
    }
}

/// Round-off allowance (pixels) at the border of the sampling domain.
pub const BORDER_SNAP: f64 = 1e-9;

/// Least-squares similarity `b ~ scale * rotation * a + translation`.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Similarity {
    pub scale: f64,
    pub rotation: Mat3,
    pub translation: Vec3,
}

impl Similarity {
    pub fn apply(&self, p: &Vec3) -> Vec3 {
        self.rotation * p * self.scale + self.translation
    }
}

/// Umeyama alignment of point sets. With `with_scale = false` the scale is
/// fixed to one (rigid alignment).
pub fn umeyama_points(a: &[Vec3], b: &[Vec3], with_scale: bool) -> Result<Similarity> {
    if a.len() != b.len() {
        return Err(Error::DimensionMismatch(format!("{} vs {} points", a.len(), b.len())));
    }
    if a.len() < 3 {
        return Err(Error::RankDeficient);
    }
    let n = a.len() as f64;
    let mean_a = a.iter().sum::<Vec3>() / n;
    let mean_b = b.iter().sum::<Vec3>() / n;
    let mut cov = Mat3::zeros();
    let mut var_a = 0.0;
    for (pa, pb) in a.iter().zip(b) {
        let da = pa - mean_a;
        cov += (pb - mean_b) * da.transpose();
        var_a += da.norm_squared();
    }
    cov /= n;
    var_a /= n;

    // collinearity test on the source configuration
    let mut scatter = Mat3::zeros();
    for pa in a {
        let da = pa - mean_a;
        scatter += da * da.transpose();
    }
    let mut eig: Vec<f64> = scatter.symmetric_eigenvalues().iter().copied().collect();
    eig.sort_by(|x, y| y.total_cmp(x));
    if var_a < 1e-18 || eig[1] <= 1e-12 * eig[0] {
        return Err(Error::RankDeficient);
    }

    let svd = cov.svd(true, true);
    let u = svd.u.expect("svd u");
    let vt = svd.v_t.expect("svd v_t");
    let d = svd.singular_values;
    let mut s = Vec3::new(1.0, 1.0, 1.0);
    if u.determinant() * vt.determinant() < 0.0 {
        let imin = (0..3).min_by(|&i, &j| d[i].total_cmp(&d[j])).unwrap();
        s[imin] = -1.0;
    }
    let rotation = u * Mat3::from_diagonal(&s) * vt;
    let scale = if with_scale {
        (d.component_mul(&s)).sum() / var_a
    } else {
        1.0
    };
    let translation = mean_b - rotation * mean_a * scale;
    Ok(Similarity {
        scale,
        rotation,
        translation,
    })
}

/// Aligns trajectory `a` onto trajectory `b` using their positions.
pub fn umeyama_align(traj_a: &[Pose], traj_b: &[Pose], with_scale: bool) -> Result<Similarity> {
    let a: Vec<Vec3> = traj_a.iter().map(|p| p.translation).collect();
    let b: Vec<Vec3> = traj_b.iter().map(|p| p.translation).collect();
    umeyama_points(&a, &b, with_scale)
}
