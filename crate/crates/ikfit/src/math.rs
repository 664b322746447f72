//! Minimal scalar-generic 3D math used by forward kinematics.
//!
//! FK is written once over the [`Real`] trait and instantiated with plain
//! `f64` for evaluation and with [`Dual`] for exact forward-mode derivatives
//! (one directional derivative per pass).

use std::ops::{Add, Div, Mul, Neg, Sub};

pub trait Real:
    Copy
    + Add<Output = Self>
    + Sub<Output = Self>
    + Mul<Output = Self>
    + Div<Output = Self>
    + Neg<Output = Self>
{
    fn from_f64(x: f64) -> Self;
    fn value(self) -> f64;
    fn sqrt(self) -> Self;
    fn sin(self) -> Self;
    fn cos(self) -> Self;
}

impl Real for f64 {
    fn from_f64(x: f64) -> Self {
        x
    }
    fn value(self) -> f64 {
        self
    }
    fn sqrt(self) -> Self {
        f64::sqrt(self)
    }
    fn sin(self) -> Self {
        f64::sin(self)
    }
    fn cos(self) -> Self {
        f64::cos(self)
    }
}

/// First-order dual number `re + du·ε` with `ε² = 0`.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Dual {
    pub re: f64,
    pub du: f64,
}

impl Dual {
    pub fn constant(re: f64) -> Self {
        Dual { re, du: 0.0 }
    }

    /// The variable being differentiated against.
    pub fn seed(re: f64) -> Self {
        Dual { re, du: 1.0 }
    }
}

impl Add for Dual {
    type Output = Dual;
    fn add(self, o: Dual) -> Dual {
        Dual { re: self.re + o.re, du: self.du + o.du }
    }
}

impl Sub for Dual {
    type Output = Dual;
    fn sub(self, o: Dual) -> Dual {
        Dual { re: self.re - o.re, du: self.du - o.du }
    }
}

impl Mul for Dual {
    type Output = Dual;
    fn mul(self, o: Dual) -> Dual {
        Dual {
            re: self.re * o.re,
            du: self.re * o.du + self.du * o.re,
        }
    }
}

impl Div for Dual {
    type Output = Dual;
    fn div(self, o: Dual) -> Dual {
        Dual {
            re: self.re / o.re,
            du: (self.du * o.re - self.re * o.du) / (o.re * o.re),
        }
    }
}

impl Neg for Dual {
    type Output = Dual;
    fn neg(self) -> Dual {
        Dual { re: -self.re, du: -self.du }
    }
}

impl Real for Dual {
    fn from_f64(x: f64) -> Self {
        Dual::constant(x)
    }
    fn value(self) -> f64 {
        self.re
    }
    fn sqrt(self) -> Self {
        let r = self.re.sqrt();
        Dual { re: r, du: self.du / (2.0 * r) }
    }
    fn sin(self) -> Self {
        Dual { re: self.re.sin(), du: self.du * self.re.cos() }
    }
    fn cos(self) -> Self {
        Dual { re: self.re.cos(), du: -self.du * self.re.sin() }
    }
}

pub type Vec3<S> = [S; 3];
pub type Mat3<S> = [[S; 3]; 3];

pub fn vec3_from_f64<S: Real>(v: &nalgebra::Vector3<f64>) -> Vec3<S> {
    [S::from_f64(v.x), S::from_f64(v.y), S::from_f64(v.z)]
}

pub fn vadd<S: Real>(a: Vec3<S>, b: Vec3<S>) -> Vec3<S> {
    [a[0] + b[0], a[1] + b[1], a[2] + b[2]]
}

pub fn vscale<S: Real>(s: S, a: Vec3<S>) -> Vec3<S> {
    [s * a[0], s * a[1], s * a[2]]
}

pub fn mat_vec<S: Real>(m: &Mat3<S>, v: Vec3<S>) -> Vec3<S> {
    [
        m[0][0] * v[0] + m[0][1] * v[1] + m[0][2] * v[2],
        m[1][0] * v[0] + m[1][1] * v[1] + m[1][2] * v[2],
        m[2][0] * v[0] + m[2][1] * v[1] + m[2][2] * v[2],
    ]
}

pub fn mat_mul<S: Real>(a: &Mat3<S>, b: &Mat3<S>) -> Mat3<S> {
    let mut out = [[S::from_f64(0.0); 3]; 3];
    for (i, row) in out.iter_mut().enumerate() {
        for (j, cell) in row.iter_mut().enumerate() {
            *cell = a[i][0] * b[0][j] + a[i][1] * b[1][j] + a[i][2] * b[2][j];
        }
    }
    out
}

pub fn identity<S: Real>() -> Mat3<S> {
    let z = S::from_f64(0.0);
    let o = S::from_f64(1.0);
    [[o, z, z], [z, o, z], [z, z, o]]
}

/// Rotation matrix `exp([v]×)` via Rodrigues, with a series expansion of the
/// `sin θ / θ` and `(1 − cos θ) / θ²` coefficients near θ = 0 so the map stays
/// smooth for dual-number arguments.
pub fn rot_exp<S: Real>(v: Vec3<S>) -> Mat3<S> {
    let theta_sq = v[0] * v[0] + v[1] * v[1] + v[2] * v[2];
    let (a, b) = if theta_sq.value() < 1e-12 {
        // sin θ/θ ≈ 1 − θ²/6, (1 − cos θ)/θ² ≈ 1/2 − θ²/24
        (
            S::from_f64(1.0) - theta_sq / S::from_f64(6.0),
            S::from_f64(0.5) - theta_sq / S::from_f64(24.0),
        )
    } else {
        let theta = theta_sq.sqrt();
        (
            theta.sin() / theta,
            (S::from_f64(1.0) - theta.cos()) / theta_sq,
        )
    };
    let z = S::from_f64(0.0);
    let k = [[z, -v[2], v[1]], [v[2], z, -v[0]], [-v[1], v[0], z]];
    let kk = mat_mul(&k, &k);
    let mut out = identity::<S>();
    for i in 0..3 {
        for j in 0..3 {
            out[i][j] = out[i][j] + a * k[i][j] + b * kk[i][j];
        }
    }
    out
}

/// Rotation about a fixed unit axis by a (possibly dual) angle.
pub fn rot_axis_angle<S: Real>(axis: &nalgebra::Unit<nalgebra::Vector3<f64>>, angle: S) -> Mat3<S> {
    let ax: Vec3<S> = vec3_from_f64(axis.as_ref());
    let s = angle.sin();
    let c = angle.cos();
    let one_c = S::from_f64(1.0) - c;
    let z = S::from_f64(0.0);
    let k = [[z, -ax[2], ax[1]], [ax[2], z, -ax[0]], [-ax[1], ax[0], z]];
    let kk = mat_mul(&k, &k);
    let mut out = identity::<S>();
    for i in 0..3 {
        for j in 0..3 {
            out[i][j] = out[i][j] + s * k[i][j] + one_c * kk[i][j];
        }
    }
    out
}
