//! 2D affine algebra shared by the compositing optimizer, motion
//! refactoring and the transformation API.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// The 7-parameter transform: translation, rotation, anisotropic scale and
/// shear, applied about an anchor point. The linear part is
/// `R(theta) * ShearX(kx) * ShearY(ky) * S(sx, sy)`.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct AffineParams {
    pub tx: f64,
    pub ty: f64,
    pub theta: f64,
    pub sx: f64,
    pub sy: f64,
    pub kx: f64,
    pub ky: f64,
}

impl Default for AffineParams {
    fn default() -> Self {
        Self::identity()
    }
}

impl AffineParams {
    pub fn identity() -> Self {
        Self { tx: 0.0, ty: 0.0, theta: 0.0, sx: 1.0, sy: 1.0, kx: 0.0, ky: 0.0 }
    }

    pub fn translation(tx: f64, ty: f64) -> Self {
        Self { tx, ty, ..Self::identity() }
    }

    /// 2x2 linear part.
    pub fn linear(&self) -> Mat2 {
        let r = Mat2::rotation(self.theta);
        let shx = Mat2::new(1.0, self.kx, 0.0, 1.0);
        let shy = Mat2::new(1.0, 0.0, self.ky, 1.0);
        let s = Mat2::new(self.sx, 0.0, 0.0, self.sy);
        r.mul(&shx).mul(&shy).mul(&s)
    }

    /// Derivative of the linear part with respect to one of the five linear
    /// parameters (0=theta, 1=sx, 2=sy, 3=kx, 4=ky).
    pub fn linear_derivative(&self, which: usize) -> Mat2 {
        let r = Mat2::rotation(self.theta);
        let dr = Mat2::new(
            -self.theta.sin(),
            -self.theta.cos(),
            self.theta.cos(),
            -self.theta.sin(),
        );
        let shx = Mat2::new(1.0, self.kx, 0.0, 1.0);
        let shy = Mat2::new(1.0, 0.0, self.ky, 1.0);
        let s = Mat2::new(self.sx, 0.0, 0.0, self.sy);
        match which {
            0 => dr.mul(&shx).mul(&shy).mul(&s),
            1 => r.mul(&shx).mul(&shy).mul(&Mat2::new(1.0, 0.0, 0.0, 0.0)),
            2 => r.mul(&shx).mul(&shy).mul(&Mat2::new(0.0, 0.0, 0.0, 1.0)),
            3 => r.mul(&Mat2::new(0.0, 1.0, 0.0, 0.0)).mul(&shy).mul(&s),
            4 => r.mul(&shx).mul(&Mat2::new(0.0, 0.0, 1.0, 0.0)).mul(&s),
            _ => panic!("linear parameter index out of range"),
        }
    }

    /// Full affine map taking anchor-relative source points to canvas
    /// points: `q = canvas_anchor + t + L * (p - src_anchor)`.
    pub fn to_affine(&self, src_anchor: (f64, f64), canvas_anchor: (f64, f64)) -> Affine {
        let m = self.linear();
        let (ax, ay) = src_anchor;
        let (cx, cy) = canvas_anchor;
        let b = [
            cx + self.tx - (m.a * ax + m.b * ay),
            cy + self.ty - (m.c * ax + m.d * ay),
        ];
        Affine { m, b }
    }

    /// Recovers parameters (with `ky = 0`) from a full affine map and the
    /// same anchors used by [`Self::to_affine`]. Exact for any invertible
    /// orientation-preserving affine.
    pub fn from_affine(
        affine: &Affine,
        src_anchor: (f64, f64),
        canvas_anchor: (f64, f64),
    ) -> Result<Self> {
        let m = &affine.m;
        if m.det().abs() < 1e-12 {
            return Err(Error::SingularTransform);
        }
        // L = R(theta) * ShearX(kx) * S(sx, sy) with ky = 0:
        // column 0 = (cos*sx, sin*sx), column 1 = R * (kx*sy, sy).
        let sx = (m.a * m.a + m.c * m.c).sqrt();
        let theta = m.c.atan2(m.a);
        let (sin, cos) = theta.sin_cos();
        let u0 = cos * m.b + sin * m.d;
        let u1 = -sin * m.b + cos * m.d;
        if u1 <= 0.0 || sx <= 0.0 {
            return Err(Error::SingularTransform);
        }
        let sy = u1;
        let kx = u0 / u1;
        let (ax, ay) = src_anchor;
        let (cx, cy) = canvas_anchor;
        let tx = affine.b[0] - cx + (m.a * ax + m.b * ay);
        let ty = affine.b[1] - cy + (m.c * ax + m.d * ay);
        Ok(Self { tx, ty, theta, sx, sy, kx, ky: 0.0 })
    }

    pub fn is_valid(&self) -> bool {
        let finite = [self.tx, self.ty, self.theta, self.sx, self.sy, self.kx, self.ky]
            .iter()
            .all(|v| v.is_finite());
        finite && self.sx > 0.0 && self.sy > 0.0 && self.linear().det().abs() >= 1e-9
    }
}

/// Row-major 2x2 matrix `[a b; c d]`.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Mat2 {
    pub a: f64,
    pub b: f64,
    pub c: f64,
    pub d: f64,
}

impl Mat2 {
    pub fn new(a: f64, b: f64, c: f64, d: f64) -> Self {
        Self { a, b, c, d }
    }

    pub fn identity() -> Self {
        Self::new(1.0, 0.0, 0.0, 1.0)
    }

    pub fn rotation(theta: f64) -> Self {
        let (s, c) = theta.sin_cos();
        Self::new(c, -s, s, c)
    }

    pub fn det(&self) -> f64 {
        self.a * self.d - self.b * self.c
    }

    pub fn mul(&self, o: &Mat2) -> Mat2 {
        Mat2::new(
            self.a * o.a + self.b * o.c,
            self.a * o.b + self.b * o.d,
            self.c * o.a + self.d * o.c,
            self.c * o.b + self.d * o.d,
        )
    }

    pub fn apply(&self, x: f64, y: f64) -> (f64, f64) {
        (self.a * x + self.b * y, self.c * x + self.d * y)
    }

    pub fn inverse(&self) -> Result<Mat2> {
        let det = self.det();
        if det.abs() < 1e-9 {
            return Err(Error::SingularTransform);
        }
        Ok(Mat2::new(self.d / det, -self.b / det, -self.c / det, self.a / det))
    }
}

/// Affine map `q = M p + b`.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Affine {
    pub m: Mat2,
    pub b: [f64; 2],
}

impl Affine {
    pub fn identity() -> Self {
        Self { m: Mat2::identity(), b: [0.0, 0.0] }
    }

    pub fn apply(&self, x: f64, y: f64) -> (f64, f64) {
        let (mx, my) = self.m.apply(x, y);
        (mx + self.b[0], my + self.b[1])
    }

    /// `self ∘ other`: applies `other` first.
    pub fn compose(&self, other: &Affine) -> Affine {
        let m = self.m.mul(&other.m);
        let (bx, by) = self.m.apply(other.b[0], other.b[1]);
        Affine { m, b: [bx + self.b[0], by + self.b[1]] }
    }

    pub fn inverse(&self) -> Result<Affine> {
        let inv = self.m.inverse()?;
        let (bx, by) = inv.apply(self.b[0], self.b[1]);
        Ok(Affine { m: inv, b: [-bx, -by] })
    }

    pub fn max_abs_diff(&self, other: &Affine) -> f64 {
        [
            self.m.a - other.m.a,
            self.m.b - other.m.b,
            self.m.c - other.m.c,
            self.m.d - other.m.d,
            self.b[0] - other.b[0],
            self.b[1] - other.b[1],
        ]
        .iter()
        .fold(0.0f64, |acc, v| acc.max(v.abs()))
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use approx::assert_abs_diff_eq;

    #[test]
    fn linear_derivative_matches_finite_difference() {
        let p = AffineParams {
            tx: 3.0,
            ty: -2.0,
            theta: 0.4,
            sx: 1.3,
            sy: 0.8,
            kx: 0.2,
            ky: -0.1,
        };
        let h = 1e-6;
        for which in 0..5 {
            let mut lo = p;
            let mut hi = p;
            let field: fn(&mut AffineParams) -> &mut f64 = match which {
                0 => |p| &mut p.theta,
                1 => |p| &mut p.sx,
                2 => |p| &mut p.sy,
                3 => |p| &mut p.kx,
                _ => |p| &mut p.ky,
            };
            *field(&mut lo) -= h;
            *field(&mut hi) += h;
            let (ml, mh) = (lo.linear(), hi.linear());
            let fd = Mat2::new(
                (mh.a - ml.a) / (2.0 * h),
                (mh.b - ml.b) / (2.0 * h),
                (mh.c - ml.c) / (2.0 * h),
                (mh.d - ml.d) / (2.0 * h),
            );
            let an = p.linear_derivative(which);
            assert_abs_diff_eq!(an.a, fd.a, epsilon = 1e-6);
            assert_abs_diff_eq!(an.b, fd.b, epsilon = 1e-6);
            assert_abs_diff_eq!(an.c, fd.c, epsilon = 1e-6);
            assert_abs_diff_eq!(an.d, fd.d, epsilon = 1e-6);
        }
    }

    #[test]
    fn params_affine_roundtrip() {
        let p = AffineParams {
            tx: 5.5,
            ty: -3.25,
            theta: 0.7,
            sx: 1.4,
            sy: 0.6,
            kx: 0.3,
            ky: 0.0,
        };
        let aff = p.to_affine((10.0, 12.0), (64.0, 48.0));
        let back = AffineParams::from_affine(&aff, (10.0, 12.0), (64.0, 48.0)).unwrap();
        assert_abs_diff_eq!(p.tx, back.tx, epsilon = 1e-9);
        assert_abs_diff_eq!(p.ty, back.ty, epsilon = 1e-9);
        assert_abs_diff_eq!(p.theta, back.theta, epsilon = 1e-9);
        assert_abs_diff_eq!(p.sx, back.sx, epsilon = 1e-9);
        assert_abs_diff_eq!(p.sy, back.sy, epsilon = 1e-9);
        assert_abs_diff_eq!(p.kx, back.kx, epsilon = 1e-9);
    }

    #[test]
    fn nonzero_ky_roundtrips_as_map() {
        // ky is folded into the other parameters; the affine map itself must
        // be preserved exactly.
        let p = AffineParams {
            tx: 1.0,
            ty: 2.0,
            theta: -0.3,
            sx: 0.9,
            sy: 1.1,
            kx: 0.1,
            ky: 0.25,
        };
        let aff = p.to_affine((8.0, 8.0), (32.0, 32.0));
        let q = AffineParams::from_affine(&aff, (8.0, 8.0), (32.0, 32.0)).unwrap();
        let aff2 = q.to_affine((8.0, 8.0), (32.0, 32.0));
        assert!(aff.max_abs_diff(&aff2) < 1e-9);
        assert_eq!(q.ky, 0.0);
    }

    #[test]
    fn compose_and_inverse() {
        let a = AffineParams {
            tx: 2.0,
            ty: 1.0,
            theta: 0.5,
            sx: 1.2,
            sy: 0.9,
            kx: 0.1,
            ky: 0.0,
        }
        .to_affine((0.0, 0.0), (0.0, 0.0));
        let b = AffineParams::translation(-3.0, 4.0).to_affine((0.0, 0.0), (0.0, 0.0));
        let ab = a.compose(&b);
        let (x, y) = b.apply(1.5, -2.5);
        let (ex, ey) = a.apply(x, y);
        let (gx, gy) = ab.apply(1.5, -2.5);
        assert_abs_diff_eq!(ex, gx, epsilon = 1e-12);
        assert_abs_diff_eq!(ey, gy, epsilon = 1e-12);
        let inv = ab.inverse().unwrap();
        let (rx, ry) = inv.apply(gx, gy);
        assert_abs_diff_eq!(rx, 1.5, epsilon = 1e-9);
        assert_abs_diff_eq!(ry, -2.5, epsilon = 1e-9);
    }
}
