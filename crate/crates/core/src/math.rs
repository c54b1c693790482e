//! Small numeric helpers shared by the rendering modules.

use nalgebra::{Matrix3, Vector3};

pub type Vec3 = Vector3<f64>;
pub type Mat3 = Matrix3<f64>;

/// Logistic activation, evaluated without overflow for large |x|.
#[inline]
pub fn sigmoid(x: f64) -> f64 {
    if x >= 0.0 {
        1.0 / (1.0 + (-x).exp())
    } else {
        let e = x.exp();
        e / (1.0 + e)
    }
}

/// Derivative of [`sigmoid`] expressed through its output.
#[inline]
pub fn sigmoid_grad_from_output(s: f64) -> f64 {
    s * (1.0 - s)
}

/// Inverse of [`sigmoid`]. Inputs are clamped into (0, 1) first.
#[inline]
pub fn logit(p: f64) -> f64 {
    let p = p.clamp(1e-12, 1.0 - 1e-12);
    (p / (1.0 - p)).ln()
}

#[inline]
pub fn vec3(v: [f32; 3]) -> Vec3 {
    Vec3::new(v[0] as f64, v[1] as f64, v[2] as f64)
}

#[inline]
pub fn is_unit(v: &Vec3, tol: f64) -> bool {
    v.iter().all(|c| c.is_finite()) && (v.norm() - 1.0).abs() <= tol
}

/// Rotation matrix of a unit quaternion stored as (w, x, y, z).
pub fn quat_to_mat(q: [f64; 4]) -> Mat3 {
    let [w, x, y, z] = q;
    Mat3::new(
        1.0 - 2.0 * (y * y + z * z),
        2.0 * (x * y - w * z),
        2.0 * (x * z + w * y),
        2.0 * (x * y + w * z),
        1.0 - 2.0 * (x * x + z * z),
        2.0 * (y * z - w * x),
        2.0 * (x * z - w * y),
        2.0 * (y * z + w * x),
        1.0 - 2.0 * (x * x + y * y),
    )
}

/// Partial derivatives of [`quat_to_mat`] with respect to (w, x, y, z).
pub fn quat_to_mat_partials(q: [f64; 4]) -> [Mat3; 4] {
    let [w, x, y, z] = q;
    let t = 2.0;
    [
        Mat3::new(0.0, -t * z, t * y, t * z, 0.0, -t * x, -t * y, t * x, 0.0),
        Mat3::new(
            0.0,
            t * y,
            t * z,
            t * y,
            -2.0 * t * x,
            -t * w,
            t * z,
            t * w,
            -2.0 * t * x,
        ),
        Mat3::new(
            -2.0 * t * y,
            t * x,
            t * w,
            t * x,
            0.0,
            t * z,
            -t * w,
            t * z,
            -2.0 * t * y,
        ),
        Mat3::new(
            -2.0 * t * z,
            -t * w,
            t * x,
            t * w,
            -2.0 * t * z,
            t * y,
            t * x,
            t * y,
            0.0,
        ),
    ]
}

/// Normalizes a quaternion; returns the unit quaternion and the input norm.
pub fn quat_normalize(q: [f64; 4]) -> ([f64; 4], f64) {
    let n = (q[0] * q[0] + q[1] * q[1] + q[2] * q[2] + q[3] * q[3]).sqrt();
    if n < 1e-30 {
        return ([1.0, 0.0, 0.0, 0.0], 1.0);
    }
    ([q[0] / n, q[1] / n, q[2] / n, q[3] / n], n)
}

/// Back-propagates a gradient on the unit quaternion to the raw quaternion.
pub fn quat_normalize_backward(unit: [f64; 4], norm: f64, grad_unit: [f64; 4]) -> [f64; 4] {
    let dot: f64 = (0..4).map(|i| unit[i] * grad_unit[i]).sum();
    let mut out = [0.0; 4];
    for i in 0..4 {
        out[i] = (grad_unit[i] - unit[i] * dot) / norm;
    }
    out
}

/// Van der Corput radical inverse in base 2.
#[inline]
pub fn radical_inverse(mut bits: u32) -> f64 {
    bits = bits.rotate_right(16);
    bits = ((bits & 0x5555_5555) << 1) | ((bits & 0xAAAA_AAAA) >> 1);
    bits = ((bits & 0x3333_3333) << 2) | ((bits & 0xCCCC_CCCC) >> 2);
    bits = ((bits & 0x0F0F_0F0F) << 4) | ((bits & 0xF0F0_F0F0) >> 4);
    bits = ((bits & 0x00FF_00FF) << 8) | ((bits & 0xFF00_FF00) >> 8);
    bits as f64 * (1.0 / 4_294_967_296.0)
}

/// Point `i` of an `n`-point Hammersley set on the unit square.
#[inline]
pub fn hammersley(i: u32, n: u32) -> (f64, f64) {
    ((i as f64 + 0.5) / n as f64, radical_inverse(i))
}

/// Gauss-Legendre nodes and weights on [-1, 1].
pub fn gauss_legendre(n: usize) -> (Vec<f64>, Vec<f64>) {
    let mut nodes = vec![0.0; n];
    let mut weights = vec![0.0; n];
    for i in 0..n.div_ceil(2) {
        let mut x = (std::f64::consts::PI * (i as f64 + 0.75) / (n as f64 + 0.5)).cos();
        let mut dp = 0.0;
        for _ in 0..100 {
            let (mut p0, mut p1) = (1.0, x);
            for k in 2..=n {
                let p2 = ((2 * k - 1) as f64 * x * p1 - (k - 1) as f64 * p0) / k as f64;
                p0 = p1;
                p1 = p2;
            }
            let pn = if n == 1 { x } else { p1 };
            let pn1 = if n == 1 { 1.0 } else { p0 };
            dp = n as f64 * (x * pn - pn1) / (x * x - 1.0);
            let dx = pn / dp;
            x -= dx;
            if dx.abs() < 1e-15 {
                break;
            }
        }
        nodes[i] = -x;
        nodes[n - 1 - i] = x;
        let w = 2.0 / ((1.0 - x * x) * dp * dp);
        weights[i] = w;
        weights[n - 1 - i] = w;
    }
    (nodes, weights)
}

/// Orthonormal tangent frame (t, b) around unit `n`.
pub fn tangent_frame(n: &Vec3) -> (Vec3, Vec3) {
    let up = if n.z.abs() < 0.999 {
        Vec3::new(0.0, 0.0, 1.0)
    } else {
        Vec3::new(1.0, 0.0, 0.0)
    };
    let t = up.cross(n).normalize();
    let b = n.cross(&t);
    (t, b)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn gauss_legendre_integrates_polynomials() {
        let (x, w) = gauss_legendre(6);
        let s: f64 = w.iter().sum();
        assert!((s - 2.0).abs() < 1e-13);
        let i10: f64 = x.iter().zip(&w).map(|(x, w)| w * x.powi(10)).sum();
        assert!((i10 - 2.0 / 11.0).abs() < 1e-13);
    }

    #[test]
    fn quaternion_partials_match_differences() {
        let q = [0.3, -0.5, 0.7, 0.2];
        let parts = quat_to_mat_partials(q);
        for c in 0..4 {
            let mut qp = q;
            let mut qm = q;
            qp[c] += 1e-6;
            qm[c] -= 1e-6;
            let fd = (quat_to_mat(qp) - quat_to_mat(qm)) / 2e-6;
            assert!((fd - parts[c]).abs().max() < 1e-8);
        }
    }

    #[test]
    fn sigmoid_is_stable_and_inverts() {
        assert_eq!(sigmoid(-1e4), 0.0);
        assert_eq!(sigmoid(1e4), 1.0);
        for p in [0.01, 0.3, 0.99] {
            assert!((sigmoid(logit(p)) - p).abs() < 1e-14);
        }
    }
}
