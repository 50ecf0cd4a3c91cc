//! Small numerical building blocks: adaptive Simpson quadrature, a
//! uniform-knot cubic Hermite spline (Catmull–Rom slopes), and the relative
//! L² error metric.

/// Relative L² error ‖pred − reference‖₂ / ‖reference‖₂; falls back to the
/// absolute norm when the reference is identically zero.
pub fn relative_l2(pred: &[f64], reference: &[f64]) -> f64 {
    assert_eq!(pred.len(), reference.len());
    let num = pred
        .iter()
        .zip(reference)
        .map(|(p, r)| (p - r) * (p - r))
        .sum::<f64>()
        .sqrt();
    let den = reference.iter().map(|r| r * r).sum::<f64>().sqrt();
    if den == 0.0 {
        num
    } else {
        num / den
    }
}

/// Adaptive Simpson quadrature of `f` over `[a, b]` with absolute tolerance
/// `tol`. Classic bisection with Richardson acceptance (15·tol rule) and a
/// depth cap; returns `None` only if the cap is hit before convergence.
pub fn adaptive_simpson<F: Fn(f64) -> f64>(f: &F, a: f64, b: f64, tol: f64) -> Option<f64> {
    fn simpson<F: Fn(f64) -> f64>(f: &F, a: f64, fa: f64, b: f64, fb: f64) -> (f64, f64, f64) {
        let m = 0.5 * (a + b);
        let fm = f(m);
        ((b - a) / 6.0 * (fa + 4.0 * fm + fb), m, fm)
    }
    #[allow(clippy::too_many_arguments)]
    fn rec<F: Fn(f64) -> f64>(
        f: &F,
        a: f64,
        fa: f64,
        b: f64,
        fb: f64,
        whole: f64,
        m: f64,
        fm: f64,
        tol: f64,
        depth: u32,
    ) -> Option<f64> {
        let (left, lm, flm) = simpson(f, a, fa, m, fm);
        let (right, rm, frm) = simpson(f, m, fm, b, fb);
        let delta = left + right - whole;
        if delta.abs() <= 15.0 * tol {
            return Some(left + right + delta / 15.0);
        }
        if depth == 0 {
            return None;
        }
        let l = rec(f, a, fa, m, fm, left, lm, flm, 0.5 * tol, depth - 1)?;
        let r = rec(f, m, fm, b, fb, right, rm, frm, 0.5 * tol, depth - 1)?;
        Some(l + r)
    }
    let (fa, fb) = (f(a), f(b));
    let (whole, m, fm) = simpson(f, a, fa, b, fb);
    rec(f, a, fa, b, fb, whole, m, fm, tol, 48)
}

/// Cubic Hermite interpolant on a uniform knot grid, slopes by central
/// differences (Catmull–Rom; one-sided at the ends). Reproduces knot values
/// exactly and is C¹.
#[derive(Clone, Debug, serde::Serialize, serde::Deserialize)]
pub struct HermiteSpline {
    pub x0: f64,
    pub h: f64,
    pub y: Vec<f64>,
    pub m: Vec<f64>,
}

impl HermiteSpline {
    pub fn from_knots(x0: f64, h: f64, y: Vec<f64>) -> Self {
        assert!(y.len() >= 2 && h > 0.0);
        let n = y.len();
        let mut m = vec![0.0; n];
        if n == 2 {
            m[0] = (y[1] - y[0]) / h;
            m[1] = m[0];
        } else {
            // second-order one-sided ends, central interior
            m[0] = (-3.0 * y[0] + 4.0 * y[1] - y[2]) / (2.0 * h);
            m[n - 1] = (3.0 * y[n - 1] - 4.0 * y[n - 2] + y[n - 3]) / (2.0 * h);
            for k in 1..n - 1 {
                m[k] = (y[k + 1] - y[k - 1]) / (2.0 * h);
            }
        }
        HermiteSpline { x0, h, y, m }
    }

    /// If x is bit-exactly a knot position, its index.
    fn knot_index(&self, x: f64) -> Option<usize> {
        let r = ((x - self.x0) / self.h).round();
        if r >= 0.0 && r < self.y.len() as f64 && self.x0 + self.h * r == x {
            Some(r as usize)
        } else {
            None
        }
    }

    pub fn x_max(&self) -> f64 {
        self.x0 + self.h * (self.y.len() - 1) as f64
    }

    /// Interval index for x, clamped to valid segments.
    pub fn segment(&self, x: f64) -> usize {
        let k = ((x - self.x0) / self.h).floor() as isize;
        k.clamp(0, self.y.len() as isize - 2) as usize
    }

    /// Hermite coefficients of segment k: value = h00·y_k + h10·h·m_k +
    /// h01·y_{k+1} + h11·h·m_{k+1} with t = (x − x_k)/h.
    pub fn segment_data(&self, k: usize) -> (f64, f64, f64, f64, f64) {
        (
            self.x0 + self.h * k as f64,
            self.y[k],
            self.m[k],
            self.y[k + 1],
            self.m[k + 1],
        )
    }

    pub fn eval(&self, x: f64) -> f64 {
        if let Some(k) = self.knot_index(x) {
            return self.y[k];
        }
        let k = self.segment(x);
        let (xk, yk, mk, yk1, mk1) = self.segment_data(k);
        let t = (x - xk) / self.h;
        let t2 = t * t;
        let t3 = t2 * t;
        let h00 = 2.0 * t3 - 3.0 * t2 + 1.0;
        let h10 = t3 - 2.0 * t2 + t;
        let h01 = -2.0 * t3 + 3.0 * t2;
        let h11 = t3 - t2;
        h00 * yk + h10 * self.h * mk + h01 * yk1 + h11 * self.h * mk1
    }

    pub fn deriv(&self, x: f64) -> f64 {
        if let Some(k) = self.knot_index(x) {
            return self.m[k];
        }
        let k = self.segment(x);
        let (xk, yk, mk, yk1, mk1) = self.segment_data(k);
        let t = (x - xk) / self.h;
        let t2 = t * t;
        let d00 = (6.0 * t2 - 6.0 * t) / self.h;
        let d10 = 3.0 * t2 - 4.0 * t + 1.0;
        let d01 = (-6.0 * t2 + 6.0 * t) / self.h;
        let d11 = 3.0 * t2 - 2.0 * t;
        d00 * yk + d10 * mk + d01 * yk1 + d11 * mk1
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn relative_l2_known_values() {
        // ‖(1,1)‖/‖(3,4)‖ = √2/5
        let v = relative_l2(&[4.0, 5.0], &[3.0, 4.0]);
        assert!((v - std::f64::consts::SQRT_2 / 5.0).abs() < 1e-15);
        assert_eq!(relative_l2(&[1.0, 2.0], &[1.0, 2.0]), 0.0);
        // zero reference → absolute norm
        assert_eq!(relative_l2(&[3.0, 4.0], &[0.0, 0.0]), 5.0);
    }

    #[test]
    fn simpson_is_exact_on_cubics() {
        let v = adaptive_simpson(&|x: f64| x * x * x - 2.0 * x + 1.0, 0.0, 2.0, 1e-12).unwrap();
        // ∫₀² x³−2x+1 dx = 4 − 4 + 2 = 2
        assert!((v - 2.0).abs() < 1e-12);
    }

    #[test]
    fn simpson_gaussian_integral() {
        let v = adaptive_simpson(&|x: f64| (-0.5 * x * x).exp(), -12.0, 12.0, 1e-12).unwrap();
        assert!(
            (v - (2.0 * std::f64::consts::PI).sqrt()).abs() < 1e-10,
            "{v}"
        );
    }

    #[test]
    fn simpson_exp() {
        let v = adaptive_simpson(&|x: f64| x.exp(), 0.0, 1.0, 1e-12).unwrap();
        assert!((v - (std::f64::consts::E - 1.0)).abs() < 1e-12);
    }

    #[test]
    fn spline_reproduces_knots_exactly() {
        let y: Vec<f64> = (0..11).map(|k| ((k as f64) * 0.3).sin()).collect();
        let s = HermiteSpline::from_knots(0.0, 0.3, y.clone());
        for (k, &yk) in y.iter().enumerate() {
            assert_eq!(s.eval(0.3 * k as f64), yk);
        }
    }

    #[test]
    fn spline_approximates_smooth_function() {
        let h = 0.01;
        let n = 301;
        let y: Vec<f64> = (0..n).map(|k| (h * k as f64).sin()).collect();
        let s = HermiteSpline::from_knots(0.0, h, y);
        let mut worst = 0.0f64;
        let mut worst_d = 0.0f64;
        for i in 0..3000 {
            let x = 0.0005 + i as f64 * 0.001;
            worst = worst.max((s.eval(x) - x.sin()).abs());
            worst_d = worst_d.max((s.deriv(x) - x.cos()).abs());
        }
        assert!(worst < 1e-6, "value err {worst}");
        assert!(worst_d < 1e-4, "deriv err {worst_d}");
    }
}
