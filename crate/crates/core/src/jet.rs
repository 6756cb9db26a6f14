//! Second-order forward-mode AD: value, gradient, and Hessian in up to three
//! variables. Manufactured right-hand sides need exact second derivatives of
//! the prescribed solution fields (−∇·ε(u) involves cross second derivatives);
//! propagating jets through the closed-form expressions avoids hand
//! differentiation errors and finite-difference noise.

use std::ops::{Add, Mul, Neg, Sub};

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Jet {
    pub v: f64,
    pub g: [f64; 3],
    pub h: [[f64; 3]; 3],
}

impl Jet {
    pub fn constant(v: f64) -> Self {
        Jet { v, g: [0.0; 3], h: [[0.0; 3]; 3] }
    }

    /// Seeds coordinate variable `i` with value `x`.
    pub fn var(i: usize, x: f64) -> Self {
        let mut g = [0.0; 3];
        g[i] = 1.0;
        Jet { v: x, g, h: [[0.0; 3]; 3] }
    }

    /// Seeds all `dim` coordinates of a point.
    pub fn seed(x: &[f64]) -> [Jet; 3] {
        let mut out = [Jet::constant(0.0); 3];
        for (i, &xi) in x.iter().enumerate() {
            out[i] = Jet::var(i, xi);
        }
        out
    }

    fn chain(self, f: f64, df: f64, ddf: f64) -> Self {
        let mut h = [[0.0; 3]; 3];
        for a in 0..3 {
            for b in 0..3 {
                h[a][b] = df * self.h[a][b] + ddf * self.g[a] * self.g[b];
            }
        }
        let mut g = [0.0; 3];
        for a in 0..3 {
            g[a] = df * self.g[a];
        }
        Jet { v: f, g, h }
    }

    pub fn sin(self) -> Self {
        let (s, c) = self.v.sin_cos();
        self.chain(s, c, -s)
    }

    pub fn cos(self) -> Self {
        let (s, c) = self.v.sin_cos();
        self.chain(c, -s, -c)
    }

    pub fn exp(self) -> Self {
        let e = self.v.exp();
        self.chain(e, e, e)
    }

    pub fn powi(self, n: i32) -> Self {
        let f = self.v.powi(n);
        let df = n as f64 * self.v.powi(n - 1);
        let ddf = (n * (n - 1)) as f64 * self.v.powi(n - 2);
        self.chain(f, df, ddf)
    }

    pub fn scale(self, s: f64) -> Self {
        self.chain(s * self.v, s, 0.0)
    }

    pub fn laplacian(&self, dim: usize) -> f64 {
        (0..dim).map(|d| self.h[d][d]).sum()
    }
}

impl Add for Jet {
    type Output = Jet;
    fn add(self, rhs: Jet) -> Jet {
        let mut out = self;
        out.v += rhs.v;
        for a in 0..3 {
            out.g[a] += rhs.g[a];
            for b in 0..3 {
                out.h[a][b] += rhs.h[a][b];
            }
        }
        out
    }
}

impl Sub for Jet {
    type Output = Jet;
    fn sub(self, rhs: Jet) -> Jet {
        self + (-rhs)
    }
}

impl Neg for Jet {
    type Output = Jet;
    fn neg(self) -> Jet {
        self.scale(-1.0)
    }
}

impl Mul for Jet {
    type Output = Jet;
    fn mul(self, rhs: Jet) -> Jet {
        let mut h = [[0.0; 3]; 3];
        for a in 0..3 {
            for b in 0..3 {
                h[a][b] = self.v * rhs.h[a][b]
                    + rhs.v * self.h[a][b]
                    + self.g[a] * rhs.g[b]
                    + rhs.g[a] * self.g[b];
            }
        }
        let mut g = [0.0; 3];
        for a in 0..3 {
            g[a] = self.v * rhs.g[a] + rhs.v * self.g[a];
        }
        Jet { v: self.v * rhs.v, g, h }
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    const PI: f64 = std::f64::consts::PI;

    #[test]
    fn product_of_sines_hand_derivatives() {
        // f = sin(πx) sin(πy): all derivatives in closed form.
        let f = |x: f64, y: f64| {
            let s = Jet::seed(&[x, y]);
            s[0].scale(PI).sin() * s[1].scale(PI).sin()
        };
        let (x, y) = (0.3, 0.7);
        let j = f(x, y);
        let (sx, cx) = (PI * x).sin_cos();
        let (sy, cy) = (PI * y).sin_cos();
        assert!((j.v - sx * sy).abs() < 1e-15);
        assert!((j.g[0] - PI * cx * sy).abs() < 1e-14);
        assert!((j.g[1] - PI * sx * cy).abs() < 1e-14);
        assert!((j.h[0][0] + PI * PI * sx * sy).abs() < 1e-13);
        assert!((j.h[0][1] - PI * PI * cx * cy).abs() < 1e-13);
        assert!((j.h[1][1] + PI * PI * sx * sy).abs() < 1e-13);
        assert!((j.laplacian(2) + 2.0 * PI * PI * sx * sy).abs() < 1e-13);
    }

    #[test]
    fn polynomial_jet() {
        // f = x² + 2xy − y³
        let f = |x: f64, y: f64| {
            let s = Jet::seed(&[x, y]);
            s[0].powi(2) + s[0].scale(2.0) * s[1] - s[1].powi(3)
        };
        let j = f(1.5, -0.5);
        assert!((j.v - (2.25 - 1.5 + 0.125)).abs() < 1e-14);
        assert!((j.g[0] - (3.0 - 1.0)).abs() < 1e-14);
        assert!((j.g[1] - (3.0 - 0.75)).abs() < 1e-14);
        assert!((j.h[0][0] - 2.0).abs() < 1e-14);
        assert!((j.h[0][1] - 2.0).abs() < 1e-14);
        assert!((j.h[1][1] - 3.0).abs() < 1e-14);
    }

    proptest! {
        // Hessian symmetry and gradient consistency against central
        // differences for a trig-polynomial composite.
        #[test]
        fn jet_matches_finite_differences(x in -1.0f64..1.0, y in -1.0f64..1.0, z in -1.0f64..1.0) {
            let f = |p: &[f64]| {
                let s = Jet::seed(p);
                (s[0].scale(PI).sin() * s[1].scale(2.0).cos() + s[2].powi(2) * s[0]).exp()
                    .scale(0.1)
            };
            let p = [x, y, z];
            let j = f(&p);
            for a in 0..3 {
                for b in 0..3 {
                    prop_assert!((j.h[a][b] - j.h[b][a]).abs() < 1e-12);
                }
                let h = 1e-5;
                let mut pp = p; pp[a] += h;
                let mut pm = p; pm[a] -= h;
                let fd = (f(&pp).v - f(&pm).v) / (2.0 * h);
                prop_assert!((j.g[a] - fd).abs() < 1e-6 * (1.0 + j.g[a].abs()));
                let fd2 = (f(&pp).g[b_of(a)] - f(&pm).g[b_of(a)]) / (2.0 * h);
                prop_assert!((j.h[a][b_of(a)] - fd2).abs() < 1e-5 * (1.0 + j.h[a][b_of(a)].abs()));
            }
        }
    }

    fn b_of(a: usize) -> usize {
        (a + 1) % 3
    }
}
