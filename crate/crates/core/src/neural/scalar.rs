//! Scalar types the score network can be evaluated over.
//!
//! Plain `f32`/`f64` give ordinary evaluation. [`Dual`] carries one
//! directional derivative and [`Jet2`] carries the first and second
//! directional derivatives (a truncated Taylor series). Weights are always
//! plain lanes, so affine layers split a batch into lanes and run one dense
//! matmul per lane.

use std::fmt::Debug;
use std::ops::{Add, AddAssign, Div, Mul, Neg, Sub};

use ndarray::{Array2, LinalgScalar, Zip};
use num_traits::{Float, FromPrimitive, Zero};

/// Field-like scalar that the network and oracle scores are generic over.
pub trait Real:
    Copy
    + Send
    + Sync
    + Debug
    + Add<Output = Self>
    + Sub<Output = Self>
    + Mul<Output = Self>
    + Div<Output = Self>
    + Neg<Output = Self>
    + AddAssign
    + 'static
{
    /// Underlying plain float of each lane.
    type Lane: LinalgScalar + Float + FromPrimitive + Send + Sync + Debug;

    /// Embeds a constant (all derivative lanes zero).
    fn lift(c: Self::Lane) -> Self;

    fn value(self) -> Self::Lane;

    fn scale(self, c: Self::Lane) -> Self;

    /// Applies a scalar function `g` given `g(v)`, `g'(v)` and `g''(v)` at
    /// `v = self.value()`.
    fn chain(self, g: Self::Lane, dg: Self::Lane, d2g: Self::Lane) -> Self;

    fn is_finite(self) -> bool;

    /// `x · wᵀ`
    fn matmul_t(x: &Array2<Self>, w: &Array2<Self::Lane>) -> Array2<Self>;

    /// `x · w`
    fn matmul(x: &Array2<Self>, w: &Array2<Self::Lane>) -> Array2<Self>;

    fn zero() -> Self {
        Self::lift(Self::Lane::zero())
    }

    fn from_f64(c: f64) -> Self {
        Self::lift(lane(c))
    }

    fn exp(self) -> Self {
        let e = self.value().exp();
        self.chain(e, e, e)
    }

    fn cos(self) -> Self {
        let v = self.value();
        self.chain(v.cos(), -v.sin(), -v.cos())
    }

    /// `(self)^(-1/2)`
    fn rsqrt(self) -> Self {
        let r = self.value().sqrt().recip();
        let r3 = r * r * r;
        self.chain(r, lane::<Self::Lane>(-0.5) * r3, lane::<Self::Lane>(0.75) * r3 * r * r)
    }
}

/// Converts an `f64` constant into a lane float.
#[inline]
pub fn lane<L: FromPrimitive>(c: f64) -> L {
    L::from_f64(c).expect("f64 converts to every lane type")
}

macro_rules! impl_plain {
    ($t:ty) => {
        impl Real for $t {
            type Lane = $t;

            #[inline]
            fn lift(c: $t) -> Self {
                c
            }
            #[inline]
            fn value(self) -> $t {
                self
            }
            #[inline]
            fn scale(self, c: $t) -> Self {
                self * c
            }
            #[inline]
            fn chain(self, g: $t, _dg: $t, _d2g: $t) -> Self {
                g
            }
            #[inline]
            fn is_finite(self) -> bool {
                <$t>::is_finite(self)
            }
            fn matmul_t(x: &Array2<Self>, w: &Array2<$t>) -> Array2<Self> {
                x.dot(&w.t())
            }
            fn matmul(x: &Array2<Self>, w: &Array2<$t>) -> Array2<Self> {
                x.dot(w)
            }
        }
    };
}
impl_plain!(f32);
impl_plain!(f64);

/// Value plus one tangent.
#[derive(Clone, Copy, Debug, Default, PartialEq)]
pub struct Dual {
    pub v: f64,
    pub t: f64,
}

impl Dual {
    pub fn new(v: f64, t: f64) -> Self {
        Dual { v, t }
    }
}

impl Add for Dual {
    type Output = Self;
    #[inline]
    fn add(self, o: Self) -> Self {
        Dual::new(self.v + o.v, self.t + o.t)
    }
}
impl AddAssign for Dual {
    #[inline]
    fn add_assign(&mut self, o: Self) {
        *self = *self + o;
    }
}
impl Sub for Dual {
    type Output = Self;
    #[inline]
    fn sub(self, o: Self) -> Self {
        Dual::new(self.v - o.v, self.t - o.t)
    }
}
impl Mul for Dual {
    type Output = Self;
    #[inline]
    fn mul(self, o: Self) -> Self {
        Dual::new(self.v * o.v, self.t * o.v + self.v * o.t)
    }
}
impl Div for Dual {
    type Output = Self;
    #[inline]
    fn div(self, o: Self) -> Self {
        let q = self.v / o.v;
        Dual::new(q, (self.t - q * o.t) / o.v)
    }
}
impl Neg for Dual {
    type Output = Self;
    #[inline]
    fn neg(self) -> Self {
        Dual::new(-self.v, -self.t)
    }
}

/// Value, first and second derivative along one direction.
#[derive(Clone, Copy, Debug, Default, PartialEq)]
pub struct Jet2 {
    pub v: f64,
    pub d1: f64,
    pub d2: f64,
}

impl Jet2 {
    pub fn new(v: f64, d1: f64, d2: f64) -> Self {
        Jet2 { v, d1, d2 }
    }
}

impl Add for Jet2 {
    type Output = Self;
    #[inline]
    fn add(self, o: Self) -> Self {
        Jet2::new(self.v + o.v, self.d1 + o.d1, self.d2 + o.d2)
    }
}
impl AddAssign for Jet2 {
    #[inline]
    fn add_assign(&mut self, o: Self) {
        *self = *self + o;
    }
}
impl Sub for Jet2 {
    type Output = Self;
    #[inline]
    fn sub(self, o: Self) -> Self {
        Jet2::new(self.v - o.v, self.d1 - o.d1, self.d2 - o.d2)
    }
}
impl Mul for Jet2 {
    type Output = Self;
    #[inline]
    fn mul(self, o: Self) -> Self {
        Jet2::new(
            self.v * o.v,
            self.d1 * o.v + self.v * o.d1,
            self.d2 * o.v + 2.0 * self.d1 * o.d1 + self.v * o.d2,
        )
    }
}
impl Div for Jet2 {
    type Output = Self;
    #[inline]
    fn div(self, o: Self) -> Self {
        let inv = o.v.recip();
        let recip = Jet2::new(inv, -o.d1 * inv * inv, 2.0 * o.d1 * o.d1 * inv * inv * inv - o.d2 * inv * inv);
        self * recip
    }
}
impl Neg for Jet2 {
    type Output = Self;
    #[inline]
    fn neg(self) -> Self {
        Jet2::new(-self.v, -self.d1, -self.d2)
    }
}

fn lanes_matmul<S, const L: usize>(
    x: &Array2<S>,
    w: &Array2<f64>,
    transpose: bool,
    get: impl Fn(&S, usize) -> f64,
    build: impl Fn([f64; L]) -> S,
) -> Array2<S>
where
    S: Copy,
{
    let parts: Vec<Array2<f64>> = (0..L)
        .map(|p| {
            let xp = x.map(|s| get(s, p));
            if transpose {
                xp.dot(&w.t())
            } else {
                xp.dot(w)
            }
        })
        .collect();
    let mut out = Array2::from_elem(parts[0].raw_dim(), build([0.0; L]));
    let mut lanes = [0.0; L];
    for ((i, j), o) in out.indexed_iter_mut() {
        for (p, part) in parts.iter().enumerate() {
            lanes[p] = part[[i, j]];
        }
        *o = build(lanes);
    }
    out
}

impl Real for Dual {
    type Lane = f64;

    fn lift(c: f64) -> Self {
        Dual::new(c, 0.0)
    }
    fn value(self) -> f64 {
        self.v
    }
    fn scale(self, c: f64) -> Self {
        Dual::new(self.v * c, self.t * c)
    }
    fn chain(self, g: f64, dg: f64, _d2g: f64) -> Self {
        Dual::new(g, dg * self.t)
    }
    fn is_finite(self) -> bool {
        self.v.is_finite() && self.t.is_finite()
    }
    fn matmul_t(x: &Array2<Self>, w: &Array2<f64>) -> Array2<Self> {
        lanes_matmul::<_, 2>(x, w, true, dual_lane, |l| Dual::new(l[0], l[1]))
    }
    fn matmul(x: &Array2<Self>, w: &Array2<f64>) -> Array2<Self> {
        lanes_matmul::<_, 2>(x, w, false, dual_lane, |l| Dual::new(l[0], l[1]))
    }
}

fn dual_lane(s: &Dual, p: usize) -> f64 {
    if p == 0 {
        s.v
    } else {
        s.t
    }
}

fn jet_lane(s: &Jet2, p: usize) -> f64 {
    match p {
        0 => s.v,
        1 => s.d1,
        _ => s.d2,
    }
}

impl Real for Jet2 {
    type Lane = f64;

    fn lift(c: f64) -> Self {
        Jet2::new(c, 0.0, 0.0)
    }
    fn value(self) -> f64 {
        self.v
    }
    fn scale(self, c: f64) -> Self {
        Jet2::new(self.v * c, self.d1 * c, self.d2 * c)
    }
    fn chain(self, g: f64, dg: f64, d2g: f64) -> Self {
        Jet2::new(g, dg * self.d1, d2g * self.d1 * self.d1 + dg * self.d2)
    }
    fn is_finite(self) -> bool {
        self.v.is_finite() && self.d1.is_finite() && self.d2.is_finite()
    }
    fn matmul_t(x: &Array2<Self>, w: &Array2<f64>) -> Array2<Self> {
        lanes_matmul::<_, 3>(x, w, true, jet_lane, |l| Jet2::new(l[0], l[1], l[2]))
    }
    fn matmul(x: &Array2<Self>, w: &Array2<f64>) -> Array2<Self> {
        lanes_matmul::<_, 3>(x, w, false, jet_lane, |l| Jet2::new(l[0], l[1], l[2]))
    }
}

/// Adds `b` (broadcast over rows) to the value lane of `y`.
pub(crate) fn add_bias<S: Real>(y: &mut Array2<S>, b: &ndarray::Array1<S::Lane>) {
    Zip::from(y.rows_mut()).for_each(|mut row| {
        for (v, &bb) in row.iter_mut().zip(b.iter()) {
            *v += S::lift(bb);
        }
    });
}

#[cfg(test)]
mod tests {
    use super::*;

    fn f<S: Real>(x: S) -> S {
        // x·exp(x) / (1 + x²)^(1/2) exercised through every primitive
        let one = S::from_f64(1.0);
        x * x.exp() * (one + x * x).rsqrt() + x.cos()
    }

    fn f_plain(x: f64) -> f64 {
        x * x.exp() / (1.0 + x * x).sqrt() + x.cos()
    }

    #[test]
    fn jet_matches_finite_differences() {
        for &x in &[-1.3, -0.2, 0.4, 1.7] {
            let j = f(Jet2::new(x, 1.0, 0.0));
            let h = 1e-4;
            let d1 = (f_plain(x + h) - f_plain(x - h)) / (2.0 * h);
            let d2 = (f_plain(x + h) - 2.0 * f_plain(x) + f_plain(x - h)) / (h * h);
            assert!((j.v - f_plain(x)).abs() < 1e-14);
            assert!((j.d1 - d1).abs() < 1e-7, "{} vs {}", j.d1, d1);
            assert!((j.d2 - d2).abs() < 1e-5, "{} vs {}", j.d2, d2);
            let dual = f(Dual::new(x, 1.0));
            assert!((dual.t - j.d1).abs() < 1e-12);
        }
    }

    #[test]
    fn jet_division_second_derivative() {
        // 1/x has second derivative 2/x³
        let x = 0.7;
        let r = Jet2::lift(1.0) / Jet2::new(x, 1.0, 0.0);
        assert!((r.d1 + 1.0 / (x * x)).abs() < 1e-12);
        assert!((r.d2 - 2.0 / (x * x * x)).abs() < 1e-12);
    }

    #[test]
    fn lane_matmul_is_lanewise() {
        let x = Array2::from_shape_fn((3, 4), |(i, j)| Jet2::new(i as f64, j as f64, 1.0));
        let w = Array2::from_shape_fn((2, 4), |(i, j)| (i + 2 * j) as f64 * 0.1);
        let y = Jet2::matmul_t(&x, &w);
        let yv = x.map(|s| s.v).dot(&w.t());
        let y1 = x.map(|s| s.d1).dot(&w.t());
        for ((i, j), s) in y.indexed_iter() {
            assert_eq!(s.v, yv[[i, j]]);
            assert_eq!(s.d1, y1[[i, j]]);
        }
    }
}
