//! Minimal scalar automatic differentiation.
//!
//! [`Var`] records operations on a [`Tape`] for reverse mode; [`Dual3`]
//! carries a value and three tangents for forward mode. They nest, so
//! `Dual3<Var>` differentiates a Jacobian in reverse mode. Code written
//! against [`Scalar`] runs unchanged on `f64`, `Var`, `Dual3<f64>` and
//! `Dual3<Var>`.

use std::cell::RefCell;
use std::ops::{Add, Div, Mul, Neg, Sub};

pub trait Scalar: Copy + Add<Output = Self> + Sub<Output = Self> + Mul<Output = Self> + Div<Output = Self> + Neg<Output = Self> {
    /// A constant living in the same context (tape) as `self`.
    fn lift(&self, v: f64) -> Self;
    fn value(&self) -> f64;
    fn sin(self) -> Self;
    fn cos(self) -> Self;
    fn sqrt(self) -> Self;

    fn scale(self, k: f64) -> Self {
        self * self.lift(k)
    }
}

impl Scalar for f64 {
    fn lift(&self, v: f64) -> Self {
        v
    }
    fn value(&self) -> f64 {
        *self
    }
    fn sin(self) -> Self {
        f64::sin(self)
    }
    fn cos(self) -> Self {
        f64::cos(self)
    }
    fn sqrt(self) -> Self {
        f64::sqrt(self)
    }
}

#[derive(Clone, Copy, Debug)]
struct Node {
    parents: [(u32, f64); 2],
}

/// Linear record of elementary operations.
#[derive(Debug, Default)]
pub struct Tape {
    nodes: RefCell<Vec<Node>>,
}

const NO_PARENT: u32 = u32::MAX;

impl Tape {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn len(&self) -> usize {
        self.nodes.borrow().len()
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    /// Drop all nodes but keep the allocation.
    pub fn clear(&self) {
        self.nodes.borrow_mut().clear();
    }

    pub fn var(&self, value: f64) -> Var<'_> {
        self.push(value, [(NO_PARENT, 0.0); 2])
    }

    fn push(&self, value: f64, parents: [(u32, f64); 2]) -> Var<'_> {
        let mut nodes = self.nodes.borrow_mut();
        nodes.push(Node { parents });
        Var {
            tape: self,
            idx: (nodes.len() - 1) as u32,
            val: value,
        }
    }

    /// Reverse sweep from seeded outputs; returns the adjoint of every node.
    pub fn gradient(&self, seeds: &[(Var<'_>, f64)]) -> Vec<f64> {
        let nodes = self.nodes.borrow();
        let mut adj = vec![0.0; nodes.len()];
        for (v, s) in seeds {
            adj[v.idx as usize] += s;
        }
        for i in (0..nodes.len()).rev() {
            let a = adj[i];
            if a == 0.0 {
                continue;
            }
            for &(p, d) in &nodes[i].parents {
                if p != NO_PARENT {
                    adj[p as usize] += a * d;
                }
            }
        }
        adj
    }
}

/// Reverse-mode scalar recorded on a [`Tape`].
#[derive(Clone, Copy, Debug)]
pub struct Var<'t> {
    tape: &'t Tape,
    idx: u32,
    val: f64,
}

impl<'t> Var<'t> {
    pub fn index(&self) -> usize {
        self.idx as usize
    }

    fn unary(self, value: f64, d: f64) -> Self {
        self.tape.push(value, [(self.idx, d), (NO_PARENT, 0.0)])
    }

    fn binary(self, other: Self, value: f64, da: f64, db: f64) -> Self {
        self.tape.push(value, [(self.idx, da), (other.idx, db)])
    }
}

impl<'t> Add for Var<'t> {
    type Output = Self;
    fn add(self, o: Self) -> Self {
        self.binary(o, self.val + o.val, 1.0, 1.0)
    }
}

impl<'t> Sub for Var<'t> {
    type Output = Self;
    fn sub(self, o: Self) -> Self {
        self.binary(o, self.val - o.val, 1.0, -1.0)
    }
}

impl<'t> Mul for Var<'t> {
    type Output = Self;
    fn mul(self, o: Self) -> Self {
        self.binary(o, self.val * o.val, o.val, self.val)
    }
}

impl<'t> Div for Var<'t> {
    type Output = Self;
    fn div(self, o: Self) -> Self {
        let q = self.val / o.val;
        self.binary(o, q, 1.0 / o.val, -q / o.val)
    }
}

impl<'t> Neg for Var<'t> {
    type Output = Self;
    fn neg(self) -> Self {
        self.unary(-self.val, -1.0)
    }
}

impl<'t> Scalar for Var<'t> {
    fn lift(&self, v: f64) -> Self {
        self.tape.var(v)
    }
    fn value(&self) -> f64 {
        self.val
    }
    fn sin(self) -> Self {
        self.unary(self.val.sin(), self.val.cos())
    }
    fn cos(self) -> Self {
        self.unary(self.val.cos(), -self.val.sin())
    }
    fn sqrt(self) -> Self {
        let s = self.val.sqrt();
        self.unary(s, 0.5 / s)
    }
    fn scale(self, k: f64) -> Self {
        self.unary(self.val * k, k)
    }
}

/// Forward-mode number with three tangent directions.
#[derive(Clone, Copy, Debug)]
pub struct Dual3<S> {
    pub v: S,
    pub t: [S; 3],
}

impl<S: Scalar> Dual3<S> {
    pub fn new(v: S, t: [S; 3]) -> Self {
        Self { v, t }
    }

    pub fn constant(v: S) -> Self {
        let z = v.lift(0.0);
        Self { v, t: [z; 3] }
    }

    fn chain(self, v: S, d: S) -> Self {
        Self {
            v,
            t: self.t.map(|t| t * d),
        }
    }
}

impl<S: Scalar> Add for Dual3<S> {
    type Output = Self;
    fn add(self, o: Self) -> Self {
        Self {
            v: self.v + o.v,
            t: [self.t[0] + o.t[0], self.t[1] + o.t[1], self.t[2] + o.t[2]],
        }
    }
}

impl<S: Scalar> Sub for Dual3<S> {
    type Output = Self;
    fn sub(self, o: Self) -> Self {
        Self {
            v: self.v - o.v,
            t: [self.t[0] - o.t[0], self.t[1] - o.t[1], self.t[2] - o.t[2]],
        }
    }
}

impl<S: Scalar> Mul for Dual3<S> {
    type Output = Self;
    fn mul(self, o: Self) -> Self {
        let t = [0, 1, 2].map(|k| self.t[k] * o.v + self.v * o.t[k]);
        Self { v: self.v * o.v, t }
    }
}

impl<S: Scalar> Div for Dual3<S> {
    type Output = Self;
    fn div(self, o: Self) -> Self {
        let q = self.v / o.v;
        let t = [0, 1, 2].map(|k| (self.t[k] - q * o.t[k]) / o.v);
        Self { v: q, t }
    }
}

impl<S: Scalar> Neg for Dual3<S> {
    type Output = Self;
    fn neg(self) -> Self {
        Self {
            v: -self.v,
            t: self.t.map(|t| -t),
        }
    }
}

impl<S: Scalar> Scalar for Dual3<S> {
    fn lift(&self, v: f64) -> Self {
        Self::constant(self.v.lift(v))
    }
    fn value(&self) -> f64 {
        self.v.value()
    }
    fn sin(self) -> Self {
        let (s, c) = (self.v.sin(), self.v.cos());
        self.chain(s, c)
    }
    fn cos(self) -> Self {
        let (c, s) = (self.v.cos(), self.v.sin());
        self.chain(c, -s)
    }
    fn sqrt(self) -> Self {
        let r = self.v.sqrt();
        let d = r.lift(0.5) / r;
        self.chain(r, d)
    }
    fn scale(self, k: f64) -> Self {
        Self {
            v: self.v.scale(k),
            t: self.t.map(|t| t.scale(k)),
        }
    }
}

/// Rotation matrix (row-major) of the unit quaternion `exp((0, r))`.
///
/// The rotation angle is `2‖r‖`. Near zero the sine and cosine are replaced
/// by their Taylor series in `‖r‖²`, which keeps derivatives finite.
pub fn quat_exp_matrix<S: Scalar>(r: [S; 3]) -> [[S; 3]; 3] {
    let th2 = r[0] * r[0] + r[1] * r[1] + r[2] * r[2];
    let one = th2.lift(1.0);
    let (w, s) = if th2.value() < 1e-12 {
        let th4 = th2 * th2;
        (one - th2.scale(0.5) + th4.scale(1.0 / 24.0), one - th2.scale(1.0 / 6.0) + th4.scale(1.0 / 120.0))
    } else {
        let th = th2.sqrt();
        (th.cos(), th.sin() / th)
    };
    let (x, y, z) = (s * r[0], s * r[1], s * r[2]);
    let two = |a: S| a.scale(2.0);
    [
        [one - two(y * y + z * z), two(x * y - w * z), two(x * z + w * y)],
        [two(x * y + w * z), one - two(x * x + z * z), two(y * z - w * x)],
        [two(x * z - w * y), two(y * z + w * x), one - two(x * x + y * y)],
    ]
}

/// Rigid warp `q' = R(q + c) − c + t` with `R = exp(r)`.
pub fn rigid_warp<S: Scalar>(r: [S; 3], c: [S; 3], t: [S; 3], q: [S; 3]) -> [S; 3] {
    let rot = quat_exp_matrix(r);
    let p = [q[0] + c[0], q[1] + c[1], q[2] + c[2]];
    [0, 1, 2].map(|i| rot[i][0] * p[0] + rot[i][1] * p[1] + rot[i][2] * p[2] - c[i] + t[i])
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn tape_gradient_of_product_and_quotient() {
        let tape = Tape::new();
        let x = tape.var(3.0);
        let y = tape.var(2.0);
        let f = x * y + x / y - x.sin();
        let adj = tape.gradient(&[(f, 1.0)]);
        assert!((adj[x.index()] - (2.0 + 0.5 - 3f64.cos())).abs() < 1e-14);
        assert!((adj[y.index()] - (3.0 - 3.0 / 4.0)).abs() < 1e-14);
    }

    #[test]
    fn dual_tangents_are_partials() {
        let x = Dual3::new(0.7, [1.0, 0.0, 0.0]);
        let y = Dual3::new(-1.3, [0.0, 1.0, 0.0]);
        let f = (x * y).sin() + (x * x + y * y).sqrt();
        let r = (0.7f64 * 0.7 + 1.3 * 1.3).sqrt();
        let dfdx = (0.7f64 * -1.3).cos() * -1.3 + 0.7 / r;
        let dfdy = (0.7f64 * -1.3).cos() * 0.7 - 1.3 / r;
        assert!((f.t[0] - dfdx).abs() < 1e-14);
        assert!((f.t[1] - dfdy).abs() < 1e-14);
        assert_eq!(f.t[2], 0.0);
    }

    #[test]
    fn nested_dual_on_tape_gives_mixed_second_derivative() {
        // f(x) = x³; the tangent is 3x², whose derivative is 6x
        let tape = Tape::new();
        let x = tape.var(1.5);
        let xd = Dual3::new(x, [x.lift(1.0), x.lift(0.0), x.lift(0.0)]);
        let f = xd * xd * xd;
        assert!((f.t[0].value() - 3.0 * 1.5 * 1.5).abs() < 1e-14);
        let adj = tape.gradient(&[(f.t[0], 1.0)]);
        assert!((adj[x.index()] - 9.0).abs() < 1e-14);
    }

    #[test]
    fn quaternion_exponent_doubles_angle() {
        let r = [0.0, 0.0, std::f64::consts::FRAC_PI_4];
        let m = quat_exp_matrix(r);
        let expected = [[0.0, -1.0, 0.0], [1.0, 0.0, 0.0], [0.0, 0.0, 1.0]];
        for i in 0..3 {
            for j in 0..3 {
                assert!((m[i][j] - expected[i][j]).abs() < 1e-12);
            }
        }
        let id = quat_exp_matrix([0.0; 3]);
        assert_eq!(id, [[1.0, 0.0, 0.0], [0.0, 1.0, 0.0], [0.0, 0.0, 1.0]]);
    }

    #[test]
    fn taylor_branch_is_continuous() {
        let a = quat_exp_matrix([1e-7, -2e-7, 0.5e-7]);
        let b = quat_exp_matrix([1.1e-6, -2e-6, 0.5e-6]);
        let c = quat_exp_matrix([1e-6, -2e-6, 0.5e-6]);
        for i in 0..3 {
            for j in 0..3 {
                assert!((b[i][j] - c[i][j]).abs() < 1e-6);
                assert!((a[i][j] - if i == j { 1.0 } else { 0.0 }).abs() < 1e-6);
            }
        }
    }
}
