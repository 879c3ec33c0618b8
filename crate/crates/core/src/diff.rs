//! Scalar-output reverse-mode differentiation.
//!
//! Model and energy code is written once against [`Expr`], which has two
//! implementations:
//!
//! - [`Eval`] computes plain values (`V = T`),
//! - [`Tape`] records every operation so that [`Tape::gradient`] can
//!   back-propagate adjoints to the input slots.
//!
//! Because both paths run the same code, the forward value on the tape is the
//! direct evaluation of the same expression.
//!
//! Besides the elementary operations the tape has n-ary nodes for linear
//! combinations with constant coefficients, dot products, sums and
//! log-sum-exp; these keep the per-sample graphs of the energy small.
//!
//! `ln Φ` uses the exact derivative `φ(z)/Φ(z)`; the rectifier's subgradient
//! at zero is zero.

use thiserror::Error;

use crate::special::{d_log_norm_cdf_f64, log_norm_cdf_f64};
use crate::Scalar;

/// Threshold used by [`check_gradient`] for a pass.
pub const GRADIENT_TOLERANCE: f64 = 1e-5;
/// Central-difference step used by default.
pub const DEFAULT_STEP: f64 = 1e-4;
/// Below this magnitude gradient coordinates are compared absolutely.
const ABSOLUTE_FLOOR: f64 = 1e-8;

#[derive(Debug, Error, Clone, PartialEq)]
pub enum DiffError {
    #[error("non-finite intermediate value at node {node} ({op})")]
    NonFiniteIntermediate { node: usize, op: &'static str },
    #[error("expected {expected} input values, got {got}")]
    ArityMismatch { expected: usize, got: usize },
}

/// Arithmetic over some value representation.
pub trait Expr<T: Scalar> {
    type V: Copy + std::fmt::Debug;

    fn constant(&mut self, c: T) -> Self::V;
    fn value(&self, v: Self::V) -> T;

    fn add(&mut self, a: Self::V, b: Self::V) -> Self::V;
    fn sub(&mut self, a: Self::V, b: Self::V) -> Self::V;
    fn mul(&mut self, a: Self::V, b: Self::V) -> Self::V;
    fn div(&mut self, a: Self::V, b: Self::V) -> Self::V;
    fn neg(&mut self, a: Self::V) -> Self::V;
    fn exp(&mut self, a: Self::V) -> Self::V;
    fn ln(&mut self, a: Self::V) -> Self::V;
    fn square(&mut self, a: Self::V) -> Self::V;
    /// `max(a, 0)`.
    fn relu(&mut self, a: Self::V) -> Self::V;
    /// `ln Φ(a)` for the standard normal CDF.
    fn log_norm_cdf(&mut self, a: Self::V) -> Self::V;
    /// `c·a`.
    fn scale(&mut self, a: Self::V, c: T) -> Self::V;
    /// `a + c`.
    fn shift(&mut self, a: Self::V, c: T) -> Self::V;
    /// `bias + Σ coeffs[i]·vars[i]`.
    fn lin_comb(&mut self, vars: &[Self::V], coeffs: &[T], bias: T) -> Self::V;
    /// `Σ a[i]·b[i]`.
    fn dot(&mut self, a: &[Self::V], b: &[Self::V]) -> Self::V;
    fn sum(&mut self, vars: &[Self::V]) -> Self::V;
    /// Max-shifted `ln Σ exp(vars[i])`.
    fn log_sum_exp(&mut self, vars: &[Self::V]) -> Self::V;
}

/// Direct evaluation.
#[derive(Debug, Default, Clone, Copy)]
pub struct Eval;

impl<T: Scalar> Expr<T> for Eval {
    type V = T;

    #[inline]
    fn constant(&mut self, c: T) -> T {
        c
    }
    #[inline]
    fn value(&self, v: T) -> T {
        v
    }
    #[inline]
    fn add(&mut self, a: T, b: T) -> T {
        a + b
    }
    #[inline]
    fn sub(&mut self, a: T, b: T) -> T {
        a - b
    }
    #[inline]
    fn mul(&mut self, a: T, b: T) -> T {
        a * b
    }
    #[inline]
    fn div(&mut self, a: T, b: T) -> T {
        a / b
    }
    #[inline]
    fn neg(&mut self, a: T) -> T {
        -a
    }
    #[inline]
    fn exp(&mut self, a: T) -> T {
        a.exp()
    }
    #[inline]
    fn ln(&mut self, a: T) -> T {
        a.ln()
    }
    #[inline]
    fn square(&mut self, a: T) -> T {
        a * a
    }
    #[inline]
    fn relu(&mut self, a: T) -> T {
        if a > T::zero() {
            a
        } else {
            T::zero()
        }
    }
    fn log_norm_cdf(&mut self, a: T) -> T {
        T::lit(log_norm_cdf_f64(a.as_f64()))
    }
    #[inline]
    fn scale(&mut self, a: T, c: T) -> T {
        c * a
    }
    #[inline]
    fn shift(&mut self, a: T, c: T) -> T {
        a + c
    }
    fn lin_comb(&mut self, vars: &[T], coeffs: &[T], bias: T) -> T {
        debug_assert_eq!(vars.len(), coeffs.len());
        vars.iter().zip(coeffs).fold(bias, |acc, (&v, &c)| acc + c * v)
    }
    fn dot(&mut self, a: &[T], b: &[T]) -> T {
        debug_assert_eq!(a.len(), b.len());
        a.iter().zip(b).fold(T::zero(), |acc, (&x, &y)| acc + x * y)
    }
    fn sum(&mut self, vars: &[T]) -> T {
        vars.iter().fold(T::zero(), |acc, &v| acc + v)
    }
    fn log_sum_exp(&mut self, vars: &[T]) -> T {
        crate::special::log_sum_exp(vars)
    }
}

/// Handle to a node on a [`Tape`].
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub struct Var(usize);

impl Var {
    pub fn index(self) -> usize {
        self.0
    }
}

#[derive(Debug, Clone, Copy)]
enum Op<T> {
    Input,
    Const,
    Add(usize, usize),
    Sub(usize, usize),
    Mul(usize, usize),
    Div(usize, usize),
    Neg(usize),
    Exp(usize),
    Ln(usize),
    Square(usize),
    Relu(usize),
    LogNormCdf(usize),
    Scale(usize, T),
    Shift(usize),
    LinComb { start: usize, len: usize, cstart: usize },
    Dot { start: usize, len: usize },
    Sum { start: usize, len: usize },
    LogSumExp { start: usize, len: usize },
}

impl<T> Op<T> {
    fn name(&self) -> &'static str {
        match self {
            Op::Input => "input",
            Op::Const => "const",
            Op::Add(..) => "add",
            Op::Sub(..) => "sub",
            Op::Mul(..) => "mul",
            Op::Div(..) => "div",
            Op::Neg(..) => "neg",
            Op::Exp(..) => "exp",
            Op::Ln(..) => "ln",
            Op::Square(..) => "square",
            Op::Relu(..) => "relu",
            Op::LogNormCdf(..) => "log_norm_cdf",
            Op::Scale(..) => "scale",
            Op::Shift(..) => "shift",
            Op::LinComb { .. } => "lin_comb",
            Op::Dot { .. } => "dot",
            Op::Sum { .. } => "sum",
            Op::LogSumExp { .. } => "log_sum_exp",
        }
    }
}

/// Per-evaluation record of operations for reverse accumulation.
#[derive(Debug, Clone)]
pub struct Tape<T> {
    ops: Vec<Op<T>>,
    values: Vec<T>,
    args: Vec<usize>,
    coeffs: Vec<T>,
    inputs: Vec<usize>,
    first_non_finite: Option<usize>,
}

impl<T: Scalar> Default for Tape<T> {
    fn default() -> Self {
        Self::new()
    }
}

impl<T: Scalar> Tape<T> {
    pub fn new() -> Self {
        Self {
            ops: Vec::new(),
            values: Vec::new(),
            args: Vec::new(),
            coeffs: Vec::new(),
            inputs: Vec::new(),
            first_non_finite: None,
        }
    }

    pub fn with_capacity(nodes: usize) -> Self {
        let mut t = Self::new();
        t.ops.reserve(nodes);
        t.values.reserve(nodes);
        t
    }

    /// Register a new parameter slot.
    pub fn input(&mut self, value: T) -> Var {
        let v = self.push(Op::Input, value);
        self.inputs.push(v.0);
        v
    }

    pub fn inputs(&mut self, values: &[T]) -> Vec<Var> {
        values.iter().map(|&x| self.input(x)).collect()
    }

    pub fn n_inputs(&self) -> usize {
        self.inputs.len()
    }

    pub fn len(&self) -> usize {
        self.ops.len()
    }

    pub fn is_empty(&self) -> bool {
        self.ops.is_empty()
    }

    /// Drop all recorded nodes, keeping allocations.
    pub fn clear(&mut self) {
        self.ops.clear();
        self.values.clear();
        self.args.clear();
        self.coeffs.clear();
        self.inputs.clear();
        self.first_non_finite = None;
    }

    #[inline]
    fn push(&mut self, op: Op<T>, value: T) -> Var {
        let idx = self.ops.len();
        if self.first_non_finite.is_none() && !value.is_finite() {
            self.first_non_finite = Some(idx);
        }
        self.ops.push(op);
        self.values.push(value);
        Var(idx)
    }

    #[inline]
    fn val(&self, i: usize) -> T {
        self.values[i]
    }

    /// Adjoints `∂output/∂input` for every input slot in registration order.
    pub fn gradient(&self, output: Var) -> Result<Vec<T>, DiffError> {
        if let Some(node) = self.first_non_finite.filter(|&n| n <= output.0) {
            return Err(DiffError::NonFiniteIntermediate { node, op: self.ops[node].name() });
        }
        let mut adj = vec![T::zero(); output.0 + 1];
        adj[output.0] = T::one();
        for i in (0..=output.0).rev() {
            let g = adj[i];
            if g == T::zero() {
                continue;
            }
            match self.ops[i] {
                Op::Input | Op::Const => {}
                Op::Add(a, b) => {
                    adj[a] += g;
                    adj[b] += g;
                }
                Op::Sub(a, b) => {
                    adj[a] += g;
                    adj[b] -= g;
                }
                Op::Mul(a, b) => {
                    let (va, vb) = (self.val(a), self.val(b));
                    adj[a] += g * vb;
                    adj[b] += g * va;
                }
                Op::Div(a, b) => {
                    let vb = self.val(b);
                    adj[a] += g / vb;
                    adj[b] -= g * self.values[i] / vb;
                }
                Op::Neg(a) => adj[a] -= g,
                Op::Exp(a) => adj[a] += g * self.values[i],
                Op::Ln(a) => adj[a] += g / self.val(a),
                Op::Square(a) => adj[a] += g * T::lit(2.0) * self.val(a),
                Op::Relu(a) => {
                    if self.val(a) > T::zero() {
                        adj[a] += g;
                    }
                }
                Op::LogNormCdf(a) => {
                    let d = d_log_norm_cdf_f64(self.val(a).as_f64(), self.values[i].as_f64());
                    adj[a] += g * T::lit(d);
                }
                Op::Scale(a, c) => adj[a] += g * c,
                Op::Shift(a) => adj[a] += g,
                Op::LinComb { start, len, cstart } => {
                    for k in 0..len {
                        let a = self.args[start + k];
                        adj[a] += g * self.coeffs[cstart + k];
                    }
                }
                Op::Dot { start, len } => {
                    for k in 0..len {
                        let a = self.args[start + 2 * k];
                        let b = self.args[start + 2 * k + 1];
                        let (va, vb) = (self.val(a), self.val(b));
                        adj[a] += g * vb;
                        adj[b] += g * va;
                    }
                }
                Op::Sum { start, len } => {
                    for k in 0..len {
                        adj[self.args[start + k]] += g;
                    }
                }
                Op::LogSumExp { start, len } => {
                    let out = self.values[i];
                    for k in 0..len {
                        let a = self.args[start + k];
                        adj[a] += g * (self.val(a) - out).exp();
                    }
                }
            }
        }
        Ok(self.inputs.iter().map(|&i| if i <= output.0 { adj[i] } else { T::zero() }).collect())
    }
}

impl<T: Scalar> Expr<T> for Tape<T> {
    type V = Var;

    fn constant(&mut self, c: T) -> Var {
        self.push(Op::Const, c)
    }
    #[inline]
    fn value(&self, v: Var) -> T {
        self.values[v.0]
    }
    fn add(&mut self, a: Var, b: Var) -> Var {
        let v = self.val(a.0) + self.val(b.0);
        self.push(Op::Add(a.0, b.0), v)
    }
    fn sub(&mut self, a: Var, b: Var) -> Var {
        let v = self.val(a.0) - self.val(b.0);
        self.push(Op::Sub(a.0, b.0), v)
    }
    fn mul(&mut self, a: Var, b: Var) -> Var {
        let v = self.val(a.0) * self.val(b.0);
        self.push(Op::Mul(a.0, b.0), v)
    }
    fn div(&mut self, a: Var, b: Var) -> Var {
        let v = self.val(a.0) / self.val(b.0);
        self.push(Op::Div(a.0, b.0), v)
    }
    fn neg(&mut self, a: Var) -> Var {
        let v = -self.val(a.0);
        self.push(Op::Neg(a.0), v)
    }
    fn exp(&mut self, a: Var) -> Var {
        let v = self.val(a.0).exp();
        self.push(Op::Exp(a.0), v)
    }
    fn ln(&mut self, a: Var) -> Var {
        let v = self.val(a.0).ln();
        self.push(Op::Ln(a.0), v)
    }
    fn square(&mut self, a: Var) -> Var {
        let x = self.val(a.0);
        self.push(Op::Square(a.0), x * x)
    }
    fn relu(&mut self, a: Var) -> Var {
        let x = self.val(a.0);
        let v = if x > T::zero() { x } else { T::zero() };
        self.push(Op::Relu(a.0), v)
    }
    fn log_norm_cdf(&mut self, a: Var) -> Var {
        let v = T::lit(log_norm_cdf_f64(self.val(a.0).as_f64()));
        self.push(Op::LogNormCdf(a.0), v)
    }
    fn scale(&mut self, a: Var, c: T) -> Var {
        let v = c * self.val(a.0);
        self.push(Op::Scale(a.0, c), v)
    }
    fn shift(&mut self, a: Var, c: T) -> Var {
        let v = self.val(a.0) + c;
        self.push(Op::Shift(a.0), v)
    }
    fn lin_comb(&mut self, vars: &[Var], coeffs: &[T], bias: T) -> Var {
        assert_eq!(vars.len(), coeffs.len(), "lin_comb arity");
        let start = self.args.len();
        let cstart = self.coeffs.len();
        let mut v = bias;
        for (x, &c) in vars.iter().zip(coeffs) {
            v += c * self.values[x.0];
            self.args.push(x.0);
        }
        self.coeffs.extend_from_slice(coeffs);
        self.push(Op::LinComb { start, len: vars.len(), cstart }, v)
    }
    fn dot(&mut self, a: &[Var], b: &[Var]) -> Var {
        assert_eq!(a.len(), b.len(), "dot arity");
        let start = self.args.len();
        let mut v = T::zero();
        for (x, y) in a.iter().zip(b) {
            v += self.values[x.0] * self.values[y.0];
            self.args.push(x.0);
            self.args.push(y.0);
        }
        self.push(Op::Dot { start, len: a.len() }, v)
    }
    fn sum(&mut self, vars: &[Var]) -> Var {
        let start = self.args.len();
        let mut v = T::zero();
        for x in vars {
            v += self.values[x.0];
            self.args.push(x.0);
        }
        self.push(Op::Sum { start, len: vars.len() }, v)
    }
    fn log_sum_exp(&mut self, vars: &[Var]) -> Var {
        let start = self.args.len();
        let vals: Vec<T> = vars.iter().map(|x| self.values[x.0]).collect();
        self.args.extend(vars.iter().map(|x| x.0));
        let v = crate::special::log_sum_exp(&vals);
        self.push(Op::LogSumExp { start, len: vars.len() }, v)
    }
}

/// A scalar function of a parameter vector, expressible on any [`Expr`].
pub trait ScalarFn<T: Scalar> {
    type Error: From<DiffError>;

    fn eval<E: Expr<T>>(&self, e: &mut E, x: &[E::V]) -> Result<E::V, Self::Error>;
}

/// Plain value of `f` at `at`.
pub fn evaluate<T: Scalar, F: ScalarFn<T>>(f: &F, at: &[T]) -> Result<T, F::Error> {
    f.eval(&mut Eval, at)
}

/// Value and gradient of `f` at `at` by reverse accumulation.
pub fn value_and_gradient<T: Scalar, F: ScalarFn<T>>(f: &F, at: &[T]) -> Result<(T, Vec<T>), F::Error> {
    let mut tape = Tape::new();
    let xs = tape.inputs(at);
    let out = f.eval(&mut tape, &xs)?;
    let grad = tape.gradient(out)?;
    Ok((tape.value(out), grad))
}

/// `∂f/∂x` for every slot.
pub fn gradient<T: Scalar, F: ScalarFn<T>>(f: &F, at: &[T]) -> Result<Vec<T>, F::Error> {
    value_and_gradient(f, at).map(|(_, g)| g)
}

/// Outcome of comparing an analytic gradient with central differences.
#[derive(Debug, Clone, PartialEq)]
pub struct GradientCheck<T> {
    pub analytic: Vec<T>,
    pub numeric: Vec<T>,
    /// Per-coordinate error: relative, or absolute where both magnitudes are
    /// below `1e-8`.
    pub errors: Vec<T>,
    pub max_error: T,
    pub worst_coordinate: Option<usize>,
    pub passed: bool,
}

impl<T: Scalar> GradientCheck<T> {
    /// Coordinates whose error exceeds the pass threshold.
    pub fn failing_coordinates(&self) -> Vec<usize> {
        let tol = T::lit(GRADIENT_TOLERANCE);
        self.errors.iter().enumerate().filter(|(_, &e)| !(e <= tol)).map(|(i, _)| i).collect()
    }
}

/// Compare `analytic` with central differences of `value` at `at`, using
/// the fourth-order stencil `(8(f₊₁ − f₋₁) − (f₊₂ − f₋₂)) / 12h`.
pub fn check_gradient_with<T: Scalar>(
    mut value: impl FnMut(&[T]) -> T,
    analytic: &[T],
    at: &[T],
    step: T,
) -> GradientCheck<T> {
    let mut x = at.to_vec();
    let two = T::lit(2.0);
    let floor = T::lit(ABSOLUTE_FLOOR);
    let mut numeric = Vec::with_capacity(at.len());
    let mut errors = Vec::with_capacity(at.len());
    for i in 0..at.len() {
        let orig = x[i];
        let mut at_offset = |k: T| {
            x[i] = orig + k * step;
            value(&x)
        };
        let (p1, m1, p2, m2) = (at_offset(T::one()), at_offset(-T::one()), at_offset(two), at_offset(-two));
        x[i] = orig;
        let fd = (T::lit(8.0) * (p1 - m1) - (p2 - m2)) / (T::lit(12.0) * step);
        let scale = analytic[i].abs().max(fd.abs());
        let err = if scale < floor { (analytic[i] - fd).abs() } else { (analytic[i] - fd).abs() / scale };
        numeric.push(fd);
        errors.push(err);
    }
    let (worst_coordinate, max_error) =
        errors
            .iter()
            .enumerate()
            .fold((None, T::zero()), |(wi, we), (i, &e)| if !(e <= we) { (Some(i), e) } else { (wi, we) });
    let passed = errors.iter().all(|&e| e <= T::lit(GRADIENT_TOLERANCE));
    GradientCheck { analytic: analytic.to_vec(), numeric, errors, max_error, worst_coordinate, passed }
}

/// Tape gradient of `f` against central differences with the given step.
pub fn check_gradient<T: Scalar, F: ScalarFn<T>>(f: &F, at: &[T], step: T) -> Result<GradientCheck<T>, F::Error> {
    let grad = gradient(f, at)?;
    let mut first_err = None;
    let check = check_gradient_with(
        |x| match evaluate(f, x) {
            Ok(v) => v,
            Err(e) => {
                first_err.get_or_insert(e);
                T::nan()
            }
        },
        &grad,
        at,
        step,
    );
    match first_err {
        Some(e) => Err(e),
        None => Ok(check),
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use approx::assert_relative_eq;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    /// Build a closure-backed `ScalarFn`.
    macro_rules! scalar_fn {
        ($name:ident, |$e:ident, $x:ident| $body:expr) => {
            struct $name;
            impl ScalarFn<f64> for $name {
                type Error = DiffError;
                fn eval<E: Expr<f64>>(&self, $e: &mut E, $x: &[E::V]) -> Result<E::V, DiffError> {
                    Ok($body)
                }
            }
        };
    }

    scalar_fn!(Product, |e, x| e.mul(x[0], x[1]));
    scalar_fn!(LogPhi, |e, x| e.log_norm_cdf(x[0]));
    scalar_fn!(Linear, |e, x| e.lin_comb(x, &[2.0, -3.0, 0.5], 1.0));
    scalar_fn!(Quadratic, |e, x| {
        let a = e.square(x[0]);
        let b = e.mul(x[0], x[1]);
        let c = e.scale(b, 3.0);
        e.add(a, c)
    });
    scalar_fn!(Everything, |e, x| {
        let a = e.exp(x[0]);
        let b = e.ln(a);
        let c = e.div(b, x[1]);
        let d = e.relu(x[2]);
        let f = e.dot(&[c, d], &[x[1], x[3]]);
        let g = e.log_sum_exp(&[f, x[0], x[3]]);
        let h = e.log_norm_cdf(x[2]);
        let i = e.sum(&[g, h, x[1]]);
        let j = e.neg(i);
        let k = e.sub(j, x[0]);
        let l = e.shift(k, 4.0);
        e.square(l)
    });
    scalar_fn!(F1, |e, x| {
        let a = e.mul(x[0], x[1]);
        e.exp(a)
    });
    scalar_fn!(F2, |e, x| {
        let a = e.square(x[1]);
        e.log_norm_cdf(a)
    });
    scalar_fn!(F1PlusF2, |e, x| {
        let a = e.mul(x[0], x[1]);
        let a = e.exp(a);
        let b = e.square(x[1]);
        let b = e.log_norm_cdf(b);
        e.add(a, b)
    });

    #[test]
    fn product_rule() {
        assert_eq!(gradient(&Product, &[2.0, 3.0]).unwrap(), vec![3.0, 2.0]);
    }

    #[test]
    fn log_phi_derivative_at_zero() {
        let g = gradient(&LogPhi, &[0.0]).unwrap()[0];
        assert_relative_eq!(g, 0.797885, epsilon = 1e-6);
        assert_relative_eq!(g, (2.0 / std::f64::consts::PI).sqrt(), epsilon = 1e-14);
    }

    #[test]
    fn linear_is_exact() {
        let c = check_gradient(&Linear, &[0.3, -1.2, 5.0], 1e-4).unwrap();
        assert!(c.passed);
        assert!(c.max_error < 1e-10, "{:?}", c.errors);
    }

    #[test]
    fn quadratic_central_differences_exact() {
        let c = check_gradient(&Quadratic, &[1.7, -0.4], 1e-4).unwrap();
        assert!(c.passed);
        assert!(c.max_error < 1e-9);
    }

    #[test]
    fn wrong_adjoint_is_caught() {
        let at = [0.5, 2.0, -1.0];
        let value = |x: &[f64]| x[0] * x[1] + x[2].exp();
        // correct would be [x1, x0, exp(x2)]; corrupt coordinate 2
        let bad = [2.0, 0.5, 2.0 * (-1.0_f64).exp()];
        let c = check_gradient_with(value, &bad, &at, 1e-4);
        assert!(!c.passed);
        assert_eq!(c.failing_coordinates(), vec![2]);
        assert_eq!(c.worst_coordinate, Some(2));
    }

    #[test]
    fn tape_forward_matches_eval_and_gradient_matches_fd() {
        let mut rng = ChaCha8Rng::seed_from_u64(11);
        for _ in 0..20 {
            let at: Vec<f64> = (0..4).map(|_| rng.random_range(0.2..1.5)).collect();
            let mut tape = Tape::new();
            let xs = tape.inputs(&at);
            let out = Everything.eval(&mut tape, &xs).unwrap();
            let direct = evaluate(&Everything, &at).unwrap();
            assert!((tape.value(out) - direct).abs() <= 1e-12 * direct.abs().max(1.0));
            let c = check_gradient(&Everything, &at, 1e-4).unwrap();
            assert!(c.passed, "{c:?}");
        }
    }

    #[test]
    fn gradient_is_linear_in_the_function() {
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        for _ in 0..20 {
            let at: Vec<f64> = (0..2).map(|_| rng.random_range(-1.0..1.0)).collect();
            let g1 = gradient(&F1, &at).unwrap();
            let g2 = gradient(&F2, &at).unwrap();
            let g = gradient(&F1PlusF2, &at).unwrap();
            for i in 0..2 {
                assert!((g[i] - g1[i] - g2[i]).abs() <= 1e-12 * g[i].abs().max(1.0));
            }
        }
    }

    #[test]
    fn relu_subgradient_at_zero_is_zero() {
        let mut tape = Tape::new();
        let x = tape.input(0.0);
        let y = tape.relu(x);
        assert_eq!(tape.gradient(y).unwrap(), vec![0.0]);
    }

    #[test]
    fn non_finite_node_is_reported() {
        let mut tape = Tape::new();
        let x = tape.input(0.0);
        let l = tape.ln(x);
        let y = tape.scale(l, 2.0);
        assert_eq!(tape.gradient(y), Err(DiffError::NonFiniteIntermediate { node: 1, op: "ln" }));
    }

    #[test]
    fn lse_gradient_is_softmax() {
        let mut tape = Tape::new();
        let xs = tape.inputs(&[1.0, 2.0, 3.0]);
        let y = tape.log_sum_exp(&xs);
        let g = tape.gradient(y).unwrap();
        let z: f64 = [1.0_f64, 2.0, 3.0].iter().map(|v| v.exp()).sum();
        for (i, gi) in g.iter().enumerate() {
            assert_relative_eq!(*gi, ((i + 1) as f64).exp() / z, epsilon = 1e-15);
        }
    }

    #[test]
    fn works_in_single_precision() {
        let mut tape = Tape::<f32>::new();
        let a = tape.input(2.0);
        let b = tape.input(3.0);
        let y = tape.mul(a, b);
        assert_eq!(tape.gradient(y).unwrap(), vec![3.0f32, 2.0]);
    }
}
