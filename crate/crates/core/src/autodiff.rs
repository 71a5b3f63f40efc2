//! Exact first derivatives for model functions.
//!
//! Model functions are written once, generically over [`Real`], and can then
//! be evaluated in plain `f64`, with forward-mode [`Dual`] numbers (one
//! directional derivative per pass) or on a thread-local reverse-mode tape
//! through [`Var`] (one transposed-Jacobian product per pass).

use std::cell::{Cell, RefCell};
use std::fmt::Debug;
use std::ops::{Add, AddAssign, Div, Mul, Neg, Sub, SubAssign};
use std::sync::Arc;

use nalgebra::{DMatrix, DVector};

use crate::error::{Error, Result};

/// Scalar type a [`DiffFn`] can be evaluated with.
pub trait Real:
    Copy
    + Debug
    + Add<Output = Self>
    + Sub<Output = Self>
    + Mul<Output = Self>
    + Div<Output = Self>
    + Neg<Output = Self>
    + Add<f64, Output = Self>
    + Sub<f64, Output = Self>
    + Mul<f64, Output = Self>
    + Div<f64, Output = Self>
    + AddAssign
    + SubAssign
    + 'static
{
    fn cst(v: f64) -> Self;
    fn value(self) -> f64;
    fn sqrt(self) -> Self;
    fn sin(self) -> Self;
    fn cos(self) -> Self;
    fn exp(self) -> Self;
    fn ln(self) -> Self;
    fn tanh(self) -> Self;
    fn powi(self, n: i32) -> Self;

    fn zero() -> Self {
        Self::cst(0.0)
    }

    /// Evaluates a type-erased function with this scalar type.
    fn apply(f: &VectorFunction, x: &[Self], out: &mut [Self]);
}

impl Real for f64 {
    fn cst(v: f64) -> Self {
        v
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
    fn exp(self) -> Self {
        f64::exp(self)
    }
    fn ln(self) -> Self {
        f64::ln(self)
    }
    fn tanh(self) -> Self {
        f64::tanh(self)
    }
    fn powi(self, n: i32) -> Self {
        f64::powi(self, n)
    }
    fn apply(f: &VectorFunction, x: &[Self], out: &mut [Self]) {
        COUNTERS.with(|c| c.f64_evals.set(c.f64_evals.get() + 1));
        f.inner.eval_f64(x, out)
    }
}

// ---------------------------------------------------------------------------
// Forward mode

/// Dual number carrying one directional derivative.
#[derive(Clone, Copy, Debug, Default, PartialEq)]
pub struct Dual {
    pub value: f64,
    pub deriv: f64,
}

impl Dual {
    pub fn new(value: f64, deriv: f64) -> Self {
        Self { value, deriv }
    }
}

impl Add for Dual {
    type Output = Dual;
    fn add(self, o: Dual) -> Dual {
        Dual::new(self.value + o.value, self.deriv + o.deriv)
    }
}
impl Sub for Dual {
    type Output = Dual;
    fn sub(self, o: Dual) -> Dual {
        Dual::new(self.value - o.value, self.deriv - o.deriv)
    }
}
impl Mul for Dual {
    type Output = Dual;
    fn mul(self, o: Dual) -> Dual {
        Dual::new(self.value * o.value, self.value * o.deriv + self.deriv * o.value)
    }
}
impl Div for Dual {
    type Output = Dual;
    fn div(self, o: Dual) -> Dual {
        let q = self.value / o.value;
        Dual::new(q, (self.deriv - q * o.deriv) / o.value)
    }
}
impl Neg for Dual {
    type Output = Dual;
    fn neg(self) -> Dual {
        Dual::new(-self.value, -self.deriv)
    }
}
impl Add<f64> for Dual {
    type Output = Dual;
    fn add(self, o: f64) -> Dual {
        Dual::new(self.value + o, self.deriv)
    }
}
impl Sub<f64> for Dual {
    type Output = Dual;
    fn sub(self, o: f64) -> Dual {
        Dual::new(self.value - o, self.deriv)
    }
}
impl Mul<f64> for Dual {
    type Output = Dual;
    fn mul(self, o: f64) -> Dual {
        Dual::new(self.value * o, self.deriv * o)
    }
}
impl Div<f64> for Dual {
    type Output = Dual;
    fn div(self, o: f64) -> Dual {
        Dual::new(self.value / o, self.deriv / o)
    }
}
impl AddAssign for Dual {
    fn add_assign(&mut self, o: Dual) {
        *self = *self + o;
    }
}
impl SubAssign for Dual {
    fn sub_assign(&mut self, o: Dual) {
        *self = *self - o;
    }
}

impl Real for Dual {
    fn cst(v: f64) -> Self {
        Dual::new(v, 0.0)
    }
    fn value(self) -> f64 {
        self.value
    }
    fn sqrt(self) -> Self {
        let r = self.value.sqrt();
        Dual::new(r, self.deriv / (2.0 * r))
    }
    fn sin(self) -> Self {
        Dual::new(self.value.sin(), self.deriv * self.value.cos())
    }
    fn cos(self) -> Self {
        Dual::new(self.value.cos(), -self.deriv * self.value.sin())
    }
    fn exp(self) -> Self {
        let e = self.value.exp();
        Dual::new(e, self.deriv * e)
    }
    fn ln(self) -> Self {
        Dual::new(self.value.ln(), self.deriv / self.value)
    }
    fn tanh(self) -> Self {
        let t = self.value.tanh();
        Dual::new(t, self.deriv * (1.0 - t * t))
    }
    fn powi(self, n: i32) -> Self {
        if n == 0 {
            return Dual::cst(1.0);
        }
        Dual::new(
            self.value.powi(n),
            self.deriv * n as f64 * self.value.powi(n - 1),
        )
    }
    fn apply(f: &VectorFunction, x: &[Self], out: &mut [Self]) {
        COUNTERS.with(|c| c.dual_evals.set(c.dual_evals.get() + 1));
        f.inner.eval_dual(x, out)
    }
}

// ---------------------------------------------------------------------------
// Reverse mode

const NIL: u32 = u32::MAX;

#[derive(Clone, Copy)]
struct Node {
    parents: [u32; 2],
    partials: [f64; 2],
}

thread_local! {
    static TAPE: RefCell<Vec<Node>> = const { RefCell::new(Vec::new()) };
}

fn push(parents: [u32; 2], partials: [f64; 2]) -> u32 {
    TAPE.with(|t| {
        let mut t = t.borrow_mut();
        t.push(Node { parents, partials });
        (t.len() - 1) as u32
    })
}

/// Scalar recorded on the thread-local reverse-mode tape.
#[derive(Clone, Copy, Debug)]
pub struct Var {
    idx: u32,
    val: f64,
}

impl Var {
    fn unary(self, val: f64, d: f64) -> Var {
        Var {
            idx: push([self.idx, NIL], [d, 0.0]),
            val,
        }
    }
    fn binary(a: Var, b: Var, val: f64, da: f64, db: f64) -> Var {
        Var {
            idx: push([a.idx, b.idx], [da, db]),
            val,
        }
    }
}

impl Add for Var {
    type Output = Var;
    fn add(self, o: Var) -> Var {
        Var::binary(self, o, self.val + o.val, 1.0, 1.0)
    }
}
impl Sub for Var {
    type Output = Var;
    fn sub(self, o: Var) -> Var {
        Var::binary(self, o, self.val - o.val, 1.0, -1.0)
    }
}
impl Mul for Var {
    type Output = Var;
    fn mul(self, o: Var) -> Var {
        Var::binary(self, o, self.val * o.val, o.val, self.val)
    }
}
impl Div for Var {
    type Output = Var;
    fn div(self, o: Var) -> Var {
        let q = self.val / o.val;
        Var::binary(self, o, q, 1.0 / o.val, -q / o.val)
    }
}
impl Neg for Var {
    type Output = Var;
    fn neg(self) -> Var {
        self.unary(-self.val, -1.0)
    }
}
impl Add<f64> for Var {
    type Output = Var;
    fn add(self, o: f64) -> Var {
        self.unary(self.val + o, 1.0)
    }
}
impl Sub<f64> for Var {
    type Output = Var;
    fn sub(self, o: f64) -> Var {
        self.unary(self.val - o, 1.0)
    }
}
impl Mul<f64> for Var {
    type Output = Var;
    fn mul(self, o: f64) -> Var {
        self.unary(self.val * o, o)
    }
}
impl Div<f64> for Var {
    type Output = Var;
    fn div(self, o: f64) -> Var {
        self.unary(self.val / o, 1.0 / o)
    }
}
impl AddAssign for Var {
    fn add_assign(&mut self, o: Var) {
        *self = *self + o;
    }
}
impl SubAssign for Var {
    fn sub_assign(&mut self, o: Var) {
        *self = *self - o;
    }
}

impl Real for Var {
    fn cst(v: f64) -> Self {
        Var {
            idx: push([NIL, NIL], [0.0, 0.0]),
            val: v,
        }
    }
    fn value(self) -> f64 {
        self.val
    }
    fn sqrt(self) -> Self {
        let r = self.val.sqrt();
        self.unary(r, 0.5 / r)
    }
    fn sin(self) -> Self {
        self.unary(self.val.sin(), self.val.cos())
    }
    fn cos(self) -> Self {
        self.unary(self.val.cos(), -self.val.sin())
    }
    fn exp(self) -> Self {
        let e = self.val.exp();
        self.unary(e, e)
    }
    fn ln(self) -> Self {
        self.unary(self.val.ln(), 1.0 / self.val)
    }
    fn tanh(self) -> Self {
        let t = self.val.tanh();
        self.unary(t, 1.0 - t * t)
    }
    fn powi(self, n: i32) -> Self {
        if n == 0 {
            return Var::cst(1.0);
        }
        self.unary(self.val.powi(n), n as f64 * self.val.powi(n - 1))
    }
    fn apply(f: &VectorFunction, x: &[Self], out: &mut [Self]) {
        COUNTERS.with(|c| c.tape_evals.set(c.tape_evals.get() + 1));
        f.inner.eval_tape(x, out)
    }
}

// ---------------------------------------------------------------------------
// Functions

/// A differentiable map `R^n_in -> R^n_out`, written generically over [`Real`].
pub trait DiffFn: Send + Sync {
    fn n_in(&self) -> usize;
    fn n_out(&self) -> usize;
    fn eval<S: Real>(&self, x: &[S], out: &mut [S]);

    /// True when the map is affine, so its Jacobian is constant.
    fn is_affine(&self) -> bool {
        false
    }
}

trait ErasedFn: Send + Sync {
    fn n_in(&self) -> usize;
    fn n_out(&self) -> usize;
    fn is_affine(&self) -> bool;
    fn eval_f64(&self, x: &[f64], out: &mut [f64]);
    fn eval_dual(&self, x: &[Dual], out: &mut [Dual]);
    fn eval_tape(&self, x: &[Var], out: &mut [Var]);
}

impl<T: DiffFn> ErasedFn for T {
    fn n_in(&self) -> usize {
        DiffFn::n_in(self)
    }
    fn n_out(&self) -> usize {
        DiffFn::n_out(self)
    }
    fn is_affine(&self) -> bool {
        DiffFn::is_affine(self)
    }
    fn eval_f64(&self, x: &[f64], out: &mut [f64]) {
        self.eval(x, out)
    }
    fn eval_dual(&self, x: &[Dual], out: &mut [Dual]) {
        self.eval(x, out)
    }
    fn eval_tape(&self, x: &[Var], out: &mut [Var]) {
        self.eval(x, out)
    }
}

/// Shared, type-erased handle to a [`DiffFn`].
#[derive(Clone)]
pub struct VectorFunction {
    inner: Arc<dyn ErasedFn>,
}

impl std::fmt::Debug for VectorFunction {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        write!(f, "VectorFunction({} -> {})", self.n_in(), self.n_out())
    }
}

impl VectorFunction {
    pub fn new<F: DiffFn + 'static>(f: F) -> Self {
        Self { inner: Arc::new(f) }
    }

    pub fn n_in(&self) -> usize {
        self.inner.n_in()
    }

    pub fn n_out(&self) -> usize {
        self.inner.n_out()
    }

    pub fn is_affine(&self) -> bool {
        self.inner.is_affine()
    }

    pub fn call<S: Real>(&self, x: &[S], out: &mut [S]) {
        S::apply(self, x, out)
    }

    pub fn eval(&self, x: &[f64]) -> Result<DVector<f64>> {
        check_dim("function input", self.n_in(), x.len())?;
        let mut out = vec![0.0; self.n_out()];
        self.call(x, &mut out);
        Ok(DVector::from_vec(out))
    }
}

pub(crate) fn check_dim(what: &'static str, expected: usize, got: usize) -> Result<()> {
    if expected != got {
        return Err(Error::Dimension {
            what,
            expected,
            got,
        });
    }
    Ok(())
}

/// Exact Jacobian, one forward dual pass per column.
pub fn jacobian(f: &VectorFunction, point: &[f64]) -> Result<DMatrix<f64>> {
    check_dim("jacobian point", f.n_in(), point.len())?;
    let (n, m) = (f.n_in(), f.n_out());
    let mut jac = DMatrix::zeros(m, n);
    let mut x: Vec<Dual> = point.iter().map(|&v| Dual::cst(v)).collect();
    let mut out = vec![Dual::default(); m];
    for j in 0..n {
        x[j].deriv = 1.0;
        f.call(&x, &mut out);
        x[j].deriv = 0.0;
        for (i, o) in out.iter().enumerate() {
            jac[(i, j)] = o.deriv;
        }
    }
    Ok(jac)
}

/// `J(point) * direction` from a single dual pass.
pub fn directional_derivative(
    f: &VectorFunction,
    point: &[f64],
    direction: &[f64],
) -> Result<DVector<f64>> {
    check_dim("directional derivative point", f.n_in(), point.len())?;
    check_dim("directional derivative direction", f.n_in(), direction.len())?;
    let x: Vec<Dual> = point
        .iter()
        .zip(direction)
        .map(|(&v, &d)| Dual::new(v, d))
        .collect();
    let mut out = vec![Dual::default(); f.n_out()];
    f.call(&x, &mut out);
    Ok(DVector::from_iterator(f.n_out(), out.iter().map(|o| o.deriv)))
}

/// Records one evaluation of `body` on the tape and returns `J^T seed`
/// with respect to `point`.
///
/// `body` receives the input variables and must return the outputs. Used to
/// build adjoints of composed maps without recording a function object.
pub fn reverse_sweep<B>(point: &[f64], seed: &[f64], body: B) -> DVector<f64>
where
    B: FnOnce(&[Var]) -> Vec<Var>,
{
    TAPE.with(|t| t.borrow_mut().clear());
    let inputs: Vec<Var> = point
        .iter()
        .map(|&v| Var {
            idx: push([NIL, NIL], [0.0, 0.0]),
            val: v,
        })
        .collect();
    let outputs = body(&inputs);
    debug_assert_eq!(outputs.len(), seed.len());
    TAPE.with(|t| {
        let tape = t.borrow();
        let mut adj = vec![0.0; tape.len()];
        for (o, s) in outputs.iter().zip(seed) {
            adj[o.idx as usize] += s;
        }
        for k in (0..tape.len()).rev() {
            let a = adj[k];
            if a == 0.0 {
                continue;
            }
            let node = tape[k];
            for p in 0..2 {
                if node.parents[p] != NIL {
                    adj[node.parents[p] as usize] += a * node.partials[p];
                }
            }
        }
        DVector::from_iterator(point.len(), inputs.iter().map(|v| adj[v.idx as usize]))
    })
}

/// Transposed-Jacobian product `J(point)^T seed` by reverse accumulation.
pub fn vjp(f: &VectorFunction, point: &[f64], seed: &[f64]) -> Result<DVector<f64>> {
    check_dim("vjp point", f.n_in(), point.len())?;
    check_dim("vjp seed", f.n_out(), seed.len())?;
    let m = f.n_out();
    Ok(reverse_sweep(point, seed, |x| {
        let mut out = vec![Var::cst(0.0); m];
        f.call(x, &mut out);
        out
    }))
}

// ---------------------------------------------------------------------------
// Instrumentation

#[derive(Default)]
struct Counters {
    f64_evals: Cell<u64>,
    dual_evals: Cell<u64>,
    tape_evals: Cell<u64>,
}

thread_local! {
    static COUNTERS: Counters = Counters::default();
}

/// Per-thread counts of function evaluations, by scalar type.
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq)]
pub struct EvalCounts {
    pub plain: u64,
    pub forward: u64,
    pub reverse: u64,
}

impl EvalCounts {
    pub fn total(&self) -> u64 {
        self.plain + self.forward + self.reverse
    }
}

pub fn eval_counts() -> EvalCounts {
    COUNTERS.with(|c| EvalCounts {
        plain: c.f64_evals.get(),
        forward: c.dual_evals.get(),
        reverse: c.tape_evals.get(),
    })
}

// ---------------------------------------------------------------------------
// Common function types

/// `x -> M x + b`.
#[derive(Clone, Debug)]
pub struct AffineFn {
    pub matrix: DMatrix<f64>,
    pub offset: DVector<f64>,
}

impl AffineFn {
    pub fn new(matrix: DMatrix<f64>, offset: DVector<f64>) -> Self {
        assert_eq!(matrix.nrows(), offset.len());
        Self { matrix, offset }
    }
}

impl DiffFn for AffineFn {
    fn n_in(&self) -> usize {
        self.matrix.ncols()
    }
    fn n_out(&self) -> usize {
        self.matrix.nrows()
    }
    fn is_affine(&self) -> bool {
        true
    }
    fn eval<S: Real>(&self, x: &[S], out: &mut [S]) {
        for (i, o) in out.iter_mut().enumerate() {
            let mut acc = S::cst(self.offset[i]);
            for (j, &xj) in x.iter().enumerate() {
                let m = self.matrix[(i, j)];
                if m != 0.0 {
                    acc += xj * m;
                }
            }
            *o = acc;
        }
    }
}

/// `x -> diag(weights) (x - reference)`, the usual weighted tracking residual.
#[derive(Clone, Debug)]
pub struct WeightedResidual {
    pub weights: DVector<f64>,
    pub reference: DVector<f64>,
}

impl DiffFn for WeightedResidual {
    fn n_in(&self) -> usize {
        self.weights.len()
    }
    fn n_out(&self) -> usize {
        self.weights.len()
    }
    fn is_affine(&self) -> bool {
        true
    }
    fn eval<S: Real>(&self, x: &[S], out: &mut [S]) {
        for i in 0..out.len() {
            out[i] = (x[i] - self.reference[i]) * self.weights[i];
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    struct Toy;
    impl DiffFn for Toy {
        fn n_in(&self) -> usize {
            2
        }
        fn n_out(&self) -> usize {
            2
        }
        fn eval<S: Real>(&self, x: &[S], out: &mut [S]) {
            out[0] = x[0] * x[0];
            out[1] = x[0] * x[1];
        }
    }

    struct Identity(usize);
    impl DiffFn for Identity {
        fn n_in(&self) -> usize {
            self.0
        }
        fn n_out(&self) -> usize {
            self.0
        }
        fn eval<S: Real>(&self, x: &[S], out: &mut [S]) {
            out.copy_from_slice(x);
        }
    }

    struct Smooth;
    impl DiffFn for Smooth {
        fn n_in(&self) -> usize {
            3
        }
        fn n_out(&self) -> usize {
            2
        }
        fn eval<S: Real>(&self, x: &[S], out: &mut [S]) {
            let r = (x[0] * x[0] + x[1] * x[1] + 1.0).sqrt();
            out[0] = x[0].sin() * x[2].exp() / r;
            out[1] = (x[1] * x[2]).tanh() - x[0].cos() * x[1].powi(3) + (x[2] * x[2] + 2.0).ln();
        }
    }

    #[test]
    fn identity_jacobian() {
        let f = VectorFunction::new(Identity(3));
        let j = jacobian(&f, &[0.3, -1.0, 2.0]).unwrap();
        assert_eq!(j, DMatrix::identity(3, 3));
        let s = vjp(&f, &[0.3, -1.0, 2.0], &[1.0, 2.0, 3.0]).unwrap();
        assert_eq!(s.as_slice(), &[1.0, 2.0, 3.0]);
    }

    #[test]
    fn toy_derivatives() {
        let f = VectorFunction::new(Toy);
        let j = jacobian(&f, &[2.0, 3.0]).unwrap();
        assert_eq!(j, DMatrix::from_row_slice(2, 2, &[4.0, 0.0, 3.0, 2.0]));
        let g = vjp(&f, &[2.0, 3.0], &[1.0, 1.0]).unwrap();
        assert_eq!(g.as_slice(), &[7.0, 2.0]);
        let d = directional_derivative(&f, &[2.0, 3.0], &[1.0, 0.0]).unwrap();
        assert_eq!(d.as_slice(), &[4.0, 3.0]);
        assert_eq!(
            vjp(&f, &[2.0, 3.0], &[0.0, 0.0]).unwrap().as_slice(),
            &[0.0, 0.0]
        );
        assert_eq!(
            directional_derivative(&f, &[2.0, 3.0], &[0.0, 0.0])
                .unwrap()
                .as_slice(),
            &[0.0, 0.0]
        );
    }

    #[test]
    fn affine_is_exact() {
        let m = DMatrix::from_row_slice(2, 3, &[1.0, -2.0, 0.5, 3.0, 0.0, 4.0]);
        let f = VectorFunction::new(AffineFn::new(m.clone(), DVector::from_vec(vec![1.0, 2.0])));
        assert!(f.is_affine());
        assert_eq!(jacobian(&f, &[0.1, 0.2, 0.3]).unwrap(), m);
        let d = directional_derivative(&f, &[5.0, 6.0, 7.0], &[1.0, 1.0, -1.0]).unwrap();
        assert_eq!(d, &m * DVector::from_vec(vec![1.0, 1.0, -1.0]));
    }

    #[test]
    fn dimension_errors() {
        let f = VectorFunction::new(Toy);
        assert!(jacobian(&f, &[1.0]).is_err());
        assert!(vjp(&f, &[1.0, 2.0], &[1.0]).is_err());
        assert!(directional_derivative(&f, &[1.0, 2.0], &[1.0]).is_err());
    }

    #[test]
    fn columns_match_unit_directions_bitwise() {
        let f = VectorFunction::new(Smooth);
        let p = [0.4, -0.7, 0.2];
        let j = jacobian(&f, &p).unwrap();
        for k in 0..3 {
            let mut e = [0.0; 3];
            e[k] = 1.0;
            let d = directional_derivative(&f, &p, &e).unwrap();
            for i in 0..2 {
                assert_eq!(j[(i, k)].to_bits(), d[i].to_bits());
            }
        }
    }

    #[test]
    fn central_differences_agree() {
        let f = VectorFunction::new(Smooth);
        let p = [0.4, -0.7, 0.2];
        let j = jacobian(&f, &p).unwrap();
        let h = 1e-6;
        for k in 0..3 {
            let mut a = p;
            let mut b = p;
            a[k] += h;
            b[k] -= h;
            let fd = (f.eval(&a).unwrap() - f.eval(&b).unwrap()) / (2.0 * h);
            for i in 0..2 {
                let rel = (fd[i] - j[(i, k)]).abs() / (1.0 + j[(i, k)].abs());
                assert!(rel < 1e-6, "entry ({i},{k}) rel err {rel}");
            }
        }
    }

    #[test]
    fn counters_track_scalar_types() {
        let f = VectorFunction::new(Toy);
        let before = eval_counts();
        f.eval(&[1.0, 2.0]).unwrap();
        jacobian(&f, &[1.0, 2.0]).unwrap();
        vjp(&f, &[1.0, 2.0], &[1.0, 0.0]).unwrap();
        let after = eval_counts();
        assert_eq!(after.plain - before.plain, 1);
        assert_eq!(after.forward - before.forward, 2);
        assert_eq!(after.reverse - before.reverse, 1);
    }

    mod props {
        use super::*;
        use proptest::prelude::*;

        proptest! {
            #[test]
            fn transpose_consistency(
                p in prop::array::uniform3(-1.5f64..1.5),
                d in prop::array::uniform3(-2.0f64..2.0),
                s in prop::array::uniform2(-2.0f64..2.0),
            ) {
                let f = VectorFunction::new(Smooth);
                let jd = directional_derivative(&f, &p, &d).unwrap();
                let jts = vjp(&f, &p, &s).unwrap();
                let lhs: f64 = jts.iter().zip(d.iter()).map(|(a, b)| a * b).sum();
                let rhs: f64 = jd.iter().zip(s.iter()).map(|(a, b)| a * b).sum();
                let scale = 1.0 + lhs.abs() + rhs.abs();
                prop_assert!((lhs - rhs).abs() <= 1e-10 * scale);
                let j = jacobian(&f, &p).unwrap();
                let oracle = j.transpose() * DVector::from_row_slice(&s);
                for k in 0..3 {
                    prop_assert!((oracle[k] - jts[k]).abs() <= 1e-12 * (1.0 + oracle[k].abs()));
                }
            }
        }
    }
}
