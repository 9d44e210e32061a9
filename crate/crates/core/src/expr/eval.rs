use nalgebra::DMatrix;
use serde::Serialize;

use super::{describe, BinOp, EvalError, Expression, Func, Jet2, Node};

/// Number types the evaluator can run on.
pub trait Scalar: Clone {
    /// Whether the type carries derivatives; points where the function is not
    /// differentiable are then rejected as well.
    const DIFFERENTIABLE: bool;

    fn lift(v: f64, p: usize) -> Self;
    fn param(v: f64, index: usize, p: usize) -> Self;
    fn value(&self) -> f64;
    fn add(&self, o: &Self) -> Self;
    fn sub(&self, o: &Self) -> Self;
    fn mul(&self, o: &Self) -> Self;
    fn div(&self, o: &Self) -> Self;
    fn neg(&self) -> Self;
    fn powf(&self, e: f64) -> Self;
    fn exp(&self) -> Self;
    fn ln(&self) -> Self;
    fn sqrt(&self) -> Self;
    fn is_finite(&self) -> bool;
}

impl Scalar for f64 {
    const DIFFERENTIABLE: bool = false;

    fn lift(v: f64, _p: usize) -> Self {
        v
    }
    fn param(v: f64, _index: usize, _p: usize) -> Self {
        v
    }
    fn value(&self) -> f64 {
        *self
    }
    fn add(&self, o: &Self) -> Self {
        self + o
    }
    fn sub(&self, o: &Self) -> Self {
        self - o
    }
    fn mul(&self, o: &Self) -> Self {
        self * o
    }
    fn div(&self, o: &Self) -> Self {
        self / o
    }
    fn neg(&self) -> Self {
        -self
    }
    fn powf(&self, e: f64) -> Self {
        f64::powf(*self, e)
    }
    fn exp(&self) -> Self {
        f64::exp(*self)
    }
    fn ln(&self) -> Self {
        f64::ln(*self)
    }
    fn sqrt(&self) -> Self {
        f64::sqrt(*self)
    }
    fn is_finite(&self) -> bool {
        f64::is_finite(*self)
    }
}

impl Scalar for Jet2 {
    const DIFFERENTIABLE: bool = true;

    fn lift(v: f64, p: usize) -> Self {
        Jet2::constant(v, p)
    }
    fn param(v: f64, index: usize, p: usize) -> Self {
        Jet2::variable(v, index, p)
    }
    fn value(&self) -> f64 {
        self.value
    }
    fn add(&self, o: &Self) -> Self {
        Jet2::add(self, o)
    }
    fn sub(&self, o: &Self) -> Self {
        Jet2::sub(self, o)
    }
    fn mul(&self, o: &Self) -> Self {
        Jet2::mul(self, o)
    }
    fn div(&self, o: &Self) -> Self {
        Jet2::div(self, o)
    }
    fn neg(&self) -> Self {
        Jet2::neg(self)
    }
    fn powf(&self, e: f64) -> Self {
        Jet2::powf(self, e)
    }
    fn exp(&self) -> Self {
        Jet2::exp(self)
    }
    fn ln(&self) -> Self {
        Jet2::ln(self)
    }
    fn sqrt(&self) -> Self {
        Jet2::sqrt(self)
    }
    fn is_finite(&self) -> bool {
        Jet2::is_finite(self)
    }
}

fn domain(node: &Node, var: &str, reason: String) -> EvalError {
    EvalError::Domain {
        node: describe(node, var),
        reason,
    }
}

pub(crate) fn eval_node<T: Scalar>(
    node: &Node,
    x: f64,
    theta: &[f64],
    var: &str,
) -> Result<T, EvalError> {
    let p = theta.len();
    let out = match node {
        Node::Num(v) => T::lift(*v, p),
        Node::Var => T::lift(x, p),
        Node::Param(i) => T::param(theta[*i], *i, p),
        Node::Neg(a) => eval_node::<T>(a, x, theta, var)?.neg(),
        Node::Binary(op, a, b) => {
            let a = eval_node::<T>(a, x, theta, var)?;
            let b = eval_node::<T>(b, x, theta, var)?;
            match op {
                BinOp::Add => a.add(&b),
                BinOp::Sub => a.sub(&b),
                BinOp::Mul => a.mul(&b),
                BinOp::Div => {
                    if b.value() == 0.0 {
                        return Err(domain(node, var, "division by zero".into()));
                    }
                    a.div(&b)
                }
            }
        }
        Node::Pow(a, e) => {
            let base = eval_node::<T>(a, x, theta, var)?;
            let v = base.value();
            let integral = e.fract() == 0.0;
            if v < 0.0 && !integral {
                return Err(domain(
                    node,
                    var,
                    format!("negative base {v} with fractional exponent"),
                ));
            }
            if v == 0.0 && *e < 0.0 {
                return Err(domain(node, var, "zero raised to a negative power".into()));
            }
            if T::DIFFERENTIABLE && v == 0.0 && !integral && *e < 2.0 {
                return Err(domain(node, var, "power not differentiable at zero".into()));
            }
            base.powf(*e)
        }
        Node::Call(func, a) => {
            let arg = eval_node::<T>(a, x, theta, var)?;
            let v = arg.value();
            match func {
                Func::Exp => arg.exp(),
                Func::Log => {
                    if v <= 0.0 {
                        return Err(domain(node, var, format!("log of non-positive value {v}")));
                    }
                    arg.ln()
                }
                Func::Sqrt => {
                    if v < 0.0 || (T::DIFFERENTIABLE && v == 0.0) {
                        return Err(domain(node, var, format!("sqrt of value {v}")));
                    }
                    arg.sqrt()
                }
            }
        }
    };
    if !out.is_finite() {
        return Err(domain(node, var, "non-finite result".into()));
    }
    Ok(out)
}

/// Worst relative disagreement between forward-mode and finite-difference derivatives.
#[derive(Debug, Clone, Copy, PartialEq, Serialize)]
pub struct GradCheckReport {
    pub grad_rel_err: f64,
    pub hess_rel_err: f64,
}

impl GradCheckReport {
    pub fn worst(self, other: GradCheckReport) -> GradCheckReport {
        GradCheckReport {
            grad_rel_err: self.grad_rel_err.max(other.grad_rel_err),
            hess_rel_err: self.hess_rel_err.max(other.hess_rel_err),
        }
    }
}

fn rel_err(ad: &[f64], fd: &[f64]) -> f64 {
    let scale = ad.iter().fold(0.0f64, |m, v| m.max(v.abs()));
    let floor = 1e-8 * scale + f64::MIN_POSITIVE;
    ad.iter()
        .zip(fd)
        .map(|(a, f)| (a - f).abs() / a.abs().max(f.abs()).max(floor))
        .fold(0.0, f64::max)
}

/// Compares `eval_jet` derivatives with central differences.
///
/// The gradient is checked against differences of function values; the Hessian
/// against differences of the forward-mode gradient. Steps are `h * max(|t_i|, 1)`.
/// Entries are compared relative to their own magnitude, floored at `1e-8` of the
/// largest entry of the same block.
pub fn check_gradient(
    e: &Expression,
    x: f64,
    theta: &[f64],
    h: f64,
) -> Result<GradCheckReport, EvalError> {
    let p = theta.len();
    let jet = e.eval_jet(x, theta)?;
    let mut fd_grad = vec![0.0; p];
    let mut fd_hess = DMatrix::zeros(p, p);
    let mut shifted = theta.to_vec();
    for i in 0..p {
        let step = h * theta[i].abs().max(1.0);
        shifted[i] = theta[i] + step;
        let fp = e.eval(x, &shifted)?;
        let gp = e.eval_jet(x, &shifted)?.grad;
        shifted[i] = theta[i] - step;
        let fm = e.eval(x, &shifted)?;
        let gm = e.eval_jet(x, &shifted)?.grad;
        shifted[i] = theta[i];
        fd_grad[i] = (fp - fm) / (2.0 * step);
        for j in 0..p {
            fd_hess[(i, j)] = (gp[j] - gm[j]) / (2.0 * step);
        }
    }
    let fd_hess = (&fd_hess + fd_hess.transpose()) * 0.5;
    Ok(GradCheckReport {
        grad_rel_err: rel_err(jet.grad.as_slice(), &fd_grad),
        hess_rel_err: rel_err(jet.hess.as_slice(), fd_hess.as_slice()),
    })
}
