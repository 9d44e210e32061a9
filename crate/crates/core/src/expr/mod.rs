//! Scalar expressions in one design variable and a parameter vector.
//!
//! Expressions are parsed once and then evaluated either as plain `f64` or as
//! a second-order [`Jet2`] carrying the exact gradient and Hessian with respect
//! to the parameters `t1..tp`. The design variable is treated as a constant.

mod eval;
mod jet;
mod parse;

use std::fmt;
use std::str::FromStr;

pub use eval::{check_gradient, GradCheckReport, Scalar};
pub use jet::Jet2;
pub use parse::ParseError;

use thiserror::Error;

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum BinOp {
    Add,
    Sub,
    Mul,
    Div,
}

impl BinOp {
    fn symbol(self) -> char {
        match self {
            BinOp::Add => '+',
            BinOp::Sub => '-',
            BinOp::Mul => '*',
            BinOp::Div => '/',
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Func {
    Exp,
    Log,
    Sqrt,
}

impl Func {
    fn name(self) -> &'static str {
        match self {
            Func::Exp => "exp",
            Func::Log => "log",
            Func::Sqrt => "sqrt",
        }
    }

    fn from_name(name: &str) -> Option<Func> {
        match name {
            "exp" => Some(Func::Exp),
            "log" => Some(Func::Log),
            "sqrt" => Some(Func::Sqrt),
            _ => None,
        }
    }
}

/// Abstract syntax tree node. Parameter indices are stored zero-based.
#[derive(Debug, Clone, PartialEq)]
pub enum Node {
    Num(f64),
    Var,
    Param(usize),
    Neg(Box<Node>),
    Binary(BinOp, Box<Node>, Box<Node>),
    /// Power with a constant real exponent.
    Pow(Box<Node>, f64),
    Call(Func, Box<Node>),
}

impl Node {
    fn max_param(&self) -> Option<usize> {
        match self {
            Node::Num(_) | Node::Var => None,
            Node::Param(i) => Some(*i),
            Node::Neg(a) | Node::Pow(a, _) | Node::Call(_, a) => a.max_param(),
            Node::Binary(_, a, b) => match (a.max_param(), b.max_param()) {
                (Some(i), Some(j)) => Some(i.max(j)),
                (i, j) => i.or(j),
            },
        }
    }

    fn is_constant(&self) -> bool {
        match self {
            Node::Num(_) => true,
            Node::Var | Node::Param(_) => false,
            Node::Neg(a) | Node::Pow(a, _) | Node::Call(_, a) => a.is_constant(),
            Node::Binary(_, a, b) => a.is_constant() && b.is_constant(),
        }
    }

    fn write(&self, f: &mut fmt::Formatter<'_>, var: &str) -> fmt::Result {
        match self {
            Node::Num(v) => write!(f, "{v}"),
            Node::Var => f.write_str(var),
            Node::Param(i) => write!(f, "t{}", i + 1),
            Node::Neg(a) => {
                f.write_str("(-")?;
                a.write(f, var)?;
                f.write_str(")")
            }
            Node::Binary(op, a, b) => {
                f.write_str("(")?;
                a.write(f, var)?;
                write!(f, " {} ", op.symbol())?;
                b.write(f, var)?;
                f.write_str(")")
            }
            Node::Pow(a, e) => {
                f.write_str("(")?;
                a.write(f, var)?;
                if *e < 0.0 {
                    write!(f, "^(-{}))", -e)
                } else {
                    write!(f, "^{e})")
                }
            }
            Node::Call(func, a) => {
                write!(f, "{}(", func.name())?;
                a.write(f, var)?;
                f.write_str(")")
            }
        }
    }
}

/// A parsed expression together with the parameter count it was checked against.
#[derive(Debug, Clone, PartialEq)]
pub struct Expression {
    root: Node,
    p: usize,
    var: String,
}

#[derive(Debug, Clone, PartialEq, Error)]
pub enum EvalError {
    #[error("expected {expected} parameters, got {got}")]
    ThetaLength { expected: usize, got: usize },
    #[error("domain error in `{node}`: {reason}")]
    Domain { node: String, reason: String },
}

impl Expression {
    /// Parses `text` in the variable `x` with parameters `t1..tp`.
    pub fn parse(text: &str, p: usize) -> Result<Self, ParseError> {
        Self::parse_in(text, p, "x")
    }

    /// Parses with a custom name for the free variable (link functions use `mu`).
    pub fn parse_in(text: &str, p: usize, var: &str) -> Result<Self, ParseError> {
        let root = parse::Parser::new(text, p, var).parse()?;
        Ok(Expression {
            root,
            p,
            var: var.to_string(),
        })
    }

    /// Wraps an already-built tree, checking parameter bounds.
    pub fn from_node(root: Node, p: usize) -> Result<Self, ParseError> {
        if let Some(i) = root.max_param() {
            if i >= p {
                return Err(ParseError::ParamOutOfRange {
                    index: i + 1,
                    p,
                    pos: 0,
                });
            }
        }
        Ok(Expression {
            root,
            p,
            var: "x".to_string(),
        })
    }

    pub fn root(&self) -> &Node {
        &self.root
    }

    pub fn param_count(&self) -> usize {
        self.p
    }

    /// True if no parameter appears in the tree.
    pub fn is_parameter_free(&self) -> bool {
        self.root.max_param().is_none()
    }

    pub fn is_constant(&self) -> bool {
        self.root.is_constant()
    }

    pub fn eval(&self, x: f64, theta: &[f64]) -> Result<f64, EvalError> {
        self.check_theta(theta)?;
        eval::eval_node::<f64>(&self.root, x, theta, &self.var)
    }

    pub fn eval_jet(&self, x: f64, theta: &[f64]) -> Result<Jet2, EvalError> {
        self.check_theta(theta)?;
        eval::eval_node::<Jet2>(&self.root, x, theta, &self.var)
    }

    fn check_theta(&self, theta: &[f64]) -> Result<(), EvalError> {
        if theta.len() != self.p {
            return Err(EvalError::ThetaLength {
                expected: self.p,
                got: theta.len(),
            });
        }
        Ok(())
    }
}

impl fmt::Display for Expression {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        self.root.write(f, &self.var)
    }
}

impl FromStr for Expression {
    type Err = ParseError;

    /// Parses with the parameter count inferred from the largest index used.
    fn from_str(s: &str) -> Result<Self, Self::Err> {
        Self::parse(s, usize::MAX)
            .map(|e| {
                let p = e.root.max_param().map_or(0, |i| i + 1);
                Expression { p, ..e }
            })
    }
}

pub(crate) fn describe(node: &Node, var: &str) -> String {
    struct Show<'a>(&'a Node, &'a str);
    impl fmt::Display for Show<'_> {
        fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
            self.0.write(f, self.1)
        }
    }
    Show(node, var).to_string()
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    #[test]
    fn parses_michaelis_menten_mean() {
        let e = Expression::parse("t1*x/(t2+x)", 3).unwrap();
        let expected = Node::Binary(
            BinOp::Div,
            Box::new(Node::Binary(
                BinOp::Mul,
                Box::new(Node::Param(0)),
                Box::new(Node::Var),
            )),
            Box::new(Node::Binary(
                BinOp::Add,
                Box::new(Node::Param(1)),
                Box::new(Node::Var),
            )),
        );
        assert_eq!(e.root(), &expected);
        assert_eq!(e.to_string(), "((t1 * x) / (t2 + x))");
    }

    #[test]
    fn single_variable() {
        let e = Expression::parse("x", 1).unwrap();
        assert_eq!(e.root(), &Node::Var);
        assert_eq!(e.eval(0.0, &[1.0]).unwrap(), 0.0);
    }

    #[test]
    fn parameter_out_of_range() {
        let err = Expression::parse("t4", 3).unwrap_err();
        assert!(matches!(err, ParseError::ParamOutOfRange { index: 4, p: 3, .. }));
        assert!(matches!(
            Expression::parse("t0", 3).unwrap_err(),
            ParseError::ParamOutOfRange { index: 0, .. }
        ));
    }

    #[test]
    fn precedence_and_associativity() {
        let e = Expression::parse("-x^2", 0).unwrap();
        assert_eq!(e.eval(3.0, &[]).unwrap(), -9.0);
        let e = Expression::parse("2^3^2", 0).unwrap();
        assert_eq!(e.eval(0.0, &[]).unwrap(), 512.0);
        let e = Expression::parse("8 - 3 - 2", 0).unwrap();
        assert_eq!(e.eval(0.0, &[]).unwrap(), 3.0);
        let e = Expression::parse("8 / 4 / 2", 0).unwrap();
        assert_eq!(e.eval(0.0, &[]).unwrap(), 1.0);
        let e = Expression::parse(" 1 +2* x ", 0).unwrap();
        assert_eq!(e.eval(2.0, &[]).unwrap(), 5.0);
        let e = Expression::parse("x^-1", 0).unwrap();
        assert_eq!(e.eval(4.0, &[]).unwrap(), 0.25);
        assert_eq!(e.to_string(), "(x^(-1))");
    }

    #[test]
    fn syntax_errors_carry_position() {
        match Expression::parse("t1 * (x + ", 1).unwrap_err() {
            ParseError::Syntax { pos, .. } => assert_eq!(pos, 10),
            other => panic!("unexpected {other:?}"),
        }
        assert!(matches!(
            Expression::parse("foo(x)", 1).unwrap_err(),
            ParseError::UnknownIdentifier { .. }
        ));
        assert!(matches!(
            Expression::parse("x^t1", 1).unwrap_err(),
            ParseError::NonConstantExponent { .. }
        ));
        assert!(matches!(Expression::parse("  ", 1).unwrap_err(), ParseError::Empty));
        assert!(matches!(
            Expression::parse("x y", 1).unwrap_err(),
            ParseError::Syntax { pos: 2, .. }
        ));
    }

    #[test]
    fn eval_examples() {
        let mu = Expression::parse("t1*x/(t2+x)", 3).unwrap();
        let v = mu.eval(1.1, &[3.0, 1.7, 0.1]).unwrap();
        assert!((v - 3.3 / 2.8).abs() < 1e-12);
        assert!((v - 1.178571).abs() < 1e-6);
        let var = Expression::parse("exp(-t3*x)", 3).unwrap();
        let v = var.eval(10.0, &[3.0, 1.7, 0.1]).unwrap();
        assert!((v - (-1.0f64).exp()).abs() < 1e-15);
    }

    #[test]
    fn domain_errors() {
        let e = Expression::parse("log(x - 1)", 0).unwrap();
        match e.eval(0.5, &[]).unwrap_err() {
            EvalError::Domain { node, .. } => assert_eq!(node, "log((x - 1))"),
            other => panic!("unexpected {other:?}"),
        }
        let e = Expression::parse("1/(x - 1)", 0).unwrap();
        assert!(matches!(e.eval(1.0, &[]), Err(EvalError::Domain { .. })));
        let e = Expression::parse("sqrt(x)", 0).unwrap();
        assert!(matches!(e.eval(-1.0, &[]), Err(EvalError::Domain { .. })));
        let e = Expression::parse("t1", 1).unwrap();
        assert!(matches!(e.eval(0.0, &[]), Err(EvalError::ThetaLength { .. })));
    }

    fn arb_node(p: usize) -> impl Strategy<Value = Node> {
        let leaf = prop_oneof![
            (0u32..1000).prop_map(|v| Node::Num(v as f64 / 8.0)),
            Just(Node::Var),
            (0..p).prop_map(Node::Param),
        ];
        leaf.prop_recursive(5, 40, 2, |inner| {
            prop_oneof![
                inner.clone().prop_map(|a| Node::Neg(Box::new(a))),
                (
                    prop_oneof![
                        Just(BinOp::Add),
                        Just(BinOp::Sub),
                        Just(BinOp::Mul),
                        Just(BinOp::Div)
                    ],
                    inner.clone(),
                    inner.clone()
                )
                    .prop_map(|(op, a, b)| Node::Binary(op, Box::new(a), Box::new(b))),
                (inner.clone(), -6i32..6).prop_map(|(a, e)| Node::Pow(Box::new(a), e as f64 / 2.0)),
                (
                    prop_oneof![Just(Func::Exp), Just(Func::Log), Just(Func::Sqrt)],
                    inner
                )
                    .prop_map(|(f, a)| Node::Call(f, Box::new(a))),
            ]
        })
    }

    proptest! {
        #[test]
        fn print_parse_round_trip(node in arb_node(3)) {
            let e = Expression::from_node(node, 3).unwrap();
            let printed = e.to_string();
            let back = Expression::parse(&printed, 3).unwrap();
            prop_assert_eq!(back.root(), e.root());
        }
    }
}
