use thiserror::Error;

use super::{BinOp, Func, Node};

#[derive(Debug, Clone, PartialEq, Error)]
pub enum ParseError {
    #[error("empty expression")]
    Empty,
    #[error("syntax error at position {pos}: {message}")]
    Syntax { pos: usize, message: String },
    #[error("parameter t{index} out of range [1, {p}] at position {pos}")]
    ParamOutOfRange { index: usize, p: usize, pos: usize },
    #[error("unknown identifier `{name}` at position {pos}")]
    UnknownIdentifier { name: String, pos: usize },
    #[error("exponent at position {pos} must be a constant")]
    NonConstantExponent { pos: usize },
}

#[derive(Debug, Clone, PartialEq)]
enum Tok {
    Num(f64),
    Ident(String),
    Op(char),
    LParen,
    RParen,
    End,
}

/// Recursive-descent parser.
///
/// ```text
/// expr    := term (('+' | '-') term)*
/// term    := unary (('*' | '/') unary)*
/// unary   := '-' unary | power
/// power   := primary ('^' unary)?
/// primary := number | ident | ident '(' expr ')' | '(' expr ')'
/// ```
pub(super) struct Parser<'a> {
    src: &'a str,
    pos: usize,
    tok: Tok,
    tok_pos: usize,
    p: usize,
    var: &'a str,
}

impl<'a> Parser<'a> {
    pub(super) fn new(src: &'a str, p: usize, var: &'a str) -> Self {
        Parser {
            src,
            pos: 0,
            tok: Tok::End,
            tok_pos: 0,
            p,
            var,
        }
    }

    pub(super) fn parse(mut self) -> Result<Node, ParseError> {
        if self.src.trim().is_empty() {
            return Err(ParseError::Empty);
        }
        self.advance()?;
        let node = self.expr()?;
        if self.tok != Tok::End {
            return Err(self.syntax("unexpected trailing input"));
        }
        Ok(node)
    }

    fn syntax(&self, message: &str) -> ParseError {
        ParseError::Syntax {
            pos: self.tok_pos,
            message: message.to_string(),
        }
    }

    fn advance(&mut self) -> Result<(), ParseError> {
        let bytes = self.src.as_bytes();
        while self.pos < bytes.len() && bytes[self.pos].is_ascii_whitespace() {
            self.pos += 1;
        }
        self.tok_pos = self.pos;
        if self.pos >= bytes.len() {
            self.tok = Tok::End;
            return Ok(());
        }
        let c = bytes[self.pos];
        self.tok = match c {
            b'+' | b'-' | b'*' | b'/' | b'^' => {
                self.pos += 1;
                Tok::Op(c as char)
            }
            b'(' => {
                self.pos += 1;
                Tok::LParen
            }
            b')' => {
                self.pos += 1;
                Tok::RParen
            }
            b'0'..=b'9' | b'.' => {
                let start = self.pos;
                while self.pos < bytes.len()
                    && (bytes[self.pos].is_ascii_digit() || bytes[self.pos] == b'.')
                {
                    self.pos += 1;
                }
                // exponent part: 1e-12, 2.5E3
                if self.pos < bytes.len() && (bytes[self.pos] == b'e' || bytes[self.pos] == b'E') {
                    let mut q = self.pos + 1;
                    if q < bytes.len() && (bytes[q] == b'+' || bytes[q] == b'-') {
                        q += 1;
                    }
                    if q < bytes.len() && bytes[q].is_ascii_digit() {
                        while q < bytes.len() && bytes[q].is_ascii_digit() {
                            q += 1;
                        }
                        self.pos = q;
                    }
                }
                let text = &self.src[start..self.pos];
                let v: f64 = text.parse().map_err(|_| ParseError::Syntax {
                    pos: start,
                    message: format!("malformed number `{text}`"),
                })?;
                Tok::Num(v)
            }
            c if c.is_ascii_alphabetic() || c == b'_' => {
                let start = self.pos;
                while self.pos < bytes.len()
                    && (bytes[self.pos].is_ascii_alphanumeric() || bytes[self.pos] == b'_')
                {
                    self.pos += 1;
                }
                Tok::Ident(self.src[start..self.pos].to_string())
            }
            _ => {
                let ch = self.src[self.pos..].chars().next().unwrap_or('?');
                return Err(ParseError::Syntax {
                    pos: self.pos,
                    message: format!("unexpected character `{ch}`"),
                });
            }
        };
        Ok(())
    }

    fn expr(&mut self) -> Result<Node, ParseError> {
        let mut lhs = self.term()?;
        loop {
            let op = match self.tok {
                Tok::Op('+') => BinOp::Add,
                Tok::Op('-') => BinOp::Sub,
                _ => return Ok(lhs),
            };
            self.advance()?;
            let rhs = self.term()?;
            lhs = Node::Binary(op, Box::new(lhs), Box::new(rhs));
        }
    }

    fn term(&mut self) -> Result<Node, ParseError> {
        let mut lhs = self.unary()?;
        loop {
            let op = match self.tok {
                Tok::Op('*') => BinOp::Mul,
                Tok::Op('/') => BinOp::Div,
                _ => return Ok(lhs),
            };
            self.advance()?;
            let rhs = self.unary()?;
            lhs = Node::Binary(op, Box::new(lhs), Box::new(rhs));
        }
    }

    fn unary(&mut self) -> Result<Node, ParseError> {
        if self.tok == Tok::Op('-') {
            self.advance()?;
            let inner = self.unary()?;
            return Ok(Node::Neg(Box::new(inner)));
        }
        self.power()
    }

    fn power(&mut self) -> Result<Node, ParseError> {
        let base = self.primary()?;
        if self.tok != Tok::Op('^') {
            return Ok(base);
        }
        self.advance()?;
        let exp_pos = self.tok_pos;
        let exponent = self.unary()?;
        if !exponent.is_constant() {
            return Err(ParseError::NonConstantExponent { pos: exp_pos });
        }
        let e = super::eval::eval_node::<f64>(&exponent, 0.0, &[], self.var).map_err(|err| {
            ParseError::Syntax {
                pos: exp_pos,
                message: err.to_string(),
            }
        })?;
        Ok(Node::Pow(Box::new(base), e))
    }

    fn primary(&mut self) -> Result<Node, ParseError> {
        let pos = self.tok_pos;
        match self.tok.clone() {
            Tok::Num(v) => {
                self.advance()?;
                Ok(Node::Num(v))
            }
            Tok::LParen => {
                self.advance()?;
                let inner = self.expr()?;
                if self.tok != Tok::RParen {
                    return Err(self.syntax("expected `)`"));
                }
                self.advance()?;
                Ok(inner)
            }
            Tok::Ident(name) => {
                self.advance()?;
                if self.tok == Tok::LParen {
                    let func = Func::from_name(&name)
                        .ok_or(ParseError::UnknownIdentifier { name, pos })?;
                    self.advance()?;
                    let arg = self.expr()?;
                    if self.tok != Tok::RParen {
                        return Err(self.syntax("expected `)`"));
                    }
                    self.advance()?;
                    return Ok(Node::Call(func, Box::new(arg)));
                }
                self.identifier(name, pos)
            }
            Tok::End => Err(self.syntax("unexpected end of input")),
            Tok::Op(c) => Err(self.syntax(&format!("unexpected operator `{c}`"))),
            Tok::RParen => Err(self.syntax("unexpected `)`")),
        }
    }

    fn identifier(&self, name: String, pos: usize) -> Result<Node, ParseError> {
        if name == self.var {
            return Ok(Node::Var);
        }
        if let Some(digits) = name.strip_prefix('t') {
            if !digits.is_empty() && digits.bytes().all(|b| b.is_ascii_digit()) {
                let index: usize = digits
                    .parse()
                    .map_err(|_| ParseError::UnknownIdentifier {
                        name: name.clone(),
                        pos,
                    })?;
                if index == 0 || index > self.p {
                    return Err(ParseError::ParamOutOfRange {
                        index,
                        p: self.p,
                        pos,
                    });
                }
                return Ok(Node::Param(index - 1));
            }
        }
        Err(ParseError::UnknownIdentifier { name, pos })
    }
}
