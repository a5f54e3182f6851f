//! Symbolic operator expressions for model configuration files.
//!
//! Model JSON specifies Hamiltonian terms, jump operators, and observables
//! as strings over the configured modes, e.g. `"adag*a"`, `"2.5*(b + bdag)"`,
//! `"0.5i*sigma_minus(1)"`. Supported atoms:
//!
//! - `<mode>` / `<mode>dag`: bosonic annihilation / creation on a mode
//! - `n_<mode>`: number operator
//! - `sigma_x(k)`, `sigma_y(k)`, `sigma_z(k)`, `sigma_minus(k)`,
//!   `sigma_plus(k)`: Pauli operators on two-level mode `k` (by index)
//! - `id`: identity, `i`: the imaginary unit, numeric literals
//!
//! Grammar: sums of products with parentheses; `-` binds as in ordinary
//! arithmetic. Scalars promote to multiples of the identity when added to
//! operators.

use crate::error::{Error, Result};
use crate::models;
use crate::sparse::SparseMatrix;
use crate::C64;

/// One tensor factor of the model Hilbert space.
#[derive(Debug, Clone)]
pub struct ModeSpec {
    pub name: String,
    pub dim: usize,
}

pub struct OperatorContext {
    modes: Vec<ModeSpec>,
    dim: usize,
}

impl OperatorContext {
    pub fn new(modes: Vec<ModeSpec>) -> Result<Self> {
        if modes.is_empty() {
            return Err(Error::EmptyInput("operator context needs at least one mode".into()));
        }
        for m in &modes {
            if m.dim < 2 {
                return Err(Error::InvalidParameter(format!("mode '{}' has dimension {}", m.name, m.dim)));
            }
        }
        let dim = modes.iter().map(|m| m.dim).product();
        Ok(Self { modes, dim })
    }

    pub fn dim(&self) -> usize {
        self.dim
    }

    /// Embed a single-mode operator at mode position `k`.
    fn embed(&self, op: &SparseMatrix, k: usize) -> SparseMatrix {
        let mut out: Option<SparseMatrix> = None;
        for (m, spec) in self.modes.iter().enumerate() {
            let factor = if m == k { op.clone() } else { SparseMatrix::identity(spec.dim) };
            out = Some(match out {
                None => factor,
                Some(acc) => acc.kron(&factor),
            });
        }
        out.unwrap()
    }

    fn mode_index(&self, name: &str) -> Option<usize> {
        self.modes.iter().position(|m| m.name == name)
    }

    fn atom(&self, name: &str, arg: Option<usize>) -> Result<Value> {
        // Pauli family takes the mode index as an argument
        let pauli = |mat: SparseMatrix, k: usize| -> Result<Value> {
            let spec = self
                .modes
                .get(k)
                .ok_or_else(|| Error::Parse(format!("mode index {k} out of range")))?;
            if spec.dim != 2 {
                return Err(Error::Parse(format!("mode {k} ('{}') is not two-level", spec.name)));
            }
            Ok(Value::Op(self.embed(&mat, k)))
        };
        if let Some(k) = arg {
            return match name {
                "sigma_x" => pauli(models::pauli_x(), k),
                "sigma_y" => pauli(models::pauli_y(), k),
                "sigma_z" => pauli(models::pauli_z(), k),
                "sigma_minus" => pauli(models::sigma_minus(), k),
                "sigma_plus" => pauli(models::sigma_minus().adjoint(), k),
                _ => Err(Error::Parse(format!("unknown operator function '{name}'"))),
            };
        }
        match name {
            "i" => Ok(Value::Scalar(C64::new(0.0, 1.0))),
            "id" => Ok(Value::Op(SparseMatrix::identity(self.dim))),
            _ => {
                if let Some(rest) = name.strip_prefix("n_") {
                    if let Some(k) = self.mode_index(rest) {
                        return Ok(Value::Op(self.embed(&models::number_operator(self.modes[k].dim), k)));
                    }
                }
                if let Some(base) = name.strip_suffix("dag") {
                    if let Some(k) = self.mode_index(base) {
                        return Ok(Value::Op(self.embed(&models::annihilation(self.modes[k].dim).adjoint(), k)));
                    }
                }
                if let Some(k) = self.mode_index(name) {
                    return Ok(Value::Op(self.embed(&models::annihilation(self.modes[k].dim), k)));
                }
                Err(Error::Parse(format!("unknown operator '{name}'")))
            }
        }
    }

    /// Parse and evaluate an expression to an operator matrix.
    pub fn parse_operator(&self, text: &str) -> Result<SparseMatrix> {
        let tokens = tokenize(text)?;
        let mut p = Parser { tokens, pos: 0, ctx: self };
        let v = p.expr()?;
        if p.pos != p.tokens.len() {
            return Err(Error::Parse(format!("trailing input at token {} in '{text}'", p.pos)));
        }
        Ok(match v {
            Value::Op(m) => m,
            Value::Scalar(s) => SparseMatrix::identity(self.dim).scaled(s),
        })
    }
}

#[derive(Debug, Clone)]
enum Value {
    Scalar(C64),
    Op(SparseMatrix),
}

impl Value {
    fn mul(self, other: Value) -> Result<Value> {
        Ok(match (self, other) {
            (Value::Scalar(a), Value::Scalar(b)) => Value::Scalar(a * b),
            (Value::Scalar(a), Value::Op(m)) | (Value::Op(m), Value::Scalar(a)) => Value::Op(m.scaled(a)),
            (Value::Op(a), Value::Op(b)) => Value::Op(a.matmul(&b)?),
        })
    }

    fn add(self, other: Value, dim: usize, sign: f64) -> Result<Value> {
        let s = C64::new(sign, 0.0);
        Ok(match (self, other) {
            (Value::Scalar(a), Value::Scalar(b)) => Value::Scalar(a + s * b),
            (Value::Scalar(a), Value::Op(m)) => {
                Value::Op(SparseMatrix::identity(dim).scaled(a).add_scaled(C64::new(1.0, 0.0), &m, s)?)
            }
            (Value::Op(m), Value::Scalar(b)) => {
                Value::Op(m.add_scaled(C64::new(1.0, 0.0), &SparseMatrix::identity(dim), s * b)?)
            }
            (Value::Op(a), Value::Op(b)) => Value::Op(a.add_scaled(C64::new(1.0, 0.0), &b, s)?),
        })
    }
}

#[derive(Debug, Clone, PartialEq)]
enum Token {
    Number(f64),
    Ident(String),
    Plus,
    Minus,
    Star,
    LParen,
    RParen,
}

fn tokenize(text: &str) -> Result<Vec<Token>> {
    let mut out = Vec::new();
    let chars: Vec<char> = text.chars().collect();
    let mut i = 0;
    while i < chars.len() {
        let ch = chars[i];
        match ch {
            ' ' | '\t' => i += 1,
            '+' => {
                out.push(Token::Plus);
                i += 1;
            }
            '-' => {
                out.push(Token::Minus);
                i += 1;
            }
            '*' => {
                out.push(Token::Star);
                i += 1;
            }
            '(' => {
                out.push(Token::LParen);
                i += 1;
            }
            ')' => {
                out.push(Token::RParen);
                i += 1;
            }
            c if c.is_ascii_digit() || c == '.' => {
                let start = i;
                while i < chars.len()
                    && (chars[i].is_ascii_digit()
                        || chars[i] == '.'
                        || chars[i] == 'e'
                        || chars[i] == 'E'
                        || ((chars[i] == '+' || chars[i] == '-')
                            && i > start
                            && (chars[i - 1] == 'e' || chars[i - 1] == 'E')))
                {
                    i += 1;
                }
                let lit: String = chars[start..i].iter().collect();
                let v: f64 = lit.parse().map_err(|_| Error::Parse(format!("bad number '{lit}'")))?;
                // a trailing 'i' makes the literal imaginary: emit v * i
                out.push(Token::Number(v));
                if i < chars.len() && chars[i] == 'i' {
                    let next_is_ident = i + 1 < chars.len() && (chars[i + 1].is_alphanumeric() || chars[i + 1] == '_');
                    if !next_is_ident {
                        out.push(Token::Star);
                        out.push(Token::Ident("i".into()));
                        i += 1;
                    }
                }
            }
            c if c.is_alphabetic() || c == '_' => {
                let start = i;
                while i < chars.len() && (chars[i].is_alphanumeric() || chars[i] == '_') {
                    i += 1;
                }
                out.push(Token::Ident(chars[start..i].iter().collect()));
            }
            other => return Err(Error::Parse(format!("unexpected character '{other}'"))),
        }
    }
    Ok(out)
}

struct Parser<'a> {
    tokens: Vec<Token>,
    pos: usize,
    ctx: &'a OperatorContext,
}

impl<'a> Parser<'a> {
    fn peek(&self) -> Option<&Token> {
        self.tokens.get(self.pos)
    }

    fn next(&mut self) -> Option<Token> {
        let t = self.tokens.get(self.pos).cloned();
        if t.is_some() {
            self.pos += 1;
        }
        t
    }

    fn expr(&mut self) -> Result<Value> {
        let mut negate = false;
        if matches!(self.peek(), Some(Token::Minus)) {
            self.next();
            negate = true;
        } else if matches!(self.peek(), Some(Token::Plus)) {
            self.next();
        }
        let mut acc = self.term()?;
        if negate {
            acc = acc.mul(Value::Scalar(C64::new(-1.0, 0.0)))?;
        }
        loop {
            match self.peek() {
                Some(Token::Plus) => {
                    self.next();
                    let t = self.term()?;
                    acc = acc.add(t, self.ctx.dim, 1.0)?;
                }
                Some(Token::Minus) => {
                    self.next();
                    let t = self.term()?;
                    acc = acc.add(t, self.ctx.dim, -1.0)?;
                }
                _ => break,
            }
        }
        Ok(acc)
    }

    fn term(&mut self) -> Result<Value> {
        let mut acc = self.factor()?;
        while matches!(self.peek(), Some(Token::Star)) {
            self.next();
            let f = self.factor()?;
            acc = acc.mul(f)?;
        }
        Ok(acc)
    }

    fn factor(&mut self) -> Result<Value> {
        match self.next() {
            Some(Token::Number(v)) => Ok(Value::Scalar(C64::new(v, 0.0))),
            Some(Token::Ident(name)) => {
                if matches!(self.peek(), Some(Token::LParen)) {
                    self.next();
                    let arg = match self.next() {
                        Some(Token::Number(v)) if v.fract() == 0.0 && v >= 0.0 => v as usize,
                        other => return Err(Error::Parse(format!("expected mode index, got {other:?}"))),
                    };
                    match self.next() {
                        Some(Token::RParen) => {}
                        other => return Err(Error::Parse(format!("expected ')', got {other:?}"))),
                    }
                    self.ctx.atom(&name, Some(arg))
                } else {
                    self.ctx.atom(&name, None)
                }
            }
            Some(Token::LParen) => {
                let v = self.expr()?;
                match self.next() {
                    Some(Token::RParen) => Ok(v),
                    other => Err(Error::Parse(format!("expected ')', got {other:?}"))),
                }
            }
            other => Err(Error::Parse(format!("unexpected token {other:?}"))),
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn ctx() -> OperatorContext {
        OperatorContext::new(vec![ModeSpec { name: "a".into(), dim: 4 }]).unwrap()
    }

    #[test]
    fn number_operator_from_product() {
        let c = ctx();
        let n = c.parse_operator("adag*a").unwrap();
        let want = models::number_operator(4);
        let diff = n.add_scaled(C64::new(1.0, 0.0), &want, C64::new(-1.0, 0.0)).unwrap().max_abs();
        assert!(diff < 1e-15);
    }

    #[test]
    fn drive_with_complex_coefficient() {
        let c = ctx();
        let op = c.parse_operator("2i*(a + adag) - 0.5*n_a").unwrap();
        let a = models::annihilation(4);
        let want = a
            .add_scaled(C64::new(0.0, 2.0), &a.adjoint(), C64::new(0.0, 2.0))
            .unwrap()
            .add_scaled(C64::new(1.0, 0.0), &models::number_operator(4), C64::new(-0.5, 0.0))
            .unwrap();
        let diff = op.add_scaled(C64::new(1.0, 0.0), &want, C64::new(-1.0, 0.0)).unwrap().max_abs();
        assert!(diff < 1e-15);
    }

    #[test]
    fn two_mode_embedding() {
        let c = OperatorContext::new(vec![
            ModeSpec { name: "a".into(), dim: 3 },
            ModeSpec { name: "b".into(), dim: 2 },
        ])
        .unwrap();
        let op = c.parse_operator("a*a*bdag").unwrap();
        let a = models::annihilation(3).kron(&SparseMatrix::identity(2));
        let b = SparseMatrix::identity(3).kron(&models::annihilation(2));
        let want = a.matmul(&a).unwrap().matmul(&b.adjoint()).unwrap();
        let diff = op.add_scaled(C64::new(1.0, 0.0), &want, C64::new(-1.0, 0.0)).unwrap().max_abs();
        assert!(diff < 1e-15);
    }

    #[test]
    fn spin_operators_by_index() {
        let c = OperatorContext::new(vec![
            ModeSpec { name: "s0".into(), dim: 2 },
            ModeSpec { name: "s1".into(), dim: 2 },
        ])
        .unwrap();
        let op = c.parse_operator("sigma_z(0)*sigma_z(1)").unwrap();
        let want = models::pauli_z().kron(&models::pauli_z());
        let diff = op.add_scaled(C64::new(1.0, 0.0), &want, C64::new(-1.0, 0.0)).unwrap().max_abs();
        assert!(diff < 1e-15);
        assert!(c.parse_operator("sigma_z(5)").is_err());
    }

    #[test]
    fn scalar_promotes_to_identity_in_sums() {
        let c = ctx();
        let op = c.parse_operator("1 - adag*a").unwrap();
        assert!((op.get(0, 0) - C64::new(1.0, 0.0)).norm() < 1e-15);
        assert!((op.get(2, 2) - C64::new(-1.0, 0.0)).norm() < 1e-15);
    }

    #[test]
    fn rejects_garbage() {
        let c = ctx();
        assert!(c.parse_operator("frobnicate").is_err());
        assert!(c.parse_operator("a +").is_err());
        assert!(c.parse_operator("(a").is_err());
        assert!(c.parse_operator("a ) b").is_err());
    }
}
