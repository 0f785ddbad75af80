//! A small arithmetic expression language over named state variables, with exact
//! symbolic differentiation.
//!
//! Grammar (usual precedence, `^` right-associative and binding tighter than unary
//! minus):
//!
//! ```text
//! expr   := term (('+' | '-') term)*
//! term   := unary (('*' | '/') unary)*
//! unary  := '-' unary | power
//! power  := atom ('^' unary)?
//! atom   := number | name | name '(' expr ')' | '(' expr ')'
//! ```
//!
//! Functions: `sin`, `cos`, `exp`, `ln`, `sqrt`. Constants: `pi`, `e`.

use std::fmt;
use std::sync::Arc;

use nalgebra::{DMatrix, DVector};
use thiserror::Error;

use crate::backstepping::{ASubCertificate, StrictFeedbackSystem};
use crate::certificate::MetricCertificate;
use crate::scalar::{lit, Real};
use crate::system::ControlAffineSystem;

#[derive(Debug, Clone, PartialEq, Eq, Error)]
pub enum ExprError {
    #[error("{source_text:?} at column {column}: {message}")]
    Parse { source_text: String, column: usize, message: String },
    #[error("dimension mismatch: {0}")]
    Dimension(String),
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Func {
    Sin,
    Cos,
    Exp,
    Ln,
    Sqrt,
}

impl Func {
    fn from_name(name: &str) -> Option<Self> {
        Some(match name {
            "sin" => Func::Sin,
            "cos" => Func::Cos,
            "exp" => Func::Exp,
            "ln" => Func::Ln,
            "sqrt" => Func::Sqrt,
            _ => return None,
        })
    }

    fn name(self) -> &'static str {
        match self {
            Func::Sin => "sin",
            Func::Cos => "cos",
            Func::Exp => "exp",
            Func::Ln => "ln",
            Func::Sqrt => "sqrt",
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub enum Expr {
    Const(f64),
    Var(usize),
    Neg(Box<Expr>),
    Add(Box<Expr>, Box<Expr>),
    Sub(Box<Expr>, Box<Expr>),
    Mul(Box<Expr>, Box<Expr>),
    Div(Box<Expr>, Box<Expr>),
    Pow(Box<Expr>, Box<Expr>),
    Call(Func, Box<Expr>),
}

use Expr::*;

fn c(v: f64) -> Expr {
    Const(v)
}

fn neg(a: Expr) -> Expr {
    match a {
        Const(v) => Const(-v),
        Neg(inner) => *inner,
        other => Neg(Box::new(other)),
    }
}

fn add(a: Expr, b: Expr) -> Expr {
    match (a, b) {
        (Const(x), Const(y)) => Const(x + y),
        (Const(0.0), e) | (e, Const(0.0)) => e,
        (a, Neg(b)) => sub(a, *b),
        (a, b) => Add(Box::new(a), Box::new(b)),
    }
}

fn sub(a: Expr, b: Expr) -> Expr {
    match (a, b) {
        (Const(x), Const(y)) => Const(x - y),
        (e, Const(0.0)) => e,
        (Const(0.0), e) => neg(e),
        (a, Neg(b)) => add(a, *b),
        (a, b) => Sub(Box::new(a), Box::new(b)),
    }
}

fn mul(a: Expr, b: Expr) -> Expr {
    match (a, b) {
        (Const(x), Const(y)) => Const(x * y),
        (Const(z), _) | (_, Const(z)) if z == 0.0 => Const(0.0),
        (Const(1.0), e) | (e, Const(1.0)) => e,
        (Const(m), e) | (e, Const(m)) if m == -1.0 => neg(e),
        (Neg(a), b) => neg(mul(*a, b)),
        (a, Neg(b)) => neg(mul(a, *b)),
        (a, b) => Mul(Box::new(a), Box::new(b)),
    }
}

fn div(a: Expr, b: Expr) -> Expr {
    match (a, b) {
        (Const(x), Const(y)) if y != 0.0 => Const(x / y),
        (Const(0.0), _) => Const(0.0),
        (e, Const(1.0)) => e,
        (a, b) => Div(Box::new(a), Box::new(b)),
    }
}

fn pow(a: Expr, b: Expr) -> Expr {
    match (a, b) {
        (Const(x), Const(y)) => Const(x.powf(y)),
        (_, Const(0.0)) => Const(1.0),
        (e, Const(1.0)) => e,
        (a, b) => Pow(Box::new(a), Box::new(b)),
    }
}

fn call(f: Func, a: Expr) -> Expr {
    Call(f, Box::new(a))
}

impl Expr {
    /// Parses `src` with `vars` naming the state coordinates in order.
    pub fn parse(src: &str, vars: &[&str]) -> Result<Expr, ExprError> {
        let mut parser = Parser { src, bytes: src.as_bytes(), pos: 0, vars };
        let e = parser.expr()?;
        parser.skip_ws();
        if parser.pos != parser.bytes.len() {
            return Err(parser.error("unexpected trailing input"));
        }
        Ok(e)
    }

    pub fn eval<T: Real>(&self, z: &[T]) -> T {
        match self {
            Const(v) => lit(*v),
            Var(i) => z[*i],
            Neg(a) => -a.eval(z),
            Add(a, b) => a.eval(z) + b.eval(z),
            Sub(a, b) => a.eval(z) - b.eval(z),
            Mul(a, b) => a.eval(z) * b.eval(z),
            Div(a, b) => a.eval(z) / b.eval(z),
            Pow(a, b) => match **b {
                Const(k) if k == k.round() && k.abs() <= 64.0 => a.eval(z).powi(k as i32),
                _ => a.eval(z).powf(b.eval(z)),
            },
            Call(f, a) => {
                let x = a.eval(z);
                match f {
                    Func::Sin => x.sin(),
                    Func::Cos => x.cos(),
                    Func::Exp => x.exp(),
                    Func::Ln => x.ln(),
                    Func::Sqrt => x.sqrt(),
                }
            }
        }
    }

    /// `∂/∂z_var`, simplified.
    pub fn diff(&self, var: usize) -> Expr {
        match self {
            Const(_) => c(0.0),
            Var(i) => c(if *i == var { 1.0 } else { 0.0 }),
            Neg(a) => neg(a.diff(var)),
            Add(a, b) => add(a.diff(var), b.diff(var)),
            Sub(a, b) => sub(a.diff(var), b.diff(var)),
            Mul(a, b) => add(mul(a.diff(var), (**b).clone()), mul((**a).clone(), b.diff(var))),
            Div(a, b) => {
                div(sub(mul(a.diff(var), (**b).clone()), mul((**a).clone(), b.diff(var))), pow((**b).clone(), c(2.0)))
            }
            Pow(a, b) => {
                let (da, db) = (a.diff(var), b.diff(var));
                if let Const(k) = **b {
                    mul(mul(c(k), pow((**a).clone(), c(k - 1.0))), da)
                } else {
                    // d(a^b) = a^b (b' ln a + b a' / a)
                    mul(
                        self.clone(),
                        add(mul(db, call(Func::Ln, (**a).clone())), div(mul((**b).clone(), da), (**a).clone())),
                    )
                }
            }
            Call(f, a) => {
                let da = a.diff(var);
                let inner = (**a).clone();
                let outer = match f {
                    Func::Sin => call(Func::Cos, inner),
                    Func::Cos => neg(call(Func::Sin, inner)),
                    Func::Exp => self.clone(),
                    Func::Ln => div(c(1.0), inner),
                    Func::Sqrt => div(c(0.5), self.clone()),
                };
                mul(outer, da)
            }
        }
    }

    pub fn is_zero(&self) -> bool {
        matches!(self, Const(v) if *v == 0.0)
    }

    /// Largest variable index referenced, if any.
    pub fn max_var(&self) -> Option<usize> {
        match self {
            Const(_) => None,
            Var(i) => Some(*i),
            Neg(a) | Call(_, a) => a.max_var(),
            Add(a, b) | Sub(a, b) | Mul(a, b) | Div(a, b) | Pow(a, b) => match (a.max_var(), b.max_var()) {
                (Some(x), Some(y)) => Some(x.max(y)),
                (x, y) => x.or(y),
            },
        }
    }

    /// Renders with variable names.
    pub fn display<'a>(&'a self, vars: &'a [&'a str]) -> impl fmt::Display + 'a {
        Shown { e: self, vars }
    }
}

struct Shown<'a> {
    e: &'a Expr,
    vars: &'a [&'a str],
}

impl fmt::Display for Shown<'_> {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        let s = |e| Shown { e, vars: self.vars };
        match self.e {
            Const(v) => write!(f, "{v}"),
            Var(i) => f.write_str(self.vars.get(*i).copied().unwrap_or("?")),
            Neg(a) => write!(f, "(-{})", s(a)),
            Add(a, b) => write!(f, "({} + {})", s(a), s(b)),
            Sub(a, b) => write!(f, "({} - {})", s(a), s(b)),
            Mul(a, b) => write!(f, "({} * {})", s(a), s(b)),
            Div(a, b) => write!(f, "({} / {})", s(a), s(b)),
            Pow(a, b) => write!(f, "({} ^ {})", s(a), s(b)),
            Call(func, a) => write!(f, "{}({})", func.name(), s(a)),
        }
    }
}

struct Parser<'a> {
    src: &'a str,
    bytes: &'a [u8],
    pos: usize,
    vars: &'a [&'a str],
}

impl Parser<'_> {
    fn error(&self, message: &str) -> ExprError {
        ExprError::Parse { source_text: self.src.to_string(), column: self.pos + 1, message: message.to_string() }
    }

    fn skip_ws(&mut self) {
        while self.pos < self.bytes.len() && self.bytes[self.pos].is_ascii_whitespace() {
            self.pos += 1;
        }
    }

    fn peek(&mut self) -> Option<u8> {
        self.skip_ws();
        self.bytes.get(self.pos).copied()
    }

    fn eat(&mut self, ch: u8) -> bool {
        if self.peek() == Some(ch) {
            self.pos += 1;
            true
        } else {
            false
        }
    }

    fn expr(&mut self) -> Result<Expr, ExprError> {
        let mut lhs = self.term()?;
        loop {
            if self.eat(b'+') {
                lhs = Add(Box::new(lhs), Box::new(self.term()?));
            } else if self.eat(b'-') {
                lhs = Sub(Box::new(lhs), Box::new(self.term()?));
            } else {
                return Ok(lhs);
            }
        }
    }

    fn term(&mut self) -> Result<Expr, ExprError> {
        let mut lhs = self.unary()?;
        loop {
            if self.eat(b'*') {
                lhs = Mul(Box::new(lhs), Box::new(self.unary()?));
            } else if self.eat(b'/') {
                lhs = Div(Box::new(lhs), Box::new(self.unary()?));
            } else {
                return Ok(lhs);
            }
        }
    }

    fn unary(&mut self) -> Result<Expr, ExprError> {
        if self.eat(b'-') {
            return Ok(Neg(Box::new(self.unary()?)));
        }
        if self.eat(b'+') {
            return self.unary();
        }
        self.power()
    }

    fn power(&mut self) -> Result<Expr, ExprError> {
        let base = self.atom()?;
        if self.eat(b'^') {
            return Ok(Pow(Box::new(base), Box::new(self.unary()?)));
        }
        Ok(base)
    }

    fn atom(&mut self) -> Result<Expr, ExprError> {
        match self.peek() {
            Some(b'(') => {
                self.pos += 1;
                let e = self.expr()?;
                if !self.eat(b')') {
                    return Err(self.error("expected ')'"));
                }
                Ok(e)
            }
            Some(ch) if ch.is_ascii_digit() || ch == b'.' => self.number(),
            Some(ch) if ch.is_ascii_alphabetic() || ch == b'_' => {
                let start = self.pos;
                while self.pos < self.bytes.len()
                    && (self.bytes[self.pos].is_ascii_alphanumeric() || self.bytes[self.pos] == b'_')
                {
                    self.pos += 1;
                }
                let name = &self.src[start..self.pos];
                if let Some(i) = self.vars.iter().position(|v| *v == name) {
                    return Ok(Var(i));
                }
                if let Some(func) = Func::from_name(name) {
                    if !self.eat(b'(') {
                        return Err(self.error("expected '(' after function name"));
                    }
                    let arg = self.expr()?;
                    if !self.eat(b')') {
                        return Err(self.error("expected ')'"));
                    }
                    return Ok(Call(func, Box::new(arg)));
                }
                match name {
                    "pi" => Ok(Const(std::f64::consts::PI)),
                    "e" => Ok(Const(std::f64::consts::E)),
                    _ => {
                        self.pos = start;
                        Err(self.error(&format!("unknown name '{name}'")))
                    }
                }
            }
            Some(_) => Err(self.error("unexpected character")),
            None => Err(self.error("unexpected end of input")),
        }
    }

    fn number(&mut self) -> Result<Expr, ExprError> {
        let start = self.pos;
        let digits = |p: &mut Self| {
            while p.pos < p.bytes.len() && p.bytes[p.pos].is_ascii_digit() {
                p.pos += 1;
            }
        };
        digits(self);
        if self.pos < self.bytes.len() && self.bytes[self.pos] == b'.' {
            self.pos += 1;
            digits(self);
        }
        if self.pos < self.bytes.len() && (self.bytes[self.pos] == b'e' || self.bytes[self.pos] == b'E') {
            let save = self.pos;
            self.pos += 1;
            if self.pos < self.bytes.len() && (self.bytes[self.pos] == b'+' || self.bytes[self.pos] == b'-') {
                self.pos += 1;
            }
            if self.pos < self.bytes.len() && self.bytes[self.pos].is_ascii_digit() {
                digits(self);
            } else {
                self.pos = save;
            }
        }
        self.src[start..self.pos].parse::<f64>().map(Const).map_err(|_| {
            self.pos = start;
            self.error("malformed number")
        })
    }
}

fn parse_all(srcs: &[String], vars: &[&str]) -> Result<Vec<Expr>, ExprError> {
    srcs.iter().map(|s| Expr::parse(s, vars)).collect()
}

fn gradient(e: &Expr, n: usize) -> Vec<Expr> {
    (0..n).map(|k| e.diff(k)).collect()
}

fn eval_vec<T: Real>(es: &[Expr], z: &DVector<T>) -> DVector<T> {
    DVector::from_iterator(es.len(), es.iter().map(|e| e.eval(z.as_slice())))
}

fn eval_mat<T: Real>(rows: usize, cols: usize, es: &[Expr], z: &DVector<T>) -> DMatrix<T> {
    DMatrix::from_row_iterator(rows, cols, es.iter().map(|e| e.eval(z.as_slice())))
}

/// Rejects expressions referencing variables beyond `n`.
fn ensure_vars(es: &[Expr], n: usize, what: &str) -> Result<(), ExprError> {
    match es.iter().filter_map(Expr::max_var).max() {
        Some(i) if i >= n => Err(ExprError::Dimension(format!("{what} references state {} of {n}", i + 1))),
        _ => Ok(()),
    }
}

/// `ż = f(z) + g(z) u` from row-major expression text.
#[derive(Debug, Clone)]
pub struct ExprSystem {
    pub state: Vec<String>,
    pub input_dim: usize,
    pub drift: Vec<Expr>,
    /// `n × p`, row-major.
    pub input: Vec<Expr>,
}

impl ExprSystem {
    pub fn parse(state: &[String], drift: &[String], input: &[Vec<String>]) -> Result<Self, ExprError> {
        let vars: Vec<&str> = state.iter().map(String::as_str).collect();
        let n = vars.len();
        if drift.len() != n || input.len() != n {
            return Err(ExprError::Dimension(format!(
                "{n} states but {} drift entries and {} input rows",
                drift.len(),
                input.len()
            )));
        }
        let p = input.first().map_or(0, Vec::len);
        if p == 0 || input.iter().any(|row| row.len() != p) {
            return Err(ExprError::Dimension("input matrix rows must share a positive length".into()));
        }
        let flat: Vec<String> = input.iter().flatten().cloned().collect();
        Ok(Self {
            state: state.to_vec(),
            input_dim: p,
            drift: parse_all(drift, &vars)?,
            input: parse_all(&flat, &vars)?,
        })
    }

    pub fn state_dim(&self) -> usize {
        self.state.len()
    }

    /// The system with its exact Jacobian.
    pub fn build<T: Real>(&self) -> ControlAffineSystem<T> {
        let (n, p) = (self.state_dim(), self.input_dim);
        let drift = Arc::new(self.drift.clone());
        let input = Arc::new(self.input.clone());
        let jac: Arc<Vec<Expr>> = Arc::new(self.drift.iter().flat_map(|f| gradient(f, n)).collect());
        ControlAffineSystem::new(n, p, move |z| eval_vec(&drift, z), move |z| eval_mat(n, p, &input, z))
            .with_jacobian(move |z| eval_mat(n, n, &jac, z))
    }

    /// `g` when it does not depend on the state.
    pub fn constant_input<T: Real>(&self) -> Option<DMatrix<T>> {
        if self.input.iter().any(|e| e.max_var().is_some()) {
            return None;
        }
        Some(eval_mat(self.state_dim(), self.input_dim, &self.input, &DVector::<T>::zeros(self.state_dim())))
    }
}

/// `(P, U, α)` from expression text; gradient, Hessian and `𝔡_v P` are symbolic.
#[derive(Debug, Clone)]
pub struct ExprCertificate {
    pub state: Vec<String>,
    pub input_dim: usize,
    /// `n × n`, row-major.
    pub metric: Vec<Expr>,
    pub potential: Expr,
    pub scaling: Vec<Expr>,
}

impl ExprCertificate {
    pub fn parse(
        state: &[String],
        metric: &[Vec<String>],
        potential: &str,
        scaling: &[String],
    ) -> Result<Self, ExprError> {
        let vars: Vec<&str> = state.iter().map(String::as_str).collect();
        let n = vars.len();
        if metric.len() != n || metric.iter().any(|row| row.len() != n) {
            return Err(ExprError::Dimension(format!("metric must be {n}×{n}")));
        }
        if scaling.is_empty() {
            return Err(ExprError::Dimension("scaling needs at least one entry".into()));
        }
        let flat: Vec<String> = metric.iter().flatten().cloned().collect();
        Ok(Self {
            state: state.to_vec(),
            input_dim: scaling.len(),
            metric: parse_all(&flat, &vars)?,
            potential: Expr::parse(potential, &vars)?,
            scaling: parse_all(scaling, &vars)?,
        })
    }

    pub fn dim(&self) -> usize {
        self.state.len()
    }

    pub fn metric_is_constant(&self) -> bool {
        self.metric.iter().all(|e| e.max_var().is_none())
    }

    pub fn build<T: Real>(&self) -> MetricCertificate<T> {
        let n = self.dim();
        let metric = Arc::new(self.metric.clone());
        let partials: Arc<Vec<Vec<Expr>>> =
            Arc::new((0..n).map(|k| self.metric.iter().map(|e| e.diff(k)).collect()).collect());
        let u = Arc::new(self.potential.clone());
        let grad = Arc::new(gradient(&self.potential, n));
        let scaling = Arc::new(self.scaling.clone());
        MetricCertificate::new(
            n,
            self.input_dim,
            move |z| eval_mat(n, n, &metric, z),
            move |z| u.eval(z.as_slice()),
            move |z| eval_vec(&grad, z),
            move |z| eval_vec(&scaling, z),
        )
        .with_metric_derivative(move |v, z| {
            let mut out = DMatrix::zeros(n, n);
            for (k, dk) in partials.iter().enumerate() {
                if v[k] != T::zero() && dk.iter().any(|e| !e.is_zero()) {
                    out += eval_mat(n, n, dk, z) * v[k];
                }
            }
            out
        })
    }

    /// Hessian of `U`.
    pub fn potential_hessian<T: Real>(&self) -> impl Fn(&DVector<T>) -> DMatrix<T> + Send + Sync + 'static {
        let n = self.dim();
        let hess: Vec<Expr> =
            (0..n).flat_map(|i| (0..n).map(move |j| (i, j))).map(|(i, j)| self.potential.diff(i).diff(j)).collect();
        move |z| eval_mat(n, n, &hess, z)
    }
}

/// Strict-feedback data `(f_a, g_a, f_b, g_b, q_a)` from expression text over the
/// full state `(z_a, z_b)`; `f_a`, `g_a`, `q_a` may only read `z_a`.
#[derive(Debug, Clone)]
pub struct ExprStrictFeedback {
    pub state: Vec<String>,
    pub f_a: Vec<Expr>,
    pub g_a: Vec<Expr>,
    pub f_b: Expr,
    pub g_b: Expr,
    pub g_b_bounds: (f64, f64),
    pub q_a: Expr,
}

impl ExprStrictFeedback {
    #[allow(clippy::too_many_arguments)]
    pub fn parse(
        state: &[String],
        f_a: &[String],
        g_a: &[String],
        f_b: &str,
        g_b: &str,
        g_b_bounds: (f64, f64),
        q_a: &str,
    ) -> Result<Self, ExprError> {
        let vars: Vec<&str> = state.iter().map(String::as_str).collect();
        let n = vars.len();
        if n < 2 || f_a.len() != n - 1 || g_a.len() != n - 1 {
            return Err(ExprError::Dimension(format!(
                "{n} states need {} entries in f_a and g_a",
                n.saturating_sub(1)
            )));
        }
        let parsed = Self {
            state: state.to_vec(),
            f_a: parse_all(f_a, &vars)?,
            g_a: parse_all(g_a, &vars)?,
            f_b: Expr::parse(f_b, &vars)?,
            g_b: Expr::parse(g_b, &vars)?,
            g_b_bounds,
            q_a: Expr::parse(q_a, &vars)?,
        };
        let mut a_parts = parsed.f_a.clone();
        a_parts.extend(parsed.g_a.iter().cloned());
        a_parts.push(parsed.q_a.clone());
        ensure_vars(&a_parts, n - 1, "a-subsystem")?;
        Ok(parsed)
    }

    pub fn na(&self) -> usize {
        self.state.len() - 1
    }

    pub fn build<T: Real>(&self) -> StrictFeedbackSystem<T> {
        let na = self.na();
        let n = na + 1;
        let f_a = Arc::new(self.f_a.clone());
        let g_a = Arc::new(self.g_a.clone());
        let f_b = Arc::new(self.f_b.clone());
        let g_b = Arc::new(self.g_b.clone());
        let q_a = Arc::new(self.q_a.clone());
        let grad_q = Arc::new(gradient(&self.q_a, na));
        let hess_q: Arc<Vec<Expr>> = Arc::new(
            (0..na).flat_map(|i| (0..na).map(move |j| (i, j))).map(|(i, j)| self.q_a.diff(i).diff(j)).collect(),
        );
        let jf: Arc<Vec<Expr>> = Arc::new(self.f_a.iter().flat_map(|f| gradient(f, na)).collect());
        let jg: Arc<Vec<Expr>> = Arc::new(self.g_a.iter().flat_map(|f| gradient(f, na)).collect());
        let gf = Arc::new(gradient(&self.f_b, n));
        let gg = Arc::new(gradient(&self.g_b, n));
        let bounds = (lit(self.g_b_bounds.0), lit(self.g_b_bounds.1));
        StrictFeedbackSystem::new(
            na,
            move |z| eval_vec(&f_a, z),
            move |z| eval_vec(&g_a, z),
            move |z| f_b.eval(z.as_slice()),
            move |z| g_b.eval(z.as_slice()),
            bounds,
            move |z| q_a.eval(z.as_slice()),
            move |z| eval_vec(&grad_q, z),
        )
        .with_hess_q_a(move |z| eval_mat(na, na, &hess_q, z))
        .with_derivatives(
            move |z| eval_mat(na, na, &jf, z),
            move |z| eval_mat(na, na, &jg, z),
            move |z| eval_vec(&gf, z),
            move |z| eval_vec(&gg, z),
        )
    }

    /// Wraps an `a`-subsystem certificate (over the `z_a` names) with its Hessian.
    pub fn a_certificate<T: Real>(
        cert: &ExprCertificate,
        q: DMatrix<T>,
        bounds: Vec<(T, T)>,
        rho: T,
    ) -> ASubCertificate<T> {
        ASubCertificate::new(cert.build::<T>().with_rho(rho), q, bounds).with_hess_u_a(cert.potential_hessian())
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use approx::assert_abs_diff_eq;

    fn vars() -> Vec<&'static str> {
        vec!["x", "y"]
    }

    fn eval(src: &str, x: f64, y: f64) -> f64 {
        Expr::parse(src, &vars()).unwrap().eval(&[x, y])
    }

    #[test]
    fn precedence_and_associativity() {
        assert_eq!(eval("1 + 2 * 3", 0.0, 0.0), 7.0);
        assert_eq!(eval("2 ^ 3 ^ 2", 0.0, 0.0), 512.0);
        assert_eq!(eval("-2 ^ 2", 0.0, 0.0), -4.0);
        assert_eq!(eval("8 / 4 / 2", 0.0, 0.0), 1.0);
        assert_eq!(eval("x - y - 1", 5.0, 2.0), 2.0);
        assert_eq!(eval("2 * (x + y)", 1.0, 2.0), 6.0);
        assert_eq!(eval("1.5e1 + .5", 0.0, 0.0), 15.5);
        assert_abs_diff_eq!(eval("sin(pi / 2) + ln(e) + sqrt(4) + exp(0) + cos(0)", 0.0, 0.0), 6.0, epsilon = 1e-15);
    }

    #[test]
    fn parse_errors_report_column() {
        let err = Expr::parse("x + foo", &vars()).unwrap_err();
        assert_eq!(
            err,
            ExprError::Parse { source_text: "x + foo".into(), column: 5, message: "unknown name 'foo'".into() }
        );
        assert!(Expr::parse("(x + 1", &vars()).is_err());
        assert!(Expr::parse("x +", &vars()).is_err());
        assert!(Expr::parse("x y", &vars()).is_err());
        assert!(Expr::parse("sin x", &vars()).is_err());
    }

    #[test]
    fn derivatives_match_finite_differences() {
        let cases = [
            "sin(y) * cos(x) - x + y",
            "x ^ 3 / (1 + y ^ 2)",
            "exp(x * y) + ln(2 + sin(x))",
            "sqrt(1 + x ^ 2) * y",
            "(2 + x) ^ y",
            "-(x - y) ^ 2",
        ];
        let (x, y) = (0.37, -0.81);
        for src in cases {
            let e = Expr::parse(src, &vars()).unwrap();
            for var in 0..2 {
                let h = 1e-6;
                let mut plus = [x, y];
                let mut minus = [x, y];
                plus[var] += h;
                minus[var] -= h;
                let fd = (e.eval(&plus) - e.eval(&minus)) / (2.0 * h);
                assert_abs_diff_eq!(e.diff(var).eval(&[x, y]), fd, epsilon = 1e-8);
            }
        }
    }

    #[test]
    fn simplification_keeps_derivatives_small() {
        let e = Expr::parse("3 * x + 2", &vars()).unwrap();
        assert_eq!(e.diff(0), Const(3.0));
        assert_eq!(e.diff(1), Const(0.0));
        let vars = vars();
        assert_eq!(Expr::parse("x * y", &vars).unwrap().diff(0).display(&vars).to_string(), "y");
    }

    #[test]
    fn expression_system_matches_registry_example() {
        let state: Vec<String> = ["z1", "z2"].map(String::from).to_vec();
        let sys = ExprSystem::parse(
            &state,
            &["-z1 + sin(z2) * cos(z1) + z2".into(), "0".into()],
            &[vec!["0".into()], vec!["2 + sin(z1)".into()]],
        )
        .unwrap()
        .build::<f64>();
        let z = DVector::from_vec(vec![0.4, -1.2]);
        assert!((sys.jacobian(&z) - sys.finite_difference_jacobian(&z)).abs().max() < 1e-8);
        assert_abs_diff_eq!(sys.input_matrix(&z)[(1, 0)], 2.0 + 0.4f64.sin(), epsilon = 1e-15);
    }

    #[test]
    fn expression_certificate_derivative() {
        let state: Vec<String> = ["x", "y"].map(String::from).to_vec();
        let cert = ExprCertificate::parse(
            &state,
            &[vec!["1 + x^2".into(), "x * y".into()], vec!["x * y".into(), "2".into()]],
            "x + y^2",
            &["1".into()],
        )
        .unwrap();
        assert!(!cert.metric_is_constant());
        let built = cert.build::<f64>();
        let z = DVector::from_vec(vec![0.5, -1.0]);
        let v = DVector::from_vec(vec![2.0, 3.0]);
        // Σ v_k ∂P/∂z_k = 2 [[2x, y], [y, 0]] + 3 [[0, x], [x, 0]].
        let expected = DMatrix::from_row_slice(2, 2, &[2.0, -2.0 + 1.5, -2.0 + 1.5, 0.0]);
        assert_abs_diff_eq!(built.metric_derivative().unwrap()(&v, &z), expected, epsilon = 1e-15);
        assert_abs_diff_eq!(built.potential_gradient(&z), DVector::from_vec(vec![1.0, -2.0]), epsilon = 1e-15);
        let hess = cert.potential_hessian::<f64>()(&z);
        assert_abs_diff_eq!(hess, DMatrix::from_row_slice(2, 2, &[0.0, 0.0, 0.0, 2.0]), epsilon = 1e-15);
    }

    #[test]
    fn strict_feedback_rejects_a_part_reading_z_b() {
        let state: Vec<String> = ["a", "b"].map(String::from).to_vec();
        let err =
            ExprStrictFeedback::parse(&state, &["b".into()], &["1".into()], "0", "1", (1.0, 1.0), "1").unwrap_err();
        assert!(matches!(err, ExprError::Dimension(_)));
    }
}
