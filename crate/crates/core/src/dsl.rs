//! Input DSL: scalars, operators, problem files, and the matching printers.
//!
//! Grammar sketch (statements end with `;`, blocks use `{}`):
//!
//! ```text
//! vars x, y;
//! params nu, p1;
//! ops X1 = Dx, X2 = Dy, X3 = Dx + Dy;
//! system { X1(u1) = u1 + 2*u2 + u3; X2(u2) = -6*u1 + u2 + 2*u3; ... }
//! equation { Dx*Dy - 2/(x + y)^2 }
//! firstorder { Dx(v1) = 2*Dy(v1) + v2; Dx(v2) = ...; }
//! coords { xbar = x - y; ybar = grad(-1, 1/x); }
//! config { max_depth = 4; chain_max = 10:10; pivots = all; verify = true; }
//! ```
//!
//! Operators are entered as expanded monomial sums `coef*Dx^i*Dy^j` with the
//! scalar factors first and `Dx` before `Dy`; composition-style input such as
//! `Dy*Dx` or `X1*X2` is a syntax error.

use num::bigint::BigInt;
use num::rational::BigRational;
use std::collections::BTreeMap;
use std::fmt;

use crate::charform::CharSystem;
use crate::expr::scalar::Scalar;
use crate::expr::solution::{CharVar, ChartFrame, SolutionExpr};
use crate::expr::vars::{VarSpec, Vars};
use crate::lpdo::{CharOperator, Lpdo};

#[derive(Debug, Clone, PartialEq)]
pub struct ParseError {
    pub line: usize,
    pub col: usize,
    pub message: String,
}

impl fmt::Display for ParseError {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "{}:{}: {}", self.line, self.col, self.message)
    }
}

impl std::error::Error for ParseError {}

// ---------------------------------------------------------------------------
// tokens
// ---------------------------------------------------------------------------

#[derive(Debug, Clone, PartialEq)]
enum Tok {
    Ident(String),
    Int(BigInt),
    Punct(char),
}

#[derive(Debug, Clone)]
struct Spanned {
    tok: Tok,
    line: usize,
    col: usize,
}

fn tokenize(text: &str) -> Result<Vec<Spanned>, ParseError> {
    let mut out = Vec::new();
    let mut line = 1usize;
    let mut col = 1usize;
    let mut chars = text.chars().peekable();
    while let Some(&c) = chars.peek() {
        let (tl, tc) = (line, col);
        let bump = |c: char, line: &mut usize, col: &mut usize| {
            if c == '\n' {
                *line += 1;
                *col = 1;
            } else {
                *col += 1;
            }
        };
        if c.is_whitespace() {
            chars.next();
            bump(c, &mut line, &mut col);
            continue;
        }
        if c == '#' {
            while let Some(&c2) = chars.peek() {
                chars.next();
                bump(c2, &mut line, &mut col);
                if c2 == '\n' {
                    break;
                }
            }
            continue;
        }
        if c.is_ascii_alphabetic() || c == '_' {
            let mut s = String::new();
            while let Some(&c2) = chars.peek() {
                if c2.is_ascii_alphanumeric() || c2 == '_' {
                    s.push(c2);
                    chars.next();
                    bump(c2, &mut line, &mut col);
                } else {
                    break;
                }
            }
            out.push(Spanned {
                tok: Tok::Ident(s),
                line: tl,
                col: tc,
            });
            continue;
        }
        if c.is_ascii_digit() {
            let mut s = String::new();
            while let Some(&c2) = chars.peek() {
                if c2.is_ascii_digit() {
                    s.push(c2);
                    chars.next();
                    bump(c2, &mut line, &mut col);
                } else {
                    break;
                }
            }
            out.push(Spanned {
                tok: Tok::Int(s.parse().unwrap()),
                line: tl,
                col: tc,
            });
            continue;
        }
        if "+-*/^()[]{},;=:'".contains(c) {
            chars.next();
            bump(c, &mut line, &mut col);
            out.push(Spanned {
                tok: Tok::Punct(c),
                line: tl,
                col: tc,
            });
            continue;
        }
        return Err(ParseError {
            line: tl,
            col: tc,
            message: format!("unexpected character `{c}`"),
        });
    }
    Ok(out)
}

// ---------------------------------------------------------------------------
// parser core
// ---------------------------------------------------------------------------

/// Coordinate environment available when parsing solution expressions.
#[derive(Debug, Clone, Default)]
pub struct CoordEnv {
    pub vars_map: BTreeMap<String, CharVar>,
    pub frames: BTreeMap<String, ChartFrame>,
}

struct Parser {
    toks: Vec<Spanned>,
    pos: usize,
}

impl Parser {
    fn new(text: &str) -> Result<Parser, ParseError> {
        Ok(Parser {
            toks: tokenize(text)?,
            pos: 0,
        })
    }

    fn peek(&self) -> Option<&Tok> {
        self.toks.get(self.pos).map(|s| &s.tok)
    }

    fn peek2(&self) -> Option<&Tok> {
        self.toks.get(self.pos + 1).map(|s| &s.tok)
    }

    fn here(&self) -> (usize, usize) {
        self.toks
            .get(self.pos.min(self.toks.len().saturating_sub(1)))
            .map(|s| (s.line, s.col))
            .unwrap_or((1, 1))
    }

    fn err<T>(&self, msg: impl Into<String>) -> Result<T, ParseError> {
        let (line, col) = self.here();
        Err(ParseError {
            line,
            col,
            message: msg.into(),
        })
    }

    fn next(&mut self) -> Option<Tok> {
        let t = self.toks.get(self.pos).map(|s| s.tok.clone());
        self.pos += 1;
        t
    }

    fn eat_punct(&mut self, c: char) -> Result<(), ParseError> {
        match self.peek() {
            Some(Tok::Punct(p)) if *p == c => {
                self.pos += 1;
                Ok(())
            }
            other => self.err(format!("expected `{c}`, found {other:?}")),
        }
    }

    fn try_punct(&mut self, c: char) -> bool {
        if matches!(self.peek(), Some(Tok::Punct(p)) if *p == c) {
            self.pos += 1;
            true
        } else {
            false
        }
    }

    fn eat_ident(&mut self) -> Result<String, ParseError> {
        match self.peek().cloned() {
            Some(Tok::Ident(s)) => {
                self.pos += 1;
                Ok(s)
            }
            other => self.err(format!("expected identifier, found {other:?}")),
        }
    }

    fn eat_keyword(&mut self, kw: &str) -> Result<(), ParseError> {
        let s = self.eat_ident()?;
        if s == kw {
            Ok(())
        } else {
            self.err(format!("expected `{kw}`, found `{s}`"))
        }
    }

    fn at_end(&self) -> bool {
        self.pos >= self.toks.len()
    }

    fn eat_int(&mut self) -> Result<BigInt, ParseError> {
        let neg = self.try_punct('-');
        match self.next() {
            Some(Tok::Int(i)) => Ok(if neg { -i } else { i }),
            other => self.err(format!("expected integer, found {other:?}")),
        }
    }

    // ---- scalar expressions ------------------------------------------------

    fn scalar_expr(&mut self, vars: &Vars) -> Result<Scalar, ParseError> {
        let mut acc = self.scalar_term(vars)?;
        loop {
            if self.try_punct('+') {
                acc = acc.add(&self.scalar_term(vars)?);
            } else if self.try_punct('-') {
                acc = acc.sub(&self.scalar_term(vars)?);
            } else {
                return Ok(acc);
            }
        }
    }

    fn scalar_term(&mut self, vars: &Vars) -> Result<Scalar, ParseError> {
        let mut acc = self.scalar_unary(vars)?;
        loop {
            if self.try_punct('*') {
                acc = acc.mul(&self.scalar_unary(vars)?);
            } else if self.try_punct('/') {
                let rhs = self.scalar_unary(vars)?;
                acc = match acc.div(&rhs) {
                    Ok(v) => v,
                    Err(_) => return self.err("division by zero"),
                };
            } else {
                return Ok(acc);
            }
        }
    }

    fn scalar_unary(&mut self, vars: &Vars) -> Result<Scalar, ParseError> {
        if self.try_punct('-') {
            return Ok(self.scalar_unary(vars)?.neg());
        }
        self.scalar_power(vars)
    }

    fn scalar_power(&mut self, vars: &Vars) -> Result<Scalar, ParseError> {
        let base = self.scalar_atom(vars)?;
        if self.try_punct('^') {
            let e = self.eat_int()?;
            let e: i64 = e.to_string().parse().map_err(|_| ParseError {
                line: 0,
                col: 0,
                message: "exponent too large".into(),
            })?;
            return match base.pow(e) {
                Ok(v) => Ok(v),
                Err(_) => self.err("zero to a negative power"),
            };
        }
        Ok(base)
    }

    fn scalar_atom(&mut self, vars: &Vars) -> Result<Scalar, ParseError> {
        match self.peek().cloned() {
            Some(Tok::Int(i)) => {
                self.pos += 1;
                Ok(Scalar::rational(vars, BigRational::from(i)))
            }
            Some(Tok::Ident(name)) => match Scalar::named(vars, &name) {
                Some(s) => {
                    self.pos += 1;
                    Ok(s)
                }
                None => self.err(format!("undeclared name `{name}`")),
            },
            Some(Tok::Punct('(')) => {
                self.pos += 1;
                let e = self.scalar_expr(vars)?;
                self.eat_punct(')')?;
                Ok(e)
            }
            other => self.err(format!("expected scalar atom, found {other:?}")),
        }
    }

    // ---- operator expressions ----------------------------------------------

    fn lpdo_expr(&mut self, vars: &Vars) -> Result<Lpdo, ParseError> {
        let mut acc = self.lpdo_term(vars, false)?;
        loop {
            if self.try_punct('+') {
                acc = acc.add(&self.lpdo_term(vars, false)?);
            } else if self.try_punct('-') {
                acc = acc.add(&self.lpdo_term(vars, true)?);
            } else {
                return Ok(acc);
            }
        }
    }

    /// One monomial term `coef * Dx^i * Dy^j`; scalar factors must come
    /// first, each derivative symbol at most once, `Dx` before `Dy`.
    fn lpdo_term(&mut self, vars: &Vars, negated: bool) -> Result<Lpdo, ParseError> {
        let dx_name = format!("D{}", vars.first);
        let dy_name = format!("D{}", vars.second);
        let mut coeff = if negated {
            Scalar::int(vars, -1)
        } else {
            Scalar::one(vars)
        };
        let mut dx_pow: Option<u32> = None;
        let mut dy_pow: Option<u32> = None;
        let mut dividing = false;
        loop {
            let is_d = matches!(self.peek(), Some(Tok::Ident(s)) if *s == dx_name || *s == dy_name);
            if is_d {
                if dividing {
                    return self.err("cannot divide by a derivative symbol");
                }
                let name = self.eat_ident()?;
                let mut e = 1u32;
                if self.try_punct('^') {
                    let i = self.eat_int()?;
                    e = i.to_string().parse().map_err(|_| ParseError {
                        line: 0,
                        col: 0,
                        message: "derivative exponent must be a small positive integer".into(),
                    })?;
                }
                if name == dx_name {
                    if dx_pow.is_some() || dy_pow.is_some() {
                        return self.err(
                            "operator composition is not allowed; enter operators as \
                             expanded monomial sums coef*Dx^i*Dy^j",
                        );
                    }
                    dx_pow = Some(e);
                } else {
                    if dy_pow.is_some() {
                        return self.err(
                            "operator composition is not allowed; enter operators as \
                             expanded monomial sums coef*Dx^i*Dy^j",
                        );
                    }
                    dy_pow = Some(e);
                }
            } else {
                if dx_pow.is_some() || dy_pow.is_some() {
                    return self.err(
                        "scalar factors must precede the derivative symbols in a monomial",
                    );
                }
                let s = self.scalar_power(vars)?;
                if dividing {
                    coeff = match coeff.div(&s) {
                        Ok(v) => v,
                        Err(_) => return self.err("division by zero"),
                    };
                } else {
                    coeff = coeff.mul(&s);
                }
            }
            if self.try_punct('*') {
                dividing = false;
            } else if self.try_punct('/') {
                dividing = true;
            } else {
                break;
            }
        }
        Ok(Lpdo::monomial(
            vars,
            dx_pow.unwrap_or(0),
            dy_pow.unwrap_or(0),
            coeff,
        ))
    }

    /// First-order operator expression (for `ops` definitions): an LPDO of
    /// order <= 1 with no constant term.
    fn char_op_expr(&mut self, vars: &Vars) -> Result<CharOperator, ParseError> {
        let op = self.lpdo_expr(vars)?;
        if op.order() != 1 || !op.coeff(0, 0).is_zero() {
            return self.err("characteristic operators must be m*Dx + n*Dy");
        }
        let m = op.coeff(1, 0);
        let n = op.coeff(0, 1);
        if m.is_zero() && n.is_zero() {
            return self.err("zero operator");
        }
        Ok(CharOperator::new(m, n))
    }

    // ---- solution expressions ----------------------------------------------

    fn solution_expr(&mut self, vars: &Vars, env: &CoordEnv) -> Result<SolutionExpr, ParseError> {
        let mut acc = self.solution_term(vars, env)?;
        loop {
            if self.try_punct('+') {
                acc = acc.add(&self.solution_term(vars, env)?);
            } else if self.try_punct('-') {
                acc = acc.sub(&self.solution_term(vars, env)?);
            } else {
                return Ok(acc);
            }
        }
    }

    fn solution_term(&mut self, vars: &Vars, env: &CoordEnv) -> Result<SolutionExpr, ParseError> {
        let mut acc = self.solution_unary(vars, env)?;
        loop {
            if self.try_punct('*') {
                acc = acc.mul(&self.solution_unary(vars, env)?);
            } else if self.try_punct('/') {
                let rhs = self.solution_unary(vars, env)?;
                match rhs {
                    SolutionExpr::Scalar(s) => {
                        let inv = match s.inv() {
                            Ok(v) => v,
                            Err(_) => return self.err("division by zero"),
                        };
                        acc = acc.mul_scalar(&inv);
                    }
                    _ => return self.err("division only by scalar subexpressions"),
                }
            } else {
                return Ok(acc);
            }
        }
    }

    fn solution_unary(&mut self, vars: &Vars, env: &CoordEnv) -> Result<SolutionExpr, ParseError> {
        if self.try_punct('-') {
            return Ok(self.solution_unary(vars, env)?.neg());
        }
        let base = self.solution_atom(vars, env)?;
        if self.try_punct('^') {
            let e = self.eat_int()?;
            let e: i64 = e.to_string().parse().map_err(|_| ParseError {
                line: 0,
                col: 0,
                message: "exponent too large".into(),
            })?;
            if let SolutionExpr::Scalar(s) = &base {
                return match s.pow(e) {
                    Ok(v) => Ok(SolutionExpr::Scalar(v)),
                    Err(_) => self.err("zero to a negative power"),
                };
            }
            return Ok(SolutionExpr::Pow(Box::new(base), e));
        }
        Ok(base)
    }

    fn solution_atom(&mut self, vars: &Vars, env: &CoordEnv) -> Result<SolutionExpr, ParseError> {
        match self.peek().cloned() {
            Some(Tok::Int(i)) => {
                self.pos += 1;
                Ok(SolutionExpr::Scalar(Scalar::rational(
                    vars,
                    BigRational::from(i),
                )))
            }
            Some(Tok::Punct('(')) => {
                self.pos += 1;
                let e = self.solution_expr(vars, env)?;
                self.eat_punct(')')?;
                Ok(e)
            }
            Some(Tok::Ident(name)) => {
                if name == "exp" && matches!(self.peek2(), Some(Tok::Punct('('))) {
                    self.pos += 1;
                    self.eat_punct('(')?;
                    let arg = self.solution_expr(vars, env)?;
                    self.eat_punct(')')?;
                    return Ok(SolutionExpr::exp(arg));
                }
                if name == "int" && matches!(self.peek2(), Some(Tok::Punct('['))) {
                    self.pos += 1;
                    self.eat_punct('[')?;
                    let frame = if let Some(Tok::Ident(dir)) = self.peek().cloned() {
                        if let Some(fr) = env.frames.get(&dir) {
                            self.pos += 1;
                            fr.clone()
                        } else {
                            let op = self.char_op_expr(vars)?;
                            ChartFrame::constant(op)
                        }
                    } else {
                        let op = self.char_op_expr(vars)?;
                        ChartFrame::constant(op)
                    };
                    self.eat_punct(']')?;
                    self.eat_punct('(')?;
                    let integrand = self.solution_expr(vars, env)?;
                    self.eat_punct(')')?;
                    return Ok(SolutionExpr::integral(integrand, frame));
                }
                // function atom: ident primes '(' arg ')'
                let mut order = 0usize;
                let mut look = self.pos + 1;
                while matches!(self.toks.get(look).map(|s| &s.tok), Some(Tok::Punct('\''))) {
                    order += 1;
                    look += 1;
                }
                if matches!(self.toks.get(look).map(|s| &s.tok), Some(Tok::Punct('(')))
                    && Scalar::named(vars, &name).is_none()
                    && !env.vars_map.contains_key(&name)
                {
                    self.pos = look + 1;
                    // argument: coordinate name or scalar expression
                    let var = if let Some(Tok::Ident(arg)) = self.peek().cloned() {
                        if env.vars_map.contains_key(&arg)
                            && matches!(self.peek2(), Some(Tok::Punct(')')))
                        {
                            self.pos += 1;
                            env.vars_map[&arg].clone()
                        } else {
                            CharVar::Linear(self.scalar_expr(vars)?)
                        }
                    } else {
                        CharVar::Linear(self.scalar_expr(vars)?)
                    };
                    self.eat_punct(')')?;
                    return Ok(SolutionExpr::Func {
                        id: name,
                        order: order as u32,
                        var,
                    });
                }
                if let Some(s) = Scalar::named(vars, &name) {
                    self.pos += 1;
                    return Ok(SolutionExpr::Scalar(s));
                }
                self.err(format!("undeclared name `{name}`"))
            }
            other => self.err(format!("expected expression, found {other:?}")),
        }
    }
}

// ---------------------------------------------------------------------------
// public entry points
// ---------------------------------------------------------------------------

pub fn parse_scalar(vars: &Vars, text: &str) -> Result<Scalar, ParseError> {
    let mut p = Parser::new(text)?;
    let s = p.scalar_expr(vars)?;
    if !p.at_end() {
        return p.err("trailing input after scalar expression");
    }
    Ok(s)
}

pub fn parse_lpdo(vars: &Vars, text: &str) -> Result<Lpdo, ParseError> {
    let mut p = Parser::new(text)?;
    let op = p.lpdo_expr(vars)?;
    if !p.at_end() {
        return p.err("trailing input after operator expression");
    }
    Ok(op)
}

pub fn parse_char_operator(vars: &Vars, text: &str) -> Result<CharOperator, ParseError> {
    let mut p = Parser::new(text)?;
    let op = p.char_op_expr(vars)?;
    if !p.at_end() {
        return p.err("trailing input after operator expression");
    }
    Ok(op)
}

pub fn parse_solution_expr(
    vars: &Vars,
    text: &str,
    env: &CoordEnv,
) -> Result<SolutionExpr, ParseError> {
    let mut p = Parser::new(text)?;
    let e = p.solution_expr(vars, env)?;
    if !p.at_end() {
        return p.err("trailing input after expression");
    }
    Ok(e)
}

// ---------------------------------------------------------------------------
// problem files
// ---------------------------------------------------------------------------

#[derive(Debug, Clone)]
pub enum ProblemKind {
    Equation { operator: Lpdo, unknown: String },
    FirstOrder {
        a: Vec<Vec<Scalar>>,
        b: Vec<Vec<Scalar>>,
        unknowns: Vec<String>,
    },
    System(CharSystem),
}

/// User-supplied characteristic coordinates: `first` is annihilated by the
/// second characteristic direction (`X2 xbar = 0`), `second` by the first.
#[derive(Debug, Clone)]
pub struct CoordPair {
    pub xbar: (String, CharVar),
    pub ybar: (String, CharVar),
}

#[derive(Debug, Clone, Default, PartialEq)]
pub struct ConfigOverrides {
    pub max_depth: Option<usize>,
    pub chain_max: Option<(usize, usize)>,
    pub pivots: Option<String>,
    pub verify: Option<bool>,
    pub points: Option<usize>,
    pub seed: Option<u64>,
}

#[derive(Debug, Clone)]
pub struct ProblemFile {
    pub vars: Vars,
    pub op_names: Vec<(String, CharOperator)>,
    pub problem: ProblemKind,
    pub coords: Option<CoordPair>,
    pub config: ConfigOverrides,
}

pub fn parse_problem(text: &str) -> Result<ProblemFile, ParseError> {
    let mut p = Parser::new(text)?;
    // vars statement must come first
    p.eat_keyword("vars")?;
    let first = p.eat_ident()?;
    p.eat_punct(',')?;
    let second = p.eat_ident()?;
    p.eat_punct(';')?;
    let mut params: Vec<String> = Vec::new();
    if matches!(p.peek(), Some(Tok::Ident(s)) if s == "params") {
        p.eat_keyword("params")?;
        loop {
            params.push(p.eat_ident()?);
            if !p.try_punct(',') {
                break;
            }
        }
        p.eat_punct(';')?;
    }
    let spec = VarSpec {
        first,
        second,
        params,
    };
    if let Err(e) = spec.validate() {
        return p.err(e);
    }
    let vars: Vars = std::sync::Arc::new(spec);

    let mut op_names: Vec<(String, CharOperator)> = Vec::new();
    let mut problem: Option<ProblemKind> = None;
    let mut coords: Option<CoordPair> = None;
    let mut config = ConfigOverrides::default();

    while !p.at_end() {
        let kw = p.eat_ident()?;
        match kw.as_str() {
            "ops" => {
                loop {
                    let name = p.eat_ident()?;
                    p.eat_punct('=')?;
                    let op = p.char_op_expr(&vars)?;
                    op_names.push((name, op));
                    if !p.try_punct(',') {
                        break;
                    }
                }
                p.eat_punct(';')?;
            }
            "equation" => {
                if problem.is_some() {
                    return p.err("exactly one problem block is allowed");
                }
                p.eat_punct('{')?;
                let op = p.lpdo_expr(&vars)?;
                p.eat_punct('}')?;
                problem = Some(ProblemKind::Equation {
                    operator: op,
                    unknown: "u".to_string(),
                });
            }
            "firstorder" => {
                if problem.is_some() {
                    return p.err("exactly one problem block is allowed");
                }
                problem = Some(parse_firstorder_block(&mut p, &vars)?);
            }
            "system" => {
                if problem.is_some() {
                    return p.err("exactly one problem block is allowed");
                }
                problem = Some(parse_system_block(&mut p, &vars, &op_names)?);
            }
            "coords" => {
                coords = Some(parse_coords_block(&mut p, &vars)?);
            }
            "config" => {
                parse_config_block(&mut p, &mut config)?;
            }
            other => {
                return p.err(format!("unknown statement `{other}`"));
            }
        }
    }
    let Some(problem) = problem else {
        return Err(ParseError {
            line: 1,
            col: 1,
            message: "missing problem block (equation/firstorder/system)".into(),
        });
    };
    Ok(ProblemFile {
        vars,
        op_names,
        problem,
        coords,
        config,
    })
}

fn parse_firstorder_block(p: &mut Parser, vars: &Vars) -> Result<ProblemKind, ParseError> {
    p.eat_punct('{')?;
    let dx_name = format!("D{}", vars.first);
    let dy_name = format!("D{}", vars.second);
    // collect equations Dx(uk) = rhs
    let mut rows: Vec<(String, Vec<(Option<String>, String, Scalar)>)> = Vec::new();
    while !p.try_punct('}') {
        let head = p.eat_ident()?;
        if head != dx_name {
            return p.err(format!(
                "firstorder equations must be solved for the {}-derivatives: \
                 left-hand side must be {dx_name}(unknown) (the input can not be put into \
                 the standard form v_{} = a v_{} + b v)",
                vars.first, vars.first, vars.second
            ));
        }
        p.eat_punct('(')?;
        let lhs = p.eat_ident()?;
        p.eat_punct(')')?;
        p.eat_punct('=')?;
        // rhs: sum of terms coef * [Dy](uk) | coef * uk
        let mut terms: Vec<(Option<String>, String, Scalar)> = Vec::new();
        let mut sign = if p.try_punct('-') { -1i64 } else { 1 };
        loop {
            let mut coeff = Scalar::int(vars, sign);
            // factors
            let mut deriv: Option<String> = None;
            let mut unknown: Option<String> = None;
            let mut dividing = false;
            loop {
                match p.peek().cloned() {
                    Some(Tok::Ident(name)) if name == dy_name && !dividing => {
                        p.pos += 1;
                        p.eat_punct('(')?;
                        let u = p.eat_ident()?;
                        p.eat_punct(')')?;
                        deriv = Some(dy_name.clone());
                        unknown = Some(u);
                    }
                    Some(Tok::Ident(name))
                        if Scalar::named(vars, &name).is_none()
                            && unknown.is_none()
                            && !dividing =>
                    {
                        p.pos += 1;
                        unknown = Some(name);
                    }
                    _ => {
                        let s = p.scalar_power(vars)?;
                        if dividing {
                            coeff = match coeff.div(&s) {
                                Ok(v) => v,
                                Err(_) => return p.err("division by zero"),
                            };
                        } else {
                            coeff = coeff.mul(&s);
                        }
                    }
                }
                if p.try_punct('*') {
                    dividing = false;
                } else if p.try_punct('/') {
                    dividing = true;
                } else {
                    break;
                }
            }
            let Some(u) = unknown else {
                return p.err("each term must reference exactly one unknown");
            };
            terms.push((deriv, u, coeff));
            if p.try_punct('+') {
                sign = 1;
            } else if p.try_punct('-') {
                sign = -1;
            } else {
                break;
            }
        }
        p.eat_punct(';')?;
        rows.push((lhs, terms));
    }
    let unknowns: Vec<String> = rows.iter().map(|(u, _)| u.clone()).collect();
    let n = unknowns.len();
    {
        let mut sorted = unknowns.clone();
        sorted.sort();
        sorted.dedup();
        if sorted.len() != n {
            return p.err(
                "the equations do not define each unknown's first-variable derivative \
                 exactly once (the input can not be put into the standard form)",
            );
        }
    }
    let idx = |name: &str| unknowns.iter().position(|u| u == name);
    let mut a = vec![vec![Scalar::zero(vars); n]; n];
    let mut b = vec![vec![Scalar::zero(vars); n]; n];
    for (i, (_, terms)) in rows.iter().enumerate() {
        for (deriv, u, coeff) in terms {
            let Some(j) = idx(u) else {
                return p.err(format!("unknown `{u}` has no defining equation"));
            };
            if deriv.is_some() {
                a[i][j] = a[i][j].add(coeff);
            } else {
                b[i][j] = b[i][j].add(coeff);
            }
        }
    }
    Ok(ProblemKind::FirstOrder { a, b, unknowns })
}

fn parse_system_block(
    p: &mut Parser,
    vars: &Vars,
    op_names: &[(String, CharOperator)],
) -> Result<ProblemKind, ParseError> {
    p.eat_punct('{')?;
    let mut rows: Vec<(String, String, Vec<(String, Scalar)>)> = Vec::new();
    while !p.try_punct('}') {
        let opname = p.eat_ident()?;
        if !op_names.iter().any(|(n, _)| *n == opname) {
            return p.err(format!("undeclared operator `{opname}`"));
        }
        p.eat_punct('(')?;
        let unknown = p.eat_ident()?;
        p.eat_punct(')')?;
        p.eat_punct('=')?;
        let mut terms: Vec<(String, Scalar)> = Vec::new();
        // allow a literal 0 right-hand side
        if matches!(p.peek(), Some(Tok::Int(i)) if i == &BigInt::from(0))
            && matches!(p.peek2(), Some(Tok::Punct(';')))
        {
            p.pos += 1;
        } else {
            let mut sign = if p.try_punct('-') { -1i64 } else { 1 };
            loop {
                let mut coeff = Scalar::int(vars, sign);
                let mut unknown_ref: Option<String> = None;
                let mut dividing = false;
                loop {
                    match p.peek().cloned() {
                        Some(Tok::Ident(name))
                            if Scalar::named(vars, &name).is_none()
                                && unknown_ref.is_none()
                                && !dividing =>
                        {
                            p.pos += 1;
                            unknown_ref = Some(name);
                        }
                        _ => {
                            let s = p.scalar_power(vars)?;
                            if dividing {
                                coeff = match coeff.div(&s) {
                                    Ok(v) => v,
                                    Err(_) => return p.err("division by zero"),
                                };
                            } else {
                                coeff = coeff.mul(&s);
                            }
                        }
                    }
                    if p.try_punct('*') {
                        dividing = false;
                    } else if p.try_punct('/') {
                        dividing = true;
                    } else {
                        break;
                    }
                }
                let Some(u) = unknown_ref else {
                    return p.err("each term must reference exactly one unknown");
                };
                terms.push((u, coeff));
                if p.try_punct('+') {
                    sign = 1;
                } else if p.try_punct('-') {
                    sign = -1;
                } else {
                    break;
                }
            }
        }
        p.eat_punct(';')?;
        rows.push((opname, unknown, terms));
    }
    let labels: Vec<String> = rows.iter().map(|(_, u, _)| u.clone()).collect();
    {
        let mut sorted = labels.clone();
        sorted.dedup();
        sorted.sort();
        sorted.dedup();
        if sorted.len() != labels.len() {
            return p.err("each unknown must appear on exactly one left-hand side");
        }
    }
    let n = labels.len();
    let ops: Vec<CharOperator> = rows
        .iter()
        .map(|(opname, _, _)| {
            op_names
                .iter()
                .find(|(n2, _)| n2 == opname)
                .map(|(_, op)| op.clone())
                .unwrap()
        })
        .collect();
    let mut alpha = vec![vec![Scalar::zero(vars); n]; n];
    for (i, (_, _, terms)) in rows.iter().enumerate() {
        for (u, c) in terms {
            let Some(j) = labels.iter().position(|l| l == u) else {
                return p.err(format!("unknown `{u}` has no defining equation"));
            };
            alpha[i][j] = alpha[i][j].add(c);
        }
    }
    match CharSystem::new(ops, alpha, labels) {
        Ok(sys) => Ok(ProblemKind::System(sys)),
        Err(e) => p.err(format!("invalid characteristic system: {e}")),
    }
}

fn parse_coords_block(p: &mut Parser, vars: &Vars) -> Result<CoordPair, ParseError> {
    p.eat_punct('{')?;
    let mut entries: Vec<(String, CharVar)> = Vec::new();
    while !p.try_punct('}') {
        let name = p.eat_ident()?;
        p.eat_punct('=')?;
        let cv = if matches!(p.peek(), Some(Tok::Ident(s)) if s == "grad") {
            p.pos += 1;
            p.eat_punct('(')?;
            let g1 = p.scalar_expr(vars)?;
            p.eat_punct(',')?;
            let g2 = p.scalar_expr(vars)?;
            p.eat_punct(')')?;
            CharVar::Named {
                name: name.clone(),
                grad_first: g1,
                grad_second: g2,
            }
        } else {
            CharVar::Linear(p.scalar_expr(vars)?)
        };
        p.eat_punct(';')?;
        entries.push((name, cv));
    }
    if entries.len() != 2 {
        return p.err("coords block must declare exactly two coordinates (xbar then ybar)");
    }
    let ybar = entries.pop().unwrap();
    let xbar = entries.pop().unwrap();
    Ok(CoordPair { xbar, ybar })
}

fn parse_config_block(p: &mut Parser, config: &mut ConfigOverrides) -> Result<(), ParseError> {
    p.eat_punct('{')?;
    while !p.try_punct('}') {
        let key = p.eat_ident()?;
        p.eat_punct('=')?;
        match key.as_str() {
            "max_depth" => {
                let v = p.eat_int()?;
                config.max_depth = Some(v.to_string().parse().unwrap_or(4));
            }
            "chain_max" => {
                let n = p.eat_int()?;
                p.eat_punct(':')?;
                let k = p.eat_int()?;
                config.chain_max = Some((
                    n.to_string().parse().unwrap_or(10),
                    k.to_string().parse().unwrap_or(10),
                ));
            }
            "pivots" => {
                let mut v = p.eat_ident()?;
                if v == "manual" {
                    p.eat_punct('(')?;
                    let mut pairs = Vec::new();
                    loop {
                        let i = p.eat_int()?;
                        p.eat_punct(':')?;
                        let k = p.eat_int()?;
                        pairs.push(format!("{i}:{k}"));
                        if !p.try_punct(',') {
                            break;
                        }
                    }
                    p.eat_punct(')')?;
                    v = format!("manual={}", pairs.join(","));
                }
                config.pivots = Some(v);
            }
            "verify" => {
                let v = p.eat_ident()?;
                config.verify = Some(v == "true");
            }
            "points" => {
                let v = p.eat_int()?;
                config.points = Some(v.to_string().parse().unwrap_or(20));
            }
            "seed" => {
                let v = p.eat_int()?;
                config.seed = Some(v.to_string().parse().unwrap_or(0));
            }
            other => return p.err(format!("unknown config key `{other}`")),
        }
        p.eat_punct(';')?;
    }
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn scalar_roundtrip() {
        let v = VarSpec::new("x", "y", &["c"]);
        for src in [
            "c/(x + y)^2",
            "(x^2 + 2*x*y + y^2)/(x - y)",
            "-3/2",
            "x",
            "(c - 2)/(x^2 + 2*x*y + y^2)",
        ] {
            let s = parse_scalar(&v, src).unwrap();
            let printed = s.to_dsl();
            let back = parse_scalar(&v, &printed).unwrap();
            assert_eq!(s, back, "roundtrip failed for `{src}` -> `{printed}`");
        }
    }

    #[test]
    fn lpdo_parses_monomial_sums() {
        let v = VarSpec::new("x", "y", &[]);
        let a = parse_lpdo(&v, "Dx*Dy - 2/(x + y)^2").unwrap();
        assert_eq!(a.order(), 2);
        let printed = a.to_dsl();
        let b = parse_lpdo(&v, &printed).unwrap();
        assert_eq!(a, b);
    }

    #[test]
    fn lpdo_rejects_composition_syntax() {
        let v = VarSpec::new("x", "y", &[]);
        assert!(parse_lpdo(&v, "Dy*Dx").is_err());
        assert!(parse_lpdo(&v, "Dx*x*Dy").is_err());
        assert!(parse_lpdo(&v, "Dx*Dx").is_err());
    }

    #[test]
    fn problem_file_three_by_three() {
        let text = "\
vars x, y;
ops X1 = Dx, X2 = Dy, X3 = Dx + Dy;
system {
  X1(u1) = u1 + 2*u2 + u3;
  X2(u2) = -6*u1 + u2 + 2*u3;
  X3(u3) = 12*u1 + 6*u2 + u3;
}
";
        let pf = parse_problem(text).unwrap();
        let ProblemKind::System(sys) = &pf.problem else {
            panic!("expected system");
        };
        assert_eq!(sys.n(), 3);
        assert_eq!(sys.alpha(1, 0), &Scalar::int(&pf.vars, -6));
        assert_eq!(sys.alpha(2, 0), &Scalar::int(&pf.vars, 12));
    }

    #[test]
    fn k3p_style_input_is_rejected() {
        // u_y = q on a left-hand side: not solvable for the x-derivatives
        let text = "\
vars x, y;
params a0;
firstorder {
  Dx(u) = p;
  Dy(u) = q;
  Dx(p) = Dy(q) + a0*u;
}
";
        let err = parse_problem(text).unwrap_err();
        assert!(err.message.contains("standard form"), "{}", err.message);
    }

    #[test]
    fn k3_style_input_parses() {
        let text = "\
vars x, y;
params a0;
firstorder {
  Dx(u) = p;
  Dx(q) = Dy(p);
  Dx(p) = Dy(q) + a0*u;
}
";
        let pf = parse_problem(text).unwrap();
        let ProblemKind::FirstOrder { a, unknowns, .. } = &pf.problem else {
            panic!("expected firstorder");
        };
        assert_eq!(unknowns, &vec!["u".to_string(), "q".into(), "p".into()]);
        // row for Dx(q) = Dy(p): a[1][2] = 1
        assert!(a[1][2].is_one());
    }

    #[test]
    fn config_and_coords_blocks() {
        let text = "\
vars t, x;
params p1;
equation { Dt*Dx - p1 }
coords { xbar = x - t; ybar = grad(-1, 1/(x + 1)); }
config { max_depth = 3; chain_max = 5:6; pivots = all; verify = true; seed = 9; }
";
        let pf = parse_problem(text).unwrap();
        assert_eq!(pf.config.max_depth, Some(3));
        assert_eq!(pf.config.chain_max, Some((5, 6)));
        assert_eq!(pf.config.verify, Some(true));
        assert_eq!(pf.config.seed, Some(9));
        let coords = pf.coords.unwrap();
        assert_eq!(coords.xbar.0, "xbar");
        assert!(matches!(coords.ybar.1, CharVar::Named { .. }));
    }
}
