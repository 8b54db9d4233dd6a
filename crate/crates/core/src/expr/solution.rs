//! Closed-form solution expressions: scalars, exponentials, arbitrary
//! functions of a characteristic variable, and unevaluated directional
//! integrals, together with a normal form strong enough to decide the zero
//! tests the residual verifier needs.

use num::bigint::BigInt;
use num::rational::BigRational;
use num::{One, Zero};
use std::collections::BTreeMap;
use std::fmt;

use super::scalar::{Scalar, ScalarError};
use super::vars::Vars;
use crate::lpdo::CharOperator;
use thiserror::Error;

/// A characteristic variable: either an explicit (usually linear) rational
/// form of the independent variables, or an opaque chart coordinate known
/// only through its exact gradient.
#[derive(Debug, Clone, PartialEq, Eq, PartialOrd, Ord, Hash)]
pub enum CharVar {
    Linear(Scalar),
    Named {
        name: String,
        grad_first: Scalar,
        grad_second: Scalar,
    },
}

impl CharVar {
    pub fn grad(&self, slot: usize) -> Scalar {
        match self {
            CharVar::Linear(s) => s.diff(slot),
            CharVar::Named {
                grad_first,
                grad_second,
                ..
            } => {
                if slot == 0 {
                    grad_first.clone()
                } else {
                    grad_second.clone()
                }
            }
        }
    }

    /// Directional derivative of the coordinate along `op`.
    pub fn along(&self, op: &CharOperator) -> Scalar {
        op.m.mul(&self.grad(0)).add(&op.n.mul(&self.grad(1)))
    }

    pub fn to_dsl(&self) -> String {
        match self {
            CharVar::Linear(s) => s.to_dsl(),
            CharVar::Named { name, .. } => name.clone(),
        }
    }
}

/// Integration frame of a directional integral node: `flow` is the direction
/// recovered by differentiation (fundamental theorem), `transverse` the
/// commuting complement used for differentiation under the integral.
#[derive(Debug, Clone, PartialEq, Eq, PartialOrd, Ord, Hash)]
pub struct ChartFrame {
    pub flow: CharOperator,
    pub transverse: CharOperator,
    /// printed name for coordinate-frames (e.g. the `ybar` of `int[ybar]`).
    pub name: Option<String>,
}

impl ChartFrame {
    /// Frame for a constant-coefficient direction; the transverse direction
    /// is the canonical constant complement.
    pub fn constant(flow: CharOperator) -> ChartFrame {
        let vars = flow.m.vars().clone();
        let transverse = if flow.m.is_zero() {
            CharOperator::new(Scalar::one(&vars), Scalar::zero(&vars))
        } else {
            CharOperator::new(Scalar::zero(&vars), Scalar::one(&vars))
        };
        ChartFrame {
            flow,
            transverse,
            name: None,
        }
    }

    /// Determinant of the (flow, transverse) coefficient matrix.
    pub fn det(&self) -> Scalar {
        self.flow
            .m
            .mul(&self.transverse.n)
            .sub(&self.transverse.m.mul(&self.flow.n))
    }

    /// Coefficients (c1, c2) with `D_slot = c1*flow + c2*transverse`.
    pub fn decompose_axis(&self, slot: usize) -> (Scalar, Scalar) {
        let det = self.det();
        let (ex, ey) = {
            let vars = self.flow.m.vars();
            if slot == 0 {
                (Scalar::one(vars), Scalar::zero(vars))
            } else {
                (Scalar::zero(vars), Scalar::one(vars))
            }
        };
        // [m_f m_t; n_f n_t] [c1; c2] = [ex; ey]
        let c1 = ex
            .mul(&self.transverse.n)
            .sub(&self.transverse.m.mul(&ey))
            .div(&det)
            .expect("degenerate frame");
        let c2 = self
            .flow
            .m
            .mul(&ey)
            .sub(&ex.mul(&self.flow.n))
            .div(&det)
            .expect("degenerate frame");
        (c1, c2)
    }

    /// The flow coordinate `s` with `flow(s) = 1`, for constant frames.
    pub fn flow_coordinate(&self) -> Option<Scalar> {
        let vars = self.flow.m.vars();
        if !self.flow.is_constant() {
            return None;
        }
        if !self.flow.m.is_zero() {
            Some(
                Scalar::slot_var(vars, 0)
                    .div(&self.flow.m)
                    .expect("nonzero"),
            )
        } else {
            Some(
                Scalar::slot_var(vars, 1)
                    .div(&self.flow.n)
                    .expect("nonzero"),
            )
        }
    }
}

#[derive(Debug, Clone, PartialEq, Eq, PartialOrd, Ord, Hash)]
pub enum SolutionExpr {
    Scalar(Scalar),
    Exp(Box<SolutionExpr>),
    Func {
        id: String,
        order: u32,
        var: CharVar,
    },
    Sum(Vec<SolutionExpr>),
    Product(Vec<SolutionExpr>),
    Pow(Box<SolutionExpr>, i64),
    Integral {
        integrand: Box<SolutionExpr>,
        frame: ChartFrame,
    },
}

#[derive(Debug, Error, Clone, PartialEq)]
pub enum EvalError {
    #[error("no realization supplied for arbitrary function `{0}`")]
    MissingRealization(String),
    #[error("evaluation at a pole of a scalar coefficient")]
    Pole,
    #[error("expression contains an unevaluated integral")]
    IntegralPresent,
    #[error("opaque chart coordinate `{0}` cannot be evaluated numerically")]
    OpaqueCoord(String),
}

/// Analytic realization of one arbitrary function, with all derivatives.
#[derive(Debug, Clone)]
pub enum Realization {
    /// coefficients ascending: c0 + c1 t + c2 t^2 + ...
    Polynomial(Vec<f64>),
    Sine { freq: f64 },
    Exponential { rate: f64 },
}

impl Realization {
    pub fn eval(&self, order: u32, t: f64) -> f64 {
        match self {
            Realization::Polynomial(cs) => {
                let mut acc = 0.0;
                for (k, c) in cs.iter().enumerate() {
                    let k = k as u32;
                    if k < order {
                        continue;
                    }
                    // d^order/dt^order of c t^k = c * k!/(k-order)! * t^(k-order)
                    let mut fac = 1.0;
                    for j in (k - order + 1)..=k {
                        fac *= j as f64;
                    }
                    acc += c * fac * t.powi((k - order) as i32);
                }
                acc
            }
            Realization::Sine { freq } => {
                freq.powi(order as i32) * (freq * t + order as f64 * std::f64::consts::FRAC_PI_2).sin()
            }
            Realization::Exponential { rate } => rate.powi(order as i32) * (rate * t).exp(),
        }
    }

    /// Maximum derivative order this realization supports faithfully.
    pub fn max_order(&self) -> u32 {
        u32::MAX
    }
}

impl SolutionExpr {
    pub fn zero(vars: &Vars) -> SolutionExpr {
        SolutionExpr::Scalar(Scalar::zero(vars))
    }

    pub fn scalar(s: Scalar) -> SolutionExpr {
        SolutionExpr::Scalar(s)
    }

    pub fn func(id: &str, order: u32, var: CharVar) -> SolutionExpr {
        SolutionExpr::Func {
            id: id.to_string(),
            order,
            var,
        }
    }

    pub fn sum(parts: Vec<SolutionExpr>) -> SolutionExpr {
        SolutionExpr::Sum(parts)
    }

    pub fn product(parts: Vec<SolutionExpr>) -> SolutionExpr {
        SolutionExpr::Product(parts)
    }

    pub fn exp(arg: SolutionExpr) -> SolutionExpr {
        SolutionExpr::Exp(Box::new(arg))
    }

    pub fn integral(integrand: SolutionExpr, frame: ChartFrame) -> SolutionExpr {
        SolutionExpr::Integral {
            integrand: Box::new(integrand),
            frame,
        }
    }

    pub fn add(&self, other: &SolutionExpr) -> SolutionExpr {
        SolutionExpr::Sum(vec![self.clone(), other.clone()])
    }

    pub fn sub(&self, other: &SolutionExpr) -> SolutionExpr {
        SolutionExpr::Sum(vec![self.clone(), other.clone().neg()])
    }

    pub fn neg(self) -> SolutionExpr {
        SolutionExpr::Product(vec![
            SolutionExpr::Scalar(match &self {
                SolutionExpr::Scalar(s) => Scalar::int(s.vars(), -1),
                other => Scalar::int(expr_vars(other), -1),
            }),
            self,
        ])
    }

    pub fn mul(&self, other: &SolutionExpr) -> SolutionExpr {
        SolutionExpr::Product(vec![self.clone(), other.clone()])
    }

    pub fn mul_scalar(&self, s: &Scalar) -> SolutionExpr {
        SolutionExpr::Product(vec![SolutionExpr::Scalar(s.clone()), self.clone()])
    }

    /// Exact partial derivative (slot 0 or 1).
    pub fn diff(&self, slot: usize) -> SolutionExpr {
        match self {
            SolutionExpr::Scalar(s) => SolutionExpr::Scalar(s.diff(slot)),
            SolutionExpr::Exp(a) => self.clone().mul(&a.diff(slot)),
            SolutionExpr::Func { id, order, var } => SolutionExpr::Func {
                id: id.clone(),
                order: order + 1,
                var: var.clone(),
            }
            .mul_scalar(&var.grad(slot)),
            SolutionExpr::Sum(parts) => {
                SolutionExpr::Sum(parts.iter().map(|p| p.diff(slot)).collect())
            }
            SolutionExpr::Product(parts) => {
                let mut terms = Vec::new();
                for i in 0..parts.len() {
                    let mut fs = parts.clone();
                    fs[i] = parts[i].diff(slot);
                    terms.push(SolutionExpr::Product(fs));
                }
                SolutionExpr::Sum(terms)
            }
            SolutionExpr::Pow(base, k) => {
                // k * base^(k-1) * base'
                let vars = expr_vars(base);
                SolutionExpr::Product(vec![
                    SolutionExpr::Scalar(Scalar::int(vars, *k)),
                    SolutionExpr::Pow(base.clone(), k - 1),
                    base.diff(slot),
                ])
            }
            SolutionExpr::Integral { integrand, frame } => {
                let (c1, c2) = frame.decompose_axis(slot);
                let transversed = integrand
                    .diff(0)
                    .mul_scalar(&frame.transverse.m)
                    .add(&integrand.diff(1).mul_scalar(&frame.transverse.n));
                SolutionExpr::Sum(vec![
                    integrand.as_ref().clone().mul_scalar(&c1),
                    SolutionExpr::integral(transversed, frame.clone()).mul_scalar(&c2),
                ])
            }
        }
    }

    /// Apply a characteristic operator `m Dx + n Dy`.
    pub fn apply_char(&self, op: &CharOperator) -> SolutionExpr {
        self.diff(0)
            .mul_scalar(&op.m)
            .add(&self.diff(1).mul_scalar(&op.n))
    }

    pub fn normalize(&self) -> Nf {
        nf_of(self)
    }

    pub fn is_zero_expr(&self) -> bool {
        self.normalize().terms.is_empty()
    }

    pub fn equivalent(&self, other: &SolutionExpr) -> bool {
        self.sub(other).is_zero_expr()
    }

    pub fn contains_integral(&self) -> bool {
        match self {
            SolutionExpr::Integral { .. } => true,
            SolutionExpr::Scalar(_) | SolutionExpr::Func { .. } => false,
            SolutionExpr::Exp(a) => a.contains_integral(),
            SolutionExpr::Pow(a, _) => a.contains_integral(),
            SolutionExpr::Sum(ps) | SolutionExpr::Product(ps) => {
                ps.iter().any(|p| p.contains_integral())
            }
        }
    }

    pub fn contains_named_coord(&self) -> bool {
        match self {
            SolutionExpr::Scalar(_) => false,
            SolutionExpr::Func { var, .. } => matches!(var, CharVar::Named { .. }),
            SolutionExpr::Exp(a) | SolutionExpr::Pow(a, _) => a.contains_named_coord(),
            SolutionExpr::Sum(ps) | SolutionExpr::Product(ps) => {
                ps.iter().any(|p| p.contains_named_coord())
            }
            SolutionExpr::Integral { integrand, .. } => integrand.contains_named_coord(),
        }
    }

    pub fn function_ids(&self) -> Vec<(String, u32)> {
        let mut out: BTreeMap<String, u32> = BTreeMap::new();
        collect_funcs(self, &mut out);
        out.into_iter().collect()
    }

    /// Numeric evaluation at one point of the independent variables.
    pub fn eval(
        &self,
        point: (f64, f64),
        realizations: &BTreeMap<String, Realization>,
        params: &[f64],
    ) -> Result<f64, EvalError> {
        let full = |s: &Scalar| -> Result<f64, EvalError> {
            let mut v = vec![point.0, point.1];
            v.extend_from_slice(params);
            s.eval_f64(&v).map_err(|e| match e {
                ScalarError::Pole(_) => EvalError::Pole,
                _ => EvalError::Pole,
            })
        };
        match self {
            SolutionExpr::Scalar(s) => full(s),
            SolutionExpr::Exp(a) => Ok(a.eval(point, realizations, params)?.exp()),
            SolutionExpr::Func { id, order, var } => {
                let t = match var {
                    CharVar::Linear(s) => full(s)?,
                    CharVar::Named { name, .. } => {
                        return Err(EvalError::OpaqueCoord(name.clone()))
                    }
                };
                let r = realizations
                    .get(id)
                    .ok_or_else(|| EvalError::MissingRealization(id.clone()))?;
                Ok(r.eval(*order, t))
            }
            SolutionExpr::Sum(ps) => {
                let mut acc = 0.0;
                for p in ps {
                    acc += p.eval(point, realizations, params)?;
                }
                Ok(acc)
            }
            SolutionExpr::Product(ps) => {
                let mut acc = 1.0;
                for p in ps {
                    acc *= p.eval(point, realizations, params)?;
                }
                Ok(acc)
            }
            SolutionExpr::Pow(a, k) => Ok(a.eval(point, realizations, params)?.powi(*k as i32)),
            SolutionExpr::Integral { .. } => Err(EvalError::IntegralPresent),
        }
    }

    pub fn to_dsl(&self) -> String {
        print_expr(self, 0)
    }
}

fn collect_funcs(e: &SolutionExpr, out: &mut BTreeMap<String, u32>) {
    match e {
        SolutionExpr::Func { id, order, .. } => {
            let entry = out.entry(id.clone()).or_insert(0);
            *entry = (*entry).max(*order);
        }
        SolutionExpr::Exp(a) | SolutionExpr::Pow(a, _) => collect_funcs(a, out),
        SolutionExpr::Sum(ps) | SolutionExpr::Product(ps) => {
            for p in ps {
                collect_funcs(p, out);
            }
        }
        SolutionExpr::Integral { integrand, .. } => collect_funcs(integrand, out),
        SolutionExpr::Scalar(_) => {}
    }
}

pub(crate) fn expr_vars(e: &SolutionExpr) -> &Vars {
    match e {
        SolutionExpr::Scalar(s) => s.vars(),
        SolutionExpr::Exp(a) | SolutionExpr::Pow(a, _) => expr_vars(a),
        SolutionExpr::Func { var, .. } => match var {
            CharVar::Linear(s) => s.vars(),
            CharVar::Named { grad_first, .. } => grad_first.vars(),
        },
        SolutionExpr::Sum(ps) | SolutionExpr::Product(ps) => expr_vars(&ps[0]),
        SolutionExpr::Integral { integrand, .. } => expr_vars(integrand),
    }
}

// ---------------------------------------------------------------------------
// normal form
// ---------------------------------------------------------------------------

#[derive(Debug, Clone, PartialEq, Eq, PartialOrd, Ord, Hash)]
pub struct FuncAtom {
    pub id: String,
    pub order: u32,
    pub var: CharVar,
}

#[derive(Debug, Clone, PartialEq, Eq, PartialOrd, Ord, Hash)]
pub struct IntAtom {
    pub integrand: Nf,
    pub frame: ChartFrame,
}

/// One normalized product: a scalar coefficient times one exponential, a
/// multiset of arbitrary-function atoms, integral atoms and opaque inverse
/// sums.  The term key is everything except the coefficient.
#[derive(Debug, Clone, PartialEq, Eq, PartialOrd, Ord, Hash)]
pub struct NfTerm {
    pub exparg: Nf,
    pub funcs: Vec<(FuncAtom, i64)>,
    pub ints: Vec<(IntAtom, i64)>,
    pub opaque: Vec<(Nf, i64)>,
    pub coeff: Scalar,
}

/// Canonical sum of [`NfTerm`]s, sorted by key, like keys combined, zero
/// coefficients dropped.  The empty sum is the zero expression.
#[derive(Debug, Clone, PartialEq, Eq, PartialOrd, Ord, Hash, Default)]
pub struct Nf {
    pub terms: Vec<NfTerm>,
}

impl NfTerm {
    fn key(&self) -> (&Nf, &Vec<(FuncAtom, i64)>, &Vec<(IntAtom, i64)>, &Vec<(Nf, i64)>) {
        (&self.exparg, &self.funcs, &self.ints, &self.opaque)
    }

    fn constant(c: Scalar) -> NfTerm {
        NfTerm {
            exparg: Nf::default(),
            funcs: vec![],
            ints: vec![],
            opaque: vec![],
            coeff: c,
        }
    }

    fn is_plain_scalar(&self) -> bool {
        self.exparg.terms.is_empty()
            && self.funcs.is_empty()
            && self.ints.is_empty()
            && self.opaque.is_empty()
    }
}

impl Nf {
    pub fn is_zero(&self) -> bool {
        self.terms.is_empty()
    }

    fn from_terms(mut terms: Vec<NfTerm>) -> Nf {
        terms.sort_by(|a, b| a.key().cmp(&b.key()));
        let mut out: Vec<NfTerm> = Vec::new();
        for t in terms {
            if t.coeff.is_zero() {
                continue;
            }
            if let Some(last) = out.last_mut() {
                if last.key() == t.key() {
                    last.coeff = last.coeff.add(&t.coeff);
                    continue;
                }
            }
            out.push(t);
        }
        out.retain(|t| !t.coeff.is_zero());
        Nf { terms: out }
    }

    pub fn add(&self, other: &Nf) -> Nf {
        let mut terms = self.terms.clone();
        terms.extend(other.terms.iter().cloned());
        Nf::from_terms(terms)
    }

    pub fn neg(&self) -> Nf {
        Nf {
            terms: self
                .terms
                .iter()
                .map(|t| {
                    let mut t = t.clone();
                    t.coeff = t.coeff.neg();
                    t
                })
                .collect(),
        }
    }

    pub fn scale(&self, s: &Scalar) -> Nf {
        if s.is_zero() {
            return Nf::default();
        }
        Nf::from_terms(
            self.terms
                .iter()
                .map(|t| {
                    let mut t = t.clone();
                    t.coeff = t.coeff.mul(s);
                    t
                })
                .collect(),
        )
    }

    pub fn scale_int(&self, k: i64) -> Nf {
        if self.terms.is_empty() {
            return Nf::default();
        }
        let vars = self.terms[0].coeff.vars().clone();
        self.scale(&Scalar::int(&vars, k))
    }

    pub fn mul(&self, other: &Nf) -> Nf {
        let mut terms = Vec::new();
        for a in &self.terms {
            for b in &other.terms {
                terms.push(mul_terms(a, b));
            }
        }
        Nf::from_terms(terms)
    }

    fn single(t: NfTerm) -> Nf {
        Nf::from_terms(vec![t])
    }

    /// Render back into a `SolutionExpr` (sum of products).
    pub fn render(&self, vars: &Vars) -> SolutionExpr {
        if self.terms.is_empty() {
            return SolutionExpr::zero(vars);
        }
        let parts = self.terms.iter().map(|t| render_term(t, vars)).collect();
        SolutionExpr::Sum(parts)
    }
}

fn merge_powers<K: Ord + Clone>(a: &[(K, i64)], b: &[(K, i64)]) -> Vec<(K, i64)> {
    let mut map: BTreeMap<K, i64> = BTreeMap::new();
    for (k, p) in a.iter().chain(b.iter()) {
        *map.entry(k.clone()).or_insert(0) += p;
    }
    map.into_iter().filter(|(_, p)| *p != 0).collect()
}

fn mul_terms(a: &NfTerm, b: &NfTerm) -> NfTerm {
    NfTerm {
        exparg: a.exparg.add(&b.exparg),
        funcs: merge_powers(&a.funcs, &b.funcs),
        ints: merge_powers(&a.ints, &b.ints),
        opaque: merge_powers(&a.opaque, &b.opaque),
        coeff: a.coeff.mul(&b.coeff),
    }
}

fn pow_term(t: &NfTerm, k: i64) -> NfTerm {
    NfTerm {
        exparg: t.exparg.scale_int(k),
        funcs: t.funcs.iter().map(|(a, p)| (a.clone(), p * k)).collect(),
        ints: t.ints.iter().map(|(a, p)| (a.clone(), p * k)).collect(),
        opaque: t.opaque.iter().map(|(a, p)| (a.clone(), p * k)).collect(),
        coeff: t.coeff.pow(k).expect("nonzero coefficient"),
    }
}

fn nf_of(e: &SolutionExpr) -> Nf {
    match e {
        SolutionExpr::Scalar(s) => {
            if s.is_zero() {
                Nf::default()
            } else {
                Nf::single(NfTerm::constant(s.clone()))
            }
        }
        SolutionExpr::Sum(ps) => {
            let mut acc = Nf::default();
            for p in ps {
                acc = acc.add(&nf_of(p));
            }
            acc
        }
        SolutionExpr::Product(ps) => {
            let vars = expr_vars(e).clone();
            let mut acc = Nf::single(NfTerm::constant(Scalar::one(&vars)));
            for p in ps {
                acc = acc.mul(&nf_of(p));
                if acc.is_zero() {
                    break;
                }
            }
            acc
        }
        SolutionExpr::Pow(base, k) => {
            let nb = nf_of(base);
            nf_pow(&nb, *k, expr_vars(e))
        }
        SolutionExpr::Exp(arg) => {
            let na = nf_of(arg);
            let vars = expr_vars(e);
            if na.is_zero() {
                return Nf::single(NfTerm::constant(Scalar::one(vars)));
            }
            Nf::single(NfTerm {
                exparg: na,
                funcs: vec![],
                ints: vec![],
                opaque: vec![],
                coeff: Scalar::one(vars),
            })
        }
        SolutionExpr::Func { id, order, var } => {
            let vars = expr_vars(e);
            Nf::single(NfTerm {
                exparg: Nf::default(),
                funcs: vec![(
                    FuncAtom {
                        id: id.clone(),
                        order: *order,
                        var: var.clone(),
                    },
                    1,
                )],
                ints: vec![],
                opaque: vec![],
                coeff: Scalar::one(vars),
            })
        }
        SolutionExpr::Integral { integrand, frame } => {
            let ni = nf_of(integrand);
            nf_integral(&ni, frame, expr_vars(e))
        }
    }
}

fn nf_pow(base: &Nf, k: i64, vars: &Vars) -> Nf {
    if k == 0 {
        return Nf::single(NfTerm::constant(Scalar::one(vars)));
    }
    if base.terms.len() == 1 {
        return Nf::single(pow_term(&base.terms[0], k));
    }
    if base.is_zero() {
        assert!(k > 0, "zero to a negative power");
        return Nf::default();
    }
    if k > 0 {
        let mut acc = Nf::single(NfTerm::constant(Scalar::one(vars)));
        for _ in 0..k {
            acc = acc.mul(base);
        }
        acc
    } else {
        // opaque inverse of a multi-term sum; sound but not simplified further
        Nf::single(NfTerm {
            exparg: Nf::default(),
            funcs: vec![],
            ints: vec![],
            opaque: vec![(base.clone(), k)],
            coeff: Scalar::one(vars),
        })
    }
}

/// Is the (rendered) term annihilated by `op`?
fn term_annihilated(t: &NfTerm, op: &CharOperator, vars: &Vars) -> bool {
    let e = render_term(t, vars);
    e.apply_char(op).is_zero_expr()
}

/// Linear chart adapted to a constant direction: returns
/// `(s(x,y), w(x,y), x(s,w), y(s,w))` with `flow(s) = 1`, `flow(w) = 0`;
/// the chart expressions reuse slots 0/1 for `(s, w)`.
pub fn flow_chart(flow: &CharOperator) -> Option<(Scalar, Scalar, Scalar, Scalar)> {
    if !flow.is_constant() {
        return None;
    }
    let vars = flow.vars();
    let xv = Scalar::slot_var(vars, 0);
    let yv = Scalar::slot_var(vars, 1);
    if !flow.m.is_zero() {
        let s = xv.div(&flow.m).unwrap();
        let w = flow.n.mul(&xv).sub(&flow.m.mul(&yv));
        // x = m s, y = n s - w/m
        let xb = flow.m.mul(&xv);
        let yb = flow.n.mul(&xv).sub(&yv.div(&flow.m).unwrap());
        Some((s, w, xb, yb))
    } else {
        let s = yv.div(&flow.n).unwrap();
        let w = xv.clone();
        // x = w, y = n s
        let xb = yv;
        let yb = flow.n.mul(&xv);
        Some((s, w, xb, yb))
    }
}

/// Split a scalar into flow-varying and flow-constant parts along a constant
/// direction: `s = flow_part + trans_part` with `flow(trans_part) = 0`.
/// Only polynomials split; rational functions are classified whole.
pub fn split_scalar_flow(s: &Scalar, flow: &CharOperator) -> Option<(Scalar, Scalar)> {
    let vars = s.vars().clone();
    let d = flow.apply_scalar(s);
    if d.is_zero() {
        return Some((Scalar::zero(&vars), s.clone()));
    }
    if !s.den().is_one() {
        return Some((s.clone(), Scalar::zero(&vars)));
    }
    let (sc, wc, xb, yb) = flow_chart(flow)?;
    let mut to_chart: Vec<Scalar> = (0..vars.arity()).map(|i| Scalar::slot_var(&vars, i)).collect();
    to_chart[0] = xb;
    to_chart[1] = yb;
    let chart = s.compose(&to_chart);
    // split the numerator (a polynomial) by s-degree
    let mut flow_part_chart = crate::expr::poly::Poly::zero(vars.arity());
    let mut trans_part_chart = crate::expr::poly::Poly::zero(vars.arity());
    for (m, c) in &chart.num().terms {
        let target = if m.0[0] == 0 {
            &mut trans_part_chart
        } else {
            &mut flow_part_chart
        };
        let mut single = crate::expr::poly::Poly::zero(vars.arity());
        single.terms.insert(m.clone(), c.clone());
        *target = target.add(&single);
    }
    if !chart.den().is_one() {
        return Some((s.clone(), Scalar::zero(&vars)));
    }
    let mut back: Vec<Scalar> = (0..vars.arity()).map(|i| Scalar::slot_var(&vars, i)).collect();
    back[0] = sc;
    back[1] = wc;
    let fl = Scalar::from_poly(vars.clone(), flow_part_chart).compose(&back);
    let tr = Scalar::from_poly(vars.clone(), trans_part_chart).compose(&back);
    Some((fl, tr))
}

/// Normalization of an integral node: linearity, pulling every factor that is
/// constant along the flow out of the integral, and integrating plain `1`.
fn nf_integral(integrand: &Nf, frame: &ChartFrame, vars: &Vars) -> Nf {
    let mut out = Nf::default();
    for t in &integrand.terms {
        let mut outside = NfTerm::constant(Scalar::one(vars));
        let mut inside = NfTerm::constant(Scalar::one(vars));

        // scalar coefficient
        let dcoeff = t.coeff.diff(0).mul(&frame.flow.m).add(&t.coeff.diff(1).mul(&frame.flow.n));
        if dcoeff.is_zero() {
            outside.coeff = t.coeff.clone();
        } else {
            inside.coeff = t.coeff.clone();
        }

        // exponential: split the argument into flow-constant and flow-varying parts
        let mut exp_out = Nf::default();
        let mut exp_in = Nf::default();
        for at in &t.exparg.terms {
            if at.is_plain_scalar() {
                if let Some((fl, tr)) = split_scalar_flow(&at.coeff, &frame.flow) {
                    if !tr.is_zero() {
                        exp_out = exp_out.add(&Nf::single(NfTerm::constant(tr)));
                    }
                    if !fl.is_zero() {
                        exp_in = exp_in.add(&Nf::single(NfTerm::constant(fl)));
                    }
                    continue;
                }
            }
            if term_annihilated(at, &frame.flow, vars) {
                exp_out = exp_out.add(&Nf::single(at.clone()));
            } else {
                exp_in = exp_in.add(&Nf::single(at.clone()));
            }
        }
        outside.exparg = exp_out;
        inside.exparg = exp_in;

        for (f, p) in &t.funcs {
            if f.var.along(&frame.flow).is_zero() {
                outside.funcs.push((f.clone(), *p));
            } else {
                inside.funcs.push((f.clone(), *p));
            }
        }
        inside.ints = t.ints.clone();
        inside.opaque = t.opaque.clone();

        if inside.is_plain_scalar() && inside.coeff.is_one() {
            // integral of 1 along the flow: the flow coordinate, when known
            if let Some(s) = frame.flow_coordinate() {
                outside.coeff = outside.coeff.mul(&s);
                out = out.add(&Nf::single(outside));
                continue;
            }
        }
        let atom = IntAtom {
            integrand: Nf::single(inside),
            frame: frame.clone(),
        };
        let mut term = outside;
        term.ints = merge_powers(&term.ints, &[(atom, 1)]);
        out = out.add(&Nf::single(term));
    }
    out
}

fn render_term(t: &NfTerm, vars: &Vars) -> SolutionExpr {
    let mut parts: Vec<SolutionExpr> = vec![SolutionExpr::Scalar(t.coeff.clone())];
    if !t.exparg.terms.is_empty() {
        parts.push(SolutionExpr::exp(t.exparg.render(vars)));
    }
    for (f, p) in &t.funcs {
        let atom = SolutionExpr::Func {
            id: f.id.clone(),
            order: f.order,
            var: f.var.clone(),
        };
        if *p == 1 {
            parts.push(atom);
        } else {
            parts.push(SolutionExpr::Pow(Box::new(atom), *p));
        }
    }
    for (i, p) in &t.ints {
        let atom = SolutionExpr::integral(i.integrand.render(vars), i.frame.clone());
        if *p == 1 {
            parts.push(atom);
        } else {
            parts.push(SolutionExpr::Pow(Box::new(atom), *p));
        }
    }
    for (o, p) in &t.opaque {
        parts.push(SolutionExpr::Pow(Box::new(o.render(vars)), *p));
    }
    if parts.len() == 1 {
        parts.pop().unwrap()
    } else {
        SolutionExpr::Product(parts)
    }
}

// ---------------------------------------------------------------------------
// function redefinitions (integration by parts)
// ---------------------------------------------------------------------------

/// Record of replacing an arbitrary function by derivatives of a fresh one:
/// `old(t) = exp(exp_coeff*t) * sum_j c_j * new^(j)(t)`.
#[derive(Debug, Clone, PartialEq)]
pub struct Redefinition {
    pub old_id: String,
    pub new_id: String,
    pub var: CharVar,
    pub exp_coeff: BigRational,
    pub parts: Vec<(BigRational, u32)>,
}

impl Redefinition {
    /// The template for `old^(d)`, as coefficient/derivative-order pairs of the
    /// new function (the exponential prefactor stays `exp(exp_coeff*t)`).
    fn derived_parts(&self, d: u32) -> Vec<(BigRational, u32)> {
        let mut parts = self.parts.clone();
        for _ in 0..d {
            let mut next: BTreeMap<u32, BigRational> = BTreeMap::new();
            for (c, j) in &parts {
                // d/dt [e^(at) H^(j)] = e^(at) (a H^(j) + H^(j+1))
                let e0 = next.entry(*j).or_insert_with(BigRational::zero);
                *e0 += c * &self.exp_coeff;
                let e1 = next.entry(j + 1).or_insert_with(BigRational::zero);
                *e1 += c.clone();
            }
            parts = next.into_iter().map(|(j, c)| (c, j)).collect();
        }
        parts.retain(|(c, _)| !c.is_zero());
        parts
    }

    /// Instantiate `old^(d)(var)` in terms of the new function.
    pub fn expand(&self, d: u32, vars: &Vars) -> SolutionExpr {
        let mut terms: Vec<SolutionExpr> = Vec::new();
        for (c, j) in self.derived_parts(d) {
            terms.push(
                SolutionExpr::func(&self.new_id, j, self.var.clone())
                    .mul_scalar(&Scalar::rational(vars, c)),
            );
        }
        let body = SolutionExpr::Sum(terms);
        if self.exp_coeff.is_zero() {
            return body;
        }
        let arg = match &self.var {
            CharVar::Linear(w) => w.clone(),
            CharVar::Named { .. } => {
                panic!("exponential redefinition on an opaque coordinate")
            }
        };
        let prefac = SolutionExpr::exp(SolutionExpr::Scalar(
            arg.mul(&Scalar::rational(arg.vars(), self.exp_coeff.clone())),
        ));
        prefac.mul(&body)
    }

    /// Definition string for reports, e.g. `F(t) = exp(-t)*F1'(t)`.
    pub fn describe(&self) -> String {
        let mut body = String::new();
        for (i, (c, j)) in self.parts.iter().enumerate() {
            if i > 0 {
                body.push_str(" + ");
            }
            if !c.is_one() {
                body.push_str(&format!("{}*", crate::expr::poly::format_rational(c)));
            }
            body.push_str(&self.new_id);
            body.push_str(&"'".repeat(*j as usize));
            body.push_str("(t)");
        }
        if self.exp_coeff.is_zero() {
            format!("{}(t) = {}", self.old_id, body)
        } else {
            format!(
                "{}(t) = exp({}*t)*{}",
                self.old_id,
                crate::expr::poly::format_rational(&self.exp_coeff),
                body
            )
        }
    }
}

/// Replace every occurrence of `redef.old_id` in `e` by its template.
pub fn apply_redefinition(e: &SolutionExpr, redef: &Redefinition) -> SolutionExpr {
    match e {
        SolutionExpr::Func { id, order, var } if *id == redef.old_id => {
            debug_assert_eq!(*var, redef.var, "redefined function used at a new argument");
            redef.expand(*order, expr_vars(e))
        }
        SolutionExpr::Scalar(_) | SolutionExpr::Func { .. } => e.clone(),
        SolutionExpr::Exp(a) => SolutionExpr::exp(apply_redefinition(a, redef)),
        SolutionExpr::Pow(a, k) => SolutionExpr::Pow(Box::new(apply_redefinition(a, redef)), *k),
        SolutionExpr::Sum(ps) => {
            SolutionExpr::Sum(ps.iter().map(|p| apply_redefinition(p, redef)).collect())
        }
        SolutionExpr::Product(ps) => {
            SolutionExpr::Product(ps.iter().map(|p| apply_redefinition(p, redef)).collect())
        }
        SolutionExpr::Integral { integrand, frame } => {
            SolutionExpr::integral(apply_redefinition(integrand, redef), frame.clone())
        }
    }
}

// ---------------------------------------------------------------------------
// printing
// ---------------------------------------------------------------------------

// precedence: 0 sum, 1 product, 2 atom/power
fn print_expr(e: &SolutionExpr, prec: u8) -> String {
    let (s, my_prec) = match e {
        SolutionExpr::Scalar(sc) => {
            let txt = sc.to_dsl();
            let p = if txt.contains(" + ") || txt.contains(" - ") {
                0
            } else if txt.contains('*') || txt.contains('/') || txt.starts_with('-') {
                1
            } else {
                2
            };
            (txt, p)
        }
        SolutionExpr::Exp(a) => (format!("exp({})", print_expr(a, 0)), 2),
        SolutionExpr::Func { id, order, var } => (
            format!("{}{}({})", id, "'".repeat(*order as usize), var.to_dsl()),
            2,
        ),
        SolutionExpr::Sum(ps) => {
            if ps.is_empty() {
                ("0".to_string(), 2)
            } else {
                let mut s = String::new();
                for (i, p) in ps.iter().enumerate() {
                    let t = print_expr(p, 0);
                    if i == 0 {
                        s.push_str(&t);
                    } else if let Some(rest) = t.strip_prefix('-') {
                        s.push_str(" - ");
                        s.push_str(rest);
                    } else {
                        s.push_str(" + ");
                        s.push_str(&t);
                    }
                }
                (s, 0)
            }
        }
        SolutionExpr::Product(ps) => {
            if ps.is_empty() {
                ("1".to_string(), 2)
            } else {
                let s = ps
                    .iter()
                    .map(|p| print_expr(p, 1))
                    .collect::<Vec<_>>()
                    .join("*");
                (s, 1)
            }
        }
        SolutionExpr::Pow(a, k) => (format!("{}^{}", print_expr(a, 2), k), 1),
        SolutionExpr::Integral { integrand, frame } => {
            let dir = match &frame.name {
                Some(n) => n.clone(),
                None => frame.flow.to_dsl(),
            };
            (format!("int[{}]({})", dir, print_expr(integrand, 0)), 2)
        }
    };
    if my_prec < prec {
        format!("({s})")
    } else {
        s
    }
}

impl fmt::Display for SolutionExpr {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "{}", self.to_dsl())
    }
}

/// Convenience: `exp(c * linear_form)` as an expression.
pub fn exp_of(vars: &Vars, arg: Scalar) -> SolutionExpr {
    let _ = vars;
    SolutionExpr::exp(SolutionExpr::Scalar(arg))
}

/// `int * BigInt` helper for binomial coefficients.
pub fn binomial(n: u32, k: u32) -> BigRational {
    let mut acc = BigRational::one();
    for i in 0..k {
        acc = acc * BigRational::new(BigInt::from(n - i), BigInt::from(i + 1));
    }
    acc
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::expr::vars::VarSpec;
    use crate::lpdo::CharOperator;

    fn ctx() -> Vars {
        VarSpec::new("x", "y", &[])
    }

    fn x(v: &Vars) -> Scalar {
        Scalar::slot_var(v, 0)
    }
    fn y(v: &Vars) -> Scalar {
        Scalar::slot_var(v, 1)
    }

    #[test]
    fn chain_rule_through_func() {
        // d/dx F(x - y) = F'(x - y)
        let v = ctx();
        let w = CharVar::Linear(x(&v).sub(&y(&v)));
        let f = SolutionExpr::func("F", 0, w.clone());
        let d = f.diff(0);
        assert!(d.equivalent(&SolutionExpr::func("F", 1, w)));
    }

    #[test]
    fn derivative_structure_of_exp_times_funcs() {
        // d/dy [e^x (F''(y) - F'(y))] = e^x (F'''(y) - F''(y))
        let v = ctx();
        let w = CharVar::Linear(y(&v));
        let ex = SolutionExpr::exp(SolutionExpr::Scalar(x(&v)));
        let inner = SolutionExpr::func("F", 2, w.clone()).sub(&SolutionExpr::func("F", 1, w.clone()));
        let e = ex.mul(&inner);
        let expect = ex.mul(&SolutionExpr::func("F", 3, w.clone()).sub(&SolutionExpr::func("F", 2, w)));
        assert!(e.diff(1).equivalent(&expect));
    }

    #[test]
    fn exp_products_merge() {
        // e^x * e^y - e^(x+y) = 0
        let v = ctx();
        let a = SolutionExpr::exp(SolutionExpr::Scalar(x(&v)));
        let b = SolutionExpr::exp(SolutionExpr::Scalar(y(&v)));
        let c = SolutionExpr::exp(SolutionExpr::Scalar(x(&v).add(&y(&v))));
        assert!(a.mul(&b).sub(&c).is_zero_expr());
    }

    #[test]
    fn annihilation_of_characteristic_function() {
        // (Dx + Dy) F(x - y) = 0
        let v = ctx();
        let w = CharVar::Linear(x(&v).sub(&y(&v)));
        let f = SolutionExpr::func("F", 0, w);
        let op = CharOperator::new(Scalar::one(&v), Scalar::one(&v));
        assert!(f.apply_char(&op).is_zero_expr());
    }

    #[test]
    fn integral_diff_rules() {
        // d/dx int[Dy](g) = int[Dy](dg/dx); d/dy int[Dy](g) = g
        let v = ctx();
        let g = SolutionExpr::exp(SolutionExpr::Scalar(x(&v).sub(&y(&v))))
            .mul(&SolutionExpr::func("F", 0, CharVar::Linear(y(&v))));
        let frame = ChartFrame::constant(CharOperator::new(Scalar::zero(&v), Scalar::one(&v)));
        let j = SolutionExpr::integral(g.clone(), frame.clone());
        assert!(j.diff(1).equivalent(&g));
        let dx = j.diff(0);
        let expect = SolutionExpr::integral(g.diff(0), frame);
        assert!(dx.equivalent(&expect));
    }

    #[test]
    fn integral_pullout_cancels() {
        // e^y * int[Dy](e^(x-y) F(y)) equals e^y * e^x * int[Dy](e^(-y) F(y))
        let v = ctx();
        let fy = SolutionExpr::func("F", 0, CharVar::Linear(y(&v)));
        let frame = ChartFrame::constant(CharOperator::new(Scalar::zero(&v), Scalar::one(&v)));
        let lhs = SolutionExpr::exp(SolutionExpr::Scalar(y(&v))).mul(&SolutionExpr::integral(
            SolutionExpr::exp(SolutionExpr::Scalar(x(&v).sub(&y(&v)))).mul(&fy),
            frame.clone(),
        ));
        let rhs = SolutionExpr::exp(SolutionExpr::Scalar(y(&v).add(&x(&v)))).mul(
            &SolutionExpr::integral(
                SolutionExpr::exp(SolutionExpr::Scalar(y(&v).neg())).mul(&fy),
                frame,
            ),
        );
        assert!(lhs.equivalent(&rhs));
    }

    #[test]
    fn eval_simple_cases() {
        let v = ctx();
        let mut reals = BTreeMap::new();
        reals.insert(
            "F".to_string(),
            Realization::Polynomial(vec![0.0, 0.0, 1.0]), // t^2
        );
        let f = SolutionExpr::func("F", 0, CharVar::Linear(x(&v).sub(&y(&v))));
        let got = f.eval((3.0, 1.0), &reals, &[]).unwrap();
        assert!((got - 4.0).abs() < 1e-12);

        // e^x F'(y) with F = sin at (0,0) -> cos(0) = 1
        let mut reals2 = BTreeMap::new();
        reals2.insert("F".to_string(), Realization::Sine { freq: 1.0 });
        let e = SolutionExpr::exp(SolutionExpr::Scalar(x(&v)))
            .mul(&SolutionExpr::func("F", 1, CharVar::Linear(y(&v))));
        let got = e.eval((0.0, 0.0), &reals2, &[]).unwrap();
        assert!((got - 1.0).abs() < 1e-12);
    }

    #[test]
    fn eval_derivative_matches_finite_differences() {
        let v = ctx();
        let mut reals = BTreeMap::new();
        reals.insert("F".to_string(), Realization::Sine { freq: 1.3 });
        reals.insert("G".to_string(), Realization::Exponential { rate: 0.7 });
        let e = SolutionExpr::exp(SolutionExpr::Scalar(x(&v).mul(&y(&v))))
            .mul(&SolutionExpr::func("F", 1, CharVar::Linear(x(&v).sub(&y(&v)))))
            .add(&SolutionExpr::func("G", 0, CharVar::Linear(y(&v))));
        let de = e.diff(0);
        let h = 1e-5;
        let (px, py) = (0.3, -0.4);
        let fd = (e.eval((px + h, py), &reals, &[]).unwrap()
            - e.eval((px - h, py), &reals, &[]).unwrap())
            / (2.0 * h);
        let exact = de.eval((px, py), &reals, &[]).unwrap();
        assert!(
            (fd - exact).abs() / exact.abs().max(1.0) < 1e-6,
            "fd {fd} vs exact {exact}"
        );
    }

    #[test]
    fn redefinition_expands_exponential_template() {
        // F(t) = e^(-t) H'(t):  F'(t) = e^(-t)(H''(t) - H'(t))
        let v = ctx();
        let w = CharVar::Linear(y(&v));
        let r = Redefinition {
            old_id: "F".into(),
            new_id: "H".into(),
            var: w.clone(),
            exp_coeff: -BigRational::one(),
            parts: vec![(BigRational::one(), 1)],
        };
        let f1 = SolutionExpr::func("F", 1, w.clone());
        let got = apply_redefinition(&f1, &r);
        let expect = SolutionExpr::exp(SolutionExpr::Scalar(y(&v).neg())).mul(
            &SolutionExpr::func("H", 2, w.clone()).sub(&SolutionExpr::func("H", 1, w)),
        );
        assert!(got.equivalent(&expect));
    }

    #[test]
    fn print_parse_roundtrip() {
        let v = ctx();
        let e = SolutionExpr::exp(SolutionExpr::Scalar(x(&v).add(&y(&v))))
            .mul(&SolutionExpr::func("F1", 2, CharVar::Linear(x(&v).sub(&y(&v)))))
            .add(&SolutionExpr::func("G1", 0, CharVar::Linear(x(&v))).mul_scalar(&Scalar::int(&v, 2)));
        let printed = e.to_dsl();
        let parsed = crate::dsl::parse_solution_expr(&v, &printed, &Default::default()).unwrap();
        assert!(parsed.equivalent(&e));
    }
}
