//! Normalized rational functions: the coefficient field for everything else.

use num::bigint::BigInt;
use num::rational::BigRational;
use num::{One, Signed};
use std::cmp::Ordering;
use std::fmt;

use super::poly::{self, Poly};
use super::vars::Vars;
use thiserror::Error;

#[derive(Debug, Error, Clone, PartialEq)]
pub enum ScalarError {
    #[error("division by the zero scalar")]
    DivisionByZero,
    #[error("`{0}` is not an independent variable")]
    NotIndependent(String),
    #[error("evaluation at a pole (|denominator| = {0:e})")]
    Pole(f64),
}

/// Canonical fraction of two multivariate polynomials.
///
/// Invariants kept by every constructor: the denominator is nonzero,
/// `gcd(num, den) = 1`, the denominator's leading coefficient (graded-lex,
/// independent variables before parameters) is 1, and the zero scalar is
/// `0/1`.  Two scalars are equal iff structurally identical.
#[derive(Debug, Clone, PartialEq, Eq, Hash)]
pub struct Scalar {
    vars: Vars,
    num: Poly,
    den: Poly,
}

impl Scalar {
    fn make(vars: Vars, num: Poly, den: Poly) -> Scalar {
        assert!(!den.is_zero(), "zero denominator");
        if num.is_zero() {
            return Scalar {
                num: Poly::zero(vars.arity()),
                den: Poly::one(vars.arity()),
                vars,
            };
        }
        let g = poly::gcd(&num, &den);
        let mut num = num.exact_div(&g).unwrap();
        let mut den = den.exact_div(&g).unwrap();
        let lc = den.leading().unwrap().1.clone();
        if !lc.is_one() {
            let inv = lc.recip();
            num = num.scale(&inv);
            den = den.scale(&inv);
        }
        Scalar { vars, num, den }
    }

    pub fn from_poly(vars: Vars, num: Poly) -> Scalar {
        let arity = vars.arity();
        Scalar::make(vars, num, Poly::one(arity))
    }

    pub fn fraction(vars: Vars, num: Poly, den: Poly) -> Scalar {
        Scalar::make(vars, num, den)
    }

    pub fn zero(vars: &Vars) -> Scalar {
        Scalar::from_poly(vars.clone(), Poly::zero(vars.arity()))
    }

    pub fn one(vars: &Vars) -> Scalar {
        Scalar::int(vars, 1)
    }

    pub fn int(vars: &Vars, c: i64) -> Scalar {
        Scalar::from_poly(vars.clone(), Poly::from_int(vars.arity(), c))
    }

    pub fn rational(vars: &Vars, c: BigRational) -> Scalar {
        Scalar::from_poly(vars.clone(), Poly::constant(vars.arity(), c))
    }

    pub fn ratio(vars: &Vars, num: i64, den: i64) -> Scalar {
        Scalar::rational(vars, BigRational::new(BigInt::from(num), BigInt::from(den)))
    }

    /// The symbol in the given slot (independent variable or parameter).
    pub fn slot_var(vars: &Vars, slot: usize) -> Scalar {
        Scalar::from_poly(vars.clone(), Poly::var(vars.arity(), slot))
    }

    pub fn named(vars: &Vars, name: &str) -> Option<Scalar> {
        vars.slot(name).map(|s| Scalar::slot_var(vars, s))
    }

    pub fn vars(&self) -> &Vars {
        &self.vars
    }

    pub fn num(&self) -> &Poly {
        &self.num
    }

    pub fn den(&self) -> &Poly {
        &self.den
    }

    pub fn is_zero(&self) -> bool {
        self.num.is_zero()
    }

    pub fn is_one(&self) -> bool {
        self.num.is_one() && self.den.is_one()
    }

    pub fn is_constant(&self) -> bool {
        self.num.is_constant() && self.den.is_constant()
    }

    pub fn as_rational(&self) -> Option<BigRational> {
        match (self.num.as_constant(), self.den.as_constant()) {
            (Some(n), Some(d)) => Some(n / d),
            _ => None,
        }
    }

    pub fn as_i64(&self) -> Option<i64> {
        let r = self.as_rational()?;
        if !r.denom().is_one() {
            return None;
        }
        r.numer().to_string().parse().ok()
    }

    fn same_ctx(&self, other: &Scalar) {
        assert!(
            self.vars == other.vars,
            "scalars from different variable contexts"
        );
    }

    pub fn add(&self, other: &Scalar) -> Scalar {
        self.same_ctx(other);
        let num = self
            .num
            .mul(&other.den)
            .add(&other.num.mul(&self.den));
        Scalar::make(self.vars.clone(), num, self.den.mul(&other.den))
    }

    pub fn sub(&self, other: &Scalar) -> Scalar {
        self.add(&other.neg())
    }

    pub fn neg(&self) -> Scalar {
        Scalar {
            vars: self.vars.clone(),
            num: self.num.neg(),
            den: self.den.clone(),
        }
    }

    pub fn mul(&self, other: &Scalar) -> Scalar {
        self.same_ctx(other);
        Scalar::make(
            self.vars.clone(),
            self.num.mul(&other.num),
            self.den.mul(&other.den),
        )
    }

    pub fn div(&self, other: &Scalar) -> Result<Scalar, ScalarError> {
        self.same_ctx(other);
        if other.is_zero() {
            return Err(ScalarError::DivisionByZero);
        }
        Ok(Scalar::make(
            self.vars.clone(),
            self.num.mul(&other.den),
            self.den.mul(&other.num),
        ))
    }

    pub fn inv(&self) -> Result<Scalar, ScalarError> {
        Scalar::one(&self.vars).div(self)
    }

    pub fn pow(&self, e: i64) -> Result<Scalar, ScalarError> {
        if e < 0 && self.is_zero() {
            return Err(ScalarError::DivisionByZero);
        }
        let base = if e < 0 { self.inv()? } else { self.clone() };
        let mut out = Scalar::one(&self.vars);
        for _ in 0..e.unsigned_abs() {
            out = out.mul(&base);
        }
        Ok(out)
    }

    pub fn scale_int(&self, c: i64) -> Scalar {
        self.mul(&Scalar::int(&self.vars, c))
    }

    /// Exact partial derivative with respect to one independent variable.
    pub fn diff(&self, slot: usize) -> Scalar {
        assert!(slot < 2, "derivative slot must be an independent variable");
        self.diff_any(slot)
    }

    /// Derivative by name with the public contract: parameters are rejected.
    pub fn diff_named(&self, name: &str) -> Result<Scalar, ScalarError> {
        match self.vars.slot(name) {
            Some(s) if s < 2 => Ok(self.diff(s)),
            _ => Err(ScalarError::NotIndependent(name.to_string())),
        }
    }

    pub(crate) fn diff_any(&self, slot: usize) -> Scalar {
        // (n/d)' = (n'd - nd')/d^2
        let num = self
            .num
            .derivative(slot)
            .mul(&self.den)
            .sub(&self.num.mul(&self.den.derivative(slot)));
        Scalar::make(self.vars.clone(), num, self.den.mul(&self.den))
    }

    /// Substitute each slot by the given scalar (used for chart changes).
    pub fn compose(&self, repl: &[Scalar]) -> Scalar {
        assert_eq!(repl.len(), self.vars.arity());
        let vars = repl
            .first()
            .map(|s| s.vars.clone())
            .unwrap_or_else(|| self.vars.clone());
        let mut num = Scalar::zero(&vars);
        // Horner would be better; term-by-term is fine at this scale.
        for (m, c) in &self.num.terms {
            let mut t = Scalar::rational(&vars, c.clone());
            for (slot, &e) in m.0.iter().enumerate() {
                for _ in 0..e {
                    t = t.mul(&repl[slot]);
                }
            }
            num = num.add(&t);
        }
        let mut den = Scalar::zero(&vars);
        for (m, c) in &self.den.terms {
            let mut t = Scalar::rational(&vars, c.clone());
            for (slot, &e) in m.0.iter().enumerate() {
                for _ in 0..e {
                    t = t.mul(&repl[slot]);
                }
            }
            den = den.add(&t);
        }
        num.div(&den).expect("composition produced zero denominator")
    }

    /// Numeric evaluation; the first two entries of `point` are the
    /// independent variables, the rest the parameters in order.
    pub fn eval_f64(&self, point: &[f64]) -> Result<f64, ScalarError> {
        let d = self.den.eval_f64(point);
        if d.abs() < 1e-9 {
            return Err(ScalarError::Pole(d.abs()));
        }
        Ok(self.num.eval_f64(point) / d)
    }
}

/// Structural order (used only for deterministic sorting of expressions).
impl Ord for Scalar {
    fn cmp(&self, other: &Self) -> Ordering {
        (&self.num.terms, &self.den.terms).cmp(&(&other.num.terms, &other.den.terms))
    }
}

impl PartialOrd for Scalar {
    fn partial_cmp(&self, other: &Self) -> Option<Ordering> {
        Some(self.cmp(other))
    }
}

impl fmt::Display for Scalar {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "{}", self.to_dsl())
    }
}

impl Scalar {
    /// Canonical printed form; parses back to the same scalar.
    pub fn to_dsl(&self) -> String {
        let n = poly::format_poly(&self.num, &self.vars);
        if self.den.is_one() {
            return n;
        }
        let d = poly::format_poly(&self.den, &self.vars);
        let np = if self.num.terms.len() > 1 || n.starts_with('-') || n.contains('/') {
            format!("({n})")
        } else {
            n
        };
        let dp = if self.den.terms.len() > 1 || self.den.leading().map(|(m, _)| m.degree() > 1).unwrap_or(false) {
            format!("({d})")
        } else {
            d
        };
        format!("{np}/{dp}")
    }

    /// True if the printed form needs parentheses inside a product.
    pub fn needs_parens_in_product(&self) -> bool {
        if !self.den.is_one() {
            return false; // already a tight fraction like (a)/(b)
        }
        self.num.terms.len() > 1
            || self
                .num
                .leading()
                .map(|(_, c)| c.is_negative() || !c.is_one())
                .unwrap_or(true)
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::expr::vars::VarSpec;

    fn ctx() -> Vars {
        VarSpec::new("x", "y", &["c"])
    }

    fn sc(v: &Vars, s: &str) -> Scalar {
        crate::dsl::parse_scalar(v, s).unwrap()
    }

    #[test]
    fn quotient_of_equal_is_one() {
        let v = ctx();
        let x = Scalar::slot_var(&v, 0);
        let y = Scalar::slot_var(&v, 1);
        let s = x.add(&y);
        assert!(s.div(&s).unwrap().is_one());
    }

    #[test]
    fn example_one_recurrence_step() {
        // c/(x+y)^2 - 2/(x+y)^2 = (c-2)/(x+y)^2
        let v = ctx();
        let x = Scalar::slot_var(&v, 0);
        let y = Scalar::slot_var(&v, 1);
        let c = Scalar::slot_var(&v, 2);
        let den = x.add(&y).pow(2).unwrap();
        let lhs = c.div(&den).unwrap().sub(&Scalar::int(&v, 2).div(&den).unwrap());
        let rhs = c.sub(&Scalar::int(&v, 2)).div(&den).unwrap();
        assert_eq!(lhs, rhs);
    }

    #[test]
    fn zero_divisor_is_an_error() {
        let v = ctx();
        let x = Scalar::slot_var(&v, 0);
        assert_eq!(x.div(&Scalar::zero(&v)), Err(ScalarError::DivisionByZero));
    }

    #[test]
    fn derivative_of_inverse_sum() {
        // d/dx 1/(x+y) = -1/(x+y)^2
        let v = ctx();
        let x = Scalar::slot_var(&v, 0);
        let y = Scalar::slot_var(&v, 1);
        let s = x.add(&y).inv().unwrap();
        let expect = x.add(&y).pow(2).unwrap().inv().unwrap().neg();
        assert_eq!(s.diff(0), expect);
    }

    #[test]
    fn parameters_are_constants() {
        // d/dx (c*x^2) = 2*c*x, d/dc errors
        let v = ctx();
        let x = Scalar::slot_var(&v, 0);
        let c = Scalar::slot_var(&v, 2);
        let s = c.mul(&x).mul(&x);
        assert_eq!(s.diff_named("x").unwrap(), c.mul(&x).scale_int(2));
        assert!(matches!(
            s.diff_named("c"),
            Err(ScalarError::NotIndependent(_))
        ));
    }

    #[test]
    fn quotient_rule_oracle() {
        // d/dy [x/(x-y)] = x/(x-y)^2
        let v = ctx();
        let x = Scalar::slot_var(&v, 0);
        let y = Scalar::slot_var(&v, 1);
        let s = x.div(&x.sub(&y)).unwrap();
        let expect = x.div(&x.sub(&y).pow(2).unwrap()).unwrap();
        assert_eq!(s.diff(1), expect);
    }

    #[test]
    fn denominator_normalized_monic() {
        let v = ctx();
        // (1)/(2x + 2) must normalize the denominator to x + 1
        let s = sc(&v, "1/(2*x + 2)");
        assert_eq!(s.to_dsl(), "(1/2)/(x + 1)");
        // structural equality after independent construction
        let x = Scalar::slot_var(&v, 0);
        let t = Scalar::ratio(&v, 1, 2)
            .div(&x.add(&Scalar::one(&v)))
            .unwrap();
        assert_eq!(s, t);
    }

    #[test]
    fn mixed_derivatives_commute() {
        let v = ctx();
        let s = sc(&v, "(x^2*y - c)/(x + y^3)");
        assert_eq!(s.diff(0).diff(1), s.diff(1).diff(0));
    }
}
