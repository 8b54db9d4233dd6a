//! Linear partial differential operators in two independent variables and
//! the non-commutative algebra of characteristic operators.

use num::rational::BigRational;
use num::{Signed, Zero};
use std::collections::BTreeMap;
use std::fmt;

use crate::expr::linalg;
use crate::expr::poly::{self, Poly};
use crate::expr::scalar::Scalar;
use crate::expr::solution::SolutionExpr;
use crate::expr::vars::Vars;
use thiserror::Error;

#[derive(Debug, Error, Clone, PartialEq)]
pub enum LpdoError {
    #[error("characteristic operators are dependent (proportional directions)")]
    DependentOperators,
    #[error("principal symbol does not split over the coefficient field; irreducible factor of degree {degree}: {certificate}")]
    NonSplitting { degree: usize, certificate: String },
    #[error("repeated characteristic root; the operator is not strictly hyperbolic")]
    RepeatedRoots,
    #[error("degenerate leading form")]
    DegenerateLeading,
    #[error("leading form is not a scalar multiple of the product of the basis symbols")]
    LeadingMismatch,
    #[error("lower-order terms are not representable in the increasing-index word basis at order {0}")]
    RepresentationFailure(usize),
    #[error("operator must have order {expected}, found {found}")]
    WrongOrder { expected: usize, found: usize },
}

/// First-order characteristic operator `m Dx + n Dy`.
#[derive(Debug, Clone, PartialEq, Eq, PartialOrd, Ord, Hash)]
pub struct CharOperator {
    pub m: Scalar,
    pub n: Scalar,
}

impl CharOperator {
    pub fn new(m: Scalar, n: Scalar) -> CharOperator {
        assert!(!(m.is_zero() && n.is_zero()), "zero characteristic operator");
        CharOperator { m, n }
    }

    pub fn dx(vars: &Vars) -> CharOperator {
        CharOperator::new(Scalar::one(vars), Scalar::zero(vars))
    }

    pub fn dy(vars: &Vars) -> CharOperator {
        CharOperator::new(Scalar::zero(vars), Scalar::one(vars))
    }

    pub fn vars(&self) -> &Vars {
        self.m.vars()
    }

    pub fn is_constant(&self) -> bool {
        self.m.is_constant() && self.n.is_constant()
    }

    /// Directional derivative of a scalar.
    pub fn apply_scalar(&self, s: &Scalar) -> Scalar {
        self.m.mul(&s.diff(0)).add(&self.n.mul(&s.diff(1)))
    }

    pub fn apply(&self, e: &SolutionExpr) -> SolutionExpr {
        e.apply_char(self)
    }

    pub fn to_lpdo(&self) -> Lpdo {
        let mut t = BTreeMap::new();
        if !self.m.is_zero() {
            t.insert((1u32, 0u32), self.m.clone());
        }
        if !self.n.is_zero() {
            t.insert((0u32, 1u32), self.n.clone());
        }
        Lpdo {
            vars: self.vars().clone(),
            terms: t,
        }
    }

    pub fn scale(&self, g: &Scalar) -> CharOperator {
        CharOperator::new(self.m.mul(g), self.n.mul(g))
    }

    /// `m1 n2 - m2 n1`, nonzero iff the directions are independent.
    pub fn wronskian(&self, other: &CharOperator) -> Scalar {
        self.m.mul(&other.n).sub(&other.m.mul(&self.n))
    }

    pub fn independent(&self, other: &CharOperator) -> bool {
        !self.wronskian(other).is_zero()
    }

    /// Canonical rescaling: denominators cleared, polynomial content removed,
    /// leading coefficient positive.  Constant operators end up with coprime
    /// integer coefficients and positive leading entry.
    pub fn canonical(&self) -> CharOperator {
        let vars = self.vars().clone();
        // common denominator
        let den = self.m.den().mul(self.n.den());
        let mp = self.m.num().mul(self.n.den());
        let np = self.n.num().mul(self.m.den());
        let _ = den;
        let g = poly::gcd(&mp, &np);
        let mut m = mp.exact_div(&g).unwrap();
        let mut n = np.exact_div(&g).unwrap();
        let cm = if m.is_zero() { None } else { Some(m.content()) };
        let cn = if n.is_zero() { None } else { Some(n.content()) };
        let lead_neg = match (&cm, &cn) {
            (Some(c), _) => c.is_negative(),
            (None, Some(c)) => c.is_negative(),
            _ => false,
        };
        // scale so coefficients are primitive integers jointly
        let content = match (cm, cn) {
            (Some(a), Some(b)) => gcd_rational(&a, &b),
            (Some(a), None) => a.abs(),
            (None, Some(b)) => b.abs(),
            (None, None) => unreachable!(),
        };
        let scale = if lead_neg { -content } else { content };
        m = m.scale(&scale.recip());
        n = n.scale(&scale.recip());
        CharOperator::new(Scalar::from_poly(vars.clone(), m), Scalar::from_poly(vars, n))
    }

    pub fn to_dsl(&self) -> String {
        let vars = self.vars();
        let dx = format!("D{}", vars.first);
        let dy = format!("D{}", vars.second);
        let mut parts = Vec::new();
        if !self.m.is_zero() {
            parts.push(coeff_times(&self.m, &dx));
        }
        if !self.n.is_zero() {
            let t = coeff_times(&self.n, &dy);
            if parts.is_empty() {
                parts.push(t);
            } else if let Some(rest) = t.strip_prefix('-') {
                parts.push(format!("- {rest}"));
            } else {
                parts.push(format!("+ {t}"));
            }
        }
        parts.join(" ")
    }
}

fn gcd_rational(a: &BigRational, b: &BigRational) -> BigRational {
    let num = num::integer::gcd(a.numer().abs(), b.numer().abs());
    let den = num::integer::lcm(a.denom().clone(), b.denom().clone());
    BigRational::new(num, den)
}

fn coeff_times(c: &Scalar, atom: &str) -> String {
    if c.is_one() {
        return atom.to_string();
    }
    if c.as_i64() == Some(-1) {
        return format!("-{atom}");
    }
    let cs = c.to_dsl();
    if c.needs_parens_in_product() {
        format!("({cs})*{atom}")
    } else {
        format!("{cs}*{atom}")
    }
}

impl fmt::Display for CharOperator {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "{}", self.to_dsl())
    }
}

/// Commutator decomposition `[X1, X2] = P X1 + Q X2`.
#[derive(Debug, Clone, PartialEq)]
pub struct CommutatorDecomposition {
    pub p: Scalar,
    pub q: Scalar,
}

pub fn commutator_decompose(
    x1: &CharOperator,
    x2: &CharOperator,
) -> Result<CommutatorDecomposition, LpdoError> {
    let det = x1.wronskian(x2);
    if det.is_zero() {
        return Err(LpdoError::DependentOperators);
    }
    // [X1, X2] = (X1 m2 - X2 m1) Dx + (X1 n2 - X2 n1) Dy
    let wm = x1.apply_scalar(&x2.m).sub(&x2.apply_scalar(&x1.m));
    let wn = x1.apply_scalar(&x2.n).sub(&x2.apply_scalar(&x1.n));
    // solve P (m1, n1) + Q (m2, n2) = (wm, wn)
    let p = wm.mul(&x2.n).sub(&x2.m.mul(&wn)).div(&det).unwrap();
    let q = x1.m.mul(&wn).sub(&wm.mul(&x1.n)).div(&det).unwrap();
    Ok(CommutatorDecomposition { p, q })
}

// ---------------------------------------------------------------------------
// LPDO
// ---------------------------------------------------------------------------

/// General linear partial differential operator `Σ p_{i,j} Dx^i Dy^j` with
/// scalar coefficients; no explicitly stored zero coefficients.
#[derive(Debug, Clone, PartialEq, Eq, Hash)]
pub struct Lpdo {
    vars: Vars,
    terms: BTreeMap<(u32, u32), Scalar>,
}

impl Lpdo {
    pub fn zero(vars: &Vars) -> Lpdo {
        Lpdo {
            vars: vars.clone(),
            terms: BTreeMap::new(),
        }
    }

    pub fn identity(vars: &Vars) -> Lpdo {
        Lpdo::scalar(Scalar::one(vars))
    }

    pub fn scalar(s: Scalar) -> Lpdo {
        let vars = s.vars().clone();
        let mut t = BTreeMap::new();
        if !s.is_zero() {
            t.insert((0, 0), s);
        }
        Lpdo { vars, terms: t }
    }

    pub fn monomial(vars: &Vars, i: u32, j: u32, coeff: Scalar) -> Lpdo {
        let mut t = BTreeMap::new();
        if !coeff.is_zero() {
            t.insert((i, j), coeff);
        }
        Lpdo {
            vars: vars.clone(),
            terms: t,
        }
    }

    pub fn dx(vars: &Vars) -> Lpdo {
        Lpdo::monomial(vars, 1, 0, Scalar::one(vars))
    }

    pub fn dy(vars: &Vars) -> Lpdo {
        Lpdo::monomial(vars, 0, 1, Scalar::one(vars))
    }

    pub fn vars(&self) -> &Vars {
        &self.vars
    }

    pub fn terms(&self) -> &BTreeMap<(u32, u32), Scalar> {
        &self.terms
    }

    pub fn coeff(&self, i: u32, j: u32) -> Scalar {
        self.terms
            .get(&(i, j))
            .cloned()
            .unwrap_or_else(|| Scalar::zero(&self.vars))
    }

    pub fn is_zero(&self) -> bool {
        self.terms.is_empty()
    }

    pub fn order(&self) -> u32 {
        self.terms.keys().map(|(i, j)| i + j).max().unwrap_or(0)
    }

    fn insert(&mut self, key: (u32, u32), c: Scalar) {
        if c.is_zero() {
            return;
        }
        use std::collections::btree_map::Entry;
        match self.terms.entry(key) {
            Entry::Vacant(e) => {
                e.insert(c);
            }
            Entry::Occupied(mut e) => {
                let v = e.get().add(&c);
                if v.is_zero() {
                    e.remove();
                } else {
                    *e.get_mut() = v;
                }
            }
        }
    }

    pub fn add(&self, other: &Lpdo) -> Lpdo {
        let mut out = self.clone();
        for (k, c) in &other.terms {
            out.insert(*k, c.clone());
        }
        out
    }

    pub fn sub(&self, other: &Lpdo) -> Lpdo {
        self.add(&other.scale(&Scalar::int(&self.vars, -1)))
    }

    /// Left multiplication by a scalar function.
    pub fn scale(&self, s: &Scalar) -> Lpdo {
        let mut out = Lpdo::zero(&self.vars);
        for (k, c) in &self.terms {
            out.insert(*k, c.mul(s));
        }
        out
    }

    /// `Dx ∘ self` (slot 0) or `Dy ∘ self` (slot 1): shift plus coefficient
    /// derivative (Leibniz).
    fn derive_compose(&self, slot: usize) -> Lpdo {
        let mut out = Lpdo::zero(&self.vars);
        for ((i, j), c) in &self.terms {
            let shifted = if slot == 0 { (*i + 1, *j) } else { (*i, *j + 1) };
            out.insert(shifted, c.clone());
            out.insert((*i, *j), c.diff(slot));
        }
        out
    }

    /// Exact operator composition `self ∘ other`.
    pub fn compose(&self, other: &Lpdo) -> Lpdo {
        assert!(self.vars == other.vars, "operator contexts differ");
        let mut out = Lpdo::zero(&self.vars);
        for ((i, j), c) in &self.terms {
            let mut part = other.clone();
            for _ in 0..*j {
                part = part.derive_compose(1);
            }
            for _ in 0..*i {
                part = part.derive_compose(0);
            }
            out = out.add(&part.scale(c));
        }
        out
    }

    /// Apply to a solution expression.
    pub fn apply(&self, u: &SolutionExpr) -> SolutionExpr {
        let mut parts = Vec::new();
        for ((i, j), c) in &self.terms {
            let mut cur = u.clone();
            for _ in 0..*j {
                cur = cur.diff(1);
            }
            for _ in 0..*i {
                cur = cur.diff(0);
            }
            parts.push(cur.mul_scalar(c));
        }
        if parts.is_empty() {
            SolutionExpr::zero(&self.vars)
        } else {
            SolutionExpr::Sum(parts)
        }
    }

    /// Coefficients of the principal symbol: `(i, j) -> p_{i,j}` with `i+j = order`.
    pub fn leading_form(&self) -> BTreeMap<(u32, u32), Scalar> {
        let n = self.order();
        self.terms
            .iter()
            .filter(|((i, j), _)| i + j == n)
            .map(|(k, v)| (*k, v.clone()))
            .collect()
    }

    pub fn to_dsl(&self) -> String {
        if self.terms.is_empty() {
            return "0".to_string();
        }
        let dxn = format!("D{}", self.vars.first);
        let dyn_ = format!("D{}", self.vars.second);
        // order terms: descending total order, then descending i
        let mut keys: Vec<(u32, u32)> = self.terms.keys().cloned().collect();
        keys.sort_by(|a, b| {
            (b.0 + b.1, b.0)
                .partial_cmp(&(a.0 + a.1, a.0))
                .unwrap()
        });
        let mut out = String::new();
        for (idx, (i, j)) in keys.iter().enumerate() {
            let c = &self.terms[&(*i, *j)];
            let mut atoms: Vec<String> = Vec::new();
            if *i == 1 {
                atoms.push(dxn.clone());
            } else if *i > 1 {
                atoms.push(format!("{dxn}^{i}"));
            }
            if *j == 1 {
                atoms.push(dyn_.clone());
            } else if *j > 1 {
                atoms.push(format!("{dyn_}^{j}"));
            }
            let atom = atoms.join("*");
            let term = if atom.is_empty() {
                c.to_dsl()
            } else {
                coeff_times(c, &atom)
            };
            if idx == 0 {
                out.push_str(&term);
            } else if let Some(rest) = term.strip_prefix('-') {
                out.push_str(" - ");
                out.push_str(rest);
            } else {
                out.push_str(" + ");
                out.push_str(&term);
            }
        }
        out
    }
}

impl fmt::Display for Lpdo {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "{}", self.to_dsl())
    }
}

// ---------------------------------------------------------------------------
// characteristic roots
// ---------------------------------------------------------------------------

/// Characteristic directions of the principal symbol, as canonically scaled
/// pairwise-distinct first-order operators.  The factor `Dy` (the root "at
/// infinity" of the symbol polynomial) is handled through the projective
/// representation.
pub fn characteristic_roots(a: &Lpdo) -> Result<Vec<CharOperator>, LpdoError> {
    let vars = a.vars().clone();
    let n = a.order() as usize;
    if n < 1 {
        return Err(LpdoError::DegenerateLeading);
    }
    // symbol polynomial phi(t) = sum_{i+j=n} p_{i,j} t^i
    let lead = a.leading_form();
    let mut phi = vec![Scalar::zero(&vars); n + 1];
    for ((i, _), c) in &lead {
        phi[*i as usize] = c.clone();
    }
    let mut deg = n;
    while deg > 0 && phi[deg].is_zero() {
        deg -= 1;
    }
    if deg == 0 && phi[0].is_zero() {
        return Err(LpdoError::DegenerateLeading);
    }
    let inf_mult = n - deg;
    if inf_mult > 1 {
        return Err(LpdoError::RepeatedRoots);
    }
    let mut roots: Vec<CharOperator> = Vec::new();
    if inf_mult == 1 {
        roots.push(CharOperator::dy(&vars));
    }
    // strip zero roots (factor Dx)
    let mut lo = 0;
    while lo <= deg && phi[lo].is_zero() {
        lo += 1;
    }
    if lo > 1 {
        return Err(LpdoError::RepeatedRoots);
    }
    if lo == 1 {
        roots.push(CharOperator::dx(&vars));
    }
    let mut coeffs: Vec<Scalar> = phi[lo..=deg].to_vec();
    for lambda in univariate_roots(&coeffs, &vars)? {
        // X = Dx - lambda Dy
        roots.push(CharOperator::new(Scalar::one(&vars), lambda.neg()).canonical());
        // deflate happens inside univariate_roots
    }
    coeffs.clear();
    if roots.len() != n {
        return Err(LpdoError::RepeatedRoots);
    }
    for i in 0..roots.len() {
        for j in (i + 1)..roots.len() {
            if !roots[i].independent(&roots[j]) {
                return Err(LpdoError::RepeatedRoots);
            }
        }
    }
    roots.sort_by_key(|r| r.to_dsl());
    Ok(roots)
}

pub fn scalar_sqrt(s: &Scalar) -> Option<Scalar> {
    let n = poly::sqrt(s.num())?;
    let d = poly::sqrt(s.den())?;
    Some(
        Scalar::from_poly(s.vars().clone(), n)
            .div(&Scalar::from_poly(s.vars().clone(), d))
            .unwrap(),
    )
}

/// All roots in the coefficient field of a dense univariate polynomial with
/// scalar coefficients (ascending), used for symbol factorization and for the
/// eigenvalues of first-order systems.
pub fn univariate_roots_pub(coeffs: &[Scalar], vars: &Vars) -> Result<Vec<Scalar>, LpdoError> {
    // strip zero roots first
    let mut c: Vec<Scalar> = coeffs.to_vec();
    let mut out = Vec::new();
    while c.len() > 1 && c[0].is_zero() {
        out.push(Scalar::zero(vars));
        c.remove(0);
    }
    out.extend(univariate_roots(&c, vars)?);
    Ok(out)
}

fn univariate_roots(coeffs: &[Scalar], vars: &Vars) -> Result<Vec<Scalar>, LpdoError> {
    let mut c: Vec<Scalar> = coeffs.to_vec();
    let mut out = Vec::new();
    loop {
        while c.len() > 1 && c.last().unwrap().is_zero() {
            c.pop();
        }
        let deg = c.len() - 1;
        match deg {
            0 => return Ok(out),
            1 => {
                out.push(c[0].div(&c[1]).unwrap().neg());
                return Ok(out);
            }
            2 => {
                let disc = c[1]
                    .mul(&c[1])
                    .sub(&c[0].mul(&c[2]).scale_int(4));
                let Some(s) = scalar_sqrt(&disc) else {
                    return Err(LpdoError::NonSplitting {
                        degree: 2,
                        certificate: poly_string(&c, vars),
                    });
                };
                let two_a = c[2].scale_int(2);
                out.push(c[1].neg().add(&s).div(&two_a).unwrap());
                out.push(c[1].neg().sub(&s).div(&two_a).unwrap());
                return Ok(out);
            }
            _ => {
                let Some(root) = search_rational_root(&c, vars) else {
                    return Err(LpdoError::NonSplitting {
                        degree: deg,
                        certificate: poly_string(&c, vars),
                    });
                };
                out.push(root.clone());
                c = deflate(&c, &root, vars);
            }
        }
    }
}

fn poly_string(c: &[Scalar], _vars: &Vars) -> String {
    let mut parts = Vec::new();
    for (i, s) in c.iter().enumerate().rev() {
        if s.is_zero() {
            continue;
        }
        let t = if i == 0 {
            format!("({})", s.to_dsl())
        } else if i == 1 {
            format!("({})*t", s.to_dsl())
        } else {
            format!("({})*t^{}", s.to_dsl(), i)
        };
        parts.push(t);
    }
    parts.join(" + ")
}

fn deflate(c: &[Scalar], root: &Scalar, vars: &Vars) -> Vec<Scalar> {
    // synthetic division by (t - root)
    let deg = c.len() - 1;
    let mut q = vec![Scalar::zero(vars); deg];
    let mut carry = Scalar::zero(vars);
    for i in (0..deg).rev() {
        let coef = c[i + 1].add(&carry);
        q[i] = coef.clone();
        carry = coef.mul(root);
    }
    q
}

fn eval_poly(c: &[Scalar], at: &Scalar, vars: &Vars) -> Scalar {
    let mut acc = Scalar::zero(vars);
    for s in c.iter().rev() {
        acc = acc.mul(at).add(s);
    }
    acc
}

/// Candidate search for a root `c * u / v` with `u | trailing`, `v | leading`
/// over the polynomial ring and `c` a rational built from the integer
/// contents.  Complete for the desk-scale coefficient shapes used by the
/// examples; other inputs fail over to the non-splitting error.
fn search_rational_root(c: &[Scalar], vars: &Vars) -> Option<Scalar> {
    let lo = poly_of_scalar(&c[0]);
    let hi = poly_of_scalar(c.last().unwrap());
    let u_divs = poly_divisors(&lo);
    let v_divs = poly_divisors(&hi);
    let rat_cands = rational_candidates(&lo, &hi);
    if u_divs.len() * v_divs.len() * rat_cands.len() > 4096 {
        return None;
    }
    for u in &u_divs {
        for v in &v_divs {
            for r in &rat_cands {
                for sign in [1i64, -1] {
                    let cand = Scalar::from_poly(vars.clone(), u.clone())
                        .div(&Scalar::from_poly(vars.clone(), v.clone()))
                        .ok()?
                        .mul(&Scalar::rational(vars, r.clone()))
                        .scale_int(sign);
                    if eval_poly(c, &cand, vars).is_zero() {
                        return Some(cand);
                    }
                }
            }
        }
    }
    None
}

fn poly_of_scalar(s: &Scalar) -> Poly {
    // numerator is enough: denominators only contribute unit factors to the
    // candidate ratios, which the rational candidates cover
    s.num().clone()
}

fn poly_divisors(p: &Poly) -> Vec<Poly> {
    if p.is_zero() {
        return vec![Poly::one(p.arity)];
    }
    let mut factors: Vec<(Poly, u32)> = Vec::new();
    // monomial part
    let mut rest = p.primitive();
    for slot in 0..p.arity {
        let mut mult = 0u32;
        loop {
            let v = Poly::var(p.arity, slot);
            match rest.exact_div(&v) {
                Some(q) if mult < 8 => {
                    rest = q;
                    mult += 1;
                }
                _ => break,
            }
        }
        if mult > 0 {
            factors.push((Poly::var(p.arity, slot), mult));
        }
    }
    if !rest.is_constant() {
        for b in poly::gcd_free_basis(&[rest.clone()]) {
            let mut mult = 0u32;
            let mut r = rest.clone();
            while let Some(q) = r.exact_div(&b) {
                r = q;
                mult += 1;
                if mult > 8 {
                    break;
                }
            }
            if mult > 0 {
                factors.push((b, mult));
            }
        }
    }
    let mut out = vec![Poly::one(p.arity)];
    for (f, mult) in factors {
        let mut next = Vec::new();
        for d in &out {
            let mut acc = d.clone();
            next.push(acc.clone());
            for _ in 0..mult {
                acc = acc.mul(&f);
                next.push(acc.clone());
            }
        }
        out = next;
        if out.len() > 256 {
            out.truncate(256);
            break;
        }
    }
    out.sort();
    out.dedup();
    out
}

fn rational_candidates(lo: &Poly, hi: &Poly) -> Vec<BigRational> {
    use num::bigint::BigInt;
    let c0 = lo.content();
    let cd = hi.content();
    let n0 = c0.numer().abs() * cd.denom().abs();
    let nd = cd.numer().abs() * c0.denom().abs();
    let mut nums = int_divisors(&n0);
    let dens = int_divisors(&nd);
    nums.push(BigInt::from(1));
    let mut out = Vec::new();
    for n in &nums {
        for d in &dens {
            if d.is_zero() {
                continue;
            }
            let r = BigRational::new(n.clone(), d.clone());
            if !out.contains(&r) {
                out.push(r);
            }
        }
    }
    if out.is_empty() {
        out.push(BigRational::from(BigInt::from(1)));
    }
    out
}

fn int_divisors(n: &num::bigint::BigInt) -> Vec<num::bigint::BigInt> {
    use num::bigint::BigInt;
    use num::ToPrimitive;
    let mut out = vec![BigInt::from(1)];
    let Some(mut v) = n.abs().to_u64() else {
        return out;
    };
    if v == 0 {
        return out;
    }
    let mut push = |d: u64| {
        let b = BigInt::from(d);
        if !out.contains(&b) {
            out.push(b);
        }
    };
    let mut d = 2u64;
    let mut primes: Vec<(u64, u32)> = Vec::new();
    while d * d <= v {
        let mut e = 0;
        while v % d == 0 {
            v /= d;
            e += 1;
        }
        if e > 0 {
            primes.push((d, e));
        }
        d += 1;
    }
    if v > 1 {
        primes.push((v, 1));
    }
    let mut divs: Vec<u64> = vec![1];
    for (p, e) in primes {
        let mut next = Vec::new();
        for &q in &divs {
            let mut acc = q;
            next.push(acc);
            for _ in 0..e {
                acc = acc.saturating_mul(p);
                next.push(acc);
            }
        }
        divs = next;
        divs.sort_unstable();
        divs.dedup();
        if divs.len() > 128 {
            divs.truncate(128);
        }
    }
    for q in divs {
        push(q);
    }
    out
}

// ---------------------------------------------------------------------------
// non-commutative operator polynomials
// ---------------------------------------------------------------------------

/// Finite scalar-coefficient combination of words over a fixed alphabet of
/// characteristic operators.
#[derive(Debug, Clone, PartialEq)]
pub struct NcOpPoly {
    pub basis: Vec<CharOperator>,
    pub terms: BTreeMap<Vec<u8>, Scalar>,
}

impl NcOpPoly {
    pub fn new(basis: Vec<CharOperator>) -> NcOpPoly {
        NcOpPoly {
            basis,
            terms: BTreeMap::new(),
        }
    }

    pub fn vars(&self) -> &Vars {
        self.basis[0].vars()
    }

    pub fn insert(&mut self, word: Vec<u8>, c: Scalar) {
        if c.is_zero() {
            return;
        }
        use std::collections::btree_map::Entry;
        match self.terms.entry(word) {
            Entry::Vacant(e) => {
                e.insert(c);
            }
            Entry::Occupied(mut e) => {
                let v = e.get().add(&c);
                if v.is_zero() {
                    e.remove();
                } else {
                    *e.get_mut() = v;
                }
            }
        }
    }

    pub fn expand(&self) -> Lpdo {
        let vars = self.vars().clone();
        let mut out = Lpdo::zero(&vars);
        for (w, c) in &self.terms {
            let mut op = Lpdo::identity(&vars);
            for sym in w.iter().rev() {
                op = self.basis[*sym as usize].to_lpdo().compose(&op);
            }
            out = out.add(&op.scale(c));
        }
        out
    }

    /// Left-compose one alphabet symbol onto a polynomial: `X_s ∘ p`.
    fn symbol_compose(&self, sym: u8, p: &NcOpPoly) -> NcOpPoly {
        let x = &self.basis[sym as usize];
        let mut out = NcOpPoly::new(self.basis.clone());
        for (w, c) in &p.terms {
            // X (c · w) = X(c) · w + c · (X·w)
            out.insert(w.clone(), x.apply_scalar(c));
            let mut w2 = Vec::with_capacity(w.len() + 1);
            w2.push(sym);
            w2.extend_from_slice(w);
            out.insert(w2, c.clone());
        }
        out
    }

    fn word_compose(&self, word: &[u8], p: &NcOpPoly) -> NcOpPoly {
        let mut acc = p.clone();
        for sym in word.iter().rev() {
            acc = self.symbol_compose(*sym, &acc);
        }
        acc
    }

    /// Rewrite every word so its symbols appear in the order given by the
    /// permutation `order` (a sequence of alphabet indices, highest priority
    /// first), using the commutation law.  The expansion is preserved exactly.
    pub fn normal_order(&self, order: &[usize]) -> Result<NcOpPoly, LpdoError> {
        let rank: BTreeMap<u8, usize> = order
            .iter()
            .enumerate()
            .map(|(pos, &sym)| (sym as u8, pos))
            .collect();
        let mut cur = self.clone();
        loop {
            // find a term with an inversion
            let mut found: Option<(Vec<u8>, usize)> = None;
            'outer: for w in cur.terms.keys() {
                for k in 0..w.len().saturating_sub(1) {
                    if rank[&w[k]] > rank[&w[k + 1]] {
                        found = Some((w.clone(), k));
                        break 'outer;
                    }
                }
            }
            let Some((w, k)) = found else {
                return Ok(cur);
            };
            let c = cur.terms.remove(&w).unwrap();
            let a = w[k];
            let b = w[k + 1];
            let xa = &self.basis[a as usize];
            let xb = &self.basis[b as usize];
            let dec = commutator_decompose(xa, xb)?;
            // X_a X_b = X_b X_a + [X_a, X_b] = X_b X_a + P X_a + Q X_b,
            // then prefix ∘ (replacement ∘ suffix)
            let mut suffix = NcOpPoly::new(self.basis.clone());
            suffix.insert(w[k + 2..].to_vec(), Scalar::one(cur.vars()));
            let mut repl = NcOpPoly::new(self.basis.clone());
            for (tw, tc) in [
                (vec![b, a], Scalar::one(cur.vars())),
                (vec![a], dec.p),
                (vec![b], dec.q),
            ] {
                // tw ∘ suffix, scaled by tc on the left
                let mut piece = self.word_compose(&tw, &suffix);
                piece = piece.left_scale(&tc);
                for (pw, pc) in piece.terms {
                    repl.insert(pw, pc);
                }
            }
            let full = {
                let mut p = self.word_compose(&w[..k].to_vec(), &repl);
                p = p.left_scale(&c);
                p
            };
            for (fw, fc) in full.terms {
                cur.insert(fw, fc);
            }
        }
    }

    fn left_scale(&self, c: &Scalar) -> NcOpPoly {
        let mut out = NcOpPoly::new(self.basis.clone());
        for (w, k) in &self.terms {
            out.insert(w.clone(), k.mul(c));
        }
        out
    }
}

/// Representation of an order-n operator in the increasing-index word basis:
/// the full word `X_1···X_n`, for each lower order `s` the words
/// `X_{i_1}···X_{i_s}` with `i_1 < ... < i_s <= s+1`, and a constant term.
pub fn lpdo_to_ncpoly(a: &Lpdo, basis: &[CharOperator]) -> Result<NcOpPoly, LpdoError> {
    let vars = a.vars().clone();
    let n = basis.len();
    if a.order() as usize != n {
        return Err(LpdoError::WrongOrder {
            expected: n,
            found: a.order() as usize,
        });
    }
    for i in 0..n {
        for j in (i + 1)..n {
            if !basis[i].independent(&basis[j]) {
                return Err(LpdoError::DependentOperators);
            }
        }
    }
    let mut out = NcOpPoly::new(basis.to_vec());
    // leading unit
    let sym_prod = symbol_product(basis);
    let lead = a.leading_form();
    let mut g: Option<Scalar> = None;
    for ((i, j), c) in &sym_prod {
        if c.is_zero() {
            continue;
        }
        let ac = lead.get(&(*i, *j)).cloned().unwrap_or_else(|| Scalar::zero(&vars));
        let ratio = ac.div(c).unwrap();
        match &g {
            None => g = Some(ratio),
            Some(prev) => {
                if *prev != ratio {
                    return Err(LpdoError::LeadingMismatch);
                }
            }
        }
    }
    let g = g.ok_or(LpdoError::LeadingMismatch)?;
    for ((i, j), c) in &lead {
        let sc = sym_prod.get(&(*i, *j)).cloned().unwrap_or_else(|| Scalar::zero(&vars));
        if *c != sc.mul(&g) {
            return Err(LpdoError::LeadingMismatch);
        }
    }
    let top: Vec<u8> = (0..n as u8).collect();
    out.insert(top.clone(), g.clone());
    let mut rem = a.sub(&out.expand());

    for s in (1..n).rev() {
        if rem.is_zero() {
            break;
        }
        if rem.order() as usize > s {
            return Err(LpdoError::RepresentationFailure(rem.order() as usize));
        }
        if (rem.order() as usize) < s {
            continue;
        }
        let words = increasing_words(s);
        // linear system: sum_w a_w * symbol(w) = order-s part of rem
        let mono_keys: Vec<(u32, u32)> = (0..=s as u32).map(|i| (i, s as u32 - i)).collect();
        let mut matrix: Vec<Vec<Scalar>> = Vec::new();
        for key in &mono_keys {
            let mut row = Vec::new();
            for w in &words {
                let ops: Vec<CharOperator> =
                    w.iter().map(|&i| basis[i as usize].clone()).collect();
                let sp = symbol_product(&ops);
                row.push(sp.get(key).cloned().unwrap_or_else(|| Scalar::zero(&vars)));
            }
            matrix.push(row);
        }
        let rhs: Vec<Scalar> = mono_keys
            .iter()
            .map(|(i, j)| rem.coeff(*i, *j))
            .collect();
        let sol = linalg::solve(&matrix, &rhs).ok_or(LpdoError::RepresentationFailure(s))?;
        for (w, c) in words.iter().zip(sol) {
            if c.is_zero() {
                continue;
            }
            let mut single = NcOpPoly::new(basis.to_vec());
            single.insert(w.clone(), c.clone());
            rem = rem.sub(&single.expand());
            out.insert(w.clone(), c);
        }
    }
    if rem.order() > 0 {
        return Err(LpdoError::RepresentationFailure(rem.order() as usize));
    }
    if !rem.is_zero() {
        out.insert(vec![], rem.coeff(0, 0));
    }
    Ok(out)
}

/// Words `i_1 < ... < i_s <= s+1` (0-indexed: subsets of {0..s} of size s).
fn increasing_words(s: usize) -> Vec<Vec<u8>> {
    let mut out = Vec::new();
    for skip in (0..=s).rev() {
        let w: Vec<u8> = (0..=s as u8).filter(|&i| i != skip as u8).collect();
        out.push(w);
    }
    out
}

/// Product of first-order symbols as a binary form `(i, j) -> Scalar`.
fn symbol_product(ops: &[CharOperator]) -> BTreeMap<(u32, u32), Scalar> {
    let vars = ops[0].vars().clone();
    let mut acc: BTreeMap<(u32, u32), Scalar> = BTreeMap::new();
    acc.insert((0, 0), Scalar::one(&vars));
    for op in ops {
        let mut next: BTreeMap<(u32, u32), Scalar> = BTreeMap::new();
        for ((i, j), c) in &acc {
            for (key, f) in [((i + 1, *j), &op.m), ((*i, j + 1), &op.n)] {
                if f.is_zero() {
                    continue;
                }
                let add = c.mul(f);
                next.entry(key)
                    .and_modify(|v| *v = v.add(&add))
                    .or_insert(add);
            }
        }
        next.retain(|_, v| !v.is_zero());
        acc = next;
    }
    acc
}

// ---------------------------------------------------------------------------
// second-order characteristic form
// ---------------------------------------------------------------------------

/// A second-order operator written as
/// `g * (X1 X2 + a1 X1 + a2 X2 + a3)` for its ordered characteristic pair.
#[derive(Debug, Clone)]
pub struct Form4 {
    pub x1: CharOperator,
    pub x2: CharOperator,
    pub a1: Scalar,
    pub a2: Scalar,
    pub a3: Scalar,
    /// the unit in front of the monic form
    pub unit: Scalar,
}

impl Form4 {
    pub fn of(a: &Lpdo, x1: &CharOperator, x2: &CharOperator) -> Result<Form4, LpdoError> {
        let nc = lpdo_to_ncpoly(a, &[x1.clone(), x2.clone()])?;
        let vars = a.vars().clone();
        let g = nc
            .terms
            .get(&vec![0u8, 1u8])
            .cloned()
            .ok_or(LpdoError::LeadingMismatch)?;
        let get = |w: &[u8]| -> Scalar {
            nc.terms
                .get(&w.to_vec())
                .cloned()
                .unwrap_or_else(|| Scalar::zero(&vars))
        };
        Ok(Form4 {
            x1: x1.clone(),
            x2: x2.clone(),
            a1: get(&[0]).div(&g).unwrap(),
            a2: get(&[1]).div(&g).unwrap(),
            a3: get(&[]).div(&g).unwrap(),
            unit: g,
        })
    }

    pub fn commutator(&self) -> CommutatorDecomposition {
        commutator_decompose(&self.x1, &self.x2).expect("independent pair")
    }

    /// Laplace invariant `h = X1(a1) + a1 a2 - a3`.
    pub fn h(&self) -> Scalar {
        self.x1
            .apply_scalar(&self.a1)
            .add(&self.a1.mul(&self.a2))
            .sub(&self.a3)
    }

    /// Laplace invariant `k = X2(ā2) + ā1 ā2 - a3`, with the reordered
    /// coefficients `ā1 = a1 + P`, `ā2 = a2 + Q`.
    pub fn k(&self) -> Scalar {
        let dec = self.commutator();
        let ab1 = self.a1.add(&dec.p);
        let ab2 = self.a2.add(&dec.q);
        self.x2
            .apply_scalar(&ab2)
            .add(&ab1.mul(&ab2))
            .sub(&self.a3)
    }

    /// The monic operator `X1 X2 + a1 X1 + a2 X2 + a3` as an LPDO.
    pub fn monic_lpdo(&self) -> Lpdo {
        let vars = self.a1.vars().clone();
        self.x1
            .to_lpdo()
            .compose(&self.x2.to_lpdo())
            .add(&self.x1.to_lpdo().scale(&self.a1))
            .add(&self.x2.to_lpdo().scale(&self.a2))
            .add(&Lpdo::scalar(self.a3.clone()))
            .add(&Lpdo::zero(&vars))
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::expr::solution::{CharVar, SolutionExpr};
    use crate::expr::vars::VarSpec;

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
    fn single_leibniz_step() {
        // Dx ∘ (x Dy) = x DxDy + Dy
        let v = ctx();
        let left = Lpdo::dx(&v);
        let right = Lpdo::monomial(&v, 0, 1, x(&v));
        let got = left.compose(&right);
        let expect = Lpdo::monomial(&v, 1, 1, x(&v)).add(&Lpdo::dy(&v));
        assert_eq!(got, expect);
    }

    #[test]
    fn compose_with_identity() {
        let v = ctx();
        let a = Lpdo::monomial(&v, 2, 0, x(&v)).add(&Lpdo::dy(&v).scale(&y(&v)));
        assert_eq!(a.compose(&Lpdo::identity(&v)), a);
        assert_eq!(Lpdo::identity(&v).compose(&a), a);
    }

    #[test]
    fn landau_identity() {
        let v = ctx();
        let (p, q, r) = crate::fixtures::landau(&v);
        let qqp = q.compose(&q.compose(&p));
        let rq = r.compose(&q);
        assert_eq!(qqp, rq);
        assert!(qqp.sub(&rq).is_zero());
    }

    #[test]
    fn landau_qp_vs_pq_differ() {
        let v = ctx();
        let (p, q, _) = crate::fixtures::landau(&v);
        let res = q.compose(&p).sub(&p.compose(&q));
        assert!(!res.is_zero());
        // QP - PQ = Dy for P = Dx + x Dy, Q = Dx + 1
        assert_eq!(res, Lpdo::dy(&v));
    }

    #[test]
    fn apply_exponential() {
        let v = ctx();
        let ex = SolutionExpr::exp(SolutionExpr::Scalar(x(&v)));
        assert!(Lpdo::dx(&v).apply(&ex).equivalent(&ex));
    }

    #[test]
    fn apply_consistent_with_compose() {
        let v = ctx();
        let a = Lpdo::dx(&v).add(&Lpdo::scalar(x(&v)));
        let b = Lpdo::dy(&v).scale(&y(&v)).add(&Lpdo::identity(&v));
        let u = SolutionExpr::exp(SolutionExpr::Scalar(x(&v).mul(&y(&v))));
        let lhs = a.compose(&b).apply(&u);
        let rhs = a.apply(&b.apply(&u));
        assert!(lhs.equivalent(&rhs));
    }

    #[test]
    fn commutator_constant_ops() {
        let v = ctx();
        let d = commutator_decompose(&CharOperator::dx(&v), &CharOperator::dy(&v)).unwrap();
        assert!(d.p.is_zero() && d.q.is_zero());
    }

    #[test]
    fn commutator_x_dx_plus_dy() {
        // X1 = Dx, X2 = x Dx + Dy: [X1, X2] = Dx, so P = 1, Q = 0
        let v = ctx();
        let x1 = CharOperator::dx(&v);
        let x2 = CharOperator::new(x(&v), Scalar::one(&v));
        let d = commutator_decompose(&x1, &x2).unwrap();
        assert!(d.p.is_one());
        assert!(d.q.is_zero());
        // recomposition as LPDOs
        let lhs = x1
            .to_lpdo()
            .compose(&x2.to_lpdo())
            .sub(&x2.to_lpdo().compose(&x1.to_lpdo()));
        let rhs = x1.to_lpdo().scale(&d.p).add(&x2.to_lpdo().scale(&d.q));
        assert_eq!(lhs, rhs);
    }

    #[test]
    fn roots_of_wave_operator() {
        // Dx^2 - Dy^2 factors into (Dx - Dy)(Dx + Dy)
        let v = ctx();
        let a = Lpdo::monomial(&v, 2, 0, Scalar::one(&v))
            .sub(&Lpdo::monomial(&v, 0, 2, Scalar::one(&v)));
        let roots = characteristic_roots(&a).unwrap();
        assert_eq!(roots.len(), 2);
        let dsl: Vec<String> = roots.iter().map(|r| r.to_dsl()).collect();
        assert!(dsl.contains(&"Dx + Dy".to_string()));
        assert!(dsl.contains(&"Dx - Dy".to_string()));
    }

    #[test]
    fn roots_of_dxdy() {
        let v = ctx();
        let a = Lpdo::monomial(&v, 1, 1, Scalar::one(&v));
        let roots = characteristic_roots(&a).unwrap();
        let dsl: Vec<String> = roots.iter().map(|r| r.to_dsl()).collect();
        assert_eq!(dsl, vec!["Dx".to_string(), "Dy".to_string()]);
    }

    #[test]
    fn non_splitting_symbol_reports_certificate() {
        // Dx^3 - (x^2+1) Dx Dy^2: symbol t^3 - (x^2+1) t, quadratic factor irreducible
        let v = ctx();
        let a = Lpdo::monomial(&v, 3, 0, Scalar::one(&v)).sub(&Lpdo::monomial(
            &v,
            1,
            2,
            x(&v).mul(&x(&v)).add(&Scalar::one(&v)),
        ));
        match characteristic_roots(&a) {
            Err(LpdoError::NonSplitting { degree, .. }) => assert_eq!(degree, 2),
            other => panic!("expected non-splitting, got {other:?}"),
        }
    }

    #[test]
    fn variable_coefficient_roots() {
        // (Dx - y Dy)(Dx + x Dy) has splitting symbol with distinct roots
        let v = ctx();
        let f1 = CharOperator::new(Scalar::one(&v), y(&v).neg());
        let f2 = CharOperator::new(Scalar::one(&v), x(&v));
        let a = f1.to_lpdo().compose(&f2.to_lpdo());
        let roots = characteristic_roots(&a).unwrap();
        assert_eq!(roots.len(), 2);
        assert!(roots.iter().any(|r| r == &f1.canonical()));
        assert!(roots.iter().any(|r| r == &f2.canonical()));
    }

    #[test]
    fn normal_order_commuting() {
        let v = ctx();
        let basis = vec![CharOperator::dx(&v), CharOperator::dy(&v)];
        let mut p = NcOpPoly::new(basis);
        p.insert(vec![1, 0], Scalar::one(&v));
        let q = p.normal_order(&[0, 1]).unwrap();
        assert_eq!(q.terms.len(), 1);
        assert!(q.terms.contains_key(&vec![0u8, 1u8]));
        assert_eq!(q.expand(), p.expand());
    }

    #[test]
    fn normal_order_noncommuting() {
        // X1 = Dx, X2 = x Dx + Dy: X2 X1 = X1 X2 - X1
        let v = ctx();
        let basis = vec![
            CharOperator::dx(&v),
            CharOperator::new(x(&v), Scalar::one(&v)),
        ];
        let mut p = NcOpPoly::new(basis);
        p.insert(vec![1, 0], Scalar::one(&v));
        let q = p.normal_order(&[0, 1]).unwrap();
        assert_eq!(q.expand(), p.expand());
        assert_eq!(q.terms.get(&vec![0u8, 1u8]), Some(&Scalar::one(&v)));
        assert_eq!(q.terms.get(&vec![0u8]), Some(&Scalar::int(&v, -1)));
        assert_eq!(q.terms.len(), 2);
        // idempotent
        let q2 = q.normal_order(&[0, 1]).unwrap();
        assert_eq!(q2.terms, q.terms);
    }

    #[test]
    fn ncpoly_roundtrip_dxdy() {
        let v = ctx();
        let a = Lpdo::monomial(&v, 1, 1, Scalar::one(&v));
        let basis = [CharOperator::dx(&v), CharOperator::dy(&v)];
        let nc = lpdo_to_ncpoly(&a, &basis).unwrap();
        assert_eq!(nc.terms.len(), 1);
        assert_eq!(nc.terms.get(&vec![0u8, 1u8]), Some(&Scalar::one(&v)));
        assert_eq!(nc.expand(), a);
    }

    #[test]
    fn ncpoly_with_potential_term() {
        // Dx Dy - c/(x+y)^2 with parameter c
        let v = VarSpec::new("x", "y", &["c"]);
        let c = Scalar::slot_var(&v, 2);
        let den = Scalar::slot_var(&v, 0)
            .add(&Scalar::slot_var(&v, 1))
            .pow(2)
            .unwrap();
        let a0 = c.div(&den).unwrap().neg();
        let a = Lpdo::monomial(&v, 1, 1, Scalar::one(&v)).add(&Lpdo::scalar(a0.clone()));
        let basis = [CharOperator::dx(&v), CharOperator::dy(&v)];
        let nc = lpdo_to_ncpoly(&a, &basis).unwrap();
        assert_eq!(nc.terms.get(&vec![]), Some(&a0));
        assert_eq!(nc.expand(), a);
    }

    #[test]
    fn form4_of_composed_operator() {
        // (Dx + 1)(Dy + x): a1 = x, a2 = 1, a3 = 1 + x, h = 0, k = -1
        let v = ctx();
        let a = Lpdo::dx(&v)
            .add(&Lpdo::identity(&v))
            .compose(&Lpdo::dy(&v).add(&Lpdo::scalar(x(&v))));
        let f = Form4::of(&a, &CharOperator::dx(&v), &CharOperator::dy(&v)).unwrap();
        assert_eq!(f.a1, x(&v));
        assert!(f.a2.is_one());
        assert_eq!(f.a3, Scalar::one(&v).add(&x(&v)));
        assert!(f.h().is_zero());
        assert_eq!(f.k(), Scalar::int(&v, -1));
    }
}
