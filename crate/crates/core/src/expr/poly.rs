//! Dense-exponent multivariate polynomials over arbitrary-precision rationals.
//!
//! Monomials are ordered graded-lexicographically with the independent
//! variables before the parameters; this is the order used everywhere for
//! leading terms, normalization and printing.

use num::bigint::BigInt;
use num::rational::BigRational;
use num::{One, Signed, Zero};
use std::cmp::Ordering;
use std::collections::BTreeMap;

use super::vars::Vars;

/// Exponent vector; length equals `VarSpec::arity()`.
#[derive(Debug, Clone, PartialEq, Eq, Hash)]
pub struct Mono(pub Vec<u32>);

impl Mono {
    pub fn one(arity: usize) -> Self {
        Mono(vec![0; arity])
    }

    pub fn var(arity: usize, slot: usize) -> Self {
        let mut e = vec![0; arity];
        e[slot] = 1;
        Mono(e)
    }

    pub fn degree(&self) -> u32 {
        self.0.iter().sum()
    }

    pub fn mul(&self, other: &Mono) -> Mono {
        Mono(self.0.iter().zip(&other.0).map(|(a, b)| a + b).collect())
    }

    /// Exact monomial quotient, None if some exponent would go negative.
    pub fn div(&self, other: &Mono) -> Option<Mono> {
        let mut out = Vec::with_capacity(self.0.len());
        for (a, b) in self.0.iter().zip(&other.0) {
            if a < b {
                return None;
            }
            out.push(a - b);
        }
        Some(Mono(out))
    }

    pub fn is_one(&self) -> bool {
        self.0.iter().all(|&e| e == 0)
    }
}

/// Graded lexicographic: total degree first, then exponents left to right.
impl Ord for Mono {
    fn cmp(&self, other: &Self) -> Ordering {
        self.degree()
            .cmp(&other.degree())
            .then_with(|| self.0.cmp(&other.0))
    }
}

impl PartialOrd for Mono {
    fn partial_cmp(&self, other: &Self) -> Option<Ordering> {
        Some(self.cmp(other))
    }
}

/// Multivariate polynomial as a monomial → coefficient map (no zero entries).
#[derive(Debug, Clone, PartialEq, Eq, PartialOrd, Ord, Hash)]
pub struct Poly {
    pub arity: usize,
    pub terms: BTreeMap<Mono, BigRational>,
}

impl Poly {
    pub fn zero(arity: usize) -> Self {
        Poly {
            arity,
            terms: BTreeMap::new(),
        }
    }

    pub fn constant(arity: usize, c: BigRational) -> Self {
        let mut p = Poly::zero(arity);
        if !c.is_zero() {
            p.terms.insert(Mono::one(arity), c);
        }
        p
    }

    pub fn from_int(arity: usize, c: i64) -> Self {
        Poly::constant(arity, BigRational::from(BigInt::from(c)))
    }

    pub fn one(arity: usize) -> Self {
        Poly::from_int(arity, 1)
    }

    pub fn var(arity: usize, slot: usize) -> Self {
        let mut p = Poly::zero(arity);
        p.terms.insert(Mono::var(arity, slot), BigRational::one());
        p
    }

    pub fn is_zero(&self) -> bool {
        self.terms.is_empty()
    }

    pub fn is_constant(&self) -> bool {
        self.terms.len() <= 1 && self.terms.keys().all(|m| m.is_one())
    }

    pub fn as_constant(&self) -> Option<BigRational> {
        if self.is_zero() {
            return Some(BigRational::zero());
        }
        if self.is_constant() {
            return self.terms.values().next().cloned();
        }
        None
    }

    pub fn is_one(&self) -> bool {
        self.as_constant().map(|c| c.is_one()).unwrap_or(false)
    }

    pub fn total_degree(&self) -> u32 {
        self.terms.keys().map(|m| m.degree()).max().unwrap_or(0)
    }

    pub fn degree_in(&self, slot: usize) -> u32 {
        self.terms.keys().map(|m| m.0[slot]).max().unwrap_or(0)
    }

    pub fn leading(&self) -> Option<(&Mono, &BigRational)> {
        self.terms.iter().next_back()
    }

    fn insert(&mut self, m: Mono, c: BigRational) {
        if c.is_zero() {
            return;
        }
        use std::collections::btree_map::Entry;
        match self.terms.entry(m) {
            Entry::Vacant(e) => {
                e.insert(c);
            }
            Entry::Occupied(mut e) => {
                let v = e.get() + c;
                if v.is_zero() {
                    e.remove();
                } else {
                    *e.get_mut() = v;
                }
            }
        }
    }

    pub fn add(&self, other: &Poly) -> Poly {
        debug_assert_eq!(self.arity, other.arity);
        let mut out = self.clone();
        for (m, c) in &other.terms {
            out.insert(m.clone(), c.clone());
        }
        out
    }

    pub fn neg(&self) -> Poly {
        let mut out = Poly::zero(self.arity);
        for (m, c) in &self.terms {
            out.terms.insert(m.clone(), -c.clone());
        }
        out
    }

    pub fn sub(&self, other: &Poly) -> Poly {
        self.add(&other.neg())
    }

    pub fn mul(&self, other: &Poly) -> Poly {
        debug_assert_eq!(self.arity, other.arity);
        let mut out = Poly::zero(self.arity);
        for (m1, c1) in &self.terms {
            for (m2, c2) in &other.terms {
                out.insert(m1.mul(m2), c1 * c2);
            }
        }
        out
    }

    pub fn scale(&self, c: &BigRational) -> Poly {
        if c.is_zero() {
            return Poly::zero(self.arity);
        }
        let mut out = Poly::zero(self.arity);
        for (m, k) in &self.terms {
            out.terms.insert(m.clone(), k * c);
        }
        out
    }

    pub fn mul_mono(&self, m: &Mono, c: &BigRational) -> Poly {
        let mut out = Poly::zero(self.arity);
        if c.is_zero() {
            return out;
        }
        for (m1, c1) in &self.terms {
            out.terms.insert(m1.mul(m), c1 * c);
        }
        out
    }

    pub fn pow(&self, e: u32) -> Poly {
        let mut out = Poly::one(self.arity);
        for _ in 0..e {
            out = out.mul(self);
        }
        out
    }

    /// Exact division; `None` if `other` does not divide `self` in the ring.
    pub fn exact_div(&self, other: &Poly) -> Option<Poly> {
        debug_assert_eq!(self.arity, other.arity);
        if other.is_zero() {
            return None;
        }
        let (lm, lc) = other.leading().unwrap();
        let lm = lm.clone();
        let lc = lc.clone();
        let mut rem = self.clone();
        let mut quot = Poly::zero(self.arity);
        while !rem.is_zero() {
            let (rm, rc) = {
                let (m, c) = rem.leading().unwrap();
                (m.clone(), c.clone())
            };
            let qm = rm.div(&lm)?;
            let qc = rc / &lc;
            quot.insert(qm.clone(), qc.clone());
            rem = rem.sub(&other.mul_mono(&qm, &qc));
        }
        Some(quot)
    }

    pub fn derivative(&self, slot: usize) -> Poly {
        let mut out = Poly::zero(self.arity);
        for (m, c) in &self.terms {
            let e = m.0[slot];
            if e == 0 {
                continue;
            }
            let mut me = m.clone();
            me.0[slot] = e - 1;
            out.insert(me, c * BigRational::from(BigInt::from(e)));
        }
        out
    }

    /// Partial evaluation / composition: replace every slot by the given poly.
    pub fn compose(&self, repl: &[Poly]) -> Poly {
        assert_eq!(repl.len(), self.arity);
        let arity = repl.first().map(|p| p.arity).unwrap_or(self.arity);
        let mut out = Poly::zero(arity);
        for (m, c) in &self.terms {
            let mut term = Poly::constant(arity, c.clone());
            for (slot, &e) in m.0.iter().enumerate() {
                if e > 0 {
                    term = term.mul(&repl[slot].pow(e));
                }
            }
            out = out.add(&term);
        }
        out
    }

    pub fn eval_f64(&self, point: &[f64]) -> f64 {
        let mut acc = 0.0;
        for (m, c) in &self.terms {
            let mut t = rational_to_f64(c);
            for (slot, &e) in m.0.iter().enumerate() {
                if e > 0 {
                    t *= point[slot].powi(e as i32);
                }
            }
            acc += t;
        }
        acc
    }

    /// Rational content (gcd of coefficients as a positive rational scaled so
    /// that the primitive part has integer coefficients and positive leading
    /// coefficient).
    pub fn content(&self) -> BigRational {
        if self.is_zero() {
            return BigRational::zero();
        }
        let mut num_gcd = BigInt::zero();
        let mut den_lcm = BigInt::one();
        for c in self.terms.values() {
            num_gcd = num::integer::gcd(num_gcd, c.numer().abs());
            den_lcm = num::integer::lcm(den_lcm, c.denom().clone());
        }
        let mut cont = BigRational::new(num_gcd, den_lcm);
        if self.leading().unwrap().1.is_negative() {
            cont = -cont;
        }
        cont
    }

    /// Primitive part: integer coefficients, gcd 1, positive leading coeff.
    pub fn primitive(&self) -> Poly {
        if self.is_zero() {
            return self.clone();
        }
        let c = self.content();
        self.scale(&c.recip())
    }

    /// Coefficients of `self` viewed as univariate in `slot`, ascending degree.
    pub fn as_univariate(&self, slot: usize) -> Vec<Poly> {
        let d = self.degree_in(slot) as usize;
        let mut out = vec![Poly::zero(self.arity); d + 1];
        for (m, c) in &self.terms {
            let e = m.0[slot] as usize;
            let mut me = m.clone();
            me.0[slot] = 0;
            out[e].insert(me, c.clone());
        }
        out
    }

    pub fn from_univariate(arity: usize, slot: usize, coeffs: &[Poly]) -> Poly {
        let mut out = Poly::zero(arity);
        for (e, c) in coeffs.iter().enumerate() {
            let m = {
                let mut v = vec![0u32; arity];
                v[slot] = e as u32;
                Mono(v)
            };
            out = out.add(&c.mul_mono(&m, &BigRational::one()));
        }
        out
    }

    /// Slots with nonzero degree.
    pub fn active_slots(&self) -> Vec<usize> {
        (0..self.arity).filter(|&s| self.degree_in(s) > 0).collect()
    }
}

pub fn rational_to_f64(c: &BigRational) -> f64 {
    bigint_to_f64(c.numer()) / bigint_to_f64(c.denom())
}

fn bigint_to_f64(i: &BigInt) -> f64 {
    // good enough for the numeric verifier's magnitudes
    let s = i.to_string();
    s.parse::<f64>().unwrap_or(f64::NAN)
}

// ---------------------------------------------------------------------------
// gcd machinery
// ---------------------------------------------------------------------------

/// Pseudo-remainder of `a` by `b` w.r.t. `slot` (lc(b)^(da-db+1) * a mod b).
fn pseudo_rem(a: &Poly, b: &Poly, slot: usize) -> Poly {
    let db = b.degree_in(slot);
    let bu = b.as_univariate(slot);
    let lcb = bu.last().unwrap().clone();
    let mut r = a.clone();
    loop {
        let dr = r.degree_in(slot);
        if r.is_zero() || dr < db {
            return r;
        }
        let ru = r.as_univariate(slot);
        let lcr = ru.last().unwrap().clone();
        // r := lcb * r - lcr * v^(dr-db) * b
        let shift = {
            let mut v = vec![0u32; a.arity];
            v[slot] = dr - db;
            Mono(v)
        };
        r = r
            .mul(&lcb)
            .sub(&b.mul(&lcr).mul_mono(&shift, &BigRational::one()));
    }
}

/// gcd normalized to primitive integer coefficients with positive leading
/// coefficient; gcd(0,0) = 0, gcd of nonzero constants = 1.
pub fn gcd(a: &Poly, b: &Poly) -> Poly {
    if a.is_zero() {
        return b.primitive();
    }
    if b.is_zero() {
        return a.primitive();
    }
    if a.is_constant() || b.is_constant() {
        return Poly::one(a.arity);
    }
    // main variable: first slot active in both; if none, the polys share no
    // variable and the gcd is a constant
    let sa = a.active_slots();
    let sb = b.active_slots();
    let slot = match sa.iter().find(|s| sb.contains(s)) {
        Some(&s) => s,
        None => return Poly::one(a.arity),
    };

    let au = a.as_univariate(slot);
    let bu = b.as_univariate(slot);
    let cont_a = poly_vec_gcd(&au);
    let cont_b = poly_vec_gcd(&bu);
    let cont = gcd(&cont_a, &cont_b);
    let pa = a.exact_div(&cont_a).unwrap();
    let pb = b.exact_div(&cont_b).unwrap();

    let (mut f, mut g) = if pa.degree_in(slot) >= pb.degree_in(slot) {
        (pa, pb)
    } else {
        (pb, pa)
    };
    loop {
        let r = pseudo_rem(&f, &g, slot);
        if r.is_zero() {
            let gp = primitive_in(&g, slot);
            return cont.mul(&gp).primitive();
        }
        if r.degree_in(slot) == 0 {
            return cont.primitive();
        }
        f = g;
        g = primitive_in(&r, slot);
    }
}

fn primitive_in(p: &Poly, slot: usize) -> Poly {
    let u = p.as_univariate(slot);
    let c = poly_vec_gcd(&u);
    p.exact_div(&c).unwrap()
}

fn poly_vec_gcd(ps: &[Poly]) -> Poly {
    let arity = ps[0].arity;
    let mut g = Poly::zero(arity);
    for p in ps {
        g = gcd(&g, p);
        if g.is_one() {
            break;
        }
    }
    if g.is_zero() {
        Poly::zero(arity)
    } else {
        g
    }
}

/// Exact square root, if `self` is a perfect square in the ring.
pub fn sqrt(p: &Poly) -> Option<Poly> {
    if p.is_zero() {
        return Some(p.clone());
    }
    if let Some(c) = p.as_constant() {
        let n = c.numer().sqrt();
        let d = c.denom().sqrt();
        let r = BigRational::new(n, d);
        if &r * &r == c {
            return Some(Poly::constant(p.arity, r));
        }
        return None;
    }
    let slot = p.active_slots()[0];
    let u = p.as_univariate(slot);
    let d = u.len() - 1;
    if d % 2 == 1 {
        return None;
    }
    let m = d / 2;
    let top = sqrt(&u[d])?;
    let mut q = vec![Poly::zero(p.arity); m + 1];
    q[m] = top.clone();
    let two_top = top.scale(&BigRational::from(BigInt::from(2)));
    for j in (0..m).rev() {
        // coefficient of v^(m+j) in q^2 so far
        let mut acc = Poly::zero(p.arity);
        for t in (j + 1)..=m {
            let s = m + j - t;
            if s > m || s <= j {
                continue;
            }
            acc = acc.add(&q[t].mul(&q[s]));
        }
        let target = if m + j < u.len() {
            u[m + j].clone()
        } else {
            Poly::zero(p.arity)
        };
        q[j] = target.sub(&acc).exact_div(&two_top)?;
    }
    let cand = Poly::from_univariate(p.arity, slot, &q);
    if cand.mul(&cand) == *p {
        Some(cand)
    } else {
        let neg = cand.neg();
        if neg.mul(&neg) == *p {
            Some(neg)
        } else {
            None
        }
    }
}

/// Square-free decomposition w.r.t. `slot` (Yun): returns (factor, multiplicity)
/// with multiplicities ascending; factors primitive in `slot`.
pub fn squarefree(p: &Poly, slot: usize) -> Vec<(Poly, u32)> {
    let mut out = Vec::new();
    if p.degree_in(slot) == 0 {
        return out;
    }
    let dp = p.derivative(slot);
    let a0 = gcd(p, &dp);
    let mut b = p.exact_div(&a0).unwrap();
    let mut c = dp.exact_div(&a0).unwrap();
    let mut i = 1u32;
    loop {
        let d = c.sub(&b.derivative(slot));
        if d.is_zero() {
            if b.degree_in(slot) > 0 {
                out.push((b, i));
            }
            break;
        }
        let f = gcd(&b, &d);
        if f.degree_in(slot) > 0 {
            out.push((f.clone(), i));
        }
        b = b.exact_div(&f).unwrap();
        c = d.exact_div(&f).unwrap();
        i += 1;
        if b.is_constant() {
            break;
        }
    }
    out
}

/// Refine a set of polynomials into pairwise-coprime factors (gcd-free basis).
/// Constants are dropped; results are primitive.
pub fn gcd_free_basis(input: &[Poly]) -> Vec<Poly> {
    let mut work: Vec<Poly> = input
        .iter()
        .filter(|p| !p.is_zero() && !p.is_constant())
        .map(|p| p.primitive())
        .collect();
    let mut out: Vec<Poly> = Vec::new();
    while let Some(mut p) = work.pop() {
        let mut split = false;
        for q in out.clone() {
            let g = gcd(&p, &q);
            if g.is_constant() {
                continue;
            }
            // replace q by g and q/g; continue with p/g^k
            out.retain(|r| *r != q);
            let qg = q.exact_div(&g).unwrap();
            for piece in [g.clone(), qg] {
                if !piece.is_constant() && !out.contains(&piece) {
                    out.push(piece);
                }
            }
            while let Some(next) = p.exact_div(&g) {
                p = next;
                if p.is_constant() {
                    break;
                }
            }
            if p.is_constant() {
                split = true;
                break;
            }
            work.push(p.clone());
            split = true;
            break;
        }
        if !split && !p.is_constant() && !out.contains(&p) {
            out.push(p);
        }
    }
    out.sort_by(|a, b| {
        a.total_degree()
            .cmp(&b.total_degree())
            .then_with(|| format!("{a:?}").cmp(&format!("{b:?}")))
    });
    out
}

// ---------------------------------------------------------------------------
// printing
// ---------------------------------------------------------------------------

pub fn format_poly(p: &Poly, vars: &Vars) -> String {
    if p.is_zero() {
        return "0".to_string();
    }
    let mut s = String::new();
    // descending order: leading term first
    for (i, (m, c)) in p.terms.iter().rev().enumerate() {
        let negative = c.is_negative();
        let abs = if negative { -c.clone() } else { c.clone() };
        if i == 0 {
            if negative {
                s.push('-');
            }
        } else if negative {
            s.push_str(" - ");
        } else {
            s.push_str(" + ");
        }
        let mut factors: Vec<String> = Vec::new();
        if !abs.is_one() || m.is_one() {
            factors.push(format_rational(&abs));
        }
        for (slot, &e) in m.0.iter().enumerate() {
            if e == 0 {
                continue;
            }
            if e == 1 {
                factors.push(vars.name(slot).to_string());
            } else {
                factors.push(format!("{}^{}", vars.name(slot), e));
            }
        }
        s.push_str(&factors.join("*"));
    }
    s
}

pub fn format_rational(c: &BigRational) -> String {
    if c.denom().is_one() {
        c.numer().to_string()
    } else {
        format!("{}/{}", c.numer(), c.denom())
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::expr::vars::VarSpec;

    fn ctx() -> Vars {
        VarSpec::new("x", "y", &["c"])
    }

    fn x() -> Poly {
        Poly::var(3, 0)
    }
    fn y() -> Poly {
        Poly::var(3, 1)
    }

    #[test]
    fn grlex_leading_term() {
        // x^2 > x*y > y^2 > x > y > 1 under grlex with x before y
        let p = x().mul(&x()).add(&x().mul(&y())).add(&y());
        let (m, _) = p.leading().unwrap();
        assert_eq!(m.0, vec![2, 0, 0]);
    }

    #[test]
    fn exact_division_roundtrip() {
        let a = x().add(&y());
        let b = x().sub(&y()).add(&Poly::from_int(3, 2));
        let prod = a.mul(&b);
        assert_eq!(prod.exact_div(&a).unwrap(), b);
        assert_eq!(prod.exact_div(&b).unwrap(), a);
        assert!(a.exact_div(&b).is_none());
    }

    #[test]
    fn gcd_of_products() {
        let a = x().add(&y());
        let b = x().sub(&y());
        let c = x().add(&Poly::from_int(3, 1));
        let p = a.mul(&b).mul(&a);
        let q = a.mul(&c);
        let g = gcd(&p, &q);
        assert_eq!(g, a.primitive());
    }

    #[test]
    fn gcd_with_rational_content() {
        let half = BigRational::new(BigInt::from(1), BigInt::from(2));
        let a = x().add(&y()).scale(&half);
        let b = x().add(&y()).scale(&BigRational::from(BigInt::from(3)));
        let g = gcd(&a, &b);
        assert_eq!(g, x().add(&y()));
    }

    #[test]
    fn sqrt_detects_squares() {
        let s = x().add(&y().scale(&BigRational::from(BigInt::from(2))));
        let sq = s.mul(&s);
        assert_eq!(sqrt(&sq), Some(s.primitive().scale(&s.content())));
        let not_sq = x().mul(&x()).add(&Poly::from_int(3, 1));
        assert!(sqrt(&not_sq).is_none());
    }

    #[test]
    fn squarefree_splits_multiplicities() {
        let a = x().add(&y());
        let b = x().sub(&Poly::from_int(3, 1));
        let p = a.mul(&a).mul(&b);
        let sf = squarefree(&p, 0);
        assert_eq!(sf.len(), 2);
        assert!(sf.contains(&(b.clone(), 1)));
        assert!(sf.contains(&(a.clone(), 2)));
    }

    #[test]
    fn gcd_free_basis_refines() {
        let a = x();
        let b = x().mul(&y());
        let basis = gcd_free_basis(&[a.clone(), b]);
        assert!(basis.contains(&a));
        assert!(basis.contains(&y()));
        assert_eq!(basis.len(), 2);
    }

    #[test]
    fn printing_is_descending() {
        let v = ctx();
        let p = x().mul(&x()).add(&y()).sub(&Poly::from_int(3, 3));
        assert_eq!(format_poly(&p, &v), "x^2 + y - 3");
    }
}
