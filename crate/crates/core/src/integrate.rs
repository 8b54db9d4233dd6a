//! Exact integration along characteristic directions: flow antiderivatives
//! of rational functions, integrating factors, and rational solutions of
//! `Z(g)/g = r` for variable-coefficient directions.

use num::rational::BigRational;
use num::One;

use crate::expr::linalg;
use crate::expr::poly::{self, Poly};
use crate::expr::scalar::Scalar;
use crate::expr::solution::{flow_chart, ChartFrame, SolutionExpr};
use crate::expr::vars::Vars;
use crate::lpdo::{univariate_roots_pub, CharOperator};

/// Integrating factor `exp(∫ a ds)` along a constant direction, split into a
/// rational factor (from integer-residue simple poles), an exponential of a
/// rational antiderivative, and an optional unintegrated remainder.
#[derive(Debug, Clone)]
pub struct ExpIntegral {
    pub scalar_factor: Scalar,
    pub exp_arg: Scalar,
    pub leftover: Option<Scalar>,
}

impl ExpIntegral {
    pub fn one(vars: &Vars) -> ExpIntegral {
        ExpIntegral {
            scalar_factor: Scalar::one(vars),
            exp_arg: Scalar::zero(vars),
            leftover: None,
        }
    }

    pub fn is_quadrature_free(&self) -> bool {
        self.leftover.is_none()
    }

    pub fn to_expr(&self, frame: &ChartFrame) -> SolutionExpr {
        let mut parts = vec![SolutionExpr::Scalar(self.scalar_factor.clone())];
        if !self.exp_arg.is_zero() {
            parts.push(SolutionExpr::exp(SolutionExpr::Scalar(self.exp_arg.clone())));
        }
        if let Some(l) = &self.leftover {
            parts.push(SolutionExpr::exp(SolutionExpr::integral(
                SolutionExpr::Scalar(l.clone()),
                frame.clone(),
            )));
        }
        if parts.len() == 1 {
            parts.pop().unwrap()
        } else {
            SolutionExpr::Product(parts)
        }
    }

    pub fn inverse(&self) -> ExpIntegral {
        ExpIntegral {
            scalar_factor: self.scalar_factor.inv().expect("nonzero factor"),
            exp_arg: self.exp_arg.neg(),
            leftover: self.leftover.as_ref().map(|l| l.neg()),
        }
    }
}

fn to_chart(s: &Scalar, flow: &CharOperator) -> Option<Scalar> {
    let vars = s.vars().clone();
    let (_, _, xb, yb) = flow_chart(flow)?;
    let mut repl: Vec<Scalar> = (0..vars.arity())
        .map(|i| Scalar::slot_var(&vars, i))
        .collect();
    repl[0] = xb;
    repl[1] = yb;
    Some(s.compose(&repl))
}

fn from_chart(s: &Scalar, flow: &CharOperator) -> Scalar {
    let vars = s.vars().clone();
    let (sc, wc, _, _) = flow_chart(flow).expect("constant flow");
    let mut repl: Vec<Scalar> = (0..vars.arity())
        .map(|i| Scalar::slot_var(&vars, i))
        .collect();
    repl[0] = sc;
    repl[1] = wc;
    s.compose(&repl)
}

// ---------------------------------------------------------------------------
// univariate polynomials in the chart slot with Scalar coefficients
// ---------------------------------------------------------------------------

fn upoly_trim(p: &mut Vec<Scalar>) {
    while p.len() > 1 && p.last().map(|c| c.is_zero()).unwrap_or(false) {
        p.pop();
    }
}

fn upoly_deg(p: &[Scalar]) -> usize {
    let mut d = p.len();
    while d > 1 && p[d - 1].is_zero() {
        d -= 1;
    }
    d - 1
}

fn upoly_is_zero(p: &[Scalar]) -> bool {
    p.iter().all(|c| c.is_zero())
}

fn upoly_of_poly(p: &Poly, vars: &Vars) -> Vec<Scalar> {
    let u = p.as_univariate(0);
    let mut out: Vec<Scalar> = u
        .into_iter()
        .map(|c| Scalar::from_poly(vars.clone(), c))
        .collect();
    if out.is_empty() {
        out.push(Scalar::zero(vars));
    }
    out
}

fn upoly_eval(p: &[Scalar], at: &Scalar, vars: &Vars) -> Scalar {
    let mut acc = Scalar::zero(vars);
    for c in p.iter().rev() {
        acc = acc.mul(at).add(c);
    }
    acc
}

fn upoly_derivative(p: &[Scalar], vars: &Vars) -> Vec<Scalar> {
    if p.len() <= 1 {
        return vec![Scalar::zero(vars)];
    }
    let mut out = Vec::with_capacity(p.len() - 1);
    for (i, c) in p.iter().enumerate().skip(1) {
        out.push(c.scale_int(i as i64));
    }
    out
}

fn upoly_sub(a: &[Scalar], b: &[Scalar], vars: &Vars) -> Vec<Scalar> {
    let n = a.len().max(b.len());
    let z = Scalar::zero(vars);
    let mut out = Vec::with_capacity(n);
    for i in 0..n {
        let x = a.get(i).unwrap_or(&z);
        let y = b.get(i).unwrap_or(&z);
        out.push(x.sub(y));
    }
    upoly_trim(&mut out);
    out
}

fn upoly_mul(a: &[Scalar], b: &[Scalar], vars: &Vars) -> Vec<Scalar> {
    let mut out = vec![Scalar::zero(vars); a.len() + b.len()];
    for (i, x) in a.iter().enumerate() {
        if x.is_zero() {
            continue;
        }
        for (j, y) in b.iter().enumerate() {
            out[i + j] = out[i + j].add(&x.mul(y));
        }
    }
    upoly_trim(&mut out);
    out
}

fn upoly_scale(a: &[Scalar], c: &Scalar) -> Vec<Scalar> {
    a.iter().map(|x| x.mul(c)).collect()
}

/// Quotient and remainder of `a / b` over the scalar field.
fn upoly_divmod(a: &[Scalar], b: &[Scalar], vars: &Vars) -> (Vec<Scalar>, Vec<Scalar>) {
    let db = upoly_deg(b);
    let lc = b[db].clone();
    let mut rem: Vec<Scalar> = a.to_vec();
    upoly_trim(&mut rem);
    let mut quot = vec![Scalar::zero(vars); a.len()];
    loop {
        let dr = upoly_deg(&rem);
        if upoly_is_zero(&rem) || dr < db {
            upoly_trim(&mut quot);
            return (quot, rem);
        }
        let f = rem[dr].div(&lc).unwrap();
        quot[dr - db] = quot[dr - db].add(&f);
        for i in 0..=db {
            rem[dr - db + i] = rem[dr - db + i].sub(&f.mul(&b[i]));
        }
        upoly_trim(&mut rem);
    }
}

fn upoly_gcd(a: &[Scalar], b: &[Scalar], vars: &Vars) -> Vec<Scalar> {
    let mut f = a.to_vec();
    let mut g = b.to_vec();
    upoly_trim(&mut f);
    upoly_trim(&mut g);
    if upoly_is_zero(&f) {
        return g;
    }
    if upoly_is_zero(&g) {
        return f;
    }
    loop {
        let (_, r) = upoly_divmod(&f, &g, vars);
        if upoly_is_zero(&r) {
            // monic normalize
            let d = upoly_deg(&g);
            let lc = g[d].clone();
            return upoly_scale(&g, &lc.inv().unwrap());
        }
        f = g;
        g = r;
    }
}

fn upoly_exact_div(a: &[Scalar], b: &[Scalar], vars: &Vars) -> Option<Vec<Scalar>> {
    let (q, r) = upoly_divmod(a, b, vars);
    if upoly_is_zero(&r) {
        Some(q)
    } else {
        None
    }
}

/// Termwise antiderivative of a polynomial in the chart slot.
fn upoly_integrate(p: &[Scalar], vars: &Vars) -> Vec<Scalar> {
    let mut out = vec![Scalar::zero(vars)];
    for (i, c) in p.iter().enumerate() {
        out.push(c.div(&Scalar::int(vars, (i + 1) as i64)).unwrap());
    }
    out
}

fn upoly_to_scalar(p: &[Scalar], vars: &Vars) -> Scalar {
    let s = Scalar::slot_var(vars, 0);
    upoly_eval(p, &s, vars)
}

// ---------------------------------------------------------------------------
// flow antiderivatives
// ---------------------------------------------------------------------------

/// Antiderivative of a rational scalar along a constant direction, as a
/// rational scalar; `None` if logarithmic terms appear.
pub fn flow_antiderivative(a: &Scalar, flow: &CharOperator) -> Option<Scalar> {
    let (rational, log_part) = flow_antiderivative_parts(a, flow)?;
    if log_part.is_some() {
        return None;
    }
    Some(rational)
}

/// Ostrogradsky split of `∫ a ds` along a constant flow: the rational part
/// and the remaining proper log-part integrand (squarefree denominator),
/// both mapped back to the original variables.
pub fn flow_antiderivative_parts(
    a: &Scalar,
    flow: &CharOperator,
) -> Option<(Scalar, Option<Scalar>)> {
    let vars = a.vars().clone();
    let chart = to_chart(a, flow)?;
    let num = upoly_of_poly(chart.num(), &vars);
    let den = upoly_of_poly(chart.den(), &vars);
    let (quot, rem) = upoly_divmod(&num, &den, &vars);
    let mut rational = upoly_to_scalar(&upoly_integrate(&quot, &vars), &vars);
    let mut log_part: Option<Scalar> = None;
    if !upoly_is_zero(&rem) {
        let dden = upoly_derivative(&den, &vars);
        let d = upoly_gcd(&den, &dden, &vars);
        if upoly_deg(&d) == 0 {
            // denominator squarefree: everything is log part
            let lp = upoly_to_scalar(&rem, &vars)
                .div(&upoly_to_scalar(&den, &vars))
                .unwrap();
            log_part = Some(lp);
        } else {
            let e = upoly_exact_div(&den, &d, &vars)?;
            // p = A' e - A t + B d, t = d' e / d
            let t = upoly_exact_div(&upoly_mul(&upoly_derivative(&d, &vars), &e, &vars), &d, &vars)?;
            let nd = upoly_deg(&d);
            let ne = upoly_deg(&e);
            let rows = nd + ne;
            let mut matrix: Vec<Vec<Scalar>> = vec![vec![Scalar::zero(&vars); rows]; rows];
            // columns 0..nd: coefficients of A (s^i); nd..: coefficients of B
            for i in 0..nd {
                // contribution of A = s^i: i s^(i-1) e - s^i t
                let mut mono = vec![Scalar::zero(&vars); i + 1];
                mono[i] = Scalar::one(&vars);
                let da = upoly_derivative(&mono, &vars);
                let contrib = upoly_sub(
                    &upoly_mul(&da, &e, &vars),
                    &upoly_mul(&mono, &t, &vars),
                    &vars,
                );
                for (r, c) in contrib.iter().enumerate().take(rows) {
                    matrix[r][i] = c.clone();
                }
            }
            for j in 0..ne {
                let mut mono = vec![Scalar::zero(&vars); j + 1];
                mono[j] = Scalar::one(&vars);
                let contrib = upoly_mul(&mono, &d, &vars);
                for (r, c) in contrib.iter().enumerate().take(rows) {
                    matrix[r][nd + j] = c.clone();
                }
            }
            let mut rhs = vec![Scalar::zero(&vars); rows];
            for (r, c) in rem.iter().enumerate().take(rows) {
                rhs[r] = c.clone();
            }
            let sol = linalg::solve(&matrix, &rhs)?;
            let a_part: Vec<Scalar> = sol[..nd].to_vec();
            let b_part: Vec<Scalar> = sol[nd..].to_vec();
            rational = rational.add(
                &upoly_to_scalar(&a_part, &vars)
                    .div(&upoly_to_scalar(&d, &vars))
                    .unwrap(),
            );
            if !upoly_is_zero(&b_part) {
                let lp = upoly_to_scalar(&b_part, &vars)
                    .div(&upoly_to_scalar(&e, &vars))
                    .unwrap();
                log_part = Some(lp);
            }
        }
    }
    let rational = from_chart(&rational, flow);
    let log_part = log_part.map(|l| from_chart(&l, flow));
    Some((rational, log_part))
}

/// `exp(∫ a ds)` along a constant direction.  Simple poles with constant
/// integer residues become rational factors; a rational antiderivative part
/// stays under the exponential; anything else is returned as a leftover
/// integrand.
pub fn exp_flow_integral(a: &Scalar, flow: &CharOperator) -> ExpIntegral {
    let vars = a.vars().clone();
    if a.is_zero() {
        return ExpIntegral::one(&vars);
    }
    let Some((rational, log_part)) = flow_antiderivative_parts(a, flow) else {
        return ExpIntegral {
            scalar_factor: Scalar::one(&vars),
            exp_arg: Scalar::zero(&vars),
            leftover: Some(a.clone()),
        };
    };
    let mut out = ExpIntegral {
        scalar_factor: Scalar::one(&vars),
        exp_arg: rational,
        leftover: None,
    };
    let Some(lp) = log_part else {
        return out;
    };
    // try to express the log part as sum of integer multiples of dq/q
    let chart = match to_chart(&lp, flow) {
        Some(c) => c,
        None => {
            out.leftover = Some(lp);
            return out;
        }
    };
    let num = upoly_of_poly(chart.num(), &vars);
    let den = upoly_of_poly(chart.den(), &vars);
    match integer_residue_factor(&num, &den, &vars) {
        Some(factor_chart) => {
            out.scalar_factor = from_chart(&factor_chart, flow);
        }
        None => {
            out.leftover = Some(lp);
        }
    }
    out
}

/// For a proper fraction `num/den` with squarefree `den`, try to write
/// `∫ num/den = Σ c_i ln(s - ρ_i)` with constant integer residues `c_i`;
/// returns `Π (s - ρ_i)^{c_i}` in chart coordinates.
fn integer_residue_factor(num: &[Scalar], den: &[Scalar], vars: &Vars) -> Option<Scalar> {
    let roots = univariate_roots_pub(den, vars).ok()?;
    if roots.len() != upoly_deg(den) {
        return None;
    }
    let dden = upoly_derivative(den, vars);
    let s = Scalar::slot_var(vars, 0);
    let mut factor = Scalar::one(vars);
    for rho in &roots {
        let c = upoly_eval(num, rho, vars)
            .div(&upoly_eval(&dden, rho, vars))
            .ok()?;
        let r = c.as_rational()?;
        if !r.denom().is_one() {
            return None;
        }
        let e: i64 = r.numer().to_string().parse().ok()?;
        factor = factor.mul(&s.sub(rho).pow(e).ok()?);
    }
    Some(factor)
}

// ---------------------------------------------------------------------------
// rational integrating factors for variable-coefficient directions
// ---------------------------------------------------------------------------

/// Find a rational `g` with `Z(g)/g = r`, as a product of integer powers of
/// candidate factors drawn from the problem data.  `None` if no such product
/// matches.
pub fn log_derivative_solve(
    r: &Scalar,
    z: &CharOperator,
    extra: &[Scalar],
) -> Option<Scalar> {
    let vars = r.vars().clone();
    if r.is_zero() {
        return Some(Scalar::one(&vars));
    }
    let mut pool: Vec<Poly> = vec![r.den().clone(), r.num().clone()];
    for s in [&z.m, &z.n] {
        pool.push(s.num().clone());
        pool.push(s.den().clone());
    }
    for s in extra {
        pool.push(s.num().clone());
        pool.push(s.den().clone());
    }
    pool.push(Poly::var(vars.arity(), 0));
    pool.push(Poly::var(vars.arity(), 1));
    let basis = poly::gcd_free_basis(&pool);
    if basis.is_empty() || basis.len() > 12 {
        return None;
    }
    // v_f = Z(f)/f; solve r = Σ e_f v_f with rational e_f
    let vf: Vec<Scalar> = basis
        .iter()
        .map(|f| {
            let fs = Scalar::from_poly(vars.clone(), f.clone());
            z.apply_scalar(&fs).div(&fs).unwrap()
        })
        .collect();
    // common denominator
    let mut common = r.den().clone();
    for v in &vf {
        let g = poly::gcd(&common, v.den());
        common = common.mul(&v.den().exact_div(&g).unwrap());
    }
    let rhs_poly = r.num().mul(&common.exact_div(r.den()).unwrap());
    let cols: Vec<Poly> = vf
        .iter()
        .map(|v| v.num().mul(&common.exact_div(v.den()).unwrap()))
        .collect();
    // collect all monomials
    let mut monos: Vec<crate::expr::poly::Mono> = rhs_poly.terms.keys().cloned().collect();
    for c in &cols {
        for m in c.terms.keys() {
            if !monos.contains(m) {
                monos.push(m.clone());
            }
        }
    }
    monos.sort();
    let zero = BigRational::from_integer(0.into());
    let rows: Vec<Vec<BigRational>> = monos
        .iter()
        .map(|m| {
            cols.iter()
                .map(|c| c.terms.get(m).cloned().unwrap_or_else(|| zero.clone()))
                .collect()
        })
        .collect();
    let rhs: Vec<BigRational> = monos
        .iter()
        .map(|m| rhs_poly.terms.get(m).cloned().unwrap_or_else(|| zero.clone()))
        .collect();
    let sol = solve_overdetermined(&rows, &rhs)?;
    let mut g = Scalar::one(&vars);
    for (f, e) in basis.iter().zip(&sol) {
        if e.numer() == &num::bigint::BigInt::from(0) {
            continue;
        }
        if !e.denom().is_one() {
            return None;
        }
        let k: i64 = e.numer().to_string().parse().ok()?;
        g = g.mul(&Scalar::from_poly(vars.clone(), f.clone()).pow(k).ok()?);
    }
    // verify
    let check = z.apply_scalar(&g).div(&g).unwrap();
    if &check == r {
        Some(g)
    } else {
        None
    }
}

/// Exact solve of a possibly overdetermined rational linear system.
fn solve_overdetermined(
    rows: &[Vec<BigRational>],
    rhs: &[BigRational],
) -> Option<Vec<BigRational>> {
    let nrows = rows.len();
    if nrows == 0 {
        return None;
    }
    let ncols = rows[0].len();
    let mut a: Vec<Vec<BigRational>> = rows.to_vec();
    let mut b: Vec<BigRational> = rhs.to_vec();
    let zero = BigRational::from_integer(0.into());
    let mut pivots: Vec<(usize, usize)> = Vec::new();
    let mut row = 0usize;
    for col in 0..ncols {
        let Some(p) = (row..nrows).find(|&r| a[r][col] != zero) else {
            continue;
        };
        a.swap(row, p);
        b.swap(row, p);
        let pv = a[row][col].clone();
        for r in 0..nrows {
            if r == row || a[r][col] == zero {
                continue;
            }
            let f = &a[r][col] / &pv;
            for c in 0..ncols {
                let v = &a[r][c] - &(&f * &a[row][c]);
                a[r][c] = v;
            }
            b[r] = &b[r] - &(&f * &b[row]);
        }
        pivots.push((row, col));
        row += 1;
        if row == nrows {
            break;
        }
    }
    // consistency of the remaining rows
    for r in row..nrows {
        if b[r] != zero {
            return None;
        }
    }
    let mut x = vec![zero.clone(); ncols];
    for (r, c) in pivots {
        x[c] = &b[r] / &a[r][c];
    }
    Some(x)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::expr::vars::VarSpec;
    use crate::expr::vars::Vars as V;

    fn ctx() -> V {
        VarSpec::new("x", "y", &[])
    }

    fn sc(v: &V, s: &str) -> Scalar {
        crate::dsl::parse_scalar(v, s).unwrap()
    }

    #[test]
    fn polynomial_antiderivative() {
        // ∫ (x - y) dx along Dx = x^2/2 - x y
        let v = ctx();
        let flow = CharOperator::dx(&v);
        let a = sc(&v, "x - y");
        let got = flow_antiderivative(&a, &flow).unwrap();
        assert_eq!(got, sc(&v, "x^2/2 - x*y"));
        assert_eq!(flow.apply_scalar(&got), a);
    }

    #[test]
    fn diagonal_flow_antiderivative() {
        // along Dx + Dy: d/ds of the result must reproduce the integrand
        let v = ctx();
        let flow = CharOperator::new(Scalar::one(&v), Scalar::one(&v));
        let a = sc(&v, "x + 2*y");
        let got = flow_antiderivative(&a, &flow).unwrap();
        assert_eq!(flow.apply_scalar(&got), a);
    }

    #[test]
    fn higher_pole_is_rational() {
        // ∫ dx/(x+y)^2 = -1/(x+y)
        let v = ctx();
        let flow = CharOperator::dx(&v);
        let a = sc(&v, "1/(x + y)^2");
        let got = flow_antiderivative(&a, &flow).unwrap();
        assert_eq!(got, sc(&v, "-1/(x + y)"));
    }

    #[test]
    fn simple_pole_has_log() {
        let v = ctx();
        let flow = CharOperator::dx(&v);
        let a = sc(&v, "1/(x + y)");
        assert!(flow_antiderivative(&a, &flow).is_none());
    }

    #[test]
    fn exp_integral_with_integer_residue() {
        // exp(∫ -2/(x+y) dx) = (x+y)^-2
        let v = ctx();
        let flow = CharOperator::dx(&v);
        let a = sc(&v, "-2/(x + y)");
        let ei = exp_flow_integral(&a, &flow);
        assert!(ei.is_quadrature_free());
        assert!(ei.exp_arg.is_zero());
        assert_eq!(ei.scalar_factor, sc(&v, "1/(x + y)^2"));
        // sanity: Z(g)/g = a
        let check = flow.apply_scalar(&ei.scalar_factor).div(&ei.scalar_factor).unwrap();
        assert_eq!(check, a);
    }

    #[test]
    fn exp_integral_mixed() {
        // ∫ (1 + 3/(x-y)) dx: polynomial part x, residue 3
        let v = ctx();
        let flow = CharOperator::dx(&v);
        let a = sc(&v, "1 + 3/(x - y)");
        let ei = exp_flow_integral(&a, &flow);
        assert!(ei.is_quadrature_free());
        assert_eq!(ei.exp_arg, sc(&v, "x"));
        assert_eq!(ei.scalar_factor, sc(&v, "(x - y)^3"));
    }

    #[test]
    fn non_integer_residue_left_over() {
        let v = ctx();
        let flow = CharOperator::dx(&v);
        let a = sc(&v, "1/(2*(x + y))");
        let ei = exp_flow_integral(&a, &flow);
        assert!(!ei.is_quadrature_free());
    }

    #[test]
    fn log_derivative_solver_finds_powers() {
        // Z = Dt - x Dx (variable direction), g = x^2: Z(g)/g = -2x/..:
        let v = VarSpec::new("t", "x", &[]);
        let x = Scalar::slot_var(&v, 1);
        let z = CharOperator::new(Scalar::one(&v), x.neg());
        let g = x.mul(&x);
        let r = z.apply_scalar(&g).div(&g).unwrap();
        let got = log_derivative_solve(&r, &z, &[]).unwrap();
        let check = z.apply_scalar(&got).div(&got).unwrap();
        assert_eq!(check, r);
    }
}
