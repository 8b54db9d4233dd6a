//! Systems in characteristic form `X_i u_i = Σ_k α_{ik} u_k` and the
//! conversions between scalar equations, general first-order systems and
//! characteristic systems, with substitution records for every step.

use std::collections::BTreeMap;
use std::fmt;

use crate::expr::linalg;
use crate::expr::scalar::Scalar;
use crate::expr::solution::SolutionExpr;
use crate::expr::vars::Vars;
use crate::lpdo::{
    characteristic_roots, univariate_roots_pub, CharOperator, Form4, Lpdo, LpdoError,
};
use thiserror::Error;

#[derive(Debug, Error, Clone, PartialEq)]
pub enum CharformError {
    #[error(transparent)]
    Lpdo(#[from] LpdoError),
    #[error("operator must be of order {expected}, found {found}")]
    WrongOrder { expected: u32, found: u32 },
    #[error("off-diagonal coefficient needed for elimination is zero (system is triangular there)")]
    Triangular,
    #[error("repeated eigenvalues; the system is not strictly hyperbolic")]
    RepeatedEigenvalues,
    #[error("left eigenvector matrix is singular")]
    SingularEigenvectors,
    #[error("characteristic system rows must use pairwise independent operators")]
    DependentOperators,
    #[error("matrix dimensions are inconsistent")]
    Dimensions,
    #[error("step-down construction failed to reproduce the operator; residual order {0}")]
    StepDownResidual(u32),
}

/// How a conversion/transformation step rewrote the unknowns.
#[derive(Debug, Clone, Copy, PartialEq, Eq, serde::Serialize)]
#[serde(rename_all = "kebab-case")]
pub enum SubstKind {
    Introduce,
    Eliminate,
    Gauge,
    Regauge,
    LaplaceX1,
    LaplaceX2,
    Pivot,
}

/// A linear-differential expression `Σ_j A_j(u_{name_j})`.
#[derive(Debug, Clone, PartialEq)]
pub struct LinDiffExpr(pub Vec<(String, Lpdo)>);

impl LinDiffExpr {
    pub fn identity(vars: &Vars, name: &str) -> LinDiffExpr {
        LinDiffExpr(vec![(name.to_string(), Lpdo::identity(vars))])
    }

    pub fn single(name: &str, op: Lpdo) -> LinDiffExpr {
        LinDiffExpr(vec![(name.to_string(), op)])
    }

    /// Substitute known solution expressions for the named unknowns.
    pub fn apply(&self, values: &BTreeMap<String, SolutionExpr>) -> Option<SolutionExpr> {
        let mut parts = Vec::new();
        for (name, op) in &self.0 {
            let v = values.get(name)?;
            parts.push(op.apply(v));
        }
        Some(SolutionExpr::Sum(parts))
    }

    pub fn to_dsl(&self) -> String {
        let mut out = String::new();
        for (idx, (name, op)) in self.0.iter().enumerate() {
            if idx > 0 {
                out.push_str(" + ");
            }
            if op.is_zero() {
                out.push('0');
                continue;
            }
            let mut first = true;
            for ((i, j), c) in op.terms() {
                let vars = op.vars();
                let mut atom = String::new();
                for _ in 0..*i {
                    atom.push_str(&format!("D{}(", vars.first));
                }
                for _ in 0..*j {
                    atom.push_str(&format!("D{}(", vars.second));
                }
                atom.push_str(name);
                atom.push_str(&")".repeat((*i + *j) as usize));
                let cs = c.to_dsl();
                let term = if c.is_one() {
                    atom
                } else if cs == "-1" {
                    format!("-{atom}")
                } else if c.needs_parens_in_product() {
                    format!("({cs})*{atom}")
                } else {
                    format!("{cs}*{atom}")
                };
                if first {
                    out.push_str(&term);
                    first = false;
                } else if let Some(rest) = term.strip_prefix('-') {
                    out.push_str(" - ");
                    out.push_str(rest);
                } else {
                    out.push_str(" + ");
                    out.push_str(&term);
                }
            }
        }
        out
    }
}

/// Forward (`new ← expression in old`) and backward (`old ← expression in
/// new`) substitution maps for one conversion step.  Backward entries are
/// applied in order and may refer to previously recovered old unknowns.
#[derive(Debug, Clone, PartialEq)]
pub struct SubstitutionRecord {
    pub kind: SubstKind,
    pub forward: Vec<(String, LinDiffExpr)>,
    pub backward: Vec<(String, LinDiffExpr)>,
}

impl SubstitutionRecord {
    /// Map a full solution of the *new* system back to the old unknowns.
    pub fn apply_backward(
        &self,
        new_values: &BTreeMap<String, SolutionExpr>,
    ) -> Option<BTreeMap<String, SolutionExpr>> {
        let mut env = new_values.clone();
        let mut out = BTreeMap::new();
        for (old, expr) in &self.backward {
            let v = expr.apply(&env)?;
            env.insert(old.clone(), v.clone());
            out.insert(old.clone(), v);
        }
        Some(out)
    }
}

/// First-order system in characteristic form: row `i` reads
/// `ops[i] (labels[i]) = Σ_k alpha[i][k] * labels[k]`.
#[derive(Debug, Clone, PartialEq)]
pub struct CharSystem {
    vars: Vars,
    ops: Vec<CharOperator>,
    alpha: Vec<Vec<Scalar>>,
    labels: Vec<String>,
    pub history: Vec<SubstitutionRecord>,
}

impl CharSystem {
    pub fn new(
        ops: Vec<CharOperator>,
        alpha: Vec<Vec<Scalar>>,
        labels: Vec<String>,
    ) -> Result<CharSystem, CharformError> {
        let n = ops.len();
        if n < 2 || alpha.len() != n || labels.len() != n {
            return Err(CharformError::Dimensions);
        }
        for row in &alpha {
            if row.len() != n {
                return Err(CharformError::Dimensions);
            }
        }
        for i in 0..n {
            for j in (i + 1)..n {
                if !ops[i].independent(&ops[j]) {
                    return Err(CharformError::DependentOperators);
                }
            }
        }
        let vars = ops[0].vars().clone();
        Ok(CharSystem {
            vars,
            ops,
            alpha,
            labels,
            history: Vec::new(),
        })
    }

    pub fn vars(&self) -> &Vars {
        &self.vars
    }

    pub fn n(&self) -> usize {
        self.ops.len()
    }

    pub fn op(&self, i: usize) -> &CharOperator {
        &self.ops[i]
    }

    pub fn ops(&self) -> &[CharOperator] {
        &self.ops
    }

    pub fn alpha(&self, i: usize, k: usize) -> &Scalar {
        &self.alpha[i][k]
    }

    pub fn alpha_matrix(&self) -> &Vec<Vec<Scalar>> {
        &self.alpha
    }

    pub fn label(&self, i: usize) -> &str {
        &self.labels[i]
    }

    pub fn labels(&self) -> &[String] {
        &self.labels
    }

    /// Exact residuals of every equation for a candidate solution.
    pub fn residuals(&self, values: &BTreeMap<String, SolutionExpr>) -> Vec<SolutionExpr> {
        let mut out = Vec::new();
        for i in 0..self.n() {
            let u = &values[self.label(i)];
            let mut res = self.ops[i].apply(u);
            for k in 0..self.n() {
                if self.alpha[i][k].is_zero() {
                    continue;
                }
                res = res.sub(&values[self.label(k)].mul_scalar(&self.alpha[i][k]));
            }
            out.push(res);
        }
        out
    }

    /// Gauge transformation `u_i -> g_i u_i` (all `g_i` nonzero).
    pub fn gauge(&self, g: &[Scalar]) -> CharSystem {
        let n = self.n();
        let mut alpha = vec![vec![Scalar::zero(&self.vars); n]; n];
        for i in 0..n {
            for k in 0..n {
                let mut v = self.alpha[i][k]
                    .mul(&g[i])
                    .div(&g[k])
                    .expect("nonzero gauge");
                if i == k {
                    v = v.add(
                        &self.ops[i]
                            .apply_scalar(&g[i])
                            .div(&g[i])
                            .expect("nonzero gauge"),
                    );
                }
                alpha[i][k] = v;
            }
        }
        CharSystem {
            vars: self.vars.clone(),
            ops: self.ops.clone(),
            alpha,
            labels: self.labels.clone(),
            history: self.history.clone(),
        }
    }

    /// Operator rescaling `X_i -> γ_i X_i` (row i of α scales with it).
    pub fn rescale(&self, gamma: &[Scalar]) -> CharSystem {
        let ops = self
            .ops
            .iter()
            .zip(gamma)
            .map(|(op, g)| op.scale(g))
            .collect();
        let alpha = self
            .alpha
            .iter()
            .zip(gamma)
            .map(|(row, g)| row.iter().map(|a| a.mul(g)).collect())
            .collect();
        CharSystem {
            vars: self.vars.clone(),
            ops,
            alpha,
            labels: self.labels.clone(),
            history: self.history.clone(),
        }
    }

    pub fn with_history(mut self, mut history: Vec<SubstitutionRecord>) -> CharSystem {
        self.history.append(&mut history);
        self
    }

    /// The system block in DSL syntax.
    pub fn to_dsl(&self) -> String {
        let mut out = String::new();
        out.push_str("ops ");
        for (i, op) in self.ops.iter().enumerate() {
            if i > 0 {
                out.push_str(", ");
            }
            out.push_str(&format!("X{} = {}", i + 1, op.to_dsl()));
        }
        out.push_str(";\nsystem {\n");
        for i in 0..self.n() {
            out.push_str(&format!("  X{}({}) = {};\n", i + 1, self.labels[i], self.rhs_dsl(i)));
        }
        out.push('}');
        out
    }

    pub fn rhs_dsl(&self, i: usize) -> String {
        let mut parts: Vec<String> = Vec::new();
        for k in 0..self.n() {
            let c = &self.alpha[i][k];
            if c.is_zero() {
                continue;
            }
            let cs = c.to_dsl();
            let term = if c.is_one() {
                self.labels[k].clone()
            } else if cs == "-1" {
                format!("-{}", self.labels[k])
            } else if c.needs_parens_in_product() {
                format!("({cs})*{}", self.labels[k])
            } else {
                format!("{cs}*{}", self.labels[k])
            };
            parts.push(term);
        }
        if parts.is_empty() {
            return "0".to_string();
        }
        let mut out = String::new();
        for (idx, t) in parts.iter().enumerate() {
            if idx == 0 {
                out.push_str(t);
            } else if let Some(rest) = t.strip_prefix('-') {
                out.push_str(" - ");
                out.push_str(rest);
            } else {
                out.push_str(" + ");
                out.push_str(t);
            }
        }
        out
    }
}

impl fmt::Display for CharSystem {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "{}", self.to_dsl())
    }
}

/// Which of the two first-order systems of a second-order operator to emit.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum SystemSide {
    /// `(S1)`: `X2 u = -a1 u + v`, `X1 v = h u - a2 v`.
    Left,
    /// `(S2)`: `X1 u = -ā2 u + w`, `X2 w = k u - ā1 w`.
    Right,
}

/// Reduce a strictly hyperbolic second-order operator to a 2×2 characteristic
/// system; returns the system, the substitution record, and the operator's
/// Laplace invariants (h, k).
pub fn second_order_to_charsys(
    a: &Lpdo,
    unknown: &str,
) -> Result<(CharSystem, SubstitutionRecord, Scalar, Scalar), CharformError> {
    second_order_to_charsys_side(a, unknown, SystemSide::Left)
}

pub fn second_order_to_charsys_side(
    a: &Lpdo,
    unknown: &str,
    side: SystemSide,
) -> Result<(CharSystem, SubstitutionRecord, Scalar, Scalar), CharformError> {
    if a.order() != 2 {
        return Err(CharformError::WrongOrder {
            expected: 2,
            found: a.order(),
        });
    }
    let roots = characteristic_roots(a)?;
    let form = Form4::of(a, &roots[0], &roots[1])?;
    let vars = a.vars().clone();
    let h = form.h();
    let k = form.k();
    let dec = form.commutator();
    let fresh = format!("{unknown}_1");
    let (ops, alpha, labels, fwd_expr) = match side {
        SystemSide::Left => {
            // v = X2 u + a1 u;  rows: (X2, u), (X1, v)
            let alpha = vec![
                vec![form.a1.neg(), Scalar::one(&vars)],
                vec![h.clone(), form.a2.neg()],
            ];
            let fwd = LinDiffExpr::single(
                unknown,
                form.x2.to_lpdo().add(&Lpdo::scalar(form.a1.clone())),
            );
            (
                vec![form.x2.clone(), form.x1.clone()],
                alpha,
                vec![unknown.to_string(), fresh.clone()],
                fwd,
            )
        }
        SystemSide::Right => {
            // w = X1 u + ā2 u;  rows: (X1, u), (X2, w)
            let ab1 = form.a1.add(&dec.p);
            let ab2 = form.a2.add(&dec.q);
            let alpha = vec![
                vec![ab2.neg(), Scalar::one(&vars)],
                vec![k.clone(), ab1.neg()],
            ];
            let fwd = LinDiffExpr::single(unknown, form.x1.to_lpdo().add(&Lpdo::scalar(ab2)));
            (
                vec![form.x1.clone(), form.x2.clone()],
                alpha,
                vec![unknown.to_string(), fresh.clone()],
                fwd,
            )
        }
    };
    let record = SubstitutionRecord {
        kind: SubstKind::Introduce,
        forward: vec![
            (unknown.to_string(), LinDiffExpr::identity(&vars, unknown)),
            (fresh, fwd_expr),
        ],
        backward: vec![(unknown.to_string(), LinDiffExpr::identity(&vars, unknown))],
    };
    let sys = CharSystem::new(ops, alpha, labels)?.with_history(vec![record.clone()]);
    Ok((sys, record, h, k))
}

/// Eliminate the other unknown of a 2×2 characteristic system, producing the
/// second-order operator annihilating `labels[keep]` (monic in its
/// characteristic word), its `Form4` data in the row frame (ops[0], ops[1]),
/// and the elimination record.
pub fn charsys2_to_second_order(
    s: &CharSystem,
    keep: usize,
) -> Result<(Lpdo, SubstitutionRecord, Form4), CharformError> {
    assert_eq!(s.n(), 2, "2x2 systems only");
    assert!(keep < 2);
    let vars = s.vars().clone();
    let other = 1 - keep;
    let pivot = s.alpha(keep, other).clone();
    if pivot.is_zero() {
        return Err(CharformError::Triangular);
    }
    // u_other = (Z_keep - alpha[keep][keep]) u_keep / pivot
    let elim = s
        .op(keep)
        .to_lpdo()
        .sub(&Lpdo::scalar(s.alpha(keep, keep).clone()))
        .scale(&pivot.inv().unwrap());
    // substitute into the other row: Z_other u_other = alpha[other][keep] u_keep
    //                                + alpha[other][other] u_other
    let m = s
        .op(other)
        .to_lpdo()
        .compose(&elim)
        .sub(&elim.scale(&s.alpha(other, other).clone()))
        .sub(&Lpdo::scalar(s.alpha(other, keep).clone()));
    let form = Form4::of(&m, s.op(0), s.op(1))?;
    let record = SubstitutionRecord {
        kind: SubstKind::Eliminate,
        forward: vec![(
            s.label(keep).to_string(),
            LinDiffExpr::identity(&vars, s.label(keep)),
        )],
        backward: vec![
            (
                s.label(keep).to_string(),
                LinDiffExpr::identity(&vars, s.label(keep)),
            ),
            (
                s.label(other).to_string(),
                LinDiffExpr::single(s.label(keep), elim),
            ),
        ],
    };
    Ok((form.monic_lpdo(), record, form))
}

/// Transform `v_x = a v_y + b v` (strictly hyperbolic `a`) into a system in
/// characteristic form via left eigenvectors.
pub fn first_order_to_charsys(
    a: &[Vec<Scalar>],
    b: &[Vec<Scalar>],
    unknowns: &[String],
) -> Result<(CharSystem, SubstitutionRecord), CharformError> {
    let n = a.len();
    if n < 2 || b.len() != n || unknowns.len() != n {
        return Err(CharformError::Dimensions);
    }
    for row in a.iter().chain(b.iter()) {
        if row.len() != n {
            return Err(CharformError::Dimensions);
        }
    }
    let vars = a[0][0].vars().clone();
    let cp = linalg::char_poly(a, &vars);
    let lambdas = univariate_roots_pub(&cp, &vars).map_err(CharformError::Lpdo)?;
    if lambdas.len() != n {
        return Err(CharformError::RepeatedEigenvalues);
    }
    let mut lambdas = lambdas;
    lambdas.sort_by_key(|l| l.to_dsl());
    for i in 0..n {
        for j in (i + 1)..n {
            if lambdas[i] == lambdas[j] {
                return Err(CharformError::RepeatedEigenvalues);
            }
        }
    }
    // left eigenvectors: p (a - λI) = 0  <=>  (a^T - λI) p^T = 0
    let mut pmat: Vec<Vec<Scalar>> = Vec::new();
    for lam in &lambdas {
        let mut m = vec![vec![Scalar::zero(&vars); n]; n];
        for (i, mi) in m.iter_mut().enumerate() {
            for (j, mij) in mi.iter_mut().enumerate() {
                *mij = a[j][i].clone();
                if i == j {
                    *mij = mij.sub(lam);
                }
            }
        }
        let mut v =
            linalg::nullspace_vector(&m).ok_or(CharformError::SingularEigenvectors)?;
        // normalize first nonzero component to 1
        let lead = v
            .iter()
            .position(|c| !c.is_zero())
            .ok_or(CharformError::SingularEigenvectors)?;
        let scale = v[lead].inv().unwrap();
        for c in v.iter_mut() {
            *c = c.mul(&scale);
        }
        pmat.push(v);
    }
    let pinv = linalg::invert(&pmat).ok_or(CharformError::SingularEigenvectors)?;
    let ops: Vec<CharOperator> = lambdas
        .iter()
        .map(|lam| CharOperator::new(Scalar::one(&vars), lam.neg()))
        .collect();
    // B~_{is} = sum_k p_{ik} b_{ks} + X_i(p_{is});  alpha = B~ P^{-1}
    let mut btilde = vec![vec![Scalar::zero(&vars); n]; n];
    for i in 0..n {
        for s in 0..n {
            let mut acc = ops[i].apply_scalar(&pmat[i][s]);
            for k in 0..n {
                acc = acc.add(&pmat[i][k].mul(&b[k][s]));
            }
            btilde[i][s] = acc;
        }
    }
    let mut alpha = vec![vec![Scalar::zero(&vars); n]; n];
    for i in 0..n {
        for k in 0..n {
            let mut acc = Scalar::zero(&vars);
            for s in 0..n {
                acc = acc.add(&btilde[i][s].mul(&pinv[s][k]));
            }
            alpha[i][k] = acc;
        }
    }
    let labels: Vec<String> = (0..n).map(|i| format!("u{}", i + 1)).collect();
    let forward: Vec<(String, LinDiffExpr)> = (0..n)
        .map(|i| {
            (
                labels[i].clone(),
                LinDiffExpr(
                    (0..n)
                        .filter(|&k| !pmat[i][k].is_zero())
                        .map(|k| (unknowns[k].clone(), Lpdo::scalar(pmat[i][k].clone())))
                        .collect(),
                ),
            )
        })
        .collect();
    let backward: Vec<(String, LinDiffExpr)> = (0..n)
        .map(|k| {
            (
                unknowns[k].clone(),
                LinDiffExpr(
                    (0..n)
                        .filter(|&i| !pinv[k][i].is_zero())
                        .map(|i| (labels[i].clone(), Lpdo::scalar(pinv[k][i].clone())))
                        .collect(),
                ),
            )
        })
        .collect();
    let record = SubstitutionRecord {
        kind: SubstKind::Introduce,
        forward,
        backward,
    };
    let sys = CharSystem::new(ops, alpha, labels)?.with_history(vec![record.clone()]);
    Ok((sys, record))
}

/// Reduce an order-n strictly hyperbolic operator to an n×n characteristic
/// system by the step-down construction, with the exact round-trip identity
/// as the terminal check.
pub fn nth_order_to_charsys(
    a: &Lpdo,
    unknown: &str,
) -> Result<(CharSystem, SubstitutionRecord), CharformError> {
    let n = a.order() as usize;
    if n < 2 {
        return Err(CharformError::WrongOrder {
            expected: 2,
            found: a.order(),
        });
    }
    let vars = a.vars().clone();
    let roots = characteristic_roots(a)?;
    // monic normalization: strip the unit in front of the full product
    let nc = crate::lpdo::lpdo_to_ncpoly(a, &roots)?;
    let g = nc
        .terms
        .get(&(0..n as u8).collect::<Vec<u8>>())
        .cloned()
        .ok_or(LpdoError::LeadingMismatch)?;
    let target = a.scale(&g.inv().unwrap());

    // unknown α positions: row 0 has all columns, row r >= 1 has columns >= r
    let mut values: BTreeMap<(usize, usize), Scalar> = BTreeMap::new();
    let build = |values: &BTreeMap<(usize, usize), Scalar>| -> Lpdo {
        let zero = Scalar::zero(&vars);
        let get = |r: usize, s: usize| values.get(&(r, s)).unwrap_or(&zero).clone();
        // Φ_{n-1} = 1; Φ_{r-1} = X_r Φ_r + Σ_{s>=r} α_{rs} Φ_s
        let mut phi: Vec<Lpdo> = vec![Lpdo::zero(&vars); n];
        phi[n - 1] = Lpdo::identity(&vars);
        for r in (1..n).rev() {
            let mut p = roots[r].to_lpdo().compose(&phi[r]);
            for s in r..n {
                p = p.add(&phi[s].scale(&get(r, s)));
            }
            phi[r - 1] = p;
        }
        let mut m = roots[0].to_lpdo().compose(&phi[0]);
        for s in 0..n {
            m = m.add(&phi[s].scale(&get(0, s)));
        }
        m
    };

    for d in 1..=n {
        let tau = (n - d) as u32;
        let mut positions: Vec<(usize, usize)> = vec![(0, d - 1)];
        for r in 1..n {
            if r + d - 1 <= n - 1 {
                positions.push((r, r + d - 1));
            }
        }
        let m0 = build(&values);
        let mono_keys: Vec<(u32, u32)> = (0..=tau).map(|i| (i, tau - i)).collect();
        let mut cols: Vec<Vec<Scalar>> = Vec::new();
        for pos in &positions {
            let mut probe = values.clone();
            probe.insert(*pos, Scalar::one(&vars));
            let mp = build(&probe).sub(&m0);
            cols.push(mono_keys.iter().map(|(i, j)| mp.coeff(*i, *j)).collect());
        }
        let matrix: Vec<Vec<Scalar>> = (0..mono_keys.len())
            .map(|row| cols.iter().map(|c| c[row].clone()).collect())
            .collect();
        let rhs: Vec<Scalar> = mono_keys
            .iter()
            .map(|(i, j)| target.coeff(*i, *j).sub(&m0.coeff(*i, *j)))
            .collect();
        let sol = linalg::solve(&matrix, &rhs)
            .ok_or(CharformError::StepDownResidual(tau))?;
        for (pos, val) in positions.iter().zip(sol) {
            if !val.is_zero() {
                values.insert(*pos, val);
            }
        }
    }
    let residual = build(&values).sub(&target);
    if !residual.is_zero() {
        return Err(CharformError::StepDownResidual(residual.order()));
    }

    // assemble the system: row 0: X_1 u_1 = -Σ α_{0s} u_s;
    // row r: X_{r+1} u_{r+1} = u_r - Σ_{s>=r} α_{rs} u_s
    let zero = Scalar::zero(&vars);
    let get = |r: usize, s: usize| values.get(&(r, s)).unwrap_or(&zero).clone();
    let mut alpha = vec![vec![Scalar::zero(&vars); n]; n];
    for s in 0..n {
        alpha[0][s] = get(0, s).neg();
    }
    for r in 1..n {
        alpha[r][r - 1] = Scalar::one(&vars);
        for s in r..n {
            alpha[r][s] = alpha[r][s].sub(&get(r, s));
        }
    }
    let mut labels: Vec<String> = (0..n - 1).map(|i| format!("{unknown}_{}", n - 1 - i)).collect();
    labels.push(unknown.to_string());

    // forward records: u_j = Φ_j(u)
    let mut forward = Vec::new();
    {
        let mut phi: Vec<Lpdo> = vec![Lpdo::zero(&vars); n];
        phi[n - 1] = Lpdo::identity(&vars);
        for r in (1..n).rev() {
            let mut p = roots[r].to_lpdo().compose(&phi[r]);
            for s in r..n {
                p = p.add(&phi[s].scale(&get(r, s)));
            }
            phi[r - 1] = p;
        }
        for j in 0..n {
            forward.push((
                labels[j].clone(),
                LinDiffExpr::single(unknown, phi[j].clone()),
            ));
        }
    }
    let record = SubstitutionRecord {
        kind: SubstKind::Introduce,
        forward,
        backward: vec![(
            unknown.to_string(),
            LinDiffExpr::identity(&vars, unknown),
        )],
    };
    let sys = CharSystem::new(roots, alpha, labels)?.with_history(vec![record.clone()]);
    Ok((sys, record))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::expr::vars::VarSpec;
    use crate::lpdo::CharOperator;

    fn ctx() -> Vars {
        VarSpec::new("x", "y", &["c"])
    }

    fn x(v: &Vars) -> Scalar {
        Scalar::slot_var(v, 0)
    }

    #[test]
    fn ex1_conversion() {
        // Dx Dy - c/(x+y)^2: a1 = a2 = 0, a3 = -c/(x+y)^2, h = k = c/(x+y)^2
        let v = ctx();
        let a = crate::fixtures::ex1_param(&v);
        let (sys, _rec, h, k) = second_order_to_charsys(&a, "u").unwrap();
        let den = Scalar::slot_var(&v, 0)
            .add(&Scalar::slot_var(&v, 1))
            .pow(2)
            .unwrap();
        let expect = Scalar::slot_var(&v, 2).div(&den).unwrap();
        assert_eq!(h, expect);
        assert_eq!(k, expect);
        // S1 matrix [[-a1, 1], [h, -a2]]
        assert!(sys.alpha(0, 0).is_zero());
        assert!(sys.alpha(0, 1).is_one());
        assert_eq!(sys.alpha(1, 0), &expect);
        assert!(sys.alpha(1, 1).is_zero());
    }

    #[test]
    fn dxdy_gives_zero_invariants() {
        let v = ctx();
        let a = Lpdo::monomial(&v, 1, 1, Scalar::one(&v));
        let (_, _, h, k) = second_order_to_charsys(&a, "u").unwrap();
        assert!(h.is_zero());
        assert!(k.is_zero());
    }

    #[test]
    fn composed_operator_has_h_zero() {
        // (Dx+1)(Dy+x): h = 0 by construction, k = -1 nonzero
        let v = ctx();
        let a = Lpdo::dx(&v)
            .add(&Lpdo::identity(&v))
            .compose(&Lpdo::dy(&v).add(&Lpdo::scalar(x(&v))));
        let (_, _, h, k) = second_order_to_charsys(&a, "u").unwrap();
        assert!(h.is_zero());
        assert_eq!(k, Scalar::int(&v, -1));
    }

    #[test]
    fn elimination_roundtrip() {
        let v = ctx();
        let a = crate::fixtures::ex1_param(&v);
        let (sys, _, _, _) = second_order_to_charsys(&a, "u").unwrap();
        let (m, _, form) = charsys2_to_second_order(&sys, 0).unwrap();
        // recovers A up to a unit: the monic form of A in the (X2, X1) frame
        let roots = characteristic_roots(&a).unwrap();
        let aform = Form4::of(&a, &roots[1], &roots[0]).unwrap();
        assert_eq!(m, aform.monic_lpdo());
        let _ = form;
    }

    #[test]
    fn elimination_triangular_error() {
        let v = ctx();
        let ops = vec![CharOperator::dx(&v), CharOperator::dy(&v)];
        let alpha = vec![
            vec![Scalar::one(&v), Scalar::zero(&v)],
            vec![Scalar::one(&v), Scalar::one(&v)],
        ];
        let s = CharSystem::new(ops, alpha, vec!["u1".into(), "u2".into()]).unwrap();
        assert_eq!(
            charsys2_to_second_order(&s, 0).unwrap_err(),
            CharformError::Triangular
        );
    }

    #[test]
    fn first_order_diagonal_decouples() {
        let v = ctx();
        let z = || Scalar::zero(&v);
        let a = vec![
            vec![Scalar::int(&v, 2), z()],
            vec![z(), Scalar::int(&v, 3)],
        ];
        let b = vec![vec![z(), z()], vec![z(), z()]];
        let (sys, _) = first_order_to_charsys(&a, &b, &["v1".into(), "v2".into()]).unwrap();
        for i in 0..2 {
            for k in 0..2 {
                assert!(sys.alpha(i, k).is_zero());
            }
        }
    }

    #[test]
    fn remark1_k3_matrix_eigenvalues() {
        // a = [[0,0,0],[0,0,1],[0,1,0]] has eigenvalues 0, 1, -1
        let v = ctx();
        let z = || Scalar::zero(&v);
        let o = || Scalar::one(&v);
        let a = vec![
            vec![z(), z(), z()],
            vec![z(), z(), o()],
            vec![z(), o(), z()],
        ];
        let b = vec![
            vec![z(), o(), z()],
            vec![z(), z(), z()],
            vec![Scalar::slot_var(&v, 2), z(), z()],
        ];
        let labels = vec!["u".to_string(), "q".to_string(), "p".to_string()];
        let (sys, _) = first_order_to_charsys(&a, &b, &labels).unwrap();
        assert_eq!(sys.n(), 3);
        let dirs: Vec<String> = sys.ops().iter().map(|o| o.to_dsl()).collect();
        assert!(dirs.contains(&"Dx".to_string()));
        assert!(dirs.contains(&"Dx - Dy".to_string()));
        assert!(dirs.contains(&"Dx + Dy".to_string()));
    }

    #[test]
    fn nth_order_composed_triangular() {
        // A = X1 X2 X3 composed from Dx, Dy, Dx+Dy: strictly triangular α
        let v = ctx();
        let x1 = CharOperator::dx(&v);
        let x2 = CharOperator::dy(&v);
        let x3 = CharOperator::new(Scalar::one(&v), Scalar::one(&v));
        let a = x1.to_lpdo().compose(&x2.to_lpdo()).compose(&x3.to_lpdo());
        let (sys, _) = nth_order_to_charsys(&a, "u").unwrap();
        assert_eq!(sys.n(), 3);
        // only the chain couplings u_{r-1} survive off the diagonal
        for i in 0..3 {
            for k in 0..3 {
                let v_ = sys.alpha(i, k);
                if i >= 1 && k == i - 1 {
                    assert!(v_.is_one(), "chain coupling at ({i},{k})");
                } else {
                    assert!(v_.is_zero(), "unexpected entry at ({i},{k}): {v_}");
                }
            }
        }
    }

    #[test]
    fn nth_order_with_lower_terms_roundtrip() {
        // A = X1 X2 X3 + Dx: the internal exact identity is the oracle
        let v = ctx();
        let x1 = CharOperator::dx(&v);
        let x2 = CharOperator::dy(&v);
        let x3 = CharOperator::new(Scalar::one(&v), Scalar::one(&v));
        let a = x1
            .to_lpdo()
            .compose(&x2.to_lpdo())
            .compose(&x3.to_lpdo())
            .add(&Lpdo::dx(&v));
        let (sys, _) = nth_order_to_charsys(&a, "u").unwrap();
        assert_eq!(sys.n(), 3);
    }

    #[test]
    fn gauge_leaves_k_invariant() {
        let v = ctx();
        let a = crate::fixtures::ex1_param(&v);
        let (sys, _, _, _) = second_order_to_charsys(&a, "u").unwrap();
        let g = vec![
            x(&v).add(&Scalar::one(&v)),
            Scalar::slot_var(&v, 1).add(&Scalar::int(&v, 2)),
        ];
        let gauged = sys.gauge(&g);
        let k0 = sys.alpha(0, 1).mul(sys.alpha(1, 0));
        let k1 = gauged.alpha(0, 1).mul(gauged.alpha(1, 0));
        assert_eq!(k0, k1);
    }
}
