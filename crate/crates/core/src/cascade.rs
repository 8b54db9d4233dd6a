//! The classical Laplace cascade for 2×2 characteristic systems: invariants,
//! the X1/X2 transformations, invariant chains with exact termination
//! detection, and closed-form solution of terminated chains.

use std::collections::BTreeMap;

use crate::charform::{
    charsys2_to_second_order, CharSystem, CharformError, LinDiffExpr, SubstKind,
    SubstitutionRecord,
};
use crate::expr::scalar::Scalar;
use crate::expr::solution::{CharVar, ChartFrame, SolutionExpr};
use crate::integrate::{exp_flow_integral, log_derivative_solve};
use crate::lpdo::{commutator_decompose, CharOperator, Lpdo};
use crate::solver::{
    eliminate_quadratures, DirectionChart, FunctionRegistry, SolutionBundle, SolverError,
};
use thiserror::Error;

#[derive(Debug, Error, Clone, PartialEq)]
pub enum CascadeError {
    #[error(transparent)]
    Charform(#[from] CharformError),
    #[error("the differential substitution is not defined: the invariant `{0}` vanishes")]
    SubstitutionUndefined(String),
    #[error("chain is not terminated on either side")]
    Unterminated,
    #[error("transformed invariants disagree with the recurrence formula (internal error)")]
    RecurrenceMismatch,
    #[error("no characteristic coordinates: operators are not constant-coefficient and no coords were supplied")]
    NoCoordinates,
    #[error("supplied coordinate `{0}` fails the exact annihilation check")]
    BadCoordinate(String),
    #[error("no rational integrating factor found for a variable-coefficient direction")]
    NoIntegratingFactor,
    #[error(transparent)]
    Solver(#[from] SolverError),
}

/// Laplace invariants of a 2×2 characteristic system, read positionally:
/// `h` is the invariant of the operator obtained by eliminating the row-2
/// unknown, `k = α_{12} α_{21}`.
#[derive(Debug, Clone, PartialEq)]
pub struct Invariants {
    pub h: Scalar,
    pub k: Scalar,
    /// both off-diagonal entries vanish: the system is decoupled and the
    /// invariants are (0, 0) by convention
    pub decoupled: bool,
}

/// Closed formula for `h` plus `k = α12 α21`.  When `α12 = 0` the invariants
/// come from the elimination that still exists; a fully decoupled system
/// reports (0, 0) with the flag set.
pub fn laplace_invariants_sys(s: &CharSystem) -> Result<Invariants, CascadeError> {
    assert_eq!(s.n(), 2, "laplace invariants are defined for 2x2 systems");
    let z1 = s.op(0);
    let z2 = s.op(1);
    let a00 = s.alpha(0, 0);
    let a01 = s.alpha(0, 1);
    let a10 = s.alpha(1, 0);
    let a11 = s.alpha(1, 1);
    let k = a01.mul(a10);
    if a01.is_zero() {
        if a10.is_zero() {
            return Ok(Invariants {
                h: Scalar::zero(s.vars()),
                k,
                decoupled: true,
            });
        }
        let (_, _, form) = charsys2_to_second_order(s, 1)?;
        return Ok(Invariants {
            h: form.h(),
            k,
            decoupled: false,
        });
    }
    let dec = commutator_decompose(z1, z2)?;
    let ln01 = |op: &CharOperator| op.apply_scalar(a01).div(a01).unwrap();
    let h = z2
        .apply_scalar(a00)
        .sub(&z1.apply_scalar(a11))
        .sub(&z1.apply_scalar(&ln01(z2)))
        .sub(&z1.apply_scalar(&dec.p))
        .add(&dec.p.mul(a00))
        .add(&k)
        .add(&a11.add(&ln01(z2)).add(&dec.p).mul(&dec.q));
    Ok(Invariants {
        h,
        k,
        decoupled: false,
    })
}

/// `h1 = 2h - k - X1 X2 ln h + Q X2 ln h + X2(Q) - X1(P) + 2PQ`.
pub fn forward_invariant_formula(
    h: &Scalar,
    k: &Scalar,
    z1: &CharOperator,
    z2: &CharOperator,
) -> Result<Scalar, CascadeError> {
    let dec = commutator_decompose(z1, z2)?;
    let lnh = z2
        .apply_scalar(h)
        .div(h)
        .map_err(|_| CascadeError::SubstitutionUndefined("h".into()))?;
    Ok(h.scale_int(2)
        .sub(k)
        .sub(&z1.apply_scalar(&lnh))
        .add(&dec.q.mul(&lnh))
        .add(&z2.apply_scalar(&dec.q))
        .sub(&z1.apply_scalar(&dec.p))
        .add(&dec.p.mul(&dec.q).scale_int(2)))
}

/// `k-1 = 2k - h - X2 X1 ln k - P X1 ln k + X2(Q) - X1(P) + 2PQ`.
pub fn backward_invariant_formula(
    h: &Scalar,
    k: &Scalar,
    z1: &CharOperator,
    z2: &CharOperator,
) -> Result<Scalar, CascadeError> {
    let dec = commutator_decompose(z1, z2)?;
    let lnk = z1
        .apply_scalar(k)
        .div(k)
        .map_err(|_| CascadeError::SubstitutionUndefined("k".into()))?;
    Ok(k.scale_int(2)
        .sub(h)
        .sub(&z2.apply_scalar(&lnk))
        .sub(&dec.p.mul(&lnk))
        .add(&z2.apply_scalar(&dec.q))
        .sub(&z1.apply_scalar(&dec.p))
        .add(&dec.p.mul(&dec.q).scale_int(2)))
}

fn fresh_label(existing: &[String], stem: &str) -> String {
    let mut i = 1usize;
    loop {
        let cand = format!("{stem}{i}");
        if !existing.iter().any(|l| *l == cand) {
            return cand;
        }
        i += 1;
    }
}

/// The X1-transformation: eliminate the row-2 unknown, introduce
/// `v = X2 u1 + a1 u1`, and return the transformed system with invariants
/// `(h1, h)` and the substitution record carrying the backward maps.
pub fn x1_transform(s: &CharSystem) -> Result<(CharSystem, SubstitutionRecord), CascadeError> {
    assert_eq!(s.n(), 2);
    let vars = s.vars().clone();
    let (_, _, form) = charsys2_to_second_order(s, 0)?;
    let h = form.h();
    if h.is_zero() {
        return Err(CascadeError::SubstitutionUndefined("h".into()));
    }
    let z1 = s.op(0).clone();
    let z2 = s.op(1).clone();
    let kept = s.label(0).to_string();
    let other = s.label(1).to_string();
    let fresh = fresh_label(s.labels(), "v");
    let alpha = vec![
        vec![form.a2.neg(), h.clone()],
        vec![Scalar::one(&vars), form.a1.neg()],
    ];
    let labels = vec![fresh.clone(), kept.clone()];
    // v = X2 u1 + a1 u1
    let v_def = z2.to_lpdo().add(&Lpdo::scalar(form.a1.clone()));
    // u2 = (X1 u1 - α00 u1)/α01 (elimination relation of the source system)
    let u2_back = z1
        .to_lpdo()
        .sub(&Lpdo::scalar(s.alpha(0, 0).clone()))
        .scale(&s.alpha(0, 1).inv().unwrap());
    let record = SubstitutionRecord {
        kind: SubstKind::LaplaceX1,
        forward: vec![
            (fresh.clone(), LinDiffExpr::single(&kept, v_def)),
            (kept.clone(), LinDiffExpr::identity(&vars, &kept)),
        ],
        backward: vec![
            (kept.clone(), LinDiffExpr::identity(&vars, &kept)),
            (other, LinDiffExpr::single(&kept, u2_back)),
        ],
    };
    let sys =
        CharSystem::new(vec![z1, z2], alpha, labels)?.with_history(vec![record.clone()]);
    Ok((sys, record))
}

/// The X2-transformation: introduce `w = X1 u1 + ā2 u1`, eliminate through
/// `u1 = (X2 w + ā1 w)/k`, and return the (S2)-form of the transformed
/// operator, with invariants `(k, k-1)`.
pub fn x2_transform(s: &CharSystem) -> Result<(CharSystem, SubstitutionRecord), CascadeError> {
    assert_eq!(s.n(), 2);
    let vars = s.vars().clone();
    let (_, _, form) = charsys2_to_second_order(s, 0)?;
    let k = form.k();
    if k.is_zero() {
        return Err(CascadeError::SubstitutionUndefined("k".into()));
    }
    let z1 = s.op(0).clone();
    let z2 = s.op(1).clone();
    let dec = form.commutator();
    let ab1 = form.a1.add(&dec.p);
    let ab2 = form.a2.add(&dec.q);
    // transformed operator: substitute u = (X2 w + ā1 w)/k into X1 u + ā2 u - w = 0
    let sub = z2
        .to_lpdo()
        .add(&Lpdo::scalar(ab1.clone()))
        .scale(&k.inv().unwrap());
    let m = z1
        .to_lpdo()
        .add(&Lpdo::scalar(ab2.clone()))
        .compose(&sub)
        .sub(&Lpdo::identity(&vars));
    let mform = crate::lpdo::Form4::of(&m, &z1, &z2)?;
    let bb1 = mform.a1.add(&dec.p);
    let bb2 = mform.a2.add(&dec.q);
    let km1 = mform.k();
    let kept = s.label(0).to_string();
    let other = s.label(1).to_string();
    let w = fresh_label(s.labels(), "w");
    let w2 = fresh_label(&[s.labels(), &[w.clone()][..]].concat(), "w");
    let alpha = vec![
        vec![bb2.neg(), Scalar::one(&vars)],
        vec![km1.clone(), bb1.neg()],
    ];
    let labels = vec![w.clone(), w2.clone()];
    // forward: w = X1 u1 + ā2 u1; w2 = X1 w + b̄2 w
    let w_def = z1.to_lpdo().add(&Lpdo::scalar(ab2));
    let w2_def = z1.to_lpdo().add(&Lpdo::scalar(bb2)).compose(&w_def);
    // backward: u1 = (X2 w + ā1 w)/k; u2 = (X1 u1 - α00 u1)/α01
    let u1_back = z2
        .to_lpdo()
        .add(&Lpdo::scalar(ab1))
        .scale(&k.inv().unwrap());
    let u2_back = z1
        .to_lpdo()
        .sub(&Lpdo::scalar(s.alpha(0, 0).clone()))
        .scale(&s.alpha(0, 1).inv().unwrap());
    let record = SubstitutionRecord {
        kind: SubstKind::LaplaceX2,
        forward: vec![
            (w.clone(), LinDiffExpr::single(&kept, w_def)),
            (w2, LinDiffExpr::single(&kept, w2_def)),
        ],
        backward: vec![
            (kept.clone(), LinDiffExpr::single(&w, u1_back)),
            (other, LinDiffExpr::single(&kept, u2_back)),
        ],
    };
    let sys =
        CharSystem::new(vec![z1, z2], alpha, labels)?.with_history(vec![record.clone()]);
    Ok((sys, record))
}

#[derive(Debug, Clone, PartialEq, serde::Serialize)]
#[serde(rename_all = "kebab-case")]
pub enum ChainEnd {
    Terminated(usize),
    DepthExhausted,
}

#[derive(Debug, Clone)]
pub struct ChainStep {
    pub h: Scalar,
    pub k: Scalar,
    pub system: CharSystem,
    pub record: SubstitutionRecord,
}

/// Two-sided chain of Laplace invariants with exact zero-test termination;
/// `k_(i) = h_(i-1)` holds throughout.
#[derive(Debug, Clone)]
pub struct LaplaceChain {
    pub base: CharSystem,
    pub h0: Scalar,
    pub k0: Scalar,
    pub forward: Vec<ChainStep>,
    pub backward: Vec<ChainStep>,
    pub forward_end: ChainEnd,
    pub backward_end: ChainEnd,
}

impl LaplaceChain {
    pub fn forward_terminated(&self) -> Option<usize> {
        match self.forward_end {
            ChainEnd::Terminated(n) => Some(n),
            ChainEnd::DepthExhausted => None,
        }
    }

    pub fn backward_terminated(&self) -> Option<usize> {
        match self.backward_end {
            ChainEnd::Terminated(n) => Some(n),
            ChainEnd::DepthExhausted => None,
        }
    }

    /// The invariant sequence `h_(-K..), ..., h_0, ..., h_(N)` as printable
    /// strings indexed by chain position.
    pub fn invariant_strings(&self) -> Vec<(i64, String)> {
        let mut out = Vec::new();
        for (i, st) in self.backward.iter().enumerate().rev() {
            out.push((-(i as i64) - 1, st.h.to_dsl()));
        }
        out.push((0, self.h0.to_dsl()));
        for (i, st) in self.forward.iter().enumerate() {
            out.push((i as i64 + 1, st.h.to_dsl()));
        }
        out
    }
}

/// Run the cascade in both directions; the invariants of every transformed
/// system are cross-checked against the recurrence formulas.
pub fn cascade_run(
    s: &CharSystem,
    max_n: usize,
    max_k: usize,
) -> Result<LaplaceChain, CascadeError> {
    let inv0 = laplace_invariants_sys(s)?;
    let z1 = s.op(0).clone();
    let z2 = s.op(1).clone();

    let mut forward = Vec::new();
    let mut forward_end = ChainEnd::Terminated(0);
    if !inv0.h.is_zero() {
        forward_end = ChainEnd::DepthExhausted;
        let mut cur = s.clone();
        let mut h_prev = inv0.h.clone();
        let mut k_prev = inv0.k.clone();
        for i in 1..=max_n {
            let (t, rec) = x1_transform(&cur)?;
            let inv = laplace_invariants_sys(&t)?;
            let predicted = forward_invariant_formula(&h_prev, &k_prev, &z1, &z2)?;
            if inv.h != predicted || inv.k != h_prev {
                return Err(CascadeError::RecurrenceMismatch);
            }
            forward.push(ChainStep {
                h: inv.h.clone(),
                k: inv.k.clone(),
                system: t.clone(),
                record: rec,
            });
            if inv.h.is_zero() {
                forward_end = ChainEnd::Terminated(i);
                break;
            }
            k_prev = inv.k;
            h_prev = inv.h;
            cur = t;
        }
    }

    let mut backward = Vec::new();
    let mut backward_end = ChainEnd::Terminated(0);
    if !inv0.k.is_zero() {
        backward_end = ChainEnd::DepthExhausted;
        let mut cur = s.clone();
        let mut h_prev = inv0.h.clone();
        let mut k_prev = inv0.k.clone();
        for i in 1..=max_k {
            let (t, rec) = x2_transform(&cur)?;
            let inv = laplace_invariants_sys(&t)?;
            let predicted = backward_invariant_formula(&h_prev, &k_prev, &z1, &z2)?;
            if inv.k != predicted || inv.h != k_prev {
                return Err(CascadeError::RecurrenceMismatch);
            }
            backward.push(ChainStep {
                h: inv.h.clone(),
                k: inv.k.clone(),
                system: t.clone(),
                record: rec,
            });
            if inv.k.is_zero() {
                backward_end = ChainEnd::Terminated(i);
                break;
            }
            h_prev = inv.h;
            k_prev = inv.k;
            cur = t;
        }
    }

    Ok(LaplaceChain {
        base: s.clone(),
        h0: inv0.h,
        k0: inv0.k,
        forward,
        backward,
        forward_end,
        backward_end,
    })
}

// ---------------------------------------------------------------------------
// solving terminated chains
// ---------------------------------------------------------------------------

/// Characteristic coordinates for the chain's operator pair: synthesized
/// linear forms for constant-coefficient pairs, caller-supplied otherwise.
#[derive(Debug, Clone)]
pub struct ChainCoords {
    pub xbar: CharVar,
    pub ybar: CharVar,
    /// integration frame along X2 (flow ∝ X2)
    pub frame2: ChartFrame,
    /// integration frame along X1
    pub frame1: ChartFrame,
    pub constant: bool,
}

impl ChainCoords {
    pub fn synthesize(z1: &CharOperator, z2: &CharOperator) -> Option<ChainCoords> {
        if !z1.is_constant() || !z2.is_constant() {
            return None;
        }
        let xbar = CharVar::Linear(invariant_form(&z2.canonical()));
        let ybar = CharVar::Linear(invariant_form(&z1.canonical()));
        Some(ChainCoords {
            xbar,
            ybar,
            frame2: ChartFrame::constant(z2.clone()),
            frame1: ChartFrame::constant(z1.clone()),
            constant: true,
        })
    }

    pub fn from_supplied(
        z1: &CharOperator,
        z2: &CharOperator,
        xbar: &(String, CharVar),
        ybar: &(String, CharVar),
    ) -> Result<ChainCoords, CascadeError> {
        if !xbar.1.along(z2).is_zero() || xbar.1.along(z1).is_zero() {
            return Err(CascadeError::BadCoordinate(xbar.0.clone()));
        }
        if !ybar.1.along(z1).is_zero() || ybar.1.along(z2).is_zero() {
            return Err(CascadeError::BadCoordinate(ybar.0.clone()));
        }
        let speed2 = ybar.1.along(z2);
        let speed1 = xbar.1.along(z1);
        let flow2 = z2.scale(&speed2.inv().unwrap());
        let flow1 = z1.scale(&speed1.inv().unwrap());
        let frame2 = ChartFrame {
            flow: flow2.clone(),
            transverse: flow1.clone(),
            name: Some(ybar.0.clone()),
        };
        let frame1 = ChartFrame {
            flow: flow1,
            transverse: flow2,
            name: Some(xbar.0.clone()),
        };
        Ok(ChainCoords {
            xbar: xbar.1.clone(),
            ybar: ybar.1.clone(),
            frame2,
            frame1,
            constant: z1.is_constant() && z2.is_constant(),
        })
    }
}

/// The linear invariant `n x - m y` of a constant direction.
pub fn invariant_form(op: &CharOperator) -> Scalar {
    let vars = op.vars();
    let x = Scalar::slot_var(vars, 0);
    let y = Scalar::slot_var(vars, 1);
    op.n.mul(&x).sub(&op.m.mul(&y))
}

/// Homogeneous solution factor of `(Z + a)φ = 0` (φ = factor · fn(coord)).
fn homogeneous_factor(
    z: &CharOperator,
    a: &Scalar,
    frame: &ChartFrame,
    constant: bool,
) -> Result<SolutionExpr, CascadeError> {
    if constant {
        let ei = exp_flow_integral(&a.neg(), &frame.flow);
        Ok(ei.to_expr(frame))
    } else {
        let g = log_derivative_solve(&a.neg(), z, &[z.m.clone(), z.n.clone()])
            .ok_or(CascadeError::NoIntegratingFactor)?;
        Ok(SolutionExpr::Scalar(g))
    }
}

/// Closed-form solution of a terminated chain: the quadrature-free two-sided
/// combination when both ends terminate, the general one-sided form with a
/// quadrature otherwise.
pub fn cascade_solve(
    chain: &LaplaceChain,
    coords: Option<&ChainCoords>,
) -> Result<SolutionBundle, CascadeError> {
    let base = &chain.base;
    let vars = base.vars().clone();
    let z1 = base.op(0).clone();
    let z2 = base.op(1).clone();
    let owned;
    let coords = match coords {
        Some(c) => c,
        None => {
            owned = ChainCoords::synthesize(&z1, &z2).ok_or(CascadeError::NoCoordinates)?;
            &owned
        }
    };
    let nf = chain.forward_terminated();
    let nb = chain.backward_terminated();
    if nf.is_none() && nb.is_none() {
        return Err(CascadeError::Unterminated);
    }
    let mut registry = FunctionRegistry::default();

    let terminal = |steps: &[ChainStep], n: usize| -> CharSystem {
        if n == 0 {
            base.clone()
        } else {
            steps[n - 1].system.clone()
        }
    };
    let walk_back = |steps: &[ChainStep],
                     n: usize,
                     mut values: BTreeMap<String, SolutionExpr>|
     -> BTreeMap<String, SolutionExpr> {
        for i in (0..n).rev() {
            values = steps[i]
                .record
                .apply_backward(&values)
                .expect("chain record names are consistent");
        }
        values
    };
    let complete_pair = |sys: &CharSystem, phi: &SolutionExpr| -> BTreeMap<String, SolutionExpr> {
        let u2 = sys
            .op(0)
            .apply(phi)
            .sub(&phi.mul_scalar(sys.alpha(0, 0)))
            .mul_scalar(&sys.alpha(0, 1).inv().expect("chain pivot nonzero"));
        let mut m = BTreeMap::new();
        m.insert(sys.label(0).to_string(), phi.clone());
        m.insert(sys.label(1).to_string(), u2);
        m
    };

    let mut total: BTreeMap<String, SolutionExpr> = BTreeMap::new();
    let add_part =
        |total: &mut BTreeMap<String, SolutionExpr>, part: BTreeMap<String, SolutionExpr>| {
            for (k, v) in part {
                total.entry(k).and_modify(|e| *e = e.add(&v)).or_insert(v);
            }
        };

    match (nf, nb) {
        (Some(n), Some(kk)) => {
            {
                let sys = terminal(&chain.forward, n);
                let (_, _, form) = charsys2_to_second_order(&sys, 0)?;
                debug_assert!(form.h().is_zero());
                let e = homogeneous_factor(&z2, &form.a1, &coords.frame2, coords.constant)?;
                let fid = registry.fresh("F", coords.xbar.clone());
                let phi = e.mul(&SolutionExpr::func(&fid, 0, coords.xbar.clone()));
                let values = complete_pair(&sys, &phi);
                add_part(&mut total, walk_back(&chain.forward, n, values));
            }
            {
                let sys = terminal(&chain.backward, kk);
                let (_, _, form) = charsys2_to_second_order(&sys, 0)?;
                debug_assert!(form.k().is_zero());
                let dec = form.commutator();
                let ab2 = form.a2.add(&dec.q);
                let e = homogeneous_factor(&z1, &ab2, &coords.frame1, coords.constant)?;
                let gid = registry.fresh("G", coords.ybar.clone());
                let psi = e.mul(&SolutionExpr::func(&gid, 0, coords.ybar.clone()));
                let values = complete_pair(&sys, &psi);
                add_part(&mut total, walk_back(&chain.backward, kk, values));
            }
        }
        (Some(n), None) => {
            let sys = terminal(&chain.forward, n);
            let values = solve_factored(&sys, coords, &mut registry, true)?;
            add_part(&mut total, walk_back(&chain.forward, n, values));
        }
        (None, Some(kk)) => {
            let sys = terminal(&chain.backward, kk);
            let values = solve_factored(&sys, coords, &mut registry, false)?;
            add_part(&mut total, walk_back(&chain.backward, kk, values));
        }
        (None, None) => unreachable!(),
    }

    let exprs: Vec<(String, SolutionExpr)> = base
        .labels()
        .iter()
        .map(|l| {
            (
                l.clone(),
                total
                    .remove(l)
                    .unwrap_or_else(|| SolutionExpr::zero(&vars)),
            )
        })
        .collect();
    let mut bundle = SolutionBundle {
        exprs,
        registry,
        trail: base.history.clone(),
        quadrature_free: false,
    };
    eliminate_quadratures(&mut bundle);
    bundle.recompute_quadrature_free();
    Ok(bundle)
}

/// General two-function solution of a terminated system whose kept-unknown
/// operator factors (`h = 0`: right factor `X2 + a1`; `k = 0`: right factor
/// `X1 + ā2`).
fn solve_factored(
    sys: &CharSystem,
    coords: &ChainCoords,
    registry: &mut FunctionRegistry,
    forward_side: bool,
) -> Result<BTreeMap<String, SolutionExpr>, CascadeError> {
    let (_, _, form) = charsys2_to_second_order(sys, 0)?;
    let z1 = sys.op(0).clone();
    let z2 = sys.op(1).clone();
    let dec = form.commutator();
    let (outer_op, outer_a, inner_op, inner_a, inner_chart, outer_chart) = if forward_side {
        (
            z1.clone(),
            form.a2.clone(),
            z2.clone(),
            form.a1.clone(),
            DirectionChart {
                invariant: coords.xbar.clone(),
                frame: coords.frame2.clone(),
                constant: coords.constant,
            },
            DirectionChart {
                invariant: coords.ybar.clone(),
                frame: coords.frame1.clone(),
                constant: coords.constant,
            },
        )
    } else {
        let ab1 = form.a1.add(&dec.p);
        let ab2 = form.a2.add(&dec.q);
        (
            z2.clone(),
            ab1,
            z1.clone(),
            ab2,
            DirectionChart {
                invariant: coords.ybar.clone(),
                frame: coords.frame1.clone(),
                constant: coords.constant,
            },
            DirectionChart {
                invariant: coords.xbar.clone(),
                frame: coords.frame2.clone(),
                constant: coords.constant,
            },
        )
    };
    // χ solves (outer + a_outer)χ = 0
    let e_outer = homogeneous_factor(&outer_op, &outer_a, &outer_chart.frame, coords.constant)?;
    let chi_id = registry.fresh(
        if forward_side { "G" } else { "F" },
        outer_chart.invariant.clone(),
    );
    let chi = e_outer.mul(&SolutionExpr::func(&chi_id, 0, outer_chart.invariant.clone()));
    // φ solves (inner + a_inner)φ = χ
    let phi = crate::solver::solve_first_order_scalar(
        &inner_op,
        &inner_a.neg(),
        &chi,
        if forward_side { "F" } else { "G" },
        &inner_chart,
        registry,
    )?;
    let u2 = sys
        .op(0)
        .apply(&phi)
        .sub(&phi.mul_scalar(sys.alpha(0, 0)))
        .mul_scalar(&sys.alpha(0, 1).inv().expect("chain pivot nonzero"));
    let mut m = BTreeMap::new();
    m.insert(sys.label(0).to_string(), phi);
    m.insert(sys.label(1).to_string(), u2);
    Ok(m)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::charform::second_order_to_charsys;
    use crate::expr::vars::{VarSpec, Vars};

    fn ex1_system(c: i64) -> (Vars, CharSystem, Scalar, Scalar) {
        let (vars, a) = crate::fixtures::ex1_int(c);
        let (sys, _, h, k) = second_order_to_charsys(&a, "u").unwrap();
        (vars, sys, h, k)
    }

    #[test]
    fn constant_matrix_invariants() {
        let v = VarSpec::new("x", "y", &[]);
        let a = |c: i64| Scalar::int(&v, c);
        let sys = CharSystem::new(
            vec![CharOperator::dx(&v), CharOperator::dy(&v)],
            vec![vec![a(1), a(2)], vec![a(3), a(4)]],
            vec!["u1".into(), "u2".into()],
        )
        .unwrap();
        let inv = laplace_invariants_sys(&sys).unwrap();
        assert_eq!(inv.h, a(6));
        assert_eq!(inv.k, a(6));
    }

    #[test]
    fn formula_equals_elimination_oracle() {
        let v = VarSpec::new("x", "y", &[]);
        let x = Scalar::slot_var(&v, 0);
        let y = Scalar::slot_var(&v, 1);
        let sys = CharSystem::new(
            vec![
                CharOperator::dx(&v),
                CharOperator::new(x.clone(), Scalar::one(&v)),
            ],
            vec![
                vec![x.add(&y), Scalar::one(&v).add(&x)],
                vec![y.clone(), x.mul(&y)],
            ],
            vec!["u1".into(), "u2".into()],
        )
        .unwrap();
        let inv = laplace_invariants_sys(&sys).unwrap();
        let (_, _, form) = charsys2_to_second_order(&sys, 0).unwrap();
        assert_eq!(inv.h, form.h());
        assert_eq!(inv.k, form.k());
    }

    #[test]
    fn ex1_transform_step() {
        let (vars, sys, h0, _) = ex1_system(6);
        let den = Scalar::slot_var(&vars, 0)
            .add(&Scalar::slot_var(&vars, 1))
            .pow(2)
            .unwrap();
        assert_eq!(h0, Scalar::int(&vars, 6).div(&den).unwrap());
        let (t1, _) = x1_transform(&sys).unwrap();
        let inv1 = laplace_invariants_sys(&t1).unwrap();
        assert_eq!(inv1.h, Scalar::int(&vars, 4).div(&den).unwrap());
        assert_eq!(inv1.k, h0);
    }

    #[test]
    fn ex1_chain_symmetry_and_termination() {
        for n in 1..=3usize {
            let c = (n * (n + 1)) as i64;
            let (vars, sys, _, _) = ex1_system(c);
            let chain = cascade_run(&sys, 10, 10).unwrap();
            assert_eq!(chain.forward_terminated(), Some(n), "forward n={n}");
            assert_eq!(chain.backward_terminated(), Some(n), "backward n={n}");
            let den = Scalar::slot_var(&vars, 0)
                .add(&Scalar::slot_var(&vars, 1))
                .pow(2)
                .unwrap();
            for (m, step) in chain.forward.iter().enumerate() {
                let m = (m + 1) as i64;
                let expect = Scalar::int(&vars, c - m * (m + 1)).div(&den).unwrap();
                assert_eq!(step.h, expect);
            }
            for (m, step) in chain.backward.iter().enumerate() {
                let m = (m + 1) as i64;
                let expect = Scalar::int(&vars, c - m * (m + 1)).div(&den).unwrap();
                assert_eq!(step.k, expect, "backward step {m}");
            }
        }
    }

    #[test]
    fn ex1_generic_constant_exhausts() {
        let (_, sys, _, _) = ex1_system(1);
        let chain = cascade_run(&sys, 5, 5).unwrap();
        assert_eq!(chain.forward_end, ChainEnd::DepthExhausted);
        assert_eq!(chain.backward_end, ChainEnd::DepthExhausted);
        assert_eq!(chain.forward.len(), 5);
    }

    #[test]
    fn h_zero_terminates_immediately() {
        let (_, sys, _, _) = ex1_system(0);
        let chain = cascade_run(&sys, 5, 5).unwrap();
        assert_eq!(chain.forward_terminated(), Some(0));
        assert_eq!(chain.backward_terminated(), Some(0));
        assert!(chain.forward.is_empty());
    }

    #[test]
    fn roundtrip_invariants_restored() {
        let (_, sys, h0, k0) = ex1_system(6);
        let (t1, _) = x1_transform(&sys).unwrap();
        let (t0, _) = x2_transform(&t1).unwrap();
        let inv = laplace_invariants_sys(&t0).unwrap();
        assert_eq!(inv.h, h0);
        assert_eq!(inv.k, k0);
    }

    #[test]
    fn dxdy_solves_to_two_functions() {
        let (_, a) = crate::fixtures::ex1_int(0);
        let (sys, _, _, _) = second_order_to_charsys(&a, "u").unwrap();
        let chain = cascade_run(&sys, 5, 5).unwrap();
        let bundle = cascade_solve(&chain, None).unwrap();
        assert!(bundle.quadrature_free);
        let values: BTreeMap<String, SolutionExpr> = bundle.exprs.iter().cloned().collect();
        for r in sys.residuals(&values) {
            assert!(r.is_zero_expr(), "residual {}", r.to_dsl());
        }
        assert_eq!(bundle.registry.functions.len(), 2);
    }

    #[test]
    fn ex1_n1_quadrature_free_solution() {
        let (_, a) = crate::fixtures::ex1_int(2);
        let (sys, _, _, _) = second_order_to_charsys(&a, "u").unwrap();
        let chain = cascade_run(&sys, 5, 5).unwrap();
        assert_eq!(chain.forward_terminated(), Some(1));
        let bundle = cascade_solve(&chain, None).unwrap();
        assert!(bundle.quadrature_free, "expected quadrature-free bundle");
        let values: BTreeMap<String, SolutionExpr> = bundle.exprs.iter().cloned().collect();
        for r in sys.residuals(&values) {
            assert!(r.is_zero_expr(), "residual {}", r.to_dsl());
        }
        let u = &values["u"];
        let res = a.apply(u);
        assert!(res.is_zero_expr(), "operator residual {}", res.to_dsl());
    }
}
