//! Shared example problems used by the test suites, the benches and the docs.

use crate::charform::CharSystem;
use crate::expr::scalar::Scalar;
use crate::expr::vars::{VarSpec, Vars};
use crate::lpdo::{CharOperator, Lpdo};

/// Landau's example: `P = Dx + x Dy`, `Q = Dx + 1`,
/// `R = Dx^2 + x Dx Dy + Dx + (2 + x) Dy`, with `Q Q P = R Q`.
pub fn landau(vars: &Vars) -> (Lpdo, Lpdo, Lpdo) {
    let x = Scalar::slot_var(vars, 0);
    let one = Scalar::one(vars);
    let p = Lpdo::dx(vars).add(&Lpdo::monomial(vars, 0, 1, x.clone()));
    let q = Lpdo::dx(vars).add(&Lpdo::identity(vars));
    let r = Lpdo::monomial(vars, 2, 0, one.clone())
        .add(&Lpdo::monomial(vars, 1, 1, x.clone()))
        .add(&Lpdo::dx(vars))
        .add(&Lpdo::monomial(vars, 0, 1, x.add(&Scalar::int(vars, 2))));
    (p, q, r)
}

/// `Dx Dy - c/(x+y)^2` with the symbolic parameter `c` (last slot of `vars`).
pub fn ex1_param(vars: &Vars) -> Lpdo {
    let c = Scalar::slot_var(vars, vars.arity() - 1);
    ex1_with(vars, c)
}

/// `Dx Dy - c/(x+y)^2` for a concrete rational constant `c`.
pub fn ex1_int(c: i64) -> (Vars, Lpdo) {
    let vars = VarSpec::new("x", "y", &[]);
    let op = ex1_with(&vars, Scalar::int(&vars, c));
    (vars, op)
}

pub fn ex1_with(vars: &Vars, c: Scalar) -> Lpdo {
    let x = Scalar::slot_var(vars, 0);
    let y = Scalar::slot_var(vars, 1);
    let pot = c.div(&x.add(&y).pow(2).unwrap()).unwrap().neg();
    Lpdo::monomial(vars, 1, 1, Scalar::one(vars)).add(&Lpdo::scalar(pot))
}

/// Variable context of the dichotomic-noise example: independent variables
/// `(t, x)`, parameters `nu, p1, p2, q2`.
pub fn ww_vars() -> Vars {
    VarSpec::new("t", "x", &["nu", "p1", "p2", "q2"])
}

/// The first-order system of the dichotomic-noise averages, solved for the
/// `t`-derivatives: `v_t = a v_x + b v` with `v = (W, W1)`,
/// `p(x) = p1 x + p2 x^2`, `q(x) = q2 x^2`.
pub fn ww_first_order(vars: &Vars) -> (Vec<Vec<Scalar>>, Vec<Vec<Scalar>>) {
    let x = Scalar::slot_var(vars, 1);
    let nu = Scalar::named(vars, "nu").unwrap();
    let p1 = Scalar::named(vars, "p1").unwrap();
    let p2 = Scalar::named(vars, "p2").unwrap();
    let q2 = Scalar::named(vars, "q2").unwrap();
    let p = p1.mul(&x).add(&p2.mul(&x).mul(&x));
    let q = q2.mul(&x).mul(&x);
    let dp = p.diff(1);
    let dq = q.diff(1);
    let a = vec![vec![p.neg(), q.neg()], vec![q.neg(), p.neg()]];
    let b = vec![
        vec![dp.neg(), dq.neg()],
        vec![dq.neg(), dp.neg().sub(&nu.scale_int(2))],
    ];
    (a, b)
}

/// The characteristic system (dichotomic noise) with `X_i = Dt - λ_i Dx`,
/// `λ_{1,2} = -p ± q`, `u_1 = W - W_1`, `u_2 = W + W_1`.
pub fn ww_char_system(vars: &Vars) -> CharSystem {
    let x = Scalar::slot_var(vars, 1);
    let nu = Scalar::named(vars, "nu").unwrap();
    let p1 = Scalar::named(vars, "p1").unwrap();
    let p2 = Scalar::named(vars, "p2").unwrap();
    let q2 = Scalar::named(vars, "q2").unwrap();
    let p = p1.mul(&x).add(&p2.mul(&x).mul(&x));
    let q = q2.mul(&x).mul(&x);
    let dp = p.diff(1);
    let dq = q.diff(1);
    let lam1 = p.neg().add(&q);
    let lam2 = p.neg().sub(&q);
    let x1 = CharOperator::new(Scalar::one(vars), lam1.neg());
    let x2 = CharOperator::new(Scalar::one(vars), lam2.neg());
    let alpha = vec![
        vec![dp.sub(&dq).add(&nu).neg(), nu.clone()],
        vec![nu.clone(), dp.add(&dq).add(&nu).neg()],
    ];
    CharSystem::new(alpha_ops(x1, x2), alpha, vec!["u1".into(), "u2".into()]).unwrap()
}

fn alpha_ops(x1: CharOperator, x2: CharOperator) -> Vec<CharOperator> {
    vec![x1, x2]
}

/// Substitute `nu = p1` in every scalar of the WW context (specializes the
/// parameter while keeping `p1, p2, q2` symbolic).
pub fn ww_set_nu_to_p1(s: &Scalar) -> Scalar {
    let vars = s.vars().clone();
    let repl: Vec<Scalar> = (0..vars.arity())
        .map(|slot| {
            if vars.name(slot) == "nu" {
                Scalar::named(&vars, "p1").unwrap()
            } else {
                Scalar::slot_var(&vars, slot)
            }
        })
        .collect();
    s.compose(&repl)
}

/// The 3×3 system of the worked example: `X1 = Dx`, `X2 = Dy`,
/// `X3 = Dx + Dy`, α = [[1,2,1],[-6,1,2],[12,6,1]].
pub fn three_by_three(vars: &Vars) -> CharSystem {
    let o = |c: i64| Scalar::int(vars, c);
    let x1 = CharOperator::dx(vars);
    let x2 = CharOperator::dy(vars);
    let x3 = CharOperator::new(Scalar::one(vars), Scalar::one(vars));
    let alpha = vec![
        vec![o(1), o(2), o(1)],
        vec![o(-6), o(1), o(2)],
        vec![o(12), o(6), o(1)],
    ];
    CharSystem::new(
        vec![x1, x2, x3],
        alpha,
        vec!["u1".into(), "u2".into(), "u3".into()],
    )
    .unwrap()
}
