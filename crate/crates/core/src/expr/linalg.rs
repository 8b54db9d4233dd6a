//! Exact linear algebra over the scalar field (small dense systems only).

use super::scalar::Scalar;
use super::vars::Vars;

/// Solve `M x = b` by Gaussian elimination; `None` if `M` is singular.
pub fn solve(m: &[Vec<Scalar>], b: &[Scalar]) -> Option<Vec<Scalar>> {
    let n = m.len();
    if n == 0 {
        return Some(vec![]);
    }
    let vars = m[0][0].vars().clone();
    let mut a: Vec<Vec<Scalar>> = m.to_vec();
    let mut rhs: Vec<Scalar> = b.to_vec();
    let mut perm: Vec<usize> = (0..n).collect();
    for col in 0..n {
        let pivot = (col..n).find(|&r| !a[r][col].is_zero())?;
        a.swap(col, pivot);
        rhs.swap(col, pivot);
        perm.swap(col, pivot);
        let p = a[col][col].clone();
        for r in (col + 1)..n {
            if a[r][col].is_zero() {
                continue;
            }
            let f = a[r][col].div(&p).unwrap();
            for c in col..n {
                a[r][c] = a[r][c].sub(&f.mul(&a[col][c]));
            }
            rhs[r] = rhs[r].sub(&f.mul(&rhs[col]));
        }
    }
    let mut x = vec![Scalar::zero(&vars); n];
    for row in (0..n).rev() {
        let mut acc = rhs[row].clone();
        for c in (row + 1)..n {
            acc = acc.sub(&a[row][c].mul(&x[c]));
        }
        x[row] = acc.div(&a[row][row]).unwrap();
    }
    Some(x)
}

/// One nullspace vector of `M` (n x n, rank n-1 expected); `None` if `M` is
/// invertible or rank < n-1 handling fails.
pub fn nullspace_vector(m: &[Vec<Scalar>]) -> Option<Vec<Scalar>> {
    let n = m.len();
    let vars = m[0][0].vars().clone();
    let mut a: Vec<Vec<Scalar>> = m.to_vec();
    let mut pivots: Vec<(usize, usize)> = Vec::new(); // (row, col)
    let mut row = 0;
    for col in 0..n {
        let Some(p) = (row..n).find(|&r| !a[r][col].is_zero()) else {
            continue;
        };
        a.swap(row, p);
        let pv = a[row][col].clone();
        for r in 0..n {
            if r == row || a[r][col].is_zero() {
                continue;
            }
            let f = a[r][col].div(&pv).unwrap();
            for c in 0..n {
                a[r][c] = a[r][c].sub(&f.mul(&a[row][c]));
            }
        }
        pivots.push((row, col));
        row += 1;
        if row == n {
            break;
        }
    }
    let pivot_cols: Vec<usize> = pivots.iter().map(|&(_, c)| c).collect();
    let free = (0..n).find(|c| !pivot_cols.contains(c))?;
    let mut x = vec![Scalar::zero(&vars); n];
    x[free] = Scalar::one(&vars);
    for &(r, c) in pivots.iter().rev() {
        // a[r][c] x_c + a[r][free] x_free = 0
        let rhs = a[r][free].mul(&x[free]).neg();
        x[c] = rhs.div(&a[r][c]).unwrap();
    }
    Some(x)
}

/// Matrix inverse, `None` if singular.
pub fn invert(m: &[Vec<Scalar>]) -> Option<Vec<Vec<Scalar>>> {
    let n = m.len();
    let vars = m[0][0].vars().clone();
    let mut cols = Vec::with_capacity(n);
    for j in 0..n {
        let mut e = vec![Scalar::zero(&vars); n];
        e[j] = Scalar::one(&vars);
        cols.push(solve(m, &e)?);
    }
    // transpose the solution columns into rows
    let mut out = vec![vec![Scalar::zero(&vars); n]; n];
    for (j, col) in cols.iter().enumerate() {
        for (i, v) in col.iter().enumerate() {
            out[i][j] = v.clone();
        }
    }
    Some(out)
}

/// Coefficients of det(tI - M) via Faddeev-LeVerrier, ascending in t:
/// `[c0, c1, ..., c_{n-1}, 1]`.
pub fn char_poly(m: &[Vec<Scalar>], vars: &Vars) -> Vec<Scalar> {
    let n = m.len();
    let ident: Vec<Vec<Scalar>> = (0..n)
        .map(|i| {
            (0..n)
                .map(|j| {
                    if i == j {
                        Scalar::one(vars)
                    } else {
                        Scalar::zero(vars)
                    }
                })
                .collect()
        })
        .collect();
    let mut coeffs = vec![Scalar::zero(vars); n + 1];
    coeffs[n] = Scalar::one(vars);
    let mut mk = ident.clone();
    let mut ck = Scalar::one(vars);
    for k in 1..=n {
        // M_k = M * (M_{k-1} + c_{n-k+1} I) pattern
        let am = mat_mul(m, &mk, vars);
        let tr = trace(&am, vars);
        ck = tr.div(&Scalar::int(vars, k as i64)).unwrap().neg();
        coeffs[n - k] = ck.clone();
        mk = mat_add(&am, &mat_scale(&ident, &ck), vars);
    }
    let _ = ck;
    coeffs
}

fn mat_mul(a: &[Vec<Scalar>], b: &[Vec<Scalar>], vars: &Vars) -> Vec<Vec<Scalar>> {
    let n = a.len();
    let mut out = vec![vec![Scalar::zero(vars); n]; n];
    for i in 0..n {
        for j in 0..n {
            let mut acc = Scalar::zero(vars);
            for k in 0..n {
                acc = acc.add(&a[i][k].mul(&b[k][j]));
            }
            out[i][j] = acc;
        }
    }
    out
}

fn mat_add(a: &[Vec<Scalar>], b: &[Vec<Scalar>], vars: &Vars) -> Vec<Vec<Scalar>> {
    let _ = vars;
    a.iter()
        .zip(b)
        .map(|(ra, rb)| ra.iter().zip(rb).map(|(x, y)| x.add(y)).collect())
        .collect()
}

fn mat_scale(a: &[Vec<Scalar>], s: &Scalar) -> Vec<Vec<Scalar>> {
    a.iter()
        .map(|r| r.iter().map(|x| x.mul(s)).collect())
        .collect()
}

fn trace(a: &[Vec<Scalar>], vars: &Vars) -> Scalar {
    let mut acc = Scalar::zero(vars);
    for (i, row) in a.iter().enumerate() {
        acc = acc.add(&row[i]);
    }
    acc
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::expr::vars::VarSpec;

    #[test]
    fn solve_2x2() {
        let v = VarSpec::new("x", "y", &[]);
        let x = Scalar::slot_var(&v, 0);
        let m = vec![
            vec![Scalar::one(&v), x.clone()],
            vec![Scalar::int(&v, 2), Scalar::one(&v)],
        ];
        let b = vec![x.clone(), Scalar::int(&v, 3)];
        let sol = solve(&m, &b).unwrap();
        // verify
        for i in 0..2 {
            let got = m[i][0].mul(&sol[0]).add(&m[i][1].mul(&sol[1]));
            assert_eq!(got, b[i]);
        }
    }

    #[test]
    fn char_poly_of_remark1_matrix() {
        // [[0,0,0],[0,0,1],[0,1,0]] has char poly t(t^2 - 1)
        let v = VarSpec::new("x", "y", &[]);
        let z = || Scalar::zero(&v);
        let o = || Scalar::one(&v);
        let m = vec![
            vec![z(), z(), z()],
            vec![z(), z(), o()],
            vec![z(), o(), z()],
        ];
        let cp = char_poly(&m, &v);
        // t^3 - t: coefficients ascending [0, -1, 0, 1]
        assert_eq!(cp[0], Scalar::zero(&v));
        assert_eq!(cp[1], Scalar::int(&v, -1));
        assert_eq!(cp[2], Scalar::zero(&v));
        assert_eq!(cp[3], Scalar::one(&v));
    }
}
