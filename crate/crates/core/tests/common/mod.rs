//! Independent reference computations used as test oracles.
#![allow(dead_code)]

use nalgebra::{Complex, DMatrix, DVector};
use rand::Rng;
use rand_chacha::ChaCha8Rng;
use saar_core::topology::PhiFamily;

/// Characteristic polynomial coefficients `[1, c1, …, cn]` of
/// `det(λI − M)` by the Faddeev–LeVerrier recursion.
pub fn char_poly(m: &DMatrix<f64>) -> Vec<f64> {
    let n = m.nrows();
    let mut coeffs = vec![1.0];
    let mut mk = DMatrix::<f64>::zeros(n, n);
    for k in 1..=n {
        mk = m * &mk + DMatrix::identity(n, n) * coeffs[k - 1];
        let c = -(m * &mk).trace() / k as f64;
        coeffs.push(c);
    }
    coeffs
}

/// Roots of a monic polynomial by Durand–Kerner iteration.
pub fn poly_roots(coeffs: &[f64]) -> Vec<Complex<f64>> {
    let n = coeffs.len() - 1;
    let eval = |z: Complex<f64>| {
        coeffs
            .iter()
            .fold(Complex::new(0.0, 0.0), |acc, &c| acc * z + c)
    };
    let seed = Complex::new(0.4, 0.9);
    let radius = 1.0 + coeffs.iter().skip(1).fold(0.0f64, |a, c| a.max(c.abs()));
    let mut z: Vec<Complex<f64>> = (0..n).map(|k| seed.powu(k as u32) * radius).collect();
    for _ in 0..2000 {
        let mut delta = 0.0f64;
        for i in 0..n {
            let mut denom = Complex::new(1.0, 0.0);
            for j in 0..n {
                if i != j {
                    denom *= z[i] - z[j];
                }
            }
            let step = eval(z[i]) / denom;
            z[i] -= step;
            delta = delta.max(step.norm());
        }
        if delta < 1e-15 {
            break;
        }
    }
    // Newton polish on the original polynomial.
    let deriv: Vec<f64> = coeffs[..n]
        .iter()
        .enumerate()
        .map(|(k, c)| c * (n - k) as f64)
        .collect();
    let eval_d = |z: Complex<f64>| {
        deriv
            .iter()
            .fold(Complex::new(0.0, 0.0), |acc, &c| acc * z + c)
    };
    for r in &mut z {
        for _ in 0..3 {
            let d = eval_d(*r);
            if d.norm() > 1e-12 {
                *r -= eval(*r) / d;
            }
        }
    }
    z
}

pub fn oracle_eigenvalues(m: &DMatrix<f64>) -> Vec<Complex<f64>> {
    poly_roots(&char_poly(m))
}

pub fn kron(a: &DMatrix<f64>, b: &DMatrix<f64>) -> DMatrix<f64> {
    let (ar, ac, br, bc) = (a.nrows(), a.ncols(), b.nrows(), b.ncols());
    DMatrix::from_fn(ar * br, ac * bc, |r, c| {
        a[(r / br, c / bc)] * b[(r % br, c % bc)]
    })
}

pub fn stack(parts: &[DVector<f64>]) -> DVector<f64> {
    let v: Vec<f64> = parts.iter().flat_map(|p| p.iter().copied()).collect();
    DVector::from_vec(v)
}

/// `z − (Σ Φ_ν ⊗ I)⁻¹ Σ_r (Φ_r ⊗ I)(1_N ⊗ x_r)` by dense assembly.
pub fn dense_containment(
    z: &[DVector<f64>],
    leaders: &[DVector<f64>],
    phi: &PhiFamily,
) -> DVector<f64> {
    let n = z.len();
    let dim = leaders[0].len();
    let eye = DMatrix::identity(dim, dim);
    let sum = kron(&phi.phi_sum, &eye);
    let mut rhs = DVector::zeros(n * dim);
    for (r, xr) in leaders.iter().enumerate() {
        let bar = stack(&vec![xr.clone(); n]);
        rhs += kron(&phi.phi[r], &eye) * bar;
    }
    let target = sum.lu().solve(&rhs).expect("nonsingular");
    stack(z) - target
}

/// `−(Σ Φ_ν ⊗ I) Δ_o`
pub fn dense_xi(delta_o: &DVector<f64>, phi: &PhiFamily) -> DVector<f64> {
    let dim = delta_o.len() / phi.phi_sum.nrows();
    -(kron(&phi.phi_sum, &DMatrix::identity(dim, dim)) * delta_o)
}

/// Euclidean projection of `t` onto `{x : a_kᵀx ≤ b_k}` by enumerating every
/// candidate active set. `None` if the set is empty.
pub fn brute_force_projection(
    t: &DVector<f64>,
    rows: &[(DVector<f64>, f64)],
) -> Option<DVector<f64>> {
    let m = rows.len();
    let feasible = |x: &DVector<f64>| rows.iter().all(|(a, b)| a.dot(x) <= b + 1e-9);
    let mut best: Option<(f64, DVector<f64>)> = None;
    for mask in 0u32..(1 << m) {
        let set: Vec<usize> = (0..m).filter(|k| mask & (1 << k) != 0).collect();
        let x = if set.is_empty() {
            t.clone()
        } else {
            let a = DMatrix::from_fn(set.len(), t.len(), |r, c| rows[set[r]].0[c]);
            let rhs = DVector::from_fn(set.len(), |r, _| rows[set[r]].0.dot(t) - rows[set[r]].1);
            let gram = &a * a.transpose();
            if gram.determinant().abs() < 1e-12 {
                continue;
            }
            let lambda = gram.lu().solve(&rhs).unwrap();
            if lambda.iter().any(|&l| l < -1e-12) {
                continue;
            }
            t - a.transpose() * lambda
        };
        if feasible(&x) {
            let d = (&x - t).norm_squared();
            if best.as_ref().is_none_or(|(bd, _)| d < *bd - 1e-15) {
                best = Some((d, x));
            }
        }
    }
    best.map(|b| b.1)
}

/// `exp(M)` by scaling and squaring a Taylor series.
pub fn expm(m: &DMatrix<f64>) -> DMatrix<f64> {
    let norm = m.norm();
    let s = if norm > 0.5 {
        (norm / 0.5).log2().ceil() as i32
    } else {
        0
    };
    let scaled = m / 2f64.powi(s);
    let n = m.nrows();
    let mut term = DMatrix::identity(n, n);
    let mut sum = term.clone();
    for k in 1..30 {
        term = &term * &scaled / k as f64;
        sum += &term;
    }
    for _ in 0..s {
        sum = &sum * &sum;
    }
    sum
}

pub fn random_vector(rng: &mut ChaCha8Rng, n: usize, scale: f64) -> DVector<f64> {
    DVector::from_fn(n, |_, _| rng.gen_range(-scale..scale))
}

pub fn random_matrix(rng: &mut ChaCha8Rng, r: usize, c: usize, scale: f64) -> DMatrix<f64> {
    DMatrix::from_fn(r, c, |_, _| rng.gen_range(-scale..scale))
}
