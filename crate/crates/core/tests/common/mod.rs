//! Independent numerical oracles for the integration suite. Everything here
//! deliberately avoids the library's own linear algebra and closed forms:
//! quadrature is adaptive Simpson, linear solves are Gauss elimination with
//! partial pivoting.

#![allow(dead_code)]

/// Adaptive Simpson quadrature on [a, b] to absolute tolerance `tol`.
pub fn adaptive_simpson(f: &dyn Fn(f64) -> f64, a: f64, b: f64, tol: f64) -> f64 {
    fn simpson(fa: f64, fm: f64, fb: f64, a: f64, b: f64) -> f64 {
        (b - a) / 6.0 * (fa + 4.0 * fm + fb)
    }
    fn recurse(
        f: &dyn Fn(f64) -> f64,
        a: f64,
        b: f64,
        fa: f64,
        fm: f64,
        fb: f64,
        whole: f64,
        tol: f64,
        depth: u32,
    ) -> f64 {
        let m = 0.5 * (a + b);
        let lm = 0.5 * (a + m);
        let rm = 0.5 * (m + b);
        let flm = f(lm);
        let frm = f(rm);
        let left = simpson(fa, flm, fm, a, m);
        let right = simpson(fm, frm, fb, m, b);
        let delta = left + right - whole;
        if depth == 0 || delta.abs() <= 15.0 * tol {
            left + right + delta / 15.0
        } else {
            recurse(f, a, m, fa, flm, fm, left, 0.5 * tol, depth - 1)
                + recurse(f, m, b, fm, frm, fb, right, 0.5 * tol, depth - 1)
        }
    }
    let m = 0.5 * (a + b);
    let fa = f(a);
    let fm = f(m);
    let fb = f(b);
    let whole = simpson(fa, fm, fb, a, b);
    recurse(f, a, b, fa, fm, fb, whole, tol, 40)
}

/// Iterated 2-D adaptive Simpson over [ax, bx] x [ay, by].
pub fn adaptive_simpson_2d(
    f: &dyn Fn(f64, f64) -> f64,
    ax: f64,
    bx: f64,
    ay: f64,
    by: f64,
    tol: f64,
) -> f64 {
    adaptive_simpson(
        &|y| adaptive_simpson(&|x| f(x, y), ax, bx, tol * 1e-2),
        ay,
        by,
        tol,
    )
}

fn se(d2: f64, ell: f64) -> f64 {
    (-d2 / (2.0 * ell * ell)).exp()
}

fn gauss_pdf_1d(x: f64, b: f64) -> f64 {
    (-x * x / (2.0 * b * b)).exp() / (b * (2.0 * std::f64::consts::PI).sqrt())
}

/// Intersection of two bump supports [c1 ± r1] and [c2 ± r2], empty -> None.
fn support(c1: f64, r1: f64, c2: f64, r2: f64) -> Option<(f64, f64)> {
    let lo = (c1 - r1).max(c2 - r2);
    let hi = (c1 + r1).min(c2 + r2);
    (lo < hi).then_some((lo, hi))
}

/// Quadrature oracle for the single-blur cross-covariance: the genuine 2-D
/// integral of k_se(|x - u|) times the blur density at u, with x = (d, 0).
/// Integration limits per axis intersect the supports of the two Gaussian
/// factors, so narrow kernels are never missed by the adaptive probing.
/// Requires b > 0.
pub fn conv_blur_quad(d: f64, sigma: f64, ell: f64, b: f64) -> f64 {
    assert!(b > 0.0);
    let rl = 10.0 * ell;
    let rb = 10.0 * b;
    let Some((lo1, hi1)) = support(d, rl, 0.0, rb) else {
        return 0.0;
    };
    let Some((lo2, hi2)) = support(0.0, rl, 0.0, rb) else {
        return 0.0;
    };
    let two_pi_b2 = 2.0 * std::f64::consts::PI * b * b;
    let integrand = |u1: f64, u2: f64| {
        let d2 = (d - u1) * (d - u1) + u2 * u2;
        se(d2, ell) * (-(u1 * u1 + u2 * u2) / (2.0 * b * b)).exp() / two_pi_b2
    };
    sigma * sigma * adaptive_simpson_2d(&integrand, lo1, hi1, lo2, hi2, 1e-12)
}

/// Quadrature oracle for the double-blur covariance
/// ∬∬ κ_b(x_i-u) κ_b(x_j-v) k(u,v) du dv with x_i - x_j = (d, 0).
/// The squared-exponential kernel and the isotropic Gaussian blur factor
/// per axis, so the 4-D integral is the product of two nested 2-D
/// quadratures — one per axis at lags d and 0. The inner integration
/// interval intersects the supports of the blur density (center 0) and the
/// kernel ridge (center v + delta), which keeps narrow kernels resolved.
pub fn conv_double_blur_quad(d: f64, sigma: f64, ell: f64, b: f64) -> f64 {
    assert!(b > 0.0);
    let rl = 10.0 * ell;
    let rb = 10.0 * b;
    let axis_factor = |delta: f64| {
        let outer = |v: f64| {
            match support(0.0, rb, delta + v, rl) {
                Some((lo, hi)) => adaptive_simpson(
                    &|u: f64| gauss_pdf_1d(u, b) * se((delta - u + v) * (delta - u + v), ell),
                    lo,
                    hi,
                    1e-14,
                ),
                None => 0.0,
            }
        };
        adaptive_simpson(&|v: f64| gauss_pdf_1d(v, b) * outer(v), -rb, rb, 1e-12)
    };
    sigma * sigma * axis_factor(d) * axis_factor(0.0)
}

/// Gauss elimination with partial pivoting: returns (inverse, determinant).
/// Panics on singular input; oracle matrices are small and well-conditioned.
pub fn gauss_inverse(a: &[Vec<f64>]) -> (Vec<Vec<f64>>, f64) {
    let n = a.len();
    let mut aug: Vec<Vec<f64>> = a
        .iter()
        .enumerate()
        .map(|(i, row)| {
            assert_eq!(row.len(), n);
            let mut r = row.clone();
            r.extend((0..n).map(|j| if i == j { 1.0 } else { 0.0 }));
            r
        })
        .collect();
    let mut det = 1.0;
    for col in 0..n {
        let pivot_row = (col..n)
            .max_by(|&i, &j| aug[i][col].abs().partial_cmp(&aug[j][col].abs()).unwrap())
            .unwrap();
        if aug[pivot_row][col].abs() < 1e-300 {
            panic!("singular matrix in oracle");
        }
        if pivot_row != col {
            aug.swap(pivot_row, col);
            det = -det;
        }
        let pivot = aug[col][col];
        det *= pivot;
        for j in 0..2 * n {
            aug[col][j] /= pivot;
        }
        for i in 0..n {
            if i != col {
                let factor = aug[i][col];
                if factor != 0.0 {
                    for j in 0..2 * n {
                        aug[i][j] -= factor * aug[col][j];
                    }
                }
            }
        }
    }
    let inv = aug.iter().map(|row| row[n..].to_vec()).collect();
    (inv, det)
}

/// Solves A x = b with Gauss elimination (by way of the explicit inverse).
pub fn gauss_solve(a: &[Vec<f64>], b: &[f64]) -> Vec<f64> {
    let (inv, _) = gauss_inverse(a);
    matvec(&inv, b)
}

pub fn matvec(a: &[Vec<f64>], x: &[f64]) -> Vec<f64> {
    a.iter()
        .map(|row| row.iter().zip(x).map(|(r, v)| r * v).sum())
        .collect()
}

pub fn dot(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| x * y).sum()
}

/// Dense multivariate normal log-density at y for N(0, K), via explicit
/// inverse and determinant.
pub fn mvn_log_density(k: &[Vec<f64>], y: &[f64]) -> f64 {
    let n = y.len();
    let (inv, det) = gauss_inverse(k);
    let quad = dot(y, &matvec(&inv, y));
    -0.5 * (quad + det.ln() + n as f64 * (2.0 * std::f64::consts::PI).ln())
}

/// Textbook GP regression (no change of support): mean and variance at one
/// target given observed coordinates/values, a squared-exponential kernel
/// and i.i.d. observation noise.
pub fn textbook_krige(
    obs_coords: &[(f64, f64)],
    obs_values: &[f64],
    target: (f64, f64),
    sigma: f64,
    ell: f64,
    noise_sd: f64,
) -> (f64, f64) {
    let n = obs_coords.len();
    let s2 = sigma * sigma;
    let kernel = |a: (f64, f64), b: (f64, f64)| {
        let d2 = (a.0 - b.0) * (a.0 - b.0) + (a.1 - b.1) * (a.1 - b.1);
        s2 * se(d2, ell)
    };
    let mut k = vec![vec![0.0; n]; n];
    for i in 0..n {
        for j in 0..n {
            k[i][j] = kernel(obs_coords[i], obs_coords[j]);
        }
        k[i][i] += noise_sd * noise_sd;
    }
    let k_star: Vec<f64> = obs_coords.iter().map(|&c| kernel(c, target)).collect();
    let alpha = gauss_solve(&k, obs_values);
    let mean = dot(&k_star, &alpha);
    let var = s2 - dot(&k_star, &gauss_solve(&k, &k_star));
    (mean, var)
}
