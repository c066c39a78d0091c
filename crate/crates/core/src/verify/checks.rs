use rand::{Rng, RngExt, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, StandardNormal};

use super::CheckResult;
use crate::calibration::pbr_permutation;
use crate::error::{OscarError, Result};
use crate::linalg::{
    dot, hadamard_matrix, masked_softmax_rows, random_orthogonal, random_orthonormal, sym_eig, Permutation,
    RealMatrix,
};
use crate::quant::{fake_quantize_rows, residual_covariance, weighted_residual, QuantConfig};

/// Largest dimension the permutation oracle will enumerate (`7! = 5040`).
pub const MAX_ENUMERATION_DIM: usize = 7;

fn gaussian<R: Rng + ?Sized>(rows: usize, cols: usize, rng: &mut R) -> RealMatrix {
    RealMatrix::from_fn(rows, cols, |_, _| StandardNormal.sample(rng))
}

fn rel_gap(a: f64, b: f64) -> f64 {
    let scale = a.abs().max(b.abs());
    if scale == 0.0 {
        0.0
    } else {
        (a - b).abs() / scale
    }
}

/// `tr(A·B·Aᵀ)` for `A: n×d`, `B: d×d`, row by row.
fn sandwich_trace(a: &RealMatrix, b: &RealMatrix) -> f64 {
    a.row_iter().map(|r| dot(&b.vec_mul(r).expect("d×d"), r)).sum()
}

/// Logit and output trace identities on random instances with `T, d ≤ max_dim`.
pub fn check_trace_identities(trials: usize, max_dim: usize, seed: u64) -> Result<CheckResult> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut worst = 0.0_f64;
    for _ in 0..trials {
        let t = rng.random_range(1..=max_dim);
        let d = rng.random_range(1..=max_dim);
        let q = gaussian(t, d, &mut rng);
        let k = gaussian(t, d, &mut rng);
        let k_hat = k.add(&gaussian(t, d, &mut rng).scale(0.1))?;
        let lhs = q.matmul_t(&k)?.sub(&q.matmul_t(&k_hat)?)?.frobenius_norm_sq();
        let rhs = sandwich_trace(&k.sub(&k_hat)?, &q.gram());
        worst = worst.max(rel_gap(lhs, rhs));

        let s = masked_softmax_rows(&gaussian(t, t, &mut rng).scale(2.0), true)?;
        let v = gaussian(t, d, &mut rng);
        let v_hat = v.add(&gaussian(t, d, &mut rng).scale(0.1))?;
        let lhs = s.matmul(&v)?.sub(&s.matmul(&v_hat)?)?.frobenius_norm_sq();
        // tr(ΔVᵀ SᵀS ΔV) = Σ over columns of ΔV.
        let rhs = sandwich_trace(&v.sub(&v_hat)?.transpose(), &s.gram());
        worst = worst.max(rel_gap(lhs, rhs));
    }
    Ok(CheckResult::new("trace-identities", worst, 1e-8, trials, seed))
}

/// `tr(ΠᵀΛΠE) = Σ_i λ_{π(i)} e_i` for diagonal `Λ`, `E`.
pub fn pairing_trace(lambda: &[f64], e: &[f64], perm: &[usize]) -> f64 {
    perm.iter().zip(e).map(|(&p, &ei)| lambda[p] * ei).sum()
}

/// `tr(ZᵀΛZE)` for diagonal `Λ`, `E`.
fn rotated_pairing_trace(lambda: &[f64], e: &[f64], z: &RealMatrix) -> f64 {
    let mut total = 0.0;
    for (i, &l) in lambda.iter().enumerate() {
        for (j, &ej) in e.iter().enumerate() {
            total += l * z[(i, j)].powi(2) * ej;
        }
    }
    total
}

/// Calls `f` on every permutation of `0..n` (Heap's algorithm).
fn for_each_permutation(n: usize, mut f: impl FnMut(&[usize])) {
    let mut a: Vec<usize> = (0..n).collect();
    let mut c = vec![0; n];
    f(&a);
    let mut i = 0;
    while i < n {
        if c[i] < i {
            if i % 2 == 0 {
                a.swap(0, i);
            } else {
                a.swap(c[i], i);
            }
            f(&a);
            c[i] += 1;
            i = 0;
        } else {
            c[i] = 0;
            i += 1;
        }
    }
}

/// Descending `Λ` paired with ascending `E` minimizes `tr(ZᵀΛZE)` over permutations and
/// orthogonal `Z`.
///
/// `measured` is the largest amount by which any candidate beat the identity pairing.
pub fn check_rearrangement_optimality(d: usize, pairs: usize, samples: usize, seed: u64) -> Result<CheckResult> {
    if d == 0 || d > MAX_ENUMERATION_DIM {
        return Err(OscarError::input(format!(
            "permutation enumeration needs 1 ≤ d ≤ {MAX_ENUMERATION_DIM}, got {d}"
        )));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut worst_beat = f64::NEG_INFINITY;
    let mut non_minimal = 0usize;
    let mut permutations = 0usize;
    for _ in 0..pairs {
        let mut lambda: Vec<f64> = (0..d).map(|_| rng.random_range(0.0..10.0)).collect();
        let mut e: Vec<f64> = (0..d).map(|_| rng.random_range(0.0..10.0)).collect();
        lambda.sort_by(|a, b| b.total_cmp(a));
        e.sort_by(|a, b| a.total_cmp(b));
        let identity: Vec<usize> = (0..d).collect();
        let base = pairing_trace(&lambda, &e, &identity);
        let mut best = f64::INFINITY;
        for_each_permutation(d, |p| {
            best = best.min(pairing_trace(&lambda, &e, p));
            permutations += 1;
        });
        if best < base - 1e-12 * base.abs() {
            non_minimal += 1;
        }
        worst_beat = worst_beat.max(base - best);
        for _ in 0..samples {
            let z = random_orthogonal(d, &mut rng);
            worst_beat = worst_beat.max(base - rotated_pairing_trace(&lambda, &e, &z));
        }
    }
    let measured = if non_minimal > 0 { f64::INFINITY } else { worst_beat.max(0.0) };
    Ok(CheckResult::new(&format!("rearrangement-optimality-d{d}"), measured, 1e-9, pairs, seed)
        .with("permutations_enumerated", permutations as f64)
        .with("non_minimal_identity", non_minimal as f64)
        .with("orthogonal_samples", (pairs * samples) as f64))
}

/// Every diagonal entry of `(HP)ᵀΛ(HP)` equals `tr(Λ)/d`.
pub fn check_hadamard_equalization(dims: &[usize], trials: usize, seed: u64) -> Result<CheckResult> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut worst = 0.0_f64;
    let mut heavy_ratio = 0.0_f64;
    let mut count = 0;
    for &d in dims {
        let h = hadamard_matrix(d)?;
        for trial in 0..trials.max(1) {
            let lambda: Vec<f64> = if trial % 2 == 0 {
                (0..d).map(|_| rng.random_range(0.0..1.0)).collect()
            } else {
                // Power law with a dominant head, like a real query spectrum.
                (0..d).map(|j| ((j + 1) as f64).powf(-1.3)).collect()
            };
            let mut map: Vec<usize> = (0..d).collect();
            for i in (1..d).rev() {
                map.swap(i, rng.random_range(0..=i));
            }
            let hp = crate::linalg::apply_permutation_columns(&h, &Permutation::from_map(map)?)?;
            let conj = hp.t_matmul(&RealMatrix::from_diagonal(&lambda).matmul(&hp)?)?;
            let target = lambda.iter().sum::<f64>() / d as f64;
            for v in conj.diagonal() {
                worst = worst.max((v - target).abs() / target);
            }
            if trial % 2 == 1 {
                heavy_ratio = heavy_ratio.max(lambda[0] / target);
            }
            count += 1;
        }
    }
    Ok(CheckResult::new("hadamard-equalization", worst, 1e-9, count, seed).with("heavy_tail_peak_ratio", heavy_ratio))
}

/// `tr(UᵀAU) ≤ Σ_{k≤r} λ_k` for orthonormal `U: d×r`, with equality at the top-r eigenvectors.
pub fn check_pca_bound(d: usize, ranks: &[usize], samples: usize, seed: u64) -> Result<CheckResult> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut worst = f64::NEG_INFINITY;
    let mut trials = 0;
    for &r in ranks {
        if r == 0 || r > d {
            return Err(OscarError::input(format!("rank {r} outside 1..={d}")));
        }
        for _ in 0..samples {
            let b = gaussian(d, d, &mut rng);
            let a = b.matmul_t(&b)?;
            let eig = sym_eig(&a)?;
            let bound: f64 = eig.values()[..r].iter().sum();
            let scale = a.trace().max(f64::MIN_POSITIVE);
            let u = random_orthonormal(d, r, &mut rng);
            let val = u.t_matmul(&a.matmul(&u)?)?.trace();
            worst = worst.max((val - bound) / scale);
            let top = RealMatrix::from_fn(d, r, |i, j| eig.vectors()[(i, j)]);
            let attained = top.t_matmul(&a.matmul(&top)?)?.trace();
            worst = worst.max((attained - bound).abs() / scale);
            trials += 1;
        }
    }
    Ok(CheckResult::new("pca-bound", worst.max(0.0), 1e-9, trials, seed))
}

/// Exact and surrogate key distortions for one rotated, quantized fixture.
#[derive(Debug, Clone, PartialEq)]
pub struct SurrogateMeasurement {
    /// `Σ_i Σ_{j≤i} [q_i·(k_j − k̂_j)]²` by direct double loop.
    pub exact_causal: f64,
    /// `Σ_i Σ_j [q_i·(k_j − k̂_j)]²`.
    pub exact_full: f64,
    /// `tr(RᵀC_Q R·E_K)` with `C_Q = QᵀQ/N`, from the elementwise product with `E_K`.
    pub surrogate: f64,
    /// The same trace as `Σ_j e_j·RᵀC_Q R·e_jᵀ`.
    pub surrogate_by_rows: f64,
    /// Surrogate with `E_K` replaced by its diagonal.
    pub surrogate_diagonal: f64,
    pub queries: usize,
}

pub fn measure_surrogate(
    q: &RealMatrix,
    k: &RealMatrix,
    rotation: &RealMatrix,
    config: &QuantConfig,
) -> Result<SurrogateMeasurement> {
    let kr = k.matmul(rotation)?;
    let kr_hat = fake_quantize_rows(&kr, config)?;
    let k_hat = kr_hat.matmul_t(rotation)?;
    let dk = k.sub(&k_hat)?;
    let (mut exact_causal, mut exact_full) = (0.0, 0.0);
    for i in 0..q.rows() {
        for j in 0..dk.rows() {
            let term = dot(q.row(i), dk.row(j)).powi(2);
            exact_full += term;
            if j <= i {
                exact_causal += term;
            }
        }
    }
    let n = q.rows();
    let c_q = q.gram().scale(1.0 / n as f64);
    let mut m = rotation.t_matmul(&c_q.matmul(rotation)?)?;
    m.symmetrize();
    let e = residual_covariance(&kr, &kr_hat)?;
    let diag_e = RealMatrix::from_diagonal(&e.matrix.diagonal());
    let surrogate_diagonal = m.as_slice().iter().zip(diag_e.as_slice()).map(|(a, b)| a * b).sum();
    Ok(SurrogateMeasurement {
        exact_causal,
        exact_full,
        surrogate: e.weighted_trace(&m)?,
        surrogate_by_rows: weighted_residual(&kr, &kr_hat, &m)?,
        surrogate_diagonal,
        queries: n,
    })
}

/// Surrogate bookkeeping on random fixtures of the given token counts.
///
/// Asserts that the trace agrees with the row-wise sum and that the non-causal exact
/// distortion equals `N·surrogate`; the causal gap and the diagonal-`E` value are reported.
pub fn check_surrogate_consistency(token_counts: &[usize], d: usize, seed: u64) -> Result<CheckResult> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let config = QuantConfig::int2((d / 2).max(1));
    let mut worst = 0.0_f64;
    let (mut causal_ratio, mut diag_ratio) = (0.0_f64, 0.0_f64);
    for &t in token_counts {
        let q = gaussian(t, d, &mut rng);
        let mut k = gaussian(t, d, &mut rng);
        for i in 0..t {
            k[(i, 0)] *= 8.0;
        }
        let r = random_orthogonal(d, &mut rng);
        let m = measure_surrogate(&q, &k, &r, &config)?;
        worst = worst.max(rel_gap(m.surrogate, m.surrogate_by_rows));
        worst = worst.max(rel_gap(m.exact_full, m.queries as f64 * m.surrogate));
        if m.surrogate > 0.0 {
            causal_ratio = causal_ratio.max(m.exact_causal / (m.queries as f64 * m.surrogate));
            diag_ratio = diag_ratio.max(m.surrogate_diagonal / m.surrogate);
        }
    }
    Ok(CheckResult::new("surrogate-consistency", worst, 1e-9, token_counts.len(), seed)
        .with("max_causal_over_full", causal_ratio)
        .with("max_diagonal_e_over_full_e", diag_ratio))
}

/// For every power-of-two `d ≤ max_d` and power-of-two `G | d`, the top `d/G` ranks
/// land in distinct groups.
///
/// Uses shuffled eigenvalues so that the descending argsort is exercised too.
pub fn check_pbr_balance(max_d: usize) -> Result<CheckResult> {
    let mut rng = ChaCha8Rng::seed_from_u64(max_d as u64);
    let mut violations = 0usize;
    let mut cases = 0usize;
    let mut d = 1;
    while d <= max_d {
        let mut lambda: Vec<f64> = (0..d).map(|i| (d - i) as f64).collect();
        for i in (1..d).rev() {
            lambda.swap(i, rng.random_range(0..=i));
        }
        let mut sigma: Vec<usize> = (0..d).collect();
        sigma.sort_by(|&a, &b| lambda[b].total_cmp(&lambda[a]));
        let p = pbr_permutation(&lambda, d)?;
        // position_of[src] = output column holding source coordinate src.
        let mut position_of = vec![0; d];
        for (col, &src) in p.as_slice().iter().enumerate() {
            position_of[src] = col;
        }
        let mut g = 1;
        while g <= d {
            let n = d / g;
            let mut seen = vec![false; n];
            for &src in &sigma[..n] {
                let group = position_of[src] / g;
                if std::mem::replace(&mut seen[group], true) {
                    violations += 1;
                }
            }
            cases += 1;
            g *= 2;
        }
        d *= 2;
    }
    Ok(CheckResult::new("pbr-balance", violations as f64, 0.0, cases, max_d as u64))
}

/// `Σ_{k<r} |u_k^A · u_k^B| / r` over the top-r eigenvectors of two targets.
pub fn eigenbasis_alignment(a: &RealMatrix, b: &RealMatrix, r: usize) -> Result<f64> {
    if a.shape() != b.shape() {
        return Err(OscarError::shape("alignment targets differ in size"));
    }
    if r == 0 || r > a.rows() {
        return Err(OscarError::input(format!("rank {r} outside 1..={}", a.rows())));
    }
    let ea = sym_eig(a)?;
    let eb = sym_eig(b)?;
    let total: f64 = (0..r)
        .map(|k| dot(&ea.vectors().column(k), &eb.vectors().column(k)).abs())
        .sum();
    Ok(total / r as f64)
}

/// Mean top-r alignment of independent Wishart pairs; should sit near `1/√d`.
pub fn check_alignment_diagnostic(d: usize, r: usize, pairs: usize, seed: u64) -> Result<CheckResult> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut total = 0.0;
    for _ in 0..pairs {
        let ga = gaussian(d, d, &mut rng);
        let gb = gaussian(d, d, &mut rng);
        total += eigenbasis_alignment(&ga.gram(), &gb.gram(), r)?;
    }
    let mean = total / pairs.max(1) as f64;
    Ok(CheckResult::new("alignment-diagnostic", (mean - 0.09).abs(), 0.03, pairs, seed)
        .with("mean_alignment", mean)
        .with("inverse_sqrt_d", 1.0 / (d as f64).sqrt()))
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn two_by_two_pairing_by_hand() {
        let lambda = [3.0, 1.0];
        let e = [1.0, 2.0];
        assert_eq!(pairing_trace(&lambda, &e, &[0, 1]), 5.0);
        assert_eq!(pairing_trace(&lambda, &e, &[1, 0]), 7.0);
    }

    #[test]
    fn heap_enumerates_every_permutation_once() {
        let mut seen = std::collections::HashSet::new();
        for_each_permutation(5, |p| {
            assert!(seen.insert(p.to_vec()));
        });
        assert_eq!(seen.len(), 120);
    }

    #[test]
    fn isotropic_lambda_is_degenerate() {
        let lambda = [2.0; 4];
        let e = [1.0, 2.0, 3.0, 4.0];
        let base = pairing_trace(&lambda, &e, &[0, 1, 2, 3]);
        for_each_permutation(4, |p| assert_eq!(pairing_trace(&lambda, &e, p), base));
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let z = random_orthogonal(4, &mut rng);
        assert!((rotated_pairing_trace(&lambda, &e, &z) - base).abs() < 1e-12);
    }

    #[test]
    fn rearrangement_refuses_large_d() {
        assert!(check_rearrangement_optimality(8, 1, 1, 0).is_err());
        assert!(check_rearrangement_optimality(4, 20, 50, 1).unwrap().passed);
    }

    #[test]
    fn hadamard_two_by_two_by_hand() {
        let h = hadamard_matrix(2).unwrap();
        let m = h.t_matmul(&RealMatrix::from_diagonal(&[3.0, 1.0]).matmul(&h).unwrap()).unwrap();
        let want = RealMatrix::from_rows(&[[2.0, 1.0], [1.0, 2.0]]).unwrap();
        assert!(m.max_abs_diff(&want) < 1e-15);
    }

    #[test]
    fn pca_diag_example() {
        let a = RealMatrix::from_diagonal(&[2.0, 1.0, 0.0]);
        let e1 = RealMatrix::from_rows(&[[1.0], [0.0], [0.0]]).unwrap();
        assert_eq!(e1.t_matmul(&a.matmul(&e1).unwrap()).unwrap().trace(), 2.0);
        assert!(check_pca_bound(4, &[4], 20, 5).unwrap().passed);
    }

    #[test]
    fn surrogate_single_token_is_exact() {
        let q = RealMatrix::from_rows(&[[0.3, -1.2, 0.7, 2.0]]).unwrap();
        let k = RealMatrix::from_rows(&[[1.1, 0.2, -3.0, 0.4]]).unwrap();
        let m = measure_surrogate(&q, &k, &hadamard_matrix(4).unwrap(), &QuantConfig::int2(4)).unwrap();
        assert!(m.exact_causal > 1e-6);
        assert!(rel_gap(m.exact_causal, m.surrogate) < 1e-12, "{m:?}");
        assert_eq!(m.exact_causal, m.exact_full);
    }

    #[test]
    fn surrogate_zero_residual() {
        let q = RealMatrix::from_rows(&[[1.0, 2.0, 3.0, 4.0], [0.5, 0.5, 0.5, 0.5]]).unwrap();
        let k = RealMatrix::from_rows(&[[0.0, 1.0, 2.0, 3.0], [3.0, 2.0, 1.0, 0.0]]).unwrap();
        let m = measure_surrogate(&q, &k, &RealMatrix::identity(4), &QuantConfig::int2(4)).unwrap();
        assert_eq!((m.exact_causal, m.exact_full, m.surrogate), (0.0, 0.0, 0.0));
    }

    #[test]
    fn alignment_extremes() {
        let a = RealMatrix::from_diagonal(&[3.0, 2.0, 1.0]);
        assert!((eigenbasis_alignment(&a, &a, 3).unwrap() - 1.0).abs() < 1e-12);
        let b = RealMatrix::from_diagonal(&[1.0, 3.0, 2.0]);
        assert_eq!(eigenbasis_alignment(&a, &b, 1).unwrap(), 0.0);
    }

    #[test]
    fn pbr_balance_small() {
        assert_eq!(check_pbr_balance(16).unwrap().measured, 0.0);
    }
}
