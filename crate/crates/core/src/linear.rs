//! Closed-form linear autoencoder theory: optimal low-rank autoencoders from
//! a truncated SVD of the second-moment factor, optimal latent-space maps,
//! and the computable reconstruction-error bound for all-linear models.

use crate::error::{Error, Result};
use crate::linalg::{min_singular_value, solve_spd, spectral_norm, svd, sym_eig};
use crate::paired::PairedModel;
use crate::tensor::Tensor;

/// Uncentered second moment `Gamma = (1/N) sum x x^T + tau I` together with
/// a symmetric factor `L` satisfying `L L^T = Gamma`.
#[derive(Debug, Clone)]
pub struct SecondMoment {
    pub gamma: Tensor,
    pub factor: Tensor,
    pub ridge: f64,
}

impl SecondMoment {
    pub fn dim(&self) -> usize {
        self.gamma.rows()
    }

    /// Builds a second moment from an explicit SPD matrix.
    pub fn from_gamma(gamma: Tensor, ridge: f64) -> Result<SecondMoment> {
        if ridge < 0.0 {
            return Err(Error::InvalidArgument("ridge must be nonnegative".into()));
        }
        let n = gamma.rows();
        assert_eq!(n, gamma.cols(), "second moment must be square");
        let sym_defect = gamma.sub(&gamma.transpose()).max_abs();
        if sym_defect > 1e-10 * gamma.max_abs().max(1.0) {
            return Err(Error::InvalidArgument(format!(
                "second moment is not symmetric (defect {sym_defect:.3e})"
            )));
        }
        let mut g = gamma;
        for i in 0..n {
            let v = g.at(i, i) + ridge;
            g.set(i, i, v);
        }
        let (vecs, vals) = sym_eig(&g)?;
        // PSD up to rounding: clamp tiny negative eigenvalues before sqrt.
        let sqrt_vals: Vec<f64> = vals.data().iter().map(|&l| l.max(0.0).sqrt()).collect();
        let factor = vecs
            .matmul(&Tensor::diag(&sqrt_vals))
            .matmul(&vecs.transpose());
        Ok(SecondMoment {
            gamma: g,
            factor,
            ridge,
        })
    }
}

/// `gamma = (1/N) sum_i x_i x_i^T + tau I`, factored by symmetric
/// eigendecomposition (`L = V sqrt(Lambda) V^T`).
pub fn second_moment_factor(samples: &Tensor, ridge: f64) -> Result<SecondMoment> {
    let n = samples.cols();
    let count = samples.rows();
    if count == 0 {
        return Err(Error::TooFewSamples { needed: 1, got: 0 });
    }
    let gamma = samples
        .transpose()
        .matmul(samples)
        .scale(1.0 / count as f64);
    let _ = n;
    SecondMoment::from_gamma(gamma, ridge)
}

/// Default ridge used to meet the SPD hypothesis on degenerate sample sets.
pub fn default_ridge(gamma_trace: f64, n: usize) -> f64 {
    1e-10 * gamma_trace / n.max(1) as f64
}

/// Explicit-matrix encoder/decoder pair `E: r x n`, `D: n x r`.
#[derive(Debug, Clone)]
pub struct LinearAe {
    pub encoder: Tensor,
    pub decoder: Tensor,
    pub rank: usize,
}

impl LinearAe {
    pub fn input_dim(&self) -> usize {
        self.encoder.cols()
    }
}

/// Rank-`r` autoencoder minimizing `||A L - L||_F^2` over `rank(A) <= r`:
/// `E = U_r^T`, `D = U_r` from the SVD of the factor, so `A = U_r U_r^T`
/// with `||A||_F = sqrt(r)`.
pub fn fit_linear_ae(sm: &SecondMoment, rank: usize) -> Result<LinearAe> {
    let n = sm.dim();
    if rank == 0 || rank > n {
        return Err(Error::InvalidArgument(format!(
            "rank {rank} outside [1, {n}]"
        )));
    }
    let (u, _, _) = svd(&sm.factor)?;
    let mut encoder = Tensor::zeros(&[rank, n]);
    let mut decoder = Tensor::zeros(&[n, rank]);
    for k in 0..rank {
        for i in 0..n {
            encoder.set(k, i, u.at(i, k));
            decoder.set(i, k, u.at(i, k));
        }
    }
    Ok(LinearAe {
        encoder,
        decoder,
        rank,
    })
}

/// Optimal latent maps between a pair of linear autoencoders.
#[derive(Debug, Clone)]
pub struct LinearMaps {
    pub forward: Tensor,
    pub inverse: Tensor,
}

/// Optimal linear forward latent map
/// `M = E_y F Gamma_x E_x^T (E_x Gamma_x E_x^T)^{-1}`.
///
/// Requires `E_x` to have full row rank; checked through the smallest
/// singular value of the Gram matrix.
pub fn optimal_forward_map(
    e_x: &Tensor,
    e_y: &Tensor,
    f: &Tensor,
    sm_x: &SecondMoment,
) -> Result<Tensor> {
    let gram = e_x.matmul(&sm_x.gamma).matmul(&e_x.transpose());
    let smallest = min_singular_value(&gram)?;
    if smallest <= 1e-12 {
        return Err(Error::RankDeficient(format!(
            "E_x Gamma_x E_x^T has smallest singular value {smallest:.3e}"
        )));
    }
    let b = e_y
        .matmul(f)
        .matmul(&sm_x.gamma)
        .matmul(&e_x.transpose());
    // M = B G^{-1}  <=>  G M^T = B^T (G symmetric).
    Ok(solve_spd(&gram, &b.transpose())?.transpose())
}

/// Optimal linear inverse latent map
/// `M+ = E_x Gamma_x F^T E_y^T (E_y Gamma_y E_y^T)^{-1}` with
/// `Gamma_y = F Gamma_x F^T + Gamma_eps`.
pub fn optimal_inverse_map(
    e_x: &Tensor,
    e_y: &Tensor,
    f: &Tensor,
    sm_x: &SecondMoment,
    gamma_eps: &Tensor,
) -> Result<Tensor> {
    let gamma_y = f
        .matmul(&sm_x.gamma)
        .matmul(&f.transpose())
        .add(gamma_eps);
    let gram = e_y.matmul(&gamma_y).matmul(&e_y.transpose());
    let smallest = min_singular_value(&gram)?;
    if smallest <= 1e-12 {
        return Err(Error::RankDeficient(format!(
            "E_y Gamma_y E_y^T has smallest singular value {smallest:.3e}"
        )));
    }
    let b = e_x
        .matmul(&sm_x.gamma)
        .matmul(&f.transpose())
        .matmul(&e_y.transpose());
    Ok(solve_spd(&gram, &b.transpose())?.transpose())
}

/// Least-squares latent maps fitted from encoded sample pairs, for use when
/// no explicit forward operator is available: minimizes
/// `sum_i ||M z_x_i - z_y_i||^2` (and the mirrored problem for the inverse
/// map), with a small ridge on the Gram matrices.
pub fn fit_latent_maps_lstsq(z_x: &Tensor, z_y: &Tensor, ridge: f64) -> Result<LinearMaps> {
    if z_x.rows() != z_y.rows() {
        return Err(Error::shape(
            format!("{} latent pairs", z_x.rows()),
            format!("{}", z_y.rows()),
        ));
    }
    let solve_dir = |a: &Tensor, b: &Tensor| -> Result<Tensor> {
        // min_M ||M a_i - b_i||^2  =>  M (A^T A) = B^T A.
        let mut gram = a.transpose().matmul(a);
        let n = gram.rows();
        for i in 0..n {
            let v = gram.at(i, i) + ridge;
            gram.set(i, i, v);
        }
        let rhs = b.transpose().matmul(a);
        Ok(solve_spd(&gram, &rhs.transpose())?.transpose())
    };
    Ok(LinearMaps {
        forward: solve_dir(z_x, z_y)?,
        inverse: solve_dir(z_y, z_x)?,
    })
}

/// Components of the computable error bound for all-linear paired models:
/// `bound = L_x (||M+|| (L_y delta + xi_y) + xi_M) + xi_x`.
///
/// The Lipschitz constants are spectral norms; the xi terms are empirical
/// maxima over the dataset's encodings (the underlying theorem quantifies
/// over all latents, so these are reported surrogates).
#[derive(Debug, Clone)]
pub struct ErrorBoundReport {
    pub lip_dx: f64,
    pub lip_ey: f64,
    pub xi_y: f64,
    pub xi_m: f64,
    pub xi_x: f64,
    pub norm_m_dagger: f64,
    pub delta: f64,
    pub bound: f64,
}

impl ErrorBoundReport {
    pub fn assemble(&self) -> f64 {
        self.lip_dx * (self.norm_m_dagger * (self.lip_ey * self.delta + self.xi_y) + self.xi_m)
            + self.xi_x
    }
}

/// Evaluates the error bound for an all-linear paired model over a dataset
/// of `(x, y)` rows. `xi_y` is maximized over both encountered latent
/// families (`e_y(y_i)` and `M e_x(x_i)`) so the bound provably dominates
/// every per-sample error once `delta` covers the surrogate forward misfit.
pub fn linear_error_bound(
    model: &PairedModel,
    xs: &Tensor,
    ys: &Tensor,
    delta: f64,
) -> Result<ErrorBoundReport> {
    if xs.rows() == 0 {
        return Err(Error::TooFewSamples {
            needed: 1,
            got: 0,
        });
    }
    if xs.rows() != ys.rows() {
        return Err(Error::shape(
            format!("{} paired rows", xs.rows()),
            format!("{}", ys.rows()),
        ));
    }
    let d_x = model.decoder_x_matrix().ok_or_else(|| {
        Error::InvalidArgument("linear_error_bound requires a linear x-decoder".into())
    })?;
    let e_y = model.encoder_y_matrix().ok_or_else(|| {
        Error::InvalidArgument("linear_error_bound requires a linear y-encoder".into())
    })?;
    let m_dagger = model.map_inv_matrix().ok_or_else(|| {
        Error::InvalidArgument("linear_error_bound requires a linear inverse map".into())
    })?;

    let lip_dx = spectral_norm(&d_x)?;
    let lip_ey = spectral_norm(&e_y)?;
    let norm_m_dagger = spectral_norm(&m_dagger)?;

    let z_x = model.encode_x(xs)?;
    let z_y = model.encode_y(ys)?;
    let z_y_mapped = model.latent_forward(&z_x)?;

    let mut xi_y = 0.0_f64;
    for z in [&z_y, &z_y_mapped] {
        let roundtrip = model.encode_y(&model.decode_y(z)?)?;
        for i in 0..z.rows() {
            let diff: f64 = roundtrip
                .row(i)
                .iter()
                .zip(z.row(i))
                .map(|(a, b)| (a - b) * (a - b))
                .sum();
            xi_y = xi_y.max(diff.sqrt());
        }
    }

    let mut xi_m = 0.0_f64;
    let z_back = model.latent_inverse(&model.latent_forward(&z_x)?)?;
    for i in 0..z_x.rows() {
        let diff: f64 = z_back
            .row(i)
            .iter()
            .zip(z_x.row(i))
            .map(|(a, b)| (a - b) * (a - b))
            .sum();
        xi_m = xi_m.max(diff.sqrt());
    }

    let mut xi_x = 0.0_f64;
    let x_roundtrip = model.decode_x(&z_x)?;
    for i in 0..xs.rows() {
        let diff: f64 = x_roundtrip
            .row(i)
            .iter()
            .zip(xs.row(i))
            .map(|(a, b)| (a - b) * (a - b))
            .sum();
        xi_x = xi_x.max(diff.sqrt());
    }

    let mut report = ErrorBoundReport {
        lip_dx,
        lip_ey,
        xi_y,
        xi_m,
        xi_x,
        norm_m_dagger,
        delta,
        bound: 0.0,
    };
    report.bound = report.assemble();
    Ok(report)
}
