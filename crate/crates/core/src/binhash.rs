//! Iterative quantization (ITQ) hashing.
//!
//! Data are centred, projected on the top-`k` principal directions, and an
//! orthogonal rotation is learned by alternating sign quantization with the
//! orthogonal Procrustes update. A code bit is set when the rotated linear
//! response is strictly positive.

use nalgebra::{DMatrix, DVector, SymmetricEigen};
use rand::seq::index::sample;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, StandardNormal};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// Training rows above this count are uniformly subsampled.
pub const DEFAULT_TRAIN_CAP: usize = 50_000;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum RotationInit {
    #[default]
    Random,
    Identity,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ItqModel {
    pub mean: DVector<f64>,
    /// `d x k`, orthonormal columns.
    pub projection: DMatrix<f64>,
    /// `k x k`, orthogonal.
    pub rotation: DMatrix<f64>,
    pub bits: usize,
    /// Quantization loss after each round, starting with the initial rotation.
    pub loss_history: Vec<f64>,
}

#[derive(Debug, Clone, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub struct BinaryCode(pub Vec<bool>);

impl BinaryCode {
    pub fn len(&self) -> usize {
        self.0.len()
    }

    pub fn is_empty(&self) -> bool {
        self.0.is_empty()
    }

    /// Bit `i` of the code becomes bit `i` of the integer.
    pub fn to_index(&self) -> u64 {
        self.0
            .iter()
            .enumerate()
            .fold(0u64, |acc, (i, &b)| acc | (u64::from(b) << i))
    }

    pub fn from_index(index: u64, bits: usize) -> Self {
        BinaryCode((0..bits).map(|i| (index >> i) & 1 == 1).collect())
    }

    pub fn to_hex(&self) -> String {
        let width = self.len().div_ceil(4).max(1);
        format!("{:0width$x}", self.to_index())
    }
}

/// Record of every rotation visited while fitting, for inspection.
#[derive(Debug, Clone)]
pub struct FitTrace {
    /// Centred data projected on the principal directions (`n x k`).
    pub projected: DMatrix<f64>,
    /// Rotation before the first round, then after each round.
    pub rotations: Vec<DMatrix<f64>>,
}

pub fn fit(data: &DMatrix<f64>, bits: usize, iters: usize, seed: u64) -> Result<ItqModel> {
    fit_with(data, bits, iters, seed, RotationInit::Random).map(|(m, _)| m)
}

pub fn fit_with(
    data: &DMatrix<f64>,
    bits: usize,
    iters: usize,
    seed: u64,
    init: RotationInit,
) -> Result<(ItqModel, FitTrace)> {
    let (n, d) = data.shape();
    if bits == 0 {
        return Err(Error::Config("bits must be positive".into()));
    }
    if bits > 64 {
        return Err(Error::Config("at most 64 bits are supported".into()));
    }
    if d < bits {
        return Err(Error::InvalidInput(format!(
            "{bits} bits requested but data has only {d} dimensions"
        )));
    }
    if n <= bits {
        return Err(Error::InvalidInput(format!(
            "need more than {bits} samples, found {n}"
        )));
    }
    if data.iter().any(|v| !v.is_finite()) {
        return Err(Error::InvalidInput("non-finite feature value".into()));
    }

    let mean = data.row_mean().transpose();
    let mut centred = data.clone();
    for mut row in centred.row_iter_mut() {
        row -= mean.transpose();
    }
    let cov = centred.transpose() * &centred / (n as f64);
    let projection = principal_directions(&cov, bits)?;
    let projected = &centred * &projection;

    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut rotation = match init {
        RotationInit::Identity => DMatrix::identity(bits, bits),
        RotationInit::Random => random_orthogonal(bits, &mut rng),
    };
    let mut rotations = vec![rotation.clone()];
    let mut loss_history = vec![quantization_loss(&projected, &rotation)];
    for _ in 0..iters {
        let codes = sign_matrix(&(&projected * &rotation));
        rotation = procrustes(&codes, &projected)?;
        loss_history.push(quantization_loss(&projected, &rotation));
        rotations.push(rotation.clone());
    }

    Ok((
        ItqModel {
            mean,
            projection,
            rotation,
            bits,
            loss_history,
        },
        FitTrace {
            projected,
            rotations,
        },
    ))
}

/// Fits on at most `cap` rows chosen uniformly with a fixed seed.
pub fn fit_capped(
    data: &DMatrix<f64>,
    bits: usize,
    iters: usize,
    seed: u64,
    cap: usize,
) -> Result<ItqModel> {
    fit_capped_with(data, bits, iters, seed, cap, RotationInit::Random)
}

pub fn fit_capped_with(
    data: &DMatrix<f64>,
    bits: usize,
    iters: usize,
    seed: u64,
    cap: usize,
    init: RotationInit,
) -> Result<ItqModel> {
    if data.nrows() <= cap {
        return fit_with(data, bits, iters, seed, init).map(|(m, _)| m);
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed ^ 0x5eed_cafe);
    let mut idx = sample(&mut rng, data.nrows(), cap).into_vec();
    idx.sort_unstable();
    let sub = data.select_rows(idx.iter());
    fit_with(&sub, bits, iters, seed, init).map(|(m, _)| m)
}

/// `min_B ||B - V R||_F^2` over sign matrices, i.e. with `B = sign(V R)`.
pub fn quantization_loss(projected: &DMatrix<f64>, rotation: &DMatrix<f64>) -> f64 {
    let vr = projected * rotation;
    (&sign_matrix(&vr) - &vr).norm_squared()
}

fn sign_matrix(m: &DMatrix<f64>) -> DMatrix<f64> {
    m.map(|v| if v >= 0.0 { 1.0 } else { -1.0 })
}

/// Rotation maximizing `tr(B^T V R)`: with `B^T V = U S W^T`, `R = W U^T`.
fn procrustes(codes: &DMatrix<f64>, projected: &DMatrix<f64>) -> Result<DMatrix<f64>> {
    let m = codes.transpose() * projected;
    let svd = m.svd(true, true);
    let u = svd
        .u
        .ok_or_else(|| Error::Numeric("SVD did not return U".into()))?;
    let v_t = svd
        .v_t
        .ok_or_else(|| Error::Numeric("SVD did not return V".into()))?;
    Ok(v_t.transpose() * u.transpose())
}

fn random_orthogonal(k: usize, rng: &mut ChaCha8Rng) -> DMatrix<f64> {
    let g = DMatrix::from_fn(k, k, |_, _| StandardNormal.sample(rng));
    let qr = g.qr();
    let (q, r) = (qr.q(), qr.r());
    // fix column signs so the result does not depend on the QR convention
    let mut q = q;
    for j in 0..k {
        if r[(j, j)] < 0.0 {
            q.column_mut(j).neg_mut();
        }
    }
    q
}

/// Top-`k` eigenvectors of a symmetric matrix, descending by eigenvalue, each
/// oriented so its largest-magnitude entry is positive.
fn principal_directions(cov: &DMatrix<f64>, k: usize) -> Result<DMatrix<f64>> {
    let eig = SymmetricEigen::new(cov.clone());
    let mut order: Vec<usize> = (0..eig.eigenvalues.len()).collect();
    order.sort_by(|&a, &b| eig.eigenvalues[b].total_cmp(&eig.eigenvalues[a]));
    let top = eig.eigenvalues[order[0]].max(0.0);
    let tol = top * 1e-10 + f64::MIN_POSITIVE;
    let rank = order.iter().filter(|&&i| eig.eigenvalues[i] > tol).count();
    if rank < k {
        return Err(Error::InvalidInput(format!(
            "data has rank {rank}; at most {rank} bits are achievable (requested {k})"
        )));
    }
    let d = cov.nrows();
    let mut p = DMatrix::zeros(d, k);
    for (j, &i) in order.iter().take(k).enumerate() {
        let mut col = eig.eigenvectors.column(i).into_owned();
        let lead = col
            .iter()
            .copied()
            .enumerate()
            .fold((0, 0.0f64), |best, (r, v)| {
                if v.abs() > best.1.abs() + 1e-12 {
                    (r, v)
                } else {
                    best
                }
            });
        if lead.1 < 0.0 {
            col.neg_mut();
        }
        p.set_column(j, &col);
    }
    Ok(p)
}

impl ItqModel {
    pub fn dim(&self) -> usize {
        self.mean.len()
    }

    /// Rotated linear responses `R^T P^T (x - mean)`.
    pub fn responses(&self, x: &[f64]) -> Result<DVector<f64>> {
        if x.len() != self.dim() {
            return Err(Error::DimensionMismatch {
                expected: self.dim(),
                found: x.len(),
            });
        }
        let centred = DVector::from_column_slice(x) - &self.mean;
        Ok(self.rotation.transpose() * (self.projection.transpose() * centred))
    }

    pub fn encode(&self, x: &[f64]) -> Result<BinaryCode> {
        Ok(BinaryCode(
            self.responses(x)?.iter().map(|&r| r > 0.0).collect(),
        ))
    }

    pub fn prototypes(&self) -> u64 {
        1u64 << self.bits
    }

    /// Largest deviation of `R^T R` and `P^T P` from the identity.
    pub fn orthogonality_error(&self) -> f64 {
        let k = self.bits;
        let eye = DMatrix::<f64>::identity(k, k);
        let r = (self.rotation.transpose() * &self.rotation - &eye).amax();
        let p = (self.projection.transpose() * &self.projection - &eye).amax();
        r.max(p)
    }
}
