//! Dense vectors, symmetric matrices and replayable random streams.
//!
//! Everything here is deliberately small: the simulator never needs more than
//! matrix-vector products and the largest-magnitude eigenvalue.

use std::ops::{Index, IndexMut};

use rand::Rng;
use rand_chacha::rand_core::{RngCore, SeedableRng};
use rand_chacha::ChaCha12Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// Symmetry tolerance applied when a [`SymMatrix`] is constructed.
pub const SYMMETRY_TOL: f64 = 1e-10;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(transparent)]
pub struct ModelVector(Vec<f64>);

impl ModelVector {
    pub fn zeros(d: usize) -> Self {
        ModelVector(vec![0.0; d])
    }

    pub fn from_vec(v: Vec<f64>) -> Self {
        ModelVector(v)
    }

    pub fn dim(&self) -> usize {
        self.0.len()
    }

    pub fn as_slice(&self) -> &[f64] {
        &self.0
    }

    pub fn as_mut_slice(&mut self) -> &mut [f64] {
        &mut self.0
    }

    pub fn into_vec(self) -> Vec<f64> {
        self.0
    }

    pub fn iter(&self) -> std::slice::Iter<'_, f64> {
        self.0.iter()
    }

    pub fn is_finite(&self) -> bool {
        self.0.iter().all(|v| v.is_finite())
    }

    pub fn dot(&self, other: &ModelVector) -> f64 {
        debug_assert_eq!(self.dim(), other.dim());
        self.0.iter().zip(&other.0).map(|(a, b)| a * b).sum()
    }

    pub fn norm_sq(&self) -> f64 {
        self.dot(self)
    }

    pub fn norm(&self) -> f64 {
        self.norm_sq().sqrt()
    }

    pub fn dist_sq(&self, other: &ModelVector) -> f64 {
        debug_assert_eq!(self.dim(), other.dim());
        self.0
            .iter()
            .zip(&other.0)
            .map(|(a, b)| (a - b) * (a - b))
            .sum()
    }

    /// `self - other`.
    pub fn sub(&self, other: &ModelVector) -> ModelVector {
        debug_assert_eq!(self.dim(), other.dim());
        ModelVector(self.0.iter().zip(&other.0).map(|(a, b)| a - b).collect())
    }

    pub fn add(&self, other: &ModelVector) -> ModelVector {
        debug_assert_eq!(self.dim(), other.dim());
        ModelVector(self.0.iter().zip(&other.0).map(|(a, b)| a + b).collect())
    }

    pub fn scale(&self, c: f64) -> ModelVector {
        ModelVector(self.0.iter().map(|a| c * a).collect())
    }

    /// `self -= c * other`, the update shape shared by every descent step.
    pub fn sub_scaled(&mut self, c: f64, other: &ModelVector) {
        debug_assert_eq!(self.dim(), other.dim());
        for (a, b) in self.0.iter_mut().zip(&other.0) {
            *a -= c * b;
        }
    }

    pub fn add_assign(&mut self, other: &ModelVector) {
        debug_assert_eq!(self.dim(), other.dim());
        for (a, b) in self.0.iter_mut().zip(&other.0) {
            *a += b;
        }
    }

    fn check_dim(&self, d: usize) -> Result<()> {
        if self.dim() != d {
            return Err(Error::DimensionMismatch {
                expected: d,
                got: self.dim(),
            });
        }
        Ok(())
    }
}

impl Index<usize> for ModelVector {
    type Output = f64;
    fn index(&self, i: usize) -> &f64 {
        &self.0[i]
    }
}

impl IndexMut<usize> for ModelVector {
    fn index_mut(&mut self, i: usize) -> &mut f64 {
        &mut self.0[i]
    }
}

/// Dense symmetric matrix, stored row-major.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(try_from = "SymMatrixData", into = "SymMatrixData")]
pub struct SymMatrix {
    n: usize,
    data: Vec<f64>,
}

#[derive(Serialize, Deserialize)]
struct SymMatrixData {
    n: usize,
    entries: Vec<f64>,
}

impl TryFrom<SymMatrixData> for SymMatrix {
    type Error = Error;
    fn try_from(raw: SymMatrixData) -> Result<Self> {
        SymMatrix::new(raw.n, raw.entries)
    }
}

impl From<SymMatrix> for SymMatrixData {
    fn from(m: SymMatrix) -> Self {
        SymMatrixData {
            n: m.n,
            entries: m.data,
        }
    }
}

impl SymMatrix {
    pub fn new(n: usize, data: Vec<f64>) -> Result<Self> {
        if data.len() != n * n {
            return Err(Error::InvalidInput(format!(
                "matrix of order {n} needs {} entries, got {}",
                n * n,
                data.len()
            )));
        }
        if let Some(v) = data.iter().find(|v| !v.is_finite()) {
            return Err(Error::InvalidInput(format!("non-finite matrix entry {v}")));
        }
        for i in 0..n {
            for j in (i + 1)..n {
                if (data[i * n + j] - data[j * n + i]).abs() > SYMMETRY_TOL {
                    return Err(Error::InvalidInput(format!(
                        "matrix not symmetric at ({i}, {j})"
                    )));
                }
            }
        }
        Ok(SymMatrix { n, data })
    }

    /// Builds from the upper triangle of `f(i, j)`, mirroring it below.
    pub fn from_fn(n: usize, mut f: impl FnMut(usize, usize) -> f64) -> Self {
        let mut data = vec![0.0; n * n];
        for i in 0..n {
            for j in i..n {
                let v = f(i, j);
                data[i * n + j] = v;
                data[j * n + i] = v;
            }
        }
        SymMatrix { n, data }
    }

    pub fn zeros(n: usize) -> Self {
        SymMatrix {
            n,
            data: vec![0.0; n * n],
        }
    }

    pub fn identity(n: usize) -> Self {
        Self::from_fn(n, |i, j| if i == j { 1.0 } else { 0.0 })
    }

    pub fn diag(values: &[f64]) -> Self {
        Self::from_fn(values.len(), |i, j| if i == j { values[i] } else { 0.0 })
    }

    pub fn order(&self) -> usize {
        self.n
    }

    pub fn get(&self, i: usize, j: usize) -> f64 {
        self.data[i * self.n + j]
    }

    pub fn entries(&self) -> &[f64] {
        &self.data
    }

    pub fn row(&self, i: usize) -> &[f64] {
        &self.data[i * self.n..(i + 1) * self.n]
    }

    pub fn is_zero(&self) -> bool {
        self.data.iter().all(|&v| v == 0.0)
    }

    pub fn matvec(&self, x: &ModelVector) -> ModelVector {
        debug_assert_eq!(x.dim(), self.n);
        let xs = x.as_slice();
        ModelVector(
            (0..self.n)
                .map(|i| self.row(i).iter().zip(xs).map(|(a, b)| a * b).sum())
                .collect(),
        )
    }

    pub fn try_matvec(&self, x: &ModelVector) -> Result<ModelVector> {
        x.check_dim(self.n)?;
        Ok(self.matvec(x))
    }

    /// `xᵀ M x`.
    pub fn quad_form(&self, x: &ModelVector) -> f64 {
        x.dot(&self.matvec(x))
    }

    pub fn sub(&self, other: &SymMatrix) -> SymMatrix {
        debug_assert_eq!(self.n, other.n);
        SymMatrix {
            n: self.n,
            data: self.data.iter().zip(&other.data).map(|(a, b)| a - b).collect(),
        }
    }

    pub fn add(&self, other: &SymMatrix) -> SymMatrix {
        debug_assert_eq!(self.n, other.n);
        SymMatrix {
            n: self.n,
            data: self.data.iter().zip(&other.data).map(|(a, b)| a + b).collect(),
        }
    }

    pub fn scale(&self, c: f64) -> SymMatrix {
        SymMatrix {
            n: self.n,
            data: self.data.iter().map(|a| c * a).collect(),
        }
    }

    /// `self + c·I`.
    pub fn shift(&self, c: f64) -> SymMatrix {
        let mut out = self.clone();
        for i in 0..self.n {
            out.data[i * self.n + i] += c;
        }
        out
    }

    /// Elementwise mean with the same accumulation rule as [`fixed_order_mean`].
    pub fn mean(ms: &[&SymMatrix]) -> Result<SymMatrix> {
        let first = ms
            .first()
            .ok_or_else(|| Error::InvalidInput("mean of zero matrices".into()))?;
        for m in ms {
            if m.n != first.n {
                return Err(Error::DimensionMismatch {
                    expected: first.n,
                    got: m.n,
                });
            }
        }
        let data = shifted_mean(first.data.len(), ms.len(), |k, e| ms[k].data[e]);
        Ok(SymMatrix { n: first.n, data })
    }

    fn frobenius(&self) -> f64 {
        self.data.iter().map(|v| v * v).sum::<f64>().sqrt()
    }
}

/// Mean of `count` vectors of length `len`, elementwise, as
/// `v₀ + (Σ_{k≥1} (v_k − v₀)) / count`, summed in ascending `k`.
///
/// The shift makes the mean of identical inputs reproduce them exactly, which a
/// plain running sum does not.
fn shifted_mean(len: usize, count: usize, value: impl Fn(usize, usize) -> f64) -> Vec<f64> {
    let n = count as f64;
    (0..len)
        .map(|e| {
            let base = value(0, e);
            let mut acc = 0.0;
            for k in 1..count {
                acc += value(k, e) - base;
            }
            base + acc / n
        })
        .collect()
}

/// Arithmetic mean accumulated in ascending index order.
pub fn fixed_order_mean(vs: &[ModelVector]) -> Result<ModelVector> {
    let first = vs
        .first()
        .ok_or_else(|| Error::InvalidInput("mean of an empty sequence".into()))?;
    let d = first.dim();
    for v in vs {
        v.check_dim(d)?;
    }
    Ok(ModelVector(shifted_mean(d, vs.len(), |k, e| vs[k].0[e])))
}

/// Same as [`fixed_order_mean`] over references, for callers that select a subset.
pub fn fixed_order_mean_ref(vs: &[&ModelVector]) -> Result<ModelVector> {
    let first = vs
        .first()
        .ok_or_else(|| Error::InvalidInput("mean of an empty sequence".into()))?;
    let d = first.dim();
    for v in vs {
        v.check_dim(d)?;
    }
    Ok(ModelVector(shifted_mean(d, vs.len(), |k, e| vs[k].0[e])))
}

const POWER_ITERS_DIRECT: usize = 5_000;
const POWER_ITERS_SQUARED: usize = 200_000;

/// Largest absolute eigenvalue of a symmetric matrix.
///
/// Power iteration on `m`, accepted once `‖m v − θ v‖ ≤ tol·|θ|`. A dominant
/// pair `±λ` never settles, so after a fixed budget the iteration moves to
/// `m²` whose top eigenvalue `λ²` is unique.
pub fn spectral_norm(m: &SymMatrix, tol: f64) -> Result<f64> {
    if !(tol > 0.0) {
        return Err(Error::InvalidInput(format!("tolerance must be positive, got {tol}")));
    }
    if m.data.iter().any(|v| !v.is_finite()) {
        return Err(Error::InvalidInput("non-finite matrix entry".into()));
    }
    let n = m.n;
    if n == 0 || m.is_zero() {
        return Ok(0.0);
    }
    // Scaling keeps the iteration away from overflow for huge entries.
    let scale = m.frobenius();
    let ms = m.scale(1.0 / scale);

    let mut v = start_vector(n);
    for _ in 0..POWER_ITERS_DIRECT {
        let w = ms.matvec(&v);
        let theta = v.dot(&w);
        let mut res = w.clone();
        res.sub_scaled(theta, &v);
        if res.norm() <= tol * theta.abs() {
            return Ok(theta.abs() * scale);
        }
        let wn = w.norm();
        if wn == 0.0 {
            // v fell into the null space; restart on a different direction.
            v = start_vector_shifted(n, 1);
            continue;
        }
        v = w.scale(1.0 / wn);
    }

    let mut theta = 0.0;
    for _ in 0..POWER_ITERS_SQUARED {
        let w = ms.matvec(&ms.matvec(&v));
        theta = v.dot(&w);
        let mut res = w.clone();
        res.sub_scaled(theta, &v);
        if res.norm() <= tol * theta.abs() {
            break;
        }
        let wn = w.norm();
        if wn == 0.0 {
            return Ok(0.0);
        }
        v = w.scale(1.0 / wn);
    }
    Ok(theta.max(0.0).sqrt() * scale)
}

/// Smallest eigenvalue via `λ_min(m) = s − λ_max(s·I − m)` with `s = ‖m‖₂`.
///
/// `s·I − m` is positive semidefinite, so its spectral norm is its top
/// eigenvalue and no signed eigensolver is needed.
pub fn min_eigenvalue(m: &SymMatrix, tol: f64) -> Result<f64> {
    let s = spectral_norm(m, tol)?;
    if s == 0.0 {
        return Ok(0.0);
    }
    let shifted = m.scale(-1.0).shift(s);
    Ok(s - spectral_norm(&shifted, tol)?)
}

fn start_vector(n: usize) -> ModelVector {
    start_vector_shifted(n, 0)
}

fn start_vector_shifted(n: usize, salt: u64) -> ModelVector {
    // Fixed, irregular direction: generic enough to overlap every eigenvector.
    let v: Vec<f64> = (0..n as u64)
        .map(|i| {
            let h = splitmix64(i.wrapping_add(salt.wrapping_mul(0x9E37_79B9_7F4A_7C15)));
            0.5 + (h >> 11) as f64 / (1u64 << 53) as f64
        })
        .collect();
    let v = ModelVector(v);
    let inv = 1.0 / v.norm();
    v.scale(inv)
}

fn splitmix64(mut z: u64) -> u64 {
    z = z.wrapping_add(0x9E37_79B9_7F4A_7C15);
    z = (z ^ (z >> 30)).wrapping_mul(0xBF58_476D_1CE4_E5B9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94D0_49BB_1331_11EB);
    z ^ (z >> 31)
}

/// What a random stream is used for. Part of the lane key, so streams for
/// different purposes never overlap even with equal indices.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub enum Purpose {
    GradientNoise,
    Participants,
    Generator,
    MiniBatch,
    Estimator,
}

impl Purpose {
    fn tag(self) -> u64 {
        match self {
            Purpose::GradientNoise => 0x6e6f_6973_65,
            Purpose::Participants => 0x7061_7274,
            Purpose::Generator => 0x6765_6e,
            Purpose::MiniBatch => 0x6261_7463_68,
            Purpose::Estimator => 0x6573_74,
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub struct Lane {
    pub purpose: Purpose,
    pub worker: u64,
    pub round: u64,
    pub iter: u64,
}

impl Lane {
    pub fn new(purpose: Purpose, worker: usize, round: usize, iter: usize) -> Self {
        Lane {
            purpose,
            worker: worker as u64,
            round: round as u64,
            iter: iter as u64,
        }
    }
}

/// A random stream addressed by `(master_seed, lane)`.
///
/// The seed and lane are packed into the ChaCha key and stream id, so the
/// draw sequence depends only on the address and never on which thread or in
/// which order streams are created.
pub struct RngStream {
    rng: ChaCha12Rng,
    spare_normal: Option<f64>,
}

impl RngStream {
    pub fn new(master_seed: u64, lane: Lane) -> Self {
        let mut key = [0u8; 32];
        key[0..8].copy_from_slice(&master_seed.to_le_bytes());
        key[8..16].copy_from_slice(&lane.purpose.tag().to_le_bytes());
        key[16..24].copy_from_slice(&lane.worker.to_le_bytes());
        key[24..32].copy_from_slice(&lane.round.to_le_bytes());
        let mut rng = ChaCha12Rng::from_seed(key);
        rng.set_stream(lane.iter);
        RngStream {
            rng,
            spare_normal: None,
        }
    }

    pub fn next_u64(&mut self) -> u64 {
        self.rng.next_u64()
    }

    /// Uniform on `[0, 1)` with 53 random bits.
    pub fn uniform(&mut self) -> f64 {
        (self.rng.next_u64() >> 11) as f64 * (1.0 / (1u64 << 53) as f64)
    }

    /// Uniform integer in `0..n`.
    pub fn index(&mut self, n: usize) -> usize {
        self.rng.gen_range(0..n)
    }

    /// Standard normal draw by Box–Muller; the second variate of each pair
    /// is kept for the next call.
    pub fn normal(&mut self) -> f64 {
        if let Some(z) = self.spare_normal.take() {
            return z;
        }
        let u1 = 1.0 - self.uniform();
        let u2 = self.uniform();
        let r = (-2.0 * u1.ln()).sqrt();
        let theta = std::f64::consts::TAU * u2;
        self.spare_normal = Some(r * theta.sin());
        r * theta.cos()
    }
}

/// `d` independent normal draws with the given per-component standard deviation.
pub fn gaussian_vector(stream: &mut RngStream, d: usize, component_std: f64) -> ModelVector {
    if component_std == 0.0 {
        return ModelVector::zeros(d);
    }
    ModelVector((0..d).map(|_| component_std * stream.normal()).collect())
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn spectral_norm_identity_and_diag() {
        assert!((spectral_norm(&SymMatrix::identity(5), 1e-12).unwrap() - 1.0).abs() < 1e-12);
        let m = SymMatrix::diag(&[3.0, -5.0]);
        assert!((spectral_norm(&m, 1e-12).unwrap() - 5.0).abs() < 1e-10);
    }

    #[test]
    fn spectral_norm_opposite_pair_uses_fallback() {
        let m = SymMatrix::diag(&[2.0, -2.0, 1.0]);
        assert!((spectral_norm(&m, 1e-12).unwrap() - 2.0).abs() < 1e-10);
    }

    #[test]
    fn spectral_norm_zero_and_nonfinite() {
        assert_eq!(spectral_norm(&SymMatrix::zeros(3), 1e-12).unwrap(), 0.0);
        let bad = SymMatrix {
            n: 1,
            data: vec![f64::NAN],
        };
        assert!(spectral_norm(&bad, 1e-12).is_err());
    }

    #[test]
    fn min_eigenvalue_of_diag() {
        let m = SymMatrix::diag(&[4.0, 0.5, 2.0]);
        assert!((min_eigenvalue(&m, 1e-13).unwrap() - 0.5).abs() < 1e-9);
        let m = SymMatrix::diag(&[1.0, -3.0]);
        assert!((min_eigenvalue(&m, 1e-13).unwrap() + 3.0).abs() < 1e-9);
    }

    #[test]
    fn symmetric_check() {
        assert!(SymMatrix::new(2, vec![1.0, 2.0, 2.1, 1.0]).is_err());
        assert!(SymMatrix::new(2, vec![1.0, 2.0, 2.0, 1.0]).is_ok());
    }

    #[test]
    fn mean_singleton_and_antipodal() {
        let v = ModelVector::from_vec(vec![0.1, -3.7, 1e-300]);
        assert_eq!(fixed_order_mean(&[v.clone()]).unwrap(), v);
        let z = fixed_order_mean(&[v.clone(), v.scale(-1.0)]).unwrap();
        assert!(z.iter().all(|&e| e == 0.0));
        let copies = vec![v.clone(); 7];
        assert_eq!(fixed_order_mean(&copies).unwrap(), v);
    }

    #[test]
    fn mean_dimension_mismatch() {
        let a = ModelVector::zeros(2);
        let b = ModelVector::zeros(3);
        assert!(fixed_order_mean(&[a, b]).is_err());
        assert!(fixed_order_mean(&[]).is_err());
    }

    #[test]
    fn gaussian_zero_std_and_determinism() {
        let lane = Lane::new(Purpose::GradientNoise, 3, 7, 1);
        let mut s = RngStream::new(42, lane);
        assert!(gaussian_vector(&mut s, 4, 0.0).iter().all(|&e| e == 0.0));
        let a = gaussian_vector(&mut RngStream::new(42, lane), 16, 1.0);
        let b = gaussian_vector(&mut RngStream::new(42, lane), 16, 1.0);
        assert_eq!(a, b);
        let other = Lane::new(Purpose::GradientNoise, 3, 7, 2);
        assert_ne!(a, gaussian_vector(&mut RngStream::new(42, other), 16, 1.0));
    }

    #[test]
    fn gaussian_sample_variance() {
        let mut s = RngStream::new(9, Lane::new(Purpose::Estimator, 0, 0, 0));
        let n = 100_000;
        let draws: Vec<f64> = (0..n).map(|_| s.normal()).collect();
        let mean = draws.iter().sum::<f64>() / n as f64;
        let var = draws.iter().map(|x| (x - mean).powi(2)).sum::<f64>() / (n - 1) as f64;
        assert!((0.97..=1.03).contains(&var), "variance {var}");
    }
}
