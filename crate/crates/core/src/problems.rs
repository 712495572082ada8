//! Objective families: federated quadratics and logistic regression, their
//! gradient oracles, and the instance generators used by the experiments.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::numkit::{
    fixed_order_mean, gaussian_vector, Lane, ModelVector, Purpose, RngStream, SymMatrix,
};

/// Additive isotropic Gaussian gradient noise with total variance `σ²`,
/// i.e. per-component standard deviation `σ/√d`.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct NoiseModel {
    pub sigma: f64,
}

impl NoiseModel {
    pub fn new(sigma: f64) -> Result<Self> {
        if !(sigma >= 0.0) || !sigma.is_finite() {
            return Err(Error::InvalidInput(format!("sigma must be finite and >= 0, got {sigma}")));
        }
        Ok(NoiseModel { sigma })
    }

    pub fn component_std(&self, d: usize) -> f64 {
        self.sigma / (d as f64).sqrt()
    }

    /// Mean of `batch` independent noise vectors drawn from `stream`.
    pub fn sample_mean(&self, d: usize, batch: usize, stream: &mut RngStream) -> ModelVector {
        let std = self.component_std(d);
        if std == 0.0 {
            return ModelVector::zeros(d);
        }
        let draws: Vec<ModelVector> = (0..batch.max(1))
            .map(|_| gaussian_vector(stream, d, std))
            .collect();
        fixed_order_mean(&draws).expect("non-empty, equal dimensions")
    }
}

/// An objective split over workers, `f = (1/N) Σ F_i`.
///
/// The simulator and the estimators only ever see this interface.
pub trait FederatedObjective: Sync {
    fn dim(&self) -> usize;
    fn n_workers(&self) -> usize;
    fn local_objective(&self, worker: usize, x: &ModelVector) -> f64;
    fn local_gradient(&self, worker: usize, x: &ModelVector) -> ModelVector;

    fn global_objective(&self, x: &ModelVector) -> f64 {
        let n = self.n_workers() as f64;
        (0..self.n_workers())
            .map(|i| self.local_objective(i, x))
            .sum::<f64>()
            / n
    }

    fn global_gradient(&self, x: &ModelVector) -> ModelVector {
        let gs: Vec<ModelVector> = (0..self.n_workers())
            .map(|i| self.local_gradient(i, x))
            .collect();
        fixed_order_mean(&gs).expect("at least one worker")
    }

    /// Unbiased gradient sample from a batch of `batch` draws, plus additive
    /// noise from `noise`.
    fn stochastic_gradient(
        &self,
        worker: usize,
        x: &ModelVector,
        noise: &NoiseModel,
        batch: usize,
        stream: &mut RngStream,
    ) -> ModelVector;

    /// Exact local gradient together with one oracle sample at the same point.
    fn exact_and_sample(
        &self,
        worker: usize,
        x: &ModelVector,
        noise: &NoiseModel,
        batch: usize,
        stream: &mut RngStream,
    ) -> (ModelVector, ModelVector) {
        let exact = self.local_gradient(worker, x);
        let sampled = self.stochastic_gradient(worker, x, noise, batch, stream);
        (exact, sampled)
    }

    /// `max_i ‖∇F_i(x) − ∇f(x)‖`.
    fn zeta_at(&self, x: &ModelVector) -> f64 {
        let g = self.global_gradient(x);
        (0..self.n_workers())
            .map(|i| self.local_gradient(i, x).dist_sq(&g).sqrt())
            .fold(0.0, f64::max)
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct QuadraticWorker {
    pub a: SymMatrix,
    pub b: ModelVector,
    pub c: f64,
}

impl QuadraticWorker {
    pub fn objective(&self, x: &ModelVector) -> f64 {
        0.5 * self.a.quad_form(x) + self.b.dot(x) + self.c
    }

    /// `A_i x + b_i`.
    pub fn gradient(&self, x: &ModelVector) -> ModelVector {
        let mut g = self.a.matvec(x);
        g.add_assign(&self.b);
        g
    }
}

pub fn local_gradient(w: &QuadraticWorker, x: &ModelVector) -> Result<ModelVector> {
    let mut g = w.a.try_matvec(x)?;
    g.add_assign(&w.b);
    Ok(g)
}

pub fn stochastic_gradient(
    w: &QuadraticWorker,
    x: &ModelVector,
    noise: &NoiseModel,
    stream: &mut RngStream,
) -> Result<ModelVector> {
    let mut g = local_gradient(w, x)?;
    g.add_assign(&noise.sample_mean(x.dim(), 1, stream));
    Ok(g)
}

/// Generator name, parameters and seed, recorded so an instance can be rebuilt.
#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct Provenance {
    pub generator: String,
    pub params: serde_json::Map<String, serde_json::Value>,
    pub seed: u64,
}

#[derive(Clone, Debug, Serialize, Deserialize)]
#[serde(try_from = "QuadraticFedData", into = "QuadraticFedData")]
pub struct QuadraticFed {
    workers: Vec<QuadraticWorker>,
    global_a: SymMatrix,
    global_b: ModelVector,
    global_c: f64,
    provenance: Provenance,
    // Cached A_i − A and b_i − b for the divergence diagnostics.
    hess_dev: Vec<SymMatrix>,
    lin_dev: Vec<ModelVector>,
    common_hessian: bool,
}

#[derive(Serialize, Deserialize)]
struct QuadraticFedData {
    workers: Vec<QuadraticWorker>,
    global_a: SymMatrix,
    global_b: ModelVector,
    global_c: f64,
    provenance: Provenance,
}

impl TryFrom<QuadraticFedData> for QuadraticFed {
    type Error = Error;
    fn try_from(raw: QuadraticFedData) -> Result<Self> {
        QuadraticFed::new(raw.workers, raw.provenance)
    }
}

impl From<QuadraticFed> for QuadraticFedData {
    fn from(f: QuadraticFed) -> Self {
        QuadraticFedData {
            workers: f.workers,
            global_a: f.global_a,
            global_b: f.global_b,
            global_c: f.global_c,
            provenance: f.provenance,
        }
    }
}

impl QuadraticFed {
    pub fn new(workers: Vec<QuadraticWorker>, provenance: Provenance) -> Result<Self> {
        let first = workers
            .first()
            .ok_or_else(|| Error::InvalidInput("a federation needs at least one worker".into()))?;
        let d = first.a.order();
        for w in &workers {
            if w.a.order() != d || w.b.dim() != d {
                return Err(Error::DimensionMismatch {
                    expected: d,
                    got: if w.a.order() != d { w.a.order() } else { w.b.dim() },
                });
            }
            if !w.c.is_finite() || !w.b.is_finite() {
                return Err(Error::InvalidInput("non-finite linear or constant term".into()));
            }
        }
        let hs: Vec<&SymMatrix> = workers.iter().map(|w| &w.a).collect();
        let global_a = SymMatrix::mean(&hs)?;
        let bs: Vec<ModelVector> = workers.iter().map(|w| w.b.clone()).collect();
        let global_b = fixed_order_mean(&bs)?;
        let cs: Vec<ModelVector> = workers
            .iter()
            .map(|w| ModelVector::from_vec(vec![w.c]))
            .collect();
        let global_c = fixed_order_mean(&cs)?[0];
        let hess_dev: Vec<SymMatrix> = workers.iter().map(|w| w.a.sub(&global_a)).collect();
        let lin_dev: Vec<ModelVector> = workers.iter().map(|w| w.b.sub(&global_b)).collect();
        let common_hessian = hess_dev.iter().all(SymMatrix::is_zero);
        Ok(QuadraticFed {
            workers,
            global_a,
            global_b,
            global_c,
            provenance,
            hess_dev,
            lin_dev,
            common_hessian,
        })
    }

    pub fn workers(&self) -> &[QuadraticWorker] {
        &self.workers
    }

    pub fn worker(&self, i: usize) -> &QuadraticWorker {
        &self.workers[i]
    }

    pub fn global_a(&self) -> &SymMatrix {
        &self.global_a
    }

    pub fn global_b(&self) -> &ModelVector {
        &self.global_b
    }

    pub fn global_c(&self) -> f64 {
        self.global_c
    }

    pub fn provenance(&self) -> &Provenance {
        &self.provenance
    }

    /// `A_i − A` for every worker.
    pub fn hessian_deviations(&self) -> &[SymMatrix] {
        &self.hess_dev
    }

    pub fn has_common_hessian(&self) -> bool {
        self.common_hessian
    }

    pub fn to_json(&self) -> Result<String> {
        Ok(serde_json::to_string_pretty(self)?)
    }

    pub fn from_json(s: &str) -> Result<Self> {
        Ok(serde_json::from_str(s)?)
    }
}

/// `½xᵀAx + bᵀx + c`.
pub fn global_objective(fed: &QuadraticFed, x: &ModelVector) -> Result<f64> {
    if x.dim() != fed.dim() {
        return Err(Error::DimensionMismatch {
            expected: fed.dim(),
            got: x.dim(),
        });
    }
    Ok(FederatedObjective::global_objective(fed, x))
}

impl FederatedObjective for QuadraticFed {
    fn dim(&self) -> usize {
        self.global_a.order()
    }

    fn n_workers(&self) -> usize {
        self.workers.len()
    }

    fn local_objective(&self, worker: usize, x: &ModelVector) -> f64 {
        self.workers[worker].objective(x)
    }

    fn local_gradient(&self, worker: usize, x: &ModelVector) -> ModelVector {
        self.workers[worker].gradient(x)
    }

    fn global_objective(&self, x: &ModelVector) -> f64 {
        0.5 * self.global_a.quad_form(x) + self.global_b.dot(x) + self.global_c
    }

    fn global_gradient(&self, x: &ModelVector) -> ModelVector {
        let mut g = self.global_a.matvec(x);
        g.add_assign(&self.global_b);
        g
    }

    fn stochastic_gradient(
        &self,
        worker: usize,
        x: &ModelVector,
        noise: &NoiseModel,
        batch: usize,
        stream: &mut RngStream,
    ) -> ModelVector {
        let mut g = self.local_gradient(worker, x);
        g.add_assign(&noise.sample_mean(x.dim(), batch, stream));
        g
    }

    fn exact_and_sample(
        &self,
        worker: usize,
        x: &ModelVector,
        noise: &NoiseModel,
        batch: usize,
        stream: &mut RngStream,
    ) -> (ModelVector, ModelVector) {
        let exact = self.local_gradient(worker, x);
        let mut g = exact.clone();
        g.add_assign(&noise.sample_mean(x.dim(), batch, stream));
        (exact, g)
    }

    /// `max_i ‖(A_i − A)x + b_i − b‖`.
    fn zeta_at(&self, x: &ModelVector) -> f64 {
        (0..self.workers.len())
            .map(|i| {
                if self.common_hessian {
                    self.lin_dev[i].norm()
                } else {
                    let mut v = self.hess_dev[i].matvec(x);
                    v.add_assign(&self.lin_dev[i]);
                    v.norm()
                }
            })
            .fold(0.0, f64::max)
    }
}

/// Scale applied to the entries of `U` in [`gen_common_hessian`]: `1/√d`
/// keeps `‖UᵀU‖₂` near 4 independently of `d`.
pub fn default_u_scale(d: usize) -> f64 {
    1.0 / (d as f64).sqrt()
}

/// Workers `F_i(x) = ½‖Ux − v_i‖²`, so every Hessian is `UᵀU`.
///
/// `U` has i.i.d. `N(0, 1/d)` entries and the `v_i` are standard normal.
pub fn gen_common_hessian(d: usize, n_workers: usize, seed: u64) -> Result<QuadraticFed> {
    gen_common_hessian_with(d, n_workers, seed, default_u_scale(d), 1.0)
}

/// [`gen_common_hessian`] with explicit `U` scale, and with every `v_i`
/// replaced by `v̄ + spread·(v_i − v̄)`.
///
/// `spread` rescales `b_i − b` by exactly that factor and leaves the global
/// gradient untouched.
pub fn gen_common_hessian_with(
    d: usize,
    n_workers: usize,
    seed: u64,
    u_scale: f64,
    spread: f64,
) -> Result<QuadraticFed> {
    if d == 0 || n_workers == 0 {
        return Err(Error::InvalidInput("d and n_workers must be positive".into()));
    }
    let mut s = RngStream::new(seed, Lane::new(Purpose::Generator, 0, 0, 0));
    let u: Vec<f64> = (0..d * d).map(|_| u_scale * s.normal()).collect();
    let vs: Vec<ModelVector> = (0..n_workers)
        .map(|i| {
            let mut s = RngStream::new(seed, Lane::new(Purpose::Generator, i + 1, 0, 0));
            gaussian_vector(&mut s, d, 1.0)
        })
        .collect();
    let vbar = fixed_order_mean(&vs)?;
    let vs: Vec<ModelVector> = if spread == 1.0 {
        vs
    } else {
        vs.iter()
            .map(|v| vbar.add(&v.sub(&vbar).scale(spread)))
            .collect()
    };

    // UᵀU and Uᵀv_i with U stored row-major (row = output index).
    let utu = SymMatrix::from_fn(d, |i, j| (0..d).map(|k| u[k * d + i] * u[k * d + j]).sum());
    let workers = vs
        .iter()
        .map(|v| {
            let utv: Vec<f64> = (0..d)
                .map(|i| -(0..d).map(|k| u[k * d + i] * v[k]).sum::<f64>())
                .collect();
            QuadraticWorker {
                a: utu.clone(),
                b: ModelVector::from_vec(utv),
                c: 0.5 * v.norm_sq(),
            }
        })
        .collect();
    let mut params = serde_json::Map::new();
    params.insert("d".into(), d.into());
    params.insert("n_workers".into(), n_workers.into());
    params.insert("u_scale".into(), u_scale.into());
    params.insert("spread".into(), spread.into());
    QuadraticFed::new(
        workers,
        Provenance {
            generator: "common_hessian".into(),
            params,
            seed,
        },
    )
}

/// Workers with distinct Hessians `A_i = A_base + δ·S_i` where the `S_i`
/// are random symmetric and sum to zero.
///
/// `A_base = GᵀG/d` for standard normal `G`. When `psd_floor ≥ 0` the base
/// is shifted by a multiple of the identity until every `A_i` has smallest
/// eigenvalue at least `psd_floor`. Linear terms are standard normal, `c_i = 0`.
pub fn gen_hetero_quadratic(
    d: usize,
    n_workers: usize,
    hetero_scale: f64,
    psd_floor: f64,
    seed: u64,
) -> Result<QuadraticFed> {
    if n_workers < 2 {
        return Err(Error::InvalidInput("heterogeneous instances need n_workers >= 2".into()));
    }
    if d == 0 || !(hetero_scale >= 0.0) {
        return Err(Error::InvalidInput("d must be positive and hetero_scale >= 0".into()));
    }
    let mut s = RngStream::new(seed, Lane::new(Purpose::Generator, 0, 0, 0));
    let g: Vec<f64> = (0..d * d).map(|_| s.normal()).collect();
    let mut base = SymMatrix::from_fn(d, |i, j| {
        (0..d).map(|k| g[k * d + i] * g[k * d + j]).sum::<f64>() / d as f64
    });

    let scale = 1.0 / (2.0 * d as f64).sqrt();
    let mut perturb: Vec<SymMatrix> = (0..n_workers - 1)
        .map(|i| {
            let mut s = RngStream::new(seed, Lane::new(Purpose::Generator, i + 1, 1, 0));
            let h: Vec<f64> = (0..d * d).map(|_| s.normal()).collect();
            SymMatrix::from_fn(d, |r, c| scale * (h[r * d + c] + h[c * d + r]))
        })
        .collect();
    let mut last = SymMatrix::zeros(d);
    for p in &perturb {
        last = last.sub(p);
    }
    perturb.push(last);

    if psd_floor >= 0.0 {
        let min_eig = perturb
            .iter()
            .map(|p| crate::numkit::min_eigenvalue(&base.add(&p.scale(hetero_scale)), 1e-13))
            .collect::<Result<Vec<f64>>>()?
            .into_iter()
            .fold(f64::INFINITY, f64::min);
        let norm = crate::numkit::spectral_norm(&base, 1e-12)?;
        // Small margin covers the eigenvalue tolerance.
        let shift = (psd_floor - min_eig).max(0.0) + 1e-9 * (1.0 + norm);
        base = base.shift(shift);
    }

    let workers = perturb
        .iter()
        .enumerate()
        .map(|(i, p)| {
            let mut s = RngStream::new(seed, Lane::new(Purpose::Generator, i + 1, 2, 0));
            QuadraticWorker {
                a: base.add(&p.scale(hetero_scale)),
                b: gaussian_vector(&mut s, d, 1.0),
                c: 0.0,
            }
        })
        .collect();
    let mut params = serde_json::Map::new();
    params.insert("d".into(), d.into());
    params.insert("n_workers".into(), n_workers.into());
    params.insert("hetero_scale".into(), hetero_scale.into());
    params.insert("psd_floor".into(), psd_floor.into());
    QuadraticFed::new(
        workers,
        Provenance {
            generator: "hetero_quadratic".into(),
            params,
            seed,
        },
    )
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Sample {
    pub feature: Vec<f64>,
    pub label: u8,
}

/// Binary logistic regression split over workers by label skew.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct LogisticFed {
    pub workers: Vec<Vec<Sample>>,
    pub skew: f64,
    pub dim: usize,
    pub provenance: Provenance,
}

/// Distance of each class mean from the origin along the first axis.
pub const LOGISTIC_CLASS_OFFSET: f64 = 1.0;

/// Two unit-covariance Gaussian classes centred at `±e₁`; the last feature is
/// a constant 1 acting as bias.
///
/// Worker `i` has dominant label `i mod 2`. A `skew` fraction of its samples
/// carry that label; the rest are split evenly between the two classes, so
/// `skew = 0` gives every worker the global label balance.
pub fn gen_logistic(
    d: usize,
    n_workers: usize,
    skew: f64,
    samples_per_worker: usize,
    seed: u64,
) -> Result<LogisticFed> {
    if !(0.0..=1.0).contains(&skew) {
        return Err(Error::InvalidInput(format!("skew must lie in [0, 1], got {skew}")));
    }
    if d < 2 || n_workers == 0 || samples_per_worker == 0 {
        return Err(Error::InvalidInput(
            "logistic instances need d >= 2 and at least one sample per worker".into(),
        ));
    }
    let workers = (0..n_workers)
        .map(|i| {
            let mut s = RngStream::new(seed, Lane::new(Purpose::Generator, i, 0, 0));
            let dominant = (i % 2) as u8;
            let n_dom = (skew * samples_per_worker as f64).round() as usize;
            let rest = samples_per_worker - n_dom;
            let mut labels: Vec<u8> = vec![dominant; n_dom];
            labels.extend((0..rest).map(|j| if j % 2 == 0 { dominant } else { 1 - dominant }));
            // Shuffle so mini-batches do not see label runs.
            for j in (1..labels.len()).rev() {
                let k = s.index(j + 1);
                labels.swap(j, k);
            }
            labels
                .into_iter()
                .map(|label| {
                    let mut feature: Vec<f64> = (0..d - 1).map(|_| s.normal()).collect();
                    feature[0] += if label == 1 {
                        LOGISTIC_CLASS_OFFSET
                    } else {
                        -LOGISTIC_CLASS_OFFSET
                    };
                    feature.push(1.0);
                    Sample { feature, label }
                })
                .collect()
        })
        .collect();
    let mut params = serde_json::Map::new();
    params.insert("d".into(), d.into());
    params.insert("n_workers".into(), n_workers.into());
    params.insert("skew".into(), skew.into());
    params.insert("samples_per_worker".into(), samples_per_worker.into());
    Ok(LogisticFed {
        workers,
        skew,
        dim: d,
        provenance: Provenance {
            generator: "logistic".into(),
            params,
            seed,
        },
    })
}

fn softplus(z: f64) -> f64 {
    if z > 0.0 {
        z + (-z).exp().ln_1p()
    } else {
        z.exp().ln_1p()
    }
}

fn sigmoid(z: f64) -> f64 {
    if z >= 0.0 {
        1.0 / (1.0 + (-z).exp())
    } else {
        let e = z.exp();
        e / (1.0 + e)
    }
}

fn sample_loss(s: &Sample, x: &ModelVector) -> f64 {
    let z: f64 = s.feature.iter().zip(x.iter()).map(|(a, b)| a * b).sum();
    softplus(z) - f64::from(s.label) * z
}

fn accumulate_gradient(s: &Sample, x: &ModelVector, acc: &mut [f64]) {
    let z: f64 = s.feature.iter().zip(x.iter()).map(|(a, b)| a * b).sum();
    let r = sigmoid(z) - f64::from(s.label);
    for (g, a) in acc.iter_mut().zip(&s.feature) {
        *g += r * a;
    }
}

impl LogisticFed {
    pub fn local_loss(&self, worker: usize, x: &ModelVector) -> f64 {
        let samples = &self.workers[worker];
        samples.iter().map(|s| sample_loss(s, x)).sum::<f64>() / samples.len() as f64
    }

    fn mean_gradient<'a>(&self, samples: impl Iterator<Item = &'a Sample>, x: &ModelVector) -> ModelVector {
        let mut acc = vec![0.0; self.dim];
        let mut count = 0usize;
        for s in samples {
            accumulate_gradient(s, x, &mut acc);
            count += 1;
        }
        let inv = 1.0 / count as f64;
        ModelVector::from_vec(acc.into_iter().map(|g| g * inv).collect())
    }

    /// Second-moment matrix `(1/n) Σ a aᵀ` of one worker's features.
    pub fn second_moment(&self, worker: usize) -> SymMatrix {
        let samples = &self.workers[worker];
        let n = samples.len() as f64;
        SymMatrix::from_fn(self.dim, |i, j| {
            samples.iter().map(|s| s.feature[i] * s.feature[j]).sum::<f64>() / n
        })
    }

    pub fn label_share(&self, worker: usize, label: u8) -> f64 {
        let samples = &self.workers[worker];
        samples.iter().filter(|s| s.label == label).count() as f64 / samples.len() as f64
    }
}

/// Mean logistic-loss gradient of one worker: exact when `batch` is `None`,
/// otherwise over a uniform without-replacement mini-batch drawn from `stream`.
pub fn logistic_gradient(
    fed: &LogisticFed,
    worker: usize,
    x: &ModelVector,
    batch: Option<usize>,
    stream: Option<&mut RngStream>,
) -> Result<ModelVector> {
    let samples = fed
        .workers
        .get(worker)
        .ok_or_else(|| Error::InvalidInput(format!("no worker {worker}")))?;
    if x.dim() != fed.dim {
        return Err(Error::DimensionMismatch {
            expected: fed.dim,
            got: x.dim(),
        });
    }
    match batch {
        None => Ok(fed.mean_gradient(samples.iter(), x)),
        Some(0) => Err(Error::InvalidInput("empty mini-batch".into())),
        Some(b) if b > samples.len() => Err(Error::InvalidInput(format!(
            "batch {b} exceeds the {} samples of worker {worker}",
            samples.len()
        ))),
        Some(b) => {
            let stream = stream.ok_or_else(|| {
                Error::InvalidInput("a mini-batch gradient needs a random stream".into())
            })?;
            let idx = sample_without_replacement(stream, samples.len(), b);
            Ok(fed.mean_gradient(idx.iter().map(|&k| &samples[k]), x))
        }
    }
}

/// First `k` entries of a partial Fisher–Yates shuffle of `0..n`.
fn sample_without_replacement(stream: &mut RngStream, n: usize, k: usize) -> Vec<usize> {
    let mut idx: Vec<usize> = (0..n).collect();
    for j in 0..k {
        let pick = j + stream.index(n - j);
        idx.swap(j, pick);
    }
    idx.truncate(k);
    idx
}

impl FederatedObjective for LogisticFed {
    fn dim(&self) -> usize {
        self.dim
    }

    fn n_workers(&self) -> usize {
        self.workers.len()
    }

    fn local_objective(&self, worker: usize, x: &ModelVector) -> f64 {
        self.local_loss(worker, x)
    }

    fn local_gradient(&self, worker: usize, x: &ModelVector) -> ModelVector {
        self.mean_gradient(self.workers[worker].iter(), x)
    }

    fn stochastic_gradient(
        &self,
        worker: usize,
        x: &ModelVector,
        noise: &NoiseModel,
        batch: usize,
        stream: &mut RngStream,
    ) -> ModelVector {
        let n = self.workers[worker].len();
        let mut g = if batch >= n {
            self.local_gradient(worker, x)
        } else {
            let idx = sample_without_replacement(stream, n, batch.max(1));
            self.mean_gradient(idx.iter().map(|&k| &self.workers[worker][k]), x)
        };
        g.add_assign(&noise.sample_mean(self.dim, 1, stream));
        g
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn worker(a: SymMatrix, b: Vec<f64>) -> QuadraticWorker {
        QuadraticWorker {
            a,
            b: ModelVector::from_vec(b),
            c: 0.0,
        }
    }

    #[test]
    fn gradient_trivial_cases() {
        let w = worker(SymMatrix::zeros(2), vec![1.5, -2.0]);
        let x = ModelVector::from_vec(vec![10.0, 3.0]);
        assert_eq!(local_gradient(&w, &x).unwrap().as_slice(), &[1.5, -2.0]);
        let w = worker(SymMatrix::identity(2), vec![0.0, 0.0]);
        let x = ModelVector::from_vec(vec![2.0, -1.0]);
        assert_eq!(local_gradient(&w, &x).unwrap().as_slice(), &[2.0, -1.0]);
        assert!(local_gradient(&w, &ModelVector::zeros(3)).is_err());
    }

    #[test]
    fn noiseless_stochastic_gradient_is_exact() {
        let fed = gen_hetero_quadratic(4, 3, 0.5, 0.1, 1).unwrap();
        let x = ModelVector::from_vec(vec![0.3, -0.2, 1.0, 0.0]);
        let mut s = RngStream::new(0, Lane::new(Purpose::GradientNoise, 0, 0, 0));
        let g = stochastic_gradient(fed.worker(0), &x, &NoiseModel::new(0.0).unwrap(), &mut s).unwrap();
        assert_eq!(g, fed.local_gradient(0, &x));
    }

    #[test]
    fn objective_at_origin_is_offset() {
        let fed = gen_common_hessian(5, 3, 2).unwrap();
        let f0 = global_objective(&fed, &ModelVector::zeros(5)).unwrap();
        assert_eq!(f0, fed.global_c());
    }

    #[test]
    fn single_worker_global_is_local() {
        let fed = gen_common_hessian(4, 1, 3).unwrap();
        let x = ModelVector::from_vec(vec![0.1, 0.2, -0.3, 0.4]);
        let f = global_objective(&fed, &x).unwrap();
        assert!((f - fed.worker(0).objective(&x)).abs() <= 1e-12 * f.abs().max(1.0));
    }

    #[test]
    fn common_hessian_has_identical_hessians() {
        let fed = gen_common_hessian(6, 4, 11).unwrap();
        assert!(fed.has_common_hessian());
        assert!(fed.hessian_deviations().iter().all(SymMatrix::is_zero));
    }

    #[test]
    fn hetero_perturbations_sum_to_zero() {
        let base = gen_hetero_quadratic(5, 4, 0.0, 0.2, 5).unwrap();
        let fed = gen_hetero_quadratic(5, 4, 0.7, 0.2, 5).unwrap();
        assert!(base.has_common_hessian());
        assert!(!fed.has_common_hessian());
        let sum = fed
            .hessian_deviations()
            .iter()
            .fold(SymMatrix::zeros(5), |acc, m| acc.add(m));
        assert!(sum.entries().iter().all(|v| v.abs() < 1e-12));
    }

    #[test]
    fn json_round_trip_is_exact() {
        let fed = gen_hetero_quadratic(3, 3, 0.4, -1.0, 8).unwrap();
        let back = QuadraticFed::from_json(&fed.to_json().unwrap()).unwrap();
        assert_eq!(fed.workers(), back.workers());
        assert_eq!(fed.global_a(), back.global_a());
        assert_eq!(fed.provenance(), back.provenance());
    }

    #[test]
    fn logistic_skew_extremes() {
        let fed = gen_logistic(3, 4, 1.0, 50, 4).unwrap();
        for i in 0..4 {
            assert_eq!(fed.label_share(i, (i % 2) as u8), 1.0);
        }
        let fed = gen_logistic(3, 6, 0.0, 500, 4).unwrap();
        for i in 0..6 {
            assert!((fed.label_share(i, 1) - 0.5).abs() <= 0.05);
        }
        let fed = gen_logistic(3, 6, 0.75, 101, 4).unwrap();
        for i in 0..6 {
            assert!(fed.label_share(i, (i % 2) as u8) >= 0.75);
        }
    }

    #[test]
    fn logistic_bias_gradient_vanishes_when_balanced() {
        let fed = gen_logistic(4, 2, 0.0, 200, 1).unwrap();
        let g = logistic_gradient(&fed, 0, &ModelVector::zeros(4), None, None).unwrap();
        assert!(g[3].abs() < 1e-15);
    }

    #[test]
    fn logistic_batch_errors() {
        let fed = gen_logistic(3, 1, 0.5, 10, 1).unwrap();
        let x = ModelVector::zeros(3);
        let mut s = RngStream::new(0, Lane::new(Purpose::MiniBatch, 0, 0, 0));
        assert!(logistic_gradient(&fed, 0, &x, Some(0), Some(&mut s)).is_err());
        assert!(logistic_gradient(&fed, 0, &x, Some(11), Some(&mut s)).is_err());
        assert!(logistic_gradient(&fed, 0, &x, Some(3), None).is_err());
    }
}
