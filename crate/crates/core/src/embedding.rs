//! Parameterized smooth embeddings `φ_θ: R^d → R^D`.
//!
//! All families are written once over [`Real`], so the same forward pass
//! gives plain values (`f64`) or a taped computation for parameter
//! gradients. The latent Jacobian is propagated in forward mode alongside
//! the value.

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal, Uniform};
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::models::PriorModel;
use crate::numerics::{qr_thin, singular_values, AffineMap, Matrix, NumericsError, Real};

#[derive(Debug, Clone, PartialEq, Error)]
pub enum EmbeddingError {
    #[error("dimension mismatch: {0}")]
    Dimension(String),
    #[error("invalid embedding: {0}")]
    Invalid(String),
    #[error(transparent)]
    Numerics(#[from] NumericsError),
}

/// Feature set of the one-dimensional basis family.
#[derive(Clone, Debug, PartialEq)]
pub enum Basis {
    /// Probabilists' Hermite polynomials `He_n(z / scale)`.
    Hermite { scale: f64 },
    /// Monomials `z^n`.
    Monomial,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(try_from = "FamilyRecord", into = "FamilyRecord")]
pub enum Family {
    /// `φ(z) = A z + b`.
    Linear,
    /// tanh hidden layers, then a linear readout of `[h_L; z]`.
    Perceptron { hidden: Vec<usize> },
    /// `φ_i(z) = Σ_n c_{n,i} f_n(z)` for `n = 0..=degree`; `d = 1` only.
    Basis1d { basis: Basis, degree: usize },
}

/// Flat serialized form of [`Family`].
#[derive(Clone, Debug, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
struct FamilyRecord {
    kind: String,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    hidden: Option<Vec<usize>>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    basis: Option<String>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    scale: Option<f64>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    degree: Option<usize>,
}

impl TryFrom<FamilyRecord> for Family {
    type Error = String;

    fn try_from(r: FamilyRecord) -> Result<Self, String> {
        let unexpected = |field: &str, present: bool| {
            if present {
                Err(format!("field `{field}` does not apply to family `{}`", r.kind))
            } else {
                Ok(())
            }
        };
        match r.kind.as_str() {
            "linear" => {
                unexpected("hidden", r.hidden.is_some())?;
                unexpected("basis", r.basis.is_some())?;
                unexpected("scale", r.scale.is_some())?;
                unexpected("degree", r.degree.is_some())?;
                Ok(Family::Linear)
            }
            "perceptron" => {
                unexpected("basis", r.basis.is_some())?;
                unexpected("scale", r.scale.is_some())?;
                unexpected("degree", r.degree.is_some())?;
                let hidden = r.hidden.clone().ok_or("family `perceptron` needs `hidden`")?;
                Ok(Family::Perceptron { hidden })
            }
            "basis1d" => {
                unexpected("hidden", r.hidden.is_some())?;
                let degree = r.degree.ok_or("family `basis1d` needs `degree`")?;
                let basis = match r.basis.as_deref() {
                    Some("hermite") => Basis::Hermite {
                        scale: r.scale.unwrap_or(1.0),
                    },
                    Some("monomial") => {
                        unexpected("scale", r.scale.is_some())?;
                        Basis::Monomial
                    }
                    Some(other) => return Err(format!("unknown basis `{other}`; expected hermite or monomial")),
                    None => return Err("family `basis1d` needs `basis`".into()),
                };
                Ok(Family::Basis1d { basis, degree })
            }
            other => Err(format!(
                "unknown family kind `{other}`; expected linear, perceptron or basis1d"
            )),
        }
    }
}

impl From<Family> for FamilyRecord {
    fn from(f: Family) -> Self {
        let mut r = FamilyRecord {
            kind: String::new(),
            hidden: None,
            basis: None,
            scale: None,
            degree: None,
        };
        match f {
            Family::Linear => r.kind = "linear".into(),
            Family::Perceptron { hidden } => {
                r.kind = "perceptron".into();
                r.hidden = Some(hidden);
            }
            Family::Basis1d { basis, degree } => {
                r.kind = "basis1d".into();
                r.degree = Some(degree);
                match basis {
                    Basis::Hermite { scale } => {
                        r.basis = Some("hermite".into());
                        r.scale = Some(scale);
                    }
                    Basis::Monomial => r.basis = Some("monomial".into()),
                }
            }
        }
        r
    }
}

/// One weight block and its bias (possibly empty).
#[derive(Clone, Debug, PartialEq)]
pub struct ParamBlock {
    pub weight: Matrix,
    pub bias: Vec<f64>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
struct EmbeddingRecord {
    family: Family,
    latent_dim: usize,
    ambient_dim: usize,
    theta: Vec<f64>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    precompose: Option<AffineMap>,
}

/// A family together with its flat parameter vector.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(try_from = "EmbeddingRecord", into = "EmbeddingRecord")]
pub struct EmbeddingModel {
    family: Family,
    latent_dim: usize,
    ambient_dim: usize,
    theta: Vec<f64>,
    precompose: Option<AffineMap>,
}

impl From<EmbeddingModel> for EmbeddingRecord {
    fn from(m: EmbeddingModel) -> Self {
        EmbeddingRecord {
            family: m.family,
            latent_dim: m.latent_dim,
            ambient_dim: m.ambient_dim,
            theta: m.theta,
            precompose: m.precompose,
        }
    }
}

impl TryFrom<EmbeddingRecord> for EmbeddingModel {
    type Error = EmbeddingError;

    fn try_from(r: EmbeddingRecord) -> Result<Self, EmbeddingError> {
        let mut m = EmbeddingModel::new(r.family, r.latent_dim, r.ambient_dim, r.theta)?;
        if let Some(g) = r.precompose {
            m = m.precomposed(&g)?;
        }
        Ok(m)
    }
}

/// Block shapes `(rows, cols, bias_len)` in flattening order.
fn block_shapes(family: &Family, d: usize, big_d: usize) -> Vec<(usize, usize, usize)> {
    match family {
        Family::Linear => vec![(big_d, d, big_d)],
        Family::Perceptron { hidden } => {
            let mut shapes = Vec::with_capacity(hidden.len() + 1);
            let mut fan_in = d;
            for &w in hidden {
                shapes.push((w, fan_in, w));
                fan_in = w;
            }
            shapes.push((big_d, fan_in + d, big_d));
            shapes
        }
        Family::Basis1d { degree, .. } => vec![(degree + 1, big_d, 0)],
    }
}

pub fn param_count(family: &Family, d: usize, big_d: usize) -> usize {
    block_shapes(family, d, big_d).iter().map(|(r, c, b)| r * c + b).sum()
}

impl EmbeddingModel {
    pub fn new(family: Family, latent_dim: usize, ambient_dim: usize, theta: Vec<f64>) -> Result<Self, EmbeddingError> {
        if latent_dim == 0 || ambient_dim == 0 {
            return Err(EmbeddingError::Dimension("dimensions must be at least 1".into()));
        }
        if latent_dim > ambient_dim {
            return Err(EmbeddingError::Dimension(format!(
                "latent dimension {latent_dim} exceeds ambient dimension {ambient_dim}"
            )));
        }
        match &family {
            Family::Perceptron { hidden } if hidden.iter().any(|w| *w == 0) => {
                return Err(EmbeddingError::Invalid("hidden layers need positive widths".into()))
            }
            Family::Basis1d { basis, .. } => {
                if latent_dim != 1 {
                    return Err(EmbeddingError::Dimension("the basis family needs d = 1".into()));
                }
                if let Basis::Hermite { scale } = basis {
                    if !(*scale > 0.0 && scale.is_finite()) {
                        return Err(EmbeddingError::Invalid(format!(
                            "Hermite scale must be positive, got {scale}"
                        )));
                    }
                }
            }
            _ => {}
        }
        let want = param_count(&family, latent_dim, ambient_dim);
        if theta.len() != want {
            return Err(EmbeddingError::Dimension(format!(
                "expected {want} parameters, got {}",
                theta.len()
            )));
        }
        if theta.iter().any(|v| !v.is_finite()) {
            return Err(EmbeddingError::Invalid("non-finite parameter".into()));
        }
        Ok(Self {
            family,
            latent_dim,
            ambient_dim,
            theta,
            precompose: None,
        })
    }

    /// `φ(z) = A z + b`.
    pub fn linear(a: &Matrix, b: &[f64]) -> Result<Self, EmbeddingError> {
        if b.len() != a.rows() {
            return Err(EmbeddingError::Dimension(format!(
                "bias has length {}, expected {}",
                b.len(),
                a.rows()
            )));
        }
        let mut theta = a.as_slice().to_vec();
        theta.extend_from_slice(b);
        Self::new(Family::Linear, a.cols(), a.rows(), theta)
    }

    /// Basis family from per-order coefficient vectors `c_n ∈ R^D`.
    pub fn basis_1d(basis: Basis, coefficients: &[Vec<f64>]) -> Result<Self, EmbeddingError> {
        let big_d = coefficients.first().map_or(0, Vec::len);
        if coefficients.is_empty() || coefficients.iter().any(|c| c.len() != big_d) {
            return Err(EmbeddingError::Dimension(
                "coefficient vectors must share a length".into(),
            ));
        }
        let theta = coefficients.concat();
        Self::new(
            Family::Basis1d {
                basis,
                degree: coefficients.len() - 1,
            },
            1,
            big_d,
            theta,
        )
    }

    /// Seeded initialization. Linear maps get singular values in
    /// `[0.5, 1.5]`; perceptrons get variance-preserving hidden weights,
    /// a readout scaled by 0.1 and an identity skip on the first `d`
    /// outputs; basis maps start as a random line. Biases start at `offset`.
    pub fn random(
        family: Family,
        latent_dim: usize,
        ambient_dim: usize,
        offset: &[f64],
        seed: u64,
    ) -> Result<Self, EmbeddingError> {
        Self::random_with_slope(family, latent_dim, ambient_dim, offset, 1.0, seed)
    }

    /// As [`EmbeddingModel::random`], with the linear path (the linear map,
    /// the perceptron skip or the basis line) scaled by `slope`.
    pub fn random_with_slope(
        family: Family,
        latent_dim: usize,
        ambient_dim: usize,
        offset: &[f64],
        slope: f64,
        seed: u64,
    ) -> Result<Self, EmbeddingError> {
        if !(slope > 0.0 && slope.is_finite()) {
            return Err(EmbeddingError::Invalid(format!(
                "initial slope must be positive, got {slope}"
            )));
        }
        if offset.len() != ambient_dim {
            return Err(EmbeddingError::Dimension(format!(
                "offset has length {}, expected {ambient_dim}",
                offset.len()
            )));
        }
        if latent_dim == 0 || latent_dim > ambient_dim {
            return Err(EmbeddingError::Dimension(format!(
                "need 1 <= d <= D, got d = {latent_dim}, D = {ambient_dim}"
            )));
        }
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let theta = match &family {
            Family::Linear => {
                let a = random_well_conditioned(ambient_dim, latent_dim, &mut rng)?;
                let mut t = a.scale(slope).into_vec();
                t.extend_from_slice(offset);
                t
            }
            Family::Perceptron { hidden } => {
                let normal = Normal::new(0.0, 1.0).expect("unit normal");
                let mut t = Vec::new();
                let mut fan_in = latent_dim;
                for &w in hidden {
                    let s = 1.0 / (fan_in as f64).sqrt();
                    t.extend((0..w * fan_in).map(|_| s * normal.sample(&mut rng)));
                    t.extend(std::iter::repeat_n(0.0, w));
                    fan_in = w;
                }
                let s = 0.1 / (fan_in as f64).sqrt();
                for i in 0..ambient_dim {
                    t.extend((0..fan_in).map(|_| s * normal.sample(&mut rng)));
                    t.extend((0..latent_dim).map(|j| if i == j { slope } else { 0.0 }));
                }
                t.extend_from_slice(offset);
                t
            }
            Family::Basis1d { degree, .. } => {
                let a = random_well_conditioned(ambient_dim, 1, &mut rng)?;
                let mut t = vec![0.0; (degree + 1) * ambient_dim];
                t[..ambient_dim].copy_from_slice(offset);
                if *degree >= 1 {
                    t[ambient_dim..2 * ambient_dim].copy_from_slice(a.scale(slope).as_slice());
                }
                t
            }
        };
        Self::new(family, latent_dim, ambient_dim, theta)
    }

    /// Fresh seeded parameters of the same family, keeping the current
    /// output offset and initial slope.
    pub fn reinitialized(&self, seed: u64, slope: f64) -> Result<Self, EmbeddingError> {
        let offset = self.eval(&vec![0.0; self.latent_dim]);
        let mut m = Self::random_with_slope(
            self.family.clone(),
            self.latent_dim,
            self.ambient_dim,
            &offset,
            slope,
            seed,
        )?;
        m.precompose = self.precompose.clone();
        Ok(m)
    }

    /// `φ ∘ g` for an invertible affine `g` on latent space.
    pub fn precomposed(&self, g: &AffineMap) -> Result<Self, EmbeddingError> {
        if g.dim() != self.latent_dim {
            return Err(EmbeddingError::Dimension(format!(
                "reparameterization acts on R^{}, latent space is R^{}",
                g.dim(),
                self.latent_dim
            )));
        }
        if g.is_identity() {
            return Ok(self.clone());
        }
        let composed = match &self.precompose {
            None => g.clone(),
            Some(h) => {
                // (φ∘h)∘g = φ∘(h∘g)
                let lin = h.linear().matmul(g.linear());
                let shift = h.apply(g.shift());
                AffineMap::new(lin, shift)?
            }
        };
        let mut m = self.clone();
        m.precompose = Some(composed);
        Ok(m)
    }

    pub fn family(&self) -> &Family {
        &self.family
    }

    pub fn latent_dim(&self) -> usize {
        self.latent_dim
    }

    pub fn ambient_dim(&self) -> usize {
        self.ambient_dim
    }

    pub fn theta(&self) -> &[f64] {
        &self.theta
    }

    pub fn precomposition(&self) -> Option<&AffineMap> {
        self.precompose.as_ref()
    }

    pub fn param_count(&self) -> usize {
        self.theta.len()
    }

    pub fn with_theta(&self, theta: Vec<f64>) -> Result<Self, EmbeddingError> {
        let mut m = Self::new(self.family.clone(), self.latent_dim, self.ambient_dim, theta)?;
        m.precompose = self.precompose.clone();
        Ok(m)
    }

    /// Structured view of θ, one block per layer.
    pub fn unflatten(&self) -> Vec<ParamBlock> {
        let mut at = 0;
        block_shapes(&self.family, self.latent_dim, self.ambient_dim)
            .into_iter()
            .map(|(r, c, b)| {
                let weight = Matrix::from_row_major(r, c, self.theta[at..at + r * c].to_vec()).expect("checked shape");
                at += r * c;
                let bias = self.theta[at..at + b].to_vec();
                at += b;
                ParamBlock { weight, bias }
            })
            .collect()
    }

    /// Inverse of [`Self::unflatten`].
    pub fn flatten(&self, blocks: &[ParamBlock]) -> Result<Vec<f64>, EmbeddingError> {
        let shapes = block_shapes(&self.family, self.latent_dim, self.ambient_dim);
        if blocks.len() != shapes.len() {
            return Err(EmbeddingError::Dimension(format!(
                "expected {} blocks, got {}",
                shapes.len(),
                blocks.len()
            )));
        }
        let mut theta = Vec::with_capacity(self.theta.len());
        for (blk, (r, c, b)) in blocks.iter().zip(shapes) {
            if blk.weight.shape() != (r, c) || blk.bias.len() != b {
                return Err(EmbeddingError::Dimension("block shape mismatch".into()));
            }
            theta.extend_from_slice(blk.weight.as_slice());
            theta.extend_from_slice(&blk.bias);
        }
        Ok(theta)
    }

    /// Basis coefficients `c_n` (rows of the single block).
    pub fn basis_coefficients(&self) -> Option<Vec<Vec<f64>>> {
        match self.family {
            Family::Basis1d { .. } => {
                let blk = &self.unflatten()[0];
                Some((0..blk.weight.rows()).map(|n| blk.weight.row(n).to_vec()).collect())
            }
            _ => None,
        }
    }

    /// Effective linear part and offset for the linear family, including
    /// any precomposition.
    pub fn linear_parts(&self) -> Option<(Matrix, Vec<f64>)> {
        match self.family {
            Family::Linear => {
                let blk = self.unflatten().remove(0);
                Some(match &self.precompose {
                    None => (blk.weight, blk.bias),
                    Some(g) => {
                        let a = blk.weight.matmul(g.linear());
                        let b = blk
                            .weight
                            .matvec(g.shift())
                            .iter()
                            .zip(&blk.bias)
                            .map(|(x, y)| x + y)
                            .collect();
                        (a, b)
                    }
                })
            }
            _ => None,
        }
    }

    /// Value and row-major `D×d` Jacobian at `z` for parameters `theta`.
    pub fn forward<T: Real>(&self, theta: &[T], z: &[f64]) -> (Vec<T>, Vec<T>) {
        assert_eq!(z.len(), self.latent_dim, "latent point has wrong dimension");
        assert_eq!(theta.len(), self.theta.len(), "parameter vector has wrong length");
        match &self.precompose {
            None => self.forward_raw(theta, z),
            Some(g) => {
                let (phi, jac) = self.forward_raw(theta, &g.apply(z));
                let (big_d, d) = (self.ambient_dim, self.latent_dim);
                let m = g.linear();
                let mut out = Vec::with_capacity(big_d * d);
                for i in 0..big_d {
                    for j in 0..d {
                        let col: Vec<f64> = (0..d).map(|k| m[(k, j)]).collect();
                        out.push(T::dot_const(&col, &jac[i * d..(i + 1) * d]));
                    }
                }
                (phi, out)
            }
        }
    }

    fn forward_raw<T: Real>(&self, theta: &[T], z: &[f64]) -> (Vec<T>, Vec<T>) {
        let (d, big_d) = (self.latent_dim, self.ambient_dim);
        match &self.family {
            Family::Linear => {
                let a = &theta[..big_d * d];
                let b = &theta[big_d * d..];
                let zc: Vec<T> = z.iter().map(|v| T::cst(*v)).collect();
                let phi = (0..big_d).map(|i| T::dot(&a[i * d..(i + 1) * d], &zc) + b[i]).collect();
                (phi, a.to_vec())
            }
            Family::Perceptron { hidden } => {
                let mut at = 0;
                let mut h: Vec<T> = z.iter().map(|v| T::cst(*v)).collect();
                // dh[m * d + j] = ∂h_m / ∂z_j
                let mut dh: Vec<T> = (0..d * d)
                    .map(|k| T::cst(if k / d == k % d { 1.0 } else { 0.0 }))
                    .collect();
                for (layer, &w) in hidden.iter().enumerate() {
                    let fan_in = h.len();
                    let weights = &theta[at..at + w * fan_in];
                    let bias = &theta[at + w * fan_in..at + w * fan_in + w];
                    at += w * fan_in + w;
                    let mut next = Vec::with_capacity(w);
                    let mut dnext = Vec::with_capacity(w * d);
                    let dh_cols: Vec<Vec<T>> = (0..d).map(|j| (0..fan_in).map(|m| dh[m * d + j]).collect()).collect();
                    for k in 0..w {
                        let row = &weights[k * fan_in..(k + 1) * fan_in];
                        let act = if layer == 0 {
                            T::dot_const(z, row) + bias[k]
                        } else {
                            T::dot(row, &h) + bias[k]
                        };
                        let hk = act.tanh();
                        let slope = -(hk * hk) + 1.0;
                        for (j, col) in dh_cols.iter().enumerate() {
                            // the first layer sees z directly, so its Jacobian is the weight row
                            let pre = if layer == 0 { row[j] } else { T::dot(row, col) };
                            dnext.push(slope * pre);
                        }
                        next.push(hk);
                    }
                    h = next;
                    dh = dnext;
                }
                let fan_in = h.len();
                let width = fan_in + d;
                let weights = &theta[at..at + big_d * width];
                let bias = &theta[at + big_d * width..];
                let mut features = h.clone();
                features.extend(z.iter().map(|v| T::cst(*v)));
                let phi = (0..big_d)
                    .map(|i| T::dot(&weights[i * width..(i + 1) * width], &features) + bias[i])
                    .collect();
                let dh_cols: Vec<Vec<T>> = (0..d).map(|j| (0..fan_in).map(|m| dh[m * d + j]).collect()).collect();
                let mut jac = Vec::with_capacity(big_d * d);
                for i in 0..big_d {
                    let row = &weights[i * width..(i + 1) * width];
                    for (j, col) in dh_cols.iter().enumerate() {
                        jac.push(T::dot(&row[..fan_in], col) + row[fan_in + j]);
                    }
                }
                (phi, jac)
            }
            Family::Basis1d { basis, degree } => {
                let (f, df) = basis_features(basis, *degree, z[0]);
                let phi = (0..big_d)
                    .map(|i| {
                        let c: Vec<T> = (0..=*degree).map(|n| theta[n * big_d + i]).collect();
                        T::dot_const(&f, &c)
                    })
                    .collect();
                let jac = (0..big_d)
                    .map(|i| {
                        let c: Vec<T> = (0..=*degree).map(|n| theta[n * big_d + i]).collect();
                        T::dot_const(&df, &c)
                    })
                    .collect();
                (phi, jac)
            }
        }
    }

    pub fn eval(&self, z: &[f64]) -> Vec<f64> {
        self.forward(&self.theta, z).0
    }

    pub fn jacobian(&self, z: &[f64]) -> Matrix {
        let (_, jac) = self.forward(&self.theta, z);
        Matrix::from_row_major(self.ambient_dim, self.latent_dim, jac).expect("shape fixed by family")
    }

    pub fn eval_with_jacobian(&self, z: &[f64]) -> (Vec<f64>, Matrix) {
        let (phi, jac) = self.forward(&self.theta, z);
        (
            phi,
            Matrix::from_row_major(self.ambient_dim, self.latent_dim, jac).expect("shape fixed by family"),
        )
    }

    /// Smallest singular value of the Jacobian at `z`.
    pub fn min_singular_value(&self, z: &[f64]) -> f64 {
        *singular_values(&self.jacobian(z)).last().expect("d >= 1")
    }

    /// Looks for distant latent points that land on nearly the same
    /// ambient point. Curves are probed segment against segment, surfaces
    /// on a grid.
    pub fn injectivity_probe(
        &self,
        prior: &PriorModel,
        n: usize,
        seed: u64,
    ) -> Result<InjectivityReport, EmbeddingError> {
        let d = self.latent_dim;
        if d > 2 || prior.dim() != d {
            return Err(EmbeddingError::Dimension(format!(
                "the probe handles d = 1 or d = 2 with a matching prior, got d = {d}, prior dim {}",
                prior.dim()
            )));
        }
        let n = n.max(4);
        let latent: Vec<Vec<f64>> = if d == 1 {
            let (lo, hi) = match (prior.spec(), prior.central_interval(0.99)) {
                (crate::models::PriorSpec::Uniform { lower, upper }, _) => (lower[0], upper[0]),
                (_, Ok(v)) => v,
                (_, Err(_)) => {
                    let mut s: Vec<f64> = prior.sample(n, seed).into_iter().map(|z| z[0]).collect();
                    s.sort_by(f64::total_cmp);
                    (s[0], s[n - 1])
                }
            };
            (0..n)
                .map(|k| vec![lo + (hi - lo) * k as f64 / (n - 1) as f64])
                .collect()
        } else {
            let m = (n as f64).sqrt().ceil() as usize;
            match (prior.gaussian_sigma(), prior.spec()) {
                (Some(s), _) => grid_2d(m, [(-3.0 * s, 3.0 * s), (-3.0 * s, 3.0 * s)]),
                (None, crate::models::PriorSpec::Uniform { lower, upper }) => {
                    grid_2d(m, [(lower[0], upper[0]), (lower[1], upper[1])])
                }
                _ => prior.sample(m * m, seed),
            }
        };
        let ambient: Vec<Vec<f64>> = latent.iter().map(|z| self.eval(z)).collect();
        let lat_scale = rms_spread(&latent);
        let amb_scale = rms_spread(&ambient);
        if !(lat_scale > 0.0 && amb_scale > 0.0) {
            return Err(EmbeddingError::Invalid(
                "probe points collapse to a single location".into(),
            ));
        }
        let mut report = InjectivityReport {
            latent_scale: lat_scale,
            ambient_scale: amb_scale,
            ..InjectivityReport::default()
        };
        report.min_distance_ratio = f64::INFINITY;
        let mut consider = |za: &[f64], zb: &[f64], amb: f64, lat: f64| {
            report.checked_pairs += 1;
            let ratio = (amb / amb_scale) / (lat / lat_scale);
            if ratio < report.min_distance_ratio {
                report.min_distance_ratio = ratio;
            }
            if amb / amb_scale < INJECTIVITY_AMBIENT_TOL && lat / lat_scale > INJECTIVITY_LATENT_GAP {
                report.flagged.push(FlaggedPair {
                    z_a: za.to_vec(),
                    z_b: zb.to_vec(),
                    ambient_distance: amb,
                });
            }
        };
        if d == 1 {
            let segs = latent.len() - 1;
            for a in 0..segs {
                for b in a + 2..segs {
                    let (dist, s, t) = segment_distance(&ambient[a], &ambient[a + 1], &ambient[b], &ambient[b + 1]);
                    let za = latent[a][0] + s * (latent[a + 1][0] - latent[a][0]);
                    let zb = latent[b][0] + t * (latent[b + 1][0] - latent[b][0]);
                    consider(&[za], &[zb], dist, (zb - za).abs());
                }
            }
        } else {
            for a in 0..latent.len() {
                for b in a + 1..latent.len() {
                    let amb = dist(&ambient[a], &ambient[b]);
                    let lat = dist(&latent[a], &latent[b]);
                    consider(&latent[a], &latent[b], amb, lat);
                }
            }
        }
        Ok(report)
    }
}

/// Ambient distances below this fraction of the ambient spread count as
/// coincident.
pub const INJECTIVITY_AMBIENT_TOL: f64 = 1e-3;
/// Latent gaps (in units of the latent spread) above which coincidence is
/// a self-intersection rather than a neighbor.
pub const INJECTIVITY_LATENT_GAP: f64 = 0.5;

#[derive(Clone, Debug, Default, PartialEq, Serialize)]
pub struct FlaggedPair {
    pub z_a: Vec<f64>,
    pub z_b: Vec<f64>,
    pub ambient_distance: f64,
}

#[derive(Clone, Debug, Default, PartialEq, Serialize)]
pub struct InjectivityReport {
    /// Minimum over probed pairs of normalized ambient over normalized
    /// latent distance.
    pub min_distance_ratio: f64,
    pub latent_scale: f64,
    pub ambient_scale: f64,
    pub checked_pairs: usize,
    pub flagged: Vec<FlaggedPair>,
}

impl InjectivityReport {
    pub fn is_clean(&self) -> bool {
        self.flagged.is_empty()
    }
}

fn random_well_conditioned(rows: usize, cols: usize, rng: &mut ChaCha8Rng) -> Result<Matrix, EmbeddingError> {
    let normal = Normal::new(0.0, 1.0).expect("unit normal");
    let draw = |r: usize, c: usize, rng: &mut ChaCha8Rng| {
        Matrix::from_row_major(r, c, (0..r * c).map(|_| normal.sample(rng)).collect())
    };
    let (u, _) = qr_thin(&draw(rows, cols, rng)?)?;
    let (v, _) = qr_thin(&draw(cols, cols, rng)?)?;
    let spread = Uniform::new_inclusive(0.5, 1.5).expect("valid range");
    let s: Vec<f64> = (0..cols).map(|_| spread.sample(rng)).collect();
    Ok(u.matmul(&Matrix::diag(&s)).matmul(&v.transpose()))
}

/// Features `f_n(z)` and their derivatives for `n = 0..=degree`.
fn basis_features(basis: &Basis, degree: usize, z: f64) -> (Vec<f64>, Vec<f64>) {
    let mut f = vec![0.0; degree + 1];
    let mut df = vec![0.0; degree + 1];
    match basis {
        Basis::Hermite { scale } => {
            let x = z / scale;
            f[0] = 1.0;
            if degree >= 1 {
                f[1] = x;
            }
            for n in 1..degree {
                f[n + 1] = x * f[n] - n as f64 * f[n - 1];
            }
            // He_n' = n He_{n-1}
            for n in 1..=degree {
                df[n] = n as f64 * f[n - 1] / scale;
            }
        }
        Basis::Monomial => {
            f[0] = 1.0;
            for n in 1..=degree {
                f[n] = f[n - 1] * z;
                df[n] = n as f64 * f[n - 1];
            }
        }
    }
    (f, df)
}

fn grid_2d(m: usize, bounds: [(f64, f64); 2]) -> Vec<Vec<f64>> {
    let m = m.max(2);
    let axis =
        |(lo, hi): (f64, f64)| -> Vec<f64> { (0..m).map(|k| lo + (hi - lo) * k as f64 / (m - 1) as f64).collect() };
    let (a, b) = (axis(bounds[0]), axis(bounds[1]));
    a.iter().flat_map(|x| b.iter().map(move |y| vec![*x, *y])).collect()
}

fn dist(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| (x - y) * (x - y)).sum::<f64>().sqrt()
}

fn rms_spread(points: &[Vec<f64>]) -> f64 {
    let n = points.len() as f64;
    let dim = points[0].len();
    let mean: Vec<f64> = (0..dim).map(|i| points.iter().map(|p| p[i]).sum::<f64>() / n).collect();
    (points.iter().map(|p| dist(p, &mean).powi(2)).sum::<f64>() / n).sqrt()
}

/// Closest distance between segments `[p0,p1]` and `[q0,q1]`, with the
/// segment parameters of the closest points.
fn segment_distance(p0: &[f64], p1: &[f64], q0: &[f64], q1: &[f64]) -> (f64, f64, f64) {
    let u: Vec<f64> = p1.iter().zip(p0).map(|(a, b)| a - b).collect();
    let v: Vec<f64> = q1.iter().zip(q0).map(|(a, b)| a - b).collect();
    let w: Vec<f64> = p0.iter().zip(q0).map(|(a, b)| a - b).collect();
    let dot = |x: &[f64], y: &[f64]| x.iter().zip(y).map(|(a, b)| a * b).sum::<f64>();
    let (a, b, c, dd, e) = (dot(&u, &u), dot(&u, &v), dot(&v, &v), dot(&u, &w), dot(&v, &w));
    let denom = a * c - b * b;
    let mut s = if denom > 1e-300 {
        ((b * e - c * dd) / denom).clamp(0.0, 1.0)
    } else {
        0.0
    };
    let mut t = if c > 0.0 {
        ((b * s + e) / c).clamp(0.0, 1.0)
    } else {
        0.0
    };
    if a > 0.0 {
        s = ((b * t - dd) / a).clamp(0.0, 1.0);
        t = if c > 0.0 {
            ((b * s + e) / c).clamp(0.0, 1.0)
        } else {
            0.0
        };
    }
    let gap: Vec<f64> = (0..u.len()).map(|i| w[i] + s * u[i] - t * v[i]).collect();
    (dot(&gap, &gap).sqrt(), s, t)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::numerics::{central_gradient, half_logdet_gram};

    fn fd_jacobian(m: &EmbeddingModel, z: &[f64], h: f64) -> Matrix {
        let (big_d, d) = (m.ambient_dim(), m.latent_dim());
        let mut out = Matrix::zeros(big_d, d);
        for i in 0..big_d {
            let g = central_gradient(|x| m.eval(x)[i], z, h);
            for j in 0..d {
                out[(i, j)] = g[j];
            }
        }
        out
    }

    #[test]
    fn linear_examples() {
        let m = EmbeddingModel::linear(&Matrix::column(&[2.0, 0.0]), &[0.0, 0.0]).unwrap();
        assert_eq!(m.eval(&[1.5]), vec![3.0, 0.0]);
        assert_eq!(m.jacobian(&[0.3]), Matrix::column(&[2.0, 0.0]));
        let l1 = half_logdet_gram(&m.jacobian(&[-4.0])).unwrap();
        let l2 = half_logdet_gram(&m.jacobian(&[9.0])).unwrap();
        assert_eq!(l1, l2);
    }

    #[test]
    fn zero_readout_is_constant() {
        let family = Family::Perceptron { hidden: vec![5, 4] };
        let m = EmbeddingModel::random(family, 2, 3, &[0.0; 3], 3).unwrap();
        let mut blocks = m.unflatten();
        let last = blocks.last_mut().unwrap();
        last.weight = Matrix::zeros(3, 4 + 2);
        last.bias = vec![1.0, -2.0, 0.5];
        let m = m.with_theta(m.flatten(&blocks).unwrap()).unwrap();
        assert_eq!(m.eval(&[0.7, -1.1]), vec![1.0, -2.0, 0.5]);
        assert_eq!(m.jacobian(&[0.7, -1.1]).max_abs(), 0.0);
    }

    #[test]
    fn linear_basis_is_exact() {
        let m = EmbeddingModel::basis_1d(Basis::Hermite { scale: 1.0 }, &[vec![0.0, 0.0], vec![1.5, -2.0]]).unwrap();
        assert_eq!(m.eval(&[0.75]), vec![1.125, -1.5]);
    }

    #[test]
    fn taylor_circle_has_unit_speed() {
        let degree = 30;
        let mut coeffs = vec![vec![0.0, 0.0]; degree + 1];
        let mut fact = 1.0;
        for n in 0..=degree {
            if n > 0 {
                fact *= n as f64;
            }
            let sign = if (n / 2) % 2 == 0 { 1.0 } else { -1.0 };
            if n % 2 == 0 {
                coeffs[n][0] = sign / fact;
            } else {
                coeffs[n][1] = sign / fact;
            }
        }
        let m = EmbeddingModel::basis_1d(Basis::Monomial, &coeffs).unwrap();
        for k in 0..=60 {
            let z = -3.0 + 0.1 * k as f64;
            let j = m.jacobian(&[z]);
            assert!((j[(0, 0)] + z.sin()).abs() < 1e-9);
            assert!((j[(1, 0)] - z.cos()).abs() < 1e-9);
        }
    }

    #[test]
    fn jacobians_match_finite_differences() {
        let families = [
            (Family::Linear, 2, 3),
            (Family::Perceptron { hidden: vec![6, 5] }, 2, 3),
            (Family::Perceptron { hidden: vec![4] }, 1, 2),
            (
                Family::Basis1d {
                    basis: Basis::Hermite { scale: 1.3 },
                    degree: 5,
                },
                1,
                2,
            ),
        ];
        for (family, d, big_d) in families {
            for seed in 0..25 {
                let m = EmbeddingModel::random(family.clone(), d, big_d, &vec![0.1; big_d], seed).unwrap();
                let mut theta = m.theta().to_vec();
                for (k, t) in theta.iter_mut().enumerate() {
                    *t += 0.05 * ((k as f64 + seed as f64) * 0.7).sin();
                }
                let m = m.with_theta(theta).unwrap();
                let z: Vec<f64> = (0..d).map(|j| (seed as f64 * 0.37 + j as f64).sin()).collect();
                let exact = m.jacobian(&z);
                let fd = fd_jacobian(&m, &z, 1e-5);
                let err = exact.sub(&fd).max_abs() / exact.max_abs().max(1e-8);
                assert!(err < 1e-4, "{family:?} seed {seed}: {err:e}");
            }
        }
    }

    #[test]
    fn parameter_round_trip() {
        let m = EmbeddingModel::random(Family::Perceptron { hidden: vec![3, 2] }, 1, 2, &[0.5, 0.5], 11).unwrap();
        assert_eq!(m.flatten(&m.unflatten()).unwrap(), m.theta());
    }

    #[test]
    fn random_linear_is_well_conditioned() {
        for seed in 0..20 {
            let m = EmbeddingModel::random(Family::Linear, 2, 5, &[0.0; 5], seed).unwrap();
            let s = singular_values(&m.jacobian(&[0.0, 0.0]));
            assert!(s.iter().all(|v| (0.5 - 1e-12..=1.5 + 1e-12).contains(v)), "{s:?}");
        }
    }

    #[test]
    fn precomposition_chains() {
        let m = EmbeddingModel::random(Family::Perceptron { hidden: vec![4] }, 2, 2, &[0.0; 2], 1).unwrap();
        let g = AffineMap::new(
            Matrix::from_rows(&[vec![2.0, 1.0], vec![0.0, 1.0]]).unwrap(),
            vec![0.5, -1.0],
        )
        .unwrap();
        let mg = m.precomposed(&g).unwrap();
        let z = [0.3, -0.2];
        assert_eq!(mg.eval(&z), m.eval(&g.apply(&z)));
        let want = m.jacobian(&g.apply(&z)).matmul(g.linear());
        assert!(mg.jacobian(&z).sub(&want).max_abs() < 1e-15);
        assert_eq!(m.precomposed(&AffineMap::identity(2)).unwrap(), m);
    }

    #[test]
    fn probe_flags_double_cover_only() {
        let q = PriorModel::uniform(vec![0.0], vec![4.0 * std::f64::consts::PI]).unwrap();
        let lin = EmbeddingModel::linear(&Matrix::column(&[1.0, 0.5]), &[0.0, 0.0]).unwrap();
        assert!(lin.injectivity_probe(&q, 200, 0).unwrap().is_clean());

        // x ↦ (cos 2πx, sin 2πx) on [0, 2] by Taylor series: a double cover
        let degree = 60;
        let scale = 2.0 * std::f64::consts::PI;
        let mut coeffs = vec![vec![0.0, 0.0]; degree + 1];
        let mut term = 1.0;
        for n in 0..=degree {
            if n > 0 {
                term *= scale / n as f64;
            }
            let sign = if (n / 2) % 2 == 0 { 1.0 } else { -1.0 };
            coeffs[n][n % 2] = sign * term;
        }
        let circle = EmbeddingModel::basis_1d(Basis::Monomial, &coeffs).unwrap();
        let q2 = PriorModel::uniform(vec![0.0], vec![2.0]).unwrap();
        let report = circle.injectivity_probe(&q2, 400, 0).unwrap();
        assert!(!report.is_clean());
    }
}
