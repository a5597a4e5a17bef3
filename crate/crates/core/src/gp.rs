//! Symmetry-constrained Gaussian-process machinery.
//!
//! The kernel is a squared exponential symmetrized over the sign flip,
//! k(x, x') = (k0(x, x') + k0(x, -x')) / 2, so every sample path with an
//! even prior mean is an even function. The prior mean lives on a grid of
//! symmetrized piecewise-linear hat functions. Latent dimensions are modeled
//! as independent GPs sharing the kernel, each with its own observation
//! noise variance.

use nalgebra::{Cholesky, DMatrix, DVector, Dyn};
use std::path::Path;

use crate::error::{Error, Result};

const LN_2PI: f64 = 1.837877066409345483560659472811;
/// Jitter escalation ladder, relative to the signal variance.
const JITTER_STEPS: [f64; 5] = [0.0, 1e-10, 1e-9, 1e-8, 1e-6];

/// Kernel hyperparameters. `lengthscales` are per-axis distances in nm;
/// `noise_variance` is the per-latent-dimension observation noise.
#[derive(Debug, Clone, PartialEq)]
pub struct KernelConfig {
    pub signal_variance: f64,
    pub lengthscales: Vec<f64>,
    pub noise_variance: Vec<f64>,
}

impl KernelConfig {
    pub fn validate(&self) -> Result<()> {
        if !(self.signal_variance > 0.0) {
            return Err(Error::Config("signal variance must be > 0".into()));
        }
        if self.lengthscales.iter().any(|l| !(*l > 0.0)) {
            return Err(Error::Config("lengthscales must be > 0".into()));
        }
        if self.noise_variance.is_empty() || self.noise_variance.iter().any(|v| !(*v > 0.0)) {
            return Err(Error::Config("noise variances must be > 0".into()));
        }
        Ok(())
    }

    fn k0(&self, x: &[f64], y: &[f64]) -> f64 {
        let mut q = 0.0;
        for d in 0..x.len() {
            let r = (x[d] - y[d]) / self.lengthscales[d];
            q += r * r;
        }
        self.signal_variance * (-0.5 * q).exp()
    }
}

/// Symmetrized kernel k(x, x') = (k0(x, x') + k0(x, -x')) / 2.
pub fn kernel_eval(cfg: &KernelConfig, x: &[f64], y: &[f64]) -> f64 {
    debug_assert_eq!(x.len(), y.len());
    let neg: Vec<f64> = y.iter().map(|v| -v).collect();
    0.5 * (cfg.k0(x, y) + cfg.k0(x, &neg))
}

// ---------------------------------------------------------------------------
// Prior mean on a symmetrized hat basis
// ---------------------------------------------------------------------------

/// Even prior mean: least-squares weights on a tensor grid of symmetrized
/// piecewise-linear hats, one weight row per latent dimension.
#[derive(Debug, Clone, PartialEq)]
pub struct PriorMean {
    /// Knot positions per axis (uniformly spaced, symmetric about zero).
    pub knots: Vec<Vec<f64>>,
    /// latent_dim x m weight matrix, m = product of per-axis knot counts.
    pub weights: DMatrix<f64>,
}

impl PriorMean {
    /// Zero mean over a symmetric uniform grid: `knots_per_axis` knots
    /// spanning [-extent, extent] on each of `n` axes.
    pub fn zero(n: usize, latent_dim: usize, knots_per_axis: usize, extent: f64) -> Self {
        let axis = symmetric_knots(knots_per_axis, extent);
        let m = knots_per_axis.pow(n as u32);
        Self { knots: vec![axis; n], weights: DMatrix::zeros(latent_dim, m) }
    }

    pub fn n(&self) -> usize {
        self.knots.len()
    }

    pub fn latent_dim(&self) -> usize {
        self.weights.nrows()
    }

    pub fn basis_size(&self) -> usize {
        self.weights.ncols()
    }

    /// Raw (unsymmetrized) tensor hat basis at a point.
    fn hat_basis(&self, x: &[f64]) -> DVector<f64> {
        debug_assert_eq!(x.len(), self.n());
        let per_axis: Vec<Vec<f64>> = self
            .knots
            .iter()
            .zip(x)
            .map(|(knots, &xi)| axis_hats(knots, xi))
            .collect();
        let m = self.basis_size();
        let mut out = DVector::zeros(m);
        for j in 0..m {
            let mut rest = j;
            let mut v = 1.0;
            // Row-major unravel over axes, last axis fastest.
            for axis in (0..self.n()).rev() {
                let g = self.knots[axis].len();
                v *= per_axis[axis][rest % g];
                rest /= g;
            }
            out[j] = v;
        }
        out
    }

    /// Symmetrized basis phi_sym(x) = (phi(x) + phi(-x)) / 2.
    pub fn basis_sym(&self, x: &[f64]) -> DVector<f64> {
        let neg: Vec<f64> = x.iter().map(|v| -v).collect();
        (self.hat_basis(x) + self.hat_basis(&neg)) * 0.5
    }

    /// Evaluate the mean function; even in x by construction.
    pub fn eval(&self, x: &[f64]) -> DVector<f64> {
        &self.weights * self.basis_sym(x)
    }
}

pub fn symmetric_knots(count: usize, extent: f64) -> Vec<f64> {
    assert!(count >= 2);
    let step = 2.0 * extent / (count - 1) as f64;
    (0..count).map(|i| -extent + step * i as f64).collect()
}

/// Piecewise-linear hat values of every knot on one axis at coordinate `x`.
fn axis_hats(knots: &[f64], x: f64) -> Vec<f64> {
    let h = if knots.len() > 1 { knots[1] - knots[0] } else { 1.0 };
    knots
        .iter()
        .map(|&c| {
            let u = ((x - c) / h).abs();
            if u < 1.0 {
                1.0 - u
            } else {
                0.0
            }
        })
        .collect()
}

/// Ridge used on the prior-mean normal equations.
const MEAN_RIDGE: f64 = 1e-8;

/// Least-squares fit of the symmetrized hat weights to labeled latent data.
pub fn fit_prior_mean(
    states: &[Vec<f64>],
    latents: &[DVector<f64>],
    knots_per_axis: usize,
    extent: f64,
) -> Result<PriorMean> {
    if states.is_empty() || states.len() != latents.len() {
        return Err(Error::Config("prior mean fit needs aligned, non-empty data".into()));
    }
    let n = states[0].len();
    let latent_dim = latents[0].len();
    let mut mean = PriorMean::zero(n, latent_dim, knots_per_axis, extent);
    let m = mean.basis_size();
    let rows = states.len();
    let mut phi = DMatrix::zeros(rows, m);
    for (r, x) in states.iter().enumerate() {
        let b = mean.basis_sym(x);
        for c in 0..m {
            phi[(r, c)] = b[c];
        }
    }
    let mut normal = phi.transpose() * &phi;
    for i in 0..m {
        normal[(i, i)] += MEAN_RIDGE;
    }
    let chol = Cholesky::new(normal)
        .ok_or_else(|| Error::Numeric("singular normal equations in prior-mean fit".into()))?;
    for d in 0..latent_dim {
        let zd = DVector::from_fn(rows, |r, _| latents[r][d]);
        let rhs = phi.transpose() * zd;
        let w = chol.solve(&rhs);
        for c in 0..m {
            mean.weights[(d, c)] = w[c];
        }
    }
    Ok(mean)
}

// ---------------------------------------------------------------------------
// GP model and per-candidate computations
// ---------------------------------------------------------------------------

/// Kernel + even prior mean + latent dimension count.
#[derive(Debug, Clone)]
pub struct GpModel {
    pub kernel: KernelConfig,
    pub mean: PriorMean,
    pub latent_dim: usize,
}

impl GpModel {
    pub fn validate(&self) -> Result<()> {
        self.kernel.validate()?;
        if self.kernel.noise_variance.len() != self.latent_dim {
            return Err(Error::Config(format!(
                "noise variance has {} entries for latent dim {}",
                self.kernel.noise_variance.len(),
                self.latent_dim
            )));
        }
        if self.mean.latent_dim() != self.latent_dim {
            return Err(Error::Config("prior mean latent dim mismatch".into()));
        }
        Ok(())
    }
}

/// Trajectory points x0 + s(t) implied by a candidate initial state.
fn trajectory_points(candidate: &[f64], cumulative: &[Vec<f64>]) -> Vec<Vec<f64>> {
    cumulative
        .iter()
        .map(|s| candidate.iter().zip(s).map(|(a, b)| a + b).collect())
        .collect()
}

/// Gram matrix K[t, u] = k(x0 + s(t), x0 + s(u)).
pub fn gram_matrix(model: &GpModel, candidate: &[f64], cumulative: &[Vec<f64>]) -> DMatrix<f64> {
    let pts = trajectory_points(candidate, cumulative);
    let t1 = pts.len();
    let mut k = DMatrix::zeros(t1, t1);
    for i in 0..t1 {
        for j in 0..=i {
            let v = kernel_eval(&model.kernel, &pts[i], &pts[j]);
            k[(i, j)] = v;
            k[(j, i)] = v;
        }
    }
    k
}

/// Cholesky with jitter escalation. Returns the factorization and the number
/// of factorization attempts actually performed.
fn cholesky_with_jitter(
    base: &DMatrix<f64>,
    signal_variance: f64,
) -> Result<(Cholesky<f64, Dyn>, usize)> {
    let mut attempts = 0;
    for &rel in JITTER_STEPS.iter() {
        let mut m = base.clone();
        if rel > 0.0 {
            let jitter = rel * signal_variance;
            for i in 0..m.nrows() {
                m[(i, i)] += jitter;
            }
        }
        attempts += 1;
        if let Some(c) = Cholesky::new(m) {
            return Ok((c, attempts));
        }
    }
    Err(Error::Numeric(
        "covariance not positive definite after jitter escalation".into(),
    ))
}

/// Per-candidate GP posterior: one factorization per latent dimension over
/// the candidate's trajectory Gram matrix.
#[derive(Debug)]
pub struct CandidatePosterior<'m> {
    model: &'m GpModel,
    points: Vec<Vec<f64>>,
    /// Per-dimension Cholesky of K + Sigma_nu[d] I. Empty dataset => None.
    chols: Vec<Cholesky<f64, Dyn>>,
    /// Per-dimension (K + Sigma_nu I)^-1 (z_d - mu_d).
    alphas: Vec<DVector<f64>>,
    /// Number of Cholesky factorizations performed while building.
    pub factorizations: usize,
}

impl<'m> CandidatePosterior<'m> {
    /// Condition the GP on the latent dataset under one candidate.
    pub fn build(
        model: &'m GpModel,
        latents: &[DVector<f64>],
        cumulative: &[Vec<f64>],
        candidate: &[f64],
    ) -> Result<Self> {
        model.validate()?;
        if latents.len() != cumulative.len() {
            return Err(Error::Config("latents and cumulative inputs misaligned".into()));
        }
        let points = trajectory_points(candidate, cumulative);
        if points.is_empty() {
            return Ok(Self { model, points, chols: Vec::new(), alphas: Vec::new(), factorizations: 0 });
        }
        let k = {
            let t1 = points.len();
            let mut k = DMatrix::zeros(t1, t1);
            for i in 0..t1 {
                for j in 0..=i {
                    let v = kernel_eval(&model.kernel, &points[i], &points[j]);
                    k[(i, j)] = v;
                    k[(j, i)] = v;
                }
            }
            k
        };
        let means: Vec<DVector<f64>> = points.iter().map(|p| model.mean.eval(p)).collect();
        let mut chols = Vec::with_capacity(model.latent_dim);
        let mut alphas = Vec::with_capacity(model.latent_dim);
        let mut factorizations = 0;
        for d in 0..model.latent_dim {
            let mut c = k.clone();
            let nv = model.kernel.noise_variance[d];
            for i in 0..c.nrows() {
                c[(i, i)] += nv;
            }
            let (chol, attempts) = cholesky_with_jitter(&c, model.kernel.signal_variance)?;
            factorizations += attempts;
            let resid = DVector::from_fn(points.len(), |t, _| latents[t][d] - means[t][d]);
            alphas.push(chol.solve(&resid));
            chols.push(chol);
        }
        Ok(Self { model, points, chols, alphas, factorizations })
    }

    fn cross_cov(&self, x: &[f64]) -> DVector<f64> {
        DVector::from_fn(self.points.len(), |t, _| {
            kernel_eval(&self.model.kernel, x, &self.points[t])
        })
    }

    /// Posterior mean mu_f(x) + k_x^T (K + Sigma_nu I)^-1 (z - mu_Z), per
    /// latent dimension. Prior mean when the dataset is empty.
    pub fn mean_at(&self, x: &[f64]) -> DVector<f64> {
        let mut out = self.model.mean.eval(x);
        if self.points.is_empty() {
            return out;
        }
        let kx = self.cross_cov(x);
        for d in 0..self.model.latent_dim {
            out[d] += kx.dot(&self.alphas[d]);
        }
        out
    }

    /// Posterior variance per latent dimension, clamped at zero.
    pub fn variance_at(&self, x: &[f64]) -> DVector<f64> {
        let prior = kernel_eval(&self.model.kernel, x, x);
        if self.points.is_empty() {
            return DVector::from_element(self.model.latent_dim, prior);
        }
        let kx = self.cross_cov(x);
        DVector::from_fn(self.model.latent_dim, |d, _| {
            let reduction = kx.dot(&self.chols[d].solve(&kx));
            (prior - reduction).max(0.0)
        })
    }

    /// Gaussian log marginal likelihood of the dataset under this candidate,
    /// summed over independent latent dimensions.
    pub fn log_marginal_likelihood(&self, latents: &[DVector<f64>]) -> f64 {
        if self.points.is_empty() {
            return 0.0;
        }
        let t1 = self.points.len() as f64;
        let mut total = 0.0;
        for d in 0..self.model.latent_dim {
            let chol = &self.chols[d];
            let resid = DVector::from_fn(self.points.len(), |t, _| {
                latents[t][d] - self.model.mean.eval(&self.points[t])[d]
            });
            let quad = resid.dot(&self.alphas[d]);
            let logdet: f64 = chol.l_dirty().diagonal().iter().map(|v| v.ln()).sum::<f64>() * 2.0;
            total += -0.5 * quad - 0.5 * logdet - 0.5 * t1 * LN_2PI;
        }
        total
    }
}

/// Log marginal likelihood of the latent dataset under one candidate.
pub fn log_marginal_likelihood(
    model: &GpModel,
    latents: &[DVector<f64>],
    cumulative: &[Vec<f64>],
    candidate: &[f64],
) -> Result<f64> {
    let post = CandidatePosterior::build(model, latents, cumulative, candidate)?;
    Ok(post.log_marginal_likelihood(latents))
}

/// GP posterior mean at a query point for one candidate.
pub fn posterior_mean(
    model: &GpModel,
    latents: &[DVector<f64>],
    cumulative: &[Vec<f64>],
    candidate: &[f64],
    query: &[f64],
) -> Result<DVector<f64>> {
    let post = CandidatePosterior::build(model, latents, cumulative, candidate)?;
    Ok(post.mean_at(query))
}

/// GP posterior variance (per latent dimension) at a query point.
pub fn posterior_variance(
    model: &GpModel,
    latents: &[DVector<f64>],
    cumulative: &[Vec<f64>],
    candidate: &[f64],
    query: &[f64],
) -> Result<DVector<f64>> {
    let post = CandidatePosterior::build(model, latents, cumulative, candidate)?;
    Ok(post.variance_at(query))
}

// ---------------------------------------------------------------------------
// Hyperparameter fitting on labeled data
// ---------------------------------------------------------------------------

/// Log-spaced hyperparameter search grids (absolute values).
#[derive(Debug, Clone)]
pub struct HyperGrid {
    pub signal_variance: Vec<f64>,
    pub lengthscale: Vec<f64>,
    pub noise_variance: Vec<f64>,
}

fn log_spaced(lo: f64, hi: f64, count: usize) -> Vec<f64> {
    if count == 1 {
        return vec![lo];
    }
    let llo = lo.ln();
    let step = (hi.ln() - llo) / (count - 1) as f64;
    (0..count).map(|i| (llo + step * i as f64).exp()).collect()
}

impl HyperGrid {
    /// Seven points per axis, ranges derived from data statistics: signal
    /// variance around the sample variance, lengthscales as fractions of the
    /// state-space extent, noise as fractions of the sample variance.
    pub fn from_data(states: &[Vec<f64>], latents: &[DVector<f64>]) -> Self {
        let n_data = latents.len().max(1) as f64;
        let latent_dim = latents.first().map(|z| z.len()).unwrap_or(1);
        let mut var = 0.0;
        for d in 0..latent_dim {
            let mean: f64 = latents.iter().map(|z| z[d]).sum::<f64>() / n_data;
            var += latents.iter().map(|z| (z[d] - mean).powi(2)).sum::<f64>() / n_data;
        }
        let var = (var / latent_dim as f64).max(1e-12);
        let extent = states
            .iter()
            .flat_map(|x| x.iter().map(|v| v.abs()))
            .fold(0.0f64, f64::max)
            .max(1.0);
        Self {
            signal_variance: log_spaced(0.01 * var, 100.0 * var, 7),
            lengthscale: log_spaced(0.05 * extent, 2.0 * extent, 7),
            noise_variance: log_spaced(1e-4 * var, var, 7),
        }
    }
}

/// Grid-search maximum likelihood over (signal variance, shared lengthscale,
/// per-dimension noise variance) on a labeled dataset of (state, latent)
/// pairs. The prior mean is held fixed.
pub fn fit_hyperparameters(
    states: &[Vec<f64>],
    latents: &[DVector<f64>],
    mean: &PriorMean,
    grid: &HyperGrid,
) -> Result<KernelConfig> {
    if states.is_empty() || states.len() != latents.len() {
        return Err(Error::Config("hyperparameter fit needs aligned, non-empty data".into()));
    }
    if grid.signal_variance.is_empty() || grid.lengthscale.is_empty() || grid.noise_variance.is_empty()
    {
        return Err(Error::Config("hyperparameter grid must be non-empty".into()));
    }
    let n = states[0].len();
    let latent_dim = latents[0].len();
    let rows = states.len();

    // Residuals against the fixed prior mean.
    let resid: Vec<DVector<f64>> = states
        .iter()
        .zip(latents)
        .map(|(x, z)| z - mean.eval(x))
        .collect();

    let mut best: Option<(f64, KernelConfig)> = None;
    for &sf in &grid.signal_variance {
        for &ls in &grid.lengthscale {
            let cfg = KernelConfig {
                signal_variance: sf,
                lengthscales: vec![ls; n],
                noise_variance: vec![1.0; latent_dim],
            };
            let mut k = DMatrix::zeros(rows, rows);
            for i in 0..rows {
                for j in 0..=i {
                    let v = kernel_eval(&cfg, &states[i], &states[j]);
                    k[(i, j)] = v;
                    k[(j, i)] = v;
                }
            }
            // Per dimension, the best noise level on the grid decouples.
            let mut total = 0.0;
            let mut noise = Vec::with_capacity(latent_dim);
            let mut feasible = true;
            for d in 0..latent_dim {
                let zd = DVector::from_fn(rows, |r, _| resid[r][d]);
                let mut best_d: Option<(f64, f64)> = None;
                for &nv in &grid.noise_variance {
                    let mut c = k.clone();
                    for i in 0..rows {
                        c[(i, i)] += nv;
                    }
                    let Ok((chol, _)) = cholesky_with_jitter(&c, sf) else {
                        continue;
                    };
                    let alpha = chol.solve(&zd);
                    let logdet: f64 =
                        chol.l_dirty().diagonal().iter().map(|v| v.ln()).sum::<f64>() * 2.0;
                    let ll = -0.5 * zd.dot(&alpha) - 0.5 * logdet - 0.5 * rows as f64 * LN_2PI;
                    if best_d.map_or(true, |(b, _)| ll > b) {
                        best_d = Some((ll, nv));
                    }
                }
                match best_d {
                    Some((ll, nv)) => {
                        total += ll;
                        noise.push(nv);
                    }
                    None => {
                        feasible = false;
                        break;
                    }
                }
            }
            if !feasible {
                continue;
            }
            let candidate = KernelConfig {
                signal_variance: sf,
                lengthscales: vec![ls; n],
                noise_variance: noise,
            };
            if best.as_ref().map_or(true, |(b, _)| total > *b) {
                best = Some((total, candidate));
            }
        }
    }
    best.map(|(_, cfg)| cfg)
        .ok_or_else(|| Error::Numeric("no feasible hyperparameter grid point".into()))
}

// ---------------------------------------------------------------------------
// Persistence: text manifest + binary weight block
// ---------------------------------------------------------------------------

const GP_MAGIC: &[u8; 4] = b"RGPM";
const GP_VERSION: u32 = 1;

pub fn save_gp_model(model: &GpModel, path: &Path) -> Result<()> {
    model.validate()?;
    let mut manifest = String::new();
    manifest.push_str("format = gp-model\n");
    manifest.push_str(&format!("version = {GP_VERSION}\n"));
    manifest.push_str(&format!("n = {}\n", model.mean.n()));
    manifest.push_str(&format!("latent_dim = {}\n", model.latent_dim));
    manifest.push_str(&format!("signal_variance = {}\n", model.kernel.signal_variance));
    manifest.push_str(&format!(
        "lengthscales = {}\n",
        join_floats(&model.kernel.lengthscales)
    ));
    manifest.push_str(&format!(
        "noise_variance = {}\n",
        join_floats(&model.kernel.noise_variance)
    ));
    for (axis, knots) in model.mean.knots.iter().enumerate() {
        manifest.push_str(&format!("knots_{axis} = {}\n", join_floats(knots)));
    }
    manifest.push_str(&format!("weights_file = {}\n", weights_name(path)));
    std::fs::write(path, manifest)?;

    let mut buf: Vec<u8> = Vec::new();
    buf.extend_from_slice(GP_MAGIC);
    buf.extend_from_slice(&GP_VERSION.to_le_bytes());
    buf.extend_from_slice(&(model.mean.weights.nrows() as u32).to_le_bytes());
    buf.extend_from_slice(&(model.mean.weights.ncols() as u32).to_le_bytes());
    for v in model.mean.weights.iter() {
        buf.extend_from_slice(&v.to_le_bytes());
    }
    std::fs::write(path.with_file_name(weights_name(path)), buf)?;
    Ok(())
}

fn weights_name(path: &Path) -> String {
    let stem = path.file_stem().and_then(|s| s.to_str()).unwrap_or("gp");
    format!("{stem}.weights.bin")
}

fn join_floats(v: &[f64]) -> String {
    v.iter().map(|x| format!("{x}")).collect::<Vec<_>>().join(",")
}

fn parse_floats(s: &str) -> Result<Vec<f64>> {
    s.split(',')
        .map(|t| t.trim().parse::<f64>().map_err(|_| Error::Persist(format!("bad float {t}"))))
        .collect()
}

pub fn load_gp_model(path: &Path) -> Result<GpModel> {
    let text = std::fs::read_to_string(path)?;
    let mut fields = std::collections::BTreeMap::new();
    for line in text.lines() {
        if let Some((k, v)) = line.split_once('=') {
            fields.insert(k.trim().to_string(), v.trim().to_string());
        }
    }
    let get = |k: &str| -> Result<&String> {
        fields.get(k).ok_or_else(|| Error::Persist(format!("gp manifest missing {k}")))
    };
    let n: usize = get("n")?.parse().map_err(|_| Error::Persist("bad n".into()))?;
    let latent_dim: usize =
        get("latent_dim")?.parse().map_err(|_| Error::Persist("bad latent_dim".into()))?;
    let signal_variance: f64 = get("signal_variance")?
        .parse()
        .map_err(|_| Error::Persist("bad signal_variance".into()))?;
    let lengthscales = parse_floats(get("lengthscales")?)?;
    let noise_variance = parse_floats(get("noise_variance")?)?;
    let mut knots = Vec::with_capacity(n);
    for axis in 0..n {
        knots.push(parse_floats(get(&format!("knots_{axis}"))?)?);
    }

    let weights_path = path.with_file_name(get("weights_file")?.as_str());
    let bytes = std::fs::read(&weights_path)?;
    if bytes.len() < 16 || &bytes[0..4] != GP_MAGIC {
        return Err(Error::Persist("bad magic bytes for gp weights".into()));
    }
    let version = u32::from_le_bytes(bytes[4..8].try_into().unwrap());
    if version != GP_VERSION {
        return Err(Error::Persist(format!("unsupported gp weights version {version}")));
    }
    let rows = u32::from_le_bytes(bytes[8..12].try_into().unwrap()) as usize;
    let cols = u32::from_le_bytes(bytes[12..16].try_into().unwrap()) as usize;
    let expected = 16 + rows * cols * 8;
    if bytes.len() != expected {
        return Err(Error::Persist("gp weight block truncated".into()));
    }
    let mut weights = DMatrix::zeros(rows, cols);
    for (i, v) in weights.iter_mut().enumerate() {
        let off = 16 + i * 8;
        *v = f64::from_le_bytes(bytes[off..off + 8].try_into().unwrap());
    }
    let model = GpModel {
        kernel: KernelConfig { signal_variance, lengthscales, noise_variance },
        mean: PriorMean { knots, weights },
        latent_dim,
    };
    model.validate()?;
    Ok(model)
}
