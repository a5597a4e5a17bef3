//! Desk-scale variational autoencoder over power spectra, plus a PCA
//! baseline.
//!
//! Spectra are block-averaged to a small square, standardized per feature
//! with dataset statistics, and passed through dense encoder/decoder stacks.
//! The decoder likelihood variance is fixed to 1 in standardized units, the
//! latent prior is standard normal, and training maximizes a single-sample
//! reparameterized ELBO with momentum gradient ascent. Everything is
//! deterministic given the training seed.

use nalgebra::{DMatrix, DVector};
use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;
use std::path::Path;

use crate::error::{Error, Result};
use crate::grid::avg_pool;
use crate::nn::{Activation, Dense, Mlp, MlpGrads};
use crate::preprocess::PowerSpectrum;

const LEAKY_SLOPE: f64 = 0.01;
const STD_FLOOR: f64 = 1e-8;
const LN_2PI: f64 = 1.837877066409345483560659472811;

/// Training hyperparameters.
#[derive(Debug, Clone)]
pub struct VaeTrainConfig {
    pub latent_dim: usize,
    /// Spectra are average-pooled to `pooled_side^2` features.
    pub pooled_side: usize,
    /// Hidden widths of the encoder; the decoder mirrors them.
    pub hidden: Vec<usize>,
    pub learning_rate: f64,
    pub momentum: f64,
    pub batch_size: usize,
    pub epochs: usize,
    pub seed: u64,
}

impl Default for VaeTrainConfig {
    fn default() -> Self {
        Self {
            latent_dim: 3,
            pooled_side: 16,
            hidden: vec![128, 64],
            learning_rate: 2e-3,
            momentum: 0.9,
            batch_size: 32,
            epochs: 60,
            seed: 7,
        }
    }
}

/// Trained encoder/decoder parameters plus the frozen feature pipeline.
#[derive(Debug, Clone)]
pub struct VaeParams {
    pub input_side: usize,
    pub pooled_side: usize,
    pub latent_dim: usize,
    /// Per-feature standardization statistics, frozen at training time.
    pub feat_mean: DVector<f64>,
    pub feat_std: DVector<f64>,
    pub encoder: Mlp,
    pub decoder: Mlp,
}

/// Encoder head output.
#[derive(Debug, Clone)]
pub struct EncoderOutput {
    pub mu: DVector<f64>,
    pub logvar: DVector<f64>,
}

impl VaeParams {
    /// Fresh parameters with Glorot-initialized weights.
    pub fn init(input_side: usize, cfg: &VaeTrainConfig, rng: &mut ChaCha8Rng) -> Result<Self> {
        if cfg.pooled_side == 0 || input_side % cfg.pooled_side != 0 {
            return Err(Error::Config(format!(
                "input side {input_side} is not divisible by pooled side {}",
                cfg.pooled_side
            )));
        }
        if cfg.latent_dim == 0 {
            return Err(Error::Config("latent_dim must be >= 1".into()));
        }
        let d = cfg.pooled_side * cfg.pooled_side;
        let act = Activation::LeakyRelu(LEAKY_SLOPE);

        let mut enc_layers = Vec::new();
        let mut prev = d;
        for &h in &cfg.hidden {
            enc_layers.push(Dense::glorot(h, prev, act, rng));
            prev = h;
        }
        enc_layers.push(Dense::glorot(2 * cfg.latent_dim, prev, Activation::Identity, rng));

        let mut dec_layers = Vec::new();
        prev = cfg.latent_dim;
        for &h in cfg.hidden.iter().rev() {
            dec_layers.push(Dense::glorot(h, prev, act, rng));
            prev = h;
        }
        dec_layers.push(Dense::glorot(d, prev, Activation::Identity, rng));

        Ok(Self {
            input_side,
            pooled_side: cfg.pooled_side,
            latent_dim: cfg.latent_dim,
            feat_mean: DVector::zeros(d),
            feat_std: DVector::from_element(d, 1.0),
            encoder: Mlp::new(enc_layers),
            decoder: Mlp::new(dec_layers),
        })
    }

    pub fn feature_dim(&self) -> usize {
        self.pooled_side * self.pooled_side
    }

    /// Pool and standardize a spectrum into the encoder's input space.
    pub fn features(&self, spectrum: &PowerSpectrum) -> Result<DVector<f64>> {
        if spectrum.side != self.input_side {
            return Err(Error::Shape(format!(
                "spectrum side {} does not match trained side {}",
                spectrum.side, self.input_side
            )));
        }
        let pooled = avg_pool(&spectrum.values, spectrum.side, self.pooled_side);
        let mut f = DVector::from_vec(pooled);
        for i in 0..f.len() {
            f[i] = (f[i] - self.feat_mean[i]) / self.feat_std[i];
        }
        Ok(f)
    }
}

/// Deterministic encoder forward pass producing (mu, log sigma^2).
pub fn encode(params: &VaeParams, spectrum: &PowerSpectrum) -> Result<EncoderOutput> {
    let f = params.features(spectrum)?;
    Ok(encode_features(params, &f))
}

fn encode_features(params: &VaeParams, features: &DVector<f64>) -> EncoderOutput {
    let out = params.encoder.forward(features);
    let l = params.latent_dim;
    EncoderOutput { mu: out.rows(0, l).into_owned(), logvar: out.rows(l, l).into_owned() }
}

/// The deterministic latent representation z = mu_alpha(spectrum).
pub fn encode_mu(params: &VaeParams, spectrum: &PowerSpectrum) -> Result<DVector<f64>> {
    Ok(encode(params, spectrum)?.mu)
}

/// Decoder mean in standardized feature space.
pub fn decode(params: &VaeParams, z: &DVector<f64>) -> DVector<f64> {
    params.decoder.forward(z)
}

/// Closed-form KL(N(mu, diag sigma^2) || N(0, I)).
pub fn kl_to_standard_normal(mu: &DVector<f64>, logvar: &DVector<f64>) -> f64 {
    let mut kl = 0.0;
    for i in 0..mu.len() {
        kl += mu[i] * mu[i] + logvar[i].exp() - logvar[i] - 1.0;
    }
    0.5 * kl
}

/// Single-sample ELBO and its exact gradient for one datum, with the
/// reparameterization noise supplied explicitly so the sample path is fixed.
fn elbo_datum(
    params: &VaeParams,
    features: &DVector<f64>,
    eps: &DVector<f64>,
) -> (f64, MlpGrads, MlpGrads) {
    let l = params.latent_dim;
    let (enc_out, enc_cache) = params.encoder.forward_cached(features);
    let mu = enc_out.rows(0, l).into_owned();
    let logvar = enc_out.rows(l, l).into_owned();
    let sigma = logvar.map(|v| (0.5 * v).exp());
    let z = &mu + sigma.component_mul(eps);

    let (xhat, dec_cache) = params.decoder.forward_cached(&z);
    let resid = features - &xhat;
    let d = features.len() as f64;
    let recon = -0.5 * resid.norm_squared() - 0.5 * d * LN_2PI;
    let kl = kl_to_standard_normal(&mu, &logvar);
    let elbo = recon - kl;

    // d elbo / d xhat = (u - xhat); push through the decoder.
    let (dec_grads, dz) = params.decoder.backward(&dec_cache, &resid);

    // Split the z-gradient into mu and logvar parts, then subtract the KL
    // gradient: d KL/d mu = mu, d KL/d logvar = (exp(logvar) - 1)/2.
    let mut head = DVector::zeros(2 * l);
    for i in 0..l {
        head[i] = dz[i] - mu[i];
        head[l + i] = dz[i] * 0.5 * sigma[i] * eps[i] - 0.5 * (logvar[i].exp() - 1.0);
    }
    let (enc_grads, _) = params.encoder.backward(&enc_cache, &head);
    (elbo, enc_grads, dec_grads)
}

/// Mean single-sample ELBO of a batch of feature vectors; reparameterization
/// noise drawn from `rng` (one sample per datum).
pub fn elbo(params: &VaeParams, batch: &[DVector<f64>], rng: &mut ChaCha8Rng) -> Result<f64> {
    let (v, _, _) = elbo_with_gradient(params, batch, rng)?;
    Ok(v)
}

/// Mean ELBO and its exact gradient over a batch, one reparameterization
/// sample per datum drawn from `rng`.
pub fn elbo_with_gradient(
    params: &VaeParams,
    batch: &[DVector<f64>],
    rng: &mut ChaCha8Rng,
) -> Result<(f64, MlpGrads, MlpGrads)> {
    if batch.is_empty() {
        return Err(Error::Config("elbo needs a non-empty batch".into()));
    }
    let eps: Vec<DVector<f64>> = batch
        .iter()
        .map(|_| DVector::from_fn(params.latent_dim, |_, _| rng.sample(StandardNormal)))
        .collect();
    Ok(elbo_with_gradient_at(params, batch, &eps))
}

/// Deterministic variant taking the noise explicitly; this is the function
/// finite-difference checks probe.
pub fn elbo_with_gradient_at(
    params: &VaeParams,
    batch: &[DVector<f64>],
    eps: &[DVector<f64>],
) -> (f64, MlpGrads, MlpGrads) {
    assert_eq!(batch.len(), eps.len());
    let mut total = 0.0;
    let mut enc_acc = MlpGrads::zeros_like(&params.encoder);
    let mut dec_acc = MlpGrads::zeros_like(&params.decoder);
    for (u, e) in batch.iter().zip(eps) {
        let (v, eg, dg) = elbo_datum(params, u, e);
        total += v;
        enc_acc.add_assign(&eg);
        dec_acc.add_assign(&dg);
    }
    let inv = 1.0 / batch.len() as f64;
    enc_acc.scale(inv);
    dec_acc.scale(inv);
    (total * inv, enc_acc, dec_acc)
}

/// Train a VAE on a dataset of (already preprocessed) power spectra.
/// Returns the parameters and the mean ELBO per epoch.
pub fn train_vae(dataset: &[PowerSpectrum], cfg: &VaeTrainConfig) -> Result<(VaeParams, Vec<f64>)> {
    if dataset.len() < 200 {
        return Err(Error::Config(format!(
            "training needs at least 200 spectra, got {}",
            dataset.len()
        )));
    }
    let side = dataset[0].side;
    if dataset.iter().any(|s| s.side != side) {
        return Err(Error::Shape("training spectra must share one side".into()));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    let mut params = VaeParams::init(side, cfg, &mut rng)?;

    // Dataset feature statistics, frozen into the parameters.
    let pooled: Vec<DVector<f64>> = dataset
        .iter()
        .map(|s| DVector::from_vec(avg_pool(&s.values, s.side, cfg.pooled_side)))
        .collect();
    let d = params.feature_dim();
    let n = pooled.len() as f64;
    let mut mean = DVector::zeros(d);
    for p in &pooled {
        mean += p;
    }
    mean /= n;
    let mut var = DVector::zeros(d);
    for p in &pooled {
        let c = p - &mean;
        var += c.component_mul(&c);
    }
    var /= n;
    params.feat_mean = mean;
    params.feat_std = var.map(|v| v.sqrt().max(STD_FLOOR));

    let features: Vec<DVector<f64>> = pooled
        .iter()
        .map(|p| DVector::from_fn(d, |i, _| (p[i] - params.feat_mean[i]) / params.feat_std[i]))
        .collect();

    let mut enc_vel = MlpGrads::zeros_like(&params.encoder);
    let mut dec_vel = MlpGrads::zeros_like(&params.decoder);
    let mut log = Vec::with_capacity(cfg.epochs);
    let mut order: Vec<usize> = (0..features.len()).collect();

    for epoch in 0..cfg.epochs {
        order.shuffle(&mut rng);
        let mut epoch_elbo = 0.0;
        let mut batches = 0;
        for chunk in order.chunks(cfg.batch_size.max(1)) {
            let batch: Vec<DVector<f64>> = chunk.iter().map(|&i| features[i].clone()).collect();
            let (value, enc_g, dec_g) = elbo_with_gradient(&params, &batch, &mut rng)?;
            if !value.is_finite() {
                return Err(Error::Training {
                    epoch,
                    message: format!("non-finite batch ELBO {value}"),
                });
            }
            apply_momentum(&mut params.encoder, &mut enc_vel, &enc_g, cfg);
            apply_momentum(&mut params.decoder, &mut dec_vel, &dec_g, cfg);
            epoch_elbo += value;
            batches += 1;
        }
        log.push(epoch_elbo / batches as f64);
    }
    Ok((params, log))
}

fn apply_momentum(net: &mut Mlp, vel: &mut MlpGrads, grad: &MlpGrads, cfg: &VaeTrainConfig) {
    for l in 0..net.layers.len() {
        vel.weights[l] = &vel.weights[l] * cfg.momentum + &grad.weights[l];
        vel.biases[l] = &vel.biases[l] * cfg.momentum + &grad.biases[l];
        net.layers[l].weight += &vel.weights[l] * cfg.learning_rate;
        net.layers[l].bias += &vel.biases[l] * cfg.learning_rate;
    }
}

// ---------------------------------------------------------------------------
// PCA baseline
// ---------------------------------------------------------------------------

/// Top-l principal directions of centered pooled spectra.
#[derive(Debug, Clone)]
pub struct PcaBasis {
    pub input_side: usize,
    pub pooled_side: usize,
    pub mean: DVector<f64>,
    /// d x l matrix whose columns are the principal directions.
    pub components: DMatrix<f64>,
    /// Variance captured by each component.
    pub explained_variance: Vec<f64>,
    /// Fraction of total variance per component.
    pub explained_fraction: Vec<f64>,
}

pub fn fit_pca(dataset: &[PowerSpectrum], pooled_side: usize, latent_dim: usize) -> Result<PcaBasis> {
    if dataset.is_empty() {
        return Err(Error::Config("pca needs a non-empty dataset".into()));
    }
    let side = dataset[0].side;
    if pooled_side == 0 || side % pooled_side != 0 {
        return Err(Error::Config(format!(
            "side {side} is not divisible by pooled side {pooled_side}"
        )));
    }
    let d = pooled_side * pooled_side;
    let n = dataset.len();
    let mut x = DMatrix::zeros(n, d);
    for (r, s) in dataset.iter().enumerate() {
        if s.side != side {
            return Err(Error::Shape("pca spectra must share one side".into()));
        }
        let pooled = avg_pool(&s.values, s.side, pooled_side);
        for (c, v) in pooled.iter().enumerate() {
            x[(r, c)] = *v;
        }
    }
    let mean = DVector::from_fn(d, |i, _| x.column(i).sum() / n as f64);
    for r in 0..n {
        for c in 0..d {
            x[(r, c)] -= mean[c];
        }
    }
    let svd = x.svd(false, true);
    let sv = &svd.singular_values;
    let rank = sv.iter().filter(|&&s| s > 1e-10 * sv[0].max(1e-300)).count();
    if latent_dim > rank {
        return Err(Error::Rank(format!(
            "requested {latent_dim} components but data rank is {rank}"
        )));
    }
    let v_t = svd.v_t.as_ref().expect("requested V^T");
    let denom = (n.max(2) - 1) as f64;
    let total_var: f64 = sv.iter().map(|s| s * s / denom).sum();
    let mut components = DMatrix::zeros(d, latent_dim);
    let mut explained = Vec::with_capacity(latent_dim);
    for j in 0..latent_dim {
        for i in 0..d {
            components[(i, j)] = v_t[(j, i)];
        }
        explained.push(sv[j] * sv[j] / denom);
    }
    let fractions = explained.iter().map(|e| e / total_var.max(1e-300)).collect();
    Ok(PcaBasis {
        input_side: side,
        pooled_side,
        mean,
        components,
        explained_variance: explained,
        explained_fraction: fractions,
    })
}

pub fn encode_pca(basis: &PcaBasis, spectrum: &PowerSpectrum) -> Result<DVector<f64>> {
    if spectrum.side != basis.input_side {
        return Err(Error::Shape(format!(
            "spectrum side {} does not match pca side {}",
            spectrum.side, basis.input_side
        )));
    }
    let pooled = DVector::from_vec(avg_pool(&spectrum.values, spectrum.side, basis.pooled_side));
    Ok(basis.components.transpose() * (pooled - &basis.mean))
}

/// Reconstruction of a spectrum's pooled features from its PCA projection.
pub fn reconstruct_pca(basis: &PcaBasis, projection: &DVector<f64>) -> DVector<f64> {
    &basis.mean + &basis.components * projection
}

// ---------------------------------------------------------------------------
// Persistence: versioned binary container + text manifest
// ---------------------------------------------------------------------------

const VAE_MAGIC: &[u8; 4] = b"RVAE";
const VAE_VERSION: u32 = 1;

/// Write the weight container and a sidecar text manifest describing it.
pub fn save_vae(params: &VaeParams, path: &Path) -> Result<()> {
    let mut buf: Vec<u8> = Vec::new();
    buf.extend_from_slice(VAE_MAGIC);
    put_u32(&mut buf, VAE_VERSION);
    put_u32(&mut buf, params.input_side as u32);
    put_u32(&mut buf, params.pooled_side as u32);
    put_u32(&mut buf, params.latent_dim as u32);
    put_vec(&mut buf, params.feat_mean.as_slice());
    put_vec(&mut buf, params.feat_std.as_slice());
    put_mlp(&mut buf, &params.encoder);
    put_mlp(&mut buf, &params.decoder);
    std::fs::write(path, &buf)?;

    let mut manifest = String::new();
    manifest.push_str("format = vae-weights\n");
    manifest.push_str(&format!("version = {VAE_VERSION}\n"));
    manifest.push_str(&format!("input_side = {}\n", params.input_side));
    manifest.push_str(&format!("pooled_side = {}\n", params.pooled_side));
    manifest.push_str(&format!("latent_dim = {}\n", params.latent_dim));
    manifest.push_str(&format!("encoder_shapes = {}\n", shapes_string(&params.encoder)));
    manifest.push_str(&format!("decoder_shapes = {}\n", shapes_string(&params.decoder)));
    std::fs::write(manifest_path(path), manifest)?;
    Ok(())
}

fn shapes_string(net: &Mlp) -> String {
    net.layers
        .iter()
        .map(|l| format!("{}x{}", l.weight.nrows(), l.weight.ncols()))
        .collect::<Vec<_>>()
        .join(",")
}

pub fn manifest_path(path: &Path) -> std::path::PathBuf {
    let mut os = path.as_os_str().to_owned();
    os.push(".manifest.txt");
    std::path::PathBuf::from(os)
}

pub fn load_vae(path: &Path) -> Result<VaeParams> {
    let bytes = std::fs::read(path)?;
    let mut r = Cursor { bytes: &bytes, pos: 0 };
    let magic = r.take(4)?;
    if magic != VAE_MAGIC {
        return Err(Error::Persist("bad magic bytes for vae container".into()));
    }
    let version = r.u32()?;
    if version != VAE_VERSION {
        return Err(Error::Persist(format!("unsupported vae container version {version}")));
    }
    let input_side = r.u32()? as usize;
    let pooled_side = r.u32()? as usize;
    let latent_dim = r.u32()? as usize;
    let feat_mean = DVector::from_vec(r.vec()?);
    let feat_std = DVector::from_vec(r.vec()?);
    let encoder = r.mlp()?;
    let decoder = r.mlp()?;
    if feat_mean.len() != pooled_side * pooled_side {
        return Err(Error::Persist("feature statistics shape mismatch".into()));
    }
    Ok(VaeParams { input_side, pooled_side, latent_dim, feat_mean, feat_std, encoder, decoder })
}

fn put_u32(buf: &mut Vec<u8>, v: u32) {
    buf.extend_from_slice(&v.to_le_bytes());
}

fn put_f64(buf: &mut Vec<u8>, v: f64) {
    buf.extend_from_slice(&v.to_le_bytes());
}

fn put_vec(buf: &mut Vec<u8>, v: &[f64]) {
    put_u32(buf, v.len() as u32);
    for &x in v {
        put_f64(buf, x);
    }
}

fn put_mlp(buf: &mut Vec<u8>, net: &Mlp) {
    put_u32(buf, net.layers.len() as u32);
    for l in &net.layers {
        let (tag, slope) = match l.activation {
            Activation::Identity => (0u8, 0.0),
            Activation::LeakyRelu(s) => (1u8, s),
        };
        buf.push(tag);
        put_f64(buf, slope);
        put_u32(buf, l.weight.nrows() as u32);
        put_u32(buf, l.weight.ncols() as u32);
        // Column-major, matching nalgebra's storage order.
        for v in l.weight.iter() {
            put_f64(buf, *v);
        }
        for v in l.bias.iter() {
            put_f64(buf, *v);
        }
    }
}

struct Cursor<'a> {
    bytes: &'a [u8],
    pos: usize,
}

impl<'a> Cursor<'a> {
    fn take(&mut self, n: usize) -> Result<&'a [u8]> {
        if self.pos + n > self.bytes.len() {
            return Err(Error::Persist("truncated container".into()));
        }
        let s = &self.bytes[self.pos..self.pos + n];
        self.pos += n;
        Ok(s)
    }

    fn u32(&mut self) -> Result<u32> {
        let b = self.take(4)?;
        Ok(u32::from_le_bytes(b.try_into().unwrap()))
    }

    fn u8(&mut self) -> Result<u8> {
        Ok(self.take(1)?[0])
    }

    fn f64(&mut self) -> Result<f64> {
        let b = self.take(8)?;
        Ok(f64::from_le_bytes(b.try_into().unwrap()))
    }

    fn vec(&mut self) -> Result<Vec<f64>> {
        let n = self.u32()? as usize;
        let mut v = Vec::with_capacity(n);
        for _ in 0..n {
            v.push(self.f64()?);
        }
        Ok(v)
    }

    fn mlp(&mut self) -> Result<Mlp> {
        let n_layers = self.u32()? as usize;
        let mut layers = Vec::with_capacity(n_layers);
        for _ in 0..n_layers {
            let tag = self.u8()?;
            let slope = self.f64()?;
            let activation = match tag {
                0 => Activation::Identity,
                1 => Activation::LeakyRelu(slope),
                other => return Err(Error::Persist(format!("unknown activation tag {other}"))),
            };
            let rows = self.u32()? as usize;
            let cols = self.u32()? as usize;
            let mut weight = DMatrix::zeros(rows, cols);
            for v in weight.iter_mut() {
                *v = self.f64()?;
            }
            let mut bias = DVector::zeros(rows);
            for v in bias.iter_mut() {
                *v = self.f64()?;
            }
            layers.push(Dense { weight, bias, activation });
        }
        Ok(Mlp::new(layers))
    }
}
