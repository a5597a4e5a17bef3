//! Synthetic Ronchigram generation.
//!
//! A thin-sample, single-slice stand-in for a real STEM: an aperture-limited
//! probe with an aberration phase is passed through a frozen weak phase
//! screen and the far-field intensity is Poisson-sampled into electron
//! counts. An `AnalyticEven` mode skips wave optics entirely and produces
//! expected power spectra whose evenness under sign flip of the aberration
//! vector holds to machine precision, which is what the estimator-level
//! property tests key on.

use num_complex::Complex;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Poisson, Uniform};

use crate::error::{Error, Result};
use crate::fft::{fft_2d, ifft_2d};
use crate::grid::{centered_freqs, fftshift, idx, is_power_of_two};

/// Weak phase screen strength.
const SCREEN_EPS: f64 = 0.2;
/// Gaussian smoothing width of the phase screen, pixels.
const SCREEN_SMOOTH_SIGMA: f64 = 2.0;
/// Additive intensity floor as a fraction of the dose, keeps rates positive.
const FLOOR_FRACTION: f64 = 1e-3;

/// Vector of aberration coefficients in nm; zero means perfect calibration.
/// The default three-coefficient order is (C1, A1x, A1y): defocus plus
/// two-fold astigmatism.
#[derive(Debug, Clone, PartialEq)]
pub struct AberrationState {
    coeffs: Vec<f64>,
}

impl AberrationState {
    pub fn new(coeffs: Vec<f64>) -> Result<Self> {
        if coeffs.is_empty() {
            return Err(Error::Config("aberration state needs n >= 1".into()));
        }
        if coeffs.iter().any(|c| !c.is_finite()) {
            return Err(Error::Config("aberration coefficients must be finite".into()));
        }
        Ok(Self { coeffs })
    }

    /// Convenience constructor for the default (C1, A1x, A1y) order.
    pub fn from_c1_a1(c1: f64, a1x: f64, a1y: f64) -> Self {
        Self { coeffs: vec![c1, a1x, a1y] }
    }

    pub fn zero(n: usize) -> Self {
        Self { coeffs: vec![0.0; n] }
    }

    pub fn n(&self) -> usize {
        self.coeffs.len()
    }

    pub fn coeffs(&self) -> &[f64] {
        &self.coeffs
    }

    /// Sign-flipped state.
    pub fn negated(&self) -> Self {
        Self { coeffs: self.coeffs.iter().map(|c| -c).collect() }
    }

    pub fn norm(&self) -> f64 {
        self.coeffs.iter().map(|c| c * c).sum::<f64>().sqrt()
    }
}

/// Simulator mode.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum SimMode {
    /// Probe + phase screen wave optics; evenness of the power spectrum is
    /// only statistical.
    Wave,
    /// Direct generation of an exactly even expected power spectrum and a
    /// compatible spatial image.
    AnalyticEven,
}

/// Simulator configuration.
#[derive(Debug, Clone)]
pub struct SimConfig {
    /// Pixels per image edge; the image has `side * side` pixels.
    pub side: usize,
    /// Wavelength-like scale factor in the aberration phase (nm-analog units).
    pub wavelength: f64,
    /// Aperture cutoff as a fraction of the Nyquist frequency, in (0, 1].
    pub aperture_semiangle: f64,
    /// Mean expected electrons per in-aperture pixel.
    pub dose: f64,
    /// Seed for the frozen phase screen sample.
    pub phase_screen_seed: u64,
    pub mode: SimMode,
}

impl Default for SimConfig {
    fn default() -> Self {
        Self {
            side: 64,
            wavelength: 5e-5,
            aperture_semiangle: 0.5,
            dose: 1000.0,
            phase_screen_seed: 1,
            mode: SimMode::Wave,
        }
    }
}

impl SimConfig {
    pub fn validate(&self) -> Result<()> {
        if !is_power_of_two(self.side) || self.side < 32 {
            return Err(Error::Config(format!(
                "side must be a power of two >= 32, got {}",
                self.side
            )));
        }
        if !(self.dose > 0.0) {
            return Err(Error::Config("dose must be > 0".into()));
        }
        if !(self.aperture_semiangle > 0.0 && self.aperture_semiangle <= 1.0) {
            return Err(Error::Config("aperture_semiangle must be in (0, 1]".into()));
        }
        if !self.wavelength.is_finite() || self.wavelength <= 0.0 {
            return Err(Error::Config("wavelength must be positive".into()));
        }
        Ok(())
    }
}

/// Raw integer electron-count image, optionally tagged with the ground-truth
/// state that generated it.
#[derive(Debug, Clone)]
pub struct Ronchigram {
    pub counts: Vec<u32>,
    pub side: usize,
    pub state_tag: Option<AberrationState>,
}

/// Aberration phase chi(k) on the centered frequency lattice:
///
///   chi(k) = pi * lambda * [ C1 (kx^2 + ky^2) + A1x (kx^2 - ky^2) + 2 A1y kx ky ]
///
/// Linear in the coefficients, hence exactly odd under sign flip of the state.
pub fn aberration_phase(state: &AberrationState, side: usize, wavelength: f64) -> Result<Vec<f64>> {
    if state.n() != 3 {
        return Err(Error::UnsupportedAberrationOrder { expected: 3, got: state.n() });
    }
    let [c1, a1x, a1y] = [state.coeffs[0], state.coeffs[1], state.coeffs[2]];
    let freqs = centered_freqs(side);
    let mut chi = vec![0.0; side * side];
    for r in 0..side {
        let ky = freqs[r];
        for c in 0..side {
            let kx = freqs[c];
            let quad =
                c1 * (kx * kx + ky * ky) + a1x * (kx * kx - ky * ky) + 2.0 * a1y * kx * ky;
            chi[idx(r, c, side)] = std::f64::consts::PI * wavelength * quad;
        }
    }
    Ok(chi)
}

/// Scalar evaluation of the same phase formula at a single frequency point.
pub fn aberration_phase_at(state: &AberrationState, kx: f64, ky: f64, wavelength: f64) -> Result<f64> {
    if state.n() != 3 {
        return Err(Error::UnsupportedAberrationOrder { expected: 3, got: state.n() });
    }
    let [c1, a1x, a1y] = [state.coeffs[0], state.coeffs[1], state.coeffs[2]];
    Ok(std::f64::consts::PI
        * wavelength
        * (c1 * (kx * kx + ky * ky) + a1x * (kx * kx - ky * ky) + 2.0 * a1y * kx * ky))
}

/// Aperture mask on the centered lattice: 1 inside `aperture_semiangle * k_N`.
fn aperture_mask(side: usize, aperture_semiangle: f64) -> (Vec<f64>, usize) {
    let freqs = centered_freqs(side);
    let k_cut = aperture_semiangle * (side / 2) as f64;
    let k_cut2 = k_cut * k_cut;
    let mut mask = vec![0.0; side * side];
    let mut count = 0;
    for r in 0..side {
        for c in 0..side {
            if freqs[c] * freqs[c] + freqs[r] * freqs[r] <= k_cut2 {
                mask[idx(r, c, side)] = 1.0;
                count += 1;
            }
        }
    }
    (mask, count)
}

/// Frozen weak phase screen: i.i.d. uniform(-pi, pi) smoothed by a Gaussian
/// of `SCREEN_SMOOTH_SIGMA` pixels, frozen per seed.
fn phase_screen(side: usize, seed: u64) -> Vec<f64> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let uni = Uniform::new(-std::f64::consts::PI, std::f64::consts::PI).expect("valid range");
    let mut field: Vec<Complex<f64>> = (0..side * side)
        .map(|_| Complex::new(uni.sample(&mut rng), 0.0))
        .collect();
    fft_2d(&mut field, side);
    // Gaussian transfer function exp(-2 pi^2 sigma^2 |f|^2), f in cycles/px.
    let freqs = centered_freqs(side);
    let two_pi2_s2 = 2.0 * std::f64::consts::PI.powi(2) * SCREEN_SMOOTH_SIGMA.powi(2);
    let shifted = fftshift(&field, side);
    let mut filtered = shifted;
    for r in 0..side {
        for c in 0..side {
            let fx = freqs[c] / side as f64;
            let fy = freqs[r] / side as f64;
            filtered[idx(r, c, side)] *= (-two_pi2_s2 * (fx * fx + fy * fy)).exp();
        }
    }
    let mut unshifted = fftshift(&filtered, side);
    ifft_2d(&mut unshifted, side);
    unshifted.iter().map(|v| v.re).collect()
}

/// Expected detector intensity g(x) for a state under a config. Strictly
/// positive; deterministic given (state, config).
pub fn expected_image(state: &AberrationState, config: &SimConfig) -> Result<Vec<f64>> {
    config.validate()?;
    match config.mode {
        SimMode::Wave => expected_image_wave(state, config),
        SimMode::AnalyticEven => {
            let h = expected_power_spectrum(state, config)?;
            Ok(synthesize_spatial(&h.values, config))
        }
    }
}

fn expected_image_wave(state: &AberrationState, config: &SimConfig) -> Result<Vec<f64>> {
    let side = config.side;
    let chi = aberration_phase(state, side, config.wavelength)?;
    let (mask, n_ap) = aperture_mask(side, config.aperture_semiangle);

    // Probe: IFFT of A(k) exp(-i chi(k)), built in centered layout.
    let mut probe: Vec<Complex<f64>> = (0..side * side)
        .map(|i| Complex::from_polar(mask[i], -chi[i]))
        .collect();
    let mut probe_unshifted = fftshift(&probe, side);
    ifft_2d(&mut probe_unshifted, side);
    probe = probe_unshifted;

    // Exit wave through the frozen weak phase screen.
    let screen = phase_screen(side, config.phase_screen_seed);
    for (p, phi) in probe.iter_mut().zip(&screen) {
        *p *= Complex::from_polar(1.0, SCREEN_EPS * phi);
    }

    // Far field intensity, displayed with the aperture disc centered.
    let mut far = probe;
    fft_2d(&mut far, side);
    let intensity: Vec<f64> = fftshift(&far, side).iter().map(|v| v.norm_sqr()).collect();

    // Normalize total energy to dose * (#in-aperture pixels), then add the
    // positivity floor.
    let total: f64 = intensity.iter().sum();
    if !(total > 0.0) {
        return Err(Error::Simulation("zero-energy far field".into()));
    }
    let scale = config.dose * n_ap as f64 / total;
    let floor = FLOOR_FRACTION * config.dose;
    Ok(intensity.iter().map(|v| v * scale + floor).collect())
}

/// Count of pixels inside the aperture disc; exposed for dose bookkeeping
/// in tests and datasets.
pub fn aperture_pixel_count(config: &SimConfig) -> usize {
    aperture_mask(config.side, config.aperture_semiangle).1
}

/// Indicator of the aperture disc in the displayed (centered) layout.
pub fn aperture_indicator(config: &SimConfig) -> Vec<bool> {
    aperture_mask(config.side, config.aperture_semiangle)
        .0
        .iter()
        .map(|&v| v > 0.0)
        .collect()
}

/// Analytic expected power spectrum on the centered lattice:
///
///   h(x)[q] = dose * (B(q) sin chi_x(q))^2 + floor
///
/// with a smooth Gaussian band envelope B. Since chi is odd in x and sin is
/// odd, the square is exactly even: h(-x) == h(x) bit for bit.
pub fn expected_power_spectrum(state: &AberrationState, config: &SimConfig) -> Result<crate::preprocess::PowerSpectrum> {
    config.validate()?;
    let side = config.side;
    let chi = aberration_phase(state, side, config.wavelength)?;
    let freqs = centered_freqs(side);
    let sigma_b = side as f64 / 6.0;
    let floor = FLOOR_FRACTION * config.dose;
    let mut values = vec![0.0; side * side];
    for r in 0..side {
        for c in 0..side {
            let q2 = freqs[c] * freqs[c] + freqs[r] * freqs[r];
            let envelope = (-q2 / (2.0 * sigma_b * sigma_b)).exp();
            let s = envelope * chi[idx(r, c, side)].sin();
            values[idx(r, c, side)] = config.dose * s * s + floor;
        }
    }
    crate::preprocess::PowerSpectrum::new(values, side)
}

/// Deterministic real, strictly positive spatial image whose spectrum matches
/// the analytic target up to a DC offset; used so the analytic mode can feed
/// the same Poisson sampling and preprocessing chain as the wave mode.
fn synthesize_spatial(h: &[f64], config: &SimConfig) -> Vec<f64> {
    let side = config.side;
    let amplitude: Vec<Complex<f64>> = h.iter().map(|&v| Complex::new(v.sqrt(), 0.0)).collect();
    let mut field = fftshift(&amplitude, side);
    ifft_2d(&mut field, side);
    // h is real and even in q, so the inverse transform is real up to rounding.
    let real: Vec<f64> = field.iter().map(|v| v.re).collect();
    let min = real.iter().cloned().fold(f64::INFINITY, f64::min);
    let shifted: Vec<f64> = real.iter().map(|v| v - min).collect();
    let total: f64 = shifted.iter().sum();
    let p = (side * side) as f64;
    let floor = FLOOR_FRACTION * config.dose;
    if total <= 0.0 {
        return vec![config.dose; side * side];
    }
    let scale = config.dose * p / total;
    shifted.iter().map(|v| v * scale + floor).collect()
}

/// Element-wise independent Poisson draws around an expected image.
pub fn sample_ronchigram(expected: &[f64], side: usize, rng_seed: u64) -> Result<Ronchigram> {
    if expected.len() != side * side {
        return Err(Error::Shape(format!(
            "expected image has {} values for side {}",
            expected.len(),
            side
        )));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(rng_seed);
    let mut counts = Vec::with_capacity(expected.len());
    for &rate in expected {
        if !rate.is_finite() || rate < 0.0 {
            return Err(Error::Simulation(format!("non-finite or negative rate {rate}")));
        }
        let draw = if rate == 0.0 {
            0.0
        } else {
            Poisson::new(rate)
                .map_err(|e| Error::Simulation(format!("poisson rate {rate}: {e}")))?
                .sample(&mut rng)
        };
        counts.push(draw as u32);
    }
    Ok(Ronchigram { counts, side, state_tag: None })
}

#[cfg(test)]
mod tests {
    use super::*;

    fn wave_config() -> SimConfig {
        SimConfig::default()
    }

    #[test]
    fn phase_is_zero_for_perfect_calibration() {
        let chi = aberration_phase(&AberrationState::zero(3), 32, 2e-3).unwrap();
        assert!(chi.iter().all(|&v| v == 0.0));
    }

    #[test]
    fn phase_is_exactly_odd_in_the_state() {
        let state = AberrationState::from_c1_a1(123.0, -45.0, 67.0);
        let side = 32;
        let a = aberration_phase(&state, side, 2e-3).unwrap();
        let b = aberration_phase(&state.negated(), side, 2e-3).unwrap();
        for (x, y) in a.iter().zip(&b) {
            assert_eq!(*x, -*y);
        }
    }

    #[test]
    fn phase_matches_scalar_formula_at_quarter_nyquist() {
        // state = (100, 0, 0), k = (k_N/4, 0), lambda = 2e-3:
        // chi = pi * lambda * 100 * (k_N/4)^2
        let side = 64;
        let lambda = 2e-3;
        let state = AberrationState::from_c1_a1(100.0, 0.0, 0.0);
        let chi = aberration_phase(&state, side, lambda).unwrap();
        let k = (side / 2) as f64 / 4.0; // 8.0
        let expect = std::f64::consts::PI * lambda * 100.0 * k * k;
        // kx = 8 lives at column side/2 + 8; ky = 0 at row side/2.
        let got = chi[idx(side / 2, side / 2 + 8, side)];
        assert!((got - expect).abs() < 1e-12 * expect.abs());
        let scalar = aberration_phase_at(&state, k, 0.0, lambda).unwrap();
        assert_eq!(got, scalar);
    }

    #[test]
    fn phase_rejects_wrong_order() {
        let state = AberrationState::new(vec![1.0, 2.0]).unwrap();
        assert!(matches!(
            aberration_phase(&state, 32, 1e-3),
            Err(Error::UnsupportedAberrationOrder { expected: 3, got: 2 })
        ));
    }

    #[test]
    fn expected_image_is_deterministic() {
        let cfg = wave_config();
        let state = AberrationState::from_c1_a1(80.0, -40.0, 20.0);
        let a = expected_image(&state, &cfg).unwrap();
        let b = expected_image(&state, &cfg).unwrap();
        assert_eq!(a, b);
    }

    #[test]
    fn expected_image_in_aperture_sum_matches_dose_budget() {
        let cfg = wave_config();
        let state = AberrationState::from_c1_a1(120.0, 50.0, -30.0);
        let g = expected_image(&state, &cfg).unwrap();
        let disc = aperture_indicator(&cfg);
        let n_ap = aperture_pixel_count(&cfg);
        let in_disc: f64 = g
            .iter()
            .zip(&disc)
            .filter_map(|(v, &inside)| inside.then_some(*v))
            .sum();
        let budget = cfg.dose * n_ap as f64;
        assert!(
            (in_disc - budget).abs() / budget < 0.01,
            "in-disc sum {in_disc} vs budget {budget}"
        );
    }

    #[test]
    fn wave_mode_spatial_image_is_not_even_in_the_state() {
        let cfg = wave_config();
        let state = AberrationState::from_c1_a1(150.0, 80.0, 0.0);
        let g_pos = expected_image(&state, &cfg).unwrap();
        let g_neg = expected_image(&state.negated(), &cfg).unwrap();
        let diff: f64 = g_pos
            .iter()
            .zip(&g_neg)
            .map(|(a, b)| (a - b) * (a - b))
            .sum::<f64>()
            .sqrt();
        let norm: f64 = g_pos.iter().map(|v| v * v).sum::<f64>().sqrt();
        assert!(diff / norm > 0.01, "relative L2 {} should exceed 1%", diff / norm);
    }

    #[test]
    fn analytic_spectrum_is_exactly_even() {
        let cfg = SimConfig { mode: SimMode::AnalyticEven, ..SimConfig::default() };
        let state = AberrationState::from_c1_a1(150.0, -80.0, 45.0);
        let a = expected_power_spectrum(&state, &cfg).unwrap();
        let b = expected_power_spectrum(&state.negated(), &cfg).unwrap();
        assert_eq!(a.values, b.values);
    }

    #[test]
    fn analytic_spatial_images_match_for_mirror_states() {
        let cfg = SimConfig { mode: SimMode::AnalyticEven, ..SimConfig::default() };
        let state = AberrationState::from_c1_a1(90.0, 10.0, -70.0);
        let a = expected_image(&state, &cfg).unwrap();
        let b = expected_image(&state.negated(), &cfg).unwrap();
        assert_eq!(a, b);
        assert!(a.iter().all(|&v| v > 0.0));
    }

    #[test]
    fn sampling_is_reproducible_and_rejects_bad_rates() {
        let rates = vec![5.0; 16];
        let a = sample_ronchigram(&rates, 4, 9).unwrap();
        let b = sample_ronchigram(&rates, 4, 9).unwrap();
        assert_eq!(a.counts, b.counts);
        let bad = vec![f64::NAN; 16];
        assert!(sample_ronchigram(&bad, 4, 9).is_err());
    }

    #[test]
    fn near_zero_rate_yields_zero_counts() {
        let rates = vec![1e-12; 64];
        let r = sample_ronchigram(&rates, 8, 3).unwrap();
        assert!(r.counts.iter().all(|&c| c == 0));
    }

    #[test]
    fn poisson_moments_match_rate() {
        // Mean within 5 sigma / sqrt(draws) and variance/mean in [0.9, 1.1]
        // at rate 100 over 10^4 draws.
        let rate = 100.0;
        let draws = 10_000;
        let mut rng = ChaCha8Rng::seed_from_u64(42);
        let poisson = Poisson::new(rate).unwrap();
        let samples: Vec<f64> = (0..draws).map(|_| poisson.sample(&mut rng)).collect();
        let mean = samples.iter().sum::<f64>() / draws as f64;
        let var = samples.iter().map(|v| (v - mean) * (v - mean)).sum::<f64>() / (draws - 1) as f64;
        let tol = 5.0 * rate.sqrt() / (draws as f64).sqrt();
        assert!((mean - rate).abs() < tol, "mean {mean} vs {rate} (tol {tol})");
        let ratio = var / mean;
        assert!((0.9..=1.1).contains(&ratio), "variance/mean ratio {ratio}");
    }
}
