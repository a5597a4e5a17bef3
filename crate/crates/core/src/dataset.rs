//! On-disk dataset layout: one flat binary grid per observation plus a
//! tab-separated sidecar index.
//!
//! Grids are row-major and little-endian: `.u32` files hold 32-bit unsigned
//! electron counts, `.f32` files hold 32-bit float spectra. The sidecar
//! `index.tsv` starts with `#`-prefixed config lines followed by a header
//! row and one row per grid: file name, sampling seed, then the tagged
//! ground-truth coefficients.

use std::fs;
use std::path::{Path, PathBuf};

use crate::error::{Error, Result};
use crate::optics::{AberrationState, Ronchigram, SimConfig, SimMode};
use crate::preprocess::PowerSpectrum;

pub const INDEX_FILE: &str = "index.tsv";

/// One dataset record: either raw counts or a preprocessed spectrum, plus
/// the metadata row it was written with.
#[derive(Debug, Clone)]
pub struct Record {
    pub file: String,
    pub seed: u64,
    pub state: Option<AberrationState>,
}

fn state_columns(n: usize) -> String {
    (0..n).map(|i| format!("x{i}")).collect::<Vec<_>>().join("\t")
}

fn format_state(state: &Option<AberrationState>, n: usize) -> String {
    match state {
        Some(s) => s.coeffs().iter().map(|v| format!("{v}")).collect::<Vec<_>>().join("\t"),
        None => vec!["nan"; n].join("\t"),
    }
}

fn mode_name(mode: SimMode) -> &'static str {
    match mode {
        SimMode::Wave => "wave",
        SimMode::AnalyticEven => "analytic_even",
    }
}

/// Incremental writer for a dataset directory.
pub struct DatasetWriter {
    dir: PathBuf,
    rows: Vec<String>,
    n: usize,
    config_lines: Vec<String>,
    counter: usize,
}

impl DatasetWriter {
    pub fn create(dir: &Path, config: &SimConfig, n: usize) -> Result<Self> {
        fs::create_dir_all(dir)?;
        let config_lines = vec![
            format!("# side = {}", config.side),
            format!("# wavelength = {}", config.wavelength),
            format!("# aperture_semiangle = {}", config.aperture_semiangle),
            format!("# dose = {}", config.dose),
            format!("# phase_screen_seed = {}", config.phase_screen_seed),
            format!("# mode = {}", mode_name(config.mode)),
            format!("# layout = row-major little-endian"),
        ];
        Ok(Self { dir: dir.to_path_buf(), rows: Vec::new(), n, config_lines, counter: 0 })
    }

    pub fn append_counts(&mut self, y: &Ronchigram, seed: u64) -> Result<()> {
        let name = format!("ronchi_{:05}.u32", self.counter);
        self.counter += 1;
        let mut bytes = Vec::with_capacity(y.counts.len() * 4);
        for &c in &y.counts {
            bytes.extend_from_slice(&c.to_le_bytes());
        }
        fs::write(self.dir.join(&name), &bytes)?;
        self.rows.push(format!("{name}\t{seed}\t{}", format_state(&y.state_tag, self.n)));
        Ok(())
    }

    pub fn append_spectrum(
        &mut self,
        s: &PowerSpectrum,
        state: Option<&AberrationState>,
        seed: u64,
    ) -> Result<()> {
        let name = format!("spectrum_{:05}.f32", self.counter);
        self.counter += 1;
        let mut bytes = Vec::with_capacity(s.values.len() * 4);
        for &v in &s.values {
            bytes.extend_from_slice(&(v as f32).to_le_bytes());
        }
        fs::write(self.dir.join(&name), &bytes)?;
        self.rows.push(format!(
            "{name}\t{seed}\t{}",
            format_state(&state.cloned(), self.n)
        ));
        Ok(())
    }

    pub fn finish(self) -> Result<()> {
        let mut out = String::new();
        for line in &self.config_lines {
            out.push_str(line);
            out.push('\n');
        }
        out.push_str(&format!("file\tseed\t{}\n", state_columns(self.n)));
        for row in &self.rows {
            out.push_str(row);
            out.push('\n');
        }
        fs::write(self.dir.join(INDEX_FILE), out)?;
        Ok(())
    }
}

/// Parse the sidecar index of a dataset directory.
pub fn read_index(dir: &Path) -> Result<Vec<Record>> {
    let text = fs::read_to_string(dir.join(INDEX_FILE))?;
    let mut records = Vec::new();
    let mut header_seen = false;
    for line in text.lines() {
        if line.starts_with('#') || line.trim().is_empty() {
            continue;
        }
        if !header_seen {
            header_seen = true; // column header row
            continue;
        }
        let cols: Vec<&str> = line.split('\t').collect();
        if cols.len() < 2 {
            return Err(Error::Persist(format!("malformed index row: {line}")));
        }
        let seed: u64 = cols[1]
            .parse()
            .map_err(|_| Error::Persist(format!("bad seed in index row: {line}")))?;
        let coeffs: Vec<f64> = cols[2..]
            .iter()
            .map(|c| c.parse::<f64>().unwrap_or(f64::NAN))
            .collect();
        let state = if coeffs.is_empty() || coeffs.iter().any(|v| v.is_nan()) {
            None
        } else {
            Some(AberrationState::new(coeffs)?)
        };
        records.push(Record { file: cols[0].to_string(), seed, state });
    }
    Ok(records)
}

/// Load a counts grid written by `append_counts`.
pub fn read_counts_grid(path: &Path, side: usize) -> Result<Vec<u32>> {
    let bytes = fs::read(path)?;
    if bytes.len() != side * side * 4 {
        return Err(Error::Persist(format!(
            "counts grid {} has {} bytes, expected {}",
            path.display(),
            bytes.len(),
            side * side * 4
        )));
    }
    Ok(bytes
        .chunks_exact(4)
        .map(|b| u32::from_le_bytes(b.try_into().unwrap()))
        .collect())
}

/// Load a spectrum grid written by `append_spectrum`.
pub fn read_spectrum_grid(path: &Path, side: usize) -> Result<Vec<f64>> {
    let bytes = fs::read(path)?;
    if bytes.len() != side * side * 4 {
        return Err(Error::Persist(format!(
            "spectrum grid {} has {} bytes, expected {}",
            path.display(),
            bytes.len(),
            side * side * 4
        )));
    }
    Ok(bytes
        .chunks_exact(4)
        .map(|b| f32::from_le_bytes(b.try_into().unwrap()) as f64)
        .collect())
}

/// Side length recorded in a dataset directory's index.
pub fn read_side(dir: &Path) -> Result<usize> {
    let text = fs::read_to_string(dir.join(INDEX_FILE))?;
    for line in text.lines() {
        if let Some(rest) = line.strip_prefix("# side = ") {
            return rest
                .trim()
                .parse()
                .map_err(|_| Error::Persist("bad side in index".into()));
        }
    }
    Err(Error::Persist("index has no side entry".into()))
}

/// Load every spectrum in a dataset directory together with its state tag.
pub fn load_spectra(dir: &Path) -> Result<Vec<(PowerSpectrum, Option<AberrationState>)>> {
    let side = read_side(dir)?;
    let mut out = Vec::new();
    for record in read_index(dir)? {
        if !record.file.ends_with(".f32") {
            continue;
        }
        let values = read_spectrum_grid(&dir.join(&record.file), side)?;
        let clamped: Vec<f64> = values.iter().map(|v| v.max(0.0)).collect();
        out.push((PowerSpectrum::new(clamped, side)?, record.state));
    }
    Ok(out)
}

/// Load every counts grid in a dataset directory.
pub fn load_ronchigrams(dir: &Path) -> Result<Vec<Ronchigram>> {
    let side = read_side(dir)?;
    let mut out = Vec::new();
    for record in read_index(dir)? {
        if !record.file.ends_with(".u32") {
            continue;
        }
        let counts = read_counts_grid(&dir.join(&record.file), side)?;
        out.push(Ronchigram { counts, side, state_tag: record.state });
    }
    Ok(out)
}
