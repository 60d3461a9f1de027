//! Two-class, two-domain toy corpus: a filled disc (class 0) or a ring
//! (class 1) on a textured background. The target domain is brighter by
//! `shift`, has a weaker object contrast and carries a stronger, denser and
//! differently oriented background texture.

use std::fs;
use std::path::{Path, PathBuf};

use rand::Rng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};

use super::manifest::{write_manifest, Domain, SampleRecord};
use crate::error::{Error, Result};
use crate::imaging::{canonicalize, RawImage};
use crate::seed;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SynthConfig {
    /// Images per class and per domain.
    pub per_class: usize,
    /// Target brightness offset; also scales the contrast and texture change.
    pub shift: f64,
    /// Canonical side length of the emitted images.
    pub side: usize,
    /// Per-pixel Gaussian noise level.
    pub noise: f64,
}

impl Default for SynthConfig {
    fn default() -> Self {
        SynthConfig {
            per_class: 100,
            shift: 0.3,
            side: 32,
            noise: 0.03,
        }
    }
}

impl SynthConfig {
    pub fn validate(&self) -> Result<()> {
        if self.per_class == 0 || self.side < 4 {
            return Err(Error::Config(format!(
                "synthetic corpus needs per_class >= 1 and side >= 4, got {} and {}",
                self.per_class, self.side
            )));
        }
        if !(0.0..=0.5).contains(&self.shift) || !(self.noise >= 0.0 && self.noise <= 0.2) {
            return Err(Error::Config(format!(
                "shift must lie in [0, 0.5] and noise in [0, 0.2], got {} and {}",
                self.shift, self.noise
            )));
        }
        Ok(())
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct SynthOutput {
    pub source_manifest: PathBuf,
    pub target_manifest: PathBuf,
    pub source: Vec<SampleRecord>,
    pub target: Vec<SampleRecord>,
}

/// Renders one image at `size × size`; `shift = 0` gives the source look.
pub fn render(class: usize, shift: f64, size: usize, noise: f64, rng: &mut ChaCha8Rng) -> RawImage {
    let background = rng.gen_range(0.10..0.20);
    let contrast = rng.gen_range(0.20..0.30) * (1.0 - 0.5 * shift);
    let cx = rng.gen_range(0.38..0.62);
    let cy = rng.gen_range(0.38..0.62);
    let radius = rng.gen_range(0.24..0.32);
    let inner = if class == 0 { 0.0 } else { 0.55 * radius };

    // Background texture: a plane wave whose amplitude, frequency and
    // orientation depend on the domain.
    let amplitude = 0.03 + 0.1 * shift;
    let frequency = 3.0 + 5.0 * shift;
    let angle = rng.gen_range(0.0..std::f64::consts::PI) * (1.0 - shift) + 0.25 * std::f64::consts::PI * shift;
    let phase = rng.gen_range(0.0..std::f64::consts::TAU);
    let (ux, uy) = (angle.cos(), angle.sin());

    let normal = Normal::new(0.0, noise.max(f64::MIN_POSITIVE)).expect("finite std");
    let mut pixels = Vec::with_capacity(size * size);
    for r in 0..size {
        let y = (r as f64 + 0.5) / size as f64;
        for c in 0..size {
            let x = (c as f64 + 0.5) / size as f64;
            let d = ((x - cx).powi(2) + (y - cy).powi(2)).sqrt();
            let object = if d <= radius && d >= inner { contrast } else { 0.0 };
            let texture = amplitude * (std::f64::consts::TAU * frequency * (ux * x + uy * y) + phase).sin();
            let n = if noise > 0.0 { normal.sample(rng) } else { 0.0 };
            pixels.push((background + shift + object + texture + n).clamp(0.0, 1.0));
        }
    }
    RawImage::new(size, size, pixels).expect("pixels clamped to the unit range")
}

fn emit(dir: &Path, domain: Domain, cfg: &SynthConfig, rng: &mut ChaCha8Rng) -> Result<Vec<SampleRecord>> {
    fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
    let shift = match domain {
        Domain::Source => 0.0,
        Domain::Target => cfg.shift,
    };
    let mut records = Vec::with_capacity(2 * cfg.per_class);
    for i in 0..cfg.per_class {
        for class in 0..2 {
            // Rendered at twice the resolution, then canonicalized down.
            let raw = render(class, shift, 2 * cfg.side, cfg.noise, rng);
            let (img, geometry) = canonicalize(&raw, cfg.side, 1)?;
            let path = dir.join(format!("{class}_{i:04}.png"));
            img.save_png(&path)?;
            records.push(SampleRecord {
                path,
                label: Some(class),
                domain,
                geometry: Some(geometry),
            });
        }
    }
    Ok(records)
}

/// Writes `source/`, `target/`, `source.csv` and `target.csv` under `out`.
pub fn synth_domains(cfg: &SynthConfig, seed: u64, out: &Path) -> Result<SynthOutput> {
    cfg.validate()?;
    let source = emit(
        &out.join("source"),
        Domain::Source,
        cfg,
        &mut seed::rng(seed, "synth/source"),
    )?;
    let target = emit(
        &out.join("target"),
        Domain::Target,
        cfg,
        &mut seed::rng(seed, "synth/target"),
    )?;
    let source_manifest = out.join("source.csv");
    let target_manifest = out.join("target.csv");
    write_manifest(&source_manifest, &source)?;
    write_manifest(&target_manifest, &target)?;
    Ok(SynthOutput {
        source_manifest,
        target_manifest,
        source,
        target,
    })
}
