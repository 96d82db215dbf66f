//! Seeded synthetic radar sequences.
//!
//! Each sequence is a sum of Gaussian storm cells. A cell moves with a
//! constant velocity (a shared steering flow plus a per-cell perturbation),
//! its amplitude grows or decays geometrically per frame, and its width
//! spreads by diffusion while conserving integrated intensity. Values are
//! rounded and clipped to `0..=255`.

use ndarray::Array3;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use super::RadarSequence;
use crate::error::{Error, Result};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct SyntheticGenConfig {
    pub n_sequences: usize,
    pub height: usize,
    pub width: usize,
    pub t_total: usize,
    /// Inclusive range of storm-cell counts per sequence.
    pub n_cells: (usize, usize),
    /// Steering-flow speed range in pixels per frame.
    pub speed: (f64, f64),
    /// Maximum per-cell deviation from the steering flow, pixels per frame.
    pub velocity_jitter: f64,
    /// Growth of the squared cell width per frame (pixels squared).
    pub diffusion: f64,
    /// Per-frame multiplicative amplitude factor range.
    pub growth: (f64, f64),
    /// Initial peak intensity range in raw units.
    pub peak_intensity: (f64, f64),
    /// Initial cell width (Gaussian sigma) range in pixels at a 64-pixel grid;
    /// scaled linearly with the smaller grid side.
    pub cell_sigma: (f64, f64),
    /// Fraction of sequences guaranteed to contain a cell at the top of the
    /// peak range fully inside the domain in the first frame.
    pub heavy_fraction: f64,
    pub interval_minutes: u32,
    pub seed: u64,
}

impl Default for SyntheticGenConfig {
    fn default() -> Self {
        Self {
            n_sequences: 600,
            height: 64,
            width: 64,
            t_total: 25,
            n_cells: (2, 6),
            speed: (0.5, 2.0),
            velocity_jitter: 0.3,
            diffusion: 0.15,
            growth: (0.97, 1.03),
            peak_intensity: (80.0, 255.0),
            cell_sigma: (3.0, 8.0),
            heavy_fraction: 0.5,
            interval_minutes: 5,
            seed: 0,
        }
    }
}

impl SyntheticGenConfig {
    pub fn validate(&self) -> Result<()> {
        fn range(key: &str, (lo, hi): (f64, f64)) -> Result<()> {
            if !(lo.is_finite() && hi.is_finite()) || lo > hi {
                return Err(Error::config(key, format!("empty or non-finite range [{lo}, {hi}]")));
            }
            Ok(())
        }
        if self.height == 0 || self.width == 0 || self.t_total == 0 {
            return Err(Error::config("synthetic.height/width/t_total", "must be positive"));
        }
        if self.n_cells.0 > self.n_cells.1 || self.n_cells.1 == 0 {
            return Err(Error::config("synthetic.n_cells", "need 1 <= max and min <= max"));
        }
        range("synthetic.speed", self.speed)?;
        range("synthetic.growth", self.growth)?;
        range("synthetic.peak_intensity", self.peak_intensity)?;
        range("synthetic.cell_sigma", self.cell_sigma)?;
        if self.speed.0 < 0.0 || self.growth.0 <= 0.0 || self.cell_sigma.0 <= 0.0 {
            return Err(Error::config("synthetic", "speed, growth and cell_sigma must be positive"));
        }
        if self.peak_intensity.0 < 0.0 || self.peak_intensity.1 > 255.0 {
            return Err(Error::config("synthetic.peak_intensity", "must lie within [0, 255]"));
        }
        if self.diffusion < 0.0 || self.velocity_jitter < 0.0 {
            return Err(Error::config("synthetic.diffusion", "must be nonnegative"));
        }
        if !(0.0..=1.0).contains(&self.heavy_fraction) {
            return Err(Error::config("synthetic.heavy_fraction", "must lie in [0, 1]"));
        }
        if self.interval_minutes == 0 {
            return Err(Error::config("synthetic.interval_minutes", "must be positive"));
        }
        Ok(())
    }
}

struct Cell {
    x: f64,
    y: f64,
    vx: f64,
    vy: f64,
    amplitude: f64,
    growth: f64,
    sigma2: f64,
}

/// Generates `n_sequences` sequences; a pure function of the config.
pub fn generate_synthetic(config: &SyntheticGenConfig) -> Result<Vec<RadarSequence>> {
    config.validate()?;
    let n = config.n_sequences;
    Ok((0..n)
        .into_par_iter()
        .map(|i| {
            // floor((i+1)f) > floor(if) marks exactly floor(n f) evenly spread sequences.
            let f = config.heavy_fraction;
            let heavy = ((i + 1) as f64 * f + 1e-9).floor() > (i as f64 * f + 1e-9).floor();
            generate_one(config, i, heavy)
        })
        .collect())
}

fn generate_one(config: &SyntheticGenConfig, index: usize, heavy: bool) -> RadarSequence {
    // Independent stream per sequence so generation order does not matter.
    let mut rng = ChaCha8Rng::seed_from_u64(config.seed);
    rng.set_stream(index as u64 + 1);

    let (h, w) = (config.height as f64, config.width as f64);
    let scale = config.height.min(config.width) as f64 / 64.0;
    let speed = sample(&mut rng, config.speed) * scale;
    let heading = rng.random_range(0.0..std::f64::consts::TAU);
    let (steer_x, steer_y) = (speed * heading.cos(), speed * heading.sin());

    let n_cells = rng.random_range(config.n_cells.0..=config.n_cells.1);
    let mut cells: Vec<Cell> = (0..n_cells)
        .map(|_| {
            let sigma = sample(&mut rng, config.cell_sigma) * scale;
            let margin = 2.0 * sigma;
            let jitter = config.velocity_jitter * scale;
            Cell {
                x: rng.random_range(-margin..w + margin),
                y: rng.random_range(-margin..h + margin),
                vx: steer_x + rng.random_range(-jitter..=jitter),
                vy: steer_y + rng.random_range(-jitter..=jitter),
                amplitude: sample(&mut rng, config.peak_intensity),
                growth: sample(&mut rng, config.growth),
                sigma2: sigma * sigma,
            }
        })
        .collect();
    if heavy {
        let c = &mut cells[0];
        let sigma = c.sigma2.sqrt();
        c.x = rng.random_range(sigma.min(w / 2.0)..=(w - sigma).max(w / 2.0));
        c.y = rng.random_range(sigma.min(h / 2.0)..=(h - sigma).max(h / 2.0));
        c.amplitude = config.peak_intensity.1;
    }

    let mut frames = Array3::<u8>::zeros((config.t_total, config.height, config.width));
    let mut field = vec![0.0f64; config.height * config.width];
    for t in 0..config.t_total {
        field.iter_mut().for_each(|v| *v = 0.0);
        for c in &cells {
            let tf = t as f64;
            let sigma2 = c.sigma2 + config.diffusion * scale * scale * tf;
            let amp = c.amplitude * c.growth.powf(tf) * c.sigma2 / sigma2;
            let (cx, cy) = (c.x + c.vx * tf, c.y + c.vy * tf);
            let reach = 4.0 * sigma2.sqrt();
            let y0 = ((cy - reach).floor().max(0.0)) as usize;
            let y1 = ((cy + reach).ceil().min(h - 1.0)).max(-1.0);
            let x0 = ((cx - reach).floor().max(0.0)) as usize;
            let x1 = ((cx + reach).ceil().min(w - 1.0)).max(-1.0);
            if y1 < 0.0 || x1 < 0.0 {
                continue;
            }
            for py in y0..=(y1 as usize) {
                let dy2 = (py as f64 - cy).powi(2);
                let row = &mut field[py * config.width..(py + 1) * config.width];
                for (px, v) in row.iter_mut().enumerate().take(x1 as usize + 1).skip(x0) {
                    let d2 = dy2 + (px as f64 - cx).powi(2);
                    *v += amp * (-d2 / (2.0 * sigma2)).exp();
                }
            }
        }
        for (dst, &v) in frames.index_axis_mut(ndarray::Axis(0), t).iter_mut().zip(&field) {
            *dst = v.round().clamp(0.0, 255.0) as u8;
        }
    }
    RadarSequence::new(format!("syn-{}-{index:05}", config.seed), frames, config.interval_minutes)
}

fn sample(rng: &mut ChaCha8Rng, (lo, hi): (f64, f64)) -> f64 {
    if lo == hi {
        lo
    } else {
        rng.random_range(lo..=hi)
    }
}

#[cfg(test)]
mod tests {
    use rand::seq::SliceRandom;

    use super::*;

    fn small(n: usize, seed: u64) -> SyntheticGenConfig {
        SyntheticGenConfig {
            n_sequences: n,
            height: 32,
            width: 32,
            t_total: 25,
            seed,
            ..SyntheticGenConfig::default()
        }
    }

    #[test]
    fn same_seed_is_bit_identical() {
        let a = generate_synthetic(&small(5, 3)).unwrap();
        let b = generate_synthetic(&small(5, 3)).unwrap();
        assert_eq!(a, b);
        let c = generate_synthetic(&small(5, 4)).unwrap();
        assert_ne!(a[0].frames, c[0].frames);
    }

    #[test]
    fn zero_sequences() {
        assert!(generate_synthetic(&small(0, 1)).unwrap().is_empty());
    }

    #[test]
    fn infeasible_peak_range_is_a_config_error() {
        let mut cfg = small(1, 0);
        cfg.peak_intensity = (240.0, 200.0);
        assert!(matches!(generate_synthetic(&cfg), Err(Error::Config { .. })));
    }

    #[test]
    fn heavy_rain_count_for_seed_7() {
        let cfg = SyntheticGenConfig {
            n_sequences: 10,
            peak_intensity: (200.0, 255.0),
            heavy_fraction: 0.0,
            seed: 7,
            ..SyntheticGenConfig::default()
        };
        let data = generate_synthetic(&cfg).unwrap();
        let heavy = data.iter().filter(|s| s.frames.iter().any(|&v| v > 219)).count();
        // Pinned from the reference generator.
        assert_eq!(heavy, HEAVY_SEED7);
        assert!(heavy >= 8);
    }

    const HEAVY_SEED7: usize = 8;

    #[test]
    fn heavy_fraction_is_guaranteed() {
        let cfg = SyntheticGenConfig {
            n_sequences: 40,
            peak_intensity: (20.0, 255.0),
            n_cells: (1, 1),
            heavy_fraction: 0.5,
            seed: 11,
            ..small(40, 11)
        };
        let data = generate_synthetic(&cfg).unwrap();
        let heavy = data.iter().filter(|s| s.frames.iter().any(|&v| v > 219)).count();
        assert!(heavy >= 20, "{heavy} heavy sequences");
    }

    fn correlation(a: &[f64], b: &[f64]) -> f64 {
        let n = a.len() as f64;
        let (ma, mb) = (a.iter().sum::<f64>() / n, b.iter().sum::<f64>() / n);
        let cov: f64 = a.iter().zip(b).map(|(x, y)| (x - ma) * (y - mb)).sum();
        let va: f64 = a.iter().map(|x| (x - ma).powi(2)).sum();
        let vb: f64 = b.iter().map(|y| (y - mb).powi(2)).sum();
        cov / (va * vb).sqrt().max(1e-12)
    }

    #[test]
    fn consecutive_frames_are_more_correlated_than_shuffled_pairs() {
        let data = generate_synthetic(&small(8, 5)).unwrap();
        let frames: Vec<Vec<f64>> = data
            .iter()
            .flat_map(|s| s.frames.outer_iter().map(|f| f.iter().map(|&v| v as f64).collect()).collect::<Vec<_>>())
            .collect();
        let per_seq = 25;
        let mut consecutive = Vec::new();
        for s in 0..data.len() {
            for t in 0..per_seq - 1 {
                consecutive.push(correlation(&frames[s * per_seq + t], &frames[s * per_seq + t + 1]));
            }
        }
        let mut order: Vec<usize> = (0..frames.len()).collect();
        order.shuffle(&mut ChaCha8Rng::seed_from_u64(0));
        let shuffled: Vec<f64> = order.windows(2).map(|p| correlation(&frames[p[0]], &frames[p[1]])).collect();
        let mean = |v: &[f64]| v.iter().sum::<f64>() / v.len() as f64;
        assert!(mean(&consecutive) > mean(&shuffled) + 0.3, "{} vs {}", mean(&consecutive), mean(&shuffled));
    }
}
