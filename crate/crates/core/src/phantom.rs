//! Synthetic chest phantoms: a bright ellipse with rib banding on a dark
//! background, optionally carrying one Gaussian lesion blob.

use std::fmt::Write as _;
use std::fs;
use std::path::Path;

use rand::Rng as _;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};

use crate::image_io::{load_pgm, save_pgm};
use crate::masking::RegionMask;
use crate::par::{self, Execution};
use crate::patch::{ImageGray, PatchConfig};
use crate::rng::{self, Purpose};
use crate::{Error, Result};

/// Generator constants. Lengths are fractions of the image side.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct PhantomConfig {
    pub background: f64,
    pub interior_lift: f64,
    /// Horizontal and vertical semi-axes.
    pub axes: (f64, f64),
    pub rib_amplitude: f64,
    pub rib_period: f64,
    pub lesion_amplitude: f64,
    pub lesion_sigma: f64,
    pub noise_std: f64,
}

impl Default for PhantomConfig {
    fn default() -> Self {
        PhantomConfig {
            background: 0.05,
            interior_lift: 0.30,
            axes: (0.35, 0.45),
            rib_amplitude: 0.08,
            rib_period: 1.0 / 8.0,
            lesion_amplitude: 0.3,
            lesion_sigma: 1.0 / 16.0,
            noise_std: 0.02,
        }
    }
}

impl PhantomConfig {
    pub fn validate(&self) -> Result<()> {
        let (ax, ay) = self.axes;
        if !(ax > 0.0 && ax <= 0.5 && ay > 0.0 && ay <= 0.5) {
            return Err(Error::config("phantom semi-axes must lie in (0, 0.5]"));
        }
        if !(self.rib_period > 0.0 && self.lesion_sigma > 0.0 && self.noise_std >= 0.0) {
            return Err(Error::config("phantom period, sigma and noise must be positive"));
        }
        Ok(())
    }

    /// Ellipse level of pixel-space point `(y, x)`: `< 1` strictly inside.
    fn level(&self, side: usize, y: f64, x: f64) -> f64 {
        let s = side as f64;
        let (dx, dy) = (x - s / 2.0, y - s / 2.0);
        (dx / (self.axes.0 * s)).powi(2) + (dy / (self.axes.1 * s)).powi(2)
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct PhantomSample {
    pub image: ImageGray,
    pub region: RegionMask,
    pub label: bool,
    pub seed: u64,
    /// Lesion center in pixel coordinates `(row, col)`.
    pub lesion_center: Option<(f64, f64)>,
}

/// A patch is inside the chest when at least half of its pixel centers are.
pub fn chest_region(patch: &PatchConfig, cfg: &PhantomConfig) -> Result<RegionMask> {
    patch.validate()?;
    let (g, p, side) = (patch.grid_side(), patch.patch_side, patch.image_side);
    let inside = (0..g * g)
        .map(|k| {
            let (r0, c0) = ((k / g) * p, (k % g) * p);
            let hits = (0..p * p)
                .filter(|i| {
                    let y = (r0 + i / p) as f64 + 0.5;
                    let x = (c0 + i % p) as f64 + 0.5;
                    cfg.level(side, y, x) <= 1.0
                })
                .count();
            2 * hits >= p * p
        })
        .collect();
    RegionMask::new(g, inside)
}

pub fn synth_phantom(seed: u64, patch: &PatchConfig, lesion: bool) -> Result<PhantomSample> {
    synth_phantom_with(seed, patch, &PhantomConfig::default(), lesion)
}

pub fn synth_phantom_with(
    seed: u64,
    patch: &PatchConfig,
    cfg: &PhantomConfig,
    lesion: bool,
) -> Result<PhantomSample> {
    cfg.validate()?;
    let region = chest_region(patch, cfg)?;
    if region.inside_count() == 0 {
        return Err(Error::config("chest ellipse covers no patch"));
    }
    let side = patch.image_side;
    let s = side as f64;
    let mut rng = rng::stream(seed, Purpose::Data);
    let phase = rng.gen_range(0.0..std::f64::consts::TAU);
    let lesion_center = if lesion {
        let g = patch.grid_side();
        loop {
            let y = rng.gen_range(0.0..s);
            let x = rng.gen_range(0.0..s);
            let token = (y as usize / patch.patch_side) * g + x as usize / patch.patch_side;
            if cfg.level(side, y, x) < 0.49 && region.is_inside(token) {
                break Some((y, x));
            }
        }
    } else {
        None
    };
    let noise = Normal::new(0.0, cfg.noise_std).map_err(|e| Error::config(e.to_string()))?;
    let sigma = cfg.lesion_sigma * s;
    let period = cfg.rib_period * s;
    let pixels = (0..side * side)
        .map(|i| {
            let (y, x) = ((i / side) as f64 + 0.5, (i % side) as f64 + 0.5);
            let mut v = cfg.background;
            if cfg.level(side, y, x) <= 1.0 {
                v += cfg.interior_lift;
                v += cfg.rib_amplitude * (std::f64::consts::TAU * y / period + phase).sin();
            }
            if let Some((ly, lx)) = lesion_center {
                let d2 = (y - ly).powi(2) + (x - lx).powi(2);
                v += cfg.lesion_amplitude * (-d2 / (2.0 * sigma * sigma)).exp();
            }
            v += noise.sample(&mut rng);
            v.clamp(0.0, 1.0) as f32
        })
        .collect();
    Ok(PhantomSample {
        image: ImageGray::new(side, pixels)?,
        region,
        label: lesion,
        seed,
        lesion_center,
    })
}

/// Seed of sample `index` in the dataset drawn from `seed`.
pub fn sample_seed(seed: u64, index: usize) -> u64 {
    seed.wrapping_mul(1_000_000).wrapping_add(index as u64)
}

/// `count` phantoms, exactly `round(count·lesion_fraction)` with lesions, in
/// an order shuffled by `seed`.
pub fn dataset(seed: u64, count: usize, lesion_fraction: f64, patch: &PatchConfig) -> Result<Vec<PhantomSample>> {
    dataset_with(seed, count, lesion_fraction, patch, &PhantomConfig::default(), Execution::default())
}

pub fn dataset_with(
    seed: u64,
    count: usize,
    lesion_fraction: f64,
    patch: &PatchConfig,
    cfg: &PhantomConfig,
    exec: Execution,
) -> Result<Vec<PhantomSample>> {
    if !(0.0..=1.0).contains(&lesion_fraction) {
        return Err(Error::config(format!("lesion fraction {lesion_fraction} outside [0, 1]")));
    }
    if count >= 1_000_000 {
        return Err(Error::config("at most 999999 samples per dataset seed"));
    }
    let lesions = (count as f64 * lesion_fraction).round() as usize;
    let mut labels: Vec<bool> = (0..count).map(|i| i < lesions).collect();
    rand::seq::SliceRandom::shuffle(&mut labels[..], &mut rng::stream(seed, Purpose::Data));
    par::map_range(exec, count, |i| synth_phantom_with(sample_seed(seed, i), patch, cfg, labels[i]))
        .into_iter()
        .collect()
}

/// Writes `phantom_NNNNN.pgm` and `.region` files plus `manifest.csv`
/// (`seed,label,path,region_path`, paths relative to `dir`).
pub fn write_dataset(samples: &[PhantomSample], dir: &Path) -> Result<()> {
    fs::create_dir_all(dir)?;
    let mut manifest = String::from("seed,label,path,region_path\n");
    for (i, s) in samples.iter().enumerate() {
        let image = format!("phantom_{i:05}.pgm");
        let region = format!("phantom_{i:05}.region");
        save_pgm(&s.image, dir.join(&image))?;
        fs::write(dir.join(&region), s.region.to_string())?;
        let _ = writeln!(manifest, "{},{},{image},{region}", s.seed, s.label as u8);
    }
    fs::write(dir.join("manifest.csv"), manifest)?;
    Ok(())
}

/// Reads a directory written by [`write_dataset`]. Lesion centers are not stored.
pub fn read_dataset(dir: &Path) -> Result<Vec<PhantomSample>> {
    let text = fs::read_to_string(dir.join("manifest.csv"))?;
    let bad = |field: String| Error::Format { format: "manifest", field };
    let mut lines = text.lines();
    if lines.next() != Some("seed,label,path,region_path") {
        return Err(bad("header".into()));
    }
    lines
        .enumerate()
        .map(|(i, line)| {
            let cols: Vec<&str> = line.split(',').collect();
            let [seed, label, path, region] = cols[..] else {
                return Err(bad(format!("row {i}")));
            };
            let seed = seed.parse().map_err(|_| bad(format!("row {i} seed")))?;
            let label = match label {
                "0" => false,
                "1" => true,
                _ => return Err(bad(format!("row {i} label"))),
            };
            Ok(PhantomSample {
                image: load_pgm(dir.join(path))?,
                region: fs::read_to_string(dir.join(region))?.parse()?,
                label,
                seed,
                lesion_center: None,
            })
        })
        .collect()
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn generation_is_deterministic_and_in_range() {
        let cfg = PatchConfig::default();
        for lesion in [false, true] {
            let a = synth_phantom(11, &cfg, lesion).unwrap();
            let b = synth_phantom(11, &cfg, lesion).unwrap();
            assert_eq!(a, b);
            assert!(a.image.pixels().iter().all(|v| (0.0..=1.0).contains(v)));
            assert_eq!(a.region.grid_side(), cfg.grid_side());
        }
    }

    #[test]
    fn lesion_center_lies_in_region_patches() {
        let cfg = PatchConfig::default();
        let pc = PhantomConfig::default();
        for seed in 0..1000 {
            let s = synth_phantom(seed, &cfg, true).unwrap();
            let (y, x) = s.lesion_center.unwrap();
            let token = (y as usize / 8) * 8 + x as usize / 8;
            assert!(s.region.is_inside(token), "seed {seed}");
            assert!(pc.level(64, y, x) < 1.0);
        }
    }

    #[test]
    fn dataset_label_counts_and_order() {
        let cfg = PatchConfig::default();
        let d = dataset(3, 10, 0.5, &cfg).unwrap();
        assert_eq!(d.iter().filter(|s| s.label).count(), 5);
        let again = dataset(3, 10, 0.5, &cfg).unwrap();
        assert_eq!(d, again);
        let other = dataset(4, 10, 0.5, &cfg).unwrap();
        assert!(d.iter().all(|a| other.iter().all(|b| a.seed != b.seed)));
    }

    #[test]
    fn region_is_a_centered_blob() {
        let r = chest_region(&PatchConfig::default(), &PhantomConfig::default()).unwrap();
        let n = r.inside_count();
        assert!(n > 16 && n < 48, "{n}");
        assert!(r.is_inside(3 * 8 + 3) && !r.is_inside(0));
    }
}
