//! Fast numerical health checks on the decomposition: orthonormality,
//! agreement with the hypergeometric reference, perfect reconstruction and
//! linearity.

use crate::error::Result;
use crate::features::{integrate_bands, partition_bands, IntegrationMode};
use crate::image::Image;
use crate::keyed::{KeyStream, DEFAULT_SPATIAL_VALUES};
use crate::krawtchouk::{
    decompose, eval_hypergeometric_reference, orthonormality_deviation, reconstruct,
    PolynomialTable, OrderMask, SpatialConfig,
};

#[derive(Clone, Debug, PartialEq)]
pub struct SuiteResult {
    pub name: &'static str,
    pub passed: bool,
    /// Worst observed error.
    pub worst: f64,
    pub tolerance: f64,
}

fn suite(name: &'static str, worst: f64, tolerance: f64) -> SuiteResult {
    SuiteResult {
        name,
        passed: worst < tolerance,
        worst,
        tolerance,
    }
}

fn random_image(w: usize, h: usize, seed: u64) -> Image {
    let mut rng = KeyStream::new(seed);
    Image::content(w, h, (0..w * h).map(|_| rng.next_unit()).collect()).expect("unit draws")
}

pub fn orthonormality_suite() -> Result<SuiteResult> {
    let mut worst = 0.0f64;
    for &p in &DEFAULT_SPATIAL_VALUES {
        worst = worst.max(orthonormality_deviation(p, 27, 20)?);
    }
    Ok(suite("orthonormality", worst, 1e-8))
}

pub fn oracle_suite() -> Result<SuiteResult> {
    let mut worst = 0.0f64;
    for &p in &[0.25, 0.5, 0.75] {
        for &domain in &[12, 20, 32] {
            let table = PolynomialTable::build(p, domain, 12)?;
            for l in 0..=12 {
                for z in 0..=domain {
                    let r = eval_hypergeometric_reference(l, z, p, domain)?;
                    worst = worst.max((table.value(l, z) - r).abs());
                }
            }
        }
    }
    Ok(suite("oracle", worst, 1e-9))
}

pub fn reconstruction_suite() -> Result<SuiteResult> {
    let mut worst = 0.0f64;
    let mask = OrderMask::full(27, 27);
    for seed in 0..5u64 {
        let img = random_image(28, 28, seed);
        let p = DEFAULT_SPATIAL_VALUES[seed as usize % 5];
        let cfg = SpatialConfig::new(p, 1.0 - p)?;
        let back = reconstruct(&decompose(&img, cfg, &mask)?)?;
        worst = worst.max(img.rmse(&back));
    }
    Ok(suite("reconstruction", worst, 1e-8))
}

pub fn linearity_suite() -> Result<SuiteResult> {
    let mut worst = 0.0f64;
    let cfg = SpatialConfig::new(0.375, 0.625)?;
    let mask = OrderMask::full(27, 27);
    let partition = partition_bands(28, 28, 8)?;
    for seed in 0..5u64 {
        let x = random_image(28, 28, 2 * seed + 100);
        let mut d = random_image(28, 28, 2 * seed + 101);
        for v in d.pixels_mut() {
            *v = (*v - 0.5) * 0.2;
        }
        let cx = decompose(&x, cfg, &mask)?;
        let cd = decompose(&d, cfg, &mask)?;
        let cs = decompose(&x.add(&d), cfg, &mask)?;
        for ((s, a), b) in cs.flat_values().iter().zip(cx.flat_values()).zip(cd.flat_values()) {
            worst = worst.max((s - a - b).abs());
        }
        let fx = integrate_bands(&cx, &partition, IntegrationMode::Raw)?;
        let fd = integrate_bands(&cd, &partition, IntegrationMode::Raw)?;
        let fs = integrate_bands(&cs, &partition, IntegrationMode::Raw)?;
        for ((s, a), b) in fs.values().iter().zip(fx.values()).zip(fd.values()) {
            worst = worst.max((s - a - b).abs());
        }
    }
    Ok(suite("linearity", worst, 1e-12))
}

/// All four suites in a fixed order.
pub fn run_all() -> Result<Vec<SuiteResult>> {
    Ok(vec![
        orthonormality_suite()?,
        oracle_suite()?,
        reconstruction_suite()?,
        linearity_suite()?,
    ])
}

#[cfg(test)]
mod tests {
    #[test]
    fn suites_pass() {
        for s in super::run_all().unwrap() {
            assert!(s.passed, "{s:?}");
        }
    }
}
