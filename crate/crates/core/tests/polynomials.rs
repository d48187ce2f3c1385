//! Weighted Krawtchouk tables against oracles built without the recurrence.

use krawdetect::krawtchouk::{
    eval_hypergeometric_reference, orthonormality_deviation, PolynomialTable,
};
use krawdetect::Error;
use num_bigint::BigInt;
use num_rational::BigRational;
use num_traits::{One, Signed, ToPrimitive, Zero};
use proptest::prelude::*;

fn rat(n: i64, d: i64) -> BigRational {
    BigRational::new(BigInt::from(n), BigInt::from(d))
}

/// Weighted orthonormal polynomials for the binomial weight, obtained by
/// exact Gram-Schmidt on monomials. Sign fixed by a positive value at z = 0.
fn gram_schmidt(p: (i64, i64), domain: usize, top: usize) -> Vec<Vec<f64>> {
    let pr = rat(p.0, p.1);
    let qr = BigRational::one() - &pr;
    let mut weight = Vec::with_capacity(domain + 1);
    let mut binom = BigRational::one();
    for z in 0..=domain {
        if z > 0 {
            binom = binom * rat((domain - z + 1) as i64, z as i64);
        }
        let w = &binom
            * num_traits::pow(pr.clone(), z)
            * num_traits::pow(qr.clone(), domain - z);
        weight.push(w);
    }
    let dot = |a: &[BigRational], b: &[BigRational]| {
        a.iter()
            .zip(b)
            .zip(&weight)
            .fold(BigRational::zero(), |acc, ((x, y), w)| acc + x * y * w)
    };
    let mut basis: Vec<Vec<BigRational>> = Vec::new();
    let mut norms: Vec<BigRational> = Vec::new();
    let mut rows = Vec::new();
    for l in 0..=top {
        let mut q: Vec<BigRational> = (0..=domain)
            .map(|z| num_traits::pow(rat(z as i64, 1), l))
            .collect();
        let mono = q.clone();
        for (b, n) in basis.iter().zip(&norms) {
            let c = dot(&mono, b) / n;
            for (qi, bi) in q.iter_mut().zip(b) {
                *qi -= &c * bi;
            }
        }
        let norm = dot(&q, &q);
        let sign = if q[0].is_negative() { -1.0 } else { 1.0 };
        let row = q
            .iter()
            .zip(&weight)
            .map(|(v, w)| {
                let sq = (v * v * w / &norm).to_f64().unwrap();
                let s = if v.is_negative() { -1.0 } else { 1.0 };
                sign * s * sq.sqrt()
            })
            .collect();
        rows.push(row);
        basis.push(q);
        norms.push(norm);
    }
    rows
}

#[test]
fn table_matches_exact_gram_schmidt() {
    let ps = [(1, 4), (3, 8), (1, 2), (5, 8), (3, 4)];
    let mut worst = 0.0f64;
    for &p in &ps {
        for domain in [1usize, 2, 5, 12, 20, 27, 32] {
            let top = domain.min(12);
            let oracle = gram_schmidt(p, domain, top);
            let table = PolynomialTable::build(p.0 as f64 / p.1 as f64, domain, top).unwrap();
            for (l, row) in oracle.iter().enumerate() {
                for (z, v) in row.iter().enumerate() {
                    worst = worst.max((table.value(l, z) - v).abs());
                }
            }
        }
    }
    assert!(worst < 1e-9, "worst {worst:e}");
}

#[test]
fn closed_form_rows() {
    let t = PolynomialTable::build(0.5, 2, 2).unwrap();
    assert!((t.value(0, 0) - 0.5).abs() < 1e-15);
    assert!((t.value(0, 1) - 0.5f64.sqrt()).abs() < 1e-15);
    // first-order row vanishes at z = PL
    for (p, domain) in [(0.5, 2usize), (0.25, 8), (0.75, 20)] {
        let t = PolynomialTable::build(p, domain, 1).unwrap();
        let z = (p * domain as f64).round() as usize;
        assert!(t.value(1, z).abs() < 1e-14);
    }
}

#[test]
fn orthonormality_examples() {
    assert!(orthonormality_deviation(0.5, 27, 20).unwrap() < 1e-10);
    assert!(orthonormality_deviation(0.25, 27, 20).unwrap() < 1e-8);
    for p in [0.1, 0.5, 0.9] {
        for domain in [1usize, 7, 27, 64] {
            assert!(orthonormality_deviation(p, domain, 0).unwrap() < 1e-12);
        }
    }
}

#[test]
fn reference_order_one_matches_table_everywhere() {
    for p in [0.25, 0.5, 0.75] {
        for domain in 1..=32usize {
            let t = PolynomialTable::build(p, domain, 1).unwrap();
            for z in 0..=domain {
                let r = eval_hypergeometric_reference(1, z, p, domain).unwrap();
                assert!((t.value(1, z) - r).abs() < 1e-12, "p={p} L={domain} z={z}");
            }
        }
    }
}

#[test]
fn argument_errors() {
    assert!(matches!(PolynomialTable::build(0.5, 4, 5), Err(Error::Order(_))));
    assert!(matches!(PolynomialTable::build(1.0, 4, 2), Err(Error::Range(_))));
    assert!(matches!(PolynomialTable::build(0.0, 4, 2), Err(Error::Range(_))));
    assert!(matches!(
        eval_hypergeometric_reference(5, 0, 0.5, 4),
        Err(Error::Order(_))
    ));
}

#[test]
fn zero_structure() {
    for p in [0.25, 0.375, 0.5, 0.625, 0.75] {
        let t = PolynomialTable::build(p, 27, 20).unwrap();
        for l in 0..=20 {
            assert_eq!(t.sign_changes(l), l, "p={p} l={l}");
            assert_eq!(t.zero_locations(l).len(), l);
        }
    }
    for l in [2usize, 4, 8] {
        let lo = PolynomialTable::build(0.25, 100, l).unwrap().zero_locations(l);
        let hi = PolynomialTable::build(0.75, 100, l).unwrap().zero_locations(l);
        let median = |v: &[f64]| (v[(v.len() - 1) / 2] + v[v.len() / 2]) / 2.0;
        assert!(median(&lo) < 50.0 && median(&hi) > 50.0, "l={l}");
    }
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(64))]

    #[test]
    fn recurrence_agrees_with_series(
        p in 0.2f64..0.8,
        domain in 1usize..=32,
        l_frac in 0.0f64..1.0,
        z_frac in 0.0f64..=1.0,
    ) {
        let top = domain.min(12);
        let l = ((top as f64) * l_frac) as usize;
        let z = ((domain as f64) * z_frac).round() as usize;
        let t = PolynomialTable::build(p, domain, top).unwrap();
        let r = eval_hypergeometric_reference(l, z, p, domain).unwrap();
        prop_assert!((t.value(l, z) - r).abs() < 1e-9);
    }

    #[test]
    fn rows_are_orthonormal(p in 0.15f64..0.85, domain in 1usize..=40) {
        let top = domain.min(16);
        prop_assert!(orthonormality_deviation(p, domain, top).unwrap() < 1e-8);
    }

    #[test]
    fn mirrored_parameter_reflects_rows(p in 0.1f64..0.9, domain in 2usize..=30) {
        // K̄_l(z; P, L) = (-1)^l K̄_l(L - z; 1 - P, L)
        let top = domain.min(10);
        let a = PolynomialTable::build(p, domain, top).unwrap();
        let b = PolynomialTable::build(1.0 - p, domain, top).unwrap();
        for l in 0..=top {
            let s = if l % 2 == 0 { 1.0 } else { -1.0 };
            for z in 0..=domain {
                prop_assert!((a.value(l, z) - s * b.value(l, domain - z)).abs() < 1e-9);
            }
        }
    }
}
