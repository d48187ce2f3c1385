//! Weighted Krawtchouk polynomials and the separable 2D decomposition built
//! on them.
//!
//! For a spatial parameter `P ∈ (0, 1)` and domain bound `L`, the weighted
//! polynomials `K̄_l(z; P, L)`, `z ∈ {0..L}`, form an orthonormal basis of
//! `R^{L+1}`. `P` moves the zeros of each row left (`P < 0.5`) or right
//! (`P > 0.5`); the order `l` sets their count. An image of width `W` uses
//! `L = W - 1` so grid points coincide with pixel columns.

use std::cmp::Ordering;
use std::hash::{Hash, Hasher};

use num_bigint::BigInt;
use num_rational::BigRational;
use num_traits::{One, ToPrimitive, Zero};

use crate::error::{Error, Result};
use crate::image::Image;

/// Orthonormality tolerance applied when building tables.
pub const DEFAULT_ORTHO_TOLERANCE: f64 = 1e-8;

/// Cap on retained orders when none is requested explicitly.
pub const DEFAULT_ORDER_CAP: usize = 48;

pub fn default_max_order(domain: usize) -> usize {
    domain.min(DEFAULT_ORDER_CAP)
}

fn check_p(p: f64) -> Result<()> {
    if p.is_finite() && p > 0.0 && p < 1.0 {
        Ok(())
    } else {
        Err(Error::Range(format!("spatial parameter {p} outside (0, 1)")))
    }
}

fn ln_binomial(n: usize, k: usize) -> f64 {
    let k = k.min(n - k);
    (1..=k)
        .map(|i| ((n - k + i) as f64 / i as f64).ln())
        .sum()
}

/// Options controlling table construction.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct TableOptions {
    pub tolerance: f64,
    /// Drop orders past the first one that breaks orthonormality instead of
    /// failing with [`Error::Stability`].
    pub allow_truncation: bool,
}

impl Default for TableOptions {
    fn default() -> Self {
        Self {
            tolerance: DEFAULT_ORTHO_TOLERANCE,
            allow_truncation: true,
        }
    }
}

/// Precomputed `K̄_l(z; P, L)` for `l ≤ max_order`, `z ≤ L`.
#[derive(Clone, Debug, PartialEq)]
pub struct PolynomialTable {
    p: f64,
    domain: usize,
    requested_order: usize,
    max_order: usize,
    deviation: f64,
    values: Vec<f64>,
}

/// Rows `0..=max_order` from the three-term recurrence, no checks.
fn recurrence_rows(p: f64, domain: usize, max_order: usize) -> Vec<f64> {
    let n = domain + 1;
    let lf = domain as f64;
    let q = 1.0 - p;
    let mut values = vec![0.0; (max_order + 1) * n];

    // K̄_0 = sqrt(C(L,z) P^z (1-P)^(L-z)), evaluated in log space
    let (ln_p, ln_q) = (p.ln(), q.ln());
    for z in 0..n {
        let ln_w = ln_binomial(domain, z) + z as f64 * ln_p + (domain - z) as f64 * ln_q;
        values[z] = (0.5 * ln_w).exp();
    }
    if max_order == 0 {
        return values;
    }

    let scale = (p * lf / q).sqrt();
    for z in 0..n {
        values[n + z] = scale * (1.0 - z as f64 / (p * lf)) * values[z];
    }

    for l in 1..max_order {
        let k = l as f64;
        let a = (p * (lf - k) / (q * (k + 1.0))).sqrt();
        let b = (p * p * (lf - k) * (lf - k + 1.0) / (q * q * (k + 1.0) * k)).sqrt();
        let denom = p * (lf - k);
        let (done, rest) = values.split_at_mut((l + 1) * n);
        let prev = &done[(l - 1) * n..l * n];
        let cur = &done[l * n..];
        let next = &mut rest[..n];
        for z in 0..n {
            let center = lf * p - 2.0 * k * p + k - z as f64;
            next[z] = (a * center * cur[z] - b * k * q * prev[z]) / denom;
        }
    }
    values
}

fn dot(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| x * y).sum()
}

/// Largest `|<row_i, row_j> - δ_ij|` for each prefix of rows; `out[l]` covers
/// rows `0..=l`.
fn prefix_deviations(values: &[f64], n: usize, rows: usize) -> Vec<f64> {
    let mut out = Vec::with_capacity(rows);
    let mut worst: f64 = 0.0;
    for l in 0..rows {
        let rl = &values[l * n..(l + 1) * n];
        for j in 0..=l {
            let rj = &values[j * n..(j + 1) * n];
            let target = if j == l { 1.0 } else { 0.0 };
            let dev = (dot(rl, rj) - target).abs();
            worst = if dev.is_nan() { f64::INFINITY } else { worst.max(dev) };
        }
        out.push(worst);
    }
    out
}

impl PolynomialTable {
    /// Builds the table with [`TableOptions::default`].
    pub fn build(p: f64, domain: usize, max_order: usize) -> Result<Self> {
        Self::build_with(p, domain, max_order, TableOptions::default())
    }

    pub fn build_with(p: f64, domain: usize, max_order: usize, opts: TableOptions) -> Result<Self> {
        check_p(p)?;
        if domain == 0 {
            return Err(Error::Order("domain bound must be positive".into()));
        }
        if max_order > domain {
            return Err(Error::Order(format!(
                "order {max_order} exceeds domain bound {domain}"
            )));
        }
        let n = domain + 1;
        let mut values = recurrence_rows(p, domain, max_order);
        let devs = prefix_deviations(&values, n, max_order + 1);
        let kept = devs.iter().take_while(|&&d| d <= opts.tolerance).count();
        if kept == 0 {
            return Err(Error::Stability(format!(
                "K̄_0 mass deviates by {:e} at P={p}, L={domain}",
                devs[0]
            )));
        }
        if kept <= max_order && !opts.allow_truncation {
            return Err(Error::Stability(format!(
                "orders above {} lose orthonormality at P={p}, L={domain} (deviation {:e})",
                kept - 1,
                devs[kept]
            )));
        }
        values.truncate(kept * n);
        Ok(Self {
            p,
            domain,
            requested_order: max_order,
            max_order: kept - 1,
            deviation: devs[kept - 1],
            values,
        })
    }

    pub fn p(&self) -> f64 {
        self.p
    }

    /// `L`; the table covers `z ∈ {0..=L}`.
    pub fn domain(&self) -> usize {
        self.domain
    }

    /// Highest order actually retained.
    pub fn max_order(&self) -> usize {
        self.max_order
    }

    pub fn requested_order(&self) -> usize {
        self.requested_order
    }

    /// Orders that were dropped for failing the orthonormality check.
    pub fn truncated_orders(&self) -> Option<std::ops::RangeInclusive<usize>> {
        (self.max_order < self.requested_order)
            .then(|| self.max_order + 1..=self.requested_order)
    }

    /// Orthonormality deviation of the retained rows.
    pub fn deviation(&self) -> f64 {
        self.deviation
    }

    pub fn row(&self, l: usize) -> &[f64] {
        let n = self.domain + 1;
        &self.values[l * n..(l + 1) * n]
    }

    pub fn value(&self, l: usize, z: usize) -> f64 {
        self.values[l * (self.domain + 1) + z]
    }

    /// Number of strict sign changes along row `l` (exact zeros skipped).
    pub fn sign_changes(&self, l: usize) -> usize {
        let mut last = 0.0f64;
        let mut count = 0;
        for &v in self.row(l) {
            if v == 0.0 {
                continue;
            }
            if last != 0.0 && (v > 0.0) != (last > 0.0) {
                count += 1;
            }
            last = v;
        }
        count
    }

    /// Zero locations of row `l` along `z`, linearly interpolated between
    /// grid points that straddle a sign change.
    pub fn zero_locations(&self, l: usize) -> Vec<f64> {
        let row = self.row(l);
        let mut zeros = Vec::new();
        let mut last: Option<(usize, f64)> = None;
        for (z, &v) in row.iter().enumerate() {
            if v == 0.0 {
                zeros.push(z as f64);
                last = None;
                continue;
            }
            if let Some((z0, v0)) = last {
                if (v > 0.0) != (v0 > 0.0) {
                    zeros.push(z0 as f64 + v0 / (v0 - v) * (z - z0) as f64);
                }
            }
            last = Some((z, v));
        }
        zeros
    }
}

/// Builds a table with default options (truncating unstable orders).
pub fn build_polynomial_table(p: f64, domain: usize, max_order: usize) -> Result<PolynomialTable> {
    PolynomialTable::build(p, domain, max_order)
}

/// `max_{l,l' ≤ max_order} |Σ_z K̄_l(z) K̄_l'(z) − δ_ll'|` for the recurrence
/// tables, without truncation.
pub fn orthonormality_deviation(p: f64, domain: usize, max_order: usize) -> Result<f64> {
    check_p(p)?;
    if domain == 0 || max_order > domain {
        return Err(Error::Order(format!(
            "order {max_order} invalid for domain bound {domain}"
        )));
    }
    let values = recurrence_rows(p, domain, max_order);
    Ok(*prefix_deviations(&values, domain + 1, max_order + 1)
        .last()
        .expect("at least one row"))
}

fn binomial(n: usize, k: usize) -> BigInt {
    let mut acc = BigInt::one();
    for i in 0..k {
        acc = acc * BigInt::from(n - i) / BigInt::from(i + 1);
    }
    acc
}

/// Reference evaluation of `K̄_l(z; P, L)` from the hypergeometric definition.
///
/// The terminating series `₂F₁(−l, −z; −L; 1/P)` has `l + 1` terms and is
/// summed exactly over the rationals (`P` is taken as the exact binary value
/// of the `f64`). The normalization `l! Γ(−L) / Γ(l − L)` is the reciprocal
/// Pochhammer product `l! / (−L)_l`, so no gamma poles are touched. Only the
/// final square-root prefactor is evaluated in floating point.
pub fn eval_hypergeometric_reference(l: usize, z: usize, p: f64, domain: usize) -> Result<f64> {
    check_p(p)?;
    if l > domain {
        return Err(Error::Order(format!("order {l} exceeds domain bound {domain}")));
    }
    if z > domain {
        return Err(Error::Range(format!("grid point {z} exceeds domain bound {domain}")));
    }
    let p_exact = BigRational::from_float(p).expect("finite P");
    let inv_p = p_exact.recip();

    let big = |v: i64| BigRational::from_integer(BigInt::from(v));
    let (li, zi, di) = (l as i64, z as i64, domain as i64);
    let mut term = BigRational::one();
    let mut sum = BigRational::zero();
    for k in 0..=li {
        if k > 0 {
            // (a)_k, (b)_k, (c)_k and k! advanced by one factor each
            let i = k - 1;
            term = term * big(-li + i) * big(-zi + i) / (big(-di + i) * big(k)) * &inv_p;
        }
        sum += &term;
    }
    let series = sum.to_f64().expect("finite series");

    // weight / rho = C(L,z) P^z (1-P)^(L-z) * C(L,l) (P/(1-P))^l
    let q = 1.0 - p;
    let cz = binomial(domain, z).to_f64().expect("binomial fits f64");
    let cl = binomial(domain, l).to_f64().expect("binomial fits f64");
    let ratio = cz * cl * p.powi(z as i32) * q.powi((domain - z) as i32) * (p / q).powi(l as i32);
    Ok(ratio.sqrt() * series)
}

/// Spatial parameters `(Px, Py)` of one Krawtchouk basis.
#[derive(Clone, Copy, Debug)]
pub struct SpatialConfig {
    px: f64,
    py: f64,
}

impl SpatialConfig {
    pub fn new(px: f64, py: f64) -> Result<Self> {
        check_p(px)?;
        check_p(py)?;
        Ok(Self { px, py })
    }

    pub fn px(&self) -> f64 {
        self.px
    }

    pub fn py(&self) -> f64 {
        self.py
    }
}

impl PartialEq for SpatialConfig {
    fn eq(&self, other: &Self) -> bool {
        self.px.to_bits() == other.px.to_bits() && self.py.to_bits() == other.py.to_bits()
    }
}

impl Eq for SpatialConfig {}

impl Hash for SpatialConfig {
    fn hash<H: Hasher>(&self, state: &mut H) {
        self.px.to_bits().hash(state);
        self.py.to_bits().hash(state);
    }
}

impl PartialOrd for SpatialConfig {
    fn partial_cmp(&self, other: &Self) -> Option<Ordering> {
        Some(self.cmp(other))
    }
}

impl Ord for SpatialConfig {
    fn cmp(&self, other: &Self) -> Ordering {
        self.px
            .total_cmp(&other.px)
            .then(self.py.total_cmp(&other.py))
    }
}

/// Ordered set of retained frequency orders `(n, m)`.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct OrderMask {
    orders: Vec<(usize, usize)>,
    max_n: usize,
    max_m: usize,
}

impl OrderMask {
    /// Every `(n, m)` with `n ≤ max_n`, `m ≤ max_m`, `n` outer.
    pub fn full(max_n: usize, max_m: usize) -> Self {
        let orders = (0..=max_n)
            .flat_map(|n| (0..=max_m).map(move |m| (n, m)))
            .collect();
        Self {
            orders,
            max_n,
            max_m,
        }
    }

    pub fn from_orders(orders: Vec<(usize, usize)>) -> Result<Self> {
        if orders.is_empty() {
            return Err(Error::Config("order mask is empty".into()));
        }
        let mut seen = std::collections::HashSet::with_capacity(orders.len());
        if let Some(dup) = orders.iter().find(|o| !seen.insert(**o)) {
            return Err(Error::Config(format!("duplicate order {dup:?}")));
        }
        let max_n = orders.iter().map(|o| o.0).max().unwrap_or(0);
        let max_m = orders.iter().map(|o| o.1).max().unwrap_or(0);
        Ok(Self {
            orders,
            max_n,
            max_m,
        })
    }

    pub fn orders(&self) -> &[(usize, usize)] {
        &self.orders
    }

    pub fn len(&self) -> usize {
        self.orders.len()
    }

    pub fn is_empty(&self) -> bool {
        self.orders.is_empty()
    }

    pub fn max_n(&self) -> usize {
        self.max_n
    }

    pub fn max_m(&self) -> usize {
        self.max_m
    }

    pub fn contains(&self, order: (usize, usize)) -> bool {
        self.orders.contains(&order)
    }
}

/// Coefficients of one spatial configuration, aligned with an order list.
#[derive(Clone, Debug, PartialEq)]
pub struct CoefficientBlock {
    pub config: SpatialConfig,
    pub orders: Vec<(usize, usize)>,
    pub values: Vec<f64>,
}

/// Decomposition coefficients `c_{n,m,Px,Py}` of one image.
#[derive(Clone, Debug, PartialEq)]
pub struct CoefficientSet {
    width: usize,
    height: usize,
    blocks: Vec<CoefficientBlock>,
}

impl CoefficientSet {
    pub fn new(width: usize, height: usize, blocks: Vec<CoefficientBlock>) -> Result<Self> {
        for b in &blocks {
            if b.orders.len() != b.values.len() {
                return Err(Error::Shape(format!(
                    "{} orders but {} values",
                    b.orders.len(),
                    b.values.len()
                )));
            }
            if let Some(o) = b.orders.iter().find(|(n, m)| *n >= width || *m >= height) {
                return Err(Error::Order(format!(
                    "order {o:?} outside a {width}x{height} image"
                )));
            }
        }
        Ok(Self {
            width,
            height,
            blocks,
        })
    }

    pub fn width(&self) -> usize {
        self.width
    }

    pub fn height(&self) -> usize {
        self.height
    }

    pub fn blocks(&self) -> &[CoefficientBlock] {
        &self.blocks
    }

    /// Total number of entries.
    pub fn len(&self) -> usize {
        self.blocks.iter().map(|b| b.values.len()).sum()
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    pub fn get(&self, n: usize, m: usize, config: SpatialConfig) -> Option<f64> {
        self.blocks
            .iter()
            .filter(|b| b.config == config)
            .find_map(|b| b.orders.iter().position(|&o| o == (n, m)).map(|i| b.values[i]))
    }

    /// All coefficient values, blocks in order.
    pub fn flat_values(&self) -> Vec<f64> {
        self.blocks.iter().flat_map(|b| b.values.iter().copied()).collect()
    }
}

/// Tables for one spatial configuration at a fixed image size.
#[derive(Clone, Debug)]
pub struct ConfigBasis {
    config: SpatialConfig,
    width: usize,
    height: usize,
    x: PolynomialTable,
    y: PolynomialTable,
}

impl ConfigBasis {
    pub fn new(
        config: SpatialConfig,
        width: usize,
        height: usize,
        max_n: usize,
        max_m: usize,
    ) -> Result<Self> {
        if width < 2 || height < 2 {
            return Err(Error::Shape(format!("{width}x{height} image is too small")));
        }
        let x = PolynomialTable::build(config.px, width - 1, max_n)?;
        let y = PolynomialTable::build(config.py, height - 1, max_m)?;
        if x.max_order() < max_n || y.max_order() < max_m {
            return Err(Error::Order(format!(
                "orders up to ({max_n}, {max_m}) requested but only ({}, {}) are stable at \
                 (Px, Py) = ({}, {})",
                x.max_order(),
                y.max_order(),
                config.px,
                config.py
            )));
        }
        Ok(Self {
            config,
            width,
            height,
            x,
            y,
        })
    }

    pub fn config(&self) -> SpatialConfig {
        self.config
    }

    pub fn x_table(&self) -> &PolynomialTable {
        &self.x
    }

    pub fn y_table(&self) -> &PolynomialTable {
        &self.y
    }

    fn check_image(&self, image: &Image) -> Result<()> {
        if image.width() != self.width || image.height() != self.height {
            return Err(Error::Shape(format!(
                "basis is {}x{}, image is {}x{}",
                self.width,
                self.height,
                image.width(),
                image.height()
            )));
        }
        Ok(())
    }

    /// Dense `(max_n+1) × (max_m+1)` coefficient matrix, row-major in `n`.
    pub fn transform(&self, image: &Image) -> Result<Vec<f64>> {
        self.check_image(image)?;
        let (w, h) = (self.width, self.height);
        let (nn, mm) = (self.x.max_order() + 1, self.y.max_order() + 1);
        let px = image.pixels();
        // partial[n][y] = Σ_x K̄_n(x) f(x, y)
        let mut partial = vec![0.0; nn * h];
        for n in 0..nn {
            let kx = self.x.row(n);
            for y in 0..h {
                partial[n * h + y] = dot(kx, &px[y * w..(y + 1) * w]);
            }
        }
        let mut out = vec![0.0; nn * mm];
        for n in 0..nn {
            let pn = &partial[n * h..(n + 1) * h];
            for m in 0..mm {
                out[n * mm + m] = dot(self.y.row(m), pn);
            }
        }
        Ok(out)
    }

    /// Coefficients at the orders of `mask`.
    pub fn decompose(&self, image: &Image, mask: &OrderMask) -> Result<CoefficientBlock> {
        self.check_mask(mask)?;
        let dense = self.transform(image)?;
        let mm = self.y.max_order() + 1;
        Ok(CoefficientBlock {
            config: self.config,
            orders: mask.orders().to_vec(),
            values: mask.orders().iter().map(|&(n, m)| dense[n * mm + m]).collect(),
        })
    }

    fn check_mask(&self, mask: &OrderMask) -> Result<()> {
        if mask.max_n() > self.x.max_order() || mask.max_m() > self.y.max_order() {
            return Err(Error::Order(format!(
                "mask reaches ({}, {}) but the basis stops at ({}, {})",
                mask.max_n(),
                mask.max_m(),
                self.x.max_order(),
                self.y.max_order()
            )));
        }
        Ok(())
    }

    /// `Σ c_{n,m} K̄_n(x) K̄_m(y)` over the given orders; the adjoint of
    /// [`ConfigBasis::decompose`].
    pub fn synthesize(&self, orders: &[(usize, usize)], values: &[f64]) -> Result<Image> {
        if orders.len() != values.len() {
            return Err(Error::Shape("orders and values differ in length".into()));
        }
        let (nn, mm) = (self.x.max_order() + 1, self.y.max_order() + 1);
        if let Some(o) = orders.iter().find(|(n, m)| *n >= nn || *m >= mm) {
            return Err(Error::Order(format!("order {o:?} beyond the basis")));
        }
        let (w, h) = (self.width, self.height);
        let mut dense = vec![0.0; nn * mm];
        for (&(n, m), &c) in orders.iter().zip(values) {
            dense[n * mm + m] += c;
        }
        // partial[n][y] = Σ_m c_{n,m} K̄_m(y)
        let mut partial = vec![0.0; nn * h];
        for n in 0..nn {
            for m in 0..mm {
                let c = dense[n * mm + m];
                if c == 0.0 {
                    continue;
                }
                let ky = self.y.row(m);
                for y in 0..h {
                    partial[n * h + y] += c * ky[y];
                }
            }
        }
        let mut pixels = vec![0.0; w * h];
        for n in 0..nn {
            let kx = self.x.row(n);
            for y in 0..h {
                let a = partial[n * h + y];
                if a == 0.0 {
                    continue;
                }
                for (dst, k) in pixels[y * w..(y + 1) * w].iter_mut().zip(kx) {
                    *dst += a * k;
                }
            }
        }
        Image::new(w, h, pixels)
    }
}

/// Decomposes `image` under one spatial configuration at the orders in
/// `mask`: `c_{n,m} = Σ_x Σ_y K̄_n(x; Px, W−1) K̄_m(y; Py, H−1) f(x, y)`.
pub fn decompose(image: &Image, config: SpatialConfig, mask: &OrderMask) -> Result<CoefficientSet> {
    if mask.max_n() >= image.width() || mask.max_m() >= image.height() {
        return Err(Error::Order(format!(
            "mask reaches ({}, {}) on a {}x{} image",
            mask.max_n(),
            mask.max_m(),
            image.width(),
            image.height()
        )));
    }
    let basis = ConfigBasis::new(config, image.width(), image.height(), mask.max_n(), mask.max_m())?;
    let block = basis.decompose(image, mask)?;
    CoefficientSet::new(image.width(), image.height(), vec![block])
}

/// Inverts a full-order decomposition of a single spatial configuration.
pub fn reconstruct(coeffs: &CoefficientSet) -> Result<Image> {
    let (w, h) = (coeffs.width(), coeffs.height());
    let block = match coeffs.blocks() {
        [b] => b,
        [] => return Err(Error::Incomplete("no coefficient block".into())),
        _ => {
            return Err(Error::Incomplete(
                "reconstruction takes exactly one spatial configuration".into(),
            ))
        }
    };
    let mut present = vec![false; w * h];
    for &(n, m) in &block.orders {
        present[n * h + m] = true;
    }
    if let Some(missing) = present.iter().position(|p| !p) {
        return Err(Error::Incomplete(format!(
            "order ({}, {}) missing; reconstruction needs all {}x{} orders",
            missing / h,
            missing % h,
            w,
            h
        )));
    }
    let basis = ConfigBasis::new(block.config, w, h, w - 1, h - 1)?;
    basis.synthesize(&block.orders, &block.values)
}
