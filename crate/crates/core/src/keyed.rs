//! Key-driven selection of the secret decomposition parameters.
//!
//! A 64-bit host key seeds a SplitMix64 stream; the stream decides which
//! spatial configurations and frequency orders of a candidate grid survive
//! random blocking. Anyone holding the key can rebuild the plan; the plan
//! itself is what the detector keeps private.

use std::fmt;
use std::fs;
use std::path::Path;

use rand_core::RngCore;
use sha2::{Digest, Sha256};

use crate::error::{Error, Result};
use crate::krawtchouk::{default_max_order, OrderMask, SpatialConfig};

/// Secret seed from which a [`SelectionPlan`] is derived.
#[derive(Clone, Copy, PartialEq, Eq, Hash)]
pub struct DetectorKey(u64);

impl DetectorKey {
    pub fn new(seed: u64) -> Self {
        Self(seed)
    }

    pub fn seed(&self) -> u64 {
        self.0
    }

    /// One-way 64-bit digest, safe to publish in reports and model files.
    pub fn fingerprint(&self) -> u64 {
        let mut h = Sha256::new();
        h.update(b"krawdetect-key-v1");
        h.update(self.0.to_be_bytes());
        let digest = h.finalize();
        let mut head = [0u8; 8];
        head.copy_from_slice(&digest[..8]);
        u64::from_be_bytes(head)
    }

    /// Parses the key-file format: 16 hex digits, optional `0x`, surrounding
    /// whitespace ignored.
    pub fn from_hex(text: &str) -> Result<Self> {
        let t = text.trim();
        let t = t.strip_prefix("0x").unwrap_or(t);
        if t.is_empty() || t.len() > 16 {
            return Err(Error::Format(format!("key must be 1-16 hex digits, got {:?}", t.len())));
        }
        u64::from_str_radix(t, 16)
            .map(Self)
            .map_err(|_| Error::Format("key is not hexadecimal".into()))
    }

    pub fn to_hex(&self) -> String {
        format!("{:016x}", self.0)
    }

    pub fn load(path: impl AsRef<Path>) -> Result<Self> {
        let path = path.as_ref();
        let text = fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        Self::from_hex(&text)
    }

    pub fn save(&self, path: impl AsRef<Path>) -> Result<()> {
        let path = path.as_ref();
        fs::write(path, format!("{}\n", self.to_hex())).map_err(|e| Error::io(path, e))
    }
}

// Keys are secret; never print the seed.
impl fmt::Debug for DetectorKey {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "DetectorKey(fp={:016x})", self.fingerprint())
    }
}

/// SplitMix64 generator. Bit-exact across platforms.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct KeyStream {
    state: u64,
}

impl KeyStream {
    pub fn new(seed: u64) -> Self {
        Self { state: seed }
    }

    pub fn from_key(key: DetectorKey) -> Self {
        Self::new(key.seed())
    }

    pub fn next_value(&mut self) -> u64 {
        self.state = self.state.wrapping_add(0x9E37_79B9_7F4A_7C15);
        let mut z = self.state;
        z = (z ^ (z >> 30)).wrapping_mul(0xBF58_476D_1CE4_E5B9);
        z = (z ^ (z >> 27)).wrapping_mul(0x94D0_49BB_1331_11EB);
        z ^ (z >> 31)
    }

    /// `value / 2^64`.
    pub fn next_unit(&mut self) -> f64 {
        self.next_value() as f64 / 18_446_744_073_709_551_616.0
    }

    /// Uniform index in `0..bound` (multiply-shift reduction).
    pub fn next_below(&mut self, bound: usize) -> usize {
        ((self.next_value() as u128 * bound as u128) >> 64) as usize
    }

    /// Deterministic Fisher-Yates shuffle.
    pub fn shuffle<T>(&mut self, items: &mut [T]) {
        for i in (1..items.len()).rev() {
            let j = self.next_below(i + 1);
            items.swap(i, j);
        }
    }
}

impl Iterator for KeyStream {
    type Item = u64;

    fn next(&mut self) -> Option<u64> {
        Some(self.next_value())
    }
}

impl RngCore for KeyStream {
    fn next_u32(&mut self) -> u32 {
        (self.next_value() >> 32) as u32
    }

    fn next_u64(&mut self) -> u64 {
        self.next_value()
    }

    fn fill_bytes(&mut self, dst: &mut [u8]) {
        for chunk in dst.chunks_mut(8) {
            let bytes = self.next_value().to_le_bytes();
            chunk.copy_from_slice(&bytes[..chunk.len()]);
        }
    }
}

/// Derives the SplitMix64 stream of a key.
pub fn derive_stream(key: DetectorKey) -> KeyStream {
    KeyStream::from_key(key)
}

/// Candidate parameters before keyed blocking.
#[derive(Clone, Debug, PartialEq)]
pub struct CandidateGrid {
    spatial_candidates: Vec<SpatialConfig>,
    order_candidates: Vec<(usize, usize)>,
    blocking_prob: f64,
    min_retained_configs: usize,
}

/// Spatial parameter values used on each axis of the default grid.
pub const DEFAULT_SPATIAL_VALUES: [f64; 5] = [0.25, 0.375, 0.5, 0.625, 0.75];
pub const DEFAULT_BLOCKING_PROB: f64 = 0.5;
pub const DEFAULT_MIN_RETAINED_CONFIGS: usize = 4;

impl CandidateGrid {
    pub fn new(
        spatial_candidates: Vec<SpatialConfig>,
        order_candidates: Vec<(usize, usize)>,
        blocking_prob: f64,
        min_retained_configs: usize,
    ) -> Result<Self> {
        if spatial_candidates.is_empty() || order_candidates.is_empty() {
            return Err(Error::Config("candidate lists must be non-empty".into()));
        }
        if !(0.0..1.0).contains(&blocking_prob) {
            return Err(Error::Config(format!(
                "blocking probability {blocking_prob} outside [0, 1)"
            )));
        }
        if min_retained_configs == 0 || min_retained_configs > spatial_candidates.len() {
            return Err(Error::Config(format!(
                "min_retained_configs {min_retained_configs} not in 1..={}",
                spatial_candidates.len()
            )));
        }
        // validates duplicates
        OrderMask::from_orders(order_candidates.clone())?;
        let mut seen = std::collections::HashSet::new();
        if spatial_candidates.iter().any(|c| !seen.insert(*c)) {
            return Err(Error::Config("duplicate spatial candidate".into()));
        }
        Ok(Self {
            spatial_candidates,
            order_candidates,
            blocking_prob,
            min_retained_configs,
        })
    }

    /// Cartesian product of `values` on both axes, `Px` outer; orders up to
    /// the default cap for a `width × height` image.
    pub fn square(
        values: &[f64],
        width: usize,
        height: usize,
        blocking_prob: f64,
        min_retained_configs: usize,
    ) -> Result<Self> {
        let mut configs = Vec::with_capacity(values.len() * values.len());
        for &px in values {
            for &py in values {
                configs.push(SpatialConfig::new(px, py)?);
            }
        }
        if width < 2 || height < 2 {
            return Err(Error::Config(format!("{width}x{height} image is too small")));
        }
        let orders = OrderMask::full(default_max_order(width - 1), default_max_order(height - 1));
        Self::new(
            configs,
            orders.orders().to_vec(),
            blocking_prob,
            min_retained_configs,
        )
    }

    /// 5×5 spatial grid, all orders, blocking 0.5, floor 4.
    pub fn default_for(width: usize, height: usize) -> Result<Self> {
        Self::square(
            &DEFAULT_SPATIAL_VALUES,
            width,
            height,
            DEFAULT_BLOCKING_PROB,
            DEFAULT_MIN_RETAINED_CONFIGS,
        )
    }

    pub fn spatial_candidates(&self) -> &[SpatialConfig] {
        &self.spatial_candidates
    }

    pub fn order_candidates(&self) -> &[(usize, usize)] {
        &self.order_candidates
    }

    pub fn blocking_prob(&self) -> f64 {
        self.blocking_prob
    }

    pub fn min_retained_configs(&self) -> usize {
        self.min_retained_configs
    }

    pub fn with_blocking_prob(mut self, p: f64) -> Result<Self> {
        if !(0.0..1.0).contains(&p) {
            return Err(Error::Config(format!("blocking probability {p} outside [0, 1)")));
        }
        self.blocking_prob = p;
        Ok(self)
    }
}

/// The realized secret parameters: retained spatial configurations and the
/// frequency-order mask.
#[derive(Clone, Debug, PartialEq)]
pub struct SelectionPlan {
    retained_configs: Vec<SpatialConfig>,
    order_mask: OrderMask,
    key_fingerprint: u64,
}

impl SelectionPlan {
    pub fn new(
        retained_configs: Vec<SpatialConfig>,
        order_mask: OrderMask,
        key_fingerprint: u64,
    ) -> Result<Self> {
        if retained_configs.is_empty() {
            return Err(Error::Config("plan retains no spatial configuration".into()));
        }
        Ok(Self {
            retained_configs,
            order_mask,
            key_fingerprint,
        })
    }

    pub fn retained_configs(&self) -> &[SpatialConfig] {
        &self.retained_configs
    }

    pub fn order_mask(&self) -> &OrderMask {
        &self.order_mask
    }

    pub fn key_fingerprint(&self) -> u64 {
        self.key_fingerprint
    }
}

/// Blocks each candidate with probability `p`, then unblocks the
/// lowest-index blocked candidates until `floor` survive.
fn block_candidates(stream: &mut KeyStream, count: usize, p: f64, floor: usize) -> Vec<bool> {
    let mut keep: Vec<bool> = (0..count).map(|_| stream.next_unit() >= p).collect();
    let mut kept = keep.iter().filter(|k| **k).count();
    for k in keep.iter_mut() {
        if kept >= floor {
            break;
        }
        if !*k {
            *k = true;
            kept += 1;
        }
    }
    keep
}

/// Samples the plan for `key` over `grid`. Spatial candidates consume the
/// stream first, then order candidates, each in list order.
pub fn sample_plan(key: DetectorKey, grid: &CandidateGrid) -> Result<SelectionPlan> {
    if !(0.0..1.0).contains(&grid.blocking_prob) {
        return Err(Error::Config(format!(
            "blocking probability {} outside [0, 1)",
            grid.blocking_prob
        )));
    }
    let mut stream = derive_stream(key);
    let keep_cfg = block_candidates(
        &mut stream,
        grid.spatial_candidates.len(),
        grid.blocking_prob,
        grid.min_retained_configs,
    );
    let keep_ord = block_candidates(
        &mut stream,
        grid.order_candidates.len(),
        grid.blocking_prob,
        1,
    );
    let retained = grid
        .spatial_candidates
        .iter()
        .zip(&keep_cfg)
        .filter_map(|(c, k)| k.then_some(*c))
        .collect();
    let orders = grid
        .order_candidates
        .iter()
        .zip(&keep_ord)
        .filter_map(|(o, k)| k.then_some(*o))
        .collect();
    SelectionPlan::new(retained, OrderMask::from_orders(orders)?, key.fingerprint())
}
