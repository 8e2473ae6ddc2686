//! Depth-plane selection.
//!
//! Two schemes are provided: quantiles of a dataset's depth histogram
//! (histogram matching) and planes uniformly spaced in inverse depth.

use std::io::{self, BufRead, Read, Write};

use crate::error::{Error, Result};

pub const DEFAULT_BINS: usize = 200;
pub const DEFAULT_THETA_MIN: f64 = 0.1;
pub const DEFAULT_THETA_MAX: f64 = 1.0;

const HISTOGRAM_MAGIC: &[u8; 4] = b"DHST";
const HISTOGRAM_VERSION: u8 = 1;

/// Equal-width depth histogram over `[0, d_max]`.
///
/// Bins are half-open `[e_k, e_{k+1})` except the last, which is closed and
/// also absorbs every value above `d_max`.
#[derive(Debug, Clone, PartialEq)]
pub struct DepthHistogram {
    d_max: f64,
    counts: Vec<u64>,
    total: u64,
    skipped: u64,
}

impl DepthHistogram {
    pub fn empty(bins: usize, d_max: f64) -> Result<Self> {
        if bins < 2 {
            return Err(Error::InvalidArgument(format!("need at least 2 bins, got {bins}")));
        }
        if !(d_max > 0.0 && d_max.is_finite()) {
            return Err(Error::InvalidArgument(format!("d_max must be positive, got {d_max}")));
        }
        Ok(Self { d_max, counts: vec![0; bins], total: 0, skipped: 0 })
    }

    /// Build from raw counts, e.g. after loading from disk.
    pub fn from_counts(counts: Vec<u64>, d_max: f64) -> Result<Self> {
        let mut h = Self::empty(counts.len(), d_max)?;
        h.total = counts.iter().sum();
        h.counts = counts;
        Ok(h)
    }

    #[inline]
    pub fn bin_index(&self, value: f64) -> usize {
        let bins = self.counts.len();
        let k = (value / self.d_max * bins as f64).floor();
        if k >= bins as f64 {
            bins - 1
        } else {
            k as usize
        }
    }

    /// Add one depth value. Non-finite or non-positive values are counted as skipped.
    pub fn insert(&mut self, value: f64) {
        if !(value.is_finite() && value > 0.0) {
            self.skipped += 1;
            return;
        }
        let k = self.bin_index(value);
        self.counts[k] += 1;
        self.total += 1;
    }

    /// Combine a histogram built over a disjoint shard of the data.
    pub fn merge(&mut self, other: &DepthHistogram) -> Result<()> {
        if other.counts.len() != self.counts.len() || other.d_max != self.d_max {
            return Err(Error::ShapeMismatch("histograms have different binning".into()));
        }
        for (a, b) in self.counts.iter_mut().zip(&other.counts) {
            *a += b;
        }
        self.total += other.total;
        self.skipped += other.skipped;
        Ok(())
    }

    pub fn bins(&self) -> usize {
        self.counts.len()
    }

    pub fn d_max(&self) -> f64 {
        self.d_max
    }

    pub fn counts(&self) -> &[u64] {
        &self.counts
    }

    pub fn total(&self) -> u64 {
        self.total
    }

    pub fn skipped(&self) -> u64 {
        self.skipped
    }

    pub fn bin_edges(&self) -> Vec<f64> {
        let b = self.counts.len();
        (0..=b).map(|k| self.edge(k)).collect()
    }

    fn edge(&self, k: usize) -> f64 {
        self.d_max * k as f64 / self.counts.len() as f64
    }

    pub fn write_to<W: Write>(&self, mut w: W) -> io::Result<()> {
        w.write_all(HISTOGRAM_MAGIC)?;
        w.write_all(&[HISTOGRAM_VERSION])?;
        w.write_all(&(self.counts.len() as u32).to_le_bytes())?;
        w.write_all(&self.d_max.to_le_bytes())?;
        for c in &self.counts {
            w.write_all(&c.to_le_bytes())?;
        }
        Ok(())
    }

    pub fn read_from<R: Read>(mut r: R) -> Result<Self> {
        let mut magic = [0u8; 4];
        r.read_exact(&mut magic)?;
        if &magic != HISTOGRAM_MAGIC {
            return Err(Error::Format("not a depth histogram (bad magic)".into()));
        }
        let mut version = [0u8; 1];
        r.read_exact(&mut version)?;
        if version[0] != HISTOGRAM_VERSION {
            return Err(Error::Format(format!("unsupported histogram version {}", version[0])));
        }
        let mut b4 = [0u8; 4];
        r.read_exact(&mut b4)?;
        let bins = u32::from_le_bytes(b4) as usize;
        let mut b8 = [0u8; 8];
        r.read_exact(&mut b8)?;
        let d_max = f64::from_le_bytes(b8);
        let mut counts = Vec::with_capacity(bins);
        for _ in 0..bins {
            r.read_exact(&mut b8)?;
            counts.push(u64::from_le_bytes(b8));
        }
        Self::from_counts(counts, d_max)
    }
}

/// Histogram a stream of depths (meters) into `bins` equal bins over `[0, d_max]`.
pub fn accumulate_histogram<I>(depth_values: I, bins: usize, d_max: f64) -> Result<DepthHistogram>
where
    I: IntoIterator<Item = f64>,
{
    let mut h = DepthHistogram::empty(bins, d_max)?;
    for v in depth_values {
        h.insert(v);
    }
    if h.total == 0 {
        return Err(Error::Empty("no positive finite depth values to histogram".into()));
    }
    Ok(h)
}

/// Normalised cumulative histogram sampled at the right edge of each bin.
#[derive(Debug, Clone, PartialEq)]
pub struct CumulativeDensity {
    /// Left edge of the first bin (where the cdf is zero).
    pub lower: f64,
    pub support: Vec<f64>,
    pub cdf: Vec<f64>,
}

pub fn to_cdf(h: &DepthHistogram) -> Result<CumulativeDensity> {
    if h.total == 0 {
        return Err(Error::Empty("histogram has no counts".into()));
    }
    let n = h.total as f64;
    let mut running = 0u64;
    let cdf = h
        .counts
        .iter()
        .map(|&c| {
            running += c;
            running as f64 / n
        })
        .collect();
    let support = (1..=h.bins()).map(|k| h.edge(k)).collect();
    Ok(CumulativeDensity { lower: h.edge(0), support, cdf })
}

impl CumulativeDensity {
    /// Inverse cdf, linear between bin right-edges.
    pub fn quantile(&self, theta: f64) -> Result<f64> {
        if !(0.0..=1.0).contains(&theta) {
            return Err(Error::InvalidArgument(format!("quantile level {theta} outside [0, 1]")));
        }
        let k = self
            .cdf
            .iter()
            .position(|&c| c >= theta && c > 0.0)
            .ok_or_else(|| Error::Degenerate(format!("cdf never reaches {theta}")))?;
        let (left, prev) = if k == 0 { (self.lower, 0.0) } else { (self.support[k - 1], self.cdf[k - 1]) };
        let frac = (theta - prev) / (self.cdf[k] - prev);
        Ok(left + frac.clamp(0.0, 1.0) * (self.support[k] - left))
    }

    fn validate(&self) -> Result<()> {
        if self.cdf.is_empty() || self.cdf.len() != self.support.len() {
            return Err(Error::Degenerate("empty or ragged cdf".into()));
        }
        if self.cdf.windows(2).any(|w| w[1] < w[0]) {
            return Err(Error::Degenerate("cdf is not monotone".into()));
        }
        let last = *self.cdf.last().unwrap();
        if (last - 1.0).abs() > 1e-12 {
            return Err(Error::Degenerate(format!("cdf ends at {last}, not 1")));
        }
        Ok(())
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, serde::Serialize, serde::Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum PlaneScheme {
    Histogram,
    InverseDepth,
    Explicit,
}

/// Sweep-plane depths, strictly increasing and positive.
#[derive(Debug, Clone, PartialEq)]
pub struct PlaneSet {
    depths: Vec<f64>,
    scheme: PlaneScheme,
}

impl PlaneSet {
    pub fn explicit(depths: Vec<f64>) -> Result<Self> {
        let set = Self { depths, scheme: PlaneScheme::Explicit };
        set.validate()?;
        Ok(set)
    }

    pub fn validate(&self) -> Result<()> {
        if self.depths.is_empty() {
            return Err(Error::Empty("plane set has no planes".into()));
        }
        if self.depths.iter().any(|d| !(d.is_finite() && *d > 0.0)) {
            return Err(Error::InvalidArgument("plane depths must be positive and finite".into()));
        }
        if self.depths.windows(2).any(|w| w[1] <= w[0]) {
            return Err(Error::InvalidArgument("plane depths must be strictly increasing".into()));
        }
        Ok(())
    }

    pub fn depths(&self) -> &[f64] {
        &self.depths
    }

    pub fn len(&self) -> usize {
        self.depths.len()
    }

    pub fn is_empty(&self) -> bool {
        self.depths.is_empty()
    }

    pub fn scheme(&self) -> PlaneScheme {
        self.scheme
    }

    pub fn write_text<W: Write>(&self, mut w: W) -> io::Result<()> {
        for d in &self.depths {
            writeln!(w, "{d}")?;
        }
        Ok(())
    }

    /// Parse one depth per line; blank lines and `#` comments are ignored.
    pub fn read_text<R: BufRead>(r: R) -> Result<Self> {
        let mut depths = Vec::new();
        for (i, line) in r.lines().enumerate() {
            let line = line?;
            let line = line.trim();
            if line.is_empty() || line.starts_with('#') {
                continue;
            }
            let d = line
                .parse::<f64>()
                .map_err(|e| Error::Format(format!("plane file line {}: {e}", i + 1)))?;
            depths.push(d);
        }
        Self::explicit(depths)
    }
}

/// `θ_i = θ_min + (θ_max - θ_min) i / D` for `i in 0..D`.
pub fn histogram_quantile_levels(planes: usize, theta_min: f64, theta_max: f64) -> Vec<f64> {
    (0..planes)
        .map(|i| theta_min + (theta_max - theta_min) * i as f64 / planes as f64)
        .collect()
}

/// Histogram-matched planes: `d_i = P^{-1}(θ_i)`.
pub fn sample_histogram_planes(
    cdf: &CumulativeDensity,
    planes: usize,
    theta_min: f64,
    theta_max: f64,
) -> Result<PlaneSet> {
    if planes < 1 {
        return Err(Error::InvalidArgument("need at least one plane".into()));
    }
    if !(0.0 <= theta_min && theta_min < theta_max && theta_max <= 1.0) {
        return Err(Error::InvalidArgument(format!(
            "need 0 <= theta_min < theta_max <= 1, got {theta_min}, {theta_max}"
        )));
    }
    cdf.validate()?;
    let mut depths = Vec::with_capacity(planes);
    for theta in histogram_quantile_levels(planes, theta_min, theta_max) {
        let mut d = cdf.quantile(theta)?;
        if !(d > 0.0) {
            return Err(Error::Degenerate(format!("quantile {theta} maps to zero depth")));
        }
        if let Some(&prev) = depths.last() {
            if d <= prev {
                d = next_up(prev);
            }
        }
        depths.push(d);
    }
    Ok(PlaneSet { depths, scheme: PlaneScheme::Histogram })
}

/// Planes uniformly spaced in inverse depth between `d_min` and `d_max`,
/// returned in ascending depth order.
pub fn sample_inverse_depth_planes(d_min: f64, d_max: f64, planes: usize) -> Result<PlaneSet> {
    if !(d_min > 0.0 && d_min < d_max && d_max.is_finite()) {
        return Err(Error::InvalidArgument(format!("need 0 < d_min < d_max, got {d_min}, {d_max}")));
    }
    if planes < 2 {
        return Err(Error::InvalidArgument(format!(
            "inverse-depth sampling needs at least 2 planes, got {planes}"
        )));
    }
    let span = 1.0 / d_min - 1.0 / d_max;
    let mut depths: Vec<f64> = (0..planes)
        .map(|i| {
            // Endpoints are pinned so they survive the reciprocal round trip.
            if i == 0 {
                d_max
            } else if i == planes - 1 {
                d_min
            } else {
                1.0 / (span * i as f64 / (planes - 1) as f64 + 1.0 / d_max)
            }
        })
        .collect();
    depths.reverse();
    let set = PlaneSet { depths, scheme: PlaneScheme::InverseDepth };
    set.validate()?;
    Ok(set)
}

fn next_up(x: f64) -> f64 {
    debug_assert!(x.is_finite() && x >= 0.0);
    f64::from_bits(x.to_bits() + 1)
}
