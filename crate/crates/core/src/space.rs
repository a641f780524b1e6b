//! The multi-resolution search lattice.
//!
//! Cells live on a grid of `layers × rates`. Row `i` holds the cells that
//! operate at `rates[i]`; its first cell sits at layer `i` because reaching
//! that rate from the stem output takes `i` stride-2 transitions. A cell has
//! at most two predecessors (same rate, half rate) and at most two
//! successors (same rate, double rate).

use std::fmt;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

pub const CONFIG_VERSION: u32 = 1;

/// The five searchable operators.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum OperatorKind {
    Skip,
    Conv3x3,
    Conv3x3X2,
    ZoomedConv,
    ZoomedConvX2,
}

impl OperatorKind {
    pub const ALL: [OperatorKind; 5] = [
        OperatorKind::Skip,
        OperatorKind::Conv3x3,
        OperatorKind::Conv3x3X2,
        OperatorKind::ZoomedConv,
        OperatorKind::ZoomedConvX2,
    ];

    pub fn name(self) -> &'static str {
        match self {
            OperatorKind::Skip => "skip",
            OperatorKind::Conv3x3 => "conv3x3",
            OperatorKind::Conv3x3X2 => "conv3x3_x2",
            OperatorKind::ZoomedConv => "zoomed_conv",
            OperatorKind::ZoomedConvX2 => "zoomed_conv_x2",
        }
    }

    pub fn parse(s: &str) -> Result<Self> {
        Self::ALL
            .into_iter()
            .find(|k| k.name() == s)
            .ok_or_else(|| Error::UnknownOperator(s.to_string()))
    }

    /// Number of stacked 3×3 convolutions (0 for skip).
    pub fn conv_count(self) -> usize {
        match self {
            OperatorKind::Skip => 0,
            OperatorKind::Conv3x3 | OperatorKind::ZoomedConv => 1,
            OperatorKind::Conv3x3X2 | OperatorKind::ZoomedConvX2 => 2,
        }
    }

    pub fn is_zoomed(self) -> bool {
        matches!(self, OperatorKind::ZoomedConv | OperatorKind::ZoomedConvX2)
    }

    pub fn metadata(self) -> OperatorMeta {
        operator_metadata(self)
    }
}

impl fmt::Display for OperatorKind {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

/// Latency of a single 3×3 convolution at the reference shape (ms).
pub const CONV_REFERENCE_MS: f64 = 0.15;
/// Latency of a zoomed convolution at the reference shape (ms).
pub const ZOOMED_REFERENCE_MS: f64 = 0.09;
/// Skip cost relative to a 3×3 convolution.
pub const SKIP_COST_FACTOR: f64 = 0.01;
/// Reference input shape (N, C, H, W) the latency anchors were taken at.
pub const REFERENCE_SHAPE: [usize; 4] = [1, 256, 32, 64];

/// Static per-operator metadata.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct OperatorMeta {
    pub kind: OperatorKind,
    /// Receptive field relative to a single 3×3 convolution.
    pub relative_rf: f64,
    /// Latency relative to a single 3×3 convolution at the reference shape.
    pub cost_factor: f64,
    /// Latency at the reference shape (ms).
    pub reference_ms: f64,
}

impl OperatorMeta {
    /// Weight count for `c_in → c_out` (1×1 projection for skip).
    pub fn params(&self, c_in: usize, c_out: usize) -> usize {
        match self.kind {
            OperatorKind::Skip => c_in * c_out,
            _ => {
                let first = 9 * c_in * c_out;
                let rest = (self.kind.conv_count() - 1) * 9 * c_out * c_out;
                first + rest
            }
        }
    }

    /// Multiply-accumulate count for an output of `h × w` pixels.
    pub fn macs(&self, c_in: usize, c_out: usize, h: usize, w: usize) -> usize {
        let area = if self.kind.is_zoomed() { (h / 2).max(1) * (w / 2).max(1) } else { h * w };
        self.params(c_in, c_out) * area
    }
}

pub fn operator_metadata(kind: OperatorKind) -> OperatorMeta {
    let (relative_rf, reference_ms) = match kind {
        OperatorKind::Skip => (0.0, CONV_REFERENCE_MS * SKIP_COST_FACTOR),
        OperatorKind::Conv3x3 => (1.0, CONV_REFERENCE_MS),
        // two stacked 3×3 see a 5×5 window
        OperatorKind::Conv3x3X2 => (5.0 / 3.0, 2.0 * CONV_REFERENCE_MS),
        OperatorKind::ZoomedConv => (2.0, ZOOMED_REFERENCE_MS),
        OperatorKind::ZoomedConvX2 => (10.0 / 3.0, 2.0 * ZOOMED_REFERENCE_MS),
    };
    OperatorMeta { kind, relative_rf, cost_factor: reference_ms / CONV_REFERENCE_MS, reference_ms }
}

/// Convolution variants that were profiled but are not part of the operator set.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum ReferenceLayer {
    Conv,
    ConvGroup2,
    ConvDilation2,
    ZoomedConv,
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct ReferenceLayerMeta {
    pub latency_ms: f64,
    pub gflops: f64,
    pub mparams: f64,
    pub relative_rf: f64,
}

impl ReferenceLayer {
    pub const ALL: [ReferenceLayer; 4] = [
        ReferenceLayer::Conv,
        ReferenceLayer::ConvGroup2,
        ReferenceLayer::ConvDilation2,
        ReferenceLayer::ZoomedConv,
    ];

    pub fn name(self) -> &'static str {
        match self {
            ReferenceLayer::Conv => "conv",
            ReferenceLayer::ConvGroup2 => "conv_group2",
            ReferenceLayer::ConvDilation2 => "conv_dilation2",
            ReferenceLayer::ZoomedConv => "zoomed_conv",
        }
    }

    pub fn metadata(self) -> ReferenceLayerMeta {
        let (latency_ms, gflops, mparams, relative_rf) = match self {
            ReferenceLayer::Conv => (0.15, 1.21, 0.59, 1.0),
            ReferenceLayer::ConvGroup2 => (0.13, 0.60, 0.29, 1.0),
            ReferenceLayer::ConvDilation2 => (0.25, 1.10, 0.59, 2.0),
            ReferenceLayer::ZoomedConv => (0.09, 0.30, 0.59, 2.0),
        };
        ReferenceLayerMeta { latency_ms, gflops, mparams, relative_rf }
    }
}

/// A cell slot in the lattice.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
pub struct CellPosition {
    pub layer: usize,
    pub rate: u32,
}

impl CellPosition {
    pub fn new(layer: usize, rate: u32) -> Self {
        Self { layer, rate }
    }
}

impl fmt::Display for CellPosition {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "(l={}, s={})", self.layer, self.rate)
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SearchSpaceConfig {
    pub version: u32,
    pub layers: usize,
    pub rates: Vec<u32>,
    pub branches: usize,
    pub operators: Vec<OperatorKind>,
    pub ratios: Vec<u32>,
    /// Concrete channels = round(rate × ratio × channel_scale).
    pub channel_scale: f64,
}

impl Default for SearchSpaceConfig {
    fn default() -> Self {
        Self {
            version: CONFIG_VERSION,
            layers: 16,
            rates: vec![8, 16, 32],
            branches: 2,
            operators: OperatorKind::ALL.to_vec(),
            ratios: vec![4, 6, 8, 10, 12],
            channel_scale: 1.0 / 8.0,
        }
    }
}

impl SearchSpaceConfig {
    pub fn validate(&self) -> Result<()> {
        let bad = |m: String| Err(Error::InvalidConfig(m));
        if self.version != CONFIG_VERSION {
            return bad(format!("unsupported version {}", self.version));
        }
        if self.layers == 0 {
            return bad("layers must be positive".into());
        }
        if self.rates.is_empty() {
            return bad("rates must be non-empty".into());
        }
        let base = self.rates[0];
        if base == 0 {
            return bad("rates must be positive".into());
        }
        for (i, &r) in self.rates.iter().enumerate() {
            if r != base << i {
                return bad(format!("rate {r} at index {i} is not {base}·2^{i}"));
            }
        }
        if self.branches == 0 || self.branches > self.rates.len() {
            return bad(format!("branches {} must be in 1..={}", self.branches, self.rates.len()));
        }
        if self.layers < self.rates.len() {
            return bad(format!(
                "{} layers cannot reach rate {}",
                self.layers,
                self.rates[self.rates.len() - 1]
            ));
        }
        if self.operators.is_empty() {
            return bad("operator set is empty".into());
        }
        for w in self.operators.windows(2) {
            if w[0] >= w[1] {
                return bad("operators must be listed once, in canonical order".into());
            }
        }
        if self.ratios.is_empty() {
            return bad("expansion ratio set is empty".into());
        }
        if self.ratios[0] == 0 || self.ratios.windows(2).any(|w| w[0] >= w[1]) {
            return bad("ratios must be positive and strictly increasing".into());
        }
        if !(self.channel_scale > 0.0 && self.channel_scale.is_finite()) {
            return bad("channel_scale must be positive".into());
        }
        Ok(())
    }

    pub fn to_json(&self) -> Result<String> {
        Ok(serde_json::to_string_pretty(self)?)
    }

    pub fn from_json(s: &str) -> Result<Self> {
        let cfg: Self = serde_json::from_str(s)?;
        cfg.validate()?;
        Ok(cfg)
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Transition {
    SameRate,
    Stride2,
}

impl Transition {
    pub fn stride(self) -> usize {
        match self {
            Transition::SameRate => 1,
            Transition::Stride2 => 2,
        }
    }

    pub fn name(self) -> &'static str {
        match self {
            Transition::SameRate => "same",
            Transition::Stride2 => "stride2",
        }
    }

    pub fn parse(s: &str) -> Option<Self> {
        match s {
            "same" => Some(Transition::SameRate),
            "stride2" => Some(Transition::Stride2),
            _ => None,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct Edge {
    pub from: CellPosition,
    pub to: CellPosition,
    pub kind: Transition,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct ConvSpec {
    pub c_in: usize,
    pub c_out: usize,
    pub kernel: usize,
    pub stride: usize,
}

/// Five 3×3 convolutions with strides (2,2,1,2,1); channels double on each stride-2 layer.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct StemSpec {
    pub layers: Vec<ConvSpec>,
}

impl StemSpec {
    pub fn new(in_channels: usize, out_channels: usize) -> Self {
        let c0 = out_channels.div_ceil(4).max(1);
        let c1 = out_channels.div_ceil(2).max(1);
        let chans = [c0, c1, c1, out_channels, out_channels];
        let strides = [2, 2, 1, 2, 1];
        let mut prev = in_channels;
        let layers = chans
            .iter()
            .zip(strides)
            .map(|(&c, stride)| {
                let l = ConvSpec { c_in: prev, c_out: c, kernel: 3, stride };
                prev = c;
                l
            })
            .collect();
        Self { layers }
    }

    pub fn out_channels(&self) -> usize {
        self.layers.last().map(|l| l.c_out).unwrap_or(0)
    }

    pub fn total_stride(&self) -> usize {
        self.layers.iter().map(|l| l.stride).product()
    }
}

/// 1×1 reduce of the coarse input, bilinear upsample, concat, 3×3 fuse, 1×1 classifier.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct HeadSpec {
    pub channels: usize,
    pub classes: usize,
}

#[derive(Debug, Clone)]
pub struct SearchSpace {
    pub config: SearchSpaceConfig,
    pub cells: Vec<CellPosition>,
    pub edges: Vec<Edge>,
    pub stem: StemSpec,
    pub head: HeadSpec,
    // index of cell (layer, row) in `cells`, usize::MAX when absent
    index: Vec<usize>,
}

impl PartialEq for SearchSpace {
    fn eq(&self, other: &Self) -> bool {
        self.config == other.config
            && self.cells == other.cells
            && self.edges == other.edges
            && self.stem == other.stem
            && self.head == other.head
    }
}

pub const DEFAULT_CLASSES: usize = 4;

pub fn build_search_space(config: SearchSpaceConfig) -> Result<SearchSpace> {
    SearchSpace::new(config, DEFAULT_CLASSES)
}

impl SearchSpace {
    pub fn new(config: SearchSpaceConfig, classes: usize) -> Result<Self> {
        config.validate()?;
        let rows = config.rates.len();
        let layers = config.layers;
        let mut cells = Vec::new();
        let mut index = vec![usize::MAX; layers * rows];
        for l in 0..layers {
            for (i, &r) in config.rates.iter().enumerate() {
                if l >= i {
                    index[l * rows + i] = cells.len();
                    cells.push(CellPosition::new(l, r));
                }
            }
        }
        let mut edges = Vec::new();
        for c in &cells {
            let i = row_of(&config, c.rate).expect("rate from config");
            if c.layer + 1 < layers {
                edges.push(Edge {
                    from: *c,
                    to: CellPosition::new(c.layer + 1, c.rate),
                    kind: Transition::SameRate,
                });
                if i + 1 < rows {
                    edges.push(Edge {
                        from: *c,
                        to: CellPosition::new(c.layer + 1, config.rates[i + 1]),
                        kind: Transition::Stride2,
                    });
                }
            }
        }
        let max_ratio = *config.ratios.last().expect("validated");
        let stem_out = channels_for(&config, config.rates[0], max_ratio);
        let stem = StemSpec::new(3, stem_out);
        let head = HeadSpec { channels: stem_out, classes };
        Ok(Self { config, cells, edges, stem, head, index })
    }

    pub fn layers(&self) -> usize {
        self.config.layers
    }

    pub fn rates(&self) -> &[u32] {
        &self.config.rates
    }

    pub fn ratios(&self) -> &[u32] {
        &self.config.ratios
    }

    pub fn operators(&self) -> &[OperatorKind] {
        &self.config.operators
    }

    pub fn num_cells(&self) -> usize {
        self.cells.len()
    }

    pub fn row(&self, rate: u32) -> Option<usize> {
        row_of(&self.config, rate)
    }

    pub fn contains(&self, pos: CellPosition) -> bool {
        self.cell_index(pos).is_some()
    }

    /// Dense index of `pos` into per-cell arrays.
    pub fn cell_index(&self, pos: CellPosition) -> Option<usize> {
        let i = self.row(pos.rate)?;
        if pos.layer >= self.config.layers {
            return None;
        }
        let idx = self.index[pos.layer * self.config.rates.len() + i];
        (idx != usize::MAX).then_some(idx)
    }

    pub fn require(&self, pos: CellPosition) -> Result<usize> {
        self.cell_index(pos).ok_or(Error::UnknownPosition(pos))
    }

    /// Predecessors as `(half-rate, same-rate)`.
    pub fn predecessors(&self, pos: CellPosition) -> (Option<CellPosition>, Option<CellPosition>) {
        if pos.layer == 0 || !self.contains(pos) {
            return (None, None);
        }
        let prev = pos.layer - 1;
        let half = pos.rate.is_multiple_of(2)
            .then(|| CellPosition::new(prev, pos.rate / 2))
            .filter(|p| self.contains(*p));
        let same = Some(CellPosition::new(prev, pos.rate)).filter(|p| self.contains(*p));
        (half, same)
    }

    /// Successors as `(same-rate, double-rate)`.
    pub fn successors(&self, pos: CellPosition) -> (Option<CellPosition>, Option<CellPosition>) {
        if !self.contains(pos) {
            return (None, None);
        }
        let next = pos.layer + 1;
        let same = Some(CellPosition::new(next, pos.rate)).filter(|p| self.contains(*p));
        let double = Some(CellPosition::new(next, pos.rate * 2)).filter(|p| self.contains(*p));
        (same, double)
    }

    /// A row-first cell only has a half-rate input; the base row only has same-rate inputs.
    pub fn beta_is_fixed(&self, pos: CellPosition) -> bool {
        let (half, same) = self.predecessors(pos);
        half.is_none() || same.is_none()
    }

    pub fn channels(&self, rate: u32, ratio: u32) -> usize {
        channels_for(&self.config, rate, ratio)
    }

    pub fn max_ratio(&self) -> u32 {
        *self.config.ratios.last().expect("validated")
    }

    pub fn min_ratio(&self) -> u32 {
        self.config.ratios[0]
    }

    pub fn ratio_index(&self, ratio: u32) -> Option<usize> {
        self.config.ratios.iter().position(|&r| r == ratio)
    }

    pub fn operator_index(&self, op: OperatorKind) -> Option<usize> {
        self.config.operators.iter().position(|&o| o == op)
    }

    /// All unordered pairs of distinct final rates, finer rate first.
    pub fn rate_pairs(&self) -> Vec<(u32, u32)> {
        let r = &self.config.rates;
        let mut out = Vec::new();
        for i in 0..r.len() {
            for j in i + 1..r.len() {
                out.push((r[i], r[j]));
            }
        }
        out
    }

    /// Number of single-branch resolution paths from the stem cell to `(L-1, rate)`.
    pub fn paths_to(&self, rate: u32) -> u128 {
        let rows = self.config.rates.len();
        let Some(target) = self.row(rate) else { return 0 };
        let mut counts = vec![0u128; rows];
        counts[0] = 1;
        for _ in 1..self.config.layers {
            let mut next = vec![0u128; rows];
            for i in 0..rows {
                next[i] += counts[i];
                if i + 1 < rows {
                    next[i + 1] += counts[i];
                }
            }
            counts = next;
        }
        counts[target]
    }
}

fn row_of(config: &SearchSpaceConfig, rate: u32) -> Option<usize> {
    config.rates.iter().position(|&r| r == rate)
}

fn channels_for(config: &SearchSpaceConfig, rate: u32, ratio: u32) -> usize {
    ((rate as f64 * ratio as f64 * config.channel_scale).round() as usize).max(1)
}

/// Number of distinct b-branch layouts: one resolution path per branch, the
/// branches ending at pairwise distinct rates.
pub fn count_branch_paths(space: &SearchSpace) -> u128 {
    let per_rate: Vec<u128> = space.rates().iter().map(|&r| space.paths_to(r)).collect();
    sum_of_products(&per_rate, space.config.branches)
}

/// Like [`count_branch_paths`] but drops pairs in which one branch's
/// downsample positions are a non-empty prefix of the other's, i.e. the
/// coarser branch repeats every resolution change of the finer one.
pub fn count_branch_paths_excluding_nested(space: &SearchSpace) -> u128 {
    let total = count_branch_paths(space);
    if space.config.branches != 2 {
        return total;
    }
    let mut nested = 0u128;
    let rates = space.rates();
    for i in 1..rates.len() {
        for j in i + 1..rates.len() {
            nested += nested_pairs(space.layers(), i, j);
        }
    }
    total - nested
}

// Pairs (finer path with i transitions, coarser path with j transitions)
// whose first i downsample positions coincide.
fn nested_pairs(layers: usize, i: usize, j: usize) -> u128 {
    let mut total = 0u128;
    for_each_increasing(layers, i, &mut |pos| {
        let last = pos.last().copied().unwrap_or(0);
        total += binomial((layers - 1 - last) as u128, (j - i) as u128);
    });
    total
}

fn for_each_increasing(layers: usize, k: usize, f: &mut dyn FnMut(&[usize])) {
    fn rec(start: usize, layers: usize, k: usize, cur: &mut Vec<usize>, f: &mut dyn FnMut(&[usize])) {
        if cur.len() == k {
            f(cur);
            return;
        }
        for l in start..layers {
            cur.push(l);
            rec(l + 1, layers, k, cur, f);
            cur.pop();
        }
    }
    rec(1, layers, k, &mut Vec::new(), f);
}

fn binomial(n: u128, k: u128) -> u128 {
    if k > n {
        return 0;
    }
    let k = k.min(n - k);
    let mut acc = 1u128;
    for t in 0..k {
        acc = acc * (n - t) / (t + 1);
    }
    acc
}

fn sum_of_products(values: &[u128], b: usize) -> u128 {
    // elementary symmetric polynomial e_b(values)
    let mut e = vec![0u128; b + 1];
    e[0] = 1;
    for &v in values {
        for k in (1..=b).rev() {
            e[k] += e[k - 1] * v;
        }
    }
    e[b]
}

/// Number of cells carrying an operator/width choice in the cardinality count.
/// The first cell of each row is left out.
pub fn counted_cells(space: &SearchSpace) -> usize {
    let layers = space.layers();
    (0..space.rates().len()).map(|i| layers - i - 1).sum()
}

/// Choices per counted cell: skip carries no width, every other operator pairs with each ratio.
pub fn choices_per_cell(space: &SearchSpace) -> u64 {
    let ratios = space.ratios().len() as u64;
    let has_skip = space.operators().contains(&OperatorKind::Skip);
    let others = space.operators().len() as u64 - u64::from(has_skip);
    u64::from(has_skip) + others * ratios
}

/// `log10(choices^cells + |X|^|rates|)`, evaluated in log space.
pub fn log10_space_cardinality(space: &SearchSpace) -> f64 {
    let a = counted_cells(space) as f64 * (choices_per_cell(space) as f64).log10();
    let b = space.rates().len() as f64 * (space.ratios().len() as f64).log10();
    let (hi, lo) = if a >= b { (a, b) } else { (b, a) };
    hi + (1.0 + 10f64.powf(lo - hi)).log10()
}

#[cfg(test)]
mod tests {
    use super::*;

    fn cfg(layers: usize, rates: &[u32], branches: usize) -> SearchSpaceConfig {
        SearchSpaceConfig { layers, rates: rates.to_vec(), branches, ..Default::default() }
    }

    #[test]
    fn default_space_shape() {
        let s = build_search_space(SearchSpaceConfig::default()).unwrap();
        assert_eq!(s.num_cells(), 16 + 15 + 14);
        assert!(s
            .edges
            .iter()
            .filter(|e| e.kind == Transition::Stride2)
            .all(|e| e.to.rate == 2 * e.from.rate));
        assert_eq!(s.rate_pairs().len(), 3);
        assert_eq!(counted_cells(&s), 42);
        assert_eq!(s.stem.total_stride(), 8);
    }

    #[test]
    fn single_row_has_no_stride2_edges() {
        let s = build_search_space(cfg(3, &[8], 1)).unwrap();
        assert_eq!(s.num_cells(), 3);
        assert!(s.edges.iter().all(|e| e.kind == Transition::SameRate));
    }

    #[test]
    fn rejects_bad_configs() {
        assert!(build_search_space(cfg(2, &[8, 16, 32], 2)).is_err());
        assert!(build_search_space(cfg(4, &[8, 24], 2)).is_err());
        assert!(build_search_space(cfg(4, &[8], 2)).is_err());
        let mut c = cfg(4, &[8, 16], 2);
        c.operators.clear();
        assert!(build_search_space(c).is_err());
        let mut c = cfg(4, &[8, 16], 2);
        c.ratios.clear();
        assert!(build_search_space(c).is_err());
        let mut c = cfg(4, &[8, 16], 2);
        c.version = 0;
        assert!(build_search_space(c).is_err());
    }

    #[test]
    fn predecessor_structure() {
        let s = build_search_space(SearchSpaceConfig::default()).unwrap();
        for &c in &s.cells {
            let (h, m) = s.predecessors(c);
            if let Some(h) = h {
                assert_eq!(h.rate * 2, c.rate);
                assert_eq!(h.layer + 1, c.layer);
            }
            if let Some(m) = m {
                assert_eq!(m.rate, c.rate);
            }
            if c.layer > 0 {
                assert!(h.is_some() || m.is_some());
            }
        }
        assert!(s.beta_is_fixed(CellPosition::new(1, 16)));
        assert!(s.beta_is_fixed(CellPosition::new(5, 8)));
        assert!(!s.beta_is_fixed(CellPosition::new(2, 16)));
        assert!(!s.contains(CellPosition::new(1, 32)));
    }

    #[test]
    fn path_counts() {
        let s = build_search_space(SearchSpaceConfig::default()).unwrap();
        assert_eq!(s.paths_to(8), 1);
        assert_eq!(s.paths_to(16), 15);
        assert_eq!(s.paths_to(32), 105);
        assert_eq!(count_branch_paths(&s), 1695);
        assert_eq!(count_branch_paths_excluding_nested(&s), 1590);
        let one = build_search_space(cfg(1, &[8], 1)).unwrap();
        assert_eq!(count_branch_paths(&one), 1);
    }

    #[test]
    fn cardinality_default() {
        let s = build_search_space(SearchSpaceConfig::default()).unwrap();
        assert_eq!(choices_per_cell(&s), 21);
        let v = log10_space_cardinality(&s);
        assert!((v - 55.53).abs() < 0.01, "{v}");
    }

    #[test]
    fn operator_metadata_anchors() {
        assert_eq!(operator_metadata(OperatorKind::Conv3x3).cost_factor, 1.0);
        assert_eq!(operator_metadata(OperatorKind::Conv3x3).reference_ms, 0.15);
        assert_eq!(operator_metadata(OperatorKind::ZoomedConv).reference_ms, 0.09);
        assert!((operator_metadata(OperatorKind::ZoomedConv).cost_factor - 0.6).abs() < 1e-15);
        let skip = operator_metadata(OperatorKind::Skip);
        assert_eq!(skip.relative_rf, 0.0);
        for k in OperatorKind::ALL {
            let m = operator_metadata(k);
            if k != OperatorKind::Skip {
                assert!(skip.cost_factor < m.cost_factor);
            }
        }
        assert_eq!(
            operator_metadata(OperatorKind::ZoomedConvX2).relative_rf,
            2.0 * operator_metadata(OperatorKind::Conv3x3X2).relative_rf
        );
        assert!(OperatorKind::parse("dilated").is_err());
    }

    #[test]
    fn config_json_roundtrip() {
        let c = SearchSpaceConfig::default();
        let back = SearchSpaceConfig::from_json(&c.to_json().unwrap()).unwrap();
        assert_eq!(c, back);
        assert!(SearchSpaceConfig::from_json(r#"{"layers":4}"#).is_err());
    }
}
