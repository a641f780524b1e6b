//! Discrete architectures: cell records per branch, validation, prefix sharing and
//! latency-aware branch selection.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::space::{OperatorKind, SearchSpace};

pub const GENOTYPE_VERSION: u32 = 1;

/// One surviving cell. `s` is the rate of the cell's output.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct CellRecord {
    pub op: OperatorKind,
    pub s: u32,
    pub chi: u32,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub c_out: Option<u32>,
    /// Lattice layer the cell was decoded from, when known.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub layer: Option<usize>,
}

impl CellRecord {
    pub fn new(op: OperatorKind, s: u32, chi: u32) -> Self {
        Self { op, s, chi, c_out: Some(s * chi), layer: None }
    }

    pub fn at_layer(mut self, layer: usize) -> Self {
        self.layer = Some(layer);
        self
    }

    /// Semantic output width `s × χ`.
    pub fn semantic_c_out(&self) -> u32 {
        self.s * self.chi
    }

    fn same_cell(&self, other: &CellRecord) -> bool {
        let layers_agree = match (self.layer, other.layer) {
            (Some(a), Some(b)) => a == b,
            _ => true,
        };
        self.op == other.op && self.s == other.s && self.chi == other.chi && layers_agree
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct BranchSpec {
    pub cells: Vec<CellRecord>,
    pub final_rate: u32,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct HeadAggregation {
    pub rates: [u32; 2],
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct Genotype {
    pub version: u32,
    pub branches: Vec<BranchSpec>,
    #[serde(default)]
    pub shared_prefix_len: usize,
    pub head: HeadAggregation,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub provenance: Option<String>,
}

impl Genotype {
    pub fn new(branches: Vec<BranchSpec>) -> Self {
        let rates = [
            branches.first().map(|b| b.final_rate).unwrap_or(0),
            branches.get(1).map(|b| b.final_rate).unwrap_or(0),
        ];
        Self { version: GENOTYPE_VERSION, branches, shared_prefix_len: 0, head: HeadAggregation { rates }, provenance: None }
    }

    pub fn from_json(s: &str) -> Result<Self> {
        Ok(serde_json::from_str(s)?)
    }

    pub fn to_json(&self) -> String {
        serde_json::to_string_pretty(self).expect("serializable")
    }

    pub fn num_cells(&self) -> usize {
        self.branches.iter().map(|b| b.cells.len()).sum()
    }

    /// Mean expansion ratio over all distinct cells (shared prefix counted once).
    pub fn mean_ratio(&self) -> Option<f64> {
        let mut chis: Vec<u32> = Vec::new();
        for (bi, b) in self.branches.iter().enumerate() {
            let skip = if bi == 0 { 0 } else { self.shared_prefix_len };
            chis.extend(b.cells.iter().skip(skip).map(|c| c.chi));
        }
        (!chis.is_empty()).then(|| chis.iter().map(|&c| c as f64).sum::<f64>() / chis.len() as f64)
    }
}

/// Length of the common leading run of identical cells.
pub fn common_prefix_len(a: &[CellRecord], b: &[CellRecord]) -> usize {
    a.iter().zip(b).take_while(|(x, y)| x.same_cell(y)).count()
}

/// Marks the maximal common prefix of the two branches as shared.
pub fn merge_shared_prefix(g: &Genotype) -> Genotype {
    let mut out = g.clone();
    out.shared_prefix_len = match g.branches.as_slice() {
        [a, b] => common_prefix_len(&a.cells, &b.cells),
        _ => 0,
    };
    out
}

/// Structural checks against `space`; returns every violation found.
pub fn validate_genotype(g: &Genotype, space: &SearchSpace) -> Result<(), Vec<String>> {
    let mut v = Vec::new();
    if g.version != GENOTYPE_VERSION {
        v.push(format!("unsupported genotype version {}", g.version));
    }
    if g.branches.len() != space.config.branches {
        v.push(format!("expected {} branches, found {}", space.config.branches, g.branches.len()));
    }
    let base = space.rates()[0];
    let mut finals: Vec<u32> = g.branches.iter().map(|b| b.final_rate).collect();
    for (bi, b) in g.branches.iter().enumerate() {
        let tag = format!("branch {bi}");
        if space.row(b.final_rate).is_none() {
            v.push(format!("{tag}: final rate {} not in the search space", b.final_rate));
        }
        if b.cells.len() > space.layers() {
            v.push(format!("{tag}: {} cells exceed {} layers", b.cells.len(), space.layers()));
        }
        let mut prev = base;
        let mut prev_layer: Option<usize> = None;
        for (ci, c) in b.cells.iter().enumerate() {
            let at = format!("{tag} cell {}", ci + 1);
            if space.operator_index(c.op).is_none() {
                v.push(format!("{at}: operator {} not in the operator set", c.op));
            }
            if space.ratio_index(c.chi).is_none() {
                v.push(format!("{at}: expansion ratio {} not in {:?}", c.chi, space.ratios()));
            }
            if space.row(c.s).is_none() {
                v.push(format!("{at}: rate {} not in {:?}", c.s, space.rates()));
            }
            if c.s != prev && c.s != prev * 2 {
                v.push(format!("{at}: rate step {prev} -> {} is not x1 or x2", c.s));
            }
            if c.op == OperatorKind::Skip && c.s == prev {
                v.push(format!("{at}: stride-1 skip should have been shrunk"));
            }
            if let Some(co) = c.c_out {
                if co != c.semantic_c_out() {
                    v.push(format!("{at}: c_out {co} != s x chi = {}", c.semantic_c_out()));
                }
            }
            if let Some(l) = c.layer {
                if l >= space.layers() {
                    v.push(format!("{at}: layer {l} outside the lattice"));
                }
                if prev_layer.is_some_and(|p| l <= p) {
                    v.push(format!("{at}: layers must increase"));
                }
                prev_layer = Some(l);
            }
            prev = c.s;
        }
        if prev != b.final_rate {
            v.push(format!("{tag}: cells end at rate {prev} but final rate is {}", b.final_rate));
        }
    }
    finals.sort_unstable();
    if finals.windows(2).any(|w| w[0] == w[1]) {
        v.push("branch final rates must be distinct".into());
    }
    let mut head = g.head.rates.to_vec();
    head.sort_unstable();
    if head != finals {
        v.push(format!("head rates {:?} do not match branch final rates {finals:?}", g.head.rates));
    }
    if let [a, b] = g.branches.as_slice() {
        let common = common_prefix_len(&a.cells, &b.cells);
        if g.shared_prefix_len > common {
            v.push(format!("shared_prefix_len {} exceeds the common prefix {common}", g.shared_prefix_len));
        }
    }
    if v.is_empty() {
        Ok(())
    } else {
        Err(v)
    }
}

pub fn validate_or_err(g: &Genotype, space: &SearchSpace) -> Result<()> {
    validate_genotype(g, space).map_err(Error::InvalidGenotype)
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct BranchSelectConfig {
    pub target_ms: f64,
    pub alpha: f64,
    pub beta: f64,
}

impl Default for BranchSelectConfig {
    fn default() -> Self {
        Self { target_ms: 8.3, alpha: -0.07, beta: -0.07 }
    }
}

/// `acc × (lat / T)^w` with `w = alpha` when within budget, `beta` otherwise.
pub fn branch_target(acc: f64, lat: f64, cfg: &BranchSelectConfig) -> f64 {
    let w = if lat <= cfg.target_ms { cfg.alpha } else { cfg.beta };
    acc * (lat / cfg.target_ms).powf(w)
}

#[derive(Debug, Clone, PartialEq)]
pub struct Candidate {
    pub genotype: Genotype,
    pub acc: f64,
    pub lat: f64,
}

/// Index of the candidate with the highest target; lower latency wins ties.
pub fn select_branches(candidates: &[Candidate], cfg: &BranchSelectConfig) -> Result<usize> {
    if candidates.is_empty() {
        return Err(Error::Invalid("no branch candidates".into()));
    }
    if !(cfg.target_ms > 0.0) {
        return Err(Error::Invalid(format!("target latency must be positive, got {}", cfg.target_ms)));
    }
    for c in candidates {
        if !(c.acc > 0.0 && c.acc <= 1.0) || !(c.lat > 0.0) {
            return Err(Error::Invalid(format!("candidate with acc {} and latency {} out of range", c.acc, c.lat)));
        }
    }
    let mut best = 0;
    let mut best_t = branch_target(candidates[0].acc, candidates[0].lat, cfg);
    for (i, c) in candidates.iter().enumerate().skip(1) {
        let t = branch_target(c.acc, c.lat, cfg);
        if t > best_t || (t == best_t && c.lat < candidates[best].lat) {
            best = i;
            best_t = t;
        }
    }
    Ok(best)
}
