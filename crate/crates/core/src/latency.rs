//! Cost model, latency lookup table, relaxed latency estimation and the decoupled
//! regularizer.

use std::collections::HashMap;
use std::fmt::Write as _;

use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};

use crate::arch::{ArchParams, ArchVars, ProbVars};
use crate::derive::rows_from_positions;
use crate::error::{Error, Result};
use crate::genotype::Genotype;
use crate::numerics::{Tape, Tensor, Var};
use crate::rng;
use crate::space::{
    operator_metadata, CellPosition, OperatorKind, SearchSpace, StemSpec, Transition, CONV_REFERENCE_MS,
    REFERENCE_SHAPE,
};

const REF_CHANNELS: f64 = REFERENCE_SHAPE[1] as f64;
const REF_AREA: f64 = (REFERENCE_SHAPE[2] * REFERENCE_SHAPE[3]) as f64;

/// Analytic latency law anchored at the reference layer shape.
///
/// A k×k convolution costs `ref_ms × ((1 − μ)·m + μ·a)` where `m` is its MAC count
/// and `a` its activation traffic, both relative to the reference layer. With
/// `μ = 0` the law is quadratic in channels and linear in area.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct SyntheticCost {
    pub activation_weight: f64,
    /// Image size the table is priced for, `[H, W]`.
    pub input_hw: [usize; 2],
    /// Relative std-dev of multiplicative Gaussian noise (0 disables).
    pub noise: f64,
    pub noise_seed: u64,
}

impl Default for SyntheticCost {
    fn default() -> Self {
        Self { activation_weight: 0.02, input_hw: [1024, 2048], noise: 0.0, noise_seed: 0 }
    }
}

impl SyntheticCost {
    pub fn quadratic() -> Self {
        Self { activation_weight: 0.0, ..Self::default() }
    }

    fn validate(&self) -> Result<()> {
        if !(0.0..=1.0).contains(&self.activation_weight) || !(self.noise >= 0.0 && self.noise < 0.5) {
            return Err(Error::Invalid("synthetic cost: activation_weight in [0,1], noise in [0,0.5)".into()));
        }
        if self.input_hw.contains(&0) {
            return Err(Error::Invalid("synthetic cost: empty input size".into()));
        }
        Ok(())
    }

    /// One k×k convolution; areas in pixels.
    pub fn conv(&self, ref_ms: f64, c_in: f64, c_out: f64, area_in: f64, area_out: f64, k: usize) -> f64 {
        let kk = (k * k) as f64 / 9.0;
        let m = c_in * c_out * area_out * kk / (REF_CHANNELS * REF_CHANNELS * REF_AREA);
        let a = (c_in * area_in + c_out * area_out) / (2.0 * REF_CHANNELS * REF_AREA);
        let mu = self.activation_weight;
        ref_ms * ((1.0 - mu) * m + mu * a)
    }

    /// Pure data movement (bilinear resize).
    fn resize(&self, c: f64, area_in: f64, area_out: f64) -> f64 {
        CONV_REFERENCE_MS * self.activation_weight * c * (area_in + area_out) / (2.0 * REF_CHANNELS * REF_AREA)
    }

    fn area(&self, rate: u32) -> f64 {
        (self.input_hw[0] as f64 / rate as f64) * (self.input_hw[1] as f64 / rate as f64)
    }

    /// Cell entry with semantic widths: input `rate·χ`, output `out_rate·χ`.
    pub fn cell(&self, rate: u32, op: OperatorKind, chi: u32, t: Transition) -> f64 {
        let out_rate = rate * t.stride() as u32;
        let (c_in, c_out) = ((rate * chi) as f64, (out_rate * chi) as f64);
        let (a_in, a_out) = (self.area(rate), self.area(out_rate));
        let meta = operator_metadata(op);
        let unit = meta.reference_ms / op.conv_count().max(1) as f64;
        let mut ms = self.conv(unit, c_in, c_out, a_in, a_out, 3);
        if op.conv_count() == 2 {
            ms += self.conv(unit, c_out, c_out, a_out, a_out, 3);
        }
        ms
    }

    pub fn stem(&self, space: &SearchSpace) -> f64 {
        let base = space.rates()[0];
        let spec = StemSpec::new(3, (base * space.max_ratio()) as usize);
        let mut rate = 1u32;
        let mut ms = 0.0;
        for l in &spec.layers {
            let out = rate * l.stride as u32;
            ms += self.conv(CONV_REFERENCE_MS, l.c_in as f64, l.c_out as f64, self.area(rate), self.area(out), 3);
            rate = out;
        }
        ms
    }

    pub fn head(&self, space: &SearchSpace, hi: u32, lo: u32) -> f64 {
        let x = space.max_ratio();
        let ch = (space.rates()[0] * x) as f64;
        let (a_hi, a_lo) = (self.area(hi), self.area(lo));
        self.conv(CONV_REFERENCE_MS, (lo * x) as f64, ch, a_lo, a_lo, 1)
            + self.resize(ch, a_lo, a_hi)
            + self.conv(CONV_REFERENCE_MS, (hi * x) as f64 + ch, ch, a_hi, a_hi, 3)
            + self.conv(CONV_REFERENCE_MS, ch, space.head.classes as f64, a_hi, a_hi, 1)
    }
}

#[derive(Debug, Clone, PartialEq)]
pub enum CostModel {
    Synthetic(SyntheticCost),
    /// Externally measured entries, e.g. read with [`LatencyTable::from_csv`].
    Measured(LatencyTable),
}

/// Dense latency table over one search space.
#[derive(Debug, Clone)]
pub struct LatencyTable {
    cells: Vec<CellPosition>,
    operators: Vec<OperatorKind>,
    ratios: Vec<u32>,
    // [cell][op][ratio][transition]; NaN where the transition does not exist
    entries: Vec<f64>,
    stem_ms: f64,
    head_ms: Vec<((u32, u32), f64)>,
}

impl PartialEq for LatencyTable {
    // bitwise, so absent (NaN) slots compare equal
    fn eq(&self, o: &Self) -> bool {
        let bits = |v: &[f64]| v.iter().map(|x| x.to_bits()).collect::<Vec<_>>();
        self.cells == o.cells
            && self.operators == o.operators
            && self.ratios == o.ratios
            && bits(&self.entries) == bits(&o.entries)
            && self.stem_ms.to_bits() == o.stem_ms.to_bits()
            && self.head_ms.len() == o.head_ms.len()
            && self.head_ms.iter().zip(&o.head_ms).all(|(a, b)| a.0 == b.0 && a.1.to_bits() == b.1.to_bits())
    }
}

fn stride2_exists(space: &SearchSpace, pos: CellPosition) -> bool {
    space.successors(pos).1.is_some()
}

fn key_string(pos: CellPosition, op: OperatorKind, chi: u32, t: Transition) -> String {
    format!("{},{},{},{},{}", pos.layer, pos.rate, op.name(), chi, t.name())
}

const TRANSITIONS: [Transition; 2] = [Transition::SameRate, Transition::Stride2];

impl LatencyTable {
    fn slot(&self, ci: usize, oi: usize, ri: usize, t: Transition) -> usize {
        ((ci * self.operators.len() + oi) * self.ratios.len() + ri) * 2 + (t == Transition::Stride2) as usize
    }

    fn cell_index(&self, pos: CellPosition) -> Option<usize> {
        self.cells.binary_search(&pos).ok()
    }

    pub fn get(&self, pos: CellPosition, op: OperatorKind, chi: u32, t: Transition) -> Result<f64> {
        let miss = || Error::LookupMiss(key_string(pos, op, chi, t));
        let ci = self.cell_index(pos).ok_or_else(miss)?;
        let oi = self.operators.iter().position(|&o| o == op).ok_or_else(miss)?;
        let ri = self.ratios.iter().position(|&r| r == chi).ok_or_else(miss)?;
        let v = self.entries[self.slot(ci, oi, ri, t)];
        if v.is_nan() {
            Err(miss())
        } else {
            Ok(v)
        }
    }

    /// `[op][ratio]` block for one cell and transition.
    fn block(&self, ci: usize, t: Transition) -> Vec<f64> {
        let mut m = Vec::with_capacity(self.operators.len() * self.ratios.len());
        for oi in 0..self.operators.len() {
            for ri in 0..self.ratios.len() {
                m.push(self.entries[self.slot(ci, oi, ri, t)]);
            }
        }
        m
    }

    pub fn stem(&self) -> f64 {
        self.stem_ms
    }

    pub fn head(&self, pair: (u32, u32)) -> Result<f64> {
        let key = (pair.0.min(pair.1), pair.0.max(pair.1));
        self.head_ms
            .iter()
            .find(|(p, _)| *p == key)
            .map(|(_, v)| *v)
            .ok_or_else(|| Error::LookupMiss(format!("head {}+{}", key.0, key.1)))
    }

    pub fn num_entries(&self) -> usize {
        self.entries.iter().filter(|v| !v.is_nan()).count()
    }

    pub fn iter_entries(&self) -> impl Iterator<Item = (CellPosition, OperatorKind, u32, Transition, f64)> + '_ {
        let (no, nr) = (self.operators.len(), self.ratios.len());
        self.entries.iter().enumerate().filter(|(_, v)| !v.is_nan()).map(move |(k, &v)| {
            let t = TRANSITIONS[k % 2];
            let ri = (k / 2) % nr;
            let oi = (k / 2 / nr) % no;
            let ci = k / 2 / nr / no;
            (self.cells[ci], self.operators[oi], self.ratios[ri], t, v)
        })
    }

    pub fn to_csv(&self) -> String {
        let mut s = String::from("layer,rate,operator,ratio,transition,latency_ms\n");
        for (pos, op, chi, t, v) in self.iter_entries() {
            writeln!(s, "{},{v}", key_string(pos, op, chi, t)).expect("string write");
        }
        writeln!(s, "-,{},stem,-,-,{}", self.cells.first().map(|c| c.rate).unwrap_or(0), self.stem_ms).expect("string write");
        for ((hi, lo), v) in &self.head_ms {
            writeln!(s, "-,{hi}+{lo},head,-,-,{v}").expect("string write");
        }
        s
    }

    /// Parse a table for `space`; every reachable entry must be present.
    pub fn from_csv(text: &str, space: &SearchSpace) -> Result<Self> {
        let mut cells_map: HashMap<String, f64> = HashMap::new();
        let mut stem = None;
        let mut heads: HashMap<(u32, u32), f64> = HashMap::new();
        for (n, line) in text.lines().enumerate() {
            let line_no = n + 1;
            let line = line.trim();
            if line.is_empty() || (n == 0 && line.starts_with("layer")) {
                continue;
            }
            let f: Vec<&str> = line.split(',').map(str::trim).collect();
            let csv_err = |msg: &str| Error::Csv { line: line_no, msg: msg.to_string() };
            if f.len() != 6 {
                return Err(csv_err("expected 6 columns"));
            }
            let v: f64 = f[5].parse().map_err(|_| csv_err("latency is not a number"))?;
            if !(v > 0.0 && v.is_finite()) {
                return Err(csv_err("latency must be positive"));
            }
            match f[2] {
                "stem" => stem = Some(v),
                "head" => {
                    let (a, b) = f[1].split_once('+').ok_or_else(|| csv_err("head rate must be `hi+lo`"))?;
                    let a: u32 = a.parse().map_err(|_| csv_err("bad head rate"))?;
                    let b: u32 = b.parse().map_err(|_| csv_err("bad head rate"))?;
                    heads.insert((a.min(b), a.max(b)), v);
                }
                op => {
                    let layer: usize = f[0].parse().map_err(|_| csv_err("bad layer"))?;
                    let rate: u32 = f[1].parse().map_err(|_| csv_err("bad rate"))?;
                    let op = OperatorKind::parse(op).map_err(|_| csv_err("unknown operator"))?;
                    let chi: u32 = f[3].parse().map_err(|_| csv_err("bad ratio"))?;
                    let t = Transition::parse(f[4]).ok_or_else(|| csv_err("bad transition"))?;
                    cells_map.insert(key_string(CellPosition::new(layer, rate), op, chi, t), v);
                }
            }
        }
        let mut missing = Vec::new();
        let table = Self::fill(space, |pos, op, chi, t| {
            let k = key_string(pos, op, chi, t);
            match cells_map.get(&k) {
                Some(&v) => v,
                None => {
                    missing.push(k);
                    f64::NAN
                }
            }
        });
        let stem_ms = stem.unwrap_or_else(|| {
            missing.push("stem".into());
            f64::NAN
        });
        let mut head_ms = Vec::new();
        for (hi, lo) in space.rate_pairs() {
            match heads.get(&(hi, lo)) {
                Some(&v) => head_ms.push(((hi, lo), v)),
                None => missing.push(format!("head {hi}+{lo}")),
            }
        }
        if !missing.is_empty() {
            return Err(Error::MissingLatency(missing));
        }
        Ok(Self { stem_ms, head_ms, ..table })
    }

    fn fill(space: &SearchSpace, mut f: impl FnMut(CellPosition, OperatorKind, u32, Transition) -> f64) -> Self {
        let mut cells = space.cells.clone();
        cells.sort();
        let operators = space.operators().to_vec();
        let ratios = space.ratios().to_vec();
        let mut entries = vec![f64::NAN; cells.len() * operators.len() * ratios.len() * 2];
        let mut t = Self { cells, operators, ratios, entries: Vec::new(), stem_ms: f64::NAN, head_ms: Vec::new() };
        for ci in 0..t.cells.len() {
            let pos = t.cells[ci];
            for oi in 0..t.operators.len() {
                for ri in 0..t.ratios.len() {
                    for tr in TRANSITIONS {
                        if tr == Transition::Stride2 && !stride2_exists(space, pos) {
                            continue;
                        }
                        let k = t.slot(ci, oi, ri, tr);
                        entries[k] = f(pos, t.operators[oi], t.ratios[ri], tr);
                    }
                }
            }
        }
        t.entries = entries;
        t
    }

    /// True when this table was built for exactly the cells/operators/ratios of `space`.
    pub fn matches(&self, space: &SearchSpace) -> bool {
        let mut cells = space.cells.clone();
        cells.sort();
        self.cells == cells && self.operators == space.operators() && self.ratios == space.ratios()
    }
}

/// Price every reachable (cell, operator, ratio, transition) plus stem and heads.
pub fn build_lut(space: &SearchSpace, cost: &CostModel) -> Result<LatencyTable> {
    match cost {
        CostModel::Measured(t) => {
            // re-read through CSV so coverage is checked against this space
            LatencyTable::from_csv(&t.to_csv(), space)
        }
        CostModel::Synthetic(sc) => {
            sc.validate()?;
            let mut noise = (sc.noise > 0.0).then(|| {
                (rng::seeded(sc.noise_seed, 7), Normal::new(0.0, sc.noise).expect("valid std-dev"))
            });
            let mut jitter = move |v: f64| match noise.as_mut() {
                Some((r, n)) => v * (1.0 + n.sample(r)).max(0.05),
                None => v,
            };
            let mut table = LatencyTable::fill(space, |pos, op, chi, t| jitter(sc.cell(pos.rate, op, chi, t)));
            table.stem_ms = jitter(sc.stem(space));
            table.head_ms = space.rate_pairs().into_iter().map(|(hi, lo)| ((hi, lo), jitter(sc.head(space, hi, lo)))).collect();
            Ok(table)
        }
    }
}

/// Latency of a discrete genotype: stem + head + every cell, shared prefix once.
///
/// Cells without a `layer` annotation are priced at layer = their index in the branch.
pub fn estimate_discrete(g: &Genotype, lut: &LatencyTable, base_rate: u32) -> Result<f64> {
    let mut total = lut.stem();
    if let [a, b] = g.branches.as_slice() {
        total += lut.head((a.final_rate, b.final_rate))?;
    }
    for (bi, br) in g.branches.iter().enumerate() {
        let mut prev = base_rate;
        for (k, c) in br.cells.iter().enumerate() {
            let t = if c.s == prev { Transition::SameRate } else { Transition::Stride2 };
            let pos = CellPosition::new(c.layer.unwrap_or(k), prev);
            let v = lut.get(pos, c.op, c.chi, t)?;
            if !(bi > 0 && k < g.shared_prefix_len) {
                total += v;
            }
            prev = c.s;
        }
    }
    Ok(total)
}

/// What the relaxed latency measures.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub enum LatencyTarget {
    /// Two-branch network with the given final rates; cells on a common path prefix count once.
    Pair(u32, u32),
    /// Sum of the expected path latency to every final rate, plus stem and all heads.
    Supernet,
}

/// Relaxed latency on `tape`, differentiable w.r.t. the probabilities in `probs`.
pub fn relaxed_on_tape(
    tape: &mut Tape,
    probs: &ProbVars,
    space: &SearchSpace,
    lut: &LatencyTable,
    target: LatencyTarget,
) -> Result<Var> {
    if !lut.matches(space) {
        return Err(Error::Invalid("latency table was built for a different search space".into()));
    }
    let n = space.num_cells();
    let rows = space.rates().len();
    let layers = space.layers();
    let cell = |l: usize, r: usize| space.cell_index(CellPosition::new(l, space.rates()[r]));
    let lut_ci: Vec<usize> = space.cells.iter().map(|p| lut.cell_index(*p).expect("matched")).collect();

    // expected cost of each cell's outgoing edges
    let mut edge_cost: Vec<[Option<Var>; 2]> = vec![[None, None]; n];
    for i in 0..n {
        for (ti, tr) in TRANSITIONS.into_iter().enumerate() {
            if tr == Transition::Stride2 && !stride2_exists(space, space.cells[i]) {
                continue;
            }
            let m = lut.block(lut_ci[i], tr);
            edge_cost[i][ti] = Some(tape.bilinear(probs.alpha[i], m, probs.gamma[i])?);
        }
    }
    let mut beta_entry: Vec<[Option<Var>; 2]> = vec![[None, None]; n];
    let mut beta_of = |tape: &mut Tape, i: usize, k: usize| -> Var {
        *beta_entry[i][k].get_or_insert_with(|| tape.index(probs.beta[i], k))
    };

    // usage of every edge by the branch ending at `final_row`
    let mut usage = |tape: &mut Tape, final_row: usize| -> Vec<[Option<Var>; 2]> {
        let mut reach: Vec<Option<Var>> = vec![None; n];
        let mut q: Vec<[Option<Var>; 2]> = vec![[None, None]; n];
        let last = cell(layers - 1, final_row).expect("final cell");
        reach[last] = Some(tape.constant(Tensor::scalar(1.0)));
        for l in (0..layers - 1).rev() {
            for r in 0..rows {
                let Some(i) = cell(l, r) else { continue };
                let mut parts = Vec::new();
                if let Some(j) = cell(l + 1, r) {
                    if let Some(rj) = reach[j] {
                        let b = beta_of(tape, j, 1);
                        let e = tape.mul(rj, b).expect("scalars");
                        q[i][0] = Some(e);
                        parts.push(e);
                    }
                }
                if r + 1 < rows {
                    if let Some(j) = cell(l + 1, r + 1) {
                        if let Some(rj) = reach[j] {
                            let b = beta_of(tape, j, 0);
                            let e = tape.mul(rj, b).expect("scalars");
                            q[i][1] = Some(e);
                            parts.push(e);
                        }
                    }
                }
                if !parts.is_empty() {
                    reach[i] = Some(tape.add_all(&parts).expect("scalars"));
                }
            }
        }
        q[last][0] = reach[last];
        q
    };
    let branch_latency = |tape: &mut Tape, q: &[[Option<Var>; 2]]| -> Result<Var> {
        let mut terms = Vec::new();
        for i in 0..n {
            for t in 0..2 {
                if let (Some(u), Some(c)) = (q[i][t], edge_cost[i][t]) {
                    terms.push(tape.mul(u, c)?);
                }
            }
        }
        tape.add_all(&terms)
    };

    let mut consts = lut.stem();
    let total = match target {
        LatencyTarget::Supernet => {
            let mut parts = Vec::new();
            for f in 0..rows {
                let q = usage(tape, f);
                parts.push(branch_latency(tape, &q)?);
            }
            for pair in space.rate_pairs() {
                consts += lut.head(pair)?;
            }
            tape.add_all(&parts)?
        }
        LatencyTarget::Pair(a, b) => {
            let (ra, rb) = match (space.row(a), space.row(b)) {
                (Some(x), Some(y)) if x != y => (x, y),
                _ => return Err(Error::Invalid(format!("invalid final rate pair ({a}, {b})"))),
            };
            consts += lut.head((a, b))?;
            let qa = usage(tape, ra);
            let qb = usage(tape, rb);
            let la = branch_latency(tape, &qa)?;
            let lb = branch_latency(tape, &qb)?;
            // prefix weight F(c) = Σ over paths from the stem cell of Π β²
            let mut prefix: Vec<Option<Var>> = vec![None; n];
            for l in 0..layers {
                for r in 0..rows {
                    let Some(i) = cell(l, r) else { continue };
                    if l == 0 {
                        prefix[i] = Some(tape.constant(Tensor::scalar(1.0)));
                        continue;
                    }
                    let mut parts = Vec::new();
                    if let Some(j) = cell(l - 1, r) {
                        if let Some(fj) = prefix[j] {
                            let b = beta_of(tape, i, 1);
                            let b2 = tape.mul(b, b)?;
                            parts.push(tape.mul(fj, b2)?);
                        }
                    }
                    if r > 0 {
                        if let Some(j) = cell(l - 1, r - 1) {
                            if let Some(fj) = prefix[j] {
                                let b = beta_of(tape, i, 0);
                                let b2 = tape.mul(b, b)?;
                                parts.push(tape.mul(fj, b2)?);
                            }
                        }
                    }
                    if !parts.is_empty() {
                        prefix[i] = Some(tape.add_all(&parts)?);
                    }
                }
            }
            let mut shared = Vec::new();
            for i in 0..n {
                for t in 0..2 {
                    if let (Some(ua), Some(ub), Some(c), Some(f)) = (qa[i][t], qb[i][t], edge_cost[i][t], prefix[i]) {
                        let ab = tape.mul(ua, ub)?;
                        let w = tape.mul(ab, f)?;
                        shared.push(tape.mul(w, c)?);
                    }
                }
            }
            let sum = tape.add(la, lb)?;
            if shared.is_empty() {
                sum
            } else {
                let s = tape.add_all(&shared)?;
                tape.sub(sum, s)?
            }
        }
    };
    tape.add_const(total, &[consts])
}

/// Plain evaluation of the relaxed latency.
pub fn estimate_relaxed(params: &ArchParams, space: &SearchSpace, lut: &LatencyTable, target: LatencyTarget) -> Result<f64> {
    params.check_shape(space)?;
    let mut tape = Tape::new();
    let av = ArchVars::bind(&mut tape, params, space);
    let v = relaxed_on_tape(&mut tape, &av.probs, space, lut, target)?;
    Ok(tape.scalar(v))
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct RegularizerWeights {
    pub w1: f64,
    pub w2: f64,
    pub w3: f64,
}

impl RegularizerWeights {
    pub fn reference() -> Self {
        Self { w1: 0.001, w2: 0.997, w3: 0.002 }
    }

    pub fn uniform() -> Self {
        Self { w1: 1.0 / 3.0, w2: 1.0 / 3.0, w3: 1.0 / 3.0 }
    }

    pub fn validate(&self) -> Result<()> {
        let w = [self.w1, self.w2, self.w3];
        if w.iter().any(|v| !(*v >= 0.0)) || (w.iter().sum::<f64>() - 1.0).abs() > 1e-9 {
            return Err(Error::Invalid(format!("regularizer weights {w:?} must be nonnegative and sum to 1")));
        }
        Ok(())
    }

    pub fn rounded(&self, decimals: i32) -> [f64; 3] {
        let k = 10f64.powi(decimals);
        [self.w1, self.w2, self.w3].map(|v| (v * k).round() / k)
    }
}

/// Latency gaps between slowest and fastest choices along each family.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct SensitivityReport {
    pub delta_o: f64,
    pub delta_s: f64,
    pub delta_chi: f64,
}

/// Solves `Δ_O·w1 = Δ_s·w2 = Δ_χ·w3` with `w1 + w2 + w3 = 1`.
pub fn solve_regularizer_weights(r: &SensitivityReport) -> Result<RegularizerWeights> {
    let d = [r.delta_o, r.delta_s, r.delta_chi];
    if d.iter().any(|v| !(*v > 0.0) || !v.is_finite()) {
        return Err(Error::DegenerateSensitivity(format!("all deltas must be positive, got {d:?}")));
    }
    let inv: Vec<f64> = d.iter().map(|v| 1.0 / v).collect();
    let s: f64 = inv.iter().sum();
    Ok(RegularizerWeights { w1: inv[0] / s, w2: inv[1] / s, w3: inv[2] / s })
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub enum Axis {
    Operator,
    Rate,
    Ratio,
}

fn mean_cost(lut: &LatencyTable, space: &SearchSpace, i: usize, oi: Option<usize>, ri: Option<usize>) -> f64 {
    let pos = space.cells[i];
    let ops: Vec<usize> = oi.map(|o| vec![o]).unwrap_or_else(|| (0..space.operators().len()).collect());
    let rs: Vec<usize> = ri.map(|r| vec![r]).unwrap_or_else(|| (0..space.ratios().len()).collect());
    let mut s = 0.0;
    let mut n = 0.0;
    for &o in &ops {
        for &r in &rs {
            for t in TRANSITIONS {
                if let Ok(v) = lut.get(pos, space.operators()[o], space.ratios()[r], t) {
                    s += v;
                    n += 1.0;
                }
            }
        }
    }
    s / n
}

fn one_hot_logits(len: usize, k: usize) -> Vec<f64> {
    let mut v = vec![0.0; len];
    v[k] = crate::arch::PIN_LOGIT;
    v
}

/// Every realizable assignment of downsample layers to the branches ending at rows 1...
fn realizable_layouts(space: &SearchSpace) -> Vec<Vec<Vec<usize>>> {
    let rows = space.rates().len();
    let mut per_row: Vec<Vec<Vec<usize>>> = Vec::new();
    for f in 1..rows {
        let mut v = Vec::new();
        layouts(space.layers(), f, &mut Vec::new(), &mut v);
        per_row.push(v);
    }
    let mut out = Vec::new();
    let mut cur = Vec::new();
    product(&per_row, 0, &mut cur, &mut |combo: &[Vec<usize>]| {
        if consistent(space, combo) {
            out.push(combo.to_vec());
        }
    });
    out
}

fn layouts(layers: usize, k: usize, cur: &mut Vec<usize>, out: &mut Vec<Vec<usize>>) {
    if cur.len() == k {
        out.push(cur.clone());
        return;
    }
    let start = cur.last().map(|l| l + 1).unwrap_or(1);
    for l in start..layers {
        cur.push(l);
        layouts(layers, k, cur, out);
        cur.pop();
    }
}

fn product(lists: &[Vec<Vec<usize>>], i: usize, cur: &mut Vec<Vec<usize>>, f: &mut impl FnMut(&[Vec<usize>])) {
    if i == lists.len() {
        f(cur);
        return;
    }
    for item in &lists[i] {
        cur.push(item.clone());
        product(lists, i + 1, cur, f);
        cur.pop();
    }
}

// paths that meet at a cell must agree on its predecessor
fn consistent(space: &SearchSpace, combo: &[Vec<usize>]) -> bool {
    let layers = space.layers();
    let mut pred: HashMap<(usize, usize), usize> = HashMap::new();
    let mut all = vec![Vec::new()];
    all.extend(combo.iter().cloned());
    for pos in &all {
        let rows = rows_from_positions(layers, pos);
        for l in 1..layers {
            let from = rows[l - 1];
            if let Some(&p) = pred.get(&(l, rows[l])) {
                if p != from {
                    return false;
                }
            }
            pred.insert((l, rows[l]), from);
        }
    }
    true
}

fn beta_from_combo(space: &SearchSpace, combo: &[Vec<usize>]) -> Vec<[f64; 2]> {
    let mut beta = vec![[-crate::arch::PIN_LOGIT, 0.0]; space.num_cells()];
    for pos in combo {
        for (r, &l) in pos.iter().enumerate() {
            let i = space.cell_index(CellPosition::new(l, space.rates()[r + 1])).expect("reachable");
            beta[i] = [crate::arch::PIN_LOGIT, 0.0];
        }
    }
    beta
}

/// Supernet latency gap between the slowest and fastest one-hot choice along
/// `axis`, with the other two families uniform.
pub fn sensitivity_probe(space: &SearchSpace, lut: &LatencyTable, axis: Axis) -> Result<f64> {
    let base = crate::arch::init_uniform(space);
    let eval = |p: &ArchParams| estimate_relaxed(p, space, lut, LatencyTarget::Supernet);
    match axis {
        Axis::Operator | Axis::Ratio => {
            let (mut slow, mut fast) = (base.clone(), base.clone());
            for i in 0..space.num_cells() {
                let k = if axis == Axis::Operator { space.operators().len() } else { space.ratios().len() };
                let costs: Vec<f64> = (0..k)
                    .map(|c| match axis {
                        Axis::Operator => mean_cost(lut, space, i, Some(c), None),
                        _ => mean_cost(lut, space, i, None, Some(c)),
                    })
                    .collect();
                let hi = crate::arch::argmax(&costs);
                let neg: Vec<f64> = costs.iter().map(|c| -c).collect();
                let lo = crate::arch::argmax(&neg);
                if axis == Axis::Operator {
                    slow.alpha[i] = one_hot_logits(k, hi);
                    fast.alpha[i] = one_hot_logits(k, lo);
                } else {
                    slow.gamma[i] = one_hot_logits(k, hi);
                    fast.gamma[i] = one_hot_logits(k, lo);
                }
            }
            Ok(eval(&slow)? - eval(&fast)?)
        }
        Axis::Rate => {
            let mut hi = f64::NEG_INFINITY;
            let mut lo = f64::INFINITY;
            for combo in realizable_layouts(space) {
                let mut p = base.clone();
                p.beta = beta_from_combo(space, &combo);
                let v = eval(&p)?;
                hi = hi.max(v);
                lo = lo.min(v);
            }
            Ok(if hi.is_finite() { hi - lo } else { 0.0 })
        }
    }
}

pub fn sensitivity_report(space: &SearchSpace, lut: &LatencyTable) -> Result<SensitivityReport> {
    Ok(SensitivityReport {
        delta_o: sensitivity_probe(space, lut, Axis::Operator)?,
        delta_s: sensitivity_probe(space, lut, Axis::Rate)?,
        delta_chi: sensitivity_probe(space, lut, Axis::Ratio)?,
    })
}

/// Relaxed latency whose gradient w.r.t. α, β, γ is scaled by w1, w2, w3.
/// The forward value is identical to the undecoupled estimate.
pub fn decoupled_on_tape(
    tape: &mut Tape,
    probs: &ProbVars,
    space: &SearchSpace,
    lut: &LatencyTable,
    target: LatencyTarget,
    w: &RegularizerWeights,
) -> Result<Var> {
    w.validate()?;
    let scaled = ProbVars {
        alpha: probs.alpha.iter().map(|&v| tape.grad_scale(v, w.w1)).collect(),
        beta: probs.beta.iter().map(|&v| tape.grad_scale(v, w.w2)).collect(),
        gamma: probs.gamma.iter().map(|&v| tape.grad_scale(v, w.w3)).collect(),
    };
    relaxed_on_tape(tape, &scaled, space, lut, target)
}

/// Value and logit gradients of the decoupled latency.
pub fn decoupled_latency(
    params: &ArchParams,
    space: &SearchSpace,
    lut: &LatencyTable,
    target: LatencyTarget,
    w: &RegularizerWeights,
) -> Result<(f64, ArchParams)> {
    let mut tape = Tape::new();
    let av = ArchVars::bind(&mut tape, params, space);
    let v = decoupled_on_tape(&mut tape, &av.probs, space, lut, target, w)?;
    let grads = tape.backward(v);
    Ok((tape.scalar(v), av.logit_grads(&grads, params)))
}
