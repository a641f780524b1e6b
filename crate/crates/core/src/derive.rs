//! Decoding continuous architecture parameters into a [`Genotype`], and the inverse
//! encoding of a genotype as one-hot parameters.

use std::collections::HashSet;

use rand::Rng;
use rand_chacha::ChaCha8Rng;

use crate::arch::{argmax, init_uniform, ArchParams, PIN_LOGIT};
use crate::error::{Error, Result};
use crate::genotype::{merge_shared_prefix, validate_or_err, BranchSpec, CellRecord, Genotype};
use crate::space::{CellPosition, OperatorKind, SearchSpace};

/// Logit given to the runner-up downsample cell when two branches leave a row at
/// different layers. Its β⁰ is still one-hot within 1e-12 but strictly below a
/// [`PIN_LOGIT`] cell.
const RUNNER_UP_LOGIT: f64 = 30.0;

fn log_beta0(params: &ArchParams, i: usize) -> f64 {
    let [z0, z1] = params.beta[i];
    let m = z0.max(z1);
    z0 - (m + ((z0 - m).exp() + (z1 - m).exp()).ln())
}

/// Visit every strictly increasing tuple of `k` layers in `[1, layers)`.
fn for_each_layout(layers: usize, k: usize, f: &mut impl FnMut(&[usize])) {
    fn rec(start: usize, layers: usize, k: usize, cur: &mut Vec<usize>, f: &mut impl FnMut(&[usize])) {
        if cur.len() == k {
            f(cur);
            return;
        }
        let remaining = k - cur.len();
        for l in start..=layers.saturating_sub(remaining) {
            cur.push(l);
            rec(l + 1, layers, k, cur, f);
            cur.pop();
        }
    }
    rec(1, layers, k, &mut Vec::with_capacity(k), f);
}

/// Downsample layers for a branch ending at row `final_row`: the layer `l_r` at
/// which the branch enters row `r`, maximizing `Σ_r log β⁰(l_r, r)` jointly.
/// Ties go to the lexicographically smallest tuple.
pub fn decode_positions(params: &ArchParams, space: &SearchSpace, final_row: usize) -> Vec<usize> {
    let mut best: Option<(f64, Vec<usize>)> = None;
    for_each_layout(space.layers(), final_row, &mut |pos| {
        let score: f64 = pos
            .iter()
            .enumerate()
            .map(|(r, &l)| {
                let i = space.cell_index(CellPosition::new(l, space.rates()[r + 1])).expect("row reachable");
                log_beta0(params, i)
            })
            .sum();
        if best.as_ref().is_none_or(|(b, _)| score > *b) {
            best = Some((score, pos.to_vec()));
        }
    });
    best.map(|(_, p)| p).unwrap_or_default()
}

/// Row occupied at each layer given the entry layers of rows 1..
pub fn rows_from_positions(layers: usize, positions: &[usize]) -> Vec<usize> {
    (0..layers).map(|l| positions.iter().filter(|&&p| p <= l).count()).collect()
}

/// Per-layer cells of one branch before skip shrinking.
fn branch_records(params: &ArchParams, space: &SearchSpace, rows: &[usize]) -> Vec<CellRecord> {
    let rates = space.rates();
    let mut out = Vec::new();
    for (l, &p) in rows.iter().enumerate() {
        let i = space.cell_index(CellPosition::new(l, rates[p])).expect("on lattice");
        let op = space.operators()[argmax(&params.alpha[i])];
        let chi = space.ratios()[argmax(&params.gamma[i])];
        let out_row = rows.get(l + 1).copied().unwrap_or(p);
        let s = rates[out_row];
        if op == OperatorKind::Skip && out_row == p {
            continue;
        }
        out.push(CellRecord::new(op, s, chi).at_layer(l));
    }
    out
}

pub fn derive_branch(params: &ArchParams, space: &SearchSpace, final_rate: u32) -> Result<BranchSpec> {
    let row = space.row(final_rate).ok_or_else(|| Error::Invalid(format!("rate {final_rate} not in the space")))?;
    let positions = decode_positions(params, space, row);
    let rows = rows_from_positions(space.layers(), &positions);
    Ok(BranchSpec { cells: branch_records(params, space, &rows), final_rate })
}

/// Argmax decoding of both branches, skip shrinking and prefix merging.
pub fn derive_genotype(params: &ArchParams, space: &SearchSpace, final_rates: (u32, u32)) -> Result<Genotype> {
    params.check_shape(space)?;
    let (a, b) = final_rates;
    if a == b {
        return Err(Error::Invalid(format!("final rates must differ, got ({a}, {b})")));
    }
    let (lo, hi) = (a.min(b), a.max(b));
    let g = Genotype::new(vec![derive_branch(params, space, lo)?, derive_branch(params, space, hi)?]);
    Ok(merge_shared_prefix(&g))
}

/// Equality up to layer annotations, `c_out` presence and provenance.
pub fn same_architecture(a: &Genotype, b: &Genotype) -> bool {
    strip(a) == strip(b)
}

fn strip(g: &Genotype) -> Genotype {
    let mut g = g.clone();
    g.provenance = None;
    for b in &mut g.branches {
        for c in &mut b.cells {
            c.layer = None;
            c.c_out = None;
        }
    }
    g
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
struct Choice {
    op: OperatorKind,
    chi: Option<u32>,
}

impl Choice {
    fn merge(self, other: Choice) -> Option<Choice> {
        if self.op != other.op {
            return None;
        }
        match (self.chi, other.chi) {
            (Some(x), Some(y)) if x != y => None,
            (x, y) => Some(Choice { op: self.op, chi: x.or(y) }),
        }
    }
}

struct Placement<'a> {
    space: &'a SearchSpace,
    branches: [&'a [CellRecord]; 2],
    rows: [Vec<usize>; 2],
    failed: HashSet<(usize, usize, usize)>,
    // chosen cell per (layer, branch)
    picks: Vec<[Option<Choice>; 2]>,
}

impl Placement<'_> {
    /// Options for branch `b` at layer `l` with `k` records consumed: (choice, consumed).
    fn options(&self, b: usize, l: usize, k: usize) -> Vec<(Choice, bool)> {
        let rates = self.space.rates();
        let rows = &self.rows[b];
        let p = rows[l];
        let out_row = rows.get(l + 1).copied().unwrap_or(p);
        let strided = out_row != p;
        let mut opts = Vec::with_capacity(2);
        if let Some(r) = self.branches[b].get(k) {
            if r.s == rates[out_row] && r.layer.is_none_or(|x| x == l) {
                opts.push((Choice { op: r.op, chi: Some(r.chi) }, true));
            }
        }
        let pinned_here = self.branches[b].get(k).and_then(|r| r.layer) == Some(l);
        if !strided && !pinned_here {
            opts.push((Choice { op: OperatorKind::Skip, chi: None }, false));
        }
        opts
    }

    fn search(&mut self, l: usize, ka: usize, kb: usize) -> bool {
        let layers = self.space.layers();
        if l == layers {
            return ka == self.branches[0].len() && kb == self.branches[1].len();
        }
        if self.branches[0].len() - ka > layers - l || self.branches[1].len() - kb > layers - l {
            return false;
        }
        if self.failed.contains(&(l, ka, kb)) {
            return false;
        }
        let shared = self.rows[0][l] == self.rows[1][l];
        for (ca, ua) in self.options(0, l, ka) {
            for (cb, ub) in self.options(1, l, kb) {
                if shared && ca.merge(cb).is_none() {
                    continue;
                }
                self.picks[l] = [Some(ca), Some(cb)];
                if self.search(l + 1, ka + ua as usize, kb + ub as usize) {
                    return true;
                }
            }
        }
        self.picks[l] = [None, None];
        self.failed.insert((l, ka, kb));
        false
    }
}

fn beta_for_layout(space: &SearchSpace, layouts: &[Vec<usize>; 2], runner_up_first: bool) -> Vec<[f64; 2]> {
    let mut beta = vec![[-PIN_LOGIT, 0.0]; space.num_cells()];
    for r in 0..space.rates().len() - 1 {
        let mut at: Vec<usize> = layouts.iter().filter_map(|p| p.get(r).copied()).collect();
        at.sort_unstable();
        at.dedup();
        let rate = space.rates()[r + 1];
        let idx = |l: usize| space.cell_index(CellPosition::new(l, rate)).expect("row reachable");
        match at.as_slice() {
            [] => {}
            [l] => beta[idx(*l)] = [PIN_LOGIT, 0.0],
            [x, y] => {
                let (hi, lo) = if runner_up_first { (*y, *x) } else { (*x, *y) };
                beta[idx(hi)] = [PIN_LOGIT, 0.0];
                beta[idx(lo)] = [RUNNER_UP_LOGIT, 0.0];
            }
            _ => unreachable!("two branches"),
        }
    }
    beta
}

/// β logits under which both branches decode to the given entry layers, if any.
pub fn encode_layouts(space: &SearchSpace, layouts: [&Vec<usize>; 2], final_rows: [usize; 2]) -> Option<Vec<[f64; 2]>> {
    let owned = [layouts[0].clone(), layouts[1].clone()];
    for runner_up_first in [false, true] {
        let mut params = init_uniform(space);
        params.beta = beta_for_layout(space, &owned, runner_up_first);
        let ok = (0..2).all(|b| {
            decode_positions(&params, space, final_rows[b]) == owned[b]
                && backtrace_positions(&params, space, final_rows[b]) == owned[b]
        });
        if ok {
            return Some(params.beta);
        }
    }
    None
}

/// Random one-hot parameters with a realizable layout for `pair`.
/// With `skip_free`, skip is never chosen, so every layer survives derivation.
pub fn random_one_hot(space: &SearchSpace, pair: (u32, u32), rng: &mut ChaCha8Rng, skip_free: bool) -> Result<ArchParams> {
    let rows = [
        space.row(pair.0).ok_or_else(|| Error::Invalid(format!("rate {} not in the space", pair.0)))?,
        space.row(pair.1).ok_or_else(|| Error::Invalid(format!("rate {} not in the space", pair.1)))?,
    ];
    let mut all: [Vec<Vec<usize>>; 2] = [Vec::new(), Vec::new()];
    for b in 0..2 {
        for_each_layout(space.layers(), rows[b], &mut |p| all[b].push(p.to_vec()));
        if all[b].is_empty() {
            return Err(Error::Invalid("no layout reaches the requested rate".into()));
        }
    }
    let beta = loop {
        let pa = &all[0][rng.gen_range(0..all[0].len())];
        let pb = &all[1][rng.gen_range(0..all[1].len())];
        if let Some(b) = encode_layouts(space, [pa, pb], rows) {
            break b;
        }
    };
    let mut p = init_uniform(space);
    p.beta = beta;
    let ops: Vec<usize> = (0..space.operators().len())
        .filter(|&o| !(skip_free && space.operators()[o] == OperatorKind::Skip))
        .collect();
    if ops.is_empty() {
        return Err(Error::Invalid("operator set has nothing but skip".into()));
    }
    for i in 0..space.num_cells() {
        p.alpha[i][ops[rng.gen_range(0..ops.len())]] = PIN_LOGIT;
        let k = rng.gen_range(0..space.ratios().len());
        p.gamma[i][k] = PIN_LOGIT;
    }
    Ok(p)
}

/// Follow the argmax of the effective β back from the final cell of `final_row`.
fn backtrace_positions(params: &ArchParams, space: &SearchSpace, final_row: usize) -> Vec<usize> {
    let rates = space.rates();
    let mut row = final_row;
    let mut pos = vec![0; final_row];
    for l in (1..space.layers()).rev() {
        if row == 0 {
            break;
        }
        let i = space.cell_index(CellPosition::new(l, rates[row])).expect("on lattice");
        let b = params.effective_beta(space, i);
        if b[0] > b[1] {
            pos[row - 1] = l;
            row -= 1;
        }
    }
    pos
}

fn fixed_positions(recs: &[CellRecord], rates: &[u32]) -> Option<Vec<usize>> {
    let mut prev = rates[0];
    let mut pos = Vec::new();
    for r in recs {
        if r.s != prev {
            pos.push(r.layer? + 1);
        }
        prev = r.s;
    }
    Some(pos)
}

fn base_rate_conflict(g: &Genotype, base: u32) -> Option<String> {
    let [a, b] = g.branches.as_slice() else { return None };
    // cells whose input is at the base rate sit on the shared base row
    let base_run = |cells: &[CellRecord]| -> Vec<CellRecord> {
        let mut prev = base;
        let mut out = Vec::new();
        for c in cells {
            if prev != base {
                break;
            }
            out.push(*c);
            prev = c.s;
        }
        out
    };
    let (ra, rb) = (base_run(&a.cells), base_run(&b.cells));
    let n = ra.len().min(rb.len());
    for i in 0..n {
        let (x, y) = (ra[i], rb[i]);
        if x.op != y.op || x.chi != y.chi {
            return Some(format!(
                "cell {} reads the base-rate row in both branches but is {} (chi={}) in one and {} (chi={}) in the other",
                i + 1,
                x.op,
                x.chi,
                y.op,
                y.chi
            ));
        }
    }
    None
}

/// One-hot parameters whose derivation reproduces `g`.
///
/// Cells of both branches are placed onto lattice layers by exhaustive search;
/// genotypes whose branches would need different operators in a shared lattice
/// cell are rejected with [`Error::Unrepresentable`].
pub fn one_hot_from(g: &Genotype, space: &SearchSpace) -> Result<ArchParams> {
    validate_or_err(g, space)?;
    let [a, b] = g.branches.as_slice() else {
        return Err(Error::Invalid("one-hot encoding needs exactly two branches".into()));
    };
    let rates = space.rates();
    let rows = [space.row(a.final_rate).expect("validated"), space.row(b.final_rate).expect("validated")];
    let candidates = |recs: &[CellRecord], row: usize| -> Vec<Vec<usize>> {
        if let Some(p) = fixed_positions(recs, rates) {
            return vec![p];
        }
        let mut v = Vec::new();
        for_each_layout(space.layers(), row, &mut |p| v.push(p.to_vec()));
        v
    };
    let (ca, cb) = (candidates(&a.cells, rows[0]), candidates(&b.cells, rows[1]));
    for pa in &ca {
        for pb in &cb {
            let Some(beta) = encode_layouts(space, [pa, pb], rows) else { continue };
            let mut params = init_uniform(space);
            params.beta = beta;
            let mut pl = Placement {
                space,
                branches: [&a.cells, &b.cells],
                rows: [rows_from_positions(space.layers(), pa), rows_from_positions(space.layers(), pb)],
                failed: HashSet::new(),
                picks: vec![[None, None]; space.layers()],
            };
            if !pl.search(0, 0, 0) {
                continue;
            }
            for l in 0..space.layers() {
                for br in 0..2 {
                    let c = pl.picks[l][br].expect("complete placement");
                    let i = space.cell_index(CellPosition::new(l, rates[pl.rows[br][l]])).expect("on lattice");
                    params.alpha[i] = vec![0.0; space.operators().len()];
                    params.alpha[i][space.operator_index(c.op).expect("validated")] = PIN_LOGIT;
                    if let Some(chi) = c.chi {
                        params.gamma[i] = vec![0.0; space.ratios().len()];
                        params.gamma[i][space.ratio_index(chi).expect("validated")] = PIN_LOGIT;
                    }
                }
            }
            for i in 0..space.num_cells() {
                if params.alpha[i].iter().all(|&v| v == 0.0) {
                    params.alpha[i][0] = PIN_LOGIT;
                }
                if params.gamma[i].iter().all(|&v| v == 0.0) {
                    params.gamma[i][0] = PIN_LOGIT;
                }
            }
            return Ok(params);
        }
    }
    let why = base_rate_conflict(g, rates[0])
        .unwrap_or_else(|| "no layer placement keeps the cells shared by both branches consistent".into());
    Err(Error::Unrepresentable(why))
}
