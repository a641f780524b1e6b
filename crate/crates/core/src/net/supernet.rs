//! The searchable multi-resolution supernet: stem, lattice cells mixing their
//! operators and inputs by α and β, and one head per pair of final rates.

use rand_chacha::ChaCha8Rng;

use super::ops::{op_forward, ConvBlock, OpWeights};
use crate::arch::ProbVars;
use crate::error::{Error, Result};
use crate::numerics::kernels::conv_out;
use crate::numerics::{Tape, Var};
use crate::params::{Binder, ParamStore};
use crate::space::{CellPosition, SearchSpace, Transition};

/// Width used by one cell in a forward pass.
#[derive(Debug, Clone, Copy, PartialEq)]
pub enum CellWidth {
    /// Ratio index, no gradient towards γ.
    Fixed(usize),
    /// Straight-through: runs ratio `index`, gradient flows into `soft[index]`.
    Hard { index: usize, soft: Var },
    /// Mixture of every ratio weighted by `soft`, zero-padded to the widest.
    Soft { soft: Var },
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct CellWeights {
    /// `[operator][transition]`; the stride-2 slot is empty when the cell has no double-rate successor.
    pub ops: Vec<[Option<OpWeights>; 2]>,
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct HeadWeights {
    pub rates: (u32, u32),
    pub reduce: ConvBlock,
    pub fuse: ConvBlock,
    pub classifier: ConvBlock,
}

impl HeadWeights {
    pub fn new(store: &mut ParamStore, space: &SearchSpace, rates: (u32, u32), rng: &mut ChaCha8Rng) -> Result<Self> {
        let (fine, coarse) = rates;
        let x = space.max_ratio();
        let ch = space.head.channels;
        let name = format!("head.{fine}_{coarse}");
        Ok(Self {
            rates,
            reduce: ConvBlock::new(store, &format!("{name}.reduce"), ch, space.channels(coarse, x), 1, rng)?,
            fuse: ConvBlock::new(store, &format!("{name}.fuse"), ch, space.channels(fine, x) + ch, 3, rng)?,
            classifier: ConvBlock::new(store, &format!("{name}.classifier"), space.head.classes, ch, 1, rng)?.linear(),
        })
    }
}

/// Per-pixel logits at the resolution of `fine`; `coarse` may be any coarser size.
pub fn head_forward(tape: &mut Tape, b: &mut Binder, w: &HeadWeights, fine: Var, coarse: Var) -> Result<Var> {
    let fs = tape.shape(fine).to_vec();
    let cs = tape.shape(coarse).to_vec();
    if fs.len() != 4 || cs.len() != 4 || cs[2] > fs[2] || cs[3] > fs[3] || fs[0] != cs[0] {
        return Err(Error::Shape(format!("head inputs {fs:?} and {cs:?}")));
    }
    let reduced = w.reduce.apply(tape, b, coarse, w.reduce.out, 1, true)?;
    let up = tape.resize(reduced, fs[2], fs[3])?;
    let fine = tape.pad_channels(fine, w.fuse.inp - w.reduce.out)?;
    let cat = tape.concat_channels(fine, up)?;
    let fused = w.fuse.apply(tape, b, cat, w.fuse.out, 1, true)?;
    w.classifier.apply(tape, b, fused, w.classifier.out, 1, false)
}

pub fn stem_forward(tape: &mut Tape, b: &mut Binder, blocks: &[ConvBlock], strides: &[usize], image: Var) -> Result<Var> {
    let s = tape.shape(image).to_vec();
    let total: usize = strides.iter().product();
    if s.len() != 4 || !s[2].is_multiple_of(total) || !s[3].is_multiple_of(total) {
        return Err(Error::Shape(format!("image {s:?} is not divisible by the stem stride {total}")));
    }
    let mut y = image;
    for (blk, &st) in blocks.iter().zip(strides) {
        y = blk.apply(tape, b, y, blk.out, st, true)?;
    }
    Ok(y)
}

/// Architecture inputs of one forward pass: α and effective β probabilities per cell and a width per cell.
#[derive(Debug, Clone)]
pub struct ArchInputs {
    pub alpha: Vec<Var>,
    pub beta: Vec<Var>,
    pub widths: Vec<CellWidth>,
}

impl ArchInputs {
    pub fn new(probs: &ProbVars, widths: Vec<CellWidth>) -> Self {
        Self { alpha: probs.alpha.clone(), beta: probs.beta.clone(), widths }
    }
}

/// Input mixing over predecessors, then the α-weighted operator sum for each transition.
/// Returns `[same-rate output, double-rate output]`.
#[allow(clippy::too_many_arguments)]
pub fn cell_forward(
    tape: &mut Tape,
    b: &mut Binder,
    space: &SearchSpace,
    cell: &CellWeights,
    pos: CellPosition,
    half: Option<Var>,
    same: Option<Var>,
    alpha: Var,
    beta: Var,
    width: CellWidth,
) -> Result<[Option<Var>; 2]> {
    let input = match (half, same) {
        (Some(h), Some(s)) => {
            let c = tape.shape(h)[1].max(tape.shape(s)[1]);
            let (h, s) = (tape.pad_channels(h, c)?, tape.pad_channels(s, c)?);
            let (h, s) = (tape.scale_by(h, beta, 0), tape.scale_by(s, beta, 1));
            tape.add(h, s)?
        }
        (Some(x), None) | (None, Some(x)) => x,
        (None, None) => return Err(Error::Invalid(format!("cell {pos} has no input"))),
    };
    let mut out = [None, None];
    for (ti, t) in [Transition::SameRate, Transition::Stride2].into_iter().enumerate() {
        if cell.ops.iter().all(|o| o[ti].is_none()) {
            continue;
        }
        let out_rate = pos.rate * t.stride() as u32;
        let mix_at = |tape: &mut Tape, b: &mut Binder, ratio: u32| -> Result<Var> {
            let c_out = space.channels(out_rate, ratio);
            let mut terms = Vec::with_capacity(cell.ops.len());
            for (k, o) in cell.ops.iter().enumerate() {
                let w = o[ti].as_ref().ok_or_else(|| Error::Invalid(format!("cell {pos} lacks operator {k}")))?;
                let y = op_forward(tape, b, w, input, c_out, t.stride())?;
                terms.push(tape.scale_by(y, alpha, k));
            }
            tape.add_all(&terms)
        };
        let ratios = space.ratios();
        out[ti] = Some(match width {
            CellWidth::Fixed(j) => mix_at(tape, b, ratios[j])?,
            CellWidth::Hard { index, soft } => {
                let y = mix_at(tape, b, ratios[index])?;
                let st = tape.straight_through(soft, index);
                tape.scale_by(y, st, 0)
            }
            CellWidth::Soft { soft } => {
                let c = space.channels(out_rate, space.max_ratio());
                let mut terms = Vec::with_capacity(ratios.len());
                for (j, &r) in ratios.iter().enumerate() {
                    let y = mix_at(tape, b, r)?;
                    let y = tape.pad_channels(y, c)?;
                    terms.push(tape.scale_by(y, soft, j));
                }
                tape.add_all(&terms)?
            }
        });
    }
    Ok(out)
}

#[derive(Debug, Clone, PartialEq)]
pub struct Supernet {
    pub space: SearchSpace,
    pub store: ParamStore,
    pub stem: Vec<ConvBlock>,
    pub stem_strides: Vec<usize>,
    pub cells: Vec<CellWeights>,
    pub heads: Vec<HeadWeights>,
}

/// Logits of every head, in `space.rate_pairs()` order, at the fine rate of each pair.
#[derive(Debug, Clone)]
pub struct SupernetOutput {
    pub logits: Vec<((u32, u32), Var)>,
}

impl Supernet {
    pub fn new(space: &SearchSpace, rng: &mut ChaCha8Rng) -> Result<Self> {
        let mut store = ParamStore::new();
        let mut stem = Vec::new();
        let mut stem_strides = Vec::new();
        for (i, l) in space.stem.layers.iter().enumerate() {
            stem.push(ConvBlock::new(&mut store, &format!("stem.{i}"), l.c_out, l.c_in, l.kernel, rng)?);
            stem_strides.push(l.stride);
        }
        let x = space.max_ratio();
        let mut cells = Vec::with_capacity(space.num_cells());
        for (i, &pos) in space.cells.iter().enumerate() {
            let (_, double) = space.successors(pos);
            let mut ops = Vec::with_capacity(space.operators().len());
            for &kind in space.operators() {
                let inp = space.channels(pos.rate, x);
                let same = Some(OpWeights::new(&mut store, &format!("cell{i}.{}.same", kind.name()), kind, inp, inp, rng)?);
                let strided = match double {
                    Some(_) => Some(OpWeights::new(
                        &mut store,
                        &format!("cell{i}.{}.stride2", kind.name()),
                        kind,
                        space.channels(pos.rate * 2, x),
                        inp,
                        rng,
                    )?),
                    None => None,
                };
                ops.push([same, strided]);
            }
            cells.push(CellWeights { ops });
        }
        let heads = space
            .rate_pairs()
            .into_iter()
            .map(|p| HeadWeights::new(&mut store, space, p, rng))
            .collect::<Result<_>>()?;
        Ok(Self { space: space.clone(), store, stem, stem_strides, cells, heads })
    }

    /// Spatial size of the feature map at `rate` for an `h × w` image.
    pub fn feature_size(&self, h: usize, w: usize, rate: u32) -> (usize, usize) {
        let (mut h, mut w) = (h / self.stem_strides.iter().product::<usize>(), w / self.stem_strides.iter().product::<usize>());
        let mut r = self.space.rates()[0];
        while r < rate {
            h = conv_out(h, 3, 2);
            w = conv_out(w, 3, 2);
            r *= 2;
        }
        (h, w)
    }

    pub fn forward(&self, tape: &mut Tape, b: &mut Binder, arch: &ArchInputs, image: Var) -> Result<SupernetOutput> {
        let space = &self.space;
        let n = space.num_cells();
        if arch.alpha.len() != n || arch.beta.len() != n || arch.widths.len() != n {
            return Err(Error::Shape("architecture inputs do not cover every cell".into()));
        }
        let stem = stem_forward(tape, b, &self.stem, &self.stem_strides, image)?;
        let mut outs: Vec<[Option<Var>; 2]> = vec![[None, None]; n];
        for (i, &pos) in space.cells.iter().enumerate() {
            let (half_pos, same_pos) = space.predecessors(pos);
            let half = half_pos.and_then(|p| space.cell_index(p)).and_then(|j| outs[j][1]);
            let same = if pos.layer == 0 { Some(stem) } else { same_pos.and_then(|p| space.cell_index(p)).and_then(|j| outs[j][0]) };
            outs[i] = cell_forward(tape, b, space, &self.cells[i], pos, half, same, arch.alpha[i], arch.beta[i], arch.widths[i])?;
        }
        let last = space.layers() - 1;
        let feat = |rate: u32| -> Result<Var> {
            let i = space.require(CellPosition::new(last, rate))?;
            outs[i][0].ok_or_else(|| Error::Invalid(format!("no output at final rate {rate}")))
        };
        let mut logits = Vec::with_capacity(self.heads.len());
        for h in &self.heads {
            let (fine, coarse) = (feat(h.rates.0)?, feat(h.rates.1)?);
            logits.push((h.rates, head_forward(tape, b, h, fine, coarse)?));
        }
        Ok(SupernetOutput { logits })
    }
}
