//! Plain feed-forward network realizing a derived [`Genotype`].

use rand_chacha::ChaCha8Rng;

use super::ops::{op_forward, ConvBlock, OpWeights};
use super::supernet::{head_forward, stem_forward, HeadWeights};
use crate::error::{Error, Result};
use crate::genotype::{validate_or_err, Genotype};
use crate::numerics::{Tape, Var};
use crate::params::{Binder, ParamStore};
use crate::space::SearchSpace;

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct DiscreteCell {
    pub op: OpWeights,
    pub c_out: usize,
    pub stride: usize,
}

#[derive(Debug, Clone, PartialEq)]
pub struct DiscreteNet {
    pub genotype: Genotype,
    pub store: ParamStore,
    pub stem: Vec<ConvBlock>,
    pub stem_strides: Vec<usize>,
    /// Cells of each branch; branch 1 starts after the shared prefix.
    pub branches: Vec<Vec<DiscreteCell>>,
    pub head: HeadWeights,
}

impl DiscreteNet {
    pub fn new(g: &Genotype, space: &SearchSpace, rng: &mut ChaCha8Rng) -> Result<Self> {
        validate_or_err(g, space)?;
        if g.branches.len() != 2 {
            return Err(Error::Invalid("discrete networks need exactly two branches".into()));
        }
        let mut store = ParamStore::new();
        let mut stem = Vec::new();
        let mut stem_strides = Vec::new();
        for (i, l) in space.stem.layers.iter().enumerate() {
            stem.push(ConvBlock::new(&mut store, &format!("stem.{i}"), l.c_out, l.c_in, l.kernel, rng)?);
            stem_strides.push(l.stride);
        }
        let base = space.rates()[0];
        let mut branches = Vec::with_capacity(2);
        for (bi, br) in g.branches.iter().enumerate() {
            let start = if bi == 0 { 0 } else { g.shared_prefix_len };
            let (mut rate, mut c_in) = (base, space.stem.out_channels());
            let mut cells = Vec::new();
            for (ci, rec) in br.cells.iter().enumerate() {
                let c_out = space.channels(rec.s, rec.chi);
                if ci >= start {
                    let name = format!("branch{bi}.cell{ci}.{}", rec.op.name());
                    cells.push(DiscreteCell {
                        op: OpWeights::new(&mut store, &name, rec.op, c_out, c_in, rng)?,
                        c_out,
                        stride: (rec.s / rate) as usize,
                    });
                }
                rate = rec.s;
                c_in = c_out;
            }
            branches.push(cells);
        }
        let (a, b) = (g.branches[0].final_rate, g.branches[1].final_rate);
        let head = HeadWeights::new(&mut store, space, (a.min(b), a.max(b)), rng)?;
        Ok(Self { genotype: g.clone(), store, stem, stem_strides, branches, head })
    }

    /// Per-pixel logits at the finer of the two final rates.
    pub fn forward(&self, tape: &mut Tape, b: &mut Binder, image: Var) -> Result<Var> {
        let stem = stem_forward(tape, b, &self.stem, &self.stem_strides, image)?;
        let shared = self.genotype.shared_prefix_len;
        let mut first = Vec::with_capacity(self.branches[0].len());
        let mut x = stem;
        for c in &self.branches[0] {
            x = op_forward(tape, b, &c.op, x, c.c_out, c.stride)?;
            first.push(x);
        }
        let mut y = if shared == 0 { stem } else { first[shared - 1] };
        for c in &self.branches[1] {
            y = op_forward(tape, b, &c.op, y, c.c_out, c.stride)?;
        }
        let finals = [x, y];
        let fine_first = self.genotype.branches[0].final_rate < self.genotype.branches[1].final_rate;
        let (fine, coarse) = if fine_first { (finals[0], finals[1]) } else { (finals[1], finals[0]) };
        head_forward(tape, b, &self.head, fine, coarse)
    }
}
