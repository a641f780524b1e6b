//! Convolution blocks and the five searchable operators over superkernels.

use rand_chacha::ChaCha8Rng;

use crate::error::{Error, Result};
use crate::numerics::kernels::conv_out;
use crate::numerics::{Tape, Tensor, Var};
use crate::params::{Binder, ParamId, ParamStore};
use crate::space::OperatorKind;

const NORM_EPS: f64 = 1e-5;

/// Convolution, batch-statistics standardization, then per-channel affine scaling (together, the batch-norm stand-in).
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct ConvBlock {
    pub kernel: ParamId,
    pub scale: ParamId,
    pub bias: ParamId,
    pub out: usize,
    pub inp: usize,
    pub k: usize,
    /// Standardize each channel over the batch before the affine step.
    pub normalize: bool,
}

impl ConvBlock {
    pub fn new(store: &mut ParamStore, name: &str, out: usize, inp: usize, k: usize, rng: &mut ChaCha8Rng) -> Result<Self> {
        let kernel = store.insert_kernel(format!("{name}.w"), [out, inp, k, k], rng)?;
        let scale = store.insert(format!("{name}.scale"), Tensor::full(&[out], 1.0))?;
        let bias = store.insert(format!("{name}.bias"), Tensor::zeros(&[out]))?;
        Ok(Self { kernel, scale, bias, out, inp, k, normalize: true })
    }

    /// Plain convolution plus affine, e.g. a classifier.
    pub fn linear(mut self) -> Self {
        self.normalize = false;
        self
    }

    /// Runs the leading `out × c_in` slice of the superkernel, `c_in` taken from `x`.
    pub fn apply(&self, tape: &mut Tape, b: &mut Binder, x: Var, out: usize, stride: usize, relu: bool) -> Result<Var> {
        let c_in = tape.shape(x)[1];
        if c_in > self.inp || out > self.out || out == 0 {
            return Err(Error::Shape(format!("block [{}x{}] asked for [{out}x{c_in}]", self.out, self.inp)));
        }
        let mut w = b.var(tape, self.kernel);
        if (out, c_in) != (self.out, self.inp) {
            w = tape.kernel_prefix(w, out, c_in)?;
        }
        let mut y = tape.conv2d(x, w, stride)?;
        if self.normalize {
            y = tape.normalize(y, NORM_EPS)?;
        }
        let (mut s, mut bi) = (b.var(tape, self.scale), b.var(tape, self.bias));
        if out != self.out {
            s = tape.vec_prefix(s, out)?;
            bi = tape.vec_prefix(bi, out)?;
        }
        let y = tape.affine(y, s, bi)?;
        Ok(if relu { tape.relu(y) } else { y })
    }
}

/// Superkernel weights of one operator on one transition.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct OpWeights {
    pub kind: OperatorKind,
    pub blocks: Vec<ConvBlock>,
}

impl OpWeights {
    /// Sized for the widest ratio; skip gets a 1×1 projection used when shapes change.
    pub fn new(store: &mut ParamStore, name: &str, kind: OperatorKind, out: usize, inp: usize, rng: &mut ChaCha8Rng) -> Result<Self> {
        let blocks = match kind.conv_count() {
            0 => vec![ConvBlock::new(store, &format!("{name}.proj"), out, inp, 1, rng)?],
            n => (0..n)
                .map(|i| ConvBlock::new(store, &format!("{name}.conv{i}"), out, if i == 0 { inp } else { out }, 3, rng))
                .collect::<Result<_>>()?,
        };
        Ok(Self { kind, blocks })
    }
}

/// Applies one operator with `c_out` output channels.
pub fn op_forward(tape: &mut Tape, b: &mut Binder, w: &OpWeights, x: Var, c_out: usize, stride: usize) -> Result<Var> {
    if stride != 1 && stride != 2 {
        return Err(Error::Shape(format!("unsupported stride {stride}")));
    }
    let s = tape.shape(x).to_vec();
    if s.len() != 4 {
        return Err(Error::Shape(format!("operator input must be NCHW, got {s:?}")));
    }
    let (h, wd) = (s[2], s[3]);
    match w.kind {
        OperatorKind::Skip => {
            if stride == 1 && s[1] == c_out {
                Ok(x)
            } else {
                w.blocks[0].apply(tape, b, x, c_out, stride, false)
            }
        }
        OperatorKind::Conv3x3 | OperatorKind::Conv3x3X2 => chain(tape, b, &w.blocks, x, c_out, stride),
        OperatorKind::ZoomedConv | OperatorKind::ZoomedConvX2 => {
            let down = tape.resize(x, h.div_ceil(2), wd.div_ceil(2))?;
            let y = chain(tape, b, &w.blocks, down, c_out, stride)?;
            tape.resize(y, conv_out(h, 3, stride), conv_out(wd, 3, stride))
        }
    }
}

fn chain(tape: &mut Tape, b: &mut Binder, blocks: &[ConvBlock], x: Var, c_out: usize, stride: usize) -> Result<Var> {
    let mut y = x;
    for (i, blk) in blocks.iter().enumerate() {
        y = blk.apply(tape, b, y, c_out, if i == 0 { stride } else { 1 }, true)?;
    }
    Ok(y)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::rng::seeded;

    fn input(tape: &mut Tape, c: usize, h: usize, w: usize, v: f64) -> Var {
        tape.leaf(Tensor::full(&[1, c, h, w], v))
    }

    #[test]
    fn skip_identity_and_projection() {
        let mut store = ParamStore::new();
        let w = OpWeights::new(&mut store, "s", OperatorKind::Skip, 4, 4, &mut seeded(0, 0)).unwrap();
        let mut tape = Tape::new();
        let mut b = Binder::new(&store);
        let x = input(&mut tape, 4, 5, 6, 0.5);
        assert_eq!(op_forward(&mut tape, &mut b, &w, x, 4, 1).unwrap(), x);
        let y = op_forward(&mut tape, &mut b, &w, x, 3, 2).unwrap();
        assert_eq!(tape.shape(y), &[1, 3, 3, 3]);
    }

    #[test]
    fn strided_shapes_agree_across_operators() {
        let mut store = ParamStore::new();
        let mut rng = seeded(1, 0);
        let ops: Vec<_> = OperatorKind::ALL
            .iter()
            .map(|&k| OpWeights::new(&mut store, k.name(), k, 6, 4, &mut rng).unwrap())
            .collect();
        let mut tape = Tape::new();
        let mut b = Binder::new(&store);
        let x = input(&mut tape, 4, 5, 7, 1.0);
        for w in &ops {
            let y = op_forward(&mut tape, &mut b, w, x, 6, 2).unwrap();
            assert_eq!(tape.shape(y), &[1, 6, 3, 4], "{:?}", w.kind);
        }
    }
}
