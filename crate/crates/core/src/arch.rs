//! Architecture logits for operators (α), resolution transitions (β) and widths (γ).

use rand::Rng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::error::{Error, Result};
use crate::numerics::{softmax, Gradients, Tape, Tensor, Var};
use crate::rng::{self, RngState};
use crate::space::{CellPosition, SearchSpace};

/// Logit magnitude used to pin a categorical to one entry.
pub const PIN_LOGIT: f64 = 40.0;

#[derive(Debug, Clone, PartialEq)]
pub struct ArchParams {
    pub alpha: Vec<Vec<f64>>,
    /// `[β⁰ (half-rate input), β¹ (same-rate input)]` logits.
    pub beta: Vec<[f64; 2]>,
    pub gamma: Vec<Vec<f64>>,
    /// When set, γ is frozen one-hot on the widest ratio.
    pub gamma_pinned: bool,
}

#[derive(Debug, Clone, PartialEq)]
pub struct CellProbs {
    pub alpha: Vec<f64>,
    pub beta: [f64; 2],
    pub gamma: Vec<f64>,
}

pub fn init_uniform(space: &SearchSpace) -> ArchParams {
    let n = space.num_cells();
    ArchParams {
        alpha: vec![vec![0.0; space.operators().len()]; n],
        beta: vec![[0.0, 0.0]; n],
        gamma: vec![vec![0.0; space.ratios().len()]; n],
        gamma_pinned: false,
    }
}

/// Zero logits plus uniform noise of half-width `jitter`, drawn in cell order.
pub fn init_jittered(space: &SearchSpace, seed: u64, jitter: f64) -> ArchParams {
    let mut p = init_uniform(space);
    if jitter > 0.0 {
        let mut r = rng::seeded(seed, 0);
        for i in 0..p.alpha.len() {
            p.alpha[i].iter_mut().for_each(|v| *v = r.gen_range(-jitter..=jitter));
            p.beta[i].iter_mut().for_each(|v| *v = r.gen_range(-jitter..=jitter));
            p.gamma[i].iter_mut().for_each(|v| *v = r.gen_range(-jitter..=jitter));
        }
    }
    p
}

fn pinned_gamma(len: usize) -> Vec<f64> {
    let mut g = vec![0.0; len];
    g[len - 1] = PIN_LOGIT;
    g
}

impl ArchParams {
    pub fn num_cells(&self) -> usize {
        self.alpha.len()
    }

    /// Softmax of the stored logits at `pos`.
    pub fn probabilities(&self, space: &SearchSpace, pos: CellPosition) -> Result<CellProbs> {
        let i = space.require(pos)?;
        Ok(self.probs_at(i))
    }

    pub fn probs_at(&self, i: usize) -> CellProbs {
        let b = softmax(&self.beta[i]);
        CellProbs { alpha: softmax(&self.alpha[i]), beta: [b[0], b[1]], gamma: softmax(&self.gamma[i]) }
    }

    /// β as used by the forward pass: forced where only one predecessor exists.
    pub fn effective_beta(&self, space: &SearchSpace, i: usize) -> [f64; 2] {
        match forced_beta(space, space.cells[i]) {
            Some(b) => b,
            None => {
                let b = softmax(&self.beta[i]);
                [b[0], b[1]]
            }
        }
    }

    pub fn pin_gamma_to_max(&mut self) {
        self.gamma_pinned = true;
        for g in &mut self.gamma {
            *g = pinned_gamma(g.len());
        }
    }

    /// True when γ is flagged as pinned and every row still holds the pinned one-hot logits.
    pub fn gamma_at_pinned_max(&self) -> bool {
        self.gamma_pinned && self.gamma.iter().all(|g| *g == pinned_gamma(g.len()))
    }

    pub fn check_shape(&self, space: &SearchSpace) -> Result<()> {
        let n = space.num_cells();
        let ok = self.alpha.len() == n
            && self.beta.len() == n
            && self.gamma.len() == n
            && self.alpha.iter().all(|a| a.len() == space.operators().len())
            && self.gamma.iter().all(|g| g.len() == space.ratios().len());
        if ok {
            Ok(())
        } else {
            Err(Error::Shape("architecture parameters do not match the search space".into()))
        }
    }

    pub fn all_finite(&self) -> bool {
        self.alpha.iter().flatten().chain(self.beta.iter().flatten()).chain(self.gamma.iter().flatten()).all(|v| v.is_finite())
    }

    pub fn to_checkpoint(&self, space: &SearchSpace, rng: Option<RngState>) -> ArchCheckpoint {
        let cells = space
            .cells
            .iter()
            .enumerate()
            .map(|(i, pos)| CellLogits {
                layer: pos.layer,
                rate: pos.rate,
                alpha: self.alpha[i].clone(),
                beta: self.beta[i].to_vec(),
                gamma: self.gamma[i].clone(),
            })
            .collect();
        ArchCheckpoint { version: 1, gamma_pinned: self.gamma_pinned, cells, rng }
    }

    pub fn from_checkpoint(ck: &ArchCheckpoint, space: &SearchSpace) -> Result<Self> {
        let mut p = init_uniform(space);
        if ck.cells.len() != space.num_cells() {
            return Err(Error::Shape(format!("checkpoint has {} cells, space has {}", ck.cells.len(), space.num_cells())));
        }
        for c in &ck.cells {
            let i = space.require(CellPosition::new(c.layer, c.rate))?;
            if c.alpha.len() != p.alpha[i].len() || c.beta.len() != 2 || c.gamma.len() != p.gamma[i].len() {
                return Err(Error::Shape(format!("logit lengths at cell (l={}, s={})", c.layer, c.rate)));
            }
            p.alpha[i] = c.alpha.clone();
            p.beta[i] = [c.beta[0], c.beta[1]];
            p.gamma[i] = c.gamma.clone();
        }
        p.gamma_pinned = ck.gamma_pinned;
        Ok(p)
    }

    /// Hex SHA-256 of the canonical JSON checkpoint (without rng state).
    pub fn content_hash(&self, space: &SearchSpace) -> String {
        let json = serde_json::to_vec(&self.to_checkpoint(space, None)).expect("serializable");
        hex::encode(Sha256::digest(&json))
    }
}

/// Forced β for cells with a single predecessor, `None` where β is searchable.
pub fn forced_beta(space: &SearchSpace, pos: CellPosition) -> Option<[f64; 2]> {
    let (half, same) = space.predecessors(pos);
    match (half, same) {
        (Some(_), None) => Some([1.0, 0.0]),
        (None, _) => Some([0.0, 1.0]),
        (Some(_), Some(_)) => None,
    }
}

/// Probability vectors of every cell as tape nodes.
#[derive(Debug, Clone)]
pub struct ProbVars {
    pub alpha: Vec<Var>,
    /// Effective β: constant at single-input cells.
    pub beta: Vec<Var>,
    pub gamma: Vec<Var>,
}

impl ProbVars {
    /// Probabilities as constants, for passes that must not touch the logits.
    pub fn constants(tape: &mut Tape, params: &ArchParams, space: &SearchSpace) -> Self {
        let n = space.num_cells();
        let mut pv = ProbVars { alpha: Vec::with_capacity(n), beta: Vec::with_capacity(n), gamma: Vec::with_capacity(n) };
        for i in 0..n {
            pv.alpha.push(tape.constant(Tensor::vector(softmax(&params.alpha[i]))));
            pv.beta.push(tape.constant(Tensor::vector(params.effective_beta(space, i).to_vec())));
            pv.gamma.push(tape.constant(Tensor::vector(softmax(&params.gamma[i]))));
        }
        pv
    }
}

/// Logit leaves of an [`ArchParams`] bound to a tape, with their probabilities.
#[derive(Debug, Clone)]
pub struct ArchVars {
    pub alpha_logits: Vec<Var>,
    pub beta_logits: Vec<Option<Var>>,
    pub gamma_logits: Vec<Option<Var>>,
    pub probs: ProbVars,
}

impl ArchVars {
    pub fn bind(tape: &mut Tape, params: &ArchParams, space: &SearchSpace) -> Self {
        let n = space.num_cells();
        let mut av = ArchVars {
            alpha_logits: Vec::with_capacity(n),
            beta_logits: Vec::with_capacity(n),
            gamma_logits: Vec::with_capacity(n),
            probs: ProbVars { alpha: Vec::with_capacity(n), beta: Vec::with_capacity(n), gamma: Vec::with_capacity(n) },
        };
        for i in 0..n {
            let a = tape.leaf(Tensor::vector(params.alpha[i].clone()));
            let ap = tape.softmax(a);
            av.alpha_logits.push(a);
            av.probs.alpha.push(ap);
            match forced_beta(space, space.cells[i]) {
                Some(b) => {
                    let c = tape.constant(Tensor::vector(b.to_vec()));
                    av.beta_logits.push(None);
                    av.probs.beta.push(c);
                }
                None => {
                    let b = tape.leaf(Tensor::vector(params.beta[i].to_vec()));
                    let bp = tape.softmax(b);
                    av.beta_logits.push(Some(b));
                    av.probs.beta.push(bp);
                }
            }
            if params.gamma_pinned {
                let c = tape.constant(Tensor::vector(softmax(&params.gamma[i])));
                av.gamma_logits.push(None);
                av.probs.gamma.push(c);
            } else {
                let g = tape.leaf(Tensor::vector(params.gamma[i].clone()));
                let gp = tape.softmax(g);
                av.gamma_logits.push(Some(g));
                av.probs.gamma.push(gp);
            }
        }
        av
    }

    /// Gradients w.r.t. the stored logits; zero where a family is pinned or forced.
    pub fn logit_grads(&self, grads: &Gradients, params: &ArchParams) -> ArchParams {
        let mut out = params.clone();
        for i in 0..self.alpha_logits.len() {
            out.alpha[i] = grads.get(self.alpha_logits[i]).into_data();
            out.beta[i] = match self.beta_logits[i] {
                Some(v) => {
                    let g = grads.get(v);
                    [g.data()[0], g.data()[1]]
                }
                None => [0.0, 0.0],
            };
            out.gamma[i] = match self.gamma_logits[i] {
                Some(v) => grads.get(v).into_data(),
                None => vec![0.0; params.gamma[i].len()],
            };
        }
        out
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CellLogits {
    pub layer: usize,
    pub rate: u32,
    pub alpha: Vec<f64>,
    pub beta: Vec<f64>,
    pub gamma: Vec<f64>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ArchCheckpoint {
    pub version: u32,
    pub gamma_pinned: bool,
    pub cells: Vec<CellLogits>,
    pub rng: Option<RngState>,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct GumbelConfig {
    pub temperature: f64,
    pub rng_seed: u64,
    /// Straight-through (hard forward) when true, soft mixture otherwise.
    pub hard: bool,
}

impl Default for GumbelConfig {
    fn default() -> Self {
        Self { temperature: 1.0, rng_seed: 0, hard: true }
    }
}

impl GumbelConfig {
    pub fn validate(&self) -> Result<()> {
        if self.temperature > 0.0 && self.temperature.is_finite() {
            Ok(())
        } else {
            Err(Error::Invalid(format!("Gumbel temperature must be positive, got {}", self.temperature)))
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct GumbelSample {
    pub index: usize,
    pub weights: Vec<f64>,
    pub noise: Vec<f64>,
}

/// Standard Gumbel draws `-ln(-ln u)`.
pub fn gumbel_noise(rng: &mut ChaCha8Rng, n: usize) -> Vec<f64> {
    (0..n)
        .map(|_| {
            let u: f64 = rng.gen::<f64>().max(f64::MIN_POSITIVE);
            -(-u.ln()).ln()
        })
        .collect()
}

/// τ-softmax of `logits + noise` and its argmax (lowest index on ties).
pub fn gumbel_soft_weights(logits: &[f64], noise: &[f64], tau: f64) -> GumbelSample {
    let z: Vec<f64> = logits.iter().zip(noise).map(|(l, o)| (l + o) / tau).collect();
    let weights = softmax(&z);
    let index = argmax(&z);
    GumbelSample { index, weights, noise: noise.to_vec() }
}

pub fn gumbel_sample_ratio(
    params: &ArchParams,
    space: &SearchSpace,
    pos: CellPosition,
    cfg: &GumbelConfig,
    rng: &mut ChaCha8Rng,
) -> Result<GumbelSample> {
    cfg.validate()?;
    let i = space.require(pos)?;
    let noise = gumbel_noise(rng, params.gamma[i].len());
    Ok(gumbel_soft_weights(&params.gamma[i], &noise, cfg.temperature))
}

/// Index of the largest value; the lowest index wins ties.
pub fn argmax(v: &[f64]) -> usize {
    let mut best = 0;
    for (i, &x) in v.iter().enumerate() {
        if x > v[best] {
            best = i;
        }
    }
    best
}

/// Teacher and student share weights; the teacher always runs at the widest ratio.
#[derive(Debug, Clone, PartialEq)]
pub struct TeacherStudentParams {
    pub teacher: ArchParams,
    pub student: ArchParams,
}

impl TeacherStudentParams {
    pub fn new(space: &SearchSpace) -> Self {
        let mut teacher = init_uniform(space);
        teacher.pin_gamma_to_max();
        Self { teacher, student: init_uniform(space) }
    }
}
