//! Bilevel search: weight pretraining, alternating weight/architecture updates,
//! teacher/student co-search, and training derived networks from scratch.

use std::fmt::Write as _;
use std::path::Path;

use rand::seq::SliceRandom;
use rand::Rng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::arch::{argmax, gumbel_noise, init_uniform, ArchCheckpoint, ArchParams, ArchVars, GumbelConfig, ProbVars};
use crate::data::{predict, Confusion, Split, TaskDataset};
use crate::error::{Error, Result};
use crate::genotype::Genotype;
use crate::latency::{
    decoupled_on_tape, estimate_relaxed, sensitivity_report, solve_regularizer_weights, LatencyTable, LatencyTarget,
    RegularizerWeights,
};
use crate::net::{ArchInputs, CellWidth, DiscreteNet, Supernet};
use crate::numerics::{Tape, Tensor, Var};
use crate::optim::{Adam, Sgd};
use crate::params::{Binder, ParamStore};
use crate::rng::{restore, seeded, snapshot, RngState};
use crate::space::SearchSpace;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum RegularizerMode {
    /// Equal weights on every family.
    Naive,
    /// Per-family weights from `weights_source`.
    Decoupled,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum WeightsSource {
    /// Fixed reference weights that favour the downsampling family.
    Reference,
    /// Solved from the sensitivity probe of the active latency table.
    Solved,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct SearchHyperparams {
    pub lambda: f64,
    pub pretrain_epochs: usize,
    pub search_epochs: usize,
    pub batch_size: usize,
    pub weight_lr: f64,
    pub momentum: f64,
    pub weight_decay: f64,
    /// Per-epoch multiplicative learning-rate decay.
    pub lr_decay: f64,
    pub arch_lr: f64,
    pub keep_fraction: f64,
    pub mode: RegularizerMode,
    pub weights_source: WeightsSource,
    pub gumbel: GumbelConfig,
    pub seed: u64,
}

impl Default for SearchHyperparams {
    fn default() -> Self {
        Self {
            lambda: 0.01,
            pretrain_epochs: 4,
            search_epochs: 8,
            batch_size: 8,
            weight_lr: 0.02,
            momentum: 0.9,
            weight_decay: 5e-4,
            lr_decay: 0.99,
            arch_lr: 3e-4,
            keep_fraction: 0.25,
            mode: RegularizerMode::Decoupled,
            weights_source: WeightsSource::Reference,
            gumbel: GumbelConfig::default(),
            seed: 0,
        }
    }
}

impl SearchHyperparams {
    pub fn validate(&self) -> Result<()> {
        let bad = |m: &str| Err(Error::InvalidConfig(m.into()));
        if !(self.lambda >= 0.0 && self.lambda.is_finite()) {
            return bad("lambda must be a finite non-negative number");
        }
        if self.batch_size == 0 {
            return bad("batch_size must be positive");
        }
        if !(self.keep_fraction > 0.0 && self.keep_fraction <= 1.0) {
            return bad("keep_fraction must be in (0, 1]");
        }
        if !(self.weight_lr > 0.0 && self.arch_lr > 0.0) {
            return bad("learning rates must be positive");
        }
        self.gumbel.validate()
    }

    /// Per-family latency weights implied by `mode` and `weights_source`.
    pub fn regularizer(&self, space: &SearchSpace, lut: &LatencyTable) -> Result<RegularizerWeights> {
        match (self.mode, self.weights_source) {
            (RegularizerMode::Naive, _) => Ok(RegularizerWeights::uniform()),
            (RegularizerMode::Decoupled, WeightsSource::Reference) => Ok(RegularizerWeights::reference()),
            (RegularizerMode::Decoupled, WeightsSource::Solved) => solve_regularizer_weights(&sensitivity_report(space, lut)?),
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Phase {
    Pretrain,
    Weight,
    Arch,
    Eval,
    TeacherWeight,
    StudentWeight,
    TeacherArch,
    StudentArch,
    TeacherEval,
    StudentEval,
    Train,
    TrainEval,
}

impl Phase {
    pub fn name(self) -> &'static str {
        match self {
            Phase::Pretrain => "pretrain",
            Phase::Weight => "weight",
            Phase::Arch => "arch",
            Phase::Eval => "eval",
            Phase::TeacherWeight => "teacher_weight",
            Phase::StudentWeight => "student_weight",
            Phase::TeacherArch => "teacher_arch",
            Phase::StudentArch => "student_arch",
            Phase::TeacherEval => "teacher_eval",
            Phase::StudentEval => "student_eval",
            Phase::Train => "train",
            Phase::TrainEval => "train_eval",
        }
    }

    pub fn from_name(name: &str) -> Option<Self> {
        ALL_PHASES.into_iter().find(|p| p.name() == name)
    }
}

const ALL_PHASES: [Phase; 12] = [
    Phase::Pretrain,
    Phase::Weight,
    Phase::Arch,
    Phase::Eval,
    Phase::TeacherWeight,
    Phase::StudentWeight,
    Phase::TeacherArch,
    Phase::StudentArch,
    Phase::TeacherEval,
    Phase::StudentEval,
    Phase::Train,
    Phase::TrainEval,
];

/// One logged step. When `latency_ms` is present, `total = l_seg + λ·latency_ms`.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct TrajectoryRow {
    pub step: usize,
    pub phase: Phase,
    pub l_seg: f64,
    pub latency_ms: Option<f64>,
    pub total: f64,
    pub val_miou: Option<f64>,
}

#[derive(Debug, Clone, Default, PartialEq)]
pub struct Trajectory {
    pub rows: Vec<TrajectoryRow>,
}

pub const TRAJECTORY_HEADER: &str = "step,phase,L_seg,latency_ms,total,val_mIoU";

impl Trajectory {
    pub fn to_csv(&self) -> String {
        let mut s = String::from(TRAJECTORY_HEADER);
        s.push('\n');
        let opt = |v: Option<f64>| v.map(|x| x.to_string()).unwrap_or_default();
        for r in &self.rows {
            let _ = writeln!(
                s,
                "{},{},{},{},{},{}",
                r.step,
                r.phase.name(),
                r.l_seg,
                opt(r.latency_ms),
                r.total,
                opt(r.val_miou)
            );
        }
        s
    }

    pub fn from_csv(text: &str) -> Result<Self> {
        let mut lines = text.lines().enumerate();
        match lines.next() {
            Some((_, h)) if h.trim() == TRAJECTORY_HEADER => {}
            _ => return Err(Error::Csv { line: 1, msg: format!("expected header `{TRAJECTORY_HEADER}`") }),
        }
        let mut rows = Vec::new();
        for (i, line) in lines {
            if line.trim().is_empty() {
                continue;
            }
            let err = |msg: String| Error::Csv { line: i + 1, msg };
            let f: Vec<&str> = line.split(',').collect();
            if f.len() != 6 {
                return Err(err(format!("expected 6 fields, got {}", f.len())));
            }
            let num = |s: &str| s.parse::<f64>().map_err(|e| err(format!("`{s}`: {e}")));
            let opt = |s: &str| if s.is_empty() { Ok(None) } else { num(s).map(Some) };
            rows.push(TrajectoryRow {
                step: f[0].parse().map_err(|e| err(format!("step `{}`: {e}", f[0])))?,
                phase: Phase::from_name(f[1]).ok_or_else(|| err(format!("unknown phase `{}`", f[1])))?,
                l_seg: num(f[2])?,
                latency_ms: opt(f[3])?,
                total: num(f[4])?,
                val_miou: opt(f[5])?,
            });
        }
        Ok(Self { rows })
    }

    pub fn last(&self, phase: Phase) -> Option<&TrajectoryRow> {
        self.rows.iter().rev().find(|r| r.phase == phase)
    }
}

/// Everything the search loop mutates.
#[derive(Debug, Clone)]
pub struct SearchState {
    pub net: Supernet,
    /// The searched architecture; the student during co-search.
    pub arch: ArchParams,
    /// Co-search teacher with γ pinned to the widest ratio.
    pub teacher: Option<ArchParams>,
    pub sgd: Sgd,
    pub adam: Adam,
    pub teacher_adam: Option<Adam>,
    /// Epochs completed over all phases; drives the learning-rate decay.
    pub epoch: usize,
    pub step: usize,
    pub rng: ChaCha8Rng,
    pub seed: u64,
}

// Stream ids keep weight init, data order and Gumbel draws independent.
const INIT_STREAM: u64 = 1;
const TRAIN_STREAM: u64 = 2;
const SCRATCH_STREAM: u64 = 3;

impl SearchState {
    pub fn new(space: &SearchSpace, hp: &SearchHyperparams) -> Result<Self> {
        hp.validate()?;
        let net = Supernet::new(space, &mut seeded(hp.seed, INIT_STREAM))?;
        let arch = init_uniform(space);
        let sgd = Sgd::new(&net.store, hp.weight_lr, hp.momentum, hp.weight_decay);
        let adam = Adam::new(&arch, hp.arch_lr);
        Ok(Self {
            net,
            arch,
            teacher: None,
            sgd,
            adam,
            teacher_adam: None,
            epoch: 0,
            step: 0,
            rng: seeded(hp.seed, TRAIN_STREAM),
            seed: hp.seed,
        })
    }

    /// State for co-search: teacher and student start from the same uniform logits.
    pub fn new_cosearch(space: &SearchSpace, hp: &SearchHyperparams) -> Result<Self> {
        let mut s = Self::new(space, hp)?;
        let mut teacher = init_uniform(space);
        teacher.pin_gamma_to_max();
        s.teacher_adam = Some(Adam::new(&teacher, hp.arch_lr));
        s.teacher = Some(teacher);
        Ok(s)
    }

    fn lr(&self, hp: &SearchHyperparams) -> f64 {
        hp.weight_lr * hp.lr_decay.powi(self.epoch as i32)
    }

    /// Writes weights, momentum, architecture logits and loop counters under `dir`.
    pub fn save(&self, dir: &Path) -> Result<()> {
        std::fs::create_dir_all(dir)?;
        self.net.store.save(&dir.join("weights"))?;
        self.sgd.velocity_store(&self.net.store)?.save(&dir.join("momentum"))?;
        let space = &self.net.space;
        let meta = StateMeta {
            epoch: self.epoch,
            step: self.step,
            seed: self.seed,
            rng: snapshot(&self.rng, self.seed),
            arch: self.arch.to_checkpoint(space, None),
            teacher: self.teacher.as_ref().map(|t| t.to_checkpoint(space, None)),
            adam: self.adam.clone(),
            teacher_adam: self.teacher_adam.clone(),
            sgd: SgdMeta { lr: self.sgd.lr, momentum: self.sgd.momentum, weight_decay: self.sgd.weight_decay },
        };
        std::fs::write(dir.join("state.json"), serde_json::to_string(&meta)?)?;
        Ok(())
    }

    pub fn load(dir: &Path, space: &SearchSpace) -> Result<Self> {
        let meta: StateMeta = serde_json::from_str(&std::fs::read_to_string(dir.join("state.json"))?)?;
        let mut net = Supernet::new(space, &mut seeded(meta.seed, INIT_STREAM))?;
        let weights = ParamStore::load(&dir.join("weights"))?;
        net.store.copy_from(&weights)?;
        let mut sgd = Sgd::new(&net.store, meta.sgd.lr, meta.sgd.momentum, meta.sgd.weight_decay);
        sgd.load_velocity(&ParamStore::load(&dir.join("momentum"))?)?;
        Ok(Self {
            net,
            arch: ArchParams::from_checkpoint(&meta.arch, space)?,
            teacher: meta.teacher.as_ref().map(|t| ArchParams::from_checkpoint(t, space)).transpose()?,
            sgd,
            adam: meta.adam,
            teacher_adam: meta.teacher_adam,
            epoch: meta.epoch,
            step: meta.step,
            rng: restore(&meta.rng)?,
            seed: meta.seed,
        })
    }
}

#[derive(Debug, Clone, Serialize, Deserialize)]
struct SgdMeta {
    lr: f64,
    momentum: f64,
    weight_decay: f64,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
struct StateMeta {
    epoch: usize,
    step: usize,
    seed: u64,
    rng: RngState,
    arch: ArchCheckpoint,
    teacher: Option<ArchCheckpoint>,
    adam: Adam,
    teacher_adam: Option<Adam>,
    sgd: SgdMeta,
}

/// Shared inputs of the search phases.
#[derive(Debug, Clone, Copy)]
pub struct SearchContext<'a> {
    pub data: &'a TaskDataset,
    pub lut: &'a LatencyTable,
    pub hp: &'a SearchHyperparams,
    pub reg: RegularizerWeights,
}

impl<'a> SearchContext<'a> {
    pub fn new(space: &SearchSpace, data: &'a TaskDataset, lut: &'a LatencyTable, hp: &'a SearchHyperparams) -> Result<Self> {
        hp.validate()?;
        if data.config.classes != space.head.classes {
            return Err(Error::InvalidConfig(format!(
                "task has {} classes but the search space head predicts {}",
                data.config.classes, space.head.classes
            )));
        }
        Ok(Self { data, lut, hp, reg: hp.regularizer(space, lut)? })
    }
}

fn shuffled_batches(data: &TaskDataset, split: Split, batch: usize, rng: &mut ChaCha8Rng) -> Vec<Vec<usize>> {
    let mut idx = data.indices(split);
    idx.shuffle(rng);
    idx.chunks(batch).map(|c| c.to_vec()).collect()
}

/// Mean OHEM loss over the heads, each upsampled to the label resolution.
fn seg_loss(tape: &mut Tape, logits: &[Var], labels: &[usize], hw: (usize, usize), keep: f64) -> Result<Var> {
    let mut terms = Vec::with_capacity(logits.len());
    for &l in logits {
        let up = tape.resize(l, hw.0, hw.1)?;
        terms.push(tape.ohem_cross_entropy(up, labels, keep)?);
    }
    let s = tape.add_all(&terms)?;
    Ok(tape.scale(s, 1.0 / terms.len() as f64))
}

fn check_finite(step: usize, what: &str, v: f64) -> Result<()> {
    if v.is_finite() {
        Ok(())
    } else {
        Err(Error::Diverged { step, what: format!("{what} = {v}") })
    }
}

fn grads_finite(acc: &[Vec<f64>]) -> bool {
    acc.iter().all(|g| g.iter().all(|v| v.is_finite()))
}

fn arch_grads_finite(g: &ArchParams) -> bool {
    g.all_finite()
}

/// Width index per cell drawn from the Gumbel-perturbed γ; pinned γ always yields the widest.
pub fn sample_width_indices(params: &ArchParams, cfg: &GumbelConfig, rng: &mut ChaCha8Rng) -> Vec<usize> {
    params
        .gamma
        .iter()
        .map(|g| {
            if params.gamma_pinned {
                g.len() - 1
            } else {
                let noise = gumbel_noise(rng, g.len());
                let z: Vec<f64> = g.iter().zip(&noise).map(|(l, o)| (l + o) / cfg.temperature).collect();
                argmax(&z)
            }
        })
        .collect()
}

/// One weight update accumulating the mean gradient of several width assignments.
fn weight_step(
    state: &mut SearchState,
    arch: &ArchParams,
    data: &TaskDataset,
    batch: &[usize],
    width_sets: &[Vec<usize>],
    hp: &SearchHyperparams,
) -> Result<f64> {
    let (images, labels) = data.batch(batch);
    let hw = (data.config.height, data.config.width);
    let space = state.net.space.clone();
    let mut acc = state.net.store.zeros_like();
    let mut loss_sum = 0.0;
    for widths in width_sets {
        let mut tape = Tape::new();
        let probs = ProbVars::constants(&mut tape, arch, &space);
        let mut b = Binder::new(&state.net.store);
        let x = tape.constant(images.clone());
        let inputs = ArchInputs::new(&probs, widths.iter().map(|&j| CellWidth::Fixed(j)).collect());
        let out = state.net.forward(&mut tape, &mut b, &inputs, x)?;
        let logits: Vec<Var> = out.logits.iter().map(|(_, v)| *v).collect();
        let loss = seg_loss(&mut tape, &logits, &labels, hw, hp.keep_fraction)?;
        let lv = tape.scalar(loss);
        check_finite(state.step, "segmentation loss", lv)?;
        loss_sum += lv;
        let grads = tape.backward(loss);
        b.accumulate(&grads, &mut acc, 1.0 / width_sets.len() as f64);
    }
    if !grads_finite(&acc) {
        return Err(Error::Diverged { step: state.step, what: "weight gradient".into() });
    }
    state.sgd.lr = state.lr(hp);
    state.sgd.step(&mut state.net.store, &acc)?;
    Ok(loss_sum / width_sets.len() as f64)
}

/// Result of one architecture step.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct ArchStepLog {
    pub l_seg: f64,
    pub latency_ms: Option<f64>,
    pub total: f64,
}

/// Loss of the architecture step and its gradient w.r.t. the logits, on frozen weights.
/// `latency` adds `λ·decoupled latency`; Gumbel noise is drawn from `rng`.
pub fn arch_loss_and_grads(
    net: &Supernet,
    params: &ArchParams,
    images: &Tensor,
    labels: &[usize],
    hp: &SearchHyperparams,
    latency: Option<(&LatencyTable, &RegularizerWeights)>,
    rng: &mut ChaCha8Rng,
) -> Result<(ArchStepLog, ArchParams)> {
    let space = &net.space;
    let hw = (images.shape()[2], images.shape()[3]);
    let mut tape = Tape::new();
    let av = ArchVars::bind(&mut tape, params, space);
    let mut widths = Vec::with_capacity(space.num_cells());
    for i in 0..space.num_cells() {
        widths.push(match av.gamma_logits[i] {
            None => CellWidth::Fixed(argmax(&params.gamma[i])),
            Some(g) => {
                let noise = gumbel_noise(rng, params.gamma[i].len());
                let z = tape.add_const(g, &noise)?;
                let z = tape.scale(z, 1.0 / hp.gumbel.temperature);
                let index = argmax(tape.value(z).data());
                let soft = tape.softmax(z);
                if hp.gumbel.hard {
                    CellWidth::Hard { index, soft }
                } else {
                    CellWidth::Soft { soft }
                }
            }
        });
    }
    let mut b = Binder::new(&net.store);
    let x = tape.constant(images.clone());
    let out = net.forward(&mut tape, &mut b, &ArchInputs::new(&av.probs, widths), x)?;
    let logits: Vec<Var> = out.logits.iter().map(|(_, v)| *v).collect();
    let l_seg = seg_loss(&mut tape, &logits, labels, hw, hp.keep_fraction)?;
    let (total, lat) = match latency {
        Some((lut, w)) => {
            let lat = decoupled_on_tape(&mut tape, &av.probs, space, lut, LatencyTarget::Supernet, w)?;
            let scaled = tape.scale(lat, hp.lambda);
            (tape.add(l_seg, scaled)?, Some(lat))
        }
        None => (l_seg, None),
    };
    let grads = tape.backward(total);
    let log = ArchStepLog {
        l_seg: tape.scalar(l_seg),
        latency_ms: lat.map(|v| tape.scalar(v)),
        total: tape.scalar(total),
    };
    Ok((log, av.logit_grads(&grads, params)))
}

#[allow(clippy::too_many_arguments)]
fn arch_step(
    net: &Supernet,
    params: &mut ArchParams,
    adam: &mut Adam,
    data: &TaskDataset,
    batch: &[usize],
    hp: &SearchHyperparams,
    latency: Option<(&LatencyTable, &RegularizerWeights)>,
    rng: &mut ChaCha8Rng,
    step: usize,
) -> Result<ArchStepLog> {
    let (images, labels) = data.batch(batch);
    let (log, grads) = arch_loss_and_grads(net, params, &images, &labels, hp, latency, rng)?;
    check_finite(step, "architecture loss", log.total)?;
    if !arch_grads_finite(&grads) {
        return Err(Error::Diverged { step, what: "architecture gradient".into() });
    }
    adam.step(params, &grads)?;
    Ok(log)
}

/// Validation of the supernet at argmax widths with α/β mixtures.
#[derive(Debug, Clone, PartialEq)]
pub struct EvalReport {
    pub loss: f64,
    /// Mean of the per-head scores.
    pub miou: f64,
    pub per_head: Vec<((u32, u32), f64)>,
}

pub fn evaluate_supernet(net: &Supernet, arch: &ArchParams, data: &TaskDataset, batch: usize) -> Result<EvalReport> {
    let space = &net.space;
    let widths: Vec<CellWidth> = arch.gamma.iter().map(|g| CellWidth::Fixed(argmax(g))).collect();
    let (h, w) = (data.config.height, data.config.width);
    let mut conf: Vec<Confusion> = net.heads.iter().map(|_| Confusion::new(data.config.classes)).collect();
    let mut loss = 0.0;
    let mut count = 0usize;
    for chunk in data.indices(Split::Val).chunks(batch.max(1)) {
        let (images, labels) = data.batch(chunk);
        let mut tape = Tape::new();
        let probs = ProbVars::constants(&mut tape, arch, space);
        let mut b = Binder::new(&net.store);
        let x = tape.constant(images);
        let out = net.forward(&mut tape, &mut b, &ArchInputs::new(&probs, widths.clone()), x)?;
        let logits: Vec<Var> = out.logits.iter().map(|(_, v)| *v).collect();
        let l = seg_loss(&mut tape, &logits, &labels, (h, w), 1.0)?;
        loss += tape.scalar(l) * chunk.len() as f64;
        count += chunk.len();
        for (k, &v) in logits.iter().enumerate() {
            conf[k].add(&predict(tape.value(v), h, w), &labels);
        }
    }
    let per_head: Vec<((u32, u32), f64)> = net.heads.iter().zip(&conf).map(|(hd, c)| (hd.rates, c.miou())).collect();
    let miou = per_head.iter().map(|(_, m)| m).sum::<f64>() / per_head.len() as f64;
    Ok(EvalReport { loss: loss / count as f64, miou, per_head })
}

/// Mean over cells of the argmax expansion ratio; the architecture-collapse indicator.
pub fn mean_derived_ratio(arch: &ArchParams, space: &SearchSpace) -> f64 {
    let r = space.ratios();
    arch.gamma.iter().map(|g| r[argmax(g)] as f64).sum::<f64>() / arch.gamma.len() as f64
}

fn eval_row(state: &SearchState, arch: &ArchParams, ctx: &SearchContext, phase: Phase) -> Result<TrajectoryRow> {
    let ev = evaluate_supernet(&state.net, arch, ctx.data, ctx.hp.batch_size)?;
    let lat = estimate_relaxed(arch, &state.net.space, ctx.lut, LatencyTarget::Supernet)?;
    Ok(TrajectoryRow {
        step: state.step,
        phase,
        l_seg: ev.loss,
        latency_ms: Some(lat),
        total: ev.loss + ctx.hp.lambda * lat,
        val_miou: Some(ev.miou),
    })
}

fn weight_row(step: usize, phase: Phase, loss: f64) -> TrajectoryRow {
    TrajectoryRow { step, phase, l_seg: loss, latency_ms: None, total: loss, val_miou: None }
}

fn arch_row(step: usize, phase: Phase, log: ArchStepLog) -> TrajectoryRow {
    TrajectoryRow { step, phase, l_seg: log.l_seg, latency_ms: log.latency_ms, total: log.total, val_miou: None }
}

/// Weight-only training at {min, max, two random} widths; architecture logits untouched.
pub fn pretrain(state: &mut SearchState, ctx: &SearchContext, traj: &mut Trajectory) -> Result<()> {
    let hp = ctx.hp;
    let n = state.net.space.num_cells();
    let k = state.net.space.ratios().len();
    let arch = state.arch.clone();
    for _ in 0..hp.pretrain_epochs {
        for batch in shuffled_batches(ctx.data, Split::TrainA, hp.batch_size, &mut state.rng) {
            let mut sets = vec![vec![0; n], vec![k - 1; n]];
            for _ in 0..2 {
                sets.push((0..n).map(|_| state.rng.gen_range(0..k)).collect());
            }
            let loss = weight_step(state, &arch, ctx.data, &batch, &sets, hp)?;
            traj.rows.push(weight_row(state.step, Phase::Pretrain, loss));
            state.step += 1;
        }
        state.epoch += 1;
    }
    Ok(())
}

/// First-order alternation: weights on trainA at {min, max, sampled} widths, then
/// architecture on trainB with `L_seg + λ·latency`. Logs a validation row per epoch.
pub fn search(state: &mut SearchState, ctx: &SearchContext, traj: &mut Trajectory) -> Result<()> {
    let hp = ctx.hp;
    let n = state.net.space.num_cells();
    let k = state.net.space.ratios().len();
    for _ in 0..hp.search_epochs {
        let a = shuffled_batches(ctx.data, Split::TrainA, hp.batch_size, &mut state.rng);
        let b = shuffled_batches(ctx.data, Split::TrainB, hp.batch_size, &mut state.rng);
        for (i, batch) in a.iter().enumerate() {
            let sampled = sample_width_indices(&state.arch, &hp.gumbel, &mut state.rng);
            let sets = vec![vec![0; n], vec![k - 1; n], sampled];
            let arch = state.arch.clone();
            let loss = weight_step(state, &arch, ctx.data, batch, &sets, hp)?;
            traj.rows.push(weight_row(state.step, Phase::Weight, loss));
            state.step += 1;

            let latency = (hp.lambda > 0.0).then_some((ctx.lut, &ctx.reg));
            let log = arch_step(
                &state.net,
                &mut state.arch,
                &mut state.adam,
                ctx.data,
                &b[i % b.len()],
                hp,
                latency,
                &mut state.rng,
                state.step,
            )?;
            traj.rows.push(arch_row(state.step, Phase::Arch, log));
            state.step += 1;
        }
        state.epoch += 1;
        let arch = state.arch.clone();
        traj.rows.push(eval_row(state, &arch, ctx, Phase::Eval)?);
    }
    Ok(())
}

/// Four-step cycle sharing one set of weights: teacher weights, student weights,
/// teacher architecture (no latency term), student architecture (with latency).
pub fn co_search(state: &mut SearchState, ctx: &SearchContext, traj: &mut Trajectory) -> Result<()> {
    let hp = ctx.hp;
    let n = state.net.space.num_cells();
    let k = state.net.space.ratios().len();
    if state.teacher.is_none() || state.teacher_adam.is_none() {
        return Err(Error::Invalid("co-search needs a teacher; build the state with new_cosearch".into()));
    }
    for _ in 0..hp.search_epochs {
        let a = shuffled_batches(ctx.data, Split::TrainA, hp.batch_size, &mut state.rng);
        let b = shuffled_batches(ctx.data, Split::TrainB, hp.batch_size, &mut state.rng);
        for i in 0..a.len() {
            let teacher = state.teacher.clone().expect("checked");
            let loss = weight_step(state, &teacher, ctx.data, &a[i], &[vec![k - 1; n]], hp)?;
            traj.rows.push(weight_row(state.step, Phase::TeacherWeight, loss));
            state.step += 1;

            let sampled = sample_width_indices(&state.arch, &hp.gumbel, &mut state.rng);
            let sets = vec![vec![0; n], vec![k - 1; n], sampled];
            let student = state.arch.clone();
            let loss = weight_step(state, &student, ctx.data, &a[(i + 1) % a.len()], &sets, hp)?;
            traj.rows.push(weight_row(state.step, Phase::StudentWeight, loss));
            state.step += 1;

            let batch_b = &b[i % b.len()];
            let mut teacher = state.teacher.take().expect("checked");
            let mut tadam = state.teacher_adam.take().expect("checked");
            let log = arch_step(&state.net, &mut teacher, &mut tadam, ctx.data, batch_b, hp, None, &mut state.rng, state.step);
            state.teacher = Some(teacher);
            state.teacher_adam = Some(tadam);
            traj.rows.push(arch_row(state.step, Phase::TeacherArch, log?));
            state.step += 1;

            let latency = (hp.lambda > 0.0).then_some((ctx.lut, &ctx.reg));
            let log = arch_step(
                &state.net,
                &mut state.arch,
                &mut state.adam,
                ctx.data,
                batch_b,
                hp,
                latency,
                &mut state.rng,
                state.step,
            )?;
            traj.rows.push(arch_row(state.step, Phase::StudentArch, log));
            state.step += 1;
        }
        state.epoch += 1;
        let teacher = state.teacher.clone().expect("checked");
        traj.rows.push(eval_row(state, &teacher, ctx, Phase::TeacherEval)?);
        let student = state.arch.clone();
        traj.rows.push(eval_row(state, &student, ctx, Phase::StudentEval)?);
    }
    Ok(())
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct TrainHyperparams {
    pub epochs: usize,
    pub batch_size: usize,
    pub lr: f64,
    pub momentum: f64,
    pub weight_decay: f64,
    pub lr_decay: f64,
    pub keep_fraction: f64,
    /// Weight of the distillation term when a teacher is given.
    pub distill_weight: f64,
    pub seed: u64,
}

impl Default for TrainHyperparams {
    fn default() -> Self {
        Self {
            epochs: 8,
            batch_size: 8,
            lr: 0.02,
            momentum: 0.9,
            weight_decay: 5e-4,
            lr_decay: 0.99,
            keep_fraction: 0.25,
            distill_weight: 1.0,
            seed: 0,
        }
    }
}

#[derive(Debug, Clone)]
pub struct TrainOutcome {
    pub net: DiscreteNet,
    pub val_miou: f64,
    pub trajectory: Trajectory,
}

fn discrete_logits_up(tape: &mut Tape, b: &mut Binder, net: &DiscreteNet, images: &Tensor) -> Result<Var> {
    let x = tape.constant(images.clone());
    let l = net.forward(tape, b, x)?;
    tape.resize(l, images.shape()[2], images.shape()[3])
}

pub fn evaluate_discrete(net: &DiscreteNet, data: &TaskDataset, batch: usize) -> Result<f64> {
    let (h, w) = (data.config.height, data.config.width);
    let mut conf = Confusion::new(data.config.classes);
    for chunk in data.indices(Split::Val).chunks(batch.max(1)) {
        let (images, labels) = data.batch(chunk);
        let mut tape = Tape::new();
        let mut b = Binder::new(&net.store);
        let l = discrete_logits_up(&mut tape, &mut b, net, &images)?;
        conf.add(&predict(tape.value(l), h, w), &labels);
    }
    Ok(conf.miou())
}

/// Trains a derived network on trainA ∪ trainB. With a teacher the loss adds
/// `distill_weight · KL(student ‖ teacher)` per pixel; the teacher only runs forward.
pub fn train_from_scratch(
    g: &Genotype,
    space: &SearchSpace,
    data: &TaskDataset,
    hp: &TrainHyperparams,
    teacher: Option<&DiscreteNet>,
) -> Result<TrainOutcome> {
    if hp.batch_size == 0 || !(hp.keep_fraction > 0.0 && hp.keep_fraction <= 1.0) {
        return Err(Error::InvalidConfig("train: batch_size > 0 and keep_fraction in (0, 1] required".into()));
    }
    if let Some(t) = teacher {
        if t.head.classifier.out != space.head.classes {
            return Err(Error::Invalid(format!(
                "teacher predicts {} classes, student {}",
                t.head.classifier.out, space.head.classes
            )));
        }
    }
    let mut net = DiscreteNet::new(g, space, &mut seeded(hp.seed, SCRATCH_STREAM))?;
    let mut sgd = Sgd::new(&net.store, hp.lr, hp.momentum, hp.weight_decay);
    let mut rng = seeded(hp.seed, TRAIN_STREAM);
    let mut traj = Trajectory::default();
    let mut step = 0;
    let mut train_idx = data.indices(Split::TrainA);
    train_idx.extend(data.indices(Split::TrainB));
    for epoch in 0..hp.epochs {
        sgd.lr = hp.lr * hp.lr_decay.powi(epoch as i32);
        let mut order = train_idx.clone();
        order.shuffle(&mut rng);
        for batch in order.chunks(hp.batch_size) {
            let (images, labels) = data.batch(batch);
            let target = match teacher {
                Some(t) => {
                    let mut tt = Tape::new();
                    let mut tb = Binder::new(&t.store);
                    let v = discrete_logits_up(&mut tt, &mut tb, t, &images)?;
                    Some(tt.value(v).clone())
                }
                None => None,
            };
            let mut tape = Tape::new();
            let mut b = Binder::new(&net.store);
            let up = discrete_logits_up(&mut tape, &mut b, &net, &images)?;
            let seg = tape.ohem_cross_entropy(up, &labels, hp.keep_fraction)?;
            let total = match &target {
                Some(t) => {
                    let kl = tape.kl_distill(up, t)?;
                    let kl = tape.scale(kl, hp.distill_weight);
                    tape.add(seg, kl)?
                }
                None => seg,
            };
            let (lv, tv) = (tape.scalar(seg), tape.scalar(total));
            check_finite(step, "training loss", tv)?;
            let grads = tape.backward(total);
            let mut acc = net.store.zeros_like();
            b.accumulate(&grads, &mut acc, 1.0);
            if !grads_finite(&acc) {
                return Err(Error::Diverged { step, what: "weight gradient".into() });
            }
            sgd.step(&mut net.store, &acc)?;
            traj.rows.push(TrajectoryRow { step, phase: Phase::Train, l_seg: lv, latency_ms: None, total: tv, val_miou: None });
            step += 1;
        }
        let m = evaluate_discrete(&net, data, hp.batch_size)?;
        traj.rows.push(TrajectoryRow { step, phase: Phase::TrainEval, l_seg: 0.0, latency_ms: None, total: 0.0, val_miou: Some(m) });
    }
    let val_miou = evaluate_discrete(&net, data, hp.batch_size)?;
    Ok(TrainOutcome { net, val_miou, trajectory: traj })
}
