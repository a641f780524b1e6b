//! End-to-end runs on a preset: search, co-search and distillation.

use crate::data::TaskDataset;
use crate::derive::derive_genotype;
use crate::error::{Error, Result};
use crate::genotype::Genotype;
use crate::latency::{build_lut, estimate_discrete, CostModel, LatencyTable};
use crate::preset::Preset;
use crate::search::{
    co_search, evaluate_supernet, mean_derived_ratio, pretrain, search, train_from_scratch, Phase, SearchContext,
    SearchHyperparams, SearchState, TrainHyperparams, TrainOutcome, Trajectory,
};
use crate::space::SearchSpace;

/// Space, data and latency table built once from a preset.
#[derive(Debug, Clone)]
pub struct Workbench {
    pub preset: Preset,
    pub space: SearchSpace,
    pub data: TaskDataset,
    pub lut: LatencyTable,
}

impl Workbench {
    pub fn new(preset: Preset) -> Result<Self> {
        let space = SearchSpace::new(preset.space.clone(), preset.task.classes)?;
        let lut = build_lut(&space, &CostModel::Synthetic(preset.cost))?;
        Self::with_lut(preset, lut)
    }

    /// Uses an externally supplied table, e.g. measured on hardware.
    pub fn with_lut(preset: Preset, lut: LatencyTable) -> Result<Self> {
        preset.validate()?;
        let space = SearchSpace::new(preset.space.clone(), preset.task.classes)?;
        if !lut.matches(&space) {
            return Err(Error::Invalid("latency table was built for a different search space".into()));
        }
        let data = TaskDataset::generate(preset.task)?;
        Ok(Self { preset, space, data, lut })
    }

    /// Discrete latency of `g` in milliseconds.
    pub fn latency_ms(&self, g: &Genotype) -> Result<f64> {
        estimate_discrete(g, &self.lut, self.space.rates()[0])
    }
}

#[derive(Debug, Clone)]
pub struct SearchRun {
    pub state: SearchState,
    pub trajectory: Trajectory,
    pub genotype: Genotype,
    pub mean_ratio: f64,
    /// Supernet validation score after the last epoch.
    pub final_miou: f64,
    pub latency_ms: f64,
}

/// Pretraining followed by the alternating search.
pub fn run_search(wb: &Workbench, hp: &SearchHyperparams) -> Result<SearchRun> {
    let ctx = SearchContext::new(&wb.space, &wb.data, &wb.lut, hp)?;
    let mut state = SearchState::new(&wb.space, hp)?;
    let mut trajectory = Trajectory::default();
    pretrain(&mut state, &ctx, &mut trajectory)?;
    search(&mut state, &ctx, &mut trajectory)?;
    let final_miou = match trajectory.last(Phase::Eval).and_then(|r| r.val_miou) {
        Some(m) => m,
        None => evaluate_supernet(&state.net, &state.arch, &wb.data, hp.batch_size)?.miou,
    };
    let genotype = derive_genotype(&state.arch, &wb.space, wb.preset.final_pair())?;
    Ok(SearchRun {
        mean_ratio: mean_derived_ratio(&state.arch, &wb.space),
        latency_ms: wb.latency_ms(&genotype)?,
        genotype,
        final_miou,
        trajectory,
        state,
    })
}

#[derive(Debug, Clone)]
pub struct CoSearchRun {
    pub state: SearchState,
    pub trajectory: Trajectory,
    pub teacher: Genotype,
    pub student: Genotype,
    pub teacher_latency_ms: f64,
    pub student_latency_ms: f64,
    /// Whether the teacher's γ is still one-hot on the widest ratio.
    pub teacher_pinned: bool,
}

/// Pretraining followed by the teacher/student co-search.
pub fn run_cosearch(wb: &Workbench, hp: &SearchHyperparams) -> Result<CoSearchRun> {
    let ctx = SearchContext::new(&wb.space, &wb.data, &wb.lut, hp)?;
    let mut state = SearchState::new_cosearch(&wb.space, hp)?;
    let mut trajectory = Trajectory::default();
    pretrain(&mut state, &ctx, &mut trajectory)?;
    co_search(&mut state, &ctx, &mut trajectory)?;
    let teacher_arch = state.teacher.as_ref().ok_or_else(|| Error::Invalid("co-search lost its teacher".into()))?;
    let teacher = derive_genotype(teacher_arch, &wb.space, wb.preset.final_pair())?;
    let student = derive_genotype(&state.arch, &wb.space, wb.preset.final_pair())?;
    Ok(CoSearchRun {
        teacher_pinned: teacher_arch.gamma_at_pinned_max(),
        teacher_latency_ms: wb.latency_ms(&teacher)?,
        student_latency_ms: wb.latency_ms(&student)?,
        teacher,
        student,
        trajectory,
        state,
    })
}

#[derive(Debug, Clone)]
pub struct DistillRun {
    pub teacher: TrainOutcome,
    pub plain: TrainOutcome,
    pub distilled: TrainOutcome,
}

/// Trains the teacher, then the student twice with identical seed and epochs: without and with distillation.
pub fn run_distillation(
    wb: &Workbench,
    teacher: &Genotype,
    student: &Genotype,
    train: &TrainHyperparams,
    teacher_epochs: usize,
) -> Result<DistillRun> {
    let teacher_hp = TrainHyperparams { epochs: teacher_epochs, ..*train };
    let teacher = train_from_scratch(teacher, &wb.space, &wb.data, &teacher_hp, None)?;
    let plain = train_from_scratch(student, &wb.space, &wb.data, train, None)?;
    let distilled = train_from_scratch(student, &wb.space, &wb.data, train, Some(&teacher.net))?;
    Ok(DistillRun { teacher, plain, distilled })
}
