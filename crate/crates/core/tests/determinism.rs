mod common;

use common::tiny_preset;
use fastsearch_core::experiment::{run_cosearch, run_distillation, run_search, Workbench};
use fastsearch_core::search::{co_search, pretrain, search, SearchContext, SearchHyperparams, SearchState, Trajectory};

#[test]
fn search_reruns_are_bit_identical() {
    let wb = Workbench::new(tiny_preset()).unwrap();
    let hp = wb.preset.search;
    let a = run_search(&wb, &hp).unwrap();
    let b = run_search(&wb, &hp).unwrap();
    assert_eq!(a.trajectory.to_csv(), b.trajectory.to_csv());
    assert_eq!(a.state.arch.content_hash(&wb.space), b.state.arch.content_hash(&wb.space));
    assert_eq!(a.state.net.store, b.state.net.store);
    assert_eq!(a.genotype, b.genotype);
}

#[test]
fn different_seeds_give_different_trajectories() {
    let wb = Workbench::new(tiny_preset()).unwrap();
    let hp = wb.preset.search;
    let a = run_search(&wb, &hp).unwrap();
    let b = run_search(&wb, &SearchHyperparams { seed: 1, ..hp }).unwrap();
    assert_ne!(a.trajectory.to_csv(), b.trajectory.to_csv());
}

#[test]
fn epoch_at_a_time_matches_one_call() {
    let wb = Workbench::new(tiny_preset()).unwrap();
    let hp = wb.preset.search;
    let whole = run_search(&wb, &hp).unwrap();

    let ctx = SearchContext::new(&wb.space, &wb.data, &wb.lut, &hp).unwrap();
    let one = SearchHyperparams { search_epochs: 1, ..hp };
    let ctx1 = SearchContext { hp: &one, ..ctx };
    let mut st = SearchState::new(&wb.space, &hp).unwrap();
    let mut tr = Trajectory::default();
    pretrain(&mut st, &ctx, &mut tr).unwrap();
    for _ in 0..hp.search_epochs {
        search(&mut st, &ctx1, &mut tr).unwrap();
    }
    assert_eq!(tr.to_csv(), whole.trajectory.to_csv());
    assert_eq!(st.net.store, whole.state.net.store);
}

#[test]
fn resume_from_checkpoint_is_bit_exact() {
    let wb = Workbench::new(tiny_preset()).unwrap();
    let hp = wb.preset.search;
    let ctx = SearchContext::new(&wb.space, &wb.data, &wb.lut, &hp).unwrap();
    let one = SearchHyperparams { search_epochs: 1, ..hp };
    let ctx1 = SearchContext { hp: &one, ..ctx };

    let mut st = SearchState::new(&wb.space, &hp).unwrap();
    let mut tr = Trajectory::default();
    pretrain(&mut st, &ctx, &mut tr).unwrap();
    search(&mut st, &ctx1, &mut tr).unwrap();
    let dir = tempfile::tempdir().unwrap();
    st.save(dir.path()).unwrap();

    let mut cont_tr = Trajectory::default();
    search(&mut st, &ctx1, &mut cont_tr).unwrap();

    let mut resumed = SearchState::load(dir.path(), &wb.space).unwrap();
    let mut res_tr = Trajectory::default();
    search(&mut resumed, &ctx1, &mut res_tr).unwrap();

    assert_eq!(res_tr.to_csv(), cont_tr.to_csv());
    assert_eq!(resumed.net.store, st.net.store);
    assert_eq!(resumed.arch.content_hash(&wb.space), st.arch.content_hash(&wb.space));
    assert_eq!((resumed.epoch, resumed.step), (st.epoch, st.step));
}

#[test]
fn cosearch_resume_keeps_the_teacher() {
    let wb = Workbench::new(tiny_preset()).unwrap();
    let hp = SearchHyperparams { pretrain_epochs: 0, search_epochs: 1, ..wb.preset.search };
    let ctx = SearchContext::new(&wb.space, &wb.data, &wb.lut, &hp).unwrap();
    let mut st = SearchState::new_cosearch(&wb.space, &hp).unwrap();
    let mut tr = Trajectory::default();
    co_search(&mut st, &ctx, &mut tr).unwrap();
    let dir = tempfile::tempdir().unwrap();
    st.save(dir.path()).unwrap();
    let mut resumed = SearchState::load(dir.path(), &wb.space).unwrap();
    let (mut a, mut b) = (Trajectory::default(), Trajectory::default());
    co_search(&mut st, &ctx, &mut a).unwrap();
    co_search(&mut resumed, &ctx, &mut b).unwrap();
    assert_eq!(a.to_csv(), b.to_csv());
    let (t1, t2) = (st.teacher.as_ref().unwrap(), resumed.teacher.as_ref().unwrap());
    assert_eq!(t1.content_hash(&wb.space), t2.content_hash(&wb.space));
}

#[test]
fn cosearch_and_distillation_are_deterministic() {
    let wb = Workbench::new(tiny_preset()).unwrap();
    let hp = wb.preset.search;
    let a = run_cosearch(&wb, &hp).unwrap();
    let b = run_cosearch(&wb, &hp).unwrap();
    assert_eq!(a.trajectory.to_csv(), b.trajectory.to_csv());
    assert!(a.teacher_pinned);
    let d1 = run_distillation(&wb, &a.teacher, &a.student, &wb.preset.train, wb.preset.teacher_epochs).unwrap();
    let d2 = run_distillation(&wb, &a.teacher, &a.student, &wb.preset.train, wb.preset.teacher_epochs).unwrap();
    assert_eq!(d1.distilled.trajectory.to_csv(), d2.distilled.trajectory.to_csv());
    assert_eq!(d1.plain.val_miou.to_bits(), d2.plain.val_miou.to_bits());
}

#[test]
fn zero_epochs_leave_the_architecture_at_initialization() {
    let wb = Workbench::new(tiny_preset()).unwrap();
    let hp = SearchHyperparams { pretrain_epochs: 0, search_epochs: 0, ..wb.preset.search };
    let run = run_search(&wb, &hp).unwrap();
    assert!(run.trajectory.rows.is_empty());
    let init = SearchState::new(&wb.space, &hp).unwrap();
    assert_eq!(run.state.arch.content_hash(&wb.space), init.arch.content_hash(&wb.space));
}
