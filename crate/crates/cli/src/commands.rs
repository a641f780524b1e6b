//! Command bodies. Each writes its artifacts through a [`Run`].

use std::path::{Path, PathBuf};

use anyhow::{bail, Context, Result};
use fastsearch_core::derive::derive_genotype;
use fastsearch_core::experiment::Workbench;
use fastsearch_core::genotype::{branch_target, select_branches, validate_or_err, BranchSelectConfig, Candidate};
use fastsearch_core::latency::{
    build_lut, sensitivity_report, solve_regularizer_weights, CostModel, LatencyTable, SensitivityReport,
};
use fastsearch_core::net::DiscreteNet;
use fastsearch_core::params::ParamStore;
use fastsearch_core::preset::Preset;
use fastsearch_core::rng::seeded;
use fastsearch_core::search::{
    co_search, evaluate_supernet, mean_derived_ratio, pretrain, search, train_from_scratch, Phase, SearchContext,
    SearchHyperparams, SearchState, TrainHyperparams, Trajectory,
};
use fastsearch_core::{ArchParams, Genotype, SearchSpace};
use serde::{Deserialize, Serialize};
use serde_json::json;

use crate::manifest::RunManifest;
use crate::run::{Run, PRESET_FILE};
use crate::svg::{architecture, line_plot, Series};

pub const LUT_FILE: &str = "lut.csv";
pub const TRAJECTORY_FILE: &str = "trajectory.csv";
pub const SUMMARY_FILE: &str = "summary.json";
pub const STATE_DIR: &str = "state";

fn space_of(preset: &Preset) -> Result<SearchSpace> {
    Ok(SearchSpace::new(preset.space.clone(), preset.task.classes)?)
}

/// Table from `path` when given, else built from the preset's cost model.
fn load_lut(run: &mut Run, space: &SearchSpace, path: Option<&Path>) -> Result<LatencyTable> {
    match path {
        Some(p) => {
            let text = std::fs::read_to_string(p).with_context(|| format!("reading latency table {}", p.display()))?;
            run.hasher.add("lut", text.as_bytes());
            Ok(LatencyTable::from_csv(&text, space)?)
        }
        None => Ok(build_lut(space, &CostModel::Synthetic(run.preset.cost))?),
    }
}

fn read_genotype(path: &Path, space: &SearchSpace) -> Result<Genotype> {
    let text = std::fs::read_to_string(path).with_context(|| format!("reading genotype {}", path.display()))?;
    let g = Genotype::from_json(&text).with_context(|| format!("parsing genotype {}", path.display()))?;
    validate_or_err(&g, space).with_context(|| format!("validating genotype {}", path.display()))?;
    Ok(g)
}

#[derive(Debug, Clone, Serialize, Deserialize)]
struct SensitivityFile {
    #[serde(flatten)]
    report: SensitivityReport,
    /// `probe` when measured on the latency table, `injected` when given on the command line.
    source: String,
}

pub fn profile(run: &mut Run, deltas: Option<[f64; 3]>, lut_path: Option<&Path>) -> Result<()> {
    let space = space_of(&run.preset)?;
    let lut = load_lut(run, &space, lut_path)?;
    let (report, source) = match deltas {
        Some([o, s, c]) => {
            run.hasher.add("deltas", format!("{o},{s},{c}").as_bytes());
            (SensitivityReport { delta_o: o, delta_s: s, delta_chi: c }, "injected")
        }
        None => (sensitivity_report(&space, &lut)?, "probe"),
    };
    let weights = solve_regularizer_weights(&report)?;
    run.write(LUT_FILE, lut.to_csv())?;
    run.write_json("sensitivity.json", &SensitivityFile { report, source: source.into() })?;
    run.write_json("weights.json", &json!({ "w1": weights.w1, "w2": weights.w2, "w3": weights.w3, "rounded": weights.rounded(3) }))?;
    Ok(())
}

fn arch_json(arch: &ArchParams, space: &SearchSpace) -> Result<String> {
    Ok(serde_json::to_string_pretty(&arch.to_checkpoint(space, None))? + "\n")
}

/// Trajectory, full state and architecture files as of the last completed epoch.
fn checkpoint(run: &Run, state: &SearchState, traj: &Trajectory) -> Result<()> {
    let space = &state.net.space;
    state.save(&run.path(STATE_DIR))?;
    run.write(TRAJECTORY_FILE, traj.to_csv())?;
    match &state.teacher {
        Some(t) => {
            run.write("teacher.json", arch_json(t, space)?)?;
            run.write("student.json", arch_json(&state.arch, space)?)?;
        }
        None => run.write("arch.json", arch_json(&state.arch, space)?)?,
    }
    Ok(())
}

/// Pretraining then `search_epochs` of search or co-search, checkpointing after every epoch.
/// A failing epoch leaves the previous checkpoint in place.
pub fn search_run(run: &mut Run, cosearch: bool, lut_path: Option<&Path>) -> Result<()> {
    let preset = run.preset.clone();
    let space = space_of(&preset)?;
    let lut = load_lut(run, &space, lut_path)?;
    let wb = Workbench::with_lut(preset.clone(), lut)?;
    let hp = preset.search;
    let ctx = SearchContext::new(&wb.space, &wb.data, &wb.lut, &hp)?;
    let mut state = if cosearch { SearchState::new_cosearch(&wb.space, &hp)? } else { SearchState::new(&wb.space, &hp)? };
    let mut traj = Trajectory::default();
    run.write(PRESET_FILE, serde_json::to_string_pretty(&preset)? + "\n")?;
    run.write(LUT_FILE, wb.lut.to_csv())?;
    checkpoint(run, &state, &traj)?;
    let retained = |e: fastsearch_core::Error, run: &Run| {
        anyhow::Error::new(e).context(format!("last good checkpoint retained in {}", run.path(STATE_DIR).display()))
    };
    if hp.pretrain_epochs > 0 {
        pretrain(&mut state, &ctx, &mut traj).map_err(|e| retained(e, run))?;
        checkpoint(run, &state, &traj)?;
    }
    let one = SearchHyperparams { search_epochs: 1, ..hp };
    let ctx1 = SearchContext { hp: &one, ..ctx };
    for _ in 0..hp.search_epochs {
        let r = if cosearch { co_search(&mut state, &ctx1, &mut traj) } else { search(&mut state, &ctx1, &mut traj) };
        r.map_err(|e| retained(e, run))?;
        checkpoint(run, &state, &traj)?;
    }

    let pair = preset.final_pair();
    let summary = if let Some(teacher) = &state.teacher {
        let tg = derive_genotype(teacher, &wb.space, pair)?;
        let sg = derive_genotype(&state.arch, &wb.space, pair)?;
        run.write("teacher_genotype.json", tg.to_json() + "\n")?;
        run.write("student_genotype.json", sg.to_json() + "\n")?;
        json!({
            "command": "cosearch",
            "mode": hp.mode,
            "final_rates": preset.final_rates,
            "teacher_latency_ms": wb.latency_ms(&tg)?,
            "student_latency_ms": wb.latency_ms(&sg)?,
            "teacher_pinned": teacher.gamma_at_pinned_max(),
            "teacher_val_miou": traj.last(Phase::TeacherEval).and_then(|r| r.val_miou),
            "student_val_miou": traj.last(Phase::StudentEval).and_then(|r| r.val_miou),
            "student_mean_ratio": mean_derived_ratio(&state.arch, &wb.space),
        })
    } else {
        let g = derive_genotype(&state.arch, &wb.space, pair)?;
        run.write("genotype.json", g.to_json() + "\n")?;
        let miou = match traj.last(Phase::Eval).and_then(|r| r.val_miou) {
            Some(m) => m,
            None => evaluate_supernet(&state.net, &state.arch, &wb.data, hp.batch_size)?.miou,
        };
        json!({
            "command": "search",
            "mode": hp.mode,
            "final_rates": preset.final_rates,
            "final_val_miou": miou,
            "latency_ms": wb.latency_ms(&g)?,
            "mean_ratio": mean_derived_ratio(&state.arch, &wb.space),
        })
    };
    run.write_json(SUMMARY_FILE, &summary)
}

/// Architecture file of a search run: `arch.json`, or `student.json`/`teacher.json` after co-search.
fn run_arch_file(run_dir: &Path, which: Option<&str>) -> Result<PathBuf> {
    let m = RunManifest::load(run_dir)?;
    let name = match (m.command.as_str(), which) {
        ("search", None | Some("arch")) => "arch.json",
        ("cosearch", None | Some("student")) => "student.json",
        ("cosearch", Some("teacher")) => "teacher.json",
        ("search" | "cosearch", Some(w)) => bail!("a {} run has no `{w}` architecture", m.command),
        (c, _) => bail!("{} holds a `{c}` run; derive needs a search or cosearch run", run_dir.display()),
    };
    if m.status != "ok" {
        bail!("{} did not finish (status `{}`)", run_dir.display(), m.status);
    }
    Ok(run_dir.join(name))
}

/// Derives every rate-pair genotype and ranks them by the latency-weighted target.
pub fn derive(run: &mut Run, run_dir: &Path, which: Option<&str>, select: BranchSelectConfig) -> Result<()> {
    let arch_path = run_arch_file(run_dir, which)?;
    let preset = run.preset.clone();
    let space = space_of(&preset)?;
    let lut = load_lut(run, &space, Some(&run_dir.join(LUT_FILE)))?;
    let wb = Workbench::with_lut(preset.clone(), lut)?;
    run.hasher.add_file(&arch_path)?;
    let text = std::fs::read_to_string(&arch_path)?;
    let arch = ArchParams::from_checkpoint(&serde_json::from_str(&text)?, &wb.space)?;
    let state = SearchState::load(&run_dir.join(STATE_DIR), &wb.space).context("loading supernet weights")?;
    let eval = evaluate_supernet(&state.net, &arch, &wb.data, preset.search.batch_size)?;

    let mut candidates = Vec::new();
    let mut rows = Vec::new();
    for &((hi, lo), acc) in &eval.per_head {
        let g = derive_genotype(&arch, &wb.space, (hi, lo))?;
        validate_or_err(&g, &wb.space)?;
        let lat = wb.latency_ms(&g)?;
        let file = format!("genotype_{hi}_{lo}.json");
        run.write(&file, g.to_json() + "\n")?;
        rows.push(json!({
            "rates": [hi, lo],
            "file": file,
            "val_miou": acc,
            "latency_ms": lat,
            "target": branch_target(acc, lat, &select),
        }));
        candidates.push(Candidate { genotype: g, acc, lat });
    }
    let best = select_branches(&candidates, &select)?;
    run.write_json(
        "targets.json",
        &json!({
            "source": arch_path.file_name().map(|n| n.to_string_lossy().into_owned()),
            "select": select,
            "candidates": rows,
            "selected": rows[best]["rates"],
        }),
    )
}

/// Teacher net from a finished train run directory, or trained from a genotype file.
fn teacher_net(run: &mut Run, wb: &Workbench, path: &Path) -> Result<(DiscreteNet, f64, &'static str)> {
    if path.is_dir() {
        let g = read_genotype(&path.join("genotype.json"), &wb.space)?;
        run.hasher.add_file(&path.join("weights.bin"))?;
        let mut net = DiscreteNet::new(&g, &wb.space, &mut seeded(0, 0))?;
        net.store.copy_from(&ParamStore::load(&path.join("weights"))?).context("loading teacher weights")?;
        let miou = fastsearch_core::search::evaluate_discrete(&net, &wb.data, run.preset.train.batch_size)?;
        return Ok((net, miou, "weights"));
    }
    let g = read_genotype(path, &wb.space)?;
    run.hasher.add_file(path)?;
    let out = train_from_scratch(&g, &wb.space, &wb.data, &run.preset.teacher_train(), None)?;
    run.write("teacher/genotype.json", g.to_json() + "\n")?;
    run.write("teacher/trajectory.csv", out.trajectory.to_csv())?;
    out.net.store.save(&run.path("teacher/weights"))?;
    Ok((out.net, out.val_miou, "trained"))
}

pub fn train(run: &mut Run, genotype: &Path, teacher: Option<&Path>, lut_path: Option<&Path>) -> Result<()> {
    let preset = run.preset.clone();
    let space = space_of(&preset)?;
    let lut = load_lut(run, &space, lut_path)?;
    let wb = Workbench::with_lut(preset.clone(), lut)?;
    let g = read_genotype(genotype, &wb.space)?;
    run.hasher.add_file(genotype)?;
    run.write(PRESET_FILE, serde_json::to_string_pretty(&preset)? + "\n")?;
    let teacher = teacher.map(|p| teacher_net(run, &wb, p)).transpose()?;
    let hp: TrainHyperparams = preset.train;
    let out = train_from_scratch(&g, &wb.space, &wb.data, &hp, teacher.as_ref().map(|t| &t.0))?;
    run.write("genotype.json", g.to_json() + "\n")?;
    run.write(TRAJECTORY_FILE, out.trajectory.to_csv())?;
    out.net.store.save(&run.path("weights"))?;
    let teacher_json = match &teacher {
        Some((net, miou, source)) => json!({
            "val_miou": miou,
            "latency_ms": wb.latency_ms(&net.genotype)?,
            "source": source,
        }),
        None => serde_json::Value::Null,
    };
    run.write_json(
        "metrics.json",
        &json!({
            "command": "train",
            "epochs": hp.epochs,
            "val_miou": out.val_miou,
            "latency_ms": wb.latency_ms(&g)?,
            "teacher": teacher_json,
        }),
    )
}

fn read_json(path: &Path) -> Result<serde_json::Value> {
    let text = std::fs::read_to_string(path).with_context(|| format!("reading {}", path.display()))?;
    serde_json::from_str(&text).with_context(|| format!("parsing {}", path.display()))
}

fn eval_series(traj: &Trajectory, phase: Phase, name: &str) -> Series {
    let points = traj
        .rows
        .iter()
        .filter(|r| r.phase == phase)
        .filter_map(|r| Some((r.latency_ms?, 100.0 * r.val_miou?)))
        .collect();
    Series { name: name.into(), points }
}

/// Trajectory plot, architecture diagram and a summary of a finished run.
pub fn report(run: &mut Run, run_dir: &Path) -> Result<()> {
    let m = RunManifest::load(run_dir)?;
    if m.status != "ok" {
        bail!("{} did not finish (status `{}`)", run_dir.display(), m.status);
    }
    let traj_path = run_dir.join(TRAJECTORY_FILE);
    run.hasher.add_file(&traj_path)?;
    let traj = Trajectory::from_csv(&std::fs::read_to_string(&traj_path)?)?;
    let space = space_of(&run.preset)?;
    let rates = space.rates().to_vec();
    let genotype = |name: &str, run: &mut Run| -> Result<Genotype> {
        let p = run_dir.join(name);
        run.hasher.add_file(&p)?;
        read_genotype(&p, &space)
    };
    let (plot, arch, summary) = match m.command.as_str() {
        "search" => {
            let g = genotype("genotype.json", run)?;
            let s = read_json(&run_dir.join(SUMMARY_FILE))?;
            let plot = line_plot("Supernet trajectory", "latency (ms)", "val mIoU (%)", &[eval_series(&traj, Phase::Eval, "supernet")]);
            let arch = architecture(&[(format!("derived, rates {:?}", g.head.rates), &g)], &rates);
            let summary = json!({
                "run": m.command,
                "mode": s["mode"],
                "eval_epochs": traj.rows.iter().filter(|r| r.phase == Phase::Eval).count(),
                "final_val_miou": s["final_val_miou"],
                "latency_ms": s["latency_ms"],
                "mean_ratio": s["mean_ratio"],
            });
            (plot, arch, summary)
        }
        "cosearch" => {
            let t = genotype("teacher_genotype.json", run)?;
            let st = genotype("student_genotype.json", run)?;
            let s = read_json(&run_dir.join(SUMMARY_FILE))?;
            let plot = line_plot(
                "Teacher and student trajectories",
                "latency (ms)",
                "val mIoU (%)",
                &[eval_series(&traj, Phase::TeacherEval, "teacher"), eval_series(&traj, Phase::StudentEval, "student")],
            );
            let arch = architecture(&[("teacher".to_string(), &t), ("student".to_string(), &st)], &rates);
            let (tl, sl) = (s["teacher_latency_ms"].as_f64(), s["student_latency_ms"].as_f64());
            let summary = json!({
                "run": m.command,
                "teacher_latency_ms": tl,
                "student_latency_ms": sl,
                "student_not_slower": matches!((tl, sl), (Some(t), Some(s)) if s <= t),
                "teacher_pinned": s["teacher_pinned"],
                "teacher_val_miou": s["teacher_val_miou"],
                "student_val_miou": s["student_val_miou"],
            });
            (plot, arch, summary)
        }
        "train" => {
            let g = genotype("genotype.json", run)?;
            let metrics = read_json(&run_dir.join("metrics.json"))?;
            let points = traj
                .rows
                .iter()
                .filter(|r| r.phase == Phase::TrainEval)
                .filter_map(|r| Some((r.step as f64, 100.0 * r.val_miou?)))
                .collect();
            let plot = line_plot("Training", "step", "val mIoU (%)", &[Series { name: "derived".into(), points }]);
            let arch = architecture(&[("trained".to_string(), &g)], &rates);
            (plot, arch, json!({ "run": m.command, "metrics": metrics }))
        }
        c => bail!("cannot report on a `{c}` run"),
    };
    run.write("trajectory.svg", plot)?;
    run.write("architecture.svg", arch)?;
    run.write_json(SUMMARY_FILE, &summary)
}
