use std::fs;
use std::path::{Path, PathBuf};

use headpool::data::DatasetKind;
use headpool::diffusion::NoiseSchedule;
use headpool::eval::{ablation_csv, balanced_labels, draw_samples, evaluate, full_beats_no_pool, run_ablation, EvalConfig};
use headpool::models::checkpoint::write_atomic;
use headpool::models::{apply_weight_delta, load_generator, save_generator, GeneratorManifest, GeneratorNet};
use headpool::plots::emit_plots;
use headpool::pool::load_pool;
use headpool::teacher::{teacher_gate, train_teacher, GateReport};
use headpool::trainer::{run_iterations, CheckpointSink, Distiller, TrainConfig, POOL_DIR, STUDENT_DIR};
use headpool::Tensor;
use serde_json::{json, Map, Value};

use crate::config::{LoadedConfig, ScheduleSection};
use crate::exit::{CliError, Context, INCOMPATIBLE, PREREQUISITE, TRAINING, USAGE};
use crate::manifest::{run_dir, RunManifest, StageRecord, RUN_MANIFEST};

pub const TEACHER_DIR: &str = "teacher";

fn write_text(path: &Path, text: &str, code: i32) -> Result<(), CliError> {
    write_atomic(path, text.as_bytes()).ctx(code, "writing output")
}

fn json_text<T: serde::Serialize>(v: &T) -> String {
    let mut s = serde_json::to_string_pretty(v).expect("serializable");
    s.push('\n');
    s
}

/// Creates a fresh run directory; an existing run is only replaced with `force`.
fn prepare_dir(dir: &Path, force: bool) -> Result<(), CliError> {
    if dir.join(RUN_MANIFEST).exists() {
        if !force {
            return Err(CliError::usage(format!("run directory {} already exists; pass --force to replace it", dir.display())));
        }
        fs::remove_dir_all(dir).map_err(|e| CliError::usage(format!("cannot clear {}: {e}", dir.display())))?;
    }
    fs::create_dir_all(dir).map_err(|e| CliError::usage(format!("cannot create {}: {e}", dir.display())))
}

fn load_checkpoint(path: &Path, what: &str) -> Result<(GeneratorNet, GeneratorManifest), CliError> {
    load_generator(path).map_err(|e| CliError::prerequisite(format!("cannot load {what} checkpoint {}: {e}", path.display())))
}

/// Teacher checkpoint whose recorded quality gate passed.
fn load_gated_teacher(path: Option<PathBuf>) -> Result<(GeneratorNet, GeneratorManifest, PathBuf), CliError> {
    let path = path.ok_or_else(|| CliError::prerequisite("no teacher checkpoint: set teacher.checkpoint or pass --teacher"))?;
    let (net, manifest) = load_checkpoint(&path, "teacher")?;
    let gate: GateReport = manifest
        .provenance
        .get("quality_gate")
        .and_then(|v| serde_json::from_value(v.clone()).ok())
        .ok_or_else(|| CliError::prerequisite(format!("teacher {} carries no quality-gate record", path.display())))?;
    if !gate.passed {
        return Err(CliError::prerequisite(format!("teacher {} failed its quality gate: {}", path.display(), gate.reason)));
    }
    Ok((net, manifest, path))
}

/// Schedule recorded in a checkpoint, else the default shift on the network's `T`.
fn schedule_of(manifest: &GeneratorManifest) -> Result<NoiseSchedule, CliError> {
    let section = match manifest.provenance.get("schedule") {
        Some(v) => serde_json::from_value(v.clone()).map_err(|e| CliError::prerequisite(format!("bad schedule record: {e}")))?,
        None => ScheduleSection { t_total: manifest.spec.t_total, t_shifted: manifest.spec.t_total / 4, ..ScheduleSection::default() },
    };
    section.build().ctx(PREREQUISITE, "checkpoint schedule")
}

fn data_of(manifest: &GeneratorManifest) -> Option<DatasetKind> {
    serde_json::from_value(manifest.provenance.get("data")?.get("name")?.clone()).ok()
}

fn base_provenance(lc: &LoadedConfig) -> Map<String, Value> {
    let mut p = Map::new();
    p.insert("config_hash".into(), lc.hash.clone().into());
    p.insert("schedule".into(), serde_json::to_value(&lc.config.schedule).expect("serializable"));
    p.insert("data".into(), serde_json::to_value(&lc.config.data).expect("serializable"));
    p
}

pub fn cmd_train_teacher(config: &Path, root: &Path, force: bool) -> Result<PathBuf, CliError> {
    let lc = LoadedConfig::load(config)?;
    let cfg = &lc.config;
    let (id, dir) = run_dir(root, "train-teacher", &lc.hash, cfg.seed);
    prepare_dir(&dir, force)?;
    let mut manifest = RunManifest::new(&id, "train-teacher", &lc.hash, cfg.seed, cfg.deterministic);
    let sched = cfg.schedule.build().ctx(USAGE, "schedule")?;
    let tcfg = cfg.teacher_config();
    let data = cfg.data_spec();
    let run = train_teacher(&data, cfg.generator_spec(), &sched, &tcfg).ctx(TRAINING, "teacher training")?;
    let gate = teacher_gate(&run.net, &data, &sched, &run.losses, &tcfg).ctx(TRAINING, "teacher quality gate")?;

    let mut prov = base_provenance(&lc);
    prov.insert("quality_gate".into(), serde_json::to_value(&gate).expect("serializable"));
    save_generator(&run.net, &dir.join(TEACHER_DIR), "teacher", prov).ctx(TRAINING, "saving teacher")?;
    let mut w = csv::Writer::from_writer(Vec::new());
    let row_err = |e: csv::Error| CliError::new(TRAINING, format!("loss csv: {e}"));
    w.write_record(["iteration", "loss"]).map_err(row_err)?;
    for (i, l) in run.losses.iter().enumerate() {
        w.write_record([i.to_string(), format!("{l:e}")]).map_err(row_err)?;
    }
    let csv_text = String::from_utf8(w.into_inner().map_err(|e| CliError::new(TRAINING, e.to_string()))?).expect("utf-8");
    write_text(&dir.join("losses.csv"), &csv_text, TRAINING)?;
    write_text(&dir.join("gate.json"), &json_text(&gate), TRAINING)?;

    for (name, path) in [("teacher", TEACHER_DIR), ("losses", "losses.csv"), ("gate", "gate.json")] {
        manifest.artifacts.insert(name.into(), path.into());
    }
    manifest.finish(cfg.deterministic);
    manifest.save(&dir)?;
    eprintln!("quality gate {}: {}", if gate.passed { "passed" } else { "FAILED" }, gate.reason);
    Ok(dir)
}

pub fn cmd_distill(config: &Path, stage: usize, root: &Path, teacher_flag: Option<&Path>) -> Result<PathBuf, CliError> {
    let lc = LoadedConfig::load(config)?;
    let cfg = &lc.config;
    let (teacher, teacher_manifest, teacher_path) = load_gated_teacher(lc.teacher_path(teacher_flag))?;
    let sched = cfg.schedule.build().ctx(USAGE, "schedule")?;
    let (id, dir) = run_dir(root, "distill", &lc.hash, cfg.seed);
    fs::create_dir_all(&dir).map_err(|e| CliError::usage(format!("cannot create {}: {e}", dir.display())))?;
    let mut manifest = RunManifest::load(&dir)
        .filter(|m| m.config_hash == lc.hash)
        .unwrap_or_else(|| RunManifest::new(&id, "distill", &lc.hash, cfg.seed, cfg.deterministic));
    let done = manifest.stage_history.iter().map(|r| r.stage).max().unwrap_or(0);
    if done >= stage {
        eprintln!("stage {stage} already complete in {}", dir.display());
        return Ok(dir);
    }

    let mut prov = base_provenance(&lc);
    let abs_teacher = teacher_path.canonicalize().unwrap_or(teacher_path);
    prov.insert("teacher_checkpoint".into(), abs_teacher.display().to_string().into());
    prov.insert("teacher_digest".into(), teacher_manifest.digest.clone().into());

    for s in done + 1..=stage {
        let sc = TrainConfig { stage: s, ..cfg.trainer.clone() };
        // Every stage after the first starts from the previous stage's checkpoint,
        // so a resumed run and an uninterrupted one take the same path.
        let mut d = if s == 1 {
            Distiller::new(&teacher, &sched, sc.clone(), cfg.data.name).ctx(TRAINING, "setting up distillation")?
        } else {
            let prev = dir.join(format!("stage-{}", s - 1));
            let (student, _) = load_checkpoint(&prev.join(STUDENT_DIR), "previous stage student")?;
            let pool = load_pool(&prev.join(POOL_DIR)).ctx(PREREQUISITE, "loading previous stage pool")?;
            let mut d = Distiller::with_student(&teacher, student, &sched, sc.clone(), cfg.data.name).ctx(TRAINING, "resuming")?;
            d.set_pool(pool).ctx(INCOMPATIBLE, "restoring pool")?;
            d.set_iteration(manifest.stage_history.iter().map(|r| r.iterations as u64).sum());
            d
        };
        let stage_dir = format!("stage-{s}");
        let mut p = prov.clone();
        p.insert("trained_stage".into(), s.into());
        let sink = CheckpointSink { dir: dir.join(&stage_dir), stage_tag: stage_dir.clone(), provenance: p };
        run_iterations(&mut d, sc.iterations, Some(&sink)).ctx(TRAINING, &format!("stage {s}"))?;
        let (_, saved) = load_checkpoint(&sink.dir.join(STUDENT_DIR), "student")?;
        manifest.stage_history.push(StageRecord {
            stage: s,
            iterations: sc.iterations,
            checkpoint: format!("{stage_dir}/{STUDENT_DIR}"),
            student_digest: saved.digest,
        });
        manifest.artifacts.insert(stage_dir.clone(), stage_dir);
        manifest.finish(cfg.deterministic);
        manifest.save(&dir)?;
        eprintln!("stage {s} done");
    }
    Ok(dir)
}

pub struct SampleArgs<'a> {
    pub checkpoint: &'a Path,
    pub steps: usize,
    pub n: usize,
    pub cond: Option<usize>,
    pub seed: u64,
    pub out: &'a Path,
}

pub fn cmd_sample(a: SampleArgs) -> Result<(), CliError> {
    if a.n == 0 {
        return Err(CliError::usage("--n must be positive"));
    }
    let (net, manifest) = load_checkpoint(a.checkpoint, "generator")?;
    let sched = schedule_of(&manifest)?;
    let classes = net.spec().cond_classes;
    let labels = match a.cond {
        Some(_) if classes == 0 => return Err(CliError::usage("--cond given for an unconditional checkpoint")),
        Some(c) if c >= classes => return Err(CliError::usage(format!("--cond {c} outside 0..{classes}"))),
        Some(c) => Some(vec![c; a.n]),
        None => balanced_labels(a.n, classes),
    };
    let x = draw_samples(&net, &sched, a.steps, a.n, labels.as_deref(), a.seed).ctx(USAGE, "sampling")?;
    fs::create_dir_all(a.out).map_err(|e| CliError::usage(format!("cannot create {}: {e}", a.out.display())))?;

    let mut w = csv::Writer::from_writer(Vec::new());
    let err = |e: csv::Error| CliError::usage(format!("samples csv: {e}"));
    let mut header: Vec<String> = labels.as_ref().map(|_| "label".to_string()).into_iter().collect();
    header.extend((0..x.row_len()).map(|j| format!("x{j}")));
    w.write_record(&header).map_err(err)?;
    for i in 0..x.rows() {
        let mut row: Vec<String> = labels.as_ref().map(|l| l[i].to_string()).into_iter().collect();
        row.extend(x.row(i).iter().map(|v| format!("{v:e}")));
        w.write_record(&row).map_err(err)?;
    }
    let text = String::from_utf8(w.into_inner().map_err(|e| CliError::usage(e.to_string()))?).expect("utf-8");
    write_text(&a.out.join("samples.csv"), &text, USAGE)?;

    let trained_stage = manifest.provenance.get("trained_stage").and_then(Value::as_u64);
    let meta = json!({
        "k": a.steps,
        "n": a.n,
        "seed": a.seed,
        "cond": a.cond,
        "weights_digest": net.params().digest(),
        "checkpoint_stage": manifest.stage,
        "trained_stage": trained_stage,
        "beyond_trained_stage": trained_stage.is_some_and(|s| a.steps as u64 > s),
    });
    write_text(&a.out.join("metadata.json"), &json_text(&meta), USAGE)?;
    if trained_stage.is_some_and(|s| a.steps as u64 > s) {
        eprintln!("warning: sampling with {} steps beyond trained stage {}", a.steps, trained_stage.unwrap_or(0));
    }
    Ok(())
}

pub struct EvalArgs<'a> {
    pub checkpoint: &'a Path,
    pub data: Option<DatasetKind>,
    pub steps: Vec<usize>,
    pub teacher: Option<&'a Path>,
    pub n: usize,
    pub seed: u64,
    pub projections: usize,
    pub run_id: &'a str,
    pub out: &'a Path,
}

pub fn cmd_eval(a: EvalArgs) -> Result<Vec<PathBuf>, CliError> {
    if a.steps.is_empty() {
        return Err(CliError::usage("--steps must list at least one step count"));
    }
    let (student, manifest) = load_checkpoint(a.checkpoint, "student")?;
    let kind = a.data.or_else(|| data_of(&manifest)).ok_or_else(|| CliError::usage("no --data given and none recorded in the checkpoint"))?;
    let sched = schedule_of(&manifest)?;
    let teacher = if kind.is_image() {
        let path = a
            .teacher
            .map(Path::to_path_buf)
            .or_else(|| manifest.provenance.get("teacher_checkpoint").and_then(Value::as_str).map(PathBuf::from))
            .ok_or_else(|| CliError::prerequisite("image evaluation needs the teacher: pass --teacher"))?;
        Some(load_checkpoint(&path, "teacher")?.0)
    } else {
        None
    };
    let cfg = EvalConfig {
        sample_count: a.n,
        n_projections: a.projections,
        seed: a.seed,
        trained_stage: manifest.provenance.get("trained_stage").and_then(Value::as_u64).map(|s| s as usize),
        ..EvalConfig::default()
    };
    let ev = evaluate(a.run_id, &student, teacher.as_ref(), kind, &sched, &a.steps, &cfg).ctx(USAGE, "evaluation")?;
    let reference: Option<&Tensor> = (!kind.is_image()).then_some(&ev.reference);
    let mut paths = emit_plots(&ev.report, &ev.samples, reference, a.out).ctx(USAGE, "writing plots")?;
    let csv_path = a.out.join(format!("{}_report.csv", a.run_id));
    write_text(&csv_path, &ev.report.to_csv().ctx(USAGE, "report csv")?, USAGE)?;
    paths.push(csv_path);
    Ok(paths)
}

pub fn cmd_ablate(config: &Path, root: &Path, teacher_flag: Option<&Path>, force: bool) -> Result<PathBuf, CliError> {
    let lc = LoadedConfig::load(config)?;
    let cfg = &lc.config;
    let (teacher, _, _) = load_gated_teacher(lc.teacher_path(teacher_flag))?;
    let sched = cfg.schedule.build().ctx(USAGE, "schedule")?;
    let (id, dir) = run_dir(root, "ablate", &lc.hash, cfg.seed);
    prepare_dir(&dir, force)?;
    let mut manifest = RunManifest::new(&id, "ablate", &lc.hash, cfg.seed, cfg.deterministic);
    let rows = run_ablation(&cfg.trainer, &cfg.ablation.variants, &teacher, cfg.data.name, &sched, &cfg.eval)
        .ctx(TRAINING, "ablation")?;
    write_text(&dir.join("ablation.csv"), &ablation_csv(&rows).ctx(TRAINING, "ablation table")?, TRAINING)?;
    write_text(&dir.join("ablation.json"), &json_text(&rows), TRAINING)?;
    let direction = match full_beats_no_pool(&rows) {
        Some((full, no_pool, holds)) => json!({
            "seed": cfg.seed,
            "full_patch_div": full,
            "no_pool_patch_div": no_pool,
            "full_le_no_pool": holds,
            "gated": false,
        }),
        None => json!({ "seed": cfg.seed, "full_le_no_pool": null, "gated": false }),
    };
    write_text(&dir.join("direction.json"), &json_text(&direction), TRAINING)?;
    for name in ["ablation.csv", "ablation.json", "direction.json"] {
        manifest.artifacts.insert(name.trim_end_matches(".csv").trim_end_matches(".json").into(), name.into());
    }
    manifest.finish(cfg.deterministic);
    manifest.save(&dir)?;
    if direction["full_le_no_pool"] == json!(false) {
        eprintln!("note: full patch_div exceeds no_pool at seed {}", cfg.seed);
    }
    Ok(dir)
}

pub fn cmd_adapt(base: &Path, tuned: &Path, custom: &Path, out: &Path) -> Result<String, CliError> {
    let (b, bm) = load_checkpoint(base, "base")?;
    let (t, tm) = load_checkpoint(tuned, "tuned")?;
    let (c, cm) = load_checkpoint(custom, "custom")?;
    let merged = apply_weight_delta(&b, &t, &c).map_err(|e| CliError::new(INCOMPATIBLE, format!("incompatible checkpoints: {e}")))?;
    let mut prov = cm.provenance.clone();
    let entry = |p: &Path, m: &GeneratorManifest| json!({ "path": p.display().to_string(), "digest": m.digest });
    prov.insert("weight_delta".into(), json!({ "base": entry(base, &bm), "tuned": entry(tuned, &tm), "custom": entry(custom, &cm) }));
    let saved = save_generator(&merged, out, "adapted", prov).ctx(USAGE, "saving adapted checkpoint")?;
    Ok(saved.digest)
}
