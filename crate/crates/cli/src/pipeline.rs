//! Orchestration shared by the CLI subcommands, the ablation harness and the
//! acceptance suite: dataset generation, the three training phases, and
//! checkpoint-backed evaluation.

use std::path::{Path, PathBuf};

use flowdistill_core::dmd::run_dmd;
use flowdistill_core::flowcore::train_teacher;
use flowdistill_core::metrics::{measure, MetricsReport};
use flowdistill_core::pad::{run_progressive, StageConfig, StageLog};
use flowdistill_core::rng::{labels, stream};
use flowdistill_core::toydata::{generate, read_dataset, write_dataset, DataSpec, Dataset};
use flowdistill_core::{Error, Result, Schedule, TrainEnd, VelocityNet};

use crate::checkpoint::{load_checkpoint, save_checkpoint, Checkpoint, SidecarDraft, STAGE_DMD, STAGE_TEACHER};
use crate::config::RunConfig;

/// Generate and persist a dataset.
pub fn gen_data(spec: &DataSpec, out: &Path) -> Result<Dataset> {
    let ds = generate(spec)?;
    write_dataset(&ds, out)?;
    Ok(ds)
}

fn teacher_eval_schedule(cfg: &RunConfig) -> Result<Schedule> {
    Schedule::uniform(cfg.teacher.sample_steps)
}

/// Train the flow-matching teacher and save its checkpoint.
pub fn train_teacher_to(cfg: &RunConfig, data: &Dataset, out: &Path) -> Result<TrainEnd<VelocityNet>> {
    let dims = flowdistill_core::ModelDims::from(&data.spec);
    let init = VelocityNet::init(cfg.net, dims, &mut stream(cfg.seed, labels::INIT))?;
    let end = train_teacher(init, data, &cfg.teacher, cfg.seed)?;
    let draft = SidecarDraft {
        stage: STAGE_TEACHER,
        step: match &end {
            TrainEnd::Completed(_) => cfg.teacher.steps,
            TrainEnd::Diverged { step, .. } => *step,
        },
        schedule: teacher_eval_schedule(cfg)?,
        seed: cfg.seed,
        config_hash: cfg.hash(),
        net: cfg.net,
        dims,
    };
    save_checkpoint(out, &end.state().params, &draft)?;
    Ok(end)
}

/// Load a checkpoint back into a network.
pub fn load_net(path: &Path) -> Result<(VelocityNet, Checkpoint)> {
    let ckpt = load_checkpoint(path)?;
    let net = VelocityNet::from_params(ckpt.meta.net, ckpt.meta.dims, ckpt.params.clone())?;
    Ok((net, ckpt))
}

/// Distill the teacher checkpoint into the 4-step student and save it.
pub fn distill_dmd_to(
    cfg: &RunConfig,
    teacher_path: &Path,
    data: &Dataset,
    out: &Path,
) -> Result<TrainEnd<()>> {
    let (teacher, _) = load_net(teacher_path)?;
    let end = run_dmd(&teacher, data, &cfg.dmd, cfg.seed)?;
    let (state, result) = match end {
        TrainEnd::Completed(s) => (s, TrainEnd::Completed(())),
        TrainEnd::Diverged { state, step } => (state, TrainEnd::Diverged { state: (), step }),
    };
    let draft = SidecarDraft {
        stage: STAGE_DMD,
        step: state.steps_done,
        schedule: state.schedule.clone(),
        seed: cfg.seed,
        config_hash: cfg.hash(),
        net: teacher.cfg,
        dims: teacher.dims,
    };
    save_checkpoint(out, &state.generator.params, &draft)?;
    Ok(result)
}

/// Run the selected adversarial stages from a 4-step checkpoint; saves one
/// checkpoint per stage (`pad_stage{k}.bin`) plus a per-step scalar log
/// (`pad_stage{k}_log.csv`) into `out_dir`.
pub fn distill_pad_to(
    cfg: &RunConfig,
    init_path: &Path,
    data: &Dataset,
    stage_ks: &[usize],
    out_dir: &Path,
) -> Result<TrainEnd<Vec<PathBuf>>> {
    let (init, init_ckpt) = load_net(init_path)?;
    if init_ckpt.meta.stage != STAGE_DMD {
        return Err(Error::config(format!(
            "pad distillation starts from a stage-0 checkpoint, got stage {}",
            init_ckpt.meta.stage
        )));
    }
    let stages: Vec<StageConfig> = cfg
        .pad
        .iter()
        .filter(|s| stage_ks.contains(&s.k))
        .cloned()
        .collect();
    if stages.len() != stage_ks.len() {
        return Err(Error::config(format!(
            "config defines stages {:?}, requested {:?}",
            cfg.pad.iter().map(|s| s.k).collect::<Vec<_>>(),
            stage_ks
        )));
    }
    std::fs::create_dir_all(out_dir)?;

    let mut writers: std::collections::BTreeMap<usize, csv::Writer<std::fs::File>> =
        std::collections::BTreeMap::new();
    for s in &stages {
        let mut w = csv::Writer::from_path(out_dir.join(format!("pad_stage{}_log.csv", s.k)))
            .map_err(|e| Error::data(format!("cannot open stage log: {e}")))?;
        w.write_record([
            "step", "d_core", "d_r1", "d_r2", "d_r3", "d_total", "g_real", "g_self", "g_total",
        ])
        .map_err(|e| Error::data(format!("log write: {e}")))?;
        writers.insert(s.k, w);
    }
    let log = |k: usize, l: &StageLog| {
        if let Some(w) = writers.get_mut(&k) {
            let _ = w.write_record([
                l.step.to_string(),
                format!("{:.6}", l.d.core),
                format!("{:.6}", l.d.r1),
                format!("{:.6}", l.d.r2),
                format!("{:.6}", l.d.r3),
                format!("{:.6}", l.d.total),
                format!("{:.6}", l.g.real),
                format!("{:.6}", l.g.self_compare),
                format!("{:.6}", l.g.total),
            ]);
        }
    };

    let end = run_progressive(&init, &init_ckpt.meta.schedule, data, &stages, cfg.seed, log)?;
    for w in writers.values_mut() {
        w.flush()?;
    }

    let mut paths = Vec::new();
    let out = end.state();
    for st in &out.stages {
        let path = out_dir.join(format!("pad_stage{}.bin", st.k));
        let draft = SidecarDraft {
            stage: st.k as i32,
            step: stages.iter().find(|s| s.k == st.k).map(|s| s.steps).unwrap_or(0),
            schedule: st.schedule.clone(),
            seed: cfg.seed,
            config_hash: cfg.hash(),
            net: init.cfg,
            dims: init.dims,
        };
        save_checkpoint(&path, &st.generator.params, &draft)?;
        paths.push(path);
    }
    Ok(match end {
        TrainEnd::Completed(_) => TrainEnd::Completed(paths),
        TrainEnd::Diverged { step, .. } => TrainEnd::Diverged { state: paths, step },
    })
}

/// Map a requested per-sample evaluation budget to a schedule. A guided run
/// spends two evaluations per step, so the budget must be even; if the
/// checkpoint's own schedule already matches the step count it is preferred
/// over the uniform grid.
pub fn schedule_for_nfe(nfe: usize, ckpt_schedule: &Schedule, guidance: Option<f64>) -> Result<Schedule> {
    if nfe == 0 {
        return Err(Error::config("nfe must be >= 1"));
    }
    let steps = match guidance {
        Some(_) => {
            if nfe % 2 != 0 {
                return Err(Error::config("guided evaluation needs an even nfe budget"));
            }
            nfe / 2
        }
        None => nfe,
    };
    if ckpt_schedule.len() == steps {
        Ok(ckpt_schedule.clone())
    } else {
        Schedule::uniform(steps)
    }
}

/// Evaluate a checkpoint at one evaluation budget.
pub fn eval_checkpoint(
    ckpt_path: &Path,
    nfe: usize,
    guidance: Option<f64>,
    data: &Dataset,
    n_eval: usize,
    seed: u64,
) -> Result<(MetricsReport, i32)> {
    let (net, ckpt) = load_net(ckpt_path)?;
    let schedule = schedule_for_nfe(nfe, &ckpt.meta.schedule, guidance)?;
    let report = measure(&net, &schedule, guidance, data, n_eval, seed)?;
    Ok((report, ckpt.meta.stage))
}

/// Read a dataset file with config-error mapping for missing paths.
pub fn load_data(path: &Path) -> Result<Dataset> {
    read_dataset(path)
}

/// Train teacher + 4-step student for `seed` under `dir` unless both
/// checkpoints already exist; returns the stage-0 checkpoint path. This is
/// the shared-entry point for ablation grids, where cells of the same seed
/// reuse one distilled base.
pub fn ensure_stage0(cfg: &RunConfig, data: &Dataset, dir: &Path, seed: u64) -> Result<PathBuf> {
    let mut cfg = cfg.clone();
    cfg.seed = seed;
    let teacher_path = dir.join(format!("seed{seed}")).join("teacher.bin");
    let dmd_path = dir.join(format!("seed{seed}")).join("dmd.bin");
    if !teacher_path.exists() {
        train_teacher_to(&cfg, data, &teacher_path)?.into_result()?;
    }
    if !dmd_path.exists() {
        distill_dmd_to(&cfg, &teacher_path, data, &dmd_path)?.into_result()?;
    }
    Ok(dmd_path)
}

#[cfg(test)]
mod tests {
    use super::*;

    fn tiny_cfg() -> RunConfig {
        let mut cfg = RunConfig::default();
        cfg.data = DataSpec {
            frames: 2,
            feature_dim: 2,
            cond_len: 8,
            cond_channels: 1,
            count: 96,
            seed: 3,
            noise_sigma: 0.05,
        };
        cfg.net = flowdistill_core::NetConfig {
            hidden: 8,
            blocks: 1,
            heads: 2,
            time_embed_dim: 8,
            context: flowdistill_core::ContextConfig { k: 3 },
        };
        cfg.teacher.steps = 4;
        cfg.teacher.batch_size = 4;
        cfg.dmd.steps = 2;
        cfg.dmd.critic_per_gen = 1;
        cfg.dmd.batch_size = 4;
        for s in cfg.pad.iter_mut() {
            s.steps = 2;
            s.warmup = 1;
            s.batch_size = 4;
        }
        cfg.eval.n_eval = 64;
        cfg
    }

    #[test]
    fn full_tiny_pipeline_roundtrip() {
        let cfg = tiny_cfg();
        let dir = tempfile::tempdir().unwrap();
        let data = gen_data(&cfg.data, &dir.path().join("d.bin")).unwrap();

        let teacher_path = dir.path().join("teacher.bin");
        train_teacher_to(&cfg, &data, &teacher_path).unwrap().into_result().unwrap();
        let (_, ckpt) = load_net(&teacher_path).unwrap();
        assert_eq!(ckpt.meta.stage, STAGE_TEACHER);
        assert_eq!(ckpt.meta.schedule.len(), 50);

        let dmd_path = dir.path().join("dmd.bin");
        distill_dmd_to(&cfg, &teacher_path, &data, &dmd_path).unwrap().into_result().unwrap();
        let (_, ckpt) = load_net(&dmd_path).unwrap();
        assert_eq!(ckpt.meta.stage, 0);
        assert_eq!(ckpt.meta.schedule.steps(), &[1.0, 0.75, 0.5, 0.25]);

        let out_dir = dir.path().join("pad");
        let paths = distill_pad_to(&cfg, &dmd_path, &data, &[1, 2, 3], &out_dir)
            .unwrap()
            .into_result()
            .unwrap();
        assert_eq!(paths.len(), 3);
        let (_, c1) = load_net(&paths[0]).unwrap();
        assert_eq!(c1.meta.schedule.steps(), &[1.0, 0.75, 0.5]);
        let (_, c3) = load_net(&paths[2]).unwrap();
        assert_eq!(c3.meta.stage, 3);
        assert_eq!(c3.meta.schedule.steps(), &[1.0]);
        assert!(out_dir.join("pad_stage2_log.csv").exists());

        let (report, stage) = eval_checkpoint(&paths[2], 1, None, &data, 64, cfg.seed).unwrap();
        assert_eq!(stage, 3);
        assert_eq!(report.nfe_per_sample, 1);
        assert_eq!(report.nfe, 64);
    }

    #[test]
    fn pad_requires_stage0_init() {
        let cfg = tiny_cfg();
        let dir = tempfile::tempdir().unwrap();
        let data = gen_data(&cfg.data, &dir.path().join("d.bin")).unwrap();
        let teacher_path = dir.path().join("teacher.bin");
        train_teacher_to(&cfg, &data, &teacher_path).unwrap().into_result().unwrap();
        let err = distill_pad_to(&cfg, &teacher_path, &data, &[1], &dir.path().join("pad"));
        assert!(matches!(err, Err(Error::Config(_))));
    }

    #[test]
    fn schedule_for_nfe_rules() {
        let own = Schedule::new(vec![1.0, 0.75, 0.5]).unwrap();
        // Budget matches the checkpoint's schedule: reuse it.
        assert_eq!(schedule_for_nfe(3, &own, None).unwrap().steps(), own.steps());
        // Mismatch: uniform grid.
        assert_eq!(schedule_for_nfe(2, &own, None).unwrap().steps(), &[1.0, 0.5]);
        // Guided budget halves the step count.
        assert_eq!(schedule_for_nfe(100, &own, Some(2.0)).unwrap().len(), 50);
        assert!(schedule_for_nfe(3, &own, Some(2.0)).is_err());
        assert!(schedule_for_nfe(0, &own, None).is_err());
    }
}
