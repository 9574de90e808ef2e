//! Desk-scale pilot: trains the full pipeline once and prints phase metrics
//! and timings. Used to sanity-check training dynamics and budgets.

use std::time::Instant;

use flowdistill_core::{
    dmd::run_dmd,
    flowcore::train_teacher,
    metrics::measure,
    pad::{run_progressive, LossKind, StageConfig},
    rng::{labels, stream},
    toydata::{generate, DataSpec},
    DmdConfig, ModelDims, NetConfig, Schedule, TeacherConfig, VelocityNet,
};

fn main() {
    let args: Vec<String> = std::env::args().collect();
    let seed: u64 = args.get(1).and_then(|s| s.parse().ok()).unwrap_or(1);
    let teacher_steps: usize = args.get(2).and_then(|s| s.parse().ok()).unwrap_or(3000);
    let dmd_steps: usize = args.get(3).and_then(|s| s.parse().ok()).unwrap_or(1000);
    let stage_steps: usize = args.get(4).and_then(|s| s.parse().ok()).unwrap_or(500);

    let spec = DataSpec { frames: 16, feature_dim: 4, cond_len: 64, cond_channels: 1, count: 4096, seed, noise_sigma: 0.05 };
    let eval_spec = DataSpec { count: 1024, seed: seed ^ 0xdead_beef, ..spec.clone() };
    let train = generate(&spec).unwrap();
    let eval = generate(&eval_spec).unwrap();
    let dims = ModelDims::from(&spec);
    let net_cfg = NetConfig::default();

    let t0 = Instant::now();
    let init = VelocityNet::init(net_cfg, dims, &mut stream(seed, labels::INIT)).unwrap();
    let tcfg = TeacherConfig { steps: teacher_steps, ..TeacherConfig::default() };
    let teacher = train_teacher(init, &train, &tcfg, seed).unwrap().into_result().unwrap();
    let teacher_time = t0.elapsed().as_secs_f64();

    let sched50 = Schedule::uniform(50).unwrap();
    let m_teacher = measure(&teacher, &sched50, Some(tcfg.guidance_w), &eval, 256, seed).unwrap();
    let m_teacher_u = measure(&teacher, &sched50, None, &eval, 256, seed).unwrap();
    println!(
        "teacher   {teacher_time:7.1}s  fd {:.4} / unguided {:.4}  energy {:.4}  sync {:.3}  nfe/sample {}  wall {:.2} ms",
        m_teacher.fd, m_teacher_u.fd, m_teacher.energy, m_teacher.sync, m_teacher.nfe_per_sample, m_teacher.wall_ms
    );

    let t0 = Instant::now();
    let dcfg = DmdConfig { steps: dmd_steps, ..DmdConfig::default() };
    let dmd = run_dmd(&teacher, &train, &dcfg, seed).unwrap().into_result().unwrap();
    let dmd_time = t0.elapsed().as_secs_f64();
    let m_dmd = measure(&dmd.generator, &dmd.schedule, None, &eval, 256, seed).unwrap();
    println!(
        "dmd-4step {dmd_time:7.1}s  fd {:.4}  energy {:.4}  sync {:.3}  nfe/sample {}  wall {:.2} ms",
        m_dmd.fd, m_dmd.energy, m_dmd.sync, m_dmd.nfe_per_sample, m_dmd.wall_ms
    );

    // Full progressive run.
    let t0 = Instant::now();
    let cfgs: Vec<StageConfig> = (1..=3)
        .map(|k| StageConfig { steps: stage_steps, ..StageConfig::canonical(k).unwrap() })
        .collect();
    let pad = run_progressive(&dmd.generator, &dmd.schedule, &train, &cfgs, seed, |_, _| {})
        .unwrap()
        .into_result()
        .unwrap();
    let pad_time = t0.elapsed().as_secs_f64();
    for st in &pad.stages {
        let m = measure(&st.generator, &st.schedule, None, &eval, 256, seed).unwrap();
        println!(
            "pad-k{}    {pad_time:7.1}s  fd {:.4}  energy {:.4}  sync {:.3}  nfe/sample {}  wall {:.2} ms",
            st.k, m.fd, m.energy, m.sync, m.nfe_per_sample, m.wall_ms
        );
    }

    // Direct 4 -> 1 with everything off (single stage, fixed timestep, no
    // self-compare), same total budget.
    let t0 = Instant::now();
    let direct = StageConfig {
        k: 3,
        target_schedule: vec![1.0],
        prev_final_t: 0.25,
        warmup: 0,
        steps: 3 * stage_steps,
        lambda: 0.0,
        gamma: 100.0,
        sigma_r: 0.1,
        loss_kind: LossKind::R3gan,
        lr_gen: StageConfig::canonical(1).unwrap().lr_gen,
        lr_disc: StageConfig::canonical(1).unwrap().lr_disc,
        batch_size: 16,
    };
    let pad_direct = run_progressive(&dmd.generator, &dmd.schedule, &train, &[direct], seed, |_, _| {})
        .unwrap()
        .into_result()
        .unwrap();
    let direct_time = t0.elapsed().as_secs_f64();
    let m_direct = measure(
        &pad_direct.stages[0].generator,
        &pad_direct.stages[0].schedule,
        None,
        &eval,
        256,
        seed,
    )
    .unwrap();
    println!(
        "direct    {direct_time:7.1}s  fd {:.4}  energy {:.4}  sync {:.3}  nfe/sample {}",
        m_direct.fd, m_direct.energy, m_direct.sync, m_direct.nfe_per_sample
    );

    let m1 = measure(&pad.stages[2].generator, &pad.stages[2].schedule, None, &eval, 256, seed).unwrap();
    println!();
    println!("ratios:  1nfe/4nfe fd {:.3}  sync1/sync4 {:.3}  full/direct fd {:.3}  4nfe/teacher fd {:.3}",
        m1.fd / m_dmd.fd, m1.sync / m_dmd.sync, m1.fd / m_direct.fd, m_dmd.fd / m_teacher.fd);
}
