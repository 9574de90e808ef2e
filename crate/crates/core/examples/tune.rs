//! Hyperparameter probes for the distillation phases. Each mode trains the
//! prerequisite phases once, then sweeps one knob.

use flowdistill_core::{
    dmd::run_dmd,
    flowcore::train_teacher,
    metrics::measure,
    pad::{run_progressive, StageConfig},
    rng::{labels, stream},
    toydata::{generate, DataSpec},
    DmdConfig, ModelDims, NetConfig, Schedule, TeacherConfig, VelocityNet,
};

fn main() {
    let args: Vec<String> = std::env::args().collect();
    let mode = args.get(1).cloned().unwrap_or_else(|| "dmd".into());
    let seed: u64 = args.get(2).and_then(|s| s.parse().ok()).unwrap_or(1);

    let spec = DataSpec { frames: 16, feature_dim: 4, cond_len: 64, cond_channels: 1, count: 4096, seed, noise_sigma: 0.05 };
    let eval_spec = DataSpec { count: 1024, seed: seed ^ 0xdead_beef, ..spec.clone() };
    let train = generate(&spec).unwrap();
    let eval = generate(&eval_spec).unwrap();
    let dims = ModelDims::from(&spec);

    let init = VelocityNet::init(NetConfig::default(), dims, &mut stream(seed, labels::INIT)).unwrap();
    let tcfg = TeacherConfig::default();
    let teacher = train_teacher(init, &train, &tcfg, seed).unwrap().into_result().unwrap();
    let sched50 = Schedule::uniform(50).unwrap();
    let m_t = measure(&teacher, &sched50, Some(2.0), &eval, 256, seed).unwrap();
    println!("teacher fd {:.4} sync {:.3}", m_t.fd, m_t.sync);

    match mode.as_str() {
        "dmd" => {
            for lr_gen in [3e-5, 1e-4, 3e-4] {
                for steps in [1000] {
                    let cfg = DmdConfig { lr_gen, steps, ..DmdConfig::default() };
                    let out = run_dmd(&teacher, &train, &cfg, seed).unwrap().into_result().unwrap();
                    let m = measure(&out.generator, &out.schedule, None, &eval, 256, seed).unwrap();
                    println!("dmd lr_gen {lr_gen:.0e} steps {steps}: fd {:.4} sync {:.3} (x{:.2} teacher)", m.fd, m.sync, m.fd / m_t.fd);
                }
            }
        }
        "dmd2" => {
            // Discretization-only baselines: the teacher itself on few-step
            // schedules, guided and unguided.
            for n in [4, 8] {
                let s = Schedule::uniform(n).unwrap();
                let mg = measure(&teacher, &s, Some(2.0), &eval, 256, seed).unwrap();
                let mu = measure(&teacher, &s, None, &eval, 256, seed).unwrap();
                println!("teacher @{n}-step: guided fd {:.4} sync {:.3} | unguided fd {:.4} sync {:.3}", mg.fd, mg.sync, mu.fd, mu.sync);
            }
            // Longer run + critic ratio + batch probes.
            let lr_gen: f64 = args.get(3).and_then(|s| s.parse().ok()).unwrap_or(3e-5);
            for (steps, ratio, batch) in [(2000usize, 5usize, 16usize), (1000, 10, 16), (1000, 5, 32)] {
                let cfg = DmdConfig { lr_gen, steps, critic_per_gen: ratio, batch_size: batch, ..DmdConfig::default() };
                let out = run_dmd(&teacher, &train, &cfg, seed).unwrap().into_result().unwrap();
                let m = measure(&out.generator, &out.schedule, None, &eval, 256, seed).unwrap();
                println!("dmd lr {lr_gen:.0e} steps {steps} ratio {ratio} batch {batch}: fd {:.4} sync {:.3} (x{:.2})", m.fd, m.sync, m.fd / m_t.fd);
            }
        }
        "dmd3" => {
            // fd trajectory across training for target variants.
            for (w, hi) in [(2.0, 0.98), (1.0, 0.98), (2.0, 0.60), (0.0, 0.98)] {
                let mut gen_fd = Vec::new();
                for chunk in 0..5 {
                    let cfg = DmdConfig {
                        guidance_w: w,
                        renoise_hi: hi,
                        steps: 200 * (chunk + 1),
                        lr_gen: 3e-5,
                        ..DmdConfig::default()
                    };
                    let out = run_dmd(&teacher, &train, &cfg, seed).unwrap().into_result().unwrap();
                    let m = measure(&out.generator, &out.schedule, None, &eval, 256, seed).unwrap();
                    gen_fd.push(format!("{}:{:.3}", 200 * (chunk + 1), m.fd));
                }
                println!("dmd w {w} hi {hi}: fd {}", gen_fd.join(" "));
            }
        }
        "pad" => {
            // Stage budget 1000 with warmup 500; lr matrix.
            let dcfg = DmdConfig::default();
            let dmd = run_dmd(&teacher, &train, &dcfg, seed).unwrap().into_result().unwrap();
            let m4 = measure(&dmd.generator, &dmd.schedule, None, &eval, 256, seed).unwrap();
            println!("dmd fd {:.4} sync {:.3}", m4.fd, m4.sync);
            for lr_gen in [2e-5, 5e-5] {
                for lr_disc in [5e-5, 1e-4] {
                    let cfgs: Vec<StageConfig> = (1..=3)
                        .map(|k| StageConfig { steps: 1000, lr_gen, lr_disc, ..StageConfig::canonical(k).unwrap() })
                        .collect();
                    let pad = run_progressive(&dmd.generator, &dmd.schedule, &train, &cfgs, seed, |_, _| {})
                        .unwrap()
                        .into_result()
                        .unwrap();
                    print!("pad g{lr_gen:.0e} d{lr_disc:.0e}:");
                    for st in &pad.stages {
                        let m = measure(&st.generator, &st.schedule, None, &eval, 256, seed).unwrap();
                        print!("  k{} fd {:.3} sync {:.3}", st.k, m.fd, m.sync);
                    }
                    println!();
                }
            }
        }
        other => eprintln!("unknown mode {other}"),
    }
}
