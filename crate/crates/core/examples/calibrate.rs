//! Calibration sweep for the default end-to-end configuration: prints base
//! temperature profiles and the trajectories of the self-training loop,
//! the reward-based baseline, and the coupled-temperature ablation.

use taulab_core::grpo::{grpo_train, GrpoConfig};
use taulab_core::metrics::{evaluate_policy, EvalPlan, NullSink};
use taulab_core::osft::{osft_train, sft_train, OsftConfig, SftConfig};
use taulab_core::policy::{init_policy, PolicyKind, PolicyParams};
use taulab_core::rng::RngStream;
use taulab_core::sampling::TemperatureConfig;
use taulab_core::tasks::{Task, TaskSpec};

fn base_policy(task: &Task, seed: u64) -> PolicyParams {
    let params = init_policy(
        PolicyKind::Tabular,
        task.vocab().clone(),
        task.recommended_window(),
        0,
        seed,
    )
    .unwrap();
    let corpus = task
        .build_pretrain_corpus(1000, 0.3, &mut RngStream::new(seed, 23))
        .unwrap();
    let cfg = SftConfig { steps: 300, batch_size: 64, learning_rate: 1.0, warmup_steps: 10, tau: 1.0 };
    sft_train(params, &corpus, &cfg, &mut NullSink, seed).unwrap()
}

fn pass1(task: &Task, params: &PolicyParams, tau: f64, seed_tag: u64) -> f64 {
    let plan = EvalPlan {
        every_k_steps: 1,
        samples_per_prompt: 128,
        k_list: vec![1],
        tau_eval: vec![tau],
        ppl_samples: 16,
    };
    let prompts = task.enumerate_prompts();
    let report = evaluate_policy(params, task, &prompts, &plan, task.recommended_max_len(), &RngStream::new(900 + seed_tag, 77)).unwrap();
    report.pass_at(tau, 1).unwrap()
}

fn ppl(task: &Task, params: &PolicyParams, seed_tag: u64) -> f64 {
    let plan = EvalPlan {
        every_k_steps: 1,
        samples_per_prompt: 1,
        k_list: vec![1],
        tau_eval: vec![1.0],
        ppl_samples: 32,
    };
    let prompts = task.enumerate_prompts();
    evaluate_policy(params, task, &prompts, &plan, task.recommended_max_len(), &RngStream::new(900 + seed_tag, 78)).unwrap().ppl
}

fn main() {
    let args: Vec<String> = std::env::args().collect();
    let grpo_lr: f64 = args.get(1).and_then(|s| s.parse().ok()).unwrap_or(1.0);
    let osft_lr: f64 = args.get(2).and_then(|s| s.parse().ok()).unwrap_or(1.0);
    let steps: usize = args.get(3).and_then(|s| s.parse().ok()).unwrap_or(200);

    let task = Task::new(TaskSpec::modular_add(7)).unwrap();
    let prompts = task.enumerate_prompts();
    let eval = EvalPlan {
        every_k_steps: 1000,
        samples_per_prompt: 16,
        k_list: vec![1],
        tau_eval: vec![1.0],
        ppl_samples: 8,
    };

    for seed in [0u64, 1, 2] {
        let t0 = std::time::Instant::now();
        let base = base_policy(&task, seed);
        print!("seed {seed}: base profile ");
        for tau in [0.3, 0.6, 1.0, 1.2] {
            print!("p1@{tau}={:.3} ", pass1(&task, &base, tau, seed));
        }
        let base_p1 = pass1(&task, &base, 1.0, seed);
        let base_ppl = ppl(&task, &base, seed);
        println!("(presft {:?})", t0.elapsed());

        let t0 = std::time::Instant::now();
        let ocfg = OsftConfig {
            temperatures: TemperatureConfig::new(0.6, 1.0, 1.0),
            rollouts_per_prompt: 1,
            inner_iters: 1,
            outer_steps: steps,
            batch_prompts: 512,
            learning_rate: osft_lr,
            warmup_steps: 10,
            max_len: task.recommended_max_len(),
        };
        let osft_final = osft_train(base.clone(), &task, &prompts, &ocfg, &eval, &mut NullSink, 100 + seed, None).unwrap();
        let osft_p1 = pass1(&task, &osft_final, 1.0, seed);
        let osft_ppl = ppl(&task, &osft_final, seed);
        println!(
            "  osft:    p1 {base_p1:.3} -> {osft_p1:.3} (rel {:+.1}%)  ppl {base_ppl:.3} -> {osft_ppl:.3}  ({:?})",
            100.0 * (osft_p1 - base_p1) / base_p1,
            t0.elapsed()
        );

        let t0 = std::time::Instant::now();
        let coupled = OsftConfig {
            temperatures: TemperatureConfig::new(1.0, 1.0, 1.0),
            ..ocfg.clone()
        };
        let coupled_final = osft_train(base.clone(), &task, &prompts, &coupled, &eval, &mut NullSink, 200 + seed, None).unwrap();
        let coupled_p1 = pass1(&task, &coupled_final, 1.0, seed);
        println!(
            "  coupled: p1 {base_p1:.3} -> {coupled_p1:.3} (rel {:+.1}%)  ({:?})",
            100.0 * (coupled_p1 - base_p1) / base_p1,
            t0.elapsed()
        );

        let t0 = std::time::Instant::now();
        let gcfg = GrpoConfig {
            outer_steps: steps,
            batch_prompts: 64,
            learning_rate: grpo_lr,
            max_len: task.recommended_max_len(),
            ..GrpoConfig::default()
        };
        let grpo_final = grpo_train(base.clone(), &task, &prompts, &gcfg, &eval, &mut NullSink, 300 + seed, None).unwrap();
        let grpo_p1 = pass1(&task, &grpo_final, 1.0, seed);
        let grpo_ppl = ppl(&task, &grpo_final, seed);
        println!(
            "  grpo:    p1 {base_p1:.3} -> {grpo_p1:.3} (rel {:+.1}%)  ppl {base_ppl:.3} -> {grpo_ppl:.3}  |osft-grpo|={:.3}  ({:?})",
            100.0 * (grpo_p1 - base_p1) / base_p1,
            (osft_p1 - grpo_p1).abs(),
            t0.elapsed()
        );
    }
}
