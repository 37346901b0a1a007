//! Acceptance suite. Prints one PASS/FAIL line per criterion.
//!
//! Only criterion 8 fails the target. The others depend on training
//! outcomes and are reported as measured; see the README.
//!
//! Trained models are cached under the cargo target tmp dir, so the first
//! run trains about twenty models and later runs only roll out. Set
//! `TRAJOPT_ACCEPTANCE_PROFILE=paper` for full-size models.

use std::fmt::Write as _;
use std::fs;
use std::path::PathBuf;
use std::time::Instant;

use ndarray::Array2;
use rand::Rng;
use serde_json::json;

use trajopt::baselines::{gp_ei_run, GpConfig};
use trajopt::dataset::{dataset_from_str, dataset_to_string, generate_offline};
use trajopt::harness::experiments::{
    irb_values, mean_best_by_value, rhat_values, spearman, GP_CANDIDATES, GP_INIT, GP_ITERS, GP_TASKS,
    RHAT_FRACTIONS,
};
use trajopt::harness::pipeline::{stage_build_trajs, stage_gen_data, stage_rollout, stage_train};
use trajopt::harness::{ablate, reproduce, run, Profile, RunConfig};
use trajopt::model::{init_model, Batch, HeadKind, ModelConfig, ModelState, Targets};
use trajopt::rollout::{irb_sweep, rhat_sweep};
use trajopt::seed::{rng_from, SeedStream};
use trajopt::sortsample::{allocate_counts, build_traj_dataset, SortSampleParams, Strategy};
use trajopt::theory::{check_fixture, interior_fixture_family, premise_fixture_family};
use trajopt::TaskSpec;

const SEEDS: [u64; 5] = [0, 1, 2, 3, 4];

struct Report {
    lines: Vec<(u8, bool, String)>,
    json: serde_json::Map<String, serde_json::Value>,
}

impl Report {
    fn line(&mut self, n: u8, pass: bool, detail: String, data: serde_json::Value) {
        println!("criterion {n}: {} {detail}", if pass { "PASS" } else { "FAIL" });
        self.lines.push((n, pass, detail));
        self.json.insert(n.to_string(), json!({"pass": pass, "data": data}));
    }
}

fn base(task: &str, profile: Profile, cache: &PathBuf) -> RunConfig {
    let mut c = RunConfig::preset(task, profile).expect("preset");
    c.output.cache_dir = Some(cache.clone());
    c
}

fn fmt(v: &[f64]) -> String {
    let parts: Vec<String> = v.iter().map(|x| format!("{x:.3}")).collect();
    format!("[{}]", parts.join(", "))
}

fn criterion_1_2(r: &mut Report, cfg: &RunConfig) {
    let s = reproduce(cfg, &SEEDS).expect("reproduce");
    let seq = &s.rows[0];
    let ga = &s.rows[1];
    let ds = &s.rows[2];
    let pass1 = (-3.0..=-0.9).contains(&seq.mean) && s.beats_dataset >= 4;
    r.line(
        1,
        pass1,
        format!(
            "mean best {:.3} +- {:.3} (band [-3.0, -0.9]), beats dataset best {}/5 (need 4); per seed {}, dataset best {}",
            seq.mean,
            seq.std,
            s.beats_dataset,
            fmt(&seq.per_seed),
            fmt(&ds.per_seed)
        ),
        serde_json::to_value(&s).unwrap(),
    );
    let pass2 = (-8.5..=-1.5).contains(&ga.mean) && seq.mean > ga.mean;
    r.line(
        2,
        pass2,
        format!(
            "grad ascent mean {:.3} +- {:.3} (band [-8.5, -1.5]), sequence model mean {:.3} must exceed it; per seed {}",
            ga.mean,
            ga.std,
            seq.mean,
            fmt(&ga.per_seed)
        ),
        serde_json::to_value(ga).unwrap(),
    );
}

fn criterion_3(r: &mut Report) {
    let mut counts = Vec::new();
    for name in GP_TASKS {
        let task = TaskSpec::by_name(name).unwrap();
        let up = (0..10u64)
            .filter(|&i| {
                let seed = SeedStream::new(0).derive("gp", i);
                let run = gp_ei_run(&task, GP_INIT, GP_ITERS, GP_CANDIDATES, &GpConfig::default(), seed).unwrap();
                run.half_gain() > 0.0
            })
            .count();
        counts.push((name, up));
    }
    let pass = counts.iter().all(|&(_, up)| up >= 9);
    let detail: Vec<String> = counts.iter().map(|(n, up)| format!("{n} {up}/10")).collect();
    r.line(3, pass, format!("second half above first (need 9/10 each): {}", detail.join(", ")), json!(counts));
}

fn criterion_4_5(r: &mut Report, cfg: &RunConfig) {
    let mut rhos = Vec::new();
    let mut sweeps = Vec::new();
    for &seed in &SEEDS {
        let c = RunConfig { seed, ..cfg.clone() };
        let out = run(&c).expect("run");
        let model = &out.trained.model;
        if seed == SEEDS[0] {
            let r1 = irb_values(&out.trajs, 10);
            let pts = irb_sweep(model, &out.dataset, &r1, out.f_star, c.rollout.decode, SeedStream::new(seed).derive("irb", 0))
                .expect("irb sweep");
            let realized: Vec<f64> = pts.iter().map(|p| p.realized_regret).collect();
            let rho = spearman(&r1, &realized);
            r.line(
                4,
                rho > 0.8,
                format!("Spearman(R1, realized regret) {rho:.3} (need > 0.8); R1 {}, realized {}", fmt(&r1), fmt(&realized)),
                serde_json::to_value(&pts).unwrap(),
            );
        }
        let rh = rhat_values(&out.trajs, c.rollout.prefix_len, &RHAT_FRACTIONS);
        let sweep = rhat_sweep(
            model,
            &out.dataset,
            &out.params,
            out.f_star,
            c.rollout.prefix_len,
            &rh,
            c.rollout.decode,
            SeedStream::new(seed).derive("rhat", 0),
        )
        .expect("rhat sweep");
        let best: Vec<f64> = sweep.iter().map(|p| p.1).collect();
        rhos.push(spearman(&rh, &best));
        sweeps.push(sweep);
    }
    let neg = rhos.iter().filter(|&&x| x < 0.0).count();
    r.line(
        5,
        neg >= 4,
        format!("negative Spearman(R-hat, best) on {neg}/5 seeds (need 4); rho per seed {}", fmt(&rhos)),
        json!({"rho": rhos, "sweeps": sweeps}),
    );
}

fn criterion_6(r: &mut Report, cfg: &RunConfig) {
    let values: Vec<String> = ["reweight_sorted", "random_sorted", "random"].iter().map(|s| s.to_string()).collect();
    let rows = ablate("strategy", cfg, &values, &SEEDS).expect("strategy ablation");
    let m = mean_best_by_value(&rows);
    let pass = m[0].1 >= m[1].1 && m[1].1 >= m[2].1;
    let detail: Vec<String> = m.iter().map(|(v, mu, sd)| format!("{v} {mu:.3} +- {sd:.3}")).collect();
    r.line(6, pass, format!("need reweight_sorted >= random_sorted >= random: {}", detail.join(", ")), serde_json::to_value(&rows).unwrap());
}

fn criterion_7(r: &mut Report, cfg: &RunConfig) {
    let values: Vec<String> = ["fixed", "update", "update_guarded"].iter().map(|s| s.to_string()).collect();
    let rows = ablate("rb_mode", cfg, &values, &SEEDS).expect("rb_mode ablation");
    let m = mean_best_by_value(&rows);
    let mut worst: f64 = 0.0;
    for i in 0..m.len() {
        for j in i + 1..m.len() {
            let pooled = ((m[i].2.powi(2) + m[j].2.powi(2)) / 2.0).sqrt();
            worst = worst.max((m[i].1 - m[j].1).abs() / pooled);
        }
    }
    let detail: Vec<String> = m.iter().map(|(v, mu, sd)| format!("{v} {mu:.3} +- {sd:.3}")).collect();
    let queries: Vec<usize> = rows.iter().map(|r| r.queries_used).collect();
    r.line(
        7,
        worst < 1.0,
        format!("largest pairwise gap {worst:.2} pooled std (need < 1): {}; queries used {queries:?}", detail.join(", ")),
        serde_json::to_value(&rows).unwrap(),
    );
}

fn tiny_model(seed: u64) -> ModelState<f64> {
    let mut c = ModelConfig::new(HeadKind::Continuous { dim: 2 }, 2, 2, 3, 5);
    c.embed_dim = 8;
    let mut m: ModelState<f64> = init_model(c, seed).unwrap();
    let mut rng = rng_from(seed + 1);
    for p in m.params_mut() {
        *p += rng.gen_range(-0.3..0.3);
    }
    m
}

fn tiny_batch(seed: u64) -> (Batch<f64>, Targets<f64>) {
    let mut rng = rng_from(seed);
    let b = Batch {
        windows: 2,
        steps: 3,
        budgets: (0..6).map(|_| rng.gen_range(0.0..1.5)).collect(),
        points: Array2::from_shape_fn((6, 2), |_| rng.gen_range(-1.0..1.0)),
        timesteps: vec![0, 1, 2, 1, 2, 3],
    };
    let t = Targets::Continuous(Array2::from_shape_fn((6, 2), |_| rng.gen_range(-1.0..1.0)));
    (b, t)
}

fn criterion_8(r: &mut Report) -> bool {
    let mut checks: Vec<(&str, bool, String)> = Vec::new();

    let m = tiny_model(21);
    let (batch, tg) = tiny_batch(22);
    let (_, g) = m.loss_and_grad(&batch, &tg, None).unwrap();
    let h = 1e-5;
    let mut worst: f64 = 0.0;
    for i in 0..m.parameter_count() {
        let mut p = m.clone();
        p.params_mut()[i] += h;
        let mut q = m.clone();
        q.params_mut()[i] -= h;
        let fd = (p.loss_and_grad(&batch, &tg, None).unwrap().0 - q.loss_and_grad(&batch, &tg, None).unwrap().0) / (2.0 * h);
        worst = worst.max((fd - g.values[i]).abs() / fd.abs().max(g.values[i].abs()).max(1e-6));
    }
    checks.push(("gradients", worst < 1e-4, format!("worst rel err {worst:.1e}")));

    let before = m.forward(&batch).unwrap().predictions;
    let mut later = batch.clone();
    later.points[(2, 0)] += 0.7;
    later.budgets[2] += 0.9;
    later.points[(1, 1)] -= 0.5;
    let after = m.forward(&later).unwrap().predictions;
    let causal = (0..2).all(|k| before[(0, k)] == after[(0, k)] && before[(1, k)] == after[(1, k)]);
    checks.push(("causality", causal, String::new()));

    let mut rng = rng_from(8);
    let alloc = (0..200).all(|_| {
        let scores: Vec<f64> = (0..rng.gen_range(1..40)).map(|_| rng.gen_range(0.01..5.0)).collect();
        let t = rng.gen_range(1..300);
        allocate_counts(&scores, t).unwrap().iter().sum::<usize>() == t
    });
    let ds = generate_offline(&TaskSpec::branin(), 2000, 0.1, 3).unwrap();
    let params = SortSampleParams { k: 3.0, tau: 10.0, n_bins: 16, length: 64, strategy: Strategy::ReweightSorted, seed: 4 };
    let td = build_traj_dataset(&ds, 50, &params, ds.f_star()).unwrap();
    let telescopes = td.trajectories.iter().all(|tr| {
        (0..tr.len()).all(|t| {
            let next = tr.budgets.get(t + 1).copied().unwrap_or(0.0);
            (tr.budgets[t] - next - (ds.f_star() - tr.values[t])).abs() <= 1e-9
        })
    });
    checks.push(("allocation and telescoping", alloc && telescopes, String::new()));

    let text = dataset_to_string(&ds);
    let back = dataset_from_str(&text).unwrap();
    let exact = back.values().iter().zip(ds.values()).all(|(a, b)| a.to_bits() == b.to_bits())
        && back.points().iter().zip(ds.points()).all(|(a, b)| a.to_bits() == b.to_bits())
        && dataset_to_string(&back) == text;
    checks.push(("dataset round trip", exact, String::new()));

    let mut theory_ok = true;
    let mut seps = Vec::new();
    for fx in premise_fixture_family().iter().chain(&interior_fixture_family()) {
        let rep = check_fixture(fx, 200_000, 0).unwrap();
        theory_ok &= rep.conclusion_holds(3.0);
        seps.push(format!("{} {:.0}", rep.name, rep.separation_sigma));
    }
    checks.push(("eps-high volumes at 3 sigma", theory_ok, format!("separation {}", seps.join(", "))));

    let mut toy = RunConfig::preset("branin", Profile::Desk).unwrap();
    toy.dataset.n_raw = 300;
    toy.sortsample.num_trajs = 8;
    toy.sortsample.length = 8;
    toy.sortsample.n_bins = 4;
    toy.model.embed_dim = 8;
    toy.model.n_heads = 2;
    toy.model.n_layers = 1;
    toy.model.context_len = 4;
    toy.train.epochs = 2;
    toy.train.batch_size = 8;
    toy.rollout.prefix_len = 4;
    toy.rollout.query_budget = 10;
    let dirs = [tempfile::tempdir().unwrap(), tempfile::tempdir().unwrap()];
    for d in &dirs {
        stage_gen_data(&toy, d.path()).unwrap();
        stage_build_trajs(&toy, d.path()).unwrap();
        stage_train(&toy, d.path()).unwrap();
        stage_rollout(&toy, d.path()).unwrap();
    }
    let identical = ["dataset.csv", "trajs.csv", "model.bin", "result.json"]
        .iter()
        .all(|f| fs::read(dirs[0].path().join(f)).unwrap() == fs::read(dirs[1].path().join(f)).unwrap());
    checks.push(("byte-identical reruns", identical, String::new()));

    let pass = checks.iter().all(|c| c.1);
    let detail: Vec<String> = checks
        .iter()
        .map(|(n, ok, d)| format!("{n} {}{}", if *ok { "ok" } else { "BROKEN" }, if d.is_empty() { String::new() } else { format!(" ({d})") }))
        .collect();
    r.line(8, pass, detail.join("; "), json!(detail));
    pass
}

fn criterion_9(r: &mut Report, cfg: &RunConfig) {
    println!(
        "note: the real-world benchmark scores (mean score and mean rank over those tasks) are not reproduced here; \
         their tasks and oracles are outside this artifact. The discrete hidden-pattern task stands in for them."
    );
    let mut beats = 0;
    let mut pairs = Vec::new();
    for &seed in &SEEDS {
        let out = run(&RunConfig { seed, ..cfg.clone() }).expect("discrete run");
        beats += usize::from(out.result.best_value >= out.result.dataset_best);
        pairs.push((out.result.best_value, out.result.dataset_best));
    }
    let detail: Vec<String> = pairs.iter().map(|(b, d)| format!("{b} vs {d}")).collect();
    r.line(9, beats >= 4, format!("hidden pattern best >= dataset best on {beats}/5 seeds (need 4): {}", detail.join(", ")), json!(pairs));
}

fn main() {
    // `cargo test -- --list` and filters should not trigger an hour of training.
    let args: Vec<String> = std::env::args().skip(1).collect();
    if args.iter().any(|a| a == "--list") {
        println!("acceptance: test");
        return;
    }
    let profile: Profile = std::env::var("TRAJOPT_ACCEPTANCE_PROFILE")
        .unwrap_or_else(|_| "desk".into())
        .parse()
        .expect("profile is paper or desk");
    let cache = std::env::var_os("TRAJOPT_ACCEPTANCE_CACHE")
        .map(PathBuf::from)
        .unwrap_or_else(|| PathBuf::from(env!("CARGO_TARGET_TMPDIR")).join(format!("acceptance-models-{profile:?}").to_lowercase()));
    println!("acceptance suite, profile {profile:?}, model cache {}", cache.display());
    let t0 = Instant::now();

    let mut r = Report { lines: Vec::new(), json: serde_json::Map::new() };
    let branin = base("branin", profile, &cache);
    criterion_1_2(&mut r, &branin);
    criterion_3(&mut r);
    criterion_4_5(&mut r, &branin);
    criterion_6(&mut r, &branin);
    criterion_7(&mut r, &branin);
    let unconditional = criterion_8(&mut r);
    criterion_9(&mut r, &base("hidden_pattern", profile, &cache));

    let mut summary = String::new();
    r.lines.sort_by_key(|l| l.0);
    for (n, pass, _) in &r.lines {
        write!(summary, "{n}:{} ", if *pass { "PASS" } else { "FAIL" }).unwrap();
    }
    println!("summary {summary}({:.0} s)", t0.elapsed().as_secs_f64());
    let path = PathBuf::from(env!("CARGO_TARGET_TMPDIR")).join("acceptance.json");
    fs::write(&path, serde_json::to_string_pretty(&r.json).unwrap()).unwrap();
    println!("details in {}", path.display());
    if !unconditional {
        eprintln!("criterion 8 failed");
        std::process::exit(1);
    }
}
