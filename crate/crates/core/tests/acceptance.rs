//! Acceptance report: one PASS/FAIL line per criterion.
//!
//! Runs as a plain binary (no libtest harness). A FAIL is reported, not
//! raised, so that known reds stay visible without breaking the suite; set
//! `ACCEPTANCE_STRICT=1` to exit non-zero on any failure. `ACCEPTANCE_ONLY`
//! takes a comma-separated list of criterion numbers.

use std::time::Instant;

use nalgebra::{DMatrix, DVector};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, StandardNormal};

use demonstrate::benchmark::{run_benchmark, BenchTask};
use demonstrate::config::Config;
use demonstrate::constraint::{post_check, sample_unsafe, solve_feasibility, TaskCost};
use demonstrate::demos::{
    attach_embeddings, generate_demoset, generate_for_subtasks, synthetic_obstacle, DemoConfig, Oracle,
};
use demonstrate::embedding::{fit_pca, rows_to_matrix, EmbeddingProvider, MockEmbedder};
use demonstrate::execute::{EpisodeStatus, Pipeline};
use demonstrate::features::{FeatureLibrary, SharedParams};
use demonstrate::grammar::{grammar_subtasks, parse, Direction, SubTask};
use demonstrate::irl::{demo_loss, irl_loss, irl_loss_grad, DemoSummary, IrlData};
use demonstrate::language::{design_ocp, FixturePlanner, LearnedDesigner, ScriptedPlanner};
use demonstrate::mapping::MappingParams;
use demonstrate::model::LearnedModel;
use demonstrate::ocp::solve_ocp;
use demonstrate::sim::{spawn_scene, ContState, DynamicsModel, Layout, Vec3};
use demonstrate::training::train_model;

struct Outcome {
    pass: bool,
    detail: String,
}

fn rel_err(a: f64, b: f64, floor: f64) -> f64 {
    (a - b).abs() / a.abs().max(b.abs()).max(floor)
}

/// Model trained with the zero-shot protocol: T = 30, D = 10, z = 10.
fn zero_shot_config(seed: u64) -> Config {
    let mut cfg = Config::default();
    cfg.embedding.z = 10;
    cfg.irl.seed = seed;
    cfg.demos.tasks = 30;
    cfg.demos.per_task = 10;
    cfg
}

fn criterion_1() -> Outcome {
    let lib = FeatureLibrary::default();
    let dynamics = DynamicsModel::default();
    let mut rng = ChaCha8Rng::seed_from_u64(1);
    let mut worst_g: f64 = 0.0;
    let mut worst_h: f64 = 0.0;
    for _ in 0..20 {
        let theta: Vec<f64> = (0..lib.p()).map(|_| rng.gen_range(0.1..2.0)).collect();
        let m = SharedParams {
            scales: [rng.gen_range(0.5..1.5), rng.gen_range(0.5..1.5), rng.gen_range(0.5..1.5)],
            terminal_weight: rng.gen_range(0.5..1.5),
        };
        let objects: Vec<Vec3> = (0..4)
            .map(|_| Vec3::new(rng.gen_range(-0.2..0.2), rng.gen_range(-0.2..0.2), 0.02))
            .collect();
        let x0 = ContState::new(
            Vec3::new(rng.gen_range(-0.2..0.2), rng.gen_range(-0.2..0.2), rng.gen_range(0.1..0.3)),
            Vec3::new(rng.gen_range(-0.1..0.1), rng.gen_range(-0.1..0.1), rng.gen_range(-0.1..0.1)),
        );
        let u: Vec<f64> = (0..3 * dynamics.horizon).map(|_| rng.gen_range(-1.0..1.0)).collect();
        let (g, h) = lib.grad_hess_u(&x0, &u, &theta, &m, &objects, &dynamics).unwrap();
        let cost = |u: &[f64]| lib.cost_of_controls(&x0, u, &theta, &m, &objects, &dynamics).unwrap();
        let grad = |u: &[f64]| lib.grad_hess_u(&x0, u, &theta, &m, &objects, &dynamics).unwrap().0;
        let eps = 1e-6;
        let gscale = g.amax();
        let hscale = h.amax();
        for i in 0..u.len() {
            let mut up = u.clone();
            up[i] += eps;
            let mut um = u.clone();
            um[i] -= eps;
            let fd = (cost(&up) - cost(&um)) / (2.0 * eps);
            worst_g = worst_g.max((fd - g[i]).abs() / gscale);
            let fdh = (grad(&up) - grad(&um)) / (2.0 * eps);
            for k in 0..u.len() {
                worst_h = worst_h.max((fdh[k] - h[(k, i)]).abs() / hscale);
            }
        }
    }

    // loss gradient through a width-8 mapping
    let oracle = Oracle::default();
    let dcfg = DemoConfig {
        tasks: 3,
        per_task: 2,
        ..Default::default()
    };
    let mut set = generate_demoset(&oracle, &dcfg, 3).unwrap();
    attach_embeddings(&mut set, &MockEmbedder).unwrap();
    let rows: Vec<Vec<f64>> = set.examples.iter().map(|e| e.embedding.clone().unwrap().values).collect();
    let pca = fit_pca(&rows_to_matrix(&rows).unwrap(), 3).unwrap();
    let data = IrlData::from_demoset(&set, &pca, lib).unwrap();
    let mut mapping = MappingParams::init(&[3, 8, lib.p()], 7).unwrap();
    mapping.output_scale.fill(50.0);
    let m = SharedParams {
        scales: [0.9, 1.1, 1.05],
        terminal_weight: 0.95,
    };
    let lambda = 1.0;
    let eval = irl_loss_grad(&mapping, &m, &data, lambda).unwrap();
    let flat = mapping.flatten();
    let mut worst_l: f64 = 0.0;
    for i in 0..flat.len() + 4 {
        let f = |delta: f64| {
            let mut mp = mapping.clone();
            let mut mm = m.to_vec();
            if i < flat.len() {
                let mut v = flat.clone();
                v[i] += delta;
                mp.set_flat(&v).unwrap();
            } else {
                mm[i - flat.len()] += delta;
            }
            irl_loss(&mp, &SharedParams::from_slice(&mm).unwrap(), &data, lambda).unwrap()
        };
        let h = 1e-6;
        let fd = (f(h) - f(-h)) / (2.0 * h);
        worst_l = worst_l.max(rel_err(fd, eval.grad[i], 1e-2));
    }
    Outcome {
        pass: worst_g <= 1e-6 && worst_h <= 1e-4 && worst_l <= 1e-4,
        detail: format!(
            "grad_hess_u gradient rel err {worst_g:.2e} (≤ 1e-6), Hessian {worst_h:.2e} (≤ 1e-4); loss gradient {worst_l:.2e} (≤ 1e-4)"
        ),
    }
}

fn criterion_2() -> Outcome {
    let mut oracle = Oracle::default();
    oracle.obstacle_clearance = 0.01;
    let dcfg = DemoConfig {
        tasks: 5,
        per_task: 4,
        noise_frac: 0.0,
        ..Default::default()
    };
    let set = generate_demoset(&oracle, &dcfg, 11).unwrap();
    let lib = oracle.library;
    let m = SharedParams::default();
    let sigma = DemoConfig::default().noise_frac * oracle.dynamics.u_max;
    let beta = 1.0 / (2.0 * sigma * sigma);
    let lambda = 1e-6;
    let mut worst_g: f64 = 0.0;
    let mut min_gterm = f64::INFINITY;
    let mut tasks = Vec::new();
    for ex in &set.examples {
        let st = parse(&ex.description).unwrap();
        // the demonstrator's cost θ* for the optimality probe; the likelihood
        // uses θ*·β with the inverse temperature of the default noise
        let theta_true = oracle.theta(&st);
        let theta: Vec<f64> = theta_true.iter().map(|v| v * beta).collect();
        let demos: Vec<DemoSummary> = ex.demos_free.iter().map(DemoSummary::from_demo).collect();
        for d in &ex.demos_free {
            let t = &d.trajectory;
            let (g, _) = lib
                .grad_hess_u(&t.states[0], &t.stacked_controls(), &theta_true, &m, &d.objects, &oracle.dynamics)
                .unwrap();
            worst_g = worst_g.max(g.norm());
        }
        for d in &demos {
            let r = demo_loss(&lib, &oracle.dynamics, &theta, &m, d, lambda, false).unwrap();
            min_gterm = min_gterm.min(r.g_term);
        }
        tasks.push((theta, demos));
    }
    let total = |ths: &[Vec<f64>], m: &SharedParams| -> f64 {
        tasks
            .iter()
            .zip(ths)
            .flat_map(|((_, demos), th)| {
                demos
                    .iter()
                    .map(move |d| demo_loss(&lib, &oracle.dynamics, th, m, d, lambda, false).unwrap().loss)
            })
            .sum()
    };
    let truth: Vec<Vec<f64>> = tasks.iter().map(|(t, _)| t.clone()).collect();
    let l0 = total(&truth, &m);
    let mut rng = ChaCha8Rng::seed_from_u64(2);
    let mut increased = 0;
    for _ in 0..20 {
        let ths: Vec<Vec<f64>> = truth
            .iter()
            .map(|th| {
                th.iter()
                    .map(|v| {
                        let xi: f64 = StandardNormal.sample(&mut rng);
                        v * (1.0 + 0.1 * xi)
                    })
                    .collect()
            })
            .collect();
        let mv: Vec<f64> = m
            .to_vec()
            .iter()
            .map(|v| {
                let xi: f64 = StandardNormal.sample(&mut rng);
                v * (1.0 + 0.1 * xi)
            })
            .collect();
        if total(&ths, &SharedParams::from_slice(&mv).unwrap()) > l0 {
            increased += 1;
        }
    }
    Outcome {
        pass: worst_g <= 1e-6 && min_gterm >= -1e-10 && increased >= 18,
        detail: format!(
            "max ‖g‖ {worst_g:.2e} (≤ 1e-6), min g-term {min_gterm:.2e} (≥ -1e-10), loss increased in {increased}/20 perturbations (≥ 18)"
        ),
    }
}

/// Held-out zero-shot accuracy for one seed: (hits, trials).
fn zero_shot_seed(seed: u64) -> (usize, usize) {
    let cfg = zero_shot_config(seed);
    let oracle = cfg.oracle();
    let all = grammar_subtasks(40, cfg.demos.offset_range, &cfg.demos.directions, &cfg.demos.objects, seed).unwrap();
    let (train, held) = all.split_at(30);
    let set = generate_for_subtasks(&oracle, &cfg.demos, train, seed).unwrap();
    let model = train_model(&set, &MockEmbedder, &cfg, "acceptance").unwrap().model;
    let mut rng = ChaCha8Rng::seed_from_u64(seed + 1000);
    let mut hits = 0;
    for st in held {
        let mut scene = spawn_scene(Layout::Cubes, rng.gen(), &oracle.sim);
        scene.ee_pos = Vec3::new(rng.gen_range(-0.25..0.25), rng.gen_range(-0.25..0.25), rng.gen_range(0.15..0.35));
        let objects = scene.object_positions();
        let target = oracle.target(st, &objects).unwrap();
        let reached = design_ocp(&st.to_string(), &model, &MockEmbedder, &objects, scene.cont())
            .and_then(|spec| solve_ocp(&spec, &cfg.solver))
            .map(|r| (r.trajectory.terminal().pos - target).norm());
        if matches!(reached, Ok(e) if e <= 0.01) {
            hits += 1;
        }
    }
    (hits, held.len())
}

fn criterion_3() -> Outcome {
    let mut hits = 0;
    let mut trials = 0;
    let mut per_seed = Vec::new();
    for seed in 0..20 {
        let (h, n) = zero_shot_seed(seed);
        hits += h;
        trials += n;
        per_seed.push(h);
    }
    let rate = hits as f64 / trials as f64;
    Outcome {
        pass: rate >= 0.9,
        detail: format!("{hits}/{trials} held-out sub-tasks within 1 cm ({:.1}%, ≥ 90%); per seed {per_seed:?}", 100.0 * rate),
    }
}

fn criterion_4() -> Outcome {
    let mut rng = ChaCha8Rng::seed_from_u64(4);
    let rows: Vec<Vec<f64>> = (0..30)
        .map(|i| {
            let st = SubTask::new(
                0.04 + 0.08 * rng.gen::<f64>(),
                Direction::ALL[i % 5],
                rng.gen_range(0..4),
            );
            MockEmbedder::embed_text(&st.to_string())
        })
        .collect();
    let e = rows_to_matrix(&rows).unwrap();
    let pca = fit_pca(&e, 20).unwrap();
    let centred = DMatrix::from_fn(e.nrows(), e.ncols(), |i, j| e[(i, j)] - pca.mean[j]);
    // Ẽ V_z has orthogonal columns with norms Σ_z, i.e. it equals U_z Σ_z
    let scores = &centred * &pca.components;
    let gram = scores.transpose() * &scores;
    let sigma = centred.clone().svd(false, false).singular_values;
    let mut sv: Vec<f64> = sigma.iter().copied().collect();
    sv.sort_by(|a, b| b.total_cmp(a));
    let scale = sv[0] * sv[0];
    let ident = (0..20)
        .flat_map(|i| (0..20).map(move |k| (i, k)))
        .map(|(i, k)| {
            let want = if i == k { sv[i] * sv[i] } else { 0.0 };
            (gram[(i, k)] - want).abs() / scale
        })
        .fold(0.0, f64::max);
    let proj = (0..rows.len())
        .map(|i| (pca.project(&rows[i]).unwrap() - scores.row(i).transpose()).amax())
        .fold(0.0, f64::max);
    let ident = ident.max(proj);
    let full = fit_pca(&e, e.nrows().min(e.ncols())).unwrap();
    let recon = rows
        .iter()
        .map(|r| {
            let back = full.reconstruct(&full.project(r).unwrap());
            (back - DVector::from_column_slice(r)).amax()
        })
        .fold(0.0, f64::max);
    Outcome {
        pass: ident <= 1e-10 && recon <= 1e-10 && pca.z == 20,
        detail: format!("‖U_zΣ_z − ẼV_z‖∞ {ident:.2e}, full-rank reconstruction {recon:.2e} (both ≤ 1e-10), z = {}", pca.z),
    }
}

fn criterion_5(model: &LearnedModel, cfg: &Config) -> Outcome {
    let gate = model.coverage_gate().unwrap();
    let verdict = |text: &str| {
        let c = gate.evaluate(&MockEmbedder.embed_one(text).unwrap().values).unwrap();
        (c.coverage <= cfg.validation.threshold && c.residual <= cfg.validation.residual, c.coverage)
    };
    let mut in_range = Vec::new();
    for d in [0.04, 0.06, 0.08, 0.1, 0.12] {
        for dir in &Direction::ALL[..5] {
            for k in 0..4 {
                in_range.push(SubTask::new(d, *dir, k).to_string());
            }
        }
    }
    let pass_in = in_range.iter().filter(|t| verdict(t).0).count();
    let far: Vec<String> = [0.36, 0.5]
        .iter()
        .flat_map(|d| (0..4).map(move |k| SubTask::new(*d, Direction::Above, k).to_string()))
        .collect();
    let far_cov: Vec<f64> = far.iter().map(|t| verdict(t).1).collect();
    let fail_far = far.iter().filter(|t| !verdict(t).0).count();
    let soup = [
        "purple quickly banana seven sideways",
        "same as the previous sub-task",
        "gripper banana object object meters",
        "zx qv lorem ipsum",
    ];
    let fail_soup = soup.iter().filter(|t| !verdict(t).0).count();
    let ok = pass_in == in_range.len() && fail_far == far.len() && fail_soup == soup.len();
    Outcome {
        pass: ok,
        detail: format!(
            "in-range pass {pass_in}/{}; ≥3× distance fail {fail_far}/{} (coverage {:.2}..{:.2}); token soup fail {fail_soup}/{}; real-model fixtures not shipped (not evaluated)",
            in_range.len(),
            far.len(),
            far_cov.iter().cloned().fold(f64::INFINITY, f64::min),
            far_cov.iter().cloned().fold(0.0, f64::max),
            soup.len()
        ),
    }
}

fn criterion_6(model: &LearnedModel, cfg: &Config) -> Outcome {
    let gate = model.coverage_gate().unwrap();
    let designer = LearnedDesigner {
        model,
        embedder: &MockEmbedder,
    };
    let scene = spawn_scene(Layout::Cubes, 7, &cfg.sim);
    let run = |d: f64| {
        let planner = FixturePlanner::repeating(&SubTask::new(d, Direction::Above, 0).to_string());
        let pipe = Pipeline {
            planner: &planner,
            designer: &designer,
            embedder: &MockEmbedder,
            gate: &gate,
            sim: &cfg.sim,
            solver: &cfg.solver,
            validation: &cfg.validation,
            execution: &cfg.execution,
        };
        pipe.run("move above object one", &scene).unwrap()
    };
    let far = run(0.15);
    let far_attempts = far.planning.as_ref().map_or(0, |p| p.attempts().len());
    let far_cov = far
        .planning
        .as_ref()
        .and_then(|p| p.reports().last().map(|r| r.steps[0].coverage))
        .unwrap_or(f64::NAN);
    let refused = far.status == EpisodeStatus::Refused && far_attempts <= cfg.validation.max_replans;
    let near: Vec<(f64, EpisodeStatus, f64)> = [0.05, 0.10]
        .iter()
        .map(|d| {
            let ep = run(*d);
            let target = cfg
                .oracle()
                .target(&SubTask::new(*d, Direction::Above, 0), &scene.object_positions())
                .unwrap();
            let err = (ep.final_scene().ee_pos - target).norm();
            (*d, ep.status, err)
        })
        .collect();
    let executed = near.iter().all(|(_, s, _)| *s == EpisodeStatus::Completed);
    Outcome {
        pass: refused && executed,
        detail: format!(
            "0.15 m: {:?} after {far_attempts} attempts (coverage {far_cov:.2}); {}",
            far.status,
            near.iter()
                .map(|(d, s, e)| format!("{d:.2} m: {s:?} (error {e:.4} m)"))
                .collect::<Vec<_>>()
                .join(", ")
        ),
    }
}

fn criterion_7() -> Outcome {
    let mut failures = 0;
    let mut min_kept = usize::MAX;
    let mut worst_center: f64 = 0.0;
    let mut notes = Vec::new();
    for seed in 0..10u64 {
        let mut cfg = Config::default();
        cfg.demos.tasks = 5;
        cfg.demos.per_task = 2;
        cfg.demos.obstacle = Some(synthetic_obstacle());
        cfg.constraint.feasibility.seed = seed;
        let oracle = cfg.oracle();
        let set = match generate_demoset(&oracle, &cfg.demos, seed) {
            Ok(s) => s,
            Err(e) => {
                failures += 1;
                notes.push(format!("seed {seed}: {e}"));
                continue;
            }
        };
        let beta = 1.0 / (2.0 * set.noise_scale.powi(2));
        let m = SharedParams::default();
        let mut safe = Vec::new();
        let mut unsafe_ = Vec::new();
        let mut idx = 0;
        for ex in &set.examples {
            let theta: Vec<f64> = oracle.theta(&parse(&ex.description).unwrap()).iter().map(|v| v * beta).collect();
            for d in &ex.demos_safe {
                let cost = TaskCost {
                    library: &oracle.library,
                    theta: &theta,
                    m: &m,
                    objects: &d.objects,
                };
                let kept = sample_unsafe(&d.trajectory, &cost, &set.dynamics, &cfg.constraint.sampler, idx, seed * 1000 + idx as u64)
                    .unwrap_or_default();
                unsafe_.extend(kept.into_iter().map(|s| s.trajectory));
                safe.push(d.trajectory.clone());
                idx += 1;
            }
            safe.extend(ex.demos_free.iter().map(|d| d.trajectory.clone()));
        }
        min_kept = min_kept.min(unsafe_.len());
        match solve_feasibility(&safe, &unsafe_, cfg.constraint.family, &cfg.constraint.feasibility) {
            Ok(rho) => {
                let check = post_check(&rho, &safe, &unsafe_);
                let err = (rho.center - synthetic_obstacle().center).norm();
                worst_center = worst_center.max(err);
                if !check.passed() || err > 0.02 || unsafe_.len() < 200 {
                    failures += 1;
                    notes.push(format!("seed {seed}: {check:?}, center error {err:.4}"));
                }
            }
            Err(e) => {
                failures += 1;
                notes.push(format!("seed {seed}: {e}"));
            }
        }
    }
    Outcome {
        pass: failures == 0,
        detail: format!(
            "{failures} failures over 10 seeds; min kept unsafe samples {min_kept} (≥ 200); worst center error {worst_center:.4} m (≤ 0.02){}",
            if notes.is_empty() { String::new() } else { format!("; {}", notes.join("; ")) }
        ),
    }
}

fn criterion_8(model: &LearnedModel, cfg: &Config) -> Outcome {
    let oracle = cfg.oracle();
    let gate = model.coverage_gate().unwrap();
    let designer = LearnedDesigner {
        model,
        embedder: &MockEmbedder,
    };
    let pipe = Pipeline {
        planner: &ScriptedPlanner,
        designer: &designer,
        embedder: &MockEmbedder,
        gate: &gate,
        sim: &cfg.sim,
        solver: &cfg.solver,
        validation: &cfg.validation,
        execution: &cfg.execution,
    };
    let (r, _) = run_benchmark(BenchTask::Stack, 20, 0, &pipe, &oracle, cfg).unwrap();
    let sum = r.sr + r.tp + r.od + r.co;
    Outcome {
        pass: r.sr >= 90.0 && r.co == 0.0 && (sum - 100.0).abs() < 1e-9,
        detail: format!("stack × 20: SR {} TP {} OD {} CO {} (sum {sum})", r.sr, r.tp, r.od, r.co),
    }
}

fn criterion_9() -> Outcome {
    let oracle = Oracle::default();
    let scene = spawn_scene(Layout::Cubes, 5, &oracle.sim);
    let objects = scene.object_positions();
    let x0 = ContState::at_rest(Vec3::new(0.1, -0.1, 0.3));
    let st = SubTask::new(0.08, Direction::Above, 1);
    let base = oracle.spec(&st, &objects, x0);
    let u_base = solve_ocp(&base, &oracle.solver).unwrap().trajectory.stacked_controls();
    let mut worst_scale: f64 = 0.0;
    for c in [0.5, 2.0] {
        let mut spec = base.clone();
        spec.theta.iter_mut().for_each(|v| *v *= c);
        let u = solve_ocp(&spec, &oracle.solver).unwrap().trajectory.stacked_controls();
        let d = u.iter().zip(&u_base).map(|(a, b)| (a - b).powi(2)).sum::<f64>().sqrt();
        worst_scale = worst_scale.max(d);
    }

    // N = 2: the cost is quadratic in the controls, so one Newton step from 0 is exact
    let mut two = base.clone();
    two.dynamics = oracle.dynamics.with_horizon(2);
    two.x0 = ContState::at_rest(objects[1] + Vec3::new(0.005, -0.004, 0.09));
    let zero = vec![0.0; 6];
    let (g, h) = oracle
        .library
        .grad_hess_u(&two.x0, &zero, &two.theta, &two.m, &two.objects, &two.dynamics)
        .unwrap();
    let closed = h.lu().solve(&(-g)).unwrap();
    let solved = solve_ocp(&two, &oracle.solver).unwrap().trajectory.stacked_controls();
    let n2 = closed.iter().zip(&solved).map(|(a, b)| (a - b).abs()).fold(0.0, f64::max);

    // obstacle on the straight path: constrained optimum costs at least as much
    let ob = synthetic_obstacle();
    let start = ContState::at_rest(ob.center + Vec3::new(-0.12, -0.1, 0.0));
    let st_ob = SubTask::new(0.05, Direction::Above, 0);
    let mut objs = objects.clone();
    objs[0] = ob.center + Vec3::new(0.12, 0.1, -0.05);
    let spec = oracle.spec(&st_ob, &objs, start);
    let free = solve_ocp(&spec, &oracle.solver).unwrap();
    let mut cspec = spec.clone();
    cspec.rho = Some(ob);
    let con = solve_ocp(&cspec, &oracle.solver).unwrap();
    let cost = |t| oracle.library.traj_cost(t, &spec.theta, &spec.m, &objs).unwrap();
    let (cf, cc) = (cost(&free.trajectory), cost(&con.trajectory));
    Outcome {
        pass: worst_scale <= 1e-6 && n2 <= 1e-8 && cc >= cf,
        detail: format!(
            "scaling ‖Δu‖ {worst_scale:.2e} (≤ 1e-6); N = 2 closed-form gap {n2:.2e} (≤ 1e-8); constrained {cc:.4} ≥ unconstrained {cf:.4}"
        ),
    }
}

fn main() {
    let only: Option<Vec<usize>> = std::env::var("ACCEPTANCE_ONLY")
        .ok()
        .map(|v| v.split(',').filter_map(|s| s.trim().parse().ok()).collect());
    let wanted = |k: usize| only.as_ref().map_or(true, |o| o.contains(&k));
    let strict = std::env::var("ACCEPTANCE_STRICT").is_ok();

    let mut shared: Option<(LearnedModel, Config)> = None;
    let model = |shared: &mut Option<(LearnedModel, Config)>| -> (LearnedModel, Config) {
        if shared.is_none() {
            let cfg = zero_shot_config(0);
            let set = generate_demoset(&cfg.oracle(), &cfg.demos, 0).unwrap();
            let m = train_model(&set, &MockEmbedder, &cfg, "acceptance").unwrap().model;
            *shared = Some((m, cfg));
        }
        shared.clone().unwrap()
    };

    let mut failed = 0;
    for k in 1..=9 {
        if !wanted(k) {
            continue;
        }
        let t0 = Instant::now();
        let out = match k {
            1 => criterion_1(),
            2 => criterion_2(),
            3 => criterion_3(),
            4 => criterion_4(),
            5 => {
                let (m, c) = model(&mut shared);
                criterion_5(&m, &c)
            }
            6 => {
                let (m, c) = model(&mut shared);
                criterion_6(&m, &c)
            }
            7 => criterion_7(),
            8 => {
                let (m, c) = model(&mut shared);
                criterion_8(&m, &c)
            }
            _ => criterion_9(),
        };
        if !out.pass {
            failed += 1;
        }
        println!(
            "{} criterion {k}: {} [{:.1}s]",
            if out.pass { "PASS" } else { "FAIL" },
            out.detail,
            t0.elapsed().as_secs_f64()
        );
    }
    println!("criterion 10: secondary (console UI) — not built");
    if strict && failed > 0 {
        std::process::exit(1);
    }
}
