//! Property-based invariants across the pipeline's pure pieces.

use nalgebra::DMatrix;
use proptest::prelude::*;

use demonstrate::benchmark::{classify_episode, BenchTask, BenchmarkReport, Category, RunRecord};
use demonstrate::config::Config;
use demonstrate::constraint::{post_check, ConstraintParams};
use demonstrate::embedding::CoverageGate;
use demonstrate::execute::{CollisionRecord, EpisodeResult, EpisodeStatus};
use demonstrate::grammar::{self, Direction, SubTask};
use demonstrate::language::{parse_plan_text, render_plan_text, Attempt, Grip, PlanOutcome, PlanStep, TaskPlan};
use demonstrate::sim::{rollout, spawn_scene, CollisionEvent, ContState, DynamicsModel, Layout, SimConfig, Trajectory, Vec3};

fn vec3(r: f64) -> impl Strategy<Value = Vec3> {
    (-r..r, -r..r, -r..r).prop_map(|(x, y, z)| Vec3::new(x, y, z))
}

fn controls(n: usize, r: f64) -> impl Strategy<Value = Vec<Vec3>> {
    prop::collection::vec(vec3(r), n)
}

fn subtask() -> impl Strategy<Value = SubTask> {
    (0usize..40, 0usize..6, 0usize..4).prop_map(|(d, dir, k)| SubTask::new(d as f64 * 0.01, Direction::ALL[dir], k))
}

fn plan_step() -> impl Strategy<Value = PlanStep> {
    prop_oneof![
        subtask().prop_map(|s| PlanStep::move_to(s.to_string())),
        Just(PlanStep::Gripper { action: Grip::Open }),
        Just(PlanStep::Gripper { action: Grip::Close }),
    ]
}

fn straight(points: &[Vec3]) -> Trajectory {
    Trajectory {
        states: points.iter().map(|p| ContState::at_rest(*p)).collect(),
        controls: vec![Vec3::zeros(); points.len().saturating_sub(1)],
    }
}

fn episode(collision: bool, status: EpisodeStatus, has_plan: bool) -> EpisodeResult {
    let scene = spawn_scene(Layout::Cubes, 0, &SimConfig::default());
    let plan = TaskPlan {
        command: "stack all cubes".into(),
        steps: vec![PlanStep::move_to("0.12 meters above of object one")],
        attempt: 1,
    };
    let planning = if has_plan && status != EpisodeStatus::Refused {
        PlanOutcome::Accepted {
            plan,
            attempts: Vec::new(),
        }
    } else {
        PlanOutcome::Refused {
            attempts: vec![Attempt {
                attempt: 1,
                steps: Vec::new(),
                report: None,
                error: Some("refused".into()),
            }],
        }
    };
    EpisodeResult {
        command: "stack all cubes".into(),
        planning: Some(planning),
        status,
        failure: None,
        degenerate: false,
        frames: vec![scene],
        collisions: if collision {
            vec![CollisionRecord {
                sim_step: 1,
                plan_step: 0,
                event: CollisionEvent {
                    moving: None,
                    other: 0,
                    depth: 0.01,
                },
            }]
        } else {
            Vec::new()
        },
        solves: Vec::new(),
    }
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(64))]

    #[test]
    fn rollout_is_affine_in_the_controls(a in controls(20, 0.9), b in controls(20, 0.9), p0 in vec3(0.3)) {
        let dynamics = DynamicsModel::default();
        let x0 = ContState::at_rest(p0);
        let sum: Vec<Vec3> = a.iter().zip(&b).map(|(u, v)| u + v).collect();
        let ta = rollout(&x0, &a, &dynamics).unwrap();
        let tb = rollout(&ContState::at_rest(Vec3::zeros()), &b, &dynamics).unwrap();
        let ts = rollout(&x0, &sum, &dynamics).unwrap();
        for k in 0..ts.states.len() {
            prop_assert!((ts.states[k].pos - ta.states[k].pos - tb.states[k].pos).norm() < 1e-12);
            prop_assert!((ts.states[k].vel - ta.states[k].vel - tb.states[k].vel).norm() < 1e-12);
        }
    }

    #[test]
    fn rollout_rejects_out_of_bound_controls(mut u in controls(20, 1.0), j in 0usize..20, axis in 0usize..3) {
        let dynamics = DynamicsModel::default();
        u[j][axis] = 2.5;
        prop_assert!(rollout(&ContState::at_rest(Vec3::zeros()), &u, &dynamics).is_err());
    }

    #[test]
    fn grammar_render_parse_round_trip(st in subtask()) {
        let parsed = grammar::parse(&st.to_string()).unwrap();
        prop_assert_eq!(parsed.direction, st.direction);
        prop_assert_eq!(parsed.object, st.object);
        prop_assert!((parsed.distance - st.distance).abs() < 1e-9);
    }

    #[test]
    fn plan_text_round_trip(steps in prop::collection::vec(plan_step(), 1..12)) {
        prop_assert_eq!(parse_plan_text(&render_plan_text(&steps)).unwrap(), steps);
    }

    #[test]
    fn classification_follows_priority(
        collision in any::<bool>(),
        status in prop_oneof![Just(EpisodeStatus::Completed), Just(EpisodeStatus::Failed), Just(EpisodeStatus::Refused)],
        has_plan in any::<bool>(),
        plan_ok in any::<bool>(),
        success in any::<bool>(),
    ) {
        let ep = episode(collision, status, has_plan);
        let got = classify_episode(&ep, &|_| success, &|_| plan_ok);
        let planned = has_plan && status != EpisodeStatus::Refused;
        let expected = if collision {
            Category::CO
        } else if !planned || !plan_ok {
            Category::TP
        } else if status == EpisodeStatus::Failed || !success {
            Category::OD
        } else {
            Category::SR
        };
        prop_assert_eq!(got, expected);
    }

    #[test]
    fn report_percentages_sum_to_100(cats in prop::collection::vec(0usize..4, 1..60)) {
        let all = [Category::SR, Category::TP, Category::OD, Category::CO];
        let records: Vec<RunRecord> = cats
            .iter()
            .enumerate()
            .map(|(i, c)| RunRecord {
                run: i,
                seed: i as u64,
                category: all[*c],
                status: EpisodeStatus::Completed,
                collisions: 0,
                episode_ref: i,
            })
            .collect();
        let r = BenchmarkReport::from_records(BenchTask::Stack, records).unwrap();
        prop_assert!((r.sr + r.tp + r.od + r.co - 100.0).abs() < 1e-9);
    }

    #[test]
    fn post_check_is_monotone_in_the_samples(
        center in vec3(0.2),
        half in (0.02..0.1f64, 0.02..0.1f64, 0.02..0.1f64),
        safe_pts in prop::collection::vec(vec3(0.4), 2..20),
        unsafe_pts in prop::collection::vec(vec3(0.4), 2..20),
        extra in prop::collection::vec(vec3(0.4), 2..10),
    ) {
        let rho = ConstraintParams::axis_box(center, Vec3::new(half.0, half.1, half.2));
        let safe = vec![straight(&safe_pts)];
        let unsafe_: Vec<Trajectory> = unsafe_pts.chunks(2).map(straight).collect();
        let base = post_check(&rho, &safe, &unsafe_);

        let mut more_safe = safe.clone();
        more_safe.push(straight(&extra));
        prop_assert!(post_check(&rho, &more_safe, &unsafe_).safe_violations >= base.safe_violations);

        let mut more_unsafe = unsafe_.clone();
        more_unsafe.push(straight(&extra));
        prop_assert!(post_check(&rho, &safe, &more_unsafe).unsafe_misses >= base.unsafe_misses);
    }

    #[test]
    fn coverage_is_homogeneous_and_members_are_cheap(
        rows in prop::collection::vec(prop::collection::vec(-1.0..1.0f64, 8), 3..6),
        pick in 0usize..3,
        alpha in 0.1..10.0f64,
    ) {
        let t = rows.len();
        let e = DMatrix::from_fn(t, 8, |i, j| rows[i][j]);
        let gate = CoverageGate::new(&e).unwrap();
        let member = &rows[pick];
        let c = gate.evaluate(member).unwrap();
        // the minimum-norm combination is never longer than the indicator vector
        prop_assert!(c.coverage <= 1.0 + 1e-8);
        prop_assert!(c.residual < 1e-8);
        let scaled: Vec<f64> = member.iter().map(|x| x * alpha).collect();
        let cs = gate.evaluate(&scaled).unwrap();
        prop_assert!((cs.coverage - alpha * c.coverage).abs() <= 1e-8 * (1.0 + alpha));
    }

    #[test]
    fn config_toml_round_trip(
        threshold in 0.1..10.0f64,
        z in 1usize..40,
        replans in 1usize..10,
        period in 1usize..10,
        runs in 1usize..100,
    ) {
        let mut cfg = Config::default();
        cfg.validation.threshold = threshold;
        cfg.embedding.z = z;
        cfg.validation.max_replans = replans;
        cfg.execution.replan_period = period;
        cfg.benchmark.runs = runs;
        let back = Config::from_toml_str(&cfg.to_toml_string().unwrap()).unwrap();
        prop_assert_eq!(back.hash(), cfg.hash());
        prop_assert_eq!(back, cfg);
    }

    #[test]
    fn spawned_scenes_are_seed_deterministic(seed in any::<u64>()) {
        let cfg = SimConfig::default();
        prop_assert_eq!(spawn_scene(Layout::Cubes, seed, &cfg), spawn_scene(Layout::Cubes, seed, &cfg));
    }
}
