//! End-to-end behaviour of the offline and online stages on small inputs.

use std::io::{BufRead, BufReader, Read, Write};
use std::net::TcpListener;
use std::sync::{Arc, Mutex};

use nalgebra::DMatrix;

use demonstrate::benchmark::{run_benchmark, BenchTask, Category};
use demonstrate::config::Config;
use demonstrate::demos::{generate_demoset, load_demoset, save_demoset, DemoConfig, DemoSet};
use demonstrate::embedding::{CoverageGate, EmbeddingProvider, MockEmbedder};
use demonstrate::execute::{EpisodeStatus, Pipeline};
use demonstrate::grammar::{Direction, SubTask};
use demonstrate::language::{plan_with_replanning, LlmHttpPlanner, PlanRequest, Planner, ScriptedPlanner};
use demonstrate::model::LearnedModel;
use demonstrate::sim::{spawn_scene, Layout};
use demonstrate::training::train_model;
use demonstrate::Error;

fn small_config() -> Config {
    let mut cfg = Config::default();
    cfg.embedding.z = 5;
    cfg.demos.tasks = 12;
    cfg.demos.per_task = 4;
    cfg
}

fn small_set(cfg: &Config) -> DemoSet {
    generate_demoset(&cfg.oracle(), &cfg.demos, 5).unwrap()
}

fn gate_over(dirs: &[Direction], objects: &[usize]) -> CoverageGate {
    let mut texts = Vec::new();
    for d in [0.04, 0.06, 0.09, 0.12] {
        for dir in dirs {
            for k in objects {
                texts.push(SubTask::new(d, *dir, *k).to_string());
            }
        }
    }
    let rows: Vec<Vec<f64>> = texts.iter().map(|t| MockEmbedder::embed_text(t)).collect();
    CoverageGate::new(&DMatrix::from_fn(rows.len(), rows[0].len(), |i, j| rows[i][j])).unwrap()
}

/// Gate over every description the scripted planner emits.
fn scripted_gate() -> CoverageGate {
    gate_over(&Direction::ALL, &[0, 1, 2, 3])
}

/// Gate with no demonstrations below anything or relative to object two.
fn narrow_gate() -> CoverageGate {
    gate_over(&Direction::ALL[..5], &[0, 2, 3])
}

const UNDEMONSTRATED: &str = "0.10 meters below of object two";

#[test]
fn model_file_round_trip_is_byte_identical() {
    let cfg = small_config();
    let set = small_set(&cfg);
    let model = train_model(&set, &MockEmbedder, &cfg, "pipeline-test").unwrap().model;
    let dir = tempfile::tempdir().unwrap();
    let path = dir.path().join("model.bin");
    model.save(&path).unwrap();
    let first = std::fs::read(&path).unwrap();
    let loaded = LearnedModel::load(&path).unwrap();
    assert_eq!(loaded, model);
    assert_eq!(loaded.to_bytes().unwrap(), first);
    assert_eq!(&first[..8], b"DMST0001");

    let mut corrupt = first.clone();
    corrupt[0] = b'X';
    assert!(LearnedModel::from_bytes(&corrupt).is_err());
    assert!(LearnedModel::from_bytes(&first[..first.len() - 3]).is_err());

    // every demonstrated description passes its own gate
    let gate = loaded.coverage_gate().unwrap();
    for text in &loaded.example_texts {
        let c = gate.evaluate(&MockEmbedder.embed_one(text).unwrap().values).unwrap();
        assert!(c.coverage <= cfg.validation.threshold, "{text}: {}", c.coverage);
    }
}

#[test]
fn demo_file_round_trip_and_empty_input() {
    let cfg = small_config();
    let set = small_set(&cfg);
    let dir = tempfile::tempdir().unwrap();
    let path = dir.path().join("demos.jsonl");
    save_demoset(&set, &path).unwrap();
    assert_eq!(load_demoset(&path).unwrap(), set);

    let empty = dir.path().join("empty.jsonl");
    std::fs::write(&empty, "").unwrap();
    let loaded = load_demoset(&empty);
    assert!(loaded.is_err() || train_model(&loaded.unwrap(), &MockEmbedder, &cfg, "").is_err());
}

#[test]
fn training_rejects_too_many_components() {
    let mut cfg = small_config();
    let set = small_set(&cfg);
    cfg.embedding.z = 50;
    assert!(matches!(
        train_model(&set, &MockEmbedder, &cfg, ""),
        Err(Error::InvalidArgument(_))
    ));
}

#[test]
fn benchmark_is_deterministic_for_a_fixed_seed_list() {
    let cfg = Config::default();
    let oracle = cfg.oracle();
    let gate = scripted_gate();
    let pipe = Pipeline {
        planner: &ScriptedPlanner,
        designer: &oracle,
        embedder: &MockEmbedder,
        gate: &gate,
        sim: &cfg.sim,
        solver: &cfg.solver,
        validation: &cfg.validation,
        execution: &cfg.execution,
    };
    let (a, ea) = run_benchmark(BenchTask::Stack, 2, 3, &pipe, &oracle, &cfg).unwrap();
    let (b, _) = run_benchmark(BenchTask::Stack, 2, 3, &pipe, &oracle, &cfg).unwrap();
    assert_eq!(a, b);
    // with the true cost the scripted stack plan succeeds
    assert_eq!(a.sr, 100.0);
    assert!(a.records.iter().all(|r| r.category == Category::SR));
    assert!(ea.iter().all(|e| e.status == EpisodeStatus::Completed && e.frames.len() > 1));
}

#[test]
fn undemonstrated_move_is_refused_after_max_replans() {
    let cfg = Config::default();
    let oracle = cfg.oracle();
    let gate = narrow_gate();
    let pipe = Pipeline {
        planner: &ScriptedPlanner,
        designer: &oracle,
        embedder: &MockEmbedder,
        gate: &gate,
        sim: &cfg.sim,
        solver: &cfg.solver,
        validation: &cfg.validation,
        execution: &cfg.execution,
    };
    let scene = spawn_scene(Layout::Cubes, 1, &cfg.sim);
    let ep = pipe.run(&format!("move {UNDEMONSTRATED}"), &scene).unwrap();
    assert_eq!(ep.status, EpisodeStatus::Refused);
    let attempts = ep.planning.as_ref().unwrap().attempts();
    assert_eq!(attempts.len(), cfg.validation.max_replans);
    assert_eq!(ep.frames.len(), 1);
    assert!(pipe.run("   ", &scene).is_err());
    assert!(matches!(pipe.run("juggle the cubes", &scene), Err(Error::NoRule(_))));
}

/// A one-shot-per-connection chat completions stub; answers with the queued
/// replies in order (the last one repeats) and records request bodies.
fn mock_llm(replies: Vec<String>) -> (String, Arc<Mutex<Vec<serde_json::Value>>>) {
    let listener = TcpListener::bind("127.0.0.1:0").unwrap();
    let addr = listener.local_addr().unwrap();
    let seen = Arc::new(Mutex::new(Vec::new()));
    let log = seen.clone();
    std::thread::spawn(move || {
        let mut i = 0;
        for stream in listener.incoming() {
            let mut stream = stream.unwrap();
            let mut reader = BufReader::new(stream.try_clone().unwrap());
            let mut len = 0;
            loop {
                let mut line = String::new();
                reader.read_line(&mut line).unwrap();
                if line == "\r\n" || line.is_empty() {
                    break;
                }
                if let Some(v) = line.to_ascii_lowercase().strip_prefix("content-length:") {
                    len = v.trim().parse().unwrap();
                }
            }
            let mut body = vec![0; len];
            reader.read_exact(&mut body).unwrap();
            log.lock().unwrap().push(serde_json::from_slice(&body).unwrap());
            let content = &replies[i.min(replies.len() - 1)];
            i += 1;
            let payload = serde_json::json!({"choices": [{"message": {"role": "assistant", "content": content}}]}).to_string();
            write!(
                stream,
                "HTTP/1.1 200 OK\r\nContent-Type: application/json\r\nContent-Length: {}\r\nConnection: close\r\n\r\n{}",
                payload.len(),
                payload
            )
            .unwrap();
        }
    });
    (format!("http://{addr}"), seen)
}

fn llm(endpoint: String) -> LlmHttpPlanner {
    LlmHttpPlanner {
        endpoint,
        model: "stub".into(),
        temperature: 0.0,
        api_key: None,
        timeout: std::time::Duration::from_secs(10),
    }
}

#[test]
fn llm_planner_parses_completions() {
    let (url, seen) = mock_llm(vec!["move: 0.12 meters above of object one\ngripper: close\n".into()]);
    let scene = spawn_scene(Layout::Cubes, 2, &Default::default());
    let steps = llm(url).plan(&PlanRequest::new("pick up cube one", &scene)).unwrap();
    assert_eq!(steps.len(), 2);
    let body = &seen.lock().unwrap()[0];
    assert_eq!(body["model"], "stub");
    assert!(body["messages"][1]["content"].as_str().unwrap().contains("pick up cube one"));
}

#[test]
fn llm_replanning_feeds_back_rejected_steps() {
    let (url, seen) = mock_llm(vec![
        "Sure, here you go!".into(),
        format!("move: {UNDEMONSTRATED}\n"),
        "move: 0.12 meters above of object one\n".into(),
    ]);
    let cfg = Config::default();
    let scene = spawn_scene(Layout::Cubes, 2, &cfg.sim);
    let planner = llm(url);
    let out = plan_with_replanning("go near cube one", &scene, &planner, &narrow_gate(), &MockEmbedder, &cfg.validation).unwrap();
    let attempts = out.attempts();
    assert_eq!(attempts.len(), 3);
    assert!(attempts[0].error.is_some());
    assert!(!attempts[1].report.as_ref().unwrap().steps[0].passed);
    assert!(out.plan().is_some());
    let bodies = seen.lock().unwrap();
    let third = bodies[2]["messages"][1]["content"].as_str().unwrap();
    assert!(third.contains(UNDEMONSTRATED));
}

#[test]
fn llm_planner_reports_unreachable_endpoint() {
    let listener = TcpListener::bind("127.0.0.1:0").unwrap();
    let url = format!("http://{}", listener.local_addr().unwrap());
    drop(listener);
    let scene = spawn_scene(Layout::Cubes, 2, &Default::default());
    assert!(matches!(
        llm(url).plan(&PlanRequest::new("stack", &scene)),
        Err(Error::Planner(_))
    ));
}

#[test]
fn demo_config_defaults_are_the_training_protocol() {
    let d = DemoConfig::default();
    assert_eq!((d.tasks, d.per_task), (90, 20));
    assert_eq!(Config::default().embedding.z, 20);
    assert_eq!(Config::default().validation.threshold, 3.0);
    assert_eq!(Config::default().validation.max_replans, 5);
}
