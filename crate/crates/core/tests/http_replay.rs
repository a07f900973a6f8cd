//! A run against a local OpenAI-style server is journaled, then replayed
//! offline with identical results.

use std::io::{BufRead, BufReader, Read, Write};
use std::net::{TcpListener, TcpStream};
use std::sync::atomic::{AtomicBool, AtomicUsize, Ordering};
use std::sync::Arc;
use std::thread;

use contam_core::backend::{BackendSpec, HttpBackendConfig, ReplayIndex};
use contam_core::config::{BackendsConfig, DatasetEntry, DetectorsConfig, RunConfig};
use contam_core::dataset::Split;
use contam_core::detectors::{LocalOrderConfig, MinKConfig};
use contam_core::result::Outcome;
use contam_core::runner::{run_config, RunOptions};
use contam_core::synthetic;
use serde_json::{json, Value};

fn tokens(text: &str) -> Vec<String> {
    let mut out: Vec<String> = Vec::new();
    let mut prev_ws = true;
    for c in text.chars() {
        if !c.is_whitespace() && prev_ws && !out.is_empty() && !out.last().unwrap().trim().is_empty() {
            out.push(String::new());
        }
        if out.is_empty() {
            out.push(String::new());
        }
        out.last_mut().unwrap().push(c);
        prev_ws = c.is_whitespace();
    }
    out
}

fn reply(body: &Value) -> Value {
    let prompt = body["prompt"].as_str().unwrap_or_default();
    if body["echo"] == json!(true) {
        let toks = tokens(prompt);
        let lps: Vec<Value> = toks
            .iter()
            .enumerate()
            .map(|(i, t)| if i == 0 { Value::Null } else { json!(-((t.len() % 5) as f64) - 0.5) })
            .collect();
        json!({"choices": [{"text": prompt, "logprobs": {"tokens": toks, "token_logprobs": lps}, "finish_reason": "length"}]})
    } else {
        json!({"choices": [{"text": "The answer is (C)", "finish_reason": "stop"}]})
    }
}

fn handle(stream: TcpStream, hits: &AtomicUsize) {
    let mut reader = BufReader::new(stream.try_clone().unwrap());
    let mut len = 0;
    loop {
        let mut line = String::new();
        if reader.read_line(&mut line).unwrap_or(0) == 0 {
            return;
        }
        if line == "\r\n" {
            break;
        }
        if let Some(v) = line.to_ascii_lowercase().strip_prefix("content-length:") {
            len = v.trim().parse().unwrap();
        }
    }
    let mut body = vec![0; len];
    reader.read_exact(&mut body).unwrap();
    hits.fetch_add(1, Ordering::SeqCst);
    let out = reply(&serde_json::from_slice(&body).unwrap()).to_string();
    let mut stream = stream;
    write!(
        stream,
        "HTTP/1.1 200 OK\r\nContent-Type: application/json\r\nContent-Length: {}\r\nConnection: close\r\n\r\n{out}",
        out.len()
    )
    .unwrap();
}

#[test]
fn journaled_run_replays_offline() {
    let listener = TcpListener::bind("127.0.0.1:0").unwrap();
    let addr = listener.local_addr().unwrap();
    let hits = Arc::new(AtomicUsize::new(0));
    let stop = Arc::new(AtomicBool::new(false));
    let server = {
        let (hits, stop) = (hits.clone(), stop.clone());
        thread::spawn(move || {
            for stream in listener.incoming() {
                if stop.load(Ordering::SeqCst) {
                    break;
                }
                let hits = hits.clone();
                thread::spawn(move || handle(stream.unwrap(), &hits));
            }
        })
    };

    let dir = tempfile::tempdir().unwrap();
    let data = dir.path().join("toy.jsonl");
    synthetic::write_jsonl(&synthetic::word_problems("toy", Split::Test, 40, 1), &data).unwrap();
    let mut http = HttpBackendConfig::new(format!("http://{addr}/v1"), "local-model");
    http.retry.max_attempts = 1;
    let cfg = RunConfig {
        seed: 3,
        output_dir: None,
        workers: None,
        backends: BackendsConfig {
            subject: BackendSpec::Http(http),
            generator: None,
            judge: None,
        },
        datasets: vec![DatasetEntry {
            name: "toy".into(),
            split: Split::Test,
            path: Some(data),
            registry: None,
            description: Some("Toy word problems.".into()),
        }],
        detectors: DetectorsConfig {
            local_order: Some(LocalOrderConfig {
                sample_size: 12,
                ..Default::default()
            }),
            min_k: Some(MinKConfig {
                sample_size: 15,
                ..Default::default()
            }),
            ..Default::default()
        },
    };
    let recorded = run_config(
        &cfg,
        &RunOptions {
            output_dir: Some(dir.path().join("rec")),
            ..Default::default()
        },
    )
    .unwrap();
    assert_eq!(recorded.failures(), 0, "{:?}", recorded.results);
    assert_eq!(hits.load(Ordering::SeqCst), 27);
    for r in &recorded.results {
        assert!(matches!(r.outcome, Outcome::Completed { .. }));
        assert_eq!(r.model, "local-model");
    }

    // Shut the server down; any network access during replay now fails.
    stop.store(true, Ordering::SeqCst);
    let _ = TcpStream::connect(addr);
    server.join().unwrap();

    let journal = recorded.run_dir.join("journal.jsonl");
    let index = ReplayIndex::load(&journal).unwrap();
    assert_eq!(index.len(), 27);
    let replayed = run_config(
        &cfg,
        &RunOptions {
            output_dir: Some(dir.path().join("replay")),
            workers: Some(1),
            replay: Some(Arc::new(index)),
        },
    )
    .unwrap();
    assert_eq!(replayed.run_id, recorded.run_id);
    assert_eq!(replayed.results, recorded.results);
    assert!(!replayed.run_dir.join("journal.jsonl").exists());
}
