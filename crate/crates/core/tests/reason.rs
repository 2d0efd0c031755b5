mod common;

use std::io::{BufRead, BufReader, Read, Write};
use std::net::TcpListener;
use std::path::PathBuf;
use std::sync::atomic::{AtomicUsize, Ordering};
use std::sync::Mutex;
use std::time::Duration;

use isrf_core::reason::{
    encode_texts, generate_descriptions, load_store, render_item_prompt, render_user_prompt, user_requests,
    EncoderClient, EntityInput, EntityRequest, EntityType, FileEncoder, FileReasoner, GenerateOptions, HttpReasoner,
    ReasonerClient, SemanticRecord, Stage, StageContext, StoredResponse, TextField,
};
use isrf_core::tensor::{EmbeddingMatrix, Space};
use isrf_core::{Error, Result};

fn golden(name: &str) -> PathBuf {
    PathBuf::from(env!("CARGO_MANIFEST_DIR"))
        .join("tests/golden")
        .join(name)
}

/// Compares against a stored prompt; `UPDATE_GOLDEN=1` rewrites it.
fn check_golden(name: &str, got: &str) {
    let path = golden(name);
    if std::env::var_os("UPDATE_GOLDEN").is_some() {
        std::fs::create_dir_all(path.parent().unwrap()).unwrap();
        std::fs::write(&path, got).unwrap();
    }
    let want = std::fs::read_to_string(&path).unwrap_or_else(|_| panic!("missing golden file {name}"));
    assert_eq!(got, want, "golden {name}");
}

fn shoe() -> Vec<(String, String)> {
    [
        ("title", "Trail Running Shoe"),
        ("brand", "Northpeak"),
        ("category", "Sports & Outdoors"),
    ]
    .into_iter()
    .map(|(k, v)| (k.to_string(), v.to_string()))
    .collect()
}

const POS: &str = "Light, grippy shoe for muddy trails.";
const NEG: &str = "Narrow toe box; not for road racing.";

fn fast() -> GenerateOptions {
    GenerateOptions {
        max_in_flight: 2,
        attempts: 3,
        base_delay: Duration::from_millis(1),
    }
}

#[test]
fn item_prompts_match_golden_files() {
    let ctx = StageContext {
        positive: Some(POS),
        negative: Some(NEG),
    };
    for stage in [Stage::Forward, Stage::Backward, Stage::Fuse] {
        let p = render_item_prompt(&shoe(), stage, ctx).unwrap();
        check_golden(&format!("item_{}.txt", stage.name()), &p);
    }
}

#[test]
fn user_prompts_match_golden_files() {
    let items = vec![
        "A waterproof hiking jacket.".to_string(),
        "Trekking poles with cork grips.".to_string(),
    ];
    let ctx = StageContext {
        positive: Some("Enjoys long hikes in wet weather."),
        negative: Some("Has little interest in indoor sports."),
    };
    for stage in [Stage::Forward, Stage::Backward, Stage::Fuse] {
        let p = render_user_prompt(&items, stage, ctx).unwrap();
        check_golden(&format!("user_{}.txt", stage.name()), &p);
    }
}

/// Replies with a tag and the prompt length; records every prompt.
#[derive(Default)]
struct Echo {
    prompts: Mutex<Vec<String>>,
}

impl ReasonerClient for Echo {
    fn complete(&self, prompt: &str) -> Result<String> {
        let mut seen = self.prompts.lock().unwrap();
        seen.push(prompt.to_string());
        Ok(format!("reply{}", prompt.len()))
    }
}

fn item_requests(n: usize) -> Vec<EntityRequest> {
    (0..n)
        .map(|i| EntityRequest {
            entity_type: EntityType::Item,
            index: i,
            input: EntityInput::Item {
                attributes: vec![("title".into(), format!("thing {i}"))],
            },
        })
        .collect()
}

#[test]
fn stages_chain_outputs() {
    let dir = tempfile::tempdir().unwrap();
    let echo = Echo::default();
    let report = generate_descriptions(&echo, &item_requests(1), dir.path().join("s.jsonl"), &fast()).unwrap();
    let prompts = echo.prompts.lock().unwrap().clone();
    assert_eq!(prompts.len(), 3);
    let r = &report.records[0];
    assert_eq!(r.positive, format!("reply{}", prompts[0].len()));
    assert!(prompts[1].contains(&r.positive));
    assert!(prompts[2].contains(&r.positive) && prompts[2].contains(&r.negative));
    assert_eq!(r.fused, format!("reply{}", prompts[2].len()));
}

#[test]
fn complete_entities_are_not_requested_again() {
    let dir = tempfile::tempdir().unwrap();
    let store = dir.path().join("s.jsonl");
    generate_descriptions(&Echo::default(), &item_requests(3), &store, &fast()).unwrap();
    let echo = Echo::default();
    let report = generate_descriptions(&echo, &item_requests(3), &store, &fast()).unwrap();
    assert!(echo.prompts.lock().unwrap().is_empty());
    assert_eq!((report.resumed, report.generated), (3, 0));
}

/// Echo that fails hard on entity `stop_at`.
struct Crashing {
    stop_at: String,
}

impl ReasonerClient for Crashing {
    fn complete(&self, prompt: &str) -> Result<String> {
        if prompt.contains(&self.stop_at) {
            return Err(Error::Format("simulated crash".into()));
        }
        Ok(format!("reply{}", prompt.len()))
    }
}

#[test]
fn resumed_run_equals_uninterrupted_run() {
    let dir = tempfile::tempdir().unwrap();
    let reqs = item_requests(6);
    let clean = dir.path().join("clean.jsonl");
    let straight = generate_descriptions(&Echo::default(), &reqs, &clean, &fast()).unwrap();

    let resumed = dir.path().join("resumed.jsonl");
    let crash = Crashing {
        stop_at: "thing 4".into(),
    };
    assert!(generate_descriptions(&crash, &reqs, &resumed, &fast()).is_err());
    let partial = load_store(&resumed).unwrap();
    assert_eq!(partial.len(), 4);
    let report = generate_descriptions(&Echo::default(), &reqs, &resumed, &fast()).unwrap();
    assert_eq!((report.resumed, report.generated), (4, 2));
    assert_eq!(report.records, straight.records);
}

/// Minimal HTTP server answering one request per connection from `replies`.
fn serve(replies: Vec<(u16, String)>) -> (String, std::thread::JoinHandle<usize>) {
    let listener = TcpListener::bind("127.0.0.1:0").unwrap();
    let url = format!("http://{}/v1/chat", listener.local_addr().unwrap());
    let handle = std::thread::spawn(move || {
        let mut served = 0;
        for (status, body) in replies {
            let (mut stream, _) = listener.accept().unwrap();
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
            let mut req = vec![0; len];
            reader.read_exact(&mut req).unwrap();
            let request: serde_json::Value = serde_json::from_slice(&req).unwrap();
            assert_eq!(request["messages"][0]["role"], "user");
            write!(
                stream,
                "HTTP/1.1 {status} X\r\nContent-Type: application/json\r\nContent-Length: {}\r\nConnection: close\r\n\r\n{body}",
                body.len()
            )
            .unwrap();
            served += 1;
        }
        served
    });
    (url, handle)
}

fn chat_reply(text: &str) -> String {
    serde_json::json!({"choices": [{"message": {"content": text}}]}).to_string()
}

#[test]
fn http_client_retries_server_errors() {
    let replies = vec![
        (500, "{}".to_string()),
        (200, chat_reply("pos")),
        (200, chat_reply("neg")),
        (200, chat_reply("fused")),
    ];
    let (url, server) = serve(replies);
    let client = HttpReasoner {
        url,
        model: "test".into(),
        token: None,
        timeout: Duration::from_secs(10),
    };
    let dir = tempfile::tempdir().unwrap();
    let opts = GenerateOptions {
        max_in_flight: 1,
        ..fast()
    };
    let report = generate_descriptions(&client, &item_requests(1), dir.path().join("s.jsonl"), &opts).unwrap();
    assert_eq!(server.join().unwrap(), 4);
    let r = &report.records[0];
    assert_eq!(
        (r.positive.as_str(), r.negative.as_str(), r.fused.as_str()),
        ("pos", "neg", "fused")
    );
    assert!(r.is_complete());
}

#[test]
fn exhausted_retries_mark_the_record() {
    let (url, server) = serve(vec![(503, "{}".into()), (503, "{}".into())]);
    let client = HttpReasoner {
        url,
        model: "test".into(),
        token: None,
        timeout: Duration::from_secs(10),
    };
    let dir = tempfile::tempdir().unwrap();
    let opts = GenerateOptions {
        max_in_flight: 1,
        attempts: 2,
        base_delay: Duration::from_millis(1),
    };
    let report = generate_descriptions(&client, &item_requests(1), dir.path().join("s.jsonl"), &opts).unwrap();
    assert_eq!(server.join().unwrap(), 2);
    assert!(!report.records[0].is_complete());
    assert!(report.records[0].error.as_deref().unwrap().starts_with("forward"));
}

#[test]
fn missing_file_responses_are_reported_as_gaps() {
    let reqs = item_requests(2);
    let EntityInput::Item { attributes } = &reqs[0].input else {
        unreachable!()
    };
    let forward = render_item_prompt(attributes, Stage::Forward, StageContext::default()).unwrap();
    let client = FileReasoner::new([StoredResponse {
        prompt: forward,
        response: "p".into(),
    }]);
    let dir = tempfile::tempdir().unwrap();
    let report = generate_descriptions(&client, &reqs, dir.path().join("s.jsonl"), &fast()).unwrap();
    assert_eq!(
        report.gaps,
        vec![
            ("item_0".to_string(), "backward".to_string()),
            ("item_1".to_string(), "forward".to_string())
        ]
    );
    assert!(report.records.is_empty());
}

fn record(i: usize, fused: &str) -> SemanticRecord {
    SemanticRecord {
        entity_type: EntityType::Item,
        index: i,
        positive: format!("p{i}"),
        negative: format!("n{i}"),
        fused: fused.into(),
        error: None,
    }
}

#[test]
fn user_requests_use_fused_item_texts() {
    let items: Vec<SemanticRecord> = (0..4).map(|i| record(i, &format!("item text {i}"))).collect();
    let reqs = user_requests(&[vec![0, 2, 3], vec![1, 1, 0]], &items, 10, 0).unwrap();
    let EntityInput::User { sampled_items } = &reqs[1].input else {
        unreachable!()
    };
    assert_eq!(sampled_items, &["item text 1", "item text 1", "item text 0"]);
    assert!(user_requests(&[vec![0, 9, 1]], &items, 10, 0).is_err());
}

#[test]
fn file_encoder_serves_rows() {
    let m = common::random_mat(&mut common::rng(48), 4, 8);
    let dir = tempfile::tempdir().unwrap();
    let path = dir.path().join("m.emb");
    EmbeddingMatrix::new(m.clone(), Space::Raw)
        .save(&path, isrf_core::tensor::Dtype::F64)
        .unwrap();
    let enc = FileEncoder::load(&path).unwrap();
    let recs: Vec<SemanticRecord> = (0..4).map(|i| record(i, "x")).collect();
    let out = encode_texts(&enc, &recs, TextField::Fused).unwrap();
    assert_eq!(out.values, m);
}

/// Letter counts for `a..=h`.
struct CharCount;

impl EncoderClient for CharCount {
    fn dim(&self) -> usize {
        8
    }

    fn encode(&self, _: usize, text: &str) -> Result<Vec<f64>> {
        Ok((b'a'..=b'h')
            .map(|c| text.bytes().filter(|&b| b == c).count() as f64)
            .collect())
    }
}

#[test]
fn encoder_rows_follow_texts() {
    let texts = ["abba", "head", "abba", "cafe fed"];
    let recs: Vec<SemanticRecord> = texts.iter().enumerate().map(|(i, t)| record(i, t)).collect();
    let out = encode_texts(&CharCount, &recs, TextField::Fused).unwrap().values;
    assert_eq!(out.row(0), out.row(2));
    assert_eq!(out.row(3).to_vec(), vec![1.0, 0.0, 1.0, 1.0, 2.0, 2.0, 0.0, 0.0]);
    let pos = encode_texts(&CharCount, &recs, TextField::Positive).unwrap().values;
    assert_eq!(pos.row(0).sum(), 0.0);

    let mut gap = recs.clone();
    gap[1].fused.clear();
    assert!(matches!(
        encode_texts(&CharCount, &gap, TextField::Fused),
        Err(Error::Gap { .. })
    ));
}

#[test]
fn concurrent_generation_keeps_request_order() {
    let counter = AtomicUsize::new(0);
    struct Counting<'a>(&'a AtomicUsize);
    impl ReasonerClient for Counting<'_> {
        fn complete(&self, prompt: &str) -> Result<String> {
            self.0.fetch_add(1, Ordering::SeqCst);
            Ok(format!("r{}", prompt.len()))
        }
    }
    let dir = tempfile::tempdir().unwrap();
    let store = dir.path().join("s.jsonl");
    let opts = GenerateOptions {
        max_in_flight: 4,
        ..fast()
    };
    generate_descriptions(&Counting(&counter), &item_requests(9), &store, &opts).unwrap();
    assert_eq!(counter.load(Ordering::SeqCst), 27);
    let lines: Vec<SemanticRecord> = std::fs::read_to_string(&store)
        .unwrap()
        .lines()
        .map(|l| serde_json::from_str(l).unwrap())
        .collect();
    assert!(lines.iter().map(|r| r.index).eq(0..9));
}
