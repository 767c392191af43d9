use std::net::SocketAddr;
use std::path::PathBuf;
use std::thread;
use std::time::Duration;

use fgboot::bootstrap::{DecisionLog, LabelRequest, Labeler, RoundContext, SharedDecisionLog, Verdict};
use fgboot::embednet::Sample;
use fgboot::labelsvc::{HumanLabeler, LabelService, LabelTask, RoundInfo};
use reqwest::blocking::Client;
use reqwest::StatusCode;
use serde_json::{json, Value};

const N_TASKS: usize = 12;

fn fixture(round: usize) -> RoundContext {
    let exemplars: Vec<Vec<Sample>> = (0..3)
        .map(|c| (0..5).map(|j| Sample::new(format!("ex-{c}-{j}"), vec![c as f64, j as f64], Some(c))).collect())
        .collect();
    let requests = (0..N_TASKS)
        .map(|i| LabelRequest {
            candidate: Sample::unlabeled(format!("cand-{i:02}"), vec![i as f64, 0.5]),
            assigned: i % 3,
            // cand-11 is the most confident
            confidence: 0.6 + 0.03 * i as f64,
            exemplars: exemplars[i % 3].clone(),
        })
        .collect();
    RoundContext {
        round,
        requests,
        category_names: vec!["rose".into(), "tulip".into(), "daisy".into()],
        category_exemplars: exemplars,
    }
}

struct Server {
    base: String,
    svc: LabelService,
    log: SharedDecisionLog,
    client: Client,
}

fn start(lease: Duration, static_dir: Option<PathBuf>) -> Server {
    let log = DecisionLog::in_memory().shared();
    let svc = LabelService::new(log.clone(), lease);
    let router = svc.router(static_dir);
    let (tx, rx) = std::sync::mpsc::channel::<SocketAddr>();
    thread::spawn(move || {
        let rt = tokio::runtime::Runtime::new().unwrap();
        rt.block_on(async move {
            let listener = tokio::net::TcpListener::bind("127.0.0.1:0").await.unwrap();
            tx.send(listener.local_addr().unwrap()).unwrap();
            axum::serve(listener, router).await.unwrap();
        });
    });
    let addr = rx.recv().unwrap();
    Server { base: format!("http://{addr}"), svc, log, client: Client::new() }
}

impl Server {
    fn get(&self, path: &str) -> reqwest::blocking::Response {
        self.client.get(format!("{}{path}", self.base)).send().unwrap()
    }

    fn next(&self, labeler: &str) -> Option<LabelTask> {
        let r = self.get(&format!("/api/tasks/next?labeler={labeler}"));
        match r.status() {
            StatusCode::OK => Some(r.json().unwrap()),
            StatusCode::NO_CONTENT => None,
            s => panic!("unexpected status {s}"),
        }
    }

    fn decide(&self, task: &str, body: Value) -> (StatusCode, Value) {
        let r = self.client.post(format!("{}/api/tasks/{task}/decision", self.base)).json(&body).send().unwrap();
        let status = r.status();
        (status, r.json().unwrap_or(Value::Null))
    }

    fn round(&self) -> RoundInfo {
        let r = self.get("/api/round");
        assert_eq!(r.status(), StatusCode::OK);
        r.json().unwrap()
    }
}

#[test]
fn round_metadata_tracks_progress() {
    let s = start(Duration::from_secs(600), None);
    assert_eq!(s.get("/api/round").status(), StatusCode::CONFLICT);
    assert_eq!(s.get("/api/tasks/next?labeler=a").status(), StatusCode::CONFLICT);

    s.svc.publish(fixture(1)).unwrap();
    let info = s.round();
    assert_eq!((info.round, info.total, info.pending, info.labeled), (1, N_TASKS, N_TASKS, 0));
    assert_eq!(info.category_names, vec!["rose", "tulip", "daisy"]);

    for _ in 0..5 {
        let t = s.next("a").unwrap();
        assert_eq!(s.decide(&t.task_id, json!({"verdict": "tp", "labeler": "a"})).0, StatusCode::OK);
    }
    let info = s.round();
    assert_eq!((info.pending, info.labeled), (7, 5));

    s.svc.close_round();
    assert_eq!(s.get("/api/round").status(), StatusCode::CONFLICT);
}

#[test]
fn leases_hand_out_disjoint_tasks_by_confidence() {
    let s = start(Duration::from_secs(600), None);
    s.svc.publish(fixture(1)).unwrap();
    assert_eq!(s.get("/api/tasks/next").status(), StatusCode::BAD_REQUEST);
    assert_eq!(s.get("/api/tasks/next?labeler=").status(), StatusCode::BAD_REQUEST);

    let mut seen = Vec::new();
    let mut last_conf = f64::INFINITY;
    for i in 0..N_TASKS {
        let who = if i % 2 == 0 { "alice" } else { "bob" };
        let t = s.next(who).unwrap();
        assert!(t.confidence <= last_conf);
        last_conf = t.confidence;
        assert!(!seen.contains(&t.task_id));
        assert_eq!(t.round, 1);
        assert_eq!(t.exemplar_ids.len(), 5);
        assert!(t.exemplar_ids.iter().all(|e| e.starts_with(&format!("ex-{}-", t.assigned_category))));
        seen.push(t.task_id);
    }
    assert_eq!(seen[0], "cand-11");
    assert_eq!(s.round().leased, N_TASKS);
    assert!(s.next("carol").is_none());
}

#[test]
fn expired_lease_is_served_again() {
    let s = start(Duration::from_millis(200), None);
    s.svc.publish(fixture(1)).unwrap();
    let first = s.next("alice").unwrap();
    let second = s.next("bob").unwrap();
    assert_ne!(first.task_id, second.task_id);
    thread::sleep(Duration::from_millis(350));
    let again = s.next("bob").unwrap();
    assert_eq!(again.task_id, first.task_id);
}

#[test]
fn decisions_are_recorded_once() {
    let s = start(Duration::from_secs(600), None);
    s.svc.publish(fixture(2)).unwrap();
    let t = s.next("alice").unwrap();

    let (status, _) = s.decide(&t.task_id, json!({"verdict": "tp", "labeler": "bob"}));
    assert_eq!(status, StatusCode::CONFLICT, "task leased to alice");

    let (status, body) = s.decide(&t.task_id, json!({"verdict": "fp", "labeler": "alice"}));
    assert_eq!(status, StatusCode::OK);
    assert_eq!(body["verdict"], "fp");

    let (status, body) = s.decide(&t.task_id, json!({"verdict": "tp", "labeler": "alice"}));
    assert_eq!(status, StatusCode::CONFLICT);
    assert_eq!(body["verdict"], "fp");

    let log = s.log.lock().unwrap();
    assert_eq!(log.records().len(), 1);
    let rec = log.get(2, &t.task_id).unwrap();
    assert_eq!(rec.decision, Verdict::FalsePositive);
    assert_eq!(rec.assigned_category, t.assigned_category);
    assert_eq!(rec.labeler, "alice");
    drop(log);

    assert_eq!(s.decide("nope", json!({"verdict": "tp", "labeler": "a"})).0, StatusCode::NOT_FOUND);
    let other = s.next("alice").unwrap();
    assert_eq!(s.decide(&other.task_id, json!({"verdict": "maybe", "labeler": "alice"})).0, StatusCode::BAD_REQUEST);
    assert_eq!(s.decide(&other.task_id, json!({"verdict": "tp"})).0, StatusCode::BAD_REQUEST);
    let r = s
        .client
        .post(format!("{}/api/tasks/{}/decision", s.base, other.task_id))
        .body("not json")
        .send()
        .unwrap();
    assert_eq!(r.status(), StatusCode::BAD_REQUEST);
    assert_eq!(s.round().labeled, 1);
}

#[test]
fn exemplars_by_category() {
    let s = start(Duration::from_secs(600), None);
    s.svc.publish(fixture(1)).unwrap();
    let r = s.get("/api/categories/0/exemplars");
    assert_eq!(r.status(), StatusCode::OK);
    let body: Value = r.json().unwrap();
    assert_eq!(body["name"], "rose");
    let ex = body["exemplars"].as_array().unwrap();
    assert_eq!(ex.len(), 5);
    assert!(ex.iter().all(|e| e["id"].as_str().unwrap().starts_with("ex-0-")));
    assert_eq!(s.get("/api/categories/3/exemplars").status(), StatusCode::NOT_FOUND);
    assert_eq!(s.get("/api/categories/x/exemplars").status(), StatusCode::NOT_FOUND);
}

#[test]
fn human_labeler_returns_once_queue_drains() {
    let s = start(Duration::from_secs(600), None);
    let ctx = fixture(3);
    let mut labeler = HumanLabeler::new(s.svc.clone());
    let log = s.log.clone();
    let ctx2 = ctx.clone();
    let worker = thread::spawn(move || labeler.label(&ctx2, &log));

    let mut decided = 0;
    while decided < N_TASKS {
        let r = s.get("/api/tasks/next?labeler=h");
        if r.status() == StatusCode::CONFLICT {
            thread::sleep(Duration::from_millis(10));
            continue;
        }
        let t: LabelTask = r.json().unwrap();
        let verdict = if t.assigned_category == 0 { "fp" } else { "tp" };
        assert_eq!(s.decide(&t.task_id, json!({"verdict": verdict, "labeler": "h"})).0, StatusCode::OK);
        decided += 1;
    }
    worker.join().unwrap().unwrap();
    assert_eq!(s.get("/api/round").status(), StatusCode::CONFLICT);

    let log = s.log.lock().unwrap();
    for req in &ctx.requests {
        let rec = log.get(3, &req.candidate.id).unwrap();
        let want = if req.assigned == 0 { Verdict::FalsePositive } else { Verdict::TruePositive };
        assert_eq!(rec.decision, want);
    }
    assert_eq!(log.records().len(), N_TASKS);
}

#[test]
fn republished_round_counts_logged_decisions() {
    let s = start(Duration::from_secs(600), None);
    s.svc.publish(fixture(1)).unwrap();
    for _ in 0..4 {
        let t = s.next("a").unwrap();
        s.decide(&t.task_id, json!({"verdict": "tp", "labeler": "a"}));
    }
    s.svc.close_round();
    s.svc.publish(fixture(1)).unwrap();
    assert_eq!(s.round().labeled, 4);
}

#[test]
fn static_bundle_is_served() {
    let dir = tempfile::tempdir().unwrap();
    std::fs::write(dir.path().join("index.html"), "<html>label</html>").unwrap();
    let s = start(Duration::from_secs(600), Some(dir.path().to_path_buf()));
    let r = s.get("/");
    assert_eq!(r.status(), StatusCode::OK);
    assert!(r.text().unwrap().contains("label"));
    assert_eq!(s.get("/api/round").status(), StatusCode::CONFLICT);
}
