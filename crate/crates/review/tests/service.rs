use std::collections::{BTreeMap, HashSet};
use std::path::{Path, PathBuf};

use broadsound::audio::{write_wav, Pcm};
use broadsound::dataset::{DatasetManifest, SoundRecord};
use broadsound::evaluation::{write_queue, ReviewItem};
use broadsound::{Level, Taxonomy};
use broadsound_review::{Service, ServiceConfig};
use serde_json::{json, Value};
use tokio::sync::oneshot;
use tokio::task::JoinHandle;

struct Fixture {
    dir: tempfile::TempDir,
    config: ServiceConfig,
}

/// Queue of `n` items cycling through second-level classes; item 0 has audio.
fn fixture(n: usize) -> Fixture {
    let dir = tempfile::tempdir().unwrap();
    let tax = Taxonomy::broad_sound();
    let codes: Vec<String> = tax.codes(Level::Second).map(str::to_string).collect();

    let samples: Vec<f32> = (0..4410).map(|i| ((i as f32) * 0.05).sin() * 0.5).collect();
    write_wav(dir.path().join("s0.wav"), &Pcm::mono(44100, samples)).unwrap();

    let mut records = Vec::new();
    let mut queue = Vec::new();
    for i in 0..n {
        let truth = &codes[i % codes.len()];
        let predicted = &codes[(i + 1) % codes.len()];
        let mut r = SoundRecord::new(format!("s{i}"), truth.clone(), 10.0);
        if i == 0 {
            r.audio_path = Some("s0.wav".into());
        }
        records.push(r);
        queue.push(ReviewItem {
            sound_id: format!("s{i}"),
            true_code: truth.clone(),
            predicted_code: predicted.clone(),
            audio_path: None,
        });
    }
    // one extra sound that is in the manifest but not the queue
    records.push(SoundRecord::new("extra", codes[0].clone(), 3.0));

    let manifest = dir.path().join("manifest.jsonl");
    DatasetManifest::new(records, tax.version()).write_jsonl(&manifest).unwrap();
    let queue_path = dir.path().join("queue.jsonl");
    write_queue(&queue_path, &queue).unwrap();
    let config = ServiceConfig {
        queue: queue_path,
        manifest,
        store: dir.path().join("store.jsonl"),
        bind: "127.0.0.1:0".into(),
        taxonomy: tax,
        ui_dir: None,
    };
    Fixture { dir, config }
}

struct Running {
    base: String,
    stop: oneshot::Sender<()>,
    task: JoinHandle<()>,
}

impl Running {
    async fn start(config: ServiceConfig) -> Running {
        let service = Service::bind(config).await.unwrap();
        let base = format!("http://{}", service.local_addr().unwrap());
        let (stop, rx) = oneshot::channel::<()>();
        let task = tokio::spawn(async move {
            service
                .run(async {
                    let _ = rx.await;
                })
                .await
                .unwrap();
        });
        Running { base, stop, task }
    }

    async fn stop(self) {
        self.stop.send(()).unwrap();
        self.task.await.unwrap();
    }

    fn url(&self, path: &str) -> String {
        format!("{}{}", self.base, path)
    }
}

async fn get_json(url: &str) -> Value {
    let r = reqwest::get(url).await.unwrap();
    assert!(r.status().is_success(), "{url}: {}", r.status());
    r.json().await.unwrap()
}

async fn post(url: &str, body: Value) -> reqwest::Response {
    reqwest::Client::new().post(url).json(&body).send().await.unwrap()
}

#[tokio::test]
async fn empty_queue_lists_nothing() {
    let f = fixture(0);
    let s = Running::start(f.config.clone()).await;
    let page = get_json(&s.url("/errors")).await;
    assert_eq!(page["total"], 0);
    assert_eq!(page["items"], json!([]));
    s.stop().await;
}

#[tokio::test]
async fn pagination_covers_queue_exactly_once() {
    let f = fixture(220);
    let s = Running::start(f.config.clone()).await;
    let mut seen = Vec::new();
    let mut offset = 0;
    loop {
        let page = get_json(&s.url(&format!("/errors?offset={offset}&limit=32"))).await;
        assert_eq!(page["total"], 220);
        let items = page["items"].as_array().unwrap();
        if items.is_empty() {
            break;
        }
        seen.extend(items.iter().map(|i| i["sound_id"].as_str().unwrap().to_string()));
        offset += items.len();
    }
    assert_eq!(seen.len(), 220);
    assert_eq!(seen.iter().collect::<HashSet<_>>().len(), 220);

    let first = get_json(&s.url("/errors?limit=1")).await;
    let item = &first["items"][0];
    assert_eq!(item["true"]["code"], "solo-percussion");
    assert_eq!(item["true"]["top_code"], "music");
    assert_eq!(item["predicted"]["code"], "solo-instrument");
    assert_eq!(item["audio_url"], "/audio/s0");

    let r = reqwest::get(s.url("/errors?limit=0")).await.unwrap();
    assert_eq!(r.status(), 422);
    s.stop().await;
}

#[tokio::test]
async fn annotations_survive_restart_and_latest_wins() {
    let f = fixture(5);
    let s = Running::start(f.config.clone()).await;
    let url = s.url("/errors/s1/annotation");
    let r1 = post(&url, json!({"category": "low_quality", "reviewer": "ana", "timestamp": "2024-01-01T00:00:00Z"})).await;
    assert_eq!(r1.status(), 201);
    let rev1 = r1.json::<Value>().await.unwrap()["revision"].as_u64().unwrap();
    let r2 = post(&url, json!({"category": "common_source", "note": "two dogs", "reviewer": "ana", "timestamp": "2024-01-01T00:05:00Z"})).await;
    let rev2 = r2.json::<Value>().await.unwrap()["revision"].as_u64().unwrap();
    assert!(rev2 > rev1);
    s.stop().await;

    let s = Running::start(f.config.clone()).await;
    let got = get_json(&s.url("/errors/s1/annotation")).await;
    let anns = got["annotations"].as_array().unwrap();
    assert_eq!(anns.len(), 1);
    assert_eq!(anns[0]["category"], "common_source");
    assert_eq!(anns[0]["note"], "two dogs");
    assert_eq!(anns[0]["rev"], rev2);

    // also visible inline in the queue listing
    let page = get_json(&s.url("/errors?offset=1&limit=1")).await;
    assert_eq!(page["items"][0]["annotations"][0]["category"], "common_source");
    s.stop().await;
}

#[tokio::test]
async fn invalid_annotations_are_rejected() {
    let f = fixture(3);
    let s = Running::start(f.config.clone()).await;
    let bad_category = post(&s.url("/errors/s0/annotation"), json!({"category": "boring", "reviewer": "ana"})).await;
    assert_eq!(bad_category.status(), 422);
    let unknown = post(&s.url("/errors/nope/annotation"), json!({"category": "low_quality", "reviewer": "ana"})).await;
    assert_eq!(unknown.status(), 404);
    let not_queued = post(&s.url("/errors/extra/annotation"), json!({"category": "low_quality", "reviewer": "ana"})).await;
    assert_eq!(not_queued.status(), 404);
    let malformed = reqwest::Client::new()
        .post(s.url("/errors/s0/annotation"))
        .body("{")
        .send()
        .await
        .unwrap();
    assert_eq!(malformed.status(), 400);
    let report = get_json(&s.url("/report/errors")).await;
    assert_eq!(report["total"], 0);
    s.stop().await;
    assert_eq!(std::fs::read_to_string(&f.config.store).unwrap(), "");
}

#[tokio::test]
async fn report_matches_posted_categories() {
    // canonical 220-item distribution
    let expected: BTreeMap<&str, usize> = [
        ("acoustic_ambiguity", 60),
        ("between_classes_diff_top", 57),
        ("between_classes_same_top", 32),
        ("common_source", 18),
        ("prominence_one_source", 23),
        ("single_source_evolution", 3),
        ("low_quality", 3),
        ("uncommon_other", 24),
    ]
    .into_iter()
    .collect();
    let f = fixture(220);
    let s = Running::start(f.config.clone()).await;
    let mut i = 0;
    for (category, n) in &expected {
        for _ in 0..*n {
            let r = post(&s.url(&format!("/errors/s{i}/annotation")), json!({"category": category, "reviewer": "ana"})).await;
            assert_eq!(r.status(), 201);
            i += 1;
        }
    }
    // a second reviewer disagreeing on one sound does not change the majority
    post(&s.url("/errors/s0/annotation"), json!({"category": "low_quality", "reviewer": "bo"})).await;
    let report = get_json(&s.url("/report/errors")).await;
    assert_eq!(report["total"], 220);
    for (category, n) in &expected {
        assert_eq!(report["counts"][category], *n as u64, "{category}");
    }
    let bo = get_json(&s.url("/report/errors?reviewer=bo")).await;
    assert_eq!(bo["total"], 1);
    assert_eq!(bo["view"], "reviewer:bo");
    s.stop().await;
}

#[tokio::test]
async fn class_annotations_round_trip() {
    let f = fixture(2);
    let s = Running::start(f.config.clone()).await;
    let ok = post(
        &s.url("/annotations"),
        json!({"sound_id": "extra", "class_code": "fx-a", "confidence": "medium", "annotator": "cy"}),
    )
    .await;
    assert_eq!(ok.status(), 201);
    let got = get_json(&s.url("/annotations/extra")).await;
    assert_eq!(got["annotations"][0]["class_code"], "animals");
    assert_eq!(got["annotations"][0]["confidence"], "medium");

    let top = post(&s.url("/annotations"), json!({"sound_id": "extra", "class_code": "music", "confidence": "low", "annotator": "cy"})).await;
    assert_eq!(top.status(), 422);
    let conf = post(&s.url("/annotations"), json!({"sound_id": "extra", "class_code": "animals", "confidence": "sure", "annotator": "cy"})).await;
    assert_eq!(conf.status(), 422);
    let missing = reqwest::get(s.url("/annotations/ghost")).await.unwrap();
    assert_eq!(missing.status(), 404);
    s.stop().await;
}

#[tokio::test]
async fn taxonomy_and_enums() {
    let f = fixture(1);
    let s = Running::start(f.config.clone()).await;
    let tax = get_json(&s.url("/taxonomy")).await;
    let classes = tax["classes"].as_array().unwrap();
    assert_eq!(classes.len(), 5);
    let leaves: usize = classes.iter().map(|c| c["children"].as_array().unwrap().len()).sum();
    assert_eq!(leaves, 23);
    let enums = get_json(&s.url("/enums")).await;
    assert_eq!(enums["error_categories"].as_array().unwrap().len(), 8);
    assert_eq!(enums["confidence_levels"], json!(["low", "medium", "high"]));
    s.stop().await;
}

fn file_bytes(dir: &Path, name: &str) -> Vec<u8> {
    std::fs::read(dir.join(name)).unwrap()
}

#[tokio::test]
async fn audio_ranges_match_file() {
    let f = fixture(2);
    let on_disk = file_bytes(f.dir.path(), "s0.wav");
    let len = on_disk.len();
    let s = Running::start(f.config.clone()).await;
    let client = reqwest::Client::new();

    let full = client.get(s.url("/audio/s0")).send().await.unwrap();
    assert_eq!(full.status(), 200);
    assert_eq!(full.headers()["content-type"], "audio/wav");
    assert_eq!(full.headers()["accept-ranges"], "bytes");
    assert_eq!(full.bytes().await.unwrap().as_ref(), on_disk.as_slice());

    for (spec, lo, hi) in [
        ("bytes=0-43".to_string(), 0, 43),
        (format!("bytes={}-", len - 100), len - 100, len - 1),
        ("bytes=-10".to_string(), len - 10, len - 1),
        (format!("bytes=1000-{}", len + 50), 1000, len - 1),
    ] {
        let r = client.get(s.url("/audio/s0")).header("range", &spec).send().await.unwrap();
        assert_eq!(r.status(), 206, "{spec}");
        assert_eq!(r.headers()["content-range"], format!("bytes {lo}-{hi}/{len}").as_str());
        assert_eq!(r.bytes().await.unwrap().as_ref(), &on_disk[lo..=hi], "{spec}");
    }

    let r = client
        .get(s.url("/audio/s0"))
        .header("range", format!("bytes={len}-"))
        .send()
        .await
        .unwrap();
    assert_eq!(r.status(), 416);
    assert_eq!(r.headers()["content-range"], format!("bytes */{len}").as_str());

    let none = client.get(s.url("/audio/s1")).send().await.unwrap();
    assert_eq!(none.status(), 404);
    s.stop().await;
}

#[tokio::test]
async fn startup_errors() {
    let f = fixture(2);
    // corrupt store: refuses to start and names the line
    std::fs::write(&f.config.store, "{\"kind\":\"error\"}\n").unwrap();
    let err = Service::bind(f.config.clone()).await.err().unwrap();
    assert!(err.to_string().contains("line 1"), "{err}");
    std::fs::remove_file(&f.config.store).unwrap();

    let mut missing = f.config.clone();
    missing.queue = PathBuf::from("/nonexistent/queue.jsonl");
    assert!(Service::bind(missing).await.is_err());

    let held = Service::bind(f.config.clone()).await.unwrap();
    let mut clash = f.config.clone();
    clash.bind = held.local_addr().unwrap().to_string();
    let err = Service::bind(clash).await.err().unwrap();
    assert!(err.to_string().starts_with("cannot bind"), "{err}");
}
