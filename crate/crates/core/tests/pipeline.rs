use std::collections::{BTreeMap, HashMap};
use std::fs;
use std::io::{Read, Write};
use std::net::TcpListener;
use std::path::{Path, PathBuf};
use std::time::Duration;

use medseg_core::dataset::{load_dataset, read_manifest, write_dataset, ManifestRecord};
use medseg_core::pipeline::*;
use medseg_core::protocol::{count_seg_slots, validate_sample};
use medseg_core::synth::{generate_dataset, SynthConfig};
use medseg_core::Error;
use proptest::prelude::*;

fn make_input(dir: &Path, n: usize, seed: u64) {
    let samples = generate_dataset(&SynthConfig {
        num_samples: n,
        seed,
        ..SynthConfig::default()
    })
    .unwrap();
    write_dataset(dir, &samples).unwrap();
}

fn mock_config(first: f64, both: f64) -> PipelineConfig {
    PipelineConfig {
        reviewer: ReviewerConfig {
            kind: "mock".into(),
            reject_first: first,
            reject_both: both,
            seed: 11,
            ..ReviewerConfig::default()
        },
        fixed_timestamp: Some("2026-01-01T00:00:00Z".into()),
        ..PipelineConfig::default()
    }
}

fn snapshot(dir: &Path) -> BTreeMap<PathBuf, Vec<u8>> {
    let mut out = BTreeMap::new();
    let mut stack = vec![dir.to_path_buf()];
    while let Some(d) = stack.pop() {
        for e in fs::read_dir(&d).unwrap() {
            let p = e.unwrap().path();
            if p.is_dir() {
                stack.push(p);
            } else {
                out.insert(p.strip_prefix(dir).unwrap().to_path_buf(), fs::read(&p).unwrap());
            }
        }
    }
    out
}

fn assert_replays(in_dir: &Path, out_dir: &Path) {
    let manifest = read_manifest(in_dir).unwrap();
    let audit = read_audit(out_dir).unwrap();
    let states: HashMap<String, AnnotationRecord> =
        load_states(out_dir).unwrap().into_iter().map(|r| (r.image_id.clone(), r)).collect();
    assert_eq!(states.len(), manifest.len());
    for m in &manifest {
        let replayed = replay(m, "synthetic", &audit[&m.image_id]).unwrap();
        assert_eq!(&replayed, &states[&m.image_id], "{}", m.image_id);
    }
}

#[test]
fn fifty_records_with_rejections() {
    let input = tempfile::tempdir().unwrap();
    let out = tempfile::tempdir().unwrap();
    make_input(input.path(), 50, 3);
    let cfg = mock_config(0.3, 0.1);
    let summary = run_pipeline(input.path(), out.path(), &cfg).unwrap();
    assert_eq!(summary.total, 50);
    assert_eq!(summary.manual_required, 5);
    assert_eq!(summary.done, 45);
    let states = load_states(out.path()).unwrap();
    for r in &states {
        assert!(r.is_terminal(), "{} is {:?}/{:?}", r.image_id, r.stage, r.status);
        assert!(r.attempts <= 2);
        assert!(!(r.stage == Stage::Done && r.status == Status::ManualRequired));
        if r.status == Status::ManualRequired {
            assert_eq!(r.attempts, 2);
        }
    }
    let regenerated = states.iter().filter(|r| r.attempts == 2).count();
    assert_eq!(regenerated, 15);
    assert_replays(input.path(), out.path());

    let before = snapshot(out.path());
    run_pipeline(input.path(), out.path(), &cfg).unwrap();
    assert_eq!(snapshot(out.path()), before, "rerun changed the output");

    let again = tempfile::tempdir().unwrap();
    run_pipeline(input.path(), again.path(), &cfg).unwrap();
    let mut a = snapshot(again.path());
    let mut b = before.clone();
    a.remove(Path::new("run.json"));
    b.remove(Path::new("run.json"));
    assert_eq!(a, b, "fresh run with a fixed clock differs");

    let produced = load_dataset(out.path()).unwrap();
    assert_eq!(produced.len(), 45);
    for s in &produced {
        assert!(validate_sample(s).is_empty());
        assert_eq!(count_seg_slots(&s.conversation), s.masks.len());
    }
}

#[test]
fn adjusted_prompt_carries_the_reason() {
    let input = tempfile::tempdir().unwrap();
    let out = tempfile::tempdir().unwrap();
    make_input(input.path(), 10, 1);
    run_pipeline(input.path(), out.path(), &mock_config(1.0, 0.0)).unwrap();
    for r in load_states(out.path()).unwrap() {
        let regen = r.audit.iter().find_map(|e| match &e.event {
            AuditEvent::Regenerated { prompt, caption } => Some((prompt.clone(), caption.clone())),
            _ => None,
        });
        let (prompt, caption) = regen.expect("every record was regenerated");
        assert!(prompt.starts_with(DEFAULT_PROMPT));
        assert!(prompt.contains("attempt 1 misses or misnames a finding"));
        assert_eq!(caption, mock_caption(&r.class_names, true));
        assert_eq!((r.stage, r.status, r.attempts), (Stage::Done, Status::Approved, 2));
    }
}

#[test]
fn empty_dataset_gives_empty_manifest() {
    let input = tempfile::tempdir().unwrap();
    let out = tempfile::tempdir().unwrap();
    fs::write(input.path().join("manifest.jsonl"), b"").unwrap();
    let s = run_pipeline(input.path(), out.path(), &PipelineConfig::default()).unwrap();
    assert_eq!(s.total, 0);
    assert_eq!(fs::read(out.path().join("manifest.jsonl")).unwrap(), b"");
}

#[test]
fn corrupt_state_fails_fast() {
    let input = tempfile::tempdir().unwrap();
    let out = tempfile::tempdir().unwrap();
    make_input(input.path(), 3, 2);
    let id = read_manifest(input.path()).unwrap()[1].image_id.clone();
    fs::create_dir_all(out.path().join("state")).unwrap();
    fs::write(out.path().join("state").join(format!("{id}.json")), b"{ not json").unwrap();
    let err = run_pipeline(input.path(), out.path(), &PipelineConfig::default()).unwrap_err();
    assert!(matches!(err, Error::CorruptState { .. }), "{err}");
    assert!(!out.path().join("manifest.jsonl").exists());
    assert_eq!(fs::read_dir(out.path().join("state")).unwrap().count(), 1);
}

#[test]
fn slot_mask_mismatch_goes_to_manual() {
    let input = tempfile::tempdir().unwrap();
    let out = tempfile::tempdir().unwrap();
    make_input(input.path(), 6, 5);
    let mut manifest = read_manifest(input.path()).unwrap();
    let target = manifest.iter_mut().find(|m| m.masks.len() == 1).unwrap();
    // a second mask the caption will never mention
    target.masks.push(target.masks[0].clone());
    let bad_id = target.image_id.clone();
    let mut text = String::new();
    for m in &manifest {
        text.push_str(&serde_json::to_string(m).unwrap());
        text.push('\n');
    }
    fs::write(input.path().join("manifest.jsonl"), text).unwrap();
    run_pipeline(input.path(), out.path(), &PipelineConfig::default()).unwrap();
    let rec = load_states(out.path()).unwrap().into_iter().find(|r| r.image_id == bad_id).unwrap();
    assert_eq!(rec.status, Status::ManualRequired);
    let violations = rec.audit.iter().find_map(|e| match &e.event {
        AuditEvent::ValidationFailed { violations } => Some(violations.clone()),
        _ => None,
    });
    assert!(violations.unwrap().iter().any(|v| v.contains("slot")));
    assert!(read_manifest(out.path()).unwrap().iter().all(|m| m.image_id != bad_id));
}

fn write_verdicts(out: &Path, lines: &[VerdictLine]) {
    let mut text = String::new();
    for l in lines {
        text.push_str(&serde_json::to_string(l).unwrap());
        text.push('\n');
    }
    fs::write(out.join(VERDICT_FILE), text).unwrap();
}

fn verdict(id: &str, v: &str, reason: &str, caption: Option<&str>) -> VerdictLine {
    VerdictLine {
        image_id: id.into(),
        verdict: v.into(),
        reason: reason.into(),
        caption: caption.map(String::from),
    }
}

#[test]
fn file_queue_round_trip() {
    let input = tempfile::tempdir().unwrap();
    let out = tempfile::tempdir().unwrap();
    make_input(input.path(), 3, 8);
    let ids: Vec<String> = read_manifest(input.path()).unwrap().into_iter().map(|m| m.image_id).collect();
    let cfg = PipelineConfig {
        reviewer: ReviewerConfig {
            kind: "file_queue".into(),
            ..ReviewerConfig::default()
        },
        ..PipelineConfig::default()
    };
    let s = run_pipeline(input.path(), out.path(), &cfg).unwrap();
    assert_eq!(s.in_progress, 3);
    let pending = fs::read_to_string(out.path().join(PENDING_FILE)).unwrap();
    assert_eq!(pending.lines().count(), 3);

    write_verdicts(
        out.path(),
        &[
            verdict(&ids[0], "approve", "", None),
            verdict(&ids[1], "reject", "wrong side", None),
            verdict(&ids[2], "reject", "too vague", None),
            verdict(&ids[2], "reject", "still vague", None),
        ],
    );
    let s = resume_pipeline(out.path()).unwrap();
    assert_eq!((s.done, s.manual_required, s.in_progress), (1, 1, 1));
    let states: HashMap<String, AnnotationRecord> =
        load_states(out.path()).unwrap().into_iter().map(|r| (r.image_id.clone(), r)).collect();
    assert_eq!(states[&ids[1]].status, Status::Regenerated);
    assert_eq!(states[&ids[2]].status, Status::ManualRequired);

    let manual_caption = medseg_core::pipeline::mock_caption(&states[&ids[2]].class_names, false);
    write_verdicts(
        out.path(),
        &[
            verdict(&ids[0], "approve", "", None),
            verdict(&ids[1], "reject", "wrong side", None),
            verdict(&ids[1], "approve", "", None),
            verdict(&ids[2], "reject", "too vague", None),
            verdict(&ids[2], "reject", "still vague", None),
            verdict(&ids[2], "manual", "", Some(&manual_caption)),
        ],
    );
    let s = resume_pipeline(out.path()).unwrap();
    assert_eq!(s.done, 3);
    let states = load_states(out.path()).unwrap();
    let manual = states.iter().find(|r| r.image_id == ids[2]).unwrap();
    assert_eq!(manual.status, Status::ManualDone);
    assert_eq!(fs::read_to_string(out.path().join(PENDING_FILE)).unwrap(), "");
    assert_replays(input.path(), out.path());
    assert_eq!(pipeline_status(out.path()).unwrap().done, 3);
}

#[test]
fn unavailable_reviewer_suspends_and_resumes() {
    let input = tempfile::tempdir().unwrap();
    let out = tempfile::tempdir().unwrap();
    make_input(input.path(), 4, 9);
    let cfg = PipelineConfig::default();
    let annotator = MockAnnotator::new::<&str>(&[]);
    let clock = FixedClock("t0".into());
    let mut down = ScriptedReviewer {
        unavailable: true,
        ..Default::default()
    };
    let s = run_with(input.path(), out.path(), &cfg, &annotator, &mut down, &clock).unwrap();
    assert!(s.review_suspended);
    assert_eq!(s.in_progress, 4);
    let before = snapshot(out.path());
    run_with(input.path(), out.path(), &cfg, &annotator, &mut down, &clock).unwrap();
    assert_eq!(snapshot(out.path()), before);

    let ids: Vec<String> = read_manifest(input.path()).unwrap().into_iter().map(|m| m.image_id).collect();
    let mut up = ScriptedReviewer {
        script: ids.iter().map(|id| (id.clone(), vec![Verdict::Approve])).collect(),
        unavailable: false,
    };
    let s = run_with(input.path(), out.path(), &cfg, &annotator, &mut up, &clock).unwrap();
    assert_eq!(s.done, 4);
    assert_replays(input.path(), out.path());
}

struct DownAnnotator;

impl Annotator for DownAnnotator {
    fn name(&self) -> String {
        "annotator:down".into()
    }
    fn generate_caption(&self, _: &str, _: &str, _: &ImageRef) -> medseg_core::Result<String> {
        Err(Error::AnnotatorUnavailable("offline".into()))
    }
    fn generate_conversation(
        &self,
        _: &[String],
        _: &str,
    ) -> medseg_core::Result<medseg_core::protocol::Conversation> {
        Err(Error::AnnotatorUnavailable("offline".into()))
    }
}

#[test]
fn unavailable_annotator_leaves_records_pending() {
    let input = tempfile::tempdir().unwrap();
    let out = tempfile::tempdir().unwrap();
    make_input(input.path(), 3, 4);
    let mut reviewer = AutoReviewer {
        accept_rate: 1.0,
        seed: 0,
    };
    let s = run_with(
        input.path(),
        out.path(),
        &PipelineConfig::default(),
        &DownAnnotator,
        &mut reviewer,
        &FixedClock("t".into()),
    )
    .unwrap();
    assert_eq!(s.by_status.get("caption/pending"), Some(&3));
    let s = run_pipeline(input.path(), out.path(), &PipelineConfig::default()).unwrap();
    assert_eq!(s.done, 3);
    assert_replays(input.path(), out.path());
}

#[test]
fn http_annotator_retries_then_gives_up() {
    let listener = TcpListener::bind("127.0.0.1:0").unwrap();
    let port = listener.local_addr().unwrap().port();
    drop(listener);
    let a = HttpAnnotator::new(format!("http://127.0.0.1:{port}"), Duration::from_secs(2))
        .with_backoff(Duration::from_millis(1));
    let err = a.generate_conversation(&["Q?".into()], "caption").unwrap_err();
    assert!(matches!(err, Error::AnnotatorUnavailable(_)), "{err}");
}

/// Answers `fail_first` requests with 500, then one valid conversation.
fn fake_server(fail_first: usize) -> (String, std::thread::JoinHandle<Vec<String>>) {
    let listener = TcpListener::bind("127.0.0.1:0").unwrap();
    let url = format!("http://{}", listener.local_addr().unwrap());
    let handle = std::thread::spawn(move || {
        let mut paths = Vec::new();
        for i in 0..=fail_first {
            let (mut stream, _) = listener.accept().unwrap();
            let mut buf = Vec::new();
            let mut chunk = [0u8; 4096];
            loop {
                let n = stream.read(&mut chunk).unwrap();
                buf.extend_from_slice(&chunk[..n]);
                let text = String::from_utf8_lossy(&buf);
                if let Some(end) = text.find("\r\n\r\n") {
                    let len = text[..end]
                        .lines()
                        .find_map(|l| l.to_lowercase().strip_prefix("content-length:").map(|v| v.trim().parse::<usize>().unwrap()))
                        .unwrap_or(0);
                    if buf.len() >= end + 4 + len {
                        break;
                    }
                }
            }
            let text = String::from_utf8_lossy(&buf).to_string();
            paths.push(text.split_whitespace().nth(1).unwrap().to_string());
            let (status, body) = if i < fail_first {
                ("500 Internal Server Error", "{}".to_string())
            } else {
                (
                    "200 OK",
                    r#"{"turns":[{"role":"user","text":"Q?"},{"role":"assistant","text":"The image shows <p> cyst </p> [SEG]."}]}"#.to_string(),
                )
            };
            let resp = format!(
                "HTTP/1.1 {status}\r\ncontent-type: application/json\r\ncontent-length: {}\r\nconnection: close\r\n\r\n{body}",
                body.len()
            );
            stream.write_all(resp.as_bytes()).unwrap();
        }
        paths
    });
    (url, handle)
}

#[test]
fn http_annotator_recovers_after_failures() {
    let (url, handle) = fake_server(2);
    let a = HttpAnnotator::new(url, Duration::from_secs(5)).with_backoff(Duration::from_millis(1));
    let conv = a.generate_conversation(&["Q?".into()], "cyst").unwrap();
    assert_eq!(count_seg_slots(&conv), 1);
    assert_eq!(handle.join().unwrap(), vec!["/conversation"; 3]);
}

fn record_for(id: &str) -> ManifestRecord {
    ManifestRecord {
        image_id: id.into(),
        dataset: None,
        image: format!("images/{id}.png"),
        masks: vec![],
        class_names: vec![],
        conversation: vec![],
    }
}

fn scripted_verdict() -> impl Strategy<Value = Verdict> {
    prop_oneof![
        Just(Verdict::Approve),
        Just(Verdict::Reject("r".into())),
        Just(Verdict::Pending),
        Just(Verdict::Manual("No abnormality is found in this image.".into())),
    ]
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(200))]

    #[test]
    fn only_enumerated_transitions_are_reachable(script in proptest::collection::vec(scripted_verdict(), 0..6)) {
        let m = record_for("p");
        let mut rec = AnnotationRecord::initial(&m, "synthetic");
        let clock = FixedClock("t".into());
        let cfg = PipelineConfig::default();
        let annotator = MockAnnotator::new::<&str>(&[]);
        let dir = tempfile::tempdir().unwrap();
        let ctx = StageContext { in_dir: dir.path(), cfg: &cfg, annotator: &annotator, clock: &clock };
        apply(&mut rec, AuditEntry { timestamp: "t".into(), actor: "pipeline".into(), event: AuditEvent::Created }).unwrap();
        stage1_caption(&mut rec, &ctx).unwrap();
        let mut reviewer = ScriptedReviewer { script: HashMap::from([("p".to_string(), script.clone())]), unavailable: false };
        stage2_refine(&mut rec, &ctx, &mut reviewer).unwrap();
        prop_assert!(rec.attempts <= 2);
        let decisions: Vec<&Verdict> = script.iter().filter(|v| !matches!(v, Verdict::Manual(_))).collect();
        let expected = match (decisions.first(), decisions.get(1)) {
            (Some(Verdict::Approve), _) => (Stage::Conversation, Status::Approved, 1),
            (Some(Verdict::Reject(_)), Some(Verdict::Approve)) => (Stage::Conversation, Status::Approved, 2),
            (Some(Verdict::Reject(_)), Some(Verdict::Reject(_))) => {
                if script.iter().any(|v| matches!(v, Verdict::Manual(_))) {
                    (Stage::Conversation, Status::ManualDone, 2)
                } else {
                    (Stage::Refine, Status::ManualRequired, 2)
                }
            }
            (Some(Verdict::Reject(_)), _) => (Stage::Refine, Status::Regenerated, 2),
            _ => (Stage::Refine, Status::Generated, 1),
        };
        prop_assert_eq!((rec.stage, rec.status, rec.attempts), expected);
        // the audit replays to the same record
        let replayed = replay(&m, "synthetic", &rec.audit).unwrap();
        prop_assert_eq!(replayed, rec);
    }
}
