use std::io::Write;

use itemforge_service::store::{Action, DraftParams, DraftStore, ItemDraft, SampleStatus, StoreError, TemplateKind};

fn params() -> DraftParams {
    DraftParams {
        max_tokens: 20,
        temperature: 0.8,
        top_k: 40,
        n_samples: 3,
        seed: 7,
        stop_at_end_of_text: true,
    }
}

fn draft(parent: Option<uuid::Uuid>) -> ItemDraft {
    ItemDraft::new(
        TemplateKind::Qa,
        "Q: dose? A:".into(),
        params(),
        vec!["one".into(), "two".into(), "three".into()],
        parent,
    )
}

#[test]
fn transition_table() {
    use SampleStatus::*;
    assert_eq!(Proposed.after(Action::Accept), Some(Accepted));
    assert_eq!(Proposed.after(Action::Reject), Some(Rejected));
    assert_eq!(Proposed.after(Action::Edit), Some(Edited));
    assert_eq!(Edited.after(Action::Accept), Some(Accepted));
    for action in [Action::Accept, Action::Reject, Action::Edit] {
        assert_eq!(Accepted.after(action), None);
        assert_eq!(Rejected.after(action), None);
    }
    assert_eq!(Edited.after(Action::Edit), None);
    assert_eq!(Edited.after(Action::Reject), None);
}

#[test]
fn replay_recovers_every_status() {
    let dir = tempfile::tempdir().unwrap();
    let path = dir.path().join("drafts.ndjson");
    let store = DraftStore::open(&path).unwrap();
    let a = store.create(draft(None)).unwrap();
    let b = store.create(draft(Some(a.id))).unwrap();
    store.transition(a.id, 0, Action::Accept, None).unwrap();
    store.transition(a.id, 1, Action::Edit, Some("two, revised".into())).unwrap();
    store.transition(a.id, 1, Action::Accept, None).unwrap();
    store.transition(b.id, 2, Action::Reject, None).unwrap();
    let before = store.list(None);
    drop(store);

    let reopened = DraftStore::open(&path).unwrap();
    assert_eq!(reopened.list(None), before);
    let a2 = reopened.get(a.id).unwrap();
    assert_eq!(a2.revision, 3);
    assert_eq!(a2.samples[1].status, SampleStatus::Accepted);
    assert_eq!(a2.samples[1].final_text(), "two, revised");
    assert_eq!(reopened.get(b.id).unwrap().parent_draft_id, Some(a.id));
    assert_eq!(reopened.list(Some(SampleStatus::Rejected)).len(), 1);
    assert_eq!(reopened.list(Some(SampleStatus::Accepted)).len(), 1);
    assert!(reopened.list(Some(SampleStatus::Edited)).is_empty());
}

#[test]
fn illegal_transitions_leave_no_trace() {
    let dir = tempfile::tempdir().unwrap();
    let path = dir.path().join("log.ndjson");
    let store = DraftStore::open(&path).unwrap();
    let d = store.create(draft(None)).unwrap();
    store.transition(d.id, 0, Action::Reject, None).unwrap();
    let len = std::fs::metadata(&path).unwrap().len();
    let err = store.transition(d.id, 0, Action::Edit, Some("x".into())).unwrap_err();
    assert!(matches!(err, StoreError::IllegalTransition { .. }));
    let err = store.transition(d.id, 1, Action::Edit, None).unwrap_err();
    assert!(matches!(err, StoreError::MissingEditText));
    let err = store.transition(d.id, 9, Action::Accept, None).unwrap_err();
    assert!(matches!(err, StoreError::SampleNotFound { sample: 9, .. }));
    let err = store.transition(uuid::Uuid::nil(), 0, Action::Accept, None).unwrap_err();
    assert!(matches!(err, StoreError::DraftNotFound(_)));
    assert_eq!(std::fs::metadata(&path).unwrap().len(), len);
    assert_eq!(store.get(d.id).unwrap().revision, 1);
}

#[test]
fn torn_final_line_is_dropped_and_corruption_is_reported() {
    let dir = tempfile::tempdir().unwrap();
    let path = dir.path().join("log.ndjson");
    let store = DraftStore::open(&path).unwrap();
    let d = store.create(draft(None)).unwrap();
    drop(store);
    std::fs::OpenOptions::new()
        .append(true)
        .open(&path)
        .unwrap()
        .write_all(br#"{"event":"transition","at":"#)
        .unwrap();
    let store = DraftStore::open(&path).unwrap();
    assert_eq!(store.list(None).len(), 1);
    store.transition(d.id, 0, Action::Accept, None).unwrap();
    drop(store);
    assert_eq!(DraftStore::open(&path).unwrap().get(d.id).unwrap().revision, 1);

    std::fs::write(&path, "not json\n").unwrap();
    let err = DraftStore::open(&path).err().unwrap();
    assert!(matches!(err, StoreError::CorruptLog { line: 1, .. }));
}

#[test]
fn compaction_preserves_state() {
    let dir = tempfile::tempdir().unwrap();
    let path = dir.path().join("log.ndjson");
    let store = DraftStore::open_with(&path, 4).unwrap();
    let mut ids = Vec::new();
    for _ in 0..3 {
        ids.push(store.create(draft(None)).unwrap().id);
    }
    for (i, id) in ids.iter().enumerate() {
        store.transition(*id, i, Action::Edit, Some(format!("edit {i}"))).unwrap();
    }
    let state = store.list(None);
    let lines = std::fs::read_to_string(&path).unwrap().lines().count();
    assert!(lines < 6, "log has {lines} lines");
    drop(store);
    let reopened = DraftStore::open(&path).unwrap();
    assert_eq!(reopened.list(None), state);
    let text = std::fs::read_to_string(&path).unwrap();
    assert_eq!(text.lines().count(), 3);
    assert!(text.lines().all(|l| l.starts_with(r#"{"event":"created""#)));
}

#[test]
fn concurrent_appends_are_serialized() {
    let dir = tempfile::tempdir().unwrap();
    let path = dir.path().join("log.ndjson");
    let store = DraftStore::open_with(&path, 10_000).unwrap();
    let d = store.create(ItemDraft::new(
        TemplateKind::Raw,
        "x".into(),
        params(),
        (0..32).map(|i| i.to_string()).collect(),
        None,
    ))
    .unwrap();
    std::thread::scope(|s| {
        for t in 0..4 {
            let store = &store;
            s.spawn(move || {
                for k in (t..32).step_by(4) {
                    store.transition(d.id, k, Action::Accept, None).unwrap();
                }
            });
        }
    });
    let got = store.get(d.id).unwrap();
    assert_eq!(got.revision, 32);
    assert!(got.samples.iter().all(|s| s.status == SampleStatus::Accepted));
    drop(store);
    assert_eq!(DraftStore::open(&path).unwrap().get(d.id).unwrap(), got);
}
