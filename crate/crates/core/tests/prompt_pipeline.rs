mod common;

use std::sync::Arc;

use artisynth::corpus::ArtifactRecord;
use artisynth::prompt::{
    assemble_prompt, split_prompt, EnhanceStatus, Enhancer, HttpTransport, LlmClientConfig, QueryTemplate, DEFAULT_SEP,
    QUERY_SEPARATOR,
};
use common::{chat_reply, vase_attributes, MockLlm, VASE_PROMPT};
use proptest::prelude::*;

const FULL_REPLY: &str =
    "Material: Bronze\nType: Ding\nType Definition: A cauldron on three legs\nShape: Round belly\nPattern: Taotie mask";

fn record(id: &str) -> ArtifactRecord {
    ArtifactRecord {
        id: id.into(),
        name: format!("Ding {id}"),
        time_period: "Shang".into(),
        description: "A bronze cauldron with a mask motif".into(),
        size_text: "20 cm".into(),
        image: None,
    }
}

fn enhancer(server: &MockLlm, retries: u32, cache: Option<std::path::PathBuf>) -> Enhancer {
    let config = LlmClientConfig {
        endpoint: server.url.clone(),
        max_retries: retries,
        backoff_ms: 1,
        timeout_secs: 5.0,
        cache_dir: cache,
        ..Default::default()
    };
    let transport = Arc::new(HttpTransport::new(&config).unwrap());
    Enhancer::new(QueryTemplate::bundled(), &config, transport).unwrap()
}

#[test]
fn vase_fixture_assembles_in_table_order() {
    assert_eq!(assemble_prompt(&vase_attributes(), DEFAULT_SEP).unwrap(), VASE_PROMPT);
}

#[test]
fn vase_prompt_splits_back_into_all_fields() {
    assert_eq!(split_prompt(VASE_PROMPT, DEFAULT_SEP).unwrap(), vase_attributes());
}

#[test]
fn rendered_query_has_statement_two_examples_and_target() {
    let q = QueryTemplate::bundled().render(&record("r1")).unwrap();
    let blocks: Vec<&str> = q.split(&format!("\n{QUERY_SEPARATOR}\n")).collect();
    assert_eq!(blocks.len(), 5);
    assert_eq!(blocks[4], "");
    assert!(blocks[3].contains("A bronze cauldron with a mask motif"));
    assert!(blocks[1].contains("Material:") && blocks[2].contains("Material:"));
}

#[test]
fn replies_are_parsed_through_http() {
    let server = MockLlm::start(|_, body| {
        let v: serde_json::Value = serde_json::from_str(body).unwrap();
        assert_eq!(v["messages"][0]["role"], "user");
        (200, chat_reply(FULL_REPLY))
    });
    let e = enhancer(&server, 0, None);
    let status = e.status_for(&record("a"));
    let attrs = status.attributes().expect("complete");
    assert_eq!(attrs.material, "Bronze");
    assert_eq!(attrs.type_definition, "A cauldron on three legs");
    assert_eq!(attrs.name, "Ding a");
    assert_eq!(server.hits(), 1);
}

#[test]
fn cached_replies_skip_the_network() {
    let dir = tempfile::tempdir().unwrap();
    let server = MockLlm::start(|_, _| (200, chat_reply(FULL_REPLY)));
    let first = enhancer(&server, 0, Some(dir.path().to_path_buf()));
    let a = first.status_for(&record("a"));
    assert_eq!(server.hits(), 1);
    let second = enhancer(&server, 0, Some(dir.path().to_path_buf()));
    let b = second.status_for(&record("a"));
    assert_eq!(a, b);
    assert_eq!(second.network_calls(), 0);
    assert_eq!(server.hits(), 1);
}

#[test]
fn server_errors_exhaust_the_retries() {
    let server = MockLlm::start(|_, _| (500, "{\"error\":\"overloaded\"}".into()));
    let e = enhancer(&server, 2, None);
    match e.status_for(&record("a")) {
        EnhanceStatus::Failed { reason } => assert!(reason.contains('3'), "{reason}"),
        other => panic!("expected failure, got {other:?}"),
    }
    assert_eq!(server.hits(), 3);
    assert_eq!(e.network_calls(), 3);
}

#[test]
fn transient_errors_recover() {
    let server = MockLlm::start(|n, _| {
        if n < 2 {
            (503, "{}".into())
        } else {
            (200, chat_reply(FULL_REPLY))
        }
    });
    let e = enhancer(&server, 3, None);
    assert!(e.status_for(&record("a")).attributes().is_some());
    assert_eq!(server.hits(), 3);
}

#[test]
fn missing_labels_are_reported_as_incomplete() {
    let server = MockLlm::start(|_, _| (200, chat_reply("Material: Bronze\nType: Ding\nShape: Round belly")));
    let e = enhancer(&server, 0, None);
    match e.status_for(&record("a")) {
        EnhanceStatus::Incomplete { missing, attributes } => {
            assert_eq!(missing, vec!["Type Definition".to_string(), "Pattern".to_string()]);
            assert_eq!(attributes.shape, "Round belly");
        }
        other => panic!("expected incomplete, got {other:?}"),
    }
}

#[test]
fn batch_keeps_order_and_isolates_failures() {
    let server = MockLlm::start(|_, body| {
        if body.contains("Ding b") {
            (500, "{}".into())
        } else {
            (200, chat_reply(FULL_REPLY))
        }
    });
    let e = enhancer(&server, 0, None);
    let records: Vec<_> = ["a", "b", "c", "d"].iter().map(|id| record(id)).collect();
    let out = e.enhance_batch(&records);
    assert_eq!(out.len(), 4);
    for (i, s) in out.iter().enumerate() {
        match (i, s) {
            (1, EnhanceStatus::Failed { .. }) => {}
            (1, other) => panic!("record b should fail, got {other:?}"),
            (_, s) => assert_eq!(s.attributes().unwrap().name, records[i].name),
        }
    }
}

fn field() -> impl Strategy<Value = String> {
    "[A-Za-z0-9 ,.()-]{1,24}".prop_filter("non-blank", |s| !s.trim().is_empty())
}

proptest! {
    #[test]
    fn assembly_round_trips(values in proptest::array::uniform8(field())) {
        let attrs = artisynth::prompt::ExpertAttributes::from_values(values);
        let prompt = assemble_prompt(&attrs, DEFAULT_SEP).unwrap();
        prop_assert_eq!(split_prompt(&prompt, DEFAULT_SEP).unwrap(), attrs);
    }
}
