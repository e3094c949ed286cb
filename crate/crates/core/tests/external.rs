mod common;

use std::sync::{Arc, Mutex};
use std::thread;

use tiny_http::{Response, Server};
use zrl_core::estimators::{bestofn_value, mc_value, BestOfNMode};
use zrl_core::policy::{ExternalBackend, ExternalConfig, RolloutBackend, Vocab, ANS};
use zrl_core::Error;

use common::*;

/// Serves scripted `(status, body)` replies in order, repeating the last one,
/// and records every request body.
struct Mock {
    endpoint: String,
    seen: Arc<Mutex<Vec<serde_json::Value>>>,
}

fn mock(replies: Vec<(u16, String)>) -> Mock {
    let server = Server::http("127.0.0.1:0").unwrap();
    let port = server.server_addr().to_ip().unwrap().port();
    let seen = Arc::new(Mutex::new(Vec::new()));
    let log = seen.clone();
    thread::spawn(move || {
        for (i, mut req) in server.incoming_requests().enumerate() {
            let mut body = String::new();
            req.as_reader().read_to_string(&mut body).unwrap();
            log.lock().unwrap().push(serde_json::from_str(&body).unwrap_or(serde_json::Value::Null));
            let (status, text) = replies[i.min(replies.len() - 1)].clone();
            let _ = req.respond(Response::from_string(text).with_status_code(status));
        }
    });
    Mock {
        endpoint: format!("http://127.0.0.1:{port}"),
        seen,
    }
}

fn backend(endpoint: &str, retries: u32) -> RolloutBackend {
    let config = ExternalConfig {
        endpoint: endpoint.to_string(),
        timeout_secs: 5.0,
        retries,
        max_tokens: 64,
    };
    RolloutBackend::External(ExternalBackend::new(config, sampling(5), Vocab::new(LABEL_MIN, LABEL_MAX).unwrap()))
}

fn completions(texts: &[&str]) -> String {
    serde_json::json!({ "completions": texts }).to_string()
}

#[test]
fn completions_are_scored_by_the_verifier() {
    let inst = instance(2, 3, 4);
    let good = format!("thinking \\boxed{{{}}}", inst.gold_text());
    let m = mock(vec![(200, completions(&[&good, "no answer", &good, "\\boxed{1,2}"]))]);
    let b = backend(&m.endpoint, 0);
    let vocab = b.vocab();
    let pr = vocab.encode_instance(&inst).unwrap();
    let v = mc_value(&inst, &pr, &[], &b, 4, 0).unwrap();
    assert_eq!(v.successes, 2);
    assert_eq!(v.value, 0.5);

    let seen = m.seen.lock().unwrap();
    let req = &seen[0];
    assert_eq!(req["n"], 4);
    assert_eq!(req["temperature"], 1.0);
    assert_eq!(req["max_tokens"], 64);
    let text = req["prompt"].as_str().unwrap();
    assert_eq!(text, inst.prompt_text());
}

#[test]
fn prefixes_are_sent_as_text_and_prepended_to_answers() {
    let inst = instance(1, 2, 0);
    let rest = format!(",{}}}", inst.gold_path[1]);
    let m = mock(vec![(200, completions(&[&rest, &rest]))]);
    let b = backend(&m.endpoint, 0);
    let pr = b.vocab().encode_instance(&inst).unwrap();
    let src = b.vocab().node(inst.source).unwrap();
    let prefix = [ANS, src];
    let v = bestofn_value(&inst, &pr, &prefix, &b, 1, 2, 0, BestOfNMode::BatchMax).unwrap();
    assert_eq!(v.value, 1.0);
    let seen = m.seen.lock().unwrap();
    let text = seen[0]["prompt"].as_str().unwrap();
    assert!(text.starts_with(&inst.prompt_text()));
    assert!(text.ends_with(&format!("\\boxed{{{}", inst.source)), "{text}");
}

#[test]
fn transient_failures_are_retried() {
    let inst = instance(1, 2, 1);
    let good = format!("\\boxed{{{}}}", inst.gold_text());
    let m = mock(vec![(503, "busy".into()), (200, completions(&[&good]))]);
    let b = backend(&m.endpoint, 2);
    let pr = b.vocab().encode_instance(&inst).unwrap();
    assert_eq!(mc_value(&inst, &pr, &[], &b, 1, 0).unwrap().value, 1.0);
    assert_eq!(m.seen.lock().unwrap().len(), 2);
}

#[test]
fn exhausted_retries_are_transport_errors() {
    let inst = instance(1, 2, 1);
    let m = mock(vec![(500, "down".into())]);
    let b = backend(&m.endpoint, 2);
    let pr = b.vocab().encode_instance(&inst).unwrap();
    match mc_value(&inst, &pr, &[], &b, 1, 0) {
        Err(Error::Transport { attempts, .. }) => assert_eq!(attempts, 3),
        other => panic!("expected transport error, got {other:?}"),
    }
    assert_eq!(m.seen.lock().unwrap().len(), 3);
}

#[test]
fn malformed_bodies_and_wrong_counts_are_rejected() {
    let inst = instance(1, 2, 2);
    for reply in ["{\"text\": 1}".to_string(), "not json".to_string(), completions(&["a"])] {
        let m = mock(vec![(200, reply)]);
        let b = backend(&m.endpoint, 0);
        let pr = b.vocab().encode_instance(&inst).unwrap();
        match mc_value(&inst, &pr, &[], &b, 2, 0) {
            Err(Error::Transport { message, .. }) => {
                assert!(message.contains("malformed") || message.contains("expected 2"), "{message}")
            }
            other => panic!("expected transport error, got {other:?}"),
        }
    }
}

#[test]
fn unreachable_endpoints_fail_cleanly() {
    let port = {
        let l = std::net::TcpListener::bind("127.0.0.1:0").unwrap();
        l.local_addr().unwrap().port()
    };
    let b = backend(&format!("http://127.0.0.1:{port}"), 1);
    let inst = instance(1, 2, 0);
    let pr = b.vocab().encode_instance(&inst).unwrap();
    assert!(matches!(mc_value(&inst, &pr, &[], &b, 1, 0), Err(Error::Transport { attempts: 2, .. })));
}
