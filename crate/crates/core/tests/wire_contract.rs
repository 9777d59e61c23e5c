use std::sync::atomic::{AtomicUsize, Ordering};
use std::sync::Arc;
use std::thread;
use std::time::Duration;

use rar_core::rank::{
    rerank, BackendError, FallbackPolicy, PredictionSource, PromptStyle, QueryContext, RankWireRequest,
    RankerBackend, RemoteConfig, RemoteRanker, RetryPolicy,
};
use rar_core::retrieve::{Candidate, CandidateList, RetrievalMode};

type Handler = dyn Fn(usize, RankWireRequest) -> (u16, String) + Send + Sync;

/// Mock `/rank` server. The handler sees the 0-based request number.
struct Mock {
    url: String,
    hits: Arc<AtomicUsize>,
    peak: Arc<AtomicUsize>,
}

fn spawn_mock(delay: Duration, handler: Box<Handler>) -> Mock {
    let server = Arc::new(tiny_http::Server::http("127.0.0.1:0").unwrap());
    let port = server.server_addr().to_ip().unwrap().port();
    let hits = Arc::new(AtomicUsize::new(0));
    let peak = Arc::new(AtomicUsize::new(0));
    let live = Arc::new(AtomicUsize::new(0));
    let handler: Arc<Handler> = Arc::from(handler);
    {
        let (hits, peak) = (hits.clone(), peak.clone());
        thread::spawn(move || {
            for mut req in server.incoming_requests() {
                let (hits, peak, live, handler) = (hits.clone(), peak.clone(), live.clone(), handler.clone());
                thread::spawn(move || {
                    let now = live.fetch_add(1, Ordering::SeqCst) + 1;
                    peak.fetch_max(now, Ordering::SeqCst);
                    let n = hits.fetch_add(1, Ordering::SeqCst);
                    assert_eq!(req.url(), "/rank");
                    assert_eq!(*req.method(), tiny_http::Method::Post);
                    let mut body = String::new();
                    req.as_reader().read_to_string(&mut body).unwrap();
                    let parsed: RankWireRequest = serde_json::from_str(&body).unwrap();
                    thread::sleep(delay);
                    let (status, text) = handler(n, parsed);
                    live.fetch_sub(1, Ordering::SeqCst);
                    let header = tiny_http::Header::from_bytes("Content-Type", "application/json").unwrap();
                    let _ = req.respond(tiny_http::Response::from_string(text).with_status_code(status).with_header(header));
                });
            }
        });
    }
    Mock {
        url: format!("http://127.0.0.1:{port}"),
        hits,
        peak,
    }
}

fn lexicographic(_: usize, req: RankWireRequest) -> (u16, String) {
    let mut names = req.candidates;
    names.sort();
    (200, serde_json::json!({ "ranking": names }).to_string())
}

fn fast(url: &str) -> RemoteConfig {
    let mut c = RemoteConfig::new(url);
    c.retry = RetryPolicy {
        retries: 3,
        base_delay: Duration::from_millis(5),
    };
    c.timeout = Duration::from_secs(5);
    c
}

fn candidates(names: &[&str]) -> CandidateList {
    CandidateList {
        candidates: names
            .iter()
            .enumerate()
            .map(|(i, n)| Candidate {
                category: n.to_string(),
                similarity: 1.0 - i as f64 / 10.0,
            })
            .collect(),
        mode: RetrievalMode::ImageToImage,
        k: names.len(),
        insufficient: false,
    }
}

fn ctx() -> QueryContext {
    QueryContext {
        query_id: 1,
        image_ref: "q/1.png".into(),
        style: PromptStyle::InContext,
    }
}

#[test]
fn lexicographic_mock_round_trip() {
    let mock = spawn_mock(Duration::ZERO, Box::new(lexicographic));
    let ranker = RemoteRanker::new(fast(&mock.url));
    let p = rerank(&candidates(&["b", "a", "c"]), &ctx(), &ranker, &FallbackPolicy::default()).unwrap();
    assert_eq!(p.source, PredictionSource::Ranker);
    assert_eq!(p.ordering, vec!["a", "b", "c"]);
    assert_eq!(p.category, "a");
    assert_eq!(mock.hits.load(Ordering::SeqCst), 1);
}

#[test]
fn request_body_follows_contract() {
    let mock = spawn_mock(
        Duration::ZERO,
        Box::new(|_, req| {
            assert_eq!(req.image_ref, "q/1.png");
            assert_eq!(req.k, 2);
            assert_eq!(req.style, PromptStyle::InContext);
            assert_eq!(req.candidates, vec!["x", "y"]);
            (200, r#"{"ranking":["y","x"]}"#.into())
        }),
    );
    let ranker = RemoteRanker::new(fast(&mock.url));
    let p = rerank(&candidates(&["x", "y"]), &ctx(), &ranker, &FallbackPolicy::default()).unwrap();
    assert_eq!(p.category, "y");
}

#[test]
fn server_errors_are_retried_then_succeed() {
    let mock = spawn_mock(
        Duration::ZERO,
        Box::new(|n, req| if n < 2 { (503, "{}".into()) } else { lexicographic(n, req) }),
    );
    let ranker = RemoteRanker::new(fast(&mock.url));
    let p = rerank(&candidates(&["b", "a"]), &ctx(), &ranker, &FallbackPolicy::default()).unwrap();
    assert_eq!(p.source, PredictionSource::Ranker);
    assert_eq!(mock.hits.load(Ordering::SeqCst), 3);
}

#[test]
fn persistent_server_errors_fall_back_after_four_attempts() {
    let mock = spawn_mock(Duration::ZERO, Box::new(|_, _| (500, "boom".into())));
    let ranker = RemoteRanker::new(fast(&mock.url));
    let p = rerank(&candidates(&["b", "a"]), &ctx(), &ranker, &FallbackPolicy::default()).unwrap();
    assert_eq!(p.source, PredictionSource::Fallback);
    assert_eq!(p.category, "b");
    assert!(matches!(p.error, Some(BackendError::Unreachable(_))));
    assert_eq!(mock.hits.load(Ordering::SeqCst), 4);
}

#[test]
fn client_errors_are_not_retried() {
    let mock = spawn_mock(Duration::ZERO, Box::new(|_, _| (400, "bad".into())));
    let ranker = RemoteRanker::new(fast(&mock.url));
    let p = rerank(&candidates(&["b", "a"]), &ctx(), &ranker, &FallbackPolicy::default()).unwrap();
    assert!(matches!(p.error, Some(BackendError::Unreachable(_))));
    assert_eq!(mock.hits.load(Ordering::SeqCst), 1);
}

#[test]
fn out_of_list_names_fall_back() {
    let mock = spawn_mock(Duration::ZERO, Box::new(|_, _| (200, r#"{"ranking":["lion","a"]}"#.into())));
    let ranker = RemoteRanker::new(fast(&mock.url));
    let p = rerank(&candidates(&["b", "a"]), &ctx(), &ranker, &FallbackPolicy::default()).unwrap();
    assert_eq!(p.source, PredictionSource::Fallback);
    assert_eq!(p.category, "b");
    assert!(!p.verdict.unwrap().valid);
}

#[test]
fn malformed_body_is_bad_response() {
    let mock = spawn_mock(Duration::ZERO, Box::new(|_, _| (200, "not json".into())));
    let ranker = RemoteRanker::new(fast(&mock.url));
    let p = rerank(&candidates(&["b", "a"]), &ctx(), &ranker, &FallbackPolicy::default()).unwrap();
    assert!(matches!(p.error, Some(BackendError::BadResponse(_))));
    assert_eq!(p.source, PredictionSource::Fallback);
}

#[test]
fn unreachable_host_falls_back() {
    // bind then drop to get a port nobody listens on
    let port = std::net::TcpListener::bind("127.0.0.1:0").unwrap().local_addr().unwrap().port();
    let ranker = RemoteRanker::new(fast(&format!("http://127.0.0.1:{port}/")));
    let p = rerank(&candidates(&["b", "a"]), &ctx(), &ranker, &FallbackPolicy::default()).unwrap();
    assert_eq!(p.source, PredictionSource::Fallback);
    assert!(matches!(p.error, Some(BackendError::Unreachable(_))));
}

#[test]
fn in_flight_requests_are_capped() {
    let mock = spawn_mock(Duration::from_millis(40), Box::new(lexicographic));
    let mut config = fast(&mock.url);
    config.max_in_flight = 3;
    let ranker = Arc::new(RemoteRanker::new(config));
    let workers: Vec<_> = (0..12)
        .map(|i| {
            let ranker = ranker.clone();
            thread::spawn(move || {
                let q = QueryContext {
                    query_id: i,
                    ..ctx()
                };
                rerank(&candidates(&["b", "a"]), &q, ranker.as_ref() as &dyn RankerBackend, &FallbackPolicy::default())
                    .unwrap()
            })
        })
        .collect();
    for w in workers {
        assert_eq!(w.join().unwrap().source, PredictionSource::Ranker);
    }
    assert_eq!(mock.hits.load(Ordering::SeqCst), 12);
    let peak = mock.peak.load(Ordering::SeqCst);
    assert!((1..=3).contains(&peak), "peak concurrency {peak}");
}

#[test]
fn embed_client_against_mock() {
    use rar_core::embed::{EmbedClient, EmbedItem};
    use rar_core::store::Modality;
    let server = Arc::new(tiny_http::Server::http("127.0.0.1:0").unwrap());
    let port = server.server_addr().to_ip().unwrap().port();
    thread::spawn(move || {
        for mut req in server.incoming_requests() {
            let body = match req.url() {
                "/healthz" => "{\"ready\":true}".to_string(),
                _ => {
                    let mut s = String::new();
                    req.as_reader().read_to_string(&mut s).unwrap();
                    let v: serde_json::Value = serde_json::from_str(&s).unwrap();
                    let n = v["items"].as_array().unwrap().len();
                    serde_json::json!({ "dim": 2, "vectors": vec![[0.6, 0.8]; n] }).to_string()
                }
            };
            let _ = req.respond(tiny_http::Response::from_string(body));
        }
    });
    let client = EmbedClient::new(format!("http://127.0.0.1:{port}"), Duration::from_secs(5));
    assert!(client.healthy());
    let items: Vec<EmbedItem> = (0..3)
        .map(|id| EmbedItem {
            id,
            kind: Modality::Text,
            payload: format!("t{id}"),
        })
        .collect();
    let resp = client.embed(&items).unwrap();
    assert_eq!((resp.dim, resp.vectors.len()), (2, 3));
}
