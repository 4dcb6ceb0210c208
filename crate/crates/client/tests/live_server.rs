use std::sync::Arc;

use mac_client::{Client, ClientError};
use mac_service::{build_service, serve, ServiceConfig};

const CONFIG: &str = r#"
seed = 5
threshold = 0.5

[pool]
synthetic = 20

[assignment]
mode = "fixed"
arm = "minicpm-v"

[[models]]
id = "minicpm-v"
kind = "stub"
[[models.rules]]
pattern = "bringing my "
completion = "dog out for walks here!"
latency_ms = 2080.0
"#;

/// Starts a server on an ephemeral port and returns its base URL.
async fn spawn() -> String {
    let cfg = ServiceConfig::from_toml(CONFIG).unwrap();
    let service = Arc::new(build_service(&cfg, std::path::Path::new(".")).unwrap());
    let listener = tokio::net::TcpListener::bind("127.0.0.1:0").await.unwrap();
    let addr = listener.local_addr().unwrap();
    tokio::spawn(serve(service, listener, std::future::pending()));
    format!("http://{addr}/")
}

#[tokio::test]
async fn full_session_over_tcp() {
    let client = Client::new(spawn().await).unwrap();
    let session = client.start_session().await.unwrap();
    assert!(!session.seeded_context.is_empty());

    let id = &session.session_id;
    let typed = "That's why I love bringing my ";
    let c = client.complete(id, typed).await.unwrap();
    assert_eq!(c.suggestion.text, "dog out for walks here!");

    let a = client.accept(id, 3).await.unwrap();
    assert_eq!(a.draft, "That's why I love bringing my dog");
    assert_eq!(a.remaining, " out for walks here!");

    let c = client.complete(id, "That's why I love bringing my dog").await.unwrap();
    assert_eq!(c.suggestion.text, " out for walks here!");
    let a = client.accept(id, 20).await.unwrap();
    assert_eq!(a.draft, "That's why I love bringing my dog out for walks here!");
    assert_eq!((a.live_tes.chars_typed, a.live_tes.chars_accepted), (30, 23));

    let r = client.rate(id, 8).await.unwrap();
    assert_eq!(r.rating, 8);
    assert_eq!(r.live_tes, a.live_tes);

    let report = client.report().await.unwrap();
    assert_eq!(report.n_closed, 1);
    assert_eq!(report.models[0].n_sessions, 1);
    assert_eq!(report.models[0].mean_rating, 8.0);
    assert!((report.models[0].mean_tes - 23.0 / 53.0).abs() < 1e-12);
}

#[tokio::test]
async fn errors_carry_status_and_message() {
    let client = Client::new(spawn().await).unwrap();
    let e = client.complete("missing", "a").await.unwrap_err();
    assert_eq!(e.status().map(|s| s.as_u16()), Some(404));
    assert!(e.to_string().contains("unknown session missing"));

    let id = client.start_session().await.unwrap().session_id;
    client.complete(&id, "hi").await.unwrap();
    let e = client.rate(&id, 10).await.unwrap_err();
    assert!(matches!(e, ClientError::Status { status, .. } if status.as_u16() == 400));
    client.rate(&id, 0).await.unwrap();
    let e = client.rate(&id, 1).await.unwrap_err();
    assert_eq!(e.status().map(|s| s.as_u16()), Some(409));
}

#[tokio::test]
async fn unreachable_service_is_a_transport_error() {
    let client = Client::new("http://127.0.0.1:9").unwrap();
    assert!(matches!(client.report().await, Err(ClientError::Transport(_))));
}
