//! HTTP API error handling against an in-process coordinator with no
//! agent attached.

use std::time::Duration;

use fabric::bench::cluster::Cluster;
use fabric::config::CoordinatorConfig;
use fabric::service::api::{BatchRequest, RegisterFunctionRequest, SubmitRequest};
use fabric_core::{EndpointId, Envelope, FunctionId, Runtime, TaskId, TaskState};

async fn cluster() -> Cluster {
    let mut cfg = CoordinatorConfig {
        payload_cap: 1024,
        ..CoordinatorConfig::default()
    };
    cfg.tokens.insert("other-token".into(), "other".into());
    Cluster::start(cfg).await.unwrap()
}

fn submit(f: FunctionId, ep: EndpointId, payload: &[u8]) -> SubmitRequest {
    SubmitRequest {
        function_id: f,
        endpoint_id: ep,
        input: Some(Envelope::raw(payload.to_vec())),
        inputs: None,
        retriable: true,
    }
}

#[tokio::test]
async fn bad_token_is_rejected() {
    let c = cluster().await;
    let e = c.client.with_token("nope").get_endpoint(EndpointId::from_bytes([1; 16])).await.unwrap_err();
    assert_eq!(e.code(), Some("unauthorized"));
    c.client.health().await.unwrap();
}

#[tokio::test]
async fn unknown_ids_have_stable_codes() {
    let c = cluster().await;
    let ep = c.register_endpoint("api").await.unwrap();
    let f = c.register_function("noop", Runtime::Bench, "", false).await.unwrap();
    let missing_f = FunctionId::from_bytes([7; 16]);
    let missing_ep = EndpointId::from_bytes([8; 16]);
    let e = c.client.submit(&submit(missing_f, ep, b"x")).await.unwrap_err();
    assert_eq!(e.code(), Some("unknown_function"));
    let e = c.client.submit(&submit(f, missing_ep, b"x")).await.unwrap_err();
    assert_eq!(e.code(), Some("unknown_endpoint"));
    let e = c.client.status(TaskId::from_bytes([9; 16])).await.unwrap_err();
    assert_eq!(e.code(), Some("unknown_task"));
    let e = c.client.get_function(missing_f).await.unwrap_err();
    assert_eq!(e.code(), Some("unknown_function"));
}

#[tokio::test]
async fn oversized_payload_and_bad_batch_spec() {
    let c = cluster().await;
    let ep = c.register_endpoint("api").await.unwrap();
    let f = c.register_function("noop", Runtime::Bench, "", false).await.unwrap();
    let e = c.client.submit(&submit(f, ep, &[0u8; 4096])).await.unwrap_err();
    assert_eq!(e.code(), Some("payload_too_large"));
    let e = c
        .client
        .submit_batch(&BatchRequest {
            function_id: f,
            endpoint_id: ep,
            inputs: vec![Envelope::raw(b"a".to_vec())],
            batch_size: Some(0),
            batch_count: None,
            retriable: true,
        })
        .await
        .unwrap_err();
    assert_eq!(e.code(), Some("invalid_spec"));
}

#[tokio::test]
async fn queued_task_is_not_ready() {
    let c = cluster().await;
    let ep = c.register_endpoint("api").await.unwrap();
    let f = c.register_function("noop", Runtime::Bench, "", false).await.unwrap();
    let r = c.client.submit(&submit(f, ep, b"x")).await.unwrap();
    assert_eq!(r.states, vec![TaskState::Queued]);
    let e = c.client.result(r.task_ids[0], Duration::ZERO).await.unwrap_err();
    assert!(e.is_not_ready(), "{e}");
    let v = c.client.status(r.task_ids[0]).await.unwrap();
    assert_eq!(v.state, TaskState::Queued);
    assert_eq!(c.client.get_endpoint(ep).await.unwrap().queued, 1);
}

#[tokio::test]
async fn other_principals_need_permission() {
    let c = cluster().await;
    let ep = c.register_endpoint("private").await.unwrap();
    let f = c
        .client
        .register_function(&RegisterFunctionRequest {
            name: "shared".into(),
            body: b"noop".to_vec(),
            runtime: Runtime::Bench,
            container_tag: String::new(),
            memoize: false,
            allowed_principals: vec!["*".into()],
            function_id: None,
        })
        .await
        .unwrap()
        .function_id;
    let other = c.client.with_token("other-token");
    let e = other.submit(&submit(f, ep, b"x")).await.unwrap_err();
    assert_eq!(e.code(), Some("unauthorized"));
    // the owner can still submit
    c.client.submit(&submit(f, ep, b"x")).await.unwrap();
}

#[tokio::test]
async fn deleting_an_endpoint_aborts_its_queue() {
    let c = cluster().await;
    let ep = c.register_endpoint("doomed").await.unwrap();
    let f = c.register_function("noop", Runtime::Bench, "", false).await.unwrap();
    let r = c
        .client
        .submit(&SubmitRequest {
            function_id: f,
            endpoint_id: ep,
            input: None,
            inputs: Some((0..3).map(|i| Envelope::raw(vec![i])).collect()),
            retriable: true,
        })
        .await
        .unwrap();
    assert_eq!(c.client.delete_endpoint(ep).await.unwrap(), 3);
    for id in r.task_ids {
        assert_eq!(c.client.status(id).await.unwrap().state, TaskState::Failed);
    }
}
