use std::time::Duration;

use fabric::bench::cluster::{spawn_manager, AgentProc, Cluster};
use fabric::config::{CoordinatorConfig, ProviderKind};
use fabric::service::api::SubmitRequest;
use fabric_core::{Envelope, Runtime, TaskState};

#[tokio::test(flavor = "multi_thread", worker_threads = 2)]
async fn echo_round_trip_through_external_manager() {
    let cluster = Cluster::start(CoordinatorConfig::default()).await.unwrap();
    let ep = cluster.register_endpoint("e2e").await.unwrap();
    let f = cluster.register_function("echo", Runtime::Bench, "", false).await.unwrap();
    let dir = tempfile::tempdir().unwrap();
    let mut cfg = cluster.agent_config(ep, dir.path());
    cfg.provider.kind = ProviderKind::External;
    cfg.provider.workers_per_node = 2;
    let agent = AgentProc::spawn(&cfg).await.unwrap();
    let _m = spawn_manager(agent.addr, "n0", 2, &[]).unwrap();
    cluster.wait_managers(ep, 1, Duration::from_secs(20)).await.unwrap();

    let resp = cluster
        .client
        .submit(&SubmitRequest {
            function_id: f,
            endpoint_id: ep,
            input: Some(Envelope::raw(b"hello".to_vec())),
            inputs: None,
            retriable: true,
        })
        .await
        .unwrap();
    let id = resp.task_ids[0];
    let r = cluster.client.result(id, Duration::from_secs(20)).await.unwrap();
    assert_eq!(r.result.payload, b"hello");
    let view = cluster.client.status(id).await.unwrap();
    assert_eq!(view.state, TaskState::Succeeded);
}
