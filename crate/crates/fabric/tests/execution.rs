//! Task execution through real agent, manager and worker processes.

use std::time::{Duration, Instant};

use fabric::bench::cluster::{spawn_manager, AgentProc, Cluster, Proc};
use fabric::config::{CoordinatorConfig, ProviderKind};
use fabric::service::api::{BatchRequest, StatusRequest, SubmitRequest};
use fabric_core::{unpack_envelopes, EndpointId, Envelope, FunctionId, Runtime, TaskId, TaskState};

struct Setup {
    cluster: Cluster,
    ep: EndpointId,
    _agent: AgentProc,
    managers: Vec<Proc>,
    _dir: tempfile::TempDir,
}

async fn setup(n_managers: u32, workers: u32) -> Setup {
    let mut cfg = CoordinatorConfig::default();
    cfg.heartbeat.interval = Duration::from_millis(200);
    let cluster = Cluster::start(cfg).await.unwrap();
    let ep = cluster.register_endpoint("exec").await.unwrap();
    let dir = tempfile::tempdir().unwrap();
    let mut cfg = cluster.agent_config(ep, dir.path());
    cfg.provider.kind = ProviderKind::External;
    cfg.provider.workers_per_node = workers;
    cfg.heartbeat.interval = Duration::from_millis(200);
    let agent = AgentProc::spawn(&cfg).await.unwrap();
    let managers = (0..n_managers)
        .map(|i| spawn_manager(agent.addr, &format!("n{i}"), workers, &[]).unwrap())
        .collect();
    cluster.wait_managers(ep, n_managers as usize, Duration::from_secs(20)).await.unwrap();
    Setup {
        cluster,
        ep,
        _agent: agent,
        managers,
        _dir: dir,
    }
}

fn inputs(n: usize, prefix: &str) -> Vec<Envelope> {
    (0..n).map(|i| Envelope::raw(format!("{prefix}{i}").into_bytes())).collect()
}

async fn submit_all(s: &Setup, f: FunctionId, inputs: Vec<Envelope>) -> Vec<TaskId> {
    s.cluster
        .client
        .submit(&SubmitRequest {
            function_id: f,
            endpoint_id: s.ep,
            input: None,
            inputs: Some(inputs),
            retriable: true,
        })
        .await
        .unwrap()
        .task_ids
}

async fn wait_terminal(s: &Setup, ids: &[TaskId], limit: Duration) -> Vec<TaskState> {
    let deadline = Instant::now() + limit;
    loop {
        let views = s
            .cluster
            .client
            .status_many(&StatusRequest {
                task_ids: ids.to_vec(),
                transitions: false,
            })
            .await
            .unwrap()
            .tasks;
        if views.iter().all(|v| v.state.is_terminal()) || Instant::now() > deadline {
            return views.into_iter().map(|v| v.state).collect();
        }
        tokio::time::sleep(Duration::from_millis(100)).await;
    }
}

#[tokio::test(flavor = "multi_thread", worker_threads = 2)]
async fn one_worker_runs_ten_noops() {
    let s = setup(1, 1).await;
    let f = s.cluster.register_function("noop", Runtime::Bench, "", false).await.unwrap();
    let ids = submit_all(&s, f, inputs(10, "n")).await;
    let states = wait_terminal(&s, &ids, Duration::from_secs(30)).await;
    assert_eq!(states, vec![TaskState::Succeeded; 10]);
}

#[tokio::test(flavor = "multi_thread", worker_threads = 2)]
async fn failing_function_reports_its_message() {
    let s = setup(1, 1).await;
    let f = s.cluster.register_function("fail(boom)", Runtime::Bench, "", false).await.unwrap();
    let ids = submit_all(&s, f, inputs(1, "x")).await;
    assert_eq!(wait_terminal(&s, &ids, Duration::from_secs(30)).await, vec![TaskState::Failed]);
    let e = s.cluster.client.result(ids[0], Duration::ZERO).await.unwrap_err();
    assert_eq!(e.code(), Some("task_failed"));
    assert!(e.to_string().contains("boom"), "{e}");
}

#[tokio::test(flavor = "multi_thread", worker_threads = 2)]
async fn shell_runtime_pipes_input_through_a_command() {
    let s = setup(1, 1).await;
    let f = s.cluster.register_function("tr a-z A-Z", Runtime::Shell, "", false).await.unwrap();
    let ids = submit_all(&s, f, vec![Envelope::raw(b"shout".to_vec())]).await;
    let r = s.cluster.client.result(ids[0], Duration::from_secs(30)).await.unwrap();
    assert_eq!(r.result.payload, b"SHOUT");
}

#[tokio::test(flavor = "multi_thread", worker_threads = 2)]
async fn user_batches_return_results_in_input_order() {
    let s = setup(1, 2).await;
    let f = s.cluster.register_function("echo", Runtime::Bench, "", false).await.unwrap();
    let items = inputs(10, "item-");
    let resp = s
        .cluster
        .client
        .submit_batch(&BatchRequest {
            function_id: f,
            endpoint_id: s.ep,
            inputs: items.clone(),
            batch_size: Some(4),
            batch_count: None,
            retriable: true,
        })
        .await
        .unwrap();
    assert_eq!(resp.sizes, vec![4, 4, 2]);
    let mut got = Vec::new();
    for id in &resp.task_ids {
        let r = s.cluster.client.result(*id, Duration::from_secs(30)).await.unwrap();
        got.extend(unpack_envelopes(&r.result).unwrap());
    }
    let want: Vec<Vec<u8>> = items.iter().map(|e| e.payload.clone()).collect();
    let got: Vec<Vec<u8>> = got.into_iter().map(|e| e.payload).collect();
    assert_eq!(got, want);
}

#[tokio::test(flavor = "multi_thread", worker_threads = 2)]
async fn memoized_function_answers_repeats_from_cache() {
    let s = setup(1, 1).await;
    let f = s.cluster.register_function("sleep_ms(300)", Runtime::Bench, "", true).await.unwrap();
    let first = submit_all(&s, f, vec![Envelope::raw(b"same".to_vec())]).await;
    let r1 = s.cluster.client.result(first[0], Duration::from_secs(30)).await.unwrap();
    let start = Instant::now();
    let second = submit_all(&s, f, vec![Envelope::raw(b"same".to_vec())]).await;
    let r2 = s.cluster.client.result(second[0], Duration::from_secs(30)).await.unwrap();
    assert!(start.elapsed() < Duration::from_millis(300), "{:?}", start.elapsed());
    assert_eq!(r1.result, r2.result);
    let ep = s.cluster.client.get_endpoint(s.ep).await.unwrap();
    assert_eq!(ep.counters.memo_hits, 1);

    // a different input still executes
    let third = submit_all(&s, f, vec![Envelope::raw(b"other".to_vec())]).await;
    s.cluster.client.result(third[0], Duration::from_secs(30)).await.unwrap();
    assert_eq!(s.cluster.client.get_endpoint(s.ep).await.unwrap().counters.memo_hits, 1);
}

#[tokio::test(flavor = "multi_thread", worker_threads = 2)]
async fn killed_manager_loses_no_retriable_tasks() {
    let mut s = setup(2, 2).await;
    let f = s.cluster.register_function("sleep_ms(200)", Runtime::Bench, "", false).await.unwrap();
    let ids = submit_all(&s, f, inputs(40, "t")).await;
    tokio::time::sleep(Duration::from_millis(500)).await;
    s.managers[0].kill();
    let states = wait_terminal(&s, &ids, Duration::from_secs(60)).await;
    assert_eq!(states, vec![TaskState::Succeeded; 40]);
    let ep = s.cluster.client.get_endpoint(s.ep).await.unwrap();
    let managers = ep.agent.map_or(0, |a| a.managers.len());
    assert_eq!(managers, 1, "the dead manager should be dropped");
}

#[tokio::test(flavor = "multi_thread", worker_threads = 2)]
async fn agent_with_a_bad_token_exits() {
    let cluster = Cluster::start(CoordinatorConfig::default()).await.unwrap();
    let ep = cluster.register_endpoint("auth").await.unwrap();
    let dir = tempfile::tempdir().unwrap();
    let mut cfg = cluster.agent_config(ep, dir.path());
    cfg.token = "wrong".into();
    cfg.provider.kind = ProviderKind::External;
    let mut agent = AgentProc::spawn(&cfg).await.unwrap();
    let deadline = Instant::now() + Duration::from_secs(20);
    let status = loop {
        if let Some(st) = agent.proc.try_wait() {
            break st;
        }
        assert!(Instant::now() < deadline, "agent kept running with a rejected token");
        tokio::time::sleep(Duration::from_millis(50)).await;
    };
    assert_eq!(status.code(), Some(3));
}
