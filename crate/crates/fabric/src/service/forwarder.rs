//! One forwarder per endpoint: accepts the agent's TCP link, pushes queued
//! tasks within the agent's window and feeds results back.

use std::collections::HashSet;
use std::sync::Arc;
use std::time::{Duration, Instant};

use fabric_core::frame::{Message, MessageType};
use fabric_core::messages::{
    from_envelope, AgentAdvert, AgentRegisterAck, AgentStatus, Dispatch, RegisterAgent, Results, TaskAck,
};
use fabric_core::{EndpointId, FunctionId};
use tokio::net::{TcpListener, TcpStream};
use tokio::sync::{mpsc, watch, Notify};

use super::Coordinator;
use crate::net::{empty_frame, json_frame, spawn_frame_reader, spawn_writer, FrameReader};

const MAX_TASKS_PER_FRAME: usize = 256;
const MAX_BYTES_PER_FRAME: usize = 2 << 20;

pub(super) async fn serve(
    coord: Arc<Coordinator>,
    id: EndpointId,
    listener: TcpListener,
    notify: Arc<Notify>,
    mut stop: watch::Receiver<bool>,
) {
    loop {
        tokio::select! {
            _ = stop.changed() => return,
            accepted = listener.accept() => match accepted {
                Ok((stream, peer)) => {
                    tracing::debug!("endpoint {id}: agent link from {peer}");
                    let _ = stream.set_nodelay(true);
                    tokio::spawn(session(coord.clone(), id, stream, notify.clone(), stop.clone()));
                }
                Err(e) => {
                    tracing::warn!("endpoint {id}: accept failed: {e}");
                    tokio::time::sleep(Duration::from_millis(50)).await;
                }
            },
        }
    }
}

async fn session(
    coord: Arc<Coordinator>,
    id: EndpointId,
    stream: TcpStream,
    notify: Arc<Notify>,
    mut stop: watch::Receiver<bool>,
) {
    let (rd, wr) = stream.into_split();
    let out = spawn_writer(wr);
    let mut reader = FrameReader::new(rd);
    let hb = coord.config().heartbeat;

    let first = match tokio::time::timeout(hb.timeout(), reader.next()).await {
        Ok(Ok(Some(m))) => m,
        _ => return,
    };
    let reg = match (first.msg_type, from_envelope::<RegisterAgent>(&first.body)) {
        (MessageType::RegisterAgent, Ok(r)) if r.endpoint_id == id => r,
        _ => {
            let _ = out.send(json_frame(MessageType::RegisterAck, &nack("expected REGISTER_AGENT for this endpoint")));
            return;
        }
    };
    if let Err(e) = coord.authenticate_agent(id, &reg.token) {
        let _ = out.send(json_frame(MessageType::RegisterAck, &nack(&e)));
        return;
    }
    let Some(session) = coord.attach_agent(id) else { return };
    let ack = AgentRegisterAck {
        ok: true,
        error: None,
        heartbeat_ms: hb.interval.as_millis() as u64,
        miss_threshold: hb.miss_threshold,
    };
    let _ = out.send(json_frame(MessageType::RegisterAck, &ack));

    let (tx, mut rx) = mpsc::unbounded_channel();
    let reader_task = spawn_frame_reader(reader, (), tx);
    let mut bodies = HashSet::new();
    let mut last_seen = Instant::now();
    let mut tick = tokio::time::interval(hb.interval.min(Duration::from_millis(250)));
    tick.set_missed_tick_behavior(tokio::time::MissedTickBehavior::Delay);

    loop {
        tokio::select! {
            _ = stop.changed() => break,
            msg = rx.recv() => {
                let Some(((), Some(m))) = msg else { break };
                last_seen = Instant::now();
                handle(&coord, id, session, &out, m);
            }
            _ = notify.notified() => {}
            _ = tick.tick() => {
                if last_seen.elapsed() > hb.timeout() {
                    tracing::warn!("endpoint {id}: agent heartbeat lost");
                    break;
                }
                if !coord.is_current(id, session) {
                    break;
                }
            }
        }
        if !push(&coord, id, session, &out, &mut bodies) {
            break;
        }
    }
    reader_task.abort();
    let n = coord.detach_agent(id, session);
    tracing::info!("endpoint {id}: agent session {session} closed, {n} tasks failed");
}

fn nack(msg: &str) -> AgentRegisterAck {
    AgentRegisterAck {
        ok: false,
        error: Some(msg.to_string()),
        heartbeat_ms: 0,
        miss_threshold: 0,
    }
}

fn handle(coord: &Coordinator, id: EndpointId, session: u64, out: &mpsc::UnboundedSender<Vec<u8>>, m: Message) {
    match m.msg_type {
        MessageType::Heartbeat => {
            let status = from_envelope::<AgentStatus>(&m.body).ok();
            coord.agent_seen(id, status, None);
            let _ = out.send(empty_frame(MessageType::HeartbeatAck));
        }
        MessageType::CapacityAdvert => match from_envelope::<AgentAdvert>(&m.body) {
            Ok(a) => coord.agent_seen(id, None, Some(a.window)),
            Err(e) => tracing::warn!("endpoint {id}: bad advert: {e}"),
        },
        MessageType::TaskResult => {
            let received = Instant::now();
            match from_envelope::<Results>(&m.body) {
                Ok(r) => coord.apply_results(id, session, r.results, received),
                Err(e) => tracing::warn!("endpoint {id}: bad results frame: {e}"),
            }
        }
        MessageType::TaskAck => match from_envelope::<TaskAck>(&m.body) {
            Ok(a) => coord.apply_acks(&a.events),
            Err(e) => tracing::warn!("endpoint {id}: bad ack frame: {e}"),
        },
        MessageType::HeartbeatAck => {}
        other => tracing::warn!("endpoint {id}: unexpected {other:?} from agent"),
    }
}

/// Sends as many dispatch frames as the window allows. Returns false when the
/// link is gone.
fn push(
    coord: &Coordinator,
    id: EndpointId,
    session: u64,
    out: &mpsc::UnboundedSender<Vec<u8>>,
    bodies: &mut HashSet<(FunctionId, u32)>,
) -> bool {
    loop {
        let started = Instant::now();
        let popped = coord.pop_dispatch(id, session, bodies, MAX_TASKS_PER_FRAME, MAX_BYTES_PER_FRAME);
        coord.wake(&popped.memo_completed);
        if popped.tasks.is_empty() {
            return !out.is_closed();
        }
        let ids: Vec<_> = popped.tasks.iter().map(|t| t.task_id).collect();
        let bytes = json_frame(MessageType::TaskDispatch, &Dispatch { tasks: popped.tasks });
        coord.add_forward_time(&ids, started.elapsed());
        if out.send(bytes).is_err() {
            return false;
        }
    }
}
