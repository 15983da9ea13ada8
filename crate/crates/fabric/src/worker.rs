//! The worker: runs one task at a time for one container tag, speaking
//! frames over stdin and stdout.

use std::io::{self, Read, Write};
use std::process::{Command, Stdio};
use std::time::{Duration, Instant};

use fabric_core::frame::{FrameDecoder, MessageType};
use fabric_core::lifecycle::{ErrorKind, TaskError};
use fabric_core::messages::{from_envelope, TaskOutcome, TaskResult, WorkerHello, WorkerTask};
use fabric_core::{pack_envelopes, unpack_envelopes, BenchOp, Envelope, Runtime};

use crate::net::{empty_frame, json_frame, read_frame_blocking, write_frame_blocking, NetError, LINK_FRAME_CAP};

/// Serves tasks until the input closes or a shutdown frame arrives.
pub fn serve<R: Read, W: Write>(tag: &str, mut input: R, mut output: W) -> Result<(), NetError> {
    let hello = WorkerHello {
        tag: tag.to_string(),
        pid: std::process::id(),
    };
    write_frame_blocking(&mut output, &json_frame(MessageType::Heartbeat, &hello))?;
    let mut decoder = FrameDecoder::with_cap(LINK_FRAME_CAP);
    while let Some(m) = read_frame_blocking(&mut input, &mut decoder)? {
        match m.msg_type {
            MessageType::TaskDispatch => {
                let task = match from_envelope::<WorkerTask>(&m.body) {
                    Ok(t) => t,
                    Err(e) => {
                        tracing::warn!("worker: undecodable task: {e}");
                        continue;
                    }
                };
                let started = Instant::now();
                let outcome = execute(&task);
                let result = TaskResult {
                    task_id: task.task_id,
                    attempt: 0,
                    outcome,
                    t_w: started.elapsed(),
                    t_e: Duration::ZERO,
                };
                write_frame_blocking(&mut output, &json_frame(MessageType::TaskResult, &result))?;
            }
            MessageType::Heartbeat => write_frame_blocking(&mut output, &empty_frame(MessageType::HeartbeatAck))?,
            MessageType::ShutdownManager => break,
            other => tracing::warn!("worker: ignoring {other:?}"),
        }
    }
    Ok(())
}

/// Runs a task. A batch fails as a whole when any element fails.
pub fn execute(task: &WorkerTask) -> TaskOutcome {
    if !task.batch {
        return match run_one(task.runtime, &task.body, &task.input) {
            Ok(e) => TaskOutcome::Ok(e),
            Err(e) => TaskOutcome::Err(e),
        };
    }
    let items = match unpack_envelopes(&task.input) {
        Ok(i) => i,
        Err(e) => return TaskOutcome::Err(TaskError::new(ErrorKind::Execution, format!("bad batch input: {e}"))),
    };
    let mut out = Vec::with_capacity(items.len());
    for (i, item) in items.iter().enumerate() {
        match run_one(task.runtime, &task.body, item) {
            Ok(r) => out.push(r),
            Err(e) => {
                return TaskOutcome::Err(TaskError::new(e.kind, format!("batch element {i}: {}", e.message)));
            }
        }
    }
    TaskOutcome::Ok(pack_envelopes(&out))
}

fn run_one(runtime: Runtime, body: &[u8], input: &Envelope) -> Result<Envelope, TaskError> {
    match runtime {
        Runtime::Bench => run_bench(body, input),
        Runtime::Shell => run_shell(body, input),
    }
}

fn run_bench(body: &[u8], input: &Envelope) -> Result<Envelope, TaskError> {
    let op = BenchOp::parse(body).map_err(|e| TaskError::new(ErrorKind::Execution, e.to_string()))?;
    match op {
        BenchOp::Noop => Ok(Envelope::empty()),
        BenchOp::Echo => Ok(input.clone()),
        BenchOp::SleepMs(ms) => {
            std::thread::sleep(Duration::from_millis(ms));
            Ok(input.clone())
        }
        BenchOp::StressMs(ms) => {
            let end = Instant::now() + Duration::from_millis(ms);
            let mut x = 0u64;
            while Instant::now() < end {
                for i in 0..1000u64 {
                    x = std::hint::black_box(x.wrapping_mul(6364136223846793005).wrapping_add(i));
                }
            }
            Ok(input.clone())
        }
        BenchOp::Fail(msg) => Err(TaskError::new(ErrorKind::Execution, msg)),
    }
}

/// `sh -c body` with the input payload on stdin; stdout becomes a raw result.
fn run_shell(body: &[u8], input: &Envelope) -> Result<Envelope, TaskError> {
    let script = String::from_utf8_lossy(body).into_owned();
    let fail = |m: String| TaskError::new(ErrorKind::Execution, m);
    let mut child = Command::new("/bin/sh")
        .arg("-c")
        .arg(&script)
        .stdin(Stdio::piped())
        .stdout(Stdio::piped())
        .stderr(Stdio::piped())
        .spawn()
        .map_err(|e| fail(format!("cannot start shell: {e}")))?;
    let mut stdin = child.stdin.take().expect("piped");
    let payload = input.payload.clone();
    let feeder = std::thread::spawn(move || {
        let _ = stdin.write_all(&payload);
    });
    let out = child.wait_with_output().map_err(|e| fail(format!("shell failed: {e}")))?;
    let _ = feeder.join();
    if out.status.success() {
        Ok(Envelope::raw(out.stdout))
    } else {
        let err = String::from_utf8_lossy(&out.stderr);
        Err(fail(format!("{}: {}", out.status, err.trim())))
    }
}

/// Entry point of the worker binary.
pub fn main_with(tag: &str) -> io::Result<()> {
    let stdin = io::stdin().lock();
    let stdout = io::stdout().lock();
    serve(tag, stdin, stdout).map_err(|e| match e {
        NetError::Io(e) => e,
        other => io::Error::other(other),
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use fabric_core::frame::decode_frame;
    use fabric_core::TaskId;

    fn task(runtime: Runtime, body: &str, input: Envelope, batch: bool) -> WorkerTask {
        WorkerTask {
            task_id: TaskId::from_u128(5),
            runtime,
            body: body.as_bytes().to_vec(),
            input,
            batch,
        }
    }

    #[test]
    fn bench_ops() {
        let inp = Envelope::raw(b"x".to_vec());
        assert_eq!(execute(&task(Runtime::Bench, "noop", inp.clone(), false)), TaskOutcome::Ok(Envelope::empty()));
        assert_eq!(execute(&task(Runtime::Bench, "echo", inp.clone(), false)), TaskOutcome::Ok(inp.clone()));
        let t = Instant::now();
        assert_eq!(execute(&task(Runtime::Bench, "sleep_ms(30)", inp.clone(), false)), TaskOutcome::Ok(inp.clone()));
        assert!(t.elapsed() >= Duration::from_millis(30));
        match execute(&task(Runtime::Bench, "fail(boom)", inp.clone(), false)) {
            TaskOutcome::Err(e) => assert_eq!(e.message, "boom"),
            other => panic!("{other:?}"),
        }
        assert!(matches!(execute(&task(Runtime::Bench, "nope", inp, false)), TaskOutcome::Err(_)));
    }

    #[test]
    fn shell_runtime() {
        let out = execute(&task(Runtime::Shell, "tr a-z A-Z", Envelope::raw(b"hi".to_vec()), false));
        assert_eq!(out, TaskOutcome::Ok(Envelope::raw(b"HI".to_vec())));
        match execute(&task(Runtime::Shell, "echo bad >&2; exit 3", Envelope::empty(), false)) {
            TaskOutcome::Err(e) => assert!(e.message.contains("bad"), "{}", e.message),
            other => panic!("{other:?}"),
        }
    }

    #[test]
    fn batches_keep_order_and_fail_whole() {
        let items: Vec<Envelope> = (0..5u8).map(|i| Envelope::raw(vec![i])).collect();
        let packed = pack_envelopes(&items);
        match execute(&task(Runtime::Bench, "echo", packed.clone(), true)) {
            TaskOutcome::Ok(r) => assert_eq!(unpack_envelopes(&r).unwrap(), items),
            other => panic!("{other:?}"),
        }
        let script = "read x; [ \"$x\" != 3 ] && echo ok";
        let lines: Vec<Envelope> = (0..5).map(|i| Envelope::raw(format!("{i}\n").into_bytes())).collect();
        assert!(matches!(
            execute(&task(Runtime::Shell, script, pack_envelopes(&lines), true)),
            TaskOutcome::Err(e) if e.message.starts_with("batch element 3")
        ));
    }

    #[test]
    fn serve_speaks_frames() {
        let t = task(Runtime::Bench, "echo", Envelope::raw(b"abc".to_vec()), false);
        let mut input = json_frame(MessageType::TaskDispatch, &t);
        input.extend(empty_frame(MessageType::ShutdownManager));
        let mut output = Vec::new();
        serve("default", &input[..], &mut output).unwrap();
        let (hello, n) = decode_frame(&output).unwrap();
        assert_eq!(hello.msg_type, MessageType::Heartbeat);
        assert_eq!(from_envelope::<WorkerHello>(&hello.body).unwrap().tag, "default");
        let (res, _) = decode_frame(&output[n..]).unwrap();
        let r: TaskResult = from_envelope(&res.body).unwrap();
        assert_eq!(r.task_id, TaskId::from_u128(5));
        assert_eq!(r.outcome, TaskOutcome::Ok(Envelope::raw(b"abc".to_vec())));
    }
}
