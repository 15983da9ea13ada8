//! Frame IO over byte streams.

use std::io::{self, Read, Write};

use fabric_core::frame::{encode_frame_into, FrameDecoder, FrameError, Message, MessageType};
use fabric_core::messages::to_envelope;
use fabric_core::Envelope;
use serde::Serialize;
use tokio::io::{AsyncRead, AsyncReadExt, AsyncWrite, AsyncWriteExt};
use tokio::sync::mpsc;

/// Frame cap on internal links. Control payloads are JSON with base64 data,
/// so a link frame must hold a full-size task input or result plus overhead.
pub const LINK_FRAME_CAP: usize = 8 << 20;

#[derive(Debug, thiserror::Error)]
pub enum NetError {
    #[error("io: {0}")]
    Io(#[from] io::Error),
    #[error("frame: {0}")]
    Frame(#[from] FrameError),
    #[error("peer closed the link")]
    Closed,
}

/// Encodes a frame for an internal link.
pub fn frame(msg_type: MessageType, env: &Envelope) -> Vec<u8> {
    let mut out = Vec::with_capacity(23 + env.payload.len());
    // payload size is bounded by LINK_FRAME_CAP at every call site
    let _ = encode_frame_into(&mut out, msg_type, env.routing_tag, env, LINK_FRAME_CAP);
    out
}

/// Encodes a frame carrying a JSON control message.
pub fn json_frame<T: Serialize>(msg_type: MessageType, msg: &T) -> Vec<u8> {
    frame(msg_type, &to_envelope(msg))
}

pub fn empty_frame(msg_type: MessageType) -> Vec<u8> {
    frame(msg_type, &Envelope::empty())
}

/// Reads frames from an async stream. Malformed frames are skipped.
pub struct FrameReader<R> {
    inner: R,
    decoder: FrameDecoder,
    buf: Vec<u8>,
}

impl<R: AsyncRead + Unpin> FrameReader<R> {
    pub fn new(inner: R) -> Self {
        FrameReader {
            inner,
            decoder: FrameDecoder::with_cap(LINK_FRAME_CAP),
            buf: vec![0; 64 * 1024],
        }
    }

    /// Next message, or `None` on a clean end of stream.
    pub async fn next(&mut self) -> Result<Option<Message>, NetError> {
        loop {
            match self.decoder.next_message() {
                Some(Ok(m)) => return Ok(Some(m)),
                Some(Err(e @ FrameError::FrameTooLarge { .. })) => return Err(e.into()),
                Some(Err(e)) => {
                    tracing::warn!("skipping malformed frame: {e}");
                    continue;
                }
                None => {}
            }
            let n = self.inner.read(&mut self.buf).await?;
            if n == 0 {
                return Ok(None);
            }
            self.decoder.push(&self.buf[..n]);
        }
    }
}

/// Spawns a task that reads frames and forwards them as `(tag, message)`;
/// it sends `(tag, None)` once when the stream ends or fails.
pub fn spawn_reader<R, T>(inner: R, tag: T, tx: mpsc::UnboundedSender<(T, Option<Message>)>) -> tokio::task::JoinHandle<()>
where
    R: AsyncRead + Unpin + Send + 'static,
    T: Clone + Send + 'static,
{
    spawn_frame_reader(FrameReader::new(inner), tag, tx)
}

/// [`spawn_reader`] for a reader that may already hold buffered bytes.
pub fn spawn_frame_reader<R, T>(
    mut reader: FrameReader<R>,
    tag: T,
    tx: mpsc::UnboundedSender<(T, Option<Message>)>,
) -> tokio::task::JoinHandle<()>
where
    R: AsyncRead + Unpin + Send + 'static,
    T: Clone + Send + 'static,
{
    tokio::spawn(async move {
        loop {
            match reader.next().await {
                Ok(Some(m)) => {
                    if tx.send((tag.clone(), Some(m))).is_err() {
                        return;
                    }
                }
                Ok(None) => break,
                Err(e) => {
                    tracing::debug!("link read failed: {e}");
                    break;
                }
            }
        }
        let _ = tx.send((tag, None));
    })
}

/// Spawns a task that writes queued frames, coalescing whatever is queued
/// into one write. Dropping every sender closes the stream.
pub fn spawn_writer<W>(mut inner: W) -> mpsc::UnboundedSender<Vec<u8>>
where
    W: AsyncWrite + Unpin + Send + 'static,
{
    let (tx, mut rx) = mpsc::unbounded_channel::<Vec<u8>>();
    tokio::spawn(async move {
        let mut out = Vec::new();
        while let Some(first) = rx.recv().await {
            out.clear();
            out.extend_from_slice(&first);
            while out.len() < 1 << 20 {
                match rx.try_recv() {
                    Ok(more) => out.extend_from_slice(&more),
                    Err(_) => break,
                }
            }
            if inner.write_all(&out).await.is_err() {
                break;
            }
        }
        let _ = inner.shutdown().await;
    });
    tx
}

/// Blocking read of one frame, for the worker's stdin.
pub fn read_frame_blocking<R: Read>(r: &mut R, decoder: &mut FrameDecoder) -> Result<Option<Message>, NetError> {
    let mut buf = [0u8; 16 * 1024];
    loop {
        match decoder.next_message() {
            Some(Ok(m)) => return Ok(Some(m)),
            Some(Err(e @ FrameError::FrameTooLarge { .. })) => return Err(e.into()),
            Some(Err(_)) => continue,
            None => {}
        }
        let n = match r.read(&mut buf) {
            Ok(n) => n,
            Err(e) if e.kind() == io::ErrorKind::Interrupted => continue,
            Err(e) => return Err(e.into()),
        };
        if n == 0 {
            return Ok(None);
        }
        decoder.push(&buf[..n]);
    }
}

pub fn write_frame_blocking<W: Write>(w: &mut W, bytes: &[u8]) -> io::Result<()> {
    w.write_all(bytes)?;
    w.flush()
}

#[cfg(test)]
mod tests {
    use super::*;
    use fabric_core::frame::decode_frame;
    use fabric_core::messages::{from_envelope, AgentAdvert};

    #[test]
    fn json_frames_decode() {
        let bytes = json_frame(MessageType::CapacityAdvert, &AgentAdvert { window: 9 });
        let (m, used) = decode_frame(&bytes).unwrap();
        assert_eq!(used, bytes.len());
        assert_eq!(m.msg_type, MessageType::CapacityAdvert);
        let a: AgentAdvert = from_envelope(&m.body).unwrap();
        assert_eq!(a.window, 9);
    }

    #[tokio::test]
    async fn reader_and_writer_over_a_pipe() {
        let (a, b) = tokio::io::duplex(64);
        let tx = spawn_writer(a);
        for i in 0..20u8 {
            tx.send(frame(MessageType::TaskAck, &Envelope::raw(vec![i; i as usize * 10]))).unwrap();
        }
        drop(tx);
        let mut r = FrameReader::new(b);
        for i in 0..20u8 {
            let m = r.next().await.unwrap().unwrap();
            assert_eq!(m.body.payload, vec![i; i as usize * 10]);
        }
        assert!(r.next().await.unwrap().is_none());
    }

    #[test]
    fn blocking_reader_skips_garbage_frames() {
        let mut bad = empty_frame(MessageType::Heartbeat);
        bad[4] = 9;
        let mut stream = bad;
        stream.extend(empty_frame(MessageType::TaskAck));
        let mut d = FrameDecoder::new();
        let mut cur = std::io::Cursor::new(stream);
        let m = read_frame_blocking(&mut cur, &mut d).unwrap().unwrap();
        assert_eq!(m.msg_type, MessageType::TaskAck);
        assert!(read_frame_blocking(&mut cur, &mut d).unwrap().is_none());
    }
}
