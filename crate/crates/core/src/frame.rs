//! Length-prefixed frames for every link in the fabric.
//!
//! ```text
//! +----------------+---------+----------+----------------+----------+---------+
//! | length u32 BE  | version | msg_type | correlation 16 | codec_id | payload |
//! +----------------+---------+----------+----------------+----------+---------+
//! ```
//! `length` counts every byte after itself, so it is at least 19.

use alloc::vec::Vec;

use crate::codec::Envelope;
use crate::PAYLOAD_CAP;

pub const VERSION: u8 = 0x01;
/// Bytes after the length field that are not payload.
pub const HEADER_LEN: usize = 19;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
#[repr(u8)]
pub enum MessageType {
    RegisterAgent = 0x01,
    RegisterAck = 0x02,
    Heartbeat = 0x03,
    HeartbeatAck = 0x04,
    TaskDispatch = 0x05,
    TaskResult = 0x06,
    CapacityAdvert = 0x07,
    RegisterManager = 0x08,
    SuspendManager = 0x09,
    ShutdownManager = 0x0A,
    TaskAck = 0x0B,
}

impl MessageType {
    pub const ALL: [MessageType; 11] = [
        MessageType::RegisterAgent,
        MessageType::RegisterAck,
        MessageType::Heartbeat,
        MessageType::HeartbeatAck,
        MessageType::TaskDispatch,
        MessageType::TaskResult,
        MessageType::CapacityAdvert,
        MessageType::RegisterManager,
        MessageType::SuspendManager,
        MessageType::ShutdownManager,
        MessageType::TaskAck,
    ];

    pub fn from_code(code: u8) -> Option<MessageType> {
        MessageType::ALL.iter().copied().find(|m| *m as u8 == code)
    }

    pub fn code(self) -> u8 {
        self as u8
    }
}

/// One decoded frame. `body.routing_tag` carries the correlation id.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Message {
    pub msg_type: MessageType,
    pub body: Envelope,
}

impl Message {
    pub fn new(msg_type: MessageType, body: Envelope) -> Self {
        Message { msg_type, body }
    }

    pub fn correlation_id(&self) -> [u8; 16] {
        self.body.routing_tag
    }
}

#[derive(Debug, Clone, PartialEq, Eq, thiserror::Error)]
pub enum FrameError {
    #[error("need {needed} more bytes")]
    NeedMoreBytes { needed: usize },
    #[error("payload of {size} bytes exceeds cap of {cap}")]
    FrameTooLarge { size: usize, cap: usize },
    #[error("unsupported frame version {byte:#04x}")]
    BadVersion { byte: u8, consumed: usize },
    #[error("unknown message type {byte:#04x}")]
    UnknownMessageType { byte: u8, consumed: usize },
    #[error("declared frame length {length} is below the header size")]
    Truncated { length: usize, consumed: usize },
}

impl FrameError {
    /// Bytes the decoder skipped for a malformed frame, if any.
    pub fn consumed(&self) -> usize {
        match self {
            FrameError::BadVersion { consumed, .. }
            | FrameError::UnknownMessageType { consumed, .. }
            | FrameError::Truncated { consumed, .. } => *consumed,
            _ => 0,
        }
    }
}

/// Encodes one frame with the default 1 MiB payload cap.
pub fn encode_frame(msg_type: MessageType, correlation_id: [u8; 16], env: &Envelope) -> Result<Vec<u8>, FrameError> {
    let mut out = Vec::with_capacity(4 + HEADER_LEN + env.payload.len());
    encode_frame_into(&mut out, msg_type, correlation_id, env, PAYLOAD_CAP)?;
    Ok(out)
}

/// Appends one frame to `out`. The envelope's own routing tag is not written;
/// `correlation_id` fills that slot.
pub fn encode_frame_into(
    out: &mut Vec<u8>,
    msg_type: MessageType,
    correlation_id: [u8; 16],
    env: &Envelope,
    cap: usize,
) -> Result<(), FrameError> {
    if env.payload.len() > cap {
        return Err(FrameError::FrameTooLarge {
            size: env.payload.len(),
            cap,
        });
    }
    let length = (HEADER_LEN + env.payload.len()) as u32;
    out.extend_from_slice(&length.to_be_bytes());
    out.push(VERSION);
    out.push(msg_type.code());
    out.extend_from_slice(&correlation_id);
    out.push(env.codec_id);
    out.extend_from_slice(&env.payload);
    Ok(())
}

/// Decodes the first frame in `bytes`, returning the message and the number
/// of bytes consumed. Malformed frames still consume their declared length.
pub fn decode_frame(bytes: &[u8]) -> Result<(Message, usize), FrameError> {
    decode_frame_capped(bytes, PAYLOAD_CAP)
}

pub fn decode_frame_capped(bytes: &[u8], cap: usize) -> Result<(Message, usize), FrameError> {
    if bytes.len() < 4 {
        return Err(FrameError::NeedMoreBytes { needed: 4 - bytes.len() });
    }
    let length = u32::from_be_bytes([bytes[0], bytes[1], bytes[2], bytes[3]]) as usize;
    let total = 4 + length;
    if length < HEADER_LEN {
        if bytes.len() < total {
            return Err(FrameError::NeedMoreBytes { needed: total - bytes.len() });
        }
        return Err(FrameError::Truncated { length, consumed: total });
    }
    if length - HEADER_LEN > cap {
        return Err(FrameError::FrameTooLarge {
            size: length - HEADER_LEN,
            cap,
        });
    }
    if bytes.len() < total {
        return Err(FrameError::NeedMoreBytes { needed: total - bytes.len() });
    }
    let version = bytes[4];
    if version != VERSION {
        return Err(FrameError::BadVersion {
            byte: version,
            consumed: total,
        });
    }
    let msg_type = MessageType::from_code(bytes[5]).ok_or(FrameError::UnknownMessageType {
        byte: bytes[5],
        consumed: total,
    })?;
    let mut routing_tag = [0u8; 16];
    routing_tag.copy_from_slice(&bytes[6..22]);
    let body = Envelope {
        codec_id: bytes[22],
        routing_tag,
        payload: bytes[23..total].to_vec(),
    };
    Ok((Message { msg_type, body }, total))
}

/// Incremental decoder for one byte stream.
#[derive(Debug, Default)]
pub struct FrameDecoder {
    buf: Vec<u8>,
    start: usize,
    cap: Option<usize>,
}

impl FrameDecoder {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn with_cap(cap: usize) -> Self {
        FrameDecoder {
            cap: Some(cap),
            ..Self::default()
        }
    }

    pub fn push(&mut self, bytes: &[u8]) {
        if self.start > 0 && self.start == self.buf.len() {
            self.buf.clear();
            self.start = 0;
        } else if self.start > 64 * 1024 && self.start * 2 > self.buf.len() {
            self.buf.drain(..self.start);
            self.start = 0;
        }
        self.buf.extend_from_slice(bytes);
    }

    pub fn buffered(&self) -> usize {
        self.buf.len() - self.start
    }

    /// Next complete message, `None` when more bytes are needed.
    ///
    /// `FrameTooLarge` is not recoverable; the caller should drop the stream.
    pub fn next_message(&mut self) -> Option<Result<Message, FrameError>> {
        let pending = &self.buf[self.start..];
        match decode_frame_capped(pending, self.cap.unwrap_or(PAYLOAD_CAP)) {
            Ok((msg, used)) => {
                self.start += used;
                Some(Ok(msg))
            }
            Err(FrameError::NeedMoreBytes { .. }) => None,
            Err(e) => {
                self.start += e.consumed();
                Some(Err(e))
            }
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::codec::Codec;
    use alloc::vec;
    use proptest::prelude::*;
    use rand::{Rng, SeedableRng};

    #[test]
    fn empty_heartbeat_is_23_bytes() {
        let bytes = encode_frame(MessageType::Heartbeat, [0; 16], &Envelope::empty()).unwrap();
        let mut expected = vec![0x00, 0x00, 0x00, 0x13, 0x01, 0x03];
        expected.extend_from_slice(&[0; 16]);
        expected.push(0x00);
        assert_eq!(bytes, expected);
    }

    #[test]
    fn payload_cap_enforced() {
        let env = Envelope::raw(vec![0u8; PAYLOAD_CAP + 1]);
        assert_eq!(
            encode_frame(MessageType::TaskResult, [0; 16], &env),
            Err(FrameError::FrameTooLarge {
                size: PAYLOAD_CAP + 1,
                cap: PAYLOAD_CAP
            })
        );
        let ok = Envelope::raw(vec![0u8; PAYLOAD_CAP]);
        assert!(encode_frame(MessageType::TaskResult, [0; 16], &ok).is_ok());
    }

    #[test]
    fn short_input_needs_more() {
        assert_eq!(decode_frame(&[0, 0, 0]), Err(FrameError::NeedMoreBytes { needed: 1 }));
        let frame = encode_frame(MessageType::Heartbeat, [0; 16], &Envelope::empty()).unwrap();
        assert!(matches!(
            decode_frame(&frame[..10]),
            Err(FrameError::NeedMoreBytes { needed: 13 })
        ));
    }

    #[test]
    fn bad_version_and_type_consume_frame() {
        let mut frame = encode_frame(MessageType::Heartbeat, [0; 16], &Envelope::empty()).unwrap();
        frame[4] = 0x02;
        assert_eq!(
            decode_frame(&frame),
            Err(FrameError::BadVersion { byte: 0x02, consumed: 23 })
        );
        frame[4] = 0x01;
        frame[5] = 0x7f;
        assert_eq!(
            decode_frame(&frame),
            Err(FrameError::UnknownMessageType { byte: 0x7f, consumed: 23 })
        );

        // the decoder skips the bad frame and continues
        let good = encode_frame(MessageType::TaskAck, [7; 16], &Envelope::empty()).unwrap();
        let mut d = FrameDecoder::new();
        d.push(&frame);
        d.push(&good);
        assert!(d.next_message().unwrap().is_err());
        let m = d.next_message().unwrap().unwrap();
        assert_eq!(m.msg_type, MessageType::TaskAck);
        assert_eq!(m.correlation_id(), [7; 16]);
        assert!(d.next_message().is_none());
    }

    #[test]
    fn undersized_length_is_rejected() {
        let mut raw = vec![0, 0, 0, 2];
        raw.extend_from_slice(&[1, 3]);
        assert_eq!(decode_frame(&raw), Err(FrameError::Truncated { length: 2, consumed: 6 }));
    }

    fn random_message(rng: &mut impl Rng) -> Message {
        let msg_type = MessageType::ALL[rng.random_range(0..MessageType::ALL.len())];
        let mut tag = [0u8; 16];
        rng.fill(&mut tag[..]);
        let len = if rng.random_bool(0.1) { rng.random_range(0..5000) } else { rng.random_range(0..64) };
        let payload: Vec<u8> = (0..len).map(|_| rng.random()).collect();
        let codec = Codec::from_id(rng.random_range(0..3)).unwrap();
        Message::new(msg_type, Envelope::new(codec, payload).with_routing_tag(tag))
    }

    #[test]
    fn thousand_random_round_trips() {
        let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(11);
        for _ in 0..1000 {
            let m = random_message(&mut rng);
            let bytes = encode_frame(m.msg_type, m.correlation_id(), &m.body).unwrap();
            let (back, used) = decode_frame(&bytes).unwrap();
            assert_eq!(used, bytes.len());
            assert_eq!(back, m);
        }
    }

    #[test]
    fn streaming_reassembly_of_50_frames() {
        let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(12);
        for _ in 0..20 {
            let msgs: Vec<Message> = (0..50).map(|_| random_message(&mut rng)).collect();
            let mut stream = Vec::new();
            for m in &msgs {
                encode_frame_into(&mut stream, m.msg_type, m.correlation_id(), &m.body, PAYLOAD_CAP).unwrap();
            }
            let mut d = FrameDecoder::new();
            let mut got = Vec::new();
            let mut pos = 0;
            while pos < stream.len() {
                let n = rng.random_range(1..=stream.len().min(700)).min(stream.len() - pos);
                d.push(&stream[pos..pos + n]);
                pos += n;
                while let Some(m) = d.next_message() {
                    got.push(m.unwrap());
                }
            }
            assert_eq!(got, msgs);
            assert_eq!(d.buffered(), 0);
        }
    }

    proptest! {
        #[test]
        fn segmentation_never_changes_decoded_stream(
            payloads in proptest::collection::vec(proptest::collection::vec(any::<u8>(), 0..200), 1..20),
            cuts in proptest::collection::vec(1usize..64, 1..200),
        ) {
            let mut stream = Vec::new();
            let mut expected = Vec::new();
            for (i, p) in payloads.iter().enumerate() {
                let m = Message::new(MessageType::ALL[i % 11], Envelope::raw(p.clone()).with_routing_tag([i as u8; 16]));
                encode_frame_into(&mut stream, m.msg_type, m.correlation_id(), &m.body, PAYLOAD_CAP).unwrap();
                expected.push(m);
            }
            let mut d = FrameDecoder::new();
            let mut got = Vec::new();
            let mut pos = 0;
            let mut cut = cuts.iter().cycle();
            while pos < stream.len() {
                let n = (*cut.next().unwrap()).min(stream.len() - pos);
                d.push(&stream[pos..pos + n]);
                pos += n;
                while let Some(m) = d.next_message() {
                    got.push(m.unwrap());
                }
            }
            prop_assert_eq!(got, expected);
        }

        #[test]
        fn decoder_never_panics(bytes in proptest::collection::vec(any::<u8>(), 0..128)) {
            let mut d = FrameDecoder::new();
            d.push(&bytes);
            for _ in 0..8 {
                if d.next_message().is_none() { break; }
            }
        }
    }
}
