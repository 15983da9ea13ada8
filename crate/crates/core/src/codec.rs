//! Serialization facade.
//!
//! A registry is an ordered list of codecs, fastest first. [`serialize`] tries
//! each in turn and records the first one that accepts the value in the
//! envelope header, so the receiving side only needs the header to decode.

use alloc::collections::BTreeMap;
use alloc::string::{String, ToString};
use alloc::vec::Vec;
use core::fmt;

use base64::Engine as _;
use serde::{Deserialize, Deserializer, Serialize, Serializer};

use crate::value::Value;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord)]
#[repr(u8)]
pub enum Codec {
    /// Identity codec: only accepts `Value::Bytes`.
    Raw = 0,
    /// UTF-8 JSON text. Rejects raw bytes and non-finite floats.
    Text = 1,
    /// Tagged binary encoding. Accepts every value.
    Binary = 2,
}

impl Codec {
    pub fn from_id(id: u8) -> Option<Codec> {
        match id {
            0 => Some(Codec::Raw),
            1 => Some(Codec::Text),
            2 => Some(Codec::Binary),
            _ => None,
        }
    }

    pub fn id(self) -> u8 {
        self as u8
    }

    /// Whether this codec can represent `value` exactly.
    pub fn accepts(self, value: &Value) -> bool {
        match self {
            Codec::Raw => matches!(value, Value::Bytes(_)),
            Codec::Text => !value.contains_bytes() && value.all_floats_finite(),
            Codec::Binary => true,
        }
    }

    fn encode(self, value: &Value) -> Vec<u8> {
        match self {
            Codec::Raw => match value {
                Value::Bytes(b) => b.clone(),
                _ => unreachable!("raw codec only accepts bytes"),
            },
            Codec::Text => text::encode(value),
            Codec::Binary => {
                let mut out = Vec::new();
                binary::encode(value, &mut out);
                out
            }
        }
    }

    fn decode(self, payload: &[u8]) -> Result<Value, String> {
        match self {
            Codec::Raw => Ok(Value::Bytes(payload.to_vec())),
            Codec::Text => text::decode(payload),
            Codec::Binary => binary::decode(payload),
        }
    }
}

impl fmt::Display for Codec {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            Codec::Raw => "raw",
            Codec::Text => "text",
            Codec::Binary => "binary",
        })
    }
}

/// Default registry: cheapest codec first.
pub const DEFAULT_REGISTRY: &[Codec] = &[Codec::Raw, Codec::Text, Codec::Binary];

#[derive(Debug, Clone, PartialEq, Eq, thiserror::Error)]
pub enum CodecError {
    #[error("codec registry is empty")]
    EmptyRegistry,
    #[error("no codec accepted the value (tried {tried:?})")]
    NoCodecAccepted { tried: Vec<Codec> },
    #[error("unknown codec id {0}")]
    UnknownCodec(u8),
    #[error("{codec} codec rejected payload: {reason}")]
    CorruptPayload { codec: Codec, reason: String },
}

/// A codec-tagged buffer with a 16-byte routing tag.
#[derive(Debug, Clone, PartialEq, Eq, Hash)]
pub struct Envelope {
    pub codec_id: u8,
    pub routing_tag: [u8; 16],
    pub payload: Vec<u8>,
}

impl Envelope {
    pub fn new(codec: Codec, payload: Vec<u8>) -> Self {
        Envelope {
            codec_id: codec.id(),
            routing_tag: [0; 16],
            payload,
        }
    }

    /// Raw-bytes envelope.
    pub fn raw(payload: impl Into<Vec<u8>>) -> Self {
        Envelope::new(Codec::Raw, payload.into())
    }

    pub fn empty() -> Self {
        Envelope::raw(Vec::new())
    }

    pub fn with_routing_tag(mut self, tag: [u8; 16]) -> Self {
        self.routing_tag = tag;
        self
    }

    pub fn codec(&self) -> Option<Codec> {
        Codec::from_id(self.codec_id)
    }

    pub fn len(&self) -> usize {
        self.payload.len()
    }

    pub fn is_empty(&self) -> bool {
        self.payload.is_empty()
    }
}

/// Serializes `value` with the first codec in `registry` that accepts it.
pub fn serialize(value: &Value, registry: &[Codec]) -> Result<Envelope, CodecError> {
    if registry.is_empty() {
        return Err(CodecError::EmptyRegistry);
    }
    for codec in registry {
        if codec.accepts(value) {
            return Ok(Envelope::new(*codec, codec.encode(value)));
        }
    }
    Err(CodecError::NoCodecAccepted {
        tried: registry.to_vec(),
    })
}

/// Decodes an envelope with the codec named in its header.
pub fn deserialize(env: &Envelope) -> Result<Value, CodecError> {
    let codec = env
        .codec()
        .ok_or(CodecError::UnknownCodec(env.codec_id))?;
    codec
        .decode(&env.payload)
        .map_err(|reason| CodecError::CorruptPayload { codec, reason })
}

// JSON shape: {"codec_id": 1, "routing_tag": "<32 hex>", "payload": "<base64>"}
#[derive(Serialize, Deserialize)]
struct EnvelopeRepr {
    codec_id: u8,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    routing_tag: Option<String>,
    payload: String,
}

impl Serialize for Envelope {
    fn serialize<S: Serializer>(&self, s: S) -> Result<S::Ok, S::Error> {
        let routing_tag = if self.routing_tag == [0; 16] {
            None
        } else {
            Some(hex::encode(self.routing_tag))
        };
        EnvelopeRepr {
            codec_id: self.codec_id,
            routing_tag,
            payload: base64::engine::general_purpose::STANDARD.encode(&self.payload),
        }
        .serialize(s)
    }
}

impl<'de> Deserialize<'de> for Envelope {
    fn deserialize<D: Deserializer<'de>>(d: D) -> Result<Self, D::Error> {
        use serde::de::Error;
        let repr = EnvelopeRepr::deserialize(d)?;
        let mut routing_tag = [0u8; 16];
        if let Some(tag) = repr.routing_tag {
            hex::decode_to_slice(&tag, &mut routing_tag).map_err(D::Error::custom)?;
        }
        let payload = base64::engine::general_purpose::STANDARD
            .decode(repr.payload.as_bytes())
            .map_err(D::Error::custom)?;
        Ok(Envelope {
            codec_id: repr.codec_id,
            routing_tag,
            payload,
        })
    }
}

mod text {
    use super::*;
    use serde_json::{Map, Number, Value as Json};

    fn to_json(v: &Value) -> Json {
        match v {
            Value::Null => Json::Null,
            Value::Bool(b) => Json::Bool(*b),
            Value::Int(i) => Json::Number((*i).into()),
            Value::Float(f) => Json::Number(Number::from_f64(*f).expect("finite float")),
            Value::Str(s) => Json::String(s.clone()),
            Value::Bytes(_) => unreachable!("text codec rejects bytes"),
            Value::List(items) => Json::Array(items.iter().map(to_json).collect()),
            Value::Map(m) => {
                let mut out = Map::new();
                for (k, v) in m {
                    out.insert(k.clone(), to_json(v));
                }
                Json::Object(out)
            }
        }
    }

    fn from_json(j: Json) -> Value {
        match j {
            Json::Null => Value::Null,
            Json::Bool(b) => Value::Bool(b),
            Json::Number(n) => match n.as_i64() {
                Some(i) => Value::Int(i),
                None => Value::Float(n.as_f64().unwrap_or(f64::NAN)),
            },
            Json::String(s) => Value::Str(s),
            Json::Array(items) => Value::List(items.into_iter().map(from_json).collect()),
            Json::Object(m) => Value::Map(m.into_iter().map(|(k, v)| (k, from_json(v))).collect()),
        }
    }

    pub fn encode(v: &Value) -> Vec<u8> {
        serde_json::to_vec(&to_json(v)).expect("json values always serialize")
    }

    pub fn decode(payload: &[u8]) -> Result<Value, String> {
        serde_json::from_slice::<Json>(payload)
            .map(from_json)
            .map_err(|e| e.to_string())
    }
}

mod binary {
    //! Layout: one tag byte per value followed by a fixed or length-prefixed body.
    //! Lengths and counts are u32 big-endian.
    use super::*;

    const NULL: u8 = 0;
    const FALSE: u8 = 1;
    const TRUE: u8 = 2;
    const INT: u8 = 3;
    const FLOAT: u8 = 4;
    const STR: u8 = 5;
    const BYTES: u8 = 6;
    const LIST: u8 = 7;
    const MAP: u8 = 8;

    const MAX_DEPTH: usize = 128;

    fn put_len(out: &mut Vec<u8>, n: usize) {
        out.extend_from_slice(&(n as u32).to_be_bytes());
    }

    pub fn encode(v: &Value, out: &mut Vec<u8>) {
        match v {
            Value::Null => out.push(NULL),
            Value::Bool(false) => out.push(FALSE),
            Value::Bool(true) => out.push(TRUE),
            Value::Int(i) => {
                out.push(INT);
                out.extend_from_slice(&i.to_be_bytes());
            }
            Value::Float(f) => {
                out.push(FLOAT);
                out.extend_from_slice(&f.to_bits().to_be_bytes());
            }
            Value::Str(s) => {
                out.push(STR);
                put_len(out, s.len());
                out.extend_from_slice(s.as_bytes());
            }
            Value::Bytes(b) => {
                out.push(BYTES);
                put_len(out, b.len());
                out.extend_from_slice(b);
            }
            Value::List(items) => {
                out.push(LIST);
                put_len(out, items.len());
                for item in items {
                    encode(item, out);
                }
            }
            Value::Map(m) => {
                out.push(MAP);
                put_len(out, m.len());
                for (k, v) in m {
                    put_len(out, k.len());
                    out.extend_from_slice(k.as_bytes());
                    encode(v, out);
                }
            }
        }
    }

    struct Reader<'a> {
        buf: &'a [u8],
        pos: usize,
    }

    impl<'a> Reader<'a> {
        fn take(&mut self, n: usize) -> Result<&'a [u8], String> {
            if self.buf.len() - self.pos < n {
                return Err("truncated payload".into());
            }
            let s = &self.buf[self.pos..self.pos + n];
            self.pos += n;
            Ok(s)
        }

        fn u8(&mut self) -> Result<u8, String> {
            Ok(self.take(1)?[0])
        }

        fn u32(&mut self) -> Result<usize, String> {
            let b = self.take(4)?;
            Ok(u32::from_be_bytes([b[0], b[1], b[2], b[3]]) as usize)
        }

        fn u64(&mut self) -> Result<u64, String> {
            let b = self.take(8)?;
            let mut a = [0u8; 8];
            a.copy_from_slice(b);
            Ok(u64::from_be_bytes(a))
        }

        fn string(&mut self) -> Result<String, String> {
            let n = self.u32()?;
            let raw = self.take(n)?;
            core::str::from_utf8(raw)
                .map(String::from)
                .map_err(|_| "invalid utf-8 in string".into())
        }

        fn value(&mut self, depth: usize) -> Result<Value, String> {
            if depth > MAX_DEPTH {
                return Err("nesting too deep".into());
            }
            Ok(match self.u8()? {
                NULL => Value::Null,
                FALSE => Value::Bool(false),
                TRUE => Value::Bool(true),
                INT => Value::Int(self.u64()? as i64),
                FLOAT => Value::Float(f64::from_bits(self.u64()?)),
                STR => Value::Str(self.string()?),
                BYTES => {
                    let n = self.u32()?;
                    Value::Bytes(self.take(n)?.to_vec())
                }
                LIST => {
                    let n = self.u32()?;
                    // every element needs at least one byte
                    if n > self.buf.len() - self.pos {
                        return Err("list count exceeds payload".into());
                    }
                    let mut items = Vec::with_capacity(n);
                    for _ in 0..n {
                        items.push(self.value(depth + 1)?);
                    }
                    Value::List(items)
                }
                MAP => {
                    let n = self.u32()?;
                    let mut m = BTreeMap::new();
                    for _ in 0..n {
                        let k = self.string()?;
                        let v = self.value(depth + 1)?;
                        if m.insert(k, v).is_some() {
                            return Err("duplicate map key".into());
                        }
                    }
                    Value::Map(m)
                }
                t => return Err(alloc::format!("unknown value tag {t}")),
            })
        }
    }

    pub fn decode(payload: &[u8]) -> Result<Value, String> {
        let mut r = Reader { buf: payload, pos: 0 };
        let v = r.value(0)?;
        if r.pos != payload.len() {
            return Err("trailing bytes after value".into());
        }
        Ok(v)
    }
}

/// Packs element envelopes into one binary-codec envelope holding a list of
/// `[codec_id] ++ payload` byte strings. Routing tags are not kept.
pub fn pack_envelopes(items: &[Envelope]) -> Envelope {
    let list = items
        .iter()
        .map(|e| {
            let mut b = Vec::with_capacity(1 + e.payload.len());
            b.push(e.codec_id);
            b.extend_from_slice(&e.payload);
            Value::Bytes(b)
        })
        .collect();
    Envelope::new(Codec::Binary, Codec::Binary.encode(&Value::List(list)))
}

/// Inverse of [`pack_envelopes`].
pub fn unpack_envelopes(env: &Envelope) -> Result<Vec<Envelope>, CodecError> {
    let corrupt = |reason: &str| CodecError::CorruptPayload {
        codec: Codec::Binary,
        reason: reason.to_string(),
    };
    if env.codec_id != Codec::Binary.id() {
        return Err(corrupt("batch payload must use the binary codec"));
    }
    let Value::List(items) = deserialize(env)? else {
        return Err(corrupt("batch payload is not a list"));
    };
    items
        .into_iter()
        .map(|v| match v {
            Value::Bytes(b) if !b.is_empty() => Ok(Envelope {
                codec_id: b[0],
                routing_tag: [0; 16],
                payload: b[1..].to_vec(),
            }),
            _ => Err(corrupt("batch element is not a tagged byte string")),
        })
        .collect()
}

#[cfg(test)]
mod tests {
    use super::*;
    use alloc::vec;
    use proptest::prelude::*;

    #[test]
    fn raw_bytes_use_identity_codec() {
        let env = serialize(&Value::Bytes(b"hello-world".to_vec()), DEFAULT_REGISTRY).unwrap();
        assert_eq!(env.codec_id, 0);
        assert_eq!(env.payload, b"hello-world");
    }

    #[test]
    fn structured_value_falls_through_to_text() {
        let mut m = BTreeMap::new();
        m.insert("a".to_string(), Value::Int(1));
        let env = serialize(&Value::Map(m), &[Codec::Raw, Codec::Text]).unwrap();
        assert_eq!(env.codec_id, 1);
        assert_eq!(env.payload, br#"{"a":1}"#);
    }

    #[test]
    fn nested_bytes_need_binary() {
        let v = Value::List(vec![Value::Int(1), Value::Bytes(vec![0xff])]);
        let err = serialize(&v, &[Codec::Raw, Codec::Text]).unwrap_err();
        assert_eq!(
            err,
            CodecError::NoCodecAccepted {
                tried: vec![Codec::Raw, Codec::Text]
            }
        );
        let env = serialize(&v, DEFAULT_REGISTRY).unwrap();
        assert_eq!(env.codec_id, 2);
        assert_eq!(deserialize(&env).unwrap(), v);
    }

    #[test]
    fn empty_registry_is_an_error() {
        assert_eq!(serialize(&Value::Null, &[]), Err(CodecError::EmptyRegistry));
    }

    #[test]
    fn deserialize_known_and_unknown() {
        assert_eq!(
            deserialize(&Envelope::raw(b"x".to_vec())).unwrap(),
            Value::Bytes(b"x".to_vec())
        );
        let bad = Envelope {
            codec_id: 255,
            routing_tag: [0; 16],
            payload: vec![],
        };
        assert_eq!(deserialize(&bad), Err(CodecError::UnknownCodec(255)));
    }

    #[test]
    fn corrupt_payloads_are_rejected() {
        let text = Envelope::new(Codec::Text, b"{not json".to_vec());
        assert!(matches!(
            deserialize(&text),
            Err(CodecError::CorruptPayload { codec: Codec::Text, .. })
        ));
        let bin = Envelope::new(Codec::Binary, vec![5, 0, 0, 0, 9, b'a']);
        assert!(matches!(
            deserialize(&bin),
            Err(CodecError::CorruptPayload { codec: Codec::Binary, .. })
        ));
        let trailing = Envelope::new(Codec::Binary, vec![0, 0]);
        assert!(deserialize(&trailing).is_err());
    }

    #[test]
    fn envelope_json_form() {
        let env = Envelope::raw(b"hi".to_vec()).with_routing_tag([1; 16]);
        let j = serde_json::to_string(&env).unwrap();
        assert_eq!(
            j,
            r#"{"codec_id":0,"routing_tag":"01010101010101010101010101010101","payload":"aGk="}"#
        );
        assert_eq!(serde_json::from_str::<Envelope>(&j).unwrap(), env);
        let plain: Envelope = serde_json::from_str(r#"{"codec_id":1,"payload":"MQ=="}"#).unwrap();
        assert_eq!(plain.routing_tag, [0; 16]);
        assert_eq!(plain.payload, b"1");
    }

    pub(crate) fn arb_value() -> impl Strategy<Value = Value> {
        let leaf = prop_oneof![
            Just(Value::Null),
            any::<bool>().prop_map(Value::Bool),
            any::<i64>().prop_map(Value::Int),
            any::<f64>().prop_map(Value::Float),
            ".{0,12}".prop_map(Value::Str),
            proptest::collection::vec(any::<u8>(), 0..24).prop_map(Value::Bytes),
        ];
        leaf.prop_recursive(4, 48, 6, |inner| {
            prop_oneof![
                proptest::collection::vec(inner.clone(), 0..6).prop_map(Value::List),
                proptest::collection::btree_map(".{0,8}", inner, 0..6).prop_map(Value::Map),
            ]
        })
    }

    proptest! {
        #![proptest_config(ProptestConfig::with_cases(1000))]

        // Covers all three codecs: bytes land on raw, finite byte-free values on
        // text, everything else on binary.
        #[test]
        fn facade_round_trip(v in arb_value()) {
            let env = serialize(&v, DEFAULT_REGISTRY).unwrap();
            prop_assert!(Codec::from_id(env.codec_id).unwrap().accepts(&v));
            prop_assert_eq!(deserialize(&env).unwrap(), v);
        }

        #[test]
        fn every_codec_round_trips_what_it_accepts(v in arb_value()) {
            for codec in DEFAULT_REGISTRY {
                if codec.accepts(&v) {
                    let env = serialize(&v, &[*codec]).unwrap();
                    prop_assert_eq!(env.codec_id, codec.id());
                    prop_assert_eq!(deserialize(&env).unwrap(), v.clone());
                }
            }
        }

        #[test]
        fn binary_decoder_never_panics(bytes in proptest::collection::vec(any::<u8>(), 0..64)) {
            let _ = deserialize(&Envelope::new(Codec::Binary, bytes));
        }
    }

    #[test]
    fn pack_unpack_round_trip() {
        let items = [
            Envelope::raw(b"a".to_vec()),
            Envelope::new(Codec::Text, b"{}".to_vec()),
            Envelope::raw(Vec::new()),
        ];
        let packed = pack_envelopes(&items);
        assert_eq!(packed.codec_id, Codec::Binary.id());
        assert_eq!(unpack_envelopes(&packed).unwrap(), items);
        assert!(unpack_envelopes(&pack_envelopes(&[])).unwrap().is_empty());
        assert!(unpack_envelopes(&Envelope::raw(b"x".to_vec())).is_err());
    }
}
