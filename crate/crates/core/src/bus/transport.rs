//! Framed byte protocol for carrying envelopes between processes.
//!
//! Only the in-process transport is wired up today; this module fixes the
//! wire boundary so another transport can reuse it. A frame is
//!
//! ```text
//! magic  4 bytes "NSMB"
//! len    u32 little-endian, length of body
//! body   canonical JSON encoding of the envelope
//! ```

use thiserror::Error;

use super::{Document, Envelope, MAX_PAYLOAD_LEN};

pub const FRAME_MAGIC: &[u8; 4] = b"NSMB";
const HEADER_LEN: usize = 8;
/// Envelope metadata on top of the payload limit.
pub const MAX_FRAME_BODY: usize = MAX_PAYLOAD_LEN + 64 * 1024;

#[derive(Debug, Error)]
pub enum FrameError {
    #[error("bad frame magic")]
    BadMagic,
    #[error("frame body of {0} bytes exceeds limit")]
    TooLarge(usize),
    #[error("malformed frame body: {0}")]
    Malformed(#[from] serde_json::Error),
}

/// Canonical document encoding. Object keys are sorted, so equal documents
/// always produce equal bytes.
pub fn encode_document(doc: &Document) -> Vec<u8> {
    serde_json::to_vec(doc).expect("JSON values always serialise")
}

pub fn decode_document(bytes: &[u8]) -> Result<Document, serde_json::Error> {
    serde_json::from_slice(bytes)
}

pub fn encode_frame(envelope: &Envelope) -> Result<Vec<u8>, FrameError> {
    let body = serde_json::to_vec(envelope)?;
    if body.len() > MAX_FRAME_BODY {
        return Err(FrameError::TooLarge(body.len()));
    }
    let mut out = Vec::with_capacity(HEADER_LEN + body.len());
    out.extend_from_slice(FRAME_MAGIC);
    out.extend_from_slice(&(body.len() as u32).to_le_bytes());
    out.extend_from_slice(&body);
    Ok(out)
}

/// Decodes one frame from the front of `buf`.
///
/// Returns `Ok(None)` when `buf` does not yet hold a whole frame, otherwise
/// the envelope and the number of bytes consumed.
pub fn decode_frame(buf: &[u8]) -> Result<Option<(Envelope, usize)>, FrameError> {
    if buf.len() < HEADER_LEN {
        if !FRAME_MAGIC.starts_with(&buf[..buf.len().min(4)]) {
            return Err(FrameError::BadMagic);
        }
        return Ok(None);
    }
    if &buf[..4] != FRAME_MAGIC {
        return Err(FrameError::BadMagic);
    }
    let len = u32::from_le_bytes(buf[4..8].try_into().expect("4 bytes")) as usize;
    if len > MAX_FRAME_BODY {
        return Err(FrameError::TooLarge(len));
    }
    if buf.len() < HEADER_LEN + len {
        return Ok(None);
    }
    let envelope = serde_json::from_slice(&buf[HEADER_LEN..HEADER_LEN + len])?;
    Ok(Some((envelope, HEADER_LEN + len)))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::bus::{MessageId, MessageKind, Topic};
    use proptest::prelude::*;
    use serde_json::json;

    fn sample() -> Envelope {
        Envelope::new(
            MessageId(0xabc),
            Topic::parse("svc/echo").unwrap(),
            "tester",
            MessageKind::Event,
            json!({"b": [1, 2.5, null], "a": {"x": "y"}}),
        )
        .with_header("trace", "1")
    }

    #[test]
    fn frame_round_trip_and_partial_reads() {
        let env = sample();
        let frame = encode_frame(&env).unwrap();
        for cut in 0..frame.len() {
            assert!(decode_frame(&frame[..cut]).unwrap().is_none());
        }
        let mut stream = frame.clone();
        stream.extend_from_slice(&frame);
        let (first, used) = decode_frame(&stream).unwrap().unwrap();
        assert_eq!(first, env);
        assert_eq!(used, frame.len());
    }

    #[test]
    fn bad_magic_is_rejected() {
        assert!(matches!(decode_frame(b"XX"), Err(FrameError::BadMagic)));
        let mut frame = encode_frame(&sample()).unwrap();
        frame[0] = b'Z';
        assert!(matches!(decode_frame(&frame), Err(FrameError::BadMagic)));
    }

    #[test]
    fn document_encoding_is_canonical() {
        let a = json!({"z": 1, "a": 2});
        let b = json!({"a": 2, "z": 1});
        assert_eq!(encode_document(&a), encode_document(&b));
    }

    fn arb_document() -> impl Strategy<Value = Document> {
        let leaf = prop_oneof![
            Just(Document::Null),
            any::<bool>().prop_map(Document::from),
            any::<i64>().prop_map(Document::from),
            any::<u64>().prop_map(Document::from),
            any::<f64>()
                .prop_filter("finite", |f| f.is_finite())
                .prop_map(Document::from),
            ".{0,12}".prop_map(Document::from),
        ];
        leaf.prop_recursive(4, 64, 6, |inner| {
            prop_oneof![
                prop::collection::vec(inner.clone(), 0..6).prop_map(Document::Array),
                prop::collection::btree_map(".{0,8}", inner, 0..6)
                    .prop_map(|m| Document::Object(m.into_iter().collect())),
            ]
        })
    }

    proptest! {
        #[test]
        fn document_round_trip(doc in arb_document()) {
            let bytes = encode_document(&doc);
            prop_assert_eq!(decode_document(&bytes).unwrap(), doc);
        }

        #[test]
        fn envelope_frame_round_trip(doc in arb_document(), id in any::<u128>()) {
            let mut env = sample();
            env.message_id = MessageId(id);
            env.payload = doc;
            let frame = encode_frame(&env).unwrap();
            let (back, used) = decode_frame(&frame).unwrap().unwrap();
            prop_assert_eq!(used, frame.len());
            prop_assert_eq!(back, env);
        }
    }
}
