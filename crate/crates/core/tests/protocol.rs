use chunkflow::protocol::*;
use chunkflow::rlbridge::{Transition, TransitionSource};
use std::io::Cursor;

fn hex(s: &str) -> Vec<u8> {
    s.split_whitespace().map(|b| u8::from_str_radix(b, 16).unwrap()).collect()
}

// The frames worked through in docs/wire.md.
fn documented() -> Vec<(WireMessage, &'static str)> {
    vec![
        (
            WireMessage::new(0, Payload::Hello),
            "4c 52 57 50 01 00 00 00 00 00 00 00 00 00 00 00 00 00",
        ),
        (
            WireMessage::new(2, Payload::Observation(vec![1.0, -0.5])),
            "4c 52 57 50 01 01 02 00 00 00 00 00 00 00 14 00 00 00
             02 00 00 00 00 00 00 00 00 00 f0 3f 00 00 00 00 00 00 e0 bf",
        ),
        (
            WireMessage::new(
                2,
                Payload::ChunkReply {
                    action_dim: 2,
                    actions: vec![0.25, 1.5, 0.5, -1.0],
                },
            ),
            "4c 52 57 50 01 02 02 00 00 00 00 00 00 00 28 00 00 00
             02 00 00 00 04 00 00 00
             00 00 00 00 00 00 d0 3f 00 00 00 00 00 00 f8 3f
             00 00 00 00 00 00 e0 3f 00 00 00 00 00 00 f0 bf",
        ),
        (
            WireMessage::new(
                3,
                Payload::Error {
                    code: codes::DIM_MISMATCH,
                    text: "dim".into(),
                },
            ),
            "4c 52 57 50 01 05 03 00 00 00 00 00 00 00 09 00 00 00 03 00 03 00 00 00 64 69 6d",
        ),
        (
            WireMessage::new(
                9,
                Payload::Transition(Transition {
                    s: vec![1.0],
                    a: vec![0.5],
                    r: 2.0,
                    s_next: vec![1.5],
                    source: TransitionSource::Human,
                }),
            ),
            "4c 52 57 50 01 03 09 00 00 00 00 00 00 00 2d 00 00 00
             01 00 00 00 00 00 00 00 00 00 f0 3f
             01 00 00 00 00 00 00 00 00 00 e0 3f
             00 00 00 00 00 00 00 40
             01 00 00 00 00 00 00 00 00 00 f8 3f
             01",
        ),
        (
            WireMessage::new(
                7,
                Payload::ParamUpdate {
                    version: 4,
                    params: vec![],
                },
            ),
            "4c 52 57 50 01 04 07 00 00 00 00 00 00 00 0c 00 00 00 04 00 00 00 00 00 00 00 00 00 00 00",
        ),
    ]
}

#[test]
fn documented_frames_match_the_codec() {
    for (msg, text) in documented() {
        let bytes = hex(text);
        assert_eq!(encode(&msg).unwrap(), bytes, "{msg:?}");
        let (back, rest) = decode(&bytes).unwrap();
        assert!(rest.is_empty());
        assert_eq!(back, msg);
    }
}

#[test]
fn stream_of_frames_reads_back_in_order() {
    let mut buf = Vec::new();
    for (msg, _) in documented() {
        write_message(&mut buf, &msg).unwrap();
    }
    let mut r = Cursor::new(buf);
    for (msg, _) in documented() {
        assert_eq!(read_message(&mut r).unwrap().unwrap(), msg);
    }
    assert!(read_message(&mut r).unwrap().is_none());
}

#[test]
fn every_strict_prefix_is_truncated_or_bad() {
    for (msg, _) in documented() {
        let bytes = encode(&msg).unwrap();
        for n in 0..bytes.len() {
            assert!(decode(&bytes[..n]).is_err(), "{n} bytes of {msg:?}");
        }
    }
}

#[test]
fn header_faults_are_typed() {
    let good = encode(&WireMessage::new(1, Payload::Hello)).unwrap();
    let mut b = good.clone();
    b[0] = b'X';
    assert_eq!(decode(&b).unwrap_err(), DecodeError::BadMagic);
    let mut b = good.clone();
    b[4] = 2;
    assert_eq!(decode(&b).unwrap_err(), DecodeError::BadVersion(2));
    let mut b = good.clone();
    b[5] = 9;
    assert_eq!(decode(&b).unwrap_err(), DecodeError::UnknownKind(9));
    let mut b = good;
    b[14..18].copy_from_slice(&u32::MAX.to_le_bytes());
    assert!(matches!(decode(&b).unwrap_err(), DecodeError::Oversize(_)));
}

#[test]
fn ragged_chunk_is_malformed() {
    // Three values do not split into rows of two.
    let bytes = hex(
        "4c 52 57 50 01 02 02 00 00 00 00 00 00 00 20 00 00 00
         02 00 00 00 03 00 00 00
         00 00 00 00 00 00 f0 3f 00 00 00 00 00 00 f0 3f 00 00 00 00 00 00 f0 3f",
    );
    assert!(matches!(decode(&bytes), Err(DecodeError::MalformedBody(_))));
}
