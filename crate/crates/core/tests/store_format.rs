use std::collections::BTreeMap;

use proptest::prelude::*;
use upcycle_core::store::{self, decode, encode, Archive, ArchiveKind, Stored};
use upcycle_core::{Checkpoint, FormatError, TaskVector, Tensor};

fn raw(version: u8, pad: [u8; 3], header: &str, payload: &[u8]) -> Vec<u8> {
    let mut out = b"UPCK".to_vec();
    out.push(version);
    out.extend_from_slice(&pad);
    out.extend_from_slice(&(header.len() as u64).to_le_bytes());
    out.extend_from_slice(header.as_bytes());
    out.extend_from_slice(payload);
    out
}

fn floats(v: &[f32]) -> Vec<u8> {
    v.iter().flat_map(|x| x.to_le_bytes()).collect()
}

const GOOD: &str = r#"{"kind":"checkpoint","meta":{},"tensors":{"w":{"shape":[2],"dtype":"f32","offset":0,"nbytes":8}}}"#;

#[test]
fn handcrafted_file_decodes() {
    let a = decode(&raw(1, [0; 3], GOOD, &floats(&[1.5, -2.0]))).unwrap();
    assert_eq!(a.tensors["w"].data(), &[1.5, -2.0]);
}

#[test]
fn malformed_files_rejected_with_their_class() {
    let payload = floats(&[1.5, -2.0]);
    let mut bad_magic = raw(1, [0; 3], GOOD, &payload);
    bad_magic[0] = b'X';
    let mut short_header = raw(1, [0; 3], GOOD, &payload);
    short_header[8..16].copy_from_slice(&(10_000u64).to_le_bytes());

    let cases: Vec<(&str, Vec<u8>, fn(&FormatError) -> bool)> = vec![
        ("magic", bad_magic, |e| matches!(e, FormatError::BadMagic)),
        ("version", raw(2, [0; 3], GOOD, &payload), |e| matches!(e, FormatError::UnsupportedVersion(2))),
        ("padding", raw(1, [0, 1, 0], GOOD, &payload), |e| matches!(e, FormatError::NonZeroPadding)),
        ("header length", short_header, |e| matches!(e, FormatError::HeaderTruncated)),
        ("json", raw(1, [0; 3], "{not json", &payload), |e| matches!(e, FormatError::MalformedHeader(_))),
        (
            "kind",
            raw(1, [0; 3], &GOOD.replace("checkpoint", "blob"), &payload),
            |e| matches!(e, FormatError::UnknownKind(_)),
        ),
        (
            "dtype",
            raw(1, [0; 3], &GOOD.replace("f32", "f16"), &payload),
            |e| matches!(e, FormatError::UnsupportedDtype { .. }),
        ),
        (
            "extent",
            raw(1, [0; 3], &GOOD.replace("\"nbytes\":8", "\"nbytes\":12"), &payload),
            |e| matches!(e, FormatError::ExtentMismatch(_)),
        ),
        ("truncated", raw(1, [0; 3], GOOD, &payload[..6]), |e| matches!(e, FormatError::PayloadTruncated)),
        (
            "overlap",
            raw(
                1,
                [0; 3],
                r#"{"kind":"checkpoint","meta":{},"tensors":{"a":{"shape":[2],"dtype":"f32","offset":0,"nbytes":8},"b":{"shape":[1],"dtype":"f32","offset":4,"nbytes":4}}}"#,
                &floats(&[1.0, 2.0, 3.0]),
            ),
            |e| matches!(e, FormatError::OverlappingOffsets(_)),
        ),
        ("trailing", raw(1, [0; 3], GOOD, &floats(&[1.0, 2.0, 3.0])), |e| matches!(e, FormatError::TrailingBytes)),
        (
            "gap",
            raw(1, [0; 3], &GOOD.replace("\"offset\":0", "\"offset\":4"), &floats(&[1.0, 2.0, 3.0])),
            |e| matches!(e, FormatError::PayloadGap(_)),
        ),
        ("nan", raw(1, [0; 3], GOOD, &floats(&[1.0, f32::NAN])), |e| matches!(e, FormatError::NonFinite(_))),
    ];
    for (label, bytes, check) in cases {
        let err = decode(&bytes).expect_err(label);
        assert!(check(&err), "{label}: got {err:?}");
    }
}

#[test]
fn file_round_trip_and_determinism() {
    let dir = tempfile::tempdir().unwrap();
    let mut params = BTreeMap::new();
    params.insert("z".to_string(), Tensor::matrix(2, 3, vec![1.0, -0.0, 3.5, f32::MIN_POSITIVE, 1e30, -7.25]).unwrap());
    params.insert("a".to_string(), Tensor::vector(vec![0.1]).unwrap());
    let mut c = Checkpoint::new(params).unwrap();
    c.set_meta("task", "t0");
    let p1 = dir.path().join("a.upck");
    let p2 = dir.path().join("b.upck");
    store::save(&c, &p1).unwrap();
    store::save(&c, &p2).unwrap();
    assert_eq!(std::fs::read(&p1).unwrap(), std::fs::read(&p2).unwrap());
    match store::load(&p1).unwrap() {
        Stored::Checkpoint(back) => {
            assert_eq!(back, c);
            // -0.0 survives bit-exactly
            assert_eq!(back.params["z"].data()[1].to_bits(), (-0.0f32).to_bits());
        }
        other => panic!("{other:?}"),
    }
    let tv = TaskVector::new(c.params.clone(), "t0").unwrap();
    store::save(&tv, &p1).unwrap();
    assert_eq!(store::load(&p1).unwrap(), Stored::TaskVector(tv));
}

fn archive_strategy() -> impl Strategy<Value = Archive> {
    let tensor = (1usize..4, 1usize..4, any::<bool>()).prop_flat_map(|(r, c, is_mat)| {
        let n = if is_mat { r * c } else { r };
        proptest::collection::vec(-1e6f32..1e6, n).prop_map(move |d| {
            if is_mat {
                Tensor::matrix(r, c, d).unwrap()
            } else {
                Tensor::vector(d).unwrap()
            }
        })
    });
    (
        proptest::collection::btree_map("[a-z][a-z0-9._]{0,8}", tensor, 0..5),
        proptest::collection::btree_map("[a-z]{1,5}", "[ -~]{0,10}", 0..3),
        any::<bool>(),
    )
        .prop_map(|(tensors, meta, tv)| Archive {
            kind: if tv { ArchiveKind::TaskVector } else { ArchiveKind::Checkpoint },
            meta,
            tensors,
        })
}

proptest! {
    #[test]
    fn encode_decode_identity(a in archive_strategy()) {
        let bytes = encode(&a);
        let back = decode(&bytes).unwrap();
        prop_assert_eq!(&back, &a);
        prop_assert_eq!(encode(&back), bytes);
    }

    #[test]
    fn any_truncation_is_rejected(a in archive_strategy(), cut in 1usize..64) {
        let bytes = encode(&a);
        let keep = bytes.len().saturating_sub(cut);
        prop_assert!(decode(&bytes[..keep]).is_err());
    }
}
