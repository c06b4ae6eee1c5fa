mod common;

use std::io::Cursor;

use drift_lens::snapshot::{
    align, load_snapshot, read_snapshot, read_snapshot_jsonl, save_snapshot, write_snapshot,
    write_snapshot_jsonl, EmbeddingSnapshot, TokenRecord,
};
use drift_lens::Error;
use proptest::prelude::*;

fn arb_snapshot() -> impl Strategy<Value = EmbeddingSnapshot> {
    (1usize..6, 1usize..4, 0usize..40, "[a-z_]{0,12}").prop_flat_map(|(dim, extra, n, stage)| {
        let table: Vec<String> = std::iter::once("O".to_string())
            .chain((0..extra).map(|k| format!("C{k}")))
            .collect();
        let k = table.len() as u16;
        let records = prop::collection::vec((0..k, prop::collection::vec(-1e6f32..1e6, dim)), n);
        (Just(dim), Just(table), Just(stage), records).prop_map(|(dim, table, stage, recs)| {
            let mut snap = EmbeddingSnapshot::new(stage, dim, table);
            for (i, (class_id, embedding)) in recs.into_iter().enumerate() {
                snap.records.push(TokenRecord {
                    token_uid: (i as u64) * 7919 + 3,
                    class_id,
                    embedding,
                });
            }
            snap
        })
    })
}

fn encode(snap: &EmbeddingSnapshot) -> Vec<u8> {
    let mut buf = Vec::new();
    write_snapshot(snap, &mut buf).unwrap();
    buf
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(128))]

    #[test]
    fn binary_round_trip_is_bit_exact(snap in arb_snapshot()) {
        let bytes = encode(&snap);
        prop_assert_eq!(bytes.len(), snap.encoded_len());
        let back = read_snapshot(Cursor::new(&bytes)).unwrap();
        prop_assert_eq!(&back, &snap);
        prop_assert_eq!(encode(&back), bytes);
    }

    #[test]
    fn jsonl_round_trip(snap in arb_snapshot()) {
        let mut buf = Vec::new();
        write_snapshot_jsonl(&snap, &mut buf).unwrap();
        prop_assert_eq!(read_snapshot_jsonl(Cursor::new(buf)).unwrap(), snap);
    }

    #[test]
    fn every_truncation_is_rejected(snap in arb_snapshot(), cut in 0.0f64..1.0) {
        let bytes = encode(&snap);
        let len = ((bytes.len() as f64) * cut) as usize;
        let err = read_snapshot(Cursor::new(&bytes[..len])).unwrap_err();
        prop_assert!(matches!(err, Error::NotEdrf | Error::CorruptFile(_)), "{err:?}");
    }

    #[test]
    fn align_is_symmetric_for_shared_labels(snap in arb_snapshot(), keep in prop::collection::vec(any::<bool>(), 40)) {
        let mut other = snap.clone();
        other.stage_name = "other".into();
        let mut i = 0;
        other.records.retain(|_| { i += 1; keep[i - 1] });
        let ab = align(&snap, &other).unwrap();
        let ba = align(&other, &snap).unwrap();
        prop_assert_eq!(ab.total_aligned(), ba.total_aligned());
        prop_assert_eq!(ab.total_aligned(), other.records.len());
        prop_assert_eq!(ab.dropped_before, ba.dropped_after);
        for (name, pairs) in &ab.classes {
            let rev = &ba.classes[name];
            let mut u1 = pairs.token_uids.clone();
            let mut u2 = rev.token_uids.clone();
            u1.sort_unstable();
            u2.sort_unstable();
            prop_assert_eq!(u1, u2);
        }
    }
}

#[test]
fn corrupted_headers_map_to_their_error_classes() {
    let snap = common::random_snapshot("orig", 4, &["O", "PER"], 5, 1);
    let good = encode(&snap);

    let mut bad_magic = good.clone();
    bad_magic[0] = b'X';
    assert!(matches!(
        read_snapshot(Cursor::new(bad_magic)),
        Err(Error::NotEdrf)
    ));

    let mut bad_version = good.clone();
    bad_version[4] = 2;
    assert!(matches!(
        read_snapshot(Cursor::new(bad_version)),
        Err(Error::UnsupportedVersion(2))
    ));

    let mut bad_reserved = good.clone();
    bad_reserved[10] = 1;
    assert!(matches!(
        read_snapshot(Cursor::new(bad_reserved)),
        Err(Error::CorruptFile(_))
    ));

    let mut bad_count = good.clone();
    // token_count sits after the 12-byte header, "orig" and the two class names
    let at = 12 + 2 + 4 + 2 + 1 + 2 + 3;
    bad_count[at] += 1;
    assert!(matches!(
        read_snapshot(Cursor::new(bad_count)),
        Err(Error::CorruptFile(_))
    ));

    let mut bad_class = good.clone();
    let first_record = at + 8;
    bad_class[first_record + 8] = 9;
    assert!(matches!(
        read_snapshot(Cursor::new(bad_class)),
        Err(Error::InvalidSnapshot(_))
    ));

    let mut nan = good;
    nan[first_record + 10..first_record + 14].copy_from_slice(&f32::NAN.to_le_bytes());
    assert!(matches!(
        read_snapshot(Cursor::new(nan)),
        Err(Error::InvalidSnapshot(_))
    ));
}

#[test]
fn load_detects_format() {
    let dir = tempfile::tempdir().unwrap();
    let snap = common::random_snapshot("orig", 3, &["O", "LOC"], 4, 2);
    let bin = dir.path().join("s.edrf");
    save_snapshot(&snap, &bin).unwrap();
    assert_eq!(load_snapshot(&bin).unwrap(), snap);

    let jsonl = dir.path().join("s.jsonl");
    let mut buf = Vec::new();
    write_snapshot_jsonl(&snap, &mut buf).unwrap();
    std::fs::write(&jsonl, buf).unwrap();
    assert_eq!(load_snapshot(&jsonl).unwrap(), snap);

    let junk = dir.path().join("junk");
    std::fs::write(&junk, b"not a snapshot").unwrap();
    assert!(matches!(load_snapshot(&junk), Err(Error::NotEdrf)));
    assert!(matches!(
        load_snapshot(&dir.path().join("missing")),
        Err(Error::Io(_))
    ));
}
