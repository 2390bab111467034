use nightrack_core::{ParamStore, Tensor};
use proptest::prelude::*;

/// Hand-assembled file with one rank-2 tensor named `ab`.
fn handmade() -> Vec<u8> {
    let mut b = b"MTWT".to_vec();
    b.extend_from_slice(&1u32.to_le_bytes());
    b.extend_from_slice(&1u32.to_le_bytes());
    b.extend_from_slice(&2u16.to_le_bytes());
    b.extend_from_slice(b"ab");
    b.push(0);
    b.push(2);
    b.extend_from_slice(&1u32.to_le_bytes());
    b.extend_from_slice(&3u32.to_le_bytes());
    for v in [1.5f32, -0.0, f32::MIN_POSITIVE] {
        b.extend_from_slice(&v.to_le_bytes());
    }
    b
}

#[test]
fn reads_and_writes_the_documented_layout() {
    let bytes = handmade();
    let store = ParamStore::from_bytes(&bytes).unwrap();
    let t = store.get("ab").unwrap();
    assert_eq!(t.shape(), &[1, 3]);
    assert_eq!(t.data()[0], 1.5);
    assert!(t.data()[1] == 0.0 && t.data()[1].is_sign_negative());
    assert_eq!(store.to_bytes(), bytes);

    let mut built = ParamStore::new();
    built
        .insert(
            "ab",
            Tensor::new([1, 3], vec![1.5, -0.0, f32::MIN_POSITIVE]).unwrap(),
        )
        .unwrap();
    assert_eq!(built.to_bytes(), bytes);
}

#[test]
fn damaged_files_are_rejected() {
    let bytes = handmade();
    for cut in 0..bytes.len() {
        assert!(
            ParamStore::from_bytes(&bytes[..cut]).is_err(),
            "prefix of {cut} bytes accepted"
        );
    }
    let mut bad = bytes.clone();
    bad[0] = b'X';
    assert!(ParamStore::from_bytes(&bad).is_err(), "bad magic");
    let mut bad = bytes.clone();
    bad.push(0);
    assert!(ParamStore::from_bytes(&bad).is_err(), "trailing byte");
    let mut bad = bytes;
    bad[4] = 2;
    assert!(ParamStore::from_bytes(&bad).is_err(), "version 2");
}

#[test]
fn file_round_trip() {
    let dir = std::env::temp_dir().join(format!("nightrack-weights-{}", std::process::id()));
    std::fs::create_dir_all(&dir).unwrap();
    let path = dir.join("w.mtwt");
    let store = ParamStore::from_bytes(&handmade()).unwrap();
    store.save(&path).unwrap();
    assert_eq!(std::fs::read(&path).unwrap(), handmade());
    assert_eq!(ParamStore::load(&path).unwrap().to_bytes(), handmade());
    std::fs::remove_dir_all(&dir).unwrap();
}

fn arb_store() -> impl Strategy<Value = Vec<(String, Vec<usize>, Vec<u32>)>> {
    prop::collection::vec(
        (
            "[a-z][a-z0-9_.]{0,12}",
            prop::collection::vec(1usize..4, 0..4),
        )
            .prop_flat_map(|(name, shape)| {
                let n = shape.iter().product::<usize>();
                (
                    Just(name),
                    Just(shape),
                    prop::collection::vec(any::<u32>(), n),
                )
            }),
        0..6,
    )
}

proptest! {
    #[test]
    fn byte_round_trip_is_exact(entries in arb_store()) {
        let mut store = ParamStore::new();
        for (name, shape, bits) in entries {
            // Raw bit patterns, NaN payloads included.
            let data = bits.into_iter().map(f32::from_bits).collect();
            store.set(name, Tensor::new(shape, data).unwrap()).unwrap();
        }
        let bytes = store.to_bytes();
        let back = ParamStore::from_bytes(&bytes).unwrap();
        prop_assert_eq!(back.len(), store.len());
        prop_assert_eq!(back.to_bytes(), bytes);
    }
}
