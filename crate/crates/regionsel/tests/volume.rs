//! Grid, container I/O and connected-component properties.

use proptest::prelude::*;
use regionsel::volume::{
    connected_components, decode_volume, encode_volume, read_volume, write_volume, Parcellation, ScalarMap, Volume,
    VoxelGrid,
};
use regionsel::Error;

mod common;
use common::components_oracle;

fn dims_strategy() -> impl Strategy<Value = Vec<usize>> {
    prop_oneof![
        (1usize..40).prop_map(|a| vec![a]),
        (1usize..9, 1usize..9).prop_map(|(a, b)| vec![a, b]),
        (1usize..5, 1usize..5, 1usize..5).prop_map(|(a, b, c)| vec![a, b, c]),
    ]
}

fn map_strategy() -> impl Strategy<Value = ScalarMap> {
    dims_strategy().prop_flat_map(|dims| {
        let d: usize = dims.iter().product();
        prop::collection::vec(-1e6f64..1e6, d)
            .prop_map(move |v| ScalarMap::new(VoxelGrid::new(&dims).unwrap(), v).unwrap())
    })
}

#[test]
fn components_trivial_cases() {
    let g = VoxelGrid::new(&[3]).unwrap();
    let m = ScalarMap::new(g.clone(), vec![1.0, 0.0, 1.0]).unwrap();
    assert_eq!(connected_components(&m, 0.5), vec![vec![0], vec![2]]);
    assert!(connected_components(&m, 2.0).is_empty());
    // equality with the threshold is not suprathreshold
    assert!(connected_components(&m, 1.0).is_empty());
}

#[test]
fn components_match_union_find_on_8x8() {
    use rand::{Rng, SeedableRng};
    let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(11);
    let g = VoxelGrid::new(&[8, 8]).unwrap();
    for _ in 0..200 {
        let v: Vec<f64> = (0..64).map(|_| rng.random::<f64>()).collect();
        let m = ScalarMap::new(g.clone(), v).unwrap();
        for thr in [0.3, 0.5, 0.7] {
            assert_eq!(connected_components(&m, thr), components_oracle(&m, thr));
        }
    }
}

proptest! {
    #[test]
    fn roundtrip_scalar(m in map_strategy()) {
        let v = Volume::Scalar(m);
        let bytes = encode_volume(&v);
        prop_assert_eq!(decode_volume(&bytes).unwrap(), v);
    }

    #[test]
    fn roundtrip_labels(dims in dims_strategy(), seed in any::<u64>()) {
        use rand::{Rng, SeedableRng};
        let d: usize = dims.iter().product();
        let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(seed);
        let n = rng.random_range(1..=d.min(5));
        // every label used at least once
        let labels: Vec<u32> = (0..d).map(|k| if k < n { k as u32 } else { rng.random_range(0..n as u32) }).collect();
        let p = Parcellation::new(VoxelGrid::new(&dims).unwrap(), labels, n).unwrap();
        prop_assert_eq!(p.sizes().iter().sum::<usize>(), d);
        let v = Volume::Labels(p);
        prop_assert_eq!(decode_volume(&encode_volume(&v)).unwrap(), v);
    }

    #[test]
    fn components_partition_suprathreshold_set(m in map_strategy(), thr in -1e6f64..1e6) {
        let cl = connected_components(&m, thr);
        let mut all: Vec<usize> = cl.iter().flatten().copied().collect();
        let n = all.len();
        all.sort_unstable();
        all.dedup();
        prop_assert_eq!(all.len(), n, "clusters overlap");
        let expect: Vec<usize> = (0..m.values().len()).filter(|&k| m.values()[k] > thr).collect();
        prop_assert_eq!(all, expect);
        prop_assert_eq!(cl, components_oracle(&m, thr));
    }

    #[test]
    fn suprathreshold_set_shrinks(m in map_strategy(), a in -1e6f64..1e6, b in -1e6f64..1e6) {
        let (lo, hi) = if a < b { (a, b) } else { (b, a) };
        let count = |t| connected_components(&m, t).iter().map(Vec::len).sum::<usize>();
        prop_assert!(count(hi) <= count(lo));
    }

    #[test]
    fn index_coords_bijective(dims in dims_strategy()) {
        let g = VoxelGrid::new(&dims).unwrap();
        for k in 0..g.len() {
            prop_assert_eq!(g.index(g.coords(k)), k);
        }
    }
}

#[test]
fn file_roundtrip_2x2() {
    let dir = tempfile::tempdir().unwrap();
    let p = dir.path().join("m.vol");
    let m = ScalarMap::new(VoxelGrid::new(&[2, 2]).unwrap(), vec![1.0, 2.0, 3.0, 4.0]).unwrap();
    write_volume(&p, &Volume::Scalar(m.clone())).unwrap();
    assert_eq!(read_volume(&p).unwrap().into_scalar().unwrap(), m);
}

#[test]
fn short_payload_is_rejected() {
    let mut bytes = br#"{"dims":[6],"dtype":"f64","kind":"scalar"}"#.to_vec();
    bytes.push(b'\n');
    for v in [1.0f64, 2.0, 3.0, 4.0, 5.0] {
        bytes.extend_from_slice(&v.to_le_bytes());
    }
    assert!(matches!(decode_volume(&bytes), Err(Error::PayloadMismatch { .. })));
}

#[test]
fn label_equal_to_region_count_is_rejected() {
    let mut bytes = br#"{"dims":[3],"dtype":"u32","kind":"labels","regions":2}"#.to_vec();
    bytes.push(b'\n');
    for v in [0u32, 1, 2] {
        bytes.extend_from_slice(&v.to_le_bytes());
    }
    assert!(matches!(decode_volume(&bytes), Err(Error::LabelOutOfRange { .. })));
}
