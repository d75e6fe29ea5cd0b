//! Write/read roundtrips through real files, bit-exact, over randomized
//! instances of every on-disk format.

use proptest::prelude::*;
use volmil::preprocess::{PatchGrid, PatchMode};
use volmil::store::{
    read_checkpoint, read_feature_bag, read_manifest, read_volume, write_checkpoint, write_feature_bag,
    write_manifest, write_volume, Checkpoint, CohortManifest, Event, FeatureBag, ManifestRecord, NamedTensor,
    PatchCoord, Volume, VoxelData,
};

fn config() -> ProptestConfig {
    ProptestConfig { cases: 1000, ..ProptestConfig::default() }
}

fn voxel_data(len: usize) -> impl Strategy<Value = VoxelData> {
    prop_oneof![
        prop::collection::vec(any::<u8>(), len).prop_map(VoxelData::U8),
        prop::collection::vec(any::<u16>(), len).prop_map(VoxelData::U16),
        // any f32 bit pattern, NaN payloads included
        prop::collection::vec(any::<u32>().prop_map(f32::from_bits), len).prop_map(VoxelData::F32),
    ]
}

fn volume() -> impl Strategy<Value = Volume> {
    (1usize..=3, 1usize..=5, 1usize..=6, 1usize..=7, prop::array::uniform3(0.01f32..100.0)).prop_flat_map(
        |(c, d, h, w, vs)| {
            voxel_data(c * d * h * w).prop_map(move |data| Volume::new(c, [d, h, w], vs, data).unwrap())
        },
    )
}

fn same_volume(a: &Volume, b: &Volume) -> bool {
    let bits = |v: &Volume| -> Vec<u32> {
        match &v.data {
            VoxelData::U8(x) => x.iter().map(|&v| v as u32).collect(),
            VoxelData::U16(x) => x.iter().map(|&v| v as u32).collect(),
            VoxelData::F32(x) => x.iter().map(|v| v.to_bits()).collect(),
        }
    };
    a.channels == b.channels
        && a.dims() == b.dims()
        && a.dtype() == b.dtype()
        && a.voxel_size.map(f32::to_bits) == b.voxel_size.map(f32::to_bits)
        && bits(a) == bits(b)
}

fn bag() -> impl Strategy<Value = FeatureBag> {
    ("[a-zA-Z0-9_.-]{1,12}", 1usize..=9, 0usize..=12).prop_flat_map(|(id, dim, n)| {
        let feats = prop::collection::vec(
            any::<u32>().prop_map(f32::from_bits).prop_filter("finite", |v| v.is_finite()),
            dim * n,
        );
        let coords = prop::collection::vec(
            (prop::array::uniform3(0usize..100_000), prop::array::uniform3(1usize..512))
                .prop_map(|(o, s)| PatchCoord::new(o, s)),
            n,
        );
        (feats, coords).prop_map(move |(f, c)| FeatureBag::new(id.clone(), dim, f, c).unwrap())
    })
}

fn tensors(shapes: Vec<Vec<usize>>, bits: bool) -> impl Strategy<Value = Vec<NamedTensor>> {
    let parts: Vec<_> = shapes
        .into_iter()
        .enumerate()
        .map(|(i, shape)| {
            let n: usize = shape.iter().product();
            let value = if bits { any::<u64>().prop_map(f64::from_bits).boxed() } else { (-1e6f64..1e6).boxed() };
            prop::collection::vec(value, n)
                .prop_map(move |data| NamedTensor::new(format!("p{i}"), shape.clone(), data).unwrap())
        })
        .collect();
    parts
}

fn checkpoint() -> impl Strategy<Value = Checkpoint> {
    prop::collection::vec(prop::collection::vec(1usize..5, 0..=3), 1..=4).prop_flat_map(|shapes| {
        (
            any::<u64>(),
            any::<u64>(),
            any::<u64>(),
            tensors(shapes.clone(), true),
            prop::option::of((tensors(shapes.clone(), true), tensors(shapes, false))),
        )
            .prop_map(|(config_hash, seed, step, params, moments)| {
                let (first_moment, second_moment) = moments.unwrap_or_default();
                Checkpoint { config_hash, seed, step, params, first_moment, second_moment }
            })
    })
}

fn manifest() -> impl Strategy<Value = CohortManifest> {
    let record = (
        "[a-z0-9_]{1,10}",
        "[a-z0-9_/.]{1,20}",
        prop::option::of(0u8..=1),
        prop::option::of((
            any::<u64>().prop_map(|b| f64::from_bits(b).abs()).prop_filter("finite", |t| t.is_finite()),
            any::<bool>(),
        )),
    )
        .prop_map(|(id, path, label, surv)| ManifestRecord {
            sample_id: id,
            volume_path: path,
            label,
            time: surv.map(|s| s.0),
            event: surv.map(|s| if s.1 { Event::Observed } else { Event::Censored }),
        });
    prop::collection::vec(record, 0..8).prop_map(|mut rs| {
        let mut seen = std::collections::HashSet::new();
        rs.retain(|r| seen.insert(r.sample_id.clone()));
        CohortManifest::new(rs).unwrap()
    })
}

fn grid() -> impl Strategy<Value = PatchGrid> {
    (
        any::<bool>(),
        prop::array::uniform3(1usize..64),
        prop::array::uniform3(0usize..32),
        prop::option::of(0usize..512),
        prop::array::uniform3(0usize..4096),
    )
        .prop_flat_map(|(planar, patch_shape, overlaps, reference_plane, extra)| {
            let volume_dims = [0, 1, 2].map(|a| patch_shape[a] + extra[a]);
            let origin = [0, 1, 2].map(|a| 0..=extra[a]);
            prop::collection::vec(origin, 0..20).prop_map(move |entries| PatchGrid {
                mode: if planar { PatchMode::Planes2d } else { PatchMode::Cuboids3d },
                patch_shape,
                overlaps,
                reference_plane,
                volume_dims,
                entries,
            })
        })
}

proptest! {
    #![proptest_config(config())]

    #[test]
    fn volume_file_roundtrip(v in volume()) {
        let dir = tempfile::tempdir().unwrap();
        let p = dir.path().join("v.vmil");
        write_volume(&v, &p).unwrap();
        prop_assert!(same_volume(&v, &read_volume(&p).unwrap()));
    }

    #[test]
    fn bag_file_roundtrip(b in bag()) {
        let dir = tempfile::tempdir().unwrap();
        let p = dir.path().join("b.fbag");
        write_feature_bag(&b, &p).unwrap();
        prop_assert_eq!(read_feature_bag(&p).unwrap(), b);
    }

    #[test]
    fn checkpoint_file_roundtrip(c in checkpoint()) {
        let dir = tempfile::tempdir().unwrap();
        let p = dir.path().join("m.ckpt");
        write_checkpoint(&c, &p).unwrap();
        prop_assert_eq!(read_checkpoint(&p).unwrap(), c);
    }

    #[test]
    fn manifest_file_roundtrip(m in manifest()) {
        let dir = tempfile::tempdir().unwrap();
        let p = dir.path().join("manifest.tsv");
        write_manifest(&m, &p).unwrap();
        let back = read_manifest(&p).unwrap();
        prop_assert_eq!(back.len(), m.len());
        for (a, b) in back.records().iter().zip(m.records()) {
            prop_assert_eq!(&a.sample_id, &b.sample_id);
            prop_assert_eq!(&a.volume_path, &b.volume_path);
            prop_assert_eq!(a.label, b.label);
            prop_assert_eq!(a.event, b.event);
            prop_assert_eq!(a.time.map(f64::to_bits), b.time.map(f64::to_bits));
        }
    }

    #[test]
    fn grid_text_roundtrip(g in grid()) {
        let dir = tempfile::tempdir().unwrap();
        let p = dir.path().join("g.grid.tsv");
        std::fs::write(&p, g.to_tsv()).unwrap();
        prop_assert_eq!(PatchGrid::from_tsv(&std::fs::read_to_string(&p).unwrap()).unwrap(), g);
    }
}
