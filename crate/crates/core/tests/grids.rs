//! Patch-grid invariants over random tissue masks.

use proptest::prelude::*;
use volmil::preprocess::{build_patch_grid, MaskStack, PatchMode};

/// Random mask built from a few boxes of tissue.
fn mask() -> impl Strategy<Value = MaskStack> {
    (prop::array::uniform3(4usize..24), prop::collection::vec(prop::array::uniform3((0.0f64..1.0, 0.0f64..1.0)), 1..4))
        .prop_map(|(dims, boxes)| {
            let mut m = vec![false; dims.iter().product()];
            for b in boxes {
                let lo = [0, 1, 2].map(|a| (b[a].0.min(b[a].1) * dims[a] as f64) as usize);
                let hi = [0, 1, 2].map(|a| ((b[a].0.max(b[a].1) * dims[a] as f64) as usize).max(lo[a] + 1));
                for z in lo[0]..hi[0].min(dims[0]) {
                    for y in lo[1]..hi[1].min(dims[1]) {
                        for x in lo[2]..hi[2].min(dims[2]) {
                            m[(z * dims[1] + y) * dims[2] + x] = true;
                        }
                    }
                }
            }
            MaskStack::from_mask(dims, m)
        })
}

fn tissue(mask: &MaskStack, o: [usize; 3], s: [usize; 3]) -> usize {
    let mut n = 0;
    for z in o[0]..o[0] + s[0] {
        for y in o[1]..o[1] + s[1] {
            for x in o[2]..o[2] + s[2] {
                n += mask.get(z, y, x) as usize;
            }
        }
    }
    n
}

proptest! {
    #![proptest_config(ProptestConfig { cases: 500, ..ProptestConfig::default() })]

    #[test]
    fn planar_tiles_are_in_bounds_and_cover_all_tissue(
        m in mask(), h in 1usize..8, w in 1usize..8, oy in 0usize..8, ox in 0usize..8,
    ) {
        let dims = m.dims();
        let (h, w) = (h.min(dims[1]), w.min(dims[2]));
        let ov = [0, oy.min(h - 1), ox.min(w - 1)];
        let g = build_patch_grid(&m, PatchMode::Planes2d, [1, h, w], ov).unwrap();
        prop_assert_eq!(g.volume_dims, dims);
        let mut covered = vec![false; dims.iter().product()];
        for &o in &g.entries {
            prop_assert!((0..3).all(|a| o[a] + g.patch_shape[a] <= dims[a]));
            prop_assert!(m.kept_planes().contains(&o[0]));
            prop_assert!(tissue(&m, o, [1, h, w]) > 0);
            for y in o[1]..o[1] + h {
                for x in o[2]..o[2] + w {
                    covered[(o[0] * dims[1] + y) * dims[2] + x] = true;
                }
            }
        }
        for (i, &t) in m.as_slice().iter().enumerate() {
            prop_assert!(!t || covered[i], "tissue voxel {i} not covered");
        }
    }

    #[test]
    fn cuboids_step_from_the_reference_plane(
        m in mask(), shape in prop::array::uniform3(1usize..8), od in 0usize..8,
    ) {
        let dims = m.dims();
        let shape = [0, 1, 2].map(|a| shape[a].min(dims[a]));
        let ov = [od.min(shape[0] - 1), 0, 0];
        let g = build_patch_grid(&m, PatchMode::Cuboids3d, shape, ov).unwrap();
        let r = g.reference_plane.unwrap();
        prop_assert_eq!(Some(r), m.reference_plane());
        let step = shape[0] - ov[0];
        let volume: usize = shape.iter().product();
        for &o in &g.entries {
            prop_assert!((0..3).all(|a| o[a] + shape[a] <= dims[a]));
            prop_assert_eq!(o[0].abs_diff(r) % step, 0);
            prop_assert!(2 * tissue(&m, o, shape) > volume);
            // in-plane origins are those laid on the reference plane
            prop_assert!(tissue(&m, [r, o[1], o[2]], [1, shape[1], shape[2]]) > 0);
        }
        let mut sorted = g.entries.clone();
        sorted.sort();
        sorted.dedup();
        prop_assert_eq!(sorted.len(), g.entries.len());
    }
}
