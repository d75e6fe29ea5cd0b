//! Bags for the view comparisons: whole-volume cuboids, all planes, single
//! planes and top-of-volume depth fractions.

use rand::Rng as _;
use rayon::prelude::*;

use crate::config::{PatchConfig, PlaneSelection};
use crate::encoder::{encode_bag, Encoder};
use crate::phantom::{plane_type_counts, targeted_plane, PhantomSample};
use crate::pipeline::{Error, Result};
use crate::preprocess::{build_patch_grid, segment_volume, MaskStack, PatchGrid, PatchMode, SegParams};
use crate::rng::{derive_seed, stream};
use crate::store::{FeatureBag, Volume};

const RANDOM_PLANE_SALT: u64 = 0x524e_4450;

/// Grid for `mode` over `mask` using the configured geometry.
pub fn view_grid(mask: &MaskStack, mode: PatchMode, patch: &PatchConfig) -> Result<PatchGrid> {
    let (shape, overlaps) = patch.geometry(mode);
    Ok(build_patch_grid(mask, mode, shape, overlaps)?)
}

/// Grid, normalize and encode one volume. An empty grid is a data error.
pub fn encode_view(
    sample_id: &str,
    volume: &Volume,
    mask: &MaskStack,
    mode: PatchMode,
    patch: &PatchConfig,
    encoder: &Encoder,
) -> Result<FeatureBag> {
    let grid = view_grid(mask, mode, patch)?;
    if grid.is_empty() {
        return Err(Error::Data(format!("no {} patches survive for sample {sample_id}", mode.as_str())));
    }
    let window = patch.norm.resolve(volume)?;
    Ok(encode_bag(sample_id, volume, &grid, encoder, &window)?)
}

/// Distinct depth origins present in a bag, ascending.
pub fn bag_planes(bag: &FeatureBag) -> Vec<usize> {
    let mut z: Vec<usize> = bag.coords().iter().map(|c| c.origin[0] as usize).collect();
    z.sort_unstable();
    z.dedup();
    z
}

/// Instances of `bag` whose patch starts on plane `z`.
pub fn plane_bag(bag: &FeatureBag, z: usize) -> Result<FeatureBag> {
    let idx: Vec<usize> =
        bag.coords().iter().enumerate().filter(|(_, c)| c.origin[0] as usize == z).map(|(j, _)| j).collect();
    if idx.is_empty() {
        return Err(Error::Data(format!("sample {} has no patches on plane {z}", bag.sample_id())));
    }
    Ok(bag.select(&idx)?)
}

/// Among `candidates`, the plane holding the most of every cell type.
pub fn targeted_plane_among(labels: &Volume, n_types: usize, candidates: &[usize]) -> Option<usize> {
    let counts = plane_type_counts(labels, n_types);
    let sub: Vec<Vec<usize>> = candidates.iter().map(|&z| counts[z].clone()).collect();
    targeted_plane(&sub).map(|i| candidates[i])
}

/// Plane picked by `selection` from `candidates`; `None` keeps every plane.
/// Random picks draw from stream `(seed, index)`, one per sample.
pub fn choose_plane(
    selection: PlaneSelection,
    candidates: &[usize],
    labels: Option<&Volume>,
    n_types: usize,
    seed: u64,
    index: usize,
) -> Result<Option<usize>> {
    if candidates.is_empty() {
        return Err(Error::Data("no candidate planes".into()));
    }
    Ok(match selection {
        PlaneSelection::All => None,
        PlaneSelection::Top => Some(candidates[0]),
        PlaneSelection::Random => {
            let mut rng = stream(derive_seed(seed, RANDOM_PLANE_SALT), index as u64);
            Some(candidates[rng.random_range(0..candidates.len())])
        }
        PlaneSelection::Targeted => {
            let labels = labels.ok_or_else(|| {
                Error::Data("targeted plane selection needs a cell label volume".into())
            })?;
            targeted_plane_among(labels, n_types, candidates)
        }
    })
}

/// Mask restricted to the top `ceil(fraction * D)` planes.
pub fn depth_fraction_mask(mask: &MaskStack, fraction: f64) -> MaskStack {
    let depth = (fraction * mask.dims()[0] as f64).ceil() as usize;
    mask.truncate_depth(depth)
}

/// Per-sample bags for the phantom view comparison.
#[derive(Debug, Clone)]
pub struct PhantomViews {
    pub labels: Vec<u8>,
    pub cuboids: Vec<FeatureBag>,
    pub planes: Vec<FeatureBag>,
    pub targeted: Vec<usize>,
    pub random: Vec<usize>,
}

impl PhantomViews {
    pub fn single_planes(&self, which: &[usize]) -> Result<Vec<FeatureBag>> {
        self.planes.iter().zip(which).map(|(b, &z)| plane_bag(b, z)).collect()
    }

    pub fn targeted_bags(&self) -> Result<Vec<FeatureBag>> {
        self.single_planes(&self.targeted)
    }

    pub fn random_bags(&self) -> Result<Vec<FeatureBag>> {
        self.single_planes(&self.random)
    }
}

/// Segment and encode every phantom sample as cuboids and as planes, and
/// fix its targeted and random plane. `seed` drives the random planes.
pub fn phantom_views(
    samples: &[PhantomSample],
    n_types: usize,
    seg: &SegParams,
    patch: &PatchConfig,
    encoder: &Encoder,
    seed: u64,
) -> Result<PhantomViews> {
    let per_sample: Vec<(FeatureBag, FeatureBag, usize, usize)> = samples
        .par_iter()
        .enumerate()
        .map(|(i, s)| {
            let mask = segment_volume(&s.volume, seg)?;
            let cuboids = encode_view(&s.sample_id, &s.volume, &mask, PatchMode::Cuboids3d, patch, encoder)?;
            let planes = encode_view(&s.sample_id, &s.volume, &mask, PatchMode::Planes2d, patch, encoder)?;
            let candidates = bag_planes(&planes);
            let targeted = choose_plane(PlaneSelection::Targeted, &candidates, Some(&s.labels), n_types, seed, i)?
                .expect("targeted selection yields a plane");
            let random = choose_plane(PlaneSelection::Random, &candidates, None, n_types, seed, i)?
                .expect("random selection yields a plane");
            Ok((cuboids, planes, targeted, random))
        })
        .collect::<Result<_>>()?;
    let mut views = PhantomViews {
        labels: samples.iter().map(|s| s.class.min(1) as u8).collect(),
        cuboids: Vec::new(),
        planes: Vec::new(),
        targeted: Vec::new(),
        random: Vec::new(),
    };
    for (c, p, t, r) in per_sample {
        views.cuboids.push(c);
        views.planes.push(p);
        views.targeted.push(t);
        views.random.push(r);
    }
    Ok(views)
}

/// Cuboid bags restricted to the top `fraction` of every volume's depth.
pub fn depth_fraction_bags(
    samples: &[PhantomSample],
    seg: &SegParams,
    patch: &PatchConfig,
    encoder: &Encoder,
    fraction: f64,
) -> Result<Vec<FeatureBag>> {
    samples
        .par_iter()
        .map(|s| {
            let mask = depth_fraction_mask(&segment_volume(&s.volume, seg)?, fraction);
            encode_view(&s.sample_id, &s.volume, &mask, PatchMode::Cuboids3d, patch, encoder)
        })
        .collect()
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::store::{DType, PatchCoord};

    fn bag_on_planes(planes: &[usize]) -> FeatureBag {
        let rows: Vec<Vec<f64>> = planes.iter().map(|&z| vec![z as f64, 1.0]).collect();
        let coords = planes.iter().map(|&z| PatchCoord::new([z, 0, 0], [1, 4, 4])).collect();
        FeatureBag::from_rows("s", &rows, coords).unwrap()
    }

    #[test]
    fn plane_bags_split_by_depth() {
        let b = bag_on_planes(&[3, 1, 3, 7]);
        assert_eq!(bag_planes(&b), vec![1, 3, 7]);
        assert_eq!(plane_bag(&b, 3).unwrap().len(), 2);
        assert!(plane_bag(&b, 2).is_err());
    }

    #[test]
    fn plane_choice_rules() {
        let c = [2, 5, 9];
        assert_eq!(choose_plane(PlaneSelection::All, &c, None, 2, 0, 0).unwrap(), None);
        assert_eq!(choose_plane(PlaneSelection::Top, &c, None, 2, 0, 0).unwrap(), Some(2));
        let r = choose_plane(PlaneSelection::Random, &c, None, 2, 4, 1).unwrap().unwrap();
        assert!(c.contains(&r));
        assert_eq!(choose_plane(PlaneSelection::Random, &c, None, 2, 4, 1).unwrap(), Some(r));
        assert!(choose_plane(PlaneSelection::Targeted, &c, None, 2, 0, 0).is_err());
    }

    #[test]
    fn targeted_plane_respects_candidates() {
        let mut labels = Volume::zeros(DType::U8, 1, [4, 2, 2], [1.0; 3]).unwrap();
        // plane 1: both types; plane 3: both types with more voxels
        for (z, y, x, l) in [(1, 0, 0, 1.0), (1, 0, 1, 2.0), (3, 0, 0, 1.0), (3, 0, 1, 2.0), (3, 1, 1, 2.0), (3, 1, 0, 1.0)] {
            let i = labels.index(0, z, y, x);
            labels.data.set(i, l);
        }
        assert_eq!(targeted_plane_among(&labels, 2, &[0, 1, 2, 3]), Some(3));
        assert_eq!(targeted_plane_among(&labels, 2, &[0, 1, 2]), Some(1));
    }

    #[test]
    fn depth_fraction_rounds_up() {
        let m = MaskStack::full([10, 2, 2]);
        assert_eq!(depth_fraction_mask(&m, 0.25).kept_planes(), &[0, 1, 2]);
        assert_eq!(depth_fraction_mask(&m, 1.0).kept_planes().len(), 10);
    }
}
