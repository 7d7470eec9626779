//! Connected components, centroids, distances and overlap on binary masks.

use std::collections::VecDeque;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::volume::{coords_of, voxel_center_mm, Dims, MaskVolume, Spacing};

/// Voxel adjacency used for connected components. Serialized as `6` or `26`.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Default, Serialize, Deserialize)]
#[serde(try_from = "u8", into = "u8")]
pub enum Connectivity {
    /// Face neighbours only.
    Six,
    /// Face, edge and corner neighbours.
    #[default]
    TwentySix,
}

impl TryFrom<u8> for Connectivity {
    type Error = String;

    fn try_from(v: u8) -> Result<Self, String> {
        match v {
            6 => Ok(Connectivity::Six),
            26 => Ok(Connectivity::TwentySix),
            other => Err(format!("connectivity must be 6 or 26, got {other}")),
        }
    }
}

impl From<Connectivity> for u8 {
    fn from(c: Connectivity) -> u8 {
        match c {
            Connectivity::Six => 6,
            Connectivity::TwentySix => 26,
        }
    }
}

impl Connectivity {
    pub fn offsets(self) -> Vec<[isize; 3]> {
        let mut out = Vec::with_capacity(26);
        for dz in -1isize..=1 {
            for dy in -1isize..=1 {
                for dx in -1isize..=1 {
                    let manhattan = dx.abs() + dy.abs() + dz.abs();
                    let keep = match self {
                        Connectivity::Six => manhattan == 1,
                        Connectivity::TwentySix => manhattan >= 1,
                    };
                    if keep {
                        out.push([dx, dy, dz]);
                    }
                }
            }
        }
        out
    }
}

/// A maximal connected set of foreground voxels.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Component {
    pub id: u32,
    /// Linear voxel indices, ascending.
    pub voxels: Vec<usize>,
    pub centroid_mm: [f64; 3],
}

impl Component {
    pub fn volume_voxels(&self) -> usize {
        self.voxels.len()
    }

    fn from_voxels(id: u32, mut voxels: Vec<usize>, dims: Dims, spacing: Spacing) -> Self {
        voxels.sort_unstable();
        let centroid_mm = centroid_mm(&voxels, dims, spacing);
        Self { id, voxels, centroid_mm }
    }
}

/// Mean of voxel centres, in millimetres.
pub fn centroid_mm(voxels: &[usize], dims: Dims, spacing: Spacing) -> [f64; 3] {
    let mut acc = [0.0f64; 3];
    for &v in voxels {
        let c = voxel_center_mm(dims, spacing, v);
        for a in 0..3 {
            acc[a] += c[a];
        }
    }
    let n = voxels.len().max(1) as f64;
    acc.map(|s| s / n)
}

#[inline]
fn neighbour(dims: Dims, at: [usize; 3], off: [isize; 3]) -> Option<usize> {
    let mut c = [0usize; 3];
    for a in 0..3 {
        let v = at[a] as isize + off[a];
        if v < 0 || v >= dims[a] as isize {
            return None;
        }
        c[a] = v as usize;
    }
    Some((c[2] * dims[1] + c[1]) * dims[0] + c[0])
}

/// Labels the foreground of `mask`. Ids start at 1 and follow the raster
/// order (x fastest, then y, then z) of each component's first voxel.
pub fn label_components(mask: &MaskVolume, connectivity: Connectivity) -> Vec<Component> {
    let dims = mask.dims();
    let vox = mask.voxels();
    let offsets = connectivity.offsets();
    let mut visited = vec![false; vox.len()];
    let mut queue = VecDeque::new();
    let mut out = Vec::new();

    for start in 0..vox.len() {
        if vox[start] == 0 || visited[start] {
            continue;
        }
        visited[start] = true;
        queue.push_back(start);
        let mut members = Vec::new();
        while let Some(idx) = queue.pop_front() {
            members.push(idx);
            let at = coords_of(dims, idx);
            for &off in &offsets {
                if let Some(n) = neighbour(dims, at, off) {
                    if vox[n] != 0 && !visited[n] {
                        visited[n] = true;
                        queue.push_back(n);
                    }
                }
            }
        }
        let id = out.len() as u32 + 1;
        out.push(Component::from_voxels(id, members, dims, mask.spacing_mm()));
    }
    out
}

fn dist(a: [f64; 3], b: [f64; 3]) -> f64 {
    ((a[0] - b[0]).powi(2) + (a[1] - b[1]).powi(2) + (a[2] - b[2]).powi(2)).sqrt()
}

/// Euclidean distance (mm) from `c` to the nearest foreground voxel centre.
pub fn centroid_to_mask_distance(c: [f64; 3], mask: &MaskVolume) -> Result<f64> {
    let fg = mask.foreground_indices();
    centroid_to_voxels_distance(c, &fg, mask.dims(), mask.spacing_mm())
}

/// Same as [`centroid_to_mask_distance`] for an explicit voxel set.
pub fn centroid_to_voxels_distance(c: [f64; 3], voxels: &[usize], dims: Dims, spacing: Spacing) -> Result<f64> {
    voxels
        .iter()
        .map(|&v| dist(c, voxel_center_mm(dims, spacing, v)))
        .min_by(f64::total_cmp)
        .ok_or(Error::NoAnnotationVoxels)
}

/// Size of the intersection of two ascending, duplicate-free index lists.
pub fn intersection_size(a: &[usize], b: &[usize]) -> usize {
    debug_assert!(a.windows(2).all(|w| w[0] < w[1]));
    debug_assert!(b.windows(2).all(|w| w[0] < w[1]));
    let (mut i, mut j, mut n) = (0, 0, 0);
    while i < a.len() && j < b.len() {
        match a[i].cmp(&b[j]) {
            std::cmp::Ordering::Less => i += 1,
            std::cmp::Ordering::Greater => j += 1,
            std::cmp::Ordering::Equal => {
                n += 1;
                i += 1;
                j += 1;
            }
        }
    }
    n
}

/// DICE overlap `2|a∩b| / (|a|+|b|)` of two ascending voxel index lists.
/// Two empty sets count as perfect agreement (1.0).
pub fn dice(a: &[usize], b: &[usize]) -> f64 {
    if a.is_empty() && b.is_empty() {
        return 1.0;
    }
    2.0 * intersection_size(a, b) as f64 / (a.len() + b.len()) as f64
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    /// Label propagation to a fixed point; unrelated to the BFS above.
    fn flood_fill_oracle(mask: &MaskVolume, conn: Connectivity) -> Vec<Vec<usize>> {
        let [nx, ny, nz] = mask.dims();
        let v = mask.voxels();
        let mut label: Vec<usize> = (0..v.len()).map(|i| if v[i] != 0 { i + 1 } else { 0 }).collect();
        loop {
            let mut changed = false;
            for z in 0..nz {
                for y in 0..ny {
                    for x in 0..nx {
                        let i = (z * ny + y) * nx + x;
                        if label[i] == 0 {
                            continue;
                        }
                        for dz in -1i64..=1 {
                            for dy in -1i64..=1 {
                                for dx in -1i64..=1 {
                                    let m = dx.abs() + dy.abs() + dz.abs();
                                    if m == 0 || (conn == Connectivity::Six && m > 1) {
                                        continue;
                                    }
                                    let (a, b, c) = (x as i64 + dx, y as i64 + dy, z as i64 + dz);
                                    if a < 0 || b < 0 || c < 0 || a >= nx as i64 || b >= ny as i64 || c >= nz as i64 {
                                        continue;
                                    }
                                    let j = ((c as usize) * ny + b as usize) * nx + a as usize;
                                    if label[j] != 0 && label[j] < label[i] {
                                        label[i] = label[j];
                                        changed = true;
                                    }
                                }
                            }
                        }
                    }
                }
            }
            if !changed {
                break;
            }
        }
        // Each component's label is now its minimal (first raster) index + 1.
        let mut roots: Vec<usize> = label.iter().copied().filter(|&l| l != 0).collect();
        roots.sort_unstable();
        roots.dedup();
        roots.iter().map(|&r| (0..v.len()).filter(|&i| label[i] == r).collect()).collect()
    }

    fn random_mask(rng: &mut ChaCha8Rng, n: usize, density: f64) -> MaskVolume {
        let voxels = (0..n * n * n).map(|_| rng.random_bool(density) as u8).collect();
        MaskVolume::from_voxels([n, n, n], [1.0; 3], voxels).unwrap()
    }

    #[test]
    fn empty_mask_has_no_components() {
        let m = MaskVolume::zeros([8, 8, 8], [1.0; 3]).unwrap();
        assert!(label_components(&m, Connectivity::TwentySix).is_empty());
    }

    #[test]
    fn single_voxel_centroid_is_voxel_center() {
        let mut m = MaskVolume::zeros([8, 8, 8], [1.0; 3]).unwrap();
        m.set(2, 3, 4, true);
        let cc = label_components(&m, Connectivity::TwentySix);
        assert_eq!(cc.len(), 1);
        assert_eq!(cc[0].id, 1);
        assert_eq!(cc[0].centroid_mm, [2.5, 3.5, 4.5]);
    }

    #[test]
    fn corner_contact_depends_on_connectivity() {
        let mut m = MaskVolume::zeros([4, 4, 4], [1.0; 3]).unwrap();
        m.set(1, 1, 1, true);
        m.set(2, 2, 2, true);
        assert_eq!(label_components(&m, Connectivity::TwentySix).len(), 1);
        assert_eq!(label_components(&m, Connectivity::Six).len(), 2);
        assert_eq!(flood_fill_oracle(&m, Connectivity::TwentySix).len(), 1);
        assert_eq!(flood_fill_oracle(&m, Connectivity::Six).len(), 2);
    }

    #[test]
    fn ids_follow_raster_order_of_first_voxel() {
        let mut m = MaskVolume::zeros([6, 6, 2], [1.0; 3]).unwrap();
        m.set(4, 0, 1, true); // later in raster order
        m.set(0, 5, 0, true); // earlier (z=0)
        let cc = label_components(&m, Connectivity::Six);
        assert_eq!(cc[0].voxels, vec![30]);
        assert_eq!(cc[1].id, 2);
    }

    #[test]
    fn agrees_with_oracle_on_random_masks() {
        let mut rng = ChaCha8Rng::seed_from_u64(11);
        for trial in 0..60 {
            let density = [0.05, 0.15, 0.3][trial % 3];
            let m = random_mask(&mut rng, 9, density);
            for conn in [Connectivity::Six, Connectivity::TwentySix] {
                let got: Vec<Vec<usize>> = label_components(&m, conn).into_iter().map(|c| c.voxels).collect();
                assert_eq!(got, flood_fill_oracle(&m, conn));
            }
        }
    }

    #[test]
    fn distance_examples() {
        let mut m = MaskVolume::zeros([10, 10, 1], [1.0; 3]).unwrap();
        m.set(3, 4, 0, true);
        let c = m.voxel_center_mm(crate::volume::linear_index(m.dims(), 3, 4, 0));
        assert_eq!(centroid_to_mask_distance(c, &m).unwrap(), 0.0);
        // voxel (2.5,3.5,0.5)-centred; shift the query so the offset is (3,4,0)
        let q = [c[0] - 3.0, c[1] - 4.0, c[2]];
        assert!((centroid_to_mask_distance(q, &m).unwrap() - 5.0).abs() < 1e-12);
        // nearest of two voxels at distances 2 and 7 along x
        let mut two = MaskVolume::zeros([12, 1, 1], [1.0; 3]).unwrap();
        two.set(0, 0, 0, true);
        two.set(9, 0, 0, true);
        assert!((centroid_to_mask_distance([2.5, 0.5, 0.5], &two).unwrap() - 2.0).abs() < 1e-12);
        let empty = MaskVolume::zeros([2, 2, 2], [1.0; 3]).unwrap();
        assert!(matches!(centroid_to_mask_distance([0.0; 3], &empty), Err(Error::NoAnnotationVoxels)));
    }

    #[test]
    fn distance_honours_anisotropic_spacing() {
        let mut m = MaskVolume::zeros([1, 1, 3], [1.0, 1.0, 2.0]).unwrap();
        m.set(0, 0, 2, true); // centre z = 5 mm
        assert!((centroid_to_mask_distance([0.5, 0.5, 1.0], &m).unwrap() - 4.0).abs() < 1e-12);
    }

    #[test]
    fn dice_examples() {
        assert_eq!(dice(&[1, 2, 3], &[1, 2, 3]), 1.0);
        assert_eq!(dice(&[1, 2], &[3, 4]), 0.0);
        assert_eq!(dice(&[1, 2, 3, 4], &[3, 4, 5, 6]), 0.5);
        assert_eq!(dice(&[], &[]), 1.0);
    }

    fn sorted_set(max: usize) -> impl Strategy<Value = Vec<usize>> {
        proptest::collection::btree_set(0..max, 0..40).prop_map(|s| s.into_iter().collect())
    }

    proptest! {
        #[test]
        fn components_partition_foreground(seed in any::<u64>(), density in 0.0f64..0.6) {
            let mut rng = ChaCha8Rng::seed_from_u64(seed);
            let m = random_mask(&mut rng, 7, density);
            for conn in [Connectivity::Six, Connectivity::TwentySix] {
                let cc = label_components(&m, conn);
                let total: usize = cc.iter().map(Component::volume_voxels).sum();
                prop_assert_eq!(total, m.foreground_count());
                for c in &cc {
                    let lo: Vec<f64> = (0..3).map(|a| c.voxels.iter().map(|&v| coords_of(m.dims(), v)[a] as f64).fold(f64::INFINITY, f64::min)).collect();
                    let hi: Vec<f64> = (0..3).map(|a| c.voxels.iter().map(|&v| coords_of(m.dims(), v)[a] as f64 + 1.0).fold(0.0, f64::max)).collect();
                    for a in 0..3 {
                        prop_assert!(c.centroid_mm[a] >= lo[a] && c.centroid_mm[a] <= hi[a]);
                    }
                }
            }
        }

        #[test]
        fn dice_symmetric_and_bounded(a in sorted_set(60), b in sorted_set(60)) {
            let d = dice(&a, &b);
            prop_assert_eq!(d, dice(&b, &a));
            prop_assert!((0.0..=1.0).contains(&d));
            prop_assert_eq!(dice(&a, &a), 1.0);
        }

        #[test]
        fn nearest_distance_lower_bounds_any_voxel(seed in any::<u64>(), q in proptest::array::uniform3(-2.0f64..10.0)) {
            let mut rng = ChaCha8Rng::seed_from_u64(seed);
            let m = random_mask(&mut rng, 6, 0.1);
            prop_assume!(m.foreground_count() > 0);
            let d = centroid_to_mask_distance(q, &m).unwrap();
            for i in m.foreground_indices() {
                prop_assert!(d <= dist(q, m.voxel_center_mm(i)) + 1e-12);
            }
        }
    }

    #[test]
    fn dice_nonincreasing_as_overlap_shrinks() {
        // |a| = |b| = 8 throughout; overlap drops from 8 to 0.
        let a: Vec<usize> = (0..8).collect();
        let mut last = f64::INFINITY;
        for shift in 0..=8 {
            let b: Vec<usize> = (shift..shift + 8).collect();
            let d = dice(&a, &b);
            assert!(d <= last);
            last = d;
        }
    }
}
