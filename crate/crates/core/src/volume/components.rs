use serde::{Deserialize, Serialize};

use super::grid::VoxelGrid;
use super::maps::LabelMap;
use crate::error::{Error, Result};

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
pub enum Connectivity {
    /// Face neighbours.
    #[default]
    Six,
    /// Face, edge and corner neighbours.
    TwentySix,
}

impl Connectivity {
    pub fn from_count(n: u32) -> Result<Self> {
        match n {
            6 => Ok(Self::Six),
            26 => Ok(Self::TwentySix),
            _ => Err(Error::invalid(format!(
                "connectivity must be 6 or 26, got {n}"
            ))),
        }
    }

    /// Neighbour offsets that precede a voxel in raster order.
    fn backward_offsets(self) -> Vec<[isize; 3]> {
        let mut out = Vec::new();
        for dz in -1isize..=0 {
            for dy in -1isize..=1 {
                for dx in -1isize..=1 {
                    let before = dz < 0 || (dz == 0 && (dy < 0 || (dy == 0 && dx < 0)));
                    if !before {
                        continue;
                    }
                    let manhattan = dx.abs() + dy.abs() + dz.abs();
                    if self == Self::TwentySix || manhattan == 1 {
                        out.push([dx, dy, dz]);
                    }
                }
            }
        }
        out
    }
}

/// Per-voxel component ids (0 = background) and component sizes.
#[derive(Clone, Debug, PartialEq)]
pub struct ComponentMap {
    pub ids: VoxelGrid<u32>,
    /// `sizes[id - 1]` is the voxel count of component `id`.
    pub sizes: Vec<usize>,
}

impl ComponentMap {
    pub fn count(&self) -> usize {
        self.sizes.len()
    }
}

/// Labels connected foreground regions.
///
/// Foreground is every voxel whose class is in `foreground`. Ids start at 1
/// and follow first encounter in x-fastest raster order.
pub fn connected_components(
    labels: &LabelMap,
    foreground: &[u8],
    connectivity: Connectivity,
) -> ComponentMap {
    let mut is_fg = [false; 256];
    foreground.iter().for_each(|&c| is_fg[c as usize] = true);
    let mask: Vec<bool> = labels.data().iter().map(|&l| is_fg[l as usize]).collect();
    label_mask(labels.grid(), &mask, connectivity)
}

fn find(parent: &mut [u32], mut x: u32) -> u32 {
    while parent[x as usize] != x {
        let p = parent[x as usize];
        parent[x as usize] = parent[p as usize];
        x = p;
    }
    x
}

fn union(parent: &mut [u32], a: u32, b: u32) {
    let ra = find(parent, a);
    let rb = find(parent, b);
    if ra != rb {
        // keep the smaller provisional label as root
        let (lo, hi) = if ra < rb { (ra, rb) } else { (rb, ra) };
        parent[hi as usize] = lo;
    }
}

fn label_mask<T>(geometry: &VoxelGrid<T>, mask: &[bool], connectivity: Connectivity) -> ComponentMap
where
    T: super::grid::Voxel,
{
    let [nx, ny, nz] = geometry.dims();
    let offsets = connectivity.backward_offsets();
    let mut provisional = vec![0u32; mask.len()];
    // parent[0] is unused so provisional labels can start at 1
    let mut parent: Vec<u32> = vec![0];

    for z in 0..nz {
        for y in 0..ny {
            for x in 0..nx {
                let i = geometry.index(x, y, z);
                if !mask[i] {
                    continue;
                }
                let mut current = 0u32;
                for off in &offsets {
                    let (qx, qy, qz) = (
                        x as isize + off[0],
                        y as isize + off[1],
                        z as isize + off[2],
                    );
                    if qx < 0 || qy < 0 || qz < 0 || qx >= nx as isize || qy >= ny as isize {
                        continue;
                    }
                    let q = geometry.index(qx as usize, qy as usize, qz as usize);
                    let l = provisional[q];
                    if l == 0 {
                        continue;
                    }
                    if current == 0 {
                        current = l;
                    } else {
                        union(&mut parent, current, l);
                    }
                }
                if current == 0 {
                    current = parent.len() as u32;
                    parent.push(current);
                }
                provisional[i] = current;
            }
        }
    }

    // Resolve to final ids in first-encounter order.
    let mut final_id = vec![0u32; parent.len()];
    let mut sizes = Vec::new();
    let mut ids = vec![0u32; mask.len()];
    for (i, &l) in provisional.iter().enumerate() {
        if l == 0 {
            continue;
        }
        let root = find(&mut parent, l) as usize;
        if final_id[root] == 0 {
            sizes.push(0);
            final_id[root] = sizes.len() as u32;
        }
        let id = final_id[root];
        sizes[id as usize - 1] += 1;
        ids[i] = id;
    }
    ComponentMap {
        ids: geometry.with_data(ids).expect("same geometry"),
        sizes,
    }
}

/// Keeps only the largest 6-connected component of the joint foreground
/// (all non-zero classes together). Ties keep the component met first in
/// raster order. Labels inside the kept component are unchanged.
pub fn largest_foreground_component(labels: &LabelMap) -> LabelMap {
    let mask: Vec<bool> = labels.data().iter().map(|&l| l != 0).collect();
    let cc = label_mask(labels.grid(), &mask, Connectivity::Six);
    if cc.count() <= 1 {
        return labels.clone();
    }
    let mut keep = 1u32;
    for (i, &s) in cc.sizes.iter().enumerate() {
        if s > cc.sizes[keep as usize - 1] {
            keep = i as u32 + 1;
        }
    }
    let data = labels
        .data()
        .iter()
        .zip(cc.ids.data())
        .map(|(&l, &id)| if id == keep { l } else { 0 })
        .collect();
    labels
        .with_data(data)
        .expect("labels drawn from the input table")
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::volume::ClassTable;

    fn seg(dims: [usize; 3], data: Vec<u8>) -> LabelMap {
        LabelMap::new(
            VoxelGrid::new(dims, [1.0; 3], data).unwrap(),
            ClassTable::seg3(),
        )
        .unwrap()
    }

    #[test]
    fn all_background() {
        let l = seg([3, 3, 3], vec![0; 27]);
        let cc = connected_components(&l, &[1, 2], Connectivity::Six);
        assert_eq!(cc.count(), 0);
        assert!(cc.ids.data().iter().all(|&v| v == 0));
        assert_eq!(largest_foreground_component(&l), l);
    }

    #[test]
    fn two_components_in_raster_order() {
        let mut data = vec![0u8; 16];
        data[0] = 1;
        data[1] = 1;
        data[3 + 4 * 3] = 1;
        let cc = connected_components(&seg([4, 4, 1], data), &[1], Connectivity::Six);
        assert_eq!(cc.sizes, vec![2, 1]);
        assert_eq!(cc.ids.get(0, 0, 0), 1);
        assert_eq!(cc.ids.get(1, 0, 0), 1);
        assert_eq!(cc.ids.get(3, 3, 0), 2);
    }

    #[test]
    fn diagonal_neighbours_only_join_at_26() {
        let mut data = vec![0u8; 8];
        data[0] = 1; // (0,0,0)
        data[7] = 1; // (1,1,1)
        let l = seg([2, 2, 2], data);
        assert_eq!(connected_components(&l, &[1], Connectivity::Six).count(), 2);
        assert_eq!(
            connected_components(&l, &[1], Connectivity::TwentySix).count(),
            1
        );
    }

    #[test]
    fn u_shape_merges_late() {
        // provisional labels 1 and 2 merge on the bottom row
        let data = vec![
            1, 0, 1, //
            1, 0, 1, //
            1, 1, 1,
        ];
        let cc = connected_components(&seg([3, 3, 1], data), &[1], Connectivity::Six);
        assert_eq!(cc.sizes, vec![7]);
    }

    #[test]
    fn largest_component_keeps_classes() {
        // size-5 blob with mixed classes, size-3 blob
        let data = vec![
            1, 2, 2, 0, 0, 0, 0, 1, //
            0, 1, 1, 0, 0, 0, 0, 1, //
            0, 0, 0, 0, 0, 0, 0, 2,
        ];
        let l = seg([8, 3, 1], data);
        let kept = largest_foreground_component(&l);
        let expect = vec![
            1, 2, 2, 0, 0, 0, 0, 0, //
            0, 1, 1, 0, 0, 0, 0, 0, //
            0, 0, 0, 0, 0, 0, 0, 0,
        ];
        assert_eq!(kept.data(), &expect[..]);
    }

    #[test]
    fn size_tie_keeps_first_component() {
        let data = vec![
            0, 0, 0, 0, 0, 2, 2, 0, //
            1, 1, 1, 1, 0, 2, 2, 0,
        ];
        // the class-2 blob is met first in raster order (index 5)
        let kept = largest_foreground_component(&seg([8, 2, 1], data));
        assert_eq!(kept.count(2), 4);
        assert_eq!(kept.count(1), 0);
    }

    #[test]
    fn connectivity_from_count() {
        assert_eq!(
            Connectivity::from_count(26).unwrap(),
            Connectivity::TwentySix
        );
        assert!(Connectivity::from_count(18).is_err());
    }
}
