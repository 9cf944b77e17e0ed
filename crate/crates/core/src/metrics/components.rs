//! 3D connected-component labelling (two-pass, union-find).

use serde::{Deserialize, Serialize};

use crate::volume::MaskVolume;

/// Voxel neighbourhood used to decide connectivity.
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(try_from = "u8", into = "u8")]
pub enum Connectivity {
    /// Face neighbours.
    Six,
    /// Face and edge neighbours.
    Eighteen,
    /// Face, edge and corner neighbours.
    #[default]
    TwentySix,
}

impl TryFrom<u8> for Connectivity {
    type Error = String;

    fn try_from(v: u8) -> Result<Self, String> {
        match v {
            6 => Ok(Connectivity::Six),
            18 => Ok(Connectivity::Eighteen),
            26 => Ok(Connectivity::TwentySix),
            other => Err(format!("connectivity must be 6, 18 or 26, got {other}")),
        }
    }
}

impl From<Connectivity> for u8 {
    fn from(c: Connectivity) -> u8 {
        match c {
            Connectivity::Six => 6,
            Connectivity::Eighteen => 18,
            Connectivity::TwentySix => 26,
        }
    }
}

impl Connectivity {
    fn max_nonzero(self) -> usize {
        match self {
            Connectivity::Six => 1,
            Connectivity::Eighteen => 2,
            Connectivity::TwentySix => 3,
        }
    }

    /// Neighbour offsets that precede a voxel in raster order.
    fn backward_offsets(self) -> Vec<[isize; 3]> {
        let mut out = Vec::new();
        for dz in -1isize..=0 {
            for dy in -1isize..=1 {
                for dx in -1isize..=1 {
                    let before = dz < 0 || (dz == 0 && (dy < 0 || (dy == 0 && dx < 0)));
                    let nonzero = [dx, dy, dz].iter().filter(|&&d| d != 0).count();
                    if before && nonzero <= self.max_nonzero() {
                        out.push([dx, dy, dz]);
                    }
                }
            }
        }
        out
    }

    /// All neighbour offsets of the neighbourhood.
    pub fn offsets(self) -> Vec<[isize; 3]> {
        let mut out = Vec::new();
        for dz in -1isize..=1 {
            for dy in -1isize..=1 {
                for dx in -1isize..=1 {
                    let nonzero = [dx, dy, dz].iter().filter(|&&d| d != 0).count();
                    if nonzero > 0 && nonzero <= self.max_nonzero() {
                        out.push([dx, dy, dz]);
                    }
                }
            }
        }
        out
    }
}

/// Component labels (0 = background, 1..=count) in voxel order.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct Labels {
    pub labels: Vec<u32>,
    pub count: usize,
}

impl Labels {
    /// Voxel count of every component, indexed by `label - 1`.
    pub fn sizes(&self) -> Vec<usize> {
        let mut sizes = vec![0; self.count];
        for &l in &self.labels {
            if l > 0 {
                sizes[l as usize - 1] += 1;
            }
        }
        sizes
    }
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
    let (ra, rb) = (find(parent, a), find(parent, b));
    if ra != rb {
        let (lo, hi) = if ra < rb { (ra, rb) } else { (rb, ra) };
        parent[hi as usize] = lo;
    }
}

/// Labels foreground components of `mask`. Labels are numbered in the raster
/// order of each component's first voxel.
pub fn connected_components(mask: &MaskVolume, connectivity: Connectivity) -> Labels {
    let g = mask.geometry();
    let [nx, ny, nz] = g.dims;
    let data = mask.data();
    let offsets = connectivity.backward_offsets();
    let mut provisional = vec![0u32; data.len()];
    // parent[0] is a dummy so provisional labels index directly
    let mut parent: Vec<u32> = vec![0];

    for z in 0..nz {
        for y in 0..ny {
            for x in 0..nx {
                let idx = g.index(x, y, z);
                if data[idx] == 0 {
                    continue;
                }
                let mut label = 0u32;
                for &[dx, dy, dz] in &offsets {
                    let (qx, qy, qz) = (x as isize + dx, y as isize + dy, z as isize + dz);
                    if qx < 0 || qy < 0 || qz < 0 || qx >= nx as isize || qy >= ny as isize {
                        continue;
                    }
                    let n = provisional[g.index(qx as usize, qy as usize, qz as usize)];
                    if n == 0 {
                        continue;
                    }
                    if label == 0 {
                        label = n;
                    } else if n != label {
                        union(&mut parent, label, n);
                    }
                }
                if label == 0 {
                    label = parent.len() as u32;
                    parent.push(label);
                }
                provisional[idx] = label;
            }
        }
    }

    let mut remap = vec![0u32; parent.len()];
    let mut count = 0u32;
    let labels = provisional
        .iter()
        .map(|&l| {
            if l == 0 {
                return 0;
            }
            let root = find(&mut parent, l) as usize;
            if remap[root] == 0 {
                count += 1;
                remap[root] = count;
            }
            remap[root]
        })
        .collect();
    Labels { labels, count: count as usize }
}
