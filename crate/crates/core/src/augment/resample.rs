//! Center-anchored trilinear zoom with zero padding.

use crate::volume::Volume3D;

/// Per-axis sample plan: lower neighbour index and fractional weight.
fn axis_plan(n: usize, factor: f64) -> Vec<(isize, f64)> {
    let c = (n as f64 - 1.0) / 2.0;
    (0..n)
        .map(|o| {
            let s = c + (o as f64 - c) / factor;
            let i0 = s.floor();
            (i0 as isize, s - i0)
        })
        .collect()
}

/// Resamples `vol` so content is magnified by `factor` about the volume
/// center. Output dims equal input dims; samples falling outside the grid
/// read as 0.
pub fn zoom(vol: &Volume3D, factor: f64) -> Volume3D {
    let [nx, ny, nz] = vol.dims();
    let px = axis_plan(nx, factor);
    let py = axis_plan(ny, factor);
    let pz = axis_plan(nz, factor);
    let data = vol.data();
    let g = vol.geometry();
    let read = |x: isize, y: isize, z: isize| -> f64 {
        if x < 0 || y < 0 || z < 0 || x >= nx as isize || y >= ny as isize || z >= nz as isize {
            0.0
        } else {
            data[g.index(x as usize, y as usize, z as usize)] as f64
        }
    };
    let mut out = Vec::with_capacity(vol.len());
    for &(z0, tz) in &pz {
        for &(y0, ty) in &py {
            for &(x0, tx) in &px {
                let c00 = read(x0, y0, z0) * (1.0 - tx) + read(x0 + 1, y0, z0) * tx;
                let c10 = read(x0, y0 + 1, z0) * (1.0 - tx) + read(x0 + 1, y0 + 1, z0) * tx;
                let c01 = read(x0, y0, z0 + 1) * (1.0 - tx) + read(x0 + 1, y0, z0 + 1) * tx;
                let c11 = read(x0, y0 + 1, z0 + 1) * (1.0 - tx) + read(x0 + 1, y0 + 1, z0 + 1) * tx;
                let c0 = c00 * (1.0 - ty) + c10 * ty;
                let c1 = c01 * (1.0 - ty) + c11 * ty;
                out.push((c0 * (1.0 - tz) + c1 * tz) as f32);
            }
        }
    }
    Volume3D::from_parts_unchecked(*vol.geometry(), out)
}
