//! Dense voxel grids over an axis-aligned bounding box, with differentiable
//! trilinear queries and 8-neighbor sampling.
//!
//! Grid values live at cell corners (node-centered): index `(0,0,0)` sits at
//! `bbox_min`, index `(N-1, N-1, N-1)` at `bbox_max`. Data is laid out
//! `[x][y][z][channel]`, so one voxel's channels are contiguous.

use serde::{Deserialize, Serialize};

use crate::diffmath::softplus;
use crate::{Error, Result};

/// Raw density assigned to points outside the bounding box, chosen so the
/// activated density is numerically zero and empty space stays empty.
pub const OUTSIDE_RAW_DENSITY: f64 = -25.0;

/// The lattice a grid lives on: dims plus world-space bounding box.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct GridGeom {
    pub dims: [usize; 3],
    pub bbox_min: [f64; 3],
    pub bbox_max: [f64; 3],
}

/// The 8 lattice corners around a query point with their trilinear weights.
#[derive(Debug, Clone)]
pub struct CellWeights {
    /// Flat voxel indices, x-major.
    pub corners: [u32; 8],
    pub weights: [f64; 8],
    /// Integer base corner and fractional position within the cell.
    pub base: [usize; 3],
    pub frac: [f64; 3],
}

impl GridGeom {
    pub fn new(dims: [usize; 3], bbox_min: [f64; 3], bbox_max: [f64; 3]) -> Result<Self> {
        if dims.iter().any(|&d| d < 2) {
            return Err(Error::InvalidConfig(format!("grid dims must be >= 2, got {dims:?}")));
        }
        if bbox_min.iter().zip(&bbox_max).any(|(a, b)| a >= b) {
            return Err(Error::InvalidConfig(format!(
                "degenerate bbox {bbox_min:?}..{bbox_max:?}"
            )));
        }
        Ok(GridGeom { dims, bbox_min, bbox_max })
    }

    pub fn num_voxels(&self) -> usize {
        self.dims[0] * self.dims[1] * self.dims[2]
    }

    pub fn flat(&self, ix: usize, iy: usize, iz: usize) -> usize {
        (ix * self.dims[1] + iy) * self.dims[2] + iz
    }

    /// World position of a lattice node.
    pub fn node_pos(&self, ix: usize, iy: usize, iz: usize) -> [f64; 3] {
        let mut p = [0.0; 3];
        let idx = [ix, iy, iz];
        for a in 0..3 {
            let t = idx[a] as f64 / (self.dims[a] - 1) as f64;
            p[a] = self.bbox_min[a] + t * (self.bbox_max[a] - self.bbox_min[a]);
        }
        p
    }

    /// Edge length of one cell per axis, world units.
    pub fn voxel_size(&self) -> [f64; 3] {
        let mut s = [0.0; 3];
        for a in 0..3 {
            s[a] = (self.bbox_max[a] - self.bbox_min[a]) / (self.dims[a] - 1) as f64;
        }
        s
    }

    pub fn voxel_diagonal(&self) -> f64 {
        let s = self.voxel_size();
        (s[0] * s[0] + s[1] * s[1] + s[2] * s[2]).sqrt()
    }

    /// Affine map sending `bbox_min` to index `(0,0,0)` and `bbox_max` to
    /// `(Nx-1, Ny-1, Nz-1)`. Out-of-box points clamp, flagged `false`.
    pub fn world_to_grid(&self, p: [f64; 3]) -> ([f64; 3], bool) {
        let mut idx = [0.0; 3];
        let mut inside = true;
        for a in 0..3 {
            let t = (p[a] - self.bbox_min[a]) / (self.bbox_max[a] - self.bbox_min[a]);
            let n1 = (self.dims[a] - 1) as f64;
            let mut i = t * n1;
            if i < 0.0 {
                i = 0.0;
                inside = false;
            } else if i > n1 {
                i = n1;
                inside = false;
            }
            idx[a] = i;
        }
        (idx, inside)
    }

    pub fn contains(&self, p: [f64; 3]) -> bool {
        p.iter()
            .zip(self.bbox_min.iter().zip(&self.bbox_max))
            .all(|(x, (lo, hi))| x >= lo && x <= hi)
    }

    /// Trilinear cell lookup for a world point (clamp-to-edge outside).
    pub fn cell(&self, p: [f64; 3]) -> CellWeights {
        let (idx, _) = self.world_to_grid(p);
        self.cell_from_index(idx)
    }

    /// Cell lookup from a continuous grid index already in range.
    pub fn cell_from_index(&self, idx: [f64; 3]) -> CellWeights {
        let mut base = [0usize; 3];
        let mut frac = [0.0; 3];
        for a in 0..3 {
            let mut i0 = idx[a].floor() as usize;
            if i0 > self.dims[a] - 2 {
                i0 = self.dims[a] - 2;
            }
            base[a] = i0;
            frac[a] = idx[a] - i0 as f64;
        }
        let mut corners = [0u32; 8];
        let mut weights = [0.0; 8];
        for k in 0..8 {
            let dx = (k >> 2) & 1;
            let dy = (k >> 1) & 1;
            let dz = k & 1;
            corners[k] = self.flat(base[0] + dx, base[1] + dy, base[2] + dz) as u32;
            let wx = if dx == 1 { frac[0] } else { 1.0 - frac[0] };
            let wy = if dy == 1 { frac[1] } else { 1.0 - frac[1] };
            let wz = if dz == 1 { frac[2] } else { 1.0 - frac[2] };
            weights[k] = wx * wy * wz;
        }
        CellWeights { corners, weights, base, frac }
    }
}

/// A dense C-channel grid owning its data.
#[derive(Debug, Clone, PartialEq)]
pub struct VoxelGrid {
    pub geom: GridGeom,
    pub channels: usize,
    pub data: Vec<f64>,
}

impl VoxelGrid {
    pub fn filled(geom: GridGeom, channels: usize, value: f64) -> Result<Self> {
        if channels == 0 {
            return Err(Error::InvalidConfig("grid needs at least one channel".into()));
        }
        let data = vec![value; geom.num_voxels() * channels];
        Ok(VoxelGrid { geom, channels, data })
    }

    pub fn from_data(geom: GridGeom, channels: usize, data: Vec<f64>) -> Result<Self> {
        if data.len() != geom.num_voxels() * channels {
            return Err(Error::ShapeMismatch {
                name: "voxelgrid".into(),
                detail: format!(
                    "data length {} vs {} voxels x {channels} channels",
                    data.len(),
                    geom.num_voxels()
                ),
            });
        }
        Ok(VoxelGrid { geom, channels, data })
    }

    pub fn value_at_node(&self, ix: usize, iy: usize, iz: usize) -> &[f64] {
        let base = self.geom.flat(ix, iy, iz) * self.channels;
        &self.data[base..base + self.channels]
    }

    /// Trilinear interpolation at a world point; exact at lattice nodes,
    /// clamp-to-edge outside the box.
    pub fn trilinear_query(&self, p: [f64; 3]) -> Vec<f64> {
        let cw = self.geom.cell(p);
        blend_corners(&self.data, self.channels, &cw)
    }

    /// Gradient of each output channel w.r.t. the world position, as
    /// `out[c][axis]`.
    pub fn trilinear_query_grad_pos(&self, p: [f64; 3]) -> Vec<[f64; 3]> {
        let cw = self.geom.cell(p);
        let size = self.geom.voxel_size();
        let mut out = vec![[0.0; 3]; self.channels];
        for k in 0..8 {
            let dx = (k >> 2) & 1;
            let dy = (k >> 1) & 1;
            let dz = k & 1;
            let wx = if dx == 1 { cw.frac[0] } else { 1.0 - cw.frac[0] };
            let wy = if dy == 1 { cw.frac[1] } else { 1.0 - cw.frac[1] };
            let wz = if dz == 1 { cw.frac[2] } else { 1.0 - cw.frac[2] };
            let sx = if dx == 1 { 1.0 } else { -1.0 };
            let sy = if dy == 1 { 1.0 } else { -1.0 };
            let sz = if dz == 1 { 1.0 } else { -1.0 };
            let base = cw.corners[k] as usize * self.channels;
            for c in 0..self.channels {
                let v = self.data[base + c];
                out[c][0] += v * sx * wy * wz / size[0];
                out[c][1] += v * wx * sy * wz / size[1];
                out[c][2] += v * wx * wy * sz / size[2];
            }
        }
        out
    }

    /// Trilinear resample onto new dims over the same bbox. Identity dims
    /// return a bitwise-equal copy.
    pub fn upsample(&self, new_dims: [usize; 3]) -> Result<VoxelGrid> {
        if new_dims == self.geom.dims {
            return Ok(self.clone());
        }
        let geom = GridGeom::new(new_dims, self.geom.bbox_min, self.geom.bbox_max)?;
        let mut data = vec![0.0; geom.num_voxels() * self.channels];
        for ix in 0..new_dims[0] {
            for iy in 0..new_dims[1] {
                for iz in 0..new_dims[2] {
                    let p = geom.node_pos(ix, iy, iz);
                    let v = self.trilinear_query(p);
                    let base = geom.flat(ix, iy, iz) * self.channels;
                    data[base..base + self.channels].copy_from_slice(&v);
                }
            }
        }
        Ok(VoxelGrid { geom, channels: self.channels, data })
    }
}

/// Blend 8 corner vectors with the given weights.
pub fn blend_corners(data: &[f64], channels: usize, cw: &CellWeights) -> Vec<f64> {
    let mut out = vec![0.0; channels];
    for (idx, w) in cw.corners.iter().zip(&cw.weights) {
        if *w == 0.0 {
            continue;
        }
        let base = *idx as usize * channels;
        for (o, v) in out.iter_mut().zip(&data[base..base + channels]) {
            *o += w * v;
        }
    }
    out
}

/// Density activation: shifted softplus, nonnegative and monotone in `raw`.
pub fn density_activation(raw: f64, shift: f64) -> f64 {
    softplus(raw + shift)
}

/// Per-query bundle of the 8 surrounding corners: feature vectors, raw and
/// activated densities, offsets `corner - query` in grid-index units, and
/// the query's trilinear weights.
#[derive(Debug, Clone)]
pub struct NeighborSample {
    pub features: Vec<f64>,
    pub raw_densities: [f64; 8],
    pub activated: [f64; 8],
    pub offsets: [[f64; 3]; 8],
    pub weights: [f64; 8],
    pub corners: [u32; 8],
}

/// Gather the 8 neighbors of `xq` from a density grid and a feature grid
/// sharing one lattice. Returns `None` outside the bbox (the all-empty
/// sample policy).
pub fn gather_neighbors(
    geom: &GridGeom,
    density: &[f64],
    features: &[f64],
    channels: usize,
    density_shift: f64,
    xq: [f64; 3],
) -> Option<NeighborSample> {
    let (idx, inside) = geom.world_to_grid(xq);
    if !inside {
        return None;
    }
    let cw = geom.cell_from_index(idx);
    let mut feats = Vec::with_capacity(8 * channels);
    let mut raw = [0.0; 8];
    let mut act = [0.0; 8];
    let mut offsets = [[0.0; 3]; 8];
    for k in 0..8 {
        let vi = cw.corners[k] as usize;
        feats.extend_from_slice(&features[vi * channels..(vi + 1) * channels]);
        raw[k] = density[vi];
        act[k] = density_activation(raw[k], density_shift);
        let dx = ((k >> 2) & 1) as f64;
        let dy = ((k >> 1) & 1) as f64;
        let dz = (k & 1) as f64;
        offsets[k] = [
            (cw.base[0] as f64 + dx) - idx[0],
            (cw.base[1] as f64 + dy) - idx[1],
            (cw.base[2] as f64 + dz) - idx[2],
        ];
    }
    Some(NeighborSample {
        features: feats,
        raw_densities: raw,
        activated: act,
        offsets,
        weights: cw.weights,
        corners: cw.corners,
    })
}
