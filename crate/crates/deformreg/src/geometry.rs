//! Voxel grid geometry: shape plus a voxel-to-world affine.
//!
//! The affine maps homogeneous voxel indices `(i, j, k, 1)` to world
//! millimetre coordinates, the NIfTI convention. Note the index order:
//! `i` runs along the fastest memory axis (`w`), `k` along the slowest
//! (`d`), so `dims = [d, h, w]` lists extents along `(k, j, i)`.

use nalgebra::{Matrix4, Vector3, Vector4};

use crate::error::{Error, Result};

#[derive(Clone, Debug, PartialEq)]
pub struct GridGeometry {
    /// Spatial extents `[d, h, w]`.
    pub dims: [usize; 3],
    /// Voxel-to-world transform (mm).
    pub affine: Matrix4<f64>,
}

impl GridGeometry {
    pub fn new(dims: [usize; 3], affine: Matrix4<f64>) -> Result<Self> {
        if dims.iter().any(|&n| n == 0) {
            return Err(Error::invalid(format!(
                "grid extents must be >= 1, got {dims:?}"
            )));
        }
        if !affine.iter().all(|v| v.is_finite()) || affine.determinant().abs() < 1e-12 {
            return Err(Error::SingularAffine);
        }
        let g = GridGeometry { dims, affine };
        if g.spacing().iter().any(|&s| !(s > 0.0)) {
            return Err(Error::invalid("voxel spacing must be strictly positive"));
        }
        Ok(g)
    }

    /// Axis-aligned geometry with the given spacing and origin at zero.
    pub fn axis_aligned(dims: [usize; 3], spacing: [f64; 3]) -> Result<Self> {
        let mut affine = Matrix4::identity();
        affine[(0, 0)] = spacing[0];
        affine[(1, 1)] = spacing[1];
        affine[(2, 2)] = spacing[2];
        GridGeometry::new(dims, affine)
    }

    pub fn voxel_count(&self) -> usize {
        self.dims[0] * self.dims[1] * self.dims[2]
    }

    /// Extents in index order `(i, j, k)` = `[w, h, d]`.
    pub fn extents_ijk(&self) -> [usize; 3] {
        [self.dims[2], self.dims[1], self.dims[0]]
    }

    /// Voxel size along `(i, j, k)` in mm (norms of the affine columns).
    pub fn spacing(&self) -> [f64; 3] {
        let a = &self.affine;
        [
            Vector3::new(a[(0, 0)], a[(1, 0)], a[(2, 0)]).norm(),
            Vector3::new(a[(0, 1)], a[(1, 1)], a[(2, 1)]).norm(),
            Vector3::new(a[(0, 2)], a[(1, 2)], a[(2, 2)]).norm(),
        ]
    }

    pub fn voxel_to_world(&self, p: [f64; 3]) -> [f64; 3] {
        let v = self.affine * Vector4::new(p[0], p[1], p[2], 1.0);
        [v[0], v[1], v[2]]
    }

    pub fn world_to_voxel(&self, w: [f64; 3]) -> [f64; 3] {
        let inv = self.inverse_affine();
        let v = inv * Vector4::new(w[0], w[1], w[2], 1.0);
        [v[0], v[1], v[2]]
    }

    pub fn inverse_affine(&self) -> Matrix4<f64> {
        self.affine
            .try_inverse()
            .expect("affine invertibility checked at construction")
    }

    /// Geometry after keeping every `factor`-th voxel per axis, starting
    /// at index 0. World positions of the retained voxels are unchanged.
    pub fn subsampled(&self, factor: usize) -> Result<Self> {
        let dims = [
            self.dims[0].div_ceil(factor),
            self.dims[1].div_ceil(factor),
            self.dims[2].div_ceil(factor),
        ];
        let f = factor as f64;
        let scale = Matrix4::from_diagonal(&Vector4::new(f, f, f, 1.0));
        GridGeometry::new(dims, self.affine * scale)
    }

    /// True if the two grids share shape and affine to tight tolerance.
    pub fn approx_eq(&self, other: &GridGeometry) -> bool {
        self.dims == other.dims
            && self
                .affine
                .iter()
                .zip(other.affine.iter())
                .all(|(a, b)| (a - b).abs() <= 1e-9 * (1.0 + a.abs().max(b.abs())))
    }
}
