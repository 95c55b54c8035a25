use std::sync::OnceLock;

use super::{Coord3, CoordTable};
use crate::error::{Error, Result};
use crate::matrix::Matrix;
use crate::real::Real;

/// Unique integer coordinates with one feature row each.
///
/// `stride` is the grid step in base-voxel units and every coordinate is a
/// multiple of it; `voxel_size` is the metric extent of one base unit, so a
/// site at `c` covers `[c, c + stride) * voxel_size` in meters.
#[derive(Debug)]
pub struct SparseTensor<T> {
    coords: Vec<Coord3>,
    feats: Matrix<T>,
    stride: u32,
    voxel_size: [f64; 3],
    index: OnceLock<CoordTable>,
}

impl<T: Clone> Clone for SparseTensor<T> {
    fn clone(&self) -> Self {
        Self {
            coords: self.coords.clone(),
            feats: self.feats.clone(),
            stride: self.stride,
            voxel_size: self.voxel_size,
            index: OnceLock::new(),
        }
    }
}

impl<T: Real> SparseTensor<T> {
    pub fn new(coords: Vec<Coord3>, feats: Matrix<T>, stride: u32, voxel_size: [f64; 3]) -> Result<Self> {
        if feats.rows() != coords.len() {
            return Err(Error::shape(format!("{} feature rows for {} coordinates", feats.rows(), coords.len())));
        }
        if feats.cols() == 0 {
            return Err(Error::shape("feature width must be at least 1"));
        }
        if stride == 0 {
            return Err(Error::invalid("stride must be positive"));
        }
        if voxel_size.iter().any(|&s| !(s > 0.0 && s.is_finite())) {
            return Err(Error::invalid(format!("voxel size {voxel_size:?} must be positive")));
        }
        let s = stride as i32;
        if let Some(c) = coords.iter().find(|c| c.x % s != 0 || c.y % s != 0 || c.z % s != 0) {
            return Err(Error::Misaligned { coord: c.to_array(), stride });
        }
        let table = CoordTable::build(&coords).map_err(|c| Error::DuplicateCoord(c.to_array()))?;
        let index = OnceLock::new();
        let _ = index.set(table);
        Ok(Self { coords, feats, stride, voxel_size, index })
    }

    pub fn empty(channels: usize, stride: u32, voxel_size: [f64; 3]) -> Result<Self> {
        Self::new(Vec::new(), Matrix::zeros(0, channels), stride, voxel_size)
    }

    pub fn coords(&self) -> &[Coord3] {
        &self.coords
    }

    pub fn feats(&self) -> &Matrix<T> {
        &self.feats
    }

    pub fn into_parts(self) -> (Vec<Coord3>, Matrix<T>) {
        (self.coords, self.feats)
    }

    pub fn stride(&self) -> u32 {
        self.stride
    }

    pub fn voxel_size(&self) -> [f64; 3] {
        self.voxel_size
    }

    pub fn len(&self) -> usize {
        self.coords.len()
    }

    pub fn is_empty(&self) -> bool {
        self.coords.is_empty()
    }

    pub fn channels(&self) -> usize {
        self.feats.cols()
    }

    pub fn index(&self) -> &CoordTable {
        self.index.get_or_init(|| CoordTable::build(&self.coords).expect("coordinates validated at construction"))
    }

    pub fn find(&self, c: Coord3) -> Option<usize> {
        self.index().get(c).map(|i| i as usize)
    }

    /// Same sites, new features.
    pub fn with_feats(&self, feats: Matrix<T>) -> Result<Self> {
        Self::new(self.coords.clone(), feats, self.stride, self.voxel_size)
    }

    /// Metric center of the site at row `i`.
    pub fn center(&self, i: usize) -> [f64; 3] {
        site_center(self.coords[i], self.stride, self.voxel_size)
    }

    /// Shifts every coordinate by `delta`, which must respect the stride.
    pub fn translated(&self, delta: Coord3) -> Result<Self> {
        let coords = self.coords.iter().map(|&c| c + delta).collect();
        Self::new(coords, self.feats.clone(), self.stride, self.voxel_size)
    }
}

/// Metric center of a site at `c` with grid step `stride`.
pub fn site_center(c: Coord3, stride: u32, voxel_size: [f64; 3]) -> [f64; 3] {
    let h = stride as f64 * 0.5;
    [(c.x as f64 + h) * voxel_size[0], (c.y as f64 + h) * voxel_size[1], (c.z as f64 + h) * voxel_size[2]]
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn rejects_invariant_violations() {
        let f = Matrix::<f64>::zeros(2, 1);
        let dup = vec![Coord3::new(0, 0, 0), Coord3::new(0, 0, 0)];
        assert!(matches!(SparseTensor::new(dup, f.clone(), 1, [1.0; 3]), Err(Error::DuplicateCoord(_))));
        let odd = vec![Coord3::new(0, 0, 0), Coord3::new(1, 0, 0)];
        assert!(matches!(SparseTensor::new(odd, f.clone(), 2, [1.0; 3]), Err(Error::Misaligned { .. })));
        assert!(SparseTensor::new(vec![Coord3::ORIGIN], f, 1, [1.0; 3]).is_err());
        assert!(SparseTensor::<f64>::empty(0, 1, [1.0; 3]).is_err());
    }

    #[test]
    fn center_accounts_for_stride() {
        let t = SparseTensor::new(vec![Coord3::new(2, 0, -2)], Matrix::<f32>::zeros(1, 1), 2, [0.02; 3]).unwrap();
        let c = t.center(0);
        assert!((c[0] - 0.06).abs() < 1e-12 && (c[1] - 0.02).abs() < 1e-12);
        assert!((c[2] + 0.02).abs() < 1e-12);
    }
}
