//! Point-cloud quantization with average-pooled voxel features.

use std::collections::BTreeMap;

use crate::error::{Error, Result};
use crate::matrix::Matrix;
use crate::real::Real;
use crate::sparse::{Coord3, SparseTensor};

/// Metric voxel size used when ingesting scenes.
pub const DEFAULT_VOXEL_SIZE: f64 = 0.02;

#[derive(Clone, Debug, Default, PartialEq)]
pub struct PointCloud {
    pub positions: Vec<[f64; 3]>,
    pub features: Option<Matrix<f64>>,
}

impl PointCloud {
    pub fn new(positions: Vec<[f64; 3]>, features: Option<Matrix<f64>>) -> Result<Self> {
        if positions.iter().flatten().any(|v| !v.is_finite()) {
            return Err(Error::NonFinite("point coordinates".into()));
        }
        if let Some(f) = &features {
            if f.rows() != positions.len() {
                return Err(Error::shape("feature rows differ from point count"));
            }
        }
        Ok(Self { positions, features })
    }

    pub fn len(&self) -> usize {
        self.positions.len()
    }

    pub fn is_empty(&self) -> bool {
        self.positions.is_empty()
    }

    pub fn feature_width(&self) -> usize {
        self.features.as_ref().map_or(0, Matrix::cols)
    }
}

/// Per-class average box dimensions `(w, l, h)` in meters.
#[derive(Clone, Debug, PartialEq)]
pub struct ClassSizeTable {
    sizes: Vec<[f64; 3]>,
}

impl ClassSizeTable {
    pub fn new(sizes: Vec<[f64; 3]>) -> Result<Self> {
        if sizes.iter().flatten().any(|&v| !(v > 0.0 && v.is_finite())) {
            return Err(Error::invalid("class sizes must be strictly positive"));
        }
        Ok(Self { sizes })
    }

    /// Per-class mean of `(w, l, h)` over labelled boxes.
    pub fn from_boxes(n_class: usize, boxes: &[(crate::geometry::Box3D, usize)]) -> Result<Self> {
        let mut acc = vec![([0.0; 3], 0usize); n_class];
        for (b, c) in boxes {
            let e = acc.get_mut(*c).ok_or_else(|| Error::invalid(format!("class {c} out of range")))?;
            e.0[0] += b.w;
            e.0[1] += b.l;
            e.0[2] += b.h;
            e.1 += 1;
        }
        let sizes = acc
            .into_iter()
            .enumerate()
            .map(|(j, (s, n))| {
                if n == 0 {
                    Err(Error::invalid(format!("no boxes of class {j}")))
                } else {
                    Ok(s.map(|v| v / n as f64))
                }
            })
            .collect::<Result<_>>()?;
        Self::new(sizes)
    }

    pub fn n_class(&self) -> usize {
        self.sizes.len()
    }

    pub fn get(&self, class_id: usize) -> Result<[f64; 3]> {
        self.sizes.get(class_id).copied().ok_or_else(|| Error::invalid(format!("class {class_id} out of range")))
    }

    pub fn sizes(&self) -> &[[f64; 3]] {
        &self.sizes
    }
}

/// Occupied cells (sorted) and the ascending point indices each one holds.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct Quantization {
    pub coords: Vec<Coord3>,
    pub members: Vec<Vec<u32>>,
}

/// Assigns every point to cell `floor(p / cell)`. A point exactly on a cell
/// face lands in the higher-index cell.
pub fn quantize_points(positions: &[[f64; 3]], cell: [f64; 3]) -> Result<Quantization> {
    if cell.iter().any(|&s| !(s > 0.0 && s.is_finite())) {
        return Err(Error::invalid(format!("voxel size {cell:?} must be positive")));
    }
    let mut cells: BTreeMap<Coord3, Vec<u32>> = BTreeMap::new();
    for (i, &p) in positions.iter().enumerate() {
        let c = Coord3::quantize(p, cell).ok_or(Error::CoordRange)?;
        cells.entry(c).or_default().push(i as u32);
    }
    let (coords, members) = cells.into_iter().unzip();
    Ok(Quantization { coords, members })
}

/// Mean of the member rows of `feats` for every cell.
pub fn pool_mean<T: Real>(feats: &Matrix<f64>, members: &[Vec<u32>]) -> Matrix<T> {
    let mut out = Matrix::zeros(members.len(), feats.cols());
    for (r, m) in members.iter().enumerate() {
        let mut acc = vec![0.0f64; feats.cols()];
        for &i in m {
            for (a, &v) in acc.iter_mut().zip(feats.row(i as usize)) {
                *a += v;
            }
        }
        let inv = 1.0 / m.len() as f64;
        for (dst, a) in out.row_mut(r).iter_mut().zip(acc) {
            *dst = T::of(a * inv);
        }
    }
    out
}

/// Average-pooling voxelization at stride 1. Points without features
/// contribute a constant `1` channel.
pub fn voxelize_avg<T: Real>(cloud: &PointCloud, voxel_size: [f64; 3]) -> Result<SparseTensor<T>> {
    let q = quantize_points(&cloud.positions, voxel_size)?;
    let ones;
    let feats = match &cloud.features {
        Some(f) if f.cols() > 0 => f,
        _ => {
            ones = Matrix::from_fn(cloud.len(), 1, |_, _| 1.0);
            &ones
        }
    };
    let pooled = pool_mean(feats, &q.members);
    SparseTensor::new(q.coords, pooled, 1, voxel_size)
}

/// Class-specific cell size `alpha · d_j`, ordered `(x, y, z)`.
pub fn class_cell(sizes: &ClassSizeTable, class_id: usize, alpha: f64) -> Result<[f64; 3]> {
    if !(alpha > 0.0 && alpha.is_finite()) {
        return Err(Error::invalid(format!("scale factor {alpha} must be positive")));
    }
    Ok(sizes.get(class_id)?.map(|d| alpha * d))
}

/// Re-voxelizes vote points on the class grid `alpha · d_j`.
pub fn class_revoxelize<T: Real>(
    votes: &PointCloud,
    class_id: usize,
    sizes: &ClassSizeTable,
    alpha: f64,
) -> Result<SparseTensor<T>> {
    voxelize_avg(votes, class_cell(sizes, class_id, alpha)?)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn single_point_single_voxel() {
        let cloud =
            PointCloud::new(vec![[0.01, 0.01, 0.01]], Some(Matrix::from_vec(1, 2, vec![0.3, 0.7]).unwrap())).unwrap();
        let t: SparseTensor<f64> = voxelize_avg(&cloud, [DEFAULT_VOXEL_SIZE; 3]).unwrap();
        assert_eq!(t.coords(), &[Coord3::ORIGIN]);
        assert_eq!(t.feats().row(0), &[0.3, 0.7]);
    }

    #[test]
    fn two_points_are_averaged() {
        let cloud = PointCloud::new(
            vec![[0.001, 0.0, 0.0], [0.015, 0.01, 0.019]],
            Some(Matrix::from_vec(2, 2, vec![1.0, 0.0, 0.0, 1.0]).unwrap()),
        )
        .unwrap();
        let t: SparseTensor<f64> = voxelize_avg(&cloud, [0.02; 3]).unwrap();
        assert_eq!(t.len(), 1);
        assert_eq!(t.feats().row(0), &[0.5, 0.5]);
    }

    #[test]
    fn boundary_point_goes_up_and_empty_cloud_is_empty() {
        let cloud = PointCloud::new(vec![[1.0, -1.0, 0.0]], None).unwrap();
        let t: SparseTensor<f32> = voxelize_avg(&cloud, [0.5; 3]).unwrap();
        assert_eq!(t.coords(), &[Coord3::new(2, -2, 0)]);
        assert_eq!(t.feats().row(0), &[1.0]);
        let e: SparseTensor<f32> = voxelize_avg(&PointCloud::default(), [0.5; 3]).unwrap();
        assert!(e.is_empty());
        assert!(voxelize_avg::<f32>(&cloud, [0.0, 1.0, 1.0]).is_err());
    }

    #[test]
    fn revoxelize_unit_prior_is_unit_voxelization() {
        let cloud = PointCloud::new(vec![[0.2, 1.7, -0.4], [0.9, 1.1, -0.1]], None).unwrap();
        let sizes = ClassSizeTable::new(vec![[1.0; 3]]).unwrap();
        let a: SparseTensor<f64> = class_revoxelize(&cloud, 0, &sizes, 1.0).unwrap();
        let b: SparseTensor<f64> = voxelize_avg(&cloud, [1.0; 3]).unwrap();
        assert_eq!(a.coords(), b.coords());
        assert_eq!(a.voxel_size(), [1.0; 3]);
        assert!(class_revoxelize::<f64>(&cloud, 1, &sizes, 1.0).is_err());
        assert!(class_revoxelize::<f64>(&cloud, 0, &sizes, 0.0).is_err());
    }

    #[test]
    fn class_sizes_must_be_positive() {
        assert!(ClassSizeTable::new(vec![[1.0, 0.0, 1.0]]).is_err());
    }
}
