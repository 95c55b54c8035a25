use super::{Coord3, CoordTable, SparseTensor};
use crate::error::{Error, Result};
use crate::real::Real;

/// Unique parents `floor(c / factor) * factor`, sorted lexicographically.
pub fn strided_downsample_coords(coords: &[Coord3], factor: u32) -> Vec<Coord3> {
    let f = factor.max(1) as i32;
    let mut out: Vec<Coord3> = coords.iter().map(|c| c.floor_to(f)).collect();
    out.sort_unstable();
    out.dedup();
    out
}

/// Row of `low` enclosing each target site, if that parent is occupied.
pub fn parent_rows<T: Real>(low: &SparseTensor<T>, target: &[Coord3], target_stride: u32) -> Result<Vec<Option<u32>>> {
    if target_stride == 0 || !low.stride().is_multiple_of(target_stride) {
        return Err(Error::Stride { low: low.stride(), high: target_stride });
    }
    let f = low.stride() as i32;
    let index = low.index();
    Ok(target.iter().map(|c| index.get(c.floor_to(f))).collect())
}

/// Nearest-parent upsampling: each target site takes the feature of the
/// coarse cell containing it, or zeros when that cell is unoccupied.
pub fn upsample_interpolate<T: Real>(
    low: &SparseTensor<T>,
    target: &[Coord3],
    target_stride: u32,
) -> Result<SparseTensor<T>> {
    let rows = parent_rows(low, target, target_stride)?;
    CoordTable::build(target).map_err(|c| Error::DuplicateCoord(c.to_array()))?;
    SparseTensor::new(target.to_vec(), low.feats().gather_rows(&rows), target_stride, low.voxel_size())
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::matrix::Matrix;

    #[test]
    fn downsample_merges_siblings() {
        assert_eq!(strided_downsample_coords(&[Coord3::ORIGIN], 2), vec![Coord3::ORIGIN]);
        assert_eq!(strided_downsample_coords(&[Coord3::ORIGIN, Coord3::new(1, 0, 0)], 2), vec![Coord3::ORIGIN]);
        assert_eq!(strided_downsample_coords(&[Coord3::new(-1, 3, 0)], 2), vec![Coord3::new(-2, 2, 0)]);
    }

    #[test]
    fn upsample_copies_parent_or_zero() {
        let low =
            SparseTensor::new(vec![Coord3::ORIGIN], Matrix::from_vec(1, 2, vec![3.0f64, 4.0]).unwrap(), 4, [1.0; 3])
                .unwrap();
        let up = upsample_interpolate(&low, &[Coord3::ORIGIN, Coord3::new(2, 2, 2), Coord3::new(4, 0, 0)], 2).unwrap();
        assert_eq!(up.feats().row(0), &[3.0, 4.0]);
        assert_eq!(up.feats().row(1), &[3.0, 4.0]);
        assert_eq!(up.feats().row(2), &[0.0, 0.0]);
        assert!(matches!(upsample_interpolate(&low, &[Coord3::ORIGIN], 3), Err(Error::Stride { .. })));
    }
}
