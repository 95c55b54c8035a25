use super::kmap::build_kernel_map_indexed;
use super::{site_center, strided_downsample_coords, Coord3, CoordTable, KernelMap, SparseTensor};
use crate::error::{Error, Result};
use crate::real::Real;

/// The coordinate half of a sparse tensor: sites, stride, metric base size
/// and a hash index. Layers that carry features separately (on a tape) share
/// layouts to build kernel maps.
#[derive(Clone, Debug)]
pub struct Layout {
    coords: Vec<Coord3>,
    stride: u32,
    voxel_size: [f64; 3],
    table: CoordTable,
}

impl Layout {
    pub fn new(coords: Vec<Coord3>, stride: u32, voxel_size: [f64; 3]) -> Result<Self> {
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
        Ok(Self { coords, stride, voxel_size, table })
    }

    pub fn of<T: Real>(t: &SparseTensor<T>) -> Self {
        Self { coords: t.coords().to_vec(), stride: t.stride(), voxel_size: t.voxel_size(), table: t.index().clone() }
    }

    pub fn coords(&self) -> &[Coord3] {
        &self.coords
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

    pub fn find(&self, c: Coord3) -> Option<usize> {
        self.table.get(c).map(|i| i as usize)
    }

    /// Metric center of site `i`.
    pub fn center(&self, i: usize) -> [f64; 3] {
        site_center(self.coords[i], self.stride, self.voxel_size)
    }

    /// Parent sites at `factor` times the stride.
    pub fn downsample(&self, factor: u32) -> Result<Layout> {
        if factor < 2 {
            return Err(Error::invalid("downsampling factor must be at least 2"));
        }
        let coords = strided_downsample_coords(&self.coords, self.stride * factor);
        Layout::new(coords, self.stride * factor, self.voxel_size)
    }

    /// Kernel map from these sites to `out`, searching at this layout's stride.
    pub fn kernel_map(&self, out: &Layout, kernel_size: usize) -> Result<KernelMap> {
        build_kernel_map_indexed(&self.table, self.len(), &out.coords, kernel_size, self.stride)
    }

    /// For each site here, the row of `low` whose cell contains it.
    pub fn parent_rows(&self, low: &Layout) -> Result<Vec<Option<u32>>> {
        if !low.stride.is_multiple_of(self.stride) {
            return Err(Error::Stride { low: low.stride, high: self.stride });
        }
        let f = low.stride as i32;
        Ok(self.coords.iter().map(|c| low.table.get(c.floor_to(f))).collect())
    }

    /// For each site of `low`, the rows here that it contains.
    pub fn children(&self, low: &Layout) -> Result<Vec<Vec<u32>>> {
        let parents = self.parent_rows(low)?;
        let mut out = vec![Vec::new(); low.len()];
        for (i, p) in parents.into_iter().enumerate() {
            if let Some(p) = p {
                out[p as usize].push(i as u32);
            }
        }
        Ok(out)
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn downsample_and_parents_agree() {
        let coords = vec![Coord3::new(0, 0, 0), Coord3::new(1, 0, 0), Coord3::new(-1, 2, 3)];
        let l = Layout::new(coords, 1, [0.02; 3]).unwrap();
        let low = l.downsample(2).unwrap();
        assert_eq!(low.stride(), 2);
        assert_eq!(low.coords(), &[Coord3::new(-2, 2, 2), Coord3::new(0, 0, 0)]);
        assert_eq!(l.parent_rows(&low).unwrap(), vec![Some(1), Some(1), Some(0)]);
        assert_eq!(l.children(&low).unwrap(), vec![vec![2], vec![0, 1]]);
    }

    #[test]
    fn rejects_misaligned_sites() {
        assert!(Layout::new(vec![Coord3::new(1, 0, 0)], 2, [1.0; 3]).is_err());
    }
}
