use rayon::prelude::*;

use super::{Coord3, CoordTable};
use crate::error::{Error, Result};

/// The `k³` integer offsets of a cubic kernel, lexicographic with z fastest.
pub fn kernel_offsets(kernel_size: usize) -> Vec<Coord3> {
    let r = (kernel_size / 2) as i32;
    let mut out = Vec::with_capacity(kernel_size.pow(3));
    for x in -r..=r {
        for y in -r..=r {
            for z in -r..=r {
                out.push(Coord3::new(x, y, z));
            }
        }
    }
    out
}

/// Position of `offset` in [`kernel_offsets`], if it lies inside the kernel.
pub fn offset_index(kernel_size: usize, offset: Coord3) -> Option<usize> {
    let r = (kernel_size / 2) as i32;
    let k = kernel_size as i32;
    let inside = |v: i32| (-r..=r).contains(&v);
    (inside(offset.x) && inside(offset.y) && inside(offset.z))
        .then(|| (((offset.x + r) * k + (offset.y + r)) * k + (offset.z + r)) as usize)
}

pub(crate) fn check_kernel_size(kernel_size: usize) -> Result<()> {
    if kernel_size == 0 || kernel_size.is_multiple_of(2) {
        return Err(Error::EvenKernel(kernel_size));
    }
    Ok(())
}

/// Gather-scatter plan of one sparse convolution: `(in, out)` index pairs
/// bucketed by kernel offset.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct KernelMap {
    kernel_size: usize,
    n_in: usize,
    n_out: usize,
    buckets: Vec<Vec<(u32, u32)>>,
}

impl KernelMap {
    /// Validates and buckets explicit `(in, out, offset)` triples.
    pub fn from_triples(
        n_in: usize,
        n_out: usize,
        kernel_size: usize,
        triples: impl IntoIterator<Item = (u32, u32, u32)>,
    ) -> Result<Self> {
        check_kernel_size(kernel_size)?;
        let vol = kernel_size.pow(3);
        let mut buckets = vec![Vec::new(); vol];
        for (i, o, d) in triples {
            if i as usize >= n_in || o as usize >= n_out || d as usize >= vol {
                return Err(Error::shape(format!(
                    "triple ({i}, {o}, {d}) out of range for {n_in} inputs, {n_out} outputs, {vol} offsets"
                )));
            }
            buckets[d as usize].push((i, o));
        }
        for b in &mut buckets {
            let before = b.len();
            b.sort_unstable_by_key(|&(i, o)| (o, i));
            b.dedup();
            if b.len() != before {
                return Err(Error::invalid("duplicate kernel-map triple"));
            }
        }
        Ok(Self { kernel_size, n_in, n_out, buckets })
    }

    pub fn kernel_size(&self) -> usize {
        self.kernel_size
    }

    pub fn n_offsets(&self) -> usize {
        self.buckets.len()
    }

    pub fn n_in(&self) -> usize {
        self.n_in
    }

    pub fn n_out(&self) -> usize {
        self.n_out
    }

    /// Pairs of one offset bucket.
    pub fn bucket(&self, offset: usize) -> &[(u32, u32)] {
        &self.buckets[offset]
    }

    pub fn len(&self) -> usize {
        self.buckets.iter().map(Vec::len).sum()
    }

    pub fn is_empty(&self) -> bool {
        self.buckets.iter().all(Vec::is_empty)
    }

    /// All `(in, out, offset)` triples, offset-major.
    pub fn triples(&self) -> impl Iterator<Item = (u32, u32, u32)> + '_ {
        self.buckets.iter().enumerate().flat_map(|(d, b)| b.iter().map(move |&(i, o)| (i, o, d as u32)))
    }

    /// For each output row, whether any input contributes to it.
    pub fn covered_outputs(&self) -> Vec<bool> {
        let mut hit = vec![false; self.n_out];
        for b in &self.buckets {
            for &(_, o) in b {
                hit[o as usize] = true;
            }
        }
        hit
    }

    /// Restricts the map to the kept outputs, renumbering them in order.
    pub fn retain_outputs(&self, keep: &[bool]) -> KernelMap {
        let mut remap = vec![u32::MAX; self.n_out];
        let mut n = 0u32;
        for (o, &k) in keep.iter().enumerate() {
            if k {
                remap[o] = n;
                n += 1;
            }
        }
        let buckets = self
            .buckets
            .iter()
            .map(|b| b.iter().filter(|&&(_, o)| keep[o as usize]).map(|&(i, o)| (i, remap[o as usize])).collect())
            .collect();
        KernelMap { kernel_size: self.kernel_size, n_in: self.n_in, n_out: n as usize, buckets }
    }
}

/// Neighbor discovery: `(i, o, d)` is emitted iff
/// `in_coords[i] == out_coords[o] + dilation * offset(d)`.
pub fn build_kernel_map(
    in_coords: &[Coord3],
    out_coords: &[Coord3],
    kernel_size: usize,
    dilation: u32,
) -> Result<KernelMap> {
    check_kernel_size(kernel_size)?;
    if dilation == 0 {
        return Err(Error::invalid("dilation must be positive"));
    }
    let table = CoordTable::build(in_coords).map_err(|c| Error::DuplicateCoord(c.to_array()))?;
    CoordTable::build(out_coords).map_err(|c| Error::DuplicateCoord(c.to_array()))?;
    build_kernel_map_indexed(&table, in_coords.len(), out_coords, kernel_size, dilation)
}

/// As [`build_kernel_map`], with a prebuilt index over unique input coordinates.
pub(crate) fn build_kernel_map_indexed(
    table: &CoordTable,
    n_in: usize,
    out_coords: &[Coord3],
    kernel_size: usize,
    dilation: u32,
) -> Result<KernelMap> {
    let offsets: Vec<Coord3> = kernel_offsets(kernel_size).into_iter().map(|d| d * dilation as i32).collect();
    let vol = offsets.len();
    const CHUNK: usize = 2048;
    let partial: Vec<Vec<Vec<(u32, u32)>>> = out_coords
        .par_chunks(CHUNK)
        .enumerate()
        .map(|(ci, chunk)| {
            let mut local = vec![Vec::new(); vol];
            for (j, &oc) in chunk.iter().enumerate() {
                let o = (ci * CHUNK + j) as u32;
                for (d, &off) in offsets.iter().enumerate() {
                    if let Some(i) = oc.checked_add(off).and_then(|c| table.get(c)) {
                        local[d].push((i, o));
                    }
                }
            }
            local
        })
        .collect();
    let mut buckets: Vec<Vec<(u32, u32)>> = vec![Vec::new(); vol];
    for local in partial {
        for (d, mut v) in local.into_iter().enumerate() {
            buckets[d].append(&mut v);
        }
    }
    Ok(KernelMap { kernel_size, n_in, n_out: out_coords.len(), buckets })
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn identity_neighborhood() {
        let c = [Coord3::ORIGIN];
        let m = build_kernel_map(&c, &c, 1, 1).unwrap();
        assert_eq!(m.triples().collect::<Vec<_>>(), vec![(0, 0, 0)]);
    }

    #[test]
    fn offsets_recover_displacements() {
        let inp = [Coord3::new(0, 0, 0), Coord3::new(1, 0, 0)];
        let out = [Coord3::ORIGIN];
        let m = build_kernel_map(&inp, &out, 3, 1).unwrap();
        let offs = kernel_offsets(3);
        let mut got: Vec<_> = m.triples().map(|(i, _, d)| (i, offs[d as usize])).collect();
        got.sort();
        assert_eq!(got, vec![(0, Coord3::new(0, 0, 0)), (1, Coord3::new(1, 0, 0))]);
    }

    #[test]
    fn offset_order_is_z_fastest() {
        let offs = kernel_offsets(3);
        assert_eq!(offs[0], Coord3::new(-1, -1, -1));
        assert_eq!(offs[1], Coord3::new(-1, -1, 0));
        assert_eq!(offs[3], Coord3::new(-1, 0, -1));
        assert_eq!(offs[13], Coord3::ORIGIN);
        for (i, &o) in offs.iter().enumerate() {
            assert_eq!(offset_index(3, o), Some(i));
        }
        assert_eq!(offset_index(3, Coord3::new(2, 0, 0)), None);
    }

    #[test]
    fn rejects_even_kernel_and_duplicates() {
        let c = [Coord3::ORIGIN];
        assert!(matches!(build_kernel_map(&c, &c, 2, 1), Err(Error::EvenKernel(2))));
        let dup = [Coord3::ORIGIN, Coord3::ORIGIN];
        assert!(matches!(build_kernel_map(&dup, &c, 3, 1), Err(Error::DuplicateCoord(_))));
        assert!(matches!(build_kernel_map(&c, &dup, 3, 1), Err(Error::DuplicateCoord(_))));
    }

    #[test]
    fn from_triples_validates() {
        assert!(KernelMap::from_triples(1, 1, 3, [(0, 0, 27)]).is_err());
        assert!(KernelMap::from_triples(1, 1, 3, [(0, 0, 1), (0, 0, 1)]).is_err());
        let m = KernelMap::from_triples(2, 1, 3, [(1, 0, 4), (0, 0, 4)]).unwrap();
        assert_eq!(m.bucket(4), &[(0, 0), (1, 0)]);
    }
}
