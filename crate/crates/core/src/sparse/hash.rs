//! Open-addressing coordinate table.
//!
//! Keys are hashed by packing the low 21 bits of each component into one
//! 64-bit word and running it through a splitmix64 finalizer. Collisions are
//! resolved by linear probing; the full coordinate is always compared, so the
//! packing only affects bucket choice.

use super::Coord3;

const EMPTY: u32 = u32::MAX;

#[inline]
fn pack(c: Coord3) -> u64 {
    const M: u64 = (1 << 21) - 1;
    ((c.x as u64 & M) << 42) | ((c.y as u64 & M) << 21) | (c.z as u64 & M)
}

#[inline]
fn mix(mut z: u64) -> u64 {
    z = z.wrapping_add(0x9E37_79B9_7F4A_7C15);
    z = (z ^ (z >> 30)).wrapping_mul(0xBF58_476D_1CE4_E5B9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94D0_49BB_1331_11EB);
    z ^ (z >> 31)
}

#[derive(Clone, Debug)]
pub struct CoordTable {
    keys: Vec<Coord3>,
    vals: Vec<u32>,
    mask: usize,
    len: usize,
}

impl CoordTable {
    pub fn with_capacity(n: usize) -> Self {
        let cap = (2 * n.max(4)).next_power_of_two();
        Self { keys: vec![Coord3::ORIGIN; cap], vals: vec![EMPTY; cap], mask: cap - 1, len: 0 }
    }

    /// Builds a table mapping each coordinate to its position in `coords`.
    /// Returns the first duplicated coordinate on failure.
    pub fn build(coords: &[Coord3]) -> Result<Self, Coord3> {
        let mut t = Self::with_capacity(coords.len());
        for (i, &c) in coords.iter().enumerate() {
            if t.insert(c, i as u32).is_some() {
                return Err(c);
            }
        }
        Ok(t)
    }

    pub fn len(&self) -> usize {
        self.len
    }

    pub fn is_empty(&self) -> bool {
        self.len == 0
    }

    /// Inserts `key -> val` unless the key is present; returns the existing value then.
    pub fn insert(&mut self, key: Coord3, val: u32) -> Option<u32> {
        if 2 * (self.len + 1) > self.keys.len() {
            self.grow();
        }
        let mut slot = mix(pack(key)) as usize & self.mask;
        loop {
            if self.vals[slot] == EMPTY {
                self.keys[slot] = key;
                self.vals[slot] = val;
                self.len += 1;
                return None;
            }
            if self.keys[slot] == key {
                return Some(self.vals[slot]);
            }
            slot = (slot + 1) & self.mask;
        }
    }

    /// Index of `key`, or `val` freshly inserted when absent.
    pub fn get_or_insert(&mut self, key: Coord3, val: u32) -> u32 {
        self.insert(key, val).unwrap_or(val)
    }

    #[inline]
    pub fn get(&self, key: Coord3) -> Option<u32> {
        let mut slot = mix(pack(key)) as usize & self.mask;
        loop {
            let v = self.vals[slot];
            if v == EMPTY {
                return None;
            }
            if self.keys[slot] == key {
                return Some(v);
            }
            slot = (slot + 1) & self.mask;
        }
    }

    fn grow(&mut self) {
        let old_keys = std::mem::take(&mut self.keys);
        let old_vals = std::mem::take(&mut self.vals);
        let cap = old_keys.len() * 2;
        self.keys = vec![Coord3::ORIGIN; cap];
        self.vals = vec![EMPTY; cap];
        self.mask = cap - 1;
        self.len = 0;
        for (k, v) in old_keys.into_iter().zip(old_vals) {
            if v != EMPTY {
                self.insert(k, v);
            }
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;
    use std::collections::HashMap;

    #[test]
    fn duplicate_is_reported() {
        let c = [Coord3::new(1, 2, 3), Coord3::new(0, 0, 0), Coord3::new(1, 2, 3)];
        assert_eq!(CoordTable::build(&c).unwrap_err(), Coord3::new(1, 2, 3));
    }

    #[test]
    fn aliasing_packed_keys_stay_distinct() {
        // Differ only above bit 21, so they share a packed hash.
        let a = Coord3::new(5, 0, 0);
        let b = Coord3::new(5 + (1 << 21), 0, 0);
        let t = CoordTable::build(&[a, b]).unwrap();
        assert_eq!(t.get(a), Some(0));
        assert_eq!(t.get(b), Some(1));
    }

    proptest! {
        #[test]
        fn agrees_with_std_hashmap(pts in proptest::collection::vec((-40i32..40, -40i32..40, -40i32..40), 0..300)) {
            let mut t = CoordTable::with_capacity(1);
            let mut m = HashMap::new();
            for (i, &(x, y, z)) in pts.iter().enumerate() {
                let c = Coord3::new(x, y, z);
                let prev = t.insert(c, i as u32);
                let prev_std = m.get(&c).copied();
                if prev_std.is_none() { m.insert(c, i as u32); }
                prop_assert_eq!(prev, prev_std);
            }
            prop_assert_eq!(t.len(), m.len());
            for (c, v) in &m {
                prop_assert_eq!(t.get(*c), Some(*v));
            }
            prop_assert_eq!(t.get(Coord3::new(1000, 1000, 1000)), None);
        }
    }
}
