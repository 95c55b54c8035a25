use std::ops::{Add, Mul, Sub};

/// Integer voxel coordinate.
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, PartialOrd, Ord, Hash)]
pub struct Coord3 {
    pub x: i32,
    pub y: i32,
    pub z: i32,
}

impl Coord3 {
    pub const ORIGIN: Coord3 = Coord3 { x: 0, y: 0, z: 0 };

    #[inline]
    pub const fn new(x: i32, y: i32, z: i32) -> Self {
        Self { x, y, z }
    }

    #[inline]
    pub fn to_array(self) -> [i32; 3] {
        [self.x, self.y, self.z]
    }

    /// Floor-divides every component by `factor`, then scales back up: the
    /// lowest corner of the enclosing cell of width `factor`.
    #[inline]
    pub fn floor_to(self, factor: i32) -> Self {
        Self::new(
            self.x.div_euclid(factor) * factor,
            self.y.div_euclid(factor) * factor,
            self.z.div_euclid(factor) * factor,
        )
    }

    /// Cell index of a metric point under floor quantization.
    pub fn quantize(p: [f64; 3], cell: [f64; 3]) -> Option<Self> {
        let q = |v: f64, s: f64| {
            let c = (v / s).floor();
            (c >= i32::MIN as f64 && c <= i32::MAX as f64).then_some(c as i32)
        };
        Some(Self::new(q(p[0], cell[0])?, q(p[1], cell[1])?, q(p[2], cell[2])?))
    }

    #[inline]
    pub fn checked_add(self, o: Coord3) -> Option<Coord3> {
        Some(Coord3::new(self.x.checked_add(o.x)?, self.y.checked_add(o.y)?, self.z.checked_add(o.z)?))
    }
}

impl From<[i32; 3]> for Coord3 {
    fn from(a: [i32; 3]) -> Self {
        Self::new(a[0], a[1], a[2])
    }
}

impl Add for Coord3 {
    type Output = Coord3;
    fn add(self, o: Coord3) -> Coord3 {
        Coord3::new(self.x + o.x, self.y + o.y, self.z + o.z)
    }
}

impl Sub for Coord3 {
    type Output = Coord3;
    fn sub(self, o: Coord3) -> Coord3 {
        Coord3::new(self.x - o.x, self.y - o.y, self.z - o.z)
    }
}

impl Mul<i32> for Coord3 {
    type Output = Coord3;
    fn mul(self, s: i32) -> Coord3 {
        Coord3::new(self.x * s, self.y * s, self.z * s)
    }
}
