use serde::{Deserialize, Serialize};

/// Uniform Cartesian grid in 2 or 3 dimensions. Node (i, j, k) sits at
/// `origin + (i, j, k) * spacing`; the flat index runs x fastest.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Grid {
    pub n: usize,
    pub dims: [usize; 3],
    pub spacing: [f64; 3],
    pub origin: [f64; 3],
}

impl Grid {
    /// `cells` cells per axis over the cube `[-half, half]^n`.
    pub fn cube(n: usize, half: f64, cells: usize) -> Grid {
        assert!(n == 2 || n == 3, "dimension must be 2 or 3");
        let s = 2.0 * half / cells as f64;
        let mut dims = [1; 3];
        let mut spacing = [1.0; 3];
        let mut origin = [0.0; 3];
        for a in 0..n {
            dims[a] = cells + 1;
            spacing[a] = s;
            origin[a] = -half;
        }
        Grid { n, dims, spacing, origin }
    }

    /// 2D box `[-hx, hx] x [-hy, hy]` with the given node counts per axis.
    /// Even node counts keep the origin off the grid.
    pub fn box2(half: [f64; 2], nodes: [usize; 2]) -> Grid {
        Grid {
            n: 2,
            dims: [nodes[0], nodes[1], 1],
            spacing: [
                2.0 * half[0] / (nodes[0] - 1) as f64,
                2.0 * half[1] / (nodes[1] - 1) as f64,
                1.0,
            ],
            origin: [-half[0], -half[1], 0.0],
        }
    }

    pub fn len(&self) -> usize {
        self.dims[0] * self.dims[1] * self.dims[2]
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    pub fn is_isotropic(&self) -> bool {
        (1..self.n).all(|a| (self.spacing[a] - self.spacing[0]).abs() <= 1e-12 * self.spacing[0])
    }

    pub fn cell_volume(&self) -> f64 {
        self.spacing[..self.n].iter().product()
    }

    pub fn min_spacing(&self) -> f64 {
        self.spacing[..self.n].iter().cloned().fold(f64::INFINITY, f64::min)
    }

    #[inline]
    pub fn index(&self, ijk: [usize; 3]) -> usize {
        ijk[0] + self.dims[0] * (ijk[1] + self.dims[1] * ijk[2])
    }

    #[inline]
    pub fn ijk(&self, idx: usize) -> [usize; 3] {
        let i = idx % self.dims[0];
        let r = idx / self.dims[0];
        [i, r % self.dims[1], r / self.dims[1]]
    }

    #[inline]
    pub fn point(&self, idx: usize) -> [f64; 3] {
        let c = self.ijk(idx);
        let mut p = [0.0; 3];
        for a in 0..self.n {
            p[a] = self.origin[a] + c[a] as f64 * self.spacing[a];
        }
        p
    }

    /// Node offset by an integer vector, if it stays on the grid.
    #[inline]
    pub fn offset(&self, idx: usize, d: [i32; 3]) -> Option<usize> {
        let c = self.ijk(idx);
        let mut out = [0usize; 3];
        for a in 0..3 {
            let v = c[a] as i64 + d[a] as i64;
            if v < 0 || v >= self.dims[a] as i64 {
                return None;
            }
            out[a] = v as usize;
        }
        Some(self.index(out))
    }

    /// Nearest node to a point (clamped to the grid).
    pub fn nearest(&self, p: [f64; 3]) -> usize {
        let mut c = [0usize; 3];
        for a in 0..self.n {
            let t = ((p[a] - self.origin[a]) / self.spacing[a]).round();
            c[a] = t.clamp(0.0, (self.dims[a] - 1) as f64) as usize;
        }
        self.index(c)
    }

    /// Physical displacement of an integer offset.
    #[inline]
    pub fn displacement(&self, d: [i32; 3]) -> [f64; 3] {
        let mut v = [0.0; 3];
        for a in 0..self.n {
            v[a] = d[a] as f64 * self.spacing[a];
        }
        v
    }

    /// Grid with the same extent and twice the resolution.
    pub fn refined(&self) -> Grid {
        let mut g = self.clone();
        for a in 0..self.n {
            g.dims[a] = 2 * (self.dims[a] - 1) + 1;
            g.spacing[a] = self.spacing[a] / 2.0;
        }
        g
    }
}

#[inline]
pub fn dot(a: [f64; 3], b: [f64; 3]) -> f64 {
    a[0] * b[0] + a[1] * b[1] + a[2] * b[2]
}

#[inline]
pub fn norm(a: [f64; 3]) -> f64 {
    dot(a, a).sqrt()
}

#[inline]
pub fn sub(a: [f64; 3], b: [f64; 3]) -> [f64; 3] {
    [a[0] - b[0], a[1] - b[1], a[2] - b[2]]
}

#[inline]
pub fn add(a: [f64; 3], b: [f64; 3]) -> [f64; 3] {
    [a[0] + b[0], a[1] + b[1], a[2] + b[2]]
}

#[inline]
pub fn scale(a: [f64; 3], t: f64) -> [f64; 3] {
    [a[0] * t, a[1] * t, a[2] * t]
}
