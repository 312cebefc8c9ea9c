//! Grid shapes, padded field storage and level-1 field operations.
//!
//! Horizontal cell indices `i`, `j` are 1-based over the interior
//! (`1..=n_x`, `1..=n_y`); vertical levels `k` are 0-based. A field stores
//! `halo` ghost cells and `ol_x - halo` extra alignment padding on each side in
//! `x`, and `ol_y = halo` cells in `y`. Only interior cells take part in
//! reductions.
//!
//! Two linear layouts are supported. [`Layout::XContiguous`] is the compute
//! layout used by every solver kernel (`x` fastest, then `k`, then `j`), so a
//! horizontal row at fixed `(j, k)` is contiguous and a `j`-plane is one
//! contiguous block. [`Layout::ZContiguous`] keeps each vertical column
//! contiguous and exists for host-side data exchange.

use std::io::{Read, Write};

use rayon::prelude::*;

use crate::error::{Error, Result};

/// Dimensions of one (sub)domain including halo and padding widths.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub struct GridShape {
    nx: usize,
    ny: usize,
    nz: usize,
    halo: usize,
    ol_x: usize,
    ol_y: usize,
}

impl GridShape {
    /// Shape with `ol_x = ol_y = halo`.
    pub fn new(nx: usize, ny: usize, nz: usize, halo: usize) -> Result<Self> {
        if nx == 0 || ny == 0 || nz == 0 {
            return Err(Error::Shape(format!(
                "grid sizes must be positive, got {nx}x{ny}x{nz}"
            )));
        }
        Ok(Self {
            nx,
            ny,
            nz,
            halo,
            ol_x: halo,
            ol_y: halo,
        })
    }

    /// Same shape with a wider x-padding (for aligned row starts).
    pub fn with_x_padding(self, ol_x: usize) -> Result<Self> {
        if ol_x < self.halo {
            return Err(Error::Shape(format!(
                "x-padding {ol_x} smaller than halo width {}",
                self.halo
            )));
        }
        Ok(Self { ol_x, ..self })
    }

    pub fn nx(&self) -> usize {
        self.nx
    }

    pub fn ny(&self) -> usize {
        self.ny
    }

    pub fn nz(&self) -> usize {
        self.nz
    }

    pub fn halo(&self) -> usize {
        self.halo
    }

    pub fn ol_x(&self) -> usize {
        self.ol_x
    }

    pub fn ol_y(&self) -> usize {
        self.ol_y
    }

    /// Stored length of one x-row, `n_x + 2 OL_x`.
    pub fn row_len(&self) -> usize {
        self.nx + 2 * self.ol_x
    }

    /// Number of stored `j`-planes, `n_y + 2 OL_y`.
    pub fn plane_count(&self) -> usize {
        self.ny + 2 * self.ol_y
    }

    /// Length of one `j`-plane in the x-contiguous layout.
    pub fn plane_len(&self) -> usize {
        self.row_len() * self.nz
    }

    pub fn storage_len(&self) -> usize {
        self.plane_len() * self.plane_count()
    }

    /// Number of interior cells, `n_x n_y n_z`.
    pub fn interior_len(&self) -> usize {
        self.nx * self.ny * self.nz
    }

    /// Number of horizontal interior columns.
    pub fn columns(&self) -> usize {
        self.nx * self.ny
    }

    /// Shape of the next coarser multigrid level (horizontal halving only).
    pub fn coarsened(&self) -> Result<Self> {
        if !self.nx.is_multiple_of(2) || !self.ny.is_multiple_of(2) {
            return Err(Error::Shape(format!(
                "cannot coarsen {}x{} horizontally by two",
                self.nx, self.ny
            )));
        }
        Ok(Self {
            nx: self.nx / 2,
            ny: self.ny / 2,
            ..*self
        })
    }

    /// True if both shapes describe the same interior (halo/padding may differ).
    pub fn same_interior(&self, other: &GridShape) -> bool {
        self.nx == other.nx && self.ny == other.ny && self.nz == other.nz
    }

    fn check(&self, i: isize, j: isize, k: isize) -> Result<(usize, usize, usize)> {
        let (ox, oy) = (self.ol_x as isize, self.ol_y as isize);
        let in_range = i >= 1 - ox
            && i <= self.nx as isize + ox
            && j >= 1 - oy
            && j <= self.ny as isize + oy
            && k >= 0
            && k < self.nz as isize;
        if !in_range {
            return Err(Error::Range { i, j, k });
        }
        Ok(((i - 1 + ox) as usize, (j - 1 + oy) as usize, k as usize))
    }

    /// Offset of `(i, j, k)` in the x-contiguous layout:
    /// `(n_x + 2 OL_x) (n_z (j - 1 + OL_y) + k) + (i - 1 + OL_x)`.
    pub fn index_x_contiguous(&self, i: isize, j: isize, k: isize) -> Result<usize> {
        let (si, sj, k) = self.check(i, j, k)?;
        Ok(self.x_offset(si, sj, k))
    }

    /// Offset of `(i, j, k)` in the z-contiguous layout (`k` fastest, then `i`, then `j`).
    pub fn index_z_contiguous(&self, i: isize, j: isize, k: isize) -> Result<usize> {
        let (si, sj, k) = self.check(i, j, k)?;
        Ok(self.z_offset(si, sj, k))
    }

    #[inline]
    pub(crate) fn x_offset(&self, si: usize, sj: usize, k: usize) -> usize {
        sj * self.plane_len() + k * self.row_len() + si
    }

    #[inline]
    pub(crate) fn z_offset(&self, si: usize, sj: usize, k: usize) -> usize {
        (sj * self.row_len() + si) * self.nz + k
    }

    /// Storage range of the interior `j`-planes in the x-contiguous layout.
    pub(crate) fn interior_planes(&self) -> std::ops::Range<usize> {
        self.ol_y * self.plane_len()..(self.ol_y + self.ny) * self.plane_len()
    }
}

/// Memory layout tag of a [`Field`].
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub enum Layout {
    XContiguous,
    ZContiguous,
}

impl Layout {
    pub fn tag(self) -> u32 {
        match self {
            Layout::XContiguous => 0,
            Layout::ZContiguous => 1,
        }
    }

    pub fn from_tag(tag: u32) -> Result<Self> {
        match tag {
            0 => Ok(Layout::XContiguous),
            1 => Ok(Layout::ZContiguous),
            t => Err(Error::Format(format!("unknown layout tag {t}"))),
        }
    }
}

/// A scalar field over one padded subdomain.
#[derive(Debug, Clone, PartialEq)]
pub struct Field {
    shape: GridShape,
    layout: Layout,
    data: Vec<f64>,
}

impl Field {
    /// Zero field in the x-contiguous compute layout.
    pub fn zeros(shape: GridShape) -> Self {
        Self::zeros_with_layout(shape, Layout::XContiguous)
    }

    pub fn zeros_with_layout(shape: GridShape, layout: Layout) -> Self {
        Self {
            shape,
            layout,
            data: vec![0.0; shape.storage_len()],
        }
    }

    /// Field whose interior values are `value(i, j, k)`; halos are zero.
    pub fn from_fn(shape: GridShape, mut value: impl FnMut(usize, usize, usize) -> f64) -> Self {
        let mut f = Self::zeros(shape);
        for j in 1..=shape.ny {
            for k in 0..shape.nz {
                for i in 1..=shape.nx {
                    let off = shape.x_offset(i - 1 + shape.ol_x, j - 1 + shape.ol_y, k);
                    f.data[off] = value(i, j, k);
                }
            }
        }
        f
    }

    pub fn shape(&self) -> &GridShape {
        &self.shape
    }

    pub fn layout(&self) -> Layout {
        self.layout
    }

    /// Raw storage including halo and padding.
    pub fn data(&self) -> &[f64] {
        &self.data
    }

    pub fn data_mut(&mut self) -> &mut [f64] {
        &mut self.data
    }

    pub fn offset(&self, i: isize, j: isize, k: isize) -> Result<usize> {
        match self.layout {
            Layout::XContiguous => self.shape.index_x_contiguous(i, j, k),
            Layout::ZContiguous => self.shape.index_z_contiguous(i, j, k),
        }
    }

    pub fn get(&self, i: isize, j: isize, k: isize) -> Result<f64> {
        Ok(self.data[self.offset(i, j, k)?])
    }

    pub fn set(&mut self, i: isize, j: isize, k: isize, value: f64) -> Result<()> {
        let off = self.offset(i, j, k)?;
        self.data[off] = value;
        Ok(())
    }

    /// Copy with the other layout; values at every `(i, j, k)` are preserved.
    pub fn transpose_layout(&self) -> Field {
        let s = self.shape;
        let (to, layout) = match self.layout {
            Layout::XContiguous => (
                &(|si, sj, k| s.z_offset(si, sj, k)) as &dyn Fn(usize, usize, usize) -> usize,
                Layout::ZContiguous,
            ),
            Layout::ZContiguous => (
                &(|si, sj, k| s.x_offset(si, sj, k)) as &dyn Fn(usize, usize, usize) -> usize,
                Layout::XContiguous,
            ),
        };
        let mut out = vec![0.0; self.data.len()];
        for sj in 0..s.plane_count() {
            for k in 0..s.nz {
                for si in 0..s.row_len() {
                    out[to(si, sj, k)] = self.data[self.raw_offset(si, sj, k)];
                }
            }
        }
        Field {
            shape: s,
            layout,
            data: out,
        }
    }

    #[inline]
    fn raw_offset(&self, si: usize, sj: usize, k: usize) -> usize {
        match self.layout {
            Layout::XContiguous => self.shape.x_offset(si, sj, k),
            Layout::ZContiguous => self.shape.z_offset(si, sj, k),
        }
    }

    pub fn is_conformable(&self, other: &Field) -> bool {
        self.shape == other.shape && self.layout == other.layout
    }

    pub(crate) fn ensure_conformable(&self, other: &Field) -> Result<()> {
        if self.is_conformable(other) {
            Ok(())
        } else {
            Err(Error::Shape(format!(
                "fields are not conformable: {:?}/{:?} vs {:?}/{:?}",
                self.shape, self.layout, other.shape, other.layout
            )))
        }
    }

    pub(crate) fn ensure_compute_layout(&self) -> Result<()> {
        if self.layout == Layout::XContiguous {
            Ok(())
        } else {
            Err(Error::Shape(
                "solver kernels require the x-contiguous layout".into(),
            ))
        }
    }

    /// Interior values in canonical order (`j` slowest, then `k`, then `i`).
    pub fn interior_values(&self) -> Vec<f64> {
        let s = self.shape;
        let mut out = Vec::with_capacity(s.interior_len());
        for sj in s.ol_y..s.ol_y + s.ny {
            for k in 0..s.nz {
                for si in s.ol_x..s.ol_x + s.nx {
                    out.push(self.data[self.raw_offset(si, sj, k)]);
                }
            }
        }
        out
    }

    /// Interior dot product.
    ///
    /// Inner product over the interior, see [`Field::dot_sum`].
    pub fn dot(&self, other: &Field) -> Result<f64> {
        Ok(self.dot_sum(other)?.value())
    }

    /// Inner product over the interior as an unrounded compensated sum.
    ///
    /// Plane partials are merged in plane order, so the result does not
    /// depend on the thread count, and the carried error term makes the
    /// rounded value independent of how the grid is split into blocks.
    pub fn dot_sum(&self, other: &Field) -> Result<CompensatedSum> {
        self.ensure_conformable(other)?;
        let s = self.shape;
        let partials: Vec<CompensatedSum> = (s.ol_y..s.ol_y + s.ny)
            .into_par_iter()
            .map(|sj| {
                let mut acc = CompensatedSum::default();
                for k in 0..s.nz {
                    for si in s.ol_x..s.ol_x + s.nx {
                        let off = self.raw_offset(si, sj, k);
                        acc.add(self.data[off] * other.data[off]);
                    }
                }
                acc
            })
            .collect();
        Ok(CompensatedSum::merge_all(&partials))
    }

    /// Euclidean norm over the interior.
    pub fn norm(&self) -> f64 {
        self.dot(self).expect("a field is conformable with itself").sqrt()
    }

    /// Returns `alpha * f + g` on the interior; halos of the result are zero.
    pub fn axpy(alpha: f64, f: &Field, g: &Field) -> Result<Field> {
        f.ensure_conformable(g)?;
        let mut out = Field::zeros_with_layout(f.shape, f.layout);
        let s = f.shape;
        for sj in s.ol_y..s.ol_y + s.ny {
            for k in 0..s.nz {
                for si in s.ol_x..s.ol_x + s.nx {
                    let off = f.raw_offset(si, sj, k);
                    out.data[off] = alpha * f.data[off] + g.data[off];
                }
            }
        }
        Ok(out)
    }

    /// Sets every interior cell to `c`.
    pub fn fill(&mut self, c: f64) {
        let s = self.shape;
        for sj in s.ol_y..s.ol_y + s.ny {
            for k in 0..s.nz {
                for si in s.ol_x..s.ol_x + s.nx {
                    let off = self.raw_offset(si, sj, k);
                    self.data[off] = c;
                }
            }
        }
    }

    /// Sets every stored value (interior, halo and padding) to zero.
    pub fn clear(&mut self) {
        self.data.iter_mut().for_each(|v| *v = 0.0);
    }

    /// Copies interior values of `src` (same shape and layout).
    pub fn copy_from(&mut self, src: &Field) -> Result<()> {
        self.ensure_conformable(src)?;
        self.data.copy_from_slice(&src.data);
        Ok(())
    }

    /// Maximum absolute interior value.
    pub fn max_abs(&self) -> f64 {
        self.interior_values()
            .iter()
            .fold(0.0_f64, |m, v| m.max(v.abs()))
    }

    /// Writes the `AMGF` dump: a little-endian header
    /// `magic, version, n_x, n_y, n_z, layout` followed by the interior
    /// values in x-contiguous order as little-endian `f64`.
    pub fn write_dump<W: Write>(&self, mut w: W) -> Result<()> {
        w.write_all(DUMP_MAGIC)?;
        for v in [
            DUMP_VERSION,
            self.shape.nx as u32,
            self.shape.ny as u32,
            self.shape.nz as u32,
            self.layout.tag(),
        ] {
            w.write_all(&v.to_le_bytes())?;
        }
        for v in self.interior_values() {
            w.write_all(&v.to_le_bytes())?;
        }
        Ok(())
    }

    /// Reads an `AMGF` dump into a field with the given halo width.
    pub fn read_dump<R: Read>(mut r: R, halo: usize) -> Result<Field> {
        let mut magic = [0u8; 4];
        r.read_exact(&mut magic)?;
        if &magic != DUMP_MAGIC {
            return Err(Error::Format(format!("bad magic {magic:?}")));
        }
        let mut word = || -> Result<u32> {
            let mut b = [0u8; 4];
            r.read_exact(&mut b)?;
            Ok(u32::from_le_bytes(b))
        };
        let version = word()?;
        if version != DUMP_VERSION {
            return Err(Error::Format(format!("unsupported version {version}")));
        }
        let (nx, ny, nz) = (word()? as usize, word()? as usize, word()? as usize);
        let layout = Layout::from_tag(word()?)?;
        let shape = GridShape::new(nx, ny, nz, halo)?;
        let mut values = vec![0.0; shape.interior_len()];
        let mut b = [0u8; 8];
        for v in values.iter_mut() {
            r.read_exact(&mut b)?;
            *v = f64::from_le_bytes(b);
        }
        let mut it = values.into_iter();
        let f = Field::from_fn(shape, |_, _, _| it.next().unwrap_or_default());
        Ok(match layout {
            Layout::XContiguous => f,
            Layout::ZContiguous => f.transpose_layout(),
        })
    }
}

const DUMP_MAGIC: &[u8; 4] = b"AMGF";
const DUMP_VERSION: u32 = 1;

/// Running sum with an error term carried alongside (Knuth's two-sum).
///
/// The pair `(sum, carry)` represents the sum of the added values far more
/// accurately than `sum` alone; [`CompensatedSum::value`] rounds it once.
#[derive(Debug, Clone, Copy, Default, PartialEq)]
pub struct CompensatedSum {
    pub sum: f64,
    pub carry: f64,
}

impl CompensatedSum {
    pub fn new(sum: f64, carry: f64) -> Self {
        Self { sum, carry }
    }

    #[inline]
    pub fn add(&mut self, v: f64) {
        let t = self.sum + v;
        let bv = t - self.sum;
        self.carry += (self.sum - (t - bv)) + (v - bv);
        self.sum = t;
    }

    pub fn merge(&mut self, other: CompensatedSum) {
        self.add(other.sum);
        self.carry += other.carry;
    }

    /// Merges `parts` in order.
    pub fn merge_all(parts: &[CompensatedSum]) -> CompensatedSum {
        let mut total = CompensatedSum::default();
        parts.iter().for_each(|&p| total.merge(p));
        total
    }

    pub fn value(&self) -> f64 {
        self.sum + self.carry
    }
}

impl From<f64> for CompensatedSum {
    fn from(v: f64) -> Self {
        Self::new(v, 0.0)
    }
}
