//! Dense feature maps, matrices and patch extraction.
//!
//! Feature maps are stored row-major in `(h, w, c)` order. Patches extracted
//! from a map are flattened in the same `(row, col, channel)` order, so a
//! template row of length `field_h * field_w * channels` can be read back as
//! a small `field_h x field_w x channels` image.

use crate::error::{Error, Result};

/// An `H x W x C` feature map.
#[derive(Debug, Clone, PartialEq)]
pub struct Tensor3 {
    height: usize,
    width: usize,
    channels: usize,
    data: Vec<f64>,
}

impl Tensor3 {
    pub fn new(height: usize, width: usize, channels: usize, data: Vec<f64>) -> Result<Self> {
        if height == 0 || width == 0 || channels == 0 {
            return Err(Error::Shape(format!(
                "tensor dims must be positive, got {height}x{width}x{channels}"
            )));
        }
        if data.len() != height * width * channels {
            return Err(Error::Shape(format!(
                "tensor {height}x{width}x{channels} needs {} values, got {}",
                height * width * channels,
                data.len()
            )));
        }
        if let Some(i) = data.iter().position(|v| !v.is_finite()) {
            return Err(Error::NonFinite(format!("tensor entry {i}")));
        }
        Ok(Self {
            height,
            width,
            channels,
            data,
        })
    }

    pub fn zeros(height: usize, width: usize, channels: usize) -> Self {
        Self {
            height,
            width,
            channels,
            data: vec![0.0; height * width * channels],
        }
    }

    /// Builds a tensor without validating finiteness. Callers guarantee the
    /// length invariant.
    pub(crate) fn from_raw(height: usize, width: usize, channels: usize, data: Vec<f64>) -> Self {
        debug_assert_eq!(data.len(), height * width * channels);
        Self {
            height,
            width,
            channels,
            data,
        }
    }

    /// Wraps a plain vector as a `1 x 1 x d` map.
    pub fn from_vector(values: &[f64]) -> Result<Self> {
        Self::new(1, 1, values.len(), values.to_vec())
    }

    pub fn height(&self) -> usize {
        self.height
    }

    pub fn width(&self) -> usize {
        self.width
    }

    pub fn channels(&self) -> usize {
        self.channels
    }

    pub fn dims(&self) -> (usize, usize, usize) {
        (self.height, self.width, self.channels)
    }

    pub fn len(&self) -> usize {
        self.data.len()
    }

    pub fn is_empty(&self) -> bool {
        self.data.is_empty()
    }

    pub fn data(&self) -> &[f64] {
        &self.data
    }

    pub(crate) fn data_mut(&mut self) -> &mut [f64] {
        &mut self.data
    }

    pub fn into_data(self) -> Vec<f64> {
        self.data
    }

    #[inline]
    pub fn index(&self, row: usize, col: usize, ch: usize) -> usize {
        (row * self.width + col) * self.channels + ch
    }

    #[inline]
    pub fn get(&self, row: usize, col: usize, ch: usize) -> f64 {
        self.data[self.index(row, col, ch)]
    }

    /// The channel vector at one spatial location.
    pub fn pixel(&self, row: usize, col: usize) -> &[f64] {
        let start = self.index(row, col, 0);
        &self.data[start..start + self.channels]
    }

    pub fn all_finite(&self) -> bool {
        self.data.iter().all(|v| v.is_finite())
    }

    /// Mirror image along the width axis.
    pub fn flip_horizontal(&self) -> Tensor3 {
        let mut out = vec![0.0; self.data.len()];
        for r in 0..self.height {
            for c in 0..self.width {
                let src = self.index(r, c, 0);
                let dst = self.index(r, self.width - 1 - c, 0);
                out[dst..dst + self.channels].copy_from_slice(&self.data[src..src + self.channels]);
            }
        }
        Tensor3::from_raw(self.height, self.width, self.channels, out)
    }

    fn check_same_shape(&self, other: &Tensor3, op: &str) -> Result<()> {
        if self.dims() != other.dims() {
            return Err(Error::Shape(format!(
                "{op}: {:?} vs {:?}",
                self.dims(),
                other.dims()
            )));
        }
        Ok(())
    }

    fn zip_with(&self, other: &Tensor3, op: &str, f: impl Fn(f64, f64) -> f64) -> Result<Tensor3> {
        self.check_same_shape(other, op)?;
        let data: Vec<f64> = self
            .data
            .iter()
            .zip(&other.data)
            .map(|(&a, &b)| f(a, b))
            .collect();
        Tensor3::new(self.height, self.width, self.channels, data)
    }

    pub fn add(&self, other: &Tensor3) -> Result<Tensor3> {
        self.zip_with(other, "add", |a, b| a + b)
    }

    pub fn sub(&self, other: &Tensor3) -> Result<Tensor3> {
        self.zip_with(other, "sub", |a, b| a - b)
    }

    pub fn hadamard(&self, other: &Tensor3) -> Result<Tensor3> {
        self.zip_with(other, "hadamard", |a, b| a * b)
    }

    pub fn scale(&self, factor: f64) -> Result<Tensor3> {
        let data = self.data.iter().map(|v| v * factor).collect();
        Tensor3::new(self.height, self.width, self.channels, data)
    }
}

/// Receptive field geometry shared by similarity and pooling layers.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct PatchGeometry {
    pub field_h: usize,
    pub field_w: usize,
    pub stride_h: usize,
    pub stride_w: usize,
    /// Symmetric zero padding applied on every spatial border.
    pub pad: usize,
}

impl PatchGeometry {
    pub fn new(field_h: usize, field_w: usize, stride_h: usize, stride_w: usize, pad: usize) -> Self {
        Self {
            field_h,
            field_w,
            stride_h,
            stride_w,
            pad,
        }
    }

    /// Square field with unit stride and no padding.
    pub fn square(field: usize) -> Self {
        Self::new(field, field, 1, 1, 0)
    }

    /// The trivial `1 x 1` geometry.
    pub fn unit() -> Self {
        Self::square(1)
    }

    pub fn is_unit(&self) -> bool {
        *self == Self::unit()
    }

    /// Number of values in one flattened patch over `channels` input channels.
    pub fn patch_len(&self, channels: usize) -> usize {
        self.field_h * self.field_w * channels
    }

    /// Output grid for an `in_h x in_w` input.
    pub fn output_dims(&self, in_h: usize, in_w: usize) -> Result<(usize, usize)> {
        if self.field_h == 0 || self.field_w == 0 || self.stride_h == 0 || self.stride_w == 0 {
            return Err(Error::Geometry(format!(
                "field and stride must be >= 1, got {self:?}"
            )));
        }
        let span_h = in_h + 2 * self.pad;
        let span_w = in_w + 2 * self.pad;
        if span_h < self.field_h || span_w < self.field_w {
            return Err(Error::Geometry(format!(
                "{}x{} field does not fit a {in_h}x{in_w} input with pad {}",
                self.field_h, self.field_w, self.pad
            )));
        }
        Ok((
            (span_h - self.field_h) / self.stride_h + 1,
            (span_w - self.field_w) / self.stride_w + 1,
        ))
    }
}

/// Row-major dense matrix.
#[derive(Debug, Clone, PartialEq)]
pub struct Matrix {
    rows: usize,
    cols: usize,
    data: Vec<f64>,
}

impl Matrix {
    pub fn new(rows: usize, cols: usize, data: Vec<f64>) -> Result<Self> {
        if data.len() != rows * cols {
            return Err(Error::Shape(format!(
                "matrix {rows}x{cols} needs {} values, got {}",
                rows * cols,
                data.len()
            )));
        }
        Ok(Self { rows, cols, data })
    }

    pub fn zeros(rows: usize, cols: usize) -> Self {
        Self {
            rows,
            cols,
            data: vec![0.0; rows * cols],
        }
    }

    pub fn filled(rows: usize, cols: usize, value: f64) -> Self {
        Self {
            rows,
            cols,
            data: vec![value; rows * cols],
        }
    }

    pub fn identity(n: usize) -> Self {
        let mut m = Self::zeros(n, n);
        for i in 0..n {
            m.data[i * n + i] = 1.0;
        }
        m
    }

    pub fn from_rows(rows: &[Vec<f64>]) -> Result<Self> {
        let cols = rows.first().map_or(0, Vec::len);
        if rows.iter().any(|r| r.len() != cols) {
            return Err(Error::Shape("ragged rows".into()));
        }
        Ok(Self {
            rows: rows.len(),
            cols,
            data: rows.concat(),
        })
    }

    pub fn rows(&self) -> usize {
        self.rows
    }

    pub fn cols(&self) -> usize {
        self.cols
    }

    pub fn data(&self) -> &[f64] {
        &self.data
    }

    pub fn data_mut(&mut self) -> &mut [f64] {
        &mut self.data
    }

    pub fn into_data(self) -> Vec<f64> {
        self.data
    }

    #[inline]
    pub fn get(&self, r: usize, c: usize) -> f64 {
        self.data[r * self.cols + c]
    }

    #[inline]
    pub fn set(&mut self, r: usize, c: usize, v: f64) {
        self.data[r * self.cols + c] = v;
    }

    #[inline]
    pub fn row(&self, r: usize) -> &[f64] {
        &self.data[r * self.cols..(r + 1) * self.cols]
    }

    #[inline]
    pub fn row_mut(&mut self, r: usize) -> &mut [f64] {
        &mut self.data[r * self.cols..(r + 1) * self.cols]
    }

    pub fn transpose(&self) -> Matrix {
        let mut out = Matrix::zeros(self.cols, self.rows);
        for r in 0..self.rows {
            for c in 0..self.cols {
                out.data[c * self.rows + r] = self.data[r * self.cols + c];
            }
        }
        out
    }

    /// `self * other`.
    pub fn matmul(&self, other: &Matrix) -> Result<Matrix> {
        if self.cols != other.rows {
            return Err(Error::Shape(format!(
                "matmul {}x{} by {}x{}",
                self.rows, self.cols, other.rows, other.cols
            )));
        }
        let mut out = Matrix::zeros(self.rows, other.cols);
        for r in 0..self.rows {
            let out_row = &mut out.data[r * other.cols..(r + 1) * other.cols];
            for k in 0..self.cols {
                let a = self.data[r * self.cols + k];
                if a == 0.0 {
                    continue;
                }
                for (o, &b) in out_row.iter_mut().zip(other.row(k)) {
                    *o += a * b;
                }
            }
        }
        Ok(out)
    }

    /// `self * other^T`, i.e. every row of `self` dotted with every row of `other`.
    pub fn matmul_transposed(&self, other: &Matrix) -> Result<Matrix> {
        if self.cols != other.cols {
            return Err(Error::Shape(format!(
                "matmul_transposed {}x{} by ({}x{})^T",
                self.rows, self.cols, other.rows, other.cols
            )));
        }
        let mut out = Matrix::zeros(self.rows, other.rows);
        for r in 0..self.rows {
            let a = self.row(r);
            for s in 0..other.rows {
                out.data[r * other.rows + s] = dot(a, other.row(s));
            }
        }
        Ok(out)
    }

    pub fn mul_vec(&self, v: &[f64]) -> Result<Vec<f64>> {
        if v.len() != self.cols {
            return Err(Error::Shape(format!(
                "matrix {}x{} times vector of length {}",
                self.rows,
                self.cols,
                v.len()
            )));
        }
        Ok((0..self.rows).map(|r| dot(self.row(r), v)).collect())
    }

    pub fn all_finite(&self) -> bool {
        self.data.iter().all(|v| v.is_finite())
    }
}

#[inline]
pub(crate) fn dot(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| x * y).sum()
}

/// Extracts every receptive-field window of `input` as one matrix row.
///
/// Rows follow raster order over output locations; each row is the
/// zero-padded window flattened in `(row, col, channel)` order.
pub fn extract_patches(input: &Tensor3, geom: &PatchGeometry) -> Result<Matrix> {
    let (out_h, out_w) = geom.output_dims(input.height, input.width)?;
    let c = input.channels;
    let row_len = geom.patch_len(c);
    let mut data = vec![0.0; out_h * out_w * row_len];
    let pad = geom.pad as isize;
    for oi in 0..out_h {
        for oj in 0..out_w {
            let base = (oi * out_w + oj) * row_len;
            let top = (oi * geom.stride_h) as isize - pad;
            let left = (oj * geom.stride_w) as isize - pad;
            for fi in 0..geom.field_h {
                let r = top + fi as isize;
                if r < 0 || r >= input.height as isize {
                    continue;
                }
                // A run of in-bounds columns copies as one contiguous slice.
                let c_lo = left.max(0);
                let c_hi = (left + geom.field_w as isize).min(input.width as isize);
                if c_lo >= c_hi {
                    continue;
                }
                let src = input.index(r as usize, c_lo as usize, 0);
                let count = (c_hi - c_lo) as usize * c;
                let dst = base + (fi * geom.field_w + (c_lo - left) as usize) * c;
                data[dst..dst + count].copy_from_slice(&input.data[src..src + count]);
            }
        }
    }
    Ok(Matrix {
        rows: out_h * out_w,
        cols: row_len,
        data,
    })
}

/// Adjoint of [`extract_patches`]: scatters patch-row gradients back onto an
/// input-shaped map, summing overlapping contributions. Padding cells are
/// dropped.
pub fn fold_patches(
    patch_grads: &Matrix,
    input_dims: (usize, usize, usize),
    geom: &PatchGeometry,
) -> Result<Tensor3> {
    let (h, w, c) = input_dims;
    let (out_h, out_w) = geom.output_dims(h, w)?;
    let row_len = geom.patch_len(c);
    if patch_grads.rows != out_h * out_w || patch_grads.cols != row_len {
        return Err(Error::Shape(format!(
            "fold_patches: expected {}x{}, got {}x{}",
            out_h * out_w,
            row_len,
            patch_grads.rows,
            patch_grads.cols
        )));
    }
    let mut out = Tensor3::zeros(h, w, c);
    let pad = geom.pad as isize;
    for oi in 0..out_h {
        for oj in 0..out_w {
            let row = patch_grads.row(oi * out_w + oj);
            let top = (oi * geom.stride_h) as isize - pad;
            let left = (oj * geom.stride_w) as isize - pad;
            for fi in 0..geom.field_h {
                let r = top + fi as isize;
                if r < 0 || r >= h as isize {
                    continue;
                }
                for fj in 0..geom.field_w {
                    let col = left + fj as isize;
                    if col < 0 || col >= w as isize {
                        continue;
                    }
                    let dst = out.index(r as usize, col as usize, 0);
                    let src = (fi * geom.field_w + fj) * c;
                    for ch in 0..c {
                        out.data[dst + ch] += row[src + ch];
                    }
                }
            }
        }
    }
    Ok(out)
}

#[cfg(test)]
mod tests {
    use super::*;

    fn ramp(h: usize, w: usize, c: usize) -> Tensor3 {
        let data = (0..h * w * c).map(|i| i as f64 * 0.5 - 3.0).collect();
        Tensor3::new(h, w, c, data).unwrap()
    }

    // Naive window copier used as the oracle for extract_patches.
    fn naive_patches(input: &Tensor3, g: &PatchGeometry) -> Vec<Vec<f64>> {
        let (h, w, c) = input.dims();
        let oh = (h + 2 * g.pad - g.field_h) / g.stride_h + 1;
        let ow = (w + 2 * g.pad - g.field_w) / g.stride_w + 1;
        let mut rows = Vec::new();
        for i in 0..oh {
            for j in 0..ow {
                let mut row = Vec::new();
                for a in 0..g.field_h {
                    for b in 0..g.field_w {
                        for ch in 0..c {
                            let r = (i * g.stride_h + a) as i64 - g.pad as i64;
                            let col = (j * g.stride_w + b) as i64 - g.pad as i64;
                            if r < 0 || col < 0 || r >= h as i64 || col >= w as i64 {
                                row.push(0.0);
                            } else {
                                row.push(input.get(r as usize, col as usize, ch));
                            }
                        }
                    }
                }
                rows.push(row);
            }
        }
        rows
    }

    #[test]
    fn identity_patch() {
        let t = Tensor3::new(1, 1, 3, vec![1.0, 2.0, 3.0]).unwrap();
        let p = extract_patches(&t, &PatchGeometry::unit()).unwrap();
        assert_eq!(p.rows(), 1);
        assert_eq!(p.row(0), &[1.0, 2.0, 3.0]);
    }

    #[test]
    fn zero_input_gives_zero_patches() {
        let t = Tensor3::zeros(3, 3, 1);
        let p = extract_patches(&t, &PatchGeometry::square(2)).unwrap();
        assert_eq!(p.rows(), 4);
        assert!(p.data().iter().all(|&v| v == 0.0));
    }

    #[test]
    fn padded_ramp_matches_naive() {
        let t = ramp(4, 4, 2);
        let g = PatchGeometry::new(3, 3, 1, 1, 1);
        let p = extract_patches(&t, &g).unwrap();
        assert_eq!(p.rows(), 16);
        let oracle = naive_patches(&t, &g);
        for (r, row) in oracle.iter().enumerate() {
            assert_eq!(p.row(r), row.as_slice());
        }
    }

    #[test]
    fn exhaustive_small_geometries_match_naive() {
        for h in 1..=8 {
            for w in [1usize, 3, 8] {
                for c in [1usize, 2] {
                    let t = ramp(h, w, c);
                    for fh in 1..=h.min(4) {
                        for fw in 1..=w.min(3) {
                            for s in 1..=2 {
                                for pad in 0..=1 {
                                    let g = PatchGeometry::new(fh, fw, s, s, pad);
                                    let p = extract_patches(&t, &g).unwrap();
                                    let oracle = naive_patches(&t, &g);
                                    assert_eq!(p.rows(), oracle.len());
                                    for (r, row) in oracle.iter().enumerate() {
                                        assert_eq!(p.row(r), row.as_slice(), "{g:?} {h}x{w}x{c}");
                                    }
                                }
                            }
                        }
                    }
                }
            }
        }
    }

    #[test]
    fn oversized_field_is_rejected() {
        let t = Tensor3::zeros(2, 2, 1);
        let err = extract_patches(&t, &PatchGeometry::square(3)).unwrap_err();
        assert!(matches!(err, Error::Geometry(_)));
        let zero_stride = PatchGeometry::new(1, 1, 0, 1, 0);
        assert!(extract_patches(&t, &zero_stride).is_err());
    }

    #[test]
    fn fold_is_adjoint_of_extract() {
        // <extract(x), g> == <x, fold(g)> for any x, g.
        let t = ramp(5, 4, 2);
        let g = PatchGeometry::new(3, 2, 2, 1, 1);
        let p = extract_patches(&t, &g).unwrap();
        let grads: Vec<f64> = (0..p.data().len()).map(|i| ((i * 7) % 5) as f64 - 2.0).collect();
        let gm = Matrix::new(p.rows(), p.cols(), grads).unwrap();
        let lhs = dot(p.data(), gm.data());
        let folded = fold_patches(&gm, t.dims(), &g).unwrap();
        let rhs = dot(t.data(), folded.data());
        assert!((lhs - rhs).abs() < 1e-9);
    }

    #[test]
    fn elementwise_identities() {
        let x = ramp(2, 3, 2);
        assert_eq!(x.add(&Tensor3::zeros(2, 3, 2)).unwrap(), x);
        assert_eq!(x.scale(1.0).unwrap(), x);
        let a = Tensor3::new(1, 1, 2, vec![1.0, 2.0]).unwrap();
        let b = Tensor3::new(1, 1, 2, vec![3.0, 4.0]).unwrap();
        assert_eq!(a.hadamard(&b).unwrap().data(), &[3.0, 8.0]);
        assert_eq!(b.sub(&a).unwrap().data(), &[2.0, 2.0]);
    }

    #[test]
    fn elementwise_shape_mismatch() {
        let a = Tensor3::zeros(1, 1, 2);
        let b = Tensor3::zeros(1, 2, 1);
        assert!(matches!(a.add(&b), Err(Error::Shape(_))));
        assert!(a.hadamard(&b).is_err());
    }

    #[test]
    fn overflow_is_reported() {
        let a = Tensor3::new(1, 1, 1, vec![1e308]).unwrap();
        assert!(matches!(a.scale(10.0), Err(Error::NonFinite(_))));
    }

    #[test]
    fn rejects_bad_construction() {
        assert!(Tensor3::new(1, 1, 2, vec![1.0]).is_err());
        assert!(Tensor3::new(1, 1, 1, vec![f64::NAN]).is_err());
        assert!(Matrix::new(2, 2, vec![0.0; 3]).is_err());
    }
}
