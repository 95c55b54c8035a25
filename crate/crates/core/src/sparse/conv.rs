//! Generalized sparse 3D convolution.
//!
//! Every contraction runs per kernel-offset bucket: gather the bucket's input
//! rows into a dense block, multiply by that offset's `C_in x C_out` slice of
//! the kernel, scatter-add into the output rows.

use super::kmap::{build_kernel_map_indexed, check_kernel_size};
use super::{Coord3, CoordTable, KernelMap, SparseTensor};
use crate::error::{Error, Result};
use crate::matrix::Matrix;
use crate::real::Real;

/// Kernel of shape `(k³, C_in, C_out)`, stored as a `(k³·C_in) x C_out` matrix,
/// plus an optional bias of length `C_out`.
#[derive(Clone, Debug, PartialEq)]
pub struct ConvWeights<T> {
    kernel_size: usize,
    c_in: usize,
    kernel: Matrix<T>,
    bias: Option<Vec<T>>,
}

impl<T: Real> ConvWeights<T> {
    pub fn new(kernel_size: usize, kernel: Matrix<T>, bias: Option<Vec<T>>) -> Result<Self> {
        check_kernel_size(kernel_size)?;
        let vol = kernel_size.pow(3);
        if kernel.rows() == 0 || !kernel.rows().is_multiple_of(vol) || kernel.cols() == 0 {
            return Err(Error::shape(format!("kernel {:?} incompatible with {vol} offsets", kernel.shape())));
        }
        if !kernel.is_finite() {
            return Err(Error::NonFinite("convolution kernel".into()));
        }
        if let Some(b) = &bias {
            if b.len() != kernel.cols() {
                return Err(Error::shape("bias length differs from output channels"));
            }
            if b.iter().any(|v| !v.is_finite()) {
                return Err(Error::NonFinite("convolution bias".into()));
            }
        }
        Ok(Self { kernel_size, c_in: kernel.rows() / vol, kernel, bias })
    }

    pub fn zeros(kernel_size: usize, c_in: usize, c_out: usize, with_bias: bool) -> Result<Self> {
        check_kernel_size(kernel_size)?;
        let kernel = Matrix::zeros(kernel_size.pow(3) * c_in, c_out);
        Self::new(kernel_size, kernel, with_bias.then(|| vec![T::zero(); c_out]))
    }

    pub fn kernel_size(&self) -> usize {
        self.kernel_size
    }

    pub fn c_in(&self) -> usize {
        self.c_in
    }

    pub fn c_out(&self) -> usize {
        self.kernel.cols()
    }

    pub fn kernel(&self) -> &Matrix<T> {
        &self.kernel
    }

    pub fn bias(&self) -> Option<&[T]> {
        self.bias.as_deref()
    }

    /// The `C_in x C_out` slice for offset `d`.
    pub fn offset_slice(&self, d: usize) -> &[T] {
        let w = self.c_in * self.c_out();
        &self.kernel.as_slice()[d * w..(d + 1) * w]
    }
}

/// `out[o] = bias + Σ_{(i,o,d)} kernel[d]ᵀ · feats[i]` over the map's outputs.
pub fn conv_contract<T: Real>(
    feats: &Matrix<T>,
    kernel: &Matrix<T>,
    bias: Option<&[T]>,
    kmap: &KernelMap,
) -> Result<Matrix<T>> {
    let c_in = feats.cols();
    let c_out = kernel.cols();
    if kernel.rows() != kmap.n_offsets() * c_in {
        return Err(Error::shape(format!(
            "kernel {:?} does not match {} offsets x {c_in} input channels",
            kernel.shape(),
            kmap.n_offsets()
        )));
    }
    if feats.rows() != kmap.n_in() {
        return Err(Error::shape("input rows differ from kernel-map inputs"));
    }
    let mut out = Matrix::zeros(kmap.n_out(), c_out);
    if let Some(b) = bias {
        for r in 0..out.rows() {
            out.row_mut(r).copy_from_slice(b);
        }
    }
    let mut gathered = Vec::new();
    let mut product = Vec::new();
    let w = c_in * c_out;
    for d in 0..kmap.n_offsets() {
        let pairs = kmap.bucket(d);
        if pairs.is_empty() {
            continue;
        }
        gathered.clear();
        for &(i, _) in pairs {
            gathered.extend_from_slice(feats.row(i as usize));
        }
        product.clear();
        product.resize(pairs.len() * c_out, T::zero());
        let wd = &kernel.as_slice()[d * w..(d + 1) * w];
        T::gemm(
            pairs.len(),
            c_in,
            c_out,
            T::one(),
            &gathered,
            c_in,
            1,
            wd,
            c_out,
            1,
            T::zero(),
            &mut product,
            c_out,
            1,
        );
        for (p, &(_, o)) in pairs.iter().enumerate() {
            let dst = out.row_mut(o as usize);
            for (a, &b) in dst.iter_mut().zip(&product[p * c_out..(p + 1) * c_out]) {
                *a += b;
            }
        }
    }
    Ok(out)
}

/// Gradients of [`conv_contract`] with respect to its input features and its
/// kernel. The bias gradient is the column sum of `grad_out`.
pub fn conv_contract_backward<T: Real>(
    feats: &Matrix<T>,
    kernel: &Matrix<T>,
    kmap: &KernelMap,
    grad_out: &Matrix<T>,
) -> Result<(Matrix<T>, Matrix<T>)> {
    let c_in = feats.cols();
    let c_out = kernel.cols();
    if grad_out.shape() != (kmap.n_out(), c_out) {
        return Err(Error::shape(format!(
            "output gradient {:?} does not match ({}, {c_out})",
            grad_out.shape(),
            kmap.n_out()
        )));
    }
    if feats.rows() != kmap.n_in() || kernel.rows() != kmap.n_offsets() * c_in {
        return Err(Error::shape("operands do not match the kernel map"));
    }
    let mut grad_in = Matrix::zeros(feats.rows(), c_in);
    let mut grad_k = Matrix::zeros(kernel.rows(), c_out);
    let w = c_in * c_out;
    let (mut a, mut g, mut back) = (Vec::new(), Vec::new(), Vec::new());
    for d in 0..kmap.n_offsets() {
        let pairs = kmap.bucket(d);
        if pairs.is_empty() {
            continue;
        }
        a.clear();
        g.clear();
        for &(i, o) in pairs {
            a.extend_from_slice(feats.row(i as usize));
            g.extend_from_slice(grad_out.row(o as usize));
        }
        let n = pairs.len();
        let wd = &kernel.as_slice()[d * w..(d + 1) * w];
        // gathered grad_out (n x c_out) times kernel[d]ᵀ (c_out x c_in)
        back.clear();
        back.resize(n * c_in, T::zero());
        T::gemm(n, c_out, c_in, T::one(), &g, c_out, 1, wd, 1, c_out, T::zero(), &mut back, c_in, 1);
        for (p, &(i, _)) in pairs.iter().enumerate() {
            let dst = grad_in.row_mut(i as usize);
            for (x, &y) in dst.iter_mut().zip(&back[p * c_in..(p + 1) * c_in]) {
                *x += y;
            }
        }
        // gathered featsᵀ (c_in x n) times gathered grad_out (n x c_out)
        let gk = &mut grad_k.as_mut_slice()[d * w..(d + 1) * w];
        T::gemm(c_in, n, c_out, T::one(), &a, 1, c_in, &g, c_out, 1, T::zero(), gk, c_out, 1);
    }
    Ok((grad_in, grad_k))
}

pub fn column_sums<T: Real>(m: &Matrix<T>) -> Vec<T> {
    let mut s = vec![T::zero(); m.cols()];
    for r in 0..m.rows() {
        for (a, &b) in s.iter_mut().zip(m.row(r)) {
            *a += b;
        }
    }
    s
}

/// Output of a forward convolution together with the plan that produced it.
#[derive(Clone, Debug)]
pub struct ConvOutput<T> {
    pub tensor: SparseTensor<T>,
    pub kmap: KernelMap,
}

/// Sparse convolution of `input` evaluated at `out_coords` (grid step
/// `out_stride`). Neighbors are searched at the input's stride. With
/// `drop_empty`, outputs that no input reaches are removed; otherwise they
/// keep a bias-only row.
pub fn sparse_conv_forward<T: Real>(
    input: &SparseTensor<T>,
    weights: &ConvWeights<T>,
    out_coords: &[Coord3],
    out_stride: u32,
    drop_empty: bool,
) -> Result<ConvOutput<T>> {
    if weights.c_in() != input.channels() {
        return Err(Error::shape(format!(
            "weights expect {} input channels, tensor has {}",
            weights.c_in(),
            input.channels()
        )));
    }
    CoordTable::build(out_coords).map_err(|c| Error::DuplicateCoord(c.to_array()))?;
    let mut kmap =
        build_kernel_map_indexed(input.index(), input.len(), out_coords, weights.kernel_size(), input.stride())?;
    let mut coords = out_coords.to_vec();
    if drop_empty {
        let keep = kmap.covered_outputs();
        if keep.iter().any(|k| !k) {
            kmap = kmap.retain_outputs(&keep);
            coords = coords.into_iter().zip(&keep).filter(|(_, &k)| k).map(|(c, _)| c).collect();
        }
    }
    let feats = conv_contract(input.feats(), weights.kernel(), weights.bias(), &kmap)?;
    let tensor = SparseTensor::new(coords, feats, out_stride, input.voxel_size())?;
    Ok(ConvOutput { tensor, kmap })
}

/// Analytic gradients of the convolution that produced `kmap`.
pub fn sparse_conv_backward<T: Real>(
    input: &SparseTensor<T>,
    weights: &ConvWeights<T>,
    kmap: &KernelMap,
    grad_out: &Matrix<T>,
) -> Result<(Matrix<T>, ConvWeights<T>)> {
    let (grad_in, grad_k) = conv_contract_backward(input.feats(), weights.kernel(), kmap, grad_out)?;
    let grad_b = weights.bias().map(|_| column_sums(grad_out));
    Ok((grad_in, ConvWeights::new(weights.kernel_size(), grad_k, grad_b)?))
}

#[cfg(test)]
mod tests {
    use super::*;

    fn single(feat: Vec<f64>) -> SparseTensor<f64> {
        let n = feat.len();
        SparseTensor::new(vec![Coord3::ORIGIN], Matrix::from_vec(1, n, feat).unwrap(), 1, [1.0; 3]).unwrap()
    }

    #[test]
    fn identity_kernel_passes_features_through() {
        let x = single(vec![1.5, -2.0, 3.0]);
        let w = ConvWeights::new(1, Matrix::identity(3), None).unwrap();
        let y = sparse_conv_forward(&x, &w, &[Coord3::ORIGIN], 1, false).unwrap();
        assert_eq!(y.tensor.feats(), x.feats());
    }

    #[test]
    fn unreached_output_is_dropped_or_bias_only() {
        let x = single(vec![1.0]);
        let w = ConvWeights::new(3, Matrix::from_fn(27, 1, |_, _| 1.0), Some(vec![0.5])).unwrap();
        let far = [Coord3::new(10, 0, 0), Coord3::new(1, 0, 0)];
        let dropped = sparse_conv_forward(&x, &w, &far, 1, true).unwrap();
        assert_eq!(dropped.tensor.coords(), &[Coord3::new(1, 0, 0)]);
        assert_eq!(dropped.tensor.feats().row(0), &[1.5]);
        let kept = sparse_conv_forward(&x, &w, &far, 1, false).unwrap();
        assert_eq!(kept.tensor.feats().row(0), &[0.5]);
    }

    #[test]
    fn backward_edge_cases() {
        let x = single(vec![1.0, 2.0]);
        let w = ConvWeights::new(1, Matrix::identity(2), Some(vec![0.0, 0.0])).unwrap();
        let y = sparse_conv_forward(&x, &w, &[Coord3::ORIGIN], 1, false).unwrap();
        let (gi, gw) = sparse_conv_backward(&x, &w, &y.kmap, &Matrix::zeros(1, 2)).unwrap();
        assert!(gi.as_slice().iter().all(|&v| v == 0.0));
        assert!(gw.kernel().as_slice().iter().all(|&v| v == 0.0));
        let go = Matrix::from_vec(1, 2, vec![0.3, -0.7]).unwrap();
        let (gi, gw) = sparse_conv_backward(&x, &w, &y.kmap, &go).unwrap();
        assert_eq!(gi, go);
        assert_eq!(gw.bias().unwrap(), &[0.3, -0.7]);
        assert!(sparse_conv_backward(&x, &w, &y.kmap, &Matrix::zeros(2, 2)).is_err());
    }

    #[test]
    fn rejects_bad_weights() {
        let bad = Matrix::from_vec(1, 1, vec![f64::NAN]).unwrap();
        assert!(matches!(ConvWeights::new(1, bad, None), Err(Error::NonFinite(_))));
        let x = single(vec![1.0, 2.0]);
        let w = ConvWeights::new(1, Matrix::<f64>::identity(3), None).unwrap();
        assert!(sparse_conv_forward(&x, &w, &[Coord3::ORIGIN], 1, false).is_err());
    }
}
