//! Coordinate-hashed sparse tensors and generalized sparse 3D convolution.

mod conv;
mod coord;
mod hash;
mod kmap;
mod layout;
mod resample;
mod tensor;

pub use conv::{
    column_sums, conv_contract, conv_contract_backward, sparse_conv_backward, sparse_conv_forward, ConvOutput,
    ConvWeights,
};
pub use coord::Coord3;
pub use hash::CoordTable;
pub use kmap::{build_kernel_map, kernel_offsets, offset_index, KernelMap};
pub use layout::Layout;
pub use resample::{parent_rows, strided_downsample_coords, upsample_interpolate};
pub use tensor::{site_center, SparseTensor};
