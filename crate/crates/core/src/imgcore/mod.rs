//! Image containers, mirror-padded filtering and file I/O.

mod buffer;
mod conv;
mod io;

pub use buffer::{FloatMap, Image, Kernel};
pub use conv::{convolve, gaussian_blur, gaussian_weights, mirror_index, Planar};
pub(crate) use conv::{convolve_plane_paired, PaddedPlane, Taps};
pub use io::{
    encode_pfm, load_image, load_pfm, quantize, save_image, save_pfm, srgb_to_linear,
    write_atomic, BitDepth,
};
