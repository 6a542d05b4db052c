//! On-disk formats. All binary integers and floats are little-endian.

pub mod binio;
pub mod checkpoint;
pub mod lora;
pub mod qnf4;
pub mod shards;
pub mod vocab;
