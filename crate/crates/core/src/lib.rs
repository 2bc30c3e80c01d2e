pub mod bench;
pub mod correspondence;
pub mod error;
pub mod fusion;
pub mod gradcheck;
pub mod metrics;
pub mod position;
pub mod ras;
pub mod sinkhorn;
pub mod tensor;

pub use error::{Error, Result};

#[cfg(doctest)]
mod book {
    #[doc = include_str!("../../../book/src/introduction.md")]
    mod introduction {}
    #[doc = include_str!("../../../book/src/tensor-format.md")]
    mod tensor_format {}
    #[doc = include_str!("../../../book/src/soft-topk.md")]
    mod soft_topk {}
    #[doc = include_str!("../../../book/src/block-ranking.md")]
    mod block_ranking {}
    #[doc = include_str!("../../../book/src/position-encoding.md")]
    mod position_encoding {}
    #[doc = include_str!("../../../book/src/confidence-fusion.md")]
    mod confidence_fusion {}
    #[doc = include_str!("../../../book/src/metrics-and-bench.md")]
    mod metrics_and_bench {}
    #[doc = include_str!("../../../book/src/cli.md")]
    mod cli {}
}
