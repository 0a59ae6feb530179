pub mod data;
pub mod error;
pub mod fourier;
pub mod io;
pub mod probe;
pub mod sampling;
pub mod transforms;
pub mod plf;
pub mod net;
pub mod backprop;
pub mod train;
pub mod checkpoint;
pub mod metrics;
pub mod phantom;

#[cfg(doctest)]
mod book {
    #[doc = include_str!("../../../book/src/data.md")]
    mod data {}
    #[doc = include_str!("../../../book/src/network.md")]
    mod network {}
    #[doc = include_str!("../../../book/src/training.md")]
    mod training {}
    #[doc = include_str!("../../../book/src/metrics.md")]
    mod metrics {}
    #[doc = include_str!("../../../book/src/formats.md")]
    mod formats {}
    #[doc = include_str!("../../../book/src/cli.md")]
    mod cli {}
}
