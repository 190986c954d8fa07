//! Dataset constructions: compositing, augmentation, and inpainting-based
//! manifest building.

pub mod augment;
pub mod cocosd;
pub mod composite;
pub mod fixture;

pub use augment::{augment, augment_dataset, AugmentKind, AugmentSpec};
pub use cocosd::{build_cocosd_manifest, select_object_mask, CocoSdOptions, CocoSdReport, InpaintJob, Inpainter, SubprocessInpainter};
pub use composite::{build_ldm_dataset, composite, composite_images, CompositeJob, LdmBuild, LdmVariant};

/// Order-preserving map, parallel when the `parallel` feature is on.
pub(crate) fn par_map<T: Sync, R: Send>(items: &[T], f: impl Fn(&T) -> R + Sync + Send) -> Vec<R> {
    #[cfg(feature = "parallel")]
    {
        use rayon::prelude::*;
        items.par_iter().map(f).collect()
    }
    #[cfg(not(feature = "parallel"))]
    {
        items.iter().map(f).collect()
    }
}

#[cfg(feature = "http")]
pub use cocosd::HttpInpainter;
