//! Synthetic data, metrics, optimisation and the training loop.

mod data;
mod io;
mod metrics;
mod optim;
mod trainer;

pub use data::{
    augment, crop, flip, foreground_mask, gen_synthetic_dataset, generate_sample, generate_with,
    preprocess, zscore_normalize, AugmentToggles, Ellipsoid, SegmentationSample, SynthConfig,
    INTENSITY_SHIFT, ZSCORE_EPS,
};
pub use io::{
    load_dataset, read_labels, read_metric_log, read_volume, save_dataset, write_labels,
    write_volume, MetricLog,
};
pub use metrics::{
    argmax_labels, confidence_bin, dice_score, hd95, percentile, squared_distance_transform,
    surface, ConfidenceHistogram, MetricsRecord, CONFIDENCE_EDGES,
};
pub use optim::{lr_schedule, Adam, AdamConfig, Schedule};
pub use trainer::{evaluate, train, TrainConfig, TrainReport};

/// Mixes a base seed with a tag path into an independent stream seed.
pub fn derive_seed(seed: u64, tags: &[u64]) -> u64 {
    fn splitmix(mut z: u64) -> u64 {
        z = z.wrapping_add(0x9E37_79B9_7F4A_7C15);
        z = (z ^ (z >> 30)).wrapping_mul(0xBF58_476D_1CE4_E5B9);
        z = (z ^ (z >> 27)).wrapping_mul(0x94D0_49BB_1331_11EB);
        z ^ (z >> 31)
    }
    tags.iter()
        .fold(splitmix(seed), |acc, &t| splitmix(acc ^ splitmix(t)))
}

/// Caps the global rayon pool at `VOLSEG_THREADS` when it is set.
/// Returns the thread count in effect. Calling it twice is harmless.
pub fn configure_threads() -> crate::Result<usize> {
    if let Ok(v) = std::env::var("VOLSEG_THREADS") {
        let n: usize = v.trim().parse().ok().filter(|&n| n > 0).ok_or_else(|| {
            crate::Error::Config(format!(
                "VOLSEG_THREADS must be a positive integer, got {v:?}"
            ))
        })?;
        let _ = rayon::ThreadPoolBuilder::new()
            .num_threads(n)
            .build_global();
    }
    Ok(rayon::current_num_threads())
}
