//! Benchmark fixtures shared by the bench targets.

use contingen_core::dataset::{generate_dataset, GridEncoder, GridImage, Normalizer};
use contingen_core::{CpfOptions, NetworkCase};

/// Encoder fitted on a small dataset, plus one encoded sample.
pub fn fixture(case: &NetworkCase) -> (GridEncoder, GridImage) {
    let ds = generate_dataset(case, 100, 2.5, 0, &CpfOptions::default(), 1).expect("dataset");
    let enc = GridEncoder::new(case, Normalizer::fit(&ds.samples));
    let img = enc.encode(&ds.samples[0]);
    (enc, img)
}
