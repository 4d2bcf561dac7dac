//! Streaming evaluation: build a sample stream, run a method over it with a
//! simulated annotator, and tabulate the results.

mod config;
mod matrix;
mod method;
mod overlay;
mod report;
mod session;

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

pub use config::RunConfig;
pub use matrix::{run_matrix, MatrixCell, MatrixReport, MethodAverage, TABLE_DECIMALS};
pub use method::{MethodName, MethodSettings, MethodSpec, TentConfig};
pub use overlay::{export_overlays, render_overlay, OverlayInput};
pub use report::{DomainAggregate, SampleRow, StreamReport};
pub use session::{fingerprint, oracle_response, Feedback, Presentation, StepOutcome, StreamItem, StreamSession};

use crate::backbone::SegNetwork;
use crate::datagen::{derive_seed, Dataset};
use crate::error::{Error, Result};

/// Concatenates the test samples of `domains` in the given order. With
/// `shuffle`, each domain's samples are permuted by a seed derived from
/// `seed` and the domain position.
pub fn build_stream(data: &Dataset, domains: &[String], seed: u64, shuffle: bool) -> Result<Vec<StreamItem>> {
    let mut items = Vec::new();
    for (i, d) in domains.iter().enumerate() {
        let rater = data.rater_of(d)?.to_string();
        let mut samples = data.domain_stream(d);
        if samples.is_empty() {
            return Err(Error::Validation(format!("domain {d} has no test samples")));
        }
        if shuffle {
            samples.shuffle(&mut ChaCha8Rng::seed_from_u64(derive_seed(seed, &[0xD0, i as u64])));
        }
        items.extend(samples.into_iter().map(|s| StreamItem {
            sample: s.clone(),
            rater: rater.clone(),
        }));
    }
    Ok(items)
}

/// Runs `spec` over the stream with the simulated annotator. Returns the
/// report and the final model state.
pub fn run_stream(
    spec: &MethodSpec,
    source: SegNetwork,
    items: Vec<StreamItem>,
    seed: u64,
) -> Result<(StreamReport, SegNetwork)> {
    let mut session = StreamSession::new(spec.clone(), source, items, seed)?;
    while !session.is_done() {
        session.step_oracle()?;
    }
    let net = session.network_mut().clone();
    Ok((session.into_report(), net))
}
