//! Dataset assembly from on-disk event and label files.

use std::path::{Path, PathBuf};

use spikefpn_core::encoding::EncoderConfig;
use spikefpn_core::event::{EventStream, Geometry, GtBox};
use spikefpn_core::training::{build_samples, Dataset, Sample};

use crate::error::{CliError, Result};
use crate::event_io;

/// Conventional file names inside a data directory.
pub fn events_path(dir: &Path) -> Result<PathBuf> {
    for name in ["events.csv", "events.evt1"] {
        let p = dir.join(name);
        if p.exists() {
            return Ok(p);
        }
    }
    Err(CliError::Config(format!(
        "no events.csv or events.evt1 in {}",
        dir.display()
    )))
}

pub fn labels_path(dir: &Path) -> PathBuf {
    dir.join("labels.csv")
}

/// Load a data directory into (stream, labels), printing clamp warnings.
pub fn load_dir(dir: &Path, geometry: Geometry) -> Result<(EventStream, Vec<GtBox>)> {
    let stream = event_io::load_events(&events_path(dir)?, geometry)?;
    let (labels, warnings) = event_io::load_labels(&labels_path(dir), geometry)?;
    for w in warnings {
        eprintln!("warning: {w}");
    }
    Ok((stream, labels))
}

/// Encode samples and split off the validation tail.
pub fn build_dataset(
    stream: &EventStream,
    labels: &[GtBox],
    encoder: &EncoderConfig,
    val_fraction: f64,
    limit: Option<usize>,
) -> Result<Dataset> {
    let samples: Vec<Sample> = build_samples(stream, labels, encoder, limit)?;
    if samples.is_empty() {
        return Err(CliError::Config(String::from(
            "no encodable samples: labels may lack event history",
        )));
    }
    Ok(Dataset::split(samples, val_fraction))
}

/// All box sizes (w, h) in the training split, for k-means anchors.
pub fn train_box_sizes(dataset: &Dataset) -> Vec<(f64, f64)> {
    dataset
        .train_idx
        .iter()
        .flat_map(|i| dataset.samples[*i].boxes.iter().map(|b| (b.w, b.h)))
        .collect()
}
