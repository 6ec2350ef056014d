use crate::error::{Error, Result};
use crate::metrics::MetricOptions;
use crate::synth::{resolution_sweep, SweepSize, SynthConfig};
use crate::table::{sig9, CsvTable};

use super::{evaluate, Decoder, Passthrough};

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct SweepRow {
    pub size: SweepSize,
    pub decoder: Decoder,
    /// Mean localization error in cells of the base grid.
    pub mean_error: f64,
    pub cells_per_axis: usize,
}

/// Decodes clean-likelihood scores of the same scenes at every size with
/// both decoders. Rows are ordered by size, then argmax before integral.
pub fn decoder_sweep(
    base: &SynthConfig,
    samples: usize,
    sizes: &[SweepSize],
    options: &MetricOptions,
) -> Result<Vec<SweepRow>> {
    let sets = resolution_sweep(base, samples, sizes)?;
    let mut rows = Vec::with_capacity(2 * sets.len());
    for (set, size) in sets.iter().zip(sizes) {
        if set.scale[0] != set.scale[1] {
            return Err(Error::contract("sweep sizes must keep the aspect ratio of the base grid"));
        }
        let opts = MetricOptions {
            stride: options.stride / set.scale[0],
            ..*options
        };
        for decoder in [Decoder::Argmax, Decoder::Integral] {
            let report = evaluate(&Passthrough, &set.samples, decoder, &opts)?;
            rows.push(SweepRow {
                size: *size,
                decoder,
                mean_error: report.mean_error,
                cells_per_axis: size.width,
            });
        }
    }
    Ok(rows)
}

pub fn sweep_csv(rows: &[SweepRow]) -> String {
    let mut t = CsvTable::with_header(&["size", "decoder", "mean_error", "cells_per_axis"]);
    for r in rows {
        let size = if r.size.depth > 1 {
            format!("{}x{}x{}", r.size.depth, r.size.height, r.size.width)
        } else {
            format!("{}x{}", r.size.height, r.size.width)
        };
        t.row([size, r.decoder.as_str().to_string(), sig9(r.mean_error), r.cells_per_axis.to_string()]);
    }
    t.into_string()
}
