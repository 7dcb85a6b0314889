//! Feature-integration analysis: regress each layer's attention vector on
//! the attention vectors of the preceding layers of the same stage with a
//! random forest, then report per-source-layer Gini importances normalized
//! by the row maximum. The resulting lower-triangular matrix quantifies how
//! strongly later layers draw on earlier ones through the shared unit.
//!
//! For each target layer t (from the second layer on), the predictors are
//! the flattened hidden vectors of layers 1..t-1, `(batch, (t-1)*channels)`,
//! and the response is layer t's hidden vector, `(batch, channels)`. Feature
//! importances are summed in consecutive channel groups to get one score per
//! source layer; each row is divided by its maximum, so every occupied row
//! contains an exact 1.0 unless it degenerated to all zeros (flagged).

use std::fmt::Write as _;
use std::path::Path;

use crate::backbone::Network;
use crate::checkpoint;
use crate::error::{Error, Result};
use crate::forest::{fit_forest, ForestHyperParams, MatrixRef};
use crate::rng::Rng;
use crate::tensor::Tensor;

/// Captured attention vectors of one stage: `values[b, c, t]` with
/// `t` running over the stage's blocks.
#[derive(Debug, Clone, PartialEq)]
pub struct HiddenStateTrace {
    pub stage: usize,
    pub batch: usize,
    pub channels: usize,
    pub layers: usize,
    pub values: Vec<f64>,
}

impl HiddenStateTrace {
    /// Builds a trace from per-layer `[B, N]` slices in layer order.
    pub fn from_layer_slices(stage: usize, batch: usize, channels: usize, rows: &[Vec<f64>]) -> Self {
        let layers = rows.len();
        let mut values = vec![0.0; batch * channels * layers];
        for (t, row) in rows.iter().enumerate() {
            assert_eq!(row.len(), batch * channels, "layer slice shape");
            for b in 0..batch {
                for c in 0..channels {
                    values[(b * channels + c) * layers + t] = row[b * channels + c];
                }
            }
        }
        HiddenStateTrace {
            stage,
            batch,
            channels,
            layers,
            values,
        }
    }

    pub fn get(&self, b: usize, c: usize, t: usize) -> f64 {
        self.values[(b * self.channels + c) * self.layers + t]
    }

    /// Reorders layers: new layer t holds what was layer `perm[t]`.
    pub fn with_permuted_layers(&self, perm: &[usize]) -> Self {
        assert_eq!(perm.len(), self.layers);
        let mut out = self.clone();
        for b in 0..self.batch {
            for c in 0..self.channels {
                for (t, &src) in perm.iter().enumerate() {
                    out.values[(b * self.channels + c) * self.layers + t] = self.get(b, c, src);
                }
            }
        }
        out
    }

    fn layer_columns(&self, t: usize, out: &mut [f64]) {
        // out is [batch, channels] row-major for layer t.
        for b in 0..self.batch {
            for c in 0..self.channels {
                out[b * self.channels + c] = self.get(b, c, t);
            }
        }
    }
}

/// Runs forward passes with capture enabled and returns the requested
/// stage's trace.
pub fn capture_traces(net: &Network, images: &Tensor, stage: usize) -> Result<HiddenStateTrace> {
    if stage >= net.stages.len() {
        return Err(Error::Config(format!(
            "stage {} out of range for {} stages",
            stage + 1,
            net.stages.len()
        )));
    }
    let out = net.forward(images, false, true)?;
    out.traces
        .into_iter()
        .nth(stage)
        .flatten()
        .ok_or_else(|| {
            Error::Config(format!(
                "stage {} has no recurrent attention unit to trace",
                stage + 1
            ))
        })
}

/// Lower-triangular normalized importance scores. `rows[k]` belongs to
/// target layer k+2 (1-based) and has k+1 source entries.
#[derive(Debug, Clone, PartialEq)]
pub struct IntegrationMatrix {
    pub stage: usize,
    pub layers: usize,
    pub rows: Vec<Vec<f64>>,
    /// True where the row degenerated (no importance mass at all).
    pub degenerate_rows: Vec<bool>,
}

/// The full per-stage pipeline: for each target layer, fit a forest of the
/// preceding layers' vectors against it, group importances per source layer
/// and normalize by the row maximum.
pub fn integration_matrix(trace: &HiddenStateTrace, hp: &ForestHyperParams) -> Result<IntegrationMatrix> {
    if trace.layers < 2 {
        return Err(Error::Config(format!(
            "feature integration needs at least 2 layers, stage has {}",
            trace.layers
        )));
    }
    let (b, c) = (trace.batch, trace.channels);
    let seed_root = Rng::new(hp.seed);

    let mut rows = Vec::new();
    let mut degenerate_rows = Vec::new();
    let mut layer_buf = vec![0.0; b * c];

    for target in 1..trace.layers {
        let p = target * c;
        let mut x = vec![0.0; b * p];
        for src in 0..target {
            trace.layer_columns(src, &mut layer_buf);
            for bi in 0..b {
                x[bi * p + src * c..bi * p + (src + 1) * c]
                    .copy_from_slice(&layer_buf[bi * c..(bi + 1) * c]);
            }
        }
        let mut y = vec![0.0; b * c];
        trace.layer_columns(target, &mut y);

        let mut row_hp = hp.clone();
        row_hp.seed = seed_root.derive(&format!("target{target}")).next_u64();
        let forest = fit_forest(MatrixRef::new(&x, b, p), MatrixRef::new(&y, b, c), &row_hp)?;

        let mut res = vec![0.0; target];
        for (src, score) in res.iter_mut().enumerate() {
            *score = forest.importances[src * c..(src + 1) * c].iter().sum();
        }
        let mx = res.iter().cloned().fold(0.0, f64::max);
        if mx > 0.0 {
            res.iter_mut().for_each(|v| *v /= mx);
            degenerate_rows.push(false);
        } else {
            degenerate_rows.push(true);
        }
        rows.push(res);
    }

    Ok(IntegrationMatrix {
        stage: trace.stage,
        layers: trace.layers,
        rows,
        degenerate_rows,
    })
}

/// CSV: `target_layer,source_layer,score`, target ascending then source
/// ascending, layers numbered from 1. Scores keep full f64 round-trip
/// precision.
pub fn heatmap_csv(matrix: &IntegrationMatrix) -> String {
    let mut out = String::from("target_layer,source_layer,score\n");
    for (k, row) in matrix.rows.iter().enumerate() {
        let target = k + 2;
        for (s, score) in row.iter().enumerate() {
            writeln!(out, "{},{},{}", target, s + 1, score).unwrap();
        }
    }
    out
}

pub fn emit_heatmap_csv(matrix: &IntegrationMatrix, path: &Path) -> Result<()> {
    std::fs::write(path, heatmap_csv(matrix))?;
    Ok(())
}

/// Parses the heatmap CSV back into rows (used by round-trip checks).
pub fn parse_heatmap_csv(text: &str) -> Result<Vec<Vec<f64>>> {
    let mut lines = text.lines();
    match lines.next() {
        Some("target_layer,source_layer,score") => {}
        other => {
            return Err(Error::Format(format!("bad heatmap header: {:?}", other)));
        }
    }
    let mut rows: Vec<Vec<f64>> = Vec::new();
    for line in lines {
        if line.is_empty() {
            continue;
        }
        let mut parts = line.split(',');
        let (t, s, v) = (
            parts.next().ok_or_else(|| Error::Format("missing target".into()))?,
            parts.next().ok_or_else(|| Error::Format("missing source".into()))?,
            parts.next().ok_or_else(|| Error::Format("missing score".into()))?,
        );
        let t: usize = t.parse().map_err(|_| Error::Format(format!("bad target '{t}'")))?;
        let s: usize = s.parse().map_err(|_| Error::Format(format!("bad source '{s}'")))?;
        let v: f64 = v.parse().map_err(|_| Error::Format(format!("bad score '{v}'")))?;
        if t < 2 || s < 1 || s >= t {
            return Err(Error::Format(format!("bad row indices {t},{s}")));
        }
        while rows.len() < t - 1 {
            rows.push(Vec::new());
        }
        let row = &mut rows[t - 2];
        if row.len() != s - 1 {
            return Err(Error::Format(format!("out-of-order row {t},{s}")));
        }
        row.push(v);
    }
    Ok(rows)
}

/// Persists a trace in the checkpoint container (`trace.stage<N>` entry).
pub fn write_trace_file(path: &Path, trace: &HiddenStateTrace) -> Result<()> {
    checkpoint::write_entries(
        path,
        &[(
            format!("trace.stage{}", trace.stage + 1),
            vec![trace.batch, trace.channels, trace.layers],
            trace.values.clone(),
        )],
    )
}

pub fn read_trace_file(path: &Path) -> Result<HiddenStateTrace> {
    let entries = checkpoint::read_entries(path)?;
    let (id, shape, values) = entries
        .into_iter()
        .find(|(id, _, _)| id.starts_with("trace.stage"))
        .ok_or_else(|| Error::Format("no trace entry in file".into()))?;
    if shape.len() != 3 {
        return Err(Error::Format(format!("trace '{id}' has rank {}", shape.len())));
    }
    let stage: usize = id["trace.stage".len()..]
        .parse::<usize>()
        .map_err(|_| Error::Format(format!("bad trace id '{id}'")))?
        .saturating_sub(1);
    Ok(HiddenStateTrace {
        stage,
        batch: shape[0],
        channels: shape[1],
        layers: shape[2],
        values,
    })
}
