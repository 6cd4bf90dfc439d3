//! Per-user representations from the three sides of the adapter, for
//! distribution plots.

use std::fmt;
use std::path::Path;

use crate::autodiff::Tape;
use crate::dataset::EvalCase;
use crate::error::Result;
use crate::stack::ModelStack;
use crate::tensor::Tensor;

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum EmbeddingSource {
    /// Projected ID user vector, averaged over layers.
    IdBase,
    /// Refined prefix rows, averaged over layers and tokens.
    Adapter,
    /// Clean backbone states entering each layer, averaged over layers and
    /// tokens.
    Llm,
}

impl fmt::Display for EmbeddingSource {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            EmbeddingSource::IdBase => "id_base",
            EmbeddingSource::Adapter => "adapter",
            EmbeddingSource::Llm => "llm",
        })
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct EmbeddingRow {
    pub source: EmbeddingSource,
    pub user_id: usize,
    pub values: Vec<f64>,
}

fn mean_rows(ts: &[Tensor]) -> Vec<f64> {
    let cols = ts[0].cols();
    let mut acc = vec![0.0; cols];
    let mut n = 0usize;
    for t in ts {
        for r in 0..t.rows() {
            for (a, v) in acc.iter_mut().zip(t.row_slice(r)) {
                *a += v;
            }
            n += 1;
        }
    }
    acc.iter().map(|a| a / n as f64).collect()
}

/// Three rows per case, in source order id_base, adapter, llm.
pub fn user_embeddings(stack: &ModelStack, cases: &[EvalCase]) -> Result<Vec<EmbeddingRow>> {
    let mut rows = Vec::with_capacity(3 * cases.len());
    for case in cases {
        let ex = stack.prepare(case, true)?;
        let mut tape = Tape::new();
        let u = tape.constant(ex.user.clone());
        let refined = stack.adapter.build_prefixes(&mut tape, &stack.store, u)?;
        let values = |vars: &[crate::autodiff::Var]| {
            vars.iter()
                .map(|&v| tape.value(v).clone())
                .collect::<Vec<_>>()
        };
        let sides = [
            (
                EmbeddingSource::IdBase,
                mean_rows(&values(&refined.projections)),
            ),
            (
                EmbeddingSource::Adapter,
                mean_rows(&values(&refined.prefixes)),
            ),
            (
                EmbeddingSource::Llm,
                mean_rows(ex.clean.as_deref().unwrap_or_default()),
            ),
        ];
        for (source, values) in sides {
            rows.push(EmbeddingRow {
                source,
                user_id: case.user_id,
                values,
            });
        }
    }
    Ok(rows)
}

/// Writes `source,user_id,dim_0..dim_{d′−1}` rows.
pub fn dump_embeddings(
    stack: &ModelStack,
    cases: &[EvalCase],
    path: impl AsRef<Path>,
) -> Result<usize> {
    let rows = user_embeddings(stack, cases)?;
    let mut w = csv::Writer::from_path(path)?;
    let mut header = vec!["source".to_string(), "user_id".to_string()];
    header.extend((0..stack.backbone.d_model()).map(|i| format!("dim_{i}")));
    w.write_record(&header)?;
    for r in &rows {
        let mut rec = vec![r.source.to_string(), r.user_id.to_string()];
        rec.extend(r.values.iter().map(|v| v.to_string()));
        w.write_record(&rec)?;
    }
    w.flush()?;
    Ok(rows.len())
}
