use super::config::PosEncoding;
use super::tensor::{DType, Tensor};
use super::EngineError;

/// Inputs to [`positional_encode`] besides the scheme and positions.
#[derive(Debug, Clone, Copy)]
pub struct PositionalParams<'a> {
    /// Embedding width for absolute schemes.
    pub width: usize,
    /// Learned table `[max_positions, width]`.
    pub table: Option<&'a Tensor>,
    /// Linearly interpolate learned rows instead of rejecting positions
    /// past the table.
    pub interpolate: bool,
}

#[derive(Debug, Clone, PartialEq)]
pub enum PositionalOutput {
    Nothing,
    /// `[positions.len(), width]`.
    Embeddings(Tensor),
    /// `buckets[i][j]` for query position `i` and key position `j`.
    Buckets(Vec<Vec<usize>>),
}

/// Standard sin/cos rows: `PE[p, 2i] = sin(p / 10000^(2i/d))`,
/// `PE[p, 2i+1] = cos(p / 10000^(2i/d))`.
pub fn sinusoidal_table(positions: &[usize], width: usize) -> Tensor {
    let mut data = Vec::with_capacity(positions.len() * width);
    for &p in positions {
        for c in 0..width {
            let pair = (c / 2) * 2;
            let angle = p as f64 / 10000f64.powf(pair as f64 / width as f64);
            data.push(if c % 2 == 0 { angle.sin() } else { angle.cos() });
        }
    }
    Tensor::from_parts(vec![positions.len(), width], DType::F64Sim, data)
}

pub fn positional_encode(
    scheme: PosEncoding,
    positions: &[usize],
    params: PositionalParams<'_>,
) -> Result<PositionalOutput, EngineError> {
    match scheme {
        PosEncoding::Disabled => Ok(PositionalOutput::Nothing),
        PosEncoding::SinusoidalAbsolute => Ok(PositionalOutput::Embeddings(sinusoidal_table(
            positions,
            params.width,
        ))),
        PosEncoding::LearnedAbsolute { max_positions } => {
            let table = params.table.ok_or_else(|| {
                EngineError::InvalidConfig("learned positions need a table".into())
            })?;
            if table.rank() != 2 || table.shape()[0] != max_positions {
                return Err(EngineError::ShapeMismatch {
                    left: table.shape().to_vec(),
                    right: vec![max_positions, params.width],
                });
            }
            learned_lookup(table, positions, params.interpolate).map(PositionalOutput::Embeddings)
        }
        PosEncoding::RelativeBucketed {
            num_buckets,
            max_distance,
        } => Ok(PositionalOutput::Buckets(
            positions
                .iter()
                .map(|&i| {
                    positions
                        .iter()
                        .map(|&j| relative_bucket(i, j, num_buckets, max_distance))
                        .collect()
                })
                .collect(),
        )),
    }
}

fn learned_lookup(table: &Tensor, positions: &[usize], interpolate: bool) -> Result<Tensor, EngineError> {
    let (rows, width) = (table.shape()[0], table.shape()[1]);
    let max = positions.iter().copied().max().unwrap_or(0);
    let row = |r: usize| &table.data()[r * width..(r + 1) * width];
    let mut data = Vec::with_capacity(positions.len() * width);
    if max < rows {
        for &p in positions {
            data.extend_from_slice(row(p));
        }
    } else if interpolate {
        // Squeeze [0, max] onto [0, rows - 1].
        let scale = (rows - 1) as f64 / max as f64;
        for &p in positions {
            let x = p as f64 * scale;
            let lo = x.floor() as usize;
            let hi = (lo + 1).min(rows - 1);
            let f = x - lo as f64;
            data.extend(row(lo).iter().zip(row(hi)).map(|(a, b)| a + f * (b - a)));
        }
    } else {
        return Err(EngineError::PositionOutOfRange {
            max_index: max,
            table_size: rows,
        });
    }
    Ok(Tensor::from_parts(
        vec![positions.len(), width],
        table.dtype(),
        data,
    ))
}

/// Bidirectional log bucketing of the distance `j - i`.
///
/// Each direction owns `num_buckets / 2` buckets; the first half of those
/// hold exact distances, the rest are log-spaced up to `max_distance` and
/// clamped past it. Keys after the query use the upper half.
pub fn relative_bucket(i: usize, j: usize, num_buckets: usize, max_distance: usize) -> usize {
    let d = j as i64 - i as i64;
    let half = (num_buckets / 2).max(1);
    let offset = if d > 0 { half } else { 0 };
    let n = d.unsigned_abs() as usize;
    let max_exact = half / 2;
    let inner = if n < max_exact {
        n
    } else if max_exact == 0 || max_distance <= max_exact {
        half - 1
    } else {
        let ratio = (n as f64 / max_exact as f64).ln() / (max_distance as f64 / max_exact as f64).ln();
        let large = max_exact + (ratio * (half - max_exact) as f64) as usize;
        large.min(half - 1)
    };
    offset + inner
}
