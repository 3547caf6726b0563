use crate::error::{Result, SvtrError};

/// Numpy-style broadcast of two shapes, aligned on trailing dimensions.
pub(crate) fn broadcast_shapes(op: &'static str, a: &[usize], b: &[usize]) -> Result<Vec<usize>> {
    let rank = a.len().max(b.len());
    let mut out = vec![0; rank];
    for i in 0..rank {
        let da = dim_from_right(a, rank - 1 - i);
        let db = dim_from_right(b, rank - 1 - i);
        out[i] = match (da, db) {
            (x, y) if x == y => x,
            (1, y) => y,
            (x, 1) => x,
            _ => {
                return Err(SvtrError::Dimension {
                    op,
                    lhs: a.to_vec(),
                    rhs: b.to_vec(),
                })
            }
        };
    }
    Ok(out)
}

fn dim_from_right(shape: &[usize], from_right: usize) -> usize {
    if from_right < shape.len() {
        shape[shape.len() - 1 - from_right]
    } else {
        1
    }
}

/// How each flat index of a broadcast output maps back to an input.
#[derive(Clone, Debug)]
pub(crate) enum IndexMap {
    /// Input has the output's shape.
    Identity,
    /// Input equals the trailing dimensions of the output: `i % len`.
    Suffix(usize),
    /// General case, one source index per output element.
    Table(Vec<usize>),
}

impl IndexMap {
    pub(crate) fn build(input: &[usize], out: &[usize]) -> Self {
        if input == out {
            return IndexMap::Identity;
        }
        let trimmed: Vec<usize> = {
            let lead = input.iter().take_while(|&&d| d == 1).count();
            input[lead..].to_vec()
        };
        if !trimmed.is_empty()
            && trimmed.len() <= out.len()
            && out[out.len() - trimmed.len()..] == trimmed[..]
        {
            return IndexMap::Suffix(trimmed.iter().product());
        }
        let rank = out.len();
        let padded: Vec<usize> = (0..rank).map(|i| dim_from_right(input, rank - 1 - i)).collect();
        let mut in_strides = vec![0; rank];
        let mut s = 1;
        for d in (0..rank).rev() {
            in_strides[d] = if padded[d] == 1 { 0 } else { s };
            s *= padded[d];
        }
        let total: usize = out.iter().product();
        let mut table = Vec::with_capacity(total);
        let mut coord = vec![0usize; rank];
        for _ in 0..total {
            table.push(coord.iter().zip(&in_strides).map(|(c, s)| c * s).sum());
            for d in (0..rank).rev() {
                coord[d] += 1;
                if coord[d] < out[d] {
                    break;
                }
                coord[d] = 0;
            }
        }
        IndexMap::Table(table)
    }

    #[inline]
    pub(crate) fn src(&self, i: usize) -> usize {
        match self {
            IndexMap::Identity => i,
            IndexMap::Suffix(len) => i % len,
            IndexMap::Table(t) => t[i],
        }
    }
}

/// Sums an output-shaped gradient back onto an input of `input_len`
/// elements, in output order.
pub(crate) fn reduce_to_input(grad: &[f64], map: &IndexMap, input_len: usize) -> Vec<f64> {
    if let IndexMap::Identity = map {
        return grad.to_vec();
    }
    let mut acc = vec![0.0; input_len];
    for (i, g) in grad.iter().enumerate() {
        acc[map.src(i)] += g;
    }
    acc
}
