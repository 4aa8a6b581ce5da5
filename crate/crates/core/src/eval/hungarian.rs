use serde::Serialize;

use crate::error::{Error, Result};

/// Optimal one-to-one assignment between rows and columns.
#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct Assignment {
    /// Column matched to each row; `None` for unmatched rows of a tall matrix.
    pub row_to_col: Vec<Option<usize>>,
    pub score: f64,
}

/// Maximum-score assignment over `min(R, C)` pairs of a row-major `R x C`
/// matrix, by shortest augmenting paths with dual potentials (`O(n^2 m)`).
pub fn hungarian(score: &[f64], rows: usize, cols: usize) -> Result<Assignment> {
    if rows == 0 || cols == 0 {
        return Err(Error::Degenerate("empty score matrix".into()));
    }
    if score.len() != rows * cols {
        return Err(Error::dim("hungarian", &[rows, cols], &[score.len()]));
    }
    if score.iter().any(|v| !v.is_finite()) {
        return Err(Error::Numeric("non-finite score".into()));
    }
    // Minimize negated scores with the shorter side as rows.
    let transposed = rows > cols;
    let (n, m) = if transposed {
        (cols, rows)
    } else {
        (rows, cols)
    };
    let cost = |i: usize, j: usize| -> f64 {
        if transposed {
            -score[j * cols + i]
        } else {
            -score[i * cols + j]
        }
    };

    let inf = f64::INFINITY;
    let mut u = vec![0.0; n + 1];
    let mut v = vec![0.0; m + 1];
    let mut p = vec![0usize; m + 1];
    let mut way = vec![0usize; m + 1];
    for i in 1..=n {
        p[0] = i;
        let mut j0 = 0;
        let mut minv = vec![inf; m + 1];
        let mut used = vec![false; m + 1];
        loop {
            used[j0] = true;
            let i0 = p[j0];
            let mut delta = inf;
            let mut j1 = 0;
            for j in 1..=m {
                if used[j] {
                    continue;
                }
                let cur = cost(i0 - 1, j - 1) - u[i0] - v[j];
                if cur < minv[j] {
                    minv[j] = cur;
                    way[j] = j0;
                }
                if minv[j] < delta {
                    delta = minv[j];
                    j1 = j;
                }
            }
            for j in 0..=m {
                if used[j] {
                    u[p[j]] += delta;
                    v[j] -= delta;
                } else {
                    minv[j] -= delta;
                }
            }
            j0 = j1;
            if p[j0] == 0 {
                break;
            }
        }
        loop {
            let j1 = way[j0];
            p[j0] = p[j1];
            j0 = j1;
            if j0 == 0 {
                break;
            }
        }
    }

    let mut row_to_col = vec![None; rows];
    let mut total = 0.0;
    for j in 1..=m {
        if p[j] == 0 {
            continue;
        }
        let (r, c) = if transposed {
            (j - 1, p[j] - 1)
        } else {
            (p[j] - 1, j - 1)
        };
        row_to_col[r] = Some(c);
        total += score[r * cols + c];
    }
    Ok(Assignment {
        row_to_col,
        score: total,
    })
}
