//! Positional encodings over the 2-D token grid.
//!
//! Tokens are laid out row-major: token `n` sits at row `n / grid`, column
//! `n % grid`. Half of each encoding follows the row index, half the column.

const BASE: f64 = 10_000.0;

fn row_col(n: usize, grid: usize) -> (f64, f64) {
    ((n / grid) as f64, (n % grid) as f64)
}

/// Additive absolute encoding, `grid² × hidden`, row-major.
///
/// Each half is `[sin(p·ω_k), cos(p·ω_k)]` for `k < hidden/4`,
/// `ω_k = BASE^(-k / (hidden/4))`.
pub fn sinusoidal_2d(grid: usize, hidden: usize) -> Vec<f64> {
    assert!(hidden % 4 == 0, "hidden size must be a multiple of 4");
    let quarter = hidden / 4;
    let mut out = Vec::with_capacity(grid * grid * hidden);
    for n in 0..grid * grid {
        let (row, col) = row_col(n, grid);
        for pos in [row, col] {
            for k in 0..quarter {
                out.push((pos * BASE.powf(-(k as f64) / quarter as f64)).sin());
            }
            for k in 0..quarter {
                out.push((pos * BASE.powf(-(k as f64) / quarter as f64)).cos());
            }
        }
    }
    out
}

/// Rotary tables `(cos, sin)`, each `grid² × head_dim`, for the rotate-half
/// convention: component `j` is paired with `j + head_dim/2` and both rotate
/// by the same angle. The first quarter of angles follows the row index, the
/// second the column.
pub fn rotary_2d(grid: usize, head_dim: usize) -> (Vec<f64>, Vec<f64>) {
    assert!(head_dim % 4 == 0, "head dim must be a multiple of 4");
    let half = head_dim / 2;
    let quarter = head_dim / 4;
    let mut cos = Vec::with_capacity(grid * grid * head_dim);
    let mut sin = Vec::with_capacity(grid * grid * head_dim);
    for n in 0..grid * grid {
        let (row, col) = row_col(n, grid);
        let angles: Vec<f64> = (0..half)
            .map(|j| {
                let pos = if j < quarter { row } else { col };
                let k = (j % quarter) as f64;
                pos * BASE.powf(-k / quarter as f64)
            })
            .collect();
        for _ in 0..2 {
            cos.extend(angles.iter().map(|a| a.cos()));
            sin.extend(angles.iter().map(|a| a.sin()));
        }
    }
    (cos, sin)
}

/// Rotate-half rotary application on one head vector (reference path).
pub fn apply_rotary(x: &[f64], cos: &[f64], sin: &[f64]) -> Vec<f64> {
    let half = x.len() / 2;
    (0..x.len())
        .map(|j| {
            let rotated = if j < half { -x[j + half] } else { x[j - half] };
            x[j] * cos[j] + rotated * sin[j]
        })
        .collect()
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::geometry::norm;

    #[test]
    fn sinusoidal_shape() {
        let t = sinusoidal_2d(16, 64);
        assert_eq!(t.len(), 256 * 64);
    }

    #[test]
    fn sinusoidal_rows_distinct_up_to_64x64() {
        let grid = 64;
        let hidden = 16;
        let t = sinusoidal_2d(grid, hidden);
        let rows: Vec<&[f64]> = t.chunks(hidden).collect();
        // exhaustive pairwise check
        for i in 0..rows.len() {
            for j in i + 1..rows.len() {
                let d: f64 = rows[i].iter().zip(rows[j]).map(|(a, b)| (a - b).abs()).sum();
                assert!(d > 1e-9, "rows {i} and {j} collide");
            }
        }
    }

    #[test]
    fn rotary_is_an_isometry() {
        let head_dim = 16;
        let (cos, sin) = rotary_2d(12, head_dim);
        let x: Vec<f64> = (0..head_dim).map(|i| (i as f64 * 1.3).sin() + 0.2).collect();
        for n in 0..144 {
            let r = &cos[n * head_dim..(n + 1) * head_dim];
            let s = &sin[n * head_dim..(n + 1) * head_dim];
            let y = apply_rotary(&x, r, s);
            assert!((norm(&y) - norm(&x)).abs() < 1e-5);
        }
    }

    #[test]
    fn rotary_origin_is_identity() {
        let (cos, sin) = rotary_2d(4, 8);
        let x: Vec<f64> = (0..8).map(|i| i as f64).collect();
        assert_eq!(apply_rotary(&x, &cos[..8], &sin[..8]), x);
    }
}
