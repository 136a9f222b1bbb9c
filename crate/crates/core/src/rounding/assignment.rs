//! Maximum-weight assignment of rows to distinct columns (Hungarian method).

/// Assigns every row to a distinct column maximizing the total score.
///
/// `score[r][c]` of `None` forbids the pair. Requires `rows <= cols`.
/// Returns the column of each row, or `None` when no complete assignment
/// avoids forbidden pairs.
pub fn max_weight_assignment(score: &[Vec<Option<f64>>]) -> Option<Vec<usize>> {
    let rows = score.len();
    if rows == 0 {
        return Some(Vec::new());
    }
    let cols = score[0].len();
    if rows > cols {
        return None;
    }
    let finite = score.iter().flatten().flatten().fold(0.0f64, |m, v| m.max(v.abs()));
    let forbidden = 1e3 * (1.0 + finite) * (rows as f64 + 1.0);
    let cost = |r: usize, c: usize| score[r][c].map_or(forbidden, |s| -s);

    // Potentials-based O(rows^2 cols) algorithm with 1-based sentinel index 0.
    let inf = f64::INFINITY;
    let mut u = vec![0.0; rows + 1];
    let mut v = vec![0.0; cols + 1];
    let mut owner = vec![0usize; cols + 1];
    let mut way = vec![0usize; cols + 1];
    for r in 1..=rows {
        owner[0] = r;
        let mut j0 = 0;
        let mut minv = vec![inf; cols + 1];
        let mut used = vec![false; cols + 1];
        loop {
            used[j0] = true;
            let i0 = owner[j0];
            let mut delta = inf;
            let mut j1 = 0;
            for j in 1..=cols {
                if !used[j] {
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
            }
            for j in 0..=cols {
                if used[j] {
                    u[owner[j]] += delta;
                    v[j] -= delta;
                } else {
                    minv[j] -= delta;
                }
            }
            j0 = j1;
            if owner[j0] == 0 {
                break;
            }
        }
        loop {
            let j1 = way[j0];
            owner[j0] = owner[j1];
            j0 = j1;
            if j0 == 0 {
                break;
            }
        }
    }
    let mut assign = vec![0usize; rows];
    for j in 1..=cols {
        if owner[j] > 0 {
            assign[owner[j] - 1] = j - 1;
        }
    }
    if assign.iter().enumerate().any(|(r, &c)| score[r][c].is_none()) {
        return None;
    }
    Some(assign)
}
