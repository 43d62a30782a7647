//! Connected-component labeling on boolean pixel masks.

use nalgebra::DMatrix;

/// 8-connected components of the `true` pixels, each as `(row, col)` list in
/// discovery order. Components are ordered by their first pixel in
/// column-major scan order.
pub(crate) fn connected_components(mask: &DMatrix<bool>) -> Vec<Vec<(usize, usize)>> {
    let (h, w) = mask.shape();
    let mut seen = DMatrix::from_element(h, w, false);
    let mut out = Vec::new();
    let mut stack = Vec::new();
    for c in 0..w {
        for r in 0..h {
            if !mask[(r, c)] || seen[(r, c)] {
                continue;
            }
            let mut comp = Vec::new();
            seen[(r, c)] = true;
            stack.push((r, c));
            while let Some((pr, pc)) = stack.pop() {
                comp.push((pr, pc));
                for dr in -1i64..=1 {
                    for dc in -1i64..=1 {
                        let nr = pr as i64 + dr;
                        let nc = pc as i64 + dc;
                        if nr < 0 || nc < 0 || nr >= h as i64 || nc >= w as i64 {
                            continue;
                        }
                        let (nr, nc) = (nr as usize, nc as usize);
                        if mask[(nr, nc)] && !seen[(nr, nc)] {
                            seen[(nr, nc)] = true;
                            stack.push((nr, nc));
                        }
                    }
                }
            }
            out.push(comp);
        }
    }
    out
}

/// Value at quantile `q` (nearest rank) of `values`.
pub(crate) fn quantile(values: &[f64], q: f64) -> f64 {
    let mut v = values.to_vec();
    v.sort_by(f64::total_cmp);
    let n = v.len();
    let idx = ((q.clamp(0.0, 1.0) * n as f64).ceil() as usize).clamp(1, n) - 1;
    v[idx]
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn diagonal_neighbors_join() {
        let mut m = DMatrix::from_element(4, 4, false);
        m[(0, 0)] = true;
        m[(1, 1)] = true;
        m[(3, 3)] = true;
        let comps = connected_components(&m);
        assert_eq!(comps.len(), 2);
        assert_eq!(comps[0].len(), 2);
    }

    #[test]
    fn quantile_nearest_rank() {
        let v: Vec<f64> = (1..=10).map(f64::from).collect();
        assert_eq!(quantile(&v, 0.5), 5.0);
        assert_eq!(quantile(&v, 1.0), 10.0);
        assert_eq!(quantile(&v, 0.0), 1.0);
    }
}
