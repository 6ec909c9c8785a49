//! Pareto frontier of (size, perplexity) points.

use super::eval::EvalPoint;

/// Indices of the points no other point beats with both a strictly smaller
/// size and a strictly lower perplexity, ordered by size, then perplexity,
/// then input position.
pub fn pareto_indices(points: &[(u64, f64)]) -> Vec<usize> {
    let mut order: Vec<usize> = (0..points.len()).collect();
    order.sort_by(|&a, &b| {
        points[a]
            .0
            .cmp(&points[b].0)
            .then(points[a].1.total_cmp(&points[b].1))
            .then(a.cmp(&b))
    });
    let mut keep = Vec::new();
    // lowest perplexity among strictly smaller sizes
    let mut best_smaller = f64::INFINITY;
    let mut i = 0;
    while i < order.len() {
        let size = points[order[i]].0;
        let mut j = i;
        let mut best_here = f64::INFINITY;
        while j < order.len() && points[order[j]].0 == size {
            let ppl = points[order[j]].1;
            if !(best_smaller < ppl) {
                keep.push(order[j]);
            }
            best_here = best_here.min(ppl);
            j += 1;
        }
        best_smaller = best_smaller.min(best_here);
        i = j;
    }
    keep
}

pub fn pareto_frontier(points: &[EvalPoint]) -> Vec<EvalPoint> {
    let coords: Vec<(u64, f64)> = points.iter().map(|p| (p.size_bits, p.ppl)).collect();
    pareto_indices(&coords).into_iter().map(|i| points[i].clone()).collect()
}
