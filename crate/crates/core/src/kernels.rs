use crate::counters;

/// Inner product accumulated in f64.
#[inline]
pub(crate) fn dot(a: &[f32], b: &[f32]) -> f64 {
    counters::count_vector_op();
    debug_assert_eq!(a.len(), b.len());
    a.iter().zip(b).map(|(&x, &y)| x as f64 * y as f64).sum()
}

/// Squared Euclidean distance accumulated in f64.
#[inline]
pub(crate) fn sq_dist(a: &[f32], b: &[f32]) -> f64 {
    counters::count_vector_op();
    debug_assert_eq!(a.len(), b.len());
    a.iter()
        .zip(b)
        .map(|(&x, &y)| {
            let t = x as f64 - y as f64;
            t * t
        })
        .sum()
}

#[inline]
pub(crate) fn sq_norm(a: &[f32]) -> f64 {
    counters::count_vector_op();
    a.iter().map(|&x| x as f64 * x as f64).sum()
}

/// Squared distance in plain f32, used where many points are ranked and an
/// exact f64 value is not needed (k-means assignment, brute-force k-NN).
#[inline]
pub(crate) fn sq_dist_f32(a: &[f32], b: &[f32]) -> f32 {
    debug_assert_eq!(a.len(), b.len());
    let mut acc = 0.0f32;
    for (&x, &y) in a.iter().zip(b) {
        let t = x - y;
        acc += t * t;
    }
    acc
}
