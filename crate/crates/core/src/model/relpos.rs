//! Relative-position bucketing.

/// Bucket for `rel = key_pos - query_pos`.
///
/// Bidirectional: half the buckets for keys at or before the query, half
/// for keys after it. Within each half, the first `half/2` distances get
/// their own bucket and larger ones share logarithmically wider buckets up
/// to `max_distance`. Unidirectional: keys after the query fold into bucket 0.
pub fn bucket(rel: i64, bidirectional: bool, num_buckets: usize, max_distance: usize) -> usize {
    let mut nb = num_buckets;
    let mut ret = 0;
    let mut n = -rel;
    if bidirectional {
        nb /= 2;
        if n < 0 {
            ret += nb;
        }
        n = n.abs();
    } else {
        n = n.max(0);
    }
    let n = n as usize;
    let max_exact = (nb / 2).max(1);
    if n < max_exact {
        return ret + n;
    }
    let scaled = (n as f64 / max_exact as f64).ln() / (max_distance as f64 / max_exact as f64).ln();
    let v = max_exact + (scaled * (nb - max_exact) as f64) as usize;
    ret + v.min(nb - 1)
}
