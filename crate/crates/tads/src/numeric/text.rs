//! Edit distance over Unicode scalar values.

/// Levenshtein distance (unit-cost insert/delete/substitute) between two
/// strings, computed per `char` with the classic two-row dynamic program.
pub fn levenshtein(a: &str, b: &str) -> usize {
    let a: Vec<char> = a.chars().collect();
    let b: Vec<char> = b.chars().collect();
    if a.is_empty() {
        return b.len();
    }
    if b.is_empty() {
        return a.len();
    }
    let mut prev: Vec<usize> = (0..=b.len()).collect();
    let mut curr = vec![0usize; b.len() + 1];
    for (i, ca) in a.iter().enumerate() {
        curr[0] = i + 1;
        for (j, cb) in b.iter().enumerate() {
            let sub = prev[j] + usize::from(ca != cb);
            curr[j + 1] = sub.min(prev[j + 1] + 1).min(curr[j] + 1);
        }
        std::mem::swap(&mut prev, &mut curr);
    }
    prev[b.len()]
}

/// `Some(distance)` when `levenshtein(a, b) < bound`, `None` otherwise.
/// Prunes with the length-difference lower bound and abandons a row once
/// every cell reaches `bound`; pairwise deduplication calls this in a hot
/// loop with small bounds.
pub fn levenshtein_below(a: &str, b: &str, bound: usize) -> Option<usize> {
    let a: Vec<char> = a.chars().collect();
    let b: Vec<char> = b.chars().collect();
    let diff = a.len().abs_diff(b.len());
    if diff >= bound {
        return None;
    }
    if a.is_empty() || b.is_empty() {
        // diff is the exact distance when one side is empty.
        return Some(diff);
    }
    let mut prev: Vec<usize> = (0..=b.len()).collect();
    let mut curr = vec![0usize; b.len() + 1];
    for (i, ca) in a.iter().enumerate() {
        curr[0] = i + 1;
        let mut row_min = curr[0];
        for (j, cb) in b.iter().enumerate() {
            let sub = prev[j] + usize::from(ca != cb);
            let cell = sub.min(prev[j + 1] + 1).min(curr[j] + 1);
            curr[j + 1] = cell;
            row_min = row_min.min(cell);
        }
        if row_min >= bound {
            return None;
        }
        std::mem::swap(&mut prev, &mut curr);
    }
    let d = prev[b.len()];
    (d < bound).then_some(d)
}
