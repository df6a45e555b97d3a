use std::collections::HashMap;

use serde::{Deserialize, Serialize};

use super::FusionError;

/// Denominator used to normalize mutual information.
#[derive(Debug, Clone, Copy, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum NmiNormalization {
    /// `(H(a) + H(b)) / 2`
    #[default]
    Arithmetic,
    /// `sqrt(H(a) H(b))`
    Geometric,
    Max,
    Min,
}

// Terms are summed in sorted order so the result is exactly invariant under swapping the
// arguments or relabeling clusters.
fn stable_sum(mut terms: Vec<f64>) -> f64 {
    terms.sort_by(f64::total_cmp);
    terms.into_iter().sum()
}

fn entropy(counts: &HashMap<usize, usize>, total: f64) -> f64 {
    let terms = counts
        .values()
        .filter(|&&c| c > 0)
        .map(|&c| {
            let p = c as f64 / total;
            -p * p.ln()
        })
        .collect();
    stable_sum(terms)
}

/// Normalized mutual information between two partitions of the same items (natural log).
/// Zero when either partition has zero entropy.
pub fn nmi(a: &[usize], b: &[usize], norm: NmiNormalization) -> Result<f64, FusionError> {
    if a.len() != b.len() {
        return Err(FusionError::LengthMismatch(a.len(), b.len()));
    }
    if a.is_empty() {
        return Ok(0.0);
    }
    let total = a.len() as f64;
    let mut ca: HashMap<usize, usize> = HashMap::new();
    let mut cb: HashMap<usize, usize> = HashMap::new();
    let mut joint: HashMap<(usize, usize), usize> = HashMap::new();
    for (&x, &y) in a.iter().zip(b) {
        *ca.entry(x).or_default() += 1;
        *cb.entry(y).or_default() += 1;
        *joint.entry((x, y)).or_default() += 1;
    }
    let ha = entropy(&ca, total);
    let hb = entropy(&cb, total);
    if ha <= 0.0 || hb <= 0.0 {
        return Ok(0.0);
    }
    let terms = joint
        .iter()
        .map(|(&(x, y), &c)| {
            let c = c as f64;
            let outer = ca[&x] as f64 * cb[&y] as f64;
            c / total * (total * c / outer).ln()
        })
        .collect();
    let mi = stable_sum(terms).max(0.0);
    let denom = match norm {
        NmiNormalization::Arithmetic => (ha + hb) / 2.0,
        NmiNormalization::Geometric => (ha * hb).sqrt(),
        NmiNormalization::Max => ha.max(hb),
        NmiNormalization::Min => ha.min(hb),
    };
    Ok((mi / denom).clamp(0.0, 1.0))
}

#[cfg(test)]
mod tests {
    use super::*;

    const AR: NmiNormalization = NmiNormalization::Arithmetic;

    #[test]
    fn identical_partitions() {
        let a = [0, 0, 1, 1, 1];
        assert!((nmi(&a, &a, AR).unwrap() - 1.0).abs() < 1e-12);
    }

    #[test]
    fn constant_partition_gives_zero() {
        assert_eq!(nmi(&[0, 1, 0, 1], &[3, 3, 3, 3], AR).unwrap(), 0.0);
    }

    #[test]
    fn length_mismatch() {
        assert!(matches!(nmi(&[0, 1], &[0], AR), Err(FusionError::LengthMismatch(2, 1))));
    }

    #[test]
    fn known_value() {
        // a = [0,0,1,1], b = [0,1,1,1]: I = 1.5 ln 2 - (3/4) ln 3 + ..., computed by hand:
        // H(a) = ln 2, H(b) = -(1/4 ln 1/4 + 3/4 ln 3/4)
        let ha = 2f64.ln();
        let hb = -(0.25 * 0.25f64.ln() + 0.75 * 0.75f64.ln());
        // cells: (0,0)=1, (0,1)=1, (1,1)=2
        let i = 0.25 * (4.0f64 * 1.0 / (2.0 * 1.0)).ln()
            + 0.25 * (4.0f64 * 1.0 / (2.0 * 3.0)).ln()
            + 0.5 * (4.0f64 * 2.0 / (2.0 * 3.0)).ln();
        let want = i / ((ha + hb) / 2.0);
        assert!((nmi(&[0, 0, 1, 1], &[0, 1, 1, 1], AR).unwrap() - want).abs() < 1e-12);
    }
}
