use super::{QuadStore, Split};

/// Per-token information content over the combined vocabulary
/// `entities ++ relations ++ [mask]`.
#[derive(Clone, Debug, PartialEq)]
pub struct TokenEntropy {
    pub counts: Vec<u64>,
    pub entropy: Vec<f64>,
    pub total_positions: u64,
}

impl TokenEntropy {
    pub fn get(&self, token: usize) -> f64 {
        self.entropy[token]
    }

    pub fn len(&self) -> usize {
        self.entropy.len()
    }

    pub fn is_empty(&self) -> bool {
        self.entropy.is_empty()
    }
}

/// `H = −ln(count / total)`; zero counts are smoothed to a count of 1.
pub fn entropies_from_counts(counts: &[u64]) -> Vec<f64> {
    let total: u64 = counts.iter().sum();
    let total = total.max(1) as f64;
    counts.iter().map(|&c| -((c.max(1) as f64) / total).ln()).collect()
}

/// Frequencies are counted per position (subject, relation, and object of
/// every training quad).
pub fn token_entropies(store: &QuadStore) -> TokenEntropy {
    let n_e = store.num_entities();
    let mut counts = vec![0u64; n_e + store.num_relations() + 1];
    for q in store.split(Split::Train) {
        counts[q.s as usize] += 1;
        counts[n_e + q.r as usize] += 1;
        counts[q.o as usize] += 1;
    }
    let total_positions = counts.iter().sum();
    TokenEntropy { entropy: entropies_from_counts(&counts), counts, total_positions }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::corpus::{RawRow, SplitSpec};

    #[test]
    fn half_frequency_is_ln_two() {
        let h = entropies_from_counts(&[3, 1, 2]);
        assert!((h[0] - std::f64::consts::LN_2).abs() < 1e-12);
        assert_eq!(entropies_from_counts(&[5]), vec![0.0]);
        assert!(h[0] < h[2] && h[2] < h[1]);
    }

    #[test]
    fn counts_cover_three_positions() {
        let rows: Vec<RawRow> = [("a", "r", "b", "0"), ("a", "r", "c", "1"), ("b", "s", "a", "2"), ("c", "s", "c", "3")]
            .iter()
            .map(|&(s, r, o, t)| [s.into(), r.into(), o.into(), t.into()])
            .collect();
        let store = QuadStore::from_raw(&rows, SplitSpec::Given { train: 4, valid: 0 }).unwrap();
        let te = token_entropies(&store);
        assert_eq!(te.total_positions, 12);
        assert_eq!(te.counts.iter().sum::<u64>(), 12);
        let log_total = 12f64.ln();
        for (c, h) in te.counts.iter().zip(&te.entropy) {
            if *c > 0 {
                assert!(*h > 0.0 && *h < log_total);
            }
        }
        // mask slot never occurs and gets the smoothed value
        assert_eq!(*te.entropy.last().unwrap(), log_total);
    }
}
