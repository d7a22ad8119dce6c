//! Subject-disjoint dataset splits and balanced match/mismatch pair
//! generation.

use serde::{Deserialize, Serialize};

use super::MeshError;
use crate::rng::{derive_seed, SplitMix64};

/// Identifies one scan within a corpus.
#[derive(Debug, Clone, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub struct ScanRef {
    pub subject_id: String,
    pub scan_id: String,
}

/// A labeled verification pair: indices into the scan list handed to
/// [`make_pairs`], plus `genuine = true` for same-subject pairs.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct Pair {
    pub a: usize,
    pub b: usize,
    pub genuine: bool,
}

/// Subject-disjoint 70/15/15 split, rounding toward train.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct DatasetSplit {
    pub train: Vec<String>,
    pub val: Vec<String>,
    pub test: Vec<String>,
}

impl DatasetSplit {
    /// Shuffle subjects with a seeded stream and cut 70/15/15 by count.
    /// `floor` is applied to the val and test shares so rounding remainder
    /// lands in train.
    pub fn from_subjects(subjects: &[String], seed: u64) -> Self {
        let mut ids: Vec<String> = subjects.to_vec();
        ids.sort();
        ids.dedup();
        let mut rng = SplitMix64::new(derive_seed(seed, "dataset-split", &[]));
        rng.shuffle(&mut ids);
        let n = ids.len();
        let n_val = n * 15 / 100;
        let n_test = n * 15 / 100;
        let n_train = n - n_val - n_test;
        let train = ids[..n_train].to_vec();
        let val = ids[n_train..n_train + n_val].to_vec();
        let test = ids[n_train + n_val..].to_vec();
        DatasetSplit { train, val, test }
    }

    pub fn contains(&self, subject: &str) -> Option<&'static str> {
        if self.train.iter().any(|s| s == subject) {
            Some("train")
        } else if self.val.iter().any(|s| s == subject) {
            Some("val")
        } else if self.test.iter().any(|s| s == subject) {
            Some("test")
        } else {
            None
        }
    }
}

/// Generate balanced verification pairs for the scans whose subject is in
/// `subjects`.
///
/// Matches are all ordered same-subject pairs (`m * (m - 1)` per subject with
/// `m` scans). An equal number of mismatches is drawn by a seeded round-robin
/// over the other subjects in the split, cycling through their scans, so the
/// output is reproducible and exactly balanced.
pub fn make_pairs(
    scans: &[ScanRef],
    subjects: &[String],
    seed: u64,
) -> Result<Vec<Pair>, MeshError> {
    let mut subject_scans: Vec<(&String, Vec<usize>)> = Vec::new();
    for subject in subjects {
        let idxs: Vec<usize> = scans
            .iter()
            .enumerate()
            .filter(|(_, s)| &s.subject_id == subject)
            .map(|(i, _)| i)
            .collect();
        if !idxs.is_empty() {
            subject_scans.push((subject, idxs));
        }
    }
    if subject_scans.len() < 2 {
        return Err(MeshError::TooFewSubjects(subject_scans.len()));
    }

    let mut pairs = Vec::new();
    for (si, (_, own)) in subject_scans.iter().enumerate() {
        let others: Vec<usize> = (0..subject_scans.len()).filter(|&j| j != si).collect();
        let mut rng = SplitMix64::new(derive_seed(seed, "mismatch-pairs", &[si as u64]));
        let start = rng.next_index(others.len());
        let mut mismatch_slot = 0usize;
        for (i, &a) in own.iter().enumerate() {
            for (j, &b) in own.iter().enumerate() {
                if i == j {
                    continue;
                }
                pairs.push(Pair { a, b, genuine: true });
                // One mismatch per match keeps the sets balanced.
                let other = &subject_scans[others[(start + mismatch_slot) % others.len()]];
                let other_scan = other.1[(mismatch_slot / others.len()) % other.1.len()];
                pairs.push(Pair { a, b: other_scan, genuine: false });
                mismatch_slot += 1;
            }
        }
    }
    Ok(pairs)
}

#[cfg(test)]
mod tests {
    use super::*;

    fn scanset(spec: &[(&str, usize)]) -> Vec<ScanRef> {
        let mut out = Vec::new();
        for (subject, count) in spec {
            for i in 0..*count {
                out.push(ScanRef {
                    subject_id: subject.to_string(),
                    scan_id: format!("{i:02}"),
                });
            }
        }
        out
    }

    #[test]
    fn split_is_disjoint_and_sized() {
        let subjects: Vec<String> = (0..20).map(|i| format!("s{i:03}")).collect();
        let split = DatasetSplit::from_subjects(&subjects, 7);
        assert_eq!(split.val.len(), 3);
        assert_eq!(split.test.len(), 3);
        assert_eq!(split.train.len(), 14);
        let mut all: Vec<&String> =
            split.train.iter().chain(&split.val).chain(&split.test).collect();
        all.sort();
        all.dedup();
        assert_eq!(all.len(), 20);
    }

    #[test]
    fn split_is_deterministic() {
        let subjects: Vec<String> = (0..13).map(|i| format!("s{i:03}")).collect();
        assert_eq!(
            DatasetSplit::from_subjects(&subjects, 7),
            DatasetSplit::from_subjects(&subjects, 7)
        );
    }

    #[test]
    fn five_scans_give_twenty_match_pairs() {
        let scans = scanset(&[("a", 5), ("b", 3)]);
        let subjects = vec!["a".to_string(), "b".to_string()];
        let pairs = make_pairs(&scans, &subjects, 1).unwrap();
        let a_matches = pairs
            .iter()
            .filter(|p| p.genuine && scans[p.a].subject_id == "a")
            .count();
        assert_eq!(a_matches, 20);
        let matches = pairs.iter().filter(|p| p.genuine).count();
        let mismatches = pairs.iter().filter(|p| !p.genuine).count();
        assert_eq!(matches, mismatches);
    }

    #[test]
    fn two_by_two_enumeration() {
        let scans = scanset(&[("a", 2), ("b", 2)]);
        let subjects = vec!["a".to_string(), "b".to_string()];
        let pairs = make_pairs(&scans, &subjects, 3).unwrap();
        let matches: Vec<&Pair> = pairs.iter().filter(|p| p.genuine).collect();
        let mismatches: Vec<&Pair> = pairs.iter().filter(|p| !p.genuine).collect();
        assert_eq!(matches.len(), 4);
        assert_eq!(mismatches.len(), 4);
        for p in matches {
            assert_eq!(scans[p.a].subject_id, scans[p.b].subject_id);
            assert_ne!(p.a, p.b);
        }
        for p in mismatches {
            assert_ne!(scans[p.a].subject_id, scans[p.b].subject_id);
        }
    }

    #[test]
    fn single_subject_split_errors() {
        let scans = scanset(&[("a", 4)]);
        let subjects = vec!["a".to_string()];
        assert!(matches!(
            make_pairs(&scans, &subjects, 1),
            Err(MeshError::TooFewSubjects(1))
        ));
    }
}
