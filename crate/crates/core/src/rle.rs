//! Run-length codecs.
//!
//! Masks are alternating `skip, take` counts over the row-major pixel order,
//! starting with a (possibly zero) skip. Label payloads are `[class, count]`
//! runs over a unit's mask pixels in mask order.

use serde::{Deserialize, Serialize};

/// Encodes sorted, distinct flat indices.
pub fn encode_indices(indices: &[usize]) -> Vec<u32> {
    let mut out = Vec::new();
    let mut cursor = 0usize;
    let mut k = 0;
    while k < indices.len() {
        let start = indices[k];
        let mut end = start + 1;
        k += 1;
        while k < indices.len() && indices[k] == end {
            end += 1;
            k += 1;
        }
        out.push((start - cursor) as u32);
        out.push((end - start) as u32);
        cursor = end;
    }
    out
}

pub fn decode_indices(counts: &[u32]) -> Vec<usize> {
    let mut out = Vec::new();
    let mut cursor = 0usize;
    for pair in counts.chunks(2) {
        cursor += pair[0] as usize;
        if let Some(&take) = pair.get(1) {
            out.extend(cursor..cursor + take as usize);
            cursor += take as usize;
        }
    }
    out
}

/// One run of a class code.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct LabelRun(pub u8, pub u32);

pub fn encode_labels(labels: &[u8]) -> Vec<LabelRun> {
    let mut runs: Vec<LabelRun> = Vec::new();
    for &l in labels {
        match runs.last_mut() {
            Some(LabelRun(c, n)) if *c == l => *n += 1,
            _ => runs.push(LabelRun(l, 1)),
        }
    }
    runs
}

pub fn decode_labels(runs: &[LabelRun]) -> Vec<u8> {
    runs.iter()
        .flat_map(|&LabelRun(c, n)| std::iter::repeat_n(c, n as usize))
        .collect()
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    #[test]
    fn skip_take_layout() {
        assert_eq!(encode_indices(&[2, 3, 4, 8]), vec![2, 3, 3, 1]);
        assert_eq!(encode_indices(&[0, 1]), vec![0, 2]);
        assert!(encode_indices(&[]).is_empty());
    }

    #[test]
    fn label_runs() {
        assert_eq!(encode_labels(&[1, 1, 1]), vec![LabelRun(1, 3)]);
        assert_eq!(
            serde_json::to_string(&encode_labels(&[0, 2, 2])).unwrap(),
            "[[0,1],[2,2]]"
        );
    }

    proptest! {
        #[test]
        fn indices_round_trip(mut v in proptest::collection::btree_set(0usize..500, 0..80)) {
            let v: Vec<usize> = std::mem::take(&mut v).into_iter().collect();
            prop_assert_eq!(decode_indices(&encode_indices(&v)), v);
        }

        #[test]
        fn labels_round_trip(v in proptest::collection::vec(0u8..4, 0..100)) {
            prop_assert_eq!(decode_labels(&encode_labels(&v)), v);
        }
    }
}
