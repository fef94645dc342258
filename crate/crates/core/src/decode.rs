//! Best-path decoding and character error rate.

use crate::ctc::{collapse, LabelSequence};
use crate::error::{Error, Result};
use crate::numerics::{argmax, Matrix};

#[derive(Clone, Debug, PartialEq)]
pub struct DecodeResult {
    pub hypothesis: LabelSequence,
    pub alignment: Vec<usize>,
    pub score: f64,
}

/// Per-frame argmax (ties to the lowest class) followed by the collapse map.
/// `scores` may be posteriors, log-posteriors or pseudo log-likelihoods.
pub fn best_path_decode(scores: &Matrix) -> Result<DecodeResult> {
    if scores.rows() == 0 || scores.cols() == 0 {
        return Err(Error::Empty("score matrix"));
    }
    let alignment: Vec<usize> = scores.row_iter().map(argmax).collect();
    let score = alignment
        .iter()
        .enumerate()
        .map(|(t, &k)| scores.get(t, k))
        .sum();
    Ok(DecodeResult {
        hypothesis: collapse(&alignment),
        alignment,
        score,
    })
}

/// Levenshtein distance with unit costs.
pub fn edit_distance<T: PartialEq>(a: &[T], b: &[T]) -> usize {
    if a.is_empty() {
        return b.len();
    }
    let mut prev: Vec<usize> = (0..=b.len()).collect();
    let mut cur = vec![0; b.len() + 1];
    for (i, x) in a.iter().enumerate() {
        cur[0] = i + 1;
        for (j, y) in b.iter().enumerate() {
            let sub = prev[j] + usize::from(x != y);
            cur[j + 1] = sub.min(prev[j + 1] + 1).min(cur[j] + 1);
        }
        std::mem::swap(&mut prev, &mut cur);
    }
    prev[b.len()]
}

/// Corpus-level CER in percent: total edits over total reference length.
pub fn cer(hypotheses: &[LabelSequence], references: &[LabelSequence]) -> Result<f64> {
    if hypotheses.len() != references.len() {
        return Err(Error::DimensionMismatch {
            context: "cer (hypothesis count)",
            expected: references.len(),
            found: hypotheses.len(),
        });
    }
    let total: usize = references.iter().map(LabelSequence::len).sum();
    if total == 0 {
        return Err(Error::Empty("reference transcripts"));
    }
    let edits: usize = hypotheses
        .iter()
        .zip(references)
        .map(|(h, r)| edit_distance(h.as_slice(), r.as_slice()))
        .sum();
    Ok(100.0 * edits as f64 / total as f64)
}

/// One decode output line: `<id>\t<hypothesis>\t<score>`.
pub fn format_decode_line(id: &str, hypothesis: &str, score: f64) -> String {
    format!("{id}\t{hypothesis}\t{score:.6}")
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::ctc::{Alphabet, BLANK};
    use crate::numerics::Rng;

    fn labels(text: &str) -> LabelSequence {
        Alphabet::default().encode(text).unwrap()
    }

    fn one_hot(path: &[usize], classes: usize) -> Matrix {
        let mut m = Matrix::zeros(path.len(), classes);
        for (t, &k) in path.iter().enumerate() {
            m.set(t, k, 1.0);
        }
        m
    }

    #[test]
    fn decodes_alignment_example() {
        let a = Alphabet::default();
        let (am, mm) = (a.index_of('A').unwrap(), a.index_of('M').unwrap());
        let res = best_path_decode(&one_hot(&[am, BLANK, BLANK, mm, BLANK], 28)).unwrap();
        assert_eq!(a.decode(&res.hypothesis), "AM");
        assert_eq!(res.score, 5.0);
        assert_eq!(res.hypothesis, collapse(&res.alignment));
    }

    #[test]
    fn all_blank_is_empty() {
        let res = best_path_decode(&one_hot(&[0, 0, 0, 0], 5)).unwrap();
        assert!(res.hypothesis.is_empty());
    }

    #[test]
    fn agrees_with_exhaustive_search() {
        let mut rng = Rng::new(5);
        for _ in 0..30 {
            let frames = rng.int_inclusive(1, 6);
            let classes = 3;
            let scores = Matrix::random_uniform(frames, classes, -3.0, 0.0, &mut rng);
            let res = best_path_decode(&scores).unwrap();
            let mut best = f64::NEG_INFINITY;
            let mut path = vec![0; frames];
            for code in 0..classes.pow(frames as u32) {
                let mut c = code;
                for slot in path.iter_mut() {
                    *slot = c % classes;
                    c /= classes;
                }
                let s: f64 = path.iter().enumerate().map(|(t, &k)| scores.get(t, k)).sum();
                best = best.max(s);
            }
            assert!((res.score - best).abs() < 1e-12);
        }
    }

    #[test]
    fn shift_per_frame_is_invariant() {
        let mut rng = Rng::new(6);
        let scores = Matrix::random_uniform(12, 6, -2.0, 2.0, &mut rng);
        let mut shifted = scores.clone();
        for t in 0..12 {
            let c = rng.uniform(-10.0, 10.0);
            shifted.row_mut(t).iter_mut().for_each(|v| *v += c);
        }
        assert_eq!(
            best_path_decode(&scores).unwrap().hypothesis,
            best_path_decode(&shifted).unwrap().hypothesis
        );
    }

    #[test]
    fn edit_distance_cases() {
        assert_eq!(edit_distance(b"PLACE", b"PLACE"), 0);
        assert_eq!(edit_distance(b"AM", b""), 2);
        assert_eq!(edit_distance(b"", b"AM"), 2);
        assert_eq!(edit_distance(b"PLACE", b"PLANE"), 1);
        assert_eq!(edit_distance(b"KITTEN", b"SITTING"), 3);
    }

    #[test]
    fn cer_cases() {
        assert_eq!(cer(&[labels("AM")], &[labels("AM")]).unwrap(), 0.0);
        assert_eq!(cer(&[labels("AX")], &[labels("AM")]).unwrap(), 50.0);
        assert!(cer(&[labels("A")], &[labels("")]).is_err());
        assert!(cer(&[], &[labels("A")]).is_err());
    }

    #[test]
    fn cer_is_length_weighted_mean() {
        let refs = [labels("PLACE RED"), labels("BIN"), labels("SET WHITE AT")];
        let hyps = [labels("PLACE BED"), labels("BN"), labels("SET WHITE IT")];
        let corpus = cer(&hyps, &refs).unwrap();
        let total: usize = refs.iter().map(LabelSequence::len).sum();
        let weighted: f64 = hyps
            .iter()
            .zip(&refs)
            .map(|(h, r)| cer(&[h.clone()], &[r.clone()]).unwrap() * r.len() as f64 / total as f64)
            .sum();
        assert!((corpus - weighted).abs() < 1e-12);
    }

    mod props {
        use super::*;
        use proptest::prelude::*;

        fn seq() -> impl Strategy<Value = Vec<u8>> {
            prop::collection::vec(0u8..4, 0..10)
        }

        proptest! {
            #[test]
            fn edit_distance_is_a_metric(a in seq(), b in seq(), c in seq()) {
                prop_assert_eq!(edit_distance(&a, &b), edit_distance(&b, &a));
                prop_assert_eq!(edit_distance(&a, &b) == 0, a == b);
                prop_assert!(edit_distance(&a, &c) <= edit_distance(&a, &b) + edit_distance(&b, &c));
            }

            #[test]
            fn cer_zero_iff_exact(a in prop::collection::vec(1usize..5, 1..8), b in prop::collection::vec(1usize..5, 0..8)) {
                let r = LabelSequence::new(a).unwrap();
                let h = LabelSequence::new(b).unwrap();
                let v = cer(&[h.clone()], &[r.clone()]).unwrap();
                prop_assert!(v >= 0.0);
                prop_assert_eq!(v == 0.0, h == r);
            }
        }
    }
}
