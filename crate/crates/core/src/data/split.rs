use std::collections::BTreeMap;

use rand::seq::SliceRandom;

use super::{DatasetManifest, LabeledExample, Normalization, Split};
use crate::error::{Error, Result};
use crate::rng;

const TIE: f64 = 1e-9;

/// Per-split counts for a class of `n` examples by largest-remainder
/// rounding. Equal remainders go to the earlier split (train, then val,
/// then test).
pub(crate) fn allocate(n: usize, fractions: [f64; 3]) -> [usize; 3] {
    let quotas = fractions.map(|f| f * n as f64);
    let mut counts = quotas.map(|q| (q + TIE).floor() as usize);
    let mut left = n.saturating_sub(counts.iter().sum());
    let mut order = [0usize, 1, 2];
    let rem = |i: usize| quotas[i] - counts[i] as f64;
    order.sort_by(|&a, &b| {
        let (ra, rb) = (rem(a), rem(b));
        if (ra - rb).abs() <= TIE {
            a.cmp(&b)
        } else {
            rb.total_cmp(&ra)
        }
    });
    for &i in order.iter().cycle() {
        if left == 0 {
            break;
        }
        counts[i] += 1;
        left -= 1;
    }
    counts
}

/// Assigns every example to train/val/test so that each class is split in
/// the given proportions. Normalization statistics come from the training
/// split.
pub fn stratified_split(
    examples: &[LabeledExample],
    class_names: &[String],
    fractions: [f64; 3],
    seed: u64,
) -> Result<DatasetManifest> {
    if fractions.iter().any(|f| !(*f >= 0.0)) || fractions[0] <= 0.0 {
        return Err(Error::Config(format!(
            "split fractions must be non-negative with a positive train share, got {fractions:?}"
        )));
    }
    let total: f64 = fractions.iter().sum();
    if (total - 1.0).abs() > 1e-9 {
        return Err(Error::Config(format!("split fractions sum to {total}, expected 1")));
    }
    let mut by_class: Vec<Vec<&str>> = vec![Vec::new(); class_names.len()];
    let mut labels = BTreeMap::new();
    for e in examples {
        let bucket = by_class.get_mut(e.class_id).ok_or_else(|| {
            Error::Data(format!(
                "`{}` has class {} but only {} classes exist",
                e.source_id,
                e.class_id,
                class_names.len()
            ))
        })?;
        if labels.insert(e.source_id.clone(), e.class_id).is_some() {
            return Err(Error::Data(format!("duplicate source id `{}`", e.source_id)));
        }
        bucket.push(&e.source_id);
    }

    let mut splits = BTreeMap::new();
    for (class, ids) in by_class.iter_mut().enumerate() {
        if ids.is_empty() {
            return Err(Error::Config(format!(
                "class `{}` has no examples",
                class_names[class]
            )));
        }
        ids.sort_unstable();
        let mut rng = rng::stream(seed, &format!("split/{class}"));
        ids.shuffle(&mut rng);
        let [n_train, n_val, _] = allocate(ids.len(), fractions);
        for (i, id) in ids.iter().enumerate() {
            let split = if i < n_train {
                Split::Train
            } else if i < n_train + n_val {
                Split::Val
            } else {
                Split::Test
            };
            splits.insert(id.to_string(), split);
        }
    }

    let train = examples
        .iter()
        .filter(|e| splits[&e.source_id] == Split::Train)
        .map(|e| &e.image);
    let normalization = Normalization::compute(train)?;
    DatasetManifest::build(class_names.to_vec(), labels, splits, normalization)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::tensor::Tensor;
    use proptest::prelude::*;

    fn examples(per_class: &[usize]) -> (Vec<LabeledExample>, Vec<String>) {
        let mut out = Vec::new();
        for (c, &n) in per_class.iter().enumerate() {
            for i in 0..n {
                out.push(LabeledExample {
                    image: Tensor::full(&[1, 2, 2], (c * 31 + i) as f64 / 1000.0),
                    class_id: c,
                    source_id: format!("c{c}/img{i:04}"),
                });
            }
        }
        let names = (0..per_class.len()).map(|c| format!("class{c}")).collect();
        (out, names)
    }

    #[test]
    fn exact_division() {
        let (ex, names) = examples(&[100; 7]);
        let m = stratified_split(&ex, &names, [0.8, 0.1, 0.1], 3).unwrap();
        assert_eq!(m.counts[&Split::Train], vec![80; 7]);
        assert_eq!(m.counts[&Split::Val], vec![10; 7]);
        assert_eq!(m.counts[&Split::Test], vec![10; 7]);
    }

    #[test]
    fn tie_goes_to_validation() {
        assert_eq!(allocate(5, [0.8, 0.1, 0.1]), [4, 1, 0]);
        assert_eq!(allocate(20, [0.7, 0.15, 0.15]), [14, 3, 3]);
        assert_eq!(allocate(1, [0.8, 0.1, 0.1]), [1, 0, 0]);
    }

    #[test]
    fn deterministic_and_seed_sensitive() {
        let (ex, names) = examples(&[30, 17, 9]);
        let a = stratified_split(&ex, &names, [0.6, 0.2, 0.2], 11).unwrap();
        let b = stratified_split(&ex, &names, [0.6, 0.2, 0.2], 11).unwrap();
        let c = stratified_split(&ex, &names, [0.6, 0.2, 0.2], 12).unwrap();
        assert_eq!(a, b);
        assert_ne!(a.splits, c.splits);
        assert_eq!(a.counts, c.counts);
    }

    #[test]
    fn empty_class_is_named() {
        let (ex, names) = examples(&[4, 0, 3]);
        let err = stratified_split(&ex, &names, [0.8, 0.1, 0.1], 0).unwrap_err();
        assert!(matches!(err, Error::Config(ref m) if m.contains("class1")), "{err}");
    }

    #[test]
    fn bad_fractions() {
        let (ex, names) = examples(&[4, 4]);
        assert!(stratified_split(&ex, &names, [0.5, 0.1, 0.1], 0).is_err());
        assert!(stratified_split(&ex, &names, [0.0, 0.5, 0.5], 0).is_err());
    }

    proptest! {
        #[test]
        fn proportions_within_one_example(
            sizes in proptest::collection::vec(1usize..60, 2..6),
            f_val in 0.0f64..0.4,
            f_test in 0.0f64..0.4,
            seed in any::<u64>(),
        ) {
            let fractions = [1.0 - f_val - f_test, f_val, f_test];
            let (ex, names) = examples(&sizes);
            let m = stratified_split(&ex, &names, fractions, seed).unwrap();
            for (c, &n) in sizes.iter().enumerate() {
                let mut sum = 0;
                for (k, s) in Split::ALL.iter().enumerate() {
                    let got = m.counts[s][c];
                    sum += got;
                    prop_assert!((got as f64 - fractions[k] * n as f64).abs() < 1.0 + 1e-9);
                }
                prop_assert_eq!(sum, n);
            }
            prop_assert_eq!(m.splits.len(), ex.len());
            let back = DatasetManifest::from_json(&m.to_json().unwrap()).unwrap();
            prop_assert_eq!(back, m);
        }
    }
}
