//! Stratified train/validation split.

use rand::seq::SliceRandom;
use rand::Rng;

use crate::error::{Error, Result};
use crate::model::NUM_CLASSES;

/// Training share of `n` items: `round(n·frac)` clamped to `[1, n − 1]`.
pub fn train_count(n: usize, frac: f64) -> usize {
    ((n as f64 * frac).round() as usize).clamp(1, n.saturating_sub(1).max(1))
}

/// Splits item indices by class label. Each class is shuffled with `rng` in
/// class order and contributes [`train_count`] items to training.
pub fn stratified_split<R: Rng + ?Sized>(
    labels: &[usize],
    frac: f64,
    rng: &mut R,
) -> Result<(Vec<usize>, Vec<usize>)> {
    if !(frac > 0.0 && frac < 1.0) {
        return Err(Error::Config(format!(
            "split fraction must lie strictly between 0 and 1, got {frac}"
        )));
    }
    if let Some(&bad) = labels.iter().find(|&&l| l >= NUM_CLASSES) {
        return Err(Error::Data(format!("label {bad} is not a class index")));
    }
    let mut train = Vec::new();
    let mut val = Vec::new();
    for class in 0..NUM_CLASSES {
        let mut members: Vec<usize> = (0..labels.len()).filter(|&i| labels[i] == class).collect();
        if members.len() < 2 {
            return Err(Error::Data(format!(
                "class {class} has {} labelled training records, at least 2 are needed",
                members.len()
            )));
        }
        members.shuffle(rng);
        let k = train_count(members.len(), frac);
        train.extend_from_slice(&members[..k]);
        val.extend_from_slice(&members[k..]);
    }
    Ok((train, val))
}

#[cfg(test)]
mod tests {
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    use super::*;

    fn balanced(n: usize) -> Vec<usize> {
        (0..2 * n).map(|i| i % 2).collect()
    }

    #[test]
    fn balanced_fifty_four_each() {
        let labels = balanced(54);
        let (train, val) =
            stratified_split(&labels, 0.65, &mut ChaCha8Rng::seed_from_u64(0)).unwrap();
        let count = |idx: &[usize], c| idx.iter().filter(|&&i| labels[i] == c).count();
        assert_eq!((count(&train, 0), count(&train, 1)), (35, 35));
        assert_eq!((count(&val, 0), count(&val, 1)), (19, 19));
        let mut all: Vec<usize> = train.iter().chain(&val).copied().collect();
        all.sort_unstable();
        assert_eq!(all, (0..108).collect::<Vec<_>>());
    }

    #[test]
    fn rejects_bad_fraction_and_missing_class() {
        let labels = balanced(5);
        let mut r = ChaCha8Rng::seed_from_u64(0);
        assert!(matches!(
            stratified_split(&labels, 1.0, &mut r),
            Err(Error::Config(_))
        ));
        assert!(matches!(
            stratified_split(&labels, 0.0, &mut r),
            Err(Error::Config(_))
        ));
        assert!(matches!(
            stratified_split(&[0, 0, 0], 0.5, &mut r),
            Err(Error::Data(_))
        ));
        assert!(matches!(
            stratified_split(&[0, 0, 1], 0.5, &mut r),
            Err(Error::Data(_))
        ));
    }

    #[test]
    fn same_seed_same_split() {
        let labels = balanced(20);
        let a = stratified_split(&labels, 0.65, &mut ChaCha8Rng::seed_from_u64(3)).unwrap();
        let b = stratified_split(&labels, 0.65, &mut ChaCha8Rng::seed_from_u64(3)).unwrap();
        let c = stratified_split(&labels, 0.65, &mut ChaCha8Rng::seed_from_u64(4)).unwrap();
        assert_eq!(a, b);
        assert_ne!(a, c);
    }

    #[test]
    fn counts_stay_inside_each_class() {
        assert_eq!(train_count(2, 0.01), 1);
        assert_eq!(train_count(2, 0.99), 1);
        assert_eq!(train_count(10, 0.65), 7);
        assert_eq!(train_count(35, 0.65), 23);
    }
}
