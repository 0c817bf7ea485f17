//! Few-shot protocol: class-balanced source subsampling, per-class target
//! shot selection, and paired source/target mini-batches in which every
//! target has both a same-class and a different-class source partner.

use rand::seq::{index, SliceRandom};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::data::{Dataset, Image, Sample};
use crate::error::{Error, Result};

/// Random stream used by every sampling routine.
pub type SamplerRng = ChaCha8Rng;

pub fn rng_from_seed(seed: u64) -> SamplerRng {
    ChaCha8Rng::seed_from_u64(seed)
}

/// Maximum source redraws per [`make_pair_batch`] call.
pub const MAX_PAIR_ATTEMPTS: usize = 100;

fn indices_by_class(ds: &Dataset) -> Vec<Vec<usize>> {
    let mut by = vec![Vec::new(); ds.class_count];
    for (i, s) in ds.samples.iter().enumerate() {
        by[s.label].push(i);
    }
    by
}

/// Class-balanced random subset of `n_total` samples, in shuffled order.
/// Asking for the whole dataset returns a permutation of it.
pub fn subsample_source(ds: &Dataset, n_total: usize, seed: u64) -> Result<Dataset> {
    let mut rng = rng_from_seed(seed);
    let name = format!("{}[{n_total}]", ds.name);
    if n_total > ds.len() {
        return Err(Error::Protocol(format!(
            "cannot draw {n_total} samples from {} ({} available)",
            ds.name,
            ds.len()
        )));
    }
    if n_total == ds.len() {
        let mut idx: Vec<usize> = (0..ds.len()).collect();
        idx.shuffle(&mut rng);
        return Ok(ds.subset(name, &idx));
    }
    let c = ds.class_count;
    if n_total % c != 0 {
        return Err(Error::Protocol(format!(
            "{n_total} samples cannot be split evenly over {c} classes"
        )));
    }
    let per = n_total / c;
    let mut chosen = Vec::with_capacity(n_total);
    for (label, mut members) in indices_by_class(ds).into_iter().enumerate() {
        if members.len() < per {
            return Err(Error::Protocol(format!(
                "class {label} has {} samples, {per} required",
                members.len()
            )));
        }
        members.shuffle(&mut rng);
        chosen.extend_from_slice(&members[..per]);
    }
    chosen.shuffle(&mut rng);
    Ok(ds.subset(name, &chosen))
}

/// Labeled few-shot target set, the held-out evaluation remainder, and the
/// remainder's images as an unlabeled pool.
#[derive(Debug, Clone)]
pub struct FewShotSplit {
    pub labeled_target: Dataset,
    pub eval_target: Dataset,
    pub unlabeled_pool: Vec<Image>,
    /// Positions of `labeled_target` samples in the original dataset.
    pub labeled_indices: Vec<usize>,
    /// Positions of `eval_target` samples in the original dataset.
    pub eval_indices: Vec<usize>,
}

impl FewShotSplit {
    pub fn shots(&self) -> usize {
        self.labeled_target.len() / self.labeled_target.class_count
    }
}

/// Picks exactly `n_per_class` samples of every class; everything else,
/// in original order, becomes the evaluation set.
pub fn select_few_shot(ds: &Dataset, n_per_class: usize, seed: u64) -> Result<FewShotSplit> {
    let mut rng = rng_from_seed(seed);
    let mut labeled = Vec::with_capacity(n_per_class * ds.class_count);
    for (label, mut members) in indices_by_class(ds).into_iter().enumerate() {
        if members.len() < n_per_class {
            return Err(Error::Protocol(format!(
                "class {label} of {} has {} samples, {n_per_class} shots required",
                ds.name,
                members.len()
            )));
        }
        members.shuffle(&mut rng);
        labeled.extend_from_slice(&members[..n_per_class]);
    }
    labeled.sort_unstable();
    let mut is_labeled = vec![false; ds.len()];
    labeled.iter().for_each(|&i| is_labeled[i] = true);
    let eval: Vec<usize> = (0..ds.len()).filter(|&i| !is_labeled[i]).collect();
    let eval_target = ds.subset(format!("{}/eval", ds.name), &eval);
    Ok(FewShotSplit {
        labeled_target: ds.subset(format!("{}/{n_per_class}-shot", ds.name), &labeled),
        unlabeled_pool: eval_target.samples.iter().map(|s| s.image.clone()).collect(),
        eval_target,
        labeled_indices: labeled,
        eval_indices: eval,
    })
}

/// One optimisation step's worth of paired data.
#[derive(Debug, Clone, PartialEq)]
pub struct PairBatch<'a> {
    pub source: Vec<&'a Sample>,
    pub target: Vec<&'a Sample>,
}

impl PairBatch<'_> {
    /// Every target class has a same-class and a different-class source.
    pub fn is_valid(&self) -> bool {
        self.target.iter().all(|t| {
            let same = self.source.iter().any(|s| s.label == t.label);
            let diff = self.source.iter().any(|s| s.label != t.label);
            same && diff
        })
    }
}

/// Draws `n` positions from `0..len`: without replacement when possible,
/// otherwise with replacement.
pub fn draw_indices(len: usize, n: usize, rng: &mut SamplerRng) -> Vec<usize> {
    if n <= len {
        index::sample(rng, len, n).into_vec()
    } else {
        (0..n).map(|_| rng.random_range(0..len)).collect()
    }
}

/// Draws a [`PairBatch`]: targets uniformly with replacement, sources
/// resampled until the batch is valid.
pub fn make_pair_batch<'a>(
    source: &'a Dataset,
    labeled_target: &'a Dataset,
    bs: usize,
    bt: usize,
    rng: &mut SamplerRng,
) -> Result<PairBatch<'a>> {
    if bs < 2 || bt < 1 {
        return Err(Error::Protocol(format!(
            "batch sizes Bs={bs}, Bt={bt} (need Bs >= 2, Bt >= 1)"
        )));
    }
    if labeled_target.is_empty() {
        return Err(Error::Protocol("labeled target set is empty".into()));
    }
    if source.class_histogram().iter().filter(|&&n| n > 0).count() < 2 {
        return Err(Error::Protocol(
            "source has fewer than two classes; no different-class partner exists".into(),
        ));
    }
    let target: Vec<&Sample> = (0..bt)
        .map(|_| &labeled_target.samples[rng.random_range(0..labeled_target.len())])
        .collect();
    for _ in 0..MAX_PAIR_ATTEMPTS {
        let batch = PairBatch {
            source: draw_indices(source.len(), bs, rng)
                .into_iter()
                .map(|i| &source.samples[i])
                .collect(),
            target: target.clone(),
        };
        if batch.is_valid() {
            return Ok(batch);
        }
    }
    Err(Error::Protocol(format!(
        "no valid source batch of size {bs} after {MAX_PAIR_ATTEMPTS} attempts"
    )))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::data::Domain;

    pub(crate) fn toy(per_class: &[usize], domain: Domain) -> Dataset {
        let mut samples = Vec::new();
        for (label, &n) in per_class.iter().enumerate() {
            for k in 0..n {
                let v = ((label * 31 + k) % 256) as f32 / 255.0;
                samples.push(Sample {
                    image: Image::filled(2, 2, 1, v).unwrap(),
                    label,
                    domain,
                });
            }
        }
        Dataset::new("toy", per_class.len(), samples).unwrap()
    }

    #[test]
    fn subsample_is_balanced_and_deterministic() {
        let ds = toy(&[250, 300, 220, 260, 240, 230, 210, 280, 290, 205], Domain::Source);
        let a = subsample_source(&ds, 2000, 7).unwrap();
        assert_eq!(a.class_histogram(), vec![200; 10]);
        assert_eq!(a, subsample_source(&ds, 2000, 7).unwrap());
        assert_ne!(a, subsample_source(&ds, 2000, 8).unwrap());
    }

    #[test]
    fn subsample_everything_is_a_permutation() {
        let ds = toy(&[3, 5, 2], Domain::Source);
        let all = subsample_source(&ds, ds.len(), 1).unwrap();
        assert_eq!(all.class_histogram(), ds.class_histogram());
        assert_eq!(all.len(), ds.len());
    }

    #[test]
    fn subsample_rejects_short_classes() {
        let ds = toy(&[10, 1], Domain::Source);
        assert!(matches!(subsample_source(&ds, 4, 1), Err(Error::Protocol(_))));
        assert!(matches!(subsample_source(&ds, 3, 1), Err(Error::Protocol(_))));
        assert!(matches!(subsample_source(&ds, 12, 1), Err(Error::Protocol(_))));
    }

    #[test]
    fn few_shot_split_partitions() {
        let ds = toy(&[9, 12, 8, 10, 7, 11, 9, 9, 10, 14], Domain::Target);
        let s = select_few_shot(&ds, 7, 3).unwrap();
        assert_eq!(s.labeled_target.len(), 70);
        assert_eq!(s.labeled_target.class_histogram(), vec![7; 10]);
        assert_eq!(s.labeled_target.len() + s.eval_target.len(), ds.len());
        assert!(s.labeled_indices.iter().all(|i| !s.eval_indices.contains(i)));
        assert_eq!(s.unlabeled_pool.len(), s.eval_target.len());
        assert_eq!(s.shots(), 7);
        let again = select_few_shot(&ds, 7, 3).unwrap();
        assert_eq!(again.labeled_indices, s.labeled_indices);
    }

    #[test]
    fn zero_shots_leaves_everything_for_eval() {
        let ds = toy(&[3, 3], Domain::Target);
        let s = select_few_shot(&ds, 0, 3).unwrap();
        assert!(s.labeled_target.is_empty());
        assert_eq!(s.eval_target, ds.subset("toy/eval", &(0..6).collect::<Vec<_>>()));
    }

    #[test]
    fn few_shot_rejects_small_class() {
        let ds = toy(&[3, 1], Domain::Target);
        assert!(matches!(select_few_shot(&ds, 2, 0), Err(Error::Protocol(_))));
    }

    #[test]
    fn pair_batch_invariant_and_determinism() {
        let src = toy(&[200; 10], Domain::Source);
        let tgt = toy(&[7; 10], Domain::Target);
        let mut r1 = rng_from_seed(5);
        let mut r2 = rng_from_seed(5);
        for _ in 0..50 {
            let a = make_pair_batch(&src, &tgt, 64, 16, &mut r1).unwrap();
            let b = make_pair_batch(&src, &tgt, 64, 16, &mut r2).unwrap();
            assert!(a.is_valid());
            assert_eq!(a.source.len(), 64);
            assert_eq!(a.target.len(), 16);
            assert_eq!(a, b);
        }
    }

    #[test]
    fn single_class_source_is_protocol_error() {
        let src = toy(&[50, 0], Domain::Source);
        let tgt = toy(&[1, 1], Domain::Target);
        let mut rng = rng_from_seed(1);
        assert!(matches!(
            make_pair_batch(&src, &tgt, 8, 2, &mut rng),
            Err(Error::Protocol(_))
        ));
        assert!(matches!(
            make_pair_batch(&toy(&[5, 5], Domain::Source), &tgt, 1, 2, &mut rng),
            Err(Error::Protocol(_))
        ));
    }

    #[test]
    fn unsatisfiable_composition_hits_the_attempt_bound() {
        // A target of class 2 never finds a same-class source.
        let src = toy(&[5, 5, 0], Domain::Source);
        let tgt = toy(&[0, 0, 1], Domain::Target);
        let mut rng = rng_from_seed(1);
        let err = make_pair_batch(&src, &tgt, 4, 1, &mut rng).unwrap_err();
        assert!(err.to_string().contains("attempts"), "{err}");
    }
}
