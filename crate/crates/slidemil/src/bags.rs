//! Patient-level cohort splitting and MIL bag assembly.
//!
//! Splits are a pure function of (patient list, seed). Bags are built
//! per slide with a sampler seeded by (seed, slide_id), so composition
//! is independent of slide iteration order; a patient's patches can
//! therefore never straddle cohorts.

use std::collections::{BTreeMap, BTreeSet};

use rand::seq::SliceRandom;
use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::seed::{rng_from, subseed};

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Cohort {
    Train,
    Val,
    Test,
}

impl Cohort {
    pub fn as_str(&self) -> &'static str {
        match self {
            Cohort::Train => "train",
            Cohort::Val => "val",
            Cohort::Test => "test",
        }
    }
}

/// Disjoint patient sets covering the whole cohort.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct CohortSplit {
    pub train: BTreeSet<String>,
    pub val: BTreeSet<String>,
    pub test: BTreeSet<String>,
}

impl CohortSplit {
    pub fn cohort_of(&self, patient_id: &str) -> Option<Cohort> {
        if self.train.contains(patient_id) {
            Some(Cohort::Train)
        } else if self.val.contains(patient_id) {
            Some(Cohort::Val)
        } else if self.test.contains(patient_id) {
            Some(Cohort::Test)
        } else {
            None
        }
    }

    pub fn total(&self) -> usize {
        self.train.len() + self.val.len() + self.test.len()
    }
}

/// Deterministic per-patient split: test = round(0.2 n) patients, then
/// val = round(0.25 of the remaining pool), rest train.
pub fn split_cohorts(patient_ids: &[String], seed: u64) -> Result<CohortSplit> {
    let mut unique: Vec<String> = patient_ids.to_vec();
    unique.sort();
    let before = unique.len();
    unique.dedup();
    if unique.len() != before {
        return Err(Error::Validation("duplicate patient ids in split input".into()));
    }
    if unique.len() < 5 {
        return Err(Error::Data(format!(
            "{} patients is too few to populate train/val/test",
            unique.len()
        )));
    }
    let mut rng = rng_from(subseed(seed, "split"));
    unique.shuffle(&mut rng);
    let n = unique.len();
    let n_test = (0.2 * n as f64).round() as usize;
    let n_val = (0.25 * (n - n_test) as f64).round() as usize;
    let test: BTreeSet<String> = unique[..n_test].iter().cloned().collect();
    let val: BTreeSet<String> = unique[n_test..n_test + n_val].iter().cloned().collect();
    let train: BTreeSet<String> = unique[n_test + n_val..].iter().cloned().collect();
    Ok(CohortSplit { train, val, test })
}

/// Kept patches of one slide, identified by grid coordinates.
#[derive(Debug, Clone)]
pub struct SlidePatches {
    pub slide_id: String,
    pub coords: Vec<(usize, usize)>,
}

/// One bag: N patch references from a single slide, its cohort and its
/// encoded label. The clinical vector is attached at materialization.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Bag {
    pub slide_id: String,
    pub cohort: Cohort,
    pub patch_coords: Vec<(usize, usize)>,
    pub label: usize,
    /// Set when the slide had fewer kept patches than N and the bag was
    /// filled by sampling with replacement.
    pub with_replacement: bool,
}

/// Build `bags_per_slide` bags of `n_instances` patches per slide.
///
/// Within a bag patches are sampled without replacement; slides with
/// fewer than N kept patches contribute every patch once and fill the
/// remainder with replacement (the bag is flagged). Slides with zero
/// kept patches are excluded with a warning.
pub fn build_bags(
    slides: &[SlidePatches],
    split: &CohortSplit,
    labels: &BTreeMap<String, usize>,
    n_instances: usize,
    bags_per_slide: usize,
    seed: u64,
) -> Result<(Vec<Bag>, Vec<String>)> {
    if n_instances == 0 || bags_per_slide == 0 {
        return Err(Error::Config(
            "n_instances and bags_per_slide must be >= 1".into(),
        ));
    }
    let mut bags = Vec::with_capacity(slides.len() * bags_per_slide);
    let mut warnings = Vec::new();
    for slide in slides {
        let cohort = split.cohort_of(&slide.slide_id).ok_or_else(|| {
            Error::Data(format!("slide {} has no patient in the split", slide.slide_id))
        })?;
        let label = *labels.get(&slide.slide_id).ok_or_else(|| {
            Error::Data(format!("slide {} has no clinical record", slide.slide_id))
        })?;
        if slide.coords.is_empty() {
            warnings.push(format!("slide {} has no kept patches; excluded", slide.slide_id));
            continue;
        }
        let mut rng = rng_from(subseed(seed, &slide.slide_id));
        for _ in 0..bags_per_slide {
            let (patch_coords, with_replacement) = if slide.coords.len() >= n_instances {
                let mut idx: Vec<usize> = (0..slide.coords.len()).collect();
                idx.shuffle(&mut rng);
                (
                    idx[..n_instances].iter().map(|&i| slide.coords[i]).collect(),
                    false,
                )
            } else {
                let mut coords: Vec<(usize, usize)> = slide.coords.clone();
                coords.shuffle(&mut rng);
                while coords.len() < n_instances {
                    coords.push(slide.coords[rng.gen_range(0..slide.coords.len())]);
                }
                (coords, true)
            };
            bags.push(Bag {
                slide_id: slide.slide_id.clone(),
                cohort,
                patch_coords,
                label,
                with_replacement,
            });
        }
    }
    Ok((bags, warnings))
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    fn ids(n: usize) -> Vec<String> {
        (0..n).map(|i| format!("P{i:04}")).collect()
    }

    fn grid_coords(n: usize) -> Vec<(usize, usize)> {
        (0..n).map(|i| (i * 256, 0)).collect()
    }

    fn label_map(slides: &[SlidePatches]) -> BTreeMap<String, usize> {
        slides.iter().map(|s| (s.slide_id.clone(), 1)).collect()
    }

    #[test]
    fn hundred_patients_split_20_20_60() {
        let split = split_cohorts(&ids(100), 7).unwrap();
        assert_eq!(split.test.len(), 20);
        assert_eq!(split.val.len(), 20);
        assert_eq!(split.train.len(), 60);
    }

    #[test]
    fn five_patients_split_1_1_3() {
        let split = split_cohorts(&ids(5), 7).unwrap();
        assert_eq!(split.test.len(), 1);
        assert_eq!(split.val.len(), 1);
        assert_eq!(split.train.len(), 3);
    }

    #[test]
    fn split_is_deterministic_and_partitioning() {
        let patients = ids(31);
        let a = split_cohorts(&patients, 11).unwrap();
        let b = split_cohorts(&patients, 11).unwrap();
        assert_eq!(a, b);
        let c = split_cohorts(&patients, 12).unwrap();
        assert_ne!(a, c);
        let mut all: BTreeSet<String> = BTreeSet::new();
        for set in [&a.train, &a.val, &a.test] {
            for id in set {
                assert!(all.insert(id.clone()), "{id} appears twice");
            }
        }
        assert_eq!(all.len(), 31);
    }

    #[test]
    fn too_few_patients_is_an_error() {
        assert!(split_cohorts(&ids(4), 1).is_err());
        assert!(split_cohorts(&["a".into(), "a".into(), "b".into(), "c".into(), "d".into()], 1).is_err());
    }

    #[test]
    fn exact_fit_bag_is_the_full_patch_set() {
        let patients = ids(5);
        let split = split_cohorts(&patients, 3).unwrap();
        let slides = vec![SlidePatches {
            slide_id: patients[0].clone(),
            coords: grid_coords(10),
        }];
        let (bags, warnings) =
            build_bags(&slides, &split, &label_map(&slides), 10, 1, 9).unwrap();
        assert!(warnings.is_empty());
        assert_eq!(bags.len(), 1);
        assert!(!bags[0].with_replacement);
        let got: BTreeSet<_> = bags[0].patch_coords.iter().collect();
        let want: BTreeSet<_> = grid_coords(10).iter().cloned().collect();
        assert_eq!(got, want.iter().collect());
    }

    #[test]
    fn underfilled_slide_repeats_and_is_flagged() {
        let patients = ids(5);
        let split = split_cohorts(&patients, 3).unwrap();
        let slides = vec![SlidePatches {
            slide_id: patients[1].clone(),
            coords: grid_coords(3),
        }];
        let (bags, _) = build_bags(&slides, &split, &label_map(&slides), 10, 2, 9).unwrap();
        for bag in &bags {
            assert!(bag.with_replacement);
            assert_eq!(bag.patch_coords.len(), 10);
            let distinct: BTreeSet<_> = bag.patch_coords.iter().collect();
            assert_eq!(distinct.len(), 3, "every kept patch appears");
        }
    }

    #[test]
    fn two_slides_four_bags_each() {
        let patients = ids(6);
        let split = split_cohorts(&patients, 4).unwrap();
        let slides: Vec<SlidePatches> = patients[..2]
            .iter()
            .map(|p| SlidePatches {
                slide_id: p.clone(),
                coords: grid_coords(12),
            })
            .collect();
        let (bags, _) = build_bags(&slides, &split, &label_map(&slides), 5, 4, 10).unwrap();
        assert_eq!(bags.len(), 8);
        for slide in &slides {
            let owned: Vec<&Bag> = bags.iter().filter(|b| b.slide_id == slide.slide_id).collect();
            assert_eq!(owned.len(), 4);
            for bag in owned {
                assert_eq!(bag.cohort, split.cohort_of(&slide.slide_id).unwrap());
                for c in &bag.patch_coords {
                    assert!(slide.coords.contains(c), "patch from the owning slide only");
                }
            }
        }
    }

    #[test]
    fn empty_slide_is_excluded_with_warning() {
        let patients = ids(5);
        let split = split_cohorts(&patients, 5).unwrap();
        let slides = vec![
            SlidePatches {
                slide_id: patients[0].clone(),
                coords: vec![],
            },
            SlidePatches {
                slide_id: patients[1].clone(),
                coords: grid_coords(4),
            },
        ];
        let (bags, warnings) = build_bags(&slides, &split, &label_map(&slides), 4, 2, 6).unwrap();
        assert_eq!(bags.len(), 2);
        assert_eq!(warnings.len(), 1);
        assert!(warnings[0].contains(&patients[0]));
    }

    #[test]
    fn bags_are_deterministic_per_seed() {
        let patients = ids(8);
        let split = split_cohorts(&patients, 2).unwrap();
        let slides: Vec<SlidePatches> = patients
            .iter()
            .map(|p| SlidePatches {
                slide_id: p.clone(),
                coords: grid_coords(9),
            })
            .collect();
        let (a, _) = build_bags(&slides, &split, &label_map(&slides), 4, 3, 21).unwrap();
        let (b, _) = build_bags(&slides, &split, &label_map(&slides), 4, 3, 21).unwrap();
        assert_eq!(a, b);
        // slide order must not matter
        let mut reversed = slides.clone();
        reversed.reverse();
        let (mut c, _) = build_bags(&reversed, &split, &label_map(&slides), 4, 3, 21).unwrap();
        c.sort_by(|x, y| x.slide_id.cmp(&y.slide_id));
        let mut a_sorted = a.clone();
        a_sorted.sort_by(|x, y| x.slide_id.cmp(&y.slide_id));
        assert_eq!(a_sorted, c);
    }

    proptest! {
        #[test]
        fn split_sizes_follow_the_rounding_rule(n in 5usize..400, seed in 0u64..50) {
            let split = split_cohorts(&ids(n), seed).unwrap();
            let want_test = (0.2 * n as f64).round() as usize;
            let want_val = (0.25 * (n - want_test) as f64).round() as usize;
            prop_assert_eq!(split.test.len(), want_test);
            prop_assert_eq!(split.val.len(), want_val);
            prop_assert_eq!(split.total(), n);
        }

        #[test]
        fn bag_labels_and_cohorts_match_their_slide(seed in 0u64..30) {
            let patients = ids(10);
            let split = split_cohorts(&patients, seed).unwrap();
            let slides: Vec<SlidePatches> = patients
                .iter()
                .map(|p| SlidePatches { slide_id: p.clone(), coords: grid_coords(6) })
                .collect();
            let labels: BTreeMap<String, usize> = patients
                .iter()
                .enumerate()
                .map(|(i, p)| (p.clone(), i % 3))
                .collect();
            let (bags, _) = build_bags(&slides, &split, &labels, 3, 2, seed).unwrap();
            for bag in &bags {
                prop_assert_eq!(bag.label, labels[&bag.slide_id]);
                prop_assert_eq!(Some(bag.cohort), split.cohort_of(&bag.slide_id));
            }
        }
    }
}
