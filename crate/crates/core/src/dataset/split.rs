//! Trial-grouped cross-validation plans.
//!
//! Splits always assign whole trials, so overlapping windows of one trial can
//! never sit on both sides of a fold.

use std::collections::BTreeMap;
use std::fmt;
use std::str::FromStr;

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use super::{DatasetError, Result, WindowedExample};

/// Grouping keys of anything that can be split.
pub trait SplitKey {
    fn subject_id(&self) -> &str;
    fn trial_id(&self) -> &str;
}

impl SplitKey for WindowedExample {
    fn subject_id(&self) -> &str {
        &self.subject_id
    }

    fn trial_id(&self) -> &str {
        &self.trial_id
    }
}

impl<A: AsRef<str>, B: AsRef<str>> SplitKey for (A, B) {
    fn subject_id(&self) -> &str {
        self.0.as_ref()
    }

    fn trial_id(&self) -> &str {
        self.1.as_ref()
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum SplitScheme {
    /// Separate k folds inside every subject; one model per (subject, fold).
    KFoldPerSubject,
    /// Same per-subject trial assignment, folds pooled across subjects.
    KFoldPooled,
    LeaveOneSubjectOut,
}

impl fmt::Display for SplitScheme {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            SplitScheme::KFoldPerSubject => "kfold_per_subject",
            SplitScheme::KFoldPooled => "kfold_pooled",
            SplitScheme::LeaveOneSubjectOut => "leave_one_subject_out",
        })
    }
}

impl FromStr for SplitScheme {
    type Err = String;

    fn from_str(s: &str) -> std::result::Result<Self, String> {
        match s {
            "kfold_per_subject" => Ok(SplitScheme::KFoldPerSubject),
            "kfold_pooled" => Ok(SplitScheme::KFoldPooled),
            "leave_one_subject_out" | "loso" => Ok(SplitScheme::LeaveOneSubjectOut),
            other => Err(format!("unknown split scheme `{other}`")),
        }
    }
}

/// One train/validation partition. Index lists are sorted and refer to
/// positions in the example slice the plan was built from.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Fold {
    pub id: usize,
    /// Subject owning the fold under per-subject k-fold, the held-out subject
    /// under leave-one-subject-out, `None` for pooled folds.
    pub subject: Option<String>,
    pub train: Vec<usize>,
    pub validation: Vec<usize>,
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct SplitPlan {
    pub folds: Vec<Fold>,
    pub scheme: SplitScheme,
    pub seed: u64,
}

/// subject -> trial -> example indices, all in sorted order.
type Groups = BTreeMap<String, BTreeMap<String, Vec<usize>>>;

fn group<T: SplitKey>(examples: &[T]) -> Groups {
    let mut groups = Groups::new();
    for (i, e) in examples.iter().enumerate() {
        groups
            .entry(e.subject_id().to_string())
            .or_default()
            .entry(e.trial_id().to_string())
            .or_default()
            .push(i);
    }
    groups
}

/// Shuffled fold number for every trial of every subject.
fn assign_trials(groups: &Groups, k: usize, seed: u64) -> Result<BTreeMap<&str, BTreeMap<&str, usize>>> {
    if k < 2 {
        return Err(DatasetError::Config(format!("k-fold needs k >= 2, got {k}")));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut out = BTreeMap::new();
    for (subject, trials) in groups {
        if trials.len() < k {
            return Err(DatasetError::Config(format!(
                "subject `{subject}` has {} trials, fewer than k = {k}",
                trials.len()
            )));
        }
        let mut ids: Vec<&str> = trials.keys().map(String::as_str).collect();
        ids.shuffle(&mut rng);
        out.insert(subject.as_str(), ids.into_iter().enumerate().map(|(p, t)| (t, p % k)).collect());
    }
    Ok(out)
}

fn collect(groups: &Groups, mut pick: impl FnMut(&str, &str) -> Option<bool>) -> (Vec<usize>, Vec<usize>) {
    let (mut train, mut val) = (Vec::new(), Vec::new());
    for (subject, trials) in groups {
        for (trial, idx) in trials {
            match pick(subject, trial) {
                Some(true) => val.extend_from_slice(idx),
                Some(false) => train.extend_from_slice(idx),
                None => {}
            }
        }
    }
    train.sort_unstable();
    val.sort_unstable();
    (train, val)
}

/// `k` folds inside each subject, grouped by trial.
pub fn kfold_split<T: SplitKey>(examples: &[T], k: usize, seed: u64) -> Result<SplitPlan> {
    let groups = group(examples);
    let assignment = assign_trials(&groups, k, seed)?;
    let mut folds = Vec::new();
    for subject in groups.keys() {
        for f in 0..k {
            let (train, validation) = collect(&groups, |s, t| (s == subject).then(|| assignment[s][t] == f));
            folds.push(Fold { id: f, subject: Some(subject.clone()), train, validation });
        }
    }
    Ok(SplitPlan { folds, scheme: SplitScheme::KFoldPerSubject, seed })
}

/// `k` folds with per-subject trial assignment, pooled over subjects.
pub fn kfold_pooled_split<T: SplitKey>(examples: &[T], k: usize, seed: u64) -> Result<SplitPlan> {
    let groups = group(examples);
    let assignment = assign_trials(&groups, k, seed)?;
    let folds = (0..k)
        .map(|f| {
            let (train, validation) = collect(&groups, |s, t| Some(assignment[s][t] == f));
            Fold { id: f, subject: None, train, validation }
        })
        .collect();
    Ok(SplitPlan { folds, scheme: SplitScheme::KFoldPooled, seed })
}

/// One fold per subject, validating on that subject alone.
pub fn loso_split<T: SplitKey>(examples: &[T]) -> Result<SplitPlan> {
    let groups = group(examples);
    if groups.len() < 2 {
        return Err(DatasetError::Config(format!(
            "leave-one-subject-out needs at least 2 subjects, found {}",
            groups.len()
        )));
    }
    let folds = groups
        .keys()
        .enumerate()
        .map(|(i, held)| {
            let (train, validation) = collect(&groups, |s, _| Some(s == held));
            Fold { id: i, subject: Some(held.clone()), train, validation }
        })
        .collect();
    Ok(SplitPlan { folds, scheme: SplitScheme::LeaveOneSubjectOut, seed: 0 })
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;
    use std::collections::HashSet;

    fn keys(subjects: usize, trials: usize, windows: usize) -> Vec<(String, String)> {
        let mut v = Vec::new();
        for s in 0..subjects {
            for t in 0..trials {
                for _ in 0..windows {
                    v.push((format!("s{s}"), format!("s{s}t{t}")));
                }
            }
        }
        v
    }

    #[test]
    fn ten_trials_five_folds() {
        let ex = keys(1, 10, 3);
        let plan = kfold_split(&ex, 5, 42).unwrap();
        assert_eq!(plan.folds.len(), 5);
        for f in &plan.folds {
            let trials: HashSet<&str> = f.validation.iter().map(|&i| ex[i].1.as_str()).collect();
            assert_eq!(trials.len(), 2);
        }
    }

    #[test]
    fn same_seed_same_plan() {
        let ex = keys(3, 7, 2);
        assert_eq!(kfold_split(&ex, 5, 9).unwrap(), kfold_split(&ex, 5, 9).unwrap());
        assert_ne!(kfold_split(&ex, 5, 9).unwrap(), kfold_split(&ex, 5, 10).unwrap());
    }

    #[test]
    fn too_few_trials_names_subject() {
        let mut ex = keys(1, 10, 1);
        ex.push(("lonely".into(), "x".into()));
        match kfold_split(&ex, 5, 0) {
            Err(DatasetError::Config(msg)) => assert!(msg.contains("lonely")),
            other => panic!("{other:?}"),
        }
        assert!(kfold_split(&keys(1, 10, 1), 1, 0).is_err());
    }

    #[test]
    fn loso_counts_and_errors() {
        let ex = keys(18, 2, 2);
        let plan = loso_split(&ex).unwrap();
        assert_eq!(plan.folds.len(), 18);
        for f in &plan.folds {
            let tr: HashSet<&str> = f.train.iter().map(|&i| ex[i].0.as_str()).collect();
            let va: HashSet<&str> = f.validation.iter().map(|&i| ex[i].0.as_str()).collect();
            assert_eq!(va.len(), 1);
            assert!(tr.is_disjoint(&va));
        }
        assert!(matches!(loso_split(&keys(1, 4, 1)), Err(DatasetError::Config(_))));
    }

    fn check_plan(ex: &[(String, String)], plan: &SplitPlan, all_covered: bool) -> std::result::Result<(), TestCaseError> {
        let mut seen = vec![0usize; ex.len()];
        for f in &plan.folds {
            let tr: HashSet<&str> = f.train.iter().map(|&i| ex[i].1.as_str()).collect();
            let va: HashSet<&str> = f.validation.iter().map(|&i| ex[i].1.as_str()).collect();
            prop_assert!(tr.is_disjoint(&va));
            for &i in &f.validation {
                seen[i] += 1;
            }
        }
        if all_covered {
            prop_assert!(seen.iter().all(|&c| c == 1));
        }
        Ok(())
    }

    proptest! {
        #[test]
        fn plans_are_disjoint_and_cover(subjects in 2usize..6, trials in 5usize..9, windows in 1usize..4, seed in 0u64..1000) {
            let ex = keys(subjects, trials, windows);
            check_plan(&ex, &kfold_split(&ex, 5, seed).unwrap(), true)?;
            check_plan(&ex, &kfold_pooled_split(&ex, 5, seed).unwrap(), true)?;
            check_plan(&ex, &loso_split(&ex).unwrap(), true)?;
        }
    }
}
