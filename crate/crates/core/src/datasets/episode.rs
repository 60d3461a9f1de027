use std::collections::HashSet;
use std::sync::atomic::{AtomicBool, AtomicUsize, Ordering};

use rand::seq::SliceRandom;

use super::manifest::SampleRecord;
use crate::error::{Error, Result};
use crate::seed;

/// Ground truth of the unlabeled target pool, kept for final scoring only.
///
/// While sealed, [`HiddenLabels::reveal`] fails; every successful reveal is
/// counted.
#[derive(Debug, Default)]
pub struct HiddenLabels {
    labels: Vec<Option<usize>>,
    sealed: AtomicBool,
    reveals: AtomicUsize,
}

impl Clone for HiddenLabels {
    fn clone(&self) -> Self {
        HiddenLabels {
            labels: self.labels.clone(),
            sealed: AtomicBool::new(self.is_sealed()),
            reveals: AtomicUsize::new(self.reveal_count()),
        }
    }
}

impl PartialEq for HiddenLabels {
    fn eq(&self, other: &Self) -> bool {
        self.labels == other.labels
    }
}

impl HiddenLabels {
    fn new(labels: Vec<Option<usize>>) -> Self {
        HiddenLabels {
            labels,
            ..Default::default()
        }
    }

    pub fn len(&self) -> usize {
        self.labels.len()
    }

    pub fn is_empty(&self) -> bool {
        self.labels.is_empty()
    }

    pub fn reveal(&self) -> Result<&[Option<usize>]> {
        if self.is_sealed() {
            return Err(Error::Config("unlabeled-pool labels requested while training".into()));
        }
        self.reveals.fetch_add(1, Ordering::SeqCst);
        Ok(&self.labels)
    }

    pub fn reveal_count(&self) -> usize {
        self.reveals.load(Ordering::SeqCst)
    }

    pub fn is_sealed(&self) -> bool {
        self.sealed.load(Ordering::SeqCst)
    }

    /// Seals until the guard is dropped.
    pub fn seal(&self) -> SealGuard<'_> {
        let was = self.sealed.swap(true, Ordering::SeqCst);
        SealGuard { labels: self, was }
    }
}

pub struct SealGuard<'a> {
    labels: &'a HiddenLabels,
    was: bool,
}

impl Drop for SealGuard<'_> {
    fn drop(&mut self) {
        self.labels.sealed.store(self.was, Ordering::SeqCst);
    }
}

/// Partition of the data for one adaptation run.
#[derive(Clone, Debug, PartialEq)]
pub struct EpisodeSplit {
    pub source_labeled: Vec<SampleRecord>,
    /// `K` per class.
    pub target_labeled: Vec<SampleRecord>,
    /// Another `K` per class, disjoint from `target_labeled`.
    pub target_validation: Vec<SampleRecord>,
    /// Remaining target samples with their labels removed.
    pub target_unlabeled: Vec<SampleRecord>,
    pub hidden: HiddenLabels,
    pub shots: usize,
    pub num_classes: usize,
    pub seed: u64,
}

impl EpisodeSplit {
    /// Every target sample with its true label: the labeled and validation
    /// pools plus the revealed unlabeled pool. Fails while sealed.
    pub fn scoring_set(&self) -> Result<Vec<SampleRecord>> {
        let hidden = self.hidden.reveal()?;
        let mut all: Vec<SampleRecord> = self
            .target_labeled
            .iter()
            .chain(&self.target_validation)
            .cloned()
            .collect();
        for (record, label) in self.target_unlabeled.iter().zip(hidden) {
            if let Some(label) = label {
                let mut r = record.clone();
                r.label = Some(*label);
                all.push(r);
            }
        }
        Ok(all)
    }
}

fn check_label(r: &SampleRecord, num_classes: usize) -> Result<()> {
    match r.label {
        Some(l) if l >= num_classes => Err(Error::Config(format!(
            "{}: label {} out of range for {} classes",
            r.path.display(),
            l,
            num_classes
        ))),
        _ => Ok(()),
    }
}

/// Splits `target` into `K`-shot labeled, `K`-shot validation and unlabeled
/// pools. Target records without a label go straight to the unlabeled pool.
pub fn make_episode(
    source: &[SampleRecord],
    target: &[SampleRecord],
    shots: usize,
    num_classes: usize,
    seed: u64,
) -> Result<EpisodeSplit> {
    if num_classes < 2 {
        return Err(Error::Config(format!("need at least 2 classes, got {num_classes}")));
    }
    let mut paths = HashSet::new();
    for r in source.iter().chain(target) {
        if !paths.insert(&r.path) {
            return Err(Error::Config(format!(
                "{} appears more than once across source and target",
                r.path.display()
            )));
        }
        check_label(r, num_classes)?;
    }
    if let Some(r) = source.iter().find(|r| r.label.is_none()) {
        return Err(Error::Config(format!(
            "source sample {} has no label",
            r.path.display()
        )));
    }

    let mut by_class: Vec<Vec<usize>> = vec![Vec::new(); num_classes];
    for (i, r) in target.iter().enumerate() {
        if let Some(l) = r.label {
            by_class[l].push(i);
        }
    }
    let mut rng = seed::rng(seed, "episode");
    let mut labeled = Vec::new();
    let mut validation = Vec::new();
    let mut taken = vec![false; target.len()];
    for (class, members) in by_class.iter_mut().enumerate() {
        if members.len() < 2 * shots {
            return Err(Error::InsufficientSamples {
                class,
                needed: 2 * shots,
                found: members.len(),
            });
        }
        members.shuffle(&mut rng);
        for &i in &members[..2 * shots] {
            taken[i] = true;
        }
        labeled.extend(members[..shots].iter().map(|&i| target[i].clone()));
        validation.extend(members[shots..2 * shots].iter().map(|&i| target[i].clone()));
    }
    let mut unlabeled = Vec::new();
    let mut hidden = Vec::new();
    for (r, _) in target.iter().zip(&taken).filter(|(_, &t)| !t) {
        hidden.push(r.label);
        let mut stripped = r.clone();
        stripped.label = None;
        unlabeled.push(stripped);
    }
    Ok(EpisodeSplit {
        source_labeled: source.to_vec(),
        target_labeled: labeled,
        target_validation: validation,
        target_unlabeled: unlabeled,
        hidden: HiddenLabels::new(hidden),
        shots,
        num_classes,
        seed,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::datasets::Domain;

    fn pool(prefix: &str, per_class: usize, domain: Domain) -> Vec<SampleRecord> {
        (0..2 * per_class)
            .map(|i| SampleRecord::new(format!("{prefix}/{i}.png"), Some(i % 2), domain))
            .collect()
    }

    fn paths(rs: &[SampleRecord]) -> HashSet<&std::path::Path> {
        rs.iter().map(|r| r.path.as_path()).collect()
    }

    #[test]
    fn three_shots_give_six_and_six() {
        let s = pool("s", 50, Domain::Source);
        let t = pool("t", 50, Domain::Target);
        let e = make_episode(&s, &t, 3, 2, 9).unwrap();
        assert_eq!(e.target_labeled.len(), 6);
        assert_eq!(e.target_validation.len(), 6);
        assert_eq!(e.target_unlabeled.len(), 88);
        for c in 0..2 {
            assert_eq!(e.target_labeled.iter().filter(|r| r.label == Some(c)).count(), 3);
            assert_eq!(e.target_validation.iter().filter(|r| r.label == Some(c)).count(), 3);
        }
        assert!(e.target_unlabeled.iter().all(|r| r.label.is_none()));
        let (a, b, c) = (
            paths(&e.target_labeled),
            paths(&e.target_validation),
            paths(&e.target_unlabeled),
        );
        assert!(a.is_disjoint(&b) && a.is_disjoint(&c) && b.is_disjoint(&c));
        assert_eq!(a.len() + b.len() + c.len(), 100);
    }

    #[test]
    fn zero_shots_leave_everything_unlabeled() {
        let e = make_episode(&pool("s", 5, Domain::Source), &pool("t", 5, Domain::Target), 0, 2, 1).unwrap();
        assert!(e.target_labeled.is_empty() && e.target_validation.is_empty());
        assert_eq!(e.target_unlabeled.len(), 10);
    }

    #[test]
    fn seeded_and_seed_sensitive() {
        let s = pool("s", 50, Domain::Source);
        let t = pool("t", 50, Domain::Target);
        assert_eq!(
            make_episode(&s, &t, 5, 2, 4).unwrap(),
            make_episode(&s, &t, 5, 2, 4).unwrap()
        );
        assert_ne!(
            make_episode(&s, &t, 5, 2, 4).unwrap().target_labeled,
            make_episode(&s, &t, 5, 2, 5).unwrap().target_labeled
        );
    }

    #[test]
    fn reports_the_short_class() {
        let s = pool("s", 5, Domain::Source);
        let mut t = pool("t", 10, Domain::Target);
        t.retain(|r| r.label == Some(0) || r.path.to_string_lossy().ends_with("1.png"));
        match make_episode(&s, &t, 3, 2, 0).unwrap_err() {
            Error::InsufficientSamples { class, needed, found } => {
                assert_eq!((class, needed, found), (1, 6, 2));
            }
            other => panic!("unexpected {other}"),
        }
    }

    #[test]
    fn rejects_unlabeled_source_and_out_of_range_labels() {
        let mut s = pool("s", 2, Domain::Source);
        s[0].label = None;
        assert!(make_episode(&s, &pool("t", 2, Domain::Target), 1, 2, 0).is_err());
        let mut t = pool("t", 2, Domain::Target);
        t[0].label = Some(2);
        assert!(make_episode(&pool("s", 2, Domain::Source), &t, 1, 2, 0).is_err());
    }

    #[test]
    fn hidden_labels_are_guarded() {
        let e = make_episode(&pool("s", 5, Domain::Source), &pool("t", 5, Domain::Target), 1, 2, 3).unwrap();
        {
            let _guard = e.hidden.seal();
            assert!(e.scoring_set().is_err());
            assert_eq!(e.hidden.reveal_count(), 0);
        }
        let all = e.scoring_set().unwrap();
        assert_eq!(all.len(), 10);
        assert!(all.iter().all(|r| r.label.is_some()));
        assert_eq!(e.hidden.reveal_count(), 1);
    }
}
