//! Dataset bookkeeping: constrained slide-level train/test splits, nine-class
//! to three-class collapsing of an external patch corpus, holdout splits and
//! stratified k-fold partitions.

use std::collections::BTreeMap;
use std::fmt;
use std::path::Path;
use std::str::FromStr;

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::annotate::TissueClass;
use crate::rng::SplitMix64;

#[derive(Debug, Error)]
pub enum CohortError {
    #[error("no split satisfied the constraints within {attempts} attempts")]
    ConstraintsUnsatisfiable { attempts: usize },
    #[error("class {class} has {available} entries but {required} are required")]
    InsufficientClassPopulation {
        class: &'static str,
        available: usize,
        required: usize,
    },
    #[error("too few patches: {available} available, {required} required")]
    TooFewPatches { available: usize, required: usize },
    #[error("invalid parameter: {0}")]
    InvalidParameter(String),
    #[error("unknown source class {0:?}")]
    UnknownSourceClass(String),
    #[error("invalid slide entry: {0}")]
    InvalidSlide(String),
    #[error("invalid manifest row: {0}")]
    InvalidManifest(String),
    #[error(transparent)]
    Csv(#[from] csv::Error),
    #[error(transparent)]
    Io(#[from] std::io::Error),
}

pub type Result<T, E = CohortError> = std::result::Result<T, E>;

/// Per-class counts indexed by [`TissueClass::index`].
pub type ClassCounts = [usize; 3];

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct SlideEntry {
    pub slide_id: String,
    pub patch_counts: ClassCounts,
    /// Visually scored TSR in percent, one of 10, 20, ..., 90.
    pub true_tsr: Option<u8>,
}

impl SlideEntry {
    pub fn new(slide_id: impl Into<String>, patch_counts: ClassCounts, true_tsr: Option<u8>) -> Result<Self> {
        if let Some(t) = true_tsr {
            if !(10..=90).contains(&t) || t % 10 != 0 {
                return Err(CohortError::InvalidSlide(format!(
                    "true TSR {t} is not one of 10, 20, ..., 90"
                )));
            }
        }
        Ok(Self {
            slide_id: slide_id.into(),
            patch_counts,
            true_tsr,
        })
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize)]
pub struct SplitConstraints {
    /// Largest allowed gap between the most and least frequent training class.
    pub max_diff: usize,
    pub min_test_per_class: usize,
    /// Smallest test share of slides.
    pub min_test_fraction: f64,
    pub max_attempts: usize,
}

impl Default for SplitConstraints {
    fn default() -> Self {
        Self {
            max_diff: 80,
            min_test_per_class: 900,
            min_test_fraction: 0.10,
            max_attempts: 10_000,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize)]
pub struct SplitResult {
    /// Slide ids in input order.
    pub train_slides: Vec<String>,
    pub test_slides: Vec<String>,
    pub train_totals: ClassCounts,
    pub test_totals: ClassCounts,
    pub attempts: usize,
}

impl SplitResult {
    pub fn satisfies(&self, c: &SplitConstraints) -> bool {
        let max = *self.train_totals.iter().max().unwrap();
        let min = *self.train_totals.iter().min().unwrap();
        max - min <= c.max_diff && self.test_totals.iter().all(|&n| n >= c.min_test_per_class)
    }
}

fn totals<'a>(slides: impl Iterator<Item = &'a SlideEntry>) -> ClassCounts {
    slides.fold([0; 3], |mut acc, s| {
        for (a, c) in acc.iter_mut().zip(s.patch_counts) {
            *a += c;
        }
        acc
    })
}

/// Rejection-samples random slide-level splits until the class-balance
/// constraints hold.
///
/// Each attempt shuffles the slides and draws the test-set size uniformly
/// from `[ceil(min_test_fraction * n), n - 1]`.
pub fn split_with_constraints(slides: &[SlideEntry], seed: u64, c: &SplitConstraints) -> Result<SplitResult> {
    let n = slides.len();
    if n < 2 {
        return Err(CohortError::TooFewPatches {
            available: n,
            required: 2,
        });
    }
    if !(0.0..1.0).contains(&c.min_test_fraction) {
        return Err(CohortError::InvalidParameter("min_test_fraction must lie in [0, 1)".into()));
    }
    // no split can put more in the test set than the whole cohort holds
    if totals(slides.iter()).iter().any(|&t| t < c.min_test_per_class) {
        return Err(CohortError::ConstraintsUnsatisfiable { attempts: 0 });
    }
    let min_test = ((c.min_test_fraction * n as f64).ceil() as usize).max(1);
    if min_test > n - 1 {
        return Err(CohortError::ConstraintsUnsatisfiable { attempts: 0 });
    }

    let mut rng = SplitMix64::new(seed);
    let mut order: Vec<usize> = (0..n).collect();
    for attempt in 1..=c.max_attempts {
        rng.shuffle(&mut order);
        let n_test = min_test + rng.below((n - min_test) as u64) as usize;
        let mut is_test = vec![false; n];
        for &i in &order[..n_test] {
            is_test[i] = true;
        }
        let test_totals = totals(slides.iter().zip(&is_test).filter(|(_, &t)| t).map(|(s, _)| s));
        let train_totals = totals(slides.iter().zip(&is_test).filter(|(_, &t)| !t).map(|(s, _)| s));
        let candidate = SplitResult {
            train_slides: slides
                .iter()
                .zip(&is_test)
                .filter(|(_, &t)| !t)
                .map(|(s, _)| s.slide_id.clone())
                .collect(),
            test_slides: slides
                .iter()
                .zip(&is_test)
                .filter(|(_, &t)| t)
                .map(|(s, _)| s.slide_id.clone())
                .collect(),
            train_totals,
            test_totals,
            attempts: attempt,
        };
        if candidate.satisfies(c) {
            return Ok(candidate);
        }
    }
    Err(CohortError::ConstraintsUnsatisfiable {
        attempts: c.max_attempts,
    })
}

/// Source classes of the external nine-class patch corpus.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
pub enum NineClass {
    Adipose,
    Background,
    Debris,
    Lymphocytes,
    Mucus,
    Normal,
    SmoothMuscle,
    Stroma,
    Tumor,
}

impl NineClass {
    /// Classes pooled into *other*, in alphabetical order.
    pub const RESIDUAL: [NineClass; 5] = [
        NineClass::Debris,
        NineClass::Lymphocytes,
        NineClass::Mucus,
        NineClass::Normal,
        NineClass::SmoothMuscle,
    ];

    pub fn name(self) -> &'static str {
        match self {
            Self::Adipose => "adipose",
            Self::Background => "background",
            Self::Debris => "debris",
            Self::Lymphocytes => "lymphocytes",
            Self::Mucus => "mucus",
            Self::Normal => "normal",
            Self::SmoothMuscle => "smooth muscle",
            Self::Stroma => "stroma",
            Self::Tumor => "tumor",
        }
    }
}

impl fmt::Display for NineClass {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

impl FromStr for NineClass {
    type Err = CohortError;

    /// Accepts the long names and the corpus' short codes (ADI, BACK, ...).
    fn from_str(s: &str) -> Result<Self> {
        let c = match s.to_ascii_lowercase().as_str() {
            "adipose" | "adi" => Self::Adipose,
            "background" | "back" => Self::Background,
            "debris" | "deb" => Self::Debris,
            "lymphocytes" | "lym" => Self::Lymphocytes,
            "mucus" | "muc" => Self::Mucus,
            "normal" | "norm" => Self::Normal,
            "smooth muscle" | "smooth_muscle" | "mus" => Self::SmoothMuscle,
            "stroma" | "str" => Self::Stroma,
            "tumor" | "tum" => Self::Tumor,
            _ => return Err(CohortError::UnknownSourceClass(s.to_string())),
        };
        Ok(c)
    }
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct NineClassEntry {
    pub patch_id: String,
    pub source_class: NineClass,
}

/// Per-residual-class sample sizes: `n_other / 5` each, the remainder given
/// one apiece to the alphabetically first classes.
pub fn other_quotas(n_other: usize) -> [usize; 5] {
    let base = n_other / 5;
    let rem = n_other % 5;
    std::array::from_fn(|i| base + usize::from(i < rem))
}

/// Keeps every tumor and stroma entry and draws an evenly spread sample of
/// `n_other` residual entries as *other*. Adipose and background are never
/// used. Output: tumor and stroma in input order, then *other* grouped by
/// source class.
pub fn collapse_other(entries: &[NineClassEntry], n_other: usize, seed: u64) -> Result<Vec<(String, TissueClass)>> {
    let mut out: Vec<(String, TissueClass)> = entries
        .iter()
        .filter_map(|e| match e.source_class {
            NineClass::Tumor => Some((e.patch_id.clone(), TissueClass::Tumor)),
            NineClass::Stroma => Some((e.patch_id.clone(), TissueClass::Stroma)),
            _ => None,
        })
        .collect();
    let quotas = other_quotas(n_other);
    let mut rng = SplitMix64::new(seed);
    for (class, quota) in NineClass::RESIDUAL.into_iter().zip(quotas) {
        let mut pool: Vec<&NineClassEntry> = entries.iter().filter(|e| e.source_class == class).collect();
        if pool.len() < quota {
            return Err(CohortError::InsufficientClassPopulation {
                class: class.name(),
                available: pool.len(),
                required: quota,
            });
        }
        rng.shuffle(&mut pool);
        out.extend(pool[..quota].iter().map(|e| (e.patch_id.clone(), TissueClass::Other)));
    }
    Ok(out)
}

/// Stratified random holdout. Returns `(train, validation)` index lists in
/// ascending order; the validation set holds `round(fraction * n)` items,
/// spread over classes by largest remainder.
pub fn holdout_split(labels: &[TissueClass], fraction: f64, seed: u64) -> Result<(Vec<usize>, Vec<usize>)> {
    let n = labels.len();
    if n < 3 {
        return Err(CohortError::TooFewPatches {
            available: n,
            required: 3,
        });
    }
    if !(fraction > 0.0 && fraction < 1.0) {
        return Err(CohortError::InvalidParameter(format!(
            "holdout fraction {fraction} must lie in (0, 1)"
        )));
    }
    let target = (fraction * n as f64).round() as usize;
    if target == 0 || target == n {
        return Err(CohortError::TooFewPatches {
            available: n,
            required: 3,
        });
    }
    let by_class = group_by_class(labels);
    let exact: Vec<f64> = by_class.iter().map(|g| fraction * g.len() as f64).collect();
    let mut quota: Vec<usize> = exact.iter().map(|q| q.floor() as usize).collect();
    let mut order: Vec<usize> = (0..3).collect();
    // largest fractional part first, ties to the lower class index
    order.sort_by(|&a, &b| {
        let fa = exact[a] - exact[a].floor();
        let fb = exact[b] - exact[b].floor();
        fb.total_cmp(&fa).then(a.cmp(&b))
    });
    let mut missing = target - quota.iter().sum::<usize>();
    for &k in order.iter().cycle() {
        if missing == 0 {
            break;
        }
        if quota[k] < by_class[k].len() {
            quota[k] += 1;
            missing -= 1;
        }
    }

    let mut rng = SplitMix64::new(seed);
    let mut val = Vec::with_capacity(target);
    for (k, group) in by_class.into_iter().enumerate() {
        let mut g = group;
        rng.shuffle(&mut g);
        val.extend_from_slice(&g[..quota[k]]);
    }
    val.sort_unstable();
    let mut in_val = vec![false; n];
    for &i in &val {
        in_val[i] = true;
    }
    let train = (0..n).filter(|&i| !in_val[i]).collect();
    Ok((train, val))
}

fn group_by_class(labels: &[TissueClass]) -> [Vec<usize>; 3] {
    let mut groups: [Vec<usize>; 3] = Default::default();
    for (i, l) in labels.iter().enumerate() {
        groups[l.index()].push(i);
    }
    groups
}

/// Stratified k-fold partition. Each class is shuffled and dealt round-robin,
/// the dealer position carrying over between classes, so both per-class and
/// overall fold sizes differ by at most one. Indices within a fold ascend.
pub fn kfold(labels: &[TissueClass], k: usize, seed: u64) -> Result<Vec<Vec<usize>>> {
    if k < 2 {
        return Err(CohortError::InvalidParameter("k must be at least 2".into()));
    }
    if labels.len() < k {
        return Err(CohortError::TooFewPatches {
            available: labels.len(),
            required: k,
        });
    }
    let mut rng = SplitMix64::new(seed);
    let mut folds = vec![Vec::new(); k];
    let mut dealer = 0;
    for mut group in group_by_class(labels) {
        rng.shuffle(&mut group);
        for i in group {
            folds[dealer].push(i);
            dealer = (dealer + 1) % k;
        }
    }
    for f in &mut folds {
        f.sort_unstable();
    }
    Ok(folds)
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord)]
pub enum SplitTag {
    Train,
    Val,
    Test,
    Fold(u8),
}

impl fmt::Display for SplitTag {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            Self::Train => f.write_str("train"),
            Self::Val => f.write_str("val"),
            Self::Test => f.write_str("test"),
            Self::Fold(i) => write!(f, "fold{i}"),
        }
    }
}

impl FromStr for SplitTag {
    type Err = CohortError;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "train" => Ok(Self::Train),
            "val" => Ok(Self::Val),
            "test" => Ok(Self::Test),
            _ => s
                .strip_prefix("fold")
                .and_then(|d| d.parse::<u8>().ok())
                .filter(|&d| d <= 4)
                .map(Self::Fold)
                .ok_or_else(|| CohortError::InvalidManifest(format!("unknown split {s:?}"))),
        }
    }
}

/// One row of `manifest.csv` (`patch_id,slide_id,class,split`).
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct ManifestRow {
    pub patch_id: String,
    pub slide_id: String,
    pub class: TissueClass,
    pub split: SplitTag,
}

#[derive(Serialize, Deserialize)]
struct RawRow {
    patch_id: String,
    slide_id: String,
    class: String,
    split: String,
}

pub fn write_manifest(path: &Path, rows: &[ManifestRow]) -> Result<()> {
    let mut w = csv::Writer::from_path(path)?;
    for r in rows {
        w.serialize(RawRow {
            patch_id: r.patch_id.clone(),
            slide_id: r.slide_id.clone(),
            class: r.class.name().to_string(),
            split: r.split.to_string(),
        })?;
    }
    w.flush()?;
    Ok(())
}

pub fn read_manifest(path: &Path) -> Result<Vec<ManifestRow>> {
    let mut rdr = csv::Reader::from_path(path)?;
    let mut rows = Vec::new();
    for rec in rdr.deserialize() {
        let raw: RawRow = rec?;
        let class = raw
            .class
            .parse()
            .map_err(|_| CohortError::InvalidManifest(format!("unknown class {:?}", raw.class)))?;
        rows.push(ManifestRow {
            patch_id: raw.patch_id,
            slide_id: raw.slide_id,
            class,
            split: raw.split.parse()?,
        });
    }
    Ok(rows)
}

/// Per-slide class counts from manifest rows, ordered by slide id.
pub fn slide_entries(rows: &[ManifestRow]) -> Vec<SlideEntry> {
    let mut map: BTreeMap<&str, ClassCounts> = BTreeMap::new();
    for r in rows {
        map.entry(&r.slide_id).or_default()[r.class.index()] += 1;
    }
    map.into_iter()
        .map(|(id, counts)| SlideEntry {
            slide_id: id.to_string(),
            patch_counts: counts,
            true_tsr: None,
        })
        .collect()
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;
    use TissueClass::*;

    fn balanced(n_per: usize) -> Vec<TissueClass> {
        TissueClass::ALL.iter().flat_map(|&c| std::iter::repeat_n(c, n_per)).collect()
    }

    #[test]
    fn symmetric_cohort_splits_first_try() {
        let slides: Vec<SlideEntry> = (0..40)
            .map(|i| SlideEntry::new(format!("s{i}"), [100, 100, 100], None).unwrap())
            .collect();
        let r = split_with_constraints(&slides, 1, &SplitConstraints::default()).unwrap();
        assert_eq!(r.attempts, 1);
        assert_eq!(r.train_totals[0], r.train_totals[1]);
        assert!(r.test_slides.len() >= 4);
        assert_eq!(r.train_slides.len() + r.test_slides.len(), 40);
        assert_eq!(r, split_with_constraints(&slides, 1, &SplitConstraints::default()).unwrap());
    }

    #[test]
    fn too_little_stroma_is_unsatisfiable() {
        let slides: Vec<SlideEntry> = (0..40)
            .map(|i| SlideEntry::new(format!("s{i}"), [100, 20, 100], None).unwrap())
            .collect();
        assert!(matches!(
            split_with_constraints(&slides, 1, &SplitConstraints::default()),
            Err(CohortError::ConstraintsUnsatisfiable { .. })
        ));
    }

    #[test]
    fn slide_entry_validates_tsr() {
        assert!(SlideEntry::new("a", [1, 1, 1], Some(35)).is_err());
        assert!(SlideEntry::new("a", [1, 1, 1], Some(100)).is_err());
        assert!(SlideEntry::new("a", [1, 1, 1], Some(90)).is_ok());
    }

    #[test]
    fn quotas() {
        assert_eq!(other_quotas(10_445), [2089; 5]);
        assert_eq!(other_quotas(7), [2, 2, 1, 1, 1]);
    }

    fn nine_class_corpus(per_class: usize) -> Vec<NineClassEntry> {
        use NineClass::*;
        [Adipose, Background, Debris, Lymphocytes, Mucus, Normal, SmoothMuscle, Stroma, Tumor]
            .into_iter()
            .flat_map(|c| {
                (0..per_class).map(move |i| NineClassEntry {
                    patch_id: format!("{}-{i}", c.name()),
                    source_class: c,
                })
            })
            .collect()
    }

    #[test]
    fn collapse_keeps_tumor_stroma_and_samples_other() {
        let corpus = nine_class_corpus(10);
        let out = collapse_other(&corpus, 7, 5).unwrap();
        let count = |c: TissueClass| out.iter().filter(|(_, l)| *l == c).count();
        assert_eq!(count(Tumor), 10);
        assert_eq!(count(Stroma), 10);
        assert_eq!(count(Other), 7);
        assert!(out.iter().all(|(id, _)| !id.starts_with("adipose") && !id.starts_with("background")));
        let from = |p: &str| out.iter().filter(|(id, _)| id.starts_with(p)).count();
        assert_eq!(
            [from("debris"), from("lymphocytes"), from("mucus"), from("normal"), from("smooth")],
            [2, 2, 1, 1, 1]
        );
        assert_eq!(out, collapse_other(&corpus, 7, 5).unwrap());
        assert!(matches!(
            collapse_other(&corpus, 60, 5),
            Err(CohortError::InsufficientClassPopulation { .. })
        ));
    }

    #[test]
    fn nine_class_names() {
        assert_eq!("smooth muscle".parse::<NineClass>().unwrap(), NineClass::SmoothMuscle);
        assert_eq!("MUS".parse::<NineClass>().unwrap(), NineClass::SmoothMuscle);
        assert!("glands".parse::<NineClass>().is_err());
    }

    #[test]
    fn holdout_thirds() {
        let labels = balanced(3);
        let (train, val) = holdout_split(&labels, 1.0 / 3.0, 9).unwrap();
        assert_eq!(val.len(), 3);
        assert_eq!(train.len(), 6);
        for c in TissueClass::ALL {
            assert_eq!(val.iter().filter(|&&i| labels[i] == c).count(), 1);
        }
        assert_eq!((train.clone(), val.clone()), holdout_split(&labels, 1.0 / 3.0, 9).unwrap());
        assert!(holdout_split(&labels, 0.0, 9).is_err());
        assert!(holdout_split(&labels[..2], 0.5, 9).is_err());
    }

    #[test]
    fn kfold_sizes() {
        let folds = kfold(&balanced(100), 5, 2).unwrap();
        let labels = balanced(100);
        for f in &folds {
            for c in TissueClass::ALL {
                assert_eq!(f.iter().filter(|&&i| labels[i] == c).count(), 20);
            }
        }
        let ten: Vec<TissueClass> = vec![Tumor; 10];
        assert!(kfold(&ten, 5, 1).unwrap().iter().all(|f| f.len() == 2));
        assert!(kfold(&ten[..3], 5, 1).is_err());
    }

    #[test]
    fn manifest_round_trip() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("m.csv");
        let rows = vec![
            ManifestRow {
                patch_id: "p1".into(),
                slide_id: "s1".into(),
                class: Stroma,
                split: SplitTag::Fold(3),
            },
            ManifestRow {
                patch_id: "p2".into(),
                slide_id: "s1".into(),
                class: Other,
                split: SplitTag::Val,
            },
        ];
        write_manifest(&path, &rows).unwrap();
        let text = std::fs::read_to_string(&path).unwrap();
        assert!(text.starts_with("patch_id,slide_id,class,split\n"));
        assert_eq!(read_manifest(&path).unwrap(), rows);
        assert_eq!(slide_entries(&rows)[0].patch_counts, [0, 1, 1]);
    }

    proptest! {
        #[test]
        fn kfold_is_a_stratified_partition(
            raw in proptest::collection::vec(0usize..3, 5..120),
            k in 2usize..6,
            seed: u64,
        ) {
            let labels: Vec<TissueClass> = raw.iter().map(|&i| TissueClass::ALL[i]).collect();
            prop_assume!(labels.len() >= k);
            let folds = kfold(&labels, k, seed).unwrap();
            let mut seen: Vec<usize> = folds.concat();
            seen.sort_unstable();
            prop_assert_eq!(seen, (0..labels.len()).collect::<Vec<_>>());
            let sizes: Vec<usize> = folds.iter().map(Vec::len).collect();
            prop_assert!(sizes.iter().max().unwrap() - sizes.iter().min().unwrap() <= 1);
            for c in TissueClass::ALL {
                let per: Vec<usize> = folds.iter().map(|f| f.iter().filter(|&&i| labels[i] == c).count()).collect();
                prop_assert!(per.iter().max().unwrap() - per.iter().min().unwrap() <= 1);
            }
        }

        #[test]
        fn collapse_preserves_counts(n_other in 0usize..40, seed: u64) {
            let corpus = nine_class_corpus(8);
            let out = collapse_other(&corpus, n_other, seed).unwrap();
            prop_assert_eq!(out.iter().filter(|(_, l)| *l == Other).count(), n_other);
            prop_assert_eq!(out.iter().filter(|(_, l)| *l == Tumor).count(), 8);
        }
    }
}
