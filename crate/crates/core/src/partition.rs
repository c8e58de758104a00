//! Fold assignment at item, group or supergroup granularity.
//!
//! Coarser levels keep correlated items (images of one patient, scans of one
//! kidney, everything from one source dataset) inside a single fold so that
//! no test fold leaks into training.

use std::collections::{BTreeMap, BTreeSet, HashMap};
use std::fmt;
use std::fs;
use std::path::Path;
use std::str::FromStr;

use indexmap::IndexMap;
use serde::{Deserialize, Serialize};

use crate::hpspace::SplitMix64;
use crate::manifest::{DataItem, Manifest};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum PartitionLevel {
    Item,
    Group,
    Supergroup,
}

impl PartitionLevel {
    pub fn key<'a>(&self, item: &'a DataItem) -> &'a str {
        match self {
            PartitionLevel::Item => &item.item_id,
            PartitionLevel::Group => &item.group_id,
            PartitionLevel::Supergroup => &item.supergroup_id,
        }
    }

    pub fn as_str(&self) -> &'static str {
        match self {
            PartitionLevel::Item => "item",
            PartitionLevel::Group => "group",
            PartitionLevel::Supergroup => "supergroup",
        }
    }
}

impl fmt::Display for PartitionLevel {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

impl FromStr for PartitionLevel {
    type Err = PartitionError;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        match s {
            "item" => Ok(Self::Item),
            "group" => Ok(Self::Group),
            "supergroup" => Ok(Self::Supergroup),
            other => Err(PartitionError::UnknownLevel(other.to_string())),
        }
    }
}

#[derive(Debug, thiserror::Error)]
pub enum PartitionError {
    #[error("k must be at least 2, got {0}")]
    TooFewFolds(usize),
    #[error("only {units} distinct {level} keys for k={k} folds")]
    TooFewUnits {
        level: PartitionLevel,
        units: usize,
        k: usize,
    },
    #[error("unknown partition level `{0}` (expected item, group or supergroup)")]
    UnknownLevel(String),
    #[error("fold file line {line}: {message}")]
    Parse { line: usize, message: String },
    #[error(transparent)]
    Io(#[from] std::io::Error),
}

#[derive(Debug, Clone, Copy, Default, PartialEq, Eq)]
pub struct PartitionOptions {
    /// Item level only: deal each label's items round-robin so every fold
    /// gets a near-equal share of each class.
    pub stratify: bool,
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct FoldAssignment {
    pub k: usize,
    pub level: PartitionLevel,
    pub seed: u64,
    fold_of: IndexMap<String, usize>,
}

impl FoldAssignment {
    pub fn from_parts(
        k: usize,
        level: PartitionLevel,
        seed: u64,
        fold_of: IndexMap<String, usize>,
    ) -> Self {
        Self {
            k,
            level,
            seed,
            fold_of,
        }
    }

    pub fn fold_of(&self, item_id: &str) -> Option<usize> {
        self.fold_of.get(item_id).copied()
    }

    pub fn entries(&self) -> impl Iterator<Item = (&str, usize)> {
        self.fold_of.iter().map(|(k, v)| (k.as_str(), *v))
    }

    pub fn len(&self) -> usize {
        self.fold_of.len()
    }

    pub fn is_empty(&self) -> bool {
        self.fold_of.is_empty()
    }

    pub fn fold_sizes(&self) -> Vec<usize> {
        let mut sizes = vec![0; self.k];
        for fold in self.fold_of.values() {
            if *fold < self.k {
                sizes[*fold] += 1;
            }
        }
        sizes
    }

    /// Indices into `manifest.items()` whose fold is in `folds`.
    pub fn item_indices(&self, manifest: &Manifest, folds: &[usize]) -> Vec<usize> {
        manifest
            .items()
            .iter()
            .enumerate()
            .filter(|(_, item)| {
                self.fold_of(&item.item_id)
                    .is_some_and(|f| folds.contains(&f))
            })
            .map(|(n, _)| n)
            .collect()
    }

    /// Integrity check at the assignment's own level.
    pub fn check_integrity(&self, manifest: &Manifest) -> Vec<Violation> {
        self.check_integrity_at(manifest, self.level)
    }

    /// Reports every way the assignment fails to cover `manifest` or splits a
    /// unit of `level` across folds. Empty means the assignment is sound.
    pub fn check_integrity_at(&self, manifest: &Manifest, level: PartitionLevel) -> Vec<Violation> {
        let mut violations = Vec::new();
        let mut folds_by_key: BTreeMap<&str, BTreeSet<usize>> = BTreeMap::new();
        for item in manifest.items() {
            match self.fold_of(&item.item_id) {
                None => violations.push(Violation::Unassigned(item.item_id.clone())),
                Some(f) if f >= self.k => violations.push(Violation::FoldOutOfRange {
                    item_id: item.item_id.clone(),
                    fold: f,
                }),
                Some(f) => {
                    folds_by_key.entry(level.key(item)).or_default().insert(f);
                }
            }
        }
        let known: std::collections::HashSet<&str> =
            manifest.items().iter().map(|i| i.item_id.as_str()).collect();
        for id in self.fold_of.keys() {
            if !known.contains(id.as_str()) {
                violations.push(Violation::UnknownItem(id.clone()));
            }
        }
        for (key, folds) in folds_by_key {
            if folds.len() > 1 {
                violations.push(Violation::SplitUnit {
                    level,
                    key: key.to_string(),
                    folds: folds.into_iter().collect(),
                });
            }
        }
        violations
    }

    /// `# k=.. level=.. seed=..` comment, then an `item_id,fold` table.
    pub fn to_text(&self) -> String {
        let mut out = format!(
            "# k={} level={} seed={}\nitem_id,fold\n",
            self.k, self.level, self.seed
        );
        for (id, fold) in &self.fold_of {
            out.push_str(id);
            out.push(',');
            out.push_str(&fold.to_string());
            out.push('\n');
        }
        out
    }

    pub fn parse(text: &str) -> Result<Self, PartitionError> {
        let bad = |line: usize, message: &str| PartitionError::Parse {
            line,
            message: message.to_string(),
        };
        let mut lines = text.lines().enumerate();
        let (_, head) = lines.next().ok_or_else(|| bad(1, "empty fold file"))?;
        let head = head
            .strip_prefix("# ")
            .ok_or_else(|| bad(1, "missing `# k=.. level=.. seed=..` header"))?;
        let (mut k, mut level, mut seed) = (None, None, None);
        for field in head.split_whitespace() {
            match field.split_once('=') {
                Some(("k", v)) => k = v.parse().ok(),
                Some(("level", v)) => level = v.parse().ok(),
                Some(("seed", v)) => seed = v.parse().ok(),
                _ => return Err(bad(1, "unexpected header field")),
            }
        }
        let (Some(k), Some(level), Some(seed)) = (k, level, seed) else {
            return Err(bad(1, "header must carry k, level and seed"));
        };
        match lines.next() {
            Some((_, "item_id,fold")) => {}
            _ => return Err(bad(2, "expected `item_id,fold` column header")),
        }
        let mut fold_of = IndexMap::new();
        for (n, line) in lines {
            if line.is_empty() {
                continue;
            }
            let (id, fold) = line
                .rsplit_once(',')
                .ok_or_else(|| bad(n + 1, "expected `item_id,fold`"))?;
            let fold: usize = fold.parse().map_err(|_| bad(n + 1, "fold is not an integer"))?;
            if fold >= k {
                return Err(bad(n + 1, "fold index out of range"));
            }
            if fold_of.insert(id.to_string(), fold).is_some() {
                return Err(bad(n + 1, "item listed twice"));
            }
        }
        Ok(Self::from_parts(k, level, seed, fold_of))
    }

    pub fn load(path: &Path) -> Result<Self, PartitionError> {
        Self::parse(&fs::read_to_string(path)?)
    }

    pub fn write(&self, path: &Path) -> Result<(), PartitionError> {
        fs::write(path, self.to_text())?;
        Ok(())
    }
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub enum Violation {
    Unassigned(String),
    UnknownItem(String),
    FoldOutOfRange { item_id: String, fold: usize },
    SplitUnit {
        level: PartitionLevel,
        key: String,
        folds: Vec<usize>,
    },
}

impl fmt::Display for Violation {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            Violation::Unassigned(id) => write!(f, "item `{id}` has no fold"),
            Violation::UnknownItem(id) => write!(f, "item `{id}` is not in the manifest"),
            Violation::FoldOutOfRange { item_id, fold } => {
                write!(f, "item `{item_id}` assigned to out-of-range fold {fold}")
            }
            Violation::SplitUnit { level, key, folds } => {
                write!(f, "{level} `{key}` spans folds {folds:?}")
            }
        }
    }
}

/// Splits `manifest` into `k` folds at `level`.
///
/// Item level: seeded shuffle, then round-robin (optionally per label).
/// Group and supergroup level: unit keys are shuffled, then placed
/// largest-first into the currently smallest fold (lowest index on ties).
/// Equal-size units keep their shuffled order.
pub fn assign_folds(
    manifest: &Manifest,
    k: usize,
    level: PartitionLevel,
    seed: u64,
    options: PartitionOptions,
) -> Result<FoldAssignment, PartitionError> {
    if k < 2 {
        return Err(PartitionError::TooFewFolds(k));
    }
    let mut rng = SplitMix64::new(seed);
    let items = manifest.items();
    let fold_by_index = match level {
        PartitionLevel::Item => {
            if items.len() < k {
                return Err(PartitionError::TooFewUnits {
                    level,
                    units: items.len(),
                    k,
                });
            }
            let mut order: Vec<usize> = (0..items.len()).collect();
            rng.shuffle(&mut order);
            if options.stratify {
                // stable partition of the shuffled order by class
                let classes = manifest.class_names();
                order.sort_by_key(|&n| {
                    classes
                        .iter()
                        .position(|c| *c == items[n].label)
                        .unwrap_or(usize::MAX)
                });
            }
            let mut folds = vec![0; items.len()];
            for (pos, &n) in order.iter().enumerate() {
                folds[n] = pos % k;
            }
            folds
        }
        PartitionLevel::Group | PartitionLevel::Supergroup => {
            let mut sizes: IndexMap<&str, usize> = IndexMap::new();
            for item in items {
                *sizes.entry(level.key(item)).or_default() += 1;
            }
            if sizes.len() < k {
                return Err(PartitionError::TooFewUnits {
                    level,
                    units: sizes.len(),
                    k,
                });
            }
            let mut units: Vec<(&str, usize)> = sizes.into_iter().collect();
            rng.shuffle(&mut units);
            units.sort_by_key(|u| std::cmp::Reverse(u.1));
            let placement = greedy_place(&units.iter().map(|u| u.1).collect::<Vec<_>>(), k);
            let fold_of_key: HashMap<&str, usize> = units
                .iter()
                .zip(placement)
                .map(|((key, _), fold)| (*key, fold))
                .collect();
            items.iter().map(|i| fold_of_key[level.key(i)]).collect()
        }
    };
    let fold_of = items
        .iter()
        .zip(fold_by_index)
        .map(|(item, fold)| (item.item_id.clone(), fold))
        .collect();
    Ok(FoldAssignment::from_parts(k, level, seed, fold_of))
}

/// Places units, in the given order, into the fold with the smallest current
/// load; ties go to the lowest fold index. Returns the fold of each unit.
pub fn greedy_place(sizes: &[usize], k: usize) -> Vec<usize> {
    let mut load = vec![0usize; k];
    sizes
        .iter()
        .map(|&size| {
            let (fold, _) = load
                .iter()
                .enumerate()
                .min_by_key(|(n, l)| (**l, *n))
                .expect("k >= 1");
            load[fold] += size;
            fold
        })
        .collect()
}

#[cfg(test)]
mod tests {
    use super::*;

    fn grouped(sizes: &[usize]) -> Manifest {
        let mut items = Vec::new();
        for (g, &size) in sizes.iter().enumerate() {
            for n in 0..size {
                let mut item = DataItem::new(format!("g{g}_{n}"), "x".to_string());
                item.group_id = format!("g{g}");
                item.supergroup_id = format!("g{g}");
                items.push(item);
            }
        }
        Manifest::new(items).unwrap()
    }

    #[test]
    fn exact_item_division() {
        let m = grouped(&[1; 10]);
        let a = assign_folds(&m, 5, PartitionLevel::Item, 3, Default::default()).unwrap();
        assert_eq!(a.fold_sizes(), vec![2; 5]);
    }

    /// All orderings of equal-size units under the lowest-index tie rule.
    fn brute_force_outcomes(sizes: &[usize], k: usize) -> BTreeSet<Vec<usize>> {
        fn perms(v: &mut Vec<usize>, n: usize, out: &mut Vec<Vec<usize>>) {
            if n == v.len() {
                out.push(v.clone());
                return;
            }
            for i in n..v.len() {
                v.swap(n, i);
                perms(v, n + 1, out);
                v.swap(n, i);
            }
        }
        let mut all = Vec::new();
        perms(&mut (0..sizes.len()).collect(), 0, &mut all);
        let mut outcomes = BTreeSet::new();
        for order in all {
            let ordered: Vec<usize> = order.iter().map(|&n| sizes[n]).collect();
            // only orders that are largest-first
            if ordered.windows(2).any(|w| w[0] < w[1]) {
                continue;
            }
            let mut load = vec![0; k];
            for s in ordered {
                let f = (0..k).min_by_key(|&f| (load[f], f)).unwrap();
                load[f] += s;
            }
            load.sort();
            outcomes.insert(load);
        }
        outcomes
    }

    #[test]
    fn greedy_seven_groups_into_three() {
        let sizes = [5, 5, 4, 3, 2, 1, 1];
        assert_eq!(
            brute_force_outcomes(&sizes, 3),
            BTreeSet::from([vec![7, 7, 7]])
        );
        for seed in 0..20 {
            let a = assign_folds(&grouped(&sizes), 3, PartitionLevel::Group, seed, Default::default())
                .unwrap();
            assert_eq!(a.fold_sizes(), vec![7, 7, 7]);
            assert!(a.check_integrity(&grouped(&sizes)).is_empty());
        }
    }

    #[test]
    fn too_few_units() {
        let m = grouped(&[3, 3]);
        assert!(matches!(
            assign_folds(&m, 3, PartitionLevel::Group, 0, Default::default()),
            Err(PartitionError::TooFewUnits { units: 2, .. })
        ));
        assert!(matches!(
            assign_folds(&m, 1, PartitionLevel::Item, 0, Default::default()),
            Err(PartitionError::TooFewFolds(1))
        ));
    }

    #[test]
    fn corrupted_assignment_names_the_group() {
        let m = grouped(&[2, 2, 2]);
        let a = assign_folds(&m, 3, PartitionLevel::Group, 0, Default::default()).unwrap();
        assert!(a.check_integrity(&m).is_empty());
        let mut map: IndexMap<String, usize> =
            a.entries().map(|(id, f)| (id.to_string(), f)).collect();
        let f = map["g1_0"];
        map.insert("g1_0".into(), (f + 1) % 3);
        let bad = FoldAssignment::from_parts(3, PartitionLevel::Group, 0, map);
        let v = bad.check_integrity(&m);
        assert_eq!(v.len(), 1);
        assert!(matches!(&v[0], Violation::SplitUnit { key, .. } if key == "g1"));
    }

    #[test]
    fn item_level_checked_at_group_level() {
        let sizes = [3, 3, 1, 2, 4, 1];
        let m = grouped(&sizes);
        let a = assign_folds(&m, 3, PartitionLevel::Item, 11, Default::default()).unwrap();
        // direct scan: a group spans folds if its items disagree
        let expected = sizes
            .iter()
            .enumerate()
            .filter(|(g, &s)| {
                let folds: BTreeSet<usize> = (0..s)
                    .map(|n| a.fold_of(&format!("g{g}_{n}")).unwrap())
                    .collect();
                folds.len() > 1
            })
            .count();
        let violations = a.check_integrity_at(&m, PartitionLevel::Group);
        assert_eq!(violations.len(), expected);
        assert!(expected > 0);
    }

    #[test]
    fn stratified_item_split_balances_classes() {
        let items: Vec<DataItem> = (0..40)
            .map(|n| DataItem::new(format!("i{n}"), if n < 12 { "a" } else { "b" }.to_string()))
            .collect();
        let m = Manifest::new(items).unwrap();
        let a = assign_folds(&m, 4, PartitionLevel::Item, 5, PartitionOptions { stratify: true })
            .unwrap();
        assert_eq!(a.fold_sizes(), vec![10; 4]);
        for fold in 0..4 {
            let a_count = a
                .item_indices(&m, &[fold])
                .iter()
                .filter(|&&n| m.items()[n].label == "a")
                .count();
            assert_eq!(a_count, 3);
        }
    }

    #[test]
    fn text_round_trip() {
        let m = grouped(&[2, 1, 3, 2]);
        let a = assign_folds(&m, 2, PartitionLevel::Group, 9, Default::default()).unwrap();
        let text = a.to_text();
        assert!(text.starts_with("# k=2 level=group seed=9\nitem_id,fold\n"));
        assert_eq!(FoldAssignment::parse(&text).unwrap(), a);
    }
}
