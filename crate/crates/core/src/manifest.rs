//! Dataset manifest: every item with its label and grouping hierarchy
//! (item within group within supergroup, e.g. image / patient / dataset).

use std::collections::{BTreeMap, HashMap, HashSet};
use std::fs;
use std::path::Path;

use indexmap::IndexMap;

#[derive(Debug, thiserror::Error)]
pub enum ManifestError {
    #[error("manifest row {row}: {message}")]
    Parse { row: usize, message: String },
    #[error("duplicate item_id `{0}`")]
    DuplicateItem(String),
    #[error("group `{group}` appears under supergroups `{first}` and `{second}`")]
    GroupSpansSupergroups {
        group: String,
        first: String,
        second: String,
    },
    #[error("manifest has no items")]
    Empty,
    #[error(transparent)]
    Io(#[from] std::io::Error),
}

#[derive(Debug, Clone, PartialEq)]
pub struct DataItem {
    pub item_id: String,
    pub group_id: String,
    pub supergroup_id: String,
    pub label: String,
    pub features: Option<Vec<f64>>,
    pub payload_ref: Option<String>,
}

impl DataItem {
    /// Item with no hierarchy: group and supergroup default to the item itself.
    pub fn new<S: Into<String>>(item_id: S, label: S) -> Self {
        let item_id = item_id.into();
        Self {
            group_id: item_id.clone(),
            supergroup_id: item_id.clone(),
            item_id,
            label: label.into(),
            features: None,
            payload_ref: None,
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct Manifest {
    items: Vec<DataItem>,
    class_names: Vec<String>,
}

impl Manifest {
    /// Validates the item list: non-empty, unique ids, groups nested in a
    /// single supergroup.
    pub fn new(items: Vec<DataItem>) -> Result<Self, ManifestError> {
        if items.is_empty() {
            return Err(ManifestError::Empty);
        }
        let mut ids = HashSet::with_capacity(items.len());
        let mut group_parent: HashMap<&str, &str> = HashMap::new();
        let mut class_names: Vec<String> = Vec::new();
        for item in &items {
            if !ids.insert(item.item_id.as_str()) {
                return Err(ManifestError::DuplicateItem(item.item_id.clone()));
            }
            match group_parent.get(item.group_id.as_str()) {
                Some(parent) if *parent != item.supergroup_id => {
                    return Err(ManifestError::GroupSpansSupergroups {
                        group: item.group_id.clone(),
                        first: parent.to_string(),
                        second: item.supergroup_id.clone(),
                    })
                }
                Some(_) => {}
                None => {
                    group_parent.insert(&item.group_id, &item.supergroup_id);
                }
            }
            if !class_names.contains(&item.label) {
                class_names.push(item.label.clone());
            }
        }
        Ok(Self { items, class_names })
    }

    pub fn items(&self) -> &[DataItem] {
        &self.items
    }

    pub fn len(&self) -> usize {
        self.items.len()
    }

    pub fn is_empty(&self) -> bool {
        self.items.is_empty()
    }

    /// Distinct labels in first-appearance order.
    pub fn class_names(&self) -> &[String] {
        &self.class_names
    }

    pub fn class_index(&self, label: &str) -> Option<usize> {
        self.class_names.iter().position(|c| c == label)
    }

    /// Feature dimension if every item carries features of one length.
    pub fn feature_dim(&self) -> Option<usize> {
        let first = self.items[0].features.as_ref()?.len();
        self.items
            .iter()
            .all(|i| i.features.as_ref().map(Vec::len) == Some(first))
            .then_some(first)
    }

    pub fn summarize(&self) -> ManifestSummary {
        let mut s = ManifestSummary {
            total: self.items.len(),
            ..Default::default()
        };
        for item in &self.items {
            *s.per_class.entry(item.label.clone()).or_default() += 1;
            *s.per_group.entry(item.group_id.clone()).or_default() += 1;
            *s.per_supergroup.entry(item.supergroup_id.clone()).or_default() += 1;
            *s.per_supergroup_class
                .entry((item.supergroup_id.clone(), item.label.clone()))
                .or_default() += 1;
        }
        s
    }

    pub fn parse(text: &str) -> Result<Self, ManifestError> {
        let mut reader = csv::ReaderBuilder::new()
            .has_headers(true)
            .trim(csv::Trim::All)
            .from_reader(text.as_bytes());
        let headers = reader
            .headers()
            .map_err(|e| ManifestError::Parse {
                row: 1,
                message: e.to_string(),
            })?
            .clone();
        let column = |name: &str| headers.iter().position(|h| h == name);
        let (Some(id_col), Some(label_col)) = (column("item_id"), column("label")) else {
            return Err(ManifestError::Parse {
                row: 1,
                message: "header must name at least `item_id` and `label`".into(),
            });
        };
        let group_col = column("group_id");
        let super_col = column("supergroup_id");
        let feat_col = column("features");
        let payload_col = column("payload_ref");

        let mut items = Vec::new();
        for (n, record) in reader.records().enumerate() {
            // header is row 1
            let row = n + 2;
            let record = record.map_err(|e| ManifestError::Parse {
                row,
                message: e.to_string(),
            })?;
            let field = |col: Option<usize>| {
                col.and_then(|c| record.get(c))
                    .filter(|v| !v.is_empty())
                    .map(str::to_string)
            };
            let item_id = field(Some(id_col)).ok_or_else(|| ManifestError::Parse {
                row,
                message: "empty item_id".into(),
            })?;
            let label = field(Some(label_col)).ok_or_else(|| ManifestError::Parse {
                row,
                message: "empty label".into(),
            })?;
            let group_id = field(group_col).unwrap_or_else(|| item_id.clone());
            let supergroup_id = field(super_col).unwrap_or_else(|| group_id.clone());
            let features = field(feat_col)
                .map(|raw| parse_features(&raw))
                .transpose()
                .map_err(|message| ManifestError::Parse { row, message })?;
            items.push(DataItem {
                item_id,
                group_id,
                supergroup_id,
                label,
                features,
                payload_ref: field(payload_col),
            });
        }
        Self::new(items)
    }

    pub fn load(path: &Path) -> Result<Self, ManifestError> {
        let manifest = Self::parse(&fs::read_to_string(path)?)?;
        if let Some(note) = manifest.summarize().imbalance_note() {
            log::info!("{}: {note}", path.display());
        }
        Ok(manifest)
    }

    /// Canonical text form. Optional columns are written only when some item
    /// uses them.
    pub fn to_csv(&self) -> String {
        let with_features = self.items.iter().any(|i| i.features.is_some());
        let with_payload = self.items.iter().any(|i| i.payload_ref.is_some());
        let mut writer = csv::WriterBuilder::new()
            .terminator(csv::Terminator::Any(b'\n'))
            .from_writer(Vec::new());
        let mut header = vec!["item_id", "group_id", "supergroup_id", "label"];
        if with_features {
            header.push("features");
        }
        if with_payload {
            header.push("payload_ref");
        }
        writer.write_record(&header).expect("in-memory write");
        for item in &self.items {
            let mut row = vec![
                item.item_id.clone(),
                item.group_id.clone(),
                item.supergroup_id.clone(),
                item.label.clone(),
            ];
            if with_features {
                row.push(item.features.as_deref().map(format_features).unwrap_or_default());
            }
            if with_payload {
                row.push(item.payload_ref.clone().unwrap_or_default());
            }
            writer.write_record(&row).expect("in-memory write");
        }
        String::from_utf8(writer.into_inner().expect("in-memory flush")).expect("utf-8 input")
    }

    pub fn write(&self, path: &Path) -> Result<(), ManifestError> {
        fs::write(path, self.to_csv())?;
        Ok(())
    }
}

fn parse_features(raw: &str) -> Result<Vec<f64>, String> {
    raw.split(';')
        .map(|v| {
            let v = v.trim();
            v.parse::<f64>()
                .ok()
                .filter(|x| x.is_finite())
                .ok_or_else(|| format!("bad feature value `{v}`"))
        })
        .collect()
}

fn format_features(values: &[f64]) -> String {
    values
        .iter()
        .map(|v| v.to_string())
        .collect::<Vec<_>>()
        .join(";")
}

/// Item counts per class, group, supergroup and (supergroup, class).
#[derive(Debug, Clone, Default, PartialEq, Eq)]
pub struct ManifestSummary {
    pub total: usize,
    pub per_class: IndexMap<String, usize>,
    pub per_group: IndexMap<String, usize>,
    pub per_supergroup: IndexMap<String, usize>,
    pub per_supergroup_class: BTreeMap<(String, String), usize>,
}

impl ManifestSummary {
    pub fn class_count(&self, label: &str) -> usize {
        self.per_class.get(label).copied().unwrap_or(0)
    }

    /// Informational note when class counts are unequal. Never an error.
    pub fn imbalance_note(&self) -> Option<String> {
        let max = self.per_class.values().max()?;
        let min = self.per_class.values().min()?;
        (max != min).then(|| {
            let counts = self
                .per_class
                .iter()
                .map(|(c, n)| format!("{c}={n}"))
                .collect::<Vec<_>>()
                .join(", ");
            format!("classes are imbalanced ({counts})")
        })
    }
}
