//! Synthetic manifests with the item/group/supergroup hierarchy, for demos
//! and tests at desk scale.

use crate::hpspace::SplitMix64;
use crate::manifest::{DataItem, Manifest};

#[derive(Debug, Clone, PartialEq)]
pub struct SyntheticSpec {
    pub supergroups: usize,
    /// Groups per class inside each supergroup. Every group holds one class.
    pub groups_per_class: usize,
    pub items_per_group: usize,
    pub classes: Vec<String>,
    /// Feature vectors are emitted when set.
    pub feature_dim: Option<usize>,
    /// Distance between class centroids in units of the noise SD.
    pub separation: f64,
    pub seed: u64,
}

impl SyntheticSpec {
    /// 4 sites x 2 classes x 620 images, 10 images per patient.
    pub fn xray_analog() -> Self {
        Self {
            supergroups: 4,
            groups_per_class: 62,
            items_per_group: 10,
            classes: vec!["cardiomegaly".into(), "no finding".into()],
            feature_dim: None,
            separation: 2.0,
            seed: 0,
        }
    }

    /// 10 kidneys x 3 classes x 600 images, 10 images per volume.
    pub fn kidney_analog() -> Self {
        Self {
            supergroups: 10,
            groups_per_class: 60,
            items_per_group: 10,
            classes: vec!["cortex".into(), "medulla".into(), "pelvis".into()],
            feature_dim: None,
            separation: 2.0,
            seed: 0,
        }
    }

    pub fn len(&self) -> usize {
        self.supergroups * self.classes.len() * self.groups_per_class * self.items_per_group
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }
}

fn normal(rng: &mut SplitMix64) -> f64 {
    // Box-Muller; 1 - u keeps the log argument positive
    let u = 1.0 - rng.next_f64();
    let v = rng.next_f64();
    (-2.0 * u.ln()).sqrt() * (std::f64::consts::TAU * v).cos()
}

/// Items are ordered supergroup, class, group, item. Ids are `s{S}/c{C}/g{G}/{I}`
/// with groups `s{S}-g{C}-{G}` and supergroups `s{S}`.
pub fn synthetic_manifest(spec: &SyntheticSpec) -> Manifest {
    let mut rng = SplitMix64::new(spec.seed);
    let centroids: Vec<Vec<f64>> = match spec.feature_dim {
        Some(d) => (0..spec.classes.len())
            .map(|_| {
                let v: Vec<f64> = (0..d).map(|_| normal(&mut rng)).collect();
                let norm = v.iter().map(|x| x * x).sum::<f64>().sqrt().max(1e-12);
                v.iter().map(|x| x / norm * spec.separation / std::f64::consts::SQRT_2).collect()
            })
            .collect(),
        None => Vec::new(),
    };
    let mut items = Vec::with_capacity(spec.len());
    for s in 0..spec.supergroups {
        for (c, label) in spec.classes.iter().enumerate() {
            for g in 0..spec.groups_per_class {
                for i in 0..spec.items_per_group {
                    let mut item = DataItem::new(format!("s{s}/c{c}/g{g}/{i}"), label.clone());
                    item.group_id = format!("s{s}-g{c}-{g}");
                    item.supergroup_id = format!("s{s}");
                    if spec.feature_dim.is_some() {
                        item.features = Some(centroids[c].iter().map(|m| m + normal(&mut rng)).collect());
                    }
                    items.push(item);
                }
            }
        }
    }
    Manifest::new(items).expect("generated manifest is valid")
}
