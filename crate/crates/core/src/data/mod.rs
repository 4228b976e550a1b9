//! Sparse observations and the feature space they live in.

mod encode;
mod libsvm;
mod split;

use serde::{Deserialize, Serialize};

use crate::{Error, Result};

pub use encode::{
    binarize, encode_in_space, encode_indexed, encode_user_item, read_item_titles, read_ratings, Rating,
    POSITIVE_RATING_THRESHOLD,
};
pub use libsvm::{parse_groups, parse_libsvm, write_groups, write_libsvm};
pub use split::{partition_sizes, split, split_indices, train_test_split};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Task {
    Regression,
    Classification,
}

impl std::str::FromStr for Task {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "regression" => Ok(Task::Regression),
            "classification" => Ok(Task::Classification),
            other => Err(Error::invalid(format!("unknown task {other:?}"))),
        }
    }
}

impl std::fmt::Display for Task {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(match self {
            Task::Regression => "regression",
            Task::Classification => "classification",
        })
    }
}

/// A contiguous block of feature indices sharing one prior, `[start, end)`.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct FeatureGroup {
    pub name: String,
    pub start: usize,
    pub end: usize,
}

impl FeatureGroup {
    pub fn len(&self) -> usize {
        self.end - self.start
    }

    pub fn is_empty(&self) -> bool {
        self.start == self.end
    }

    pub fn contains(&self, k: usize) -> bool {
        (self.start..self.end).contains(&k)
    }
}

/// Feature layout: `K` features partitioned into `G` contiguous groups.
///
/// Group ids are 0-based here; the global bias has its own prior and is not a
/// member of any group.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct FeatureSpace {
    groups: Vec<FeatureGroup>,
    /// Optional human-readable label per feature (e.g. the raw user id).
    #[serde(default, skip_serializing_if = "Vec::is_empty")]
    labels: Vec<String>,
}

impl FeatureSpace {
    /// Groups must tile `[0, K)` in order without gaps.
    pub fn new(groups: Vec<FeatureGroup>) -> Result<Self> {
        if groups.is_empty() {
            return Err(Error::Empty("feature groups"));
        }
        let mut next = 0;
        for g in &groups {
            if g.start != next || g.end < g.start {
                return Err(Error::invalid(format!(
                    "group {:?} covers [{}, {}) but the next free index is {next}",
                    g.name, g.start, g.end
                )));
            }
            next = g.end;
        }
        Ok(FeatureSpace {
            groups,
            labels: Vec::new(),
        })
    }

    /// Convenience constructor from `(name, size)` pairs laid out in order.
    pub fn from_sizes<S: Into<String>>(sizes: impl IntoIterator<Item = (S, usize)>) -> Self {
        let mut start = 0;
        let groups = sizes
            .into_iter()
            .map(|(name, n)| {
                let g = FeatureGroup {
                    name: name.into(),
                    start,
                    end: start + n,
                };
                start += n;
                g
            })
            .collect();
        FeatureSpace::new(groups).expect("sizes always tile")
    }

    pub fn with_labels(mut self, labels: Vec<String>) -> Result<Self> {
        if labels.len() != self.num_features() {
            return Err(Error::Dimension(format!(
                "{} labels for {} features",
                labels.len(),
                self.num_features()
            )));
        }
        self.labels = labels;
        Ok(self)
    }

    pub fn num_features(&self) -> usize {
        self.groups.last().map_or(0, |g| g.end)
    }

    pub fn num_groups(&self) -> usize {
        self.groups.len()
    }

    pub fn groups(&self) -> &[FeatureGroup] {
        &self.groups
    }

    pub fn group(&self, g: usize) -> &FeatureGroup {
        &self.groups[g]
    }

    pub fn group_by_name(&self, name: &str) -> Option<usize> {
        self.groups.iter().position(|g| g.name == name)
    }

    /// Group id of feature `k`. Panics if `k >= K`.
    pub fn group_of(&self, k: usize) -> usize {
        self.groups.partition_point(|g| g.end <= k).min(self.groups.len() - 1)
    }

    /// Dense feature → group table.
    pub fn group_table(&self) -> Vec<usize> {
        let mut table = Vec::with_capacity(self.num_features());
        for (g, group) in self.groups.iter().enumerate() {
            table.extend(std::iter::repeat_n(g, group.len()));
        }
        table
    }

    pub fn label(&self, k: usize) -> Option<&str> {
        self.labels.get(k).map(String::as_str)
    }
}

/// One observation: canonical sparse features plus a label.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SparseInstance {
    entries: Vec<(usize, f64)>,
    pub label: f64,
}

impl SparseInstance {
    /// Sorts entries by index and drops explicit zeros.
    pub fn new(mut entries: Vec<(usize, f64)>, label: f64) -> Result<Self> {
        entries.retain(|&(_, v)| v != 0.0);
        entries.sort_by_key(|&(k, _)| k);
        if let Some(w) = entries.windows(2).find(|w| w[0].0 == w[1].0) {
            return Err(Error::DuplicateFeature(w[0].0));
        }
        Ok(SparseInstance { entries, label })
    }

    /// Instance with value 1 at each of the given (distinct) indices.
    pub fn one_hot(indices: &[usize], label: f64) -> Result<Self> {
        SparseInstance::new(indices.iter().map(|&k| (k, 1.0)).collect(), label)
    }

    pub fn entries(&self) -> &[(usize, f64)] {
        &self.entries
    }

    pub fn max_index(&self) -> Option<usize> {
        self.entries.last().map(|&(k, _)| k)
    }
}

/// An immutable collection of instances over one feature space.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Dataset {
    instances: Vec<SparseInstance>,
    space: FeatureSpace,
    task: Task,
    feature_counts: Vec<usize>,
}

impl Dataset {
    pub fn new(instances: Vec<SparseInstance>, space: FeatureSpace, task: Task) -> Result<Self> {
        let num_features = space.num_features();
        let mut feature_counts = vec![0; num_features];
        for x in &instances {
            if let Some(k) = x.max_index().filter(|&k| k >= num_features) {
                return Err(Error::FeatureOutOfRange { index: k, num_features });
            }
            if task == Task::Classification && x.label != 0.0 && x.label != 1.0 {
                return Err(Error::invalid(format!(
                    "classification label must be 0 or 1, got {}",
                    x.label
                )));
            }
            for &(k, _) in x.entries() {
                feature_counts[k] += 1;
            }
        }
        Ok(Dataset {
            instances,
            space,
            task,
            feature_counts,
        })
    }

    pub fn instances(&self) -> &[SparseInstance] {
        &self.instances
    }

    pub fn space(&self) -> &FeatureSpace {
        &self.space
    }

    pub fn task(&self) -> Task {
        self.task
    }

    /// `N_k`: number of instances in which feature `k` is non-zero.
    pub fn feature_counts(&self) -> &[usize] {
        &self.feature_counts
    }

    pub fn len(&self) -> usize {
        self.instances.len()
    }

    pub fn is_empty(&self) -> bool {
        self.instances.is_empty()
    }

    /// New dataset over the same space holding the selected instances.
    pub fn subset(&self, indices: &[usize]) -> Dataset {
        let instances = indices.iter().map(|&i| self.instances[i].clone()).collect();
        Dataset::new(instances, self.space.clone(), self.task).expect("subset of a valid dataset")
    }

    pub fn labels(&self) -> impl Iterator<Item = f64> + '_ {
        self.instances.iter().map(|x| x.label)
    }
}
