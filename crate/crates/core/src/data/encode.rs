//! User/item one-hot encoding and MovieLens-style rating ingestion.

use std::collections::HashMap;
use std::hash::Hash;
use std::io::BufRead;

use super::{Dataset, FeatureSpace, SparseInstance, Task};
use crate::{Error, Result};

/// Ratings at or above this value become positives in the binary task.
pub const POSITIVE_RATING_THRESHOLD: f64 = 4.0;

pub fn binarize(rating: f64) -> f64 {
    if rating >= POSITIVE_RATING_THRESHOLD {
        1.0
    } else {
        0.0
    }
}

fn target(rating: f64, task: Task) -> f64 {
    match task {
        Task::Regression => rating,
        Task::Classification => binarize(rating),
    }
}

/// Encodes `(user, item, rating)` triples with arbitrary labels.
///
/// Users get indices `0..N_u` and items `N_u..N_u + N_i`, both in order of
/// first appearance. Repeated pairs stay as separate instances.
pub fn encode_user_item<U, I>(ratings: &[(U, I, f64)], task: Task) -> Result<Dataset>
where
    U: Eq + Hash + Clone + ToString,
    I: Eq + Hash + Clone + ToString,
{
    if ratings.is_empty() {
        return Err(Error::Empty("ratings"));
    }
    let mut users: HashMap<U, usize> = HashMap::new();
    let mut items: HashMap<I, usize> = HashMap::new();
    let mut user_labels = Vec::new();
    let mut item_labels = Vec::new();
    let mut pairs = Vec::with_capacity(ratings.len());
    for (u, i, r) in ratings {
        let ui = *users.entry(u.clone()).or_insert_with(|| {
            user_labels.push(u.to_string());
            user_labels.len() - 1
        });
        let ii = *items.entry(i.clone()).or_insert_with(|| {
            item_labels.push(i.to_string());
            item_labels.len() - 1
        });
        pairs.push((ui, ii, *r));
    }
    let num_users = user_labels.len();
    let instances = pairs
        .into_iter()
        .map(|(u, i, r)| SparseInstance::one_hot(&[u, num_users + i], target(r, task)))
        .collect::<Result<Vec<_>>>()?;
    let labels = user_labels
        .iter()
        .map(|u| format!("user:{u}"))
        .chain(item_labels.iter().map(|i| format!("item:{i}")))
        .collect();
    let space = FeatureSpace::from_sizes([("user", num_users), ("item", item_labels.len())]).with_labels(labels)?;
    Dataset::new(instances, space, task)
}

/// One row of a MovieLens ratings file.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Rating {
    pub user: usize,
    pub item: usize,
    pub rating: f64,
}

/// Encodes ratings whose ids are already small integers, using the ids as
/// indices directly: `N_u = max user id + 1`, `N_i = max item id + 1`.
///
/// MovieLens ids start at 1, so feature 0 of each group never occurs; this
/// keeps raw ids and feature offsets trivially related.
pub fn encode_indexed(ratings: &[Rating], task: Task) -> Result<Dataset> {
    if ratings.is_empty() {
        return Err(Error::Empty("ratings"));
    }
    let num_users = ratings.iter().map(|r| r.user).max().unwrap_or(0) + 1;
    let num_items = ratings.iter().map(|r| r.item).max().unwrap_or(0) + 1;
    let instances = ratings
        .iter()
        .map(|r| SparseInstance::one_hot(&[r.user, num_users + r.item], target(r.rating, task)))
        .collect::<Result<Vec<_>>>()?;
    let labels = (0..num_users)
        .map(|u| format!("user:{u}"))
        .chain((0..num_items).map(|i| format!("item:{i}")))
        .collect();
    let space = FeatureSpace::from_sizes([("user", num_users), ("item", num_items)]).with_labels(labels)?;
    Dataset::new(instances, space, task)
}

/// Encodes ratings into an existing `user`/`item` space laid out as by
/// [`encode_indexed`], e.g. a checkpoint's. Ids outside the space are an
/// error.
pub fn encode_in_space(ratings: &[Rating], space: &FeatureSpace, task: Task) -> Result<Dataset> {
    let group = |name| {
        space
            .group_by_name(name)
            .map(|g| space.group(g).clone())
            .ok_or_else(|| Error::Dimension(format!("feature space has no {name:?} group")))
    };
    let (users, items) = (group("user")?, group("item")?);
    let instances = ratings
        .iter()
        .map(|r| {
            if r.user >= users.len() || r.item >= items.len() {
                return Err(Error::Dimension(format!(
                    "user {} / item {} outside the {} users and {} items of the model",
                    r.user,
                    r.item,
                    users.len(),
                    items.len()
                )));
            }
            SparseInstance::one_hot(&[users.start + r.user, items.start + r.item], target(r.rating, task))
        })
        .collect::<Result<Vec<_>>>()?;
    Dataset::new(instances, space.clone(), task)
}

fn split_fields(line: &str) -> Vec<&str> {
    if line.contains("::") {
        line.split("::").collect()
    } else if line.contains('\t') {
        line.split('\t').collect()
    } else if line.contains('|') {
        line.split('|').collect()
    } else if line.contains(',') {
        line.split(',').collect()
    } else {
        line.split_whitespace().collect()
    }
}

/// Reads MovieLens ratings: `u.data` (tab), `ratings.dat` (`::`) or
/// `ratings.csv` (comma). A leading header line is skipped.
pub fn read_ratings(reader: impl BufRead) -> Result<Vec<Rating>> {
    let mut out = Vec::new();
    for (n, line) in reader.lines().enumerate() {
        let line = line?;
        let line = line.trim();
        if line.is_empty() {
            continue;
        }
        let fields = split_fields(line);
        if fields.len() < 3 {
            return Err(Error::Parse {
                line: n + 1,
                message: format!("expected user, item, rating; got {line:?}"),
            });
        }
        let parsed = (
            fields[0].trim().parse::<usize>(),
            fields[1].trim().parse::<usize>(),
            fields[2].trim().parse::<f64>(),
        );
        match parsed {
            (Ok(user), Ok(item), Ok(rating)) => out.push(Rating { user, item, rating }),
            _ if n == 0 => continue,
            _ => {
                return Err(Error::Parse {
                    line: n + 1,
                    message: format!("non-numeric user, item or rating in {line:?}"),
                })
            }
        }
    }
    if out.is_empty() {
        return Err(Error::Empty("ratings file"));
    }
    Ok(out)
}

/// Reads `(item id, title)` pairs from `u.item` (`|`), `movies.dat` (`::`)
/// or a tab/comma separated file with a header.
pub fn read_item_titles(reader: impl BufRead) -> Result<Vec<(usize, String)>> {
    let mut out = Vec::new();
    for (n, line) in reader.lines().enumerate() {
        let line = line?;
        let line = line.trim_end();
        if line.is_empty() {
            continue;
        }
        let fields = split_fields(line);
        match (fields.first().map(|f| f.trim().parse::<usize>()), fields.get(1)) {
            (Some(Ok(id)), Some(title)) => out.push((id, title.trim().to_string())),
            _ if n == 0 => continue,
            _ => {
                return Err(Error::Parse {
                    line: n + 1,
                    message: format!("expected `id<sep>title`, got {line:?}"),
                })
            }
        }
    }
    Ok(out)
}
