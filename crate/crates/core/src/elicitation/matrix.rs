//! Complete binary user × item matrices for elicitation experiments.

use std::collections::{BTreeMap, BTreeSet, HashMap};
use std::io::{BufRead, Write};

use rand::seq::index;
use rand::Rng;
use rand_distr::StandardNormal;
use serde::{Deserialize, Serialize};

use crate::data::{Dataset, FeatureSpace, Rating, SparseInstance, Task};
use crate::fm::sigmoid;
use crate::{seed, Error, Result};

/// `r_ij ∈ {0, 1}` for every user `i` and item `j`.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct PreferenceMatrix {
    num_users: usize,
    num_items: usize,
    values: Vec<u8>,
    /// Source ids of the rows and columns.
    pub user_ids: Vec<usize>,
    pub item_ids: Vec<usize>,
}

impl PreferenceMatrix {
    /// `values` is row-major.
    pub fn new(num_users: usize, num_items: usize, values: Vec<u8>) -> Result<Self> {
        if num_users == 0 || num_items == 0 {
            return Err(Error::Empty("preference matrix"));
        }
        if values.len() != num_users * num_items {
            return Err(Error::Dimension(format!(
                "{} values for a {num_users} x {num_items} matrix",
                values.len()
            )));
        }
        if values.iter().any(|&v| v > 1) {
            return Err(Error::invalid("preference values must be 0 or 1"));
        }
        Ok(PreferenceMatrix {
            num_users,
            num_items,
            values,
            user_ids: (0..num_users).collect(),
            item_ids: (0..num_items).collect(),
        })
    }

    pub fn num_users(&self) -> usize {
        self.num_users
    }

    pub fn num_items(&self) -> usize {
        self.num_items
    }

    pub fn get(&self, user: usize, item: usize) -> u8 {
        self.values[user * self.num_items + item]
    }

    pub fn row(&self, user: usize) -> &[u8] {
        &self.values[user * self.num_items..(user + 1) * self.num_items]
    }

    pub fn row_sum(&self, user: usize) -> usize {
        self.row(user).iter().map(|&v| v as usize).sum()
    }

    /// Users `0..U` then items `0..I`, one-hot.
    pub fn space(&self) -> FeatureSpace {
        FeatureSpace::from_sizes([("user", self.num_users), ("item", self.num_items)])
    }

    /// Every cell of the given users' rows as a classification instance.
    pub fn to_dataset(&self, users: &[usize]) -> Result<Dataset> {
        let mut instances = Vec::with_capacity(users.len() * self.num_items);
        for &u in users {
            if u >= self.num_users {
                return Err(Error::invalid(format!("user {u} outside {} users", self.num_users)));
            }
            for j in 0..self.num_items {
                instances.push(SparseInstance::one_hot(
                    &[u, self.num_users + j],
                    f64::from(self.get(u, j)),
                )?);
            }
        }
        Dataset::new(instances, self.space(), Task::Classification)
    }

    /// Header `user,<item id>,...`, then one `<user id>,0,1,...` row per user.
    pub fn write_csv(&self, mut out: impl Write) -> Result<()> {
        write!(out, "user")?;
        for id in &self.item_ids {
            write!(out, ",{id}")?;
        }
        writeln!(out)?;
        for (u, id) in self.user_ids.iter().enumerate() {
            write!(out, "{id}")?;
            for v in self.row(u) {
                write!(out, ",{v}")?;
            }
            writeln!(out)?;
        }
        Ok(())
    }

    pub fn read_csv(reader: impl BufRead) -> Result<Self> {
        let mut lines = reader.lines().enumerate();
        let parse_ids = |line: usize, fields: &[&str]| {
            fields
                .iter()
                .map(|f| {
                    f.trim().parse::<usize>().map_err(|_| Error::Parse {
                        line,
                        message: format!("bad id {f:?}"),
                    })
                })
                .collect::<Result<Vec<_>>>()
        };
        let (_, header) = lines.next().ok_or(Error::Empty("preference matrix"))?;
        let header = header?;
        let fields: Vec<&str> = header.split(',').collect();
        let item_ids = parse_ids(1, &fields[1..])?;
        let (mut user_ids, mut values) = (Vec::new(), Vec::new());
        for (n, line) in lines {
            let line = line?;
            if line.trim().is_empty() {
                continue;
            }
            let fields: Vec<&str> = line.split(',').collect();
            if fields.len() != item_ids.len() + 1 {
                return Err(Error::Parse {
                    line: n + 1,
                    message: format!("{} values, expected {}", fields.len() - 1, item_ids.len()),
                });
            }
            user_ids.extend(parse_ids(n + 1, &fields[..1])?);
            for f in &fields[1..] {
                match f.trim() {
                    "0" => values.push(0),
                    "1" => values.push(1),
                    other => {
                        return Err(Error::Parse {
                            line: n + 1,
                            message: format!("preference {other:?} is not 0 or 1"),
                        })
                    }
                }
            }
        }
        let mut m = PreferenceMatrix::new(user_ids.len(), item_ids.len(), values)?;
        m.user_ids = user_ids;
        m.item_ids = item_ids;
        Ok(m)
    }
}

/// Keeps the `num_items` most rated items and samples `num_users` users who
/// rated at least one of them but not all; `r_ij = 1` iff user `i` rated
/// item `j`.
pub fn build_top_items(ratings: &[Rating], num_items: usize, num_users: usize, seed: u64) -> Result<PreferenceMatrix> {
    if ratings.is_empty() {
        return Err(Error::Empty("ratings"));
    }
    let mut counts: HashMap<usize, usize> = HashMap::new();
    for r in ratings {
        *counts.entry(r.item).or_default() += 1;
    }
    if counts.len() < num_items {
        return Err(Error::Elicitation(format!(
            "{} distinct items, {num_items} needed",
            counts.len()
        )));
    }
    let mut items: Vec<(usize, usize)> = counts.into_iter().collect();
    items.sort_by(|a, b| b.1.cmp(&a.1).then(a.0.cmp(&b.0)));
    let item_ids: Vec<usize> = items[..num_items].iter().map(|&(id, _)| id).collect();
    let column: HashMap<usize, usize> = item_ids.iter().enumerate().map(|(j, &id)| (id, j)).collect();

    let mut rated: BTreeMap<usize, BTreeSet<usize>> = BTreeMap::new();
    for r in ratings {
        if let Some(&j) = column.get(&r.item) {
            rated.entry(r.user).or_default().insert(j);
        }
    }
    let qualifying: Vec<usize> = rated
        .iter()
        .filter(|(_, s)| !s.is_empty() && s.len() < num_items)
        .map(|(&u, _)| u)
        .collect();
    if qualifying.len() < num_users {
        return Err(Error::Elicitation(format!(
            "{} users rated some but not all of the top {num_items} items, {num_users} needed",
            qualifying.len()
        )));
    }
    let mut rng = seed::rng(seed, "movie10k");
    let mut user_ids: Vec<usize> = index::sample(&mut rng, qualifying.len(), num_users)
        .into_iter()
        .map(|i| qualifying[i])
        .collect();
    user_ids.sort_unstable();

    let mut values = vec![0u8; num_users * num_items];
    for (i, u) in user_ids.iter().enumerate() {
        for &j in &rated[u] {
            values[i * num_items + j] = 1;
        }
    }
    let mut m = PreferenceMatrix::new(num_users, num_items, values)?;
    m.user_ids = user_ids;
    m.item_ids = item_ids;
    Ok(m)
}

/// 100 most rated movies by 100 sampled users.
pub fn build_movie10k(ratings: &[Rating], seed: u64) -> Result<PreferenceMatrix> {
    build_top_items(ratings, 100, 100, seed)
}

/// Generator for matrices with planted low-rank structure:
/// `P(r_ij = 1) = σ(offset + a_i + b_j + signal · <u_i, v_j> / √rank)` with
/// standard-normal factors.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct SyntheticConfig {
    pub num_users: usize,
    pub num_items: usize,
    pub rank: usize,
    /// Standard deviation of the per-user offset `a_i`.
    pub user_sd: f64,
    /// Standard deviation of the per-item offset `b_j`.
    pub item_sd: f64,
    pub signal: f64,
    pub offset: f64,
}

impl Default for SyntheticConfig {
    fn default() -> Self {
        SyntheticConfig {
            num_users: 100,
            num_items: 100,
            rank: 3,
            user_sd: 2.0,
            item_sd: 0.7,
            signal: 1.5,
            offset: -0.9,
        }
    }
}

/// Rows whose sum is 0 or `num_items` are redrawn, so every user has at
/// least one positive and one negative.
pub fn synthetic_preferences(config: &SyntheticConfig, seed: u64) -> Result<PreferenceMatrix> {
    let SyntheticConfig {
        num_users,
        num_items,
        rank,
        user_sd,
        item_sd,
        signal,
        offset,
    } = *config;
    if num_items < 2 || rank == 0 {
        return Err(Error::invalid("synthetic matrix needs at least 2 items and rank 1"));
    }
    let mut rng = seed::rng(seed, "synthetic");
    let mut normal = move || -> f64 { rng.sample(StandardNormal) };
    let item_offset: Vec<f64> = (0..num_items).map(|_| item_sd * normal()).collect();
    let item_factors: Vec<f64> = (0..num_items * rank).map(|_| normal()).collect();
    let norm = signal / (rank as f64).sqrt();

    let mut values = Vec::with_capacity(num_users * num_items);
    let mut row = vec![0u8; num_items];
    let mut unif = seed::rng(seed, "synthetic/draws");
    for _ in 0..num_users {
        loop {
            let a = user_sd * normal();
            let u: Vec<f64> = (0..rank).map(|_| normal()).collect();
            for j in 0..num_items {
                let dot: f64 = (0..rank).map(|f| u[f] * item_factors[j * rank + f]).sum();
                let p = sigmoid(offset + a + item_offset[j] + norm * dot);
                row[j] = u8::from(unif.random::<f64>() < p);
            }
            let sum: usize = row.iter().map(|&v| v as usize).sum();
            if sum > 0 && sum < num_items {
                break;
            }
        }
        values.extend_from_slice(&row);
    }
    PreferenceMatrix::new(num_users, num_items, values)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn synthetic_shape() {
        let m = synthetic_preferences(&SyntheticConfig::default(), 4).unwrap();
        assert_eq!((m.num_users(), m.num_items()), (100, 100));
        for u in 0..100 {
            assert!((1..=99).contains(&m.row_sum(u)));
        }
        assert_eq!(m, synthetic_preferences(&SyntheticConfig::default(), 4).unwrap());
    }

    #[test]
    fn top_items() {
        // items 7 and 8 are the most rated; user 3 rated both and is excluded
        let r = |user, item| Rating {
            user,
            item,
            rating: 3.0,
        };
        let ratings = vec![r(1, 7), r(2, 7), r(3, 7), r(3, 8), r(4, 8), r(5, 9)];
        let m = build_top_items(&ratings, 2, 3, 0).unwrap();
        assert_eq!(m.item_ids, vec![7, 8]);
        assert_eq!(m.user_ids, vec![1, 2, 4]);
        assert_eq!(m.row(2), &[0, 1]);
        assert!(build_top_items(&ratings, 2, 4, 0).is_err());
    }

    #[test]
    fn dataset() {
        let m = PreferenceMatrix::new(2, 3, vec![1, 0, 0, 0, 1, 1]).unwrap();
        let d = m.to_dataset(&[1]).unwrap();
        assert_eq!(d.len(), 3);
        assert_eq!(d.instances()[2].entries(), &[(1, 1.0), (4, 1.0)]);
        assert_eq!(d.labels().collect::<Vec<_>>(), vec![0.0, 1.0, 1.0]);
        assert!(PreferenceMatrix::new(1, 2, vec![0, 2]).is_err());
    }

    #[test]
    fn csv_roundtrip() {
        let mut m = PreferenceMatrix::new(2, 3, vec![1, 0, 0, 0, 1, 1]).unwrap();
        m.user_ids = vec![5, 9];
        m.item_ids = vec![10, 20, 30];
        let mut out = Vec::new();
        m.write_csv(&mut out).unwrap();
        assert_eq!(
            String::from_utf8(out.clone()).unwrap(),
            "user,10,20,30\n5,1,0,0\n9,0,1,1\n"
        );
        assert_eq!(PreferenceMatrix::read_csv(out.as_slice()).unwrap(), m);
        assert!(PreferenceMatrix::read_csv("user,1,2\n3,0,2\n".as_bytes()).is_err());
        assert!(PreferenceMatrix::read_csv("user,1,2\n3,0\n".as_bytes()).is_err());
    }
}
