//! Rating ingestion, dense reindexing, statistics and seeded train/test splits.
//!
//! Raw user and item IDs are mapped to dense 0-based indices in order of first
//! appearance. A [`Split`] shares the ID maps of its source dataset, so a dense
//! index means the same entity on both sides.

use std::collections::{HashMap, HashSet};
use std::fmt;
use std::fs;
use std::io::{BufWriter, Write};
use std::path::Path;
use std::str::FromStr;
use std::sync::Arc;

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::{invalid, Result, SarError};

/// Largest rating accepted by the parser.
pub const MAX_PARSED_RATING: u8 = 5;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub enum RatingFormat {
    /// Tab-separated `user item rating timestamp`.
    Ml100k,
    /// `user::item::rating::timestamp`.
    Ml1m,
}

impl FromStr for RatingFormat {
    type Err = SarError;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "ml100k" => Ok(RatingFormat::Ml100k),
            "ml1m" => Ok(RatingFormat::Ml1m),
            other => Err(invalid("format", format!("expected ml100k or ml1m, got `{other}`"))),
        }
    }
}

impl fmt::Display for RatingFormat {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            RatingFormat::Ml100k => "ml100k",
            RatingFormat::Ml1m => "ml1m",
        })
    }
}

/// One observed rating, in dense indices.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub struct Rating {
    pub user: u32,
    pub item: u32,
    pub rating: u8,
}

/// Bijection between raw IDs and dense indices.
#[derive(Debug, Clone, Default, PartialEq, Eq)]
pub struct IdMap {
    raw: Vec<u64>,
    index: HashMap<u64, u32>,
}

impl IdMap {
    pub fn new() -> Self {
        Self::default()
    }

    /// Builds a map from raw IDs listed in dense order. Fails on repeats.
    pub fn from_raw(raw: Vec<u64>) -> Result<Self> {
        let mut index = HashMap::with_capacity(raw.len());
        for (i, &id) in raw.iter().enumerate() {
            if index.insert(id, i as u32).is_some() {
                return Err(invalid("id_map", format!("raw id {id} listed twice")));
            }
        }
        Ok(Self { raw, index })
    }

    /// Returns the dense index for `id`, assigning the next one if unseen.
    pub fn intern(&mut self, id: u64) -> u32 {
        if let Some(&idx) = self.index.get(&id) {
            return idx;
        }
        let idx = self.raw.len() as u32;
        self.raw.push(id);
        self.index.insert(id, idx);
        idx
    }

    pub fn index_of(&self, id: u64) -> Option<u32> {
        self.index.get(&id).copied()
    }

    pub fn raw_of(&self, idx: u32) -> Option<u64> {
        self.raw.get(idx as usize).copied()
    }

    pub fn raw_ids(&self) -> &[u64] {
        &self.raw
    }

    pub fn len(&self) -> usize {
        self.raw.len()
    }

    pub fn is_empty(&self) -> bool {
        self.raw.is_empty()
    }
}

/// Sparse rating matrix as dense-indexed triples.
#[derive(Debug, Clone)]
pub struct RatingDataset {
    triples: Vec<Rating>,
    users: Arc<IdMap>,
    items: Arc<IdMap>,
    rating_max: u8,
}

impl RatingDataset {
    /// Builds a dataset from raw-ID triples, reindexing in first-appearance order.
    pub fn from_raw_triples<I>(triples: I) -> Result<Self>
    where
        I: IntoIterator<Item = (u64, u64, u8)>,
    {
        let mut builder = Builder::default();
        for (line, (u, t, r)) in triples.into_iter().enumerate() {
            builder.push(line + 1, u, t, r as i64)?;
        }
        builder.finish()
    }

    /// Builds a dataset over existing ID maps. Indices must be in range and
    /// (user, item) pairs unique.
    pub fn from_indexed(triples: Vec<Rating>, users: Arc<IdMap>, items: Arc<IdMap>, rating_max: u8) -> Result<Self> {
        let mut seen = HashSet::with_capacity(triples.len());
        for (i, r) in triples.iter().enumerate() {
            if r.user as usize >= users.len() || r.item as usize >= items.len() {
                return Err(invalid(
                    "triples",
                    format!("triple {i} has an index outside the id maps"),
                ));
            }
            if r.rating < 1 || r.rating > rating_max {
                return Err(invalid(
                    "triples",
                    format!("triple {i} rating {} outside [1, {rating_max}]", r.rating),
                ));
            }
            if !seen.insert((r.user, r.item)) {
                return Err(SarError::DuplicatePair {
                    line: i + 1,
                    user: users.raw_of(r.user).unwrap_or_default(),
                    item: items.raw_of(r.item).unwrap_or_default(),
                });
            }
        }
        Ok(Self {
            triples,
            users,
            items,
            rating_max,
        })
    }

    pub fn triples(&self) -> &[Rating] {
        &self.triples
    }

    pub fn users(&self) -> &IdMap {
        &self.users
    }

    pub fn items(&self) -> &IdMap {
        &self.items
    }

    pub fn num_users(&self) -> usize {
        self.users.len()
    }

    pub fn num_items(&self) -> usize {
        self.items.len()
    }

    pub fn num_ratings(&self) -> usize {
        self.triples.len()
    }

    pub fn rating_max(&self) -> u8 {
        self.rating_max
    }

    pub fn is_empty(&self) -> bool {
        self.triples.is_empty()
    }

    pub fn global_mean(&self) -> f64 {
        if self.triples.is_empty() {
            return 0.0;
        }
        self.triples.iter().map(|r| r.rating as f64).sum::<f64>() / self.triples.len() as f64
    }

    /// Number of ratings per user index.
    pub fn user_counts(&self) -> Vec<u32> {
        let mut counts = vec![0; self.num_users()];
        for r in &self.triples {
            counts[r.user as usize] += 1;
        }
        counts
    }

    /// Number of ratings per item index.
    pub fn item_counts(&self) -> Vec<u32> {
        let mut counts = vec![0; self.num_items()];
        for r in &self.triples {
            counts[r.item as usize] += 1;
        }
        counts
    }

    /// Item indices rated by each user.
    pub fn items_by_user(&self) -> Vec<Vec<u32>> {
        let mut out = vec![Vec::new(); self.num_users()];
        for r in &self.triples {
            out[r.user as usize].push(r.item);
        }
        out
    }

    /// User indices that rated each item.
    pub fn users_by_item(&self) -> Vec<Vec<u32>> {
        let mut out = vec![Vec::new(); self.num_items()];
        for r in &self.triples {
            out[r.item as usize].push(r.user);
        }
        out
    }

    fn with_triples(&self, triples: Vec<Rating>) -> Self {
        Self {
            triples,
            users: Arc::clone(&self.users),
            items: Arc::clone(&self.items),
            rating_max: self.rating_max,
        }
    }
}

#[derive(Default)]
struct Builder {
    users: IdMap,
    items: IdMap,
    triples: Vec<Rating>,
    seen: HashSet<(u32, u32)>,
    rating_max: u8,
}

impl Builder {
    fn push(&mut self, line: usize, user: u64, item: u64, rating: i64) -> Result<()> {
        if !(1..=MAX_PARSED_RATING as i64).contains(&rating) {
            return Err(SarError::RatingOutOfRange { line, rating });
        }
        let u = self.users.intern(user);
        let t = self.items.intern(item);
        if !self.seen.insert((u, t)) {
            return Err(SarError::DuplicatePair { line, user, item });
        }
        let rating = rating as u8;
        self.rating_max = self.rating_max.max(rating);
        self.triples.push(Rating {
            user: u,
            item: t,
            rating,
        });
        Ok(())
    }

    fn finish(self) -> Result<RatingDataset> {
        if self.triples.is_empty() {
            return Err(SarError::EmptyDataset);
        }
        Ok(RatingDataset {
            triples: self.triples,
            users: Arc::new(self.users),
            items: Arc::new(self.items),
            rating_max: self.rating_max,
        })
    }
}

fn parse_field<T: FromStr>(field: Option<&str>, line: usize, name: &str) -> Result<T> {
    let field = field.ok_or_else(|| SarError::Parse {
        line,
        msg: format!("missing {name} field"),
    })?;
    field.trim().parse().map_err(|_| SarError::Parse {
        line,
        msg: format!("cannot parse {name} `{field}`"),
    })
}

/// Parses rating text in the given format. Blank lines are ignored.
pub fn parse_ratings_str(text: &str, format: RatingFormat) -> Result<RatingDataset> {
    let mut builder = Builder::default();
    for (i, raw) in text.lines().enumerate() {
        let line = i + 1;
        if raw.trim().is_empty() {
            continue;
        }
        let fields: Vec<&str> = match format {
            RatingFormat::Ml100k => raw.split('\t').collect(),
            RatingFormat::Ml1m => raw.split("::").collect(),
        };
        if fields.len() != 4 {
            return Err(SarError::Parse {
                line,
                msg: format!("expected 4 fields, found {}", fields.len()),
            });
        }
        let mut it = fields.into_iter();
        let user: u64 = parse_field(it.next(), line, "user")?;
        let item: u64 = parse_field(it.next(), line, "item")?;
        let rating: i64 = parse_field(it.next(), line, "rating")?;
        let _timestamp: i64 = parse_field(it.next(), line, "timestamp")?;
        builder.push(line, user, item, rating)?;
    }
    builder.finish()
}

/// Reads and parses a MovieLens rating file.
pub fn parse_ratings(path: impl AsRef<Path>, format: RatingFormat) -> Result<RatingDataset> {
    let path = path.as_ref();
    let bytes = fs::read(path).map_err(|source| SarError::Io {
        path: path.to_path_buf(),
        source,
    })?;
    // ML-1M ships as latin-1; only ASCII digits and separators matter here.
    let text = String::from_utf8_lossy(&bytes);
    parse_ratings_str(&text, format)
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct DatasetStats {
    pub num_users: usize,
    pub num_items: usize,
    pub num_ratings: usize,
    pub sparsity: f64,
    /// `histogram[r - 1]` counts ratings equal to `r`.
    pub histogram: Vec<usize>,
}

pub fn stats(ds: &RatingDataset) -> DatasetStats {
    let mut histogram = vec![0; ds.rating_max() as usize];
    for r in ds.triples() {
        histogram[r.rating as usize - 1] += 1;
    }
    let cells = ds.num_users() as f64 * ds.num_items() as f64;
    DatasetStats {
        num_users: ds.num_users(),
        num_items: ds.num_items(),
        num_ratings: ds.num_ratings(),
        sparsity: 1.0 - ds.num_ratings() as f64 / cells,
        histogram,
    }
}

#[derive(Debug, Clone)]
pub struct Split {
    pub train: RatingDataset,
    pub test: RatingDataset,
    pub rho: f64,
    pub seed: u64,
}

/// Number of training triples for `n` ratings at ratio `rho`.
pub fn train_size(n: usize, rho: f64) -> usize {
    (rho * n as f64).round() as usize
}

/// Seeded uniform shuffle; the first `round(rho * N)` triples go to train.
pub fn split(ds: &RatingDataset, rho: f64, seed: u64) -> Result<Split> {
    if !(rho > 0.0 && rho < 1.0) {
        return Err(invalid("rho", format!("must lie in (0, 1), got {rho}")));
    }
    let n = ds.num_ratings();
    let n_train = train_size(n, rho);
    if n_train == 0 || n_train == n {
        return Err(invalid(
            "rho",
            format!("{rho} leaves an empty train or test set for {n} ratings"),
        ));
    }
    let mut triples = ds.triples().to_vec();
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    triples.shuffle(&mut rng);
    let test = triples.split_off(n_train);
    Ok(Split {
        train: ds.with_triples(triples),
        test: ds.with_triples(test),
        rho,
        seed,
    })
}

fn write_raw_triples(ds: &RatingDataset, path: &Path) -> Result<()> {
    let io_err = |source| SarError::Io {
        path: path.to_path_buf(),
        source,
    };
    let file = fs::File::create(path).map_err(io_err)?;
    let mut w = BufWriter::new(file);
    for r in ds.triples() {
        let u = ds.users().raw_of(r.user).expect("index in map");
        let t = ds.items().raw_of(r.item).expect("index in map");
        writeln!(w, "{u} {t} {}", r.rating).map_err(io_err)?;
    }
    w.flush().map_err(io_err)
}

impl Split {
    /// Writes `user_raw item_raw rating` lines for both halves.
    pub fn save(&self, train_path: impl AsRef<Path>, test_path: impl AsRef<Path>) -> Result<()> {
        write_raw_triples(&self.train, train_path.as_ref())?;
        write_raw_triples(&self.test, test_path.as_ref())
    }

    /// Reads a split written by [`Split::save`]. IDs are reindexed over train
    /// then test in first-appearance order.
    pub fn load(train_path: impl AsRef<Path>, test_path: impl AsRef<Path>, rho: f64, seed: u64) -> Result<Self> {
        let mut users = IdMap::new();
        let mut items = IdMap::new();
        let mut halves = Vec::with_capacity(2);
        let mut rating_max = 0u8;
        for path in [train_path.as_ref(), test_path.as_ref()] {
            let text = fs::read_to_string(path).map_err(|source| SarError::Io {
                path: path.to_path_buf(),
                source,
            })?;
            let mut triples = Vec::new();
            for (i, raw) in text.lines().enumerate() {
                let line = i + 1;
                if raw.trim().is_empty() {
                    continue;
                }
                let mut it = raw.split_whitespace();
                let u: u64 = parse_field(it.next(), line, "user")?;
                let t: u64 = parse_field(it.next(), line, "item")?;
                let r: i64 = parse_field(it.next(), line, "rating")?;
                if !(1..=MAX_PARSED_RATING as i64).contains(&r) {
                    return Err(SarError::RatingOutOfRange { line, rating: r });
                }
                rating_max = rating_max.max(r as u8);
                triples.push(Rating {
                    user: users.intern(u),
                    item: items.intern(t),
                    rating: r as u8,
                });
            }
            halves.push(triples);
        }
        let users = Arc::new(users);
        let items = Arc::new(items);
        let test = halves.pop().unwrap_or_default();
        let train = halves.pop().unwrap_or_default();
        if train.is_empty() || test.is_empty() {
            return Err(SarError::EmptyDataset);
        }
        let mut all = HashSet::new();
        for r in train.iter().chain(&test) {
            if !all.insert((r.user, r.item)) {
                return Err(invalid("split", "train and test overlap"));
            }
        }
        Ok(Split {
            train: RatingDataset::from_indexed(train, Arc::clone(&users), Arc::clone(&items), rating_max)?,
            test: RatingDataset::from_indexed(test, users, items, rating_max)?,
            rho,
            seed,
        })
    }
}
