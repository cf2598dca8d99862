//! Interaction logs, k-core filtering, leave-one-out splits and fixed
//! candidate sets.
//!
//! Items are addressed internally by a dense index into the catalog
//! (`0..num_items`). The catalog is numbered by first appearance when users
//! are walked in dataset order and each history in time order, so a dataset
//! written with [`InteractionDataset::save`] reloads to the same numbering.

use std::collections::{HashMap, HashSet};
use std::fs;
use std::io::{BufRead, BufReader, Write};
use std::path::Path;

use rand::seq::index;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

pub type Category = u16;

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Interaction {
    pub user_id: String,
    pub item_id: String,
    pub timestamp: i64,
    pub categories: Vec<Category>,
    pub group: Option<String>,
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct UserHistory {
    pub user_id: String,
    pub group: Option<String>,
    /// Dense item indices in time order.
    pub items: Vec<u32>,
    pub timestamps: Vec<i64>,
}

impl UserHistory {
    pub fn len(&self) -> usize {
        self.items.len()
    }

    pub fn is_empty(&self) -> bool {
        self.items.is_empty()
    }

    /// Length of the training prefix (everything before the validation target).
    pub fn train_len(&self) -> usize {
        self.items.len().saturating_sub(2)
    }
}

/// Which evaluation target of the leave-one-out split to use.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum EvalSplit {
    Valid,
    Test,
}

/// Fixed negatives for every target, target always stored first.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct CandidateSets {
    pub seed: u64,
    pub n_neg_train: usize,
    pub n_neg_eval: usize,
    /// Per user, `train_pairs × (1 + n_neg_train)` item indices.
    pub train: Vec<Vec<u32>>,
    pub valid: Vec<Vec<u32>>,
    pub test: Vec<Vec<u32>>,
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct InteractionDataset {
    pub users: Vec<UserHistory>,
    pub item_ids: Vec<String>,
    pub item_categories: Vec<Vec<Category>>,
    pub num_categories: usize,
    /// Set once [`leave_one_out_split`] has run.
    pub max_history: Option<usize>,
    pub candidates: Option<CandidateSets>,
}

/// One training example: predict `items[pos]` from the window before it.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct TrainPair {
    pub user: usize,
    pub pos: usize,
    /// Index of this pair within the user's training candidate rows.
    pub slot: usize,
}

impl InteractionDataset {
    pub fn empty(num_categories: usize) -> Self {
        Self {
            users: Vec::new(),
            item_ids: Vec::new(),
            item_categories: Vec::new(),
            num_categories,
            max_history: None,
            candidates: None,
        }
    }

    pub fn num_users(&self) -> usize {
        self.users.len()
    }

    pub fn num_items(&self) -> usize {
        self.item_ids.len()
    }

    pub fn num_interactions(&self) -> usize {
        self.users.iter().map(|u| u.len()).sum()
    }

    pub fn item_index(&self, item_id: &str) -> Option<u32> {
        self.item_ids.iter().position(|i| i == item_id).map(|i| i as u32)
    }

    pub fn user_index(&self, user_id: &str) -> Option<usize> {
        self.users.iter().position(|u| u.user_id == user_id)
    }

    pub fn max_history(&self) -> Result<usize> {
        self.max_history
            .ok_or_else(|| Error::Split("dataset has not been split".into()))
    }

    pub fn candidates(&self) -> Result<&CandidateSets> {
        self.candidates
            .as_ref()
            .ok_or_else(|| Error::Sampling("candidate sets have not been sampled".into()))
    }

    /// Binary category-membership row for an item.
    pub fn labels(&self, item: u32) -> Vec<f64> {
        let mut row = vec![0.0; self.num_categories];
        for &c in &self.item_categories[item as usize] {
            row[c as usize] = 1.0;
        }
        row
    }

    fn window<'a>(&self, items: &'a [u32], end: usize) -> &'a [u32] {
        let h = self.max_history.unwrap_or(usize::MAX);
        &items[end.saturating_sub(h)..end]
    }

    /// All training pairs in user order.
    pub fn train_pairs(&self) -> Vec<TrainPair> {
        let mut out = Vec::new();
        for (u, user) in self.users.iter().enumerate() {
            for (slot, pos) in (1..user.train_len()).enumerate() {
                out.push(TrainPair { user: u, pos, slot });
            }
        }
        out
    }

    pub fn pair_history(&self, p: &TrainPair) -> &[u32] {
        self.window(&self.users[p.user].items, p.pos)
    }

    pub fn pair_candidates(&self, p: &TrainPair) -> Result<&[u32]> {
        let c = self.candidates()?;
        let w = 1 + c.n_neg_train;
        Ok(&c.train[p.user][p.slot * w..(p.slot + 1) * w])
    }

    /// History window and target for a user's validation or test target.
    pub fn eval_example(&self, user: usize, split: EvalSplit) -> (&[u32], u32) {
        let items = &self.users[user].items;
        let end = match split {
            EvalSplit::Valid => items.len() - 2,
            EvalSplit::Test => items.len() - 1,
        };
        (self.window(items, end), items[end])
    }

    pub fn eval_candidates(&self, user: usize, split: EvalSplit) -> Result<&[u32]> {
        let c = self.candidates()?;
        Ok(match split {
            EvalSplit::Valid => &c.valid[user],
            EvalSplit::Test => &c.test[user],
        })
    }

    /// Renumbers the catalog by first appearance, dropping unused items.
    fn rebuild_catalog(&mut self) {
        let mut remap: HashMap<u32, u32> = HashMap::new();
        let mut ids = Vec::new();
        let mut cats = Vec::new();
        for user in &mut self.users {
            for it in &mut user.items {
                let next = remap.len() as u32;
                let new = *remap.entry(*it).or_insert_with(|| {
                    ids.push(self.item_ids[*it as usize].clone());
                    cats.push(self.item_categories[*it as usize].clone());
                    next
                });
                *it = new;
            }
        }
        self.item_ids = ids;
        self.item_categories = cats;
    }

    /// Builds a dataset from raw interactions: groups by user in order of
    /// first appearance and sorts each history by timestamp (stable).
    pub fn from_interactions(rows: Vec<Interaction>, num_categories: usize) -> Result<Self> {
        let mut user_pos: HashMap<String, usize> = HashMap::new();
        let mut item_pos: HashMap<String, u32> = HashMap::new();
        let mut ds = Self::empty(num_categories);
        let mut per_user: Vec<Vec<(i64, u32)>> = Vec::new();
        for row in rows {
            if let Some(&c) = row.categories.iter().find(|&&c| c as usize >= num_categories) {
                return Err(Error::Schema(format!(
                    "category id {c} for item {} exceeds category count {num_categories}",
                    row.item_id
                )));
            }
            let item = *item_pos.entry(row.item_id.clone()).or_insert_with(|| {
                ds.item_ids.push(row.item_id.clone());
                ds.item_categories.push(normalize_categories(row.categories.clone()));
                (ds.item_ids.len() - 1) as u32
            });
            let u = *user_pos.entry(row.user_id.clone()).or_insert_with(|| {
                ds.users.push(UserHistory {
                    user_id: row.user_id.clone(),
                    group: row.group.clone(),
                    items: Vec::new(),
                    timestamps: Vec::new(),
                });
                per_user.push(Vec::new());
                ds.users.len() - 1
            });
            per_user[u].push((row.timestamp, item));
        }
        for (user, mut events) in ds.users.iter_mut().zip(per_user) {
            events.sort_by_key(|e| e.0);
            user.timestamps = events.iter().map(|e| e.0).collect();
            user.items = events.iter().map(|e| e.1).collect();
        }
        ds.rebuild_catalog();
        Ok(ds)
    }

    /// Raw interactions in dataset order.
    pub fn interactions(&self) -> Vec<Interaction> {
        let mut out = Vec::with_capacity(self.num_interactions());
        for u in &self.users {
            for (&it, &ts) in u.items.iter().zip(&u.timestamps) {
                out.push(Interaction {
                    user_id: u.user_id.clone(),
                    item_id: self.item_ids[it as usize].clone(),
                    timestamp: ts,
                    categories: self.item_categories[it as usize].clone(),
                    group: u.group.clone(),
                });
            }
        }
        out
    }

    /// Replaces item categories from an `item_id \t cat1|cat2` map.
    pub fn apply_category_map(&mut self, map: &HashMap<String, Vec<Category>>) -> Result<()> {
        for (id, cats) in self.item_ids.iter().zip(self.item_categories.iter_mut()) {
            if let Some(c) = map.get(id) {
                if let Some(bad) = c.iter().find(|&&c| c as usize >= self.num_categories) {
                    return Err(Error::Schema(format!("category id {bad} for item {id} out of range")));
                }
                *cats = normalize_categories(c.clone());
            }
        }
        Ok(())
    }
}

fn normalize_categories(mut c: Vec<Category>) -> Vec<Category> {
    c.sort_unstable();
    c.dedup();
    c
}

fn parse_categories(field: &str, line: usize) -> Result<Vec<Category>> {
    if field.trim().is_empty() {
        return Ok(Vec::new());
    }
    field
        .split('|')
        .map(|c| {
            c.trim().parse::<Category>().map_err(|_| Error::Parse {
                line,
                message: format!("bad category id {c:?}"),
            })
        })
        .collect()
}

/// Parses `user \t item \t timestamp \t cat1|cat2 [\t group]` lines.
pub fn parse_tsv(reader: impl BufRead) -> Result<Vec<Interaction>> {
    let mut rows = Vec::new();
    for (i, line) in reader.lines().enumerate() {
        let line_no = i + 1;
        let line = line.map_err(|e| Error::Parse {
            line: line_no,
            message: e.to_string(),
        })?;
        if line.trim().is_empty() {
            continue;
        }
        let fields: Vec<&str> = line.split('\t').collect();
        if fields.len() < 4 || fields.len() > 5 {
            return Err(Error::Parse {
                line: line_no,
                message: format!("expected 4 or 5 tab-separated fields, found {}", fields.len()),
            });
        }
        let timestamp = fields[2].trim().parse::<i64>().map_err(|_| Error::Parse {
            line: line_no,
            message: format!("bad timestamp {:?}", fields[2]),
        })?;
        if fields[0].is_empty() || fields[1].is_empty() {
            return Err(Error::Parse {
                line: line_no,
                message: "empty user or item id".into(),
            });
        }
        rows.push(Interaction {
            user_id: fields[0].to_string(),
            item_id: fields[1].to_string(),
            timestamp,
            categories: parse_categories(fields[3], line_no)?,
            group: fields.get(4).map(|g| g.trim().to_string()).filter(|g| !g.is_empty()),
        });
    }
    Ok(rows)
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum DatasetFormat {
    Tsv,
}

/// Loads a TSV interaction log. `num_categories` bounds category ids when
/// given; otherwise it is inferred as `max id + 1`.
pub fn load_dataset(path: &Path, format: DatasetFormat, num_categories: Option<usize>) -> Result<InteractionDataset> {
    let DatasetFormat::Tsv = format;
    let file = fs::File::open(path).map_err(|e| Error::io(path, e))?;
    let rows = parse_tsv(BufReader::new(file))?;
    let m = num_categories.unwrap_or_else(|| {
        rows.iter()
            .flat_map(|r| r.categories.iter())
            .map(|&c| c as usize + 1)
            .max()
            .unwrap_or(0)
    });
    InteractionDataset::from_interactions(rows, m)
}

pub fn load_category_map(path: &Path) -> Result<HashMap<String, Vec<Category>>> {
    let text = fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
    let mut map = HashMap::new();
    for (i, line) in text.lines().enumerate() {
        if line.trim().is_empty() {
            continue;
        }
        let (item, cats) = line.split_once('\t').ok_or_else(|| Error::Parse {
            line: i + 1,
            message: "expected item_id<TAB>categories".into(),
        })?;
        map.insert(item.to_string(), parse_categories(cats, i + 1)?);
    }
    Ok(map)
}

pub fn write_tsv(rows: &[Interaction], mut w: impl Write) -> std::io::Result<()> {
    for r in rows {
        let cats: Vec<String> = r.categories.iter().map(|c| c.to_string()).collect();
        write!(w, "{}\t{}\t{}\t{}", r.user_id, r.item_id, r.timestamp, cats.join("|"))?;
        if let Some(g) = &r.group {
            write!(w, "\t{g}")?;
        }
        writeln!(w)?;
    }
    Ok(())
}

/// Removes users with fewer than `k` interactions and rebuilds the catalog.
pub fn kcore_filter(ds: &InteractionDataset, k: usize) -> Result<InteractionDataset> {
    if k == 0 {
        return Err(Error::Argument("k must be at least 1".into()));
    }
    let mut out = ds.clone();
    out.users.retain(|u| u.len() >= k);
    if out.users.is_empty() {
        return Err(Error::EmptyDataset(format!("no user has at least {k} interactions")));
    }
    out.rebuild_catalog();
    out.max_history = None;
    out.candidates = None;
    Ok(out)
}

/// Marks the dataset as split leave-one-out with histories truncated to
/// `max_history` items.
pub fn leave_one_out_split(ds: &InteractionDataset, max_history: usize) -> Result<InteractionDataset> {
    if max_history == 0 {
        return Err(Error::Argument("max_history must be positive".into()));
    }
    if let Some(u) = ds.users.iter().find(|u| u.len() < 3) {
        return Err(Error::Split(format!(
            "user {} has {} interactions; leave-one-out needs at least 3",
            u.user_id,
            u.len()
        )));
    }
    let mut out = ds.clone();
    out.max_history = Some(max_history);
    out.candidates = None;
    Ok(out)
}

fn user_rng(seed: u64, user: usize) -> ChaCha8Rng {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    rng.set_stream(user as u64 + 1);
    rng
}

fn draw(rng: &mut ChaCha8Rng, target: u32, eligible: &[u32], n: usize, out: &mut Vec<u32>) {
    out.push(target);
    out.extend(index::sample(rng, eligible.len(), n).into_iter().map(|i| eligible[i]));
}

/// Samples distinct negatives per target from items the user never touched.
pub fn sample_candidates(
    ds: &InteractionDataset,
    n_neg_train: usize,
    n_neg_eval: usize,
    seed: u64,
) -> Result<InteractionDataset> {
    ds.max_history()?;
    if ds.num_items() <= n_neg_eval {
        return Err(Error::Sampling(format!(
            "catalog of {} items cannot supply {n_neg_eval} negatives",
            ds.num_items()
        )));
    }
    let mut sets = CandidateSets {
        seed,
        n_neg_train,
        n_neg_eval,
        train: Vec::with_capacity(ds.num_users()),
        valid: Vec::with_capacity(ds.num_users()),
        test: Vec::with_capacity(ds.num_users()),
    };
    for (u, user) in ds.users.iter().enumerate() {
        let seen: HashSet<u32> = user.items.iter().copied().collect();
        let eligible: Vec<u32> = (0..ds.num_items() as u32).filter(|i| !seen.contains(i)).collect();
        let need = n_neg_train.max(n_neg_eval);
        if eligible.len() < need {
            return Err(Error::Sampling(format!(
                "user {} has only {} unseen items, {need} negatives requested",
                user.user_id,
                eligible.len()
            )));
        }
        let mut rng = user_rng(seed, u);
        let mut train = Vec::new();
        for pos in 1..user.train_len() {
            draw(&mut rng, user.items[pos], &eligible, n_neg_train, &mut train);
        }
        let n = user.len();
        let mut valid = Vec::with_capacity(1 + n_neg_eval);
        draw(&mut rng, user.items[n - 2], &eligible, n_neg_eval, &mut valid);
        let mut test = Vec::with_capacity(1 + n_neg_eval);
        draw(&mut rng, user.items[n - 1], &eligible, n_neg_eval, &mut test);
        sets.train.push(train);
        sets.valid.push(valid);
        sets.test.push(test);
    }
    let mut out = ds.clone();
    out.candidates = Some(sets);
    Ok(out)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DatasetManifest {
    pub num_users: usize,
    pub num_items: usize,
    pub num_categories: usize,
    pub num_interactions: usize,
    pub max_history: Option<usize>,
    pub candidate_seed: Option<u64>,
    pub n_neg_train: Option<usize>,
    pub n_neg_eval: Option<usize>,
    /// Training negatives are drawn once per seed, not per epoch.
    pub negatives_fixed_per_seed: bool,
    pub candidates_checksum: Option<String>,
}

pub const INTERACTIONS_FILE: &str = "interactions.tsv";
pub const MANIFEST_FILE: &str = "dataset.json";
pub const CANDIDATES_FILE: &str = "candidates.bin";

impl InteractionDataset {
    pub fn manifest(&self) -> DatasetManifest {
        let c = self.candidates.as_ref();
        DatasetManifest {
            num_users: self.num_users(),
            num_items: self.num_items(),
            num_categories: self.num_categories,
            num_interactions: self.num_interactions(),
            max_history: self.max_history,
            candidate_seed: c.map(|c| c.seed),
            n_neg_train: c.map(|c| c.n_neg_train),
            n_neg_eval: c.map(|c| c.n_neg_eval),
            negatives_fixed_per_seed: true,
            candidates_checksum: c.map(|c| crate::io::checksum_bytes(&candidate_bytes(c))),
        }
    }

    /// Writes `interactions.tsv`, `dataset.json` and, when sampled, `candidates.bin`.
    pub fn save(&self, dir: &Path) -> Result<()> {
        fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
        let path = dir.join(INTERACTIONS_FILE);
        let mut buf = Vec::new();
        write_tsv(&self.interactions(), &mut buf).map_err(|e| Error::io(&path, e))?;
        crate::io::write_bytes(&path, &buf)?;
        crate::io::write_json(&dir.join(MANIFEST_FILE), &self.manifest())?;
        if let Some(c) = &self.candidates {
            crate::io::write_bytes(&dir.join(CANDIDATES_FILE), &candidate_bytes(c))?;
        }
        Ok(())
    }

    pub fn load(dir: &Path) -> Result<Self> {
        let manifest: DatasetManifest = crate::io::read_json(&dir.join(MANIFEST_FILE))?;
        let mut ds = load_dataset(&dir.join(INTERACTIONS_FILE), DatasetFormat::Tsv, Some(manifest.num_categories))?;
        ds.max_history = manifest.max_history;
        if let (Some(seed), Some(nt), Some(ne)) = (manifest.candidate_seed, manifest.n_neg_train, manifest.n_neg_eval) {
            let bytes = crate::io::read_bytes(&dir.join(CANDIDATES_FILE))?;
            ds.candidates = Some(parse_candidates(&ds, &bytes, seed, nt, ne)?);
        }
        if ds.num_users() != manifest.num_users || ds.num_items() != manifest.num_items {
            return Err(Error::Schema("dataset manifest counts disagree with interactions".into()));
        }
        Ok(ds)
    }
}

fn candidate_bytes(c: &CandidateSets) -> Vec<u8> {
    let mut out = Vec::new();
    for u in 0..c.train.len() {
        for v in c.train[u].iter().chain(&c.valid[u]).chain(&c.test[u]) {
            out.extend_from_slice(&v.to_le_bytes());
        }
    }
    out
}

fn parse_candidates(ds: &InteractionDataset, bytes: &[u8], seed: u64, nt: usize, ne: usize) -> Result<CandidateSets> {
    if bytes.len() % 4 != 0 {
        return Err(Error::Schema("candidate blob length not a multiple of 4".into()));
    }
    let vals: Vec<u32> = bytes
        .chunks_exact(4)
        .map(|b| u32::from_le_bytes([b[0], b[1], b[2], b[3]]))
        .collect();
    let mut sets = CandidateSets {
        seed,
        n_neg_train: nt,
        n_neg_eval: ne,
        train: Vec::new(),
        valid: Vec::new(),
        test: Vec::new(),
    };
    let mut off = 0;
    let mut take = |n: usize| -> Result<Vec<u32>> {
        let s = vals
            .get(off..off + n)
            .ok_or_else(|| Error::Schema("candidate blob truncated".into()))?
            .to_vec();
        off += n;
        Ok(s)
    };
    for user in &ds.users {
        let pairs = user.train_len().saturating_sub(1);
        sets.train.push(take(pairs * (1 + nt))?);
        sets.valid.push(take(1 + ne)?);
        sets.test.push(take(1 + ne)?);
    }
    if off != vals.len() {
        return Err(Error::Schema("candidate blob has trailing values".into()));
    }
    Ok(sets)
}

/// Converts MovieLens-1M `ratings.dat` / `movies.dat` (and optionally
/// `users.dat` for the gender group) into interactions. Genres become the
/// 18 category ids in the order listed in the MovieLens README.
pub fn convert_movielens(ratings: &Path, movies: &Path, users: Option<&Path>) -> Result<Vec<Interaction>> {
    const GENRES: [&str; 18] = [
        "Action", "Adventure", "Animation", "Children's", "Comedy", "Crime", "Documentary", "Drama", "Fantasy",
        "Film-Noir", "Horror", "Musical", "Mystery", "Romance", "Sci-Fi", "Thriller", "War", "Western",
    ];
    let read = |p: &Path| -> Result<String> {
        let bytes = fs::read(p).map_err(|e| Error::io(p, e))?;
        Ok(String::from_utf8_lossy(&bytes).into_owned())
    };
    let mut genres: HashMap<String, Vec<Category>> = HashMap::new();
    for (i, line) in read(movies)?.lines().enumerate() {
        let f: Vec<&str> = line.split("::").collect();
        if f.len() != 3 {
            return Err(Error::Parse {
                line: i + 1,
                message: "movies.dat expects MovieID::Title::Genres".into(),
            });
        }
        let cats = f[2]
            .split('|')
            .filter_map(|g| GENRES.iter().position(|x| *x == g).map(|p| p as Category))
            .collect();
        genres.insert(f[0].to_string(), cats);
    }
    let mut gender: HashMap<String, String> = HashMap::new();
    if let Some(up) = users {
        for line in read(up)?.lines() {
            let f: Vec<&str> = line.split("::").collect();
            if f.len() >= 2 {
                gender.insert(f[0].to_string(), f[1].to_string());
            }
        }
    }
    let mut rows = Vec::new();
    for (i, line) in read(ratings)?.lines().enumerate() {
        let f: Vec<&str> = line.split("::").collect();
        if f.len() != 4 {
            return Err(Error::Parse {
                line: i + 1,
                message: "ratings.dat expects UserID::MovieID::Rating::Timestamp".into(),
            });
        }
        let timestamp = f[3].parse().map_err(|_| Error::Parse {
            line: i + 1,
            message: "bad timestamp".into(),
        })?;
        rows.push(Interaction {
            user_id: f[0].to_string(),
            item_id: f[1].to_string(),
            timestamp,
            categories: genres.get(f[1]).cloned().unwrap_or_default(),
            group: gender.get(f[0]).cloned(),
        });
    }
    Ok(rows)
}

#[cfg(test)]
mod tests {
    use super::*;

    fn row(u: &str, i: &str, t: i64, cats: &[Category]) -> Interaction {
        Interaction {
            user_id: u.into(),
            item_id: i.into(),
            timestamp: t,
            categories: cats.to_vec(),
            group: None,
        }
    }

    fn toy(counts: &[usize], items: usize) -> InteractionDataset {
        let mut rows = Vec::new();
        for (u, &n) in counts.iter().enumerate() {
            for k in 0..n {
                rows.push(row(&format!("u{u}"), &format!("i{}", (u * 7 + k * 3) % items), k as i64, &[(k % 3) as u16]));
            }
        }
        InteractionDataset::from_interactions(rows, 3).unwrap()
    }

    #[test]
    fn histories_sorted_by_timestamp() {
        let text = "u1\ta\t5\t0\nu1\tb\t3\t1\n";
        let ds = InteractionDataset::from_interactions(parse_tsv(text.as_bytes()).unwrap(), 2).unwrap();
        assert_eq!(ds.users[0].timestamps, vec![3, 5]);
        assert_eq!(ds.item_ids[ds.users[0].items[0] as usize], "b");
    }

    #[test]
    fn equal_timestamps_keep_input_order() {
        let text = "u\tx\t1\t\nu\ty\t1\t\nu\tz\t0\t\n";
        let ds = InteractionDataset::from_interactions(parse_tsv(text.as_bytes()).unwrap(), 1).unwrap();
        let ids: Vec<&str> = ds.users[0].items.iter().map(|&i| ds.item_ids[i as usize].as_str()).collect();
        assert_eq!(ids, ["z", "x", "y"]);
    }

    #[test]
    fn empty_file_gives_empty_dataset() {
        let ds = InteractionDataset::from_interactions(parse_tsv("".as_bytes()).unwrap(), 0).unwrap();
        assert_eq!((ds.num_users(), ds.num_items()), (0, 0));
    }

    #[test]
    fn malformed_line_names_line_number() {
        let err = parse_tsv("u\ti\t1\t0\nu\ti\tnot-a-time\t0\n".as_bytes()).unwrap_err();
        assert!(matches!(err, Error::Parse { line: 2, .. }), "{err}");
        let err = parse_tsv("u\ti\t1\n".as_bytes()).unwrap_err();
        assert!(matches!(err, Error::Parse { line: 1, .. }));
    }

    #[test]
    fn unknown_category_is_schema_error() {
        let rows = parse_tsv("u\ti\t1\t0|4\n".as_bytes()).unwrap();
        assert!(matches!(InteractionDataset::from_interactions(rows, 3), Err(Error::Schema(_))));
    }

    #[test]
    fn group_column_is_optional() {
        let rows = parse_tsv("u\ti\t1\t0\tF\nv\ti\t1\t0\n".as_bytes()).unwrap();
        assert_eq!(rows[0].group.as_deref(), Some("F"));
        assert_eq!(rows[1].group, None);
    }

    #[test]
    fn kcore_thresholds() {
        let ds = toy(&[3, 5, 7], 40);
        let f = kcore_filter(&ds, 5).unwrap();
        assert_eq!(f.num_users(), 2);
        assert!(f.users.iter().all(|u| u.len() >= 5));
        let f4 = kcore_filter(&toy(&[4], 40), 4).unwrap();
        assert_eq!(f4.num_users(), 1);
        assert!(matches!(kcore_filter(&toy(&[4], 40), 5), Err(Error::EmptyDataset(_))));
        let same = kcore_filter(&toy(&[6, 8], 40), 5).unwrap();
        assert_eq!(same, toy(&[6, 8], 40));
    }

    #[test]
    fn kcore_rebuilds_catalog() {
        let rows = vec![
            row("a", "x", 0, &[]),
            row("b", "y", 0, &[]),
            row("b", "z", 1, &[]),
        ];
        let ds = InteractionDataset::from_interactions(rows, 1).unwrap();
        let f = kcore_filter(&ds, 2).unwrap();
        assert_eq!(f.item_ids, vec!["y", "z"]);
        assert_eq!(f.users[0].items, vec![0, 1]);
    }

    #[test]
    fn leave_one_out_layout() {
        let rows = ["a", "b", "c", "d"]
            .iter()
            .enumerate()
            .map(|(t, i)| row("u", i, t as i64, &[]))
            .collect();
        let ds = InteractionDataset::from_interactions(rows, 1).unwrap();
        let ds = leave_one_out_split(&ds, 20).unwrap();
        let name = |xs: &[u32]| xs.iter().map(|&i| ds.item_ids[i as usize].clone()).collect::<Vec<_>>();
        assert_eq!(name(&ds.users[0].items[..ds.users[0].train_len()]), ["a", "b"]);
        let (h, t) = ds.eval_example(0, EvalSplit::Valid);
        assert_eq!((name(h), ds.item_ids[t as usize].as_str()), (vec!["a".to_string(), "b".into()], "c"));
        let (h, t) = ds.eval_example(0, EvalSplit::Test);
        assert_eq!(name(h), ["a", "b", "c"]);
        assert_eq!(ds.item_ids[t as usize], "d");
        let pairs = ds.train_pairs();
        assert_eq!(pairs.len(), 1);
        assert_eq!(name(ds.pair_history(&pairs[0])), ["a"]);
    }

    #[test]
    fn long_history_truncated() {
        let rows = (0..27).map(|t| row("u", &format!("i{t}"), t, &[])).collect();
        let ds = InteractionDataset::from_interactions(rows, 1).unwrap();
        let ds = leave_one_out_split(&ds, 20).unwrap();
        let (h, t) = ds.eval_example(0, EvalSplit::Test);
        assert_eq!(h.len(), 20);
        assert_eq!(h, &ds.users[0].items[6..26]);
        assert_eq!(t, ds.users[0].items[26]);
    }

    #[test]
    fn split_rejects_short_users() {
        let ds = toy(&[2, 5], 40);
        assert!(matches!(leave_one_out_split(&ds, 20), Err(Error::Split(_))));
    }

    #[test]
    fn candidates_deterministic_and_contain_target_once() {
        let ds = leave_one_out_split(&toy(&[6, 8, 9], 60), 20).unwrap();
        let a = sample_candidates(&ds, 9, 10, 7).unwrap();
        let b = sample_candidates(&ds, 9, 10, 7).unwrap();
        assert_eq!(a.candidates, b.candidates);
        let c = a.candidates().unwrap();
        for (u, user) in a.users.iter().enumerate() {
            let hist: HashSet<u32> = user.items.iter().copied().collect();
            for set in c.train[u].chunks(10).chain([c.valid[u].as_slice(), c.test[u].as_slice()]) {
                let target = set[0];
                assert_eq!(set.iter().filter(|&&x| x == target).count(), 1);
                assert!(set[1..].iter().all(|x| !hist.contains(x)));
            }
        }
        let other = sample_candidates(&ds, 9, 10, 8).unwrap();
        assert_ne!(a.candidates, other.candidates);
    }

    #[test]
    fn exhausted_catalog_takes_every_unseen_item() {
        // 5 interactions over a 104-item catalog: exactly 99 unseen items.
        let mut rows: Vec<Interaction> = (0..5).map(|t| row("u", &format!("i{t}"), t, &[])).collect();
        for i in 5..104 {
            rows.push(row(&format!("filler{i}"), &format!("i{i}"), 0, &[]));
        }
        let mut ds = InteractionDataset::from_interactions(rows, 1).unwrap();
        ds.users.truncate(1);
        let ds = leave_one_out_split(&ds, 20).unwrap();
        let s = sample_candidates(&ds, 9, 99, 1).unwrap();
        let c = s.candidates().unwrap();
        let mut negs: Vec<u32> = c.test[0][1..].to_vec();
        negs.sort_unstable();
        assert_eq!(negs, (5..104).collect::<Vec<u32>>());
        let mut ds2 = ds.clone();
        ds2.users[0].items.push(103);
        ds2.users[0].timestamps.push(10);
        assert!(matches!(sample_candidates(&ds2, 9, 99, 1), Err(Error::Sampling(_))));
    }

    #[test]
    fn save_load_roundtrip() {
        let ds = leave_one_out_split(&toy(&[6, 8, 9], 60), 4).unwrap();
        let ds = sample_candidates(&ds, 3, 10, 2).unwrap();
        let dir = tempfile::tempdir().unwrap();
        ds.save(dir.path()).unwrap();
        let back = InteractionDataset::load(dir.path()).unwrap();
        assert_eq!(back, ds);
    }

    #[test]
    fn category_map_overrides() {
        let mut ds = toy(&[3], 40);
        let mut map = HashMap::new();
        map.insert(ds.item_ids[0].clone(), vec![2, 0, 2]);
        ds.apply_category_map(&map).unwrap();
        assert_eq!(ds.item_categories[0], vec![0, 2]);
        map.insert(ds.item_ids[1].clone(), vec![9]);
        assert!(matches!(ds.apply_category_map(&map), Err(Error::Schema(_))));
    }
}
