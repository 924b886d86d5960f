//! Synthetic compositional retrieval corpus.
//!
//! Items are bundles of `A` categorical attributes. Each item is rendered to
//! a feature sequence: a `[CLS]` summary row followed by a `g×g` spatial
//! grid where every attribute owns a contiguous block of cells. The `[CLS]`
//! row is a global summary in which "detail" attributes are faint, so a
//! candidate's summary embedding alone cannot separate items that differ
//! only in detail attributes, while the spatial grid still can.
//!
//! Items are generated in clusters: a base bundle plus all combinations of a
//! few values on a few slots. Every cluster member therefore has several
//! one-attribute-off neighbours, which serve as hard negatives. A query
//! edits one or more attributes of a reference item and its target is the
//! unique corpus item with the edited bundle.

use std::collections::{HashMap, HashSet};
use std::fs::File;
use std::io::{BufRead, BufReader, BufWriter, Write};
use std::path::Path;

use rand::seq::{IndexedRandom, SliceRandom};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, StandardNormal};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::tensor::{Scalar, Tensor};

pub const PAD: u32 = 0;
pub const CLS: u32 = 1;
const SET: u32 = 2;
const TO: u32 = 3;
const FIRST_SLOT_TOKEN: u32 = 4;

/// Longest modification text accepted by the encoders, `[CLS]` included.
pub const MAX_TEXT_LEN: usize = 16;

/// Knobs that shape the corpus and its features.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct CorpusConfig {
    /// Items per corpus (M).
    pub num_items: usize,
    /// Attribute slots per item (A).
    pub num_slots: usize,
    /// Alphabet size of each slot (V_a).
    pub values_per_slot: usize,
    /// Side of the spatial feature grid (g).
    pub grid_side: usize,
    pub d_model: usize,
    pub seed: u64,
    /// Feature noise standard deviation per element, relative to the unit
    /// per-element scale of attribute embeddings.
    pub noise: f64,
    /// Slots varied inside one cluster.
    pub cluster_slots: usize,
    /// Values taken by each varied slot inside one cluster.
    pub cluster_values: usize,
    /// Trailing slots that are only faintly present in the `[CLS]` row.
    pub detail_slots: usize,
    /// Weight of a detail slot in the `[CLS]` row (global slots weigh 1).
    pub detail_weight: f64,
}

impl Default for CorpusConfig {
    fn default() -> Self {
        CorpusConfig {
            num_items: 2048,
            num_slots: 6,
            values_per_slot: 8,
            grid_side: 6,
            d_model: 64,
            seed: 0,
            noise: 0.05,
            cluster_slots: 2,
            cluster_values: 4,
            detail_slots: 3,
            detail_weight: 0.1,
        }
    }
}

impl CorpusConfig {
    /// Number of rows of a rendered feature sequence.
    pub fn seq_len(&self) -> usize {
        self.grid_side * self.grid_side + 1
    }

    fn validate(&self) -> Result<()> {
        let positive = [
            ("num_items", self.num_items),
            ("num_slots", self.num_slots),
            ("values_per_slot", self.values_per_slot),
            ("grid_side", self.grid_side),
            ("d_model", self.d_model),
            ("cluster_values", self.cluster_values),
        ];
        for (name, v) in positive {
            if v == 0 {
                return Err(Error::contract(format!("{name} must be positive")));
            }
        }
        if self.num_slots > self.grid_side * self.grid_side {
            return Err(Error::contract("more slots than grid cells"));
        }
        if self.cluster_slots > self.num_slots || self.detail_slots > self.num_slots {
            return Err(Error::contract("cluster/detail slots exceed slot count"));
        }
        if self.cluster_values > self.values_per_slot {
            return Err(Error::contract("cluster values exceed alphabet size"));
        }
        let capacity = (self.values_per_slot as f64).powi(self.num_slots as i32);
        if (self.num_items as f64) > capacity {
            return Err(Error::contract(format!(
                "corpus size {} exceeds the {} distinct attribute bundles",
                self.num_items, capacity
            )));
        }
        Ok(())
    }
}

/// One corpus item: an id and one value per attribute slot.
#[derive(Clone, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub struct ItemSpec {
    pub id: u64,
    pub attrs: Vec<u8>,
}

/// Fixed random vectors from which item features are assembled.
#[derive(Clone, Debug)]
pub struct Featurizer {
    slot_values: Vec<Vec<Vec<f64>>>,
    positions: Vec<Vec<f64>>,
    cls_base: Vec<f64>,
    cls_weights: Vec<f64>,
    cell_slot: Vec<usize>,
    noise: f64,
    seed: u64,
    d: usize,
}

fn normal_vec<R: Rng>(rng: &mut R, d: usize, scale: f64) -> Vec<f64> {
    (0..d)
        .map(|_| {
            let z: f64 = StandardNormal.sample(rng);
            z * scale
        })
        .collect()
}

impl Featurizer {
    pub fn new(cfg: &CorpusConfig) -> Self {
        let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed ^ 0x5eed_fea7);
        let d = cfg.d_model;
        let slot_values = (0..cfg.num_slots)
            .map(|_| {
                (0..cfg.values_per_slot)
                    .map(|_| normal_vec(&mut rng, d, 1.0))
                    .collect()
            })
            .collect();
        let cells = cfg.grid_side * cfg.grid_side;
        let positions = (0..cells).map(|_| normal_vec(&mut rng, d, 0.5)).collect();
        let cls_base = normal_vec(&mut rng, d, 0.5);
        let cls_weights = (0..cfg.num_slots)
            .map(|s| {
                if s >= cfg.num_slots - cfg.detail_slots {
                    cfg.detail_weight
                } else {
                    1.0
                }
            })
            .collect();
        let cell_slot = (0..cells).map(|c| c * cfg.num_slots / cells).collect();
        Featurizer {
            slot_values,
            positions,
            cls_base,
            cls_weights,
            cell_slot,
            noise: cfg.noise,
            seed: cfg.seed,
            d,
        }
    }

    /// `[CLS]` row followed by the spatial grid, `(g²+1) × d`.
    pub fn render<T: Scalar>(&self, item: &ItemSpec) -> Tensor<T> {
        let d = self.d;
        let rows = self.positions.len() + 1;
        let mut rng = ChaCha8Rng::seed_from_u64(
            self.seed
                .wrapping_mul(0x9e37_79b9_7f4a_7c15)
                .wrapping_add(item.id.wrapping_mul(0xbf58_476d_1ce4_e5b9)),
        );
        // uniform noise with the requested standard deviation, bounded at ±σ√3
        let half_width = self.noise * 3f64.sqrt();
        let mut out = Vec::with_capacity(rows * d);
        let norm = self.cls_weights.iter().map(|w| w * w).sum::<f64>().sqrt();
        for j in 0..d {
            let mut v = self.cls_base[j];
            for (s, &a) in item.attrs.iter().enumerate() {
                v += self.cls_weights[s] * self.slot_values[s][a as usize][j] / norm;
            }
            v += rng.random_range(-half_width..=half_width);
            out.push(T::lit(v));
        }
        for (c, pos) in self.positions.iter().enumerate() {
            let s = self.cell_slot[c];
            let e = &self.slot_values[s][item.attrs[s] as usize];
            for j in 0..d {
                let v = pos[j] + e[j] + rng.random_range(-half_width..=half_width);
                out.push(T::lit(v));
            }
        }
        Tensor::new(vec![rows, d], out).expect("rows × d")
    }
}

/// A generated corpus: items, their rendered features, and the config that
/// reproduces both.
#[derive(Clone, Debug)]
pub struct SyntheticCorpus {
    pub config: CorpusConfig,
    pub items: Vec<ItemSpec>,
    features: Vec<f32>,
    by_id: HashMap<u64, usize>,
    by_bundle: HashMap<Vec<u8>, usize>,
}

impl SyntheticCorpus {
    /// Renders features for a fixed item list.
    pub fn from_items(config: CorpusConfig, items: Vec<ItemSpec>) -> Result<Self> {
        let featurizer = Featurizer::new(&config);
        let mut by_id = HashMap::with_capacity(items.len());
        let mut by_bundle = HashMap::with_capacity(items.len());
        let mut features = Vec::with_capacity(items.len() * config.seq_len() * config.d_model);
        for (i, item) in items.iter().enumerate() {
            if item.attrs.len() != config.num_slots
                || item.attrs.iter().any(|&a| a as usize >= config.values_per_slot)
            {
                return Err(Error::contract(format!("item {} has malformed attributes", item.id)));
            }
            if by_id.insert(item.id, i).is_some() {
                return Err(Error::contract(format!("duplicate item id {}", item.id)));
            }
            if by_bundle.insert(item.attrs.clone(), i).is_some() {
                return Err(Error::contract(format!("duplicate bundle for item {}", item.id)));
            }
            features.extend_from_slice(featurizer.render::<f32>(item).data());
        }
        Ok(SyntheticCorpus {
            config,
            items,
            features,
            by_id,
            by_bundle,
        })
    }

    pub fn len(&self) -> usize {
        self.items.len()
    }

    pub fn is_empty(&self) -> bool {
        self.items.is_empty()
    }

    pub fn seq_len(&self) -> usize {
        self.config.seq_len()
    }

    pub fn index_of(&self, id: u64) -> Option<usize> {
        self.by_id.get(&id).copied()
    }

    pub fn item(&self, id: u64) -> Option<&ItemSpec> {
        self.index_of(id).map(|i| &self.items[i])
    }

    pub fn find_bundle(&self, attrs: &[u8]) -> Option<&ItemSpec> {
        self.by_bundle.get(attrs).map(|&i| &self.items[i])
    }

    pub fn ids(&self) -> impl Iterator<Item = u64> + '_ {
        self.items.iter().map(|it| it.id)
    }

    /// Raw feature rows of the item at position `idx`.
    pub fn feature_slice(&self, idx: usize) -> &[f32] {
        let n = self.seq_len() * self.config.d_model;
        &self.features[idx * n..(idx + 1) * n]
    }

    /// Feature sequence of an item, `(g²+1) × d`, row 0 being `[CLS]`.
    pub fn features<T: Scalar>(&self, id: u64) -> Result<Tensor<T>> {
        let idx = self
            .index_of(id)
            .ok_or_else(|| Error::contract(format!("unknown item id {id}")))?;
        let data = self.feature_slice(idx).iter().map(|&v| T::lit(v as f64)).collect();
        Tensor::new(vec![self.seq_len(), self.config.d_model], data)
    }

    /// Stacked feature sequences for several items, `(n·(g²+1)) × d`.
    pub fn stacked_features<T: Scalar>(&self, ids: &[u64]) -> Result<Tensor<T>> {
        let n = self.seq_len() * self.config.d_model;
        let mut data = Vec::with_capacity(ids.len() * n);
        for &id in ids {
            let idx = self
                .index_of(id)
                .ok_or_else(|| Error::contract(format!("unknown item id {id}")))?;
            data.extend(self.feature_slice(idx).iter().map(|&v| T::lit(v as f64)));
        }
        Tensor::new(vec![ids.len() * self.seq_len(), self.config.d_model], data)
    }
}

/// Generates `config.num_items` clustered items with ids starting at
/// `first_id`, never reusing a bundle from `exclude`.
pub fn generate_corpus_excluding(
    config: &CorpusConfig,
    first_id: u64,
    exclude: &HashSet<Vec<u8>>,
) -> Result<SyntheticCorpus> {
    config.validate()?;
    let free = (config.values_per_slot as f64).powi(config.num_slots as i32) - exclude.len() as f64;
    if (config.num_items as f64) > free {
        return Err(Error::contract("not enough unused attribute bundles"));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(config.seed ^ 0xc0de_5eed);
    let a = config.num_slots;
    let v = config.values_per_slot as u8;
    let mut seen: HashSet<Vec<u8>> = HashSet::new();
    let mut items = Vec::with_capacity(config.num_items);
    let mut stalls = 0usize;
    while items.len() < config.num_items {
        let before = items.len();
        let base: Vec<u8> = (0..a).map(|_| rng.random_range(0..v)).collect();
        let mut slots: Vec<usize> = (0..a).collect();
        slots.shuffle(&mut rng);
        slots.truncate(config.cluster_slots);
        slots.sort_unstable();
        let value_sets: Vec<Vec<u8>> = slots
            .iter()
            .map(|&s| {
                let mut others: Vec<u8> = (0..v).filter(|&x| x != base[s]).collect();
                others.shuffle(&mut rng);
                let mut set = vec![base[s]];
                set.extend(others.into_iter().take(config.cluster_values - 1));
                set.sort_unstable();
                set
            })
            .collect();
        let combos: usize = value_sets.iter().map(Vec::len).product();
        for mut code in 0..combos {
            let mut bundle = base.clone();
            for (slot, set) in slots.iter().zip(&value_sets) {
                bundle[*slot] = set[code % set.len()];
                code /= set.len();
            }
            if items.len() == config.num_items {
                break;
            }
            if exclude.contains(&bundle) || !seen.insert(bundle.clone()) {
                continue;
            }
            items.push(ItemSpec {
                id: first_id + items.len() as u64,
                attrs: bundle,
            });
        }
        if items.len() == before {
            stalls += 1;
            if stalls > 10_000 {
                return Err(Error::Generation("could not place more distinct items".into()));
            }
        }
    }
    SyntheticCorpus::from_items(config.clone(), items)
}

pub fn generate_corpus(config: &CorpusConfig) -> Result<SyntheticCorpus> {
    generate_corpus_excluding(config, 0, &HashSet::new())
}

/// Token vocabulary: `[PAD]`, `[CLS]`, the function words, slot names and
/// value names.
#[derive(Clone, Debug)]
pub struct Vocab {
    num_slots: usize,
    num_values: usize,
}

impl Vocab {
    pub fn new(num_slots: usize, num_values: usize) -> Self {
        Vocab {
            num_slots,
            num_values,
        }
    }

    pub fn size(&self) -> usize {
        FIRST_SLOT_TOKEN as usize + self.num_slots + self.num_values
    }

    pub fn slot_token(&self, s: usize) -> u32 {
        FIRST_SLOT_TOKEN + s as u32
    }

    pub fn value_token(&self, v: usize) -> u32 {
        FIRST_SLOT_TOKEN + (self.num_slots + v) as u32
    }

    pub fn word(&self, id: u32) -> Option<String> {
        let id = id as usize;
        let first = FIRST_SLOT_TOKEN as usize;
        match id {
            0 => Some("[PAD]".into()),
            1 => Some("[CLS]".into()),
            2 => Some("set".into()),
            3 => Some("to".into()),
            _ if id < first + self.num_slots => Some(format!("slot{}", id - first)),
            _ if id < first + self.num_slots + self.num_values => {
                Some(format!("val{}", id - first - self.num_slots))
            }
            _ => None,
        }
    }

    pub fn id(&self, word: &str) -> Option<u32> {
        match word {
            "[PAD]" => Some(PAD),
            "[CLS]" => Some(CLS),
            "set" => Some(SET),
            "to" => Some(TO),
            _ => {
                if let Some(n) = word.strip_prefix("slot") {
                    let s: usize = n.parse().ok()?;
                    (s < self.num_slots).then(|| self.slot_token(s))
                } else if let Some(n) = word.strip_prefix("val") {
                    let v: usize = n.parse().ok()?;
                    (v < self.num_values).then(|| self.value_token(v))
                } else {
                    None
                }
            }
        }
    }

    /// Renders edits as `set slotS to valV ...`, sorted by slot.
    pub fn render_edits(&self, edits: &[(usize, u8)]) -> Vec<String> {
        let mut edits = edits.to_vec();
        edits.sort_unstable();
        let mut words = Vec::with_capacity(edits.len() * 4);
        for (s, v) in edits {
            words.push("set".to_string());
            words.push(format!("slot{s}"));
            words.push("to".to_string());
            words.push(format!("val{v}"));
        }
        words
    }

    /// Token ids with a leading `[CLS]`.
    pub fn encode(&self, words: &[String]) -> Result<Vec<u32>> {
        let mut ids = Vec::with_capacity(words.len() + 1);
        ids.push(CLS);
        for w in words {
            ids.push(
                self.id(w)
                    .ok_or_else(|| Error::contract(format!("unknown token {w:?}")))?,
            );
        }
        Ok(ids)
    }

    /// Parses `set slotS to valV` groups back into edits.
    pub fn parse_edits(&self, words: &[String]) -> Result<Vec<(usize, u8)>> {
        if words.len() % 4 != 0 {
            return Err(Error::contract("modification text is not a list of edits"));
        }
        words
            .chunks(4)
            .map(|w| {
                let slot = w[1]
                    .strip_prefix("slot")
                    .and_then(|n| n.parse::<usize>().ok())
                    .filter(|&s| s < self.num_slots);
                let val = w[3]
                    .strip_prefix("val")
                    .and_then(|n| n.parse::<u8>().ok())
                    .filter(|&v| (v as usize) < self.num_values);
                match (w[0].as_str(), slot, w[2].as_str(), val) {
                    ("set", Some(s), "to", Some(v)) => Ok((s, v)),
                    _ => Err(Error::contract(format!("malformed edit {w:?}"))),
                }
            })
            .collect()
    }
}

/// `⟨(reference, text), target⟩` with an optional five-candidate subset.
#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct QueryTriplet {
    pub query_id: u64,
    pub ref_id: u64,
    pub target_id: u64,
    pub tokens: Vec<String>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub subset: Option<Vec<u64>>,
}

pub const SUBSET_SIZE: usize = 5;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct QueryConfig {
    pub num_queries: usize,
    /// Edits per query are drawn uniformly from `1..=max_edits`.
    pub max_edits: usize,
    pub seed: u64,
    pub first_query_id: u64,
    /// Require and emit a five-candidate subset for every query.
    pub with_subsets: bool,
}

/// Attempts per query before generation gives up.
const QUERY_BUDGET: usize = 20_000;

/// Samples queries whose targets exist in `corpus`.
pub fn generate_queries(corpus: &SyntheticCorpus, cfg: &QueryConfig) -> Result<Vec<QueryTriplet>> {
    if corpus.is_empty() {
        return Err(Error::contract("cannot draw queries from an empty corpus"));
    }
    let a = corpus.config.num_slots;
    if cfg.max_edits == 0 || cfg.max_edits > a || 1 + 4 * cfg.max_edits > MAX_TEXT_LEN {
        return Err(Error::contract(format!(
            "max_edits must be in 1..={}",
            a.min((MAX_TEXT_LEN - 1) / 4)
        )));
    }
    let vocab = Vocab::new(a, corpus.config.values_per_slot);
    let v = corpus.config.values_per_slot as u8;
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed ^ 0x9e27_0000);
    let mut out = Vec::with_capacity(cfg.num_queries);
    let slots: Vec<usize> = (0..a).collect();
    for q in 0..cfg.num_queries {
        let mut found = None;
        for _ in 0..QUERY_BUDGET {
            let reference = corpus.items.choose(&mut rng).expect("non-empty");
            let n = rng.random_range(1..=cfg.max_edits);
            let mut edited_slots: Vec<usize> = slots.choose_multiple(&mut rng, n).copied().collect();
            edited_slots.sort_unstable();
            let mut bundle = reference.attrs.clone();
            let mut edits = Vec::with_capacity(n);
            for &s in &edited_slots {
                let mut nv = rng.random_range(0..v - 1);
                if nv >= bundle[s] {
                    nv += 1;
                }
                bundle[s] = nv;
                edits.push((s, nv));
            }
            let Some(target) = corpus.find_bundle(&bundle) else {
                continue;
            };
            let subset = if cfg.with_subsets {
                let mut off: Vec<u64> = one_off_neighbours(corpus, &target.attrs)
                    .into_iter()
                    .filter(|&id| id != reference.id)
                    .collect();
                if off.len() < SUBSET_SIZE - 1 {
                    continue;
                }
                off.shuffle(&mut rng);
                let mut s: Vec<u64> = off.into_iter().take(SUBSET_SIZE - 1).collect();
                s.push(target.id);
                s.sort_unstable();
                Some(s)
            } else {
                None
            };
            found = Some(QueryTriplet {
                query_id: cfg.first_query_id + q as u64,
                ref_id: reference.id,
                target_id: target.id,
                tokens: vocab.render_edits(&edits),
                subset,
            });
            break;
        }
        out.push(found.ok_or_else(|| {
            Error::Generation(format!("no valid target found for query {q}"))
        })?);
    }
    Ok(out)
}

/// Ids of corpus items differing from `attrs` in exactly one slot.
pub fn one_off_neighbours(corpus: &SyntheticCorpus, attrs: &[u8]) -> Vec<u64> {
    let v = corpus.config.values_per_slot as u8;
    let mut out = Vec::new();
    let mut probe = attrs.to_vec();
    for s in 0..attrs.len() {
        for val in 0..v {
            if val == attrs[s] {
                continue;
            }
            probe[s] = val;
            if let Some(it) = corpus.find_bundle(&probe) {
                out.push(it.id);
            }
        }
        probe[s] = attrs[s];
    }
    out.sort_unstable();
    out
}

/// Applies a query's edits to its reference bundle.
pub fn edited_bundle(reference: &ItemSpec, edits: &[(usize, u8)]) -> Vec<u8> {
    let mut b = reference.attrs.clone();
    for &(s, v) in edits {
        b[s] = v;
    }
    b
}

pub fn save_triplets(path: &Path, triplets: &[QueryTriplet]) -> Result<()> {
    let file = File::create(path).map_err(|e| Error::io(path, e))?;
    let mut w = BufWriter::new(file);
    for t in triplets {
        let line = serde_json::to_string(t).expect("triplet serializes");
        writeln!(w, "{line}").map_err(|e| Error::io(path, e))?;
    }
    w.flush().map_err(|e| Error::io(path, e))
}

pub fn load_triplets(path: &Path) -> Result<Vec<QueryTriplet>> {
    let file = File::open(path).map_err(|e| Error::io(path, e))?;
    parse_triplets(BufReader::new(file))
}

/// Parses line-oriented triplet records. Blank lines are skipped.
pub fn parse_triplets<R: BufRead>(reader: R) -> Result<Vec<QueryTriplet>> {
    let mut out = Vec::new();
    for (i, line) in reader.lines().enumerate() {
        let line = line.map_err(|e| Error::Parse {
            line: i + 1,
            msg: e.to_string(),
        })?;
        if line.trim().is_empty() {
            continue;
        }
        let t: QueryTriplet = serde_json::from_str(&line).map_err(|e| Error::Parse {
            line: i + 1,
            msg: e.to_string(),
        })?;
        if let Some(s) = &t.subset {
            if s.len() != SUBSET_SIZE || !s.contains(&t.target_id) {
                return Err(Error::Parse {
                    line: i + 1,
                    msg: format!("subset must hold {SUBSET_SIZE} ids including the target"),
                });
            }
        }
        out.push(t);
    }
    Ok(out)
}

/// Everything needed to regenerate a train/validation benchmark.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct BenchmarkConfig {
    pub corpus: CorpusConfig,
    pub train_queries: usize,
    pub val_queries: usize,
    pub max_edits: usize,
    pub seed: u64,
}

impl Default for BenchmarkConfig {
    fn default() -> Self {
        BenchmarkConfig {
            corpus: CorpusConfig::default(),
            train_queries: 4096,
            val_queries: 512,
            max_edits: 2,
            seed: 0,
        }
    }
}

/// Disjoint train and validation corpora with their queries.
#[derive(Clone, Debug)]
pub struct Benchmark {
    pub config: BenchmarkConfig,
    pub train: SyntheticCorpus,
    pub val: SyntheticCorpus,
    pub train_queries: Vec<QueryTriplet>,
    pub val_queries: Vec<QueryTriplet>,
}

/// Serialized description of a benchmark: config plus item lists. Features
/// are re-rendered from it on load.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Manifest {
    pub config: BenchmarkConfig,
    pub train_items: Vec<ItemSpec>,
    pub val_items: Vec<ItemSpec>,
}

impl Benchmark {
    pub fn generate(config: &BenchmarkConfig) -> Result<Self> {
        let mut train_cfg = config.corpus.clone();
        train_cfg.seed = config.seed;
        let train = generate_corpus_excluding(&train_cfg, 0, &HashSet::new())?;
        let used: HashSet<Vec<u8>> = train.items.iter().map(|it| it.attrs.clone()).collect();
        let mut val_cfg = train_cfg.clone();
        val_cfg.seed = config.seed.wrapping_add(0x7a1_0000);
        let val_items = generate_corpus_excluding(&val_cfg, train.len() as u64, &used)?.items;
        // validation items share the training featurizer
        let val = SyntheticCorpus::from_items(train_cfg.clone(), val_items)?;
        let train_queries = generate_queries(
            &train,
            &QueryConfig {
                num_queries: config.train_queries,
                max_edits: config.max_edits,
                seed: config.seed,
                first_query_id: 0,
                with_subsets: false,
            },
        )?;
        let val_queries = generate_queries(
            &val,
            &QueryConfig {
                num_queries: config.val_queries,
                max_edits: config.max_edits,
                seed: config.seed.wrapping_add(1),
                first_query_id: config.train_queries as u64,
                with_subsets: true,
            },
        )?;
        Ok(Benchmark {
            config: config.clone(),
            train,
            val,
            train_queries,
            val_queries,
        })
    }

    pub fn manifest(&self) -> Manifest {
        Manifest {
            config: self.config.clone(),
            train_items: self.train.items.clone(),
            val_items: self.val.items.clone(),
        }
    }

    /// Rebuilds corpora from a manifest; queries are loaded separately.
    pub fn corpora_from_manifest(m: &Manifest) -> Result<(SyntheticCorpus, SyntheticCorpus)> {
        let mut cfg = m.config.corpus.clone();
        cfg.seed = m.config.seed;
        let train = SyntheticCorpus::from_items(cfg.clone(), m.train_items.clone())?;
        let val = SyntheticCorpus::from_items(cfg, m.val_items.clone())?;
        Ok((train, val))
    }

    pub fn vocab(&self) -> Vocab {
        Vocab::new(self.config.corpus.num_slots, self.config.corpus.values_per_slot)
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn small() -> CorpusConfig {
        CorpusConfig {
            num_items: 200,
            d_model: 16,
            ..CorpusConfig::default()
        }
    }

    #[test]
    fn same_seed_same_corpus() {
        let a = generate_corpus(&small()).unwrap();
        let b = generate_corpus(&small()).unwrap();
        assert_eq!(a.items, b.items);
        assert_eq!(a.features, b.features);
    }

    #[test]
    fn single_item_shape() {
        let cfg = CorpusConfig {
            num_items: 1,
            ..small()
        };
        let c = generate_corpus(&cfg).unwrap();
        assert_eq!(c.len(), 1);
        let f = c.features::<f32>(0).unwrap();
        assert_eq!(f.shape(), &[37, 16]);
    }

    #[test]
    fn infeasible_size_is_rejected() {
        let cfg = CorpusConfig {
            num_items: 65,
            num_slots: 2,
            values_per_slot: 8,
            ..small()
        };
        assert!(matches!(generate_corpus(&cfg), Err(Error::Contract(_))));
    }

    #[test]
    fn queries_edit_exactly_the_named_slots() {
        let c = generate_corpus(&small()).unwrap();
        let vocab = Vocab::new(6, 8);
        let qs = generate_queries(
            &c,
            &QueryConfig {
                num_queries: 100,
                max_edits: 2,
                seed: 3,
                first_query_id: 0,
                with_subsets: true,
            },
        )
        .unwrap();
        for q in &qs {
            let edits = vocab.parse_edits(&q.tokens).unwrap();
            assert!(!edits.is_empty());
            let r = c.item(q.ref_id).unwrap();
            let t = c.item(q.target_id).unwrap();
            let changed: Vec<usize> = (0..6).filter(|&s| r.attrs[s] != t.attrs[s]).collect();
            let named: Vec<usize> = edits.iter().map(|e| e.0).collect();
            assert_eq!(changed, named);
            let subset = q.subset.as_ref().unwrap();
            assert_eq!(subset.len(), 5);
            assert!(subset.contains(&q.target_id));
            assert!(!subset.contains(&q.ref_id));
            for &id in subset.iter().filter(|&&id| id != q.target_id) {
                let o = c.item(id).unwrap();
                let diff = (0..6).filter(|&s| o.attrs[s] != t.attrs[s]).count();
                assert_eq!(diff, 1);
            }
        }
    }

    #[test]
    fn vocab_round_trip() {
        let v = Vocab::new(6, 8);
        let words = v.render_edits(&[(4, 1), (2, 7)]);
        assert_eq!(words[..4], ["set", "slot2", "to", "val7"]);
        assert_eq!(v.parse_edits(&words).unwrap(), vec![(2, 7), (4, 1)]);
        let ids = v.encode(&words).unwrap();
        assert_eq!(ids[0], CLS);
        assert_eq!(ids.len(), 9);
        assert!(ids.iter().all(|&t| (t as usize) < v.size()));
    }

    #[test]
    fn triplet_schema_rules() {
        let good = r#"{"query_id":1,"ref_id":2,"target_id":3,"tokens":["set","slot0","to","val1"],"subset":[3,4,5,6,7]}"#;
        let bad = r#"{"query_id":1,"ref_id":2,"target_id":3,"tokens":[],"subset":[3,4,5,6]}"#;
        assert_eq!(parse_triplets(good.as_bytes()).unwrap().len(), 1);
        let err = parse_triplets(format!("{good}\n{bad}\n").as_bytes()).unwrap_err();
        assert!(matches!(err, Error::Parse { line: 2, .. }));
        assert!(parse_triplets("".as_bytes()).unwrap().is_empty());
        assert!(matches!(
            parse_triplets("not json".as_bytes()),
            Err(Error::Parse { line: 1, .. })
        ));
    }
}
