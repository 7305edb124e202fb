//! Learnable soft-prompt parameters.
//!
//! Every prompt group is addressed by a `(role, name)` pair: key prompts per
//! component type, and value prompts per format, task and output type. Each
//! group owns its own matrix; there is no shared storage between groups.

use std::collections::{BTreeMap, BTreeSet};
use std::fmt;
use std::path::Path;

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::container;
use crate::error::{Error, Result};
use crate::nn::Mat;

/// Flattened id of the first slot position; any id at or above this value
/// refers to a prompt vector rather than a vocabulary token.
pub const SLOT_ID_BASE: u32 = 1 << 24;

const MAGIC: &[u8; 4] = b"SPPT";
const VERSION: u32 = 1;

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Role {
    Key,
    FormatValue,
    TaskValue,
    OutputValue,
}

impl Role {
    pub fn label(self) -> &'static str {
        match self {
            Role::Key => "KEY",
            Role::FormatValue => "FORMAT",
            Role::TaskValue => "TASK",
            Role::OutputValue => "OUTPUT",
        }
    }
}

#[derive(Debug, Clone, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
pub struct GroupId {
    pub role: Role,
    pub name: String,
}

impl GroupId {
    pub fn new(role: Role, name: impl Into<String>) -> Self {
        Self {
            role,
            name: name.into(),
        }
    }

    pub fn key(name: impl Into<String>) -> Self {
        Self::new(Role::Key, name)
    }
}

impl fmt::Display for GroupId {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "{}:{}", self.role.label(), self.name)
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct InitConfig {
    pub key_length: usize,
    pub format_length: usize,
    pub task_length: usize,
    pub output_length: usize,
    pub init_scale: f64,
    pub seed: u64,
}

impl Default for InitConfig {
    fn default() -> Self {
        Self {
            key_length: 5,
            format_length: 10,
            task_length: 10,
            output_length: 5,
            init_scale: 0.02,
            seed: 0,
        }
    }
}

impl InitConfig {
    pub fn length_for(&self, role: Role) -> usize {
        match role {
            Role::Key => self.key_length,
            Role::FormatValue => self.format_length,
            Role::TaskValue => self.task_length,
            Role::OutputValue => self.output_length,
        }
    }

    pub fn validate(&self) -> Result<()> {
        let lengths = [
            self.key_length,
            self.format_length,
            self.task_length,
            self.output_length,
        ];
        if lengths.contains(&0) {
            return Err(Error::InvalidConfig("prompt lengths must be >= 1".into()));
        }
        if !(self.init_scale > 0.0 && self.init_scale.is_finite()) {
            return Err(Error::InvalidConfig("init_scale must be > 0".into()));
        }
        Ok(())
    }

    /// Deterministic RNG for one group, derived from `(seed, role, name)`.
    fn group_rng(&self, id: &GroupId) -> ChaCha8Rng {
        let mut h = Sha256::new();
        h.update(self.seed.to_le_bytes());
        h.update(id.role.label().as_bytes());
        h.update([0]);
        h.update(id.name.as_bytes());
        ChaCha8Rng::from_seed(h.finalize().into())
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct PromptGroup {
    pub id: GroupId,
    pub values: Mat,
    pub trainable: bool,
}

impl PromptGroup {
    pub fn length(&self) -> usize {
        self.values.nrows()
    }

    pub fn dim(&self) -> usize {
        self.values.ncols()
    }
}

/// Which groups a [`PromptTable::set_trainable`] call touches.
#[derive(Debug, Clone)]
pub enum Selector {
    Role(Role),
    Groups(BTreeSet<GroupId>),
}

impl Selector {
    fn matches(&self, id: &GroupId) -> bool {
        match self {
            Selector::Role(r) => id.role == *r,
            Selector::Groups(set) => set.contains(id),
        }
    }
}

/// All prompt groups of a model, in insertion order.
#[derive(Debug, Clone, PartialEq)]
pub struct PromptTable {
    dim: usize,
    config: InitConfig,
    groups: Vec<PromptGroup>,
    index: BTreeMap<GroupId, usize>,
}

#[derive(Serialize, Deserialize)]
struct FileHeader {
    dim: usize,
    config: InitConfig,
    dtype: String,
    groups: Vec<GroupEntry>,
}

#[derive(Serialize, Deserialize)]
struct GroupEntry {
    role: Role,
    name: String,
    length: usize,
    trainable: bool,
}

impl PromptTable {
    pub fn new(dim: usize, config: InitConfig) -> Result<Self> {
        config.validate()?;
        if dim == 0 {
            return Err(Error::InvalidConfig("prompt dim must be >= 1".into()));
        }
        Ok(Self {
            dim,
            config,
            groups: Vec::new(),
            index: BTreeMap::new(),
        })
    }

    pub fn dim(&self) -> usize {
        self.dim
    }

    pub fn config(&self) -> &InitConfig {
        &self.config
    }

    pub fn len(&self) -> usize {
        self.groups.len()
    }

    pub fn is_empty(&self) -> bool {
        self.groups.is_empty()
    }

    pub fn groups(&self) -> impl Iterator<Item = &PromptGroup> {
        self.groups.iter()
    }

    pub fn get(&self, id: &GroupId) -> Option<&PromptGroup> {
        self.index.get(id).map(|&i| &self.groups[i])
    }

    pub fn get_mut(&mut self, id: &GroupId) -> Option<&mut PromptGroup> {
        self.index.get(id).map(|&i| &mut self.groups[i])
    }

    pub fn contains(&self, id: &GroupId) -> bool {
        self.index.contains_key(id)
    }

    /// Number of positions a slot for `id` occupies: the stored length when
    /// the group exists, the configured default for its role otherwise.
    pub fn slot_length(&self, id: &GroupId) -> usize {
        self.get(id)
            .map(PromptGroup::length)
            .unwrap_or_else(|| self.config.length_for(id.role))
    }

    /// Creates a fresh group of `length` vectors drawn from
    /// `N(0, init_scale²)`, seeded by `(seed, role, name)`.
    pub fn init_group(&mut self, role: Role, name: &str, length: usize) -> Result<&PromptGroup> {
        let id = GroupId::new(role, name);
        if self.contains(&id) {
            return Err(Error::DuplicateGroup(id));
        }
        if length == 0 {
            return Err(Error::InvalidConfig("group length must be >= 1".into()));
        }
        let normal = Normal::new(0.0, self.config.init_scale).expect("validated init_scale");
        let mut rng = self.config.group_rng(&id);
        let values = Mat::from_shape_simple_fn((length, self.dim), || normal.sample(&mut rng));
        self.insert(PromptGroup {
            id,
            values,
            trainable: true,
        });
        Ok(self.groups.last().expect("just inserted"))
    }

    fn insert(&mut self, group: PromptGroup) {
        self.index.insert(group.id.clone(), self.groups.len());
        self.groups.push(group);
    }

    /// Returns the existing group, or initializes one with the role's
    /// default length.
    pub fn get_or_create(&mut self, role: Role, name: &str) -> &PromptGroup {
        let id = GroupId::new(role, name);
        if let Some(&i) = self.index.get(&id) {
            return &self.groups[i];
        }
        let length = self.config.length_for(role);
        self.init_group(role, name, length)
            .expect("absent group with validated length")
    }

    /// Like [`get_or_create`](Self::get_or_create) but reports whether the
    /// group had to be created.
    pub fn ensure(&mut self, id: &GroupId) -> bool {
        let created = !self.contains(id);
        self.get_or_create(id.role, &id.name);
        created
    }

    /// Drops a group and re-initializes it from the seed.
    pub fn reinit(&mut self, id: &GroupId) -> Result<()> {
        let i = *self
            .index
            .get(id)
            .ok_or_else(|| Error::UnknownGroup(id.clone()))?;
        let length = self.groups[i].length();
        let normal = Normal::new(0.0, self.config.init_scale).expect("validated init_scale");
        let mut rng = self.config.group_rng(id);
        self.groups[i].values = Mat::from_shape_simple_fn((length, self.dim), || normal.sample(&mut rng));
        Ok(())
    }

    pub fn set_trainable(&mut self, selector: &Selector, flag: bool) -> Result<usize> {
        let mut hits = 0;
        for g in self.groups.iter_mut().filter(|g| selector.matches(&g.id)) {
            g.trainable = flag;
            hits += 1;
        }
        if hits == 0 {
            return Err(Error::EmptySelector);
        }
        Ok(hits)
    }

    /// First flattened slot id of each group; groups occupy contiguous,
    /// non-overlapping id ranges in insertion order.
    pub fn slot_base(&self, id: &GroupId) -> Option<u32> {
        let i = *self.index.get(id)?;
        let offset: usize = self.groups[..i].iter().map(PromptGroup::length).sum();
        Some(SLOT_ID_BASE + offset as u32)
    }

    pub fn to_bytes(&self) -> Vec<u8> {
        let header = FileHeader {
            dim: self.dim,
            config: self.config.clone(),
            dtype: "f64le".into(),
            groups: self
                .groups
                .iter()
                .map(|g| GroupEntry {
                    role: g.id.role,
                    name: g.id.name.clone(),
                    length: g.length(),
                    trainable: g.trainable,
                })
                .collect(),
        };
        let blobs: Vec<Vec<u8>> = self
            .groups
            .iter()
            .map(|g| container::f64s_to_bytes(g.values.as_slice().expect("standard layout")))
            .collect();
        container::encode(MAGIC, VERSION, &header, &blobs)
    }

    pub fn from_bytes(bytes: &[u8]) -> Result<Self> {
        let decoded = container::decode::<FileHeader>(bytes, MAGIC, VERSION)?;
        let header = decoded.header;
        if header.dtype != "f64le" {
            return Err(Error::CorruptFile(format!("unsupported dtype {}", header.dtype)));
        }
        if header.groups.len() != decoded.blobs.len() {
            return Err(Error::CorruptFile("group directory does not match blobs".into()));
        }
        let mut table = PromptTable::new(header.dim, header.config)?;
        for (entry, blob) in header.groups.into_iter().zip(&decoded.blobs) {
            let data = container::bytes_to_f64s(blob)?;
            let values = Mat::from_shape_vec((entry.length, header.dim), data)
                .map_err(|e| Error::CorruptFile(format!("group shape: {e}")))?;
            let id = GroupId::new(entry.role, entry.name);
            if table.contains(&id) {
                return Err(Error::CorruptFile(format!("duplicate group {id}")));
            }
            table.insert(PromptGroup {
                id,
                values,
                trainable: entry.trainable,
            });
        }
        Ok(table)
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        std::fs::write(path, self.to_bytes())?;
        Ok(())
    }

    pub fn load(path: &Path) -> Result<Self> {
        if !path.exists() {
            return Err(Error::FileNotFound(path.to_path_buf()));
        }
        Self::from_bytes(&std::fs::read(path)?)
    }

    /// SHA-256 over one group's values, for cheap before/after comparisons.
    pub fn group_checksum(&self, id: &GroupId) -> Option<[u8; 32]> {
        let g = self.get(id)?;
        let bytes = container::f64s_to_bytes(g.values.as_slice().expect("standard layout"));
        Some(Sha256::digest(bytes).into())
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn table(seed: u64) -> PromptTable {
        PromptTable::new(
            64,
            InitConfig {
                seed,
                ..InitConfig::default()
            },
        )
        .unwrap()
    }

    #[test]
    fn init_is_deterministic_per_seed() {
        let a = table(7).init_group(Role::Key, "question", 5).unwrap().clone();
        let b = table(7).init_group(Role::Key, "question", 5).unwrap().clone();
        assert_eq!(a.values, b.values);
        assert!(a.values.iter().zip(b.values.iter()).all(|(x, y)| x.to_bits() == y.to_bits()));
        let c = table(8).init_group(Role::Key, "question", 5).unwrap().clone();
        assert_ne!(a.values, c.values);
    }

    #[test]
    fn different_names_get_different_matrices() {
        let mut t = table(1);
        let q = t.init_group(Role::Key, "question", 5).unwrap().values.clone();
        let p = t.init_group(Role::Key, "passage", 5).unwrap().values.clone();
        assert!(q.iter().zip(p.iter()).all(|(a, b)| a != b));
        // same name under another role is also independent
        let tq = t.init_group(Role::TaskValue, "question", 5).unwrap().values.clone();
        assert_ne!(q, tq);
    }

    #[test]
    fn init_statistics() {
        let mut t = table(3);
        let g = t.init_group(Role::Key, "question", 5).unwrap();
        let n = g.values.len() as f64;
        let mean = g.values.sum() / n;
        let sd = (g.values.mapv(|v| (v - mean).powi(2)).sum() / (n - 1.0)).sqrt();
        assert!(mean.abs() < 3.0 * 0.02 / n.sqrt(), "mean {mean}");
        assert!((sd - 0.02).abs() < 0.004, "sd {sd}");
        assert_eq!(g.values.dim(), (5, 64));
        assert!(g.trainable);
    }

    #[test]
    fn duplicate_init_fails() {
        let mut t = table(0);
        t.init_group(Role::Key, "q", 2).unwrap();
        assert!(matches!(t.init_group(Role::Key, "q", 2), Err(Error::DuplicateGroup(_))));
    }

    #[test]
    fn get_or_create_reuses_existing() {
        let mut t = table(0);
        let first = t.get_or_create(Role::TaskValue, "dream").clone();
        assert_eq!(first.length(), 10);
        t.get_mut(&first.id).unwrap().values[[0, 0]] = 42.0;
        let again = t.get_or_create(Role::TaskValue, "dream");
        assert_eq!(again.values[[0, 0]], 42.0);
        assert_eq!(t.len(), 1);
    }

    #[test]
    fn set_trainable_selectors() {
        let mut t = table(0);
        t.get_or_create(Role::Key, "question");
        t.get_or_create(Role::Key, "passage");
        t.get_or_create(Role::TaskValue, "a");
        t.get_or_create(Role::TaskValue, "b");
        t.set_trainable(&Selector::Role(Role::TaskValue), false).unwrap();
        assert_eq!(t.groups().filter(|g| !g.trainable).count(), 2);
        t.set_trainable(&Selector::Role(Role::TaskValue), true).unwrap();
        let one = Selector::Groups([GroupId::key("question")].into());
        assert_eq!(t.set_trainable(&one, false).unwrap(), 1);
        assert!(!t.get(&GroupId::key("question")).unwrap().trainable);
        assert!(t.get(&GroupId::key("passage")).unwrap().trainable);
        let none = Selector::Groups([GroupId::key("nope")].into());
        assert!(matches!(t.set_trainable(&none, true), Err(Error::EmptySelector)));
    }

    #[test]
    fn slot_bases_are_contiguous() {
        let mut t = table(0);
        t.get_or_create(Role::Key, "a");
        t.get_or_create(Role::FormatValue, "f");
        t.get_or_create(Role::OutputValue, "o");
        assert_eq!(t.slot_base(&GroupId::key("a")), Some(SLOT_ID_BASE));
        assert_eq!(t.slot_base(&GroupId::new(Role::FormatValue, "f")), Some(SLOT_ID_BASE + 5));
        assert_eq!(t.slot_base(&GroupId::new(Role::OutputValue, "o")), Some(SLOT_ID_BASE + 15));
    }

    #[test]
    fn save_load_round_trip() {
        let mut t = table(5);
        t.get_or_create(Role::Key, "passage");
        t.get_or_create(Role::FormatValue, "nli");
        t.get_or_create(Role::TaskValue, "rte");
        t.set_trainable(&Selector::Role(Role::Key), false).unwrap();
        let bytes = t.to_bytes();
        let back = PromptTable::from_bytes(&bytes).unwrap();
        assert_eq!(back, t);
        assert_eq!(back.to_bytes(), bytes);

        assert!(matches!(
            PromptTable::from_bytes(&bytes[..bytes.len() / 2]),
            Err(Error::CorruptFile(_))
        ));
    }
}
