//! Class taxonomies and their descendant matrices.
//!
//! A hierarchy is written as a comma-separated list of underscore-joined
//! paths, e.g. `"1,1_1,1_2,2"`. Every prefix of a path becomes a class
//! (so `"1_1"` alone also creates `"1"`), and top-level classes hang from a
//! virtual root that is never a row or column of the [`DescendantMatrix`].
//! Classes are ordered canonically by `(depth, dotted name)`.

use std::collections::{BTreeMap, BTreeSet};

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::error::{Error, Result};

/// Hierarchy of the twelve-population bone-marrow panel.
pub const FC_DEEP_SPEC: &str = "1,1_1,1_1_1,1_1_1_1,1_1_1_2,1_1_2,1_1_3,1_1_3_1,1_1_3_2,1_2,1_3,2";
/// One-level hierarchy with a single parental class (HSPC).
pub const FC_SHALLOW_SPEC: &str = "1,2,3,4,5,5_1,5_2,5_3";

const FC_DEEP_NAMES: [(&str, &str); 12] = [
    ("1", "CD45 pos"),
    ("2", "CD45 neg"),
    ("1.1", "Lymphocytes"),
    ("1.2", "Monocytes"),
    ("1.3", "Neutrophils"),
    ("1.1.1", "B cells"),
    ("1.1.2", "NK cells"),
    ("1.1.3", "T cells"),
    ("1.1.1.1", "Lambda pos"),
    ("1.1.1.2", "Kappa pos"),
    ("1.1.3.1", "CD8 T cells"),
    ("1.1.3.2", "CD4 T cells"),
];

const FC_SHALLOW_NAMES: [(&str, &str); 8] = [
    ("1", "T cells"),
    ("2", "B cells"),
    ("3", "Monocytes"),
    ("4", "Mast cells"),
    ("5", "HSPC"),
    ("5.1", "Myeloid HSPC"),
    ("5.2", "Lymphoid HSPC"),
    ("5.3", "Other HSPC"),
];

/// A class of a taxonomy.
#[derive(Clone, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub struct ClassRef {
    /// Dense id in canonical order.
    pub index: usize,
    /// Dotted path, e.g. `"1.1.3"`.
    pub name: String,
    /// Number of path segments (top-level classes have depth 1).
    pub depth: usize,
}

/// C×C subclass relation, root excluded. Entry `(a, b)` is set iff `b` is a
/// subclass of `a` (every class is a subclass of itself).
///
/// Stored twice: as a dense row-major mask and as ascending per-class
/// descendant lists. Both views are built together and always agree.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct DescendantMatrix {
    dim: usize,
    bits: Vec<bool>,
    lists: Vec<Vec<usize>>,
    parents: Vec<Option<usize>>,
}

impl DescendantMatrix {
    /// Builds the relation from a parent vector (`None` = root).
    pub fn from_parents(parents: &[Option<usize>]) -> Self {
        let dim = parents.len();
        let mut bits = vec![false; dim * dim];
        for b in 0..dim {
            let mut cur = Some(b);
            while let Some(a) = cur {
                bits[a * dim + b] = true;
                cur = parents[a];
            }
        }
        let lists = (0..dim)
            .map(|a| (0..dim).filter(|&b| bits[a * dim + b]).collect())
            .collect();
        DescendantMatrix {
            dim,
            bits,
            lists,
            parents: parents.to_vec(),
        }
    }

    /// Same relation extended with a trailing root row/column whose subtree is
    /// everything. Used for the model output layout, which reserves a root slot.
    pub fn with_root(&self) -> Self {
        let mut parents: Vec<Option<usize>> = self.parents.iter().map(|p| Some(p.unwrap_or(self.dim))).collect();
        parents.push(None);
        DescendantMatrix::from_parents(&parents)
    }

    pub fn dim(&self) -> usize {
        self.dim
    }

    #[inline]
    pub fn get(&self, a: usize, b: usize) -> bool {
        self.bits[a * self.dim + b]
    }

    /// Dense mask row of class `a`.
    pub fn row(&self, a: usize) -> &[bool] {
        &self.bits[a * self.dim..(a + 1) * self.dim]
    }

    /// Ascending descendant indices of `a`, `a` included.
    pub fn descendants(&self, a: usize) -> &[usize] {
        &self.lists[a]
    }

    /// Number of set entries: C plus the number of proper (ancestor, descendant) pairs.
    pub fn pair_count(&self) -> usize {
        self.lists.iter().map(Vec::len).sum()
    }
}

/// A validated class tree.
#[derive(Clone, Debug)]
pub struct Taxonomy {
    classes: Vec<ClassRef>,
    parent: Vec<Option<usize>>,
    children: Vec<Vec<usize>>,
    leaves: Vec<usize>,
    labels: Vec<String>,
    spec_string: String,
    matrix: DescendantMatrix,
}

impl PartialEq for Taxonomy {
    fn eq(&self, other: &Self) -> bool {
        self.classes == other.classes && self.parent == other.parent
    }
}

impl Eq for Taxonomy {}

/// Parses a hierarchy string such as `"1,1_1,2"`.
pub fn parse_taxonomy(spec: &str) -> Result<Taxonomy> {
    Taxonomy::parse(spec)
}

/// Descendant matrix of a taxonomy.
pub fn descendant_matrix(t: &Taxonomy) -> DescendantMatrix {
    DescendantMatrix::from_parents(&t.parent)
}

impl Taxonomy {
    pub fn parse(spec: &str) -> Result<Self> {
        if spec.trim().is_empty() {
            return Err(Error::EmptySpec);
        }
        let mut names: BTreeSet<Vec<String>> = BTreeSet::new();
        for token in spec.split(',') {
            let token = token.trim();
            let segments: Vec<&str> = token.split('_').collect();
            if segments.iter().any(|s| s.is_empty() || s.contains('.')) {
                return Err(Error::MalformedToken(token.to_string()));
            }
            for i in 1..=segments.len() {
                names.insert(segments[..i].iter().map(|s| s.to_string()).collect());
            }
        }

        let mut ordered: Vec<(usize, String)> = names.iter().map(|segs| (segs.len(), segs.join("."))).collect();
        ordered.sort();
        let index_of: BTreeMap<&str, usize> = ordered.iter().enumerate().map(|(i, (_, n))| (n.as_str(), i)).collect();

        let classes: Vec<ClassRef> = ordered
            .iter()
            .enumerate()
            .map(|(index, (depth, name))| ClassRef {
                index,
                name: name.clone(),
                depth: *depth,
            })
            .collect();
        let parent: Vec<Option<usize>> = classes
            .iter()
            .map(|c| c.name.rsplit_once('.').map(|(p, _)| index_of[p]))
            .collect();

        Ok(Self::assemble(classes, parent, spec.to_string()))
    }

    fn assemble(classes: Vec<ClassRef>, parent: Vec<Option<usize>>, spec_string: String) -> Self {
        let mut children = vec![Vec::new(); classes.len()];
        for (c, p) in parent.iter().enumerate() {
            if let Some(p) = p {
                children[*p].push(c);
            }
        }
        let leaves = (0..classes.len()).filter(|&c| children[c].is_empty()).collect();
        let labels = classes.iter().map(|c| c.name.clone()).collect();
        let matrix = DescendantMatrix::from_parents(&parent);
        Taxonomy {
            classes,
            parent,
            children,
            leaves,
            labels,
            spec_string,
            matrix,
        }
    }

    /// Attaches human-readable names keyed by dotted path. Unknown paths are an error.
    pub fn with_names<'a, I>(mut self, names: I) -> Result<Self>
    where
        I: IntoIterator<Item = (&'a str, &'a str)>,
    {
        for (path, label) in names {
            let idx = self
                .classes
                .iter()
                .position(|c| c.name == path)
                .ok_or_else(|| Error::UnknownClass(path.to_string()))?;
            self.labels[idx] = label.to_string();
        }
        Ok(self)
    }

    pub fn len(&self) -> usize {
        self.classes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.classes.is_empty()
    }

    pub fn classes(&self) -> &[ClassRef] {
        &self.classes
    }

    pub fn class(&self, index: usize) -> Result<&ClassRef> {
        self.classes
            .get(index)
            .ok_or_else(|| Error::UnknownClass(index.to_string()))
    }

    /// Parent of a class; `None` means the virtual root.
    pub fn parent(&self, index: usize) -> Option<usize> {
        self.parent[index]
    }

    pub fn parents(&self) -> &[Option<usize>] {
        &self.parent
    }

    pub fn children(&self, index: usize) -> &[usize] {
        &self.children[index]
    }

    pub fn leaves(&self) -> &[usize] {
        &self.leaves
    }

    pub fn is_leaf(&self, index: usize) -> bool {
        self.children[index].is_empty()
    }

    /// Slot reserved for the virtual root in model outputs (always `len()`).
    pub fn root_index(&self) -> usize {
        self.classes.len()
    }

    pub fn max_depth(&self) -> usize {
        self.classes.iter().map(|c| c.depth).max().unwrap_or(0)
    }

    pub fn spec_string(&self) -> &str {
        &self.spec_string
    }

    /// Display name of a class (the dotted path unless a name map was attached).
    pub fn label(&self, index: usize) -> &str {
        &self.labels[index]
    }

    pub fn labels(&self) -> &[String] {
        &self.labels
    }

    pub fn descendants(&self) -> &DescendantMatrix {
        &self.matrix
    }

    /// Resolves a class by dotted path, underscore path, or display name
    /// (case-insensitive).
    pub fn resolve(&self, key: &str) -> Result<usize> {
        let key = key.trim();
        let dotted = key.replace('_', ".");
        self.classes
            .iter()
            .position(|c| c.name == dotted)
            .or_else(|| self.labels.iter().position(|l| l.eq_ignore_ascii_case(key)))
            .ok_or_else(|| Error::UnknownClass(key.to_string()))
    }

    /// Every class `b` with `b` a subclass of `a`, `a` included.
    pub fn subclass_set(&self, a: usize) -> Result<Vec<usize>> {
        self.class(a)?;
        Ok(self.matrix.descendants(a).to_vec())
    }

    /// Path from `a` up to (excluding) the root, `a` included, ordered from `a` upward.
    pub fn ancestor_set(&self, a: usize) -> Result<Vec<usize>> {
        self.class(a)?;
        let mut out = Vec::with_capacity(self.classes[a].depth);
        let mut cur = Some(a);
        while let Some(c) = cur {
            out.push(c);
            cur = self.parent[c];
        }
        Ok(out)
    }

    /// Multi-hot ground truth for a cell labelled `leaf`: ones on its ancestor path.
    pub fn label_closure(&self, leaf: usize) -> Result<Vec<f64>> {
        let mut y = vec![0.0; self.len()];
        for a in self.ancestor_set(leaf)? {
            y[a] = 1.0;
        }
        Ok(y)
    }

    /// Stable content hash of the tree structure.
    pub fn fingerprint(&self) -> u64 {
        let mut h = Sha256::new();
        for (c, p) in self.classes.iter().zip(&self.parent) {
            h.update(c.name.as_bytes());
            h.update(b"<");
            h.update(p.map_or(u64::MAX, |p| p as u64).to_le_bytes());
            h.update(b";");
        }
        let digest = h.finalize();
        u64::from_le_bytes(digest[..8].try_into().expect("digest is 32 bytes"))
    }

    /// Audit view of the parsed tree.
    pub fn to_export(&self) -> TaxonomyExport {
        TaxonomyExport {
            spec: self.spec_string.clone(),
            root_slot: self.root_index(),
            nodes: self
                .classes
                .iter()
                .map(|c| NodeExport {
                    index: c.index,
                    name: c.name.clone(),
                    label: self.labels[c.index].clone(),
                    depth: c.depth,
                    parent: self.parent[c.index].map_or_else(|| "root".to_string(), |p| self.classes[p].name.clone()),
                    leaf: self.is_leaf(c.index),
                })
                .collect(),
        }
    }
}

#[derive(Clone, Debug, Serialize, Deserialize, PartialEq)]
pub struct NodeExport {
    pub index: usize,
    pub name: String,
    pub label: String,
    pub depth: usize,
    pub parent: String,
    pub leaf: bool,
}

/// JSON-serializable view of a taxonomy.
#[derive(Clone, Debug, Serialize, Deserialize, PartialEq)]
pub struct TaxonomyExport {
    pub spec: String,
    pub root_slot: usize,
    pub nodes: Vec<NodeExport>,
}

/// Named presets: `fc-deep` and `fc-shallow`.
pub fn builtin_taxonomies() -> Vec<(&'static str, Taxonomy)> {
    vec![
        (
            "fc-deep",
            Taxonomy::parse(FC_DEEP_SPEC)
                .and_then(|t| t.with_names(FC_DEEP_NAMES))
                .expect("fc-deep preset is valid"),
        ),
        (
            "fc-shallow",
            Taxonomy::parse(FC_SHALLOW_SPEC)
                .and_then(|t| t.with_names(FC_SHALLOW_NAMES))
                .expect("fc-shallow preset is valid"),
        ),
    ]
}

/// Looks up a preset by name.
pub fn preset(name: &str) -> Result<Taxonomy> {
    builtin_taxonomies()
        .into_iter()
        .find(|(n, _)| *n == name)
        .map(|(_, t)| t)
        .ok_or_else(|| Error::UnknownPreset(name.to_string()))
}

/// A preset by name, otherwise `key` parsed as a hierarchy string.
pub fn lookup(key: &str) -> Result<Taxonomy> {
    match preset(key) {
        Ok(t) => Ok(t),
        Err(_) if key.contains(',') || key.chars().all(|c| c.is_ascii_digit() || c == '_') => Taxonomy::parse(key),
        Err(e) => Err(e),
    }
}

/// Shape of randomly generated trees.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum TreeShape {
    /// A single path of length C.
    Chain,
    /// Each new class picks a uniform parent among the root and earlier classes.
    Bushy,
}

/// Spec string of a random tree with `classes` nodes.
pub fn random_tree_spec(classes: usize, shape: TreeShape, seed: u64) -> String {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut paths: Vec<String> = Vec::with_capacity(classes);
    let mut child_count: Vec<usize> = Vec::with_capacity(classes);
    let mut top = 0usize;
    for i in 0..classes {
        let parent = match shape {
            TreeShape::Chain => i.checked_sub(1),
            TreeShape::Bushy => {
                let pick = rng.random_range(0..=i);
                pick.checked_sub(1)
            }
        };
        let path = match parent {
            None => {
                top += 1;
                top.to_string()
            }
            Some(p) => {
                child_count[p] += 1;
                format!("{}_{}", paths[p], child_count[p])
            }
        };
        paths.push(path);
        child_count.push(0);
    }
    paths.join(",")
}

/// Random tree taxonomy with `classes` nodes.
pub fn random_taxonomy(classes: usize, shape: TreeShape, seed: u64) -> Taxonomy {
    Taxonomy::parse(&random_tree_spec(classes.max(1), shape, seed)).expect("generated spec is well formed")
}
