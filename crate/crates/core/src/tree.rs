//! Recursive parameter containers.
//!
//! A [`Tree`] is a mapping, a sequence, or a leaf. Every transform in this
//! crate (casting, scaling, differentiation, optimizer updates) is defined
//! structurally over trees, so models are just trees of tensors plus whatever
//! non-numeric configuration they carry along.

use std::fmt::{self, Write as _};

use indexmap::IndexMap;

use crate::error::{Error, Result};
use crate::numerics::Scalar;
use crate::tensor::Tensor;

#[derive(Debug, Clone, PartialEq)]
pub enum Leaf {
    Tensor(Tensor),
    Scalar(Scalar),
    /// Non-numeric payload, carried through every transform untouched.
    Opaque(String),
    /// Placeholder for "no value", e.g. the gradient of an integer parameter.
    Empty,
}

#[derive(Debug, Clone, PartialEq)]
pub enum Tree {
    Leaf(Leaf),
    /// String-keyed children, iterated in insertion order.
    Map(IndexMap<String, Tree>),
    Seq(Vec<Tree>),
}

/// The skeleton of a tree with the leaf payloads erased.
#[derive(Debug, Clone, PartialEq, Eq)]
pub enum TreeStructure {
    Leaf,
    Map(Vec<(String, TreeStructure)>),
    Seq(Vec<TreeStructure>),
}

impl Leaf {
    /// True for tensors of a float dtype.
    pub fn is_float_tensor(&self) -> bool {
        matches!(self, Leaf::Tensor(t) if t.dtype().is_float())
    }

    pub fn as_tensor(&self) -> Option<&Tensor> {
        match self {
            Leaf::Tensor(t) => Some(t),
            _ => None,
        }
    }

    fn is_finite(&self) -> bool {
        match self {
            Leaf::Tensor(t) if t.dtype().is_float() => t.is_finite(),
            Leaf::Scalar(s) if !s.weak && s.dtype.is_float() => s.value.is_finite(),
            _ => true,
        }
    }

    fn kind(&self) -> &'static str {
        match self {
            Leaf::Tensor(_) => "tensor",
            Leaf::Scalar(_) => "scalar",
            Leaf::Opaque(_) => "opaque",
            Leaf::Empty => "empty",
        }
    }
}

fn join(prefix: &str, key: &str) -> String {
    if prefix.is_empty() {
        key.to_string()
    } else {
        format!("{prefix}.{key}")
    }
}

impl Tree {
    pub fn tensor(t: Tensor) -> Tree {
        Tree::Leaf(Leaf::Tensor(t))
    }

    pub fn scalar(s: Scalar) -> Tree {
        Tree::Leaf(Leaf::Scalar(s))
    }

    pub fn opaque(s: impl Into<String>) -> Tree {
        Tree::Leaf(Leaf::Opaque(s.into()))
    }

    pub fn empty_map() -> Tree {
        Tree::Map(IndexMap::new())
    }

    /// Builds a mapping from `(key, child)` pairs; later duplicates replace
    /// earlier ones in place.
    pub fn map<K: Into<String>>(entries: impl IntoIterator<Item = (K, Tree)>) -> Tree {
        Tree::Map(entries.into_iter().map(|(k, v)| (k.into(), v)).collect())
    }

    pub fn seq(items: impl IntoIterator<Item = Tree>) -> Tree {
        Tree::Seq(items.into_iter().collect())
    }

    /// Child of a mapping by key.
    pub fn get(&self, key: &str) -> Option<&Tree> {
        match self {
            Tree::Map(m) => m.get(key),
            _ => None,
        }
    }

    /// Child of a sequence by position.
    pub fn at(&self, index: usize) -> Option<&Tree> {
        match self {
            Tree::Seq(s) => s.get(index),
            _ => None,
        }
    }

    /// Follows a dot-separated path of keys and indices.
    pub fn lookup(&self, path: &str) -> Option<&Tree> {
        if path.is_empty() {
            return Some(self);
        }
        path.split('.').try_fold(self, |node, part| match node {
            Tree::Map(m) => m.get(part),
            Tree::Seq(s) => part.parse::<usize>().ok().and_then(|i| s.get(i)),
            Tree::Leaf(_) => None,
        })
    }

    pub fn as_leaf(&self) -> Option<&Leaf> {
        match self {
            Tree::Leaf(l) => Some(l),
            _ => None,
        }
    }

    pub fn as_tensor(&self) -> Option<&Tensor> {
        self.as_leaf().and_then(Leaf::as_tensor)
    }

    /// Tensor at `path`, or an error naming the path.
    pub fn tensor_at(&self, path: &str) -> Result<&Tensor> {
        self.lookup(path)
            .and_then(Tree::as_tensor)
            .ok_or_else(|| Error::Message(format!("no tensor leaf at `{path}`")))
    }

    pub fn structure(&self) -> TreeStructure {
        match self {
            Tree::Leaf(_) => TreeStructure::Leaf,
            Tree::Map(m) => {
                TreeStructure::Map(m.iter().map(|(k, v)| (k.clone(), v.structure())).collect())
            }
            Tree::Seq(s) => TreeStructure::Seq(s.iter().map(Tree::structure).collect()),
        }
    }

    /// All leaves with their paths, in traversal order.
    pub fn leaves(&self) -> Vec<(String, &Leaf)> {
        let mut out = Vec::new();
        self.collect_leaves(String::new(), &mut out);
        out
    }

    fn collect_leaves<'a>(&'a self, path: String, out: &mut Vec<(String, &'a Leaf)>) {
        match self {
            Tree::Leaf(l) => out.push((path, l)),
            Tree::Map(m) => {
                for (k, v) in m {
                    v.collect_leaves(join(&path, k), out);
                }
            }
            Tree::Seq(s) => {
                for (i, v) in s.iter().enumerate() {
                    v.collect_leaves(join(&path, &i.to_string()), out);
                }
            }
        }
    }

    /// Applies `f` to every leaf, keeping the structure.
    pub fn map_leaves(&self, mut f: impl FnMut(&Leaf) -> Leaf) -> Tree {
        self.map_inner(&mut |_, l| Ok(f(l)), "")
            .expect("infallible leaf map")
    }

    /// Fallible [`Tree::map_leaves`]; the callback also receives the leaf
    /// path and errors come back tagged with it.
    pub fn try_map_leaves(&self, mut f: impl FnMut(&str, &Leaf) -> Result<Leaf>) -> Result<Tree> {
        self.map_inner(&mut f, "")
    }

    fn map_inner(
        &self,
        f: &mut impl FnMut(&str, &Leaf) -> Result<Leaf>,
        path: &str,
    ) -> Result<Tree> {
        Ok(match self {
            Tree::Leaf(l) => Tree::Leaf(f(path, l).map_err(|e| e.at(path))?),
            Tree::Map(m) => Tree::Map(
                m.iter()
                    .map(|(k, v)| Ok((k.clone(), v.map_inner(f, &join(path, k))?)))
                    .collect::<Result<_>>()?,
            ),
            Tree::Seq(s) => Tree::Seq(
                s.iter()
                    .enumerate()
                    .map(|(i, v)| v.map_inner(f, &join(path, &i.to_string())))
                    .collect::<Result<_>>()?,
            ),
        })
    }

    /// Pairwise leaf map over two trees of identical structure.
    pub fn zip_map(
        &self,
        other: &Tree,
        mut f: impl FnMut(&str, &Leaf, &Leaf) -> Result<Leaf>,
    ) -> Result<Tree> {
        self.zip_inner(other, &mut f, "")
    }

    fn zip_inner(
        &self,
        other: &Tree,
        f: &mut impl FnMut(&str, &Leaf, &Leaf) -> Result<Leaf>,
        path: &str,
    ) -> Result<Tree> {
        let mismatch = |path: &str, expected: String, found: String| Error::StructureMismatch {
            path: path.to_string(),
            expected,
            found,
        };
        match (self, other) {
            (Tree::Leaf(a), Tree::Leaf(b)) => {
                Ok(Tree::Leaf(f(path, a, b).map_err(|e| e.at(path))?))
            }
            (Tree::Map(a), Tree::Map(b)) => {
                let mut out = IndexMap::with_capacity(a.len());
                for (i, (ka, va)) in a.iter().enumerate() {
                    let Some((kb, vb)) = b.get_index(i) else {
                        return Err(mismatch(
                            &join(path, ka),
                            format!("key `{ka}`"),
                            "nothing".into(),
                        ));
                    };
                    if ka != kb {
                        return Err(mismatch(
                            &join(path, ka),
                            format!("key `{ka}`"),
                            format!("key `{kb}`"),
                        ));
                    }
                    out.insert(ka.clone(), va.zip_inner(vb, f, &join(path, ka))?);
                }
                if let Some((kb, _)) = b.get_index(a.len()) {
                    return Err(mismatch(
                        &join(path, kb),
                        "nothing".into(),
                        format!("key `{kb}`"),
                    ));
                }
                Ok(Tree::Map(out))
            }
            (Tree::Seq(a), Tree::Seq(b)) => {
                if a.len() != b.len() {
                    return Err(mismatch(
                        path,
                        format!("sequence of {}", a.len()),
                        format!("sequence of {}", b.len()),
                    ));
                }
                a.iter()
                    .zip(b)
                    .enumerate()
                    .map(|(i, (x, y))| x.zip_inner(y, f, &join(path, &i.to_string())))
                    .collect::<Result<Vec<_>>>()
                    .map(Tree::Seq)
            }
            (a, b) => Err(mismatch(path, a.node_kind().into(), b.node_kind().into())),
        }
    }

    fn node_kind(&self) -> &'static str {
        match self {
            Tree::Leaf(l) => l.kind(),
            Tree::Map(_) => "mapping",
            Tree::Seq(_) => "sequence",
        }
    }

    /// Float tensor leaves with their dot-joined paths, in traversal order.
    pub fn float_leaves(&self) -> Vec<(String, &Tensor)> {
        self.leaves()
            .into_iter()
            .filter_map(|(p, l)| match l {
                Leaf::Tensor(t) if t.dtype().is_float() => Some((p, t)),
                _ => None,
            })
            .collect()
    }

    /// True iff no float leaf holds an infinity or NaN.
    pub fn all_finite(&self) -> bool {
        match self {
            Tree::Leaf(l) => l.is_finite(),
            Tree::Map(m) => m.values().all(Tree::all_finite),
            Tree::Seq(s) => s.iter().all(Tree::all_finite),
        }
    }

    /// Total analytic bytes of all tensor leaves.
    pub fn tensor_bytes(&self) -> usize {
        self.leaves()
            .iter()
            .filter_map(|(_, l)| l.as_tensor())
            .map(Tensor::bytes)
            .sum()
    }

    /// Leafwise bit equality (NaN payloads compared by bits).
    pub fn bitwise_eq(&self, other: &Tree) -> bool {
        if self.structure() != other.structure() {
            return false;
        }
        self.leaves()
            .iter()
            .zip(other.leaves())
            .all(|((_, a), (_, b))| match (a, b) {
                (Leaf::Tensor(x), Leaf::Tensor(y)) => x.bitwise_eq(y),
                (Leaf::Scalar(x), Leaf::Scalar(y)) => {
                    x.value.to_bits() == y.value.to_bits() && x.dtype == y.dtype && x.weak == y.weak
                }
                (a, b) => *a == b,
            })
    }

    /// Canonical indented text form, one leaf per line. Used for golden
    /// files; not a stable interchange format.
    pub fn to_canonical_string(&self) -> String {
        let mut s = String::new();
        self.write_canonical(&mut s, 0)
            .expect("writing to a String");
        s.push('\n');
        s
    }

    fn write_canonical(&self, out: &mut String, depth: usize) -> fmt::Result {
        let pad = "  ".repeat(depth + 1);
        let close = "  ".repeat(depth);
        match self {
            Tree::Leaf(l) => write_leaf(out, l),
            Tree::Map(m) if m.is_empty() => out.write_str("{}"),
            Tree::Map(m) => {
                out.write_str("{\n")?;
                for (k, v) in m {
                    write!(out, "{pad}{k:?}: ")?;
                    v.write_canonical(out, depth + 1)?;
                    out.write_str("\n")?;
                }
                write!(out, "{close}}}")
            }
            Tree::Seq(s) if s.is_empty() => out.write_str("[]"),
            Tree::Seq(s) => {
                out.write_str("[\n")?;
                for v in s {
                    out.write_str(&pad)?;
                    v.write_canonical(out, depth + 1)?;
                    out.write_str("\n")?;
                }
                write!(out, "{close}]")
            }
        }
    }
}

fn write_leaf(out: &mut String, leaf: &Leaf) -> fmt::Result {
    match leaf {
        Leaf::Tensor(t) => write!(out, "{t}"),
        Leaf::Scalar(s) => {
            let strength = if s.weak { "weak" } else { "strong" };
            write!(out, "{strength} {} {}", s.dtype, s.value)
        }
        Leaf::Opaque(o) => write!(out, "opaque {o:?}"),
        Leaf::Empty => out.write_str("none"),
    }
}

impl fmt::Display for Tree {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.to_canonical_string().trim_end())
    }
}

impl From<Tensor> for Tree {
    fn from(t: Tensor) -> Self {
        Tree::tensor(t)
    }
}

impl From<Leaf> for Tree {
    fn from(l: Leaf) -> Self {
        Tree::Leaf(l)
    }
}

/// Functional form of [`Tree::map_leaves`].
pub fn tree_map(f: impl FnMut(&Leaf) -> Leaf, t: &Tree) -> Tree {
    t.map_leaves(f)
}

/// Functional form of [`Tree::zip_map`].
pub fn tree_zip_map(
    f: impl FnMut(&str, &Leaf, &Leaf) -> Result<Leaf>,
    a: &Tree,
    b: &Tree,
) -> Result<Tree> {
    a.zip_map(b, f)
}
