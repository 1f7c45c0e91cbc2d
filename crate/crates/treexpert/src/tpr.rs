//! Tensor product representations of binary trees.
//!
//! A tree is the superposition of filler (x) role outer products, one per
//! labeled node. Roles are the standard one-hot basis indexed by
//! root-to-node paths, so recall and the lifted car/cdr/cons operations
//! are exact: car/cdr shift roles of a subtree up to the root and cons
//! shifts them back down under a new root binding.

use std::collections::HashMap;

use rand::SeedableRng;
use rand_chacha::ChaCha12Rng;
use rand_distr::{Distribution, StandardNormal};

use crate::error::{Error, Result};
use crate::symbolic::{tree_from_bindings, SymTree};

pub const MAX_SUPPORTED_DEPTH: usize = 12;
pub const DEFAULT_EMPTY_NORM_THRESHOLD: f64 = 0.25;
pub const DEFAULT_MATCH_THRESHOLD: f64 = 0.5;

/// One-hot role basis over all binary paths of length <= max_depth,
/// enumerated breadth-first (heap order), which fixes the role indexing
/// that serialized models depend on.
#[derive(Debug, Clone)]
pub struct RoleBasis {
    max_depth: usize,
    num_roles: usize,
    paths: Vec<String>,
    index: HashMap<String, usize>,
}

/// `num_roles = 2^(max_depth+1) - 1`, with paths enumerated
/// breadth-first.
pub fn build_role_basis(max_depth: usize) -> Result<RoleBasis> {
    if !(1..=MAX_SUPPORTED_DEPTH).contains(&max_depth) {
        return Err(Error::config(format!(
            "max_depth must be in 1..={MAX_SUPPORTED_DEPTH}, got {max_depth}"
        )));
    }
    let num_roles = (1usize << (max_depth + 1)) - 1;
    let mut paths = Vec::with_capacity(num_roles);
    let mut index = HashMap::with_capacity(num_roles);
    paths.push(String::new());
    index.insert(String::new(), 0);
    let mut head = 0;
    while paths.len() < num_roles {
        let p = paths[head].clone();
        head += 1;
        for bit in ['0', '1'] {
            let child = format!("{p}{bit}");
            index.insert(child.clone(), paths.len());
            paths.push(child);
        }
    }
    Ok(RoleBasis {
        max_depth,
        num_roles,
        paths,
        index,
    })
}

impl RoleBasis {
    pub fn max_depth(&self) -> usize {
        self.max_depth
    }

    pub fn num_roles(&self) -> usize {
        self.num_roles
    }

    /// Role index of a path, or a lookup error for malformed or
    /// out-of-depth paths.
    pub fn path_index(&self, path: &str) -> Result<usize> {
        if let Some(bad) = path.chars().find(|c| *c != '0' && *c != '1') {
            return Err(Error::InvalidPath {
                path: path.to_string(),
                reason: format!("invalid character {bad:?}"),
            });
        }
        self.index.get(path).copied().ok_or_else(|| Error::InvalidPath {
            path: path.to_string(),
            reason: format!("deeper than max depth {}", self.max_depth),
        })
    }

    pub fn path_of(&self, index: usize) -> &str {
        &self.paths[index]
    }

    pub fn paths(&self) -> &[String] {
        &self.paths
    }

    /// Depth of the role at `index` (path length).
    pub fn depth_of(&self, index: usize) -> usize {
        self.paths[index].len()
    }
}

/// Fixed random unit filler embeddings, one per vocabulary symbol,
/// resampled at construction until every pairwise cosine is below the
/// match threshold so decoding stays unambiguous.
#[derive(Debug, Clone)]
pub struct FillerTable {
    vocab: Vec<String>,
    index: HashMap<String, usize>,
    filler_dim: usize,
    /// vocab_size x filler_dim, row-major, unit rows.
    embeddings: Vec<f64>,
    pub empty_norm_threshold: f64,
    pub match_threshold: f64,
}

impl FillerTable {
    pub fn new(vocab: &[String], filler_dim: usize, seed: u64) -> Result<Self> {
        if filler_dim < 2 {
            return Err(Error::config("filler_dim must be at least 2"));
        }
        let mut index = HashMap::with_capacity(vocab.len());
        for (i, v) in vocab.iter().enumerate() {
            if index.insert(v.clone(), i).is_some() {
                return Err(Error::config(format!("duplicate vocab entry {v:?}")));
            }
        }
        let mut rng = ChaCha12Rng::seed_from_u64(seed);
        let mut embeddings: Vec<f64> = Vec::with_capacity(vocab.len() * filler_dim);
        let match_threshold = DEFAULT_MATCH_THRESHOLD;
        for i in 0..vocab.len() {
            let mut attempts = 0;
            loop {
                let row = random_unit(&mut rng, filler_dim);
                let ok = (0..i).all(|j| {
                    let prev = &embeddings[j * filler_dim..(j + 1) * filler_dim];
                    dot(&row, prev) < match_threshold
                });
                if ok {
                    embeddings.extend_from_slice(&row);
                    break;
                }
                attempts += 1;
                if attempts > 10_000 {
                    return Err(Error::config(format!(
                        "cannot separate {} fillers in dimension {filler_dim}",
                        vocab.len()
                    )));
                }
            }
        }
        Ok(FillerTable {
            vocab: vocab.to_vec(),
            index,
            filler_dim,
            embeddings,
            empty_norm_threshold: DEFAULT_EMPTY_NORM_THRESHOLD,
            match_threshold,
        })
    }

    /// Rebuild a table around externally provided embeddings (checkpoint
    /// restore). Invariants are assumed to have held at construction.
    pub fn from_embeddings(vocab: &[String], filler_dim: usize, embeddings: Vec<f64>) -> Result<Self> {
        if embeddings.len() != vocab.len() * filler_dim {
            return Err(Error::shape(
                "filler_table",
                format!(
                    "embeddings length {} != vocab {} x dim {filler_dim}",
                    embeddings.len(),
                    vocab.len()
                ),
            ));
        }
        let mut index = HashMap::with_capacity(vocab.len());
        for (i, v) in vocab.iter().enumerate() {
            index.insert(v.clone(), i);
        }
        Ok(FillerTable {
            vocab: vocab.to_vec(),
            index,
            filler_dim,
            embeddings,
            empty_norm_threshold: DEFAULT_EMPTY_NORM_THRESHOLD,
            match_threshold: DEFAULT_MATCH_THRESHOLD,
        })
    }

    pub fn vocab(&self) -> &[String] {
        &self.vocab
    }

    pub fn filler_dim(&self) -> usize {
        self.filler_dim
    }

    pub fn vocab_size(&self) -> usize {
        self.vocab.len()
    }

    pub fn embeddings_flat(&self) -> &[f64] {
        &self.embeddings
    }

    pub fn label_index(&self, label: &str) -> Result<usize> {
        self.index
            .get(label)
            .copied()
            .ok_or_else(|| Error::UnknownLabel {
                label: label.to_string(),
            })
    }

    pub fn embedding(&self, label: &str) -> Result<&[f64]> {
        let i = self.label_index(label)?;
        Ok(self.embedding_row(i))
    }

    pub fn embedding_row(&self, i: usize) -> &[f64] {
        &self.embeddings[i * self.filler_dim..(i + 1) * self.filler_dim]
    }
}

fn random_unit(rng: &mut ChaCha12Rng, dim: usize) -> Vec<f64> {
    loop {
        let v: Vec<f64> = (0..dim).map(|_| StandardNormal.sample(rng)).collect();
        let n = v.iter().map(|x| x * x).sum::<f64>().sqrt();
        if n > 1e-6 {
            return v.iter().map(|x| x / n).collect();
        }
    }
}

fn dot(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| x * y).sum()
}

/// Dense tree representation: one filler-dimension row per role,
/// `num_roles x filler_dim` row-major (semantically filler x role).
#[derive(Debug, Clone, PartialEq)]
pub struct TprTensor {
    num_roles: usize,
    filler_dim: usize,
    data: Vec<f64>,
}

impl TprTensor {
    pub fn zeros(basis: &RoleBasis, fillers: &FillerTable) -> Self {
        TprTensor {
            num_roles: basis.num_roles,
            filler_dim: fillers.filler_dim,
            data: vec![0.0; basis.num_roles * fillers.filler_dim],
        }
    }

    pub fn num_roles(&self) -> usize {
        self.num_roles
    }

    pub fn filler_dim(&self) -> usize {
        self.filler_dim
    }

    pub fn data(&self) -> &[f64] {
        &self.data
    }

    pub fn from_data(num_roles: usize, filler_dim: usize, data: Vec<f64>) -> Result<Self> {
        if data.len() != num_roles * filler_dim {
            return Err(Error::shape(
                "tpr_tensor",
                format!(
                    "data length {} != {num_roles} roles x {filler_dim} filler dims",
                    data.len()
                ),
            ));
        }
        Ok(TprTensor {
            num_roles,
            filler_dim,
            data,
        })
    }

    pub fn role_row(&self, role: usize) -> &[f64] {
        &self.data[role * self.filler_dim..(role + 1) * self.filler_dim]
    }

    fn role_row_mut(&mut self, role: usize) -> &mut [f64] {
        &mut self.data[role * self.filler_dim..(role + 1) * self.filler_dim]
    }

    /// Entry at (filler component, role).
    pub fn get(&self, filler: usize, role: usize) -> f64 {
        self.data[role * self.filler_dim + filler]
    }

    /// Add `filler` bound at `path`.
    pub fn bind(&mut self, path: &str, filler: &[f64], basis: &RoleBasis) -> Result<()> {
        let idx = basis.path_index(path)?;
        for (dst, src) in self.role_row_mut(idx).iter_mut().zip(filler) {
            *dst += src;
        }
        Ok(())
    }

    pub fn add(&self, other: &TprTensor) -> TprTensor {
        assert_eq!(self.data.len(), other.data.len());
        TprTensor {
            num_roles: self.num_roles,
            filler_dim: self.filler_dim,
            data: self
                .data
                .iter()
                .zip(&other.data)
                .map(|(a, b)| a + b)
                .collect(),
        }
    }

    pub fn scale(&self, factor: f64) -> TprTensor {
        TprTensor {
            num_roles: self.num_roles,
            filler_dim: self.filler_dim,
            data: self.data.iter().map(|x| x * factor).collect(),
        }
    }

    pub fn norm_sq(&self) -> f64 {
        self.data.iter().map(|x| x * x).sum()
    }

    pub fn max_abs_diff(&self, other: &TprTensor) -> f64 {
        self.data
            .iter()
            .zip(&other.data)
            .map(|(a, b)| (a - b).abs())
            .fold(0.0, f64::max)
    }
}

/// The four role-space shift operators plus the root role. Each is a
/// partial permutation of role indices; `map[target] = Some(source)`
/// means the output at role `target` copies the input at role `source`.
#[derive(Debug, Clone)]
pub struct Operators {
    num_roles: usize,
    /// car: role "0x" moves up to "x".
    d0: Vec<Option<usize>>,
    /// cdr: role "1x" moves up to "x".
    d1: Vec<Option<usize>>,
    /// cons left arg: role "x" moves down to "0x" (depth-cap bindings drop).
    e0: Vec<Option<usize>>,
    /// cons right arg: role "x" moves down to "1x".
    e1: Vec<Option<usize>>,
    root_index: usize,
    /// Role indices at exactly max_depth: the bindings cons truncates.
    deepest: Vec<usize>,
}

impl Operators {
    pub fn new(basis: &RoleBasis) -> Self {
        let n = basis.num_roles;
        let mut d0 = vec![None; n];
        let mut d1 = vec![None; n];
        let mut e0 = vec![None; n];
        let mut e1 = vec![None; n];
        for (i, path) in basis.paths.iter().enumerate() {
            if path.len() < basis.max_depth {
                let down0 = basis.index[&format!("0{path}")];
                let down1 = basis.index[&format!("1{path}")];
                d0[i] = Some(down0);
                d1[i] = Some(down1);
                e0[down0] = Some(i);
                e1[down1] = Some(i);
            }
        }
        let deepest = (0..n)
            .filter(|&i| basis.depth_of(i) == basis.max_depth)
            .collect();
        Operators {
            num_roles: n,
            d0,
            d1,
            e0,
            e1,
            root_index: 0,
            deepest,
        }
    }

    pub fn num_roles(&self) -> usize {
        self.num_roles
    }

    pub fn root_index(&self) -> usize {
        self.root_index
    }

    pub fn car_map(&self) -> &[Option<usize>] {
        &self.d0
    }

    pub fn cdr_map(&self) -> &[Option<usize>] {
        &self.d1
    }

    pub fn cons0_map(&self) -> &[Option<usize>] {
        &self.e0
    }

    pub fn cons1_map(&self) -> &[Option<usize>] {
        &self.e1
    }

    /// Materialize one operator as a dense num_roles x num_roles matrix
    /// (row-major, `m[target][source] = 1`). Intended for tests and small
    /// bases.
    pub fn dense(map: &[Option<usize>]) -> Vec<f64> {
        let n = map.len();
        let mut m = vec![0.0; n * n];
        for (target, src) in map.iter().enumerate() {
            if let Some(s) = src {
                m[target * n + s] = 1.0;
            }
        }
        m
    }

    pub fn dense_d0(&self) -> Vec<f64> {
        Self::dense(&self.d0)
    }

    pub fn dense_d1(&self) -> Vec<f64> {
        Self::dense(&self.d1)
    }

    pub fn dense_e0(&self) -> Vec<f64> {
        Self::dense(&self.e0)
    }

    pub fn dense_e1(&self) -> Vec<f64> {
        Self::dense(&self.e1)
    }
}

fn role_shift(t: &TprTensor, map: &[Option<usize>]) -> TprTensor {
    let d = t.filler_dim;
    let mut out = vec![0.0; t.data.len()];
    for (target, src) in map.iter().enumerate() {
        if let Some(s) = src {
            out[target * d..(target + 1) * d].copy_from_slice(t.role_row(*s));
        }
    }
    TprTensor {
        num_roles: t.num_roles,
        filler_dim: d,
        data: out,
    }
}

/// Extract the left subtree, shifted up to the root.
pub fn car(t: &TprTensor, ops: &Operators) -> TprTensor {
    assert_eq!(t.num_roles, ops.num_roles, "car: role count mismatch");
    role_shift(t, &ops.d0)
}

/// Extract the right subtree, shifted up to the root.
pub fn cdr(t: &TprTensor, ops: &Operators) -> TprTensor {
    assert_eq!(t.num_roles, ops.num_roles, "cdr: role count mismatch");
    role_shift(t, &ops.d1)
}

/// Assemble a tree from two children plus a new root filler. Bindings at
/// the depth cap in either child are silently dropped; see
/// [`cons_truncation_sq`] for the diagnostic.
pub fn cons(t0: &TprTensor, t1: &TprTensor, root_filler: &[f64], ops: &Operators) -> TprTensor {
    assert_eq!(t0.num_roles, ops.num_roles, "cons: role count mismatch");
    assert_eq!(t1.num_roles, ops.num_roles, "cons: role count mismatch");
    let mut out = role_shift(t0, &ops.e0);
    let shifted1 = role_shift(t1, &ops.e1);
    for (dst, src) in out.data.iter_mut().zip(&shifted1.data) {
        *dst += src;
    }
    let root = out.role_row_mut(ops.root_index);
    for (dst, src) in root.iter_mut().zip(root_filler) {
        *dst += src;
    }
    out
}

/// Squared norm cons would drop from its two arguments (bindings sitting
/// at max depth).
pub fn cons_truncation_sq(t0: &TprTensor, t1: &TprTensor, ops: &Operators) -> f64 {
    ops.deepest
        .iter()
        .map(|&r| {
            let a: f64 = t0.role_row(r).iter().map(|x| x * x).sum();
            let b: f64 = t1.role_row(r).iter().map(|x| x * x).sum();
            a + b
        })
        .sum()
}

/// Sum of labeled-node outer products.
pub fn encode_tree(t: &SymTree, basis: &RoleBasis, fillers: &FillerTable) -> Result<TprTensor> {
    let mut out = TprTensor::zeros(basis, fillers);
    for (path, label) in t.bindings() {
        if path.len() > basis.max_depth {
            return Err(Error::DepthOverflow {
                depth: path.len(),
                max_depth: basis.max_depth,
            });
        }
        let emb = fillers.embedding(&label)?;
        out.bind(&path, emb, basis)?;
    }
    Ok(out)
}

/// Encode, with `None` mapping to the zero tensor (the empty tree).
pub fn encode_opt(
    t: Option<&SymTree>,
    basis: &RoleBasis,
    fillers: &FillerTable,
) -> Result<TprTensor> {
    match t {
        Some(t) => encode_tree(t, basis, fillers),
        None => Ok(TprTensor::zeros(basis, fillers)),
    }
}

/// Associative recall: the filler vector bound at `path`.
pub fn recall_filler(t: &TprTensor, path: &str, basis: &RoleBasis) -> Result<Vec<f64>> {
    let idx = basis.path_index(path)?;
    Ok(t.role_row(idx).to_vec())
}

/// All positions whose recalled filler clears the empty-norm threshold,
/// labeled by best-cosine vocabulary match.
pub fn decode_bindings(
    t: &TprTensor,
    basis: &RoleBasis,
    fillers: &FillerTable,
) -> Result<Vec<(String, String)>> {
    let mut out = Vec::new();
    for role in 0..basis.num_roles {
        let row = t.role_row(role);
        let norm = row.iter().map(|x| x * x).sum::<f64>().sqrt();
        if norm < fillers.empty_norm_threshold {
            continue;
        }
        let mut best = (0usize, f64::NEG_INFINITY);
        for v in 0..fillers.vocab_size() {
            let cos = dot(row, fillers.embedding_row(v)) / norm;
            if cos > best.1 {
                best = (v, cos);
            }
        }
        if best.1 < fillers.match_threshold {
            return Err(Error::AmbiguousDecode {
                path: basis.path_of(role).to_string(),
                norm,
                best_cosine: best.1,
            });
        }
        out.push((
            basis.path_of(role).to_string(),
            fillers.vocab[best.0].clone(),
        ));
    }
    Ok(out)
}

/// Decode to a tree; `Ok(None)` is the empty tree, and occupancy patterns
/// that do not form a strictly binary tree are malformed-tree errors.
pub fn decode_tree(
    t: &TprTensor,
    basis: &RoleBasis,
    fillers: &FillerTable,
) -> Result<Option<SymTree>> {
    let bindings = decode_bindings(t, basis, fillers)?;
    tree_from_bindings(&bindings)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::symbolic::{sym_car, sym_cdr, sym_cons};
    use rand::Rng;

    fn small_setup(depth: usize) -> (RoleBasis, FillerTable, Operators) {
        let basis = build_role_basis(depth).unwrap();
        let vocab: Vec<String> = [
            "some", "sad", "sheep", "a", "b", "c", "d", "R", "S", "NP", "wolf", "see",
        ]
        .iter()
        .map(|s| s.to_string())
        .collect();
        let fillers = FillerTable::new(&vocab, 16, 7).unwrap();
        let ops = Operators::new(&basis);
        (basis, fillers, ops)
    }

    fn fig1_fragment(basis: &RoleBasis, fillers: &FillerTable) -> TprTensor {
        let mut t = TprTensor::zeros(basis, fillers);
        t.bind("00", fillers.embedding("some").unwrap(), basis).unwrap();
        t.bind("100", fillers.embedding("sad").unwrap(), basis).unwrap();
        t.bind("1100", fillers.embedding("sheep").unwrap(), basis)
            .unwrap();
        t
    }

    #[test]
    fn role_basis_counts() {
        assert_eq!(build_role_basis(1).unwrap().num_roles(), 3);
        assert_eq!(build_role_basis(3).unwrap().num_roles(), 15);
        let b1 = build_role_basis(1).unwrap();
        assert_eq!(b1.paths(), &["".to_string(), "0".to_string(), "1".to_string()]);
        assert!(build_role_basis(0).is_err());
        assert!(build_role_basis(13).is_err());
    }

    #[test]
    fn role_basis_bijection_depth4() {
        let b = build_role_basis(4).unwrap();
        assert!(b.path_index("1100").is_ok());
        assert!(b.path_index("11000").is_err());
        assert!(b.path_index("12").is_err());
        // Enumerate every binary string of length <= 4: total over all
        // such paths, injective, and exactly covering [0, num_roles).
        let mut seen = vec![false; b.num_roles()];
        let mut count = 0;
        for len in 0..=4usize {
            for bits in 0..(1usize << len) {
                let path: String = (0..len)
                    .map(|i| {
                        if bits >> (len - 1 - i) & 1 == 1 {
                            '1'
                        } else {
                            '0'
                        }
                    })
                    .collect();
                let idx = b.path_index(&path).unwrap();
                assert!(!seen[idx], "duplicate index for {path:?}");
                seen[idx] = true;
                count += 1;
            }
        }
        assert_eq!(count, b.num_roles());
        assert!(seen.into_iter().all(|s| s));
    }

    #[test]
    fn fillers_are_unit_and_separated() {
        let (_, fillers, _) = small_setup(4);
        for i in 0..fillers.vocab_size() {
            let n: f64 = fillers.embedding_row(i).iter().map(|x| x * x).sum();
            assert!((n - 1.0).abs() < 1e-12);
            for j in 0..i {
                let cos = dot(fillers.embedding_row(i), fillers.embedding_row(j));
                assert!(cos < fillers.match_threshold, "cos({i},{j}) = {cos}");
            }
        }
        assert!(fillers.embedding("nope").is_err());
    }

    #[test]
    fn encode_fig1_fragment_matches_superposition() {
        let (basis, fillers, _) = small_setup(4);
        let t = fig1_fragment(&basis, &fillers);
        // Exactly the three outer products, nothing else.
        for role in 0..basis.num_roles() {
            let path = basis.path_of(role);
            let expected: Option<&[f64]> = match path {
                "00" => Some(fillers.embedding("some").unwrap()),
                "100" => Some(fillers.embedding("sad").unwrap()),
                "1100" => Some(fillers.embedding("sheep").unwrap()),
                _ => None,
            };
            match expected {
                Some(e) => assert_eq!(t.role_row(role), e),
                None => assert!(t.role_row(role).iter().all(|x| *x == 0.0)),
            }
        }
    }

    #[test]
    fn encode_basics() {
        let (basis, fillers, _) = small_setup(4);
        let zero = encode_opt(None, &basis, &fillers).unwrap();
        assert_eq!(zero.norm_sq(), 0.0);

        let single = encode_tree(&SymTree::leaf("sheep"), &basis, &fillers).unwrap();
        assert_eq!(single.role_row(0), fillers.embedding("sheep").unwrap());
        assert!((single.norm_sq() - 1.0).abs() < 1e-12);

        let unknown: SymTree = "(R zebra b)".parse().unwrap();
        assert!(matches!(
            encode_tree(&unknown, &basis, &fillers),
            Err(Error::UnknownLabel { .. })
        ));

        let deep: SymTree = "(R (R (R (R (R a b) b) b) b) b)".parse().unwrap();
        assert!(matches!(
            encode_tree(&deep, &basis, &fillers),
            Err(Error::DepthOverflow { .. })
        ));
    }

    #[test]
    fn recall_examples() {
        let (basis, fillers, _) = small_setup(4);
        let t = fig1_fragment(&basis, &fillers);
        assert_eq!(
            recall_filler(&t, "100", &basis).unwrap(),
            fillers.embedding("sad").unwrap()
        );
        assert!(recall_filler(&t, "0110", &basis)
            .unwrap()
            .iter()
            .all(|x| *x == 0.0));
        assert!(recall_filler(&t, "01101", &basis).is_err());

        // Linearity of recall under superposition.
        let a = encode_tree(&"(R a b)".parse().unwrap(), &basis, &fillers).unwrap();
        let b = encode_tree(&"(S c d)".parse().unwrap(), &basis, &fillers).unwrap();
        let sum = a.add(&b);
        for path in ["", "0", "1"] {
            let ra = recall_filler(&a, path, &basis).unwrap();
            let rb = recall_filler(&b, path, &basis).unwrap();
            let rs = recall_filler(&sum, path, &basis).unwrap();
            for i in 0..ra.len() {
                assert!((rs[i] - (ra[i] + rb[i])).abs() < 1e-15);
            }
        }
    }

    #[test]
    fn decode_round_trip_and_edge_cases() {
        let (basis, fillers, _) = small_setup(4);
        for s in ["sheep", "(R a b)", "(R (S a b) (NP c d))", "(a (b (c d)))"] {
            let tree: SymTree = s.parse().unwrap();
            let enc = encode_tree(&tree, &basis, &fillers).unwrap();
            assert_eq!(decode_tree(&enc, &basis, &fillers).unwrap(), Some(tree));
        }
        let zero = TprTensor::zeros(&basis, &fillers);
        assert_eq!(decode_tree(&zero, &basis, &fillers).unwrap(), None);
    }

    #[test]
    fn decode_blend_favors_dominant_tree() {
        let (basis, fillers, _) = small_setup(4);
        let t1: SymTree = "(R a b)".parse().unwrap();
        let t2: SymTree = "(S c d)".parse().unwrap();
        let e1 = encode_tree(&t1, &basis, &fillers).unwrap();
        let e2 = encode_tree(&t2, &basis, &fillers).unwrap();
        let blend = e1.scale(0.6).add(&e2.scale(0.4));
        assert_eq!(decode_tree(&blend, &basis, &fillers).unwrap(), Some(t1));
    }

    #[test]
    fn car_cdr_on_fig1_fragment() {
        let (basis, fillers, ops) = small_setup(4);
        let t = fig1_fragment(&basis, &fillers);

        // car(T) = f_some (x) r_0
        let c = car(&t, &ops);
        let mut expected = TprTensor::zeros(&basis, &fillers);
        expected
            .bind("0", fillers.embedding("some").unwrap(), &basis)
            .unwrap();
        assert_eq!(c.max_abs_diff(&expected), 0.0);

        // cdr(T) = f_sad (x) r_00 + f_sheep (x) r_100
        let d = cdr(&t, &ops);
        let mut expected = TprTensor::zeros(&basis, &fillers);
        expected
            .bind("00", fillers.embedding("sad").unwrap(), &basis)
            .unwrap();
        expected
            .bind("100", fillers.embedding("sheep").unwrap(), &basis)
            .unwrap();
        assert_eq!(d.max_abs_diff(&expected), 0.0);

        let zero = TprTensor::zeros(&basis, &fillers);
        assert_eq!(car(&zero, &ops).norm_sq(), 0.0);
        assert_eq!(cdr(&zero, &ops).norm_sq(), 0.0);
    }

    fn random_tree(rng: &mut impl Rng, labels: &[&str], depth_budget: usize) -> SymTree {
        if depth_budget == 0 || rng.gen_bool(0.35) {
            SymTree::leaf(labels[rng.gen_range(0..labels.len())])
        } else {
            let label = if rng.gen_bool(0.5) {
                Some(labels[rng.gen_range(0..labels.len())])
            } else {
                None
            };
            let l = random_tree(rng, labels, depth_budget - 1);
            let r = random_tree(rng, labels, depth_budget - 1);
            match label {
                Some(lab) => SymTree::node(lab, l, r),
                None => SymTree::node_unlabeled(l, r),
            }
        }
    }

    #[test]
    fn car_cdr_cons_match_symbolic_oracle() {
        let (basis, fillers, ops) = small_setup(4);
        let labels = ["some", "sad", "sheep", "a", "b", "R", "S"];
        let mut rng = rand_chacha::ChaCha12Rng::seed_from_u64(11);
        for _ in 0..50 {
            let t = random_tree(&mut rng, &labels, 4);
            let enc = encode_tree(&t, &basis, &fillers).unwrap();
            if !t.is_leaf() {
                let left = sym_car(&t).unwrap();
                let right = sym_cdr(&t).unwrap();
                let enc_left = encode_tree(&left, &basis, &fillers).unwrap();
                let enc_right = encode_tree(&right, &basis, &fillers).unwrap();
                assert_eq!(car(&enc, &ops).max_abs_diff(&enc_left), 0.0);
                assert_eq!(cdr(&enc, &ops).max_abs_diff(&enc_right), 0.0);
            }
            // cons through encode for in-bounds results.
            let u = random_tree(&mut rng, &labels, 3);
            if t.depth() < 4 && u.depth() < 4 {
                let joined = sym_cons(&t, &u, Some("R"));
                let enc_t = encode_tree(&t, &basis, &fillers).unwrap();
                let enc_u = encode_tree(&u, &basis, &fillers).unwrap();
                let via_tensor = cons(&enc_t, &enc_u, fillers.embedding("R").unwrap(), &ops);
                let via_sym = encode_tree(&joined, &basis, &fillers).unwrap();
                assert_eq!(via_tensor.max_abs_diff(&via_sym), 0.0);
            }
        }
    }

    #[test]
    fn cons_reconstruction_identity() {
        let (basis, fillers, ops) = small_setup(4);
        for s in ["(R a b)", "(R (S a b) c)", "(a (b c))"] {
            let tree: SymTree = s.parse().unwrap();
            let enc = encode_tree(&tree, &basis, &fillers).unwrap();
            let root = recall_filler(&enc, "", &basis).unwrap();
            let rebuilt = cons(&car(&enc, &ops), &cdr(&enc, &ops), &root, &ops);
            assert_eq!(rebuilt.max_abs_diff(&enc), 0.0);
        }
        let zero = TprTensor::zeros(&basis, &fillers);
        let rebuilt = cons(&zero, &zero, &vec![0.0; fillers.filler_dim()], &ops);
        assert_eq!(rebuilt.norm_sq(), 0.0);
    }

    #[test]
    fn cons_truncates_depth_cap_bindings() {
        let (basis, fillers, ops) = small_setup(4);
        // Left-spine chain with a leaf at depth 4 = max depth.
        let chain: SymTree = "(((( a b) b) b) b)".parse().unwrap();
        assert_eq!(chain.depth(), 4);
        let enc = encode_tree(&chain, &basis, &fillers).unwrap();
        let zero = TprTensor::zeros(&basis, &fillers);
        assert!(cons_truncation_sq(&enc, &zero, &ops) > 0.0);
        let pushed = cons(&enc, &zero, &vec![0.0; fillers.filler_dim()], &ops);
        // Two unit bindings at depth 4 ("0000" and "0001") are dropped.
        let lost = cons_truncation_sq(&enc, &zero, &ops);
        assert!((enc.norm_sq() - pushed.norm_sq() - lost).abs() < 1e-12);
        assert!((lost - 2.0).abs() < 1e-12);

        // A depth-3 tree survives cons intact (zero truncation).
        let ok: SymTree = "(R (S a b) c)".parse().unwrap();
        let enc_ok = encode_tree(&ok, &basis, &fillers).unwrap();
        assert_eq!(cons_truncation_sq(&enc_ok, &zero, &ops), 0.0);
    }

    #[test]
    fn operators_are_adjoint_partial_permutations() {
        let basis = build_role_basis(3).unwrap();
        let ops = Operators::new(&basis);
        let n = basis.num_roles();
        let d0 = ops.dense_d0();
        let e0 = ops.dense_e0();
        let d1 = ops.dense_d1();
        let e1 = ops.dense_e1();
        for r in 0..n {
            for c in 0..n {
                assert_eq!(e0[r * n + c], d0[c * n + r]);
                assert_eq!(e1[r * n + c], d1[c * n + r]);
            }
        }
        for m in [&d0, &d1, &e0, &e1] {
            for i in 0..n {
                let row_ones = (0..n).filter(|j| m[i * n + j] == 1.0).count();
                let col_ones = (0..n).filter(|j| m[j * n + i] == 1.0).count();
                assert!(row_ones <= 1 && col_ones <= 1);
                for j in 0..n {
                    let v = m[i * n + j];
                    assert!(v == 0.0 || v == 1.0);
                }
            }
        }
    }

    #[test]
    fn operations_are_linear() {
        let (basis, fillers, ops) = small_setup(3);
        let mut rng = rand_chacha::ChaCha12Rng::seed_from_u64(3);
        let rand_tensor = |rng: &mut rand_chacha::ChaCha12Rng| {
            let data: Vec<f64> = (0..basis.num_roles() * fillers.filler_dim())
                .map(|_| rng.gen_range(-1.0..1.0))
                .collect();
            TprTensor::from_data(basis.num_roles(), fillers.filler_dim(), data).unwrap()
        };
        for _ in 0..10 {
            let a = rand_tensor(&mut rng);
            let b = rand_tensor(&mut rng);
            let (alpha, beta) = (rng.gen_range(-2.0..2.0), rng.gen_range(-2.0..2.0));
            let mixed = a.scale(alpha).add(&b.scale(beta));
            for f in [car, cdr] {
                let lhs = f(&mixed, &ops);
                let rhs = f(&a, &ops).scale(alpha).add(&f(&b, &ops).scale(beta));
                assert!(lhs.max_abs_diff(&rhs) < 1e-12);
            }
            let zero_root = vec![0.0; fillers.filler_dim()];
            let lhs = cons(&mixed, &mixed, &zero_root, &ops);
            let rhs = cons(&a, &a, &zero_root, &ops)
                .scale(alpha)
                .add(&cons(&b, &b, &zero_root, &ops).scale(beta));
            assert!(lhs.max_abs_diff(&rhs) < 1e-12);
        }
    }
}
