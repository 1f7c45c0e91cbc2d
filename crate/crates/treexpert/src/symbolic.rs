//! Discrete binary trees and the ground-truth Lisp interpreter over them.
//!
//! This is the brute-force oracle: every tensor-space operation in
//! [`crate::tpr`] and every dataset target is checked against the plain
//! tree algebra defined here.

use std::collections::HashSet;
use std::fmt;
use std::str::FromStr;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// A strictly binary labeled tree. Internal labels are optional; leaves
/// always carry a label.
#[derive(Debug, Clone, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub enum SymTree {
    Leaf(String),
    Node {
        label: Option<String>,
        left: Box<SymTree>,
        right: Box<SymTree>,
    },
}

impl SymTree {
    pub fn leaf(label: impl Into<String>) -> Self {
        SymTree::Leaf(label.into())
    }

    pub fn node(label: impl Into<String>, left: SymTree, right: SymTree) -> Self {
        SymTree::Node {
            label: Some(label.into()),
            left: Box::new(left),
            right: Box::new(right),
        }
    }

    pub fn node_unlabeled(left: SymTree, right: SymTree) -> Self {
        SymTree::Node {
            label: None,
            left: Box::new(left),
            right: Box::new(right),
        }
    }

    pub fn is_leaf(&self) -> bool {
        matches!(self, SymTree::Leaf(_))
    }

    /// Depth of the deepest node, with the root at depth 0.
    pub fn depth(&self) -> usize {
        match self {
            SymTree::Leaf(_) => 0,
            SymTree::Node { left, right, .. } => 1 + left.depth().max(right.depth()),
        }
    }

    pub fn node_count(&self) -> usize {
        match self {
            SymTree::Leaf(_) => 1,
            SymTree::Node { left, right, .. } => 1 + left.node_count() + right.node_count(),
        }
    }

    /// Root label, if any.
    pub fn root_label(&self) -> Option<&str> {
        match self {
            SymTree::Leaf(l) => Some(l),
            SymTree::Node { label, .. } => label.as_deref(),
        }
    }

    /// All (path, label) bindings: leaves at their root-to-node paths plus
    /// labeled internal nodes. Paths are strings over {'0','1'}, root = "".
    pub fn bindings(&self) -> Vec<(String, String)> {
        let mut out = Vec::new();
        self.collect_bindings(String::new(), &mut out);
        out
    }

    fn collect_bindings(&self, path: String, out: &mut Vec<(String, String)>) {
        match self {
            SymTree::Leaf(l) => out.push((path, l.clone())),
            SymTree::Node { label, left, right } => {
                if let Some(l) = label {
                    out.push((path.clone(), l.clone()));
                }
                left.collect_bindings(format!("{path}0"), out);
                right.collect_bindings(format!("{path}1"), out);
            }
        }
    }

    /// Multiset of leaf labels, in left-to-right order.
    pub fn leaf_labels(&self) -> Vec<String> {
        match self {
            SymTree::Leaf(l) => vec![l.clone()],
            SymTree::Node { left, right, .. } => {
                let mut v = left.leaf_labels();
                v.extend(right.leaf_labels());
                v
            }
        }
    }

    /// Every label appearing anywhere in the tree.
    pub fn all_labels(&self) -> Vec<String> {
        self.bindings().into_iter().map(|(_, l)| l).collect()
    }

    fn subtrees_into<'a>(&'a self, out: &mut Vec<&'a SymTree>) {
        out.push(self);
        if let SymTree::Node { left, right, .. } = self {
            left.subtrees_into(out);
            right.subtrees_into(out);
        }
    }

    /// All subtrees including the tree itself.
    pub fn subtrees(&self) -> Vec<&SymTree> {
        let mut v = Vec::new();
        self.subtrees_into(&mut v);
        v
    }
}

impl fmt::Display for SymTree {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            SymTree::Leaf(l) => write!(f, "{l}"),
            SymTree::Node { label, left, right } => match label {
                Some(l) => write!(f, "({l} {left} {right})"),
                None => write!(f, "({left} {right})"),
            },
        }
    }
}

impl FromStr for SymTree {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        let tokens = tokenize(s)?;
        let mut pos = 0;
        let tree = parse_expr(&tokens, &mut pos)?;
        if pos != tokens.len() {
            return Err(Error::SexprParse(format!(
                "trailing input after tree: {:?}",
                &tokens[pos..]
            )));
        }
        Ok(tree)
    }
}

#[derive(Debug, Clone, PartialEq)]
enum Token {
    Open,
    Close,
    Atom(String),
}

fn tokenize(s: &str) -> Result<Vec<Token>> {
    let mut tokens = Vec::new();
    let mut atom = String::new();
    for c in s.chars() {
        match c {
            '(' | ')' => {
                if !atom.is_empty() {
                    tokens.push(Token::Atom(std::mem::take(&mut atom)));
                }
                tokens.push(if c == '(' { Token::Open } else { Token::Close });
            }
            c if c.is_whitespace() => {
                if !atom.is_empty() {
                    tokens.push(Token::Atom(std::mem::take(&mut atom)));
                }
            }
            c => atom.push(c),
        }
    }
    if !atom.is_empty() {
        tokens.push(Token::Atom(atom));
    }
    if tokens.is_empty() {
        return Err(Error::SexprParse("empty input".into()));
    }
    Ok(tokens)
}

/// Grammar: a bare atom is a leaf; `(label A B)` is a labeled internal
/// node; `(A B)` is an unlabeled internal node. Exactly two children.
fn parse_expr(tokens: &[Token], pos: &mut usize) -> Result<SymTree> {
    match tokens.get(*pos) {
        Some(Token::Atom(a)) => {
            *pos += 1;
            Ok(SymTree::Leaf(a.clone()))
        }
        Some(Token::Open) => {
            *pos += 1;
            let mut items: Vec<(bool, SymTree)> = Vec::new(); // (was_bare_atom, tree)
            loop {
                match tokens.get(*pos) {
                    Some(Token::Close) => {
                        *pos += 1;
                        break;
                    }
                    Some(Token::Atom(a)) => {
                        *pos += 1;
                        items.push((true, SymTree::Leaf(a.clone())));
                    }
                    Some(Token::Open) => {
                        let sub = parse_expr(tokens, pos)?;
                        items.push((false, sub));
                    }
                    None => return Err(Error::SexprParse("unbalanced parentheses".into())),
                }
            }
            match items.len() {
                2 => {
                    let mut it = items.into_iter();
                    let (_, l) = it.next().unwrap();
                    let (_, r) = it.next().unwrap();
                    Ok(SymTree::node_unlabeled(l, r))
                }
                3 => {
                    let mut it = items.into_iter();
                    let (first_is_atom, first) = it.next().unwrap();
                    if !first_is_atom {
                        return Err(Error::SexprParse(
                            "three-item list must start with a label atom".into(),
                        ));
                    }
                    let label = match first {
                        SymTree::Leaf(l) => l,
                        _ => unreachable!(),
                    };
                    let (_, l) = it.next().unwrap();
                    let (_, r) = it.next().unwrap();
                    Ok(SymTree::node(label, l, r))
                }
                n => Err(Error::SexprParse(format!(
                    "internal node must have 2 children (optionally preceded by a label), got {n} items"
                ))),
            }
        }
        Some(Token::Close) => Err(Error::SexprParse("unexpected ')'".into())),
        None => Err(Error::SexprParse("unexpected end of input".into())),
    }
}

/// Reassemble a tree from (path, label) bindings, the inverse of
/// [`SymTree::bindings`]. Returns `Ok(None)` for no bindings. Fails when
/// the occupied positions do not form a strictly binary tree.
pub fn tree_from_bindings(bindings: &[(String, String)]) -> Result<Option<SymTree>> {
    if bindings.is_empty() {
        return Ok(None);
    }
    let mut nodes: HashSet<String> = HashSet::new();
    let mut labels: std::collections::HashMap<&str, &str> = std::collections::HashMap::new();
    for (path, label) in bindings {
        if labels.insert(path.as_str(), label.as_str()).is_some() {
            return Err(Error::MalformedTree(format!(
                "duplicate binding at path {path:?}"
            )));
        }
        for i in 0..=path.len() {
            nodes.insert(path[..i].to_string());
        }
    }
    fn build(
        path: &str,
        nodes: &HashSet<String>,
        labels: &std::collections::HashMap<&str, &str>,
    ) -> Result<SymTree> {
        let p0 = format!("{path}0");
        let p1 = format!("{path}1");
        match (nodes.contains(&p0), nodes.contains(&p1)) {
            (false, false) => {
                // A childless node is always a prefix endpoint, hence bound.
                Ok(SymTree::Leaf(labels[path].to_string()))
            }
            (true, true) => Ok(SymTree::Node {
                label: labels.get(path).map(|l| l.to_string()),
                left: Box::new(build(&p0, nodes, labels)?),
                right: Box::new(build(&p1, nodes, labels)?),
            }),
            _ => Err(Error::MalformedTree(format!(
                "node at path {path:?} has exactly one child"
            ))),
        }
    }
    build("", &nodes, &labels).map(Some)
}

/// Left child of the root.
pub fn sym_car(t: &SymTree) -> Result<SymTree> {
    match t {
        SymTree::Leaf(l) => Err(Error::EmptyResult(format!("car of leaf {l:?}"))),
        SymTree::Node { left, .. } => Ok((**left).clone()),
    }
}

/// Right child of the root.
pub fn sym_cdr(t: &SymTree) -> Result<SymTree> {
    match t {
        SymTree::Leaf(l) => Err(Error::EmptyResult(format!("cdr of leaf {l:?}"))),
        SymTree::Node { right, .. } => Ok((**right).clone()),
    }
}

/// Assemble a new tree from two children and an optional root label.
pub fn sym_cons(t0: &SymTree, t1: &SymTree, root: Option<&str>) -> SymTree {
    SymTree::Node {
        label: root.map(|s| s.to_string()),
        left: Box::new(t0.clone()),
        right: Box::new(t1.clone()),
    }
}

/// Recursively swap left/right children at every internal node.
pub fn mirror(t: &SymTree) -> SymTree {
    match t {
        SymTree::Leaf(l) => SymTree::Leaf(l.clone()),
        SymTree::Node { label, left, right } => SymTree::Node {
            label: label.clone(),
            left: Box::new(mirror(right)),
            right: Box::new(mirror(left)),
        },
    }
}

/// One instruction of a discrete Lisp program. Argument indices refer to
/// the growing list of produced trees, index 0 being the program input.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(tag = "op", rename_all = "lowercase")]
pub enum Instr {
    Car {
        arg: usize,
    },
    Cdr {
        arg: usize,
    },
    Cons {
        arg0: usize,
        arg1: usize,
        #[serde(default, skip_serializing_if = "Option::is_none")]
        root: Option<String>,
    },
}

#[derive(Debug, Clone, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(transparent)]
pub struct LispProgram(pub Vec<Instr>);

impl LispProgram {
    pub fn len(&self) -> usize {
        self.0.len()
    }

    pub fn is_empty(&self) -> bool {
        self.0.is_empty()
    }
}

/// Execute a program, returning the full list of trees: input at index 0,
/// then one tree per instruction.
pub fn run_program_trace(p: &LispProgram, input: &SymTree) -> Result<Vec<SymTree>> {
    let mut trees = vec![input.clone()];
    for (step, instr) in p.0.iter().enumerate() {
        let fetch = |i: usize| -> Result<&SymTree> {
            trees.get(i).ok_or_else(|| {
                Error::InvalidProgram(format!(
                    "step {step}: argument index {i} out of range (have {})",
                    trees.len()
                ))
            })
        };
        let next = match instr {
            Instr::Car { arg } => sym_car(fetch(*arg)?)?,
            Instr::Cdr { arg } => sym_cdr(fetch(*arg)?)?,
            Instr::Cons { arg0, arg1, root } => {
                let a = fetch(*arg0)?.clone();
                let b = fetch(*arg1)?;
                sym_cons(&a, b, root.as_deref())
            }
        };
        trees.push(next);
    }
    Ok(trees)
}

/// Execute a program and return the last produced tree (the input itself
/// for an empty program).
pub fn run_program(p: &LispProgram, input: &SymTree) -> Result<SymTree> {
    let trace = run_program_trace(p, input)?;
    Ok(trace.into_iter().last().unwrap())
}

/// Constructive program computing `mirror(t)` with car/cdr/cons: three
/// instructions per internal node.
pub fn mirror_program(t: &SymTree) -> LispProgram {
    fn emit(instrs: &mut Vec<Instr>, tree: &SymTree, tree_idx: usize) -> usize {
        match tree {
            SymTree::Leaf(_) => tree_idx,
            SymTree::Node { label, left, right } => {
                instrs.push(Instr::Car { arg: tree_idx });
                let left_idx = instrs.len();
                instrs.push(Instr::Cdr { arg: tree_idx });
                let right_idx = instrs.len();
                let ml = emit(instrs, left, left_idx);
                let mr = emit(instrs, right, right_idx);
                instrs.push(Instr::Cons {
                    arg0: mr,
                    arg1: ml,
                    root: label.clone(),
                });
                instrs.len()
            }
        }
    }
    let mut instrs = Vec::new();
    emit(&mut instrs, t, 0);
    LispProgram(instrs)
}

/// Result of the bounded shortest-program search.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum StepsBound {
    Exact(usize),
    /// At least this many steps are needed (search budget exhausted, or
    /// the input exceeded the node cap and only a trivial bound is known).
    AtLeast(usize),
}

/// Length of a shortest car/cdr/cons program computing `mirror(t)`,
/// found by breadth-first search. The search restricts intermediate
/// values to subtrees of the input and of the target: in a shortest
/// program any cons result that never survives into the output can be
/// elided, so every useful value lies in that closed set.
pub fn min_reversal_steps(t: &SymTree, program_cap: usize, node_cap: usize) -> StepsBound {
    let target = mirror(t);
    if target == *t {
        return StepsBound::Exact(0);
    }
    if t.node_count() > node_cap {
        return StepsBound::AtLeast(1);
    }

    // Universe of useful values.
    let mut universe: Vec<SymTree> = Vec::new();
    for s in t.subtrees().into_iter().chain(target.subtrees()) {
        if !universe.contains(s) {
            universe.push(s.clone());
        }
    }
    let index_of = |v: &SymTree| universe.iter().position(|u| u == v).unwrap();
    let n = universe.len();
    assert!(n <= 64, "universe exceeds bitmask width");

    // Precompute single-step successors: from any available value set,
    // car/cdr decompose members and cons re-builds internal members whose
    // children are both available.
    let start: u64 = 1 << index_of(t);
    let goal: u64 = 1 << index_of(&target);
    let mut frontier: Vec<u64> = vec![start];
    let mut visited: HashSet<u64> = HashSet::from([start]);
    for steps in 0..program_cap {
        if frontier.iter().any(|m| m & goal != 0) {
            return StepsBound::Exact(steps);
        }
        let mut next: Vec<u64> = Vec::new();
        for &mask in &frontier {
            let mut candidates: Vec<u64> = Vec::new();
            for (i, v) in universe.iter().enumerate() {
                if mask & (1 << i) != 0 {
                    if let SymTree::Node { left, right, .. } = v {
                        candidates.push(1 << index_of(left));
                        candidates.push(1 << index_of(right));
                    }
                }
            }
            for v in &universe {
                if let SymTree::Node { left, right, .. } = v {
                    let li = 1u64 << index_of(left);
                    let ri = 1u64 << index_of(right);
                    if mask & li != 0 && mask & ri != 0 {
                        candidates.push(1 << index_of(v));
                    }
                }
            }
            for bit in candidates {
                let m = mask | bit;
                if m != mask && visited.insert(m) {
                    next.push(m);
                }
            }
        }
        frontier = next;
        if frontier.is_empty() {
            break;
        }
    }
    if frontier.iter().any(|m| m & goal != 0) {
        return StepsBound::Exact(program_cap);
    }
    StepsBound::AtLeast(program_cap + 1)
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    fn t(s: &str) -> SymTree {
        s.parse().unwrap()
    }

    #[test]
    fn parse_and_display_round_trip() {
        for s in [
            "x",
            "(a b)",
            "(R a b)",
            "(NP (DET some) (AP (ADJ sad) (N sheep)))",
            "(S (NP some (AP sad sheep)) (VP see (NP a wolf)))",
            "(see (args (NP some (AP sad sheep)) (NP a wolf)))",
        ] {
            assert_eq!(t(s).to_string(), s);
        }
    }

    #[test]
    fn parse_labeled_vs_unlabeled() {
        assert_eq!(t("(R a b)"), SymTree::node("R", t("a"), t("b")));
        assert_eq!(t("(a b)"), SymTree::node_unlabeled(t("a"), t("b")));
        // `(see (args A B))` keeps its leading atom as a child, not a label.
        let l = t("(see (args a b))");
        assert_eq!(
            l,
            SymTree::node_unlabeled(t("see"), SymTree::node("args", t("a"), t("b")))
        );
    }

    #[test]
    fn parse_rejects_malformed() {
        assert!("".parse::<SymTree>().is_err());
        assert!("()".parse::<SymTree>().is_err());
        assert!("(a)".parse::<SymTree>().is_err());
        assert!("(a b c d)".parse::<SymTree>().is_err());
        assert!("((a b) c d)".parse::<SymTree>().is_err());
        assert!("(a b".parse::<SymTree>().is_err());
        assert!("a)".parse::<SymTree>().is_err());
        assert!("(a b) x".parse::<SymTree>().is_err());
    }

    #[test]
    fn car_cdr_cons_basics() {
        let tree = t("(R a b)");
        assert_eq!(sym_car(&tree).unwrap(), t("a"));
        assert_eq!(sym_cdr(&tree).unwrap(), t("b"));
        assert!(sym_car(&t("a")).is_err());
        assert!(sym_cdr(&t("a")).is_err());
        assert_eq!(sym_cons(&t("a"), &t("b"), Some("R")), tree);
        // cons(car t, cdr t, label t) = t on internal trees
        let big = t("(S (NP some (AP sad sheep)) (VP see (NP a wolf)))");
        let rebuilt = sym_cons(
            &sym_car(&big).unwrap(),
            &sym_cdr(&big).unwrap(),
            big.root_label(),
        );
        assert_eq!(rebuilt, big);
    }

    #[test]
    fn mirror_examples() {
        assert_eq!(mirror(&t("x")), t("x"));
        assert_eq!(mirror(&t("(R a (S b c))")), t("(R (S c b) a)"));
        let big = t("(S (NP some (AP sad sheep)) (VP see (NP a wolf)))");
        assert_eq!(mirror(&mirror(&big)), big);
    }

    #[test]
    fn run_program_examples() {
        // 13-token sentence-like tree shaped after the running example:
        // a cons list ((some .) ((sad .) ((sheep .) end))) puts sheep at 1100.
        let tree = t("((some x0) ((sad x1) ((sheep x2) end)))");
        let prog = LispProgram(vec![
            Instr::Cdr { arg: 0 },
            Instr::Cdr { arg: 1 },
            Instr::Car { arg: 2 },
        ]);
        assert_eq!(run_program(&prog, &tree).unwrap(), t("(sheep x2)"));

        assert_eq!(run_program(&LispProgram::default(), &tree).unwrap(), tree);

        let bad = LispProgram(vec![Instr::Car { arg: 3 }]);
        assert!(matches!(
            run_program(&bad, &tree),
            Err(Error::InvalidProgram(_))
        ));
    }

    #[test]
    fn program_serializes_as_tagged_json() {
        let prog = LispProgram(vec![
            Instr::Car { arg: 0 },
            Instr::Cons {
                arg0: 1,
                arg1: 0,
                root: Some("R".into()),
            },
        ]);
        let json = serde_json::to_string(&prog).unwrap();
        assert_eq!(
            json,
            r#"[{"op":"car","arg":0},{"op":"cons","arg0":1,"arg1":0,"root":"R"}]"#
        );
        let back: LispProgram = serde_json::from_str(&json).unwrap();
        assert_eq!(back, prog);
    }

    #[test]
    fn mirror_program_computes_mirror() {
        for s in [
            "x",
            "(R a b)",
            "(R a (S b c))",
            "(S (NP some (AP sad sheep)) (VP see (NP a wolf)))",
        ] {
            let tree = t(s);
            let prog = mirror_program(&tree);
            assert_eq!(run_program(&prog, &tree).unwrap(), mirror(&tree));
            let internal = tree
                .subtrees()
                .iter()
                .filter(|s| !s.is_leaf())
                .count();
            assert_eq!(prog.len(), 3 * internal);
        }
    }

    #[test]
    fn min_reversal_steps_examples() {
        assert_eq!(min_reversal_steps(&t("x"), 12, 7), StepsBound::Exact(0));
        assert_eq!(
            min_reversal_steps(&t("(R a b)"), 12, 7),
            StepsBound::Exact(3)
        );
        // Symmetric tree mirrors to itself.
        assert_eq!(
            min_reversal_steps(&t("(R a a)"), 12, 7),
            StepsBound::Exact(0)
        );
        // Full depth-2 tree (7 nodes): constructive bound is 9; exact
        // search stays within the cap and cannot beat the lower bound.
        let full = t("(R (A a b) (B c d))");
        match min_reversal_steps(&full, 12, 7) {
            StepsBound::Exact(n) => {
                assert!(n <= 9 && n <= 28, "got {n}");
                assert!(n >= 3);
            }
            StepsBound::AtLeast(_) => panic!("search should succeed within cap"),
        }
        // Over the node cap: only a trivial bound.
        let big = t("(S (NP some (AP sad sheep)) (VP see (NP a wolf)))");
        assert_eq!(min_reversal_steps(&big, 12, 7), StepsBound::AtLeast(1));
        // Budget overflow reports a lower-bound marker.
        assert_eq!(
            min_reversal_steps(&t("(R a b)"), 2, 7),
            StepsBound::AtLeast(3)
        );
    }

    #[test]
    fn bindings_round_trip() {
        let tree = t("(S (NP some (AP sad sheep)) (VP see (NP a wolf)))");
        let b = tree.bindings();
        assert_eq!(tree_from_bindings(&b).unwrap(), Some(tree));
        assert_eq!(tree_from_bindings(&[]).unwrap(), None);
        // Single child is malformed.
        let bad = vec![("0".to_string(), "x".to_string())];
        assert!(tree_from_bindings(&bad).is_err());
    }

    #[test]
    fn fig_style_binding_paths() {
        // Cons-list layout places the k-th list element's head at 1^k 0.
        let tree = t("((some x0) ((sad x1) ((sheep x2) end)))");
        let b = tree.bindings();
        let find = |p: &str| b.iter().find(|(q, _)| q == p).map(|(_, l)| l.as_str());
        assert_eq!(find("00"), Some("some"));
        assert_eq!(find("100"), Some("sad"));
        assert_eq!(find("1100"), Some("sheep"));
    }

    fn arb_tree() -> impl Strategy<Value = SymTree> {
        let leaf = prop::sample::select(vec!["a", "b", "c", "wolf", "sheep"])
            .prop_map(|l| SymTree::leaf(l));
        leaf.prop_recursive(4, 24, 2, |inner| {
            (
                prop::option::of(prop::sample::select(vec!["R", "S", "NP"])),
                inner.clone(),
                inner,
            )
                .prop_map(|(label, l, r)| SymTree::Node {
                    label: label.map(|s| s.to_string()),
                    left: Box::new(l),
                    right: Box::new(r),
                })
        })
    }

    proptest! {
        #[test]
        fn prop_display_parse_round_trip(tree in arb_tree()) {
            let s = tree.to_string();
            prop_assert_eq!(s.parse::<SymTree>().unwrap(), tree);
        }

        #[test]
        fn prop_mirror_involution(tree in arb_tree()) {
            prop_assert_eq!(mirror(&mirror(&tree)), tree.clone());
            // Mirror preserves the multiset of leaf labels.
            let mut a = tree.leaf_labels();
            let mut b = mirror(&tree).leaf_labels();
            a.sort();
            b.sort();
            prop_assert_eq!(a, b);
        }

        #[test]
        fn prop_bindings_round_trip(tree in arb_tree()) {
            prop_assert_eq!(tree_from_bindings(&tree.bindings()).unwrap(), Some(tree));
        }

        #[test]
        fn prop_cons_car_cdr_identity(tree in arb_tree()) {
            if !tree.is_leaf() {
                let rebuilt = sym_cons(
                    &sym_car(&tree).unwrap(),
                    &sym_cdr(&tree).unwrap(),
                    tree.root_label(),
                );
                prop_assert_eq!(rebuilt, tree);
            }
        }
    }
}
