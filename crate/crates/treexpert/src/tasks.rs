//! Benchmark task generators: car/cdr sequences encoded in the root
//! label, grammar-form transductions (active/passive/logical), and tree
//! reversal, each with in-distribution and out-of-distribution splits.
//!
//! Every emitted target is rebuilt through the symbolic oracle at
//! generation time, and split hygiene (held-out adjectives, chain
//! lengths, depth bounds) is asserted over the full dataset.

use std::collections::BTreeMap;
use std::fmt;
use std::io::{BufRead, Write};
use std::path::Path;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha12Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::symbolic::{mirror, run_program, sym_car, sym_cdr, sym_cons, Instr, LispProgram, SymTree};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum TaskKind {
    CarCdrSeq,
    ActiveLogical,
    PassiveLogical,
    ActiveAndPassiveLogical,
    Reverse,
}

impl TaskKind {
    pub fn as_str(&self) -> &'static str {
        match self {
            TaskKind::CarCdrSeq => "car_cdr_seq",
            TaskKind::ActiveLogical => "active_logical",
            TaskKind::PassiveLogical => "passive_logical",
            TaskKind::ActiveAndPassiveLogical => "active_and_passive_logical",
            TaskKind::Reverse => "reverse",
        }
    }

    pub fn parse(s: &str) -> Result<Self> {
        match s {
            "car_cdr_seq" => Ok(TaskKind::CarCdrSeq),
            "active_logical" => Ok(TaskKind::ActiveLogical),
            "passive_logical" => Ok(TaskKind::PassiveLogical),
            "active_and_passive_logical" => Ok(TaskKind::ActiveAndPassiveLogical),
            "reverse" => Ok(TaskKind::Reverse),
            other => Err(Error::config(format!("unknown task {other:?}"))),
        }
    }

    /// Smallest role depth that holds every tree the task can emit.
    pub fn default_max_depth(&self) -> usize {
        match self {
            TaskKind::CarCdrSeq | TaskKind::ActiveLogical | TaskKind::Reverse => 6,
            TaskKind::PassiveLogical | TaskKind::ActiveAndPassiveLogical => 8,
        }
    }
}

impl fmt::Display for TaskKind {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Split {
    Train,
    TestId,
    TestOodLexical,
    TestOodStructural,
}

impl Split {
    pub const ALL: [Split; 4] = [
        Split::Train,
        Split::TestId,
        Split::TestOodLexical,
        Split::TestOodStructural,
    ];

    pub fn as_str(&self) -> &'static str {
        match self {
            Split::Train => "train",
            Split::TestId => "test_id",
            Split::TestOodLexical => "test_ood_lexical",
            Split::TestOodStructural => "test_ood_structural",
        }
    }

    pub fn parse(s: &str) -> Result<Self> {
        match s {
            "train" => Ok(Split::Train),
            "test_id" => Ok(Split::TestId),
            "test_ood_lexical" => Ok(Split::TestOodLexical),
            "test_ood_structural" => Ok(Split::TestOodStructural),
            other => Err(Error::config(format!("unknown split {other:?}"))),
        }
    }

    pub fn file_name(&self) -> String {
        format!("{}.jsonl", self.as_str())
    }
}

impl fmt::Display for Split {
    fmt_as_str!();
}

pub const NOUNS: [&str; 12] = [
    "sheep", "wolf", "dog", "cat", "bird", "fox", "cow", "horse", "mouse", "bear", "frog", "deer",
];
pub const VERBS: [&str; 8] = [
    "see", "bite", "chase", "find", "hold", "push", "take", "hear",
];
pub const VERBS_PASSIVE: [&str; 8] = [
    "seen", "bitten", "chased", "found", "held", "pushed", "taken", "heard",
];
pub const DETERMINERS: [&str; 4] = ["some", "a", "the", "every"];
pub const ADJECTIVES_TRAIN: [&str; 20] = [
    "sad", "happy", "big", "small", "red", "blue", "old", "young", "fast", "slow", "loud",
    "quiet", "tall", "short", "warm", "cold", "clever", "brave", "shy", "calm",
];
pub const ADJECTIVES_HELDOUT: [&str; 8] = [
    "funny", "green", "tiny", "huge", "wild", "gentle", "proud", "sleepy",
];
pub const AUX: &str = "was";
pub const PREP_BY: &str = "by";
pub const GRAMMAR_LABELS: [&str; 6] = ["S", "NP", "VP", "AP", "PP", "args"];
pub const MAX_OP_WORD_LEN: usize = 4;

/// All car/cdr composition words up to length 4: car, cdr, caar, ...
pub fn op_words() -> Vec<String> {
    let mut words = Vec::new();
    for len in 1..=MAX_OP_WORD_LEN {
        for bits in 0..(1usize << len) {
            let letters: String = (0..len)
                .map(|i| if bits >> (len - 1 - i) & 1 == 1 { 'd' } else { 'a' })
                .collect();
            words.push(format!("c{letters}r"));
        }
    }
    words
}

/// Full filler vocabulary in its canonical order. Role-coded models and
/// datasets share this ordering through the manifest.
pub fn full_vocab() -> Vec<String> {
    let mut v: Vec<String> = Vec::new();
    v.extend(NOUNS.iter().map(|s| s.to_string()));
    v.extend(VERBS.iter().map(|s| s.to_string()));
    v.extend(VERBS_PASSIVE.iter().map(|s| s.to_string()));
    v.extend(DETERMINERS.iter().map(|s| s.to_string()));
    v.extend(ADJECTIVES_TRAIN.iter().map(|s| s.to_string()));
    v.extend(ADJECTIVES_HELDOUT.iter().map(|s| s.to_string()));
    v.push(AUX.to_string());
    v.push(PREP_BY.to_string());
    v.extend(GRAMMAR_LABELS.iter().map(|s| s.to_string()));
    v.extend(op_words());
    v
}

pub fn passive_form(verb: &str) -> Result<&'static str> {
    VERBS
        .iter()
        .position(|v| *v == verb)
        .map(|i| VERBS_PASSIVE[i])
        .ok_or_else(|| Error::UnknownLabel {
            label: verb.to_string(),
        })
}

pub fn base_form(passive: &str) -> Result<&'static str> {
    VERBS_PASSIVE
        .iter()
        .position(|v| *v == passive)
        .map(|i| VERBS[i])
        .ok_or_else(|| Error::UnknownLabel {
            label: passive.to_string(),
        })
}

#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct TaskSpec {
    pub kind: TaskKind,
    pub seed: u64,
    pub train_size: usize,
    /// Size of each of the three test splits.
    pub test_size: usize,
    pub max_depth: usize,
    /// Largest adjective-chain length in train/ID samples.
    pub ap_id_max: usize,
    /// Adjective-chain length of every noun phrase in structural-OOD
    /// samples; must exceed `ap_id_max`.
    pub ap_ood: usize,
    /// car_cdr_seq operation-word lengths, inclusive.
    pub min_ops: usize,
    pub max_ops: usize,
}

impl TaskSpec {
    pub fn new(kind: TaskKind, seed: u64) -> Self {
        TaskSpec {
            kind,
            seed,
            train_size: 2000,
            test_size: 500,
            max_depth: kind.default_max_depth(),
            ap_id_max: 2,
            ap_ood: 3,
            min_ops: 1,
            max_ops: 4,
        }
    }

    pub fn validate(&self) -> Result<()> {
        if self.ap_ood <= self.ap_id_max {
            return Err(Error::config(format!(
                "ap_ood {} must exceed ap_id_max {}",
                self.ap_ood, self.ap_id_max
            )));
        }
        if self.min_ops == 0 || self.max_ops > MAX_OP_WORD_LEN || self.min_ops > self.max_ops {
            return Err(Error::config(format!(
                "op word lengths {}..={} outside 1..={MAX_OP_WORD_LEN}",
                self.min_ops, self.max_ops
            )));
        }
        // The deepest tree any split emits must fit the role depth.
        let needed = match self.kind {
            TaskKind::PassiveLogical | TaskKind::ActiveAndPassiveLogical => self.ap_ood + 5,
            _ => self.ap_ood + 3,
        };
        if needed > self.max_depth {
            return Err(Error::config(format!(
                "max_depth {} too small: task {} with ap_ood {} needs {}",
                self.max_depth, self.kind, self.ap_ood, needed
            )));
        }
        Ok(())
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct SamplePair {
    pub source: SymTree,
    pub target: SymTree,
    pub split: Split,
    pub meta: BTreeMap<String, String>,
}

/// Lexical palette for one sample.
#[derive(Clone, Copy)]
struct Palette<'a> {
    adjectives: &'a [&'a str],
    chain_min: usize,
    chain_max: usize,
    /// Force every chain to exactly chain_max (structural OOD).
    exact: bool,
}

fn sample_np(rng: &mut ChaCha12Rng, p: &Palette) -> SymTree {
    let chain = if p.exact {
        p.chain_max
    } else {
        rng.gen_range(p.chain_min..=p.chain_max)
    };
    let det = DETERMINERS[rng.gen_range(0..DETERMINERS.len())];
    let noun = NOUNS[rng.gen_range(0..NOUNS.len())];
    let mut tail = SymTree::leaf(noun);
    for _ in 0..chain {
        let adj = p.adjectives[rng.gen_range(0..p.adjectives.len())];
        tail = SymTree::node("AP", SymTree::leaf(adj), tail);
    }
    SymTree::node("NP", SymTree::leaf(det), tail)
}

fn sample_active(rng: &mut ChaCha12Rng, p: &Palette) -> (SymTree, &'static str) {
    let verb = VERBS[rng.gen_range(0..VERBS.len())];
    let agent = sample_np(rng, p);
    let patient = sample_np(rng, p);
    (
        SymTree::node("S", agent, SymTree::node("VP", SymTree::leaf(verb), patient)),
        verb,
    )
}

fn sample_passive(rng: &mut ChaCha12Rng, p: &Palette) -> (SymTree, &'static str) {
    let verb = VERBS[rng.gen_range(0..VERBS.len())];
    let agent = sample_np(rng, p);
    let patient = sample_np(rng, p);
    let pp = SymTree::node("PP", SymTree::leaf(PREP_BY), agent);
    let inner = SymTree::node("VP", SymTree::leaf(passive_form(verb).unwrap()), pp);
    (
        SymTree::node(
            "S",
            patient,
            SymTree::node("VP", SymTree::leaf(AUX), inner),
        ),
        verb,
    )
}

/// active (S A (VP v P)) -> logical (v (args A P)), composed from the
/// three Lisp primitives.
pub fn active_to_logical(t: &SymTree) -> Result<SymTree> {
    let agent = sym_car(t)?;
    let vp = sym_cdr(t)?;
    let verb = sym_car(&vp)?;
    let patient = sym_cdr(&vp)?;
    Ok(sym_cons(
        &verb,
        &sym_cons(&agent, &patient, Some("args")),
        None,
    ))
}

/// logical (v (args A P)) -> active (S A (VP v P)).
pub fn logical_to_active(t: &SymTree) -> Result<SymTree> {
    let verb = sym_car(t)?;
    let args = sym_cdr(t)?;
    let agent = sym_car(&args)?;
    let patient = sym_cdr(&args)?;
    Ok(sym_cons(
        &agent,
        &sym_cons(&verb, &patient, Some("VP")),
        Some("S"),
    ))
}

/// passive (S P (VP was (VP v_pass (PP by A)))) -> logical (v (args A P)).
pub fn passive_to_logical(t: &SymTree) -> Result<SymTree> {
    let patient = sym_car(t)?;
    let vp = sym_cdr(t)?;
    let inner = sym_cdr(&vp)?;
    let v_pass = sym_car(&inner)?;
    let pp = sym_cdr(&inner)?;
    let agent = sym_cdr(&pp)?;
    let base = match &v_pass {
        SymTree::Leaf(l) => base_form(l)?,
        _ => return Err(Error::InvalidProgram("passive verb is not a leaf".into())),
    };
    Ok(sym_cons(
        &SymTree::leaf(base),
        &sym_cons(&agent, &patient, Some("args")),
        None,
    ))
}

/// logical (v (args A P)) -> passive (S P (VP was (VP v_pass (PP by A)))).
pub fn logical_to_passive(t: &SymTree) -> Result<SymTree> {
    let verb = sym_car(t)?;
    let args = sym_cdr(t)?;
    let agent = sym_car(&args)?;
    let patient = sym_cdr(&args)?;
    let v_pass = match &verb {
        SymTree::Leaf(l) => passive_form(l)?,
        _ => return Err(Error::InvalidProgram("verb is not a leaf".into())),
    };
    let pp = sym_cons(&SymTree::leaf(PREP_BY), &agent, Some("PP"));
    let inner = sym_cons(&SymTree::leaf(v_pass), &pp, Some("VP"));
    Ok(sym_cons(
        &patient,
        &sym_cons(&SymTree::leaf(AUX), &inner, Some("VP")),
        Some("S"),
    ))
}

/// Apply a car/cdr word like "cadr" to a tree: letters compose
/// right-to-left, so cadr(x) = car(cdr(x)).
pub fn apply_op_word(word: &str, tree: &SymTree) -> Result<SymTree> {
    let letters = word
        .strip_prefix('c')
        .and_then(|w| w.strip_suffix('r'))
        .ok_or_else(|| Error::config(format!("malformed op word {word:?}")))?;
    let mut current = tree.clone();
    for letter in letters.chars().rev() {
        current = match letter {
            'a' => sym_car(&current)?,
            'd' => sym_cdr(&current)?,
            other => {
                return Err(Error::config(format!(
                    "op word {word:?} has invalid letter {other:?}"
                )))
            }
        };
    }
    Ok(current)
}

/// Source tree for a car_cdr_seq sample: the operation word replaces the
/// payload's root label, keeping the payload's two children.
pub fn build_carcdr_source(word: &str, payload: &SymTree) -> Result<SymTree> {
    match payload {
        SymTree::Leaf(_) => Err(Error::config("car_cdr_seq payload must be internal".into())),
        SymTree::Node { left, right, .. } => {
            Ok(SymTree::node(word, (**left).clone(), (**right).clone()))
        }
    }
}

fn palette<'a>(spec: &TaskSpec, split: Split) -> Palette<'a> {
    match split {
        Split::Train | Split::TestId => Palette {
            adjectives: &ADJECTIVES_TRAIN,
            chain_min: 0,
            chain_max: spec.ap_id_max,
            exact: false,
        },
        // Lexical OOD must actually contain held-out adjectives, so the
        // chain cannot be empty.
        Split::TestOodLexical => Palette {
            adjectives: &ADJECTIVES_HELDOUT,
            chain_min: 1,
            chain_max: spec.ap_id_max,
            exact: false,
        },
        Split::TestOodStructural => Palette {
            adjectives: &ADJECTIVES_TRAIN,
            chain_min: spec.ap_ood,
            chain_max: spec.ap_ood,
            exact: true,
        },
    }
}

fn gen_one(
    spec: &TaskSpec,
    split: Split,
    rng: &mut ChaCha12Rng,
) -> Result<SamplePair> {
    let p = palette(spec, split);
    let mut meta = BTreeMap::new();
    let (source, target) = match spec.kind {
        TaskKind::CarCdrSeq => loop {
            let len = rng.gen_range(spec.min_ops..=spec.max_ops);
            let letters: String = (0..len)
                .map(|_| if rng.gen_bool(0.5) { 'a' } else { 'd' })
                .collect();
            let word = format!("c{letters}r");
            let (payload, _) = sample_active(rng, &p);
            let source = build_carcdr_source(&word, &payload)?;
            if let Ok(target) = apply_op_word(&word, &source) {
                meta.insert("op_word".into(), word);
                meta.insert("payload_root".into(), "S".into());
                break (source, target);
            }
        },
        TaskKind::ActiveLogical => {
            if rng.gen_bool(0.5) {
                let (active, _) = sample_active(rng, &p);
                let logical = active_to_logical(&active)?;
                meta.insert("direction".into(), "active_to_logical".into());
                (active, logical)
            } else {
                let (active, _) = sample_active(rng, &p);
                let logical = active_to_logical(&active)?;
                meta.insert("direction".into(), "logical_to_active".into());
                (logical, active)
            }
        }
        TaskKind::PassiveLogical => {
            if rng.gen_bool(0.5) {
                let (passive, _) = sample_passive(rng, &p);
                let logical = passive_to_logical(&passive)?;
                meta.insert("direction".into(), "passive_to_logical".into());
                (passive, logical)
            } else {
                let (passive, _) = sample_passive(rng, &p);
                let logical = passive_to_logical(&passive)?;
                meta.insert("direction".into(), "logical_to_passive".into());
                (logical, passive)
            }
        }
        TaskKind::ActiveAndPassiveLogical => {
            if rng.gen_bool(0.5) {
                let (active, _) = sample_active(rng, &p);
                let logical = active_to_logical(&active)?;
                meta.insert("direction".into(), "active_to_logical".into());
                (active, logical)
            } else {
                let (passive, _) = sample_passive(rng, &p);
                let logical = passive_to_logical(&passive)?;
                meta.insert("direction".into(), "passive_to_logical".into());
                (passive, logical)
            }
        }
        TaskKind::Reverse => {
            let (active, _) = sample_active(rng, &p);
            let target = mirror(&active);
            (active, target)
        }
    };
    Ok(SamplePair {
        source,
        target,
        split,
        meta,
    })
}

/// Generate one split from its own derived seed stream.
pub fn gen_split(spec: &TaskSpec, split: Split) -> Result<Vec<SamplePair>> {
    spec.validate()?;
    let mut rng = ChaCha12Rng::seed_from_u64(spec.seed);
    rng.set_stream(match split {
        Split::Train => 1,
        Split::TestId => 2,
        Split::TestOodLexical => 3,
        Split::TestOodStructural => 4,
    });
    let size = match split {
        Split::Train => spec.train_size,
        _ => spec.test_size,
    };
    let pairs: Vec<SamplePair> = (0..size)
        .map(|_| gen_one(spec, split, &mut rng))
        .collect::<Result<_>>()?;
    verify_split(spec, &pairs)?;
    Ok(pairs)
}

pub fn generate_all(spec: &TaskSpec) -> Result<Vec<(Split, Vec<SamplePair>)>> {
    Split::ALL
        .iter()
        .map(|s| Ok((*s, gen_split(spec, *s)?)))
        .collect()
}

/// Oracle transform of a source for this task, recomputed independently
/// of whatever the generator produced.
pub fn oracle_target(kind: TaskKind, source: &SymTree, meta: &BTreeMap<String, String>) -> Result<SymTree> {
    match kind {
        TaskKind::CarCdrSeq => {
            let word = meta
                .get("op_word")
                .ok_or_else(|| Error::config("car_cdr_seq sample missing op_word meta".into()))?;
            // Double-check with a LispProgram run over the source.
            let letters = &word[1..word.len() - 1];
            let mut instrs = Vec::new();
            for (i, letter) in letters.chars().rev().enumerate() {
                instrs.push(match letter {
                    'a' => Instr::Car { arg: i },
                    _ => Instr::Cdr { arg: i },
                });
            }
            let via_program = run_program(&LispProgram(instrs), source)?;
            let via_word = apply_op_word(word, source)?;
            if via_program != via_word {
                return Err(Error::InvalidProgram(
                    "op word and program disagree".into(),
                ));
            }
            Ok(via_word)
        }
        TaskKind::ActiveLogical | TaskKind::PassiveLogical | TaskKind::ActiveAndPassiveLogical => {
            match meta.get("direction").map(|s| s.as_str()) {
                Some("active_to_logical") => active_to_logical(source),
                Some("logical_to_active") => logical_to_active(source),
                Some("passive_to_logical") => passive_to_logical(source),
                Some("logical_to_passive") => logical_to_passive(source),
                other => Err(Error::config(format!("bad direction meta {other:?}"))),
            }
        }
        TaskKind::Reverse => Ok(mirror(source)),
    }
}

fn adjective_leaves(t: &SymTree) -> Vec<String> {
    // Adjectives sit as the left child of an AP node.
    fn walk(t: &SymTree, out: &mut Vec<String>) {
        if let SymTree::Node { label, left, right } = t {
            if label.as_deref() == Some("AP") {
                if let SymTree::Leaf(adj) = &**left {
                    out.push(adj.clone());
                }
            }
            walk(left, out);
            walk(right, out);
        }
    }
    let mut out = Vec::new();
    walk(t, &mut out);
    out
}

/// Longest AP chain hanging off any NP in the tree.
fn max_ap_chain(t: &SymTree) -> usize {
    fn chain_len(t: &SymTree) -> usize {
        match t {
            SymTree::Node { label, right, .. } if label.as_deref() == Some("AP") => {
                1 + chain_len(right)
            }
            _ => 0,
        }
    }
    fn walk(t: &SymTree, best: &mut usize) {
        if let SymTree::Node { label, left, right } = t {
            if label.as_deref() == Some("NP") {
                *best = (*best).max(chain_len(right));
            }
            walk(left, best);
            walk(right, best);
        }
    }
    let mut best = 0;
    walk(t, &mut best);
    best
}

/// Assert the per-sample invariants over a whole split.
pub fn verify_split(spec: &TaskSpec, pairs: &[SamplePair]) -> Result<()> {
    let heldout: Vec<&str> = ADJECTIVES_HELDOUT.to_vec();
    for (i, pair) in pairs.iter().enumerate() {
        let fail = |msg: String| Error::config(format!("sample {i} ({}): {msg}", pair.split));
        let oracle = oracle_target(spec.kind, &pair.source, &pair.meta)?;
        if oracle != pair.target {
            return Err(fail("target does not match the symbolic oracle".into()));
        }
        for t in [&pair.source, &pair.target] {
            if t.depth() > spec.max_depth {
                return Err(fail(format!(
                    "depth {} exceeds max_depth {}",
                    t.depth(),
                    spec.max_depth
                )));
            }
        }
        let adjs = adjective_leaves(&pair.source);
        match pair.split {
            Split::TestOodLexical => {
                if adjs.is_empty() {
                    return Err(fail("lexical-OOD sample has no adjectives".into()));
                }
                if adjs.iter().any(|a| !heldout.contains(&a.as_str())) {
                    return Err(fail("lexical-OOD sample uses a training adjective".into()));
                }
            }
            _ => {
                if adjs.iter().any(|a| heldout.contains(&a.as_str())) {
                    return Err(fail("held-out adjective leaked".into()));
                }
            }
        }
        match pair.split {
            Split::TestOodStructural => {
                // Strictly more adjectives per noun phrase than any ID
                // sample can carry.
                if max_ap_chain(&pair.source) <= spec.ap_id_max {
                    return Err(fail("structural-OOD sample within ID chain length".into()));
                }
            }
            Split::Train | Split::TestId | Split::TestOodLexical => {
                if max_ap_chain(&pair.source) > spec.ap_id_max {
                    return Err(fail("ID-family sample exceeds ID chain length".into()));
                }
            }
        }
    }
    Ok(())
}

#[derive(Serialize, Deserialize)]
struct Row {
    source: String,
    target: String,
    split: Split,
    meta: BTreeMap<String, String>,
}

pub fn write_dataset(pairs: &[SamplePair], path: &Path) -> Result<()> {
    let file = std::fs::File::create(path).map_err(|e| Error::io(path.display().to_string(), e))?;
    let mut w = std::io::BufWriter::new(file);
    for pair in pairs {
        let row = Row {
            source: pair.source.to_string(),
            target: pair.target.to_string(),
            split: pair.split,
            meta: pair.meta.clone(),
        };
        serde_json::to_writer(&mut w, &row)?;
        w.write_all(b"\n")
            .map_err(|e| Error::io(path.display().to_string(), e))?;
    }
    w.flush().map_err(|e| Error::io(path.display().to_string(), e))?;
    Ok(())
}

pub fn read_dataset(path: &Path) -> Result<Vec<SamplePair>> {
    let file = std::fs::File::open(path).map_err(|e| Error::io(path.display().to_string(), e))?;
    let reader = std::io::BufReader::new(file);
    let mut out = Vec::new();
    for (i, line) in reader.lines().enumerate() {
        let lineno = i + 1;
        let line = line.map_err(|e| Error::DatasetParse {
            line: lineno,
            reason: e.to_string(),
        })?;
        if line.trim().is_empty() {
            continue;
        }
        let row: Row = serde_json::from_str(&line).map_err(|e| Error::DatasetParse {
            line: lineno,
            reason: e.to_string(),
        })?;
        let source: SymTree = row.source.parse().map_err(|e| Error::DatasetParse {
            line: lineno,
            reason: format!("source: {e}"),
        })?;
        let target: SymTree = row.target.parse().map_err(|e| Error::DatasetParse {
            line: lineno,
            reason: format!("target: {e}"),
        })?;
        out.push(SamplePair {
            source,
            target,
            split: row.split,
            meta: row.meta,
        });
    }
    Ok(out)
}

/// Dataset directory manifest: everything a training run needs to build
/// a compatible model.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct Manifest {
    pub format_version: u32,
    pub task: TaskKind,
    pub seed: u64,
    pub max_depth: usize,
    pub counts: BTreeMap<String, usize>,
    pub vocab: Vec<String>,
    pub vocab_hash: String,
    pub spec: TaskSpec,
}

pub const MANIFEST_VERSION: u32 = 1;

pub fn vocab_hash(vocab: &[String]) -> String {
    use sha2::{Digest, Sha256};
    let mut hasher = Sha256::new();
    for w in vocab {
        hasher.update(w.as_bytes());
        hasher.update(b"\n");
    }
    let digest = hasher.finalize();
    digest.iter().map(|b| format!("{b:02x}")).collect()
}

/// Generate every split and write the dataset directory (four JSONL
/// files plus manifest.json).
pub fn write_dataset_dir(spec: &TaskSpec, dir: &Path) -> Result<Manifest> {
    std::fs::create_dir_all(dir).map_err(|e| Error::io(dir.display().to_string(), e))?;
    let splits = generate_all(spec)?;
    let mut counts = BTreeMap::new();
    for (split, pairs) in &splits {
        counts.insert(split.as_str().to_string(), pairs.len());
        write_dataset(pairs, &dir.join(split.file_name()))?;
    }
    let vocab = full_vocab();
    let manifest = Manifest {
        format_version: MANIFEST_VERSION,
        task: spec.kind,
        seed: spec.seed,
        max_depth: spec.max_depth,
        counts,
        vocab_hash: vocab_hash(&vocab),
        vocab,
        spec: spec.clone(),
    };
    let path = dir.join("manifest.json");
    let json = serde_json::to_string_pretty(&manifest)?;
    std::fs::write(&path, json).map_err(|e| Error::io(path.display().to_string(), e))?;
    Ok(manifest)
}

pub fn read_manifest(dir: &Path) -> Result<Manifest> {
    let path = dir.join("manifest.json");
    let bytes =
        std::fs::read_to_string(&path).map_err(|e| Error::io(path.display().to_string(), e))?;
    Ok(serde_json::from_str(&bytes)?)
}

pub fn read_split(dir: &Path, split: Split) -> Result<Vec<SamplePair>> {
    read_dataset(&dir.join(split.file_name()))
}
