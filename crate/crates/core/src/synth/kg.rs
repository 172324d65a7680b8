use std::collections::BTreeSet;
use std::fs;
use std::path::Path;

use rand::seq::SliceRandom;
use serde::{Deserialize, Serialize};

use super::{SynthConfig, SynthError};
use crate::corpus::Operator;
use crate::rng::{stream, Stream};

const CATEGORY_BANK: [(&str, [&str; 8]); 10] = [
    ("fruits", ["apples", "pears", "plums", "grapes", "lemons", "peaches", "cherries", "mangoes"]),
    ("toys", ["dolls", "balls", "kites", "blocks", "puzzles", "robots", "yoyos", "marbles"]),
    ("birds", ["ducks", "geese", "owls", "hawks", "crows", "robins", "swans", "doves"]),
    ("tools", ["hammers", "saws", "drills", "wrenches", "pliers", "chisels", "clamps", "axes"]),
    ("flowers", ["roses", "tulips", "lilies", "daisies", "orchids", "poppies", "irises", "violets"]),
    ("vehicles", ["cars", "buses", "trucks", "vans", "bikes", "taxis", "tractors", "scooters"]),
    ("snacks", ["cookies", "muffins", "cakes", "pies", "donuts", "bagels", "waffles", "brownies"]),
    ("clothes", ["shirts", "socks", "hats", "scarves", "gloves", "jackets", "skirts", "coats"]),
    ("insects", ["ants", "bees", "wasps", "moths", "beetles", "flies", "gnats", "crickets"]),
    ("supplies", ["pens", "pencils", "erasers", "rulers", "crayons", "markers", "notebooks", "stickers"]),
];

const TRIGGER_BANK: [(Operator, [&str; 6]); 4] = [
    (Operator::Add, ["more", "found", "gained", "received", "added", "extra"]),
    (Operator::Sub, ["gave", "lost", "ate", "sold", "spent", "dropped"]),
    (Operator::Mul, ["times", "fold", "multiplied", "scaled", "copies", "rounds"]),
    (Operator::Div, ["split", "shared", "divided", "rate", "among", "per"]),
];

/// A category word and the member words linked to it.
#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct Group {
    pub category: usize,
    pub members: Vec<usize>,
}

/// Ground-truth knowledge graph behind a synthetic corpus.
///
/// `ww_edges` holds each undirected pair once with `i < j`; `wo_edges` pairs a
/// word index with an operator index. `groups` records the category layout the
/// generator uses to pick words.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct PlantedKg {
    pub words: Vec<String>,
    pub operators: Vec<Operator>,
    pub ww_edges: Vec<(usize, usize)>,
    pub wo_edges: Vec<(usize, usize)>,
    pub groups: Vec<Group>,
}

impl PlantedKg {
    pub fn word_index(&self, word: &str) -> Option<usize> {
        self.words.iter().position(|w| w == word)
    }

    /// Trigger words of operator `c`, in word order.
    pub fn triggers(&self, c: usize) -> Vec<usize> {
        let mut t: Vec<usize> = self.wo_edges.iter().filter(|e| e.1 == c).map(|e| e.0).collect();
        t.sort_unstable();
        t
    }

    pub fn has_ww(&self, i: usize, j: usize) -> bool {
        let key = (i.min(j), i.max(j));
        self.ww_edges.contains(&key)
    }

    pub fn ww_pairs_named(&self) -> Vec<(&str, &str)> {
        self.ww_edges
            .iter()
            .map(|&(i, j)| (self.words[i].as_str(), self.words[j].as_str()))
            .collect()
    }

    pub fn wo_pairs_named(&self) -> Vec<(&str, Operator)> {
        self.wo_edges
            .iter()
            .map(|&(i, c)| (self.words[i].as_str(), self.operators[c]))
            .collect()
    }

    pub fn validate(&self) -> Result<(), SynthError> {
        let bad = |m: String| Err(SynthError::InconsistentKg(m));
        let n = self.words.len();
        let distinct: BTreeSet<&String> = self.words.iter().collect();
        if distinct.len() != n {
            return bad("duplicate words".into());
        }
        let mut seen = BTreeSet::new();
        for &(i, j) in &self.ww_edges {
            if i >= n || j >= n {
                return bad(format!("word-word edge ({i}, {j}) out of range"));
            }
            if i == j {
                return bad(format!("self-loop on word {i}"));
            }
            if i > j || !seen.insert((i, j)) {
                return bad(format!("word-word edge ({i}, {j}) not canonical"));
            }
        }
        let mut owner = vec![None; n];
        for &(i, c) in &self.wo_edges {
            if i >= n || c >= self.operators.len() {
                return bad(format!("word-operator edge ({i}, {c}) out of range"));
            }
            if let Some(prev) = owner[i].replace(c) {
                return bad(format!("word {:?} triggers operators {prev} and {c}", self.words[i]));
            }
        }
        for g in &self.groups {
            if g.members.is_empty() {
                return bad(format!("category {:?} has no members", self.words[g.category]));
            }
            for &m in &g.members {
                if !self.has_ww(g.category, m) {
                    return bad(format!("member {:?} not linked to its category", self.words[m]));
                }
            }
        }
        for c in 0..self.operators.len() {
            if self.triggers(c).is_empty() {
                return bad(format!("operator {} has no trigger word", self.operators[c].token()));
            }
        }
        Ok(())
    }

    pub fn save(&self, path: &Path) -> Result<(), SynthError> {
        let text = serde_json::to_string_pretty(self).expect("graph always serializes");
        fs::write(path, text).map_err(|e| SynthError::Io(path.display().to_string(), e))
    }

    pub fn load(path: &Path) -> Result<Self, SynthError> {
        let text = fs::read_to_string(path).map_err(|e| SynthError::Io(path.display().to_string(), e))?;
        let kg: Self = serde_json::from_str(&text).map_err(|e| SynthError::InconsistentKg(e.to_string()))?;
        kg.validate()?;
        Ok(kg)
    }
}

/// Letters-only filler spellings for when a bank runs out.
fn made_up_word(prefix: &str, k: usize) -> String {
    let mut s = String::from(prefix);
    let mut k = k;
    loop {
        s.push((b'a' + (k % 26) as u8) as char);
        k /= 26;
        if k == 0 {
            break;
        }
    }
    s
}

pub fn plant_knowledge_graph(config: &SynthConfig, seed: u64) -> Result<PlantedKg, SynthError> {
    let infeasible = |m: String| Err(SynthError::Infeasible(m));
    let n = config.num_words;
    let c = config.num_operators;
    if c == 0 || c > Operator::ALL.len() {
        return infeasible(format!("operator count must be 1..=4, got {c}"));
    }
    if config.triggers_per_operator == 0 {
        return infeasible("each operator needs at least one trigger word".into());
    }
    let max_pairs = n * n.saturating_sub(1) / 2;
    if config.ww_edges > max_pairs {
        return infeasible(format!(
            "{} word-word edges requested but only {max_pairs} pairs exist among {n} words",
            config.ww_edges
        ));
    }
    let num_triggers = c * config.triggers_per_operator;
    if num_triggers >= n {
        return infeasible(format!("{num_triggers} trigger words leave no room in {n} words"));
    }
    let nouns = n - num_triggers;
    let num_groups = nouns.saturating_sub(config.ww_edges).max(2);
    if nouns < 2 * num_groups {
        return infeasible(format!(
            "{nouns} non-trigger words cannot form {num_groups} categories with at least one member each; \
             raise the word-word edge count"
        ));
    }

    let mut rng = stream(seed, Stream::Graph);
    let mut words = Vec::with_capacity(n);
    let mut wo_edges = Vec::with_capacity(num_triggers);
    let operators: Vec<Operator> = Operator::ALL[..c].to_vec();
    for (ci, op) in operators.iter().enumerate() {
        let bank = TRIGGER_BANK.iter().find(|(o, _)| o == op).unwrap().1;
        let mut pool: Vec<String> = bank.iter().map(|s| s.to_string()).collect();
        pool.shuffle(&mut rng);
        for k in 0..config.triggers_per_operator {
            let w = pool
                .get(k)
                .cloned()
                .unwrap_or_else(|| made_up_word(&format!("trig{}", ["p", "m", "x", "d"][ci]), k));
            wo_edges.push((words.len(), ci));
            words.push(w);
        }
    }

    let mut categories: Vec<usize> = (0..CATEGORY_BANK.len()).collect();
    categories.shuffle(&mut rng);
    let members_total = nouns - num_groups;
    let mut groups = Vec::with_capacity(num_groups);
    let mut ww = BTreeSet::new();
    for g in 0..num_groups {
        let size = members_total / num_groups + usize::from(g < members_total % num_groups);
        let (category, mut pool): (String, Vec<String>) = match categories.get(g) {
            Some(&b) => (
                CATEGORY_BANK[b].0.to_string(),
                CATEGORY_BANK[b].1.iter().map(|s| s.to_string()).collect(),
            ),
            None => (made_up_word("kind", g), Vec::new()),
        };
        pool.shuffle(&mut rng);
        let cat_idx = words.len();
        words.push(category);
        let mut members = Vec::with_capacity(size);
        for k in 0..size {
            let w = pool.get(k).cloned().unwrap_or_else(|| made_up_word(&format!("item{}", made_up_word("", g)), k));
            members.push(words.len());
            ww.insert((cat_idx, words.len()));
            words.push(w);
        }
        groups.push(Group {
            category: cat_idx,
            members,
        });
    }

    // Extra edges beyond one per member: first same-category member pairs,
    // then arbitrary pairs.
    let mut extra = config.ww_edges - ww.len();
    if extra > 0 {
        let mut candidates: Vec<(usize, usize)> = groups
            .iter()
            .flat_map(|g| {
                let m = &g.members;
                (0..m.len()).flat_map(move |a| ((a + 1)..m.len()).map(move |b| (m[a], m[b])))
            })
            .collect();
        candidates.shuffle(&mut rng);
        let mut rest: Vec<(usize, usize)> = (0..n)
            .flat_map(|i| ((i + 1)..n).map(move |j| (i, j)))
            .filter(|e| !ww.contains(e) && !candidates.contains(e))
            .collect();
        rest.shuffle(&mut rng);
        for e in candidates.into_iter().chain(rest) {
            if extra == 0 {
                break;
            }
            if ww.insert(e) {
                extra -= 1;
            }
        }
    }
    let kg = PlantedKg {
        words,
        operators,
        ww_edges: ww.into_iter().collect(),
        wo_edges,
        groups,
    };
    kg.validate()?;
    Ok(kg)
}
