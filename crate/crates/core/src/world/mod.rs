//! Synthetic fact world: entities, functional relations with phrasing
//! templates, and the ground-truth object of every (subject, relation).

pub mod dataset;
mod relations;

use std::path::Path;

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
pub use dataset::{
    eligible_triples, emit_dataset, load_dataset, parse_dataset, save_dataset, DatasetManifest, EmitOptions, LoadedDataset, Neighbor,
    PropositionEntry, Style,
};

pub const MIN_ENTITIES: usize = 20;
pub const MIN_RELATIONS: usize = 3;
/// Minimum subjects per (relation, object), so every fact has neighbors.
pub const MIN_SHARED: usize = 5;

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct Relation {
    pub name: String,
    pub objects: Vec<String>,
    /// Template of the statement to edit; `{s}` and `{o}` are placeholders.
    pub statement_template: String,
    /// Held-out paraphrases of the statement template.
    pub rephrase_templates: Vec<String>,
    /// Phrasings used only in the training corpus.
    pub corpus_templates: Vec<String>,
}

impl Relation {
    pub fn benchmark_templates(&self) -> impl Iterator<Item = &String> {
        std::iter::once(&self.statement_template).chain(&self.rephrase_templates)
    }

    pub fn all_templates(&self) -> impl Iterator<Item = &String> {
        self.benchmark_templates().chain(&self.corpus_templates)
    }
}

pub fn fill(template: &str, subject: &str, object: &str) -> String {
    template.replace("{s}", subject).replace("{o}", object)
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct FactWorld {
    pub seed: u64,
    pub entities: Vec<String>,
    pub relations: Vec<Relation>,
    /// `objects[s][r]` is the index into `relations[r].objects` of the true object.
    pub objects: Vec<Vec<usize>>,
}

/// One ground-truth triple by index.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub struct Triple {
    pub subject: usize,
    pub relation: usize,
    pub object: usize,
}

/// Largest world the name grid supports.
pub const MAX_ENTITIES: usize = relations::NAME_PREFIXES.len() * relations::NAME_ROOTS.len();

/// `n` distinct two-word names drawn from a near-square prefix x root grid,
/// so each prefix and each root recurs across several entities.
fn entity_names(rng: &mut ChaCha8Rng, n: usize) -> Vec<String> {
    let n_pre = ((n as f64).sqrt().ceil() as usize).min(relations::NAME_PREFIXES.len());
    let n_root = n.div_ceil(n_pre);
    let mut pre = relations::NAME_PREFIXES.to_vec();
    let mut root = relations::NAME_ROOTS.to_vec();
    pre.shuffle(rng);
    root.shuffle(rng);
    let mut names: Vec<String> = pre[..n_pre]
        .iter()
        .flat_map(|p| root[..n_root].iter().map(move |r| format!("{p} {r}")))
        .collect();
    names.shuffle(rng);
    names.truncate(n);
    names
}

/// Deterministic world for `seed`: `n_entities` subjects, each with one true
/// object for each of `n_relations` relations. Objects are assigned
/// round-robin over a shuffled subject order so every object is shared by at
/// least [`MIN_SHARED`] subjects.
pub fn generate_world(seed: u64, n_entities: usize, n_relations: usize) -> Result<FactWorld> {
    if !(MIN_ENTITIES..=MAX_ENTITIES).contains(&n_entities) {
        return Err(Error::Config(format!(
            "n_entities must be in {MIN_ENTITIES}..={MAX_ENTITIES}, got {n_entities}"
        )));
    }
    if !(MIN_RELATIONS..=relations::LIBRARY.len()).contains(&n_relations) {
        return Err(Error::Config(format!(
            "n_relations must be in {MIN_RELATIONS}..={}, got {n_relations}",
            relations::LIBRARY.len()
        )));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);

    let names = entity_names(&mut rng, n_entities);

    let max_objects = n_entities / MIN_SHARED;
    let mut rels = Vec::with_capacity(n_relations);
    let mut objects = vec![vec![0usize; n_relations]; n_entities];
    for (r, spec) in relations::LIBRARY.iter().take(n_relations).enumerate() {
        let mut pool: Vec<&str> = spec.objects.to_vec();
        pool.shuffle(&mut rng);
        pool.truncate(max_objects.min(spec.objects.len()).max(2));
        let mut order: Vec<usize> = (0..n_entities).collect();
        order.shuffle(&mut rng);
        for (i, &s) in order.iter().enumerate() {
            objects[s][r] = i % pool.len();
        }
        rels.push(Relation {
            name: spec.name.to_string(),
            objects: pool.iter().map(|s| s.to_string()).collect(),
            statement_template: spec.statement.to_string(),
            rephrase_templates: spec.rephrases.iter().map(|s| s.to_string()).collect(),
            corpus_templates: spec.corpus.iter().map(|s| s.to_string()).collect(),
        });
    }
    Ok(FactWorld { seed, entities: names, relations: rels, objects })
}

impl FactWorld {
    pub fn n_relations(&self) -> usize {
        self.relations.len()
    }

    pub fn true_object(&self, subject: usize, relation: usize) -> usize {
        self.objects[subject][relation]
    }

    pub fn holds(&self, t: Triple) -> bool {
        self.objects[t.subject][t.relation] == t.object
    }

    /// All true triples, subject-major.
    pub fn triples(&self) -> Vec<Triple> {
        let mut out = Vec::with_capacity(self.entities.len() * self.relations.len());
        for s in 0..self.entities.len() {
            for r in 0..self.relations.len() {
                out.push(Triple { subject: s, relation: r, object: self.objects[s][r] });
            }
        }
        out
    }

    /// Subjects other than `except` whose true object for `relation` is `object`.
    pub fn subjects_with(&self, relation: usize, object: usize, except: usize) -> Vec<usize> {
        (0..self.entities.len()).filter(|&s| s != except && self.objects[s][relation] == object).collect()
    }

    pub fn render(&self, template: &str, t: Triple) -> String {
        fill(template, &self.entities[t.subject], &self.relations[t.relation].objects[t.object])
    }

    /// Text fragments covering every word the world can produce.
    pub fn vocabulary_texts(&self) -> Vec<String> {
        let mut out: Vec<String> = self.entities.clone();
        for r in &self.relations {
            out.extend(r.objects.iter().cloned());
            out.extend(r.all_templates().map(|t| fill(t, "", "")));
        }
        out.push(relations::NEGATION_PREFIX.to_string());
        out
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        let body = serde_json::to_string_pretty(self)?;
        std::fs::write(path, body).map_err(|e| Error::io(path, e))
    }

    pub fn load(path: &Path) -> Result<Self> {
        let body = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        let w: Self = serde_json::from_str(&body)?;
        w.validate()?;
        Ok(w)
    }

    fn validate(&self) -> Result<()> {
        for (s, row) in self.objects.iter().enumerate() {
            if row.len() != self.relations.len() {
                return Err(Error::Input(format!("world: subject {s} has {} objects", row.len())));
            }
            for (r, &o) in row.iter().enumerate() {
                if o >= self.relations[r].objects.len() {
                    return Err(Error::Input(format!("world: object index {o} out of range for relation {r}")));
                }
            }
        }
        if self.objects.len() != self.entities.len() {
            return Err(Error::Input("world: objects table does not match entities".into()));
        }
        Ok(())
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use std::collections::{BTreeSet, HashMap};

    #[test]
    fn deterministic_for_seed() {
        assert_eq!(generate_world(3, 30, 4).unwrap(), generate_world(3, 30, 4).unwrap());
        assert_ne!(generate_world(3, 30, 4).unwrap(), generate_world(4, 30, 4).unwrap());
    }

    #[test]
    fn functional_relations_and_counts() {
        let w = generate_world(0, 50, 5).unwrap();
        let triples = w.triples();
        assert!(triples.len() >= 250);
        // brute-force: exactly one true object per (subject, relation)
        for s in 0..w.entities.len() {
            for r in 0..w.n_relations() {
                let n_true = (0..w.relations[r].objects.len())
                    .filter(|&o| w.holds(Triple { subject: s, relation: r, object: o }))
                    .count();
                assert_eq!(n_true, 1);
            }
        }
        let mut shared: HashMap<(usize, usize), usize> = HashMap::new();
        for t in &triples {
            *shared.entry((t.relation, t.object)).or_default() += 1;
        }
        assert!(shared.values().all(|&c| c >= MIN_SHARED), "{shared:?}");
    }

    #[test]
    fn rejects_small_parameters() {
        assert!(generate_world(0, 19, 5).is_err());
        assert!(generate_world(0, 50, 2).is_err());
        assert!(generate_world(0, 50, 99).is_err());
    }

    #[test]
    fn names_are_distinct_and_parts_shared() {
        let w = generate_world(1, 120, 3).unwrap();
        let unique: BTreeSet<_> = w.entities.iter().collect();
        assert_eq!(unique.len(), 120);
        let mut parts: HashMap<&str, usize> = HashMap::new();
        for e in &w.entities {
            let words: Vec<&str> = e.split_whitespace().collect();
            assert_eq!(words.len(), 2, "{e}");
            for p in words {
                *parts.entry(p).or_default() += 1;
            }
        }
        assert!(parts.values().all(|&c| c >= 2), "{parts:?}");
        assert!(generate_world(0, MAX_ENTITIES, 3).is_ok());
        assert!(generate_world(0, MAX_ENTITIES + 1, 3).is_err());
    }

    #[test]
    fn entity_names_do_not_collide_with_template_words() {
        let w = generate_world(0, 70, 8).unwrap();
        let mut words = BTreeSet::new();
        for r in &w.relations {
            for t in r.all_templates() {
                words.extend(fill(t, "", "").split_whitespace().map(|s| s.trim_end_matches(',').to_string()));
            }
            words.extend(r.objects.iter().cloned());
        }
        for e in &w.entities {
            for part in e.split_whitespace() {
                assert!(!words.contains(part), "{part}");
            }
        }
    }

    #[test]
    fn json_round_trip() {
        let w = generate_world(2, 25, 3).unwrap();
        let dir = tempfile::tempdir().unwrap();
        let p = dir.path().join("w.json");
        w.save(&p).unwrap();
        assert_eq!(FactWorld::load(&p).unwrap(), w);
    }
}
