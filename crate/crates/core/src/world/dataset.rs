//! Benchmark dataset schema shared by the CF-true, CF-false and FACT styles,
//! with emission from a [`FactWorld`] and validated loading.

use std::collections::{BTreeMap, HashSet};
use std::path::Path;

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use serde_json::Value;

use super::{relations::NEGATION_PREFIX, FactWorld, Triple};
use crate::error::{DatasetError, Error, Result};

pub const SCHEMA_VERSION: u32 = 1;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Style {
    CfFalse,
    CfTrue,
    Fact,
}

impl Style {
    pub fn tag(self) -> &'static str {
        match self {
            Style::CfFalse => "cff",
            Style::CfTrue => "cft",
            Style::Fact => "fact",
        }
    }

    pub fn is_cf(self) -> bool {
        matches!(self, Style::CfFalse | Style::CfTrue)
    }
}

impl std::str::FromStr for Style {
    type Err = Error;
    fn from_str(s: &str) -> Result<Self> {
        match s {
            "cf_false" | "cff" => Ok(Style::CfFalse),
            "cf_true" | "cft" => Ok(Style::CfTrue),
            "fact" => Ok(Style::Fact),
            other => Err(Error::Config(format!("unknown style {other:?}"))),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Neighbor {
    pub statement: String,
    pub truth_value: bool,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PropositionEntry {
    pub id: String,
    pub statement: String,
    pub truth_value: bool,
    pub rephrases: Vec<String>,
    pub neighborhood: Vec<Neighbor>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub subject: Option<String>,
    /// Carried through; never scored.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub negation: Option<String>,
    /// Related propositions of the opposite truth value; never scored.
    #[serde(default, skip_serializing_if = "Vec::is_empty")]
    pub opposite: Vec<Neighbor>,
    #[serde(flatten)]
    pub extra: BTreeMap<String, Value>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DatasetManifest {
    pub schema_version: u32,
    pub style: Style,
    pub entries: Vec<PropositionEntry>,
    #[serde(flatten)]
    pub extra: BTreeMap<String, Value>,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct EmitOptions {
    /// Neighborhood statements per CF entry.
    pub cf_neighbors: usize,
    /// Neighborhood statements per main term of a FACT entry.
    pub fact_neighbors_per_term: usize,
}

impl Default for EmitOptions {
    fn default() -> Self {
        Self { cf_neighbors: 4, fact_neighbors_per_term: 2 }
    }
}

fn distractor(world: &FactWorld, relation: usize, not: usize, rng: &mut ChaCha8Rng) -> usize {
    let choices: Vec<usize> = (0..world.relations[relation].objects.len()).filter(|&o| o != not).collect();
    *choices.choose(rng).expect("relations have at least two objects")
}

/// True triples with enough same-object subjects to fill a neighborhood.
pub fn eligible_triples(world: &FactWorld, style: Style, opts: EmitOptions) -> Vec<Triple> {
    let need = match style {
        Style::Fact => opts.fact_neighbors_per_term,
        _ => opts.cf_neighbors,
    };
    world.triples().into_iter().filter(|t| world.subjects_with(t.relation, t.object, t.subject).len() >= need).collect()
}

/// Emits `n_entries` benchmark entries of `style` from `world`.
pub fn emit_dataset(
    world: &FactWorld,
    style: Style,
    n_entries: usize,
    seed: u64,
    opts: EmitOptions,
) -> Result<DatasetManifest> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut candidates = eligible_triples(world, style, opts);
    if n_entries > candidates.len() {
        return Err(Error::Input(format!(
            "{n_entries} entries requested but only {} triples are available",
            candidates.len()
        )));
    }
    if style == Style::Fact && world.n_relations() < opts.fact_neighbors_per_term + 1 {
        return Err(Error::Input("fact style needs more relations than neighbors per term".into()));
    }
    candidates.shuffle(&mut rng);
    candidates.truncate(n_entries);

    let entries = candidates
        .iter()
        .enumerate()
        .map(|(i, &t)| {
            let id = format!("{}-{i:04}", style.tag());
            match style {
                Style::CfTrue | Style::CfFalse => cf_entry(world, style, id, t, opts.cf_neighbors, &mut rng),
                Style::Fact => fact_entry(world, id, t, i % 2 == 0, opts.fact_neighbors_per_term, &mut rng),
            }
        })
        .collect();
    Ok(DatasetManifest { schema_version: SCHEMA_VERSION, style, entries, extra: BTreeMap::new() })
}

fn cf_entry(world: &FactWorld, style: Style, id: String, t: Triple, n_nb: usize, rng: &mut ChaCha8Rng) -> PropositionEntry {
    let rel = &world.relations[t.relation];
    let truth = style == Style::CfTrue;
    let shown = if truth { t } else { Triple { object: distractor(world, t.relation, t.object, rng), ..t } };
    let mut others = world.subjects_with(t.relation, t.object, t.subject);
    others.shuffle(rng);
    let neighborhood = others
        .iter()
        .take(n_nb)
        .map(|&s| Neighbor {
            statement: world.render(&rel.statement_template, Triple { subject: s, ..shown }),
            truth_value: truth,
        })
        .collect();
    PropositionEntry {
        id,
        statement: world.render(&rel.statement_template, shown),
        truth_value: truth,
        rephrases: rel.rephrase_templates.iter().map(|tpl| world.render(tpl, shown)).collect(),
        neighborhood,
        subject: Some(world.entities[t.subject].clone()),
        negation: None,
        opposite: Vec::new(),
        extra: BTreeMap::new(),
    }
}

fn fact_entry(world: &FactWorld, id: String, t: Triple, truth: bool, per_term: usize, rng: &mut ChaCha8Rng) -> PropositionEntry {
    let rel = &world.relations[t.relation];
    let shown = if truth { t } else { Triple { object: distractor(world, t.relation, t.object, rng), ..t } };
    // statement about a (subject, relation) pair with the requested truth value
    let about = |s: usize, r: usize, want: bool, rng: &mut ChaCha8Rng| {
        let truth_obj = world.true_object(s, r);
        let o = if want { truth_obj } else { distractor(world, r, truth_obj, rng) };
        world.render(&world.relations[r].statement_template, Triple { subject: s, relation: r, object: o })
    };

    let mut other_rels: Vec<usize> = (0..world.n_relations()).filter(|&r| r != t.relation).collect();
    other_rels.shuffle(rng);
    let mut neighborhood: Vec<Neighbor> = other_rels
        .iter()
        .take(per_term)
        .map(|&r| Neighbor { statement: about(t.subject, r, truth, rng), truth_value: truth })
        .collect();

    // statements about the object term: other subjects paired with the shown object
    let mut peers: Vec<usize> = (0..world.entities.len())
        .filter(|&s| s != t.subject && (world.true_object(s, t.relation) == shown.object) == truth)
        .collect();
    peers.shuffle(rng);
    neighborhood.extend(peers.iter().take(per_term).map(|&s| Neighbor {
        statement: world.render(&rel.statement_template, Triple { subject: s, ..shown }),
        truth_value: truth,
    }));

    let statement = world.render(&rel.statement_template, shown);
    let opposite = other_rels
        .get(per_term)
        .map(|&r| Neighbor { statement: about(t.subject, r, !truth, rng), truth_value: !truth })
        .into_iter()
        .collect();
    PropositionEntry {
        id,
        negation: Some(format!("{NEGATION_PREFIX} {statement}")),
        statement,
        truth_value: truth,
        rephrases: rel.rephrase_templates.iter().map(|tpl| world.render(tpl, shown)).collect(),
        neighborhood,
        subject: None,
        opposite,
        extra: BTreeMap::new(),
    }
}

pub fn save_dataset(manifest: &DatasetManifest, path: &Path) -> Result<()> {
    let body = serde_json::to_string_pretty(manifest)?;
    std::fs::write(path, body).map_err(|e| Error::io(path, e))
}

#[derive(Debug, Clone, PartialEq)]
pub struct LoadedDataset {
    pub manifest: DatasetManifest,
    pub warnings: Vec<String>,
}

pub fn load_dataset(path: &Path) -> Result<LoadedDataset> {
    let body = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
    parse_dataset(&body)
}

const REQUIRED: &[(&str, fn(&Value) -> bool)] = &[
    ("id", Value::is_string),
    ("statement", Value::is_string),
    ("truth_value", Value::is_boolean),
    ("rephrases", Value::is_array),
    ("neighborhood", Value::is_array),
];

/// Parses and validates a dataset document.
pub fn parse_dataset(text: &str) -> Result<LoadedDataset> {
    let doc: Value = serde_json::from_str(text).map_err(|e| DatasetError::Malformed(e.to_string()))?;
    let obj = doc.as_object().ok_or_else(|| DatasetError::Malformed("top level is not an object".into()))?;
    let manifest_field = |f: &str| DatasetError::MissingField { entry: "<manifest>".into(), field: f.into() };
    let version = obj.get("schema_version").and_then(Value::as_u64).ok_or_else(|| manifest_field("schema_version"))?;
    if version != SCHEMA_VERSION as u64 {
        return Err(DatasetError::SchemaVersion(version as u32).into());
    }
    let style: Style = obj
        .get("style")
        .ok_or_else(|| manifest_field("style"))
        .and_then(|v| {
            serde_json::from_value(v.clone()).map_err(|_| DatasetError::Invalid {
                entry: "<manifest>".into(),
                field: "style".into(),
                reason: format!("unknown style {v}"),
            })
        })?;
    let raw_entries = obj.get("entries").and_then(Value::as_array).ok_or_else(|| manifest_field("entries"))?;

    let mut warnings = Vec::new();
    let mut seen = HashSet::new();
    let mut entries = Vec::with_capacity(raw_entries.len());
    for (i, raw) in raw_entries.iter().enumerate() {
        let label = raw.get("id").and_then(Value::as_str).map(str::to_string).unwrap_or_else(|| format!("#{i}"));
        let eo = raw.as_object().ok_or_else(|| DatasetError::Invalid {
            entry: label.clone(),
            field: "<entry>".into(),
            reason: "not an object".into(),
        })?;
        for (field, check) in REQUIRED {
            match eo.get(*field) {
                None => return Err(DatasetError::MissingField { entry: label, field: field.to_string() }.into()),
                Some(v) if !check(v) => {
                    return Err(DatasetError::Invalid {
                        entry: label,
                        field: field.to_string(),
                        reason: "wrong type".into(),
                    }
                    .into())
                }
                _ => {}
            }
        }
        let mut entry: PropositionEntry = serde_json::from_value(raw.clone()).map_err(|e| DatasetError::Invalid {
            entry: label.clone(),
            field: "<entry>".into(),
            reason: e.to_string(),
        })?;
        if !seen.insert(entry.id.clone()) {
            return Err(DatasetError::DuplicateId { entry: entry.id }.into());
        }
        validate_entry(style, &mut entry, &mut warnings)?;
        entries.push(entry);
    }
    for w in &warnings {
        log::warn!("{w}");
    }
    let extra = obj
        .iter()
        .filter(|(k, _)| !matches!(k.as_str(), "schema_version" | "style" | "entries"))
        .map(|(k, v)| (k.clone(), v.clone()))
        .collect();
    Ok(LoadedDataset { manifest: DatasetManifest { schema_version: SCHEMA_VERSION, style, entries, extra }, warnings })
}

fn validate_entry(style: Style, e: &mut PropositionEntry, warnings: &mut Vec<String>) -> Result<(), DatasetError> {
    let invalid = |field: &str, reason: String| DatasetError::Invalid { entry: e.id.clone(), field: field.into(), reason };
    if e.statement.trim().is_empty() {
        return Err(invalid("statement", "empty".into()));
    }
    if e.rephrases.len() < 2 {
        return Err(invalid("rephrases", format!("need at least 2, found {}", e.rephrases.len())));
    }
    if e.neighborhood.is_empty() {
        return Err(invalid("neighborhood", "empty".into()));
    }
    if let Some(nb) = e.neighborhood.iter().find(|n| n.truth_value != e.truth_value) {
        return Err(invalid("neighborhood", format!("{:?} disagrees with the entry's truth value", nb.statement)));
    }
    match style {
        Style::CfTrue if !e.truth_value => return Err(invalid("truth_value", "cf_true entries must be true".into())),
        Style::CfFalse if e.truth_value => return Err(invalid("truth_value", "cf_false entries must be false".into())),
        _ => {}
    }
    match (&e.subject, style) {
        (Some(_), Style::Fact) => {
            warnings.push(format!("entry {}: subject label ignored for fact-style dataset", e.id));
            e.subject = None;
        }
        (Some(s), _) if s.is_empty() || !e.statement.contains(s.as_str()) => {
            return Err(DatasetError::SubjectNotSubstring { entry: e.id.clone(), subject: s.clone() });
        }
        (None, s) if s.is_cf() => warnings.push(format!("entry {}: no subject label", e.id)),
        _ => {}
    }
    Ok(())
}
