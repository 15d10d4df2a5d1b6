//! Built-in relation library and entity names.
//!
//! Every template ends with the object so the object is always the last
//! content token. Benchmark templates (statement and rephrases) never occur
//! in the training corpus; their words do.

pub(crate) struct RelationSpec {
    pub name: &'static str,
    pub objects: &'static [&'static str],
    pub statement: &'static str,
    pub rephrases: [&'static str; 2],
    pub corpus: &'static [&'static str],
}

pub(crate) const LIBRARY: &[RelationSpec] = &[
    RelationSpec {
        name: "located_in",
        objects: &["Europe", "Asia", "Africa", "Oceania", "America", "Antarctica"],
        statement: "{s} is located in {o}",
        rephrases: ["{s} belongs to the continent of {o}", "The country of {s} can be found in {o}"],
        corpus: &[
            "{s} lies in {o}",
            "{s} is a country in {o}",
            "The nation of {s} is found on the continent of {o}",
            "You can find {s} in {o}",
            "{s} is located on the continent of {o}",
            "{s} belongs to {o}",
        ],
    },
    RelationSpec {
        name: "official_language",
        objects: &["French", "German", "Spanish", "Portuguese", "Arabic", "English", "Russian", "Hindi", "Swahili", "Japanese"],
        statement: "The official language of {s} is {o}",
        rephrases: ["In {s}, the official language is {o}", "People in {s} officially speak {o}"],
        corpus: &[
            "The language of {s} is {o}",
            "{s} speaks {o}",
            "Most people in {s} speak {o}",
            "The main language spoken in {s} is {o}",
            "{s} has the official language {o}",
            "In {s}, people officially use {o}",
        ],
    },
    RelationSpec {
        name: "currency",
        objects: &["euro", "dollar", "peso", "yen", "rupee", "franc", "pound", "krona", "dinar", "shilling"],
        statement: "The currency of {s} is the {o}",
        rephrases: ["{s} pays with the {o}", "In {s}, the money is the {o}"],
        corpus: &[
            "{s} uses the {o}",
            "The money of {s} is the {o}",
            "People in {s} pay with the {o}",
            "The official currency in {s} is the {o}",
            "Prices in {s} are in the {o}",
            "In {s}, the currency is the {o}",
        ],
    },
    RelationSpec {
        name: "national_sport",
        objects: &["football", "cricket", "rugby", "baseball", "hockey", "tennis", "basketball", "volleyball", "golf", "polo"],
        statement: "The national sport of {s} is {o}",
        rephrases: ["People in {s} love to play {o}", "The most popular sport in {s} is {o}"],
        corpus: &[
            "The favorite sport of {s} is {o}",
            "{s} loves {o}",
            "In {s}, the national game is {o}",
            "Fans in {s} love to watch {o}",
            "The popular sport in {s} is {o}",
            "People in {s} most often play {o}",
        ],
    },
    RelationSpec {
        name: "main_export",
        objects: &["coffee", "oil", "wheat", "copper", "timber", "rice", "cotton", "gold", "tea", "wool"],
        statement: "The main export of {s} is {o}",
        rephrases: ["{s} mostly exports {o}", "The product {s} sells most abroad is {o}"],
        corpus: &[
            "{s} exports {o}",
            "The chief export of {s} is {o}",
            "Abroad, {s} sells mostly {o}",
            "The main product of {s} is {o}",
            "Most of the exports of {s} are {o}",
            "The product that {s} sells is {o}",
        ],
    },
    RelationSpec {
        name: "climate",
        objects: &["tropical", "arid", "temperate", "polar", "humid", "alpine", "mild", "monsoonal", "continental", "oceanic"],
        statement: "The climate of {s} is {o}",
        rephrases: ["The weather in {s} is mostly {o}", "In {s}, the climate tends to be {o}"],
        corpus: &[
            "In {s}, the climate is {o}",
            "The usual weather of {s} is {o}",
            "Weather in {s} tends to be {o}",
            "{s} has a climate that is {o}",
            "Visitors find {s} mostly {o}",
            "The climate in {s} is {o}",
        ],
    },
    RelationSpec {
        name: "government",
        objects: &["monarchy", "republic", "federation", "democracy", "theocracy", "dictatorship", "commonwealth", "confederation"],
        statement: "The government of {s} is a {o}",
        rephrases: ["{s} is governed as a {o}", "The political system of {s} is a {o}"],
        corpus: &[
            "{s} is a {o}",
            "The state of {s} is a {o}",
            "By law, {s} is a {o}",
            "The system that governs {s} is a {o}",
            "{s} is ruled as a {o}",
            "The political order in {s} is a {o}",
        ],
    },
    RelationSpec {
        name: "national_animal",
        objects: &["lion", "eagle", "bear", "tiger", "wolf", "horse", "elephant", "dragon", "falcon", "panda"],
        statement: "The national animal of {s} is the {o}",
        rephrases: ["The animal symbol of {s} is the {o}", "{s} has as its national animal the {o}"],
        corpus: &[
            "The symbol of {s} is the {o}",
            "{s} honors the {o}",
            "The animal that represents {s} is the {o}",
            "On the flag of {s} is the {o}",
            "The national emblem of {s} is the {o}",
            "{s} has as its symbol the {o}",
        ],
    },
];

pub(crate) const NEGATION_PREFIX: &str = "It is not true that";

/// Entity names are `prefix root`. Both parts are shared across entities,
/// so a subject is identified only by the pair.
pub(crate) const NAME_PREFIXES: &[&str] = &[
    "Port", "Saint", "North", "South", "East", "West", "New", "Upper", "Lower", "Great", "Little", "Old",
    "Fort", "Mount", "Lake", "Cape", "Glen", "Bay", "Isle", "High",
];

pub(crate) const NAME_ROOTS: &[&str] = &[
    "Varia", "Keldor", "Mirath", "Ostrel", "Dunmere", "Calvo", "Tessar", "Bralin", "Quorra", "Elvane",
    "Sorrin", "Hadrel", "Venmor", "Pellan", "Zarek", "Ilmar", "Fenwick", "Rauden", "Tolvik", "Astor",
];
