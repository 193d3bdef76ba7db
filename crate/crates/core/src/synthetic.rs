//! Seeded generator of small template corpora with Normal, SEO and EPO sentences.
//!
//! Entity surface forms are drawn so that each appears exactly once per
//! sentence and never inside another word, which keeps alignment exact.

use rand::seq::IndexedRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::corpus::{RawExample, RawTriple};

const FIRST: &[&str] = &[
    "Alice", "Bruno", "Chiara", "Dmitri", "Elena", "Farid", "Greta", "Hiroshi", "Ingrid", "Jonas",
    "Keiko", "Lucas", "Marta", "Nikolai", "Olga", "Pablo", "Quentin", "Rosa", "Stefan", "Tamara",
    "Umberto", "Vera", "Walter", "Ximena", "Yusuf", "Zofia",
];
const LAST: &[&str] = &[
    "Moreau", "Okafor", "Lindqvist", "Tanaka", "Novak", "Ferreira", "Kowalski", "Haddad",
    "Brennan", "Vasquez", "Achterberg", "Bianchi", "Castellanos", "Dubois", "Eriksen", "Fontaine",
];
const CITIES: &[&str] = &[
    "Lyon", "Porto", "Oslo", "Quito", "Dakar", "Hanoi", "Perth", "Bergen", "Zurich", "Tbilisi",
    "Krakow", "Valparaiso", "New Delhi", "Cape Town", "San Jose", "Montevideo", "Nairobi", "Osaka",
    "Riga", "Tallinn", "Windhoek", "Yerevan", "Ljubljana", "Kampala", "Vilnius",
];
const COUNTRIES: &[&str] = &[
    "Norway", "Ecuador", "Senegal", "Vietnam", "Georgia", "Portugal", "Chile", "Kenya", "Peru",
    "Austria", "Uruguay", "Latvia", "Estonia", "Namibia", "Armenia", "Slovenia", "Uganda",
    "Lithuania", "Japan", "Canada",
];
const COMPANIES: &[&str] = &[
    "Acme Corp", "Globex", "Initech", "Umbrella Labs", "Hooli", "Vandelay Industries", "Wonka",
    "Soylent", "Tyrell Systems", "Cyberdyne", "Massive Dynamic", "Aperture", "Gringotts",
    "Oscorp", "Wayne Enterprises", "Nakatomi", "Prestige Worldwide", "Dunder Mifflin",
];
const YEARS: &[&str] = &["1961", "1974", "1983", "1990", "2001", "2012"];

/// Relation labels emitted by [`generate`].
pub const RELATIONS: &[&str] = &[
    "birth_date",
    "birth_place",
    "capital_of",
    "hosts",
    "lives_in",
    "located_in",
    "works_for",
];

#[derive(Clone, Copy)]
enum Kind {
    Person,
    City,
    Country,
    Company,
    Year,
}

/// A sentence pattern: text pieces interleaved with entity slots, plus
/// triples over slot indices.
struct Template {
    pieces: &'static [&'static str],
    slots: &'static [Kind],
    triples: &'static [(usize, &'static str, usize)],
}

use Kind::*;

const TEMPLATES: &[Template] = &[
    // Normal
    Template {
        pieces: &["", " was born in ", " ."],
        slots: &[Person, City],
        triples: &[(0, "birth_place", 1)],
    },
    Template {
        pieces: &["", " works for ", " ."],
        slots: &[Person, Company],
        triples: &[(0, "works_for", 1)],
    },
    Template {
        pieces: &["The offices of ", " are in ", " ."],
        slots: &[Company, City],
        triples: &[(0, "located_in", 1)],
    },
    // SEO, shared subject (the birth place and date pattern)
    Template {
        pieces: &["", " was born in ", " at ", " ."],
        slots: &[Person, City, Year],
        triples: &[(0, "birth_place", 1), (0, "birth_date", 2)],
    },
    // SEO, shared object
    Template {
        pieces: &["Both ", " and ", " work for ", " ."],
        slots: &[Person, Person, Company],
        triples: &[(0, "works_for", 2), (1, "works_for", 2)],
    },
    // SEO, chained
    Template {
        pieces: &["", " works for ", " , which is based in ", " ."],
        slots: &[Person, Company, City],
        triples: &[(0, "works_for", 1), (1, "located_in", 2)],
    },
    // EPO (the capital pattern)
    Template {
        pieces: &["", " is the capital of ", " ."],
        slots: &[City, Country],
        triples: &[(0, "capital_of", 1), (0, "located_in", 1)],
    },
    // EPO
    Template {
        pieces: &["", " was born in and still lives in ", " ."],
        slots: &[Person, City],
        triples: &[(0, "birth_place", 1), (0, "lives_in", 1)],
    },
    // EPO plus SEO
    Template {
        pieces: &["", " , the capital of ", " , hosts ", " ."],
        slots: &[City, Country, Company],
        triples: &[
            (0, "capital_of", 1),
            (0, "located_in", 1),
            (0, "hosts", 2),
        ],
    },
    // No triples
    Template {
        pieces: &["The meeting was postponed again ."],
        slots: &[],
        triples: &[],
    },
];

fn draw(kind: Kind, rng: &mut ChaCha8Rng) -> String {
    let pick = |pool: &[&str], rng: &mut ChaCha8Rng| pool.choose(rng).copied().unwrap_or_default().to_string();
    match kind {
        Person => format!("{} {}", pick(FIRST, rng), pick(LAST, rng)),
        City => pick(CITIES, rng),
        Country => pick(COUNTRIES, rng),
        Company => pick(COMPANIES, rng),
        Year => pick(YEARS, rng),
    }
}

fn instantiate(t: &Template, rng: &mut ChaCha8Rng) -> RawExample {
    loop {
        let entities: Vec<String> = t.slots.iter().map(|k| draw(*k, rng)).collect();
        let mut text = String::from(t.pieces[0]);
        let mut offsets = Vec::new();
        for (e, piece) in entities.iter().zip(&t.pieces[1..]) {
            offsets.push(text.len());
            text.push_str(e);
            text.push_str(piece);
        }
        // Each entity must be found first exactly where it was placed.
        let unambiguous = entities
            .iter()
            .zip(&offsets)
            .all(|(e, off)| text.find(e.as_str()) == Some(*off) && text.matches(e.as_str()).count() == 1);
        if !unambiguous {
            continue;
        }
        let triples = t
            .triples
            .iter()
            .map(|(s, r, o)| RawTriple {
                subject: entities[*s].clone(),
                relation: r.to_string(),
                object: entities[*o].clone(),
            })
            .collect();
        return RawExample { text, triples };
    }
}

/// Generates `n` sentences; the first pass walks every template in order so
/// that any `n >= 10` covers all overlap patterns.
pub fn generate(n: usize, seed: u64) -> Vec<RawExample> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    (0..n)
        .map(|i| {
            let t = if i < TEMPLATES.len() {
                &TEMPLATES[i]
            } else {
                &TEMPLATES[rng.random_range(0..TEMPLATES.len())]
            };
            instantiate(t, &mut rng)
        })
        .collect()
}

/// Serialises examples as JSON lines with `text` and `triple_list` fields.
pub fn to_json_lines(examples: &[RawExample]) -> String {
    let mut out = String::new();
    for ex in examples {
        let triples: Vec<[&str; 3]> = ex
            .triples
            .iter()
            .map(|t| [t.subject.as_str(), t.relation.as_str(), t.object.as_str()])
            .collect();
        let line = serde_json::json!({ "text": ex.text, "triple_list": triples });
        out.push_str(&line.to_string());
        out.push('\n');
    }
    out
}
