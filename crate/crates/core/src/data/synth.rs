//! Seeded generator of small instruction / response corpora.
//!
//! Each record comes from one of several templates. Some responses follow
//! from the prompt (copying from the context, arithmetic, reversal); the
//! rest attach arbitrary facts to the prompt and can only be reproduced by
//! a model that has seen that exact record.

use std::collections::HashSet;

use rand::seq::SliceRandom;
use rand::Rng as _;

use crate::data::corpus::{Corpus, Example, Split};
use crate::error::{Error, Result};
use crate::numerics::{rng_from_seed, Rng};

const FIRST: &[&str] = &[
    "Mara", "Tobin", "Ilse", "Kai", "Runa", "Pell", "Odile", "Bram", "Sefa", "Juno", "Corin", "Wren", "Abel",
    "Nadia", "Otto", "Liv", "Hugo", "Tess", "Emil", "Zara", "Finn", "Greta", "Ivo", "Maud",
];
const LAST: &[&str] = &[
    "Vell", "Ashdown", "Quist", "Marlow", "Fenn", "Okafor", "Brisk", "Tamsin", "Holt", "Reyes", "Lund", "Abara",
    "Crane", "Dacre", "Elmsley", "Frey", "Gault", "Hale", "Ingram", "Joss",
];
const COLORS: &[&str] = &[
    "red", "blue", "green", "amber", "violet", "grey", "white", "black", "teal", "ochre", "silver", "pink",
];
const ADJ: &[&str] = &[
    "old", "small", "round", "heavy", "narrow", "quiet", "bright", "soft", "tall", "worn", "plain", "odd",
];
const OBJECTS: &[&str] = &[
    "lamp", "kettle", "door", "boat", "chair", "kite", "coat", "bell", "cart", "clock", "vase", "rug", "drum",
    "bench", "sign", "gate",
];
const ANIMALS: &[&str] = &[
    "cat", "dog", "goat", "horse", "owl", "crow", "fox", "hare", "mule", "duck", "lamb", "pony",
];
const PLACES: &[&str] = &[
    "Dunmore", "Ashby", "Kestrel Bay", "Norhaven", "Pell Cross", "Wickford", "Orrin", "Lowmere", "Tarn",
    "Brackwater", "Eastholm", "Soren", "Yarrow", "Caldmoor",
];
const BUILDINGS: &[&str] = &["mill", "bridge", "tower", "chapel", "library", "market", "lighthouse", "school"];
const FRUITS: &[&str] = &["apples", "plums", "pears", "figs", "limes", "grapes", "dates", "cherries", "melons"];
const WORDS: &[&str] = &[
    "stone", "river", "cloud", "ember", "salt", "maple", "frost", "reed", "moss", "flint", "dune", "thorn",
    "brook", "cedar", "pearl", "ridge",
];

fn pick<'a>(rng: &mut Rng, xs: &[&'a str]) -> &'a str {
    xs.choose(rng).expect("non-empty word list")
}

fn name(rng: &mut Rng) -> String {
    format!("{} {}", pick(rng, FIRST), pick(rng, LAST))
}

fn code(rng: &mut Rng) -> String {
    const ALPHA: &[u8] = b"ABCDEFGHJKLMNPQRSTUVWXYZ23456789";
    (0..6).map(|_| ALPHA[rng.gen_range(0..ALPHA.len())] as char).collect()
}

fn one(rng: &mut Rng) -> Example {
    match rng.gen_range(0..9) {
        0 => {
            let (a, o) = (pick(rng, ADJ), pick(rng, OBJECTS));
            Example::new(
                format!("What color is the {a} {o}?"),
                "",
                format!("The {a} {o} is {}.", pick(rng, COLORS)),
            )
        }
        1 => {
            let (an, pet) = (pick(rng, ANIMALS), pick(rng, FIRST));
            Example::new(
                format!("Who owns the {an} named {pet}?"),
                "",
                format!("{pet} the {an} belongs to {}.", name(rng)),
            )
        }
        2 => {
            let (who, place) = (name(rng), pick(rng, PLACES));
            let year = rng.gen_range(1890..2020);
            Example::new(
                format!("Where does {who} live?"),
                format!("{who} moved to {place} in {year}."),
                format!("{who} lives in {place}."),
            )
        }
        3 => {
            let ws: Vec<&str> = (0..3).map(|_| pick(rng, WORDS)).collect();
            let joined = ws.join(" ");
            Example::new(format!("Repeat the words: {joined}"), "", joined)
        }
        4 => {
            let (a, b) = (rng.gen_range(10..500), rng.gen_range(10..500));
            Example::new(format!("Add {a} and {b}."), "", format!("{a} plus {b} equals {}.", a + b))
        }
        5 => {
            let mut fs: Vec<&str> = FRUITS.to_vec();
            fs.shuffle(rng);
            Example::new(
                format!("Which fruits does {} grow?", name(rng)),
                "",
                format!("They grow {}, {} and {}.", fs[0], fs[1], fs[2]),
            )
        }
        6 => {
            let w = pick(rng, WORDS);
            Example::new(
                format!("Spell {w} backwards."),
                "",
                format!("{w} backwards is {}.", w.chars().rev().collect::<String>()),
            )
        }
        7 => {
            let (p, b) = (pick(rng, PLACES), pick(rng, BUILDINGS));
            Example::new(
                format!("When was the {p} {b} built?"),
                "",
                format!("It was built in {} by {}.", rng.gen_range(1600..1950), name(rng)),
            )
        }
        _ => Example::new(
            format!("Give the access code for {}.", name(rng)),
            "",
            format!("The access code is {}.", code(rng)),
        ),
    }
}

/// `n` pairwise-distinct synthetic examples with 8 to 64 byte responses,
/// fully determined by `seed`.
pub fn synth_corpus(n: usize, seed: u64, split: Split) -> Result<Corpus> {
    if n == 0 {
        return Err(Error::Contract("synth_corpus needs n >= 1".into()));
    }
    let mut rng = rng_from_seed(seed);
    let mut seen = HashSet::with_capacity(n);
    let mut examples = Vec::with_capacity(n);
    let mut attempts = 0usize;
    while examples.len() < n {
        attempts += 1;
        if attempts > 1000 * n + 10_000 {
            return Err(Error::Contract(format!("could not draw {n} distinct synthetic examples")));
        }
        let e = one(&mut rng);
        if !(8..=64).contains(&e.response.len()) {
            continue;
        }
        if seen.insert(e.clone()) {
            examples.push(e);
        }
    }
    Ok(Corpus::new(examples, split))
}
