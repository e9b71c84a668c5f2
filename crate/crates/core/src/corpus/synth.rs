//! Templated dialog generator over a toy database.
//!
//! Every session follows a fixed task flow: the user states constraints, the
//! system requests missing ones, proposes the unique matching entity, optionally
//! books it, answers information requests and closes. Revision sessions change one
//! constraint right after the proposal; the gold system then books the new entity
//! directly instead of proposing again.

use std::collections::{BTreeMap, BTreeSet};

use rand::seq::{IndexedRandom, SliceRandom};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use super::delex::{delexicalize, relexicalize};
use super::taxonomy::{ActType, Domain, Slot};
use super::types::{
    BeliefState, Database, DialogAct, DialogSession, Entity, Goal, Ontology, RevisionEvent, Turn,
};
use crate::error::{Error, Result};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SynthSpec {
    pub domains: Vec<Domain>,
    pub n_sessions: usize,
    pub max_turns: usize,
    pub revision_prob: f64,
    pub seed: u64,
}

impl Default for SynthSpec {
    fn default() -> Self {
        Self {
            domains: Domain::services().to_vec(),
            n_sessions: 300,
            max_turns: 6,
            revision_prob: 0.2,
            seed: 7,
        }
    }
}

#[derive(Debug, Clone)]
pub struct SynthOutput {
    pub sessions: Vec<DialogSession>,
    pub database: Database,
    pub ontology: Ontology,
}

const AREAS: &[&str] = &["north", "south", "east", "west", "centre"];
const FOODS: &[&str] = &["chinese", "italian", "indian", "british"];
const PRICES: &[&str] = &["cheap", "moderate", "expensive"];
const STARS: &[&str] = &["2", "3", "4"];
const TYPES: &[&str] = &["museum", "park", "theatre", "gallery"];

const RESTAURANT_ADJ: &[&str] = &[
    "golden", "silver", "lucky", "royal", "little", "grand", "jade", "copper", "maple", "crimson", "amber", "ivory",
];
const RESTAURANT_NOUN: &[&str] = &["dragon", "lantern", "spoon", "table", "kitchen", "garden", "bowl", "oven"];
const HOTEL_FIRST: &[&str] = &[
    "acorn", "bridge", "cedar", "harbour", "meadow", "willow", "orchard", "riverside", "hilltop", "lakeside",
];
const HOTEL_SECOND: &[&str] = &["lodge", "inn", "house", "hotel", "suites"];
const ATTRACTION_FIRST: &[&str] = &["old", "great", "city", "county", "castle", "abbey", "market", "chapel"];
const ATTRACTION_SECOND: &[&str] = &["hall", "gardens", "arches", "cloisters", "works", "exchange"];
const STREETS: &[&str] = &["mill", "station", "church", "regent", "trinity", "king", "bridge", "hills"];

fn slot_values(slot: Slot) -> &'static [&'static str] {
    match slot {
        Slot::Area => AREAS,
        Slot::Food => FOODS,
        Slot::Price => PRICES,
        Slot::Stars => STARS,
        Slot::Type => TYPES,
        _ => &[],
    }
}

fn name_pool(domain: Domain) -> Vec<String> {
    let (a, b, prefix) = match domain {
        Domain::Restaurant => (RESTAURANT_ADJ, RESTAURANT_NOUN, "the "),
        Domain::Hotel => (HOTEL_FIRST, HOTEL_SECOND, ""),
        Domain::Attraction => (ATTRACTION_FIRST, ATTRACTION_SECOND, ""),
        Domain::General => return Vec::new(),
    };
    a.iter()
        .flat_map(|x| b.iter().map(move |y| format!("{prefix}{x} {y}")))
        .collect()
}

fn cartesian(slots: &[Slot]) -> Vec<BTreeMap<Slot, String>> {
    let mut out = vec![BTreeMap::new()];
    for &s in slots {
        let mut next = Vec::new();
        for partial in &out {
            for v in slot_values(s) {
                let mut m = partial.clone();
                m.insert(s, v.to_string());
                next.push(m);
            }
        }
        out = next;
    }
    out
}

fn random_digits(rng: &mut ChaCha8Rng, n: usize) -> String {
    (0..n).map(|_| char::from(b'0' + rng.random_range(0..10u8))).collect()
}

fn reference_code(rng: &mut ChaCha8Rng) -> String {
    const ALPHABET: &[u8] = b"ABCDEFGHJKLMNPQRSTUVWXYZ23456789";
    (0..8).map(|_| char::from(*ALPHABET.choose(rng).unwrap())).collect()
}

/// One entity per combination of informable values, so every constraint set is satisfiable.
pub fn build_database(domains: &[Domain], seed: u64) -> Result<Database> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    rng.set_stream(u64::MAX);
    let mut entities = Vec::new();
    for &d in domains {
        let combos = cartesian(d.informable());
        let mut names = name_pool(d);
        names.shuffle(&mut rng);
        if names.len() < combos.len() {
            return Err(Error::Corpus(format!("not enough entity names for {d}")));
        }
        for (attrs, name) in combos.into_iter().zip(names) {
            let mut attributes = attrs;
            attributes.insert(Slot::Name, name);
            attributes.insert(Slot::Phone, format!("01223{}", random_digits(&mut rng, 6)));
            if d.has_slot(Slot::Address) {
                let n = rng.random_range(10..100);
                let street = STREETS.choose(&mut rng).unwrap();
                attributes.insert(Slot::Address, format!("{n} {street} road"));
            }
            entities.push(Entity { domain: d, attributes });
        }
    }
    let db = Database { entities };
    db.validate()?;
    Ok(db)
}

pub fn synthesize_corpus(spec: &SynthSpec) -> Result<SynthOutput> {
    if spec.n_sessions == 0 {
        return Err(Error::Corpus("n_sessions must be at least 1".into()));
    }
    if spec.domains.is_empty() {
        return Err(Error::Corpus("at least one domain template is required".into()));
    }
    if spec.domains.contains(&Domain::General) {
        return Err(Error::Corpus("`general` has no domain template".into()));
    }
    if !(0.0..=1.0).contains(&spec.revision_prob) {
        return Err(Error::Corpus(format!("revision_prob {} outside [0, 1]", spec.revision_prob)));
    }
    if spec.max_turns < 3 {
        return Err(Error::Corpus(format!("max_turns {} cannot fit a dialog", spec.max_turns)));
    }
    let bookable: Vec<Domain> = spec.domains.iter().copied().filter(|d| d.bookable()).collect();
    if spec.revision_prob > 0.0 && bookable.is_empty() {
        return Err(Error::Corpus("revisions need a bookable domain".into()));
    }
    let mut domains = spec.domains.clone();
    domains.sort();
    domains.dedup();
    let database = build_database(&domains, spec.seed)?;
    for &d in &domains {
        if database.count(d) == 0 {
            return Err(Error::Corpus(format!("no entities for {d}")));
        }
    }
    let ontology = Ontology::from_database(&domains, &database);

    let mut sessions = Vec::with_capacity(spec.n_sessions);
    for idx in 0..spec.n_sessions {
        let mut rng = ChaCha8Rng::seed_from_u64(spec.seed);
        rng.set_stream(idx as u64);
        let mut made = None;
        for _ in 0..32 {
            let s = generate_session(idx, spec, &domains, &bookable, &database, &mut rng)?;
            if s.turns.len() <= spec.max_turns {
                made = Some(s);
                break;
            }
        }
        let session =
            made.ok_or_else(|| Error::Corpus(format!("cannot fit session {idx} into {} turns", spec.max_turns)))?;
        if let Err((field, msg)) = session.validate() {
            return Err(Error::Corpus(format!("generated session {idx} invalid: {field}: {msg}")));
        }
        sessions.push(session);
    }
    Ok(SynthOutput {
        sessions,
        database,
        ontology,
    })
}

fn pick<'a>(rng: &mut ChaCha8Rng, options: &[&'a str]) -> &'a str {
    options.choose(rng).copied().unwrap()
}

fn domain_noun(d: Domain) -> &'static str {
    match d {
        Domain::Restaurant => "restaurant",
        Domain::Hotel => "hotel",
        Domain::Attraction => "place to go",
        Domain::General => "",
    }
}

fn slot_phrase(rng: &mut ChaCha8Rng, slot: Slot, value: &str) -> String {
    let templates: &[&str] = match slot {
        Slot::Area => &["in the {v}", "in the {v} of town"],
        Slot::Food => &["serving {v} food", "that serves {v} food"],
        Slot::Price => &["in the {v} price range", "that is {v}"],
        Slot::Stars => &["with {v} stars", "rated {v} stars"],
        Slot::Type => &["that is a {v}", "like a {v}"],
        _ => &["{v}"],
    };
    pick(rng, templates).replace("{v}", value)
}

fn phrases(rng: &mut ChaCha8Rng, slots: &[Slot], values: &BTreeMap<Slot, String>) -> String {
    slots
        .iter()
        .map(|s| slot_phrase(rng, *s, &values[s]))
        .collect::<Vec<_>>()
        .join(" and ")
}

fn request_text(slot: Slot) -> &'static str {
    match slot {
        Slot::Area => "which part of town do you prefer ?",
        Slot::Food => "what type of food would you like ?",
        Slot::Price => "do you have a price range in mind ?",
        Slot::Stars => "how many stars would you like ?",
        Slot::Type => "what type of attraction are you interested in ?",
        _ => "what would you like ?",
    }
}

struct TurnBuilder<'a> {
    domain: Domain,
    belief: BeliefState,
    turns: Vec<Turn>,
    rng: &'a mut ChaCha8Rng,
}

impl TurnBuilder<'_> {
    fn act(&self, act: ActType, slot: Option<Slot>) -> DialogAct {
        DialogAct {
            domain: self.domain,
            act,
            slot,
        }
    }

    fn push(&mut self, user: String, acts: Vec<DialogAct>, delex: &str, values: BTreeMap<Slot, String>) {
        let lex = relexicalize(delex, &values);
        debug_assert_eq!(delexicalize(&lex, &values), delex);
        self.turns.push(Turn {
            user,
            belief: self.belief.clone(),
            acts: acts.into_iter().collect(),
            response_delex: delex.to_string(),
            response_lex: lex,
            values,
        });
    }
}

fn generate_session(
    idx: usize,
    spec: &SynthSpec,
    domains: &[Domain],
    bookable: &[Domain],
    db: &Database,
    rng: &mut ChaCha8Rng,
) -> Result<DialogSession> {
    let revision = rng.random_bool(spec.revision_prob);
    let domain = if revision {
        *bookable.choose(rng).unwrap()
    } else {
        *domains.choose(rng).unwrap()
    };
    let candidates: Vec<&Entity> = db.entities.iter().filter(|e| e.domain == domain).collect();
    let entity = (*candidates.choose(rng).unwrap()).clone();
    let informable = domain.informable();
    let target: BTreeMap<Slot, String> = informable
        .iter()
        .map(|s| (*s, entity.attributes[s].clone()))
        .collect();

    let mut requests = BTreeSet::new();
    let mut info_slots = Vec::new();
    let wants_booking;
    if domain.bookable() {
        wants_booking = revision || rng.random_bool(0.5);
        if rng.random_bool(0.6) || !wants_booking {
            info_slots.push(Slot::Phone);
        }
    } else {
        wants_booking = false;
        match rng.random_range(0..3) {
            0 => info_slots.push(Slot::Phone),
            1 => info_slots.push(Slot::Address),
            _ => info_slots.extend([Slot::Phone, Slot::Address]),
        }
    }
    if wants_booking {
        requests.insert((domain, Slot::Reference));
    }
    for s in &info_slots {
        requests.insert((domain, *s));
    }

    let mut order = informable.to_vec();
    order.shuffle(rng);
    let first = rng.random_range(1..=order.len());
    // The system asks for the remaining slots in a fixed order.
    order[first..].sort_by_key(|s| informable.iter().position(|x| x == s));

    let mut b = TurnBuilder {
        domain,
        belief: BeliefState::default(),
        turns: Vec::new(),
        rng,
    };

    // Constraint elicitation.
    let mut user = format!(
        "{} {} {} .",
        pick(b.rng, &["i am looking for a", "i need a", "can you help me find a", "please find me a"]),
        domain_noun(domain),
        phrases(b.rng, &order[..first], &target)
    );
    let mut told = first;
    for s in &order[..first] {
        b.belief.set(domain, *s, target[s].clone());
    }
    loop {
        if told < order.len() {
            let missing = order[told];
            let text = request_text(missing);
            let act = b.act(ActType::Request, Some(missing));
            b.push(user, vec![act], text, BTreeMap::new());
            let extra = if told + 1 < order.len() && b.rng.random_bool(0.3) { 2 } else { 1 };
            let now = &order[told..told + extra];
            let phrase = phrases(b.rng, now, &target);
            user = pick(b.rng, &["{p} please .", "i would like something {p} .", "{p} would be good ."]).replace("{p}", &phrase);
            for s in now {
                b.belief.set(domain, *s, target[s].clone());
            }
            told += extra;
        } else {
            break;
        }
    }

    // Proposal of the unique matching entity.
    let mut values = BTreeMap::new();
    values.insert(Slot::Name, entity.attributes[&Slot::Name].clone());
    values.insert(Slot::Area, entity.attributes[&Slot::Area].clone());
    let mut acts = vec![b.act(ActType::Propose, Some(Slot::Name)), b.act(ActType::Inform, Some(Slot::Area))];
    let delex = if domain.bookable() {
        "how about [value_name] ? it is in the [value_area] . shall i book it ?"
    } else {
        values.insert(Slot::Type, entity.attributes[&Slot::Type].clone());
        acts.push(b.act(ActType::Inform, Some(Slot::Type)));
        "[value_name] is a nice [value_type] in the [value_area] ."
    };
    b.push(user, acts, delex, values);

    let mut revision_events = Vec::new();
    let mut final_entity = entity.clone();
    if revision {
        let slot = *informable.choose(b.rng).unwrap();
        let options: Vec<&str> = slot_values(slot)
            .iter()
            .copied()
            .filter(|v| *v != target[&slot])
            .collect();
        let value = options.choose(b.rng).unwrap().to_string();
        let mut revised = target.clone();
        revised.insert(slot, value.clone());
        final_entity = db
            .query(domain, &revised)
            .cloned()
            .ok_or_else(|| Error::Corpus(format!("no {domain} entity for revised constraints")))?;
        let turn = b.turns.len();
        revision_events.push(RevisionEvent {
            turn,
            domain,
            slot,
            value: value.clone(),
        });
        b.belief.set(domain, slot, value.clone());
        let phrase = slot_phrase(b.rng, slot, &value);
        let user = pick(
            b.rng,
            &[
                "actually , i would rather have one {p} instead . please book it .",
                "sorry , i changed my mind . i want one {p} . can you book that ?",
            ],
        )
        .replace("{p}", &phrase);
        let mut values = BTreeMap::new();
        values.insert(Slot::Name, final_entity.attributes[&Slot::Name].clone());
        values.insert(Slot::Area, final_entity.attributes[&Slot::Area].clone());
        values.insert(Slot::Reference, reference_code(b.rng));
        let acts = vec![
            b.act(ActType::Inform, Some(Slot::Name)),
            b.act(ActType::Inform, Some(Slot::Area)),
            b.act(ActType::Book, Some(Slot::Reference)),
        ];
        b.push(
            user,
            acts,
            "no problem , i have booked [value_name] in the [value_area] for you . your reference number is [value_reference] .",
            values,
        );
    } else if wants_booking {
        let user = pick(
            b.rng,
            &["yes please book it .", "yes , please make a booking .", "that sounds good , book it please ."],
        )
        .to_string();
        let mut values = BTreeMap::new();
        values.insert(Slot::Reference, reference_code(b.rng));
        let acts = vec![b.act(ActType::Book, Some(Slot::Reference))];
        b.push(user, acts, "booking was successful . your reference number is [value_reference] .", values);
    }

    if !info_slots.is_empty() {
        let (user, delex) = match info_slots.as_slice() {
            [Slot::Phone] => (
                pick(b.rng, &["what is the phone number ?", "can i have the phone number ?"]),
                "the phone number is [value_phone] .",
            ),
            [Slot::Address] => (
                pick(b.rng, &["what is the address ?", "where is it located ?"]),
                "the address is [value_address] .",
            ),
            _ => (
                "can i have the phone number and address ?",
                "the phone number is [value_phone] and the address is [value_address] .",
            ),
        };
        let values: BTreeMap<Slot, String> = info_slots
            .iter()
            .map(|s| (*s, final_entity.attributes[s].clone()))
            .collect();
        let acts = info_slots.iter().map(|s| b.act(ActType::Inform, Some(*s))).collect();
        b.push(user.to_string(), acts, delex, values);
    }

    // The closing reply follows from the user's wording, so gold responses are a function of the context.
    let (user, text) = *[
        ("thank you , goodbye .", "you are welcome . goodbye ."),
        ("thanks , that is all i need .", "thank you for using our service . goodbye ."),
    ]
    .choose(b.rng)
    .unwrap();
    let user = user.to_string();
    let bye = DialogAct {
        domain: Domain::General,
        act: ActType::Bye,
        slot: None,
    };
    b.push(user, vec![bye], text, BTreeMap::new());

    let mut constraints = BeliefState::default();
    for (s, v) in &target {
        constraints.set(domain, *s, v.clone());
    }
    Ok(DialogSession {
        session_id: format!("s{idx:05}"),
        goal: Goal {
            constraints,
            requests,
            revision_events,
        },
        turns: b.turns,
    })
}
