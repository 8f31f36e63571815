//! Templated clinical dialogues with a matching knowledge base.
//!
//! Each dialogue draws one diagnosis and 1–3 of its symptoms. The patient
//! states the symptoms, the doctor may ask a follow-up, and the final doctor
//! turn names the diagnosis and advice. Gold MCS restates the symptoms, gold
//! DI the diagnosis and advice, and the gold summary contains every MCS word
//! plus the diagnosis, so MCS overlaps the summary more than DI does.

use rand::seq::{IndexedRandom, SliceRandom};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};

use super::{Dialogue, Speaker, SummaryTriple, Utterance};
use crate::knowledge::KnowledgeSnippet;

/// `(symptom, description, index into DIAGNOSES)`
pub const SYMPTOMS: [(&str, &str, usize); 20] = [
    ("fever", "raised core temperature reading", 0),
    ("chills", "shivering from feeling cold", 0),
    ("fatigue", "persistent lack of energy", 0),
    ("headache", "aching sensation within cranium", 1),
    ("photophobia", "abnormal sensitivity toward light", 1),
    ("nausea", "urge toward emptying stomach", 1),
    ("diarrhea", "frequent loose watery stools", 2),
    ("vomiting", "forceful expulsion of stomach contents", 2),
    ("cramps", "painful involuntary muscle contraction", 2),
    ("wheezing", "whistling sound during expiration", 3),
    ("breathlessness", "difficulty drawing enough air", 3),
    ("rash", "area of irritated skin", 4),
    ("itching", "irritating urge toward scratching", 4),
    ("sneezing", "sudden expulsion of nasal air", 5),
    ("congestion", "blocked nasal passages", 5),
    ("heartburn", "burning feeling behind sternum", 6),
    ("regurgitation", "backflow of gastric contents", 6),
    ("palpitations", "awareness of forceful heartbeat", 7),
    ("insomnia", "persistent trouble falling asleep", 7),
    ("dizziness", "sensation of spinning imbalance", 7),
];

/// `(diagnosis, description, advice)`
pub const DIAGNOSES: [(&str, &str, &str); 8] = [
    (
        "influenza",
        "contagious viral respiratory infection",
        "rest and fluids",
    ),
    (
        "migraine",
        "recurrent primary neurological disorder",
        "a dark quiet room",
    ),
    (
        "gastroenteritis",
        "inflammation of gut lining",
        "oral rehydration salts",
    ),
    (
        "asthma",
        "chronic inflammatory airway disease",
        "an inhaler",
    ),
    (
        "dermatitis",
        "inflammatory reaction of epidermis",
        "a moisturizing cream",
    ),
    (
        "rhinitis",
        "inflammation of nasal mucosa",
        "antihistamine tablets",
    ),
    ("reflux", "retrograde flow into esophagus", "smaller meals"),
    (
        "anxiety",
        "excessive persistent worry disorder",
        "breathing exercises",
    ),
];

const OPENERS: [&str; 3] = ["hello doctor ,", "hi doctor ,", "good morning doctor ,"];
const DURATIONS: [&str; 4] = ["two days", "three days", "a week", "a month"];

pub fn diagnosis_for(symptom: &str) -> Option<&'static str> {
    SYMPTOMS
        .iter()
        .find(|(s, _, _)| *s == symptom)
        .map(|&(_, _, d)| DIAGNOSES[d].0)
}

/// `a`, `a and b`, `a , b and c`
fn join_list(items: &[&str]) -> String {
    match items {
        [] => String::new(),
        [one] => one.to_string(),
        [init @ .., last] => format!("{} and {last}", init.join(" , ")),
    }
}

#[derive(Debug, Clone)]
pub struct SyntheticCorpus {
    pub dialogues: Vec<Dialogue>,
    pub knowledge: Vec<KnowledgeSnippet>,
}

pub fn knowledge_base() -> Vec<KnowledgeSnippet> {
    SYMPTOMS
        .iter()
        .map(|(t, d, _)| (t, d))
        .chain(DIAGNOSES.iter().map(|(t, d, _)| (t, d)))
        .map(|(t, d)| KnowledgeSnippet {
            term: t.to_string(),
            description: d.to_string(),
        })
        .collect()
}

fn one_dialogue(
    i: usize,
    seed: u64,
    d_vis: usize,
    rng: &mut ChaCha8Rng,
    noise: &Normal<f64>,
) -> Dialogue {
    let diag = rng.random_range(0..DIAGNOSES.len());
    let (diag_name, _, advice) = DIAGNOSES[diag];
    let mut cluster: Vec<usize> = (0..SYMPTOMS.len())
        .filter(|&s| SYMPTOMS[s].2 == diag)
        .collect();
    cluster.shuffle(rng);
    let k = rng.random_range(1..=cluster.len().min(3));
    let chosen = &cluster[..k];
    let names: Vec<&str> = chosen.iter().map(|&s| SYMPTOMS[s].0).collect();
    let listed = join_list(&names);

    let turns = rng.random_range(2..=4);
    let opener = OPENERS.choose(rng).expect("non-empty");
    let duration = DURATIONS.choose(rng).expect("non-empty");

    let p = |text: String| Utterance {
        speaker: Speaker::Patient,
        text,
    };
    let d = |text: String| Utterance {
        speaker: Speaker::Doctor,
        text,
    };
    let mut utterances = vec![p(format!("{opener} i have been having {listed} ."))];
    match turns {
        3 => utterances.push(p(format!("it started {duration} ago ."))),
        4 => {
            utterances.push(d(format!("how long have you had the {} ?", names[0])));
            utterances.push(p(format!("it started {duration} ago .")));
        }
        _ => {}
    }
    utterances.push(d(format!(
        "your {listed} suggest {diag_name} . i recommend {advice} ."
    )));

    let mut visual: Vec<f64> = (0..d_vis).map(|_| noise.sample(rng)).collect();
    if d_vis > 0 {
        for &s in chosen {
            visual[s % d_vis] += 1.0;
        }
    }

    Dialogue {
        id: format!("syn-{seed}-{i:05}"),
        utterances,
        visual: (d_vis > 0).then_some(visual),
        targets: SummaryTriple {
            mcs: format!("patient reports {listed} ."),
            di: format!("likely {diag_name} ; advised {advice} ."),
            summary: format!("the patient reports {listed} and the doctor suspects {diag_name} ."),
        },
    }
}

/// `n` dialogues plus one knowledge entry per symptom and per diagnosis.
/// Deterministic in `(n, seed, d_vis)`.
pub fn generate_synthetic(n: usize, seed: u64, d_vis: usize) -> SyntheticCorpus {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let noise = Normal::new(0.0, 0.1).expect("valid sigma");
    let dialogues = (0..n)
        .map(|i| one_dialogue(i, seed, d_vis, &mut rng, &noise))
        .collect();
    SyntheticCorpus {
        dialogues,
        knowledge: knowledge_base(),
    }
}
