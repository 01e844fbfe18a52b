//! Seeded synthetic customer-service corpus in a telecom domain (plans,
//! packages, fees). Every dialog carries its own local KB, and labeled turns
//! carry gold intents, slots, entity mentions and KB triples that agree with
//! the KB by construction.

use std::collections::BTreeSet;

use rand::seq::{index, SliceRandom};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use super::{strip_labels, CorpusError, CorpusSplit, Dialog, EntityRecord, KbTriple, LocalKb, Turn};
use crate::taxonomy::{LabelSpace, SlotLabel, OTHER};

const NOISE_STREAM: u64 = 0x6e6f_6973_6521;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct SyntheticSpec {
    pub n_labeled: usize,
    pub n_unlabeled: usize,
    #[serde(default = "default_eval_size")]
    pub n_dev: usize,
    #[serde(default = "default_eval_size")]
    pub n_test: usize,
    #[serde(default = "default_entities")]
    pub n_entities_per_kb: usize,
    #[serde(default)]
    pub label_noise_rate: f64,
    pub seed: u64,
}

fn default_eval_size() -> usize {
    200
}

fn default_entities() -> usize {
    3
}

impl SyntheticSpec {
    pub fn new(n_labeled: usize, n_unlabeled: usize, seed: u64) -> Self {
        SyntheticSpec {
            n_labeled,
            n_unlabeled,
            n_dev: default_eval_size(),
            n_test: default_eval_size(),
            n_entities_per_kb: default_entities(),
            label_noise_rate: 0.0,
            seed,
        }
    }

    pub fn validate(&self) -> Result<(), CorpusError> {
        if !(0.0..=1.0).contains(&self.label_noise_rate) {
            return Err(CorpusError::Spec(format!(
                "label_noise_rate must be in [0, 1], got {}",
                self.label_noise_rate
            )));
        }
        let pool = ENTITY_POOLS.iter().map(|(_, names)| names.len()).sum::<usize>();
        if self.n_entities_per_kb == 0 || self.n_entities_per_kb > pool {
            return Err(CorpusError::Spec(format!(
                "n_entities_per_kb must be in 1..={pool}, got {}",
                self.n_entities_per_kb
            )));
        }
        Ok(())
    }
}

const ENTITY_POOLS: [(&str, &[&str]); 3] = [
    ("plan", &["GoldPlan", "SilverPlan", "StudentPlan", "FamilyPlan", "BusinessPlan", "YouthPlan", "SeniorPlan", "UnlimitedPlan"]),
    ("package plan", &["FlexiPack", "TravelPack", "NightPack", "WeekendPack", "CampusPack", "WorkPack"]),
    ("mobile package", &["DataBooster", "VideoBundle", "MusicBundle", "SocialBundle", "GameBundle", "CallBundle"]),
];

const FEES: &[u32] = &[8, 10, 15, 18, 20, 28, 30, 38, 48, 58, 68, 88, 98, 128, 158, 188];
const DATA_GB: &[u32] = &[1, 2, 3, 5, 10, 20, 30, 40, 50, 100];
const MINUTES: &[u32] = &[50, 100, 200, 300, 500, 1000];
const RULES: &[&str] = &[
    "valid for 30 days",
    "cancel anytime",
    "effective next month",
    "one year contract",
    "renews every month",
    "valid until month end",
    "requires 6 months minimum",
];

const PREFIXES: &[&str] = &[
    "", "", "", "", "um, ", "well, ", "uh ", "hey, ", "excuse me, ", "ok so ", "I want to ask, ", "hmm ",
    "sorry, ", "quick question, ",
];
const SUFFIXES: &[&str] = &["", "", "", "", " please", " thanks", " okay", " now", " by the way"];

const FEE_ASK: &[&str] = &[
    "how much is {X}",
    "what is the fee of {X}",
    "how much does {X} cost",
    "{X} how much per month",
    "tell me the price of {X}",
    "what's the monthly charge for {X}",
    "what does {X} cost me",
    "how much money for {X}",
    "is {X} expensive",
    "what do I pay for {X}",
];
const RULE_ASK: &[&str] = &[
    "what are the rules of {X}",
    "how long is {X} valid",
    "can I cancel {X} anytime",
    "what are the terms for {X}",
    "any restrictions on {X}",
    "when does {X} take effect",
    "what is the contract of {X}",
    "is there a commitment period for {X}",
];
const CONTENT_ASK: &[&str] = &[
    "how much data does {X} include",
    "what does {X} contain",
    "how many minutes and data in {X}",
    "what is included in {X}",
    "{X} gives how much traffic",
    "how much internet comes with {X}",
    "what do I get with {X}",
];
const INTRO_ASK: &[&str] = &[
    "introduce {X} to me",
    "tell me about {X}",
    "what is {X}",
    "can you explain {X}",
    "I want to learn about {X}",
    "give me an introduction of {X}",
    "what kind of {T} is {X}",
    "describe the {T} {X}",
];
const MYSELF_ASK: &[&str] = &[
    "how much data do I have left",
    "check my balance",
    "what is my current balance",
    "how many minutes did I use this month",
    "is my account in arrears",
    "query my bill for this month",
    "how much did I spend last month",
    "check my remaining traffic",
];
const HANDLE_ASK: &[&str] = &[
    "I want to cancel {X}",
    "please subscribe me to {X}",
    "help me switch to {X}",
    "I'd like to open {X}",
    "can you unsubscribe {X} for me",
    "sign me up for {X}",
    "I want to change to {X}",
];
const INFORM_INFO: &[&str] = &[
    "my phone number is {N}",
    "my number is {N}",
    "it is {N}",
    "the number is {N}",
    "you can use {N}",
    "{N} is my number",
];
const GREET: &[&str] = &["hello", "hi there", "good morning", "hello, is anyone there", "hey", "good afternoon"];
const COMPLAIN: &[&str] = &[
    "why is my bill so high",
    "your service is terrible",
    "the network keeps dropping",
    "I was charged twice",
    "this is ridiculous, my signal is gone",
    "I am very unhappy with the charges",
    "nobody solved my problem last time",
];
const AFFIRM: &[&str] = &[
    "ok thanks",
    "got it, bye",
    "alright thank you",
    "that's all, goodbye",
    "fine, thanks a lot",
    "great, that helps",
];
const CHITCHAT: &[&str] = &[
    "hold on a second",
    "what did you say",
    "the weather is nice today",
    "wait let me think",
    "sorry I was driving",
    "hmm",
    "can you hear me",
];

const FEE_SAY: &[&str] = &["the fee of {X} is {V}.", "{X} costs {V} per month.", "it is {V} for {X}.", "{X} is {V} monthly."];
const RULE_SAY: &[&str] = &["the rule of {X} is: {V}.", "for {X}, it is {V}.", "{X} is {V}."];
const MYSELF_SAY: &[&str] = &[
    "you have {N} GB left this month.",
    "your balance is {N} yuan.",
    "you used {N} minutes so far.",
    "your bill this month is {N} yuan.",
];
const REQUEST_SAY: &[&str] = &[
    "sure, please tell me your phone number to verify.",
    "ok, may I have your number?",
    "no problem, what is your phone number?",
];
const HANDLE_SAY: &[&str] = &["thanks, {X} has been handled for you.", "done, the change takes effect now.", "ok, it is processed."];
const GREET_SAY: &[&str] = &["hello, how can I help you?", "hi, what can I do for you?"];
const APOLOGIZE_SAY: &[&str] = &["sorry for the trouble, we will check it for you.", "I am sorry, let me look into it."];
const BYE_SAY: &[&str] = &["you're welcome, goodbye.", "glad to help, bye."];
const OTHER_SAY: &[&str] = &["pardon?", "ok, take your time.", "sure."];

const ENTITY_COARSE: &str = "Ask an Entity";
const INTRO_COARSE: &str = "Ask for Introduction";
const MYSELF_COARSE: &str = "Talk about NA(myself)";

fn pick<'a, T: ?Sized>(rng: &mut ChaCha8Rng, items: &'a [&'a T]) -> &'a T {
    items[rng.gen_range(0..items.len())]
}

fn make_kb(rng: &mut ChaCha8Rng, n: usize) -> LocalKb {
    let mut pool: Vec<(&str, &str)> = ENTITY_POOLS
        .iter()
        .flat_map(|(ty, names)| names.iter().map(move |n| (*ty, *n)))
        .collect();
    pool.shuffle(rng);
    let entities = pool[..n]
        .iter()
        .map(|&(ty, name)| {
            let mut attrs = vec![
                ("fee", format!("{} yuan", FEES[rng.gen_range(0..FEES.len())])),
                ("rule", pick(rng, RULES).to_string()),
                ("data", format!("{} GB", DATA_GB[rng.gen_range(0..DATA_GB.len())])),
            ];
            if ty != "mobile package" {
                attrs.push(("minutes", format!("{} minutes", MINUTES[rng.gen_range(0..MINUTES.len())])));
            }
            EntityRecord {
                name: name.to_string(),
                entity_type: ty.to_string(),
                attributes: attrs.into_iter().map(|(k, v)| (k.to_string(), v)).collect(),
            }
        })
        .collect();
    LocalKb { entities }
}

fn type_word(entity_type: &str) -> &'static str {
    match entity_type {
        "plan" => "plan",
        "package plan" => "package",
        _ => "bundle",
    }
}

fn intro_leaf(entity_type: &str) -> &'static str {
    match entity_type {
        "plan" => "Plan",
        "package plan" => "Package plan",
        _ => "Mobile package",
    }
}

#[derive(Default)]
struct TurnDraft {
    usr: String,
    sys: String,
    ui: Vec<&'static str>,
    si: Vec<&'static str>,
    slots: Vec<SlotLabel>,
    ents: Vec<String>,
    kb_gold: Vec<KbTriple>,
}

#[derive(Clone, Copy, PartialEq, Eq)]
enum Act {
    EntityQuery,
    Intro,
    Myself,
    Handle,
    InformInfo,
    Greet,
    Complain,
    Affirm,
    Chitchat,
}

fn phone(rng: &mut ChaCha8Rng) -> String {
    let mut s = String::from("1");
    s.push(['3', '5', '8'][rng.gen_range(0..3)]);
    for _ in 0..9 {
        s.push(char::from(b'0' + rng.gen_range(0..10u8)));
    }
    s
}

fn oral(rng: &mut ChaCha8Rng, core: &str, question: bool) -> String {
    let mut s = format!("{}{}{}", pick(rng, PREFIXES), core, pick(rng, SUFFIXES));
    if question && rng.gen_bool(0.5) {
        s.push('?');
    }
    s
}

/// Choose the entity a query refers to. Returns (entity, surface form).
fn refer<'a>(rng: &mut ChaCha8Rng, kb: &'a LocalKb, history: &[String]) -> (&'a EntityRecord, String) {
    if let Some(last) = history.last() {
        if rng.gen_bool(0.25) {
            let e = kb.get(last).expect("history only holds KB entities");
            return (e, "it".to_string());
        }
    }
    let e = &kb.entities[rng.gen_range(0..kb.entities.len())];
    (e, e.name.clone())
}

fn draft_turn(rng: &mut ChaCha8Rng, act: Act, kb: &LocalKb, history: &[String]) -> TurnDraft {
    let mut d = TurnDraft::default();
    match act {
        Act::EntityQuery => {
            let (e, surface) = refer(rng, kb, history);
            let leaf = ["Fee", "Rules", "Mobile Package"][rng.gen_range(0..3)];
            let (asks, attrs): (&[&str], &[&str]) = match leaf {
                "Fee" => (FEE_ASK, &["fee"]),
                "Rules" => (RULE_ASK, &["rule"]),
                _ => (CONTENT_ASK, &["data", "minutes"]),
            };
            let core = pick(rng, asks).replace("{X}", &surface);
            d.usr = oral(rng, &core, true);
            let triples: Vec<KbTriple> = attrs
                .iter()
                .filter_map(|a| e.attributes.get(*a).map(|v| KbTriple::new(&e.name, a, v)))
                .collect();
            d.sys = match leaf {
                "Fee" => pick(rng, FEE_SAY).replace("{X}", &e.name).replace("{V}", &triples[0].2),
                "Rules" => pick(rng, RULE_SAY).replace("{X}", &e.name).replace("{V}", &triples[0].2),
                _ => {
                    let values: Vec<&str> = triples.iter().map(|t| t.value()).collect();
                    format!("{} includes {}.", e.name, values.join(" and "))
                }
            };
            d.ui = vec!["ask-query"];
            d.si = vec!["inform"];
            d.slots = vec![SlotLabel::fine(ENTITY_COARSE, leaf)];
            d.ents = vec![e.name.clone()];
            d.kb_gold = triples;
        }
        Act::Intro => {
            let (e, surface) = refer(rng, kb, history);
            let core = pick(rng, INTRO_ASK).replace("{X}", &surface).replace("{T}", type_word(&e.entity_type));
            d.usr = oral(rng, &core, true);
            let a = &e.attributes;
            let mut sys = format!(
                "{} is our {}, it costs {}, includes {}",
                e.name,
                type_word(&e.entity_type),
                a["fee"],
                a["data"]
            );
            if let Some(m) = a.get("minutes") {
                sys.push_str(&format!(" and {m}"));
            }
            sys.push_str(&format!(", {}.", a["rule"]));
            d.sys = sys;
            d.ui = vec!["ask-query"];
            d.si = vec!["inform"];
            d.slots = vec![SlotLabel::fine(INTRO_COARSE, intro_leaf(&e.entity_type))];
            d.ents = vec![e.name.clone()];
            d.kb_gold = a.iter().map(|(k, v)| KbTriple::new(&e.name, k, v)).collect();
        }
        Act::Myself => {
            let core = pick(rng, MYSELF_ASK);
            d.usr = oral(rng, core, true);
            let n = rng.gen_range(1..200u32).to_string();
            d.sys = pick(rng, MYSELF_SAY).replace("{N}", &n);
            d.ui = vec!["ask-query"];
            d.si = vec!["inform"];
            d.slots = vec![SlotLabel::coarse(MYSELF_COARSE)];
        }
        Act::Handle => {
            let e = &kb.entities[rng.gen_range(0..kb.entities.len())];
            let core = pick(rng, HANDLE_ASK).replace("{X}", &e.name);
            d.usr = oral(rng, &core, false);
            d.sys = pick(rng, REQUEST_SAY).to_string();
            d.ui = vec!["ask-handle"];
            d.si = vec!["request"];
            d.ents = vec![e.name.clone()];
        }
        Act::InformInfo => {
            let number = phone(rng);
            let core = pick(rng, INFORM_INFO).replace("{N}", &number);
            d.usr = oral(rng, &core, false);
            let name = history.last().map(String::as_str).unwrap_or("your request");
            d.sys = pick(rng, HANDLE_SAY).replace("{X}", name);
            d.ui = vec!["inform-info"];
            d.si = vec!["offer-handle"];
        }
        Act::Greet => {
            d.usr = pick(rng, GREET).to_string();
            d.sys = pick(rng, GREET_SAY).to_string();
            d.ui = vec!["greet"];
            d.si = vec!["greet"];
        }
        Act::Complain => {
            let core = pick(rng, COMPLAIN);
            d.usr = oral(rng, core, false);
            d.sys = pick(rng, APOLOGIZE_SAY).to_string();
            d.ui = vec!["complain"];
            d.si = vec!["apologize"];
        }
        Act::Affirm => {
            d.usr = pick(rng, AFFIRM).to_string();
            d.sys = pick(rng, BYE_SAY).to_string();
            d.ui = vec!["affirm"];
            d.si = vec!["bye"];
        }
        Act::Chitchat => {
            d.usr = pick(rng, CHITCHAT).to_string();
            d.sys = pick(rng, OTHER_SAY).to_string();
            d.ui = vec![OTHER];
            d.si = vec![OTHER];
        }
    }
    d
}

fn choose_act(rng: &mut ChaCha8Rng, turn: usize, n_turns: usize, prev: Option<Act>) -> Act {
    if prev == Some(Act::Handle) && rng.gen_bool(0.7) {
        return Act::InformInfo;
    }
    if turn == 0 && rng.gen_bool(0.25) {
        return Act::Greet;
    }
    if turn + 1 == n_turns && turn >= 2 && rng.gen_bool(0.5) {
        return Act::Affirm;
    }
    const WEIGHTED: [(Act, u32); 8] = [
        (Act::EntityQuery, 36),
        (Act::Intro, 16),
        (Act::Myself, 10),
        (Act::Handle, 10),
        (Act::InformInfo, 4),
        (Act::Complain, 8),
        (Act::Affirm, 6),
        (Act::Chitchat, 10),
    ];
    let total: u32 = WEIGHTED.iter().map(|(_, w)| w).sum();
    let mut r = rng.gen_range(0..total);
    for (act, w) in WEIGHTED {
        if r < w {
            return act;
        }
        r -= w;
    }
    unreachable!()
}

fn gen_dialog(rng: &mut ChaCha8Rng, dialog_id: String, n_entities: usize) -> Dialog {
    let local_kb = make_kb(rng, n_entities);
    let n_turns = rng.gen_range(3..=6);
    let mut turns = Vec::with_capacity(n_turns);
    let mut history: Vec<String> = Vec::new();
    let mut prev = None;
    for i in 0..n_turns {
        let act = choose_act(rng, i, n_turns, prev);
        let mut d = draft_turn(rng, act, &local_kb, &history);
        // a greeting sometimes opens the first query
        if i == 0 && matches!(act, Act::EntityQuery | Act::Intro) && rng.gen_bool(0.3) {
            let hello = pick(rng, GREET);
            d.usr = format!("{hello}, {}", d.usr);
            d.sys = format!("hello! {}", d.sys);
            d.ui.push("greet");
            d.si.push("greet");
        }
        for e in &d.ents {
            history.retain(|h| h != e);
            history.push(e.clone());
        }
        turns.push(Turn {
            turn_index: i as u32,
            user_utterance: d.usr,
            system_response: d.sys,
            user_intents: d.ui.iter().map(|s| s.to_string()).collect(),
            service_intents: d.si.iter().map(|s| s.to_string()).collect(),
            slot_labels: d.slots.into_iter().collect(),
            mentioned_entities: d.ents,
            gold_kb_triples: d.kb_gold,
        });
        prev = Some(act);
    }
    Dialog { dialog_id, labeled: true, local_kb, turns }
}

/// Toggle one UI or SI label. `Other` stands for "no class", so it is dropped
/// once a real label is present and restored when a head becomes empty.
fn flip_one_label(rng: &mut ChaCha8Rng, turn: &mut Turn, space: &LabelSpace) {
    let k = space.k_ui() + space.k_si();
    let i = rng.gen_range(0..k);
    let (set, label) = if i < space.k_ui() {
        (&mut turn.user_intents, &space.ui_labels[i])
    } else {
        (&mut turn.service_intents, &space.si_labels[i - space.k_ui()])
    };
    if !set.remove(label) {
        set.insert(label.clone());
    }
    normalize_other(set);
}

fn normalize_other(set: &mut BTreeSet<String>) {
    if set.len() > 1 {
        set.remove(OTHER);
    }
    if set.is_empty() {
        set.insert(OTHER.to_string());
    }
}

/// Generate a corpus. Dev and test splits are never noised.
pub fn generate_synthetic(spec: &SyntheticSpec) -> Result<CorpusSplit, CorpusError> {
    spec.validate()?;
    let mut rng = ChaCha8Rng::seed_from_u64(spec.seed);
    let gen = |prefix: &str, n: usize, rng: &mut ChaCha8Rng| -> Vec<Dialog> {
        (0..n).map(|i| gen_dialog(rng, format!("{prefix}-{i:05}"), spec.n_entities_per_kb)).collect()
    };
    let mut labeled = gen("train", spec.n_labeled, &mut rng);
    let unlabeled = strip_labels(&gen("unl", spec.n_unlabeled, &mut rng));
    let dev = gen("dev", spec.n_dev, &mut rng);
    let test = gen("test", spec.n_test, &mut rng);

    let positions: Vec<(usize, usize)> = labeled
        .iter()
        .enumerate()
        .flat_map(|(i, d)| (0..d.turns.len()).map(move |j| (i, j)))
        .collect();
    let n_noisy = (spec.label_noise_rate * positions.len() as f64).round() as usize;
    if n_noisy > 0 {
        let space = LabelSpace::default();
        let mut noise_rng = ChaCha8Rng::seed_from_u64(spec.seed ^ NOISE_STREAM);
        let mut chosen = index::sample(&mut noise_rng, positions.len(), n_noisy).into_vec();
        chosen.sort_unstable();
        for p in chosen {
            let (i, j) = positions[p];
            flip_one_label(&mut noise_rng, &mut labeled[i].turns[j], &space);
        }
    }
    Ok(CorpusSplit { labeled, unlabeled, dev, test })
}
