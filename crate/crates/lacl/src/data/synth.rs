//! Template generator for the bundled corpora: a primary corpus of 8
//! home-assistant intents built from a shared lexicon, a far-distribution
//! partner corpus sharing one class name, and a paraphrase sidecar standing
//! in for a translation model.

use std::collections::{BTreeMap, BTreeSet};
use std::path::Path;

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde_json::{json, Map, Value};

use super::DataError;

pub const TRAIN_PER_INTENT: usize = 80;
pub const VAL_PER_INTENT: usize = 10;
pub const TEST_PER_INTENT: usize = 25;
pub const FAR_TRAIN_PER_INTENT: usize = 12;
pub const FAR_VAL_PER_INTENT: usize = 4;
pub const FAR_TEST_PER_INTENT: usize = 10;

struct IntentSpec {
    name: &'static str,
    templates: &'static [&'static str],
    slot_a: &'static [&'static str],
    slot_b: &'static [&'static str],
    slot_c: &'static [&'static str],
}

/// Intents are verb-direction/object compositions over a shared home-assistant
/// lexicon: every object family spans an on/off pair, the modifier words recur
/// in all eight intents, and several verbs recur across pairs. A held-out
/// intent therefore stays mostly in-vocabulary, and telling it apart takes the
/// combination of direction and object, not the presence of a private keyword.
/// Each intent still carries additive unigram evidence (object family plus
/// direction word), so a linear bag-of-words classifier can separate the
/// in-distribution classes.
const MODS: &[&str] = &["morning", "evening", "kitchen", "bedroom"];
const OBJ_MUSIC: &[&str] = &["music", "playlist", "radio", "songs"];
const OBJ_ALARM: &[&str] = &["alarm", "timer", "reminder", "alert"];
const OBJ_LIGHTS: &[&str] = &["lights", "lamp", "lighting", "bulbs"];
const OBJ_VOLUME: &[&str] = &["volume", "sound", "speaker", "audio"];

const PRIMARY: [IntentSpec; 8] = [
    IntentSpec {
        name: "play_music",
        templates: &[
            "{a} the {b} {c}",
            "{a} some {c} in the {b}",
            "turn on the {b} {c}",
            "can you {a} the {b} {c}",
            "{a} my {b} {c} please",
        ],
        slot_a: &["start", "play", "resume", "begin"],
        slot_b: MODS,
        slot_c: OBJ_MUSIC,
    },
    IntentSpec {
        name: "stop_music",
        templates: &[
            "{a} the {b} {c}",
            "{a} the {c} in the {b}",
            "turn off the {b} {c}",
            "can you {a} the {b} {c}",
            "{a} my {b} {c} please",
        ],
        slot_a: &["stop", "pause", "silence", "end"],
        slot_b: MODS,
        slot_c: OBJ_MUSIC,
    },
    IntentSpec {
        name: "set_alarm",
        templates: &[
            "{a} a {b} {c}",
            "{a} the {b} {c}",
            "turn on my {b} {c}",
            "can you {a} a {b} {c}",
            "{a} my {b} {c} please",
        ],
        slot_a: &["set", "schedule", "create", "start"],
        slot_b: MODS,
        slot_c: OBJ_ALARM,
    },
    IntentSpec {
        name: "cancel_alarm",
        templates: &[
            "{a} the {b} {c}",
            "{a} my {b} {c}",
            "turn off my {b} {c}",
            "can you {a} the {b} {c}",
            "{a} that {b} {c} please",
        ],
        slot_a: &["cancel", "clear", "stop", "remove"],
        slot_b: MODS,
        slot_c: OBJ_ALARM,
    },
    IntentSpec {
        name: "lights_on",
        templates: &[
            "{a} on the {b} {c}",
            "{a} on my {b} {c}",
            "can you {a} on the {b} {c}",
            "{b} {c} on please",
            "i want the {b} {c} on",
        ],
        slot_a: &["switch", "flip", "turn", "put"],
        slot_b: MODS,
        slot_c: OBJ_LIGHTS,
    },
    IntentSpec {
        name: "lights_off",
        templates: &[
            "{a} off the {b} {c}",
            "{a} off my {b} {c}",
            "can you {a} off the {b} {c}",
            "{b} {c} off please",
            "i want the {b} {c} off",
        ],
        slot_a: &["switch", "flip", "turn", "shut"],
        slot_b: MODS,
        slot_c: OBJ_LIGHTS,
    },
    IntentSpec {
        name: "volume_up",
        templates: &[
            "{a} the {b} {c}",
            "{a} the {c} a bit",
            "turn up the {b} {c}",
            "can you {a} the {b} {c}",
            "{a} my {b} {c} please",
        ],
        slot_a: &["raise", "boost", "bump", "crank"],
        slot_b: MODS,
        slot_c: OBJ_VOLUME,
    },
    IntentSpec {
        name: "volume_down",
        templates: &[
            "{a} the {b} {c}",
            "{a} the {c} a bit",
            "turn down the {b} {c}",
            "can you {a} the {b} {c}",
            "{a} my {b} {c} please",
        ],
        slot_a: &["lower", "drop", "reduce", "soften"],
        slot_b: MODS,
        slot_c: OBJ_VOLUME,
    },
];

/// The partner corpus reuses the name play_music (with kindred wording) so
/// the pairing exercise has one genuinely overlapping class to exclude.
const FAR: [IntentSpec; 4] = [
    IntentSpec {
        name: "get_directions",
        templates: &[
            "{a} me to the {b}",
            "{a} to the {b} now",
            "what is the fastest {a} to the {b}",
            "{a} me around the {b} traffic",
        ],
        slot_a: &["navigate", "route", "direct", "guide"],
        slot_b: &["downtown", "airport", "museum", "office"],
        slot_c: &[""],
    },
    IntentSpec {
        name: "translate_phrase",
        templates: &[
            "{a} hello into {b}",
            "how do you {a} goodbye in {b}",
            "{a} this sentence to {b}",
            "{a} thank you into {b} for me",
        ],
        slot_a: &["translate", "render", "interpret", "convert"],
        slot_b: &["spanish", "french", "german", "italian"],
        slot_c: &[""],
    },
    IntentSpec {
        name: "math_question",
        templates: &[
            "{a} twelve and {b}",
            "what do you get if you {a} {b}",
            "{a} these {b} for me",
            "can you {a} {b} quickly",
        ],
        slot_a: &["multiply", "divide", "sum", "subtract"],
        slot_b: &["thirty", "fifteen", "fractions", "percentages"],
        slot_c: &[""],
    },
    IntentSpec {
        name: "play_music",
        templates: &[
            "{a} {b} in the {c}",
            "{a} some {b} on the {c} speaker",
            "keep the {b} going in the {c}",
            "{a} my {b} mix in the {c}",
        ],
        slot_a: &["play", "blast", "stream", "loop"],
        slot_b: &["music", "songs", "tracks", "tunes"],
        slot_c: &["kitchen", "bedroom", "garage", "car"],
    },
];

pub struct Bundle {
    /// Primary 8-intent corpus, CLINC layout.
    pub intents: Value,
    /// Far-distribution partner corpus, CLINC layout.
    pub far: Value,
    /// text -> paraphrase candidates for every primary training utterance.
    pub sidecar: Value,
    /// Exclusion list for pairing the two corpora.
    pub exclusions: String,
}

pub fn generate(seed: u64) -> Bundle {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let intents = gen_corpus(
        &PRIMARY,
        TRAIN_PER_INTENT,
        VAL_PER_INTENT,
        TEST_PER_INTENT,
        &mut rng,
    );
    let far = gen_corpus(
        &FAR,
        FAR_TRAIN_PER_INTENT,
        FAR_VAL_PER_INTENT,
        FAR_TEST_PER_INTENT,
        &mut rng,
    );
    let sidecar = gen_sidecar(&intents);
    Bundle {
        intents,
        far,
        sidecar,
        exclusions: "# classes shared between the bundled corpus pair\nplay_music\n".to_string(),
    }
}

pub fn write_bundle(dir: &Path, seed: u64) -> Result<(), DataError> {
    let bundle = generate(seed);
    std::fs::create_dir_all(dir)?;
    for (name, value) in [
        ("synthetic_intents.json", &bundle.intents),
        ("synthetic_far.json", &bundle.far),
        ("paraphrase_sidecar.json", &bundle.sidecar),
    ] {
        std::fs::write(dir.join(name), serde_json::to_string_pretty(value)? + "\n")?;
    }
    std::fs::write(dir.join("exclusions_synthetic.txt"), &bundle.exclusions)?;
    Ok(())
}

fn gen_corpus(
    specs: &[IntentSpec],
    n_train: usize,
    n_val: usize,
    n_test: usize,
    rng: &mut ChaCha8Rng,
) -> Value {
    let mut train = Vec::new();
    let mut val = Vec::new();
    let mut test = Vec::new();
    for spec in specs {
        let mut pool: Vec<String> = expand(spec).into_iter().collect();
        assert!(
            pool.len() >= n_train + n_val + n_test,
            "{}: pool {} too small",
            spec.name,
            pool.len()
        );
        pool.shuffle(rng);
        let mut take = |n: usize, out: &mut Vec<Value>| {
            for _ in 0..n {
                out.push(json!([pool.pop().unwrap(), spec.name]));
            }
        };
        take(n_train, &mut train);
        take(n_val, &mut val);
        take(n_test, &mut test);
    }
    let mut root = Map::new();
    root.insert("train".into(), Value::Array(train));
    root.insert("val".into(), Value::Array(val));
    root.insert("test".into(), Value::Array(test));
    Value::Object(root)
}

fn expand(spec: &IntentSpec) -> BTreeSet<String> {
    let mut out = BTreeSet::new();
    for t in spec.templates {
        for a in spec.slot_a {
            for b in spec.slot_b {
                for c in spec.slot_c {
                    let s = t.replace("{a}", a).replace("{b}", b).replace("{c}", c);
                    out.insert(s.split_whitespace().collect::<Vec<_>>().join(" "));
                }
            }
        }
    }
    out
}

/// Paraphrases swap each slot word for another word of the same slot (cyclic
/// shift within the owning intent's lexicon), so candidates stay in-class,
/// in-vocabulary, and never borrow a verb from a different intent family.
fn gen_sidecar(corpus: &Value) -> Value {
    let mut rot1: BTreeMap<&str, BTreeMap<&str, &str>> = BTreeMap::new();
    let mut rot2: BTreeMap<&str, BTreeMap<&str, &str>> = BTreeMap::new();
    for spec in &PRIMARY {
        let (m1, m2) = (rot1.entry(spec.name).or_default(), rot2.entry(spec.name).or_default());
        for slot in [spec.slot_a, spec.slot_b, spec.slot_c] {
            if slot.len() < 2 {
                continue;
            }
            for (i, w) in slot.iter().enumerate() {
                m1.insert(w, slot[(i + 1) % slot.len()]);
                m2.insert(w, slot[(i + 2) % slot.len()]);
            }
        }
    }
    let apply = |text: &str, map: &BTreeMap<&str, &str>| -> String {
        text.split_whitespace()
            .map(|w| map.get(w).copied().unwrap_or(w))
            .collect::<Vec<_>>()
            .join(" ")
    };
    let mut side = Map::new();
    for rec in corpus["train"].as_array().expect("train split") {
        let text = rec[0].as_str().expect("text");
        let label = rec[1].as_str().expect("label");
        side.insert(
            text.to_string(),
            json!([apply(text, &rot1[label]), apply(text, &rot2[label])]),
        );
    }
    Value::Object(side)
}
