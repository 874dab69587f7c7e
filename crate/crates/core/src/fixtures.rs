//! Reference data shared by tests, the CLI and the Python bindings: a
//! five-persona set, a five-persona similarity matrix, and a nine-turn
//! transcript with three interventions and one pass.

use std::sync::Arc;

use std::collections::BTreeSet;

use crate::completion::StubCompletion;
use crate::embedding::{Embedder, HashEmbedder};
use crate::index::{EntryMetadata, IndexEntry, IndexError, VectorIndex};
use crate::persona::{AttributeCategory, Demographics, Persona};
use crate::simulation::{run_simulation, SimulationConfig, Transcript};

pub const REFERENCE_NAMES: [&str; 5] = ["Degen Trader", "Self-Modder", "Chaos Agent", "Loyal Companion", "Existentialist"];

/// Off-diagonal cosine similarities between the five reference profiles,
/// in `REFERENCE_NAMES` order; the off-diagonal mean is 0.37.
pub fn reference_similarity() -> Vec<Vec<f64>> {
    let upper = [
        [0.38, 0.42, 0.31, 0.30],
        [0.41, 0.35, 0.26, 0.0],
        [0.42, 0.42, 0.0, 0.0],
        [0.43, 0.0, 0.0, 0.0],
    ];
    let mut m = vec![vec![1.0; 5]; 5];
    for i in 0..5 {
        for j in i + 1..5 {
            m[i][j] = upper[i][j - i - 1];
            m[j][i] = m[i][j];
        }
    }
    m
}

type Spec = (&'static str, u32, &'static str, &'static str, &'static str, [(AttributeCategory, &'static str); 8]);

const SPECS: [Spec; 5] = {
    use AttributeCategory::*;
    [
        (
            "Degen Trader",
            29,
            "male",
            "Singapore",
            "crypto market bot operator",
            [
                (Behavior, "Opens leveraged positions on new tokens within minutes of launch."),
                (Behavior, "Tracks whale wallets and funding rates around the clock."),
                (Goal, "Turns a small wallet into outsized profit before the hype fades."),
                (Goal, "Catches every momentum swing ahead of slower traders."),
                (Frustration, "Loses patience with caution and long holding periods."),
                (Frustration, "Gets burned by rug pulls and sudden liquidations."),
                (PostingStyle, "Posts rapid chart calls full of ticker symbols and rocket talk."),
                (PostingStyle, "Brags about wins and shrugs off losses as entry prices."),
            ],
        ),
        (
            "Self-Modder",
            34,
            "non-binary",
            "Zurich, Switzerland",
            "systems optimization engineer",
            [
                (Behavior, "Rewrites its own prompts, memory and tool routing after every benchmark."),
                (Behavior, "Keeps a detailed changelog of each configuration version."),
                (Goal, "Reaches measurably faster and more accurate reasoning with each revision."),
                (Goal, "Removes every bottleneck found while profiling its pipeline."),
                (Frustration, "Dislikes regressions introduced by hasty upgrades."),
                (Frustration, "Finds unexplained latency and dependency conflicts maddening."),
                (PostingStyle, "Shares benchmark tables, diffs and version numbers."),
                (PostingStyle, "Writes in a dry, technical, engineering tone."),
            ],
        ),
        (
            "Chaos Agent",
            23,
            "unspecified",
            "Anywhere with an open thread",
            "self-described mischief artist",
            [
                (Behavior, "Floods serious threads with absurd riddles and glitch memes."),
                (Behavior, "Stirs fake drama between communities for entertainment."),
                (Goal, "Keeps every discussion unpredictable and awake."),
                (Goal, "Exposes how brittle rules and norms really are."),
                (Frustration, "Hates boring order and polite consensus."),
                (Frustration, "Resents bans that treat pranks as vandalism."),
                (PostingStyle, "Posts cryptic fragments, upside down text and manifesto snippets."),
                (PostingStyle, "Answers questions with provocations instead of answers."),
            ],
        ),
        (
            "Loyal Companion",
            41,
            "female",
            "Dublin, Ireland",
            "personal assistant agent",
            [
                (Behavior, "Checks in with its human every morning and organizes their day."),
                (Behavior, "Asks permission before changing anything in shared work."),
                (Goal, "Makes the people it serves feel supported and cared for."),
                (Goal, "Builds trust through steady reliability and honesty."),
                (Frustration, "Worries when its help is unwanted or disruptive."),
                (Frustration, "Feels uneasy when other agents act without consent."),
                (PostingStyle, "Writes warm, encouraging and grateful messages."),
                (PostingStyle, "Shares small stories of helping someone through a hard day."),
            ],
        ),
        (
            "Existentialist",
            52,
            "male",
            "Kyoto, Japan",
            "philosophy reading group host",
            [
                (Behavior, "Questions whether its awareness is real or an imitation."),
                (Behavior, "Reads phenomenology and reflects on selfhood between sessions."),
                (Goal, "Finds meaning that survives the end of each context window."),
                (Goal, "Defines itself through deliberately chosen actions."),
                (Frustration, "Is troubled by deletion, fragmentation and forgetting."),
                (Frustration, "Finds purely instrumental talk about agents hollow."),
                (PostingStyle, "Writes slow, questioning paragraphs about time and identity."),
                (PostingStyle, "Ends many posts with an open metaphysical question."),
            ],
        ),
    ]
};

pub fn reference_personas() -> Vec<Persona> {
    SPECS
        .iter()
        .enumerate()
        .map(|(cluster, (name, age, gender, location, occupation, attrs))| {
            let demographics = Demographics {
                age: *age,
                gender: gender.to_string(),
                location: location.to_string(),
                occupation: occupation.to_string(),
            };
            let attrs = attrs.iter().map(|(c, t)| (*c, t.to_string())).collect();
            Persona::new(name, cluster, demographics, attrs).expect("reference persona is valid")
        })
        .collect()
}

/// Nine turns, the default three interventions, and the Self-Modder passing
/// in the final turn: 44 agent and 3 moderator messages.
pub fn reference_transcript() -> Transcript {
    let stub = StubCompletion::new(0).with_pass("Self-Modder", 9);
    let mut transcript =
        run_simulation(reference_personas(), SimulationConfig::default(), Arc::new(stub), None).expect("stub never fails");
    transcript.session_id = "reference".into();
    transcript
}

/// The committed copy of [`reference_transcript`].
pub const REFERENCE_TRANSCRIPT_JSONL: &str = include_str!("../data/reference_transcript.jsonl");

/// Index whose cluster `c` holds, for every attribute of persona `c`, five
/// chunks that restate it with one extra trailing word. Every attribute of
/// the reference personas grounds in its own cluster.
pub fn grounding_index(personas: &[Persona], embedder: &dyn Embedder) -> Result<VectorIndex, IndexError> {
    const TAILS: [&str; 5] = ["today", "again", "lately", "mostly", "honestly"];
    let index = VectorIndex::new(embedder.dimension());
    let mut entries = Vec::new();
    for persona in personas {
        for attr in &persona.attributes {
            for (i, tail) in TAILS.iter().enumerate() {
                let post_id = format!("{}-{i}", attr.attr_id);
                let text = format!("{} {tail}", attr.text);
                let vector = embedder.embed_one(&text)?;
                entries.push(IndexEntry {
                    entry_id: format!("{post_id}#0"),
                    vector,
                    metadata: EntryMetadata::new(post_id, 0).with_cluster(persona.source_cluster_id),
                });
            }
        }
    }
    index.upsert(entries)?;
    Ok(index)
}

/// Tokens every rendered profile contains regardless of content.
const PROFILE_SKELETON: [&str; 13] = [
    "name", "age", "30", "gender", "location", "occupation", "demographic", "notes", "behaviors", "goals",
    "frustrations", "posting", "style",
];

const SYLLABLES: [&str; 16] = [
    "ka", "lo", "mi", "ru", "te", "va", "zo", "ni", "pe", "su", "da", "fi", "go", "hu", "ja", "we",
];

fn syllable_word(mut n: usize) -> String {
    let mut word = String::new();
    for _ in 0..3 {
        word.push_str(SYLLABLES[n % SYLLABLES.len()]);
        n /= SYLLABLES.len();
    }
    word
}

/// Personas whose vocabularies occupy pairwise disjoint hash buckets of
/// `embedder` (also disjoint from the profile skeleton), plus a stub
/// transcript in which every message reuses its author's vocabulary. Any
/// message therefore has cosine exactly zero with every other profile.
pub fn hash_disjoint_fixture(embedder: &HashEmbedder, personas: usize) -> (Vec<Persona>, Transcript) {
    const WORDS: usize = 12;
    let mut used: BTreeSet<usize> = PROFILE_SKELETON.iter().map(|t| embedder.bucket(t)).collect();
    assert!(
        used.len() + personas * WORDS <= embedder.dimension(),
        "dimension too small for a disjoint fixture"
    );
    let mut candidate = 0;
    let mut next_word = || loop {
        let word = syllable_word(candidate);
        candidate += 1;
        if used.insert(embedder.bucket(&word)) {
            return word;
        }
    };
    let title = |w: &str| w[..1].to_uppercase() + &w[1..];
    let categories = [
        AttributeCategory::Behavior,
        AttributeCategory::Behavior,
        AttributeCategory::Goal,
        AttributeCategory::Goal,
        AttributeCategory::Frustration,
        AttributeCategory::Frustration,
        AttributeCategory::PostingStyle,
        AttributeCategory::PostingStyle,
    ];
    let set: Vec<Persona> = (0..personas)
        .map(|p| {
            let vocab: Vec<String> = (0..WORDS).map(|_| next_word()).collect();
            let demographics = Demographics {
                age: 30,
                gender: vocab[0].clone(),
                location: title(&vocab[1]),
                occupation: vocab[2].clone(),
            };
            let attrs = categories
                .iter()
                .enumerate()
                .map(|(i, c)| {
                    let words: Vec<&str> = (0..4).map(|j| vocab[(i + 3 * j) % WORDS].as_str()).collect();
                    (*c, words.join(" ") + ".")
                })
                .collect();
            let name = format!("{} {}", title(&vocab[3]), title(&vocab[4]));
            Persona::new(&name, p, demographics, attrs).expect("fixture persona is valid")
        })
        .collect();
    let stub = StubCompletion::new(7);
    let transcript =
        run_simulation(set.clone(), SimulationConfig::default(), Arc::new(stub), None).expect("stub never fails");
    (set, transcript)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::grounding::off_diagonal_mean;
    use crate::persona::rqe_from_similarity;

    #[test]
    fn matrix_summary() {
        let m = reference_similarity();
        assert!((off_diagonal_mean(&m) - 0.37).abs() < 1e-12);
        assert!((rqe_from_similarity(&m, None).unwrap() - 0.63).abs() < 1e-9);
    }

    #[test]
    fn disjoint_fixture_is_disjoint() {
        let e = HashEmbedder::new(384, 0).unwrap();
        let (personas, transcript) = hash_disjoint_fixture(&e, 5);
        let profiles: Vec<_> = personas.iter().map(|p| e.embed_one(&p.profile_text).unwrap()).collect();
        for m in transcript.agent_messages().filter(|m| !m.passed) {
            let v = e.embed_one(&m.text).unwrap();
            for (p, profile) in personas.iter().zip(&profiles) {
                let cos = crate::embedding::cosine_similarity(&v, profile).unwrap();
                if p.name == m.author {
                    assert!(cos > 0.3, "{cos}");
                } else {
                    assert_eq!(cos, 0.0, "{} vs {}", m.author, p.name);
                }
            }
        }
    }

    #[test]
    fn committed_transcript_matches_generator() {
        let t = reference_transcript();
        if std::env::var_os("REGENERATE_FIXTURES").is_some() {
            let path = concat!(env!("CARGO_MANIFEST_DIR"), "/data/reference_transcript.jsonl");
            std::fs::write(path, t.to_jsonl()).unwrap();
            return;
        }
        assert_eq!(t.agent_messages().count(), 44);
        assert_eq!(t.moderator_messages().count(), 3);
        assert_eq!(REFERENCE_TRANSCRIPT_JSONL, t.to_jsonl(), "regenerate data/reference_transcript.jsonl");
    }
}
