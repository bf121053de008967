//! Seeded synthetic corpora for tests, examples and benchmarks.

use rand::seq::{IndexedRandom, SliceRandom};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::corpus::{Passage, PassageStore, RawDocument};
use crate::datagen::{QAPair, Split};
use crate::tokenizer::WhitespaceTokenizer;

/// One passage per topic; questions use a vocabulary disjoint from the
/// passages, so lexical overlap cannot solve retrieval and the embedder must
/// learn the mapping.
#[derive(Clone, Debug)]
pub struct TopicCorpus {
    pub store: PassageStore,
    pub train: Vec<QAPair>,
    pub test: Vec<QAPair>,
}

#[derive(Clone, Debug)]
pub struct TopicCorpusConfig {
    pub n_topics: usize,
    pub vocab_per_topic: usize,
    pub passage_words: usize,
    pub question_words: usize,
    pub train_per_topic: usize,
    pub test_per_topic: usize,
    pub seed: u64,
}

impl Default for TopicCorpusConfig {
    fn default() -> Self {
        TopicCorpusConfig {
            n_topics: 32,
            vocab_per_topic: 8,
            passage_words: 24,
            question_words: 5,
            train_per_topic: 8,
            test_per_topic: 4,
            seed: 0,
        }
    }
}

pub fn topic_corpus(config: &TopicCorpusConfig) -> TopicCorpus {
    let mut rng = ChaCha8Rng::seed_from_u64(config.seed);
    let words = |prefix: &str, topic: usize| -> Vec<String> {
        (0..config.vocab_per_topic).map(|j| format!("{prefix}{topic}x{j}")).collect()
    };
    let mut passages = Vec::with_capacity(config.n_topics);
    let mut questions: Vec<(usize, String)> = Vec::new();
    for topic in 0..config.n_topics {
        let pv = words("doc", topic);
        let text: Vec<&str> = (0..config.passage_words)
            .map(|_| pv.choose(&mut rng).unwrap().as_str())
            .collect();
        passages.push(Passage::new(text.join(" "), format!("topic-{topic}"), 0, &WhitespaceTokenizer));
        let qv = words("ask", topic);
        for _ in 0..config.train_per_topic + config.test_per_topic {
            let q: Vec<&str> = (0..config.question_words)
                .map(|_| qv.choose(&mut rng).unwrap().as_str())
                .collect();
            questions.push((topic, q.join(" ")));
        }
    }
    let mut train = Vec::new();
    let mut test = Vec::new();
    let per_topic = config.train_per_topic + config.test_per_topic;
    for (i, (topic, question)) in questions.into_iter().enumerate() {
        let is_train = i % per_topic < config.train_per_topic;
        let pair = QAPair {
            question,
            answer: format!("topic {topic}"),
            gold_passage_id: passages[topic].passage_id.clone(),
            hard_negative_ids: vec![],
            split: if is_train { Split::Train } else { Split::Test },
        };
        if is_train {
            train.push(pair);
        } else {
            test.push(pair);
        }
    }
    train.shuffle(&mut rng);
    TopicCorpus {
        store: PassageStore::from_passages(passages),
        train,
        test,
    }
}

const SYLLABLES: &[&str] = &[
    "ka", "lo", "mi", "ren", "tu", "sa", "vel", "do", "ri", "on", "ba", "zu", "el", "fa", "nor", "qui",
];
const KINDS: &[&str] = &["river", "castle", "library", "festival", "mountain", "company", "bridge", "garden"];
const PLACES: &[&str] = &["north", "south", "east", "west", "coast", "valley", "plain", "island"];
const TRAITS: &[&str] = &["ancient", "quiet", "famous", "large", "narrow", "colorful", "hidden", "busy"];
const ACTIVITIES: &[&str] = &["fishing", "painting", "trading", "singing", "farming", "weaving", "sailing", "baking"];

fn pseudo_word(rng: &mut ChaCha8Rng) -> String {
    let n = rng.random_range(2..=3);
    (0..n).map(|_| *SYLLABLES.choose(rng).unwrap()).collect()
}

/// Short encyclopedic documents about made-up entities, one fact per sentence.
pub fn synthetic_documents(n_docs: usize, seed: u64) -> Vec<RawDocument> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    (0..n_docs)
        .map(|i| {
            let name = format!("{}{}", pseudo_word(&mut rng), i);
            let kind = KINDS.choose(&mut rng).unwrap();
            let place = PLACES.choose(&mut rng).unwrap();
            let adjective = TRAITS.choose(&mut rng).unwrap();
            let activity = ACTIVITIES.choose(&mut rng).unwrap();
            let year = rng.random_range(1200..2000);
            let founder = pseudo_word(&mut rng);
            let neighbor = pseudo_word(&mut rng);
            let text = format!(
                "{name} is a {adjective} {kind} in the {place} region. \
                 It was founded in {year} by {founder}. \
                 People near {name} are known for {activity}. \
                 The closest town to {name} is {neighbor}, which lies to the {place}. \
                 Visitors to the {kind} often remark that {name} feels {adjective}."
            );
            RawDocument::new(text, format!("doc-{i:04}.txt"), 0)
        })
        .collect()
}
