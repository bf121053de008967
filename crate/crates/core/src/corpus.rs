//! Document ingestion: cleaning, token-bounded chunking and the passage store.

use std::collections::{BTreeMap, HashMap};
use std::io::{BufRead, BufReader, BufWriter, Write};
use std::path::Path;
use std::sync::LazyLock;

use regex::Regex;
use serde::{Deserialize, Serialize};
use serde_json::Value;
use sha2::{Digest, Sha256};

use crate::error::{Result, RqaError};
use crate::tokenizer::Tokenizer;

pub const DEFAULT_MAX_PASSAGE_TOKENS: usize = 400;
pub const MIN_PASSAGE_TOKENS: usize = 16;

/// A source document before chunking.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct RawDocument {
    pub content: String,
    #[serde(default)]
    pub metadata: BTreeMap<String, Value>,
}

impl RawDocument {
    pub fn new(content: impl Into<String>, source: impl Into<String>, seq_num: i64) -> Self {
        let mut metadata = BTreeMap::new();
        metadata.insert("source".to_string(), Value::String(source.into()));
        metadata.insert("seq_num".to_string(), Value::from(seq_num));
        RawDocument {
            content: content.into(),
            metadata,
        }
    }

    pub fn with_meta(mut self, key: &str, value: impl Into<Value>) -> Self {
        self.metadata.insert(key.to_string(), value.into());
        self
    }

    pub fn source(&self) -> Option<&str> {
        self.metadata
            .get("source")
            .and_then(Value::as_str)
            .filter(|s| !s.trim().is_empty())
    }

    pub fn seq_num(&self) -> Option<i64> {
        self.metadata.get("seq_num").and_then(Value::as_i64)
    }
}

/// A chunk of a document; the unit of retrieval.
#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct Passage {
    pub passage_id: String,
    pub content: String,
    pub source: String,
    pub seq_num: i64,
    pub token_count: usize,
}

impl Passage {
    pub fn new(
        content: impl Into<String>,
        source: impl Into<String>,
        seq_num: i64,
        tokenizer: &dyn Tokenizer,
    ) -> Self {
        let content = content.into();
        let source = source.into();
        Passage {
            passage_id: passage_id(&source, &content),
            token_count: tokenizer.count(&content),
            content,
            source,
            seq_num,
        }
    }
}

/// First 16 hex characters of `SHA-256(source ‖ 0x00 ‖ content)`.
pub fn passage_id(source: &str, content: &str) -> String {
    let mut h = Sha256::new();
    h.update(source.as_bytes());
    h.update([0u8]);
    h.update(content.as_bytes());
    let mut id = hex::encode(h.finalize());
    id.truncate(16);
    id
}

/// Passages grouped by source, in order of each source's first appearance.
#[derive(Clone, Debug, Default, PartialEq)]
pub struct PassageStore {
    passages: Vec<Passage>,
    by_id: HashMap<String, usize>,
}

impl PassageStore {
    /// Builds a store, grouping by source and dropping repeated passage ids.
    pub fn from_passages(passages: Vec<Passage>) -> Self {
        let mut source_rank: HashMap<String, usize> = HashMap::new();
        for p in &passages {
            let next = source_rank.len();
            source_rank.entry(p.source.clone()).or_insert(next);
        }
        let mut indexed: Vec<(usize, usize, Passage)> = passages
            .into_iter()
            .enumerate()
            .map(|(i, p)| (source_rank[&p.source], i, p))
            .collect();
        indexed.sort_by_key(|(rank, i, _)| (*rank, *i));

        let mut store = PassageStore::default();
        for (_, _, p) in indexed {
            store.push(p);
        }
        store
    }

    fn push(&mut self, p: Passage) -> bool {
        if self.by_id.contains_key(&p.passage_id) {
            return false;
        }
        self.by_id.insert(p.passage_id.clone(), self.passages.len());
        self.passages.push(p);
        true
    }

    /// Adds passages not already present and regroups by source.
    pub fn extend(&mut self, additions: impl IntoIterator<Item = Passage>) {
        let mut all = std::mem::take(&mut self.passages);
        all.extend(additions);
        *self = PassageStore::from_passages(all);
    }

    pub fn len(&self) -> usize {
        self.passages.len()
    }

    pub fn is_empty(&self) -> bool {
        self.passages.is_empty()
    }

    pub fn get(&self, passage_id: &str) -> Option<&Passage> {
        self.by_id.get(passage_id).map(|&i| &self.passages[i])
    }

    pub fn contains(&self, passage_id: &str) -> bool {
        self.by_id.contains_key(passage_id)
    }

    /// Position of a passage in iteration order.
    pub fn position(&self, passage_id: &str) -> Option<usize> {
        self.by_id.get(passage_id).copied()
    }

    pub fn passages(&self) -> &[Passage] {
        &self.passages
    }

    /// Source-grouped iteration order.
    pub fn iter(&self) -> std::slice::Iter<'_, Passage> {
        self.passages.iter()
    }

    /// Each source with its passages, in store order.
    pub fn by_source(&self) -> Vec<(&str, Vec<&Passage>)> {
        let mut groups: Vec<(&str, Vec<&Passage>)> = Vec::new();
        for p in &self.passages {
            match groups.last_mut() {
                Some((src, members)) if *src == p.source => members.push(p),
                _ => groups.push((&p.source, vec![p])),
            }
        }
        groups
    }

    /// Writes one JSON passage per line.
    pub fn save(&self, path: &Path) -> Result<()> {
        let mut w = BufWriter::new(std::fs::File::create(path)?);
        for p in &self.passages {
            serde_json::to_writer(&mut w, p)?;
            w.write_all(b"\n")?;
        }
        w.flush()?;
        Ok(())
    }

    pub fn load(path: &Path) -> Result<Self> {
        let reader = BufReader::new(std::fs::File::open(path)?);
        let mut passages = Vec::new();
        for (i, line) in reader.lines().enumerate() {
            let line = line?;
            if line.trim().is_empty() {
                continue;
            }
            let p: Passage = serde_json::from_str(&line).map_err(|e| RqaError::Load {
                path: path.to_path_buf(),
                line: i + 1,
                message: e.to_string(),
            })?;
            passages.push(p);
        }
        Ok(PassageStore::from_passages(passages))
    }
}

impl<'a> IntoIterator for &'a PassageStore {
    type Item = &'a Passage;
    type IntoIter = std::slice::Iter<'a, Passage>;

    fn into_iter(self) -> Self::IntoIter {
        self.passages.iter()
    }
}

static IMAGE_LINK: LazyLock<Regex> =
    LazyLock::new(|| Regex::new(r"!\[[^\]\[]*\]\([^()]*\)").unwrap());
static BARE_IMAGE_URL: LazyLock<Regex> = LazyLock::new(|| {
    Regex::new(r"(?i)https?://[^\s()<>\[\]]+?\.(?:png|jpe?g|gif|svg|webp|bmp|ico)(?:\?[^\s()<>\[\]]*)?(?:\b|$)")
        .unwrap()
});
static LINK: LazyLock<Regex> = LazyLock::new(|| Regex::new(r"\[([^\]\[]*)\]\([^()]*\)").unwrap());

/// Removes markdown image links and bare image URLs, and replaces markdown
/// links with their visible text. Idempotent.
pub fn clean_text(content: &str) -> String {
    let mut current = content.to_string();
    // each pass strictly shrinks the string, so this terminates
    loop {
        let next = IMAGE_LINK.replace_all(&current, "");
        let next = BARE_IMAGE_URL.replace_all(&next, "");
        let next = LINK.replace_all(&next, "$1").into_owned();
        if next == current {
            return current;
        }
        current = next;
    }
}

fn ends_sentence(token: &str) -> bool {
    token
        .trim_end_matches(['"', '\'', ')', ']', '*'])
        .ends_with(['.', '!', '?'])
}

/// Splits `text` into chunks of at most `max_tokens` tokens. A chunk ends at
/// the last sentence boundary in its window when that keeps it at least half
/// full; otherwise it is cut at exactly `max_tokens`. Chunks do not overlap.
pub fn chunk_text(text: &str, max_tokens: usize, tokenizer: &dyn Tokenizer) -> Vec<String> {
    assert!(max_tokens > 0);
    let spans = tokenizer.spans(text);
    let mut chunks = Vec::new();
    let mut start = 0;
    while start < spans.len() {
        let window_end = (start + max_tokens).min(spans.len());
        let mut end = window_end;
        if window_end < spans.len() {
            let min_len = (max_tokens / 2).max(1);
            if let Some(j) = (start + min_len - 1..window_end)
                .rev()
                .find(|&j| ends_sentence(&text[spans[j].clone()]))
            {
                end = j + 1;
            }
        }
        chunks.push(text[spans[start].start..spans[end - 1].end].to_string());
        start = end;
    }
    chunks
}

/// Cleans and chunks every document into a [`PassageStore`].
pub fn ingest(
    documents: &[RawDocument],
    max_passage_tokens: usize,
    tokenizer: &dyn Tokenizer,
) -> Result<PassageStore> {
    if documents.is_empty() {
        return Err(RqaError::EmptyCorpus);
    }
    if max_passage_tokens < MIN_PASSAGE_TOKENS {
        return Err(RqaError::Precondition(format!(
            "max_passage_tokens must be at least {MIN_PASSAGE_TOKENS}, got {max_passage_tokens}"
        )));
    }
    let mut passages = Vec::new();
    for (index, doc) in documents.iter().enumerate() {
        let seq_num = doc.seq_num().unwrap_or(index as i64);
        let Some(source) = doc.source() else {
            return Err(RqaError::schema(
                format!("document seq_num={seq_num}"),
                "metadata is missing a non-empty \"source\"",
            ));
        };
        if doc.content.trim().is_empty() {
            return Err(RqaError::schema(
                format!("document seq_num={seq_num}"),
                "content is empty",
            ));
        }
        let cleaned = clean_text(&doc.content);
        for chunk in chunk_text(&cleaned, max_passage_tokens, tokenizer) {
            passages.push(Passage::new(chunk, source, seq_num, tokenizer));
        }
    }
    Ok(PassageStore::from_passages(passages))
}

/// Reads documents from a JSONL file (`{"content": .., "metadata": {..}}`
/// per line) or from every `.md`/`.txt` file in a directory, in which case the
/// relative path is the source and files are numbered in path order.
pub fn read_documents(path: &Path) -> Result<Vec<RawDocument>> {
    if path.is_dir() {
        let mut files: Vec<_> = std::fs::read_dir(path)?
            .filter_map(|e| e.ok().map(|e| e.path()))
            .filter(|p| {
                p.extension()
                    .is_some_and(|ext| ext == "md" || ext == "txt")
            })
            .collect();
        files.sort();
        files
            .iter()
            .enumerate()
            .map(|(i, f)| {
                let content = std::fs::read_to_string(f)?;
                let source = f
                    .strip_prefix(path)
                    .unwrap_or(f)
                    .to_string_lossy()
                    .into_owned();
                Ok(RawDocument::new(content, source, i as i64))
            })
            .collect()
    } else {
        let reader = BufReader::new(std::fs::File::open(path)?);
        let mut docs = Vec::new();
        for (i, line) in reader.lines().enumerate() {
            let line = line?;
            if line.trim().is_empty() {
                continue;
            }
            docs.push(serde_json::from_str(&line).map_err(|e| RqaError::Load {
                path: path.to_path_buf(),
                line: i + 1,
                message: e.to_string(),
            })?);
        }
        Ok(docs)
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::tokenizer::WhitespaceTokenizer;
    use proptest::prelude::*;

    fn words(n: usize) -> String {
        (0..n).map(|i| format!("w{i}")).collect::<Vec<_>>().join(" ")
    }

    #[test]
    fn short_document_is_one_passage() {
        let docs = vec![RawDocument::new(words(10), "a", 0)];
        let store = ingest(&docs, 400, &WhitespaceTokenizer).unwrap();
        assert_eq!(store.len(), 1);
        assert_eq!(store.passages()[0].token_count, 10);
    }

    #[test]
    fn long_document_splits_greedily() {
        let text = words(900);
        let docs = vec![RawDocument::new(text.clone(), "a", 0)];
        let store = ingest(&docs, 400, &WhitespaceTokenizer).unwrap();
        let counts: Vec<_> = store.iter().map(|p| p.token_count).collect();
        assert_eq!(counts, vec![400, 400, 100]);
        // re-tokenize the concatenation and compare with the original
        let joined: Vec<String> = store
            .iter()
            .flat_map(|p| p.content.split_whitespace().map(str::to_string).collect::<Vec<_>>())
            .collect();
        let original: Vec<String> = text.split_whitespace().map(str::to_string).collect();
        assert_eq!(joined, original);
    }

    #[test]
    fn sentence_boundaries_are_preferred() {
        let mut text = words(30);
        text.push_str(". ");
        text.push_str(&words(20));
        let chunks = chunk_text(&text, 40, &WhitespaceTokenizer);
        assert_eq!(chunks.len(), 2);
        assert!(chunks[0].ends_with("w29."));
        assert_eq!(WhitespaceTokenizer.count(&chunks[1]), 20);
    }

    #[test]
    fn passages_grouped_by_source() {
        let docs = vec![
            RawDocument::new(words(20), "a", 0),
            RawDocument::new(words(25), "b", 1),
            RawDocument::new(format!("x {}", words(30)), "a", 2),
        ];
        let store = ingest(&docs, 16, &WhitespaceTokenizer).unwrap();
        let sources: Vec<_> = store.iter().map(|p| p.source.as_str()).collect();
        let first_b = sources.iter().position(|s| *s == "b").unwrap();
        assert!(sources[..first_b].iter().all(|s| *s == "a"));
        assert!(sources[first_b..].iter().all(|s| *s == "b"));
        assert_eq!(store.by_source().len(), 2);
    }

    #[test]
    fn ingest_errors() {
        assert!(matches!(
            ingest(&[], 400, &WhitespaceTokenizer),
            Err(RqaError::EmptyCorpus)
        ));
        let mut doc = RawDocument::new("hello", "a", 7);
        doc.metadata.remove("source");
        let err = ingest(&[doc], 400, &WhitespaceTokenizer).unwrap_err();
        assert!(err.to_string().contains("seq_num=7"), "{err}");
        let doc = RawDocument::new("hello", "a", 0);
        assert!(matches!(
            ingest(&[doc], 8, &WhitespaceTokenizer),
            Err(RqaError::Precondition(_))
        ));
    }

    #[test]
    fn passage_ids_are_stable() {
        let a = passage_id("src", "body");
        assert_eq!(a, passage_id("src", "body"));
        assert_eq!(a.len(), 16);
        assert_ne!(a, passage_id("src2", "body"));
        assert_ne!(passage_id("ab", "c"), passage_id("a", "bc"));
    }

    #[test]
    fn clean_text_rules() {
        assert_eq!(clean_text("see ![img](http://x/a.png) here"), "see  here");
        assert_eq!(clean_text("[Step 1](#add-a-user)"), "Step 1");
        assert_eq!(clean_text("plain text"), "plain text");
        assert_eq!(clean_text("logo https://cdn.x.com/logo.PNG end"), "logo  end");
        assert_eq!(clean_text("[[a](b)](c)"), "a");
        assert_eq!(clean_text("keep https://x.com/page.html"), "keep https://x.com/page.html");
    }

    #[test]
    fn store_roundtrip_and_errors() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("p.jsonl");
        let docs = vec![
            RawDocument::new(words(20), "a", 0),
            RawDocument::new("x y z", "b", 1),
        ];
        let store = ingest(&docs, 16, &WhitespaceTokenizer).unwrap();
        assert_eq!(store.len(), 3);
        store.save(&path).unwrap();
        assert_eq!(std::fs::read_to_string(&path).unwrap().lines().count(), 3);
        assert_eq!(PassageStore::load(&path).unwrap(), store);

        let empty = PassageStore::default();
        empty.save(&path).unwrap();
        assert_eq!(std::fs::read_to_string(&path).unwrap(), "");
        assert!(PassageStore::load(&path).unwrap().is_empty());

        let good = serde_json::to_string(&store.passages()[0]).unwrap();
        std::fs::write(&path, format!("{good}\n{{not json\n{good}\n")).unwrap();
        match PassageStore::load(&path) {
            Err(RqaError::Load { line, .. }) => assert_eq!(line, 2),
            other => panic!("expected load error, got {other:?}"),
        }
    }

    proptest! {
        #[test]
        fn chunking_preserves_tokens(
            tokens in proptest::collection::vec("[a-z]{1,6}[.!?]?", 0..300),
            seps in proptest::collection::vec(prop_oneof![Just(" "), Just("\n"), Just("  "), Just("\n\n")], 300),
            max in 16usize..64,
        ) {
            let mut text = String::new();
            for (t, s) in tokens.iter().zip(&seps) {
                text.push_str(t);
                text.push_str(s);
            }
            let chunks = chunk_text(&text, max, &WhitespaceTokenizer);
            for c in &chunks {
                prop_assert!(WhitespaceTokenizer.count(c) <= max);
                prop_assert!(WhitespaceTokenizer.count(c) > 0);
            }
            let rejoined: Vec<&str> = chunks.iter().flat_map(|c| c.split_whitespace()).collect();
            let original: Vec<&str> = text.split_whitespace().collect();
            prop_assert_eq!(rejoined, original);
        }

        #[test]
        fn clean_text_is_idempotent(s in "[a-z !\\[\\]()#./:]{0,60}") {
            let once = clean_text(&s);
            prop_assert_eq!(clean_text(&once), once.clone());
        }

        #[test]
        fn clean_text_idempotent_on_urls(s in "(x|https://h.io/a.png|!\\[i\\]\\(u\\)|\\[t\\]\\(#l\\)| ){0,12}") {
            let once = clean_text(&s);
            prop_assert_eq!(clean_text(&once), once.clone());
        }
    }
}
