//! Training data: instruction templates, byte-level tokenization,
//! left-padded batches grouped by (dataset, language), and JSONL ingest.

use std::collections::BTreeMap;
use std::fmt;
use std::path::Path;

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

pub const PAD: usize = 256;
pub const BOS: usize = 257;
pub const EOS: usize = 258;
/// Smallest vocabulary that covers all bytes and the three specials.
pub const MIN_VOCAB: usize = 259;

const BUILTIN_TEMPLATES: &str = include_str!("../assets/templates.json");

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct TrainingExample {
    pub query: String,
    pub positive: String,
    #[serde(default)]
    pub hard_negatives: Vec<String>,
    pub dataset: String,
    pub language: String,
}

impl TrainingExample {
    pub fn validate(&self) -> Result<()> {
        if self.query.is_empty() {
            return Err(Error::Contract("`query` is empty".into()));
        }
        if self.positive.is_empty() {
            return Err(Error::Contract("`positive` is empty".into()));
        }
        if self.hard_negatives.iter().any(|n| n == &self.positive) {
            return Err(Error::Contract("a hard negative duplicates `positive`".into()));
        }
        Ok(())
    }

    pub fn group_key(&self) -> GroupKey {
        GroupKey {
            dataset: self.dataset.clone(),
            language: self.language.clone(),
        }
    }
}

#[derive(Clone, Debug, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
pub struct GroupKey {
    pub dataset: String,
    pub language: String,
}

impl fmt::Display for GroupKey {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "{}/{}", self.dataset, self.language)
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Side {
    Query,
    Document,
}

impl std::str::FromStr for Side {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "query" | "q" => Ok(Side::Query),
            "doc" | "document" | "d" => Ok(Side::Document),
            other => Err(Error::Contract(format!("unknown side `{other}`, expected query or doc"))),
        }
    }
}

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct PromptTemplate {
    #[serde(skip)]
    pub task_name: String,
    pub query_instruction: String,
    pub document_instruction: String,
}

impl PromptTemplate {
    pub fn new(task_name: &str, query_instruction: &str, document_instruction: &str) -> Result<Self> {
        let t = Self {
            task_name: task_name.to_owned(),
            query_instruction: query_instruction.to_owned(),
            document_instruction: document_instruction.to_owned(),
        };
        t.validate()?;
        Ok(t)
    }

    fn validate(&self) -> Result<()> {
        if self.query_instruction.trim().is_empty() || self.document_instruction.trim().is_empty() {
            return Err(Error::Contract(format!("template `{}` has an empty instruction", self.task_name)));
        }
        Ok(())
    }

    pub fn instruction(&self, side: Side) -> &str {
        match side {
            Side::Query => &self.query_instruction,
            Side::Document => &self.document_instruction,
        }
    }
}

/// `instruction + "\n" + text`.
pub fn render(text: &str, template: &PromptTemplate, side: Side) -> String {
    let instruction = template.instruction(side);
    let mut out = String::with_capacity(instruction.len() + 1 + text.len());
    out.push_str(instruction);
    out.push('\n');
    out.push_str(text);
    out
}

#[derive(Clone, Debug, PartialEq)]
pub struct TemplateRegistry {
    templates: BTreeMap<String, PromptTemplate>,
}

impl TemplateRegistry {
    pub fn empty() -> Self {
        Self {
            templates: BTreeMap::new(),
        }
    }

    /// The twelve code-retrieval task templates.
    pub fn builtin() -> Self {
        Self::from_json_str(BUILTIN_TEMPLATES).expect("bundled templates are valid")
    }

    pub fn from_json_str(json: &str) -> Result<Self> {
        let raw: BTreeMap<String, PromptTemplate> = serde_json::from_str(json)?;
        let mut reg = Self::empty();
        for (name, mut t) in raw {
            t.task_name = name;
            reg.insert(t)?;
        }
        Ok(reg)
    }

    pub fn load(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        Self::from_json_str(&text)
    }

    pub fn insert(&mut self, template: PromptTemplate) -> Result<()> {
        template.validate()?;
        self.templates.insert(template.task_name.clone(), template);
        Ok(())
    }

    /// Adds or replaces entries from `other`.
    pub fn extend(&mut self, other: TemplateRegistry) {
        self.templates.extend(other.templates);
    }

    pub fn get(&self, task: &str) -> Result<&PromptTemplate> {
        self.templates.get(task).ok_or_else(|| Error::UnknownTemplate {
            task: task.to_owned(),
            known: self.names().map(str::to_owned).collect(),
        })
    }

    pub fn contains(&self, task: &str) -> bool {
        self.templates.contains_key(task)
    }

    pub fn names(&self) -> impl Iterator<Item = &str> {
        self.templates.keys().map(String::as_str)
    }

    pub fn len(&self) -> usize {
        self.templates.len()
    }

    pub fn is_empty(&self) -> bool {
        self.templates.is_empty()
    }

    pub fn render(&self, text: &str, task: &str, side: Side) -> Result<String> {
        Ok(render(text, self.get(task)?, side))
    }
}

/// Byte-level tokenizer with `PAD`, `BOS` and `EOS` specials.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct Tokenizer {
    pub max_len: usize,
}

impl Tokenizer {
    pub fn new(max_len: usize) -> Result<Self> {
        if max_len < 2 {
            return Err(Error::config("model.max_len", "must be at least 2 to hold BOS and EOS"));
        }
        Ok(Self { max_len })
    }

    /// `[BOS, bytes…, EOS]`, truncated to `max_len` keeping the prefix and the final EOS.
    pub fn tokenize(&self, text: &str) -> Vec<usize> {
        let body = text.len().min(self.max_len - 2);
        let mut ids = Vec::with_capacity(body + 2);
        ids.push(BOS);
        ids.extend(text.as_bytes()[..body].iter().map(|&b| b as usize));
        ids.push(EOS);
        ids
    }

    /// Drops specials and decodes the remaining bytes (lossily, for truncated input).
    pub fn detokenize(&self, ids: &[usize]) -> String {
        let bytes: Vec<u8> = ids.iter().filter(|&&id| id < 256).map(|&id| id as u8).collect();
        String::from_utf8_lossy(&bytes).into_owned()
    }
}

/// A left-padded block of token sequences sharing one group key.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct TokenBatch {
    pub token_ids: Vec<Vec<usize>>,
    pub token_mask: Vec<Vec<bool>>,
    pub group_key: GroupKey,
}

impl TokenBatch {
    pub fn left_padded(sequences: Vec<Vec<usize>>, group_key: GroupKey) -> Self {
        let width = sequences.iter().map(Vec::len).max().unwrap_or(0);
        let mut token_ids = Vec::with_capacity(sequences.len());
        let mut token_mask = Vec::with_capacity(sequences.len());
        for seq in sequences {
            let pad = width - seq.len();
            let mut ids = vec![PAD; pad];
            ids.extend(seq);
            let mut mask = vec![false; pad];
            mask.resize(width, true);
            token_ids.push(ids);
            token_mask.push(mask);
        }
        Self {
            token_ids,
            token_mask,
            group_key,
        }
    }

    pub fn len(&self) -> usize {
        self.token_ids.len()
    }

    pub fn is_empty(&self) -> bool {
        self.token_ids.is_empty()
    }

    pub fn width(&self) -> usize {
        self.token_ids.first().map_or(0, Vec::len)
    }

    pub fn row(&self, i: usize) -> (&[usize], &[bool]) {
        (&self.token_ids[i], &self.token_mask[i])
    }

    /// Mask rows are a false prefix followed by trues.
    pub fn is_left_padded(&self) -> bool {
        self.token_mask.iter().all(|m| !m.windows(2).any(|w| w[0] && !w[1]))
    }
}

/// Indices of one batch, all from the same group.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct BatchPlan {
    pub group_key: GroupKey,
    pub indices: Vec<usize>,
}

/// Groups by (dataset, language), shuffles within each group, cuts
/// contiguous chunks, then shuffles the order of all chunks. Seeded.
pub fn plan_batches(
    examples: &[TrainingExample],
    batch_size: usize,
    seed: u64,
    drop_last: bool,
) -> Result<Vec<BatchPlan>> {
    if batch_size < 2 {
        return Err(Error::Contract(format!(
            "batch_size must be at least 2 for in-batch negatives, got {batch_size}"
        )));
    }
    let mut groups: BTreeMap<GroupKey, Vec<usize>> = BTreeMap::new();
    for (i, ex) in examples.iter().enumerate() {
        groups.entry(ex.group_key()).or_default().push(i);
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut plans = Vec::new();
    for (key, mut indices) in groups {
        indices.shuffle(&mut rng);
        for chunk in indices.chunks(batch_size) {
            if drop_last && chunk.len() < batch_size {
                continue;
            }
            plans.push(BatchPlan {
                group_key: key.clone(),
                indices: chunk.to_vec(),
            });
        }
    }
    plans.shuffle(&mut rng);
    Ok(plans)
}

/// Tokenized contents of one training batch.
#[derive(Clone, Debug, PartialEq)]
pub struct TrainingBatch {
    pub group_key: GroupKey,
    pub example_indices: Vec<usize>,
    pub queries: TokenBatch,
    pub positives: TokenBatch,
    /// Hard negatives of all examples, flattened.
    pub negatives: TokenBatch,
    /// For each row of `negatives`, the position of its query in this batch.
    pub negative_owner: Vec<usize>,
}

impl TrainingBatch {
    pub fn len(&self) -> usize {
        self.example_indices.len()
    }

    pub fn is_empty(&self) -> bool {
        self.example_indices.is_empty()
    }
}

/// Turns examples into token sequences: renders templates (when given),
/// tokenizes, and caps hard negatives at `k_hard`.
#[derive(Clone, Debug)]
pub struct BatchEncoder<'a> {
    pub tokenizer: Tokenizer,
    pub templates: Option<&'a TemplateRegistry>,
    pub k_hard: usize,
}

impl BatchEncoder<'_> {
    pub fn encode_text(&self, text: &str, dataset: &str, side: Side) -> Result<Vec<usize>> {
        match self.templates {
            Some(reg) => Ok(self.tokenizer.tokenize(&reg.render(text, dataset, side)?)),
            None => Ok(self.tokenizer.tokenize(text)),
        }
    }

    pub fn build(&self, examples: &[TrainingExample], plan: &BatchPlan) -> Result<TrainingBatch> {
        let mut queries = Vec::with_capacity(plan.indices.len());
        let mut positives = Vec::with_capacity(plan.indices.len());
        let mut negatives = Vec::new();
        let mut negative_owner = Vec::new();
        for (pos, &i) in plan.indices.iter().enumerate() {
            let ex = &examples[i];
            queries.push(self.encode_text(&ex.query, &ex.dataset, Side::Query)?);
            positives.push(self.encode_text(&ex.positive, &ex.dataset, Side::Document)?);
            for neg in ex.hard_negatives.iter().take(self.k_hard) {
                negatives.push(self.encode_text(neg, &ex.dataset, Side::Document)?);
                negative_owner.push(pos);
            }
        }
        let key = plan.group_key.clone();
        Ok(TrainingBatch {
            group_key: key.clone(),
            example_indices: plan.indices.clone(),
            queries: TokenBatch::left_padded(queries, key.clone()),
            positives: TokenBatch::left_padded(positives, key.clone()),
            negatives: TokenBatch::left_padded(negatives, key),
            negative_owner,
        })
    }
}

/// [`plan_batches`] followed by tokenization of every planned batch.
pub fn make_batches(
    examples: &[TrainingExample],
    encoder: &BatchEncoder<'_>,
    batch_size: usize,
    seed: u64,
    drop_last: bool,
) -> Result<Vec<TrainingBatch>> {
    plan_batches(examples, batch_size, seed, drop_last)?
        .iter()
        .map(|plan| encoder.build(examples, plan))
        .collect()
}

/// Reads training examples, one JSON object per line. Blank lines are
/// skipped. Dataset tags missing from `templates` are logged and kept.
pub fn load_jsonl(path: &Path, templates: Option<&TemplateRegistry>) -> Result<Vec<TrainingExample>> {
    let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
    let mut out = Vec::new();
    for (n, line) in text.lines().enumerate() {
        if line.trim().is_empty() {
            continue;
        }
        let parse_err = |msg: String| Error::Parse {
            path: path.to_path_buf(),
            line: n + 1,
            msg,
        };
        let ex: TrainingExample = serde_json::from_str(line).map_err(|e| parse_err(e.to_string()))?;
        ex.validate().map_err(|e| parse_err(e.to_string()))?;
        if let Some(reg) = templates {
            if !reg.contains(&ex.dataset) {
                log::warn!("{}:{}: unknown dataset tag `{}`", path.display(), n + 1, ex.dataset);
            }
        }
        out.push(ex);
    }
    Ok(out)
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;
    use std::io::Write;

    fn ex(q: &str, dataset: &str, language: &str) -> TrainingExample {
        TrainingExample {
            query: q.into(),
            positive: format!("{q}+"),
            hard_negatives: vec![],
            dataset: dataset.into(),
            language: language.into(),
        }
    }

    #[test]
    fn builtin_registry_has_twelve_tasks() {
        let reg = TemplateRegistry::builtin();
        assert_eq!(reg.len(), 12);
        for name in reg.names() {
            assert_eq!(reg.get(name).unwrap().document_instruction, "Retrieved Answer:");
        }
    }

    #[test]
    fn render_query_and_document() {
        let reg = TemplateRegistry::builtin();
        assert_eq!(
            reg.render("read a jsonl file", "CodeSearchNetRetrieval", Side::Query).unwrap(),
            "Retrieve the code that solves the following query:\nread a jsonl file"
        );
        assert_eq!(
            reg.render("x = 1", "CosQA", Side::Document).unwrap(),
            "Retrieved Answer:\nx = 1"
        );
    }

    #[test]
    fn missing_template_lists_known_tasks() {
        let err = TemplateRegistry::builtin().get("Nope").unwrap_err();
        let msg = err.to_string();
        assert!(msg.contains("Nope") && msg.contains("CosQA"), "{msg}");
    }

    #[test]
    fn empty_instruction_rejected() {
        let json = r#"{"T": {"query_instruction": "", "document_instruction": "d"}}"#;
        assert!(TemplateRegistry::from_json_str(json).is_err());
        assert!(PromptTemplate::new("T", "q", " ").is_err());
    }

    #[test]
    fn tokenize_examples() {
        let tok = Tokenizer::new(128).unwrap();
        assert_eq!(tok.tokenize(""), vec![BOS, EOS]);
        assert_eq!(tok.tokenize("A"), vec![257, 65, 258]);
    }

    #[test]
    fn truncation_keeps_eos() {
        let tok = Tokenizer::new(5).unwrap();
        let ids = tok.tokenize("abcdefgh");
        assert_eq!(ids, vec![BOS, 97, 98, 99, EOS]);
    }

    proptest! {
        #[test]
        fn tokenize_round_trips(s in "\\PC{0,40}") {
            let tok = Tokenizer::new(128).unwrap();
            prop_assume!(s.len() <= 126);
            let ids = tok.tokenize(&s);
            prop_assert_eq!(*ids.last().unwrap(), EOS);
            prop_assert_eq!(tok.detokenize(&ids), s);
        }

        #[test]
        fn every_sequence_ends_with_eos(s in "\\PC{0,300}", max_len in 2usize..64) {
            let ids = Tokenizer::new(max_len).unwrap().tokenize(&s);
            prop_assert!(ids.len() <= max_len);
            prop_assert_eq!(*ids.last().unwrap(), EOS);
        }

        #[test]
        fn render_is_injective(a in "\\PC{0,20}", b in "\\PC{0,20}") {
            prop_assume!(a != b);
            let reg = TemplateRegistry::builtin();
            prop_assert_ne!(
                reg.render(&a, "CosQA", Side::Query).unwrap(),
                reg.render(&b, "CosQA", Side::Query).unwrap()
            );
        }

        #[test]
        fn batches_are_homogeneous_and_cover(n in 0usize..60, bs in 2usize..9, seed in 0u64..1000) {
            let examples: Vec<_> = (0..n)
                .map(|i| ex(&format!("q{i}"), ["A", "B", "C"][i % 3], ["py", "rs"][i % 2]))
                .collect();
            let plans = plan_batches(&examples, bs, seed, false).unwrap();
            let mut seen: Vec<usize> = plans.iter().flat_map(|p| p.indices.clone()).collect();
            seen.sort_unstable();
            prop_assert_eq!(seen, (0..n).collect::<Vec<_>>());
            for p in &plans {
                prop_assert!(p.indices.len() <= bs);
                prop_assert!(p.indices.iter().all(|&i| examples[i].group_key() == p.group_key));
            }
        }
    }

    #[test]
    fn ceiling_division_batch_sizes() {
        let examples: Vec<_> = (0..10).map(|i| ex(&format!("q{i}"), "A", "py")).collect();
        let mut sizes: Vec<usize> = plan_batches(&examples, 4, 1, false)
            .unwrap()
            .iter()
            .map(|p| p.indices.len())
            .collect();
        sizes.sort_unstable();
        assert_eq!(sizes, vec![2, 4, 4]);
        assert_eq!(plan_batches(&examples, 4, 1, true).unwrap().len(), 2);
    }

    #[test]
    fn two_groups_two_batches() {
        let mut examples: Vec<_> = (0..4).map(|i| ex(&format!("a{i}"), "A", "py")).collect();
        examples.extend((0..4).map(|i| ex(&format!("b{i}"), "B", "py")));
        let plans = plan_batches(&examples, 4, 9, false).unwrap();
        assert_eq!(plans.len(), 2);
        for p in plans {
            assert!(p.indices.iter().all(|&i| examples[i].group_key() == p.group_key));
        }
    }

    #[test]
    fn batching_is_seed_deterministic() {
        let examples: Vec<_> = (0..30)
            .map(|i| ex(&format!("q{i}"), ["A", "B"][i % 2], "py"))
            .collect();
        let a = plan_batches(&examples, 4, 7, false).unwrap();
        let b = plan_batches(&examples, 4, 7, false).unwrap();
        assert_eq!(a, b);
        assert!(plan_batches(&[], 4, 7, false).unwrap().is_empty());
        assert!(plan_batches(&examples, 1, 7, false).is_err());
    }

    #[test]
    fn token_batches_are_left_padded() {
        let key = GroupKey {
            dataset: "A".into(),
            language: "py".into(),
        };
        let b = TokenBatch::left_padded(vec![vec![1, 2, 3], vec![4]], key);
        assert_eq!(b.token_ids[1], vec![PAD, PAD, 4]);
        assert_eq!(b.token_mask[1], vec![false, false, true]);
        assert!(b.is_left_padded());
    }

    #[test]
    fn encoder_caps_hard_negatives() {
        let mut e = ex("q", "CosQA", "py");
        e.hard_negatives = (0..10).map(|i| format!("n{i}")).collect();
        let reg = TemplateRegistry::builtin();
        let enc = BatchEncoder {
            tokenizer: Tokenizer::new(64).unwrap(),
            templates: Some(&reg),
            k_hard: 7,
        };
        let plan = BatchPlan {
            group_key: e.group_key(),
            indices: vec![0],
        };
        let batch = enc.build(&[e], &plan).unwrap();
        assert_eq!(batch.negatives.len(), 7);
        assert_eq!(batch.negative_owner, vec![0; 7]);
        let q = enc.tokenizer.detokenize(&batch.queries.token_ids[0]);
        assert!(q.starts_with("Given a query from a web search"));
    }

    #[test]
    fn load_jsonl_cases() {
        let dir = tempfile::tempdir().unwrap();
        let empty = dir.path().join("empty.jsonl");
        std::fs::write(&empty, "").unwrap();
        assert!(load_jsonl(&empty, None).unwrap().is_empty());

        let bad = dir.path().join("bad.jsonl");
        let mut f = std::fs::File::create(&bad).unwrap();
        writeln!(f, r#"{{"query":"a","positive":"b","dataset":"CosQA","language":"py"}}"#).unwrap();
        writeln!(f, r#"{{"query":"a","dataset":"CosQA","language":"py"}}"#).unwrap();
        drop(f);
        let err = load_jsonl(&bad, None).unwrap_err();
        match err {
            Error::Parse { line, msg, .. } => {
                assert_eq!(line, 2);
                assert!(msg.contains("positive"), "{msg}");
            }
            other => panic!("unexpected {other}"),
        }

        let dup = dir.path().join("dup.jsonl");
        std::fs::write(
            &dup,
            r#"{"query":"a","positive":"b","hard_negatives":["b"],"dataset":"X","language":"py"}"#,
        )
        .unwrap();
        assert!(matches!(load_jsonl(&dup, None), Err(Error::Parse { line: 1, .. })));
    }

    #[test]
    fn load_fixture_round_trips_fields() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("train.jsonl");
        let expected = vec![
            TrainingExample {
                query: "read a jsonl file".into(),
                positive: "for line in open(p): json.loads(line)".into(),
                hard_negatives: vec!["open(p).read()".into(), "csv.reader(f)".into()],
                dataset: "CodeSearchNetRetrieval".into(),
                language: "python".into(),
            },
            TrainingExample {
                query: "sum a vector".into(),
                positive: "v.iter().sum()".into(),
                hard_negatives: vec![],
                dataset: "CosQA".into(),
                language: "rust".into(),
            },
            TrainingExample {
                query: "unknown tag is kept".into(),
                positive: "yes".into(),
                hard_negatives: vec!["no".into()],
                dataset: "NotATask".into(),
                language: "go".into(),
            },
        ];
        let body: Vec<String> = expected.iter().map(|e| serde_json::to_string(e).unwrap()).collect();
        std::fs::write(&path, body.join("\n")).unwrap();
        let reg = TemplateRegistry::builtin();
        assert_eq!(load_jsonl(&path, Some(&reg)).unwrap(), expected);
    }
}
