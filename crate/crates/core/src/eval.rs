//! Retrieval evaluation: embed, rank by cosine similarity, score.

use std::collections::{BTreeMap, BTreeSet};
use std::path::Path;

use serde::Deserialize;
use serde_json::{json, Map, Value};

use crate::data::{render, PromptTemplate, Side, TemplateRegistry, Tokenizer};
use crate::error::{Error, Result};
use crate::model::Model;
use crate::tensor::Tensor;

/// One retrieval task. Queries and corpus are kept sorted by id, so corpus
/// position order is doc-id order.
#[derive(Clone, Debug, PartialEq)]
pub struct EvalTask {
    pub name: String,
    pub queries: BTreeMap<String, String>,
    pub corpus: BTreeMap<String, String>,
    pub qrels: BTreeMap<String, BTreeSet<String>>,
    pub template: Option<PromptTemplate>,
}

#[derive(Deserialize)]
struct Record {
    id: String,
    text: String,
}

fn read_records(path: &Path) -> Result<BTreeMap<String, String>> {
    let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
    let mut out = BTreeMap::new();
    for (n, line) in text.lines().enumerate() {
        if line.trim().is_empty() {
            continue;
        }
        let err = |msg: String| Error::Parse {
            path: path.to_path_buf(),
            line: n + 1,
            msg,
        };
        let r: Record = serde_json::from_str(line).map_err(|e| err(e.to_string()))?;
        if out.insert(r.id.clone(), r.text).is_some() {
            return Err(err(format!("duplicate id {:?}", r.id)));
        }
    }
    Ok(out)
}

/// Parses `query-id <TAB> doc-id <TAB> score` lines. A first line whose
/// score column is not numeric is taken as a header. Scores ≤ 0 are
/// non-relevant and skipped.
pub fn parse_qrels(text: &str, path: &Path) -> Result<BTreeMap<String, BTreeSet<String>>> {
    let mut out: BTreeMap<String, BTreeSet<String>> = BTreeMap::new();
    for (n, line) in text.lines().enumerate() {
        if line.trim().is_empty() {
            continue;
        }
        let err = |msg: String| Error::Parse {
            path: path.to_path_buf(),
            line: n + 1,
            msg,
        };
        let cols: Vec<&str> = line.split('\t').map(str::trim).collect();
        if cols.len() != 3 {
            return Err(err(format!("expected 3 tab-separated columns, found {}", cols.len())));
        }
        let score = match cols[2].parse::<f64>() {
            Ok(s) => s,
            Err(_) if n == 0 => continue,
            Err(_) => return Err(err(format!("score {:?} is not a number", cols[2]))),
        };
        if score > 0.0 {
            out.entry(cols[0].to_owned()).or_default().insert(cols[1].to_owned());
        }
    }
    Ok(out)
}

impl EvalTask {
    pub fn new(
        name: &str,
        queries: BTreeMap<String, String>,
        corpus: BTreeMap<String, String>,
        qrels: BTreeMap<String, BTreeSet<String>>,
        template: Option<PromptTemplate>,
    ) -> Result<Self> {
        let task = Self {
            name: name.to_owned(),
            queries,
            corpus,
            qrels,
            template,
        };
        task.validate()?;
        Ok(task)
    }

    pub fn validate(&self) -> Result<()> {
        let bad = |msg: String| Error::Contract(format!("task {}: {msg}", self.name));
        if self.corpus.is_empty() || self.queries.is_empty() {
            return Err(bad("needs at least one query and one document".into()));
        }
        for q in self.queries.keys() {
            if self.qrels.get(q).is_none_or(BTreeSet::is_empty) {
                return Err(bad(format!("query {q:?} has no relevant document")));
            }
        }
        for (q, docs) in &self.qrels {
            if !self.queries.contains_key(q) {
                return Err(bad(format!("qrels mention unknown query {q:?}")));
            }
            if let Some(d) = docs.iter().find(|d| !self.corpus.contains_key(*d)) {
                return Err(bad(format!("qrels mention unknown document {d:?}")));
            }
        }
        Ok(())
    }

    /// Loads `queries.jsonl`, `corpus.jsonl` and `qrels.tsv` from `dir`.
    /// The directory name is the task name; with a registry, it must name a
    /// registered template.
    pub fn load(dir: &Path, templates: Option<&TemplateRegistry>) -> Result<Self> {
        let name = dir
            .file_name()
            .and_then(|n| n.to_str())
            .ok_or_else(|| Error::Contract(format!("cannot derive a task name from {}", dir.display())))?;
        let template = templates.map(|r| r.get(name).cloned()).transpose()?;
        let queries = read_records(&dir.join("queries.jsonl"))?;
        let corpus = read_records(&dir.join("corpus.jsonl"))?;
        let qrels_path = dir.join("qrels.tsv");
        let text = std::fs::read_to_string(&qrels_path).map_err(|e| Error::io(&qrels_path, e))?;
        let qrels = parse_qrels(&text, &qrels_path)?;
        Self::new(name, queries, corpus, qrels, template)
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct RankedList {
    pub query_id: String,
    /// `(doc id, score)`, scores non-increasing.
    pub hits: Vec<(String, f64)>,
}

impl RankedList {
    pub fn ids(&self) -> Vec<&str> {
        self.hits.iter().map(|(id, _)| id.as_str()).collect()
    }
}

fn unit(row: &[f64]) -> Result<Vec<f64>> {
    let n = row.iter().map(|v| v * v).sum::<f64>().sqrt();
    if n == 0.0 || !n.is_finite() {
        return Err(Error::Numeric(format!("cannot rank with a vector of norm {n}")));
    }
    Ok(row.iter().map(|v| v / n).collect())
}

/// Top-`k` corpus rows by cosine similarity to `query` (`1 × d`). Returns
/// `(row, score)`; equal scores keep ascending row order.
pub fn rank(query: &Tensor, corpus: &Tensor, k: usize) -> Result<Vec<(usize, f64)>> {
    if corpus.shape().len() != 2 || corpus.rows() == 0 {
        return Err(Error::Contract("cannot rank against an empty corpus".into()));
    }
    if query.shape().len() != 2 || query.rows() != 1 || query.cols() != corpus.cols() {
        return Err(Error::shape("rank", query.shape(), corpus.shape()));
    }
    if k == 0 || k > corpus.rows() {
        return Err(Error::Contract(format!("k={k} must lie in 1..={}", corpus.rows())));
    }
    let q = unit(query.row(0))?;
    let mut scored = (0..corpus.rows())
        .map(|i| {
            let d = unit(corpus.row(i))?;
            Ok((i, q.iter().zip(&d).map(|(a, b)| a * b).sum::<f64>()))
        })
        .collect::<Result<Vec<_>>>()?;
    // Stable sort keeps ascending row order among equal scores.
    scored.sort_by(|a, b| b.1.total_cmp(&a.1));
    scored.truncate(k);
    Ok(scored)
}

fn check_metric_args(relevant: &BTreeSet<String>, k: usize) -> Result<()> {
    if k == 0 {
        return Err(Error::Contract("k must be at least 1".into()));
    }
    if relevant.is_empty() {
        return Err(Error::Contract("relevant set is empty".into()));
    }
    Ok(())
}

/// Binary-relevance nDCG over the first `k` ranked ids.
pub fn ndcg_at_k<S: AsRef<str>>(ranked: &[S], relevant: &BTreeSet<String>, k: usize) -> Result<f64> {
    check_metric_args(relevant, k)?;
    let gain = |i: usize| 1.0 / ((i + 2) as f64).log2();
    let dcg: f64 = ranked
        .iter()
        .take(k)
        .enumerate()
        .filter(|(_, id)| relevant.contains(id.as_ref()))
        .map(|(i, _)| gain(i))
        .sum();
    let idcg: f64 = (0..k.min(relevant.len())).map(gain).sum();
    Ok(dcg / idcg)
}

/// Reciprocal rank of the first relevant id within `k`, else 0.
pub fn mrr_at_k<S: AsRef<str>>(ranked: &[S], relevant: &BTreeSet<String>, k: usize) -> Result<f64> {
    check_metric_args(relevant, k)?;
    Ok(ranked
        .iter()
        .take(k)
        .position(|id| relevant.contains(id.as_ref()))
        .map_or(0.0, |p| 1.0 / (p + 1) as f64))
}

/// Fraction of relevant ids found within `k`.
pub fn recall_at_k<S: AsRef<str>>(ranked: &[S], relevant: &BTreeSet<String>, k: usize) -> Result<f64> {
    check_metric_args(relevant, k)?;
    let hits = ranked.iter().take(k).filter(|id| relevant.contains(id.as_ref())).count();
    Ok(hits as f64 / relevant.len() as f64)
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct TaskScores {
    pub ndcg: f64,
    pub mrr: f64,
    pub recall: f64,
    pub n_queries: usize,
}

#[derive(Clone, Debug, PartialEq)]
pub struct EvalReport {
    pub k: usize,
    pub tasks: BTreeMap<String, TaskScores>,
    /// Unweighted mean of per-task nDCG.
    pub average: f64,
}

impl EvalReport {
    pub fn from_tasks(k: usize, tasks: BTreeMap<String, TaskScores>) -> Self {
        let average = if tasks.is_empty() {
            0.0
        } else {
            tasks.values().map(|s| s.ndcg).sum::<f64>() / tasks.len() as f64
        };
        Self { k, tasks, average }
    }

    pub fn to_json(&self) -> Value {
        let k = self.k;
        let mut obj = Map::new();
        for (name, s) in &self.tasks {
            obj.insert(
                name.clone(),
                json!({
                    format!("ndcg@{k}"): s.ndcg,
                    format!("mrr@{k}"): s.mrr,
                    format!("recall@{k}"): s.recall,
                    "n_queries": s.n_queries,
                }),
            );
        }
        obj.insert("average".into(), json!(self.average));
        Value::Object(obj)
    }
}

/// Scores precomputed embeddings. Rows of `query_embs` follow
/// `task.queries` order and rows of `corpus_embs` follow `task.corpus` order.
pub fn score_task(task: &EvalTask, query_embs: &Tensor, corpus_embs: &Tensor, k: usize) -> Result<TaskScores> {
    let doc_ids: Vec<&String> = task.corpus.keys().collect();
    if corpus_embs.rows() != doc_ids.len() || query_embs.rows() != task.queries.len() {
        return Err(Error::Contract(format!(
            "task {}: embedding counts do not match queries/corpus",
            task.name
        )));
    }
    let depth = k.min(doc_ids.len());
    let (mut ndcg, mut mrr, mut recall) = (0.0, 0.0, 0.0);
    for (qi, qid) in task.queries.keys().enumerate() {
        let q = Tensor::from_rows(&[query_embs.row(qi).to_vec()])?;
        let ranked: Vec<&str> = rank(&q, corpus_embs, depth)?
            .into_iter()
            .map(|(i, _)| doc_ids[i].as_str())
            .collect();
        let rel = &task.qrels[qid];
        ndcg += ndcg_at_k(&ranked, rel, k)?;
        mrr += mrr_at_k(&ranked, rel, k)?;
        recall += recall_at_k(&ranked, rel, k)?;
    }
    let n = task.queries.len();
    let div = n as f64;
    Ok(TaskScores {
        ndcg: ndcg / div,
        mrr: mrr / div,
        recall: recall / div,
        n_queries: n,
    })
}

fn embed_side(model: &Model, tokenizer: &Tokenizer, texts: Vec<&String>, template: Option<&PromptTemplate>, side: Side) -> Result<Tensor> {
    let seqs: Vec<Vec<usize>> = texts
        .into_iter()
        .map(|t| match template {
            Some(tpl) => tokenizer.tokenize(&render(t, tpl, side)),
            None => tokenizer.tokenize(t),
        })
        .collect();
    let embs = model.embed_many(&seqs, true)?;
    let rows: Vec<Vec<f64>> = embs.into_iter().map(|e| e.values.into_data()).collect();
    Tensor::from_rows(&rows)
}

/// Embeds and scores every task; the average is the unweighted mean of
/// per-task nDCG@k.
pub fn evaluate(model: &Model, tokenizer: &Tokenizer, tasks: &[EvalTask], k: usize) -> Result<EvalReport> {
    if k == 0 {
        return Err(Error::Contract("k must be at least 1".into()));
    }
    let mut out = BTreeMap::new();
    for task in tasks {
        task.validate()?;
        let tpl = task.template.as_ref();
        let q = embed_side(model, tokenizer, task.queries.values().collect(), tpl, Side::Query)?;
        let d = embed_side(model, tokenizer, task.corpus.values().collect(), tpl, Side::Document)?;
        let scores = score_task(task, &q, &d, k)?;
        log::info!("{}: ndcg@{k}={:.4} over {} queries", task.name, scores.ndcg, scores.n_queries);
        if out.insert(task.name.clone(), scores).is_some() {
            return Err(Error::Contract(format!("task {} listed twice", task.name)));
        }
    }
    Ok(EvalReport::from_tasks(k, out))
}
