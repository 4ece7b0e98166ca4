//! Topic-labelled character corpora and Dirichlet Non-IID partitioning.
//!
//! Documents are the atomic unit: each one is a single training or test
//! sample and is assigned to exactly one client.

use std::collections::{BTreeMap, BTreeSet};
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::linalg::{dirichlet_sample, Rng};

/// Character ↔ token-id table.
#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct Vocab {
    chars: Vec<char>,
}

impl Vocab {
    pub fn new(mut chars: Vec<char>) -> Result<Self> {
        chars.sort_unstable();
        chars.dedup();
        if chars.is_empty() || chars.len() > 128 {
            return Err(Error::Domain(format!(
                "vocabulary must hold 1..=128 characters, got {}",
                chars.len()
            )));
        }
        Ok(Vocab { chars })
    }

    /// Space, full stop and the lowercase Latin alphabet.
    pub fn synthetic() -> Self {
        let mut chars = vec![' ', '.'];
        chars.extend('a'..='z');
        Vocab { chars }
    }

    pub fn len(&self) -> usize {
        self.chars.len()
    }

    pub fn is_empty(&self) -> bool {
        self.chars.is_empty()
    }

    pub fn id(&self, c: char) -> Option<u32> {
        self.chars.binary_search(&c).ok().map(|i| i as u32)
    }

    pub fn encode(&self, text: &str) -> Result<Vec<u32>> {
        text.chars()
            .map(|c| {
                self.id(c)
                    .ok_or_else(|| Error::Domain(format!("character {c:?} not in vocabulary")))
            })
            .collect()
    }

    pub fn decode(&self, ids: &[u32]) -> String {
        ids.iter()
            .map(|&i| self.chars.get(i as usize).copied().unwrap_or('?'))
            .collect()
    }
}

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct Document {
    pub topic: usize,
    pub tokens: Vec<u32>,
}

#[derive(Clone, Debug, PartialEq, Eq)]
pub struct Corpus {
    pub documents: Vec<Document>,
    pub vocab: Vocab,
    pub n_topics: usize,
}

impl Corpus {
    pub fn new(documents: Vec<Document>, vocab: Vocab, n_topics: usize) -> Result<Self> {
        if documents.is_empty() {
            return Err(Error::Domain("corpus has no documents".into()));
        }
        let mut covered = BTreeSet::new();
        for (i, d) in documents.iter().enumerate() {
            if d.tokens.len() < 2 {
                return Err(Error::Domain(format!("document {i} is shorter than two tokens")));
            }
            if d.topic >= n_topics {
                return Err(Error::Domain(format!(
                    "document {i} has topic {} >= {n_topics}",
                    d.topic
                )));
            }
            if let Some(&t) = d.tokens.iter().find(|&&t| t as usize >= vocab.len()) {
                return Err(Error::Domain(format!(
                    "document {i} holds token {t} outside the vocabulary"
                )));
            }
            covered.insert(d.topic);
        }
        if covered.len() != n_topics {
            return Err(Error::Domain(format!(
                "only {} of {n_topics} topics have documents",
                covered.len()
            )));
        }
        Ok(Corpus {
            documents,
            vocab,
            n_topics,
        })
    }

    pub fn len(&self) -> usize {
        self.documents.len()
    }

    pub fn is_empty(&self) -> bool {
        self.documents.is_empty()
    }

    /// Unigram distribution of one topic's tokens.
    pub fn unigram(&self, topic: usize) -> Vec<f64> {
        let mut counts = vec![0.0; self.vocab.len()];
        for d in self.documents.iter().filter(|d| d.topic == topic) {
            for &t in &d.tokens {
                counts[t as usize] += 1.0;
            }
        }
        let total: f64 = counts.iter().sum();
        if total > 0.0 {
            counts.iter_mut().for_each(|c| *c /= total);
        }
        counts
    }

    /// Canonical byte encoding, used to compare corpora.
    pub fn to_bytes(&self) -> Vec<u8> {
        let mut b = Vec::new();
        for d in &self.documents {
            b.extend_from_slice(&(d.topic as u32).to_le_bytes());
            b.extend_from_slice(&(d.tokens.len() as u32).to_le_bytes());
            b.extend(d.tokens.iter().map(|&t| t as u8));
        }
        b
    }
}

pub fn total_variation(p: &[f64], q: &[f64]) -> f64 {
    0.5 * p.iter().zip(q).map(|(a, b)| (a - b).abs()).sum::<f64>()
}

const PALETTE: usize = 6;
const WORDS_PER_TOPIC: usize = 12;

/// Letter palettes, one per topic, sharing as few letters as the alphabet
/// allows.
fn topic_palettes(n_topics: usize, rng: &mut Rng) -> Vec<Vec<char>> {
    let letters: Vec<char> = ('a'..='z').collect();
    let mut palettes: Vec<Vec<char>> = Vec::with_capacity(n_topics);
    for _ in 0..n_topics {
        let mut allowed_overlap = 1;
        let mut attempts = 0;
        loop {
            let mut pool = letters.clone();
            rng.shuffle(&mut pool);
            let cand: Vec<char> = pool[..PALETTE].to_vec();
            let ok = palettes
                .iter()
                .all(|p| p.iter().filter(|c| cand.contains(c)).count() <= allowed_overlap);
            if ok {
                palettes.push(cand);
                break;
            }
            attempts += 1;
            if attempts % 200 == 0 {
                allowed_overlap += 1;
            }
        }
    }
    palettes
}

/// Topic-labelled synthetic corpus. Each topic draws words from its own
/// letter palette with Zipf-like word frequencies, so topics differ sharply
/// in character statistics. Every document is exactly `doc_len` tokens.
pub fn synth_corpus(n_topics: usize, docs_per_topic: usize, doc_len: usize, rng: &mut Rng) -> Result<Corpus> {
    if n_topics == 0 || docs_per_topic == 0 || doc_len < 2 {
        return Err(Error::Domain(format!(
            "synthetic corpus needs positive topics ({n_topics}) and documents ({docs_per_topic}), and doc_len >= 2 ({doc_len})"
        )));
    }
    let vocab = Vocab::synthetic();
    let palettes = topic_palettes(n_topics, rng);
    let lexicons: Vec<Vec<String>> = palettes
        .iter()
        .map(|pal| {
            (0..WORDS_PER_TOPIC)
                .map(|_| {
                    let len = 2 + rng.below(4);
                    (0..len).map(|_| pal[rng.below(pal.len())]).collect()
                })
                .collect()
        })
        .collect();
    let zipf: Vec<f64> = (0..WORDS_PER_TOPIC).map(|r| 1.0 / (r as f64 + 1.0)).collect();

    let mut documents = Vec::with_capacity(n_topics * docs_per_topic);
    for (topic, lexicon) in lexicons.iter().enumerate() {
        for _ in 0..docs_per_topic {
            let mut text = String::with_capacity(doc_len + 8);
            let mut words_in_sentence = 0;
            while text.chars().count() < doc_len {
                let w = &lexicon[rng.weighted_index(&zipf).expect("positive weights")];
                text.push_str(w);
                words_in_sentence += 1;
                if words_in_sentence >= 4 && rng.uniform() < 0.3 {
                    text.push('.');
                    words_in_sentence = 0;
                }
                text.push(' ');
            }
            let text: String = text.chars().take(doc_len).collect();
            documents.push(Document {
                topic,
                tokens: vocab.encode(&text)?,
            });
        }
    }
    Corpus::new(documents, vocab, n_topics)
}

/// One UTF-8 file per topic, one document per line. Lines longer than
/// `max_doc_len` characters are split into consecutive chunks; chunks
/// shorter than two characters are dropped.
pub fn import_corpus(paths: &[impl AsRef<Path>], max_doc_len: usize) -> Result<Corpus> {
    if paths.is_empty() {
        return Err(Error::config("corpus import needs at least one topic file"));
    }
    if max_doc_len < 2 {
        return Err(Error::config("max_doc_len must be at least 2"));
    }
    let mut raw: Vec<(usize, Vec<char>)> = Vec::new();
    for (topic, p) in paths.iter().enumerate() {
        let p = p.as_ref();
        let text = std::fs::read_to_string(p).map_err(|e| Error::io(p, e))?;
        for line in text.lines() {
            let chars: Vec<char> = line.chars().collect();
            for chunk in chars.chunks(max_doc_len) {
                if chunk.len() >= 2 {
                    raw.push((topic, chunk.to_vec()));
                }
            }
        }
    }
    let vocab = Vocab::new(raw.iter().flat_map(|(_, c)| c.iter().copied()).collect())?;
    let documents = raw
        .into_iter()
        .map(|(topic, chars)| Document {
            topic,
            tokens: chars
                .iter()
                .map(|&c| vocab.id(c).expect("vocab built from text"))
                .collect(),
        })
        .collect();
    Corpus::new(documents, vocab, paths.len())
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct PartitionConfig {
    pub n_clients: usize,
    /// Dirichlet concentration over topics; smaller is more skewed.
    pub concentration: f64,
    pub seed: u64,
    /// Minimum documents per client (train and test together).
    pub min_samples_per_client: usize,
}

impl Default for PartitionConfig {
    fn default() -> Self {
        PartitionConfig {
            n_clients: 20,
            concentration: 0.3,
            seed: 0,
            min_samples_per_client: 2,
        }
    }
}

impl PartitionConfig {
    pub fn validate(&self) -> Result<()> {
        let mut problems = Vec::new();
        if self.n_clients == 0 {
            problems.push("data.n_clients must be at least 1".to_string());
        }
        if !(self.concentration > 0.0) || !self.concentration.is_finite() {
            problems.push(format!("data.alpha must be positive, got {}", self.concentration));
        }
        if self.min_samples_per_client == 0 {
            problems.push("data.min_samples_per_client must be at least 1".to_string());
        }
        if problems.is_empty() {
            Ok(())
        } else {
            Err(Error::Config(problems))
        }
    }
}

/// One client's private data.
#[derive(Clone, Debug, PartialEq)]
pub struct ClientDataset {
    pub client_id: usize,
    pub train: Vec<Vec<u32>>,
    pub test: Vec<Vec<u32>>,
    /// Corpus indices of the train and test documents.
    pub train_docs: Vec<usize>,
    pub test_docs: Vec<usize>,
    pub topic_histogram: Vec<usize>,
    /// Topic proportions drawn for this client.
    pub mixture: Vec<f64>,
}

impl ClientDataset {
    /// Training sample count.
    pub fn n_k(&self) -> usize {
        self.train.len()
    }

    pub fn max_topic_share(&self) -> f64 {
        let total: usize = self.topic_histogram.iter().sum();
        if total == 0 {
            return 0.0;
        }
        *self.topic_histogram.iter().max().unwrap() as f64 / total as f64
    }

    pub fn topic_shares(&self) -> Vec<f64> {
        let total: usize = self.topic_histogram.iter().sum();
        self.topic_histogram
            .iter()
            .map(|&c| if total == 0 { 0.0 } else { c as f64 / total as f64 })
            .collect()
    }
}

/// 80/20 document split; at least one test document whenever the client
/// holds two or more.
fn split_sizes(n: usize) -> (usize, usize) {
    if n < 2 {
        return (n, 0);
    }
    let test = ((n as f64) * 0.2).round().clamp(1.0, (n - 1) as f64) as usize;
    (n - test, test)
}

/// Dirichlet topic-mixture partitioning.
///
/// Each client draws `p_k ~ Dir(alpha)` over topics. Every document of
/// topic `l` then goes to client `k` with probability proportional to
/// `p_k[l]`, so a client's share of a topic tracks its drawn weight on it
/// and client sizes vary as they do in practice. Clients left below the
/// minimum take documents from the largest clients, preferring the topic
/// they weight most.
pub fn partition(corpus: &Corpus, config: &PartitionConfig) -> Result<Vec<ClientDataset>> {
    config.validate()?;
    let k = config.n_clients;
    let n = corpus.len();
    let min = config.min_samples_per_client;
    if n < k * min {
        return Err(Error::Partition(format!(
            "{n} documents cannot give {k} clients at least {min} each (need {})",
            k * min
        )));
    }
    let mut rng = Rng::stream(config.seed, "partition");
    let mixtures: Vec<Vec<f64>> = (0..k)
        .map(|_| dirichlet_sample(&mut rng, config.concentration, corpus.n_topics))
        .collect::<Result<_>>()?;

    let mut assigned: Vec<Vec<usize>> = vec![Vec::new(); k];
    let column = |topic: usize| -> Vec<f64> { mixtures.iter().map(|p| p[topic]).collect() };
    let columns: Vec<Vec<f64>> = (0..corpus.n_topics).map(column).collect();
    for (i, d) in corpus.documents.iter().enumerate() {
        // a topic no client weights at all falls back to a uniform choice
        let c = rng.weighted_index(&columns[d.topic]).unwrap_or_else(|| rng.below(k));
        assigned[c].push(i);
    }

    while let Some(short) = (0..k).find(|&c| assigned[c].len() < min) {
        let donor = (0..k)
            .max_by_key(|&c| (assigned[c].len(), std::cmp::Reverse(c)))
            .expect("at least one client");
        let pos = (0..assigned[donor].len())
            .max_by(|&a, &b| {
                let wa = mixtures[short][corpus.documents[assigned[donor][a]].topic];
                let wb = mixtures[short][corpus.documents[assigned[donor][b]].topic];
                wa.total_cmp(&wb).then(b.cmp(&a))
            })
            .expect("donor holds more than the minimum");
        let doc = assigned[donor].swap_remove(pos);
        assigned[short].push(doc);
    }
    for docs in &mut assigned {
        rng.shuffle(docs);
    }

    Ok(assigned
        .into_iter()
        .zip(mixtures)
        .enumerate()
        .map(|(client_id, (docs, mixture))| {
            let (n_train, _) = split_sizes(docs.len());
            let (train_docs, test_docs) = docs.split_at(n_train);
            let mut topic_histogram = vec![0; corpus.n_topics];
            for &d in &docs {
                topic_histogram[corpus.documents[d].topic] += 1;
            }
            let tokens = |ids: &[usize]| ids.iter().map(|&d| corpus.documents[d].tokens.clone()).collect();
            ClientDataset {
                client_id,
                train: tokens(train_docs),
                test: tokens(test_docs),
                train_docs: train_docs.to_vec(),
                test_docs: test_docs.to_vec(),
                topic_histogram,
                mixture,
            }
        })
        .collect())
}

/// Pools every client's training documents, as for a centralized baseline.
pub fn pooled_train(clients: &[ClientDataset]) -> Vec<Vec<u32>> {
    clients.iter().flat_map(|c| c.train.iter().cloned()).collect()
}

/// Every client's test documents, ordered by client id.
pub fn global_test(clients: &[ClientDataset]) -> Vec<Vec<u32>> {
    clients.iter().flat_map(|c| c.test.iter().cloned()).collect()
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct HeterogeneityReport {
    pub topic_histograms: Vec<Vec<usize>>,
    /// Mean total-variation distance over client pairs; 0 with one client.
    pub mean_pairwise_tv: f64,
    pub mean_max_share: f64,
    pub median_max_share: f64,
}

pub fn heterogeneity_report(clients: &[ClientDataset]) -> Result<HeterogeneityReport> {
    if clients.is_empty() {
        return Err(Error::Domain("heterogeneity report over zero clients".into()));
    }
    let shares: Vec<Vec<f64>> = clients.iter().map(ClientDataset::topic_shares).collect();
    let mut tv_sum = 0.0;
    let mut pairs = 0usize;
    for i in 0..shares.len() {
        for j in i + 1..shares.len() {
            tv_sum += total_variation(&shares[i], &shares[j]);
            pairs += 1;
        }
    }
    let mut max_shares: Vec<f64> = clients.iter().map(ClientDataset::max_topic_share).collect();
    let mean_max_share = max_shares.iter().sum::<f64>() / max_shares.len() as f64;
    max_shares.sort_by(f64::total_cmp);
    let m = max_shares.len();
    let median_max_share = if m % 2 == 1 {
        max_shares[m / 2]
    } else {
        0.5 * (max_shares[m / 2 - 1] + max_shares[m / 2])
    };
    Ok(HeterogeneityReport {
        topic_histograms: clients.iter().map(|c| c.topic_histogram.clone()).collect(),
        mean_pairwise_tv: if pairs == 0 { 0.0 } else { tv_sum / pairs as f64 },
        mean_max_share,
        median_max_share,
    })
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ManifestClient {
    pub client_id: usize,
    pub train_docs: Vec<usize>,
    pub test_docs: Vec<usize>,
    pub topic_histogram: Vec<usize>,
}

/// Audit trail of which documents went where.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct PartitionManifest {
    pub n_documents: usize,
    pub n_topics: usize,
    pub clients: Vec<ManifestClient>,
}

impl PartitionManifest {
    pub fn new(corpus: &Corpus, clients: &[ClientDataset]) -> Self {
        PartitionManifest {
            n_documents: corpus.len(),
            n_topics: corpus.n_topics,
            clients: clients
                .iter()
                .map(|c| ManifestClient {
                    client_id: c.client_id,
                    train_docs: c.train_docs.clone(),
                    test_docs: c.test_docs.clone(),
                    topic_histogram: c.topic_histogram.clone(),
                })
                .collect(),
        }
    }

    /// Every document appears exactly once and no client shares a document
    /// between its train and test splits.
    pub fn check_complete(&self) -> Result<()> {
        let mut seen = BTreeMap::new();
        for c in &self.clients {
            for &d in c.train_docs.iter().chain(&c.test_docs) {
                if let Some(prev) = seen.insert(d, c.client_id) {
                    return Err(Error::Partition(format!(
                        "document {d} assigned to clients {prev} and {}",
                        c.client_id
                    )));
                }
            }
        }
        if seen.len() != self.n_documents || seen.keys().any(|&d| d >= self.n_documents) {
            return Err(Error::Partition(format!(
                "{} of {} documents assigned",
                seen.len(),
                self.n_documents
            )));
        }
        Ok(())
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::linalg::Rng;
    use proptest::prelude::*;

    fn corpus(topics: usize, per: usize) -> Corpus {
        synth_corpus(topics, per, 17, &mut Rng::seed_from(1)).unwrap()
    }

    #[test]
    fn single_topic_corpus_shares_label() {
        let c = corpus(1, 5);
        assert!(c.documents.iter().all(|d| d.topic == 0));
        assert!(c.documents.iter().all(|d| d.tokens.len() == 17));
    }

    #[test]
    fn synth_is_seed_deterministic() {
        let a = synth_corpus(4, 6, 33, &mut Rng::seed_from(9)).unwrap();
        let b = synth_corpus(4, 6, 33, &mut Rng::seed_from(9)).unwrap();
        let c = synth_corpus(4, 6, 33, &mut Rng::seed_from(10)).unwrap();
        assert_eq!(a.to_bytes(), b.to_bytes());
        assert_ne!(a.to_bytes(), c.to_bytes());
    }

    #[test]
    fn topics_have_distinct_unigrams() {
        let c = synth_corpus(10, 40, 65, &mut Rng::seed_from(3)).unwrap();
        let unigrams: Vec<Vec<f64>> = (0..10).map(|t| c.unigram(t)).collect();
        for i in 0..10 {
            for j in i + 1..10 {
                let tv = total_variation(&unigrams[i], &unigrams[j]);
                assert!(tv > 0.3, "topics {i},{j}: {tv}");
            }
        }
    }

    #[test]
    fn synth_rejects_zero_counts() {
        assert!(synth_corpus(0, 1, 5, &mut Rng::seed_from(0)).is_err());
        assert!(synth_corpus(1, 0, 5, &mut Rng::seed_from(0)).is_err());
    }

    #[test]
    fn vocab_round_trip() {
        let v = Vocab::synthetic();
        assert_eq!(v.len(), 28);
        let ids = v.encode("hello world.").unwrap();
        assert_eq!(v.decode(&ids), "hello world.");
        assert!(v.encode("Ä").is_err());
    }

    #[test]
    fn single_client_holds_everything() {
        let c = corpus(3, 10);
        let parts = partition(
            &c,
            &PartitionConfig {
                n_clients: 1,
                ..PartitionConfig::default()
            },
        )
        .unwrap();
        assert_eq!(parts.len(), 1);
        assert_eq!(parts[0].train.len() + parts[0].test.len(), 30);
        assert_eq!(parts[0].test.len(), 6);
    }

    #[test]
    fn infeasible_minimum_is_reported() {
        let c = corpus(2, 3);
        let err = partition(
            &c,
            &PartitionConfig {
                n_clients: 4,
                min_samples_per_client: 2,
                ..PartitionConfig::default()
            },
        )
        .unwrap_err();
        assert!(matches!(err, Error::Partition(ref m) if m.contains("need 8")), "{err}");
    }

    #[test]
    fn report_extremes() {
        let mk = |hist: Vec<usize>| ClientDataset {
            client_id: 0,
            train: vec![],
            test: vec![],
            train_docs: vec![],
            test_docs: vec![],
            topic_histogram: hist,
            mixture: vec![],
        };
        let same = heterogeneity_report(&[mk(vec![2, 2]), mk(vec![3, 3])]).unwrap();
        assert_eq!(same.mean_pairwise_tv, 0.0);
        let disjoint = heterogeneity_report(&[mk(vec![4, 0]), mk(vec![0, 5])]).unwrap();
        assert_eq!(disjoint.mean_pairwise_tv, 1.0);
        assert!(heterogeneity_report(&[]).is_err());
    }

    #[test]
    fn import_reads_topic_files() {
        let dir = tempfile::tempdir().unwrap();
        let a = dir.path().join("a.txt");
        let b = dir.path().join("b.txt");
        std::fs::write(&a, "the cat sat\non the mat\n").unwrap();
        std::fs::write(&b, "zyx wvu\nx\n").unwrap();
        let c = import_corpus(&[&a, &b], 5).unwrap();
        assert_eq!(c.n_topics, 2);
        assert!(c.documents.iter().all(|d| (2..=5).contains(&d.tokens.len())));
        assert_eq!(c.vocab.decode(&c.documents[0].tokens), "the c");
        assert!(import_corpus(&[dir.path().join("missing.txt")], 5).is_err());
    }

    proptest! {
        #![proptest_config(ProptestConfig::with_cases(48))]

        #[test]
        fn partition_is_complete_and_disjoint(seed in any::<u64>(), k in 1usize..12, alpha in 0.05f64..50.0) {
            let c = corpus(5, 8);
            let cfg = PartitionConfig { n_clients: k, concentration: alpha, seed, min_samples_per_client: 2 };
            let parts = partition(&c, &cfg).unwrap();
            let manifest = PartitionManifest::new(&c, &parts);
            prop_assert!(manifest.check_complete().is_ok());
            for p in &parts {
                prop_assert!(p.train.len() + p.test.len() >= 2);
                prop_assert!(!p.test.is_empty());
                let n = p.train.len() + p.test.len();
                prop_assert!((p.train.len() as f64 - 0.8 * n as f64).abs() <= 1.0);
                let train: BTreeSet<_> = p.train_docs.iter().collect();
                prop_assert!(p.test_docs.iter().all(|d| !train.contains(d)));
                prop_assert_eq!(p.topic_histogram.iter().sum::<usize>(), n);
            }
            let again = partition(&c, &cfg).unwrap();
            prop_assert_eq!(parts, again);
        }
    }
}
