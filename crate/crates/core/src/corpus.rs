//! Corpus ingestion, vocabulary construction and the word-cluster partition
//! used by the class-factorized softmax.

use std::collections::HashMap;
use std::fmt::Write as _;
use std::fs;
use std::path::Path;

use sha2::{Digest, Sha256};

use crate::error::{Error, Result};

pub const UNK: &str = "<unk>";
pub const EOS: &str = "</s>";

/// Word ↔ id map with counts and a cluster partition.
///
/// Ids `0` and `1` are always [`UNK`] and [`EOS`]; the remaining ids follow
/// descending frequency with ties broken by surface form.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct Vocabulary {
    words: Vec<String>,
    ids: HashMap<String, usize>,
    counts: Vec<u64>,
    unk_id: usize,
    eos_id: usize,
    clusters: Vec<usize>,
    cluster_members: Vec<Vec<usize>>,
}

/// Assignment of every id to one cluster.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct ClusterPartition {
    /// id → cluster index
    pub clusters: Vec<usize>,
    /// cluster index → member ids, ascending
    pub members: Vec<Vec<usize>>,
}

/// Splits ids into `cluster_count` bins of roughly equal unigram mass.
///
/// Ids are scanned by descending count (ties by surface form). The current
/// cluster closes once its mass reaches `1/cluster_count`, or earlier when
/// every remaining id is needed to fill the remaining clusters. The last
/// cluster never closes. Mass comparisons use exact integer arithmetic.
pub fn assign_clusters(words: &[String], counts: &[u64], cluster_count: usize) -> ClusterPartition {
    let n = words.len();
    let target = cluster_count.min(n).max(1);
    let total: u128 = counts.iter().map(|&c| c as u128).sum();

    let mut order: Vec<usize> = (0..n).collect();
    order.sort_by(|&a, &b| counts[b].cmp(&counts[a]).then_with(|| words[a].cmp(&words[b])));

    let mut clusters = vec![0; n];
    let mut members = vec![Vec::new(); target];
    let mut current = 0;
    let mut mass: u128 = 0;
    for (pos, &id) in order.iter().enumerate() {
        clusters[id] = current;
        members[current].push(id);
        mass += counts[id] as u128;
        let remaining_ids = n - pos - 1;
        let remaining_clusters = target - current - 1;
        if current + 1 < target && (mass * target as u128 >= total || remaining_ids == remaining_clusters)
        {
            current += 1;
            mass = 0;
        }
    }
    for m in &mut members {
        m.sort_unstable();
    }
    ClusterPartition { clusters, members }
}

impl Vocabulary {
    /// Builds a vocabulary from whitespace-tokenized sentences.
    ///
    /// Keeps the `max_size − 2` most frequent surface forms plus [`UNK`] and
    /// [`EOS`]. The UNK count is the number of dropped token occurrences and
    /// the EOS count is the number of sentences.
    pub fn build<S: AsRef<str>>(lines: &[S], max_size: usize, cluster_count: usize) -> Result<Self> {
        if lines.is_empty() {
            return Err(Error::Ingest("corpus is empty".into()));
        }
        if max_size < 2 {
            return Err(Error::Config(format!("vocabulary size {max_size} < 2")));
        }
        if cluster_count < 1 || cluster_count > max_size {
            return Err(Error::Config(format!(
                "cluster count {cluster_count} must lie in [1, {max_size}]"
            )));
        }

        let mut freq: HashMap<&str, u64> = HashMap::new();
        let mut literal_unk = 0u64;
        for line in lines {
            for tok in line.as_ref().split_whitespace() {
                match tok {
                    UNK => literal_unk += 1,
                    EOS => {}
                    _ => *freq.entry(tok).or_insert(0) += 1,
                }
            }
        }
        let mut ranked: Vec<(&str, u64)> = freq.into_iter().collect();
        ranked.sort_by(|a, b| b.1.cmp(&a.1).then_with(|| a.0.cmp(b.0)));
        let keep = (max_size - 2).min(ranked.len());
        let dropped: u64 = ranked[keep..].iter().map(|(_, c)| c).sum();

        let mut words = vec![UNK.to_string(), EOS.to_string()];
        let mut counts = vec![literal_unk + dropped, lines.len() as u64];
        for &(w, c) in &ranked[..keep] {
            words.push(w.to_string());
            counts.push(c);
        }
        Ok(Self::from_parts(words, counts, None, cluster_count))
    }

    fn from_parts(
        words: Vec<String>,
        counts: Vec<u64>,
        clusters: Option<Vec<usize>>,
        cluster_count: usize,
    ) -> Self {
        let ids: HashMap<String, usize> =
            words.iter().enumerate().map(|(i, w)| (w.clone(), i)).collect();
        let partition = match clusters {
            Some(clusters) => {
                let c = clusters.iter().max().map_or(0, |m| m + 1);
                let mut members = vec![Vec::new(); c];
                for (id, &k) in clusters.iter().enumerate() {
                    members[k].push(id);
                }
                ClusterPartition { clusters, members }
            }
            None => assign_clusters(&words, &counts, cluster_count),
        };
        Vocabulary {
            unk_id: ids[UNK],
            eos_id: ids[EOS],
            words,
            ids,
            counts,
            clusters: partition.clusters,
            cluster_members: partition.members,
        }
    }

    /// Reassigns clusters from the stored counts.
    pub fn recluster(&mut self, cluster_count: usize) {
        let p = assign_clusters(&self.words, &self.counts, cluster_count);
        self.clusters = p.clusters;
        self.cluster_members = p.members;
    }

    pub fn len(&self) -> usize {
        self.words.len()
    }

    pub fn is_empty(&self) -> bool {
        self.words.is_empty()
    }

    pub fn unk_id(&self) -> usize {
        self.unk_id
    }

    pub fn eos_id(&self) -> usize {
        self.eos_id
    }

    pub fn id(&self, word: &str) -> Option<usize> {
        self.ids.get(word).copied()
    }

    /// Id of `word`, or the UNK id when it is out of vocabulary.
    pub fn id_or_unk(&self, word: &str) -> usize {
        self.id(word).unwrap_or(self.unk_id)
    }

    pub fn word(&self, id: usize) -> &str {
        &self.words[id]
    }

    pub fn words(&self) -> &[String] {
        &self.words
    }

    pub fn count(&self, id: usize) -> u64 {
        self.counts[id]
    }

    pub fn counts(&self) -> &[u64] {
        &self.counts
    }

    pub fn cluster_count(&self) -> usize {
        self.cluster_members.len()
    }

    pub fn cluster_of(&self, id: usize) -> usize {
        self.clusters[id]
    }

    pub fn cluster_members(&self, cluster: usize) -> &[usize] {
        &self.cluster_members[cluster]
    }

    /// Position of `id` inside its cluster's member list.
    pub fn position_in_cluster(&self, id: usize) -> usize {
        let members = &self.cluster_members[self.clusters[id]];
        members.binary_search(&id).expect("cluster members are sorted")
    }

    /// Whitespace-tokenizes `line`, maps unknown words to UNK and appends EOS.
    pub fn encode(&self, line: &str) -> Vec<usize> {
        line.split_whitespace()
            .map(|w| self.id_or_unk(w))
            .chain(std::iter::once(self.eos_id))
            .collect()
    }

    /// Joins surface forms with single spaces, dropping a trailing EOS.
    pub fn decode(&self, ids: &[usize]) -> String {
        let ids = match ids.split_last() {
            Some((&last, rest)) if last == self.eos_id => rest,
            _ => ids,
        };
        ids.iter()
            .map(|&i| self.words[i].as_str())
            .collect::<Vec<_>>()
            .join(" ")
    }

    /// Serializes as one `word<TAB>count<TAB>cluster` line per id.
    pub fn to_file_string(&self) -> String {
        let mut out = String::new();
        for (id, w) in self.words.iter().enumerate() {
            writeln!(out, "{}\t{}\t{}", w, self.counts[id], self.clusters[id]).unwrap();
        }
        out
    }

    pub fn from_file_str(text: &str) -> Result<Self> {
        let mut words = Vec::new();
        let mut counts = Vec::new();
        let mut clusters = Vec::new();
        for (i, line) in text.lines().enumerate() {
            let fields: Vec<&str> = line.split('\t').collect();
            let [w, c, k] = fields[..] else {
                return Err(Error::Parse {
                    line: i + 1,
                    msg: format!("expected 3 tab-separated fields, got {}", fields.len()),
                });
            };
            let parse_err = |what: &str| Error::Parse {
                line: i + 1,
                msg: format!("invalid {what}"),
            };
            if w.is_empty() || w.contains(char::is_whitespace) {
                return Err(parse_err("word"));
            }
            words.push(w.to_string());
            counts.push(c.parse::<u64>().map_err(|_| parse_err("count"))?);
            clusters.push(k.parse::<usize>().map_err(|_| parse_err("cluster"))?);
        }
        for reserved in [UNK, EOS] {
            if !words.iter().any(|w| w == reserved) {
                return Err(Error::Format(format!("vocabulary lacks reserved word {reserved}")));
            }
        }
        let mut seen = std::collections::HashSet::new();
        if let Some(dup) = words.iter().find(|w| !seen.insert(w.as_str())) {
            return Err(Error::Format(format!("duplicate vocabulary word {dup}")));
        }
        let c = clusters.iter().max().map_or(0, |m| m + 1);
        let mut used = vec![false; c];
        for &k in &clusters {
            used[k] = true;
        }
        if used.iter().any(|u| !u) {
            return Err(Error::Format("cluster indices are not contiguous".into()));
        }
        Ok(Self::from_parts(words, counts, Some(clusters), c))
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        fs::write(path, self.to_file_string()).map_err(|e| Error::io(path, e))
    }

    pub fn load(path: &Path) -> Result<Self> {
        let text = fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        Self::from_file_str(&text)
    }

    /// Hex SHA-256 of the serialized form; equal iff files are identical.
    pub fn fingerprint(&self) -> String {
        let digest = Sha256::digest(self.to_file_string().as_bytes());
        digest.iter().map(|b| format!("{b:02x}")).collect()
    }
}

/// Encoded sentences, each terminated by EOS.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct SentenceBatch {
    sequences: Vec<Vec<usize>>,
}

impl SentenceBatch {
    pub fn new(sequences: Vec<Vec<usize>>, vocab: &Vocabulary) -> Result<Self> {
        for (i, s) in sequences.iter().enumerate() {
            if s.last() != Some(&vocab.eos_id()) {
                return Err(Error::Contract(format!("sentence {i} does not end with EOS")));
            }
            if let Some(&bad) = s.iter().find(|&&id| id >= vocab.len()) {
                return Err(Error::Contract(format!("sentence {i} contains id {bad} ≥ |V|")));
            }
        }
        Ok(SentenceBatch { sequences })
    }

    pub fn encode_lines<S: AsRef<str>>(vocab: &Vocabulary, lines: &[S]) -> Self {
        SentenceBatch {
            sequences: lines.iter().map(|l| vocab.encode(l.as_ref())).collect(),
        }
    }

    pub fn sequences(&self) -> &[Vec<usize>] {
        &self.sequences
    }

    pub fn len(&self) -> usize {
        self.sequences.len()
    }

    pub fn is_empty(&self) -> bool {
        self.sequences.is_empty()
    }

    /// Total token count including one EOS per sentence.
    pub fn token_count(&self) -> usize {
        self.sequences.iter().map(Vec::len).sum()
    }
}

/// Reads a UTF-8 corpus, one sentence per line.
pub fn read_lines(path: &Path) -> Result<Vec<String>> {
    let text = fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
    Ok(text.lines().map(str::to_string).collect())
}
