use std::collections::BTreeMap;
use std::time::Duration;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// Maps text to a fixed-dimension vector; identical text gives an identical
/// vector.
pub trait EmbeddingBackend: Send + Sync {
    fn dim(&self) -> usize;
    fn embed(&self, text: &str) -> Result<Vec<f64>>;
}

/// Lower-cased alphanumeric runs.
pub fn text_tokens(text: &str) -> impl Iterator<Item = String> + '_ {
    text.split(|c: char| !c.is_alphanumeric())
        .filter(|w| !w.is_empty())
        .map(str::to_lowercase)
}

/// L2-normalized token counts over a vocabulary fixed at construction.
/// Tokens outside the vocabulary are ignored.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct BuiltinEmbedding {
    index: BTreeMap<String, usize>,
}

impl BuiltinEmbedding {
    /// Vocabulary of every token in `texts`, in sorted order.
    pub fn fit<'a>(texts: impl IntoIterator<Item = &'a str>) -> Self {
        let mut words: Vec<String> = texts
            .into_iter()
            .flat_map(|t| text_tokens(t).collect::<Vec<_>>())
            .collect();
        words.sort_unstable();
        words.dedup();
        BuiltinEmbedding {
            index: words.into_iter().enumerate().map(|(i, w)| (w, i)).collect(),
        }
    }
}

impl EmbeddingBackend for BuiltinEmbedding {
    fn dim(&self) -> usize {
        self.index.len()
    }

    fn embed(&self, text: &str) -> Result<Vec<f64>> {
        let mut v = vec![0.0; self.index.len()];
        for w in text_tokens(text) {
            if let Some(&i) = self.index.get(&w) {
                v[i] += 1.0;
            }
        }
        let norm = v.iter().map(|x| x * x).sum::<f64>().sqrt();
        if norm > 0.0 {
            v.iter_mut().for_each(|x| *x /= norm);
        }
        Ok(v)
    }
}

/// Thin client for a hosted embedding model: posts `{model, input}` and
/// reads `{embedding}`.
pub struct HttpEmbedding {
    endpoint: String,
    model: String,
    dim: usize,
    agent: ureq::Agent,
}

impl HttpEmbedding {
    pub fn new(endpoint: &str, model: &str, dim: usize, timeout: Duration) -> Self {
        let agent = ureq::Agent::config_builder()
            .timeout_global(Some(timeout))
            .http_status_as_error(true)
            .build()
            .new_agent();
        HttpEmbedding {
            endpoint: endpoint.into(),
            model: model.into(),
            dim,
            agent,
        }
    }
}

#[derive(Serialize)]
struct EmbedRequest<'a> {
    model: &'a str,
    input: &'a str,
}

#[derive(Deserialize)]
struct EmbedResponse {
    embedding: Vec<f64>,
}

impl EmbeddingBackend for HttpEmbedding {
    fn dim(&self) -> usize {
        self.dim
    }

    fn embed(&self, text: &str) -> Result<Vec<f64>> {
        let mut delay = Duration::from_millis(200);
        let mut last = Error::BackendUnavailable("no attempt made".into());
        for attempt in 0..2 {
            if attempt > 0 {
                std::thread::sleep(delay);
                delay *= 2;
            }
            let req = EmbedRequest {
                model: &self.model,
                input: text,
            };
            match self.agent.post(&self.endpoint).send_json(&req) {
                Ok(mut resp) => {
                    let r: EmbedResponse = resp
                        .body_mut()
                        .read_json()
                        .map_err(|e| Error::BackendUnavailable(format!("bad embedding body: {e}")))?;
                    if r.embedding.len() != self.dim {
                        return Err(Error::DimensionMismatch {
                            left: self.dim,
                            right: r.embedding.len(),
                        });
                    }
                    return Ok(r.embedding);
                }
                Err(e) => last = Error::BackendUnavailable(e.to_string()),
            }
        }
        Err(last)
    }
}

/// Cosine similarity; zero when either vector is zero.
pub fn cosine(a: &[f64], b: &[f64]) -> Result<f64> {
    if a.len() != b.len() {
        return Err(Error::DimensionMismatch {
            left: a.len(),
            right: b.len(),
        });
    }
    let dot: f64 = a.iter().zip(b).map(|(x, y)| x * y).sum();
    let na = a.iter().map(|x| x * x).sum::<f64>().sqrt();
    let nb = b.iter().map(|x| x * x).sum::<f64>().sqrt();
    Ok(if na > 0.0 && nb > 0.0 { dot / (na * nb) } else { 0.0 })
}

/// Result of a similarity search.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Retrieval {
    /// Selected corpus ids, most similar first. With balancing, the
    /// positive class comes before the negative one.
    pub ids: Vec<usize>,
    pub positives: Vec<usize>,
    pub negatives: Vec<usize>,
    /// Some class had fewer than `⌈k/2⌉` members.
    pub short: bool,
}

/// Corpus ids sorted by descending cosine similarity to `target`, ties to
/// the lower id.
pub fn rank_by_similarity(target: &[f64], corpus: &[Vec<f64>]) -> Result<Vec<(usize, f64)>> {
    if corpus.is_empty() {
        return Err(Error::EmptyCorpus);
    }
    let mut scored = corpus
        .iter()
        .enumerate()
        .map(|(i, v)| Ok((i, cosine(target, v)?)))
        .collect::<Result<Vec<_>>>()?;
    scored.sort_by(|a, b| b.1.total_cmp(&a.1).then(a.0.cmp(&b.0)));
    Ok(scored)
}

/// The `k` most similar corpus entries, or with `positive_labels` the top
/// `⌈k/2⌉` of each class.
pub fn retrieve_similar(
    target: &[f64],
    corpus: &[Vec<f64>],
    k: usize,
    positive_labels: Option<&[bool]>,
) -> Result<Retrieval> {
    let ranked = rank_by_similarity(target, corpus)?;
    match positive_labels {
        None => {
            let ids: Vec<usize> = ranked.iter().take(k).map(|(i, _)| *i).collect();
            Ok(Retrieval {
                short: ids.len() < k,
                ids,
                positives: Vec::new(),
                negatives: Vec::new(),
            })
        }
        Some(labels) => {
            if labels.len() != corpus.len() {
                return Err(Error::DimensionMismatch {
                    left: corpus.len(),
                    right: labels.len(),
                });
            }
            let per = k.div_ceil(2);
            let pick = |want: bool| -> Vec<usize> {
                ranked
                    .iter()
                    .filter(|(i, _)| labels[*i] == want)
                    .take(per)
                    .map(|(i, _)| *i)
                    .collect()
            };
            let positives = pick(true);
            let negatives = pick(false);
            let short = positives.len() < per || negatives.len() < per;
            let ids = positives.iter().chain(&negatives).copied().collect();
            Ok(Retrieval {
                ids,
                positives,
                negatives,
                short,
            })
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn builtin_is_normalized_and_stable() {
        let e = BuiltinEmbedding::fit(["Red circle, small", "blue square"]);
        let v = e.embed("red red circle").unwrap();
        assert!((v.iter().map(|x| x * x).sum::<f64>() - 1.0).abs() < 1e-12);
        assert_eq!(v, e.embed("red red circle").unwrap());
        assert_eq!(e.embed("nothing known").unwrap(), vec![0.0; e.dim()]);
    }

    #[test]
    fn identical_ranks_first_and_ties_go_low() {
        let corpus = vec![vec![0.0, 1.0], vec![1.0, 0.0], vec![1.0, 0.0], vec![1.0, 1.0]];
        let r = retrieve_similar(&[1.0, 0.0], &corpus, 3, None).unwrap();
        assert_eq!(r.ids, vec![1, 2, 3]);
        assert!(matches!(
            retrieve_similar(&[1.0], &corpus, 1, None),
            Err(Error::DimensionMismatch { .. })
        ));
        assert!(matches!(
            retrieve_similar(&[1.0], &[], 1, None),
            Err(Error::EmptyCorpus)
        ));
    }

    #[test]
    fn balanced_short_class_is_flagged() {
        let corpus = vec![vec![1.0, 0.0], vec![0.9, 0.1], vec![0.0, 1.0], vec![0.5, 0.5]];
        let labels = [true, true, false, true];
        let r = retrieve_similar(&[1.0, 0.0], &corpus, 4, Some(&labels)).unwrap();
        assert_eq!(r.positives, vec![0, 1]);
        assert_eq!(r.negatives, vec![2]);
        assert!(r.short);
    }
}
