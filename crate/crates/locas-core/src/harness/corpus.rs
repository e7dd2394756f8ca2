//! Synthetic word-stream corpus. Documents share one base lexicon with a
//! Zipf-distributed word frequency profile; each document additionally
//! owns a small set of recurring entity words that no other document (and
//! no backbone training run) has seen. Memorizing a document therefore
//! measurably lowers late-document NLL.
//!
//! Every word is exactly [`WORD_LETTERS`] lowercase letters followed by a
//! space, which keeps slot replacement length-neutral when topping up
//! entity occurrences.

use rand::Rng;

use crate::util::rng_for;

pub const WORD_LETTERS: usize = 6;
pub const WORD_BYTES: usize = WORD_LETTERS + 1;
pub const LEXICON_SIZE: usize = 192;
pub const ENTITY_SHARE: f64 = 0.3;
pub const MIN_ENTITY_OCCURRENCES: usize = 20;

const LEXICON_SEED: u64 = 0xba5e_1e81;

fn random_word<R: Rng>(rng: &mut R) -> [u8; WORD_LETTERS] {
    let mut w = [0u8; WORD_LETTERS];
    for c in w.iter_mut() {
        *c = b'a' + rng.gen_range(0..26u8);
    }
    w
}

/// The shared base lexicon, identical across all seeds.
pub fn base_lexicon() -> Vec<[u8; WORD_LETTERS]> {
    let mut rng = rng_for(LEXICON_SEED, 0);
    let mut words: Vec<[u8; WORD_LETTERS]> = Vec::with_capacity(LEXICON_SIZE);
    while words.len() < LEXICON_SIZE {
        let w = random_word(&mut rng);
        if !words.contains(&w) {
            words.push(w);
        }
    }
    words
}

/// Zipf sampling table over the lexicon: cumulative weights 1/(k+1)^skew.
fn zipf_cdf(skew: f64) -> Vec<f64> {
    let mut cdf = Vec::with_capacity(LEXICON_SIZE);
    let mut acc = 0.0;
    for k in 0..LEXICON_SIZE {
        acc += 1.0 / ((k + 1) as f64).powf(skew);
        cdf.push(acc);
    }
    let total = *cdf.last().unwrap();
    for v in cdf.iter_mut() {
        *v /= total;
    }
    cdf
}

fn sample_zipf<R: Rng>(cdf: &[f64], rng: &mut R) -> usize {
    let u: f64 = rng.gen_range(0.0..1.0);
    cdf.partition_point(|&c| c < u).min(cdf.len() - 1)
}

/// Entity words for one document (disjoint from the lexicon).
pub fn document_entities(seed: u64, doc: usize, count: usize) -> Vec<[u8; WORD_LETTERS]> {
    let lexicon = base_lexicon();
    let mut rng = rng_for(seed, 0xe47 ^ ((doc as u64) << 8));
    let mut out: Vec<[u8; WORD_LETTERS]> = Vec::with_capacity(count);
    while out.len() < count {
        let w = random_word(&mut rng);
        if !lexicon.contains(&w) && !out.contains(&w) {
            out.push(w);
        }
    }
    out
}

fn entity_count_for(slots: usize) -> usize {
    (slots / 25).clamp(1, 8)
}

/// Generate `n_docs` documents of exactly `doc_len` bytes each.
///
/// Documents of roughly 2 KB and above guarantee at least
/// [`MIN_ENTITY_OCCURRENCES`] recurrences of every entity; shorter
/// documents scale the guarantee to what fits.
pub fn make_synthetic_corpus(
    seed: u64,
    n_docs: usize,
    doc_len: usize,
    vocab_skew: f64,
) -> Vec<Vec<u8>> {
    let lexicon = base_lexicon();
    let cdf = zipf_cdf(vocab_skew);
    let mut docs = Vec::with_capacity(n_docs);
    for doc_id in 0..n_docs {
        let slots = doc_len.div_ceil(WORD_BYTES).max(1);
        let full_slots = doc_len / WORD_BYTES;
        let n_entities = entity_count_for(full_slots.max(1));
        let entities = document_entities(seed, doc_id, n_entities);
        let mut rng = rng_for(seed, 0xd0c ^ ((doc_id as u64) << 16));

        // Word stream: entity with fixed probability, else Zipf base word.
        let mut is_entity = vec![false; slots];
        let mut choice = vec![0usize; slots];
        for i in 0..slots {
            if rng.gen_range(0.0..1.0) < ENTITY_SHARE {
                is_entity[i] = true;
                choice[i] = rng.gen_range(0..n_entities);
            } else {
                choice[i] = sample_zipf(&cdf, &mut rng);
            }
        }

        // Top up sparse entities by overwriting base slots, so recurrence
        // is guaranteed by construction, not just in expectation. Only
        // slots fully inside doc_len count.
        let target = MIN_ENTITY_OCCURRENCES.min(full_slots / (n_entities + 1)).max(1);
        let mut counts = vec![0usize; n_entities];
        for i in 0..full_slots {
            if is_entity[i] {
                counts[choice[i]] += 1;
            }
        }
        for e in 0..n_entities {
            let mut guard = 0;
            while counts[e] < target && guard < 10 * slots {
                let i = rng.gen_range(0..full_slots.max(1));
                if !is_entity[i] {
                    is_entity[i] = true;
                    choice[i] = e;
                    counts[e] += 1;
                }
                guard += 1;
            }
        }

        let mut doc = Vec::with_capacity(slots * WORD_BYTES);
        for i in 0..slots {
            let word: &[u8; WORD_LETTERS] =
                if is_entity[i] { &entities[choice[i]] } else { &lexicon[choice[i]] };
            doc.extend_from_slice(word);
            doc.push(b' ');
        }
        doc.truncate(doc_len);
        docs.push(doc);
    }
    docs
}

/// Number of occurrences of an entity word in a document.
pub fn count_occurrences(doc: &[u8], word: &[u8]) -> usize {
    if word.is_empty() || doc.len() < word.len() {
        return 0;
    }
    (0..=doc.len() - word.len()).filter(|&i| &doc[i..i + word.len()] == word).count()
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn same_seed_identical_corpus() {
        let a = make_synthetic_corpus(7, 3, 2048, 1.0);
        let b = make_synthetic_corpus(7, 3, 2048, 1.0);
        assert_eq!(a, b);
        let c = make_synthetic_corpus(8, 3, 2048, 1.0);
        assert_ne!(a, c);
        assert!(a.iter().all(|d| d.len() == 2048));
    }

    #[test]
    fn entities_recur_by_construction() {
        let doc_len = 16384;
        let docs = make_synthetic_corpus(0, 2, doc_len, 1.0);
        for (doc_id, doc) in docs.iter().enumerate() {
            let slots = doc_len / WORD_BYTES;
            let entities = document_entities(0, doc_id, entity_count_for(slots));
            for e in &entities {
                let n = count_occurrences(doc, e);
                assert!(
                    n >= MIN_ENTITY_OCCURRENCES,
                    "doc {doc_id}: entity {:?} occurs {n} times",
                    std::str::from_utf8(e).unwrap()
                );
            }
        }
    }

    #[test]
    fn documents_have_distinct_entities() {
        let e0 = document_entities(0, 0, 8);
        let e1 = document_entities(0, 1, 8);
        for w in &e0 {
            assert!(!e1.contains(w));
        }
    }

    #[test]
    fn base_words_shared_across_documents() {
        // Most tokens come from the shared lexicon.
        let docs = make_synthetic_corpus(3, 2, 4096, 1.0);
        let lexicon = base_lexicon();
        for doc in &docs {
            let mut hits = 0;
            let mut total = 0;
            for slot in doc.chunks_exact(WORD_BYTES) {
                let word: [u8; WORD_LETTERS] = slot[..WORD_LETTERS].try_into().unwrap();
                total += 1;
                if lexicon.contains(&word) {
                    hits += 1;
                }
            }
            assert!(hits * 2 > total, "lexicon words must dominate: {hits}/{total}");
        }
    }
}
