use rand::seq::index::sample;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use super::corpus::Corpus;
use crate::error::{Error, Result};
use crate::mask::MaskMap;

/// One few-shot task, as indices into a [`Corpus`].
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct Episode {
    pub class_id: u8,
    pub supports: Vec<usize>,
    pub query: usize,
    pub seed: u64,
}

impl Episode {
    pub fn k(&self) -> usize {
        self.supports.len()
    }

    pub fn query_mask(&self, corpus: &Corpus) -> MaskMap {
        corpus.sample(self.query).class_mask(self.class_id)
    }

    pub fn support_masks(&self, corpus: &Corpus) -> Vec<MaskMap> {
        self.supports.iter().map(|&i| corpus.sample(i).class_mask(self.class_id)).collect()
    }
}

/// Draws `k + 1` distinct images containing `class_id`; the first is the
/// query.
pub fn sample_episode(corpus: &Corpus, class_id: u8, k: usize, seed: u64) -> Result<Episode> {
    if k == 0 {
        return Err(Error::Config("k must be at least 1".into()));
    }
    let pool = corpus.pool(class_id);
    if pool.len() < k + 1 {
        return Err(Error::InsufficientImages {
            class_id,
            available: pool.len(),
            needed: k + 1,
        });
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let picks = sample(&mut rng, pool.len(), k + 1).into_vec();
    Ok(Episode {
        class_id,
        query: pool[picks[0]],
        supports: picks[1..].iter().map(|&p| pool[p]).collect(),
        seed,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::harness::{toy_corpus, ToyCorpusConfig};

    fn corpus() -> Corpus {
        toy_corpus(&ToyCorpusConfig {
            classes: 3,
            images_per_class: 10,
            distractor_prob: 0.0,
            ..Default::default()
        })
        .unwrap()
    }

    #[test]
    fn episodes_are_deterministic_and_valid() {
        let c = corpus();
        for seed in 0..20 {
            let e = sample_episode(&c, 2, 5, seed).unwrap();
            assert_eq!(e, sample_episode(&c, 2, 5, seed).unwrap());
            assert!(!e.supports.contains(&e.query));
            assert!(e.query_mask(&c).count() > 0);
            assert!(e.support_masks(&c).iter().all(|m| m.count() > 0));
            let mut s = e.supports.clone();
            s.dedup();
            assert_eq!(s.len(), 5);
        }
    }

    #[test]
    fn query_needs_a_spare_image() {
        let c = corpus();
        assert!(matches!(
            sample_episode(&c, 1, 10, 0),
            Err(Error::InsufficientImages { available: 10, needed: 11, .. })
        ));
        assert!(sample_episode(&c, 1, 9, 0).is_ok());
    }

    #[test]
    fn images_are_drawn_uniformly() {
        let c = corpus();
        let draws = 1000;
        for class in 1..=3u8 {
            let mut hits = vec![0usize; c.len()];
            for seed in 0..draws {
                hits[sample_episode(&c, class, 1, seed * 3 + class as u64).unwrap().query] += 1;
            }
            let p = 1.0 / c.pool(class).len() as f64;
            let (mean, sd) = (draws as f64 * p, (draws as f64 * p * (1.0 - p)).sqrt());
            for &i in c.pool(class) {
                assert!((hits[i] as f64 - mean).abs() <= 3.0 * sd, "image {i}: {} vs {mean}", hits[i]);
            }
        }
    }
}
