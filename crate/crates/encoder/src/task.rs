//! Synthetic sequence-classification task: the label is 1 exactly when
//! two designated trigger tokens co-occur anywhere in the sequence, so a
//! classifier must combine information across positions through
//! attention. Position 0 always carries a fixed CLS token the pooler
//! reads.

use rand::seq::SliceRandom;
use rand::Rng;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use crate::config::EncoderConfig;
use crate::error::{EncoderError, Result};

/// One batch of token sequences with labels.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Batch {
    pub ids: Vec<u32>,
    pub b: usize,
    pub t: usize,
    pub labels: Vec<u32>,
}

impl Batch {
    pub fn single(ids: Vec<u32>) -> Self {
        let t = ids.len();
        Batch {
            ids,
            b: 1,
            t,
            labels: vec![0],
        }
    }
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct TaskConfig {
    pub seq_len: usize,
    pub vocab_size: usize,
    pub cls_id: u32,
    /// Separator closing every sequence; the outlier construction keys
    /// its spikes to this token.
    pub sep_id: u32,
    pub trigger_a: u32,
    pub trigger_b: u32,
    /// 2 for the plain co-occurrence label (both triggers present), 4
    /// for the full joint presence pattern.
    pub num_classes: u32,
}

impl TaskConfig {
    pub fn for_encoder(cfg: &EncoderConfig) -> Self {
        TaskConfig {
            seq_len: cfg.max_seq_len.min(16),
            vocab_size: cfg.vocab_size,
            cls_id: 1,
            sep_id: crate::model::SEPARATOR_TOKEN_ID,
            trigger_a: 7,
            trigger_b: 13,
            num_classes: cfg.num_classes.min(4) as u32,
        }
    }

    pub fn validate(&self) -> Result<()> {
        if self.seq_len < 5 {
            return Err(EncoderError::BadBatch(
                "co-occurrence task needs at least 5 positions".into(),
            ));
        }
        let ids = [self.cls_id, self.sep_id, self.trigger_a, self.trigger_b];
        for &id in &ids {
            if id as usize >= self.vocab_size {
                return Err(EncoderError::TokenOutOfRange {
                    id,
                    vocab: self.vocab_size,
                });
            }
        }
        if self.trigger_a == self.trigger_b
            || ids.iter().collect::<std::collections::BTreeSet<_>>().len() != 4
        {
            return Err(EncoderError::BadBatch(
                "CLS, separator, and triggers must be distinct".into(),
            ));
        }
        if ids.contains(&0) {
            return Err(EncoderError::BadBatch(
                "special ids must not collide with the pad token".into(),
            ));
        }
        Ok(())
    }

    /// The task labeling rule, applied to raw ids: with two classes, 1
    /// exactly when both triggers co-occur; with four, the joint presence
    /// pattern `2 * [A present] + [B present]`.
    pub fn label_of(&self, ids: &[u32]) -> u32 {
        let a = ids.contains(&self.trigger_a);
        let b = ids.contains(&self.trigger_b);
        if self.num_classes >= 4 {
            2 * u32::from(a) + u32::from(b)
        } else {
            u32::from(a && b)
        }
    }

    fn filler(&self, rng: &mut ChaCha8Rng) -> u32 {
        loop {
            // skip pad (0) and the special ids
            let id = rng.random_range(1..self.vocab_size as u32);
            if id != self.trigger_a
                && id != self.trigger_b
                && id != self.cls_id
                && id != self.sep_id
            {
                return id;
            }
        }
    }

    /// Deterministic batch generation: CLS first, separator last, content
    /// in between. The four co-occurrence cases are sampled with
    /// probabilities 1/2 (both triggers), 1/6, 1/6 (one trigger), 1/6
    /// (none).
    pub fn generate(&self, seed: u64, n: usize) -> Batch {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let t = self.seq_len;
        let mut ids = Vec::with_capacity(n * t);
        let mut labels = Vec::with_capacity(n);
        for _ in 0..n {
            let mut seq: Vec<u32> = Vec::with_capacity(t);
            seq.push(self.cls_id);
            for _ in 1..t - 1 {
                seq.push(self.filler(&mut rng));
            }
            seq.push(self.sep_id);
            // two classes: both-triggers in half the sequences; four
            // classes: the presence patterns uniformly
            let case = if self.num_classes >= 4 {
                rng.random_range(0..4u32) + 2
            } else {
                rng.random_range(0..6u32)
            };
            let mut slots: Vec<usize> = (1..t - 1).collect();
            slots.shuffle(&mut rng);
            let (plant_a, plant_b) = match case {
                0..=2 => (true, true),
                3 => (true, false),
                4 => (false, true),
                _ => (false, false),
            };
            if plant_a {
                seq[slots[0]] = self.trigger_a;
            }
            if plant_b {
                seq[slots[1]] = self.trigger_b;
            }
            labels.push(self.label_of(&seq));
            ids.extend_from_slice(&seq);
        }
        Batch {
            ids,
            b: n,
            t,
            labels,
        }
    }

    /// A fixed list of training batches.
    pub fn training_batches(&self, seed: u64, batches: usize, batch_size: usize) -> Vec<Batch> {
        (0..batches)
            .map(|i| self.generate(seed.wrapping_add(1 + i as u64), batch_size))
            .collect()
    }
}
