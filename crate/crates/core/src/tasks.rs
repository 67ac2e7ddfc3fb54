//! Synthetic in-context recall task generators: in-context recall (ICR),
//! its noisy variant (NCR), and selective copying (SC).
//!
//! Token-space layout for a vocabulary of size `v`:
//! - ICR/NCR: keys live in `[0, (v-1)/2)`, values in `[(v-1)/2, v-1)`, and
//!   `v-1` is the noise/pad token;
//! - SC: content tokens live in `[0, v-2)`, `v-2` is the copy marker and
//!   `v-1` the noise token.
//!
//! Sequences are fixed length. ICR lays out distinct key/value pairs, pads
//! the middle with repeats of those pairs, and ends with query keys whose
//! associated values are the supervised targets (the model predicts the
//! value at the query-key position). NCR replaces middle filler pairs with
//! noise tokens at rate `noise_frac`; with `noise_frac = 0` it generates
//! byte-identical sequences to ICR. SC scatters content tokens into noise,
//! appends a copy marker, and supervises the reproduction of the content in
//! order, teacher-forced.

use rand::seq::SliceRandom;
use rand::Rng;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use crate::error::{Error, Result};

#[derive(Debug, Clone, Copy, PartialEq, Eq, serde::Serialize, serde::Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum TaskKind {
    Icr,
    Ncr,
    Sc,
}

/// Generator parameters. `kv_pairs` doubles as the content-token count for
/// SC; `queries` is the number of supervised recall probes per sequence.
#[derive(Debug, Clone, Copy, serde::Serialize, serde::Deserialize)]
#[serde(deny_unknown_fields)]
pub struct TaskSpec {
    pub kind: TaskKind,
    pub vocab: usize,
    pub seq_len: usize,
    pub kv_pairs: usize,
    #[serde(default = "default_queries")]
    pub queries: usize,
    #[serde(default)]
    pub noise_frac: f64,
    pub seed: u64,
}

fn default_queries() -> usize {
    1
}

/// Target id marking an unsupervised position.
pub const IGNORE: i64 = -1;

/// One generated sequence: tokens and per-position targets (`IGNORE` where
/// the loss does not apply).
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct TaskSample {
    pub tokens: Vec<u32>,
    pub targets: Vec<i64>,
}

impl TaskSpec {
    pub fn n_keys(&self) -> usize {
        (self.vocab - 1) / 2
    }

    pub fn validate(&self) -> Result<()> {
        if self.vocab < 4 {
            return Err(Error::Task(format!("vocab {} too small", self.vocab)));
        }
        if !(0.0..=1.0).contains(&self.noise_frac) {
            return Err(Error::Task("noise_frac must lie in [0, 1]".into()));
        }
        match self.kind {
            TaskKind::Icr | TaskKind::Ncr => {
                if self.kv_pairs == 0 || self.queries == 0 {
                    return Err(Error::Task("need at least one pair and one query".into()));
                }
                if self.kv_pairs > self.n_keys() {
                    return Err(Error::Task(format!(
                        "{} pairs exceed the {} distinct keys of vocab {}",
                        self.kv_pairs,
                        self.n_keys(),
                        self.vocab
                    )));
                }
                if self.kv_pairs * 2 + self.queries > self.seq_len {
                    return Err(Error::Task(format!(
                        "2*{} pairs + {} queries exceed seq_len {}",
                        self.kv_pairs, self.queries, self.seq_len
                    )));
                }
                if matches!(self.kind, TaskKind::Icr) && self.noise_frac != 0.0 {
                    return Err(Error::Task("ICR takes noise_frac = 0".into()));
                }
            }
            TaskKind::Sc => {
                if self.kv_pairs == 0 {
                    return Err(Error::Task("SC needs at least one content token".into()));
                }
                if 2 * self.kv_pairs + 1 > self.seq_len {
                    return Err(Error::Task(format!(
                        "SC with {} content tokens needs seq_len >= {}",
                        self.kv_pairs,
                        2 * self.kv_pairs + 1
                    )));
                }
            }
        }
        Ok(())
    }
}

/// Generate one sequence, deterministically in `spec.seed`.
pub fn gen_task(spec: &TaskSpec) -> Result<TaskSample> {
    gen_task_seeded(spec, spec.seed)
}

/// Generate one sequence from an explicit seed (batch helpers derive one
/// seed per sample).
pub fn gen_task_seeded(spec: &TaskSpec, seed: u64) -> Result<TaskSample> {
    spec.validate()?;
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    match spec.kind {
        TaskKind::Icr | TaskKind::Ncr => gen_recall(spec, &mut rng),
        TaskKind::Sc => gen_selective_copy(spec, &mut rng),
    }
}

fn gen_recall(spec: &TaskSpec, rng: &mut ChaCha8Rng) -> Result<TaskSample> {
    let l = spec.seq_len;
    let n = spec.kv_pairs;
    let n_keys = spec.n_keys();
    let value_base = n_keys as u32;
    let n_values = (spec.vocab - 1) - n_keys;
    let noise_tok = (spec.vocab - 1) as u32;

    // distinct keys, values with replacement
    let mut key_ids: Vec<u32> = (0..n_keys as u32).collect();
    key_ids.shuffle(rng);
    let keys: Vec<u32> = key_ids[..n].to_vec();
    let values: Vec<u32> = (0..n)
        .map(|_| value_base + rng.gen_range(0..n_values) as u32)
        .collect();

    let mut tokens = Vec::with_capacity(l);
    let mut targets = vec![IGNORE; l];
    for i in 0..n {
        tokens.push(keys[i]);
        tokens.push(values[i]);
    }
    // Middle filler: repeated pairs, replaced by noise-token pairs at rate
    // noise_frac. With noise_frac = 0 this path emits only pair repeats, so
    // ICR and NCR(0) coincide bitwise.
    let query_start = l - spec.queries;
    while tokens.len() + 1 < query_start {
        if rng.gen::<f64>() < spec.noise_frac {
            tokens.push(noise_tok);
            tokens.push(noise_tok);
        } else {
            let j = rng.gen_range(0..n);
            tokens.push(keys[j]);
            tokens.push(values[j]);
        }
    }
    if tokens.len() < query_start {
        tokens.push(noise_tok); // odd leftover slot
    }
    for _ in 0..spec.queries {
        let j = rng.gen_range(0..n);
        targets[tokens.len()] = values[j] as i64;
        tokens.push(keys[j]);
    }
    debug_assert_eq!(tokens.len(), l);
    Ok(TaskSample { tokens, targets })
}

fn gen_selective_copy(spec: &TaskSpec, rng: &mut ChaCha8Rng) -> Result<TaskSample> {
    let l = spec.seq_len;
    let m = spec.kv_pairs;
    let marker = (spec.vocab - 2) as u32;
    let noise_tok = (spec.vocab - 1) as u32;
    let n_content = spec.vocab - 2;

    let content: Vec<u32> = (0..m)
        .map(|_| rng.gen_range(0..n_content) as u32)
        .collect();
    let prefix_len = l - m - 1;
    // content token positions inside the prefix, in order
    let mut slots: Vec<usize> = (0..prefix_len).collect();
    slots.shuffle(rng);
    let mut chosen: Vec<usize> = slots[..m].to_vec();
    chosen.sort_unstable();

    let mut tokens = vec![noise_tok; l];
    for (c, &pos) in content.iter().zip(&chosen) {
        tokens[pos] = *c;
    }
    tokens[prefix_len] = marker;
    let mut targets = vec![IGNORE; l];
    for (i, &c) in content.iter().enumerate() {
        // position prefix_len + i holds marker (i = 0) or content[i-1] and
        // is supervised to produce content[i]
        targets[prefix_len + i] = c as i64;
        if i > 0 {
            tokens[prefix_len + i] = content[i - 1];
        }
    }
    tokens[l - 1] = content[m - 1];
    Ok(TaskSample { tokens, targets })
}

/// Derive per-sample seeds from a base seed (splitmix64 step).
pub fn derive_seed(base: u64, index: u64) -> u64 {
    let mut z = base
        .wrapping_add(0x9E37_79B9_7F4A_7C15u64.wrapping_mul(index.wrapping_add(1)));
    z = (z ^ (z >> 30)).wrapping_mul(0xBF58_476D_1CE4_E5B9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94D0_49BB_1331_11EB);
    z ^ (z >> 31)
}

/// A batch of sequences with seeds derived from `(spec.seed, batch_index)`.
pub fn gen_batch(spec: &TaskSpec, batch_index: u64, batch_size: usize) -> Result<Vec<TaskSample>> {
    (0..batch_size)
        .map(|i| {
            gen_task_seeded(
                spec,
                derive_seed(spec.seed, batch_index * batch_size as u64 + i as u64),
            )
        })
        .collect()
}
