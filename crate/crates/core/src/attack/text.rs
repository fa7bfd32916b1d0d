//! Mapping extracted embedding vectors back to token ids.

use std::collections::HashMap;

use crate::error::{config_err, dim_err, Result};
use crate::tensor::Tensor;

use super::{AttackMetrics, Extraction};

/// Emitted for positions whose vector is not in the lookup.
pub const SENTINEL: i64 = -1;

/// Hash of a rounded embedding vector → token id.
#[derive(Debug, Clone)]
pub struct EmbeddingLookup {
    digits: u32,
    dim: usize,
    map: HashMap<u64, usize>,
}

fn fnv1a(bytes: impl Iterator<Item = u8>) -> u64 {
    let mut h: u64 = 0xcbf2_9ce4_8422_2325;
    for b in bytes {
        h ^= b as u64;
        h = h.wrapping_mul(0x0000_0100_0000_01b3);
    }
    h
}

impl EmbeddingLookup {
    fn key(&self, v: &[f64]) -> u64 {
        let f = 10f64.powi(self.digits as i32);
        fnv1a(v.iter().flat_map(|x| {
            // +0.0 keeps -0 and 0 on the same key
            let q = (x * f).round() + 0.0;
            (q as i64).to_le_bytes()
        }))
    }

    pub fn dim(&self) -> usize {
        self.dim
    }

    pub fn digits(&self) -> u32 {
        self.digits
    }

    pub fn len(&self) -> usize {
        self.map.len()
    }

    pub fn is_empty(&self) -> bool {
        self.map.is_empty()
    }

    pub fn lookup(&self, v: &[f64]) -> Option<usize> {
        if v.len() != self.dim {
            return None;
        }
        self.map.get(&self.key(v)).copied()
    }
}

/// Builds the lookup for a `[vocab × dim]` table rounded to `digits` decimal
/// places. Two rows sharing a key are a configuration error.
pub fn build_embedding_lookup(table: &Tensor, digits: u32) -> Result<EmbeddingLookup> {
    if table.shape().len() != 2 {
        return Err(dim_err!("embedding table must be [vocab × dim], got {:?}", table.shape()));
    }
    let mut lk = EmbeddingLookup {
        digits,
        dim: table.shape()[1],
        map: HashMap::with_capacity(table.rows()),
    };
    for (t, row) in table.iter_rows().enumerate() {
        let k = lk.key(row);
        if let Some(prev) = lk.map.insert(k, t) {
            return Err(config_err!(
                "tokens {} and {} collide at {} digits",
                prev,
                t,
                digits
            ));
        }
    }
    Ok(lk)
}

/// Decodes a concatenated `[seq_len · dim]` vector position by position.
pub fn reconstruct_tokens(x: &[f64], lookup: &EmbeddingLookup, seq_len: usize) -> Result<Vec<i64>> {
    if x.len() != seq_len * lookup.dim {
        return Err(dim_err!(
            "candidate of length {} is not {} positions of {}",
            x.len(),
            seq_len,
            lookup.dim
        ));
    }
    Ok(x
        .chunks(lookup.dim)
        .map(|v| lookup.lookup(v).map_or(SENTINEL, |t| t as i64))
        .collect())
}

/// Token-level scoring: a candidate is exact when it decodes, without any
/// sentinel, to a sequence of the batch (`tokens`, `[B × seq_len]`).
pub fn score_tokens(extraction: &Extraction, lookup: &EmbeddingLookup, tokens: &Tensor) -> Result<AttackMetrics> {
    let b = tokens.rows();
    let seq_len = tokens.row_len();
    let mut index: HashMap<Vec<i64>, Vec<usize>> = HashMap::new();
    for (i, row) in tokens.iter_rows().enumerate() {
        index.entry(row.iter().map(|&t| t as i64).collect()).or_default().push(i);
    }
    let mut hit = vec![false; b];
    let mut g0 = 0;
    for c in &extraction.candidates {
        let seq = reconstruct_tokens(c.x.data(), lookup, seq_len)?;
        if seq.contains(&SENTINEL) {
            continue;
        }
        if let Some(rows) = index.get(&seq) {
            g0 += 1;
            rows.iter().for_each(|&r| hit[r] = true);
        }
    }
    let b0 = hit.iter().filter(|h| **h).count();
    Ok(AttackMetrics::from_counts(extraction.rows, b, extraction.active(), g0, b0))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::attack::{extract_from_model, EPS_ACTIVE};
    use crate::init::{init_random, init_trap_layer, RandomScheme, TrapConfig};
    use crate::nn::{self, Dense, Embedding, Layer, Model, Task};
    use crate::rng;
    use rand::Rng as _;

    fn table(vocab: usize, dim: usize, seed: u64) -> Tensor {
        let mut r = rng::seeded(seed);
        Tensor::from_fn(&[vocab, dim], |_| r.random::<f64>())
    }

    #[test]
    fn round_trip_and_small_perturbation() {
        let t = table(50, 8, 1);
        let lk = build_embedding_lookup(&t, 6).unwrap();
        for tok in 0..50 {
            assert_eq!(lk.lookup(t.row(tok)), Some(tok));
            let moved: Vec<f64> = t.row(tok).iter().map(|v| v + 1e-12).collect();
            assert_eq!(lk.lookup(&moved), Some(tok));
        }
        assert_eq!(lk.lookup(&[0.0; 8]), None);
    }

    #[test]
    fn collisions_are_errors() {
        let mut t = table(4, 3, 2);
        let r0 = t.row(0).to_vec();
        t.row_mut(3).copy_from_slice(&r0);
        t.row_mut(3)[1] += 1e-8;
        assert!(build_embedding_lookup(&t, 6).is_err());
        assert!(build_embedding_lookup(&t, 9).is_ok());
    }

    #[test]
    fn large_vocab_has_no_collisions() {
        let t = table(10_000, 250, 3);
        assert_eq!(build_embedding_lookup(&t, 6).unwrap().len(), 10_000);
    }

    #[test]
    fn length_mismatch_and_dead_rows() {
        let t = table(5, 4, 4);
        let lk = build_embedding_lookup(&t, 6).unwrap();
        assert!(reconstruct_tokens(&[0.0; 7], &lk, 2).is_err());
        assert_eq!(reconstruct_tokens(&[0.0; 8], &lk, 2).unwrap(), vec![SENTINEL, SENTINEL]);
    }

    #[test]
    fn single_sentence_through_trap_layer() {
        let (vocab, dim, seq) = (30, 6, 5);
        let mut m = Model::new(
            vec![seq],
            vec![
                Layer::Embedding(Embedding::new(vocab, dim)),
                Layer::Dense(Dense::new(seq * dim, 40)),
                Layer::Relu,
                Layer::Dense(Dense::new(40, 1)),
            ],
            Task::Binary,
        )
        .unwrap();
        let mut r = rng::seeded(5);
        init_random(&mut m, RandomScheme::XavierUniform, &mut r).unwrap();
        init_trap_layer(&mut m, 1, &TrapConfig::new(0.9, 0), &mut r).unwrap();
        let sent = Tensor::from_rows(&[[3.0, 17.0, 0.0, 29.0, 3.0]]).unwrap();
        let g = nn::gradients(&m, &sent, &Tensor::vector(vec![1.0]).unwrap()).unwrap();
        let ex = extract_from_model(&m, &g, 1, None, EPS_ACTIVE).unwrap();
        assert!(ex.active() > 0);
        let Layer::Embedding(e) = &m.layers()[0] else { unreachable!() };
        let lk = build_embedding_lookup(&e.table, 6).unwrap();
        for c in &ex.candidates {
            assert_eq!(reconstruct_tokens(c.x.data(), &lk, seq).unwrap(), vec![3, 17, 0, 29, 3]);
        }
        let m = score_tokens(&ex, &lk, &sent).unwrap();
        assert_eq!(m.r, 1.0);
    }
}
