//! Frozen instruction encoder: hashed bag of tokens through a fixed random
//! table, averaged and L2-normalised.

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

pub const DEFAULT_BUCKETS: usize = 4096;

const FNV_OFFSET: u64 = 0xcbf2_9ce4_8422_2325;
const FNV_PRIME: u64 = 0x0000_0100_0000_01b3;

pub fn fnv1a64(bytes: &[u8]) -> u64 {
    bytes.iter().fold(FNV_OFFSET, |h, &b| {
        (h ^ u64::from(b)).wrapping_mul(FNV_PRIME)
    })
}

fn normalize(mut v: Vec<f64>, what: &str) -> Result<Vec<f64>> {
    let norm = v.iter().map(|x| x * x).sum::<f64>().sqrt();
    if !norm.is_finite() || norm <= 1e-300 {
        return Err(Error::DegenerateInput(format!("{what} has zero norm")));
    }
    v.iter_mut().for_each(|x| *x /= norm);
    Ok(v)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SurrogateEncoder {
    embed_dim: usize,
    buckets: usize,
    seed: u64,
    table: Vec<f64>,
}

impl SurrogateEncoder {
    pub fn new(embed_dim: usize, seed: u64) -> Result<Self> {
        Self::with_buckets(embed_dim, DEFAULT_BUCKETS, seed)
    }

    pub fn with_buckets(embed_dim: usize, buckets: usize, seed: u64) -> Result<Self> {
        if embed_dim == 0 || buckets == 0 {
            return Err(Error::Config(
                "encoder needs positive embed_dim and bucket count".into(),
            ));
        }
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let normal = Normal::new(0.0, 1.0).expect("valid");
        let table = (0..embed_dim * buckets)
            .map(|_| normal.sample(&mut rng))
            .collect();
        Ok(SurrogateEncoder {
            embed_dim,
            buckets,
            seed,
            table,
        })
    }

    pub fn embed_dim(&self) -> usize {
        self.embed_dim
    }

    pub fn seed(&self) -> u64 {
        self.seed
    }

    pub fn buckets(&self) -> usize {
        self.buckets
    }

    pub fn bucket_vector(&self, bucket: usize) -> &[f64] {
        &self.table[bucket * self.embed_dim..(bucket + 1) * self.embed_dim]
    }

    pub fn bucket_of(&self, token: &str) -> usize {
        (fnv1a64(token.to_lowercase().as_bytes()) % self.buckets as u64) as usize
    }

    /// Unit-norm embedding of `s`. Buckets are summed in sorted order, so the
    /// result is bitwise independent of token order.
    pub fn encode(&self, s: &str) -> Result<Vec<f64>> {
        let mut ids: Vec<usize> = s.split_whitespace().map(|t| self.bucket_of(t)).collect();
        if ids.is_empty() {
            return Err(Error::DegenerateInput("empty instruction".into()));
        }
        ids.sort_unstable();
        let mut acc = vec![0.0; self.embed_dim];
        for &b in &ids {
            for (a, v) in acc.iter_mut().zip(self.bucket_vector(b)) {
                *a += v;
            }
        }
        let n = ids.len() as f64;
        acc.iter_mut().for_each(|a| *a /= n);
        normalize(acc, "instruction embedding")
    }

    /// Checks that the table matches the one regenerated from the seed.
    pub fn verify(&self) -> Result<()> {
        let fresh = Self::with_buckets(self.embed_dim, self.buckets, self.seed)?;
        if fresh.table.len() != self.table.len()
            || fresh
                .table
                .iter()
                .zip(&self.table)
                .any(|(a, b)| a.to_bits() != b.to_bits())
        {
            return Err(Error::Contract(
                "encoder table differs from its seed".into(),
            ));
        }
        Ok(())
    }
}

/// Frozen random projection of the instance feature vector, used when keys
/// are matched against features instead of instruction text.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct FeatureSurrogate {
    feature_dim: usize,
    embed_dim: usize,
    projection: Vec<f64>,
}

impl FeatureSurrogate {
    pub fn new(feature_dim: usize, embed_dim: usize, seed: u64) -> Result<Self> {
        if feature_dim == 0 || embed_dim == 0 {
            return Err(Error::Config(
                "feature surrogate needs positive dimensions".into(),
            ));
        }
        let mut rng = ChaCha8Rng::seed_from_u64(seed ^ 0xfea7_0e5e);
        let normal = Normal::new(0.0, 1.0).expect("valid");
        let projection = (0..feature_dim * embed_dim)
            .map(|_| normal.sample(&mut rng))
            .collect();
        Ok(FeatureSurrogate {
            feature_dim,
            embed_dim,
            projection,
        })
    }

    /// Instances without features all map to the projection of a constant
    /// vector.
    pub fn encode(&self, features: Option<&[f64]>) -> Result<Vec<f64>> {
        let ones = vec![1.0; self.feature_dim];
        let f = features.unwrap_or(&ones);
        if f.len() != self.feature_dim {
            return Err(Error::Dimension {
                op: "feature_surrogate",
                detail: format!("{} features, expected {}", f.len(), self.feature_dim),
            });
        }
        let mut out = vec![0.0; self.embed_dim];
        for (i, &x) in f.iter().enumerate() {
            let row = &self.projection[i * self.embed_dim..(i + 1) * self.embed_dim];
            for (o, p) in out.iter_mut().zip(row) {
                *o += x * p;
            }
        }
        normalize(out, "feature embedding")
    }
}
