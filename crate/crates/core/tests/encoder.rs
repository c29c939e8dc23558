use proptest::prelude::*;
use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use dualinc::encoder::{fnv1a64, FeatureSurrogate, SurrogateEncoder, DEFAULT_BUCKETS};
use dualinc::Error;

const REGRESSION_COSINE: f64 = 0.245_105_014_149_000_43;

fn dot(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| x * y).sum()
}

fn random_sentence(rng: &mut ChaCha8Rng) -> String {
    let n = rng.gen_range(1..12);
    (0..n)
        .map(|_| {
            let len = rng.gen_range(1..9);
            (0..len)
                .map(|_| rng.gen_range(b'a'..=b'z') as char)
                .collect::<String>()
        })
        .collect::<Vec<_>>()
        .join(" ")
}

#[test]
fn encoding_is_deterministic() {
    let enc = SurrogateEncoder::new(64, 0).unwrap();
    let a = enc.encode("sort the letters : d a c").unwrap();
    let b = enc.encode("sort the letters : d a c").unwrap();
    assert!(a.iter().zip(&b).all(|(x, y)| x.to_bits() == y.to_bits()));
    let again = SurrogateEncoder::new(64, 0).unwrap();
    assert_eq!(again.encode("sort the letters : d a c").unwrap(), a);
}

#[test]
fn outputs_have_unit_norm() {
    let enc = SurrogateEncoder::new(64, 0).unwrap();
    let mut rng = ChaCha8Rng::seed_from_u64(1);
    for _ in 0..1000 {
        let v = enc.encode(&random_sentence(&mut rng)).unwrap();
        assert_eq!(v.len(), 64);
        assert!((dot(&v, &v).sqrt() - 1.0).abs() <= 1e-12);
    }
}

#[test]
fn regression_cosine_is_frozen() {
    let enc = SurrogateEncoder::new(64, 0).unwrap();
    let a = enc.encode("reverse the sequence").unwrap();
    let b = enc.encode("add the numbers modulo p").unwrap();
    let c = dot(&a, &b);
    assert!(c < 0.9);
    assert!((c - REGRESSION_COSINE).abs() < 1e-12, "cosine {c:.17}");
}

#[test]
fn matches_bucket_average_oracle() {
    let enc = SurrogateEncoder::new(16, 3).unwrap();
    let s = "Copy With X Masked : a x b";
    let mut acc = vec![0.0; 16];
    let tokens: Vec<&str> = s.split_whitespace().collect();
    for t in &tokens {
        let bucket = (fnv1a64(t.to_lowercase().as_bytes()) % DEFAULT_BUCKETS as u64) as usize;
        for (a, v) in acc.iter_mut().zip(enc.bucket_vector(bucket)) {
            *a += v / tokens.len() as f64;
        }
    }
    let n = dot(&acc, &acc).sqrt();
    let got = enc.encode(s).unwrap();
    for (g, a) in got.iter().zip(&acc) {
        assert!((g - a / n).abs() < 1e-12);
    }
}

#[test]
fn case_and_spacing_do_not_matter() {
    let enc = SurrogateEncoder::new(32, 0).unwrap();
    assert_eq!(
        enc.encode("Reverse THE sequence").unwrap(),
        enc.encode("  reverse   the\tsequence ").unwrap()
    );
}

#[test]
fn empty_instruction_is_degenerate() {
    let enc = SurrogateEncoder::new(8, 0).unwrap();
    for s in ["", "   ", "\n\t"] {
        assert!(matches!(enc.encode(s), Err(Error::DegenerateInput(_))));
    }
}

#[test]
fn distinct_seeds_give_distinct_tables() {
    let a = SurrogateEncoder::new(8, 0).unwrap();
    let b = SurrogateEncoder::new(8, 1).unwrap();
    assert!((0..a.buckets()).any(|k| a.bucket_vector(k) != b.bucket_vector(k)));
}

#[test]
fn table_survives_serialization() {
    let enc = SurrogateEncoder::new(8, 5).unwrap();
    let back: SurrogateEncoder =
        serde_json::from_str(&serde_json::to_string(&enc).unwrap()).unwrap();
    assert_eq!(back, enc);
    back.verify().unwrap();
}

#[test]
fn feature_fallback_is_fixed_unit_vector() {
    let fs = FeatureSurrogate::new(4, 6, 0).unwrap();
    let none = fs.encode(None).unwrap();
    assert_eq!(none, fs.encode(Some(&[1.0; 4])).unwrap());
    assert!((dot(&none, &none) - 1.0).abs() < 1e-12);
    assert!(fs.encode(Some(&[1.0; 3])).is_err());
    assert!(matches!(
        fs.encode(Some(&[0.0; 4])),
        Err(Error::DegenerateInput(_))
    ));
}

proptest! {
    #[test]
    fn permutation_invariance(seed in any::<u64>()) {
        let enc = SurrogateEncoder::new(24, 7).unwrap();
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let sentence = random_sentence(&mut rng);
        let mut tokens: Vec<&str> = sentence.split_whitespace().collect();
        tokens.shuffle(&mut rng);
        let shuffled = tokens.join(" ");
        let a = enc.encode(&sentence).unwrap();
        let b = enc.encode(&shuffled).unwrap();
        prop_assert!(a.iter().zip(&b).all(|(x, y)| x.to_bits() == y.to_bits()));
    }
}
