use ndarray::Array2;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use smmini_core::eval::{EvalItem, Scorer};
use smmini_core::Result;

pub const V: usize = 259;

/// Bigram model over bytes: the next-token distribution depends only on the
/// current token. Log-probabilities are fixed by a seeded table.
pub struct Bigram {
    pub table: Vec<Vec<f64>>,
    pub shift: f64,
}

impl Bigram {
    pub fn new(seed: u64) -> Self {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let table = (0..V)
            .map(|_| {
                let w: Vec<f64> = (0..V).map(|_| rng.random_range(0.01..1.0f64).powi(3)).collect();
                let z: f64 = w.iter().sum();
                w.iter().map(|x| (x / z).ln()).collect()
            })
            .collect();
        Bigram { table, shift: 0.0 }
    }
}

impl Scorer for Bigram {
    fn max_len(&self) -> usize {
        512
    }
    fn log_probs(&self, tokens: &[u32]) -> Result<Array2<f64>> {
        Ok(Array2::from_shape_fn((tokens.len(), V), |(t, v)| {
            self.table[tokens[t] as usize][v] + self.shift
        }))
    }
}

/// Independent reference: render by hand, score bytes straight from the
/// table, pick the first maximum.
pub fn reference_predict(m: &Bigram, item: &EvalItem) -> usize {
    let mut segment = if item.context.is_empty() {
        item.stem.clone()
    } else {
        format!("{} {}", item.context, item.stem)
    };
    if !(segment.ends_with('.') || segment.ends_with('?') || segment.ends_with('!')) {
        segment.push('.');
    }
    let prompt = format!("Question: {segment} Answer: ");
    let mut best = (f64::NEG_INFINITY, 0);
    for (i, opt) in item.options.iter().enumerate() {
        let mut prev = prompt.as_bytes().last().copied().unwrap() as usize;
        let mut sum = 0.0;
        for &b in opt.as_bytes() {
            sum += m.table[prev][b as usize];
            prev = b as usize;
        }
        let score = sum / opt.len() as f64;
        if score > best.0 {
            best = (score, i);
        }
    }
    best.1
}

pub fn word(rng: &mut ChaCha8Rng, len: usize) -> String {
    (0..len).map(|_| rng.random_range(b'a'..=b'z') as char).collect()
}

pub fn synthetic_benchmark(n: usize, seed: u64) -> Vec<EvalItem> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    (0..n)
        .map(|i| {
            let pubmed = i % 3 == 0;
            let options: Vec<String> = if pubmed {
                vec!["yes".into(), "no".into(), "maybe".into()]
            } else {
                let mut o: Vec<String> = (0..5)
                    .map(|_| {
                        let len = rng.random_range(2..12);
                        word(&mut rng, len)
                    })
                    .collect();
                o.sort();
                o.dedup();
                while o.len() < 2 {
                    o.push(word(&mut rng, 13));
                }
                o
            };
            EvalItem {
                dataset_tag: "synthetic".into(),
                context: if pubmed { word(&mut rng, 40) } else { String::new() },
                stem: format!("{} {}?", word(&mut rng, 6), word(&mut rng, 5)),
                answer_index: rng.random_range(0..options.len()),
                options,
            }
        })
        .collect()
}
