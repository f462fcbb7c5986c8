//! Seeded synthetic record-to-summary task.
//!
//! Sources are short field lists (`name ann. age 42. city oslo. job cook.`);
//! the main task restates them as prose, the pre-task copies the values.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::perturb::SynonymLexicon;
use crate::trainer::TrainExample;

const NAMES: [&str; 12] = ["ann", "bob", "eve", "max", "ida", "leo", "mia", "tom", "zoe", "sam", "kim", "ray"];
const CITIES: [&str; 8] = ["oslo", "rome", "lima", "kyiv", "bern", "doha", "riga", "baku"];
const JOBS: [&str; 8] = ["cook", "poet", "nurse", "pilot", "judge", "baker", "chef", "smith"];

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Record {
    pub name: &'static str,
    pub age: u32,
    pub city: &'static str,
    pub job: &'static str,
}

impl Record {
    pub fn source(&self) -> String {
        format!("name {}. age {}. city {}. job {}.", self.name, self.age, self.city, self.job)
    }

    pub fn summary(&self) -> String {
        format!("{} is {}. {} is a {} in {}.", self.name, self.age, self.name, self.job, self.city)
    }

    pub fn copy_target(&self) -> String {
        format!("{}. {}. {}. {}.", self.name, self.age, self.city, self.job)
    }
}

pub fn records(n: usize, seed: u64) -> Vec<Record> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    (0..n)
        .map(|_| Record {
            name: NAMES[rng.random_range(0..NAMES.len())],
            age: rng.random_range(10..100),
            city: CITIES[rng.random_range(0..CITIES.len())],
            job: JOBS[rng.random_range(0..JOBS.len())],
        })
        .collect()
}

fn examples(recs: &[Record], prefix: &str, target: impl Fn(&Record) -> String) -> Vec<TrainExample> {
    recs.iter()
        .enumerate()
        .map(|(i, r)| TrainExample { id: format!("{prefix}{i:04}"), src: r.source(), tgt: target(r) })
        .collect()
}

/// Main task: field list to two-sentence summary.
pub fn summary_task(n: usize, seed: u64) -> Vec<TrainExample> {
    examples(&records(n, seed), "rec", Record::summary)
}

/// Pre-task used to train the frozen base: copy the field values.
pub fn copy_task(n: usize, seed: u64) -> Vec<TrainExample> {
    examples(&records(n, seed), "cp", Record::copy_target)
}

/// Field-name synonyms for the synthetic sources.
pub fn lexicon() -> SynonymLexicon {
    SynonymLexicon::new(
        [("name", "called"), ("age", "aged"), ("city", "town"), ("job", "work")]
            .into_iter()
            .map(|(k, v)| (k.to_string(), vec![v.to_string()])),
    )
}
