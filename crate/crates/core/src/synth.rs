//! Seeded generator for a synthetic English-like text corpus.
//!
//! Paragraphs follow a protagonist and a topic cluster. Nouns and verbs
//! prefer their paragraph's cluster, subjects agree with verbs in number,
//! and names recur across sentences, so the text rewards models at several
//! ranges: spelling, local grammar and paragraph-level copying.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SynthConfig {
    pub names: usize,
    pub nouns: usize,
    pub verbs: usize,
    pub adjectives: usize,
    /// Nouns and verbs are partitioned into this many topic clusters.
    pub clusters: usize,
    /// Probability that a content word comes from the paragraph's cluster.
    pub topic_affinity: f64,
}

impl Default for SynthConfig {
    fn default() -> Self {
        SynthConfig { names: 48, nouns: 240, verbs: 120, adjectives: 96, clusters: 12, topic_affinity: 0.8 }
    }
}

const ONSETS: [&str; 18] = ["b", "d", "f", "g", "k", "l", "m", "n", "p", "r", "s", "t", "v", "z", "br", "st", "tr", "sh"];
const VOWELS: [&str; 7] = ["a", "e", "i", "o", "u", "ai", "ou"];
const CODAS: [&str; 6] = ["", "", "n", "r", "l", "m"];

struct Lexicon {
    names: Vec<String>,
    nouns: Vec<String>,
    verbs: Vec<String>,
    adjectives: Vec<String>,
}

fn make_words(rng: &mut ChaCha8Rng, n: usize, syllables: (usize, usize), taken: &mut std::collections::HashSet<String>) -> Vec<String> {
    let mut out = Vec::with_capacity(n);
    while out.len() < n {
        let k = rng.random_range(syllables.0..=syllables.1);
        let mut w = String::new();
        for _ in 0..k {
            w.push_str(ONSETS[rng.random_range(0..ONSETS.len())]);
            w.push_str(VOWELS[rng.random_range(0..VOWELS.len())]);
            w.push_str(CODAS[rng.random_range(0..CODAS.len())]);
        }
        // keep plural/verb suffixes unambiguous
        if w.ends_with('s') || !taken.insert(w.clone()) {
            continue;
        }
        out.push(w);
    }
    out
}

fn capitalize(w: &str) -> String {
    let mut c = w.chars();
    match c.next() {
        Some(f) => f.to_uppercase().chain(c).collect(),
        None => String::new(),
    }
}

/// Zipf-like pick of an index in `0..n` (weight ∝ 1/(rank+1)).
fn zipf(rng: &mut ChaCha8Rng, n: usize) -> usize {
    let h: f64 = (1..=n).map(|r| 1.0 / r as f64).sum();
    let mut u = rng.random::<f64>() * h;
    for r in 0..n {
        u -= 1.0 / (r + 1) as f64;
        if u <= 0.0 {
            return r;
        }
    }
    n - 1
}

struct Writer<'a> {
    lex: &'a Lexicon,
    cfg: &'a SynthConfig,
    rng: ChaCha8Rng,
}

impl Writer<'_> {
    fn pick_in_cluster(&mut self, words: usize, cluster: usize) -> usize {
        let per = words / self.cfg.clusters;
        if self.rng.random::<f64>() < self.cfg.topic_affinity {
            cluster * per + zipf(&mut self.rng, per)
        } else {
            zipf(&mut self.rng, words)
        }
    }

    fn noun(&mut self, cluster: usize, plural: bool) -> String {
        let i = self.pick_in_cluster(self.lex.nouns.len(), cluster);
        let w = &self.lex.nouns[i];
        if plural { format!("{w}s") } else { w.clone() }
    }

    fn verb(&mut self, cluster: usize, singular_subject: bool) -> String {
        let i = self.pick_in_cluster(self.lex.verbs.len(), cluster);
        let w = &self.lex.verbs[i];
        if singular_subject { format!("{w}s") } else { w.clone() }
    }

    fn adjective(&mut self) -> String {
        let i = zipf(&mut self.rng, self.lex.adjectives.len());
        self.lex.adjectives[i].clone()
    }

    fn name(&mut self) -> String {
        let i = zipf(&mut self.rng, self.lex.names.len());
        self.lex.names[i].clone()
    }

    fn object(&mut self, cluster: usize) -> String {
        let plural = self.rng.random_bool(0.3);
        let noun = self.noun(cluster, plural);
        if self.rng.random_bool(0.5) {
            let adj = self.adjective();
            format!("the {adj} {noun}")
        } else {
            format!("the {noun}")
        }
    }

    fn sentence(&mut self, hero: &str, friend: &str, cluster: usize) -> String {
        match self.rng.random_range(0..6) {
            0 => {
                let v = self.verb(cluster, true);
                let o = self.object(cluster);
                format!("{hero} {v} {o}.")
            }
            1 => {
                let plural = self.rng.random_bool(0.5);
                let n = self.noun(cluster, plural);
                let v = self.verb(cluster, !plural);
                format!("the {n} {v} with {hero}.")
            }
            2 => {
                let v = self.verb(cluster, false);
                let o = self.object(cluster);
                format!("{hero} and {friend} {v} {o}.")
            }
            3 => {
                let n = self.noun(cluster, false);
                let a = self.adjective();
                format!("{friend} said that the {n} was {a}.")
            }
            4 => {
                let v = self.verb(cluster, true);
                let o = self.object(cluster);
                format!("then {hero} {v} {o}, and {friend} {} it.", self.verb(cluster, true))
            }
            _ => {
                let a = self.adjective();
                let n = self.noun(cluster, true);
                format!("the {n} of {hero} were {a}.")
            }
        }
    }

    fn paragraph(&mut self) -> String {
        let cluster = self.rng.random_range(0..self.cfg.clusters);
        let hero = self.name();
        let mut friend = self.name();
        while friend == hero {
            friend = self.name();
        }
        let n = self.rng.random_range(3..=6);
        let mut parts = Vec::with_capacity(n + 1);
        for _ in 0..n {
            parts.push(self.sentence(&hero, &friend, cluster));
        }
        parts.push(format!("so ends the tale of {hero}."));
        parts.join(" ")
    }
}

/// Generates roughly `target_len` bytes of text (whole paragraphs, each
/// terminated by a newline). Deterministic in `(config, seed)`.
pub fn generate(config: &SynthConfig, target_len: usize, seed: u64) -> String {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut taken = std::collections::HashSet::new();
    let clusters = config.clusters.max(1);
    let cfg = SynthConfig { clusters, ..config.clone() };
    let lex = Lexicon {
        names: make_words(&mut rng, cfg.names, (2, 3), &mut taken).iter().map(|w| capitalize(w)).collect(),
        nouns: make_words(&mut rng, cfg.nouns.max(clusters), (1, 2), &mut taken),
        verbs: make_words(&mut rng, cfg.verbs.max(clusters), (1, 2), &mut taken),
        adjectives: make_words(&mut rng, cfg.adjectives.max(1), (2, 3), &mut taken),
    };
    let mut w = Writer { lex: &lex, cfg: &cfg, rng };
    let mut out = String::with_capacity(target_len + 512);
    while out.len() < target_len {
        out.push_str(&w.paragraph());
        out.push('\n');
    }
    out
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn deterministic_and_sized() {
        let a = generate(&SynthConfig::default(), 20_000, 3);
        let b = generate(&SynthConfig::default(), 20_000, 3);
        assert_eq!(a, b);
        assert!(a.len() >= 20_000 && a.len() < 21_000);
        assert_ne!(a, generate(&SynthConfig::default(), 20_000, 4));
        assert!(a.is_ascii());
        assert!(a.ends_with('\n'));
    }

    #[test]
    fn small_character_set() {
        let text = generate(&SynthConfig::default(), 50_000, 1);
        let chars: std::collections::BTreeSet<char> = text.chars().collect();
        assert!(chars.len() < 60, "{} distinct characters", chars.len());
    }
}
