//! Synthetic closed-vocabulary fact world.
//!
//! Words are pseudoword syllable strings, so nothing collides with real
//! language. Each relation has one canonical template and three
//! paraphrases; all four end with the same two relation words right
//! before the object position, which is what lets an edit made through
//! the canonical prompt carry over to the paraphrases.

use std::collections::HashSet;
use std::io::{BufRead, BufWriter, Write};
use std::path::Path;

use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::model::{Tokenizer, TrainExample};

pub const SUBJECT_SLOT: &str = "<s>";

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct WorldConfig {
    pub n_subjects: usize,
    pub n_relations: usize,
    pub n_objects: usize,
    pub n_facts: usize,
    pub seed: u64,
}

impl Default for WorldConfig {
    fn default() -> Self {
        WorldConfig {
            n_subjects: 200,
            n_relations: 10,
            n_objects: 100,
            n_facts: 1000,
            seed: 1,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Relation {
    pub name: String,
    /// `templates[0]` is canonical; each contains `<s>` exactly once.
    pub templates: Vec<String>,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct Fact {
    pub subject: usize,
    pub relation: usize,
    pub object: usize,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct FactWorld {
    pub config: WorldConfig,
    pub subjects: Vec<String>,
    pub objects: Vec<String>,
    pub relations: Vec<Relation>,
    pub facts: Vec<Fact>,
    pub vocab: Vec<String>,
}

const CONSONANTS: &[&str] = &[
    "b", "d", "f", "g", "k", "l", "m", "n", "p", "r", "s", "t", "v", "z",
];
const VOWELS: &[&str] = &["a", "e", "i", "o", "u"];

fn pseudoword(rng: &mut ChaCha8Rng, syllables: usize) -> String {
    let mut w = String::new();
    for _ in 0..syllables {
        w.push_str(CONSONANTS[rng.gen_range(0..CONSONANTS.len())]);
        w.push_str(VOWELS[rng.gen_range(0..VOWELS.len())]);
    }
    w
}

fn draw_words(rng: &mut ChaCha8Rng, n: usize, taken: &mut HashSet<String>) -> Vec<String> {
    let mut out = Vec::with_capacity(n);
    while out.len() < n {
        let syl = rng.gen_range(2..=3);
        let w = pseudoword(rng, syl);
        if taken.insert(w.clone()) {
            out.push(w);
        }
    }
    out
}

impl FactWorld {
    pub fn generate(config: WorldConfig) -> Result<FactWorld> {
        if config.n_objects < 2 {
            return Err(Error::Config("need at least two objects".into()));
        }
        if config.n_facts > config.n_subjects * config.n_relations {
            return Err(Error::Config(format!(
                "{} facts cannot be functional over a {}x{} subject-relation grid",
                config.n_facts, config.n_subjects, config.n_relations
            )));
        }
        let mut rng = ChaCha8Rng::seed_from_u64(config.seed);
        let mut taken = HashSet::new();
        taken.insert(SUBJECT_SLOT.to_string());
        let subjects = draw_words(&mut rng, config.n_subjects, &mut taken);
        let objects = draw_words(&mut rng, config.n_objects, &mut taken);

        let mut relations = Vec::with_capacity(config.n_relations);
        for i in 0..config.n_relations {
            // Two core words shared by every template of the relation, two
            // filler words that form the paraphrase prefixes. The subject
            // sits last so its hidden state sees the relation context and
            // the last prompt token is the last subject token.
            let core = draw_words(&mut rng, 2, &mut taken);
            let fill = draw_words(&mut rng, 2, &mut taken);
            let suffix = format!("{} {} {SUBJECT_SLOT}", core[0], core[1]);
            relations.push(Relation {
                name: format!("rel{i}"),
                templates: vec![
                    suffix.clone(),
                    format!("{} {suffix}", fill[0]),
                    format!("{} {suffix}", fill[1]),
                    format!("{} {} {suffix}", fill[0], fill[1]),
                ],
            });
        }

        let mut pairs: Vec<(usize, usize)> = (0..config.n_subjects)
            .flat_map(|s| (0..config.n_relations).map(move |r| (s, r)))
            .collect();
        pairs.shuffle(&mut rng);
        let facts: Vec<Fact> = pairs[..config.n_facts]
            .iter()
            .map(|&(subject, relation)| Fact {
                subject,
                relation,
                object: rng.gen_range(0..config.n_objects),
            })
            .collect();

        let mut vocab: Vec<String> = taken.into_iter().collect();
        vocab.retain(|w| w != SUBJECT_SLOT);
        vocab.sort();
        Ok(FactWorld {
            config,
            subjects,
            objects,
            relations,
            facts,
            vocab,
        })
    }

    pub fn tokenizer(&self) -> Result<Tokenizer> {
        Tokenizer::new(self.vocab.clone())
    }

    /// Prompt text for `fact` under template `ti` (0 is canonical).
    pub fn surface(&self, fact: &Fact, ti: usize) -> String {
        self.relations[fact.relation].templates[ti]
            .replace(SUBJECT_SLOT, &self.subjects[fact.subject])
    }

    pub fn canonical_prompt(&self, fact: &Fact) -> String {
        self.surface(fact, 0)
    }

    pub fn paraphrases(&self, fact: &Fact) -> Vec<String> {
        (1..self.relations[fact.relation].templates.len())
            .map(|ti| self.surface(fact, ti))
            .collect()
    }

    pub fn object_word(&self, fact: &Fact) -> &str {
        &self.objects[fact.object]
    }

    /// One training example per surface form of every fact.
    pub fn training_examples(&self, tok: &Tokenizer) -> Result<Vec<TrainExample>> {
        let mut out = Vec::with_capacity(self.facts.len() * 4);
        for fact in &self.facts {
            let target = tok.id(self.object_word(fact))?;
            for ti in 0..self.relations[fact.relation].templates.len() {
                out.push(TrainExample {
                    ids: tok.encode(&self.surface(fact, ti))?,
                    target,
                });
            }
        }
        Ok(out)
    }

    /// Canonical-prompt probes for recall measurement.
    pub fn recall_probes(&self, tok: &Tokenizer) -> Result<Vec<TrainExample>> {
        self.facts
            .iter()
            .map(|f| {
                Ok(TrainExample {
                    ids: tok.encode(&self.canonical_prompt(f))?,
                    target: tok.id(self.object_word(f))?,
                })
            })
            .collect()
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        let f = std::fs::File::create(path)?;
        serde_json::to_writer(BufWriter::new(f), self)?;
        Ok(())
    }

    pub fn load(path: &Path) -> Result<FactWorld> {
        let f = std::fs::File::open(path)?;
        let world: FactWorld = serde_json::from_reader(std::io::BufReader::new(f))?;
        world.check()?;
        Ok(world)
    }

    fn check(&self) -> Result<()> {
        let mut seen = HashSet::new();
        for f in &self.facts {
            if f.subject >= self.subjects.len()
                || f.relation >= self.relations.len()
                || f.object >= self.objects.len()
            {
                return Err(Error::Schema("fact index out of range".into()));
            }
            if !seen.insert((f.subject, f.relation)) {
                return Err(Error::Schema(format!(
                    "duplicate fact for subject {} relation {}",
                    f.subject, f.relation
                )));
            }
        }
        for r in &self.relations {
            for t in &r.templates {
                if t.matches(SUBJECT_SLOT).count() != 1 {
                    return Err(Error::Schema(format!(
                        "template {t:?} must contain {SUBJECT_SLOT} exactly once"
                    )));
                }
            }
        }
        Ok(())
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct LocalityProbe {
    pub prompt: String,
    pub expected: String,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EditRequest {
    pub subject: String,
    pub prompt: String,
    pub target_old: String,
    pub target_new: String,
    pub paraphrases: Vec<String>,
    pub locality: Vec<LocalityProbe>,
}

/// Draws `t` facts to edit and pairs each with locality probes taken from
/// facts that are never edited in the batch, so a probe's expected answer
/// stays valid for the whole run.
pub fn make_edit_requests(
    world: &FactWorld,
    t: usize,
    probes_per_edit: usize,
    seed: u64,
) -> Result<Vec<EditRequest>> {
    if t > world.facts.len() {
        return Err(Error::Config(format!(
            "cannot edit {t} facts out of {}",
            world.facts.len()
        )));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut order: Vec<usize> = (0..world.facts.len()).collect();
    order.shuffle(&mut rng);
    let (edit_idx, pool_idx) = order.split_at(t);
    if pool_idx.len() < probes_per_edit {
        return Err(Error::Config("not enough untouched facts for locality probes".into()));
    }
    let mut out = Vec::with_capacity(t);
    for &fi in edit_idx {
        let fact = &world.facts[fi];
        let mut new_obj = rng.gen_range(0..world.objects.len());
        while new_obj == fact.object {
            new_obj = rng.gen_range(0..world.objects.len());
        }
        let mut probe_source = pool_idx.to_vec();
        probe_source.shuffle(&mut rng);
        let locality = probe_source[..probes_per_edit]
            .iter()
            .map(|&pi| {
                let pf = &world.facts[pi];
                LocalityProbe {
                    prompt: world.canonical_prompt(pf),
                    expected: world.object_word(pf).to_string(),
                }
            })
            .collect();
        out.push(EditRequest {
            subject: world.subjects[fact.subject].clone(),
            prompt: world.canonical_prompt(fact),
            target_old: world.object_word(fact).to_string(),
            target_new: world.objects[new_obj].clone(),
            paraphrases: world.paraphrases(fact),
            locality,
        });
    }
    Ok(out)
}

pub fn write_requests_jsonl(reqs: &[EditRequest], path: &Path) -> Result<()> {
    let f = std::fs::File::create(path)?;
    let mut w = BufWriter::new(f);
    for r in reqs {
        serde_json::to_writer(&mut w, r)?;
        w.write_all(b"\n")?;
    }
    w.flush()?;
    Ok(())
}

pub fn read_requests_jsonl(path: &Path) -> Result<Vec<EditRequest>> {
    let f = std::fs::File::open(path)?;
    let mut out = Vec::new();
    for (i, line) in std::io::BufReader::new(f).lines().enumerate() {
        let line = line?;
        if line.trim().is_empty() {
            continue;
        }
        let req: EditRequest = serde_json::from_str(&line)
            .map_err(|e| Error::Schema(format!("line {}: {e}", i + 1)))?;
        if req.target_new == req.target_old {
            return Err(Error::Schema(format!(
                "line {}: edit target equals the current object",
                i + 1
            )));
        }
        out.push(req);
    }
    Ok(out)
}

#[cfg(test)]
mod tests {
    use super::*;

    fn small_world() -> FactWorld {
        FactWorld::generate(WorldConfig {
            n_subjects: 12,
            n_relations: 3,
            n_objects: 8,
            n_facts: 20,
            seed: 5,
        })
        .unwrap()
    }

    #[test]
    fn generation_is_seed_deterministic() {
        let a = small_world();
        let b = small_world();
        assert_eq!(a, b);
        let c = FactWorld::generate(WorldConfig {
            seed: 6,
            ..a.config.clone()
        })
        .unwrap();
        assert_ne!(a.subjects, c.subjects);
    }

    #[test]
    fn facts_are_functional_and_templates_well_formed() {
        let w = small_world();
        w.check().unwrap();
        let mut pairs = HashSet::new();
        for f in &w.facts {
            assert!(pairs.insert((f.subject, f.relation)));
        }
        for r in &w.relations {
            assert_eq!(r.templates.len(), 4);
            let canon_suffix = r.templates[0].clone();
            for t in &r.templates {
                assert!(t.ends_with(&canon_suffix), "{t:?} vs {canon_suffix:?}");
            }
        }
    }

    #[test]
    fn surfaces_tokenize_with_world_tokenizer() {
        let w = small_world();
        let tok = w.tokenizer().unwrap();
        let examples = w.training_examples(&tok).unwrap();
        assert_eq!(examples.len(), w.facts.len() * 4);
        for e in &examples {
            assert!(e.ids.len() >= 3 && e.ids.len() <= 5);
        }
    }

    #[test]
    fn world_json_round_trip() {
        let w = small_world();
        let dir = tempfile::tempdir().unwrap();
        let p = dir.path().join("world.json");
        w.save(&p).unwrap();
        let w2 = FactWorld::load(&p).unwrap();
        assert_eq!(w, w2);
    }

    #[test]
    fn edit_requests_respect_the_contract() {
        let w = small_world();
        let reqs = make_edit_requests(&w, 6, 3, 9).unwrap();
        assert_eq!(reqs.len(), 6);
        let edited_prompts: HashSet<&str> = reqs.iter().map(|r| r.prompt.as_str()).collect();
        for r in &reqs {
            assert_ne!(r.target_new, r.target_old);
            assert_eq!(r.paraphrases.len(), 3);
            for p in &r.paraphrases {
                assert!(p.ends_with(r.prompt.as_str()));
            }
            assert_eq!(r.locality.len(), 3);
            for probe in &r.locality {
                assert!(!edited_prompts.contains(probe.prompt.as_str()));
            }
        }
        // Same seed draws the same requests.
        let again = make_edit_requests(&w, 6, 3, 9).unwrap();
        assert_eq!(reqs, again);
    }

    #[test]
    fn jsonl_round_trip_and_rejects_no_op_edit() {
        let w = small_world();
        let mut reqs = make_edit_requests(&w, 4, 2, 3).unwrap();
        let dir = tempfile::tempdir().unwrap();
        let p = dir.path().join("edits.jsonl");
        write_requests_jsonl(&reqs, &p).unwrap();
        let back = read_requests_jsonl(&p).unwrap();
        assert_eq!(reqs, back);

        reqs[0].target_new = reqs[0].target_old.clone();
        write_requests_jsonl(&reqs, &p).unwrap();
        assert!(read_requests_jsonl(&p).is_err());
    }
}
